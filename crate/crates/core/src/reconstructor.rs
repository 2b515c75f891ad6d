//! Arbitrary-size reconstruction: tiled inference over coordinate-indexed
//! noise, then binarization of the channel-mean field.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::network::ModelParams;
use crate::tensor::Tensor5;
use crate::volume::{Volume3D, VolumeData, PORE, SOLID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinarizeMode {
    /// Threshold at the quantile that reproduces the target porosity.
    #[default]
    Quantile,
    /// Otsu's between-class variance threshold; ignores the target.
    Otsu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconConfig {
    /// Output dims `(L, H, W)`.
    pub dims: [usize; 3],
    /// Output tile dims; the whole volume in one pass when absent.
    pub sub_block: Option<[usize; 3]>,
    pub seed: u64,
    /// Target porosity; the model's reference porosity when absent.
    pub porosity: Option<f64>,
    pub binarize: BinarizeMode,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self { dims: [64, 64, 64], sub_block: None, seed: 0, porosity: None, binarize: BinarizeMode::Quantile }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// Three-channel network output.
    pub continuous: Volume3D,
    pub binary: Volume3D,
    /// Channel-mean value above which a voxel is pore.
    pub threshold: f64,
    pub target_porosity: Option<f64>,
    pub achieved_porosity: f64,
    pub warnings: Vec<String>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `U[0, 1)` noise value of the padded-volume voxel `(z, y, x)`; a pure
/// function of the seed and the coordinate.
pub fn noise_value(seed: u64, z: usize, y: usize, x: usize) -> f64 {
    let mut h = splitmix64(seed);
    for c in [z, y, x] {
        h = splitmix64(h ^ c as u64);
    }
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Noise block of `dims` whose first voxel is `origin` of the padded volume.
pub fn noise_block(seed: u64, origin: [usize; 3], dims: [usize; 3]) -> Tensor5 {
    Tensor5::from_fn([1, 1, dims[0], dims[1], dims[2]], |[_, _, z, y, x]| {
        noise_value(seed, origin[0] + z, origin[1] + y, origin[2] + x)
    })
}

/// Output tile origins and sizes, z-major.
pub fn tiles(dims: [usize; 3], block: [usize; 3]) -> Vec<([usize; 3], [usize; 3])> {
    let starts = |a: usize| (0..dims[a]).step_by(block[a]).map(move |s| (s, block[a].min(dims[a] - s)));
    let mut out = Vec::new();
    for (z, dz) in starts(0) {
        for (y, dy) in starts(1) {
            for (x, dx) in starts(2) {
                out.push(([z, y, x], [dz, dy, dx]));
            }
        }
    }
    out
}

/// Continuous `[1, 3, L, H, W]` output assembled tile by tile.
pub fn forward_tiled(params: &ModelParams, dims: [usize; 3], sub_block: [usize; 3], seed: u64) -> Result<Tensor5> {
    if dims.contains(&0) || sub_block.contains(&0) {
        bail!(InvalidArgument, "output dims {dims:?} and sub-block {sub_block:?} must be at least 1");
    }
    let block = [0, 1, 2].map(|a| sub_block[a].min(dims[a]));
    let pad = params.spec.shrink();
    let c = params.spec.out_channels();
    let mut out = Tensor5::zeros([1, c, dims[0], dims[1], dims[2]]);
    for (origin, size) in tiles(dims, block) {
        let x = noise_block(seed, origin, size.map(|s| s + pad));
        let y = params.forward(&x)?;
        let row = size[2] * c;
        let mut src = 0;
        for z in 0..size[0] {
            for yy in 0..size[1] {
                let dst = out.index(0, 0, origin[0] + z, origin[1] + yy, origin[2]);
                out.data_mut()[dst..dst + row].copy_from_slice(&y.data()[src..src + row]);
                src += row;
            }
        }
    }
    Ok(out)
}

fn channel_means(v: &Volume3D) -> Result<Vec<f64>> {
    match v.data() {
        VolumeData::Continuous { channels, values } => {
            Ok(values.chunks_exact(*channels).map(|c| c.iter().sum::<f64>() / *channels as f64).collect())
        }
        VolumeData::Binary(_) => bail!(InvalidArgument, "binarization needs a continuous volume"),
    }
}

/// Exactly `round(φ·N)` pore voxels: the largest channel means, ties broken
/// by lower voxel index. Returns the volume and the largest solid mean
/// (the threshold); `+∞` when everything is pore is reported as the
/// smallest mean.
pub fn binarize(v: &Volume3D, porosity: f64) -> Result<(Volume3D, f64)> {
    if !(0.0..=1.0).contains(&porosity) {
        bail!(InvalidArgument, "target porosity {porosity} outside [0, 1]");
    }
    let g = channel_means(v)?;
    let n = g.len();
    let pores = ((porosity * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| g[b].total_cmp(&g[a]).then(a.cmp(&b)));
    let mut data = vec![SOLID; n];
    for &i in &order[..pores] {
        data[i] = PORE;
    }
    let threshold = match order.get(pores) {
        Some(&i) => g[i],
        None => g[order[n - 1]],
    };
    Ok((Volume3D::binary(v.dims(), data)?, threshold))
}

/// Otsu threshold over a 256-bin histogram of the channel means; voxels
/// strictly above it are pore.
pub fn binarize_otsu(v: &Volume3D) -> Result<(Volume3D, f64)> {
    let g = channel_means(v)?;
    let lo = g.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Ok((Volume3D::binary(v.dims(), vec![SOLID; g.len()])?, hi));
    }
    const BINS: usize = 256;
    let width = (hi - lo) / BINS as f64;
    let bin = |x: f64| (((x - lo) / width) as usize).min(BINS - 1);
    let mut hist = [0usize; BINS];
    g.iter().for_each(|&x| hist[bin(x)] += 1);
    let total = g.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &h)| i as f64 * h as f64).sum();
    let (mut w0, mut sum0, mut best, mut best_k) = (0.0, 0.0, -1.0, 0);
    for (k, &h) in hist.iter().enumerate().take(BINS - 1) {
        w0 += h as f64;
        sum0 += k as f64 * h as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let between = w0 * w1 * (sum0 / w0 - (sum_all - sum0) / w1).powi(2);
        if between > best {
            best = between;
            best_k = k;
        }
    }
    let threshold = lo + (best_k + 1) as f64 * width;
    let data = g.iter().map(|&x| if bin(x) > best_k { PORE } else { SOLID }).collect();
    Ok((Volume3D::binary(v.dims(), data)?, threshold))
}

/// Tiled forward over seeded noise, then binarization.
pub fn reconstruct(params: &ModelParams, cfg: &ReconConfig) -> Result<Reconstruction> {
    let mut warnings = Vec::new();
    let fresh_bn = params
        .blocks
        .iter()
        .all(|b| b.bn.running_mean.iter().all(|&m| m == 0.0) && b.bn.running_var.iter().all(|&v| v == 1.0));
    if params.train_steps == 0 && fresh_bn {
        let w = "model has never been trained; batch-norm running statistics are at their initial values".to_string();
        log::warn!("{w}");
        warnings.push(w);
    }
    let y = forward_tiled(params, cfg.dims, cfg.sub_block.unwrap_or(cfg.dims), cfg.seed)?;
    let continuous = Volume3D::continuous(cfg.dims, params.spec.out_channels(), y.into_data())?;
    let target = cfg.porosity.or(params.reference_porosity);
    let (binary, threshold) = match (cfg.binarize, target) {
        (BinarizeMode::Quantile, Some(phi)) => binarize(&continuous, phi)?,
        (BinarizeMode::Quantile, None) => {
            bail!(InvalidArgument, "no target porosity: set one in the config or use a model trained with a reference")
        }
        (BinarizeMode::Otsu, _) => binarize_otsu(&continuous)?,
    };
    let achieved_porosity = binary.porosity()?.value();
    Ok(Reconstruction { continuous, binary, threshold, target_porosity: target, achieved_porosity, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, NetworkSpec};

    fn means(values: &[f64]) -> Volume3D {
        Volume3D::continuous([1, 1, values.len()], 1, values.to_vec()).unwrap()
    }

    #[test]
    fn quantile_examples() {
        let v = means(&[0.1, 0.4, 0.7, 0.9]);
        let (b, _) = binarize(&v, 0.25).unwrap();
        assert_eq!(b.binary_view().unwrap().data, &[0, 0, 0, 1]);
        assert_eq!(binarize(&v, 1.0).unwrap().0.binary_view().unwrap().data, &[1, 1, 1, 1]);
        assert_eq!(binarize(&v, 0.0).unwrap().0.binary_view().unwrap().data, &[0, 0, 0, 0]);
        assert!(binarize(&v, 1.5).is_err());
    }

    #[test]
    fn ties_go_to_lower_index() {
        let v = means(&[0.5, 0.5, 0.5, 0.2]);
        let (b, t) = binarize(&v, 0.5).unwrap();
        assert_eq!(b.binary_view().unwrap().data, &[1, 1, 0, 0]);
        assert_eq!(t, 0.5);
    }

    #[test]
    fn otsu_separates_two_modes() {
        let v = means(&[0.1, 0.12, 0.11, 0.9, 0.88, 0.91, 0.1]);
        let (b, t) = binarize_otsu(&v).unwrap();
        assert_eq!(b.binary_view().unwrap().data, &[0, 0, 0, 1, 1, 1, 0]);
        assert!(t > 0.12 && t < 0.88);
    }

    #[test]
    fn noise_is_coordinate_indexed() {
        let a = noise_block(3, [2, 3, 4], [3, 3, 3]);
        let b = noise_block(3, [0, 0, 0], [6, 7, 8]);
        assert_eq!(a, b.crop([2, 3, 4], [3, 3, 3]).unwrap());
        assert_ne!(noise_value(3, 1, 2, 3), noise_value(4, 1, 2, 3));
        assert!((0..1000).all(|i| (0.0..1.0).contains(&noise_value(9, i, 0, 0))));
    }

    #[test]
    fn tiling_is_exact() {
        let p = init_params(NetworkSpec::new(2, 3).unwrap(), 1).unwrap();
        let whole = forward_tiled(&p, [7, 6, 5], [7, 6, 5], 11).unwrap();
        for block in [[3, 3, 3], [1, 1, 1], [7, 2, 4], [10, 10, 10]] {
            assert_eq!(forward_tiled(&p, [7, 6, 5], block, 11).unwrap(), whole, "block {block:?}");
        }
        assert_eq!(tiles([7, 6, 5], [3, 3, 3]).len(), 3 * 2 * 2);
    }

    #[test]
    fn reconstruct_hits_target_and_warns_untrained() {
        let p = init_params(NetworkSpec::new(1, 2).unwrap(), 1).unwrap();
        let cfg = ReconConfig { dims: [5, 6, 7], sub_block: Some([2, 3, 4]), porosity: Some(0.3), ..Default::default() };
        let r = reconstruct(&p, &cfg).unwrap();
        assert_eq!(r.binary.porosity().unwrap().value(), (0.3f64 * 210.0).round() / 210.0);
        assert_eq!(r.warnings.len(), 1);
        assert_eq!(reconstruct(&p, &cfg).unwrap(), r);
        let cfg = ReconConfig { porosity: None, ..cfg };
        assert!(reconstruct(&p, &cfg).is_err());
    }
}
