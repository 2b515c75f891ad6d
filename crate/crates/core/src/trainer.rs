//! Optimization loops. The basic loop forwards a fresh noise cube every
//! iteration and cuts three slices from the output; the improved loop keeps
//! one persistent noise volume and forwards only the thin slabs that produce
//! those slices.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::losses::{
    extract_slices, scatter_slice_grad, DescriptionLoss, DescriptorKind, FeatureBankConfig, Orientation, References,
    SlicePlane, DEFAULT_ACF_MAX_LAG, SLICE_CHANNELS,
};
use crate::network::{init_params, Gradients, ModelParams, NetworkSpec};
use crate::optimizer::{AdamConfig, AdamState};
use crate::tensor::Tensor5;

/// Extra noise margin of the persistent volume beyond one output cube.
pub const DEFAULT_NOISE_MARGIN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Basic,
    #[default]
    Improved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Iterations `T`.
    pub iterations: usize,
    /// Noise samples per iteration `K`.
    pub batch_size: usize,
    pub descriptor: DescriptorKind,
    /// Output slice side `S`; the smallest reference side when absent.
    pub slice_size: Option<usize>,
    /// Side of the persistent noise volume; `S + 2m + 32` when absent.
    pub noise_side: Option<usize>,
    pub seed: u64,
    /// Iterations between progress log lines; 0 disables them.
    pub log_every: usize,
    pub adam: AdamConfig,
    pub bank: FeatureBankConfig,
    pub acf_max_lag: usize,
    /// Upper bound on the activation memory of one training forward.
    pub memory_budget_mb: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Improved,
            iterations: 1000,
            batch_size: 1,
            descriptor: DescriptorKind::Gram,
            slice_size: None,
            noise_side: None,
            seed: 0,
            log_every: 100,
            adam: AdamConfig::default(),
            bank: FeatureBankConfig::default(),
            acf_max_lag: DEFAULT_ACF_MAX_LAG,
            memory_budget_mb: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub spec: NetworkSpec,
    pub slice_size: usize,
    /// Persistent noise side; absent for the basic loop.
    pub noise_side: Option<usize>,
    /// Mean batch loss of every iteration.
    pub losses: Vec<f64>,
    pub wall_time_s: f64,
    pub reference_porosity: f64,
    pub warnings: Vec<String>,
    pub model_path: Option<String>,
    pub config: TrainConfig,
}

/// Everything shared by both loops.
struct Session {
    params: ModelParams,
    adam: AdamState,
    loss: DescriptionLoss,
    slice: usize,
    rng: ChaCha8Rng,
    warnings: Vec<String>,
}

impl Session {
    fn new(refs: &References, spec: NetworkSpec, cfg: &TrainConfig) -> Result<Self> {
        if cfg.iterations < 1 || cfg.batch_size < 1 {
            bail!(InvalidArgument, "iterations and batch_size must be at least 1");
        }
        let slice = cfg.slice_size.unwrap_or_else(|| refs.min_side());
        if slice < spec.receptive_field() {
            bail!(InvalidArgument, "slice size {slice} is smaller than the receptive field {}", spec.receptive_field());
        }
        if cfg.descriptor == DescriptorKind::Acf && cfg.acf_max_lag >= slice.min(refs.min_side()) {
            bail!(
                InvalidArgument,
                "acf_max_lag {} must be smaller than both the slice size {slice} and the reference side {}",
                cfg.acf_max_lag,
                refs.min_side()
            );
        }
        let loss = DescriptionLoss::new(cfg.descriptor, refs, &cfg.bank, cfg.acf_max_lag)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            params: init_params(spec, cfg.seed)?,
            adam: AdamState::new(cfg.adam)?,
            loss,
            slice,
            rng,
            warnings: Vec::new(),
        })
    }

    fn check_memory(&self, input: [usize; 3], cfg: &TrainConfig) -> Result<()> {
        // activations and BN caches of every block, plus gradient scratch
        let n = self.params.spec.n.max(SLICE_CHANNELS);
        let bytes = input.iter().product::<usize>() * n * (self.params.blocks.len() + 2) * 3 * 8;
        if bytes > cfg.memory_budget_mb << 20 {
            bail!(
                InvalidArgument,
                "a training forward on {input:?} needs about {} MiB, over the {} MiB budget; reduce slice_size or use the improved mode",
                bytes >> 20,
                cfg.memory_budget_mb
            );
        }
        Ok(())
    }

    /// Training forward on `x`, loss on the slices that `cut` takes from
    /// the output, and accumulation of parameter gradients into `grads`.
    fn step_sample(
        &mut self,
        x: &Tensor5,
        grads: &mut Gradients,
        cut: impl FnOnce(&Tensor5) -> Result<Vec<SlicePlane>>,
        paste: impl FnOnce(&[SlicePlane], &[Tensor5], [usize; 5]) -> Result<Tensor5>,
    ) -> Result<f64> {
        let trace = self.params.forward_train(x)?;
        let slices = cut(trace.output())?;
        let (loss, slice_grads) = self.loss.evaluate(&slices)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let grad_out = paste(&slices, &slice_grads, trace.output().shape())?;
        grads.accumulate(&self.params.backward(&trace, &grad_out)?);
        Ok(loss)
    }

    fn apply(&mut self, mut grads: Gradients, batch: usize) -> Result<()> {
        let scale = 1.0 / batch as f64;
        for b in &mut grads.blocks {
            for v in [&mut b.kernel, &mut b.bias, &mut b.gamma, &mut b.beta] {
                v.iter_mut().for_each(|g| *g *= scale);
            }
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("parameter gradients".into()));
        }
        let slices = grads.slices();
        self.adam.step(&mut self.params.trainable_mut(), &slices)
    }

    fn finish(
        mut self,
        refs: &References,
        cfg: &TrainConfig,
        losses: Vec<f64>,
        started: Instant,
        noise_side: Option<usize>,
    ) -> (ModelParams, TrainReport) {
        self.params.train_steps += self.adam.t();
        self.params.reference_porosity = Some(refs.porosity());
        let report = TrainReport {
            mode: cfg.mode,
            spec: self.params.spec,
            slice_size: self.slice,
            noise_side,
            losses,
            wall_time_s: started.elapsed().as_secs_f64(),
            reference_porosity: refs.porosity(),
            warnings: self.warnings,
            model_path: None,
            config: cfg.clone(),
        };
        (self.params, report)
    }
}

fn log_progress(cfg: &TrainConfig, it: usize, loss: f64) {
    if cfg.log_every > 0 && ((it + 1) % cfg.log_every == 0 || it == 0) {
        log::info!("iteration {}/{}: loss {loss:.6e}", it + 1, cfg.iterations);
    }
}

fn uniform_noise(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor5 {
    Tensor5::from_fn([1, 1, dims[0], dims[1], dims[2]], |_| rng.random::<f64>())
}

/// Fresh `U(0, 1)` noise of side `S + 2m` every sample; three slices through
/// a uniform point of the `S³` output.
pub fn train_basic(refs: &References, spec: NetworkSpec, cfg: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    let started = Instant::now();
    let mut s = Session::new(refs, spec, cfg)?;
    let side = s.slice + spec.shrink();
    s.check_memory([side; 3], cfg)?;
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut grads = Gradients::zeros_like(&s.params);
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let noise = uniform_noise([side; 3], &mut s.rng);
            let point = [0; 3].map(|_| s.rng.random_range(0..s.slice));
            total += s.step_sample(
                &noise,
                &mut grads,
                |y| Ok(extract_slices(y, point)?.to_vec()),
                |slices, g, shape| {
                    let mut full = Tensor5::zeros(shape);
                    for (p, gi) in slices.iter().zip(g) {
                        scatter_slice_grad(p, gi, &mut full)?;
                    }
                    Ok(full)
                },
            )?;
        }
        s.apply(grads, cfg.batch_size)?;
        let loss = total / cfg.batch_size as f64;
        log_progress(cfg, it, loss);
        losses.push(loss);
    }
    Ok(s.finish(refs, cfg, losses, started, None))
}

/// Where one training sample sits in the persistent noise volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlabSite {
    /// Noise coordinate `(z, y, x)` of the `S³` output cube's first voxel.
    pub corner: [usize; 3],
    /// Output-cube coordinate of the point the three slices pass through.
    pub anchor: [usize; 3],
}

/// Noise sub-volume whose forward pass is the `S×S` slice of `orientation`
/// through `site`: `S + 2m` along the two in-plane axes and `2m + 1` along
/// the normal.
pub fn extract_slab(noise: &Tensor5, spec: NetworkSpec, slice: usize, site: SlabSite, orientation: Orientation) -> Result<Tensor5> {
    let axis = orientation.normal_axis();
    let mut origin = site.corner;
    let mut size = [slice + spec.shrink(); 3];
    origin[axis] += site.anchor[axis];
    size[axis] = spec.shrink() + 1;
    noise.crop(origin, size)
}

/// View a `S×S` slab output as a slice tensor `[1, C, 1, S, S]`.
pub fn slab_output_to_slice(y: Tensor5, orientation: Orientation, index: usize) -> Result<SlicePlane> {
    let spatial = y.spatial();
    let axis = orientation.normal_axis();
    if spatial[axis] != 1 {
        bail!(Shape, "slab output {spatial:?} is not one voxel thick along axis {axis}");
    }
    let plane: Vec<usize> = (0..3).filter(|&a| a != axis).map(|a| spatial[a]).collect();
    let data = y.reshape([1, SLICE_CHANNELS, 1, plane[0], plane[1]])?;
    Ok(SlicePlane { orientation, index, data })
}

/// Uniform site whose three slabs lie inside a noise volume of side `n`.
pub fn sample_site(rng: &mut impl Rng, n: usize, spec: NetworkSpec, slice: usize) -> SlabSite {
    let span = n - spec.shrink() - slice;
    SlabSite {
        corner: [0; 3].map(|_| rng.random_range(0..=span)),
        anchor: [0; 3].map(|_| rng.random_range(0..slice)),
    }
}

/// One persistent noise volume; per sample, three thin slab forwards, each
/// normalized with its own batch statistics.
pub fn train_improved(refs: &References, spec: NetworkSpec, cfg: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    let started = Instant::now();
    let mut s = Session::new(refs, spec, cfg)?;
    let n = cfg.noise_side.unwrap_or(s.slice + spec.shrink() + DEFAULT_NOISE_MARGIN);
    if n < s.slice + spec.shrink() + 1 {
        bail!(
            InvalidArgument,
            "noise side {n} is too small for {}-voxel slices through an {} net (needs at least {})",
            s.slice,
            spec.label(),
            s.slice + spec.shrink() + 1
        );
    }
    let draws = (cfg.batch_size as u128) * (cfg.iterations as u128);
    if (n as u128).pow(3) < 100 * draws {
        let w = format!("noise volume {n}^3 is not much larger than K*T = {draws}; samples will overlap heavily");
        log::warn!("{w}");
        s.warnings.push(w);
    }
    s.check_memory([s.slice + spec.shrink(), s.slice + spec.shrink(), spec.shrink() + 1], cfg)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(2);
    let noise = uniform_noise([n; 3], &mut noise_rng);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut grads = Gradients::zeros_like(&s.params);
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let site = sample_site(&mut s.rng, n, spec, s.slice);
            for o in Orientation::ALL {
                let slab = extract_slab(&noise, spec, s.slice, site, o)?;
                let index = site.anchor[o.normal_axis()];
                total += s.step_sample(
                    &slab,
                    &mut grads,
                    |y| Ok(vec![slab_output_to_slice(y.clone(), o, index)?]),
                    |_, g, shape| g[0].clone().reshape(shape),
                )?;
            }
        }
        s.apply(grads, cfg.batch_size)?;
        let loss = total / cfg.batch_size as f64;
        log_progress(cfg, it, loss);
        losses.push(loss);
    }
    Ok(s.finish(refs, cfg, losses, started, Some(n)))
}

/// Dispatch on [`TrainConfig::mode`].
pub fn train(refs: &References, spec: NetworkSpec, cfg: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    match cfg.mode {
        TrainMode::Basic => train_basic(refs, spec, cfg),
        TrainMode::Improved => train_improved(refs, spec, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Image2D;

    fn stripes(side: usize) -> References {
        References::Isotropic(Image2D::from_fn(side, side, |_, x| x % 4 < 2).unwrap())
    }

    fn small_cfg(mode: TrainMode, iterations: usize) -> TrainConfig {
        TrainConfig {
            mode,
            iterations,
            slice_size: Some(8),
            bank: FeatureBankConfig { widths: vec![4, 4], ..Default::default() },
            log_every: 0,
            ..Default::default()
        }
    }

    #[test]
    fn zero_lr_changes_only_running_stats() {
        let spec = NetworkSpec::new(2, 4).unwrap();
        for mode in [TrainMode::Basic, TrainMode::Improved] {
            let mut cfg = small_cfg(mode, 1);
            cfg.adam.lr = 0.0;
            let (p, report) = train(&stripes(12), spec, &cfg).unwrap();
            let init = init_params(spec, cfg.seed).unwrap();
            assert_eq!(report.losses.len(), 1);
            for (a, b) in p.blocks.iter().zip(&init.blocks) {
                assert_eq!(a.conv, b.conv);
                assert_eq!(a.bn.gamma, b.bn.gamma);
                assert_eq!(a.bn.beta, b.bn.beta);
                assert_ne!(a.bn.running_mean, b.bn.running_mean);
            }
            assert_eq!(p.train_steps, 1);
            assert_eq!(p.reference_porosity, Some(0.5));
        }
    }

    #[test]
    fn loss_series_length_and_reproducibility() {
        let spec = NetworkSpec::new(1, 3).unwrap();
        let cfg = TrainConfig { batch_size: 2, ..small_cfg(TrainMode::Improved, 4) };
        let (a, ra) = train(&stripes(12), spec, &cfg).unwrap();
        let (b, rb) = train(&stripes(12), spec, &cfg).unwrap();
        assert_eq!(ra.losses.len(), 4);
        assert_eq!(a, b);
        assert_eq!(ra.losses, rb.losses);
    }

    #[test]
    fn slab_geometry() {
        let spec = NetworkSpec::new(2, 2).unwrap();
        let noise = Tensor5::zeros([1, 1, 20, 20, 20]);
        let site = SlabSite { corner: [1, 2, 3], anchor: [4, 5, 6] };
        assert_eq!(extract_slab(&noise, spec, 10, site, Orientation::Xy).unwrap().spatial(), [5, 14, 14]);
        assert_eq!(extract_slab(&noise, spec, 10, site, Orientation::Xz).unwrap().spatial(), [14, 5, 14]);
        assert_eq!(extract_slab(&noise, spec, 10, site, Orientation::Yz).unwrap().spatial(), [14, 14, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let site = sample_site(&mut rng, 15, spec, 10);
            for o in Orientation::ALL {
                assert!(extract_slab(&noise, spec, 10, site, o).is_ok());
            }
        }
    }

    #[test]
    fn noise_warning_and_bounds() {
        let spec = NetworkSpec::new(1, 2).unwrap();
        let cfg = TrainConfig { noise_side: Some(11), ..small_cfg(TrainMode::Improved, 20) };
        let (_, report) = train(&stripes(12), spec, &cfg).unwrap();
        assert_eq!(report.warnings.len(), 1);
        let cfg = TrainConfig { noise_side: Some(10), ..small_cfg(TrainMode::Improved, 1) };
        assert!(train(&stripes(12), spec, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        let spec = NetworkSpec::new(3, 2).unwrap();
        let cfg = TrainConfig { slice_size: Some(6), ..small_cfg(TrainMode::Basic, 1) };
        assert!(train(&stripes(12), spec, &cfg).is_err());
        let cfg = TrainConfig { descriptor: DescriptorKind::Acf, acf_max_lag: 8, ..small_cfg(TrainMode::Basic, 1) };
        assert!(train(&stripes(12), spec, &cfg).is_err());
        let cfg = TrainConfig { memory_budget_mb: 0, ..small_cfg(TrainMode::Basic, 1) };
        assert!(train(&stripes(12), spec, &cfg).is_err());
    }
}
