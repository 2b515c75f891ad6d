//! Statistical microstructure descriptors: two-point probability S₂(r),
//! lineal path L(r), two-point cluster C₂(r), correlation length and the
//! local porosity distribution.
//!
//! All curves are computed along the grid axes only, with non-periodic
//! boundaries: a pair (or segment) that would cross the grid edge is not
//! counted. Hit and pair counts are kept as integers so the curves are exact
//! ratios.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::volume::{GridView, PhaseFraction, PORE};

pub const AXIS_NAMES: [&str; 3] = ["x", "y", "z"];

/// A lag-indexed descriptor, per axis plus the unweighted axis mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorCurve {
    pub lags: Vec<usize>,
    /// Ordered x, y and (for volumes) z.
    pub per_axis: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

impl DescriptorCurve {
    pub fn from_counts(counts: &[AxisCounts]) -> Self {
        let per_axis: Vec<Vec<f64>> = counts.iter().map(AxisCounts::values).collect();
        let lags: Vec<usize> = (0..per_axis[0].len()).collect();
        let mean = axis_mean(&per_axis);
        Self { lags, per_axis, mean }
    }

    pub fn max_lag(&self) -> usize {
        self.lags.len() - 1
    }

    /// CSV with header `r,x,y[,z],mean`, nine significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("r");
        for name in AXIS_NAMES.iter().take(self.per_axis.len()) {
            out.push(',');
            out.push_str(name);
        }
        out.push_str(",mean\n");
        for (i, r) in self.lags.iter().enumerate() {
            write!(out, "{r}").unwrap();
            for axis in &self.per_axis {
                write!(out, ",{}", sig9(axis[i])).unwrap();
            }
            writeln!(out, ",{}", sig9(self.mean[i])).unwrap();
        }
        out
    }

    /// Mean absolute deviation between the axis-mean curves over lags
    /// `0..=max_lag` (clipped to the shorter curve).
    pub fn mean_abs_deviation(&self, other: &Self, max_lag: usize) -> f64 {
        let n = (max_lag + 1).min(self.mean.len()).min(other.mean.len());
        self.mean[..n]
            .iter()
            .zip(&other.mean[..n])
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n as f64
    }
}

/// Unweighted mean over axes, lag by lag.
pub(crate) fn axis_mean(per_axis: &[Vec<f64>]) -> Vec<f64> {
    (0..per_axis[0].len())
        .map(|r| per_axis.iter().map(|a| a[r]).sum::<f64>() / per_axis.len() as f64)
        .collect()
}

pub(crate) fn sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}

/// Integer event counts for one axis: `hits[r]` successes out of `pairs[r]`
/// candidate placements at lag `r`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AxisCounts {
    pub hits: Vec<u64>,
    pub pairs: Vec<u64>,
}

impl AxisCounts {
    pub fn values(&self) -> Vec<f64> {
        self.hits
            .iter()
            .zip(&self.pairs)
            .map(|(&h, &p)| h as f64 / p as f64)
            .collect()
    }
}

/// Neighbourhood used for pore-cluster labelling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    /// 4-neighbour in 2D, 6-neighbour in 3D.
    #[default]
    Face,
    /// 8-neighbour in 2D, 26-neighbour in 3D.
    Full,
}

fn check_lag(grid: &GridView<'_>, max_lag: usize) -> Result<()> {
    if grid.data.is_empty() {
        bail!(InvalidArgument, "descriptor of an empty grid");
    }
    let min_dim = grid.axes().iter().map(|&a| grid.dims[a]).min().unwrap();
    if max_lag >= min_dim {
        bail!(InvalidArgument, "max_lag {max_lag} must be below the smallest grid dimension {min_dim}");
    }
    Ok(())
}

/// Visit every axis-aligned line of the grid along `axis` (an index into
/// `dims`), passing the start offset and the stride between elements.
pub(crate) fn for_each_line(dims: [usize; 3], axis: usize, mut f: impl FnMut(usize, usize)) {
    let strides = [dims[1] * dims[2], dims[2], 1];
    let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    for i in 0..dims[others[0]] {
        for j in 0..dims[others[1]] {
            f(i * strides[others[0]] + j * strides[others[1]], strides[axis]);
        }
    }
}

pub(crate) fn axis_stride(dims: [usize; 3], axis: usize) -> usize {
    [dims[1] * dims[2], dims[2], 1][axis]
}

/// Number of in-bounds placements of a lag-`r` pair along `axis`.
pub(crate) fn pair_total(dims: [usize; 3], axis: usize, r: usize) -> u64 {
    let others: u64 = (0..3).filter(|&a| a != axis).map(|a| dims[a] as u64).product();
    (dims[axis] - r) as u64 * others
}

/// S₂ hit count contributed by one line.
pub(crate) fn line_s2_hits(line: &[u8], max_lag: usize, hits: &mut [u64]) {
    for r in 0..=max_lag.min(line.len().saturating_sub(1)) {
        hits[r] += line[..line.len() - r]
            .iter()
            .zip(&line[r..])
            .filter(|(&a, &b)| a == PORE && b == PORE)
            .count() as u64;
    }
}

/// Lineal-path hit count contributed by one line: a pore run of length ℓ
/// holds `ℓ - r` all-pore segments spanning lag `r`.
pub(crate) fn line_lineal_hits(line: &[u8], max_lag: usize, hits: &mut [u64]) {
    let mut run = 0usize;
    let flush = |run: usize, hits: &mut [u64]| {
        for (r, h) in hits.iter_mut().enumerate().take((max_lag + 1).min(run)) {
            *h += (run - r) as u64;
        }
    };
    for &v in line {
        if v == PORE {
            run += 1;
        } else {
            flush(run, hits);
            run = 0;
        }
    }
    flush(run, hits);
}

/// Count events along every line of every axis. `per_line` receives one
/// gathered line and adds its hits for lags `0..=max_lag`.
fn line_counts<T: Copy>(
    grid: &GridView<'_>,
    values: &[T],
    max_lag: usize,
    mut per_line: impl FnMut(&[T], &mut [u64]),
) -> Vec<AxisCounts> {
    let mut buf = Vec::new();
    grid.axes()
        .iter()
        .map(|&axis| {
            let len = grid.dims[axis];
            let mut hits = vec![0u64; max_lag + 1];
            for_each_line(grid.dims, axis, |start, stride| {
                buf.clear();
                buf.extend((0..len).map(|i| values[start + i * stride]));
                per_line(&buf, &mut hits);
            });
            let pairs = (0..=max_lag).map(|r| pair_total(grid.dims, axis, r)).collect();
            AxisCounts { hits, pairs }
        })
        .collect()
}

pub fn two_point_counts(grid: &GridView<'_>, max_lag: usize) -> Result<Vec<AxisCounts>> {
    check_lag(grid, max_lag)?;
    Ok(line_counts(grid, grid.data, max_lag, |line, hits| line_s2_hits(line, max_lag, hits)))
}

pub fn lineal_path_counts(grid: &GridView<'_>, max_lag: usize) -> Result<Vec<AxisCounts>> {
    check_lag(grid, max_lag)?;
    Ok(line_counts(grid, grid.data, max_lag, |line, hits| line_lineal_hits(line, max_lag, hits)))
}

pub fn two_point_cluster_counts(
    grid: &GridView<'_>,
    max_lag: usize,
    connectivity: Connectivity,
) -> Result<Vec<AxisCounts>> {
    check_lag(grid, max_lag)?;
    let labels = label_clusters(grid, connectivity);
    Ok(line_counts(grid, &labels, max_lag, |line, hits| {
        for (r, h) in hits.iter_mut().enumerate() {
            *h += line[..line.len() - r]
                .iter()
                .zip(&line[r..])
                .filter(|(&a, &b)| a != 0 && a == b)
                .count() as u64;
        }
    }))
}

/// S₂(r): probability that two voxels a lag `r` apart along an axis are both pore.
pub fn two_point_probability(grid: &GridView<'_>, max_lag: usize) -> Result<DescriptorCurve> {
    Ok(DescriptorCurve::from_counts(&two_point_counts(grid, max_lag)?))
}

/// L(r): probability that all `r + 1` voxels of an axis-aligned segment are pore.
pub fn linear_path(grid: &GridView<'_>, max_lag: usize) -> Result<DescriptorCurve> {
    Ok(DescriptorCurve::from_counts(&lineal_path_counts(grid, max_lag)?))
}

/// C₂(r): probability that two voxels a lag `r` apart are pore and belong to
/// the same connected pore cluster.
pub fn two_point_cluster(
    grid: &GridView<'_>,
    max_lag: usize,
    connectivity: Connectivity,
) -> Result<DescriptorCurve> {
    Ok(DescriptorCurve::from_counts(&two_point_cluster_counts(grid, max_lag, connectivity)?))
}

/// Label connected pore clusters. Solid voxels get label 0; clusters are
/// numbered from 1 in scan order.
pub fn label_clusters(grid: &GridView<'_>, connectivity: Connectivity) -> Vec<u32> {
    let [d, h, w] = grid.dims;
    let mut offsets: Vec<[isize; 3]> = Vec::new();
    let dz_range: &[isize] = if grid.is_3d { &[-1, 0, 1] } else { &[0] };
    for &dz in dz_range {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let nonzero = [dz, dy, dx].iter().filter(|&&c| c != 0).count();
                let keep = match connectivity {
                    Connectivity::Face => nonzero == 1,
                    Connectivity::Full => nonzero >= 1,
                };
                if keep {
                    offsets.push([dz, dy, dx]);
                }
            }
        }
    }
    let mut labels = vec![0u32; grid.data.len()];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..grid.data.len() {
        if grid.data[start] != PORE || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            for off in &offsets {
                let (nz, ny, nx) = (z as isize + off[0], y as isize + off[1], x as isize + off[2]);
                if nz < 0 || ny < 0 || nx < 0 || nz >= d as isize || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = (nz as usize * h + ny as usize) * w + nx as usize;
                if grid.data[j] == PORE && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            }
        }
    }
    labels
}

/// Banding rule used to read the correlation length off an S₂ curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelationRule {
    /// Band half-width as a fraction of φ − φ².
    pub eps_rel: f64,
    /// Number of consecutive lags that must stay inside the band.
    pub window: usize,
}

impl Default for CorrelationRule {
    fn default() -> Self {
        Self { eps_rel: 0.05, window: 3 }
    }
}

/// Lag beyond which S₂ has settled to φ².
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrelationLength {
    pub l_cor: usize,
    /// False when S₂ never settles inside the computed lag range.
    pub converged: bool,
}

/// Smallest lag `r ≥ 1` from which the axis-mean S₂ stays within
/// `eps_rel·(φ − φ²)` of φ² for `window` consecutive lags.
pub fn autocorrelation_distance(
    s2: &DescriptorCurve,
    porosity: PhaseFraction,
    rule: CorrelationRule,
) -> Result<CorrelationLength> {
    let phi = porosity.value();
    if phi == 0.0 || phi == 1.0 {
        return Ok(CorrelationLength { l_cor: 1, converged: true });
    }
    if rule.window == 0 || rule.eps_rel <= 0.0 {
        bail!(InvalidArgument, "correlation rule needs window >= 1 and eps_rel > 0");
    }
    let max_lag = s2.max_lag();
    if max_lag < rule.window {
        bail!(InvalidArgument, "S2 curve with max lag {max_lag} is too short for a window of {}", rule.window);
    }
    let target = phi * phi;
    let band = rule.eps_rel * (phi - target);
    let inside: Vec<bool> = s2.mean.iter().map(|&v| (v - target).abs() <= band).collect();
    let found = (1..=max_lag + 1 - rule.window).find(|&r| inside[r..r + rule.window].iter().all(|&b| b));
    Ok(match found {
        Some(l_cor) => CorrelationLength { l_cor, converged: true },
        None => CorrelationLength { l_cor: max_lag, converged: false },
    })
}

/// Histogram of window porosities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PorosityHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub probabilities: Vec<f64>,
    pub window_side: usize,
}

impl PorosityHistogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,probability\n");
        for (k, p) in self.probabilities.iter().enumerate() {
            writeln!(out, "{},{},{}", sig9(self.bin_edges[k]), sig9(self.bin_edges[k + 1]), sig9(*p)).unwrap();
        }
        out
    }
}

/// Number of bins `[k·w, (k+1)·w)` needed to cover porosities in `[0, 1]`.
pub fn bin_count(bin_width: f64) -> usize {
    (1.0 / bin_width + 1e-9).floor() as usize + 1
}

/// Bin holding a window with `pores` pore voxels out of `volume`.
pub fn bin_index(pores: u64, volume: u64, bin_width: f64) -> usize {
    let p = pores as f64 / volume as f64;
    ((p / bin_width + 1e-9).floor() as usize).min(bin_count(bin_width) - 1)
}

/// Local porosity distribution over every fully interior cubic window
/// (stride 1).
pub fn local_porosity_distribution(
    grid: &GridView<'_>,
    window_side: usize,
    bin_width: f64,
) -> Result<PorosityHistogram> {
    if !grid.is_3d {
        bail!(InvalidArgument, "local porosity distribution needs a 3D volume");
    }
    if !(bin_width > 0.0 && bin_width <= 1.0) {
        bail!(InvalidArgument, "bin width {bin_width} outside (0, 1]");
    }
    let [d, h, w] = grid.dims;
    if window_side == 0 || window_side > d.min(h).min(w) {
        bail!(InvalidArgument, "window side {window_side} does not fit volume {:?}", grid.dims);
    }
    // summed-volume table with a zero border
    let (sd, sh, sw) = (d + 1, h + 1, w + 1);
    let mut table = vec![0u64; sd * sh * sw];
    let at = |z: usize, y: usize, x: usize| (z * sh + y) * sw + x;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let v = u64::from(grid.get(z, y, x));
                table[at(z + 1, y + 1, x + 1)] = v + table[at(z, y + 1, x + 1)] + table[at(z + 1, y, x + 1)]
                    + table[at(z + 1, y + 1, x)]
                    + table[at(z, y, x)]
                    - table[at(z, y, x + 1)]
                    - table[at(z, y + 1, x)]
                    - table[at(z + 1, y, x)];
            }
        }
    }
    let nbins = bin_count(bin_width);
    let mut counts = vec![0u64; nbins];
    let s = window_side;
    let volume = (s * s * s) as u64;
    for z in 0..=d - s {
        for y in 0..=h - s {
            for x in 0..=w - s {
                let (z1, y1, x1) = (z + s, y + s, x + s);
                let pores = table[at(z1, y1, x1)] + table[at(z, y, x1)] + table[at(z, y1, x)] + table[at(z1, y, x)]
                    - table[at(z, y1, x1)]
                    - table[at(z1, y, x1)]
                    - table[at(z1, y1, x)]
                    - table[at(z, y, x)];
                counts[bin_index(pores, volume, bin_width)] += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    Ok(PorosityHistogram {
        bin_edges: (0..=nbins).map(|k| k as f64 * bin_width).collect(),
        probabilities: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        counts,
        window_side,
    })
}
