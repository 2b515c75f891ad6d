//! Simulated-annealing reconstruction baseline: pore/solid swaps under the
//! Metropolis rule, with an energy built from S₂ and lineal-path mismatch.
//!
//! Descriptor counts are kept as integers and updated by re-scanning only
//! the lines through the two swapped voxels, so the running energy always
//! equals a from-scratch evaluation bit for bit.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::descriptors::{
    axis_mean, axis_stride, line_lineal_hits, line_s2_hits, linear_path, pair_total, two_point_probability, AxisCounts,
};
use crate::error::{bail, Result};
use crate::volume::{GridView, Image2D, Volume3D, PORE, SOLID};

/// Largest side accepted for 3D annealing.
pub const MAX_3D_SIDE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyWeights {
    pub s2: f64,
    pub lineal: f64,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        Self { s2: 1.0, lineal: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnealConfig {
    /// `(L, H, W)` of the result; `L = 1` anneals an image. Reference dims when absent.
    pub dims: Option<[usize; 3]>,
    pub weights: EnergyWeights,
    /// Largest lag in the energy; half the smallest side when absent.
    pub max_lag: Option<usize>,
    /// `T₀`; `1e-3 · E₀` when absent.
    pub initial_temperature: Option<f64>,
    /// `λ` in `T ← λT`.
    pub cooling: f64,
    /// Swaps per temperature step; `10 · N` when absent.
    pub swaps_per_temperature: Option<usize>,
    pub max_swaps: usize,
    /// Stop once the best energy is at or below this.
    pub energy_threshold: f64,
    pub seed: u64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            dims: None,
            weights: EnergyWeights::default(),
            max_lag: None,
            initial_temperature: None,
            cooling: 0.95,
            swaps_per_temperature: None,
            max_swaps: 200_000,
            energy_threshold: 0.0,
            seed: 0,
        }
    }
}

/// Axis-mean reference curves over lags `0..=max_lag`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceCurves {
    pub s2: Vec<f64>,
    pub lineal: Vec<f64>,
}

impl ReferenceCurves {
    pub fn from_image(img: &Image2D, max_lag: usize) -> Result<Self> {
        Ok(Self {
            s2: two_point_probability(&img.view(), max_lag)?.mean,
            lineal: linear_path(&img.view(), max_lag)?.mean,
        })
    }

    pub fn max_lag(&self) -> usize {
        self.s2.len() - 1
    }
}

fn term(curve: &[f64], reference: &[f64]) -> f64 {
    curve.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn energy_of(s2: &[f64], lineal: &[f64], reference: &ReferenceCurves, w: EnergyWeights) -> f64 {
    w.s2 * term(s2, &reference.s2) + w.lineal * term(lineal, &reference.lineal)
}

/// `E = w_S₂ Σ_r (S₂(r) − S₂_ref(r))² + w_L Σ_r (L(r) − L_ref(r))²`, from scratch.
pub fn energy(grid: &GridView<'_>, reference: &ReferenceCurves, weights: EnergyWeights) -> Result<f64> {
    let max_lag = reference.max_lag();
    let s2 = two_point_probability(grid, max_lag)?.mean;
    let lineal = linear_path(grid, max_lag)?.mean;
    Ok(energy_of(&s2, &lineal, reference, weights))
}

/// One proposed swap and its fate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Move {
    /// Voxel that was pore before the proposal.
    pub pore: usize,
    /// Voxel that was solid before the proposal.
    pub solid: usize,
    pub delta_e: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub swap_index: usize,
    pub temperature: f64,
    /// Energy after the accept/reject decision.
    pub energy: f64,
    pub accepted: bool,
    pub best_energy: f64,
}

/// Integer S₂ and lineal counts per axis for the current grid.
#[derive(Debug, Clone)]
struct Counts {
    s2: Vec<Vec<u64>>,
    lineal: Vec<Vec<u64>>,
}

/// Markov chain state.
#[derive(Debug, Clone)]
pub struct Annealer {
    dims: [usize; 3],
    is_3d: bool,
    grid: Vec<u8>,
    pores: Vec<usize>,
    solids: Vec<usize>,
    /// Position of each voxel in `pores` or `solids`.
    slot: Vec<usize>,
    reference: ReferenceCurves,
    weights: EnergyWeights,
    pairs: Vec<Vec<u64>>,
    counts: Counts,
    energy: f64,
    rng: ChaCha8Rng,
    line: Vec<u8>,
}

impl Annealer {
    /// Random grid of `dims` with `round(φ·N)` pores, φ taken from `reference_image`.
    pub fn new(reference_image: &Image2D, cfg: &AnnealConfig) -> Result<Self> {
        let phi = reference_image.porosity().value();
        if phi == 0.0 || phi == 1.0 {
            bail!(InvalidArgument, "reference has a single phase; there is nothing to swap");
        }
        let dims = cfg.dims.unwrap_or([1, reference_image.height(), reference_image.width()]);
        if dims.contains(&0) {
            bail!(InvalidArgument, "anneal dims {dims:?} must be positive");
        }
        let is_3d = dims[0] > 1;
        if is_3d && dims.iter().any(|&d| d > MAX_3D_SIDE) {
            bail!(InvalidArgument, "3D annealing is limited to {MAX_3D_SIDE}^3, got {dims:?}");
        }
        let ref_side = reference_image.width().min(reference_image.height());
        let own_side = if is_3d { *dims.iter().min().unwrap() } else { dims[1].min(dims[2]) };
        let max_lag = cfg.max_lag.unwrap_or(ref_side.min(own_side) / 2);
        if max_lag >= ref_side.min(own_side) {
            bail!(InvalidArgument, "max_lag {max_lag} must be below the smallest side {}", ref_side.min(own_side));
        }
        if !(cfg.cooling > 0.0 && cfg.cooling < 1.0) {
            bail!(InvalidArgument, "cooling factor must lie in (0, 1), got {}", cfg.cooling);
        }
        let w = cfg.weights;
        if w.s2 < 0.0 || w.lineal < 0.0 || w.s2 + w.lineal <= 0.0 || !(w.s2 + w.lineal).is_finite() {
            bail!(InvalidArgument, "energy weights must be non-negative with a positive sum");
        }
        let reference = ReferenceCurves::from_image(reference_image, max_lag)?;

        let n = dims.iter().product::<usize>();
        let pore_count = (phi * n as f64).round() as usize;
        if pore_count == 0 || pore_count == n {
            bail!(InvalidArgument, "a {dims:?} grid at porosity {phi} has a single phase");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut grid: Vec<u8> = (0..n).map(|i| if i < pore_count { PORE } else { SOLID }).collect();
        grid.shuffle(&mut rng);
        let mut pores = Vec::with_capacity(pore_count);
        let mut solids = Vec::with_capacity(n - pore_count);
        let mut slot = vec![0; n];
        for (i, &v) in grid.iter().enumerate() {
            let list = if v == PORE { &mut pores } else { &mut solids };
            slot[i] = list.len();
            list.push(i);
        }
        let axes = Self::axes_of(is_3d);
        let pairs = axes.iter().map(|&a| (0..=max_lag).map(|r| pair_total(dims, a, r)).collect()).collect();
        let mut s = Self {
            dims,
            is_3d,
            grid,
            pores,
            solids,
            slot,
            reference,
            weights: w,
            pairs,
            counts: Counts { s2: Vec::new(), lineal: Vec::new() },
            energy: 0.0,
            rng,
            line: Vec::new(),
        };
        s.counts = s.full_counts();
        s.energy = s.energy_from_counts(&s.counts);
        Ok(s)
    }

    fn axes_of(is_3d: bool) -> &'static [usize] {
        if is_3d {
            &[2, 1, 0]
        } else {
            &[2, 1]
        }
    }

    fn max_lag(&self) -> usize {
        self.reference.max_lag()
    }

    pub fn view(&self) -> GridView<'_> {
        GridView { dims: self.dims, data: &self.grid, is_3d: self.is_3d }
    }

    pub fn energy(&self) -> f64 {
        self.energy
    }

    pub fn reference(&self) -> &ReferenceCurves {
        &self.reference
    }

    pub fn weights(&self) -> EnergyWeights {
        self.weights
    }

    pub fn pore_count(&self) -> usize {
        self.pores.len()
    }

    fn full_counts(&self) -> Counts {
        let max_lag = self.max_lag();
        let mut counts = Counts { s2: Vec::new(), lineal: Vec::new() };
        for &axis in Self::axes_of(self.is_3d) {
            let (mut s2, mut lineal) = (vec![0u64; max_lag + 1], vec![0u64; max_lag + 1]);
            let len = self.dims[axis];
            let mut line = Vec::with_capacity(len);
            crate::descriptors::for_each_line(self.dims, axis, |start, stride| {
                line.clear();
                line.extend((0..len).map(|i| self.grid[start + i * stride]));
                line_s2_hits(&line, max_lag, &mut s2);
                line_lineal_hits(&line, max_lag, &mut lineal);
            });
            counts.s2.push(s2);
            counts.lineal.push(lineal);
        }
        counts
    }

    fn curve(&self, hits: &[Vec<u64>]) -> Vec<f64> {
        let per_axis: Vec<Vec<f64>> = hits
            .iter()
            .zip(&self.pairs)
            .map(|(h, p)| AxisCounts { hits: h.clone(), pairs: p.clone() }.values())
            .collect();
        axis_mean(&per_axis)
    }

    fn energy_from_counts(&self, c: &Counts) -> f64 {
        energy_of(&self.curve(&c.s2), &self.curve(&c.lineal), &self.reference, self.weights)
    }

    /// Start offsets of the lines through voxel `i`, one per axis.
    fn line_starts(&self, i: usize) -> Vec<usize> {
        let [_, h, w] = self.dims;
        let coord = [i / (h * w), (i / w) % h, i % w];
        Self::axes_of(self.is_3d).iter().map(|&a| i - coord[a] * axis_stride(self.dims, a)).collect()
    }

    /// Add (`sign = 1`) or remove (`sign = -1`) the hits of the lines
    /// through `a` and `b`, each distinct line once.
    fn apply_lines(&mut self, counts: &mut Counts, a: usize, b: usize, sign: i64) {
        let max_lag = self.max_lag();
        let (la, lb) = (self.line_starts(a), self.line_starts(b));
        for (k, &axis) in Self::axes_of(self.is_3d).iter().enumerate() {
            let stride = axis_stride(self.dims, axis);
            let len = self.dims[axis];
            let starts = if la[k] == lb[k] { vec![la[k]] } else { vec![la[k], lb[k]] };
            for start in starts {
                self.line.clear();
                self.line.extend((0..len).map(|i| self.grid[start + i * stride]));
                let (mut s2, mut lineal) = (vec![0u64; max_lag + 1], vec![0u64; max_lag + 1]);
                line_s2_hits(&self.line, max_lag, &mut s2);
                line_lineal_hits(&self.line, max_lag, &mut lineal);
                for r in 0..=max_lag {
                    counts.s2[k][r] = counts.s2[k][r].wrapping_add_signed(sign * s2[r] as i64);
                    counts.lineal[k][r] = counts.lineal[k][r].wrapping_add_signed(sign * lineal[r] as i64);
                }
            }
        }
    }

    fn swap_voxels(&mut self, pore: usize, solid: usize) {
        self.grid[pore] = SOLID;
        self.grid[solid] = PORE;
        let (sp, ss) = (self.slot[pore], self.slot[solid]);
        self.pores[sp] = solid;
        self.solids[ss] = pore;
        self.slot[solid] = sp;
        self.slot[pore] = ss;
    }

    /// Energy change of swapping `pore` and `solid`, leaving the state as it was.
    pub fn delta_energy(&mut self, pore: usize, solid: usize) -> Result<f64> {
        if self.grid.get(pore) != Some(&PORE) || self.grid.get(solid) != Some(&SOLID) {
            bail!(InvalidArgument, "swap needs a pore voxel and a solid voxel");
        }
        let (counts, new_energy) = self.propose(pore, solid);
        drop(counts);
        self.swap_voxels(solid, pore);
        Ok(new_energy - self.energy)
    }

    /// Swap, update counts, and return them with the new energy; the grid
    /// is left swapped.
    fn propose(&mut self, pore: usize, solid: usize) -> (Counts, f64) {
        let mut counts = self.counts.clone();
        self.apply_lines(&mut counts, pore, solid, -1);
        self.swap_voxels(pore, solid);
        self.apply_lines(&mut counts, pore, solid, 1);
        let e = self.energy_from_counts(&counts);
        (counts, e)
    }

    /// One Metropolis move at `temperature`.
    pub fn step(&mut self, temperature: f64) -> Move {
        let pore = self.pores[self.rng.random_range(0..self.pores.len())];
        let solid = self.solids[self.rng.random_range(0..self.solids.len())];
        let (counts, new_energy) = self.propose(pore, solid);
        let delta_e = new_energy - self.energy;
        let accepted = delta_e <= 0.0 || self.rng.random::<f64>() < (-delta_e / temperature).exp();
        if accepted {
            self.counts = counts;
            self.energy = new_energy;
        } else {
            self.swap_voxels(solid, pore);
        }
        Move { pore, solid, delta_e, accepted }
    }

    fn snapshot(&self) -> Vec<u8> {
        self.grid.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnnealOutput {
    Image(Image2D),
    Volume(Volume3D),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnealResult {
    /// Lowest-energy state seen.
    pub best: AnnealOutput,
    pub best_energy: f64,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub swaps: usize,
    pub accepted: usize,
    pub trace: Vec<TraceRow>,
}

impl AnnealResult {
    /// CSV with header `swap_index,temperature,energy,accepted`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("swap_index,temperature,energy,accepted\n");
        for row in &self.trace {
            writeln!(out, "{},{:e},{:e},{}", row.swap_index, row.temperature, row.energy, u8::from(row.accepted)).unwrap();
        }
        out
    }
}

/// Anneal from a random grid at the reference porosity.
pub fn anneal(reference_image: &Image2D, cfg: &AnnealConfig) -> Result<AnnealResult> {
    let mut chain = Annealer::new(reference_image, cfg)?;
    let n = chain.grid.len();
    let initial_energy = chain.energy();
    let mut temperature = cfg.initial_temperature.unwrap_or(initial_energy * 1e-3);
    if !(temperature > 0.0 && temperature.is_finite()) {
        if initial_energy == 0.0 {
            temperature = f64::MIN_POSITIVE;
        } else {
            bail!(InvalidArgument, "initial temperature must be positive, got {temperature}");
        }
    }
    let block = cfg.swaps_per_temperature.unwrap_or(10 * n).max(1);
    let mut best = chain.snapshot();
    let mut best_energy = initial_energy;
    let mut trace = Vec::with_capacity(cfg.max_swaps);
    let mut accepted = 0;
    let mut swaps = 0;
    while swaps < cfg.max_swaps && best_energy > cfg.energy_threshold {
        let mv = chain.step(temperature);
        swaps += 1;
        if mv.accepted {
            accepted += 1;
            if chain.energy() < best_energy {
                best_energy = chain.energy();
                best.copy_from_slice(&chain.grid);
            }
        }
        trace.push(TraceRow { swap_index: swaps, temperature, energy: chain.energy(), accepted: mv.accepted, best_energy });
        if swaps % block == 0 {
            temperature *= cfg.cooling;
        }
    }
    let best = if chain.is_3d {
        AnnealOutput::Volume(Volume3D::binary(chain.dims, best)?)
    } else {
        AnnealOutput::Image(Image2D::new(chain.dims[2], chain.dims[1], best)?)
    };
    Ok(AnnealResult { best, best_energy, initial_energy, final_energy: chain.energy(), swaps, accepted, trace })
}
