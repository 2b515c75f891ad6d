//! Description functions comparing 2D output slices with reference images:
//! a Gram-matrix style loss over a fixed random feature bank and an
//! autocorrelation loss, both with analytic gradients.
//!
//! Slices and references are `[1, C, 1, rows, cols]` tensors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::gemm::{gemm_acc, Layout};
use crate::tensor::{conv3d_backward, conv3d_forward, leaky_relu_backward_in_place, leaky_relu_in_place, ConvLayerParams, Tensor5};
use crate::volume::Image2D;

/// Channel count of the network output and of encoded references.
pub const SLICE_CHANNELS: usize = 3;
pub const DEFAULT_ACF_MAX_LAG: usize = 16;

/// Plane through a point, named by the two axes it spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// Normal along z; rows y, columns x.
    Xy,
    /// Normal along y; rows z, columns x.
    Xz,
    /// Normal along x; rows z, columns y.
    Yz,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::Xy, Orientation::Xz, Orientation::Yz];

    /// Index of the normal axis in `(z, y, x)` order.
    pub fn normal_axis(self) -> usize {
        match self {
            Orientation::Xy => 0,
            Orientation::Xz => 1,
            Orientation::Yz => 2,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlicePlane {
    pub orientation: Orientation,
    /// Coordinate along the normal axis.
    pub index: usize,
    /// `[1, C, 1, rows, cols]`.
    pub data: Tensor5,
}

/// The three axis-aligned planes of sample 0 through `point = (z, y, x)`,
/// in [`Orientation::ALL`] order.
pub fn extract_slices(y: &Tensor5, point: [usize; 3]) -> Result<[SlicePlane; 3]> {
    let [_, c, d, h, w] = y.shape();
    if point.iter().zip([d, h, w]).any(|(&p, n)| p >= n) {
        bail!(InvalidArgument, "slice point {point:?} outside spatial dims {:?}", [d, h, w]);
    }
    let [pz, py, px] = point;
    let xy = Tensor5::from_fn([1, c, 1, h, w], |[_, ch, _, r, q]| y.get(0, ch, pz, r, q));
    let xz = Tensor5::from_fn([1, c, 1, d, w], |[_, ch, _, r, q]| y.get(0, ch, r, py, q));
    let yz = Tensor5::from_fn([1, c, 1, d, h], |[_, ch, _, r, q]| y.get(0, ch, r, q, px));
    Ok([
        SlicePlane { orientation: Orientation::Xy, index: pz, data: xy },
        SlicePlane { orientation: Orientation::Xz, index: py, data: xz },
        SlicePlane { orientation: Orientation::Yz, index: px, data: yz },
    ])
}

/// Add a slice-shaped gradient into the full-volume gradient `into`.
pub fn scatter_slice_grad(plane: &SlicePlane, grad: &Tensor5, into: &mut Tensor5) -> Result<()> {
    if grad.shape() != plane.data.shape() {
        bail!(Shape, "slice gradient {:?} does not match slice {:?}", grad.shape(), plane.data.shape());
    }
    let [_, c, _, rows, cols] = grad.shape();
    let i = plane.index;
    for r in 0..rows {
        for q in 0..cols {
            for ch in 0..c {
                let (z, y, x) = match plane.orientation {
                    Orientation::Xy => (i, r, q),
                    Orientation::Xz => (r, i, q),
                    Orientation::Yz => (r, q, i),
                };
                let idx = into.index(0, ch, z, y, x);
                into.data_mut()[idx] += grad.get(0, ch, 0, r, q);
            }
        }
    }
    Ok(())
}

/// Binary image lifted to a `[1, C, 1, H, W]` map with the phase value
/// replicated in every channel.
pub fn encode_reference(img: &Image2D, channels: usize) -> Tensor5 {
    Tensor5::from_channels_last([1, channels, 1, img.height(), img.width()], img.to_channels(channels))
        .expect("image dims are non-zero")
}

/// Reference images keyed by slice orientation.
#[derive(Debug, Clone, PartialEq)]
pub enum References {
    /// One image for all three orientations.
    Isotropic(Image2D),
    /// One image per orientation, in [`Orientation::ALL`] order.
    Anisotropic([Image2D; 3]),
}

impl References {
    pub fn get(&self, o: Orientation) -> &Image2D {
        match self {
            References::Isotropic(img) => img,
            References::Anisotropic(imgs) => &imgs[o.index()],
        }
    }

    /// Mean porosity over the distinct references.
    pub fn porosity(&self) -> f64 {
        match self {
            References::Isotropic(img) => img.porosity().value(),
            References::Anisotropic(imgs) => imgs.iter().map(|i| i.porosity().value()).sum::<f64>() / 3.0,
        }
    }

    /// Smallest side over all references.
    pub fn min_side(&self) -> usize {
        let side = |i: &Image2D| i.width().min(i.height());
        match self {
            References::Isotropic(img) => side(img),
            References::Anisotropic(imgs) => imgs.iter().map(side).min().expect("three images"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureBankConfig {
    /// Output channels of each layer.
    pub widths: Vec<usize>,
    pub seed: u64,
    /// Per-layer loss weights; equal weights when absent.
    pub layer_weights: Option<Vec<f64>>,
    pub slope: f64,
}

impl Default for FeatureBankConfig {
    fn default() -> Self {
        Self { widths: vec![8, 16, 16, 16], seed: 7, layer_weights: None, slope: 0.2 }
    }
}

/// Fixed random 2D network: each layer is a reflect-padded 3×3 convolution
/// followed by leaky rectification. Never trained.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    layers: Vec<ConvLayerParams>,
    weights: Vec<f64>,
    slope: f64,
    in_channels: usize,
}

/// Activations of every bank layer plus what backward needs.
struct BankTrace {
    /// Padded input of each layer.
    padded: Vec<Tensor5>,
    /// Activated output of each layer.
    features: Vec<Tensor5>,
}

impl FeatureBank {
    pub fn new(cfg: &FeatureBankConfig, in_channels: usize) -> Result<Self> {
        if cfg.widths.is_empty() || cfg.widths.contains(&0) {
            bail!(InvalidArgument, "feature bank widths must be non-empty and positive, got {:?}", cfg.widths);
        }
        let weights = match &cfg.layer_weights {
            Some(w) if w.len() != cfg.widths.len() => {
                bail!(InvalidArgument, "{} layer weights for {} bank layers", w.len(), cfg.widths.len())
            }
            Some(w) if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) || w.iter().sum::<f64>() <= 0.0 => {
                bail!(InvalidArgument, "layer weights must be finite, non-negative and not all zero")
            }
            Some(w) => w.clone(),
            None => vec![1.0; cfg.widths.len()],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut c_in = in_channels;
        let mut layers = Vec::with_capacity(cfg.widths.len());
        for &c_out in &cfg.widths {
            let mut conv = ConvLayerParams::zeros_planar(c_out, c_in, 3);
            let normal = Normal::new(0.0, (2.0 / conv.fan_in() as f64).sqrt()).expect("positive std");
            conv.kernel.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
            layers.push(conv);
            c_in = c_out;
        }
        Ok(Self { layers, weights, slope: cfg.slope, in_channels })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn run(&self, x: &Tensor5) -> Result<BankTrace> {
        if x.channels() != self.in_channels {
            bail!(Shape, "feature bank expects {} channels, slice has {}", self.in_channels, x.channels());
        }
        let mut padded = Vec::with_capacity(self.layers.len());
        let mut features: Vec<Tensor5> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let p = reflect_pad(features.last().unwrap_or(x))?;
            let mut f = conv3d_forward(&p, layer)?;
            leaky_relu_in_place(&mut f, self.slope);
            padded.push(p);
            features.push(f);
        }
        Ok(BankTrace { padded, features })
    }

    /// Activated output of every layer for one slice.
    pub fn features(&self, x: &Tensor5) -> Result<Vec<Tensor5>> {
        Ok(self.run(x)?.features)
    }

    /// Gram matrix of every layer's features for one slice.
    pub fn grams(&self, x: &Tensor5) -> Result<Vec<GramMatrix>> {
        self.run(x)?.features.iter().map(GramMatrix::from_tensor).collect()
    }

    /// Loss against `targets` and its gradient with respect to `x`.
    fn loss_and_grad(&self, x: &Tensor5, targets: &[GramMatrix]) -> Result<(f64, Tensor5)> {
        let trace = self.run(x)?;
        let mut loss = 0.0;
        let mut grad: Option<Tensor5> = None;
        for l in (0..self.layers.len()).rev() {
            let f = &trace.features[l];
            let g = GramMatrix::from_tensor(f)?;
            let n = g.channels as f64;
            let w = self.weights[l] / (n * n);
            let diff: Vec<f64> = g.values.iter().zip(&targets[l].values).map(|(a, b)| a - b).collect();
            loss += w * diff.iter().map(|d| d * d).sum::<f64>();
            // dL/dG = 2w·ΔG, symmetric, so dL/dFᵀ = Fᵀ · (4w/P)·ΔG
            let scale = 4.0 * w / g.positions as f64;
            let coeff: Vec<f64> = diff.iter().map(|d| d * scale).collect();
            let mut g_f = grad.take().unwrap_or_else(|| Tensor5::zeros(f.shape()));
            let c = g.channels;
            gemm_acc(
                g.positions,
                c,
                c,
                f.data(),
                Layout::new(0, c, 1),
                &coeff,
                Layout::new(0, c, 1),
                g_f.data_mut(),
                Layout::new(0, c, 1),
            );
            leaky_relu_backward_in_place(f, self.slope, &mut g_f);
            let conv = conv3d_backward(&trace.padded[l], &self.layers[l], &g_f, true)?;
            grad = Some(reflect_pad_backward(&conv.input.expect("input gradient requested"))?);
        }
        Ok((loss, grad.expect("bank has at least one layer")))
    }
}

/// Pad rows and columns by one with mirror reflection (`x[-1] = x[1]`).
fn reflect_pad(x: &Tensor5) -> Result<Tensor5> {
    let [n, c, d, h, w] = x.shape();
    if h < 2 || w < 2 {
        bail!(Shape, "reflect padding needs at least 2×2 planes, got {h}×{w}");
    }
    let reflect = |i: usize, len: usize| match i {
        0 => 1,
        i if i == len + 1 => len - 2,
        i => i - 1,
    };
    Ok(Tensor5::from_fn([n, c, d, h + 2, w + 2], |[ni, ci, z, y, xx]| {
        x.get(ni, ci, z, reflect(y, h), reflect(xx, w))
    }))
}

fn reflect_pad_backward(g: &Tensor5) -> Result<Tensor5> {
    let [n, c, d, hp, wp] = g.shape();
    let (h, w) = (hp - 2, wp - 2);
    let reflect = |i: usize, len: usize| match i {
        0 => 1,
        i if i == len + 1 => len - 2,
        i => i - 1,
    };
    let mut out = Tensor5::zeros([n, c, d, h, w]);
    for ni in 0..n {
        for z in 0..d {
            for y in 0..hp {
                for xx in 0..wp {
                    for ci in 0..c {
                        let idx = out.index(ni, ci, z, reflect(y, h), reflect(xx, w));
                        out.data_mut()[idx] += g.get(ni, ci, z, y, xx);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Channel-by-channel second moment `G[i][j] = (1/P) Σ_p F[i][p]·F[j][p]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub channels: usize,
    /// Row-major `channels × channels`.
    pub values: Vec<f64>,
    /// Number of positions `P` averaged over.
    pub positions: usize,
}

impl GramMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.channels + j]
    }

    /// Gram over all samples and spatial positions of a channels-last tensor.
    pub fn from_tensor(f: &Tensor5) -> Result<Self> {
        gram_with_layout(f.data(), f.channels(), f.positions(), 1, f.channels())
    }
}

/// Gram of a `(C, P)` row-major feature matrix.
pub fn gram(features: &[f64], channels: usize) -> Result<GramMatrix> {
    if channels == 0 || features.is_empty() || features.len() % channels != 0 {
        bail!(InvalidArgument, "features must be a non-empty (C, P) matrix, got {} values for C = {channels}", features.len());
    }
    let p = features.len() / channels;
    gram_with_layout(features, channels, p, p, 1)
}

/// `F[i][p]` lives at `i·ch_stride + p·pos_stride`.
fn gram_with_layout(f: &[f64], c: usize, p: usize, ch_stride: usize, pos_stride: usize) -> Result<GramMatrix> {
    if p == 0 {
        bail!(InvalidArgument, "gram of empty features");
    }
    let mut values = vec![0.0; c * c];
    gemm_acc(c, p, c, f, Layout::new(0, ch_stride, pos_stride), f, Layout::new(0, pos_stride, ch_stride), &mut values, Layout::new(0, c, 1));
    values.iter_mut().for_each(|v| *v /= p as f64);
    Ok(GramMatrix { channels: c, values, positions: p })
}

/// Per-orientation reference Grams, computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct GramTargets {
    per_orientation: [Vec<GramMatrix>; 3],
}

impl GramTargets {
    pub fn new(bank: &FeatureBank, refs: &References) -> Result<Self> {
        let per = |o| bank.grams(&encode_reference(refs.get(o), bank.in_channels()));
        Ok(Self { per_orientation: [per(Orientation::Xy)?, per(Orientation::Xz)?, per(Orientation::Yz)?] })
    }

    pub fn get(&self, o: Orientation) -> &[GramMatrix] {
        &self.per_orientation[o.index()]
    }
}

/// `Σ_slices Σ_layers (w_l / N_l²)·‖G_slice − G_ref‖²_F` with `N_l` the
/// layer's channel count; returns the loss and one gradient per slice.
pub fn gram_loss(slices: &[SlicePlane], targets: &GramTargets, bank: &FeatureBank) -> Result<(f64, Vec<Tensor5>)> {
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(slices.len());
    for s in slices {
        let (l, g) = bank.loss_and_grad(&s.data, targets.get(s.orientation))?;
        total += l;
        grads.push(g);
    }
    Ok((total, grads))
}

/// Lag table `R[τ][υ]`, `(max_lag + 1)²` values row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Acf {
    pub max_lag: usize,
    pub values: Vec<f64>,
}

impl Acf {
    pub fn get(&self, tau: usize, upsilon: usize) -> f64 {
        self.values[tau * (self.max_lag + 1) + upsilon]
    }
}

fn channel_mean(img: &Tensor5) -> (usize, usize, Vec<f64>) {
    let [_, c, _, rows, cols] = img.shape();
    let mean = img.data()[..rows * cols * c].chunks_exact(c).map(|v| v.iter().sum::<f64>() / c as f64).collect();
    (rows, cols, mean)
}

fn check_lag(rows: usize, cols: usize, max_lag: usize) -> Result<()> {
    if max_lag >= rows.min(cols) {
        bail!(InvalidArgument, "ACF max_lag {max_lag} must be smaller than the image side {}", rows.min(cols));
    }
    Ok(())
}

/// `R(τ, υ) = Σ f(i, j)·f(i+τ, j+υ) / ((rows−τ)(cols−υ))` over in-bounds
/// pairs of the channel-mean image `f` of sample 0.
pub fn acf(img: &Tensor5, max_lag: usize) -> Result<Acf> {
    let (rows, cols, f) = channel_mean(img);
    check_lag(rows, cols, max_lag)?;
    let side = max_lag + 1;
    let mut values = vec![0.0; side * side];
    for tau in 0..side {
        for ups in 0..side {
            let mut s = 0.0;
            for i in 0..rows - tau {
                let a = &f[i * cols..i * cols + cols - ups];
                let b = &f[(i + tau) * cols + ups..(i + tau) * cols + cols];
                s += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            }
            values[tau * side + ups] = s / ((rows - tau) * (cols - ups)) as f64;
        }
    }
    Ok(Acf { max_lag, values })
}

/// Per-orientation reference ACFs.
#[derive(Debug, Clone, PartialEq)]
pub struct AcfTargets {
    per_orientation: [Acf; 3],
}

impl AcfTargets {
    pub fn new(refs: &References, max_lag: usize) -> Result<Self> {
        let per = |o| acf(&encode_reference(refs.get(o), 1), max_lag);
        Ok(Self { per_orientation: [per(Orientation::Xy)?, per(Orientation::Xz)?, per(Orientation::Yz)?] })
    }

    pub fn max_lag(&self) -> usize {
        self.per_orientation[0].max_lag
    }

    pub fn get(&self, o: Orientation) -> &Acf {
        &self.per_orientation[o.index()]
    }
}

/// `Σ_slices Σ_lags (S(τ, υ) − R(τ, υ))²` and one gradient per slice.
pub fn acf_loss(slices: &[SlicePlane], targets: &AcfTargets) -> Result<(f64, Vec<Tensor5>)> {
    let max_lag = targets.max_lag();
    let side = max_lag + 1;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(slices.len());
    for s in slices {
        let own = acf(&s.data, max_lag)?;
        let target = targets.get(s.orientation);
        let (rows, cols, f) = channel_mean(&s.data);
        let mut gf = vec![0.0; rows * cols];
        for tau in 0..side {
            for ups in 0..side {
                let d = own.get(tau, ups) - target.get(tau, ups);
                total += d * d;
                // ∂S(τ,υ)/∂f(a,b) = (f(a+τ,b+υ) + f(a−τ,b−υ)) / pairs
                let k = 2.0 * d / ((rows - tau) * (cols - ups)) as f64;
                for i in 0..rows - tau {
                    for j in 0..cols - ups {
                        let p = i * cols + j;
                        let q = (i + tau) * cols + j + ups;
                        gf[p] += k * f[q];
                        gf[q] += k * f[p];
                    }
                }
            }
        }
        let c = s.data.channels();
        let mut g = Tensor5::zeros(s.data.shape());
        for (dst, &v) in g.data_mut().chunks_exact_mut(c).zip(&gf) {
            dst.fill(v / c as f64);
        }
        grads.push(g);
    }
    Ok((total, grads))
}

/// Which description function drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorKind {
    #[default]
    Gram,
    Acf,
}

/// A description function with its reference targets precomputed.
#[derive(Debug, Clone, PartialEq)]
pub enum DescriptionLoss {
    Gram { bank: FeatureBank, targets: GramTargets },
    Acf { targets: AcfTargets },
}

impl DescriptionLoss {
    pub fn new(kind: DescriptorKind, refs: &References, bank: &FeatureBankConfig, acf_max_lag: usize) -> Result<Self> {
        Ok(match kind {
            DescriptorKind::Gram => {
                let bank = FeatureBank::new(bank, SLICE_CHANNELS)?;
                let targets = GramTargets::new(&bank, refs)?;
                DescriptionLoss::Gram { bank, targets }
            }
            DescriptorKind::Acf => DescriptionLoss::Acf { targets: AcfTargets::new(refs, acf_max_lag)? },
        })
    }

    pub fn evaluate(&self, slices: &[SlicePlane]) -> Result<(f64, Vec<Tensor5>)> {
        match self {
            DescriptionLoss::Gram { bank, targets } => gram_loss(slices, targets, bank),
            DescriptionLoss::Acf { targets } => acf_loss(slices, targets),
        }
    }
}
