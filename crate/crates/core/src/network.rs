//! The LmCn fully convolutional generator: `m` kernel-3 blocks of width `n`
//! followed by one kernel-1 block with three output channels. Every block is
//! convolution, batch normalization, then leaky rectification.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::descriptors::CorrelationLength;
use crate::error::{bail, Error, Result};
use crate::tensor::{
    batchnorm_backward, batchnorm_forward, conv3d_backward, conv3d_forward, leaky_relu_backward_in_place,
    leaky_relu_in_place, receptive_field, BatchNormCache, BatchNormParams, ConvLayerParams, Tensor5,
};

pub const DEFAULT_WIDTH: usize = 16;
pub const DEFAULT_M_CAP: usize = 12;
pub const OUT_CHANNELS: usize = 3;
pub const DEFAULT_SLOPE: f64 = 0.2;
pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

const MAGIC: &[u8; 4] = b"MM01";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NetworkSpec {
    /// Number of kernel-3 blocks.
    pub m: usize,
    /// Channels per kernel-3 block.
    pub n: usize,
}

impl NetworkSpec {
    pub fn new(m: usize, n: usize) -> Result<Self> {
        if m < 1 || n < 1 {
            bail!(InvalidArgument, "network needs m >= 1 and n >= 1, got m={m}, n={n}");
        }
        Ok(Self { m, n })
    }

    pub fn receptive_field(&self) -> usize {
        3 + 2 * (self.m - 1)
    }

    /// Voxels lost per axis by the valid convolutions.
    pub fn shrink(&self) -> usize {
        2 * self.m
    }

    pub fn out_channels(&self) -> usize {
        OUT_CHANNELS
    }

    /// `LmCn` label.
    pub fn label(&self) -> String {
        format!("L{}C{}", self.m, self.n)
    }
}

/// Result of the structure-driven design rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub spec: NetworkSpec,
    pub warning: Option<String>,
}

/// Smallest depth whose receptive field reaches `l_cor`:
/// `m = ceil((l_cor − 3) / 2) + 1`, clamped to `[1, m_cap]`. A correlation
/// length that never converged gives `m = m_cap` and a warning.
pub fn design_from_prior(l_cor: &CorrelationLength, n_override: Option<usize>, m_cap: usize) -> Result<Design> {
    if m_cap < 1 {
        bail!(InvalidArgument, "m_cap must be at least 1");
    }
    let n = n_override.unwrap_or(DEFAULT_WIDTH);
    if !l_cor.converged {
        let warning = format!(
            "S2 did not settle within the analysed lag range (l_cor >= {}); using the depth cap m = {m_cap}",
            l_cor.l_cor
        );
        log::warn!("{warning}");
        return Ok(Design { spec: NetworkSpec::new(m_cap, n)?, warning: Some(warning) });
    }
    let excess = l_cor.l_cor as i64 - 3;
    let m = ((excess + 1).div_euclid(2) + 1).clamp(1, m_cap as i64) as usize;
    Ok(Design { spec: NetworkSpec::new(m, n)?, warning: None })
}

/// One conv → BN → LeakyReLU unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub conv: ConvLayerParams,
    pub bn: BatchNormParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub spec: NetworkSpec,
    /// `m` kernel-3 blocks then the kernel-1 block.
    pub blocks: Vec<Block>,
    pub slope: f64,
    pub seed: u64,
    /// Optimizer steps applied so far.
    pub train_steps: u64,
    /// Porosity of the training reference, used as the default binarization target.
    pub reference_porosity: Option<f64>,
}

/// He-normal kernels (variance `2 / fan_in`), zero bias, identity batch norm.
pub fn init_params(spec: NetworkSpec, seed: u64) -> Result<ModelParams> {
    NetworkSpec::new(spec.m, spec.n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::with_capacity(spec.m + 1);
    for layer in 0..=spec.m {
        let (c_in, c_out, k) = match layer {
            0 => (1, spec.n, 3),
            l if l < spec.m => (spec.n, spec.n, 3),
            _ => (spec.n, OUT_CHANNELS, 1),
        };
        let mut conv = ConvLayerParams::zeros(c_out, c_in, k);
        let normal = Normal::new(0.0, (2.0 / conv.fan_in() as f64).sqrt()).expect("positive std");
        conv.kernel.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
        blocks.push(Block { conv, bn: BatchNormParams::new(c_out, DEFAULT_BN_MOMENTUM, DEFAULT_BN_EPS) });
    }
    Ok(ModelParams { spec, blocks, slope: DEFAULT_SLOPE, seed, train_steps: 0, reference_porosity: None })
}

/// Intermediate values of a training-mode forward, consumed by [`backward`].
#[derive(Debug)]
pub struct ForwardTrace {
    /// Block inputs followed by the network output.
    activations: Vec<Tensor5>,
    bn: Vec<BatchNormCache>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Tensor5 {
        self.activations.last().expect("trace holds the output")
    }

    /// Post-activation output of every block, in order.
    pub fn block_outputs(&self) -> &[Tensor5] {
        &self.activations[1..]
    }
}

/// Gradients for every trainable array, in [`ModelParams::trainable_mut`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<BlockGrads>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let blocks = params
            .blocks
            .iter()
            .map(|b| BlockGrads {
                kernel: vec![0.0; b.conv.kernel.len()],
                bias: vec![0.0; b.conv.bias.len()],
                gamma: vec![0.0; b.bn.gamma.len()],
                beta: vec![0.0; b.bn.beta.len()],
            })
            .collect();
        Self { blocks }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.blocks
            .iter()
            .flat_map(|b| [b.kernel.as_slice(), &b.bias, &b.gamma, &b.beta])
            .collect()
    }

    /// `self += other`, element by element in storage order.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (dst, src) in [(&mut a.kernel, &b.kernel), (&mut a.bias, &b.bias), (&mut a.gamma, &b.gamma), (&mut a.beta, &b.beta)] {
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

impl ModelParams {
    /// Trainable arrays in fixed order: per block kernel, bias, γ, β.
    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        self.blocks
            .iter_mut()
            .flat_map(|b| {
                [
                    b.conv.kernel.as_mut_slice(),
                    b.conv.bias.as_mut_slice(),
                    b.bn.gamma.as_mut_slice(),
                    b.bn.beta.as_mut_slice(),
                ]
            })
            .collect()
    }

    fn check_input(&self, x: &Tensor5) -> Result<()> {
        if x.channels() != 1 {
            bail!(Shape, "network input must have one channel, got {}", x.channels());
        }
        let rf = receptive_field(self.spec.m)?;
        if x.spatial().iter().any(|&d| d < rf) {
            bail!(Shape, "input spatial dims {:?} smaller than the receptive field {rf}", x.spatial());
        }
        Ok(())
    }

    /// Inference-mode forward using the frozen running statistics.
    pub fn forward(&self, x: &Tensor5) -> Result<Tensor5> {
        self.check_input(x)?;
        let mut h = x.clone();
        for block in &self.blocks {
            h = conv3d_forward(&h, &block.conv)?;
            let mut bn = block.bn.clone();
            h = batchnorm_forward(&h, &mut bn, false)?.0;
            leaky_relu_in_place(&mut h, self.slope);
        }
        Ok(h)
    }

    /// Training-mode forward: batch statistics of `x` normalize every block
    /// and are folded into the running averages.
    pub fn forward_train(&mut self, x: &Tensor5) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.blocks.len() + 1);
        let mut caches = Vec::with_capacity(self.blocks.len());
        activations.push(x.clone());
        for block in &mut self.blocks {
            let z = conv3d_forward(activations.last().expect("non-empty"), &block.conv)?;
            let (mut h, cache) = batchnorm_forward(&z, &mut block.bn, true)?;
            leaky_relu_in_place(&mut h, self.slope);
            caches.push(cache.expect("training mode returns a cache"));
            activations.push(h);
        }
        Ok(ForwardTrace { activations, bn: caches })
    }

    /// Gradients of a scalar loss given its gradient with respect to the
    /// network output of `trace`.
    pub fn backward(&self, trace: &ForwardTrace, grad_out: &Tensor5) -> Result<Gradients> {
        if trace.bn.len() != self.blocks.len() {
            bail!(Shape, "trace has {} blocks, model has {}", trace.bn.len(), self.blocks.len());
        }
        if grad_out.shape() != trace.output().shape() {
            bail!(Shape, "grad_out {:?} does not match output {:?}", grad_out.shape(), trace.output().shape());
        }
        let mut grads = Vec::with_capacity(self.blocks.len());
        let mut g = grad_out.clone();
        for (l, block) in self.blocks.iter().enumerate().rev() {
            leaky_relu_backward_in_place(&trace.activations[l + 1], self.slope, &mut g);
            let (gz, gamma, beta) = batchnorm_backward(&trace.bn[l], &g)?;
            let conv = conv3d_backward(&trace.activations[l], &block.conv, &gz, l > 0)?;
            grads.push(BlockGrads { kernel: conv.kernel, bias: conv.bias, gamma, beta });
            if let Some(gi) = conv.input {
                g = gi;
            }
        }
        grads.reverse();
        Ok(Gradients { blocks: grads })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut buf, self.spec.m);
        put_u32(&mut buf, self.spec.n);
        buf.extend_from_slice(&self.slope.to_le_bytes());
        let bn = &self.blocks[0].bn;
        buf.extend_from_slice(&bn.eps.to_le_bytes());
        buf.extend_from_slice(&bn.momentum.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.train_steps.to_le_bytes());
        buf.push(self.reference_porosity.is_some() as u8);
        buf.extend_from_slice(&self.reference_porosity.unwrap_or(0.0).to_le_bytes());
        for block in &self.blocks {
            let c = &block.conv;
            let [kd, kh, kw] = c.kernel_dims;
            put_array(&mut buf, &[kd, kh, kw, c.c_in, c.c_out], &c.kernel);
            put_array(&mut buf, &[c.c_out], &c.bias);
            for v in [&block.bn.gamma, &block.bn.beta, &block.bn.running_mean, &block.bn.running_var] {
                put_array(&mut buf, &[v.len()], v);
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            bail!(Format, "not an MM01 model file");
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            bail!(Format, "model checksum mismatch (truncated or corrupt file)");
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = u16::from_le_bytes(r.take::<2>()?);
        if version != VERSION {
            bail!(Format, "unsupported model version {version}");
        }
        let spec = NetworkSpec::new(r.u32()?, r.u32()?)?;
        let slope = r.f64()?;
        let eps = r.f64()?;
        let momentum = r.f64()?;
        let seed = u64::from_le_bytes(r.take::<8>()?);
        let train_steps = u64::from_le_bytes(r.take::<8>()?);
        let has_phi = r.take::<1>()?[0] != 0;
        let phi = r.f64()?;
        let mut params = init_params(spec, seed)?;
        for block in &mut params.blocks {
            let c = &mut block.conv;
            let [kd, kh, kw] = c.kernel_dims;
            c.kernel = r.array(&[kd, kh, kw, c.c_in, c.c_out])?;
            c.bias = r.array(&[c.c_out])?;
            let ch = block.bn.channels();
            block.bn = BatchNormParams {
                gamma: r.array(&[ch])?,
                beta: r.array(&[ch])?,
                running_mean: r.array(&[ch])?,
                running_var: r.array(&[ch])?,
                momentum,
                eps,
            };
        }
        if r.pos != body.len() {
            bail!(Format, "{} trailing bytes after the last layer", body.len() - r.pos);
        }
        params.slope = slope;
        params.train_steps = train_steps;
        params.reference_porosity = has_phi.then_some(phi);
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("dimension fits in u32");
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Rank, dims, then values.
fn put_array(buf: &mut Vec<u8>, dims: &[usize], values: &[f64]) {
    debug_assert_eq!(dims.iter().product::<usize>(), values.len());
    put_u32(buf, dims.len());
    dims.iter().for_each(|&d| put_u32(buf, d));
    values.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const K: usize>(&mut self) -> Result<[u8; K]> {
        let end = self.pos + K;
        let Some(bytes) = self.buf.get(self.pos..end) else {
            bail!(Format, "model payload truncated at byte {}", self.pos);
        };
        self.pos = end;
        Ok(bytes.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take::<4>()?) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take::<8>()?))
    }

    fn array(&mut self, dims: &[usize]) -> Result<Vec<f64>> {
        let rank = self.u32()?;
        let stored: Vec<usize> = (0..rank).map(|_| self.u32()).collect::<Result<_>>()?;
        if stored != dims {
            return Err(Error::Format(format!("layer array shape {stored:?}, expected {dims:?}")));
        }
        (0..dims.iter().product::<usize>()).map(|_| self.f64()).collect()
    }
}
