use super::gemm::{gemm_acc, Layout};
use super::Tensor5;
use crate::error::{bail, Result};

/// Weights of one valid, stride-1 convolution.
///
/// The kernel is logically `(C_out, C_in, kd, kh, kw)`. It is stored as
/// `(kd, kh, kw, C_in, C_out)` so that each `(dz, dy)` slab is a contiguous
/// `(kw·C_in × C_out)` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerParams {
    pub c_out: usize,
    pub c_in: usize,
    /// Kernel extent along (z, y, x).
    pub kernel_dims: [usize; 3],
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayerParams {
    /// Zero cubic `k×k×k` kernel.
    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Self {
        Self::zeros_with_dims(c_out, c_in, [k, k, k])
    }

    /// Zero `1×k×k` kernel acting within XY planes.
    pub fn zeros_planar(c_out: usize, c_in: usize, k: usize) -> Self {
        Self::zeros_with_dims(c_out, c_in, [1, k, k])
    }

    fn zeros_with_dims(c_out: usize, c_in: usize, kernel_dims: [usize; 3]) -> Self {
        assert!(c_out >= 1 && c_in >= 1 && kernel_dims.iter().all(|&k| k >= 1));
        Self {
            c_out,
            c_in,
            kernel_dims,
            kernel: vec![0.0; kernel_dims.iter().product::<usize>() * c_in * c_out],
            bias: vec![0.0; c_out],
        }
    }

    pub fn kernel_index(&self, o: usize, i: usize, dz: usize, dy: usize, dx: usize) -> usize {
        let [_, kh, kw] = self.kernel_dims;
        (((dz * kh + dy) * kw + dx) * self.c_in + i) * self.c_out + o
    }

    pub fn weight(&self, o: usize, i: usize, dz: usize, dy: usize, dx: usize) -> f64 {
        self.kernel[self.kernel_index(o, i, dz, dy, dx)]
    }

    pub fn set_weight(&mut self, o: usize, i: usize, dz: usize, dy: usize, dx: usize, v: f64) {
        let idx = self.kernel_index(o, i, dz, dy, dx);
        self.kernel[idx] = v;
    }

    /// Number of inputs feeding one output value.
    pub fn fan_in(&self) -> usize {
        self.c_in * self.kernel_dims.iter().product::<usize>()
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            if input[a] < self.kernel_dims[a] {
                bail!(Shape, "input spatial dims {input:?} smaller than kernel {:?}", self.kernel_dims);
            }
            out[a] = input[a] - self.kernel_dims[a] + 1;
        }
        Ok(out)
    }

    fn check_input(&self, x: &Tensor5) -> Result<[usize; 3]> {
        if x.channels() != self.c_in {
            bail!(Shape, "conv expects {} input channels, got {}", self.c_in, x.channels());
        }
        self.output_dims(x.spatial())
    }
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    /// `None` when the input gradient was not requested.
    pub input: Option<Tensor5>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Geometry shared by forward and backward for one output plane.
///
/// Output rows of a plane are laid out with the *input* row pitch, so every
/// `(dz, dy)` kernel slab is a single matrix product over a flat run of
/// `rows` positions. Columns `x >= W_out` of each row are padding.
struct PlaneGeometry {
    in_dims: [usize; 3],
    rows: usize,
}

impl PlaneGeometry {
    fn new(in_dims: [usize; 3], out_dims: [usize; 3]) -> Self {
        let rows = (out_dims[1] - 1) * in_dims[2] + out_dims[2];
        Self { in_dims, rows }
    }

    /// Offset of input voxel `(z, y, 0)` of sample `n`, channel 0.
    fn input_offset(&self, n: usize, z: usize, y: usize, c_in: usize) -> usize {
        let [d, h, w] = self.in_dims;
        ((n * d + z) * h + y) * w * c_in
    }
}

/// Valid cross-correlation, stride 1:
/// `out[n,o,z,y,x] = bias[o] + Σ kernel[o,i,dz,dy,dx] · x[n,i,z+dz,y+dy,x+dx]`.
pub fn conv3d_forward(x: &Tensor5, p: &ConvLayerParams) -> Result<Tensor5> {
    let out_dims = p.check_input(x)?;
    if !x.is_finite() {
        bail!(NonFinite, "conv3d_forward input");
    }
    let geo = PlaneGeometry::new(x.spatial(), out_dims);
    let (c_in, c_out) = (p.c_in, p.c_out);
    let [kd, kh, kw] = p.kernel_dims;
    let w_in = geo.in_dims[2];
    let slab = kw * c_in * c_out;
    let mut out = Tensor5::zeros([x.batch(), c_out, out_dims[0], out_dims[1], out_dims[2]]);
    let mut plane = vec![0.0; geo.rows * c_out];
    let row_len = out_dims[2] * c_out;
    let mut dst = 0;
    for n in 0..x.batch() {
        for z in 0..out_dims[0] {
            for row in plane.chunks_exact_mut(c_out) {
                row.copy_from_slice(&p.bias);
            }
            for dz in 0..kd {
                for dy in 0..kh {
                    gemm_acc(
                        geo.rows,
                        kw * c_in,
                        c_out,
                        x.data(),
                        Layout::new(geo.input_offset(n, z + dz, dy, c_in), c_in, 1),
                        &p.kernel,
                        Layout::new((dz * kh + dy) * slab, c_out, 1),
                        &mut plane,
                        Layout::new(0, c_out, 1),
                    );
                }
            }
            let data = out.data_mut();
            for y in 0..out_dims[1] {
                let src = y * w_in * c_out;
                data[dst..dst + row_len].copy_from_slice(&plane[src..src + row_len]);
                dst += row_len;
            }
        }
    }
    Ok(out)
}

/// Exact gradients of [`conv3d_forward`].
pub fn conv3d_backward(
    x: &Tensor5,
    p: &ConvLayerParams,
    grad_out: &Tensor5,
    need_input_grad: bool,
) -> Result<ConvGrads> {
    let out_dims = p.check_input(x)?;
    let expected = [x.batch(), p.c_out, out_dims[0], out_dims[1], out_dims[2]];
    if grad_out.shape() != expected {
        bail!(Shape, "conv grad_out shape {:?}, forward produced {expected:?}", grad_out.shape());
    }
    let geo = PlaneGeometry::new(x.spatial(), out_dims);
    let (c_in, c_out) = (p.c_in, p.c_out);
    let [kd, kh, kw] = p.kernel_dims;
    let w_in = geo.in_dims[2];
    let slab = kw * c_in * c_out;
    let mut grad_kernel = vec![0.0; p.kernel.len()];
    let mut grad_bias = vec![0.0; c_out];
    let mut grad_input = need_input_grad.then(|| Tensor5::zeros(x.shape()));
    // grad_out plane re-pitched to the input row length, padding columns zero
    let mut plane = vec![0.0; geo.rows * c_out];
    let row_len = out_dims[2] * c_out;
    let mut src = 0;
    for n in 0..x.batch() {
        for z in 0..out_dims[0] {
            for y in 0..out_dims[1] {
                let g = &grad_out.data()[src..src + row_len];
                plane[y * w_in * c_out..y * w_in * c_out + row_len].copy_from_slice(g);
                for v in g.chunks_exact(c_out) {
                    for (b, gv) in grad_bias.iter_mut().zip(v) {
                        *b += gv;
                    }
                }
                src += row_len;
            }
            for dz in 0..kd {
                for dy in 0..kh {
                    let in_off = geo.input_offset(n, z + dz, dy, c_in);
                    // dK[dz,dy] (kw·C_in × C_out) += Aᵀ · G
                    gemm_acc(
                        kw * c_in,
                        geo.rows,
                        c_out,
                        x.data(),
                        Layout::new(in_off, 1, c_in),
                        &plane,
                        Layout::new(0, c_out, 1),
                        &mut grad_kernel,
                        Layout::new((dz * kh + dy) * slab, c_out, 1),
                    );
                    if let Some(gi) = grad_input.as_mut() {
                        for dx in 0..kw {
                            // dX[row + dx] (C_in) += G[row] · K[dz,dy,dx]ᵀ
                            gemm_acc(
                                geo.rows,
                                c_out,
                                c_in,
                                &plane,
                                Layout::new(0, c_out, 1),
                                &p.kernel,
                                Layout::new((dz * kh + dy) * slab + dx * c_in * c_out, 1, c_out),
                                gi.data_mut(),
                                Layout::new(in_off + dx * c_in, c_in, 1),
                            );
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads { input: grad_input, kernel: grad_kernel, bias: grad_bias })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: [usize; 5], rng: &mut ChaCha8Rng) -> Tensor5 {
        Tensor5::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn random_conv(c_out: usize, c_in: usize, k: usize, rng: &mut ChaCha8Rng) -> ConvLayerParams {
        let mut p = ConvLayerParams::zeros(c_out, c_in, k);
        p.kernel.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        p.bias.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        p
    }

    /// Seven nested loops straight from the definition.
    fn naive_conv(x: &Tensor5, p: &ConvLayerParams) -> Tensor5 {
        let [n, _, d, h, w] = x.shape();
        let [kd, kh, kw] = p.kernel_dims;
        let out = [d - kd + 1, h - kh + 1, w - kw + 1];
        let mut y = Tensor5::zeros([n, p.c_out, out[0], out[1], out[2]]);
        for ni in 0..n {
            for o in 0..p.c_out {
                for z in 0..out[0] {
                    for yy in 0..out[1] {
                        for xx in 0..out[2] {
                            let mut acc = p.bias[o];
                            for i in 0..p.c_in {
                                for dz in 0..kd {
                                    for dy in 0..kh {
                                        for dx in 0..kw {
                                            acc += p.weight(o, i, dz, dy, dx) * x.get(ni, i, z + dz, yy + dy, xx + dx);
                                        }
                                    }
                                }
                            }
                            y.set(ni, o, z, yy, xx, acc);
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn identity_pointwise_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor([1, 3, 2, 3, 4], &mut rng);
        let mut p = ConvLayerParams::zeros(3, 3, 1);
        for c in 0..3 {
            p.set_weight(c, c, 0, 0, 0, 1.0);
        }
        assert_eq!(conv3d_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn all_ones_cube() {
        let x = Tensor5::from_fn([1, 1, 3, 3, 3], |_| 1.0);
        let mut p = ConvLayerParams::zeros(1, 1, 3);
        p.kernel.fill(1.0);
        let y = conv3d_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 1, 1]);
        assert_eq!(y.data(), &[27.0]);
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (shape, c_out, k) in [([1, 2, 5, 5, 5], 3, 3), ([2, 3, 4, 6, 5], 2, 3), ([1, 4, 3, 2, 5], 5, 1)] {
            let x = random_tensor(shape, &mut rng);
            let p = random_conv(c_out, shape[1], k, &mut rng);
            let fast = conv3d_forward(&x, &p).unwrap();
            let slow = naive_conv(&x, &p);
            let diff = fast.data().iter().zip(slow.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "max diff {diff}");
        }
    }

    #[test]
    fn shape_errors() {
        let x = Tensor5::zeros([1, 2, 2, 5, 5]);
        assert!(conv3d_forward(&x, &ConvLayerParams::zeros(1, 2, 3)).is_err());
        assert!(conv3d_forward(&x, &ConvLayerParams::zeros(1, 3, 1)).is_err());
        let mut bad = Tensor5::zeros([1, 1, 3, 3, 3]);
        bad.data_mut()[4] = f64::NAN;
        assert!(conv3d_forward(&bad, &ConvLayerParams::zeros(1, 1, 3)).is_err());
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor([1, 2, 4, 4, 4], &mut rng);
        let p = random_conv(3, 2, 3, &mut rng);
        let g = conv3d_backward(&x, &p, &Tensor5::zeros([1, 3, 2, 2, 2]), true).unwrap();
        assert!(g.kernel.iter().chain(&g.bias).all(|&v| v == 0.0));
        assert!(g.input.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_voxel_identity_backward() {
        let x = Tensor5::zeros([1, 2, 3, 3, 3]);
        let mut p = ConvLayerParams::zeros(2, 2, 1);
        p.set_weight(0, 0, 0, 0, 0, 1.0);
        p.set_weight(1, 1, 0, 0, 0, 1.0);
        let mut g = Tensor5::zeros([1, 2, 3, 3, 3]);
        g.set(0, 1, 1, 2, 0, 0.75);
        let grads = conv3d_backward(&x, &p, &g, true).unwrap();
        assert_eq!(grads.input.unwrap(), g);
    }

    #[test]
    fn translation_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor([1, 2, 7, 7, 7], &mut rng);
        let p = random_conv(2, 2, 3, &mut rng);
        let full = conv3d_forward(&x, &p).unwrap();
        for shift in [[1, 0, 0], [0, 2, 0], [0, 0, 1], [1, 1, 2]] {
            let size = [7 - shift[0], 7 - shift[1], 7 - shift[2]];
            let shifted = conv3d_forward(&x.crop(shift, size).unwrap(), &p).unwrap();
            let expect = full.crop(shift, shifted.spatial()).unwrap();
            assert_eq!(shifted, expect);
        }
    }
}
