use super::Tensor5;

/// `y = x` for `x > 0`, `slope·x` otherwise.
pub fn leaky_relu(x: &Tensor5, slope: f64) -> Tensor5 {
    let mut y = x.clone();
    leaky_relu_in_place(&mut y, slope);
    y
}

pub fn leaky_relu_in_place(x: &mut Tensor5, slope: f64) {
    for v in x.data_mut() {
        if *v <= 0.0 {
            *v *= slope;
        }
    }
}

/// Gradient is 1 where `x > 0` and `slope` elsewhere (including at 0).
pub fn leaky_relu_backward(x: &Tensor5, slope: f64, grad_out: &Tensor5) -> Tensor5 {
    let mut g = grad_out.clone();
    leaky_relu_backward_in_place(x, slope, &mut g);
    g
}

/// Same as [`leaky_relu_backward`], scaling `grad` in place. `x` may be
/// either the activation input or its output, which share a sign.
pub fn leaky_relu_backward_in_place(x: &Tensor5, slope: f64, grad: &mut Tensor5) {
    assert_eq!(x.shape(), grad.shape(), "leaky_relu_backward shape mismatch");
    for (g, &v) in grad.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *g *= slope;
        }
    }
}
