//! Parameterized layers on top of the autograd tape.
//!
//! Layers own `ParamId`s into a shared [`ParamStore`] and mount them lazily
//! at forward time, so the same layer definitions serve f32 training tapes
//! and f64 checking tapes.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamId, ParamStore, Scalar, Tape, Var};

/// Negative slope of the leaky rectifier used throughout the conv stacks.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Standard normal sample (Box-Muller, deterministic under the seeded rng).
pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// N(0, sqrt(2/fan_in)); convolutions feeding rectifiers.
    HeNormal,
    /// N(0, std); attention/MLP projections.
    Normal(f64),
    /// Residual-branch outputs and positional-encoding kernels start at
    /// identity.
    Zeros,
}

fn init_tensor(rng: &mut ChaCha8Rng, shape: &[usize], init: Init, fan_in: usize) -> ArrayD<f64> {
    match init {
        Init::Zeros => ArrayD::zeros(IxDyn(shape)),
        Init::Normal(std) => ArrayD::from_shape_fn(IxDyn(shape), |_| randn(rng) * std),
        Init::HeNormal => {
            let std = (2.0 / fan_in as f64).sqrt();
            ArrayD::from_shape_fn(IxDyn(shape), |_| randn(rng) * std)
        }
    }
}

/// 2-D convolution with optional bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            init_tensor(rng, &[cout, cin, k, k], init, cin * k * k),
        );
        let b = ps.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
        Conv2d { w, b: Some(b), stride, pad }
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, ps: &ParamStore, x: Var) -> Var {
        let w = t.param(ps, self.w);
        let b = self.b.map(|b| t.param(ps, b));
        t.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Depthwise 2-D convolution used as convolutional positional encoding in
/// the space layout; zero-initialized so `x + dw(x)` starts as identity.
#[derive(Debug, Clone)]
pub struct DwConv2d {
    pub w: ParamId,
    pub pad: usize,
}

impl DwConv2d {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, k: usize) -> Self {
        let w = ps.add(format!("{name}.w"), ArrayD::zeros(IxDyn(&[channels, k, k])));
        DwConv2d { w, pad: k / 2 }
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, ps: &ParamStore, x: Var) -> Var {
        let w = t.param(ps, self.w);
        t.dwconv2d(x, w, self.pad)
    }
}

/// Depthwise 1-D convolution along the channel-token axis of a transposed
/// window tensor `(n, C, L)`; the positional encoding of channel attention.
/// Fixed channel size `L = window_size²`, one kernel per window position.
#[derive(Debug, Clone)]
pub struct ChanCpe {
    pub w: ParamId,
}

impl ChanCpe {
    pub fn new(ps: &mut ParamStore, name: &str, l: usize, k: usize) -> Self {
        let w = ps.add(format!("{name}.w"), ArrayD::zeros(IxDyn(&[l, k])));
        ChanCpe { w }
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, ps: &ParamStore, x: Var) -> Var {
        let w = t.param(ps, self.w);
        t.chanconv1d(x, w)
    }
}

/// Affine map over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
        init: Init,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), init_tensor(rng, &[din, dout], init, din));
        let b = ps.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[dout])));
        Linear { w, b: Some(b) }
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, ps: &ParamStore, x: Var) -> Var {
        let w = t.param(ps, self.w);
        let b = self.b.map(|b| t.param(ps, b));
        t.linear(x, w, b)
    }
}

/// Layer norm over the last axis with learned scale/offset.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[d]), 1.0));
        let beta = ps.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[d])));
        LayerNorm { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, ps: &ParamStore, x: Var) -> Var {
        let gamma = t.param(ps, self.gamma);
        let beta = t.param(ps, self.beta);
        t.layer_norm(x, gamma, beta, T::from_f64(LN_EPS))
    }
}

/// Two affine maps with a GELU between; the second map starts at zero so the
/// surrounding residual branch is an identity at initialization.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        hidden: usize,
    ) -> Self {
        let fc1 = Linear::new(ps, rng, &format!("{name}.fc1"), d, hidden, Init::Normal(0.02));
        let fc2 = Linear::new(ps, rng, &format!("{name}.fc2"), hidden, d, Init::Zeros);
        Mlp { fc1, fc2 }
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, ps: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(t, ps, x);
        let h = t.gelu(h);
        self.fc2.forward(t, ps, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn randn_is_deterministic_and_reasonable() {
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<f64> = (0..1000).map(|_| randn(&mut a)).collect();
        let ys: Vec<f64> = (0..1000).map(|_| randn(&mut b)).collect();
        assert_eq!(xs, ys);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.12, "mean {mean}");
        assert!((var - 1.0).abs() < 0.2, "var {var}");
    }
}
