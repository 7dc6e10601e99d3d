//! Parameterized layers built on the tape: convolutions, fully connected
//! layers, instance normalization, and the small conv+sigmoid heads every
//! prediction branch uses.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tape::{ParamId, ParamStore, Tape, Tensor};

pub fn kaiming_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

pub fn gaussian(rng: &mut impl Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

/// 2-D convolution layer with zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        frozen: bool,
    ) -> Self {
        let weight = ps.register(
            format!("{name}.weight"),
            kaiming_normal(rng, &[k, k, cin, cout], k * k * cin),
            frozen,
        );
        let bias = ps.register(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout])), frozen);
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &Tape, ps: &ParamStore, x: &Tensor) -> Tensor {
        let w = tape.param(ps, self.weight);
        let b = tape.param(ps, self.bias);
        tape.conv2d(x, &w, &b, self.stride, self.pad)
    }
}

/// Fully connected layer on `[m, cin] -> [m, cout]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        let weight = ps.register(
            format!("{name}.weight"),
            kaiming_normal(rng, &[cin, cout], cin),
            false,
        );
        let bias = ps.register(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout])), false);
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &Tape, ps: &ParamStore, x: &Tensor) -> Tensor {
        let w = tape.param(ps, self.weight);
        let b = tape.param(ps, self.bias);
        tape.add_row_bias(&tape.matmul(x, &w), &b)
    }
}

/// Per-channel normalization over the spatial grid with learnable affine,
/// which keeps single-episode training independent of batch composition.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl InstanceNorm {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize) -> Self {
        let gamma = ps.register(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[c])), false);
        let beta = ps.register(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[c])), false);
        Self {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &Tape, ps: &ParamStore, x: &Tensor) -> Tensor {
        let shape = x.shape();
        let (h, w) = (shape[0], shape[1]);
        let mu = tape.mean_hw(x);
        let centered = tape.sub(x, &tape.broadcast_hw(&mu, h, w));
        let var = tape.mean_hw(&tape.mul(&centered, &centered));
        let std = tape.sqrt(&tape.add_scalar(&var, self.eps));
        let normed = tape.div(&centered, &tape.broadcast_hw(&std, h, w));
        let g = tape.param(ps, self.gamma);
        let b = tape.param(ps, self.beta);
        tape.add(
            &tape.mul(&normed, &tape.broadcast_hw(&g, h, w)),
            &tape.broadcast_hw(&b, h, w),
        )
    }
}

/// A stack of 3x3 conv + ReLU blocks closed by a 1x1 conv and sigmoid,
/// producing a soft single-channel mask.
#[derive(Debug, Clone)]
pub struct ConvHead {
    pub blocks: Vec<Conv2d>,
    pub out: Conv2d,
}

impl ConvHead {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        hidden: usize,
        depth: usize,
    ) -> Self {
        let mut blocks = Vec::with_capacity(depth);
        let mut cin = in_channels;
        for i in 0..depth {
            blocks.push(Conv2d::new(
                ps,
                rng,
                &format!("{name}.conv{i}"),
                cin,
                hidden,
                3,
                1,
                1,
                false,
            ));
            cin = hidden;
        }
        let out = Conv2d::new(ps, rng, &format!("{name}.out"), cin, 1, 1, 1, 0, false);
        Self { blocks, out }
    }

    /// `[h, w, cin] -> [h, w]` soft mask.
    pub fn forward(&self, tape: &Tape, ps: &ParamStore, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        for block in &self.blocks {
            cur = tape.relu(&block.forward(tape, ps, &cur));
        }
        let logits = self.out.forward(tape, ps, &cur);
        let shape = logits.shape().to_vec();
        let flat = tape.reshape(&logits, &[shape[0], shape[1]]);
        tape.sigmoid(&flat)
    }
}
