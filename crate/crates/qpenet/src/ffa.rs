//! Feature filtering and activation decoding: suppress background with the
//! cleansed prototype, highlight foreground through cosine activation maps of
//! the evolved prototypes, then refine per-pixel with dual cross attention
//! against the support foreground.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvHead, Linear};
use crate::tape::{ParamStore, Tape, Tensor};
use crate::types::{FeatureMap, Mask, Prototype};

/// Cosine denominator guard.
pub const COSINE_EPSILON: f64 = 1e-8;
/// Squared-norm floor inside the square roots, keeping gradients finite on
/// all-zero cells.
const NORM_FLOOR: f64 = 1e-24;

/// Per-position cosine similarity between a prototype and query features,
/// in `[-1, 1]` by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub data: Array2<f64>,
}

impl ActivationMap {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if !data.iter().all(|&v| (-1.0..=1.0).contains(&v)) {
            return Err(Error::ShapeMismatch(
                "activation entries must lie in [-1, 1]".into(),
            ));
        }
        Ok(Self { data })
    }
}

/// `A(i) = <p, f(i)> / (|p| |f(i)| + eps)` on the tape. A zero prototype
/// yields the all-zero map.
pub fn activation_map_t(tape: &Tape, p: &Tensor, f: &Tensor) -> Tensor {
    let (h, w) = (f.shape()[0], f.shape()[1]);
    let num = tape.sum_c(&tape.mul(f, &tape.broadcast_hw(p, h, w)));
    let p_norm = tape.sqrt(&tape.clamp_min(&tape.sum_all(&tape.mul(p, p)), NORM_FLOOR));
    let f_norm = tape.sqrt(&tape.clamp_min(&tape.sum_c(&tape.mul(f, f)), NORM_FLOOR));
    let denom = tape.add_scalar(&tape.mul_s(&f_norm, &p_norm), COSINE_EPSILON);
    tape.div(&num, &denom)
}

/// Cosine activation map over domain types.
pub fn activation_map(p: &Prototype, f: &FeatureMap) -> Result<ActivationMap> {
    if p.channels() != f.channels() {
        return Err(Error::ChannelMismatch {
            expected: f.channels(),
            got: p.channels(),
        });
    }
    let tape = Tape::eval();
    let a = activation_map_t(
        &tape,
        &tape.constant1(p.data.clone()),
        &tape.constant3(f.data.clone()),
    );
    ActivationMap::new(a.to_array2())
}

/// Single-head scaled dot-product cross attention with the key/value set
/// restricted to support foreground positions. The residual connection keeps
/// the query stream's per-position content.
pub struct CrossAttentionBlock {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    channels: usize,
}

impl CrossAttentionBlock {
    pub fn new(ps: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize) -> Self {
        Self {
            wq: Linear::new(ps, rng, &format!("{name}.wq"), channels, channels),
            wk: Linear::new(ps, rng, &format!("{name}.wk"), channels, channels),
            wv: Linear::new(ps, rng, &format!("{name}.wv"), channels, channels),
            channels,
        }
    }

    /// `x`: `[h, w, c]` query stream; `keys`: `[n, c]` support foreground
    /// features. Returns the attended map and the `[h*w, n]` attention
    /// weights (each row sums to 1).
    pub fn forward(
        &self,
        tape: &Tape,
        ps: &ParamStore,
        x: &Tensor,
        keys: &Tensor,
    ) -> (Tensor, Tensor) {
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert_eq!(c, self.channels, "attention channel mismatch");
        assert_eq!(keys.shape()[1], self.channels, "key channel mismatch");
        let q = self.wq.forward(tape, ps, &tape.reshape(x, &[h * w, c]));
        let k = self.wk.forward(tape, ps, keys);
        let v = self.wv.forward(tape, ps, keys);
        let scores = tape.scale(
            &tape.matmul(&q, &tape.transpose2(&k)),
            1.0 / (c as f64).sqrt(),
        );
        let attn = tape.softmax_rows(&scores);
        let attended = tape.reshape(&tape.matmul(&attn, &v), &[h, w, c]);
        (tape.add(x, &attended), attn)
    }
}

/// Which inputs feed the fusion conv; disabling pieces reproduces the
/// prototype-subset and no-activation-map ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FuseInputs {
    pub use_pre: bool,
    pub use_main: bool,
    pub use_aux: bool,
    /// When false, main/aux enter as broadcast prototypes instead of cosine
    /// activation maps.
    pub use_activation_maps: bool,
}

impl Default for FuseInputs {
    fn default() -> Self {
        Self {
            use_pre: true,
            use_main: true,
            use_aux: true,
            use_activation_maps: true,
        }
    }
}

impl FuseInputs {
    pub fn fuse_channels(&self, c: usize) -> usize {
        let per_evolved = if self.use_activation_maps { 1 } else { c };
        c + if self.use_pre { c } else { 0 }
            + if self.use_main { per_evolved } else { 0 }
            + if self.use_aux { per_evolved } else { 0 }
    }
}

/// An evolved prototype with its precomputed cosine activation map.
#[derive(Clone, Copy)]
pub struct EvolvedInput<'a> {
    pub proto: &'a Tensor,
    pub activation: Option<&'a Tensor>,
}

/// The decoder: 1x1 background filter, 1x1 fusion, two cross attention
/// blocks and a final conv head.
pub struct FfaDecoder {
    pub inputs: FuseInputs,
    filter: Conv2d,
    fuse: Conv2d,
    cross1: CrossAttentionBlock,
    cross2: CrossAttentionBlock,
    head: ConvHead,
    channels: usize,
}

impl FfaDecoder {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        channels: usize,
        head_hidden: usize,
        inputs: FuseInputs,
    ) -> Self {
        let filter = Conv2d::new(ps, rng, "ffa.filter", 2 * channels, channels, 1, 1, 0, false);
        let fuse = Conv2d::new(
            ps,
            rng,
            "ffa.fuse",
            inputs.fuse_channels(channels),
            channels,
            1,
            1,
            0,
            false,
        );
        let cross1 = CrossAttentionBlock::new(ps, rng, "ffa.cross1", channels);
        let cross2 = CrossAttentionBlock::new(ps, rng, "ffa.cross2", channels);
        let head = ConvHead::new(ps, rng, "ffa.head", channels, head_hidden, 1);
        Self {
            inputs,
            filter,
            fuse,
            cross1,
            cross2,
            head,
            channels,
        }
    }

    pub fn filter_conv(&self) -> &Conv2d {
        &self.filter
    }

    pub fn fuse_conv(&self) -> &Conv2d {
        &self.fuse
    }

    /// Suppress background components: `F_dot = Conv1(concat(F_q, BC(P_bg)))`.
    pub fn filter_background(
        &self,
        tape: &Tape,
        ps: &ParamStore,
        f_q: &Tensor,
        p_bg: &Tensor,
    ) -> Tensor {
        let (h, w) = (f_q.shape()[0], f_q.shape()[1]);
        assert_eq!(f_q.shape()[2], self.channels, "filter channel mismatch");
        let joined = tape.concat_c(&[f_q, &tape.broadcast_hw(p_bg, h, w)]);
        self.filter.forward(tape, ps, &joined)
    }

    /// Fuse the filtered features with the enabled prototypes / activation
    /// maps: `F_ddot = Conv1(concat(F_dot, BC(P_pre), A_main, A_aux))`.
    /// Callers precompute the activation maps (see [`activation_map_t`]) so
    /// they stay inspectable; protos are broadcast when maps are disabled.
    pub fn fuse_features(
        &self,
        tape: &Tape,
        ps: &ParamStore,
        f_dot: &Tensor,
        p_pre: &Tensor,
        main_src: Option<EvolvedInput<'_>>,
        aux_src: Option<EvolvedInput<'_>>,
    ) -> Tensor {
        let (h, w) = (f_dot.shape()[0], f_dot.shape()[1]);
        let mut parts: Vec<Tensor> = vec![f_dot.clone()];
        if self.inputs.use_pre {
            parts.push(tape.broadcast_hw(p_pre, h, w));
        }
        let mut push_evolved = |src: Option<EvolvedInput<'_>>, enabled: bool| {
            let Some(src) = src else { return };
            if !enabled {
                return;
            }
            if self.inputs.use_activation_maps {
                let a = src.activation.expect("activation map required by config");
                parts.push(tape.reshape(a, &[h, w, 1]));
            } else {
                parts.push(tape.broadcast_hw(src.proto, h, w));
            }
        };
        push_evolved(main_src, self.inputs.use_main);
        push_evolved(aux_src, self.inputs.use_aux);
        let refs: Vec<&Tensor> = parts.iter().collect();
        self.fuse.forward(tape, ps, &tape.concat_c(&refs))
    }

    /// Row-major flat indices of the support foreground cells.
    pub fn foreground_indices(mask: &Mask) -> Result<Vec<usize>> {
        let (h, w) = mask.data.dim();
        let mut idx = Vec::new();
        for i in 0..h {
            for j in 0..w {
                if mask.data[[i, j]] > 0.0 {
                    idx.push(i * w + j);
                }
            }
        }
        if idx.is_empty() {
            return Err(Error::EmptySupport);
        }
        Ok(idx)
    }

    /// Final prediction through both attention blocks and the head. With
    /// several supports each block runs per support and the streams are
    /// averaged; for identical supports this reproduces the single-support
    /// output bitwise.
    pub fn final_predict(
        &self,
        tape: &Tape,
        ps: &ParamStore,
        f_ddot: &Tensor,
        supports: &[(Tensor, Mask)],
    ) -> Result<Tensor> {
        let key_sets = self.gather_keys(tape, supports)?;
        let c1_branches: Vec<Tensor> = key_sets
            .iter()
            .map(|keys| self.cross1.forward(tape, ps, f_ddot, keys).0)
            .collect();
        let c1 = tape.mean_preserving(&c1_branches);
        let c2_branches: Vec<Tensor> = key_sets
            .iter()
            .map(|keys| self.cross2.forward(tape, ps, &c1, keys).0)
            .collect();
        let c2 = tape.mean_preserving(&c2_branches);
        Ok(self.head.forward(tape, ps, &c2))
    }

    /// Attention weights of the first block against one support (diagnostic
    /// surface for the row-stochasticity contract).
    pub fn attention_weights(
        &self,
        tape: &Tape,
        ps: &ParamStore,
        f_ddot: &Tensor,
        f_s: &Tensor,
        m_s: &Mask,
    ) -> Result<Tensor> {
        let keys = self.gather_keys(tape, &[(f_s.clone(), m_s.clone())])?;
        Ok(self.cross1.forward(tape, ps, f_ddot, &keys[0]).1)
    }

    fn gather_keys(&self, tape: &Tape, supports: &[(Tensor, Mask)]) -> Result<Vec<Tensor>> {
        supports
            .iter()
            .map(|(f_s, m_s)| {
                let (h, w, c) = (f_s.shape()[0], f_s.shape()[1], f_s.shape()[2]);
                let idx = Self::foreground_indices(m_s)?;
                let flat = tape.reshape(f_s, &[h * w, c]);
                Ok(tape.gather_rows(&flat, idx))
            })
            .collect()
    }
}
