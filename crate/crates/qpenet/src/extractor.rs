//! Feature extraction: one extractor instance serves both support and query
//! images, which makes weight sharing structural rather than conventional.
//! The default is a small trainable CNN; frozen ResNet backbones can be
//! plugged in from a weight archive.

use std::path::PathBuf;

use ndarray::{Array3, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::{Conv2d, InstanceNorm};
use crate::tape::{ParamId, ParamStore, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorVariant {
    ToyCnn,
    PretrainedResnet50,
    PretrainedResnet101,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub variant: ExtractorVariant,
    /// Output channel count `c`.
    pub out_channels: usize,
    /// Expected square input size; extraction rejects anything else.
    pub input_size: usize,
    /// Stride schedule of the toy CNN; one conv block per entry.
    pub strides: Vec<usize>,
    /// Weight archive for the pretrained variants.
    pub weight_file: Option<PathBuf>,
    /// Backbone stages whose outputs are concatenated and reduced to `c`.
    /// The deeper tap is bilinearly upsampled onto the shallower grid.
    pub taps: (usize, usize),
}

impl ExtractorConfig {
    pub fn toy() -> Self {
        Self {
            variant: ExtractorVariant::ToyCnn,
            out_channels: 64,
            input_size: 64,
            strides: vec![1, 2, 2, 2],
            weight_file: None,
            taps: (2, 3),
        }
    }

    pub fn pretrained(variant: ExtractorVariant, weight_file: PathBuf) -> Self {
        Self {
            variant,
            out_channels: 64,
            input_size: 473,
            strides: vec![],
            weight_file: Some(weight_file),
            taps: (2, 3),
        }
    }

    /// Pretrained backbones keep fixed weights; the toy CNN trains.
    pub fn frozen(&self) -> bool {
        self.variant != ExtractorVariant::ToyCnn
    }

    /// Spatial size of the feature grid this config produces.
    pub fn feature_size(&self) -> usize {
        match self.variant {
            ExtractorVariant::ToyCnn => {
                let mut s = self.input_size;
                for &stride in &self.strides {
                    s = s.div_ceil(stride);
                }
                s
            }
            // conv1 /2, maxpool /4, then /2 per stage past stage 1; the
            // shallower tap sets the grid.
            _ => self.input_size / (4 * (1 << (self.taps.0.min(self.taps.1) - 1))),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.out_channels == 0 {
            return Err(Error::InvalidConfig("out_channels must be positive".into()));
        }
        match self.variant {
            ExtractorVariant::ToyCnn => {
                if self.strides.is_empty() {
                    return Err(Error::InvalidConfig("toy_cnn needs a stride schedule".into()));
                }
            }
            _ => {
                if self.weight_file.is_none() {
                    return Err(Error::InvalidConfig(
                        "pretrained variants require a weight file".into(),
                    ));
                }
                let (a, b) = self.taps;
                if !(1..=3).contains(&a) || !(1..=3).contains(&b) {
                    return Err(Error::InvalidConfig("taps must be stages 1..=3".into()));
                }
            }
        }
        Ok(())
    }
}

/// Widths of the toy CNN blocks: ramp from 16 up to `c`.
fn toy_widths(n: usize, c: usize) -> Vec<usize> {
    if n == 1 {
        return vec![c];
    }
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            ((16.0 + (c as f64 - 16.0) * t).round() as usize).max(1)
        })
        .collect()
}

pub struct Extractor {
    pub cfg: ExtractorConfig,
    kind: ExtractorKind,
}

enum ExtractorKind {
    Toy {
        blocks: Vec<(Conv2d, InstanceNorm)>,
    },
    Frozen(Box<FrozenBackbone>),
}

impl Extractor {
    pub fn new(ps: &mut ParamStore, rng: &mut impl Rng, cfg: ExtractorConfig) -> Result<Self> {
        cfg.validate()?;
        let kind = match cfg.variant {
            ExtractorVariant::ToyCnn => {
                let widths = toy_widths(cfg.strides.len(), cfg.out_channels);
                let mut blocks = Vec::new();
                let mut cin = 3;
                for (i, (&stride, &width)) in cfg.strides.iter().zip(&widths).enumerate() {
                    let conv = Conv2d::new(
                        ps,
                        rng,
                        &format!("extractor.block{i}"),
                        cin,
                        width,
                        3,
                        stride,
                        1,
                        false,
                    );
                    let norm = InstanceNorm::new(ps, &format!("extractor.norm{i}"), width);
                    blocks.push((conv, norm));
                    cin = width;
                }
                ExtractorKind::Toy { blocks }
            }
            _ => ExtractorKind::Frozen(Box::new(FrozenBackbone::load(ps, &cfg)?)),
        };
        Ok(Self { cfg, kind })
    }

    /// Extract features on the tape. Frozen variants contribute no gradient
    /// and are returned as constants.
    pub fn extract_t(&self, tape: &Tape, ps: &ParamStore, image: &Array3<f64>) -> Result<Tensor> {
        let (h, w, ch) = image.dim();
        if ch != 3 || h != self.cfg.input_size || w != self.cfg.input_size {
            return Err(Error::ShapeMismatch(format!(
                "extractor expects [{0}, {0}, 3] input, got [{h}, {w}, {ch}]",
                self.cfg.input_size
            )));
        }
        match &self.kind {
            ExtractorKind::Toy { blocks } => {
                let mut cur = tape.constant3(image.clone());
                for (conv, norm) in blocks {
                    cur = conv.forward(tape, ps, &cur);
                    cur = norm.forward(tape, ps, &cur);
                    cur = tape.relu(&cur);
                }
                Ok(cur)
            }
            ExtractorKind::Frozen(backbone) => {
                // No-grad path: compute plainly and wrap as a constant.
                Ok(tape.constant3(backbone.forward(ps, image)))
            }
        }
    }

    /// Plain extraction outside any training graph.
    pub fn extract(&self, ps: &ParamStore, image: &Array3<f64>) -> Result<crate::types::FeatureMap> {
        let tape = Tape::eval();
        let t = self.extract_t(&tape, ps, image)?;
        crate::types::FeatureMap::new(t.to_array3())
    }

    /// Ids of every extractor parameter, frozen or not.
    pub fn param_ids(&self) -> Vec<ParamId> {
        match &self.kind {
            ExtractorKind::Toy { blocks } => blocks
                .iter()
                .flat_map(|(c, n)| [c.weight, c.bias, n.gamma, n.beta])
                .collect(),
            ExtractorKind::Frozen(b) => b.param_ids.clone(),
        }
    }

    /// Hash of all extractor weight bytes; support and query extraction share
    /// one instance, so equal fingerprints certify weight sharing.
    pub fn weight_fingerprint(&self, ps: &ParamStore) -> u64 {
        let mut hash = 0xcbf29ce484222325u64;
        for id in self.param_ids() {
            for v in ps.value(id).iter() {
                for byte in v.to_le_bytes() {
                    hash ^= byte as u64;
                    hash = hash.wrapping_mul(0x100000001b3);
                }
            }
        }
        hash
    }
}

/// Bottleneck ResNet trunk (conv1 + stages 1..=3) with batch-norm folded into
/// per-conv affine parameters, loaded frozen from an archive.
struct FrozenBackbone {
    taps: (usize, usize),
    conv1: FrozenConv,
    stages: Vec<Vec<Bottleneck>>,
    reduce: FrozenConv,
    param_ids: Vec<ParamId>,
}

struct FrozenConv {
    weight: ParamId,
    bias: ParamId,
    k: usize,
    stride: usize,
    pad: usize,
}

struct Bottleneck {
    conv_a: FrozenConv,
    conv_b: FrozenConv,
    conv_c: FrozenConv,
    downsample: Option<FrozenConv>,
}

impl FrozenBackbone {
    fn stage_blocks(variant: ExtractorVariant) -> [usize; 3] {
        match variant {
            ExtractorVariant::PretrainedResnet50 => [3, 4, 6],
            ExtractorVariant::PretrainedResnet101 => [3, 4, 23],
            ExtractorVariant::ToyCnn => unreachable!(),
        }
    }

    fn load(ps: &mut ParamStore, cfg: &ExtractorConfig) -> Result<Self> {
        let path = cfg.weight_file.as_ref().expect("validated");
        let (meta, buffers) = archive::read_archive(path)?;
        if meta.get("kind").and_then(|v| v.as_str()) != Some("backbone") {
            return Err(Error::Checkpoint(
                "weight archive is not a backbone file".into(),
            ));
        }
        let width = meta
            .get("width")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint("backbone manifest missing width".into()))?
            as usize;

        let mut lookup: std::collections::HashMap<String, ArrayD<f64>> =
            buffers.into_iter().collect();
        let mut param_ids = Vec::new();

        fn take(
            lookup: &mut std::collections::HashMap<String, ArrayD<f64>>,
            ps: &mut ParamStore,
            param_ids: &mut Vec<ParamId>,
            name: String,
            shape: Vec<usize>,
        ) -> Result<ParamId> {
            let arr = lookup
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing buffer {name}")))?;
            if arr.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "buffer {name} has shape {:?}, expected {shape:?}",
                    arr.shape()
                )));
            }
            let id = ps.register(format!("backbone.{name}"), arr, true);
            param_ids.push(id);
            Ok(id)
        }

        fn conv(
            lookup: &mut std::collections::HashMap<String, ArrayD<f64>>,
            ps: &mut ParamStore,
            param_ids: &mut Vec<ParamId>,
            name: &str,
            cin: usize,
            cout: usize,
            k: usize,
            stride: usize,
        ) -> Result<FrozenConv> {
            Ok(FrozenConv {
                weight: take(
                    lookup,
                    ps,
                    param_ids,
                    format!("{name}.weight"),
                    vec![k, k, cin, cout],
                )?,
                bias: take(lookup, ps, param_ids, format!("{name}.bias"), vec![cout])?,
                k,
                stride,
                pad: k / 2,
            })
        }

        let conv1 = conv(&mut lookup, ps, &mut param_ids, "conv1", 3, width, 7, 2)?;
        let blocks = Self::stage_blocks(cfg.variant);
        let mut stages = Vec::new();
        let mut cin = width;
        for (s, &n_blocks) in blocks.iter().enumerate() {
            let stage_no = s + 1;
            let mid = width << s;
            let cout = mid * 4;
            let mut stage = Vec::new();
            for b in 0..n_blocks {
                let stride = if stage_no > 1 && b == 0 { 2 } else { 1 };
                let prefix = format!("stage{stage_no}.block{b}");
                let conv_a = conv(&mut lookup, ps, &mut param_ids, &format!("{prefix}.a"), cin, mid, 1, 1)?;
                let conv_b =
                    conv(&mut lookup, ps, &mut param_ids, &format!("{prefix}.b"), mid, mid, 3, stride)?;
                let conv_c = conv(&mut lookup, ps, &mut param_ids, &format!("{prefix}.c"), mid, cout, 1, 1)?;
                let downsample = if cin != cout || stride != 1 {
                    Some(conv(
                        &mut lookup,
                        ps,
                        &mut param_ids,
                        &format!("{prefix}.down"),
                        cin,
                        cout,
                        1,
                        stride,
                    )?)
                } else {
                    None
                };
                stage.push(Bottleneck {
                    conv_a,
                    conv_b,
                    conv_c,
                    downsample,
                });
                cin = cout;
            }
            stages.push(stage);
        }
        let (ta, tb) = cfg.taps;
        let tap_channels = |stage: usize| -> usize { (width << (stage - 1)) * 4 };
        let reduce_in = tap_channels(ta) + tap_channels(tb);
        let reduce = conv(
            &mut lookup,
            ps,
            &mut param_ids,
            "reduce",
            reduce_in,
            cfg.out_channels,
            1,
            1,
        )?;
        if !lookup.is_empty() {
            let extra: Vec<_> = lookup.keys().take(3).cloned().collect();
            return Err(Error::Checkpoint(format!(
                "weight archive has unused buffers, e.g. {extra:?}"
            )));
        }
        Ok(Self {
            taps: cfg.taps,
            conv1,
            stages,
            reduce,
            param_ids,
        })
    }

    fn run_conv(&self, ps: &ParamStore, c: &FrozenConv, x: &Array3<f64>) -> Array3<f64> {
        let w = ps.value(c.weight);
        let shape = w.shape();
        let (kh, kw, cin, cout) = (shape[0], shape[1], shape[2], shape[3]);
        let w2 = w
            .clone()
            .into_shape_with_order((kh * kw * cin, cout))
            .expect("frozen conv weight reshape");
        let b = ps
            .value(c.bias)
            .clone()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("frozen conv bias rank");
        kernels::conv2d_forward(&x.view(), &w2.view(), &b, c.k, c.k, c.stride, c.pad).0
    }

    fn forward(&self, ps: &ParamStore, image: &Array3<f64>) -> Array3<f64> {
        let relu = |mut x: Array3<f64>| {
            x.mapv_inplace(|v| v.max(0.0));
            x
        };
        let mut x = relu(self.run_conv(ps, &self.conv1, image));
        x = kernels::maxpool2d(&x.view(), 3, 2, 1);
        let mut tap_outputs: Vec<Array3<f64>> = Vec::new();
        for stage in &self.stages {
            for block in stage {
                let identity = match &block.downsample {
                    Some(d) => self.run_conv(ps, d, &x),
                    None => x.clone(),
                };
                let mut out = relu(self.run_conv(ps, &block.conv_a, &x));
                out = relu(self.run_conv(ps, &block.conv_b, &out));
                out = self.run_conv(ps, &block.conv_c, &out);
                out += &identity;
                x = relu(out);
            }
            tap_outputs.push(x.clone());
        }
        let (ta, tb) = self.taps;
        let shallow = &tap_outputs[ta.min(tb) - 1];
        let deep = &tap_outputs[ta.max(tb) - 1];
        let (h, w, _) = shallow.dim();
        let deep_up = kernels::upsample_bilinear3(&deep.view(), h, w);
        let mut concat = Array3::zeros((h, w, shallow.dim().2 + deep_up.dim().2));
        concat
            .slice_mut(ndarray::s![.., .., ..shallow.dim().2])
            .assign(shallow);
        concat
            .slice_mut(ndarray::s![.., .., shallow.dim().2..])
            .assign(&deep_up);
        self.run_conv(ps, &self.reduce, &concat)
    }
}

/// Write a backbone weight archive with random weights at a given base width.
/// Real deployments convert actual pretrained weights into this layout; tests
/// and demos use small random ones.
pub fn write_random_backbone(
    path: &std::path::Path,
    variant: ExtractorVariant,
    width: usize,
    out_channels: usize,
    taps: (usize, usize),
    rng: &mut impl Rng,
) -> Result<()> {
    use crate::nn::kaiming_normal;
    let mut buffers: Vec<(String, ArrayD<f64>)> = Vec::new();
    fn push_conv(
        buffers: &mut Vec<(String, ArrayD<f64>)>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut impl Rng,
    ) {
        buffers.push((
            format!("{name}.weight"),
            kaiming_normal(rng, &[k, k, cin, cout], k * k * cin),
        ));
        buffers.push((format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout]))));
    }
    push_conv(&mut buffers, "conv1", 3, width, 7, rng);
    let blocks = FrozenBackbone::stage_blocks(variant);
    let mut cin = width;
    for (s, &n_blocks) in blocks.iter().enumerate() {
        let stage_no = s + 1;
        let mid = width << s;
        let cout = mid * 4;
        for b in 0..n_blocks {
            let stride = if stage_no > 1 && b == 0 { 2 } else { 1 };
            let prefix = format!("stage{stage_no}.block{b}");
            push_conv(&mut buffers, &format!("{prefix}.a"), cin, mid, 1, rng);
            push_conv(&mut buffers, &format!("{prefix}.b"), mid, mid, 3, rng);
            push_conv(&mut buffers, &format!("{prefix}.c"), mid, cout, 1, rng);
            if cin != cout || stride != 1 {
                push_conv(&mut buffers, &format!("{prefix}.down"), cin, cout, 1, rng);
            }
            cin = cout;
        }
    }
    let tap_channels = |stage: usize| -> usize { (width << (stage - 1)) * 4 };
    let reduce_in = tap_channels(taps.0) + tap_channels(taps.1);
    push_conv(&mut buffers, "reduce", reduce_in, out_channels, 1, rng);
    let refs: Vec<(String, &ArrayD<f64>)> =
        buffers.iter().map(|(n, a)| (n.clone(), a)).collect();
    archive::write_archive(
        path,
        serde_json::json!({"kind": "backbone", "width": width}),
        &refs,
    )
}
