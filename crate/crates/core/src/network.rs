//! GMBINet: the five-stage GMBI backbone, the U-shaped decoder with
//! deep-supervision heads, and the classification variant.
//!
//! Everything is expressed as one [`LayerGraph`]. Encoder features are
//! exposed as taps `E1..E5`, decoder features as `D1..D5`; the segmentation
//! graph's outputs are `final` followed by `side1..side5`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::gmbi::{gmbi_block, ExtractionMode, GmbiConfig};
use crate::graph::{LayerGraph, Model, NodeId};
use crate::ops;
use crate::tensor::{ConvSpec, Real, Shape, Tensor};

/// How upsampled decoder features meet the encoder feature of the same stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Skip {
    /// `D_i = E_i + DSConv(up(D_{i+1}))`.
    Sum,
    /// `D_i = DSConv(cat(up(D_{i+1}), E_i))`.
    Concat,
    /// `D_i = DSConv(up(D_{i+1}))`.
    None,
}

impl Skip {
    pub fn name(&self) -> &'static str {
        match self {
            Skip::Sum => "sum",
            Skip::Concat => "concat",
            Skip::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Skip::Sum, Skip::Concat, Skip::None].into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    /// Plain 3x3 stride-2 convolution.
    Conv,
    /// Stride-2 DSConv channel expansion followed by a stack of GMBI blocks.
    Gmbi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    /// 1-based.
    pub index: usize,
    pub kind: StageKind,
    pub repeats: usize,
    pub channels: usize,
    /// Output resolution is input / divisor.
    pub divisor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub in_channels: usize,
    /// Output channels of every stage; the first is the plain stem.
    pub widths: Vec<usize>,
    /// GMBI blocks per stage after the stem (`widths.len() - 1` entries).
    pub repeats: Vec<usize>,
    pub width_multiplier: f64,
    /// Template for every block; `channels` is set per stage.
    pub block: GmbiConfig,
    pub skip: Skip,
    /// Resolution `predict` resizes to.
    pub input_hw: (usize, usize),
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 3,
            widths: vec![16, 32, 64, 96, 128],
            repeats: vec![3, 4, 6, 3],
            width_multiplier: 1.0,
            block: GmbiConfig::new(16),
            skip: Skip::Sum,
            input_hw: (512, 512),
        }
    }
}

impl NetConfig {
    /// Two-stage network small enough for finite-difference checks.
    pub fn toy() -> Self {
        NetConfig {
            widths: vec![8, 16],
            repeats: vec![1],
            block: GmbiConfig::new(16).scale_dim(2),
            input_hw: (32, 32),
            ..Self::default()
        }
    }

    pub fn scale_dim(mut self, n: usize) -> Self {
        self.block.scale_dim = n;
        self
    }

    pub fn block(mut self, block: GmbiConfig) -> Self {
        self.block = block;
        self
    }

    pub fn skip(mut self, skip: Skip) -> Self {
        self.skip = skip;
        self
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    /// Input sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.stages()
    }

    /// Per-stage layout after applying the width multiplier. GMBI stage widths
    /// are rounded to the nearest multiple of the scale dimension (group mode)
    /// so the channel split stays exact.
    pub fn stage_configs(&self) -> Result<Vec<StageConfig>> {
        if !(self.width_multiplier > 0.0) {
            return Err(Error::invalid("network", "width multiplier must be positive"));
        }
        if self.widths.is_empty() || self.repeats.len() + 1 != self.widths.len() {
            return Err(Error::invalid(
                "network",
                format!("{} widths need {} repeat counts, got {}", self.widths.len(), self.widths.len().saturating_sub(1), self.repeats.len()),
            ));
        }
        let n = self.block.scale_dim.max(1);
        let round = |c: usize, unit: usize| -> usize {
            let scaled = c as f64 * self.width_multiplier;
            let k = ((scaled / unit as f64) + 0.5) as usize;
            k.max(1) * unit
        };
        let mut out = Vec::with_capacity(self.widths.len());
        for (i, &w) in self.widths.iter().enumerate() {
            let (kind, repeats, channels) = if i == 0 {
                (StageKind::Conv, 0, round(w, 1))
            } else {
                let unit = if self.block.mode == ExtractionMode::Group { n } else { 1 };
                let c = if self.width_multiplier == 1.0 { w } else { round(w, unit) };
                (StageKind::Gmbi, self.repeats[i - 1], c)
            };
            out.push(StageConfig { index: i + 1, kind, repeats, channels, divisor: 1 << (i + 1) });
        }
        Ok(out)
    }
}

/// Depthwise 3x3 (optionally strided) then pointwise, each followed by BN + ReLU.
pub fn dsconv(g: &mut LayerGraph, name: &str, x: NodeId, out: usize, stride: usize) -> Result<NodeId> {
    let c = g.channels(x);
    let dw = g.conv(format!("{name}.dw"), x, ConvSpec::depthwise(c, 3, 1).stride(stride))?;
    let bn = g.batch_norm(format!("{name}.dw.bn"), dw);
    let r = g.relu(format!("{name}.dw.relu"), bn);
    let pw = g.conv(format!("{name}.pw"), r, ConvSpec::pointwise(c, out))?;
    let bn = g.batch_norm(format!("{name}.pw.bn"), pw);
    Ok(g.relu(format!("{name}.pw.relu"), bn))
}

/// Appends the backbone and returns `E1..E_S`, which are also marked as taps.
pub fn append_backbone(g: &mut LayerGraph, cfg: &NetConfig) -> Result<Vec<NodeId>> {
    let stages = cfg.stage_configs()?;
    let mut x = g.input(cfg.in_channels)?;
    let mut feats = Vec::with_capacity(stages.len());
    for st in &stages {
        let e = match st.kind {
            StageKind::Conv => {
                let spec = ConvSpec::new(g.channels(x), st.channels, 3).stride(2).padding(1);
                let c = g.conv("stem.conv", x, spec)?;
                let b = g.batch_norm("stem.bn", c);
                g.relu("stem.relu", b)
            }
            StageKind::Gmbi => {
                let s = st.index;
                let mut y = dsconv(g, &format!("e{s}.down"), x, st.channels, 2)?;
                let block = cfg.block.with_channels(st.channels);
                for j in 1..=st.repeats {
                    y = gmbi_block(g, &format!("e{s}.b{j}"), y, &block)?;
                }
                y
            }
        };
        g.mark_tap(format!("E{}", st.index), e);
        feats.push(e);
        x = e;
    }
    Ok(feats)
}

/// Backbone alone; its outputs are the encoder features.
pub fn build_backbone(cfg: &NetConfig) -> Result<LayerGraph> {
    let mut g = LayerGraph::new();
    let feats = append_backbone(&mut g, cfg)?;
    for (i, &e) in feats.iter().enumerate() {
        g.mark_output(format!("E{}", i + 1), e);
    }
    g.set_declared_input_hw(cfg.input_hw.0, cfg.input_hw.1);
    Ok(g)
}

/// Full encoder-decoder with one sigmoid head per decoder stage.
pub fn build_gmbinet(cfg: &NetConfig) -> Result<LayerGraph> {
    let mut g = LayerGraph::new();
    let feats = append_backbone(&mut g, cfg)?;
    let s = feats.len();
    let mut decoded = vec![0; s];
    let top = g.channels(feats[s - 1]);
    decoded[s - 1] = dsconv(&mut g, &format!("d{s}"), feats[s - 1], top, 1)?;
    for i in (0..s - 1).rev() {
        let stage = i + 1;
        let e = feats[i];
        let c = g.channels(e);
        let up = g.upsample(format!("d{stage}.up"), decoded[i + 1], 2)?;
        decoded[i] = match cfg.skip {
            Skip::Sum => {
                let adj = dsconv(&mut g, &format!("d{stage}"), up, c, 1)?;
                g.add(format!("d{stage}.skip"), adj, e)?
            }
            Skip::Concat => {
                let cat = g.concat(format!("d{stage}.cat"), &[up, e])?;
                dsconv(&mut g, &format!("d{stage}"), cat, c, 1)?
            }
            Skip::None => dsconv(&mut g, &format!("d{stage}"), up, c, 1)?,
        };
    }
    let mut sides = Vec::with_capacity(s);
    for (i, &d) in decoded.iter().enumerate() {
        let stage = i + 1;
        g.mark_tap(format!("D{stage}"), d);
        let logit = g.conv(format!("side{stage}"), d, ConvSpec::pointwise(g.channels(d), 1))?;
        sides.push(g.sigmoid(format!("side{stage}.sig"), logit));
    }
    let fin = g.upsample("final", sides[0], 2)?;
    g.mark_output("final", fin);
    for (i, &sd) in sides.iter().enumerate() {
        g.mark_output(format!("side{}", i + 1), sd);
    }
    g.set_declared_input_hw(cfg.input_hw.0, cfg.input_hw.1);
    Ok(g)
}

/// Backbone, global average pooling and a linear head (1x1 conv with bias).
pub fn build_classifier(cfg: &NetConfig, num_classes: usize) -> Result<LayerGraph> {
    if num_classes < 2 {
        return Err(Error::invalid("build_classifier", format!("need at least 2 classes, got {num_classes}")));
    }
    let mut g = LayerGraph::new();
    let feats = append_backbone(&mut g, cfg)?;
    let last = *feats.last().expect("at least one stage");
    let pooled = g.global_avg_pool("gap", last);
    let fc = g.conv("fc", pooled, ConvSpec::pointwise(g.channels(last), num_classes).bias(true))?;
    g.mark_output("logits", fc);
    g.set_declared_input_hw(cfg.input_hw.0, cfg.input_hw.1);
    Ok(g)
}

/// Final map plus one side map per decoder stage (side `i` at `H/2^i`).
#[derive(Debug, Clone, PartialEq)]
pub struct DeepSupervisionOutputs<T: Real = f32> {
    pub final_map: Tensor<T>,
    pub sides: Vec<Tensor<T>>,
}

impl<T: Real> DeepSupervisionOutputs<T> {
    pub fn maps(&self) -> impl Iterator<Item = &Tensor<T>> {
        core::iter::once(&self.final_map).chain(self.sides.iter())
    }
}

fn tap_ids(g: &LayerGraph, prefix: char) -> Vec<NodeId> {
    g.taps().iter().filter(|(n, _)| n.starts_with(prefix)).map(|&(_, id)| id).collect()
}

/// Rejects inputs whose sides are not multiples of `multiple`.
pub fn check_input_size(h: usize, w: usize, multiple: usize) -> Result<()> {
    if h == 0 || w == 0 || h % multiple != 0 || w % multiple != 0 {
        let up = |v: usize| v.div_ceil(multiple).max(1) * multiple;
        return Err(Error::InputSize { h, w, multiple, need_h: up(h), need_w: up(w) });
    }
    Ok(())
}

fn size_multiple(g: &LayerGraph) -> usize {
    1 << tap_ids(g, 'E').len()
}

/// Encoder features `E1..E_S` (inference mode).
pub fn encode<T: Real>(model: &Model<T>, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let s = image.shape();
    check_input_size(s.h, s.w, size_multiple(&model.graph))?;
    let inp = model.graph.input_node()?;
    model.infer_from(&[(inp, image)], &tap_ids(&model.graph, 'E'))
}

/// Decoder run from given encoder features.
pub fn decode<T: Real>(model: &Model<T>, feats: &[Tensor<T>]) -> Result<DeepSupervisionOutputs<T>> {
    let taps = tap_ids(&model.graph, 'E');
    if feats.len() != taps.len() {
        return Err(Error::ShapeMismatch { op: "decode", dim: "encoder features", expected: taps.len(), got: feats.len() });
    }
    let feeds: Vec<(NodeId, &Tensor<T>)> = taps.iter().copied().zip(feats.iter()).collect();
    let wanted: Vec<NodeId> = model.graph.outputs().iter().map(|o| o.1).collect();
    let mut maps = model.infer_from(&feeds, &wanted)?;
    let final_map = maps.remove(0);
    Ok(DeepSupervisionOutputs { final_map, sides: maps })
}

/// Encode + decode at the given (size-compatible) resolution.
pub fn forward_maps<T: Real>(model: &Model<T>, image: &Tensor<T>) -> Result<DeepSupervisionOutputs<T>> {
    let s = image.shape();
    check_input_size(s.h, s.w, size_multiple(&model.graph))?;
    let mut maps = model.infer(image)?.into_iter().map(|(_, t)| t).collect::<Vec<_>>();
    let final_map = maps.remove(0);
    Ok(DeepSupervisionOutputs { final_map, sides: maps })
}

/// Saliency map at the image's own resolution: resize to the network's
/// declared input size, run, resize the final map back.
pub fn predict<T: Real>(model: &Model<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.numel() == 0 {
        return Err(Error::invalid("predict", "empty image"));
    }
    let (h, w) = model.graph.declared_input_hw();
    let out = if (s.h, s.w) == (h, w) {
        forward_maps(model, image)?.final_map
    } else {
        let resized = ops::resize_bilinear(image, h, w)?;
        forward_maps(model, &resized)?.final_map
    };
    if (s.h, s.w) == (h, w) {
        Ok(out)
    } else {
        ops::resize_bilinear(&out, s.h, s.w)
    }
}

/// Class logits as rows of `(batch, classes)`.
pub fn classify<T: Real>(model: &Model<T>, image: &Tensor<T>) -> Result<Vec<Vec<T>>> {
    let s = image.shape();
    check_input_size(s.h, s.w, size_multiple(&model.graph))?;
    let logits = model.infer(image)?.remove(0).1;
    let k = logits.shape().c;
    Ok(logits.data().chunks(k).map(|r| r.to_vec()).collect())
}

/// Names of the encoder/decoder features and their shapes for an input.
pub fn feature_shapes(g: &LayerGraph, input: Shape) -> Result<Vec<(String, Shape)>> {
    let shapes = g.infer_shapes(input)?;
    Ok(g.taps().iter().map(|(n, id)| (n.clone(), shapes[*id])).collect())
}
