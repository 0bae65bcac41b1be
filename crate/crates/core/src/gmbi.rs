//! Group Multiscale Bidirectional Interactive (GMBI) block.
//!
//! The input is split into `n` channel groups. Group `i` is filtered by a
//! depthwise convolution with dilation `i`; before that, it is modulated by
//! the previous group's output (forward guidance). After extraction, each
//! scale is refined by the next larger scale (backward enhancement). The
//! refined groups are concatenated, fused by one pointwise convolution and
//! added back to the input.
//!
//! Every ablation is a [`GmbiConfig`] setting: interaction kind, which
//! interaction directions are active, and group / branch / single-scale
//! extraction.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{LayerGraph, Model, NodeId};
use crate::ops;
use crate::tensor::{ConvSpec, Real, Shape, Tensor};

/// Cross-scale interaction `f(guide, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Interaction {
    /// `sigmoid(guide) * x + x`; parameter-free.
    Ewms,
    Sum,
    Mul,
    /// Pointwise projection of `cat(guide, x)` back to `x`'s width.
    Concat,
    None,
}

impl Interaction {
    pub const ALL: [Interaction; 5] =
        [Interaction::Ewms, Interaction::Sum, Interaction::Mul, Interaction::Concat, Interaction::None];

    pub fn name(&self) -> &'static str {
        match self {
            Interaction::Ewms => "ewms",
            Interaction::Sum => "sum",
            Interaction::Mul => "mul",
            Interaction::Concat => "concat",
            Interaction::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|i| i.name() == s)
    }
}

/// How the scales see the input channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExtractionMode {
    /// Each scale gets `c/n` channels.
    Group,
    /// Each scale filters all `c` channels; scale outputs are summed before fusion.
    Branch,
    /// One depthwise pass at dilation 1.
    Single,
}

impl ExtractionMode {
    pub fn name(&self) -> &'static str {
        match self {
            ExtractionMode::Group => "group",
            ExtractionMode::Branch => "branch",
            ExtractionMode::Single => "single",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [ExtractionMode::Group, ExtractionMode::Branch, ExtractionMode::Single].into_iter().find(|m| m.name() == s)
    }
}

/// Index pairing used by backward enhancement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnhanceOrder {
    /// `en[n] = y[n]`, `en[i] = f(en[i+1], y[i])` for `i = n-1 .. 1`.
    TopDown,
    /// `en[1] = y[1]`, `en[i] = f(y[i], y[i-1])` for `i > 1`, as the recurrence is printed.
    Literal,
}

/// Whether top-down refinement reads already-refined neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnhanceSource {
    Enhanced,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GmbiConfig {
    pub channels: usize,
    pub scale_dim: usize,
    pub kernel: usize,
    pub interaction: Interaction,
    pub forward_guidance: bool,
    pub backward_enhancement: bool,
    pub mode: ExtractionMode,
    /// Batch norm + ReLU after every depthwise unit and after the fusion conv.
    pub norm: bool,
    pub enhance_order: EnhanceOrder,
    pub enhance_source: EnhanceSource,
}

impl GmbiConfig {
    pub fn new(channels: usize) -> Self {
        GmbiConfig {
            channels,
            scale_dim: 4,
            kernel: 3,
            interaction: Interaction::Ewms,
            forward_guidance: true,
            backward_enhancement: true,
            mode: ExtractionMode::Group,
            norm: true,
            enhance_order: EnhanceOrder::TopDown,
            enhance_source: EnhanceSource::Enhanced,
        }
    }

    pub fn scale_dim(mut self, n: usize) -> Self {
        self.scale_dim = n;
        self
    }

    pub fn kernel(mut self, k: usize) -> Self {
        self.kernel = k;
        self
    }

    pub fn interaction(mut self, i: Interaction) -> Self {
        self.interaction = i;
        self
    }

    pub fn directions(mut self, forward: bool, backward: bool) -> Self {
        self.forward_guidance = forward;
        self.backward_enhancement = backward;
        self
    }

    pub fn mode(mut self, m: ExtractionMode) -> Self {
        self.mode = m;
        self
    }

    pub fn norm(mut self, on: bool) -> Self {
        self.norm = on;
        self
    }

    pub fn with_channels(mut self, c: usize) -> Self {
        self.channels = c;
        self
    }

    /// Number of scales actually built.
    pub fn scales(&self) -> usize {
        match self.mode {
            ExtractionMode::Single => 1,
            _ => self.scale_dim,
        }
    }

    /// Channels each scale's depthwise unit sees.
    pub fn scale_channels(&self) -> usize {
        match self.mode {
            ExtractionMode::Group => self.channels / self.scale_dim,
            _ => self.channels,
        }
    }

    fn forward_active(&self) -> bool {
        self.forward_guidance && self.interaction != Interaction::None
    }

    fn backward_active(&self) -> bool {
        self.backward_enhancement && self.interaction != Interaction::None
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.scale_dim == 0 {
            return Err(Error::invalid("gmbi", "channels and scale dimension must be positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid("gmbi", format!("kernel {} must be odd", self.kernel)));
        }
        if self.mode == ExtractionMode::Group && self.channels % self.scale_dim != 0 {
            return Err(Error::Indivisible { op: "gmbi", what: "channels", count: self.channels, parts: self.scale_dim });
        }
        Ok(())
    }
}

/// `sigmoid(guide) * x + x` on plain tensors.
pub fn ewms<T: Real>(guide: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    ops::same_shape("ewms", guide.shape(), x.shape())?;
    let data = guide.data().iter().zip(x.data()).map(|(&g, &v)| ops::sigmoid(g) * v + v).collect();
    Tensor::from_vec(x.shape(), data)
}

/// Appends the interaction `f(guide, x)` to the graph.
pub fn interact(g: &mut LayerGraph, name: &str, guide: NodeId, x: NodeId, kind: Interaction) -> Result<NodeId> {
    match kind {
        Interaction::Ewms => {
            let s = g.sigmoid(format!("{name}.sig"), guide);
            let m = g.mul(format!("{name}.mul"), s, x)?;
            g.add(format!("{name}.add"), m, x)
        }
        Interaction::Sum => g.add(format!("{name}.add"), guide, x),
        Interaction::Mul => g.mul(format!("{name}.mul"), guide, x),
        Interaction::Concat => {
            let c = g.channels(x);
            let cat = g.concat(format!("{name}.cat"), &[guide, x])?;
            g.conv(format!("{name}.cat.pw"), cat, ConvSpec::pointwise(g.channels(cat), c))
        }
        Interaction::None => Ok(x),
    }
}

/// Dilated depthwise unit for scale `i` (1-based), optionally normalized.
fn depthwise_unit(g: &mut LayerGraph, name: &str, x: NodeId, cfg: &GmbiConfig, i: usize) -> Result<NodeId> {
    let c = g.channels(x);
    let conv = g.conv(format!("{name}.dw{i}"), x, ConvSpec::depthwise(c, cfg.kernel, i))?;
    if !cfg.norm {
        return Ok(conv);
    }
    let bn = g.batch_norm(format!("{name}.dw{i}.bn"), conv);
    Ok(g.relu(format!("{name}.dw{i}.relu"), bn))
}

/// `y_1 = dw_1(x_1)`, `y_i = dw_i(f(y_{i-1}, x_i))`.
pub fn forward_guidance(g: &mut LayerGraph, name: &str, subsets: &[NodeId], cfg: &GmbiConfig) -> Result<Vec<NodeId>> {
    if subsets.len() != cfg.scales() {
        return Err(Error::ShapeMismatch { op: "forward_guidance", dim: "subset count", expected: cfg.scales(), got: subsets.len() });
    }
    let mut ys: Vec<NodeId> = Vec::with_capacity(subsets.len());
    for (k, &x) in subsets.iter().enumerate() {
        let i = k + 1;
        let src = match ys.last() {
            Some(&prev) if cfg.forward_active() => interact(g, &format!("{name}.fg{i}"), prev, x, cfg.interaction)?,
            _ => x,
        };
        ys.push(depthwise_unit(g, name, src, cfg, i)?);
    }
    Ok(ys)
}

/// Refines each scale with its larger neighbour.
pub fn backward_enhancement(g: &mut LayerGraph, name: &str, ys: &[NodeId], cfg: &GmbiConfig) -> Result<Vec<NodeId>> {
    if ys.len() != cfg.scales() {
        return Err(Error::ShapeMismatch { op: "backward_enhancement", dim: "scale count", expected: cfg.scales(), got: ys.len() });
    }
    let n = ys.len();
    if !cfg.backward_active() || n == 1 {
        return Ok(ys.to_vec());
    }
    let mut en = ys.to_vec();
    match cfg.enhance_order {
        EnhanceOrder::TopDown => {
            for i in (0..n - 1).rev() {
                let guide = match cfg.enhance_source {
                    EnhanceSource::Enhanced => en[i + 1],
                    EnhanceSource::Raw => ys[i + 1],
                };
                en[i] = interact(g, &format!("{name}.be{}", i + 1), guide, ys[i], cfg.interaction)?;
            }
        }
        EnhanceOrder::Literal => {
            for i in 1..n {
                en[i] = interact(g, &format!("{name}.be{}", i + 1), ys[i], ys[i - 1], cfg.interaction)?;
            }
        }
    }
    Ok(en)
}

/// Appends a full block: split, guided extraction, enhancement, fusion and residual.
pub fn gmbi_block(g: &mut LayerGraph, name: &str, input: NodeId, cfg: &GmbiConfig) -> Result<NodeId> {
    cfg.validate()?;
    if g.channels(input) != cfg.channels {
        return Err(Error::graph(
            name,
            format!("block configured for {} channels, input has {}", cfg.channels, g.channels(input)),
        ));
    }
    let n = cfg.scales();
    let subsets = match cfg.mode {
        ExtractionMode::Group => g.split(name, input, n)?,
        ExtractionMode::Branch => alloc::vec![input; n],
        ExtractionMode::Single => alloc::vec![input],
    };
    let ys = forward_guidance(g, name, &subsets, cfg)?;
    let en = backward_enhancement(g, name, &ys, cfg)?;
    let merged = match cfg.mode {
        ExtractionMode::Group if n > 1 => g.concat(format!("{name}.cat"), &en)?,
        ExtractionMode::Branch if n > 1 => {
            let mut acc = en[0];
            for (k, &e) in en.iter().enumerate().skip(1) {
                acc = g.add(format!("{name}.sum{}", k + 1), acc, e)?;
            }
            acc
        }
        _ => en[0],
    };
    let mut fused = g.conv(format!("{name}.pw"), merged, ConvSpec::pointwise(cfg.channels, cfg.channels))?;
    if cfg.norm {
        let bn = g.batch_norm(format!("{name}.pw.bn"), fused);
        fused = g.relu(format!("{name}.pw.relu"), bn);
    }
    g.add(format!("{name}.out"), input, fused)
}

/// Standalone graph holding one block named `gmbi`, with output `out`.
pub fn block_graph(cfg: &GmbiConfig) -> Result<LayerGraph> {
    let mut g = LayerGraph::new();
    let x = g.input(cfg.channels)?;
    let y = gmbi_block(&mut g, "gmbi", x, cfg)?;
    g.mark_output("out", y);
    Ok(g)
}

/// Convolution kernels of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct GmbiWeights<T: Real = f32> {
    /// Scale `i` kernel, `(c_s, 1, k, k)`, applied at dilation `i+1`.
    pub depthwise: Vec<Tensor<T>>,
    /// Fusion kernel, `(c, c, 1, 1)`.
    pub fusion: Tensor<T>,
    /// Projection kernels of concat interactions, in graph order.
    pub interaction: Vec<Tensor<T>>,
}

fn interaction_param_names(g: &LayerGraph, name: &str) -> Vec<String> {
    let prefix = format!("{name}.");
    g.param_specs()
        .into_iter()
        .filter(|p| p.name.starts_with(&prefix) && p.name.ends_with(".cat.pw.weight"))
        .map(|p| p.name)
        .collect()
}

impl<T: Real> GmbiWeights<T> {
    /// Kernels of block `name` inside `model`.
    pub fn from_model(model: &Model<T>, name: &str, cfg: &GmbiConfig) -> Result<Self> {
        let depthwise = (1..=cfg.scales())
            .map(|i| model.params.get(&format!("{name}.dw{i}.weight")).cloned())
            .collect::<Result<Vec<_>>>()?;
        let fusion = model.params.get(&format!("{name}.pw.weight"))?.clone();
        let interaction = interaction_param_names(&model.graph, name)
            .iter()
            .map(|n| model.params.get(n).cloned())
            .collect::<Result<Vec<_>>>()?;
        Ok(GmbiWeights { depthwise, fusion, interaction })
    }

    /// Writes these kernels into block `name` of `model`.
    pub fn apply(&self, model: &mut Model<T>, name: &str) -> Result<()> {
        for (i, w) in self.depthwise.iter().enumerate() {
            set_checked(model, &format!("{name}.dw{}.weight", i + 1), w)?;
        }
        set_checked(model, &format!("{name}.pw.weight"), &self.fusion)?;
        let names = interaction_param_names(&model.graph, name);
        if names.len() != self.interaction.len() {
            return Err(Error::ShapeMismatch {
                op: "gmbi weights",
                dim: "interaction kernels",
                expected: names.len(),
                got: self.interaction.len(),
            });
        }
        for (n, w) in names.iter().zip(&self.interaction) {
            set_checked(model, n, w)?;
        }
        Ok(())
    }
}

fn set_checked<T: Real>(model: &mut Model<T>, name: &str, w: &Tensor<T>) -> Result<()> {
    let slot = model.params.get_mut(name)?;
    if slot.shape() != w.shape() {
        return Err(Error::graph(name, format!("kernel shape {} expected, got {}", slot.shape(), w.shape())));
    }
    *slot = w.clone();
    Ok(())
}

/// Runs one block in inference mode (running statistics at their initial
/// values, unit scale and zero shift) with the given kernels.
pub fn gmbi_forward<T: Real>(input: &Tensor<T>, weights: &GmbiWeights<T>, cfg: &GmbiConfig) -> Result<Tensor<T>> {
    if input.shape().c != cfg.channels {
        return Err(Error::ShapeMismatch { op: "gmbi_forward", dim: "channels", expected: cfg.channels, got: input.shape().c });
    }
    let mut model = Model::init(block_graph(cfg)?, 0);
    weights.apply(&mut model, "gmbi")?;
    let mut out = model.infer(input)?;
    Ok(out.remove(0).1)
}

/// Shape every scale subset must have for an input of `input` shape.
pub fn subset_shape(input: Shape, cfg: &GmbiConfig) -> Shape {
    input.with_c(cfg.scale_channels())
}
