//! Layer graphs: the single description from which execution, shape
//! inference, parameter allocation, cost counting and checkpoint
//! fingerprints are all derived.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{self, Activation, BatchStats, Elementwise};
use crate::tape::{Tape, Var};
use crate::tensor::{ConvSpec, Real, Shape, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Layer {
    Input { channels: usize },
    Conv(ConvSpec),
    BatchNorm { channels: usize },
    Act(Activation),
    Binary(Elementwise),
    Slice { start: usize, len: usize },
    Concat,
    Shuffle { groups: usize },
    Upsample { scale: usize },
    GlobalAvgPool,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Input { .. } => "input",
            Layer::Conv(_) => "conv",
            Layer::BatchNorm { .. } => "batchnorm",
            Layer::Act(Activation::Relu) => "relu",
            Layer::Act(Activation::Sigmoid) => "sigmoid",
            Layer::Binary(Elementwise::Add) => "add",
            Layer::Binary(Elementwise::Mul) => "mul",
            Layer::Slice { .. } => "slice",
            Layer::Concat => "concat",
            Layer::Shuffle { .. } => "shuffle",
            Layer::Upsample { .. } => "upsample",
            Layer::GlobalAvgPool => "avgpool",
        }
    }

    /// Canonical one-line description, stable across platforms.
    pub fn describe(&self) -> String {
        match self {
            Layer::Input { channels } => format!("input c={channels}"),
            Layer::Conv(s) => format!(
                "conv {}>{} k={} s={} d={} p={} g={} b={}",
                s.in_channels, s.out_channels, s.kernel, s.stride, s.dilation, s.padding, s.groups, s.bias as u8
            ),
            Layer::BatchNorm { channels } => format!("batchnorm c={channels}"),
            Layer::Slice { start, len } => format!("slice {start}+{len}"),
            Layer::Shuffle { groups } => format!("shuffle g={groups}"),
            Layer::Upsample { scale } => format!("upsample x{scale}"),
            other => other.kind().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub layer: Layer,
    pub inputs: Vec<NodeId>,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution kernel; Kaiming-uniform with this fan-in.
    Weight { fan_in: usize },
    Bias,
    Gamma,
    Beta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub node: NodeId,
    pub shape: Shape,
    pub kind: ParamKind,
}

/// Topologically ordered layer graph with a single input.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGraph {
    nodes: Vec<Node>,
    input: Option<NodeId>,
    outputs: Vec<(String, NodeId)>,
    taps: Vec<(String, NodeId)>,
    input_hw: (usize, usize),
}

impl Default for LayerGraph {
    fn default() -> Self {
        Self::new()
    }
}

impl LayerGraph {
    pub fn new() -> Self {
        LayerGraph { nodes: Vec::new(), input: None, outputs: Vec::new(), taps: Vec::new(), input_hw: (512, 512) }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input_node(&self) -> Result<NodeId> {
        self.input.ok_or_else(|| Error::graph("<graph>", "no input node"))
    }

    pub fn input_channels(&self) -> usize {
        self.input.map(|i| self.nodes[i].channels).unwrap_or(0)
    }

    /// Spatial size the graph was designed for; used by cost reports and `predict`.
    pub fn declared_input_hw(&self) -> (usize, usize) {
        self.input_hw
    }

    pub fn set_declared_input_hw(&mut self, h: usize, w: usize) {
        self.input_hw = (h, w);
    }

    pub fn declared_input_shape(&self) -> Shape {
        Shape::new(1, self.input_channels(), self.input_hw.0, self.input_hw.1)
    }

    pub fn outputs(&self) -> &[(String, NodeId)] {
        &self.outputs
    }

    pub fn taps(&self) -> &[(String, NodeId)] {
        &self.taps
    }

    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.outputs.iter().find(|(n, _)| n == name).map(|&(_, id)| id)
    }

    /// Looks up a named output or tap.
    pub fn named(&self, name: &str) -> Option<NodeId> {
        self.output(name).or_else(|| self.taps.iter().find(|(n, _)| n == name).map(|&(_, id)| id))
    }

    pub fn mark_output(&mut self, name: impl Into<String>, id: NodeId) {
        self.outputs.push((name.into(), id));
    }

    pub fn mark_tap(&mut self, name: impl Into<String>, id: NodeId) {
        self.taps.push((name.into(), id));
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.nodes[id].channels
    }

    fn push(&mut self, name: String, layer: Layer, inputs: Vec<NodeId>, channels: usize) -> NodeId {
        self.nodes.push(Node { name, layer, inputs, channels });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, channels: usize) -> Result<NodeId> {
        if self.input.is_some() {
            return Err(Error::graph("input", "graph already has an input"));
        }
        let id = self.push("input".into(), Layer::Input { channels }, vec![], channels);
        self.input = Some(id);
        Ok(id)
    }

    pub fn conv(&mut self, name: impl Into<String>, x: NodeId, spec: ConvSpec) -> Result<NodeId> {
        let name = name.into();
        spec.validate().map_err(|e| Error::graph(name.clone(), e.to_string()))?;
        if self.channels(x) != spec.in_channels {
            return Err(Error::graph(
                name,
                format!("expects {} input channels, predecessor has {}", spec.in_channels, self.channels(x)),
            ));
        }
        Ok(self.push(name, Layer::Conv(spec), vec![x], spec.out_channels))
    }

    pub fn batch_norm(&mut self, name: impl Into<String>, x: NodeId) -> NodeId {
        let c = self.channels(x);
        self.push(name.into(), Layer::BatchNorm { channels: c }, vec![x], c)
    }

    pub fn act(&mut self, name: impl Into<String>, x: NodeId, kind: Activation) -> NodeId {
        let c = self.channels(x);
        self.push(name.into(), Layer::Act(kind), vec![x], c)
    }

    pub fn relu(&mut self, name: impl Into<String>, x: NodeId) -> NodeId {
        self.act(name, x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, name: impl Into<String>, x: NodeId) -> NodeId {
        self.act(name, x, Activation::Sigmoid)
    }

    pub fn binary(&mut self, name: impl Into<String>, a: NodeId, b: NodeId, kind: Elementwise) -> Result<NodeId> {
        let name = name.into();
        let (ca, cb) = (self.channels(a), self.channels(b));
        if ca != cb {
            return Err(Error::graph(name, format!("operand channels differ: {ca} vs {cb}")));
        }
        Ok(self.push(name, Layer::Binary(kind), vec![a, b], ca))
    }

    pub fn add(&mut self, name: impl Into<String>, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(name, a, b, Elementwise::Add)
    }

    pub fn mul(&mut self, name: impl Into<String>, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(name, a, b, Elementwise::Mul)
    }

    pub fn slice(&mut self, name: impl Into<String>, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let name = name.into();
        if len == 0 || start + len > self.channels(x) {
            return Err(Error::graph(name, format!("slice {start}+{len} exceeds {} channels", self.channels(x))));
        }
        Ok(self.push(name, Layer::Slice { start, len }, vec![x], len))
    }

    pub fn split(&mut self, name: &str, x: NodeId, parts: usize) -> Result<Vec<NodeId>> {
        let c = self.channels(x);
        if parts == 0 || c % parts != 0 {
            return Err(Error::Indivisible { op: "channel_split", what: "channels", count: c, parts });
        }
        if parts == 1 {
            return Ok(vec![x]);
        }
        let per = c / parts;
        (0..parts).map(|i| self.slice(format!("{name}.split{}", i + 1), x, i * per, per)).collect()
    }

    pub fn concat(&mut self, name: impl Into<String>, parts: &[NodeId]) -> Result<NodeId> {
        let name = name.into();
        if parts.is_empty() {
            return Err(Error::graph(name, "concat of nothing"));
        }
        let c = parts.iter().map(|&p| self.channels(p)).sum();
        Ok(self.push(name, Layer::Concat, parts.to_vec(), c))
    }

    pub fn shuffle(&mut self, name: impl Into<String>, x: NodeId, groups: usize) -> Result<NodeId> {
        let name = name.into();
        let c = self.channels(x);
        if groups == 0 || c % groups != 0 {
            return Err(Error::graph(name, format!("{c} channels not divisible into {groups} groups")));
        }
        Ok(self.push(name, Layer::Shuffle { groups }, vec![x], c))
    }

    pub fn upsample(&mut self, name: impl Into<String>, x: NodeId, scale: usize) -> Result<NodeId> {
        let name = name.into();
        if scale == 0 {
            return Err(Error::graph(name, "upsample scale must be at least 1"));
        }
        let c = self.channels(x);
        Ok(self.push(name, Layer::Upsample { scale }, vec![x], c))
    }

    pub fn global_avg_pool(&mut self, name: impl Into<String>, x: NodeId) -> NodeId {
        let c = self.channels(x);
        self.push(name.into(), Layer::GlobalAvgPool, vec![x], c)
    }

    /// Shape of every node for the given input shape.
    pub fn infer_shapes(&self, input: Shape) -> Result<Vec<Shape>> {
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ins: Vec<Shape> = node.inputs.iter().map(|&i| shapes[i]).collect();
            let s = infer_one(node, &ins, input).map_err(|e| match e {
                Error::Graph { .. } => e,
                other => Error::graph(node.name.clone(), other.to_string()),
            })?;
            shapes.push(s);
        }
        Ok(shapes)
    }

    /// Every trainable tensor, in node order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            match node.layer {
                Layer::Conv(spec) => {
                    out.push(ParamSpec {
                        name: format!("{}.weight", node.name),
                        node: id,
                        shape: spec.weight_shape(),
                        kind: ParamKind::Weight { fan_in: spec.in_per_group() * spec.kernel * spec.kernel },
                    });
                    if spec.bias {
                        out.push(ParamSpec { name: format!("{}.bias", node.name), node: id, shape: spec.bias_shape(), kind: ParamKind::Bias });
                    }
                }
                Layer::BatchNorm { channels } => {
                    let shape = Shape::new(1, channels, 1, 1);
                    out.push(ParamSpec { name: format!("{}.gamma", node.name), node: id, shape, kind: ParamKind::Gamma });
                    out.push(ParamSpec { name: format!("{}.beta", node.name), node: id, shape, kind: ParamKind::Beta });
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|p| p.shape.numel()).sum()
    }

    /// 64-bit FNV-1a over the canonical node descriptions, edges and named outputs.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        for node in &self.nodes {
            h.write(node.name.as_bytes());
            h.write(b"|");
            h.write(node.layer.describe().as_bytes());
            for &i in &node.inputs {
                h.write(&(i as u64).to_le_bytes());
            }
            h.write(b"\n");
        }
        for (name, id) in &self.outputs {
            h.write(name.as_bytes());
            h.write(&(*id as u64).to_le_bytes());
        }
        h.finish()
    }

    /// Nodes that must be evaluated to produce `wanted`, treating `fed` as given.
    fn needed(&self, wanted: &[NodeId], fed: &[NodeId]) -> Vec<bool> {
        let mut need = vec![false; self.nodes.len()];
        let mut stack: Vec<NodeId> = wanted.to_vec();
        while let Some(id) = stack.pop() {
            if need[id] {
                continue;
            }
            need[id] = true;
            if fed.contains(&id) {
                continue;
            }
            stack.extend(self.nodes[id].inputs.iter().copied());
        }
        need
    }
}

fn infer_one(node: &Node, ins: &[Shape], input: Shape) -> Result<Shape> {
    let first = ins.first().copied();
    let one = || first.ok_or_else(|| Error::graph(node.name.clone(), "missing operand"));
    Ok(match node.layer {
        Layer::Input { channels } => {
            if input.c != channels {
                return Err(Error::graph(node.name.clone(), format!("expects {channels} channels, got {}", input.c)));
            }
            input
        }
        Layer::Conv(spec) => spec.output_shape(one()?)?,
        Layer::BatchNorm { .. } | Layer::Act(_) => one()?,
        Layer::Binary(_) => {
            let a = one()?;
            ops::same_shape("elementwise", a, ins[1])?;
            a
        }
        Layer::Slice { len, .. } => one()?.with_c(len),
        Layer::Concat => {
            let a = one()?;
            for s in ins {
                if s.h != a.h || s.w != a.w || s.n != a.n {
                    return Err(Error::graph(node.name.clone(), format!("spatial mismatch {a} vs {s}")));
                }
            }
            a.with_c(ins.iter().map(|s| s.c).sum())
        }
        Layer::Shuffle { .. } => one()?,
        Layer::Upsample { scale } => {
            let a = one()?;
            a.with_hw(a.h * scale, a.w * scale)
        }
        Layer::GlobalAvgPool => one()?.with_hw(1, 1),
    })
}

struct Fnv64(u64);

impl Fnv64 {
    fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

/// Named tensors in deterministic (lexicographic) order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Real = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParam(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingParam(name.into()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Running statistics in normalization layers.
    Eval,
}

pub const NORM_MOMENTUM: f64 = 0.1;

/// A graph together with its parameters and normalization buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real = f32> {
    pub graph: LayerGraph,
    pub params: ParamStore<T>,
    pub buffers: ParamStore<T>,
}

/// Result of recording a forward pass on a tape.
#[derive(Debug, Clone)]
pub struct Run<T> {
    /// Tape variable for every evaluated node.
    pub values: Vec<Option<Var>>,
    /// Tape leaf for every parameter.
    pub params: BTreeMap<String, Var>,
    /// Batch statistics per normalization node (train mode only).
    pub stats: Vec<(NodeId, BatchStats<T>)>,
}

impl<T> Run<T> {
    pub fn var(&self, id: NodeId) -> Option<Var> {
        self.values.get(id).copied().flatten()
    }
}

fn running_names(node: &Node) -> (String, String) {
    (format!("{}.running_mean", node.name), format!("{}.running_var", node.name))
}

impl<T: Real> Model<T> {
    /// Fresh parameters: Kaiming-uniform kernels, zero biases, unit/zero affine norms.
    pub fn init(graph: LayerGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for spec in graph.param_specs() {
            let t = match spec.kind {
                ParamKind::Weight { fan_in } => {
                    let bound = num_traits::Float::sqrt(6.0 / fan_in as f64);
                    Tensor::from_fn(spec.shape, |_, _, _, _| T::of(rng.gen_range(-bound..bound)))
                }
                ParamKind::Bias | ParamKind::Beta => Tensor::zeros(spec.shape),
                ParamKind::Gamma => Tensor::ones(spec.shape),
            };
            params.insert(spec.name, t);
        }
        let mut buffers = ParamStore::new();
        for node in graph.nodes() {
            if let Layer::BatchNorm { channels } = node.layer {
                let (m, v) = running_names(node);
                buffers.insert(m, Tensor::zeros(Shape::new(1, channels, 1, 1)));
                buffers.insert(v, Tensor::ones(Shape::new(1, channels, 1, 1)));
            }
        }
        Model { graph, params, buffers }
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { graph: self.graph.clone(), params: self.params.cast(), buffers: self.buffers.cast() }
    }

    /// Records a full forward pass from `input`.
    pub fn forward(&self, tape: &mut Tape<T>, input: Var, mode: Mode, track_params: bool) -> Result<Run<T>> {
        let wanted: Vec<NodeId> = self.graph.outputs().iter().map(|o| o.1).collect();
        let inp = self.graph.input_node()?;
        self.forward_from(tape, &[(inp, input)], &wanted, mode, track_params)
    }

    /// Records the nodes needed for `wanted`, with `feeds` substituted for the given nodes.
    pub fn forward_from(
        &self,
        tape: &mut Tape<T>,
        feeds: &[(NodeId, Var)],
        wanted: &[NodeId],
        mode: Mode,
        track_params: bool,
    ) -> Result<Run<T>> {
        let fed: Vec<NodeId> = feeds.iter().map(|f| f.0).collect();
        let need = self.graph.needed(wanted, &fed);
        let mut params = BTreeMap::new();
        for spec in self.graph.param_specs() {
            if need[spec.node] && !fed.contains(&spec.node) {
                let v = tape.leaf(self.params.get(&spec.name)?.clone(), track_params);
                params.insert(spec.name, v);
            }
        }
        let mut values: Vec<Option<Var>> = vec![None; self.graph.len()];
        for &(id, v) in feeds {
            values[id] = Some(v);
        }
        let mut stats = Vec::new();
        for (id, node) in self.graph.nodes().iter().enumerate() {
            if !need[id] || values[id].is_some() {
                continue;
            }
            let arg = |k: usize| -> Result<Var> {
                node.inputs
                    .get(k)
                    .and_then(|&i| values[i])
                    .ok_or_else(|| Error::graph(node.name.clone(), "operand not available (input not fed?)"))
            };
            let wrap = |e: Error| match e {
                Error::Graph { .. } => e,
                other => Error::graph(node.name.clone(), other.to_string()),
            };
            let out = match node.layer {
                Layer::Input { .. } => return Err(Error::graph(node.name.clone(), "graph input was not fed")),
                Layer::Conv(spec) => {
                    let w = params[&format!("{}.weight", node.name)];
                    let b = if spec.bias { Some(params[&format!("{}.bias", node.name)]) } else { None };
                    tape.conv2d(arg(0)?, w, b, spec).map_err(wrap)?
                }
                Layer::BatchNorm { .. } => {
                    let g = params[&format!("{}.gamma", node.name)];
                    let b = params[&format!("{}.beta", node.name)];
                    match mode {
                        Mode::Train => {
                            let (v, st) = tape.batch_norm(arg(0)?, g, b, None).map_err(wrap)?;
                            stats.push((id, st));
                            v
                        }
                        Mode::Eval => {
                            let (m, r) = running_names(node);
                            let (m, r) = (self.buffers.get(&m)?, self.buffers.get(&r)?);
                            tape.batch_norm(arg(0)?, g, b, Some((m.data(), r.data()))).map_err(wrap)?.0
                        }
                    }
                }
                Layer::Act(kind) => tape.activation(arg(0)?, kind),
                Layer::Binary(kind) => tape.elementwise(arg(0)?, arg(1)?, kind).map_err(wrap)?,
                Layer::Slice { start, len } => tape.channel_slice(arg(0)?, start, len).map_err(wrap)?,
                Layer::Concat => {
                    let parts = (0..node.inputs.len()).map(arg).collect::<Result<Vec<_>>>()?;
                    tape.concat(&parts).map_err(wrap)?
                }
                Layer::Shuffle { groups } => tape.channel_shuffle(arg(0)?, groups).map_err(wrap)?,
                Layer::Upsample { scale } => tape.upsample(arg(0)?, scale).map_err(wrap)?,
                Layer::GlobalAvgPool => tape.global_avg_pool(arg(0)?),
            };
            values[id] = Some(out);
        }
        Ok(Run { values, params, stats })
    }

    /// Folds batch statistics from a training pass into the running buffers.
    pub fn update_running_stats(&mut self, stats: &[(NodeId, BatchStats<T>)], momentum: f64) -> Result<()> {
        let m = T::of(momentum);
        let keep = T::one() - m;
        for (id, st) in stats {
            let node = self.graph.node(*id);
            let (mn, vn) = running_names(node);
            let bessel = if st.count > 1 { T::of(st.count as f64 / (st.count - 1) as f64) } else { T::one() };
            let rm = self.buffers.get_mut(&mn)?;
            for (r, &b) in rm.data_mut().iter_mut().zip(&st.mean) {
                *r = keep * *r + m * b;
            }
            let rv = self.buffers.get_mut(&vn)?;
            for (r, &b) in rv.data_mut().iter_mut().zip(&st.var) {
                *r = keep * *r + m * b * bessel;
            }
        }
        Ok(())
    }

    /// Evaluates `wanted` without recording gradients, releasing intermediates
    /// after their last use. Normalization uses running statistics.
    pub fn infer_from(&self, feeds: &[(NodeId, &Tensor<T>)], wanted: &[NodeId]) -> Result<Vec<Tensor<T>>> {
        let fed: Vec<NodeId> = feeds.iter().map(|f| f.0).collect();
        let need = self.graph.needed(wanted, &fed);
        let nodes = self.graph.nodes();
        let mut last_use = vec![0usize; nodes.len()];
        for (id, node) in nodes.iter().enumerate() {
            if need[id] && !fed.contains(&id) {
                for &i in &node.inputs {
                    last_use[i] = last_use[i].max(id);
                }
            }
        }
        for &w in wanted {
            last_use[w] = usize::MAX;
        }
        let mut values: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        for &(id, t) in feeds {
            values[id] = Some(t.clone());
        }
        for (id, node) in nodes.iter().enumerate() {
            if !need[id] || values[id].is_some() {
                continue;
            }
            let wrap = |e: Error| match e {
                Error::Graph { .. } => e,
                other => Error::graph(node.name.clone(), other.to_string()),
            };
            let arg = |k: usize| -> Result<&Tensor<T>> {
                node.inputs
                    .get(k)
                    .and_then(|&i| values[i].as_ref())
                    .ok_or_else(|| Error::graph(node.name.clone(), "operand not available (input not fed?)"))
            };
            let out = match node.layer {
                Layer::Input { .. } => return Err(Error::graph(node.name.clone(), "graph input was not fed")),
                Layer::Conv(spec) => {
                    let w = self.params.get(&format!("{}.weight", node.name))?;
                    let b = if spec.bias { Some(self.params.get(&format!("{}.bias", node.name))?) } else { None };
                    ops::conv2d(arg(0)?, w, b, &spec).map_err(wrap)?
                }
                Layer::BatchNorm { .. } => {
                    let g = self.params.get(&format!("{}.gamma", node.name))?;
                    let b = self.params.get(&format!("{}.beta", node.name))?;
                    let (m, r) = running_names(node);
                    let (m, r) = (self.buffers.get(&m)?, self.buffers.get(&r)?);
                    ops::batch_norm(arg(0)?, g, b, Some((m.data(), r.data()))).map_err(wrap)?.0
                }
                Layer::Act(kind) => ops::activation(arg(0)?, kind),
                Layer::Binary(kind) => ops::elementwise(arg(0)?, arg(1)?, kind).map_err(wrap)?,
                Layer::Slice { start, len } => ops::channel_slice(arg(0)?, start, len).map_err(wrap)?,
                Layer::Concat => {
                    let parts = (0..node.inputs.len()).map(arg).collect::<Result<Vec<_>>>()?;
                    ops::concat(&parts).map_err(wrap)?
                }
                Layer::Shuffle { groups } => ops::channel_shuffle(arg(0)?, groups).map_err(wrap)?,
                Layer::Upsample { scale } => ops::bilinear_upsample(arg(0)?, scale).map_err(wrap)?,
                Layer::GlobalAvgPool => ops::global_avg_pool(arg(0)?),
            };
            values[id] = Some(out);
            for &i in &node.inputs {
                if last_use[i] == id {
                    values[i] = None;
                }
            }
        }
        wanted
            .iter()
            .map(|&w| values[w].clone().ok_or_else(|| Error::graph(nodes[w].name.clone(), "not evaluated")))
            .collect()
    }

    /// Evaluates every named output for `input`.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Vec<(String, Tensor<T>)>> {
        let inp = self.graph.input_node()?;
        let wanted: Vec<NodeId> = self.graph.outputs().iter().map(|o| o.1).collect();
        let vals = self.infer_from(&[(inp, input)], &wanted)?;
        Ok(self.graph.outputs().iter().map(|o| o.0.clone()).zip(vals).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LayerGraph {
        let mut g = LayerGraph::new();
        let x = g.input(2).unwrap();
        let c = g.conv("c1", x, ConvSpec::new(2, 4, 3).padding(1)).unwrap();
        let b = g.batch_norm("c1.bn", c);
        let r = g.relu("c1.relu", b);
        let parts = g.split("s", r, 2).unwrap();
        let m = g.mul("m", parts[0], parts[1]).unwrap();
        let cat = g.concat("cat", &[m, parts[1]]).unwrap();
        let up = g.upsample("up", cat, 2).unwrap();
        g.mark_output("out", up);
        g
    }

    #[test]
    fn shape_inference_and_params() {
        let g = tiny();
        let shapes = g.infer_shapes(Shape::new(3, 2, 5, 6)).unwrap();
        assert_eq!(*shapes.last().unwrap(), Shape::new(3, 4, 10, 12));
        assert_eq!(g.param_count(), 4 * 2 * 9 + 8);
        let err = g.infer_shapes(Shape::new(1, 3, 5, 5)).unwrap_err();
        assert!(matches!(err, Error::Graph { ref node, .. } if node == "input"));
    }

    #[test]
    fn builder_rejects_channel_mismatch() {
        let mut g = LayerGraph::new();
        let x = g.input(3).unwrap();
        let err = g.conv("bad", x, ConvSpec::new(4, 4, 1)).unwrap_err();
        assert!(matches!(err, Error::Graph { ref node, .. } if node == "bad"));
    }

    #[test]
    fn executed_shapes_match_inferred() {
        let g = tiny();
        let model = Model::<f64>::init(g, 3);
        let input = Tensor::from_fn(Shape::new(2, 2, 4, 5), |n, c, y, x| (n + c + y * x) as f64 * 0.1);
        let shapes = model.graph.infer_shapes(input.shape()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let run = model.forward(&mut tape, x, Mode::Train, true).unwrap();
        for (id, v) in run.values.iter().enumerate() {
            assert_eq!(tape.shape(v.unwrap()), shapes[id]);
        }
        let eager = model.infer(&input).unwrap();
        assert_eq!(eager[0].1.shape(), shapes[shapes.len() - 1]);
    }

    #[test]
    fn fingerprint_tracks_structure() {
        let a = tiny();
        let mut b = tiny();
        assert_eq!(a.fingerprint(), b.clone().fingerprint());
        let last = b.outputs()[0].1;
        let s = b.sigmoid("extra", last);
        b.mark_output("p", s);
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::<f32>::init(tiny(), 9);
        let b = Model::<f32>::init(tiny(), 9);
        let c = Model::<f32>::init(tiny(), 10);
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }
}
