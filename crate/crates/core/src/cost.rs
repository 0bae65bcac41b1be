//! Analytic cost formulas for the four multiscale block families and an
//! exact graph-walking MAC/parameter counter.
//!
//! Costs are multiply-accumulates. Convolution nodes count
//! `out_elems * k^2 * in_channels / groups`; every other op is reported as a
//! secondary op count and left out of the headline total.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::gmbi::{block_graph, GmbiConfig, Interaction};
use crate::graph::{Layer, LayerGraph};
use crate::tensor::{ConvSpec, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Dsconv,
    Multibranch,
    Mi,
    Gmbi,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Dsconv, Family::Multibranch, Family::Mi, Family::Gmbi];

    pub fn name(&self) -> &'static str {
        match self {
            Family::Dsconv => "dsconv",
            Family::Multibranch => "multibranch",
            Family::Mi => "mi",
            Family::Gmbi => "gmbi",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CostQuery {
    pub k: u64,
    pub c: u64,
    pub h: u64,
    pub w: u64,
    pub n: u64,
    pub family: Family,
}

impl CostQuery {
    pub fn new(family: Family, k: u64, c: u64, h: u64, w: u64, n: u64) -> Self {
        CostQuery { k, c, h, w, n, family }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.k, self.c, self.h, self.w, self.n].contains(&0) {
            return Err(Error::invalid("cost query", "k, c, h, w and n must be positive"));
        }
        if matches!(self.family, Family::Gmbi) && self.c % self.n != 0 {
            return Err(Error::Indivisible { op: "cost_gmbi", what: "channels", count: self.c as usize, parts: self.n as usize });
        }
        Ok(())
    }

    fn hw(&self) -> u64 {
        self.h * self.w
    }
}

/// `k^2 c h w + c^2 h w`
pub fn cost_dsconv(q: &CostQuery) -> u64 {
    q.k * q.k * q.c * q.hw() + q.c * q.c * q.hw()
}

/// `n (k^2 c h w + c^2 h w) + c^2 h w`
pub fn cost_multibranch(q: &CostQuery) -> u64 {
    q.n * cost_dsconv(q) + q.c * q.c * q.hw()
}

/// `n k^2 c h w + c (n h w) + c^2 h w`
pub fn cost_mi(q: &CostQuery) -> u64 {
    q.n * q.k * q.k * q.c * q.hw() + q.c * (q.n * q.hw()) + q.c * q.c * q.hw()
}

/// `n (k^2 (c/n) h w) + c^2 h w`
pub fn cost_gmbi(q: &CostQuery) -> Result<u64> {
    if q.n == 0 || q.c % q.n != 0 {
        return Err(Error::Indivisible { op: "cost_gmbi", what: "channels", count: q.c as usize, parts: q.n as usize });
    }
    Ok(q.n * (q.k * q.k * (q.c / q.n) * q.hw()) + q.c * q.c * q.hw())
}

/// Formula for the query's own family.
pub fn analytic(q: &CostQuery) -> Result<u64> {
    q.validate()?;
    Ok(match q.family {
        Family::Dsconv => cost_dsconv(q),
        Family::Multibranch => cost_multibranch(q),
        Family::Mi => cost_mi(q),
        Family::Gmbi => cost_gmbi(q)?,
    })
}

fn dw(c: usize, k: usize, d: usize) -> ConvSpec {
    ConvSpec::depthwise(c, k, d)
}

/// Bare (normalization-free) block of the query's family on `c` channels.
///
/// * dsconv: depthwise then pointwise.
/// * multibranch: `n` full DSConv branches at dilations `1..n`, summed, fused pointwise.
/// * mi: `n` full-width depthwise branches, concatenated, shuffled so that
///   each channel's `n` responses are adjacent, merged by a channel-grouped
///   1x1 (`n c -> c`, groups `c`), then fused pointwise.
/// * gmbi: the GMBI block with EWMS interaction.
pub fn family_graph(q: &CostQuery) -> Result<LayerGraph> {
    q.validate()?;
    let (c, k, n) = (q.c as usize, q.k as usize, q.n as usize);
    let mut g = LayerGraph::new();
    let x = g.input(c)?;
    let out = match q.family {
        Family::Dsconv => {
            let d = g.conv("dw", x, dw(c, k, 1))?;
            g.conv("pw", d, ConvSpec::pointwise(c, c))?
        }
        Family::Multibranch => {
            let mut acc = None;
            for i in 1..=n {
                let d = g.conv(format!("branch{i}.dw"), x, dw(c, k, i))?;
                let p = g.conv(format!("branch{i}.pw"), d, ConvSpec::pointwise(c, c))?;
                acc = Some(match acc {
                    None => p,
                    Some(a) => g.add(format!("sum{i}"), a, p)?,
                });
            }
            g.conv("fuse", acc.expect("n >= 1"), ConvSpec::pointwise(c, c))?
        }
        Family::Mi => {
            let branches = (1..=n).map(|i| g.conv(format!("branch{i}.dw"), x, dw(c, k, i))).collect::<Result<Vec<_>>>()?;
            let cat = if n == 1 { branches[0] } else { g.concat("cat", &branches)? };
            let mixed = if n == 1 { cat } else { g.shuffle("shuffle", cat, n)? };
            let merge = g.conv("merge", mixed, ConvSpec::pointwise(n * c, c).groups(c))?;
            g.conv("fuse", merge, ConvSpec::pointwise(c, c))?
        }
        Family::Gmbi => {
            let cfg = GmbiConfig::new(c).scale_dim(n).kernel(k).interaction(Interaction::Ewms).norm(false);
            return block_graph(&cfg).map(|mut g| {
                g.set_declared_input_hw(q.h as usize, q.w as usize);
                g
            });
        }
    };
    g.mark_output("out", out);
    g.set_declared_input_hw(q.h as usize, q.w as usize);
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeCost {
    pub name: String,
    pub kind: &'static str,
    pub output: Shape,
    pub macs: u64,
    pub params: u64,
    /// Non-convolution arithmetic (elementwise, normalization, interpolation).
    pub secondary_ops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub input: Shape,
    pub nodes: Vec<NodeCost>,
    pub macs: u64,
    pub params: u64,
    pub secondary_ops: u64,
}

impl CostReport {
    /// Headline total: MACs, or `2 * MACs` when counting multiplies and adds separately.
    pub fn flops(&self, double: bool) -> u64 {
        if double {
            2 * self.macs
        } else {
            self.macs
        }
    }

    /// Sum of MACs over nodes whose name starts with `prefix`.
    pub fn macs_under(&self, prefix: &str) -> u64 {
        self.nodes.iter().filter(|n| n.name.starts_with(prefix)).map(|n| n.macs).sum()
    }
}

/// Exact per-node MACs, parameters and secondary ops for an input shape.
pub fn count_graph(g: &LayerGraph, input: Shape) -> Result<CostReport> {
    let shapes = g.infer_shapes(input)?;
    let mut nodes = Vec::with_capacity(g.len());
    for (id, node) in g.nodes().iter().enumerate() {
        let out = shapes[id];
        let elems = out.numel() as u64;
        let (macs, params, secondary) = match node.layer {
            Layer::Conv(s) => {
                let per = (s.kernel * s.kernel * s.in_per_group()) as u64;
                (elems * per, s.param_count() as u64, if s.bias { elems } else { 0 })
            }
            Layer::BatchNorm { channels } => (0, 2 * channels as u64, 2 * elems),
            Layer::Act(_) | Layer::Binary(_) => (0, 0, elems),
            Layer::Upsample { .. } => (0, 0, 4 * elems),
            Layer::GlobalAvgPool => (0, 0, shapes[node.inputs[0]].numel() as u64),
            Layer::Input { .. } | Layer::Slice { .. } | Layer::Concat | Layer::Shuffle { .. } => (0, 0, 0),
        };
        nodes.push(NodeCost { name: node.name.clone(), kind: node.layer.kind(), output: out, macs, params, secondary_ops: secondary });
    }
    Ok(CostReport {
        input,
        macs: nodes.iter().map(|n| n.macs).sum(),
        params: nodes.iter().map(|n| n.params).sum(),
        secondary_ops: nodes.iter().map(|n| n.secondary_ops).sum(),
        nodes,
    })
}

/// One analyzer row: analytic formula against the counted block graph.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyRow {
    pub family: Family,
    pub n: u64,
    pub analytic_macs: u64,
    pub counted_macs: u64,
    pub params: u64,
    /// `(counted - analytic) / analytic`.
    pub delta: f64,
}

pub fn compare_family(q: &CostQuery) -> Result<FamilyRow> {
    let analytic_macs = analytic(q)?;
    let g = family_graph(q)?;
    let rep = count_graph(&g, Shape::new(1, q.c as usize, q.h as usize, q.w as usize))?;
    Ok(FamilyRow {
        family: q.family,
        n: q.n,
        analytic_macs,
        counted_macs: rep.macs,
        params: rep.params,
        delta: (rep.macs as f64 - analytic_macs as f64) / analytic_macs as f64,
    })
}

/// Relative deviation of `value` from `reference`, as a fraction.
pub fn relative_delta(value: f64, reference: f64) -> f64 {
    (value - reference) / reference
}

/// `n` values must all be accepted for a `gmbi` query of `c` channels.
pub fn check_scale_dims(c: u64, ns: &[u64]) -> Result<()> {
    for &n in ns {
        if n == 0 || c % n != 0 {
            return Err(Error::invalid("analyze", format!("gmbi needs c divisible by n: c={c}, n={n}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(f: Family, k: u64, c: u64, h: u64, n: u64) -> CostQuery {
        CostQuery::new(f, k, c, h, h, n)
    }

    #[test]
    fn hand_evaluated_values() {
        assert_eq!(cost_dsconv(&q(Family::Dsconv, 3, 8, 4, 1)), 2176);
        assert_eq!(cost_dsconv(&q(Family::Dsconv, 1, 1, 1, 1)), 2);
        assert_eq!(cost_multibranch(&q(Family::Multibranch, 3, 8, 4, 4)), 9728);
        assert_eq!(cost_mi(&q(Family::Mi, 3, 8, 4, 4)), 6144);
        assert_eq!(cost_gmbi(&q(Family::Gmbi, 3, 8, 4, 4)).unwrap(), 2176);
        assert!(cost_gmbi(&q(Family::Gmbi, 3, 32, 4, 3)).is_err());
    }

    #[test]
    fn single_pointwise_node() {
        let mut g = LayerGraph::new();
        let x = g.input(32).unwrap();
        g.conv("pw", x, ConvSpec::pointwise(32, 32)).unwrap();
        let r = count_graph(&g, Shape::new(1, 32, 128, 128)).unwrap();
        assert_eq!(r.macs, 16_777_216);
        assert_eq!(r.params, 1024);
    }

    #[test]
    fn family_graphs_match_formulas() {
        for f in Family::ALL {
            let row = compare_family(&q(f, 3, 8, 4, 4)).unwrap();
            assert_eq!(row.counted_macs, row.analytic_macs, "{f:?}");
        }
    }

    #[test]
    fn uninferable_graph_names_node() {
        let mut g = LayerGraph::new();
        let x = g.input(4).unwrap();
        g.conv("big", x, ConvSpec::new(4, 4, 5)).unwrap();
        match count_graph(&g, Shape::new(1, 4, 3, 3)) {
            Err(Error::Graph { node, .. }) => assert_eq!(node, "big"),
            other => panic!("{other:?}"),
        }
    }
}
