//! Feature selection network: tensor-of-interest pairing, gated
//! distance-conditioned fusion and the sigmoid lane attention.

use std::collections::BTreeSet;
use std::io::Write;

use rand::Rng;

use crate::nn::{FeedForward, LayerNorm, Linear};
use crate::scene::{LaneGraph, Point};
use crate::tensor::{shape_err, Binding, ParamStore, Result, Tape, Tensor, Var};

/// Displacements enter the network divided by this many meters.
pub const DIST_SCALE: f64 = 10.0;

/// Base/context index pairs with their displacement `d_base - d_ctx`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelectedPairs {
    pub pairs: Vec<(usize, usize, Point)>,
    /// Selection radius in meters; infinite when every pair is kept.
    pub threshold: f64,
}

impl SelectedPairs {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn base_idx(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn ctx_idx(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }

    /// Distinct base rows, ascending.
    pub fn base_rows(&self) -> Vec<usize> {
        let s: BTreeSet<usize> = self.pairs.iter().map(|p| p.0).collect();
        s.into_iter().collect()
    }

    pub fn displacement_tensor(&self) -> Tensor {
        Tensor::from_fn(self.len(), 2, |r, c| {
            let d = self.pairs[r].2;
            if c == 0 {
                d.x / DIST_SCALE
            } else {
                d.y / DIST_SCALE
            }
        })
    }
}

/// Every (base, context) pair closer than `eps`.
pub fn toi_select(base: &[Point], ctx: &[Point], eps: f64) -> Result<SelectedPairs> {
    if !(eps > 0.0) {
        return Err(shape_err("toi_select", format!("threshold {eps} must be positive")));
    }
    let mut pairs = Vec::new();
    for (i, &b) in base.iter().enumerate() {
        for (j, &c) in ctx.iter().enumerate() {
            let d = b.sub(c);
            if d.norm() < eps {
                pairs.push((i, j, d));
            }
        }
    }
    Ok(SelectedPairs { pairs, threshold: eps })
}

/// Pairs within one point set, leaving out each point paired with itself.
pub fn toi_select_others(points: &[Point], eps: f64) -> Result<SelectedPairs> {
    let mut s = toi_select(points, points, eps)?;
    s.pairs.retain(|p| p.0 != p.1);
    Ok(s)
}

/// Every pair, with no distance filter.
pub fn all_pairs(base: &[Point], ctx: &[Point], skip_self: bool) -> SelectedPairs {
    let mut pairs = Vec::with_capacity(base.len() * ctx.len());
    for (i, &b) in base.iter().enumerate() {
        for (j, &c) in ctx.iter().enumerate() {
            if !(skip_self && i == j) {
                pairs.push((i, j, b.sub(c)));
            }
        }
    }
    SelectedPairs {
        pairs,
        threshold: f64::INFINITY,
    }
}

/// Distance-conditioned gated fusion of context rows into base rows.
#[derive(Debug, Clone)]
pub struct FeatureSelection {
    base: Linear,
    ctx: Linear,
    dist: Linear,
    wb: Linear,
    wc: Linear,
    ln_bc: LayerNorm,
    w_gamma: Linear,
    w_sigma: Linear,
    w_g: Linear,
    ln_g: LayerNorm,
    ln_att: LayerNorm,
    ffn: FeedForward,
}

impl FeatureSelection {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        let n = |s: &str| format!("{name}.{s}");
        FeatureSelection {
            base: Linear::new(store, &n("base"), d, d, rng),
            ctx: Linear::new(store, &n("ctx"), d, d, rng),
            dist: Linear::new(store, &n("dist"), 2, d, rng),
            wb: Linear::new(store, &n("wb"), d, d, rng),
            wc: Linear::no_bias(store, &n("wc"), 2 * d, d, rng),
            ln_bc: LayerNorm::new(store, &n("ln_bc"), d, rng),
            w_gamma: Linear::new(store, &n("wgamma"), d, d, rng),
            w_sigma: Linear::new(store, &n("wsigma"), d, d, rng),
            w_g: Linear::new(store, &n("wg"), d, d, rng),
            ln_g: LayerNorm::new(store, &n("ln_g"), d, rng),
            ln_att: LayerNorm::new(store, &n("ln_att"), d, rng),
            ffn: FeedForward::new(store, name, d, rng),
        }
    }

    /// Bias of the sigmoid gate arm, exposed for saturation tests.
    pub fn gate_bias(&self) -> crate::tensor::ParamId {
        self.w_sigma.b.expect("gate arm has a bias")
    }

    /// Per-pair gated features `X_g`, one row per pair. `disp` overrides the
    /// scaled displacements stored in `pairs` with a tape value.
    pub fn pair_features(
        &self,
        t: &mut Tape,
        p: &Binding,
        x_base: Var,
        x_ctx: Var,
        pairs: &SelectedPairs,
        disp: Option<Var>,
    ) -> Result<Var> {
        let xb = t.index_select(x_base, &pairs.base_idx())?;
        let xc = t.index_select(x_ctx, &pairs.ctx_idx())?;
        let xb = self.base.forward(t, p, xb)?;
        let xc = self.ctx.forward(t, p, xc)?;
        let dv = match disp {
            Some(d) => d,
            None => t.constant(pairs.displacement_tensor()),
        };
        let dd = self.dist.forward(t, p, dv)?;
        let b = self.wb.forward(t, p, xb)?;
        let cd = t.concat(&[xc, dd], 1)?;
        let c = self.wc.forward(t, p, cd)?;
        let s = t.add(b, c)?;
        let s = self.ln_bc.forward(t, p, s)?;
        let xbc = t.elu(s);
        let gamma = self.w_gamma.forward(t, p, xbc)?;
        let gate = self.w_sigma.forward(t, p, gamma)?;
        let gate = t.sigmoid(gate);
        let val = self.w_g.forward(t, p, gamma)?;
        let xg = t.mul(gate, val)?;
        let s = t.add(xbc, xg)?;
        let s = self.ln_g.forward(t, p, s)?;
        Ok(t.relu(s))
    }

    /// Returns `(X_out, X_att)`.
    pub fn forward(
        &self,
        t: &mut Tape,
        p: &Binding,
        x_base: Var,
        x_ctx: Var,
        pairs: &SelectedPairs,
    ) -> Result<(Var, Var)> {
        self.forward_with(t, p, x_base, x_ctx, pairs, None)
    }

    /// As `forward`, with displacements (already divided by `DIST_SCALE`)
    /// supplied as a `[pairs, 2]` tape value.
    pub fn forward_with(
        &self,
        t: &mut Tape,
        p: &Binding,
        x_base: Var,
        x_ctx: Var,
        pairs: &SelectedPairs,
        disp: Option<Var>,
    ) -> Result<(Var, Var)> {
        let (nb, nc) = (t.shape(x_base)[0], t.shape(x_ctx)[0]);
        if let Some(bad) = pairs.pairs.iter().find(|q| q.0 >= nb || q.1 >= nc) {
            return Err(shape_err(
                "feature_selection",
                format!("pair {:?} outside {nb} base / {nc} context rows", (bad.0, bad.1)),
            ));
        }
        let agg = if pairs.is_empty() {
            x_base
        } else {
            let xg = self.pair_features(t, p, x_base, x_ctx, pairs, disp)?;
            t.index_add(x_base, &pairs.base_idx(), xg)?
        };
        let att = self.ln_att.forward(t, p, agg)?;
        let out = self.ffn.forward(t, p, x_base, att)?;
        Ok((out, att))
    }
}

/// `W = sigmoid(Q K^T / sqrt d)` and `A = W V`; returns `(A, W)`.
pub fn sigmoid_attention(t: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d = t.shape(q)[1];
    let kt = t.transpose(k);
    let s = t.matmul(q, kt)?;
    let s = t.scale(s, 1.0 / (d as f64).sqrt());
    let w = t.sigmoid(s);
    Ok((t.matmul(w, v)?, w))
}

/// Single-head agent-to-lane attention with sigmoid weights, then the
/// residual and feedforward stages.
#[derive(Debug, Clone)]
pub struct SigmoidLaneAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    ln: LayerNorm,
    ffn: FeedForward,
}

impl SigmoidLaneAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        SigmoidLaneAttention {
            q: Linear::no_bias(store, &format!("{name}.q"), d, d, rng),
            k: Linear::no_bias(store, &format!("{name}.k"), d, d, rng),
            v: Linear::no_bias(store, &format!("{name}.v"), d, d, rng),
            ln: LayerNorm::new(store, &format!("{name}.ln"), d, rng),
            ffn: FeedForward::new(store, name, d, rng),
        }
    }

    /// Returns `X_fuse` and the `[N, Nl]` weights (`None` without lanes).
    pub fn forward(&self, t: &mut Tape, p: &Binding, agents: Var, lanes: Option<Var>) -> Result<(Var, Option<Var>)> {
        let Some(lanes) = lanes else {
            return Ok((agents, None));
        };
        let q = self.q.forward(t, p, agents)?;
        let k = self.k.forward(t, p, lanes)?;
        let v = self.v.forward(t, p, lanes)?;
        let (a, w) = sigmoid_attention(t, q, k, v)?;
        let s = t.add(agents, a)?;
        let xs = self.ln.forward(t, p, s)?;
        Ok((self.ffn.forward(t, p, agents, xs)?, Some(w)))
    }
}

/// CSV of `(agent, lane vector, weight)` with the lane geometry alongside.
pub fn write_lane_attention_csv<W: Write>(
    w: &mut W,
    agent_ids: &[u32],
    graph: &LaneGraph,
    weights: &Tensor,
) -> std::io::Result<()> {
    writeln!(w, "agent_id,lane_vector,lane_id,weight,mid_x,mid_y,dx,dy")?;
    for (a, id) in agent_ids.iter().enumerate() {
        for (l, v) in graph.vectors.iter().enumerate() {
            writeln!(
                w,
                "{id},{l},{},{},{},{},{},{}",
                v.lane_id,
                weights.get(a, l),
                v.anchor.x,
                v.anchor.y,
                v.dx,
                v.dy
            )?;
        }
    }
    Ok(())
}
