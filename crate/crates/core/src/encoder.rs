//! Agent encoder (sparse multi-head attention with conv-pooling) and lane
//! encoder (dilated LaneConv, static and dynamic passes).

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::fusion::{FeatureSelection, SelectedPairs};
use crate::nn::{FeedForward, LayerNorm, Linear};
use crate::scene::{LaneGraph, Relation};
use crate::tensor::{shape_err, Binding, Init, ParamId, ParamStore, Result, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Fraction of queries kept per head, `Nd / L`.
    pub sparsity: f64,
    /// Sparse attention + conv-pool blocks.
    pub nx: usize,
    /// LaneConv blocks per lane pass.
    pub ng: usize,
    pub dilations: Vec<usize>,
    pub conv_kernel: usize,
    pub t_hst: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 128,
            heads: 4,
            sparsity: 0.75,
            nx: 3,
            ng: 4,
            dilations: vec![1, 2],
            conv_kernel: 3,
            t_hst: 20,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(shape_err("encoder config", d));
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return bad(format!("sparsity {} outside (0, 1]", self.sparsity));
        }
        if self.dilations.iter().any(|&k| k == 0 || k > crate::scene::MAX_HOPS) {
            return bad(format!("dilations {:?} outside 1..=6", self.dilations));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad(format!("conv kernel {} must be odd", self.conv_kernel));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Sinusoidal position code for step `pos`.
pub fn positional_encoding(pos: usize, d_model: usize, t_hst: usize) -> Vec<f64> {
    let base = 2.0 * t_hst as f64;
    (0..d_model)
        .map(|j| {
            let i2 = (j - j % 2) as f64;
            let a = pos as f64 / base.powf(i2 / d_model as f64);
            if j % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

pub fn pe_matrix(len: usize, d_model: usize, t_hst: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..len).map(|p| positional_encoding(p, d_model, t_hst)).collect();
    Tensor::from_rows(&rows).expect("rectangular")
}

fn scaled_scores(q: &[f64], k: &Tensor) -> Vec<f64> {
    let d = q.len();
    let s = 1.0 / (d as f64).sqrt();
    (0..k.rows())
        .map(|j| k.row(j).iter().zip(q).map(|(a, b)| a * b).sum::<f64>() * s)
        .collect()
}

/// Max-minus-mean of the scaled scores of query `q` against keys `k` (`L x d`).
pub fn m_score(q: &[f64], k: &Tensor) -> f64 {
    let s = scaled_scores(q, k);
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max - s.iter().sum::<f64>() / s.len() as f64
}

/// KL divergence from the uniform distribution to the attention row of `q`:
/// `logsumexp(s) - mean(s) - ln L`.
pub fn exact_kl(q: &[f64], k: &Tensor) -> f64 {
    let s = scaled_scores(q, k);
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + s.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    lse - s.iter().sum::<f64>() / s.len() as f64 - (s.len() as f64).ln()
}

/// Shannon entropy in nats; zero-probability entries contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// Number of queries kept for a sequence of length `len`.
pub fn selected_count(len: usize, ratio: f64) -> Result<usize> {
    let n = (ratio * len as f64 - 1e-9).ceil().max(0.0) as usize;
    if n == 0 {
        return Err(shape_err(
            "sparse attention",
            format!("ratio {ratio} selects no query out of {len}"),
        ));
    }
    Ok(n.min(len))
}

/// Indices of the `n` largest scores, ties to the lower index, returned ascending.
pub fn top_queries(scores: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrace {
    pub m_scores: Vec<f64>,
    pub selected: Vec<usize>,
    /// Softmax weights, one row per selected query.
    pub weights: Tensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionTrace {
    pub heads: Vec<HeadTrace>,
}

impl AttentionTrace {
    /// CSV rows: head, query, m_score, selected, then one weight per key
    /// (empty for unselected queries).
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let keys = self.heads.first().map_or(0, |h| h.m_scores.len());
        write!(w, "head,query,m_score,selected")?;
        for j in 0..keys {
            write!(w, ",w{j}")?;
        }
        writeln!(w)?;
        for (h, ht) in self.heads.iter().enumerate() {
            for (q, m) in ht.m_scores.iter().enumerate() {
                let pos = ht.selected.iter().position(|&s| s == q);
                write!(w, "{h},{q},{m},{}", u8::from(pos.is_some()))?;
                for j in 0..keys {
                    match pos {
                        Some(r) => write!(w, ",{}", ht.weights.get(r, j))?,
                        None => write!(w, ",")?,
                    }
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// Multi-head attention over the top-`Nd` queries by M-score, followed by
/// the residual/normalize and feedforward stages.
#[derive(Debug, Clone)]
pub struct SparseAttention {
    q: Vec<Linear>,
    k: Vec<Linear>,
    v: Vec<Linear>,
    ln: LayerNorm,
    ffn: FeedForward,
    ratio: f64,
}

impl SparseAttention {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let (d, dh) = (cfg.d_model, cfg.head_dim());
        let mk = |store: &mut ParamStore, rng: &mut _, what: &str| {
            (0..cfg.heads)
                .map(|h| Linear::no_bias(store, &format!("{name}.{what}{h}"), d, dh, rng))
                .collect::<Vec<_>>()
        };
        SparseAttention {
            q: mk(store, rng, "q"),
            k: mk(store, rng, "k"),
            v: mk(store, rng, "v"),
            ln: LayerNorm::new(store, &format!("{name}.ln"), d, rng),
            ffn: FeedForward::new(store, name, d, rng),
            ratio: cfg.sparsity,
        }
    }

    pub fn set_ratio(&mut self, ratio: f64) {
        self.ratio = ratio;
    }

    /// Concatenated head outputs scattered to their selected rows (zero elsewhere).
    pub fn attend(&self, t: &mut Tape, p: &Binding, x: Var) -> Result<(Var, AttentionTrace)> {
        let len = t.shape(x)[0];
        let nd = selected_count(len, self.ratio)?;
        let mut outs = Vec::with_capacity(self.q.len());
        let mut trace = AttentionTrace::default();
        for h in 0..self.q.len() {
            let q = self.q[h].forward(t, p, x)?;
            let k = self.k[h].forward(t, p, x)?;
            let v = self.v[h].forward(t, p, x)?;
            let (qv, kv) = (t.value(q), t.value(k));
            let m: Vec<f64> = (0..len).map(|i| m_score(qv.row(i), kv)).collect();
            let sel = top_queries(&m, nd);
            let dh = kv.cols();
            let qs = t.index_select(q, &sel)?;
            let kt = t.transpose(k);
            let s = t.matmul(qs, kt)?;
            let s = t.scale(s, 1.0 / (dh as f64).sqrt());
            let w = t.softmax(s);
            let a = t.matmul(w, v)?;
            let zero = t.constant(Tensor::zeros(&[len, dh]));
            outs.push(t.index_add(zero, &sel, a)?);
            trace.heads.push(HeadTrace {
                m_scores: m,
                selected: sel,
                weights: t.value(w).clone(),
            });
        }
        Ok((t.concat(&outs, 1)?, trace))
    }

    pub fn forward(&self, t: &mut Tape, p: &Binding, x: Var) -> Result<(Var, AttentionTrace)> {
        let (att, trace) = self.attend(t, p, x)?;
        let s = t.add(x, att)?;
        let xs = self.ln.forward(t, p, s)?;
        Ok((self.ffn.forward(t, p, x, xs)?, trace))
    }
}

/// Same-padded 1-D convolution followed by max-pooling with window and stride 2.
#[derive(Debug, Clone)]
pub struct ConvPool {
    pub w: ParamId,
    pub b: ParamId,
    kernel: usize,
}

impl ConvPool {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        ConvPool {
            w: store.add(format!("{name}.w"), &[kernel * d, d], Init::KaimingUniform, rng),
            b: store.add(format!("{name}.b"), &[1, d], Init::Zeros, rng),
            kernel,
        }
    }

    pub fn forward(&self, t: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        if t.shape(x)[0] < 2 {
            return Err(shape_err("conv_pool", "sequence shorter than 2"));
        }
        let c = t.conv1d(x, p.var(self.w), p.var(self.b), self.kernel)?;
        t.max_pool_rows(c)
    }
}

/// Agent history encoder: input layer, PE, `Nx` (sparse attention, conv-pool)
/// blocks and a max over the remaining steps.
#[derive(Debug, Clone)]
pub struct AgentEncoder {
    input: Linear,
    pe: Tensor,
    blocks: Vec<(SparseAttention, ConvPool)>,
}

impl AgentEncoder {
    pub fn new(store: &mut ParamStore, name: &str, feat: usize, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        AgentEncoder {
            input: Linear::new(store, &format!("{name}.in"), feat, cfg.d_model, rng),
            pe: pe_matrix(cfg.t_hst, cfg.d_model, cfg.t_hst),
            blocks: (0..cfg.nx)
                .map(|i| {
                    (
                        SparseAttention::new(store, &format!("{name}.att{i}"), cfg, rng),
                        ConvPool::new(store, &format!("{name}.cp{i}"), cfg.d_model, cfg.conv_kernel, rng),
                    )
                })
                .collect(),
        }
    }

    pub fn set_ratio(&mut self, ratio: f64) {
        for (a, _) in &mut self.blocks {
            a.set_ratio(ratio);
        }
    }

    /// Encodes one agent's `[t_hst, feat]` history to a `[1, d_model]` row.
    pub fn encode_one(&self, t: &mut Tape, p: &Binding, x: Var) -> Result<(Var, Vec<AttentionTrace>)> {
        if t.shape(x)[0] != self.pe.rows() {
            return Err(shape_err(
                "encode_agents",
                format!("history of {} steps, expected {}", t.shape(x)[0], self.pe.rows()),
            ));
        }
        let h = self.input.forward(t, p, x)?;
        let pe = t.constant(self.pe.clone());
        let mut h = t.add(h, pe)?;
        let mut traces = Vec::with_capacity(self.blocks.len());
        for (att, cp) in &self.blocks {
            let (a, tr) = att.forward(t, p, h)?;
            traces.push(tr);
            h = cp.forward(t, p, a)?;
        }
        Ok((t.max_rows(h)?, traces))
    }

    /// Stacks per-agent encodings into `[N, d_model]`.
    pub fn forward(&self, t: &mut Tape, p: &Binding, histories: &[Var]) -> Result<(Var, Vec<Vec<AttentionTrace>>)> {
        let mut rows = Vec::with_capacity(histories.len());
        let mut traces = Vec::with_capacity(histories.len());
        for &x in histories {
            let (r, tr) = self.encode_one(t, p, x)?;
            rows.push(r);
            traces.push(tr);
        }
        Ok((t.concat(&rows, 0)?, traces))
    }
}

/// Dense 0/1 adjacency matrices for one lane graph.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneAdjacency {
    pub n: usize,
    /// Right, left, merge, overlap.
    pub lateral: [Tensor; 4],
    /// Predecessor and successor matrices per configured dilation.
    pub pred: Vec<Tensor>,
    pub succ: Vec<Tensor>,
}

impl LaneAdjacency {
    pub fn from_graph(g: &LaneGraph, dilations: &[usize]) -> std::result::Result<Self, crate::scene::SceneError> {
        let lateral = [
            g.adjacency(Relation::Right)?,
            g.adjacency(Relation::Left)?,
            g.adjacency(Relation::Merge)?,
            g.adjacency(Relation::Overlap)?,
        ];
        let mut pred = Vec::new();
        let mut succ = Vec::new();
        for &k in dilations {
            pred.push(g.adjacency(Relation::Pred(k))?);
            succ.push(g.adjacency(Relation::Succ(k))?);
        }
        Ok(LaneAdjacency {
            n: g.len(),
            lateral,
            pred,
            succ,
        })
    }

    /// Graph with no relations at all.
    pub fn empty(n: usize, dilations: usize) -> Self {
        let z = Tensor::zeros(&[n, n]);
        LaneAdjacency {
            n,
            lateral: [z.clone(), z.clone(), z.clone(), z.clone()],
            pred: vec![z.clone(); dilations],
            succ: vec![z; dilations],
        }
    }

    pub fn bind(&self, t: &mut Tape) -> AdjacencyVars {
        AdjacencyVars {
            n: self.n,
            lateral: self.lateral.iter().map(|m| t.constant(m.clone())).collect(),
            pred: self.pred.iter().map(|m| t.constant(m.clone())).collect(),
            succ: self.succ.iter().map(|m| t.constant(m.clone())).collect(),
        }
    }
}

/// Adjacency matrices recorded on a tape.
#[derive(Debug, Clone)]
pub struct AdjacencyVars {
    pub n: usize,
    lateral: Vec<Var>,
    pred: Vec<Var>,
    succ: Vec<Var>,
}

/// `M W_f + sum_i A_i M W_i + sum_c (P^kc M W_p + S^kc M W_s)`, pre-activation.
#[derive(Debug, Clone)]
pub struct LaneConv {
    pub wf: ParamId,
    pub wi: [ParamId; 4],
    pub wp: ParamId,
    pub ws: ParamId,
}

impl LaneConv {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        let mut w = |s: &str| store.add(format!("{name}.{s}"), &[d, d], Init::KaimingUniform, rng);
        LaneConv {
            wf: w("wf"),
            wi: [w("wr"), w("wl"), w("wm"), w("wo")],
            wp: w("wp"),
            ws: w("ws"),
        }
    }

    pub fn forward(&self, t: &mut Tape, p: &Binding, m: Var, adj: &AdjacencyVars) -> Result<Var> {
        let nl = t.shape(m)[0];
        if adj.n != nl {
            return Err(shape_err("lane_conv", format!("adjacency for {} vectors, features for {nl}", adj.n)));
        }
        let mut out = t.matmul(m, p.var(self.wf))?;
        for (a, w) in adj.lateral.iter().zip(self.wi) {
            let am = t.matmul(*a, m)?;
            let term = t.matmul(am, p.var(w))?;
            out = t.add(out, term)?;
        }
        for (mats, w) in [(&adj.pred, self.wp), (&adj.succ, self.ws)] {
            for a in mats {
                let am = t.matmul(*a, m)?;
                let term = t.matmul(am, p.var(w))?;
                out = t.add(out, term)?;
            }
        }
        Ok(out)
    }
}

/// `ReLU(LN(Linear(ReLU(LN(LaneConv(x))))) + x)`.
#[derive(Debug, Clone)]
pub struct LaneConvBlock {
    conv: LaneConv,
    ln1: LayerNorm,
    lin: Linear,
    ln2: LayerNorm,
}

impl LaneConvBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        LaneConvBlock {
            conv: LaneConv::new(store, &format!("{name}.conv"), d, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, rng),
            lin: Linear::new(store, &format!("{name}.lin"), d, d, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, p: &Binding, x: Var, adj: &AdjacencyVars) -> Result<Var> {
        let h = self.conv.forward(t, p, x, adj)?;
        let h = self.ln1.forward(t, p, h)?;
        let h = t.relu(h);
        let h = self.lin.forward(t, p, h)?;
        let h = self.ln2.forward(t, p, h)?;
        let s = t.add(h, x)?;
        Ok(t.relu(s))
    }
}

fn run_blocks(blocks: &[LaneConvBlock], t: &mut Tape, p: &Binding, mut x: Var, adj: &AdjacencyVars) -> Result<Var> {
    for b in blocks {
        x = b.forward(t, p, x, adj)?;
    }
    Ok(x)
}

/// Static lane encoder: embedding (linear, LN, ReLU) then `Ng` LaneConv blocks.
#[derive(Debug, Clone)]
pub struct LaneEncoder {
    input: Linear,
    ln: LayerNorm,
    blocks: Vec<LaneConvBlock>,
}

impl LaneEncoder {
    pub fn new(store: &mut ParamStore, name: &str, feat: usize, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        LaneEncoder {
            input: Linear::new(store, &format!("{name}.in"), feat, cfg.d_model, rng),
            ln: LayerNorm::new(store, &format!("{name}.in_ln"), cfg.d_model, rng),
            blocks: (0..cfg.ng)
                .map(|i| LaneConvBlock::new(store, &format!("{name}.blk{i}"), cfg.d_model, rng))
                .collect(),
        }
    }

    pub fn embed(&self, t: &mut Tape, p: &Binding, feats: Var) -> Result<Var> {
        let h = self.input.forward(t, p, feats)?;
        let h = self.ln.forward(t, p, h)?;
        Ok(t.relu(h))
    }

    pub fn forward(&self, t: &mut Tape, p: &Binding, feats: Var, adj: &AdjacencyVars) -> Result<Var> {
        let m = self.embed(t, p, feats)?;
        run_blocks(&self.blocks, t, p, m, adj)
    }
}

/// Dynamic lane pass: agents are fused into nearby lane vectors by feature
/// selection, then `Ng` further LaneConv blocks mix the result.
///
/// Lane vectors with no agent in range keep their static features.
#[derive(Debug, Clone)]
pub struct DynamicLaneEncoder {
    fs: Option<FeatureSelection>,
    blocks: Vec<LaneConvBlock>,
}

impl DynamicLaneEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, with_selection: bool, rng: &mut impl Rng) -> Self {
        DynamicLaneEncoder {
            fs: with_selection.then(|| FeatureSelection::new(store, &format!("{name}.fs"), cfg.d_model, rng)),
            blocks: (0..cfg.ng)
                .map(|i| LaneConvBlock::new(store, &format!("{name}.blk{i}"), cfg.d_model, rng))
                .collect(),
        }
    }

    /// Static features with agent context written into the touched rows.
    pub fn fuse(&self, t: &mut Tape, p: &Binding, x_sl: Var, x_a: Var, pairs: &SelectedPairs) -> Result<Var> {
        let Some(fs) = &self.fs else {
            return Ok(x_sl);
        };
        if pairs.is_empty() {
            return Ok(x_sl);
        }
        let (out, _) = fs.forward(t, p, x_sl, x_a, pairs)?;
        let touched = pairs.base_rows();
        let new = t.index_select(out, &touched)?;
        let old = t.index_select(x_sl, &touched)?;
        let delta = t.sub(new, old)?;
        t.index_add(x_sl, &touched, delta)
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        p: &Binding,
        x_sl: Var,
        x_a: Var,
        pairs: &SelectedPairs,
        adj: &AdjacencyVars,
    ) -> Result<Var> {
        let fused = self.fuse(t, p, x_sl, x_a, pairs)?;
        run_blocks(&self.blocks, t, p, fused, adj)
    }
}
