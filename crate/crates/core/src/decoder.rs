//! Multimodal decoder, training losses and evaluation metrics.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::forge::Maneuver;
use crate::fusion::{FeatureSelection, SelectedPairs};
use crate::nn::{LayerNorm, Linear};
use crate::scene::Point;
use crate::tensor::{shape_err, Binding, ParamStore, Result, Tape, Tensor, Var};

pub const N_MANEUVERS: usize = 6;
/// Floor applied inside every log.
pub const LOG_FLOOR: f64 = 1e-12;

/// Lower-triangular block matrix turning flattened `(step, xy)` deltas into
/// positions relative to the anchor.
fn cumsum_matrix(t_fut: usize) -> Tensor {
    let n = 2 * t_fut;
    Tensor::from_fn(n, n, |r, c| f64::from(u8::from(r % 2 == c % 2 && r / 2 <= c / 2)))
}

fn last_step_matrix(t_fut: usize) -> Tensor {
    Tensor::from_fn(2 * t_fut, 2, |r, c| f64::from(u8::from(r == 2 * (t_fut - 1) + c)))
}

/// Per-scene decoder outputs still on the tape.
#[derive(Debug, Clone)]
pub struct DecoderVars {
    /// `[N, 2 t_fut]` per modality, flattened `(step, xy)` deltas.
    pub deltas: Vec<Var>,
    /// Same layout, cumulative positions relative to the anchor.
    pub positions: Vec<Var>,
    /// `[N, K]`, rows sum to one.
    pub probs: Var,
    /// `[N, 6]` maneuver distribution when the head exists.
    pub maneuver: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    res1: Linear,
    res2: Linear,
    res_ln: LayerNorm,
    heads: Vec<Linear>,
    end_emb: Linear,
    prob_fs: FeatureSelection,
    prob_out: Linear,
    maneuver: Option<Linear>,
    t_fut: usize,
    cumsum: Tensor,
    last: Tensor,
}

impl Decoder {
    /// `maneuver_in` is the width of the maneuver head input, `None` to drop the head.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        k: usize,
        t_fut: usize,
        maneuver_in: Option<usize>,
        rng: &mut impl Rng,
    ) -> Self {
        let n = |s: &str| format!("{name}.{s}");
        Decoder {
            res1: Linear::new(store, &n("res1"), d, d, rng),
            res2: Linear::new(store, &n("res2"), d, d, rng),
            res_ln: LayerNorm::new(store, &n("res_ln"), d, rng),
            heads: (0..k)
                .map(|i| Linear::new(store, &n(&format!("head{i}")), d, 2 * t_fut, rng))
                .collect(),
            end_emb: Linear::new(store, &n("end_emb"), 2, d, rng),
            prob_fs: FeatureSelection::new(store, &n("prob_fs"), d, rng),
            prob_out: Linear::new(store, &n("prob_out"), d, 1, rng),
            maneuver: maneuver_in.map(|w| Linear::new(store, &n("maneuver"), w, N_MANEUVERS, rng)),
            t_fut,
            cumsum: cumsum_matrix(t_fut),
            last: last_step_matrix(t_fut),
        }
    }

    pub fn k(&self) -> usize {
        self.heads.len()
    }

    pub fn t_fut(&self) -> usize {
        self.t_fut
    }

    pub fn has_maneuver_head(&self) -> bool {
        self.maneuver.is_some()
    }

    pub fn forward(&self, t: &mut Tape, p: &Binding, x_fuse: Var, maneuver_in: Option<Var>) -> Result<DecoderVars> {
        let n = t.shape(x_fuse)[0];
        let k = self.k();
        let h = self.res1.forward(t, p, x_fuse)?;
        let h = t.relu(h);
        let h = self.res2.forward(t, p, h)?;
        let h = t.add(x_fuse, h)?;
        let h = self.res_ln.forward(t, p, h)?;
        let h = t.relu(h);

        let cs = t.constant(self.cumsum.clone());
        let last = t.constant(self.last.clone());
        let mut deltas = Vec::with_capacity(k);
        let mut positions = Vec::with_capacity(k);
        let mut ends = Vec::with_capacity(k);
        for head in &self.heads {
            let d = head.forward(t, p, h)?;
            let pos = t.matmul(d, cs)?;
            let e = t.matmul(pos, last)?;
            deltas.push(d);
            positions.push(pos);
            ends.push(e);
        }

        // Modality rows are laid out agent-major: row i * K + m.
        let order: Vec<usize> = (0..n * k).map(|r| (r % k) * n + r / k).collect();
        let ends = t.concat(&ends, 0)?;
        let ep = t.index_select(ends, &order)?;
        let ep = t.scale(ep, 1.0 / crate::fusion::DIST_SCALE);
        let epv = t.value(ep).clone();
        let endpoint = |r: usize| Point::new(epv.get(r, 0), epv.get(r, 1)).scale(crate::fusion::DIST_SCALE);
        let mut pairs = Vec::with_capacity(n * k * k);
        for i in 0..n {
            for a in 0..k {
                for b in 0..k {
                    let (ra, rb) = (i * k + a, i * k + b);
                    pairs.push((ra, rb, endpoint(ra).sub(endpoint(rb))));
                }
            }
        }
        let pairs = SelectedPairs {
            pairs,
            threshold: f64::INFINITY,
        };
        let ea = t.index_select(ep, &pairs.base_idx())?;
        let eb = t.index_select(ep, &pairs.ctx_idx())?;
        let disp = t.sub(ea, eb)?;
        let rows: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let base = t.index_select(x_fuse, &rows)?;
        let emb = self.end_emb.forward(t, p, ep)?;
        let base = t.add(base, emb)?;
        let (refined, _) = self.prob_fs.forward_with(t, p, base, base, &pairs, Some(disp))?;
        let logits = self.prob_out.forward(t, p, refined)?;
        let logits = t.reshape(logits, &[n, k])?;
        let probs = t.softmax(logits);

        let maneuver = match (&self.maneuver, maneuver_in) {
            (Some(lin), Some(x)) => {
                let z = lin.forward(t, p, x)?;
                Some(t.softmax(z))
            }
            (Some(_), None) => return Err(shape_err("decode", "maneuver head needs an input")),
            (None, _) => None,
        };
        Ok(DecoderVars {
            deltas,
            positions,
            probs,
            maneuver,
        })
    }
}

/// Plain-value model output for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `[agent][modality][step]` positions relative to the agent anchor.
    pub trajectories: Vec<Vec<Vec<Point>>>,
    /// `[agent][modality]`.
    pub probs: Vec<Vec<f64>>,
    /// `[agent][class]`.
    pub maneuver: Option<Vec<Vec<f64>>>,
    /// `[agent, lane vector]` sigmoid weights.
    pub lane: Option<Tensor>,
}

impl Prediction {
    pub fn from_vars(t: &Tape, d: &DecoderVars, lane: Option<Var>) -> Prediction {
        let probs = t.value(d.probs);
        let n = probs.rows();
        let trajectories = (0..n)
            .map(|i| {
                d.positions
                    .iter()
                    .map(|&v| {
                        t.value(v)
                            .row(i)
                            .chunks(2)
                            .map(|c| Point::new(c[0], c[1]))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Prediction {
            trajectories,
            probs: (0..n).map(|i| probs.row(i).to_vec()).collect(),
            maneuver: d.maneuver.map(|m| {
                let m = t.value(m);
                (0..n).map(|i| m.row(i).to_vec()).collect()
            }),
            lane: lane.map(|w| t.value(w).clone()),
        }
    }

    /// Per-step displacements of one modality.
    pub fn steps(&self, agent: usize, modality: usize) -> Vec<Point> {
        let mut prev = Point::default();
        self.trajectories[agent][modality]
            .iter()
            .map(|&p| {
                let d = p.sub(prev);
                prev = p;
                d
            })
            .collect()
    }

    pub fn best_modes(&self) -> Vec<usize> {
        self.probs.iter().map(|r| argmax(r)).collect()
    }
}

/// Index of the largest entry, ties to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `k*` per row of a `[N, K]` probability tensor.
pub fn best_modes(probs: &Tensor) -> Vec<usize> {
    (0..probs.rows()).map(|i| argmax(probs.row(i))).collect()
}

fn one_hot(rows: usize, cols: usize, hot: &[usize]) -> Tensor {
    Tensor::from_fn(rows, cols, |r, c| f64::from(u8::from(hot[r] == c)))
}

/// Hinge on every non-best modality, averaged over `N (K - 1)`.
pub fn max_margin_loss(t: &mut Tape, probs: Var, kstar: &[usize], margin: f64) -> Result<Var> {
    let (n, k) = (t.shape(probs)[0], t.shape(probs)[1]);
    if k <= 1 || n == 0 {
        return Ok(t.constant(Tensor::scalar(0.0)));
    }
    let hot = one_hot(n, k, kstar);
    let rest = Tensor::from_fn(n, k, |r, c| 1.0 - hot.get(r, c));
    let hot = t.constant(hot);
    let rest = t.constant(rest);
    let sel = t.mul(probs, hot)?;
    let pstar = t.sum_cols(sel);
    let d = t.sub(probs, pstar)?;
    let d = t.add_scalar(d, margin);
    let h = t.relu(d);
    let h = t.mul(h, rest)?;
    let s = t.sum(h);
    Ok(t.scale(s, 1.0 / (n * (k - 1)) as f64))
}

/// `-mean log p*`.
pub fn trajectory_ce_loss(t: &mut Tape, probs: Var, kstar: &[usize]) -> Result<Var> {
    let (n, k) = (t.shape(probs)[0], t.shape(probs)[1]);
    if n == 0 {
        return Ok(t.constant(Tensor::scalar(0.0)));
    }
    let hot = t.constant(one_hot(n, k, kstar));
    let sel = t.mul(probs, hot)?;
    let pstar = t.sum_cols(sel);
    let l = t.log_clamped(pstar, LOG_FLOOR);
    let m = t.mean(l);
    Ok(t.scale(m, -1.0))
}

/// Smooth-L1 between the best modality and the ground truth, averaged over
/// agents with a known future and over steps.
pub fn smooth_l1_loss(
    t: &mut Tape,
    positions: &[Var],
    kstar: &[usize],
    futures: &[Option<Vec<Point>>],
) -> Result<Var> {
    let Some(&first) = positions.first() else {
        return Err(shape_err("smooth_l1_loss", "no modalities"));
    };
    let (n, w) = (t.shape(first)[0], t.shape(first)[1]);
    if futures.len() != n || kstar.len() != n {
        return Err(shape_err(
            "smooth_l1_loss",
            format!("{n} agents, {} futures, {} best modes", futures.len(), kstar.len()),
        ));
    }
    let steps = w / 2;
    let known: Vec<usize> = (0..n).filter(|&i| futures[i].is_some()).collect();
    if known.is_empty() {
        return Ok(t.constant(Tensor::scalar(0.0)));
    }
    let mut gt = Vec::with_capacity(known.len() * w);
    for &i in &known {
        let f = futures[i].as_ref().expect("known");
        if f.len() != steps {
            return Err(shape_err("smooth_l1_loss", format!("future of {} steps, expected {steps}", f.len())));
        }
        gt.extend(f.iter().flat_map(|p| [p.x, p.y]));
    }
    let stack = t.concat(positions, 0)?;
    let rows: Vec<usize> = known.iter().map(|&i| kstar[i] * n + i).collect();
    let sel = t.index_select(stack, &rows)?;
    let gt = t.constant(Tensor::new(vec![known.len(), w], gt)?);
    let e = t.sub(sel, gt)?;
    let e = t.reshape(e, &[known.len() * steps, 2])?;
    let l = t.smooth_l1_rows(e);
    let s = t.sum(l);
    Ok(t.scale(s, 1.0 / (known.len() * steps) as f64))
}

/// Binary cross-entropy over every (agent, lane) cell, divided by `Nl N`.
pub fn lane_bce_loss(t: &mut Tape, weights: Var, labels: &[Vec<bool>]) -> Result<Var> {
    let (n, nl) = (t.shape(weights)[0], t.shape(weights)[1]);
    if labels.len() != n || labels.iter().any(|r| r.len() != nl) {
        return Err(shape_err("lane_bce_loss", format!("labels do not match [{n}, {nl}] weights")));
    }
    if n == 0 || nl == 0 {
        return Ok(t.constant(Tensor::scalar(0.0)));
    }
    let y = Tensor::from_fn(n, nl, |r, c| f64::from(u8::from(labels[r][c])));
    let ny = Tensor::from_fn(n, nl, |r, c| 1.0 - y.get(r, c));
    let y = t.constant(y);
    let ny = t.constant(ny);
    let lw = t.log_clamped(weights, LOG_FLOOR);
    let neg = t.scale(weights, -1.0);
    let one_minus = t.add_scalar(neg, 1.0);
    let lnw = t.log_clamped(one_minus, LOG_FLOOR);
    let a = t.mul(lw, y)?;
    let b = t.mul(lnw, ny)?;
    let s = t.add(a, b)?;
    let s = t.sum(s);
    Ok(t.scale(s, -1.0 / (n * nl) as f64))
}

/// Six-class cross-entropy divided by `N`.
pub fn maneuver_ce_loss(t: &mut Tape, probs: Var, labels: &[Maneuver]) -> Result<Var> {
    let (n, c) = (t.shape(probs)[0], t.shape(probs)[1]);
    if labels.len() != n || c != N_MANEUVERS {
        return Err(shape_err(
            "maneuver_ce_loss",
            format!("{} labels for [{n}, {c}] probabilities", labels.len()),
        ));
    }
    if n == 0 {
        return Ok(t.constant(Tensor::scalar(0.0)));
    }
    let idx: Vec<usize> = labels.iter().map(|m| m.index()).collect();
    let hot = t.constant(one_hot(n, c, &idx));
    let l = t.log_clamped(probs, LOG_FLOOR);
    let l = t.mul(l, hot)?;
    let s = t.sum(l);
    Ok(t.scale(s, -1.0 / n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub margin: f64,
    pub traj: f64,
    pub smooth_l1: f64,
    pub lane: f64,
    pub agent: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            margin: 1.0,
            traj: 1.0,
            smooth_l1: 1.0,
            lane: 1.0,
            agent: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub j_m: f64,
    pub j_traj: f64,
    pub j_s: f64,
    pub j_lane: f64,
    pub j_agent: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [f64; 5] {
        [self.j_m, self.j_traj, self.j_s, self.j_lane, self.j_agent]
    }

    pub fn add_assign(&mut self, o: &LossBreakdown) {
        self.j_m += o.j_m;
        self.j_traj += o.j_traj;
        self.j_s += o.j_s;
        self.j_lane += o.j_lane;
        self.j_agent += o.j_agent;
        self.total += o.total;
    }

    pub fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown {
            j_m: self.j_m * s,
            j_traj: self.j_traj * s,
            j_s: self.j_s * s,
            j_lane: self.j_lane * s,
            j_agent: self.j_agent * s,
            total: self.total * s,
        }
    }
}

/// Supervision for one scene.
#[derive(Debug, Clone, Copy)]
pub struct Targets<'a> {
    pub futures: &'a [Option<Vec<Point>>],
    pub maneuvers: &'a [Maneuver],
    pub lane_labels: &'a [Vec<bool>],
}

/// Which terms contribute; dropped terms report zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub lane: bool,
    pub agent: bool,
}

/// Builds the weighted total on the tape and reports every term.
pub fn total_loss(
    t: &mut Tape,
    out: &DecoderVars,
    lane_weights: Option<Var>,
    targets: Targets<'_>,
    terms: LossTerms,
    margin: f64,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let kstar = best_modes(t.value(out.probs));
    let jm = max_margin_loss(t, out.probs, &kstar, margin)?;
    let jt = trajectory_ce_loss(t, out.probs, &kstar)?;
    let js = smooth_l1_loss(t, &out.positions, &kstar, targets.futures)?;
    let mut parts = vec![(jm, w.margin), (jt, w.traj), (js, w.smooth_l1)];
    let mut jl = None;
    if terms.lane {
        if let Some(lw) = lane_weights {
            let v = lane_bce_loss(t, lw, targets.lane_labels)?;
            parts.push((v, w.lane));
            jl = Some(v);
        }
    }
    let mut ja = None;
    if terms.agent {
        if let Some(m) = out.maneuver {
            let v = maneuver_ce_loss(t, m, targets.maneuvers)?;
            parts.push((v, w.agent));
            ja = Some(v);
        }
    }
    let mut total = None;
    for (v, wt) in parts {
        let v = if wt == 1.0 { v } else { t.scale(v, wt) };
        total = Some(match total {
            None => v,
            Some(acc) => t.add(acc, v)?,
        });
    }
    let total = total.expect("at least three terms");
    let val = |t: &Tape, v: Option<Var>| v.map_or(0.0, |v| t.value(v).item());
    let b = LossBreakdown {
        j_m: t.value(jm).item(),
        j_traj: t.value(jt).item(),
        j_s: t.value(js).item(),
        j_lane: val(t, jl),
        j_agent: val(t, ja),
        total: t.value(total).item(),
    };
    Ok((total, b))
}

/// Precision, recall and F1 for one class (zero when undefined).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

impl ClassStats {
    fn from_counts(tp: usize, fp: usize, fnn: usize) -> ClassStats {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fnn);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        ClassStats {
            precision,
            recall,
            f1,
            support: tp + fnn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub agents_evaluated: usize,
    /// Agents without a ground-truth future.
    pub agents_excluded: usize,
    pub min_ade_1: f64,
    pub min_fde_1: f64,
    pub min_ade_k: f64,
    pub min_fde_k: f64,
    /// Indexed like `Maneuver::ALL`; empty without maneuver outputs.
    pub per_class: Vec<ClassStats>,
    pub yield_stats: Option<ClassStats>,
    pub maneuver_accuracy: Option<f64>,
    pub lane_accuracy: Option<f64>,
    pub lane_case_recall: Option<f64>,
    pub lane_threshold: f64,
}

/// Ground truth paired with a prediction.
#[derive(Debug, Clone, Copy)]
pub struct EvalItem<'a> {
    pub prediction: &'a Prediction,
    pub futures: &'a [Option<Vec<Point>>],
    pub maneuvers: &'a [Maneuver],
    pub lane_labels: &'a [Vec<bool>],
}

fn ade_fde(pred: &[Point], gt: &[Point]) -> (f64, f64) {
    let d: Vec<f64> = pred.iter().zip(gt).map(|(a, b)| a.dist(*b)).collect();
    (d.iter().sum::<f64>() / d.len() as f64, *d.last().unwrap_or(&0.0))
}

pub fn compute_metrics(items: &[EvalItem<'_>], lane_threshold: f64) -> MetricsReport {
    let mut r = MetricsReport {
        lane_threshold,
        ..Default::default()
    };
    let (mut a1, mut f1, mut ak, mut fk) = (0.0, 0.0, 0.0, 0.0);
    let mut confusion = [[0usize; N_MANEUVERS]; N_MANEUVERS];
    let mut have_maneuver = false;
    let (mut cells, mut cells_ok, mut cases, mut cases_hit) = (0usize, 0usize, 0usize, 0usize);
    let mut have_lane = false;
    for it in items {
        let p = it.prediction;
        r.k = r.k.max(p.probs.first().map_or(0, Vec::len));
        for (i, fut) in it.futures.iter().enumerate() {
            let Some(gt) = fut else {
                r.agents_excluded += 1;
                continue;
            };
            r.agents_evaluated += 1;
            let best = argmax(&p.probs[i]);
            let (a, f) = ade_fde(&p.trajectories[i][best], gt);
            a1 += a;
            f1 += f;
            let scores: Vec<(f64, f64)> = p.trajectories[i].iter().map(|tr| ade_fde(tr, gt)).collect();
            ak += scores.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
            fk += scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
        }
        if let Some(m) = &p.maneuver {
            have_maneuver = true;
            for (row, label) in m.iter().zip(it.maneuvers) {
                confusion[label.index()][argmax(row)] += 1;
            }
        }
        if let Some(w) = &p.lane {
            have_lane = true;
            for (i, labels) in it.lane_labels.iter().enumerate() {
                let mut hit = false;
                for (j, &y) in labels.iter().enumerate() {
                    let pred = w.get(i, j) > lane_threshold;
                    cells += 1;
                    cells_ok += usize::from(pred == y);
                    hit |= pred && y;
                }
                if labels.iter().any(|&y| y) {
                    cases += 1;
                    cases_hit += usize::from(hit);
                }
            }
        }
    }
    if r.agents_evaluated > 0 {
        let n = r.agents_evaluated as f64;
        r.min_ade_1 = a1 / n;
        r.min_fde_1 = f1 / n;
        r.min_ade_k = ak / n;
        r.min_fde_k = fk / n;
    }
    if have_maneuver {
        let total: usize = confusion.iter().flatten().sum();
        let diag: usize = (0..N_MANEUVERS).map(|c| confusion[c][c]).sum();
        r.maneuver_accuracy = Some(if total == 0 { 0.0 } else { diag as f64 / total as f64 });
        r.per_class = (0..N_MANEUVERS)
            .map(|c| {
                let tp = confusion[c][c];
                let fp: usize = (0..N_MANEUVERS).filter(|&t| t != c).map(|t| confusion[t][c]).sum();
                let fnn: usize = (0..N_MANEUVERS).filter(|&p| p != c).map(|p| confusion[c][p]).sum();
                ClassStats::from_counts(tp, fp, fnn)
            })
            .collect();
        let is_y = |i: usize| Maneuver::ALL[i].is_yield();
        let (mut tp, mut fp, mut fnn) = (0, 0, 0);
        for (t, row) in confusion.iter().enumerate() {
            for (p, &c) in row.iter().enumerate() {
                match (is_y(t), is_y(p)) {
                    (true, true) => tp += c,
                    (false, true) => fp += c,
                    (true, false) => fnn += c,
                    _ => {}
                }
            }
        }
        r.yield_stats = Some(ClassStats::from_counts(tp, fp, fnn));
    }
    if have_lane {
        r.lane_accuracy = Some(if cells == 0 { 0.0 } else { cells_ok as f64 / cells as f64 });
        r.lane_case_recall = Some(if cases == 0 { 0.0 } else { cases_hit as f64 / cases as f64 });
    }
    r
}

impl MetricsReport {
    /// `metric,value` rows; undefined entries are written empty.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "metric,value")?;
        for (name, v) in self.rows() {
            match v {
                Some(v) => writeln!(w, "{name},{v}")?,
                None => writeln!(w, "{name},")?,
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> Vec<(String, Option<f64>)> {
        let mut rows = vec![
            ("agents_evaluated".to_string(), Some(self.agents_evaluated as f64)),
            ("agents_excluded".to_string(), Some(self.agents_excluded as f64)),
            ("min_ade_k1".to_string(), Some(self.min_ade_1)),
            ("min_fde_k1".to_string(), Some(self.min_fde_1)),
            (format!("min_ade_k{}", self.k), Some(self.min_ade_k)),
            (format!("min_fde_k{}", self.k), Some(self.min_fde_k)),
            ("maneuver_accuracy".to_string(), self.maneuver_accuracy),
        ];
        let mut push = |name: &str, s: Option<ClassStats>| {
            rows.push((format!("{name}_precision"), s.map(|s| s.precision)));
            rows.push((format!("{name}_recall"), s.map(|s| s.recall)));
            rows.push((format!("{name}_f1"), s.map(|s| s.f1)));
        };
        for (i, m) in Maneuver::ALL.iter().enumerate() {
            push(m.symbol(), self.per_class.get(i).copied());
        }
        push("yield", self.yield_stats);
        rows.push(("lane_accuracy".to_string(), self.lane_accuracy));
        rows.push(("lane_case_recall".to_string(), self.lane_case_recall));
        rows
    }

    pub fn summary(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let mut s = format!(
            "agents: {} evaluated, {} without future\n\
             minADE  K=1 {:.4}  K={} {:.4}\n\
             minFDE  K=1 {:.4}  K={} {:.4}\n\
             maneuver accuracy {}\n",
            self.agents_evaluated,
            self.agents_excluded,
            self.min_ade_1,
            self.k,
            self.min_ade_k,
            self.min_fde_1,
            self.k,
            self.min_fde_k,
            opt(self.maneuver_accuracy),
        );
        if let Some(y) = self.yield_stats {
            s += &format!("yield P/R/F1 {:.4} / {:.4} / {:.4}\n", y.precision, y.recall, y.f1);
        }
        s += &format!(
            "lane accuracy {}  case recall {} (threshold {})\n",
            opt(self.lane_accuracy),
            opt(self.lane_case_recall),
            self.lane_threshold
        );
        s
    }
}
