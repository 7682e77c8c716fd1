//! Optimizer, training loop, evaluation and the experiment drivers.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::{compute_metrics, EvalItem, LossBreakdown, MetricsReport, Prediction};
use crate::error::{HtError, HtResult};
use crate::features::SceneInputs;
use crate::forge::{inject_noise, load_scenarios, NoiseMode, NoiseSpec, Scenario};
use crate::fusion::write_lane_attention_csv;
use crate::model::{Ablation, HtModel, ModelConfig};
use crate::tensor::{ParamStore, Tensor};

/// Adam with bias correction. Steps with a non-finite gradient are skipped.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub skipped: usize,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
            skipped: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Returns false when the step was skipped.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> HtResult<bool> {
        if grads.len() != self.m.len() || grads.iter().zip(&self.m).any(|(g, m)| g.len() != m.len()) {
            return Err(HtError::Config("gradient shapes do not match the optimizer state".into()));
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            self.skipped += 1;
            log::warn!("non-finite gradient, skipping step ({} skipped)", self.skipped);
            return Ok(false);
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (pi, id) in ids.into_iter().enumerate() {
            let data = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[pi], &mut self.v[pi]);
            for (j, &g) in grads[pi].iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / b1t;
                let vh = v[j] / b2t;
                data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub batch_size: usize,
    /// Optimizer steps.
    pub steps: usize,
    pub seed: u64,
    /// Lane weight threshold for the lane metrics.
    pub lane_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr: 1e-3,
            batch_size: 8,
            steps: 2000,
            seed: 0,
            lane_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> HtResult<()> {
        self.model.validate()?;
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(HtError::Config(format!(
                "learning rate {} and batch size {} must be positive",
                self.lr, self.batch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.lane_threshold) {
            return Err(HtError::Config(format!("lane threshold {} outside [0, 1]", self.lane_threshold)));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> HtResult<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| HtError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: LossBreakdown,
}

pub const LOG_HEADER: &str = "step,j_m,j_traj,j_s,j_lane,j_agent,total";

impl LogRow {
    pub fn csv(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{}",
            self.step, l.j_m, l.j_traj, l.j_s, l.j_lane, l.j_agent, l.total
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: HtModel,
    pub log: Vec<LogRow>,
    pub skipped_steps: usize,
    /// Step at which the loss became non-finite; the model is the last good one.
    pub diverged_at: Option<usize>,
}

/// Mean loss and gradient over a batch of scenes.
pub fn batch_gradients(model: &HtModel, batch: &[&SceneInputs]) -> HtResult<(LossBreakdown, Vec<Vec<f64>>)> {
    let mut acc: Option<Vec<Vec<f64>>> = None;
    let mut loss = LossBreakdown::default();
    for x in batch {
        let (b, g) = model.loss_and_grads(x)?;
        loss.add_assign(&b);
        match &mut acc {
            None => acc = Some(g),
            Some(a) => {
                for (ai, gi) in a.iter_mut().zip(&g) {
                    for (x, y) in ai.iter_mut().zip(gi) {
                        *x += y;
                    }
                }
            }
        }
    }
    let s = 1.0 / batch.len() as f64;
    let mut g = acc.ok_or_else(|| HtError::Config("empty batch".into()))?;
    g.iter_mut().flatten().for_each(|x| *x *= s);
    Ok((loss.scaled(s), g))
}

/// Trains on `data`, writing one CSV log line per step to `log` when given.
pub fn train(data: &[Scenario], cfg: &TrainConfig, mut log: Option<&mut dyn Write>) -> HtResult<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(HtError::Config("empty training set".into()));
    }
    let mut model = HtModel::new(cfg.model.clone(), cfg.seed)?;
    let inputs: Vec<SceneInputs> = data.iter().map(|s| model.inputs(s)).collect::<HtResult<_>>()?;
    let mut opt = Adam::new(&model.store, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = Vec::new();
    let mut rows = Vec::with_capacity(cfg.steps);
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{LOG_HEADER}")?;
    }
    let bs = cfg.batch_size.min(inputs.len());
    for step in 0..cfg.steps {
        if order.len() < bs {
            let mut epoch: Vec<usize> = (0..inputs.len()).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        let batch: Vec<&SceneInputs> = order.drain(..bs).map(|i| &inputs[i]).collect();
        let (loss, grads) = batch_gradients(&model, &batch)?;
        if !loss.total.is_finite() {
            log::error!("loss became {} at step {step}; keeping the last good parameters", loss.total);
            return Ok(TrainOutcome {
                model,
                log: rows,
                skipped_steps: opt.skipped,
                diverged_at: Some(step),
            });
        }
        opt.step(&mut model.store, &grads)?;
        let row = LogRow { step, loss };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", row.csv())?;
        }
        if step % 100 == 0 {
            log::info!("step {step}: J = {:.5}", loss.total);
        }
        rows.push(row);
    }
    Ok(TrainOutcome {
        model,
        log: rows,
        skipped_steps: opt.skipped,
        diverged_at: None,
    })
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    pub loss: LossBreakdown,
    pub predictions: Vec<Prediction>,
}

pub fn evaluate(model: &HtModel, data: &[Scenario], lane_threshold: f64) -> HtResult<Evaluation> {
    let inputs: Vec<SceneInputs> = data.iter().map(|s| model.inputs(s)).collect::<HtResult<_>>()?;
    let mut loss = LossBreakdown::default();
    let mut predictions = Vec::with_capacity(inputs.len());
    for x in &inputs {
        let (p, b) = model.evaluate_scene(x)?;
        loss.add_assign(&b);
        predictions.push(p);
    }
    let items: Vec<EvalItem> = predictions
        .iter()
        .zip(&inputs)
        .map(|(p, x)| EvalItem {
            prediction: p,
            futures: &x.futures,
            maneuvers: &x.maneuvers,
            lane_labels: &x.lane_labels,
        })
        .collect();
    let metrics = compute_metrics(&items, lane_threshold);
    Ok(Evaluation {
        metrics,
        loss: loss.scaled(1.0 / inputs.len().max(1) as f64),
        predictions,
    })
}

pub fn sha256_file(path: &Path) -> HtResult<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataFile {
    pub path: PathBuf,
    pub sha256: String,
}

impl DataFile {
    pub fn new(path: &Path) -> HtResult<Self> {
        Ok(DataFile {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }

    pub fn verify(&self) -> HtResult<()> {
        let h = sha256_file(&self.path)?;
        if h != self.sha256 {
            return Err(HtError::Config(format!(
                "{} changed: hash {h}, manifest says {}",
                self.path.display(),
                self.sha256
            )));
        }
        Ok(())
    }
}

/// Everything needed to repeat a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub seed: u64,
    pub train_data: DataFile,
    /// Evaluated after training; the training set when absent.
    pub eval_data: Option<DataFile>,
    pub outputs: Vec<PathBuf>,
}

pub const CHECKPOINT_FILE: &str = "model.htckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LOG_FILE: &str = "train_log.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn new(config: TrainConfig, train_data: &Path, eval_data: Option<&Path>) -> HtResult<Self> {
        Ok(RunManifest {
            seed: config.seed,
            config,
            train_data: DataFile::new(train_data)?,
            eval_data: eval_data.map(DataFile::new).transpose()?,
            outputs: Vec::new(),
        })
    }

    pub fn load(path: &Path) -> HtResult<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> HtResult<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Trains, evaluates and writes the checkpoint, log, metrics and the
    /// manifest itself into `out`.
    pub fn run(&self, out: &Path) -> HtResult<(RunManifest, Evaluation)> {
        self.train_data.verify()?;
        if let Some(e) = &self.eval_data {
            e.verify()?;
        }
        let mut cfg = self.config.clone();
        cfg.seed = self.seed;
        std::fs::create_dir_all(out)?;
        let train_set = load_scenarios(&self.train_data.path)?;
        let eval_set = match &self.eval_data {
            Some(e) => load_scenarios(&e.path)?,
            None => train_set.clone(),
        };
        let mut log = std::io::BufWriter::new(std::fs::File::create(out.join(LOG_FILE))?);
        let outcome = train(&train_set, &cfg, Some(&mut log))?;
        log.flush()?;
        outcome.model.save(&out.join(CHECKPOINT_FILE))?;
        if let Some(step) = outcome.diverged_at {
            return Err(HtError::Diverged {
                step,
                loss: f64::NAN,
            });
        }
        let ev = evaluate(&outcome.model, &eval_set, cfg.lane_threshold)?;
        let mut csv = Vec::new();
        ev.metrics.write_csv(&mut csv)?;
        std::fs::write(out.join(METRICS_FILE), csv)?;
        let mut done = self.clone();
        done.outputs = [CHECKPOINT_FILE, LOG_FILE, METRICS_FILE]
            .iter()
            .map(|f| out.join(f))
            .collect();
        done.save(&out.join(MANIFEST_FILE))?;
        Ok((done, ev))
    }
}

pub const NOISE_LEVELS: [f64; 5] = [0.0, 0.01, 0.03, 0.05, 0.08];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseCell {
    pub model: String,
    pub mode: NoiseMode,
    pub p: f64,
    pub trials: usize,
    pub ade_mean: f64,
    pub ade_var: f64,
    pub fde_mean: f64,
    pub fde_var: f64,
    /// Change of the mean minFDE against the noiseless row.
    pub fde_increment: f64,
    pub fde_increment_ratio: f64,
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var)
}

fn noise_seed(base: u64, trial: usize, scene: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((trial as u64) << 32) ^ scene as u64
}

/// minADE/minFDE over `K` modalities for every model and noise level. Each
/// trial draws fresh noise; all models see the same noisy scenes.
pub fn noise_sweep(
    models: &[(&str, &HtModel)],
    data: &[Scenario],
    levels: &[f64],
    mode: NoiseMode,
    trials: usize,
    seed: u64,
) -> HtResult<Vec<NoiseCell>> {
    if trials == 0 || levels.is_empty() {
        return Err(HtError::Config("noise sweep needs at least one trial and level".into()));
    }
    let mut cells = Vec::new();
    for &(name, model) in models {
        let mut base_fde = None;
        for &p in levels {
            let spec = NoiseSpec::new(mode, p)?;
            let n_trials = if p == 0.0 { 1 } else { trials };
            let mut ades = Vec::with_capacity(n_trials);
            let mut fdes = Vec::with_capacity(n_trials);
            for trial in 0..n_trials {
                let noisy: Vec<Scenario> = data
                    .iter()
                    .enumerate()
                    .map(|(i, s)| inject_noise(s, spec, noise_seed(seed, trial, i)))
                    .collect::<Result<_, _>>()?;
                let ev = evaluate(model, &noisy, 0.5)?;
                ades.push(ev.metrics.min_ade_k);
                fdes.push(ev.metrics.min_fde_k);
            }
            let (ade_mean, ade_var) = mean_var(&ades);
            let (fde_mean, fde_var) = mean_var(&fdes);
            let base = *base_fde.get_or_insert(fde_mean);
            cells.push(NoiseCell {
                model: name.to_string(),
                mode,
                p,
                trials: n_trials,
                ade_mean,
                ade_var,
                fde_mean,
                fde_var,
                fde_increment: fde_mean - base,
                fde_increment_ratio: if base > 0.0 { (fde_mean - base) / base } else { 0.0 },
            });
        }
    }
    Ok(cells)
}

pub fn write_noise_csv<W: Write>(w: &mut W, cells: &[NoiseCell]) -> std::io::Result<()> {
    writeln!(
        w,
        "model,mode,p,trials,min_ade_mean,min_ade_var,min_fde_mean,min_fde_var,min_fde_increment,min_fde_increment_ratio"
    )?;
    for c in cells {
        let mode = match c.mode {
            NoiseMode::Loss => "loss",
            NoiseMode::Gaussian => "gaussian",
        };
        writeln!(
            w,
            "{},{mode},{},{},{},{},{},{},{},{}",
            c.model, c.p, c.trials, c.ade_mean, c.ade_var, c.fde_mean, c.fde_var, c.fde_increment, c.fde_increment_ratio
        )?;
    }
    Ok(())
}

/// Spearman rank correlation, average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, _) = mean_var(&rx);
    let (my, _) = mean_var(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
    let sy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
    if sx == 0.0 || sy == 0.0 {
        0.0
    } else {
        cov / (sx * sy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Ablation,
    pub params: usize,
    pub metrics: MetricsReport,
}

/// Trains every ablation variant from `base` and evaluates it on `eval`.
pub fn ablate(train_set: &[Scenario], eval_set: &[Scenario], base: &TrainConfig) -> HtResult<Vec<AblationRow>> {
    Ablation::ALL
        .iter()
        .map(|&variant| {
            let mut cfg = base.clone();
            cfg.model.ablation = variant;
            log::info!("ablation {variant}");
            let out = train(train_set, &cfg, None)?;
            let ev = evaluate(&out.model, eval_set, cfg.lane_threshold)?;
            Ok(AblationRow {
                variant,
                params: out.model.num_params(),
                metrics: ev.metrics,
            })
        })
        .collect()
}

pub fn write_ablation_csv<W: Write>(w: &mut W, rows: &[AblationRow]) -> std::io::Result<()> {
    let k = rows.first().map_or(6, |r| r.metrics.k);
    writeln!(w, "variant,params,min_ade_k1,min_fde_k1,min_ade_k{k},min_fde_k{k}")?;
    for r in rows {
        let m = &r.metrics;
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.variant, r.params, m.min_ade_1, m.min_fde_1, m.min_ade_k, m.min_fde_k
        )?;
    }
    Ok(())
}

/// Red at the largest weight, blue at the smallest.
pub fn weight_color(w: f64, lo: f64, hi: f64) -> String {
    let s = if hi > lo { ((w - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    format!("rgb({},0,{})", (255.0 * s).round() as u8, (255.0 * (1.0 - s)).round() as u8)
}

#[derive(Debug, Clone)]
pub struct AttentionExport {
    pub csv: String,
    pub svg: String,
    pub weights: Tensor,
}

/// Lane attention of one scenario as CSV, plus an SVG of the weights of
/// agent `focus` over the map with histories and predictions.
pub fn export_attention(model: &HtModel, sc: &Scenario, focus: usize) -> HtResult<AttentionExport> {
    let x = model.inputs(sc)?;
    if focus >= x.n_agents() {
        return Err(HtError::Config(format!("agent {focus} out of {}", x.n_agents())));
    }
    let weights = model
        .lane_weights(&x)?
        .ok_or_else(|| HtError::Config("scenario has no lane vectors".into()))?;
    let pred = model.predict(&x)?;
    let local = sc.to_local_frame();
    let mut csv = Vec::new();
    write_lane_attention_csv(&mut csv, &x.agent_ids, &local.graph, &weights)?;
    let svg = render_svg(&local, &pred, &weights, focus);
    Ok(AttentionExport {
        csv: String::from_utf8(csv).expect("ascii"),
        svg,
        weights,
    })
}

fn render_svg(sc: &Scenario, pred: &Prediction, weights: &Tensor, focus: usize) -> String {
    let mut pts: Vec<crate::scene::Point> = sc.graph.vectors.iter().flat_map(|v| [v.start(), v.end()]).collect();
    for a in &sc.agents {
        pts.extend(a.history_positions());
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in &pts {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let pad = 10.0;
    let (w, h) = (x1 - x0 + 2.0 * pad, y1 - y0 + 2.0 * pad);
    let sx = |x: f64| x - x0 + pad;
    let sy = |y: f64| y1 - y + pad;
    let row = weights.row(focus);
    let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w:.2} {h:.2}" width="{:.0}" height="{:.0}">"#,
        w * 6.0,
        h * 6.0
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (j, v) in sc.graph.vectors.iter().enumerate() {
        let (a, b) = (v.start(), v.end());
        let _ = writeln!(
            s,
            r#"<line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}" stroke="{}" stroke-width="0.8"><title>lane vector {j}: {:.4}</title></line>"#,
            sx(a.x),
            sy(a.y),
            sx(b.x),
            sy(b.y),
            weight_color(row[j], lo, hi),
            row[j]
        );
    }
    let poly = |s: &mut String, p: &[crate::scene::Point], style: &str| {
        let coords: Vec<String> = p.iter().map(|q| format!("{:.3},{:.3}", sx(q.x), sy(q.y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" {style}/>"#, coords.join(" "));
    };
    let best = pred.best_modes();
    for (i, a) in sc.agents.iter().enumerate() {
        let emph = i == focus;
        poly(&mut s, &a.history_positions(), r#"stroke="gray" stroke-width="0.4""#);
        if let Some(f) = &a.future {
            let mut f2 = vec![a.anchor];
            f2.extend(f);
            poly(&mut s, &f2, r#"stroke="green" stroke-width="0.4" stroke-dasharray="1,1""#);
        }
        for (k, tr) in pred.trajectories[i].iter().enumerate() {
            let mut abs = vec![a.anchor];
            abs.extend(tr.iter().map(|p| p.add(a.anchor)));
            let style = if k == best[i] {
                r#"stroke="black" stroke-width="0.5""#
            } else {
                r#"stroke="black" stroke-opacity="0.25" stroke-width="0.3""#
            };
            poly(&mut s, &abs, style);
        }
        let _ = writeln!(
            s,
            r#"<circle cx="{:.3}" cy="{:.3}" r="{}" fill="{}"><title>agent {}</title></circle>"#,
            sx(a.anchor.x),
            sy(a.anchor.y),
            if emph { 1.4 } else { 1.0 },
            if emph { "orange" } else { "black" },
            a.agent_id
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::forge::{generate_scenario, MapKind};
    use crate::tensor::Init;

    fn scalar_store(v: f64) -> (ParamStore, crate::tensor::ParamId) {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let id = s.add("theta", &[1, 1], Init::Zeros, &mut rng);
        s.get_mut(id).data_mut()[0] = v;
        (s, id)
    }

    #[test]
    fn adam_examples() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = Adam::new(&s, 1e-3);
        opt.step(&mut s, &[vec![0.0]]).unwrap();
        assert_eq!(s.get(id).item(), 1.0);
        let (mut s, id) = scalar_store(1.0);
        let mut opt = Adam::new(&s, 1e-3);
        opt.step(&mut s, &[vec![1.0]]).unwrap();
        assert!((s.get(id).item() - (1.0 - 1e-3)).abs() < 1e-9);
        assert!(!opt.step(&mut s, &[vec![f64::NAN]]).unwrap());
        assert_eq!(opt.skipped, 1);
        assert!(opt.step(&mut s, &[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn adam_descends_a_parabola() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = Adam::new(&s, 0.01);
        let mut prev = 1.0f64;
        for i in 0..100 {
            let th = s.get(id).item();
            opt.step(&mut s, &[vec![2.0 * th]]).unwrap();
            let now = s.get(id).item().abs();
            if i >= 5 {
                assert!(now < prev, "step {i}: {now} >= {prev}");
            }
            prev = now;
        }
        assert!(prev < 0.5);
    }

    fn tiny() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                encoder: EncoderConfig {
                    d_model: 8,
                    heads: 2,
                    nx: 1,
                    ng: 1,
                    ..EncoderConfig::default()
                },
                k: 2,
                na: 1,
                ..ModelConfig::default()
            },
            batch_size: 2,
            steps: 6,
            ..TrainConfig::default()
        }
    }

    fn data() -> Vec<Scenario> {
        (0..3).map(|s| generate_scenario(MapKind::Straight, 3, s).unwrap()).collect()
    }

    #[test]
    fn training_is_deterministic_and_descends() {
        let d = data();
        let mut cfg = tiny();
        cfg.steps = 40;
        cfg.lr = 3e-3;
        let a = train(&d, &cfg, None).unwrap();
        let b = train(&d, &cfg, None).unwrap();
        assert_eq!(a.log, b.log);
        let first: f64 = a.log[..3].iter().map(|r| r.loss.total).sum();
        let last: f64 = a.log[37..].iter().map(|r| r.loss.total).sum();
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn no_decision_trains_three_terms() {
        let mut cfg = tiny();
        cfg.model.ablation = Ablation::NoDecision;
        let out = train(&data(), &cfg, None).unwrap();
        for r in &out.log {
            assert_eq!((r.loss.j_lane, r.loss.j_agent), (0.0, 0.0));
            assert!((r.loss.j_m + r.loss.j_traj + r.loss.j_s - r.loss.total).abs() < 1e-12);
        }
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = tiny();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = TrainConfig::from_toml("lr = 0.01\n[model]\nk = 3\n").unwrap();
        assert_eq!((partial.lr, partial.model.k, partial.batch_size), (0.01, 3, 8));
        assert!(TrainConfig::from_toml("lr = -1.0").is_err());
        assert!(TrainConfig::from_toml("bogus = [").is_err());
    }

    #[test]
    fn noise_sweep_zero_row_is_baseline() {
        let d = data();
        let m = HtModel::new(tiny().model, 3).unwrap();
        let cells = noise_sweep(&[("m", &m)], &d, &[0.0, 0.05], NoiseMode::Gaussian, 2, 1).unwrap();
        let base = evaluate(&m, &d, 0.5).unwrap().metrics;
        assert_eq!(cells[0].fde_mean, base.min_fde_k);
        assert_eq!(cells[0].fde_increment, 0.0);
        assert_eq!(cells[1].trials, 2);
        let mut csv = Vec::new();
        write_noise_csv(&mut csv, &cells).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 3);
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_export_cardinality_and_colors() {
        let sc = generate_scenario(MapKind::LaneChange, 3, 5).unwrap();
        let m = HtModel::new(tiny().model, 1).unwrap();
        let ex = export_attention(&m, &sc, 0).unwrap();
        assert_eq!(ex.csv.lines().count(), 1 + 3 * sc.graph.len());
        assert!(ex.weights.data().iter().all(|&w| w > 0.0 && w < 1.0));
        assert!(ex.svg.contains("rgb(255,0,0)") && ex.svg.contains("rgb(0,0,255)"));
        assert!(export_attention(&m, &sc, 3).is_err());
    }

    #[test]
    fn manifest_runs_reproduce() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        crate::forge::save_scenarios(&path, &data()).unwrap();
        let man = RunManifest::new(tiny(), &path, None).unwrap();
        let (done, _) = man.run(&dir.path().join("a")).unwrap();
        man.run(&dir.path().join("b")).unwrap();
        let a = std::fs::read(dir.path().join("a").join(METRICS_FILE)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(METRICS_FILE)).unwrap();
        assert_eq!(a, b);
        assert_eq!(done.outputs.len(), 3);
        let back = RunManifest::load(&dir.path().join("a").join(MANIFEST_FILE)).unwrap();
        assert_eq!(back, done);
        // Reloaded checkpoint evaluates identically.
        let m = HtModel::load(&dir.path().join("a").join(CHECKPOINT_FILE)).unwrap();
        let ev = evaluate(&m, &data(), 0.5).unwrap();
        let mut csv = Vec::new();
        ev.metrics.write_csv(&mut csv).unwrap();
        assert_eq!(csv, a);
        std::fs::write(&path, "tampered").unwrap();
        assert!(man.run(&dir.path().join("c")).is_err());
    }
}
