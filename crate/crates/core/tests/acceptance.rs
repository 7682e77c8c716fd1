//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Run a subset with `cargo test --test acceptance -- 2 3 9`.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ht_core::checks;
use ht_core::decoder::{maneuver_ce_loss, max_margin_loss, smooth_l1_loss};
use ht_core::encoder::EncoderConfig;
use ht_core::features::SceneInputs;
use ht_core::forge::{generate_scenario, map_polylines, save_scenarios, Maneuver, MapKind, NoiseMode, Scenario};
use ht_core::model::{Ablation, ModelConfig};
use ht_core::scene::{build_lane_graph, wrap_angle, LaneGraph, Point, Relation, RigidTransform};
use ht_core::tensor::{Tape, Tensor};
use ht_core::train::{evaluate, noise_sweep, spearman, train, RunManifest, TrainConfig, NOISE_LEVELS, METRICS_FILE};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn c1_sparse_full() -> Outcome {
    let r = checks::sparse_full_equivalence(100, 20, 128, 11);
    outcome(r.ok(), format!("{}/{} inputs, max abs diff {:.2e}", r.passed, r.total, r.worst))
}

fn c2_kl() -> Outcome {
    let reps = checks::kl_suite(1000, 12);
    let pass = reps.iter().all(|r| r.ok());
    let detail: Vec<String> = reps.iter().map(|r| format!("{} {}/{}", r.name, r.passed, r.total)).collect();
    outcome(pass, detail.join("; "))
}

fn c3_entropy() -> Outcome {
    let reps = checks::entropy_suite(1000, 13);
    let pass = reps.iter().all(|r| r.ok());
    let detail: Vec<String> = reps
        .iter()
        .map(|r| format!("{} {}/{} (max H - ln L = {:.1e})", r.name, r.passed, r.total, r.worst))
        .collect();
    outcome(pass, detail.join("; "))
}

fn c4_gradients() -> Outcome {
    match checks::gradient_suite(100, 1e-5, 14) {
        Ok(reps) => {
            let pass = reps.iter().all(|(_, r)| r.passes(1e-3));
            let worst = reps
                .iter()
                .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
                .map(|(n, r)| format!("worst {n} {:.2e}", r.max_rel_error))
                .unwrap_or_default();
            outcome(pass, format!("{} checks, {worst}", reps.len()))
        }
        Err(e) => outcome(false, format!("error: {e}")),
    }
}

fn mixed_set(n: usize, agents: usize, seed0: u64) -> Vec<Scenario> {
    (0..n)
        .map(|i| generate_scenario(MapKind::ALL[i % 5], agents, seed0 + i as u64).expect("generator"))
        .collect()
}

fn c5_overfit() -> Outcome {
    let data = mixed_set(32, 5, 0);
    let cfg = TrainConfig {
        model: ModelConfig {
            encoder: EncoderConfig {
                d_model: 32,
                heads: 4,
                ..EncoderConfig::default()
            },
            ..ModelConfig::default()
        },
        lr: 1e-3,
        batch_size: 16,
        steps: 2000,
        seed: 0,
        ..TrainConfig::default()
    };
    let out = match train(&data, &cfg, None) {
        Ok(o) => o,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let ev = evaluate(&out.model, &data, cfg.lane_threshold).expect("evaluation");
    let ade = ev.metrics.min_ade_k;
    let acc = ev.metrics.maneuver_accuracy.unwrap_or(0.0);
    let first = out.log.first().map(|r| r.loss.total).unwrap_or(f64::NAN);
    let last = ev.loss.total;
    outcome(
        ade <= 0.5 && acc >= 0.9 && last < first && out.diverged_at.is_none(),
        format!("minADE(K=6) {ade:.3} m, maneuver accuracy {acc:.3}, J {first:.3} -> {last:.3}"),
    )
}

fn c6_noise() -> Outcome {
    let train_set = mixed_set(64, 5, 1000);
    let eval_set = mixed_set(40, 5, 5000);
    let mut wins = 0;
    let mut monotone = true;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let mut ratios = Vec::new();
        for ablation in [Ablation::Full, Ablation::VanillaAttention] {
            let cfg = TrainConfig {
                model: ModelConfig {
                    encoder: EncoderConfig {
                        d_model: 16,
                        heads: 2,
                        ..EncoderConfig::default()
                    },
                    ablation,
                    ..ModelConfig::default()
                },
                steps: 1500,
                seed,
                ..TrainConfig::default()
            };
            let model = match train(&train_set, &cfg, None) {
                Ok(o) => o.model,
                Err(e) => return outcome(false, format!("training failed: {e}")),
            };
            let cells = noise_sweep(&[("m", &model)], &eval_set, &NOISE_LEVELS, NoiseMode::Gaussian, 5, 77 + seed)
                .expect("noise sweep");
            let fde: Vec<f64> = cells.iter().map(|c| c.fde_mean).collect();
            let rho = spearman(&NOISE_LEVELS, &fde);
            monotone &= rho >= 0.8;
            let ratio = cells.last().expect("levels").fde_increment_ratio;
            lines.push(format!("seed {seed} {}: ratio {ratio:.4} rho {rho:.2}", ablation.name()));
            ratios.push(ratio);
        }
        if ratios[0] <= ratios[1] {
            wins += 1;
        }
    }
    outcome(
        wins >= 2 && monotone,
        format!("sparse <= vanilla in {wins}/3 seeds; {}", lines.join("; ")),
    )
}

/// Independent restatement of the six label rules: every predicate is
/// evaluated, then the lowest priority number among the true ones wins.
fn brute_force_label(sc: &Scenario, i: usize) -> Maneuver {
    let a = &sc.agents[i];
    let perceived = a.history.iter().filter(|h| h.flag).count();
    if perceived < 5 {
        return Maneuver::U;
    }
    let track_of = |j: usize| {
        let mut v = vec![sc.agents[j].anchor];
        if let Some(f) = &sc.agents[j].future {
            v.extend(f.iter().copied());
        }
        v
    };
    let track = track_of(i);
    let moving = |k: usize| track[k + 1].dist(track[k]) > 0.05;
    let dir = |k: usize| {
        let d = track[k + 1].sub(track[k]);
        d.y.atan2(d.x)
    };
    let last_motion = a
        .history
        .iter()
        .rev()
        .find(|s| s.flag && (s.dx != 0.0 || s.dy != 0.0))
        .map(|s| s.dy.atan2(s.dx));
    let h0 = last_motion
        .or_else(|| (0..track.len() - 1).find(|&k| moving(k)).map(dir))
        .unwrap_or(0.0);
    let heading_at = |t: usize| (0..t).rev().find(|&k| moving(k)).map(dir).unwrap_or(h0);
    let in_corridor = |from: Point, h: f64, to: Point, reach: f64| {
        let (dx, dy) = (to.x - from.x, to.y - from.y);
        let lon = dx * h.cos() + dy * h.sin();
        let lat = dy * h.cos() - dx * h.sin();
        lon > 0.0 && lon <= reach && lat.abs() <= 2.0
    };
    let has_future = track.len() > 1;
    let mut yield_cause = false;
    for j in (0..sc.agents.len()).filter(|&j| j != i) {
        let other = track_of(j);
        for t in 0..track.len().min(other.len()) {
            yield_cause |= in_corridor(track[t], heading_at(t), other[t], 15.0);
        }
    }
    yield_cause &= has_future;
    let steps = (track.len() - 1).max(1) as f64;
    let dist: f64 = track.windows(2).map(|w| w[0].dist(w[1])).sum();
    let stop = dist * 10.0 / steps < 0.5;
    let turned = (0..track.len()).any(|t| wrap_angle(heading_at(t) - h0).abs() > 15f64.to_radians());
    let g = &sc.graph;
    let left_lane = {
        let start = (0..g.len()).min_by(|&x, &y| {
            g.vectors[x]
                .distance_to(track[0])
                .total_cmp(&g.vectors[y].distance_to(track[0]))
        });
        match start {
            None => false,
            Some(s) => {
                let mut own = reachable(&g.succ[0], s);
                own.extend(reachable(&g.pred[0], s));
                track[1..].iter().any(|p| {
                    let on_map = g.vectors.iter().any(|v| v.distance_to(*p) <= 1.75);
                    let in_own = own.iter().any(|&v| g.vectors[v].distance_to(*p) <= 1.75);
                    on_map && !in_own
                })
            }
        }
    };
    let decel = has_future && {
        let n = track.len();
        let v_end = track[n - 1].dist(track[n - 2]) * 10.0;
        (v_end - a.current_speed(10.0)) / (steps / 10.0) < -0.5
    };
    let lead = sc.agents.iter().enumerate().any(|(j, o)| {
        j != i
            && o.heading().is_some_and(|h| wrap_angle(h - h0).abs() <= 10f64.to_radians())
            && in_corridor(a.anchor, h0, o.anchor, 30.0)
    });
    let rules = [
        (Maneuver::S, yield_cause && stop),
        (Maneuver::N, yield_cause && (turned || left_lane)),
        (Maneuver::D, yield_cause && decel),
        (Maneuver::F, lead),
        (Maneuver::I, true),
    ];
    rules.iter().find(|r| r.1).map(|r| r.0).unwrap_or(Maneuver::I)
}

fn reachable(one: &BTreeSet<(usize, usize)>, start: usize) -> BTreeSet<usize> {
    let mut r: BTreeSet<usize> = [start].into();
    loop {
        let add: Vec<usize> = one
            .iter()
            .filter(|(s, t)| r.contains(s) && !r.contains(t))
            .map(|p| p.1)
            .collect();
        if add.is_empty() {
            return r;
        }
        r.extend(add);
    }
}

fn c7_labeler() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut agents, mut matched) = (0, 0);
    let mut first_miss = None;
    for n in 0..500 {
        let kind = MapKind::ALL[rng.random_range(0..5)];
        let n_agents = rng.random_range(2..=kind.capacity().min(8));
        let seed = rng.random::<u64>();
        let sc = generate_scenario(kind, n_agents, seed).expect("generator");
        for i in 0..sc.agents.len() {
            agents += 1;
            if sc.maneuver_labels[i] == brute_force_label(&sc, i) {
                matched += 1;
            } else if first_miss.is_none() {
                first_miss = Some(format!("scenario {n} ({kind}, seed {seed}) agent {i}"));
            }
        }
    }
    let mut detail = format!("{matched}/{agents} agents");
    if let Some(m) = first_miss {
        detail.push_str(&format!(", first mismatch at {m}"));
    }
    outcome(matched == agents, detail)
}

fn bfs_hops(n: usize, one: &BTreeSet<(usize, usize)>, k: usize) -> BTreeSet<(usize, usize)> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in one {
        adj[a].push(b);
    }
    let mut out = BTreeSet::new();
    for s in 0..n {
        let mut frontier: BTreeSet<usize> = [s].into();
        for _ in 0..k {
            frontier = frontier.iter().flat_map(|&v| adj[v].iter().copied()).collect();
        }
        out.extend(frontier.into_iter().map(|t| (s, t)));
    }
    out
}

fn graph_violations(g: &LaneGraph) -> Vec<&'static str> {
    let mut bad = Vec::new();
    let merge = g.relation(Relation::Merge).expect("merge");
    let overlap = g.relation(Relation::Overlap).expect("overlap");
    if !merge.is_subset(&overlap) {
        bad.push("merge not within overlap");
    }
    if merge.iter().any(|&(a, b)| !merge.contains(&(b, a))) || overlap.iter().any(|&(a, b)| !overlap.contains(&(b, a))) {
        bad.push("asymmetric merge/overlap");
    }
    for rel in [Relation::Left, Relation::Right] {
        let set = g.relation(rel).expect("lateral");
        let mut seen = BTreeSet::new();
        if set.iter().any(|&(a, b)| a == b || !seen.insert(a)) {
            bad.push("lateral neighbor not unique");
        }
    }
    let one_succ = g.relation(Relation::Succ(1)).expect("succ");
    let one_pred: BTreeSet<_> = one_succ.iter().map(|&(a, b)| (b, a)).collect();
    for k in 1..=6 {
        if g.relation(Relation::Succ(k)).expect("succ") != bfs_hops(g.len(), &one_succ, k)
            || g.relation(Relation::Pred(k)).expect("pred") != bfs_hops(g.len(), &one_pred, k)
        {
            bad.push("dilated adjacency differs from BFS");
            break;
        }
    }
    bad
}

fn c8_graphs() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut failures = Vec::new();
    for n in 0..100 {
        let kind = MapKind::ALL[n % 5];
        let tf = RigidTransform::new(
            rng.random_range(-3.1..3.1),
            Point::new(rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0)),
        );
        let mut polys = map_polylines(kind);
        for p in &mut polys {
            for q in &mut p.points {
                *q = tf.apply_point(*q);
            }
        }
        let seg = rng.random_range(2.0..12.0);
        let thr = rng.random_range(1.0..4.0);
        match build_lane_graph(&polys, seg, thr) {
            Ok(g) => {
                let v = graph_violations(&g);
                if !v.is_empty() {
                    failures.push(format!("map {n}: {}", v.join(", ")));
                }
            }
            Err(e) => failures.push(format!("map {n}: {e}")),
        }
    }
    outcome(
        failures.is_empty(),
        format!("{}/100 maps clean{}", 100 - failures.len(), failures.first().map(|f| format!("; {f}")).unwrap_or_default()),
    )
}

fn c9_losses() -> Outcome {
    let delta = 1e-6;
    let sl1 = |e: f64| {
        let mut t = Tape::new();
        let pos = t.constant(Tensor::from_rows(&[vec![e, 0.0]]).expect("row"));
        let fut = vec![Some(vec![Point::new(0.0, 0.0)])];
        let j = smooth_l1_loss(&mut t, &[pos], &[0], &fut).expect("smooth l1");
        t.value(j).item()
    };
    let jump = (sl1(1.0 - delta) - sl1(1.0 + delta)).abs();
    let corner_ok = jump <= 2.0 * delta;

    let mut t = Tape::new();
    let p = t.constant(Tensor::from_rows(&[vec![0.7, 0.2, 0.1], vec![0.05, 0.05, 0.9]]).expect("rows"));
    let jm = max_margin_loss(&mut t, p, &[0, 2], 0.2).expect("margin");
    let jm = t.value(jm).item();

    let mut t = Tape::new();
    let u = t.constant(Tensor::full(&[3, 6], 1.0 / 6.0));
    let ja = maneuver_ce_loss(&mut t, u, &[Maneuver::S, Maneuver::F, Maneuver::I]).expect("ce");
    let ja = t.value(ja).item();
    let ce_err = (ja - 6f64.ln()).abs();
    outcome(
        corner_ok && jm == 0.0 && ce_err <= 1e-9,
        format!("corner jump {jump:.1e}, J_M {jm}, |J_agent - ln 6| {ce_err:.1e}"),
    )
}

fn moved(sc: &Scenario, tf: &RigidTransform) -> Scenario {
    Scenario {
        graph: tf.apply_graph(&sc.graph),
        agents: sc.agents.iter().map(|a| tf.apply_track(a)).collect(),
        ..sc.clone()
    }
}

fn c10_rigid() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let dil = EncoderConfig::default().dilations;
    let mut worst: f64 = 0.0;
    for n in 0..50 {
        let sc = generate_scenario(MapKind::ALL[n % 5], 4, n as u64).expect("generator");
        let base = SceneInputs::from_scenario(&sc, &dil).expect("inputs");
        let tf = RigidTransform::new(
            rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            Point::new(rng.random_range(-1e4..1e4), rng.random_range(-1e4..1e4)),
        );
        let other = SceneInputs::from_scenario(&moved(&sc, &tf), &dil).expect("inputs");
        worst = worst.max(base.max_abs_diff(&other));
    }
    outcome(worst <= 1e-9, format!("max input difference {worst:.2e} over 50 transforms"))
}

fn c11_repro() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let train_path = dir.path().join("train.jsonl");
    let eval_path = dir.path().join("eval.jsonl");
    save_scenarios(&train_path, &mixed_set(10, 4, 300)).expect("write");
    save_scenarios(&eval_path, &mixed_set(5, 4, 400)).expect("write");
    let cfg = TrainConfig {
        model: ModelConfig {
            encoder: EncoderConfig {
                d_model: 16,
                heads: 2,
                ..EncoderConfig::default()
            },
            ..ModelConfig::default()
        },
        steps: 30,
        batch_size: 4,
        seed: 5,
        ..TrainConfig::default()
    };
    let manifest = RunManifest::new(cfg, &train_path, Some(&eval_path)).expect("manifest");
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        if let Err(e) = manifest.run(&out) {
            return outcome(false, format!("run {run} failed: {e}"));
        }
        csvs.push(std::fs::read(out.join(METRICS_FILE)).expect("metrics file"));
    }
    outcome(
        csvs[0] == csvs[1] && !csvs[0].is_empty(),
        format!("metrics CSVs {} bytes each, identical: {}", csvs[0].len(), csvs[0] == csvs[1]),
    )
}

fn main() {
    let criteria: [(usize, &str, fn() -> Outcome); 11] = [
        (1, "sparse/full attention equivalence", c1_sparse_full),
        (2, "KL bound", c2_kl),
        (3, "entropy bound", c3_entropy),
        (4, "gradient checks", c4_gradients),
        (5, "overfit sanity", c5_overfit),
        (6, "noise-robustness direction", c6_noise),
        (7, "labeler oracle", c7_labeler),
        (8, "graph invariants", c8_graphs),
        (9, "loss identities", c9_losses),
        (10, "rigid-transform invariance", c10_rigid),
        (11, "reproducibility", c11_repro),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let o = run();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} [{id:>2}] {name}: {} ({:.1}s)", o.detail, t0.elapsed().as_secs_f64());
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
