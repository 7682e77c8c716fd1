//! Property and gradient suites shared by the CLI and the acceptance tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::decoder::{
    best_modes, lane_bce_loss, maneuver_ce_loss, max_margin_loss, smooth_l1_loss, trajectory_ce_loss, Decoder,
};
use crate::encoder::{entropy, exact_kl, m_score, ConvPool, EncoderConfig, LaneAdjacency, LaneConvBlock, SparseAttention};
use crate::forge::{generate_scenario, MapKind, Maneuver};
use crate::fusion::{toi_select, FeatureSelection, SigmoidLaneAttention};
use crate::scene::Point;
use crate::tensor::{
    check_param_gradients, finite_difference_check, GradCheckReport, ParamStore, Result, Tape, Tensor, Var,
    LAYER_NORM_EPS,
};

/// Pass count of one property suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub passed: usize,
    pub total: usize,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
}

impl SuiteReport {
    pub fn ok(&self) -> bool {
        self.passed == self.total
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `0 <= KL <= M` on random queries and keys for every `(L, d)`.
pub fn kl_suite(draws: usize, seed: u64) -> Vec<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for len in [5, 20] {
        for d in [4, 16] {
            let mut passed = 0;
            let mut worst = f64::NEG_INFINITY;
            for _ in 0..draws {
                let k = normal_tensor(&mut rng, len, d);
                let q: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let kl = exact_kl(&q, &k);
                let m = m_score(&q, &k);
                worst = worst.max((-kl).max(kl - m));
                if kl >= -1e-9 && kl <= m + 1e-9 {
                    passed += 1;
                }
            }
            out.push(SuiteReport {
                name: format!("kl bound L={len} d={d}"),
                passed,
                total: draws,
                worst,
            });
        }
    }
    out
}

/// `H(q) <= ln L` on random simplex points, with the uniform point attaining it.
pub fn entropy_suite(points: usize, seed: u64) -> Vec<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for len in [3usize, 10, 50] {
        let bound = (len as f64).ln();
        let mut passed = 0;
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..points {
            // Normalized exponentials are uniform on the simplex.
            let e: Vec<f64> = (0..len).map(|_| Exp1.sample(&mut rng)).collect();
            let s: f64 = e.iter().sum();
            let p: Vec<f64> = e.iter().map(|x| x / s).collect();
            let h = entropy(&p);
            worst = worst.max(h - bound);
            if h <= bound + 1e-12 {
                passed += 1;
            }
        }
        let uniform = entropy(&vec![1.0 / len as f64; len]);
        let uni_ok = (uniform - bound).abs() <= 1e-9;
        out.push(SuiteReport {
            name: format!("entropy bound L={len}"),
            passed: passed + usize::from(uni_ok),
            total: points + 1,
            worst,
        });
    }
    out
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum())
}

fn plain_ln(x: &Tensor, g: &Tensor, b: &Tensor) -> Tensor {
    let m = x.cols() as f64;
    Tensor::from_fn(x.rows(), x.cols(), |r, c| {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / m;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        (row[c] - mean) / (var + LAYER_NORM_EPS).sqrt() * g.get(0, c) + b.get(0, c)
    })
}

fn plain_affine(store: &ParamStore, name: &str, x: &Tensor, relu: bool) -> Tensor {
    let w = store.get(store.id(&format!("{name}.w")).expect("weight"));
    let b = store.get(store.id(&format!("{name}.b")).expect("bias"));
    let y = matmul(x, w);
    Tensor::from_fn(y.rows(), y.cols(), |r, c| {
        let v = y.get(r, c) + b.get(0, c);
        if relu {
            v.max(0.0)
        } else {
            v
        }
    })
}

/// Dense multi-head attention block (every query attends), residual, norm
/// and feedforward, computed with plain loops from the parameters of the
/// `SparseAttention` registered under `name`.
pub fn full_attention_block(store: &ParamStore, name: &str, heads: usize, x: &Tensor) -> Tensor {
    let p = |s: String| store.get(store.id(&s).unwrap_or_else(|| panic!("missing {s}")));
    let (len, d) = (x.rows(), x.cols());
    let dh = d / heads;
    let mut att = Tensor::zeros(&[len, d]);
    for h in 0..heads {
        let q = matmul(x, p(format!("{name}.q{h}.w")));
        let k = matmul(x, p(format!("{name}.k{h}.w")));
        let v = matmul(x, p(format!("{name}.v{h}.w")));
        for i in 0..len {
            let s: Vec<f64> = (0..len)
                .map(|j| (0..dh).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
            for c in 0..dh {
                let o: f64 = (0..len).map(|j| (s[j] - mx).exp() / z * v.get(j, c)).sum();
                att.data_mut()[i * d + h * dh + c] = o;
            }
        }
    }
    let sum = Tensor::from_fn(len, d, |r, c| x.get(r, c) + att.get(r, c));
    let xs = plain_ln(&sum, p(format!("{name}.ln.g")), p(format!("{name}.ln.b")));
    let hdn = plain_affine(store, &format!("{name}.ff1"), &xs, true);
    let ff = plain_affine(store, &format!("{name}.ff2"), &hdn, false);
    let sum = Tensor::from_fn(len, d, |r, c| x.get(r, c) + ff.get(r, c));
    plain_ln(&sum, p(format!("{name}.ff_ln.g")), p(format!("{name}.ff_ln.b")))
}

/// Sparse block at ratio 1 against the dense reference, on random inputs.
pub fn sparse_full_equivalence(trials: usize, len: usize, d_model: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EncoderConfig {
        d_model,
        sparsity: 1.0,
        ..EncoderConfig::default()
    };
    let mut passed = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let mut store = ParamStore::new();
        let att = SparseAttention::new(&mut store, "blk", &cfg, &mut rng);
        let x = normal_tensor(&mut rng, len, d_model);
        let reference = full_attention_block(&store, "blk", cfg.heads, &x);
        let mut t = Tape::new();
        let p = store.bind(&mut t);
        let xv = t.constant(x);
        let diff = match att.forward(&mut t, &p, xv) {
            Ok((y, _)) => t.value(y).max_abs_diff(&reference),
            Err(_) => f64::INFINITY,
        };
        worst = worst.max(diff);
        if diff <= 1e-6 {
            passed += 1;
        }
    }
    SuiteReport {
        name: format!("sparse (ratio 1) vs full attention, L={len} d={d_model}"),
        passed,
        total: trials,
        worst,
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Random linear read-out, so every output entry matters to the scalar.
fn project(t: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let w = t.constant(w.clone());
    let m = t.mul(y, w)?;
    Ok(t.sum(m))
}

/// Finite-difference checks of every layer and loss at `coords` sampled
/// coordinates with central step `step`.
pub fn gradient_suite(coords: usize, step: f64, seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 8;
    let cfg = EncoderConfig {
        d_model: d,
        heads: 2,
        ..EncoderConfig::default()
    };
    let mut out = Vec::new();

    {
        let mut store = ParamStore::new();
        let att = SparseAttention::new(&mut store, "sa", &cfg, &mut rng);
        let x = rand_tensor(&mut rng, 10, d);
        let w = rand_tensor(&mut rng, 10, d);
        let rep = check_param_gradients(
            &store,
            |t, p| {
                let xv = t.constant(x.clone());
                let (y, _) = att.forward(t, p, xv)?;
                project(t, y, &w)
            },
            step,
            coords,
            seed,
        )?;
        out.push(("sparse attention block".to_string(), rep));
    }
    {
        let mut store = ParamStore::new();
        let cp = ConvPool::new(&mut store, "cp", d, 3, &mut rng);
        let x = rand_tensor(&mut rng, 10, d);
        let w = rand_tensor(&mut rng, 5, d);
        let rep = check_param_gradients(
            &store,
            |t, p| {
                let xv = t.constant(x.clone());
                let y = cp.forward(t, p, xv)?;
                project(t, y, &w)
            },
            step,
            coords,
            seed,
        )?;
        out.push(("conv-pool unit".to_string(), rep));
    }
    {
        let sc = generate_scenario(MapKind::TJunction, 2, seed).expect("t-junction holds two agents");
        let adj = LaneAdjacency::from_graph(&sc.graph, &cfg.dilations).expect("generated graph is valid");
        let nl = adj.n;
        let mut store = ParamStore::new();
        let blk = LaneConvBlock::new(&mut store, "lc", d, &mut rng);
        let x = rand_tensor(&mut rng, nl, d);
        let w = rand_tensor(&mut rng, nl, d);
        let rep = check_param_gradients(
            &store,
            |t, p| {
                let a = adj.bind(t);
                let xv = t.constant(x.clone());
                let y = blk.forward(t, p, xv, &a)?;
                project(t, y, &w)
            },
            step,
            coords,
            seed,
        )?;
        out.push(("LaneConv block".to_string(), rep));
    }
    {
        let mut store = ParamStore::new();
        let fs = FeatureSelection::new(&mut store, "fs", d, &mut rng);
        let pts = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Point> {
            (0..n)
                .map(|_| Point::new(rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0)))
                .collect()
        };
        let (bp, cp) = (pts(&mut rng, 5), pts(&mut rng, 7));
        let pairs = toi_select(&bp, &cp, 9.0)?;
        let xb = rand_tensor(&mut rng, 5, d);
        let xc = rand_tensor(&mut rng, 7, d);
        let w = rand_tensor(&mut rng, 5, d);
        let rep = check_param_gradients(
            &store,
            |t, p| {
                let b = t.constant(xb.clone());
                let c = t.constant(xc.clone());
                let (y, att) = fs.forward(t, p, b, c, &pairs)?;
                let a = project(t, y, &w)?;
                let b = project(t, att, &w)?;
                t.add(a, b)
            },
            step,
            coords,
            seed,
        )?;
        out.push(("feature selection block".to_string(), rep));
    }
    {
        let mut store = ParamStore::new();
        let la = SigmoidLaneAttention::new(&mut store, "sg", d, &mut rng);
        let xa = rand_tensor(&mut rng, 3, d);
        let xl = rand_tensor(&mut rng, 6, d);
        let w1 = rand_tensor(&mut rng, 3, d);
        let w2 = rand_tensor(&mut rng, 3, 6);
        let rep = check_param_gradients(
            &store,
            |t, p| {
                let a = t.constant(xa.clone());
                let l = t.constant(xl.clone());
                let (y, wts) = la.forward(t, p, a, Some(l))?;
                let s1 = project(t, y, &w1)?;
                let s2 = project(t, wts.expect("lanes given"), &w2)?;
                t.add(s1, s2)
            },
            step,
            coords,
            seed,
        )?;
        out.push(("sigmoid lane attention".to_string(), rep));
    }
    {
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, "dec", d, 3, 5, Some(2 * d), &mut rng);
        let x = rand_tensor(&mut rng, 2, d);
        let m = rand_tensor(&mut rng, 2, 2 * d);
        let futs: Vec<Option<Vec<Point>>> = (0..2)
            .map(|_| Some((1..=5).map(|s| Point::new(s as f64 * rng.random_range(0.2..1.0), 0.3)).collect()))
            .collect();
        let wp = rand_tensor(&mut rng, 2, 3);
        let rep = check_param_gradients(
            &store,
            |t, p| {
                let xv = t.constant(x.clone());
                let mv = t.constant(m.clone());
                let o = dec.forward(t, p, xv, Some(mv))?;
                let ks = best_modes(t.value(o.probs));
                let js = smooth_l1_loss(t, &o.positions, &ks, &futs)?;
                let jp = project(t, o.probs, &wp)?;
                let ja = maneuver_ce_loss(t, o.maneuver.expect("head present"), &[Maneuver::D, Maneuver::I])?;
                let s = t.add(js, jp)?;
                t.add(s, ja)
            },
            step,
            coords,
            seed,
        )?;
        out.push(("decoder".to_string(), rep));
    }

    // Losses, differentiated with respect to their inputs. Values are kept
    // away from the hinge corner and the argmax boundary.
    let probs = Tensor::from_rows(&[vec![0.46, 0.31, 0.23], vec![0.12, 0.27, 0.61], vec![0.15, 0.5, 0.35]])?;
    let ks = best_modes(&probs);
    out.push((
        "max-margin loss".to_string(),
        finite_difference_check(|t, x| max_margin_loss(t, x, &ks, 0.2), &probs, step, coords, seed)?,
    ));
    out.push((
        "trajectory cross-entropy".to_string(),
        finite_difference_check(|t, x| trajectory_ce_loss(t, x, &ks), &probs, step, coords, seed)?,
    ));
    let pos = Tensor::from_fn(3, 10, |_, _| rng.random_range(-2.0..2.0));
    let futs: Vec<Option<Vec<Point>>> = (0..3)
        .map(|_| Some((0..5).map(|_| Point::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))).collect()))
        .collect();
    out.push((
        "smooth-L1 loss".to_string(),
        finite_difference_check(|t, x| smooth_l1_loss(t, &[x], &[0, 0, 0], &futs), &pos, step, coords, seed)?,
    ));
    let lw = Tensor::from_fn(3, 5, |_, _| rng.random_range(0.05..0.95));
    let labels: Vec<Vec<bool>> = (0..3).map(|_| (0..5).map(|_| rng.random_bool(0.4)).collect()).collect();
    out.push((
        "lane cross-entropy".to_string(),
        finite_difference_check(|t, x| lane_bce_loss(t, x, &labels), &lw, step, coords, seed)?,
    ));
    let mp = Tensor::from_fn(3, 6, |_, _| rng.random_range(0.05..0.3));
    let ml = [Maneuver::S, Maneuver::F, Maneuver::U];
    out.push((
        "maneuver cross-entropy".to_string(),
        finite_difference_check(|t, x| maneuver_ce_loss(t, x, &ml), &mp, step, coords, seed)?,
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        assert!(kl_suite(50, 1).iter().all(SuiteReport::ok));
        assert!(entropy_suite(50, 1).iter().all(SuiteReport::ok));
        let r = sparse_full_equivalence(3, 6, 16, 2);
        assert!(r.ok(), "{r:?}");
    }

    #[test]
    fn dense_reference_differs_from_sparse_below_ratio_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = EncoderConfig {
            d_model: 8,
            heads: 2,
            sparsity: 0.5,
            ..EncoderConfig::default()
        };
        let mut store = ParamStore::new();
        let att = SparseAttention::new(&mut store, "blk", &cfg, &mut rng);
        let x = normal_tensor(&mut rng, 6, 8);
        let reference = full_attention_block(&store, "blk", 2, &x);
        let mut t = Tape::new();
        let p = store.bind(&mut t);
        let xv = t.constant(x);
        let (y, _) = att.forward(&mut t, &p, xv).unwrap();
        assert!(t.value(y).max_abs_diff(&reference) > 1e-3);
    }

    #[test]
    fn gradient_suite_passes() {
        for (name, rep) in gradient_suite(40, 1e-5, 4).unwrap() {
            assert!(rep.passes(1e-3), "{name}: {rep:?}");
        }
    }
}
