use ht_core::tensor::{finite_difference_check, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;
const STEP: f64 = 1e-5;

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.5..1.5))
}

/// Reduces any output to a scalar with fixed random weights so that every
/// output coordinate contributes a distinct sensitivity.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let (r, c) = (tape.value(y).rows(), tape.value(y).cols());
    let w = tape.constant(random(r, c, seed ^ 0xabc));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check(name: &str, x: Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var>) {
    let rep = finite_difference_check(
        |t, v| {
            let y = f(t, v)?;
            weighted_sum(t, y, 7)
        },
        &x,
        STEP,
        200,
        3,
    )
    .unwrap();
    assert!(rep.max_rel_error <= TOL, "{name}: {rep:?}");
}

#[test]
fn unary_primitives() {
    let x = random(4, 5, 1);
    check("softmax", x.clone(), |t, v| Ok(t.softmax(v)));
    check("sigmoid", x.clone(), |t, v| Ok(t.sigmoid(v)));
    check("relu", x.clone(), |t, v| Ok(t.relu(v)));
    check("elu", x.clone(), |t, v| Ok(t.elu(v)));
    check("exp", x.clone(), |t, v| Ok(t.exp(v)));
    check("transpose", x.clone(), |t, v| Ok(t.transpose(v)));
    check("reshape", x.clone(), |t, v| t.reshape(v, &[2, 10]));
    check("scale", x.clone(), |t, v| Ok(t.scale(v, -2.5)));
    check("add_scalar", x.clone(), |t, v| Ok(t.add_scalar(v, 0.3)));
    check("sum_rows", x.clone(), |t, v| Ok(t.sum_rows(v)));
    check("sum_cols", x.clone(), |t, v| Ok(t.sum_cols(v)));
    check("max_rows", x.clone(), |t, v| t.max_rows(v));
    check("mean", x.clone(), |t, v| Ok(t.mean(v)));
    check("max_pool", x.clone(), |t, v| t.max_pool_rows(v));
    check("smooth_l1", x.clone(), |t, v| Ok(t.smooth_l1_rows(v)));
    let pos = Tensor::from_fn(3, 3, |r, c| 0.2 + (r * 3 + c) as f64 * 0.1);
    check("log", pos, |t, v| Ok(t.log_clamped(v, 1e-12)));
}

#[test]
fn binary_primitives_with_broadcasting() {
    let x = random(4, 3, 2);
    for (name, other) in [
        ("full", random(4, 3, 3)),
        ("row", random(1, 3, 4)),
        ("col", random(4, 1, 5)),
        ("scalar", random(1, 1, 6)),
    ] {
        let o = other.clone();
        check(name, x.clone(), move |t, v| {
            let b = t.constant(o.clone());
            let s = t.add(v, b)?;
            let d = t.sub(s, b)?;
            let m = t.mul(d, b)?;
            t.add(m, d)
        });
        // gradient with respect to the broadcast operand
        let base = x.clone();
        check(name, other, move |t, v| {
            let a = t.constant(base.clone());
            let s = t.add(a, v)?;
            let m = t.mul(s, v)?;
            t.sub(m, v)
        });
    }
}

#[test]
fn matmul_and_concat() {
    let a = random(3, 4, 8);
    let b = random(4, 2, 9);
    let bb = b.clone();
    check("matmul lhs", a.clone(), move |t, v| {
        let w = t.constant(bb.clone());
        t.matmul(v, w)
    });
    let aa = a.clone();
    check("matmul rhs", b, move |t, v| {
        let x = t.constant(aa.clone());
        t.matmul(x, v)
    });
    check("concat rows", a.clone(), |t, v| {
        let s = t.sigmoid(v);
        t.concat(&[v, s, v], 0)
    });
    check("concat cols", a, |t, v| {
        let s = t.sigmoid(v);
        t.concat(&[s, v], 1)
    });
}

#[test]
fn index_primitives() {
    let x = random(5, 3, 10);
    check("index_select", x.clone(), |t, v| t.index_select(v, &[4, 0, 4, 2]));
    let src = random(3, 3, 11);
    let s2 = src.clone();
    check("index_add base", x.clone(), move |t, v| {
        let s = t.constant(s2.clone());
        t.index_add(v, &[1, 1, 3], s)
    });
    check("index_add src", src, move |t, v| {
        let b = t.constant(x.clone());
        t.index_add(b, &[1, 1, 3], v)
    });
}

#[test]
fn layer_norm_all_inputs() {
    let x = random(4, 6, 12);
    let g = random(1, 6, 13);
    let b = random(1, 6, 14);
    let (g1, b1) = (g.clone(), b.clone());
    check("ln x", x.clone(), move |t, v| {
        let gv = t.constant(g1.clone());
        let bv = t.constant(b1.clone());
        t.layer_norm(v, gv, bv)
    });
    let (x1, b2) = (x.clone(), b.clone());
    check("ln gain", g.clone(), move |t, v| {
        let xv = t.constant(x1.clone());
        let bv = t.constant(b2.clone());
        t.layer_norm(xv, v, bv)
    });
    check("ln bias", b, move |t, v| {
        let xv = t.constant(x.clone());
        let gv = t.constant(g.clone());
        t.layer_norm(xv, gv, v)
    });
}

#[test]
fn conv1d_all_inputs() {
    let x = random(7, 3, 15);
    let w = random(9, 4, 16);
    let b = random(1, 4, 17);
    let (w1, b1) = (w.clone(), b.clone());
    check("conv x", x.clone(), move |t, v| {
        let wv = t.constant(w1.clone());
        let bv = t.constant(b1.clone());
        t.conv1d(v, wv, bv, 3)
    });
    let (x1, b2) = (x.clone(), b.clone());
    check("conv w", w.clone(), move |t, v| {
        let xv = t.constant(x1.clone());
        let bv = t.constant(b2.clone());
        t.conv1d(xv, v, bv, 3)
    });
    check("conv b", b, move |t, v| {
        let xv = t.constant(x.clone());
        let wv = t.constant(w.clone());
        t.conv1d(xv, wv, v, 3)
    });
}

#[test]
fn full_attention_gradient() {
    // softmax(Q K^T / sqrt(d)) V on random 4x8 inputs, all three gradients
    let q = random(4, 8, 20);
    let k = random(4, 8, 21);
    let v = random(4, 8, 22);
    let attn = |t: &mut Tape, q: Var, k: Var, v: Var| -> Result<Var> {
        let kt = t.transpose(k);
        let s = t.matmul(q, kt)?;
        let s = t.scale(s, 1.0 / 8f64.sqrt());
        let p = t.softmax(s);
        t.matmul(p, v)
    };
    let (k1, v1) = (k.clone(), v.clone());
    let rep = finite_difference_check(
        |t, x| {
            let kv = t.constant(k1.clone());
            let vv = t.constant(v1.clone());
            let y = attn(t, x, kv, vv)?;
            weighted_sum(t, y, 1)
        },
        &q,
        STEP,
        100,
        1,
    )
    .unwrap();
    assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    let (q1, v2) = (q.clone(), v.clone());
    let rep = finite_difference_check(
        |t, x| {
            let qv = t.constant(q1.clone());
            let vv = t.constant(v2.clone());
            let y = attn(t, qv, x, vv)?;
            weighted_sum(t, y, 1)
        },
        &k,
        STEP,
        100,
        1,
    )
    .unwrap();
    assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
}

#[test]
fn smooth_l1_away_from_corner() {
    // rows with |e| well away from 1 on both branches
    let x = Tensor::from_rows(&[vec![0.3, 0.2], vec![1.5, -0.7], vec![-0.1, 0.05], vec![2.0, 2.0]])
        .unwrap();
    let rep = finite_difference_check(
        |t, v| {
            let s = t.smooth_l1_rows(v);
            Ok(t.sum(s))
        },
        &x,
        STEP,
        100,
        0,
    )
    .unwrap();
    assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(row in prop::collection::vec(-50.0f64..50.0, 1..30)) {
        let mut tape = Tape::new();
        let n = row.len();
        let x = tape.constant(Tensor::new(vec![1, n], row).unwrap());
        let y = tape.softmax(x);
        let s: f64 = tape.value(y).data().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn forward_primitives_stay_finite(vals in prop::collection::vec(-20.0f64..20.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let g = tape.constant(Tensor::full(&[1, 4], 1.0));
        let b = tape.constant(Tensor::zeros(&[1, 4]));
        let outs = [
            tape.softmax(x),
            tape.sigmoid(x),
            tape.elu(x),
            tape.layer_norm(x, g, b).unwrap(),
            tape.max_pool_rows(x).unwrap(),
            tape.smooth_l1_rows(x),
        ];
        for o in outs {
            prop_assert!(tape.value(o).is_finite());
        }
    }

    #[test]
    fn index_add_select_identity(idx in prop::collection::btree_set(0usize..10, 1..6), seed in 0u64..1000) {
        let idx: Vec<usize> = idx.into_iter().collect();
        let mut tape = Tape::new();
        let base = tape.constant(Tensor::zeros(&[10, 3]));
        let inc = tape.constant(random(idx.len(), 3, seed));
        let added = tape.index_add(base, &idx, inc).unwrap();
        let back = tape.index_select(added, &idx).unwrap();
        prop_assert_eq!(tape.value(back), tape.value(inc));
    }
}
