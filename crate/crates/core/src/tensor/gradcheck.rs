use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Binding, ParamStore, Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// Flat coordinate where the largest error occurred.
    pub worst_index: usize,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

fn pick_coords(numel: usize, max_coords: usize, seed: u64) -> Vec<usize> {
    if max_coords >= numel {
        return (0..numel).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = sample(&mut rng, numel, max_coords).into_vec();
    v.sort_unstable();
    v
}

/// Compares the tape gradient of scalar `f` at `x` against central
/// differences at up to `max_coords` sampled coordinates.
pub fn finite_difference_check<F>(
    f: F,
    x: &Tensor,
    step: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_requires_grad(true));
    let loss = f(&mut tape, xv)?;
    let analytic = tape.backward(loss)?.wrt(xv);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        coords_checked: 0,
    };
    for i in pick_coords(x.numel(), max_coords, seed) {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        if !fp.is_finite() || !fm.is_finite() || !analytic[i].is_finite() {
            return Err(TensorError::NonFinite { index: i });
        }
        let err = rel_error(analytic[i], (fp - fm) / (2.0 * step));
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
        report.coords_checked += 1;
    }
    Ok(report)
}

/// Same comparison over every parameter of `store`, sampling flat
/// coordinates across the concatenation of all parameter tensors.
pub fn check_param_gradients<F>(
    store: &ParamStore,
    f: F,
    step: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Binding) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let b = s.bind(&mut tape);
        let out = f(&mut tape, &b)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let binding = store.bind(&mut tape);
    let loss = f(&mut tape, &binding)?;
    let analytic: Vec<f64> = binding
        .collect(&tape.backward(loss)?)
        .into_iter()
        .flatten()
        .collect();

    let offsets: Vec<(usize, usize)> = {
        let mut acc = 0;
        store
            .ids()
            .map(|id| {
                let start = acc;
                acc += store.get(id).numel();
                (start, acc)
            })
            .collect()
    };
    let locate = |flat: usize| {
        let p = offsets.iter().position(|&(s, e)| flat >= s && flat < e).expect("in range");
        (p, flat - offsets[p].0)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        coords_checked: 0,
    };
    let mut probe = store.clone();
    for i in pick_coords(analytic.len(), max_coords, seed) {
        let (p, local) = locate(i);
        let id = store.ids().nth(p).expect("param id");
        let orig = store.get(id).data()[local];
        probe.get_mut(id).data_mut()[local] = orig + step;
        let fp = eval(&probe)?;
        probe.get_mut(id).data_mut()[local] = orig - step;
        let fm = eval(&probe)?;
        probe.get_mut(id).data_mut()[local] = orig;
        if !fp.is_finite() || !fm.is_finite() || !analytic[i].is_finite() {
            return Err(TensorError::NonFinite { index: i });
        }
        let err = rel_error(analytic[i], (fp - fm) / (2.0 * step));
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
        report.coords_checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_fn(3, 4, |r, c| (r as f64) - 0.3 * c as f64);
        let rep = finite_difference_check(|t, v| Ok(t.sum(v)), &x, 1e-5, 100, 1).unwrap();
        assert!(rep.max_rel_error <= 1e-10, "{rep:?}");
        assert_eq!(rep.coords_checked, 12);
    }

    #[test]
    fn non_finite_probe_reports_coordinate() {
        let x = Tensor::from_fn(1, 3, |_, c| c as f64 * 1e300);
        let err = finite_difference_check(
            |t, v| {
                let e = t.exp(v);
                Ok(t.sum(e))
            },
            &x,
            1e-5,
            10,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }
}
