//! Perception noise applied to agent histories.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ForgeError, Result, Scenario, HZ};
use crate::scene::HistoryStep;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Drop the frame: zero displacement, flag cleared.
    Loss,
    /// Add Gaussian jitter with std equal to 1% of the agent's speed at t = 0.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub mode: NoiseMode,
    /// Per-frame perturbation probability.
    pub p: f64,
}

impl NoiseSpec {
    pub fn new(mode: NoiseMode, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(ForgeError::Invalid(format!("noise probability {p} outside [0, 1]")));
        }
        Ok(NoiseSpec { mode, p })
    }
}

/// Perturbs every perceived history frame of every agent with probability
/// `spec.p`. Futures, anchors and the map are left untouched.
pub fn inject_noise(sc: &Scenario, spec: NoiseSpec, seed: u64) -> Result<Scenario> {
    NoiseSpec::new(spec.mode, spec.p)?;
    let mut out = sc.clone();
    if spec.p == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for agent in &mut out.agents {
        let std = agent.current_speed(HZ) / 100.0;
        let normal = Normal::new(0.0, std).map_err(|e| ForgeError::Invalid(e.to_string()))?;
        // Every frame consumes the same draws whatever `p` is, so for one
        // seed the frames hit at a lower probability are a subset of those
        // hit at a higher one, with identical perturbations.
        for h in agent.history.iter_mut().filter(|h| h.flag) {
            let u: f64 = rng.random();
            let (ex, ey) = (normal.sample(&mut rng), normal.sample(&mut rng));
            if u >= spec.p {
                continue;
            }
            match spec.mode {
                NoiseMode::Loss => *h = HistoryStep::missing(),
                NoiseMode::Gaussian => {
                    h.dx += ex;
                    h.dy += ey;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::{generate_scenario, generate_with, write_scenarios, AgentPlan, MapKind};

    #[test]
    fn zero_probability_is_identity() {
        let sc = generate_scenario(MapKind::Curve, 5, 3).unwrap();
        for mode in [NoiseMode::Loss, NoiseMode::Gaussian] {
            let n = inject_noise(&sc, NoiseSpec::new(mode, 0.0).unwrap(), 11).unwrap();
            let (mut a, mut b) = (Vec::new(), Vec::new());
            write_scenarios(&mut a, std::slice::from_ref(&sc)).unwrap();
            write_scenarios(&mut b, std::slice::from_ref(&n)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn full_loss_clears_every_frame() {
        let sc = generate_scenario(MapKind::Straight, 4, 3).unwrap();
        let n = inject_noise(&sc, NoiseSpec::new(NoiseMode::Loss, 1.0).unwrap(), 1).unwrap();
        for a in &n.agents {
            assert!(a.history.iter().all(|h| *h == HistoryStep::missing()));
        }
        assert_eq!(n.agents[0].future, sc.agents[0].future);
    }

    #[test]
    fn gaussian_std_scales_with_speed() {
        let sc = generate_with(MapKind::Straight, &[AgentPlan::cruising(vec![1], 10.0, 10.0)], 0).unwrap();
        let clean = sc.agents[0].history.clone();
        let mut dev = Vec::new();
        for seed in 0..500 {
            let n = inject_noise(&sc, NoiseSpec::new(NoiseMode::Gaussian, 1.0).unwrap(), seed).unwrap();
            for (h, c) in n.agents[0].history.iter().zip(&clean) {
                dev.push(h.dx - c.dx);
                dev.push(h.dy - c.dy);
            }
        }
        let m = dev.iter().sum::<f64>() / dev.len() as f64;
        let var = dev.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (dev.len() - 1) as f64;
        let std = var.sqrt();
        assert!((std - 0.1).abs() <= 0.005, "std {std}");
    }

    #[test]
    fn lower_probability_hits_a_subset() {
        let sc = generate_scenario(MapKind::Crossing, 6, 2).unwrap();
        let lo = inject_noise(&sc, NoiseSpec::new(NoiseMode::Gaussian, 0.03).unwrap(), 9).unwrap();
        let hi = inject_noise(&sc, NoiseSpec::new(NoiseMode::Gaussian, 0.3).unwrap(), 9).unwrap();
        let mut hits = 0;
        for ((c, l), h) in sc.agents.iter().zip(&lo.agents).zip(&hi.agents) {
            for ((c, l), h) in c.history.iter().zip(&l.history).zip(&h.history) {
                if l != c {
                    assert_eq!(l, h);
                    hits += 1;
                }
            }
        }
        assert!(hits > 0);
    }

    #[test]
    fn bad_probability_rejected() {
        assert!(NoiseSpec::new(NoiseMode::Loss, 1.5).is_err());
        assert!(NoiseSpec::new(NoiseMode::Loss, -0.1).is_err());
    }
}
