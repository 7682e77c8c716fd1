//! The full network: encoders, feature selection, lane attention and decoder,
//! with the ablation switches.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{total_loss, Decoder, DecoderVars, LossBreakdown, LossTerms, LossWeights, Prediction, Targets};
use crate::encoder::{AgentEncoder, AttentionTrace, DynamicLaneEncoder, EncoderConfig, LaneEncoder};
use crate::error::{HtError, HtResult};
use crate::features::{SceneInputs, AGENT_FEATS, LANE_FEATS};
use crate::fusion::{all_pairs, toi_select, toi_select_others, FeatureSelection, SelectedPairs, SigmoidLaneAttention};
use crate::tensor::{load_checkpoint, save_checkpoint, Binding, Checkpoint, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoFeatureSelection,
    FullFeatureSelection,
    VanillaAttention,
    NoDecision,
    NoLaneAtt,
    NoAgentAtt,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::NoFeatureSelection,
        Ablation::FullFeatureSelection,
        Ablation::VanillaAttention,
        Ablation::NoDecision,
        Ablation::NoLaneAtt,
        Ablation::NoAgentAtt,
        Ablation::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoFeatureSelection => "no_feature_selection",
            Ablation::FullFeatureSelection => "full_feature_selection",
            Ablation::VanillaAttention => "vanilla_attention",
            Ablation::NoDecision => "no_decision",
            Ablation::NoLaneAtt => "no_lane_att",
            Ablation::NoAgentAtt => "no_agent_att",
        }
    }

    fn feature_selection(self) -> bool {
        self != Ablation::NoFeatureSelection
    }

    fn lane_decision(self) -> bool {
        !matches!(self, Ablation::NoDecision | Ablation::NoLaneAtt)
    }

    fn agent_decision(self) -> bool {
        !matches!(self, Ablation::NoDecision | Ablation::NoAgentAtt)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = HtError;

    fn from_str(s: &str) -> HtResult<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| HtError::Config(format!("unknown ablation `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Number of predicted modalities.
    pub k: usize,
    pub t_fut: usize,
    /// Feature-selection blocks per interaction.
    pub na: usize,
    /// Agent/lane pairing radius in meters.
    pub eps_lane: f64,
    /// Agent/agent pairing radius in meters.
    pub eps_agent: f64,
    pub margin: f64,
    pub loss_weights: LossWeights,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            k: 6,
            t_fut: 30,
            na: 2,
            eps_lane: 10.0,
            eps_agent: 30.0,
            margin: 0.2,
            loss_weights: LossWeights::default(),
            ablation: Ablation::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> HtResult<()> {
        self.encoder.validate()?;
        let bad = |m: String| Err(HtError::Config(m));
        if self.k == 0 || self.t_fut == 0 {
            return bad(format!("k = {} and t_fut = {} must be positive", self.k, self.t_fut));
        }
        if !(self.eps_lane > 0.0 && self.eps_agent > 0.0) {
            return bad("pairing radii must be positive".into());
        }
        if self.margin < 0.0 {
            return bad(format!("margin {} is negative", self.margin));
        }
        Ok(())
    }

    fn effective_encoder(&self) -> EncoderConfig {
        let mut e = self.encoder.clone();
        if self.ablation == Ablation::VanillaAttention {
            e.sparsity = 1.0;
        }
        e
    }
}

/// Forward results still on the tape.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub decoder: DecoderVars,
    /// `[N, Nl]` sigmoid lane weights, present whenever the map has lanes.
    pub lane_weights: Option<Var>,
    /// Per agent, per encoder block.
    pub traces: Vec<Vec<AttentionTrace>>,
}

#[derive(Debug, Clone)]
pub struct HtModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    agent_enc: AgentEncoder,
    lane_enc: LaneEncoder,
    dyn_lane: DynamicLaneEncoder,
    lane_agent: Vec<FeatureSelection>,
    agent_agent: Vec<FeatureSelection>,
    lane_att: SigmoidLaneAttention,
    decoder: Decoder,
}

impl HtModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> HtResult<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = cfg.effective_encoder();
        let d = enc.d_model;
        let fs = cfg.ablation.feature_selection();
        let agent_enc = AgentEncoder::new(&mut store, "agent", AGENT_FEATS, &enc, &mut rng);
        let lane_enc = LaneEncoder::new(&mut store, "lane", LANE_FEATS, &enc, &mut rng);
        let dyn_lane = DynamicLaneEncoder::new(&mut store, "dlane", &enc, fs, &mut rng);
        let blocks = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| {
            if fs {
                (0..cfg.na)
                    .map(|i| FeatureSelection::new(store, &format!("{name}{i}"), d, rng))
                    .collect()
            } else {
                Vec::new()
            }
        };
        let lane_agent = blocks(&mut store, &mut rng, "la");
        let agent_agent = blocks(&mut store, &mut rng, "aa");
        let lane_att = SigmoidLaneAttention::new(&mut store, "lane_att", d, &mut rng);
        let mane_in = cfg.ablation.agent_decision().then_some(if fs { 2 * d } else { d });
        let decoder = Decoder::new(&mut store, "dec", d, cfg.k, cfg.t_fut, mane_in, &mut rng);
        Ok(HtModel {
            cfg,
            store,
            agent_enc,
            lane_enc,
            dyn_lane,
            lane_agent,
            agent_agent,
            lane_att,
            decoder,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }

    pub fn inputs(&self, sc: &crate::forge::Scenario) -> HtResult<SceneInputs> {
        SceneInputs::from_scenario(sc, &self.cfg.encoder.dilations)
    }

    fn pairs(&self, base: &[crate::scene::Point], ctx: &[crate::scene::Point], eps: f64, skip_self: bool) -> HtResult<SelectedPairs> {
        if self.cfg.ablation == Ablation::FullFeatureSelection {
            return Ok(all_pairs(base, ctx, skip_self));
        }
        Ok(if skip_self {
            toi_select_others(base, eps)?
        } else {
            toi_select(base, ctx, eps)?
        })
    }

    pub fn forward(&self, t: &mut Tape, p: &Binding, x: &SceneInputs) -> HtResult<ForwardVars> {
        if x.n_agents() == 0 {
            return Err(HtError::Config("scene without agents".into()));
        }
        if x.futures.iter().flatten().any(|f| f.len() != self.cfg.t_fut) {
            return Err(HtError::Config(format!("futures must have {} steps", self.cfg.t_fut)));
        }
        let hist: Vec<Var> = x.histories.iter().map(|h| t.constant(h.clone())).collect();
        let (x_a, traces) = self.agent_enc.forward(t, p, &hist)?;

        let x_dl = match &x.lane_feats {
            Some(feats) => {
                let adj = x.adjacency.bind(t);
                let f = t.constant(feats.clone());
                let x_sl = self.lane_enc.forward(t, p, f, &adj)?;
                let pairs = self.pairs(&x.lane_pos, &x.agent_pos, self.cfg.eps_lane, false)?;
                Some(self.dyn_lane.forward(t, p, x_sl, x_a, &pairs, &adj)?)
            }
            None => None,
        };

        let mut h = x_a;
        let mut att_lane = None;
        if let Some(x_dl) = x_dl {
            let pairs = self.pairs(&x.agent_pos, &x.lane_pos, self.cfg.eps_lane, false)?;
            for fs in &self.lane_agent {
                let (o, a) = fs.forward(t, p, h, x_dl, &pairs)?;
                h = o;
                att_lane = Some(a);
            }
        }
        let mut att_agent = None;
        let pairs = self.pairs(&x.agent_pos, &x.agent_pos, self.cfg.eps_agent, true)?;
        for fs in &self.agent_agent {
            let (o, a) = fs.forward(t, p, h, h, &pairs)?;
            h = o;
            att_agent = Some(a);
        }
        let mane_in = if !self.decoder.has_maneuver_head() {
            None
        } else if self.cfg.ablation.feature_selection() {
            // Without lanes the lane interaction leaves the agent features as they were.
            let al = match att_lane {
                Some(a) => a,
                None => x_a,
            };
            let aa = att_agent.expect("feature selection blocks present");
            Some(t.concat(&[al, aa], 1)?)
        } else {
            Some(x_a)
        };
        let (x_fuse, lane_w) = self.lane_att.forward(t, p, h, x_dl)?;
        let decoder = self.decoder.forward(t, p, x_fuse, mane_in)?;
        Ok(ForwardVars {
            decoder,
            lane_weights: lane_w,
            traces,
        })
    }

    fn loss_terms(&self) -> LossTerms {
        LossTerms {
            lane: self.cfg.ablation.lane_decision(),
            agent: self.cfg.ablation.agent_decision(),
        }
    }

    pub fn loss(&self, t: &mut Tape, out: &ForwardVars, x: &SceneInputs) -> HtResult<(Var, LossBreakdown)> {
        let targets = Targets {
            futures: &x.futures,
            maneuvers: &x.maneuvers,
            lane_labels: &x.lane_labels,
        };
        Ok(total_loss(
            t,
            &out.decoder,
            out.lane_weights,
            targets,
            self.loss_terms(),
            self.cfg.margin,
            &self.cfg.loss_weights,
        )?)
    }

    /// Loss breakdown and per-parameter gradients for one scene.
    pub fn loss_and_grads(&self, x: &SceneInputs) -> HtResult<(LossBreakdown, Vec<Vec<f64>>)> {
        let mut t = Tape::new();
        let p = self.store.bind(&mut t);
        let out = self.forward(&mut t, &p, x)?;
        let (j, b) = self.loss(&mut t, &out, x)?;
        let g = t.backward(j)?;
        Ok((b, p.collect(&g)))
    }

    pub fn evaluate_scene(&self, x: &SceneInputs) -> HtResult<(Prediction, LossBreakdown)> {
        let mut t = Tape::new();
        let p = self.store.bind(&mut t);
        let out = self.forward(&mut t, &p, x)?;
        let (_, b) = self.loss(&mut t, &out, x)?;
        Ok((self.prediction(&t, &out), b))
    }

    pub fn predict(&self, x: &SceneInputs) -> HtResult<Prediction> {
        let mut t = Tape::new();
        let p = self.store.bind(&mut t);
        let out = self.forward(&mut t, &p, x)?;
        Ok(self.prediction(&t, &out))
    }

    /// Lane weights are only reported when the lane decision is part of the model.
    fn prediction(&self, t: &Tape, out: &ForwardVars) -> Prediction {
        let lane = out.lane_weights.filter(|_| self.cfg.ablation.lane_decision());
        Prediction::from_vars(t, &out.decoder, lane)
    }

    /// Raw sigmoid lane weights, whatever the ablation.
    pub fn lane_weights(&self, x: &SceneInputs) -> HtResult<Option<crate::tensor::Tensor>> {
        let mut t = Tape::new();
        let p = self.store.bind(&mut t);
        let out = self.forward(&mut t, &p, x)?;
        Ok(out.lane_weights.map(|w| t.value(w).clone()))
    }

    pub fn to_checkpoint(&self) -> HtResult<Checkpoint> {
        Ok(Checkpoint::from_store(&self.store, serde_json::to_string(&self.cfg)?))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> HtResult<Self> {
        let cfg: ModelConfig = serde_json::from_str(&ck.meta)?;
        let mut m = HtModel::new(cfg, 0)?;
        m.store.load_from(&ck.entries)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> HtResult<()> {
        Ok(save_checkpoint(path, &self.to_checkpoint()?)?)
    }

    pub fn load(path: &Path) -> HtResult<Self> {
        HtModel::from_checkpoint(&load_checkpoint(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::{generate_scenario, MapKind};
    use crate::tensor::check_param_gradients;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d_model: 8,
                heads: 2,
                nx: 1,
                ng: 1,
                ..EncoderConfig::default()
            },
            k: 3,
            na: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(json, format!("\"{}\"", a.name()));
        }
        assert!("lstm".parse::<Ablation>().is_err());
    }

    #[test]
    fn forward_shapes_for_every_ablation() {
        let sc = generate_scenario(MapKind::TJunction, 3, 4).unwrap();
        for a in Ablation::ALL {
            let m = HtModel::new(ModelConfig { ablation: a, ..tiny_config() }, 1).unwrap();
            let x = m.inputs(&sc).unwrap();
            let (pred, b) = m.evaluate_scene(&x).unwrap();
            assert_eq!(pred.trajectories.len(), 3);
            assert_eq!(pred.trajectories[0].len(), 3);
            assert_eq!(pred.trajectories[0][0].len(), 30);
            for row in &pred.probs {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            assert_eq!(pred.maneuver.is_some(), a.agent_decision(), "{a}");
            assert_eq!(pred.lane.is_some(), a.lane_decision(), "{a}");
            assert!(b.terms().iter().all(|&v| v >= 0.0 && v.is_finite()));
            let sum: f64 = b.terms().iter().sum();
            assert!((sum - b.total).abs() < 1e-12);
            if a == Ablation::NoDecision {
                assert_eq!((b.j_lane, b.j_agent), (0.0, 0.0));
            }
        }
    }

    #[test]
    fn ablations_shrink_or_keep_parameter_count() {
        let full = HtModel::new(tiny_config(), 0).unwrap().num_params();
        let count = |a| HtModel::new(ModelConfig { ablation: a, ..tiny_config() }, 0).unwrap().num_params();
        assert!(count(Ablation::NoFeatureSelection) < full);
        assert!(count(Ablation::NoDecision) < full);
        assert!(count(Ablation::NoAgentAtt) < full);
        assert_eq!(count(Ablation::VanillaAttention), full);
        assert_eq!(count(Ablation::FullFeatureSelection), full);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let sc = generate_scenario(MapKind::Curve, 3, 2).unwrap();
        let m = HtModel::new(tiny_config(), 5).unwrap();
        let x = m.inputs(&sc).unwrap();
        let mut buf = Vec::new();
        crate::tensor::write_checkpoint(&mut buf, &m.to_checkpoint().unwrap()).unwrap();
        let back = HtModel::from_checkpoint(&crate::tensor::read_checkpoint(&buf[..]).unwrap()).unwrap();
        assert_eq!(m.predict(&x).unwrap(), back.predict(&x).unwrap());
    }

    #[test]
    fn end_to_end_gradients_on_two_agents() {
        let sc = generate_scenario(MapKind::Straight, 2, 3).unwrap();
        let m = HtModel::new(tiny_config(), 2).unwrap();
        let x = m.inputs(&sc).unwrap();
        let rep = check_param_gradients(
            &m.store,
            |t, p| {
                let out = m.forward(t, p, &x).map_err(|e| crate::tensor::shape_err("model", e.to_string()))?;
                let (j, _) = m.loss(t, &out, &x).map_err(|e| crate::tensor::shape_err("model", e.to_string()))?;
                Ok(j)
            },
            1e-5,
            100,
            11,
        )
        .unwrap();
        assert!(rep.passes(1e-3), "{rep:?}");
    }
}
