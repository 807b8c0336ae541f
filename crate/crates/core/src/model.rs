//! The full capsule model: word capsules, slot capsules, intent capsules
//! and intent-guided re-routing.

use rand::Rng;

use crate::capsules::{activation_norms, assign_slots, predict_intent, route, CapsuleLayer, RerouteParams, Routing};
use crate::config::ModelConfig;
use crate::encoder::Encoder;
use crate::losses::{intent_loss, joint_loss, slot_loss, LossConfig};
use crate::tensor::{Graph, ParamId, ParamSet, Real, Tensor, TensorError, Var};
use crate::{Error, Result};

const SLOT_CAPS: &str = "slot_caps";
const INTENT_CAPS: &str = "intent_caps";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CapsuleNlu {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub slot_caps: CapsuleLayer,
    pub intent_caps: Option<CapsuleLayer>,
    pub reroute: Option<RerouteParams>,
}

/// Which terms enter the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Joint,
    Slot,
    Intent,
}

/// Per-call switches for [`CapsuleNlu::forward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Run intent capsules (when the model has them).
    pub intents: bool,
    /// Re-route word-to-slot agreements with the predicted intent.
    pub reroute: bool,
    /// Intent used for re-routing instead of the predicted one.
    pub forced_intent: Option<usize>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            intents: true,
            reroute: true,
            forced_intent: None,
        }
    }
}

/// Graph handles produced by one forward pass over an utterance.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub hidden: Var,
    pub slot_predictions: Var,
    pub slot_routing: Routing,
    pub intent_predictions: Option<Var>,
    pub intent_routing: Option<Routing>,
    pub predicted_intent: Option<usize>,
    pub rerouting: Option<Routing>,
}

impl ForwardPass {
    /// Word-to-slot routing that decides the tags: the re-routed pass when
    /// there is one.
    pub fn decisive_slot_routing(&self) -> &Routing {
        self.rerouting.as_ref().unwrap_or(&self.slot_routing)
    }

    /// `[T, K]` agreements used for tagging and the slot loss.
    pub fn slot_agreements(&self) -> Var {
        self.decisive_slot_routing().agreements
    }

    pub fn intent_activations(&self) -> Option<Var> {
        self.intent_routing.as_ref().map(|r| r.activations)
    }
}

/// Index-level output for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tags: Vec<usize>,
    pub intent: Option<usize>,
    pub intent_norms: Vec<f64>,
}

impl CapsuleNlu {
    /// Registers freshly initialized parameters. `num_intents = None`
    /// builds a slot-only model without intent capsules.
    pub fn register<F: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<F>,
        config: ModelConfig,
        num_tokens: usize,
        num_tags: usize,
        num_intents: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let encoder = Encoder::register(params, num_tokens, config.word_dim, config.hidden_dim, rng);
        let slot_caps = CapsuleLayer::register(params, SLOT_CAPS, encoder.output_dim(), num_tags, config.slot_dim, rng);
        let intent_caps = num_intents
            .map(|l| CapsuleLayer::register(params, INTENT_CAPS, config.slot_dim, l, config.intent_dim, rng));
        let reroute = (intent_caps.is_some() && config.reroute)
            .then(|| RerouteParams::register(params, config.slot_dim, config.intent_dim, config.alpha, rng));
        Self {
            config,
            encoder,
            slot_caps,
            intent_caps,
            reroute,
        }
    }

    /// Binds to parameters loaded from a checkpoint.
    pub fn attach<F: Real>(
        params: &ParamSet<F>,
        config: ModelConfig,
        num_tags: usize,
        num_intents: Option<usize>,
    ) -> Result<Self> {
        let missing = |what: &str| Error::Checkpoint(format!("checkpoint has no {what} parameters"));
        let encoder = Encoder::attach(params).ok_or_else(|| missing("encoder"))?;
        let slot_caps = CapsuleLayer::attach(params, SLOT_CAPS, num_tags).ok_or_else(|| missing("slot capsule"))?;
        let intent_caps = match num_intents {
            Some(l) => Some(CapsuleLayer::attach(params, INTENT_CAPS, l).ok_or_else(|| missing("intent capsule"))?),
            None => None,
        };
        let reroute = if intent_caps.is_some() && config.reroute {
            Some(RerouteParams::attach(params, config.alpha).ok_or_else(|| missing("re-routing"))?)
        } else {
            None
        };
        if encoder.word_dim != config.word_dim
            || encoder.hidden_dim != config.hidden_dim
            || slot_caps.dim != config.slot_dim
            || intent_caps.is_some_and(|c| c.dim != config.intent_dim)
        {
            return Err(Error::Checkpoint(
                "parameter shapes do not match the model config".into(),
            ));
        }
        Ok(Self {
            config,
            encoder,
            slot_caps,
            intent_caps,
            reroute,
        })
    }

    pub fn num_tags(&self) -> usize {
        self.slot_caps.capsules
    }

    pub fn num_intents(&self) -> Option<usize> {
        self.intent_caps.map(|c| c.capsules)
    }

    /// Encoder and slot-capsule parameters.
    pub fn slot_path_params(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.param_ids();
        ids.extend([self.slot_caps.weight, self.slot_caps.bias]);
        ids
    }

    /// Intent-capsule and re-routing parameters.
    pub fn intent_params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Some(c) = self.intent_caps {
            ids.extend([c.weight, c.bias]);
        }
        if let Some(r) = self.reroute {
            ids.push(r.weight);
        }
        ids
    }

    /// Builds the forward graph for one utterance. Dropout on the word
    /// capsules is applied when `dropout_rng` is given.
    pub fn forward<F: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, F>,
        tokens: &[usize],
        opts: ForwardOptions,
        dropout_rng: Option<&mut R>,
    ) -> Result<ForwardPass> {
        if tokens.is_empty() {
            return Err(TensorError::Empty { op: "forward" }.into());
        }
        let hidden = self.encoder.encode(g, tokens, self.config.dropout, dropout_rng)?;
        let slot_predictions = self.slot_caps.predictions(g, hidden)?;
        let slot_routing = route(g, slot_predictions, self.config.iter_slot, None)?;
        let mut pass = ForwardPass {
            hidden,
            slot_predictions,
            slot_routing,
            intent_predictions: None,
            intent_routing: None,
            predicted_intent: None,
            rerouting: None,
        };
        let Some(intent_caps) = self.intent_caps.filter(|_| opts.intents) else {
            return Ok(pass);
        };
        let q = intent_caps.predictions(g, pass.slot_routing.activations)?;
        let intent_routing = route(g, q, self.config.iter_intent, None)?;
        let u = intent_routing.activations;
        let norms = activation_norms(&g.tensor(u));
        let predicted = argmax_first(&norms);
        pass.intent_predictions = Some(q);
        pass.intent_routing = Some(intent_routing);
        pass.predicted_intent = Some(predicted);

        if let Some(rr) = self.reroute.filter(|_| opts.reroute) {
            let chosen = opts.forced_intent.unwrap_or(predicted);
            let u_hat = g.row(u, chosen)?;
            let bias = rr.bias(g, slot_predictions, u_hat)?;
            pass.rerouting = Some(route(g, slot_predictions, self.config.iter_slot, Some(bias))?);
        }
        Ok(pass)
    }

    /// Scalar training loss for a forward pass.
    pub fn loss<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        pass: &ForwardPass,
        gold_tags: &[usize],
        gold_intent: usize,
        cfg: &LossConfig,
        objective: Objective,
    ) -> Result<Var> {
        let intent = |g: &mut Graph<'_, F>| -> Result<Var> {
            let u = pass
                .intent_activations()
                .ok_or_else(|| Error::Config("intent objective needs intent capsules".into()))?;
            Ok(intent_loss(g, u, gold_intent, cfg)?)
        };
        match objective {
            Objective::Slot => Ok(slot_loss(g, pass.slot_agreements(), gold_tags)?),
            Objective::Intent => intent(g),
            Objective::Joint => {
                let s = slot_loss(g, pass.slot_agreements(), gold_tags)?;
                let i = intent(g)?;
                Ok(joint_loss(g, s, Some(i), cfg.beta)?)
            }
        }
    }

    /// Tag and intent decisions in evaluation mode.
    pub fn decode<F: Real>(&self, params: &ParamSet<F>, tokens: &[usize]) -> Result<Decoded> {
        self.decode_with(params, tokens, ForwardOptions::default())
    }

    pub fn decode_with<F: Real>(
        &self,
        params: &ParamSet<F>,
        tokens: &[usize],
        opts: ForwardOptions,
    ) -> Result<Decoded> {
        let mut g = Graph::new(params);
        g.freeze_all();
        let pass = self.forward::<F, rand_chacha::ChaCha8Rng>(&mut g, tokens, opts, None)?;
        Ok(Self::decisions(&g, &pass))
    }

    /// Tag and intent decisions recorded in a forward pass.
    pub fn decisions<F: Real>(g: &Graph<'_, F>, pass: &ForwardPass) -> Decoded {
        let tags = assign_slots(&g.tensor(pass.slot_agreements()), None);
        let (intent, intent_norms) = match pass.intent_activations() {
            Some(u) => (
                pass.predicted_intent,
                activation_norms(&g.tensor(u)).into_iter().map(Real::as_f64).collect(),
            ),
            None => (None, Vec::new()),
        };
        Decoded {
            tags,
            intent,
            intent_norms,
        }
    }
}

fn argmax_first<F: Real>(xs: &[F]) -> usize {
    predict_intent(&Tensor::new(vec![xs.len(), 1], xs.to_vec()).expect("non-empty norms"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{param_grad_check, Gradients};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro() -> ModelConfig {
        ModelConfig {
            word_dim: 4,
            hidden_dim: 3,
            slot_dim: 4,
            intent_dim: 3,
            iter_slot: 2,
            iter_intent: 2,
            dropout: 0.0,
            reroute: true,
            alpha: 0.1,
            teacher_forcing: false,
        }
    }

    #[test]
    fn slot_only_model_has_no_intent_parameters() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = CapsuleNlu::register(&mut params, micro(), 6, 4, None, &mut rng);
        assert!(m.intent_params().is_empty());
        assert!(params.find("intent_caps.weight").is_none());
        assert!(params.find(RerouteParams::NAME).is_none());
        let d = m.decode(&params, &[2, 3]).unwrap();
        assert_eq!(d.tags.len(), 2);
        assert_eq!(d.intent, None);
    }

    #[test]
    fn attach_recovers_layout() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = CapsuleNlu::register(&mut params, micro(), 6, 4, Some(3), &mut rng);
        let again = CapsuleNlu::attach(&params, micro(), 4, Some(3)).unwrap();
        assert_eq!(m, again);
        assert!(CapsuleNlu::attach(&params, ModelConfig { slot_dim: 5, ..micro() }, 4, Some(3)).is_err());
        assert_eq!(
            m.decode(&params, &[1, 5, 2]).unwrap(),
            again.decode(&params, &[1, 5, 2]).unwrap()
        );
    }

    #[test]
    fn forward_shapes() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = CapsuleNlu::register(&mut params, micro(), 6, 4, Some(3), &mut rng);
        let mut g = Graph::new(&params);
        let pass = m
            .forward::<f64, ChaCha8Rng>(&mut g, &[1, 2, 3], ForwardOptions::default(), None)
            .unwrap();
        assert_eq!(g.shape(pass.slot_predictions), &[3, 4, 4]);
        assert_eq!(g.shape(pass.intent_predictions.unwrap()), &[4, 3, 3]);
        assert_eq!(g.shape(pass.slot_agreements()), &[3, 4]);
        assert!(pass.rerouting.is_some());
        assert_eq!(pass.slot_routing.iterations(), 2);
        assert!(m
            .forward::<f64, ChaCha8Rng>(&mut g, &[], ForwardOptions::default(), None)
            .is_err());
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = ModelConfig { alpha: 0.5, ..micro() };
        let m = CapsuleNlu::register(&mut params, cfg, 5, 4, Some(3), &mut rng);
        for id in params.ids().collect::<Vec<_>>() {
            for v in params.get_mut(id).data_mut() {
                *v = rand::Rng::gen_range(&mut rng, -0.8..0.8);
            }
        }
        let loss_cfg = LossConfig::default();
        let loss = |ps: &ParamSet<f64>, grads: Option<&mut Gradients<f64>>| -> Result<f64> {
            let mut g = Graph::new(ps);
            let pass = m.forward::<f64, ChaCha8Rng>(&mut g, &[2, 4, 3], ForwardOptions::default(), None)?;
            let l = m.loss(&mut g, &pass, &[0, 2, 3], 1, &loss_cfg, Objective::Joint)?;
            if let Some(grads) = grads {
                g.backward(l, grads)?;
            }
            Ok(g.scalar(l))
        };
        for r in param_grad_check(&params, loss, 1e-5).unwrap() {
            assert!(r.max_rel_error < 1e-4, "{}: {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn slot_objective_leaves_intent_gradients_zero() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = CapsuleNlu::register(&mut params, micro(), 5, 4, Some(3), &mut rng);
        let mut g = Graph::new(&params);
        let opts = ForwardOptions {
            reroute: false,
            ..Default::default()
        };
        let pass = m.forward::<f64, ChaCha8Rng>(&mut g, &[2, 4], opts, None).unwrap();
        let l = m
            .loss(&mut g, &pass, &[1, 0], 0, &LossConfig::default(), Objective::Slot)
            .unwrap();
        let mut grads = Gradients::zeros_like(&params);
        g.backward(l, &mut grads).unwrap();
        for id in m.intent_params() {
            assert!(grads.get(id).iter().all(|&v| v == 0.0));
        }
        assert!(grads.get(m.slot_caps.weight).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn intent_objective_with_frozen_slot_path() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = CapsuleNlu::register(&mut params, micro(), 5, 4, Some(3), &mut rng);
        let mut g = Graph::new(&params);
        for id in m.slot_path_params() {
            g.freeze(id);
        }
        let opts = ForwardOptions {
            reroute: false,
            ..Default::default()
        };
        let pass = m.forward::<f64, ChaCha8Rng>(&mut g, &[2, 4], opts, None).unwrap();
        let l = m
            .loss(&mut g, &pass, &[1, 0], 2, &LossConfig::default(), Objective::Intent)
            .unwrap();
        let mut grads = Gradients::zeros_like(&params);
        g.backward(l, &mut grads).unwrap();
        for id in m.slot_path_params() {
            assert!(grads.get(id).iter().all(|&v| v == 0.0));
        }
        let w = m.intent_caps.unwrap().weight;
        assert!(grads.get(w).iter().any(|&v| v != 0.0));
    }
}
