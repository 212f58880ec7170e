//! Global coordinator: temperature control, loss balancing, and the fixed
//! V → N → L → C schedule of one coordination round.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::linguistic::{LinguisticOutput, LinguisticUnit, LinguisticUnitParams, TextMode};
use super::nominal::{NameTable, NominalOutput, NominalUnit, PromptMeta, LAYOUT_KEY};
use super::visual::{DifficultyMode, Strategy, VisualInput, VisualOutput, VisualUnit, VisualUnitParams};
use super::{Agent, AblationFlags, AgentMemory, AgentState};
use crate::encoders::FrozenEncoders;
use crate::error::{Error, Result};
use crate::messaging::{AgentId, Message, MessageBus, Payload};
use crate::objectives::{balance_weights, clip, clip_grad, KAPPA_BOUNDS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordinatorParams {
    pub kappa_param: f64,
    pub w_con_param: f64,
    pub w_cls_param: f64,
}

impl Default for CoordinatorParams {
    fn default() -> Self {
        Self {
            kappa_param: 1.0,
            w_con_param: 1.0,
            w_cls_param: 1.0,
        }
    }
}

pub fn gc_temperature(kappa_param: f64) -> f64 {
    clip(kappa_param, KAPPA_BOUNDS)
}

pub fn gc_temperature_grad(kappa_param: f64) -> f64 {
    clip_grad(kappa_param, KAPPA_BOUNDS)
}

/// Weights used when dynamic balancing is switched off.
pub const FIXED_WEIGHTS: (f64, f64) = (0.5, 0.5);

pub struct Coordinator<'a> {
    pub params: &'a CoordinatorParams,
    pub adaptive_temperature: bool,
    pub dynamic_balance: bool,
}

#[derive(Debug, Clone)]
pub struct CoordinatorOutput {
    pub strategy: Strategy,
    pub difficulty: f64,
    pub image_features: Vec<DVector<f64>>,
    pub text_features: Vec<DVector<f64>>,
    pub layout: Vec<PromptMeta>,
    pub kappa: f64,
    pub w_con: f64,
    pub w_cls: f64,
}

impl Agent for Coordinator<'_> {
    type Input = [Message];
    type Output = CoordinatorOutput;

    fn id(&self) -> AgentId {
        AgentId::Coordinator
    }

    fn run(&self, inbound: &[Message], _memory: &AgentMemory) -> Result<(CoordinatorOutput, AgentMemory)> {
        let missing = |from, payload| Error::Protocol {
            from,
            to: AgentId::Coordinator,
            payload,
        };
        let from = |sender: AgentId| inbound.iter().filter(move |m| m.sender == sender);
        let (strategy, difficulty) = from(AgentId::Visual)
            .find_map(|m| match m.payload {
                Payload::Strategy { strategy, difficulty } => Some((strategy, difficulty)),
                _ => None,
            })
            .ok_or_else(|| missing(AgentId::Visual, "STRATEGY"))?;
        let features_from = |sender| {
            from(sender).find_map(|m| match &m.payload {
                Payload::Features(f) => Some(f.iter().map(|e| e.to_vector()).collect::<Vec<_>>()),
                _ => None,
            })
        };
        let image_features =
            features_from(AgentId::Visual).ok_or_else(|| missing(AgentId::Visual, "FEATURES"))?;
        let text_features =
            features_from(AgentId::Linguistic).ok_or_else(|| missing(AgentId::Linguistic, "FEATURES"))?;
        let layout_json = from(AgentId::Linguistic)
            .find_map(|m| match &m.payload {
                Payload::Metadata(map) => map.get(LAYOUT_KEY),
                _ => None,
            })
            .ok_or_else(|| missing(AgentId::Linguistic, "METADATA"))?;
        let layout: Vec<PromptMeta> = serde_json::from_str(layout_json)?;
        if layout.len() != text_features.len() {
            return Err(Error::InvalidMessage(format!(
                "layout lists {} prompts, {} text features received",
                layout.len(),
                text_features.len()
            )));
        }

        let kappa = if self.adaptive_temperature {
            gc_temperature(self.params.kappa_param)
        } else {
            1.0
        };
        let (w_con, w_cls) = if self.dynamic_balance {
            balance_weights(self.params.w_con_param, self.params.w_cls_param)?
        } else {
            FIXED_WEIGHTS
        };
        Ok((
            CoordinatorOutput {
                strategy,
                difficulty,
                image_features,
                text_features,
                layout,
                kappa,
                w_con,
                w_cls,
            },
            AgentMemory::Coordinator {
                last_kappa: Some(kappa),
            },
        ))
    }
}

/// Everything one round needs besides the batch: borrowed parameter
/// snapshots and the switches derived from ablation flags.
#[derive(Clone, Copy)]
pub struct Round<'a> {
    pub encoders: &'a FrozenEncoders,
    pub visual: &'a VisualUnitParams,
    pub linguistic: &'a LinguisticUnitParams,
    pub names: &'a NameTable,
    pub coordinator: &'a CoordinatorParams,
    pub flags: &'a AblationFlags,
    pub difficulty_mode: DifficultyMode,
    pub step_index: u64,
}

impl<'a> Round<'a> {
    pub fn visual_unit(&self) -> VisualUnit<'a> {
        VisualUnit {
            params: self.visual,
            difficulty_mode: self.difficulty_mode,
            pinned: self.flags.pinned_strategy(),
            emit_context: self.flags.emits_visual_context(),
        }
    }

    pub fn nominal_unit(&self) -> NominalUnit<'a> {
        NominalUnit {
            table: self.names,
            vocab: &self.encoders.vocab,
            inject: self.flags.uses_name_embeddings(),
            exchange: self.flags.context_exchange(),
        }
    }

    pub fn linguistic_unit(&self) -> LinguisticUnit<'a> {
        LinguisticUnit {
            encoders: self.encoders,
            params: self.linguistic,
            mode: if self.flags.contextual_text() {
                TextMode::Contextual
            } else {
                TextMode::Standard
            },
        }
    }

    pub fn coordinator_unit(&self) -> Coordinator<'a> {
        Coordinator {
            params: self.coordinator,
            adaptive_temperature: self.flags.adaptive_temperature(),
            dynamic_balance: self.flags.dynamic_balance(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentStates {
    pub visual: AgentState,
    pub nominal: AgentState,
    pub linguistic: AgentState,
    pub coordinator: AgentState,
}

impl Default for AgentStates {
    fn default() -> Self {
        Self {
            visual: AgentState::new(AgentId::Visual),
            nominal: AgentState::new(AgentId::Nominal),
            linguistic: AgentState::new(AgentId::Linguistic),
            coordinator: AgentState::new(AgentId::Coordinator),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutputs {
    pub visual: VisualOutput,
    pub nominal: NominalOutput,
    pub linguistic: LinguisticOutput,
    pub coordinator: CoordinatorOutput,
    pub states: AgentStates,
}

fn post_all(bus: &mut MessageBus, sender: AgentId, step: u64, outbox: &[(AgentId, Payload)]) -> Result<()> {
    for (to, payload) in outbox {
        bus.post(Message::new(sender, *to, step, payload.clone()))?;
    }
    Ok(())
}

/// Runs one round over `features` (frozen image embeddings of the batch).
pub fn gc_coordinate(
    bus: &mut MessageBus,
    round: &Round<'_>,
    features: &[DVector<f64>],
    states: &AgentStates,
) -> Result<StepOutputs> {
    for id in AgentId::ALL {
        if !bus.is_registered(id) {
            return Err(Error::Routing(id));
        }
    }
    let step = round.step_index;

    let (visual, v_state) = round.visual_unit().step(
        &VisualInput {
            features: features.to_vec(),
        },
        &states.visual,
    )?;
    post_all(bus, AgentId::Visual, step, &visual.outbox)?;

    let inbound = bus.drain(AgentId::Nominal)?;
    let (nominal, n_state) = round.nominal_unit().step(&inbound, &states.nominal)?;
    post_all(bus, AgentId::Nominal, step, &nominal.outbox)?;

    let inbound = bus.drain(AgentId::Linguistic)?;
    let (linguistic, l_state) = round.linguistic_unit().step(&inbound, &states.linguistic)?;
    post_all(bus, AgentId::Linguistic, step, &linguistic.outbox)?;

    let inbound = bus.drain(AgentId::Coordinator)?;
    let (coordinator, c_state) = round.coordinator_unit().step(&inbound, &states.coordinator)?;

    Ok(StepOutputs {
        visual,
        nominal,
        linguistic,
        coordinator,
        states: AgentStates {
            visual: v_state,
            nominal: n_state,
            linguistic: l_state,
            coordinator: c_state,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temperature_clip_examples() {
        assert_eq!(gc_temperature(1.0), 1.0);
        assert_eq!(gc_temperature(0.1), 0.5);
        assert_eq!(gc_temperature(5.0), 2.0);
        assert_eq!(gc_temperature_grad(1.3), 1.0);
        assert_eq!(gc_temperature_grad(0.1), 0.0);
        assert_eq!(gc_temperature_grad(5.0), 0.0);
    }

    #[test]
    fn coordinator_names_missing_edge() {
        let params = CoordinatorParams::default();
        let c = Coordinator {
            params: &params,
            adaptive_temperature: true,
            dynamic_balance: true,
        };
        let err = c.run(&[], &AgentMemory::initial(AgentId::Coordinator)).unwrap_err();
        assert!(matches!(
            err,
            Error::Protocol {
                from: AgentId::Visual,
                to: AgentId::Coordinator,
                payload: "STRATEGY"
            }
        ));
    }
}
