//! The four cooperating agents and the coordination round that wires them
//! together over the message bus.
//!
//! Every agent is a pure function `(input, state) -> (output, state')`. The
//! [`Agent::step`] provided method enforces the shared contract: the state
//! must belong to the agent and its step counter advances by exactly one.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::messaging::AgentId;

pub mod coordinator;
pub mod linguistic;
pub mod nominal;
pub mod visual;

pub use coordinator::{
    gc_coordinate, gc_temperature, gc_temperature_grad, AgentStates, Coordinator,
    CoordinatorOutput, CoordinatorParams, Round, StepOutputs, FIXED_WEIGHTS,
};
pub use linguistic::{
    ctx_integrate, ctx_integrate_backward, encode_prompt, lcu_encode, ContextIntegrator,
    EncodedPrompt, IntegratorCache,
    LinguisticOutput, LinguisticUnit, LinguisticUnitParams, TextMode,
};
pub use nominal::{
    neu_context_exchange, neu_generate_prompt, neu_init_concepts, Description, NameTable,
    NominalOutput, NominalUnit, PromptMeta, PromptTokens,
};
pub use visual::{
    estimate_difficulty, select_strategy, vpu_encode, vpu_encode_backward, vpu_encode_raw,
    DifficultyMode, EncodingMode, Strategy, VisualInput, VisualOutput, VisualUnit, VisualUnitParams,
};

/// Agent-specific memory carried between steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "agent", rename_all = "snake_case")]
pub enum AgentMemory {
    Visual {
        /// Running mean of the batch-mean visual feature over all steps.
        running_mean: Vec<f64>,
        batches: u64,
    },
    Linguistic {
        last_context: Option<Vec<f64>>,
    },
    Nominal {
        last_strategy: Option<Strategy>,
    },
    Coordinator {
        last_kappa: Option<f64>,
    },
}

impl AgentMemory {
    pub fn initial(agent: AgentId) -> Self {
        match agent {
            AgentId::Visual => AgentMemory::Visual {
                running_mean: Vec::new(),
                batches: 0,
            },
            AgentId::Linguistic => AgentMemory::Linguistic { last_context: None },
            AgentId::Nominal => AgentMemory::Nominal { last_strategy: None },
            AgentId::Coordinator => AgentMemory::Coordinator { last_kappa: None },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub agent: AgentId,
    pub step_counter: u64,
    pub memory: AgentMemory,
}

impl AgentState {
    pub fn new(agent: AgentId) -> Self {
        Self {
            agent,
            step_counter: 0,
            memory: AgentMemory::initial(agent),
        }
    }
}

pub trait Agent {
    type Input: ?Sized;
    type Output;

    fn id(&self) -> AgentId;

    /// The agent's transition on its own memory. Implementations must be
    /// deterministic in `(input, memory)`.
    fn run(&self, input: &Self::Input, memory: &AgentMemory) -> Result<(Self::Output, AgentMemory)>;

    fn step(&self, input: &Self::Input, state: &AgentState) -> Result<(Self::Output, AgentState)> {
        if state.agent != self.id() {
            return Err(Error::StateMismatch {
                agent: self.id(),
                state: state.agent,
            });
        }
        let (out, memory) = self.run(input, &state.memory)?;
        Ok((
            out,
            AgentState {
                agent: state.agent,
                step_counter: state.step_counter + 1,
                memory,
            },
        ))
    }
}

/// Component switches for the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Ablation {
    /// Visual unit passes raw encoder features through: no robust encoding,
    /// no difficulty assessment, no visual context.
    NoVisual,
    /// Linguistic unit encodes prompts without visual context.
    NoLing,
    /// Nominal unit uses pretrained vocabulary only: no name embeddings and
    /// no context exchange.
    NoNom,
    /// Coordinator uses fixed temperature 1 and fixed loss weights.
    NoCoord,
    NoCtxExch,
    /// The context integration MLP becomes one linear map.
    SimpleConcat,
    /// Strategy pinned to robust encoding.
    NoDiff,
    /// Loss weights fixed at (0.5, 0.5).
    NoDynbal,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::NoVisual,
        Ablation::NoLing,
        Ablation::NoNom,
        Ablation::NoCoord,
        Ablation::NoCtxExch,
        Ablation::SimpleConcat,
        Ablation::NoDiff,
        Ablation::NoDynbal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::NoVisual => "NO_VISUAL",
            Ablation::NoLing => "NO_LING",
            Ablation::NoNom => "NO_NOM",
            Ablation::NoCoord => "NO_COORD",
            Ablation::NoCtxExch => "NO_CTX_EXCH",
            Ablation::SimpleConcat => "SIMPLE_CONCAT",
            Ablation::NoDiff => "NO_DIFF",
            Ablation::NoDynbal => "NO_DYNBAL",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == norm)
            .ok_or_else(|| Error::UnknownFlag(s.to_owned()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AblationFlags(BTreeSet<Ablation>);

impl AblationFlags {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with(mut self, a: Ablation) -> Self {
        self.0.insert(a);
        self
    }

    pub fn has(&self, a: Ablation) -> bool {
        self.0.contains(&a)
    }

    pub fn iter(&self) -> impl Iterator<Item = Ablation> + '_ {
        self.0.iter().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Parses a comma-separated flag list; empty input means no flags.
    pub fn parse_list(s: &str) -> Result<Self> {
        let mut flags = Self::none();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            flags.0.insert(part.parse()?);
        }
        Ok(flags)
    }

    pub fn emits_visual_context(&self) -> bool {
        !self.has(Ablation::NoVisual)
    }

    pub fn uses_name_embeddings(&self) -> bool {
        !self.has(Ablation::NoNom)
    }

    pub fn contextual_text(&self) -> bool {
        !self.has(Ablation::NoLing) && !self.has(Ablation::NoVisual)
    }

    pub fn context_exchange(&self) -> bool {
        !self.has(Ablation::NoCtxExch) && !self.has(Ablation::NoNom)
    }

    pub fn adaptive_temperature(&self) -> bool {
        !self.has(Ablation::NoCoord)
    }

    pub fn dynamic_balance(&self) -> bool {
        !self.has(Ablation::NoCoord) && !self.has(Ablation::NoDynbal)
    }

    pub fn pinned_strategy(&self) -> Option<Strategy> {
        if self.has(Ablation::NoVisual) {
            Some(Strategy::Standard)
        } else if self.has(Ablation::NoDiff) {
            Some(Strategy::Robust)
        } else {
            None
        }
    }
}

impl fmt::Display for AblationFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.0.iter().map(|a| a.as_str()).collect();
        f.write_str(&names.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_parsing() {
        let f = AblationFlags::parse_list("no_nom, SIMPLE_CONCAT").unwrap();
        assert!(f.has(Ablation::NoNom) && f.has(Ablation::SimpleConcat));
        assert_eq!(f.to_string(), "NO_NOM,SIMPLE_CONCAT");
        assert!(AblationFlags::parse_list("").unwrap().is_empty());
        assert!(matches!(
            AblationFlags::parse_list("NO_SUCH"),
            Err(Error::UnknownFlag(_))
        ));
    }

    #[test]
    fn derived_switches() {
        let f = AblationFlags::none().with(Ablation::NoVisual);
        assert!(!f.contextual_text());
        assert_eq!(f.pinned_strategy(), Some(Strategy::Standard));
        let f = AblationFlags::none().with(Ablation::NoCoord);
        assert!(!f.dynamic_balance() && !f.adaptive_temperature());
        let f = AblationFlags::none().with(Ablation::NoNom);
        assert!(!f.context_exchange());
    }
}
