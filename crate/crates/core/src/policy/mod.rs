//! Two-level configuration policy: masked structure heads, then sequential
//! prompt selection per active agent.

mod mask;
mod prompt;
mod structure;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use mask::{enumerate_valid, MaskPreset, MaskRow, MaskSpec, MaskTable, WorkflowMaskSpec};
pub use prompt::{sample_prompts, PromptPolicy, PromptRollout, PromptStep, StepEval};
pub use structure::{
    head_choices, head_dists, head_mask, log_prob_structure, sample_structure, value_backprop,
    value_estimate, StructureEval, StructurePolicy, StructureSample, HEAD_NAMES, HEAD_SIZES,
    N_HEADS, STRUCTURE_OUTPUTS,
};

use crate::domain::{AtomLibrary, Configuration};
use crate::error::{Error, Result};
use crate::features::StateEmbedding;
use crate::numeric::DenseNet;

/// Anything that maps a state to a configuration.
pub trait ConfigPolicy {
    fn act(&self, state: &StateEmbedding, rng: &mut dyn rand::RngCore) -> Result<Configuration>;
    fn greedy(&self, state: &StateEmbedding) -> Result<Configuration>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { hidden: vec![128, 128] }
    }
}

/// A sampled configuration with the cached quantities PPO needs.
#[derive(Debug, Clone)]
pub struct Decision {
    pub config: Configuration,
    pub structure: StructureSample,
    pub prompts: PromptRollout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalPolicy {
    pub structure: StructurePolicy,
    pub prompt: PromptPolicy,
    pub table: MaskTable,
    pub atoms: AtomLibrary,
}

impl HierarchicalPolicy {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        cfg: &PolicyConfig,
        table: MaskTable,
        atoms: AtomLibrary,
        rng: &mut R,
    ) -> Result<Self> {
        table.validate()?;
        Ok(Self {
            structure: StructurePolicy::new(state_dim, &cfg.hidden, rng),
            prompt: PromptPolicy::new(state_dim, atoms.len(), &cfg.hidden, rng),
            table,
            atoms,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.structure.input_size()
    }

    pub fn sample<R: Rng + ?Sized>(&self, state: &StateEmbedding, rng: &mut R) -> Result<Decision> {
        let x = state.input_vector();
        let structure = self.structure.sample(&self.table, &x, rng)?;
        let prompts = self.prompt.sample(&self.atoms, &x, &structure.action, rng)?;
        Ok(Decision {
            config: Configuration::new(structure.action, prompts.sequences.clone()),
            structure,
            prompts,
        })
    }

    pub fn mode(&self, state: &StateEmbedding) -> Result<Configuration> {
        let x = state.input_vector();
        let a = self.structure.mode(&self.table, &x)?;
        let prompts = self.prompt.mode(&self.atoms, &x, &a)?;
        Ok(Configuration::new(a, prompts.sequences))
    }

    /// Joint log-probability of a full configuration.
    pub fn log_prob(&self, state: &StateEmbedding, config: &Configuration) -> Result<f64> {
        let x = state.input_vector();
        let ls = self.structure.log_prob(&self.table, &x, &config.structure)?;
        let lp = self
            .prompt
            .replay(&self.atoms, &x, &config.structure, &config.prompts)?
            .log_prob();
        Ok(ls + lp)
    }

    /// Writes the four networks as `<name>.bin` files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, net) in self.nets() {
            net.write_to(BufWriter::new(File::create(dir.join(format!("{name}.bin")))?))?;
        }
        Ok(())
    }

    /// Loads networks saved by [`save`](Self::save); the table and library
    /// come from configuration.
    pub fn load(dir: &Path, table: MaskTable, atoms: AtomLibrary) -> Result<Self> {
        let read = |name: &str| -> Result<DenseNet> {
            DenseNet::read_from(BufReader::new(File::open(dir.join(format!("{name}.bin")))?))
        };
        let structure = StructurePolicy {
            net: read("structure")?,
            value: read("structure_value")?,
        };
        if structure.net.output_size() != STRUCTURE_OUTPUTS {
            return Err(Error::shape("structure net output", STRUCTURE_OUTPUTS, structure.net.output_size()));
        }
        let state_dim = structure.net.input_size();
        let prompt = PromptPolicy::from_nets(read("prompt")?, read("prompt_value")?, state_dim, atoms.len())?;
        table.validate()?;
        Ok(Self {
            structure,
            prompt,
            table,
            atoms,
        })
    }

    fn nets(&self) -> [(&'static str, &DenseNet); 4] {
        [
            ("structure", &self.structure.net),
            ("structure_value", &self.structure.value),
            ("prompt", &self.prompt.net),
            ("prompt_value", &self.prompt.value),
        ]
    }
}

impl ConfigPolicy for HierarchicalPolicy {
    fn act(&self, state: &StateEmbedding, rng: &mut dyn rand::RngCore) -> Result<Configuration> {
        Ok(self.sample(state, rng)?.config)
    }

    fn greedy(&self, state: &StateEmbedding) -> Result<Configuration> {
        self.mode(state)
    }
}
