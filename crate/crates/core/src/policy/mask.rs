//! Workflow-conditioned validity masks over every structure dimension.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{
    BudgetTier, StructureAction, ToolSet, Workflow, N_AGENTS, N_TIERS, N_TOOL_SUBSETS, N_WORKFLOWS,
};
use crate::error::{Error, Result};

/// Masks for the sub-heads once a workflow is fixed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskRow {
    pub tools: [[bool; N_TOOL_SUBSETS]; 2],
    pub budgets: [[bool; N_TIERS]; N_AGENTS],
}

impl MaskRow {
    fn all_ones() -> Self {
        Self {
            tools: [[true; N_TOOL_SUBSETS]; 2],
            budgets: [[true; N_TIERS]; N_AGENTS],
        }
    }

    fn only_first<const N: usize>() -> [bool; N] {
        let mut m = [false; N];
        m[0] = true;
        m
    }

    /// Product of the sub-head support sizes.
    pub fn count(&self) -> usize {
        let ones = |m: &[bool]| m.iter().filter(|&&b| b).count();
        ones(&self.tools[0])
            * ones(&self.tools[1])
            * self.budgets.iter().map(|b| ones(b)).product::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskTable {
    pub workflows: [bool; N_WORKFLOWS],
    pub rows: [MaskRow; N_WORKFLOWS],
}

impl Default for MaskTable {
    /// Agent-2 tools only where the topology lets agent 2 use them; budgets
    /// for inactive agent slots pinned to Low.
    fn default() -> Self {
        let rows = Workflow::ALL.map(|w| {
            let mut row = MaskRow::all_ones();
            if !w.agent2_tools_allowed() {
                row.tools[1] = MaskRow::only_first();
            }
            for agent in w.agents_active()..N_AGENTS {
                row.budgets[agent] = MaskRow::only_first();
            }
            row
        });
        Self {
            workflows: [true; N_WORKFLOWS],
            rows,
        }
    }
}

impl MaskTable {
    pub fn all_ones() -> Self {
        Self {
            workflows: [true; N_WORKFLOWS],
            rows: std::array::from_fn(|_| MaskRow::all_ones()),
        }
    }

    /// Intersects this table with explicit allow-lists for each dimension.
    pub fn restricted(
        &self,
        workflows: &[Workflow],
        tool_subsets: &[ToolSet],
        tiers: &[BudgetTier],
    ) -> Result<Self> {
        let mut out = self.clone();
        for w in Workflow::ALL {
            out.workflows[w.id()] &= workflows.contains(&w);
        }
        for row in &mut out.rows {
            for head in &mut row.tools {
                for (i, m) in head.iter_mut().enumerate() {
                    *m &= tool_subsets.iter().any(|t| t.index() == i);
                }
            }
            for head in &mut row.budgets {
                for (i, m) in head.iter_mut().enumerate() {
                    *m &= tiers.iter().any(|t| t.index() == i);
                }
            }
        }
        out.validate()?;
        Ok(out)
    }

    pub fn row(&self, w: Workflow) -> &MaskRow {
        &self.rows[w.id()]
    }

    pub fn enabled_workflows(&self) -> impl Iterator<Item = Workflow> + '_ {
        Workflow::ALL.into_iter().filter(|w| self.workflows[w.id()])
    }

    /// Every enabled workflow must leave at least one choice in every head.
    pub fn validate(&self) -> Result<()> {
        if !self.workflows.iter().any(|&b| b) {
            return Err(Error::InvalidMask("no workflow enabled".into()));
        }
        for w in self.enabled_workflows() {
            let row = self.row(w);
            for (k, head) in row.tools.iter().enumerate() {
                if !head.iter().any(|&b| b) {
                    return Err(Error::InvalidMask(format!("{w}: tools{} fully masked", k + 1)));
                }
            }
            for (k, head) in row.budgets.iter().enumerate() {
                if !head.iter().any(|&b| b) {
                    return Err(Error::InvalidMask(format!("{w}: budget{} fully masked", k + 1)));
                }
            }
        }
        Ok(())
    }

    pub fn allows(&self, a: &StructureAction) -> bool {
        if !self.workflows[a.workflow.id()] {
            return false;
        }
        let row = self.row(a.workflow);
        (0..2).all(|k| row.tools[k][a.tools[k].index()])
            && (0..N_AGENTS).all(|k| row.budgets[k][a.budgets[k].index()])
    }

    pub fn count_closed_form(&self) -> usize {
        self.enabled_workflows().map(|w| self.row(w).count()).sum()
    }

    /// Valid actions in index order.
    pub fn valid_actions(&self) -> impl Iterator<Item = StructureAction> + '_ {
        (0..crate::domain::STRUCTURE_SPACE)
            .map(|i| StructureAction::decode(i).expect("index in range"))
            .filter(|a| self.allows(a))
    }

    pub fn count_exhaustive(&self) -> usize {
        self.valid_actions().count()
    }
}

/// Number of valid structure actions, by explicit iteration; checked against
/// the closed-form product sum.
pub fn enumerate_valid(table: &MaskTable) -> usize {
    let n = table.count_exhaustive();
    assert_eq!(
        n,
        table.count_closed_form(),
        "closed-form and exhaustive counts disagree"
    );
    n
}

/// Human-editable mask configuration: a preset plus per-workflow overrides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSpec {
    pub preset: MaskPreset,
    pub workflows: BTreeMap<String, WorkflowMaskSpec>,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            preset: MaskPreset::Default,
            workflows: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPreset {
    Default,
    AllOnes,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowMaskSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enabled: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tools1: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tools2: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget1: Option<Vec<BudgetTier>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget2: Option<Vec<BudgetTier>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget3: Option<Vec<BudgetTier>>,
}

impl MaskSpec {
    pub fn build(&self) -> Result<MaskTable> {
        let mut table = match self.preset {
            MaskPreset::Default => MaskTable::default(),
            MaskPreset::AllOnes => MaskTable::all_ones(),
        };
        for (name, spec) in &self.workflows {
            let w = Workflow::from_name(name)
                .ok_or_else(|| Error::config(format!("masks.workflows.{name}"), "unknown workflow"))?;
            if let Some(enabled) = spec.enabled {
                table.workflows[w.id()] = enabled;
            }
            let row = &mut table.rows[w.id()];
            for (k, list) in [&spec.tools1, &spec.tools2].into_iter().enumerate() {
                if let Some(list) = list {
                    let mut m = [false; N_TOOL_SUBSETS];
                    for &i in list {
                        if i >= N_TOOL_SUBSETS {
                            return Err(Error::config(
                                format!("masks.workflows.{name}.tools{}", k + 1),
                                format!("tool subset index {i} out of range 0..16"),
                            ));
                        }
                        m[i] = true;
                    }
                    row.tools[k] = m;
                }
            }
            for (k, list) in [&spec.budget1, &spec.budget2, &spec.budget3]
                .into_iter()
                .enumerate()
            {
                if let Some(list) = list {
                    let mut m = [false; N_TIERS];
                    for t in list {
                        m[t.index()] = true;
                    }
                    row.budgets[k] = m;
                }
            }
        }
        table.validate()?;
        Ok(table)
    }
}
