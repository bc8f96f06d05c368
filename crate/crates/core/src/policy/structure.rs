use rand::Rng;

use super::mask::MaskTable;
use crate::domain::{
    BudgetTier, StructureAction, ToolSet, Workflow, N_AGENTS, N_TIERS, N_TOOL_SUBSETS, N_WORKFLOWS,
};
use crate::error::{Error, Result};
use crate::numeric::{DenseNet, ForwardCache, MaskedCategorical};

pub const N_HEADS: usize = 6;
pub const HEAD_SIZES: [usize; N_HEADS] = [N_WORKFLOWS, N_TOOL_SUBSETS, N_TOOL_SUBSETS, N_TIERS, N_TIERS, N_TIERS];
pub const HEAD_NAMES: [&str; N_HEADS] = ["workflow", "tools1", "tools2", "budget1", "budget2", "budget3"];
pub const STRUCTURE_OUTPUTS: usize = N_WORKFLOWS + 2 * N_TOOL_SUBSETS + N_AGENTS * N_TIERS;

fn head_offsets() -> [usize; N_HEADS] {
    let mut off = [0; N_HEADS];
    for h in 1..N_HEADS {
        off[h] = off[h - 1] + HEAD_SIZES[h - 1];
    }
    off
}

/// Per-head choice indices of a structure action.
pub fn head_choices(a: &StructureAction) -> [usize; N_HEADS] {
    [
        a.workflow.id(),
        a.tools[0].index(),
        a.tools[1].index(),
        a.budgets[0].index(),
        a.budgets[1].index(),
        a.budgets[2].index(),
    ]
}

fn action_from_choices(c: [usize; N_HEADS]) -> Result<StructureAction> {
    Ok(StructureAction {
        workflow: Workflow::from_id(c[0])?,
        tools: [ToolSet::from_index(c[1])?, ToolSet::from_index(c[2])?],
        budgets: [
            BudgetTier::from_index(c[3])?,
            BudgetTier::from_index(c[4])?,
            BudgetTier::from_index(c[5])?,
        ],
    })
}

/// Mask for head `h` given the already-chosen workflow (ignored for h = 0).
pub fn head_mask(table: &MaskTable, h: usize, w: Workflow) -> Vec<bool> {
    let row = table.row(w);
    match h {
        0 => table.workflows.to_vec(),
        1 | 2 => row.tools[h - 1].to_vec(),
        _ => row.budgets[h - 3].to_vec(),
    }
}

/// Builds the six masked head distributions from raw logits, with the
/// sub-heads conditioned on `w`. Sampling and scoring both go through here.
pub fn head_dists(logits: &[f64], table: &MaskTable, w: Workflow) -> Result<Vec<MaskedCategorical>> {
    if logits.len() != STRUCTURE_OUTPUTS {
        return Err(Error::shape("structure logits", STRUCTURE_OUTPUTS, logits.len()));
    }
    let off = head_offsets();
    (0..N_HEADS)
        .map(|h| {
            let z = logits[off[h]..off[h] + HEAD_SIZES[h]].to_vec();
            MaskedCategorical::new(z, head_mask(table, h, w)).map_err(|e| match e {
                Error::InvalidMask(m) => Error::InvalidMask(format!("{}: {m}", HEAD_NAMES[h])),
                other => other,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct StructureSample {
    pub action: StructureAction,
    pub log_prob: f64,
    pub entropies: [f64; N_HEADS],
}

/// Scored action with everything needed to backpropagate through it.
#[derive(Debug, Clone)]
pub struct StructureEval {
    pub cache: ForwardCache,
    pub dists: Vec<MaskedCategorical>,
    pub choices: [usize; N_HEADS],
    pub log_prob: f64,
    pub entropy: f64,
}

/// Factorized structure policy with a separate scalar value network.
#[derive(Debug, Clone, PartialEq)]
pub struct StructurePolicy {
    pub net: DenseNet,
    pub value: DenseNet,
}

impl StructurePolicy {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let sizes = |out: usize| {
            let mut s = vec![input_dim];
            s.extend_from_slice(hidden);
            s.push(out);
            s
        };
        Self {
            net: DenseNet::new(&sizes(STRUCTURE_OUTPUTS), 0.01, rng),
            value: DenseNet::new(&sizes(1), 0.01, rng),
        }
    }

    pub fn input_size(&self) -> usize {
        self.net.input_size()
    }

    pub fn sample<R: Rng + ?Sized>(&self, table: &MaskTable, input: &[f64], rng: &mut R) -> Result<StructureSample> {
        let logits = self.net.forward(input)?;
        let wdist = MaskedCategorical::new(logits[..N_WORKFLOWS].to_vec(), table.workflows.to_vec())?;
        let (w_id, _) = wdist.sample(rng);
        let w = Workflow::from_id(w_id)?;
        let dists = head_dists(&logits, table, w)?;
        let mut choices = [w_id; N_HEADS];
        let mut log_prob = 0.0;
        let mut entropies = [0.0; N_HEADS];
        for (h, d) in dists.iter().enumerate() {
            if h > 0 {
                choices[h] = d.sample(rng).0;
            }
            log_prob += d.log_prob(choices[h])?;
            entropies[h] = d.entropy();
        }
        Ok(StructureSample {
            action: action_from_choices(choices)?,
            log_prob,
            entropies,
        })
    }

    pub fn evaluate(&self, table: &MaskTable, input: &[f64], a: &StructureAction) -> Result<StructureEval> {
        let cache = self.net.forward_cached(input)?;
        let dists = head_dists(cache.output(), table, a.workflow)?;
        let choices = head_choices(a);
        let mut log_prob = 0.0;
        for (h, d) in dists.iter().enumerate() {
            log_prob += d.log_prob(choices[h]).map_err(|_| {
                Error::InvalidAction(format!("{} choice {} masked for {a:?}", HEAD_NAMES[h], choices[h]))
            })?;
        }
        let entropy = dists.iter().map(MaskedCategorical::entropy).sum();
        Ok(StructureEval {
            cache,
            dists,
            choices,
            log_prob,
            entropy,
        })
    }

    pub fn log_prob(&self, table: &MaskTable, input: &[f64], a: &StructureAction) -> Result<f64> {
        Ok(self.evaluate(table, input, a)?.log_prob)
    }

    /// Per-head argmax, workflow first.
    pub fn mode(&self, table: &MaskTable, input: &[f64]) -> Result<StructureAction> {
        let logits = self.net.forward(input)?;
        let wdist = MaskedCategorical::new(logits[..N_WORKFLOWS].to_vec(), table.workflows.to_vec())?;
        let w = Workflow::from_id(wdist.mode())?;
        let dists = head_dists(&logits, table, w)?;
        let mut choices = [0; N_HEADS];
        for (h, d) in dists.iter().enumerate() {
            choices[h] = d.mode();
        }
        action_from_choices(choices)
    }

    /// Accumulates `d_logp * grad(log pi(a)) + d_entropy * grad(H)` into
    /// `grads`, where H is the summed head entropy under the action's workflow.
    pub fn backprop(&self, eval: &StructureEval, d_logp: f64, d_entropy: f64, grads: &mut [f64]) -> Result<()> {
        let mut upstream = Vec::with_capacity(STRUCTURE_OUTPUTS);
        for (h, d) in eval.dists.iter().enumerate() {
            let gl = d.log_prob_grad(eval.choices[h]);
            let ge = d.entropy_grad();
            upstream.extend(gl.iter().zip(&ge).map(|(l, e)| d_logp * l + d_entropy * e));
        }
        self.net.backward_into(&eval.cache, &upstream, grads)?;
        Ok(())
    }
}

/// Scalar output of a value network.
pub fn value_estimate(net: &DenseNet, input: &[f64]) -> Result<f64> {
    let out = net.forward(input)?;
    if out.len() != 1 {
        return Err(Error::shape("value output", 1, out.len()));
    }
    Ok(out[0])
}

/// Accumulates the gradient of `coef * (V(x) - target)^2` into `grads` and
/// returns the squared error.
pub fn value_backprop(net: &DenseNet, input: &[f64], target: f64, coef: f64, grads: &mut [f64]) -> Result<f64> {
    let cache = net.forward_cached(input)?;
    let err = cache.output()[0] - target;
    net.backward_into(&cache, &[2.0 * coef * err], grads)?;
    Ok(err * err)
}

pub fn sample_structure<R: Rng + ?Sized>(
    policy: &StructurePolicy,
    table: &MaskTable,
    input: &[f64],
    rng: &mut R,
) -> Result<StructureSample> {
    policy.sample(table, input, rng)
}

pub fn log_prob_structure(
    policy: &StructurePolicy,
    table: &MaskTable,
    input: &[f64],
    a: &StructureAction,
) -> Result<f64> {
    policy.log_prob(table, input, a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::mask::MaskRow;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy(dim: usize, seed: u64) -> StructurePolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = StructurePolicy::new(dim, &[16], &mut rng);
        // Larger output scale so the heads are not near-uniform.
        for v in p.net.params_mut() {
            *v *= 20.0;
        }
        p
    }

    fn one_hot<const N: usize>(i: usize) -> [bool; N] {
        let mut m = [false; N];
        m[i] = true;
        m
    }

    #[test]
    fn forced_table_is_deterministic() {
        let mut t = MaskTable::all_ones();
        t.workflows = one_hot(4);
        t.rows[4] = MaskRow {
            tools: [one_hot(3), one_hot(0)],
            budgets: [one_hot(2), one_hot(1), one_hot(0)],
        };
        let p = policy(5, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = p.sample(&t, &[0.3, -0.2, 0.1, 0.0, 1.0], &mut rng).unwrap();
        assert_eq!(s.action.workflow.id(), 4);
        assert_eq!(s.log_prob, 0.0);
        assert!(s.entropies.iter().all(|&h| h == 0.0));
    }

    #[test]
    fn direct_never_gets_agent2_tools() {
        let t = MaskTable::default();
        let mut p = policy(3, 3);
        // Push the workflow head towards Direct so it is drawn often.
        let n = p.net.params().len();
        let out_bias_start = n - STRUCTURE_OUTPUTS;
        p.net.params_mut()[out_bias_start] += 5.0;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut direct = 0;
        for _ in 0..100_000 {
            let s = p.sample(&t, &[0.1, 0.2, 0.3], &mut rng).unwrap();
            if s.action.workflow == Workflow::Direct {
                direct += 1;
                assert_eq!(s.action.tools[1], ToolSet::EMPTY);
            }
            assert!(t.allows(&s.action));
        }
        assert!(direct > 1000);
    }

    #[test]
    fn joint_log_prob_is_product_of_head_softmaxes() {
        let t = MaskTable::default();
        let p = policy(4, 5);
        let x = [0.5, -1.0, 0.25, 0.0];
        let logits = p.net.forward(&x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let s = p.sample(&t, &x, &mut rng).unwrap();
            // Independent recomputation: plain masked softmax per head.
            let c = head_choices(&s.action);
            let off = head_offsets();
            let mut prod = 1.0;
            for h in 0..N_HEADS {
                let mask = head_mask(&t, h, s.action.workflow);
                let z = &logits[off[h]..off[h] + HEAD_SIZES[h]];
                let denom: f64 = z.iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| v.exp()).sum();
                prod *= z[c[h]].exp() / denom;
            }
            assert!((s.log_prob.exp() - prod).abs() < 1e-12);
            let lp = p.log_prob(&t, &x, &s.action).unwrap();
            assert!((lp - s.log_prob).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_action_errors() {
        let t = MaskTable::default();
        let p = policy(2, 7);
        let a = StructureAction {
            workflow: Workflow::Direct,
            tools: [ToolSet::EMPTY, ToolSet::from_tools(&[0]).unwrap()],
            budgets: [BudgetTier::Low; 3],
        };
        assert!(matches!(p.log_prob(&t, &[0.0, 0.0], &a), Err(Error::InvalidAction(_))));
    }

    #[test]
    fn reduced_space_normalizes() {
        let t = MaskTable::default()
            .restricted(
                &[Workflow::Direct, Workflow::ReasonVerifyAns, Workflow::AutonomousAgent],
                &[
                    ToolSet::EMPTY,
                    ToolSet::from_tools(&[0]).unwrap(),
                    ToolSet::from_tools(&[1]).unwrap(),
                    ToolSet::from_tools(&[0, 1]).unwrap(),
                ],
                &[BudgetTier::Low, BudgetTier::High],
            )
            .unwrap();
        let p = policy(3, 8);
        let x = [0.2, 0.4, -0.6];
        let total: f64 = t
            .valid_actions()
            .map(|a| p.log_prob(&t, &x, &a).unwrap().exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let t = MaskTable::default();
        let p = policy(3, 9);
        let x = [0.3, -0.1, 0.7];
        let a = p.mode(&t, &x).unwrap();
        let f = |q: &StructurePolicy| {
            let e = q.evaluate(&t, &x, &a).unwrap();
            0.7 * e.log_prob - 0.3 * e.entropy
        };
        let eval = p.evaluate(&t, &x, &a).unwrap();
        let mut g = vec![0.0; p.net.n_params()];
        p.backprop(&eval, 0.7, -0.3, &mut g).unwrap();
        let h = 1e-6;
        for i in (0..g.len()).step_by(7) {
            let mut plus = p.clone();
            plus.net.params_mut()[i] += h;
            let mut minus = p.clone();
            minus.net.params_mut()[i] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let tol = 1e-4 * fd.abs().max(g[i].abs()) + 1e-8;
            assert!((fd - g[i]).abs() <= tol, "param {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn value_net_basics() {
        let z = DenseNet::zeros(&[4, 8, 1]);
        assert_eq!(value_estimate(&z, &[1.0, 2.0, 3.0, 4.0]).unwrap(), 0.0);
        assert!(value_estimate(&z, &[1.0]).is_err());
        let p = policy(4, 10);
        let x = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(value_estimate(&p.value, &x).unwrap(), value_estimate(&p.value, &x).unwrap());
        let mut g = vec![0.0; p.value.n_params()];
        value_backprop(&p.value, &x, 0.5, 0.5, &mut g).unwrap();
        let loss = |n: &DenseNet| 0.5 * (value_estimate(n, &x).unwrap() - 0.5).powi(2);
        let h = 1e-6;
        for i in 0..g.len() {
            let mut a = p.value.clone();
            a.params_mut()[i] += h;
            let mut b = p.value.clone();
            b.params_mut()[i] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(g[i].abs()) + 1e-8);
        }
    }
}
