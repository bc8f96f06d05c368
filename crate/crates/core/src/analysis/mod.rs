//! Post-hoc metrics over episode logs: workflow diversity, the
//! accuracy/cost frontier, utility, and a heuristic error taxonomy.

mod errors;

pub use errors::{categorize_error, ErrorCategory, ErrorKeywords, ErrorLabel, ErrorSubtype};

use serde::{Deserialize, Serialize};

use crate::domain::{EpisodeRecord, ExecutionOutcome, N_WORKFLOWS};
use crate::error::{Error, Result};

fn check_counts(counts: &[u64]) -> Result<u64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Contract("workflow counts are all zero".into()));
    }
    Ok(total)
}

/// Shannon entropy (nats) of the normalized counts, with 0 ln 0 = 0.
pub fn workflow_entropy(counts: &[u64]) -> Result<f64> {
    let total = check_counts(counts)? as f64;
    Ok(counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum())
}

/// Mean-absolute-difference Gini over every slot, zeros included.
pub fn gini(counts: &[u64]) -> Result<f64> {
    let total = check_counts(counts)? as f64;
    let k = counts.len() as f64;
    let mut sum = 0.0;
    for &a in counts {
        for &b in counts {
            sum += (a as f64 - b as f64).abs();
        }
    }
    Ok(sum / (2.0 * k * total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub counts: [u64; N_WORKFLOWS],
    pub unique_workflows: usize,
    pub entropy_nats: f64,
    pub gini: f64,
}

impl DiversityReport {
    pub fn from_counts(counts: [u64; N_WORKFLOWS]) -> Result<Self> {
        Ok(Self {
            unique_workflows: counts.iter().filter(|&&c| c > 0).count(),
            entropy_nats: workflow_entropy(&counts)?,
            gini: gini(&counts)?,
            counts,
        })
    }

    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a EpisodeRecord>) -> Result<Self> {
        let mut counts = [0u64; N_WORKFLOWS];
        for r in records {
            counts[r.structure.workflow.id()] += 1;
        }
        Self::from_counts(counts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub cost: f64,
    pub accuracy: f64,
    pub label: String,
}

/// Non-dominated subset sorted by cost. A point is dropped when another is
/// no costlier and no less accurate, strictly better in one. Of exact
/// duplicates only the lexicographically first label survives. Non-finite
/// points are ignored.
pub fn pareto_frontier(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut sorted: Vec<&ParetoPoint> = points
        .iter()
        .filter(|p| p.cost.is_finite() && p.accuracy.is_finite())
        .collect();
    sorted.sort_by(|a, b| {
        a.cost
            .total_cmp(&b.cost)
            .then(b.accuracy.total_cmp(&a.accuracy))
            .then_with(|| a.label.cmp(&b.label))
    });
    let mut out: Vec<ParetoPoint> = Vec::new();
    for p in sorted {
        if out.last().is_none_or(|q| p.accuracy > q.accuracy) {
            out.push(p.clone());
        }
    }
    out
}

/// Accuracy minus `lambda` times an already-normalized cost.
pub fn utility(correct_rate: f64, cost: f64, lambda: f64) -> f64 {
    correct_rate - lambda * cost
}

/// Token cost of one episode at `price` per thousand tokens.
pub fn cost_per_episode(outcome: &ExecutionOutcome, price_per_1k: f64) -> f64 {
    outcome.n_tokens as f64 / 1000.0 * price_per_1k
}

/// One frontier point summarizing a set of episodes.
pub fn summarize(label: &str, records: &[EpisodeRecord], price_per_1k: f64) -> ParetoPoint {
    let n = records.len().max(1) as f64;
    ParetoPoint {
        cost: records.iter().map(|r| cost_per_episode(&r.outcome, price_per_1k)).sum::<f64>() / n,
        accuracy: records.iter().filter(|r| r.outcome.correct).count() as f64 / n,
        label: label.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(cost: f64, accuracy: f64, label: &str) -> ParetoPoint {
        ParetoPoint {
            cost,
            accuracy,
            label: label.into(),
        }
    }

    #[test]
    fn entropy_examples() {
        assert!((workflow_entropy(&[1; 9]).unwrap() - 9f64.ln()).abs() < 1e-12);
        assert_eq!(workflow_entropy(&[0, 0, 7, 0]).unwrap(), 0.0);
        let hand = -(0.5 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
        assert!((workflow_entropy(&[2, 1, 1, 0, 0, 0, 0, 0, 0]).unwrap() - hand).abs() < 1e-12);
        assert!((hand - 1.03972).abs() < 1e-5);
        assert!(workflow_entropy(&[0; 9]).is_err());
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini(&[3; 9]).unwrap(), 0.0);
        let one_hot = [0, 0, 0, 5, 0, 0, 0, 0, 0];
        assert!((gini(&one_hot).unwrap() - 8.0 / 9.0).abs() < 1e-12);
        assert!(gini(&[0; 9]).is_err());
    }

    #[test]
    fn frontier_examples() {
        let f = pareto_frontier(&[pt(1.0, 0.5, "a"), pt(2.0, 0.6, "b"), pt(3.0, 0.55, "c")]);
        assert_eq!(f, vec![pt(1.0, 0.5, "a"), pt(2.0, 0.6, "b")]);
        assert_eq!(pareto_frontier(&[pt(1.0, 0.5, "x")]), vec![pt(1.0, 0.5, "x")]);
        let dup = pareto_frontier(&[pt(1.0, 0.5, "z"), pt(1.0, 0.5, "m")]);
        assert_eq!(dup, vec![pt(1.0, 0.5, "m")]);
    }

    #[test]
    fn utility_and_cost() {
        assert_eq!(utility(0.7, 3.0, 0.0), 0.7);
        assert_eq!(utility(1.0, 1.0, 1.0), 0.0);
        let mut o = ExecutionOutcome::default();
        assert_eq!(cost_per_episode(&o, 0.5), 0.0);
        o.n_tokens = 1000;
        assert_eq!(cost_per_episode(&o, 0.5), 0.5);
        o.n_tokens = 2000;
        assert_eq!(cost_per_episode(&o, 0.5), 1.0);
    }

    fn dominates(q: &ParetoPoint, p: &ParetoPoint) -> bool {
        q.cost <= p.cost && q.accuracy >= p.accuracy && (q.cost < p.cost || q.accuracy > p.accuracy)
    }

    proptest! {
        #[test]
        fn frontier_is_mutually_non_dominated(raw in prop::collection::vec((0u8..20, 0u8..20), 1..40)) {
            let points: Vec<ParetoPoint> = raw
                .iter()
                .enumerate()
                .map(|(i, &(c, a))| pt(f64::from(c), f64::from(a) / 20.0, &format!("p{i:02}")))
                .collect();
            let f = pareto_frontier(&points);
            for p in &f {
                prop_assert!(!points.iter().any(|q| dominates(q, p)));
                prop_assert!(!f.iter().any(|q| q != p && q.cost == p.cost && q.accuracy == p.accuracy));
            }
            for p in &points {
                let kept = f.iter().any(|q| q.cost == p.cost && q.accuracy == p.accuracy);
                prop_assert_eq!(kept, !points.iter().any(|q| dominates(q, p)));
            }
            prop_assert!(f.windows(2).all(|w| w[0].cost < w[1].cost));
        }

        #[test]
        fn metrics_are_permutation_and_scale_invariant(
            counts in prop::collection::vec(0u64..50, 9),
            k in 1u64..5,
            rot in 0usize..9,
        ) {
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let mut rotated = counts.clone();
            rotated.rotate_left(rot);
            let scaled: Vec<u64> = counts.iter().map(|c| c * k).collect();
            let (e, g) = (workflow_entropy(&counts).unwrap(), gini(&counts).unwrap());
            prop_assert!((workflow_entropy(&rotated).unwrap() - e).abs() < 1e-12);
            prop_assert!((gini(&rotated).unwrap() - g).abs() < 1e-12);
            prop_assert!((gini(&scaled).unwrap() - g).abs() < 1e-12);
            let unique = counts.iter().filter(|&&c| c > 0).count() as f64;
            prop_assert!(e <= unique.ln() + 1e-12);
            prop_assert!((0.0..1.0).contains(&g));
        }

        #[test]
        fn zero_lambda_utility_ranks_like_accuracy(acc in prop::collection::vec((0.0f64..1.0, 0.0f64..10.0), 1..10)) {
            let by_acc = acc.iter().enumerate().max_by(|a, b| a.1.0.total_cmp(&b.1.0)).unwrap().0;
            let by_u = acc.iter().enumerate().max_by(|a, b| utility(a.1.0, a.1.1, 0.0).total_cmp(&utility(b.1.0, b.1.1, 0.0))).unwrap().0;
            prop_assert_eq!(by_acc, by_u);
        }
    }
}
