//! Categorical distributions over logits with a binary validity mask.
//!
//! Masked entries behave as if their logit were `-inf`: they receive exactly
//! zero probability, never get sampled, and carry zero gradient.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedCategorical {
    logits: Vec<f64>,
    mask: Vec<bool>,
    probs: Vec<f64>,
}

impl MaskedCategorical {
    pub fn new(logits: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if logits.len() != mask.len() {
            return Err(Error::shape("mask", logits.len(), mask.len()));
        }
        let max = logits
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(&z, _)| z)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::InvalidMask("every entry is masked".into()));
        }
        if !max.is_finite() {
            return Err(Error::Divergence(format!("non-finite logit {max}")));
        }
        let mut probs: Vec<f64> = logits
            .iter()
            .zip(&mask)
            .map(|(&z, &m)| if m { (z - max).exp() } else { 0.0 })
            .collect();
        let total: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= total;
        }
        Ok(Self {
            logits,
            mask,
            probs,
        })
    }

    /// Unmasked distribution.
    pub fn unmasked(logits: Vec<f64>) -> Result<Self> {
        let n = logits.len();
        Self::new(logits, vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn is_allowed(&self, index: usize) -> bool {
        self.mask.get(index).copied().unwrap_or(false)
    }

    /// Number of unmasked entries.
    pub fn support(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Log-probability of `index`, computed from logits for accuracy.
    pub fn log_prob(&self, index: usize) -> Result<f64> {
        if !self.is_allowed(index) {
            return Err(Error::InvalidAction(format!(
                "index {index} is masked or out of range ({} entries)",
                self.len()
            )));
        }
        let max = self.max_logit();
        let lse = max
            + self
                .logits
                .iter()
                .zip(&self.mask)
                .filter(|(_, &m)| m)
                .map(|(&z, _)| (z - max).exp())
                .sum::<f64>()
                .ln();
        Ok(self.logits[index] - lse)
    }

    fn max_logit(&self) -> f64 {
        self.logits
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(&z, _)| z)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, f64) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = None;
        for (i, &p) in self.probs.iter().enumerate() {
            if !self.mask[i] {
                continue;
            }
            chosen = Some(i);
            acc += p;
            if u < acc {
                break;
            }
        }
        let i = chosen.expect("constructor guarantees an unmasked entry");
        (i, self.log_prob(i).expect("sampled index is unmasked"))
    }

    /// Most probable unmasked index; ties resolve to the lowest index.
    pub fn mode(&self) -> usize {
        let mut best = None;
        for (i, &p) in self.probs.iter().enumerate() {
            if self.mask[i] && best.is_none_or(|(_, bp)| p > bp) {
                best = Some((i, p));
            }
        }
        best.unwrap().0
    }

    /// Shannon entropy in nats over the unmasked support.
    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }

    /// d log p(index) / d logits = onehot(index) - p, zero on masked entries.
    pub fn log_prob_grad(&self, index: usize) -> Vec<f64> {
        let mut g: Vec<f64> = self.probs.iter().map(|p| -p).collect();
        g[index] += 1.0;
        g
    }

    /// d H / d logits_i = -p_i (ln p_i + H), zero on masked entries.
    pub fn entropy_grad(&self) -> Vec<f64> {
        let h = self.entropy();
        self.probs
            .iter()
            .map(|&p| if p > 0.0 { -p * (p.ln() + h) } else { 0.0 })
            .collect()
    }
}

pub fn masked_softmax(d: &MaskedCategorical) -> Vec<f64> {
    d.probs().to_vec()
}

pub fn sample<R: Rng + ?Sized>(d: &MaskedCategorical, rng: &mut R) -> (usize, f64) {
    d.sample(rng)
}

pub fn entropy(d: &MaskedCategorical) -> f64 {
    d.entropy()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn symmetric_mask() {
        let d = MaskedCategorical::new(vec![1.0, 1.0, 1.0], vec![true, false, true]).unwrap();
        assert_eq!(masked_softmax(&d), vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn uniform_pair() {
        let d = MaskedCategorical::unmasked(vec![0.0, 0.0]).unwrap();
        assert_eq!(masked_softmax(&d), vec![0.5, 0.5]);
    }

    #[test]
    fn large_logits_are_stable() {
        let d = MaskedCategorical::unmasked(vec![1000.0, 0.0]).unwrap();
        let p = masked_softmax(&d);
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] < 1e-300 && p[1] >= 0.0);
        assert!(d.log_prob(1).unwrap() < -999.0);
    }

    #[test]
    fn all_masked_is_an_error() {
        assert!(matches!(
            MaskedCategorical::new(vec![1.0, 2.0], vec![false, false]),
            Err(Error::InvalidMask(_))
        ));
    }

    #[test]
    fn forced_choice() {
        let d = MaskedCategorical::new(vec![3.0, -1.0, 7.0], vec![false, true, false]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(d.sample(&mut rng), (1, 0.0));
        }
    }

    #[test]
    fn masked_index_never_sampled() {
        let d = MaskedCategorical::new(vec![1.0, 1.0, 1.0], vec![true, false, true]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100_000 {
            assert_ne!(d.sample(&mut rng).0, 1);
        }
    }

    #[test]
    fn empirical_frequencies_within_three_sigma() {
        let d = MaskedCategorical::new(vec![0.3, 2.0, -0.5, 1.0], vec![true, true, true, false])
            .unwrap();
        let n = 100_000;
        let mut counts = [0usize; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..n {
            counts[d.sample(&mut rng).0] += 1;
        }
        for (i, &p) in d.probs().iter().enumerate() {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((counts[i] as f64 - n as f64 * p).abs() <= 3.0 * sigma.max(1e-9));
        }
        assert_eq!(counts[3], 0);
    }

    #[test]
    fn entropy_cases() {
        let uniform9 = MaskedCategorical::unmasked(vec![0.0; 9]).unwrap();
        assert!((uniform9.entropy() - 9f64.ln()).abs() < 1e-12);
        let onehot = MaskedCategorical::new(vec![0.0, 5.0], vec![false, true]).unwrap();
        assert_eq!(onehot.entropy(), 0.0);
        let reduced = MaskedCategorical::new(vec![0.0; 3], vec![true, false, true]).unwrap();
        assert!((reduced.entropy() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let logits = vec![0.4, -1.2, 0.9, 2.0];
        let mask = vec![true, true, false, true];
        let d = MaskedCategorical::new(logits.clone(), mask.clone()).unwrap();
        let glp = d.log_prob_grad(3);
        let gh = d.entropy_grad();
        let h = 1e-6;
        for i in 0..4 {
            let mut p = logits.clone();
            p[i] += h;
            let mut m = logits.clone();
            m[i] -= h;
            let dp = MaskedCategorical::new(p, mask.clone()).unwrap();
            let dm = MaskedCategorical::new(m, mask.clone()).unwrap();
            let fd_lp = (dp.log_prob(3).unwrap() - dm.log_prob(3).unwrap()) / (2.0 * h);
            let fd_h = (dp.entropy() - dm.entropy()) / (2.0 * h);
            assert!((fd_lp - glp[i]).abs() < 1e-7);
            assert!((fd_h - gh[i]).abs() < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn shift_invariance(
            logits in proptest::collection::vec(-20.0f64..20.0, 1..12),
            shift in -50.0f64..50.0,
            seed in any::<u64>(),
        ) {
            let n = logits.len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
            mask[rng.random_range(0..n)] = true;
            let a = MaskedCategorical::new(logits.clone(), mask.clone()).unwrap();
            let b = MaskedCategorical::new(logits.iter().map(|z| z + shift).collect(), mask.clone()).unwrap();
            prop_assert!(close(a.probs(), b.probs(), 1e-12));
            let total: f64 = a.probs().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for (p, m) in a.probs().iter().zip(&mask) {
                if !m { prop_assert_eq!(*p, 0.0); }
            }
        }
    }
}
