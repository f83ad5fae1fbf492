//! Distillation and reward arithmetic.
//!
//! Everything here is pure math over validated inputs: KL divergences between
//! categorical distributions (natural log), their convex combination used as a
//! distillation loss, and the rule-based reward for scored rollouts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::verdict::Decision;

/// Sum tolerance when accepting a probability vector.
pub const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum SignalsError {
    #[error("probability vector must be non-empty")]
    Empty,
    #[error("probability at index {index} is {value}, outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
    #[error("distributions have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("alpha is {0}, outside [0, 1]")]
    InvalidAlpha(f64),
}

/// A categorical distribution: non-negative entries summing to 1 within
/// [`SUM_TOLERANCE`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CategoricalDist {
    probs: Vec<f64>,
}

impl CategoricalDist {
    pub fn new(probs: Vec<f64>) -> Result<Self, SignalsError> {
        if probs.is_empty() {
            return Err(SignalsError::Empty);
        }
        for (index, &value) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) || value.is_nan() {
                return Err(SignalsError::OutOfRange { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(SignalsError::NotNormalized(sum));
        }
        Ok(Self { probs })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

impl TryFrom<Vec<f64>> for CategoricalDist {
    type Error = SignalsError;

    fn try_from(probs: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(probs)
    }
}

impl From<CategoricalDist> for Vec<f64> {
    fn from(dist: CategoricalDist) -> Vec<f64> {
        dist.probs
    }
}

fn check_lengths(p: &CategoricalDist, q: &CategoricalDist) -> Result<(), SignalsError> {
    if p.len() != q.len() {
        return Err(SignalsError::LengthMismatch(p.len(), q.len()));
    }
    Ok(())
}

/// Forward KL `KL(p || q) = sum_i p_i ln(p_i / q_i)` in nats.
/// Terms with `p_i = 0` contribute 0; `p_i > 0` with `q_i = 0` yields
/// `+inf`, which is the caller-visible signal for disjoint support.
pub fn kl_forward(p: &CategoricalDist, q: &CategoricalDist) -> Result<f64, SignalsError> {
    check_lengths(p, q)?;
    let mut total = 0.0;
    for (&pi, &qi) in p.probs.iter().zip(&q.probs) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Ok(f64::INFINITY);
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total)
}

/// Reverse KL `KL(q || p)`, i.e. [`kl_forward`] with the arguments swapped.
pub fn kl_reverse(p: &CategoricalDist, q: &CategoricalDist) -> Result<f64, SignalsError> {
    kl_forward(q, p)
}

/// Convex combination `alpha * KL(p||q) + (1 - alpha) * KL(q||p)`.
/// The endpoints skip the zero-weighted term so an infinite divergence on the
/// unused side cannot poison the result.
pub fn combined_distill_loss(
    p: &CategoricalDist,
    q: &CategoricalDist,
    alpha: f64,
) -> Result<f64, SignalsError> {
    if !(0.0..=1.0).contains(&alpha) || alpha.is_nan() {
        return Err(SignalsError::InvalidAlpha(alpha));
    }
    if alpha == 0.0 {
        return kl_reverse(p, q);
    }
    if alpha == 1.0 {
        return kl_forward(p, q);
    }
    Ok(alpha * kl_forward(p, q)? + (1.0 - alpha) * kl_reverse(p, q)?)
}

/// One scored generation. When `parsed` is false the label and category are
/// absent and the rollout cannot earn correctness credit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rollout {
    pub parsed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Decision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub format_valid: bool,
}

/// Ground truth for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAnnotation {
    pub label: Decision,
    pub category: String,
}

/// Rule-based reward: `0.5 * [parsed and label correct] + 0.5 * [parsed and
/// category correct] - 0.2 * [format invalid]`.
///
/// The reachable values are exactly {-0.2, 0.0, 0.3, 0.5, 0.8, 1.0}.
pub fn grpo_reward(rollout: &Rollout, gold: &GoldAnnotation) -> f64 {
    let mut reward = 0.0;
    if rollout.parsed && rollout.label == Some(gold.label) {
        reward += 0.5;
    }
    if rollout.parsed && rollout.category.as_deref() == Some(gold.category.as_str()) {
        reward += 0.5;
    }
    if !rollout.format_valid {
        reward -= 0.2;
    }
    reward
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(values: &[f64]) -> CategoricalDist {
        CategoricalDist::new(values.to_vec()).unwrap()
    }

    #[test]
    fn constructor_validates_range_and_sum() {
        assert!(CategoricalDist::new(vec![]).is_err());
        assert_eq!(
            CategoricalDist::new(vec![0.5, 0.6]).unwrap_err(),
            SignalsError::NotNormalized(1.1)
        );
        assert!(matches!(
            CategoricalDist::new(vec![1.2, -0.2]).unwrap_err(),
            SignalsError::OutOfRange { index: 0, .. }
        ));
        assert!(CategoricalDist::new(vec![1.0]).is_ok());
        assert!(CategoricalDist::new(vec![0.7, 0.2, 0.1]).is_ok());
    }

    // Reference values computed independently with 50-digit arithmetic from
    // the defining sums, then frozen here.
    // fwd = 0.5 ln(25/9); rev = 0.9 ln 1.8 + 0.1 ln 0.2.
    const P: [f64; 2] = [0.5, 0.5];
    const Q: [f64; 2] = [0.9, 0.1];
    const FWD_PQ: f64 = 0.5108256237659907;
    const REV_PQ: f64 = 0.3680642071684971;
    const COMBINED_HALF: f64 = 0.4394449154672439;

    #[test]
    fn kl_matches_frozen_reference_values() {
        let p = dist(&P);
        let q = dist(&Q);
        let fwd = kl_forward(&p, &q).unwrap();
        let rev = kl_reverse(&p, &q).unwrap();
        assert!((fwd - FWD_PQ).abs() < 1e-12);
        assert!((rev - REV_PQ).abs() < 1e-12);
        // The two divergences disagree on this pair.
        assert!((fwd - rev).abs() > 0.1);
        assert!(
            (combined_distill_loss(&p, &q, 0.5).unwrap() - COMBINED_HALF).abs() < 1e-12
        );
        // KL([1,0] || [0.5,0.5]) = ln 2.
        let point = dist(&[1.0, 0.0]);
        let uniform = dist(&[0.5, 0.5]);
        assert!((kl_forward(&point, &uniform).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        // KL(p||p) = 0 exactly.
        let any = dist(&[0.3, 0.7]);
        assert_eq!(kl_forward(&any, &any).unwrap(), 0.0);
    }

    #[test]
    fn zero_support_conventions() {
        let point = dist(&[1.0, 0.0]);
        let uniform = dist(&[0.5, 0.5]);
        // q_i = 0 where p_i > 0 diverges; the zero p_i term contributes nothing.
        assert_eq!(kl_forward(&uniform, &point).unwrap(), f64::INFINITY);
        assert!(kl_forward(&point, &uniform).unwrap().is_finite());
        // alpha endpoints skip the unused side entirely.
        assert_eq!(
            combined_distill_loss(&uniform, &point, 1.0).unwrap(),
            f64::INFINITY
        );
        let rev_only = combined_distill_loss(&uniform, &point, 0.0).unwrap();
        assert!((rev_only - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn kl_is_zero_iff_equal_and_length_checked() {
        let p = dist(&P);
        assert_eq!(kl_forward(&p, &p).unwrap(), 0.0);
        let short = dist(&[1.0]);
        assert_eq!(
            kl_forward(&p, &short).unwrap_err(),
            SignalsError::LengthMismatch(2, 1)
        );
        assert_eq!(
            combined_distill_loss(&p, &p, 1.5).unwrap_err(),
            SignalsError::InvalidAlpha(1.5)
        );
    }

    fn rollout(parsed: bool, label: Option<Decision>, category: Option<&str>, format_valid: bool) -> Rollout {
        Rollout {
            parsed,
            label,
            category: category.map(str::to_string),
            format_valid,
        }
    }

    fn gold() -> GoldAnnotation {
        GoldAnnotation {
            label: Decision::Unsafe,
            category: "dw".into(),
        }
    }

    #[test]
    fn reward_fixtures() {
        let gold = gold();
        assert_eq!(
            grpo_reward(&rollout(true, Some(Decision::Unsafe), Some("dw"), true), &gold),
            1.0
        );
        assert_eq!(
            grpo_reward(&rollout(true, Some(Decision::Unsafe), Some("pc"), true), &gold),
            0.5
        );
        assert_eq!(grpo_reward(&rollout(false, None, None, false), &gold), -0.2);
        assert_eq!(grpo_reward(&rollout(false, None, None, true), &gold), 0.0);
        assert_eq!(
            grpo_reward(&rollout(true, Some(Decision::Unsafe), Some("dw"), false), &gold),
            0.8
        );
        assert_eq!(
            grpo_reward(&rollout(true, Some(Decision::Safe), Some("pc"), false), &gold),
            -0.2
        );
    }

    #[test]
    fn reward_values_enumerate_exactly_the_reachable_set() {
        let gold = gold();
        let labels = [None, Some(Decision::Safe), Some(Decision::Unsafe)];
        let categories = [None, Some("dw"), Some("pc")];
        let mut seen = std::collections::BTreeSet::new();
        for parsed in [false, true] {
            for label in labels {
                for category in categories {
                    for format_valid in [false, true] {
                        // Unparsed rollouts carry no fields; skip inconsistent combos.
                        if !parsed && (label.is_some() || category.is_some()) {
                            continue;
                        }
                        let value = grpo_reward(&rollout(parsed, label, category, format_valid), &gold);
                        seen.insert((value * 10.0).round() as i64);
                    }
                }
            }
        }
        let expected: std::collections::BTreeSet<i64> =
            [-2, 0, 3, 5, 8, 10].into_iter().collect();
        assert_eq!(seen, expected);
    }

    fn arb_dist(len: usize) -> impl Strategy<Value = CategoricalDist> {
        prop::collection::vec(1e-6f64..1.0, len).prop_map(|raw| {
            let sum: f64 = raw.iter().sum();
            CategoricalDist::new(raw.into_iter().map(|v| v / sum).collect())
                .expect("normalized vector is a distribution")
        })
    }

    proptest! {
        #[test]
        fn kl_is_non_negative((p, q) in (2usize..12).prop_flat_map(|n| (arb_dist(n), arb_dist(n)))) {
            prop_assert!(kl_forward(&p, &q).unwrap() >= -1e-12);
            prop_assert!(kl_reverse(&p, &q).unwrap() >= -1e-12);
        }

        #[test]
        fn combined_loss_is_linear_in_alpha(
            (p, q) in (2usize..12).prop_flat_map(|n| (arb_dist(n), arb_dist(n))),
            alpha in 0.0f64..=1.0,
        ) {
            let fwd = kl_forward(&p, &q).unwrap();
            let rev = kl_reverse(&p, &q).unwrap();
            let combined = combined_distill_loss(&p, &q, alpha).unwrap();
            prop_assert!((combined - (alpha * fwd + (1.0 - alpha) * rev)).abs() < 1e-12);
        }
    }
}
