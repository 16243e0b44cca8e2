//! Counterfactual preference pairs and the regularized DPO objective.
//!
//! Everything here works on scalar reward shifts; the toy policy supplies
//! the log-probabilities and chains the gradients through its logit table.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan::{ContextBundle, Plan};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScdpoError {
    #[error("chosen and rejected plans are identical")]
    DegeneratePair,
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("anchor contexts differ outside the spatiotemporal fields")]
    SharedFieldsDiffer,
    #[error("anchor contexts have identical spatiotemporal fields")]
    NoSpatiotemporalDifference,
    #[error("invalid config: {0}")]
    Config(String),
}

/// Two contexts differing only in spatiotemporal state, each with its plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualAnchor {
    pub id: String,
    pub x: ContextBundle,
    pub x_prime: ContextBundle,
    pub y_x: Plan,
    pub y_xprime: Plan,
}

impl CounterfactualAnchor {
    pub fn validate(&self) -> Result<(), ScdpoError> {
        if self.x.user != self.x_prime.user
            || self.x.history != self.x_prime.history
            || self.x.library != self.x_prime.library
        {
            return Err(ScdpoError::SharedFieldsDiffer);
        }
        if self.x.st == self.x_prime.st {
            return Err(ScdpoError::NoSpatiotemporalDifference);
        }
        Ok(())
    }

    /// The same anchor with the roles of x and x' exchanged.
    pub fn swapped(&self) -> Self {
        CounterfactualAnchor {
            id: self.id.clone(),
            x: self.x_prime.clone(),
            x_prime: self.x.clone(),
            y_x: self.y_xprime.clone(),
            y_xprime: self.y_x.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: ContextBundle,
    pub chosen: Plan,
    pub rejected: Plan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    X,
    XPrime,
}

/// One line of the pair corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub prompt: ContextBundle,
    pub chosen: Plan,
    pub rejected: Plan,
    pub direction: Direction,
    pub anchor_id: String,
}

impl PairRecord {
    pub fn pair(&self) -> PreferencePair {
        PreferencePair {
            prompt: self.prompt.clone(),
            chosen: self.chosen.clone(),
            rejected: self.rejected.clone(),
        }
    }
}

/// Both directions of an anchor: under x the matched plan y_x wins, under x'
/// the comparison is reversed.
pub fn materialize_pairs(
    anchor: &CounterfactualAnchor,
) -> Result<(PreferencePair, PreferencePair), ScdpoError> {
    if anchor.y_x == anchor.y_xprime {
        return Err(ScdpoError::DegeneratePair);
    }
    let forward = PreferencePair {
        prompt: anchor.x.clone(),
        chosen: anchor.y_x.clone(),
        rejected: anchor.y_xprime.clone(),
    };
    let backward = PreferencePair {
        prompt: anchor.x_prime.clone(),
        chosen: anchor.y_xprime.clone(),
        rejected: anchor.y_x.clone(),
    };
    Ok((forward, backward))
}

/// Pair records for a list of anchors, the two directions of each anchor
/// adjacent so that training never sees one direction in bulk.
pub fn pair_records(anchors: &[CounterfactualAnchor]) -> Result<Vec<PairRecord>, ScdpoError> {
    let mut out = Vec::with_capacity(anchors.len() * 2);
    for anchor in anchors {
        let (fwd, bwd) = materialize_pairs(anchor)?;
        for (pair, direction) in [(fwd, Direction::X), (bwd, Direction::XPrime)] {
            out.push(PairRecord {
                prompt: pair.prompt,
                chosen: pair.chosen,
                rejected: pair.rejected,
                direction,
                anchor_id: anchor.id.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScdpoConfig {
    pub beta: f64,
    pub delta: f64,
    pub gamma_low: f64,
    pub gamma_high: f64,
    pub m: f64,
    pub lambda_a: f64,
    pub lambda_gl: f64,
    pub lambda_gh: f64,
    pub lambda_c: f64,
    /// Divide sequence log-probs by response length before the reward shift.
    pub length_normalized: bool,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
}

impl Default for ScdpoConfig {
    fn default() -> Self {
        ScdpoConfig {
            beta: 0.2,
            delta: 0.0,
            gamma_low: 0.1,
            gamma_high: 0.2,
            m: 0.0,
            lambda_a: 5.0,
            lambda_gl: 10.0,
            lambda_gh: 2.0,
            lambda_c: 3.0,
            length_normalized: false,
            lr: 2e-7,
            warmup_ratio: 0.03,
            epochs: 1,
        }
    }
}

impl ScdpoConfig {
    /// The same config with every regularizer switched off.
    pub fn vanilla(&self) -> Self {
        ScdpoConfig {
            lambda_a: 0.0,
            lambda_gl: 0.0,
            lambda_gh: 0.0,
            lambda_c: 0.0,
            ..*self
        }
    }

    // Negated comparisons so that NaN fails every check.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), ScdpoError> {
        let bad = |m: &str| Err(ScdpoError::Config(m.to_string()));
        if !(self.beta > 0.0) {
            return bad("beta must be positive");
        }
        if !(self.gamma_low <= self.gamma_high) {
            return bad("gamma_low must not exceed gamma_high");
        }
        let lambdas = [self.lambda_a, self.lambda_gl, self.lambda_gh, self.lambda_c];
        if lambdas.iter().any(|l| !(*l >= 0.0)) {
            return bad("weights must be non-negative");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub r_plus: f64,
    pub r_minus: f64,
    pub l_dpo: f64,
    pub l_anchor: f64,
    pub l_gap_low: f64,
    pub l_gap_high: f64,
    pub l_center: f64,
    pub total: f64,
}

fn finite(x: f64, what: &'static str) -> Result<f64, ScdpoError> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(ScdpoError::NonFinite(what))
    }
}

pub fn reward_shift(logp_policy: f64, logp_ref: f64, beta: f64) -> Result<f64, ScdpoError> {
    finite(logp_policy, "policy log-prob")?;
    finite(logp_ref, "reference log-prob")?;
    finite(beta * (logp_policy - logp_ref), "reward shift")
}

/// -log(sigmoid(x)) without overflow.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn hinge(x: f64) -> f64 {
    x.max(0.0)
}

pub fn scdpo_loss(
    r_plus: f64,
    r_minus: f64,
    cfg: &ScdpoConfig,
) -> Result<LossBreakdown, ScdpoError> {
    finite(r_plus, "r_plus")?;
    finite(r_minus, "r_minus")?;
    let gap = r_plus - r_minus;
    let center = 0.5 * (r_plus + r_minus);
    let l_dpo = neg_log_sigmoid(gap);
    let l_anchor = hinge(cfg.delta - r_plus).powi(2);
    let l_gap_low = hinge(cfg.gamma_low - gap).powi(2);
    let l_gap_high = hinge(gap - cfg.gamma_high).powi(2);
    let l_center = (center - cfg.m).powi(2);
    let total = l_dpo
        + cfg.lambda_a * l_anchor
        + cfg.lambda_gl * l_gap_low
        + cfg.lambda_gh * l_gap_high
        + cfg.lambda_c * l_center;
    Ok(LossBreakdown {
        r_plus,
        r_minus,
        l_dpo,
        l_anchor,
        l_gap_low,
        l_gap_high,
        l_center,
        total: finite(total, "total")?,
    })
}

/// Partial derivatives of the total loss with respect to (r_plus, r_minus).
/// Hinges contribute zero at their kinks.
pub fn scdpo_grad(r_plus: f64, r_minus: f64, cfg: &ScdpoConfig) -> Result<(f64, f64), ScdpoError> {
    finite(r_plus, "r_plus")?;
    finite(r_minus, "r_minus")?;
    let gap = r_plus - r_minus;
    let center = 0.5 * (r_plus + r_minus);
    let d_gap = (sigmoid(gap) - 1.0) - cfg.lambda_gl * 2.0 * hinge(cfg.gamma_low - gap)
        + cfg.lambda_gh * 2.0 * hinge(gap - cfg.gamma_high);
    let d_center = cfg.lambda_c * 2.0 * (center - cfg.m);
    let d_anchor = -cfg.lambda_a * 2.0 * hinge(cfg.delta - r_plus);
    let dp = d_gap + 0.5 * d_center + d_anchor;
    let dm = -d_gap + 0.5 * d_center;
    Ok((finite(dp, "gradient")?, finite(dm, "gradient")?))
}

/// Distance from (r_plus, r_minus) to the nearest hinge kink.
pub fn kink_distance(r_plus: f64, r_minus: f64, cfg: &ScdpoConfig) -> f64 {
    let gap = r_plus - r_minus;
    [
        (r_plus - cfg.delta).abs(),
        (gap - cfg.gamma_low).abs(),
        (gap - cfg.gamma_high).abs(),
    ]
    .into_iter()
    .fold(f64::INFINITY, f64::min)
}
