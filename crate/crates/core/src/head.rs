//! Risk head and the Cox partial-likelihood loss.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::nn::Linear;

/// Observed follow-up for one patient. `event == false` means censored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub patient_id: String,
    /// Months; non-negative.
    pub time: f64,
    pub event: bool,
}

impl SurvivalRecord {
    pub fn new(patient_id: impl Into<String>, time: f64, event: bool) -> Result<Self> {
        let patient_id = patient_id.into();
        if !(time >= 0.0) || !time.is_finite() {
            return Err(Error::Input(format!(
                "patient {patient_id}: survival time must be finite and non-negative, got {time}"
            )));
        }
        Ok(Self { patient_id, time, event })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub fc1: Linear,
    pub fc2: Linear,
    pub out: Linear,
    pub sigmoid: bool,
}

impl HeadParams {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, in_dim: usize, hidden: [usize; 2], sigmoid: bool) -> Self {
        Self {
            fc1: Linear::new(store, rng, "head.fc1", in_dim, hidden[0], true),
            fc2: Linear::new(store, rng, "head.fc2", hidden[0], hidden[1], true),
            out: Linear::new(store, rng, "head.out", hidden[1], 1, true),
            sigmoid,
        }
    }
}

/// Graph handles for one patient's head evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiskOutput {
    /// `[y_p | y_g]`.
    pub joint: Var,
    /// Second hidden activation.
    pub hidden: Var,
    /// `1 × 1` risk score.
    pub risk: Var,
}

/// `X = ReLU(W2 ReLU(W1 z + b1) + b2)`, `R = sigmoid(W3 X + b3)`.
pub fn mlp_head(g: &mut Graph, p: &HeadParams, y_p: Var, y_g: Var) -> Result<RiskOutput> {
    let joint = g.concat_cols(&[y_p, y_g])?;
    let h = p.fc1.forward(g, joint)?;
    let h = g.relu(h);
    let h = p.fc2.forward(g, h)?;
    let hidden = g.relu(h);
    let r = p.out.forward(g, hidden)?;
    let risk = if p.sigmoid { g.sigmoid(r) } else { r };
    Ok(RiskOutput { joint, hidden, risk })
}

/// `Σ_{i: δ_i=1} [ -R_i + log Σ_{j: t_j ≥ t_i} exp(R_j) ]`.
pub fn neg_log_partial_likelihood(risks: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    if risks.is_empty() {
        return Err(Error::Input("partial likelihood of an empty cohort".into()));
    }
    if risks.len() != times.len() || times.len() != events.len() {
        return Err(Error::dim("cox_loss", &[risks.len()], &[times.len(), events.len()]));
    }
    let mut loss = 0.0;
    for i in (0..risks.len()).filter(|&i| events[i]) {
        loss += risk_set_lse(risks, times, times[i]) - risks[i];
    }
    Ok(loss)
}

fn risk_set_lse(risks: &[f64], times: &[f64], t: f64) -> f64 {
    let max = risks
        .iter()
        .zip(times)
        .filter(|(_, &tj)| tj >= t)
        .map(|(&r, _)| r)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = risks
        .iter()
        .zip(times)
        .filter(|(_, &tj)| tj >= t)
        .map(|(&r, _)| libm::exp(r - max))
        .sum();
    max + libm::log(s)
}

/// `∂L/∂R_k = -δ_k + Σ_{i: δ_i=1, t_k ≥ t_i} exp(R_k - LSE_i)`.
pub fn neg_log_partial_likelihood_grad(risks: &[f64], times: &[f64], events: &[bool]) -> Vec<f64> {
    let mut grad: Vec<f64> = events.iter().map(|&e| if e { -1.0 } else { 0.0 }).collect();
    for i in (0..risks.len()).filter(|&i| events[i]) {
        let lse = risk_set_lse(risks, times, times[i]);
        for k in 0..risks.len() {
            if times[k] >= times[i] {
                grad[k] += libm::exp(risks[k] - lse);
            }
        }
    }
    grad
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoxLoss {
    pub value: f64,
    /// True when no record has an event, in which case `value` is 0.
    pub all_censored: bool,
}

pub fn cox_loss(risks: &[f64], records: &[SurvivalRecord]) -> Result<CoxLoss> {
    if records.is_empty() {
        return Err(Error::Input("cox loss over no patients".into()));
    }
    let times: Vec<f64> = records.iter().map(|r| r.time).collect();
    let events: Vec<bool> = records.iter().map(|r| r.event).collect();
    let value = neg_log_partial_likelihood(risks, &times, &events)?;
    Ok(CoxLoss {
        value,
        all_censored: !events.iter().any(|&e| e),
    })
}
