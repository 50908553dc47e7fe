//! Tabular policies over per-prompt finite response sets.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric;

/// `log π(y_w|x) - log π(y_l|x)` in nats.
pub type LogRatio = f64;

/// Number of candidate responses for each prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SpaceRepr", into = "SpaceRepr")]
pub struct ResponseSpace {
    responses_per_prompt: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SpaceRepr {
    responses_per_prompt: Vec<usize>,
}

impl TryFrom<SpaceRepr> for ResponseSpace {
    type Error = Error;
    fn try_from(r: SpaceRepr) -> Result<Self> {
        ResponseSpace::new(r.responses_per_prompt)
    }
}

impl From<ResponseSpace> for SpaceRepr {
    fn from(s: ResponseSpace) -> Self {
        SpaceRepr { responses_per_prompt: s.responses_per_prompt }
    }
}

impl ResponseSpace {
    pub fn new(responses_per_prompt: Vec<usize>) -> Result<Self> {
        if responses_per_prompt.is_empty() {
            return Err(Error::usage("response space needs at least one prompt"));
        }
        if let Some(p) = responses_per_prompt.iter().position(|&k| k < 2) {
            return Err(Error::usage(format!("prompt {p} has fewer than 2 responses")));
        }
        Ok(ResponseSpace { responses_per_prompt })
    }

    /// `num_prompts` prompts with `k` responses each.
    pub fn uniform(num_prompts: usize, k: usize) -> Result<Self> {
        Self::new(vec![k; num_prompts])
    }

    pub fn num_prompts(&self) -> usize {
        self.responses_per_prompt.len()
    }

    pub fn responses(&self, prompt: usize) -> usize {
        self.responses_per_prompt[prompt]
    }

    pub fn responses_per_prompt(&self) -> &[usize] {
        &self.responses_per_prompt
    }

    pub fn check(&self, prompt: usize, response: usize) -> Result<()> {
        if prompt >= self.num_prompts() {
            return Err(Error::usage(format!("prompt {prompt} out of range ({} prompts)", self.num_prompts())));
        }
        if response >= self.responses(prompt) {
            return Err(Error::usage(format!(
                "response {response} out of range for prompt {prompt} ({} responses)",
                self.responses(prompt)
            )));
        }
        Ok(())
    }

    pub(crate) fn check_matrix(&self, m: &[Vec<f64>], what: &str) -> Result<()> {
        if m.len() != self.num_prompts() {
            return Err(Error::usage(format!("{what} has {} rows, expected {}", m.len(), self.num_prompts())));
        }
        for (p, row) in m.iter().enumerate() {
            if row.len() != self.responses(p) {
                return Err(Error::usage(format!(
                    "{what} row {p} has {} entries, expected {}",
                    row.len(),
                    self.responses(p)
                )));
            }
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::usage(format!("{what} entry ({p},{j}) is not finite")));
            }
        }
        Ok(())
    }

    pub(crate) fn zeros(&self) -> Vec<Vec<f64>> {
        self.responses_per_prompt.iter().map(|&k| vec![0.0; k]).collect()
    }
}

/// Per-prompt logits; probabilities come from a row-wise softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyRepr", into = "PolicyRepr")]
pub struct TabularPolicy {
    space: ResponseSpace,
    logits: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct PolicyRepr {
    responses_per_prompt: Vec<usize>,
    logits: Vec<Vec<f64>>,
}

impl TryFrom<PolicyRepr> for TabularPolicy {
    type Error = Error;
    fn try_from(r: PolicyRepr) -> Result<Self> {
        TabularPolicy::new(ResponseSpace::new(r.responses_per_prompt)?, r.logits)
    }
}

impl From<TabularPolicy> for PolicyRepr {
    fn from(p: TabularPolicy) -> Self {
        PolicyRepr { responses_per_prompt: p.space.responses_per_prompt, logits: p.logits }
    }
}

impl TabularPolicy {
    pub fn new(space: ResponseSpace, logits: Vec<Vec<f64>>) -> Result<Self> {
        space.check_matrix(&logits, "logits")?;
        Ok(TabularPolicy { space, logits })
    }

    /// All-zero logits, i.e. uniform over each prompt's responses.
    pub fn uniform(space: ResponseSpace) -> Self {
        let logits = space.zeros();
        TabularPolicy { space, logits }
    }

    /// Builds a policy whose logits are `ln p`. Rows are renormalized.
    pub fn from_probs(space: ResponseSpace, probs: &[Vec<f64>]) -> Result<Self> {
        if probs.iter().flatten().any(|&p| !(p > 0.0)) {
            return Err(Error::usage("probabilities must be strictly positive"));
        }
        let logits = probs
            .iter()
            .map(|row| {
                let s: f64 = row.iter().sum();
                row.iter().map(|p| (p / s).ln()).collect()
            })
            .collect();
        Self::new(space, logits)
    }

    pub fn space(&self) -> &ResponseSpace {
        &self.space
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    pub fn into_logits(self) -> Vec<Vec<f64>> {
        self.logits
    }

    pub fn probs(&self, prompt: usize) -> Vec<f64> {
        numeric::softmax(&self.logits[prompt])
    }

    pub fn prob(&self, prompt: usize, response: usize) -> Result<f64> {
        policy_prob(self, prompt, response)
    }

    /// `log π(y|x)` for every response of `prompt`.
    pub fn log_probs(&self, prompt: usize) -> Vec<f64> {
        let row = &self.logits[prompt];
        let z = numeric::log_sum_exp(row);
        row.iter().map(|l| l - z).collect()
    }

    pub fn delta(&self, prompt: usize, yw: usize, yl: usize) -> Result<LogRatio> {
        log_prob_ratio(self, prompt, yw, yl)
    }

    /// Same policy with each row shifted so that its log-sum-exp is zero.
    pub fn normalized(&self) -> Self {
        let logits = (0..self.space.num_prompts()).map(|p| self.log_probs(p)).collect();
        TabularPolicy { space: self.space.clone(), logits }
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("policy serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("policy serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// `π(response|prompt)` with max-subtracted softmax.
pub fn policy_prob(policy: &TabularPolicy, prompt: usize, response: usize) -> Result<f64> {
    policy.space.check(prompt, response)?;
    Ok(policy.probs(prompt)[response])
}

/// δ_π(x, y_w, y_l); the softmax normalizer cancels, leaving a logit difference.
pub fn log_prob_ratio(policy: &TabularPolicy, prompt: usize, yw: usize, yl: usize) -> Result<LogRatio> {
    policy.space.check(prompt, yw)?;
    policy.space.check(prompt, yl)?;
    if yw == yl {
        return Err(Error::usage("yw and yl must differ"));
    }
    let row = &policy.logits[prompt];
    Ok(row[yw] - row[yl])
}
