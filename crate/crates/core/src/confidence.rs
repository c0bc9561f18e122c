//! Turning model output into an ask score in [0, 1].

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llmgateway::{CompletionResponse, TokenLogprob};
use crate::promptkit::Method;

/// Distance below the smallest listed alternative assigned to a Yes/No token
/// that the backend did not list.
pub const MISSING_TOKEN_PENALTY: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum ConfidenceError {
    #[error("both log-probabilities are -inf; score is undefined")]
    UndefinedScore,
    #[error("invalid log-probability {0}")]
    InvalidLogprob(f64),
    #[error("unscorable response: {0}")]
    Unscorable(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Evidence {
    LogprobPair { lp_yes: f64, lp_no: f64 },
    Verbalized { raw: String },
}

/// The ask score for one method on one instance, with the evidence behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskSignal {
    pub method: Method,
    pub score: f64,
    pub evidence: Evidence,
    /// Set when a fallback rule (missing token floor, tolerant scan) fired.
    #[serde(default)]
    pub degraded: bool,
}

impl AskSignal {
    pub fn from_logprobs(
        method: Method,
        resp: &CompletionResponse,
    ) -> Result<Self, ConfidenceError> {
        let pair = extract_yes_no(resp)?;
        Ok(Self {
            method,
            score: score_from_logprobs(pair.lp_yes, pair.lp_no)?,
            evidence: Evidence::LogprobPair {
                lp_yes: pair.lp_yes,
                lp_no: pair.lp_no,
            },
            degraded: pair.degraded,
        })
    }

    pub fn from_verbalized(method: Method, text: &str) -> Result<Self, ConfidenceError> {
        let v = parse_verbalized(text)?;
        Ok(Self {
            method,
            score: v.value,
            evidence: Evidence::Verbalized {
                raw: text.to_string(),
            },
            degraded: v.degraded,
        })
    }
}

/// Probability mass of "Yes" after renormalising over {Yes, No}:
/// `exp(lp_yes) / (exp(lp_yes) + exp(lp_no))`, evaluated as a logistic of the
/// difference. `-inf` marks an impossible token.
pub fn score_from_logprobs(lp_yes: f64, lp_no: f64) -> Result<f64, ConfidenceError> {
    for lp in [lp_yes, lp_no] {
        if lp.is_nan() || lp == f64::INFINITY {
            return Err(ConfidenceError::InvalidLogprob(lp));
        }
    }
    match (lp_yes == f64::NEG_INFINITY, lp_no == f64::NEG_INFINITY) {
        (true, true) => Err(ConfidenceError::UndefinedScore),
        (false, true) => Ok(1.0),
        (true, false) => Ok(0.0),
        (false, false) => {
            let d = lp_yes - lp_no;
            Ok(if d >= 0.0 {
                1.0 / (1.0 + (-d).exp())
            } else {
                let e = d.exp();
                e / (1.0 + e)
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YesNoLogprobs {
    pub lp_yes: f64,
    pub lp_no: f64,
    pub degraded: bool,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Answer {
    Yes,
    No,
}

fn classify(token: &str) -> Option<Answer> {
    match token.trim().to_lowercase().as_str() {
        "yes" => Some(Answer::Yes),
        "no" => Some(Answer::No),
        _ => None,
    }
}

fn best_for(alts: &[TokenLogprob], answer: Answer) -> Option<f64> {
    alts.iter()
        .filter(|a| classify(&a.token) == Some(answer))
        .map(|a| a.logprob)
        .max_by(f64::total_cmp)
}

/// Reads the Yes/No log-probabilities at the first position whose most likely
/// alternative is a Yes or No token (case-insensitive, whitespace-trimmed).
/// Among several variants of the same answer the most likely one is used.
pub fn extract_yes_no(resp: &CompletionResponse) -> Result<YesNoLogprobs, ConfidenceError> {
    let positions = resp
        .token_logprobs
        .as_deref()
        .ok_or_else(|| ConfidenceError::Unscorable("response carries no logprobs".into()))?;
    for pos in positions {
        let alts = pos.alternatives();
        let Some(top) = alts.iter().max_by(|a, b| a.logprob.total_cmp(&b.logprob)) else {
            continue;
        };
        if classify(&top.token).is_none() {
            continue;
        }
        let floor = alts
            .iter()
            .map(|a| a.logprob)
            .filter(|lp| lp.is_finite())
            .min_by(f64::total_cmp)
            .unwrap_or(0.0)
            - MISSING_TOKEN_PENALTY;
        let yes = best_for(&alts, Answer::Yes);
        let no = best_for(&alts, Answer::No);
        return Ok(YesNoLogprobs {
            lp_yes: yes.unwrap_or(floor),
            lp_no: no.unwrap_or(floor),
            degraded: yes.is_none() || no.is_none(),
        });
    }
    Err(ConfidenceError::Unscorable(
        "no position has Yes or No as its most likely token".into(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verbalized {
    pub value: f64,
    /// Set when the text held anything besides the number.
    pub degraded: bool,
}

static DECIMAL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)").expect("valid regex"));

/// Takes the first decimal literal in `text` that lies in [0, 1].
pub fn parse_verbalized(text: &str) -> Result<Verbalized, ConfidenceError> {
    let trimmed = text.trim();
    for m in DECIMAL.find_iter(trimmed) {
        let Ok(value) = m.as_str().parse::<f64>() else {
            continue;
        };
        if (0.0..=1.0).contains(&value) {
            return Ok(Verbalized {
                value,
                degraded: m.as_str() != trimmed,
            });
        }
    }
    Err(ConfidenceError::Unscorable(format!(
        "no probability in [0, 1] found in {trimmed:?}"
    )))
}
