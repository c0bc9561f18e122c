use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{Backend, CompletionRequest, CompletionResponse, GatewayError};

/// Matches a request transcript that contains every `all` substring and none of
/// the `none` substrings.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matcher {
    #[serde(default)]
    pub all: Vec<String>,
    #[serde(default)]
    pub none: Vec<String>,
}

impl Matcher {
    pub fn contains<I, S>(all: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            all: all.into_iter().map(Into::into).collect(),
            none: Vec::new(),
        }
    }

    pub fn excluding<I, S>(mut self, none: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.none.extend(none.into_iter().map(Into::into));
        self
    }

    pub fn matches(&self, text: &str) -> bool {
        self.all.iter().all(|s| text.contains(s.as_str()))
            && !self.none.iter().any(|s| text.contains(s.as_str()))
    }

    /// True when every text matched by `self` is necessarily matched by `other`.
    fn implies(&self, other: &Matcher) -> bool {
        let required = other
            .all
            .iter()
            .all(|needle| self.all.iter().any(|have| have.contains(needle.as_str())));
        let excluded = other
            .none
            .iter()
            .all(|banned| self.none.iter().any(|mine| banned.contains(mine.as_str())));
        let consistent = !self.all.iter().any(|have| {
            self.none
                .iter()
                .any(|banned| have.contains(banned.as_str()))
        });
        consistent && required && excluded
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(flatten)]
    pub matcher: Matcher,
    pub response: CompletionResponse,
}

impl MockRule {
    pub fn new(matcher: Matcher, response: CompletionResponse) -> Self {
        Self { matcher, response }
    }
}

/// On-disk form of a mock script.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
}

/// Deterministic scripted backend.
///
/// Two rules where one matcher implies the other are rejected at construction;
/// a request matched by more than one rule at call time is also an error.
#[derive(Debug)]
pub struct MockBackend {
    rules: Vec<MockRule>,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(rules: Vec<MockRule>) -> Result<Self, GatewayError> {
        for (i, a) in rules.iter().enumerate() {
            for (j, b) in rules.iter().enumerate().skip(i + 1) {
                if a.matcher.implies(&b.matcher) || b.matcher.implies(&a.matcher) {
                    return Err(GatewayError::Config(format!(
                        "mock rules {i} and {j} overlap: {:?} / {:?}",
                        a.matcher, b.matcher
                    )));
                }
            }
        }
        Ok(Self {
            rules,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn from_script(script: MockScript) -> Result<Self, GatewayError> {
        Self::new(script.rules)
    }

    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let bytes =
            fs::read(path).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        let script: MockScript = serde_json::from_slice(&bytes)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        Self::from_script(script)
    }

    /// Number of requests served so far (successful or not).
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Backend for MockBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let text = req.transcript();
        let hits: Vec<usize> = self
            .rules
            .iter()
            .enumerate()
            .filter(|(_, r)| r.matcher.matches(&text))
            .map(|(i, _)| i)
            .collect();
        let rule = match hits.as_slice() {
            [] => {
                let excerpt: String = text.chars().take(120).collect();
                return Err(GatewayError::ScriptedGap { excerpt });
            }
            [i] => &self.rules[*i],
            _ => return Err(GatewayError::AmbiguousScript(hits)),
        };
        let mut response = rule.response.clone();
        if req.top_logprobs.is_none() {
            response.token_logprobs = None;
        }
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::super::Decoding;
    use super::*;

    fn req(prompt: &str) -> CompletionRequest {
        CompletionRequest::new("m", prompt, Decoding::greedy(8))
    }

    #[test]
    fn substring_rule_answers_any_ask_prompt() {
        let mock = MockBackend::new(vec![MockRule::new(
            Matcher::contains(["Do you need additional hints?"]),
            CompletionResponse::text("No"),
        )])
        .unwrap();
        for q in ["a", "b"] {
            let prompt = format!("question {q}\nDo you need additional hints? Answer (Yes / No):");
            assert_eq!(mock.complete(&req(&prompt)).unwrap().text, "No");
        }
    }

    #[test]
    fn overlapping_rules_rejected() {
        let r = |m: Matcher| MockRule::new(m, CompletionResponse::text("x"));
        assert!(MockBackend::new(vec![
            r(Matcher::contains(["hints"])),
            r(Matcher::contains(["additional hints"])),
        ])
        .is_err());
        assert!(
            MockBackend::new(vec![r(Matcher::default()), r(Matcher::contains(["a"]))]).is_err()
        );
        // Disjoint by exclusion.
        assert!(MockBackend::new(vec![
            r(Matcher::contains(["-- Question: q1"]).excluding(["External Knowledge"])),
            r(Matcher::contains(["External Knowledge", "-- Question: q1"])),
        ])
        .is_ok());
    }

    #[test]
    fn empty_script_is_scripted_gap() {
        let mock = MockBackend::new(vec![]).unwrap();
        assert!(matches!(
            mock.complete(&req("anything")),
            Err(GatewayError::ScriptedGap { .. })
        ));
    }

    #[test]
    fn runtime_ambiguity_reported() {
        let mock = MockBackend::new(vec![
            MockRule::new(Matcher::contains(["a"]), CompletionResponse::text("1")),
            MockRule::new(Matcher::contains(["b"]), CompletionResponse::text("2")),
        ])
        .unwrap();
        assert!(matches!(
            mock.complete(&req("a b")),
            Err(GatewayError::AmbiguousScript(v)) if v == vec![0, 1]
        ));
    }

    #[test]
    fn logprobs_only_when_requested() {
        let mock = MockBackend::new(vec![MockRule::new(
            Matcher::contains(["q"]),
            CompletionResponse::with_alternatives(&[("Yes", -0.1), ("No", -2.4)]),
        )])
        .unwrap();
        assert!(mock.complete(&req("q")).unwrap().token_logprobs.is_none());
        assert!(mock
            .complete(&req("q").with_logprobs(5))
            .unwrap()
            .token_logprobs
            .is_some());
        assert_eq!(mock.calls(), 2);
    }

    #[test]
    fn script_file_round_trip() {
        let script = MockScript {
            rules: vec![MockRule::new(
                Matcher::contains(["x"]).excluding(["y"]),
                CompletionResponse::text("```sql\nSELECT 1\n```"),
            )],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.json");
        fs::write(&path, serde_json::to_vec_pretty(&script).unwrap()).unwrap();
        let mock = MockBackend::from_file(&path).unwrap();
        assert_eq!(
            mock.complete(&req("x")).unwrap().text,
            "```sql\nSELECT 1\n```"
        );
        assert!(mock.complete(&req("x y")).is_err());
    }
}
