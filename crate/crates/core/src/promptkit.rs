//! Prompt templates: SQL generation (with and without support) and the
//! support-seeking prompts, log-probability and verbalized variants.
//!
//! Templates are plain-text assets with `{name}` placeholders. Substitution is
//! single pass, so braces inside payloads (schemas, SQL) are never re-expanded.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

const GEN_TEMPLATE: &str = include_str!("../templates/gen.txt");
const GEN_WITH_SUPPORT_TEMPLATE: &str = include_str!("../templates/gen_with_support.txt");
const ASK_TEMPLATE: &str = include_str!("../templates/ask.txt");
const VERB_TEMPLATE: &str = include_str!("../templates/verb.txt");

pub const ITEM_DB_SCHEMA: &str = "Database schema";
pub const ITEM_QUESTION: &str = "User's question";
pub const ITEM_GEN_SQL: &str = "Generated SQL";
pub const ITEM_EXE_RESULTS: &str = "SQL execution results";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("{method} context requires {field}")]
    MissingField { method: Method, field: &'static str },
    #[error("{method} context must not carry {field}")]
    ForbiddenField { method: Method, field: &'static str },
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("template placeholder `{{{0}}}` has no value")]
    UnboundPlaceholder(String),
}

/// Which information the model sees before deciding whether to ask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// Schema and question.
    #[serde(rename = "DA")]
    DirectAsk,
    /// Schema, question and the model's own SQL.
    #[serde(rename = "WA")]
    WriteThenAsk,
    /// Schema, question, SQL and its execution results.
    #[serde(rename = "EA")]
    ExecuteThenAsk,
}

impl Method {
    pub const ALL: [Method; 3] = [
        Method::DirectAsk,
        Method::WriteThenAsk,
        Method::ExecuteThenAsk,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Method::DirectAsk => "DA",
            Method::WriteThenAsk => "WA",
            Method::ExecuteThenAsk => "EA",
        }
    }

    pub fn needs_sql(self) -> bool {
        !matches!(self, Method::DirectAsk)
    }

    pub fn needs_results(self) -> bool {
        matches!(self, Method::ExecuteThenAsk)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "DA" => Ok(Method::DirectAsk),
            "WA" => Ok(Method::WriteThenAsk),
            "EA" => Ok(Method::ExecuteThenAsk),
            _ => Err(format!("unknown method `{s}` (expected DA, WA or EA)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Gen,
    GenWithSupport,
    Ask,
    Verb,
}

impl TemplateId {
    pub const ALL: [TemplateId; 4] = [
        TemplateId::Gen,
        TemplateId::GenWithSupport,
        TemplateId::Ask,
        TemplateId::Verb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateId::Gen => "gen",
            TemplateId::GenWithSupport => "gen_with_support",
            TemplateId::Ask => "ask",
            TemplateId::Verb => "verb",
        }
    }

    /// Template text without the asset file's trailing newline.
    pub fn source(self) -> &'static str {
        let raw = match self {
            TemplateId::Gen => GEN_TEMPLATE,
            TemplateId::GenWithSupport => GEN_WITH_SUPPORT_TEMPLATE,
            TemplateId::Ask => ASK_TEMPLATE,
            TemplateId::Verb => VERB_TEMPLATE,
        };
        raw.strip_suffix('\n').unwrap_or(raw)
    }

    pub fn digest(self) -> String {
        hex::encode(Sha256::digest(self.source().as_bytes()))
    }
}

/// Digest of every template, keyed by template name; recorded in run manifests.
pub fn template_digests() -> BTreeMap<String, String> {
    TemplateId::ALL
        .iter()
        .map(|t| (t.name().to_string(), t.digest()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    /// The filled `{items}` enumeration; empty for generation prompts.
    pub items_line: String,
    pub template_id: TemplateId,
}

/// What the model is shown when deciding whether to ask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AskContext<'a> {
    pub method: Method,
    pub db_schema: &'a str,
    pub question: &'a str,
    pub gen_sql: Option<&'a str>,
    pub exe_results: Option<&'a str>,
}

impl<'a> AskContext<'a> {
    pub fn direct(db_schema: &'a str, question: &'a str) -> Self {
        Self {
            method: Method::DirectAsk,
            db_schema,
            question,
            gen_sql: None,
            exe_results: None,
        }
    }

    pub fn write_then_ask(db_schema: &'a str, question: &'a str, gen_sql: &'a str) -> Self {
        Self {
            method: Method::WriteThenAsk,
            gen_sql: Some(gen_sql),
            ..Self::direct(db_schema, question)
        }
    }

    pub fn execute_then_ask(
        db_schema: &'a str,
        question: &'a str,
        gen_sql: &'a str,
        exe_results: &'a str,
    ) -> Self {
        Self {
            method: Method::ExecuteThenAsk,
            gen_sql: Some(gen_sql),
            exe_results: Some(exe_results),
            ..Self::direct(db_schema, question)
        }
    }

    pub fn check(&self) -> Result<(), PromptError> {
        let method = self.method;
        match (method.needs_sql(), self.gen_sql) {
            (true, None) => {
                return Err(PromptError::MissingField {
                    method,
                    field: "gen_sql",
                })
            }
            (false, Some(_)) => {
                return Err(PromptError::ForbiddenField {
                    method,
                    field: "gen_sql",
                })
            }
            _ => {}
        }
        match (method.needs_results(), self.exe_results) {
            (true, None) => Err(PromptError::MissingField {
                method,
                field: "exe_results",
            }),
            (false, Some(_)) => Err(PromptError::ForbiddenField {
                method,
                field: "exe_results",
            }),
            _ => Ok(()),
        }
    }

    fn items(&self) -> Vec<(&'static str, &'a str)> {
        let mut items = vec![
            (ITEM_DB_SCHEMA, self.db_schema),
            (ITEM_QUESTION, self.question),
        ];
        if let Some(sql) = self.gen_sql {
            items.push((ITEM_GEN_SQL, sql));
        }
        if let Some(results) = self.exe_results {
            items.push((ITEM_EXE_RESULTS, results));
        }
        items
    }

    pub fn items_line(&self) -> String {
        self.items()
            .iter()
            .map(|(name, _)| *name)
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Labeled payload blocks (`<Item Name>:\n<payload>`) separated by blank lines.
    pub fn information_block(&self) -> String {
        self.items()
            .iter()
            .map(|(name, payload)| format!("{name}:\n{payload}"))
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

fn fill(template: &str, values: &[(&str, &str)]) -> Result<String, PromptError> {
    let mut out =
        String::with_capacity(template.len() + values.iter().map(|v| v.1.len()).sum::<usize>());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}');
        let name = close.map(|c| &after[..c]);
        match name {
            Some(name)
                if !name.is_empty()
                    && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') =>
            {
                let value = values
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| PromptError::UnboundPlaceholder(name.to_string()))?;
                out.push_str(value);
                rest = &after[name.len() + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// SQL-generation prompt. Any `Some` support, even empty, selects the
/// external-knowledge variant.
pub fn render_generation(
    db_schema: &str,
    question: &str,
    support: Option<&str>,
) -> Result<RenderedPrompt, PromptError> {
    if db_schema.trim().is_empty() {
        return Err(PromptError::Empty("db_schema"));
    }
    if question.trim().is_empty() {
        return Err(PromptError::Empty("question"));
    }
    let (template_id, text) = match support {
        None => (
            TemplateId::Gen,
            fill(
                TemplateId::Gen.source(),
                &[("db_schema", db_schema), ("question", question)],
            )?,
        ),
        Some(support) => (
            TemplateId::GenWithSupport,
            fill(
                TemplateId::GenWithSupport.source(),
                &[
                    ("db_schema", db_schema),
                    ("question", question),
                    ("support", support),
                ],
            )?,
        ),
    };
    Ok(RenderedPrompt {
        text,
        items_line: String::new(),
        template_id,
    })
}

fn render_with(
    template_id: TemplateId,
    ctx: &AskContext<'_>,
) -> Result<RenderedPrompt, PromptError> {
    ctx.check()?;
    let items_line = ctx.items_line();
    let information = ctx.information_block();
    let text = fill(
        template_id.source(),
        &[("items", &items_line), ("information", &information)],
    )?;
    Ok(RenderedPrompt {
        text,
        items_line,
        template_id,
    })
}

/// The Yes/No support-seeking prompt.
pub fn render_ask(ctx: &AskContext<'_>) -> Result<RenderedPrompt, PromptError> {
    render_with(TemplateId::Ask, ctx)
}

/// The verbalized-probability variant of [`render_ask`].
pub fn render_verbalized(ctx: &AskContext<'_>) -> Result<RenderedPrompt, PromptError> {
    render_with(TemplateId::Verb, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: &str = "CREATE TABLE t(a INT)";
    const Q: &str = "How many rows?";

    #[test]
    fn generation_without_support() {
        let p = render_generation(S, Q, None).unwrap();
        assert!(p.text.contains(&format!("-- Question: {Q}")));
        assert!(!p.text.contains("External Knowledge"));
        assert_eq!(p.template_id, TemplateId::Gen);
        assert!(p.text.starts_with(S));
    }

    #[test]
    fn generation_with_support() {
        let p = render_generation(S, Q, Some("use ROUND")).unwrap();
        assert!(p.text.contains("-- External Knowledge: use ROUND\n"));
        let p = render_generation(S, Q, Some("")).unwrap();
        assert!(p.text.contains("-- External Knowledge: \n"));
        assert_eq!(p.template_id, TemplateId::GenWithSupport);
    }

    #[test]
    fn generation_requires_inputs() {
        assert_eq!(
            render_generation("", Q, None),
            Err(PromptError::Empty("db_schema"))
        );
        assert_eq!(
            render_generation(S, " ", None),
            Err(PromptError::Empty("question"))
        );
    }

    #[test]
    fn items_lines() {
        let da = render_ask(&AskContext::direct(S, Q)).unwrap();
        assert_eq!(da.items_line, "Database schema, User's question");
        let wa = render_ask(&AskContext::write_then_ask(S, Q, "SELECT 1")).unwrap();
        assert_eq!(
            wa.items_line,
            "Database schema, User's question, Generated SQL"
        );
        let ea = render_ask(&AskContext::execute_then_ask(
            S,
            Q,
            "SELECT 1",
            "rows: 1\n1",
        ))
        .unwrap();
        assert_eq!(
            ea.items_line,
            "Database schema, User's question, Generated SQL, SQL execution results"
        );
        assert!(ea
            .text
            .contains("(Database schema, User's question, Generated SQL, SQL execution results)"));
    }

    #[test]
    fn context_invariants() {
        let mut wa = AskContext::write_then_ask(S, Q, "x");
        wa.gen_sql = None;
        assert_eq!(
            render_ask(&wa),
            Err(PromptError::MissingField {
                method: Method::WriteThenAsk,
                field: "gen_sql"
            })
        );
        let mut da = AskContext::direct(S, Q);
        da.exe_results = Some("r");
        assert!(matches!(
            render_ask(&da),
            Err(PromptError::ForbiddenField { .. })
        ));
        let mut ea = AskContext::execute_then_ask(S, Q, "x", "r");
        ea.exe_results = None;
        assert!(matches!(
            render_verbalized(&ea),
            Err(PromptError::MissingField {
                field: "exe_results",
                ..
            })
        ));
    }

    #[test]
    fn payload_braces_not_expanded() {
        let p = render_generation("CREATE TABLE t(\"{question}\" INT)", Q, None).unwrap();
        assert!(p.text.starts_with("CREATE TABLE t(\"{question}\" INT)"));
        assert!(fill("a {x} {b c} {", &[("x", "{x}")]).unwrap() == "a {x} {b c} {");
        assert_eq!(
            fill("{missing}", &[]),
            Err(PromptError::UnboundPlaceholder("missing".into()))
        );
    }

    #[test]
    fn verbalized_shares_information_block() {
        let ctx = AskContext::execute_then_ask(S, Q, "SELECT 1", "rows: 1\n1");
        let ask = render_ask(&ctx).unwrap().text;
        let verb = render_verbalized(&ctx).unwrap().text;
        let block = format!("```\n{}\n```", ctx.information_block());
        assert!(ask.contains(&block) && verb.contains(&block));
        assert!(verb.ends_with("no other words or explanations are needed."));
        assert!(ask.ends_with("Do you need additional hints? Answer (Yes / No):"));
    }

    #[test]
    fn method_codes() {
        for m in Method::ALL {
            assert_eq!(m.code().parse::<Method>().unwrap(), m);
            assert_eq!(
                serde_json::to_string(&m).unwrap(),
                format!("\"{}\"", m.code())
            );
        }
        assert!("XX".parse::<Method>().is_err());
    }

    #[test]
    fn digests_are_stable_and_distinct() {
        let d = template_digests();
        assert_eq!(d.len(), 4);
        let unique: std::collections::BTreeSet<_> = d.values().collect();
        assert_eq!(unique.len(), 4);
        assert_eq!(d, template_digests());
    }
}
