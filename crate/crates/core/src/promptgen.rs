//! Enhanced prompt rendering: role, analysis, retrieved examples and the
//! translation instruction, always in that order.
//!
//! Template files are split into sections by `@@ <name>` marker lines. The
//! shipped template:
//!
//! ```text
//! @@ role
//! You are a professional Japanese→Chinese translation expert.
//! @@ analysis
//! NMCC type (A1): {A1}
//!
//! Predicted error risks (A2): {A2}
//! @@ examples
//! Refer to the following similar translation examples:
//! {EXAMPLES}
//! @@ instruction
//! Based on the above evidence, translate the following Japanese sentence into Chinese accurately: {SL}.
//! ```

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{NmccType, RiskCategory};
use crate::corpus::Corpus;
use crate::retrieval::RetrievalHit;

pub const DEFAULT_TEMPLATE_VERSION: &str = "v1";
const ENHANCED_V1: &str = include_str!("../templates/enhanced_v1.txt");

/// Rendered prompts longer than this many characters are rejected.
pub const MAX_PROMPT_CHARS: usize = 16_000;

const SECTIONS: [&str; 4] = ["role", "analysis", "examples", "instruction"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("unknown template version `{0}`")]
    UnknownVersion(String),
    #[error("template: {0}")]
    Template(String),
    #[error("source sentence is empty")]
    EmptySentence,
    #[error("retrieval hit `{0}` does not resolve to a knowledge-base pair")]
    UnresolvedHit(String),
    #[error("rendered prompt is {0} characters, over the {MAX_PROMPT_CHARS} ceiling")]
    TooLong(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub version: String,
    pub role: String,
    pub analysis: String,
    pub examples: String,
    pub instruction: String,
}

impl PromptTemplate {
    pub fn builtin(version: &str) -> Result<Self, PromptError> {
        match version {
            "v1" => Self::parse(version, ENHANCED_V1),
            other => Err(PromptError::UnknownVersion(other.to_string())),
        }
    }

    pub fn parse(version: &str, text: &str) -> Result<Self, PromptError> {
        let mut sections: HashMap<&str, Vec<&str>> = HashMap::new();
        let mut order = Vec::new();
        let mut current: Option<&str> = None;
        for line in text.lines() {
            if let Some(name) = line.strip_prefix("@@ ") {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(PromptError::Template(format!("unknown section `{name}`")));
                }
                if sections.contains_key(name) {
                    return Err(PromptError::Template(format!("section `{name}` repeated")));
                }
                sections.insert(name, Vec::new());
                order.push(name);
                current = Some(name);
            } else if let Some(name) = current {
                sections.get_mut(name).expect("section exists").push(line);
            } else if !line.trim().is_empty() {
                return Err(PromptError::Template("text before the first section".into()));
            }
        }
        if order != SECTIONS {
            return Err(PromptError::Template(format!(
                "sections must be {} in that order, found {}",
                SECTIONS.join(", "),
                order.join(", ")
            )));
        }
        let take = |name: &str| -> String {
            let lines = &sections[name];
            let joined = lines.join("\n");
            joined.trim_matches('\n').to_string()
        };
        let t = PromptTemplate {
            version: version.to_string(),
            role: take("role"),
            analysis: take("analysis"),
            examples: take("examples"),
            instruction: take("instruction"),
        };
        for (field, body, needle) in [
            ("analysis", &t.analysis, "{A1}"),
            ("analysis", &t.analysis, "{A2}"),
            ("examples", &t.examples, "{EXAMPLES}"),
            ("instruction", &t.instruction, "{SL}"),
        ] {
            if !body.contains(needle) {
                return Err(PromptError::Template(format!("section `{field}` lacks {needle}")));
            }
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleLine {
    pub jp: String,
    pub zh: String,
}

impl ExampleLine {
    pub fn render(&self) -> String {
        format!("(JP){} → (ZH){}", self.jp, self.zh)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhancedPrompt {
    pub role_block: String,
    pub analysis_block: String,
    /// Empty exactly when no hits were supplied.
    pub examples_block: String,
    pub instruction_block: String,
    pub rendered: String,
    pub template_version: String,
}

/// Comma-joined risk names in A→D order, or "none".
pub fn format_risks(a2: &BTreeSet<RiskCategory>) -> String {
    if a2.is_empty() {
        "none".to_string()
    } else {
        a2.iter().map(|r| r.name()).collect::<Vec<_>>().join(", ")
    }
}

/// Renders from already-resolved example lines.
pub fn render_with_examples(
    template: &PromptTemplate,
    sl: &str,
    a1: NmccType,
    a2: &BTreeSet<RiskCategory>,
    examples: &[ExampleLine],
) -> Result<EnhancedPrompt, PromptError> {
    if sl.trim().is_empty() {
        return Err(PromptError::EmptySentence);
    }
    let role_block = template.role.clone();
    let analysis_block = template
        .analysis
        .replace("{A1}", &a1.to_string())
        .replace("{A2}", &format_risks(a2));
    let examples_block = if examples.is_empty() {
        String::new()
    } else {
        let lines: Vec<String> = examples.iter().map(ExampleLine::render).collect();
        template.examples.replace("{EXAMPLES}", &lines.join("\n"))
    };
    let instruction_block = template.instruction.replace("{SL}", sl);
    let rendered = [&role_block, &analysis_block, &examples_block, &instruction_block]
        .into_iter()
        .filter(|b| !b.is_empty())
        .map(String::as_str)
        .collect::<Vec<_>>()
        .join("\n\n");
    let chars = rendered.chars().count();
    if chars > MAX_PROMPT_CHARS {
        return Err(PromptError::TooLong(chars));
    }
    Ok(EnhancedPrompt {
        role_block,
        analysis_block,
        examples_block,
        instruction_block,
        rendered,
        template_version: template.version.clone(),
    })
}

/// Role and instruction only, for baselines that ablate the analysis block.
pub fn render_bare(template: &PromptTemplate, sl: &str) -> Result<EnhancedPrompt, PromptError> {
    let mut p = render_with_examples(template, sl, NmccType::Unknown, &BTreeSet::new(), &[])?;
    p.analysis_block.clear();
    p.rendered = format!("{}\n\n{}", p.role_block, p.instruction_block);
    Ok(p)
}

/// Renders the enhanced prompt, resolving every hit against the knowledge base
/// and listing examples in rank order.
pub fn render_prompt(
    sl: &str,
    a1: NmccType,
    a2: &BTreeSet<RiskCategory>,
    hits: &[RetrievalHit],
    kb: &Corpus,
    template: &PromptTemplate,
) -> Result<EnhancedPrompt, PromptError> {
    let lookup = kb.id_lookup();
    let mut ordered: Vec<&RetrievalHit> = hits.iter().collect();
    ordered.sort_by_key(|h| h.rank);
    let examples = ordered
        .into_iter()
        .map(|h| {
            lookup
                .get(h.pair_id.as_str())
                .map(|p| ExampleLine {
                    jp: p.source_ja.clone(),
                    zh: p.target_zh.clone(),
                })
                .ok_or_else(|| PromptError::UnresolvedHit(h.pair_id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    render_with_examples(template, sl, a1, a2, &examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CorpusRole, SentencePair};

    fn kb() -> Corpus {
        Corpus::new(
            (1..=6)
                .map(|i| SentencePair::new(format!("k{i}"), &format!("例文{i}を読む人"), &format!("读例句{i}的人")))
                .collect(),
            CorpusRole::KnowledgeBase,
        )
    }

    fn hit(id: &str, rank: usize) -> RetrievalHit {
        RetrievalHit {
            pair_id: id.into(),
            distance: rank as f64,
            similarity: 1.0 / (1.0 + rank as f64),
            rank,
        }
    }

    fn v1() -> PromptTemplate {
        PromptTemplate::builtin("v1").unwrap()
    }

    #[test]
    fn one_hit_prompt() {
        let a2 = [RiskCategory::NmccHandling].into_iter().collect();
        let p = render_prompt("さんまを焼く男", NmccType::Inner, &a2, &[hit("k2", 1)], &kb(), &v1()).unwrap();
        assert!(p
            .rendered
            .starts_with("You are a professional Japanese→Chinese translation expert."));
        assert_eq!(p.rendered.matches("(JP)").count(), 1);
        assert!(p.rendered.contains("(JP)例文2を読む人 → (ZH)读例句2的人"));
        assert!(p.analysis_block.contains("NMCC type (A1): inner"));
        assert!(p.analysis_block.contains("Predicted error risks (A2): NMCC handling"));
        assert_eq!(p.template_version, "v1");
    }

    #[test]
    fn zero_hits_has_empty_examples_block() {
        let p = render_prompt("文", NmccType::Outer, &BTreeSet::new(), &[], &kb(), &v1()).unwrap();
        assert!(p.examples_block.is_empty());
        assert!(p.analysis_block.ends_with("(A2): none"));
        assert!(!p.rendered.contains("Refer to"));
        assert!(!p.rendered.contains("\n\n\n"));
        let unknown = render_prompt("文", NmccType::Unknown, &BTreeSet::new(), &[], &kb(), &v1()).unwrap();
        assert!(unknown.rendered.contains("NMCC type (A1): unknown"));
    }

    #[test]
    fn examples_follow_rank_order() {
        let hits: Vec<_> = [("k5", 1), ("k1", 2), ("k3", 3), ("k6", 4), ("k2", 5)]
            .iter()
            .rev()
            .map(|(id, r)| hit(id, *r))
            .collect();
        let p = render_prompt("文", NmccType::Inner, &BTreeSet::new(), &hits, &kb(), &v1()).unwrap();
        let order: Vec<_> = p
            .rendered
            .lines()
            .filter(|l| l.starts_with("(JP)"))
            .map(|l| l.chars().nth(6).unwrap())
            .collect();
        assert_eq!(order, ['5', '1', '3', '6', '2']);
    }

    #[test]
    fn unresolved_hit_is_an_error() {
        let err = render_prompt(
            "文",
            NmccType::Inner,
            &BTreeSet::new(),
            &[hit("ghost", 1)],
            &kb(),
            &v1(),
        )
        .unwrap_err();
        assert_eq!(err, PromptError::UnresolvedHit("ghost".into()));
    }

    #[test]
    fn length_ceiling() {
        let long = "あ".repeat(MAX_PROMPT_CHARS);
        assert!(matches!(
            render_prompt(&long, NmccType::Inner, &BTreeSet::new(), &[], &kb(), &v1()),
            Err(PromptError::TooLong(_))
        ));
        assert_eq!(
            render_prompt(" ", NmccType::Inner, &BTreeSet::new(), &[], &kb(), &v1()),
            Err(PromptError::EmptySentence)
        );
    }

    #[test]
    fn template_validation() {
        assert!(matches!(
            PromptTemplate::builtin("v9"),
            Err(PromptError::UnknownVersion(_))
        ));
        let missing = "@@ role\nR\n@@ analysis\n{A1}\n@@ examples\n{EXAMPLES}\n@@ instruction\n{SL}";
        assert!(PromptTemplate::parse("x", missing).is_err());
        let reordered = "@@ analysis\n{A1} {A2}\n@@ role\nR\n@@ examples\n{EXAMPLES}\n@@ instruction\n{SL}";
        assert!(PromptTemplate::parse("x", reordered).is_err());
        let ok = "@@ role\nR\n@@ analysis\n{A1} {A2}\n@@ examples\nE:\n{EXAMPLES}\n@@ instruction\nT {SL}";
        let t = PromptTemplate::parse("x", ok).unwrap();
        let p = render_with_examples(
            &t,
            "s",
            NmccType::Inner,
            &BTreeSet::new(),
            &[ExampleLine {
                jp: "j".into(),
                zh: "z".into(),
            }],
        )
        .unwrap();
        assert_eq!(p.rendered, "R\n\ninner none\n\nE:\n(JP)j → (ZH)z\n\nT s");
    }

    #[test]
    fn bare_prompt_has_role_and_instruction_only() {
        let p = render_bare(&v1(), "文").unwrap();
        assert!(p.analysis_block.is_empty() && p.examples_block.is_empty());
        assert!(!p.rendered.contains("(A1)"));
        assert!(p.rendered.ends_with("into Chinese accurately: 文."));
    }

    #[test]
    fn length_grows_with_hits() {
        let kb = kb();
        let mut last = 0;
        for n in 0..=6 {
            let hits: Vec<_> = (1..=n).map(|i| hit(&format!("k{i}"), i)).collect();
            let p = render_prompt("文", NmccType::Inner, &BTreeSet::new(), &hits, &kb, &v1()).unwrap();
            assert!(p.rendered.len() > last);
            last = p.rendered.len();
        }
    }
}
