//! Session state and the events that build it.
//!
//! A session is never mutated directly: every change is an [`Event`], and
//! [`Session::apply`] is the only function that turns events into state. The
//! store persists the events, so replaying a session's file reproduces it.

use std::fmt::Write as _;

use ragmt::analysis::AnalysisResult;
use ragmt::bleu::BleuScore;
use ragmt::generation::TranslationRecord;
use ragmt::promptgen::EnhancedPrompt;
use ragmt::retrieval::RetrievalHit;
use serde::{Deserialize, Serialize};

use crate::error::{Prerequisite, ServiceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Open,
    Archived,
}

/// A retrieved example as shown on a hit card.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHit {
    #[serde(flatten)]
    pub hit: RetrievalHit,
    pub jp: String,
    pub zh: String,
    pub selected: bool,
    pub justification: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptVersion {
    /// 1-based.
    pub version: usize,
    pub prompt: EnhancedPrompt,
    pub note: String,
    /// Hand-edited text rather than a template render.
    pub custom: bool,
    pub selected_ranks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Output {
    pub prompt_version: usize,
    pub record: TranslationRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostEdit {
    pub text: String,
    pub note: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum ScoreTarget {
    Output(usize),
    PostEdit(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub target: ScoreTarget,
    pub reference: String,
    pub bleu: BleuScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Created {
        session_id: String,
        sl: String,
    },
    Analyzed {
        analysis: AnalysisResult,
    },
    Retrieved {
        hits: Vec<SessionHit>,
    },
    HitSelection {
        rank: usize,
        selected: bool,
        justification: String,
    },
    Composed {
        version: PromptVersion,
    },
    Generated {
        output: Output,
    },
    PostEdited {
        edit: PostEdit,
    },
    Scored {
        score: ScoreRecord,
    },
    Archived,
}

impl Event {
    pub fn name(&self) -> &'static str {
        match self {
            Event::Created { .. } => "create",
            Event::Analyzed { .. } => "analyze",
            Event::Retrieved { .. } => "retrieve",
            Event::HitSelection { .. } => "select",
            Event::Composed { .. } => "compose",
            Event::Generated { .. } => "generate",
            Event::PostEdited { .. } => "post_edit",
            Event::Scored { .. } => "score",
            Event::Archived => "archive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub sl: String,
    pub status: Status,
    pub analysis: Option<AnalysisResult>,
    pub retrieved: bool,
    pub hits: Vec<SessionHit>,
    pub prompt_versions: Vec<PromptVersion>,
    pub outputs: Vec<Output>,
    pub post_edits: Vec<PostEdit>,
    pub scores: Vec<ScoreRecord>,
    pub event_count: usize,
}

impl Session {
    /// Folds a full event log.
    pub fn replay<'a>(events: impl IntoIterator<Item = &'a Event>) -> Result<Option<Session>, ServiceError> {
        let mut state = None;
        for e in events {
            state = Some(Session::apply(state, e)?);
        }
        Ok(state)
    }

    pub fn apply(state: Option<Session>, event: &Event) -> Result<Session, ServiceError> {
        let mut s = match (state, event) {
            (None, Event::Created { session_id, sl }) => {
                if sl.trim().is_empty() {
                    return Err(ServiceError::Validation("source sentence is empty".into()));
                }
                return Ok(Session {
                    session_id: session_id.clone(),
                    sl: sl.clone(),
                    status: Status::Open,
                    analysis: None,
                    retrieved: false,
                    hits: Vec::new(),
                    prompt_versions: Vec::new(),
                    outputs: Vec::new(),
                    post_edits: Vec::new(),
                    scores: Vec::new(),
                    event_count: 1,
                });
            }
            (None, _) => return Err(ServiceError::Storage("event log does not start with creation".into())),
            (Some(s), Event::Created { .. }) => {
                return Err(ServiceError::Storage(format!("session {} created twice", s.session_id)))
            }
            (Some(s), _) => s,
        };
        s.check_open()?;
        match event {
            Event::Created { .. } => unreachable!(),
            Event::Analyzed { analysis } => s.analysis = Some(analysis.clone()),
            Event::Retrieved { hits } => {
                s.require_analysis("retrieve")?;
                s.hits = hits.clone();
                s.retrieved = true;
            }
            Event::HitSelection {
                rank,
                selected,
                justification,
            } => {
                s.require_retrieved("select")?;
                let hit = s
                    .hits
                    .iter_mut()
                    .find(|h| h.hit.rank == *rank)
                    .ok_or_else(|| ServiceError::Validation(format!("no hit with rank {rank}")))?;
                hit.selected = *selected;
                hit.justification = justification.clone();
            }
            Event::Composed { version } => {
                s.require_analysis("compose")?;
                s.require_retrieved("compose")?;
                if version.version != s.prompt_versions.len() + 1 {
                    return Err(ServiceError::Storage(format!(
                        "prompt version {} out of sequence",
                        version.version
                    )));
                }
                s.prompt_versions.push(version.clone());
            }
            Event::Generated { output } => {
                s.require_prompt("generate")?;
                if output.prompt_version == 0 || output.prompt_version > s.prompt_versions.len() {
                    return Err(ServiceError::Validation(format!(
                        "no prompt version {}",
                        output.prompt_version
                    )));
                }
                s.outputs.push(output.clone());
            }
            Event::PostEdited { edit } => {
                s.require_output("post_edit")?;
                if edit.text.trim().is_empty() {
                    return Err(ServiceError::Validation("post-edit text is empty".into()));
                }
                s.post_edits.push(edit.clone());
            }
            Event::Scored { score } => {
                s.require_output("score")?;
                if s.target_text(score.target).is_none() {
                    return Err(ServiceError::Validation(format!(
                        "nothing to score at {:?}",
                        score.target
                    )));
                }
                s.scores.push(score.clone());
            }
            Event::Archived => {
                if s.outputs.is_empty() && s.post_edits.is_empty() {
                    return Err(ServiceError::NothingToArchive);
                }
                let unjustified = s.unjustified();
                if !unjustified.is_empty() {
                    return Err(ServiceError::Unjustified(unjustified));
                }
                s.status = Status::Archived;
            }
        }
        s.event_count += 1;
        Ok(s)
    }

    pub fn check_open(&self) -> Result<(), ServiceError> {
        match self.status {
            Status::Open => Ok(()),
            Status::Archived => Err(ServiceError::Archived(self.session_id.clone())),
        }
    }

    pub fn require_analysis(&self, step: &'static str) -> Result<&AnalysisResult, ServiceError> {
        self.analysis.as_ref().ok_or(ServiceError::Prerequisite {
            step,
            missing: Prerequisite::Analyze,
        })
    }

    pub fn require_output(&self, step: &'static str) -> Result<(), ServiceError> {
        if self.outputs.is_empty() {
            return Err(ServiceError::Prerequisite {
                step,
                missing: Prerequisite::Generate,
            });
        }
        Ok(())
    }

    pub fn require_retrieved(&self, step: &'static str) -> Result<(), ServiceError> {
        if !self.retrieved {
            return Err(ServiceError::Prerequisite {
                step,
                missing: Prerequisite::Retrieve,
            });
        }
        Ok(())
    }

    pub fn require_prompt(&self, step: &'static str) -> Result<(), ServiceError> {
        if self.prompt_versions.is_empty() {
            return Err(ServiceError::Prerequisite {
                step,
                missing: Prerequisite::Compose,
            });
        }
        Ok(())
    }

    /// Ranks of hits whose keep/drop decision has no justification yet.
    pub fn unjustified(&self) -> Vec<usize> {
        self.hits
            .iter()
            .filter(|h| h.justification.trim().is_empty())
            .map(|h| h.hit.rank)
            .collect()
    }

    pub fn selected_hits(&self) -> Vec<&SessionHit> {
        self.hits.iter().filter(|h| h.selected).collect()
    }

    pub fn target_text(&self, target: ScoreTarget) -> Option<&str> {
        match target {
            ScoreTarget::Output(i) => self.outputs.get(i).map(|o| o.record.output_zh.as_str()),
            ScoreTarget::PostEdit(i) => self.post_edits.get(i).map(|e| e.text.as_str()),
        }
    }

    /// The text a knowledge-base candidate takes: the last post-edit, else
    /// the last output.
    pub fn final_translation(&self) -> Option<&str> {
        self.post_edits
            .last()
            .map(|e| e.text.as_str())
            .or_else(|| self.outputs.last().map(|o| o.record.output_zh.as_str()))
    }

    pub fn worksheet(&self) -> Worksheet {
        Worksheet::from_session(self)
    }
}

/// The audit document for one session, grouped by artifact class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Worksheet {
    pub session_id: String,
    pub status: Status,
    pub sl: String,
    pub analysis: Option<AnalysisResult>,
    pub retrieval_log: Vec<SessionHit>,
    pub prompt_versions: Vec<PromptVersion>,
    pub translations: Vec<Output>,
    pub review: Review,
    pub markdown: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Review {
    pub post_edits: Vec<PostEdit>,
    pub scores: Vec<ScoreRecord>,
}

impl Worksheet {
    fn from_session(s: &Session) -> Self {
        let mut md = String::new();
        let _ = writeln!(md, "# Session {} ({:?})\n\nSource: {}\n", s.session_id, s.status, s.sl);
        md.push_str("## Analysis\n\n");
        match &s.analysis {
            Some(a) => {
                let _ = writeln!(
                    md,
                    "- NMCC type (A1): {}\n- Predicted error risks (A2): {}\n- Backend: {} (prompts {})\n",
                    a.a1,
                    ragmt::promptgen::format_risks(&a.a2),
                    a.backend_id,
                    a.prompt_version
                );
            }
            None => md.push_str("(not analysed)\n\n"),
        }
        md.push_str("## Retrieval log\n\n| Rank | Distance | Similarity | Selected | Example | Justification |\n|---|---|---|---|---|---|\n");
        for h in &s.hits {
            let _ = writeln!(
                md,
                "| {} | {:.4} | {:.4} | {} | (JP){} → (ZH){} | {} |",
                h.hit.rank,
                h.hit.distance,
                h.hit.similarity,
                if h.selected { "yes" } else { "no" },
                h.jp,
                h.zh,
                h.justification
            );
        }
        md.push_str("\n## Prompt versions\n\n");
        for v in &s.prompt_versions {
            let kind = if v.custom { ", custom" } else { "" };
            let _ = writeln!(
                md,
                "### v{} ({}{kind})\n\nNote: {}\n\n```\n{}\n```\n",
                v.version, v.prompt.template_version, v.note, v.prompt.rendered
            );
        }
        md.push_str("## Translations\n\n");
        for (i, o) in s.outputs.iter().enumerate() {
            let _ = writeln!(
                md,
                "{}. [prompt v{}, {}] {}",
                i + 1,
                o.prompt_version,
                o.record.backend.model_id,
                o.record.output_zh
            );
        }
        md.push_str("\n## Review\n\n");
        for (i, e) in s.post_edits.iter().enumerate() {
            let _ = writeln!(md, "- Post-edit {}: {} (note: {})", i + 1, e.text, e.note);
        }
        for sc in &s.scores {
            let _ = writeln!(
                md,
                "- BLEU {:.2} for {:?} (bp {:.4}, p = {:?})",
                sc.bleu.score, sc.target, sc.bleu.bp, sc.bleu.precisions
            );
        }
        Worksheet {
            session_id: s.session_id.clone(),
            status: s.status,
            sl: s.sl.clone(),
            analysis: s.analysis.clone(),
            retrieval_log: s.hits.clone(),
            prompt_versions: s.prompt_versions.clone(),
            translations: s.outputs.clone(),
            review: Review {
                post_edits: s.post_edits.clone(),
                scores: s.scores.clone(),
            },
            markdown: md,
        }
    }
}
