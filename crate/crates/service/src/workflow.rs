//! The five classroom steps over a session store and a pipeline engine. Every
//! method is blocking; the HTTP layer runs them off the async executor.

use ragmt::corpus::{Corpus, CorpusRole, SentencePair};
use ragmt::harness::{Engine, KnowledgeBase};
use ragmt::promptgen::{render_with_examples, EnhancedPrompt, ExampleLine};
use serde::{Deserialize, Serialize};

use crate::error::{Prerequisite, ServiceError};
use crate::session::{
    Event, Output, PostEdit, PromptVersion, ScoreRecord, ScoreTarget, Session, SessionHit, Status, Worksheet,
};
use crate::store::SessionStore;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComposeRequest {
    pub note: String,
    /// Replaces the template render with hand-written text.
    pub custom_text: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateRequest {
    /// 1-based prompt version; defaults to the latest.
    pub version: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectRequest {
    pub selected: bool,
    #[serde(default)]
    pub justification: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostEditRequest {
    pub text: String,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub reference: String,
    /// Defaults to the latest output.
    #[serde(default)]
    pub target: Option<ScoreTarget>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbStatus {
    pub loaded: bool,
    pub size: usize,
    pub digest: Option<String>,
    pub encoder_id: String,
    pub dim: Option<usize>,
    pub k: usize,
    pub template_version: String,
    pub config_hash: String,
}

pub struct Workbench {
    pub store: SessionStore,
    engine: Engine,
    kb: Option<KnowledgeBase>,
}

fn pipeline(e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Pipeline(e.to_string())
}

impl Workbench {
    pub fn new(store: SessionStore, engine: Engine, kb: Option<KnowledgeBase>) -> Self {
        Workbench { store, engine, kb }
    }

    pub fn kb_status(&self) -> KbStatus {
        KbStatus {
            loaded: self.kb.is_some(),
            size: self.kb.as_ref().map_or(0, |kb| kb.corpus.len()),
            digest: self.kb.as_ref().map(|kb| kb.corpus.digest()),
            encoder_id: self.engine.encoder_id(),
            dim: self.kb.as_ref().map(|kb| kb.index.dim),
            k: self.engine.cfg.retriever.k,
            template_version: self.engine.cfg.template_version.clone(),
            config_hash: self.engine.cfg.hash(),
        }
    }

    pub fn create(&self, sl: &str) -> Result<Session, ServiceError> {
        if sl.trim().is_empty() {
            return Err(ServiceError::Validation("source sentence is empty".into()));
        }
        self.store.create(sl)
    }

    pub fn get(&self, id: &str) -> Result<Session, ServiceError> {
        self.store.get(id)
    }

    pub fn analyze(&self, id: &str) -> Result<Session, ServiceError> {
        self.store.update(id, |s| {
            let analysis = self.engine.analyze(&s.sl).map_err(pipeline)?;
            Ok(Event::Analyzed { analysis })
        })
    }

    pub fn retrieve(&self, id: &str) -> Result<Session, ServiceError> {
        self.store.update(id, |s| {
            s.require_analysis("retrieve")?;
            let kb = self.kb.as_ref().ok_or(ServiceError::Prerequisite {
                step: "retrieve",
                missing: Prerequisite::Index,
            })?;
            let found = self.engine.retrieve(&kb.index, &s.sl).map_err(pipeline)?;
            let lookup = kb.corpus.id_lookup();
            let hits = found
                .into_iter()
                .map(|hit| {
                    let pair = lookup
                        .get(hit.pair_id.as_str())
                        .ok_or_else(|| ServiceError::Pipeline(format!("hit {} not in knowledge base", hit.pair_id)))?;
                    Ok(SessionHit {
                        jp: pair.source_ja.clone(),
                        zh: pair.target_zh.clone(),
                        hit,
                        selected: true,
                        justification: String::new(),
                    })
                })
                .collect::<Result<Vec<_>, ServiceError>>()?;
            Ok(Event::Retrieved { hits })
        })
    }

    pub fn select(&self, id: &str, rank: usize, req: SelectRequest) -> Result<Session, ServiceError> {
        self.store.update(id, |_| {
            Ok(Event::HitSelection {
                rank,
                selected: req.selected,
                justification: req.justification.trim().to_string(),
            })
        })
    }

    /// Renders from the currently selected hits and appends a prompt version.
    pub fn compose(&self, id: &str, req: ComposeRequest) -> Result<Session, ServiceError> {
        self.store.update(id, |s| {
            let analysis = s.require_analysis("compose")?;
            s.require_retrieved("compose")?;
            let selected = s.selected_hits();
            let (prompt, custom) = match req.custom_text.as_deref().map(str::trim) {
                Some(text) if !text.is_empty() => (
                    EnhancedPrompt {
                        role_block: String::new(),
                        analysis_block: String::new(),
                        examples_block: String::new(),
                        instruction_block: String::new(),
                        rendered: text.to_string(),
                        template_version: "custom".into(),
                    },
                    true,
                ),
                Some(_) => return Err(ServiceError::Validation("custom prompt text is empty".into())),
                None => {
                    let mut ordered = selected.clone();
                    ordered.sort_by_key(|h| h.hit.rank);
                    let examples: Vec<ExampleLine> = ordered
                        .iter()
                        .map(|h| ExampleLine {
                            jp: h.jp.clone(),
                            zh: h.zh.clone(),
                        })
                        .collect();
                    let prompt =
                        render_with_examples(self.engine.template(), &s.sl, analysis.a1, &analysis.a2, &examples)
                            .map_err(pipeline)?;
                    (prompt, false)
                }
            };
            Ok(Event::Composed {
                version: PromptVersion {
                    version: s.prompt_versions.len() + 1,
                    prompt,
                    note: req.note.clone(),
                    custom,
                    selected_ranks: selected.iter().map(|h| h.hit.rank).collect(),
                },
            })
        })
    }

    pub fn generate(&self, id: &str, req: GenerateRequest) -> Result<Session, ServiceError> {
        self.store.update(id, |s| {
            s.require_prompt("generate")?;
            let version = req.version.unwrap_or(s.prompt_versions.len());
            let pv = version
                .checked_sub(1)
                .and_then(|i| s.prompt_versions.get(i))
                .ok_or_else(|| ServiceError::Validation(format!("no prompt version {version}")))?;
            let record = self.engine.generate(&s.session_id, &pv.prompt).map_err(pipeline)?;
            Ok(Event::Generated {
                output: Output {
                    prompt_version: version,
                    record,
                },
            })
        })
    }

    pub fn post_edit(&self, id: &str, req: PostEditRequest) -> Result<Session, ServiceError> {
        self.store.update(id, |s| {
            s.require_output("post_edit")?;
            let text = ragmt::text::normalize(&req.text);
            if text.is_empty() {
                return Err(ServiceError::Validation("post-edit text is empty".into()));
            }
            Ok(Event::PostEdited {
                edit: PostEdit { text, note: req.note },
            })
        })
    }

    /// Scores against a reference the user supplies.
    pub fn score(&self, id: &str, req: ScoreRequest) -> Result<Session, ServiceError> {
        self.store.update(id, |s| {
            s.require_output("score")?;
            let target = req.target.unwrap_or(ScoreTarget::Output(s.outputs.len() - 1));
            let hyp = s
                .target_text(target)
                .ok_or_else(|| ServiceError::Validation(format!("nothing to score at {target:?}")))?;
            let reference = ragmt::text::normalize(&req.reference);
            if reference.is_empty() {
                return Err(ServiceError::Validation("reference is empty".into()));
            }
            let bleu = self.engine.score(hyp, &reference).map_err(pipeline)?;
            Ok(Event::Scored {
                score: ScoreRecord {
                    target,
                    reference,
                    bleu,
                },
            })
        })
    }

    pub fn archive(&self, id: &str) -> Result<Session, ServiceError> {
        self.store.update(id, |_| Ok(Event::Archived))
    }

    pub fn export(&self, id: &str) -> Result<Worksheet, ServiceError> {
        Ok(self.store.get(id)?.worksheet())
    }

    /// One pair per archived session: its source and final translation, with
    /// the session id as provenance.
    pub fn kb_candidates(&self, ids: &[String]) -> Result<Corpus, ServiceError> {
        let mut pairs = Vec::with_capacity(ids.len());
        for id in ids {
            let s = self.store.get(id)?;
            if s.status != Status::Archived {
                return Err(ServiceError::NotArchived(id.clone()));
            }
            let zh = s
                .final_translation()
                .ok_or_else(|| ServiceError::Validation(format!("session {id} has no translation")))?;
            let mut pair = SentencePair::new(format!("session-{id}"), &s.sl, zh);
            pair.meta.provenance_note = id.clone();
            pairs.push(pair);
        }
        Ok(Corpus::new(pairs, CorpusRole::KnowledgeBase))
    }
}
