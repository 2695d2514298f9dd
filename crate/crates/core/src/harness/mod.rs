//! End-to-end pipeline per sentence, per condition, and across the
//! knowledge-base size sweep.

mod report;

pub use report::{
    case_report, default_case_selection, table1_csv, table1_markdown, verify_control, write_artifacts, CellResult,
    ConditionSummary, SentenceRow, SweepReport,
};

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{AnalysisError, AnalysisResult, Analyzer, JudgmentBackend, NmccType, RiskCategory};
use crate::bleu::{gain_rows, macro_average, score_text, BleuError, BleuScore};
use crate::config::{ConfigError, PipelineConfig};
use crate::corpus::{check_disjoint, subset, ContaminationReport, Corpus, CorpusError};
use crate::generation::{translate, GenerationError, LoggedRecord, RunLog, TranslationRecord, Translator};
use crate::promptgen::{render_bare, render_prompt, EnhancedPrompt, PromptError, PromptTemplate};
use crate::retrieval::{
    build_index, embed, search, EmbeddingCache, Encoder, RetrievalError, RetrievalHit, VectorIndex,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Analysis,
    Retrieval,
    Prompt,
    Generation,
    Scoring,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Analysis => "analysis",
            Stage::Retrieval => "retrieval",
            Stage::Prompt => "prompt",
            Stage::Generation => "generation",
            Stage::Scoring => "scoring",
        })
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("test set and knowledge base overlap:\n{0}")]
    Contaminated(ContaminationReport),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("knowledge-base size {0} is not among the configured sizes")]
    SizeNotConfigured(usize),
    #[error("sweep sizes must include 0 (the retrieval-disabled baseline)")]
    MissingBaseline,
    #[error("sizes must be ascending, unique and at most the knowledge-base size ({kb_len}); got {sizes:?}")]
    BadSizes { sizes: Vec<usize>, kb_len: usize },
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("unknown case selection: {0}")]
    UnknownCase(String),
    #[error("io: {0}")]
    Io(String),
}

impl HarnessError {
    fn stage<E: std::error::Error + Send + Sync + 'static>(stage: Stage) -> impl FnOnce(E) -> HarnessError {
        move |e| HarnessError::Stage {
            stage,
            source: Box::new(e),
        }
    }

    pub fn failed_stage(&self) -> Option<Stage> {
        match self {
            HarnessError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

impl From<AnalysisError> for HarnessError {
    fn from(e: AnalysisError) -> Self {
        HarnessError::stage(Stage::Analysis)(e)
    }
}

impl From<RetrievalError> for HarnessError {
    fn from(e: RetrievalError) -> Self {
        HarnessError::stage(Stage::Retrieval)(e)
    }
}

impl From<PromptError> for HarnessError {
    fn from(e: PromptError) -> Self {
        HarnessError::stage(Stage::Prompt)(e)
    }
}

impl From<GenerationError> for HarnessError {
    fn from(e: GenerationError) -> Self {
        HarnessError::stage(Stage::Generation)(e)
    }
}

impl From<BleuError> for HarnessError {
    fn from(e: BleuError) -> Self {
        HarnessError::stage(Stage::Scoring)(e)
    }
}

/// A knowledge base together with its index.
pub struct KnowledgeBase {
    pub corpus: Corpus,
    pub index: VectorIndex,
}

/// Everything one sentence went through.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceRun {
    pub analysis: AnalysisResult,
    pub hits: Vec<RetrievalHit>,
    pub record: TranslationRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceResult {
    pub test_id: String,
    pub a1: NmccType,
    pub a2: BTreeSet<RiskCategory>,
    pub hits: Vec<RetrievalHit>,
    pub output_zh: Option<String>,
    pub bleu: Option<BleuScore>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub size: usize,
    pub condition_hash: String,
    pub snapshot: serde_json::Value,
    pub sentences: Vec<SentenceResult>,
    pub records: Vec<TranslationRecord>,
    pub mean_bleu: f64,
    /// Fraction of test sentences that produced a scored translation.
    pub completion: f64,
    /// Sentences served from the run log instead of the backends.
    pub reused: usize,
}

impl ConditionResult {
    pub fn is_complete(&self) -> bool {
        self.completion == 1.0
    }
}

/// Per-sentence analyses shared by every condition of a sweep, computed at
/// most once and only when a sentence actually needs generating.
struct AnalysisMemo {
    slots: HashMap<String, OnceLock<Result<AnalysisResult, String>>>,
}

impl AnalysisMemo {
    fn new(test: &Corpus) -> Self {
        AnalysisMemo {
            slots: test.pairs.iter().map(|p| (p.id.clone(), OnceLock::new())).collect(),
        }
    }

    fn get(&self, engine: &Engine, id: &str, sl: &str) -> Result<AnalysisResult, HarnessError> {
        let compute = || engine.analyze(sl).map_err(|e| e.to_string());
        let result = match self.slots.get(id) {
            Some(slot) => slot.get_or_init(compute).clone(),
            None => compute(),
        };
        result.map_err(|message| HarnessError::Stage {
            stage: Stage::Analysis,
            source: message.into(),
        })
    }
}

/// The pipeline with its backends wired in. The CLI and the service both drive
/// the same engine.
pub struct Engine {
    pub cfg: PipelineConfig,
    judge: Box<dyn JudgmentBackend>,
    encoder: Box<dyn Encoder>,
    translator: Box<dyn Translator>,
    template: PromptTemplate,
    cache: Arc<EmbeddingCache>,
}

impl Engine {
    pub fn from_config(cfg: PipelineConfig, cache: Arc<EmbeddingCache>) -> Result<Self, HarnessError> {
        let judge = cfg.analysis.build();
        let encoder = cfg.encoder.build();
        let translator = cfg.generation.build();
        Self::with_backends(cfg, judge, encoder, translator, cache)
    }

    pub fn with_backends(
        cfg: PipelineConfig,
        judge: Box<dyn JudgmentBackend>,
        encoder: Box<dyn Encoder>,
        translator: Box<dyn Translator>,
        cache: Arc<EmbeddingCache>,
    ) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let template = PromptTemplate::builtin(&cfg.template_version)?;
        Ok(Engine {
            cfg,
            judge,
            encoder,
            translator,
            template,
            cache,
        })
    }

    pub fn template(&self) -> &PromptTemplate {
        &self.template
    }

    pub fn encoder_id(&self) -> String {
        self.encoder.id()
    }

    pub fn analyze(&self, sl: &str) -> Result<AnalysisResult, AnalysisError> {
        Analyzer::new(self.judge.as_ref())
            .with_transport(self.cfg.retry)
            .analyze(sl)
    }

    pub fn build_index(&self, kb: &Corpus) -> Result<VectorIndex, RetrievalError> {
        build_index(
            kb,
            self.encoder.as_ref(),
            &self.cache,
            &self.cfg.retriever,
            self.cfg.retry,
        )
    }

    pub fn knowledge_base(&self, corpus: Corpus) -> Result<KnowledgeBase, RetrievalError> {
        let index = self.build_index(&corpus)?;
        Ok(KnowledgeBase { corpus, index })
    }

    pub fn retrieve(&self, index: &VectorIndex, sl: &str) -> Result<Vec<RetrievalHit>, RetrievalError> {
        let query = embed(sl, self.encoder.as_ref(), &self.cache, self.cfg.retry)?;
        search(index, &query, &self.cfg.retriever)
    }

    pub fn compose(
        &self,
        sl: &str,
        analysis: &AnalysisResult,
        hits: &[RetrievalHit],
        kb: &Corpus,
    ) -> Result<EnhancedPrompt, PromptError> {
        render_prompt(sl, analysis.a1, &analysis.a2, hits, kb, &self.template)
    }

    pub fn generate(&self, test_id: &str, prompt: &EnhancedPrompt) -> Result<TranslationRecord, GenerationError> {
        translate(test_id, prompt, self.translator.as_ref(), self.cfg.retry)
    }

    pub fn score(&self, hyp: &str, reference: &str) -> Result<BleuScore, BleuError> {
        score_text(hyp, reference, self.cfg.smoothing_epsilon)
    }

    /// analysis → retrieval (when a knowledge base is given) → prompt →
    /// generation. A supplied analysis is reused instead of asking the backend.
    pub fn run_sentence(
        &self,
        test_id: &str,
        sl: &str,
        kb: Option<&KnowledgeBase>,
        analysis: Option<&AnalysisResult>,
    ) -> Result<SentenceRun, HarnessError> {
        let sl = crate::text::normalize(sl);
        if sl.is_empty() {
            return Err(HarnessError::stage(Stage::Analysis)(AnalysisError::EmptySentence));
        }
        let bare = kb.is_none() && self.cfg.bare_baseline;
        let analysis = match (bare, analysis) {
            (true, _) => AnalysisResult::skipped(),
            (false, Some(a)) => a.clone(),
            (false, None) => self.analyze(&sl)?,
        };
        let hits = match kb {
            Some(kb) => self.retrieve(&kb.index, &sl)?,
            None => Vec::new(),
        };
        let prompt = if bare {
            render_bare(&self.template, &sl)?
        } else {
            let empty;
            let corpus = match kb {
                Some(kb) => &kb.corpus,
                None => {
                    empty = Corpus::new(Vec::new(), crate::corpus::CorpusRole::KnowledgeBase);
                    &empty
                }
            };
            self.compose(&sl, &analysis, &hits, corpus)?
        };
        let record = self.generate(test_id, &prompt)?;
        Ok(SentenceRun { analysis, hits, record })
    }

    fn validate_sizes(&self, kb: &Corpus) -> Result<(), HarnessError> {
        let sizes = &self.cfg.sizes;
        let ok = sizes.windows(2).all(|w| w[0] < w[1]) && sizes.iter().all(|&s| s <= kb.len());
        if !ok {
            return Err(HarnessError::BadSizes {
                sizes: sizes.clone(),
                kb_len: kb.len(),
            });
        }
        Ok(())
    }

    fn gate(test: &Corpus, kb: &Corpus) -> Result<(), HarnessError> {
        let report = check_disjoint(test, kb);
        if report.is_clean() {
            Ok(())
        } else {
            Err(HarnessError::Contaminated(report))
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool, HarnessError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.max_concurrency)
            .build()
            .map_err(|e| HarnessError::Io(e.to_string()))
    }

    pub fn run_condition(
        &self,
        test: &Corpus,
        kb: &Corpus,
        size: usize,
        run_log: Option<&RunLog>,
    ) -> Result<ConditionResult, HarnessError> {
        Self::gate(test, kb)?;
        if !self.cfg.sizes.contains(&size) {
            return Err(HarnessError::SizeNotConfigured(size));
        }
        let memo = AnalysisMemo::new(test);
        self.run_condition_inner(test, kb, size, run_log, &memo, &self.pool()?)
    }

    fn run_condition_inner(
        &self,
        test: &Corpus,
        kb: &Corpus,
        size: usize,
        run_log: Option<&RunLog>,
        memo: &AnalysisMemo,
        pool: &rayon::ThreadPool,
    ) -> Result<ConditionResult, HarnessError> {
        let snapshot = self.cfg.condition_snapshot(size);
        let condition_hash = crate::config::hash_value(&snapshot);
        let knowledge = if size == 0 {
            None
        } else {
            let sub = subset(kb, size, self.cfg.seed)?;
            Some(self.knowledge_base(sub)?)
        };
        let knowledge = knowledge.as_ref();

        let outcomes: Vec<(Result<LoggedRecord, HarnessError>, bool)> = pool.install(|| {
            test.pairs
                .par_iter()
                .map(|pair| {
                    if let Some(entry) = run_log.and_then(|l| l.lookup(&pair.id, size, &condition_hash)) {
                        return (Ok(entry), true);
                    }
                    let run = (|| {
                        let analysis = if knowledge.is_none() && self.cfg.bare_baseline {
                            None
                        } else {
                            Some(memo.get(self, &pair.id, &pair.source_ja)?)
                        };
                        let run = self.run_sentence(&pair.id, &pair.source_ja, knowledge, analysis.as_ref())?;
                        let entry = LoggedRecord {
                            test_id: pair.id.clone(),
                            size,
                            config_hash: condition_hash.clone(),
                            analysis: run.analysis,
                            hits: run.hits,
                            record: run.record,
                        };
                        if let Some(log) = run_log {
                            log.append(&entry)?;
                        }
                        Ok(entry)
                    })();
                    (run, false)
                })
                .collect()
        });

        let mut sentences = Vec::with_capacity(test.len());
        let mut records = Vec::new();
        let mut scores = Vec::new();
        let mut reused = 0;
        for (pair, (outcome, from_log)) in test.pairs.iter().zip(outcomes) {
            reused += usize::from(from_log);
            let scored = outcome.and_then(|entry| {
                let bleu = self.score(&entry.record.output_zh, &pair.target_zh)?;
                Ok((entry, bleu))
            });
            match scored {
                Ok((entry, bleu)) => {
                    scores.push(bleu.score);
                    sentences.push(SentenceResult {
                        test_id: pair.id.clone(),
                        a1: entry.analysis.a1,
                        a2: entry.analysis.a2.clone(),
                        hits: entry.hits.clone(),
                        output_zh: Some(entry.record.output_zh.clone()),
                        bleu: Some(bleu),
                        error: None,
                    });
                    records.push(entry.record);
                }
                Err(e) => {
                    log::warn!("size {size}, sentence {}: {e}", pair.id);
                    sentences.push(SentenceResult {
                        test_id: pair.id.clone(),
                        a1: NmccType::Unknown,
                        a2: BTreeSet::new(),
                        hits: Vec::new(),
                        output_zh: None,
                        bleu: None,
                        error: Some(e.to_string()),
                    });
                }
            }
        }
        let completion = if test.is_empty() {
            0.0
        } else {
            scores.len() as f64 / test.len() as f64
        };
        let mean_bleu = macro_average(&scores).unwrap_or(0.0);
        Ok(ConditionResult {
            size,
            condition_hash,
            snapshot,
            sentences,
            records,
            mean_bleu,
            completion,
            reused,
        })
    }

    /// Runs every configured size over the same test set, then fills the gain
    /// table against the size-0 baseline. The contamination gate runs before
    /// any backend is called.
    pub fn sweep(&self, test: &Corpus, kb: &Corpus, run_log: Option<&RunLog>) -> Result<SweepReport, HarnessError> {
        if !self.cfg.sizes.contains(&0) {
            return Err(HarnessError::MissingBaseline);
        }
        if test.is_empty() {
            return Err(HarnessError::EmptyTestSet);
        }
        self.validate_sizes(kb)?;
        Self::gate(test, kb)?;
        let memo = AnalysisMemo::new(test);
        let pool = self.pool()?;
        let mut conditions = Vec::with_capacity(self.cfg.sizes.len());
        for &size in &self.cfg.sizes {
            log::info!("condition: knowledge-base size {size}");
            conditions.push(self.run_condition_inner(test, kb, size, run_log, &memo, &pool)?);
        }
        let means: Vec<(usize, f64)> = conditions.iter().map(|c| (c.size, c.mean_bleu)).collect();
        let rows = gain_rows(&means)?;
        Ok(SweepReport::assemble(&self.cfg, test, kb, rows, &conditions))
    }
}
