#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use ragmt::analysis::StubScript;
use ragmt::config::{AnalysisSpec, PipelineConfig};
use ragmt::corpus::{Corpus, CorpusRole, SentencePair};
use ragmt::harness::Engine;
use ragmt::retrieval::EmbeddingCache;
use ragmt_service::{SessionStore, Workbench};

pub const SL: &str = "本を読んでいる学生が図書館で先生に質問した。";

pub fn kb() -> Corpus {
    let rows = [
        ("k1", "本を読んでいる学生が笑った。", "正在看书的学生笑了。"),
        ("k2", "図書館で勉強した学生が合格した。", "在图书馆学习的学生考上了。"),
        ("k3", "先生に質問した子供が褒められた。", "向老师提问的孩子受到了表扬。"),
        ("k4", "さんまを焼く匂いがする。", "有烤秋刀鱼的味道。"),
        ("k5", "駅で会った友人と話した。", "和在车站遇到的朋友聊了天。"),
        ("k6", "彼が作った料理はおいしい。", "他做的菜很好吃。"),
        ("k7", "窓を開けた子供が叱られた。", "打开窗户的孩子挨骂了。"),
        ("k8", "手紙を書いた人は誰ですか。", "写信的人是谁？"),
    ];
    Corpus::new(
        rows.iter().map(|(id, ja, zh)| SentencePair::new(*id, ja, zh)).collect(),
        CorpusRole::KnowledgeBase,
    )
}

pub fn engine() -> Engine {
    let cfg = PipelineConfig {
        analysis: AnalysisSpec::Scripted(StubScript::answering("ANSWER: INNER", "ANSWER: B")),
        ..PipelineConfig::default()
    };
    Engine::from_config(cfg, Arc::new(EmbeddingCache::in_memory())).unwrap()
}

pub fn workbench(dir: &Path) -> Workbench {
    workbench_with_kb(dir, true)
}

pub fn workbench_with_kb(dir: &Path, with_kb: bool) -> Workbench {
    let engine = engine();
    let kb = with_kb.then(|| engine.knowledge_base(kb()).unwrap());
    Workbench::new(SessionStore::open(dir).unwrap(), engine, kb)
}
