use std::path::Path;
use std::process::{Command, Output};

const KANA: &[char] = &[
    'あ', 'い', 'う', 'え', 'お', 'か', 'き', 'く', 'け', 'こ', 'さ', 'し', 'す', 'せ', 'そ',
];
const HAN: &[char] = &[
    '的', '一', '是', '不', '了', '人', '我', '在', '有', '他', '这', '中', '大', '来',
];

fn ragmt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ragmt"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .unwrap()
}

fn text(seed: usize, alphabet: &[char], len: usize) -> String {
    let mut x = (seed as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..len)
        .map(|_| {
            x = x
                .wrapping_mul(6_364_136_223_846_793_005)
                .wrapping_add(1_442_695_040_888_963_407);
            alphabet[(x >> 33) as usize % alphabet.len()]
        })
        .collect()
}

fn write_corpus(path: &Path, prefix: &str, n: usize, offset: usize) {
    let lines: Vec<String> = (0..n)
        .map(|i| {
            serde_json::json!({
                "id": format!("{prefix}{i}"),
                "source_ja": text(i + offset, KANA, 10 + i % 5),
                "target_zh": text(i + offset, HAN, 8 + i % 3),
            })
            .to_string()
        })
        .collect();
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("kb.jsonl"), "kb", 30, 100);
    write_corpus(&dir.path().join("test.jsonl"), "t", 4, 0);
    dir
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn sweep_writes_reports_and_reruns_identically() {
    let dir = fixture();
    let args = [
        "--kb",
        "kb.jsonl",
        "--test",
        "test.jsonl",
        "--backend",
        "stub",
        "sweep",
        "--sizes",
        "0,10,30",
    ];
    let first = ragmt(dir.path(), &[&["--out", "a"][..], &args].concat());
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert!(stdout(&first).contains("| 0 (RAG disabled) |"));

    let csv = std::fs::read_to_string(dir.path().join("a/table1.csv")).unwrap();
    assert!(csv.starts_with("rag_size,average_bleu,absolute_gain,relative_gain_pct,config_hash\n"));
    assert_eq!(csv.lines().count(), 4);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a/report.json")).unwrap()).unwrap();
    assert_eq!(report["valid"], true);

    let second = ragmt(dir.path(), &[&["--out", "b"][..], &args].concat());
    assert!(second.status.success());
    for f in ["report.json", "table1.md", "table1.csv", "cases.md", "scores.jsonl"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between runs");
    }

    // Rerunning into the same directory reuses the logged generations.
    let resumed = ragmt(dir.path(), &[&["--out", "a"][..], &args].concat());
    assert!(resumed.status.success());
    assert_eq!(std::fs::read_to_string(dir.path().join("a/table1.csv")).unwrap(), csv);
}

#[test]
fn evaluate_identity_scores_100() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("h.txt"), "正在看书的学生笑了。\n老师走了。\n").unwrap();
    std::fs::write(dir.path().join("r.txt"), "正在看书的学生笑了。\n老师走了。\n").unwrap();
    let out = ragmt(
        dir.path(),
        &["--out", "scores.jsonl", "evaluate", "--hyp", "h.txt", "--ref", "r.txt"],
    );
    assert!(out.status.success());
    assert_eq!(stdout(&out), "line1\t100.00\nline2\t100.00\nmean\t100.00\n");
    let rows: Vec<serde_json::Value> = std::fs::read_to_string(dir.path().join("scores.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2]["kind"], "summary");
    assert!(rows[2]["config_hash"].as_str().unwrap().len() == 64);
}

#[test]
fn evaluate_rejects_mismatched_line_counts() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("h.txt"), "一\n二\n").unwrap();
    std::fs::write(dir.path().join("r.txt"), "一\n").unwrap();
    let out = ragmt(dir.path(), &["evaluate", "--hyp", "h.txt", "--ref", "r.txt"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn contaminated_inputs_fail_check_and_sweep() {
    let dir = fixture();
    let mut kb = std::fs::read_to_string(dir.path().join("kb.jsonl")).unwrap();
    let leaked = std::fs::read_to_string(dir.path().join("test.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(leaked.lines().next().unwrap()).unwrap();
    kb.push_str(
        &serde_json::json!({"id": "leak", "source_ja": first["source_ja"], "target_zh": first["target_zh"]})
            .to_string(),
    );
    kb.push('\n');
    std::fs::write(dir.path().join("kb.jsonl"), kb).unwrap();

    let out = ragmt(dir.path(), &["--kb", "kb.jsonl", "--test", "test.jsonl", "check"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("leak"));

    let out = ragmt(
        dir.path(),
        &[
            "--kb",
            "kb.jsonl",
            "--test",
            "test.jsonl",
            "--out",
            "o",
            "sweep",
            "--sizes",
            "0,10",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("o/report.json").exists());
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ragmt(dir.path(), &["--no-such-flag", "check"]).status.code(), Some(2));
    assert_eq!(ragmt(dir.path(), &["sweep"]).status.code(), Some(2));
    assert_eq!(ragmt(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_override_exits_1() {
    let dir = fixture();
    let out = ragmt(
        dir.path(),
        &[
            "--kb",
            "kb.jsonl",
            "--test",
            "test.jsonl",
            "--set",
            "pipeline.retriever.k=0",
            "--out",
            "o",
            "sweep",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ingest_reports_removals_and_writes_clean_corpus() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("raw.tsv"),
        "a\t本を読む学生\t看书的学生\nb\t本を読む学生\t看书的学生\nc\t走る犬\t奔跑的狗\n",
    )
    .unwrap();
    let out = ragmt(dir.path(), &["--out", "clean.jsonl", "ingest", "raw.tsv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(summary["loaded"], 3);
    assert_eq!(summary["kept"], 2);
    assert_eq!(summary["removed"], serde_json::json!(["b"]));

    let again = ragmt(dir.path(), &["ingest", "clean.jsonl"]);
    let summary: serde_json::Value = serde_json::from_str(&stdout(&again)).unwrap();
    assert_eq!(summary["removed"], serde_json::json!([]));
}

#[test]
fn retrieve_from_snapshot_matches_fresh_index() {
    let dir = fixture();
    let built = ragmt(dir.path(), &["--kb", "kb.jsonl", "--out", "kb.idx", "index"]);
    assert!(built.status.success(), "{}", String::from_utf8_lossy(&built.stderr));
    let fresh = ragmt(dir.path(), &["--kb", "kb.jsonl", "retrieve", "あいうえおかき"]);
    let snap = ragmt(
        dir.path(),
        &["--kb", "kb.jsonl", "retrieve", "あいうえおかき", "--index", "kb.idx"],
    );
    let hits = |o: &Output| serde_json::from_str::<serde_json::Value>(&stdout(o)).unwrap()["hits"].clone();
    assert_eq!(hits(&fresh).as_array().unwrap().len(), 5);
    let ids = |v: serde_json::Value| {
        v.as_array()
            .unwrap()
            .iter()
            .map(|h| h["pair_id"].clone())
            .collect::<Vec<_>>()
    };
    assert_eq!(ids(hits(&fresh)), ids(hits(&snap)));
}

#[test]
fn translate_without_retrieval_uses_no_examples() {
    let dir = fixture();
    let out = ragmt(
        dir.path(),
        &["--kb", "kb.jsonl", "translate", "本を読む学生が笑った。", "--size", "0"],
    );
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["hits"], serde_json::json!([]));
    assert!(v["output_zh"].is_string());
}

#[test]
fn archived_session_candidates_ingest_cleanly() {
    use ragmt_service::workflow::{ComposeRequest, GenerateRequest, PostEditRequest, SelectRequest};

    let dir = fixture();
    let kb = ragmt::corpus::load_pairs(
        &dir.path().join("kb.jsonl"),
        ragmt::corpus::CorpusFormat::Jsonl,
        ragmt::corpus::CorpusRole::KnowledgeBase,
    )
    .unwrap();
    let engine = ragmt::harness::Engine::from_config(
        ragmt::config::PipelineConfig::default(),
        std::sync::Arc::new(ragmt::retrieval::EmbeddingCache::in_memory()),
    )
    .unwrap();
    let kb = engine.knowledge_base(kb).unwrap();
    let store = ragmt_service::SessionStore::open(&dir.path().join("sessions")).unwrap();
    let wb = ragmt_service::Workbench::new(store, engine, Some(kb));

    let mut ids = Vec::new();
    for (sl, edit) in [
        ("本を読んでいる学生が笑った。", "正在看书的学生笑了。"),
        ("走る犬を見た。", "看到了奔跑的狗。"),
    ] {
        let id = wb.create(sl).unwrap().session_id;
        wb.analyze(&id).unwrap();
        wb.retrieve(&id).unwrap();
        for rank in 1..=5 {
            let req = SelectRequest {
                selected: rank != 2,
                justification: format!("checked {rank}"),
            };
            wb.select(&id, rank, req).unwrap();
        }
        wb.compose(&id, ComposeRequest::default()).unwrap();
        wb.generate(&id, GenerateRequest::default()).unwrap();
        wb.post_edit(
            &id,
            PostEditRequest {
                text: edit.into(),
                note: String::new(),
            },
        )
        .unwrap();
        wb.archive(&id).unwrap();
        ids.push(id);
    }
    let mut out = Vec::new();
    wb.kb_candidates(&ids).unwrap().write_jsonl(&mut out).unwrap();
    std::fs::write(dir.path().join("candidates.jsonl"), out).unwrap();

    let run = ragmt(dir.path(), &["ingest", "candidates.jsonl"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&run)).unwrap();
    assert_eq!(summary["loaded"], 2);
    assert_eq!(summary["removed"], serde_json::json!([]));
}
