//! File-format contracts: checkpoints, span caches, trajectory and task
//! JSONL, config text, and the frozen metric oracle fixtures.

use icae_core::agentic::{
    load_span_cache, load_trajectories, save_span_cache, save_trajectories, Role, SpanCache,
    Trajectory,
};
use icae_core::data::{
    load_checkpoint, load_qa_file, save_checkpoint, RunConfig, Tokenizer,
};
use icae_core::env::{load_task_records, save_task_records, TaskKind, TaskRecord};
use icae_core::icae::{MemorySpan, Provenance};
use icae_core::metrics::{bleu, p_two_sided, welch_t};
use icae_core::model::{self, LoraAdapter, ModelConfig};
use icae_core::rng::seed_stream;
use serde::Deserialize;
use std::path::Path;

fn fixture(name: &str) -> String {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("read {}: {e}", p.display()))
}

fn small_store() -> icae_core::model::ParamStore {
    let cfg = ModelConfig::test_tiny(2, 16, 264);
    let lora = LoraAdapter { rank: 2, alpha: 4.0 };
    let mut rng = seed_stream(3, "test.init");
    let mut store = model::init_base(&cfg, &mut rng).unwrap();
    model::init_encoder(&mut store, &cfg, &lora, 8, &mut rng).unwrap();
    model::freeze_decoder(&mut store);
    store
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let store = small_store();
    let mut first = Vec::new();
    save_checkpoint(&mut first, &store).unwrap();
    let loaded = load_checkpoint(&mut first.as_slice()).unwrap();
    let mut second = Vec::new();
    save_checkpoint(&mut second, &loaded).unwrap();
    assert_eq!(first, second);

    // values bitwise equal and the frozen set preserved
    for name in store.names() {
        let a = store.require(name).unwrap();
        let b = loaded.require(name).unwrap();
        assert_eq!(a.shape, b.shape);
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(store.is_frozen(name), loaded.is_frozen(name), "{name}");
    }
    assert_eq!(store.len(), loaded.len());
    assert!(loaded.is_frozen("decoder.embed"));
    assert!(!loaded.is_frozen("encoder.memory_queries"));
}

#[test]
fn checkpoint_rejects_any_single_byte_corruption() {
    let store = small_store();
    let mut bytes = Vec::new();
    save_checkpoint(&mut bytes, &store).unwrap();
    // probe positions across the file, including the checksum trailer
    let stride = (bytes.len() / 13).max(1);
    for at in (0..bytes.len()).step_by(stride) {
        let mut bad = bytes.clone();
        bad[at] ^= 0x40;
        let err = load_checkpoint(&mut bad.as_slice()).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("checksum") || msg.contains("magic"),
            "byte {at}: unexpected error {msg}"
        );
    }
}

#[test]
fn checkpoint_rejects_truncation() {
    let store = small_store();
    let mut bytes = Vec::new();
    save_checkpoint(&mut bytes, &store).unwrap();
    for keep in [0usize, 5, bytes.len() / 2, bytes.len() - 1] {
        assert!(load_checkpoint(&mut &bytes[..keep]).is_err(), "kept {keep} bytes");
    }
}

#[derive(Deserialize)]
struct BleuCase {
    name: String,
    candidate: Vec<String>,
    reference: Vec<String>,
    expected: f64,
}

#[test]
fn bleu_matches_oracle_fixtures() {
    let cases: Vec<BleuCase> = serde_json::from_str(&fixture("bleu_oracle.json")).unwrap();
    assert!(cases.len() >= 10, "only {} oracle cases", cases.len());
    for c in &cases {
        let got = bleu(&c.candidate, &c.reference);
        assert!(
            (got - c.expected).abs() < 1e-9,
            "{}: got {got}, oracle {}",
            c.name,
            c.expected
        );
    }
}

#[derive(Deserialize)]
struct WelchSample {
    name: String,
    a: Vec<f64>,
    b: Vec<f64>,
    t: f64,
    df: f64,
    p: f64,
}

#[derive(Deserialize)]
struct WelchGridRow {
    t: f64,
    df: f64,
    p: f64,
}

#[derive(Deserialize)]
struct WelchOracle {
    samples: Vec<WelchSample>,
    grid: Vec<WelchGridRow>,
}

#[test]
fn welch_matches_oracle_fixtures() {
    let oracle: WelchOracle = serde_json::from_str(&fixture("welch_oracle.json")).unwrap();
    for s in &oracle.samples {
        let (t, df, p) = welch_t(&s.a, &s.b).unwrap();
        assert!((t - s.t).abs() < 1e-9, "{}: t {t} vs {}", s.name, s.t);
        assert!((df - s.df).abs() < 1e-9, "{}: df {df} vs {}", s.name, s.df);
        assert!((p - s.p).abs() < 1e-6, "{}: p {p} vs {}", s.name, s.p);
    }
    // integer inputs keep the hand case exactly representable
    let hand = &oracle.samples[0];
    let (t, df, _) = welch_t(&hand.a, &hand.b).unwrap();
    assert_eq!(t, -1.0);
    assert_eq!(df, 8.0);
    for row in &oracle.grid {
        let p = p_two_sided(row.t, row.df);
        assert!((p - row.p).abs() < 1e-9, "grid t={} df={}: p {p} vs {}", row.t, row.df, row.p);
    }
}

fn sample_span(step: usize, n: usize, d: usize, fill: f64) -> MemorySpan {
    let m = n.div_ceil(4);
    MemorySpan {
        vectors: (0..m * d).map(|i| fill + i as f64 * 0.25).collect(),
        m,
        d_model: d,
        source_token_count: n,
        position_base: None,
        provenance: Provenance::TrajectoryStep { trajectory: "t-0".into(), step },
    }
}

#[test]
fn span_cache_file_round_trips_bit_exactly() {
    let mut cache = SpanCache::new();
    cache.insert(2, sample_span(2, 10, 8, 0.5));
    cache.insert(6, sample_span(6, 31, 8, -3.25));
    let mut first = Vec::new();
    save_span_cache(&mut first, "t-0", 4, 8, &cache).unwrap();
    let (id, rho, d, loaded) = load_span_cache(&mut first.as_slice()).unwrap();
    assert_eq!((id.as_str(), rho, d), ("t-0", 4, 8));
    assert_eq!(loaded.len(), 2);
    assert_eq!(loaded.checksum(), cache.checksum());
    for step in [2usize, 6] {
        let a = cache.get(step).unwrap();
        let b = loaded.get(step).unwrap();
        assert!(a.vectors.iter().zip(&b.vectors).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.source_token_count, b.source_token_count);
        assert_eq!(a.m, b.m);
    }
    let mut second = Vec::new();
    save_span_cache(&mut second, &id, rho, d, &loaded).unwrap();
    assert_eq!(first, second);
}

#[test]
fn span_cache_rejects_corruption_and_header_mismatch() {
    let mut cache = SpanCache::new();
    cache.insert(1, sample_span(1, 7, 8, 1.0));
    let mut bytes = Vec::new();
    save_span_cache(&mut bytes, "t-1", 4, 8, &cache).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    assert!(load_span_cache(&mut bytes.as_slice()).is_err());

    // wrong declared width is refused at save time
    let mut sink = Vec::new();
    assert!(save_span_cache(&mut sink, "t-1", 4, 16, &cache).is_err());
    // wrong rho breaks the m = ceil(n / rho) relation
    let mut sink2 = Vec::new();
    assert!(save_span_cache(&mut sink2, "t-1", 3, 8, &cache).is_err());
}

#[test]
fn trajectory_jsonl_round_trips_through_files() {
    let tok = Tokenizer::byte_level();
    let mut a = Trajectory::new("file-a", 11);
    a.push(Role::System, "fix the bug".into(), &tok);
    a.push(Role::Action, "$ cat notes.txt".into(), &tok);
    a.push(Role::Observation, "the note says: look in config".into(), &tok);
    a.push(Role::Action, "$ submit --payload \"done\"".into(), &tok);
    a.outcome = Some(icae_core::agentic::Outcome::Resolved);
    let mut b = Trajectory::new("file-b", 12);
    b.push(Role::System, "count the files".into(), &tok);
    b.push(Role::Action, "$ ls".into(), &tok);
    let trajs = vec![a, b];

    let mut first = Vec::new();
    save_trajectories(&mut first, &trajs).unwrap();
    let loaded = load_trajectories(std::str::from_utf8(&first).unwrap(), &tok).unwrap();
    assert_eq!(loaded.len(), 2);
    assert_eq!(loaded[0].steps[2].text, trajs[0].steps[2].text);
    assert_eq!(loaded[0].steps[2].token_len, trajs[0].steps[2].token_len);
    assert_eq!(loaded[0].outcome, trajs[0].outcome);
    let mut second = Vec::new();
    save_trajectories(&mut second, &loaded).unwrap();
    assert_eq!(first, second);
}

#[test]
fn task_records_round_trip_and_realize_deterministically() {
    let tok = Tokenizer::byte_level();
    let recs = vec![
        TaskRecord { kind: "keychain".into(), seed: 5, depth: Some(2), payload_len: Some(6), obs_pad: 120 },
        TaskRecord { kind: "secret_command".into(), seed: 9, depth: None, payload_len: None, obs_pad: 150 },
        TaskRecord { kind: "patch_fix".into(), seed: 13, depth: None, payload_len: None, obs_pad: 140 },
    ];
    let mut buf = Vec::new();
    save_task_records(&mut buf, &recs).unwrap();
    let loaded = load_task_records(std::str::from_utf8(&buf).unwrap()).unwrap();
    assert_eq!(loaded, recs);

    for r in &loaded {
        let kind = r.task_kind().unwrap();
        if let TaskKind::Keychain { depth, payload_len } = kind {
            assert_eq!((depth, payload_len), (2, 6));
        }
        let (fs1, spec1, expert1) = r.realize(&tok).unwrap();
        let (fs2, spec2, expert2) = r.realize(&tok).unwrap();
        assert_eq!(expert1, expert2);
        assert_eq!(spec1.issue_text, spec2.issue_text);
        assert_eq!(fs1, fs2);
    }
}

#[test]
fn qa_fixture_file_loads_and_validates() {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/qa_small.jsonl");
    let samples = load_qa_file(&p).unwrap();
    assert!(samples.len() >= 4);
    for s in &samples {
        assert!(!s.context.is_empty() && !s.question.is_empty() && !s.answer.is_empty());
    }
}

#[test]
fn config_render_parse_is_a_fixpoint() {
    let cfg = RunConfig::default();
    let text = cfg.render();
    let back = RunConfig::parse(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.content_hash(), cfg.content_hash());
    assert_eq!(back.render(), text);
}

#[test]
fn config_overrides_and_rejects_bad_values() {
    let cfg = RunConfig::parse("[policy]\nkind = last_k\nlast_k = 3\n[rollout]\nbudget = 900\n").unwrap();
    assert_eq!(cfg.policy.kind, "last_k");
    assert_eq!(cfg.policy.last_k, 3);
    assert_eq!(cfg.rollout.budget, 900);
    assert!(cfg.content_hash() != RunConfig::default().content_hash());

    assert!(RunConfig::parse("[policy]\nkind = sometimes\n").is_err());
    assert!(RunConfig::parse("[policy]\npct = 101\n").is_err());
    assert!(RunConfig::parse("nonsense line\n").is_err());
    assert!(RunConfig::parse("[mystery]\nknob = 1\n").is_err());
}
