//! End-to-end training behavior on small models: losses fall, the frozen
//! base never moves, cached generation matches full re-forwarding bit for
//! bit, and a single span can be memorized to perfect reconstruction.

use icae_core::agentic::{CompressionPolicy, Role, SpanCache, Trajectory};
use icae_core::data::Tokenizer;
use icae_core::graph::Graph;
use icae_core::icae::{self, slots_for, Objective, PretrainSample, TaskToken};
use icae_core::model::{self, LoraAdapter, ModelConfig, ParamStore, SequenceBatch, SoftBlock, SoftSrc};
use icae_core::optim::{AdamW, AdamWConfig};
use icae_core::rng::seed_stream;
use icae_core::vocab;

fn rig(seed: u64, d_model: usize) -> (ParamStore, ModelConfig, LoraAdapter) {
    let cfg = ModelConfig::test_tiny(2, d_model, 264);
    let lora = LoraAdapter { rank: 4, alpha: 8.0 };
    let mut rng = seed_stream(seed, "test.init");
    let mut store = model::init_base(&cfg, &mut rng).unwrap();
    model::init_encoder(&mut store, &cfg, &lora, 16, &mut rng).unwrap();
    model::freeze_decoder(&mut store);
    (store, cfg, lora)
}

/// Encoder training only works against a base that already models text, so
/// these rigs overfit a small corpus before freezing the decoder.
fn pretrained_rig(seed: u64, d_model: usize, text: &str) -> (ParamStore, ModelConfig, LoraAdapter) {
    let cfg = ModelConfig::test_tiny(2, d_model, 264);
    let lora = LoraAdapter { rank: 4, alpha: 8.0 };
    let mut rng = seed_stream(seed, "test.init");
    let mut store = model::init_base(&cfg, &mut rng).unwrap();
    let corpus = bytes(&text.repeat(30));
    let mut o = opt(3e-3);
    model::pretrain_base(&mut store, &cfg, &corpus, 32, 300, &mut o, &mut rng).unwrap();
    model::init_encoder(&mut store, &cfg, &lora, 16, &mut rng).unwrap();
    model::freeze_decoder(&mut store);
    (store, cfg, lora)
}

fn opt(lr: f64) -> AdamW {
    AdamW::new(AdamWConfig { lr, warmup_steps: 10, ..AdamWConfig::default() })
}

fn bytes(s: &str) -> Vec<u32> {
    s.bytes().map(u32::from).collect()
}

#[test]
fn autoencoding_loss_descends() {
    let (mut store, cfg, lora) =
        pretrained_rig(1, 32, "the filter drains the upper basin before dawn. ");
    let input = bytes("the filter drains the upper basin");
    let sample = PretrainSample { target: input.clone(), input, objective: Objective::Ae };
    let mut o = opt(1e-2);
    let mut losses = Vec::new();
    for _ in 0..150 {
        losses.push(icae::pretrain_step(&mut store, &cfg, &lora, &sample, 4, &mut o).unwrap());
    }
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[145..].iter().sum::<f64>() / 5.0;
    assert!(tail < head * 0.7, "no descent: {head:.4} -> {tail:.4}");
}

/// Teacher-forced reconstruction accuracy under the AE layout.
fn ae_accuracy(
    store: &ParamStore,
    cfg: &ModelConfig,
    lora: &LoraAdapter,
    input: &[u32],
    rho: usize,
) -> f64 {
    let span = icae::compress(
        store,
        cfg,
        lora,
        input,
        rho,
        icae_core::icae::Provenance::DocumentChunk { document: "acc".into(), chunk: 0 },
    )
    .unwrap();
    let m = span.m;
    let mut ids: Vec<u32> = std::iter::repeat(vocab::MEM_SENTINEL).take(m).collect();
    ids.push(TaskToken::Ae.id());
    ids.extend_from_slice(input);
    let t = ids.len();
    let batch = SequenceBatch {
        token_ids: ids,
        soft: vec![SoftBlock { start: 0, rows: m, src: SoftSrc::Data(span.vectors.clone()) }],
        position_ids: (0..t).collect(),
    };
    let mut g = Graph::new();
    let out = model::forward(&mut g, store, cfg, None, &batch, true).unwrap();
    let logits = g.value(out.logits.unwrap());
    let v = cfg.vocab_size;
    let mut want: Vec<u32> = input.to_vec();
    want.push(vocab::END_RECON);
    let mut hit = 0usize;
    for (i, &target) in want.iter().enumerate() {
        let row = &logits[(m + i) * v..(m + i + 1) * v];
        if model::argmax(row) == target {
            hit += 1;
        }
    }
    hit as f64 / want.len() as f64
}

#[test]
fn single_span_memorizes_to_exact_reconstruction() {
    let (mut store, cfg, lora) =
        pretrained_rig(2, 32, "relay four holds the key to the upper basin and the filter drains it. ");
    let input = bytes("relay four");
    let sample = PretrainSample { target: input.clone(), input: input.clone(), objective: Objective::Ae };
    let mut o = opt(1e-2);
    let mut reached = false;
    for step in 0..4000 {
        icae::pretrain_step(&mut store, &cfg, &lora, &sample, 2, &mut o).unwrap();
        if step % 50 == 49 && ae_accuracy(&store, &cfg, &lora, &input, 2) == 1.0 {
            reached = true;
            break;
        }
    }
    assert!(reached, "teacher-forced accuracy never hit 1.0");

    // free-running greedy decode reproduces the source and stops
    let span = icae::compress(
        &store,
        &cfg,
        &lora,
        &input,
        2,
        icae_core::icae::Provenance::DocumentChunk { document: "mem".into(), chunk: 0 },
    )
    .unwrap();
    let out = icae::decode_with_memory(
        &store,
        &cfg,
        &[&span],
        TaskToken::Ae,
        &[],
        input.len() + 4,
        Some(vocab::END_RECON),
    )
    .unwrap();
    let body: Vec<u32> = out.iter().copied().take_while(|&t| t != vocab::END_RECON).collect();
    assert_eq!(body, input);
}

#[test]
fn frozen_base_checksum_survives_training() {
    let (mut store, cfg, lora) = rig(3, 16);
    let tok = Tokenizer::byte_level();
    let before = store.checksum("decoder.");
    let encoder_before = store.checksum("encoder.");

    let input = bytes("alpha beta gamma delta");
    let sample = PretrainSample { target: input.clone(), input, objective: Objective::Ae };
    let mut o = opt(1e-3);
    for _ in 0..25 {
        icae::pretrain_step(&mut store, &cfg, &lora, &sample, 4, &mut o).unwrap();
    }

    let mut traj = Trajectory::new("freeze", 0);
    traj.push(Role::System, "sys".into(), &tok);
    for i in 0..4 {
        traj.push(Role::Action, format!("$ look {i}"), &tok);
        traj.push(Role::Observation, "status nominal across the array ".repeat(2), &tok);
    }
    traj.push(Role::Action, "$ submit".into(), &tok);
    let mut cache = SpanCache::new();
    let policy = CompressionPolicy::LengthThreshold { tau: 16 };
    for k in [3usize, 5, 7, 9] {
        icae_core::agentic::train_step_agentic(
            &mut store, &cfg, &lora, &tok, &traj, &policy, k, 4, &mut cache, &mut o,
        )
        .unwrap();
    }
    assert_eq!(store.checksum("decoder."), before);
    // and the encoder did move
    assert!(store.checksum("encoder.") != encoder_before);
}

#[test]
fn cached_generation_matches_full_reforward() {
    let (store, cfg, lora) = rig(4, 32);
    let prompt = bytes("cold open");
    let batch = SequenceBatch::discrete(prompt.clone(), (0..prompt.len()).collect());
    let rows = model::embed_rows(&store, &cfg, &batch).unwrap();
    let fast = model::generate_greedy(&store, &cfg, None, &rows, &batch.position_ids, 24, None).unwrap();
    let slow =
        model::generate_greedy_reforward(&store, &cfg, None, &rows, &batch.position_ids, 24, None)
            .unwrap();
    assert_eq!(fast, slow);

    // same equivalence through the adapter path on a mixed soft context
    let span = icae::compress(
        &store,
        &cfg,
        &lora,
        &bytes("soft prefix content"),
        4,
        icae_core::icae::Provenance::DocumentChunk { document: "kv".into(), chunk: 0 },
    )
    .unwrap();
    let mut ids: Vec<u32> = std::iter::repeat(vocab::MEM_SENTINEL).take(span.m).collect();
    ids.push(TaskToken::Lm.id());
    let t = ids.len();
    let soft_batch = SequenceBatch {
        token_ids: ids,
        soft: vec![SoftBlock { start: 0, rows: span.m, src: SoftSrc::Data(span.vectors.clone()) }],
        position_ids: (0..t).collect(),
    };
    let soft_rows = model::embed_rows(&store, &cfg, &soft_batch).unwrap();
    let fast2 =
        model::generate_greedy(&store, &cfg, None, &soft_rows, &soft_batch.position_ids, 16, None)
            .unwrap();
    let slow2 = model::generate_greedy_reforward(
        &store,
        &cfg,
        None,
        &soft_rows,
        &soft_batch.position_ids,
        16,
        None,
    )
    .unwrap();
    assert_eq!(fast2, slow2);
}

#[test]
fn cached_prefill_logits_equal_graph_logits() {
    let (store, cfg, _) = rig(5, 32);
    let ids = bytes("parity check line");
    let batch = SequenceBatch::discrete(ids.clone(), (0..ids.len()).collect());

    let mut g = Graph::new();
    let out = model::forward(&mut g, &store, &cfg, None, &batch, true).unwrap();
    let graph_logits = g.value(out.logits.unwrap()).to_vec();

    let rows = model::embed_rows(&store, &cfg, &batch).unwrap();
    let (_, pre) = model::prefill(&store, &cfg, None, &rows, &batch.position_ids).unwrap();
    assert_eq!(graph_logits.len(), pre.logits.len());
    for (a, b) in graph_logits.iter().zip(&pre.logits) {
        assert_eq!(a, b, "graph vs cached prefill logits diverge");
    }
}

#[test]
fn base_pretraining_runs_and_descends() {
    let cfg = ModelConfig::test_tiny(2, 32, 264);
    let mut rng = seed_stream(9, "test.base-pretrain");
    let mut store = model::init_base(&cfg, &mut rng).unwrap();
    let corpus: Vec<u32> = bytes(&"the relay feeds the switchyard and the beacon lights the span. ".repeat(40));
    let mut o = opt(1e-3);
    let losses = model::pretrain_base(&mut store, &cfg, &corpus, 32, 60, &mut o, &mut rng).unwrap();
    assert_eq!(losses.len(), 60);
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[50..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "base LM loss did not fall: {head:.4} -> {tail:.4}");
    assert!(losses.iter().all(|l| l.is_finite()));
}

#[test]
fn qa_training_reduces_loss_and_answers_memorized_pair() {
    let (mut store, cfg, lora) =
        pretrained_rig(6, 32, "the valve code is mk7 and the crew checks it daily. code? mk7. ");
    let context = bytes("the valve code is mk7");
    let question = bytes("code?");
    let answer = bytes("mk7");
    let mut o = opt(1e-2);
    let mut last = f64::INFINITY;
    for step in 0..2500 {
        last = icae::qa_step(&mut store, &cfg, &lora, &context, &question, &answer, 4, &mut o).unwrap();
        if step % 50 == 49 {
            if let Ok(got) = icae::qa_answer(&store, &cfg, &lora, &context, &question, 4, 8) {
                if got == answer {
                    break;
                }
            }
        }
    }
    assert!(last.is_finite());
    let got = icae::qa_answer(&store, &cfg, &lora, &context, &question, 4, 8).unwrap();
    assert_eq!(got, answer, "memorized answer mismatch");
}

#[test]
fn span_slots_follow_ceiling_rule_in_training() {
    let (store, cfg, lora) = rig(7, 16);
    for n in [1usize, 3, 4, 5, 17, 64] {
        let tokens: Vec<u32> = (0..n as u32).map(|i| i % 250).collect();
        let span = icae::compress(
            &store,
            &cfg,
            &lora,
            &tokens,
            4,
            icae_core::icae::Provenance::DocumentChunk { document: "c".into(), chunk: 0 },
        )
        .unwrap();
        assert_eq!(span.m, slots_for(n, 4));
        assert_eq!(span.m, n.div_ceil(4));
    }
}
