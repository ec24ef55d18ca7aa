//! Analytic gradients against central finite differences on a small model
//! with a live memory span, plus the structural gradient guarantees:
//! detached spans contribute nothing, frozen weights never accumulate,
//! rotary attention sees only relative offsets, and the causal mask holds.

use icae_core::agentic::{
    assemble_context, context_to_batch, select_compression_steps, CompressionPolicy, Role, SpanCache,
    Trajectory,
};
use icae_core::data::Tokenizer;
use icae_core::graph::Graph;
use icae_core::icae::{self, Objective, PretrainSample};
use icae_core::kernels;
use icae_core::model::{self, LoraAdapter, ModelConfig, ParamStore, SequenceBatch};
use icae_core::rng::seed_stream;
use icae_core::vocab;

fn tiny_rig(seed: u64) -> (ParamStore, ModelConfig, LoraAdapter) {
    let cfg = ModelConfig::test_tiny(2, 16, 264);
    let lora = LoraAdapter { rank: 2, alpha: 4.0 };
    let mut rng = seed_stream(seed, "test.init");
    let mut store = model::init_base(&cfg, &mut rng).unwrap();
    model::init_encoder(&mut store, &cfg, &lora, 8, &mut rng).unwrap();
    model::freeze_decoder(&mut store);
    (store, cfg, lora)
}

fn sample_ae() -> PretrainSample {
    let input: Vec<u32> = b"grad check".iter().map(|&b| b as u32).collect();
    PretrainSample { target: input.clone(), input, objective: Objective::Ae }
}

fn loss_value(store: &ParamStore, cfg: &ModelConfig, lora: &LoraAdapter, sample: &PretrainSample) -> f64 {
    let mut g = Graph::new();
    let loss = icae::pretrain_loss(&mut g, store, cfg, lora, sample, 4).unwrap();
    g.scalar_value(loss)
}

/// Central differences over every element of every trainable tensor.
fn fd_check(sample: &PretrainSample) -> (f64, usize) {
    let (mut store, cfg, lora) = tiny_rig(41);
    let mut g = Graph::new();
    let loss = icae::pretrain_loss(&mut g, &store, &cfg, &lora, sample, 4).unwrap();
    let grads = g.backward(loss).unwrap();

    let names: Vec<String> = store
        .names()
        .filter(|n| !store.is_frozen(n))
        .map(str::to_owned)
        .collect();
    assert!(!names.is_empty());
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for name in &names {
        let analytic = grads.by_name.get(name).cloned().unwrap_or_else(|| {
            vec![0.0; store.get(name).unwrap().numel()]
        });
        for i in 0..analytic.len() {
            let w0 = store.get(name).unwrap().data[i];
            store.get_mut(name).unwrap().data[i] = w0 + h;
            let up = loss_value(&store, &cfg, &lora, sample);
            store.get_mut(name).unwrap().data[i] = w0 - h;
            let down = loss_value(&store, &cfg, &lora, sample);
            store.get_mut(name).unwrap().data[i] = w0;
            let fd = (up - down) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-8);
            let rel = (analytic[i] - fd).abs() / denom;
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked)
}

#[test]
fn autoencoding_gradients_match_finite_differences() {
    let (worst, checked) = fd_check(&sample_ae());
    assert!(checked > 200, "only {checked} gradient entries checked");
    assert!(worst < 1e-4, "worst relative error {worst:.3e}");
}

#[test]
fn continuation_gradients_match_finite_differences() {
    let input: Vec<u32> = b"one two three".iter().map(|&b| b as u32).collect();
    let target: Vec<u32> = b" four".iter().map(|&b| b as u32).collect();
    let sample = PretrainSample { input, target, objective: Objective::Lm };
    let (worst, checked) = fd_check(&sample);
    assert!(checked > 200);
    assert!(worst < 1e-4, "worst relative error {worst:.3e}");
}

#[test]
fn qa_gradients_match_finite_differences() {
    let (mut store, cfg, lora) = tiny_rig(43);
    let context: Vec<u32> = b"the pin is 7".iter().map(|&b| b as u32).collect();
    let question: Vec<u32> = b"pin?".iter().map(|&b| b as u32).collect();
    let answer: Vec<u32> = b"7".iter().map(|&b| b as u32).collect();

    let qa_value = |store: &ParamStore| {
        let mut g = Graph::new();
        let loss = icae::qa_loss(&mut g, store, &cfg, &lora, &context, &question, &answer, 4).unwrap();
        g.scalar_value(loss)
    };
    let mut g = Graph::new();
    let loss = icae::qa_loss(&mut g, &store, &cfg, &lora, &context, &question, &answer, 4).unwrap();
    let grads = g.backward(loss).unwrap();

    let h = 1e-5;
    let mut worst = 0.0f64;
    let names: Vec<String> =
        store.names().filter(|n| !store.is_frozen(n)).map(str::to_owned).collect();
    for name in &names {
        let analytic = grads.by_name.get(name).cloned().unwrap_or_else(|| {
            vec![0.0; store.get(name).unwrap().numel()]
        });
        for i in 0..analytic.len() {
            let w0 = store.get(name).unwrap().data[i];
            store.get_mut(name).unwrap().data[i] = w0 + h;
            let up = qa_value(&store);
            store.get_mut(name).unwrap().data[i] = w0 - h;
            let down = qa_value(&store);
            store.get_mut(name).unwrap().data[i] = w0;
            let fd = (up - down) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-8);
            worst = worst.max((analytic[i] - fd).abs() / denom);
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst:.3e}");
}

#[test]
fn only_adapter_and_queries_receive_gradients() {
    let (store, cfg, lora) = tiny_rig(44);
    let mut g = Graph::new();
    let loss = icae::pretrain_loss(&mut g, &store, &cfg, &lora, &sample_ae(), 4).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(!grads.by_name.is_empty());
    for name in grads.by_name.keys() {
        assert!(name.starts_with("encoder."), "unexpected gradient for {name}");
    }
    // every trainable tensor shows up
    for name in store.names().filter(|n| !store.is_frozen(n)) {
        assert!(grads.by_name.contains_key(name), "missing gradient for {name}");
    }
}

/// Trajectory with three compressed observations: the two cached spans are
/// detached leaves that receive no gradient buffer at all, while encoder
/// parameters get a nonzero gradient through the single live span.
#[test]
fn cached_spans_are_gradient_dead() {
    let (store, cfg, lora) = tiny_rig(45);
    let tok = Tokenizer::byte_level();
    let mut traj = Trajectory::new("grad-mask", 0);
    traj.push(Role::System, "sys".into(), &tok);
    for i in 0..3 {
        traj.push(Role::Action, format!("$ look {i}"), &tok);
        traj.push(Role::Observation, format!("window {i} ").repeat(3), &tok);
    }
    traj.push(Role::Action, "$ submit".into(), &tok);
    let k = 7; // the final action
    let policy = CompressionPolicy::LengthThreshold { tau: 8 };
    let chosen = select_compression_steps(&traj, &policy, k);
    assert_eq!(chosen.len(), 3, "all three observations compress");

    let mut cache = SpanCache::new();
    for &idx in &chosen {
        if idx != k - 1 {
            cache.ensure(&tok, &store, &cfg, &lora, &traj, idx, 4).unwrap();
        }
    }
    let ctx = assemble_context(&tok, &traj, &chosen, &cache, k, 4, cfg.max_positions).unwrap();
    assert_eq!(ctx.grad_live, Some(k - 1));

    let mut g = Graph::new();
    let action_ids = tok.encode(&traj.steps[k].text);
    let mut suffix = vec![vocab::ACT];
    suffix.extend_from_slice(&action_ids);
    let build =
        context_to_batch(Some(&mut g), &tok, &store, &cfg, &lora, &traj, &ctx, &cache, 4, &suffix)
            .unwrap();
    let out = model::forward(&mut g, &store, &cfg, None, &build.batch, true).unwrap();
    let t = build.batch.len();
    let mut targets = vec![0usize; t];
    let mut mask = vec![false; t];
    for (i, &tokid) in action_ids.iter().enumerate() {
        targets[build.suffix_at + i] = tokid as usize;
        mask[build.suffix_at + i] = true;
    }
    targets[build.suffix_at + action_ids.len()] = vocab::EOS as usize;
    mask[build.suffix_at + action_ids.len()] = true;
    let loss = g.cross_entropy(out.logits.unwrap(), &targets, &mask).unwrap();
    let grads = g.backward(loss).unwrap();

    // nondegenerate: encoder parameters carry nonzero gradient via the live span
    let query_grad = grads.by_name.get("encoder.memory_queries").expect("live span gradient");
    assert!(query_grad.iter().any(|&v| v != 0.0));
    for name in grads.by_name.keys() {
        assert!(name.starts_with("encoder."));
    }

    // with the last observation also cached, no gradient path remains
    let mut cache_all = SpanCache::new();
    for &idx in &chosen {
        cache_all.ensure(&tok, &store, &cfg, &lora, &traj, idx, 4).unwrap();
    }
    let ctx_dead = assemble_context(&tok, &traj, &chosen, &cache_all, k, 4, cfg.max_positions)
        .unwrap();
    let ctx_dead = icae_core::agentic::AssembledContext { grad_live: None, ..ctx_dead };
    let mut g2 = Graph::new();
    let build2 =
        context_to_batch(Some(&mut g2), &tok, &store, &cfg, &lora, &traj, &ctx_dead, &cache_all, 4, &suffix)
            .unwrap();
    let out2 = model::forward(&mut g2, &store, &cfg, None, &build2.batch, true).unwrap();
    let loss2 = g2.cross_entropy(out2.logits.unwrap(), &targets, &mask).unwrap();
    let grads2 = g2.backward(loss2).unwrap();
    assert!(grads2.by_name.is_empty(), "cached-only context must yield no gradients");
}

#[test]
fn rotary_scores_depend_only_on_relative_offset() {
    let d = 8;
    let q0: Vec<f64> = (0..d).map(|i| 0.3 + 0.1 * i as f64).collect();
    let k0: Vec<f64> = (0..d).map(|i| -0.2 + 0.07 * i as f64).collect();
    let theta = 10000.0;
    let delta = 5usize;
    let mut reference = None;
    for base in [0usize, 3, 17, 100] {
        let mut q = q0.clone();
        let mut k = k0.clone();
        kernels::rope_row(&mut q, base + delta, theta);
        kernels::rope_row(&mut k, base, theta);
        let score = kernels::dot(&q, &k);
        match reference {
            None => reference = Some(score),
            Some(r) => assert!((score - r).abs() < 1e-10, "base {base}: {score} vs {r}"),
        }
    }
}

#[test]
fn logits_ignore_future_tokens() {
    let (store, cfg, _) = tiny_rig(46);
    let prefix: Vec<u32> = b"abcdef".iter().map(|&b| b as u32).collect();
    let mut long = prefix.clone();
    long.extend_from_slice(&[b'x' as u32, b'y' as u32, b'z' as u32]);

    let run = |ids: &[u32]| {
        let mut g = Graph::new();
        let batch = SequenceBatch::discrete(ids.to_vec(), (0..ids.len()).collect());
        let out = model::forward(&mut g, &store, &cfg, None, &batch, true).unwrap();
        g.value(out.logits.unwrap()).to_vec()
    };
    let a = run(&prefix);
    let b = run(&long);
    let v = cfg.vocab_size;
    for i in 0..prefix.len() {
        for j in 0..v {
            assert_eq!(a[i * v + j].to_bits(), b[i * v + j].to_bits(), "row {i} col {j}");
        }
    }
}

/// A freshly initialized adapter has zero B matrices; attaching it must not
/// change a single output bit relative to the adapter-free decoder.
#[test]
fn zero_initialized_adapter_is_bitwise_invisible() {
    let (store, cfg, lora) = tiny_rig(47);
    let ids: Vec<u32> = b"silent adapter".iter().map(|&b| b as u32).collect();
    let batch = SequenceBatch::discrete(ids.clone(), (0..ids.len()).collect());

    let mut g1 = Graph::new();
    let plain = model::forward(&mut g1, &store, &cfg, None, &batch, true).unwrap();
    let mut g2 = Graph::new();
    let adapted = model::forward(&mut g2, &store, &cfg, Some(&lora), &batch, true).unwrap();
    let a = g1.value(plain.logits.unwrap());
    let b = g2.value(adapted.logits.unwrap());
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}
