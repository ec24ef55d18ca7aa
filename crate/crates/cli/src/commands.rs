//! Command implementations. Every command resolves its config, records a run
//! manifest, and writes its artifacts under --out. Reruns with identical
//! manifests reproduce checkpoints and CSVs byte for byte; only the manifest
//! timestamps differ.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use icae_core::agentic::{
    self, rollout, CompressionPolicy, ModelActor, Outcome, RolloutOptions, ScriptedActor,
    SpanCache, Trajectory,
};
use icae_core::data::{
    self, load_checkpoint_file, load_corpus_text, load_qa_file, save_checkpoint_file, PolicyConfig,
    RunConfig, Tokenizer,
};
use icae_core::env::{generate_task, hypothesis_sweep, sweep_csv, SimEnv, SweepConfig, TaskKind};
use icae_core::error::{Error, Result};
use icae_core::icae::{self, Objective, PretrainSample, TaskToken};
use icae_core::metrics::{
    bleu_ref, bleu_text, exact_match, metrics_csv, pass_at_bleu, stats_csv, trajectory_stats,
    welch_report, MetricRecord,
};
use icae_core::model::{self, ParamStore};
use icae_core::optim::{AdamW, AdamWConfig};
use icae_core::rng::{index_hash, seed_stream};
use icae_core::vocab;
use rand::Rng;

use crate::manifest::RunManifest;

// ---- shared plumbing ----

pub struct Common {
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
}

/// Policy flags; any that are set override the [policy] config section.
#[derive(Default)]
pub struct PolicyOverride {
    pub policy: Option<String>,
    pub tau: Option<usize>,
    pub k: Option<usize>,
    pub pct: Option<u32>,
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => {
            require_file(p, "config")?;
            RunConfig::parse_file(p)?
        }
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Missing input files are a configuration problem, not a runtime failure.
fn require_file(p: &Path, what: &str) -> Result<()> {
    if !p.is_file() {
        return Err(Error::Config(format!("{what} file not found: {}", p.display())));
    }
    Ok(())
}

fn resolve_policy(p: &PolicyConfig, seed: u64, over: &PolicyOverride) -> Result<CompressionPolicy> {
    let kind = over.policy.clone().unwrap_or_else(|| p.kind.clone());
    let out = match kind.as_str() {
        "none" => CompressionPolicy::None,
        "threshold" => CompressionPolicy::LengthThreshold { tau: over.tau.unwrap_or(p.tau) },
        "last_k" => CompressionPolicy::LastK { k: over.k.unwrap_or(p.last_k) },
        "random_pct" => CompressionPolicy::RandomPct {
            pct: over.pct.unwrap_or(p.pct),
            seed: index_hash(seed, "policy.random_pct", 0),
        },
        other => return Err(Error::Config(format!("unknown policy {other:?}"))),
    };
    out.validate()?;
    Ok(out)
}

/// The checkpoint must hold the model the config describes; a silent shape
/// drift would surface as a confusing forward error much later.
fn check_model_shape(store: &ParamStore, cfg: &RunConfig) -> Result<()> {
    let embed = store.require("decoder.embed")?;
    let want = vec![cfg.model.vocab_size, cfg.model.d_model];
    if embed.shape != want {
        return Err(Error::Config(format!(
            "checkpoint embed shape {:?} does not match config {:?}",
            embed.shape, want
        )));
    }
    Ok(())
}

fn opt_for(lr: f64, warmup: usize) -> AdamW {
    AdamW::new(AdamWConfig { lr, warmup_steps: warmup, ..AdamWConfig::default() })
}

fn add_grads(acc: &mut BTreeMap<String, Vec<f64>>, g: BTreeMap<String, Vec<f64>>) -> Result<()> {
    for (k, v) in g {
        match acc.get_mut(&k) {
            None => {
                acc.insert(k, v);
            }
            Some(a) => {
                if a.len() != v.len() {
                    return Err(Error::Shape(format!("gradient length changed for {k}")));
                }
                for (x, y) in a.iter_mut().zip(&v) {
                    *x += y;
                }
            }
        }
    }
    Ok(())
}

fn scale_grads(acc: &mut BTreeMap<String, Vec<f64>>, s: f64) {
    for v in acc.values_mut() {
        for x in v.iter_mut() {
            *x *= s;
        }
    }
}

fn write_out(dir: &Path, name: &str, content: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), content)?;
    Ok(())
}

/// Deterministic cost proxy: total tokens the trajectory moved through the
/// model. Wall clocks would break byte-identical reruns.
fn cost_ms(traj: &Trajectory) -> u64 {
    traj.steps.iter().map(|s| s.token_len as u64).sum()
}

const TASK_KINDS: [&str; 3] = ["keychain", "secret_command", "patch_fix"];

/// Task grid row i: kinds cycle and keychain depth grows with each full
/// cycle, so any task count covers all kinds before deepening.
fn task_at(i: usize, depth_max: usize) -> TaskKind {
    match TASK_KINDS[i % 3] {
        "keychain" => TaskKind::Keychain { depth: 1 + (i / 3) % depth_max, payload_len: 8 },
        "secret_command" => TaskKind::SecretCommand,
        _ => TaskKind::PatchFix,
    }
}

fn task_label(kind: &TaskKind, i: usize) -> String {
    match kind {
        TaskKind::Keychain { depth, .. } => format!("keychain-d{depth}-{i}"),
        TaskKind::SecretCommand => format!("secret_command-{i}"),
        TaskKind::PatchFix => format!("patch_fix-{i}"),
    }
}

// ---- pretrain ----

pub fn cmd_pretrain(common: &Common) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    let corpus_path = PathBuf::from(&cfg.corpus_path);
    require_file(&corpus_path, "corpus")?;
    let manifest = RunManifest::start(
        &common.out,
        "pretrain",
        &cfg.render(),
        common.seed,
        &[&corpus_path],
    )?;

    let tok = Tokenizer::byte_level();
    let corpus = tok.encode(&load_corpus_text(&corpus_path)?);
    let need = cfg.base.window.max(cfg.pretrain.window) + 1;
    if corpus.len() < need {
        return Err(Error::Config(format!(
            "corpus of {} tokens is smaller than the largest window ({need})",
            corpus.len()
        )));
    }

    let mut rng = seed_stream(common.seed, "cli.init");
    let mut store = model::init_base(&cfg.model, &mut rng)?;
    let mut log = String::from("step,objective,loss\n");

    // Base LM first: the compression objectives cannot descend against a
    // randomly initialized frozen decoder.
    let mut opt = opt_for(cfg.base.lr, cfg.base.warmup);
    let mut brng = seed_stream(common.seed, "cli.base");
    let losses = model::pretrain_base(
        &mut store,
        &cfg.model,
        &corpus,
        cfg.base.window,
        cfg.base.steps,
        &mut opt,
        &mut brng,
    )?;
    for (i, l) in losses.iter().enumerate() {
        if i % cfg.base.log_every == 0 || i + 1 == losses.len() {
            log.push_str(&format!("{i},base,{l:.6}\n"));
        }
    }
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("base pretrain: {} steps, loss {first:.4} -> {last:.4}", losses.len());
    }

    // Compression pretraining: 50/50 reconstruction / continuation over
    // sampled windows, encoder trainable, decoder frozen.
    model::init_encoder(&mut store, &cfg.model, &cfg.lora, cfg.max_memory_slots, &mut rng)?;
    model::freeze_decoder(&mut store);
    let mut opt = opt_for(cfg.pretrain.lr, cfg.pretrain.warmup);
    let mut prng = seed_stream(common.seed, "cli.pretrain");
    let w = cfg.pretrain.window;
    let mut last_loss = f64::NAN;
    for step in 0..cfg.pretrain.steps {
        let objective = if prng.gen_bool(0.5) { Objective::Ae } else { Objective::Lm };
        let mut acc = BTreeMap::new();
        let mut loss_sum = 0.0;
        for _ in 0..cfg.pretrain.grad_accum {
            let at = prng.gen_range(0..=corpus.len() - w);
            let window = &corpus[at..at + w];
            let sample = match objective {
                Objective::Ae => PretrainSample {
                    input: window.to_vec(),
                    objective,
                    target: window.to_vec(),
                },
                Objective::Lm => PretrainSample {
                    input: window[..w / 2].to_vec(),
                    objective,
                    target: window[w / 2..].to_vec(),
                },
            };
            let mut g = icae_core::graph::Graph::new();
            let loss = icae::pretrain_loss(&mut g, &store, &cfg.model, &cfg.lora, &sample, cfg.rho)?;
            loss_sum += g.scalar_value(loss);
            add_grads(&mut acc, g.backward(loss)?.by_name)?;
        }
        scale_grads(&mut acc, 1.0 / cfg.pretrain.grad_accum as f64);
        opt.step(&mut store, &acc)?;
        last_loss = loss_sum / cfg.pretrain.grad_accum as f64;
        if step % cfg.pretrain.log_every == 0 || step + 1 == cfg.pretrain.steps {
            let name = match objective {
                Objective::Ae => "ae",
                Objective::Lm => "lm",
            };
            log.push_str(&format!("{step},{name},{last_loss:.6}\n"));
        }
    }
    println!("compression pretrain: {} steps, final loss {last_loss:.4}", cfg.pretrain.steps);

    let ckpt = common.out.join("model.ckpt");
    save_checkpoint_file(&ckpt, &store)?;
    write_out(&common.out, "losses.csv", &log)?;
    manifest.finish(&["model.ckpt", "losses.csv"])?;
    println!("checkpoint: {} ({:016x})", ckpt.display(), data::checkpoint_file_hash(&ckpt)?);
    Ok(())
}

// ---- finetune ----

pub enum FinetuneMode {
    Qa,
    Agentic,
}

pub fn cmd_finetune(
    common: &Common,
    mode: FinetuneMode,
    checkpoint: &Path,
    dataset: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    require_file(checkpoint, "checkpoint")?;
    let tok = Tokenizer::byte_level();
    let mut inputs: Vec<&Path> = vec![checkpoint];
    let qa_path = PathBuf::from(&cfg.qa_path);
    let mode_name = match mode {
        FinetuneMode::Qa => "qa",
        FinetuneMode::Agentic => "agentic",
    };
    if matches!(mode, FinetuneMode::Qa) {
        require_file(&qa_path, "qa")?;
        inputs.push(&qa_path);
    }
    if let Some(d) = dataset {
        require_file(d, "dataset")?;
        inputs.push(d);
    }
    let manifest = RunManifest::start(
        &common.out,
        &format!("finetune {mode_name}"),
        &cfg.render(),
        common.seed,
        &inputs,
    )?;

    let mut store = load_checkpoint_file(checkpoint)?;
    check_model_shape(&store, &cfg)?;
    let decoder_before = store.checksum("decoder.");
    let mut opt = opt_for(cfg.finetune.lr, cfg.finetune.warmup);
    let mut log = String::from("step,objective,loss\n");
    let mut last_loss = f64::NAN;

    match mode {
        FinetuneMode::Qa => {
            let samples = load_qa_file(&qa_path)?;
            let mut idx = 0usize;
            for step in 0..cfg.finetune.steps {
                let mut acc = BTreeMap::new();
                let mut loss_sum = 0.0;
                for _ in 0..cfg.finetune.grad_accum {
                    let s = &samples[idx % samples.len()];
                    idx += 1;
                    let mut g = icae_core::graph::Graph::new();
                    let loss = icae::qa_loss(
                        &mut g,
                        &store,
                        &cfg.model,
                        &cfg.lora,
                        &tok.encode(&s.context),
                        &tok.encode(&s.question),
                        &tok.encode(&s.answer),
                        cfg.rho,
                    )?;
                    loss_sum += g.scalar_value(loss);
                    add_grads(&mut acc, g.backward(loss)?.by_name)?;
                }
                scale_grads(&mut acc, 1.0 / cfg.finetune.grad_accum as f64);
                opt.step(&mut store, &acc)?;
                last_loss = loss_sum / cfg.finetune.grad_accum as f64;
                if step % cfg.finetune.log_every == 0 || step + 1 == cfg.finetune.steps {
                    log.push_str(&format!("{step},qa,{last_loss:.6}\n"));
                }
            }
        }
        FinetuneMode::Agentic => {
            let trajs: Vec<Trajectory> = match dataset {
                Some(d) => agentic::load_trajectories(&std::fs::read_to_string(d)?, &tok)?,
                None => {
                    let mut out = Vec::new();
                    for i in 0..cfg.eval.tasks {
                        let kind = task_at(i, cfg.eval.depth_max);
                        let seed = index_hash(common.seed, "cli.finetune.task", i as u64);
                        let (_, _, expert) = generate_task(&kind, seed, cfg.rollout.obs_pad, &tok)?;
                        out.push(expert);
                    }
                    out
                }
            };
            let total_actions: usize = trajs.iter().map(|t| t.actions().count()).sum();
            if total_actions == 0 {
                return Err(Error::Config("dataset holds no action steps to train on".into()));
            }
            let policy = resolve_policy(&cfg.policy, common.seed, &PolicyOverride::default())?;
            let mut step = 0usize;
            'train: loop {
                for traj in &trajs {
                    // spans persist across this trajectory's steps and are
                    // rebuilt fresh on the next visit
                    let mut cache = SpanCache::new();
                    let ks: Vec<usize> = traj.actions().map(|s| s.index).collect();
                    for k in ks {
                        if step >= cfg.finetune.steps {
                            break 'train;
                        }
                        let (loss, _had) = agentic::train_step_agentic(
                            &mut store,
                            &cfg.model,
                            &cfg.lora,
                            &tok,
                            traj,
                            &policy,
                            k,
                            cfg.rho,
                            &mut cache,
                            &mut opt,
                        )?;
                        last_loss = loss;
                        if step % cfg.finetune.log_every == 0 || step + 1 == cfg.finetune.steps {
                            log.push_str(&format!("{step},agentic,{loss:.6}\n"));
                        }
                        step += 1;
                    }
                }
            }
        }
    }

    if store.checksum("decoder.") != decoder_before {
        return Err(Error::Checkpoint("frozen decoder moved during fine-tuning".into()));
    }
    println!("finetune {mode_name}: {} steps, final loss {last_loss:.4}", cfg.finetune.steps);

    let ckpt = common.out.join("model.ckpt");
    save_checkpoint_file(&ckpt, &store)?;
    write_out(&common.out, "losses.csv", &log)?;
    manifest.finish(&["model.ckpt", "losses.csv"])?;
    println!("checkpoint: {} ({:016x})", ckpt.display(), data::checkpoint_file_hash(&ckpt)?);
    Ok(())
}

// ---- eval ----

pub enum EvalSuite {
    Qa,
    Rollout,
    Sweep,
}

pub fn cmd_eval(
    common: &Common,
    suite: EvalSuite,
    checkpoint: Option<&Path>,
    runs_override: Option<usize>,
    over: &PolicyOverride,
) -> Result<()> {
    match suite {
        EvalSuite::Qa => eval_qa(common, checkpoint),
        EvalSuite::Rollout => eval_rollout(common, checkpoint, runs_override, over),
        EvalSuite::Sweep => cmd_sweep(common, checkpoint, runs_override, over),
    }
}

fn eval_qa(common: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    let ckpt = checkpoint.ok_or_else(|| Error::Config("eval qa needs --checkpoint".into()))?;
    require_file(ckpt, "checkpoint")?;
    let qa_path = PathBuf::from(&cfg.qa_path);
    require_file(&qa_path, "qa")?;
    let manifest = RunManifest::start(
        &common.out,
        "eval qa",
        &cfg.render(),
        common.seed,
        &[ckpt, &qa_path],
    )?;

    let store = load_checkpoint_file(ckpt)?;
    check_model_shape(&store, &cfg)?;
    let tok = Tokenizer::byte_level();
    let samples = load_qa_file(&qa_path)?;
    let mut records = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let ctx = tok.encode(&s.context);
        let q = tok.encode(&s.question);
        let got = tok.decode_display(&icae::qa_answer(
            &store,
            &cfg.model,
            &cfg.lora,
            &ctx,
            &q,
            cfg.rho,
            cfg.rollout.max_new,
        )?);
        let em = exact_match(&got, &s.answer);
        let m = icae::slots_for(ctx.len(), cfg.rho);
        records.push(MetricRecord {
            run_id: "qa-0".into(),
            task_id: format!("qa-{i}"),
            bleu: bleu_text(&got, &s.answer),
            exact_match: em,
            pass_at: pass_at_bleu(&got, &s.answer, 0.8),
            resolved: em,
            steps: 1,
            eff_rate: ctx.len() as f64 / m as f64,
            wall_ms: (ctx.len() + q.len() + got.len()) as u64,
        });
    }
    for r in &records {
        r.validate()?;
    }
    let n = records.len() as f64;
    let mean_em = records.iter().map(|r| r.exact_match as f64).sum::<f64>() / n;
    let mean_bleu = records.iter().map(|r| r.bleu).sum::<f64>() / n;
    let summary = format!(
        "samples: {}\nexact_match: {mean_em:.4}\nbleu: {mean_bleu:.4}\n",
        records.len()
    );
    eprintln!("single checkpoint group; Welch comparison skipped");
    print!("{summary}");

    write_out(&common.out, "metrics.csv", &metrics_csv(&records))?;
    write_out(&common.out, "summary.txt", &summary)?;
    manifest.finish(&["metrics.csv", "summary.txt"])?;
    Ok(())
}

fn eval_rollout(
    common: &Common,
    checkpoint: Option<&Path>,
    runs_override: Option<usize>,
    over: &PolicyOverride,
) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    if let Some(c) = checkpoint {
        require_file(c, "checkpoint")?;
    }
    let inputs: Vec<&Path> = checkpoint.into_iter().collect();
    let manifest = RunManifest::start(
        &common.out,
        "eval rollout",
        &cfg.render(),
        common.seed,
        &inputs,
    )?;

    let tok = Tokenizer::byte_level();
    let store = load_store(checkpoint, &cfg, common.seed)?;
    let policy = resolve_policy(&cfg.policy, common.seed, over)?;
    let runs = runs_override.unwrap_or(cfg.eval.runs);
    let use_model = checkpoint.is_some();

    // Each task runs under the configured policy and under no compression,
    // so the policy's effect is a paired comparison.
    let mut records = Vec::new();
    let mut trajs = Vec::new();
    for r in 0..runs {
        for t in 0..cfg.eval.tasks {
            let kind = task_at(t, cfg.eval.depth_max);
            let task_seed = index_hash(common.seed, &format!("cli.eval.{r}"), t as u64);
            for (arm, pol) in [("policy", policy.clone()), ("none", CompressionPolicy::None)] {
                let (fs, spec, expert) = generate_task(&kind, task_seed, cfg.rollout.obs_pad, &tok)?;
                let mut env = SimEnv::new(fs, spec);
                let opts = RolloutOptions {
                    policy: pol.clone(),
                    rho: cfg.rho,
                    budget: cfg.rollout.budget,
                    max_new: cfg.rollout.max_new,
                    max_steps: 64,
                };
                let label = task_label(&kind, t);
                let traj = if use_model {
                    let mut actor = ModelActor { max_new: cfg.rollout.max_new };
                    rollout(&store, &cfg.model, &cfg.lora, &tok, &mut env, &mut actor, &opts, &label, task_seed)?
                } else {
                    let mut actor = ScriptedActor::new(
                        expert.actions().map(|s| s.text.clone()).collect(),
                    );
                    rollout(&store, &cfg.model, &cfg.lora, &tok, &mut env, &mut actor, &opts, &label, task_seed)?
                };
                records.push(MetricRecord {
                    run_id: format!("{arm}-r{r}"),
                    task_id: label,
                    bleu: bleu_ref(&traj, &expert).unwrap_or(0.0),
                    exact_match: 0,
                    pass_at: 0,
                    resolved: u8::from(traj.outcome == Some(Outcome::Resolved)),
                    steps: traj.actions().count(),
                    eff_rate: agentic::effective_compression_rate(&traj, &pol, cfg.rho)?,
                    wall_ms: cost_ms(&traj),
                });
                trajs.push(traj);
            }
        }
    }
    for rec in &records {
        rec.validate()?;
    }

    let mut traj_file = Vec::new();
    agentic::save_trajectories(&mut traj_file, &trajs)?;
    write_out(&common.out, "trajectories.jsonl", &String::from_utf8_lossy(&traj_file))?;
    write_out(&common.out, "metrics.csv", &metrics_csv(&records))?;
    write_out(&common.out, "stats.csv", &stats_csv(&trajectory_stats(&records)))?;

    let mut outputs = vec!["trajectories.jsonl", "metrics.csv", "stats.csv", "summary.txt"];
    let mut summary = String::new();
    let actor_name = if use_model { "model" } else { "scripted" };
    summary.push_str(&format!(
        "actor: {actor_name}\npolicy: {}\nruns: {runs}\ntasks per run: {}\n",
        policy.name(),
        cfg.eval.tasks
    ));
    for arm in ["policy", "none"] {
        let rs: Vec<&MetricRecord> =
            records.iter().filter(|r| r.run_id.starts_with(&format!("{arm}-"))).collect();
        let n = rs.len() as f64;
        summary.push_str(&format!(
            "{arm}: resolved {:.3}, mean steps {:.2}, mean eff_rate {:.3}\n",
            rs.iter().map(|r| r.resolved as f64).sum::<f64>() / n,
            rs.iter().map(|r| r.steps as f64).sum::<f64>() / n,
            rs.iter().map(|r| r.eff_rate).sum::<f64>() / n,
        ));
    }

    if runs < 2 {
        eprintln!("warning: fewer than 2 runs; Welch t-test skipped");
        summary.push_str("welch: skipped (fewer than 2 runs)\n");
    } else {
        // per-run means are the independent samples
        let means = |arm: &str, f: &dyn Fn(&MetricRecord) -> f64| -> Vec<f64> {
            (0..runs)
                .map(|r| {
                    let id = format!("{arm}-r{r}");
                    let xs: Vec<f64> =
                        records.iter().filter(|x| x.run_id == id).map(|x| f(x)).collect();
                    xs.iter().sum::<f64>() / xs.len() as f64
                })
                .collect()
        };
        let metrics: Vec<(&str, Vec<f64>, Vec<f64>)> = vec![
            ("steps", means("policy", &|r| r.steps as f64), means("none", &|r| r.steps as f64)),
            ("resolved", means("policy", &|r| r.resolved as f64), means("none", &|r| r.resolved as f64)),
            ("bleu", means("policy", &|r| r.bleu), means("none", &|r| r.bleu)),
        ];
        let (table, csv) = welch_report(policy.name(), "none", &metrics);
        print!("{table}");
        write_out(&common.out, "welch.csv", &csv)?;
        outputs.push("welch.csv");
    }
    print!("{summary}");
    write_out(&common.out, "summary.txt", &summary)?;
    manifest.finish(&outputs)?;
    Ok(())
}

/// Rollouts need encoder weights even when the actor is scripted: chosen
/// observations are still compressed into spans. Without a checkpoint an
/// untrained model stands in.
fn load_store(checkpoint: Option<&Path>, cfg: &RunConfig, seed: u64) -> Result<ParamStore> {
    match checkpoint {
        Some(p) => {
            let store = load_checkpoint_file(p)?;
            check_model_shape(&store, cfg)?;
            Ok(store)
        }
        None => {
            let mut rng = seed_stream(seed, "cli.init");
            let mut store = model::init_base(&cfg.model, &mut rng)?;
            model::init_encoder(&mut store, &cfg.model, &cfg.lora, cfg.max_memory_slots, &mut rng)?;
            model::freeze_decoder(&mut store);
            Ok(store)
        }
    }
}

// ---- rollout ----

pub fn cmd_rollout(
    common: &Common,
    checkpoint: Option<&Path>,
    over: &PolicyOverride,
) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    if let Some(c) = checkpoint {
        require_file(c, "checkpoint")?;
    }
    let inputs: Vec<&Path> = checkpoint.into_iter().collect();
    let manifest =
        RunManifest::start(&common.out, "rollout", &cfg.render(), common.seed, &inputs)?;

    let tok = Tokenizer::byte_level();
    let store = load_store(checkpoint, &cfg, common.seed)?;
    let policy = resolve_policy(&cfg.policy, common.seed, over)?;
    let use_model = checkpoint.is_some();

    let mut records = Vec::new();
    let mut trajs = Vec::new();
    for t in 0..cfg.eval.tasks {
        let kind = task_at(t, cfg.eval.depth_max);
        let task_seed = index_hash(common.seed, "cli.rollout", t as u64);
        let (fs, spec, expert) = generate_task(&kind, task_seed, cfg.rollout.obs_pad, &tok)?;
        let mut env = SimEnv::new(fs, spec);
        let opts = RolloutOptions {
            policy: policy.clone(),
            rho: cfg.rho,
            budget: cfg.rollout.budget,
            max_new: cfg.rollout.max_new,
            max_steps: 64,
        };
        let label = task_label(&kind, t);
        let traj = if use_model {
            let mut actor = ModelActor { max_new: cfg.rollout.max_new };
            rollout(&store, &cfg.model, &cfg.lora, &tok, &mut env, &mut actor, &opts, &label, task_seed)?
        } else {
            let mut actor = ScriptedActor::new(expert.actions().map(|s| s.text.clone()).collect());
            rollout(&store, &cfg.model, &cfg.lora, &tok, &mut env, &mut actor, &opts, &label, task_seed)?
        };
        let outcome = match traj.outcome {
            Some(Outcome::Resolved) => "resolved",
            Some(Outcome::Unresolved) => "unresolved",
            Some(Outcome::BudgetExhausted) => "budget_exhausted",
            None => "open",
        };
        let eff = agentic::effective_compression_rate(&traj, &policy, cfg.rho)?;
        println!(
            "{label}: {outcome}, {} actions, eff_rate {eff:.3}",
            traj.actions().count()
        );
        records.push(MetricRecord {
            run_id: "rollout-0".into(),
            task_id: label,
            bleu: bleu_ref(&traj, &expert).unwrap_or(0.0),
            exact_match: 0,
            pass_at: 0,
            resolved: u8::from(traj.outcome == Some(Outcome::Resolved)),
            steps: traj.actions().count(),
            eff_rate: eff,
            wall_ms: cost_ms(&traj),
        });
        trajs.push(traj);
    }
    for rec in &records {
        rec.validate()?;
    }

    let n = records.len() as f64;
    let summary = format!(
        "policy: {}\ntasks: {}\nresolved: {:.3}\nmean steps: {:.2}\nmean eff_rate: {:.3}\n",
        policy.name(),
        records.len(),
        records.iter().map(|r| r.resolved as f64).sum::<f64>() / n,
        records.iter().map(|r| r.steps as f64).sum::<f64>() / n,
        records.iter().map(|r| r.eff_rate).sum::<f64>() / n,
    );
    print!("{summary}");

    let mut traj_file = Vec::new();
    agentic::save_trajectories(&mut traj_file, &trajs)?;
    write_out(&common.out, "trajectories.jsonl", &String::from_utf8_lossy(&traj_file))?;
    write_out(&common.out, "metrics.csv", &metrics_csv(&records))?;
    write_out(&common.out, "summary.txt", &summary)?;
    manifest.finish(&["trajectories.jsonl", "metrics.csv", "summary.txt"])?;
    Ok(())
}

// ---- sweep ----

pub fn cmd_sweep(
    common: &Common,
    checkpoint: Option<&Path>,
    runs_override: Option<usize>,
    over: &PolicyOverride,
) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    if let Some(c) = checkpoint {
        require_file(c, "checkpoint")?;
    }
    let inputs: Vec<&Path> = checkpoint.into_iter().collect();
    let manifest = RunManifest::start(&common.out, "sweep", &cfg.render(), common.seed, &inputs)?;

    let tok = Tokenizer::byte_level();
    let policies = vec![
        CompressionPolicy::None,
        CompressionPolicy::LengthThreshold { tau: over.tau.unwrap_or(cfg.policy.tau) },
        CompressionPolicy::LastK { k: over.k.unwrap_or(cfg.policy.last_k) },
        CompressionPolicy::RandomPct {
            pct: over.pct.unwrap_or(cfg.policy.pct),
            seed: index_hash(common.seed, "policy.random_pct", 0),
        },
    ];
    let sc = SweepConfig {
        kinds: TASK_KINDS.iter().map(|s| s.to_string()).collect(),
        depth_max: cfg.eval.depth_max,
        policies,
        n_seeds: runs_override.unwrap_or(cfg.eval.runs) as u64,
        seed0: common.seed,
        obs_pad: cfg.rollout.obs_pad,
        payload_len: 8,
        rho: cfg.rho,
        budget: cfg.rollout.budget,
        max_new: cfg.rollout.max_new,
        max_steps: 64,
        use_model: false,
    };

    // Scripted control rows always run: the expert resolves every cell, so
    // any failure isolates the harness rather than the model.
    let control_store = load_store(None, &cfg, common.seed)?;
    let scripted = hypothesis_sweep(&control_store, &cfg.model, &cfg.lora, &tok, &sc)?;
    write_out(&common.out, "sweep_scripted.csv", &sweep_csv(&scripted))?;
    let mut outputs = vec!["sweep_scripted.csv", "sweep_welch.csv", "summary.txt"];

    let model_rows = match checkpoint {
        Some(p) => {
            let store = load_checkpoint_file(p)?;
            check_model_shape(&store, &cfg)?;
            let sc_model = SweepConfig { use_model: true, ..sc.clone() };
            let rows = hypothesis_sweep(&store, &cfg.model, &cfg.lora, &tok, &sc_model)?;
            write_out(&common.out, "sweep_model.csv", &sweep_csv(&rows))?;
            outputs.insert(1, "sweep_model.csv");
            Some(rows)
        }
        None => None,
    };

    // Policy columns compared against none over whichever rows carry signal.
    let basis = model_rows.as_deref().unwrap_or(&scripted);
    let take = |name: &str, f: &dyn Fn(&icae_core::env::SweepCell) -> f64| -> Vec<f64> {
        basis.iter().filter(|c| c.policy == name).map(|c| f(c)).collect()
    };
    let mut welch = String::from("comparison,metric,mean_a,mean_b,t,df,p\n");
    let mut tables = String::new();
    for pname in ["threshold", "last_k", "random_pct"] {
        let metrics: Vec<(&str, Vec<f64>, Vec<f64>)> = vec![
            ("resolved", take(pname, &|c| c.resolved as u8 as f64), take("none", &|c| c.resolved as u8 as f64)),
            ("steps", take(pname, &|c| c.steps as f64), take("none", &|c| c.steps as f64)),
            ("eff_rate", take(pname, &|c| c.eff_rate), take("none", &|c| c.eff_rate)),
        ];
        let (table, csv) = welch_report(pname, "none", &metrics);
        tables.push_str(&table);
        tables.push('\n');
        for line in csv.lines().skip(1) {
            welch.push_str(&format!("{pname}_vs_none,{line}\n"));
        }
    }
    print!("{tables}");
    write_out(&common.out, "sweep_welch.csv", &welch)?;

    let mut summary = String::new();
    summary.push_str(&format!(
        "grid: {} kinds x {} depths x 4 policies x {} seeds\n",
        sc.kinds.len(),
        sc.depth_max,
        sc.n_seeds
    ));
    for (name, rows) in std::iter::once(("scripted", &scripted))
        .chain(model_rows.iter().map(|r| ("model", r)))
    {
        summary.push_str(&format!("[{name}]\n"));
        for pol in ["none", "threshold", "last_k", "random_pct"] {
            let cells: Vec<_> = rows.iter().filter(|c| c.policy == pol).collect();
            let n = cells.len() as f64;
            summary.push_str(&format!(
                "  {pol}: resolved {:.3}, mean steps {:.2}, mean eff_rate {:.3}\n",
                cells.iter().map(|c| c.resolved as u8 as f64).sum::<f64>() / n,
                cells.iter().map(|c| c.steps as f64).sum::<f64>() / n,
                cells.iter().map(|c| c.eff_rate).sum::<f64>() / n,
            ));
        }
    }
    print!("{summary}");
    write_out(&common.out, "summary.txt", &summary)?;
    manifest.finish(&outputs)?;
    Ok(())
}

// ---- inspect ----

pub fn cmd_inspect(
    config: Option<&Path>,
    checkpoint: &Path,
    text: &str,
    text_origin: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    require_file(checkpoint, "checkpoint")?;
    let mut inputs: Vec<&Path> = vec![checkpoint];
    if let Some(p) = text_origin {
        inputs.push(p);
    }
    let manifest = RunManifest::start(out, "inspect", &cfg.render(), 0, &inputs)?;

    let store = load_checkpoint_file(checkpoint)?;
    check_model_shape(&store, &cfg)?;
    let tok = Tokenizer::byte_level();
    let ids = tok.encode(text);
    if ids.is_empty() {
        return Err(Error::Config("nothing to inspect: empty text".into()));
    }
    let spans = icae::compress_chunked(
        &store,
        &cfg.model,
        &cfg.lora,
        &ids,
        cfg.rho,
        cfg.max_memory_slots,
        "inspect",
    )?;

    let total_m: usize = spans.iter().map(|s| s.m).sum();
    let mut report = format!(
        "n = {} tokens, m = {total_m} slots, rho = {}, chunks = {}\n",
        ids.len(),
        cfg.rho,
        spans.len()
    );
    let mut correct = 0usize;
    let mut at = 0usize;
    for (i, span) in spans.iter().enumerate() {
        let src = &ids[at..at + span.source_token_count];
        at += span.source_token_count;
        let decoded = icae::decode_with_memory(
            &store,
            &cfg.model,
            &[span],
            TaskToken::Ae,
            &[],
            src.len() + 4,
            Some(vocab::END_RECON),
        )?;
        let recon: Vec<u32> =
            decoded.into_iter().take_while(|&t| t != vocab::END_RECON).collect();
        let ok = src
            .iter()
            .zip(&recon)
            .filter(|(a, b)| a == b)
            .count();
        correct += ok;
        report.push_str(&format!(
            "chunk {i}: n = {}, m = {}, token accuracy {:.1}%\n",
            span.source_token_count,
            span.m,
            100.0 * ok as f64 / src.len() as f64
        ));
        if recon != src {
            report.push_str(&format!("- {}\n+ {}\n", tok.decode_display(src), tok.decode_display(&recon)));
        }
    }
    report.push_str(&format!(
        "total token accuracy: {:.1}% ({correct}/{})\n",
        100.0 * correct as f64 / ids.len() as f64,
        ids.len()
    ));
    print!("{report}");
    write_out(out, "report.txt", &report)?;
    manifest.finish(&["report.txt"])?;
    Ok(())
}
