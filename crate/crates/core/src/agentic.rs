//! Multi-step compression: which observations become memory spans, how the
//! mixed discrete/span context is assembled and positioned, the
//! latest-observation-only gradient rule, and rollout against an
//! environment.

use crate::data::Tokenizer;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::icae::{self, slots_for, MemorySpan, Provenance};
use crate::model::{self, LoraAdapter, ModelConfig, ParamStore, SequenceBatch, SoftBlock, SoftSrc};
use crate::optim::AdamW;
use crate::rng::index_hash;
use crate::vocab;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    Action,
    Observation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub index: usize,
    pub role: Role,
    pub text: String,
    /// Length under the artifact tokenizer; derived, not serialized.
    pub token_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Resolved,
    Unresolved,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub task_id: String,
    pub seed: u64,
    pub steps: Vec<Step>,
    pub outcome: Option<Outcome>,
}

impl Trajectory {
    pub fn new(task_id: &str, seed: u64) -> Self {
        Trajectory { task_id: task_id.to_string(), seed, steps: Vec::new(), outcome: None }
    }

    pub fn push(&mut self, role: Role, text: String, tok: &Tokenizer) {
        let token_len = tok.token_len(&text);
        self.steps.push(Step { index: self.steps.len(), role, text, token_len });
    }

    /// Step 0 is system; after any leading system prefix, roles alternate
    /// action/observation starting with an action; indices are dense.
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Config("empty trajectory".into()));
        }
        if self.steps[0].role != Role::System {
            return Err(Error::Config("trajectory must open with a system step".into()));
        }
        let mut past_prefix = false;
        let mut expect_action = true;
        for (i, s) in self.steps.iter().enumerate() {
            if s.index != i {
                return Err(Error::Config(format!("step index {} at position {}", s.index, i)));
            }
            match s.role {
                Role::System => {
                    if past_prefix {
                        return Err(Error::Config(format!("system step {} after the prefix", i)));
                    }
                }
                Role::Action => {
                    past_prefix = true;
                    if !expect_action {
                        return Err(Error::Config(format!("two actions in a row at step {i}")));
                    }
                    expect_action = false;
                }
                Role::Observation => {
                    past_prefix = true;
                    if expect_action {
                        return Err(Error::Config(format!("observation without an action at step {i}")));
                    }
                    expect_action = true;
                }
            }
        }
        Ok(())
    }

    pub fn actions(&self) -> impl Iterator<Item = &Step> {
        self.steps.iter().filter(|s| s.role == Role::Action)
    }

    pub fn observations(&self) -> impl Iterator<Item = &Step> {
        self.steps.iter().filter(|s| s.role == Role::Observation)
    }
}

// ---- trajectory persistence (line-delimited JSON) ----

#[derive(Serialize, Deserialize)]
struct StepWire {
    index: usize,
    role: Role,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryWire {
    task_id: String,
    seed: u64,
    steps: Vec<StepWire>,
    outcome: Option<Outcome>,
}

pub fn save_trajectories<W: Write>(w: &mut W, trajs: &[Trajectory]) -> Result<()> {
    for t in trajs {
        let wire = TrajectoryWire {
            task_id: t.task_id.clone(),
            seed: t.seed,
            steps: t
                .steps
                .iter()
                .map(|s| StepWire { index: s.index, role: s.role, text: s.text.clone() })
                .collect(),
            outcome: t.outcome,
        };
        serde_json::to_writer(&mut *w, &wire)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Token lengths are recomputed on load, so records stay valid if the
/// tokenizer gains merges.
pub fn load_trajectories(text: &str, tok: &Tokenizer) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let wire: TrajectoryWire =
            serde_json::from_str(line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        let steps = wire
            .steps
            .into_iter()
            .map(|s| Step { index: s.index, role: s.role, token_len: tok.token_len(&s.text), text: s.text })
            .collect();
        let traj = Trajectory { task_id: wire.task_id, seed: wire.seed, steps, outcome: wire.outcome };
        traj.validate().map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        out.push(traj);
    }
    Ok(out)
}

// ---- compression policies ----

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CompressionPolicy {
    None,
    /// Compress observations strictly longer than tau tokens.
    LengthThreshold { tau: usize },
    /// Compress the last k observations, regardless of length.
    LastK { k: usize },
    /// Compress a stable pct% subset of observations, decided per index.
    RandomPct { pct: u32, seed: u64 },
}

impl CompressionPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            CompressionPolicy::LengthThreshold { tau } if *tau == 0 => {
                Err(Error::Config("threshold tau must be at least 1".into()))
            }
            CompressionPolicy::RandomPct { pct, .. } if *pct > 100 => {
                Err(Error::Config(format!("pct {pct} out of range")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CompressionPolicy::None => "none",
            CompressionPolicy::LengthThreshold { .. } => "threshold",
            CompressionPolicy::LastK { .. } => "last_k",
            CompressionPolicy::RandomPct { .. } => "random_pct",
        }
    }
}

/// Observation indices below `upto` selected for compression. Only
/// observations are ever selected; the decision for a given index never
/// changes as the trajectory grows, except for last_k's sliding window.
pub fn select_compression_steps(
    traj: &Trajectory,
    policy: &CompressionPolicy,
    upto: usize,
) -> BTreeSet<usize> {
    let obs: Vec<&Step> = traj
        .steps
        .iter()
        .filter(|s| s.role == Role::Observation && s.index < upto)
        .collect();
    match policy {
        CompressionPolicy::None => BTreeSet::new(),
        CompressionPolicy::LengthThreshold { tau } => {
            obs.iter().filter(|s| s.token_len > *tau).map(|s| s.index).collect()
        }
        CompressionPolicy::LastK { k } => {
            obs.iter().rev().take(*k).map(|s| s.index).collect()
        }
        CompressionPolicy::RandomPct { pct, seed } => obs
            .iter()
            .filter(|s| index_hash(*seed, "policy.random_pct", s.index as u64) % 100 < *pct as u64)
            .map(|s| s.index)
            .collect(),
    }
}

// ---- span cache ----

/// Spans computed for one trajectory, keyed by step index. A span is
/// computed exactly once — at the step where it is grad-live during
/// training, or on first use during rollout — and reused bit-identically
/// until the trajectory ends.
#[derive(Default)]
pub struct SpanCache {
    spans: BTreeMap<usize, MemorySpan>,
}

impl SpanCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, step: usize) -> Option<&MemorySpan> {
        self.spans.get(&step)
    }

    pub fn insert(&mut self, step: usize, span: MemorySpan) {
        self.spans.entry(step).or_insert(span);
    }

    pub fn contains(&self, step: usize) -> bool {
        self.spans.contains_key(&step)
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn checksum(&self) -> u64 {
        let mut h = crate::rng::FNV_OFFSET;
        for (step, span) in &self.spans {
            h = crate::rng::fnv1a_update(h, &(*step as u64).to_le_bytes());
            h = crate::rng::fnv1a_update(h, &span.checksum().to_le_bytes());
        }
        h
    }

    pub fn ensure(
        &mut self,
        tok: &Tokenizer,
        store: &ParamStore,
        cfg: &ModelConfig,
        adapter: &LoraAdapter,
        traj: &Trajectory,
        step: usize,
        rho: usize,
    ) -> Result<()> {
        if self.spans.contains_key(&step) {
            return Ok(());
        }
        let s = &traj.steps[step];
        let tokens = tok.encode(&s.text);
        let span = icae::compress(
            store,
            cfg,
            adapter,
            &tokens,
            rho,
            Provenance::TrajectoryStep { trajectory: traj.task_id.clone(), step },
        )?;
        self.spans.insert(step, span);
        Ok(())
    }
}

// ---- span cache persistence ----

const CACHE_MAGIC: &[u8; 4] = b"ICSC";
const CACHE_VERSION: u32 = 1;

/// One trajectory's cached spans: `[magic, version, trajectory id, rho,
/// d_model]`, then per-span `(step, n, m, vectors)` records, then a
/// checksum of all prior bytes. Bit-exact round-trip.
pub fn save_span_cache<W: Write>(
    w: &mut W,
    trajectory_id: &str,
    rho: usize,
    d_model: usize,
    cache: &SpanCache,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(trajectory_id.len() as u32).to_le_bytes());
    buf.extend_from_slice(trajectory_id.as_bytes());
    buf.extend_from_slice(&(rho as u32).to_le_bytes());
    buf.extend_from_slice(&(d_model as u32).to_le_bytes());
    buf.extend_from_slice(&(cache.spans.len() as u32).to_le_bytes());
    for (&step, span) in &cache.spans {
        if span.d_model != d_model {
            return Err(Error::Shape(format!(
                "span at step {step} has width {}, cache header says {d_model}",
                span.d_model
            )));
        }
        span.validate(rho)?;
        buf.extend_from_slice(&(step as u64).to_le_bytes());
        buf.extend_from_slice(&(span.source_token_count as u64).to_le_bytes());
        buf.extend_from_slice(&(span.m as u64).to_le_bytes());
        for &v in &span.vectors {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&crate::rng::fnv1a(&buf).to_le_bytes());
    w.write_all(&buf)?;
    Ok(())
}

/// Returns (trajectory id, rho, d_model, cache). Loaded spans carry their
/// original step provenance and no position base.
pub fn load_span_cache<R: Read>(r: &mut R) -> Result<(String, usize, usize, SpanCache)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 12 {
        return Err(Error::Checkpoint("truncated span cache".into()));
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    if crate::rng::fnv1a(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::Checkpoint("span cache checksum mismatch".into()));
    }
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > body.len() {
            return Err(Error::Checkpoint("truncated span cache".into()));
        }
        let s = &body[*at..*at + n];
        *at += n;
        Ok(s)
    };
    let take_u32 =
        |at: &mut usize| -> Result<u32> { Ok(u32::from_le_bytes(take(at, 4)?.try_into().unwrap())) };
    let take_u64 =
        |at: &mut usize| -> Result<u64> { Ok(u64::from_le_bytes(take(at, 8)?.try_into().unwrap())) };
    if take(&mut at, 4)? != CACHE_MAGIC {
        return Err(Error::Checkpoint("bad span cache magic".into()));
    }
    let version = take_u32(&mut at)?;
    if version != CACHE_VERSION {
        return Err(Error::Checkpoint(format!("unsupported span cache version {version}")));
    }
    let id_len = take_u32(&mut at)? as usize;
    let trajectory_id = String::from_utf8(take(&mut at, id_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("bad trajectory id".into()))?;
    let rho = take_u32(&mut at)? as usize;
    let d_model = take_u32(&mut at)? as usize;
    if rho == 0 || d_model == 0 {
        return Err(Error::Checkpoint("zero rho or d_model in span cache".into()));
    }
    let count = take_u32(&mut at)? as usize;
    let mut cache = SpanCache::new();
    for _ in 0..count {
        let step = take_u64(&mut at)? as usize;
        let n = take_u64(&mut at)? as usize;
        let m = take_u64(&mut at)? as usize;
        let raw = take(&mut at, m * d_model * 8)?;
        let vectors: Vec<f64> =
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let span = MemorySpan {
            vectors,
            m,
            d_model,
            source_token_count: n,
            position_base: None,
            provenance: Provenance::TrajectoryStep { trajectory: trajectory_id.clone(), step },
        };
        span.validate(rho)?;
        cache.insert(step, span);
    }
    if at != body.len() {
        return Err(Error::Checkpoint("trailing bytes in span cache".into()));
    }
    Ok((trajectory_id, rho, d_model, cache))
}

pub fn save_span_cache_file(
    path: &std::path::Path,
    trajectory_id: &str,
    rho: usize,
    d_model: usize,
    cache: &SpanCache,
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    save_span_cache(&mut f, trajectory_id, rho, d_model, cache)?;
    f.flush()?;
    Ok(())
}

pub fn load_span_cache_file(path: &std::path::Path) -> Result<(String, usize, usize, SpanCache)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    load_span_cache(&mut f)
}

// ---- context assembly ----

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Discrete { step: usize, ids: Vec<u32> },
    Span { step: usize, m: usize, n: usize },
}

impl Segment {
    pub fn slots(&self) -> usize {
        match self {
            Segment::Discrete { ids, .. } => ids.len(),
            Segment::Span { m, .. } => *m,
        }
    }
}

/// Interleaved context for one trajectory prefix. `grad_live` names the
/// single span (by step index) through which training gradients may flow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledContext {
    pub segments: Vec<Segment>,
    pub position_ids: Vec<usize>,
    pub grad_live: Option<usize>,
}

impl AssembledContext {
    pub fn total_slots(&self) -> usize {
        self.segments.iter().map(Segment::slots).sum()
    }
}

/// Position ids become consecutive integers over the assembled slot order:
/// an m-slot span advances the counter by m, not by its source length, so
/// the distance from any span to the current prompt is the number of
/// intervening slots.
pub fn remap_positions(mut ctx: AssembledContext) -> AssembledContext {
    let total = ctx.total_slots();
    ctx.position_ids = (0..total).collect();
    ctx
}

/// Builds the decoder context for acting at `current`: steps before
/// `current` appear in order, compressed ones as spans. The span of
/// observation `current - 1` is grad-live when selected; every other span
/// is detached. Span sizes come from step lengths, so assembly works
/// before the live span's vectors exist; cached entries are checked for
/// consistency when present.
pub fn assemble_context(
    tok: &Tokenizer,
    traj: &Trajectory,
    chosen: &BTreeSet<usize>,
    cache: &SpanCache,
    current: usize,
    rho: usize,
    budget: usize,
) -> Result<AssembledContext> {
    if current > traj.steps.len() {
        return Err(Error::Config(format!(
            "current step {} beyond trajectory of {}",
            current,
            traj.steps.len()
        )));
    }
    let mut segments = Vec::with_capacity(current);
    for step in &traj.steps[..current] {
        if chosen.contains(&step.index) {
            let m = slots_for(step.token_len, rho);
            if let Some(span) = cache.get(step.index) {
                if span.m != m || span.source_token_count != step.token_len {
                    return Err(Error::Shape(format!(
                        "cached span for step {} is {} slots over {} tokens, expected {} over {}",
                        step.index, span.m, span.source_token_count, m, step.token_len
                    )));
                }
            }
            segments.push(Segment::Span { step: step.index, m, n: step.token_len });
        } else {
            segments.push(Segment::Discrete { step: step.index, ids: tok.encode(&step.text) });
        }
    }
    let grad_live = if current > 0 && chosen.contains(&(current - 1)) {
        Some(current - 1)
    } else {
        None
    };
    let ctx = remap_positions(AssembledContext { segments, position_ids: Vec::new(), grad_live });
    let slots = ctx.total_slots();
    if slots > budget {
        return Err(Error::Budget { slots, budget });
    }
    Ok(ctx)
}

/// Renders an assembled context as a model batch. Cached spans enter as
/// detached data; when `live` is given, that one span is compressed on the
/// graph so gradients reach the encoder. Appends `suffix` (task token,
/// teacher-forced tokens) as discrete slots.
pub struct BatchBuild {
    pub batch: SequenceBatch,
    /// Slot offset where the suffix begins.
    pub suffix_at: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn context_to_batch(
    g: Option<&mut Graph>,
    tok: &Tokenizer,
    store: &ParamStore,
    cfg: &ModelConfig,
    adapter: &LoraAdapter,
    traj: &Trajectory,
    ctx: &AssembledContext,
    cache: &SpanCache,
    rho: usize,
    suffix: &[u32],
) -> Result<BatchBuild> {
    let mut ids = Vec::new();
    let mut soft = Vec::new();
    let mut graph = g;
    for seg in &ctx.segments {
        match seg {
            Segment::Discrete { ids: seg_ids, .. } => ids.extend_from_slice(seg_ids),
            Segment::Span { step, m, .. } => {
                let start = ids.len();
                ids.extend(std::iter::repeat(vocab::MEM_SENTINEL).take(*m));
                let live = ctx.grad_live == Some(*step);
                let src = if live {
                    let g = graph
                        .as_deref_mut()
                        .ok_or_else(|| Error::Config("live span requires a graph".into()))?;
                    let tokens = tok.encode(&traj.steps[*step].text);
                    let (node, node_m) = icae::compress_on_graph(g, store, cfg, adapter, &tokens, rho)?;
                    debug_assert_eq!(node_m, *m);
                    SoftSrc::Node(node)
                } else {
                    let span = cache
                        .get(*step)
                        .ok_or_else(|| Error::Config(format!("no cached span for step {step}")))?;
                    SoftSrc::Data(span.vectors.clone())
                };
                soft.push(SoftBlock { start, rows: *m, src });
            }
        }
    }
    let suffix_at = ids.len();
    ids.extend_from_slice(suffix);
    let t = ids.len();
    Ok(BatchBuild {
        batch: SequenceBatch { token_ids: ids, soft, position_ids: (0..t).collect() },
        suffix_at,
    })
}

// ---- agentic training ----

/// One training step on action `k`: cross-entropy over that action's tokens
/// (terminator included), gradients only through the latest compressed
/// observation. Steps whose previous observation was not compressed stay in
/// the epoch but move no weights. Returns (loss, had_grads).
#[allow(clippy::too_many_arguments)]
pub fn train_step_agentic(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    adapter: &LoraAdapter,
    tok: &Tokenizer,
    traj: &Trajectory,
    policy: &CompressionPolicy,
    k: usize,
    rho: usize,
    cache: &mut SpanCache,
    opt: &mut AdamW,
) -> Result<(f64, bool)> {
    traj.validate()?;
    policy.validate()?;
    if k >= traj.steps.len() || traj.steps[k].role != Role::Action {
        return Err(Error::Config(format!("step {k} is not an action")));
    }
    let chosen = select_compression_steps(traj, policy, k);
    let live = (k > 0 && chosen.contains(&(k - 1))).then(|| k - 1);
    // cached spans for everything selected except the live one
    for &idx in &chosen {
        if Some(idx) != live {
            cache.ensure(tok, store, cfg, adapter, traj, idx, rho)?;
        }
    }
    let ctx = assemble_context(tok, traj, &chosen, cache, k, rho, cfg.max_positions)?;

    let action_ids = tok.encode(&traj.steps[k].text);
    let mut suffix = vec![vocab::ACT];
    suffix.extend_from_slice(&action_ids);

    let mut g = Graph::new();
    let build = context_to_batch(Some(&mut g), tok, store, cfg, adapter, traj, &ctx, cache, rho, &suffix)?;
    let out = model::forward(&mut g, store, cfg, None, &build.batch, true)?;

    // the ACT slot predicts the first action token; the last action slot
    // predicts the terminator
    let t = build.batch.len();
    let mut targets = vec![0usize; t];
    let mut mask = vec![false; t];
    let act_slot = build.suffix_at;
    for (i, &tokid) in action_ids.iter().enumerate() {
        targets[act_slot + i] = tokid as usize;
        mask[act_slot + i] = true;
    }
    targets[act_slot + action_ids.len()] = vocab::EOS as usize;
    mask[act_slot + action_ids.len()] = true;

    let loss = g.cross_entropy(out.logits.unwrap(), &targets, &mask)?;
    let loss_v = g.scalar_value(loss);

    // persist the live span's vectors before weights move: later steps of
    // this trajectory reuse them bit-identically
    let live_node = build.batch.soft.iter().find_map(|b| match (&b.src, ctx.grad_live) {
        (SoftSrc::Node(n), Some(_)) => Some(*n),
        _ => None,
    });
    if let (Some(node), Some(live_step)) = (live_node, ctx.grad_live) {
        if !cache.contains(live_step) {
            let (m, d) = g.shape(node);
            let span = MemorySpan {
                vectors: g.value(node).to_vec(),
                m,
                d_model: d,
                source_token_count: traj.steps[live_step].token_len,
                position_base: None,
                provenance: Provenance::TrajectoryStep {
                    trajectory: traj.task_id.clone(),
                    step: live_step,
                },
            };
            span.validate(rho)?;
            cache.insert(live_step, span);
        }
    }

    let grads = g.backward(loss)?;
    let had = !grads.by_name.is_empty();
    if had {
        opt.step(store, &grads.by_name)?;
    }
    Ok((loss_v, had))
}

// ---- rollout ----

/// Environment contract for rollouts: deterministic state machine plus a
/// success judgment over the finished trajectory.
pub trait Env {
    fn system_prompt(&self) -> String;
    /// Executes one action and returns the observation text.
    fn execute(&mut self, action: &str) -> String;
    /// True once a terminal action (e.g. submit) was executed.
    fn terminated(&self) -> bool;
    /// Judgment of the current state; meaningful once terminated or the
    /// budget ran out.
    fn judge(&self) -> Outcome;
}

/// Produces the next action given the assembled decoder input.
pub trait ActionSource {
    fn next_action(
        &mut self,
        store: &ParamStore,
        cfg: &ModelConfig,
        batch: &SequenceBatch,
        tok: &Tokenizer,
    ) -> Result<String>;
}

/// Replays a fixed action list; the assembled context is ignored, which
/// makes policy-independence of scripted rollouts testable.
pub struct ScriptedActor {
    actions: Vec<String>,
    at: usize,
}

impl ScriptedActor {
    pub fn new(actions: Vec<String>) -> Self {
        ScriptedActor { actions, at: 0 }
    }
}

impl ActionSource for ScriptedActor {
    fn next_action(
        &mut self,
        _store: &ParamStore,
        _cfg: &ModelConfig,
        _batch: &SequenceBatch,
        _tok: &Tokenizer,
    ) -> Result<String> {
        let a = self
            .actions
            .get(self.at)
            .cloned()
            .unwrap_or_else(|| "$ submit".to_string());
        self.at += 1;
        Ok(a)
    }
}

/// Greedy decoding from the frozen decoder.
pub struct ModelActor {
    pub max_new: usize,
}

impl ActionSource for ModelActor {
    fn next_action(
        &mut self,
        store: &ParamStore,
        cfg: &ModelConfig,
        batch: &SequenceBatch,
        tok: &Tokenizer,
    ) -> Result<String> {
        let rows = model::embed_rows(store, cfg, batch)?;
        let ids = model::generate_greedy(
            store,
            cfg,
            None,
            &rows,
            &batch.position_ids,
            self.max_new,
            Some(vocab::EOS),
        )?;
        let body: Vec<u32> = ids.into_iter().take_while(|&i| i != vocab::EOS).collect();
        Ok(tok.decode_display(&body))
    }
}

pub struct RolloutOptions {
    pub policy: CompressionPolicy,
    pub rho: usize,
    /// Total slot budget for the assembled context, the task token, and the
    /// reserved generation room.
    pub budget: usize,
    pub max_new: usize,
    /// Safety valve against non-terminating environments.
    pub max_steps: usize,
}

/// ReAct loop: assemble context under the policy, generate an action,
/// execute it, append the observation. Terminates on the environment's
/// terminal state or when the next assembly cannot fit
/// `budget - 1 - max_new` slots.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    store: &ParamStore,
    cfg: &ModelConfig,
    adapter: &LoraAdapter,
    tok: &Tokenizer,
    env: &mut dyn Env,
    actor: &mut dyn ActionSource,
    opts: &RolloutOptions,
    task_id: &str,
    seed: u64,
) -> Result<Trajectory> {
    opts.policy.validate()?;
    if opts.budget < 1 + opts.max_new {
        return Err(Error::Config("budget smaller than one generation".into()));
    }
    let ctx_budget = (opts.budget - 1 - opts.max_new).min(cfg.max_positions.saturating_sub(1 + opts.max_new));
    let mut traj = Trajectory::new(task_id, seed);
    traj.push(Role::System, env.system_prompt(), tok);
    let mut cache = SpanCache::new();

    loop {
        if traj.actions().count() >= opts.max_steps {
            traj.outcome = Some(env.judge());
            break;
        }
        let current = traj.steps.len();
        let chosen = select_compression_steps(&traj, &opts.policy, current);
        for &idx in &chosen {
            cache.ensure(tok, store, cfg, adapter, &traj, idx, opts.rho)?;
        }
        let ctx = match assemble_context(tok, &traj, &chosen, &cache, current, opts.rho, ctx_budget) {
            Ok(ctx) => ctx,
            Err(Error::Budget { .. }) => {
                traj.outcome = Some(Outcome::BudgetExhausted);
                break;
            }
            Err(e) => return Err(e),
        };
        // every chosen span was just cached; at inference none is grad-live
        let ctx = AssembledContext { grad_live: None, ..ctx };
        let build = context_to_batch(
            None,
            tok,
            store,
            cfg,
            adapter,
            &traj,
            &ctx,
            &cache,
            opts.rho,
            &[vocab::ACT],
        )?;
        let action = actor.next_action(store, cfg, &build.batch, tok)?;
        traj.push(Role::Action, action.clone(), tok);
        let obs = env.execute(&action);
        if env.terminated() {
            traj.outcome = Some(env.judge());
            break;
        }
        traj.push(Role::Observation, obs, tok);
    }
    Ok(traj)
}

// ---- effective compression accounting ----

/// (total source tokens) / (uncompressed tokens + memory slots used).
/// Policy `none` gives exactly 1.0.
pub fn effective_compression_rate(
    traj: &Trajectory,
    policy: &CompressionPolicy,
    rho: usize,
) -> Result<f64> {
    if traj.steps.is_empty() {
        return Err(Error::Config("empty trajectory".into()));
    }
    let chosen = select_compression_steps(traj, policy, traj.steps.len());
    let total: usize = traj.steps.iter().map(|s| s.token_len).sum();
    if total == 0 {
        return Err(Error::Config("trajectory with zero tokens".into()));
    }
    let mut occupied = 0usize;
    for s in &traj.steps {
        if chosen.contains(&s.index) {
            occupied += slots_for(s.token_len, rho);
        } else {
            occupied += s.token_len;
        }
    }
    Ok(total as f64 / occupied as f64)
}
