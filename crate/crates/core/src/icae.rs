//! The compression mechanism: the encoder reads a token span followed by
//! learnable memory queries and emits the final-layer hidden states at the
//! query slots as a span of continuous memory vectors. The frozen decoder
//! consumes those spans in place of the original text.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{
    self, forward, LoraAdapter, ModelConfig, ParamStore, SequenceBatch, SoftBlock, SoftSrc,
    MEMORY_QUERIES,
};
use crate::optim::AdamW;
use crate::rng::{fnv1a_update, FNV_OFFSET};
use crate::vocab;
use rand::Rng;
use std::io::{Read, Write};

/// Where a span's source text came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    TrajectoryStep { trajectory: String, step: usize },
    DocumentChunk { document: String, chunk: usize },
}

/// `vectors` holds m rows of d_model values; m = ceil(n / rho) where n is
/// the source token count.
#[derive(Debug, Clone)]
pub struct MemorySpan {
    pub vectors: Vec<f64>,
    pub m: usize,
    pub d_model: usize,
    pub source_token_count: usize,
    pub position_base: Option<usize>,
    pub provenance: Provenance,
}

impl MemorySpan {
    pub fn validate(&self, rho: usize) -> Result<()> {
        if self.m != slots_for(self.source_token_count, rho) || self.m == 0 {
            return Err(Error::Shape(format!(
                "span of {} slots for {} tokens at rate {}",
                self.m, self.source_token_count, rho
            )));
        }
        if self.vectors.len() != self.m * self.d_model {
            return Err(Error::Shape(format!(
                "span data {} for {}x{}",
                self.vectors.len(),
                self.m,
                self.d_model
            )));
        }
        if self.vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite memory vector".into()));
        }
        Ok(())
    }

    pub fn checksum(&self) -> u64 {
        let mut h = FNV_OFFSET;
        h = fnv1a_update(h, &(self.m as u64).to_le_bytes());
        h = fnv1a_update(h, &(self.source_token_count as u64).to_le_bytes());
        for &v in &self.vectors {
            h = fnv1a_update(h, &v.to_le_bytes());
        }
        h
    }
}

pub fn slots_for(n_tokens: usize, rho: usize) -> usize {
    n_tokens.div_ceil(rho)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Ae,
    Lm,
}

/// Task-signaling token appended after the memory spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskToken {
    Ae,
    Lm,
    Qa,
    Act,
}

impl TaskToken {
    pub fn id(self) -> u32 {
        match self {
            TaskToken::Ae => vocab::AE,
            TaskToken::Lm => vocab::LM,
            TaskToken::Qa => vocab::QA,
            TaskToken::Act => vocab::ACT,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainSample {
    pub input: Vec<u32>,
    pub objective: Objective,
    pub target: Vec<u32>,
}

impl PretrainSample {
    pub fn validate(&self) -> Result<()> {
        if self.input.is_empty() || self.target.is_empty() {
            return Err(Error::Config("empty pretrain sample".into()));
        }
        if self.objective == Objective::Ae && self.input != self.target {
            return Err(Error::Config("autoencoding target must equal the input".into()));
        }
        Ok(())
    }
}

/// Bernoulli(0.5) draw for the pretraining mix.
pub fn sample_objective<R: Rng>(rng: &mut R) -> Objective {
    if rng.gen_bool(0.5) {
        Objective::Ae
    } else {
        Objective::Lm
    }
}

/// How many source tokens fit in one encoder call: n discrete rows plus
/// ceil(n/rho) query rows must stay inside the context, and the query count
/// is capped by the learned table.
pub fn max_chunk_tokens(cfg: &ModelConfig, rho: usize, max_memory_slots: usize) -> usize {
    let mut n = cfg.max_positions.saturating_sub(1);
    while n > 0 && n + slots_for(n, rho) > cfg.max_positions {
        n -= 1;
    }
    n.min(max_memory_slots * rho)
}

fn memory_query_rows(store: &ParamStore, m: usize, d: usize) -> Result<Vec<f64>> {
    let q = store.require(MEMORY_QUERIES)?;
    if q.shape[0] < m {
        return Err(Error::Config(format!(
            "{} memory queries available, span needs {}",
            q.shape[0], m
        )));
    }
    Ok(q.data[..m * d].to_vec())
}

/// Encoder sequence for one span: the source tokens then m query slots,
/// consecutive positions from zero.
fn encoder_batch(tokens: &[u32], m: usize, soft: SoftSrc) -> SequenceBatch {
    let n = tokens.len();
    let mut ids = tokens.to_vec();
    ids.extend(std::iter::repeat(vocab::MEM_SENTINEL).take(m));
    SequenceBatch {
        token_ids: ids,
        soft: vec![SoftBlock { start: n, rows: m, src: soft }],
        position_ids: (0..n + m).collect(),
    }
}

/// Inference-path compression: pure in the weights, no tape.
pub fn compress(
    store: &ParamStore,
    cfg: &ModelConfig,
    adapter: &LoraAdapter,
    tokens: &[u32],
    rho: usize,
    provenance: Provenance,
) -> Result<MemorySpan> {
    if tokens.is_empty() {
        return Err(Error::Shape("cannot compress an empty span".into()));
    }
    let n = tokens.len();
    let m = slots_for(n, rho);
    if n + m > cfg.max_positions {
        return Err(Error::Chunking { len: n, max: cfg.max_positions });
    }
    let d = cfg.d_model;
    let queries = memory_query_rows(store, m, d)?;
    let batch = encoder_batch(tokens, m, SoftSrc::Data(queries));
    let rows = model::embed_rows(store, cfg, &batch)?;
    let (_, out) = model::prefill(store, cfg, Some(adapter), &rows, &batch.position_ids)?;
    let vectors = out.hidden[n * d..(n + m) * d].to_vec();
    let span = MemorySpan {
        vectors,
        m,
        d_model: d,
        source_token_count: n,
        position_base: None,
        provenance,
    };
    span.validate(rho)?;
    Ok(span)
}

/// Graph-path compression for training: returns the span node (m x d_model)
/// so gradients flow into the adapter and the query table.
pub fn compress_on_graph(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    adapter: &LoraAdapter,
    tokens: &[u32],
    rho: usize,
) -> Result<(NodeId, usize)> {
    if tokens.is_empty() {
        return Err(Error::Shape("cannot compress an empty span".into()));
    }
    let n = tokens.len();
    let m = slots_for(n, rho);
    if n + m > cfg.max_positions {
        return Err(Error::Chunking { len: n, max: cfg.max_positions });
    }
    let queries_all = g.leaf(store.require(MEMORY_QUERIES)?, Some(MEMORY_QUERIES))?;
    let queries = g.slice_rows(queries_all, 0, m)?;
    let batch = encoder_batch(tokens, m, SoftSrc::Node(queries));
    let out = forward(g, store, cfg, Some(adapter), &batch, false)?;
    let span = g.slice_rows(out.hidden, n, m)?;
    Ok((span, m))
}

/// Splits an over-long input into equal chunks that each fit the encoder,
/// compresses each independently, and returns the spans in order.
pub fn compress_chunked(
    store: &ParamStore,
    cfg: &ModelConfig,
    adapter: &LoraAdapter,
    tokens: &[u32],
    rho: usize,
    max_memory_slots: usize,
    document: &str,
) -> Result<Vec<MemorySpan>> {
    let cap = max_chunk_tokens(cfg, rho, max_memory_slots);
    if cap == 0 {
        return Err(Error::Config("encoder context cannot fit any span".into()));
    }
    let n_chunks = tokens.len().div_ceil(cap);
    let per = tokens.len().div_ceil(n_chunks);
    let mut spans = Vec::with_capacity(n_chunks);
    for (i, chunk) in tokens.chunks(per).enumerate() {
        spans.push(compress(
            store,
            cfg,
            adapter,
            chunk,
            rho,
            Provenance::DocumentChunk { document: document.to_string(), chunk: i },
        )?);
    }
    Ok(spans)
}

/// Decoder context: `[spans ‖ task ‖ prompt]` with consecutive positions.
/// Returns (token_ids, soft blocks, positions).
pub fn decoder_context(spans: &[&MemorySpan], task: TaskToken, prompt: &[u32]) -> SequenceBatch {
    let total_m: usize = spans.iter().map(|s| s.m).sum();
    let mut ids = Vec::with_capacity(total_m + 1 + prompt.len());
    let mut soft = Vec::with_capacity(spans.len());
    let mut at = 0;
    for s in spans {
        ids.extend(std::iter::repeat(vocab::MEM_SENTINEL).take(s.m));
        soft.push(SoftBlock { start: at, rows: s.m, src: SoftSrc::Data(s.vectors.clone()) });
        at += s.m;
    }
    ids.push(task.id());
    ids.extend_from_slice(prompt);
    let t = ids.len();
    SequenceBatch { token_ids: ids, soft, position_ids: (0..t).collect() }
}

/// Greedy generation conditioned on memory spans; the decoder is read-only.
pub fn decode_with_memory(
    store: &ParamStore,
    cfg: &ModelConfig,
    spans: &[&MemorySpan],
    task: TaskToken,
    prompt: &[u32],
    max_new: usize,
    stop: Option<u32>,
) -> Result<Vec<u32>> {
    let batch = decoder_context(spans, task, prompt);
    if batch.len() + max_new > cfg.max_positions {
        return Err(Error::Budget { slots: batch.len() + max_new, budget: cfg.max_positions });
    }
    let rows = model::embed_rows(store, cfg, &batch)?;
    model::generate_greedy(store, cfg, None, &rows, &batch.position_ids, max_new, stop)
}

/// One optimizer-ready training step: compress, decode under the task
/// token, score the target positions, backpropagate. Only adapter and
/// query gradients exist; base weights are frozen leaves.
/// Returns (loss, gradient map).
pub fn pretrain_loss(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    adapter: &LoraAdapter,
    sample: &PretrainSample,
    rho: usize,
) -> Result<NodeId> {
    sample.validate()?;
    let (span_node, m) = compress_on_graph(g, store, cfg, adapter, &sample.input, rho)?;

    let (task, target_ids, append_end) = match sample.objective {
        Objective::Ae => (TaskToken::Ae, sample.target.clone(), true),
        Objective::Lm => (TaskToken::Lm, sample.target.clone(), false),
    };
    // decoder input: [span ‖ task ‖ target tokens]; position m (the task
    // slot) predicts target[0], each target slot predicts its successor,
    // and for AE the last slot predicts the end-of-reconstruction mark
    let mut ids: Vec<u32> = std::iter::repeat(vocab::MEM_SENTINEL).take(m).collect();
    ids.push(task.id());
    ids.extend_from_slice(&target_ids);
    let t = ids.len();
    let batch = SequenceBatch {
        token_ids: ids,
        soft: vec![SoftBlock { start: 0, rows: m, src: SoftSrc::Node(span_node) }],
        position_ids: (0..t).collect(),
    };
    let out = forward(g, store, cfg, None, &batch, true)?;

    let mut targets = vec![0usize; t];
    let mut mask = vec![false; t];
    for (i, &tok) in target_ids.iter().enumerate() {
        targets[m + i] = tok as usize;
        mask[m + i] = true;
    }
    if append_end {
        targets[m + target_ids.len()] = vocab::END_RECON as usize;
        mask[m + target_ids.len()] = true;
    }
    g.cross_entropy(out.logits.unwrap(), &targets, &mask)
}

pub fn pretrain_step(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    adapter: &LoraAdapter,
    sample: &PretrainSample,
    rho: usize,
    opt: &mut AdamW,
) -> Result<f64> {
    let mut g = Graph::new();
    let loss = pretrain_loss(&mut g, store, cfg, adapter, sample, rho)?;
    let loss_v = g.scalar_value(loss);
    let grads = g.backward(loss)?;
    opt.step(store, &grads.by_name)?;
    Ok(loss_v)
}

/// Single-shot QA: compressed context, discrete question, answer scored.
/// Layout [span ‖ QA ‖ question ‖ answer]; the last question slot predicts
/// the first answer token and the last answer slot predicts the terminator.
pub fn qa_loss(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    adapter: &LoraAdapter,
    context: &[u32],
    question: &[u32],
    answer: &[u32],
    rho: usize,
) -> Result<NodeId> {
    if answer.is_empty() {
        return Err(Error::Config("empty answer in qa sample".into()));
    }
    let (span_node, m) = compress_on_graph(g, store, cfg, adapter, context, rho)?;
    let mut ids: Vec<u32> = std::iter::repeat(vocab::MEM_SENTINEL).take(m).collect();
    ids.push(TaskToken::Qa.id());
    ids.extend_from_slice(question);
    ids.extend_from_slice(answer);
    let t = ids.len();
    let batch = SequenceBatch {
        token_ids: ids,
        soft: vec![SoftBlock { start: 0, rows: m, src: SoftSrc::Node(span_node) }],
        position_ids: (0..t).collect(),
    };
    let out = forward(g, store, cfg, None, &batch, true)?;

    let q = question.len();
    let a = answer.len();
    let mut targets = vec![0usize; t];
    let mut mask = vec![false; t];
    for (j, &tok) in answer.iter().enumerate() {
        targets[m + q + j] = tok as usize;
        mask[m + q + j] = true;
    }
    targets[m + q + a] = vocab::EOS as usize;
    mask[m + q + a] = true;
    g.cross_entropy(out.logits.unwrap(), &targets, &mask)
}

#[allow(clippy::too_many_arguments)]
pub fn qa_step(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    adapter: &LoraAdapter,
    context: &[u32],
    question: &[u32],
    answer: &[u32],
    rho: usize,
    opt: &mut AdamW,
) -> Result<f64> {
    let mut g = Graph::new();
    let loss = qa_loss(&mut g, store, cfg, adapter, context, question, answer, rho)?;
    let loss_v = g.scalar_value(loss);
    let grads = g.backward(loss)?;
    opt.step(store, &grads.by_name)?;
    Ok(loss_v)
}

/// Greedy answer from a compressed context; stops at the terminator.
pub fn qa_answer(
    store: &ParamStore,
    cfg: &ModelConfig,
    adapter: &LoraAdapter,
    context: &[u32],
    question: &[u32],
    rho: usize,
    max_new: usize,
) -> Result<Vec<u32>> {
    let span = compress(store, cfg, adapter, context, rho, Provenance::DocumentChunk {
        document: "qa".into(),
        chunk: 0,
    })?;
    let out = decode_with_memory(store, cfg, &[&span], TaskToken::Qa, question, max_new, Some(vocab::EOS))?;
    Ok(out.into_iter().take_while(|&t| t != vocab::EOS).collect())
}

// ---- span cache persistence ----

const SPAN_MAGIC: &[u8; 4] = b"SPAN";
const SPAN_VERSION: u32 = 1;

/// Writes one trajectory's cached spans: header (trajectory id, rho,
/// d_model), then per-span records, then a checksum of everything prior.
pub fn save_span_cache<W: Write>(
    w: &mut W,
    trajectory: &str,
    rho: usize,
    d_model: usize,
    spans: &[(usize, MemorySpan)],
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(SPAN_MAGIC);
    buf.extend_from_slice(&SPAN_VERSION.to_le_bytes());
    buf.extend_from_slice(&(trajectory.len() as u32).to_le_bytes());
    buf.extend_from_slice(trajectory.as_bytes());
    buf.extend_from_slice(&(rho as u32).to_le_bytes());
    buf.extend_from_slice(&(d_model as u32).to_le_bytes());
    buf.extend_from_slice(&(spans.len() as u32).to_le_bytes());
    for (step, span) in spans {
        span.validate(rho)?;
        if span.d_model != d_model {
            return Err(Error::Shape(format!("span d_model {} in cache of {}", span.d_model, d_model)));
        }
        buf.extend_from_slice(&(*step as u32).to_le_bytes());
        buf.extend_from_slice(&(span.source_token_count as u32).to_le_bytes());
        buf.extend_from_slice(&(span.m as u32).to_le_bytes());
        for &v in &span.vectors {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = crate::rng::fnv1a(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    w.write_all(&buf)?;
    Ok(())
}

pub fn load_span_cache<R: Read>(r: &mut R) -> Result<(String, usize, usize, Vec<(usize, MemorySpan)>)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 8 {
        return Err(Error::Checkpoint("span cache truncated".into()));
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if crate::rng::fnv1a(body) != stored {
        return Err(Error::Checkpoint("span cache checksum mismatch".into()));
    }
    let mut at = 0;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > body.len() {
            return Err(Error::Checkpoint("span cache truncated".into()));
        }
        let s = &body[*at..*at + n];
        *at += n;
        Ok(s)
    };
    if take(&mut at, 4)? != SPAN_MAGIC {
        return Err(Error::Checkpoint("bad span cache magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
    if version != SPAN_VERSION {
        return Err(Error::Checkpoint(format!("span cache version {version}")));
    }
    let name_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let trajectory = String::from_utf8(take(&mut at, name_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("bad trajectory id".into()))?;
    let rho = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let d_model = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let mut spans = Vec::with_capacity(count);
    for _ in 0..count {
        let step = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let n = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let m = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let raw = take(&mut at, m * d_model * 8)?;
        let vectors: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let span = MemorySpan {
            vectors,
            m,
            d_model,
            source_token_count: n,
            position_base: None,
            provenance: Provenance::TrajectoryStep { trajectory: trajectory.clone(), step },
        };
        span.validate(rho)?;
        spans.push((step, span));
    }
    Ok((trajectory, rho, d_model, spans))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn slot_arithmetic() {
        assert_eq!(slots_for(512, 4), 128);
        assert_eq!(slots_for(3, 4), 1);
        assert_eq!(slots_for(4, 4), 1);
        assert_eq!(slots_for(5, 4), 2);
    }

    #[test]
    fn objective_mix_is_balanced_and_deterministic() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(99);
        let draws: Vec<Objective> = (0..10000).map(|_| sample_objective(&mut rng)).collect();
        let ae = draws.iter().filter(|&&o| o == Objective::Ae).count() as f64 / 10000.0;
        assert!((0.47..=0.53).contains(&ae), "AE fraction {ae}");

        let mut rng2 = rand_chacha::ChaCha20Rng::seed_from_u64(99);
        let again: Vec<Objective> = (0..10000).map(|_| sample_objective(&mut rng2)).collect();
        assert_eq!(draws, again);

        for window in draws.chunks(100) {
            assert!(window.iter().any(|&o| o == Objective::Ae));
            assert!(window.iter().any(|&o| o == Objective::Lm));
        }
    }

    #[test]
    fn span_cache_round_trips() {
        let span = |step: usize, n: usize| {
            let m = slots_for(n, 4);
            MemorySpan {
                vectors: (0..m * 8).map(|i| (i as f64 * 0.31).sin()).collect(),
                m,
                d_model: 8,
                source_token_count: n,
                position_base: None,
                provenance: Provenance::TrajectoryStep { trajectory: "t0".into(), step },
            }
        };
        let spans = vec![(1, span(1, 300)), (3, span(3, 17))];
        let mut buf = Vec::new();
        save_span_cache(&mut buf, "t0", 4, 8, &spans).unwrap();
        let (traj, rho, d, loaded) = load_span_cache(&mut buf.as_slice()).unwrap();
        assert_eq!(traj, "t0");
        assert_eq!((rho, d), (4, 8));
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].1.checksum(), spans[0].1.checksum());
        assert_eq!(loaded[1].1.checksum(), spans[1].1.checksum());

        // one corrupted payload byte must fail the checksum
        let mid = buf.len() / 2;
        buf[mid] ^= 0x40;
        assert!(load_span_cache(&mut buf.as_slice()).is_err());
    }
}
