//! Decoder-only transformer with rotary positions, instantiated once as a
//! parameter store shared by two roles: the frozen decoder (base weights
//! under `decoder.`) and the trainable encoder (the same base weights plus
//! low-rank adapters and memory-query embeddings under `encoder.`).
//!
//! Two forward implementations exist on purpose. The graph forward records
//! an autodiff tape for training; the inference forward (`prefill` /
//! `infer_step`) runs the identical arithmetic with a KV cache and no tape.
//! Both route every reduction through `kernels`, so their outputs are
//! bit-identical — tests assert this.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels;
use crate::rng::{fnv1a_update, FNV_OFFSET};
use crate::tensor::Tensor;
use crate::vocab;
use rand::Rng;
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub rope_theta: f64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_head: 32,
            d_ff: 512,
            vocab_size: 512,
            max_positions: 2048,
            rope_theta: 10000.0,
        }
    }

    /// Small enough for finite-difference sweeps over every parameter.
    pub fn test_tiny(n_layers: usize, d_model: usize, vocab_size: usize) -> Self {
        ModelConfig {
            n_layers,
            n_heads: 2,
            d_model,
            d_head: d_model / 2,
            d_ff: d_model * 2,
            vocab_size,
            max_positions: 256,
            rope_theta: 10000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.d_head % 2 != 0 {
            return Err(Error::Config(format!("d_head {} must be even for rotary pairs", self.d_head)));
        }
        let min_vocab = (vocab::BYTE_VOCAB + vocab::NUM_SPECIALS) as usize;
        if self.vocab_size < min_vocab {
            return Err(Error::Config(format!("vocab_size {} < {}", self.vocab_size, min_vocab)));
        }
        if [self.n_layers, self.n_heads, self.d_ff, self.max_positions].contains(&0) {
            return Err(Error::Config("zero-sized model extent".into()));
        }
        Ok(())
    }
}

/// Named weight tensors plus the set of names excluded from training.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.map.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    pub fn set_frozen(&mut self, names: BTreeSet<String>) {
        for n in &names {
            if let Some(t) = self.map.get_mut(n) {
                t.requires_grad = false;
            }
        }
        self.frozen = names;
    }

    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (name, t) in self.map.iter_mut() {
            if name.starts_with(prefix) {
                t.requires_grad = false;
                self.frozen.insert(name.clone());
            }
        }
    }

    /// Order-independent content hash over every tensor whose name starts
    /// with `prefix` (empty prefix covers the whole store).
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h = FNV_OFFSET;
        for (name, t) in &self.map {
            if !name.starts_with(prefix) {
                continue;
            }
            h = fnv1a_update(h, name.as_bytes());
            for &e in &t.shape {
                h = fnv1a_update(h, &(e as u64).to_le_bytes());
            }
            for &v in &t.data {
                h = fnv1a_update(h, &v.to_le_bytes());
            }
        }
        h
    }

    fn leaf(&self, g: &mut Graph, name: &str) -> Result<NodeId> {
        let t = self.require(name)?;
        g.leaf(t, Some(name))
    }
}

/// Low-rank adapter configuration. The weight pairs live in the store under
/// `encoder.lora.{layer}.{q|v}.{a|b}`; only query and value projections are
/// targeted.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn desk() -> Self {
        LoraAdapter { rank: 8, alpha: 32.0 }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn target_modules() -> [&'static str; 2] {
        ["q_proj", "v_proj"]
    }
}

pub const MEMORY_QUERIES: &str = "encoder.memory_queries";

fn uniform_init<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    let scale = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, scale, rng).with_grad()
}

/// Base transformer weights under the `decoder.` prefix. Both roles share
/// these tensors; nothing is frozen yet.
pub fn init_base<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let mut s = ParamStore::new();
    let d = cfg.d_model;
    s.insert("decoder.embed", uniform_init(vec![cfg.vocab_size, d], d, rng));
    for i in 0..cfg.n_layers {
        let p = format!("decoder.layers.{i}");
        s.insert(&format!("{p}.attn_norm"), Tensor::new(vec![d], vec![1.0; d])?.with_grad());
        s.insert(&format!("{p}.attn.wq"), uniform_init(vec![d, d], d, rng));
        s.insert(&format!("{p}.attn.wk"), uniform_init(vec![d, d], d, rng));
        s.insert(&format!("{p}.attn.wv"), uniform_init(vec![d, d], d, rng));
        s.insert(&format!("{p}.attn.wo"), uniform_init(vec![d, d], d, rng));
        s.insert(&format!("{p}.mlp_norm"), Tensor::new(vec![d], vec![1.0; d])?.with_grad());
        s.insert(&format!("{p}.mlp.w1"), uniform_init(vec![d, cfg.d_ff], d, rng));
        s.insert(&format!("{p}.mlp.w2"), uniform_init(vec![cfg.d_ff, d], cfg.d_ff, rng));
    }
    s.insert("decoder.final_norm", Tensor::new(vec![d], vec![1.0; d])?.with_grad());
    Ok(s)
}

/// Adds the encoder-side trainables: adapter pairs (B zero-initialized, so
/// the initial delta is exactly zero) and the memory-query table.
pub fn init_encoder<R: Rng>(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    lora: &LoraAdapter,
    max_memory_slots: usize,
    rng: &mut R,
) -> Result<()> {
    if lora.rank == 0 || max_memory_slots == 0 {
        return Err(Error::Config("lora rank and memory slots must be positive".into()));
    }
    let d = cfg.d_model;
    for i in 0..cfg.n_layers {
        for t in ["q", "v"] {
            store.insert(
                &format!("encoder.lora.{i}.{t}.a"),
                uniform_init(vec![d, lora.rank], d, rng),
            );
            store.insert(
                &format!("encoder.lora.{i}.{t}.b"),
                Tensor::zeros(vec![lora.rank, d]).with_grad(),
            );
        }
    }
    store.insert(MEMORY_QUERIES, uniform_init(vec![max_memory_slots, d], d, rng));
    Ok(())
}

/// Marks every base weight as untrainable. Encoder adapters and memory
/// queries are the only tensors left live.
pub fn freeze_decoder(store: &mut ParamStore) {
    store.freeze_prefix("decoder.");
}

// ---- graph forward ----

#[derive(Debug, Clone)]
pub enum SoftSrc {
    /// Differentiable span output living on the same graph.
    Node(NodeId),
    /// Detached vectors (cached spans); no gradient path exists.
    Data(Vec<f64>),
}

/// A run of memory-token slots starting at `start`, one row per slot.
#[derive(Debug, Clone)]
pub struct SoftBlock {
    pub start: usize,
    pub rows: usize,
    pub src: SoftSrc,
}

/// One assembled sequence: discrete token ids with `MEM_SENTINEL` marking
/// soft slots, soft rows for exactly those slots, and explicit per-slot
/// position ids (rotary phases follow these, not array indices).
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub token_ids: Vec<u32>,
    pub soft: Vec<SoftBlock>,
    pub position_ids: Vec<usize>,
}

impl SequenceBatch {
    pub fn discrete(ids: Vec<u32>, position_ids: Vec<usize>) -> Self {
        SequenceBatch { token_ids: ids, soft: Vec::new(), position_ids }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.token_ids.len() != self.position_ids.len() {
            return Err(Error::Shape(format!(
                "{} ids vs {} positions",
                self.token_ids.len(),
                self.position_ids.len()
            )));
        }
        if self.token_ids.is_empty() {
            return Err(Error::Shape("empty sequence".into()));
        }
        for w in self.position_ids.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Shape(format!("position ids not increasing: {} then {}", w[0], w[1])));
            }
        }
        if let Some(&last) = self.position_ids.last() {
            if last >= cfg.max_positions {
                return Err(Error::Budget { slots: last + 1, budget: cfg.max_positions });
            }
        }
        let mut covered = vec![false; self.token_ids.len()];
        for b in &self.soft {
            if b.rows == 0 || b.start + b.rows > self.token_ids.len() {
                return Err(Error::Shape(format!("soft block {}+{} out of range", b.start, b.rows)));
            }
            for s in b.start..b.start + b.rows {
                if covered[s] {
                    return Err(Error::Shape(format!("slot {s} covered by two soft blocks")));
                }
                covered[s] = true;
            }
        }
        for (i, &id) in self.token_ids.iter().enumerate() {
            if id == vocab::MEM_SENTINEL {
                if !covered[i] {
                    return Err(Error::Shape(format!("sentinel slot {i} has no soft embedding")));
                }
            } else {
                if covered[i] {
                    return Err(Error::Shape(format!("discrete slot {i} covered by a soft block")));
                }
                if id as usize >= cfg.vocab_size {
                    return Err(Error::Shape(format!("token id {id} out of vocab")));
                }
            }
        }
        Ok(())
    }
}

pub struct ForwardOut {
    /// Final-layer hidden states, before the head's normalization.
    pub hidden: NodeId,
    pub logits: Option<NodeId>,
}

struct LeafCache<'s> {
    store: &'s ParamStore,
    ids: BTreeMap<String, NodeId>,
}

impl<'s> LeafCache<'s> {
    fn get(&mut self, g: &mut Graph, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.ids.get(name) {
            return Ok(id);
        }
        let id = self.store.leaf(g, name)?;
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }
}

/// Records the full transformer on the tape. Soft rows replace token
/// embeddings before layer 0 and are rotated exactly like discrete tokens
/// at the same positions.
pub fn forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    adapter: Option<&LoraAdapter>,
    batch: &SequenceBatch,
    want_logits: bool,
) -> Result<ForwardOut> {
    batch.validate(cfg)?;
    let mut leaves = LeafCache { store, ids: BTreeMap::new() };
    let embed = leaves.get(g, "decoder.embed")?;

    // input rows: contiguous discrete runs gathered from the table, soft
    // blocks spliced in place
    let mut parts: Vec<NodeId> = Vec::new();
    let mut i = 0;
    let t_total = batch.token_ids.len();
    while i < t_total {
        if batch.token_ids[i] == vocab::MEM_SENTINEL {
            let block = batch
                .soft
                .iter()
                .find(|b| b.start == i)
                .ok_or_else(|| Error::Shape(format!("no soft block starting at slot {i}")))?;
            let node = match &block.src {
                SoftSrc::Node(n) => {
                    let (r, c) = g.shape(*n);
                    if r != block.rows || c != cfg.d_model {
                        return Err(Error::Shape(format!(
                            "soft node {}x{} for block of {} rows",
                            r, c, block.rows
                        )));
                    }
                    *n
                }
                SoftSrc::Data(data) => g.constant(data.clone(), block.rows, cfg.d_model)?,
            };
            parts.push(node);
            i += block.rows;
        } else {
            let start = i;
            while i < t_total && batch.token_ids[i] != vocab::MEM_SENTINEL {
                i += 1;
            }
            let ids: Vec<usize> = batch.token_ids[start..i].iter().map(|&x| x as usize).collect();
            parts.push(g.gather_rows(embed, &ids)?);
        }
    }
    let mut x = if parts.len() == 1 { parts[0] } else { g.concat_rows(parts)? };

    let dh = cfg.d_head;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    for layer in 0..cfg.n_layers {
        let p = format!("decoder.layers.{layer}");
        let attn_norm = leaves.get(g, &format!("{p}.attn_norm"))?;
        let wq = leaves.get(g, &format!("{p}.attn.wq"))?;
        let wk = leaves.get(g, &format!("{p}.attn.wk"))?;
        let wv = leaves.get(g, &format!("{p}.attn.wv"))?;
        let wo = leaves.get(g, &format!("{p}.attn.wo"))?;

        let n1 = g.rms_norm(x, attn_norm)?;
        let mut q = g.matmul(n1, wq)?;
        let mut v = g.matmul(n1, wv)?;
        let k = g.matmul(n1, wk)?;
        if let Some(lora) = adapter {
            for (target, base) in [("q", &mut q), ("v", &mut v)] {
                let a = leaves.get(g, &format!("encoder.lora.{layer}.{target}.a"))?;
                let b = leaves.get(g, &format!("encoder.lora.{layer}.{target}.b"))?;
                let xa = g.matmul(n1, a)?;
                let xab = g.matmul(xa, b)?;
                let delta = g.scale(xab, lora.scaling());
                *base = g.add(*base, delta)?;
            }
        }

        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let qh = g.rope(qh, &batch.position_ids, cfg.rope_theta)?;
            let kh = g.rope(kh, &batch.position_ids, cfg.rope_theta)?;
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, inv_sqrt);
            let probs = g.causal_softmax_rows(scores)?;
            heads.push(g.matmul(probs, vh)?);
        }
        let ctx = g.concat_cols(heads)?;
        let attn_out = g.matmul(ctx, wo)?;
        x = g.add(x, attn_out)?;

        let mlp_norm = leaves.get(g, &format!("{p}.mlp_norm"))?;
        let w1 = leaves.get(g, &format!("{p}.mlp.w1"))?;
        let w2 = leaves.get(g, &format!("{p}.mlp.w2"))?;
        let n2 = g.rms_norm(x, mlp_norm)?;
        let a1 = g.matmul(n2, w1)?;
        let a1 = g.silu(a1);
        let mlp_out = g.matmul(a1, w2)?;
        x = g.add(x, mlp_out)?;
    }

    let logits = if want_logits {
        let final_norm = leaves.get(g, "decoder.final_norm")?;
        let hn = g.rms_norm(x, final_norm)?;
        let et = g.transpose(embed);
        Some(g.matmul(hn, et)?)
    } else {
        None
    };
    Ok(ForwardOut { hidden: x, logits })
}

// ---- inference forward (KV-cached, tape-free) ----

struct LayerKv {
    /// Post-rotation keys, rows x d_model with heads packed in columns.
    k: Vec<f64>,
    v: Vec<f64>,
}

pub struct KvCache {
    layers: Vec<LayerKv>,
    rows: usize,
    last_position: usize,
}

impl KvCache {
    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// Resolves token ids to embedding rows; soft slots supply their own rows.
pub fn embed_rows(store: &ParamStore, cfg: &ModelConfig, batch: &SequenceBatch) -> Result<Vec<f64>> {
    batch.validate(cfg)?;
    let embed = store.require("decoder.embed")?;
    let d = cfg.d_model;
    let mut rows = vec![0.0; batch.len() * d];
    for (i, &id) in batch.token_ids.iter().enumerate() {
        if id != vocab::MEM_SENTINEL {
            let src = &embed.data[id as usize * d..(id as usize + 1) * d];
            rows[i * d..(i + 1) * d].copy_from_slice(src);
        }
    }
    for b in &batch.soft {
        let data = match &b.src {
            SoftSrc::Data(data) => data,
            SoftSrc::Node(_) => {
                return Err(Error::Shape("graph-attached soft block in inference path".into()))
            }
        };
        if data.len() != b.rows * d {
            return Err(Error::Shape(format!("soft data {} for {} rows", data.len(), b.rows)));
        }
        rows[b.start * d..(b.start + b.rows) * d].copy_from_slice(data);
    }
    Ok(rows)
}

fn lora_delta(
    store: &ParamStore,
    lora: &LoraAdapter,
    layer: usize,
    target: &str,
    n1: &[f64],
    t: usize,
    d: usize,
) -> Result<Vec<f64>> {
    let a = store.require(&format!("encoder.lora.{layer}.{target}.a"))?;
    let b = store.require(&format!("encoder.lora.{layer}.{target}.b"))?;
    let r = lora.rank;
    let xa = kernels::matmul(n1, &a.data, t, d, r);
    let mut xab = kernels::matmul(&xa, &b.data, t, r, d);
    let s = lora.scaling();
    for v in xab.iter_mut() {
        *v *= s;
    }
    Ok(xab)
}

pub struct PrefillOut {
    /// Logits for every input row, T x V.
    pub logits: Vec<f64>,
    /// Final-layer hidden states (pre-head-norm), T x D.
    pub hidden: Vec<f64>,
}

/// Runs the whole sequence through the model, filling the cache. Arithmetic
/// matches the graph forward exactly: same kernels, same summation order.
pub fn prefill(
    store: &ParamStore,
    cfg: &ModelConfig,
    adapter: Option<&LoraAdapter>,
    rows: &[f64],
    positions: &[usize],
) -> Result<(KvCache, PrefillOut)> {
    let d = cfg.d_model;
    let t_total = positions.len();
    if rows.len() != t_total * d || t_total == 0 {
        return Err(Error::Shape(format!("{} row values for {} positions", rows.len(), t_total)));
    }
    if let Some(&last) = positions.last() {
        if last >= cfg.max_positions {
            return Err(Error::Budget { slots: last + 1, budget: cfg.max_positions });
        }
    }
    let dh = cfg.d_head;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut x = rows.to_vec();
    let mut cache = KvCache { layers: Vec::with_capacity(cfg.n_layers), rows: t_total, last_position: *positions.last().unwrap() };

    let mut n1 = vec![0.0; t_total * d];
    for layer in 0..cfg.n_layers {
        let p = format!("decoder.layers.{layer}");
        let attn_norm = store.require(&format!("{p}.attn_norm"))?;
        for i in 0..t_total {
            kernels::rms_norm_row(&x[i * d..(i + 1) * d], &attn_norm.data, crate::graph::RMS_EPS, &mut n1[i * d..(i + 1) * d]);
        }
        let wq = store.require(&format!("{p}.attn.wq"))?;
        let wk = store.require(&format!("{p}.attn.wk"))?;
        let wv = store.require(&format!("{p}.attn.wv"))?;
        let wo = store.require(&format!("{p}.attn.wo"))?;
        let mut q = kernels::matmul(&n1, &wq.data, t_total, d, d);
        let k = kernels::matmul(&n1, &wk.data, t_total, d, d);
        let mut v = kernels::matmul(&n1, &wv.data, t_total, d, d);
        if let Some(lora) = adapter {
            let dq = lora_delta(store, lora, layer, "q", &n1, t_total, d)?;
            for (qi, di) in q.iter_mut().zip(&dq) {
                *qi += di;
            }
            let dv = lora_delta(store, lora, layer, "v", &n1, t_total, d)?;
            for (vi, di) in v.iter_mut().zip(&dv) {
                *vi += di;
            }
        }
        // rotate q and k per head at their absolute positions
        let mut k_rot = k;
        for i in 0..t_total {
            for h in 0..cfg.n_heads {
                kernels::rope_row(&mut q[i * d + h * dh..i * d + (h + 1) * dh], positions[i], cfg.rope_theta);
                kernels::rope_row(&mut k_rot[i * d + h * dh..i * d + (h + 1) * dh], positions[i], cfg.rope_theta);
            }
        }
        // causal attention; scores row i covers keys 0..=i
        let mut ctx = vec![0.0; t_total * d];
        let mut scores = vec![0.0; t_total];
        for h in 0..cfg.n_heads {
            let off = h * dh;
            for i in 0..t_total {
                let qrow = &q[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    scores[j] = kernels::dot(qrow, &k_rot[j * d + off..j * d + off + dh]) * inv_sqrt;
                }
                kernels::softmax_row(&mut scores[..=i]);
                let crow = &mut ctx[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    kernels::axpy(crow, scores[j], &v[j * d + off..j * d + off + dh]);
                }
            }
        }
        let attn_out = kernels::matmul(&ctx, &wo.data, t_total, d, d);
        for (xi, ai) in x.iter_mut().zip(&attn_out) {
            *xi += ai;
        }

        let mlp_norm = store.require(&format!("{p}.mlp_norm"))?;
        let w1 = store.require(&format!("{p}.mlp.w1"))?;
        let w2 = store.require(&format!("{p}.mlp.w2"))?;
        let mut n2 = vec![0.0; t_total * d];
        for i in 0..t_total {
            kernels::rms_norm_row(&x[i * d..(i + 1) * d], &mlp_norm.data, crate::graph::RMS_EPS, &mut n2[i * d..(i + 1) * d]);
        }
        let mut a1 = kernels::matmul(&n2, &w1.data, t_total, d, cfg.d_ff);
        for vi in a1.iter_mut() {
            *vi = kernels::silu(*vi);
        }
        let mlp_out = kernels::matmul(&a1, &w2.data, t_total, cfg.d_ff, d);
        for (xi, mi) in x.iter_mut().zip(&mlp_out) {
            *xi += mi;
        }
        cache.layers.push(LayerKv { k: k_rot, v });
    }

    let logits = head_logits(store, cfg, &x, t_total)?;
    Ok((cache, PrefillOut { logits, hidden: x }))
}

fn head_logits(store: &ParamStore, cfg: &ModelConfig, hidden: &[f64], t: usize) -> Result<Vec<f64>> {
    let d = cfg.d_model;
    let vsz = cfg.vocab_size;
    let final_norm = store.require("decoder.final_norm")?;
    let embed = store.require("decoder.embed")?;
    let mut logits = vec![0.0; t * vsz];
    let mut hn = vec![0.0; d];
    for i in 0..t {
        kernels::rms_norm_row(&hidden[i * d..(i + 1) * d], &final_norm.data, crate::graph::RMS_EPS, &mut hn);
        let out = &mut logits[i * vsz..(i + 1) * vsz];
        for vtok in 0..vsz {
            out[vtok] = kernels::dot(&hn, &embed.data[vtok * d..(vtok + 1) * d]);
        }
    }
    Ok(logits)
}

/// Extends the cache by one row and returns that row's logits.
pub fn infer_step(
    store: &ParamStore,
    cfg: &ModelConfig,
    adapter: Option<&LoraAdapter>,
    cache: &mut KvCache,
    row: &[f64],
    position: usize,
) -> Result<Vec<f64>> {
    let d = cfg.d_model;
    if row.len() != d {
        return Err(Error::Shape(format!("step row of {} values", row.len())));
    }
    if position >= cfg.max_positions {
        return Err(Error::Budget { slots: position + 1, budget: cfg.max_positions });
    }
    if position <= cache.last_position {
        return Err(Error::Shape(format!(
            "step position {} not after cached position {}",
            position, cache.last_position
        )));
    }
    let dh = cfg.d_head;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let t_new = cache.rows; // index of the appended row
    let mut x = row.to_vec();
    let mut n1 = vec![0.0; d];
    for layer in 0..cfg.n_layers {
        let p = format!("decoder.layers.{layer}");
        let attn_norm = store.require(&format!("{p}.attn_norm"))?;
        kernels::rms_norm_row(&x, &attn_norm.data, crate::graph::RMS_EPS, &mut n1);
        let wq = store.require(&format!("{p}.attn.wq"))?;
        let wk = store.require(&format!("{p}.attn.wk"))?;
        let wv = store.require(&format!("{p}.attn.wv"))?;
        let wo = store.require(&format!("{p}.attn.wo"))?;
        let mut q = kernels::matmul(&n1, &wq.data, 1, d, d);
        let mut k = kernels::matmul(&n1, &wk.data, 1, d, d);
        let mut v = kernels::matmul(&n1, &wv.data, 1, d, d);
        if let Some(lora) = adapter {
            let dq = lora_delta(store, lora, layer, "q", &n1, 1, d)?;
            for (qi, di) in q.iter_mut().zip(&dq) {
                *qi += di;
            }
            let dv = lora_delta(store, lora, layer, "v", &n1, 1, d)?;
            for (vi, di) in v.iter_mut().zip(&dv) {
                *vi += di;
            }
        }
        for h in 0..cfg.n_heads {
            kernels::rope_row(&mut q[h * dh..(h + 1) * dh], position, cfg.rope_theta);
            kernels::rope_row(&mut k[h * dh..(h + 1) * dh], position, cfg.rope_theta);
        }
        let kv = &mut cache.layers[layer];
        kv.k.extend_from_slice(&k);
        kv.v.extend_from_slice(&v);

        let mut ctx = vec![0.0; d];
        let mut scores = vec![0.0; t_new + 1];
        for h in 0..cfg.n_heads {
            let off = h * dh;
            let qrow = &q[off..off + dh];
            for j in 0..=t_new {
                scores[j] = kernels::dot(qrow, &kv.k[j * d + off..j * d + off + dh]) * inv_sqrt;
            }
            kernels::softmax_row(&mut scores[..=t_new]);
            let crow = &mut ctx[off..off + dh];
            for j in 0..=t_new {
                kernels::axpy(crow, scores[j], &kv.v[j * d + off..j * d + off + dh]);
            }
        }
        let attn_out = kernels::matmul(&ctx, &wo.data, 1, d, d);
        for (xi, ai) in x.iter_mut().zip(&attn_out) {
            *xi += ai;
        }

        let mlp_norm = store.require(&format!("{p}.mlp_norm"))?;
        let w1 = store.require(&format!("{p}.mlp.w1"))?;
        let w2 = store.require(&format!("{p}.mlp.w2"))?;
        let mut n2 = vec![0.0; d];
        kernels::rms_norm_row(&x, &mlp_norm.data, crate::graph::RMS_EPS, &mut n2);
        let mut a1 = kernels::matmul(&n2, &w1.data, 1, d, cfg.d_ff);
        for vi in a1.iter_mut() {
            *vi = kernels::silu(*vi);
        }
        let mlp_out = kernels::matmul(&a1, &w2.data, 1, cfg.d_ff, d);
        for (xi, mi) in x.iter_mut().zip(&mlp_out) {
            *xi += mi;
        }
    }
    cache.rows += 1;
    cache.last_position = position;
    head_logits(store, cfg, &x, 1)
}

/// Lowest id wins ties, so generation is a total function of the logits.
pub fn argmax(logits: &[f64]) -> u32 {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best as u32
}

/// Greedy continuation after a prefilled prefix. Generated tokens occupy
/// consecutive positions after the prefix; stops at `stop`, `max_new`, or
/// the position ceiling, whichever comes first.
pub fn generate_greedy(
    store: &ParamStore,
    cfg: &ModelConfig,
    adapter: Option<&LoraAdapter>,
    prefix_rows: &[f64],
    positions: &[usize],
    max_new: usize,
    stop: Option<u32>,
) -> Result<Vec<u32>> {
    let embed = store.require("decoder.embed")?;
    let d = cfg.d_model;
    let (mut cache, out) = prefill(store, cfg, adapter, prefix_rows, positions)?;
    let mut logits_row = out.logits[(cache.rows - 1) * cfg.vocab_size..].to_vec();
    let mut generated = Vec::new();
    let mut position = cache.last_position;
    for _ in 0..max_new {
        let next = argmax(&logits_row);
        generated.push(next);
        if Some(next) == stop {
            break;
        }
        position += 1;
        if position >= cfg.max_positions {
            break;
        }
        let row = embed.data[next as usize * d..(next as usize + 1) * d].to_vec();
        logits_row = infer_step(store, cfg, adapter, &mut cache, &row, position)?;
    }
    Ok(generated)
}

/// Reference generation that re-runs the whole prefix each token instead of
/// using the cache. Exists to pin the cache path: outputs must be
/// bit-identical.
pub fn generate_greedy_reforward(
    store: &ParamStore,
    cfg: &ModelConfig,
    adapter: Option<&LoraAdapter>,
    prefix_rows: &[f64],
    positions: &[usize],
    max_new: usize,
    stop: Option<u32>,
) -> Result<Vec<u32>> {
    let embed = store.require("decoder.embed")?;
    let d = cfg.d_model;
    let mut rows = prefix_rows.to_vec();
    let mut pos = positions.to_vec();
    let mut generated = Vec::new();
    for _ in 0..max_new {
        let (_, out) = prefill(store, cfg, adapter, &rows, &pos)?;
        let last = &out.logits[(pos.len() - 1) * cfg.vocab_size..];
        let next = argmax(last);
        generated.push(next);
        if Some(next) == stop {
            break;
        }
        let next_pos = pos.last().unwrap() + 1;
        if next_pos >= cfg.max_positions {
            break;
        }
        rows.extend_from_slice(&embed.data[next as usize * d..(next as usize + 1) * d]);
        pos.push(next_pos);
    }
    Ok(generated)
}

// ---- base pretraining ----

/// Next-token training of the base model on a token stream; every weight is
/// trainable here. Returns the per-step losses.
pub fn pretrain_base<R: Rng>(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    corpus: &[u32],
    window: usize,
    steps: usize,
    opt: &mut crate::optim::AdamW,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if corpus.len() < window + 1 {
        return Err(Error::Config(format!(
            "corpus of {} tokens is smaller than window {}",
            corpus.len(),
            window
        )));
    }
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let start = rng.gen_range(0..corpus.len() - window);
        let ids = &corpus[start..start + window + 1];
        let loss = lm_step(store, cfg, ids, opt)?;
        losses.push(loss);
    }
    Ok(losses)
}

fn lm_step(store: &mut ParamStore, cfg: &ModelConfig, ids: &[u32], opt: &mut crate::optim::AdamW) -> Result<f64> {
    let t = ids.len() - 1;
    let batch = SequenceBatch::discrete(ids[..t].to_vec(), (0..t).collect());
    let mut g = Graph::new();
    let out = forward(&mut g, store, cfg, None, &batch, true)?;
    let targets: Vec<usize> = ids[1..].iter().map(|&x| x as usize).collect();
    let mask = vec![true; t];
    let loss = g.cross_entropy(out.logits.unwrap(), &targets, &mask)?;
    let loss_v = g.scalar_value(loss);
    let grads = g.backward(loss)?;
    opt.step(store, &grads.by_name)?;
    Ok(loss_v)
}
