//! Tokenization, dataset builders, and persistence: checkpoints, run
//! configs, QA files.

use crate::error::{Error, Result};
use crate::icae::{sample_objective, Objective, PretrainSample};
use crate::model::{LoraAdapter, ModelConfig, ParamStore};
use crate::rng::{fnv1a, fnv1a_update, FNV_OFFSET};
use crate::tensor::Tensor;
use crate::vocab;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

// ---- tokenizer ----

/// Byte-level tokenizer: ids 0..=255 are raw bytes, specials live above
/// them, and an optional merge table (off by default) packs frequent byte
/// pairs. Encoding plain text never yields special ids.
#[derive(Debug, Clone, Default)]
pub struct Tokenizer {
    /// merge i maps the id pair to id FIRST_MERGE_ID + i.
    merges: Vec<(u32, u32)>,
}

impl Tokenizer {
    pub fn byte_level() -> Self {
        Tokenizer { merges: Vec::new() }
    }

    pub fn with_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        for (i, &(l, r)) in merges.iter().enumerate() {
            let limit = vocab::FIRST_MERGE_ID + i as u32;
            let valid = |id: u32| id < vocab::BYTE_VOCAB || (vocab::FIRST_MERGE_ID..limit).contains(&id);
            if !valid(l) || !valid(r) {
                return Err(Error::Config(format!("merge {i} references invalid ids ({l},{r})")));
            }
        }
        Ok(Tokenizer { merges })
    }

    pub fn vocab_used(&self) -> u32 {
        vocab::FIRST_MERGE_ID + self.merges.len() as u32
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        let mut ids: Vec<u32> = bytes.iter().map(|&b| b as u32).collect();
        for (i, &(l, r)) in self.merges.iter().enumerate() {
            let merged = vocab::FIRST_MERGE_ID + i as u32;
            let mut out = Vec::with_capacity(ids.len());
            let mut j = 0;
            while j < ids.len() {
                if j + 1 < ids.len() && ids[j] == l && ids[j + 1] == r {
                    out.push(merged);
                    j += 2;
                } else {
                    out.push(ids[j]);
                    j += 1;
                }
            }
            ids = out;
        }
        ids
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn token_len(&self, text: &str) -> usize {
        self.encode(text).len()
    }

    fn expand_into(&self, id: u32, out: &mut Vec<u8>) -> Result<()> {
        if id < vocab::BYTE_VOCAB {
            out.push(id as u8);
            return Ok(());
        }
        if vocab::is_special(id) {
            return Err(Error::Decode(format!("special token {id} in byte stream")));
        }
        let idx = (id - vocab::FIRST_MERGE_ID) as usize;
        match self.merges.get(idx) {
            Some(&(l, r)) => {
                self.expand_into(l, out)?;
                self.expand_into(r, out)
            }
            None => Err(Error::Decode(format!("unassigned token id {id}"))),
        }
    }

    /// Exact inverse of `encode_bytes`; rejects special and unassigned ids.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            self.expand_into(id, &mut out)?;
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        String::from_utf8(self.decode_bytes(ids)?)
            .map_err(|e| Error::Decode(format!("invalid utf-8 in decoded bytes: {e}")))
    }

    /// Lossy rendering for reports: specials become glyphs, bytes become
    /// text with U+FFFD for broken sequences.
    pub fn decode_display(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut pending: Vec<u8> = Vec::new();
        let flush = |pending: &mut Vec<u8>, out: &mut String| {
            if !pending.is_empty() {
                out.push_str(&String::from_utf8_lossy(pending));
                pending.clear();
            }
        };
        for &id in ids {
            if let Some(glyph) = vocab::special_glyph(id) {
                flush(&mut pending, &mut out);
                out.push_str(glyph);
            } else if self.expand_into(id, &mut pending).is_err() {
                flush(&mut pending, &mut out);
                out.push('\u{fffd}');
            }
        }
        flush(&mut pending, &mut out);
        out
    }
}

// ---- dataset builders ----

/// Non-overlapping W-token windows over the corpus; each window becomes an
/// AE sample (target == input) or an LM sample (first 3/4 compressed, last
/// 1/4 continued) per the 50/50 draw.
pub fn build_pretrain_chunks<R: Rng>(
    corpus: &[u32],
    window: usize,
    rng: &mut R,
) -> Result<Vec<PretrainSample>> {
    if window < 4 {
        return Err(Error::Config(format!("window {window} too small to split")));
    }
    if corpus.len() < window {
        return Err(Error::Config(format!(
            "corpus of {} tokens has no {}-token window",
            corpus.len(),
            window
        )));
    }
    let mut out = Vec::with_capacity(corpus.len() / window);
    for chunk in corpus.chunks_exact(window) {
        let sample = match sample_objective(rng) {
            Objective::Ae => PretrainSample {
                input: chunk.to_vec(),
                objective: Objective::Ae,
                target: chunk.to_vec(),
            },
            Objective::Lm => {
                let split = window * 3 / 4;
                PretrainSample {
                    input: chunk[..split].to_vec(),
                    objective: Objective::Lm,
                    target: chunk[split..].to_vec(),
                }
            }
        };
        sample.validate()?;
        out.push(sample);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QASample {
    pub context: String,
    pub question: String,
    pub answer: String,
}

impl QASample {
    pub fn validate(&self) -> Result<()> {
        if self.context.is_empty() || self.question.is_empty() || self.answer.is_empty() {
            return Err(Error::Config("QA sample with an empty field".into()));
        }
        Ok(())
    }
}

/// Line-delimited JSON records with context/question/answer fields.
pub fn build_qa_set(text: &str) -> Result<Vec<QASample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample: QASample = serde_json::from_str(line)
            .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        sample
            .validate()
            .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        out.push(sample);
    }
    if out.is_empty() {
        return Err(Error::Config("QA file holds no records".into()));
    }
    Ok(out)
}

pub fn load_qa_file(path: &Path) -> Result<Vec<QASample>> {
    build_qa_set(&std::fs::read_to_string(path)?)
}

/// Reads a corpus file or every *.txt in a directory, in name order.
pub fn load_corpus_text(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut names: Vec<_> = std::fs::read_dir(path)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.extension().map(|e| e == "txt").unwrap_or(false))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(Error::Config(format!("no .txt files under {}", path.display())));
        }
        let mut text = String::new();
        for n in names {
            text.push_str(&std::fs::read_to_string(n)?);
            text.push('\n');
        }
        Ok(text)
    } else {
        Ok(std::fs::read_to_string(path)?)
    }
}

// ---- checkpoint persistence ----

const CKPT_MAGIC: &[u8; 4] = b"ICAE";
const CKPT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

/// Tensor table plus the frozen-name manifest, with a trailing checksum of
/// everything before it. Byte-exact across save/load/save.
pub fn save_checkpoint<W: Write>(w: &mut W, store: &ParamStore) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let names: Vec<&str> = store.names().collect();
    buf.extend_from_slice(&(names.len() as u32).to_le_bytes());
    for name in &names {
        let t = store.require(name)?;
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F64);
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &e in &t.shape {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let frozen: Vec<&str> = store.frozen_names().collect();
    buf.extend_from_slice(&(frozen.len() as u32).to_le_bytes());
    for name in frozen {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
    }
    buf.extend_from_slice(&fnv1a(&buf).to_le_bytes());
    w.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint<R: Read>(r: &mut R) -> Result<ParamStore> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 12 {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > body.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &body[*at..*at + n];
        *at += n;
        Ok(s)
    };
    let take_u32 = |at: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(at, 4)?.try_into().unwrap()))
    };
    if take(&mut at, 4)? != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = take_u32(&mut at)?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n_tensors = take_u32(&mut at)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n_tensors {
        let name_len = take_u32(&mut at)? as usize;
        let name = String::from_utf8(take(&mut at, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("bad tensor name".into()))?;
        let dtype = take(&mut at, 1)?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!("unknown dtype tag {dtype}")));
        }
        let rank = take_u32(&mut at)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut at, numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(&name, Tensor::new(shape, data)?.with_grad());
    }
    let n_frozen = take_u32(&mut at)? as usize;
    let mut frozen = BTreeSet::new();
    for _ in 0..n_frozen {
        let name_len = take_u32(&mut at)? as usize;
        let name = String::from_utf8(take(&mut at, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("bad frozen name".into()))?;
        frozen.insert(name);
    }
    if at != body.len() {
        return Err(Error::Checkpoint("trailing bytes after manifest".into()));
    }
    store.set_frozen(frozen);
    Ok(store)
}

pub fn save_checkpoint_file(path: &Path, store: &ParamStore) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    save_checkpoint(&mut f, store)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint_file(path: &Path) -> Result<ParamStore> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    load_checkpoint(&mut f)
}

/// Content hash of a checkpoint as stored on disk.
pub fn checkpoint_file_hash(path: &Path) -> Result<u64> {
    let bytes = std::fs::read(path)?;
    Ok(fnv1a(&bytes))
}

// ---- run configuration ----

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseConfig {
    pub steps: usize,
    pub lr: f64,
    pub grad_accum: usize,
    pub warmup: usize,
    pub window: usize,
    pub log_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub kind: String,
    pub tau: usize,
    pub last_k: usize,
    pub pct: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutConfig {
    pub budget: usize,
    pub max_new: usize,
    pub obs_pad: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub runs: usize,
    pub tasks: usize,
    pub depth_max: usize,
}

/// Every knob of the pipeline, parsed from sectioned `key = value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lora: LoraAdapter,
    pub rho: usize,
    pub max_memory_slots: usize,
    pub base: PhaseConfig,
    pub pretrain: PhaseConfig,
    pub finetune: PhaseConfig,
    pub policy: PolicyConfig,
    pub rollout: RolloutConfig,
    pub eval: EvalConfig,
    pub corpus_path: String,
    pub qa_path: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            lora: LoraAdapter::desk(),
            rho: 4,
            max_memory_slots: 256,
            base: PhaseConfig { steps: 300, lr: 3e-4, grad_accum: 1, warmup: 30, window: 128, log_every: 50 },
            pretrain: PhaseConfig { steps: 1000, lr: 1e-4, grad_accum: 8, warmup: 300, window: 128, log_every: 50 },
            finetune: PhaseConfig { steps: 500, lr: 5e-5, grad_accum: 1, warmup: 300, window: 128, log_every: 50 },
            policy: PolicyConfig { kind: "threshold".into(), tau: 256, last_k: 2, pct: 50 },
            rollout: RolloutConfig { budget: 1600, max_new: 48, obs_pad: 400 },
            eval: EvalConfig { runs: 5, tasks: 4, depth_max: 4 },
            corpus_path: "fixtures/corpus.txt".into(),
            qa_path: "fixtures/qa_small.jsonl".into(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.rho == 0 {
            return Err(Error::Config("rho must be at least 1".into()));
        }
        if self.lora.rank == 0 {
            return Err(Error::Config("lora rank must be at least 1".into()));
        }
        if self.max_memory_slots == 0 {
            return Err(Error::Config("max_memory_slots must be at least 1".into()));
        }
        if !matches!(self.policy.kind.as_str(), "none" | "threshold" | "last_k" | "random_pct") {
            return Err(Error::Config(format!("unknown policy kind {}", self.policy.kind)));
        }
        if self.policy.pct > 100 {
            return Err(Error::Config(format!("policy pct {} out of range", self.policy.pct)));
        }
        if self.policy.tau == 0 {
            return Err(Error::Config("policy tau must be at least 1".into()));
        }
        for (phase, p) in [("base", &self.base), ("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if p.grad_accum == 0 || p.window < 4 || p.log_every == 0 {
                return Err(Error::Config(format!("invalid {phase} phase settings")));
            }
            if !(p.lr > 0.0 && p.lr.is_finite()) {
                return Err(Error::Config(format!("invalid {phase} learning rate {}", p.lr)));
            }
        }
        if self.eval.runs == 0 || self.eval.tasks == 0 || self.eval.depth_max == 0 {
            return Err(Error::Config("eval settings must be positive".into()));
        }
        if self.rollout.budget == 0 || self.rollout.max_new == 0 {
            return Err(Error::Config("rollout settings must be positive".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') {
                    return Err(Error::Parse { line: line_no, msg: format!("malformed section header {line}") });
                }
                section = line[1..line.len() - 1].trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("expected key = value, got {line}"),
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(&section, key, value)
                .map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_file(path: &Path) -> Result<RunConfig> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        fn int(v: &str) -> Result<usize> {
            v.parse().map_err(|_| Error::Config(format!("expected integer, got {v}")))
        }
        fn float(v: &str) -> Result<f64> {
            v.parse().map_err(|_| Error::Config(format!("expected number, got {v}")))
        }
        let unknown = || Error::Config(format!("unknown key {key} in section [{section}]"));
        match section {
            "model" => match key {
                "n_layers" => self.model.n_layers = int(value)?,
                "n_heads" => self.model.n_heads = int(value)?,
                "d_model" => self.model.d_model = int(value)?,
                "d_head" => self.model.d_head = int(value)?,
                "d_ff" => self.model.d_ff = int(value)?,
                "vocab_size" => self.model.vocab_size = int(value)?,
                "max_positions" => self.model.max_positions = int(value)?,
                "rope_theta" => self.model.rope_theta = float(value)?,
                _ => return Err(unknown()),
            },
            "lora" => match key {
                "rank" => self.lora.rank = int(value)?,
                "alpha" => self.lora.alpha = float(value)?,
                _ => return Err(unknown()),
            },
            "compress" => match key {
                "rho" => self.rho = int(value)?,
                "max_memory_slots" => self.max_memory_slots = int(value)?,
                _ => return Err(unknown()),
            },
            "base" | "pretrain" | "finetune" => {
                let phase = match section {
                    "base" => &mut self.base,
                    "pretrain" => &mut self.pretrain,
                    _ => &mut self.finetune,
                };
                match key {
                    "steps" => phase.steps = int(value)?,
                    "lr" => phase.lr = float(value)?,
                    "grad_accum" => phase.grad_accum = int(value)?,
                    "warmup" => phase.warmup = int(value)?,
                    "window" => phase.window = int(value)?,
                    "log_every" => phase.log_every = int(value)?,
                    _ => return Err(unknown()),
                }
            }
            "policy" => match key {
                "kind" => self.policy.kind = value.to_string(),
                "tau" => self.policy.tau = int(value)?,
                "last_k" => self.policy.last_k = int(value)?,
                "pct" => self.policy.pct = int(value)? as u32,
                _ => return Err(unknown()),
            },
            "rollout" => match key {
                "budget" => self.rollout.budget = int(value)?,
                "max_new" => self.rollout.max_new = int(value)?,
                "obs_pad" => self.rollout.obs_pad = int(value)?,
                _ => return Err(unknown()),
            },
            "eval" => match key {
                "runs" => self.eval.runs = int(value)?,
                "tasks" => self.eval.tasks = int(value)?,
                "depth_max" => self.eval.depth_max = int(value)?,
                _ => return Err(unknown()),
            },
            "data" => match key {
                "corpus" => self.corpus_path = value.to_string(),
                "qa" => self.qa_path = value.to_string(),
                _ => return Err(unknown()),
            },
            "" => return Err(Error::Config(format!("key {key} outside any section"))),
            _ => return Err(Error::Config(format!("unknown section [{section}]"))),
        }
        Ok(())
    }

    /// Canonical rendering; parse(render(c)) == c, used by run manifests.
    pub fn render(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        s.push_str(&format!(
            "[model]\nn_layers = {}\nn_heads = {}\nd_model = {}\nd_head = {}\nd_ff = {}\nvocab_size = {}\nmax_positions = {}\nrope_theta = {}\n\n",
            m.n_layers, m.n_heads, m.d_model, m.d_head, m.d_ff, m.vocab_size, m.max_positions, m.rope_theta
        ));
        s.push_str(&format!("[lora]\nrank = {}\nalpha = {}\n\n", self.lora.rank, self.lora.alpha));
        s.push_str(&format!(
            "[compress]\nrho = {}\nmax_memory_slots = {}\n\n",
            self.rho, self.max_memory_slots
        ));
        for (name, p) in [("base", &self.base), ("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            s.push_str(&format!(
                "[{}]\nsteps = {}\nlr = {}\ngrad_accum = {}\nwarmup = {}\nwindow = {}\nlog_every = {}\n\n",
                name, p.steps, p.lr, p.grad_accum, p.warmup, p.window, p.log_every
            ));
        }
        s.push_str(&format!(
            "[policy]\nkind = {}\ntau = {}\nlast_k = {}\npct = {}\n\n",
            self.policy.kind, self.policy.tau, self.policy.last_k, self.policy.pct
        ));
        s.push_str(&format!(
            "[rollout]\nbudget = {}\nmax_new = {}\nobs_pad = {}\n\n",
            self.rollout.budget, self.rollout.max_new, self.rollout.obs_pad
        ));
        s.push_str(&format!(
            "[eval]\nruns = {}\ntasks = {}\ndepth_max = {}\n\n",
            self.eval.runs, self.eval.tasks, self.eval.depth_max
        ));
        s.push_str(&format!("[data]\ncorpus = {}\nqa = {}\n", self.corpus_path, self.qa_path));
        s
    }

    pub fn content_hash(&self) -> u64 {
        let mut h = FNV_OFFSET;
        h = fnv1a_update(h, self.render().as_bytes());
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn tokenizer_round_trips_bytes() {
        let t = Tokenizer::byte_level();
        let cases: [&[u8]; 4] = [b"", b"hello world", b"\x00\xff\xfe binary", "ünïcødé".as_bytes()];
        for c in cases {
            assert_eq!(t.decode_bytes(&t.encode_bytes(c)).unwrap(), c);
        }
        assert_eq!(t.encode(""), Vec::<u32>::new());
        assert_eq!(t.decode(&[]).unwrap(), "");
    }

    #[test]
    fn merges_round_trip_and_shrink() {
        // 'th' then 'the' ('th'+'e')
        let th = vocab::FIRST_MERGE_ID;
        let t = Tokenizer::with_merges(vec![(b't' as u32, b'h' as u32), (th, b'e' as u32)]).unwrap();
        let ids = t.encode("the theme that");
        assert!(ids.len() < "the theme that".len());
        assert!(ids.contains(&(th + 1)));
        assert_eq!(t.decode(&ids).unwrap(), "the theme that");
    }

    #[test]
    fn specials_never_decode_as_bytes() {
        let t = Tokenizer::byte_level();
        assert!(t.decode_bytes(&[vocab::AE]).is_err());
        assert!(t.decode_bytes(&[999]).is_err());
        assert_eq!(t.decode_display(&[vocab::AE, b'x' as u32]), "⟨AE⟩x");
    }

    #[test]
    fn pretrain_chunks_cover_and_split() {
        let corpus: Vec<u32> = (0..1000u32).map(|i| i % 200).collect();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(5);
        let samples = build_pretrain_chunks(&corpus, 100, &mut rng).unwrap();
        assert_eq!(samples.len(), 10);
        for s in &samples {
            match s.objective {
                Objective::Ae => assert_eq!(s.input, s.target),
                Objective::Lm => {
                    assert_eq!(s.input.len(), 75);
                    assert_eq!(s.target.len(), 25);
                }
            }
        }
        let mut rng2 = rand_chacha::ChaCha20Rng::seed_from_u64(5);
        let again = build_pretrain_chunks(&corpus, 100, &mut rng2).unwrap();
        assert_eq!(samples.len(), again.len());
        assert!(samples.iter().zip(&again).all(|(a, b)| a.input == b.input && a.objective == b.objective));
    }

    #[test]
    fn qa_parsing_reports_line_numbers() {
        let good = r#"{"context":"c","question":"q","answer":"a"}
{"context":"c2","question":"q2","answer":"a2"}"#;
        assert_eq!(build_qa_set(good).unwrap().len(), 2);

        let missing = "{\"context\":\"c\",\"question\":\"q\",\"answer\":\"a\"}\n{\"context\":\"c\",\"question\":\"q\"}";
        match build_qa_set(missing) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = RunConfig::default();
        let parsed = RunConfig::parse(&cfg.render()).unwrap();
        assert_eq!(parsed, cfg);

        let bad = "[model]\nn_layers = 2\nwat = 3\n";
        match RunConfig::parse(bad) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("wat"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }

        assert!(RunConfig::parse("[nope]\nx = 1\n").is_err());
        assert!(RunConfig::parse("x = 1\n").is_err());
        assert!(RunConfig::parse("[model]\nn_layers\n").is_err());
    }
}
