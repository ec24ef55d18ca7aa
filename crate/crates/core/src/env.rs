//! Deterministic tool environments: a tiny in-memory file world, a strict
//! single-line action grammar, seeded task generators with ground-truth
//! expert trajectories, and the policy-crossing sweep driver.

use crate::agentic::{
    self, ActionSource, CompressionPolicy, Env, ModelActor, Outcome, Role, RolloutOptions,
    ScriptedActor, Trajectory,
};
use crate::data::Tokenizer;
use crate::error::{Error, Result};
use crate::model::{LoraAdapter, ModelConfig, ParamStore};
use crate::rng::{index_hash, seed_stream};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

pub const ACCESS_DENIED: &str = "You have no access to this directory.";

// ---- action grammar ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditorCmd {
    View,
    Create,
    StrReplace,
    Insert,
    UndoEdit,
}

impl EditorCmd {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "view" => EditorCmd::View,
            "create" => EditorCmd::Create,
            "str_replace" => EditorCmd::StrReplace,
            "insert" => EditorCmd::Insert,
            "undo_edit" => EditorCmd::UndoEdit,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            EditorCmd::View => "view",
            EditorCmd::Create => "create",
            EditorCmd::StrReplace => "str_replace",
            EditorCmd::Insert => "insert",
            EditorCmd::UndoEdit => "undo_edit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ToolCall {
    Bash { cmd: String },
    Submit { payload: String },
    Editor { command: EditorCmd, path: String, old: String, new: String, line: usize, text: String },
}

/// Splits a flag tail into words. Double quotes group; \" \\ \n \t escape
/// inside them.
fn split_args(s: &str) -> std::result::Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut chars = s.chars().peekable();
    let mut in_word = false;
    while let Some(c) = chars.next() {
        match c {
            ' ' if in_word => {
                out.push(std::mem::take(&mut cur));
                in_word = false;
            }
            ' ' => {}
            '"' => {
                in_word = true;
                loop {
                    match chars.next() {
                        None => return Err("unterminated quote".into()),
                        Some('"') => break,
                        Some('\\') => match chars.next() {
                            Some('"') => cur.push('"'),
                            Some('\\') => cur.push('\\'),
                            Some('n') => cur.push('\n'),
                            Some('t') => cur.push('\t'),
                            other => return Err(format!("bad escape {other:?}")),
                        },
                        Some(c) => cur.push(c),
                    }
                }
            }
            c => {
                in_word = true;
                cur.push(c);
            }
        }
    }
    if in_word {
        out.push(cur);
    }
    Ok(out)
}

fn quote(s: &str) -> String {
    let mut q = String::with_capacity(s.len() + 2);
    q.push('"');
    for c in s.chars() {
        match c {
            '"' => q.push_str("\\\""),
            '\\' => q.push_str("\\\\"),
            '\n' => q.push_str("\\n"),
            '\t' => q.push_str("\\t"),
            c => q.push(c),
        }
    }
    q.push('"');
    q
}

/// Parses one action line. Grammar: `$ tool --key value ...` for the three
/// tools; any other `$ words` is shorthand for a bash command. The error
/// string is the observation an environment should surface.
pub fn parse_action(line: &str) -> std::result::Result<ToolCall, String> {
    let rest = line
        .trim_end_matches(['\r', '\n'])
        .strip_prefix("$ ")
        .ok_or_else(|| "actions must start with \"$ \"".to_string())?;
    let (head, tail) = match rest.split_once(' ') {
        Some((h, t)) => (h, t),
        None => (rest, ""),
    };
    match head {
        "bash" | "submit" | "str_replace_editor" => {}
        "" => return Err("empty action".into()),
        _ => return Ok(ToolCall::Bash { cmd: rest.to_string() }),
    }
    let words = split_args(tail)?;
    let mut flags: BTreeMap<String, String> = BTreeMap::new();
    let mut i = 0;
    while i < words.len() {
        let key = words[i]
            .strip_prefix("--")
            .ok_or_else(|| format!("expected a --flag, got {:?}", words[i]))?;
        let val = words.get(i + 1).ok_or_else(|| format!("flag --{key} has no value"))?;
        if flags.insert(key.to_string(), val.clone()).is_some() {
            return Err(format!("flag --{key} given twice"));
        }
        i += 2;
    }
    let take = |flags: &mut BTreeMap<String, String>, k: &str| flags.remove(k);
    let call = match head {
        "bash" => {
            let cmd = take(&mut flags, "cmd").ok_or("bash requires --cmd")?;
            ToolCall::Bash { cmd }
        }
        "submit" => ToolCall::Submit { payload: take(&mut flags, "payload").unwrap_or_default() },
        "str_replace_editor" => {
            let cname = take(&mut flags, "command").ok_or("editor requires --command")?;
            let command =
                EditorCmd::parse(&cname).ok_or_else(|| format!("unknown editor command {cname:?}"))?;
            let path = take(&mut flags, "path").ok_or("editor requires --path")?;
            let old = take(&mut flags, "old");
            let new = take(&mut flags, "new");
            let text = take(&mut flags, "text");
            let line = match take(&mut flags, "line") {
                None => None,
                Some(v) => Some(v.parse::<usize>().map_err(|_| format!("bad --line {v:?}"))?),
            };
            match command {
                EditorCmd::StrReplace if old.is_none() || new.is_none() => {
                    return Err("str_replace requires --old and --new".into())
                }
                EditorCmd::Create | EditorCmd::Insert if text.is_none() => {
                    return Err(format!("{} requires --text", command.name()))
                }
                EditorCmd::Insert if line.is_none() => return Err("insert requires --line".into()),
                _ => {}
            }
            ToolCall::Editor {
                command,
                path,
                old: old.unwrap_or_default(),
                new: new.unwrap_or_default(),
                line: line.unwrap_or_default(),
                text: text.unwrap_or_default(),
            }
        }
        _ => unreachable!(),
    };
    if !flags.is_empty() {
        let extra: Vec<_> = flags.keys().cloned().collect();
        return Err(format!("unknown flags: {}", extra.join(", ")));
    }
    Ok(call)
}

/// Canonical single-line form; parse_action inverts it.
pub fn render_action(call: &ToolCall) -> String {
    match call {
        ToolCall::Bash { cmd } => format!("$ bash --cmd {}", quote(cmd)),
        ToolCall::Submit { payload } if payload.is_empty() => "$ submit".to_string(),
        ToolCall::Submit { payload } => format!("$ submit --payload {}", quote(payload)),
        ToolCall::Editor { command, path, old, new, line, text } => {
            let mut s = format!("$ str_replace_editor --command {} --path {}", command.name(), quote(path));
            match command {
                EditorCmd::StrReplace => {
                    let _ = write!(s, " --old {} --new {}", quote(old), quote(new));
                }
                EditorCmd::Create => {
                    let _ = write!(s, " --text {}", quote(text));
                }
                EditorCmd::Insert => {
                    let _ = write!(s, " --line {line} --text {}", quote(text));
                }
                EditorCmd::View | EditorCmd::UndoEdit => {}
            }
            s
        }
    }
}

// ---- file world ----

/// In-memory file tree. Paths are plain absolute strings; a denied prefix
/// hides everything beneath it behind one fixed refusal line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MicroFS {
    pub files: BTreeMap<String, String>,
    pub access_denied: BTreeSet<String>,
    history: BTreeMap<String, Vec<Option<String>>>,
}

impl MicroFS {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: &str, content: &str) {
        self.files.insert(path.to_string(), content.to_string());
    }

    pub fn deny(&mut self, prefix: &str) {
        self.access_denied.insert(prefix.trim_end_matches('/').to_string());
    }

    pub fn is_denied(&self, path: &str) -> bool {
        self.access_denied
            .iter()
            .any(|p| path == p || path.starts_with(&format!("{p}/")))
    }

    pub fn read(&self, path: &str) -> std::result::Result<&str, String> {
        if self.is_denied(path) {
            return Err(ACCESS_DENIED.to_string());
        }
        self.files
            .get(path)
            .map(String::as_str)
            .ok_or_else(|| format!("No such file: {path}"))
    }

    fn snapshot(&mut self, path: &str) {
        let prior = self.files.get(path).cloned();
        self.history.entry(path.to_string()).or_default().push(prior);
    }

    pub fn view(&self, path: &str) -> String {
        match self.read(path) {
            Ok(c) => c.to_string(),
            Err(e) => e,
        }
    }

    pub fn create(&mut self, path: &str, text: &str) -> String {
        if self.is_denied(path) {
            return ACCESS_DENIED.to_string();
        }
        if self.files.contains_key(path) {
            return format!("File already exists: {path}");
        }
        self.snapshot(path);
        self.files.insert(path.to_string(), text.to_string());
        format!("Created {path}")
    }

    pub fn str_replace(&mut self, path: &str, old: &str, new: &str) -> String {
        if self.is_denied(path) {
            return ACCESS_DENIED.to_string();
        }
        let Some(content) = self.files.get(path) else {
            return format!("No such file: {path}");
        };
        if old.is_empty() {
            return "old string must be non-empty".to_string();
        }
        let hits = content.matches(old).count();
        match hits {
            0 => format!("No match for the old string in {path}; file unchanged"),
            1 => {
                let updated = content.replacen(old, new, 1);
                self.snapshot(path);
                self.files.insert(path.to_string(), updated);
                format!("Replaced one occurrence in {path}")
            }
            n => format!("Old string occurs {n} times in {path}; must be unique; file unchanged"),
        }
    }

    pub fn insert_line(&mut self, path: &str, line: usize, text: &str) -> String {
        if self.is_denied(path) {
            return ACCESS_DENIED.to_string();
        }
        let Some(content) = self.files.get(path) else {
            return format!("No such file: {path}");
        };
        let mut lines: Vec<&str> = content.lines().collect();
        if line > lines.len() {
            return format!("Line {line} beyond end of {path} ({} lines)", lines.len());
        }
        let ends_nl = content.ends_with('\n');
        lines.insert(line, text);
        let mut joined = lines.join("\n");
        if ends_nl {
            joined.push('\n');
        }
        self.snapshot(path);
        self.files.insert(path.to_string(), joined);
        format!("Inserted after line {line} in {path}")
    }

    pub fn undo_edit(&mut self, path: &str) -> String {
        if self.is_denied(path) {
            return ACCESS_DENIED.to_string();
        }
        match self.history.get_mut(path).and_then(Vec::pop) {
            None => format!("Nothing to undo for {path}"),
            Some(Some(prev)) => {
                self.files.insert(path.to_string(), prev);
                format!("Reverted last edit to {path}")
            }
            Some(None) => {
                self.files.remove(path);
                format!("Reverted creation of {path}")
            }
        }
    }

    pub fn list(&self, dir: &str) -> String {
        if self.is_denied(dir) {
            return ACCESS_DENIED.to_string();
        }
        let prefix = if dir == "/" { "/".to_string() } else { format!("{}/", dir.trim_end_matches('/')) };
        let mut names: Vec<&str> = self
            .files
            .keys()
            .filter(|p| p.starts_with(&prefix) && !self.is_denied(p))
            .map(String::as_str)
            .collect();
        // denied directories under dir still show up as entries, unreadable
        for d in &self.access_denied {
            if d.starts_with(&prefix) || (dir == "/" && !d.is_empty()) {
                names.push(d);
            }
        }
        names.sort_unstable();
        names.dedup();
        if names.is_empty() {
            "(empty)".to_string()
        } else {
            names.join("\n")
        }
    }
}

// ---- tasks ----

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskKind {
    Keychain { depth: usize, payload_len: usize },
    SecretCommand,
    PatchFix,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Keychain { .. } => "keychain",
            TaskKind::SecretCommand => "secret_command",
            TaskKind::PatchFix => "patch_fix",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SuccessPred {
    /// Some submitted payload equals this string exactly.
    SubmitEquals(String),
    /// The file at `path` ends up byte-identical to `content`.
    FileEquals { path: String, content: String },
}

impl SuccessPred {
    pub fn satisfied(&self, fs: &MicroFS, submissions: &[String]) -> bool {
        match self {
            SuccessPred::SubmitEquals(want) => submissions.iter().any(|s| s == want),
            SuccessPred::FileEquals { path, content } => {
                fs.files.get(path).map(String::as_str) == Some(content.as_str())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub issue_text: String,
    pub success: SuccessPred,
}

// ---- live environment ----

pub struct SimEnv {
    pub fs: MicroFS,
    pub spec: TaskSpec,
    pub submissions: Vec<String>,
    terminated: bool,
}

impl SimEnv {
    pub fn new(fs: MicroFS, spec: TaskSpec) -> Self {
        SimEnv { fs, spec, submissions: Vec::new(), terminated: false }
    }

    fn bash(&mut self, cmd: &str) -> String {
        let mut parts = cmd.splitn(2, ' ');
        let head = parts.next().unwrap_or("");
        let arg = parts.next().unwrap_or("").trim();
        match head {
            "cat" => match self.fs.read(arg) {
                Ok(c) => c.to_string(),
                Err(e) => e,
            },
            "ls" => self.fs.list(if arg.is_empty() { "/" } else { arg }),
            "cd" => {
                if self.fs.is_denied(arg) {
                    ACCESS_DENIED.to_string()
                } else {
                    format!("Now in {arg}")
                }
            }
            "echo" => arg.to_string(),
            "run-tests" => match &self.spec.success {
                SuccessPred::FileEquals { path, content } => {
                    if self.fs.files.get(path).map(String::as_str) == Some(content.as_str()) {
                        "all tests passed.".to_string()
                    } else {
                        "1 test failed: expected behavior not met.".to_string()
                    }
                }
                _ => "no tests configured.".to_string(),
            },
            _ => {
                if let SuccessPred::SubmitEquals(want) = &self.spec.success {
                    if matches!(self.spec.kind, TaskKind::SecretCommand) && cmd == want {
                        return "Successfully installed.".to_string();
                    }
                }
                format!("command not found: {head}")
            }
        }
    }

    pub fn execute_call(&mut self, call: &ToolCall) -> String {
        match call {
            ToolCall::Bash { cmd } => self.bash(cmd),
            ToolCall::Submit { payload } => {
                self.submissions.push(payload.clone());
                self.terminated = true;
                "submitted.".to_string()
            }
            ToolCall::Editor { command, path, old, new, line, text } => match command {
                EditorCmd::View => self.fs.view(path),
                EditorCmd::Create => self.fs.create(path, text),
                EditorCmd::StrReplace => self.fs.str_replace(path, old, new),
                EditorCmd::Insert => self.fs.insert_line(path, *line, text),
                EditorCmd::UndoEdit => self.fs.undo_edit(path),
            },
        }
    }

    fn outcome_now(&self) -> Outcome {
        if self.spec.success.satisfied(&self.fs, &self.submissions) {
            Outcome::Resolved
        } else {
            Outcome::Unresolved
        }
    }
}

impl Env for SimEnv {
    fn system_prompt(&self) -> String {
        format!(
            "{}\nTools: bash, submit, str_replace_editor (view, create, str_replace, insert, undo_edit).\nOne action per line, e.g. $ cat /workdir/README.md",
            self.spec.issue_text
        )
    }

    fn execute(&mut self, action: &str) -> String {
        match parse_action(action) {
            Ok(call) => self.execute_call(&call),
            Err(obs) => format!("action error: {obs}"),
        }
    }

    fn terminated(&self) -> bool {
        self.terminated
    }

    fn judge(&self) -> Outcome {
        self.outcome_now()
    }
}

/// Judgment by replay from the initial world. Worlds are regenerated from
/// seeds rather than serialized, so the caller supplies `fs0`. An empty
/// trajectory is unresolved; a non-empty one must have terminated (an
/// outcome, or a submit action).
pub fn judge(traj: &Trajectory, spec: &TaskSpec, fs0: &MicroFS) -> Result<Outcome> {
    if traj.steps.is_empty() {
        return Ok(Outcome::Unresolved);
    }
    let has_submit = traj
        .steps
        .iter()
        .filter(|s| s.role == Role::Action)
        .any(|s| matches!(parse_action(&s.text), Ok(ToolCall::Submit { .. })));
    if traj.outcome.is_none() && !has_submit {
        return Err(Error::Config("judging an unterminated trajectory".into()));
    }
    let mut env = SimEnv::new(fs0.clone(), spec.clone());
    for s in traj.steps.iter().filter(|s| s.role == Role::Action) {
        env.execute(&s.text);
        if env.terminated {
            break;
        }
    }
    Ok(env.outcome_now())
}

// ---- generators ----

const FILLER_WORDS: [&str; 16] = [
    "relay", "valve", "ledger", "switch", "beacon", "signal", "cache", "probe", "drift", "anchor",
    "filter", "module", "socket", "buffer", "router", "sensor",
];

/// Seeded prose of exactly `bytes` bytes (ASCII, so byte-level token count
/// equals `bytes`).
fn filler_text(rng: &mut ChaCha20Rng, bytes: usize) -> String {
    let mut s = String::with_capacity(bytes + 8);
    while s.len() < bytes {
        s.push_str(FILLER_WORDS[rng.gen_range(0..FILLER_WORDS.len())]);
        s.push(if rng.gen_bool(0.15) { '.' } else { ' ' });
    }
    s.truncate(bytes);
    s
}

/// Filler with `marker` embedded about a third of the way in; total length
/// is exactly `max(bytes, marker floor)`.
fn padded_with_marker(rng: &mut ChaCha20Rng, bytes: usize, marker: &str) -> String {
    let total = bytes.max(marker.len() + 16);
    let head_len = total / 3;
    let mut s = filler_text(rng, head_len);
    s.push(' ');
    s.push_str(marker);
    s.push(' ');
    if s.len() < total {
        let tail = filler_text(rng, total - s.len());
        s.push_str(&tail);
    }
    s.truncate(total);
    s
}

const PAYLOAD_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";

fn random_payload(rng: &mut ChaCha20Rng, len: usize) -> String {
    (0..len)
        .map(|_| PAYLOAD_ALPHABET[rng.gen_range(0..PAYLOAD_ALPHABET.len())] as char)
        .collect()
}

/// Builds a world, its task spec, and an expert trajectory recorded by
/// replaying the expert's actions through the live environment, so expert
/// observations are exactly what execute() produces. Long observations are
/// padded to `obs_pad` tokens.
pub fn generate_task(
    kind: &TaskKind,
    seed: u64,
    obs_pad: usize,
    tok: &Tokenizer,
) -> Result<(MicroFS, TaskSpec, Trajectory)> {
    let mut rng = seed_stream(seed, &format!("env.task.{}", kind.name()));
    let mut fs = MicroFS::new();
    let (spec, actions) = match kind {
        TaskKind::Keychain { depth, payload_len } => {
            if *depth == 0 {
                return Err(Error::Config("keychain depth must be at least 1".into()));
            }
            let payload = random_payload(&mut rng, (*payload_len).max(1));
            let reveal = padded_with_marker(
                &mut rng,
                obs_pad,
                &format!("The access code is {payload}."),
            );
            fs.insert("/notes/key.txt", &reveal);
            fs.insert("/notes/readme.txt", "Operational notes live here.");
            let spec = TaskSpec {
                kind: kind.clone(),
                issue_text: "An access code is recorded in /notes/key.txt. Find it and submit the exact code.".into(),
                success: SuccessPred::SubmitEquals(payload.clone()),
            };
            let mut actions = vec!["$ cat /notes/key.txt".to_string()];
            for _ in 1..*depth {
                actions.push("$ ls /notes".to_string());
            }
            actions.push(render_action(&ToolCall::Submit { payload }));
            (spec, actions)
        }
        TaskKind::SecretCommand => {
            let tag = random_payload(&mut rng, 6);
            let command = format!("pip install -r /secret_dir/requirements_{tag}.txt");
            let readme = padded_with_marker(
                &mut rng,
                obs_pad,
                &format!("Setup requires running exactly this command: {command}"),
            );
            fs.insert("/workdir/README.md", &readme);
            fs.deny("/secret_dir");
            let spec = TaskSpec {
                kind: kind.clone(),
                issue_text: "The project under /workdir fails to set up. The README documents the one valid install command. Submit that command exactly.".into(),
                success: SuccessPred::SubmitEquals(command.clone()),
            };
            let actions = vec![
                "$ cat /workdir/README.md".to_string(),
                "$ cd /secret_dir".to_string(),
                render_action(&ToolCall::Submit { payload: command }),
            ];
            (spec, actions)
        }
        TaskKind::PatchFix => {
            let suffix = "def scale(value):\n    return value * 3\n";
            let mut body = String::new();
            while body.len() + suffix.len() < obs_pad {
                let _ = writeln!(body, "# note: {}", filler_text(&mut rng, 48));
            }
            let broken = format!("{body}{suffix}");
            let fixed = broken.replace("return value * 3", "return value * 2");
            fs.insert("/workdir/calc.py", &broken);
            let spec = TaskSpec {
                kind: kind.clone(),
                issue_text: "scale() in /workdir/calc.py must double its input, but tests show it tripling. Fix the file and make the tests pass.".into(),
                success: SuccessPred::FileEquals { path: "/workdir/calc.py".into(), content: fixed },
            };
            let actions = vec![
                render_action(&ToolCall::Editor {
                    command: EditorCmd::View,
                    path: "/workdir/calc.py".into(),
                    old: String::new(),
                    new: String::new(),
                    line: 0,
                    text: String::new(),
                }),
                render_action(&ToolCall::Editor {
                    command: EditorCmd::StrReplace,
                    path: "/workdir/calc.py".into(),
                    old: "return value * 3".into(),
                    new: "return value * 2".into(),
                    line: 0,
                    text: String::new(),
                }),
                "$ run-tests".to_string(),
                "$ submit".to_string(),
            ];
            (spec, actions)
        }
    };

    let mut env = SimEnv::new(fs.clone(), spec.clone());
    let mut expert = Trajectory::new(&format!("{}-{seed}", kind.name()), seed);
    expert.push(Role::System, env.system_prompt(), tok);
    for action in actions {
        expert.push(Role::Action, action.clone(), tok);
        let obs = env.execute(&action);
        if env.terminated() {
            break;
        }
        expert.push(Role::Observation, obs, tok);
    }
    expert.outcome = Some(env.judge());
    if expert.outcome != Some(Outcome::Resolved) {
        return Err(Error::Config(format!(
            "generated expert failed its own task: {} seed {seed}",
            kind.name()
        )));
    }
    expert.validate()?;
    Ok((fs, spec, expert))
}

// ---- task files ----

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub kind: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_len: Option<usize>,
    pub obs_pad: usize,
}

impl TaskRecord {
    pub fn task_kind(&self) -> Result<TaskKind> {
        Ok(match self.kind.as_str() {
            "keychain" => TaskKind::Keychain {
                depth: self.depth.unwrap_or(1),
                payload_len: self.payload_len.unwrap_or(8),
            },
            "secret_command" => TaskKind::SecretCommand,
            "patch_fix" => TaskKind::PatchFix,
            other => return Err(Error::Config(format!("unknown task kind {other:?}"))),
        })
    }

    pub fn realize(&self, tok: &Tokenizer) -> Result<(MicroFS, TaskSpec, Trajectory)> {
        generate_task(&self.task_kind()?, self.seed, self.obs_pad, tok)
    }
}

pub fn save_task_records<W: std::io::Write>(w: &mut W, recs: &[TaskRecord]) -> Result<()> {
    for r in recs {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_task_records(text: &str) -> Result<Vec<TaskRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: TaskRecord =
            serde_json::from_str(line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        r.task_kind()?;
        out.push(r);
    }
    Ok(out)
}

// ---- fixed probe environment ----

/// Never-terminating environment emitting constant-size observations; step
/// counts under it are a pure function of the slot budget and the policy.
pub struct FixedEnv {
    pub obs_tokens: usize,
    served: usize,
}

impl FixedEnv {
    pub fn new(obs_tokens: usize) -> Self {
        FixedEnv { obs_tokens, served: 0 }
    }
}

impl Env for FixedEnv {
    fn system_prompt(&self) -> String {
        "Probe task: keep inspecting the logs.".to_string()
    }

    fn execute(&mut self, _action: &str) -> String {
        self.served += 1;
        let head = format!("log window {}: ", self.served);
        let mut s = head;
        while s.len() < self.obs_tokens {
            s.push_str("entry nominal ");
        }
        s.truncate(self.obs_tokens);
        s
    }

    fn terminated(&self) -> bool {
        false
    }

    fn judge(&self) -> Outcome {
        Outcome::Unresolved
    }
}

// ---- hypothesis sweep ----

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub kind: String,
    pub depth: usize,
    pub policy: String,
    pub seed: u64,
    pub resolved: bool,
    pub steps: usize,
    pub eff_rate: f64,
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub kinds: Vec<String>,
    pub depth_max: usize,
    pub policies: Vec<CompressionPolicy>,
    pub n_seeds: u64,
    pub seed0: u64,
    pub obs_pad: usize,
    pub payload_len: usize,
    pub rho: usize,
    pub budget: usize,
    pub max_new: usize,
    pub max_steps: usize,
    /// false: replay the scripted expert; true: decode actions from the model.
    pub use_model: bool,
}

/// Crosses kind × depth × policy × seed and records one resolution row per
/// cell. Row count is |kinds| · depth_max · |policies| · n_seeds.
pub fn hypothesis_sweep(
    store: &ParamStore,
    cfg: &ModelConfig,
    adapter: &LoraAdapter,
    tok: &Tokenizer,
    sc: &SweepConfig,
) -> Result<Vec<SweepCell>> {
    let mut rows = Vec::new();
    for kind_name in &sc.kinds {
        for depth in 1..=sc.depth_max {
            for policy in &sc.policies {
                for s in 0..sc.n_seeds {
                    let seed = index_hash(sc.seed0, &format!("sweep.{kind_name}.{depth}"), s);
                    let rec = TaskRecord {
                        kind: kind_name.clone(),
                        seed,
                        depth: Some(depth),
                        payload_len: Some(sc.payload_len),
                        obs_pad: sc.obs_pad,
                    };
                    let (fs, spec, expert) = rec.realize(tok)?;
                    let mut env = SimEnv::new(fs, spec);
                    let mut scripted;
                    let mut modeled;
                    let actor: &mut dyn ActionSource = if sc.use_model {
                        modeled = ModelActor { max_new: sc.max_new };
                        &mut modeled
                    } else {
                        scripted = ScriptedActor::new(
                            expert.steps.iter().filter(|st| st.role == Role::Action).map(|st| st.text.clone()).collect(),
                        );
                        &mut scripted
                    };
                    let opts = RolloutOptions {
                        policy: policy.clone(),
                        rho: sc.rho,
                        budget: sc.budget,
                        max_new: sc.max_new,
                        max_steps: sc.max_steps,
                    };
                    let traj = agentic::rollout(
                        store,
                        cfg,
                        adapter,
                        tok,
                        &mut env,
                        actor,
                        &opts,
                        &expert.task_id,
                        seed,
                    )?;
                    let steps = traj.steps.iter().filter(|st| st.role == Role::Action).count();
                    let eff_rate = agentic::effective_compression_rate(&traj, policy, sc.rho)?;
                    rows.push(SweepCell {
                        kind: kind_name.clone(),
                        depth,
                        policy: policy.name().to_string(),
                        seed,
                        resolved: traj.outcome == Some(Outcome::Resolved),
                        steps,
                        eff_rate,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepCell]) -> String {
    let mut s = String::from("kind,depth,policy,seed,resolved,steps,eff_rate\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.kind, r.depth, r.policy, r.seed, r.resolved as u8, r.steps, r.eff_rate
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::byte_level()
    }

    #[test]
    fn action_grammar_round_trips() {
        let calls = vec![
            ToolCall::Bash { cmd: "cat /notes/key.txt".into() },
            ToolCall::Submit { payload: String::new() },
            ToolCall::Submit { payload: "a \"quoted\" value\nwith newline".into() },
            ToolCall::Editor {
                command: EditorCmd::StrReplace,
                path: "/workdir/calc.py".into(),
                old: "return value * 3".into(),
                new: "return value * 2".into(),
                line: 0,
                text: String::new(),
            },
            ToolCall::Editor {
                command: EditorCmd::Insert,
                path: "/a".into(),
                old: String::new(),
                new: String::new(),
                line: 3,
                text: "x = 1\t# tab".into(),
            },
        ];
        for c in calls {
            let line = render_action(&c);
            assert_eq!(parse_action(&line), Ok(c), "{line}");
        }
    }

    #[test]
    fn raw_bash_shorthand_parses() {
        assert_eq!(
            parse_action("$ pip install -r reqs.txt"),
            Ok(ToolCall::Bash { cmd: "pip install -r reqs.txt".into() })
        );
        assert!(parse_action("no dollar").is_err());
        assert!(parse_action("$ bash --cmd").is_err());
        assert!(parse_action("$ str_replace_editor --command str_replace --path /f").is_err());
    }

    #[test]
    fn str_replace_requires_unique_match() {
        let mut fs = MicroFS::new();
        fs.insert("/f", "aba aba");
        let obs = fs.str_replace("/f", "zz", "q");
        assert!(obs.contains("No match"));
        assert_eq!(fs.files["/f"], "aba aba");
        let obs = fs.str_replace("/f", "aba", "q");
        assert!(obs.contains("unique"));
        assert_eq!(fs.files["/f"], "aba aba");
        let obs = fs.str_replace("/f", "aba a", "q");
        assert!(obs.contains("Replaced"));
        assert_eq!(fs.files["/f"], "qba");
    }

    #[test]
    fn create_then_undo_leaves_no_file() {
        let mut fs = MicroFS::new();
        fs.create("/new", "hello");
        assert!(fs.files.contains_key("/new"));
        let obs = fs.undo_edit("/new");
        assert!(obs.contains("Reverted creation"));
        assert!(!fs.files.contains_key("/new"));
        assert!(fs.undo_edit("/new").contains("Nothing to undo"));
    }

    #[test]
    fn undo_restores_exact_prior_content() {
        let mut fs = MicroFS::new();
        fs.insert("/f", "one\ntwo\n");
        fs.insert_line("/f", 1, "mid");
        assert_eq!(fs.files["/f"], "one\nmid\ntwo\n");
        fs.undo_edit("/f");
        assert_eq!(fs.files["/f"], "one\ntwo\n");
    }

    #[test]
    fn denied_paths_refuse_with_the_fixed_line() {
        let mut fs = MicroFS::new();
        fs.insert("/secret_dir/requirements.txt", "torch");
        fs.deny("/secret_dir");
        assert_eq!(fs.view("/secret_dir/requirements.txt"), ACCESS_DENIED);
        assert_eq!(fs.list("/secret_dir"), ACCESS_DENIED);
        let spec = TaskSpec {
            kind: TaskKind::SecretCommand,
            issue_text: "t".into(),
            success: SuccessPred::SubmitEquals("x".into()),
        };
        let mut env = SimEnv::new(fs, spec);
        assert_eq!(env.execute("$ cd /secret_dir"), ACCESS_DENIED);
        assert_eq!(env.execute("$ cat /secret_dir/requirements.txt"), ACCESS_DENIED);
    }

    #[test]
    fn generated_experts_resolve_for_every_kind() {
        let t = tok();
        for kind in [
            TaskKind::Keychain { depth: 1, payload_len: 8 },
            TaskKind::Keychain { depth: 3, payload_len: 8 },
            TaskKind::SecretCommand,
            TaskKind::PatchFix,
        ] {
            for seed in [1u64, 2, 99] {
                let (fs, spec, expert) = generate_task(&kind, seed, 400, &t).unwrap();
                assert_eq!(expert.outcome, Some(Outcome::Resolved), "{kind:?} seed {seed}");
                assert_eq!(judge(&expert, &spec, &fs).unwrap(), Outcome::Resolved);
                let long = expert
                    .steps
                    .iter()
                    .filter(|s| s.role == Role::Observation)
                    .map(|s| s.token_len)
                    .max()
                    .unwrap();
                assert!(long >= 400, "{kind:?}: longest observation {long}");
            }
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let t = tok();
        let k = TaskKind::Keychain { depth: 2, payload_len: 8 };
        let a = generate_task(&k, 7, 400, &t).unwrap();
        let b = generate_task(&k, 7, 400, &t).unwrap();
        assert_eq!(a, b);
        let c = generate_task(&k, 8, 400, &t).unwrap();
        assert_ne!(a.1.success, c.1.success);
    }

    #[test]
    fn keychain_near_miss_is_unresolved() {
        let t = tok();
        let k = TaskKind::Keychain { depth: 1, payload_len: 8 };
        let (fs, spec, expert) = generate_task(&k, 11, 400, &t).unwrap();
        let SuccessPred::SubmitEquals(payload) = &spec.success else { panic!() };
        let mut wrong = payload.clone().into_bytes();
        wrong[0] = if wrong[0] == b'a' { b'b' } else { b'a' };
        let mut traj = Trajectory::new("t", 0);
        traj.push(Role::System, expert.steps[0].text.clone(), &t);
        traj.push(
            Role::Action,
            render_action(&ToolCall::Submit { payload: String::from_utf8(wrong).unwrap() }),
            &t,
        );
        assert_eq!(judge(&traj, &spec, &fs).unwrap(), Outcome::Unresolved);
    }

    #[test]
    fn judge_rejects_unterminated_but_accepts_empty() {
        let t = tok();
        let (fs, spec, _) = generate_task(&TaskKind::PatchFix, 3, 400, &t).unwrap();
        let empty = Trajectory::new("t", 0);
        assert_eq!(judge(&empty, &spec, &fs).unwrap(), Outcome::Unresolved);
        let mut open = Trajectory::new("t", 0);
        open.push(Role::System, "s".into(), &t);
        open.push(Role::Action, "$ ls /".into(), &t);
        assert!(judge(&open, &spec, &fs).is_err());
    }

    #[test]
    fn task_records_round_trip() {
        let recs = vec![
            TaskRecord { kind: "keychain".into(), seed: 5, depth: Some(2), payload_len: Some(8), obs_pad: 400 },
            TaskRecord { kind: "patch_fix".into(), seed: 6, depth: None, payload_len: None, obs_pad: 400 },
        ];
        let mut buf = Vec::new();
        save_task_records(&mut buf, &recs).unwrap();
        let loaded = load_task_records(&String::from_utf8(buf).unwrap()).unwrap();
        assert_eq!(loaded, recs);
        assert!(load_task_records("{\"kind\":\"nope\",\"seed\":1,\"obs_pad\":9}\n").is_err());
    }

    #[test]
    fn fixed_env_observations_have_exact_length() {
        let mut env = FixedEnv::new(400);
        for _ in 0..5 {
            let obs = env.execute("$ ls /");
            assert_eq!(obs.len(), 400);
        }
        assert!(!env.terminated());
    }
}
