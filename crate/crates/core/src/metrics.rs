//! Evaluation statistics: sentence BLEU, exact match, the threshold pass
//! metric with code extraction, per-action trajectory BLEU, step-count
//! summaries, and the two-sample Welch t-test. Everything here is a pure
//! function of its arguments.

use crate::agentic::{Role, Trajectory};
use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;

// ---- metric tokenization ----

/// Whitespace split with ASCII punctuation broken out into single-char
/// tokens. Independent of the model tokenizer so scores are model-agnostic.
pub fn metric_tokenize(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in s.chars() {
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if c.is_ascii_punctuation() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        } else {
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

// ---- BLEU ----

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU with modified n-gram precision and brevity penalty.
/// Orders the candidate is too short to populate are skipped (so a perfect
/// one-token candidate scores 1); a populated order with zero clipped
/// matches zeroes the score unless `smooth` add-ones orders above unigram.
pub fn bleu_with(candidate: &[String], reference: &[String], max_n: usize, smooth: bool) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut logs = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let cand = ngram_counts(candidate, n);
        let total: usize = cand.values().sum();
        if total == 0 {
            break;
        }
        let refc = ngram_counts(reference, n);
        let clipped: usize = cand
            .iter()
            .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        if clipped == 0 && (!smooth || n == 1) {
            return 0.0;
        }
        let (num, den) = if smooth && n > 1 {
            (clipped as f64 + 1.0, total as f64 + 1.0)
        } else {
            (clipped as f64, total as f64)
        };
        logs.push((num / den).ln());
    }
    let c = candidate.len() as f64;
    let r = reference.len() as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (logs.iter().sum::<f64>() / logs.len() as f64).exp()
}

pub fn bleu(candidate: &[String], reference: &[String]) -> f64 {
    bleu_with(candidate, reference, 4, false)
}

pub fn bleu_text(candidate: &str, reference: &str) -> f64 {
    bleu(&metric_tokenize(candidate), &metric_tokenize(reference))
}

// ---- exact match ----

/// Outer whitespace is the only normalization; case and inner spacing count.
pub fn exact_match(candidate: &str, reference: &str) -> u8 {
    u8::from(candidate.trim() == reference.trim())
}

// ---- pass metric with code extraction ----

/// Line-comment markers by fence language tag; untagged blocks strip both
/// common markers.
fn comment_markers(lang: &str) -> &'static [&'static str] {
    match lang {
        "python" | "py" | "sh" | "bash" | "shell" | "ruby" | "yaml" | "toml" => &["#"],
        "rust" | "rs" | "c" | "cpp" | "go" | "java" | "js" | "javascript" | "ts" | "typescript" => {
            &["//"]
        }
        _ => &["#", "//"],
    }
}

/// First fenced code block and its language tag; the whole string with no
/// tag if there is no fence.
fn extract_code(s: &str) -> (String, String) {
    let mut lang = String::new();
    let mut body: Vec<&str> = Vec::new();
    let mut inside = false;
    let mut seen = false;
    for line in s.lines() {
        let t = line.trim_start();
        if let Some(rest) = t.strip_prefix("```") {
            if inside {
                seen = true;
                break;
            }
            inside = true;
            lang = rest.trim().to_string();
            continue;
        }
        if inside {
            body.push(line);
        }
    }
    if inside || seen {
        (body.join("\n"), lang)
    } else {
        (s.to_string(), String::new())
    }
}

fn strip_line_comments(code: &str, markers: &[&str]) -> String {
    let mut out = Vec::new();
    for line in code.lines() {
        let mut kept = line;
        for m in markers {
            if let Some(at) = kept.find(m) {
                kept = &kept[..at];
            }
        }
        if !kept.trim().is_empty() {
            out.push(kept.trim_end());
        }
    }
    out.join("\n")
}

/// Extraction, comment stripping, then a BLEU threshold. The same pipeline
/// runs on both sides so a commented reference is not penalized.
pub fn pass_at_bleu(candidate: &str, reference: &str, threshold: f64) -> u8 {
    let (cand_code, cand_lang) = extract_code(candidate);
    let (ref_code, ref_lang) = extract_code(reference);
    let cand = strip_line_comments(&cand_code, comment_markers(&cand_lang));
    let refc = strip_line_comments(&ref_code, comment_markers(&ref_lang));
    u8::from(bleu_text(&cand, &refc) >= threshold)
}

// ---- per-action trajectory BLEU ----

/// Macro-average of per-index action BLEU over the aligned prefix of
/// min(action counts). Undefined when either side has no actions.
pub fn bleu_ref(traj: &Trajectory, expert: &Trajectory) -> Result<f64> {
    let a: Vec<&str> = traj
        .steps
        .iter()
        .filter(|s| s.role == Role::Action)
        .map(|s| s.text.as_str())
        .collect();
    let b: Vec<&str> = expert
        .steps
        .iter()
        .filter(|s| s.role == Role::Action)
        .map(|s| s.text.as_str())
        .collect();
    let n = a.len().min(b.len());
    if n == 0 {
        return Err(Error::MetricUndefined("no aligned actions to score".into()));
    }
    Ok((0..n).map(|i| bleu_text(a[i], b[i])).sum::<f64>() / n as f64)
}

// ---- Welch t-test ----

/// Lanczos approximation, g = 7; arguments here are always >= 0.5.
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507343278686905,
        -0.13857109526572012,
        9.984_369_578_019_572e-6,
        1.5056327351493116e-7,
    ];
    debug_assert!(x > 0.0);
    let mut acc = 0.999_999_999_999_809_9;
    for (i, c) in COEF.iter().enumerate() {
        acc += c / (x + i as f64);
    }
    let t = x + 6.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x - 0.5) * t.ln() - t + acc.ln()
}

/// Continued fraction for the regularized incomplete beta (modified Lentz).
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const FPMIN: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let mf = m as f64;
        let m2 = 2.0 * mf;
        let aa = mf * (b - mf) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + mf) * (qab + mf) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b), absolute error well under 1e-8
/// for the df/2 vs 1/2 arguments used here.
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_bt = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let bt = ln_bt.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        bt * betacf(a, b, x) / a
    } else {
        1.0 - bt * betacf(b, a, 1.0 - x) / b
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch statistic, Welch–Satterthwaite degrees of freedom, two-sided p.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<(f64, f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Degenerate("welch test needs at least 2 samples per side".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    if va == 0.0 && vb == 0.0 {
        return Err(Error::Degenerate("both samples have zero variance".into()));
    }
    let na = a.len() as f64;
    let nb = b.len() as f64;
    let sa = va / na;
    let sb = vb / nb;
    let se2 = sa + sb;
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let p = p_two_sided(t, df);
    Ok((t, df, p))
}

/// P(|T_df| >= |t|) through the incomplete beta identity.
pub fn p_two_sided(t: f64, df: f64) -> f64 {
    inc_beta(df / 2.0, 0.5, df / (df + t * t))
}

/// Smallest t with a two-sided p at or below alpha, by bisection; p(t, df)
/// is strictly decreasing in |t|.
pub fn t_critical(df: f64, alpha: f64) -> f64 {
    let mut lo = 0.0f64;
    let mut hi = 1e3f64;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if p_two_sided(mid, df) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

// ---- per-run summaries and reports ----

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub n: usize,
    pub mean: f64,
    pub var: f64,
}

pub fn summarize(xs: &[f64]) -> Result<RunSummary> {
    if xs.len() < 2 {
        return Err(Error::Degenerate("summary variance needs at least 2 values".into()));
    }
    let (mean, var) = mean_var(xs);
    Ok(RunSummary { n: xs.len(), mean, var })
}

/// Plain-text Welch comparison over named metric sample pairs, with a CSV
/// twin. Rows where the test is degenerate report "-" entries instead of
/// failing the report.
pub fn welch_report(
    label_a: &str,
    label_b: &str,
    metrics: &[(&str, Vec<f64>, Vec<f64>)],
) -> (String, String) {
    let mut table = format!(
        "{:<12} {:>10} {:>10} {:>9} {:>7} {:>11}\n",
        "metric",
        format!("mean[{label_a}]"),
        format!("mean[{label_b}]"),
        "t",
        "df",
        "p"
    );
    let mut csv = String::from("metric,mean_a,mean_b,t,df,p\n");
    for (name, a, b) in metrics {
        let ma = a.iter().sum::<f64>() / a.len().max(1) as f64;
        let mb = b.iter().sum::<f64>() / b.len().max(1) as f64;
        match welch_t(a, b) {
            Ok((t, df, p)) => {
                let _ = writeln!(
                    table,
                    "{name:<12} {ma:>10.4} {mb:>10.4} {t:>9.4} {df:>7.2} {p:>11.6}"
                );
                let _ = writeln!(csv, "{name},{ma},{mb},{t},{df},{p}");
            }
            Err(_) => {
                let _ = writeln!(
                    table,
                    "{name:<12} {ma:>10.4} {mb:>10.4} {:>9} {:>7} {:>11}",
                    "-", "-", "-"
                );
                let _ = writeln!(csv, "{name},{ma},{mb},-,-,-");
            }
        }
    }
    (table, csv)
}

// ---- metric records ----

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub run_id: String,
    pub task_id: String,
    pub bleu: f64,
    pub exact_match: u8,
    pub pass_at: u8,
    pub resolved: u8,
    pub steps: usize,
    pub eff_rate: f64,
    pub wall_ms: u64,
}

impl MetricRecord {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.bleu) {
            return Err(Error::Config(format!("bleu {} out of [0,1]", self.bleu)));
        }
        for (name, v) in [
            ("exact_match", self.exact_match),
            ("pass_at", self.pass_at),
            ("resolved", self.resolved),
        ] {
            if v > 1 {
                return Err(Error::Config(format!("{name} must be 0 or 1, got {v}")));
            }
        }
        if self.eff_rate < 1.0 {
            return Err(Error::Config(format!("eff_rate {} below 1", self.eff_rate)));
        }
        if self.run_id.contains(',') || self.task_id.contains(',') {
            return Err(Error::Config("ids must not contain commas".into()));
        }
        Ok(())
    }
}

pub const METRIC_CSV_HEADER: &str = "run_id,task_id,bleu,exact_match,pass_at,resolved,steps,eff_rate,wall_ms";

pub fn metrics_csv(records: &[MetricRecord]) -> String {
    let mut s = String::from(METRIC_CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.run_id, r.task_id, r.bleu, r.exact_match, r.pass_at, r.resolved, r.steps, r.eff_rate, r.wall_ms
        );
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == METRIC_CSV_HEADER => {}
        _ => return Err(Error::Parse { line: 1, msg: "bad metrics header".into() }),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Parse { line: i + 1, msg: format!("expected 9 fields, got {}", f.len()) });
        }
        let field = |j: usize, what: &str| -> Result<f64> {
            f[j].parse::<f64>()
                .map_err(|_| Error::Parse { line: i + 1, msg: format!("bad {what}: {:?}", f[j]) })
        };
        let rec = MetricRecord {
            run_id: f[0].to_string(),
            task_id: f[1].to_string(),
            bleu: field(2, "bleu")?,
            exact_match: field(3, "exact_match")? as u8,
            pass_at: field(4, "pass_at")? as u8,
            resolved: field(5, "resolved")? as u8,
            steps: field(6, "steps")? as usize,
            eff_rate: field(7, "eff_rate")?,
            wall_ms: field(8, "wall_ms")? as u64,
        };
        rec.validate().map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

// ---- step-count statistics ----

#[derive(Debug, Clone, PartialEq)]
pub struct StatsRow {
    pub run_id: String,
    pub n: usize,
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Linear-interpolation quantile over a sorted slice (the numpy default).
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// One row per run id: mean, quartiles, and median of step counts.
pub fn trajectory_stats(records: &[MetricRecord]) -> Vec<StatsRow> {
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry(&r.run_id).or_default().push(r.steps as f64);
    }
    groups
        .into_iter()
        .map(|(run_id, mut xs)| {
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            StatsRow {
                run_id: run_id.to_string(),
                n: xs.len(),
                mean,
                q1: quantile(&xs, 0.25),
                median: quantile(&xs, 0.5),
                q3: quantile(&xs, 0.75),
            }
        })
        .collect()
}

pub fn stats_csv(rows: &[StatsRow]) -> String {
    let mut s = String::from("run_id,n,mean_steps,q1,median,q3\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.run_id, r.n, r.mean, r.q1, r.median, r.q3);
    }
    s
}
