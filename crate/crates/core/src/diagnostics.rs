//! Alignment diagnostics and statistics: fatal-alignment-error detection,
//! error-rate aggregation, F0 variability, and the Mann-Whitney rank test.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Attention matrices
// ---------------------------------------------------------------------------

/// Row-stochastic decoder-steps x encoder-positions matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    data: Array2<f64>,
}

/// File-level tolerance on row sums (matrices may round-trip through f32).
const ROW_SUM_TOL: f64 = 1e-4;

impl AttentionMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (t, l) = data.dim();
        if t == 0 || l == 0 {
            return Err(Error::InvalidArg(
                "attention matrix must have at least one row and column".into(),
            ));
        }
        for (i, row) in data.rows().into_iter().enumerate() {
            if row.iter().any(|&v| !v.is_finite() || v < 0.0) {
                return Err(Error::InvalidArg(format!(
                    "attention row {i} has negative or non-finite entries"
                )));
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidArg(format!(
                    "attention row {i} sums to {sum}, not 1"
                )));
            }
        }
        Ok(AttentionMatrix { data })
    }

    pub fn steps(&self) -> usize {
        self.data.nrows()
    }

    pub fn positions(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    /// Per-row argmax; ties break toward the smaller index.
    pub fn mode(&self) -> Vec<usize> {
        self.data
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                let mut best_v = row[0];
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > best_v {
                        best = j;
                        best_v = v;
                    }
                }
                best
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Fatal alignment error detection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Classification {
    Clean,
    Discontinuous,
    Incomplete,
    Overestimated,
}

impl Classification {
    pub fn label(&self) -> &'static str {
        match self {
            Classification::Clean => "clean",
            Classification::Discontinuous => "discontinuous",
            Classification::Incomplete => "incomplete",
            Classification::Overestimated => "overestimated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "clean" => Some(Classification::Clean),
            "discontinuous" => Some(Classification::Discontinuous),
            "incomplete" => Some(Classification::Incomplete),
            "overestimated" => Some(Classification::Overestimated),
            _ => None,
        }
    }
}

/// Detection thresholds; defaults are declared calibrations, configurable
/// from the CLI.
#[derive(Debug, Clone, Copy)]
pub struct Thresholds {
    /// Largest tolerated backward jump of the mode.
    pub back_tol: usize,
    /// Largest tolerated forward skip of the mode.
    pub fwd_skip: usize,
    /// How far short of the final position the mode may stop.
    pub end_slack: usize,
    /// Longest tolerated constant-mode run, in decoder steps
    /// (40 steps is about 1 s at r = 2 with 12.5 ms frame shift).
    pub dwell_max: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            back_tol: 1,
            fwd_skip: 3,
            end_slack: 1,
            dwell_max: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Evidence {
    /// Mode jumped non-monotonically between `step - 1` and `step`.
    Discontinuous { step: usize, from: usize, to: usize },
    /// Mode never got past `max_position` (needs `positions - 1 - end_slack`).
    Incomplete { max_position: usize },
    /// Mode dwelled at `position` for `run_len` steps starting at `start`.
    Overestimated {
        position: usize,
        start: usize,
        run_len: usize,
    },
}

/// Per-utterance alignment verdict.
#[derive(Debug, Clone)]
pub struct AlignmentReport {
    pub classification: Classification,
    pub evidence: Vec<Evidence>,
    pub mode_sequence: Vec<usize>,
}

/// Classifies an attention matrix against the fatal-error taxonomy.
/// Precedence when several rules trigger: discontinuous > incomplete >
/// overestimated. All triggered rules are kept as evidence.
pub fn detect_alignment_errors(m: &AttentionMatrix, th: &Thresholds) -> AlignmentReport {
    let mode = m.mode();
    let l = m.positions();
    let mut evidence = Vec::new();

    for t in 1..mode.len() {
        let (prev, cur) = (mode[t - 1] as isize, mode[t] as isize);
        let jump = cur - prev;
        if jump < -(th.back_tol as isize) || jump > th.fwd_skip as isize {
            evidence.push(Evidence::Discontinuous {
                step: t,
                from: mode[t - 1],
                to: mode[t],
            });
        }
    }
    let discontinuous = !evidence.is_empty();

    let max_pos = *mode.iter().max().expect("non-empty mode sequence");
    let incomplete = max_pos + 1 + th.end_slack < l;
    if incomplete {
        evidence.push(Evidence::Incomplete {
            max_position: max_pos,
        });
    }

    let mut overestimated = false;
    let mut start = 0;
    for t in 1..=mode.len() {
        if t == mode.len() || mode[t] != mode[start] {
            let run_len = t - start;
            if run_len > th.dwell_max {
                overestimated = true;
                evidence.push(Evidence::Overestimated {
                    position: mode[start],
                    start,
                    run_len,
                });
            }
            start = t;
        }
    }

    let classification = if discontinuous {
        Classification::Discontinuous
    } else if incomplete {
        Classification::Incomplete
    } else if overestimated {
        Classification::Overestimated
    } else {
        Classification::Clean
    };
    AlignmentReport {
        classification,
        evidence,
        mode_sequence: mode,
    }
}

// ---------------------------------------------------------------------------
// Error-rate aggregation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ErrorRateTable {
    pub total: usize,
    pub errors: usize,
    pub discontinuous: usize,
    pub incomplete: usize,
    pub overestimated: usize,
}

impl ErrorRateTable {
    /// Table-style cell: `"38 (7.9 %)"`.
    pub fn formatted(&self) -> String {
        format_rate(self.errors, self.total)
    }
}

/// `"N (P.P %)"` with the percentage to one decimal.
pub fn format_rate(errors: usize, total: usize) -> String {
    let pct = 100.0 * errors as f64 / total as f64;
    format!("{} ({:.1} %)", errors, pct)
}

pub fn aggregate_error_rates(reports: &[AlignmentReport]) -> Result<ErrorRateTable> {
    if reports.is_empty() {
        return Err(Error::InvalidArg(
            "aggregate_error_rates: empty report list".into(),
        ));
    }
    let mut table = ErrorRateTable {
        total: reports.len(),
        errors: 0,
        discontinuous: 0,
        incomplete: 0,
        overestimated: 0,
    };
    for r in reports {
        match r.classification {
            Classification::Clean => {}
            Classification::Discontinuous => {
                table.errors += 1;
                table.discontinuous += 1;
            }
            Classification::Incomplete => {
                table.errors += 1;
                table.incomplete += 1;
            }
            Classification::Overestimated => {
                table.errors += 1;
                table.overestimated += 1;
            }
        }
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// F0 statistics
// ---------------------------------------------------------------------------

/// A fundamental-frequency track; `f0` must be positive wherever `voiced`.
#[derive(Debug, Clone)]
pub struct F0Track {
    pub times: Vec<f64>,
    pub f0: Vec<f64>,
    pub voiced: Vec<bool>,
}

impl F0Track {
    pub fn new(times: Vec<f64>, f0: Vec<f64>, voiced: Vec<bool>) -> Result<Self> {
        if times.len() != f0.len() || f0.len() != voiced.len() {
            return Err(Error::Shape("f0 track: unequal stream lengths".into()));
        }
        for i in 0..f0.len() {
            if voiced[i] && f0[i] <= 0.0 {
                return Err(Error::InvalidArg(format!(
                    "f0 track: voiced frame {i} has non-positive f0 {}",
                    f0[i]
                )));
            }
        }
        Ok(F0Track { times, f0, voiced })
    }

    pub fn duration(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }
}

/// Population standard deviation of F0 over voiced frames.
pub fn f0_std_voiced(track: &F0Track) -> Result<f64> {
    let voiced: Vec<f64> = track
        .f0
        .iter()
        .zip(&track.voiced)
        .filter(|(_, &v)| v)
        .map(|(&f, _)| f)
        .collect();
    if voiced.len() < 2 {
        return Err(Error::InvalidArg(format!(
            "f0_std_voiced: needs at least 2 voiced frames, got {}",
            voiced.len()
        )));
    }
    let n = voiced.len() as f64;
    let mean = voiced.iter().sum::<f64>() / n;
    let var = voiced.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>() / n;
    Ok(var.sqrt())
}

#[derive(Debug, Clone)]
pub struct F0Entry {
    pub duration_sec: f64,
    pub std_hz: f64,
    pub group: String,
}

#[derive(Debug, Clone)]
pub struct F0Summary {
    /// (group, mean std) in first-appearance order; empty groups omitted.
    pub group_means: Vec<(String, f64)>,
    /// Scatter TSV `duration_sec<TAB>std_hz<TAB>group`, one row per utterance.
    pub scatter_tsv: String,
}

pub fn f0_summary(entries: &[F0Entry]) -> F0Summary {
    let mut order: Vec<String> = Vec::new();
    let mut sums: Vec<(f64, usize)> = Vec::new();
    let mut tsv = String::from("duration_sec\tstd_hz\tgroup\n");
    for e in entries {
        let idx = match order.iter().position(|g| *g == e.group) {
            Some(i) => i,
            None => {
                order.push(e.group.clone());
                sums.push((0.0, 0));
                order.len() - 1
            }
        };
        sums[idx].0 += e.std_hz;
        sums[idx].1 += 1;
        let _ = writeln!(tsv, "{}\t{}\t{}", e.duration_sec, e.std_hz, e.group);
    }
    let group_means = order
        .into_iter()
        .zip(sums)
        .map(|(g, (s, n))| (g, s / n as f64))
        .collect();
    F0Summary {
        group_means,
        scatter_tsv: tsv,
    }
}

// ---------------------------------------------------------------------------
// Mann-Whitney U
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct MannWhitney {
    /// U statistic for the first sample.
    pub u: f64,
    /// Two-sided p-value.
    pub p: f64,
}

/// Sample sizes below which the exact permutation distribution is used.
const EXACT_LIMIT: usize = 8;

/// Mann-Whitney U with average ranks for ties. Exact enumeration when either
/// sample has fewer than 8 observations, otherwise a normal approximation
/// with tie and continuity corrections. `p` is symmetric in argument order.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArg("mann_whitney_u: empty sample".into()));
    }
    let n1 = a.len();
    let n2 = b.len();
    let ranks = average_ranks(a, b);
    let r1: f64 = ranks[..n1].iter().sum();
    let u1 = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    let p = if n1.min(n2) < EXACT_LIMIT && n1 + n2 <= 16 {
        exact_two_sided_p(&ranks, n1, u1)
    } else {
        normal_approx_p(&ranks, n1, n2, u1)
    };
    Ok(MannWhitney {
        u: u1,
        p: p.clamp(0.0, 1.0),
    })
}

/// Ranks of the concatenated sample (a then b), ties share average ranks.
fn average_ranks(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len() + b.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let value = |i: usize| if i < a.len() { a[i] } else { b[i - a.len()] };
    idx.sort_by(|&x, &y| value(x).partial_cmp(&value(y)).expect("finite samples"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && value(idx[j]) == value(idx[i]) {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Exact two-sided p: probability over all rank assignments of a deviation
/// `|U - n1*n2/2|` at least as large as observed.
fn exact_two_sided_p(ranks: &[f64], n1: usize, u_obs: f64) -> f64 {
    let n = ranks.len();
    let center = (n1 * (n - n1)) as f64 / 2.0;
    let dev_obs = (u_obs - center).abs();
    let offset = (n1 * (n1 + 1)) as f64 / 2.0;
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut chosen = Vec::with_capacity(n1);
    enumerate_subsets(ranks, n1, 0, 0.0, &mut chosen, &mut |r1_sum| {
        total += 1;
        let u = r1_sum - offset;
        if (u - center).abs() + 1e-9 >= dev_obs {
            hits += 1;
        }
    });
    hits as f64 / total as f64
}

fn enumerate_subsets(
    ranks: &[f64],
    k: usize,
    start: usize,
    sum: f64,
    chosen: &mut Vec<usize>,
    f: &mut impl FnMut(f64),
) {
    if chosen.len() == k {
        f(sum);
        return;
    }
    let remaining = k - chosen.len();
    for i in start..=ranks.len() - remaining {
        chosen.push(i);
        enumerate_subsets(ranks, k, i + 1, sum + ranks[i], chosen, f);
        chosen.pop();
    }
}

fn normal_approx_p(ranks: &[f64], n1: usize, n2: usize, u1: f64) -> f64 {
    let n = (n1 + n2) as f64;
    let nm = (n1 * n2) as f64;
    let center = nm / 2.0;
    // tie correction: sum over tie groups of t^3 - t
    let mut sorted = ranks.to_vec();
    sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let var = nm / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0; // all observations identical
    }
    let dev = (u1 - center).abs();
    let z = (dev - 0.5).max(0.0) / var.sqrt();
    2.0 * (1.0 - normal_cdf(z))
}

/// Standard normal CDF via the Abramowitz-Stegun 7.1.26 erf approximation
/// (absolute error < 1.5e-7, ample for p-values).
fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

const ATTN_MAGIC: &[u8; 4] = b"ATTN";
const ATTN_VERSION: u32 = 1;

/// Writes `magic "ATTN", u32 version, u32 T, u32 L, T*L f32 LE row-major`.
pub fn write_attn(path: &Path, m: &AttentionMatrix) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * m.steps() * m.positions());
    buf.extend_from_slice(ATTN_MAGIC);
    buf.extend_from_slice(&ATTN_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.steps() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.positions() as u32).to_le_bytes());
    for &v in m.data.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_attn(path: &Path) -> Result<AttentionMatrix> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[0..4] != ATTN_MAGIC {
        return Err(Error::Format(format!("{}: not an ATTN file", path.display())));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != ATTN_VERSION {
        return Err(Error::Format(format!("unsupported ATTN version {version}")));
    }
    let t = u32_at(8) as usize;
    let l = u32_at(12) as usize;
    if bytes.len() != 16 + 4 * t * l {
        return Err(Error::Format(format!(
            "{}: truncated ATTN payload",
            path.display()
        )));
    }
    let mut data = Array2::zeros((t, l));
    for (i, v) in data.iter_mut().enumerate() {
        let off = 16 + 4 * i;
        *v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
    }
    AttentionMatrix::new(data)
}

/// CSV mirror of the `.attn` format, one decoder step per line.
pub fn write_attn_csv(path: &Path, m: &AttentionMatrix) -> Result<()> {
    let mut out = String::new();
    for row in m.data.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads `time_sec,f0_hz,voiced` CSV with a header row.
pub fn read_f0_csv(path: &Path) -> Result<F0Track> {
    let text = fs::read_to_string(path)?;
    let mut times = Vec::new();
    let mut f0 = Vec::new();
    let mut voiced = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line.trim() != "time_sec,f0_hz,voiced" {
                return Err(Error::Format(format!(
                    "{}: expected header 'time_sec,f0_hz,voiced'",
                    path.display()
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Format(format!(
                "{}:{}: expected 3 fields",
                path.display(),
                lineno + 1
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad number '{s}'")))
        };
        times.push(parse(fields[0])?);
        f0.push(parse(fields[1])?);
        voiced.push(parse(fields[2])? != 0.0);
    }
    F0Track::new(times, f0, voiced)
}

pub fn write_f0_csv(path: &Path, track: &F0Track) -> Result<()> {
    let mut out = String::from("time_sec,f0_hz,voiced\n");
    for i in 0..track.times.len() {
        let _ = writeln!(
            out,
            "{},{},{}",
            track.times[i],
            track.f0[i],
            if track.voiced[i] { 1 } else { 0 }
        );
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads one score per line (blank lines and `#` comments skipped).
pub fn read_scores(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(
            line.parse()
                .map_err(|_| Error::Format(format!("bad score '{line}'")))?,
        );
    }
    Ok(out)
}
