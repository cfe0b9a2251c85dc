//! Synthetic corpora with ground-truth alignments, planted-error attention
//! matrices for detector validation, and the experiment grid runner.

use std::path::Path;

use ndarray::Array2;

use crate::config::KvConfig;
use crate::diagnostics::{
    aggregate_error_rates, detect_alignment_errors, write_attn, AttentionMatrix, Classification,
    ErrorRateTable, Thresholds,
};
use crate::graph::{Graph, Scalar};
use crate::layers::Mode;
use crate::model::{
    build_model, write_mel, Model, ModelConfig, SymbolSequence,
};
use crate::rng::RngStream;
use crate::training::{train, validation_mel_l1, TrainConfig, Utterance};
use crate::{Error, Result};

/// Mel bins in every toy corpus (80-bin convention).
pub const MEL_BINS: usize = 80;
/// Accent boost is added to this bin range when the accent bit is set.
pub const ACCENT_BAND: std::ops::Range<usize> = 60..80;

// ---------------------------------------------------------------------------
// Corpus specification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpusSpec {
    pub vocab_size: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    /// Utterance length range in symbols, inclusive.
    pub len_range: (usize, usize),
    /// Per-symbol duration range in frames, inclusive; the duration is drawn
    /// once per vocabulary symbol and reused everywhere.
    pub dur_range: (usize, usize),
    /// Additive offset on the accent band when a symbol's accent bit is 1.
    pub accent_boost: f64,
    /// Gaussian noise added to every mel value before clamping to [0, 1].
    pub noise_sigma: f64,
    /// Emit a parallel accent-bit stream per symbol.
    pub with_accents: bool,
    pub seed: u64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        ToyCorpusSpec {
            vocab_size: 30,
            train_count: 200,
            val_count: 50,
            test_count: 50,
            len_range: (4, 8),
            dur_range: (2, 2),
            accent_boost: 0.3,
            noise_sigma: 0.02,
            with_accents: true,
            seed: 1,
        }
    }
}

impl ToyCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidArg("vocab_size must be at least 2".into()));
        }
        if self.train_count == 0 {
            return Err(Error::InvalidArg("train_count must be positive".into()));
        }
        if self.len_range.0 == 0 || self.len_range.0 > self.len_range.1 {
            return Err(Error::InvalidArg("bad symbol length range".into()));
        }
        if self.dur_range.0 == 0 || self.dur_range.0 > self.dur_range.1 {
            return Err(Error::InvalidArg("bad duration range".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidArg("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("vocab_size", &self.vocab_size.to_string());
        kv.set("train_count", &self.train_count.to_string());
        kv.set("val_count", &self.val_count.to_string());
        kv.set("test_count", &self.test_count.to_string());
        kv.set("len_min", &self.len_range.0.to_string());
        kv.set("len_max", &self.len_range.1.to_string());
        kv.set("dur_min", &self.dur_range.0.to_string());
        kv.set("dur_max", &self.dur_range.1.to_string());
        kv.set("accent_boost", &self.accent_boost.to_string());
        kv.set("noise_sigma", &self.noise_sigma.to_string());
        kv.set("with_accents", &self.with_accents.to_string());
        kv.set("seed", &self.seed.to_string());
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = ToyCorpusSpec::default();
        let spec = ToyCorpusSpec {
            vocab_size: kv.get_or("vocab_size", d.vocab_size)?,
            train_count: kv.get_or("train_count", d.train_count)?,
            val_count: kv.get_or("val_count", d.val_count)?,
            test_count: kv.get_or("test_count", d.test_count)?,
            len_range: (kv.get_or("len_min", d.len_range.0)?, kv.get_or("len_max", d.len_range.1)?),
            dur_range: (kv.get_or("dur_min", d.dur_range.0)?, kv.get_or("dur_max", d.dur_range.1)?),
            accent_boost: kv.get_or("accent_boost", d.accent_boost)?,
            noise_sigma: kv.get_or("noise_sigma", d.noise_sigma)?,
            with_accents: kv.get_or("with_accents", d.with_accents)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

// ---------------------------------------------------------------------------
// Corpus generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ToyUtterance {
    pub utt: Utterance,
    /// Per-frame source position (index into the symbol sequence).
    pub alignment: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub spec: ToyCorpusSpec,
    pub train: Vec<ToyUtterance>,
    pub val: Vec<ToyUtterance>,
    pub test: Vec<ToyUtterance>,
}

/// Fixed per-symbol mel prototypes in [0.1, 0.9] and per-symbol durations,
/// both fully determined by the spec seed.
pub fn symbol_prototypes(spec: &ToyCorpusSpec) -> (Array2<f64>, Vec<usize>) {
    let root = RngStream::new(spec.seed);
    let mut protos = Array2::zeros((spec.vocab_size, MEL_BINS));
    let mut durs = Vec::with_capacity(spec.vocab_size);
    for s in 0..spec.vocab_size {
        let mut rng = root.derive(&format!("proto-{s}"));
        for j in 0..MEL_BINS {
            protos[(s, j)] = 0.1 + 0.8 * rng.uniform();
        }
        let mut drng = root.derive(&format!("dur-{s}"));
        let span = spec.dur_range.1 - spec.dur_range.0 + 1;
        durs.push(spec.dur_range.0 + drng.below(span as u64) as usize);
    }
    (protos, durs)
}

fn gen_symbols(spec: &ToyCorpusSpec, rng: &mut RngStream) -> (Vec<usize>, Option<Vec<usize>>) {
    let span = spec.len_range.1 - spec.len_range.0 + 1;
    let len = spec.len_range.0 + rng.below(span as u64) as usize;
    let symbols: Vec<usize> = (0..len)
        .map(|_| rng.below(spec.vocab_size as u64) as usize)
        .collect();
    let accents = spec
        .with_accents
        .then(|| (0..len).map(|_| rng.bernoulli(0.5) as usize).collect());
    (symbols, accents)
}

fn render_mel(
    spec: &ToyCorpusSpec,
    protos: &Array2<f64>,
    durs: &[usize],
    symbols: &[usize],
    accents: Option<&[usize]>,
    noise_rng: &mut RngStream,
) -> (Array2<f64>, Vec<u32>) {
    let frames: usize = symbols.iter().map(|&s| durs[s]).sum();
    let mut mel = Array2::zeros((frames, MEL_BINS));
    let mut alignment = Vec::with_capacity(frames);
    let mut f = 0;
    for (pos, &s) in symbols.iter().enumerate() {
        let accent = accents.map(|a| a[pos] == 1).unwrap_or(false);
        for _ in 0..durs[s] {
            for j in 0..MEL_BINS {
                let mut v = protos[(s, j)];
                if accent && ACCENT_BAND.contains(&j) {
                    v = (v + spec.accent_boost).clamp(0.0, 1.0);
                }
                if spec.noise_sigma > 0.0 {
                    v = (v + spec.noise_sigma * noise_rng.normal()).clamp(0.0, 1.0);
                }
                mel[(f, j)] = v;
            }
            alignment.push(pos as u32);
            f += 1;
        }
    }
    (mel, alignment)
}

/// Generates the full corpus in memory. Deterministic per spec.
pub fn gen_corpus(spec: &ToyCorpusSpec) -> Result<ToyCorpus> {
    spec.validate()?;
    let (protos, durs) = symbol_prototypes(spec);
    let root = RngStream::new(spec.seed);

    let mut splits: Vec<Vec<(Vec<usize>, Option<Vec<usize>>)>> = Vec::new();
    for (split, count) in [
        ("train", spec.train_count),
        ("val", spec.val_count),
        ("test", spec.test_count),
    ] {
        let mut utts = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = root.derive(&format!("utt-{split}-{i}"));
            utts.push(gen_symbols(spec, &mut rng));
        }
        splits.push(utts);
    }

    // guarantee every symbol appears in the training split
    let n = splits[0].len();
    for s in 0..spec.vocab_size {
        if !splits[0].iter().any(|(sym, _)| sym.contains(&s)) {
            let (sym, _) = &mut splits[0][s % n];
            let pos = (s / n) % sym.len();
            sym[pos] = s;
        }
    }

    let mut built: Vec<Vec<ToyUtterance>> = Vec::new();
    for (split_idx, split) in ["train", "val", "test"].iter().enumerate() {
        let mut out = Vec::new();
        for (i, (symbols, accents)) in splits[split_idx].iter().enumerate() {
            let mut noise = root.derive(&format!("noise-{split}-{i}"));
            let (mel, alignment) =
                render_mel(spec, &protos, &durs, symbols, accents.as_deref(), &mut noise);
            let inputs = match accents {
                Some(a) => SymbolSequence::with_accents(symbols.clone(), a.clone()),
                None => SymbolSequence::plain(symbols.clone()),
            };
            out.push(ToyUtterance {
                utt: Utterance {
                    id: format!("{split}-{i:04}"),
                    inputs,
                    mel,
                },
                alignment,
            });
        }
        built.push(out);
    }
    let test = built.pop().unwrap();
    let val = built.pop().unwrap();
    let train = built.pop().unwrap();
    Ok(ToyCorpus {
        spec: spec.clone(),
        train,
        val,
        test,
    })
}

// ---------------------------------------------------------------------------
// Corpus files
// ---------------------------------------------------------------------------

fn write_utterance(dir: &Path, index: usize, tu: &ToyUtterance) -> Result<()> {
    let stem = format!("{index:04}");
    let mut sym = String::new();
    sym.push_str("symbols = ");
    sym.push_str(
        &tu.utt
            .inputs
            .symbols
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(" "),
    );
    sym.push('\n');
    if let Some(acc) = &tu.utt.inputs.accents {
        sym.push_str("accents = ");
        sym.push_str(&acc.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(" "));
        sym.push('\n');
    }
    std::fs::write(dir.join(format!("{stem}.sym")), sym)?;
    write_mel(&dir.join(format!("{stem}.mel")), &tu.utt.mel)?;
    let mut ali = Vec::with_capacity(tu.alignment.len() * 4);
    for &a in &tu.alignment {
        ali.extend_from_slice(&a.to_le_bytes());
    }
    std::fs::write(dir.join(format!("{stem}.ali")), ali)?;
    Ok(())
}

fn read_utterance(dir: &Path, index: usize, split: &str) -> Result<ToyUtterance> {
    let stem = format!("{index:04}");
    let kv = KvConfig::load(&dir.join(format!("{stem}.sym")))?;
    let parse_ids = |s: &str| -> Result<Vec<usize>> {
        s.split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::Format(format!("bad symbol id {t:?}")))
            })
            .collect()
    };
    let symbols = parse_ids(
        kv.get("symbols")
            .ok_or_else(|| Error::Format("missing symbols line".into()))?,
    )?;
    let accents = kv.get("accents").map(parse_ids).transpose()?;
    let mel = crate::model::read_mel(&dir.join(format!("{stem}.mel")))?;
    let ali_bytes = std::fs::read(dir.join(format!("{stem}.ali")))?;
    if ali_bytes.len() % 4 != 0 {
        return Err(Error::Format("alignment file length not a multiple of 4".into()));
    }
    let alignment: Vec<u32> = ali_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let inputs = match accents {
        Some(a) => SymbolSequence::with_accents(symbols, a),
        None => SymbolSequence::plain(symbols),
    };
    Ok(ToyUtterance {
        utt: Utterance {
            id: format!("{split}-{index:04}"),
            inputs,
            mel,
        },
        alignment,
    })
}

/// Writes the corpus as `meta.txt` plus `train/ val/ test/` splits with
/// per-utterance `.sym`, `.mel`, and `.ali` files.
pub fn write_corpus(corpus: &ToyCorpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut meta = corpus.spec.to_kv();
    meta.set("format_version", "1");
    meta.set("mel_bins", &MEL_BINS.to_string());
    meta.save(&dir.join("meta.txt"))?;
    for (split, utts) in [
        ("train", &corpus.train),
        ("val", &corpus.val),
        ("test", &corpus.test),
    ] {
        let sub = dir.join(split);
        std::fs::create_dir_all(&sub)?;
        for (i, tu) in utts.iter().enumerate() {
            write_utterance(&sub, i, tu)?;
        }
    }
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<ToyCorpus> {
    let meta = KvConfig::load(&dir.join("meta.txt"))?;
    let spec = ToyCorpusSpec::from_kv(&meta)?;
    let mut splits = Vec::new();
    for (split, count) in [
        ("train", spec.train_count),
        ("val", spec.val_count),
        ("test", spec.test_count),
    ] {
        let sub = dir.join(split);
        let mut utts = Vec::with_capacity(count);
        for i in 0..count {
            utts.push(read_utterance(&sub, i, split)?);
        }
        splits.push(utts);
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(ToyCorpus {
        spec,
        train,
        val,
        test,
    })
}

// ---------------------------------------------------------------------------
// Planted attention matrices
// ---------------------------------------------------------------------------

/// Evenly spread monotone mode path from 0 to `pmax` over `t` steps.
fn monotone_path(t: usize, pmax: usize) -> Vec<usize> {
    if t == 1 {
        return vec![pmax];
    }
    (0..t).map(|i| i * pmax / (t - 1)).collect()
}

fn rows_from_path(path: &[usize], l: usize, rng: &mut RngStream) -> Array2<f64> {
    let t = path.len();
    let mut m = Array2::zeros((t, l));
    for (i, &p) in path.iter().enumerate() {
        let mut row: Vec<f64> = (0..l).map(|_| 0.01 * rng.uniform()).collect();
        row[p] = 0.75 + 0.1 * rng.uniform();
        let sum: f64 = row.iter().sum();
        for (j, v) in row.iter().enumerate() {
            m[(i, j)] = v / sum;
        }
    }
    m
}

/// Generates an attention matrix whose classification at default thresholds
/// is `kind` by construction, violating the triggered threshold by at least
/// a factor of two. Returns the matrix and its planted label.
pub fn gen_planted_attention(
    kind: Classification,
    t: usize,
    l: usize,
    seed: u64,
) -> Result<(AttentionMatrix, Classification)> {
    if t < 4 || l < 4 {
        return Err(Error::InvalidArg("planted matrices need T, L >= 4".into()));
    }
    let th = Thresholds::default();
    let mut rng = RngStream::new(seed).derive(&format!("planted-{}-{t}-{l}", kind.label()));
    let path = match kind {
        Classification::Clean => {
            if t > th.dwell_max * l {
                return Err(Error::InvalidArg(
                    "T too large for a clean path at this L".into(),
                ));
            }
            monotone_path(t, l - 1)
        }
        Classification::Discontinuous => {
            // monotone to L-1, then a backward jump of at least 2x back_tol
            let jump = (l - 1).min(2 * (th.back_tol + 1));
            let mut p = monotone_path(t - 1, l - 1);
            p.push(l - 1 - jump);
            p
        }
        Classification::Incomplete => {
            // stop 2x(end_slack + 1) positions short of the final input
            let max_pos = (l - 1).saturating_sub(2 * (th.end_slack + 1));
            if t > th.dwell_max * (max_pos + 1) {
                return Err(Error::InvalidArg(
                    "T too large for an incomplete path at this L".into(),
                ));
            }
            monotone_path(t, max_pos)
        }
        Classification::Overestimated => {
            let run = 2 * th.dwell_max;
            if t < run + l {
                return Err(Error::InvalidArg(format!(
                    "overestimated plant needs T >= {}",
                    run + l
                )));
            }
            let tail = t - run;
            if tail > th.dwell_max * l {
                return Err(Error::InvalidArg(
                    "T too large for the post-dwell path at this L".into(),
                ));
            }
            let mut p = vec![0; run];
            p.extend(monotone_path(tail, l - 1));
            p
        }
    };
    let m = AttentionMatrix::new(rows_from_path(&path, l, &mut rng))?;
    Ok((m, kind))
}

// ---------------------------------------------------------------------------
// Accent sensitivity
// ---------------------------------------------------------------------------

/// Mean absolute change of the teacher-forced output inside and outside the
/// accent band when one symbol's accent bit is flipped. The ground-truth
/// feedback and all stochastic draws are held fixed, so the two passes
/// differ only through the accent conditioning path.
pub fn accent_band_sensitivity<S: Scalar>(
    model: &mut Model<S>,
    tu: &ToyUtterance,
    flip_pos: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let accents = tu
        .utt
        .inputs
        .accents
        .as_ref()
        .ok_or_else(|| Error::InvalidArg("utterance has no accent stream".into()))?;
    if flip_pos >= accents.len() {
        return Err(Error::InvalidArg("flip position out of range".into()));
    }
    let run = |model: &Model<S>, inputs: &SymbolSequence| -> Result<Array2<f64>> {
        let g: Graph<S> = Graph::new();
        let mut rng = RngStream::new(seed).derive("accent-probe");
        let target = tu.utt.mel.mapv(S::of);
        let tf = model.teacher_forced(&g, inputs, &target, Mode::Eval, &mut rng)?;
        Ok(g.value(tf.mel_after).mapv(|x| x.to_f64()))
    };
    let base = run(model, &tu.utt.inputs)?;
    let mut flipped = accents.clone();
    flipped[flip_pos] = 1 - flipped[flip_pos];
    let alt_inputs = SymbolSequence::with_accents(tu.utt.inputs.symbols.clone(), flipped);
    let alt = run(model, &alt_inputs)?;

    // frames belonging to the flipped symbol, from the ground-truth alignment
    let frames: Vec<usize> = tu
        .alignment
        .iter()
        .enumerate()
        .filter(|(_, &p)| p as usize == flip_pos)
        .map(|(f, _)| f)
        .collect();
    if frames.is_empty() {
        return Err(Error::InvalidArg("flipped symbol covers no frames".into()));
    }
    let (mut in_band, mut out_band) = (0.0, 0.0);
    for &f in &frames {
        for j in 0..MEL_BINS {
            let d = (base[(f, j)] - alt[(f, j)]).abs();
            if ACCENT_BAND.contains(&j) {
                in_band += d;
            } else {
                out_band += d;
            }
        }
    }
    in_band /= (frames.len() * ACCENT_BAND.len()) as f64;
    out_band /= (frames.len() * (MEL_BINS - ACCENT_BAND.len())) as f64;
    Ok((in_band, out_band))
}

// ---------------------------------------------------------------------------
// Experiment grid
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GridEntry {
    pub name: String,
    pub config: ModelConfig,
    pub seed: u64,
}

pub struct ConfigResult {
    pub name: String,
    pub config: ModelConfig,
    /// Per-config failure message when training or synthesis broke down.
    pub failure: Option<String>,
    pub error_table: Option<ErrorRateTable>,
    pub val_mel_l1: Option<f64>,
    pub steps_run: usize,
}

pub struct ExperimentReport {
    pub results: Vec<ConfigResult>,
}

impl ExperimentReport {
    /// Error-table rows in the published layout: one line per system with
    /// parameter size, encoder, self-attention, and the error-rate cell.
    pub fn formatted(&self) -> String {
        let mut out = String::new();
        out.push_str("parameter_size\tencoder\tself_attention\tinput\talignment_errors\tval_mel_l1\n");
        for r in &self.results {
            let cell = match (&r.failure, &r.error_table) {
                (Some(msg), _) => format!("failed: {msg}"),
                (None, Some(t)) => t.formatted(),
                (None, None) => "n/a".into(),
            };
            let val = r
                .val_mel_l1
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "n/a".into());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.config.param_size.label(),
                r.config.encoder.label(),
                if r.config.self_attention { "yes" } else { "no" },
                r.config.input_kind.label(),
                cell,
                val
            ));
        }
        out
    }
}

fn run_one_config(
    entry: &GridEntry,
    corpus: &ToyCorpus,
    cfg: &TrainConfig,
    out_dir: &Path,
    max_synth_steps: usize,
) -> Result<(ErrorRateTable, f64, usize)> {
    std::fs::create_dir_all(out_dir)?;
    entry
        .config
        .to_kv()
        .save(&out_dir.join("model_config.txt"))?;
    let mut model: Model<f32> = build_model(&entry.config, entry.seed)?;
    let train_utts: Vec<Utterance> = corpus.train.iter().map(|t| t.utt.clone()).collect();
    let val_utts: Vec<Utterance> = corpus.val.iter().map(|t| t.utt.clone()).collect();
    let mut tc = cfg.clone();
    tc.seed = entry.seed;
    let outcome = train(&mut model, &train_utts, &val_utts, &tc, out_dir)?;

    let synth_dir = out_dir.join("test");
    std::fs::create_dir_all(&synth_dir)?;
    let mut reports = Vec::new();
    for (i, tu) in corpus.test.iter().enumerate() {
        let mut rng = RngStream::new(entry.seed).derive(&format!("synth-{i}"));
        let res = model.synthesize(&tu.utt.inputs, max_synth_steps, 0.5, &mut rng)?;
        write_attn(&synth_dir.join(format!("{i:04}.attn")), &res.attention)?;
        write_mel(&synth_dir.join(format!("{i:04}.mel")), &res.mel_after)?;
        reports.push(detect_alignment_errors(&res.attention, &Thresholds::default()));
    }
    let table = aggregate_error_rates(&reports)?;
    let val = validation_mel_l1(&mut model, &val_utts, val_utts.len(), tc.seed)?;
    let mut summary = String::new();
    summary.push_str(&format!("alignment_errors = {}\n", table.formatted()));
    summary.push_str(&format!("val_mel_l1 = {val:.6}\n"));
    summary.push_str(&format!("steps_run = {}\n", outcome.steps_run));
    std::fs::write(out_dir.join("summary.txt"), summary)?;
    Ok((table, val, outcome.steps_run))
}

/// Trains and evaluates every grid entry, isolating failures so the rest of
/// the grid still runs. An empty grid yields an empty report.
pub fn run_experiment(
    grid: &[GridEntry],
    corpus: &ToyCorpus,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<ExperimentReport> {
    std::fs::create_dir_all(out_dir)?;
    let max_frames = corpus
        .test
        .iter()
        .map(|t| t.utt.mel.nrows())
        .max()
        .unwrap_or(0);
    let mut results = Vec::new();
    for entry in grid {
        let sub = out_dir.join(&entry.name);
        let r = entry.config.reduction_factor.max(1);
        let max_synth_steps = (2 * max_frames / r).max(8);
        match run_one_config(entry, corpus, cfg, &sub, max_synth_steps) {
            Ok((table, val, steps)) => results.push(ConfigResult {
                name: entry.name.clone(),
                config: entry.config.clone(),
                failure: None,
                error_table: Some(table),
                val_mel_l1: Some(val),
                steps_run: steps,
            }),
            Err(e) => results.push(ConfigResult {
                name: entry.name.clone(),
                config: entry.config.clone(),
                failure: Some(e.to_string()),
                error_table: None,
                val_mel_l1: None,
                steps_run: 0,
            }),
        }
    }
    let report = ExperimentReport { results };
    std::fs::write(out_dir.join("report.tsv"), report.formatted())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> ToyCorpusSpec {
        ToyCorpusSpec {
            vocab_size: 6,
            train_count: 12,
            val_count: 3,
            test_count: 3,
            len_range: (3, 6),
            dur_range: (2, 3),
            noise_sigma: 0.0,
            seed: 11,
            ..ToyCorpusSpec::default()
        }
    }

    #[test]
    fn corpus_is_deterministic_and_well_formed() {
        let spec = small_spec();
        let a = gen_corpus(&spec).unwrap();
        let b = gen_corpus(&spec).unwrap();
        assert_eq!(a.train.len(), 12);
        for (x, y) in a.train.iter().zip(b.train.iter()) {
            assert_eq!(x.utt.mel, y.utt.mel);
            assert_eq!(x.utt.inputs, y.utt.inputs);
            assert_eq!(x.alignment, y.alignment);
        }
        let (_, durs) = symbol_prototypes(&spec);
        for tu in a.train.iter().chain(a.val.iter()).chain(a.test.iter()) {
            let expected: usize = tu.utt.inputs.symbols.iter().map(|&s| durs[s]).sum();
            assert_eq!(tu.utt.mel.nrows(), expected);
            assert_eq!(tu.alignment.len(), expected);
            assert!(tu.utt.mel.iter().all(|&v| (0.0..=1.0).contains(&v)));
            // alignment monotone and onto 0..L-1
            let l = tu.utt.inputs.len() as u32;
            assert_eq!(tu.alignment[0], 0);
            assert_eq!(*tu.alignment.last().unwrap(), l - 1);
            for w in tu.alignment.windows(2) {
                assert!(w[1] == w[0] || w[1] == w[0] + 1);
            }
        }
    }

    #[test]
    fn every_symbol_appears_in_training_split() {
        let spec = ToyCorpusSpec {
            vocab_size: 25,
            train_count: 25,
            len_range: (3, 4),
            ..small_spec()
        };
        let corpus = gen_corpus(&spec).unwrap();
        for s in 0..spec.vocab_size {
            assert!(
                corpus
                    .train
                    .iter()
                    .any(|t| t.utt.inputs.symbols.contains(&s)),
                "symbol {s} missing from training split"
            );
        }
    }

    #[test]
    fn sigma_zero_repeats_prototype_rows() {
        let spec = ToyCorpusSpec {
            noise_sigma: 0.0,
            ..small_spec()
        };
        let corpus = gen_corpus(&spec).unwrap();
        let tu = &corpus.train[0];
        let (_, durs) = symbol_prototypes(&spec);
        let d0 = durs[tu.utt.inputs.symbols[0]];
        for f in 1..d0 {
            assert_eq!(tu.utt.mel.row(f), tu.utt.mel.row(0));
        }
    }

    #[test]
    fn accent_flip_changes_only_the_band_frames() {
        let spec = ToyCorpusSpec {
            noise_sigma: 0.0,
            ..small_spec()
        };
        let (protos, durs) = symbol_prototypes(&spec);
        let symbols = vec![1, 2, 3];
        let a0 = vec![0, 0, 0];
        let a1 = vec![0, 1, 0];
        let mut rng = RngStream::new(0).derive("x");
        let (m0, _) = render_mel(&spec, &protos, &durs, &symbols, Some(&a0), &mut rng);
        let (m1, _) = render_mel(&spec, &protos, &durs, &symbols, Some(&a1), &mut rng);
        let d1 = durs[symbols[0]];
        let d2 = durs[symbols[1]];
        for f in 0..m0.nrows() {
            for j in 0..MEL_BINS {
                let affected = (d1..d1 + d2).contains(&f) && ACCENT_BAND.contains(&j);
                if affected {
                    assert!(
                        (m1[(f, j)] - m0[(f, j)]).abs() > 0.0
                            || m0[(f, j)] + spec.accent_boost > 1.0
                    );
                } else {
                    assert_eq!(m0[(f, j)], m1[(f, j)]);
                }
            }
        }
    }

    #[test]
    fn rejects_tiny_vocab() {
        let spec = ToyCorpusSpec {
            vocab_size: 1,
            ..small_spec()
        };
        assert!(gen_corpus(&spec).is_err());
    }

    #[test]
    fn corpus_files_round_trip() {
        let spec = small_spec();
        let corpus = gen_corpus(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&corpus, dir.path()).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(loaded.spec, spec);
        assert_eq!(loaded.train.len(), corpus.train.len());
        for (a, b) in corpus.train.iter().zip(loaded.train.iter()) {
            assert_eq!(a.utt.inputs, b.utt.inputs);
            assert_eq!(a.alignment, b.alignment);
            // mel survives the f32 file format
            for (x, y) in a.utt.mel.iter().zip(b.utt.mel.iter()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn write_corpus_is_byte_deterministic() {
        let spec = small_spec();
        let corpus = gen_corpus(&spec).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_corpus(&corpus, d1.path()).unwrap();
        write_corpus(&corpus, d2.path()).unwrap();
        for split in ["train", "val", "test"] {
            for i in 0..3 {
                for ext in ["sym", "mel", "ali"] {
                    let f1 = std::fs::read(d1.path().join(split).join(format!("{i:04}.{ext}"))).unwrap();
                    let f2 = std::fs::read(d2.path().join(split).join(format!("{i:04}.{ext}"))).unwrap();
                    assert_eq!(f1, f2);
                }
            }
        }
    }

    #[test]
    fn planted_matrices_match_their_labels() {
        let cases = [
            (Classification::Clean, 30, 8),
            (Classification::Discontinuous, 25, 8),
            (Classification::Incomplete, 30, 10),
            (Classification::Overestimated, 95, 6),
        ];
        for (kind, t, l) in cases {
            for seed in 0..20 {
                let (m, label) = gen_planted_attention(kind, t, l, seed).unwrap();
                let report = detect_alignment_errors(&m, &Thresholds::default());
                assert_eq!(
                    report.classification, label,
                    "kind {:?} T={t} L={l} seed={seed}: got {:?}",
                    kind, report.classification
                );
            }
        }
    }

    #[test]
    fn planted_rejects_degenerate_sizes() {
        assert!(gen_planted_attention(Classification::Clean, 3, 8, 0).is_err());
        assert!(gen_planted_attention(Classification::Clean, 8, 3, 0).is_err());
        assert!(gen_planted_attention(Classification::Overestimated, 20, 6, 0).is_err());
    }

    #[test]
    fn empty_grid_reports_empty() {
        let spec = small_spec();
        let corpus = gen_corpus(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let report =
            run_experiment(&[], &corpus, &TrainConfig::default(), dir.path()).unwrap();
        assert!(report.results.is_empty());
        let text = std::fs::read_to_string(dir.path().join("report.tsv")).unwrap();
        assert_eq!(text.lines().count(), 1); // header only
    }

    #[test]
    fn grid_isolates_failing_configs() {
        let spec = small_spec();
        let corpus = gen_corpus(&spec).unwrap();
        // vocab too small for the corpus symbols: training fails with
        // OutOfVocab, but the report still carries the row
        let mut bad = ModelConfig::preset(
            crate::model::EncoderKind::Cbhl,
            false,
            crate::model::ParamSize::Small,
            crate::model::InputKind::PhonemeAccent,
            2,
            2,
        )
        .unwrap();
        bad.widths.embed_dim = 4;
        bad.widths.encoder_prenet = (4, 3);
        bad.widths.accent_embed_dim = 3;
        bad.widths.accent_prenet = (3, 2);
        bad.widths.encoder_units = 3;
        bad.widths.bank_k = 2;
        bad.widths.bank_channels = 2;
        bad.widths.highway_depth = 1;
        bad.widths.decoder_prenet = (4, 3);
        bad.widths.attention_rnn = 4;
        bad.widths.attention_dim = 3;
        bad.widths.decoder_rnn = 4;
        bad.mel_bins = MEL_BINS;
        bad.validate().unwrap();
        let grid = vec![GridEntry {
            name: "bad".into(),
            config: bad,
            seed: 0,
        }];
        let cfg = TrainConfig {
            max_steps: 2,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&grid, &corpus, &cfg, dir.path()).unwrap();
        assert_eq!(report.results.len(), 1);
        assert!(report.results[0].failure.is_some());
        let text = report.formatted();
        assert!(text.contains("failed:"), "{text}");
    }
}
