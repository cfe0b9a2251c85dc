//! Batch command-line interface: corpus generation, training, synthesis,
//! alignment diagnostics, F0 statistics, rank tests, and grid runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use taclab::config::KvConfig;
use taclab::diagnostics::{
    aggregate_error_rates, detect_alignment_errors, f0_std_voiced, f0_summary, mann_whitney_u,
    read_attn, read_f0_csv, read_scores, write_attn, write_attn_csv, F0Entry, Thresholds,
};
use taclab::harness::{
    gen_corpus, load_corpus, run_experiment, write_corpus, GridEntry, ToyCorpus, ToyCorpusSpec,
    MEL_BINS,
};
use taclab::model::{
    build_model, load_checkpoint, write_mel, EncoderKind, InputKind, Model, ModelConfig,
    ParamSize, SymbolSequence,
};
use taclab::rng::RngStream;
use taclab::training::{train, TrainConfig};
use taclab::{Error, Result};

#[derive(Parser)]
#[command(name = "taclab", version = taclab::VERSION, about = "Sequence-to-sequence speech-model laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus with ground-truth alignments
    GenCorpus {
        /// Key-value spec file; defaults apply for missing keys
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override a spec key, e.g. --set noise_sigma=0
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Train a model on a generated corpus
    Train {
        /// Key-value config with `model.` and `train.` prefixed keys
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Synthesize from a checkpoint and a `.sym` input file
    Synth {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        max_steps: usize,
        #[arg(long, default_value_t = 0.5)]
        stop_threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Classify `.attn` files against the fatal-alignment-error taxonomy
    Diagnose {
        #[arg(long)]
        attn_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        back_tol: usize,
        #[arg(long, default_value_t = 3)]
        fwd_skip: usize,
        #[arg(long, default_value_t = 1)]
        end_slack: usize,
        #[arg(long, default_value_t = 40)]
        dwell_max: usize,
        /// Optional per-file classification TSV
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// F0 standard deviation per track plus per-group means
    F0Stats {
        /// Directory of F0 CSV tracks
        #[arg(long)]
        tracks: PathBuf,
        /// Key-value file mapping track stem to group label
        #[arg(long)]
        groups: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mann-Whitney U test between two score files
    RankTest {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Print the summary report of a finished grid run
    Report {
        #[arg(long)]
        grid_dir: PathBuf,
    },
    /// Train and evaluate a grid of model configurations
    Grid {
        #[arg(long)]
        configs: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set")]
        sets: Vec<String>,
    },
}

enum RunErr {
    Usage(String),
    Data(Error),
}

impl From<Error> for RunErr {
    fn from(e: Error) -> Self {
        RunErr::Data(e)
    }
}

impl From<std::io::Error> for RunErr {
    fn from(e: std::io::Error) -> Self {
        RunErr::Data(Error::Io(e))
    }
}

fn apply_sets(kv: &mut KvConfig, sets: &[String]) -> std::result::Result<(), RunErr> {
    for s in sets {
        match s.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => kv.set(k.trim(), v.trim()),
            _ => {
                return Err(RunErr::Usage(format!(
                    "--set expects KEY=VALUE, got {s:?}"
                )))
            }
        }
    }
    Ok(())
}

fn load_kv_opt(path: Option<&Path>) -> Result<KvConfig> {
    match path {
        Some(p) => KvConfig::load(p),
        None => Ok(KvConfig::new()),
    }
}

/// flag > file > default: overlays `prefix.`-scoped keys onto `base`.
fn overlay_prefixed(base: &mut KvConfig, kv: &KvConfig, prefix: &str) {
    for (k, v) in kv.entries() {
        if let Some(stripped) = k.strip_prefix(prefix) {
            base.set(stripped, v);
        }
    }
}

fn train_cfg_from_kv(kv: &KvConfig) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        lr_start: kv.get_or("train.lr_start", d.lr_start)?,
        lr_end: kv.get_or("train.lr_end", d.lr_end)?,
        decay_steps: kv.get_or("train.decay_steps", d.decay_steps)?,
        adam_beta1: kv.get_or("train.adam_beta1", d.adam_beta1)?,
        adam_beta2: kv.get_or("train.adam_beta2", d.adam_beta2)?,
        adam_eps: kv.get_or("train.adam_eps", d.adam_eps)?,
        l2_weight: kv.get_or("train.l2_weight", d.l2_weight)?,
        batch_size: kv.get_or("train.batch_size", d.batch_size)?,
        max_steps: kv.get_or("train.max_steps", d.max_steps)?,
        grad_clip: match kv.get_parsed::<f64>("train.grad_clip")? {
            Some(c) if c <= 0.0 => None,
            Some(c) => Some(c),
            None => d.grad_clip,
        },
        checkpoint_every: kv.get_or("train.checkpoint_every", d.checkpoint_every)?,
        validate_every: kv.get_or("train.validate_every", d.validate_every)?,
        target_val_mel_l1: kv.get_parsed("train.target_val_mel_l1")?,
        val_utterances: kv.get_or("train.val_utterances", d.val_utterances)?,
        seed: kv.get_or("train.seed", d.seed)?,
    })
}

/// Model defaults matched to the corpus: accent path if the corpus has
/// accent streams, vocabulary sized from the corpus spec.
fn default_model_kv(corpus: &ToyCorpus) -> Result<KvConfig> {
    let input_kind = if corpus.spec.with_accents {
        InputKind::PhonemeAccent
    } else {
        InputKind::Character
    };
    let accent_vocab = if corpus.spec.with_accents { 2 } else { 0 };
    let cfg = ModelConfig::preset(
        EncoderKind::Cbhl,
        false,
        ParamSize::Small,
        input_kind,
        corpus.spec.vocab_size,
        accent_vocab,
    )?;
    let mut kv = cfg.to_kv();
    kv.set("mel_bins", MEL_BINS.to_string());
    Ok(kv)
}

fn write_resolved(out_dir: &Path, kv: &KvConfig) -> Result<()> {
    let mut resolved = kv.clone();
    resolved.set("tool_version", taclab::VERSION);
    std::fs::create_dir_all(out_dir)?;
    resolved.save(&out_dir.join("resolved_config.txt"))
}

fn read_sym_file(path: &Path) -> Result<SymbolSequence> {
    let kv = KvConfig::load(path)?;
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
            .ok_or_else(|| Error::Format("input file has no symbols line".into()))?,
    )?;
    Ok(match kv.get("accents") {
        Some(a) => SymbolSequence::with_accents(symbols, parse_ids(a)?),
        None => SymbolSequence::plain(symbols),
    })
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some(ext))
        .collect();
    files.sort();
    Ok(files)
}

fn cmd_gen_corpus(
    spec: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    sets: &[String],
) -> std::result::Result<(), RunErr> {
    let mut kv = load_kv_opt(spec)?;
    apply_sets(&mut kv, sets)?;
    if let Some(s) = seed {
        kv.set("seed", s.to_string());
    }
    let spec = ToyCorpusSpec::from_kv(&kv)?;
    let corpus = gen_corpus(&spec)?;
    write_corpus(&corpus, out)?;
    write_resolved(out, &spec.to_kv())?;
    println!(
        "corpus written to {}: {} train / {} val / {} test utterances",
        out.display(),
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len()
    );
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    corpus_dir: &Path,
    out: &Path,
    seed: Option<u64>,
    sets: &[String],
) -> std::result::Result<(), RunErr> {
    let mut file_kv = load_kv_opt(config)?;
    apply_sets(&mut file_kv, sets)?;
    if let Some(s) = seed {
        file_kv.set("train.seed", s.to_string());
    }
    let corpus = load_corpus(corpus_dir)?;
    let mut model_kv = default_model_kv(&corpus)?;
    overlay_prefixed(&mut model_kv, &file_kv, "model.");
    let model_cfg = ModelConfig::from_kv(&model_kv)?;
    let train_cfg = train_cfg_from_kv(&file_kv)?;

    let mut resolved = KvConfig::new();
    for (k, v) in model_kv.entries() {
        resolved.set(&format!("model.{k}"), v);
    }
    overlay_prefixed(&mut resolved, &file_kv, "");
    write_resolved(out, &resolved)?;

    let mut model: Model<f32> = build_model(&model_cfg, train_cfg.seed)?;
    let train_utts: Vec<_> = corpus.train.iter().map(|t| t.utt.clone()).collect();
    let val_utts: Vec<_> = corpus.val.iter().map(|t| t.utt.clone()).collect();
    let outcome = train(&mut model, &train_utts, &val_utts, &train_cfg, out)?;
    println!(
        "trained {} steps; final checkpoint {}",
        outcome.steps_run,
        outcome.final_checkpoint.display()
    );
    if let Some(v) = outcome.last_val_mel_l1 {
        println!("validation mel L1 {v:.6}");
    }
    Ok(())
}

fn cmd_synth(
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    max_steps: usize,
    stop_threshold: f64,
    seed: u64,
) -> std::result::Result<(), RunErr> {
    let model: Model<f32> = load_checkpoint(checkpoint)?;
    let inputs = read_sym_file(input)?;
    let mut rng = RngStream::new(seed).derive("synth");
    let res = model.synthesize(&inputs, max_steps, stop_threshold, &mut rng)?;
    std::fs::create_dir_all(out)?;
    write_mel(&out.join("output.mel"), &res.mel_after)?;
    write_mel(&out.join("output_before.mel"), &res.mel_before)?;
    write_attn(&out.join("output.attn"), &res.attention)?;
    write_attn_csv(&out.join("output.attn.csv"), &res.attention)?;
    let mut kv = KvConfig::new();
    kv.set("checkpoint", checkpoint.display().to_string());
    kv.set("input", input.display().to_string());
    kv.set("max_steps", max_steps.to_string());
    kv.set("stop_threshold", stop_threshold.to_string());
    kv.set("seed", seed.to_string());
    write_resolved(out, &kv)?;
    println!(
        "synthesized {} decoder steps ({} frames), stop token {}",
        res.steps,
        res.mel_after.nrows(),
        if res.stopped_naturally { "fired" } else { "did not fire" }
    );
    Ok(())
}

fn cmd_diagnose(
    attn_dir: &Path,
    th: Thresholds,
    out: Option<&Path>,
) -> std::result::Result<(), RunErr> {
    let files = sorted_files(attn_dir, "attn")?;
    if files.is_empty() {
        return Err(RunErr::Data(Error::InvalidArg(format!(
            "no .attn files in {}",
            attn_dir.display()
        ))));
    }
    let mut reports = Vec::new();
    let mut per_file = String::from("file\tclassification\n");
    for f in &files {
        let m = read_attn(f)?;
        let r = detect_alignment_errors(&m, &th);
        per_file.push_str(&format!(
            "{}\t{}\n",
            f.file_name().unwrap().to_string_lossy(),
            r.classification.label()
        ));
        reports.push(r);
    }
    let table = aggregate_error_rates(&reports)?;
    println!("{} files, {} errors", table.total, table.errors);
    println!("discontinuous: {}", table.discontinuous);
    println!("incomplete: {}", table.incomplete);
    println!("overestimated: {}", table.overestimated);
    println!("alignment_errors = {}", table.formatted());
    if let Some(p) = out {
        std::fs::write(p, per_file)?;
    }
    Ok(())
}

fn cmd_f0_stats(
    tracks: &Path,
    groups: &Path,
    out: Option<&Path>,
) -> std::result::Result<(), RunErr> {
    let groups_kv = KvConfig::load(groups)?;
    if groups_kv.entries().is_empty() {
        return Err(RunErr::Data(Error::InvalidArg("empty groups file".into())));
    }
    let mut entries = Vec::new();
    for (stem, group) in groups_kv.entries() {
        let track = read_f0_csv(&tracks.join(format!("{stem}.csv")))?;
        entries.push(F0Entry {
            duration_sec: track.duration(),
            std_hz: f0_std_voiced(&track)?,
            group: group.clone(),
        });
    }
    let summary = f0_summary(&entries);
    print!("{}", summary.scatter_tsv);
    println!("# group means");
    for (g, m) in &summary.group_means {
        println!("{g}\t{m:.6}");
    }
    if let Some(p) = out {
        std::fs::write(p, &summary.scatter_tsv)?;
    }
    Ok(())
}

fn cmd_rank_test(a: &Path, b: &Path) -> std::result::Result<(), RunErr> {
    let sa = read_scores(a)?;
    let sb = read_scores(b)?;
    let mw = mann_whitney_u(&sa, &sb)?;
    println!("n_a = {}", sa.len());
    println!("n_b = {}", sb.len());
    println!("U = {}", mw.u);
    println!("p = {:.6}", mw.p);
    Ok(())
}

fn cmd_report(grid_dir: &Path) -> std::result::Result<(), RunErr> {
    let path = grid_dir.join("report.tsv");
    let text = std::fs::read_to_string(&path)
        .map_err(|_| Error::InvalidArg(format!("no report at {}", path.display())))?;
    print!("{text}");
    Ok(())
}

fn cmd_grid(
    configs: &Path,
    corpus_dir: &Path,
    out: &Path,
    sets: &[String],
) -> std::result::Result<(), RunErr> {
    let mut kv = KvConfig::load(configs)?;
    apply_sets(&mut kv, sets)?;
    let corpus = load_corpus(corpus_dir)?;
    let names: Vec<String> = kv
        .get("entries")
        .map(|s| s.split_whitespace().map(String::from).collect())
        .unwrap_or_default();
    let mut grid = Vec::new();
    for name in &names {
        let mut model_kv = default_model_kv(&corpus)?;
        overlay_prefixed(&mut model_kv, &kv, &format!("{name}."));
        let seed: u64 = kv.get_or(&format!("{name}.seed"), 0)?;
        // `seed` is a grid key, not a model config key
        let mut cleaned = KvConfig::new();
        for (k, v) in model_kv.entries() {
            if k != "seed" {
                cleaned.set(k, v);
            }
        }
        grid.push(GridEntry {
            name: name.clone(),
            config: ModelConfig::from_kv(&cleaned)?,
            seed,
        });
    }
    let train_cfg = train_cfg_from_kv(&kv)?;
    write_resolved(out, &kv)?;
    let report = run_experiment(&grid, &corpus, &train_cfg, out)?;
    print!("{}", report.formatted());
    Ok(())
}

fn run(cmd: Cmd) -> std::result::Result<(), RunErr> {
    match cmd {
        Cmd::GenCorpus {
            spec,
            out,
            seed,
            sets,
        } => cmd_gen_corpus(spec.as_deref(), &out, seed, &sets),
        Cmd::Train {
            config,
            corpus,
            out,
            seed,
            sets,
        } => cmd_train(config.as_deref(), &corpus, &out, seed, &sets),
        Cmd::Synth {
            checkpoint,
            input,
            out,
            max_steps,
            stop_threshold,
            seed,
        } => cmd_synth(&checkpoint, &input, &out, max_steps, stop_threshold, seed),
        Cmd::Diagnose {
            attn_dir,
            back_tol,
            fwd_skip,
            end_slack,
            dwell_max,
            out,
        } => cmd_diagnose(
            &attn_dir,
            Thresholds {
                back_tol,
                fwd_skip,
                end_slack,
                dwell_max,
            },
            out.as_deref(),
        ),
        Cmd::F0Stats { tracks, groups, out } => cmd_f0_stats(&tracks, &groups, out.as_deref()),
        Cmd::RankTest { a, b } => cmd_rank_test(&a, &b),
        Cmd::Report { grid_dir } => cmd_report(&grid_dir),
        Cmd::Grid {
            configs,
            corpus,
            out,
            sets,
        } => cmd_grid(&configs, &corpus, &out, &sets),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap prints help/version on stdout with success
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(RunErr::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(RunErr::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
