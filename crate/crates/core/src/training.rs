//! Teacher-forced training: loss assembly, the learning-rate schedule, Adam,
//! gradient clipping, and the training loop with checkpointing and metrics.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use ndarray::Array2;

use crate::graph::{Graph, Scalar, Var};
use crate::layers::{HasParams, Mode};
use crate::model::{save_checkpoint, Model, SymbolSequence};
use crate::rng::RngStream;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

/// One training example: input symbols and the target mel matrix
/// `[frames x mel_bins]`.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub inputs: SymbolSequence,
    pub mel: Array2<f64>,
}

// ---------------------------------------------------------------------------
// Configuration and schedule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub decay_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub l2_weight: f64,
    /// Utterances averaged per optimizer step.
    pub batch_size: usize,
    pub max_steps: usize,
    /// Global-norm gradient clipping threshold, if enabled.
    pub grad_clip: Option<f64>,
    pub checkpoint_every: usize,
    pub validate_every: usize,
    /// Stop once validation post-net mel L1 drops below this.
    pub target_val_mel_l1: Option<f64>,
    /// Cap on utterances scored per validation pass.
    pub val_utterances: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_start: 1e-4,
            lr_end: 1e-5,
            decay_steps: 10_000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            l2_weight: 1e-6,
            batch_size: 4,
            max_steps: 15_000,
            grad_clip: Some(1.0),
            checkpoint_every: 500,
            validate_every: 100,
            target_val_mel_l1: None,
            val_utterances: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_start <= 0.0 || self.lr_end <= 0.0 {
            return Err(Error::InvalidArg("learning rates must be positive".into()));
        }
        if self.decay_steps == 0 {
            return Err(Error::InvalidArg("decay_steps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArg("batch_size must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidArg("max_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Exponential decay from `lr_start` to `lr_end` over `decay_steps`, then
/// constant at `lr_end`.
pub fn lr_schedule(cfg: &TrainConfig, step: usize) -> f64 {
    let frac = step.min(cfg.decay_steps) as f64 / cfg.decay_steps as f64;
    cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(frac)
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Tape nodes for each loss component plus their weighted total.
pub struct LossVars {
    pub mel_l1_before: Var,
    pub mel_l1_after: Var,
    pub stop_bce: Var,
    pub l2_term: Var,
    pub total: Var,
}

/// Scalar metrics logged during training. The invariant
/// `total = mel_l1_before + mel_l1_after + stop_bce + l2_weight * l2_term`
/// holds by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainMetrics {
    pub step: usize,
    pub mel_l1_before: f64,
    pub mel_l1_after: f64,
    pub stop_bce: f64,
    pub l2_term: f64,
    pub total: f64,
    pub lr: f64,
}

/// Builds the full loss for one utterance on the tape. Padded frames are
/// masked out of both mel terms; the stop target is 1 at the final decoder
/// step and 0 elsewhere.
pub fn utterance_loss<S: Scalar>(
    g: &Graph<S>,
    model: &mut Model<S>,
    utt: &Utterance,
    l2_weight: f64,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<LossVars> {
    // snapshot the decaying parameters before borrowing the model immutably
    let decay_params: Vec<Rc<Array2<S>>> = {
        let mut out = Vec::new();
        model.visit("", &mut out);
        out.iter()
            .filter(|(_, p)| p.decay)
            .map(|(_, p)| p.value.clone())
            .collect()
    };
    let target = utt.mel.mapv(S::of);
    let tf = model.teacher_forced(g, &utt.inputs, &target, mode, rng)?;

    let mel = model.config.mel_bins;
    let padded_frames = tf.padded_target.nrows();
    let mut mask = Array2::ones((padded_frames, mel));
    for f in tf.valid_frames..padded_frames {
        mask.row_mut(f).fill(S::zero());
    }
    let denom = S::of((tf.valid_frames * mel) as f64);
    let target_const = g.constant(tf.padded_target.clone());
    let mask_const = g.constant(mask);
    let masked_l1 = |pred: Var| {
        let diff = g.abs(g.sub(pred, target_const));
        g.scale(g.sum_all(g.mul(diff, mask_const)), S::one() / denom)
    };
    let mel_l1_before = masked_l1(tf.mel_before);
    let mel_l1_after = masked_l1(tf.mel_after);

    let steps = g.value(tf.stop_logits).nrows();
    let mut stop_target = Array2::zeros((steps, 1));
    stop_target[(steps - 1, 0)] = S::one();
    let stop_bce = g.bce_with_logits_mean(tf.stop_logits, &stop_target);

    let mut l2_term = g.constant(Array2::zeros((1, 1)));
    for p in decay_params {
        let leaf = g.leaf_rc(p);
        l2_term = g.add(l2_term, g.sum_all(g.square(leaf)));
    }

    let total = g.add(
        g.add(g.add(mel_l1_before, mel_l1_after), stop_bce),
        g.scale(l2_term, S::of(l2_weight)),
    );
    Ok(LossVars {
        mel_l1_before,
        mel_l1_after,
        stop_bce,
        l2_term,
        total,
    })
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with bias correction. Moment tensors follow the model's parameter
/// listing order.
pub struct Adam<S: Scalar> {
    m: Vec<Array2<S>>,
    v: Vec<Array2<S>>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
}

impl<S: Scalar> Adam<S> {
    pub fn new(model: &mut Model<S>, cfg: &TrainConfig) -> Self {
        let params = model.named_params();
        Adam {
            m: params.iter().map(|(_, p)| Array2::zeros(p.value.dim())).collect(),
            v: params.iter().map(|(_, p)| Array2::zeros(p.value.dim())).collect(),
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            t: 0,
        }
    }

    /// Applies one update. `grads` must follow the parameter listing order.
    pub fn step(&mut self, model: &mut Model<S>, grads: &[Array2<S>], lr: f64) -> Result<()> {
        let mut params = model.named_params();
        if grads.len() != params.len() {
            return Err(Error::Training(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let b1 = S::of(self.beta1);
        let b2 = S::of(self.beta2);
        let bc1 = S::of(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = S::of(1.0 - self.beta2.powi(self.t as i32));
        let lr_s = S::of(lr);
        let eps = S::of(self.eps);
        for (k, (_, p)) in params.iter_mut().enumerate() {
            let grad = &grads[k];
            if grad.dim() != p.value.dim() {
                return Err(Error::Training("gradient shape mismatch".into()));
            }
            self.m[k].zip_mut_with(grad, |m, &g| *m = b1 * *m + (S::one() - b1) * g);
            self.v[k].zip_mut_with(grad, |v, &g| *v = b2 * *v + (S::one() - b2) * g * g);
            let value = Rc::make_mut(&mut p.value);
            ndarray::Zip::from(&mut *value)
                .and(&self.m[k])
                .and(&self.v[k])
                .for_each(|w, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *w = *w - lr_s * mhat / (vhat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `clip`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Array2<S>], clip: f64) -> f64 {
    let mut sq = 0.0f64;
    for gr in grads.iter() {
        for &v in gr.iter() {
            let x = v.to_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > clip && norm > 0.0 {
        let scale = S::of(clip / norm);
        for gr in grads.iter_mut() {
            gr.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

pub struct TrainOutcome {
    pub steps_run: usize,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub last_metrics: TrainMetrics,
    /// Set when the validation target was reached before `max_steps`.
    pub stopped_early: bool,
    pub last_val_mel_l1: Option<f64>,
}

/// Mean post-net mel L1 over up to `limit` utterances, teacher-forced in
/// eval mode (no dropout, expectation-rule zoneout).
pub fn validation_mel_l1<S: Scalar>(
    model: &mut Model<S>,
    val: &[Utterance],
    limit: usize,
    seed: u64,
) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::InvalidArg("empty validation set".into()));
    }
    let n = val.len().min(limit.max(1));
    let mut total = 0.0;
    for utt in &val[..n] {
        let g: Graph<S> = Graph::new();
        let mut rng = RngStream::new(seed).derive(&format!("val-{}", utt.id));
        let loss = utterance_loss(&g, model, utt, 0.0, Mode::Eval, &mut rng)?;
        total += g.scalar_value(loss.mel_l1_after).to_f64();
    }
    Ok(total / n as f64)
}

fn format_metrics(m: &TrainMetrics) -> String {
    format!(
        "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.8}\n",
        m.step, m.mel_l1_before, m.mel_l1_after, m.stop_bce, m.l2_term, m.total, m.lr
    )
}

/// Trains in place. Writes `metrics.tsv` and periodic checkpoints under
/// `out_dir`; the newest checkpoint is always `latest.tclb` and the returned
/// final one is `final.tclb`.
///
/// A non-finite loss aborts with an error; the last-good checkpoint on disk
/// is retained.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    corpus: &[Utterance],
    val: &[Utterance],
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidArg("empty training corpus".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.tsv");
    let mut metrics_file = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    metrics_file
        .write_all(b"step\tmel_l1_before\tmel_l1_after\tstop_bce\tl2\ttotal\tlr\n")?;

    let mut opt = Adam::new(model, cfg);
    let n_params = model.named_params().len();
    let root = RngStream::new(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = corpus.len(); // forces a shuffle on the first step
    let mut epoch = 0usize;
    let mut last_metrics = TrainMetrics {
        step: 0,
        mel_l1_before: 0.0,
        mel_l1_after: 0.0,
        stop_bce: 0.0,
        l2_term: 0.0,
        total: 0.0,
        lr: cfg.lr_start,
    };
    let mut stopped_early = false;
    let mut last_val = None;

    let mut step = 0;
    while step < cfg.max_steps {
        step += 1;
        let mut grads: Vec<Option<Array2<S>>> = vec![None; n_params];
        let mut sums = [0.0f64; 4]; // before, after, stop, l2
        for b in 0..cfg.batch_size {
            if cursor >= order.len() {
                epoch += 1;
                root.derive(&format!("shuffle-{epoch}")).shuffle(&mut order);
                cursor = 0;
            }
            let utt = &corpus[order[cursor]];
            cursor += 1;
            let g: Graph<S> = Graph::new();
            let mut rng = root.derive(&format!("step-{step}-{b}"));
            let loss = utterance_loss(&g, model, utt, cfg.l2_weight, Mode::Train, &mut rng)?;
            let total = g.scalar_value(loss.total).to_f64();
            if !total.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at step {step} on utterance {:?}; last-good checkpoint retained",
                    utt.id
                )));
            }
            sums[0] += g.scalar_value(loss.mel_l1_before).to_f64();
            sums[1] += g.scalar_value(loss.mel_l1_after).to_f64();
            sums[2] += g.scalar_value(loss.stop_bce).to_f64();
            sums[3] += g.scalar_value(loss.l2_term).to_f64();
            let node_grads = g.backward(loss.total);
            let inv = S::of(1.0 / cfg.batch_size as f64);
            let params = model.named_params();
            for (k, (_, p)) in params.iter().enumerate() {
                let gk = node_grads.get(&g, g.leaf_rc(p.value.clone()));
                match &mut grads[k] {
                    Some(acc) => acc.zip_mut_with(&gk, |a, &x| *a = *a + x * inv),
                    None => grads[k] = Some(gk.mapv(|x| x * inv)),
                }
            }
        }
        let mut grads: Vec<Array2<S>> = grads.into_iter().map(|g| g.unwrap()).collect();
        if let Some(clip) = cfg.grad_clip {
            clip_global_norm(&mut grads, clip);
        }
        let lr = lr_schedule(cfg, step);
        opt.step(model, &grads, lr)?;

        let inv = 1.0 / cfg.batch_size as f64;
        last_metrics = TrainMetrics {
            step,
            mel_l1_before: sums[0] * inv,
            mel_l1_after: sums[1] * inv,
            stop_bce: sums[2] * inv,
            l2_term: sums[3] * inv,
            total: (sums[0] + sums[1] + sums[2]) * inv + cfg.l2_weight * sums[3] * inv,
            lr,
        };
        metrics_file.write_all(format_metrics(&last_metrics).as_bytes())?;

        if step % cfg.checkpoint_every == 0 {
            metrics_file.flush()?;
            save_checkpoint(model, &out_dir.join("latest.tclb"))?;
        }
        if let Some(target) = cfg.target_val_mel_l1 {
            if step % cfg.validate_every == 0 && !val.is_empty() {
                let v = validation_mel_l1(model, val, cfg.val_utterances, cfg.seed)?;
                last_val = Some(v);
                if v < target {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    metrics_file.flush()?;
    let final_path = out_dir.join("final.tclb");
    save_checkpoint(model, &final_path)?;
    save_checkpoint(model, &out_dir.join("latest.tclb"))?;
    Ok(TrainOutcome {
        steps_run: step,
        final_checkpoint: final_path,
        metrics_path,
        last_metrics,
        stopped_early,
        last_val_mel_l1: last_val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, EncoderKind, InputKind, ModelConfig, ParamSize, Widths};
    use approx::assert_abs_diff_eq;

    fn tiny_model(seed: u64) -> Model<f64> {
        let mut cfg = ModelConfig::preset(
            EncoderKind::Cbhl,
            false,
            ParamSize::Small,
            InputKind::Character,
            10,
            0,
        )
        .unwrap();
        cfg.widths = Widths {
            embed_dim: 5,
            accent_embed_dim: 0,
            encoder_prenet: (5, 4),
            accent_prenet: (0, 0),
            encoder_units: 3,
            bank_k: 2,
            bank_channels: 3,
            highway_depth: 1,
            cnn_channels: 4,
            decoder_prenet: (5, 4),
            attention_rnn: 5,
            attention_dim: 4,
            decoder_rnn: 5,
            decoder_rnn_layers: 2,
            enc_self_attention_dim: 0,
            enc_self_attention_heads: 1,
            dec_self_attention_heads: 1,
            postnet_channels: 4,
        };
        cfg.mel_bins = 3;
        cfg.validate().unwrap();
        build_model(&cfg, seed).unwrap()
    }

    fn tiny_utterance(id: &str, seed: u64) -> Utterance {
        let mut rng = RngStream::new(seed).derive(id);
        let frames = 5 + (seed as usize % 3);
        Utterance {
            id: id.into(),
            inputs: SymbolSequence::plain(vec![1, 3, 2, 4]),
            mel: Array2::from_shape_fn((frames, 3), |_| rng.uniform() * 0.8 + 0.1),
        }
    }

    #[test]
    fn lr_schedule_endpoints_and_floor() {
        let cfg = TrainConfig::default();
        assert_abs_diff_eq!(lr_schedule(&cfg, 0), 1e-4);
        assert_abs_diff_eq!(lr_schedule(&cfg, 10_000), 1e-5, epsilon = 1e-12);
        assert_abs_diff_eq!(lr_schedule(&cfg, 50_000), 1e-5, epsilon = 1e-12);
        // geometric midpoint at half the decay horizon
        assert_abs_diff_eq!(lr_schedule(&cfg, 5_000), (1e-4f64 * 1e-5).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn loss_components_sum_to_total() {
        let mut model = tiny_model(3);
        let utt = tiny_utterance("u0", 1);
        let g = Graph::new();
        let mut rng = RngStream::new(7).derive("loss");
        let l2_weight = 1e-3;
        let loss = utterance_loss(&g, &mut model, &utt, l2_weight, Mode::Train, &mut rng).unwrap();
        let total = g.scalar_value(loss.total);
        let sum = g.scalar_value(loss.mel_l1_before)
            + g.scalar_value(loss.mel_l1_after)
            + g.scalar_value(loss.stop_bce)
            + l2_weight * g.scalar_value(loss.l2_term);
        assert_abs_diff_eq!(total, sum, epsilon = 1e-12);
        assert!(g.scalar_value(loss.l2_term) > 0.0);
    }

    #[test]
    fn padded_frames_do_not_affect_mel_loss() {
        // 5 frames pads to 6 with r=2; the masked mean must equal a direct
        // 5-frame computation
        let mut model = tiny_model(3);
        let utt = tiny_utterance("u0", 0); // 5 frames
        let g = Graph::new();
        let mut rng = RngStream::new(7).derive("loss");
        let loss = utterance_loss(&g, &mut model, &utt, 0.0, Mode::Eval, &mut rng).unwrap();
        let target = utt.mel.clone();
        let mut rng2 = RngStream::new(7).derive("loss");
        let g2 = Graph::new();
        let tf = model
            .teacher_forced(&g2, &utt.inputs, &target, Mode::Eval, &mut rng2)
            .unwrap();
        let pred = g2.value(tf.mel_before);
        let mut manual = 0.0;
        for f in 0..5 {
            for j in 0..3 {
                manual += (pred[(f, j)] - target[(f, j)]).abs();
            }
        }
        manual /= 15.0;
        assert_abs_diff_eq!(g.scalar_value(loss.mel_l1_before), manual, epsilon = 1e-12);
    }

    #[test]
    fn adam_matches_reference_on_quadratic() {
        // minimize 0.5 * w^2 with known Adam trajectory
        let mut model = tiny_model(1);
        let cfg = TrainConfig {
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            ..TrainConfig::default()
        };
        let mut opt = Adam::new(&mut model, &cfg);
        let n = model.named_params().len();
        let w0 = model.named_params()[0].1.value[(0, 0)];
        // reference scalar Adam on the first element only
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, w0);
        let lr = 0.01;
        for t in 1..=3 {
            let grad = w;
            let mut grads: Vec<Array2<f64>> = model
                .named_params()
                .iter()
                .map(|(_, p)| Array2::zeros(p.value.dim()))
                .collect();
            assert_eq!(grads.len(), n);
            grads[0][(0, 0)] = grad;
            opt.step(&mut model, &grads, lr).unwrap();
            m = 0.9 * m + 0.1 * grad;
            v = 0.999 * v + 0.001 * grad * grad;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            w -= lr * mhat / (vhat.sqrt() + 1e-8);
            assert_abs_diff_eq!(model.named_params()[0].1.value[(0, 0)], w, epsilon = 1e-12);
        }
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut grads = vec![Array2::from_elem((2, 2), 3.0f64), Array2::from_elem((1, 4), -4.0)];
        let norm = clip_global_norm(&mut grads, 1.0);
        assert_abs_diff_eq!(norm, (4.0 * 9.0 + 4.0 * 16.0f64).sqrt(), epsilon = 1e-12);
        let after: f64 = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&x| x * x)
            .sum::<f64>()
            .sqrt();
        assert_abs_diff_eq!(after, 1.0, epsilon = 1e-9);
        // below the threshold nothing changes
        let mut small = vec![Array2::from_elem((1, 2), 0.1f64)];
        let before = small[0].clone();
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0], before);
    }

    #[test]
    fn short_training_run_descends_and_checkpoints() {
        let mut model = tiny_model(5);
        let corpus: Vec<Utterance> = (0..4).map(|i| tiny_utterance(&format!("u{i}"), i)).collect();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            lr_start: 3e-3,
            lr_end: 1e-3,
            decay_steps: 100,
            batch_size: 2,
            max_steps: 40,
            checkpoint_every: 20,
            validate_every: 10,
            l2_weight: 1e-7,
            seed: 9,
            ..TrainConfig::default()
        };
        let outcome = train(&mut model, &corpus, &corpus, &cfg, dir.path()).unwrap();
        assert_eq!(outcome.steps_run, 40);
        assert!(outcome.final_checkpoint.exists());
        assert!(dir.path().join("latest.tclb").exists());
        let text = std::fs::read_to_string(&outcome.metrics_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step\tmel_l1_before\tmel_l1_after\tstop_bce\tl2\ttotal\tlr");
        assert_eq!(lines.len(), 41);
        let first: f64 = lines[1].split('\t').nth(5).unwrap().parse().unwrap();
        let last: f64 = lines[40].split('\t').nth(5).unwrap().parse().unwrap();
        assert!(last < first, "loss did not descend: {first} -> {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let corpus: Vec<Utterance> = (0..3).map(|i| tiny_utterance(&format!("u{i}"), i)).collect();
        let cfg = TrainConfig {
            batch_size: 2,
            max_steps: 5,
            checkpoint_every: 5,
            seed: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = tiny_model(5);
            let dir = tempfile::tempdir().unwrap();
            let out = train(&mut model, &corpus, &corpus, &cfg, dir.path()).unwrap();
            let metrics = std::fs::read(&out.metrics_path).unwrap();
            let ckpt = std::fs::read(&out.final_checkpoint).unwrap();
            (metrics, ckpt)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn early_stop_on_validation_target() {
        let mut model = tiny_model(5);
        let corpus: Vec<Utterance> = (0..3).map(|i| tiny_utterance(&format!("u{i}"), i)).collect();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            batch_size: 1,
            max_steps: 50,
            validate_every: 1,
            target_val_mel_l1: Some(1e9), // trivially satisfied immediately
            seed: 4,
            ..TrainConfig::default()
        };
        let out = train(&mut model, &corpus, &corpus, &cfg, dir.path()).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.steps_run, 1);
        assert!(out.last_val_mel_l1.is_some());
    }
}
