//! Scratch benchmark: step time and early convergence of the large CBHL
//! baseline on the default toy corpus. Not part of the test suite.

use std::time::Instant;

use taclab::harness::{gen_corpus, ToyCorpusSpec};
use taclab::layers::Mode;
use taclab::model::{build_model, EncoderKind, InputKind, ModelConfig, ParamSize};
use taclab::training::{
    clip_global_norm, lr_schedule, utterance_loss, validation_mel_l1, Adam, TrainConfig,
};
use taclab::RngStream;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let size = args.get(1).map(|s| s.as_str()).unwrap_or("large");
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(50);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let batch: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(4);

    let overfit: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0);
    let dur: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0);

    let mut spec = ToyCorpusSpec::default();
    if dur > 0 {
        spec.dur_range = (dur, dur);
    }
    let corpus = gen_corpus(&spec).unwrap();
    let mut train: Vec<_> = corpus.train.iter().map(|t| t.utt.clone()).collect();
    let mut val: Vec<_> = corpus.val.iter().map(|t| t.utt.clone()).collect();
    if overfit > 0 {
        train.truncate(overfit);
        val = train.clone();
    }

    let param_size = if size == "small" {
        ParamSize::Small
    } else {
        ParamSize::Large
    };
    let cfg = ModelConfig::preset(
        EncoderKind::Cbhl,
        false,
        param_size,
        InputKind::PhonemeAccent,
        spec.vocab_size,
        2,
    )
    .unwrap();
    let mut model = build_model::<f32>(&cfg, 7).unwrap();
    println!("params: {}", model.param_count());

    let tc = TrainConfig {
        lr_start: lr,
        lr_end: lr / 10.0,
        decay_steps: 2000,
        batch_size: batch,
        ..TrainConfig::default()
    };
    let mut adam = Adam::new(&mut model, &tc);
    let root = RngStream::new(tc.seed).derive("train");
    let mut order: Vec<usize> = (0..train.len()).collect();

    let t0 = Instant::now();
    for step in 0..steps {
        if step % train.len() == 0 {
            let mut sh = root.derive(&format!("shuffle-{}", step / train.len()));
            for i in (1..order.len()).rev() {
                let j = (sh.next_u64() % (i as u64 + 1)) as usize;
                order.swap(i, j);
            }
        }
        let mut grads: Option<Vec<ndarray::Array2<f32>>> = None;
        let mut total = 0.0f64;
        let (mut t_fwd, mut t_bwd, mut t_collect) = (0.0, 0.0, 0.0);
        for b in 0..tc.batch_size {
            let utt = &train[order[(step * tc.batch_size + b) % train.len()]];
            let g = taclab::Graph::<f32>::new();
            let mut rng = root.derive(&format!("step-{step}-{b}"));
            let t = Instant::now();
            let loss =
                utterance_loss(&g, &mut model, utt, tc.l2_weight, Mode::Train, &mut rng)
                    .unwrap();
            total += g.scalar_value(loss.total) as f64;
            t_fwd += t.elapsed().as_secs_f64();
            let t = Instant::now();
            let gr = g.backward(loss.total);
            t_bwd += t.elapsed().as_secs_f64();
            let t = Instant::now();
            let batch: Vec<ndarray::Array2<f32>> = {
                let mut out = Vec::new();
                model.visit("", &mut out);
                out.iter()
                    .map(|(_, p)| gr.get(&g, g.leaf_rc(p.value.clone())))
                    .collect()
            };
            match &mut grads {
                None => grads = Some(batch),
                Some(acc) => {
                    for (a, x) in acc.iter_mut().zip(batch) {
                        *a += &x;
                    }
                }
            }
            t_collect += t.elapsed().as_secs_f64();
        }
        if step < 3 {
            println!("  timing: fwd {t_fwd:.2}s bwd {t_bwd:.2}s collect {t_collect:.2}s");
        }
        if step % 50 == 0 {
            // relative gradient magnitude per parameter (update pressure)
            let mut named = Vec::new();
            model.visit("", &mut named);
            let mut rows: Vec<(String, f64)> = named
                .iter()
                .zip(grads.as_ref().unwrap())
                .map(|((n, p), gm)| {
                    let gn = gm.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                    let wn = p.value.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                    (n.clone(), gn / wn.max(1e-12))
                })
                .collect();
            rows.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            let head: Vec<String> = rows.iter().take(6).map(|(n, v)| format!("{n} {v:.2e}")).collect();
            let tail: Vec<String> = rows.iter().rev().take(6).map(|(n, v)| format!("{n} {v:.2e}")).collect();
            println!("  grad/weight top: {}", head.join(", "));
            println!("  grad/weight low: {}", tail.join(", "));
            for (n, v) in &rows {
                if n.contains("att") && !n.contains("rnn") {
                    println!("  attn {n} {v:.2e}");
                }
            }
        }
        let mut grads = grads.unwrap();
        for gm in grads.iter_mut() {
            gm.mapv_inplace(|v| v / tc.batch_size as f32);
        }
        if let Some(clip) = tc.grad_clip {
            clip_global_norm(&mut grads, clip);
        }
        adam.step(&mut model, &grads, lr_schedule(&tc, step)).unwrap();

        if step % 20 == 0 || step + 1 == steps {
            let val_l1 = validation_mel_l1(&mut model, &val, 10, tc.seed).unwrap();
            // diagnostics: same loss on train utterances in both modes,
            // before/after postnet, and attention sharpness
            let probe = |utts: &[taclab::training::Utterance], mode: Mode| -> (f64, f64, f64) {
                let (mut before, mut after, mut sharp) = (0.0, 0.0, 0.0);
                let np = utts.len().min(4);
                for utt in &utts[..np] {
                    let g = taclab::Graph::<f32>::new();
                    let mut rng = RngStream::new(tc.seed).derive(&format!("probe-{}", utt.id));
                    let target = utt.mel.mapv(|x| x as f32);
                    let tf = model
                        .teacher_forced(&g, &utt.inputs, &target, mode, &mut rng)
                        .unwrap();
                    let l1 = |v| {
                        let out: ndarray::Array2<f32> = (*g.value(v)).clone();
                        let mut s = 0.0f64;
                        for f in 0..tf.valid_frames {
                            for j in 0..out.ncols() {
                                s += (out[(f, j)] - tf.padded_target[(f, j)]).abs() as f64;
                            }
                        }
                        s / (tf.valid_frames * out.ncols()) as f64
                    };
                    before += l1(tf.mel_before);
                    after += l1(tf.mel_after);
                    let mut s = 0.0;
                    for &row in &tf.alignment {
                        let r = g.value(row);
                        s += r.iter().cloned().fold(f32::MIN, f32::max) as f64;
                    }
                    sharp += s / tf.alignment.len() as f64;
                }
                (before / np as f64, after / np as f64, sharp / np as f64)
            };
            let (tb, ta, ts) = probe(&train, Mode::Eval);
            let (vb, va, vs) = probe(&val, Mode::Eval);
            // mass the attention places on the ground-truth source position
            let mut acc_mass = 0.0;
            let mut acc_n = 0usize;
            for tu in &corpus.val[..4] {
                let g = taclab::Graph::<f32>::new();
                let mut rng = RngStream::new(tc.seed).derive(&format!("mass-{}", tu.utt.id));
                let target = tu.utt.mel.mapv(|x| x as f32);
                let tf = model
                    .teacher_forced(&g, &tu.utt.inputs, &target, Mode::Eval, &mut rng)
                    .unwrap();
                let r = 2;
                for (t, &row) in tf.alignment.iter().enumerate() {
                    let frame = (t * r).min(tu.alignment.len() - 1);
                    let pos = tu.alignment[frame] as usize;
                    acc_mass += g.value(row)[(0, pos)] as f64;
                    acc_n += 1;
                }
            }
            let mass = acc_mass / acc_n as f64;
            print!("mass@truth {mass:.3} | ");
            println!(
                "step {step} loss {:.4} val_l1 {:.4} | train-eval b {tb:.3} a {ta:.3} sharp {ts:.2} | val-eval b {vb:.3} a {va:.3} sharp {vs:.2} | elapsed {:.1}s",
                total / tc.batch_size as f64,
                val_l1,
                t0.elapsed().as_secs_f64(),
            );
        }
    }

    // dump the teacher-forced alignment of one validation utterance
    let tu = &corpus.val[0];
    let g = taclab::Graph::<f32>::new();
    let mut rng = RngStream::new(tc.seed).derive("dump");
    let target = tu.utt.mel.mapv(|x| x as f32);
    let tf = model
        .teacher_forced(&g, &tu.utt.inputs, &target, Mode::Eval, &mut rng)
        .unwrap();
    println!("true alignment (frame->pos): {:?}", tu.alignment);
    for (t, &row) in tf.alignment.iter().enumerate() {
        let r = g.value(row);
        let cells: Vec<String> = r.iter().map(|&v| format!("{v:.2}")).collect();
        println!("step {t:2}: {}", cells.join(" "));
    }
}

use taclab::layers::HasParams;
use taclab::ndarray;
