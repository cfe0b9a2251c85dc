//! Scratch: per-parameter gradient check of the full micro model.
use ndarray::Array2;
use std::rc::Rc;
use taclab::layers::{HasParams, Mode};
use taclab::model::{build_model, EncoderKind, InputKind, ModelConfig, ParamSize, SymbolSequence, Widths};
use taclab::training::{utterance_loss, Utterance};
use taclab::{Graph, RngStream};

fn micro_config() -> ModelConfig {
    let mut cfg = ModelConfig::preset(EncoderKind::Cbhl, true, ParamSize::Small, InputKind::PhonemeAccent, 4, 2).unwrap();
    cfg.widths = Widths {
        embed_dim: 6, accent_embed_dim: 4, encoder_prenet: (6, 5), accent_prenet: (4, 3),
        encoder_units: 4, bank_k: 2, bank_channels: 3, highway_depth: 1, cnn_channels: 5,
        decoder_prenet: (6, 4), attention_rnn: 6, attention_dim: 5, decoder_rnn: 6,
        decoder_rnn_layers: 2, enc_self_attention_dim: 4, enc_self_attention_heads: 2,
        dec_self_attention_heads: 2, postnet_channels: 4,
    };
    cfg.mel_bins = 4;
    cfg.dropout = 0.3;
    cfg.zoneout_h = 0.1;
    cfg.zoneout_c = 0.1;
    cfg.l2_weight = 1e-3;
    cfg.validate().unwrap();
    cfg
}

fn main() {
    let cfg = micro_config();
    let mut model = build_model::<f64>(&cfg, 11).unwrap();
    let mut mel_rng = RngStream::new(40).derive("micro-mel");
    let utt = Utterance {
        id: "micro".into(),
        inputs: SymbolSequence::with_accents(vec![0, 2, 1], vec![0, 1, 0]),
        mel: Array2::from_shape_fn((6, cfg.mel_bins), |_| 0.2 + 0.6 * mel_rng.uniform()),
    };
    let f = |m: &mut taclab::model::Model<f64>, g: &Graph<f64>| {
        let mut rng = RngStream::new(94).derive("micro-step");
        utterance_loss(g, m, &utt, 1e-3, Mode::Train, &mut rng).unwrap().total
    };
    let g: Graph<f64> = Graph::new();
    let loss = f(&mut model, &g);
    let grads = g.backward(loss);
    let (names, analytic): (Vec<String>, Vec<Array2<f64>>) = {
        let mut out = Vec::new();
        model.visit("", &mut out);
        (out.iter().map(|(n, _)| n.clone()).collect(),
         out.iter().map(|(_, p)| grads.get(&g, g.leaf_rc(p.value.clone()))).collect())
    };
    drop(g);

    let eps = 1e-5;
    for (k, name) in names.iter().enumerate() {
        let a = &analytic[k];
        let mut worst = 0.0f64;
        let mut worst_pair = (0.0, 0.0);
        for idx in 0..a.len() {
            let mut nudge = |m: &mut taclab::model::Model<f64>, d: f64| {
                let mut out = Vec::new();
                m.visit("", &mut out);
                Rc::make_mut(&mut out[k].1.value).as_slice_mut().unwrap()[idx] += d;
            };
            nudge(&mut model, eps);
            let up = { let g = Graph::new(); let l = f(&mut model, &g); g.scalar_value(l) };
            nudge(&mut model, -2.0 * eps);
            let down = { let g = Graph::new(); let l = f(&mut model, &g); g.scalar_value(l) };
            nudge(&mut model, eps);
            let fd = (up - down) / (2.0 * eps);
            let av = a.as_slice().unwrap()[idx];
            let diff = (av - fd).abs();
            if diff < 1e-7 { continue; }
            let rel = diff / av.abs().max(fd.abs()).max(1e-8);
            if rel > worst { worst = rel; worst_pair = (av, fd); }
        }
        if worst > 1e-4 {
            println!("{name}: rel {worst:.3e} analytic {:.6e} fd {:.6e}", worst_pair.0, worst_pair.1);
        }
    }
    println!("done");
}
