//! Full sequence-to-sequence model: configuration, assembly, the decoder
//! loop, free-running synthesis, and checkpoint IO.

use std::io::{Read as _, Write as _};
use std::path::Path;
use std::rc::Rc;

use ndarray::Array2;

use crate::attention::{
    forward_attention_step_tape, AdditiveAttention, LocationSensitiveAttention,
};
use crate::config::KvConfig;
use crate::diagnostics::AttentionMatrix;
use crate::graph::{Graph, Scalar, Var};
use crate::layers::{
    CbhlEncoder, CnnEncoder, EmbeddingTable, HasParams, Linear, LstmState, Mode, Param, Postnet,
    Prenet, SelfAttentionBlock, ZoneoutLstmCell,
};
use crate::rng::RngStream;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Cbhl,
    Cnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSize {
    Small,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    /// Parallel phoneme and accent-label streams with separate embeddings.
    PhonemeAccent,
    Character,
    Phone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    /// Forward attention (no transition agent) over additive energies.
    Forward,
    /// Location-sensitive attention with cumulative-weight features.
    LocationSensitive,
}

impl EncoderKind {
    pub fn label(self) -> &'static str {
        match self {
            EncoderKind::Cbhl => "cbhl",
            EncoderKind::Cnn => "cnn",
        }
    }
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cbhl" => Ok(EncoderKind::Cbhl),
            "cnn" => Ok(EncoderKind::Cnn),
            other => Err(Error::InvalidArg(format!("unknown encoder kind {other:?}"))),
        }
    }
}

impl ParamSize {
    pub fn label(self) -> &'static str {
        match self {
            ParamSize::Small => "small",
            ParamSize::Large => "large",
        }
    }
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(ParamSize::Small),
            "large" => Ok(ParamSize::Large),
            other => Err(Error::InvalidArg(format!("unknown param size {other:?}"))),
        }
    }
}

impl InputKind {
    pub fn label(self) -> &'static str {
        match self {
            InputKind::PhonemeAccent => "phoneme_accent",
            InputKind::Character => "character",
            InputKind::Phone => "phone",
        }
    }
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "phoneme_accent" => Ok(InputKind::PhonemeAccent),
            "character" => Ok(InputKind::Character),
            "phone" => Ok(InputKind::Phone),
            other => Err(Error::InvalidArg(format!("unknown input kind {other:?}"))),
        }
    }
}

impl AttentionKind {
    pub fn label(self) -> &'static str {
        match self {
            AttentionKind::Forward => "forward",
            AttentionKind::LocationSensitive => "location_sensitive",
        }
    }
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(AttentionKind::Forward),
            "location_sensitive" => Ok(AttentionKind::LocationSensitive),
            other => Err(Error::InvalidArg(format!(
                "unknown attention kind {other:?}"
            ))),
        }
    }
}

/// Layer widths. Presets fill these in; tests may override individual
/// fields before building.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Widths {
    pub embed_dim: usize,
    pub accent_embed_dim: usize,
    pub encoder_prenet: (usize, usize),
    pub accent_prenet: (usize, usize),
    /// Encoder recurrent units per direction; encoder output is twice this.
    pub encoder_units: usize,
    pub bank_k: usize,
    pub bank_channels: usize,
    pub highway_depth: usize,
    pub cnn_channels: usize,
    pub decoder_prenet: (usize, usize),
    pub attention_rnn: usize,
    pub attention_dim: usize,
    pub decoder_rnn: usize,
    pub decoder_rnn_layers: usize,
    pub enc_self_attention_dim: usize,
    pub enc_self_attention_heads: usize,
    pub dec_self_attention_heads: usize,
    pub postnet_channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub self_attention: bool,
    pub param_size: ParamSize,
    pub input_kind: InputKind,
    pub attention: AttentionKind,
    pub reduction_factor: usize,
    pub mel_bins: usize,
    pub vocab_size: usize,
    pub accent_vocab_size: usize,
    pub dropout: f64,
    pub zoneout_h: f64,
    pub zoneout_c: f64,
    pub l2_weight: f64,
    pub widths: Widths,
}

impl ModelConfig {
    /// Standard configuration for an encoder/size/input combination.
    pub fn preset(
        encoder: EncoderKind,
        self_attention: bool,
        param_size: ParamSize,
        input_kind: InputKind,
        vocab_size: usize,
        accent_vocab_size: usize,
    ) -> Result<Self> {
        let large = param_size == ParamSize::Large;
        let accent = input_kind == InputKind::PhonemeAccent;
        // conv banks: K = 16 for character/phone inputs, K = 8 for the
        // smaller phoneme vocabularies
        let bank_k = if accent { 8 } else { 16 };
        let widths = if large {
            Widths {
                embed_dim: if accent { 448 } else { 512 },
                accent_embed_dim: if accent { 64 } else { 0 },
                encoder_prenet: if accent { (448, 224) } else { (512, 256) },
                accent_prenet: if accent { (64, 32) } else { (0, 0) },
                encoder_units: 256,
                bank_k,
                bank_channels: 128,
                highway_depth: 4,
                cnn_channels: 512,
                decoder_prenet: (256, 256),
                attention_rnn: 512,
                attention_dim: 128,
                decoder_rnn: 1024,
                decoder_rnn_layers: 2,
                enc_self_attention_dim: 64,
                enc_self_attention_heads: 2,
                dec_self_attention_heads: 4,
                postnet_channels: 512,
            }
        } else {
            Widths {
                embed_dim: 256,
                accent_embed_dim: if accent { 32 } else { 0 },
                encoder_prenet: (256, 128),
                accent_prenet: if accent { (32, 16) } else { (0, 0) },
                encoder_units: 128,
                bank_k,
                bank_channels: 64,
                highway_depth: 4,
                cnn_channels: 256,
                decoder_prenet: (128, 128),
                attention_rnn: 256,
                attention_dim: 128,
                decoder_rnn: 256,
                decoder_rnn_layers: 2,
                enc_self_attention_dim: 32,
                enc_self_attention_heads: 2,
                dec_self_attention_heads: 2,
                postnet_channels: 256,
            }
        };
        let cfg = ModelConfig {
            encoder,
            self_attention,
            param_size,
            input_kind,
            attention: AttentionKind::Forward,
            reduction_factor: 2,
            mel_bins: 80,
            vocab_size,
            accent_vocab_size,
            dropout: 0.5,
            zoneout_h: 0.1,
            zoneout_c: 0.1,
            l2_weight: if large { 1e-7 } else { 1e-6 },
            widths,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Configurations sized to match published parameter counts.
    pub fn replication_preset(name: &str) -> Result<Self> {
        match name {
            "tacotron-table1" => {
                let mut cfg = ModelConfig::preset(
                    EncoderKind::Cbhl,
                    false,
                    ParamSize::Small,
                    InputKind::Character,
                    70,
                    0,
                )?;
                cfg.widths = Widths {
                    embed_dim: 256,
                    accent_embed_dim: 0,
                    encoder_prenet: (256, 128),
                    accent_prenet: (0, 0),
                    encoder_units: 128,
                    bank_k: 16,
                    bank_channels: 128,
                    highway_depth: 4,
                    cnn_channels: 256,
                    decoder_prenet: (256, 128),
                    attention_rnn: 256,
                    attention_dim: 256,
                    decoder_rnn: 256,
                    decoder_rnn_layers: 2,
                    enc_self_attention_dim: 0,
                    enc_self_attention_heads: 1,
                    dec_self_attention_heads: 1,
                    postnet_channels: 256,
                };
                cfg.validate()?;
                Ok(cfg)
            }
            "tacotron2-table1" => {
                let mut cfg = ModelConfig::preset(
                    EncoderKind::Cnn,
                    false,
                    ParamSize::Large,
                    InputKind::Character,
                    70,
                    0,
                )?;
                cfg.attention = AttentionKind::LocationSensitive;
                cfg.widths = Widths {
                    embed_dim: 512,
                    accent_embed_dim: 0,
                    encoder_prenet: (512, 512),
                    accent_prenet: (0, 0),
                    encoder_units: 256,
                    bank_k: 16,
                    bank_channels: 128,
                    highway_depth: 4,
                    cnn_channels: 512,
                    decoder_prenet: (256, 256),
                    attention_rnn: 1024,
                    attention_dim: 128,
                    decoder_rnn: 1024,
                    decoder_rnn_layers: 1,
                    enc_self_attention_dim: 0,
                    enc_self_attention_heads: 1,
                    dec_self_attention_heads: 1,
                    postnet_channels: 512,
                };
                cfg.validate()?;
                Ok(cfg)
            }
            other => Err(Error::InvalidArg(format!(
                "unknown replication preset {other:?}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, why: &str| {
            Err(Error::InvalidArg(format!("config field {field}: {why}")))
        };
        if self.reduction_factor == 0 {
            return err("reduction_factor", "must be >= 1");
        }
        if self.mel_bins == 0 {
            return err("mel_bins", "must be positive");
        }
        if self.vocab_size == 0 {
            return err("vocab_size", "must be positive");
        }
        for (name, v) in [
            ("dropout", self.dropout),
            ("zoneout_h", self.zoneout_h),
            ("zoneout_c", self.zoneout_c),
        ] {
            if !(0.0..1.0).contains(&v) {
                return err(name, "must be in [0, 1)");
            }
        }
        if self.l2_weight < 0.0 {
            return err("l2_weight", "must be non-negative");
        }
        let w = &self.widths;
        let accent = self.input_kind == InputKind::PhonemeAccent;
        if accent {
            if self.accent_vocab_size == 0 {
                return err("accent_vocab_size", "required for phoneme_accent input");
            }
            if w.accent_embed_dim == 0 || w.accent_prenet.0 == 0 || w.accent_prenet.1 == 0 {
                return err("widths.accent_embed_dim", "accent path widths must be positive");
            }
            if w.accent_prenet.0 != w.accent_embed_dim && w.accent_embed_dim != 0 {
                // pre-net input width is the embedding width by construction;
                // the first pre-net width is a free choice, so no constraint.
            }
        } else if self.accent_vocab_size != 0 {
            return err(
                "accent_vocab_size",
                "must be zero unless input_kind is phoneme_accent",
            );
        }
        for (name, v) in [
            ("widths.embed_dim", w.embed_dim),
            ("widths.encoder_prenet.0", w.encoder_prenet.0),
            ("widths.encoder_prenet.1", w.encoder_prenet.1),
            ("widths.encoder_units", w.encoder_units),
            ("widths.decoder_prenet.0", w.decoder_prenet.0),
            ("widths.decoder_prenet.1", w.decoder_prenet.1),
            ("widths.attention_rnn", w.attention_rnn),
            ("widths.attention_dim", w.attention_dim),
            ("widths.decoder_rnn", w.decoder_rnn),
            ("widths.postnet_channels", w.postnet_channels),
        ] {
            if v == 0 {
                return err(name, "must be positive");
            }
        }
        match self.encoder {
            EncoderKind::Cbhl => {
                if w.bank_k == 0 {
                    return err("widths.bank_k", "must be positive");
                }
                if w.bank_channels == 0 {
                    return err("widths.bank_channels", "must be positive");
                }
            }
            EncoderKind::Cnn => {
                if w.cnn_channels == 0 {
                    return err("widths.cnn_channels", "must be positive");
                }
            }
        }
        if !(1..=2).contains(&w.decoder_rnn_layers) {
            return err("widths.decoder_rnn_layers", "must be 1 or 2");
        }
        if self.self_attention {
            if w.enc_self_attention_dim == 0 {
                return err("widths.enc_self_attention_dim", "must be positive");
            }
            if w.enc_self_attention_heads == 0
                || w.enc_self_attention_dim % w.enc_self_attention_heads != 0
            {
                return err(
                    "widths.enc_self_attention_heads",
                    "must divide enc_self_attention_dim",
                );
            }
            if w.dec_self_attention_heads == 0
                || w.decoder_rnn % w.dec_self_attention_heads != 0
            {
                return err(
                    "widths.dec_self_attention_heads",
                    "must divide decoder_rnn",
                );
            }
        }
        Ok(())
    }

    /// Width of the encoder's recurrent output (the first attention memory).
    pub fn encoder_out_dim(&self) -> usize {
        2 * self.widths.encoder_units
    }

    /// Width of the context fed to the decoder (both memories concatenated).
    pub fn context_dim(&self) -> usize {
        self.encoder_out_dim()
            + if self.self_attention {
                self.widths.enc_self_attention_dim
            } else {
                0
            }
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        let w = &self.widths;
        let mut set = |k: &str, v: String| kv.set(k, &v);
        set("encoder", self.encoder.label().into());
        set("self_attention", self.self_attention.to_string());
        set("param_size", self.param_size.label().into());
        set("input_kind", self.input_kind.label().into());
        set("attention", self.attention.label().into());
        set("reduction_factor", self.reduction_factor.to_string());
        set("mel_bins", self.mel_bins.to_string());
        set("vocab_size", self.vocab_size.to_string());
        set("accent_vocab_size", self.accent_vocab_size.to_string());
        set("dropout", self.dropout.to_string());
        set("zoneout_h", self.zoneout_h.to_string());
        set("zoneout_c", self.zoneout_c.to_string());
        set("l2_weight", self.l2_weight.to_string());
        set("widths.embed_dim", w.embed_dim.to_string());
        set("widths.accent_embed_dim", w.accent_embed_dim.to_string());
        set("widths.encoder_prenet.0", w.encoder_prenet.0.to_string());
        set("widths.encoder_prenet.1", w.encoder_prenet.1.to_string());
        set("widths.accent_prenet.0", w.accent_prenet.0.to_string());
        set("widths.accent_prenet.1", w.accent_prenet.1.to_string());
        set("widths.encoder_units", w.encoder_units.to_string());
        set("widths.bank_k", w.bank_k.to_string());
        set("widths.bank_channels", w.bank_channels.to_string());
        set("widths.highway_depth", w.highway_depth.to_string());
        set("widths.cnn_channels", w.cnn_channels.to_string());
        set("widths.decoder_prenet.0", w.decoder_prenet.0.to_string());
        set("widths.decoder_prenet.1", w.decoder_prenet.1.to_string());
        set("widths.attention_rnn", w.attention_rnn.to_string());
        set("widths.attention_dim", w.attention_dim.to_string());
        set("widths.decoder_rnn", w.decoder_rnn.to_string());
        set(
            "widths.decoder_rnn_layers",
            w.decoder_rnn_layers.to_string(),
        );
        set(
            "widths.enc_self_attention_dim",
            w.enc_self_attention_dim.to_string(),
        );
        set(
            "widths.enc_self_attention_heads",
            w.enc_self_attention_heads.to_string(),
        );
        set(
            "widths.dec_self_attention_heads",
            w.dec_self_attention_heads.to_string(),
        );
        set("widths.postnet_channels", w.postnet_channels.to_string());
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let get = |k: &str| -> Result<String> {
            kv.get(k)
                .map(String::from)
                .ok_or_else(|| Error::Format(format!("missing config key {k:?}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad integer for config key {k:?}")))
        };
        let fnum = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad number for config key {k:?}")))
        };
        let cfg = ModelConfig {
            encoder: EncoderKind::parse(&get("encoder")?)?,
            self_attention: get("self_attention")? == "true",
            param_size: ParamSize::parse(&get("param_size")?)?,
            input_kind: InputKind::parse(&get("input_kind")?)?,
            attention: AttentionKind::parse(&get("attention")?)?,
            reduction_factor: num("reduction_factor")?,
            mel_bins: num("mel_bins")?,
            vocab_size: num("vocab_size")?,
            accent_vocab_size: num("accent_vocab_size")?,
            dropout: fnum("dropout")?,
            zoneout_h: fnum("zoneout_h")?,
            zoneout_c: fnum("zoneout_c")?,
            l2_weight: fnum("l2_weight")?,
            widths: Widths {
                embed_dim: num("widths.embed_dim")?,
                accent_embed_dim: num("widths.accent_embed_dim")?,
                encoder_prenet: (num("widths.encoder_prenet.0")?, num("widths.encoder_prenet.1")?),
                accent_prenet: (num("widths.accent_prenet.0")?, num("widths.accent_prenet.1")?),
                encoder_units: num("widths.encoder_units")?,
                bank_k: num("widths.bank_k")?,
                bank_channels: num("widths.bank_channels")?,
                highway_depth: num("widths.highway_depth")?,
                cnn_channels: num("widths.cnn_channels")?,
                decoder_prenet: (num("widths.decoder_prenet.0")?, num("widths.decoder_prenet.1")?),
                attention_rnn: num("widths.attention_rnn")?,
                attention_dim: num("widths.attention_dim")?,
                decoder_rnn: num("widths.decoder_rnn")?,
                decoder_rnn_layers: num("widths.decoder_rnn_layers")?,
                enc_self_attention_dim: num("widths.enc_self_attention_dim")?,
                enc_self_attention_heads: num("widths.enc_self_attention_heads")?,
                dec_self_attention_heads: num("widths.dec_self_attention_heads")?,
                postnet_channels: num("widths.postnet_channels")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Input sequences
// ---------------------------------------------------------------------------

/// One utterance's symbol input: a main stream plus an optional parallel
/// accent stream (phoneme_accent models only).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolSequence {
    pub symbols: Vec<usize>,
    pub accents: Option<Vec<usize>>,
}

impl SymbolSequence {
    pub fn plain(symbols: Vec<usize>) -> Self {
        SymbolSequence {
            symbols,
            accents: None,
        }
    }

    pub fn with_accents(symbols: Vec<usize>, accents: Vec<usize>) -> Self {
        SymbolSequence {
            symbols,
            accents: Some(accents),
        }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

pub enum EncoderNet<S: Scalar> {
    Cbhl(CbhlEncoder<S>),
    Cnn(CnnEncoder<S>),
}

pub struct EncSelfAttn<S: Scalar> {
    pub proj: Linear<S>,
    pub block: SelfAttentionBlock<S>,
}

pub enum AttentionNet<S: Scalar> {
    Forward(AdditiveAttention<S>),
    LocationSensitive(LocationSensitiveAttention<S>),
}

pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub embed: EmbeddingTable<S>,
    pub accent_embed: Option<EmbeddingTable<S>>,
    pub encoder_prenet: Prenet<S>,
    pub accent_prenet: Option<Prenet<S>>,
    pub encoder: EncoderNet<S>,
    pub enc_self_attn: Option<EncSelfAttn<S>>,
    pub decoder_prenet: Prenet<S>,
    pub attention_rnn: ZoneoutLstmCell<S>,
    pub attention: AttentionNet<S>,
    pub dual_attention: Option<AdditiveAttention<S>>,
    pub decoder_rnn: Vec<ZoneoutLstmCell<S>>,
    pub dec_self_attn: Option<SelfAttentionBlock<S>>,
    pub mel_proj: Linear<S>,
    pub stop_proj: Linear<S>,
    pub postnet: Postnet<S>,
}

/// Deterministic model construction: the same config and seed always
/// produce bit-identical initial weights.
pub fn build_model<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<S>> {
    config.validate()?;
    let w = config.widths.clone();
    let mut rng = RngStream::new(seed).derive("model-init");
    let accent = config.input_kind == InputKind::PhonemeAccent;

    let embed = EmbeddingTable::new(&mut rng, config.vocab_size, w.embed_dim);
    let accent_embed = accent
        .then(|| EmbeddingTable::new(&mut rng, config.accent_vocab_size, w.accent_embed_dim));
    let encoder_prenet = Prenet::new(
        &mut rng,
        w.embed_dim,
        w.encoder_prenet,
        config.dropout,
    )?;
    let accent_prenet = if accent {
        Some(Prenet::new(
            &mut rng,
            w.accent_embed_dim,
            w.accent_prenet,
            config.dropout,
        )?)
    } else {
        None
    };
    let enc_in = w.encoder_prenet.1 + if accent { w.accent_prenet.1 } else { 0 };
    let encoder = match config.encoder {
        EncoderKind::Cbhl => EncoderNet::Cbhl(CbhlEncoder::new(
            &mut rng,
            enc_in,
            w.encoder_units,
            w.bank_k,
            w.bank_channels,
            w.highway_depth,
            config.zoneout_h,
            config.zoneout_c,
        )),
        EncoderKind::Cnn => EncoderNet::Cnn(CnnEncoder::new(
            &mut rng,
            enc_in,
            w.cnn_channels,
            w.encoder_units,
            config.dropout,
            config.zoneout_h,
            config.zoneout_c,
        )),
    };
    let enc_out = config.encoder_out_dim();
    let enc_self_attn = if config.self_attention {
        Some(EncSelfAttn {
            proj: Linear::new(&mut rng, enc_out, w.enc_self_attention_dim),
            block: SelfAttentionBlock::new(
                &mut rng,
                w.enc_self_attention_dim,
                w.enc_self_attention_heads,
            )?,
        })
    } else {
        None
    };
    let decoder_prenet = Prenet::new(
        &mut rng,
        config.mel_bins,
        w.decoder_prenet,
        config.dropout,
    )?;
    let ctx_dim = config.context_dim();
    let attention_rnn = ZoneoutLstmCell::new(
        &mut rng,
        w.decoder_prenet.1 + ctx_dim,
        w.attention_rnn,
        config.zoneout_h,
        config.zoneout_c,
    );
    let attention = match config.attention {
        AttentionKind::Forward => AttentionNet::Forward(AdditiveAttention::new(
            &mut rng,
            w.attention_rnn,
            enc_out,
            w.attention_dim,
        )),
        AttentionKind::LocationSensitive => {
            AttentionNet::LocationSensitive(LocationSensitiveAttention::new(
                &mut rng,
                w.attention_rnn,
                enc_out,
                w.attention_dim,
            ))
        }
    };
    let dual_attention = config.self_attention.then(|| {
        AdditiveAttention::new(
            &mut rng,
            w.attention_rnn,
            w.enc_self_attention_dim,
            w.attention_dim,
        )
    });
    let mut decoder_rnn = Vec::new();
    for layer in 0..w.decoder_rnn_layers {
        let in_dim = if layer == 0 {
            w.attention_rnn + ctx_dim
        } else {
            w.decoder_rnn
        };
        decoder_rnn.push(ZoneoutLstmCell::new(
            &mut rng,
            in_dim,
            w.decoder_rnn,
            config.zoneout_h,
            config.zoneout_c,
        ));
    }
    let dec_self_attn = if config.self_attention {
        Some(SelfAttentionBlock::new(
            &mut rng,
            w.decoder_rnn,
            w.dec_self_attention_heads,
        )?)
    } else {
        None
    };
    let proj_in = w.decoder_rnn + ctx_dim;
    let mut mel_proj = Linear::new(&mut rng, proj_in, config.reduction_factor * config.mel_bins);
    // start frame predictions near the middle of the normalized mel range:
    // mid-range bias plus a small-scale weight matrix, so early training
    // fits content instead of first taming a high-variance random readout
    {
        let w = std::rc::Rc::make_mut(&mut mel_proj.w.value);
        w.mapv_inplace(|v| v * S::of(0.1));
        let b = std::rc::Rc::make_mut(&mut mel_proj.b.value);
        b.fill(S::of(0.5));
    }
    let stop_proj = Linear::new(&mut rng, proj_in, 1);
    let postnet = Postnet::new(&mut rng, config.mel_bins, w.postnet_channels, config.dropout);

    Ok(Model {
        config: config.clone(),
        embed,
        accent_embed,
        encoder_prenet,
        accent_prenet,
        encoder,
        enc_self_attn,
        decoder_prenet,
        attention_rnn,
        attention,
        dual_attention,
        decoder_rnn,
        dec_self_attn,
        mel_proj,
        stop_proj,
        postnet,
    })
}

impl<S: Scalar> HasParams<S> for Model<S> {
    fn visit<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<S>)>) {
        self.embed.visit(&format!("{prefix}embed"), out);
        if let Some(e) = &mut self.accent_embed {
            e.visit(&format!("{prefix}accent_embed"), out);
        }
        self.encoder_prenet.visit(&format!("{prefix}enc_prenet"), out);
        if let Some(p) = &mut self.accent_prenet {
            p.visit(&format!("{prefix}accent_prenet"), out);
        }
        match &mut self.encoder {
            EncoderNet::Cbhl(e) => e.visit(&format!("{prefix}encoder"), out),
            EncoderNet::Cnn(e) => e.visit(&format!("{prefix}encoder"), out),
        }
        if let Some(sa) = &mut self.enc_self_attn {
            sa.proj.visit(&format!("{prefix}enc_sa.proj"), out);
            sa.block.visit(&format!("{prefix}enc_sa.block"), out);
        }
        self.decoder_prenet.visit(&format!("{prefix}dec_prenet"), out);
        self.attention_rnn.visit(&format!("{prefix}att_rnn"), out);
        match &mut self.attention {
            AttentionNet::Forward(a) => a.visit(&format!("{prefix}attention"), out),
            AttentionNet::LocationSensitive(a) => a.visit(&format!("{prefix}attention"), out),
        }
        if let Some(a) = &mut self.dual_attention {
            a.visit(&format!("{prefix}dual_attention"), out);
        }
        for (i, cell) in self.decoder_rnn.iter_mut().enumerate() {
            cell.visit(&format!("{prefix}dec_rnn{i}"), out);
        }
        if let Some(sa) = &mut self.dec_self_attn {
            sa.visit(&format!("{prefix}dec_sa"), out);
        }
        self.mel_proj.visit(&format!("{prefix}mel_proj"), out);
        self.stop_proj.visit(&format!("{prefix}stop_proj"), out);
        self.postnet.visit(&format!("{prefix}postnet"), out);
    }
}

impl<S: Scalar> Model<S> {
    /// Exact number of trainable scalars.
    pub fn param_count(&mut self) -> usize {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out.iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn named_params(&mut self) -> Vec<(String, &mut Param<S>)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

/// Encoder outputs used as attention memories during decoding.
pub struct EncodedMemory {
    /// `[L x encoder_out_dim]` recurrent memory.
    pub main: Var,
    /// `[L x enc_self_attention_dim]` self-attention memory, when enabled.
    pub self_attn: Option<Var>,
    pub len: usize,
}

impl<S: Scalar> Model<S> {
    /// Runs the encoder on the tape; the result feeds the decoder loop.
    pub fn encode_on(
        &self,
        g: &Graph<S>,
        inputs: &SymbolSequence,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<EncodedMemory> {
        if inputs.is_empty() {
            return Err(Error::InvalidArg("empty input sequence".into()));
        }
        let accent = self.config.input_kind == InputKind::PhonemeAccent;
        match (&inputs.accents, accent) {
            (Some(a), true) if a.len() != inputs.symbols.len() => {
                return Err(Error::InvalidArg(format!(
                    "accent stream length {} does not match symbol stream length {}",
                    a.len(),
                    inputs.symbols.len()
                )));
            }
            (None, true) => {
                return Err(Error::InvalidArg(
                    "phoneme_accent model requires an accent stream".into(),
                ));
            }
            (Some(_), false) => {
                return Err(Error::InvalidArg(
                    "accent stream given to a model without an accent path".into(),
                ));
            }
            _ => {}
        }
        let emb = self.embed.forward(g, &inputs.symbols)?;
        let mut x = self.encoder_prenet.forward(g, emb, mode, rng);
        if let (Some(table), Some(prenet), Some(ids)) = (
            &self.accent_embed,
            &self.accent_prenet,
            inputs.accents.as_ref(),
        ) {
            let aemb = table.forward(g, ids)?;
            let a = prenet.forward(g, aemb, mode, rng);
            x = g.concat_cols(&[x, a]);
        }
        let main = match &self.encoder {
            EncoderNet::Cbhl(e) => e.forward(g, x, mode, rng)?,
            EncoderNet::Cnn(e) => e.forward(g, x, mode, rng)?,
        };
        let self_attn = self.enc_self_attn.as_ref().map(|sa| {
            let projected = sa.proj.forward(g, main);
            sa.block.forward(g, projected, false)
        });
        Ok(EncodedMemory {
            main,
            self_attn,
            len: inputs.len(),
        })
    }
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

/// Mutable decoder state threaded through `decode_step`.
pub struct DecoderState {
    pub att_rnn: LstmState,
    pub dec_rnn: Vec<LstmState>,
    /// Forward-attention weights `[1 x L]` from the previous step.
    pub alpha: Var,
    /// Cumulative attention weights (location-sensitive attention).
    pub cumulative: Var,
    pub prev_context: Var,
    /// Feedback frame `[1 x mel_bins]`.
    pub prev_frame: Var,
    /// Decoder-RNN outputs so far, for causal decoder self-attention.
    history: Vec<Var>,
    pub step: usize,
}

/// How the feedback frame advances after a step.
pub enum DecodeMode<'a, S> {
    /// Feedback comes from the ground-truth frame group `[r x mel_bins]`.
    TeacherForced(&'a Array2<S>),
    /// Feedback comes from the model's own prediction.
    Free,
}

/// Outputs of one decoder step.
pub struct StepOutput {
    /// Predicted frame group `[1 x r*mel_bins]`.
    pub frames: Var,
    pub stop_logit: Var,
    /// Attention weights over the recurrent memory `[1 x L]`.
    pub weights: Var,
    /// Attention weights over the self-attention memory, when present.
    pub dual_weights: Option<Var>,
}

impl<S: Scalar> Model<S> {
    pub fn initial_state(&self, g: &Graph<S>, memory: &EncodedMemory) -> DecoderState {
        let l = memory.len;
        let mut alpha0 = Array2::zeros((1, l));
        alpha0[(0, 0)] = S::one();
        DecoderState {
            att_rnn: self.attention_rnn.zero_state(g),
            dec_rnn: self.decoder_rnn.iter().map(|c| c.zero_state(g)).collect(),
            alpha: g.constant(alpha0),
            cumulative: g.constant(Array2::zeros((1, l))),
            prev_context: g.constant(Array2::zeros((1, self.config.context_dim()))),
            prev_frame: g.constant(Array2::zeros((1, self.config.mel_bins))),
            history: Vec::new(),
            step: 0,
        }
    }

    /// One decoder step producing `r` mel frames and a stop logit.
    pub fn decode_step(
        &self,
        g: &Graph<S>,
        memory: &EncodedMemory,
        state: &mut DecoderState,
        decode: DecodeMode<S>,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<StepOutput> {
        if memory.self_attn.is_some() != self.config.self_attention {
            return Err(Error::InvalidArg(
                "memory count does not match the model's attention configuration".into(),
            ));
        }
        let r = self.config.reduction_factor;
        let mel = self.config.mel_bins;

        let prenet_out = self
            .decoder_prenet
            .forward(g, state.prev_frame, mode, rng);
        let att_in = g.concat_cols(&[prenet_out, state.prev_context]);
        state.att_rnn = self
            .attention_rnn
            .step(g, att_in, &state.att_rnn, mode, rng)?;
        let query = state.att_rnn.0;

        let (weights, context1) = match &self.attention {
            AttentionNet::Forward(att) => {
                let y = g.softmax_rows(att.energies(g, query, memory.main));
                let alpha = forward_attention_step_tape(g, y, state.alpha);
                state.alpha = alpha;
                (alpha, g.matmul(alpha, memory.main))
            }
            AttentionNet::LocationSensitive(att) => {
                let (w, c) = att.forward(g, query, memory.main, state.cumulative);
                state.cumulative = g.add(state.cumulative, w);
                state.alpha = w;
                (w, c)
            }
        };

        let (context, dual_weights) = match (&self.dual_attention, &memory.self_attn) {
            (Some(att), Some(mem2)) => {
                let (w2, c2) = att.forward(g, query, *mem2);
                (g.concat_cols(&[context1, c2]), Some(w2))
            }
            _ => (context1, None),
        };

        let mut h = g.concat_cols(&[query, context]);
        let mut layer_out = None;
        for (i, cell) in self.decoder_rnn.iter().enumerate() {
            state.dec_rnn[i] = cell.step(g, h, &state.dec_rnn[i], mode, rng)?;
            let out = state.dec_rnn[i].0;
            layer_out = Some(match layer_out {
                // residual connection between stacked decoder layers
                Some(prev) => g.add(prev, out),
                None => out,
            });
            h = out;
        }
        let mut dec_out = layer_out.expect("decoder has at least one layer");

        if let Some(block) = &self.dec_self_attn {
            state.history.push(dec_out);
            let stacked = if state.history.len() == 1 {
                state.history[0]
            } else {
                g.concat_rows(&state.history)
            };
            let sa = block.forward(g, stacked, true);
            dec_out = g.slice_rows(sa, state.history.len() - 1, state.history.len());
        }

        let proj_in = g.concat_cols(&[dec_out, context]);
        let frames = self.mel_proj.forward(g, proj_in);
        let stop_logit = self.stop_proj.forward(g, proj_in);

        state.prev_context = context;
        state.prev_frame = match decode {
            DecodeMode::TeacherForced(group) => {
                if group.dim() != (r, mel) {
                    return Err(Error::Shape(format!(
                        "teacher-forced frame group {:?}, expected ({r}, {mel})",
                        group.dim()
                    )));
                }
                g.constant(group.row(r - 1).to_owned().insert_axis(ndarray::Axis(0)))
            }
            DecodeMode::Free => g.slice_cols(frames, (r - 1) * mel, r * mel),
        };
        state.step += 1;
        Ok(StepOutput {
            frames,
            stop_logit,
            weights,
            dual_weights,
        })
    }
}

// ---------------------------------------------------------------------------
// Teacher-forced pass
// ---------------------------------------------------------------------------

/// Everything the training loss needs from one utterance.
pub struct TeacherForcedOutput<S: Scalar> {
    /// `[padded_frames x mel_bins]` decoder output.
    pub mel_before: Var,
    /// Decoder output plus the postnet residual.
    pub mel_after: Var,
    /// `[steps x 1]` stop logits.
    pub stop_logits: Var,
    /// Per-step attention weight rows.
    pub alignment: Vec<Var>,
    /// Target padded with copies of its final frame to a multiple of `r`.
    pub padded_target: Array2<S>,
    /// Number of genuine (unpadded) target frames.
    pub valid_frames: usize,
}

impl<S: Scalar> Model<S> {
    /// Runs encoder and decoder with ground-truth feedback.
    pub fn teacher_forced(
        &self,
        g: &Graph<S>,
        inputs: &SymbolSequence,
        target_mel: &Array2<S>,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<TeacherForcedOutput<S>> {
        let r = self.config.reduction_factor;
        let mel = self.config.mel_bins;
        if target_mel.ncols() != mel {
            return Err(Error::Shape(format!(
                "target mel has {} bins, model expects {mel}",
                target_mel.ncols()
            )));
        }
        if target_mel.nrows() == 0 {
            return Err(Error::InvalidArg("empty target mel".into()));
        }
        let valid_frames = target_mel.nrows();
        let steps = valid_frames.div_ceil(r);
        let padded_frames = steps * r;
        let mut padded = Array2::zeros((padded_frames, mel));
        for f in 0..padded_frames {
            let src = f.min(valid_frames - 1);
            padded.row_mut(f).assign(&target_mel.row(src));
        }

        let memory = self.encode_on(g, inputs, mode, rng)?;
        let mut state = self.initial_state(g, &memory);
        let mut frame_rows = Vec::with_capacity(padded_frames);
        let mut stop_rows = Vec::with_capacity(steps);
        let mut alignment = Vec::with_capacity(steps);
        for t in 0..steps {
            let group = padded
                .slice(ndarray::s![t * r..(t + 1) * r, ..])
                .to_owned();
            let out = self.decode_step(
                g,
                &memory,
                &mut state,
                DecodeMode::TeacherForced(&group),
                mode,
                rng,
            )?;
            for i in 0..r {
                frame_rows.push(g.slice_cols(out.frames, i * mel, (i + 1) * mel));
            }
            stop_rows.push(out.stop_logit);
            alignment.push(out.weights);
        }
        let mel_before = g.concat_rows(&frame_rows);
        let residual = self.postnet.forward(g, mel_before, mode, rng);
        let mel_after = g.add(mel_before, residual);
        let stop_logits = g.concat_rows(&stop_rows);
        Ok(TeacherForcedOutput {
            mel_before,
            mel_after,
            stop_logits,
            alignment,
            padded_target: padded,
            valid_frames,
        })
    }
}

// ---------------------------------------------------------------------------
// Synthesis
// ---------------------------------------------------------------------------

pub struct SynthesisResult {
    pub mel_before: Array2<f64>,
    pub mel_after: Array2<f64>,
    /// Decoder-step-by-memory-position attention weights.
    pub attention: AttentionMatrix,
    pub dual_attention: Option<Array2<f64>>,
    pub steps: usize,
    /// True when the stop token fired before the step cap.
    pub stopped_naturally: bool,
}

impl<S: Scalar> Model<S> {
    /// Free-running synthesis. Stops when the stop token's probability
    /// crosses `stop_threshold` or after `max_steps` decoder steps.
    pub fn synthesize(
        &self,
        inputs: &SymbolSequence,
        max_steps: usize,
        stop_threshold: f64,
        rng: &mut RngStream,
    ) -> Result<SynthesisResult> {
        if max_steps == 0 {
            return Err(Error::InvalidArg("max_steps must be positive".into()));
        }
        let r = self.config.reduction_factor;
        let mel = self.config.mel_bins;
        let g: Graph<S> = Graph::new();
        let memory = self.encode_on(&g, inputs, Mode::Eval, rng)?;
        let mut state = self.initial_state(&g, &memory);
        let mut frame_rows: Vec<Var> = Vec::new();
        let mut att_rows: Vec<Vec<f64>> = Vec::new();
        let mut dual_rows: Vec<Vec<f64>> = Vec::new();
        let mut stopped_naturally = false;
        let mut steps = 0;
        while steps < max_steps {
            let out =
                self.decode_step(&g, &memory, &mut state, DecodeMode::Free, Mode::Eval, rng)?;
            steps += 1;
            for i in 0..r {
                frame_rows.push(g.slice_cols(out.frames, i * mel, (i + 1) * mel));
            }
            att_rows.push(g.value(out.weights).iter().map(|&x| x.to_f64()).collect());
            if let Some(w2) = out.dual_weights {
                dual_rows.push(g.value(w2).iter().map(|&x| x.to_f64()).collect());
            }
            let stop_p = 1.0 / (1.0 + (-g.scalar_value(out.stop_logit).to_f64()).exp());
            if stop_p > stop_threshold {
                stopped_naturally = true;
                break;
            }
        }
        let mel_before_v = g.concat_rows(&frame_rows);
        let residual = self.postnet.forward(&g, mel_before_v, Mode::Eval, rng);
        let mel_after_v = g.add(mel_before_v, residual);
        let to_f64 = |v: Var| g.value(v).mapv(|x| x.to_f64());
        let att = Array2::from_shape_fn((att_rows.len(), memory.len), |(i, j)| att_rows[i][j]);
        let dual = (!dual_rows.is_empty()).then(|| {
            Array2::from_shape_fn((dual_rows.len(), memory.len), |(i, j)| dual_rows[i][j])
        });
        Ok(SynthesisResult {
            mel_before: to_f64(mel_before_v),
            mel_after: to_f64(mel_after_v),
            attention: AttentionMatrix::new(att)?,
            dual_attention: dual,
            steps,
            stopped_naturally,
        })
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"TCLB";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes config plus all named tensors as little-endian f32.
pub fn save_checkpoint<S: Scalar>(model: &mut Model<S>, path: &Path) -> Result<()> {
    let config_text = model.config.to_kv().to_text();
    let params = model.named_params();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in &params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.value.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.value.ncols() as u32).to_le_bytes());
        for v in p.value.iter() {
            out.extend_from_slice(&((*v).to_f64() as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Rebuilds the model from the stored config and overwrites every tensor.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Model<S>> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut buf4 = [0u8; 4];
    file.read_exact(&mut buf4)?;
    if &buf4 != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let read_u32 = |file: &mut dyn std::io::Read| -> Result<u32> {
        let mut b = [0u8; 4];
        file.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    };
    let version = read_u32(&mut file)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let config_len = read_u32(&mut file)? as usize;
    let mut config_bytes = vec![0u8; config_len];
    file.read_exact(&mut config_bytes)?;
    let config_text = String::from_utf8(config_bytes)
        .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
    let config = ModelConfig::from_kv(&KvConfig::parse(&config_text)?)?;
    let mut model: Model<S> = build_model(&config, 0)?;
    let n_tensors = read_u32(&mut file)? as usize;
    let params = model.named_params();
    if n_tensors != params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {n_tensors} tensors, model expects {}",
            params.len()
        )));
    }
    for (expected_name, p) in params {
        let name_len = read_u32(&mut file)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        file.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if name != expected_name {
            return Err(Error::Format(format!(
                "tensor name mismatch: checkpoint {name:?}, model {expected_name:?}"
            )));
        }
        let rows = read_u32(&mut file)? as usize;
        let cols = read_u32(&mut file)? as usize;
        if (rows, cols) != p.value.dim() {
            return Err(Error::Format(format!(
                "tensor {name:?} has shape ({rows}, {cols}), model expects {:?}",
                p.value.dim()
            )));
        }
        let mut data = vec![0u8; rows * cols * 4];
        file.read_exact(&mut data)?;
        let arr = Array2::from_shape_fn((rows, cols), |(i, j)| {
            let o = (i * cols + j) * 4;
            S::of(f32::from_le_bytes([data[o], data[o + 1], data[o + 2], data[o + 3]]) as f64)
        });
        p.value = Rc::new(arr);
    }
    Ok(model)
}

/// Writes a mel matrix (`MELS` magic, little-endian f32 rows).
pub fn write_mel(path: &Path, mel: &Array2<f64>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(b"MELS")?;
    out.write_all(&1u32.to_le_bytes())?;
    out.write_all(&(mel.nrows() as u32).to_le_bytes())?;
    out.write_all(&(mel.ncols() as u32).to_le_bytes())?;
    for v in mel.iter() {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_mel(path: &Path) -> Result<Array2<f64>> {
    let data = std::fs::read(path)?;
    if data.len() < 16 || &data[0..4] != b"MELS" {
        return Err(Error::Format("bad mel file header".into()));
    }
    let u = |o: usize| u32::from_le_bytes([data[o], data[o + 1], data[o + 2], data[o + 3]]);
    if u(4) != 1 {
        return Err(Error::Format("unsupported mel file version".into()));
    }
    let (rows, cols) = (u(8) as usize, u(12) as usize);
    if data.len() != 16 + rows * cols * 4 {
        return Err(Error::Format("mel file length mismatch".into()));
    }
    Ok(Array2::from_shape_fn((rows, cols), |(i, j)| {
        let o = 16 + (i * cols + j) * 4;
        f32::from_le_bytes([data[o], data[o + 1], data[o + 2], data[o + 3]]) as f64
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::collect_params;

    fn tiny_config() -> ModelConfig {
        let mut cfg = ModelConfig::preset(
            EncoderKind::Cbhl,
            true,
            ParamSize::Small,
            InputKind::PhonemeAccent,
            12,
            4,
        )
        .unwrap();
        cfg.widths = Widths {
            embed_dim: 6,
            accent_embed_dim: 4,
            encoder_prenet: (6, 5),
            accent_prenet: (4, 3),
            encoder_units: 4,
            bank_k: 2,
            bank_channels: 3,
            highway_depth: 1,
            cnn_channels: 5,
            decoder_prenet: (6, 4),
            attention_rnn: 6,
            attention_dim: 5,
            decoder_rnn: 6,
            decoder_rnn_layers: 2,
            enc_self_attention_dim: 4,
            enc_self_attention_heads: 2,
            dec_self_attention_heads: 2,
            postnet_channels: 4,
        };
        cfg.mel_bins = 3;
        cfg.validate().unwrap();
        cfg
    }

    fn tiny_inputs() -> SymbolSequence {
        SymbolSequence::with_accents(vec![1, 5, 2, 7, 0], vec![0, 1, 3, 2, 1])
    }

    #[test]
    fn every_toggle_combination_builds_and_synthesizes() {
        for encoder in [EncoderKind::Cbhl, EncoderKind::Cnn] {
            for self_attention in [false, true] {
                for input_kind in [InputKind::PhonemeAccent, InputKind::Character, InputKind::Phone]
                {
                    let mut cfg = tiny_config();
                    cfg.encoder = encoder;
                    cfg.self_attention = self_attention;
                    cfg.input_kind = input_kind;
                    if input_kind != InputKind::PhonemeAccent {
                        cfg.accent_vocab_size = 0;
                        cfg.widths.accent_embed_dim = 0;
                        cfg.widths.accent_prenet = (0, 0);
                    }
                    let model: Model<f32> = build_model(&cfg, 7).unwrap();
                    let inputs = if input_kind == InputKind::PhonemeAccent {
                        tiny_inputs()
                    } else {
                        SymbolSequence::plain(vec![1, 5, 2, 7, 0])
                    };
                    let mut rng = RngStream::new(3).derive("synth");
                    let res = model.synthesize(&inputs, 4, 0.5, &mut rng).unwrap();
                    assert_eq!(res.mel_before.ncols(), cfg.mel_bins);
                    assert_eq!(
                        res.mel_before.nrows(),
                        res.steps * cfg.reduction_factor
                    );
                    assert_eq!(res.dual_attention.is_some(), self_attention);
                }
            }
        }
    }

    #[test]
    fn construction_is_deterministic() {
        let cfg = tiny_config();
        let mut a: Model<f64> = build_model(&cfg, 42).unwrap();
        let mut b: Model<f64> = build_model(&cfg, 42).unwrap();
        let pa = a.named_params();
        let pb = b.named_params();
        assert_eq!(pa.len(), pb.len());
        for ((na, va), (nb, vb)) in pa.iter().zip(pb.iter()) {
            assert_eq!(na, nb);
            assert_eq!(va.value, vb.value);
        }
        let mut c: Model<f64> = build_model(&cfg, 43).unwrap();
        let pc = c.named_params();
        assert!(pa.iter().zip(pc.iter()).any(|((_, x), (_, y))| x.value != y.value));
    }

    #[test]
    fn mismatched_streams_are_rejected() {
        let cfg = tiny_config();
        let model: Model<f32> = build_model(&cfg, 1).unwrap();
        let g = Graph::new();
        let mut rng = RngStream::new(0).derive("enc");
        let bad = SymbolSequence::with_accents(vec![1, 2, 3], vec![0, 1]);
        assert!(model.encode_on(&g, &bad, Mode::Eval, &mut rng).is_err());
        let missing = SymbolSequence::plain(vec![1, 2, 3]);
        assert!(model.encode_on(&g, &missing, Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn out_of_vocab_symbol_is_rejected() {
        let cfg = tiny_config();
        let model: Model<f32> = build_model(&cfg, 1).unwrap();
        let g = Graph::new();
        let mut rng = RngStream::new(0).derive("enc");
        let bad = SymbolSequence::with_accents(vec![1, 99], vec![0, 1]);
        match model.encode_on(&g, &bad, Mode::Eval, &mut rng) {
            Err(Error::OutOfVocab { id: 99, position: 1 }) => {}
            Err(other) => panic!("expected OutOfVocab, got {other:?}"),
            Ok(_) => panic!("expected OutOfVocab, got success"),
        }
    }

    #[test]
    fn teacher_forced_shapes_and_padding() {
        let cfg = tiny_config();
        let model: Model<f64> = build_model(&cfg, 5).unwrap();
        let g = Graph::new();
        let mut rng = RngStream::new(0).derive("tf");
        // 7 frames with r=2 pads to 8
        let target = Array2::from_shape_fn((7, cfg.mel_bins), |(i, j)| 0.1 * (i + j) as f64);
        let out = model
            .teacher_forced(&g, &tiny_inputs(), &target, Mode::Eval, &mut rng)
            .unwrap();
        assert_eq!(g.value(out.mel_before).dim(), (8, cfg.mel_bins));
        assert_eq!(g.value(out.stop_logits).dim(), (4, 1));
        assert_eq!(out.valid_frames, 7);
        assert_eq!(out.padded_target.row(7), out.padded_target.row(6));
        assert_eq!(out.alignment.len(), 4);
        for row in &out.alignment {
            let w = g.value(*row);
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn synthesis_stops_on_threshold_or_cap() {
        let cfg = tiny_config();
        let model: Model<f32> = build_model(&cfg, 5).unwrap();
        let mut rng = RngStream::new(0).derive("synth");
        // threshold 0 fires on the first step
        let res = model.synthesize(&tiny_inputs(), 10, 0.0, &mut rng).unwrap();
        assert_eq!(res.steps, 1);
        assert!(res.stopped_naturally);
        // threshold 1 can never fire, so the cap binds
        let res = model.synthesize(&tiny_inputs(), 3, 1.0, &mut rng).unwrap();
        assert_eq!(res.steps, 3);
        assert!(!res.stopped_naturally);
        assert_eq!(res.attention.data().nrows(), 3);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = tiny_config();
        let mut model: Model<f32> = build_model(&cfg, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tclb");
        save_checkpoint(&mut model, &path).unwrap();
        let mut loaded: Model<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        let pa = model.named_params();
        let pb = loaded.named_params();
        assert_eq!(pa.len(), pb.len());
        for ((na, a), (nb, b)) in pa.iter().zip(pb.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.value, b.value, "tensor {na} not bit-exact");
        }
    }

    #[test]
    fn checkpoint_reload_reproduces_synthesis() {
        let cfg = tiny_config();
        let mut model: Model<f32> = build_model(&cfg, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tclb");
        save_checkpoint(&mut model, &path).unwrap();
        let loaded: Model<f32> = load_checkpoint(&path).unwrap();
        let mut r1 = RngStream::new(9).derive("synth");
        let mut r2 = RngStream::new(9).derive("synth");
        let a = model.synthesize(&tiny_inputs(), 5, 0.9, &mut r1).unwrap();
        let b = loaded.synthesize(&tiny_inputs(), 5, 0.9, &mut r2).unwrap();
        assert_eq!(a.mel_after, b.mel_after);
        assert_eq!(a.attention.data(), b.attention.data());
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let mut cfg = tiny_config();
        cfg.widths.enc_self_attention_heads = 3; // does not divide 4
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("enc_self_attention_heads"), "{err}");

        let mut cfg = tiny_config();
        cfg.reduction_factor = 0;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("reduction_factor"), "{err}");

        let mut cfg = tiny_config();
        cfg.input_kind = InputKind::Character;
        // accent_vocab_size still set from the accent preset
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("accent_vocab_size"), "{err}");
    }

    #[test]
    fn config_round_trips_through_text() {
        let cfg = tiny_config();
        let text = cfg.to_kv().to_text();
        let back = ModelConfig::from_kv(&KvConfig::parse(&text).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn replication_presets_match_published_sizes() {
        // targets: 6.9e6 and 27.3e6 trainable parameters, within 25 %
        let mut t1: Model<f32> =
            build_model(&ModelConfig::replication_preset("tacotron-table1").unwrap(), 0).unwrap();
        let n1 = t1.param_count() as f64;
        assert!(
            (n1 - 6.9e6).abs() / 6.9e6 < 0.25,
            "tacotron-table1 has {n1} params"
        );
        let mut t2: Model<f32> =
            build_model(&ModelConfig::replication_preset("tacotron2-table1").unwrap(), 0).unwrap();
        let n2 = t2.param_count() as f64;
        assert!(
            (n2 - 27.3e6).abs() / 27.3e6 < 0.25,
            "tacotron2-table1 has {n2} params"
        );
    }

    #[test]
    fn large_preset_at_least_three_times_small() {
        let large = ModelConfig::preset(
            EncoderKind::Cbhl,
            true,
            ParamSize::Large,
            InputKind::PhonemeAccent,
            30,
            8,
        )
        .unwrap();
        let small = ModelConfig::preset(
            EncoderKind::Cbhl,
            true,
            ParamSize::Small,
            InputKind::PhonemeAccent,
            30,
            8,
        )
        .unwrap();
        let nl = build_model::<f32>(&large, 0).unwrap().param_count();
        let ns = build_model::<f32>(&small, 0).unwrap().param_count();
        assert!(
            nl >= 3 * ns,
            "large {nl} params is less than 3x small {ns}"
        );
    }

    #[test]
    fn mel_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.mel");
        let mel = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - j as f64) * 0.25);
        write_mel(&path, &mel).unwrap();
        assert_eq!(read_mel(&path).unwrap(), mel);
    }

    #[test]
    fn param_count_matches_manual_linear_count() {
        let cfg = tiny_config();
        let mut model: Model<f64> = build_model(&cfg, 0).unwrap();
        let total = model.param_count();
        let named = collect_params(&mut model, "");
        assert_eq!(
            total,
            named.iter().map(|(_, p)| p.value.len()).sum::<usize>()
        );
        // embedding table alone: vocab 12 x dim 6
        assert!(named
            .iter()
            .any(|(n, p)| n.ends_with("embed.weights") && p.value.len() == 72));
    }
}
