//! Encoder-decoder transformer with relation soft prompts.
//!
//! Pre-normalization layers, learned positions, GELU feed-forward blocks and
//! an output projection tied to the token embeddings. All arithmetic is f64.

mod layers;
mod net;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::VerbalizedQuery;
use crate::error::{Error, Result};

pub use layers::{Attention, FeedForward, LayerNorm, Linear};
pub use net::{
    cross_entropy, encode, forward, log_softmax, loss_and_gradients, next_log_probs, Batch,
    EncodedQuery, Example, ForwardOutput, Gradients,
};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub n_relations: usize,
    pub seq2seq_dropout_p: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 256,
            max_len: 64,
            vocab_size: 0,
            n_relations: 0,
            seq2seq_dropout_p: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_len == 0 {
            return bad("d_model, n_heads, d_ff and max_len must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return bad("at least one encoder and one decoder layer is required");
        }
        if self.vocab_size == 0 || self.n_relations == 0 {
            return bad("vocab_size and n_relations must be positive");
        }
        if !(0.0..=1.0).contains(&self.seq2seq_dropout_p) {
            return bad("seq2seq_dropout_p must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: Attention,
    pub norm2: LayerNorm,
    pub cross_attn: Attention,
    pub norm3: LayerNorm,
    pub ff: FeedForward,
}

/// Every trainable array. Also used as the gradient and Adam-moment
/// container, so it is always shaped by a [`ModelConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqParams {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    /// Row `4 * rel + k` replaces the embedding of placeholder `<p{k+1}>`.
    pub prompts: Array2<f64>,
    pub encoder: Vec<EncoderLayer>,
    pub enc_norm: LayerNorm,
    pub decoder: Vec<DecoderLayer>,
    pub dec_norm: LayerNorm,
}

enum Fill<'a> {
    Zeros,
    Random(&'a mut ChaCha8Rng),
}

impl Fill<'_> {
    fn matrix(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        match self {
            Fill::Zeros => Array2::zeros((rows, cols)),
            Fill::Random(rng) => {
                let normal = Normal::new(0.0, INIT_STD).unwrap();
                Array2::from_shape_simple_fn((rows, cols), || normal.sample(&mut **rng))
            }
        }
    }

    fn gain(&self, d: usize) -> Array2<f64> {
        match self {
            Fill::Zeros => Array2::zeros((1, d)),
            Fill::Random(_) => Array2::ones((1, d)),
        }
    }

    fn linear(&mut self, d_in: usize, d_out: usize) -> Linear {
        Linear {
            w: self.matrix(d_in, d_out),
            b: Array2::zeros((1, d_out)),
        }
    }

    fn norm(&self, d: usize) -> LayerNorm {
        LayerNorm {
            gain: self.gain(d),
            bias: Array2::zeros((1, d)),
        }
    }

    fn attention(&mut self, d: usize) -> Attention {
        Attention {
            q: self.linear(d, d),
            k: self.linear(d, d),
            v: self.linear(d, d),
            o: self.linear(d, d),
        }
    }

    fn ff(&mut self, d: usize, d_ff: usize) -> FeedForward {
        FeedForward {
            up: self.linear(d, d_ff),
            down: self.linear(d_ff, d),
        }
    }
}

impl Seq2SeqParams {
    fn build(cfg: &ModelConfig, mut fill: Fill<'_>) -> Self {
        let d = cfg.d_model;
        let tok_emb = fill.matrix(cfg.vocab_size, d);
        let pos_emb = fill.matrix(cfg.max_len, d);
        let prompts = fill.matrix(4 * cfg.n_relations, d);
        let encoder = (0..cfg.n_enc_layers)
            .map(|_| EncoderLayer {
                norm1: fill.norm(d),
                attn: fill.attention(d),
                norm2: fill.norm(d),
                ff: fill.ff(d, cfg.d_ff),
            })
            .collect();
        let enc_norm = fill.norm(d);
        let decoder = (0..cfg.n_dec_layers)
            .map(|_| DecoderLayer {
                norm1: fill.norm(d),
                self_attn: fill.attention(d),
                norm2: fill.norm(d),
                cross_attn: fill.attention(d),
                norm3: fill.norm(d),
                ff: fill.ff(d, cfg.d_ff),
            })
            .collect();
        let dec_norm = fill.norm(d);
        Seq2SeqParams {
            tok_emb,
            pos_emb,
            prompts,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
        }
    }

    /// Seeded initialization: N(0, 0.02) matrices, zero biases, unit gains.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self::build(cfg, Fill::Random(&mut rng)))
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::build(cfg, Fill::Zeros)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for a in z.arrays_mut() {
            a.fill(0.0);
        }
        z
    }

    /// Named arrays in the canonical enumeration order (checkpoints and
    /// [`param_count`] use the same order).
    pub fn named_arrays(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
            ("prompts".into(), &self.prompts),
        ];
        for (i, l) in self.encoder.iter().enumerate() {
            let p = format!("enc.{i}");
            l.norm1.named(&format!("{p}.norm1"), &mut out);
            l.attn.named(&format!("{p}.attn"), &mut out);
            l.norm2.named(&format!("{p}.norm2"), &mut out);
            l.ff.named(&format!("{p}.ff"), &mut out);
        }
        self.enc_norm.named("enc_norm", &mut out);
        for (i, l) in self.decoder.iter().enumerate() {
            let p = format!("dec.{i}");
            l.norm1.named(&format!("{p}.norm1"), &mut out);
            l.self_attn.named(&format!("{p}.self_attn"), &mut out);
            l.norm2.named(&format!("{p}.norm2"), &mut out);
            l.cross_attn.named(&format!("{p}.cross_attn"), &mut out);
            l.norm3.named(&format!("{p}.norm3"), &mut out);
            l.ff.named(&format!("{p}.ff"), &mut out);
        }
        self.dec_norm.named("dec_norm", &mut out);
        out
    }

    pub fn arrays(&self) -> Vec<&Array2<f64>> {
        self.named_arrays().into_iter().map(|(_, a)| a).collect()
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> =
            vec![&mut self.tok_emb, &mut self.pos_emb, &mut self.prompts];
        for l in &mut self.encoder {
            l.norm1.arrays_mut(&mut out);
            l.attn.arrays_mut(&mut out);
            l.norm2.arrays_mut(&mut out);
            l.ff.arrays_mut(&mut out);
        }
        self.enc_norm.arrays_mut(&mut out);
        for l in &mut self.decoder {
            l.norm1.arrays_mut(&mut out);
            l.self_attn.arrays_mut(&mut out);
            l.norm2.arrays_mut(&mut out);
            l.cross_attn.arrays_mut(&mut out);
            l.norm3.arrays_mut(&mut out);
            l.ff.arrays_mut(&mut out);
        }
        self.dec_norm.arrays_mut(&mut out);
        out
    }

    pub fn n_params(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.iter().all(|x| x.is_finite()))
    }
}

/// Closed-form parameter count.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let norm = 2 * d;
    let attn = 4 * (d * d + d);
    let ff = d * cfg.d_ff + cfg.d_ff + cfg.d_ff * d + d;
    let embeddings = cfg.vocab_size * d + cfg.max_len * d + 4 * cfg.n_relations * d;
    let enc_layer = norm + attn + norm + ff;
    let dec_layer = norm + attn + norm + attn + norm + ff;
    embeddings + cfg.n_enc_layers * enc_layer + norm + cfg.n_dec_layers * dec_layer + norm
}

/// Change in [`param_count`] when the graph gains relations and entities
/// while the vocabulary stays fixed. Entities are pure text, so only the
/// relation prompt table grows.
pub fn param_growth(cfg: &ModelConfig, added_relations: usize, _added_entities: usize) -> usize {
    let grown = ModelConfig {
        n_relations: cfg.n_relations + added_relations,
        ..cfg.clone()
    };
    param_count(&grown) - param_count(cfg)
}

/// Attention-mask bits after seq2seq dropout: each maskable position is
/// dropped independently with probability `p`; all other positions stay on.
pub fn apply_seq2seq_dropout<R: Rng + ?Sized>(
    query: &VerbalizedQuery,
    p: f64,
    rng: &mut R,
) -> Vec<bool> {
    query
        .tokens
        .mask
        .iter()
        .zip(&query.maskable)
        .map(|(&bit, &maskable)| {
            if maskable && p > 0.0 {
                bit && rng.random::<f64>() >= p
            } else {
                bit
            }
        })
        .collect()
}
