use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView1, Axis};

use super::layers::{AttnCache, AttnShape, FfCache, NormCache};
use super::{ModelConfig, Seq2SeqParams};
use crate::codec::{prompt_slot, TokenId, TokenSeq, VerbalizedQuery, PAD};
use crate::error::{Error, Result};
use crate::kg::RelationId;

/// One teacher-forced training or scoring example.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub enc_ids: Vec<TokenId>,
    /// Encoder attention bits, after any seq2seq dropout.
    pub enc_mask: Vec<bool>,
    pub rel: RelationId,
    pub dec_in: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl Example {
    /// Decoder input is the answer without its last token, target the answer
    /// without its first.
    pub fn new(query: &VerbalizedQuery, enc_mask: Vec<bool>, answer: &TokenSeq) -> Self {
        let n = answer.ids.len();
        Example {
            enc_ids: query.tokens.ids.clone(),
            enc_mask,
            rel: query.rel,
            dec_in: answer.ids[..n.saturating_sub(1)].to_vec(),
            target: answer.ids[1.min(n)..].to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub examples: Vec<Example>,
}

struct Layout {
    batch: usize,
    enc_len: usize,
    dec_len: usize,
    enc_ids: Vec<TokenId>,
    enc_mask: Vec<bool>,
    rels: Vec<RelationId>,
    dec_ids: Vec<TokenId>,
    targets: Vec<TokenId>,
}

impl Layout {
    fn new(batch: &Batch, max_len: usize) -> Result<Self> {
        let b = batch.examples.len();
        let enc_len = batch.examples.iter().map(|e| e.enc_ids.len()).max().unwrap_or(0);
        let dec_len = batch.examples.iter().map(|e| e.dec_in.len()).max().unwrap_or(0);
        for len in [enc_len, dec_len] {
            if len > max_len {
                return Err(Error::SequenceTooLong { len, max_len });
            }
        }
        let mut l = Layout {
            batch: b,
            enc_len,
            dec_len,
            enc_ids: vec![PAD; b * enc_len],
            enc_mask: vec![false; b * enc_len],
            rels: Vec::with_capacity(b),
            dec_ids: vec![PAD; b * dec_len],
            targets: vec![PAD; b * dec_len],
        };
        for (i, ex) in batch.examples.iter().enumerate() {
            assert_eq!(ex.enc_ids.len(), ex.enc_mask.len(), "encoder mask length");
            assert_eq!(ex.dec_in.len(), ex.target.len(), "decoder input/target length");
            l.enc_ids[i * enc_len..i * enc_len + ex.enc_ids.len()].copy_from_slice(&ex.enc_ids);
            l.enc_mask[i * enc_len..i * enc_len + ex.enc_mask.len()].copy_from_slice(&ex.enc_mask);
            l.rels.push(ex.rel);
            l.dec_ids[i * dec_len..i * dec_len + ex.dec_in.len()].copy_from_slice(&ex.dec_in);
            l.targets[i * dec_len..i * dec_len + ex.target.len()].copy_from_slice(&ex.target);
        }
        Ok(l)
    }
}

struct EncLayerCache {
    norm1: NormCache,
    attn: AttnCache,
    norm2: NormCache,
    ff: FfCache,
}

struct DecLayerCache {
    norm1: NormCache,
    self_attn: AttnCache,
    norm2: NormCache,
    cross: AttnCache,
    norm3: NormCache,
    ff: FfCache,
}

struct Trace {
    enc_layers: Vec<EncLayerCache>,
    enc_norm: NormCache,
    enc_out: Array2<f64>,
    dec_layers: Vec<DecLayerCache>,
    dec_norm: NormCache,
    hidden: Array2<f64>,
}

fn embed_encoder(
    params: &Seq2SeqParams,
    ids: &[TokenId],
    rels: &[RelationId],
    len: usize,
) -> Array2<f64> {
    let d = params.tok_emb.ncols();
    let mut x = Array2::zeros((ids.len(), d));
    for (row, &id) in ids.iter().enumerate() {
        let source = match prompt_slot(id) {
            Some(k) => params.prompts.row(4 * rels[row / len].index() + k),
            None => params.tok_emb.row(id as usize),
        };
        let mut r = x.row_mut(row);
        r.assign(&source);
        r += &params.pos_emb.row(row % len);
    }
    x
}

fn embed_decoder(params: &Seq2SeqParams, ids: &[TokenId], len: usize) -> Array2<f64> {
    let d = params.tok_emb.ncols();
    let mut x = Array2::zeros((ids.len(), d));
    for (row, &id) in ids.iter().enumerate() {
        let mut r = x.row_mut(row);
        r.assign(&params.tok_emb.row(id as usize));
        r += &params.pos_emb.row(row % len);
    }
    x
}

fn run_encoder(
    cfg: &ModelConfig,
    params: &Seq2SeqParams,
    mut x: Array2<f64>,
    batch: usize,
    len: usize,
    mask: &[bool],
) -> (Array2<f64>, Vec<EncLayerCache>, NormCache) {
    let shape = AttnShape {
        batch,
        q_len: len,
        k_len: len,
        heads: cfg.n_heads,
        key_mask: mask,
        causal: false,
    };
    let mut caches = Vec::with_capacity(params.encoder.len());
    for layer in &params.encoder {
        let (a, norm1) = layer.norm1.forward(&x);
        let (att, attn) = layer.attn.forward(&a, &a, &shape);
        x += &att;
        let (b, norm2) = layer.norm2.forward(&x);
        let (f, ff) = layer.ff.forward(&b);
        x += &f;
        caches.push(EncLayerCache {
            norm1,
            attn,
            norm2,
            ff,
        });
    }
    let (out, norm) = params.enc_norm.forward(&x);
    (out, caches, norm)
}

#[allow(clippy::too_many_arguments)]
fn run_decoder(
    cfg: &ModelConfig,
    params: &Seq2SeqParams,
    mut y: Array2<f64>,
    batch: usize,
    len: usize,
    enc_out: &Array2<f64>,
    enc_len: usize,
    enc_mask: &[bool],
) -> (Array2<f64>, Vec<DecLayerCache>, NormCache) {
    let all = vec![true; batch * len];
    let self_shape = AttnShape {
        batch,
        q_len: len,
        k_len: len,
        heads: cfg.n_heads,
        key_mask: &all,
        causal: true,
    };
    let cross_shape = AttnShape {
        batch,
        q_len: len,
        k_len: enc_len,
        heads: cfg.n_heads,
        key_mask: enc_mask,
        causal: false,
    };
    let mut caches = Vec::with_capacity(params.decoder.len());
    for layer in &params.decoder {
        let (a, norm1) = layer.norm1.forward(&y);
        let (att, self_attn) = layer.self_attn.forward(&a, &a, &self_shape);
        y += &att;
        let (b, norm2) = layer.norm2.forward(&y);
        let (c, cross) = layer.cross_attn.forward(&b, enc_out, &cross_shape);
        y += &c;
        let (n, norm3) = layer.norm3.forward(&y);
        let (f, ff) = layer.ff.forward(&n);
        y += &f;
        caches.push(DecLayerCache {
            norm1,
            self_attn,
            norm2,
            cross,
            norm3,
            ff,
        });
    }
    let (out, norm) = params.dec_norm.forward(&y);
    (out, caches, norm)
}

fn trace(cfg: &ModelConfig, params: &Seq2SeqParams, l: &Layout) -> Trace {
    let x0 = embed_encoder(params, &l.enc_ids, &l.rels, l.enc_len.max(1));
    let (enc_out, enc_layers, enc_norm) = run_encoder(cfg, params, x0, l.batch, l.enc_len, &l.enc_mask);
    let y0 = embed_decoder(params, &l.dec_ids, l.dec_len.max(1));
    let (hidden, dec_layers, dec_norm) = run_decoder(
        cfg,
        params,
        y0,
        l.batch,
        l.dec_len,
        &enc_out,
        l.enc_len,
        &l.enc_mask,
    );
    Trace {
        enc_layers,
        enc_norm,
        enc_out,
        dec_layers,
        dec_norm,
        hidden,
    }
}

/// Decoder logits, `batch * dec_len` rows over the vocabulary.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Array2<f64>,
    pub batch: usize,
    pub dec_len: usize,
    /// Padded targets aligned with the logit rows.
    pub targets: Vec<TokenId>,
}

impl ForwardOutput {
    pub fn row(&self, example: usize, step: usize) -> ArrayView1<'_, f64> {
        self.logits.row(example * self.dec_len + step)
    }

    pub fn to_array3(&self) -> Array3<f64> {
        let v = self.logits.ncols();
        self.logits
            .clone()
            .into_shape_with_order((self.batch, self.dec_len, v))
            .expect("logit rows are batch * dec_len")
    }
}

pub fn forward(cfg: &ModelConfig, params: &Seq2SeqParams, batch: &Batch) -> Result<ForwardOutput> {
    let l = Layout::new(batch, params.pos_emb.nrows())?;
    let t = trace(cfg, params, &l);
    Ok(ForwardOutput {
        logits: t.hidden.dot(&params.tok_emb.t()),
        batch: l.batch,
        dec_len: l.dec_len,
        targets: l.targets,
    })
}

pub fn log_softmax(row: ArrayView1<'_, f64>) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Mean negative log-likelihood over non-pad targets.
pub fn cross_entropy(logits: &Array2<f64>, targets: &[TokenId], pad: TokenId) -> Result<f64> {
    assert_eq!(logits.nrows(), targets.len(), "one target per logit row");
    let mut total = 0.0;
    let mut n = 0usize;
    for (row, &t) in logits.rows().into_iter().zip(targets) {
        if t == pad {
            continue;
        }
        total -= log_softmax(row)[t as usize];
        n += 1;
    }
    if n == 0 {
        return Err(Error::AllPadTargets);
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: Seq2SeqParams,
    /// Gradient at the encoder input embeddings, one row per padded position.
    pub enc_input: Array2<f64>,
}

fn scatter_embedding_grads(
    grads: &mut Seq2SeqParams,
    dx: &Array2<f64>,
    ids: &[TokenId],
    rels: Option<&[RelationId]>,
    len: usize,
) {
    for (row, &id) in ids.iter().enumerate() {
        let g = dx.row(row);
        let mut pos = grads.pos_emb.row_mut(row % len);
        pos += &g;
        let mut target = match (rels, prompt_slot(id)) {
            (Some(rels), Some(k)) => grads.prompts.row_mut(4 * rels[row / len].index() + k),
            _ => grads.tok_emb.row_mut(id as usize),
        };
        target += &g;
    }
}

/// Loss and exact gradients of [`cross_entropy`] over the batch.
pub fn loss_and_gradients(
    cfg: &ModelConfig,
    params: &Seq2SeqParams,
    batch: &Batch,
) -> Result<(f64, Gradients)> {
    let l = Layout::new(batch, params.pos_emb.nrows())?;
    let t = trace(cfg, params, &l);
    let logits = t.hidden.dot(&params.tok_emb.t());
    let loss = cross_entropy(&logits, &l.targets, PAD)?;
    let n = l.targets.iter().filter(|&&x| x != PAD).count() as f64;

    let mut dlogits = Array2::zeros(logits.raw_dim());
    for ((mut drow, row), &target) in dlogits
        .rows_mut()
        .into_iter()
        .zip(logits.rows())
        .zip(&l.targets)
    {
        if target == PAD {
            continue;
        }
        let lp = log_softmax(row);
        for (g, x) in drow.iter_mut().zip(lp) {
            *g = x.exp() / n;
        }
        drow[target as usize] -= 1.0 / n;
    }

    let mut g = params.zeros_like();
    general_mat_mul(1.0, &dlogits.t(), &t.hidden, 1.0, &mut g.tok_emb);
    let dh = dlogits.dot(&params.tok_emb);

    // decoder
    let mut dy = params.dec_norm.backward(&t.dec_norm, &dh, &mut g.dec_norm);
    let mut denc = Array2::zeros(t.enc_out.raw_dim());
    for ((layer, cache), lg) in params
        .decoder
        .iter()
        .zip(&t.dec_layers)
        .zip(g.decoder.iter_mut())
        .rev()
    {
        let dn = layer.ff.backward(&cache.ff, &dy, &mut lg.ff);
        dy += &layer.norm3.backward(&cache.norm3, &dn, &mut lg.norm3);
        let (dq, dkv) = layer.cross_attn.backward(&cache.cross, &dy, &mut lg.cross_attn);
        denc += &dkv;
        dy += &layer.norm2.backward(&cache.norm2, &dq, &mut lg.norm2);
        let (dq, dkv) = layer.self_attn.backward(&cache.self_attn, &dy, &mut lg.self_attn);
        dy += &layer.norm1.backward(&cache.norm1, &(dq + dkv), &mut lg.norm1);
    }
    scatter_embedding_grads(&mut g, &dy, &l.dec_ids, None, l.dec_len.max(1));

    // encoder
    let mut dx = params.enc_norm.backward(&t.enc_norm, &denc, &mut g.enc_norm);
    for ((layer, cache), lg) in params
        .encoder
        .iter()
        .zip(&t.enc_layers)
        .zip(g.encoder.iter_mut())
        .rev()
    {
        let db = layer.ff.backward(&cache.ff, &dx, &mut lg.ff);
        dx += &layer.norm2.backward(&cache.norm2, &db, &mut lg.norm2);
        let (dq, dkv) = layer.attn.backward(&cache.attn, &dx, &mut lg.attn);
        dx += &layer.norm1.backward(&cache.norm1, &(dq + dkv), &mut lg.norm1);
    }
    scatter_embedding_grads(&mut g, &dx, &l.enc_ids, Some(&l.rels), l.enc_len.max(1));

    Ok((
        loss,
        Gradients {
            params: g,
            enc_input: dx,
        },
    ))
}

/// Encoder states for one query, reused across decoding steps.
#[derive(Clone, Debug)]
pub struct EncodedQuery {
    pub states: Array2<f64>,
    pub mask: Vec<bool>,
}

pub fn encode(cfg: &ModelConfig, params: &Seq2SeqParams, query: &VerbalizedQuery) -> Result<EncodedQuery> {
    let len = query.tokens.len();
    if len > params.pos_emb.nrows() {
        return Err(Error::SequenceTooLong {
            len,
            max_len: params.pos_emb.nrows(),
        });
    }
    let x0 = embed_encoder(params, &query.tokens.ids, &[query.rel], len.max(1));
    let (states, _, _) = run_encoder(cfg, params, x0, 1, len, &query.tokens.mask);
    Ok(EncodedQuery {
        states,
        mask: query.tokens.mask.clone(),
    })
}

/// Log-probabilities of the next token after each decoder prefix.
pub fn next_log_probs(
    cfg: &ModelConfig,
    params: &Seq2SeqParams,
    enc: &EncodedQuery,
    prefixes: &[Vec<TokenId>],
) -> Result<Vec<Vec<f64>>> {
    if prefixes.is_empty() {
        return Ok(Vec::new());
    }
    let b = prefixes.len();
    let len = prefixes.iter().map(Vec::len).max().unwrap_or(0).max(1);
    if len > params.pos_emb.nrows() {
        return Err(Error::SequenceTooLong {
            len,
            max_len: params.pos_emb.nrows(),
        });
    }
    let mut ids = vec![PAD; b * len];
    for (i, p) in prefixes.iter().enumerate() {
        assert!(!p.is_empty(), "decoder prefix must start with <bos>");
        ids[i * len..i * len + p.len()].copy_from_slice(p);
    }
    let enc_len = enc.states.nrows();
    let views: Vec<_> = (0..b).map(|_| enc.states.view()).collect();
    let enc_states = ndarray::concatenate(Axis(0), &views).expect("same width");
    let enc_mask: Vec<bool> = (0..b).flat_map(|_| enc.mask.iter().copied()).collect();
    let y0 = embed_decoder(params, &ids, len);
    let (hidden, _, _) = run_decoder(cfg, params, y0, b, len, &enc_states, enc_len, &enc_mask);
    let rows: Vec<usize> = prefixes
        .iter()
        .enumerate()
        .map(|(i, p)| i * len + p.len() - 1)
        .collect();
    let last = hidden.select(Axis(0), &rows);
    let logits = last.dot(&params.tok_emb.t());
    Ok(logits.rows().into_iter().map(log_softmax).collect())
}
