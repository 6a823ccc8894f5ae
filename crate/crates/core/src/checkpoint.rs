//! Binary checkpoint container.
//!
//! Layout: the line `kgs2s-ckpt v1`, a length-prefixed `key=value` config
//! block, the 32-byte vocabulary digest, then length-prefixed little-endian
//! f64 arrays in parameter order. An optional trailing section carries the
//! optimizer state needed to resume training.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::codec::Vocab;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Seq2SeqParams};
use crate::optim::{Adam, AdamConfig};

const MAGIC: &str = "kgs2s-ckpt v1\n";

/// Where training stood when the checkpoint was written.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub adam: Adam,
    /// Epochs completed so far.
    pub epoch: u64,
    pub best_valid_mrr: f64,
    pub best_epoch: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub desc_len: usize,
    pub params: Seq2SeqParams,
    pub train_state: Option<TrainState>,
}

fn config_block(cfg: &ModelConfig, desc_len: usize) -> String {
    format!(
        "d_model={}\nn_heads={}\nn_enc_layers={}\nn_dec_layers={}\nd_ff={}\nmax_len={}\nvocab_size={}\n\
         n_relations={}\nseq2seq_dropout_p={}\nseed={}\ndesc_len={}\n",
        cfg.d_model,
        cfg.n_heads,
        cfg.n_enc_layers,
        cfg.n_dec_layers,
        cfg.d_ff,
        cfg.max_len,
        cfg.vocab_size,
        cfg.n_relations,
        cfg.seq2seq_dropout_p,
        cfg.seed,
        desc_len
    )
}

fn parse_config_block(text: &str) -> Result<(ModelConfig, usize)> {
    let bad = |m: String| Error::CheckpointMalformed(m);
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("config line {line:?}")))?;
        kv.insert(k, v);
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("config key {k} missing")));
    let int = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(format!("config key {k}"))) };
    let cfg = ModelConfig {
        d_model: int("d_model")?,
        n_heads: int("n_heads")?,
        n_enc_layers: int("n_enc_layers")?,
        n_dec_layers: int("n_dec_layers")?,
        d_ff: int("d_ff")?,
        max_len: int("max_len")?,
        vocab_size: int("vocab_size")?,
        n_relations: int("n_relations")?,
        seq2seq_dropout_p: get("seq2seq_dropout_p")?
            .parse()
            .map_err(|_| bad("config key seq2seq_dropout_p".into()))?,
        seed: get("seed")?.parse().map_err(|_| bad("config key seed".into()))?,
    };
    cfg.validate().map_err(|e| bad(e.to_string()))?;
    Ok((cfg, int("desc_len")?))
}

fn put_u64(out: &mut Vec<u8>, x: u64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, x: f64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_arrays<'a>(out: &mut Vec<u8>, arrays: impl IntoIterator<Item = &'a Array2<f64>>) {
    for a in arrays {
        put_u64(out, a.nrows() as u64);
        put_u64(out, a.ncols() as u64);
        for &x in a.iter() {
            put_f64(out, x);
        }
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint, vocab: &Vocab) -> Vec<u8> {
    let mut out = MAGIC.as_bytes().to_vec();
    let cfg = config_block(&ckpt.config, ckpt.desc_len);
    put_u64(&mut out, cfg.len() as u64);
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&vocab.digest());
    let arrays = ckpt.params.arrays();
    put_u64(&mut out, arrays.len() as u64);
    put_arrays(&mut out, arrays);
    match &ckpt.train_state {
        None => out.push(0),
        Some(ts) => {
            out.push(1);
            put_u64(&mut out, ts.epoch);
            put_f64(&mut out, ts.best_valid_mrr);
            put_u64(&mut out, ts.best_epoch);
            let c = ts.adam.config;
            for x in [c.lr, c.beta1, c.beta2, c.eps] {
                put_f64(&mut out, x);
            }
            put_u64(&mut out, ts.adam.step);
            put_arrays(&mut out, ts.adam.m.arrays());
            put_arrays(&mut out, ts.adam.v.arrays());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn fill(&mut self, targets: Vec<&mut Array2<f64>>) -> Result<()> {
        for a in targets {
            let (r, c) = (self.u64()? as usize, self.u64()? as usize);
            if (r, c) != a.dim() {
                return Err(Error::CheckpointMalformed(format!(
                    "array shape {r}x{c}, expected {}x{}",
                    a.nrows(),
                    a.ncols()
                )));
            }
            let bytes = self.take(r.checked_mul(c).and_then(|n| n.checked_mul(8)).ok_or(Error::Truncated)?)?;
            for (x, b) in a.iter_mut().zip(bytes.chunks_exact(8)) {
                *x = f64::from_le_bytes(b.try_into().unwrap());
            }
        }
        Ok(())
    }
}

pub fn decode_checkpoint(bytes: &[u8], vocab: &Vocab) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let head = bytes.iter().position(|&b| b == b'\n').map_or(bytes, |n| &bytes[..=n]);
    if head != MAGIC.as_bytes() {
        if MAGIC.as_bytes().starts_with(head) {
            return Err(Error::Truncated);
        }
        let found = String::from_utf8_lossy(head).trim_end().chars().take(40).collect();
        return Err(Error::CheckpointVersion(found));
    }
    r.take(MAGIC.len())?;
    let n = r.u64()? as usize;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::CheckpointMalformed("config block is not UTF-8".into()))?;
    let (config, desc_len) = parse_config_block(text)?;
    let digest = r.take(32)?;
    if digest != vocab.digest() {
        return Err(Error::DigestMismatch);
    }
    let mut params = Seq2SeqParams::zeros(&config);
    let count = r.u64()? as usize;
    if count != params.arrays().len() {
        return Err(Error::CheckpointMalformed(format!("{count} arrays for this config")));
    }
    r.fill(params.arrays_mut())?;
    let train_state = match r.take(1)?[0] {
        0 => None,
        1 => {
            let epoch = r.u64()?;
            let best_valid_mrr = r.f64()?;
            let best_epoch = r.u64()?;
            let adam_cfg = AdamConfig {
                lr: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
            };
            let mut adam = Adam::new(adam_cfg, &params);
            adam.step = r.u64()?;
            r.fill(adam.m.arrays_mut())?;
            r.fill(adam.v.arrays_mut())?;
            Some(TrainState {
                adam,
                epoch,
                best_valid_mrr,
                best_epoch,
            })
        }
        t => return Err(Error::CheckpointMalformed(format!("section tag {t}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::CheckpointMalformed("trailing bytes".into()));
    }
    Ok(Checkpoint {
        config,
        desc_len,
        params,
        train_state,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint, vocab: &Vocab) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ckpt, vocab)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Checkpoint> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn make_vocab(extra: &[&str]) -> Vocab {
        let mut t: Vec<&str> = crate::codec::RESERVED_SURFACES.to_vec();
        t.extend_from_slice(extra);
        Vocab::from_tokens(t).unwrap()
    }

    fn fixture(with_state: bool) -> (Checkpoint, Vocab) {
        let vocab = make_vocab(&["alpha", "beta", "gamma"]);
        let config = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 2,
            d_ff: 16,
            max_len: 12,
            vocab_size: vocab.len(),
            n_relations: 3,
            seq2seq_dropout_p: 0.2,
            seed: 9,
        };
        let params = Seq2SeqParams::init(&config).unwrap();
        let train_state = with_state.then(|| {
            let mut adam = Adam::new(AdamConfig::default(), &params);
            let mut p = params.clone();
            let g = params.clone();
            adam.step(&mut p, &g).unwrap();
            TrainState {
                adam,
                epoch: 4,
                best_valid_mrr: 0.123456789,
                best_epoch: 2,
            }
        });
        (
            Checkpoint {
                config,
                desc_len: 10,
                params,
                train_state,
            },
            vocab,
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for with_state in [false, true] {
            let (ckpt, vocab) = fixture(with_state);
            let bytes = encode_checkpoint(&ckpt, &vocab);
            assert!(bytes.starts_with(b"kgs2s-ckpt v1\n"));
            let back = decode_checkpoint(&bytes, &vocab).unwrap();
            assert_eq!(back, ckpt);
            for (a, b) in back.params.arrays().iter().zip(ckpt.params.arrays()) {
                assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn wrong_vocab_is_rejected() {
        let (ckpt, vocab) = fixture(false);
        let other = make_vocab(&["alpha", "beta", "delta"]);
        let bytes = encode_checkpoint(&ckpt, &vocab);
        assert!(matches!(decode_checkpoint(&bytes, &other), Err(Error::DigestMismatch)));
    }

    #[test]
    fn every_truncation_is_detected() {
        let (ckpt, vocab) = fixture(true);
        let bytes = encode_checkpoint(&ckpt, &vocab);
        for cut in (0..bytes.len()).step_by(7).chain([bytes.len() - 1]) {
            match decode_checkpoint(&bytes[..cut], &vocab) {
                Err(Error::Truncated) => {}
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn version_and_trailing_bytes() {
        let (ckpt, vocab) = fixture(false);
        let mut bytes = encode_checkpoint(&ckpt, &vocab);
        let mut v2 = bytes.clone();
        v2[12] = b'2';
        assert!(matches!(decode_checkpoint(&v2, &vocab), Err(Error::CheckpointVersion(v)) if v == "kgs2s-ckpt v2"));
        bytes.push(0);
        assert!(matches!(decode_checkpoint(&bytes, &vocab), Err(Error::CheckpointMalformed(_))));
    }

    #[test]
    fn file_round_trip() {
        let (ckpt, vocab) = fixture(true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save_checkpoint(&path, &ckpt, &vocab).unwrap();
        assert_eq!(load_checkpoint(&path, &vocab).unwrap(), ckpt);
        assert!(matches!(load_checkpoint(dir.path().join("none"), &vocab), Err(Error::MissingFile(_))));
    }
}
