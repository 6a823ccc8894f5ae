use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Axis, Zip};

const LN_EPS: f64 = 1e-5;

fn sum_rows_into(dy: &Array2<f64>, acc: &mut Array2<f64>) {
    let s = dy.sum_axis(Axis(0));
    acc.row_mut(0).zip_mut_with(&s, |a, &b| *a += b);
}

/// `y = x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

impl Linear {
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    /// Accumulates into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        general_mat_mul(1.0, &x.t(), dy, 1.0, &mut grad.w);
        sum_rows_into(dy, &mut grad.b);
        dy.dot(&self.w.t())
    }

    pub(super) fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
    }

    pub(super) fn arrays_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Array2<f64>>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Array2<f64>,
    pub bias: Array2<f64>,
}

pub(super) struct NormCache {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub(super) fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        let mut y = &xhat * &self.gain;
        y += &self.bias;
        (y, NormCache { xhat, inv_std })
    }

    pub(super) fn backward(&self, cache: &NormCache, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        sum_rows_into(&(dy * &cache.xhat), &mut grad.gain);
        sum_rows_into(dy, &mut grad.bias);
        let d = dy.ncols() as f64;
        let mut dx = dy * &self.gain;
        for ((mut row, xh), &inv) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(&cache.inv_std)
        {
            let mean = row.sum() / d;
            let mean_x = row.dot(&xh) / d;
            Zip::from(&mut row)
                .and(&xh)
                .for_each(|g, &x| *g = inv * (*g - mean - x * mean_x));
        }
        dx
    }

    pub(super) fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        out.push((format!("{prefix}.gain"), &self.gain));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(super) fn arrays_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Array2<f64>>) {
        out.push(&mut self.gain);
        out.push(&mut self.bias);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

pub(super) struct FfCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl FeedForward {
    pub(super) fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, FfCache) {
        let pre = self.up.forward(x);
        let act = pre.mapv(gelu);
        let y = self.down.forward(&act);
        (
            y,
            FfCache {
                x: x.clone(),
                pre,
                act,
            },
        )
    }

    pub(super) fn backward(&self, cache: &FfCache, dy: &Array2<f64>, grad: &mut FeedForward) -> Array2<f64> {
        let mut da = self.down.backward(&cache.act, dy, &mut grad.down);
        Zip::from(&mut da)
            .and(&cache.pre)
            .for_each(|g, &p| *g *= gelu_grad(p));
        self.up.backward(&cache.x, &da, &mut grad.up)
    }

    pub(super) fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        self.up.named(&format!("{prefix}.up"), out);
        self.down.named(&format!("{prefix}.down"), out);
    }

    pub(super) fn arrays_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Array2<f64>>) {
        self.up.arrays_mut(out);
        self.down.arrays_mut(out);
    }
}

/// Multi-head scaled dot-product attention over a batch stored as stacked
/// rows: queries are `batch * q_len` rows, keys/values `batch * k_len` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

/// Shape and masking of one attention call.
pub(super) struct AttnShape<'a> {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// `batch * k_len` key validity bits.
    pub key_mask: &'a [bool],
    pub causal: bool,
}

pub(super) struct AttnCache {
    q_src: Array2<f64>,
    kv_src: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    batch: usize,
    q_len: usize,
    k_len: usize,
    heads: usize,
}

impl Attention {
    pub(super) fn forward(
        &self,
        q_src: &Array2<f64>,
        kv_src: &Array2<f64>,
        shape: &AttnShape<'_>,
    ) -> (Array2<f64>, AttnCache) {
        let q = self.q.forward(q_src);
        let k = self.k.forward(kv_src);
        let v = self.v.forward(kv_src);
        let d = q.ncols();
        let dk = d / shape.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut ctx = Array2::zeros((q.nrows(), d));
        let mut probs = Vec::with_capacity(shape.batch * shape.heads);
        for b in 0..shape.batch {
            let qr = b * shape.q_len..(b + 1) * shape.q_len;
            let kr = b * shape.k_len..(b + 1) * shape.k_len;
            let valid = &shape.key_mask[kr.clone()];
            for h in 0..shape.heads {
                let cols = h * dk..(h + 1) * dk;
                let qh = q.slice(s![qr.clone(), cols.clone()]);
                let kh = k.slice(s![kr.clone(), cols.clone()]);
                let vh = v.slice(s![kr.clone(), cols.clone()]);
                let mut p = qh.dot(&kh.t());
                for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                    let mut max = f64::NEG_INFINITY;
                    for (j, x) in row.iter_mut().enumerate() {
                        if !valid[j] || (shape.causal && j > i) {
                            *x = f64::NEG_INFINITY;
                        } else {
                            *x *= scale;
                            max = max.max(*x);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        row.fill(0.0);
                        continue;
                    }
                    let mut sum = 0.0;
                    row.mapv_inplace(|x| {
                        let e = (x - max).exp();
                        sum += e;
                        e
                    });
                    row.mapv_inplace(|x| x / sum);
                }
                ctx.slice_mut(s![qr.clone(), cols]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        let out = self.o.forward(&ctx);
        (
            out,
            AttnCache {
                q_src: q_src.clone(),
                kv_src: kv_src.clone(),
                q,
                k,
                v,
                probs,
                ctx,
                batch: shape.batch,
                q_len: shape.q_len,
                k_len: shape.k_len,
                heads: shape.heads,
            },
        )
    }

    /// Returns `(dL/dq_src, dL/dkv_src)`.
    pub(super) fn backward(
        &self,
        cache: &AttnCache,
        dy: &Array2<f64>,
        grad: &mut Attention,
    ) -> (Array2<f64>, Array2<f64>) {
        let dctx = self.o.backward(&cache.ctx, dy, &mut grad.o);
        let d = cache.q.ncols();
        let dk = d / cache.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dkm = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for b in 0..cache.batch {
            let qr = b * cache.q_len..(b + 1) * cache.q_len;
            let kr = b * cache.k_len..(b + 1) * cache.k_len;
            for h in 0..cache.heads {
                let cols = h * dk..(h + 1) * dk;
                let p = &cache.probs[b * cache.heads + h];
                let qh = cache.q.slice(s![qr.clone(), cols.clone()]);
                let kh = cache.k.slice(s![kr.clone(), cols.clone()]);
                let vh = cache.v.slice(s![kr.clone(), cols.clone()]);
                let dch = dctx.slice(s![qr.clone(), cols.clone()]);
                let mut ds = dch.dot(&vh.t());
                dv.slice_mut(s![kr.clone(), cols.clone()]).assign(&p.t().dot(&dch));
                for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let inner = drow.dot(&prow);
                    Zip::from(&mut drow)
                        .and(&prow)
                        .for_each(|g, &pv| *g = pv * (*g - inner) * scale);
                }
                dq.slice_mut(s![qr.clone(), cols.clone()]).assign(&ds.dot(&kh));
                dkm.slice_mut(s![kr.clone(), cols]).assign(&ds.t().dot(&qh));
            }
        }
        let dq_src = self.q.backward(&cache.q_src, &dq, &mut grad.q);
        let mut dkv = self.k.backward(&cache.kv_src, &dkm, &mut grad.k);
        dkv += &self.v.backward(&cache.kv_src, &dv, &mut grad.v);
        (dq_src, dkv)
    }

    pub(super) fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        self.q.named(&format!("{prefix}.q"), out);
        self.k.named(&format!("{prefix}.k"), out);
        self.v.named(&format!("{prefix}.v"), out);
        self.o.named(&format!("{prefix}.o"), out);
    }

    pub(super) fn arrays_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Array2<f64>>) {
        self.q.arrays_mut(out);
        self.k.arrays_mut(out);
        self.v.arrays_mut(out);
        self.o.arrays_mut(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut s = seed;
        Array2::from_shape_simple_fn((rows, cols), || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let ln = LayerNorm {
            gain: Array2::ones((1, 6)),
            bias: Array2::zeros((1, 6)),
        };
        let (y, _) = ln.forward(&arr(4, 6, 9));
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 6.0;
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let d = 4;
        let lin = |s| Linear {
            w: arr(d, d, s),
            b: Array2::zeros((1, d)),
        };
        let att = Attention {
            q: lin(1),
            k: lin(2),
            v: lin(3),
            o: lin(4),
        };
        let x = arr(3, d, 5);
        let mask = [true, false, true];
        let shape = AttnShape {
            batch: 1,
            q_len: 3,
            k_len: 3,
            heads: 2,
            key_mask: &mask,
            causal: true,
        };
        let (_, cache) = att.forward(&x, &x, &shape);
        for p in &cache.probs {
            assert_eq!(p[[0, 1]], 0.0);
            assert_eq!(p[[2, 1]], 0.0);
            assert_eq!(p[[0, 2]], 0.0);
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }
}
