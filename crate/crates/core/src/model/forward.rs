//! Forward pass, masked cross-entropy and hand-written backpropagation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{
    gelu, gelu_grad, layer_norm_backward, layer_norm_forward, matmul, softmax_in_place, MatRef, Rope, Scalar,
};
use super::{final_gain, layer_base, slot, Model, EMBED};
use crate::error::{Error, Result};
use crate::tasks::TrainingExample;
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, masks drawn from the call's seed.
    Train,
    Eval,
}

/// Per-tensor gradients, in the model's tensor order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(model: &Model<T>) -> Self {
        Self {
            tensors: model.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect(),
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }
}

struct LayerCache<T> {
    x_in: Vec<T>,
    a: Vec<T>,
    mean1: Vec<T>,
    rstd1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    o: Vec<T>,
    drop1: Option<Vec<T>>,
    x_mid: Vec<T>,
    b: Vec<T>,
    mean2: Vec<T>,
    rstd2: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
    drop2: Option<Vec<T>>,
}

pub(crate) struct ForwardCache<T> {
    ids: Vec<TokenId>,
    layers: Vec<LayerCache<T>>,
    x_last: Vec<T>,
    xf: Vec<T>,
    meanf: Vec<T>,
    rstdf: Vec<T>,
    rope: Rope<T>,
}

fn dropout_mask<T: Scalar>(len: usize, p: f64, seed: u64, layer: usize, site: u64) -> Vec<T> {
    let mut x = seed ^ 0x51_7cc1_b727_220a_95;
    for v in [layer as u64, site] {
        x = (x ^ v).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 29;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(x);
    let keep = T::of(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect()
}

impl<T: Scalar> Model<T> {
    pub(crate) fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        if ids.len() > self.config.max_len {
            return Err(Error::Overlength {
                len: ids.len(),
                max: self.config.max_len,
            });
        }
        let v = self.vocab();
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(Error::TokenOutOfRange { token: bad, size: v });
        }
        Ok(())
    }

    pub(crate) fn run(&self, ids: &[TokenId], mode: Mode, seed: u64) -> Result<ForwardCache<T>> {
        self.check_ids(ids)?;
        let cfg = &self.config;
        let (n, m, f, h, dh) = (ids.len(), cfg.dim, cfg.ffn_dim, cfg.heads, cfg.head_dim());
        let rope = Rope::new(n.max(1), dh, cfg.rope_base);
        let embed = &self.tensors[EMBED].data;
        let mut x = Vec::with_capacity(n * m);
        for &id in ids {
            x.extend_from_slice(&embed[id as usize * m..(id as usize + 1) * m]);
        }
        let dropout = match mode {
            Mode::Train if cfg.dropout > 0.0 => Some(cfg.dropout),
            _ => None,
        };
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let w = |s: usize| &self.tensors[layer_base(l) + s].data[..];
            let mut a = vec![T::zero(); n * m];
            let mut mean1 = vec![T::zero(); n];
            let mut rstd1 = vec![T::zero(); n];
            layer_norm_forward(
                &x,
                w(slot::LN1_GAIN),
                w(slot::LN1_BIAS),
                &mut a,
                &mut mean1,
                &mut rstd1,
                m,
            );

            let mut q = vec![T::zero(); n * m];
            let mut k = vec![T::zero(); n * m];
            let mut v = vec![T::zero(); n * m];
            let am = MatRef::dense(&a, n, m);
            matmul(am, MatRef::dense(w(slot::WQ), m, m), &mut q, m, false);
            matmul(am, MatRef::dense(w(slot::WK), m, m), &mut k, m, false);
            matmul(am, MatRef::dense(w(slot::WV), m, m), &mut v, m, false);
            for p in 0..n {
                rope.rotate(&mut q[p * m..(p + 1) * m], p, dh, false);
                rope.rotate(&mut k[p * m..(p + 1) * m], p, dh, false);
            }

            let mut probs = vec![T::zero(); h * n * n];
            let mut o = vec![T::zero(); n * m];
            for hh in 0..h {
                let s = &mut probs[hh * n * n..(hh + 1) * n * n];
                matmul(
                    MatRef::new(&q[hh * dh..], n, dh, m),
                    MatRef::new(&k[hh * dh..], n, dh, m).t(),
                    s,
                    n,
                    false,
                );
                for i in 0..n {
                    let row = &mut s[i * n..(i + 1) * n];
                    row[..=i].iter_mut().for_each(|v| *v *= scale);
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].fill(T::zero());
                }
                matmul(
                    MatRef::dense(s, n, n),
                    MatRef::new(&v[hh * dh..], n, dh, m),
                    &mut o[hh * dh..],
                    m,
                    false,
                );
            }
            let mut attn = vec![T::zero(); n * m];
            matmul(
                MatRef::dense(&o, n, m),
                MatRef::dense(w(slot::WO), m, m),
                &mut attn,
                m,
                false,
            );
            let drop1 = dropout.map(|p| dropout_mask::<T>(n * m, p, seed, l, 1));
            if let Some(mask) = &drop1 {
                attn.iter_mut().zip(mask).for_each(|(v, k)| *v *= *k);
            }
            let x_mid: Vec<T> = x.iter().zip(&attn).map(|(a, b)| *a + *b).collect();

            let mut b = vec![T::zero(); n * m];
            let mut mean2 = vec![T::zero(); n];
            let mut rstd2 = vec![T::zero(); n];
            layer_norm_forward(
                &x_mid,
                w(slot::LN2_GAIN),
                w(slot::LN2_BIAS),
                &mut b,
                &mut mean2,
                &mut rstd2,
                m,
            );
            let mut u = vec![T::zero(); n * f];
            for r in 0..n {
                u[r * f..(r + 1) * f].copy_from_slice(w(slot::B1));
            }
            matmul(
                MatRef::dense(&b, n, m),
                MatRef::dense(w(slot::W1), m, f),
                &mut u,
                f,
                true,
            );
            let g: Vec<T> = u.iter().map(|&v| gelu(v)).collect();
            let mut y = vec![T::zero(); n * m];
            for r in 0..n {
                y[r * m..(r + 1) * m].copy_from_slice(w(slot::B2));
            }
            matmul(
                MatRef::dense(&g, n, f),
                MatRef::dense(w(slot::W2), f, m),
                &mut y,
                m,
                true,
            );
            let drop2 = dropout.map(|p| dropout_mask::<T>(n * m, p, seed, l, 2));
            if let Some(mask) = &drop2 {
                y.iter_mut().zip(mask).for_each(|(v, k)| *v *= *k);
            }
            let x_out: Vec<T> = x_mid.iter().zip(&y).map(|(a, b)| *a + *b).collect();

            layers.push(LayerCache {
                x_in: std::mem::replace(&mut x, x_out),
                a,
                mean1,
                rstd1,
                q,
                k,
                v,
                probs,
                o,
                drop1,
                x_mid,
                b,
                mean2,
                rstd2,
                u,
                g,
                drop2,
            });
        }
        let fg = final_gain(cfg.layers);
        let mut xf = vec![T::zero(); n * m];
        let mut meanf = vec![T::zero(); n];
        let mut rstdf = vec![T::zero(); n];
        layer_norm_forward(
            &x,
            &self.tensors[fg].data,
            &self.tensors[fg + 1].data,
            &mut xf,
            &mut meanf,
            &mut rstdf,
            m,
        );
        Ok(ForwardCache {
            ids: ids.to_vec(),
            layers,
            x_last: x,
            xf,
            meanf,
            rstdf,
            rope,
        })
    }

    /// Final hidden states (after the last layer norm), `len x dim`.
    pub fn hidden_states(&self, ids: &[TokenId], mode: Mode, seed: u64) -> Result<Vec<T>> {
        Ok(self.run(ids, mode, seed)?.xf)
    }

    /// Logits for the given positions, `rows.len() x vocab`.
    pub(crate) fn head(&self, cache: &ForwardCache<T>, rows: &[usize]) -> Vec<T> {
        let (m, v) = (self.config.dim, self.vocab());
        let mut xr = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            xr.extend_from_slice(&cache.xf[r * m..(r + 1) * m]);
        }
        let mut logits = vec![T::zero(); rows.len() * v];
        matmul(
            MatRef::dense(&xr, rows.len(), m),
            MatRef::dense(&self.tensors[EMBED].data, v, m).t(),
            &mut logits,
            v,
            false,
        );
        logits
    }

    /// Logits for every position, `len x vocab`.
    pub fn forward(&self, ids: &[TokenId], mode: Mode, seed: u64) -> Result<Vec<T>> {
        let cache = self.run(ids, mode, seed)?;
        let rows: Vec<usize> = (0..ids.len()).collect();
        Ok(self.head(&cache, &rows))
    }

    /// Backpropagates `dlogits` (for `rows`) into `grads`.
    pub(crate) fn backward(&self, cache: &ForwardCache<T>, rows: &[usize], dlogits: &[T], grads: &mut Gradients<T>) {
        let cfg = &self.config;
        let n = cache.ids.len();
        let (m, f, h, dh, vocab) = (cfg.dim, cfg.ffn_dim, cfg.heads, cfg.head_dim(), self.vocab());
        let embed = &self.tensors[EMBED].data;

        // Tied head: logits = xr E^T.
        let mut xr = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            xr.extend_from_slice(&cache.xf[r * m..(r + 1) * m]);
        }
        matmul(
            MatRef::dense(dlogits, rows.len(), vocab).t(),
            MatRef::dense(&xr, rows.len(), m),
            &mut grads.tensors[EMBED],
            m,
            true,
        );
        let mut dxr = vec![T::zero(); rows.len() * m];
        matmul(
            MatRef::dense(dlogits, rows.len(), vocab),
            MatRef::dense(embed, vocab, m),
            &mut dxr,
            m,
            false,
        );
        let mut dxf = vec![T::zero(); n * m];
        for (i, &r) in rows.iter().enumerate() {
            for j in 0..m {
                dxf[r * m + j] += dxr[i * m + j];
            }
        }

        let fg = final_gain(cfg.layers);
        let mut dx = vec![T::zero(); n * m];
        {
            let (lo, hi) = grads.tensors.split_at_mut(fg + 1);
            layer_norm_backward(
                &cache.x_last,
                &self.tensors[fg].data,
                &cache.meanf,
                &cache.rstdf,
                &dxf,
                &mut dx,
                &mut lo[fg],
                &mut hi[0],
                m,
            );
        }

        let scale = T::one() / T::of(dh as f64).sqrt();
        for l in (0..cfg.layers).rev() {
            let c = &cache.layers[l];
            let base = layer_base(l);
            let w = |s: usize| &self.tensors[base + s].data[..];

            // Feed-forward branch.
            let mut dy = dx.clone();
            if let Some(mask) = &c.drop2 {
                dy.iter_mut().zip(mask).for_each(|(v, k)| *v *= *k);
            }
            matmul(
                MatRef::dense(&c.g, n, f).t(),
                MatRef::dense(&dy, n, m),
                &mut grads.tensors[base + slot::W2],
                m,
                true,
            );
            for r in 0..n {
                for j in 0..m {
                    grads.tensors[base + slot::B2][j] += dy[r * m + j];
                }
            }
            let mut du = vec![T::zero(); n * f];
            matmul(
                MatRef::dense(&dy, n, m),
                MatRef::dense(w(slot::W2), f, m).t(),
                &mut du,
                f,
                false,
            );
            du.iter_mut().zip(&c.u).for_each(|(d, &u)| *d *= gelu_grad(u));
            matmul(
                MatRef::dense(&c.b, n, m).t(),
                MatRef::dense(&du, n, f),
                &mut grads.tensors[base + slot::W1],
                f,
                true,
            );
            for r in 0..n {
                for j in 0..f {
                    grads.tensors[base + slot::B1][j] += du[r * f + j];
                }
            }
            let mut db = vec![T::zero(); n * m];
            matmul(
                MatRef::dense(&du, n, f),
                MatRef::dense(w(slot::W1), m, f).t(),
                &mut db,
                m,
                false,
            );
            // dx now holds the gradient w.r.t. x_mid.
            {
                let (lo, hi) = grads.tensors.split_at_mut(base + slot::LN2_BIAS);
                layer_norm_backward(
                    &c.x_mid,
                    w(slot::LN2_GAIN),
                    &c.mean2,
                    &c.rstd2,
                    &db,
                    &mut dx,
                    &mut lo[base + slot::LN2_GAIN],
                    &mut hi[0],
                    m,
                );
            }

            // Attention branch.
            let mut dattn = dx.clone();
            if let Some(mask) = &c.drop1 {
                dattn.iter_mut().zip(mask).for_each(|(v, k)| *v *= *k);
            }
            matmul(
                MatRef::dense(&c.o, n, m).t(),
                MatRef::dense(&dattn, n, m),
                &mut grads.tensors[base + slot::WO],
                m,
                true,
            );
            let mut d_o = vec![T::zero(); n * m];
            matmul(
                MatRef::dense(&dattn, n, m),
                MatRef::dense(w(slot::WO), m, m).t(),
                &mut d_o,
                m,
                false,
            );

            let mut dq = vec![T::zero(); n * m];
            let mut dk = vec![T::zero(); n * m];
            let mut dv = vec![T::zero(); n * m];
            let mut dp = vec![T::zero(); n * n];
            for hh in 0..h {
                let p = &c.probs[hh * n * n..(hh + 1) * n * n];
                let do_h = MatRef::new(&d_o[hh * dh..], n, dh, m);
                matmul(do_h, MatRef::new(&c.v[hh * dh..], n, dh, m).t(), &mut dp, n, false);
                matmul(MatRef::dense(p, n, n).t(), do_h, &mut dv[hh * dh..], m, false);
                for i in 0..n {
                    let prow = &p[i * n..(i + 1) * n];
                    let drow = &mut dp[i * n..(i + 1) * n];
                    let dot: T = prow[..=i].iter().zip(&drow[..=i]).map(|(a, b)| *a * *b).sum();
                    for j in 0..=i {
                        drow[j] = prow[j] * (drow[j] - dot) * scale;
                    }
                    drow[i + 1..].fill(T::zero());
                }
                matmul(
                    MatRef::dense(&dp, n, n),
                    MatRef::new(&c.k[hh * dh..], n, dh, m),
                    &mut dq[hh * dh..],
                    m,
                    false,
                );
                matmul(
                    MatRef::dense(&dp, n, n).t(),
                    MatRef::new(&c.q[hh * dh..], n, dh, m),
                    &mut dk[hh * dh..],
                    m,
                    false,
                );
            }
            for p in 0..n {
                cache.rope.rotate(&mut dq[p * m..(p + 1) * m], p, dh, true);
                cache.rope.rotate(&mut dk[p * m..(p + 1) * m], p, dh, true);
            }
            let at = MatRef::dense(&c.a, n, m).t();
            matmul(
                at,
                MatRef::dense(&dq, n, m),
                &mut grads.tensors[base + slot::WQ],
                m,
                true,
            );
            matmul(
                at,
                MatRef::dense(&dk, n, m),
                &mut grads.tensors[base + slot::WK],
                m,
                true,
            );
            matmul(
                at,
                MatRef::dense(&dv, n, m),
                &mut grads.tensors[base + slot::WV],
                m,
                true,
            );
            let mut da = vec![T::zero(); n * m];
            matmul(
                MatRef::dense(&dq, n, m),
                MatRef::dense(w(slot::WQ), m, m).t(),
                &mut da,
                m,
                false,
            );
            matmul(
                MatRef::dense(&dk, n, m),
                MatRef::dense(w(slot::WK), m, m).t(),
                &mut da,
                m,
                true,
            );
            matmul(
                MatRef::dense(&dv, n, m),
                MatRef::dense(w(slot::WV), m, m).t(),
                &mut da,
                m,
                true,
            );
            {
                let (lo, hi) = grads.tensors.split_at_mut(base + slot::LN1_BIAS);
                layer_norm_backward(
                    &c.x_in,
                    w(slot::LN1_GAIN),
                    &c.mean1,
                    &c.rstd1,
                    &da,
                    &mut dx,
                    &mut lo[base + slot::LN1_GAIN],
                    &mut hi[0],
                    m,
                );
            }
        }

        let de = &mut grads.tensors[EMBED];
        for (p, &id) in cache.ids.iter().enumerate() {
            let row = &mut de[id as usize * m..(id as usize + 1) * m];
            for j in 0..m {
                row[j] += dx[p * m + j];
            }
        }
    }

    /// Loss of one example and the gradient of every tensor.
    pub fn loss_and_gradients(&self, example: &TrainingExample, mode: Mode, seed: u64) -> Result<(f64, Gradients<T>)> {
        let mut grads = Gradients::zeros_like(self);
        let targets = target_rows(example);
        if targets.is_empty() {
            return Err(Error::EmptyMask);
        }
        let loss = self.accumulate_example(example, mode, seed, T::of(1.0 / targets.len() as f64), &mut grads)?;
        Ok((loss / targets.len() as f64, grads))
    }

    /// Adds `weight * d(sum of target losses)` to `grads`; returns the summed loss.
    pub(crate) fn accumulate_example(
        &self,
        example: &TrainingExample,
        mode: Mode,
        seed: u64,
        weight: T,
        grads: &mut Gradients<T>,
    ) -> Result<f64> {
        if example.ids.len() != example.loss_mask.len() {
            return Err(Error::InvalidRecord("mask length differs from ids".into()));
        }
        let rows = target_rows(example);
        let cache = self.run(&example.ids, mode, seed)?;
        let mut logits = self.head(&cache, &rows);
        let v = self.vocab();
        let mut total = 0.0;
        for (i, &r) in rows.iter().enumerate() {
            let row = &mut logits[i * v..(i + 1) * v];
            let target = example.ids[r + 1] as usize;
            let picked = row[target];
            let lse = softmax_in_place(row);
            total += (lse - picked).to_f64().unwrap();
            row[target] -= T::one();
            row.iter_mut().for_each(|g| *g *= weight);
        }
        self.backward(&cache, &rows, &logits, grads);
        Ok(total)
    }
}

/// Positions `i` whose next token `i + 1` is a loss target.
pub(crate) fn target_rows(example: &TrainingExample) -> Vec<usize> {
    (0..example.ids.len().saturating_sub(1))
        .filter(|&i| example.loss_mask[i + 1] == 1)
        .collect()
}

/// Mean cross-entropy over target positions: row `i` predicts `ids[i + 1]`
/// when `loss_mask[i + 1] == 1`. `logits` is `len x vocab`.
pub fn loss<T: Scalar>(logits: &[T], vocab: usize, example: &TrainingExample) -> Result<f64> {
    Ok(loss_and_grad(logits, vocab, example)?.0)
}

/// Loss and its gradient with respect to every logit; non-target rows are exactly zero.
pub fn loss_and_grad<T: Scalar>(logits: &[T], vocab: usize, example: &TrainingExample) -> Result<(f64, Vec<T>)> {
    let n = example.ids.len();
    if logits.len() != n * vocab || example.loss_mask.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n * vocab,
            got: logits.len(),
        });
    }
    let rows = target_rows(example);
    if rows.is_empty() {
        return Err(Error::EmptyMask);
    }
    let inv = 1.0 / rows.len() as f64;
    let mut grad = vec![T::zero(); n * vocab];
    let mut total = 0.0;
    for &r in &rows {
        let target = example.ids[r + 1] as usize;
        let g = &mut grad[r * vocab..(r + 1) * vocab];
        g.copy_from_slice(&logits[r * vocab..(r + 1) * vocab]);
        let picked = g[target];
        let lse = softmax_in_place(g);
        total += (lse - picked).to_f64().unwrap();
        g[target] -= T::one();
        g.iter_mut().for_each(|v| *v *= T::of(inv));
    }
    Ok((total * inv, grad))
}
