//! Autoregressive decoding with a key/value cache.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{gelu, layer_norm_forward, matmul, softmax_in_place, MatRef, Rope, Scalar};
use super::{final_gain, layer_base, slot, Model, EMBED};
use crate::error::{Error, Result};
use crate::vocab::{TokenId, EOS_ID};

/// Temperatures below this decode greedily.
pub const MIN_TEMPERATURE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Strategy {
    Greedy,
    Temperature { tau: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub max_new_tokens: usize,
    pub eos: TokenId,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            max_new_tokens: 256,
            eos: EOS_ID,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutput {
    /// Prefix followed by the continuation.
    pub ids: Vec<TokenId>,
    /// Generated tokens, including the end token when one was produced.
    pub continuation: Vec<TokenId>,
    pub stopped_at_eos: bool,
}

/// Rotated keys and values of every processed position, per layer.
pub(crate) struct KvCache<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    rope: Rope<T>,
    len: usize,
}

impl<T: Scalar> Model<T> {
    pub(crate) fn new_cache(&self) -> KvCache<T> {
        let cfg = &self.config;
        KvCache {
            keys: vec![Vec::new(); cfg.layers],
            values: vec![Vec::new(); cfg.layers],
            rope: Rope::new(cfg.max_len, cfg.head_dim(), cfg.rope_base),
            len: 0,
        }
    }

    /// Feeds one token at the next position; returns its logits row.
    pub(crate) fn step_cached(&self, cache: &mut KvCache<T>, id: TokenId) -> Result<Vec<T>> {
        let cfg = &self.config;
        let (m, f, h, dh) = (cfg.dim, cfg.ffn_dim, cfg.heads, cfg.head_dim());
        let pos = cache.len;
        if pos >= cfg.max_len {
            return Err(Error::Overlength {
                len: pos + 1,
                max: cfg.max_len,
            });
        }
        if id as usize >= self.vocab() {
            return Err(Error::TokenOutOfRange {
                token: id,
                size: self.vocab(),
            });
        }
        let embed = &self.tensors[EMBED].data;
        let mut x = embed[id as usize * m..(id as usize + 1) * m].to_vec();
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (mut mu, mut rs) = ([T::zero()], [T::zero()]);
        for l in 0..cfg.layers {
            let w = |s: usize| &self.tensors[layer_base(l) + s].data[..];
            let mut a = vec![T::zero(); m];
            layer_norm_forward(&x, w(slot::LN1_GAIN), w(slot::LN1_BIAS), &mut a, &mut mu, &mut rs, m);
            let am = MatRef::dense(&a, 1, m);
            let mut q = vec![T::zero(); m];
            let mut k = vec![T::zero(); m];
            let mut v = vec![T::zero(); m];
            matmul(am, MatRef::dense(w(slot::WQ), m, m), &mut q, m, false);
            matmul(am, MatRef::dense(w(slot::WK), m, m), &mut k, m, false);
            matmul(am, MatRef::dense(w(slot::WV), m, m), &mut v, m, false);
            cache.rope.rotate(&mut q, pos, dh, false);
            cache.rope.rotate(&mut k, pos, dh, false);
            cache.keys[l].extend_from_slice(&k);
            cache.values[l].extend_from_slice(&v);
            let n = pos + 1;
            let (keys, values) = (&cache.keys[l], &cache.values[l]);
            let mut o = vec![T::zero(); m];
            let mut s = vec![T::zero(); n];
            for hh in 0..h {
                matmul(
                    MatRef::new(&q[hh * dh..], 1, dh, m),
                    MatRef::new(&keys[hh * dh..], n, dh, m).t(),
                    &mut s,
                    n,
                    false,
                );
                s.iter_mut().for_each(|v| *v *= scale);
                softmax_in_place(&mut s);
                matmul(
                    MatRef::dense(&s, 1, n),
                    MatRef::new(&values[hh * dh..], n, dh, m),
                    &mut o[hh * dh..],
                    m,
                    false,
                );
            }
            let mut attn = vec![T::zero(); m];
            matmul(
                MatRef::dense(&o, 1, m),
                MatRef::dense(w(slot::WO), m, m),
                &mut attn,
                m,
                false,
            );
            x.iter_mut().zip(&attn).for_each(|(a, b)| *a += *b);

            let mut b = vec![T::zero(); m];
            layer_norm_forward(&x, w(slot::LN2_GAIN), w(slot::LN2_BIAS), &mut b, &mut mu, &mut rs, m);
            let mut u = w(slot::B1).to_vec();
            matmul(
                MatRef::dense(&b, 1, m),
                MatRef::dense(w(slot::W1), m, f),
                &mut u,
                f,
                true,
            );
            u.iter_mut().for_each(|v| *v = gelu(*v));
            let mut y = w(slot::B2).to_vec();
            matmul(
                MatRef::dense(&u, 1, f),
                MatRef::dense(w(slot::W2), f, m),
                &mut y,
                m,
                true,
            );
            x.iter_mut().zip(&y).for_each(|(a, b)| *a += *b);
        }
        cache.len += 1;
        let fg = final_gain(cfg.layers);
        let mut xf = vec![T::zero(); m];
        layer_norm_forward(
            &x,
            &self.tensors[fg].data,
            &self.tensors[fg + 1].data,
            &mut xf,
            &mut mu,
            &mut rs,
            m,
        );
        let vsize = self.vocab();
        let mut logits = vec![T::zero(); vsize];
        matmul(
            MatRef::dense(&xf, 1, m),
            MatRef::dense(embed, vsize, m).t(),
            &mut logits,
            vsize,
            false,
        );
        Ok(logits)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample<T: Scalar>(row: &[T], tau: f64, rng: &mut ChaCha8Rng) -> usize {
    let scaled: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap() / tau).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    argmax(row)
}

/// Extends `prefix` until the end token, `max_new_tokens`, or the context limit.
pub fn decode<T: Scalar>(model: &Model<T>, prefix: &[TokenId], cfg: &DecodeConfig) -> Result<DecodeOutput> {
    if prefix.is_empty() {
        return Err(Error::Config("decoding needs a non-empty prefix".into()));
    }
    if prefix.len() >= model.config.max_len {
        return Err(Error::Overlength {
            len: prefix.len(),
            max: model.config.max_len,
        });
    }
    model.check_ids(prefix)?;
    let mut cache = model.new_cache();
    let mut logits = Vec::new();
    for &id in prefix {
        logits = model.step_cached(&mut cache, id)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut continuation = Vec::new();
    let mut stopped_at_eos = false;
    let room = model.config.max_len - prefix.len();
    for i in 0..cfg.max_new_tokens.min(room) {
        let next = match cfg.strategy {
            Strategy::Temperature { tau } if tau >= MIN_TEMPERATURE => sample(&logits, tau, &mut rng),
            _ => argmax(&logits),
        } as TokenId;
        continuation.push(next);
        if next == cfg.eos {
            stopped_at_eos = true;
            break;
        }
        if i + 1 < cfg.max_new_tokens.min(room) {
            logits = model.step_cached(&mut cache, next)?;
        }
    }
    let mut ids = prefix.to_vec();
    ids.extend_from_slice(&continuation);
    Ok(DecodeOutput {
        ids,
        continuation,
        stopped_at_eos,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{Mode, ModelConfig};
    use super::*;

    fn model() -> Model<f64> {
        let cfg = ModelConfig {
            layers: 2,
            dim: 16,
            heads: 2,
            ffn_dim: 24,
            max_len: 12,
            text_vocab: 20,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        Model::init(cfg, 5).unwrap()
    }

    #[test]
    fn cached_steps_match_full_forward() {
        let m = model();
        let ids = [1u32, 7, 3, 3, 19, 0];
        let full = m.forward(&ids, Mode::Eval, 0).unwrap();
        let mut cache = m.new_cache();
        for (p, &id) in ids.iter().enumerate() {
            let row = m.step_cached(&mut cache, id).unwrap();
            for (a, b) in row.iter().zip(&full[p * 20..(p + 1) * 20]) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn respects_limits() {
        let m = model();
        let cfg = DecodeConfig {
            max_new_tokens: 50,
            eos: 999,
            ..DecodeConfig::default()
        };
        let out = decode(&m, &[1, 2, 3], &cfg).unwrap();
        assert_eq!(out.ids.len(), 12);
        assert!(!out.stopped_at_eos);
        assert!(decode(&m, &[1; 12], &cfg).is_err());
        assert!(decode(&m, &[], &cfg).is_err());
        assert!(decode(&m, &[25], &cfg).is_err());
    }

    #[test]
    fn greedy_is_deterministic_and_tiny_tau_is_greedy() {
        let m = model();
        let g = decode(
            &m,
            &[4, 5],
            &DecodeConfig {
                max_new_tokens: 6,
                ..Default::default()
            },
        )
        .unwrap();
        let t = DecodeConfig {
            max_new_tokens: 6,
            strategy: Strategy::Temperature { tau: 1e-9 },
            ..Default::default()
        };
        assert_eq!(decode(&m, &[4, 5], &t).unwrap(), g);
        let s = DecodeConfig {
            max_new_tokens: 6,
            strategy: Strategy::Temperature { tau: 1.0 },
            seed: 9,
            ..Default::default()
        };
        assert_eq!(decode(&m, &[4, 5], &s).unwrap(), decode(&m, &[4, 5], &s).unwrap());
    }
}
