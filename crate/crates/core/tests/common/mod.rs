//! Test-only reference transformer and helpers.
//!
//! `naive_forward` recomputes every hidden state from scratch for a whole
//! token sequence with explicit positions and a visibility predicate;
//! `naive_forward_weighted` generalizes visibility to per-(query, key)
//! attention multiplicities. It shares only the weights with the
//! engine: rotary angles come straight from the formula, attention is a
//! plain exp/sum, and nothing is cached.

#![allow(dead_code)]

use std::sync::Arc;

use choreo::model::WeightSet;
use choreo::tokenizer::TokenId;
use choreo::{Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct NaiveToken {
    pub token: TokenId,
    pub position: usize,
}

impl NaiveToken {
    pub fn at(token: TokenId, position: usize) -> Self {
        Self { token, position }
    }
}

fn matvec(rows: usize, cols: usize, data: &[f64], x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| (0..cols).map(|c| data[r * cols + c] * x[c]).sum())
        .collect()
}

fn norm(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = 1.0 / (ms + eps).sqrt();
    x.iter().zip(g).map(|(v, g)| v * s * g).collect()
}

fn rope(v: &mut [f64], pos: usize, base: f64) {
    let d = v.len();
    for i in 0..d / 2 {
        let a = pos as f64 * base.powf(-(2.0 * i as f64) / d as f64);
        let (x, y) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = x * a.cos() - y * a.sin();
        v[2 * i + 1] = x * a.sin() + y * a.cos();
    }
}

/// Logits for every token of `seq`; token `i` attends to token `k` iff
/// `visible(i, k)`.
pub fn naive_forward(
    w: &WeightSet<f64>,
    seq: &[NaiveToken],
    visible: &dyn Fn(usize, usize) -> bool,
) -> Vec<Vec<f64>> {
    naive_forward_weighted(w, seq, &|i, k| if visible(i, k) { 1.0 } else { 0.0 })
}

/// Token `i` sees `weight(i, k)` copies of token `k`; zero hides it.
pub fn naive_forward_weighted(
    w: &WeightSet<f64>,
    seq: &[NaiveToken],
    weight: &dyn Fn(usize, usize) -> f64,
) -> Vec<Vec<f64>> {
    let cfg = &w.config;
    let dm = cfg.model_dim();
    let hd = cfg.head_dim;
    let n = seq.len();
    let mut h: Vec<Vec<f64>> = seq
        .iter()
        .map(|t| w.embedding.row(t.token as usize).to_vec())
        .collect();
    for layer in &w.layers {
        let mut q = Vec::new();
        let mut k = Vec::new();
        let mut v = Vec::new();
        for (i, t) in seq.iter().enumerate() {
            let x = norm(&h[i], &layer.attn_norm, cfg.norm_eps);
            let mut qi = matvec(dm, dm, layer.wq.data(), &x);
            let mut ki = matvec(dm, dm, layer.wk.data(), &x);
            for hh in 0..cfg.n_heads {
                rope(&mut qi[hh * hd..(hh + 1) * hd], t.position, cfg.rope_base);
                rope(&mut ki[hh * hd..(hh + 1) * hd], t.position, cfg.rope_base);
            }
            q.push(qi);
            k.push(ki);
            v.push(matvec(dm, dm, layer.wv.data(), &x));
        }
        let mut next = h.clone();
        for i in 0..n {
            let mut attn = vec![0.0; dm];
            for hh in 0..cfg.n_heads {
                let r = hh * hd..(hh + 1) * hd;
                let cols: Vec<usize> = (0..n).filter(|&c| weight(i, c) > 0.0).collect();
                let scores: Vec<f64> = cols
                    .iter()
                    .map(|&c| {
                        q[i][r.clone()].iter().zip(&k[c][r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = cols
                    .iter()
                    .zip(&scores)
                    .map(|(&c, s)| weight(i, c) * (s - m).exp())
                    .collect();
                let z: f64 = e.iter().sum();
                for (&c, p) in cols.iter().zip(&e) {
                    for (o, vv) in attn[r.clone()].iter_mut().zip(&v[c][r.clone()]) {
                        *o += p / z * vv;
                    }
                }
            }
            let o = matvec(dm, dm, layer.wo.data(), &attn);
            let mut x1: Vec<f64> = h[i].iter().zip(&o).map(|(a, b)| a + b).collect();
            let xn = norm(&x1, &layer.ffn_norm, cfg.norm_eps);
            let f = cfg.ffn_dim;
            let g = matvec(f, dm, layer.w_gate.data(), &xn);
            let u = matvec(f, dm, layer.w_up.data(), &xn);
            let a: Vec<f64> = g.iter().zip(&u).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
            let d = matvec(dm, f, layer.w_down.data(), &a);
            for (x, y) in x1.iter_mut().zip(&d) {
                *x += y;
            }
            next[i] = x1;
        }
        h = next;
    }
    h.iter()
        .map(|x| {
            let xn = norm(x, &w.final_norm, cfg.norm_eps);
            matvec(cfg.vocab_size, dm, w.lm_head.data(), &xn)
        })
        .collect()
}

/// Causal attention over `tokens` at positions `0..`.
pub fn naive_causal(w: &WeightSet<f64>, tokens: &[TokenId]) -> Vec<Vec<f64>> {
    let seq: Vec<NaiveToken> = tokens.iter().enumerate().map(|(i, t)| NaiveToken::at(*t, i)).collect();
    naive_forward(w, &seq, &|i, k| k <= i)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_abs_diff_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| max_abs_diff(x, y)).fold(0.0, f64::max)
}

pub fn model64(cfg: &ModelConfig) -> Arc<Model<f64>> {
    Arc::new(Model::from_config(cfg).unwrap())
}

/// A small config that keeps naive recomputation cheap.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        head_dim: 8,
        ffn_dim: 32,
        vocab_size: 260,
        context_window: 512,
        ..ModelConfig::default()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Lowercase ASCII text of a length in `lo..=hi`.
pub fn random_text(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> String {
    let n = rng.random_range(lo..=hi);
    (0..n)
        .map(|_| {
            if rng.random_bool(0.2) {
                ' '
            } else {
                rng.random_range(b'a'..=b'z') as char
            }
        })
        .collect()
}
