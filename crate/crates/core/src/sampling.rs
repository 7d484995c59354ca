//! Next-token selection: greedy argmax or nucleus temperature sampling.
//!
//! Randomness comes from a counter-based hash of `(engine seed, call seed,
//! step)` rather than a stateful generator, so a message draws the same
//! numbers whether it is decoded alone or alongside others.

use serde::{Deserialize, Serialize};

use crate::error::{ChoreoError, Result};
use crate::tokenizer::{is_sampleable, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    #[default]
    Greedy,
    Temperature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub mode: SamplingMode,
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
    /// Maximum number of generated tokens after the header.
    pub max_tokens: usize,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            mode: SamplingMode::Greedy,
            temperature: 0.7,
            top_p: 1.0,
            seed: 0,
            max_tokens: 32,
        }
    }
}

impl SamplingParams {
    pub fn greedy(max_tokens: usize) -> Self {
        Self {
            max_tokens,
            ..Self::default()
        }
    }

    pub fn temperature(temperature: f64, top_p: f64, seed: u64, max_tokens: usize) -> Self {
        Self {
            mode: SamplingMode::Temperature,
            temperature,
            top_p,
            seed,
            max_tokens,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == SamplingMode::Temperature {
            if !(self.temperature > 0.0 && self.temperature.is_finite()) {
                return Err(ChoreoError::InvalidSampling(format!(
                    "temperature must be positive, got {}",
                    self.temperature
                )));
            }
            if !(self.top_p > 0.0 && self.top_p <= 1.0) {
                return Err(ChoreoError::InvalidSampling(format!(
                    "top_p must be in (0, 1], got {}",
                    self.top_p
                )));
            }
        }
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform draw in `[0, 1)` for one sampling step.
pub fn uniform(engine_seed: u64, call_seed: u64, step: usize) -> f64 {
    let h = splitmix64(splitmix64(splitmix64(engine_seed) ^ call_seed) ^ step as u64);
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Highest-scoring sampleable id; ties go to the lowest id.
pub fn argmax(logits: &[f64]) -> TokenId {
    let mut best: Option<(usize, f64)> = None;
    for (i, &l) in logits.iter().enumerate() {
        if !is_sampleable(i as TokenId) {
            continue;
        }
        if best.is_none_or(|(_, b)| l > b) {
            best = Some((i, l));
        }
    }
    best.map(|(i, _)| i as TokenId).unwrap_or(0)
}

pub fn sample(logits: &[f64], params: &SamplingParams, engine_seed: u64, step: usize) -> TokenId {
    match params.mode {
        SamplingMode::Greedy => argmax(logits),
        SamplingMode::Temperature => {
            let mut cands: Vec<(TokenId, f64)> = logits
                .iter()
                .enumerate()
                .filter(|(i, _)| is_sampleable(*i as TokenId))
                .map(|(i, l)| (i as TokenId, l / params.temperature))
                .collect();
            let max = cands.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for c in &mut cands {
                c.1 = (c.1 - max).exp();
                total += c.1;
            }
            for c in &mut cands {
                c.1 /= total;
            }
            cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut keep = 0;
            let mut mass = 0.0;
            for c in &cands {
                keep += 1;
                mass += c.1;
                if mass >= params.top_p {
                    break;
                }
            }
            cands.truncate(keep);
            let u = uniform(engine_seed, params.seed, step) * mass;
            let mut acc = 0.0;
            for c in &cands {
                acc += c.1;
                if u < acc {
                    return c.0;
                }
            }
            cands.last().map(|c| c.0).unwrap_or(0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{BOS_MSG, EOS_MSG};

    #[test]
    fn argmax_skips_reserved_and_breaks_ties_low() {
        let mut l = vec![0.0; 300];
        l[BOS_MSG as usize] = 9.0;
        l[290] = 9.0;
        l[7] = 3.0;
        l[5] = 3.0;
        assert_eq!(argmax(&l), 5);
        l[EOS_MSG as usize] = 4.0;
        assert_eq!(argmax(&l), EOS_MSG);
    }

    #[test]
    fn temperature_is_seeded() {
        let l: Vec<f64> = (0..260).map(|i| ((i * 37) % 11) as f64 * 0.3).collect();
        let p = SamplingParams::temperature(0.7, 0.9, 11, 8);
        let a: Vec<_> = (0..20).map(|s| sample(&l, &p, 3, s)).collect();
        let b: Vec<_> = (0..20).map(|s| sample(&l, &p, 3, s)).collect();
        assert_eq!(a, b);
        let q = SamplingParams { seed: 12, ..p.clone() };
        let c: Vec<_> = (0..20).map(|s| sample(&l, &q, 3, s)).collect();
        assert_ne!(a, c);
        assert!(a.iter().all(|t| is_sampleable(*t)));
    }

    #[test]
    fn tiny_top_p_is_greedy() {
        let l: Vec<f64> = (0..260).map(|i| (i % 17) as f64).collect();
        let p = SamplingParams::temperature(1.0, 1e-9, 0, 1);
        for s in 0..10 {
            assert_eq!(sample(&l, &p, 0, s), argmax(&l));
        }
    }

    #[test]
    fn uniform_range() {
        for s in 0..1000 {
            let u = uniform(1, 2, s);
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn invalid_params() {
        assert!(SamplingParams::temperature(0.0, 0.5, 0, 1).validate().is_err());
        assert!(SamplingParams::temperature(1.0, 1.5, 0, 1).validate().is_err());
        assert!(SamplingParams::greedy(4).validate().is_ok());
    }
}
