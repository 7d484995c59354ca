//! Analytic FLOP model, per-call cost records and baseline-vs-choreographed
//! ratio reports.
//!
//! A forward step over one token at visible context length `c` costs, in
//! multiply-accumulates,
//!
//! ```text
//! L · (4·D² + 3·D·F)      Q/K/V/O projections and gated FFN
//! L · 2·D · c             scores and weighted values over all heads
//! D · V                   output head, only when logits are requested
//! ```
//!
//! with `D = h·d`. FLOPs are twice the MAC count. Norms, softmax and RoPE on
//! new tokens are lower order and not counted. Repositioning a cached token
//! costs `3·d` FLOPs per head per layer (2×2 rotation per frequency pair).

use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::Op;
use crate::model::ModelConfig;

pub fn token_macs(cfg: &ModelConfig, context: usize, logits: bool) -> u64 {
    let l = cfg.n_layers as u64;
    let d = cfg.model_dim() as u64;
    let f = cfg.ffn_dim as u64;
    let mut macs = l * (4 * d * d + 3 * d * f) + l * 2 * d * context as u64;
    if logits {
        macs += d * cfg.vocab_size as u64;
    }
    macs
}

/// FLOPs of one forward step, given each new token's visible context length.
pub fn count_flops(cfg: &ModelConfig, context_lens: &[usize], n_logits: usize) -> u64 {
    let base: u64 = context_lens.iter().map(|c| token_macs(cfg, *c, false)).sum();
    2 * (base + n_logits as u64 * cfg.model_dim() as u64 * cfg.vocab_size as u64)
}

pub fn reposition_flops(cfg: &ModelConfig, tokens: usize) -> u64 {
    3 * (cfg.n_layers * cfg.model_dim() * tokens) as u64
}

/// Cost of one engine call.
///
/// `prefill_flops` covers every token encoded before the first sampled
/// token: prefilled messages, decode headers and, for the baseline, parent
/// re-encoding. `decode_flops` covers generated tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallCost {
    pub op: Op,
    pub prefill_flops: u64,
    pub reposition_flops: u64,
    pub decode_flops: u64,
    pub prefill_tokens: usize,
    pub decode_tokens: usize,
    pub cache_hit_tokens: usize,
    #[serde(with = "opt_secs")]
    pub ttft: Option<Duration>,
    #[serde(with = "secs")]
    pub wall: Duration,
}

impl CallCost {
    pub fn new(op: Op) -> Self {
        Self {
            op,
            prefill_flops: 0,
            reposition_flops: 0,
            decode_flops: 0,
            prefill_tokens: 0,
            decode_tokens: 0,
            cache_hit_tokens: 0,
            ttft: None,
            wall: Duration::ZERO,
        }
    }

    /// FLOPs spent before the first generated token: prefill plus repositioning.
    pub fn first_token_flops(&self) -> u64 {
        self.prefill_flops + self.reposition_flops
    }

    pub fn is_decode(&self) -> bool {
        matches!(self.op, Op::Decode | Op::DecodeParallel)
    }
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs_f64(f64::deserialize(d)?.max(0.0)))
    }
}

mod opt_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Option<Duration>, s: S) -> Result<S::Ok, S::Error> {
        match d {
            Some(d) => s.serialize_some(&d.as_secs_f64()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Duration>, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.map(|v| Duration::from_secs_f64(v.max(0.0))))
    }
}

/// Totals over one workflow run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTotals {
    pub prefill_flops: u64,
    pub reposition_flops: u64,
    pub decode_flops: u64,
    pub cache_hit_tokens: usize,
    pub decode_steps: usize,
    /// Mean first-token FLOPs over decode calls: the FLOP analogue of
    /// average time-to-first-token.
    pub mean_first_token_flops: f64,
    pub mean_ttft_secs: f64,
    pub wall_secs: f64,
}

impl RunTotals {
    pub fn from_log(log: &[CallCost]) -> Self {
        let mut t = Self::default();
        let mut ftf = 0u64;
        let mut ttft = 0.0;
        for c in log {
            t.prefill_flops += c.prefill_flops;
            t.reposition_flops += c.reposition_flops;
            t.decode_flops += c.decode_flops;
            t.cache_hit_tokens += c.cache_hit_tokens;
            t.wall_secs += c.wall.as_secs_f64();
            if c.is_decode() {
                t.decode_steps += 1;
                ftf += c.first_token_flops();
                ttft += c.ttft.map_or(0.0, |d| d.as_secs_f64());
            }
        }
        if t.decode_steps > 0 {
            t.mean_first_token_flops = ftf as f64 / t.decode_steps as f64;
            t.mean_ttft_secs = ttft / t.decode_steps as f64;
        }
        t
    }

    /// Prefill work including repositioning.
    pub fn total_prefill(&self) -> u64 {
        self.prefill_flops + self.reposition_flops
    }
}

/// Baseline ÷ choreographed ratios for one paired run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub prefill_flop_ratio: f64,
    pub first_token_flop_ratio: f64,
    pub ttft_ratio: f64,
    pub e2e_ratio: f64,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        if a == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        a / b
    }
}

pub fn ratios(baseline: &RunTotals, choreo: &RunTotals) -> Ratios {
    Ratios {
        prefill_flop_ratio: ratio(baseline.total_prefill() as f64, choreo.total_prefill() as f64),
        first_token_flop_ratio: ratio(
            baseline.mean_first_token_flops,
            choreo.mean_first_token_flops,
        ),
        ttft_ratio: ratio(baseline.mean_ttft_secs, choreo.mean_ttft_secs),
        e2e_ratio: ratio(baseline.wall_secs, choreo.wall_secs),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub estimate: f64,
    pub low: f64,
    pub high: f64,
}

/// Ratio of means with a seeded percentile bootstrap interval over instances.
pub fn bootstrap_ratio(num: &[f64], den: &[f64], resamples: usize, level: f64, seed: u64) -> Interval {
    assert_eq!(num.len(), den.len());
    let n = num.len();
    let mean_ratio = |idx: &mut dyn Iterator<Item = usize>| {
        let (mut a, mut b) = (0.0, 0.0);
        for i in idx {
            a += num[i];
            b += den[i];
        }
        ratio(a, b)
    };
    let estimate = mean_ratio(&mut (0..n));
    if n == 0 || resamples == 0 {
        return Interval {
            estimate,
            low: estimate,
            high: estimate,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            mean_ratio(&mut picks.into_iter())
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let at = |q: f64| stats[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Interval {
        estimate,
        low: at(alpha),
        high: at(1.0 - alpha),
    }
}

/// Paired runs of one workflow over many seeded instances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub workflow: String,
    pub instances: usize,
    pub baseline: Vec<RunTotals>,
    pub choreo: Vec<RunTotals>,
    pub prefill_flop_ratio: Interval,
    pub first_token_flop_ratio: Interval,
    pub ttft_ratio: Interval,
    pub e2e_ratio: Interval,
    /// Instances where choreographed prefill exceeded baseline prefill.
    pub prefill_violations: usize,
}

impl SuiteReport {
    pub fn new(workflow: &str, baseline: Vec<RunTotals>, choreo: Vec<RunTotals>, seed: u64) -> Self {
        let col = |v: &[RunTotals], f: &dyn Fn(&RunTotals) -> f64| v.iter().map(f).collect::<Vec<_>>();
        let ci = |f: &dyn Fn(&RunTotals) -> f64| {
            bootstrap_ratio(&col(&baseline, f), &col(&choreo, f), 1000, 0.95, seed)
        };
        let prefill_violations = baseline
            .iter()
            .zip(&choreo)
            .filter(|(b, c)| c.total_prefill() > b.total_prefill())
            .count();
        Self {
            workflow: workflow.to_string(),
            instances: baseline.len(),
            prefill_flop_ratio: ci(&|t| t.total_prefill() as f64),
            first_token_flop_ratio: ci(&|t| t.mean_first_token_flops),
            ttft_ratio: ci(&|t| t.mean_ttft_secs),
            e2e_ratio: ci(&|t| t.wall_secs),
            prefill_violations,
            baseline,
            choreo,
        }
    }

    pub fn render_row(&self) -> String {
        let f = |i: &Interval| format!("{:>7.2} ({:.2}, {:.2})", i.estimate, i.low, i.high);
        format!(
            "{:<10} {:>4}  {}  {}  {}  {}",
            self.workflow,
            self.instances,
            f(&self.prefill_flop_ratio),
            f(&self.first_token_flop_ratio),
            f(&self.ttft_ratio),
            f(&self.e2e_ratio)
        )
    }

    pub fn render_header() -> String {
        format!(
            "{:<10} {:>4}  {:<22}  {:<22}  {:<22}  {:<22}",
            "workflow", "n", "prefill FLOP ratio", "first-token FLOP ratio", "TTFT ratio", "E2E ratio"
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_tokens_zero_flops() {
        assert_eq!(count_flops(&ModelConfig::default(), &[], 0), 0);
    }

    #[test]
    fn context_only_moves_attention_term() {
        let cfg = ModelConfig::default();
        let a = token_macs(&cfg, 100, false);
        let b = token_macs(&cfg, 200, false);
        assert!(b > a);
        assert_eq!(b - a, (cfg.n_layers * 2 * cfg.model_dim() * 100) as u64);
    }

    #[test]
    fn self_ratios_are_one() {
        let t = RunTotals {
            prefill_flops: 10,
            reposition_flops: 2,
            decode_flops: 5,
            mean_first_token_flops: 3.0,
            mean_ttft_secs: 0.1,
            wall_secs: 1.0,
            ..RunTotals::default()
        };
        let r = ratios(&t, &t);
        assert_eq!(r.prefill_flop_ratio, 1.0);
        assert_eq!(r.first_token_flop_ratio, 1.0);
        assert_eq!(r.ttft_ratio, 1.0);
        assert_eq!(r.e2e_ratio, 1.0);
    }

    #[test]
    fn bootstrap_brackets_estimate() {
        let num: Vec<f64> = (0..30).map(|i| 10.0 + i as f64).collect();
        let den: Vec<f64> = (0..30).map(|i| 4.0 + (i % 5) as f64).collect();
        let ci = bootstrap_ratio(&num, &den, 500, 0.95, 1);
        assert!(ci.low <= ci.estimate && ci.estimate <= ci.high);
        assert_eq!(ci, bootstrap_ratio(&num, &den, 500, 0.95, 1));
    }
}
