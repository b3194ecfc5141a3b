//! Deterministic toy next-scale predictor.
//!
//! Scale `k` is predicted from the coarser scales and a condition vector.
//! The partial decode of the prefix is block-averaged to scale `k` and put
//! in residual form `box3x3(x) - x`, the correction a smoother image would
//! still need. Every cell then prefers codebook entries close to
//!
//! `prefix_gain * residual + cond_gain * cond_decay^(k-1) * W c`
//!
//! with logits `-beta * squared distance`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{downsample_blockmean, validate_maps, Codec, FeatureGrid, TokenMap, TokenPyramid};
use crate::error::{Error, Result};
use crate::gumbel::gumbel_argmax_sample;
use crate::logits::LogitsMap;
use crate::rng::{standard_normal, Purpose, RngKey};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorParams {
    pub model_seed: u64,
    /// Inverse temperature on squared distances.
    pub beta: f64,
    /// Weight of the condition vector.
    pub cond_gain: f64,
    /// Weight of the residual-form prefix context.
    pub prefix_gain: f64,
    /// Geometric decay of the condition weight from one scale to the next.
    pub cond_decay: f64,
}

impl Default for PredictorParams {
    fn default() -> Self {
        PredictorParams {
            model_seed: 0x5eed,
            beta: 4.0,
            cond_gain: 0.5,
            prefix_gain: 1.0,
            cond_decay: 0.5,
        }
    }
}

impl PredictorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !self.cond_gain.is_finite() || !self.prefix_gain.is_finite() || !self.cond_decay.is_finite() {
            return Err(Error::Config("predictor gains must be finite".into()));
        }
        Ok(())
    }
}

/// Text prompt stand-in: a unit vector derived from the label.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub label: String,
    pub embedding: Vec<f64>,
}

/// How a run executes token-independent work within one scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Serial,
    #[default]
    Parallel,
}

impl Execution {
    pub(crate) fn map_tokens<T: Send>(self, n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
        match self {
            Execution::Serial => (0..n).map(f).collect(),
            Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Predictor {
    params: PredictorParams,
    codec: Codec,
    /// Row-major `d x d` mixing map applied to condition embeddings.
    mixing: Vec<f64>,
}

impl Predictor {
    pub fn new(params: PredictorParams, codec: Codec) -> Result<Self> {
        params.validate()?;
        let d = codec.channels();
        let scale = 1.0 / (d as f64).sqrt();
        let mixing = (0..d * d)
            .map(|i| {
                let key = RngKey::new(params.model_seed, Purpose::MIXING).at(0, (i / d) as u32, (i % d) as u32);
                standard_normal(key) * scale
            })
            .collect();
        Ok(Predictor { params, codec, mixing })
    }

    pub fn params(&self) -> &PredictorParams {
        &self.params
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    pub fn condition(&self, label: &str) -> Condition {
        let d = self.codec.channels();
        let mut hasher = Sha256::new();
        hasher.update(self.params.model_seed.to_le_bytes());
        hasher.update(label.as_bytes());
        let digest = hasher.finalize();
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut v: Vec<f64> = (0..d)
            .map(|c| standard_normal(RngKey::new(seed, Purpose::CONDITION).with_channel(c as u32)))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        } else {
            v = vec![0.0; d];
            v[0] = 1.0;
        }
        Condition {
            label: label.to_owned(),
            embedding: v,
        }
    }

    fn condition_shift(&self, cond: &Condition, k: usize) -> Result<Vec<f64>> {
        let gain = self.params.cond_gain * self.params.cond_decay.powi(k as i32 - 1);
        let d = self.codec.channels();
        if cond.embedding.len() != d {
            return Err(Error::input(format!(
                "condition has dimension {}, model expects {d}",
                cond.embedding.len()
            )));
        }
        Ok((0..d)
            .map(|r| {
                let wc: f64 = (0..d).map(|c| self.mixing[r * d + c] * cond.embedding[c]).sum();
                gain * wc
            })
            .collect())
    }

    /// Logits `p_k` for scale `k` (1-based) given scales `1..k`.
    pub fn next_scale_logits(&self, prefix: &[TokenMap], cond: &Condition, k: usize) -> Result<LogitsMap> {
        let schedule = &self.codec.schedule;
        let Some((h, w)) = schedule.resolution(k) else {
            return Err(Error::input(format!("scale {k} outside 1..={}", schedule.len())));
        };
        if prefix.len() != k - 1 {
            return Err(Error::input(format!(
                "scale {k} needs {} prefix maps, got {}",
                k - 1,
                prefix.len()
            )));
        }
        validate_maps(prefix, schedule, self.codec.vocab())?;
        let shift = self.condition_shift(cond, k)?;
        let context = box_residual(&downsample_blockmean(&self.codec.decode_partial(prefix)?, (h, w))?)?;
        let (d, vocab) = (self.codec.channels(), self.codec.vocab());
        let mut values = Vec::with_capacity(h * w * vocab);
        let mut target = vec![0.0; d];
        for y in 0..h {
            for x in 0..w {
                for (c, t) in target.iter_mut().enumerate() {
                    *t = self.params.prefix_gain * context.get(c, y, x) + shift[c];
                }
                values.extend((0..vocab).map(|j| -self.params.beta * self.codec.codebook.squared_distance(j, &target)));
            }
        }
        LogitsMap::new(h, w, vocab, values)
    }

    /// Samples scales `start..=K` with Gumbel-max under `cond`, keeping
    /// `prefix` (which must hold exactly scales `1..start`).
    pub fn sample_from(
        &self,
        prefix: &[TokenMap],
        cond: &Condition,
        seed: u64,
        purpose: Purpose,
        exec: Execution,
    ) -> Result<TokenPyramid> {
        let schedule = &self.codec.schedule;
        validate_maps(prefix, schedule, self.codec.vocab())?;
        let mut maps = prefix.to_vec();
        for k in prefix.len() + 1..=schedule.len() {
            let logits = self.next_scale_logits(&maps, cond, k)?;
            let w = logits.width();
            let sampled = exec.map_tokens(logits.tokens(), |i| {
                let key = RngKey::new(seed, purpose).at(k as u32, (i / w) as u32, (i % w) as u32);
                gumbel_argmax_sample(logits.row(i), key).map(|t| t as u16)
            });
            let tokens = sampled.into_iter().collect::<Result<Vec<_>>>()?;
            maps.push(TokenMap::new(logits.height(), w, tokens)?);
        }
        Ok(TokenPyramid::new(maps))
    }

    /// Generates a pyramid. With `start = Some((source, s))` scales `1..s`
    /// are copied from `source` and scales `s..=K` are sampled.
    pub fn generate(&self, cond: &Condition, seed: u64, start: Option<(&TokenPyramid, usize)>) -> Result<TokenPyramid> {
        let prefix: &[TokenMap] = match start {
            None => &[],
            Some((source, s)) => {
                if s == 0 || s > self.codec.scales() + 1 {
                    return Err(Error::input(format!(
                        "start scale {s} outside 1..={}",
                        self.codec.scales() + 1
                    )));
                }
                if source.len() < s - 1 {
                    return Err(Error::input("prefix pyramid is shorter than the start scale"));
                }
                source.prefix(s)
            }
        };
        self.sample_from(prefix, cond, seed, Purpose::GENERATION, Execution::Parallel)
    }
}

/// `box3x3(grid) - grid` per channel, with edge clamping.
fn box_residual(grid: &FeatureGrid) -> Result<FeatureGrid> {
    let (c, h, w) = grid.shape();
    FeatureGrid::from_fn(c, h, w, |ch, y, x| {
        let mut sum = 0.0;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                sum += grid.get(ch, yy, xx);
            }
        }
        sum / 9.0 - grid.get(ch, y, x)
    })
}
