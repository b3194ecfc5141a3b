//! Prompt-conditioned editing of an encoded source.
//!
//! * [`edit_varin`]: invert the source under the source condition, then
//!   resample scales `s..=K` under the target condition with
//!   `q = p + (1 - lambda) g + lambda n`.
//! * [`edit_varin_target_only`]: same, but the inversion also uses the
//!   target condition.
//! * [`edit_regeneration`]: keep scales `< s`, sample the rest afresh.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{FeatureGrid, TokenMap, TokenPyramid};
use crate::error::{Error, Result};
use crate::gumbel::{argmax, gumbel_standard};
use crate::inversion::{varin_invert, InverseNoiseSet, InversionKind};
use crate::metrics::token_agreement;
use crate::predictor::{Execution, Predictor};
use crate::rng::{Purpose, RngKey};

/// Reference start scale and hierarchy depth the defaults are tuned for.
pub const REFERENCE_START: usize = 6;
pub const REFERENCE_SCALES: usize = 14;

/// Maps the reference start scale proportionally onto a `scales`-deep pyramid.
pub fn default_start_scale(scales: usize) -> usize {
    ((REFERENCE_START as f64 / REFERENCE_SCALES as f64 * scales as f64).round() as usize).clamp(1, scales.max(1))
}

/// Reference margins for source-conditioned and target-only inversion.
pub const REFERENCE_TAU: f64 = 18.0;
pub const REFERENCE_TARGET_TAU: f64 = 12.0;

/// Ratio between margins on the default toy predictor and the reference
/// margins. Toy logits span about a quarter of the reference range.
pub const TOY_TAU_SCALE: f64 = 0.25;

pub fn default_tau() -> f64 {
    REFERENCE_TAU * TOY_TAU_SCALE
}

pub fn default_target_tau() -> f64 {
    REFERENCE_TARGET_TAU * TOY_TAU_SCALE
}

/// Serialized as `"linear"` or as the constant value.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "LambdaRepr", into = "LambdaRepr")]
pub enum LambdaKind {
    /// 1 at the start scale, falling linearly to 0 at the last scale.
    #[default]
    Linear,
    Constant(f64),
}

impl fmt::Display for LambdaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaKind::Linear => f.write_str("linear"),
            LambdaKind::Constant(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for LambdaKind {
    type Err = Error;

    /// `"linear"` or a number in `[0, 1]`.
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("linear") {
            return Ok(LambdaKind::Linear);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| Error::input(format!("lambda must be \"linear\" or a number, got {s:?}")))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::input(format!("constant lambda must lie in [0, 1], got {v}")));
        }
        Ok(LambdaKind::Constant(v))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LambdaRepr {
    Value(f64),
    Name(String),
}

impl TryFrom<LambdaRepr> for LambdaKind {
    type Error = Error;

    fn try_from(repr: LambdaRepr) -> Result<Self> {
        match repr {
            LambdaRepr::Value(v) => v.to_string().parse(),
            LambdaRepr::Name(s) => s.parse(),
        }
    }
}

impl From<LambdaKind> for LambdaRepr {
    fn from(kind: LambdaKind) -> Self {
        match kind {
            LambdaKind::Linear => LambdaRepr::Name("linear".into()),
            LambdaKind::Constant(v) => LambdaRepr::Value(v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaSchedule {
    pub start: usize,
    pub end: usize,
    pub kind: LambdaKind,
}

impl LambdaSchedule {
    pub fn new(start: usize, end: usize, kind: LambdaKind) -> Result<Self> {
        if start == 0 || start > end {
            return Err(Error::input(format!("lambda schedule needs 1 <= s <= K, got s={start}, K={end}")));
        }
        if let LambdaKind::Constant(v) = kind {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::input(format!("constant lambda must lie in [0, 1], got {v}")));
            }
        }
        Ok(LambdaSchedule { start, end, kind })
    }

    pub fn lambda_at(&self, k: usize) -> Result<f64> {
        if k < self.start || k > self.end {
            return Err(Error::input(format!(
                "scale {k} outside the edited range {}..={}",
                self.start, self.end
            )));
        }
        Ok(match self.kind {
            LambdaKind::Constant(v) => v,
            LambdaKind::Linear if self.end == self.start => 1.0,
            LambdaKind::Linear => {
                let frac = (k - self.start) as f64 / (self.end - self.start) as f64;
                (1.0 - frac).clamp(0.0, 1.0)
            }
        })
    }
}

/// Which tokens condition the target-side prediction of scale `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextMode {
    /// Source scales below `s`, then the edited scales `s..t`.
    #[default]
    GeneratedPrefix,
    /// Source scales `1..t` throughout.
    SourcePrefix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditConfig {
    pub source_label: String,
    pub target_label: String,
    pub start_scale: usize,
    pub tau: f64,
    #[serde(default)]
    pub lambda: LambdaKind,
    pub seed: u64,
    #[serde(default)]
    pub context: ContextMode,
    #[serde(default)]
    pub kind: InversionKind,
}

impl EditConfig {
    pub fn validate(&self, scales: usize) -> Result<()> {
        if self.start_scale == 0 || self.start_scale > scales {
            return Err(Error::input(format!("start scale {} outside 1..={scales}", self.start_scale)));
        }
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return Err(Error::input(format!("tau must be non-negative, got {}", self.tau)));
        }
        LambdaSchedule::new(self.start_scale, scales, self.lambda).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditResult {
    pub pyramid: TokenPyramid,
    pub grid: FeatureGrid,
    /// Lambda used at each scale; `None` for copied scales (and for
    /// regeneration, which uses no inverse noise).
    pub lambdas: Vec<Option<f64>>,
    /// Fraction of tokens differing from the source, per scale.
    pub change_fraction: Vec<f64>,
}

impl EditResult {
    fn assemble(predictor: &Predictor, source: &TokenPyramid, pyramid: TokenPyramid, lambdas: Vec<Option<f64>>) -> Result<Self> {
        let grid = predictor.codec().decode(&pyramid)?;
        let change_fraction = token_agreement(source, &pyramid)?.per_scale.iter().map(|a| 1.0 - a).collect();
        Ok(EditResult {
            pyramid,
            grid,
            lambdas,
            change_fraction,
        })
    }

    /// Fraction of all tokens that differ from the source.
    pub fn overall_change(&self) -> f64 {
        let total: usize = self.pyramid.maps.iter().map(TokenMap::len).sum();
        let changed: f64 = self
            .pyramid
            .maps
            .iter()
            .zip(&self.change_fraction)
            .map(|(m, f)| f * m.len() as f64)
            .sum();
        changed / total as f64
    }
}

fn fresh_noise_key(seed: u64, k: usize, y: usize, x: usize) -> RngKey {
    RngKey::new(seed, Purpose::EDIT_NOISE).at(k as u32, y as u32, x as u32)
}

/// Resamples scales `s..=K` of `source` under the target condition, mixing
/// fresh Gumbel noise with `noise` according to the lambda schedule.
pub fn edit_with_noise(
    predictor: &Predictor,
    source: &TokenPyramid,
    noise: &InverseNoiseSet,
    config: &EditConfig,
) -> Result<EditResult> {
    let codec = predictor.codec();
    let scales = codec.scales();
    config.validate(scales)?;
    source.validate(&codec.schedule, codec.vocab())?;
    if noise.maps.len() != scales {
        return Err(Error::input(format!("noise set has {} scales, expected {scales}", noise.maps.len())));
    }
    let schedule = LambdaSchedule::new(config.start_scale, scales, config.lambda)?;
    let target = predictor.condition(&config.target_label);
    let mut maps: Vec<TokenMap> = source.prefix(config.start_scale).to_vec();
    let mut lambdas = vec![None; config.start_scale - 1];
    for k in config.start_scale..=scales {
        let context = match config.context {
            ContextMode::GeneratedPrefix => &maps[..],
            ContextMode::SourcePrefix => source.prefix(k),
        };
        let p = predictor.next_scale_logits(context, &target, k)?;
        let n = &noise.maps[k - 1];
        if !p.same_shape(n) {
            return Err(Error::input(format!("noise map of scale {k} has the wrong shape")));
        }
        let lambda = schedule.lambda_at(k)?;
        let w = p.width();
        let tokens = Execution::Parallel.map_tokens(p.tokens(), |i| {
            let key = fresh_noise_key(config.seed, k, i / w, i % w);
            let q: Vec<f64> = p
                .row(i)
                .iter()
                .zip(n.row(i))
                .enumerate()
                .map(|(j, (&pj, &nj))| {
                    let g = gumbel_standard(key.with_channel(j as u32));
                    pj + (1.0 - lambda) * g + lambda * nj
                })
                .collect();
            argmax(&q).expect("classes > 0") as u16
        });
        maps.push(TokenMap::new(p.height(), w, tokens)?);
        lambdas.push(Some(lambda));
    }
    EditResult::assemble(predictor, source, TokenPyramid::new(maps), lambdas)
}

fn edit_inverted_under(predictor: &Predictor, src: &FeatureGrid, config: &EditConfig, inversion_label: &str) -> Result<EditResult> {
    config.validate(predictor.codec().scales())?;
    let source = predictor.codec().encode(src)?;
    let cond = predictor.condition(inversion_label);
    let noise = varin_invert(predictor, &source, &cond, config.kind, config.tau, config.seed, Execution::Parallel)?;
    edit_with_noise(predictor, &source, &noise, config)
}

/// Inversion under the source condition, editing under the target.
pub fn edit_varin(predictor: &Predictor, src: &FeatureGrid, config: &EditConfig) -> Result<EditResult> {
    edit_inverted_under(predictor, src, config, &config.source_label)
}

/// Inversion and editing both under the target condition.
pub fn edit_varin_target_only(predictor: &Predictor, src: &FeatureGrid, config: &EditConfig) -> Result<EditResult> {
    edit_inverted_under(predictor, src, config, &config.target_label)
}

/// Keeps scales `< start` of the encoded source and samples the rest under
/// `target_label`. `start = K + 1` regenerates nothing.
pub fn edit_regeneration(
    predictor: &Predictor,
    src: &FeatureGrid,
    target_label: &str,
    start: usize,
    seed: u64,
) -> Result<EditResult> {
    let scales = predictor.codec().scales();
    if start == 0 || start > scales + 1 {
        return Err(Error::input(format!("start scale {start} outside 1..={}", scales + 1)));
    }
    let source = predictor.codec().encode(src)?;
    let target = predictor.condition(target_label);
    let pyramid = predictor.sample_from(source.prefix(start), &target, seed, Purpose::EDIT_NOISE, Execution::Parallel)?;
    EditResult::assemble(predictor, &source, pyramid, vec![None; scales])
}
