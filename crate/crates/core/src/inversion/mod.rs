//! Pseudo-inverses of the Gumbel-max argmax and the per-scale inversion of
//! a whole token pyramid.
//!
//! Given predicted logits `p` and observed labels `r`, the inverse noise `n`
//! satisfies `argmax(p + n) = r` at every token. [`oai`] puts all mass on the
//! label; [`lai`] draws the perturbed logits around `p` with the label forced
//! to win by a margin of at least `tau`.

pub mod gaussian;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{TokenMap, TokenPyramid};
use crate::error::{Error, Result};
use crate::gumbel::{argmax, gumbel_from_uniform, gumbel_trunc_from_uniform};
use crate::logits::{ClassGrid, LogitsMap, NoiseMap, PerturbedLogits};
use crate::predictor::{Condition, Execution, Predictor};
use crate::rng::{uniform_open, Purpose, RngKey};

/// Finite stand-in for `log 0` in one-hot inversion.
pub const NEG_SENTINEL: f64 = -1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InversionKind {
    /// One-hot argmax inversion.
    Oai,
    /// Location-aware argmax inversion.
    #[default]
    Lai,
}

impl InversionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            InversionKind::Oai => "oai",
            InversionKind::Lai => "lai",
        }
    }
}

impl fmt::Display for InversionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InversionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "oai" => Ok(InversionKind::Oai),
            "lai" => Ok(InversionKind::Lai),
            other => Err(Error::input(format!("unknown inversion kind {other:?}"))),
        }
    }
}

/// Source of the uniforms consumed by [`lai_with`].
pub trait UniformSource: Sync {
    fn uniform(&self, key: RngKey) -> f64;
}

/// The crate's counter-based generator.
#[derive(Debug, Clone, Copy, Default)]
pub struct Keyed;

impl UniformSource for Keyed {
    fn uniform(&self, key: RngKey) -> f64 {
        uniform_open(key)
    }
}

impl<F: Fn(RngKey) -> f64 + Sync> UniformSource for F {
    fn uniform(&self, key: RngKey) -> f64 {
        self(key)
    }
}

/// Addresses LAI's draws for one scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DrawSite {
    pub seed: u64,
    pub scale: u32,
}

impl DrawSite {
    fn q_max(&self, y: usize, x: usize) -> RngKey {
        RngKey::new(self.seed, Purpose::Q_MAX).at(self.scale, y as u32, x as u32)
    }

    fn trunc(&self, y: usize, x: usize, class: usize) -> RngKey {
        RngKey::new(self.seed, Purpose::TRUNC)
            .at(self.scale, y as u32, x as u32)
            .with_channel(class as u32)
    }
}

fn check_labels(r: &TokenMap, p: &LogitsMap) -> Result<()> {
    if r.shape() != (p.height(), p.width()) {
        return Err(Error::input(format!(
            "token map {}x{} does not match logits {}x{}",
            r.height(),
            r.width(),
            p.height(),
            p.width()
        )));
    }
    if let Some(&t) = r.tokens().iter().find(|&&t| t as usize >= p.classes()) {
        return Err(Error::input(format!("token {t} outside {} classes", p.classes())));
    }
    Ok(())
}

/// One-hot argmax inversion: `q = 0` at the label, [`NEG_SENTINEL`] elsewhere.
pub fn oai(r: &TokenMap, p: &LogitsMap) -> Result<PerturbedLogits> {
    check_labels(r, p)?;
    let c = p.classes();
    let mut values = vec![NEG_SENTINEL; p.values().len()];
    for (i, &t) in r.tokens().iter().enumerate() {
        values[i * c + t as usize] = 0.0;
    }
    ClassGrid::new(p.height(), p.width(), c, values)
}

/// Largest threshold `t` with `top - t >= tau` in floating point.
fn margin_threshold(top: f64, tau: f64) -> f64 {
    let mut t = top - tau;
    while top - t < tau {
        t = t.next_down();
    }
    t
}

/// Location-aware argmax inversion of one token.
///
/// The label gets `Gumbel(p[label])`; every other class gets a Gumbel
/// located at its own logit and truncated to `q[label] - tau`. Classes
/// before the label are truncated strictly below, so lowest-index tie
/// breaking can never pick them.
fn lai_token(row: &[f64], label: usize, tau: f64, q_max_u: f64, trunc_u: impl Fn(usize) -> f64) -> Vec<f64> {
    let q_max = row[label] + gumbel_from_uniform(q_max_u);
    let threshold = margin_threshold(q_max, tau);
    let strict = if threshold < q_max { threshold } else { q_max.next_down() };
    row.iter()
        .enumerate()
        .map(|(j, &p)| match j.cmp(&label) {
            std::cmp::Ordering::Equal => q_max,
            std::cmp::Ordering::Less => gumbel_trunc_from_uniform(p, strict, trunc_u(j)),
            std::cmp::Ordering::Greater => gumbel_trunc_from_uniform(p, threshold, trunc_u(j)),
        })
        .collect()
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(Error::input(format!("tau must be a finite non-negative number, got {tau}")));
    }
    Ok(())
}

/// [`lai`] with an explicit uniform source, for pinned-draw checks.
pub fn lai_with<S: UniformSource>(
    r: &TokenMap,
    p: &LogitsMap,
    tau: f64,
    site: DrawSite,
    source: &S,
    exec: Execution,
) -> Result<PerturbedLogits> {
    check_tau(tau)?;
    check_labels(r, p)?;
    if !p.is_finite() {
        return Err(Error::input("logits must be finite"));
    }
    let w = p.width();
    let rows = exec.map_tokens(p.tokens(), |i| {
        let (y, x) = (i / w, i % w);
        lai_token(
            p.row(i),
            r.tokens()[i] as usize,
            tau,
            source.uniform(site.q_max(y, x)),
            |j| source.uniform(site.trunc(y, x, j)),
        )
    });
    ClassGrid::from_rows(p.height(), w, p.classes(), rows)
}

pub fn lai(r: &TokenMap, p: &LogitsMap, tau: f64, site: DrawSite, exec: Execution) -> Result<PerturbedLogits> {
    lai_with(r, p, tau, site, &Keyed, exec)
}

/// Label-minus-runner-up margin of every token.
pub fn margins(q: &PerturbedLogits, r: &TokenMap) -> Vec<f64> {
    q.rows()
        .zip(r.tokens())
        .map(|(row, &t)| {
            let label = row[t as usize];
            let runner_up = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != t as usize)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            label - runner_up
        })
        .collect()
}

/// `argmax(p + n)` per token.
pub fn argmax_tokens(p: &LogitsMap, n: &NoiseMap) -> Result<TokenMap> {
    if !p.same_shape(n) {
        return Err(Error::input("logits and noise shapes differ"));
    }
    let tokens = p
        .rows()
        .zip(n.rows())
        .map(|(pr, nr)| {
            let q: Vec<f64> = pr.iter().zip(nr).map(|(a, b)| a + b).collect();
            argmax(&q).expect("classes > 0") as u16
        })
        .collect();
    TokenMap::new(p.height(), p.width(), tokens)
}

/// `n = q - p`, then nudged by whole ulps where rounding in `p + n` would
/// otherwise shrink the label's lead below `tau` (or tie it at `tau = 0`).
fn noise_from(q: &PerturbedLogits, p: &LogitsMap, r: &TokenMap, tau: f64) -> Result<NoiseMap> {
    let mut n = q.sub(p)?.values().to_vec();
    let c = p.classes();
    for (i, &t) in r.tokens().iter().enumerate() {
        let t = t as usize;
        let prow = p.row(i);
        let nrow = &mut n[i * c..(i + 1) * c];
        let top = prow[t] + nrow[t];
        let threshold = margin_threshold(top, tau);
        for j in (0..c).filter(|&j| j != t) {
            let limit = if j < t && threshold >= top { top.next_down() } else { threshold };
            while prow[j] + nrow[j] > limit {
                nrow[j] = nrow[j].next_down();
            }
        }
    }
    ClassGrid::new(p.height(), p.width(), c, n)
}

/// Metadata carried with a noise set.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub label: String,
    pub tau: f64,
    pub seed: u64,
    pub kind: InversionKind,
}

impl Provenance {
    /// `tau = 0` leaves the label's lead arbitrarily thin.
    pub fn sensitive(&self) -> bool {
        self.tau == 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseNoiseSet {
    pub maps: Vec<NoiseMap>,
    pub provenance: Provenance,
}

/// Inverse noise of one scale together with what produced it.
#[derive(Debug, Clone)]
pub struct ScaleInversion {
    pub logits: LogitsMap,
    pub perturbed: PerturbedLogits,
    pub noise: NoiseMap,
}

/// Inverts scale `k` of `pyramid` under `cond`.
pub fn invert_scale(
    predictor: &Predictor,
    pyramid: &TokenPyramid,
    cond: &Condition,
    k: usize,
    kind: InversionKind,
    tau: f64,
    seed: u64,
    exec: Execution,
) -> Result<ScaleInversion> {
    let logits = predictor.next_scale_logits(pyramid.prefix(k), cond, k)?;
    let labels = pyramid.scale(k);
    let perturbed = match kind {
        InversionKind::Oai => oai(labels, &logits)?,
        InversionKind::Lai => lai(labels, &logits, tau, DrawSite { seed, scale: k as u32 }, exec)?,
    };
    let margin = if kind == InversionKind::Lai { tau } else { 0.0 };
    let noise = noise_from(&perturbed, &logits, labels, margin)?;
    if argmax_tokens(&logits, &noise)? != *labels {
        return Err(Error::Invariant(format!("scale {k} inverse noise does not reproduce its labels")));
    }
    Ok(ScaleInversion {
        logits,
        perturbed,
        noise,
    })
}

/// Parallel autoregressive inversion: the logits of every scale come from
/// the known source tokens, so scales are independent given the pyramid.
pub fn varin_invert(
    predictor: &Predictor,
    pyramid: &TokenPyramid,
    cond: &Condition,
    kind: InversionKind,
    tau: f64,
    seed: u64,
    exec: Execution,
) -> Result<InverseNoiseSet> {
    check_tau(tau)?;
    let codec = predictor.codec();
    pyramid.validate(&codec.schedule, codec.vocab())?;
    let maps = (1..=pyramid.len())
        .map(|k| Ok(invert_scale(predictor, pyramid, cond, k, kind, tau, seed, exec)?.noise))
        .collect::<Result<Vec<_>>>()?;
    Ok(InverseNoiseSet {
        maps,
        provenance: Provenance {
            label: cond.label.clone(),
            tau,
            seed,
            kind,
        },
    })
}

/// Replays `argmax(p_t + n_t)` scale by scale, feeding each reconstructed
/// scale into the next prediction.
pub fn reconstruct(predictor: &Predictor, noise: &InverseNoiseSet, cond: &Condition) -> Result<TokenPyramid> {
    let codec = predictor.codec();
    if noise.maps.len() != codec.scales() {
        return Err(Error::input("noise set does not match the schedule"));
    }
    let mut maps: Vec<TokenMap> = Vec::with_capacity(codec.scales());
    for (i, n) in noise.maps.iter().enumerate() {
        let p = predictor.next_scale_logits(&maps, cond, i + 1)?;
        maps.push(argmax_tokens(&p, n)?);
    }
    Ok(TokenPyramid::new(maps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{Codebook, Codec, ScaleSchedule};
    use crate::predictor::PredictorParams;
    use proptest::prelude::*;

    const E_INV: f64 = 0.367_879_441_171_442_33;

    fn predictor() -> Predictor {
        let codec = Codec::new(Codebook::seeded(4, 64, 1).unwrap(), ScaleSchedule::dyadic(4).unwrap());
        Predictor::new(PredictorParams::default(), codec).unwrap()
    }

    #[test]
    fn oai_definition() {
        let p = ClassGrid::new(1, 1, 3, vec![0.3, -1.0, 2.0]).unwrap();
        let q = oai(&TokenMap::filled(1, 1, 0), &p).unwrap();
        assert_eq!(q.values(), &[0.0, -1e4, -1e4]);
        assert!(oai(&TokenMap::filled(1, 2, 0), &p).is_err());
    }

    #[test]
    fn lai_pinned_draws() {
        let p = ClassGrid::new(1, 1, 2, vec![0.0, 0.0]).unwrap();
        let q = lai_with(
            &TokenMap::filled(1, 1, 0),
            &p,
            1.0,
            DrawSite { seed: 0, scale: 1 },
            &|_: RngKey| E_INV,
            Execution::Serial,
        )
        .unwrap();
        assert!(q.values()[0].abs() < 1e-15);
        assert!((q.values()[1] + (std::f64::consts::E + 1.0).ln()).abs() < 1e-12);
        assert!((q.values()[1] + 1.313_261_687_518_222_8).abs() < 1e-12);
    }

    #[test]
    fn lai_rejects_negative_tau() {
        let p = ClassGrid::new(1, 1, 2, vec![0.0, 0.0]).unwrap();
        let site = DrawSite { seed: 0, scale: 1 };
        assert!(lai(&TokenMap::filled(1, 1, 0), &p, -0.5, site, Execution::Serial).is_err());
        assert!(lai(&TokenMap::filled(1, 1, 0), &p, f64::NAN, site, Execution::Serial).is_err());
    }

    #[test]
    fn zero_tau_ties_resolve_to_label() {
        // a label behind many equal logits: truncation must stay strictly below
        let p = ClassGrid::new(1, 1, 4, vec![50.0, 50.0, 50.0, -50.0]).unwrap();
        let r = TokenMap::filled(1, 1, 3);
        for seed in 0..200 {
            let q = lai(&r, &p, 0.0, DrawSite { seed, scale: 1 }, Execution::Serial).unwrap();
            assert_eq!(argmax(q.row(0)), Some(3));
            let n = noise_from(&q, &p, &r, 0.0).unwrap();
            assert_eq!(argmax_tokens(&p, &n).unwrap(), r);
        }
    }

    #[test]
    fn reconstruction_and_parallel_determinism() {
        let pred = predictor();
        let cond = pred.condition("src");
        let pyr = pred.generate(&pred.condition("other"), 5, None).unwrap();
        for kind in [InversionKind::Lai, InversionKind::Oai] {
            let par = varin_invert(&pred, &pyr, &cond, kind, 2.0, 11, Execution::Parallel).unwrap();
            let ser = varin_invert(&pred, &pyr, &cond, kind, 2.0, 11, Execution::Serial).unwrap();
            for (a, b) in par.maps.iter().zip(&ser.maps) {
                assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            assert_eq!(reconstruct(&pred, &par, &cond).unwrap(), pyr);
        }
    }

    #[test]
    fn sensitive_regime_flag() {
        let pred = predictor();
        let cond = pred.condition("src");
        let pyr = pred.generate(&cond, 1, None).unwrap();
        let set = varin_invert(&pred, &pyr, &cond, InversionKind::Lai, 0.0, 1, Execution::Parallel).unwrap();
        assert!(set.provenance.sensitive());
        assert!(varin_invert(&pred, &pyr, &cond, InversionKind::Lai, -1.0, 1, Execution::Parallel).is_err());
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("LAI".parse::<InversionKind>().unwrap(), InversionKind::Lai);
        assert!("xai".parse::<InversionKind>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn lai_forces_label_with_margin(
            logits in proptest::collection::vec(-40.0f64..40.0, 2..12),
            label_frac in 0.0f64..1.0,
            tau in prop_oneof![Just(0.0), 0.0f64..25.0],
            seed: u64,
        ) {
            let c = logits.len();
            let label = ((label_frac * c as f64) as usize).min(c - 1);
            let p = ClassGrid::new(1, 1, c, logits).unwrap();
            let r = TokenMap::filled(1, 1, label as u16);
            let q = lai(&r, &p, tau, DrawSite { seed, scale: 1 }, Execution::Serial).unwrap();
            prop_assert_eq!(argmax(q.row(0)), Some(label));
            prop_assert!(margins(&q, &r)[0] >= tau);
            let n = noise_from(&q, &p, &r, tau).unwrap();
            prop_assert_eq!(argmax_tokens(&p, &n).unwrap(), r);
        }
    }
}
