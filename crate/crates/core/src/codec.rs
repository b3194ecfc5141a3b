//! Toy multi-scale residual quantizer.
//!
//! A [`FeatureGrid`] is encoded coarse to fine: at each scale the current
//! residual is block-averaged down to that scale's resolution, every cell is
//! snapped to its nearest codebook vector, and the block-replicated codes are
//! subtracted from the residual. Decoding sums the replicated codes of all
//! scales.
//!
//! Block mean and block replication are adjoint orthogonal projections, and
//! the codebook always contains the zero vector, so the residual energy can
//! never grow from one scale to the next.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{standard_normal, uniform_open, Purpose, RngKey};

/// Resolutions `(h_k, w_k)` of the token maps, coarsest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(usize, usize)>", into = "Vec<(usize, usize)>")]
pub struct ScaleSchedule {
    resolutions: Vec<(usize, usize)>,
}

impl ScaleSchedule {
    pub fn new(resolutions: Vec<(usize, usize)>) -> Result<Self> {
        let Some(&(fh, fw)) = resolutions.last() else {
            return Err(Error::input("scale schedule is empty"));
        };
        for (k, &(h, w)) in resolutions.iter().enumerate() {
            if h == 0 || w == 0 {
                return Err(Error::input(format!("scale {} has a zero dimension", k + 1)));
            }
            if fh % h != 0 || fw % w != 0 {
                return Err(Error::input(format!(
                    "scale {} ({h}x{w}) does not divide the finest scale ({fh}x{fw})",
                    k + 1
                )));
            }
            if let Some(&(nh, nw)) = resolutions.get(k + 1) {
                if nh < h || nw < w {
                    return Err(Error::input(format!("scale {} is coarser than scale {}", k + 2, k + 1)));
                }
            }
        }
        Ok(ScaleSchedule { resolutions })
    }

    /// `(1,1), (2,2), ..., (2^(K-1), 2^(K-1))`.
    pub fn dyadic(scales: usize) -> Result<Self> {
        if scales == 0 || scales > 16 {
            return Err(Error::input(format!("dyadic schedule needs 1..=16 scales, got {scales}")));
        }
        Self::new((0..scales).map(|k| (1 << k, 1 << k)).collect())
    }

    pub fn len(&self) -> usize {
        self.resolutions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resolutions.is_empty()
    }

    pub fn resolutions(&self) -> &[(usize, usize)] {
        &self.resolutions
    }

    /// Resolution of scale `k`, 1-based.
    pub fn resolution(&self, k: usize) -> Option<(usize, usize)> {
        k.checked_sub(1).and_then(|i| self.resolutions.get(i).copied())
    }

    pub fn finest(&self) -> (usize, usize) {
        *self.resolutions.last().expect("validated non-empty")
    }
}

impl TryFrom<Vec<(usize, usize)>> for ScaleSchedule {
    type Error = Error;

    fn try_from(value: Vec<(usize, usize)>) -> Result<Self> {
        ScaleSchedule::new(value)
    }
}

impl From<ScaleSchedule> for Vec<(usize, usize)> {
    fn from(value: ScaleSchedule) -> Self {
        value.resolutions
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    dim: usize,
    vectors: Vec<f64>,
}

impl Codebook {
    /// Builds a codebook from row-major entries; entry 0 must be exactly zero.
    pub fn new(dim: usize, vectors: Vec<f64>) -> Result<Self> {
        if dim == 0 || vectors.len() % dim != 0 {
            return Err(Error::input("codebook data is not a whole number of vectors"));
        }
        let size = vectors.len() / dim;
        if size < 2 || size > u16::MAX as usize + 1 {
            return Err(Error::input(format!("codebook size must be in 2..=65536, got {size}")));
        }
        if vectors[..dim].iter().any(|&v| v != 0.0) {
            return Err(Error::input("codebook entry 0 must be the zero vector"));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("codebook entries must be finite"));
        }
        Ok(Codebook { dim, vectors })
    }

    /// Zero code followed by `size - 1` vectors drawn uniformly from the unit ball.
    pub fn seeded(dim: usize, size: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("codebook dimension must be positive"));
        }
        let mut vectors = vec![0.0; dim * size];
        for entry in 1..size {
            let key = RngKey::new(seed, Purpose::CODEBOOK).at(0, entry as u32, 0);
            let dir: Vec<f64> = (0..dim)
                .map(|c| standard_normal(key.with_channel(c as u32)))
                .collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let radius = uniform_open(key.with_channel(dim as u32)).powf(1.0 / dim as f64);
            for (c, v) in dir.iter().enumerate() {
                vectors[entry * dim + c] = v / norm * radius;
            }
        }
        Codebook::new(dim, vectors)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn entry(&self, index: usize) -> &[f64] {
        &self.vectors[index * self.dim..(index + 1) * self.dim]
    }

    pub fn squared_distance(&self, index: usize, v: &[f64]) -> f64 {
        self.entry(index)
            .iter()
            .zip(v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// Nearest entry by Euclidean distance, lowest index on ties.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for j in 0..self.len() {
            let d = self.squared_distance(j, v);
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        best
    }
}

/// Continuous `channels x height x width` grid, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::input("feature grid dimensions must be positive"));
        }
        if values.len() != channels * height * width {
            return Err(Error::input(format!(
                "feature grid {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("feature grid values must be finite"));
        }
        Ok(FeatureGrid {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureGrid {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    values.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, values)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    #[inline]
    fn get_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.values[(c * self.height + y) * self.width + x]
    }

    /// Channel vector at one cell.
    pub fn cell(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.get(c, y, x)).collect()
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Rounds every value to the nearest `f32`, the precision of grid files.
    pub fn round_to_f32(&self) -> FeatureGrid {
        FeatureGrid {
            values: self.values.iter().map(|&v| v as f32 as f64).collect(),
            ..self.clone()
        }
    }
}

fn check_divides(from: (usize, usize), to: (usize, usize)) -> Result<()> {
    let (big, small) = if from.0 >= to.0 { (from, to) } else { (to, from) };
    if small.0 == 0 || small.1 == 0 || big.0 % small.0 != 0 || big.1 % small.1 != 0 || big.1 < small.1 {
        return Err(Error::input(format!(
            "resolutions {}x{} and {}x{} are not block-compatible",
            from.0, from.1, to.0, to.1
        )));
    }
    Ok(())
}

/// Each coarse cell becomes the mean of the block it covers.
pub fn downsample_blockmean(grid: &FeatureGrid, target: (usize, usize)) -> Result<FeatureGrid> {
    let (h, w) = target;
    if h > grid.height || w > grid.width {
        return Err(Error::input("downsample target is finer than the grid"));
    }
    check_divides((grid.height, grid.width), target)?;
    let (bh, bw) = (grid.height / h, grid.width / w);
    let norm = (bh * bw) as f64;
    let mut out = FeatureGrid::zeros(grid.channels, h, w);
    for c in 0..grid.channels {
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                for dy in 0..bh {
                    for dx in 0..bw {
                        sum += grid.get(c, y * bh + dy, x * bw + dx);
                    }
                }
                *out.get_mut(c, y, x) = sum / norm;
            }
        }
    }
    Ok(out)
}

/// Each fine cell copies the coarse cell covering it.
pub fn upsample_replicate(grid: &FeatureGrid, target: (usize, usize)) -> Result<FeatureGrid> {
    let (h, w) = target;
    if h < grid.height || w < grid.width {
        return Err(Error::input("upsample target is coarser than the grid"));
    }
    check_divides((h, w), (grid.height, grid.width))?;
    let (bh, bw) = (h / grid.height, w / grid.width);
    FeatureGrid::from_fn(grid.channels, h, w, |c, y, x| grid.get(c, y / bh, x / bw))
}

/// `h x w` grid of codebook indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenMap {
    height: usize,
    width: usize,
    tokens: Vec<u16>,
}

impl TokenMap {
    pub fn new(height: usize, width: usize, tokens: Vec<u16>) -> Result<Self> {
        if tokens.len() != height * width {
            return Err(Error::input(format!(
                "token map {height}x{width} needs {} tokens, got {}",
                height * width,
                tokens.len()
            )));
        }
        Ok(TokenMap { height, width, tokens })
    }

    pub fn filled(height: usize, width: usize, token: u16) -> Self {
        TokenMap {
            height,
            width,
            tokens: vec![token; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    pub fn tokens_mut(&mut self) -> &mut [u16] {
        &mut self.tokens
    }

    pub fn get(&self, y: usize, x: usize) -> usize {
        self.tokens[y * self.width + x] as usize
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Token maps `r_1..r_K`, coarsest first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenPyramid {
    pub maps: Vec<TokenMap>,
}

impl TokenPyramid {
    pub fn new(maps: Vec<TokenMap>) -> Self {
        TokenPyramid { maps }
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Map of scale `k`, 1-based.
    pub fn scale(&self, k: usize) -> &TokenMap {
        &self.maps[k - 1]
    }

    /// Scales `1..k`, i.e. everything strictly coarser than `k`.
    pub fn prefix(&self, k: usize) -> &[TokenMap] {
        &self.maps[..k.saturating_sub(1).min(self.maps.len())]
    }

    pub fn token_count(&self) -> usize {
        self.maps.iter().map(TokenMap::len).sum()
    }

    /// Checks the shapes of the first `self.len()` scales of `schedule`
    /// and that every token indexes the codebook.
    pub fn validate_prefix(&self, schedule: &ScaleSchedule, codebook_size: usize) -> Result<()> {
        validate_maps(&self.maps, schedule, codebook_size)
    }

    pub fn validate(&self, schedule: &ScaleSchedule, codebook_size: usize) -> Result<()> {
        if self.maps.len() != schedule.len() {
            return Err(Error::input(format!(
                "pyramid has {} scales, schedule has {}",
                self.maps.len(),
                schedule.len()
            )));
        }
        self.validate_prefix(schedule, codebook_size)
    }
}

pub(crate) fn validate_maps(maps: &[TokenMap], schedule: &ScaleSchedule, codebook_size: usize) -> Result<()> {
    if maps.len() > schedule.len() {
        return Err(Error::input("more token maps than scales"));
    }
    for (k, (map, &res)) in maps.iter().zip(schedule.resolutions()).enumerate() {
        if map.shape() != res {
            return Err(Error::input(format!(
                "scale {} is {}x{}, schedule says {}x{}",
                k + 1,
                map.height,
                map.width,
                res.0,
                res.1
            )));
        }
        if let Some(&t) = map.tokens.iter().find(|&&t| t as usize >= codebook_size) {
            return Err(Error::input(format!("token {t} at scale {} is outside the codebook", k + 1)));
        }
    }
    Ok(())
}

/// Codebook plus schedule: everything needed to move between grids and pyramids.
#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    pub codebook: Codebook,
    pub schedule: ScaleSchedule,
}

/// Encoded pyramid together with the residual energy before scale 1 and
/// after each scale.
#[derive(Debug, Clone)]
pub struct EncodeTrace {
    pub pyramid: TokenPyramid,
    pub residual_energy: Vec<f64>,
}

impl Codec {
    pub fn new(codebook: Codebook, schedule: ScaleSchedule) -> Self {
        Codec { codebook, schedule }
    }

    pub fn channels(&self) -> usize {
        self.codebook.dim()
    }

    pub fn vocab(&self) -> usize {
        self.codebook.len()
    }

    pub fn scales(&self) -> usize {
        self.schedule.len()
    }

    fn check_grid(&self, grid: &FeatureGrid) -> Result<()> {
        let (fh, fw) = self.schedule.finest();
        if grid.shape() != (self.channels(), fh, fw) {
            return Err(Error::input(format!(
                "grid is {}x{}x{}, codec expects {}x{fh}x{fw}",
                grid.channels,
                grid.height,
                grid.width,
                self.channels()
            )));
        }
        Ok(())
    }

    /// Token map -> grid of code vectors at the map's own resolution.
    pub fn embed(&self, map: &TokenMap) -> Result<FeatureGrid> {
        if let Some(&t) = map.tokens.iter().find(|&&t| t as usize >= self.vocab()) {
            return Err(Error::input(format!("token {t} is outside the codebook")));
        }
        FeatureGrid::from_fn(self.channels(), map.height, map.width, |c, y, x| {
            self.codebook.entry(map.get(y, x))[c]
        })
    }

    pub fn quantize(&self, grid: &FeatureGrid) -> TokenMap {
        let tokens = (0..grid.height)
            .flat_map(|y| (0..grid.width).map(move |x| (y, x)))
            .map(|(y, x)| self.codebook.nearest(&grid.cell(y, x)) as u16)
            .collect();
        TokenMap {
            height: grid.height,
            width: grid.width,
            tokens,
        }
    }

    pub fn encode(&self, grid: &FeatureGrid) -> Result<TokenPyramid> {
        Ok(self.encode_traced(grid)?.pyramid)
    }

    pub fn encode_traced(&self, grid: &FeatureGrid) -> Result<EncodeTrace> {
        self.check_grid(grid)?;
        let finest = self.schedule.finest();
        let mut residual = grid.clone();
        let mut energy = vec![residual.energy()];
        let mut maps = Vec::with_capacity(self.scales());
        for &res in self.schedule.resolutions() {
            let coarse = downsample_blockmean(&residual, res)?;
            let map = self.quantize(&coarse);
            let up = upsample_replicate(&self.embed(&map)?, finest)?;
            for (r, u) in residual.values.iter_mut().zip(&up.values) {
                *r -= u;
            }
            energy.push(residual.energy());
            maps.push(map);
        }
        Ok(EncodeTrace {
            pyramid: TokenPyramid { maps },
            residual_energy: energy,
        })
    }

    /// Sum of the replicated code grids of the given scales, at the finest
    /// resolution. Accepts any prefix of the schedule.
    pub fn decode_partial(&self, maps: &[TokenMap]) -> Result<FeatureGrid> {
        validate_maps(maps, &self.schedule, self.vocab())?;
        let (fh, fw) = self.schedule.finest();
        let mut out = FeatureGrid::zeros(self.channels(), fh, fw);
        for map in maps {
            let up = upsample_replicate(&self.embed(map)?, (fh, fw))?;
            for (o, u) in out.values.iter_mut().zip(&up.values) {
                *o += u;
            }
        }
        Ok(out)
    }

    pub fn decode(&self, pyramid: &TokenPyramid) -> Result<FeatureGrid> {
        pyramid.validate(&self.schedule, self.vocab())?;
        self.decode_partial(&pyramid.maps)
    }
}
