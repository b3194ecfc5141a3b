//! Reconstruction and preservation metrics computable without learned
//! networks.

use crate::codec::{FeatureGrid, TokenPyramid};
use crate::error::{Error, Result};

/// PSNR reported for identical grids.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_DEFAULT_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Edit region of a grid; `true` cells are edited, `false` cells are
/// background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

impl RegionMask {
    pub fn new(height: usize, width: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(Error::input("mask size does not match its shape"));
        }
        Ok(RegionMask { height, width, cells })
    }

    /// One line per row, `#` for edit cells and `.` for background.
    pub fn from_ascii(art: &str) -> Result<Self> {
        let rows: Vec<&str> = art.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        let width = rows.first().map_or(0, |r| r.len());
        let mut cells = Vec::with_capacity(rows.len() * width);
        for row in &rows {
            if row.len() != width {
                return Err(Error::input("mask rows have different lengths"));
            }
            for ch in row.chars() {
                cells.push(match ch {
                    '#' => true,
                    '.' => false,
                    other => return Err(Error::input(format!("unexpected mask character {other:?}"))),
                });
            }
        }
        Self::new(rows.len(), width, cells)
    }

    pub fn to_ascii(&self) -> String {
        self.cells
            .chunks(self.width)
            .map(|row| row.iter().map(|&c| if c { '#' } else { '.' }).collect::<String>() + "\n")
            .collect()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.cells[y * self.width + x]
    }

    pub fn edit_cells(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn background_cells(&self) -> usize {
        self.cells.len() - self.edit_cells()
    }
}

fn check_pair(a: &FeatureGrid, b: &FeatureGrid) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::input(format!("grid shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean squared difference over all cells, or over the background of `mask`.
pub fn mse(a: &FeatureGrid, b: &FeatureGrid, mask: Option<&RegionMask>) -> Result<f64> {
    check_pair(a, b)?;
    let (c, h, w) = a.shape();
    if let Some(m) = mask {
        if m.shape() != (h, w) {
            return Err(Error::input("mask shape does not match the grids"));
        }
        if m.background_cells() == 0 {
            return Err(Error::input("mask leaves no background cells"));
        }
    }
    let keep = |y: usize, x: usize| mask.map_or(true, |m| !m.get(y, x));
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (va, vb)) in a.values().iter().zip(b.values()).enumerate() {
        let (y, x) = ((i / w) % h, i % w);
        if keep(y, x) {
            sum += (va - vb) * (va - vb);
            count += 1;
        }
    }
    debug_assert_eq!(count % c, 0);
    Ok(sum / count as f64)
}

/// Largest absolute value over both grids, or 1 if both are zero.
pub fn default_peak(a: &FeatureGrid, b: &FeatureGrid) -> f64 {
    let peak = a.max_abs().max(b.max_abs());
    if peak > 0.0 {
        peak
    } else {
        1.0
    }
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(a: &FeatureGrid, b: &FeatureGrid, peak: f64, mask: Option<&RegionMask>) -> Result<f64> {
    if !(peak.is_finite() && peak > 0.0) {
        return Err(Error::input(format!("PSNR peak must be positive, got {peak}")));
    }
    Ok(psnr_from_mse(mse(a, b, mask)?, peak))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl SsimParams {
    /// Default window (7) shrunk to the largest odd size fitting `h x w`.
    pub fn fitting(height: usize, width: usize, peak: f64) -> Self {
        let limit = height.min(width).max(1);
        let window = if SSIM_DEFAULT_WINDOW <= limit {
            SSIM_DEFAULT_WINDOW
        } else if limit % 2 == 1 {
            limit
        } else {
            limit - 1
        };
        SsimParams {
            window,
            k1: SSIM_K1,
            k2: SSIM_K2,
            peak,
        }
    }
}

/// Summed-area table with a zero border row and column.
struct Integral {
    width: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(h: usize, w: usize, value: impl Fn(usize, usize) -> f64) -> Self {
        let stride = w + 1;
        let mut sums = vec![0.0; (h + 1) * stride];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += value(y, x);
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Integral { width: stride, sums }
    }

    fn window(&self, y: usize, x: usize, size: usize) -> f64 {
        let s = self.width;
        self.sums[(y + size) * s + x + size] - self.sums[y * s + x + size] - self.sums[(y + size) * s + x]
            + self.sums[y * s + x]
    }
}

/// Mean SSIM over every fully contained uniform window and every channel.
pub fn ssim(a: &FeatureGrid, b: &FeatureGrid, params: SsimParams) -> Result<f64> {
    check_pair(a, b)?;
    let (channels, h, w) = a.shape();
    let n = params.window;
    if n == 0 || n % 2 == 0 {
        return Err(Error::input(format!("SSIM window must be odd, got {n}")));
    }
    if n > h.min(w) {
        return Err(Error::input(format!("SSIM window {n} larger than the {h}x{w} grid")));
    }
    if !(params.peak > 0.0) {
        return Err(Error::input("SSIM peak must be positive"));
    }
    let c1 = (params.k1 * params.peak).powi(2);
    let c2 = (params.k2 * params.peak).powi(2);
    let area = (n * n) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..channels {
        let sa = Integral::new(h, w, |y, x| a.get(c, y, x));
        let sb = Integral::new(h, w, |y, x| b.get(c, y, x));
        let saa = Integral::new(h, w, |y, x| a.get(c, y, x).powi(2));
        let sbb = Integral::new(h, w, |y, x| b.get(c, y, x).powi(2));
        let sab = Integral::new(h, w, |y, x| a.get(c, y, x) * b.get(c, y, x));
        for y in 0..=h - n {
            for x in 0..=w - n {
                let mu_a = sa.window(y, x, n) / area;
                let mu_b = sb.window(y, x, n) / area;
                let var_a = saa.window(y, x, n) / area - mu_a * mu_a;
                let var_b = sbb.window(y, x, n) / area - mu_b * mu_b;
                let cov = sab.window(y, x, n) / area - mu_a * mu_b;
                total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agreement {
    pub overall: f64,
    pub per_scale: Vec<f64>,
}

/// Fraction of equal tokens, overall and per scale.
pub fn token_agreement(a: &TokenPyramid, b: &TokenPyramid) -> Result<Agreement> {
    if a.len() != b.len() || a.maps.iter().zip(&b.maps).any(|(x, y)| x.shape() != y.shape()) {
        return Err(Error::input("pyramids follow different schedules"));
    }
    let mut equal_total = 0usize;
    let per_scale = a
        .maps
        .iter()
        .zip(&b.maps)
        .map(|(x, y)| {
            let equal = x.tokens().iter().zip(y.tokens()).filter(|(p, q)| p == q).count();
            equal_total += equal;
            equal as f64 / x.len() as f64
        })
        .collect();
    Ok(Agreement {
        overall: equal_total as f64 / a.token_count().max(1) as f64,
        per_scale,
    })
}
