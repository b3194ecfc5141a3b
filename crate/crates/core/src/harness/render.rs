//! Binary PGM (P5) rendering of token maps and grid channels.

use crate::codec::{FeatureGrid, TokenMap};

/// Gray level of every token: `token * 255 / (C - 1)`, floored.
pub fn token_levels(map: &TokenMap, vocab: usize) -> Vec<u8> {
    let top = vocab.saturating_sub(1).max(1);
    map.tokens().iter().map(|&t| (t as usize * 255 / top).min(255) as u8).collect()
}

/// One channel, min-max normalized to 0..=255. A constant channel is
/// drawn as uniform 128.
pub fn channel_levels(grid: &FeatureGrid, channel: usize) -> Vec<u8> {
    let (_, h, w) = grid.shape();
    let values = &grid.values()[channel * h * w..(channel + 1) * h * w];
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![128; values.len()];
    }
    values.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

pub fn pgm(width: usize, height: usize, levels: &[u8], comment: &str) -> Vec<u8> {
    let mut out = format!("P5\n# {comment}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(levels);
    out
}
