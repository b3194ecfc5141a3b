//! Bundled demo scenes: two seeded 4-channel 16x16 grids, each with a
//! hand-drawn edit region.

use crate::codec::FeatureGrid;
use crate::error::{Error, Result};
use crate::metrics::RegionMask;
use crate::rng::{standard_normal, Purpose, RngKey};

pub const SCENE_CHANNELS: usize = 4;
pub const SCENE_SIZE: usize = 16;
pub const SCENE_NAMES: [&str; 2] = ["square", "disc"];

const SQUARE_MASK: &str = include_str!("../fixtures/square.mask");
const DISC_MASK: &str = include_str!("../fixtures/disc.mask");

/// A source grid, its edit region and the prompts describing before/after.
#[derive(Debug, Clone)]
pub struct DemoScene {
    pub name: &'static str,
    pub grid: FeatureGrid,
    pub mask: RegionMask,
    pub source_label: &'static str,
    pub target_label: &'static str,
}

pub fn scene(name: &str) -> Result<DemoScene> {
    let (name, art, object, source_label, target_label, seed): (_, _, [f64; 4], _, _, u64) = match name {
        "square" => ("square", SQUARE_MASK, [0.7, -0.4, 0.3, 0.5], "a red box on a lawn", "a blue box on a lawn", 11),
        "disc" => ("disc", DISC_MASK, [-0.5, 0.6, -0.2, 0.4], "an orange ball on sand", "a green ball on sand", 23),
        other => return Err(Error::input(format!("unknown demo scene {other:?}"))),
    };
    let mask = RegionMask::from_ascii(art)?;
    if mask.shape() != (SCENE_SIZE, SCENE_SIZE) {
        return Err(Error::Invariant(format!("demo mask {name} is not {SCENE_SIZE}x{SCENE_SIZE}")));
    }
    let key = RngKey::new(seed, Purpose::SCENE);
    let n = SCENE_SIZE as f64;
    let grid = FeatureGrid::from_fn(SCENE_CHANNELS, SCENE_SIZE, SCENE_SIZE, |c, y, x| {
        let (fy, fx) = (y as f64 / n, x as f64 / n);
        let phase = c as f64 * 0.9;
        let background = 0.35 * (std::f64::consts::TAU * (fx + 0.5 * fy) + phase).sin() + 0.15 * (fy - 0.5);
        let texture = 0.05 * standard_normal(key.at(c as u32, y as u32, x as u32));
        let value = if mask.get(y, x) { object[c] } else { background };
        value + texture
    })?
    .round_to_f32();
    Ok(DemoScene {
        name,
        grid,
        mask,
        source_label,
        target_label,
    })
}
