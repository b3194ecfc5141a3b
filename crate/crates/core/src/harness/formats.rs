//! Binary artifact files.
//!
//! Every file opens with a 4-byte magic, a `u16` version, the 32-byte config
//! digest and the `u64` seed. All integers and floats are little-endian;
//! real payloads are stored as `f32`, tokens as `u16`.
//!
//! | kind    | after the common header                                             |
//! |---------|---------------------------------------------------------------------|
//! | grid    | `d, h, w: u32`, then `d*h*w` values, channel-major                  |
//! | pyramid | `K, C: u32`, `K` pairs `(h, w): u32`, then every scale's tokens      |
//! | noise   | `K, C`, schedule, `tau: f64`, kind `u8`, sensitive `u8`, label (`u32` length + UTF-8), then `h*w*C` values per scale |

use std::fs;
use std::path::Path;

use crate::codec::{FeatureGrid, ScaleSchedule, TokenMap, TokenPyramid};
use crate::error::{Error, Result};
use crate::inversion::{InverseNoiseSet, InversionKind, Provenance};
use crate::logits::NoiseMap;

pub const VERSION: u16 = 1;
pub const GRID_MAGIC: [u8; 4] = *b"VRGD";
pub const PYRAMID_MAGIC: [u8; 4] = *b"VRPY";
pub const NOISE_MAGIC: [u8; 4] = *b"VRNS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub digest: [u8; 32],
    pub seed: u64,
}

impl Header {
    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest)
    }
}

/// A pyramid file: the tokens plus the vocabulary size they were written with.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidFile {
    pub header: Header,
    pub vocab: usize,
    pub pyramid: TokenPyramid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseFile {
    pub header: Header,
    pub vocab: usize,
    pub schedule: ScaleSchedule,
    pub noise: InverseNoiseSet,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Artifact {
    Grid(Header, FeatureGrid),
    Pyramid(PyramidFile),
    Noise(NoiseFile),
}

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: [u8; 4], header: &Header) -> Self {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(&magic);
        w.0.extend_from_slice(&VERSION.to_le_bytes());
        w.0.extend_from_slice(&header.digest);
        w.u64(header.seed);
        w
    }

    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f32s(&mut self, values: &[f64]) {
        for &v in values {
            self.0.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    fn schedule(&mut self, resolutions: &[(usize, usize)]) {
        for &(h, w) in resolutions {
            self.u32(h);
            self.u32(w);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("file is truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format("size overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
            .collect())
    }

    fn schedule(&mut self, scales: usize) -> Result<Vec<(usize, usize)>> {
        (0..scales).map(|_| Ok((self.u32()?, self.u32()?))).collect()
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn open(bytes: &[u8]) -> Result<([u8; 4], Header, Reader<'_>)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.array::<4>()?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported version {version}")));
    }
    let digest = r.array::<32>()?;
    let seed = r.u64()?;
    Ok((magic, Header { digest, seed }, r))
}

fn to_format(e: Error) -> Error {
    match e {
        Error::Input(msg) => Error::Format(msg),
        other => other,
    }
}

pub fn grid_bytes(header: &Header, grid: &FeatureGrid) -> Vec<u8> {
    let mut w = Writer::new(GRID_MAGIC, header);
    let (d, h, wd) = grid.shape();
    w.u32(d);
    w.u32(h);
    w.u32(wd);
    w.f32s(grid.values());
    w.0
}

pub fn pyramid_bytes(header: &Header, pyramid: &TokenPyramid, vocab: usize) -> Vec<u8> {
    let mut w = Writer::new(PYRAMID_MAGIC, header);
    w.u32(pyramid.len());
    w.u32(vocab);
    let shapes: Vec<_> = pyramid.maps.iter().map(TokenMap::shape).collect();
    w.schedule(&shapes);
    for map in &pyramid.maps {
        for &t in map.tokens() {
            w.0.extend_from_slice(&t.to_le_bytes());
        }
    }
    w.0
}

pub fn noise_bytes(header: &Header, noise: &InverseNoiseSet, schedule: &ScaleSchedule, vocab: usize) -> Vec<u8> {
    let mut w = Writer::new(NOISE_MAGIC, header);
    w.u32(schedule.len());
    w.u32(vocab);
    w.schedule(schedule.resolutions());
    let p = &noise.provenance;
    w.f64(p.tau);
    w.u8(match p.kind {
        InversionKind::Oai => 0,
        InversionKind::Lai => 1,
    });
    w.u8(p.sensitive() as u8);
    w.u32(p.label.len());
    w.0.extend_from_slice(p.label.as_bytes());
    for map in &noise.maps {
        w.f32s(map.values());
    }
    w.0
}

fn parse_grid(mut r: Reader<'_>) -> Result<FeatureGrid> {
    let (d, h, w) = (r.u32()?, r.u32()?, r.u32()?);
    let n = d
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| Error::format("grid size overflow"))?;
    let values = r.f32s(n)?;
    r.finish()?;
    FeatureGrid::new(d, h, w, values).map_err(to_format)
}

fn parse_pyramid(mut r: Reader<'_>, header: Header) -> Result<PyramidFile> {
    let (scales, vocab) = (r.u32()?, r.u32()?);
    let shapes = r.schedule(scales)?;
    let mut maps = Vec::with_capacity(scales);
    for (h, w) in shapes {
        let n = h.checked_mul(w).ok_or_else(|| Error::format("token map size overflow"))?;
        let bytes = r.take(n.checked_mul(2).ok_or_else(|| Error::format("size overflow"))?)?;
        let tokens: Vec<u16> = bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::format(format!("token {bad} outside vocabulary of {vocab}")));
        }
        maps.push(TokenMap::new(h, w, tokens).map_err(to_format)?);
    }
    r.finish()?;
    Ok(PyramidFile {
        header,
        vocab,
        pyramid: TokenPyramid::new(maps),
    })
}

fn parse_noise(mut r: Reader<'_>, header: Header) -> Result<NoiseFile> {
    let (scales, vocab) = (r.u32()?, r.u32()?);
    let schedule = ScaleSchedule::new(r.schedule(scales)?).map_err(to_format)?;
    let tau = r.f64()?;
    let kind = match r.u8()? {
        0 => InversionKind::Oai,
        1 => InversionKind::Lai,
        other => return Err(Error::format(format!("unknown inversion kind tag {other}"))),
    };
    let _sensitive = r.u8()?;
    let len = r.u32()?;
    let label = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::format("label is not UTF-8"))?;
    let mut maps = Vec::with_capacity(scales);
    for &(h, w) in schedule.resolutions() {
        let n = h
            .checked_mul(w)
            .and_then(|x| x.checked_mul(vocab))
            .ok_or_else(|| Error::format("noise size overflow"))?;
        let values = r.f32s(n)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("noise values must be finite"));
        }
        maps.push(NoiseMap::new(h, w, vocab, values).map_err(to_format)?);
    }
    r.finish()?;
    Ok(NoiseFile {
        header,
        vocab,
        schedule,
        noise: InverseNoiseSet {
            maps,
            provenance: Provenance {
                label,
                tau,
                seed: header.seed,
                kind,
            },
        },
    })
}

pub fn parse_artifact(bytes: &[u8]) -> Result<Artifact> {
    let (magic, header, r) = open(bytes)?;
    match magic {
        GRID_MAGIC => Ok(Artifact::Grid(header, parse_grid(r)?)),
        PYRAMID_MAGIC => Ok(Artifact::Pyramid(parse_pyramid(r, header)?)),
        NOISE_MAGIC => Ok(Artifact::Noise(parse_noise(r, header)?)),
        other => Err(Error::format(format!("unrecognised magic {:?}", String::from_utf8_lossy(&other)))),
    }
}

pub fn read_artifact(path: &Path) -> Result<Artifact> {
    parse_artifact(&fs::read(path)?).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn read_grid(path: &Path) -> Result<(Header, FeatureGrid)> {
    match read_artifact(path)? {
        Artifact::Grid(h, g) => Ok((h, g)),
        _ => Err(Error::format(format!("{} is not a grid file", path.display()))),
    }
}

pub fn read_pyramid(path: &Path) -> Result<PyramidFile> {
    match read_artifact(path)? {
        Artifact::Pyramid(p) => Ok(p),
        _ => Err(Error::format(format!("{} is not a pyramid file", path.display()))),
    }
}

pub fn read_noise(path: &Path) -> Result<NoiseFile> {
    match read_artifact(path)? {
        Artifact::Noise(n) => Ok(n),
        _ => Err(Error::format(format!("{} is not a noise file", path.display()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{Codebook, Codec};
    use crate::predictor::{Execution, Predictor, PredictorParams};
    use crate::inversion::varin_invert;
    use crate::rng::{standard_normal, Purpose, RngKey};

    fn header() -> Header {
        Header {
            digest: [7; 32],
            seed: 42,
        }
    }

    #[test]
    fn grid_round_trip_is_exact_for_f32_values() {
        let key = RngKey::new(1, Purpose::AUX);
        let grid = FeatureGrid::from_fn(3, 4, 2, |c, y, x| standard_normal(key.at(c as u32, y as u32, x as u32)))
            .unwrap()
            .round_to_f32();
        let bytes = grid_bytes(&header(), &grid);
        assert_eq!(&bytes[..4], b"VRGD");
        assert_eq!(bytes.len(), 4 + 2 + 32 + 8 + 12 + 4 * 24);
        assert_eq!(parse_artifact(&bytes).unwrap(), Artifact::Grid(header(), grid));
    }

    #[test]
    fn pyramid_round_trip() {
        let pyramid = TokenPyramid::new(vec![TokenMap::filled(1, 1, 3), TokenMap::new(2, 2, vec![0, 1, 2, 63]).unwrap()]);
        let bytes = pyramid_bytes(&header(), &pyramid, 64);
        match parse_artifact(&bytes).unwrap() {
            Artifact::Pyramid(p) => {
                assert_eq!(p.pyramid, pyramid);
                assert_eq!(p.vocab, 64);
                assert_eq!(p.header, header());
            }
            other => panic!("{other:?}"),
        }
        let mut bad = pyramid_bytes(&header(), &pyramid, 64);
        let n = bad.len();
        bad[n - 2] = 64;
        assert!(matches!(parse_artifact(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn noise_round_trip_is_bitwise_after_f32_rounding() {
        let codec = Codec::new(Codebook::seeded(4, 16, 2).unwrap(), ScaleSchedule::dyadic(3).unwrap());
        let predictor = Predictor::new(PredictorParams::default(), codec).unwrap();
        let cond = predictor.condition("lbl");
        let pyramid = predictor.generate(&cond, 5, None).unwrap();
        let noise = varin_invert(&predictor, &pyramid, &cond, InversionKind::Lai, 1.5, 42, Execution::Serial).unwrap();
        let schedule = predictor.codec().schedule.clone();
        let bytes = noise_bytes(&header(), &noise, &schedule, 16);
        let Artifact::Noise(file) = parse_artifact(&bytes).unwrap() else { panic!() };
        assert_eq!(file.schedule, schedule);
        assert_eq!(file.noise.provenance, noise.provenance);
        for (a, b) in file.noise.maps.iter().zip(&noise.maps) {
            let rounded: Vec<f64> = b.values().iter().map(|&v| v as f32 as f64).collect();
            assert_eq!(a.values(), &rounded[..]);
        }
        assert_eq!(noise_bytes(&header(), &file.noise, &schedule, 16), bytes);
    }

    #[test]
    fn rejects_damaged_files() {
        let grid = FeatureGrid::zeros(1, 2, 2);
        let bytes = grid_bytes(&header(), &grid);
        assert!(matches!(parse_artifact(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(parse_artifact(&extra), Err(Error::Format(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(parse_artifact(&magic), Err(Error::Format(_))));
        let mut version = bytes;
        version[4] = 9;
        assert!(matches!(parse_artifact(&version), Err(Error::Format(_))));
        assert!(matches!(parse_artifact(&[]), Err(Error::Format(_))));
    }
}
