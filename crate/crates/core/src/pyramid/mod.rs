//! Multi-scale feature pyramids, the toy detection task that produces and
//! consumes them, and the `FPYR` pyramid file format.

pub mod dataset;
pub mod task;

use std::path::Path;

use rand::Rng;

use crate::error::{dim_check, Error, Result};
use crate::params::ByteReader;
use crate::tensor::Tensor;

pub use dataset::{generate_dataset, ShapeClass, ToyImage};
pub use task::{task_accuracy, AccuracyReport, TaskModel, TaskPrediction};

pub const LEVELS: usize = 4;
pub const PYRAMID_CHANNELS: usize = 32;
/// Spatial sizes of P2..P5.
pub const LEVEL_SIZES: [usize; LEVELS] = [16, 8, 4, 2];
/// Level ids as written in pyramid files.
pub const LEVEL_IDS: [u8; LEVELS] = [2, 3, 4, 5];

pub const FPYR_MAGIC: &[u8; 4] = b"FPYR";
pub const FPYR_VERSION: u8 = 1;

/// Levels P2..P5, each `[1, 32, S, S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<Tensor>,
}

pub fn level_shape(i: usize) -> [usize; 4] {
    [1, PYRAMID_CHANNELS, LEVEL_SIZES[i], LEVEL_SIZES[i]]
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        dim_check!(levels.len() == LEVELS, "pyramid with {} levels", levels.len());
        for (i, l) in levels.iter().enumerate() {
            dim_check!(
                l.shape() == level_shape(i),
                "level P{} has shape {:?}, expected {:?}",
                LEVEL_IDS[i],
                l.shape(),
                level_shape(i)
            );
        }
        Ok(FeaturePyramid { levels })
    }

    pub fn zeros() -> Self {
        FeaturePyramid {
            levels: (0..LEVELS).map(|i| Tensor::zeros(&level_shape(i))).collect(),
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, std: f64) -> Self {
        FeaturePyramid {
            levels: (0..LEVELS).map(|i| Tensor::randn(&level_shape(i), std, rng)).collect(),
        }
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> &Tensor {
        &self.levels[i]
    }

    pub fn level_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.levels[i]
    }

    pub fn into_levels(self) -> Vec<Tensor> {
        self.levels
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        FeaturePyramid {
            levels: self.levels.iter().map(|l| l.map(&f)).collect(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.levels.iter().map(Tensor::len).sum()
    }
}

pub fn pyramids_to_bytes(pyramids: &[FeaturePyramid]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FPYR_MAGIC);
    out.push(FPYR_VERSION);
    out.extend_from_slice(&(pyramids.len() as u32).to_le_bytes());
    for p in pyramids {
        for (i, l) in p.levels.iter().enumerate() {
            out.push(LEVEL_IDS[i]);
            let s = l.shape();
            for d in &s[1..] {
                out.extend_from_slice(&(*d as u16).to_le_bytes());
            }
            for &v in l.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    out
}

pub fn pyramids_from_bytes(bytes: &[u8]) -> Result<Vec<FeaturePyramid>> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != FPYR_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"FPYR\"")));
    }
    let version = r.u8("version")?;
    if version != FPYR_VERSION {
        return Err(Error::format(4, format!("unsupported pyramid file version {version}")));
    }
    let count = r.u32("sample count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for n in 0..count {
        let mut levels = Vec::with_capacity(LEVELS);
        for (i, &id) in LEVEL_IDS.iter().enumerate() {
            let at = r.pos;
            let got = r.u8("level id")?;
            if got != id {
                return Err(Error::format(
                    at,
                    format!("sample {n}: expected level P{id}, found id {got}"),
                ));
            }
            let at = r.pos;
            let (c, h, w) = (r.u16("C")? as usize, r.u16("H")? as usize, r.u16("W")? as usize);
            if [1, c, h, w] != level_shape(i) {
                return Err(Error::format(
                    at,
                    format!("sample {n}: level P{id} has dims {c}x{h}x{w}"),
                ));
            }
            let raw = r.take(c * h * w * 4, "level payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            levels.push(Tensor::new(&[1, c, h, w], data)?);
        }
        out.push(FeaturePyramid { levels });
    }
    if r.remaining() != 0 {
        return Err(Error::format(r.pos, format!("{} trailing bytes", r.remaining())));
    }
    Ok(out)
}

pub fn save_pyramid_file(path: impl AsRef<Path>, pyramids: &[FeaturePyramid]) -> Result<()> {
    std::fs::write(path, pyramids_to_bytes(pyramids))?;
    Ok(())
}

pub fn load_pyramid_file(path: impl AsRef<Path>) -> Result<Vec<FeaturePyramid>> {
    pyramids_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn f32_pyramids(n: usize) -> Vec<FeaturePyramid> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        (0..n)
            .map(|_| FeaturePyramid::random(&mut rng, 3.0).map(|v| v as f32 as f64))
            .collect()
    }

    #[test]
    fn file_round_trip_is_exact() {
        let ps = f32_pyramids(3);
        let back = pyramids_from_bytes(&pyramids_to_bytes(&ps)).unwrap();
        assert_eq!(back, ps);
        assert!(pyramids_from_bytes(&pyramids_to_bytes(&[])).unwrap().is_empty());
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = pyramids_to_bytes(&f32_pyramids(1));
        for cut in [0, 3, 5, 9, 10, 100, bytes.len() - 1] {
            match pyramids_from_bytes(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn wrong_level_and_magic() {
        let mut bytes = pyramids_to_bytes(&f32_pyramids(1));
        bytes[9] = 7;
        assert!(matches!(
            pyramids_from_bytes(&bytes),
            Err(Error::Format { offset: 9, .. })
        ));
        bytes[0] = 0;
        assert!(matches!(
            pyramids_from_bytes(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn shape_validation() {
        assert!(FeaturePyramid::new(vec![Tensor::zeros(&[1, 32, 16, 16])]).is_err());
    }
}
