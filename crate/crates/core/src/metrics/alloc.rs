//! Bit-allocation maps: per-position bits averaged over latent channels.

use crate::error::{contract, dim_check, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BitMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major mean bits per channel.
    pub values: Vec<f64>,
}

impl BitMap {
    /// `map · C`, the total bits of the latent.
    pub fn total_bits(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.channels as f64
    }

    /// Plain-text PGM (`P2`), linearly scaled so the largest entry is 255.
    pub fn to_pgm(&self) -> String {
        let max = self.values.iter().copied().fold(0.0f64, f64::max);
        let mut out = format!("P2\n{} {}\n255\n", self.width, self.height);
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row
                .iter()
                .map(|&v| if max > 0.0 { (v / max * 255.0).round() as u32 } else { 0 }.to_string())
                .collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        self.values
            .chunks(self.width)
            .map(|row| row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",") + "\n")
            .collect()
    }

    /// Mean bits of cells flagged and not flagged by `foreground`
    /// (row-major, one flag per cell).
    pub fn split_means(&self, foreground: &[bool]) -> Result<(f64, f64)> {
        contract!(foreground.len() == self.values.len(), "{} flags for {} cells", foreground.len(), self.values.len());
        let (mut f, mut nf, mut b, mut nb) = (0.0, 0usize, 0.0, 0usize);
        for (&v, &fg) in self.values.iter().zip(foreground) {
            if fg {
                f += v;
                nf += 1;
            } else {
                b += v;
                nb += 1;
            }
        }
        contract!(nf > 0 && nb > 0, "foreground split needs both kinds of cells");
        Ok((f / nf as f64, b / nb as f64))
    }
}

/// Map of a `[1, C, H, W]` tensor of per-element bits.
pub fn bit_allocation_map(bits: &Tensor) -> Result<BitMap> {
    let (n, c, h, w) = bits.dims4()?;
    dim_check!(n == 1 && c > 0, "bit map of {:?}", bits.shape());
    let plane = h * w;
    let mut values = vec![0.0; plane];
    for ch in bits.data().chunks(plane) {
        for (v, b) in values.iter_mut().zip(ch) {
            *v += b;
        }
    }
    values.iter_mut().for_each(|v| *v /= c as f64);
    Ok(BitMap {
        height: h,
        width: w,
        channels: c,
        values,
    })
}

/// Bits of each element given its likelihood.
pub fn bits_from_likelihoods(p: &Tensor) -> Tensor {
    p.map(|v| -v.log2())
}

/// Flags latent cells whose `block`×`block` pixel footprint contains any
/// pixel set in the row-major `mask` of width `image_w`.
pub fn cell_mask(mask: &[bool], image_w: usize, block: usize) -> Vec<bool> {
    let image_h = mask.len() / image_w;
    let (h, w) = (image_h / block, image_w / block);
    let mut out = vec![false; h * w];
    for (i, &m) in mask.iter().enumerate() {
        if m {
            let (y, x) = (i / image_w / block, i % image_w / block);
            if y < h && x < w {
                out[y * w + x] = true;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_half_probability_is_one_bit() {
        let p = Tensor::full(&[1, 48, 8, 8], 0.5);
        let m = bit_allocation_map(&bits_from_likelihoods(&p)).unwrap();
        assert!(m.values.iter().all(|&v| v == 1.0));
        assert_eq!(m.total_bits(), 48.0 * 64.0);
    }

    #[test]
    fn pgm_and_csv_shapes() {
        let m = BitMap {
            height: 2,
            width: 3,
            channels: 1,
            values: vec![0.0, 1.0, 2.0, 0.5, 0.0, 4.0],
        };
        assert_eq!(m.to_pgm(), "P2\n3 2\n255\n0 64 128\n32 0 255\n");
        assert_eq!(m.to_csv(), "0,1,2\n0.5,0,4\n");
    }

    #[test]
    fn cell_mask_blocks() {
        let mut mask = vec![false; 16];
        mask[5] = true;
        assert_eq!(cell_mask(&mask, 4, 2), vec![true, false, false, false]);
        let m = BitMap { height: 2, width: 2, channels: 1, values: vec![4.0, 1.0, 1.0, 1.0] };
        assert_eq!(m.split_means(&cell_mask(&mask, 4, 2)).unwrap(), (4.0, 1.0));
        assert!(m.split_means(&[true; 4]).is_err());
    }

    proptest! {
        #[test]
        fn map_sum_times_channels_is_total(c in 1usize..6, h in 1usize..5, w in 1usize..5,
                                          seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(seed);
            let p = Tensor::uniform(&[1, c, h, w], 1e-6, 1.0, &mut rng);
            let bits = bits_from_likelihoods(&p);
            let m = bit_allocation_map(&bits).unwrap();
            prop_assert!((m.total_bits() - bits.sum()).abs() < 1e-9 * bits.sum().max(1.0));
        }
    }
}
