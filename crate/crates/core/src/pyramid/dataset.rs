//! Synthetic shape images: one anti-aliased circle, square or triangle on a
//! smooth textured background.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::par::Exec;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 64;
pub const CHANNELS: usize = 3;
pub const NUM_CLASSES: usize = 3;
/// Background control grid resolution (bilinearly upsampled).
const GRID: usize = 5;
/// Supersampling factor per axis for edge coverage.
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Circle, ShapeClass::Square, ShapeClass::Triangle];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyImage {
    /// `[1, 3, 64, 64]` in `[0, 1]`.
    pub pixels: Tensor,
    pub label: ShapeClass,
    /// Shape center in continuous pixel coordinates (pixel `i` spans `[i, i+1)`).
    pub center: (f64, f64),
    /// Per-pixel shape coverage in `[0, 1]`, row-major 64×64.
    pub coverage: Vec<f64>,
}

impl ToyImage {
    /// Pixels whose coverage exceeds one half.
    pub fn mask(&self) -> Vec<bool> {
        self.coverage.iter().map(|&c| c > 0.5).collect()
    }
}

fn inside(class: ShapeClass, dy: f64, dx: f64, r: f64) -> bool {
    match class {
        ShapeClass::Circle => dy * dy + dx * dx <= r * r,
        ShapeClass::Square => {
            let h = r * 0.85;
            dy.abs() <= h && dx.abs() <= h
        }
        ShapeClass::Triangle => {
            // Upward equilateral triangle with circumradius r: apex at dy = -r,
            // base at dy = r/2.
            dy <= r / 2.0 && dy >= -r + 3f64.sqrt() * dx.abs()
        }
    }
}

fn bilinear(grid: &[f64], y: f64, x: f64) -> f64 {
    let fy = y * (GRID - 1) as f64;
    let fx = x * (GRID - 1) as f64;
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(GRID - 1), (x0 + 1).min(GRID - 1));
    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
    let g = |a: usize, b: usize| grid[a * GRID + b];
    (1.0 - ty) * ((1.0 - tx) * g(y0, x0) + tx * g(y0, x1)) + ty * ((1.0 - tx) * g(y1, x0) + tx * g(y1, x1))
}

fn luminance(c: &[f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Renders sample `index` of the dataset with seed `seed`.
pub fn render(seed: u64, index: u64) -> ToyImage {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let label = ShapeClass::ALL[rng.gen_range(0..NUM_CLASSES)];
    let cy = rng.gen_range(16.0..48.0);
    let cx = rng.gen_range(16.0..48.0);
    let r: f64 = rng.gen_range(9.0..14.0);
    let bg: [f64; 3] = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
    let fg = loop {
        let c = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        if (luminance(&c) - luminance(&bg)).abs() > 0.3 {
            break c;
        }
    };
    let grids: Vec<Vec<f64>> = (0..CHANNELS)
        .map(|_| (0..GRID * GRID).map(|_| rng.gen_range(-0.12..0.12)).collect())
        .collect();
    let n = IMAGE_SIZE;
    let mut coverage = vec![0.0; n * n];
    let step = 1.0 / SUPERSAMPLE as f64;
    for i in 0..n {
        for j in 0..n {
            let mut hits = 0;
            for a in 0..SUPERSAMPLE {
                for b in 0..SUPERSAMPLE {
                    let y = i as f64 + (a as f64 + 0.5) * step;
                    let x = j as f64 + (b as f64 + 0.5) * step;
                    if inside(label, y - cy, x - cx, r) {
                        hits += 1;
                    }
                }
            }
            coverage[i * n + j] = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        }
    }
    let mut px = vec![0.0; CHANNELS * n * n];
    for c in 0..CHANNELS {
        for i in 0..n {
            for j in 0..n {
                let u = (i as f64 + 0.5) / n as f64;
                let v = (j as f64 + 0.5) / n as f64;
                let back = bg[c] + bilinear(&grids[c], u, v) + rng.gen_range(-0.01..0.01);
                let cov = coverage[i * n + j];
                px[(c * n + i) * n + j] = (back * (1.0 - cov) + fg[c] * cov).clamp(0.0, 1.0);
            }
        }
    }
    ToyImage {
        pixels: Tensor::new(&[1, CHANNELS, n, n], px).expect("image shape"),
        label,
        center: (cy, cx),
        coverage,
    }
}

/// Samples `0..n` of the dataset with the given seed.
pub fn generate_dataset(n: usize, seed: u64, exec: Exec) -> Vec<ToyImage> {
    exec.map_range(n, |i| render(seed, i as u64))
}

/// Samples `start..start + n` (for disjoint train/test splits of one seed).
pub fn generate_range(start: usize, n: usize, seed: u64, exec: Exec) -> Vec<ToyImage> {
    exec.map_range(n, |i| render(seed, (start + i) as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let a = generate_dataset(1, 0, Exec::Serial);
        let b = generate_dataset(1, 0, Exec::Parallel);
        assert_eq!(a, b);
        assert!(a[0].pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(generate_dataset(0, 0, Exec::Serial).is_empty());
    }

    #[test]
    fn classes_roughly_uniform() {
        let data = generate_dataset(3000, 7, Exec::Parallel);
        for class in ShapeClass::ALL {
            let k = data.iter().filter(|d| d.label == class).count() as f64;
            assert!((k / 1000.0 - 1.0).abs() <= 0.1, "{class:?}: {k}");
        }
    }

    #[test]
    fn coverage_area_matches_shape_geometry() {
        for seed in 0..30 {
            let img = render(3, seed);
            let area: f64 = img.coverage.iter().sum();
            assert!(area > 100.0 && area < 700.0, "area {area}");
            // Coverage is centered on the recorded center.
            let n = IMAGE_SIZE;
            let (mut sy, mut sx) = (0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    sy += img.coverage[i * n + j] * (i as f64 + 0.5);
                    sx += img.coverage[i * n + j] * (j as f64 + 0.5);
                }
            }
            let (my, mx) = (sy / area, sx / area);
            assert!((mx - img.center.1).abs() < 0.5);
            assert!((my - img.center.0).abs() < 0.5);
        }
    }
}
