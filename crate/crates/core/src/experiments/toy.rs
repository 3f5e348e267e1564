//! 16×16 anti-aliased discs with four continuous factors, and closed-form
//! moment estimators that recover them.
//!
//! Pixel `(i, j)` covers `[j, j+1) × [i, i+1)` and has value
//! `-1 + intensity * coverage`, so the background is exactly `-1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SIDE: usize = 16;
pub const PIXELS: usize = SIDE * SIDE;
const SUPERSAMPLE: usize = 16;

/// Ranges the factors are drawn from, in [`Factors::to_array`] order.
pub const FACTOR_RANGES: [(f64, f64); 4] = [(5.0, 11.0), (5.0, 11.0), (2.0, 4.5), (0.8, 2.0)];
pub const FACTOR_NAMES: [&str; 4] = ["center_x", "center_y", "radius", "intensity"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Factors {
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
    pub intensity: f64,
}

impl Factors {
    pub fn to_array(&self) -> [f64; 4] {
        [self.center_x, self.center_y, self.radius, self.intensity]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Factors {
            center_x: a[0],
            center_y: a[1],
            radius: a[2],
            intensity: a[3],
        }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self::from_array(FACTOR_RANGES.map(|(lo, hi)| rng.random_range(lo..hi)))
    }

    /// Whether every factor lies in its range widened by `slack` times the
    /// range width on both sides.
    pub fn in_range(&self, slack: f64) -> bool {
        self.to_array().iter().zip(FACTOR_RANGES).all(|(&v, (lo, hi))| {
            let pad = slack * (hi - lo);
            v.is_finite() && v >= lo - pad && v <= hi + pad
        })
    }
}

fn coverage(px: f64, py: f64, f: &Factors) -> f64 {
    let (dx, dy) = (px + 0.5 - f.center_x, py + 0.5 - f.center_y);
    let d = (dx * dx + dy * dy).sqrt();
    // Half the pixel diagonal.
    let reach = std::f64::consts::FRAC_1_SQRT_2;
    if d + reach <= f.radius {
        return 1.0;
    }
    if d - reach >= f.radius {
        return 0.0;
    }
    let n = SUPERSAMPLE;
    let r2 = f.radius * f.radius;
    let mut hits = 0;
    for a in 0..n {
        for b in 0..n {
            let x = px + (b as f64 + 0.5) / n as f64 - f.center_x;
            let y = py + (a as f64 + 0.5) / n as f64 - f.center_y;
            if x * x + y * y < r2 {
                hits += 1;
            }
        }
    }
    hits as f64 / (n * n) as f64
}

/// Row-major image of one disc.
pub fn render(f: &Factors) -> Vec<f64> {
    let mut out = Vec::with_capacity(PIXELS);
    for i in 0..SIDE {
        for j in 0..SIDE {
            out.push(-1.0 + f.intensity * coverage(j as f64, i as f64, f));
        }
    }
    out
}

/// Closed-form estimates of the factors of one image.
///
/// With mass `w = max(p + 1, 0)`: the centre is the mass centroid, the
/// intensity is the peak of `w` (the pixel holding the centre is always
/// fully covered for radii of at least `1/√2`), and the radius solves
/// `total mass = intensity * π r²`.
pub fn estimate_factors(image: &[f64]) -> Factors {
    let w: Vec<f64> = image.iter().map(|&p| (p + 1.0).max(0.0)).collect();
    let mass: f64 = w.iter().sum();
    if !(mass > 0.0) {
        return Factors::from_array([f64::NAN; 4]);
    }
    let (mut cx, mut cy) = (0.0, 0.0);
    for (idx, &m) in w.iter().enumerate() {
        cx += m * ((idx % SIDE) as f64 + 0.5);
        cy += m * ((idx / SIDE) as f64 + 0.5);
    }
    let intensity = w.iter().cloned().fold(0.0, f64::max);
    Factors {
        center_x: cx / mass,
        center_y: cy / mass,
        radius: (mass / (std::f64::consts::PI * intensity)).sqrt(),
        intensity,
    }
}

#[derive(Debug, Clone)]
pub struct ToyFactorDataset {
    /// `[n, 256]`, values in `[-1, 1]`.
    pub images: Tensor<f64>,
    pub factors: Vec<Factors>,
    pub seed: u64,
}

impl ToyFactorDataset {
    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }
}

pub fn make_dataset(n: usize, seed: u64) -> Result<ToyFactorDataset> {
    if n == 0 {
        return Err(Error::Empty("make_dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors: Vec<Factors> = (0..n).map(|_| Factors::sample(&mut rng)).collect();
    let mut data = Vec::with_capacity(n * PIXELS);
    for f in &factors {
        data.extend(render(f));
    }
    Ok(ToyFactorDataset {
        images: Tensor::new(&[n, PIXELS], data)?,
        factors,
        seed,
    })
}

/// Kolmogorov–Smirnov distance between `values` and `U[lo, hi]`.
pub fn ks_uniform(values: &[f64], lo: f64, hi: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let cdf = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
            (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
        })
        .fold(0.0, f64::max)
}
