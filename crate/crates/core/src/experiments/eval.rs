//! Evaluation drivers: reconstructor accuracy, traversals, real-image
//! editing and direction homogeneity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::chain::{BlockShift, Chain, FixedShift};
use crate::discovery::{global_direction, mean_direction, Edit, Reconstructor, ShiftBlock};
use crate::error::{Error, Result};
use crate::experiments::toy::{estimate_factors, Factors};
use crate::tensor::{Float, Tensor};

const RCA_BATCH: usize = 100;

/// Fraction of `(x0, x̃0)` pairs, with `k` and `s` drawn like in training,
/// for which the reconstructor's top logit is the true `k`.
pub fn rca_eval<T: Float>(
    chain: &Chain<'_, T>,
    block: &ShiftBlock<T>,
    recon: &Reconstructor<T>,
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    if n_pairs == 0 {
        return Err(Error::Empty("rca_eval"));
    }
    let k_max = block.directions();
    let s_max = block.config().max_magnitude;
    let dim = chain.denoiser().config().data_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0usize;
    let mut done = 0;
    while done < n_pairs {
        let n = RCA_BATCH.min(n_pairs - done);
        let x_t = Tensor::<T>::randn(&[n, dim], &mut rng);
        let ks: Vec<usize> = (0..n).map(|_| rng.random_range(0..k_max)).collect();
        let ss: Vec<f64> = (0..n).map(|_| rng.random_range(-s_max..=s_max)).collect();
        let x0 = chain.sample(&x_t)?;
        let shifted = chain.generate(&x_t, &BlockShift::new(block, ks.clone(), ss))?;
        let tape = Tape::no_grad();
        let (logits, _) = recon.forward(&tape.constant(shifted), &tape.constant(x0))?;
        for (row, &k) in logits.value().data().chunks_exact(k_max).zip(&ks) {
            if argmax(row) == k {
                correct += 1;
            }
        }
        done += n;
    }
    Ok(correct as f64 / n_pairs as f64)
}

/// First index of the largest value.
pub fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// `grid` magnitudes spaced uniformly over `[-s_max, s_max]`; the middle
/// one is exactly zero for odd `grid`.
pub fn traversal_magnitudes(s_max: f64, grid: usize) -> Vec<f64> {
    if grid == 1 {
        return vec![0.0];
    }
    let last = (grid - 1) as f64;
    (0..grid)
        .map(|i| s_max * (2.0 * i as f64 - last) / last)
        .collect()
}

/// Images from one starting noise `x_t` (`[1, d]`) with direction `k` and
/// the magnitudes of [`traversal_magnitudes`], in ascending order.
pub fn traverse<T: Float>(
    chain: &Chain<'_, T>,
    block: &ShiftBlock<T>,
    k: usize,
    grid: usize,
    x_t: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    check_direction(block, k)?;
    if grid == 0 {
        return Err(Error::Empty("traverse"));
    }
    traversal_magnitudes(block.config().max_magnitude, grid)
        .into_iter()
        .map(|s| chain.generate(x_t, &BlockShift::new(block, vec![k], vec![s])))
        .collect()
}

/// Standard normal starting noise for one traversal, from a seed.
pub fn seeded_noise<T: Float>(rows: usize, dim: usize, seed: u64) -> Tensor<T> {
    Tensor::randn(&[rows, dim], &mut ChaCha8Rng::seed_from_u64(seed))
}

fn check_direction<T: Float>(block: &ShiftBlock<T>, k: usize) -> Result<()> {
    if k >= block.directions() {
        return Err(Error::IndexOutOfRange {
            op: "direction",
            index: k,
            bound: block.directions(),
        });
    }
    Ok(())
}

/// Inverts `images` to starting noise with the chain's own plan, then
/// regenerates with the sum of the requested edits applied.
pub fn invert_and_edit<T: Float>(
    chain: &Chain<'_, T>,
    block: &ShiftBlock<T>,
    images: &Tensor<T>,
    edits: &[(usize, f64)],
) -> Result<Tensor<T>> {
    for &(k, _) in edits {
        check_direction(block, k)?;
    }
    let x_t = chain.invert(images)?;
    if edits.is_empty() {
        return chain.sample(&x_t);
    }
    let shift = BlockShift {
        block,
        edits: edits.iter().map(|&(k, s)| Edit::uniform(k, s)).collect(),
    };
    chain.generate(&x_t, &shift)
}

pub fn rms_diff<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let d = a.zip_map(b, |x, y| x - y)?;
    Ok((d.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / d.len().max(1) as f64).sqrt())
}

/// Which way a sequence moves, if it moves strictly one way.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trend {
    Increasing,
    Decreasing,
    Neither,
}

pub fn trend(values: &[f64]) -> Trend {
    if values.len() < 2 {
        return Trend::Neither;
    }
    if values.windows(2).all(|w| w[1] > w[0]) {
        Trend::Increasing
    } else if values.windows(2).all(|w| w[1] < w[0]) {
        Trend::Decreasing
    } else {
        Trend::Neither
    }
}

/// Monotonicity of the factor estimates along traversals of one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionResponse {
    pub k: usize,
    /// Per factor: fraction of seeds whose estimates move strictly in the
    /// factor's majority direction.
    pub monotone_fraction: [f64; 4],
}

impl DirectionResponse {
    /// Best factor and its fraction.
    pub fn best(&self) -> (usize, f64) {
        let mut best = 0;
        for j in 1..4 {
            if self.monotone_fraction[j] > self.monotone_fraction[best] {
                best = j;
            }
        }
        (best, self.monotone_fraction[best])
    }
}

/// Traverses direction `k` from every row of `x_t` at once and measures how
/// often each factor estimate moves monotonically across the grid.
pub fn direction_response<T: Float>(
    chain: &Chain<'_, T>,
    block: &ShiftBlock<T>,
    k: usize,
    grid: usize,
    x_t: &Tensor<T>,
) -> Result<DirectionResponse> {
    check_direction(block, k)?;
    let rows = x_t.shape()[0];
    let dim = x_t.shape()[1];
    let images: Vec<Tensor<T>> = traversal_magnitudes(block.config().max_magnitude, grid)
        .into_iter()
        .map(|s| chain.generate(x_t, &BlockShift::new(block, vec![k], vec![s])))
        .collect::<Result<_>>()?;
    let estimates: Vec<Vec<Factors>> = images
        .iter()
        .map(|img| {
            img.to_f64_vec()
                .chunks_exact(dim)
                .map(estimate_factors)
                .collect()
        })
        .collect();
    let mut monotone_fraction = [0.0; 4];
    for (j, frac) in monotone_fraction.iter_mut().enumerate() {
        let (mut up, mut down) = (0usize, 0usize);
        for r in 0..rows {
            let series: Vec<f64> = estimates.iter().map(|e| e[r].to_array()[j]).collect();
            match trend(&series) {
                Trend::Increasing => up += 1,
                Trend::Decreasing => down += 1,
                Trend::Neither => {}
            }
        }
        *frac = up.max(down) as f64 / rows as f64;
    }
    Ok(DirectionResponse { k, monotone_fraction })
}

/// The same edit made three ways on a held-out sample.
#[derive(Debug, Clone)]
pub struct HomogeneityReport<T: Float> {
    pub unedited: Tensor<T>,
    /// Offsets predicted from the sample's own bottleneck.
    pub per_sample: Tensor<T>,
    /// Per-timestep offsets averaged over reference samples.
    pub mean: Tensor<T>,
    /// The per-timestep means averaged over time.
    pub global: Tensor<T>,
}

impl<T: Float> HomogeneityReport<T> {
    /// RMS differences (per-sample vs mean, per-sample vs global, mean vs
    /// global).
    pub fn pairwise_rms(&self) -> Result<[f64; 3]> {
        Ok([
            rms_diff(&self.per_sample, &self.mean)?,
            rms_diff(&self.per_sample, &self.global)?,
            rms_diff(&self.mean, &self.global)?,
        ])
    }

    /// RMS change the per-sample edit makes.
    pub fn edit_rms(&self) -> Result<f64> {
        rms_diff(&self.per_sample, &self.unedited)
    }
}

/// Edits `held_out` (`[1, d]` noise) along `k` by `s` using per-sample,
/// reference-mean and global offsets. Mean offsets are taken at the
/// bottlenecks of the shifted chains started from `reference`.
pub fn homogeneity<T: Float>(
    chain: &Chain<'_, T>,
    block: &ShiftBlock<T>,
    k: usize,
    s: f64,
    held_out: &Tensor<T>,
    reference: &Tensor<T>,
) -> Result<HomogeneityReport<T>> {
    check_direction(block, k)?;
    let own = BlockShift::new(block, vec![k], vec![s]);
    let recorded = chain.bottlenecks(reference, &own)?;
    if recorded.is_empty() {
        return Err(Error::Empty("homogeneity: no shifting timesteps"));
    }
    let (timesteps, hs): (Vec<usize>, Vec<Tensor<T>>) = recorded.into_iter().unzip();
    let deltas = mean_direction(block, &timesteps, &hs, k)?;
    let global = global_direction(&deltas)?;
    let mean_shift = FixedShift::PerStep {
        timesteps,
        deltas,
        magnitude: s,
    };
    let global_shift = FixedShift::Global {
        delta: global,
        magnitude: s,
    };
    Ok(HomogeneityReport {
        unedited: chain.sample(held_out)?,
        per_sample: chain.generate(held_out, &own)?,
        mean: chain.generate(held_out, &mean_shift)?,
        global: chain.generate(held_out, &global_shift)?,
    })
}
