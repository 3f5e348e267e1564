//! Node-by-node against full-graph gradients on small random float64 nets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chain::{BlockShift, Chain};
use crate::config::DiscoveryConfig;
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{NoiseSchedule, SamplerPlan};
use crate::discovery::{generator_loss, reconstruction_loss};
use crate::error::Result;
use crate::experiments::train::{final_loss, DiscoveryModels};
use crate::nn::Module;
use crate::tensor::Tensor;

const STEPS: usize = 100;

/// Outcome of one comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub sample_steps: usize,
    pub seed: u64,
    pub t_stop: usize,
    /// Largest `max|a - b| / max|b|` over shift-block and reconstructor
    /// parameters (0 when both are zero).
    pub max_rel_err: f64,
    /// Number of parameters that received a nonzero gradient.
    pub nonzero: usize,
}

/// Random denoiser, shift block, discriminator and reconstructor drawn from
/// `seed`; `t_stop` defaults to a random placement.
pub fn check_gradients(sample_steps: usize, seed: u64, t_stop: Option<usize>) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dm_cfg = DenoiserConfig {
        data_dim: 8,
        hidden: 8,
        bottleneck: 3,
        time_dim: 4,
    };
    let dm = Denoiser::<f64>::new(dm_cfg, &mut rng)?;
    for p in dm.params() {
        p.set_value(Tensor::randn(&p.shape(), &mut rng).map(|v| 0.5 * v))?;
    }
    let cfg = DiscoveryConfig {
        directions: 3,
        max_magnitude: 2.0,
        sample_steps,
        t_stop: t_stop.unwrap_or_else(|| rng.random_range(1..STEPS)),
        shift_hidden: 5,
        disc_hidden: 6,
        recon_hidden: 6,
        ..DiscoveryConfig::default()
    };
    let models = DiscoveryModels::<f64>::new(&cfg, &dm_cfg, &mut rng)?;
    for p in models.block.params().iter().chain(&models.disc.params()) {
        p.set_value(Tensor::randn(&p.shape(), &mut rng).map(|v| 0.5 * v))?;
    }
    let sched = NoiseSchedule::linear(STEPS, 1e-4, 0.02)?;
    let chain = Chain::new(&dm, &sched, SamplerPlan::new(STEPS, sample_steps)?, cfg.t_stop)?;
    let rows = 3;
    let x_t = Tensor::<f64>::randn(&[rows, dm_cfg.data_dim], &mut rng);
    let ks: Vec<usize> = (0..rows).map(|_| rng.random_range(0..cfg.directions)).collect();
    let ss: Vec<f64> = (0..rows).map(|_| rng.random_range(-2.0..=2.0)).collect();
    let shift = BlockShift::new(&models.block, ks.clone(), ss.clone());
    let loss_fn = final_loss(|y, x0| {
        let x0 = y.tape().constant(x0.clone());
        let r = reconstruction_loss(&models.recon, y, &x0, &ks, &ss, 0.1, 0.1)?;
        generator_loss(&models.disc, y)?.add(&r.total)
    });
    let mut params = models.block.params();
    params.extend(models.recon.params());
    models.disc.set_requires_grad(false);

    let trace = chain.generate_and_record(&x_t, &shift)?;
    chain.checkpointed_backward(&trace, &shift, &loss_fn)?;
    let node: Vec<Tensor<f64>> = params.iter().map(|p| p.grad_or_zeros()).collect();
    params.iter().for_each(|p| p.zero_grad());
    chain.vanilla_backward(&x_t, &shift, &loss_fn)?;
    let full: Vec<Tensor<f64>> = params.iter().map(|p| p.grad_or_zeros()).collect();

    let mut max_rel_err: f64 = 0.0;
    let mut nonzero = 0;
    for (a, b) in node.iter().zip(&full) {
        let scale = b.max_abs();
        let diff = a.zip_map(b, |x, y| x - y)?.max_abs();
        if scale > 0.0 {
            nonzero += 1;
            max_rel_err = max_rel_err.max(diff / scale);
        } else if diff > 0.0 {
            max_rel_err = f64::INFINITY;
        }
    }
    Ok(GradCheck {
        sample_steps,
        seed,
        t_stop: cfg.t_stop,
        max_rel_err,
        nonzero,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_chains_agree() {
        for m in [2, 3, 5] {
            let r = check_gradients(m, 7, None).unwrap();
            assert!(r.max_rel_err < 1e-9, "{r:?}");
            assert!(r.nonzero > 0);
        }
    }

    #[test]
    fn empty_shifting_interval_still_trains_the_reconstructor() {
        let r = check_gradients(4, 1, Some(STEPS + 1)).unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
        // reconstructor weights and biases only
        assert_eq!(r.nonzero, 10);
    }
}
