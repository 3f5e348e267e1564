//! Peak live memory and iteration time of the two backward strategies.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chain::{Algo, BlockShift, Chain, MemoryReport};
use crate::config::DiscoveryConfig;
use crate::denoiser::Denoiser;
use crate::diffusion::{NoiseSchedule, SamplerPlan};
use crate::discovery::{generator_loss, reconstruction_loss};
use crate::error::{Error, Result};
use crate::experiments::train::{final_loss, DiscoveryModels};
use crate::memory;
use crate::nn::Module;
use crate::tensor::{Float, Tensor};

/// What one benchmark run measures.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureConfig {
    pub algo: Algo,
    pub sample_steps: usize,
    pub batch_size: usize,
    pub warmup: usize,
    pub iterations: usize,
    pub budget: Option<usize>,
    pub seed: u64,
}

/// Runs `warmup + iterations` shift-block/reconstructor gradient iterations
/// (generator plus reconstruction loss) and reports the peak of live bytes
/// over the timed ones and their mean wall time.
///
/// Model weights are included in the peak. When the budget is crossed the
/// report carries no peak.
pub fn measure<T: Float>(
    dm: &Denoiser<T>,
    sched: &NoiseSchedule,
    disc_cfg: &DiscoveryConfig,
    models: &DiscoveryModels<T>,
    cfg: &MeasureConfig,
) -> Result<MemoryReport> {
    if cfg.iterations == 0 {
        return Err(Error::Config("benchmark needs at least one timed iteration".into()));
    }
    let chain = Chain::new(dm, sched, SamplerPlan::new(sched.steps(), cfg.sample_steps)?, disc_cfg.t_stop)?;
    models.disc.set_requires_grad(false);
    let result = run(&chain, disc_cfg, models, cfg);
    models.disc.set_requires_grad(true);
    memory::set_budget(None);
    let (peak, seconds) = match result {
        Ok(v) => (Some(v.0), v.1),
        Err(Error::BudgetExceeded { .. }) => (None, f64::NAN),
        Err(e) => return Err(e),
    };
    Ok(MemoryReport {
        algo: cfg.algo,
        m: cfg.sample_steps,
        batch: cfg.batch_size,
        peak_live_bytes: peak,
        mean_step_seconds: seconds,
    })
}

fn run<T: Float>(
    chain: &Chain<'_, T>,
    disc_cfg: &DiscoveryConfig,
    models: &DiscoveryModels<T>,
    cfg: &MeasureConfig,
) -> Result<(usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = chain.denoiser().config().data_dim;
    let mut peak = 0;
    let mut total = 0.0;
    for i in 0..cfg.warmup + cfg.iterations {
        models.block.zero_grad();
        models.recon.zero_grad();
        let x_t = Tensor::<T>::randn(&[cfg.batch_size, dim], &mut rng);
        let ks: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..disc_cfg.directions))
            .collect();
        let ss: Vec<f64> = (0..cfg.batch_size)
            .map(|_| rng.random_range(-disc_cfg.max_magnitude..=disc_cfg.max_magnitude))
            .collect();
        let shift = BlockShift::new(&models.block, ks.clone(), ss.clone());
        let loss_fn = final_loss(|y, x0| {
            let x0 = y.tape().constant(x0.clone());
            let r = reconstruction_loss(
                &models.recon,
                y,
                &x0,
                &ks,
                &ss,
                disc_cfg.lambda_class,
                disc_cfg.lambda_shift,
            )?;
            generator_loss(&models.disc, y)?.add(&r.total)
        });
        memory::reset_peak();
        memory::set_budget(cfg.budget);
        let start = Instant::now();
        match cfg.algo {
            Algo::Checkpointed => {
                let trace = chain.generate_and_record(&x_t, &shift)?;
                chain.checkpointed_backward(&trace, &shift, &loss_fn)?;
            }
            Algo::Vanilla => {
                chain.vanilla_backward(&x_t, &shift, &loss_fn)?;
            }
        }
        let elapsed = start.elapsed().as_secs_f64();
        memory::set_budget(None);
        if i >= cfg.warmup {
            peak = peak.max(memory::peak_bytes());
            total += elapsed;
        }
    }
    models.block.zero_grad();
    models.recon.zero_grad();
    Ok((peak, total / cfg.iterations as f64))
}

/// One report per `(algo, M)`, algorithms in the given order.
pub fn benchmark<T: Float>(
    dm: &Denoiser<T>,
    sched: &NoiseSchedule,
    disc_cfg: &DiscoveryConfig,
    models: &DiscoveryModels<T>,
    algos: &[Algo],
    sample_steps: &[usize],
    template: &MeasureConfig,
) -> Result<Vec<MemoryReport>> {
    let mut out = Vec::new();
    for &algo in algos {
        for &m in sample_steps {
            let cfg = MeasureConfig {
                algo,
                sample_steps: m,
                ..template.clone()
            };
            let r = measure(dm, sched, disc_cfg, models, &cfg)?;
            match r.peak_live_bytes {
                Some(p) => log::info!("{algo} M={m}: peak {p} bytes, {:.4} s/iteration", r.mean_step_seconds),
                None => log::info!("{algo} M={m}: exceeded budget"),
            }
            out.push(r);
        }
    }
    Ok(out)
}

pub const BENCH_CSV_HEADER: &str = "algo,M,batch,peak_live_bytes,mean_step_seconds";

/// Rows stopped by the budget read `exceeded budget` with an empty time.
pub fn reports_to_csv(reports: &[MemoryReport]) -> String {
    let mut s = String::from(BENCH_CSV_HEADER);
    s.push('\n');
    for r in reports {
        match r.peak_live_bytes {
            Some(p) => {
                let _ = writeln!(s, "{},{},{},{},{}", r.algo, r.m, r.batch, p, r.mean_step_seconds);
            }
            None => {
                let _ = writeln!(s, "{},{},{},exceeded budget,", r.algo, r.m, r.batch);
            }
        }
    }
    s
}
