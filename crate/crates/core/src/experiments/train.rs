//! Denoiser pretraining and the direction-discovery loop.

use std::cell::Cell;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::chain::{BlockShift, Chain};
use crate::config::{DiscoveryConfig, PretrainConfig};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{diffusion_pretrain_loss, NoiseSchedule, SamplerPlan};
use crate::discovery::{
    discriminator_loss, generator_loss, reconstruction_loss, weighted_l1_loss, Discriminator, Reconstructor,
    ShiftBlock, ShiftBlockConfig,
};
use crate::error::{Error, Result};
use crate::experiments::toy::ToyFactorDataset;
use crate::nn::{Adam, Module};
use crate::tensor::{Float, Tensor};

/// Trains `dm` in place on the dataset and returns the loss of every step.
/// The learning rate follows a cosine decay from `cfg.lr` to zero.
pub fn pretrain<T: Float>(
    dm: &Denoiser<T>,
    data: &ToyFactorDataset,
    sched: &NoiseSchedule,
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("pretrain batch size must be positive".into()));
    }
    if data.images.shape()[1] != dm.config().data_dim {
        return Err(Error::shape(
            "pretrain",
            data.images.shape(),
            &[data.len(), dm.config().data_dim],
        ));
    }
    let images: Tensor<T> = data.images.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // The dataset draws from stream 0 of the same seed.
    rng.set_stream(2);
    if !(0.0..1.0).contains(&cfg.ema_decay) {
        return Err(Error::Config(format!("ema decay must be in [0, 1), got {}", cfg.ema_decay)));
    }
    let params = dm.params();
    let mut opt = Adam::new(params.clone(), cfg.lr);
    let mut average: Vec<Vec<f64>> = params.iter().map(|p| p.value().to_f64_vec()).collect();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let x0 = images.select_rows(&idx)?;
        opt.lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
        let tape = Tape::new();
        let loss = diffusion_pretrain_loss(&tape, &x0, dm, sched, &mut rng)?;
        let value = loss.value().item().as_f64();
        if !value.is_finite() {
            log::error!("pretraining diverged at step {step} (seed {})", cfg.seed);
            return Err(Error::NonFinite {
                what: "pretraining loss".into(),
                iteration: step,
            });
        }
        tape.backward(&loss)?;
        drop(tape);
        opt.step();
        // bias-corrected so early steps are not pulled toward the init
        let decay = cfg.ema_decay.min((1.0 + step as f64) / (10.0 + step as f64));
        for (avg, p) in average.iter_mut().zip(&params) {
            for (a, v) in avg.iter_mut().zip(p.value().data()) {
                *a = decay * *a + (1.0 - decay) * v.as_f64();
            }
        }
        losses.push(value);
        if (step + 1) % 1000 == 0 {
            let recent = &losses[losses.len().saturating_sub(1000)..];
            log::info!(
                "pretrain step {}: mean loss {:.4}",
                step + 1,
                recent.iter().sum::<f64>() / recent.len() as f64
            );
        }
    }
    if cfg.ema_decay > 0.0 && cfg.steps > 0 {
        for (avg, p) in average.iter().zip(&params) {
            p.set_value(Tensor::from_f64(&p.shape(), avg)?)?;
        }
    }
    Ok(losses)
}

/// Trailing moving average with the given window.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// The three trainable networks of a discovery run.
#[derive(Debug, Clone)]
pub struct DiscoveryModels<T: Float> {
    pub block: ShiftBlock<T>,
    pub disc: Discriminator<T>,
    pub recon: Reconstructor<T>,
}

impl<T: Float> DiscoveryModels<T> {
    pub fn new(cfg: &DiscoveryConfig, dm: &DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        let block = ShiftBlock::new(
            ShiftBlockConfig {
                bottleneck: dm.bottleneck,
                time_dim: dm.time_dim,
                hidden: cfg.shift_hidden,
                directions: cfg.directions,
                max_magnitude: cfg.max_magnitude,
            },
            rng,
        )?;
        let disc = Discriminator::new(dm.data_dim, cfg.disc_hidden, rng);
        let recon = Reconstructor::new(dm.data_dim, cfg.recon_hidden, cfg.directions, rng);
        Ok(DiscoveryModels { block, disc, recon })
    }

    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut s = self.block.state();
        s.extend(self.disc.state());
        s.extend(self.recon.state());
        s
    }

    pub fn load_state(&self, state: &[(String, Tensor<T>)]) -> Result<()> {
        self.block.load_state(state)?;
        self.disc.load_state(state)?;
        self.recon.load_state(state)
    }
}

/// One logged discovery iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub disc_loss: f64,
    pub gen_loss: f64,
    /// Weighted cross-entropy part of the reconstruction loss.
    pub class_loss: f64,
    /// Weighted L1 part of the reconstruction loss.
    pub shift_loss: f64,
    pub mean_abs_shift: f64,
    pub seconds: f64,
}

/// Append-only per-iteration log with strictly increasing step numbers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub const CSV_HEADER: &'static str = "step,disc_loss,gen_loss,class_loss,shift_loss,mean_abs_shift,seconds";

    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(Error::Config(format!(
                    "metrics step {} does not follow {}",
                    row.step, last.step
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.step, r.disc_loss, r.gen_loss, r.class_loss, r.shift_loss, r.mean_abs_shift, r.seconds
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// CRC32 over every logged value except wall time.
    pub fn content_hash(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for r in &self.rows {
            h.update(&(r.step as u64).to_le_bytes());
            for v in [r.disc_loss, r.gen_loss, r.class_loss, r.shift_loss, r.mean_abs_shift] {
                h.update(&v.to_bits().to_le_bytes());
            }
        }
        h.finalize()
    }
}

/// Chain over the frozen denoiser with the run's plan and `t_stop`.
pub fn discovery_chain<'a, T: Float>(
    dm: &'a Denoiser<T>,
    sched: &'a NoiseSchedule,
    cfg: &DiscoveryConfig,
) -> Result<Chain<'a, T>> {
    Chain::new(dm, sched, SamplerPlan::new(sched.steps(), cfg.sample_steps)?, cfg.t_stop)
}

/// Fresh models from `cfg.seed`, trained for `cfg.train_steps` iterations.
pub fn discover<T: Float>(
    dm: &Denoiser<T>,
    sched: &NoiseSchedule,
    cfg: &DiscoveryConfig,
) -> Result<(DiscoveryModels<T>, MetricsLog)> {
    cfg.validate(sched.steps())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let models = DiscoveryModels::new(cfg, dm.config(), &mut rng)?;
    let mut log = MetricsLog::default();
    let mut trainer = DiscoveryTrainer::new(dm, sched, cfg, &models)?;
    for _ in 0..cfg.train_steps {
        log.push(trainer.iterate(&mut rng)?)?;
    }
    Ok((models, log))
}

/// Optimizer state and chain for running discovery iterations one at a time.
pub struct DiscoveryTrainer<'a, T: Float> {
    chain: Chain<'a, T>,
    cfg: DiscoveryConfig,
    models: &'a DiscoveryModels<T>,
    disc_opt: Adam<T>,
    main_opt: Adam<T>,
    step: usize,
}

impl<'a, T: Float> DiscoveryTrainer<'a, T> {
    /// Freezes `dm`.
    pub fn new(
        dm: &'a Denoiser<T>,
        sched: &'a NoiseSchedule,
        cfg: &DiscoveryConfig,
        models: &'a DiscoveryModels<T>,
    ) -> Result<Self> {
        cfg.validate(sched.steps())?;
        if models.block.directions() != cfg.directions || models.recon.directions() != cfg.directions {
            return Err(Error::Config("model direction count differs from the config".into()));
        }
        let mut main = models.block.params();
        main.extend(models.recon.params());
        Ok(DiscoveryTrainer {
            chain: discovery_chain(dm, sched, cfg)?,
            cfg: cfg.clone(),
            models,
            disc_opt: Adam::new(models.disc.params(), cfg.lr),
            main_opt: Adam::new(main, cfg.lr),
            step: 0,
        })
    }

    pub fn chain(&self) -> &Chain<'a, T> {
        &self.chain
    }

    /// Draws `x_T`, directions and magnitudes, updates the discriminator on
    /// the recorded pair, then the shift block and reconstructor through the
    /// node-by-node backward pass.
    pub fn iterate(&mut self, rng: &mut impl Rng) -> Result<MetricsRow> {
        let start = Instant::now();
        let cfg = &self.cfg;
        let m = self.models;
        let rows = cfg.batch_size;
        let draws = if cfg.per_batch_shift { 1 } else { rows };
        let x_t = Tensor::<T>::randn(&[rows, self.chain.denoiser().config().data_dim], rng);
        let ks: Vec<usize> = (0..draws).map(|_| rng.random_range(0..cfg.directions)).collect();
        let ss: Vec<f64> = (0..draws)
            .map(|_| rng.random_range(-cfg.max_magnitude..=cfg.max_magnitude))
            .collect();
        let shift = BlockShift::new(&m.block, ks.clone(), ss.clone());
        let trace = self.chain.generate_and_record(&x_t, &shift)?;

        let disc_loss = {
            let tape = Tape::new();
            let l = discriminator_loss(
                &m.disc,
                &tape.constant(trace.x0_ref.clone()),
                &tape.constant(trace.x0_shifted.clone()),
            )?;
            tape.backward(&l)?;
            l.value().item().as_f64()
        };
        self.check(disc_loss, "discriminator loss")?;
        self.disc_opt.step();

        let gen = Cell::new(f64::NAN);
        let class = Cell::new(f64::NAN);
        let shift_part = Cell::new(f64::NAN);
        let loss_fn = final_loss(|y, x0| {
            let tape = y.tape();
            let x0 = tape.constant(x0.clone());
            let g = generator_loss(&m.disc, y)?;
            let r = reconstruction_loss(&m.recon, y, &x0, &ks, &ss, cfg.lambda_class, cfg.lambda_shift)?;
            gen.set(g.value().item().as_f64());
            class.set(r.class_term.value().item().as_f64());
            shift_part.set(r.shift_term.value().item().as_f64());
            let mut total = g.add(&r.total)?;
            if cfg.weighted_l1 {
                total = total.add(&weighted_l1_loss(y, &x0, &ss, cfg.gamma)?)?;
            }
            Ok(total)
        });
        m.disc.set_requires_grad(false);
        let replay = self.chain.checkpointed_backward(&trace, &shift, &loss_fn);
        m.disc.set_requires_grad(true);
        replay?;
        for (v, what) in [(gen.get(), "generator loss"), (class.get(), "class loss"), (shift_part.get(), "shift loss")] {
            self.check(v, what)?;
        }
        self.main_opt.step();

        let row = MetricsRow {
            step: self.step,
            disc_loss,
            gen_loss: gen.get(),
            class_loss: class.get(),
            shift_loss: shift_part.get(),
            mean_abs_shift: trace.mean_abs_shift,
            seconds: start.elapsed().as_secs_f64(),
        };
        if (self.step + 1) % 100 == 0 {
            log::info!(
                "discover step {}: L_D {:.4} L_G {:.4} CE {:.4} L1 {:.4} |dh| {:.4}",
                self.step + 1,
                row.disc_loss,
                row.gen_loss,
                row.class_loss,
                row.shift_loss,
                row.mean_abs_shift
            );
        }
        self.step += 1;
        Ok(row)
    }

    fn check(&self, v: f64, what: &str) -> Result<()> {
        if v.is_finite() {
            return Ok(());
        }
        log::error!(
            "{what} is {v} at iteration {} (run seed {}, config {})",
            self.step,
            self.cfg.seed,
            self.cfg.name()
        );
        Err(Error::NonFinite {
            what: what.into(),
            iteration: self.step,
        })
    }
}

/// Pins a closure to the higher-ranked signature the chain expects.
pub fn final_loss<T: Float, F>(f: F) -> F
where
    F: for<'t> Fn(&Var<'t, T>, &Tensor<T>) -> Result<Var<'t, T>>,
{
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::toy::make_dataset;

    fn small_dm(seed: u64) -> Denoiser<f32> {
        let cfg = DenoiserConfig {
            data_dim: 256,
            hidden: 32,
            bottleneck: 8,
            time_dim: 8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dm = Denoiser::new(cfg, &mut rng).unwrap();
        for p in dm.params() {
            if p.name().starts_with("denoiser.out") {
                p.set_value(Tensor::randn(&p.shape(), &mut rng).map(|v| 0.05 * v)).unwrap();
            }
        }
        dm
    }

    fn small_cfg() -> DiscoveryConfig {
        DiscoveryConfig {
            directions: 3,
            sample_steps: 5,
            batch_size: 4,
            train_steps: 6,
            shift_hidden: 16,
            disc_hidden: 16,
            recon_hidden: 16,
            ..DiscoveryConfig::default()
        }
    }

    #[test]
    fn zero_pretrain_steps_keeps_weights() {
        let dm = small_dm(0);
        let before = dm.checksum();
        let data = make_dataset(8, 0).unwrap();
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let cfg = PretrainConfig {
            steps: 0,
            ..PretrainConfig::default()
        };
        assert!(pretrain(&dm, &data, &sched, &cfg).unwrap().is_empty());
        assert_eq!(dm.checksum(), before);
    }

    #[test]
    fn pretrain_loss_drops() {
        let dm = small_dm(1);
        let data = make_dataset(256, 0).unwrap();
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let cfg = PretrainConfig {
            steps: 300,
            batch_size: 32,
            ..PretrainConfig::default()
        };
        let losses = pretrain(&dm, &data, &sched, &cfg).unwrap();
        let s = smoothed(&losses, 50);
        assert!(s[299] < s[49], "{} vs {}", s[299], s[49]);
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smoothed(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn first_iteration_sits_at_equilibrium_and_dm_stays_frozen() {
        let dm = small_dm(2);
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let before = dm.checksum();
        let (_, log) = discover(&dm, &sched, &small_cfg()).unwrap();
        let ln2 = std::f32::consts::LN_2;
        assert_eq!(log.rows()[0].gen_loss, ln2 as f64);
        assert_eq!(log.rows()[0].disc_loss, (2.0 * ln2) as f64);
        assert_eq!(log.rows()[0].mean_abs_shift, 0.0);
        assert_eq!(dm.checksum(), before);
        assert!(log.rows().iter().all(|r| r.gen_loss.is_finite()));
        assert!(log.rows().windows(2).all(|w| w[0].step < w[1].step));
    }

    #[test]
    fn discovery_is_deterministic() {
        let dm = small_dm(3);
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let mut cfg = small_cfg();
        cfg.weighted_l1 = true;
        let (a, la) = discover(&dm, &sched, &cfg).unwrap();
        let (b, lb) = discover(&dm, &sched, &cfg).unwrap();
        assert_eq!(la.content_hash(), lb.content_hash());
        assert_eq!(a.block.checksum(), b.block.checksum());
        cfg.seed = 1;
        let (_, lc) = discover(&dm, &sched, &cfg).unwrap();
        assert_ne!(la.content_hash(), lc.content_hash());
    }

    #[test]
    fn per_batch_shift_runs() {
        let dm = small_dm(4);
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let mut cfg = small_cfg();
        cfg.per_batch_shift = true;
        let (models, log) = discover(&dm, &sched, &cfg).unwrap();
        assert_eq!(log.len(), cfg.train_steps);
        assert!(log.rows().last().unwrap().mean_abs_shift > 0.0);
        let state = models.state();
        let fresh = DiscoveryModels::<f32>::new(&cfg, dm.config(), &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        fresh.load_state(&state).unwrap();
        assert_eq!(fresh.block.checksum(), models.block.checksum());
    }

    #[test]
    fn log_rejects_out_of_order_rows() {
        let row = |step| MetricsRow {
            step,
            disc_loss: 0.0,
            gen_loss: 0.0,
            class_loss: 0.0,
            shift_loss: 0.0,
            mean_abs_shift: 0.0,
            seconds: 0.0,
        };
        let mut log = MetricsLog::default();
        log.push(row(0)).unwrap();
        log.push(row(2)).unwrap();
        assert!(log.push(row(2)).is_err());
        assert_eq!(log.to_csv().lines().count(), 3);
        let mut timed = log.clone();
        timed.rows[0].seconds = 5.0;
        assert_eq!(timed.content_hash(), log.content_hash());
    }
}
