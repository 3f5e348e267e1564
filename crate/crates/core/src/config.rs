//! Run settings and their `key = value` file form.
//!
//! Every key has a default; unknown keys are rejected. Lists are
//! comma-separated.

use std::fmt::Write as _;
use std::path::Path;

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::io::parse_key_values;

/// Hyperparameters of the discovery loop.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscoveryConfig {
    pub directions: usize,
    pub max_magnitude: f64,
    pub sample_steps: usize,
    pub t_stop: usize,
    pub lambda_class: f64,
    pub lambda_shift: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub train_steps: usize,
    pub seed: u64,
    pub weighted_l1: bool,
    pub gamma: f64,
    /// Draw one `(k, s)` per batch instead of one per sample.
    pub per_batch_shift: bool,
    pub shift_hidden: usize,
    pub disc_hidden: usize,
    pub recon_hidden: usize,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        DiscoveryConfig {
            directions: 8,
            max_magnitude: 2.0,
            sample_steps: 20,
            t_stop: 400,
            lambda_class: 0.1,
            lambda_shift: 0.1,
            lr: 1e-3,
            batch_size: 32,
            train_steps: 3000,
            seed: 0,
            weighted_l1: false,
            gamma: 1.0,
            per_batch_shift: false,
            shift_hidden: 128,
            disc_hidden: 128,
            recon_hidden: 256,
        }
    }
}

impl DiscoveryConfig {
    /// Run name in the form `TOY16-<t_stop>-<M>-<K>-<S>`.
    pub fn name(&self) -> String {
        format!(
            "TOY16-{}-{}-{}-{}",
            self.t_stop, self.sample_steps, self.directions, self.max_magnitude
        )
    }

    pub fn validate(&self, diffusion_steps: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.directions == 0 {
            return fail("directions must be at least 1".into());
        }
        if !(self.max_magnitude > 0.0) {
            return fail("max_magnitude must be positive".into());
        }
        if self.sample_steps < 2 || self.sample_steps > diffusion_steps + 1 {
            return fail(format!("sample_steps must be in 2..={}", diffusion_steps + 1));
        }
        if self.t_stop == 0 || self.t_stop >= diffusion_steps {
            return fail(format!("t_stop must be in 1..{diffusion_steps}"));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.weighted_l1 && !(self.gamma > 0.0) {
            return fail("gamma must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub dataset_size: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Decay of the weight average that replaces the trained weights at the
    /// end; 0 keeps the last iterate.
    pub ema_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            dataset_size: 20_000,
            steps: 20_000,
            batch_size: 256,
            lr: 1e-3,
            seed: 0,
            ema_decay: 0.999,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub sample_steps: Vec<usize>,
    pub batch_size: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub budget: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sample_steps: vec![4, 8, 16, 32],
            batch_size: 32,
            iterations: 10,
            warmup: 3,
            budget: None,
        }
    }
}

/// Everything a command may need.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub denoiser: DenoiserConfig,
    pub pretrain: PretrainConfig,
    pub discovery: DiscoveryConfig,
    pub bench: BenchConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            denoiser: DenoiserConfig::default(),
            pretrain: PretrainConfig::default(),
            discovery: DiscoveryConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{v}'"))),
    }
}

impl Settings {
    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut s = Settings::default();
        for (k, v) in parse_key_values(text, path)? {
            s.set(&k, &v)?;
        }
        Ok(s)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let d = &mut self.discovery;
        let p = &mut self.pretrain;
        let b = &mut self.bench;
        match key {
            "diffusion_steps" => self.diffusion_steps = num(key, v)?,
            "beta_start" => self.beta_start = num(key, v)?,
            "beta_end" => self.beta_end = num(key, v)?,
            "data_dim" => self.denoiser.data_dim = num(key, v)?,
            "hidden" => self.denoiser.hidden = num(key, v)?,
            "bottleneck" => self.denoiser.bottleneck = num(key, v)?,
            "time_dim" => self.denoiser.time_dim = num(key, v)?,
            "dataset_size" => p.dataset_size = num(key, v)?,
            "pretrain_steps" => p.steps = num(key, v)?,
            "pretrain_batch" => p.batch_size = num(key, v)?,
            "pretrain_lr" => p.lr = num(key, v)?,
            "pretrain_seed" => p.seed = num(key, v)?,
            "pretrain_ema" => p.ema_decay = num(key, v)?,
            "directions" => d.directions = num(key, v)?,
            "max_magnitude" => d.max_magnitude = num(key, v)?,
            "sample_steps" => d.sample_steps = num(key, v)?,
            "t_stop" => d.t_stop = num(key, v)?,
            "lambda_class" => d.lambda_class = num(key, v)?,
            "lambda_shift" => d.lambda_shift = num(key, v)?,
            "lr" => d.lr = num(key, v)?,
            "batch_size" => d.batch_size = num(key, v)?,
            "train_steps" => d.train_steps = num(key, v)?,
            "seed" => d.seed = num(key, v)?,
            "weighted_l1" => d.weighted_l1 = boolean(key, v)?,
            "gamma" => d.gamma = num(key, v)?,
            "per_batch_shift" => d.per_batch_shift = boolean(key, v)?,
            "shift_hidden" => d.shift_hidden = num(key, v)?,
            "disc_hidden" => d.disc_hidden = num(key, v)?,
            "recon_hidden" => d.recon_hidden = num(key, v)?,
            "bench_steps" => {
                b.sample_steps = v
                    .split(',')
                    .map(|x| num(key, x.trim()))
                    .collect::<Result<_>>()?
            }
            "bench_batch" => b.batch_size = num(key, v)?,
            "bench_iterations" => b.iterations = num(key, v)?,
            "bench_warmup" => b.warmup = num(key, v)?,
            "bench_budget" => b.budget = if v == "none" { None } else { Some(num(key, v)?) },
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// The settings as a config file that parses back to the same values.
    pub fn to_text(&self) -> String {
        let d = &self.discovery;
        let p = &self.pretrain;
        let b = &self.bench;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("diffusion_steps", self.diffusion_steps.to_string());
        kv("beta_start", self.beta_start.to_string());
        kv("beta_end", self.beta_end.to_string());
        kv("data_dim", self.denoiser.data_dim.to_string());
        kv("hidden", self.denoiser.hidden.to_string());
        kv("bottleneck", self.denoiser.bottleneck.to_string());
        kv("time_dim", self.denoiser.time_dim.to_string());
        kv("dataset_size", p.dataset_size.to_string());
        kv("pretrain_steps", p.steps.to_string());
        kv("pretrain_batch", p.batch_size.to_string());
        kv("pretrain_lr", p.lr.to_string());
        kv("pretrain_seed", p.seed.to_string());
        kv("pretrain_ema", p.ema_decay.to_string());
        kv("directions", d.directions.to_string());
        kv("max_magnitude", d.max_magnitude.to_string());
        kv("sample_steps", d.sample_steps.to_string());
        kv("t_stop", d.t_stop.to_string());
        kv("lambda_class", d.lambda_class.to_string());
        kv("lambda_shift", d.lambda_shift.to_string());
        kv("lr", d.lr.to_string());
        kv("batch_size", d.batch_size.to_string());
        kv("train_steps", d.train_steps.to_string());
        kv("seed", d.seed.to_string());
        kv("weighted_l1", d.weighted_l1.to_string());
        kv("gamma", d.gamma.to_string());
        kv("per_batch_shift", d.per_batch_shift.to_string());
        kv("shift_hidden", d.shift_hidden.to_string());
        kv("disc_hidden", d.disc_hidden.to_string());
        kv("recon_hidden", d.recon_hidden.to_string());
        kv(
            "bench_steps",
            b.sample_steps.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(","),
        );
        kv("bench_batch", b.batch_size.to_string());
        kv("bench_iterations", b.iterations.to_string());
        kv("bench_warmup", b.warmup.to_string());
        kv(
            "bench_budget",
            b.budget.map_or("none".to_string(), |v| v.to_string()),
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_desk_scale_run() {
        let s = Settings::default();
        assert_eq!(s.discovery.name(), "TOY16-400-20-8-2");
        assert_eq!((s.beta_start, s.beta_end, s.diffusion_steps), (1e-4, 0.02, 1000));
        assert_eq!((s.discovery.lambda_class, s.discovery.lambda_shift, s.discovery.lr), (0.1, 0.1, 1e-3));
        s.discovery.validate(1000).unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut s = Settings::default();
        s.set("t_stop", "300").unwrap();
        s.set("bench_steps", "2, 4").unwrap();
        s.set("bench_budget", "1000000").unwrap();
        s.set("weighted_l1", "true").unwrap();
        let back = Settings::from_text(&s.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        let p = Path::new("cfg");
        assert!(matches!(Settings::from_text("t_sotp = 3\n", p), Err(Error::Config(_))));
        assert!(matches!(Settings::from_text("t_stop = x\n", p), Err(Error::Config(_))));
        assert!(matches!(Settings::from_text("weighted_l1 = maybe\n", p), Err(Error::Config(_))));
        let s = Settings::from_text("# comment only\nseed = 7 # trailing\n", p).unwrap();
        assert_eq!(s.discovery.seed, 7);
    }

    #[test]
    fn validation() {
        let mut d = DiscoveryConfig::default();
        d.t_stop = 1000;
        assert!(d.validate(1000).is_err());
        d.t_stop = 400;
        d.sample_steps = 1;
        assert!(d.validate(1000).is_err());
        d.sample_steps = 20;
        d.directions = 0;
        assert!(d.validate(1000).is_err());
    }
}
