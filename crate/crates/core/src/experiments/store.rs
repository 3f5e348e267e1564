//! Saving and loading trained models together with what is needed to
//! rebuild them.
//!
//! A denoiser file holds the denoiser parameters, `schedule.betas` and
//! `denoiser.config` (`[data_dim, hidden, bottleneck, time_dim]`). A
//! discovery file holds all of that plus the shift block, discriminator and
//! reconstructor and `discovery.meta`
//! (`[K, S, M, t_stop, shift_hidden, disc_hidden, recon_hidden]`).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::DiscoveryConfig;
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::experiments::train::DiscoveryModels;
use crate::io::{find, load_checkpoint, save_checkpoint, NamedTensors};
use crate::nn::Module;
use crate::tensor::{Float, Tensor};

fn ints<T: Float>(t: &Tensor<T>, name: &str, len: usize) -> Result<Vec<usize>> {
    if t.len() != len {
        return Err(Error::MissingTensor(format!("{name} with {len} entries")));
    }
    t.data()
        .iter()
        .map(|v| {
            let x = v.as_f64();
            if x >= 0.0 && x.fract() == 0.0 {
                Ok(x as usize)
            } else {
                Err(Error::Config(format!("{name}: {x} is not a count")))
            }
        })
        .collect()
}

fn vector<T: Float>(values: &[f64]) -> Tensor<T> {
    Tensor::from_f64(&[values.len()], values).expect("1-d")
}

pub fn denoiser_tensors<T: Float>(dm: &Denoiser<T>, sched: &NoiseSchedule) -> NamedTensors<T> {
    let c = dm.config();
    let mut out = dm.state();
    out.push(("schedule.betas".into(), vector(sched.betas())));
    out.push((
        "denoiser.config".into(),
        vector(&[c.data_dim, c.hidden, c.bottleneck, c.time_dim].map(|v| v as f64)),
    ));
    out
}

pub fn denoiser_from_tensors<T: Float>(tensors: &[(String, Tensor<T>)]) -> Result<(Denoiser<T>, NoiseSchedule)> {
    let c = ints(find(tensors, "denoiser.config")?, "denoiser.config", 4)?;
    let cfg = DenoiserConfig {
        data_dim: c[0],
        hidden: c[1],
        bottleneck: c[2],
        time_dim: c[3],
    };
    let dm = Denoiser::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    dm.load_state(tensors)?;
    let sched = NoiseSchedule::from_betas(find(tensors, "schedule.betas")?.to_f64_vec())?;
    Ok((dm, sched))
}

pub fn save_denoiser<T: Float>(path: &Path, dm: &Denoiser<T>, sched: &NoiseSchedule) -> Result<()> {
    save_checkpoint(path, &denoiser_tensors(dm, sched))
}

pub fn load_denoiser<T: Float>(path: &Path) -> Result<(Denoiser<T>, NoiseSchedule)> {
    denoiser_from_tensors(&load_checkpoint(path)?)
}

/// Everything a discovery checkpoint restores.
pub struct DiscoveryBundle<T: Float> {
    pub dm: Denoiser<T>,
    pub sched: NoiseSchedule,
    /// Defaults except for the fields stored in the file.
    pub cfg: DiscoveryConfig,
    pub models: DiscoveryModels<T>,
}

pub fn save_discovery<T: Float>(
    path: &Path,
    dm: &Denoiser<T>,
    sched: &NoiseSchedule,
    cfg: &DiscoveryConfig,
    models: &DiscoveryModels<T>,
) -> Result<()> {
    let mut t = denoiser_tensors(dm, sched);
    t.extend(models.state());
    t.push((
        "discovery.meta".into(),
        vector(&[
            cfg.directions as f64,
            cfg.max_magnitude,
            cfg.sample_steps as f64,
            cfg.t_stop as f64,
            cfg.shift_hidden as f64,
            cfg.disc_hidden as f64,
            cfg.recon_hidden as f64,
        ]),
    ));
    save_checkpoint(path, &t)
}

pub fn load_discovery<T: Float>(path: &Path) -> Result<DiscoveryBundle<T>> {
    let tensors = load_checkpoint::<T>(path)?;
    let (dm, sched) = denoiser_from_tensors(&tensors)?;
    let meta = find(&tensors, "discovery.meta")?;
    if meta.len() != 7 {
        return Err(Error::parse(path, "discovery.meta must have 7 entries"));
    }
    let m = meta.to_f64_vec();
    let counts = ints(&vector::<T>(&[m[0], m[2], m[3], m[4], m[5], m[6]]), "discovery.meta", 6)?;
    let cfg = DiscoveryConfig {
        directions: counts[0],
        max_magnitude: m[1],
        sample_steps: counts[1],
        t_stop: counts[2],
        shift_hidden: counts[3],
        disc_hidden: counts[4],
        recon_hidden: counts[5],
        ..DiscoveryConfig::default()
    };
    cfg.validate(sched.steps())?;
    let models = DiscoveryModels::new(&cfg, dm.config(), &mut ChaCha8Rng::seed_from_u64(0))?;
    models.load_state(&tensors)?;
    Ok(DiscoveryBundle { dm, sched, cfg, models })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discovery_round_trip_is_bitwise() {
        let dm_cfg = DenoiserConfig {
            data_dim: 256,
            hidden: 16,
            bottleneck: 4,
            time_dim: 4,
        };
        let dm = Denoiser::<f32>::new(dm_cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let cfg = DiscoveryConfig {
            directions: 3,
            max_magnitude: 1.5,
            t_stop: 300,
            shift_hidden: 8,
            disc_hidden: 8,
            recon_hidden: 8,
            ..DiscoveryConfig::default()
        };
        let models = DiscoveryModels::new(&cfg, &dm_cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_discovery(&path, &dm, &sched, &cfg, &models).unwrap();
        let b = load_discovery::<f32>(&path).unwrap();
        assert_eq!(b.dm.checksum(), dm.checksum());
        assert_eq!(b.models.state(), models.state());
        assert_eq!(b.cfg, cfg);
        assert_eq!(b.sched.steps(), 1000);
        for t in 1..=1000 {
            let rel = (b.sched.alpha_bar(t).unwrap() - sched.alpha_bar(t).unwrap()).abs() / sched.alpha_bar(t).unwrap();
            assert!(rel < 1e-5);
        }
        assert!(matches!(load_discovery::<f64>(&path), Err(Error::DTypeMismatch { .. })));

        let dm_path = dir.path().join("dm.ckpt");
        save_denoiser(&dm_path, &dm, &sched).unwrap();
        let (back, _) = load_denoiser::<f32>(&dm_path).unwrap();
        assert_eq!(back.checksum(), dm.checksum());
        assert!(matches!(load_discovery::<f32>(&dm_path), Err(Error::MissingTensor(_))));
    }
}
