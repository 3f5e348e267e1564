//! Time-conditioned noise predictor with a replaceable bottleneck.
//!
//! ```text
//! temb = L2(silu(L1(sinusoid(t))))
//! e1   = silu(enc1(x) + temb)
//! e2   = silu(enc2(e1) + temb)
//! h    = to_h(e2)                      bottleneck, `bottleneck` wide
//! d1   = silu(dec1(h) + temb)
//! d2   = silu(dec2([d1, e1]) + temb)   skip connection from the encoder
//! eps  = out([d2, x])                  zero at initialization
//! ```

use rand::Rng;

use crate::autodiff::{Param, Tape, Var};
use crate::diffusion::EpsModel;
use crate::error::{Error, Result};
use crate::nn::{Linear, Module};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    pub hidden: usize,
    pub bottleneck: usize,
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            data_dim: 256,
            hidden: 256,
            bottleneck: 32,
            time_dim: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.hidden == 0 || self.bottleneck == 0 {
            return Err(Error::Config("denoiser widths must be positive".into()));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_dim must be even and >= 2, got {}",
                self.time_dim
            )));
        }
        Ok(())
    }
}

/// Sinusoidal features `[sin(t f_0), cos(t f_0), sin(t f_1), ...]` with
/// `f_i = 10000^(-i / (dim / 2))`, one row per timestep.
pub fn time_embedding<T: Float>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        for i in 0..half {
            let freq = 10000f64.powf(-(i as f64) / half as f64);
            let arg = ti as f64 * freq;
            data.push(T::from_f64(arg.sin()));
            data.push(T::from_f64(arg.cos()));
        }
    }
    Tensor::new(&[t.len(), dim], data).expect("consistent shape")
}

/// What to do with the bottleneck activation during a forward pass.
#[derive(Clone, Copy)]
pub enum HOverride<'a, 't, T: Float> {
    None,
    Replace(&'a Var<'t, T>),
}

#[derive(Debug, Clone)]
pub struct Denoiser<T: Float> {
    cfg: DenoiserConfig,
    time1: Linear<T>,
    time2: Linear<T>,
    enc1: Linear<T>,
    enc2: Linear<T>,
    to_h: Linear<T>,
    dec1: Linear<T>,
    dec2: Linear<T>,
    out: Linear<T>,
}

fn add_time<'t, T: Float>(x: &Var<'t, T>, temb: &Var<'t, T>) -> Result<Var<'t, T>> {
    if temb.shape()[0] == 1 {
        x.add_row(temb)
    } else {
        x.add(temb)
    }
}

impl<T: Float> Denoiser<T> {
    pub fn new(cfg: DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let DenoiserConfig {
            data_dim: d,
            hidden: w,
            bottleneck: b,
            time_dim: dt,
        } = cfg;
        Ok(Denoiser {
            cfg,
            time1: Linear::new("denoiser.time1", dt, w, rng),
            time2: Linear::new("denoiser.time2", w, w, rng),
            enc1: Linear::new("denoiser.enc1", d, w, rng),
            enc2: Linear::new("denoiser.enc2", w, w, rng),
            to_h: Linear::new("denoiser.to_h", w, b, rng),
            dec1: Linear::new("denoiser.dec1", b, w, rng),
            dec2: Linear::new("denoiser.dec2", 2 * w, w, rng),
            out: Linear::zeros("denoiser.out", w + d, d),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    fn temb<'t>(&self, tape: &'t Tape<T>, t: &[usize]) -> Result<Var<'t, T>> {
        let sin = tape.constant(time_embedding(t, self.cfg.time_dim));
        self.time2.forward(&self.time1.forward(&sin)?.silu())
    }

    fn check_input(&self, x: &Var<'_, T>, t: &[usize]) -> Result<()> {
        if x.value().rank() != 2 || x.shape()[1] != self.cfg.data_dim {
            return Err(Error::shape("denoiser", x.shape(), &[x.shape()[0], self.cfg.data_dim]));
        }
        if t.len() != 1 && t.len() != x.shape()[0] {
            return Err(Error::shape("denoiser timesteps", x.shape(), &[t.len()]));
        }
        Ok(())
    }

    fn run<'t>(
        &self,
        x: &Var<'t, T>,
        t: &[usize],
        over: HOverride<'_, 't, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        self.check_input(x, t)?;
        let tape = x.tape();
        let temb = self.temb(tape, t)?;
        let e1 = add_time(&self.enc1.forward(x)?, &temb)?.silu();
        let e2 = add_time(&self.enc2.forward(&e1)?, &temb)?.silu();
        let h = self.to_h.forward(&e2)?;
        let used = match over {
            HOverride::None => &h,
            HOverride::Replace(r) => {
                if r.shape() != h.shape() {
                    return Err(Error::shape("bottleneck replacement", h.shape(), r.shape()));
                }
                r
            }
        };
        let d1 = add_time(&self.dec1.forward(used)?, &temb)?.silu();
        let cat = tape.concat(&[&d1, &e1], 1)?;
        let d2 = add_time(&self.dec2.forward(&cat)?, &temb)?.silu();
        let skip = tape.concat(&[&d2, x], 1)?;
        Ok((self.out.forward(&skip)?, h))
    }

    /// Noise prediction and the bottleneck activation of the same pass.
    pub fn forward<'t>(&self, x: &Var<'t, T>, t: &[usize]) -> Result<(Var<'t, T>, Var<'t, T>)> {
        self.run(x, t, HOverride::None)
    }

    /// Noise prediction with the bottleneck optionally replaced.
    pub fn forward_with_h<'t>(
        &self,
        x: &Var<'t, T>,
        t: &[usize],
        over: HOverride<'_, 't, T>,
    ) -> Result<Var<'t, T>> {
        Ok(self.run(x, t, over)?.0)
    }

    /// Bottleneck activation only; skips the decoder.
    pub fn bottleneck<'t>(&self, x: &Var<'t, T>, t: &[usize]) -> Result<Var<'t, T>> {
        self.check_input(x, t)?;
        let temb = self.temb(x.tape(), t)?;
        let e1 = add_time(&self.enc1.forward(x)?, &temb)?.silu();
        let e2 = add_time(&self.enc2.forward(&e1)?, &temb)?.silu();
        self.to_h.forward(&e2)
    }
}

impl<T: Float> Module<T> for Denoiser<T> {
    fn params(&self) -> Vec<Param<T>> {
        [
            &self.time1,
            &self.time2,
            &self.enc1,
            &self.enc2,
            &self.to_h,
            &self.dec1,
            &self.dec2,
            &self.out,
        ]
        .iter()
        .flat_map(|l| l.params())
        .collect()
    }
}

impl<T: Float> EpsModel<T> for Denoiser<T> {
    fn predict_eps<'t>(&self, _tape: &'t Tape<T>, x_t: &Var<'t, T>, t: &[usize]) -> Result<Var<'t, T>> {
        self.forward_with_h(x_t, t, HOverride::None)
    }
}
