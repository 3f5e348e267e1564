//! Noise schedules, forward noising, deterministic DDIM steps and inversion.
//!
//! Schedule quantities are held in `f64` and converted at the point of use.
//! `alpha_bar(0)` is defined as 1 so that a step to timestep 0 yields the
//! predicted clean sample.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    // alpha_bars[0] == 1, alpha_bars[t] for t in 1..=T
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas interpolated linearly from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("need at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("need at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t, 1)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.beta(t)?)
    }

    /// `alpha_bar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t, 0)?;
        Ok(self.alpha_bars[t])
    }

    fn check(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                lo,
                hi: self.steps(),
            });
        }
        Ok(())
    }
}

/// Timesteps visited by an `M`-step sampler, from 0 up to `T`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplerPlan {
    taus: Vec<usize>,
}

impl SamplerPlan {
    /// `tau_i = round((i - 1) * T / (M - 1))` for `i` in `1..=M`.
    pub fn new(steps: usize, m: usize) -> Result<Self> {
        if m < 2 || m > steps + 1 {
            return Err(Error::PlanOutOfRange { m, t: steps });
        }
        let taus = (0..m)
            .map(|i| (i as f64 * steps as f64 / (m - 1) as f64).round() as usize)
            .collect();
        Ok(SamplerPlan { taus })
    }

    pub fn from_taus(taus: Vec<usize>) -> Result<Self> {
        if taus.len() < 2 || taus[0] != 0 || taus.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::TimestepOrder(format!(
                "plan must start at 0 and increase strictly: {taus:?}"
            )));
        }
        Ok(SamplerPlan { taus })
    }

    /// Number of entries `M`.
    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    pub fn taus(&self) -> &[usize] {
        &self.taus
    }

    /// The last (largest) timestep.
    pub fn t_max(&self) -> usize {
        *self.taus.last().expect("plan is never empty")
    }

    /// Reverse transitions `(t, t_prev)` in generation order, from `T` down to 0.
    pub fn reverse_steps(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.taus.windows(2).rev().map(|w| (w[1], w[0]))
    }
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps` with one timestep per row of
/// `x0`, or a single timestep for the whole batch.
pub fn q_sample<T: Float>(
    x0: &Tensor<T>,
    t: &[usize],
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape("q_sample", x0.shape(), eps.shape()));
    }
    let rows = if x0.rank() == 0 { 1 } else { x0.shape()[0] };
    if t.len() != 1 && t.len() != rows {
        return Err(Error::shape("q_sample", x0.shape(), &[t.len()]));
    }
    let cols = x0.len() / rows.max(1);
    let mut coeffs = Vec::with_capacity(t.len());
    for &ti in t {
        sched.check(ti, 1)?;
        let ab = sched.alpha_bar(ti)?;
        coeffs.push((T::from_f64(ab.sqrt()), T::from_f64((1.0 - ab).sqrt())));
    }
    let mut out = x0.clone();
    for (i, (v, &e)) in out.data_mut().iter_mut().zip(eps.data()).enumerate() {
        let (a, b) = coeffs[if coeffs.len() == 1 { 0 } else { i / cols }];
        *v = a * *v + b * e;
    }
    Ok(out)
}

fn coefficient_pair(sched: &NoiseSchedule, t: usize) -> Result<(f64, f64)> {
    let ab = sched.alpha_bar(t)?;
    Ok((ab.sqrt(), (1.0 - ab).sqrt()))
}

// (x - sqrt(1 - abar) eps) / sqrt(abar); t = 0 is allowed here and gives x.
fn p_term<'t, T: Float>(
    x_t: &Var<'t, T>,
    eps: &Var<'t, T>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Var<'t, T>> {
    let (a, b) = coefficient_pair(sched, t)?;
    Ok(x_t.sub(&eps.scale(b))?.scale(1.0 / a))
}

/// Predicted clean sample from a noisy sample and its noise estimate.
pub fn predicted_x0<'t, T: Float>(
    x_t: &Var<'t, T>,
    eps_pred: &Var<'t, T>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Var<'t, T>> {
    sched.check(t, 1)?;
    p_term(x_t, eps_pred, t, sched)
}

/// One DDIM update `t -> t_prev` where the clean-sample term uses `eps_p`
/// and the direction term uses `eps_d`. Equal arguments give the ordinary
/// step.
pub fn split_step<'t, T: Float>(
    x_t: &Var<'t, T>,
    eps_p: &Var<'t, T>,
    eps_d: &Var<'t, T>,
    t: usize,
    t_prev: usize,
    sigma: f64,
    noise: Option<&Var<'t, T>>,
    sched: &NoiseSchedule,
) -> Result<Var<'t, T>> {
    if t_prev > t {
        return Err(Error::TimestepOrder(format!(
            "reverse step needs t_prev <= t, got {t_prev} > {t}"
        )));
    }
    sched.check(t, 0)?;
    if (sigma > 0.0) != noise.is_some() || sigma < 0.0 {
        return Err(Error::NoiseMismatch);
    }
    let ab_prev = sched.alpha_bar(t_prev)?;
    let sigma_sq = sigma * sigma;
    if sigma_sq > 1.0 - ab_prev {
        return Err(Error::SigmaTooLarge {
            sigma_sq,
            bound: 1.0 - ab_prev,
        });
    }
    let p = p_term(x_t, eps_p, t, sched)?;
    let d = eps_d.scale((1.0 - ab_prev - sigma_sq).max(0.0).sqrt());
    let mut out = p.scale(ab_prev.sqrt()).add(&d)?;
    if let Some(n) = noise {
        out = out.add(&n.scale(sigma))?;
    }
    Ok(out)
}

/// Ordinary DDIM update `t -> t_prev`.
pub fn ddim_step<'t, T: Float>(
    x_t: &Var<'t, T>,
    eps_pred: &Var<'t, T>,
    t: usize,
    t_prev: usize,
    sigma: f64,
    noise: Option<&Var<'t, T>>,
    sched: &NoiseSchedule,
) -> Result<Var<'t, T>> {
    if t_prev == t && sigma == 0.0 {
        sched.check(t, 0)?;
        return Ok(x_t.clone());
    }
    split_step(x_t, eps_pred, eps_pred, t, t_prev, sigma, noise, sched)
}

/// Deterministic DDIM update `t -> t_next` toward noise.
pub fn ddim_inversion_step<'t, T: Float>(
    x_t: &Var<'t, T>,
    eps_pred: &Var<'t, T>,
    t: usize,
    t_next: usize,
    sched: &NoiseSchedule,
) -> Result<Var<'t, T>> {
    if t_next < t {
        return Err(Error::TimestepOrder(format!(
            "inversion step needs t <= t_next, got {t} > {t_next}"
        )));
    }
    sched.check(t_next, 0)?;
    if t_next == t {
        return Ok(x_t.clone());
    }
    let (a_next, b_next) = coefficient_pair(sched, t_next)?;
    let p = p_term(x_t, eps_pred, t, sched)?;
    p.scale(a_next).add(&eps_pred.scale(b_next))
}

/// Anything that predicts the noise in `x_t`, one timestep per row or one
/// for the whole batch.
pub trait EpsModel<T: Float> {
    fn predict_eps<'t>(&self, tape: &'t Tape<T>, x_t: &Var<'t, T>, t: &[usize]) -> Result<Var<'t, T>>;
}

/// Noise-prediction loss: draws `t ~ U{1..T}` and `eps ~ N(0, I)` per row and
/// returns the batch mean of the squared error norm.
pub fn diffusion_pretrain_loss<'t, T: Float, M: EpsModel<T> + ?Sized>(
    tape: &'t Tape<T>,
    x0: &Tensor<T>,
    model: &M,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Var<'t, T>> {
    if x0.rank() != 2 {
        return Err(Error::shape("diffusion_pretrain_loss", x0.shape(), &[0, 0]));
    }
    let rows = x0.shape()[0];
    let t: Vec<usize> = (0..rows).map(|_| rng.random_range(1..=sched.steps())).collect();
    let eps = Tensor::randn(x0.shape(), rng);
    let x_t = q_sample(x0, &t, &eps, sched)?;
    let pred = model.predict_eps(tape, &tape.constant(x_t), &t)?;
    Ok(pred.sub(&tape.constant(eps))?.sum_sq().scale(1.0 / rows as f64))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    fn rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let d = a.zip_map(b, |x, y| x - y).unwrap().max_abs();
        d / b.max_abs().max(1e-300)
    }

    #[test]
    fn linear_schedule_endpoints() {
        let s = sched();
        assert_eq!(s.beta(1).unwrap(), 1e-4);
        assert!((s.beta(1000).unwrap() - 0.02).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert!((s.alpha_bar(1).unwrap() - 0.9999).abs() < 1e-15);
        assert!(s.alpha_bar(1001).is_err());
        assert!(s.beta(0).is_err());
    }

    #[test]
    fn invalid_schedules() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn plan_examples() {
        let p = SamplerPlan::new(1000, 20).unwrap();
        assert_eq!(p.len(), 20);
        assert_eq!(&p.taus()[..3], &[0, 53, 105]);
        assert_eq!(&p.taus()[18..], &[947, 1000]);
        for (i, &tau) in p.taus().iter().enumerate() {
            assert_eq!(tau, (i as f64 * 1000.0 / 19.0).round() as usize);
        }
        assert_eq!(SamplerPlan::new(1000, 2).unwrap().taus(), &[0, 1000]);
        let full = SamplerPlan::new(1000, 1001).unwrap();
        assert!(full.taus().iter().enumerate().all(|(i, &t)| i == t));
        assert!(SamplerPlan::new(1000, 1).is_err());
        assert!(SamplerPlan::new(1000, 1002).is_err());
        let steps: Vec<_> = SamplerPlan::new(10, 3).unwrap().reverse_steps().collect();
        assert_eq!(steps, vec![(10, 5), (5, 0)]);
    }

    #[test]
    fn q_sample_degenerate_inputs() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = Tensor::<f64>::randn(&[2, 5], &mut rng);
        let eps = Tensor::<f64>::randn(&[2, 5], &mut rng);
        let zero = Tensor::zeros(&[2, 5]);
        let ab = s.alpha_bar(300).unwrap();
        let a = q_sample(&x0, &[300], &zero, &s).unwrap();
        assert_eq!(a, x0.map(|v| ab.sqrt() * v));
        let b = q_sample(&zero, &[300], &eps, &s).unwrap();
        assert_eq!(b, eps.map(|v| (1.0 - ab).sqrt() * v));
        assert!(matches!(
            q_sample(&x0, &[0], &eps, &s),
            Err(Error::TimestepOutOfRange { .. })
        ));
    }

    #[test]
    fn q_sample_variance_monte_carlo() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        for t in [10, 250, 900] {
            let eps = Tensor::<f64>::randn(&[n, 1], &mut rng);
            let x = q_sample(&Tensor::zeros(&[n, 1]), &[t], &eps, &s).unwrap();
            let mean = x.mean();
            let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let expected = 1.0 - s.alpha_bar(t).unwrap();
            assert!((var / expected - 1.0).abs() < 0.02, "t={t} var={var} expected={expected}");
        }
    }

    #[test]
    fn predicted_x0_inverts_q_sample() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Tensor::<f64>::randn(&[3, 4], &mut rng);
        let eps = Tensor::<f64>::randn(&[3, 4], &mut rng);
        for t in [1, 400, 1000] {
            let xt = q_sample(&x0, &[t], &eps, &s).unwrap();
            let tape = Tape::no_grad();
            let p = predicted_x0(&tape.constant(xt.clone()), &tape.constant(eps.clone()), t, &s).unwrap();
            assert!(rel(p.value(), &x0) < 1e-12);
            let z = predicted_x0(&tape.constant(xt.clone()), &tape.constant(Tensor::zeros(&[3, 4])), t, &s).unwrap();
            let ab = s.alpha_bar(t).unwrap();
            assert!(rel(z.value(), &xt.map(|v| v / ab.sqrt())) < 1e-15);
        }
        let tape = Tape::no_grad();
        let c = tape.constant(x0);
        assert!(predicted_x0(&c, &c, 0, &s).is_err());
    }

    #[test]
    fn ddim_step_identities() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::<f64>::randn(&[2, 6], &mut rng));
        let e = tape.constant(Tensor::<f64>::randn(&[2, 6], &mut rng));
        let same = ddim_step(&x, &e, 500, 500, 0.0, None, &s).unwrap();
        assert_eq!(same.value(), x.value());
        let last = ddim_step(&x, &e, 500, 0, 0.0, None, &s).unwrap();
        let p = predicted_x0(&x, &e, 500, &s).unwrap();
        assert_eq!(last.value(), p.value());
        assert!(matches!(
            ddim_step(&x, &e, 100, 200, 0.0, None, &s),
            Err(Error::TimestepOrder(_))
        ));
        assert!(matches!(
            ddim_step(&x, &e, 500, 0, 0.1, Some(&e), &s),
            Err(Error::SigmaTooLarge { .. })
        ));
        assert!(matches!(
            ddim_step(&x, &e, 500, 400, 0.1, None, &s),
            Err(Error::NoiseMismatch)
        ));
        assert!(ddim_step(&x, &e, 500, 400, 0.1, Some(&e), &s).is_ok());
    }

    #[test]
    fn ddim_step_matches_direct_formula() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = Tensor::<f64>::randn(&[2, 6], &mut rng);
        let eps = Tensor::<f64>::randn(&[2, 6], &mut rng);
        let (t, tp) = (700, 350);
        let xt = q_sample(&x0, &[t], &eps, &s).unwrap();
        let tape = Tape::no_grad();
        let out = ddim_step(&tape.constant(xt), &tape.constant(eps.clone()), t, tp, 0.0, None, &s).unwrap();
        // the true noise moves x0 along the same eps to the earlier timestep
        let expected = q_sample(&x0, &[tp], &eps, &s).unwrap();
        assert!(rel(out.value(), &expected) < 1e-12);
    }

    #[test]
    fn asymmetric_step_with_equal_eps_is_ordinary_step() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::<f64>::randn(&[2, 6], &mut rng));
        let e = tape.constant(Tensor::<f64>::randn(&[2, 6], &mut rng));
        let e2 = tape.constant(e.value().clone());
        let a = split_step(&x, &e2, &e, 600, 300, 0.0, None, &s).unwrap();
        let b = ddim_step(&x, &e, 600, 300, 0.0, None, &s).unwrap();
        assert_eq!(a.value(), b.value());
    }

    #[test]
    fn inversion_examples() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::<f64>::randn(&[2, 6], &mut rng));
        let e = tape.constant(Tensor::<f64>::randn(&[2, 6], &mut rng));
        assert_eq!(ddim_inversion_step(&x, &e, 300, 300, &s).unwrap().value(), x.value());
        assert!(ddim_inversion_step(&x, &e, 300, 200, &s).is_err());
        let up = ddim_inversion_step(&x, &e, 0, 50, &s).unwrap();
        let down = ddim_step(&up, &e, 50, 0, 0.0, None, &s).unwrap();
        assert!(rel(down.value(), x.value()) < 1e-10);
    }

    struct Oracle {
        x0: Tensor<f64>,
        sched: NoiseSchedule,
    }

    impl EpsModel<f64> for Oracle {
        fn predict_eps<'t>(&self, tape: &'t Tape<f64>, x_t: &Var<'t, f64>, t: &[usize]) -> Result<Var<'t, f64>> {
            let cols = self.x0.shape()[1];
            let mut out = x_t.value().clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                let ab = self.sched.alpha_bar(t[i / cols])?;
                *v = (*v - ab.sqrt() * self.x0.data()[i]) / (1.0 - ab).sqrt();
            }
            Ok(tape.constant(out))
        }
    }

    struct Zero;

    impl EpsModel<f64> for Zero {
        fn predict_eps<'t>(&self, tape: &'t Tape<f64>, x_t: &Var<'t, f64>, _: &[usize]) -> Result<Var<'t, f64>> {
            Ok(tape.constant(Tensor::zeros(x_t.shape())))
        }
    }

    #[test]
    fn pretrain_loss_oracles() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = Tensor::<f64>::uniform(&[64, 16], -1.0, 1.0, &mut rng);
        let tape = Tape::no_grad();
        let oracle = Oracle { x0: x0.clone(), sched: s.clone() };
        let l = diffusion_pretrain_loss(&tape, &x0, &oracle, &s, &mut rng).unwrap();
        assert!(l.value().item() < 1e-18);
        // E ||eps||^2 = 16; the mean of 4096 chi^2_16 draws has sd 0.088
        let mut total = 0.0;
        for _ in 0..64 {
            total += diffusion_pretrain_loss(&tape, &x0, &Zero, &s, &mut rng).unwrap().value().item();
        }
        let mean = total / 64.0;
        assert!((mean - 16.0).abs() < 0.27, "mean {mean}");
    }

    proptest! {
        #[test]
        fn alpha_bar_is_decreasing(steps in 1usize..200, lo in 1e-5f64..0.05, span in 0.0f64..0.5) {
            let hi = (lo + span).min(0.99);
            let s = NoiseSchedule::linear(steps, lo, hi).unwrap();
            prop_assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
            for t in 1..=steps {
                prop_assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
                prop_assert!(s.alpha_bar(t).unwrap() > 0.0);
                if t > 1 {
                    prop_assert!(s.beta(t).unwrap() >= s.beta(t - 1).unwrap());
                }
            }
        }

        #[test]
        fn plan_is_strictly_increasing(steps in 1usize..2000, m_frac in 0.0f64..1.0) {
            let m = 2 + ((steps - 1) as f64 * m_frac) as usize;
            let p = SamplerPlan::new(steps, m).unwrap();
            prop_assert_eq!(p.taus()[0], 0);
            prop_assert_eq!(p.t_max(), steps);
            prop_assert!(p.taus().windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn p_and_d_reconstruct_x(seed in any::<u64>(), t in 1usize..=1000) {
            let s = sched();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tape = Tape::no_grad();
            let x = tape.constant(Tensor::<f64>::randn(&[3, 5], &mut rng));
            let e = tape.constant(Tensor::<f64>::randn(&[3, 5], &mut rng));
            let p = predicted_x0(&x, &e, t, &s).unwrap();
            let ab = s.alpha_bar(t).unwrap();
            let back = p.scale(ab.sqrt()).add(&e.scale((1.0 - ab).sqrt())).unwrap();
            prop_assert!(rel(back.value(), x.value()) < 1e-12);
        }

        #[test]
        fn inversion_round_trip(seed in any::<u64>(), t in 0usize..999, gap in 1usize..200) {
            let s = sched();
            let t_next = (t + gap).min(1000);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tape = Tape::no_grad();
            let x = tape.constant(Tensor::<f64>::randn(&[2, 4], &mut rng));
            let e = tape.constant(Tensor::<f64>::randn(&[2, 4], &mut rng));
            let up = ddim_inversion_step(&x, &e, t, t_next, &s).unwrap();
            let down = ddim_step(&up, &e, t_next, t, 0.0, None, &s).unwrap();
            prop_assert!(rel(down.value(), x.value()) < 1e-10);
        }
    }
}
