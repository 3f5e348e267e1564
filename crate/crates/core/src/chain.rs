//! The shifted reverse chain and the two ways of differentiating through it.
//!
//! A reverse step `t -> t_prev` is *asymmetric* when `t >= t_stop`: the
//! clean-sample term is computed from the noise prediction under the shifted
//! bottleneck, the direction term from the unshifted one. All other steps
//! are ordinary deterministic DDIM steps.
//!
//! [`Chain::checkpointed_backward`] re-runs one step at a time from nodes
//! recorded by [`Chain::generate_and_record`], so only one step's records
//! are alive at any moment. [`Chain::vanilla_backward`] keeps the whole chain
//! on one tape and serves as the reference.

use std::fmt;
use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::denoiser::{Denoiser, HOverride};
use crate::diffusion::{ddim_inversion_step, ddim_step, split_step, NoiseSchedule, SamplerPlan};
use crate::discovery::{Edit, ShiftBlock};
use crate::error::{Error, Result};
use crate::memory;
use crate::nn::Module;
use crate::tensor::{Float, Tensor};

/// Produces the shifted bottleneck used by asymmetric steps.
pub trait HShift<T: Float> {
    fn shifted<'t>(&self, h: &Var<'t, T>, t: usize) -> Result<Var<'t, T>>;

    /// Fingerprint of whatever parameters the shift depends on.
    fn checksum(&self) -> u32;
}

/// Offsets predicted by a shift block.
pub struct BlockShift<'a, T: Float> {
    pub block: &'a ShiftBlock<T>,
    pub edits: Vec<Edit>,
}

impl<'a, T: Float> BlockShift<'a, T> {
    /// One direction and magnitude per row (or one for all rows).
    pub fn new(block: &'a ShiftBlock<T>, directions: Vec<usize>, magnitudes: Vec<f64>) -> Self {
        BlockShift {
            block,
            edits: vec![Edit {
                directions,
                magnitudes,
            }],
        }
    }
}

impl<T: Float> HShift<T> for BlockShift<'_, T> {
    fn shifted<'t>(&self, h: &Var<'t, T>, t: usize) -> Result<Var<'t, T>> {
        self.block.shift(h, t, &self.edits)
    }

    fn checksum(&self) -> u32 {
        self.block.checksum()
    }
}

/// Precomputed offsets: one per timestep, or a single time-invariant one.
/// Each offset is `[1, d_h]` and is added to every row.
pub enum FixedShift<T: Float> {
    PerStep {
        timesteps: Vec<usize>,
        deltas: Vec<Tensor<T>>,
        magnitude: f64,
    },
    Global {
        delta: Tensor<T>,
        magnitude: f64,
    },
}

impl<T: Float> HShift<T> for FixedShift<T> {
    fn shifted<'t>(&self, h: &Var<'t, T>, t: usize) -> Result<Var<'t, T>> {
        let (delta, s) = match self {
            FixedShift::PerStep {
                timesteps,
                deltas,
                magnitude,
            } => {
                let i = timesteps
                    .iter()
                    .position(|&x| x == t)
                    .ok_or(Error::TimestepOutOfRange { t, lo: t, hi: t })?;
                (&deltas[i], *magnitude)
            }
            FixedShift::Global { delta, magnitude } => (delta, *magnitude),
        };
        let tape = h.tape();
        h.add_row(&tape.constant(delta.clone()).scale(s))
    }

    fn checksum(&self) -> u32 {
        let mut hasher = crc32fast::Hasher::new();
        match self {
            FixedShift::PerStep { deltas, magnitude, .. } => {
                hasher.update(&magnitude.to_le_bytes());
                deltas.iter().for_each(|d| d.checksum(&mut hasher));
            }
            FixedShift::Global { delta, magnitude } => {
                hasher.update(&magnitude.to_le_bytes());
                delta.checksum(&mut hasher);
            }
        }
        hasher.finalize()
    }
}

/// Scalar loss of the final shifted sample, given the unshifted one.
pub type LossFn<'a, T> = dyn for<'t> Fn(&Var<'t, T>, &Tensor<T>) -> Result<Var<'t, T>> + 'a;

/// Nodes recorded by a gradient-free pass over the shifted chain.
pub struct ChainTrace<T: Float> {
    pub plan: SamplerPlan,
    pub t_stop: usize,
    /// `nodes[0]` is the starting noise; `nodes[j]` is the input of the
    /// `j`-th reverse step. The final step's output is `x0_shifted`.
    pub nodes: Vec<Rc<Tensor<T>>>,
    pub x0_ref: Tensor<T>,
    pub x0_shifted: Tensor<T>,
    /// Mean `|ĥ - h|` over asymmetric steps.
    pub mean_abs_shift: f64,
    checksum: u32,
}

impl<T: Float> fmt::Debug for ChainTrace<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChainTrace")
            .field("taus", &self.plan.taus())
            .field("t_stop", &self.t_stop)
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

/// A frozen denoiser run over a fixed sampler plan.
pub struct Chain<'a, T: Float> {
    dm: &'a Denoiser<T>,
    sched: &'a NoiseSchedule,
    plan: SamplerPlan,
    t_stop: usize,
}

impl<'a, T: Float> Chain<'a, T> {
    /// Freezes `dm`. `t_stop` must be positive; values above `T` leave every
    /// step ordinary.
    pub fn new(dm: &'a Denoiser<T>, sched: &'a NoiseSchedule, plan: SamplerPlan, t_stop: usize) -> Result<Self> {
        if t_stop == 0 {
            return Err(Error::Config("t_stop must be positive".into()));
        }
        if plan.t_max() > sched.steps() {
            return Err(Error::TimestepOutOfRange {
                t: plan.t_max(),
                lo: 0,
                hi: sched.steps(),
            });
        }
        dm.set_requires_grad(false);
        Ok(Chain {
            dm,
            sched,
            plan,
            t_stop,
        })
    }

    pub fn plan(&self) -> &SamplerPlan {
        &self.plan
    }

    pub fn t_stop(&self) -> usize {
        self.t_stop
    }

    pub fn denoiser(&self) -> &Denoiser<T> {
        self.dm
    }

    pub fn is_asymmetric(&self, t: usize) -> bool {
        t >= self.t_stop
    }

    /// Timesteps at which asymmetric steps start, in generation order.
    pub fn shifting_timesteps(&self) -> Vec<usize> {
        self.plan
            .reverse_steps()
            .map(|(t, _)| t)
            .filter(|&t| self.is_asymmetric(t))
            .collect()
    }

    fn step<'t>(
        &self,
        x: &Var<'t, T>,
        t: usize,
        t_prev: usize,
        shift: Option<&dyn HShift<T>>,
        shift_size: Option<&mut f64>,
    ) -> Result<Var<'t, T>> {
        match shift {
            Some(shift) if self.is_asymmetric(t) => {
                let (eps, h) = self.dm.forward(x, &[t])?;
                let h_hat = shift.shifted(&h, t)?;
                if let Some(acc) = shift_size {
                    let diff = h_hat.value().zip_map(h.value(), |a, b| a - b)?;
                    *acc += diff.data().iter().map(|v| v.abs().as_f64()).sum::<f64>() / diff.len() as f64;
                }
                let eps_hat = self.dm.forward_with_h(x, &[t], HOverride::Replace(&h_hat))?;
                split_step(x, &eps_hat, &eps, t, t_prev, 0.0, None, self.sched)
            }
            _ => {
                let eps = self.dm.forward_with_h(x, &[t], HOverride::None)?;
                ddim_step(x, &eps, t, t_prev, 0.0, None, self.sched)
            }
        }
    }

    /// Ordinary deterministic sampling from `x_T`.
    pub fn sample(&self, x_t: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let mut x = tape.constant(x_t.clone());
        for (t, tp) in self.plan.reverse_steps() {
            x = self.step(&x, t, tp, None, None)?;
        }
        Ok(x.value().clone())
    }

    /// Shifted sampling without recording anything.
    pub fn generate(&self, x_t: &Tensor<T>, shift: &dyn HShift<T>) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let mut x = tape.constant(x_t.clone());
        for (t, tp) in self.plan.reverse_steps() {
            x = self.step(&x, t, tp, Some(shift), None)?;
        }
        Ok(x.value().clone())
    }

    /// Natural bottleneck activations along the shifted chain, one `[B, d_h]`
    /// tensor per asymmetric step, in generation order.
    pub fn bottlenecks(&self, x_t: &Tensor<T>, shift: &dyn HShift<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let tape = Tape::no_grad();
        let mut x = tape.constant(x_t.clone());
        let mut out = Vec::new();
        for (t, tp) in self.plan.reverse_steps() {
            if self.is_asymmetric(t) {
                out.push((t, self.dm.bottleneck(&x, &[t])?.value().clone()));
            }
            x = self.step(&x, t, tp, Some(shift), None)?;
        }
        Ok(out)
    }

    /// Deterministic inversion of clean samples to starting noise.
    pub fn invert(&self, x0: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let mut x = tape.constant(x0.clone());
        for w in self.plan.taus().windows(2) {
            let eps = self.dm.forward_with_h(&x, &[w[0]], HOverride::None)?;
            x = ddim_inversion_step(&x, &eps, w[0], w[1], self.sched)?;
        }
        Ok(x.value().clone())
    }

    fn fingerprint(&self, shift: &dyn HShift<T>) -> u32 {
        let mut h = crc32fast::Hasher::new();
        h.update(&self.dm.checksum().to_le_bytes());
        h.update(&shift.checksum().to_le_bytes());
        h.finalize()
    }

    /// Runs the unshifted and the shifted chain from the same `x_T` without
    /// gradients, keeping the shifted chain's step inputs.
    pub fn generate_and_record(&self, x_t: &Tensor<T>, shift: &dyn HShift<T>) -> Result<ChainTrace<T>> {
        let x0_ref = self.sample(x_t)?;
        let tape = Tape::no_grad();
        let steps: Vec<_> = self.plan.reverse_steps().collect();
        let mut nodes = Vec::with_capacity(steps.len());
        let start = Rc::new(x_t.clone());
        nodes.push(Rc::clone(&start));
        let mut x = tape.constant_rc(start);
        let mut shift_size = 0.0;
        for (j, &(t, tp)) in steps.iter().enumerate() {
            x = self.step(&x, t, tp, Some(shift), Some(&mut shift_size))?;
            if j + 1 < steps.len() {
                nodes.push(x.value_rc());
            }
        }
        let asym = steps.iter().filter(|(t, _)| self.is_asymmetric(*t)).count();
        Ok(ChainTrace {
            plan: self.plan.clone(),
            t_stop: self.t_stop,
            nodes,
            x0_ref,
            x0_shifted: x.value().clone(),
            mean_abs_shift: if asym > 0 { shift_size / asym as f64 } else { 0.0 },
            checksum: self.fingerprint(shift),
        })
    }

    /// Back-propagates `loss_fn(x0_shifted, x0_ref)` one step at a time,
    /// last step first. Gradients accumulate into the shift's parameters on
    /// asymmetric steps and into any parameters `loss_fn` uses. Returns the
    /// loss value.
    pub fn checkpointed_backward(
        &self,
        trace: &ChainTrace<T>,
        shift: &dyn HShift<T>,
        loss_fn: &LossFn<'_, T>,
    ) -> Result<T> {
        if trace.plan != self.plan || trace.t_stop != self.t_stop {
            return Err(Error::Config("trace was recorded with a different plan".into()));
        }
        let current = self.fingerprint(shift);
        if current != trace.checksum {
            return Err(Error::ParamChecksum {
                recorded: trace.checksum,
                current,
            });
        }
        let steps: Vec<_> = self.plan.reverse_steps().collect();
        let last = steps.len() - 1;
        let mut node_grad: Option<Tensor<T>> = None;
        let mut loss_value = T::zero();
        for j in (0..steps.len()).rev() {
            let (t, tp) = steps[j];
            let tape = Tape::new();
            let x = tape.input_rc(Rc::clone(&trace.nodes[j]));
            let y = self.step(&x, t, tp, Some(shift), None)?;
            let grad = if j == last {
                let loss = loss_fn(&y, &trace.x0_ref)?;
                loss_value = loss.value().item();
                if loss.is_tracked() {
                    tape.backward(&loss)?;
                }
                tape.grad(&x)
            } else {
                let g = node_grad.take().expect("set by the previous step");
                Some(tape.vjp(&y, &x, &g, self.is_asymmetric(t))?)
            };
            node_grad = Some(grad.unwrap_or_else(|| Tensor::zeros(x.shape())));
            // Earlier steps can only matter through shift parameters.
            if !steps[..j].iter().any(|&(t, _)| self.is_asymmetric(t)) {
                break;
            }
        }
        Ok(loss_value)
    }

    /// Reference: the whole shifted chain on one tape and a single backward.
    /// Fails with [`Error::BudgetExceeded`] once the memory budget is crossed.
    pub fn vanilla_backward(&self, x_t: &Tensor<T>, shift: &dyn HShift<T>, loss_fn: &LossFn<'_, T>) -> Result<T> {
        let x0_ref = self.sample(x_t)?;
        let tape = Tape::new();
        let mut x = tape.constant(x_t.clone());
        for (t, tp) in self.plan.reverse_steps() {
            x = self.step(&x, t, tp, Some(shift), None)?;
            if memory::over_budget() {
                return Err(Error::BudgetExceeded {
                    budget: memory::budget().unwrap_or(0),
                });
            }
        }
        let loss = loss_fn(&x, &x0_ref)?;
        if loss.is_tracked() {
            tape.backward(&loss)?;
        }
        Ok(loss.value().item())
    }
}

/// Which gradient strategy a measurement used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algo {
    Vanilla,
    Checkpointed,
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algo::Vanilla => "vanilla",
            Algo::Checkpointed => "checkpointed",
        })
    }
}

/// Peak memory and timing of one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryReport {
    pub algo: Algo,
    pub m: usize,
    pub batch: usize,
    /// `None` when the run was stopped by the memory budget.
    pub peak_live_bytes: Option<usize>,
    pub mean_step_seconds: f64,
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::discovery::ShiftBlockConfig;

    fn sum_sq_loss<'t>(y: &Var<'t, f64>, _: &Tensor<f64>) -> Result<Var<'t, f64>> {
        Ok(y.sum_sq())
    }

    fn distance_loss<'t>(y: &Var<'t, f64>, r: &Tensor<f64>) -> Result<Var<'t, f64>> {
        Ok(y.sub(&y.tape().constant(r.clone()))?.sum_sq())
    }

    fn constant_loss<'t>(y: &Var<'t, f64>, _: &Tensor<f64>) -> Result<Var<'t, f64>> {
        Ok(y.tape().constant(Tensor::scalar(3.0)))
    }

    struct Models {
        dm: Denoiser<f64>,
        block: ShiftBlock<f64>,
        sched: NoiseSchedule,
    }

    fn models(seed: u64) -> Models {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dm = Denoiser::new(
            DenoiserConfig {
                data_dim: 6,
                hidden: 8,
                bottleneck: 3,
                time_dim: 4,
            },
            &mut rng,
        )
        .unwrap();
        for p in dm.params() {
            p.set_value(Tensor::randn(&p.shape(), &mut rng).map(|v| 0.5 * v)).unwrap();
        }
        let block = ShiftBlock::new(
            ShiftBlockConfig {
                bottleneck: 3,
                time_dim: 4,
                hidden: 5,
                directions: 2,
                max_magnitude: 2.0,
            },
            &mut rng,
        )
        .unwrap();
        Models {
            dm,
            block,
            sched: NoiseSchedule::linear(100, 1e-4, 0.02).unwrap(),
        }
    }

    #[test]
    fn node_count_and_replay() {
        let m = models(0);
        let chain = Chain::new(&m.dm, &m.sched, SamplerPlan::new(100, 4).unwrap(), 40).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x_t = Tensor::randn(&[2, 6], &mut rng);
        let shift = BlockShift::new(&m.block, vec![1], vec![1.0]);
        let trace = chain.generate_and_record(&x_t, &shift).unwrap();
        assert_eq!(trace.nodes.len(), 3);
        assert_eq!(*trace.nodes[0], x_t);
        // replaying each recorded step reproduces its successor
        let steps: Vec<_> = chain.plan().reverse_steps().collect();
        let tape = Tape::no_grad();
        for (j, &(t, tp)) in steps.iter().enumerate() {
            let x = tape.constant_rc(Rc::clone(&trace.nodes[j]));
            let y = chain.step(&x, t, tp, Some(&shift), None).unwrap();
            let expected = trace.nodes.get(j + 1).map(|n| (**n).clone()).unwrap_or(trace.x0_shifted.clone());
            assert_eq!(*y.value(), expected);
        }
    }

    #[test]
    fn zero_heads_reproduce_the_plain_chain() {
        let m = models(2);
        let chain = Chain::new(&m.dm, &m.sched, SamplerPlan::new(100, 6).unwrap(), 30).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x_t = Tensor::randn(&[3, 6], &mut rng);
        let shift = BlockShift::new(&m.block, vec![0, 1, 0], vec![1.5, -2.0, 0.3]);
        let trace = chain.generate_and_record(&x_t, &shift).unwrap();
        assert_eq!(trace.x0_shifted, trace.x0_ref);
        assert_eq!(trace.mean_abs_shift, 0.0);
    }

    #[test]
    fn empty_shifting_interval_is_plain_sampling() {
        let m = models(4);
        for p in m.block.params() {
            p.set_value(Tensor::full(&p.shape(), 0.3)).unwrap();
        }
        let chain = Chain::new(&m.dm, &m.sched, SamplerPlan::new(100, 5).unwrap(), 101).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x_t = Tensor::randn(&[2, 6], &mut rng);
        let shift = BlockShift::new(&m.block, vec![0], vec![2.0]);
        let trace = chain.generate_and_record(&x_t, &shift).unwrap();
        assert_eq!(trace.x0_shifted, chain.sample(&x_t).unwrap());
        assert!(Chain::new(&m.dm, &m.sched, SamplerPlan::new(100, 5).unwrap(), 0).is_err());
    }

    #[test]
    fn parameter_change_between_passes_is_detected() {
        let m = models(6);
        let chain = Chain::new(&m.dm, &m.sched, SamplerPlan::new(100, 3).unwrap(), 20).unwrap();
        let x_t = Tensor::randn(&[1, 6], &mut ChaCha8Rng::seed_from_u64(7));
        let shift = BlockShift::new(&m.block, vec![0], vec![1.0]);
        let trace = chain.generate_and_record(&x_t, &shift).unwrap();
        m.block.params()[0].update(|w| w[0] += 1.0);
        assert!(matches!(
            chain.checkpointed_backward(&trace, &shift, &sum_sq_loss),
            Err(Error::ParamChecksum { .. })
        ));
    }

    #[test]
    fn one_tape_alive_during_replay() {
        let m = models(8);
        for p in m.block.params() {
            p.set_value(Tensor::full(&p.shape(), 0.1)).unwrap();
        }
        let chain = Chain::new(&m.dm, &m.sched, SamplerPlan::new(100, 8).unwrap(), 10).unwrap();
        let x_t = Tensor::randn(&[2, 6], &mut ChaCha8Rng::seed_from_u64(9));
        let shift = BlockShift::new(&m.block, vec![1], vec![1.0]);
        let trace = chain.generate_and_record(&x_t, &shift).unwrap();
        let base = memory::live_tapes();
        memory::reset_peak();
        chain.checkpointed_backward(&trace, &shift, &distance_loss).unwrap();
        assert_eq!(memory::peak_tapes(), base + 1);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let m = models(10);
        for p in m.block.params() {
            p.set_value(Tensor::full(&p.shape(), 0.2)).unwrap();
        }
        let chain = Chain::new(&m.dm, &m.sched, SamplerPlan::new(100, 4).unwrap(), 10).unwrap();
        let x_t = Tensor::randn(&[2, 6], &mut ChaCha8Rng::seed_from_u64(11));
        let shift = BlockShift::new(&m.block, vec![0], vec![1.0]);
        let trace = chain.generate_and_record(&x_t, &shift).unwrap();
        assert_eq!(chain.checkpointed_backward(&trace, &shift, &constant_loss).unwrap(), 3.0);
        for p in m.block.params() {
            assert_eq!(p.grad_or_zeros().max_abs(), 0.0);
        }
    }

    #[test]
    fn inversion_then_sampling_is_close_for_fine_plans() {
        let m = models(12);
        // a gentler noise predictor, like a trained one
        for p in m.dm.params().iter().filter(|p| p.name().starts_with("denoiser.out")) {
            p.update(|w| w.iter_mut().for_each(|v| *v *= 0.1));
        }
        let chain = Chain::new(&m.dm, &m.sched, SamplerPlan::new(100, 101).unwrap(), 50).unwrap();
        let x0 = Tensor::randn(&[2, 6], &mut ChaCha8Rng::seed_from_u64(13)).map(|v| 0.5 * v);
        let back = chain.sample(&chain.invert(&x0).unwrap()).unwrap();
        let err = back.zip_map(&x0, |a, b| a - b).unwrap().max_abs();
        assert!(err < 0.01, "{err}");
    }

    #[test]
    fn checkpointed_matches_vanilla() {
        for (m_steps, t_stop) in [(2, 50), (4, 30), (8, 1), (8, 100), (5, 60)] {
            let m = models(20 + m_steps as u64);
            for p in m.block.params() {
                let v = Tensor::randn(&p.shape(), &mut ChaCha8Rng::seed_from_u64(p.value().len() as u64));
                p.set_value(v.map(|x| 0.3 * x)).unwrap();
            }
            let chain = Chain::new(&m.dm, &m.sched, SamplerPlan::new(100, m_steps).unwrap(), t_stop).unwrap();
            let x_t = Tensor::randn(&[3, 6], &mut ChaCha8Rng::seed_from_u64(21));
            let shift = BlockShift::new(&m.block, vec![1, 0, 1], vec![0.7, -1.2, 2.0]);
            let trace = chain.generate_and_record(&x_t, &shift).unwrap();
            let a = chain.checkpointed_backward(&trace, &shift, &distance_loss).unwrap();
            let ga: Vec<_> = m.block.params().iter().map(|p| p.grad_or_zeros()).collect();
            m.block.zero_grad();
            let b = chain.vanilla_backward(&x_t, &shift, &distance_loss).unwrap();
            assert_eq!(a, b);
            for (p, g) in m.block.params().iter().zip(&ga) {
                let v = p.grad_or_zeros();
                let scale = v.max_abs().max(1e-300);
                let err = v.zip_map(g, |x, y| x - y).unwrap().max_abs() / scale;
                assert!(err < 1e-9, "M={m_steps} {}: {err}", p.name());
            }
            m.block.zero_grad();
        }
    }
}
