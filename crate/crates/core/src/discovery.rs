//! Shift block, discriminator, reconstructor, their losses, and direction
//! post-processing.
//!
//! Direction indices are zero-based: `k` ranges over `0..K`.

use rand::Rng;

use crate::autodiff::{bce_with_logits, cross_entropy, l1_loss, Param, Tape, Var};
use crate::denoiser::time_embedding;
use crate::error::{Error, Result};
use crate::nn::{Linear, Module};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftBlockConfig {
    pub bottleneck: usize,
    pub time_dim: usize,
    pub hidden: usize,
    pub directions: usize,
    pub max_magnitude: f64,
}

/// Time-conditioned map from `(h, t)` to one bottleneck offset per direction.
///
/// The input map sees `h` concatenated with the sinusoidal time features;
/// each direction has its own output head, all starting at zero.
#[derive(Debug, Clone)]
pub struct ShiftBlock<T: Float> {
    cfg: ShiftBlockConfig,
    input: Linear<T>,
    heads: Vec<Linear<T>>,
}

impl<T: Float> ShiftBlock<T> {
    pub fn new(cfg: ShiftBlockConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.directions == 0 {
            return Err(Error::Config("the shift block needs at least one direction".into()));
        }
        if !(cfg.max_magnitude > 0.0) {
            return Err(Error::Config("max_magnitude must be positive".into()));
        }
        let input = Linear::new("shift.input", cfg.bottleneck + cfg.time_dim, cfg.hidden, rng);
        let heads = (0..cfg.directions)
            .map(|k| Linear::zeros(&format!("shift.head{k}"), cfg.hidden, cfg.bottleneck))
            .collect();
        Ok(ShiftBlock { cfg, input, heads })
    }

    pub fn config(&self) -> &ShiftBlockConfig {
        &self.cfg
    }

    pub fn directions(&self) -> usize {
        self.heads.len()
    }

    pub fn head(&self, k: usize) -> Option<&Linear<T>> {
        self.heads.get(k)
    }

    /// `Δh_t^k` for every row of `h`; `ks` holds one direction per row or a
    /// single direction for all rows.
    pub fn delta<'t>(&self, h: &Var<'t, T>, t: usize, ks: &[usize]) -> Result<Var<'t, T>> {
        let rows = h.shape()[0];
        if h.value().rank() != 2 || h.shape()[1] != self.cfg.bottleneck {
            return Err(Error::shape("shift_delta", h.shape(), &[rows, self.cfg.bottleneck]));
        }
        if ks.len() != 1 && ks.len() != rows {
            return Err(Error::shape("shift_delta directions", h.shape(), &[ks.len()]));
        }
        if let Some(&bad) = ks.iter().find(|&&k| k >= self.heads.len()) {
            return Err(Error::IndexOutOfRange {
                op: "shift_delta",
                index: bad,
                bound: self.heads.len(),
            });
        }
        let tape = h.tape();
        let temb = time_embedding::<T>(&[t], self.cfg.time_dim);
        let temb = Tensor::vstack(&vec![&temb; rows])?;
        let z = self
            .input
            .forward(&tape.concat(&[h, &tape.constant(temb)], 1)?)?
            .silu();
        if ks.len() == 1 || ks.iter().all(|&k| k == ks[0]) {
            return self.heads[ks[0]].forward(&z);
        }
        // Group rows by direction, run each head once, then restore row order.
        let mut order = Vec::with_capacity(rows);
        let mut parts = Vec::new();
        for k in 0..self.heads.len() {
            let idx: Vec<usize> = (0..rows).filter(|&i| ks[i] == k).collect();
            if idx.is_empty() {
                continue;
            }
            parts.push(self.heads[k].forward(&z.gather_rows(&idx)?)?);
            order.extend(idx);
        }
        let refs: Vec<&Var<'t, T>> = parts.iter().collect();
        let stacked = tape.concat(&refs, 0)?;
        let mut inverse = vec![0; rows];
        for (pos, &row) in order.iter().enumerate() {
            inverse[row] = pos;
        }
        stacked.gather_rows(&inverse)
    }

    /// `h + Σ s_i Δh^{k_i}` for a list of edits.
    pub fn shift<'t>(&self, h: &Var<'t, T>, t: usize, edits: &[Edit]) -> Result<Var<'t, T>> {
        let mut deltas = Vec::with_capacity(edits.len());
        for e in edits {
            if e.magnitudes.iter().any(|s| s.abs() > self.cfg.max_magnitude) {
                log::warn!(
                    "shift magnitude outside [-{0}, {0}]",
                    self.cfg.max_magnitude
                );
            }
            deltas.push((e.magnitudes.as_slice(), self.delta(h, t, &e.directions)?));
        }
        let refs: Vec<(&[f64], &Var<'t, T>)> = deltas.iter().map(|(s, d)| (*s, d)).collect();
        apply_shift(h, &refs)
    }
}

impl<T: Float> Module<T> for ShiftBlock<T> {
    fn params(&self) -> Vec<Param<T>> {
        let mut p = self.input.params();
        for h in &self.heads {
            p.extend(h.params());
        }
        p
    }
}

/// One direction per row (or one for all rows) with matching magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct Edit {
    pub directions: Vec<usize>,
    pub magnitudes: Vec<f64>,
}

impl Edit {
    pub fn uniform(k: usize, s: f64) -> Self {
        Edit {
            directions: vec![k],
            magnitudes: vec![s],
        }
    }
}

/// `h + Σ_i s_i * Δ_i`. Magnitudes are per row, or a single value.
pub fn apply_shift<'t, T: Float>(h: &Var<'t, T>, deltas: &[(&[f64], &Var<'t, T>)]) -> Result<Var<'t, T>> {
    let rows = h.shape()[0];
    let mut out = h.clone();
    for (s, d) in deltas {
        if d.shape() != h.shape() {
            return Err(Error::shape("apply_shift", h.shape(), d.shape()));
        }
        let scaled = match s.len() {
            1 => d.scale(s[0]),
            n if n == rows => d.mul_rows(s)?,
            n => return Err(Error::shape("apply_shift magnitudes", h.shape(), &[n])),
        };
        out = out.add(&scaled)?;
    }
    Ok(out)
}

/// Dense classifier of clean samples, one logit per row.
#[derive(Debug, Clone)]
pub struct Discriminator<T: Float> {
    layers: [Linear<T>; 3],
}

impl<T: Float> Discriminator<T> {
    /// The last layer starts at zero so every logit is 0 initially.
    pub fn new(data_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Discriminator {
            layers: [
                Linear::new("disc.l1", data_dim, hidden, rng),
                Linear::new("disc.l2", hidden, hidden, rng),
                Linear::zeros("disc.l3", hidden, 1),
            ],
        }
    }

    pub fn forward<'t>(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.layers[0].forward(x)?.silu();
        let b = self.layers[1].forward(&a)?.silu();
        self.layers[2].forward(&b)
    }
}

impl<T: Float> Module<T> for Discriminator<T> {
    fn params(&self) -> Vec<Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
}

/// Predicts the direction index and magnitude from `(shifted, unshifted)`.
#[derive(Debug, Clone)]
pub struct Reconstructor<T: Float> {
    trunk: [Linear<T>; 3],
    class_head: Linear<T>,
    shift_head: Linear<T>,
}

impl<T: Float> Reconstructor<T> {
    pub fn new(data_dim: usize, hidden: usize, directions: usize, rng: &mut impl Rng) -> Self {
        Reconstructor {
            trunk: [
                Linear::new("recon.l1", 2 * data_dim, hidden, rng),
                Linear::new("recon.l2", hidden, hidden, rng),
                Linear::new("recon.l3", hidden, hidden, rng),
            ],
            class_head: Linear::new("recon.class", hidden, directions, rng),
            shift_head: Linear::new("recon.shift", hidden, 1, rng),
        }
    }

    pub fn directions(&self) -> usize {
        self.class_head.fan_out()
    }

    /// `(logits [B, K], shift [B, 1])`.
    pub fn forward<'t>(&self, shifted: &Var<'t, T>, original: &Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let mut z = shifted.tape().concat(&[shifted, original], 1)?;
        for l in &self.trunk {
            z = l.forward(&z)?.silu();
        }
        Ok((self.class_head.forward(&z)?, self.shift_head.forward(&z)?))
    }
}

impl<T: Float> Module<T> for Reconstructor<T> {
    fn params(&self) -> Vec<Param<T>> {
        let mut p: Vec<_> = self.trunk.iter().flat_map(|l| l.params()).collect();
        p.extend(self.class_head.params());
        p.extend(self.shift_head.params());
        p
    }
}

/// `BCE(D(x0), 1) + BCE(D(x0_shifted), 0)`, each averaged over the batch.
pub fn discriminator_loss<'t, T: Float>(
    d: &Discriminator<T>,
    x0: &Var<'t, T>,
    x0_shifted: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    let real = bce_with_logits(&d.forward(x0)?, &[1.0])?;
    let fake = bce_with_logits(&d.forward(x0_shifted)?, &[0.0])?;
    real.add(&fake)
}

/// `BCE(D(x0_shifted), 1)`.
pub fn generator_loss<'t, T: Float>(d: &Discriminator<T>, x0_shifted: &Var<'t, T>) -> Result<Var<'t, T>> {
    bce_with_logits(&d.forward(x0_shifted)?, &[1.0])
}

/// Reconstruction loss split into its weighted parts.
pub struct ReconstructionLoss<'t, T: Float> {
    pub total: Var<'t, T>,
    pub class_term: Var<'t, T>,
    pub shift_term: Var<'t, T>,
}

/// `λ1 CE(logits, k) + λ2 L1(shift, s)`. `ks` and `ss` are per row or single.
#[allow(clippy::too_many_arguments)]
pub fn reconstruction_loss<'t, T: Float>(
    r: &Reconstructor<T>,
    x0_shifted: &Var<'t, T>,
    x0: &Var<'t, T>,
    ks: &[usize],
    ss: &[f64],
    lambda_class: f64,
    lambda_shift: f64,
) -> Result<ReconstructionLoss<'t, T>> {
    let rows = x0.shape()[0];
    let expand_k = |v: &[usize]| if v.len() == 1 { vec![v[0]; rows] } else { v.to_vec() };
    let expand_s = |v: &[f64]| if v.len() == 1 { vec![v[0]; rows] } else { v.to_vec() };
    let (ks, ss) = (expand_k(ks), expand_s(ss));
    let (logits, shift) = r.forward(x0_shifted, x0)?;
    let ce = cross_entropy(&logits, &ks)?;
    let target = x0.tape().constant(Tensor::from_f64(&[rows, 1], &ss)?);
    let l1 = l1_loss(&shift, &target)?;
    let class_term = ce.scale(lambda_class);
    let shift_term = l1.scale(lambda_shift);
    Ok(ReconstructionLoss {
        total: class_term.add(&shift_term)?,
        class_term,
        shift_term,
    })
}

/// `γ / (γ + |s|) * ||x0_shifted - x0||_1`, averaged over rows.
pub fn weighted_l1_loss<'t, T: Float>(
    x0_shifted: &Var<'t, T>,
    x0: &Var<'t, T>,
    ss: &[f64],
    gamma: f64,
) -> Result<Var<'t, T>> {
    if !(gamma > 0.0) {
        return Err(Error::Domain {
            op: "weighted_l1_loss",
            detail: format!("gamma must be positive, got {gamma}"),
        });
    }
    let rows = x0.shape()[0];
    let weights: Vec<f64> = (0..rows)
        .map(|i| {
            let s = if ss.len() == 1 { ss[0] } else { ss[i] };
            gamma / (gamma + s.abs())
        })
        .collect();
    Ok(x0_shifted
        .sub(x0)?
        .abs()
        .mul_rows(&weights)?
        .sum()
        .scale(1.0 / rows as f64))
}

/// Per-timestep mean of `Δh_t^k` over a batch of bottleneck activations.
///
/// `h_per_step[j]` holds `[N, d_h]` activations at `timesteps[j]`.
pub fn mean_direction<T: Float>(
    block: &ShiftBlock<T>,
    timesteps: &[usize],
    h_per_step: &[Tensor<T>],
    k: usize,
) -> Result<Vec<Tensor<T>>> {
    if h_per_step.is_empty() {
        return Err(Error::Empty("mean_direction"));
    }
    if timesteps.len() != h_per_step.len() {
        return Err(Error::shape("mean_direction", &[timesteps.len()], &[h_per_step.len()]));
    }
    let tape = Tape::no_grad();
    let mut out = Vec::with_capacity(timesteps.len());
    for (&t, h) in timesteps.iter().zip(h_per_step) {
        if h.rank() != 2 || h.shape()[0] == 0 {
            return Err(Error::Empty("mean_direction"));
        }
        let d = block.delta(&tape.constant(h.clone()), t, &[k])?;
        out.push(column_mean(d.value()));
    }
    Ok(out)
}

/// `(1/T_s) Σ_t mean_t`.
pub fn global_direction<T: Float>(mean: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = mean.first().ok_or(Error::Empty("global_direction"))?;
    let mut acc = Tensor::zeros(first.shape());
    for m in mean {
        acc.add_assign(m)?;
    }
    let n = T::from_f64(mean.len() as f64);
    Ok(acc.map(|v| v / n))
}

fn column_mean<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let (rows, cols) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![T::zero(); cols];
    for r in x.data().chunks_exact(cols) {
        for (o, &v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    let n = T::from_f64(rows as f64);
    Tensor::new(&[1, cols], out.into_iter().map(|v| v / n).collect()).expect("shape")
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn cfg(k: usize) -> ShiftBlockConfig {
        ShiftBlockConfig {
            bottleneck: 4,
            time_dim: 4,
            hidden: 6,
            directions: k,
            max_magnitude: 2.0,
        }
    }

    fn randomize<T: Float>(m: &impl Module<T>, rng: &mut ChaCha8Rng) {
        for p in m.params() {
            p.set_value(Tensor::randn(&p.shape(), rng)).unwrap();
        }
    }

    #[test]
    fn fresh_block_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = ShiftBlock::<f64>::new(cfg(3), &mut rng).unwrap();
        assert_eq!(b.directions(), 3);
        for k in 0..3 {
            let h = b.head(k).unwrap();
            assert_eq!(h.weight.value().max_abs(), 0.0);
            assert_eq!(h.bias.value().max_abs(), 0.0);
        }
        let tape = Tape::no_grad();
        let h = tape.constant(Tensor::randn(&[5, 4], &mut rng));
        let d = b.delta(&h, 123, &[0, 1, 2, 1, 0]).unwrap();
        assert_eq!(d.shape(), &[5, 4]);
        assert_eq!(d.value().max_abs(), 0.0);
        assert!(matches!(b.delta(&h, 1, &[3]), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn per_row_directions_match_single_direction_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = ShiftBlock::<f64>::new(cfg(3), &mut rng).unwrap();
        randomize(&b, &mut rng);
        let tape = Tape::no_grad();
        let h = Tensor::randn(&[4, 4], &mut rng);
        let ks = [2, 0, 2, 1];
        let mixed = b.delta(&tape.constant(h.clone()), 50, &ks).unwrap();
        for (i, &k) in ks.iter().enumerate() {
            let single = b.delta(&tape.constant(h.row(i).unwrap()), 50, &[k]).unwrap();
            let diff = single.value().zip_map(&mixed.value().row(i).unwrap(), |a, c| a - c).unwrap();
            assert!(diff.max_abs() < 1e-12);
        }
        let d0 = b.delta(&tape.constant(h.clone()), 50, &[0]).unwrap();
        let d1 = b.delta(&tape.constant(h.clone()), 50, &[1]).unwrap();
        assert_ne!(d0.value(), d1.value());
    }

    #[test]
    fn gradients_reach_only_the_used_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = ShiftBlock::<f64>::new(cfg(3), &mut rng).unwrap();
        randomize(&b, &mut rng);
        let tape = Tape::new();
        let h = tape.constant(Tensor::randn(&[3, 4], &mut rng));
        tape.backward(&b.delta(&h, 9, &[1]).unwrap().sum_sq()).unwrap();
        assert!(b.head(0).unwrap().weight.grad().is_none());
        assert!(b.head(2).unwrap().weight.grad().is_none());
        assert!(b.head(1).unwrap().weight.grad().unwrap().max_abs() > 0.0);
        assert!(b.input.weight.grad().unwrap().max_abs() > 0.0);
    }

    #[test]
    fn apply_shift_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::<f64>::no_grad();
        let h = tape.constant(Tensor::randn(&[2, 4], &mut rng));
        let d1 = tape.constant(Tensor::randn(&[2, 4], &mut rng));
        let d2 = tape.constant(Tensor::randn(&[2, 4], &mut rng));
        assert_eq!(apply_shift(&h, &[(&[0.0], &d1)]).unwrap().value(), h.value());
        let joint = apply_shift(&h, &[(&[0.5], &d1), (&[-1.5], &d2)]).unwrap();
        let seq = apply_shift(&apply_shift(&h, &[(&[0.5], &d1)]).unwrap(), &[(&[-1.5], &d2)]).unwrap();
        assert_eq!(joint.value(), seq.value());
        let bad = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(apply_shift(&h, &[(&[1.0], &bad)]).is_err());
    }

    proptest! {
        #[test]
        fn shift_is_linear_in_magnitude(seed in any::<u64>(), s in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tape = Tape::<f64>::no_grad();
            let h = Tensor::randn(&[3, 4], &mut rng);
            let d = tape.constant(Tensor::randn(&[3, 4], &mut rng));
            let hv = tape.constant(h.clone());
            let one = apply_shift(&hv, &[(&[s], &d)]).unwrap();
            let two = apply_shift(&hv, &[(&[2.0 * s], &d)]).unwrap();
            // offsets are s*Δ and 2s*Δ before adding h
            let off1 = d.value().map(|v| s * v);
            let off2 = d.value().map(|v| 2.0 * s * v);
            prop_assert_eq!(off2.clone(), off1.map(|v| 2.0 * v));
            let r1 = one.value().zip_map(&h, |a, b| a - b).unwrap();
            let r2 = two.value().zip_map(&h, |a, b| a - b).unwrap();
            let err = r2.zip_map(&r1, |a, b| a - 2.0 * b).unwrap().max_abs();
            prop_assert!(err <= 1e-12 * (1.0 + h.max_abs() + off2.max_abs()));
        }
    }

    #[test]
    fn equilibrium_losses_at_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = Discriminator::<f64>::new(6, 5, &mut rng);
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::randn(&[4, 6], &mut rng));
        let y = tape.constant(Tensor::randn(&[4, 6], &mut rng));
        let ld = discriminator_loss(&d, &x, &y).unwrap().value().item();
        let lg = generator_loss(&d, &y).unwrap().value().item();
        assert_eq!(ld, 2.0 * 2f64.ln());
        assert_eq!(lg, 2f64.ln());
    }

    #[test]
    fn discriminator_loss_on_identical_inputs_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = Discriminator::<f64>::new(6, 5, &mut rng);
        let x = Tensor::randn(&[4, 6], &mut rng);
        let tape = Tape::new();
        let l = discriminator_loss(&d, &tape.constant(x.clone()), &tape.constant(x)).unwrap();
        tape.backward(&l).unwrap();
        for p in d.params() {
            assert_eq!(p.grad_or_zeros().max_abs(), 0.0, "{}", p.name());
        }
    }

    #[test]
    fn frozen_discriminator_passes_gradient_to_input_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = Discriminator::<f64>::new(6, 5, &mut rng);
        randomize(&d, &mut rng);
        d.set_requires_grad(false);
        let tape = Tape::new();
        let x = tape.input(Tensor::randn(&[3, 6], &mut rng));
        tape.backward(&generator_loss(&d, &x).unwrap()).unwrap();
        assert!(tape.grad(&x).unwrap().max_abs() > 0.0);
        assert!(d.params().iter().all(|p| p.grad().is_none()));
    }

    #[test]
    fn bce_limits() {
        let tape = Tape::<f64>::no_grad();
        let big = tape.constant(Tensor::from_f64(&[1, 1], &[40.0]).unwrap());
        assert!(bce_with_logits(&big, &[1.0]).unwrap().value().item() < 1e-15);
        let small = tape.constant(Tensor::from_f64(&[1, 1], &[-40.0]).unwrap());
        let a = bce_with_logits(&big, &[1.0]).unwrap().value().item()
            + bce_with_logits(&small, &[0.0]).unwrap().value().item();
        assert!(a < 2.0 * 2f64.ln());
    }

    #[test]
    fn reconstruction_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = Reconstructor::<f64>::new(3, 4, 5, &mut rng);
        // uniform logits and an exact shift estimate
        for l in [&r.class_head, &r.shift_head] {
            l.weight.set_value(Tensor::zeros(&l.weight.shape())).unwrap();
            l.bias.set_value(Tensor::zeros(&l.bias.shape())).unwrap();
        }
        r.shift_head.bias.set_value(Tensor::full(&[1], 1.5)).unwrap();
        let tape = Tape::no_grad();
        let a = tape.constant(Tensor::randn(&[2, 3], &mut rng));
        let b = tape.constant(Tensor::randn(&[2, 3], &mut rng));
        let l = reconstruction_loss(&r, &a, &b, &[0, 4], &[1.5], 0.1, 0.1).unwrap();
        assert!((l.total.value().item() - 0.1 * 5f64.ln()).abs() < 1e-15);
        assert_eq!(l.shift_term.value().item(), 0.0);
        let zero = reconstruction_loss(&r, &a, &b, &[1], &[-2.0], 0.0, 0.0).unwrap();
        assert_eq!(zero.total.value().item(), 0.0);
        assert!(reconstruction_loss(&r, &a, &b, &[5], &[0.0], 0.1, 0.1).is_err());
        assert_eq!(r.directions(), 5);
    }

    #[test]
    fn weighted_l1_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tape = Tape::<f64>::no_grad();
        let a = tape.constant(Tensor::randn(&[2, 3], &mut rng));
        let b = tape.constant(Tensor::randn(&[2, 3], &mut rng));
        assert_eq!(weighted_l1_loss(&a, &a, &[3.0], 1.0).unwrap().value().item(), 0.0);
        let plain = a.value().zip_map(b.value(), |x, y| (x - y).abs()).unwrap().sum() / 2.0;
        let w0 = weighted_l1_loss(&a, &b, &[0.0], 0.7).unwrap().value().item();
        assert!((w0 - plain).abs() < 1e-14);
        let half = weighted_l1_loss(&a, &b, &[-0.7], 0.7).unwrap().value().item();
        assert!((half - 0.5 * plain).abs() < 1e-14);
        assert!(weighted_l1_loss(&a, &b, &[1.0], 0.0).is_err());
    }

    #[test]
    fn mean_and_global_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = ShiftBlock::<f64>::new(cfg(2), &mut rng).unwrap();
        randomize(&b, &mut rng);
        let h1 = Tensor::randn(&[1, 4], &mut rng);
        let h2 = Tensor::randn(&[1, 4], &mut rng);
        let m = mean_direction(&b, &[700, 500], &[h1.clone(), h2], 1).unwrap();
        let tape = Tape::no_grad();
        assert_eq!(&m[0], b.delta(&tape.constant(h1), 700, &[1]).unwrap().value());
        let same = vec![m[0].clone(); 3];
        let g = global_direction(&same).unwrap();
        assert!(g.zip_map(&m[0], |a, c| a - c).unwrap().max_abs() < 1e-15);
        assert!(global_direction::<f64>(&[]).is_err());
        assert!(mean_direction::<f64>(&b, &[], &[], 0).is_err());
    }
}
