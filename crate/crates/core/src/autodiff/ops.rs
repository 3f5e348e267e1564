use std::rc::Rc;

use super::{sigmoid, BinKind, Op, Tape, UnaryKind, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Float, Tensor};

impl<'t, T: Float> Var<'t, T> {
    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::ForeignVariable)
        }
    }

    fn binary(&self, other: &Var<'t, T>, kind: BinKind, name: &'static str) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let (a, b) = (&*self.value, &*other.value);
        let f = |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let out = if a.shape() == b.shape() {
            a.zip_map(b, f)?
        } else if b.len() == 1 {
            let y = b.data()[0];
            a.map(|x| f(x, y))
        } else if a.len() == 1 {
            let x = a.data()[0];
            b.map(|y| f(x, y))
        } else {
            return Err(Error::shape(name, a.shape(), b.shape()));
        };
        let (sa, sb) = (self.src(), other.src());
        // Each gradient needs only the operands its rule reads.
        let keep_a = matches!(kind, BinKind::Mul | BinKind::Div) && sb.is_some();
        let keep_b = match kind {
            BinKind::Mul => sa.is_some(),
            BinKind::Div => true,
            _ => false,
        };
        Ok(self.tape.record(out, &[sa, sb], || Op::Binary {
            kind,
            a: sa,
            b: sb,
            av: keep_a.then(|| Rc::clone(&self.value)),
            bv: keep_b.then(|| Rc::clone(&other.value)),
            a_shape: self.value.shape().to_vec(),
            b_shape: other.value.shape().to_vec(),
        }))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinKind::Add, "add")
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinKind::Sub, "sub")
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinKind::Mul, "mul")
    }

    pub fn div(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinKind::Div, "div")
    }

    /// `self * factor`.
    pub fn scale(&self, factor: f64) -> Var<'t, T> {
        let f = T::from_f64(factor);
        let out = self.value.map(|x| x * f);
        let a = self.src();
        self.tape.record(out, &[a], || Op::Scale { a, factor: f })
    }

    /// `self + offset`.
    pub fn offset(&self, offset: f64) -> Var<'t, T> {
        let c = T::from_f64(offset);
        let out = self.value.map(|x| x + c);
        let a = self.src();
        self.tape.record(out, &[a], || Op::Offset { a })
    }

    fn unary(&self, kind: UnaryKind, f: impl Fn(T) -> T) -> Var<'t, T> {
        let out = Rc::new(self.value.map(f));
        let a = self.src();
        let input = Rc::clone(&self.value);
        self.tape.record_rc(out, &[a], |out| {
            let saved = match kind {
                UnaryKind::Neg => None,
                UnaryKind::Abs | UnaryKind::Log | UnaryKind::Silu => Some(input),
                UnaryKind::Exp | UnaryKind::Sqrt | UnaryKind::Tanh | UnaryKind::Sigmoid => {
                    Some(Rc::clone(out))
                }
            };
            Op::Unary { kind, a, saved }
        })
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.unary(UnaryKind::Neg, |x| -x)
    }

    pub fn abs(&self) -> Var<'t, T> {
        self.unary(UnaryKind::Abs, |x| x.abs())
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary(UnaryKind::Exp, |x| x.exp())
    }

    pub fn log(&self) -> Result<Var<'t, T>> {
        if let Some(v) = self.value.data().iter().find(|v| **v <= T::zero()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {v}"),
            });
        }
        Ok(self.unary(UnaryKind::Log, |x| x.ln()))
    }

    pub fn sqrt(&self) -> Result<Var<'t, T>> {
        if let Some(v) = self.value.data().iter().find(|v| **v < T::zero()) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative input {v}"),
            });
        }
        Ok(self.unary(UnaryKind::Sqrt, |x| x.sqrt()))
    }

    pub fn tanh(&self) -> Var<'t, T> {
        self.unary(UnaryKind::Tanh, |x| x.tanh())
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.unary(UnaryKind::Sigmoid, sigmoid)
    }

    pub fn silu(&self) -> Var<'t, T> {
        self.unary(UnaryKind::Silu, |x| x * sigmoid(x))
    }

    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let (a, b) = (&*self.value, &*other.value);
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let out = gemm(a, false, b, false);
        let (sa, sb) = (self.src(), other.src());
        Ok(self.tape.record(out, &[sa, sb], || Op::MatMul {
            a: sa,
            b: sb,
            av: sb.map(|_| Rc::clone(&self.value)),
            bv: sa.map(|_| Rc::clone(&other.value)),
        }))
    }

    /// Add a `[cols]` (or `[1, cols]`) row to every row of a `[rows, cols]` matrix.
    pub fn add_row(&self, row: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(row)?;
        let a = &*self.value;
        let r = &*row.value;
        if a.rank() != 2 || r.len() != a.shape()[1] || r.rank() > 2 {
            return Err(Error::shape("add_row", a.shape(), r.shape()));
        }
        let cols = a.shape()[1];
        let mut out = a.data().to_vec();
        for chunk in out.chunks_exact_mut(cols) {
            for (v, &b) in chunk.iter_mut().zip(r.data()) {
                *v += b;
            }
        }
        let out = Tensor::from_parts(a.shape().to_vec(), out);
        let (sa, sr) = (self.src(), row.src());
        Ok(self
            .tape
            .record(out, &[sa, sr], || Op::AddRow { a: sa, row: sr }))
    }

    /// Multiply row `i` of a rank-2 value by `scales[i]`.
    pub fn mul_rows(&self, scales: &[f64]) -> Result<Var<'t, T>> {
        let a = &*self.value;
        if a.rank() != 2 || a.shape()[0] != scales.len() {
            return Err(Error::shape("mul_rows", a.shape(), &[scales.len()]));
        }
        let scales: Vec<T> = scales.iter().map(|&s| T::from_f64(s)).collect();
        let cols = a.shape()[1];
        let mut out = a.data().to_vec();
        for (chunk, &s) in out.chunks_exact_mut(cols).zip(&scales) {
            for v in chunk {
                *v *= s;
            }
        }
        let out = Tensor::from_parts(a.shape().to_vec(), out);
        let sa = self.src();
        Ok(self.tape.record(out, &[sa], || Op::MulRows {
            a: sa,
            scales: Rc::new(scales),
        }))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let out = Tensor::scalar(self.value.sum());
        let a = self.src();
        self.tape.record(out, &[a], || Op::Sum { a })
    }

    pub fn mean(&self) -> Var<'t, T> {
        let out = Tensor::scalar(self.value.mean());
        let a = self.src();
        self.tape.record(out, &[a], || Op::Mean { a })
    }

    /// Squared L2 norm.
    pub fn sum_sq(&self) -> Var<'t, T> {
        let out = Tensor::scalar(self.value.data().iter().map(|&x| x * x).sum());
        let a = self.src();
        self.tape.record(out, &[a], || Op::SumSq {
            a,
            av: Rc::clone(&self.value),
        })
    }

    /// L1 norm.
    pub fn l1(&self) -> Var<'t, T> {
        let out = Tensor::scalar(self.value.data().iter().map(|&x| x.abs()).sum());
        let a = self.src();
        self.tape.record(out, &[a], || Op::L1 {
            a,
            av: Rc::clone(&self.value),
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value.reshaped(shape)?;
        let a = self.src();
        Ok(self.tape.record(out, &[a], || Op::Reshape { a }))
    }

    /// Rows `indices` of a rank-2 value (repeats allowed).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value.select_rows(indices)?;
        let a = self.src();
        let rows = self.value.shape()[0];
        Ok(self.tape.record(out, &[a], || Op::GatherRows {
            a,
            indices: Rc::new(indices.to_vec()),
            rows,
        }))
    }
}

impl<T: Float> Tape<T> {
    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[&Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or(Error::Empty("concat"))?;
        let rank = first.value.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis {
                op: "concat",
                axis,
                rank,
            });
        }
        let mut shape = first.value.shape().to_vec();
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            if !std::ptr::eq(p.tape, self) {
                return Err(Error::ForeignVariable);
            }
            let s = p.value.shape();
            let compatible = s.len() == rank
                && s.iter()
                    .zip(first.value.shape())
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", first.value.shape(), s));
            }
            sizes.push(s[axis]);
        }
        shape[axis] = sizes.iter().sum();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for (p, &size) in parts.iter().zip(&sizes) {
                let chunk = size * inner;
                data.extend_from_slice(&p.value.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::from_parts(shape, data);
        let srcs: Vec<_> = parts.iter().map(|p| p.src()).collect();
        Ok(self.record(out, &srcs, || Op::Concat {
            parts: srcs.clone(),
            axis,
            sizes,
        }))
    }
}
