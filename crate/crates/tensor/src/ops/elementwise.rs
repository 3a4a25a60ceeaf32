use crate::error::{shape_err, Result};
use crate::float::Float;
use crate::tensor::{BackwardArgs, Tensor};

fn same_shape<T: Float>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("operands have shapes {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<T: Float> Tensor<T> {
    fn unary(&self, op: &'static str, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + Send + Sync + 'static) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            op,
            vec![self.clone()],
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let x = a.inputs[0].data();
                let g = a.grad_out.iter().zip(x.iter()).zip(a.out).map(|((&g, &x), &y)| g * df(x, y));
                vec![Some(g.collect())]
            }),
        )
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| a + b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "add",
            vec![self.clone(), other.clone()],
            Box::new(|a: &BackwardArgs<'_, T>| vec![Some(a.grad_out.to_vec()), Some(a.grad_out.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| a - b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "sub",
            vec![self.clone(), other.clone()],
            Box::new(|a: &BackwardArgs<'_, T>| {
                vec![Some(a.grad_out.to_vec()), Some(a.grad_out.iter().map(|&g| -g).collect())]
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| a * b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "mul",
            vec![self.clone(), other.clone()],
            Box::new(|a: &BackwardArgs<'_, T>| {
                let x = a.inputs[0].data();
                let y = a.inputs[1].data();
                let gx = a.needs[0].then(|| a.grad_out.iter().zip(y.iter()).map(|(&g, &y)| g * y).collect());
                let gy = a.needs[1].then(|| a.grad_out.iter().zip(x.iter()).map(|(&g, &x)| g * x).collect());
                vec![gx, gy]
            }),
        ))
    }

    /// Adds `bias[C]` along axis 1 of a `[N, C, ...]` tensor.
    pub fn add_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() < 2 || bias.shape() != [s[1]] {
            return Err(shape_err(
                "add_bias",
                format!("bias of shape {:?} does not match axis 1 of input {:?}", bias.shape(), s),
            ));
        }
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let mut data = self.to_vec();
        {
            let b = bias.data();
            for i in 0..n {
                for (ch, &bv) in b.iter().enumerate() {
                    let start = (i * c + ch) * inner;
                    data[start..start + inner].iter_mut().for_each(|v| *v = *v + bv);
                }
            }
        }
        Ok(Tensor::from_op(
            s.to_vec(),
            data,
            "add_bias",
            vec![self.clone(), bias.clone()],
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let gb = a.needs[1].then(|| {
                    let mut gb = vec![T::zero(); c];
                    for i in 0..n {
                        for (ch, acc) in gb.iter_mut().enumerate() {
                            let start = (i * c + ch) * inner;
                            *acc = *acc + a.grad_out[start..start + inner].iter().copied().sum::<T>();
                        }
                    }
                    gb
                });
                vec![Some(a.grad_out.to_vec()), gb]
            }),
        ))
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            "relu",
            |x| if x > T::zero() || x.is_nan() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor<T> {
        let s = T::from_f64(slope);
        self.unary(
            "leaky_relu",
            move |x| if x > T::zero() { x } else { x * s },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary("tanh", |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary("sigmoid", sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    /// Natural logarithm.
    pub fn ln(&self) -> Tensor<T> {
        self.unary("ln", |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary("neg", |x| -x, |_, _| -T::one())
    }

    pub fn scale(&self, s: f64) -> Tensor<T> {
        let s = T::from_f64(s);
        self.unary("scale", move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor<T> {
        let s = T::from_f64(s);
        self.unary("add_scalar", move |x| x + s, |_, _| T::one())
    }

    /// `1 - x`.
    pub fn one_minus(&self) -> Tensor<T> {
        self.unary("one_minus", |x| T::one() - x, |_, _| -T::one())
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<T> {
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        self.unary(
            "clamp",
            // NaN passes through so that later finiteness checks still see it
            move |x| if x.is_nan() { x } else { x.max(lo).min(hi) },
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }
}

pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
