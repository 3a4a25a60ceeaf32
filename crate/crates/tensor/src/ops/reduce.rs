use crate::error::{shape_err, Result};
use crate::float::Float;
use crate::tensor::{BackwardArgs, Tensor};

impl<T: Float> Tensor<T> {
    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            Vec::new(),
            vec![s],
            "sum",
            vec![self.clone()],
            Box::new(move |a: &BackwardArgs<'_, T>| vec![Some(vec![a.grad_out[0]; n])]),
        )
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel();
        let inv = T::one() / T::from_f64(n as f64);
        let s: T = self.data().iter().copied().sum::<T>() * inv;
        Tensor::from_op(
            Vec::new(),
            vec![s],
            "mean",
            vec![self.clone()],
            Box::new(move |a: &BackwardArgs<'_, T>| vec![Some(vec![a.grad_out[0] * inv; n])]),
        )
    }

    /// Global average pool: `[N, C, H, W] -> [N, C]`.
    pub fn mean_spatial(&self) -> Result<Tensor<T>> {
        if self.ndim() != 4 {
            return Err(shape_err("mean_spatial", format!("expected [N, C, H, W], got {:?}", self.shape())));
        }
        let (n, c) = (self.shape()[0], self.shape()[1]);
        let hw = self.shape()[2] * self.shape()[3];
        let inv = T::one() / T::from_f64(hw as f64);
        let data = self.data().chunks(hw).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        Ok(Tensor::from_op(
            vec![n, c],
            data,
            "mean_spatial",
            vec![self.clone()],
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let mut g = Vec::with_capacity(n * c * hw);
                for &go in a.grad_out {
                    g.extend(std::iter::repeat_n(go * inv, hw));
                }
                vec![Some(g)]
            }),
        ))
    }
}
