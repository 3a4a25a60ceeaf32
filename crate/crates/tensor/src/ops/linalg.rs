use crate::error::{shape_err, Result};
use crate::float::{gemm, Float, MatView};
use crate::tensor::{BackwardArgs, Tensor};

impl<T: Float> Tensor<T> {
    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = (self.shape(), rhs.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(shape_err(
                "matmul",
                format!("left {a:?} and right {b:?}: inner axes (left axis 1, right axis 0) must match"),
            ));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            &self.data(),
            MatView::dense(m, k),
            &rhs.data(),
            MatView::dense(k, n),
            &mut out,
            MatView::dense(m, n),
            false,
        );
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            "matmul",
            vec![self.clone(), rhs.clone()],
            Box::new(move |ar: &BackwardArgs<'_, T>| {
                let ga = ar.needs[0].then(|| {
                    let mut g = vec![T::zero(); m * k];
                    let b = ar.inputs[1].data();
                    gemm(
                        ar.grad_out,
                        MatView::dense(m, n),
                        &b,
                        MatView::dense(k, n).transposed(),
                        &mut g,
                        MatView::dense(m, k),
                        false,
                    );
                    g
                });
                let gb = ar.needs[1].then(|| {
                    let mut g = vec![T::zero(); k * n];
                    let a = ar.inputs[0].data();
                    gemm(
                        &a,
                        MatView::dense(m, k).transposed(),
                        ar.grad_out,
                        MatView::dense(m, n),
                        &mut g,
                        MatView::dense(k, n),
                        false,
                    );
                    g
                });
                vec![ga, gb]
            }),
        ))
    }
}
