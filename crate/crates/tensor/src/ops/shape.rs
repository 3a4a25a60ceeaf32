use crate::error::{shape_err, Result};
use crate::float::Float;
use crate::tensor::{numel, BackwardArgs, Tensor};

impl<T: Float> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} ({} values) as {:?}", self.shape(), self.numel(), shape),
            ));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            "reshape",
            vec![self.clone()],
            Box::new(|a: &BackwardArgs<'_, T>| vec![Some(a.grad_out.to_vec())]),
        ))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no tensors given"))?;
        let rank = first.ndim();
        if axis >= rank {
            return Err(shape_err("concat", format!("axis {axis} out of range for rank {rank}")));
        }
        for p in parts {
            let ok = p.ndim() == rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err(
                    "concat",
                    format!("shape {:?} disagrees with {:?} off axis {axis}", p.shape(), first.shape()),
                ));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        {
            let guards: Vec<_> = parts.iter().map(|p| p.data()).collect();
            for o in 0..outer {
                for (g, &w) in guards.iter().zip(&widths) {
                    data.extend_from_slice(&g[o * w..(o + 1) * w]);
                }
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total / inner;
        Ok(Tensor::from_op(
            shape,
            data,
            "concat",
            parts.to_vec(),
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let mut offsets = Vec::with_capacity(widths.len());
                let mut acc = 0;
                for &w in &widths {
                    offsets.push(acc);
                    acc += w;
                }
                widths
                    .iter()
                    .zip(&offsets)
                    .zip(a.needs)
                    .map(|((&w, &off), &need)| {
                        need.then(|| {
                            let mut g = Vec::with_capacity(outer * w);
                            for o in 0..outer {
                                let base = o * total + off;
                                g.extend_from_slice(&a.grad_out[base..base + w]);
                            }
                            g
                        })
                    })
                    .collect()
            }),
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let s = self.shape().to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(shape_err(
                "narrow",
                format!("range {start}..{} invalid on axis {axis} of {:?}", start + len, s),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let row = s[axis] * inner;
        let (off, w) = (start * inner, len * inner);
        let mut data = Vec::with_capacity(outer * w);
        {
            let d = self.data();
            for o in 0..outer {
                data.extend_from_slice(&d[o * row + off..o * row + off + w]);
            }
        }
        let mut shape = s.clone();
        shape[axis] = len;
        Ok(Tensor::from_op(
            shape,
            data,
            "narrow",
            vec![self.clone()],
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let mut g = vec![T::zero(); outer * row];
                for o in 0..outer {
                    g[o * row + off..o * row + off + w].copy_from_slice(&a.grad_out[o * w..(o + 1) * w]);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Tiles `[N, E]` into `[N, E, h, w]`.
    pub fn broadcast_spatial(&self, h: usize, w: usize) -> Result<Tensor<T>> {
        if self.ndim() != 2 {
            return Err(shape_err("broadcast_spatial", format!("expected [N, E], got {:?}", self.shape())));
        }
        let (n, e) = (self.shape()[0], self.shape()[1]);
        let hw = h * w;
        let mut data = Vec::with_capacity(n * e * hw);
        for &v in self.data().iter() {
            data.extend(std::iter::repeat_n(v, hw));
        }
        Ok(Tensor::from_op(
            vec![n, e, h, w],
            data,
            "broadcast_spatial",
            vec![self.clone()],
            Box::new(move |a: &BackwardArgs<'_, T>| {
                vec![Some(a.grad_out.chunks(hw).map(|c| c.iter().copied().sum()).collect())]
            }),
        ))
    }
}
