use crate::error::{shape_err, Result, TensorError};
use crate::float::Float;
use crate::tensor::{BackwardArgs, Tensor};

/// Numerically stable log-softmax of one row.
pub fn log_softmax<T: Float>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    row.iter().map(|&v| v - lse).collect()
}

impl<T: Float> Tensor<T> {
    /// Row lookup: `table[V, D]` indexed by `ids` gives `[ids.len(), D]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor<T>> {
        if self.ndim() != 2 {
            return Err(shape_err("gather_rows", format!("table must be [V, D], got {:?}", self.shape())));
        }
        let (v, d) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Index { op: "gather_rows", index: bad, bound: v });
        }
        if ids.is_empty() {
            return Err(shape_err("gather_rows", "no ids given"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        {
            let t = self.data();
            for &i in ids {
                data.extend_from_slice(&t[i * d..(i + 1) * d]);
            }
        }
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            vec![ids.len(), d],
            data,
            "gather_rows",
            vec![self.clone()],
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let mut g = vec![T::zero(); v * d];
                for (r, &i) in ids.iter().enumerate() {
                    for (dst, &src) in g[i * d..(i + 1) * d].iter_mut().zip(&a.grad_out[r * d..(r + 1) * d]) {
                        *dst = *dst + src;
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// `sum_i weights[i] * -log softmax(logits[i])[targets[i]]` for `logits[N, V]`.
    pub fn weighted_nll(&self, targets: &[usize], weights: &[T]) -> Result<Tensor<T>> {
        if self.ndim() != 2 {
            return Err(shape_err("weighted_nll", format!("logits must be [N, V], got {:?}", self.shape())));
        }
        let (n, v) = (self.shape()[0], self.shape()[1]);
        if targets.len() != n || weights.len() != n {
            return Err(shape_err(
                "weighted_nll",
                format!("{n} rows (logits axis 0) but {} targets and {} weights", targets.len(), weights.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::Index { op: "weighted_nll", index: bad, bound: v });
        }
        let mut loss = T::zero();
        let mut probs = Vec::with_capacity(n * v);
        {
            let d = self.data();
            for i in 0..n {
                let lp = log_softmax(&d[i * v..(i + 1) * v]);
                loss = loss - weights[i] * lp[targets[i]];
                probs.extend(lp.into_iter().map(|x| x.exp()));
            }
        }
        let targets = targets.to_vec();
        let weights = weights.to_vec();
        Ok(Tensor::from_op(
            Vec::new(),
            vec![loss],
            "weighted_nll",
            vec![self.clone()],
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let go = a.grad_out[0];
                let mut g = probs.clone();
                for i in 0..n {
                    g[i * v + targets[i]] = g[i * v + targets[i]] - T::one();
                    let s = go * weights[i];
                    g[i * v..(i + 1) * v].iter_mut().for_each(|x| *x = *x * s);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Mean softmax cross-entropy over the rows of `logits[N, V]`.
    pub fn softmax_cross_entropy(&self, targets: &[usize]) -> Result<Tensor<T>> {
        let n = targets.len().max(1);
        let w = vec![T::one() / T::from_f64(n as f64); targets.len()];
        self.weighted_nll(targets, &w)
    }

    /// Per-channel normalisation of `[N, C, ...]` over every axis except 1.
    /// With `stats = None` the batch mean and biased variance are used;
    /// otherwise the given `(mean, var)` are treated as constants. Returns the
    /// output and the statistics that were applied.
    pub fn batch_norm(&self, stats: Option<(&[T], &[T])>, eps: f64) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
        let s = self.shape().to_vec();
        if s.len() < 2 {
            return Err(shape_err("batch_norm", format!("expected [N, C, ...], got {s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let count = T::from_f64((n * inner) as f64);
        let x = self.to_vec();
        let planes = |ch: usize| (0..n).map(move |i| (i * c + ch) * inner);
        let (mean, var) = match stats {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(shape_err(
                        "batch_norm",
                        format!("{c} channels (axis 1) but {} means and {} variances", m.len(), v.len()),
                    ));
                }
                (m.to_vec(), v.to_vec())
            }
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let m = planes(ch).map(|p| x[p..p + inner].iter().copied().sum::<T>()).sum::<T>() / count;
                    let v =
                        planes(ch).map(|p| x[p..p + inner].iter().map(|&v| (v - m) * (v - m)).sum::<T>()).sum::<T>()
                            / count;
                    mean[ch] = m;
                    var[ch] = v;
                }
                (mean, var)
            }
        };
        let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + T::from_f64(eps)).sqrt()).collect();
        let mut out = x;
        for ch in 0..c {
            for p in planes(ch) {
                out[p..p + inner].iter_mut().for_each(|v| *v = (*v - mean[ch]) * inv[ch]);
            }
        }
        let batch_stats = stats.is_none();
        let xhat = if batch_stats { out.clone() } else { Vec::new() };
        let y = Tensor::from_op(
            s,
            out,
            "batch_norm",
            vec![self.clone()],
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let g = a.grad_out;
                let mut gx = vec![T::zero(); g.len()];
                for (ch, &inv) in inv.iter().enumerate() {
                    // dx = (g - mean(g) - xhat * mean(g * xhat)) / sigma under batch statistics
                    let (mut mg, mut mgx) = (T::zero(), T::zero());
                    if batch_stats {
                        for p in (0..n).map(|i| (i * c + ch) * inner) {
                            for k in p..p + inner {
                                mg = mg + g[k];
                                mgx = mgx + g[k] * xhat[k];
                            }
                        }
                        mg = mg / count;
                        mgx = mgx / count;
                    }
                    for p in (0..n).map(|i| (i * c + ch) * inner) {
                        for k in p..p + inner {
                            let centred = if batch_stats { g[k] - mg - xhat[k] * mgx } else { g[k] };
                            gx[k] = centred * inv;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        );
        Ok((y, mean, var))
    }

    /// Minibatch standard deviation of `[N, C, H, W]`: the standard deviation
    /// over axis 0 of every feature, averaged over features and broadcast to
    /// a `[N, 1, H, W]` channel.
    pub fn minibatch_stddev(&self, eps: f64) -> Result<Tensor<T>> {
        let s = self.shape().to_vec();
        if s.len() != 4 {
            return Err(shape_err("minibatch_stddev", format!("expected [N, C, H, W], got {s:?}")));
        }
        let (n, f, plane) = (s[0], s[1] * s[2] * s[3], s[2] * s[3]);
        let nt = T::from_f64(n as f64);
        let x = self.to_vec();
        let mut mean = vec![T::zero(); f];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(&x[i * f..(i + 1) * f]) {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / nt);
        let mut sd = vec![T::zero(); f];
        for i in 0..n {
            for ((d, &v), &m) in sd.iter_mut().zip(&x[i * f..(i + 1) * f]).zip(&mean) {
                *d = *d + (v - m) * (v - m);
            }
        }
        sd.iter_mut().for_each(|d| *d = (*d / nt + T::from_f64(eps)).sqrt());
        let avg = sd.iter().copied().sum::<T>() / T::from_f64(f as f64);
        Ok(Tensor::from_op(
            vec![n, 1, s[2], s[3]],
            vec![avg; n * plane],
            "minibatch_stddev",
            vec![self.clone()],
            Box::new(move |a: &BackwardArgs<'_, T>| {
                // every output position carries the same scalar
                let total = a.grad_out.iter().copied().sum::<T>() / T::from_f64((f * n) as f64);
                let mut g = vec![T::zero(); n * f];
                for i in 0..n {
                    for j in 0..f {
                        g[i * f + j] = total * (x[i * f + j] - mean[j]) / sd[j];
                    }
                }
                vec![Some(g)]
            }),
        ))
    }
}
