//! Layers shared by the captioner, the GAN and the probe.

use capgan_tensor::init::{kaiming_param, normal_param, zeros_param};
use capgan_tensor::{Float, Result, Tensor};
use rand::Rng;

pub type NamedParams<T> = Vec<(String, Tensor<T>)>;

/// A network whose trainable tensors can be listed by stable names.
pub trait Module<T: Float> {
    fn named_params(&self) -> NamedParams<T>;

    /// Non-trainable state that still belongs in a checkpoint.
    fn named_buffers(&self) -> NamedParams<T> {
        Vec::new()
    }

    fn params(&self) -> Vec<Tensor<T>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    fn set_trainable(&self, on: bool) {
        for p in self.params() {
            p.set_requires_grad(on);
        }
    }

    fn zero_grad(&self) {
        for p in self.params() {
            p.zero_grad();
        }
    }
}

fn push<T: Float>(out: &mut NamedParams<T>, prefix: &str, name: &str, t: &Tensor<T>) {
    out.push((format!("{prefix}.{name}"), t.clone()));
}

/// `y = x W + b` on `[N, in]` rows.
pub struct Linear<T: Float> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Float> Linear<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Linear {
            weight: normal_param(&[inputs, outputs], (1.0 / inputs as f64).sqrt(), rng),
            bias: zeros_param(&[outputs]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.weight)?.add_bias(&self.bias)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        push(out, prefix, "weight", &self.weight);
        push(out, prefix, "bias", &self.bias);
    }
}

pub struct Conv2d<T: Float> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Float> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        Conv2d {
            weight: kaiming_param(&[cout, cin, kernel, kernel], cin * kernel * kernel, rng),
            bias: zeros_param(&[cout]),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight, self.stride, self.pad)?.add_bias(&self.bias)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        push(out, prefix, "weight", &self.weight);
        push(out, prefix, "bias", &self.bias);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormStats {
    /// Batch statistics, folded into the running averages.
    Train,
    /// Batch statistics, running averages untouched.
    Batch,
    /// Running averages.
    Running,
}

/// Batch normalisation with a learned shift.
pub struct BatchNorm<T: Float> {
    pub shift: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Float> BatchNorm<T> {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        BatchNorm {
            shift: zeros_param(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, stats: NormStats) -> Result<Tensor<T>> {
        let y = if stats == NormStats::Batch {
            x.batch_norm(None, Self::EPS)?.0
        } else if stats == NormStats::Train {
            let (y, mean, var) = x.batch_norm(None, Self::EPS)?;
            let m = T::from_f64(Self::MOMENTUM);
            let blend = |run: &Tensor<T>, batch: Vec<T>| {
                let old = run.to_vec();
                run.set_data(old.iter().zip(batch).map(|(&r, b)| r + m * (b - r)).collect())
            };
            blend(&self.running_mean, mean)?;
            blend(&self.running_var, var)?;
            y
        } else {
            let (mean, var) = (self.running_mean.to_vec(), self.running_var.to_vec());
            x.batch_norm(Some((&mean, &var)), Self::EPS)?.0
        };
        y.add_bias(&self.shift)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        push(out, prefix, "shift", &self.shift);
    }

    pub fn collect_buffers(&self, prefix: &str, out: &mut NamedParams<T>) {
        push(out, prefix, "running_mean", &self.running_mean);
        push(out, prefix, "running_var", &self.running_var);
    }
}

pub struct Embedding<T: Float> {
    pub table: Tensor<T>,
}

impl<T: Float> Embedding<T> {
    pub fn new<R: Rng + ?Sized>(vocab: usize, dim: usize, rng: &mut R) -> Self {
        Embedding { table: normal_param(&[vocab, dim], 0.3, rng) }
    }

    pub fn forward(&self, ids: &[usize]) -> Result<Tensor<T>> {
        self.table.gather_rows(ids)
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        push(out, prefix, "table", &self.table);
    }
}

/// Gates are computed in one product of `[x ‖ h]` with a `[in + H, 4H]`
/// matrix, ordered input, forget, cell, output.
pub struct LstmCell<T: Float> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub hidden: usize,
}

impl<T: Float> LstmCell<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, hidden: usize, rng: &mut R) -> Self {
        let weight = normal_param(&[inputs + hidden, 4 * hidden], (1.0 / (inputs + hidden) as f64).sqrt(), rng);
        // Forget gate bias starts at 1 so early gradients pass through the cell.
        let mut b = vec![T::zero(); 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|v| *v = T::one());
        LstmCell { weight, bias: Tensor::param(&[4 * hidden], b).expect("shape"), hidden }
    }

    pub fn zero_state(&self, batch: usize) -> (Tensor<T>, Tensor<T>) {
        (Tensor::zeros(&[batch, self.hidden]), Tensor::zeros(&[batch, self.hidden]))
    }

    pub fn forward(&self, x: &Tensor<T>, h: &Tensor<T>, c: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let hd = self.hidden;
        let gates = Tensor::concat(&[x.clone(), h.clone()], 1)?.matmul(&self.weight)?.add_bias(&self.bias)?;
        let i = gates.narrow(1, 0, hd)?.sigmoid();
        let f = gates.narrow(1, hd, hd)?.sigmoid();
        let g = gates.narrow(1, 2 * hd, hd)?.tanh();
        let o = gates.narrow(1, 3 * hd, hd)?.sigmoid();
        let c = f.mul(c)?.add(&i.mul(&g)?)?;
        let h = o.mul(&c.tanh())?;
        Ok((h, c))
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        push(out, prefix, "weight", &self.weight);
        push(out, prefix, "bias", &self.bias);
    }
}

/// Gated recurrent unit; gate blocks ordered update, reset, candidate.
pub struct GruCell<T: Float> {
    pub w_input: Tensor<T>,
    pub w_hidden: Tensor<T>,
    pub b_input: Tensor<T>,
    pub b_hidden: Tensor<T>,
    pub hidden: usize,
}

impl<T: Float> GruCell<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, hidden: usize, rng: &mut R) -> Self {
        GruCell {
            w_input: normal_param(&[inputs, 3 * hidden], (1.0 / inputs as f64).sqrt(), rng),
            w_hidden: normal_param(&[hidden, 3 * hidden], (1.0 / hidden as f64).sqrt(), rng),
            b_input: zeros_param(&[3 * hidden]),
            b_hidden: zeros_param(&[3 * hidden]),
            hidden,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
        let hd = self.hidden;
        let xg = x.matmul(&self.w_input)?.add_bias(&self.b_input)?;
        let hg = h.matmul(&self.w_hidden)?.add_bias(&self.b_hidden)?;
        let z = xg.narrow(1, 0, hd)?.add(&hg.narrow(1, 0, hd)?)?.sigmoid();
        let r = xg.narrow(1, hd, hd)?.add(&hg.narrow(1, hd, hd)?)?.sigmoid();
        let n = xg.narrow(1, 2 * hd, hd)?.add(&r.mul(&hg.narrow(1, 2 * hd, hd)?)?)?.tanh();
        // h' = (1 - z) n + z h
        n.add(&z.mul(&h.sub(&n)?)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        push(out, prefix, "w_input", &self.w_input);
        push(out, prefix, "w_hidden", &self.w_hidden);
        push(out, prefix, "b_input", &self.b_input);
        push(out, prefix, "b_hidden", &self.b_hidden);
    }
}
