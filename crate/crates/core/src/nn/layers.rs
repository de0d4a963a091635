use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::params::{glorot, Binding, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Whether a forward pass is for training (dropout active, batch norm uses
/// batch statistics) or inference.
pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Validity flags for a right-padded batch of sequences, `[B, T]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqMask {
    batch: usize,
    len: usize,
    flags: Vec<bool>,
}

impl SeqMask {
    pub fn from_lengths(lengths: &[usize], len: usize) -> Self {
        let mut flags = Vec::with_capacity(lengths.len() * len);
        for &l in lengths {
            flags.extend((0..len).map(|t| t < l));
        }
        SeqMask {
            batch: lengths.len(),
            len,
            flags,
        }
    }

    pub fn all(batch: usize, len: usize) -> Self {
        SeqMask {
            batch,
            len,
            flags: vec![true; batch * len],
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, b: usize, t: usize) -> bool {
        self.flags[b * self.len + t]
    }

    /// Flags of every sequence at step `t`.
    pub fn step(&self, t: usize) -> Vec<bool> {
        (0..self.batch).map(|b| self.get(b, t)).collect()
    }

    /// Joins two masks along the time axis.
    pub fn concat(&self, other: &SeqMask) -> Result<SeqMask> {
        if self.batch != other.batch {
            return Err(Error::Shape("mask batch sizes differ".into()));
        }
        let len = self.len + other.len;
        let mut flags = Vec::with_capacity(self.batch * len);
        for b in 0..self.batch {
            flags.extend_from_slice(&self.flags[b * self.len..(b + 1) * self.len]);
            flags.extend_from_slice(&other.flags[b * other.len..(b + 1) * other.len]);
        }
        Ok(SeqMask {
            batch: self.batch,
            len,
            flags,
        })
    }

    /// 0/1 tensor of shape `[B, T, width]`.
    pub fn as_tensor<T: Scalar>(&self, width: usize) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.flags.len() * width);
        for &f in &self.flags {
            let v = if f { T::one() } else { T::zero() };
            data.extend(std::iter::repeat_n(v, width));
        }
        Tensor::from_vec(&[self.batch, self.len, width], data).expect("shape")
    }
}

/// Zeroes the padded positions of a `[B, T, D]` sequence.
pub fn apply_mask<T: Scalar>(g: &mut Graph<T>, x: Var, mask: &SeqMask) -> Result<Var> {
    let d = g.value(x).last_dim();
    g.mul_const(x, mask.as_tensor(d))
}

/// Inverted dropout.
pub fn dropout<T: Scalar>(g: &mut Graph<T>, x: Var, rate: f64, mode: &mut Mode) -> Result<Var> {
    let Mode::Train(rng) = mode else {
        return Ok(x);
    };
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let scale = T::lit(1.0 / keep);
    let n = g.value(x).len();
    let data = (0..n)
        .map(|_| if rng.gen::<f64>() < keep { scale } else { T::zero() })
        .collect();
    let mask = Tensor::from_vec(g.shape(x), data)?;
    g.mul_const(x, mask)
}

/// Fully connected layer over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let weight = format!("{prefix}.weight");
        let bias = format!("{prefix}.bias");
        store.insert(&weight, ParamKind::Weight, glorot(rng, &[in_dim, out_dim], in_dim, out_dim))?;
        store.insert(&bias, ParamKind::Bias, Tensor::zeros(&[out_dim]))?;
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        if g.value(x).last_dim() != self.in_dim {
            return Err(Error::Shape(format!(
                "{}: expected width {}, got {:?}",
                self.weight,
                self.in_dim,
                g.shape(x)
            )));
        }
        let y = g.matmul(x, p.get(&self.weight))?;
        g.add_bias(y, p.get(&self.bias))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }
}

/// One direction of a recurrent layer.
#[derive(Clone, Debug)]
pub struct RnnLayer {
    pub cell: CellKind,
    pub input: usize,
    pub hidden: usize,
    w_ih: String,
    w_hh: String,
    b_ih: String,
    b_hh: Option<String>,
}

impl RnnLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cell: CellKind,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        let gh = cell.gates() * hidden;
        let w_ih = format!("{prefix}.w_ih");
        let w_hh = format!("{prefix}.w_hh");
        let b_ih = format!("{prefix}.b_ih");
        store.insert(&w_ih, ParamKind::Weight, glorot(rng, &[input, gh], input, hidden))?;
        store.insert(&w_hh, ParamKind::Weight, glorot(rng, &[hidden, gh], hidden, hidden))?;
        let mut bias = Tensor::zeros(&[gh]);
        if cell == CellKind::Lstm {
            // forget gate starts open
            for v in &mut bias.data_mut()[hidden..2 * hidden] {
                *v = T::one();
            }
        }
        store.insert(&b_ih, ParamKind::Bias, bias)?;
        let b_hh = if cell == CellKind::Gru {
            let name = format!("{prefix}.b_hh");
            store.insert(&name, ParamKind::Bias, Tensor::zeros(&[gh]))?;
            Some(name)
        } else {
            None
        };
        Ok(RnnLayer {
            cell,
            input,
            hidden,
            w_ih,
            w_hh,
            b_ih,
            b_hh,
        })
    }

    /// Runs over `x: [B, T, D]`. Returns the per-step hidden states
    /// `[B, T, H]` (zero at padded steps) and the final state `[B, H]`,
    /// which for a right-padded sequence is the state after its last (or,
    /// in reverse, first) real element.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Binding,
        x: Var,
        mask: &SeqMask,
        reverse: bool,
    ) -> Result<(Var, Var)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.input || shape[0] != mask.batch() || shape[1] != mask.len() {
            return Err(Error::Shape(format!(
                "rnn input {shape:?}, expected [{}, {}, {}]",
                mask.batch(),
                mask.len(),
                self.input
            )));
        }
        let (batch, steps) = (shape[0], shape[1]);
        if steps == 0 {
            return Err(Error::Shape("zero-length sequence".into()));
        }
        let xp = g.matmul(x, p.get(&self.w_ih))?;
        let xp = g.add_bias(xp, p.get(&self.b_ih))?;
        let zeros = Tensor::zeros(&[batch, self.hidden]);
        let mut h = g.constant(zeros.clone());
        let mut c = g.constant(zeros);
        let mut outputs = vec![h; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let xt = g.select(xp, 1, t)?;
            let flags = mask.step(t);
            let step_mask = if flags.iter().all(|&f| f) { None } else { Some(flags) };
            let hp = g.matmul(h, p.get(&self.w_hh))?;
            match self.cell {
                CellKind::Lstm => {
                    let pre = g.add(xt, hp)?;
                    let hc = g.lstm_cell(pre, h, c, step_mask)?;
                    h = g.slice(hc, 1, 0, self.hidden)?;
                    c = g.slice(hc, 1, self.hidden, self.hidden)?;
                }
                CellKind::Gru => {
                    let b_hh = self.b_hh.as_ref().expect("gru bias");
                    let hp = g.add_bias(hp, p.get(b_hh))?;
                    h = g.gru_cell(xt, hp, h, step_mask)?;
                }
            }
            outputs[t] = h;
        }
        let seq = g.stack(&outputs, 1)?;
        let seq = apply_mask(g, seq, mask)?;
        Ok((seq, h))
    }
}

/// Output of a bidirectional recurrent layer.
pub struct BiOutput {
    /// `[B, T, 2H]`, forward states followed by backward states.
    pub sequence: Var,
    /// `[B, 2H]`: last forward state and first backward state.
    pub pooled: Var,
}

#[derive(Clone, Debug)]
pub struct BiRnn {
    pub fwd: RnnLayer,
    pub bwd: RnnLayer,
}

impl BiRnn {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cell: CellKind,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(BiRnn {
            fwd: RnnLayer::new(store, rng, &format!("{prefix}.fwd"), cell, input, hidden)?,
            bwd: RnnLayer::new(store, rng, &format!("{prefix}.bwd"), cell, input, hidden)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Binding, x: Var, mask: &SeqMask) -> Result<BiOutput> {
        let (fs, fl) = self.fwd.forward(g, p, x, mask, false)?;
        let (bs, bl) = self.bwd.forward(g, p, x, mask, true)?;
        Ok(BiOutput {
            sequence: g.concat(&[fs, bs], 2)?,
            pooled: g.concat(&[fl, bl], 1)?,
        })
    }
}

/// 2-D convolution with same padding over `[B, Cin, H, W]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: String,
    pub bias: String,
    pub kernel: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
    ) -> Result<Self> {
        let weight = format!("{prefix}.weight");
        let bias = format!("{prefix}.bias");
        let area = kernel.0 * kernel.1;
        store.insert(
            &weight,
            ParamKind::Weight,
            glorot(
                rng,
                &[out_channels, in_channels, kernel.0, kernel.1],
                in_channels * area,
                out_channels * area,
            ),
        )?;
        store.insert(&bias, ParamKind::Bias, Tensor::zeros(&[out_channels]))?;
        Ok(Conv2d {
            weight,
            bias,
            kernel,
            in_channels,
            out_channels,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        g.conv2d_same(x, p.get(&self.weight), p.get(&self.bias))
    }
}

/// Batch normalization over the last axis.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: String,
    pub beta: String,
    pub running_mean: String,
    pub running_var: String,
    pub dim: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Result<Self> {
        let bn = BatchNorm {
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
            running_mean: format!("{prefix}.running_mean"),
            running_var: format!("{prefix}.running_var"),
            dim,
            momentum: 0.1,
            eps: 1e-3,
        };
        store.insert(&bn.gamma, ParamKind::Norm, Tensor::full(&[dim], T::one()))?;
        store.insert(&bn.beta, ParamKind::Norm, Tensor::zeros(&[dim]))?;
        store.insert(&bn.running_mean, ParamKind::Buffer, Tensor::zeros(&[dim]))?;
        store.insert(&bn.running_var, ParamKind::Buffer, Tensor::full(&[dim], T::one()))?;
        Ok(bn)
    }

    /// In training mode also returns the batch statistics, to be folded
    /// into the running averages with [`BatchNorm::update_running`].
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Binding,
        store: &ParamStore<T>,
        x: Var,
        mode: &Mode,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let eps = T::lit(self.eps);
        if mode.is_train() {
            let (y, stats) = g.batch_norm_train(x, p.get(&self.gamma), p.get(&self.beta), eps)?;
            Ok((y, Some(stats)))
        } else {
            let mean = store.get(&self.running_mean).expect("running mean").data().to_vec();
            let var = store.get(&self.running_var).expect("running var").data().to_vec();
            let y = g.batch_norm_eval(x, p.get(&self.gamma), p.get(&self.beta), &mean, &var, eps)?;
            Ok((y, None))
        }
    }

    pub fn update_running<T: Scalar>(&self, store: &mut ParamStore<T>, stats: &BatchStats<T>, rows: usize) {
        let m = T::lit(self.momentum);
        let unbias = if rows > 1 {
            T::lit(rows as f64 / (rows - 1) as f64)
        } else {
            T::one()
        };
        if let Some(rm) = store.get_mut(&self.running_mean) {
            for (r, &b) in rm.data_mut().iter_mut().zip(&stats.mean) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
        if let Some(rv) = store.get_mut(&self.running_var) {
            for (r, &b) in rv.data_mut().iter_mut().zip(&stats.var) {
                *r = (T::one() - m) * *r + m * b * unbias;
            }
        }
    }
}
