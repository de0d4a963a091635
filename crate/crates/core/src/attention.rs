//! Scaled dot-product attention, both as a plain matrix function and as a
//! learned self-attention layer over padded batches.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{apply_mask, Binding, Linear, ParamStore, SeqMask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Query `[N_q, d_l]`, key `[N_k, d_l]` and value `[N_v, d_v]` matrices.
#[derive(Clone, Debug)]
pub struct AttentionInputs<T> {
    query: Tensor<T>,
    key: Tensor<T>,
    value: Tensor<T>,
}

impl<T: Scalar> AttentionInputs<T> {
    pub fn new(query: Tensor<T>, key: Tensor<T>, value: Tensor<T>) -> Result<Self> {
        if query.rank() != 2 || key.rank() != 2 || value.rank() != 2 {
            return Err(Error::Shape("attention inputs must be matrices".into()));
        }
        if key.shape()[0] != value.shape()[0] {
            return Err(Error::Shape(format!(
                "{} keys but {} values",
                key.shape()[0],
                value.shape()[0]
            )));
        }
        if query.shape()[1] != key.shape()[1] {
            return Err(Error::Shape(format!(
                "query width {} differs from key width {}",
                query.shape()[1],
                key.shape()[1]
            )));
        }
        if !(query.all_finite() && key.all_finite() && value.all_finite()) {
            return Err(Error::Invalid("non-finite attention input".into()));
        }
        Ok(AttentionInputs { query, key, value })
    }

    pub fn query(&self) -> &Tensor<T> {
        &self.query
    }

    pub fn key(&self) -> &Tensor<T> {
        &self.key
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }
}

#[derive(Clone, Debug)]
pub struct Attention<T> {
    /// `[N_q, N_k]`, rows sum to one.
    pub weights: Tensor<T>,
    /// `[N_q, d_v]`
    pub output: Tensor<T>,
}

/// `softmax(Q K^T / sqrt(d_l)) V` with a row-wise softmax.
pub fn scaled_dot_product_attention<T: Scalar>(inputs: &AttentionInputs<T>) -> Result<Attention<T>> {
    let d_l = inputs.key.shape()[1];
    let scale = T::one() / T::lit(d_l as f64).sqrt();
    let scores = inputs.query.matmul(&inputs.key.transpose2())?.map(|s| s * scale);
    let weights = scores.softmax_rows();
    let output = weights.matmul(&inputs.value)?;
    Ok(Attention { weights, output })
}

/// Single-head self-attention with learned query/key/value projections.
/// Padded keys get zero weight and padded query rows produce zeros.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    query: Linear,
    key: Linear,
    value: Linear,
}

impl SelfAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, prefix: &str, dim: usize) -> Result<Self> {
        Ok(SelfAttention {
            query: Linear::new(store, rng, &format!("{prefix}.query"), dim, dim)?,
            key: Linear::new(store, rng, &format!("{prefix}.key"), dim, dim)?,
            value: Linear::new(store, rng, &format!("{prefix}.value"), dim, dim)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Binding, x: Var, mask: &SeqMask) -> Result<Var> {
        let q = self.query.forward(g, p, x)?;
        let k = self.key.forward(g, p, x)?;
        let v = self.value.forward(g, p, x)?;
        attend(g, q, k, v, mask)
    }
}

/// Batched attention over `[B, T, d]` inputs sharing one padding mask.
pub fn attend<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, mask: &SeqMask) -> Result<Var> {
    let d_l = g.value(k).last_dim();
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, T::one() / T::lit(d_l as f64).sqrt());
    let (batch, steps) = (mask.batch(), mask.len());
    let mut flags = Vec::with_capacity(batch * steps * steps);
    for b in 0..batch {
        for _ in 0..steps {
            flags.extend((0..steps).map(|j| mask.get(b, j)));
        }
    }
    let weights = g.softmax(scores, Some(flags))?;
    let out = g.bmm(weights, v, false)?;
    apply_mask(g, out, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_key_returns_its_value() {
        let inputs = AttentionInputs::new(m(&[&[0.3, -2.0], &[5.0, 1.0]]), m(&[&[1.0, 1.0]]), m(&[&[4.0, -1.0, 2.0]])).unwrap();
        let out = scaled_dot_product_attention(&inputs).unwrap();
        for r in 0..2 {
            assert_eq!(out.output.row(r), &[4.0, -1.0, 2.0]);
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let inputs = AttentionInputs::new(
            m(&[&[0.7, 0.1]]),
            m(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]),
            m(&[&[3.0], &[6.0], &[0.0]]),
        )
        .unwrap();
        let out = scaled_dot_product_attention(&inputs).unwrap();
        assert!((out.output.data()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn two_key_worked_example() {
        // scores (1/sqrt 2, 0); softmax -> 1 / (1 + e^{-1/sqrt 2})
        let inputs = AttentionInputs::new(
            m(&[&[1.0, 0.0]]),
            m(&[&[1.0, 0.0], &[0.0, 1.0]]),
            m(&[&[1.0, 0.0], &[0.0, 1.0]]),
        )
        .unwrap();
        let out = scaled_dot_product_attention(&inputs).unwrap();
        assert!((out.weights.data()[0] - 0.6698).abs() < 1e-3);
        assert!((out.weights.data()[1] - 0.3302).abs() < 1e-3);
        assert!((out.output.data()[0] - 0.6698).abs() < 1e-3);
        assert!((out.output.data()[1] - 0.3302).abs() < 1e-3);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(AttentionInputs::new(m(&[&[1.0]]), m(&[&[1.0, 0.0]]), m(&[&[1.0]])).is_err());
        assert!(AttentionInputs::new(m(&[&[1.0]]), m(&[&[1.0], &[2.0]]), m(&[&[1.0]])).is_err());
        assert!(AttentionInputs::new(m(&[&[f64::NAN]]), m(&[&[1.0]]), m(&[&[1.0]])).is_err());
    }

    #[test]
    fn batched_attention_matches_plain_and_ignores_padding() {
        let q = m(&[&[0.2, -0.1], &[0.5, 0.4], &[9.0, 9.0]]);
        let k = m(&[&[1.0, 0.3], &[-0.2, 0.8], &[7.0, 7.0]]);
        let v = m(&[&[1.0, 2.0], &[3.0, -1.0], &[100.0, 100.0]]);
        let mut g = Graph::new();
        let qv = g.constant(q.clone().reshape(&[1, 3, 2]).unwrap());
        let kv = g.constant(k.clone().reshape(&[1, 3, 2]).unwrap());
        let vv = g.constant(v.clone().reshape(&[1, 3, 2]).unwrap());
        let mask = SeqMask::from_lengths(&[2], 3);
        let out = attend(&mut g, qv, kv, vv, &mask).unwrap();

        let trim = |t: &Tensor<f64>| Tensor::from_vec(&[2, 2], t.data()[..4].to_vec()).unwrap();
        let plain = scaled_dot_product_attention(&AttentionInputs::new(trim(&q), trim(&k), trim(&v)).unwrap()).unwrap();
        let got = g.value(out).data();
        for i in 0..4 {
            assert!((got[i] - plain.output.data()[i]).abs() < 1e-12);
        }
        assert_eq!(&got[4..], &[0.0, 0.0]);
    }

    #[test]
    fn self_attention_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let att = SelfAttention::new(&mut store, &mut rng, "att", 4).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::full(&[2, 5, 4], 0.1));
        let y = att.forward(&mut g, &p, x, &SeqMask::from_lengths(&[5, 2], 5)).unwrap();
        assert_eq!(g.shape(y), &[2, 5, 4]);
    }
}
