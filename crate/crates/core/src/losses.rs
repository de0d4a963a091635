//! Training objectives of the three levels, each available as a plain
//! function over tensors (with its closed-form gradient) and as a graph
//! construction used during training.
//!
//! Predictions are clamped to `[EPS, 1 - EPS]` before taking logarithms.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::SeqMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const EPS: f64 = 1e-7;

fn check_pair<T: Scalar>(targets: &Tensor<T>, preds: &Tensor<T>) -> Result<()> {
    if targets.shape() != preds.shape() {
        return Err(Error::Shape(format!(
            "targets {:?} vs predictions {:?}",
            targets.shape(),
            preds.shape()
        )));
    }
    if !targets.all_finite() || !preds.all_finite() {
        return Err(Error::Invalid("non-finite loss input".into()));
    }
    Ok(())
}

fn clamp<T: Scalar>(p: T) -> T {
    let eps = T::lit(EPS);
    p.max(eps).min(T::one() - eps)
}

fn batch_size<T: Scalar>(t: &Tensor<T>) -> T {
    T::lit(t.shape().first().copied().unwrap_or(1).max(1) as f64)
}

/// Categorical cross-entropy averaged over the batch:
/// `-(1/N) sum_i sum_j y_ij ln p_ij` for `[N, L]` inputs.
pub fn cce_loss<T: Scalar>(targets: &Tensor<T>, probs: &Tensor<T>) -> Result<T> {
    check_pair(targets, probs)?;
    let total: T = targets
        .data()
        .iter()
        .zip(probs.data())
        .filter(|(y, _)| **y != T::zero())
        .map(|(&y, &p)| y * clamp(p).ln())
        .sum();
    Ok(-total / batch_size(targets))
}

/// Gradient of [`cce_loss`] composed with a row softmax, with respect to
/// the logits: `(softmax(z) - y) / N` for rows whose targets sum to one.
pub fn cce_grad_logits<T: Scalar>(targets: &Tensor<T>, logits: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair(targets, logits)?;
    let n = batch_size(targets);
    Ok(logits.softmax_rows().zip_map(targets, |p, y| (p - y) / n))
}

/// Binary cross-entropy of padded per-abstract score sequences `[N, I, L]`.
/// Each abstract contributes the plain sum over its `L * I` unmasked
/// entries; the total is divided by the number of abstracts `N`.
pub fn bce_abstract_loss<T: Scalar>(targets: &Tensor<T>, preds: &Tensor<T>, mask: &SeqMask) -> Result<T> {
    check_pair(targets, preds)?;
    check_mask(targets, mask)?;
    let l = targets.last_dim();
    let mut total = T::zero();
    for (i, (ys, ps)) in targets.data().chunks(l).zip(preds.data().chunks(l)).enumerate() {
        if !mask.get(i / mask.len(), i % mask.len()) {
            continue;
        }
        for (&y, &p) in ys.iter().zip(ps) {
            let p = clamp(p);
            total += y * p.ln() + (T::one() - y) * (T::one() - p).ln();
        }
    }
    Ok(-total / batch_size(targets))
}

/// Gradient of [`bce_abstract_loss`] with respect to the (unclamped
/// interior) predictions.
pub fn bce_grad_preds<T: Scalar>(targets: &Tensor<T>, preds: &Tensor<T>, mask: &SeqMask) -> Result<Tensor<T>> {
    check_pair(targets, preds)?;
    check_mask(targets, mask)?;
    let l = targets.last_dim();
    let n = batch_size(targets);
    let mut out = Tensor::zeros(targets.shape());
    for (i, ((g, ys), ps)) in out
        .data_mut()
        .chunks_mut(l)
        .zip(targets.data().chunks(l))
        .zip(preds.data().chunks(l))
        .enumerate()
    {
        if !mask.get(i / mask.len(), i % mask.len()) {
            continue;
        }
        for ((g, &y), &p) in g.iter_mut().zip(ys).zip(ps) {
            *g = -(y / p - (T::one() - y) / (T::one() - p)) / n;
        }
    }
    Ok(out)
}

fn check_mask<T: Scalar>(targets: &Tensor<T>, mask: &SeqMask) -> Result<()> {
    let s = targets.shape();
    if s.len() != 3 || s[0] != mask.batch() || s[1] != mask.len() {
        return Err(Error::Shape(format!(
            "abstract batch {s:?} with mask [{}, {}]",
            mask.batch(),
            mask.len()
        )));
    }
    Ok(())
}

/// KL divergence summed over the batch plus an L2 penalty:
/// `sum_n sum_l y ln(y / p) + (lambda / 2) * sum ||theta||^2`, with
/// `0 ln(0 / p) = 0`.
pub fn kl_loss<T: Scalar>(targets: &Tensor<T>, preds: &Tensor<T>, params: &[&Tensor<T>], lambda: f64) -> Result<T> {
    check_pair(targets, preds)?;
    if lambda < 0.0 {
        return Err(Error::Invalid(format!("negative L2 coefficient {lambda}")));
    }
    let kl: T = targets
        .data()
        .iter()
        .zip(preds.data())
        .filter(|(y, _)| **y > T::zero())
        .map(|(&y, &p)| y * (y.ln() - clamp(p).ln()))
        .sum();
    let sq: T = params.iter().map(|t| t.sum_squares()).sum();
    Ok(kl + T::lit(lambda / 2.0) * sq)
}

/// Gradient of the KL term of [`kl_loss`] with respect to the predictions.
pub fn kl_grad_preds<T: Scalar>(targets: &Tensor<T>, preds: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair(targets, preds)?;
    Ok(targets.zip_map(preds, |y, p| if y > T::zero() { -y / p } else { T::zero() }))
}

/// Gradient of the L2 term of [`kl_loss`] with respect to one parameter.
pub fn l2_grad<T: Scalar>(param: &Tensor<T>, lambda: f64) -> Tensor<T> {
    let l = T::lit(lambda);
    param.map(|w| l * w)
}

/// Clamped `ln p` on the graph.
fn log_probs<T: Scalar>(g: &mut Graph<T>, probs: Var) -> Var {
    g.log_clamp(probs, T::lit(EPS))
}

/// Graph form of [`cce_loss`].
pub fn cce_graph<T: Scalar>(g: &mut Graph<T>, probs: Var, targets: &Tensor<T>) -> Result<Var> {
    let n = batch_size(targets);
    let lp = log_probs(g, probs);
    let w = g.mul_const(lp, targets.clone())?;
    let s = g.sum_all(w);
    Ok(g.scale(s, -T::one() / n))
}

/// Graph form of [`bce_abstract_loss`].
pub fn bce_graph<T: Scalar>(g: &mut Graph<T>, preds: Var, targets: &Tensor<T>, mask: &SeqMask) -> Result<Var> {
    check_mask(targets, mask)?;
    let l = targets.last_dim();
    let m = mask.as_tensor::<T>(l);
    let pos = targets.zip_map(&m, |y, k| y * k);
    let neg = targets.zip_map(&m, |y, k| (T::one() - y) * k);
    let n = batch_size(targets);
    let lp = log_probs(g, preds);
    let one_minus = g.scale(preds, -T::one());
    let one_minus = g.add_scalar(one_minus, T::one());
    let lq = log_probs(g, one_minus);
    let a = g.mul_const(lp, pos)?;
    let b = g.mul_const(lq, neg)?;
    let s = g.add(a, b)?;
    let s = g.sum_all(s);
    Ok(g.scale(s, -T::one() / n))
}

/// Graph form of [`kl_loss`]; `params` are the regularized weights.
pub fn kl_graph<T: Scalar>(g: &mut Graph<T>, preds: Var, targets: &Tensor<T>, params: &[Var], lambda: f64) -> Result<Var> {
    let entropy: T = targets
        .data()
        .iter()
        .filter(|&&y| y > T::zero())
        .map(|&y| y * y.ln())
        .sum();
    let lp = log_probs(g, preds);
    let cross = g.mul_const(lp, targets.clone())?;
    let cross = g.sum_all(cross);
    let kl = g.scale(cross, -T::one());
    let mut loss = g.add_scalar(kl, entropy);
    if lambda > 0.0 {
        for &w in params {
            let sq = g.sum_squares(w);
            let sq = g.scale(sq, T::lit(lambda / 2.0));
            loss = g.add(loss, sq)?;
        }
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn cce_of_exact_prediction_is_zero() {
        let y = t(&[2, 3], &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(cce_loss(&y, &y).unwrap().abs() < 1e-6);
    }

    #[test]
    fn cce_uniform_is_ln_l() {
        let y = t(&[1, 5], &[0.0, 0.0, 1.0, 0.0, 0.0]);
        let p = t(&[1, 5], &[0.2; 5]);
        assert!((cce_loss(&y, &p).unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cce_batch_is_mean() {
        let y1 = t(&[1, 2], &[1.0, 0.0]);
        let p1 = t(&[1, 2], &[0.7, 0.3]);
        let y2 = t(&[1, 2], &[0.0, 1.0]);
        let p2 = t(&[1, 2], &[0.6, 0.4]);
        let both = cce_loss(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), &t(&[2, 2], &[0.7, 0.3, 0.6, 0.4])).unwrap();
        let mean = (cce_loss(&y1, &p1).unwrap() + cce_loss(&y2, &p2).unwrap()) / 2.0;
        assert!((both - mean).abs() < 1e-12);
    }

    #[test]
    fn cce_zero_probability_is_finite() {
        let y = t(&[1, 2], &[1.0, 0.0]);
        let p = t(&[1, 2], &[0.0, 1.0]);
        let l = cce_loss(&y, &p).unwrap();
        assert!(l.is_finite() && (l - (-(EPS.ln()))).abs() < 1e-9);
    }

    #[test]
    fn bce_half_everywhere() {
        let y = t(&[1, 2, 5], &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let p = Tensor::full(&[1, 2, 5], 0.5);
        let l = bce_abstract_loss(&y, &p, &SeqMask::all(1, 2)).unwrap();
        assert!((l - 10.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_exact_is_near_zero_and_rejects_nan() {
        let y = t(&[1, 1, 2], &[1.0, 0.0]);
        assert!(bce_abstract_loss(&y, &y, &SeqMask::all(1, 1)).unwrap() < 1e-5);
        let bad = t(&[1, 1, 2], &[f64::NAN, 0.0]);
        assert!(bce_abstract_loss(&y, &bad, &SeqMask::all(1, 1)).is_err());
    }

    #[test]
    fn bce_duplicate_abstracts_average() {
        let y1 = t(&[1, 1, 2], &[1.0, 0.0]);
        let p1 = t(&[1, 1, 2], &[0.8, 0.3]);
        let y2 = t(&[2, 1, 2], &[1.0, 0.0, 1.0, 0.0]);
        let p2 = t(&[2, 1, 2], &[0.8, 0.3, 0.8, 0.3]);
        let a = bce_abstract_loss(&y1, &p1, &SeqMask::all(1, 1)).unwrap();
        let b = bce_abstract_loss(&y2, &p2, &SeqMask::all(2, 1)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let y = t(&[1, 5], &[1.0, 0.0, 0.0, 0.0, 0.0]);
        let p = t(&[1, 5], &[0.5, 0.5, 0.0, 0.0, 0.0]);
        assert!((kl_loss(&y, &p, &[], 0.0).unwrap() - 2f64.ln()).abs() < 1e-6);
        let soft = t(&[1, 3], &[2.0 / 3.0, 1.0 / 3.0, 0.0]);
        assert!(kl_loss(&soft, &soft, &[], 0.0).unwrap().abs() < 1e-12);
        let w = t(&[2], &[3.0, 4.0]);
        let l = kl_loss(&soft, &soft, &[&w], 1e-4).unwrap();
        assert!((l - 1e-4 / 2.0 * 25.0).abs() < 1e-12);
        assert!(kl_loss(&soft, &soft, &[], -1.0).is_err());
    }

    #[test]
    fn graph_losses_match_plain() {
        let y = t(&[2, 3], &[0.0, 1.0, 0.0, 0.5, 0.5, 0.0]);
        let p = t(&[2, 3], &[0.2, 0.5, 0.3, 0.1, 0.6, 0.3]);
        let w = t(&[2], &[0.3, -0.2]);
        let mut g = Graph::new();
        let pv = g.param(p.clone());
        let wv = g.param(w.clone());
        let c = cce_graph(&mut g, pv, &y).unwrap();
        let k = kl_graph(&mut g, pv, &y, &[wv], 0.01).unwrap();
        assert!((g.value(c).data()[0] - cce_loss(&y, &p).unwrap()).abs() < 1e-12);
        assert!((g.value(k).data()[0] - kl_loss(&y, &p, &[&w], 0.01).unwrap()).abs() < 1e-12);

        let yb = t(&[1, 2, 3], &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let pb = t(&[1, 2, 3], &[0.2, 0.5, 0.3, 0.9, 0.6, 0.3]);
        let mask = SeqMask::from_lengths(&[1], 2);
        let pbv = g.param(pb.clone());
        let b = bce_graph(&mut g, pbv, &yb, &mask).unwrap();
        assert!((g.value(b).data()[0] - bce_abstract_loss(&yb, &pb, &mask).unwrap()).abs() < 1e-12);
    }
}
