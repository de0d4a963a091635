//! Weighted combination of abstract-level and segment-level scores and
//! argmax decoding.

use num_traits::Num;
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};

/// Per-sentence score rows of one abstract, `I x L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionMatrix<T> {
    pub abstract_id: String,
    pub rows: Vec<Vec<T>>,
}

impl<T> PredictionMatrix<T> {
    pub fn new(abstract_id: impl Into<String>, rows: Vec<Vec<T>>) -> Self {
        PredictionMatrix {
            abstract_id: abstract_id.into(),
            rows,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn width(&self) -> Option<usize> {
        self.rows.first().map(Vec::len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub lambda_abs: f64,
    pub lambda_seg: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            lambda_abs: 1.0,
            lambda_seg: 0.2,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_abs.is_finite() && self.lambda_seg.is_finite()) {
            return Err(Error::Config("fusion weights must be finite".into()));
        }
        if self.lambda_abs == 0.0 && self.lambda_seg == 0.0 {
            return Err(Error::Config("at least one fusion weight must be nonzero".into()));
        }
        Ok(())
    }
}

/// `lambda_abs * abs + lambda_seg * seg`, elementwise.
pub fn fuse_rows<T: Num + Copy>(abs: &[T], seg: &[T], lambda_abs: T, lambda_seg: T) -> Result<Vec<T>> {
    if abs.len() != seg.len() {
        return Err(Error::Shape(format!("score widths {} and {}", abs.len(), seg.len())));
    }
    Ok(abs
        .iter()
        .zip(seg)
        .map(|(&a, &s)| lambda_abs * a + lambda_seg * s)
        .collect())
}

pub fn fuse<T: Num + Copy>(
    abs: &PredictionMatrix<T>,
    seg: &PredictionMatrix<T>,
    lambda_abs: T,
    lambda_seg: T,
) -> Result<PredictionMatrix<T>> {
    if abs.abstract_id != seg.abstract_id {
        return Err(Error::Invalid(format!(
            "fusing abstract {} with {}",
            abs.abstract_id, seg.abstract_id
        )));
    }
    if abs.len() != seg.len() {
        return Err(Error::Shape(format!(
            "abstract {}: {} vs {} sentences",
            abs.abstract_id,
            abs.len(),
            seg.len()
        )));
    }
    let rows = abs
        .rows
        .iter()
        .zip(&seg.rows)
        .map(|(a, s)| fuse_rows(a, s, lambda_abs, lambda_seg))
        .collect::<Result<_>>()?;
    Ok(PredictionMatrix::new(abs.abstract_id.clone(), rows))
}

/// [`fuse`] with `f64` scores and a [`FusionConfig`].
pub fn fuse_with(
    abs: &PredictionMatrix<f64>,
    seg: &PredictionMatrix<f64>,
    config: &FusionConfig,
) -> Result<PredictionMatrix<f64>> {
    config.validate()?;
    fuse(abs, seg, config.lambda_abs, config.lambda_seg)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn decode<T: PartialOrd + Copy>(pred: &PredictionMatrix<T>) -> Vec<Label> {
    pred.rows.iter().map(|r| Label(argmax(r))).collect()
}
