//! Masked evaluation of a prediction matrix: per-column ("drug-wise") and
//! per-row ("sample-wise") Pearson and RMSE, and top-k precision per row.

use std::collections::BTreeMap;

use ndarray::{ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const TOPK_VALUES: [usize; 4] = [1, 3, 5, 10];

fn observed(a: ArrayView1<f64>, b: ArrayView1<f64>, mask: ArrayView1<f64>) -> Vec<(f64, f64)> {
    a.iter()
        .zip(b.iter())
        .zip(mask.iter())
        .filter(|(_, &m)| m != 0.0)
        .map(|((&x, &y), _)| (x, y))
        .collect()
}

/// Pearson correlation over unmasked positions. `None` when fewer than two
/// entries are observed or either side has zero variance.
pub fn masked_pearson(a: ArrayView1<f64>, b: ArrayView1<f64>, mask: ArrayView1<f64>) -> Option<f64> {
    let pairs = observed(a, b, mask);
    let n = pairs.len();
    if n < 2 {
        return None;
    }
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for &(x, y) in &pairs {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Root mean squared difference over unmasked positions.
pub fn masked_rmse(a: ArrayView1<f64>, b: ArrayView1<f64>, mask: ArrayView1<f64>) -> Option<f64> {
    let (mut n, mut s) = (0usize, 0.0);
    for (x, y) in observed(a, b, mask) {
        n += 1;
        s += (x - y) * (x - y);
    }
    (n > 0).then(|| (s / n as f64).sqrt())
}

/// Indices of the `k` smallest unmasked values, ties broken by index.
fn smallest_k(v: ArrayView1<f64>, mask: ArrayView1<f64>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).filter(|&j| mask[j] != 0.0).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]).then(i.cmp(&j)));
    idx.truncate(k);
    idx
}

/// Overlap of the `k` most sensitive (smallest) entries by truth and by
/// prediction, over unmasked entries. `None` when fewer than `k` are observed.
pub fn topk_precision(
    y: ArrayView1<f64>,
    pred: ArrayView1<f64>,
    mask: ArrayView1<f64>,
    k: usize,
) -> Option<f64> {
    let available = mask.iter().filter(|&&m| m != 0.0).count();
    if k == 0 || available < k {
        return None;
    }
    let truth = smallest_k(y, mask, k);
    let guess = smallest_k(pred, mask, k);
    let hits = guess.iter().filter(|j| truth.contains(j)).count();
    Some(hits as f64 / k as f64)
}

/// Mean over defined entries together with the number of excluded ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: Option<f64>,
    pub values: Vec<Option<f64>>,
    pub excluded: usize,
}

impl Aggregate {
    fn from_values(values: Vec<Option<f64>>) -> Self {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        Self {
            mean,
            excluded: values.len() - defined.len(),
            values,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub drugwise_pearson: Aggregate,
    pub drugwise_rmse: Aggregate,
    pub samplewise_pearson: Aggregate,
    pub samplewise_rmse: Aggregate,
    pub topk_precision: BTreeMap<usize, Aggregate>,
}

impl EvalReport {
    pub fn drugwise_pearson_mean(&self) -> f64 {
        self.drugwise_pearson.mean.unwrap_or(f64::NAN)
    }

    pub fn drugwise_rmse_mean(&self) -> f64 {
        self.drugwise_rmse.mean.unwrap_or(f64::NAN)
    }

    pub fn samplewise_pearson_mean(&self) -> f64 {
        self.samplewise_pearson.mean.unwrap_or(f64::NAN)
    }

    pub fn samplewise_rmse_mean(&self) -> f64 {
        self.samplewise_rmse.mean.unwrap_or(f64::NAN)
    }
}

pub fn matrix_report(y: &Matrix, pred: &Matrix, mask: &Matrix) -> Result<EvalReport> {
    if y.dim() != pred.dim() || y.dim() != mask.dim() {
        return Err(Error::Dimension(format!(
            "evaluation shapes differ: truth {:?}, prediction {:?}, mask {:?}",
            y.dim(),
            pred.dim(),
            mask.dim()
        )));
    }
    let per = |axis: Axis, f: fn(ArrayView1<f64>, ArrayView1<f64>, ArrayView1<f64>) -> Option<f64>| {
        Aggregate::from_values(
            y.axis_iter(axis)
                .zip(pred.axis_iter(axis))
                .zip(mask.axis_iter(axis))
                .map(|((a, b), m)| f(a, b, m))
                .collect(),
        )
    };
    let topk = TOPK_VALUES
        .iter()
        .map(|&k| {
            let vals = (0..y.nrows())
                .map(|i| topk_precision(y.row(i), pred.row(i), mask.row(i), k))
                .collect();
            (k, Aggregate::from_values(vals))
        })
        .collect();
    Ok(EvalReport {
        drugwise_pearson: per(Axis(1), masked_pearson),
        drugwise_rmse: per(Axis(1), masked_rmse),
        samplewise_pearson: per(Axis(0), masked_pearson),
        samplewise_rmse: per(Axis(0), masked_rmse),
        topk_precision: topk,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    fn ones(n: usize) -> Array1<f64> {
        Array1::ones(n)
    }

    #[test]
    fn pearson_examples() {
        let a = array![1.0, 2.0, 3.0];
        assert_eq!(masked_pearson(a.view(), a.view(), ones(3).view()), Some(1.0));
        let b = array![3.0, 2.0, 1.0];
        let r = masked_pearson(a.view(), b.view(), ones(3).view()).unwrap();
        assert!((r + 1.0).abs() < 1e-15);
        let a = array![1.0, 2.0, 3.0, 4.0];
        let b = array![1.0, 2.0, 100.0, 4.0];
        let m = array![1.0, 1.0, 0.0, 1.0];
        let r = masked_pearson(a.view(), b.view(), m.view()).unwrap();
        assert!((r - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pearson_undefined_cases() {
        let a = array![1.0, 2.0];
        assert_eq!(masked_pearson(a.view(), a.view(), array![1.0, 0.0].view()), None);
        let c = array![5.0, 5.0];
        assert_eq!(masked_pearson(c.view(), a.view(), ones(2).view()), None);
    }

    #[test]
    fn rmse_examples() {
        let a = array![0.0, 0.0];
        let b = array![3.0, 4.0];
        let r = masked_rmse(a.view(), b.view(), ones(2).view()).unwrap();
        assert!((r - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(masked_rmse(b.view(), b.view(), ones(2).view()), Some(0.0));
        assert_eq!(masked_rmse(a.view(), b.view(), array![0.0, 0.0].view()), None);
        let b2 = array![3.0, 1e6];
        let m = array![1.0, 0.0];
        assert_eq!(
            masked_rmse(a.view(), b.view(), m.view()),
            masked_rmse(a.view(), b2.view(), m.view())
        );
    }

    #[test]
    fn topk_examples() {
        let y = array![0.1, 0.2, 0.3, 0.4];
        let p = array![0.2, 0.1, 0.5, 0.6];
        assert_eq!(topk_precision(y.view(), p.view(), ones(4).view(), 2), Some(1.0));
        let y: Array1<f64> = (0..10).map(|i| i as f64).collect();
        let rev: Array1<f64> = (0..10).map(|i| -(i as f64)).collect();
        assert_eq!(topk_precision(y.view(), rev.view(), ones(10).view(), 1), Some(0.0));
        for k in 1..=10 {
            assert_eq!(topk_precision(y.view(), y.view(), ones(10).view(), k), Some(1.0));
        }
        assert_eq!(topk_precision(y.view(), y.view(), ones(10).view(), 11), None);
    }

    #[test]
    fn identical_prediction_report() {
        let y = array![[0.1, 0.5, 0.3], [0.9, 0.2, 0.4], [0.3, 0.8, 0.6]];
        let r = matrix_report(&y, &y, &Matrix::ones((3, 3))).unwrap();
        assert_eq!(r.drugwise_pearson_mean(), 1.0);
        assert_eq!(r.samplewise_pearson_mean(), 1.0);
        assert_eq!(r.drugwise_rmse_mean(), 0.0);
        assert_eq!(r.samplewise_rmse_mean(), 0.0);
        assert_eq!(r.topk_precision[&1].mean, Some(1.0));
        assert_eq!(r.topk_precision[&5].excluded, 3);
    }

    #[test]
    fn transpose_duality() {
        let y = array![[0.1, 0.5, 0.3, 0.2], [0.9, 0.2, 0.4, 0.1], [0.3, 0.8, 0.6, 0.7]];
        let p = array![[0.2, 0.4, 0.3, 0.1], [0.7, 0.3, 0.5, 0.2], [0.1, 0.9, 0.5, 0.8]];
        let m = array![[1.0, 1.0, 0.0, 1.0], [1.0, 1.0, 1.0, 1.0], [0.0, 1.0, 1.0, 1.0]];
        let a = matrix_report(&y, &p, &m).unwrap();
        let b = matrix_report(&y.t().to_owned(), &p.t().to_owned(), &m.t().to_owned()).unwrap();
        assert_eq!(a.drugwise_pearson, b.samplewise_pearson);
        assert_eq!(a.drugwise_rmse, b.samplewise_rmse);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let y = Matrix::zeros((2, 3));
        assert!(matrix_report(&y, &Matrix::zeros((3, 2)), &y).is_err());
    }
}
