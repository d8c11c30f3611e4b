//! Output heads on top of encoder hidden states.

use super::tensor::{softmax_in_place, Mat, Real};
use super::Parameters;
use crate::error::{Error, Result};

/// Aggregate sequence representation: row 0, the `[CLS]` position.
pub fn cls_pool<T: Real>(hidden: &Mat<T>) -> Vec<T> {
    hidden.row(0).to_vec()
}

/// Gathers the given rows into a new matrix.
pub fn gather_rows<T: Real>(hidden: &Mat<T>, positions: &[usize]) -> Result<Mat<T>> {
    let mut out = Mat::zeros(positions.len(), hidden.cols);
    for (i, &p) in positions.iter().enumerate() {
        if p >= hidden.rows {
            return Err(Error::invalid(format!("position {p} outside sequence of length {}", hidden.rows)));
        }
        out.row_mut(i).copy_from_slice(hidden.row(p));
    }
    Ok(out)
}

/// Vocabulary logits at the given positions.
pub fn mlm_logits<T: Real>(hidden: &Mat<T>, positions: &[usize], params: &Parameters<T>) -> Result<Mat<T>> {
    Ok(params.mlm.forward(&gather_rows(hidden, positions)?))
}

pub fn softmax_rows<T: Real>(mut logits: Mat<T>) -> Vec<Vec<T>> {
    (0..logits.rows)
        .map(|r| {
            let row = logits.row_mut(r);
            softmax_in_place(row);
            row.to_vec()
        })
        .collect()
}

/// Per-position probability distribution over the vocabulary.
pub fn mlm_head<T: Real>(hidden: &Mat<T>, positions: &[usize], params: &Parameters<T>) -> Result<Vec<Vec<T>>> {
    Ok(softmax_rows(mlm_logits(hidden, positions, params)?))
}

pub fn rii_logits<T: Real>(cls: &[T], params: &Parameters<T>) -> Vec<T> {
    params.rii.forward(&Mat::from_vec(1, cls.len(), cls.to_vec())).data
}

/// Class distribution from the fine-tuning classifier.
pub fn classify_head<T: Real>(cls: &[T], params: &Parameters<T>, n_classes: usize) -> Result<Vec<T>> {
    let head = params.classifier.as_ref().ok_or_else(|| Error::MissingTensor("heads.classifier.weight".into()))?;
    if n_classes < 2 || head.weight.cols != n_classes {
        return Err(Error::invalid(format!(
            "classifier has {} classes, {} requested",
            head.weight.cols, n_classes
        )));
    }
    let mut logits = head.forward(&Mat::from_vec(1, cls.len(), cls.to_vec())).data;
    softmax_in_place(&mut logits);
    Ok(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;

    #[test]
    fn zero_head_is_uniform() {
        let mut p: Parameters<f64> = Parameters::init(EncoderConfig::tiny(50), 0).unwrap().with_classifier(12, 0).unwrap();
        p.mlm.weight.fill_zero();
        let h = Mat::from_vec(2, 8, (0..16).map(|x| x as f64).collect());
        let d = mlm_head(&h, &[0, 1], &p).unwrap();
        assert!(d.iter().flatten().all(|&x| (x - 1.0 / 50.0).abs() < 1e-15));
        p.classifier.as_mut().unwrap().weight.fill_zero();
        let c = classify_head(h.row(1), &p, 12).unwrap();
        assert!(c.iter().all(|&x| (x - 1.0 / 12.0).abs() < 1e-15));
        assert!(classify_head(h.row(1), &p, 4).is_err());
    }

    #[test]
    fn cls_pool_ignores_other_rows() {
        let a = Mat::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(3, 2, vec![1.0, 2.0, 5.0, 6.0, 3.0, 4.0]);
        assert_eq!(cls_pool(&a), vec![1.0, 2.0]);
        assert_eq!(cls_pool(&a), cls_pool(&b));
    }
}
