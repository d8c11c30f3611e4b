//! Loss functions and their gradients with respect to head outputs.

use super::tensor::{dot, lit, log_sum_exp, softmax_in_place, Mat, Real};
use super::Parameters;
use crate::error::{Error, Result};

/// `−Σ ln p(target)` over probability rows. Zero probabilities are clamped to
/// the smallest positive value instead of producing infinity.
pub fn m3lm_loss<T: Real>(distributions: &[Vec<T>], targets: &[u32]) -> Result<T> {
    if distributions.len() != targets.len() {
        return Err(Error::invalid("one distribution per target required"));
    }
    let mut loss = T::zero();
    for (d, &t) in distributions.iter().zip(targets) {
        let p = *d.get(t as usize).ok_or(Error::IdOutOfRange { id: t, size: d.len() })?;
        loss -= p.max(T::min_positive_value()).ln();
    }
    Ok(loss)
}

/// Summed cross-entropy computed from logits through log-sum-exp.
/// Returns the loss and `dL/dlogits`.
pub fn cross_entropy_logits<T: Real>(logits: &Mat<T>, targets: &[u32]) -> Result<(T, Mat<T>)> {
    if logits.rows != targets.len() {
        return Err(Error::invalid("one logit row per target required"));
    }
    let mut loss = T::zero();
    let mut grad = logits.clone();
    for (r, &t) in targets.iter().enumerate() {
        if t as usize >= logits.cols {
            return Err(Error::IdOutOfRange { id: t, size: logits.cols });
        }
        let row = logits.row(r);
        loss += log_sum_exp(row) - row[t as usize];
        let g = grad.row_mut(r);
        softmax_in_place(g);
        g[t as usize] -= T::one();
    }
    Ok((loss, grad))
}

/// Mean per-token variant, for reporting.
pub fn m3lm_loss_mean<T: Real>(distributions: &[Vec<T>], targets: &[u32]) -> Result<T> {
    if targets.is_empty() {
        return Ok(T::zero());
    }
    Ok(m3lm_loss(distributions, targets)? / lit(targets.len() as f64))
}

fn anchor_term<T: Real>(anchor: &[T], positive: &[T], negatives: &[&[T]]) -> Result<T> {
    if negatives.is_empty() {
        return Err(Error::invalid("anchor has no negatives"));
    }
    let mut scores = Vec::with_capacity(negatives.len() + 1);
    scores.push(dot(anchor, positive));
    scores.extend(negatives.iter().map(|n| dot(anchor, n)));
    Ok(log_sum_exp(&scores) - scores[0])
}

/// Contrastive loss summed over anchors, each with its own negative set.
pub fn ssi_loss<T: Real>(anchors: &[Vec<T>], positives: &[Vec<T>], negatives: &[Vec<Vec<T>>]) -> Result<T> {
    if anchors.len() != positives.len() || anchors.len() != negatives.len() {
        return Err(Error::invalid("anchors, positives and negative sets must align"));
    }
    let mut loss = T::zero();
    for ((a, p), negs) in anchors.iter().zip(positives).zip(negatives) {
        let refs: Vec<&[T]> = negs.iter().map(|n| n.as_slice()).collect();
        loss += anchor_term(a, p, &refs)?;
    }
    Ok(loss)
}

/// In-batch symmetric contrastive loss. Every view (both batches) serves as an
/// anchor; its positive is the view at the same row in the other batch, its
/// negatives are all views of rows with a different source.
/// Returns the loss and gradients with respect to each anchor and positive vector.
pub fn ssi_symmetric<T: Real>(
    anchors: &[Vec<T>],
    positives: &[Vec<T>],
    source_ids: &[u64],
) -> Result<(T, Vec<Vec<T>>, Vec<Vec<T>>)> {
    let n = anchors.len();
    if n < 2 || positives.len() != n || source_ids.len() != n {
        return Err(Error::invalid("contrastive batch needs at least 2 aligned rows"));
    }
    let views: Vec<&[T]> = anchors.iter().chain(positives).map(|v| v.as_slice()).collect();
    let row = |v: usize| v % n;
    let mut grads: Vec<Vec<T>> = views.iter().map(|v| vec![T::zero(); v.len()]).collect();
    let mut loss = T::zero();
    for a in 0..2 * n {
        let pos = (a + n) % (2 * n);
        let mut others = vec![pos];
        others.extend((0..2 * n).filter(|&b| source_ids[row(b)] != source_ids[row(a)]));
        if others.len() == 1 {
            return Err(Error::invalid(format!("row {} has no negatives (all rows share its source)", row(a))));
        }
        let mut probs: Vec<T> = others.iter().map(|&b| dot(views[a], views[b])).collect();
        loss += log_sum_exp(&probs) - probs[0];
        softmax_in_place(&mut probs);
        for (k, &b) in others.iter().enumerate() {
            let ds = if k == 0 { probs[k] - T::one() } else { probs[k] };
            for i in 0..views[a].len() {
                let (va, vb) = (views[a][i], views[b][i]);
                grads[a][i] += ds * vb;
                grads[b][i] += ds * va;
            }
        }
    }
    let dp = grads.split_off(n);
    Ok((loss, grads, dp))
}

/// Binary cross-entropy `−[y ln p + (1−y) ln(1−p)]`.
pub fn bce<T: Real>(p: T, label: bool) -> T {
    let q = if label { p } else { T::one() - p };
    -q.max(T::min_positive_value()).ln()
}

/// Reordering head: probability of "reordered" and the loss for `label`,
/// together with `dL/dlogits`.
pub fn rii_head_and_loss<T: Real>(cls: &[T], label: bool, params: &Parameters<T>) -> (T, T, Vec<T>) {
    let logits = super::heads::rii_logits(cls, params);
    let (loss, grad) = cross_entropy_logits(&Mat::from_vec(1, 2, logits.clone()), &[label as u32]).expect("two logits");
    let mut probs = logits;
    softmax_in_place(&mut probs);
    (probs[1], loss, grad.data)
}

/// Sum of the three task losses plus `λ·Σ w²` over penalty-eligible tensors.
pub fn total_pretrain_loss<T: Real>(l_m3lm: T, l_ssi: T, l_rii: T, params: &Parameters<T>, lambda: T) -> Result<T> {
    if lambda < T::zero() {
        return Err(Error::invalid("penalty coefficient must be non-negative"));
    }
    let penalty = if lambda == T::zero() { T::zero() } else { lambda * params.penalty_sum_sq() };
    Ok(l_m3lm + l_ssi + l_rii + penalty)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_mlm_is_ln_v() {
        let d = vec![vec![1.0 / 50.0; 50]];
        assert!((m3lm_loss(&d, &[7]).unwrap() - 50f64.ln()).abs() < 1e-12);
        let one_hot = vec![{
            let mut v = vec![0.0f64; 5];
            v[3] = 1.0;
            v
        }];
        assert_eq!(m3lm_loss(&one_hot, &[3]).unwrap(), 0.0);
        assert!(m3lm_loss(&one_hot, &[2]).unwrap().is_finite());
    }

    #[test]
    fn equal_scores_give_ln_one_plus_k() {
        let a = vec![vec![1.0, 0.0]];
        let p = vec![vec![0.5, 3.0]];
        let negs = vec![vec![vec![0.5, -1.0], vec![0.5, 7.0], vec![0.5, 0.0]]];
        assert!((ssi_loss(&a, &p, &negs).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(ssi_loss(&a, &p, &[vec![]]).is_err());
        let big = vec![vec![100.0, 0.0]];
        let l = ssi_loss(&big, &big, &[vec![vec![0.0, 1.0]]]).unwrap();
        assert!(l < 1e-3);
    }

    #[test]
    fn symmetric_matches_explicit_sets() {
        let a = vec![vec![0.3f64, -0.2], vec![0.1, 0.4], vec![-0.5, 0.2]];
        let p = vec![vec![0.2, 0.1], vec![-0.3, 0.3], vec![0.4, 0.4]];
        let src = [1u64, 2, 1];
        let (l, _, _) = ssi_symmetric(&a, &p, &src).unwrap();
        let views: Vec<_> = a.iter().chain(&p).cloned().collect();
        let mut anchors = vec![];
        let mut poss = vec![];
        let mut negs = vec![];
        for v in 0..6 {
            anchors.push(views[v].clone());
            poss.push(views[(v + 3) % 6].clone());
            negs.push((0..6).filter(|&b| src[b % 3] != src[v % 3]).map(|b| views[b].clone()).collect());
        }
        assert!((l - ssi_loss(&anchors, &poss, &negs).unwrap()).abs() < 1e-12);
        assert!(ssi_symmetric(&a[..2], &p[..2], &[4, 4]).is_err());
    }

    #[test]
    fn bce_values() {
        assert!((bce(0.5f64, true) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(bce(1.0f64, true), 0.0);
        assert_eq!(bce(0.0f64, false), 0.0);
    }
}
