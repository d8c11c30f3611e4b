//! Batch-level losses that run the encoder and, optionally, backpropagate
//! into a gradient accumulator of the same shape as the parameters.

use super::encoder::{encode_backward, encode_traced, Mode};
use super::heads::{cls_pool, gather_rows, rii_logits};
use super::loss::{cross_entropy_logits, ssi_symmetric};
use super::tensor::{lit, Mat, Real};
use super::Parameters;
use crate::error::{Error, Result};
use crate::pretrain::{M3lmBatch, RiiBatch, SsiBatch};
use crate::tokenizer::EncodedInput;

const TAG_M3LM: u64 = 1;
const TAG_SSI: u64 = 2;
const TAG_RII: u64 = 3;
const TAG_FINETUNE: u64 = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown<T> {
    pub m3lm: T,
    pub ssi: T,
    pub rii: T,
    pub penalty: T,
    pub total: T,
}

fn cls_grad<T: Real>(rows: usize, cols: usize, d_cls: &[T]) -> Mat<T> {
    let mut d = Mat::zeros(rows, cols);
    d.row_mut(0).copy_from_slice(d_cls);
    d
}

/// Summed masked-token negative log-likelihood over the batch.
pub fn m3lm_objective<T: Real>(
    params: &Parameters<T>,
    batch: &M3lmBatch,
    mode: Mode,
    mut grads: Option<&mut Parameters<T>>,
) -> Result<T> {
    let mut total = T::zero();
    for (i, input) in batch.inputs.iter().enumerate() {
        if batch.positions[i].is_empty() {
            continue;
        }
        let trace = encode_traced(input, params, mode.fork(TAG_M3LM << 32 | i as u64))?;
        let selected = gather_rows(&trace.output, &batch.positions[i])?;
        let logits = params.mlm.forward(&selected);
        let (loss, d_logits) = cross_entropy_logits(&logits, &batch.targets[i])?;
        total += loss;
        if let Some(g) = grads.as_deref_mut() {
            let d_sel = params.mlm.backward(&selected, &d_logits, &mut g.mlm);
            let mut d_out = Mat::zeros(trace.output.rows, trace.output.cols);
            for (k, &p) in batch.positions[i].iter().enumerate() {
                for (o, &x) in d_out.row_mut(p).iter_mut().zip(d_sel.row(k)) {
                    *o += x;
                }
            }
            encode_backward(params, &trace, &d_out, g);
        }
    }
    Ok(total)
}

/// Final `[CLS]` vectors for anchors and positives, in inference mode.
pub fn ssi_embeddings<T: Real>(params: &Parameters<T>, batch: &SsiBatch) -> Result<(Vec<Vec<T>>, Vec<Vec<T>>)> {
    let enc = |x: &EncodedInput| encode_traced(x, params, Mode::Eval).map(|t| cls_pool(&t.output));
    Ok((
        batch.anchors.iter().map(enc).collect::<Result<_>>()?,
        batch.positives.iter().map(enc).collect::<Result<_>>()?,
    ))
}

/// Symmetric in-batch contrastive loss over final `[CLS]` vectors.
pub fn ssi_objective<T: Real>(
    params: &Parameters<T>,
    batch: &SsiBatch,
    mode: Mode,
    grads: Option<&mut Parameters<T>>,
) -> Result<T> {
    let n = batch.anchors.len();
    let traces = batch
        .anchors
        .iter()
        .chain(&batch.positives)
        .enumerate()
        .map(|(i, x)| encode_traced(x, params, mode.fork(TAG_SSI << 32 | i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let anchors: Vec<Vec<T>> = traces[..n].iter().map(|t| cls_pool(&t.output)).collect();
    let positives: Vec<Vec<T>> = traces[n..].iter().map(|t| cls_pool(&t.output)).collect();
    let (loss, d_a, d_p) = ssi_symmetric(&anchors, &positives, &batch.source_ids)?;
    if let Some(g) = grads {
        for (trace, d) in traces.iter().zip(d_a.iter().chain(&d_p)) {
            encode_backward(params, trace, &cls_grad(trace.output.rows, trace.output.cols, d), g);
        }
    }
    Ok(loss)
}

/// Reordering detection cross-entropy, plus the number of correct predictions.
pub fn rii_objective<T: Real>(
    params: &Parameters<T>,
    batch: &RiiBatch,
    mode: Mode,
    mut grads: Option<&mut Parameters<T>>,
) -> Result<(T, usize)> {
    let mut total = T::zero();
    let mut correct = 0;
    for (i, input) in batch.inputs.iter().enumerate() {
        let trace = encode_traced(input, params, mode.fork(TAG_RII << 32 | i as u64))?;
        let cls = cls_pool(&trace.output);
        let logits = Mat::from_vec(1, 2, rii_logits(&cls, params));
        let label = batch.labels[i];
        let (loss, d_logits) = cross_entropy_logits(&logits, &[label as u32])?;
        total += loss;
        correct += ((logits.data[1] > logits.data[0]) == label) as usize;
        if let Some(g) = grads.as_deref_mut() {
            let x = Mat::from_vec(1, cls.len(), cls);
            let d_cls = params.rii.backward(&x, &d_logits, &mut g.rii);
            encode_backward(params, &trace, &cls_grad(trace.output.rows, trace.output.cols, &d_cls.data), g);
        }
    }
    Ok((total, correct))
}

/// Sum of the three task losses and the weight penalty. Gradients of the
/// penalty are included when `grads` is given.
pub fn pretrain_objective<T: Real>(
    params: &Parameters<T>,
    m3lm: Option<&M3lmBatch>,
    ssi: Option<&SsiBatch>,
    rii: Option<&RiiBatch>,
    lambda: T,
    mode: Mode,
    mut grads: Option<&mut Parameters<T>>,
) -> Result<LossBreakdown<T>> {
    let mut out = LossBreakdown::default();
    if let Some(b) = m3lm {
        out.m3lm = m3lm_objective(params, b, mode, grads.as_deref_mut())?;
    }
    if let Some(b) = ssi {
        out.ssi = ssi_objective(params, b, mode, grads.as_deref_mut())?;
    }
    if let Some(b) = rii {
        out.rii = rii_objective(params, b, mode, grads.as_deref_mut())?.0;
    }
    if lambda > T::zero() {
        out.penalty = lambda * params.penalty_sum_sq();
        if let Some(g) = grads.as_deref_mut() {
            params.add_penalty_grad(lambda, g);
        }
    }
    out.total = out.m3lm + out.ssi + out.rii + out.penalty;
    if !out.total.is_finite() {
        return Err(Error::NonFiniteGradient("loss".into()));
    }
    if let Some(g) = grads {
        g.check_finite()?;
    }
    Ok(out)
}

/// Classification cross-entropy through the fine-tuning head. When
/// `train_encoder` is false only head gradients are accumulated.
pub fn classify_objective<T: Real>(
    params: &Parameters<T>,
    inputs: &[EncodedInput],
    labels: &[usize],
    mode: Mode,
    train_encoder: bool,
    mut grads: Option<&mut Parameters<T>>,
) -> Result<(T, usize)> {
    let head = params.classifier.as_ref().ok_or_else(|| Error::MissingTensor("heads.classifier.weight".into()))?;
    let mut total = T::zero();
    let mut correct = 0;
    for (i, input) in inputs.iter().enumerate() {
        let trace = encode_traced(input, params, mode.fork(TAG_FINETUNE << 32 | i as u64))?;
        let x = Mat::from_vec(1, trace.output.cols, cls_pool(&trace.output));
        let logits = head.forward(&x);
        let (loss, d_logits) = cross_entropy_logits(&logits, &[labels[i] as u32])?;
        total += loss;
        let best = argmax(&logits.data);
        correct += (best == labels[i]) as usize;
        if let Some(g) = grads.as_deref_mut() {
            let gh = g.classifier.as_mut().expect("gradient mirrors parameters");
            let d_cls = head.backward(&x, &d_logits, gh);
            if train_encoder {
                encode_backward(params, &trace, &cls_grad(trace.output.rows, trace.output.cols, &d_cls.data), g);
            }
        }
    }
    Ok((total, correct))
}

/// Teacher-forced decoder loss summed over the batch.
pub fn sequence_objective<T: Real>(
    params: &Parameters<T>,
    inputs: &[EncodedInput],
    targets: &[Vec<u32>],
    starts: &[u32],
    mode: Mode,
    train_encoder: bool,
    mut grads: Option<&mut Parameters<T>>,
) -> Result<T> {
    let mut total = T::zero();
    for (i, input) in inputs.iter().enumerate() {
        let trace = encode_traced(input, params, mode.fork(TAG_FINETUNE << 32 | i as u64))?;
        let (loss, d_mem) = super::decoder::sequence_loss(&trace.output, starts[i], &targets[i], params, grads.as_deref_mut())?;
        total += loss;
        if train_encoder {
            if let Some(g) = grads.as_deref_mut() {
                encode_backward(params, &trace, &d_mem, g);
            }
        }
    }
    Ok(total)
}

pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Mean of a summed loss over `count` items, for reporting.
pub fn mean<T: Real>(sum: T, count: usize) -> T {
    if count == 0 {
        T::zero()
    } else {
        sum / lit(count as f64)
    }
}
