use rayon::prelude::*;

use super::{Grads, ParamGroup, TinyNet};
use crate::{Error, Field2D, Result};

/// Borrowed training example.
#[derive(Debug, Clone, Copy)]
pub struct LabeledImage<'a> {
    pub image: &'a Field2D,
    pub y_p: &'a [u8],
    pub y_s: Option<&'a [u8]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    /// `loss_p + lambda * loss_s`, batch mean.
    pub total: f64,
    pub loss_p: f64,
    /// NaN when the batch carries no sub-class labels.
    pub loss_s: f64,
}

fn check_targets(targets: &[u8]) -> Result<()> {
    match targets.iter().find(|&&y| y > 1) {
        Some(y) => Err(Error::InvalidArgument(format!(
            "target {y} not in {{0, 1}}"
        ))),
        None => Ok(()),
    }
}

/// Mean over labels of binary cross-entropy on logits, `max(z,0) - z*y + ln(1 + e^-|z|)`.
pub fn bce_multilabel(logits: &[f64], targets: &[u8]) -> Result<f64> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::Dimension(format!(
            "{} logits vs {} targets",
            logits.len(),
            targets.len()
        )));
    }
    check_targets(targets)?;
    let sum: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| z.max(0.0) - z * y as f64 + (-z.abs()).exp().ln_1p())
        .sum();
    Ok(sum / logits.len() as f64)
}

/// d bce_multilabel / d logits.
pub fn bce_multilabel_grad(logits: &[f64], targets: &[u8]) -> Vec<f64> {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| (sigmoid(z) - y as f64) / n)
        .collect()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) struct BatchResult {
    pub loss: LossBreakdown,
    pub grads: Grads,
}

pub(crate) fn joint_loss_inner(
    net: &TinyNet,
    batch: &[LabeledImage<'_>],
    lambda: f64,
    freeze_sub_head: bool,
) -> Result<BatchResult> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda = {lambda}")));
    }
    let n_sub = net.config().n_sub_outputs();
    for ex in batch {
        if ex.y_p.len() != net.config().n_classes {
            return Err(Error::Dimension(format!(
                "y_p of length {} for {} classes",
                ex.y_p.len(),
                net.config().n_classes
            )));
        }
        match ex.y_s {
            None if lambda > 0.0 => {
                return Err(Error::InvalidArgument(
                    "sub-class labels required when lambda > 0".into(),
                ))
            }
            Some(ys) if ys.len() != n_sub => {
                return Err(Error::Dimension(format!(
                    "y_s of length {} for {n_sub} sub-class outputs",
                    ys.len()
                )))
            }
            _ => {}
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let per_example = batch
        .par_iter()
        .map(|ex| {
            let mut lp = 0.0;
            let mut ls = f64::NAN;
            let (_, grads) = net.backward(ex.image, |out| {
                lp = bce_multilabel(&out.logits_p, ex.y_p)?;
                let g_p: Vec<f64> = bce_multilabel_grad(&out.logits_p, ex.y_p)
                    .into_iter()
                    .map(|g| g * scale)
                    .collect();
                let g_s = match ex.y_s {
                    Some(ys) => {
                        ls = bce_multilabel(&out.logits_s, ys)?;
                        bce_multilabel_grad(&out.logits_s, ys)
                            .into_iter()
                            .map(|g| g * scale * lambda)
                            .collect()
                    }
                    None => vec![0.0; out.logits_s.len()],
                };
                Ok((g_p, g_s))
            })?;
            Ok((lp, ls, grads))
        })
        .collect::<Result<Vec<_>>>()?;

    // fixed-order reduction keeps results independent of scheduling
    let mut grads = Grads::zeros_like(net);
    let mut loss_p = 0.0;
    let mut loss_s = 0.0;
    for (lp, ls, g) in per_example {
        loss_p += lp;
        loss_s += ls;
        grads.add_assign(&g);
    }
    loss_p *= scale;
    loss_s *= scale;
    if freeze_sub_head || lambda == 0.0 {
        for (t, p) in grads.tensors.iter_mut().zip(net.params()) {
            if p.group() == ParamGroup::HeadS {
                t.fill(0.0);
            }
        }
    }
    let sub_term = if lambda > 0.0 { lambda * loss_s } else { 0.0 };
    Ok(BatchResult {
        loss: LossBreakdown {
            total: loss_p + sub_term,
            loss_p,
            loss_s,
        },
        grads,
    })
}

/// `L = mean_batch(L_p + lambda * L_s)` and its gradient over all parameters.
///
/// With `freeze_sub_head` the sub-class head gradients are zeroed.
pub fn joint_loss(
    net: &TinyNet,
    batch: &[LabeledImage<'_>],
    lambda: f64,
    freeze_sub_head: bool,
) -> Result<(LossBreakdown, Grads)> {
    let r = joint_loss_inner(net, batch, lambda, freeze_sub_head)?;
    Ok((r.loss, r.grads))
}
