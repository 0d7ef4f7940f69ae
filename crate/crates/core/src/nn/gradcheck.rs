use super::loss::{bce_multilabel, joint_loss_inner, LabeledImage};
use super::{Grads, ParamGroup, TinyNet};
use crate::{Error, Result, SeededRng};

/// Coordinates compared per check (or all, when the network is smaller).
pub const GRAD_CHECK_COORDS: usize = 256;
/// Denominator floor of the relative error, so exact zeros compare on an absolute scale.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Coordinates whose `+eps` / `-eps` evaluations fell on different sides of a ReLU kink.
    pub coords_skipped: usize,
    /// `(param name, offset)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

fn loss_and_pattern(
    net: &TinyNet,
    batch: &[LabeledImage<'_>],
    lambda: f64,
) -> Result<(f64, Vec<bool>)> {
    let mut total = 0.0;
    let mut pattern = Vec::new();
    for ex in batch {
        let acts = net.encode(ex.image)?;
        pattern.extend(acts.relu_pattern());
        let out = net.read_out(acts);
        total += bce_multilabel(&out.logits_p, ex.y_p)?;
        if lambda > 0.0 {
            let ys = ex
                .y_s
                .ok_or_else(|| Error::InvalidArgument("missing y_s".into()))?;
            total += lambda * bce_multilabel(&out.logits_s, ys)?;
        }
    }
    Ok((total / batch.len() as f64, pattern))
}

/// Compares the analytic joint-loss gradient with central differences on a seeded random
/// subset of at least 200 coordinates. Sub-class head coordinates are skipped when `lambda == 0`.
pub fn grad_check(
    net: &TinyNet,
    batch: &[LabeledImage<'_>],
    lambda: f64,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let analytic = joint_loss_inner(net, batch, lambda, false)?.grads;
    grad_check_against(net, batch, lambda, eps, seed, &analytic)
}

/// As [`grad_check`], against caller-supplied gradients.
pub fn grad_check_against(
    net: &TinyNet,
    batch: &[LabeledImage<'_>],
    lambda: f64,
    eps: f64,
    seed: u64,
    analytic: &Grads,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "eps {eps} outside [1e-6, 1e-3]"
        )));
    }
    let mut coords: Vec<(usize, usize)> = net
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| lambda > 0.0 || p.group() != ParamGroup::HeadS)
        .flat_map(|(t, p)| (0..p.data.len()).map(move |k| (t, k)))
        .collect();
    SeededRng::new(seed).shuffle(&mut coords);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        coords_skipped: 0,
        worst: None,
    };
    let mut probe = net.clone();
    for (t, k) in coords {
        if report.coords_checked >= GRAD_CHECK_COORDS {
            break;
        }
        let orig = net.params()[t].data[k];
        let plus = (orig as f64 + eps) as f32;
        let minus = (orig as f64 - eps) as f32;
        probe.params_mut()[t].data[k] = plus;
        let (lp, pat_p) = loss_and_pattern(&probe, batch, lambda)?;
        probe.params_mut()[t].data[k] = minus;
        let (lm, pat_m) = loss_and_pattern(&probe, batch, lambda)?;
        probe.params_mut()[t].data[k] = orig;
        if pat_p != pat_m {
            report.coords_skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (plus as f64 - minus as f64);
        let a = analytic.tensors[t][k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        report.coords_checked += 1;
        if (rel > report.max_rel_error || report.worst.is_none()) && rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((net.params()[t].name.clone(), k));
        }
    }
    Ok(report)
}
