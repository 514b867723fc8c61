//! Training objective and evaluation metrics over valid pixels.

use std::fmt;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::field::FlowField;
use crate::tensor::Element;

/// Outlier rule for [`f1_all`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum F1Rule {
    /// Outlier when the error exceeds 3 px *and* 5% of the true magnitude.
    #[default]
    KittiAnd,
    /// Outlier when either threshold is exceeded.
    Or,
}

impl fmt::Display for F1Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            F1Rule::KittiAnd => "kitti-and",
            F1Rule::Or => "or",
        })
    }
}

impl std::str::FromStr for F1Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kitti-and" => Ok(F1Rule::KittiAnd),
            "or" => Ok(F1Rule::Or),
            _ => Err(Error::invalid("F1Rule", format!("unknown rule `{s}`"))),
        }
    }
}

fn check_mask(op: &'static str, h: usize, w: usize, mask: &[bool]) -> Result<usize> {
    if mask.len() != h * w {
        return Err(Error::shape(op, format!("mask of {}", h * w), &[mask.len()]));
    }
    match mask.iter().filter(|&&m| m).count() {
        0 => Err(Error::invalid(op, "valid mask is empty; no pixel has ground truth")),
        n => Ok(n),
    }
}

/// Per-pixel `(error, true magnitude)` over valid pixels.
fn errors<'a>(
    op: &'static str,
    pred: &'a FlowField,
    gt: &'a FlowField,
    mask: &'a [bool],
) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    pred.same_grid(gt, op)?;
    check_mask(op, gt.height(), gt.width(), mask)?;
    let p = pred.values().data().chunks_exact(2);
    let g = gt.values().data().chunks_exact(2);
    Ok(p.zip(g).zip(mask).filter(|(_, &m)| m).map(|((p, g), _)| {
        let (du, dv) = (p[0] as f64 - g[0] as f64, p[1] as f64 - g[1] as f64);
        let (gu, gv) = (g[0] as f64, g[1] as f64);
        (du.hypot(dv), gu.hypot(gv))
    }))
}

/// Mean end-point error over valid pixels.
pub fn epe(pred: &FlowField, gt: &FlowField, valid: &[bool]) -> Result<f64> {
    let (sum, n) = errors("epe", pred, gt, valid)?.fold((0.0, 0usize), |(s, n), (e, _)| (s + e, n + 1));
    Ok(sum / n as f64)
}

/// Fraction of valid pixels counted as outliers under `rule`.
pub fn f1_all(pred: &FlowField, gt: &FlowField, valid: &[bool], rule: F1Rule) -> Result<f64> {
    let (bad, n) = errors("f1_all", pred, gt, valid)?.fold((0usize, 0usize), |(b, n), (e, mag)| {
        let (abs, rel) = (e > 3.0, e > 0.05 * mag);
        let outlier = match rule {
            F1Rule::KittiAnd => abs && rel,
            F1Rule::Or => abs || rel,
        };
        (b + outlier as usize, n + 1)
    });
    Ok(bad as f64 / n as f64)
}

/// Weight of estimate `i` out of `0..=m`, so the last estimate has weight 1.
pub fn sequence_weight(i: usize, m: usize, gamma: f64) -> f64 {
    gamma.powi((m - i) as i32)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid("sequence_loss", format!("gamma {gamma} outside (0, 1]")))
    }
}

/// Weighted sum over `V₀ … V_m` of the mean per-pixel `|Δu| + |Δv|`.
pub fn sequence_loss(preds: &[FlowField], gt: &FlowField, valid: &[bool], gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    let n = check_mask("sequence_loss", gt.height(), gt.width(), valid)?;
    if preds.is_empty() {
        return Err(Error::invalid("sequence_loss", "no predictions"));
    }
    let m = preds.len() - 1;
    let mut total = 0.0;
    for (i, pred) in preds.iter().enumerate() {
        pred.same_grid(gt, "sequence_loss")?;
        let l1: f64 = pred
            .values()
            .data()
            .chunks_exact(2)
            .zip(gt.values().data().chunks_exact(2))
            .zip(valid)
            .filter(|(_, &m)| m)
            .map(|((p, g), _)| (p[0] as f64 - g[0] as f64).abs() + (p[1] as f64 - g[1] as f64).abs())
            .sum();
        total += sequence_weight(i, m, gamma) * (l1 / n as f64);
    }
    Ok(total)
}

/// Differentiable [`sequence_loss`] over `2×H×W` estimate planes.
pub fn sequence_loss_graph<T: Element>(
    g: &mut Graph<T>,
    preds: &[Var],
    gt: &FlowField,
    valid: &[bool],
    gamma: f64,
) -> Result<Var> {
    check_gamma(gamma)?;
    let (h, w) = (gt.height(), gt.width());
    let n = check_mask("sequence_loss", h, w, valid)?;
    let Some(m) = preds.len().checked_sub(1) else {
        return Err(Error::invalid("sequence_loss", "no predictions"));
    };
    let target = g.constant(gt.to_planes().cast());
    let mut total: Option<Var> = None;
    for (i, &pred) in preds.iter().enumerate() {
        if g.shape(pred) != [2, h, w] {
            return Err(Error::shape("sequence_loss", format!("estimate 2×{h}×{w}"), g.shape(pred)));
        }
        let scale = sequence_weight(i, m, gamma) / n as f64;
        let weights: Vec<f64> = valid
            .iter()
            .chain(valid)
            .map(|&ok| if ok { scale } else { 0.0 })
            .collect();
        let diff = g.sub(pred, target)?;
        let abs = g.abs(diff);
        let term = g.dot_const(abs, weights)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one estimate"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Resolution;

    fn constant(u: f32, v: f32) -> FlowField {
        FlowField::constant(2, 3, u, v, Resolution::Full).unwrap()
    }

    #[test]
    fn three_four_five() {
        let mask = vec![true; 6];
        assert_eq!(epe(&constant(3.0, 4.0), &constant(0.0, 0.0), &mask).unwrap(), 5.0);
        assert_eq!(epe(&constant(1.0, 1.0), &constant(1.0, 1.0), &mask).unwrap(), 0.0);
    }

    #[test]
    fn kitti_dual_threshold() {
        let mask = vec![true; 6];
        let f = |gt: f32, err: f32, rule| f1_all(&constant(gt + err, 0.0), &constant(gt, 0.0), &mask, rule).unwrap();
        assert_eq!(f(100.0, 4.0, F1Rule::KittiAnd), 0.0);
        assert_eq!(f(10.0, 4.0, F1Rule::KittiAnd), 1.0);
        assert_eq!(f(100.0, 4.0, F1Rule::Or), 1.0);
    }

    #[test]
    fn hand_weighted_sequence() {
        let mask = vec![true; 6];
        let gt = constant(0.0, 0.0);
        let preds = [constant(1.5, 0.5), constant(0.5, -0.5)];
        assert!((sequence_loss(&preds, &gt, &mask, 0.8).unwrap() - 2.6).abs() < 1e-12);
        assert_eq!(sequence_loss(&[gt.clone()], &gt, &mask, 0.8).unwrap(), 0.0);
        assert!(sequence_loss(&preds, &gt, &[false; 6], 0.8).is_err());
    }

    #[test]
    fn graph_matches_eager() {
        let mask = [true, false, true, true, false, true];
        let gt = FlowField::new(
            crate::tensor::Tensor::from_fn([2, 3, 2], |i| (i as f32 * 0.7).sin()).unwrap(),
            Resolution::Full,
        )
        .unwrap();
        let preds = [constant(0.3, -0.2), constant(-1.0, 0.4), constant(0.0, 0.1)];
        let want = sequence_loss(&preds, &gt, &mask, 0.85).unwrap();
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = preds.iter().map(|p| g.leaf(p.to_planes().cast())).collect();
        let loss = sequence_loss_graph(&mut g, &vars, &gt, &mask, 0.85).unwrap();
        assert!((g.value(loss).data()[0] - want).abs() < 1e-12);
    }
}
