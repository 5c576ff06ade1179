//! Training objective: negative linear correlation plus KL divergence
//! between a predicted saliency map `S` and its ground truth `G`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Probability floor applied to the normalized prediction inside the KL log.
pub const KL_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cc_term: f64,
    pub kl_term: f64,
    pub total: f64,
}

fn check_pair<F: Element>(op: &'static str, s: &[F], g: &[F]) -> Result<()> {
    if s.len() != g.len() {
        return Err(Error::shape(
            op,
            format!("prediction has {} elements, target {}", s.len(), g.len()),
        ));
    }
    if s.len() < 2 {
        return Err(Error::shape(op, "need at least two elements"));
    }
    Ok(())
}

/// True when a centered sum of squares is indistinguishable from rounding
/// noise on values of magnitude `scale`.
fn negligible(sum_sq: f64, n: f64, scale: f64) -> bool {
    !(sum_sq > n * (f64::EPSILON * scale).powi(2) * 16.0) || !sum_sq.is_finite()
}

fn max_abs<F: Element>(x: &[F]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.as_f64().abs()))
}

/// Pearson correlation of two equally sized buffers, computed in f64.
///
/// Returns `None` when either input has zero variance.
pub fn pearson<F: Element>(s: &[F], g: &[F]) -> Option<f64> {
    let n = s.len() as f64;
    let ms = s.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let mg = g.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let (mut sg, mut ss, mut gg) = (0.0, 0.0, 0.0);
    for (a, b) in s.iter().zip(g) {
        let (da, db) = (a.as_f64() - ms, b.as_f64() - mg);
        sg += da * db;
        ss += da * da;
        gg += db * db;
    }
    if negligible(ss, n, max_abs(s)) || negligible(gg, n, max_abs(g)) {
        return None;
    }
    Some(sg / (ss * gg).sqrt())
}

/// `−cov(S,G) / (σ(S) σ(G))` and its gradient w.r.t. `S`.
///
/// A constant input is an error when `strict`; otherwise it yields a zero
/// term with zero gradient and a logged warning.
pub fn cc_loss_with_grad<F: Element>(s: &[F], g: &[F], strict: bool) -> Result<(f64, Vec<f64>)> {
    check_pair("cc_loss", s, g)?;
    let n = s.len() as f64;
    let ms = s.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let mg = g.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let ds: Vec<f64> = s.iter().map(|v| v.as_f64() - ms).collect();
    let dg: Vec<f64> = g.iter().map(|v| v.as_f64() - mg).collect();
    let ss: f64 = ds.iter().map(|v| v * v).sum();
    let gg: f64 = dg.iter().map(|v| v * v).sum();
    let flat_s = negligible(ss, n, max_abs(s));
    if flat_s || negligible(gg, n, max_abs(g)) {
        let which = if flat_s { "prediction" } else { "target" };
        if strict {
            return Err(Error::degenerate(
                "cc_loss",
                format!("{which} has zero standard deviation"),
            ));
        }
        warn!("cc_loss: {which} is constant; using a zero correlation term");
        return Ok((0.0, vec![0.0; s.len()]));
    }
    let sg: f64 = ds.iter().zip(&dg).map(|(a, b)| a * b).sum();
    let norm = (ss * gg).sqrt();
    let r = sg / norm;
    let grad = ds
        .iter()
        .zip(&dg)
        .map(|(a, b)| -(b / norm - r * a / ss))
        .collect();
    Ok((-r, grad))
}

fn normalized<F: Element>(op: &'static str, which: &str, x: &[F]) -> Result<(Vec<f64>, f64)> {
    let mut sum = 0.0;
    for (i, v) in x.iter().enumerate() {
        let v = v.as_f64();
        if v < 0.0 || !v.is_finite() {
            return Err(Error::InvalidInput(format!(
                "{op}: {which} entry {i} is {v}; maps must be finite and non-negative"
            )));
        }
        sum += v;
    }
    if sum <= 0.0 {
        return Err(Error::degenerate(op, format!("{which} sums to zero")));
    }
    Ok((x.iter().map(|v| v.as_f64() / sum).collect(), sum))
}

/// `Σ G̃ log(G̃ / max(S̃, ε))` over maps normalized to unit sum, and its
/// gradient w.r.t. the unnormalized `S`.
pub fn kl_loss_with_grad<F: Element>(s: &[F], g: &[F]) -> Result<(f64, Vec<f64>)> {
    check_pair("kl_loss", s, g)?;
    let (sn, s_sum) = normalized("kl_loss", "prediction", s)?;
    let (gn, _) = normalized("kl_loss", "target", g)?;
    let mut value = 0.0;
    // q = dKL/dS̃
    let mut q = vec![0.0; s.len()];
    for i in 0..s.len() {
        let floored = sn[i] < KL_EPS;
        let denom = if floored { KL_EPS } else { sn[i] };
        if gn[i] > 0.0 {
            value += gn[i] * (gn[i] / denom).ln();
            if !floored {
                q[i] = -gn[i] / denom;
            }
        }
    }
    let inner: f64 = q.iter().zip(&sn).map(|(a, b)| a * b).sum();
    let grad = q.iter().map(|qi| (qi - inner) / s_sum).collect();
    Ok((value, grad))
}

/// Strict negative-correlation loss on two maps of identical shape.
pub fn cc_loss<F: Element>(s: &Tensor<F>, g: &Tensor<F>) -> Result<f64> {
    same_shape("cc_loss", s, g)?;
    Ok(cc_loss_with_grad(s.data(), g.data(), true)?.0)
}

pub fn kl_loss<F: Element>(s: &Tensor<F>, g: &Tensor<F>) -> Result<f64> {
    same_shape("kl_loss", s, g)?;
    Ok(kl_loss_with_grad(s.data(), g.data())?.0)
}

pub fn total_loss<F: Element>(s: &Tensor<F>, g: &Tensor<F>) -> Result<LossReport> {
    let cc_term = cc_loss(s, g)?;
    let kl_term = kl_loss(s, g)?;
    Ok(LossReport {
        cc_term,
        kl_term,
        total: cc_term + kl_term,
    })
}

fn same_shape<F: Element>(op: &'static str, s: &Tensor<F>, g: &Tensor<F>) -> Result<()> {
    if s.shape() != g.shape() {
        return Err(Error::shape(
            op,
            format!("prediction {:?} vs target {:?}", s.shape(), g.shape()),
        ));
    }
    Ok(())
}

/// Records `L_CC + L_KL` on the graph; returns the loss node and its parts.
pub fn total_loss_on_graph<F: Element>(
    graph: &mut Graph<F>,
    prediction: Var,
    target: &Tensor<F>,
    strict: bool,
) -> Result<(Var, LossReport)> {
    if graph.shape(prediction) != target.shape() {
        return Err(Error::shape(
            "total_loss",
            format!(
                "prediction {:?} vs target {:?}",
                graph.shape(prediction),
                target.shape()
            ),
        ));
    }
    let cc = graph.cc_loss(prediction, target, strict)?;
    let kl = graph.kl_loss(prediction, target)?;
    let total = graph.add(cc, kl)?;
    let cc_term = graph.value(cc).data()[0].as_f64();
    let kl_term = graph.value(kl).data()[0].as_f64();
    Ok((
        total,
        LossReport {
            cc_term,
            kl_term,
            total: graph.value(total).data()[0].as_f64(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len() / 2, 2], v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_correlation_and_anticorrelation() {
        let s = map(&[0.1, 0.5, 0.3, 0.9, 0.2, 0.4]);
        assert!((cc_loss(&s, &s).unwrap() + 1.0).abs() < 1e-9);
        let neg = map(&s.data().iter().map(|v| 2.0 - v).collect::<Vec<_>>());
        assert!((cc_loss(&neg, &s).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_map_is_degenerate_when_strict() {
        let s = map(&[0.5; 6]);
        let g = map(&[0.1, 0.5, 0.3, 0.9, 0.2, 0.4]);
        assert!(matches!(cc_loss(&s, &g), Err(Error::Degenerate { .. })));
        let (v, grad) = cc_loss_with_grad(s.data(), g.data(), false).unwrap();
        assert_eq!(v, 0.0);
        assert!(grad.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn kl_identical_is_zero_and_rejects_negatives() {
        let g = map(&[0.1, 0.5, 0.0, 0.9, 0.2, 0.4]);
        assert!(kl_loss(&g, &g).unwrap().abs() < 1e-9);
        let bad = map(&[0.1, -0.5, 0.0, 0.9, 0.2, 0.4]);
        assert!(matches!(kl_loss(&bad, &g), Err(Error::InvalidInput(_))));
        assert!(matches!(
            kl_loss(&map(&[0.0; 6]), &g),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn kl_delta_against_uniform_is_log_n() {
        let mut g = vec![0.0; 16];
        g[5] = 1.0;
        let g = Tensor::new(vec![4, 4], g).unwrap();
        let s = Tensor::<f64>::ones(vec![4, 4]);
        let v = kl_loss(&s, &g).unwrap();
        assert!((v - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn total_is_sum_of_terms() {
        let s = map(&[0.1, 0.5, 0.3, 0.9, 0.2, 0.4]);
        let r = total_loss(&s, &s).unwrap();
        assert!((r.total + 1.0).abs() < 1e-9);
        assert_eq!(r.total, r.cc_term + r.kl_term);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Tensor::<f64>::ones(vec![2, 3]);
        let b = Tensor::<f64>::ones(vec![3, 2]);
        assert!(matches!(cc_loss(&a, &b), Err(Error::Shape { .. })));
    }
}
