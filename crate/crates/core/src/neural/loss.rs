//! Data and physics losses with parameter gradients.

use super::data::Record;
use super::model::InitModel;
use crate::error::{Error, Result};
use crate::network::power_residual;
use crate::nr::jacobian;

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

impl LossGrad {
    fn zero(n: usize) -> Self {
        Self {
            loss: 0.0,
            grad: vec![0.0; n],
        }
    }

    pub fn scaled(mut self, a: f64) -> Self {
        self.loss *= a;
        self.grad.iter_mut().for_each(|g| *g *= a);
        self
    }

    /// `self = a * self + b * other`
    pub fn blend(mut self, a: f64, other: &LossGrad, b: f64) -> Self {
        self.loss = a * self.loss + b * other.loss;
        for (g, o) in self.grad.iter_mut().zip(&other.grad) {
            *g = a * *g + b * o;
        }
        self
    }
}

fn check_nonempty(batch: &[&Record]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(())
}

/// Batch mean of `sum_i (V_i - V̂_i)^2 + (theta_i - θ̂_i)^2` (angles in radians).
pub fn mse_loss(model: &InitModel, batch: &[&Record]) -> Result<LossGrad> {
    check_nonempty(batch)?;
    let mut out = LossGrad::zero(model.net().n_params());
    let scale = 1.0 / batch.len() as f64;
    for r in batch {
        let labels = r.labels.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("record of system {} has no labels", r.system))
        })?;
        let (pred, trace) = model.predict_trace(&r.features)?;
        let dv: Vec<f64> = pred.v.iter().zip(&labels.v).map(|(p, y)| p - y).collect();
        let dt: Vec<f64> = pred
            .theta
            .iter()
            .zip(&labels.theta)
            .map(|(p, y)| p - y)
            .collect();
        out.loss += scale * dv.iter().chain(&dt).map(|e| e * e).sum::<f64>();
        let gv: Vec<f64> = dv.iter().map(|e| 2.0 * scale * e).collect();
        let gt: Vec<f64> = dt.iter().map(|e| 2.0 * scale * e).collect();
        model.backward(&trace, &gv, &gt, &mut out.grad);
    }
    Ok(out)
}

/// Batch mean of `sum |dP_i| + sum |dQ_i|` over the PQ buses at the
/// predicted state. The gradient is `J^T sign(F)` pushed through the network;
/// `sign(0)` is taken as 0.
pub fn physics_loss(model: &InitModel, batch: &[&Record]) -> Result<LossGrad> {
    check_nonempty(batch)?;
    let m = model.n_buses() - 1;
    let mut out = LossGrad::zero(model.net().n_params());
    let scale = 1.0 / batch.len() as f64;
    for r in batch {
        let (pred, trace) = model.predict_trace(&r.features)?;
        let f = power_residual(&r.case, &pred);
        out.loss += scale * f.iter().map(|x| x.abs()).sum::<f64>();
        let j = jacobian(&r.case, &pred);
        let sign: Vec<f64> = f
            .iter()
            .map(|&x| {
                if x > 0.0 {
                    scale
                } else if x < 0.0 {
                    -scale
                } else {
                    0.0
                }
            })
            .collect();
        // unknowns are ordered [theta; v]
        let mut d = vec![0.0; 2 * m];
        for (row, s) in sign.iter().enumerate() {
            if *s != 0.0 {
                for (col, dc) in d.iter_mut().enumerate() {
                    *dc += s * j[(row, col)];
                }
            }
        }
        model.backward(&trace, &d[m..], &d[..m], &mut out.grad);
    }
    Ok(out)
}
