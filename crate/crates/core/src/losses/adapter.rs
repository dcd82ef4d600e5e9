use serde::{Deserialize, Serialize};

use super::LossBundle;
use crate::error::{Error, Result};
use crate::model::{adapter_scores, adapter_scores_backward, AdapterParams, GlobalRepresentations};
use crate::numkit::{sigmoid, softplus, Mat};

/// Binary cross-entropy adapter objective. Positive logits are
/// `s′·g(p) − m′ + b`, negative logits `s′·g(n) + m′ + b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BceConfig {
    pub lambda: f64,
    pub s_prime: f64,
    pub m_prime: f64,
    pub t_g: f64,
}

impl Default for BceConfig {
    fn default() -> Self {
        Self {
            lambda: 0.7,
            s_prime: 30.0,
            m_prime: 0.4,
            t_g: 3.0,
        }
    }
}

impl BceConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.lambda, self.s_prime, self.m_prime, self.t_g]
            .iter()
            .all(|x| x.is_finite());
        if !finite || !(0.0..=1.0).contains(&self.lambda) || self.s_prime <= 0.0 || self.t_g < 1.0 {
            return Err(Error::Config(
                "bce needs finite values, lambda in [0,1], s_prime > 0, t_g >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Enhancement `g(c) = 2·((c+1)/2)^t − 1` and its derivative.
pub fn enhance(c: f64, t: f64) -> (f64, f64) {
    if t == 1.0 {
        return (c, 1.0);
    }
    let u = ((c + 1.0) / 2.0).clamp(0.0, 1.0);
    (2.0 * u.powf(t) - 1.0, t * u.powf(t - 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BceGrads {
    pub value: f64,
    pub pos: Vec<f64>,
    pub neg: Mat,
    pub bias: f64,
}

/// Mean-normalized adapter BCE over positive scores (each local sample on its
/// own class) and negative scores (public representations against every
/// local class). Empty groups contribute 0.
pub fn bce_adapter(pos_scores: &[f64], neg_scores: &Mat, bias: f64, cfg: &BceConfig) -> Result<BceGrads> {
    if !pos_scores.iter().chain(neg_scores.data()).all(|x| x.is_finite()) || !bias.is_finite() {
        return Err(Error::InsufficientData("non-finite adapter score".into()));
    }
    let sp = cfg.s_prime;
    let mut value = 0.0;
    let mut d_bias = 0.0;

    let mut dpos = vec![0.0; pos_scores.len()];
    if !pos_scores.is_empty() {
        let w = cfg.lambda / (sp * pos_scores.len() as f64);
        for (d, &p) in dpos.iter_mut().zip(pos_scores) {
            let (gp, dg) = enhance(p, cfg.t_g);
            let arg = -sp * gp + cfg.m_prime - bias;
            value += w * softplus(arg);
            let sg = sigmoid(arg);
            *d = -w * sp * dg * sg;
            d_bias -= w * sg;
        }
    }

    let mut dneg = Mat::zeros(neg_scores.rows(), neg_scores.cols());
    let n = neg_scores.data().len();
    if n > 0 {
        let w = (1.0 - cfg.lambda) / (sp * n as f64);
        for (d, &c) in dneg.data_mut().iter_mut().zip(neg_scores.data()) {
            let (gn, dg) = enhance(c, cfg.t_g);
            let arg = sp * gn + cfg.m_prime + bias;
            value += w * softplus(arg);
            let sg = sigmoid(arg);
            *d = w * sp * dg * sg;
            d_bias += w * sg;
        }
    }
    Ok(BceGrads {
        value,
        pos: dpos,
        neg: dneg,
        bias: d_bias,
    })
}

/// Adapter scoring plus [`bce_adapter`], chained back to the adapter rows and
/// bias. Features and representations are treated as constants.
pub fn adapter_objective(
    theta: &AdapterParams,
    feats: &Mat,
    labels: &[usize],
    reps: &GlobalRepresentations,
    cfg: &BceConfig,
) -> Result<LossBundle> {
    let classes = theta.rows.rows();
    if labels.len() != feats.rows() {
        return Err(Error::shape("adapter_objective labels", feats.rows(), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    let local = adapter_scores(theta, feats)?;
    let pos: Vec<f64> = labels.iter().enumerate().map(|(i, &y)| local.get(i, y)).collect();
    let neg = if reps.count() > 0 {
        adapter_scores(theta, reps.matrix())?
    } else {
        Mat::zeros(0, classes)
    };
    let g = bce_adapter(&pos, &neg, theta.bias, cfg)?;

    let mut gpos = Mat::zeros(feats.rows(), classes);
    for (i, &y) in labels.iter().enumerate() {
        gpos.set(i, y, g.pos[i]);
    }
    let mut grad = adapter_scores_backward(theta, feats, &gpos)?;
    if reps.count() > 0 {
        grad.axpy(1.0, &adapter_scores_backward(theta, reps.matrix(), &g.neg)?);
    }
    Ok(LossBundle {
        value: g.value,
        adapter: Some(grad),
        adapter_bias: Some(g.bias),
        ..LossBundle::default()
    })
}
