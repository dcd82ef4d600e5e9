use serde::{Deserialize, Serialize};

use super::LossBundle;
use crate::error::{Error, Result};
use crate::model::EmbeddingBatch;
use crate::numkit::{log_sum_exp, normalize_backward, Mat};

/// Large-margin cosine loss: scale `s`, additive cosine margin `m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmclConfig {
    pub s: f64,
    pub m: f64,
}

impl Default for LmclConfig {
    fn default() -> Self {
        Self { s: 30.0, m: 0.4 }
    }
}

impl LmclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s.is_finite() && self.s > 0.0) || !(0.0..1.0).contains(&self.m) {
            return Err(Error::Config(format!(
                "lmcl needs s > 0 and 0 <= m < 1 (got s={}, m={})",
                self.s, self.m
            )));
        }
        Ok(())
    }
}

/// Mean over the batch of `-log softmax` with the margin subtracted from the
/// true-class cosine. Gradients flow to the raw features and raw class rows
/// through their normalization.
pub fn lmcl(batch: &EmbeddingBatch, z: &Mat, cfg: &LmclConfig) -> Result<LossBundle> {
    let b = batch.features.rows();
    if b == 0 {
        return Err(Error::EmptyInput);
    }
    if batch.features.cols() != z.cols() {
        return Err(Error::shape("lmcl", z.cols(), batch.features.cols()));
    }
    let classes = z.rows();
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    let (x, xn) = batch.features.normalized_rows()?;
    let (w, wn) = z.normalized_rows()?;
    let cos = x.matmul_t(&w)?;

    let scale = 1.0 / b as f64;
    let mut value = 0.0;
    let mut dcos = Mat::zeros(b, classes);
    let mut logits = vec![0.0; classes];
    for i in 0..b {
        let y = batch.labels[i];
        for (j, l) in logits.iter_mut().enumerate() {
            *l = cfg.s * cos.get(i, j);
        }
        logits[y] -= cfg.s * cfg.m;
        let lse = log_sum_exp(&logits)?;
        value += (lse - logits[y]) * scale;
        let row = dcos.row_mut(i);
        for j in 0..classes {
            let p = (logits[j] - lse).exp();
            row[j] = cfg.s * (p - if j == y { 1.0 } else { 0.0 }) * scale;
        }
    }

    // through cos = x̂·ŵᵀ
    let gx_unit = dcos.matmul(&w)?;
    let gw_unit = dcos.t_matmul(&x)?;
    let mut gf = Mat::zeros(b, x.cols());
    for i in 0..b {
        gf.row_mut(i)
            .copy_from_slice(&normalize_backward(x.row(i), xn[i], gx_unit.row(i)));
    }
    let mut gz = Mat::zeros(classes, w.cols());
    for j in 0..classes {
        gz.row_mut(j)
            .copy_from_slice(&normalize_backward(w.row(j), wn[j], gw_unit.row(j)));
    }
    Ok(LossBundle {
        value,
        features: Some(gf),
        class_embeddings: Some(gz),
        ..LossBundle::default()
    })
}
