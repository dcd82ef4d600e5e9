use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{norm, Rng};

/// Upload clipping `w / max(a, ‖w‖/H)` followed by N(0, σ²) noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrivacyConfig {
    pub enabled: bool,
    pub clip_floor: f64,
    pub clip_norm: f64,
    pub sigma: f64,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            clip_floor: 1.0,
            clip_norm: 10.0,
            sigma: 0.0,
        }
    }
}

impl PrivacyConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.clip_floor.is_finite()
            && self.clip_floor > 0.0
            && self.clip_norm.is_finite()
            && self.clip_norm > 0.0
            && self.sigma.is_finite()
            && self.sigma >= 0.0;
        if !ok {
            return Err(Error::Config(
                "privacy needs clip_floor > 0, clip_norm > 0, sigma >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Clip and noise a flat parameter vector. Disabled ⇒ unchanged copy.
pub fn clip_and_noise(w: &[f64], cfg: &PrivacyConfig, rng: &mut Rng) -> Vec<f64> {
    if !cfg.enabled {
        return w.to_vec();
    }
    let div = cfg.clip_floor.max(norm(w) / cfg.clip_norm);
    let mut out: Vec<f64> = w.iter().map(|x| x / div).collect();
    if cfg.sigma > 0.0 {
        for x in &mut out {
            *x += cfg.sigma * rng.normal();
        }
    }
    out
}

/// Size-weighted mean of `(size, params)` uploads, accumulated in order.
pub fn aggregate(uploads: &[(usize, Vec<f64>)]) -> Result<Vec<f64>> {
    let first = uploads.first().ok_or(Error::NoUploads)?;
    let len = first.1.len();
    if let Some((_, bad)) = uploads.iter().find(|(_, p)| p.len() != len) {
        return Err(Error::shape("aggregate", len, bad.len()));
    }
    let total: usize = uploads.iter().map(|(n, _)| n).sum();
    if total == 0 {
        return Err(Error::InsufficientData("all uploads report zero samples".into()));
    }
    let mut out = vec![0.0; len];
    for (n, p) in uploads {
        let weight = *n as f64 / total as f64;
        for (o, x) in out.iter_mut().zip(p) {
            *o += weight * x;
        }
    }
    Ok(out)
}
