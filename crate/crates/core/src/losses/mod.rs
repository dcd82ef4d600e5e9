//! Training objectives. Each loss returns its value together with analytic
//! gradients for every input it depends on; gradients with respect to the
//! extractor are obtained by feeding `features` into
//! [`extract_backward`](crate::model::extract_backward).

mod adapter;
mod contrastive;
mod lmcl;

pub use adapter::{adapter_objective, bce_adapter, enhance, BceConfig, BceGrads};
pub use contrastive::{kcl, npair, npair_excluding, select_negatives, KMode, KclConfig};
pub use lmcl::{lmcl, LmclConfig};

use serde::{Deserialize, Serialize};

use crate::numkit::Mat;

/// A loss value and the gradients it produces, keyed by parameter group.
/// `features` is the gradient w.r.t. the raw (unnormalized) embeddings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBundle {
    pub value: f64,
    pub features: Option<Mat>,
    pub class_embeddings: Option<Mat>,
    pub adapter: Option<Mat>,
    pub adapter_bias: Option<f64>,
    pub gate: Option<Vec<f64>>,
}

impl LossBundle {
    pub fn zero() -> Self {
        Self::default()
    }
}

/// Weights of the three local objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Alphas {
    pub lmc: f64,
    pub kcl: f64,
    pub bce: f64,
}

impl Default for Alphas {
    fn default() -> Self {
        Self {
            lmc: 1.0,
            kcl: 5.0,
            bce: 10.0,
        }
    }
}

fn add_mat(acc: &mut Option<Mat>, src: &Option<Mat>, a: f64) {
    if let Some(s) = src {
        match acc {
            Some(m) => m.axpy(a, s),
            None => {
                let mut m = s.clone();
                m.scale(a);
                *acc = Some(m);
            }
        }
    }
}

fn add_vec(acc: &mut Option<Vec<f64>>, src: &Option<Vec<f64>>, a: f64) {
    if let Some(s) = src {
        match acc {
            Some(v) => v.iter_mut().zip(s).for_each(|(x, y)| *x += a * y),
            None => *acc = Some(s.iter().map(|y| a * y).collect()),
        }
    }
}

/// `α₁·lmc + α₂·kcl + α₃·bce`, applied to values and every gradient group.
/// A zero weight drops its term entirely.
pub fn overall(lmc: &LossBundle, kcl: &LossBundle, bce: &LossBundle, alphas: Alphas) -> LossBundle {
    let mut out = LossBundle::zero();
    for (part, a) in [(lmc, alphas.lmc), (kcl, alphas.kcl), (bce, alphas.bce)] {
        if a == 0.0 {
            continue;
        }
        out.value += a * part.value;
        add_mat(&mut out.features, &part.features, a);
        add_mat(&mut out.class_embeddings, &part.class_embeddings, a);
        add_mat(&mut out.adapter, &part.adapter, a);
        if let Some(b) = part.adapter_bias {
            *out.adapter_bias.get_or_insert(0.0) += a * b;
        }
        add_vec(&mut out.gate, &part.gate, a);
    }
    out
}
