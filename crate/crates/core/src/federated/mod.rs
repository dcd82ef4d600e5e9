//! Round-based federation: server broadcast of the global extractor and
//! public representations, local client training, clipped and noised
//! uploads, and size-weighted aggregation.

mod client;
mod privacy;
mod server;

pub use client::{client_local_update, ClientState, ClientUpload};
pub use privacy::{aggregate, clip_and_noise, PrivacyConfig};
pub use server::{
    extract_representations, pretrain, read_checkpoint, run, write_checkpoint, PretrainConfig, Pretrained, RoundRecord,
    ServerState,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{Alphas, BceConfig, KclConfig, LmclConfig};
use crate::numkit::{Mat, NORM_EPS};

/// Which local objective and broadcast a federation uses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    /// Local LMCL only; no public representations.
    FedAvgPlain,
    /// LMCL plus an n-pair term whose negatives are global-model embeddings
    /// of other identities in the same batch.
    ContrastiveOnly,
    /// LMCL over local classes plus a raw public subsample as extra classes.
    GlobalDataShare,
    /// LMCL, gated k-negative contrastive against the public
    /// representations, and the local adapter objective.
    #[default]
    AdaFedFR,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::FedAvgPlain,
        Mode::ContrastiveOnly,
        Mode::GlobalDataShare,
        Mode::AdaFedFR,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::FedAvgPlain => "FedAvgPlain",
            Mode::ContrastiveOnly => "ContrastiveOnly",
            Mode::GlobalDataShare => "GlobalDataShare",
            Mode::AdaFedFR => "AdaFedFR",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn uses_representations(&self) -> bool {
        matches!(self, Mode::AdaFedFR)
    }

    pub fn shares_data(&self) -> bool {
        matches!(self, Mode::GlobalDataShare)
    }

    /// Whether the frozen global model's embeddings are needed locally.
    pub fn uses_global_features(&self) -> bool {
        matches!(self, Mode::AdaFedFR | Mode::ContrastiveOnly)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μv + g + λp`, `p ← p − ηv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    #[inline]
    pub fn step(&self, p: &mut f64, g: f64, v: &mut f64) {
        *v = self.momentum * *v + g + self.weight_decay * *p;
        *p -= self.lr * *v;
    }

    pub fn step_mat(&self, p: &mut Mat, g: &Mat, v: &mut Mat) {
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            self.step(pi, gi, vi);
        }
    }
}

/// Rescale every row to unit length; rows at the degeneracy floor error.
pub(crate) fn renormalize_rows(m: &mut Mat) -> Result<()> {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let n = crate::numkit::norm(row);
        if !(n > NORM_EPS) {
            return Err(Error::DegenerateVector { norm: n });
        }
        row.iter_mut().for_each(|x| *x /= n);
    }
    Ok(())
}

/// Per-round training settings shared by every client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Chosen per run by the experiment's mode list.
    #[serde(skip)]
    pub mode: Mode,
    pub alphas: Alphas,
    pub lmcl: LmclConfig,
    pub kcl: KclConfig,
    pub bce: BceConfig,
    pub privacy: PrivacyConfig,
    /// Raw public samples per identity broadcast in `GlobalDataShare`.
    pub share_per_id: usize,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            local_epochs: 10,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            mode: Mode::AdaFedFR,
            alphas: Alphas::default(),
            lmcl: LmclConfig::default(),
            kcl: KclConfig::default(),
            bce: BceConfig::default(),
            privacy: PrivacyConfig::default(),
            share_per_id: 2,
        }
    }
}

impl RoundConfig {
    pub fn sgd(&self) -> Sgd {
        Sgd {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// `public_classes` bounds a fixed negative count when known.
    pub fn validate(&self, public_classes: Option<usize>) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and >= 0 (got {})", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0,1) (got {})",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be finite and >= 0".into()));
        }
        let a = self.alphas;
        if ![a.lmc, a.kcl, a.bce].iter().all(|x| x.is_finite() && *x >= 0.0) {
            return Err(Error::Config("alphas must be finite and >= 0".into()));
        }
        if self.mode.shares_data() && self.share_per_id == 0 {
            return Err(Error::Config("share_per_id must be >= 1 for GlobalDataShare".into()));
        }
        self.lmcl.validate()?;
        self.kcl.validate(public_classes)?;
        self.bce.validate()?;
        self.privacy.validate()
    }
}

/// Inputs with dense labels `0..classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub inputs: Mat,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledSet {
    pub fn new(inputs: Mat, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::shape("labeled set", inputs.rows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Append `other` with its labels shifted past this set's classes.
    pub fn concat_shifted(&self, other: &LabeledSet) -> Result<LabeledSet> {
        if self.inputs.cols() != other.inputs.cols() {
            return Err(Error::shape("concat", self.inputs.cols(), other.inputs.cols()));
        }
        let mut data = self.inputs.data().to_vec();
        data.extend_from_slice(other.inputs.data());
        let mut labels = self.labels.clone();
        labels.extend(other.labels.iter().map(|&y| y + self.classes));
        LabeledSet::new(
            Mat::from_vec(self.len() + other.len(), self.inputs.cols(), data)?,
            labels,
            self.classes + other.classes,
        )
    }
}

/// A client's private data: local training and held-out splits plus the
/// global identity behind each local class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub train: LabeledSet,
    pub eval: LabeledSet,
    pub identities: Vec<usize>,
}

/// Mean loss components over the batches of a local update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossSummary {
    pub lmc: f64,
    pub kcl: f64,
    pub bce: f64,
    pub overall: f64,
}

impl LossSummary {
    pub fn mean(items: &[LossSummary]) -> LossSummary {
        let n = items.len().max(1) as f64;
        let mut out = LossSummary::default();
        for s in items {
            out.lmc += s.lmc;
            out.kcl += s.kcl;
            out.bce += s.bce;
            out.overall += s.overall;
        }
        LossSummary {
            lmc: out.lmc / n,
            kcl: out.kcl / n,
            bce: out.bce / n,
            overall: out.overall / n,
        }
    }
}


#[cfg(test)]
mod tests_protocol;
