//! Synthetic identity benchmark.
//!
//! Each identity is a unit direction in the latent space. Samples are that
//! direction plus isotropic Gaussian noise, pushed through a fixed warp
//! `y = Q₂ · tanh(γ · Q₁ · x)` shared by every identity, so a linear model
//! cannot simply undo it. Identities are then split into a public server
//! set, disjoint client shards and a held-out evaluation set.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{normalize, random_orthogonal, Mat, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_server_ids: usize,
    pub n_clients: usize,
    pub ids_per_client: usize,
    /// Identities seen by nobody during training; used for generic eval.
    pub n_eval_ids: usize,
    pub samples_per_id: usize,
    pub input_dim: usize,
    pub noise_std: f64,
    /// Pre-tanh gain of the warp.
    pub warp_gain: f64,
    pub warp_seed: u64,
    pub seed: u64,
    /// Fraction of each client identity's samples used for training.
    pub train_ratio: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_server_ids: 60,
            n_clients: 10,
            ids_per_client: 10,
            n_eval_ids: 40,
            samples_per_id: 20,
            input_dim: 64,
            noise_std: 0.12,
            warp_gain: 6.0,
            warp_seed: 17,
            seed: 0,
            train_ratio: 0.6,
        }
    }
}

impl SynthConfig {
    pub fn total_ids(&self) -> usize {
        self.n_server_ids + self.n_clients * self.ids_per_client + self.n_eval_ids
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_server_ids", self.n_server_ids),
            ("n_clients", self.n_clients),
            ("ids_per_client", self.ids_per_client),
            ("samples_per_id", self.samples_per_id),
            ("input_dim", self.input_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("data.{name} must be >= 1")));
            }
        }
        if self.samples_per_id < 2 {
            return Err(Error::Config("data.samples_per_id must be >= 2".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("data.noise_std must be >= 0".into()));
        }
        if !(self.warp_gain > 0.0 && self.warp_gain.is_finite()) {
            return Err(Error::Config("data.warp_gain must be > 0".into()));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::Config("data.train_ratio must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// The fixed nonlinear map applied to every latent sample.
#[derive(Debug, Clone)]
pub struct Warp {
    q1: Mat,
    q2: Mat,
    gain: f64,
}

impl Warp {
    pub fn new(seed: u64, dim: usize, gain: f64) -> Self {
        let mut rng = Rng::new(seed);
        let q1 = random_orthogonal(&mut rng, dim);
        let q2 = random_orthogonal(&mut rng, dim);
        Self { q1, q2, gain }
    }

    fn rotate(q: &Mat, x: &[f64]) -> Vec<f64> {
        q.iter_rows().map(|r| crate::numkit::dot(r, x)).collect()
    }

    fn rotate_t(q: &Mat, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; q.cols()];
        for (r, &xi) in q.iter_rows().zip(x) {
            for (o, v) in out.iter_mut().zip(r) {
                *o += xi * v;
            }
        }
        out
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = Self::rotate(&self.q1, x)
            .into_iter()
            .map(|v| (self.gain * v).tanh())
            .collect();
        Self::rotate(&self.q2, &h)
    }

    pub fn invert(&self, y: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = Self::rotate_t(&self.q2, y)
            .into_iter()
            .map(|v| v.clamp(-1.0 + 1e-15, 1.0 - 1e-15).atanh() / self.gain)
            .collect();
        Self::rotate_t(&self.q1, &h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityDataset {
    pub samples: Mat,
    pub labels: Vec<usize>,
    pub split: Vec<Split>,
    n_ids: usize,
}

impl IdentityDataset {
    pub fn new(samples: Mat, labels: Vec<usize>, split: Vec<Split>) -> Result<Self> {
        if samples.rows() != labels.len() || labels.len() != split.len() {
            return Err(Error::shape(
                "IdentityDataset",
                samples.rows(),
                format!("{} labels / {} tags", labels.len(), split.len()),
            ));
        }
        let n_ids = labels.iter().max().map_or(0, |m| m + 1);
        let mut counts = vec![0usize; n_ids];
        labels.iter().for_each(|&l| counts[l] += 1);
        if let Some(id) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Parse(format!("identity labels not dense: {id} missing")));
        }
        Ok(Self {
            samples,
            labels,
            split,
            n_ids,
        })
    }

    pub fn n_ids(&self) -> usize {
        self.n_ids
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sample indices of one identity, optionally restricted to a split.
    pub fn indices_of(&self, id: usize, split: Option<Split>) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.labels[i] == id && split.is_none_or(|s| self.split[i] == s))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("identity,split");
        for j in 0..self.samples.cols() {
            let _ = write!(out, ",x{j}");
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{},{}", self.labels[i], self.split[i].tag());
            for v in self.samples.row(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::EmptyInput)?;
        let dim = header.split(',').count().saturating_sub(2);
        let (mut labels, mut split, mut data) = (vec![], vec![], vec![]);
        for (ln, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != dim + 2 {
                return Err(Error::Parse(format!("line {}: expected {} cells", ln + 2, dim + 2)));
            }
            labels.push(
                cells[0]
                    .parse()
                    .map_err(|_| Error::Parse(format!("line {}: bad identity", ln + 2)))?,
            );
            split.push(match cells[1] {
                "train" => Split::Train,
                "eval" => Split::Eval,
                t => return Err(Error::Parse(format!("line {}: bad split `{t}`", ln + 2))),
            });
            for c in &cells[2..] {
                data.push(
                    c.parse::<f64>()
                        .map_err(|_| Error::Parse(format!("line {}: bad value `{c}`", ln + 2)))?,
                );
            }
        }
        let rows = labels.len();
        Self::new(Mat::from_vec(rows, dim, data)?, labels, split)
    }

    pub fn export_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn import_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

/// Dataset plus the latent identity centers it was drawn from.
#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: IdentityDataset,
    pub centers: Mat,
    pub warp: Warp,
}

pub fn generate(cfg: &SynthConfig) -> Result<Generated> {
    cfg.validate()?;
    let d = cfg.input_dim;
    let warp = Warp::new(cfg.warp_seed, d, cfg.warp_gain);
    let mut rng = Rng::new(cfg.seed).derive(&[0xda7a]);
    let n_ids = cfg.total_ids();
    let mut centers = Mat::zeros(n_ids, d);
    let mut samples = Mat::zeros(n_ids * cfg.samples_per_id, d);
    let mut labels = Vec::with_capacity(samples.rows());
    for id in 0..n_ids {
        let raw: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let c = normalize(&raw)?;
        centers.row_mut(id).copy_from_slice(&c);
        for s in 0..cfg.samples_per_id {
            let x: Vec<f64> = c
                .iter()
                .map(|&v| {
                    if cfg.noise_std > 0.0 {
                        v + cfg.noise_std * rng.normal()
                    } else {
                        v
                    }
                })
                .collect();
            samples
                .row_mut(id * cfg.samples_per_id + s)
                .copy_from_slice(&warp.apply(&x));
            labels.push(id);
        }
    }
    let split = vec![Split::Train; labels.len()];
    Ok(Generated {
        dataset: IdentityDataset::new(samples, labels, split)?,
        centers,
        warp,
    })
}

/// Identity assignment to participants. All lists hold dataset identity ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub server: Vec<usize>,
    pub clients: Vec<Vec<usize>>,
    pub eval: Vec<usize>,
}

pub fn partition(ds: &IdentityDataset, cfg: &SynthConfig, rng: &mut Rng) -> Result<Partition> {
    let needed = cfg.total_ids();
    if ds.n_ids() < needed {
        return Err(Error::InsufficientIdentities {
            needed,
            available: ds.n_ids(),
        });
    }
    let mut ids: Vec<usize> = (0..ds.n_ids()).collect();
    rng.shuffle(&mut ids);
    let mut it = ids.into_iter();
    let server: Vec<usize> = it.by_ref().take(cfg.n_server_ids).collect();
    let clients = (0..cfg.n_clients)
        .map(|_| it.by_ref().take(cfg.ids_per_client).collect())
        .collect();
    let eval = it.by_ref().take(cfg.n_eval_ids).collect();
    Ok(Partition { server, clients, eval })
}

/// Per identity, the first `max(1, min(n−1, ⌊n·ratio⌋))` samples of a seeded
/// shuffle become train, the rest eval.
pub fn train_eval_split(ds: &IdentityDataset, ratio: f64, rng: &mut Rng) -> Result<IdentityDataset> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut out = ds.clone();
    for id in 0..ds.n_ids() {
        let mut idx = ds.indices_of(id, None);
        let n = idx.len();
        if n < 2 {
            return Err(Error::TooFewSamples { identity: id, count: n });
        }
        rng.shuffle(&mut idx);
        let n_train = ((n as f64 * ratio + 1e-9).floor() as usize).clamp(1, n - 1);
        for (k, &i) in idx.iter().enumerate() {
            out.split[i] = if k < n_train { Split::Train } else { Split::Eval };
        }
    }
    Ok(out)
}
