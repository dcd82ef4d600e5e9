use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{aggregate, client_local_update, renormalize_rows, ClientState, LabeledSet, LossSummary, RoundConfig, Sgd};
use crate::error::{Error, Result};
use crate::losses::{lmcl, LmclConfig};
use crate::model::{
    decode_extractor, embed, encode_extractor, extract, extract_backward, unit_rows, EmbeddingBatch, ExtractorParams,
    GlobalRepresentations,
};
use crate::numkit::{Mat, Rng};

#[derive(Debug, Clone)]
pub struct ServerState {
    pub extractor: ExtractorParams,
    pub public: Arc<LabeledSet>,
    pub round: usize,
}

impl ServerState {
    pub fn new(extractor: ExtractorParams, public: Arc<LabeledSet>) -> Self {
        Self {
            extractor,
            public,
            round: 0,
        }
    }

    /// The first `per_id` public samples of every identity, labels unchanged.
    pub fn shared_samples(&self, per_id: usize) -> LabeledSet {
        let mut idx = Vec::new();
        for c in 0..self.public.classes {
            idx.extend(self.public.indices_of(c).into_iter().take(per_id));
        }
        self.public.subset(&idx)
    }
}

/// Normalized per-identity mean embeddings of the public data under the
/// current global extractor.
pub fn extract_representations(server: &ServerState) -> Result<GlobalRepresentations> {
    let public = &server.public;
    if public.is_empty() {
        return Err(Error::EmptyInput);
    }
    let feats = embed(&server.extractor, &public.inputs)?;
    let d = feats.cols();
    let mut sums = Mat::zeros(public.classes, d);
    let mut counts = vec![0usize; public.classes];
    for (i, &y) in public.labels.iter().enumerate() {
        counts[y] += 1;
        sums.row_mut(y).iter_mut().zip(feats.row(i)).for_each(|(s, x)| *s += x);
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::TooFewSamples { identity: c, count: 0 });
    }
    for (c, &n) in counts.iter().enumerate() {
        sums.row_mut(c).iter_mut().for_each(|s| *s /= n as f64);
    }
    GlobalRepresentations::new(&sums)
}

/// Centralized LMCL training on the public identities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub lmcl: LmclConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            lmcl: LmclConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr.is_finite() && self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(
                "pretrain needs batch_size >= 1, lr >= 0, momentum in [0,1)".into(),
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("pretrain.weight_decay must be >= 0".into()));
        }
        self.lmcl.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub extractor: ExtractorParams,
    pub class_embeddings: Mat,
    /// Full-data LMCL before training and after each epoch.
    pub trace: Vec<f64>,
}

fn full_loss(w: &ExtractorParams, data: &LabeledSet, z: &Mat, cfg: &LmclConfig) -> Result<f64> {
    let feats = embed(w, &data.inputs)?;
    Ok(lmcl(&EmbeddingBatch::new(feats, data.labels.clone())?, z, cfg)?.value)
}

/// Train the server's extractor with LMCL over its public data for `epochs`
/// epochs, starting from `server.extractor`.
pub fn pretrain(server: &ServerState, epochs: usize, cfg: &PretrainConfig, rng: &mut Rng) -> Result<Pretrained> {
    let data = &server.public;
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    let sgd = Sgd {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let mut w = server.extractor.clone();
    let mut z = unit_rows(rng, data.classes, w.embed_dim());
    let mut wv = w.zeros_like();
    let mut zv = Mat::zeros(z.rows(), z.cols());
    let mut trace = vec![full_loss(&w, data, &z, &cfg.lmcl)?];
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..epochs {
        rng.shuffle(&mut order);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = data.inputs.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let ex = extract(&w, &x)?;
            let out = lmcl(&EmbeddingBatch::new(ex.features.clone(), y)?, &z, &cfg.lmcl)?;
            if !out.value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    round: epoch,
                    client: None,
                    batch: b,
                });
            }
            let (gw, _) = extract_backward(&w, &ex.cache, out.features.as_ref().unwrap())?;
            w.zip_update(&gw, &mut wv, |p, g, v| sgd.step(p, g, v));
            sgd.step_mat(&mut z, out.class_embeddings.as_ref().unwrap(), &mut zv);
            renormalize_rows(&mut z)?;
        }
        trace.push(full_loss(&w, data, &z, &cfg.lmcl)?);
    }
    Ok(Pretrained {
        extractor: w,
        class_embeddings: z,
        trace,
    })
}

/// One entry per evaluated round; round 0 is the starting model.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord<E> {
    pub round: usize,
    pub losses: Option<LossSummary>,
    pub eval: E,
}

/// Run `cfg.rounds` synchronous rounds, evaluating after each. Clients train
/// in parallel; uploads are aggregated in client-id order.
pub fn run<E>(
    server: &mut ServerState,
    clients: &mut [ClientState],
    cfg: &RoundConfig,
    mut evaluate: impl FnMut(&ServerState, &[ClientState]) -> Result<E>,
) -> Result<Vec<RoundRecord<E>>> {
    cfg.validate(Some(server.public.classes))?;
    if clients.is_empty() {
        return Err(Error::NoUploads);
    }
    let shared = cfg.mode.shares_data().then(|| server.shared_samples(cfg.share_per_id));
    let mut records = vec![RoundRecord {
        round: server.round,
        losses: None,
        eval: evaluate(server, clients)?,
    }];
    for _ in 0..cfg.rounds {
        let t = server.round;
        let reps = if cfg.mode.uses_representations() {
            Some(extract_representations(server)?)
        } else {
            None
        };
        let w_global = &server.extractor;
        let results: Vec<Result<_>> = clients
            .par_iter_mut()
            .map(|c| client_local_update(c, w_global, reps.as_ref(), shared.as_ref(), cfg, t))
            .collect();
        let mut uploads = Vec::with_capacity(results.len());
        for r in results {
            uploads.push(r?);
        }
        uploads.sort_by_key(|u| u.client);
        let losses = LossSummary::mean(&uploads.iter().map(|u| u.losses).collect::<Vec<_>>());
        let pairs: Vec<(usize, Vec<f64>)> = uploads.into_iter().map(|u| (u.size, u.params)).collect();
        let next = server.extractor.with_flat(&aggregate(&pairs)?)?;
        if !next.to_flat().iter().all(|x| x.is_finite()) {
            return Err(Error::NonFiniteLoss {
                round: t,
                client: None,
                batch: 0,
            });
        }
        server.extractor = next;
        server.round += 1;
        records.push(RoundRecord {
            round: server.round,
            losses: Some(losses),
            eval: evaluate(server, clients)?,
        });
    }
    Ok(records)
}

pub fn write_checkpoint(path: &Path, round: u64, w: &ExtractorParams) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode_extractor(round, w)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(u64, ExtractorParams)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_extractor(&buf)
}
