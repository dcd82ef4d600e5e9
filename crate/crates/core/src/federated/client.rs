use std::sync::Arc;

use super::{clip_and_noise, renormalize_rows, ClientShard, LabeledSet, LossSummary, Mode, RoundConfig};
use crate::error::{Error, Result};
use crate::losses::{adapter_objective, kcl, lmcl, npair_excluding, overall, LossBundle};
use crate::model::{
    embed, extract, extract_backward, unit_rows, AdapterParams, EmbeddingBatch, ExtractorParams, GateParams,
    GlobalRepresentations,
};
use crate::numkit::{normalize, Mat, Rng};

/// Everything a client keeps between rounds. Only the extractor leaves the
/// client, through [`ClientUpload::params`].
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub shard: Arc<ClientShard>,
    /// Local class embeddings, plus shared public classes in `GlobalDataShare`.
    pub class_embeddings: Mat,
    pub adapter: AdapterParams,
    pub gate: GateParams,
    /// The extractor at the end of the latest local update.
    pub local_extractor: Option<ExtractorParams>,
    rng: Rng,
    z_velocity: Mat,
    adapter_velocity: Mat,
    bias_velocity: f64,
}

/// What a client sends to the server.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpload {
    pub client: usize,
    pub size: usize,
    pub params: Vec<f64>,
    pub losses: LossSummary,
}

impl ClientState {
    /// `extra_classes` adds LMCL rows for broadcast public samples.
    pub fn new(
        id: usize,
        shard: Arc<ClientShard>,
        public_classes: usize,
        extra_classes: usize,
        embed_dim: usize,
        rng: Rng,
    ) -> Self {
        let mut init = rng.derive(&[u64::MAX]);
        let local = shard.train.classes;
        let class_embeddings = unit_rows(&mut init, local + extra_classes, embed_dim);
        let adapter = AdapterParams::init(&mut init, local, embed_dim);
        Self {
            id,
            z_velocity: Mat::zeros(class_embeddings.rows(), embed_dim),
            adapter_velocity: Mat::zeros(local, embed_dim),
            class_embeddings,
            adapter,
            gate: GateParams::zeros(public_classes),
            local_extractor: None,
            shard,
            rng,
            bias_velocity: 0.0,
        }
    }

    /// Set each local class embedding and adapter row to the normalized mean
    /// embedding of that class under `w`. Rows for shared public classes are
    /// left as they are.
    pub fn warm_start(&mut self, w: &ExtractorParams) -> Result<()> {
        let train = &self.shard.train;
        let feats = embed(w, &train.inputs)?;
        for c in 0..train.classes {
            let idx = train.indices_of(c);
            if idx.is_empty() {
                return Err(Error::TooFewSamples { identity: c, count: 0 });
            }
            let mut mean = vec![0.0; feats.cols()];
            for &i in &idx {
                mean.iter_mut().zip(feats.row(i)).for_each(|(m, x)| *m += x);
            }
            let unit = normalize(&mean)?;
            self.class_embeddings.row_mut(c).copy_from_slice(&unit);
            self.adapter.rows.row_mut(c).copy_from_slice(&unit);
        }
        Ok(())
    }

    pub fn train_size(&self) -> usize {
        self.shard.train.len()
    }
}

fn non_finite(round: usize, client: usize, batch: usize) -> Error {
    Error::NonFiniteLoss {
        round,
        client: Some(client),
        batch,
    }
}

/// Run `cfg.local_epochs` epochs of mini-batch SGD starting from `w_global`
/// and return the clipped, noised extractor.
///
/// Per batch the extractor sees `α₁·lmc + α₂·contrastive`, class embeddings
/// `α₁·lmc`, the adapter `α₃·bce`, and gates `α₂·kcl`. The adapter treats
/// features as constants. Momentum for the extractor restarts every round;
/// the other groups keep theirs.
pub fn client_local_update(
    client: &mut ClientState,
    w_global: &ExtractorParams,
    reps: Option<&GlobalRepresentations>,
    shared: Option<&LabeledSet>,
    cfg: &RoundConfig,
    round: usize,
) -> Result<ClientUpload> {
    let mode = cfg.mode;
    let reps = if mode.uses_representations() {
        Some(reps.ok_or_else(|| Error::InsufficientData("mode needs public representations".into()))?)
    } else {
        None
    };
    let shard = Arc::clone(&client.shard);
    let local = &shard.train;
    let pool = match (mode.shares_data(), shared) {
        (true, Some(s)) => local.concat_shifted(s)?,
        (true, None) => return Err(Error::InsufficientData("mode needs shared public samples".into())),
        _ => local.clone(),
    };
    if pool.classes != client.class_embeddings.rows() {
        return Err(Error::shape(
            "client class embeddings",
            pool.classes,
            client.class_embeddings.rows(),
        ));
    }
    if pool.is_empty() {
        return Err(Error::EmptyInput);
    }
    let fg_all = if mode.uses_global_features() {
        Some(embed(w_global, &pool.inputs)?)
    } else {
        None
    };

    let sgd = cfg.sgd();
    let mut rng = client.rng.derive(&[round as u64, 0]);
    let mut w = w_global.clone();
    let mut w_velocity = w.zeros_like();
    let train_adapter = mode == Mode::AdaFedFR && cfg.alphas.bce != 0.0;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut sums = LossSummary::default();
    let mut batches = 0usize;

    for _ in 0..cfg.local_epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let x = pool.inputs.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| pool.labels[i]).collect();
            let ex = extract(&w, &x)?;
            let batch = EmbeddingBatch::new(ex.features.clone(), y.clone())?;
            let lmc = lmcl(&batch, &client.class_embeddings, &cfg.lmcl)?;

            let fg = fg_all.as_ref().map(|m| m.select_rows(chunk));
            let contrast = match (mode, &fg) {
                (Mode::AdaFedFR, Some(fg)) if cfg.alphas.kcl != 0.0 => {
                    kcl(&ex.features, fg, reps.unwrap(), &client.gate, &cfg.kcl)?
                }
                (Mode::ContrastiveOnly, Some(fg)) if cfg.alphas.kcl != 0.0 => {
                    npair_excluding(&ex.features, fg, fg, &y, &y, cfg.kcl.tau)?
                }
                _ => LossBundle::zero(),
            };
            let bce = if train_adapter {
                adapter_objective(&client.adapter, &ex.features, &y, reps.unwrap(), &cfg.bce)?
            } else {
                LossBundle::zero()
            };
            let total = overall(&lmc, &contrast, &bce, cfg.alphas);
            if ![lmc.value, contrast.value, bce.value, total.value]
                .iter()
                .all(|v| v.is_finite())
            {
                return Err(non_finite(round, client.id, batches));
            }

            if let Some(gf) = &total.features {
                let (gw, _) = extract_backward(&w, &ex.cache, gf)?;
                w.zip_update(&gw, &mut w_velocity, |p, g, v| sgd.step(p, g, v));
                if !w
                    .layers
                    .iter()
                    .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
                {
                    return Err(non_finite(round, client.id, batches));
                }
            }
            if let Some(gz) = &total.class_embeddings {
                sgd.step_mat(&mut client.class_embeddings, gz, &mut client.z_velocity);
                renormalize_rows(&mut client.class_embeddings)?;
            }
            if train_adapter {
                if let Some(ga) = &total.adapter {
                    sgd.step_mat(&mut client.adapter.rows, ga, &mut client.adapter_velocity);
                    renormalize_rows(&mut client.adapter.rows)?;
                }
                if let Some(gb) = total.adapter_bias {
                    let mut b = client.adapter.bias;
                    sgd.step(&mut b, gb, &mut client.bias_velocity);
                    client.adapter.bias = b;
                }
            }
            if let Some(gp) = &total.gate {
                for (p, g) in client.gate.psi.iter_mut().zip(gp) {
                    *p -= cfg.lr * g;
                }
            }

            sums.lmc += lmc.value;
            sums.kcl += contrast.value;
            sums.bce += bce.value;
            sums.overall += total.value;
            batches += 1;
        }
    }

    let n = batches.max(1) as f64;
    let losses = LossSummary {
        lmc: sums.lmc / n,
        kcl: sums.kcl / n,
        bce: sums.bce / n,
        overall: sums.overall / n,
    };
    let mut noise_rng = client.rng.derive(&[round as u64, 1]);
    let params = clip_and_noise(&w.to_flat(), &cfg.privacy, &mut noise_rng);
    client.local_extractor = Some(w);
    Ok(ClientUpload {
        client: client.id,
        size: local.len(),
        params,
        losses,
    })
}
