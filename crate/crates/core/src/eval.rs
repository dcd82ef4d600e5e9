//! Recognition metrics over cosine scores: 1:1 verification, open-set 1:N
//! identification, closed-set top-k, and a per-client personalized harness.
//!
//! Acceptance is strict on both sides (`score > τ`); a threshold that would
//! admit a tie is pushed up.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federated::{client_local_update, ClientState, Mode, PrivacyConfig, RoundConfig};
use crate::losses::LmclConfig;
use crate::model::{embed, ExtractorParams};
use crate::numkit::{dot, normalize, Mat, Rng};

/// Genuine and impostor similarity scores.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

fn unit_rows(m: &Mat) -> Result<Mat> {
    Ok(m.normalized_rows()?.0)
}

/// Threshold admitting at most `floor(rate·n)` of `negatives`.
/// `None` means every score is accepted.
fn threshold(negatives: &[f64], rate: f64) -> Result<Option<f64>> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Config(format!("operating point must lie in (0,1] (got {rate})")));
    }
    let n = negatives.len();
    if (n as f64) * rate < 1.0 - 1e-12 {
        return Err(Error::NotEstimable { rate, count: n });
    }
    let allowed = ((rate * n as f64) + 1e-9).floor() as usize;
    if allowed >= n {
        return Ok(None);
    }
    let mut sorted = negatives.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(Some(sorted[allowed]))
}

fn accepted(score: f64, tau: Option<f64>) -> bool {
    tau.is_none_or(|t| score > t)
}

/// Fraction of genuine scores accepted at the strictest threshold whose
/// impostor acceptance rate does not exceed `far`.
pub fn tar_at_far(scores: &ScoreSet, far: f64) -> Result<f64> {
    if scores.genuine.is_empty() {
        return Err(Error::InsufficientData("no genuine scores".into()));
    }
    let tau = threshold(&scores.impostor, far)?;
    let hits = scores.genuine.iter().filter(|&&s| accepted(s, tau)).count();
    Ok(hits as f64 / scores.genuine.len() as f64)
}

/// Pairwise cosine scores among labeled embeddings. Every same-label pair is
/// genuine; cross-label pairs are impostors, thinned to `impostor_cap` by
/// evenly spaced selection in pair order when there are more.
pub fn scores_from_embeddings(feats: &Mat, labels: &[usize], impostor_cap: usize) -> Result<ScoreSet> {
    if feats.rows() != labels.len() {
        return Err(Error::shape("verification labels", feats.rows(), labels.len()));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &y in labels {
        *counts.entry(y).or_default() += 1;
    }
    if counts.values().filter(|&&c| c >= 2).count() < 2 {
        return Err(Error::InsufficientData(
            "verification needs two identities with two samples each".into(),
        ));
    }
    let unit = unit_rows(feats)?;
    let n = labels.len();
    let same: usize = counts.values().map(|c| c * (c - 1) / 2).sum();
    let cross = n * (n - 1) / 2 - same;
    let keep = cross.min(impostor_cap);
    let mut out = ScoreSet {
        genuine: Vec::with_capacity(same),
        impostor: Vec::with_capacity(keep),
    };
    let mut p = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            if labels[i] == labels[j] {
                out.genuine.push(dot(unit.row(i), unit.row(j)));
            } else {
                // Pair p is kept when floor(p·keep/cross) steps.
                if keep > 0 && (p * keep) / cross != ((p + 1) * keep) / cross {
                    out.impostor.push(dot(unit.row(i), unit.row(j)).clamp(-1.0, 1.0));
                }
                p += 1;
            }
        }
    }
    for g in &mut out.genuine {
        *g = g.clamp(-1.0, 1.0);
    }
    Ok(out)
}

pub const DEFAULT_IMPOSTOR_CAP: usize = 500_000;

/// Verification scores of `model` on labeled inputs.
pub fn verification_scores(model: &ExtractorParams, inputs: &Mat, labels: &[usize]) -> Result<ScoreSet> {
    scores_from_embeddings(&embed(model, inputs)?, labels, DEFAULT_IMPOSTOR_CAP)
}

/// Gallery templates with mated and non-mated probes, all unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryProbeSet {
    pub templates: Mat,
    pub gallery_ids: Vec<usize>,
    pub mated: Mat,
    pub mated_ids: Vec<usize>,
    pub non_mated: Mat,
}

impl GalleryProbeSet {
    pub fn new(
        templates: &Mat,
        gallery_ids: Vec<usize>,
        mated: &Mat,
        mated_ids: Vec<usize>,
        non_mated: &Mat,
    ) -> Result<Self> {
        if templates.rows() != gallery_ids.len() || mated.rows() != mated_ids.len() {
            return Err(Error::shape(
                "gallery/probe ids",
                format!("{}+{}", templates.rows(), mated.rows()),
                format!("{}+{}", gallery_ids.len(), mated_ids.len()),
            ));
        }
        if templates.rows() == 0 {
            return Err(Error::EmptyInput);
        }
        let d = templates.cols();
        if mated.cols() != d || non_mated.cols() != d {
            return Err(Error::shape("probe dimension", d, mated.cols().max(non_mated.cols())));
        }
        if let Some(&bad) = mated_ids.iter().find(|y| !gallery_ids.contains(y)) {
            return Err(Error::InsufficientData(format!(
                "mated probe identity {bad} not enrolled"
            )));
        }
        Ok(Self {
            templates: unit_rows(templates)?,
            gallery_ids,
            mated: unit_rows(mated)?,
            mated_ids,
            non_mated: unit_rows(non_mated)?,
        })
    }

    /// Templates are normalized per-identity means of `enroll`.
    pub fn from_enrollment(
        enroll: &Mat,
        enroll_ids: &[usize],
        mated: &Mat,
        mated_ids: Vec<usize>,
        non_mated: &Mat,
    ) -> Result<Self> {
        if enroll.rows() != enroll_ids.len() {
            return Err(Error::shape("enrollment ids", enroll.rows(), enroll_ids.len()));
        }
        let mut sums: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (i, &y) in enroll_ids.iter().enumerate() {
            let acc = sums.entry(y).or_insert_with(|| vec![0.0; enroll.cols()]);
            acc.iter_mut().zip(enroll.row(i)).for_each(|(a, x)| *a += x);
        }
        let ids: Vec<usize> = sums.keys().copied().collect();
        let rows = sums.values().map(|v| normalize(v)).collect::<Result<Vec<_>>>()?;
        let templates = Mat::from_rows(&rows)?;
        Self::new(&templates, ids, mated, mated_ids, non_mated)
    }

    pub fn gallery_size(&self) -> usize {
        self.gallery_ids.len()
    }

    fn best(&self, probe: &[f64]) -> (f64, usize) {
        let mut best = (f64::NEG_INFINITY, 0);
        for g in 0..self.templates.rows() {
            let s = dot(probe, self.templates.row(g));
            if s > best.0 {
                best = (s, g);
            }
        }
        best
    }
}

/// Open-set identification rate: mated probes whose best match is the right
/// identity and clears the threshold set on non-mated best scores.
pub fn tpir_at_fpir(gp: &GalleryProbeSet, fpir: f64) -> Result<f64> {
    if gp.mated.rows() == 0 {
        return Err(Error::InsufficientData("no mated probes".into()));
    }
    let negatives: Vec<f64> = gp.non_mated.iter_rows().map(|p| gp.best(p).0).collect();
    let tau = threshold(&negatives, fpir)?;
    let hits = gp
        .mated
        .iter_rows()
        .zip(&gp.mated_ids)
        .filter(|(p, &y)| {
            let (s, g) = gp.best(p);
            accepted(s, tau) && gp.gallery_ids[g] == y
        })
        .count();
    Ok(hits as f64 / gp.mated.rows() as f64)
}

/// Fraction of mated probes whose identity ranks in the top `k`. Ties rank
/// the lower gallery index first.
pub fn topk_accuracy(gp: &GalleryProbeSet, k: usize) -> Result<f64> {
    let size = gp.gallery_size();
    if k == 0 || k > size {
        return Err(Error::KTooLarge { k, gallery: size });
    }
    if gp.mated.rows() == 0 {
        return Err(Error::InsufficientData("no mated probes".into()));
    }
    let mut hits = 0usize;
    for (p, &y) in gp.mated.iter_rows().zip(&gp.mated_ids) {
        let scores: Vec<f64> = gp.templates.iter_rows().map(|t| dot(p, t)).collect();
        let truth = gp.gallery_ids.iter().position(|&g| g == y).unwrap();
        let st = scores[truth];
        let rank = scores
            .iter()
            .enumerate()
            .filter(|&(g, &s)| s > st || (s == st && g < truth))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / gp.mated.rows() as f64)
}

/// The operating points reported for every evaluated model. `None` marks a
/// metric that cannot be estimated on the available data.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RecognitionMetrics {
    pub tar_far_1e1: Option<f64>,
    pub tar_far_1e2: Option<f64>,
    pub tpir_fpir_1e1: Option<f64>,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
}

fn estimable(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::NotEstimable { .. }) | Err(Error::KTooLarge { .. }) | Err(Error::InsufficientData(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

impl RecognitionMetrics {
    pub fn compute(scores: Option<&ScoreSet>, gp: &GalleryProbeSet) -> Result<Self> {
        let tar = |far| scores.map_or(Ok(None), |s| estimable(tar_at_far(s, far)));
        Ok(Self {
            tar_far_1e1: tar(1e-1)?,
            tar_far_1e2: tar(1e-2)?,
            tpir_fpir_1e1: estimable(tpir_at_fpir(gp, 1e-1))?,
            top1: estimable(topk_accuracy(gp, 1))?,
            top5: estimable(topk_accuracy(gp, 5))?,
        })
    }
}

/// Held-out identities for evaluating the global extractor. Verification
/// uses every sample; identification enrolls the train split of the first
/// half of the identities, probes with their eval split, and uses all
/// samples of the second half as non-mated probes.
#[derive(Debug, Clone, PartialEq)]
pub struct GenericBenchmark {
    pub verify_inputs: Mat,
    pub verify_labels: Vec<usize>,
    pub enroll_inputs: Mat,
    pub enroll_labels: Vec<usize>,
    pub probe_inputs: Mat,
    pub probe_labels: Vec<usize>,
    pub non_mated_inputs: Mat,
    pub impostor_cap: usize,
}

impl GenericBenchmark {
    /// `train` marks the enrollment split of each sample.
    pub fn new(inputs: &Mat, labels: &[usize], train: &[bool]) -> Result<Self> {
        if inputs.rows() != labels.len() || labels.len() != train.len() {
            return Err(Error::shape("benchmark", inputs.rows(), labels.len().min(train.len())));
        }
        let mut ids: Vec<usize> = labels.to_vec();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() < 2 {
            return Err(Error::InsufficientIdentities {
                needed: 2,
                available: ids.len(),
            });
        }
        let gallery: Vec<usize> = ids[..ids.len().div_ceil(2)].to_vec();
        let pick = |f: &dyn Fn(usize) -> bool| -> Vec<usize> { (0..labels.len()).filter(|&i| f(i)).collect() };
        let enroll = pick(&|i| gallery.contains(&labels[i]) && train[i]);
        let probe = pick(&|i| gallery.contains(&labels[i]) && !train[i]);
        let non_mated = pick(&|i| !gallery.contains(&labels[i]));
        Ok(Self {
            verify_inputs: inputs.clone(),
            verify_labels: labels.to_vec(),
            enroll_inputs: inputs.select_rows(&enroll),
            enroll_labels: enroll.iter().map(|&i| labels[i]).collect(),
            probe_inputs: inputs.select_rows(&probe),
            probe_labels: probe.iter().map(|&i| labels[i]).collect(),
            non_mated_inputs: inputs.select_rows(&non_mated),
            impostor_cap: DEFAULT_IMPOSTOR_CAP,
        })
    }

    pub fn evaluate(&self, model: &ExtractorParams) -> Result<RecognitionMetrics> {
        let scores = scores_from_embeddings(
            &embed(model, &self.verify_inputs)?,
            &self.verify_labels,
            self.impostor_cap,
        )?;
        let gp = GalleryProbeSet::from_enrollment(
            &embed(model, &self.enroll_inputs)?,
            &self.enroll_labels,
            &embed(model, &self.probe_inputs)?,
            self.probe_labels.clone(),
            &embed(model, &self.non_mated_inputs)?,
        )?;
        RecognitionMetrics::compute(Some(&scores), &gp)
    }
}

/// How the "fine-tune" baseline continues training from the global model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PersonalizedConfig {
    pub finetune_epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub lmcl: LmclConfig,
    pub seed: u64,
}

impl Default for PersonalizedConfig {
    fn default() -> Self {
        Self {
            finetune_epochs: 10,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            lmcl: LmclConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    /// Global extractor, nearest class template.
    Global,
    /// Global extractor trained further on local data with LMCL.
    FineTune,
    /// The client's own extractor scored through its adapter.
    Adapter,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Global, Variant::FineTune, Variant::Adapter];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Global => "global",
            Variant::FineTune => "finetune",
            Variant::Adapter => "adapter",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonalizedRecord {
    pub client: usize,
    pub variant: Variant,
    pub metrics: RecognitionMetrics,
}

fn client_metrics(
    client: &ClientState,
    model: &ExtractorParams,
    templates: Option<&Mat>,
    non_mated: &Mat,
) -> Result<RecognitionMetrics> {
    let shard = &client.shard;
    let probes = embed(model, &shard.eval.inputs)?;
    let others = embed(model, non_mated)?;
    let scores = estimable_scores(scores_from_embeddings(
        &probes,
        &shard.eval.labels,
        DEFAULT_IMPOSTOR_CAP,
    ))?;
    let gp = match templates {
        Some(t) => GalleryProbeSet::new(
            t,
            (0..shard.train.classes).collect(),
            &probes,
            shard.eval.labels.clone(),
            &others,
        )?,
        None => GalleryProbeSet::from_enrollment(
            &embed(model, &shard.train.inputs)?,
            &shard.train.labels,
            &probes,
            shard.eval.labels.clone(),
            &others,
        )?,
    };
    RecognitionMetrics::compute(scores.as_ref(), &gp)
}

fn estimable_scores(r: Result<ScoreSet>) -> Result<Option<ScoreSet>> {
    match r {
        Ok(s) => Ok(Some(s)),
        Err(Error::InsufficientData(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn finetune(client: &ClientState, global: &ExtractorParams, cfg: &PersonalizedConfig) -> Result<ExtractorParams> {
    if cfg.finetune_epochs == 0 {
        return Ok(global.clone());
    }
    let rng = Rng::new(cfg.seed).derive(&[client.id as u64]);
    let mut local = ClientState::new(client.id, Arc::clone(&client.shard), 0, 0, global.embed_dim(), rng);
    local.warm_start(global)?;
    let round = RoundConfig {
        rounds: 1,
        local_epochs: cfg.finetune_epochs,
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        batch_size: cfg.batch_size,
        mode: Mode::FedAvgPlain,
        lmcl: cfg.lmcl,
        privacy: PrivacyConfig::disabled(),
        ..RoundConfig::default()
    };
    client_local_update(&mut local, global, None, None, &round, 0)?;
    Ok(local.local_extractor.take().expect("local update stores its extractor"))
}

/// Per-client metrics on each client's held-out split for the three
/// variants. Non-mated probes are `non_mated` inputs (public samples).
pub fn personalized_eval(
    clients: &[ClientState],
    global: &ExtractorParams,
    non_mated: &Mat,
    cfg: &PersonalizedConfig,
) -> Result<Vec<PersonalizedRecord>> {
    let per: Vec<Result<Vec<PersonalizedRecord>>> = clients
        .par_iter()
        .map(|c| {
            let tuned = finetune(c, global, cfg)?;
            let own = c.local_extractor.as_ref().unwrap_or(global);
            let rows = [
                (Variant::Global, client_metrics(c, global, None, non_mated)?),
                (Variant::FineTune, client_metrics(c, &tuned, None, non_mated)?),
                (
                    Variant::Adapter,
                    client_metrics(c, own, Some(&c.adapter.rows), non_mated)?,
                ),
            ];
            Ok(rows
                .into_iter()
                .map(|(variant, metrics)| PersonalizedRecord {
                    client: c.id,
                    variant,
                    metrics,
                })
                .collect())
        })
        .collect();
    let mut out = Vec::new();
    for r in per {
        out.extend(r?);
    }
    Ok(out)
}
