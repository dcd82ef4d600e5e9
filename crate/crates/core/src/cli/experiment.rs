use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::report::{metrics_csv, render_summary, summarize, MetricsRecord, MetricsTable};
use super::write_atomic;
use crate::dataset::{generate, partition, train_eval_split, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{personalized_eval, GenericBenchmark, PersonalizedConfig, PersonalizedRecord};
use crate::federated::{
    pretrain, run, ClientShard, ClientState, LabeledSet, Mode, PretrainConfig, RoundConfig, ServerState,
};
use crate::losses::KMode;
use crate::model::{ExtractorConfig, ExtractorParams};
use crate::numkit::Rng;

/// Negative-count sweep for the full mode. The public class count is
/// always appended to `k_values`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub k_values: Vec<usize>,
    pub learnable: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            k_values: vec![1, 3],
            learnable: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// First seed; repeats use `seed, seed+1, …`.
    pub seed: u64,
    pub repeats: usize,
    pub out_dir: PathBuf,
    pub modes: Vec<Mode>,
    /// `data.seed` is replaced by the run seed.
    pub data: SynthConfig,
    pub model: ExtractorConfig,
    pub pretrain: PretrainConfig,
    pub federation: RoundConfig,
    pub personalized: PersonalizedConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            repeats: 1,
            out_dir: PathBuf::from("out"),
            modes: vec![Mode::FedAvgPlain, Mode::ContrastiveOnly, Mode::AdaFedFR],
            data: SynthConfig::default(),
            model: ExtractorConfig::default(),
            pretrain: PretrainConfig::default(),
            federation: RoundConfig::default(),
            personalized: PersonalizedConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("modes must list at least one mode".into()));
        }
        self.data.validate()?;
        self.model.validate()?;
        if self.model.input_dim != self.data.input_dim {
            return Err(Error::Config(format!(
                "model.input_dim ({}) must equal data.input_dim ({})",
                self.model.input_dim, self.data.input_dim
            )));
        }
        self.pretrain.validate()?;
        if self.federation.lr <= 0.0 {
            return Err(Error::Config("federation.lr must be > 0".into()));
        }
        for &mode in &self.modes {
            RoundConfig {
                mode,
                ..self.federation.clone()
            }
            .validate(Some(self.data.n_server_ids))?;
        }
        let g = self.data.n_server_ids;
        if let Some(&k) = self.ablation.k_values.iter().find(|&&k| k == 0 || k > g) {
            return Err(Error::Config(format!(
                "ablation.k_values entry {k} must lie in 1..={g}"
            )));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|r| self.seed + r).collect()
    }

    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// Data and pretrained model shared by every mode of one seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seed: u64,
    pub public: Arc<LabeledSet>,
    pub shards: Vec<Arc<ClientShard>>,
    pub benchmark: GenericBenchmark,
    pub pretrained: ExtractorParams,
    pub pretrain_trace: Vec<f64>,
}

fn labeled(ds: &crate::dataset::IdentityDataset, ids: &[usize], split: Option<Split>) -> Result<LabeledSet> {
    let mut idx = Vec::new();
    let mut labels = Vec::new();
    for (local, &id) in ids.iter().enumerate() {
        let found = ds.indices_of(id, split);
        labels.extend(std::iter::repeat_n(local, found.len()));
        idx.extend(found);
    }
    LabeledSet::new(ds.samples.select_rows(&idx), labels, ids.len())
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let data_cfg = SynthConfig {
        seed,
        ..cfg.data.clone()
    };
    let generated = generate(&data_cfg)?;
    let root = Rng::new(seed);
    let part = partition(&generated.dataset, &data_cfg, &mut root.derive(&[1]))?;
    let ds = train_eval_split(&generated.dataset, data_cfg.train_ratio, &mut root.derive(&[2]))?;

    let public = Arc::new(labeled(&ds, &part.server, None)?);
    let shards = part
        .clients
        .iter()
        .map(|ids| {
            Ok(Arc::new(ClientShard {
                train: labeled(&ds, ids, Some(Split::Train))?,
                eval: labeled(&ds, ids, Some(Split::Eval))?,
                identities: ids.clone(),
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let held_out = labeled(&ds, &part.eval, None)?;
    let mut train_flags = Vec::with_capacity(held_out.len());
    for &id in &part.eval {
        train_flags.extend(ds.indices_of(id, None).iter().map(|&i| ds.split[i] == Split::Train));
    }
    let benchmark = GenericBenchmark::new(&held_out.inputs, &held_out.labels, &train_flags)?;

    let init = ExtractorParams::init(&cfg.model, &mut root.derive(&[3]));
    let server = ServerState::new(init, Arc::clone(&public));
    let pre = pretrain(&server, cfg.pretrain.epochs, &cfg.pretrain, &mut root.derive(&[4]))?;
    log::info!(
        "seed {seed}: pretrain loss {:.4} -> {:.4}",
        pre.trace[0],
        pre.trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(Prepared {
        seed,
        public,
        shards,
        benchmark,
        pretrained: pre.extractor,
        pretrain_trace: pre.trace,
    })
}

/// Rows from one federated run of one mode and seed.
#[derive(Debug, Clone)]
pub struct ModeOutcome {
    pub records: Vec<MetricsRecord>,
    pub personalized: Vec<PersonalizedRecord>,
    /// Seconds spent on each round, including its evaluation.
    pub seconds: Vec<f64>,
    pub clients: Vec<ClientState>,
    pub final_extractor: ExtractorParams,
}

pub fn build_clients(prep: &Prepared, mode: Mode, embed_dim: usize) -> Result<Vec<ClientState>> {
    let g = prep.public.classes;
    let extra = if mode.shares_data() { g } else { 0 };
    prep.shards
        .iter()
        .enumerate()
        .map(|(i, shard)| {
            let rng = Rng::new(prep.seed).derive(&[5, i as u64]);
            let mut c = ClientState::new(i, Arc::clone(shard), g, extra, embed_dim, rng);
            c.warm_start(&prep.pretrained)?;
            Ok(c)
        })
        .collect()
}

/// Federate from the pretrained model with `round` and evaluate every round.
pub fn run_mode(prep: &Prepared, cfg: &ExperimentConfig, round: &RoundConfig, label: &str) -> Result<ModeOutcome> {
    let mut clients = build_clients(prep, round.mode, cfg.model.embed_dim)?;
    let mut server = ServerState::new(prep.pretrained.clone(), Arc::clone(&prep.public));
    let mut seconds = Vec::new();
    let mut clock = Instant::now();
    let rounds = run(&mut server, &mut clients, round, |s, _| {
        let m = prep.benchmark.evaluate(&s.extractor)?;
        seconds.push(clock.elapsed().as_secs_f64());
        clock = Instant::now();
        log::info!(
            "seed {} {label} round {}: tar@1e-2 {:?} top1 {:?}",
            prep.seed,
            s.round,
            m.tar_far_1e2,
            m.top1
        );
        Ok(m)
    })?;
    let records = rounds
        .into_iter()
        .map(|r| MetricsRecord {
            seed: prep.seed,
            mode: label.to_string(),
            round: r.round,
            losses: r.losses,
            metrics: r.eval,
        })
        .collect();
    let pcfg = PersonalizedConfig {
        seed: prep.seed,
        ..cfg.personalized
    };
    let personalized = personalized_eval(&clients, &server.extractor, &prep.public.inputs, &pcfg)?;
    Ok(ModeOutcome {
        records,
        personalized,
        seconds,
        clients,
        final_extractor: server.extractor,
    })
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    pub records: Vec<MetricsRecord>,
    pub personalized: Vec<(u64, String, PersonalizedRecord)>,
    pub timings: Vec<(u64, String, usize, f64)>,
}

impl ExperimentOutput {
    fn absorb(&mut self, seed: u64, label: &str, out: ModeOutcome) {
        for (round, s) in out.seconds.iter().enumerate() {
            self.timings.push((seed, label.to_string(), round, *s));
        }
        self.personalized
            .extend(out.personalized.into_iter().map(|p| (seed, label.to_string(), p)));
        self.records.extend(out.records);
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.records)
    }

    pub fn summary(&self, source: &str) -> Result<String> {
        let table = MetricsTable::parse(&self.metrics_csv())?;
        Ok(render_summary(&summarize(&table, source)))
    }

    pub fn personalized_csv(&self) -> String {
        let mut out = String::from("seed,mode,client,variant,tar_far_1e-1,tar_far_1e-2,tpir_fpir_1e-1,top1,top5\n");
        let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for (seed, mode, p) in &self.personalized {
            let m = p.metrics;
            out.push_str(&format!(
                "{seed},{mode},{},{},{},{},{},{},{}\n",
                p.client,
                p.variant.name(),
                cell(m.tar_far_1e1),
                cell(m.tar_far_1e2),
                cell(m.tpir_fpir_1e1),
                cell(m.top1),
                cell(m.top5)
            ));
        }
        out
    }

    pub fn timings_csv(&self) -> String {
        let mut out = String::from("seed,mode,round,seconds\n");
        for (seed, mode, round, s) in &self.timings {
            out.push_str(&format!("{seed},{mode},{round},{s:.6}\n"));
        }
        out
    }
}

/// Every configured mode for every seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let mut out = ExperimentOutput::default();
    for seed in cfg.seeds() {
        let prep = prepare(cfg, seed)?;
        for &mode in &cfg.modes {
            let round = RoundConfig {
                mode,
                ..cfg.federation.clone()
            };
            let res = run_mode(&prep, cfg, &round, mode.name())?;
            out.absorb(seed, mode.name(), res);
        }
    }
    Ok(out)
}

/// Labels and negative-count settings swept by [`run_ablation`].
pub fn ablation_settings(cfg: &ExperimentConfig) -> Vec<(String, KMode)> {
    let g = cfg.data.n_server_ids;
    let mut ks = cfg.ablation.k_values.clone();
    ks.push(g);
    ks.sort_unstable();
    ks.dedup();
    let mut out: Vec<(String, KMode)> = ks.into_iter().map(|k| (format!("k={k}"), KMode::Fixed(k))).collect();
    if cfg.ablation.learnable {
        out.push(("k=learnable".into(), KMode::Learnable));
    }
    out
}

/// The full mode under each negative-count setting, every seed.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let mut out = ExperimentOutput::default();
    for seed in cfg.seeds() {
        let prep = prepare(cfg, seed)?;
        for (label, k_mode) in ablation_settings(cfg) {
            let mut round = RoundConfig {
                mode: Mode::AdaFedFR,
                ..cfg.federation.clone()
            };
            round.kcl.k_mode = k_mode;
            let res = run_mode(&prep, cfg, &round, &label)?;
            out.absorb(seed, &label, res);
        }
    }
    Ok(out)
}

/// Write the standard artifacts of `out` into `dir`.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, out: &ExperimentOutput, prefix: &str) -> Result<()> {
    let source = match prefix.trim_end_matches('_') {
        "" => "run",
        p => p,
    };
    let csv = out.metrics_csv();
    let svg = super::report::plot_curves(&csv, "tar_far_1e-2")?;
    write_atomic(&dir.join("config.resolved.json"), &cfg.resolved_json())?;
    write_atomic(&dir.join(format!("{prefix}metrics.csv")), &csv)?;
    write_atomic(&dir.join(format!("{prefix}summary.txt")), &out.summary(source)?)?;
    write_atomic(&dir.join(format!("{prefix}curves.svg")), &svg)?;
    write_atomic(&dir.join(format!("{prefix}personalized.csv")), &out.personalized_csv())?;
    write_atomic(&dir.join(format!("{prefix}timings.csv")), &out.timings_csv())
}
