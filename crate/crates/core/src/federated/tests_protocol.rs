use std::sync::Arc;

use super::*;
use crate::losses::{kcl, lmcl, overall, KMode, LossBundle};
use crate::model::{
    embed, encode_extractor, extract, extract_backward, Activation, EmbeddingBatch, ExtractorConfig, ExtractorParams,
    GlobalRepresentations,
};
use crate::numkit::{normalize, Mat, Rng};

fn small_net(rng: &mut Rng) -> ExtractorParams {
    let cfg = ExtractorConfig {
        input_dim: 6,
        hidden: vec![8],
        embed_dim: 4,
        activation: Activation::Tanh,
    };
    ExtractorParams::init(&cfg, rng)
}

fn labeled(rng: &mut Rng, classes: usize, per: usize, dim: usize) -> LabeledSet {
    let centers = Mat::gaussian(rng, classes, dim, 1.0);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for c in 0..classes {
        for _ in 0..per {
            rows.push(
                centers
                    .row(c)
                    .iter()
                    .map(|x| x + 0.3 * rng.normal())
                    .collect::<Vec<_>>(),
            );
            labels.push(c);
        }
    }
    LabeledSet::new(Mat::from_rows(&rows).unwrap(), labels, classes).unwrap()
}

struct Fixture {
    server: ServerState,
    clients: Vec<ClientState>,
}

fn fixture(seed: u64, n_clients: usize, mode: Mode) -> Fixture {
    let mut rng = Rng::new(seed);
    let w = small_net(&mut rng);
    let public = Arc::new(labeled(&mut rng, 5, 3, 6));
    let extra = if mode.shares_data() { public.classes } else { 0 };
    let clients = (0..n_clients)
        .map(|i| {
            let train = labeled(&mut rng, 3, 4, 6);
            let eval = labeled(&mut rng, 3, 2, 6);
            let shard = Arc::new(ClientShard {
                train,
                eval,
                identities: vec![10 * i, 10 * i + 1, 10 * i + 2],
            });
            ClientState::new(i, shard, public.classes, extra, 4, rng.derive(&[i as u64]))
        })
        .collect();
    Fixture {
        server: ServerState::new(w, public),
        clients,
    }
}

fn quick_cfg(mode: Mode) -> RoundConfig {
    let mut cfg = RoundConfig {
        rounds: 3,
        local_epochs: 2,
        lr: 0.05,
        batch_size: 5,
        mode,
        privacy: PrivacyConfig::disabled(),
        ..RoundConfig::default()
    };
    cfg.kcl.k_mode = KMode::Fixed(3);
    cfg
}

fn final_norm(server: &ServerState, _: &[ClientState]) -> crate::Result<Vec<f64>> {
    Ok(server.extractor.to_flat())
}

#[test]
fn representations_match_mean_then_normalize() {
    let fx = fixture(1, 1, Mode::AdaFedFR);
    let reps = extract_representations(&fx.server).unwrap();
    let feats = embed(&fx.server.extractor, &fx.server.public.inputs).unwrap();
    for c in 0..fx.server.public.classes {
        let idx = fx.server.public.indices_of(c);
        let mut mean = vec![0.0; 4];
        for &i in &idx {
            for (m, x) in mean.iter_mut().zip(feats.row(i)) {
                *m += x / idx.len() as f64;
            }
        }
        let want = normalize(&mean).unwrap();
        for (a, b) in reps.matrix().row(c).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn single_sample_identity_representation() {
    let mut rng = Rng::new(2);
    let w = small_net(&mut rng);
    let public = Arc::new(LabeledSet::new(Mat::gaussian(&mut rng, 2, 6, 1.0), vec![0, 1], 2).unwrap());
    let server = ServerState::new(w.clone(), public.clone());
    let reps = extract_representations(&server).unwrap();
    let e = embed(&w, &public.inputs).unwrap();
    for c in 0..2 {
        let want = normalize(e.row(c)).unwrap();
        assert_eq!(reps.matrix().row(c), &want[..]);
    }
}

#[test]
fn zero_learning_rate_uploads_broadcast() {
    let mut fx = fixture(3, 1, Mode::AdaFedFR);
    let mut cfg = quick_cfg(Mode::AdaFedFR);
    cfg.lr = 0.0;
    cfg.privacy = PrivacyConfig {
        clip_norm: 1.0,
        ..PrivacyConfig::default()
    };
    let reps = extract_representations(&fx.server).unwrap();
    let up = client_local_update(&mut fx.clients[0], &fx.server.extractor, Some(&reps), None, &cfg, 0).unwrap();
    let want = clip_and_noise(&fx.server.extractor.to_flat(), &cfg.privacy, &mut Rng::new(0));
    assert_eq!(up.params, want);
}

#[test]
fn single_step_matches_hand_oracle() {
    let mut fx = fixture(4, 1, Mode::AdaFedFR);
    let mut cfg = quick_cfg(Mode::AdaFedFR);
    cfg.local_epochs = 1;
    cfg.batch_size = 64;
    cfg.weight_decay = 0.0;
    cfg.lr = 0.03;
    let w0 = fx.server.extractor.clone();
    let reps = extract_representations(&fx.server).unwrap();
    let client = fx.clients[0].clone();
    let up = client_local_update(&mut fx.clients[0], &w0, Some(&reps), None, &cfg, 0).unwrap();

    let data = &client.shard.train;
    let ex = extract(&w0, &data.inputs).unwrap();
    let fg = embed(&w0, &data.inputs).unwrap();
    let batch = EmbeddingBatch::new(ex.features.clone(), data.labels.clone()).unwrap();
    let l = lmcl(&batch, &client.class_embeddings, &cfg.lmcl).unwrap();
    let k = kcl(&ex.features, &fg, &reps, &client.gate, &cfg.kcl).unwrap();
    let total = overall(&l, &k, &LossBundle::zero(), cfg.alphas);
    let (gw, _) = extract_backward(&w0, &ex.cache, total.features.as_ref().unwrap()).unwrap();
    let want: Vec<f64> = w0
        .to_flat()
        .iter()
        .zip(gw.to_flat())
        .map(|(p, g)| p - cfg.lr * g)
        .collect();
    for (a, b) in up.params.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn zero_weights_reduce_to_plain_fedavg_bitwise() {
    let mut cfg_a = quick_cfg(Mode::AdaFedFR);
    cfg_a.alphas.kcl = 0.0;
    cfg_a.alphas.bce = 0.0;
    let cfg_p = quick_cfg(Mode::FedAvgPlain);
    let mut a = fixture(5, 3, Mode::AdaFedFR);
    let mut p = fixture(5, 3, Mode::FedAvgPlain);
    let ra = run(&mut a.server, &mut a.clients, &cfg_a, final_norm).unwrap();
    let rp = run(&mut p.server, &mut p.clients, &cfg_p, final_norm).unwrap();
    assert_eq!(ra.len(), 4);
    for (x, y) in ra.iter().zip(&rp) {
        let bits = |v: &Vec<f64>| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x.eval), bits(&y.eval));
        assert_eq!(x.losses.map(|l| l.lmc.to_bits()), y.losses.map(|l| l.lmc.to_bits()));
    }
}

#[test]
fn zero_rounds_reports_only_start() {
    let mut fx = fixture(6, 2, Mode::AdaFedFR);
    let mut cfg = quick_cfg(Mode::AdaFedFR);
    cfg.rounds = 0;
    let start = fx.server.extractor.to_flat();
    let recs = run(&mut fx.server, &mut fx.clients, &cfg, final_norm).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].round, 0);
    assert!(recs[0].losses.is_none());
    assert_eq!(recs[0].eval, start);
}

#[test]
fn single_client_federation_adopts_local_result() {
    for mode in Mode::ALL {
        let mut fx = fixture(7, 1, mode);
        let mut cfg = quick_cfg(mode);
        cfg.rounds = 1;
        run(&mut fx.server, &mut fx.clients, &cfg, final_norm).unwrap();
        let local = fx.clients[0].local_extractor.as_ref().unwrap();
        assert_eq!(fx.server.extractor.to_flat(), local.to_flat(), "{mode}");
    }
}

#[test]
fn runs_are_deterministic_and_order_free() {
    for mode in Mode::ALL {
        let cfg = quick_cfg(mode);
        let mut a = fixture(8, 3, mode);
        let mut b = fixture(8, 3, mode);
        let ra = run(&mut a.server, &mut a.clients, &cfg, final_norm).unwrap();
        let rb = run(&mut b.server, &mut b.clients, &cfg, final_norm).unwrap();
        assert_eq!(ra, rb);

        let mut c = fixture(8, 3, mode);
        c.clients.reverse();
        let rc = run(&mut c.server, &mut c.clients, &cfg, final_norm).unwrap();
        assert_eq!(ra.last().unwrap().eval, rc.last().unwrap().eval);
    }
}

#[test]
fn local_state_persists_and_moves() {
    let mut fx = fixture(9, 2, Mode::AdaFedFR);
    let before = fx.clients[0].clone();
    let cfg = quick_cfg(Mode::AdaFedFR);
    run(&mut fx.server, &mut fx.clients, &cfg, final_norm).unwrap();
    let after = &fx.clients[0];
    assert_ne!(before.class_embeddings, after.class_embeddings);
    assert_ne!(before.adapter, after.adapter);
    assert_ne!(before.gate, after.gate);
    for r in 0..after.class_embeddings.rows() {
        let n: f64 = after.class_embeddings.row(r).iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }
}

#[test]
fn upload_carries_only_the_extractor() {
    let mut fx = fixture(10, 1, Mode::AdaFedFR);
    let cfg = quick_cfg(Mode::AdaFedFR);
    let reps = extract_representations(&fx.server).unwrap();
    let w = fx.server.extractor.clone();
    let up = client_local_update(&mut fx.clients[0], &w, Some(&reps), None, &cfg, 0).unwrap();
    assert_eq!(up.params.len(), w.num_params());
    let bytes = encode_extractor(1, &w.with_flat(&up.params).unwrap());
    let c = &fx.clients[0];
    let private: Vec<f64> = c
        .class_embeddings
        .data()
        .iter()
        .chain(c.adapter.rows.data())
        .chain(std::iter::once(&c.adapter.bias))
        .chain(&c.gate.psi)
        .copied()
        .filter(|x| *x != 0.0)
        .collect();
    for v in private {
        let needle = v.to_le_bytes();
        assert!(
            !bytes.windows(8).any(|win| win == needle),
            "private value {v} in upload"
        );
    }
}

#[test]
fn shared_mode_needs_and_uses_public_classes() {
    let mut fx = fixture(11, 1, Mode::GlobalDataShare);
    let cfg = quick_cfg(Mode::GlobalDataShare);
    let shared = fx.server.shared_samples(cfg.share_per_id);
    assert_eq!(shared.len(), 5 * cfg.share_per_id);
    let w = fx.server.extractor.clone();
    assert!(client_local_update(&mut fx.clients[0], &w, None, None, &cfg, 0).is_err());
    assert!(client_local_update(&mut fx.clients[0], &w, None, Some(&shared), &cfg, 0).is_ok());
    assert_eq!(fx.clients[0].class_embeddings.rows(), 3 + 5);
}

#[test]
fn representations_required_for_full_mode() {
    let mut fx = fixture(12, 1, Mode::AdaFedFR);
    let w = fx.server.extractor.clone();
    let err = client_local_update(&mut fx.clients[0], &w, None, None, &quick_cfg(Mode::AdaFedFR), 0);
    assert!(matches!(err, Err(crate::Error::InsufficientData(_))));
}

#[test]
fn non_finite_loss_reports_client_and_batch() {
    let mut fx = fixture(13, 2, Mode::FedAvgPlain);
    let mut cfg = quick_cfg(Mode::FedAvgPlain);
    cfg.alphas.lmc = f64::MAX;
    let err = run(&mut fx.server, &mut fx.clients, &cfg, final_norm).unwrap_err();
    match err {
        crate::Error::NonFiniteLoss { round, client, batch } => {
            assert_eq!((round, client, batch), (0, Some(0), 0));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn privacy_noise_changes_uploads_only_when_enabled() {
    let mut cfg = quick_cfg(Mode::FedAvgPlain);
    cfg.rounds = 1;
    cfg.privacy = PrivacyConfig {
        sigma: 0.05,
        clip_norm: 1e6,
        ..PrivacyConfig::default()
    };
    let mut a = fixture(14, 1, Mode::FedAvgPlain);
    run(&mut a.server, &mut a.clients, &cfg, final_norm).unwrap();
    let local = a.clients[0].local_extractor.as_ref().unwrap().to_flat();
    assert_ne!(a.server.extractor.to_flat(), local);
    let mut b = fixture(14, 1, Mode::FedAvgPlain);
    run(&mut b.server, &mut b.clients, &cfg, final_norm).unwrap();
    assert_eq!(a.server.extractor, b.server.extractor);
}

#[test]
fn pretrain_descends_and_is_deterministic() {
    let fx = fixture(15, 1, Mode::FedAvgPlain);
    let cfg = PretrainConfig {
        lr: 1e-3,
        batch_size: 64,
        momentum: 0.0,
        weight_decay: 0.0,
        ..PretrainConfig::default()
    };
    let zero = pretrain(&fx.server, 0, &cfg, &mut Rng::new(1)).unwrap();
    assert_eq!(zero.extractor, fx.server.extractor);
    let a = pretrain(&fx.server, 15, &cfg, &mut Rng::new(1)).unwrap();
    for pair in a.trace.windows(2) {
        assert!(pair[1] <= pair[0] + 1e-12, "{:?}", a.trace);
    }
    assert!(a.trace.last().unwrap() < &a.trace[0]);
    let b = pretrain(&fx.server, 15, &cfg, &mut Rng::new(1)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    let w = small_net(&mut Rng::new(16));
    write_checkpoint(&path, 7, &w).unwrap();
    assert_eq!(read_checkpoint(&path).unwrap(), (7, w));
    assert!(read_checkpoint(&dir.path().join("missing")).is_err());
}

#[test]
fn warm_start_uses_class_means() {
    let mut fx = fixture(17, 1, Mode::AdaFedFR);
    let w = fx.server.extractor.clone();
    fx.clients[0].warm_start(&w).unwrap();
    let c = &fx.clients[0];
    let reps = GlobalRepresentations::new(&{
        let feats = embed(&w, &c.shard.train.inputs).unwrap();
        let mut m = Mat::zeros(3, 4);
        for (i, &y) in c.shard.train.labels.iter().enumerate() {
            m.row_mut(y).iter_mut().zip(feats.row(i)).for_each(|(a, b)| *a += b);
        }
        m
    })
    .unwrap();
    for r in 0..3 {
        for (a, b) in c.class_embeddings.row(r).iter().zip(reps.matrix().row(r)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
