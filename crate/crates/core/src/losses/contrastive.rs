use serde::{Deserialize, Serialize};

use super::LossBundle;
use crate::error::{Error, Result};
use crate::model::{gate_values, log_gate, GateParams, GlobalRepresentations};
use crate::numkit::{log_sum_exp, normalize_backward, sigmoid, Mat};

/// How many public representations act as negatives for an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KMode {
    /// Keep the `k` largest gated terms.
    Fixed(usize),
    /// Keep the `round(Σφ)` largest gated terms; the gate mass sets k.
    Learnable,
    /// Every public class is a negative.
    All,
}

impl KMode {
    pub fn effective_k(&self, phi: &[f64]) -> usize {
        match *self {
            KMode::Fixed(k) => k.min(phi.len()),
            KMode::Learnable => (phi.iter().sum::<f64>().round() as usize).min(phi.len()),
            KMode::All => phi.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KclConfig {
    pub tau: f64,
    pub k_mode: KMode,
}

impl Default for KclConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            k_mode: KMode::All,
        }
    }
}

impl KclConfig {
    pub fn validate(&self, public_classes: Option<usize>) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("kcl.tau must be > 0 (got {})", self.tau)));
        }
        if let KMode::Fixed(k) = self.k_mode {
            let g = public_classes.unwrap_or(usize::MAX);
            if k == 0 || k > g {
                return Err(Error::Config(format!("kcl.k_mode.fixed must lie in 1..={g} (got {k})")));
            }
        }
        Ok(())
    }
}

/// Indices of the `k` largest scores, ties toward the lower index.
pub fn select_negatives(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

struct AnchorTerms {
    value: f64,
    d_pos: f64,
    d_neg: Vec<f64>,
}

/// `-log(e^{a} / (e^{a} + Σ e^{nᵢ}))` with `a = pos/τ`, `nᵢ = negᵢ/τ + ln wᵢ`.
/// Returns derivatives w.r.t. `pos` and each `negᵢ`; the derivative w.r.t.
/// `ln wᵢ` is `τ · d_neg[i]`.
fn infonce_anchor(pos: f64, neg: &[f64], log_w: &[f64], tau: f64) -> Result<AnchorTerms> {
    let a = pos / tau;
    let mut logits = Vec::with_capacity(neg.len() + 1);
    logits.push(a);
    logits.extend(neg.iter().zip(log_w).map(|(n, w)| n / tau + w));
    let lse = log_sum_exp(&logits)?;
    let p0 = (a - lse).exp();
    Ok(AnchorTerms {
        value: lse - a,
        d_pos: (p0 - 1.0) / tau,
        d_neg: logits[1..].iter().map(|l| (l - lse).exp() / tau).collect(),
    })
}

fn check_pair(f: &Mat, fg: &Mat) -> Result<()> {
    if f.shape() != fg.shape() {
        return Err(Error::shape(
            "contrastive pair",
            format!("{}x{}", f.rows(), f.cols()),
            format!("{}x{}", fg.rows(), fg.cols()),
        ));
    }
    if f.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

/// Shared body of the contrastive losses. `pick` yields, for anchor `i`,
/// the negative rows to use and their log weights.
fn contrastive<P>(f: &Mat, fg: &Mat, negatives: &Mat, tau: f64, mut pick: P) -> Result<(f64, Mat)>
where
    P: FnMut(usize, &[f64], &mut Vec<usize>, &mut Vec<f64>),
{
    check_pair(f, fg)?;
    if negatives.rows() > 0 && negatives.cols() != f.cols() {
        return Err(Error::shape("contrastive negatives", f.cols(), negatives.cols()));
    }
    let b = f.rows();
    let scale = 1.0 / b as f64;
    let (fu, fnorm) = f.normalized_rows()?;
    let (gu, _) = fg.normalized_rows()?;
    let (nu, _) = if negatives.rows() > 0 {
        negatives.normalized_rows()?
    } else {
        (negatives.clone(), vec![])
    };
    let neg_cos = if nu.rows() > 0 {
        fu.matmul_t(&nu)?
    } else {
        Mat::zeros(b, 0)
    };
    let mut value = 0.0;
    let mut grad = Mat::zeros(b, f.cols());
    let (mut chosen, mut logw, mut sims) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..b {
        chosen.clear();
        logw.clear();
        pick(i, neg_cos.row(i), &mut chosen, &mut logw);
        sims.clear();
        sims.extend(chosen.iter().map(|&j| neg_cos.get(i, j)));
        let pos = crate::numkit::dot(fu.row(i), gu.row(i));
        let t = infonce_anchor(pos, &sims, &logw, tau)?;
        value += t.value * scale;
        let mut g_unit: Vec<f64> = gu.row(i).iter().map(|x| x * t.d_pos * scale).collect();
        for (&j, &dn) in chosen.iter().zip(&t.d_neg) {
            for (g, n) in g_unit.iter_mut().zip(nu.row(j)) {
                *g += dn * scale * n;
            }
        }
        grad.row_mut(i)
            .copy_from_slice(&normalize_backward(fu.row(i), fnorm[i], &g_unit));
    }
    Ok((value, grad))
}

/// N-pair style loss: positive `sim(f, f_g)`, every row of `negatives` as a
/// negative for every anchor, no gating. `f_g` and negatives are constants.
pub fn npair(f: &Mat, fg: &Mat, negatives: &Mat, tau: f64) -> Result<LossBundle> {
    let all: Vec<usize> = (0..negatives.rows()).collect();
    let (value, grad) = contrastive(f, fg, negatives, tau, |_, _, chosen, logw| {
        chosen.extend_from_slice(&all);
        logw.resize(all.len(), 0.0);
    })?;
    Ok(LossBundle {
        value,
        features: Some(grad),
        ..LossBundle::default()
    })
}

/// [`npair`] where a negative row is skipped for anchors sharing its label.
pub fn npair_excluding(
    f: &Mat,
    fg: &Mat,
    negatives: &Mat,
    anchor_labels: &[usize],
    negative_labels: &[usize],
    tau: f64,
) -> Result<LossBundle> {
    if anchor_labels.len() != f.rows() || negative_labels.len() != negatives.rows() {
        return Err(Error::shape(
            "npair_excluding labels",
            format!("{}+{}", f.rows(), negatives.rows()),
            format!("{}+{}", anchor_labels.len(), negative_labels.len()),
        ));
    }
    let (value, grad) = contrastive(f, fg, negatives, tau, |i, _, chosen, logw| {
        let y = anchor_labels[i];
        chosen.extend((0..negative_labels.len()).filter(|&j| negative_labels[j] != y));
        logw.resize(chosen.len(), 0.0);
    })?;
    Ok(LossBundle {
        value,
        features: Some(grad),
        ..LossBundle::default()
    })
}

/// Gated k-negative contrastive loss against the public representations.
/// Per anchor, each public row gets the term `φᵢ·exp(sim/τ)`; the selected
/// terms (see [`KMode`]) enter the denominator. Gradients go to the raw
/// features and to ψ of the selected rows only.
pub fn kcl(f: &Mat, fg: &Mat, reps: &GlobalRepresentations, gate: &GateParams, cfg: &KclConfig) -> Result<LossBundle> {
    let g = reps.count();
    if gate.len() != g {
        return Err(Error::shape("kcl gate", g, gate.len()));
    }
    if reps.dim() != f.cols() {
        return Err(Error::shape("kcl representations", f.cols(), reps.dim()));
    }
    let phi = gate_values(gate);
    let log_phi: Vec<f64> = gate.psi.iter().map(|&p| log_gate(p)).collect();
    let k = cfg.k_mode.effective_k(&phi);
    let tau = cfg.tau;
    let mut selections: Vec<Vec<usize>> = Vec::with_capacity(f.rows());
    let mut scores = vec![0.0; g];
    let (value, grad) = contrastive(f, fg, reps.matrix(), tau, |_, cos_row, chosen, logw| {
        for ((s, c), lp) in scores.iter_mut().zip(cos_row).zip(&log_phi) {
            *s = c / tau + lp;
        }
        let sel = select_negatives(&scores, k);
        chosen.extend_from_slice(&sel);
        logw.extend(sel.iter().map(|&j| log_phi[j]));
        selections.push(sel);
    })?;

    // d/dψᵢ = Σ_anchors pᵢ · (1 − φᵢ) / B, pᵢ the softmax weight of term i
    let (fu, _) = f.normalized_rows()?;
    let (gu, _) = fg.normalized_rows()?;
    let cos = fu.matmul_t(reps.matrix())?;
    let scale = 1.0 / f.rows() as f64;
    let mut dpsi = vec![0.0; g];
    for (i, sel) in selections.iter().enumerate() {
        if sel.is_empty() {
            continue;
        }
        let pos = crate::numkit::dot(fu.row(i), gu.row(i));
        let sims: Vec<f64> = sel.iter().map(|&j| cos.get(i, j)).collect();
        let lw: Vec<f64> = sel.iter().map(|&j| log_phi[j]).collect();
        let t = infonce_anchor(pos, &sims, &lw, tau)?;
        for (&j, dn) in sel.iter().zip(&t.d_neg) {
            dpsi[j] += dn * tau * sigmoid(-gate.psi[j]) * scale;
        }
    }
    Ok(LossBundle {
        value,
        features: Some(grad),
        gate: Some(dpsi),
        ..LossBundle::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{cosine_sim, Rng};
    use proptest::prelude::*;

    fn reps(m: &Mat) -> GlobalRepresentations {
        GlobalRepresentations::new(m).unwrap()
    }

    /// Brute force: evaluate every weighted term, sort them, keep k.
    fn kcl_oracle(f: &Mat, fg: &Mat, r: &Mat, psi: &[f64], tau: f64, k: usize) -> f64 {
        let mut total = 0.0;
        for i in 0..f.rows() {
            let pos = (cosine_sim(f.row(i), fg.row(i)).unwrap() / tau).exp();
            let mut terms: Vec<f64> = (0..r.rows())
                .map(|j| {
                    let phi = 1.0 / (1.0 + (-psi[j]).exp());
                    phi * (cosine_sim(f.row(i), r.row(j)).unwrap() / tau).exp()
                })
                .collect();
            terms.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let neg: f64 = terms.iter().take(k).sum();
            total += -(pos / (pos + neg)).ln();
        }
        total / f.rows() as f64
    }

    fn npair_oracle(f: &Mat, fg: &Mat, negs: &Mat, tau: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..f.rows() {
            let pos = (cosine_sim(f.row(i), fg.row(i)).unwrap() / tau).exp();
            let neg: f64 = negs
                .iter_rows()
                .map(|n| (cosine_sim(f.row(i), n).unwrap() / tau).exp())
                .sum();
            total += -(pos / (pos + neg)).ln();
        }
        total / f.rows() as f64
    }

    #[test]
    fn npair_examples() {
        let f = Mat::from_rows(&[vec![1.0, 0.5]]).unwrap();
        let fg = Mat::from_rows(&[vec![0.2, 1.0]]).unwrap();
        let out = npair(&f, &fg, &Mat::zeros(0, 2), 0.5).unwrap();
        assert!(out.value.abs() < 1e-15);

        // mirror of fg across f's direction has the same similarity
        let f = Mat::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let fg = Mat::from_rows(&[vec![0.6, 0.8]]).unwrap();
        let neg = Mat::from_rows(&[vec![0.6, -0.8]]).unwrap();
        let out = npair(&f, &fg, &neg, 0.5).unwrap();
        assert!((out.value - 2f64.ln()).abs() < 1e-12);

        let mut rng = Rng::new(31);
        let f = Mat::gaussian(&mut rng, 3, 4, 1.0);
        let fg = Mat::gaussian(&mut rng, 3, 4, 1.0);
        let negs = Mat::gaussian(&mut rng, 2, 4, 1.0);
        let out = npair(&f, &fg, &negs, 0.5).unwrap();
        assert!((out.value - npair_oracle(&f, &fg, &negs, 0.5)).abs() < 1e-10);

        assert!(npair(&f, &negs, &negs, 0.5).is_err());
    }

    #[test]
    fn npair_excluding_skips_same_label() {
        let mut rng = Rng::new(32);
        let f = Mat::gaussian(&mut rng, 2, 3, 1.0);
        let fg = Mat::gaussian(&mut rng, 2, 3, 1.0);
        let negs = Mat::gaussian(&mut rng, 3, 3, 1.0);
        let got = npair_excluding(&f, &fg, &negs, &[0, 1], &[0, 1, 2], 0.5).unwrap();
        let want = (npair_oracle(
            &f.select_rows(&[0]),
            &fg.select_rows(&[0]),
            &negs.select_rows(&[1, 2]),
            0.5,
        ) + npair_oracle(
            &f.select_rows(&[1]),
            &fg.select_rows(&[1]),
            &negs.select_rows(&[0, 2]),
            0.5,
        )) / 2.0;
        assert!((got.value - want).abs() < 1e-12);
    }

    #[test]
    fn kcl_empty_selection_is_zero() {
        let mut rng = Rng::new(33);
        let f = Mat::gaussian(&mut rng, 2, 3, 1.0);
        let fg = Mat::gaussian(&mut rng, 2, 3, 1.0);
        let r = reps(&Mat::gaussian(&mut rng, 4, 3, 1.0));
        let gate = GateParams { psi: vec![-40.0; 4] };
        let cfg = KclConfig {
            tau: 0.5,
            k_mode: KMode::Learnable,
        };
        let out = kcl(&f, &fg, &r, &gate, &cfg).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.gate.unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn kcl_single_saturated_negative_ln2() {
        let f = Mat::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let fg = Mat::from_rows(&[vec![0.6, 0.8]]).unwrap();
        let r = reps(&Mat::from_rows(&[vec![0.6, -0.8]]).unwrap());
        let gate = GateParams { psi: vec![40.0] };
        let cfg = KclConfig {
            tau: 0.5,
            k_mode: KMode::Fixed(1),
        };
        let out = kcl(&f, &fg, &r, &gate, &cfg).unwrap();
        assert!((out.value - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kcl_matches_topk_oracle() {
        let mut rng = Rng::new(34);
        let f = Mat::gaussian(&mut rng, 3, 4, 1.0);
        let fg = Mat::gaussian(&mut rng, 3, 4, 1.0);
        let rm = Mat::gaussian(&mut rng, 5, 4, 1.0);
        let psi: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let gate = GateParams { psi: psi.clone() };
        let cfg = KclConfig {
            tau: 0.5,
            k_mode: KMode::Fixed(3),
        };
        let out = kcl(&f, &fg, &reps(&rm), &gate, &cfg).unwrap();
        let want = kcl_oracle(&f, &fg, &rm, &psi, 0.5, 3);
        assert!((out.value - want).abs() < 1e-10, "{} vs {want}", out.value);
    }

    #[test]
    fn kcl_unselected_gate_grad_is_zero() {
        let mut rng = Rng::new(35);
        let f = Mat::gaussian(&mut rng, 1, 4, 1.0);
        let fg = Mat::gaussian(&mut rng, 1, 4, 1.0);
        let rm = Mat::gaussian(&mut rng, 5, 4, 1.0);
        let gate = GateParams { psi: vec![0.0; 5] };
        let cfg = KclConfig {
            tau: 0.5,
            k_mode: KMode::Fixed(2),
        };
        let out = kcl(&f, &fg, &reps(&rm), &gate, &cfg).unwrap();
        let cos: Vec<f64> = rm.iter_rows().map(|r| cosine_sim(f.row(0), r).unwrap()).collect();
        let sel = select_negatives(&cos, 2);
        let dpsi = out.gate.unwrap();
        for j in 0..5 {
            if sel.contains(&j) {
                assert!(dpsi[j] > 0.0);
            } else {
                assert_eq!(dpsi[j], 0.0);
            }
        }
    }

    #[test]
    fn kcl_reduces_to_npair() {
        let mut rng = Rng::new(36);
        let f = Mat::gaussian(&mut rng, 4, 6, 1.0);
        let fg = Mat::gaussian(&mut rng, 4, 6, 1.0);
        let rm = Mat::gaussian(&mut rng, 5, 6, 1.0);
        let gate = GateParams { psi: vec![40.0; 5] };
        let cfg = KclConfig {
            tau: 0.5,
            k_mode: KMode::Fixed(5),
        };
        let a = kcl(&f, &fg, &reps(&rm), &gate, &cfg).unwrap();
        let b = npair(&f, &fg, &rm, 0.5).unwrap();
        assert!((a.value - b.value).abs() < 1e-9);
    }

    #[test]
    fn learnable_k_tracks_gate_mass() {
        assert_eq!(KMode::Learnable.effective_k(&[0.5; 6]), 3);
        assert_eq!(KMode::Learnable.effective_k(&[0.9; 4]), 4);
        assert_eq!(KMode::Learnable.effective_k(&[0.01; 4]), 0);
        assert_eq!(KMode::Fixed(9).effective_k(&[0.5; 4]), 4);
        assert_eq!(KMode::All.effective_k(&[0.01; 4]), 4);
    }

    #[test]
    fn validation() {
        assert!(KclConfig {
            tau: 0.0,
            k_mode: KMode::Learnable
        }
        .validate(None)
        .is_err());
        assert!(KclConfig {
            tau: 0.5,
            k_mode: KMode::Fixed(0)
        }
        .validate(Some(3))
        .is_err());
        assert!(KclConfig {
            tau: 0.5,
            k_mode: KMode::Fixed(4)
        }
        .validate(Some(3))
        .is_err());
        assert!(KclConfig {
            tau: 0.5,
            k_mode: KMode::Fixed(3)
        }
        .validate(Some(3))
        .is_ok());
    }

    fn fd_check(num: f64, an: f64) -> bool {
        (num - an).abs() <= 1e-4 * num.abs().max(an.abs()).max(1e-5)
    }

    #[test]
    fn kcl_gradients_finite_difference() {
        let mut rng = Rng::new(37);
        let f = Mat::gaussian(&mut rng, 3, 5, 1.0);
        let fg = Mat::gaussian(&mut rng, 3, 5, 1.0);
        let r = reps(&Mat::gaussian(&mut rng, 6, 5, 1.0));
        let gate = GateParams {
            psi: (0..6).map(|_| rng.normal()).collect(),
        };
        let cfg = KclConfig {
            tau: 0.5,
            k_mode: KMode::Fixed(3),
        };
        let out = kcl(&f, &fg, &r, &gate, &cfg).unwrap();
        let h = 1e-5;
        for i in 0..f.data().len() {
            let (mut a, mut b) = (f.clone(), f.clone());
            a.data_mut()[i] += h;
            b.data_mut()[i] -= h;
            let num = (kcl(&a, &fg, &r, &gate, &cfg).unwrap().value - kcl(&b, &fg, &r, &gate, &cfg).unwrap().value)
                / (2.0 * h);
            assert!(fd_check(num, out.features.as_ref().unwrap().data()[i]));
        }
        for j in 0..6 {
            let (mut a, mut b) = (gate.clone(), gate.clone());
            a.psi[j] += h;
            b.psi[j] -= h;
            let num =
                (kcl(&f, &fg, &r, &a, &cfg).unwrap().value - kcl(&f, &fg, &r, &b, &cfg).unwrap().value) / (2.0 * h);
            assert!(fd_check(num, out.gate.as_ref().unwrap()[j]), "psi {j}");
        }
    }

    proptest! {
        #[test]
        fn kcl_monotone_in_negative_similarity(seed in any::<u64>(), t in 0.0f64..1.0) {
            // Pull one selected negative away from the anchor along a great
            // circle; the loss must not increase.
            let mut rng = Rng::new(seed);
            let f = Mat::gaussian(&mut rng, 1, 4, 1.0);
            let fg = Mat::gaussian(&mut rng, 1, 4, 1.0);
            let mut rm = Mat::gaussian(&mut rng, 3, 4, 1.0);
            let gate = GateParams { psi: vec![0.0; 3] };
            let cfg = KclConfig { tau: 0.5, k_mode: KMode::Fixed(3) };
            let before = kcl(&f, &fg, &reps(&rm), &gate, &cfg).unwrap().value;
            let anti: Vec<f64> = crate::numkit::normalize(f.row(0)).unwrap().iter().map(|x| -x).collect();
            let r0 = crate::numkit::normalize(rm.row(0)).unwrap();
            let moved: Vec<f64> = r0.iter().zip(&anti).map(|(a, b)| (1.0 - t) * a + t * b + 1e-9).collect();
            prop_assume!(crate::numkit::norm(&moved) > 1e-6);
            rm.row_mut(0).copy_from_slice(&moved);
            let after = kcl(&f, &fg, &reps(&rm), &gate, &cfg).unwrap().value;
            prop_assert!(after <= before + 1e-12);
            prop_assert!(after >= 0.0);
        }
    }
}
