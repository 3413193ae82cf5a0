use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{PseudoLabelBundle, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{log_softmax_rows, normalize_rows, softmax_rows, ForwardMode, Network};
use crate::propagation::InstanceDistribution;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_u: f64,
    pub l_in: f64,
    pub l_overall: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.l_s.is_finite() && self.l_u.is_finite() && self.l_in.is_finite() && self.l_overall.is_finite()
    }
}

/// What the strong-view embedding is compared against in the instance term.
#[derive(Debug, Clone, Copy)]
pub enum InstanceTarget<'a> {
    /// Similarities to the buffer rows (unit norm), matched to `q_hat`.
    Matching {
        reference: ArrayView2<'a, f64>,
        targets: &'a [InstanceDistribution],
    },
    /// Similarities to the normalized weak-view embeddings of the same
    /// batch; the positive for row `i` is row `i`.
    InfoNce { reference: ArrayView2<'a, f64> },
}

/// Gradients of the overall loss with respect to the network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    pub d_logits_l: Array2<f64>,
    pub d_logits_s: Array2<f64>,
    pub d_z_s: Array2<f64>,
}

/// Summed cross entropy between each target row and
/// `softmax(normalize(z) . reference^T / t)`, plus its gradient w.r.t. `z`.
fn instance_term(
    z: &Array2<f64>,
    reference: ArrayView2<f64>,
    target: impl Fn(usize, usize) -> f64,
    temperature: f64,
) -> Result<(f64, Array2<f64>)> {
    if reference.ncols() != z.ncols() {
        return Err(Error::input("instance reference width differs from the embedding"));
    }
    let (z_hat, norms) = normalize_rows(z);
    if norms.iter().any(|&n| !(n > 0.0) || !n.is_finite()) {
        return Err(Error::input("strong-view embedding has zero or non-finite norm"));
    }
    let scaled = z_hat.dot(&reference.t()) / temperature;
    let log_q = log_softmax_rows(&scaled);
    let q = log_q.mapv(f64::exp);
    let mut loss = 0.0;
    let mut d_sims = Array2::zeros(scaled.dim());
    for ((i, j), d) in d_sims.indexed_iter_mut() {
        let t = target(i, j);
        loss -= t * log_q[[i, j]];
        *d = (q[[i, j]] - t) / temperature;
    }
    let d_zhat = d_sims.dot(&reference);
    let mut d_z = d_zhat.clone();
    for (((mut row, zh), dzh), &n) in d_z
        .outer_iter_mut()
        .zip(z_hat.outer_iter())
        .zip(d_zhat.outer_iter())
        .zip(&norms)
    {
        let proj = zh.dot(&dzh);
        row.scaled_add(-proj, &zh);
        row /= n;
    }
    Ok((loss, d_z))
}

/// Loss terms and their gradients with respect to the student outputs:
/// labeled logits, strong-view logits and strong-view embeddings.
pub fn loss_and_output_grads(
    logits_l: &Array2<f64>,
    labels: &[usize],
    logits_s: &Array2<f64>,
    z_s: &Array2<f64>,
    bundle: &PseudoLabelBundle,
    instance: InstanceTarget<'_>,
    config: &TrainConfig,
) -> Result<(LossBreakdown, OutputGrads)> {
    let b = logits_l.nrows();
    let n_u = logits_s.nrows();
    let l = logits_l.ncols();
    if labels.len() != b || b == 0 {
        return Err(Error::input("labeled logits and labels differ in length"));
    }
    if bundle.len() != n_u || z_s.nrows() != n_u || n_u == 0 {
        return Err(Error::input("unlabeled outputs and pseudo-labels differ in length"));
    }
    if let Some(&c) = labels.iter().find(|&&c| c >= l) {
        return Err(Error::input(format!("label {c} outside [0, {l})")));
    }

    let log_p_l = log_softmax_rows(logits_l);
    let l_s = -labels.iter().enumerate().map(|(i, &c)| log_p_l[[i, c]]).sum::<f64>() / b as f64;
    let mut d_logits_l = log_p_l.mapv(f64::exp);
    for (i, &c) in labels.iter().enumerate() {
        d_logits_l[[i, c]] -= 1.0;
    }
    d_logits_l /= b as f64;

    let log_p_s = log_softmax_rows(logits_s);
    let p_s = softmax_rows(logits_s);
    let mut l_u = 0.0;
    let mut d_logits_s = Array2::zeros(logits_s.dim());
    for (i, (target, &keep)) in bundle.p_hat.iter().zip(&bundle.mask).enumerate() {
        if !keep {
            continue;
        }
        let t = target.probs();
        l_u -= t.iter().zip(log_p_s.row(i)).map(|(a, b)| a * b).sum::<f64>();
        let mass: f64 = t.iter().sum();
        for (j, d) in d_logits_s.row_mut(i).iter_mut().enumerate() {
            *d = config.lambda_u * (mass * p_s[[i, j]] - t[j]) / n_u as f64;
        }
    }
    l_u /= n_u as f64;

    let (l_in_sum, mut d_z_s) = match instance {
        InstanceTarget::Matching { reference, targets } => {
            if targets.len() != n_u || targets.iter().any(|q| q.len() != reference.nrows()) {
                return Err(Error::input("instance targets do not match the reference set"));
            }
            instance_term(z_s, reference, |i, j| targets[i].probs()[j], config.temperature)?
        }
        InstanceTarget::InfoNce { reference } => {
            if reference.nrows() != n_u {
                return Err(Error::input("InfoNCE reference must hold one row per unlabeled sample"));
            }
            instance_term(z_s, reference, |i, j| if i == j { 1.0 } else { 0.0 }, config.temperature)?
        }
    };
    let l_in = l_in_sum / n_u as f64;
    d_z_s *= config.lambda_in / n_u as f64;

    let l_overall = l_s + config.lambda_u * l_u + config.lambda_in * l_in;
    Ok((
        LossBreakdown {
            l_s,
            l_u,
            l_in,
            l_overall,
        },
        OutputGrads {
            d_logits_l,
            d_logits_s,
            d_z_s,
        },
    ))
}

/// Student inputs for one step.
#[derive(Debug, Clone, Copy)]
pub struct StudentBatch<'a> {
    /// Weakly augmented labeled inputs.
    pub labeled: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
    /// Strongly augmented unlabeled inputs.
    pub strong: ArrayView2<'a, f64>,
    /// Forward mode of the labeled and strong passes.
    pub modes: (ForwardMode, ForwardMode),
}

/// Overall loss and its gradient with respect to `params`. Pseudo-labels and
/// the instance reference are constants here, so no gradient reaches the
/// teacher path.
pub fn student_objective(
    network: &Network,
    params: &[f64],
    batch: StudentBatch<'_>,
    bundle: &PseudoLabelBundle,
    instance: InstanceTarget<'_>,
    config: &TrainConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let fwd_l = network.forward(params, batch.labeled, batch.modes.0)?;
    let fwd_s = network.forward(params, batch.strong, batch.modes.1)?;
    let (losses, g) = loss_and_output_grads(
        &fwd_l.logits,
        batch.labels,
        &fwd_s.logits,
        &fwd_s.z,
        bundle,
        instance,
        config,
    )?;
    let mut grads = vec![0.0; params.len()];
    let zero_z = Array2::zeros(fwd_l.z.raw_dim());
    network.backward(params, &fwd_l, g.d_logits_l.view(), zero_z.view(), &mut grads)?;
    if config.lambda_u != 0.0 || config.lambda_in != 0.0 {
        network.backward(params, &fwd_s, g.d_logits_s.view(), g.d_z_s.view(), &mut grads)?;
    }
    Ok((losses, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propagation::SemanticDistribution;
    use ndarray::array;

    fn bundle(p_hat: Vec<Vec<f64>>, q_hat: Vec<Vec<f64>>, mask: Vec<bool>) -> PseudoLabelBundle {
        let p: Vec<SemanticDistribution> = p_hat.into_iter().map(|v| SemanticDistribution::new(v).unwrap()).collect();
        let q: Vec<InstanceDistribution> = q_hat.into_iter().map(|v| InstanceDistribution::new(v).unwrap()).collect();
        PseudoLabelBundle {
            p_weak: p.clone(),
            q_weak: q.clone(),
            p_hat: p,
            q_hat: q,
            mask,
            degenerate: 0,
        }
    }

    #[allow(clippy::type_complexity)]
    fn setup() -> (Array2<f64>, Vec<usize>, Array2<f64>, Array2<f64>, PseudoLabelBundle, Array2<f64>) {
        let logits_l = array![[0.3, -0.2], [1.0, 0.4]];
        let logits_s = array![[0.5, -0.5], [-0.1, 0.7]];
        let z_s = array![[0.2, -0.4, 0.9], [1.1, 0.3, -0.2]];
        let reference = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let b = bundle(
            vec![vec![0.97, 0.03], vec![0.4, 0.6]],
            vec![vec![0.5, 0.3, 0.2], vec![0.1, 0.1, 0.8]],
            vec![true, false],
        );
        (logits_l, vec![0, 1], logits_s, z_s, b, reference)
    }

    fn eval(
        logits_l: &Array2<f64>,
        labels: &[usize],
        logits_s: &Array2<f64>,
        z_s: &Array2<f64>,
        b: &PseudoLabelBundle,
        reference: &Array2<f64>,
        config: &TrainConfig,
    ) -> (LossBreakdown, OutputGrads) {
        let target = InstanceTarget::Matching {
            reference: reference.view(),
            targets: &b.q_hat,
        };
        loss_and_output_grads(logits_l, labels, logits_s, z_s, b, target, config).unwrap()
    }

    #[test]
    fn overall_is_weighted_sum() {
        let (ll, y, ls, zs, b, r) = setup();
        let config = TrainConfig {
            lambda_u: 2.0,
            lambda_in: 0.5,
            ..TrainConfig::toy()
        };
        let (loss, _) = eval(&ll, &y, &ls, &zs, &b, &r, &config);
        assert!((loss.l_overall - (loss.l_s + 2.0 * loss.l_u + 0.5 * loss.l_in)).abs() < 1e-12);
    }

    #[test]
    fn output_gradients_match_finite_differences() {
        let (ll, y, ls, zs, b, r) = setup();
        let config = TrainConfig::toy();
        let (_, g) = eval(&ll, &y, &ls, &zs, &b, &r, &config);
        let h = 1e-6;
        let f = |ll: &Array2<f64>, ls: &Array2<f64>, zs: &Array2<f64>| eval(ll, &y, ls, zs, &b, &r, &config).0.l_overall;
        for (arr, grad) in [(0, &g.d_logits_l), (1, &g.d_logits_s), (2, &g.d_z_s)] {
            for idx in ndarray::indices(grad.dim()) {
                let mut plus = [ll.clone(), ls.clone(), zs.clone()];
                let mut minus = plus.clone();
                plus[arr][idx] += h;
                minus[arr][idx] -= h;
                let numeric = (f(&plus[0], &plus[1], &plus[2]) - f(&minus[0], &minus[1], &minus[2])) / (2.0 * h);
                assert!((numeric - grad[idx]).abs() < 1e-7, "{arr} {idx:?}: {numeric} vs {}", grad[idx]);
            }
        }
    }

    #[test]
    fn masked_samples_contribute_nothing_to_l_u() {
        let (ll, y, ls, zs, mut b, r) = setup();
        let config = TrainConfig::toy();
        let before = eval(&ll, &y, &ls, &zs, &b, &r, &config).0.l_u;
        b.p_hat[1] = SemanticDistribution::new(vec![0.0, 1.0]).unwrap();
        let after = eval(&ll, &y, &ls, &zs, &b, &r, &config);
        assert_eq!(before, after.0.l_u);
        assert!(after.1.d_logits_s.row(1).iter().all(|&v| v == 0.0));
        b.mask = vec![false, false];
        assert_eq!(eval(&ll, &y, &ls, &zs, &b, &r, &config).0.l_u, 0.0);
    }

    #[test]
    fn info_nce_gradient_matches_finite_differences() {
        let (ll, y, ls, zs, b, _) = setup();
        let reference = normalize_rows(&array![[0.1, 0.9, 0.2], [0.7, -0.3, 0.1]]).0;
        let config = TrainConfig::toy();
        let f = |zs: &Array2<f64>| {
            loss_and_output_grads(&ll, &y, &ls, zs, &b, InstanceTarget::InfoNce { reference: reference.view() }, &config)
                .unwrap()
        };
        let g = f(&zs).1.d_z_s;
        let h = 1e-6;
        for idx in ndarray::indices(zs.dim()) {
            let (mut p, mut m) = (zs.clone(), zs.clone());
            p[idx] += h;
            m[idx] -= h;
            let numeric = (f(&p).0.l_overall - f(&m).0.l_overall) / (2.0 * h);
            assert!((numeric - g[idx]).abs() < 1e-7);
        }
    }
}
