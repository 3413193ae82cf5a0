//! Acceptance suite. Each test writes one `criterion N: PASS|FAIL` line to
//! stderr (uncaptured) and then asserts.
//!
//! Run with `cargo test -p simmatch --release --test acceptance`.
//! The optional CIFAR-10 run needs `SIMMATCH_CIFAR_DIR` and `--ignored`.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::{array, Array2};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rayon::prelude::*;
use simmatch::augment::{augment_batch, Strength};
use simmatch::data::{load_cifar10, make_blobs, make_split, Benchmark, BlobsConfig, SplitSpec};
use simmatch::memory::{ema_update, LabeledMemoryBuffer};
use simmatch::model::{log_softmax_rows, BackboneSpec, ForwardMode, Network};
use simmatch::propagation::*;
use simmatch::rng::{derive_seed, Stream};
use simmatch::train::{
    run, student_objective, InstanceTarget, PseudoLabelBundle, RunOptions, StudentBatch, TrainConfig, Trainer,
};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn report(criterion: u32, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    writeln!(err, "criterion {criterion}: {status} {detail}").unwrap();
}

// ---------------------------------------------------------------------------
// scalar oracles, written without the library

fn oracle_softmax(x: &[f64], t: f64) -> Vec<f64> {
    let mut m = x[0];
    for &v in x {
        if v > m {
            m = v;
        }
    }
    let mut e = Vec::new();
    let mut s = 0.0;
    for &v in x {
        let w = ((v - m) / t).exp();
        e.push(w);
        s += w;
    }
    e.into_iter().map(|w| w / s).collect()
}

fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn oracle_normalize(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

fn oracle_entropy(v: &[f64]) -> f64 {
    let mut h = 0.0;
    for &x in v {
        if x > 0.0 {
            h -= x * x.ln();
        }
    }
    h
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn sd(v: &[f64]) -> SemanticDistribution {
    SemanticDistribution::new(v.to_vec()).unwrap()
}

fn idist(v: &[f64]) -> InstanceDistribution {
    InstanceDistribution::new(v.to_vec()).unwrap()
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_1_kernel_oracles() {
    let start = Instant::now();
    let tol = 1e-9;
    let mut failures = Vec::new();
    let mut extra = Vec::new();
    let mut check = |name: &str, got: &[f64], oracle: &[f64], stated: &[f64], stated_tol: f64| {
        let d = max_diff(got, oracle);
        let s = max_diff(oracle, stated);
        if d > tol || s > stated_tol {
            failures.push(format!("{name}: |lib-oracle|={d:e}, |oracle-stated|={s:e}"));
        }
    };

    let got = semantic_similarity(&[3f64.ln(), 0.0]).unwrap();
    check("softmax [ln3,0]", got.probs(), &oracle_softmax(&[3f64.ln(), 0.0], 1.0), &[0.75, 0.25], 1e-12);

    let rows = [1.0, 0.0, 0.0, 1.0];
    for (t, stated) in [(1.0, [0.73106, 0.26894]), (0.1, [0.9999546, 0.0000454])] {
        let got = instance_similarity(&[1.0, 0.0], &rows, t).unwrap();
        let sims = [oracle_cos(&[1.0, 0.0], &rows[..2]), oracle_cos(&[1.0, 0.0], &rows[2..])];
        check(&format!("instance t={t}"), got.probs(), &oracle_softmax(&sims, t), &stated, 1e-5);
    }

    let labels = [0usize, 0, 1];
    let p = [0.8, 0.2];
    let got = unfold(&sd(&p), &labels).unwrap();
    let oracle: Vec<f64> = labels.iter().map(|&c| p[c]).collect();
    check("unfold", got.values(), &oracle, &[0.8, 0.8, 0.2], 1e-12);

    let q = [0.5, 0.3, 0.2];
    let got = scale_calibrate(&idist(&q), &unfold(&sd(&p), &labels).unwrap()).unwrap();
    let prod: Vec<f64> = (0..3).map(|j| q[j] * oracle[j]).collect();
    check("scale", got.probs(), &oracle_normalize(&prod), &[0.58824, 0.35294, 0.05882], 1e-5);

    let got = aggregate(&idist(&q), &labels, 2).unwrap();
    let mut agg = [0.0; 2];
    for j in 0..3 {
        agg[labels[j]] += q[j];
    }
    check("aggregate", got.probs(), &agg, &[0.8, 0.2], 1e-12);

    // uniform q over K entries with n_c per class gives n_c / K
    let buf_labels = [0usize, 1, 1, 2, 2, 2];
    let uniform = vec![1.0 / 6.0; 6];
    let got = aggregate(&idist(&uniform), &buf_labels, 3).unwrap();
    let mut counts = [0.0; 3];
    for &c in &buf_labels {
        counts[c] += 1.0;
    }
    let oracle_counts: Vec<f64> = counts.iter().map(|n| n / 6.0).collect();
    check("aggregate uniform", got.probs(), &oracle_counts, &[1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0], 1e-12);

    let q_agg = aggregate(&idist(&[0.6, 0.4]), &[0, 1], 2).unwrap();
    let got = smooth_calibrate(&sd(&p), &q_agg, 0.9).unwrap();
    let oracle: Vec<f64> = (0..2).map(|i| 0.9 * p[i] + 0.1 * [0.6, 0.4][i]).collect();
    check("smooth", got.probs(), &oracle, &[0.78, 0.22], 1e-12);

    let state = AlignmentState::from_window(2, 4, vec![vec![0.75, 0.25]]).unwrap();
    let got = state.align(&sd(&[0.6, 0.4])).unwrap();
    let oracle = oracle_normalize(&[0.6 / 0.75, 0.4 / 0.25]);
    check("align", got.probs(), &oracle, &[1.0 / 3.0, 2.0 / 3.0], 1e-12);

    for (target, pred) in [([0.5, 0.5], [0.5, 0.5]), ([1.0, 0.0], [0.5, 0.5])] {
        let got = soft_cross_entropy(&target, &pred).unwrap();
        let mut oracle = 0.0;
        for i in 0..2 {
            oracle -= target[i] * f64::max(pred[i], 1e-12).ln();
        }
        check("cross entropy", &[got], &[oracle], &[std::f64::consts::LN_2], 1e-12);
    }

    // agreement sharpens the instance target; disagreement gives a flatter
    // target than agreement does
    let mut sharpened = Vec::new();
    for p in [[0.8, 0.2], [0.2, 0.8]] {
        let qh = scale_calibrate(&idist(&q), &unfold(&sd(&p), &labels).unwrap()).unwrap();
        let oracle_qh = oracle_normalize(&(0..3).map(|j| q[j] * p[labels[j]]).collect::<Vec<_>>());
        check("calibrated target", qh.probs(), &oracle_qh, &oracle_qh, 0.0);
        if (qh.entropy() - oracle_entropy(&oracle_qh)).abs() > tol {
            extra.push(format!("entropy of q_hat for p={p:?}"));
        }
        sharpened.push(oracle_entropy(&oracle_qh));
    }
    let h_q = oracle_entropy(&q);
    if !(sharpened[0] < h_q && sharpened[1] > sharpened[0]) {
        extra.push(format!("sharpening: H(q)={h_q}, H(q_hat) agree={}, disagree={}", sharpened[0], sharpened[1]));
    }

    // temporal buffer update: m = 0.7, old [1,0], new [0,1]
    let mut buffer = LabeledMemoryBuffer::from_embeddings(vec![1.0, 0.0, 0.0, 1.0], 2, vec![0, 1], 2).unwrap();
    buffer.temporal_update(&[0], &[0.0, 1.0], 0.7).unwrap();
    let raw: [f64; 2] = [0.7 * 1.0 + 0.3 * 0.0, 0.7 * 0.0 + 0.3 * 1.0];
    let n = (raw[0] * raw[0] + raw[1] * raw[1]).sqrt();
    check("temporal update", buffer.row(0), &[raw[0] / n, raw[1] / n], &[0.91915, 0.39392], 1e-5);

    let mut teacher = [1.0];
    ema_update(&mut teacher, &[0.0], 0.999).unwrap();
    check("ema", &teacher, &[0.999 * 1.0 + 0.001 * 0.0], &[0.999], 1e-12);

    failures.extend(extra);
    let elapsed = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && elapsed < 10.0;
    report(1, pass, &format!("({elapsed:.2}s) {}", failures.join("; ")));
    assert!(pass, "{failures:?}");
}

// ---------------------------------------------------------------------------

fn simplex(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, len).prop_map(|v| oracle_normalize(&v))
}

/// `(L, labels)` with every class present.
fn buffer_labels() -> impl Strategy<Value = (usize, Vec<usize>)> {
    (2usize..6, 0usize..8).prop_flat_map(|(l, extra)| {
        prop::collection::vec(0..l, extra).prop_map(move |mut v| {
            v.extend(0..l);
            (l, v)
        })
    })
}

fn is_simplex(v: &[f64]) -> bool {
    v.iter().all(|&x| x >= 0.0 && x.is_finite()) && (v.iter().sum::<f64>() - 1.0).abs() < 1e-9
}

fn property<S: Strategy>(
    name: &str,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&strategy, test).map_err(|e| format!("{name}: {e}"))
}

#[test]
fn criterion_2_property_suite() {
    let start = Instant::now();
    let mut results = Vec::new();

    results.push(property(
        "simplex closure",
        buffer_labels().prop_flat_map(|(l, labels)| {
            let k = labels.len();
            (
                Just(labels),
                simplex(l),
                prop::collection::vec(-5.0f64..5.0, l),
                prop::collection::vec(-1.0f64..1.0, 3 * k),
                prop::collection::vec(0.1f64..1.0, 3),
                0.0f64..=1.0,
                0.05f64..2.0,
            )
        }),
        |(labels, p, logits, rows, z, alpha, t)| {
            let l = p.len();
            prop_assume!(rows.chunks(3).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
            let ps = semantic_similarity(&logits).unwrap();
            prop_assert!(is_simplex(ps.probs()));
            let q = instance_similarity(&z, &rows, t).unwrap();
            prop_assert!(is_simplex(q.probs()));
            let p = sd(&p);
            let qh = scale_calibrate(&q, &unfold(&p, &labels).unwrap()).unwrap();
            prop_assert!(is_simplex(qh.probs()));
            let agg = aggregate(&q, &labels, l).unwrap();
            prop_assert!(is_simplex(agg.probs()));
            prop_assert!(is_simplex(smooth_calibrate(&p, &agg, alpha).unwrap().probs()));
            let state = AlignmentState::from_window(l, 4, vec![ps.probs().to_vec()]).unwrap();
            prop_assert!(is_simplex(state.align(&p).unwrap().probs()));
            Ok(())
        },
    ));

    results.push(property(
        "unfold/aggregate counting",
        buffer_labels().prop_flat_map(|(l, labels)| (Just(labels), simplex(l))),
        |(labels, p)| {
            let l = p.len();
            let unfolded = unfold(&sd(&p), &labels).unwrap();
            let summed = aggregate_weights(unfolded.values(), &labels, l).unwrap();
            for c in 0..l {
                let n_c = labels.iter().filter(|&&x| x == c).count() as f64;
                prop_assert!((summed[c] - n_c * p[c]).abs() < 1e-12);
            }
            let k = labels.len();
            let uniform = aggregate(&InstanceDistribution::uniform(k), &labels, l).unwrap();
            for c in 0..l {
                let n_c = labels.iter().filter(|&&x| x == c).count() as f64;
                prop_assert!((uniform.probs()[c] - n_c / k as f64).abs() < 1e-12);
            }
            Ok(())
        },
    ));

    results.push(property(
        "composition identity",
        buffer_labels().prop_flat_map(|(l, labels)| {
            let k = labels.len();
            (Just(labels), simplex(l), simplex(k))
        }),
        |(labels, p, q)| {
            let l = p.len();
            let (p, q) = (sd(&p), idist(&q));
            let lhs = aggregate(&scale_calibrate(&q, &unfold(&p, &labels).unwrap()).unwrap(), &labels, l).unwrap();
            let q_agg = aggregate(&q, &labels, l).unwrap();
            let rhs = oracle_normalize(&(0..l).map(|c| q_agg.probs()[c] * p.probs()[c]).collect::<Vec<_>>());
            prop_assert!(max_diff(lhs.probs(), &rhs) < 1e-12);
            Ok(())
        },
    ));

    results.push(property(
        "rescaling invariance",
        buffer_labels().prop_flat_map(|(l, labels)| {
            let k = labels.len();
            (Just(labels), simplex(l), simplex(k), 1e-3f64..1e3)
        }),
        |(labels, p, q, c)| {
            let u = unfold(&sd(&p), &labels).unwrap();
            let a = scale_calibrate(&idist(&q), &u).unwrap();
            let b = scale_calibrate(&idist(&q), &u.scaled(c)).unwrap();
            prop_assert!(max_diff(a.probs(), b.probs()) < 1e-12);
            Ok(())
        },
    ));

    results.push(property(
        "temperature-entropy monotonicity",
        (
            2usize..8,
            prop::collection::vec(-1.0f64..1.0, 3),
            prop::collection::vec(-1.0f64..1.0, 24),
            0.02f64..2.0,
            1.01f64..5.0,
        ),
        |(k, z, rows, t, factor)| {
            let rows = &rows[..3 * k];
            prop_assume!(z.iter().map(|v| v * v).sum::<f64>() > 1e-6);
            prop_assume!(rows.chunks(3).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
            let cold = instance_similarity(&z, rows, t).unwrap().entropy();
            let hot = instance_similarity(&z, rows, t * factor).unwrap().entropy();
            prop_assert!(cold <= hot + 1e-12, "H(t)={cold} > H({})={hot}", t * factor);
            Ok(())
        },
    ));

    results.push(property(
        "alignment with uniform average",
        (2usize..10).prop_flat_map(|l| (simplex(l), 1usize..5)),
        |(p, n)| {
            let l = p.len();
            let window = vec![vec![1.0 / l as f64; l]; n];
            let state = AlignmentState::from_window(l, 8, window).unwrap();
            prop_assert!(max_diff(state.align(&sd(&p)).unwrap().probs(), &p) < 1e-12);
            prop_assert!(max_diff(AlignmentState::new(l, 8).unwrap().align(&sd(&p)).unwrap().probs(), &p) < 1e-12);
            Ok(())
        },
    ));

    results.push(property(
        "EMA geometric convergence",
        (
            prop::collection::vec(-10.0f64..10.0, 1..6),
            prop::collection::vec(-10.0f64..10.0, 6),
            0.0f64..1.0,
            1usize..40,
        ),
        |(teacher0, student, m, steps)| {
            let student = &student[..teacher0.len()];
            let mut teacher = teacher0.clone();
            for _ in 0..steps {
                ema_update(&mut teacher, student, m).unwrap();
            }
            for i in 0..teacher.len() {
                let expected = student[i] + m.powi(steps as i32) * (teacher0[i] - student[i]);
                prop_assert!((teacher[i] - expected).abs() < 1e-9 * (1.0 + teacher0[i].abs() + student[i].abs()));
            }
            Ok(())
        },
    ));

    let failures: Vec<String> = results.into_iter().filter_map(Result::err).collect();
    let elapsed = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && elapsed < 60.0;
    report(2, pass, &format!("(7 properties x 1000 cases, {elapsed:.2}s) {}", failures.join("; ")));
    assert!(pass, "{failures:?}");
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_3_gradient_check() {
    let start = Instant::now();
    let spec = BackboneSpec::mlp(3, vec![6], 4, 2).unwrap();
    let net = Network::new(spec).unwrap();
    let config = TrainConfig {
        lambda_u: 1.0,
        lambda_in: 1.0,
        temperature: 0.1,
        ..TrainConfig::toy()
    };
    let buffer = LabeledMemoryBuffer::from_embeddings(
        vec![
            0.9, 0.1, -0.3, 0.2, //
            0.4, 0.8, 0.1, -0.2, //
            -0.5, 0.2, 0.7, 0.3, //
            0.1, -0.6, 0.2, 0.9,
        ],
        4,
        vec![0, 0, 1, 1],
        2,
    )
    .unwrap();
    let p_hat = vec![sd(&[0.97, 0.03]), sd(&[0.6, 0.4])];
    let q_hat = vec![idist(&[0.5, 0.3, 0.15, 0.05]), idist(&[0.1, 0.2, 0.3, 0.4])];
    let bundle = PseudoLabelBundle {
        p_weak: p_hat.clone(),
        q_weak: q_hat.clone(),
        p_hat,
        q_hat,
        mask: vec![true, false],
        degenerate: 0,
    };
    let labeled = array![[0.3, -1.2, 0.8], [1.1, 0.4, -0.6]];
    let strong = array![[-0.7, 0.9, 0.2], [0.5, 0.5, 1.3]];
    let labels = [0usize, 1];
    let objective = |theta: &[f64]| {
        student_objective(
            &net,
            theta,
            StudentBatch {
                labeled: labeled.view(),
                labels: &labels,
                strong: strong.view(),
                modes: (ForwardMode::Eval, ForwardMode::Eval),
            },
            &bundle,
            InstanceTarget::Matching {
                reference: buffer.features_view(),
                targets: &bundle.q_hat,
            },
            &config,
        )
    };
    // tiny ReLU heads can initialise with a dead projection; take the first
    // seed whose embeddings are all non-zero
    let params = (0..100)
        .map(|seed| net.init_params(seed))
        .find(|theta| objective(theta).is_ok())
        .expect("no usable initialisation");
    let objective = |theta: &[f64]| objective(theta).unwrap();
    let (losses, analytic) = objective(&params);
    let all_terms_active = losses.l_s > 0.0 && losses.l_u > 0.0 && losses.l_in > 0.0;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let mut plus = params.clone();
        let mut minus = params.clone();
        plus[i] += h;
        minus[i] -= h;
        let numeric = (objective(&plus).0.l_overall - objective(&minus).0.l_overall) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && all_terms_active && elapsed < 30.0;
    report(
        3,
        pass,
        &format!(
            "(max relative error {worst:.2e} over {} parameters, L_s={:.4} L_u={:.4} L_in={:.4}, {elapsed:.2}s)",
            params.len(),
            losses.l_s,
            losses.l_u,
            losses.l_in
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// toy benchmark runs shared by criteria 4-6

#[derive(Debug, Clone)]
struct ToyResult {
    accuracy: f64,
    pseudo_label_accuracy: Option<f64>,
    unlabeled_accuracy: Option<f64>,
}

fn toy_run(config: TrainConfig) -> ToyResult {
    let bench = make_blobs(&BlobsConfig::toy(config.seed)).unwrap();
    let out = run(&config, &bench, RunOptions::default()).unwrap();
    let eval = out.final_eval().unwrap();
    ToyResult {
        accuracy: eval.ema_accuracy,
        pseudo_label_accuracy: eval.pseudo_label_accuracy,
        unlabeled_accuracy: eval.unlabeled_accuracy,
    }
}

fn toy_runs(variant: impl Fn(TrainConfig) -> TrainConfig + Sync) -> Vec<ToyResult> {
    SEEDS
        .par_iter()
        .map(|&seed| toy_run(variant(TrainConfig { seed, ..TrainConfig::toy() })))
        .collect()
}

fn standard_runs() -> &'static (Vec<ToyResult>, f64) {
    static RUNS: OnceLock<(Vec<ToyResult>, f64)> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let runs = toy_runs(|c| c);
        (runs, start.elapsed().as_secs_f64())
    })
}

fn mean(runs: &[ToyResult]) -> f64 {
    runs.iter().map(|r| r.accuracy).sum::<f64>() / runs.len() as f64
}

fn per_seed(runs: &[ToyResult]) -> String {
    runs.iter().map(|r| format!("{:.3}", r.accuracy)).collect::<Vec<_>>().join(",")
}

#[test]
fn criterion_4_toy_benchmark() {
    let (standard, standard_secs) = standard_runs();
    let start = Instant::now();
    let baseline = toy_runs(|c| c.supervised_only());
    let elapsed = standard_secs + start.elapsed().as_secs_f64();
    let gain = mean(standard) - mean(&baseline);
    let pass = gain >= 0.10 && elapsed < 600.0;
    report(
        4,
        pass,
        &format!(
            "(SimMatch {:.4} [{}] vs labeled-only {:.4} [{}]: {:+.1} pp, {elapsed:.1}s)",
            mean(standard),
            per_seed(standard),
            mean(&baseline),
            per_seed(&baseline),
            100.0 * gain
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_ablation_directionality() {
    let (standard, standard_secs) = standard_runs();
    let start = Instant::now();
    let without_q_hat = toy_runs(|c| TrainConfig {
        q_calibration: simmatch::train::InstanceCalibration::Off,
        ..c
    });
    let alpha_one = toy_runs(|c| TrainConfig { alpha: 1.0, ..c });
    let elapsed = standard_secs + start.elapsed().as_secs_f64();
    let margin_q = mean(standard) - mean(&without_q_hat);
    let margin_alpha = mean(standard) - mean(&alpha_one);
    let pass_a = margin_q > 0.0;
    let pass_b = margin_alpha > 0.0;
    let pass = pass_a && pass_b && elapsed < 1800.0;
    report(
        5,
        pass,
        &format!(
            "((a) w/o q_hat {:.4} [{}] vs standard {:.4}: margin {:+.1} pp {}; (b) alpha=1.0 {:.4} [{}] vs alpha=0.9: margin {:+.1} pp {}; {elapsed:.1}s)",
            mean(&without_q_hat),
            per_seed(&without_q_hat),
            mean(standard),
            100.0 * margin_q,
            if pass_a { "ok" } else { "FAILED" },
            mean(&alpha_one),
            per_seed(&alpha_one),
            100.0 * margin_alpha,
            if pass_b { "ok" } else { "FAILED" },
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_diagnostics_contract() {
    let (standard, _) = standard_runs();
    let mut lines = Vec::new();
    let mut pass = true;
    for (seed, r) in SEEDS.iter().zip(standard) {
        let (pl, ul) = (r.pseudo_label_accuracy, r.unlabeled_accuracy.unwrap());
        let ok = pl.is_some_and(|pl| pl >= ul);
        pass &= ok;
        lines.push(format!("seed {seed}: {pl:.3?} >= {ul:.3}"));
    }
    report(6, pass, &format!("({})", lines.join(", ")));
    assert!(pass);
}

// ---------------------------------------------------------------------------

/// Labeled-only training written directly against the network: weak
/// augmentation, cross entropy, Nesterov SGD with weight decay, cosine lr.
fn plain_supervised_losses(config: &TrainConfig, bench: &Benchmark, steps: u64) -> (Vec<f64>, Vec<f64>) {
    let net = Network::new(config.backbone_spec(bench.train.modality, bench.train.num_classes).unwrap()).unwrap();
    let policy = config.augment_policy(bench.train.modality).unwrap();
    let mut theta = net.init_params(config.seed);
    let mut velocity = vec![0.0; theta.len()];
    let mut sampler = simmatch::data::BatchSampler::new(
        bench.split.num_labeled(),
        bench.split.unlabeled.len(),
        config.batch_size,
        config.mu,
        config.seed,
    )
    .unwrap();
    let mut losses = Vec::new();
    for step in 0..steps {
        let batch = sampler.batch(step);
        let rows: Vec<usize> = batch.labeled.iter().map(|&j| bench.split.labeled[j].index).collect();
        let labels: Vec<usize> = batch.labeled.iter().map(|&j| bench.split.labeled[j].class).collect();
        let x = augment_batch(
            bench.train.gather(&rows).view(),
            &policy,
            Strength::Weak,
            Stream::LabeledAugment,
            config.seed,
            step,
        )
        .unwrap();
        let mode = ForwardMode::Train {
            seed: derive_seed(config.seed, Stream::Dropout, step, 0),
        };
        let fwd = net.forward(&theta, x.view(), mode).unwrap();
        let log_p = log_softmax_rows(&fwd.logits);
        let b = labels.len() as f64;
        let loss = -labels.iter().enumerate().map(|(i, &c)| log_p[[i, c]]).sum::<f64>() / b;
        let mut d_logits = log_p.mapv(f64::exp);
        for (i, &c) in labels.iter().enumerate() {
            d_logits[[i, c]] -= 1.0;
        }
        d_logits /= b;
        let mut grads = vec![0.0; theta.len()];
        let d_z = Array2::zeros(fwd.z.raw_dim());
        net.backward(&theta, &fwd, d_logits.view(), d_z.view(), &mut grads).unwrap();
        let lr = config.lr * (7.0 * std::f64::consts::PI * step as f64 / (16.0 * config.steps as f64)).cos();
        let mu = config.sgd_momentum;
        for i in 0..theta.len() {
            let g = grads[i] + config.weight_decay * theta[i];
            velocity[i] = mu * velocity[i] + g;
            theta[i] -= lr * (g + mu * velocity[i]);
        }
        losses.push(loss);
    }
    (losses, theta)
}

#[test]
fn criterion_7_reduction_check() {
    let config = TrainConfig {
        seed: 7,
        ..TrainConfig::toy().supervised_only()
    };
    let bench = make_blobs(&BlobsConfig::toy(config.seed)).unwrap();
    let trainer = Trainer::new(config.clone(), &bench).unwrap();
    let mut state = trainer.init_state().unwrap();
    let mut sampler = trainer.sampler().unwrap();
    let mut losses = Vec::new();
    for step in 0..50 {
        let r = trainer.train_step(&mut state, &sampler.batch(step)).unwrap();
        assert!((r.l_overall - r.l_s).abs() == 0.0);
        losses.push(r.l_overall);
    }
    let (plain, plain_theta) = plain_supervised_losses(&config, &bench, 50);
    let loss_diff = max_diff(&losses, &plain);
    let param_diff = max_diff(&state.student, &plain_theta);
    let pass = loss_diff <= 1e-10 && param_diff <= 1e-10;
    report(
        7,
        pass,
        &format!("(50 steps: max loss difference {loss_diff:.1e}, max parameter difference {param_diff:.1e})"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------

#[test]
#[ignore = "needs the CIFAR-10 binary release in SIMMATCH_CIFAR_DIR and hours of CPU time"]
fn criterion_8_cifar_extended_run() {
    let Ok(dir) = std::env::var("SIMMATCH_CIFAR_DIR") else {
        report(8, false, "(skipped: SIMMATCH_CIFAR_DIR not set; non-gating)");
        return;
    };
    let (train, test) = load_cifar10(std::path::Path::new(&dir)).unwrap();
    let config = TrainConfig {
        steps: 1 << 16,
        eval_every: 4096,
        ..TrainConfig::cifar()
    };
    let split = make_split(
        &train,
        &SplitSpec {
            n_per_class: 25,
            seed: config.seed,
            dataset_id: "cifar10".into(),
        },
    )
    .unwrap();
    let bench = Benchmark {
        name: "cifar10".into(),
        train,
        test,
        split,
    };
    let out = run(&config, &bench, RunOptions::default()).unwrap();
    let acc = out.final_eval().unwrap().ema_accuracy;
    report(8, acc >= 0.80, &format!("(non-gating; EMA test accuracy {acc:.4}, target 0.80)"));
}
