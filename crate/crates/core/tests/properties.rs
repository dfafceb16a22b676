use ffl_core::agents::{report_gradient, AgentStrategy};
use ffl_core::bounds::{amplified_weights, bound_corollary1, bound_prop1};
use ffl_core::datagen::{
    gen_gaussian_mixture, gen_label_skew, gen_synthetic_ridge, gen_two_agent_regression, GaussianMixtureSpec,
    LabelSkewSpec, SyntheticRidgeSpec, TwoAgentRegressionSpec,
};
use ffl_core::dp::{calibrate_noise, partition_clusters, run_dpffl, ClusterPartition, DpConfig, NoiseOverride};
use ffl_core::ffl::{run_fedavg, run_ffl, FflConfig};
use ffl_core::model::{ConstantsCertificate, DataPoint, LossModel, ModelVector, Scenario};
use ffl_core::oracle::{scalable_vcg_exact, vcg_payments_exact, vcg_payments_with, DEFAULT_TOL};
use proptest::prelude::*;

fn models() -> impl Strategy<Value = LossModel> {
    prop_oneof![
        (1usize..4, 0.01f64..1.0, any::<bool>()).prop_map(|(dx, reg, b)| LossModel::ridge(dx, reg, b)),
        (1usize..4, 0.01f64..1.0, any::<bool>()).prop_map(|(dx, reg, b)| LossModel::logistic(dx, reg, b)),
        (1usize..4, 2usize..5, 0.01f64..1.0).prop_map(|(dx, c, reg)| LossModel::softmax(dx, c, reg, true)),
    ]
}

/// A model with two weight vectors and one valid sample.
fn model_case() -> impl Strategy<Value = (LossModel, Vec<f64>, Vec<f64>, DataPoint)> {
    models().prop_flat_map(|m| {
        let d = m.dim();
        let dx = m.dx;
        let y = if m.is_classification() {
            (0..m.num_classes).prop_map(|c| c as f64).boxed()
        } else {
            (-3.0f64..3.0).boxed()
        };
        (
            Just(m),
            prop::collection::vec(-2.0f64..2.0, d),
            prop::collection::vec(-2.0f64..2.0, d),
            (prop::collection::vec(-1.5f64..1.5, dx), y).prop_map(|(x, y)| DataPoint::new(x, y)),
        )
    })
}

fn point_smoothness(m: &LossModel, pt: &DataPoint) -> f64 {
    m.reg + m.curvature_factor() * m.augmented_sq_norm(pt)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn per_sample_loss_is_strongly_convex_and_smooth((m, w1, w2, pt) in model_case()) {
        let l1 = m.loss(&w1, &pt).unwrap();
        let l2 = m.loss(&w2, &pt).unwrap();
        let g1 = m.grad(&w1, &pt).unwrap();
        let g2 = m.grad(&w2, &pt).unwrap();
        let diff: Vec<f64> = w2.iter().zip(&w1).map(|(a, b)| a - b).collect();
        let dist = ModelVector(diff.clone()).norm();
        let lower = l1 + g1.dot(&diff) + 0.5 * m.reg * dist * dist;
        prop_assert!(l2 >= lower - 1e-10 * (1.0 + l2.abs()), "{l2} < {lower}");
        let gdist = g1.distance(&g2);
        prop_assert!(gdist <= point_smoothness(&m, &pt) * dist * (1.0 + 1e-10) + 1e-12);
    }

    #[test]
    fn gradients_match_central_differences((m, w, _w2, pt) in model_case()) {
        let g = m.grad(&w, &pt).unwrap();
        let h = 1e-5;
        for i in 0..w.len() {
            let mut up = w.clone();
            let mut down = w.clone();
            up[i] += h;
            down[i] -= h;
            let fd = (m.loss(&up, &pt).unwrap() - m.loss(&down, &pt).unwrap()) / (2.0 * h);
            prop_assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1.0), "coordinate {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn amplified_weights_normalise_and_grow(p0 in 0.01f64..0.99, g1 in 0.1f64..10.0, g2 in 0.1f64..10.0) {
        let w = [p0, 1.0 - p0];
        let a = amplified_weights(&w, 0, g1);
        let b = amplified_weights(&w, 0, g2);
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        if g1 < g2 {
            prop_assert!(a[0] <= b[0]);
        }
        let one = amplified_weights(&w, 0, 1.0);
        prop_assert_eq!(one.to_vec(), w.to_vec());
    }

    #[test]
    fn amplified_reports_are_scaled_true_gradients(gamma in 0.01f64..20.0, g in prop::collection::vec(-5.0f64..5.0, 1..6)) {
        let t = ModelVector(g);
        let r = report_gradient(&AgentStrategy::Amplify { gamma }, 3, &vec![0.0; t.dim()], &t).unwrap();
        prop_assert_eq!(r, t.scaled(gamma));
    }

    #[test]
    fn partitions_cover_agents_once(k in 1usize..=1000, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let l = 1 + ((k - 1) as f64 * frac) as usize;
        let p = partition_clusters(k, l, seed).unwrap();
        p.validate(k).unwrap();
        prop_assert_eq!(p.clusters.len(), l);
        prop_assert!(p.is_balanced());
        let mut all: Vec<usize> = p.clusters.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..k).collect::<Vec<_>>());
        prop_assert_eq!(partition_clusters(k, l, seed).unwrap(), p);
    }

    #[test]
    fn zcdp_budget_composes(
        l_f in 0.1f64..10.0, k in 1usize..100, n in 1usize..5000, t1 in 0usize..300, t2 in 1usize..50,
        alpha in 0.01f64..5.0, beta in 1e-8f64..0.5,
    ) {
        let c = calibrate_noise(l_f, k, n, t1, t2, alpha, beta).unwrap();
        let lb = (1.0 / beta).ln();
        let target = alpha * alpha / (4.0 * lb);
        let total = c.gradient_releases as f64 * c.rho_gradient_step + c.payment_releases as f64 * c.rho_payment;
        prop_assert!((total - target).abs() <= 1e-9 * target);
        prop_assert!((2.0 * (c.rho * lb).sqrt() - alpha).abs() <= 1e-9 * alpha);
        // The conversion spends alpha in the square-root term, so the converted
        // epsilon exceeds alpha by exactly rho.
        prop_assert!((c.alpha_converted - alpha - c.rho).abs() <= 1e-9 * alpha.max(c.rho));
    }

    #[test]
    fn local_bound_decreases_in_sample_count(n in 1usize..10_000, extra in 1usize..1000, l_ell in 0.1f64..5.0) {
        let c = ConstantsCertificate::new(0.1, 2.0, l_ell, 1.0).unwrap();
        let a = bound_corollary1(&c, n, 3, 0.01).unwrap();
        let b = bound_corollary1(&c, n + extra, 3, 0.01).unwrap();
        prop_assert!(a >= 0.0 && b >= 0.0 && b < a);
        let w = [0.3, 0.7];
        let a = bound_prop1(&c, &w, &[n, 50], 3, 0.01).unwrap();
        let b = bound_prop1(&c, &w, &[n + extra, 50], 3, 0.01).unwrap();
        prop_assert!(b < a);
    }
}

fn ridge(k: usize, seed: u64) -> Scenario {
    let mut spec = SyntheticRidgeSpec::new(k, seed);
    spec.samples = (10, 30);
    gen_synthetic_ridge(&spec).unwrap()
}

fn faithful(s: &Scenario) -> Vec<AgentStrategy> {
    vec![AgentStrategy::Faithful; s.num_agents()]
}

fn ffl_cfg(s: &Scenario) -> FflConfig {
    let l_g = s.smoothness();
    FflConfig::new(1.0 / l_g, 1.0 / (s.num_agents() as f64 * l_g), 300, 10, 1e-3, f64::INFINITY)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generators_are_deterministic(k in 1usize..6, seed in any::<u64>()) {
        let a = serde_json::to_string(&ridge(k, seed)).unwrap();
        let b = serde_json::to_string(&ridge(k, seed)).unwrap();
        prop_assert_eq!(a, b);
        let spec = TwoAgentRegressionSpec::new(7, 9, 0.5, seed);
        let a = serde_json::to_string(&gen_two_agent_regression(&spec).unwrap()).unwrap();
        let b = serde_json::to_string(&gen_two_agent_regression(&spec).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn label_skew_preserves_samples(k in 2usize..12, delta in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut m = GaussianMixtureSpec::new(300, 10, seed);
        m.dx = 3;
        m.num_classes = 4;
        let (train, _) = gen_gaussian_mixture(&m).unwrap();
        let s = gen_label_skew(&LabelSkewSpec::new(k, delta, seed), &train).unwrap();
        prop_assert_eq!(s.total_samples(), train.points.len());
        let mut counts = vec![0usize; 4];
        for ds in &s.datasets {
            for p in &ds.points {
                counts[p.y as usize] += 1;
            }
        }
        prop_assert_eq!(counts, train.label_counts());
    }

    #[test]
    fn ffl_payments_are_nonnegative_and_runs_repeat(k in 1usize..7, seed in any::<u64>()) {
        let s = ridge(k, seed);
        let cfg = ffl_cfg(&s);
        let a = run_ffl(&s, &faithful(&s), &cfg).unwrap();
        prop_assert!(a.payments.iter().all(|p| *p >= 0.0));
        prop_assert!(a.budget_balanced());
        let b = run_ffl(&s, &faithful(&s), &cfg).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn phase1_descent_is_monotone(k in 1usize..7, seed in any::<u64>()) {
        let s = ridge(k, seed);
        let run = run_fedavg(&s, &faithful(&s), &ffl_cfg(&s)).unwrap();
        for w in run.phase1.records.windows(2) {
            prop_assert!(w[1].loss <= w[0].loss + 1e-12 * w[0].loss.abs());
        }
    }

    #[test]
    fn unit_amplification_matches_faithful(k in 1usize..5, seed in any::<u64>()) {
        let s = ridge(k, seed);
        let cfg = ffl_cfg(&s);
        let a = run_ffl(&s, &faithful(&s), &cfg).unwrap();
        let st = vec![AgentStrategy::Amplify { gamma: 1.0 }; k];
        let b = run_ffl(&s, &st, &cfg).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn vcg_is_budget_balanced_and_matches_singleton_clusters(k in 2usize..7, seed in any::<u64>()) {
        let s = ridge(k, seed);
        let v = vcg_payments_exact(&s).unwrap();
        prop_assert!(v.payments.iter().sum::<f64>() >= 0.0);
        let p = scalable_vcg_exact(&s, &ClusterPartition::singletons(k)).unwrap();
        for (a, b) in p.payments.iter().zip(&v.payments) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn noise_free_dp_payments_are_direct(k in 2usize..7, seed in any::<u64>()) {
        let s = ridge(k, seed);
        let l_g = s.smoothness();
        let mut cfg = DpConfig::new(1.0, 0.01, k, 1.0 / l_g, 1.0 / ((k - 1) as f64 * l_g), 50, 20, 0.1, seed, f64::INFINITY);
        cfg.noise_override = Some(NoiseOverride { sigma_sq: 0.0, sigma_p_sq: 0.0 });
        let run = run_dpffl(&s, &faithful(&s), &cfg).unwrap();
        let part = run.partition.clone().unwrap();
        for (l, tr) in run.phase2.iter().enumerate() {
            for &kk in &part.clusters[l] {
                let mut direct = 0.0;
                for j in (0..k).filter(|&j| j != kk) {
                    direct += s.weights[j] / s.weights[kk]
                        * (s.local_risk(j, &run.w_star).unwrap() - s.local_risk(j, &tr.final_model).unwrap());
                }
                prop_assert_eq!(run.payments[kk], direct);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn classification_oracle_is_start_independent(seed in any::<u64>(), shift in -1.0f64..1.0) {
        let mut m = GaussianMixtureSpec::new(200, 10, seed);
        m.dx = 3;
        m.num_classes = 3;
        let (train, _) = gen_gaussian_mixture(&m).unwrap();
        let s = gen_label_skew(&LabelSkewSpec::new(3, 0.5, seed), &train).unwrap();
        let a = vcg_payments_exact(&s).unwrap();
        let start = vec![shift; s.dim()];
        let b = vcg_payments_with(&s, Some(&start), DEFAULT_TOL).unwrap();
        for (x, y) in a.payments.iter().zip(&b.payments) {
            prop_assert!((x - y).abs() < 1e-8);
        }
        prop_assert!(a.payments.iter().sum::<f64>() >= 0.0);
    }
}

#[test]
fn distant_agent_prefers_large_amplification() {
    for seed in 0..10 {
        let s = gen_two_agent_regression(&TwoAgentRegressionSpec::new(50, 400, 2.0, seed)).unwrap();
        let l_g = s.smoothness();
        let cfg = FflConfig::new(0.5 / l_g, 0.5 / l_g, 1500, 1, 0.1, f64::INFINITY);
        let risk = |gamma: f64| {
            let st = vec![AgentStrategy::Amplify { gamma }, AgentStrategy::Faithful];
            let r = run_fedavg(&s, &st, &cfg).unwrap();
            s.local_risk(0, &r.w_star).unwrap()
        };
        assert!(risk(8.0) < risk(1.0), "seed {seed}");
    }
}

#[test]
fn ffl_optimal_amplification_is_near_one() {
    let grid: Vec<f64> = (1..=16).map(|i| i as f64 * 0.25).collect();
    for mean in [0.1, 2.0] {
        let (ffl, _) = ffl_core::verify::two_agent_overall_losses(mean, 5, &grid).unwrap();
        let best = (0..grid.len()).min_by(|&a, &b| ffl[a].total_cmp(&ffl[b])).unwrap();
        assert!((grid[best] - 1.0).abs() <= 0.25 + 1e-12, "mean {mean}: best gamma {}", grid[best]);
    }
}
