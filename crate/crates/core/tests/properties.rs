//! Property tests for the module invariants.

mod common;

use proptest::prelude::*;

use dppeft::accountant::{
    default_orders, effective_sigma, rdp_gaussian, rdp_subsampled_gaussian, to_eps_delta, Composition,
    RdpLedger,
};
use dppeft::dataio::{dataset_to_text, parse_dataset, InstructionRecord};
use dppeft::dp::{add_noise, allocate_variance, clip, l2_norm, NoiseKey};
use dppeft::harness::RunConfig;
use dppeft::model::{
    finite_diff_grad, init_backbone, per_sample_grad, project_update, AdapterState, BackboneSpec, Layout,
    ProjectionSpec, Target,
};
use dppeft::objective::{gradient_kl, reg_term, GradientDistStats};

fn eps_after(steps: u64, sigma_eff: f64, q: f64) -> f64 {
    let mut ledger = RdpLedger::new(default_orders(), 1).unwrap();
    ledger.record_steps(0, sigma_eff, q, steps).unwrap();
    to_eps_delta(&ledger, 1e-5, Composition::Parallel).unwrap().epsilon
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clip_norm_bound_wide_range(
        dir in prop::collection::vec(-1.0f64..1.0, 1..512),
        log_norm in -6.0f64..6.0,
        log_c in -3.0f64..3.0,
    ) {
        prop_assume!(l2_norm(&dir) > 0.0);
        let s = 10f64.powf(log_norm) / l2_norm(&dir);
        let g: Vec<f64> = dir.iter().map(|v| v * s).collect();
        let c = 10f64.powf(log_c);
        let once = clip(&g, c).unwrap();
        prop_assert!(l2_norm(&once) <= c * (1.0 + 1e-12));
        let twice = clip(&once, c).unwrap();
        prop_assert!(once.iter().zip(&twice).all(|(a, b)| a.to_bits() == b.to_bits()));
        if l2_norm(&g) <= c {
            prop_assert_eq!(&once, &g);
        }
    }

    #[test]
    fn noise_is_keyed_and_schedule_free(seed in any::<u64>(), step in 0u64..1000, task in 0u64..8, len in 1usize..700) {
        let key = NoiseKey { seed, step, task };
        let full = add_noise(&vec![0.0; len], 2.0, key).unwrap();
        prop_assert_eq!(&full, &add_noise(&vec![0.0; len], 2.0, key).unwrap());
        // a prefix of the vector sees the same draws
        let half = add_noise(&vec![0.0; len / 2 + 1], 2.0, key).unwrap();
        prop_assert_eq!(&full[..half.len()], &half[..]);
    }

    #[test]
    fn variance_decreases_in_alpha(sigma in 0.01f64..10.0, c in 0.01f64..10.0, a in 0.01f64..1.0, b in 0.01f64..1.0) {
        prop_assume!(a < b);
        prop_assert!(allocate_variance(sigma, c, a).unwrap() > allocate_variance(sigma, c, b).unwrap());
    }

    #[test]
    fn ledger_is_additive(steps in 1u64..10_000, sigma in 0.3f64..10.0, q in 0.0001f64..1.0) {
        let mut one = RdpLedger::new(default_orders(), 2).unwrap();
        one.record_step(1, sigma, q).unwrap();
        let mut many = RdpLedger::new(default_orders(), 2).unwrap();
        many.record_steps(1, sigma, q, steps).unwrap();
        for (a, b) in one.task_rdp(1).unwrap().iter().zip(many.task_rdp(1).unwrap()) {
            prop_assert!(b == steps as f64 * a);
        }
        prop_assert!(many.task_rdp(0).unwrap().iter().all(|v| *v == 0.0));
        prop_assert_eq!(many.steps(1), steps);
    }

    #[test]
    fn epsilon_monotone(steps in 1u64..2000, extra in 1u64..500, sigma in 0.5f64..5.0, bump in 0.01f64..2.0, q in 0.001f64..0.5) {
        let base = eps_after(steps, sigma, q);
        prop_assert!(eps_after(steps + extra, sigma, q) >= base);
        prop_assert!(eps_after(steps, sigma + bump, q) <= base);
    }

    #[test]
    fn epsilon_nondecreasing_in_task_weight(sigma in 0.5f64..4.0, a in 0.05f64..1.0, b in 0.05f64..1.0) {
        prop_assume!(a < b);
        let ea = eps_after(100, effective_sigma(sigma, a).unwrap(), 0.05);
        let eb = eps_after(100, effective_sigma(sigma, b).unwrap(), 0.05);
        prop_assert!(ea <= eb);
    }

    #[test]
    fn subsampled_rdp_bounded_by_unsampled(order in 2u32..64, sigma in 0.3f64..8.0, q in 0.0f64..1.0) {
        let full = rdp_gaussian(order as f64, sigma).unwrap();
        let sub = rdp_subsampled_gaussian(order as f64, sigma, q).unwrap();
        prop_assert!(sub >= 0.0);
        prop_assert!(sub <= full * (1.0 + 1e-12));
    }

    #[test]
    fn kl_monotone(v in prop::collection::vec(1e-6f64..10.0, 1..16), s1 in 0.0f64..3.0, s2 in 0.0f64..3.0, a1 in 0.05f64..1.0, a2 in 0.05f64..1.0) {
        let m = v.len();
        let stats = GradientDistStats { task_id: 0, batch_size: 16, mean: vec![0.0; m], variance: v };
        let kl = |s: f64, a: f64| gradient_kl(&stats, s, 1.0, a).unwrap().value;
        let (lo, hi) = (s1.min(s2), s1.max(s2));
        prop_assert!(kl(lo, 0.5) <= kl(hi, 0.5));
        let (small, large) = (a1.min(a2), a1.max(a2));
        prop_assert!(kl(1.0, large) <= kl(1.0, small));
        prop_assert!(kl(lo, 0.5) >= 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences(
        d in 1usize..5, h in 2usize..5, c in 2usize..4, rank in 1usize..3,
        seed in any::<u64>(), phase in 0.0f64..6.0, label in 0usize..2,
    ) {
        let spec = BackboneSpec::new(d, h, vec![c], seed).unwrap();
        let proj = ProjectionSpec::new(rank, true);
        let Ok(layout) = Layout::new(&spec, &proj) else { return Ok(()); };
        let frozen = init_backbone(&spec).unwrap();
        let u: Vec<f64> = (0..layout.dim()).map(|i| 0.5 * (phase + 2.3 * i as f64).sin()).collect();
        let adapter = AdapterState::from_vec(layout, u).unwrap();
        let theta = project_update(&frozen, &adapter).unwrap();
        let rec = InstructionRecord {
            task_id: 0,
            label,
            origin_label: label,
            features: (0..d).map(|j| (phase * 1.3 + j as f64).cos()).collect(),
        };
        let g = per_sample_grad(&theta, &rec, 0).unwrap();
        let fd = finite_diff_grad(&theta, &rec, 1e-5).unwrap();
        prop_assert!(common::rel_err(&g.g, &fd) < 1e-5);
    }

    #[test]
    fn zero_adapter_leaves_backbone_unchanged(d in 1usize..6, h in 2usize..6, seed in any::<u64>()) {
        let spec = BackboneSpec::new(d, h, vec![3, 2], seed).unwrap();
        let Ok(layout) = Layout::new(&spec, &ProjectionSpec::new(1, true)) else { return Ok(()); };
        let frozen = init_backbone(&spec).unwrap();
        let adapter = AdapterState::zeros(layout);
        let theta = project_update(&frozen, &adapter).unwrap();
        prop_assert_eq!(theta.w1(), &frozen.w1);
        prop_assert_eq!(theta.w2(), &frozen.w2);
        prop_assert_eq!(theta.head(1).unwrap(), &frozen.heads[1]);
    }

    #[test]
    fn reg_invariant_under_factor_rescaling(phase in 0.0f64..6.0, k in 0.1f64..10.0) {
        let spec = BackboneSpec::new(4, 5, vec![3], 0).unwrap();
        let layout = Layout::new(&spec, &ProjectionSpec::new(2, true)).unwrap();
        let u: Vec<f64> = (0..layout.dim()).map(|i| (phase + 0.9 * i as f64).sin()).collect();
        let mut adapter = AdapterState::from_vec(layout.clone(), u).unwrap();
        let base = reg_term(&adapter);
        for t in [Target::W1, Target::W2] {
            let (a, b) = layout.factor_ranges(t).unwrap();
            adapter.as_mut_slice()[a].iter_mut().for_each(|v| *v *= k);
            adapter.as_mut_slice()[b].iter_mut().for_each(|v| *v /= k);
        }
        prop_assert!((reg_term(&adapter) - base).abs() <= 1e-10 * base.max(1.0));
    }

    #[test]
    fn dataset_text_round_trip(rows in prop::collection::vec((0usize..3, 0usize..4, prop::collection::vec(-1e6f64..1e6, 3)), 0..40)) {
        let records: Vec<InstructionRecord> = rows
            .into_iter()
            .map(|(t, l, f)| InstructionRecord { task_id: t, label: l, origin_label: (l + 1) % 4, features: f })
            .collect();
        prop_assert_eq!(parse_dataset(&dataset_to_text(&records), "mem").unwrap(), records);
    }

    #[test]
    fn config_text_round_trip(lr in 1e-4f64..1.0, b in 1usize..512, steps in 0usize..10_000, sigma in 0.0f64..5.0, seed in any::<u64>()) {
        let text = format!("lr={lr}\nbatch_size={b}\nsteps={steps}\nclip_c=1\nsigma={sigma}\nalpha=1,0.5\nseed={seed}\n");
        let dir = std::path::Path::new("/cfg");
        let cfg = RunConfig::parse(&text, "mem", dir).unwrap();
        prop_assert_eq!(RunConfig::parse(&cfg.to_text(), "mem", dir).unwrap(), cfg);
    }
}
