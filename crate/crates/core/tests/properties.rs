use proptest::prelude::*;
use unfold::bench::ExperimentConfig;
use unfold::classical::{rpca_init, rpca_iterate, RpcaSolverConfig, Transform};
use unfold::datagen::{gen_rpca_dataset, gen_rpca_instance, perturb_objective, Dataset, PsiMode, RpcaParams, Split};
use unfold::linalg::{gram_solve, shrink};
use unfold::rng::Rng;
use unfold::rpca::{init_from_classical, ModelContext, UnfoldedRpcaModel, Variant};
use unfold::Tensor;

fn randn(rng: &mut Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_vec(&[r, c], (0..r * c).map(|_| rng.normal()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn soft_threshold_is_odd_and_nonexpansive(a in -10.0f64..10.0, b in -10.0f64..10.0, z in 0.0f64..5.0) {
        prop_assert!((shrink(a, z) - shrink(b, z)).abs() <= (a - b).abs() + 1e-15);
        prop_assert_eq!(shrink(-a, z), -shrink(a, z));
    }

    #[test]
    fn gram_solve_residual_is_small(seed in any::<u64>(), n in 3usize..12, r in 1usize..3) {
        let mut rng = Rng::new(seed);
        let m = randn(&mut rng, n, r);
        let g = randn(&mut rng, n, r);
        let z = gram_solve(&m, &g).unwrap();
        let back = z.matmul(&m.transpose().matmul(&m).unwrap()).unwrap();
        prop_assert!(back.sub(&g).unwrap().frobenius() <= 1e-10 * g.frobenius());
    }

    #[test]
    fn generated_instances_decompose_exactly(seed in any::<u64>(), n1 in 4usize..16, n2 in 4usize..16, orth in any::<bool>()) {
        let mode = if orth { PsiMode::Orthogonal } else { PsiMode::Identity };
        let inst = gen_rpca_instance(n1, n2, 2, 0.2, mode, seed).unwrap();
        let rebuilt = inst.v_star.add(&inst.psi.matmul(&inst.y_star).unwrap()).unwrap();
        prop_assert!(rebuilt.sub(&inst.x_obs).unwrap().frobenius() <= 1e-12 * inst.x_obs.frobenius());
        let target = (0.2 * (n1 * n2) as f64).round() as i64;
        prop_assert!((inst.y_star.count_nonzero() as i64 - target).abs() <= 1);
    }

    #[test]
    fn perturbation_has_requested_size(seed in any::<u64>(), delta in 0.0f64..2.0) {
        let inst = gen_rpca_instance(6, 5, 1, 0.2, PsiMode::Orthogonal, seed).unwrap();
        let p = perturb_objective(&inst.psi, delta, seed ^ 1).unwrap();
        let rel = p.sub(&inst.psi).unwrap().frobenius() / inst.psi.frobenius();
        prop_assert!((rel - delta).abs() <= 1e-12);
    }

    #[test]
    fn dataset_round_trip_is_lossless(seed in any::<u64>(), train in 1usize..4, test in 1usize..3) {
        let p = RpcaParams { n1: 5, n2: 4, rank_r: 1, sparse_frac: 0.25, psi_mode: PsiMode::Orthogonal };
        let ds = gen_rpca_dataset(&p, Split::contiguous(train, 1, test), seed).unwrap();
        prop_assert_eq!(Dataset::decode(&ds.encode().unwrap()).unwrap(), ds);
    }

    #[test]
    fn decoders_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        let _ = Dataset::decode(&bytes);
        let _ = UnfoldedRpcaModel::decode(&bytes);
        let _ = unfold::sparse::ListaModel::decode(&bytes);
    }

    #[test]
    fn corrupted_checkpoint_is_rejected_or_round_trips(seed in any::<u64>(), pos in any::<prop::sample::Index>(), byte in any::<u8>()) {
        let ctx = ModelContext { seed, ..ModelContext::new(Tensor::eye(6), 5, 1, 2) };
        let m = init_from_classical(Variant::LearnedCorrection, &RpcaSolverConfig::new(0.5, 0.1, 2), &ctx).unwrap();
        let mut bytes = m.encode().unwrap();
        let i = pos.index(bytes.len());
        bytes[i] = byte;
        if let Ok(back) = UnfoldedRpcaModel::decode(&bytes) {
            prop_assert_eq!(UnfoldedRpcaModel::decode(&back.encode().unwrap()).unwrap(), back);
        }
    }

    #[test]
    fn config_round_trips(seed in any::<u64>(), depth in 1usize..20, delta in 0.0f64..1.0, epochs in 1usize..50, frac in 0.01f64..0.99) {
        let mut cfg = ExperimentConfig { seed, depth, delta, ..ExperimentConfig::default() };
        cfg.train.epochs = epochs;
        cfg.problem.sparse_frac = frac;
        let text = cfg.to_toml_string().unwrap();
        prop_assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn learned_hyper_specializes_to_classical(seed in any::<u64>(), eta in 0.1f64..1.0, zeta in 0.0f64..0.3) {
        let inst = gen_rpca_instance(12, 10, 2, 0.1, PsiMode::Orthogonal, seed).unwrap();
        let cfg = RpcaSolverConfig::new(eta, zeta, 4);
        let model = init_from_classical(Variant::LearnedHyper, &cfg, &ModelContext::new(inst.psi.clone(), 10, 2, 4)).unwrap();
        let psi = Transform::new(&inst.psi).unwrap();
        let mut st = rpca_init(&inst.x_obs, &psi, 2, cfg.init_zeta0).unwrap();
        for s in model.forward(&inst.x_obs).unwrap() {
            st = rpca_iterate(&st, &inst.x_obs, &psi, &cfg).unwrap();
            prop_assert!(s.l.max_abs_diff(&st.l) <= 1e-12);
            prop_assert!(s.r_fac.max_abs_diff(&st.r_fac) <= 1e-12);
            prop_assert!(s.y.max_abs_diff(&st.y) <= 1e-12);
        }
    }

    #[test]
    fn low_rank_iterate_is_rotation_invariant(seed in any::<u64>(), angle in 0.0f64..std::f64::consts::TAU) {
        let inst = gen_rpca_instance(10, 9, 2, 0.1, PsiMode::Identity, seed).unwrap();
        let model = init_from_classical(Variant::LearnedHyper, &RpcaSolverConfig::new(0.5, 0.05, 3), &ModelContext::new(inst.psi.clone(), 9, 2, 3)).unwrap();
        let init = model.initial_state(&inst.x_obs).unwrap();
        let q = Tensor::from_rows(&[&[angle.cos(), -angle.sin()], &[angle.sin(), angle.cos()]]);
        let mut rot = init.clone();
        rot.l = init.l.matmul(&q).unwrap();
        rot.r_fac = init.r_fac.matmul(&q).unwrap();
        let a = model.forward_from(&inst.x_obs, &init).unwrap();
        let b = model.forward_from(&inst.x_obs, &rot).unwrap();
        for (p, q) in a.iter().zip(&b) {
            let scale = p.low_rank().frobenius();
            prop_assert!(p.low_rank().max_abs_diff(&q.low_rank()) <= 1e-10 * scale);
        }
    }
}
