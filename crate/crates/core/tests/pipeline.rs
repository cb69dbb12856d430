use unfold::bench::{run_matched, run_mismatch, ExperimentConfig};
use unfold::rpca::Variant;

fn small(variants: Vec<Variant>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        depth: 5,
        variants,
        ..ExperimentConfig::default()
    };
    cfg.problem.n1 = 20;
    cfg.problem.n2 = 16;
    cfg.problem.rank_r = 2;
    cfg.data.train = 16;
    cfg.data.val = 4;
    cfg.data.test = 8;
    cfg.baseline.converge_cap = 2000;
    cfg.train.epochs = 6;
    cfg.train.batch_size = 4;
    cfg
}

#[test]
fn sequentially_trained_hyper_has_nonincreasing_trajectory() {
    let rep = run_matched(&small(vec![Variant::LearnedHyper])).unwrap();
    let mean = rep.method("learned_hyper").unwrap().mean();
    assert_eq!(mean.len(), 5);
    for w in mean.windows(2) {
        assert!(w[1] <= w[0] + 1e-6, "{mean:?}");
    }
}

#[test]
fn training_does_not_lose_to_its_classical_initialization() {
    let rep = run_matched(&small(vec![Variant::LearnedHyper, Variant::LearnedObjective])).unwrap();
    let classical = rep.method("classical").unwrap().final_mean();
    for v in ["learned_hyper", "learned_objective"] {
        let m = rep.method(v).unwrap();
        assert!(
            m.final_mean() <= classical * (1.0 + 1e-9),
            "{v}: {} vs {classical}",
            m.final_mean()
        );
        assert_eq!(m.n_test(), 8);
    }
}

#[test]
fn perturbing_the_transform_hurts_the_classical_solver() {
    let mut cfg = small(vec![]);
    let mut conv = |delta| {
        cfg.delta = delta;
        let rep = run_mismatch(&cfg).unwrap();
        assert_eq!(rep.delta, Some(delta));
        rep.method("classical_converged").unwrap().final_mean()
    };
    let (exact, perturbed) = (conv(0.0), conv(0.3));
    assert!(exact < perturbed, "{exact} vs {perturbed}");
}
