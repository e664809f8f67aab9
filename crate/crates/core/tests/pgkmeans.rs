use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trajclust::dataset::{generate_with_noise, Action, ActionSpace, EncodedDataset, Observation, Step, Trajectory};
use trajclust::envs::{expert_action, EnvId, GridKind, GridState, Noise};
use trajclust::metrics::nmi;
use trajclust::pgkmeans::{
    best_of_n, best_of_n_all, e_step, m_step, merge, objective, run, Init, MergeRule, PgkConfig, PgkError,
};
use trajclust::policies::{fit, Family, PolicyModel};

const FIVE: ActionSpace = ActionSpace::Discrete(5);

fn sym(pairs: &[(u32, usize)]) -> Trajectory {
    Trajectory::new(
        pairs
            .iter()
            .map(|&(s, a)| Step {
                obs: Observation::Symbol(s),
                action: Action::Discrete(a),
                reward: 0.0,
            })
            .collect(),
    )
}

fn encode(trajs: &[Trajectory]) -> EncodedDataset {
    EncodedDataset::from_trajectories(trajs, FIVE).unwrap()
}

fn exact() -> Family {
    Family::Tabular {
        epsilon: 0.0,
        timestep: false,
    }
}

fn det_policy(pairs: &[(u32, usize)]) -> PolicyModel {
    fit(&exact(), &[&sym(pairs)], FIVE).unwrap()
}

#[test]
fn objective_examples() {
    let trajs = vec![sym(&[(0, 1), (1, 2)]), sym(&[(1, 2), (0, 1)])];
    let data = encode(&trajs);
    let single = m_step(&data, &[0, 0], 1, &exact()).unwrap();
    assert_eq!(objective(&data, &[0, 0], &single).unwrap(), 0.0);

    let uniform = vec![PolicyModel::Uniform(FIVE), PolicyModel::Uniform(FIVE)];
    let j = objective(&data, &[0, 1], &uniform).unwrap();
    assert!((j - 4.0 * 0.2f64.ln()).abs() < 1e-12);

    let conflict = encode(&[sym(&[(0, 0)]), sym(&[(0, 1)])]);
    let joint = m_step(&conflict, &[0, 0], 1, &exact()).unwrap();
    assert!((objective(&conflict, &[0, 0], &joint).unwrap() - 2.0 * 0.5f64.ln()).abs() < 1e-15);
    let split = m_step(&conflict, &[0, 1], 2, &exact()).unwrap();
    assert_eq!(objective(&conflict, &[0, 1], &split).unwrap(), 0.0);
}

#[test]
fn e_step_examples() {
    let trajs = vec![sym(&[(0, 0)]), sym(&[(0, 2)]), sym(&[(5, 1)])];
    let data = encode(&trajs);
    assert_eq!(e_step(&data, &[PolicyModel::Uniform(FIVE)]).unwrap(), vec![0, 0, 0]);
    let policies = vec![det_policy(&[(0, 0)]), det_policy(&[(0, 1)]), det_policy(&[(0, 2)])];
    let a = e_step(&data, &policies).unwrap();
    assert_eq!(a[0], 0);
    assert_eq!(a[1], 2);
    // State 5 is unseen by every policy, so all three tie.
    assert_eq!(a[2], 0);
    assert!(matches!(e_step(&data, &[]), Err(PgkError::ZeroClusters)));
}

#[test]
fn m_step_examples() {
    let trajs = vec![sym(&[(0, 0), (1, 1)]), sym(&[(0, 3)])];
    let data = encode(&trajs);
    let ps = m_step(&data, &[0, 1], 3, &exact()).unwrap();
    assert_eq!(ps[0].log_likelihood(&trajs[0]).unwrap(), 0.0);
    assert_eq!(ps[1].log_likelihood(&trajs[1]).unwrap(), 0.0);
    assert!(ps[2].is_uniform());
    let whole = m_step(&data, &[0, 0], 1, &Family::tabular()).unwrap();
    let global = fit(&Family::tabular(), &[&trajs[0], &trajs[1]], FIVE).unwrap();
    assert_eq!(whole[0], global);
    assert!(m_step(&data, &[0], 1, &exact()).is_err());
}

#[test]
fn ground_truth_m_step_recovers_takeball_experts() {
    let ds = generate_with_noise(EnvId::Takeball, &[0, 1, 2, 3], 5, 3, Noise::NONE).unwrap();
    let data = EncodedDataset::new(&ds).unwrap();
    let labels = ds.labels.clone().unwrap();
    let policies = m_step(&data, &labels, 4, &exact()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for expert in 0..4 {
        let mut s = GridState::reset(GridKind::Takeball, &mut rng);
        while !s.done {
            let want = expert_action(GridKind::Takeball, expert, &s);
            let got = policies[expert].sample_action(&s.observe(), 0, &mut rng).unwrap();
            assert_eq!(got, Action::Discrete(want.index()));
            s = s.step(want, 0.0, &mut rng).unwrap().state;
        }
    }
}

#[test]
fn single_trajectory_converges_immediately() {
    let data = encode(&[sym(&[(0, 1), (2, 3)])]);
    let r = run(&data, &PgkConfig::new(1, Family::tabular())).unwrap();
    assert_eq!(r.iterations, 1);
    assert!(r.converged);
    assert_eq!(r.assignment, vec![0]);
}

#[test]
fn noise_free_takeball_separates_with_restarts() {
    let ds = generate_with_noise(EnvId::Takeball, &[0, 1, 2, 3], 100, 5, Noise::NONE).unwrap();
    let data = EncodedDataset::new(&ds).unwrap();
    let truth = ds.labels.as_ref().unwrap();
    let mut perfect = 0;
    let mut total = 0.0;
    for seed in 0..10 {
        let mut cfg = PgkConfig::new(6, Family::tabular());
        cfg.k_star = Some(4);
        cfg.seed = seed;
        let score = nmi(&best_of_n(&data, 5, &cfg).unwrap().assignment, truth).unwrap();
        perfect += usize::from(score == 1.0);
        total += score;
    }
    assert!(perfect >= 8, "{perfect} perfect runs");
    assert!(total / 10.0 >= 0.95);
}

#[test]
fn noise_free_takeball_global_optimum_is_the_true_split() {
    let ds = generate_with_noise(EnvId::Takeball, &[0, 1, 2, 3], 20, 5, Noise::NONE).unwrap();
    let data = EncodedDataset::new(&ds).unwrap();
    let truth = ds.labels.clone().unwrap();
    let at_truth = m_step(&data, &truth, 4, &exact()).unwrap();
    assert_eq!(objective(&data, &truth, &at_truth).unwrap(), 0.0);
    // Folding any two experts together costs the start-state conflict.
    let mut folded = truth.clone();
    folded.iter_mut().filter(|c| **c == 3).for_each(|c| *c = 2);
    let ps = m_step(&data, &folded, 4, &exact()).unwrap();
    assert!(objective(&data, &folded, &ps).unwrap() < -1.0);
}

#[test]
fn invalid_configs_are_rejected() {
    let data = encode(&[sym(&[(0, 1)])]);
    assert!(run(&data, &PgkConfig::new(0, Family::tabular())).is_err());
    let mut cfg = PgkConfig::new(2, Family::tabular());
    cfg.k_star = Some(3);
    assert!(matches!(run(&data, &cfg), Err(PgkError::MergeTarget { .. })));
    cfg.k_star = None;
    cfg.max_iters = 0;
    assert!(run(&data, &cfg).is_err());
    assert!(best_of_n(&data, 0, &PgkConfig::new(1, Family::tabular())).is_err());
    let cont = PgkConfig::new(1, Family::from_kind(trajclust::policies::FamilyKind::LinearGaussian));
    assert!(run(&data, &cont).is_err());
}

#[test]
fn merge_is_noop_at_target() {
    let trajs = vec![sym(&[(0, 0)]), sym(&[(0, 1)])];
    let data = encode(&trajs);
    let ps = m_step(&data, &[0, 1], 2, &exact()).unwrap();
    let (a, p) = merge(&data, &[0, 1], ps.clone(), 2, &exact(), MergeRule::MostCompatible).unwrap();
    assert_eq!(a, vec![0, 1]);
    assert_eq!(p, ps);
    assert!(merge(&data, &[0, 1], ps, 3, &exact(), MergeRule::MostCompatible).is_err());
}

#[test]
fn duplicate_clusters_merge_first() {
    // Clusters 0 and 2 hold identical behaviour; cluster 1 conflicts.
    let trajs = vec![
        sym(&[(0, 0), (1, 1)]),
        sym(&[(0, 0), (1, 1)]),
        sym(&[(0, 2), (1, 3)]),
        sym(&[(0, 0), (1, 1)]),
    ];
    let data = encode(&trajs);
    let assignment = [0, 0, 1, 2];
    let ps = m_step(&data, &assignment, 3, &Family::tabular()).unwrap();
    let (a, p) = merge(&data, &assignment, ps, 2, &Family::tabular(), MergeRule::MostCompatible).unwrap();
    assert_eq!(p.len(), 2);
    assert_eq!(a[0], a[3]);
    assert_ne!(a[0], a[2]);
}

#[test]
fn empty_clusters_are_removed_first() {
    let trajs = vec![sym(&[(0, 0)]), sym(&[(0, 1)])];
    let data = encode(&trajs);
    let ps = m_step(&data, &[0, 2], 3, &exact()).unwrap();
    let (a, p) = merge(&data, &[0, 2], ps, 2, &exact(), MergeRule::LeastCompatible).unwrap();
    assert_eq!(a, vec![0, 1]);
    assert_eq!(p.len(), 2);
}

#[test]
fn best_of_one_equals_run_and_best_is_max() {
    let ds = generate_with_noise(EnvId::Takeball, &[0, 1, 2, 3], 30, 2, Noise::default()).unwrap();
    let data = EncodedDataset::new(&ds).unwrap();
    let mut cfg = PgkConfig::new(6, Family::tabular());
    cfg.k_star = Some(4);
    cfg.seed = 11;
    let single = run(&data, &cfg).unwrap();
    let one = best_of_n(&data, 1, &cfg).unwrap();
    assert_eq!(single.assignment, one.assignment);
    assert_eq!(single.objective, one.objective);
    let (best, all) = best_of_n_all(&data, 5, &cfg).unwrap();
    assert_eq!(best.objective, all.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    assert_eq!(best.k(), 4);
}

#[test]
fn likelihood_spread_init_runs() {
    let ds = generate_with_noise(EnvId::Takeball, &[0, 1, 2, 3], 30, 2, Noise::default()).unwrap();
    let data = EncodedDataset::new(&ds).unwrap();
    let mut cfg = PgkConfig::new(4, Family::tabular());
    cfg.init = Init::LikelihoodSpread;
    let r = run(&data, &cfg).unwrap();
    assert_eq!(r.assignment.len(), data.len());
    assert!(r.objective.is_finite());
}

#[test]
fn gradient_family_runs_end_to_end() {
    let ds = generate_with_noise(EnvId::Pathfollowing, &[0, 1, 2], 10, 2, Noise::default()).unwrap();
    let data = EncodedDataset::new(&ds).unwrap();
    let mut cfg = PgkConfig::new(3, Family::from_kind(trajclust::policies::FamilyKind::LinearGaussian));
    cfg.max_iters = 3;
    let r = run(&data, &cfg).unwrap();
    assert!(r.iterations <= 3);
    assert!(r.penalized_history.is_empty());
    assert!(r.objective.is_finite());
}

fn random_instance(seed: u64) -> (Vec<Trajectory>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=12);
    let generators = rng.random_range(1..=3);
    let tables: Vec<Vec<usize>> = (0..generators)
        .map(|_| (0..4).map(|_| rng.random_range(0..3)).collect())
        .collect();
    let trajs = (0..n)
        .map(|_| {
            let g = &tables[rng.random_range(0..generators)];
            let len = rng.random_range(1..=4);
            let pairs: Vec<(u32, usize)> = (0..len)
                .map(|_| {
                    let s = rng.random_range(0..4u32);
                    let a = if rng.random_bool(0.1) {
                        rng.random_range(0..3)
                    } else {
                        g[s as usize]
                    };
                    (s, a)
                })
                .collect();
            sym(&pairs)
        })
        .collect();
    (trajs, rng.random_range(1..=3))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cluster_relabelling_preserves_objective(seed in any::<u64>()) {
        let (trajs, k) = random_instance(seed);
        let data = encode(&trajs);
        let mut cfg = PgkConfig::new(k, Family::tabular());
        cfg.seed = seed;
        let r = run(&data, &cfg).unwrap();
        let j = objective(&data, &r.assignment, &r.policies).unwrap();
        let perm: Vec<usize> = (0..k).rev().collect();
        let relabelled: Vec<usize> = r.assignment.iter().map(|&c| perm[c]).collect();
        let mut ps = r.policies.clone();
        ps.reverse();
        let j2 = objective(&data, &relabelled, &ps).unwrap();
        prop_assert!((j - j2).abs() < 1e-9);
    }

    #[test]
    fn smoothed_penalized_objective_strictly_increases(seed in any::<u64>()) {
        let (trajs, k) = random_instance(seed);
        let data = encode(&trajs);
        let mut cfg = PgkConfig::new(k, Family::tabular());
        cfg.seed = seed;
        let r = run(&data, &cfg).unwrap();
        for w in r.penalized_history.windows(2) {
            prop_assert!(w[1] > w[0]);
        }
        prop_assert!(r.iterations as f64 <= (k as f64).powi(trajs.len() as i32).min(50.0));
    }
}
