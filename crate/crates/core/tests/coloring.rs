use proptest::prelude::*;

use trajclust::coloring::{
    bandit_dataset, build_graph, clustering_valid, color, conflict, enumerate_partitions, reduce_from_graph, Graph,
};
use trajclust::dataset::{generate_with_noise, Action, EncodedDataset, Observation, Step, Trajectory};
use trajclust::envs::{EnvId, Noise};
use trajclust::pgkmeans::{run, PgkConfig};
use trajclust::policies::Family;

fn bounded_graph(n: usize, candidates: &[(usize, usize)], max_degree: usize) -> Graph {
    let mut degree = vec![0; n];
    let mut edges = Vec::new();
    for &(u, v) in candidates {
        let (u, v) = (u % n, v % n);
        if u != v && degree[u] < max_degree && degree[v] < max_degree && !edges.contains(&(u.min(v), u.max(v))) {
            degree[u] += 1;
            degree[v] += 1;
            edges.push((u.min(v), u.max(v)));
        }
    }
    Graph::new(n, edges).unwrap()
}

fn graph_strategy(max_n: usize, max_degree: usize) -> impl Strategy<Value = Graph> {
    (1..=max_n, prop::collection::vec((0usize..64, 0usize..64), 0..40))
        .prop_map(move |(n, cand)| bounded_graph(n, &cand, max_degree))
}

fn symbolic(pairs: Vec<(u32, usize)>) -> Trajectory {
    Trajectory::new(
        pairs
            .into_iter()
            .map(|(s, a)| Step {
                obs: Observation::Symbol(s),
                action: Action::Discrete(a),
                reward: 0.0,
            })
            .collect(),
    )
}

/// Every labelling of `n` nodes into `k` labels, reduced to first-occurrence
/// numbering and deduplicated.
fn brute_force_partitions(g: &Graph, k: usize) -> Vec<Vec<usize>> {
    let n = g.node_count();
    let mut seen = std::collections::BTreeSet::new();
    for code in 0..k.pow(n as u32) {
        let labels: Vec<usize> = (0..n).map(|i| code / k.pow(i as u32) % k).collect();
        if g.edges().iter().any(|&(u, v)| labels[u] == labels[v]) {
            continue;
        }
        let mut rename = Vec::new();
        let canon = labels
            .iter()
            .map(|l| match rename.iter().position(|x| x == l) {
                Some(p) => p,
                None => {
                    rename.push(*l);
                    rename.len() - 1
                }
            })
            .collect::<Vec<_>>();
        seen.insert(canon);
    }
    seen.into_iter().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reduction_round_trips(g in graph_strategy(12, 4), extra in 0usize..3) {
        let h = g.max_degree() + 1 + extra;
        let ds = reduce_from_graph(&g, h).unwrap();
        prop_assert!(ds.trajectories.iter().all(|t| t.len() == h));
        prop_assert_eq!(build_graph(&ds.trajectories), g);
    }

    #[test]
    fn colorings_are_proper(g in graph_strategy(14, 5), k in 1usize..5) {
        let c = color(&g, k).unwrap();
        if let Some(a) = &c.assignment {
            prop_assert!(a.iter().all(|&x| x < k));
            prop_assert!(clustering_valid(&g, a).unwrap().is_valid());
        }
        // Exact search agrees with enumeration on whether any colouring exists.
        if g.node_count() <= 9 {
            prop_assert_eq!(c.assignment.is_some(), !brute_force_partitions(&g, k).is_empty());
        }
    }

    #[test]
    fn enumeration_matches_brute_force(g in graph_strategy(7, 6), k in 1usize..4) {
        prop_assert_eq!(enumerate_partitions(&g, k).unwrap(), brute_force_partitions(&g, k));
    }

    #[test]
    fn conflict_is_symmetric_and_matches_graph(
        raw in prop::collection::vec(prop::collection::vec((0u32..4, 0usize..3), 1..5), 2..8)
    ) {
        let trajs: Vec<Trajectory> = raw.into_iter().map(symbolic).collect();
        let g = build_graph(&trajs);
        for i in 0..trajs.len() {
            prop_assert_eq!(conflict(&trajs[i], &trajs[i]), 0);
            for j in 0..trajs.len() {
                prop_assert_eq!(conflict(&trajs[i], &trajs[j]), conflict(&trajs[j], &trajs[i]));
                if i != j {
                    prop_assert_eq!(g.has_edge(i, j), conflict(&trajs[i], &trajs[j]) == 1);
                }
            }
        }
    }
}

#[test]
fn single_noise_free_expert_gives_edgeless_graph() {
    let ds = generate_with_noise(EnvId::Takeball, &[2], 30, 0, Noise::NONE).unwrap();
    assert_eq!(build_graph(&ds.trajectories).edge_count(), 0);
}

#[test]
fn noise_free_takeball_truth_is_valid() {
    let ds = generate_with_noise(EnvId::Takeball, &[0, 1, 2, 3], 10, 4, Noise::NONE).unwrap();
    let g = build_graph(&ds.trajectories);
    assert!(g.edge_count() > 0);
    assert!(clustering_valid(&g, ds.labels.as_ref().unwrap()).unwrap().is_valid());
    // Everything in one cluster is not.
    assert!(!clustering_valid(&g, &vec![0; ds.len()]).unwrap().is_valid());
}

#[test]
fn zero_objective_pgkmeans_runs_are_valid() {
    let ds = generate_with_noise(EnvId::Takeball, &[0, 1, 2, 3], 15, 8, Noise::NONE).unwrap();
    let data = EncodedDataset::new(&ds).unwrap();
    let g = build_graph(&ds.trajectories);
    let exact = Family::Tabular {
        epsilon: 0.0,
        timestep: false,
    };
    let mut optimal = 0;
    for seed in 0..12 {
        let mut cfg = PgkConfig::new(6, exact.clone());
        cfg.seed = seed;
        let r = run(&data, &cfg).unwrap();
        let valid = clustering_valid(&g, &r.assignment).unwrap().is_valid();
        // With exact likelihoods, zero objective and validity coincide.
        assert_eq!(r.objective == 0.0, valid, "seed {seed}");
        optimal += usize::from(valid);
    }
    assert!(optimal > 0);
}

#[test]
fn bandit_has_exactly_two_groupings() {
    let g = build_graph(&bandit_dataset());
    let parts = enumerate_partitions(&g, 2).unwrap();
    assert_eq!(parts.len(), 2);
    assert!(parts.iter().all(|p| clustering_valid(&g, p).unwrap().is_valid()));
}

#[test]
fn complete_graph_reduction_needs_three_clusters() {
    let k3 = Graph::new(3, [(0, 1), (0, 2), (1, 2)]).unwrap();
    let g = build_graph(&reduce_from_graph(&k3, 3).unwrap().trajectories);
    assert_eq!(color(&g, 2).unwrap().assignment, None);
    assert!(color(&g, 3).unwrap().assignment.is_some());
}

#[test]
fn edge_list_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.txt");
    let g = Graph::new(5, [(0, 4), (1, 3), (2, 4)]).unwrap();
    g.save(&path).unwrap();
    assert_eq!(Graph::load(&path).unwrap(), g);
}
