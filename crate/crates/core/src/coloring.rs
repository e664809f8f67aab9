//! Conflict graphs between trajectories, clustering validity, graph
//! colouring, and the reduction from colouring to trajectory clustering.

use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use rustc_hash::{FxHashMap, FxHashSet};
use thiserror::Error;

use crate::dataset::{
    Action, ActionSpace, DatasetMeta, LabeledDataset, Observation, StateKey, Step, Trajectory, DEFAULT_KEY_CELL,
};

/// Continuous actions at a shared state conflict when their L∞ distance
/// exceeds this.
pub const CONFLICT_TOLERANCE: f64 = 1e-6;

/// Largest graph coloured by exhaustive search.
pub const EXACT_COLORING_LIMIT: usize = 30;

/// Largest graph whose valid partitions can be enumerated.
pub const ENUMERATION_LIMIT: usize = 12;

#[derive(Debug, Error)]
pub enum ColoringError {
    #[error("edge ({0}, {1}) is a self-loop")]
    SelfLoop(usize, usize),
    #[error("edge ({u}, {v}) references a node outside 0..{n}")]
    NodeRange { u: usize, v: usize, n: usize },
    #[error("assignment has {got} entries for {expected} nodes")]
    AssignmentLength { expected: usize, got: usize },
    #[error("horizon {horizon} must exceed the maximum degree {degree}")]
    Horizon { horizon: usize, degree: usize },
    #[error("graph has {n} nodes; enumeration supports at most {limit}")]
    TooLarge { n: usize, limit: usize },
    #[error("k must be at least 1")]
    ZeroColors,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("constructed state ids overflow")]
    StateOverflow,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Simple undirected graph. Edges are stored once as `(u, v)` with `u < v`,
/// sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph; duplicate edges in either orientation collapse.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, ColoringError> {
        let mut list = Vec::new();
        for (u, v) in edges {
            if u == v {
                return Err(ColoringError::SelfLoop(u, v));
            }
            if u >= n || v >= n {
                return Err(ColoringError::NodeRange { u, v, n });
            }
            list.push((u.min(v), u.max(v)));
        }
        list.sort_unstable();
        list.dedup();
        let mut adjacency = vec![Vec::new(); n];
        for &(u, v) in &list {
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        for row in &mut adjacency {
            row.sort_unstable();
        }
        Ok(Self {
            n,
            edges: list,
            adjacency,
        })
    }

    pub fn empty(n: usize) -> Self {
        Self {
            n,
            edges: Vec::new(),
            adjacency: vec![Vec::new(); n],
        }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        u < self.n && self.adjacency[u].binary_search(&v).is_ok()
    }

    /// Parses the `N M` header plus `M` lines of `u v` edge-list format.
    /// Blank lines and lines starting with `#` are skipped.
    pub fn parse_edge_list(text: &str) -> Result<Self, ColoringError> {
        let parse_err = |line: usize, message: String| ColoringError::Parse { line, message };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hline, header) = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing `N M` header".into()))?;
        let (n, m) = parse_pair(header).map_err(|m| parse_err(hline, m))?;
        let mut seen = FxHashSet::default();
        let mut edges = Vec::with_capacity(m);
        for (line, body) in lines {
            if edges.len() == m {
                return Err(parse_err(line, format!("more than the {m} declared edges")));
            }
            let (u, v) = parse_pair(body).map_err(|msg| parse_err(line, msg))?;
            if u == v {
                return Err(parse_err(line, format!("self-loop on node {u}")));
            }
            if u >= n || v >= n {
                return Err(parse_err(line, format!("node out of range 0..{n}")));
            }
            if !seen.insert((u.min(v), u.max(v))) {
                return Err(parse_err(line, format!("duplicate edge {u} {v}")));
            }
            edges.push((u, v));
        }
        if edges.len() != m {
            let last = text.lines().count().max(1);
            return Err(parse_err(last, format!("expected {m} edges, found {}", edges.len())));
        }
        Self::new(n, edges)
    }

    pub fn to_edge_list(&self) -> String {
        let mut out = format!("{} {}\n", self.n, self.edges.len());
        for (u, v) in &self.edges {
            out.push_str(&format!("{u} {v}\n"));
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ColoringError> {
        Self::parse_edge_list(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ColoringError> {
        fs::write(path, self.to_edge_list())?;
        Ok(())
    }
}

fn parse_pair(line: &str) -> Result<(usize, usize), String> {
    let mut it = line.split_whitespace();
    let mut next = || -> Result<usize, String> {
        let tok = it.next().ok_or("expected two integers")?;
        tok.parse()
            .map_err(|_| format!("`{tok}` is not a non-negative integer"))
    };
    let pair = (next()?, next()?);
    if it.next().is_some() {
        return Err("expected exactly two integers".into());
    }
    Ok(pair)
}

/// Whether two actions taken at the same state disagree.
pub fn actions_conflict(a: &Action, b: &Action) -> bool {
    match (a, b) {
        (Action::Discrete(x), Action::Discrete(y)) => x != y,
        (Action::Continuous(x), Action::Continuous(y)) => {
            x.len() != y.len() || x.iter().zip(y).any(|(p, q)| (p - q).abs() > CONFLICT_TOLERANCE)
        }
        _ => true,
    }
}

/// Conflict distance: 1 when some state visited by both trajectories is
/// acted on differently, else 0. A trajectory is at distance 0 from itself.
pub fn conflict(t1: &Trajectory, t2: &Trajectory) -> u8 {
    conflict_with_cell(t1, t2, DEFAULT_KEY_CELL)
}

/// [`conflict`] with an explicit discretisation cell for continuous states.
pub fn conflict_with_cell(t1: &Trajectory, t2: &Trajectory, cell: f64) -> u8 {
    if t1 == t2 {
        return 0;
    }
    let mut by_key: FxHashMap<StateKey, Vec<&Action>> = FxHashMap::default();
    for step in &t1.steps {
        by_key.entry(step.obs.state_key(cell)).or_default().push(&step.action);
    }
    let hit = t2.steps.iter().any(|step| {
        by_key
            .get(&step.obs.state_key(cell))
            .is_some_and(|acts| acts.iter().any(|a| actions_conflict(a, &step.action)))
    });
    u8::from(hit)
}

/// Conflict graph with one node per trajectory.
pub fn build_graph(trajectories: &[Trajectory]) -> Graph {
    build_graph_with_cell(trajectories, DEFAULT_KEY_CELL)
}

pub fn build_graph_with_cell(trajectories: &[Trajectory], cell: f64) -> Graph {
    // Inverted index: state key -> distinct (trajectory, action) visits.
    let mut index: FxHashMap<StateKey, Vec<(usize, &Action)>> = FxHashMap::default();
    for (i, t) in trajectories.iter().enumerate() {
        for step in &t.steps {
            let visits = index.entry(step.obs.state_key(cell)).or_default();
            if !visits
                .iter()
                .any(|(j, a)| *j == i && !actions_conflict(a, &step.action))
            {
                visits.push((i, &step.action));
            }
        }
    }
    let buckets: Vec<_> = index.into_values().filter(|v| v.len() > 1).collect();
    let edges = buckets
        .par_iter()
        .fold(FxHashSet::default, |mut acc, visits| {
            bucket_edges(visits, &mut acc);
            acc
        })
        .reduce(FxHashSet::default, |mut a, b| {
            if a.len() < b.len() {
                return merge_sets(b, a);
            }
            a.extend(b);
            a
        });
    // Identical trajectories are at distance zero by convention.
    let edges = edges.into_iter().filter(|&(u, v)| trajectories[u] != trajectories[v]);
    Graph::new(trajectories.len(), edges).expect("indices are in range and distinct")
}

fn merge_sets(mut big: FxHashSet<(usize, usize)>, small: FxHashSet<(usize, usize)>) -> FxHashSet<(usize, usize)> {
    big.extend(small);
    big
}

fn bucket_edges(visits: &[(usize, &Action)], out: &mut FxHashSet<(usize, usize)>) {
    if let Some(Action::Discrete(_)) = visits.first().map(|v| v.1) {
        // Group by action so only cross-group pairs are touched.
        let mut groups: FxHashMap<Option<usize>, Vec<usize>> = FxHashMap::default();
        for (i, a) in visits {
            groups.entry(a.discrete()).or_default().push(*i);
        }
        let groups: Vec<_> = groups.into_values().collect();
        for (g, left) in groups.iter().enumerate() {
            for right in &groups[g + 1..] {
                for &u in left {
                    for &v in right {
                        if u != v {
                            out.insert((u.min(v), u.max(v)));
                        }
                    }
                }
            }
        }
        return;
    }
    for (x, (u, a)) in visits.iter().enumerate() {
        for (v, b) in &visits[x + 1..] {
            if u != v && actions_conflict(a, b) {
                out.insert((*u.min(v), *u.max(v)));
            }
        }
    }
}

/// Result of checking an assignment against a conflict graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Validity {
    Valid,
    /// An edge whose endpoints share a cluster.
    Violated(usize, usize),
}

impl Validity {
    pub fn is_valid(self) -> bool {
        self == Validity::Valid
    }
}

impl fmt::Display for Validity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Validity::Valid => write!(f, "valid"),
            Validity::Violated(u, v) => write!(f, "invalid: nodes {u} and {v} conflict but share a cluster"),
        }
    }
}

/// A clustering has zero intra-cluster conflict exactly when no edge is
/// monochromatic. Returns the first such edge otherwise.
pub fn clustering_valid(graph: &Graph, assignment: &[usize]) -> Result<Validity, ColoringError> {
    if assignment.len() != graph.node_count() {
        return Err(ColoringError::AssignmentLength {
            expected: graph.node_count(),
            got: assignment.len(),
        });
    }
    Ok(graph
        .edges()
        .iter()
        .find(|&&(u, v)| assignment[u] == assignment[v])
        .map_or(Validity::Valid, |&(u, v)| Validity::Violated(u, v)))
}

const ACTION_FIRST: usize = 0;
const ACTION_SECOND: usize = 1;
const FILLER_ACTION: usize = 0;

/// Builds a dataset whose conflict graph is `graph`: one trajectory per
/// vertex, each of length `horizon`.
///
/// Edges are visited in `(i, j)`, `i < j` order. Each edge appends a shared
/// state with action 0 to trajectory `i` and action 1 to trajectory `j`,
/// reusing the lowest-numbered state that neither trajectory holds and that
/// introduces no conflict outside the graph. Trajectories are then padded
/// with states unique to each one.
pub fn reduce_from_graph(graph: &Graph, horizon: usize) -> Result<LabeledDataset, ColoringError> {
    reduce(graph, horizon, true)
}

/// The construction that only requires the reused state be absent from the
/// two endpoint trajectories. This can connect vertices that are not
/// adjacent: two disjoint edges share state 0 and all four endpoints
/// conflict pairwise across them.
pub fn reduce_from_graph_literal(graph: &Graph, horizon: usize) -> Result<LabeledDataset, ColoringError> {
    reduce(graph, horizon, false)
}

fn reduce(graph: &Graph, horizon: usize, safe: bool) -> Result<LabeledDataset, ColoringError> {
    let degree = graph.max_degree();
    if horizon <= degree {
        return Err(ColoringError::Horizon { horizon, degree });
    }
    let n = graph.node_count();
    let mut lists: Vec<Vec<(u32, usize)>> = vec![Vec::new(); n];
    // For each shared state, who holds it with the first and second action.
    let mut holders: Vec<[Vec<usize>; 2]> = Vec::new();
    for &(i, j) in graph.edges() {
        let usable = |l: usize, holders: &[[Vec<usize>; 2]]| {
            let [firsts, seconds] = &holders[l];
            let fresh = !firsts.contains(&i) && !seconds.contains(&i) && !firsts.contains(&j) && !seconds.contains(&j);
            fresh
                && (!safe
                    || (firsts.iter().all(|&u| graph.has_edge(u, j)) && seconds.iter().all(|&u| graph.has_edge(u, i))))
        };
        let l = (0..holders.len()).find(|&l| usable(l, &holders)).unwrap_or_else(|| {
            holders.push([Vec::new(), Vec::new()]);
            holders.len() - 1
        });
        holders[l][0].push(i);
        holders[l][1].push(j);
        let id = u32::try_from(l).map_err(|_| ColoringError::StateOverflow)?;
        lists[i].push((id, ACTION_FIRST));
        lists[j].push((id, ACTION_SECOND));
    }
    let base = holders.len();
    let trajectories = lists
        .into_iter()
        .enumerate()
        .map(|(i, mut list)| {
            for p in list.len()..horizon {
                let id = i
                    .checked_mul(horizon)
                    .and_then(|x| x.checked_add(base + p))
                    .and_then(|x| u32::try_from(x).ok())
                    .ok_or(ColoringError::StateOverflow)?;
                list.push((id, FILLER_ACTION));
            }
            Ok(Trajectory::new(
                list.into_iter()
                    .map(|(s, a)| Step {
                        obs: Observation::Symbol(s),
                        action: Action::Discrete(a),
                        reward: 0.0,
                    })
                    .collect(),
            ))
        })
        .collect::<Result<Vec<_>, ColoringError>>()?;
    let meta = DatasetMeta {
        env: "graph-reduction".into(),
        experts: Vec::new(),
        seed: 0,
        actions: ActionSpace::Discrete(2),
    };
    Ok(LabeledDataset::unlabeled(meta, trajectories))
}

/// Outcome of [`color`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Coloring {
    /// A proper colouring with at most `k` colours, if one was found.
    pub assignment: Option<Vec<usize>>,
    /// False when the greedy fallback was used: a missing colouring then
    /// proves nothing.
    pub exact: bool,
}

/// Proper `k`-colouring. Exhaustive for graphs up to
/// [`EXACT_COLORING_LIMIT`] nodes, greedy largest-degree-first above.
pub fn color(graph: &Graph, k: usize) -> Result<Coloring, ColoringError> {
    if k == 0 {
        return Err(ColoringError::ZeroColors);
    }
    let order = degree_order(graph);
    if graph.node_count() > EXACT_COLORING_LIMIT {
        return Ok(Coloring {
            assignment: greedy(graph, &order, k),
            exact: false,
        });
    }
    let mut colors = vec![usize::MAX; graph.node_count()];
    let found = backtrack(graph, &order, 0, k, 0, &mut colors);
    Ok(Coloring {
        assignment: found.then_some(colors),
        exact: true,
    })
}

fn degree_order(graph: &Graph) -> Vec<usize> {
    let mut order: Vec<usize> = (0..graph.node_count()).collect();
    order.sort_by_key(|&v| (std::cmp::Reverse(graph.degree(v)), v));
    order
}

fn greedy(graph: &Graph, order: &[usize], k: usize) -> Option<Vec<usize>> {
    let mut colors = vec![usize::MAX; graph.node_count()];
    for &v in order {
        let c = (0..k).find(|&c| graph.neighbors(v).iter().all(|&u| colors[u] != c))?;
        colors[v] = c;
    }
    Some(colors)
}

fn backtrack(graph: &Graph, order: &[usize], at: usize, k: usize, used: usize, colors: &mut [usize]) -> bool {
    let Some(&v) = order.get(at) else {
        return true;
    };
    // Colours beyond the first unused one are relabelings of it.
    for c in 0..k.min(used + 1) {
        if graph.neighbors(v).iter().all(|&u| colors[u] != c) {
            colors[v] = c;
            if backtrack(graph, order, at + 1, k, used.max(c + 1), colors) {
                return true;
            }
        }
    }
    colors[v] = usize::MAX;
    false
}

/// Every partition of the nodes into at most `k` blocks with no conflict
/// inside a block, each listed once in canonical labelling (blocks numbered
/// by first member).
pub fn enumerate_partitions(graph: &Graph, k: usize) -> Result<Vec<Vec<usize>>, ColoringError> {
    let n = graph.node_count();
    if n > ENUMERATION_LIMIT {
        return Err(ColoringError::TooLarge {
            n,
            limit: ENUMERATION_LIMIT,
        });
    }
    if k == 0 {
        return Err(ColoringError::ZeroColors);
    }
    let mut out = Vec::new();
    let mut labels = vec![0; n];
    grow(graph, k, 0, 0, &mut labels, &mut out);
    Ok(out)
}

fn grow(graph: &Graph, k: usize, v: usize, blocks: usize, labels: &mut [usize], out: &mut Vec<Vec<usize>>) {
    if v == labels.len() {
        out.push(labels.to_vec());
        return;
    }
    for b in 0..k.min(blocks + 1) {
        if graph.neighbors(v).iter().all(|&u| u > v || labels[u] != b) {
            labels[v] = b;
            grow(graph, k, v + 1, blocks.max(b + 1), labels, out);
        }
    }
}

/// The two-state, two-action contextual bandit: one single-step trajectory
/// per (state, action) pair, ordered (s0,a0), (s0,a1), (s1,a0), (s1,a1).
pub fn bandit_dataset() -> Vec<Trajectory> {
    [(0, 0), (0, 1), (1, 0), (1, 1)]
        .into_iter()
        .map(|(s, a)| {
            Trajectory::new(vec![Step {
                obs: Observation::Symbol(s),
                action: Action::Discrete(a),
                reward: 0.0,
            }])
        })
        .collect()
}
