//! Variable scan-order learning.
//!
//! Training shuffles the variable order of every sample and folds the
//! batch-centered loss of each sample into the directed edge costs its order
//! used. At inference the cheapest open Hamiltonian path through the cost
//! graph (an asymmetric TSP without the return edge) becomes the scan order.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::numerics::{SeedRng, Tensor};
use crate::pipeline::is_permutation;

/// Largest variable count the exhaustive solver accepts.
pub const BRUTEFORCE_MAX_VARS: usize = 10;

/// A visiting order `v_1..v_K` over the variables.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationRecord {
    pub order: Vec<usize>,
    /// Drawn for one sample rather than shared across a batch.
    pub per_sample: bool,
}

impl PermutationRecord {
    pub fn identity(k: usize) -> Self {
        Self {
            order: (0..k).collect(),
            per_sample: false,
        }
    }

    pub fn new(order: Vec<usize>) -> Result<Self> {
        let k = order.len();
        if !is_permutation(&order, k) {
            return Err(Error::Param(format!("{order:?} is not a permutation of 0..{k}")));
        }
        Ok(Self {
            order,
            per_sample: false,
        })
    }

    /// The `K − 1` directed transitions `(v_k, v_{k+1})`.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.order.windows(2).map(|w| (w[0], w[1]))
    }
}

/// Uniformly random order over `k` variables.
pub fn sample_permutation(rng: &mut SeedRng, k: usize) -> PermutationRecord {
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    PermutationRecord {
        order,
        per_sample: true,
    }
}

/// Subtracts the batch mean from every per-sample loss.
pub fn centralize_losses(losses: &[f64]) -> Vec<f64> {
    if losses.is_empty() {
        return Vec::new();
    }
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    losses.iter().map(|l| l - mean).collect()
}

/// Directed edge costs `cost[i][j]` for scanning `j` right after `i`, kept as
/// an exponential moving average of centered losses.
#[derive(Clone, Debug, PartialEq)]
pub struct CostGraph {
    pub cost: Tensor,
    pub beta: f64,
    pub update_count: u64,
}

impl CostGraph {
    pub fn new(k: usize, beta: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Param("cost graph needs at least one variable".into()));
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::Param(format!("EMA rate {beta} outside (0, 1)")));
        }
        Ok(Self {
            cost: Tensor::zeros(&[k, k]),
            beta,
            update_count: 0,
        })
    }

    pub fn from_costs(cost: Tensor, beta: f64) -> Result<Self> {
        let &[k, k2] = cost.shape() else {
            return Err(Error::Shape(format!("cost matrix must be square, got {:?}", cost.shape())));
        };
        if k != k2 {
            return Err(Error::Shape(format!("cost matrix must be square, got {:?}", cost.shape())));
        }
        let mut g = Self::new(k, beta)?;
        g.cost = cost;
        Ok(g)
    }

    pub fn n_vars(&self) -> usize {
        self.cost.shape()[0]
    }

    #[inline]
    pub fn edge(&self, from: usize, to: usize) -> f64 {
        self.cost.data()[from * self.n_vars() + to]
    }

    /// Folds one batch into the graph: for sample `b`, every transition of
    /// `perms[b]` moves toward `centered[b]` with rate `1 − beta`. Samples are
    /// applied in batch order.
    pub fn update(&mut self, perms: &[PermutationRecord], centered: &[f64]) -> Result<()> {
        if perms.len() != centered.len() {
            return Err(Error::Param(format!(
                "{} permutations for {} losses",
                perms.len(),
                centered.len()
            )));
        }
        let k = self.n_vars();
        for p in perms {
            if p.order.len() != k || !is_permutation(&p.order, k) {
                return Err(Error::Param(format!("{:?} is not a permutation of 0..{k}", p.order)));
            }
        }
        let beta = self.beta;
        for (p, &l) in perms.iter().zip(centered) {
            for (i, j) in p.transitions() {
                let e = &mut self.cost.data_mut()[i * k + j];
                *e = beta * *e + (1.0 - beta) * l;
            }
        }
        self.update_count += 1;
        Ok(())
    }
}

/// Sum of edge costs along an open path.
pub fn path_cost(graph: &CostGraph, order: &[usize]) -> f64 {
    order.windows(2).map(|w| graph.edge(w[0], w[1])).sum()
}

/// Best of `K` nearest-neighbor constructions, one from every start node.
pub fn solve_order_greedy(graph: &CostGraph) -> PermutationRecord {
    let k = graph.n_vars();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for start in 0..k {
        let mut visited = vec![false; k];
        let mut order = Vec::with_capacity(k);
        visited[start] = true;
        order.push(start);
        while order.len() < k {
            let last = *order.last().unwrap();
            let next = (0..k)
                .filter(|&j| !visited[j])
                .min_by(|&a, &b| graph.edge(last, a).total_cmp(&graph.edge(last, b)))
                .unwrap();
            visited[next] = true;
            order.push(next);
        }
        let cost = path_cost(graph, &order);
        if best.as_ref().map_or(true, |(c, _)| cost < *c) {
            best = Some((cost, order));
        }
    }
    PermutationRecord {
        order: best.map(|(_, o)| o).unwrap_or_default(),
        per_sample: false,
    }
}

/// Greedy start refined by best-improvement local search.
pub fn solve_order_local_search(graph: &CostGraph) -> PermutationRecord {
    let start = solve_order_greedy(graph);
    local_search_from(graph, start.order)
}

/// Repeatedly applies the best improving pairwise swap or single-node
/// relocation until no move lowers the path cost.
pub fn local_search_from(graph: &CostGraph, mut order: Vec<usize>) -> PermutationRecord {
    let k = order.len();
    let mut current = path_cost(graph, &order);
    let mut candidate = order.clone();
    loop {
        let mut best: Option<(f64, Vec<usize>)> = None;
        let consider = |cand: &[usize], best: &mut Option<(f64, Vec<usize>)>| {
            let c = path_cost(graph, cand);
            if c < current && best.as_ref().map_or(true, |(b, _)| c < *b) {
                *best = Some((c, cand.to_vec()));
            }
        };
        for i in 0..k {
            for j in i + 1..k {
                candidate.copy_from_slice(&order);
                candidate.swap(i, j);
                consider(&candidate, &mut best);
            }
        }
        for from in 0..k {
            for to in 0..k {
                if from == to {
                    continue;
                }
                candidate.copy_from_slice(&order);
                let v = candidate.remove(from);
                candidate.insert(to, v);
                consider(&candidate, &mut best);
            }
        }
        match best {
            Some((c, o)) => {
                current = c;
                order = o;
            }
            None => break,
        }
    }
    PermutationRecord {
        order,
        per_sample: false,
    }
}

/// Geometric cooling schedule `T_i = t0 · alpha^i`, where level `i` spans `K`
/// proposals, so a run is `iters_per_var` levels of `K` proposals each.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SaSchedule {
    /// Initial temperature; `None` uses the standard deviation of the off-diagonal costs.
    pub t0: Option<f64>,
    pub alpha: f64,
    pub iters_per_var: usize,
    pub restarts: usize,
}

impl Default for SaSchedule {
    fn default() -> Self {
        Self {
            t0: None,
            alpha: 0.995,
            iters_per_var: 2000,
            restarts: 8,
        }
    }
}

impl SaSchedule {
    pub fn from_config(cfg: &crate::config::TrainConfig) -> Self {
        Self {
            t0: (cfg.sa_t0 > 0.0).then_some(cfg.sa_t0),
            alpha: cfg.sa_alpha,
            iters_per_var: cfg.sa_iters_per_var,
            restarts: cfg.sa_restarts,
        }
    }

    fn validate(&self) -> Result<()> {
        if let Some(t0) = self.t0 {
            if !(t0 > 0.0 && t0.is_finite()) {
                return Err(Error::Param(format!("initial temperature must be positive, got {t0}")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Param(format!("cooling rate {} outside (0, 1)", self.alpha)));
        }
        if self.restarts == 0 || self.iters_per_var == 0 {
            return Err(Error::Param("annealing needs at least one restart and one iteration".into()));
        }
        Ok(())
    }
}

fn edge_cost_spread(graph: &CostGraph) -> f64 {
    let k = graph.n_vars();
    let edges: Vec<f64> = (0..k)
        .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| graph.edge(i, j))
        .collect();
    if edges.is_empty() {
        return 1.0;
    }
    let mean = edges.iter().sum::<f64>() / edges.len() as f64;
    let var = edges.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / edges.len() as f64;
    let sd = var.sqrt();
    if sd > 0.0 && sd.is_finite() {
        sd
    } else {
        1.0
    }
}

/// Simulated annealing over orders with swap and segment-reversal moves.
///
/// Restart 0 starts from the local-search order and later restarts from
/// random orders; the best order ever visited is returned, earliest restart
/// winning ties.
pub fn solve_order_sa(graph: &CostGraph, schedule: &SaSchedule, seed: u64) -> Result<PermutationRecord> {
    schedule.validate()?;
    let k = graph.n_vars();
    if k < 3 {
        // at most two orders; compare them directly
        return Ok(solve_order_bruteforce(graph)?);
    }
    let t0 = schedule.t0.unwrap_or_else(|| edge_cost_spread(graph));
    let iters = schedule.iters_per_var * k;
    let root = SeedRng::new(seed);
    let seeded = solve_order_local_search(graph).order;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..schedule.restarts {
        let mut rng = root.split_indexed("sa_restart", restart as u64);
        let mut current = if restart == 0 {
            seeded.clone()
        } else {
            sample_permutation(&mut rng, k).order
        };
        let mut current_cost = path_cost(graph, &current);
        let mut local_best = (current_cost, current.clone());
        let mut temp = t0;
        let mut proposal = current.clone();
        for it in 0..iters {
            proposal.copy_from_slice(&current);
            let i = rng.below(k);
            let mut j = rng.below(k - 1);
            if j >= i {
                j += 1;
            }
            let (lo, hi) = (i.min(j), i.max(j));
            if rng.uniform() < 0.5 {
                proposal.swap(lo, hi);
            } else {
                proposal[lo..=hi].reverse();
            }
            let cost = path_cost(graph, &proposal);
            let delta = cost - current_cost;
            if delta <= 0.0 || rng.uniform() < (-delta / temp).exp() {
                std::mem::swap(&mut current, &mut proposal);
                current_cost = cost;
                if cost < local_best.0 {
                    local_best = (cost, current.clone());
                }
            }
            if (it + 1) % k == 0 {
                temp *= schedule.alpha;
            }
        }
        if best.as_ref().map_or(true, |(c, _)| local_best.0 < *c) {
            best = Some(local_best);
        }
    }
    Ok(PermutationRecord {
        order: best.map(|(_, o)| o).unwrap_or_default(),
        per_sample: false,
    })
}

/// Exhaustive minimum over all `K!` open paths; the lexicographically
/// smallest order wins ties. Refuses `K > 10`.
pub fn solve_order_bruteforce(graph: &CostGraph) -> Result<PermutationRecord> {
    let k = graph.n_vars();
    if k > BRUTEFORCE_MAX_VARS {
        return Err(Error::Config(format!(
            "exhaustive search is limited to {BRUTEFORCE_MAX_VARS} variables, graph has {k}"
        )));
    }
    struct Search<'a> {
        graph: &'a CostGraph,
        path: Vec<usize>,
        used: Vec<bool>,
        best_cost: f64,
        best: Vec<usize>,
    }
    impl Search<'_> {
        fn visit(&mut self, partial: f64) {
            let k = self.used.len();
            if self.path.len() == k {
                if partial < self.best_cost {
                    self.best_cost = partial;
                    self.best.clone_from(&self.path);
                }
                return;
            }
            for v in 0..k {
                if self.used[v] {
                    continue;
                }
                let step = self.path.last().map_or(0.0, |&u| self.graph.edge(u, v));
                self.used[v] = true;
                self.path.push(v);
                self.visit(partial + step);
                self.path.pop();
                self.used[v] = false;
            }
        }
    }
    let mut s = Search {
        graph,
        path: Vec::with_capacity(k),
        used: vec![false; k],
        best_cost: f64::INFINITY,
        best: (0..k).collect(),
    };
    s.visit(0.0);
    Ok(PermutationRecord {
        order: s.best,
        per_sample: false,
    })
}

/// Order-decoding strategies selectable at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Solver {
    Greedy,
    LocalSearch,
    Annealing,
    BruteForce,
}

impl std::str::FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Solver::Greedy),
            "ls" => Ok(Solver::LocalSearch),
            "sa" => Ok(Solver::Annealing),
            "bruteforce" => Ok(Solver::BruteForce),
            _ => Err(Error::Config(format!(
                "unknown solver {s:?}; expected greedy, ls, sa or bruteforce"
            ))),
        }
    }
}

impl Solver {
    pub fn name(self) -> &'static str {
        match self {
            Solver::Greedy => "greedy",
            Solver::LocalSearch => "ls",
            Solver::Annealing => "sa",
            Solver::BruteForce => "bruteforce",
        }
    }
}

/// Runs `solver` on `graph`; `seed` matters only for annealing.
pub fn solve(graph: &CostGraph, solver: Solver, schedule: &SaSchedule, seed: u64) -> Result<PermutationRecord> {
    match solver {
        Solver::Greedy => Ok(solve_order_greedy(graph)),
        Solver::LocalSearch => Ok(solve_order_local_search(graph)),
        Solver::Annealing => solve_order_sa(graph, schedule, seed),
        Solver::BruteForce => solve_order_bruteforce(graph),
    }
}

/// Plain-text order file: one variable index per line.
pub fn format_order(order: &[usize]) -> String {
    order.iter().map(|v| format!("{v}\n")).collect()
}

/// Parses an order file; blank lines are skipped and the result must be a
/// permutation (of `0..expected` when given).
pub fn parse_order(text: &str, expected: Option<usize>) -> Result<PermutationRecord> {
    let mut order = Vec::new();
    for (row, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v = line.parse::<usize>().map_err(|_| Error::Parse {
            row: row + 1,
            col: 1,
            msg: format!("expected a variable index, got {line:?}"),
        })?;
        order.push(v);
    }
    if let Some(k) = expected {
        if order.len() != k {
            return Err(Error::Param(format!("order lists {} variables, expected {k}", order.len())));
        }
    }
    PermutationRecord::new(order)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(k: usize, costs: &[f64]) -> CostGraph {
        CostGraph::from_costs(Tensor::new(&[k, k], costs.to_vec()).unwrap(), 0.9).unwrap()
    }

    #[test]
    fn ema_single_edge() {
        let mut g = CostGraph::new(2, 0.9).unwrap();
        g.update(&[PermutationRecord::new(vec![0, 1]).unwrap()], &[0.2]).unwrap();
        assert!((g.edge(0, 1) - 0.02).abs() < 1e-15);
        assert_eq!(g.edge(1, 0), 0.0);
        assert_eq!(g.update_count, 1);
    }

    #[test]
    fn ema_zero_losses_leave_graph_unchanged() {
        let mut rng = SeedRng::new(2);
        let mut g = CostGraph::new(3, 0.9).unwrap();
        let before = g.cost.clone();
        let perms: Vec<_> = (0..4).map(|_| sample_permutation(&mut rng, 3)).collect();
        g.update(&perms, &[0.0; 4]).unwrap();
        assert_eq!(g.cost, before);
    }

    #[test]
    fn ema_two_samples_same_edge() {
        let (p0, a, b, beta) = (0.3, 0.5, -0.2, 0.8);
        let mut g = CostGraph::new(2, beta).unwrap();
        g.cost.set(&[1, 0], p0);
        let order = PermutationRecord::new(vec![1, 0]).unwrap();
        g.update(&[order.clone(), order], &[a, b]).unwrap();
        let expected = beta * beta * p0 + beta * (1.0 - beta) * a + (1.0 - beta) * b;
        assert!((g.edge(1, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn ema_decays_only_visited_edges() {
        let mut g = graph(3, &[0.0, 0.5, -0.25, 1.0, 0.0, 2.0, 0.1, -3.0, 0.0]);
        let before = g.cost.clone();
        g.update(&[PermutationRecord::new(vec![2, 0, 1]).unwrap()], &[0.0]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let old = before.at(&[i, j]);
                let want = if (i, j) == (2, 0) || (i, j) == (0, 1) { 0.9 * old } else { old };
                assert_eq!(g.edge(i, j), want);
            }
        }
    }

    #[test]
    fn update_rejects_wrong_length() {
        let mut g = CostGraph::new(3, 0.9).unwrap();
        let p = PermutationRecord { order: vec![0, 1], per_sample: true };
        assert!(matches!(g.update(&[p], &[0.1]), Err(Error::Param(_))));
    }

    #[test]
    fn centering() {
        let c = centralize_losses(&[0.4, 0.6]);
        assert!((c[0] + 0.1).abs() < 1e-15 && (c[1] - 0.1).abs() < 1e-15);
        assert_eq!(centralize_losses(&[3.7]), vec![0.0]);
    }

    #[test]
    fn path_costs() {
        let g = graph(2, &[0.0, 3.0, 7.0, 0.0]);
        assert_eq!(path_cost(&g, &[0, 1]), 3.0);
        assert_eq!(path_cost(&g, &[1, 0]), 7.0);
        assert_eq!(path_cost(&graph(1, &[5.0]), &[0]), 0.0);
    }

    #[test]
    fn greedy_follows_dominant_chain() {
        let g = graph(3, &[0.0, 1.0, 9.0, 9.0, 0.0, 1.0, 9.0, 9.0, 0.0]);
        assert_eq!(solve_order_greedy(&g).order, vec![0, 1, 2]);
        let g2 = graph(2, &[0.0, 3.0, 7.0, 0.0]);
        assert_eq!(solve_order_greedy(&g2).order, vec![0, 1]);
    }

    #[test]
    fn bruteforce_hand_instance() {
        // [2,0,1] costs 1 + 1 = 2; every other order costs at least 5
        let g = graph(3, &[0.0, 1.0, 5.0, 5.0, 0.0, 5.0, 1.0, 5.0, 0.0]);
        assert_eq!(solve_order_bruteforce(&g).unwrap().order, vec![2, 0, 1]);
        assert_eq!(solve_order_bruteforce(&graph(1, &[0.0])).unwrap().order, vec![0]);
        let flat = CostGraph::from_costs(Tensor::full(&[4, 4], 1.5), 0.9).unwrap();
        assert_eq!(solve_order_bruteforce(&flat).unwrap().order, vec![0, 1, 2, 3]);
    }

    #[test]
    fn bruteforce_guard() {
        let g = CostGraph::new(11, 0.9).unwrap();
        assert!(matches!(solve_order_bruteforce(&g), Err(Error::Config(_))));
    }

    #[test]
    fn local_search_keeps_optimal_start() {
        let g = graph(3, &[0.0, 1.0, 5.0, 5.0, 0.0, 5.0, 1.0, 5.0, 0.0]);
        assert_eq!(local_search_from(&g, vec![2, 0, 1]).order, vec![2, 0, 1]);
    }

    #[test]
    fn sa_two_variables_is_optimal() {
        let g = graph(2, &[0.0, 3.0, 7.0, 0.0]);
        let r = solve_order_sa(&g, &SaSchedule::default(), 1).unwrap();
        assert_eq!(r.order, vec![0, 1]);
    }

    #[test]
    fn sa_rejects_bad_schedule() {
        let g = CostGraph::new(4, 0.9).unwrap();
        let bad = SaSchedule { t0: Some(0.0), ..SaSchedule::default() };
        assert!(matches!(solve_order_sa(&g, &bad, 0), Err(Error::Param(_))));
        let bad = SaSchedule { alpha: 1.0, ..SaSchedule::default() };
        assert!(matches!(solve_order_sa(&g, &bad, 0), Err(Error::Param(_))));
    }

    #[test]
    fn sample_permutation_k1() {
        assert_eq!(sample_permutation(&mut SeedRng::new(0), 1).order, vec![0]);
    }

    #[test]
    fn order_file_round_trip_and_errors() {
        let text = format_order(&[2, 0, 1]);
        assert_eq!(text, "2\n0\n1\n");
        assert_eq!(parse_order(&text, Some(3)).unwrap().order, vec![2, 0, 1]);
        assert!(matches!(parse_order("0\nx\n", None), Err(Error::Parse { row: 2, .. })));
        assert!(parse_order("0\n0\n", None).is_err());
        assert!(parse_order("0\n1\n", Some(3)).is_err());
    }
}
