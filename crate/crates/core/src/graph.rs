//! Latent causal graph.
//!
//! Nodes are 0-based here. Configuration files and CLI output use 1-based
//! indices; convert with [`Dag::from_one_based`] and [`Dag::edges_one_based`].

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

use crate::error::{Error, Result};

/// Directed acyclic graph over `n_nodes` latent variables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dag {
    n_nodes: usize,
    edges: BTreeSet<(usize, usize)>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    topo_order: Vec<usize>,
}

impl Dag {
    /// Builds and validates a DAG from `(parent, child)` pairs.
    ///
    /// The topological order comes from Kahn's algorithm, always releasing the
    /// smallest ready index first.
    pub fn new(n_nodes: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::Config("a graph needs at least one node".into()));
        }
        let mut edge_set = BTreeSet::new();
        for (k, j) in edges {
            for index in [k, j] {
                if index >= n_nodes {
                    return Err(Error::NodeIndex { index, n_nodes });
                }
            }
            if k == j {
                return Err(Error::SelfLoop(k));
            }
            edge_set.insert((k, j));
        }

        let mut parents = vec![Vec::new(); n_nodes];
        let mut children = vec![Vec::new(); n_nodes];
        for &(k, j) in &edge_set {
            parents[j].push(k);
            children[k].push(j);
        }

        let mut in_degree: Vec<usize> = parents.iter().map(Vec::len).collect();
        let mut ready: BinaryHeap<Reverse<usize>> = (0..n_nodes)
            .filter(|&j| in_degree[j] == 0)
            .map(Reverse)
            .collect();
        let mut topo_order = Vec::with_capacity(n_nodes);
        while let Some(Reverse(k)) = ready.pop() {
            topo_order.push(k);
            for &j in &children[k] {
                in_degree[j] -= 1;
                if in_degree[j] == 0 {
                    ready.push(Reverse(j));
                }
            }
        }
        if topo_order.len() < n_nodes {
            let node = (0..n_nodes).find(|&j| in_degree[j] > 0).unwrap_or(0);
            return Err(Error::Cycle { node });
        }

        Ok(Self {
            n_nodes,
            edges: edge_set,
            parents,
            children,
            topo_order,
        })
    }

    /// Builds a DAG from 1-based `[parent, child]` pairs as written in config files.
    pub fn from_one_based(n_nodes: usize, edges: &[[usize; 2]]) -> Result<Self> {
        let mut zero_based = Vec::with_capacity(edges.len());
        for &[k, j] in edges {
            if k == 0 || j == 0 {
                return Err(Error::Config(format!(
                    "edge [{k}, {j}]: node indices are 1-based"
                )));
            }
            zero_based.push((k - 1, j - 1));
        }
        Self::new(n_nodes, zero_based)
    }

    pub fn empty(n_nodes: usize) -> Result<Self> {
        Self::new(n_nodes, [])
    }

    /// `0 → 1 → … → n-1`.
    pub fn chain(n_nodes: usize) -> Result<Self> {
        Self::new(n_nodes, (1..n_nodes).map(|j| (j - 1, j)))
    }

    /// Every pair ordered by `order` gets a forward edge.
    pub fn complete_from_order(order: &[usize]) -> Result<Self> {
        let n = order.len();
        let mut seen = vec![false; n];
        for &k in order {
            if k >= n || std::mem::replace(&mut seen[k], true) {
                return Err(Error::InvalidOrder(format!(
                    "{order:?} is not a permutation of 0..{n}"
                )));
            }
        }
        let edges = (0..n).flat_map(|a| (a + 1..n).map(move |b| (order[a], order[b])));
        Self::new(n, edges)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges_one_based(&self) -> Vec<[usize; 2]> {
        self.edges.iter().map(|&(k, j)| [k + 1, j + 1]).collect()
    }

    pub fn has_edge(&self, k: usize, j: usize) -> bool {
        self.edges.contains(&(k, j))
    }

    /// Sorted parents of `j`.
    pub fn parents(&self, j: usize) -> &[usize] {
        &self.parents[j]
    }

    /// Sorted children of `j`.
    pub fn children(&self, j: usize) -> &[usize] {
        &self.children[j]
    }

    pub fn topo_order(&self) -> &[usize] {
        &self.topo_order
    }

    /// Checks that `order` is a permutation placing every parent before its child.
    pub fn is_valid_order(&self, order: &[usize]) -> bool {
        if order.len() != self.n_nodes {
            return false;
        }
        let mut position = vec![usize::MAX; self.n_nodes];
        for (p, &k) in order.iter().enumerate() {
            if k >= self.n_nodes || position[k] != usize::MAX {
                return false;
            }
            position[k] = p;
        }
        self.edges.iter().all(|&(k, j)| position[k] < position[j])
    }

    /// The graph the score model conditions on under `variant`.
    pub fn apply_variant(&self, variant: &GraphVariant) -> Result<Dag> {
        match variant {
            GraphVariant::TrueDag | GraphVariant::Pooled => Ok(self.clone()),
            GraphVariant::Empty => Dag::empty(self.n_nodes),
            GraphVariant::CompleteFromOrder(order) => {
                let order = if order.is_empty() {
                    self.topo_order.clone()
                } else {
                    order.clone()
                };
                if !self.is_valid_order(&order) {
                    return Err(Error::InvalidOrder(format!(
                        "{order:?} is not a causal order of the graph"
                    )));
                }
                Dag::complete_from_order(&order)
            }
        }
    }
}

/// Which graph the score model is allowed to use.
///
/// `Pooled` keeps the true graph; the EM driver additionally zeroes every
/// domain's intervention targets. An empty order in `CompleteFromOrder` means
/// "the true graph's topological order".
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum GraphVariant {
    #[default]
    TrueDag,
    Empty,
    CompleteFromOrder(Vec<usize>),
    Pooled,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chain4() -> Dag {
        Dag::from_one_based(4, &[[1, 2], [2, 3], [3, 4]]).unwrap()
    }

    #[test]
    fn chain_topo_order() {
        let dag = chain4();
        assert_eq!(dag.topo_order(), &[0, 1, 2, 3]);
        assert_eq!(dag.edges_one_based(), vec![[1, 2], [2, 3], [3, 4]]);
    }

    #[test]
    fn empty_graph_has_no_parents() {
        let dag = Dag::new(3, []).unwrap();
        assert!((0..3).all(|j| dag.parents(j).is_empty()));
    }

    #[test]
    fn two_cycle_is_rejected() {
        let err = Dag::from_one_based(2, &[[1, 2], [2, 1]]).unwrap_err();
        assert!(matches!(err, Error::Cycle { .. }));
    }

    #[test]
    fn out_of_range_and_self_loop() {
        assert!(matches!(
            Dag::new(3, [(0, 3)]),
            Err(Error::NodeIndex { index: 3, n_nodes: 3 })
        ));
        assert!(matches!(Dag::new(3, [(1, 1)]), Err(Error::SelfLoop(1))));
        assert!(Dag::from_one_based(3, &[[0, 1]]).is_err());
    }

    #[test]
    fn parents_queries() {
        let dag = chain4();
        assert_eq!(dag.parents(2), &[1]);
        assert!(dag.parents(0).is_empty());
        assert_eq!(dag.children(1), &[2]);
        let complete = dag
            .apply_variant(&GraphVariant::CompleteFromOrder(vec![0, 1, 2, 3]))
            .unwrap();
        assert_eq!(complete.parents(3), &[0, 1, 2]);
    }

    #[test]
    fn variants() {
        let dag = chain4();
        assert_eq!(dag.apply_variant(&GraphVariant::TrueDag).unwrap(), dag);
        let empty = dag.apply_variant(&GraphVariant::Empty).unwrap();
        assert_eq!((empty.n_nodes(), empty.n_edges()), (4, 0));
        let complete = dag
            .apply_variant(&GraphVariant::CompleteFromOrder(vec![]))
            .unwrap();
        assert_eq!(complete.n_edges(), 6);
        assert!(dag
            .apply_variant(&GraphVariant::CompleteFromOrder(vec![1, 0, 2, 3]))
            .is_err());
        assert!(dag
            .apply_variant(&GraphVariant::CompleteFromOrder(vec![0, 0, 2, 3]))
            .is_err());
    }

    #[test]
    fn smallest_index_tie_breaking() {
        let dag = Dag::new(4, [(3, 0), (2, 1)]).unwrap();
        assert_eq!(dag.topo_order(), &[2, 1, 3, 0]);
    }

    fn random_dag() -> impl Strategy<Value = Dag> {
        (1usize..9).prop_flat_map(|n| {
            (
                Just(n),
                proptest::collection::vec(any::<bool>(), n * (n - 1) / 2),
                Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
            )
                .prop_map(|(n, mask, perm)| {
                    let pairs = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b)));
                    let edges: Vec<_> = pairs
                        .zip(mask)
                        .filter(|(_, keep)| *keep)
                        .map(|((a, b), _)| (perm[a], perm[b]))
                        .collect();
                    Dag::new(n, edges).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn topo_order_visits_parents_first(dag in random_dag()) {
            let mut visited = vec![false; dag.n_nodes()];
            for &j in dag.topo_order() {
                prop_assert!(dag.parents(j).iter().all(|&k| visited[k]));
                visited[j] = true;
            }
            prop_assert!(visited.iter().all(|&v| v));
        }

        #[test]
        fn parent_child_lists_match_edges(dag in random_dag()) {
            for (k, j) in dag.edges() {
                prop_assert!(dag.parents(j).contains(&k));
                prop_assert!(dag.children(k).contains(&j));
            }
            let n_par: usize = (0..dag.n_nodes()).map(|j| dag.parents(j).len()).sum();
            prop_assert_eq!(n_par, dag.n_edges());
        }

        #[test]
        fn complete_variant_edge_count(dag in random_dag()) {
            let n = dag.n_nodes();
            let complete = dag.apply_variant(&GraphVariant::CompleteFromOrder(vec![])).unwrap();
            prop_assert_eq!(complete.n_edges(), n * (n - 1) / 2);
            prop_assert_eq!(dag.apply_variant(&GraphVariant::TrueDag).unwrap(), dag.clone());
            for (k, j) in dag.edges() {
                prop_assert!(complete.has_edge(k, j));
            }
        }
    }
}
