//! Correlative sparsity: variable graph, chordal extension and maximal cliques.

use std::collections::BTreeSet;

use crate::poly::PolynomialProgram;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliqueStructure {
    pub nvars: usize,
    /// Edges `(i, j)` with `i < j` of the sparsity graph.
    pub edges: BTreeSet<(usize, usize)>,
    /// Edges added by the chordal extension.
    pub fill_edges: BTreeSet<(usize, usize)>,
    /// Minimum-degree elimination order, a perfect elimination order of the extension.
    pub order: Vec<usize>,
    /// Maximal cliques, each sorted.
    pub cliques: Vec<Vec<usize>>,
    /// Clique assigned to each inequality / equality.
    pub theta_ineq: Vec<usize>,
    pub theta_eq: Vec<usize>,
}

fn edge(i: usize, j: usize) -> (usize, usize) {
    if i < j {
        (i, j)
    } else {
        (j, i)
    }
}

fn adjacency(n: usize, edges: &BTreeSet<(usize, usize)>) -> Vec<BTreeSet<usize>> {
    let mut adj = vec![BTreeSet::new(); n];
    for &(i, j) in edges {
        adj[i].insert(j);
        adj[j].insert(i);
    }
    adj
}

/// Every constraint's support becomes a clique of the graph; the objective
/// only links variables sharing a monomial.
pub fn sparsity_graph(program: &PolynomialProgram) -> BTreeSet<(usize, usize)> {
    let mut edges = BTreeSet::new();
    for (m, _) in program.objective.terms() {
        let vars: Vec<usize> = m.variables().collect();
        for a in 0..vars.len() {
            for b in (a + 1)..vars.len() {
                edges.insert(edge(vars[a], vars[b]));
            }
        }
    }
    for f in program.inequalities.iter().chain(&program.equalities) {
        let vars: Vec<usize> = f.support().into_iter().collect();
        for a in 0..vars.len() {
            for b in (a + 1)..vars.len() {
                edges.insert(edge(vars[a], vars[b]));
            }
        }
    }
    edges
}

/// Minimum-degree elimination (ties to the lowest index). Returns the order
/// and the fill edges.
pub fn min_degree_elimination(
    n: usize,
    edges: &BTreeSet<(usize, usize)>,
) -> (Vec<usize>, BTreeSet<(usize, usize)>) {
    let mut adj = adjacency(n, edges);
    let mut alive: BTreeSet<usize> = (0..n).collect();
    let mut order = Vec::with_capacity(n);
    let mut fill = BTreeSet::new();
    while let Some(&v) = alive.iter().min_by_key(|&&v| (adj[v].len(), v)) {
        let nbrs: Vec<usize> = adj[v].iter().copied().collect();
        for a in 0..nbrs.len() {
            for b in (a + 1)..nbrs.len() {
                let (x, y) = (nbrs[a], nbrs[b]);
                if adj[x].insert(y) {
                    adj[y].insert(x);
                    fill.insert(edge(x, y));
                }
            }
        }
        for &u in &nbrs {
            adj[u].remove(&v);
        }
        adj[v].clear();
        alive.remove(&v);
        order.push(v);
    }
    (order, fill)
}

/// True when, for every vertex, its neighbours later in `order` are pairwise adjacent.
pub fn is_perfect_elimination_order(
    n: usize,
    edges: &BTreeSet<(usize, usize)>,
    order: &[usize],
) -> bool {
    if order.len() != n {
        return false;
    }
    let mut pos = vec![usize::MAX; n];
    for (k, &v) in order.iter().enumerate() {
        if v >= n || pos[v] != usize::MAX {
            return false;
        }
        pos[v] = k;
    }
    let adj = adjacency(n, edges);
    order.iter().all(|&v| {
        let later: Vec<usize> = adj[v].iter().copied().filter(|&u| pos[u] > pos[v]).collect();
        later.iter().enumerate().all(|(a, &x)| {
            later[a + 1..].iter().all(|&y| edges.contains(&edge(x, y)))
        })
    })
}

pub fn correlative_sparsity(program: &PolynomialProgram) -> CliqueStructure {
    let n = program.nvars;
    let edges = sparsity_graph(program);
    let (order, fill_edges) = min_degree_elimination(n, &edges);
    let chordal: BTreeSet<(usize, usize)> = edges.union(&fill_edges).copied().collect();
    let adj = adjacency(n, &chordal);
    let mut pos = vec![0; n];
    for (k, &v) in order.iter().enumerate() {
        pos[v] = k;
    }
    let mut candidates: Vec<Vec<usize>> = order
        .iter()
        .map(|&v| {
            let mut c: Vec<usize> = adj[v].iter().copied().filter(|&u| pos[u] > pos[v]).collect();
            c.push(v);
            c.sort_unstable();
            c
        })
        .collect();
    // Larger first so that subsets are dropped in one pass.
    candidates.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    let mut cliques: Vec<Vec<usize>> = Vec::new();
    for c in candidates {
        let covered = cliques.iter().any(|k| c.iter().all(|v| k.binary_search(v).is_ok()));
        if !covered {
            cliques.push(c);
        }
    }
    cliques.sort();
    let assign = |support: BTreeSet<usize>| {
        cliques
            .iter()
            .position(|k| support.iter().all(|v| k.binary_search(v).is_ok()))
            .expect("chordal extension keeps every constraint support inside a clique")
    };
    let theta_ineq = program.inequalities.iter().map(|f| assign(f.support())).collect();
    let theta_eq = program.equalities.iter().map(|f| assign(f.support())).collect();
    CliqueStructure {
        nvars: n,
        edges,
        fill_edges,
        order,
        cliques,
        theta_ineq,
        theta_eq,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::{Monomial, SparsePolynomial};
    use proptest::prelude::*;

    fn program_with_supports(n: usize, supports: &[&[usize]]) -> PolynomialProgram {
        let mut p = PolynomialProgram::new(n, SparsePolynomial::linear(0.0, &vec![1.0; n]));
        for s in supports {
            let mut f = SparsePolynomial::constant(n, 1.0);
            for &v in *s {
                f.add_term(Monomial::from_pairs(vec![(v as u32, 2)]), -1.0);
            }
            p.inequalities.push(f);
        }
        p
    }

    #[test]
    fn two_variables_single_clique() {
        let p = program_with_supports(2, &[&[0, 1]]);
        let cs = correlative_sparsity(&p);
        assert_eq!(cs.cliques, vec![vec![0, 1]]);
        assert_eq!(cs.theta_ineq, vec![0]);
    }

    #[test]
    fn cycle_gets_chorded() {
        let p = program_with_supports(4, &[&[0, 1], &[1, 2], &[2, 3], &[3, 0]]);
        let cs = correlative_sparsity(&p);
        assert_eq!(cs.fill_edges.len(), 1);
        assert_eq!(cs.cliques.len(), 2);
        let all: BTreeSet<_> = cs.edges.union(&cs.fill_edges).copied().collect();
        assert!(is_perfect_elimination_order(4, &all, &cs.order));
        assert!(!is_perfect_elimination_order(4, &cs.edges, &[0, 1, 2, 3]));
    }

    #[test]
    fn complete_graph_one_clique() {
        let mut p = program_with_supports(4, &[]);
        p.objective = SparsePolynomial::from_terms(
            4,
            (0..4).flat_map(|i| ((i + 1)..4).map(move |j| (Monomial::from_pairs(vec![(i, 1), (j, 1)]), 1.0))),
        );
        let cs = correlative_sparsity(&p);
        assert_eq!(cs.cliques, vec![vec![0, 1, 2, 3]]);
    }

    proptest! {
        #[test]
        fn random_graphs_yield_valid_structure(supports in prop::collection::vec(prop::collection::btree_set(0usize..8, 1..4), 1..10)) {
            let sup: Vec<Vec<usize>> = supports.iter().map(|s| s.iter().copied().collect()).collect();
            let refs: Vec<&[usize]> = sup.iter().map(|s| s.as_slice()).collect();
            let p = program_with_supports(8, &refs);
            let cs = correlative_sparsity(&p);
            let all: BTreeSet<_> = cs.edges.union(&cs.fill_edges).copied().collect();
            prop_assert!(is_perfect_elimination_order(8, &all, &cs.order));
            for (k, s) in sup.iter().enumerate() {
                let c = &cs.cliques[cs.theta_ineq[k]];
                prop_assert!(s.iter().all(|v| c.contains(v)));
            }
            for (a, ca) in cs.cliques.iter().enumerate() {
                for (b, cb) in cs.cliques.iter().enumerate() {
                    if a != b {
                        prop_assert!(!ca.iter().all(|v| cb.contains(v)));
                    }
                }
                for (i, &x) in ca.iter().enumerate() {
                    for &y in &ca[i + 1..] {
                        prop_assert!(all.contains(&(x, y)));
                    }
                }
            }
        }
    }
}
