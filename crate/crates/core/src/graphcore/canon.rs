//! Canonical node ordering for small undirected graphs.
//!
//! Nodes are ordered by degree (descending); ties are resolved by colour
//! refinement and, where refinement stalls, by searching for the ordering
//! whose sorted edge list is lexicographically smallest. The result depends
//! only on the isomorphism class, never on the input labelling.

/// Symmetrized adjacency view used by the search.
struct View<'a> {
    n: usize,
    adj: &'a [bool],
}

impl View<'_> {
    fn linked(&self, a: usize, b: usize) -> bool {
        a != b && (self.adj[a * self.n + b] || self.adj[b * self.n + a])
    }
}

type Partition = Vec<Vec<usize>>;

/// Returns the local node indices in canonical order: `order[k]` is the node
/// placed at canonical position `k`.
pub fn canonical_order(n: usize, adj: &[bool]) -> Vec<usize> {
    assert_eq!(adj.len(), n * n, "adjacency must be n x n");
    if n == 0 {
        return Vec::new();
    }
    let view = View { n, adj };
    let degree = |a: usize| (0..n).filter(|&b| view.linked(a, b)).count();
    let mut by_degree: Vec<(usize, usize)> = (0..n).map(|a| (degree(a), a)).collect();
    by_degree.sort_by(|x, y| y.0.cmp(&x.0));
    let mut cells: Partition = Vec::new();
    for (i, &(d, a)) in by_degree.iter().enumerate() {
        if i > 0 && by_degree[i - 1].0 == d {
            cells.last_mut().expect("nonempty").push(a);
        } else {
            cells.push(vec![a]);
        }
    }
    let cells = refine(&view, cells);
    let mut best: Option<(Vec<(usize, usize)>, Vec<usize>)> = None;
    search(&view, cells, &mut best);
    best.expect("at least one leaf").1
}

/// Sorted undirected edge list after relabelling by `order`.
pub fn relabelled_edges(n: usize, adj: &[bool], order: &[usize]) -> Vec<(usize, usize)> {
    let view = View { n, adj };
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if view.linked(order[i], order[j]) {
                out.push((i, j));
            }
        }
    }
    out
}

fn refine(view: &View, mut cells: Partition) -> Partition {
    loop {
        let mut cell_of = vec![0; view.n];
        for (c, cell) in cells.iter().enumerate() {
            for &a in cell {
                cell_of[a] = c;
            }
        }
        let mut next: Partition = Vec::with_capacity(cells.len());
        let mut split = false;
        for cell in &cells {
            if cell.len() == 1 {
                next.push(cell.clone());
                continue;
            }
            let mut keyed: Vec<(Vec<usize>, usize)> = cell
                .iter()
                .map(|&a| {
                    let mut sig = vec![0; cells.len()];
                    for b in 0..view.n {
                        if view.linked(a, b) {
                            sig[cell_of[b]] += 1;
                        }
                    }
                    (sig, a)
                })
                .collect();
            // Stable sort keeps the incoming order within equal signatures.
            keyed.sort_by(|x, y| y.0.cmp(&x.0));
            let mut start = 0;
            for k in 1..=keyed.len() {
                if k == keyed.len() || keyed[k].0 != keyed[start].0 {
                    next.push(keyed[start..k].iter().map(|p| p.1).collect());
                    start = k;
                }
            }
            split |= keyed[0].0 != keyed[keyed.len() - 1].0;
        }
        cells = next;
        if !split {
            return cells;
        }
    }
}

/// True when every cell is a clique or an independent set and every pair of
/// cells is fully joined or fully separated: then all orderings within cells
/// give the same edge list.
fn homogeneous(view: &View, cells: &Partition) -> bool {
    for (x, cx) in cells.iter().enumerate() {
        for cy in &cells[x..] {
            let mut seen: Option<bool> = None;
            for &a in cx {
                for &b in cy {
                    if a == b {
                        continue;
                    }
                    let l = view.linked(a, b);
                    if *seen.get_or_insert(l) != l {
                        return false;
                    }
                }
            }
        }
    }
    true
}

fn search(view: &View, cells: Partition, best: &mut Option<(Vec<(usize, usize)>, Vec<usize>)>) {
    if cells.iter().all(|c| c.len() == 1) || homogeneous(view, &cells) {
        let order: Vec<usize> = cells.into_iter().flatten().collect();
        let key = relabelled_edges(view.n, view.adj, &order);
        if best.as_ref().is_none_or(|(k, _)| key < *k) {
            *best = Some((key, order));
        }
        return;
    }
    let target = cells.iter().position(|c| c.len() > 1).expect("non-discrete");
    for &v in &cells[target] {
        let mut next = cells.clone();
        let rest: Vec<usize> = cells[target].iter().copied().filter(|&a| a != v).collect();
        next.splice(target..=target, [vec![v], rest]);
        search(view, refine(view, next), best);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn adj_from(n: usize, edges: &[(usize, usize)]) -> Vec<bool> {
        let mut a = vec![false; n * n];
        for &(i, j) in edges {
            a[i * n + j] = true;
            a[j * n + i] = true;
        }
        a
    }

    fn permute(n: usize, adj: &[bool], perm: &[usize]) -> Vec<bool> {
        let mut out = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                out[perm[i] * n + perm[j]] = adj[i * n + j];
            }
        }
        out
    }

    #[test]
    fn star_hub_first() {
        let adj = adj_from(4, &[(3, 0), (3, 1), (3, 2)]);
        assert_eq!(canonical_order(4, &adj)[0], 3);
    }

    #[test]
    fn empty_and_complete_graphs_are_cheap() {
        let n = 12;
        assert_eq!(canonical_order(n, &vec![false; n * n]).len(), n);
        let full: Vec<bool> = (0..n * n).map(|k| k / n != k % n).collect();
        assert_eq!(relabelled_edges(n, &full, &canonical_order(n, &full)).len(), n * (n - 1) / 2);
    }

    #[test]
    fn cycles_with_symmetry() {
        let n = 10;
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        let adj = adj_from(n, &edges);
        let key = relabelled_edges(n, &adj, &canonical_order(n, &adj));
        let mut rng = rng_for(3, "cyc");
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let p = permute(n, &adj, &perm);
        assert_eq!(relabelled_edges(n, &p, &canonical_order(n, &p)), key);
    }

    proptest! {
        #[test]
        fn invariant_under_relabelling(n in 1usize..11, p in 0.0f64..1.0, seed in 0u64..10_000) {
            let mut rng = rng_for(seed, "canon");
            let mut adj = vec![false; n * n];
            for i in 0..n {
                for j in i + 1..n {
                    if rng.random_bool(p) {
                        adj[i * n + j] = true;
                        adj[j * n + i] = true;
                    }
                }
            }
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let q = permute(n, &adj, &perm);
            let a = relabelled_edges(n, &adj, &canonical_order(n, &adj));
            let b = relabelled_edges(n, &q, &canonical_order(n, &q));
            prop_assert_eq!(a, b);
        }
    }
}
