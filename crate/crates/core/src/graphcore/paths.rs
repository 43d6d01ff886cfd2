use std::collections::VecDeque;

use super::Graph;

/// All-pairs hop distances. Unreachable pairs hold [`ShortestPathTable::UNREACHABLE`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShortestPathTable {
    n: usize,
    dist: Vec<u32>,
}

impl ShortestPathTable {
    /// Larger than any realizable hop count.
    pub const UNREACHABLE: u32 = u32::MAX;

    pub(crate) fn from_raw(n: usize, dist: Vec<u32>) -> Self {
        debug_assert_eq!(dist.len(), n * n);
        Self { n, dist }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.dist[i * self.n + j]
    }

    pub fn reachable(&self, i: usize, j: usize) -> bool {
        self.get(i, j) != Self::UNREACHABLE
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.dist
    }
}

pub(crate) fn bfs_dense(n: usize, adjacency: &[bool]) -> ShortestPathTable {
    let mut dist = vec![ShortestPathTable::UNREACHABLE; n * n];
    let mut queue = VecDeque::with_capacity(n);
    for s in 0..n {
        let row = &mut dist[s * n..(s + 1) * n];
        row[s] = 0;
        queue.clear();
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            let du = row[u];
            for v in 0..n {
                if adjacency[u * n + v] && row[v] == ShortestPathTable::UNREACHABLE {
                    row[v] = du + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    ShortestPathTable::from_raw(n, dist)
}

/// BFS from every node along out-edges.
pub fn bfs_all_pairs(graph: &Graph) -> ShortestPathTable {
    bfs_dense(graph.num_nodes(), graph.adjacency())
}

/// One shortest path from `i` to `j` as its edge list.
///
/// Among all shortest paths the lexicographically smallest node sequence is
/// returned, built greedily by always stepping to the lowest-index neighbour
/// that is one hop closer to `j`. Empty when `j` is unreachable or `i == j`.
pub fn shortest_path_edges(graph: &Graph, spd: &ShortestPathTable, i: usize, j: usize) -> Vec<(usize, usize)> {
    if i == j || !spd.reachable(i, j) {
        return Vec::new();
    }
    let mut path = Vec::with_capacity(spd.get(i, j) as usize);
    let mut cur = i;
    while cur != j {
        let remaining = spd.get(cur, j);
        let next = graph
            .neighbors(cur)
            .find(|&w| spd.get(w, j) == remaining - 1)
            .expect("distance table consistent with adjacency");
        path.push((cur, next));
        cur = next;
    }
    path
}

/// Per-edge weights of the uniform average over *all* shortest `i -> j`
/// paths of the per-path edge mean.
///
/// Edge `(a, b)` gets `sigma(i, a) * sigma(b, j) / (sigma(i, j) * dist(i, j))`,
/// where `sigma` counts shortest paths. The weights sum to 1 for reachable
/// `i != j` and the set is empty otherwise. When the shortest path is unique
/// this is exactly the `1 / |path|` weighting of [`shortest_path_edges`], and
/// unlike any single-path tie-break it does not depend on node numbering.
pub fn shortest_path_edge_weights(
    n: usize,
    adjacency: &[bool],
    spd: &ShortestPathTable,
    i: usize,
    j: usize,
) -> Vec<((usize, usize), f64)> {
    if i == j || !spd.reachable(i, j) {
        return Vec::new();
    }
    let d = spd.get(i, j);
    // sigma_from[a]: number of shortest i -> a paths
    let mut order: Vec<usize> = (0..n).filter(|&a| spd.reachable(i, a)).collect();
    order.sort_by_key(|&a| spd.get(i, a));
    let mut sigma_from = vec![0.0f64; n];
    sigma_from[i] = 1.0;
    for &a in &order {
        if a == i {
            continue;
        }
        let da = spd.get(i, a);
        sigma_from[a] = (0..n)
            .filter(|&p| adjacency[p * n + a] && spd.get(i, p) == da - 1)
            .map(|p| sigma_from[p])
            .sum();
    }
    // sigma_to[b]: number of shortest b -> j paths
    let mut order: Vec<usize> = (0..n).filter(|&b| spd.reachable(b, j)).collect();
    order.sort_by_key(|&b| spd.get(b, j));
    let mut sigma_to = vec![0.0f64; n];
    sigma_to[j] = 1.0;
    for &b in &order {
        if b == j {
            continue;
        }
        let db = spd.get(b, j);
        sigma_to[b] = (0..n)
            .filter(|&q| adjacency[b * n + q] && spd.get(q, j) == db - 1)
            .map(|q| sigma_to[q])
            .sum();
    }
    let total = sigma_from[j] * f64::from(d);
    let mut out = Vec::new();
    for a in 0..n {
        if !spd.reachable(i, a) || !spd.reachable(a, j) {
            continue;
        }
        let da = spd.get(i, a);
        for b in 0..n {
            if adjacency[a * n + b] && spd.reachable(b, j) && da + 1 + spd.get(b, j) == d {
                out.push(((a, b), sigma_from[a] * sigma_to[b] / total));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphcore::Graph;

    #[test]
    fn triangle_all_ones() {
        let g = Graph::from_edges(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let t = bfs_all_pairs(&g);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(t.get(i, j), u32::from(i != j));
            }
        }
    }

    #[test]
    fn chain_distance() {
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(bfs_all_pairs(&g).get(0, 2), 2);
    }

    #[test]
    fn directed_distances_follow_arcs() {
        let mut g = Graph::unlabeled(3, true).unwrap();
        g.add_edge(0, 1, "a").unwrap();
        g.add_edge(1, 2, "b").unwrap();
        let t = bfs_all_pairs(&g);
        assert_eq!(t.get(0, 2), 2);
        assert_eq!(t.get(2, 0), ShortestPathTable::UNREACHABLE);
    }

    #[test]
    fn path_edges_basic_cases() {
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let t = bfs_all_pairs(&g);
        assert_eq!(shortest_path_edges(&g, &t, 0, 1), vec![(0, 1)]);
        assert_eq!(shortest_path_edges(&g, &t, 0, 2), vec![(0, 1), (1, 2)]);
        let g = Graph::from_edges(4, &[(0, 1), (2, 3)]).unwrap();
        let t = bfs_all_pairs(&g);
        assert!(shortest_path_edges(&g, &t, 0, 3).is_empty());
    }

    /// Enumerate every shortest path by DFS and return the lexicographically
    /// smallest node sequence.
    fn smallest_by_enumeration(g: &Graph, t: &ShortestPathTable, i: usize, j: usize) -> Vec<usize> {
        fn walk(g: &Graph, t: &ShortestPathTable, cur: usize, j: usize, acc: &mut Vec<usize>, all: &mut Vec<Vec<usize>>) {
            if cur == j {
                all.push(acc.clone());
                return;
            }
            for w in 0..g.num_nodes() {
                if g.has_edge(cur, w) && t.get(w, j) + 1 == t.get(cur, j) {
                    acc.push(w);
                    walk(g, t, w, j, acc, all);
                    acc.pop();
                }
            }
        }
        let mut all = Vec::new();
        walk(g, t, i, j, &mut vec![i], &mut all);
        all.sort();
        all.swap_remove(0)
    }

    #[test]
    fn diamond_tie_break_matches_enumeration() {
        let g = Graph::from_edges(4, &[(0, 2), (2, 3), (0, 1), (1, 3)]).unwrap();
        let t = bfs_all_pairs(&g);
        let path = shortest_path_edges(&g, &t, 0, 3);
        assert_eq!(path, vec![(0, 1), (1, 3)]);
        let nodes = smallest_by_enumeration(&g, &t, 0, 3);
        assert_eq!(nodes, vec![0, 1, 3]);
    }

    #[test]
    fn edge_weights_average_over_all_paths() {
        let g = Graph::from_edges(4, &[(0, 1), (1, 3), (0, 2), (2, 3)]).unwrap();
        let t = bfs_all_pairs(&g);
        let mut w = shortest_path_edge_weights(4, g.adjacency(), &t, 0, 3);
        w.sort_by(|a, b| a.0.cmp(&b.0));
        let expect = [((0, 1), 0.25), ((0, 2), 0.25), ((1, 3), 0.25), ((2, 3), 0.25)];
        assert_eq!(w.len(), 4);
        for (got, want) in w.iter().zip(expect) {
            assert_eq!(got.0, want.0);
            assert!((got.1 - want.1).abs() < 1e-15);
        }
        // unique path reduces to 1/|SP|
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let t = bfs_all_pairs(&g);
        let w = shortest_path_edge_weights(3, g.adjacency(), &t, 0, 2);
        assert_eq!(w, vec![((0, 1), 0.5), ((1, 2), 0.5)]);
    }
}
