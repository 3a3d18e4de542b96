//! Type-preserving graph isomorphism and canonical labelling.

use super::Molecule3D;

/// Colour refinement to the coarsest equitable partition.
///
/// Colours are ranks of (old colour, sorted neighbour colours) signatures, so
/// the result depends only on the input colouring up to relabelling.
fn refine(adj: &[Vec<usize>], colors: &mut [usize]) {
    let n = colors.len();
    let mut distinct = count_distinct(colors);
    loop {
        let sigs: Vec<(usize, Vec<usize>)> = (0..n)
            .map(|i| {
                let mut nb: Vec<usize> = adj[i].iter().map(|&j| colors[j]).collect();
                nb.sort_unstable();
                (colors[i], nb)
            })
            .collect();
        let mut sorted: Vec<&(usize, Vec<usize>)> = sigs.iter().collect();
        sorted.sort();
        sorted.dedup();
        for i in 0..n {
            colors[i] = sorted.binary_search(&&sigs[i]).unwrap();
        }
        let now = sorted.len();
        if now == distinct {
            return;
        }
        distinct = now;
    }
}

fn count_distinct(c: &[usize]) -> usize {
    let mut v = c.to_vec();
    v.sort_unstable();
    v.dedup();
    v.len()
}

fn type_colors(types: &[usize]) -> Vec<usize> {
    let mut t = types.to_vec();
    t.sort_unstable();
    t.dedup();
    types.iter().map(|x| t.binary_search(x).unwrap()).collect()
}

struct Canon<'a> {
    adj: &'a [Vec<usize>],
    types: &'a [usize],
    edges: &'a [(usize, usize)],
    best: Option<(Vec<usize>, Vec<usize>)>,
    first: Option<(Vec<usize>, Vec<usize>)>,
    autos: Vec<Vec<usize>>,
}

impl Canon<'_> {
    /// Certificate of a discrete colouring: types in position order then the
    /// sorted relabelled edge list.
    fn certificate(&self, pos: &[usize]) -> Vec<usize> {
        let n = pos.len();
        let mut inv = vec![0; n];
        for (i, &p) in pos.iter().enumerate() {
            inv[p] = i;
        }
        let mut cert: Vec<usize> = inv.iter().map(|&i| self.types[i]).collect();
        let mut e: Vec<(usize, usize)> = self
            .edges
            .iter()
            .map(|&(a, b)| (pos[a].min(pos[b]), pos[a].max(pos[b])))
            .collect();
        e.sort_unstable();
        cert.extend(e.into_iter().flat_map(|(a, b)| [a, b]));
        cert
    }

    fn record_auto(&mut self, pos: &[usize], other: &[usize]) {
        // gamma maps node x to the node holding x's position in `other`.
        let n = pos.len();
        let mut inv = vec![0; n];
        for (i, &p) in other.iter().enumerate() {
            inv[p] = i;
        }
        let gamma: Vec<usize> = (0..n).map(|x| inv[pos[x]]).collect();
        if gamma.iter().enumerate().any(|(i, &g)| i != g) {
            self.autos.push(gamma);
        }
    }

    fn leaf(&mut self, pos: Vec<usize>) {
        let cert = self.certificate(&pos);
        if self.first.is_none() {
            self.first = Some((cert.clone(), pos.clone()));
        }
        let first = self.first.clone().unwrap();
        if first.0 == cert {
            self.record_auto(&pos, &first.1);
        }
        match &self.best {
            Some((b, bpos)) if *b == cert => {
                let bpos = bpos.clone();
                self.record_auto(&pos, &bpos);
            }
            Some((b, _)) if *b < cert => {}
            _ => self.best = Some((cert, pos)),
        }
    }

    fn orbit_roots(&self, fixed: &[usize], n: usize) -> Vec<usize> {
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for g in &self.autos {
            if fixed.iter().any(|&v| g[v] != v) {
                continue;
            }
            for (x, &y) in g.iter().enumerate() {
                let (rx, ry) = (find(&mut parent, x), find(&mut parent, y));
                if rx != ry {
                    parent[rx.max(ry)] = rx.min(ry);
                }
            }
        }
        (0..n).map(|x| find(&mut parent, x)).collect()
    }

    fn search(&mut self, colors: Vec<usize>, path: &mut Vec<usize>) {
        let n = colors.len();
        let mut count = vec![0usize; n];
        for &c in &colors {
            count[c] += 1;
        }
        let Some(target) = (0..n).find(|&c| count[c] > 1) else {
            self.leaf(colors);
            return;
        };
        let cell: Vec<usize> = (0..n).filter(|&i| colors[i] == target).collect();
        let mut explored: Vec<usize> = Vec::new();
        for &v in &cell {
            if !explored.is_empty() {
                let roots = self.orbit_roots(path, n);
                if explored.iter().any(|&u| roots[u] == roots[v]) {
                    continue;
                }
            }
            let mut c: Vec<usize> = colors.iter().map(|&x| 2 * x + 1).collect();
            c[v] = 2 * colors[v];
            refine(self.adj, &mut c);
            path.push(v);
            self.search(c, path);
            path.pop();
            explored.push(v);
        }
    }
}

/// Canonical labelling: `labels[i]` is the canonical position of node `i`.
pub fn canonical_labeling(mol: &Molecule3D) -> Vec<usize> {
    let adj = mol.adjacency();
    let mut colors = type_colors(mol.types());
    refine(&adj, &mut colors);
    let mut c = Canon {
        adj: &adj,
        types: mol.types(),
        edges: mol.edges(),
        best: None,
        first: None,
        autos: Vec::new(),
    };
    c.search(colors, &mut Vec::new());
    c.best.map(|b| b.1).unwrap_or_default()
}

/// String that is equal for two molecules iff they are type-preserving
/// isomorphic; coordinates are ignored.
pub fn canonical_key(mol: &Molecule3D) -> String {
    let pos = canonical_labeling(mol);
    let canon = mol.permuted(&pos);
    let types: Vec<String> = canon.types().iter().map(|t| t.to_string()).collect();
    let edges: Vec<String> = canon
        .edges()
        .iter()
        .map(|(a, b)| format!("{a}-{b}"))
        .collect();
    format!("n{}|t{}|e{}", mol.n(), types.join(","), edges.join(","))
}

/// Joint refined colouring of two graphs, comparable across them.
fn joint_colors(a: &Molecule3D, b: &Molecule3D) -> (Vec<usize>, Vec<usize>) {
    let na = a.n();
    let mut adj = a.adjacency();
    adj.extend(
        b.adjacency()
            .into_iter()
            .map(|l| l.into_iter().map(|j| j + na).collect()),
    );
    let types: Vec<usize> = a.types().iter().chain(b.types()).copied().collect();
    let mut colors = type_colors(&types);
    refine(&adj, &mut colors);
    let cb = colors.split_off(na);
    (colors, cb)
}

/// Outcome of a bounded minimum-cost isomorphism search.
#[derive(Clone, Debug, PartialEq)]
pub struct MinCostMatch {
    /// `map[i]` is the node of `b` matched to node `i` of `a`.
    pub map: Vec<usize>,
    pub cost: f64,
    /// False when the expansion budget ran out before the search finished.
    pub exact: bool,
}

/// Type-preserving isomorphism from `a` to `b` minimising
/// `sum_i cost(i, map[i])` for a nonnegative `cost`, by branch and bound.
///
/// Returns `None` when the graphs are not isomorphic. `budget` caps the
/// number of search-tree expansions; the best mapping found so far is
/// returned when it is exhausted.
pub fn min_cost_isomorphism(
    a: &Molecule3D,
    b: &Molecule3D,
    cost: impl Fn(usize, usize) -> f64,
    budget: usize,
) -> Option<MinCostMatch> {
    let n = a.n();
    if n != b.n() || a.edges().len() != b.edges().len() {
        return None;
    }
    if n == 0 {
        return Some(MinCostMatch {
            map: Vec::new(),
            cost: 0.0,
            exact: true,
        });
    }
    let (ca, cb) = joint_colors(a, b);
    let mut ha = ca.clone();
    let mut hb = cb.clone();
    ha.sort_unstable();
    hb.sort_unstable();
    if ha != hb {
        return None;
    }
    let adj_a = a.adjacency();
    // Order: repeatedly take the unvisited node with the rarest colour, then
    // grow breadth-first so each node after the first has a mapped neighbour.
    let mut freq = vec![0usize; 2 * n + 1];
    for &c in &ca {
        freq[c] += 1;
    }
    let mut order = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    while order.len() < n {
        let start = (0..n)
            .filter(|&i| !seen[i])
            .min_by_key(|&i| (freq[ca[i]], i))
            .unwrap();
        seen[start] = true;
        let mut q = std::collections::VecDeque::from([start]);
        while let Some(u) = q.pop_front() {
            order.push(u);
            for &w in &adj_a[u] {
                if !seen[w] {
                    seen[w] = true;
                    q.push_back(w);
                }
            }
        }
    }
    let candidates: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| cb[j] == ca[i]).collect())
        .collect();
    let cost_tab: Vec<Vec<f64>> = (0..n)
        .map(|i| candidates[i].iter().map(|&j| cost(i, j)).collect())
        .collect();
    let min_cost: Vec<f64> = cost_tab
        .iter()
        .map(|r| r.iter().copied().fold(f64::INFINITY, f64::min))
        .collect();
    // suffix_lb[k] = lower bound on the cost of order[k..].
    let mut suffix_lb = vec![0.0; n + 1];
    for k in (0..n).rev() {
        suffix_lb[k] = suffix_lb[k + 1] + min_cost[order[k]];
    }
    let mut st = Bnb {
        a,
        b,
        order: &order,
        candidates: &candidates,
        cost_tab: &cost_tab,
        suffix_lb: &suffix_lb,
        map: vec![usize::MAX; n],
        used: vec![false; n],
        best: None,
        budget,
        exhausted: false,
    };
    st.go(0, 0.0);
    let exact = !st.exhausted;
    st.best.map(|(cost, map)| MinCostMatch { map, cost, exact })
}

struct Bnb<'a> {
    a: &'a Molecule3D,
    b: &'a Molecule3D,
    order: &'a [usize],
    candidates: &'a [Vec<usize>],
    cost_tab: &'a [Vec<f64>],
    suffix_lb: &'a [f64],
    map: Vec<usize>,
    used: Vec<bool>,
    best: Option<(f64, Vec<usize>)>,
    budget: usize,
    exhausted: bool,
}

impl Bnb<'_> {
    fn go(&mut self, k: usize, acc: f64) {
        if k == self.order.len() {
            if self.best.as_ref().is_none_or(|(c, _)| acc < *c) {
                self.best = Some((acc, self.map.clone()));
            }
            return;
        }
        let u = self.order[k];
        let mut opts: Vec<(f64, usize)> = self.candidates[u]
            .iter()
            .zip(&self.cost_tab[u])
            .filter(|(j, _)| !self.used[**j])
            .map(|(&j, &c)| (c, j))
            .collect();
        opts.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        for (c, j) in opts {
            if self.budget == 0 {
                self.exhausted = true;
                return;
            }
            self.budget -= 1;
            let bound = acc + c + self.suffix_lb[k + 1];
            if let Some((best, _)) = &self.best {
                if bound >= *best {
                    // Options are sorted by cost, so later ones cannot do better.
                    break;
                }
            }
            if !self.consistent(k, u, j) {
                continue;
            }
            self.map[u] = j;
            self.used[j] = true;
            self.go(k + 1, acc + c);
            self.used[j] = false;
            self.map[u] = usize::MAX;
            if self.exhausted {
                return;
            }
        }
    }

    fn consistent(&self, k: usize, u: usize, j: usize) -> bool {
        self.order[..k]
            .iter()
            .all(|&w| self.a.has_edge(u, w) == self.b.has_edge(j, self.map[w]))
    }
}

/// One type-preserving isomorphism from `a` to `b`, if any.
pub fn find_isomorphism(a: &Molecule3D, b: &Molecule3D) -> Option<Vec<usize>> {
    min_cost_isomorphism(a, b, |_, _| 0.0, usize::MAX).map(|m| m.map)
}

pub fn graph_isomorphic(a: &Molecule3D, b: &Molecule3D) -> bool {
    find_isomorphism(a, b).is_some()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mol(types: Vec<usize>, edges: Vec<(usize, usize)>) -> Molecule3D {
        let n = types.len();
        Molecule3D::new(types, edges, vec![[0.0; 3]; n]).unwrap()
    }

    #[test]
    fn identical_and_relabelled() {
        let m = mol(vec![0, 1, 0, 2, 0], vec![(0, 1), (1, 2), (2, 3), (1, 4)]);
        assert!(graph_isomorphic(&m, &m));
        let p = m.permuted(&[3, 0, 4, 1, 2]);
        assert!(graph_isomorphic(&m, &p));
        assert_eq!(canonical_key(&m), canonical_key(&p));
    }

    #[test]
    fn type_change_breaks_isomorphism() {
        let m = mol(vec![0, 1, 0], vec![(0, 1), (1, 2)]);
        let t = mol(vec![0, 1, 1], vec![(0, 1), (1, 2)]);
        assert!(!graph_isomorphic(&m, &t));
        assert_ne!(canonical_key(&m), canonical_key(&t));
    }

    #[test]
    fn path_and_star_differ() {
        let path = mol(vec![0; 4], vec![(0, 1), (1, 2), (2, 3)]);
        let star = mol(vec![0; 4], vec![(0, 1), (0, 2), (0, 3)]);
        assert!(!graph_isomorphic(&path, &star));
        assert_ne!(canonical_key(&path), canonical_key(&star));
    }

    #[test]
    fn regular_graphs_refinement_cannot_split() {
        // Hexagon vs two triangles: both 2-regular, refinement alone is stuck.
        let hex = mol(vec![0; 6], (0..6).map(|i| (i, (i + 1) % 6)).collect());
        let tri = mol(
            vec![0; 6],
            vec![(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)],
        );
        assert!(!graph_isomorphic(&hex, &tri));
        assert_ne!(canonical_key(&hex), canonical_key(&tri));
        let hex2 = hex.permuted(&[2, 4, 0, 5, 1, 3]);
        assert_eq!(canonical_key(&hex), canonical_key(&hex2));
    }

    #[test]
    fn min_cost_prefers_nearest_match() {
        let a = Molecule3D::new(vec![0, 0], vec![(0, 1)], vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        let b = a.permuted(&[1, 0]);
        let m = min_cost_isomorphism(
            &a,
            &b,
            |i, j| {
                let (p, q) = (a.coords()[i], b.coords()[j]);
                (0..3).map(|k| (p[k] - q[k]).powi(2)).sum()
            },
            1000,
        )
        .unwrap();
        assert_eq!(m.map, vec![1, 0]);
        assert_eq!(m.cost, 0.0);
        assert!(m.exact);
    }
}
