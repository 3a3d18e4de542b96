use super::molecule::components_of;
use super::{bfs_order, GenerationTrace, MolError, Molecule3D};

/// One (fragments, linker) decomposition of a molecule.
///
/// `full` holds the fragment nodes first (in their original relative order)
/// followed by the linker nodes, so fragment indices coincide in `fragments`
/// and `full`. `anchors.0` lies in fragment 1, the component of `fragments`
/// that contains node 0 in freshly cut samples. `cut_edges[k]` is
/// `(anchor_k, linker node)` in `full` indexing.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkerSample {
    pub fragments: Molecule3D,
    pub linker: Molecule3D,
    pub full: Molecule3D,
    pub anchors: (usize, usize),
    pub cut_edges: [(usize, usize); 2],
    pub trace: Option<GenerationTrace>,
}

/// A double cut expressed in the indexing of the original molecule.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct DoubleCut {
    /// Bridges as `(fragment endpoint, linker endpoint)`.
    pub cuts: [(usize, usize); 2],
    pub linker_nodes: Vec<usize>,
}

impl LinkerSample {
    /// Number of fragment nodes; linker nodes occupy `n_frag()..full.n()`.
    pub fn n_frag(&self) -> usize {
        self.fragments.n()
    }

    pub fn n_linker(&self) -> usize {
        self.linker.n()
    }

    /// Node indices of the fragment component containing `node`.
    pub fn fragment_component(&self, node: usize) -> Vec<usize> {
        let comp = self.fragments.components();
        (0..self.n_frag())
            .filter(|&i| comp[i] == comp[node])
            .collect()
    }

    /// Checks the structural invariants tying the parts together.
    pub fn check(&self) -> Result<(), MolError> {
        let nf = self.n_frag();
        let err = |m: &str| Err(MolError::InvalidSample(m.to_string()));
        if self.full.n() != nf + self.linker.n() || self.linker.n() == 0 {
            return err("node counts of fragments, linker and full disagree");
        }
        let idx: Vec<usize> = (0..nf).collect();
        if self.full.subgraph(&idx) != self.fragments {
            return err("fragments are not the leading induced subgraph of full");
        }
        let lidx: Vec<usize> = (nf..self.full.n()).collect();
        if self.full.subgraph(&lidx) != self.linker {
            return err("linker is not the trailing induced subgraph of full");
        }
        if self.fragments.num_components() != 2 {
            return err("fragments must form exactly two components");
        }
        if self.linker.num_components() != 1 {
            return err("linker is not connected");
        }
        let (a1, a2) = self.anchors;
        let comp = self.fragments.components();
        if a1 >= nf || a2 >= nf || comp[a1] == comp[a2] {
            return err("anchors must lie one per fragment");
        }
        let cross: Vec<(usize, usize)> = self
            .full
            .edges()
            .iter()
            .copied()
            .filter(|&(a, b)| a < nf && b >= nf)
            .collect();
        let mut want: Vec<(usize, usize)> = self.cut_edges.to_vec();
        want.sort_unstable();
        if cross != want || self.cut_edges[0].0 != a1 || self.cut_edges[1].0 != a2 {
            return err("cut edges do not match the fragment-linker bonds");
        }
        Ok(())
    }

    /// The same decomposition with fragment roles exchanged and the trace
    /// recomputed.
    pub fn swapped(&self) -> Result<LinkerSample, MolError> {
        let mut s = self.clone();
        s.anchors = (self.anchors.1, self.anchors.0);
        s.cut_edges = [self.cut_edges[1], self.cut_edges[0]];
        s.trace = None;
        let t = bfs_order(&s)?;
        s.trace = Some(t);
        Ok(s)
    }

    pub fn with_trace(mut self) -> Result<LinkerSample, MolError> {
        let t = bfs_order(&self)?;
        self.trace = Some(t);
        Ok(self)
    }
}

/// Bridges of an undirected graph, each as `(min, max)`, sorted.
pub fn bridges(mol: &Molecule3D) -> Vec<(usize, usize)> {
    let n = mol.n();
    let adj = mol.adjacency();
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0; n];
    let mut out = Vec::new();
    let mut timer = 0;
    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        // Iterative DFS: (node, parent, next neighbour slot).
        let mut stack = vec![(root, usize::MAX, 0usize)];
        disc[root] = timer;
        low[root] = timer;
        timer += 1;
        while let Some(&mut (u, parent, ref mut slot)) = stack.last_mut() {
            if *slot < adj[u].len() {
                let w = adj[u][*slot];
                *slot += 1;
                if w == parent {
                    continue;
                }
                if disc[w] == usize::MAX {
                    disc[w] = timer;
                    low[w] = timer;
                    timer += 1;
                    stack.push((w, u, 0));
                } else {
                    low[u] = low[u].min(disc[w]);
                }
            } else {
                stack.pop();
                if let Some(&(p, _, _)) = stack.last() {
                    low[p] = low[p].min(low[u]);
                    if low[u] > disc[p] {
                        out.push((p.min(u), p.max(u)));
                    }
                }
            }
        }
    }
    out.sort_unstable();
    out
}

/// Every pair of bridges whose removal leaves a middle (linker) component
/// of at least `min_linker` nodes between two fragments of at least
/// `min_frag` nodes each.
pub fn double_cuts(mol: &Molecule3D, min_frag: usize, min_linker: usize) -> Vec<DoubleCut> {
    let br = bridges(mol);
    let mut out = Vec::new();
    for x in 0..br.len() {
        for y in x + 1..br.len() {
            let kept: Vec<(usize, usize)> = mol
                .edges()
                .iter()
                .copied()
                .filter(|e| *e != br[x] && *e != br[y])
                .collect();
            let comp = components_of(mol.n(), &kept);
            let ncomp = comp.iter().max().map_or(0, |m| m + 1);
            if ncomp != 3 {
                continue;
            }
            let (e1, e2) = (br[x], br[y]);
            // The middle component touches both cut edges.
            let touches = |c: usize, e: (usize, usize)| comp[e.0] == c || comp[e.1] == c;
            let Some(mid) = (0..3).find(|&c| touches(c, e1) && touches(c, e2)) else {
                continue;
            };
            let orient = |e: (usize, usize)| {
                if comp[e.0] == mid {
                    (e.1, e.0)
                } else {
                    (e.0, e.1)
                }
            };
            let (c1, c2) = (orient(e1), orient(e2));
            if comp[c1.0] == mid || comp[c2.0] == mid {
                continue;
            }
            let size = |c: usize| comp.iter().filter(|&&k| k == c).count();
            if size(mid) < min_linker || size(comp[c1.0]) < min_frag || size(comp[c2.0]) < min_frag
            {
                continue;
            }
            // Fragment 1 holds the smallest original node index.
            let first_frag = comp.iter().position(|&k| k != mid).unwrap_or(0);
            let cuts = if comp[c1.0] == comp[first_frag] {
                [c1, c2]
            } else {
                [c2, c1]
            };
            let linker_nodes = (0..mol.n()).filter(|&i| comp[i] == mid).collect();
            out.push(DoubleCut { cuts, linker_nodes });
        }
    }
    out.sort();
    out
}

/// Builds the sample for one double cut (without trace).
pub fn sample_from_cut(mol: &Molecule3D, cut: &DoubleCut) -> LinkerSample {
    let mut is_linker = vec![false; mol.n()];
    for &i in &cut.linker_nodes {
        is_linker[i] = true;
    }
    let order: Vec<usize> = (0..mol.n())
        .filter(|&i| !is_linker[i])
        .chain(cut.linker_nodes.iter().copied())
        .collect();
    let mut pos = vec![0; mol.n()];
    for (k, &i) in order.iter().enumerate() {
        pos[i] = k;
    }
    let nf = mol.n() - cut.linker_nodes.len();
    let full = mol.subgraph(&order);
    let fragments = full.subgraph(&(0..nf).collect::<Vec<_>>());
    let linker = full.subgraph(&(nf..mol.n()).collect::<Vec<_>>());
    let [c1, c2] = cut.cuts;
    LinkerSample {
        fragments,
        linker,
        full,
        anchors: (pos[c1.0], pos[c2.0]),
        cut_edges: [(pos[c1.0], pos[c1.1]), (pos[c2.0], pos[c2.1])],
        trace: None,
    }
}

/// All double-cut decompositions of a molecule, in a deterministic order.
pub fn cut_linker(mol: &Molecule3D, min_frag: usize, min_linker: usize) -> Vec<LinkerSample> {
    double_cuts(mol, min_frag, min_linker)
        .iter()
        .map(|c| sample_from_cut(mol, c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(n: usize) -> Molecule3D {
        Molecule3D::new(
            vec![0; n],
            (1..n).map(|i| (i - 1, i)).collect(),
            vec![[0.0; 3]; n],
        )
        .unwrap()
    }

    #[test]
    fn path_of_five_has_six_cuts() {
        assert_eq!(cut_linker(&path(5), 1, 1).len(), 6);
    }

    #[test]
    fn triangle_has_no_cuts() {
        let tri =
            Molecule3D::new(vec![0; 3], vec![(0, 1), (1, 2), (0, 2)], vec![[0.0; 3]; 3]).unwrap();
        assert!(bridges(&tri).is_empty());
        assert!(cut_linker(&tri, 1, 1).is_empty());
    }

    #[test]
    fn path_of_six_min_linker_two() {
        // Middle segment i+1..=j-1 for cut edges (i,i+1),(j,j+1) with j-i >= 2.
        let mut want = Vec::new();
        for i in 0..5 {
            for j in i + 1..5 {
                if j - i >= 2 {
                    want.push(((i, i + 1), (j + 1, j)));
                }
            }
        }
        let got: Vec<_> = double_cuts(&path(6), 1, 2)
            .iter()
            .map(|c| (c.cuts[0], c.cuts[1]))
            .collect();
        let mut want_sorted = want.clone();
        want_sorted.sort();
        let mut got_sorted = got.clone();
        got_sorted.sort();
        assert_eq!(got_sorted, want_sorted);
    }

    #[test]
    fn samples_satisfy_invariants() {
        for s in cut_linker(&path(7), 1, 2) {
            s.check().unwrap();
            assert!(s.fragment_component(s.anchors.0).contains(&0));
        }
    }
}
