use serde::{Deserialize, Serialize};

use super::MolError;

/// Typed undirected graph with one 3D position per node.
///
/// Edges are stored as `(i, j)` with `i < j`, sorted ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct Molecule3D {
    types: Vec<usize>,
    edges: Vec<(usize, usize)>,
    coords: Vec<[f64; 3]>,
}

impl Molecule3D {
    pub fn new(
        types: Vec<usize>,
        edges: Vec<(usize, usize)>,
        coords: Vec<[f64; 3]>,
    ) -> Result<Self, MolError> {
        let n = types.len();
        if coords.len() != n {
            return Err(MolError::Malformed(format!(
                "{} coordinates for {n} nodes",
                coords.len()
            )));
        }
        if let Some(i) = coords.iter().position(|c| c.iter().any(|x| !x.is_finite())) {
            return Err(MolError::Malformed(format!(
                "non-finite coordinate at node {i}"
            )));
        }
        let mut norm = Vec::with_capacity(edges.len());
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(MolError::Malformed(format!(
                    "edge ({a}, {b}) out of range for {n} nodes"
                )));
            }
            if a == b {
                return Err(MolError::Malformed(format!("self-loop at node {a}")));
            }
            norm.push((a.min(b), a.max(b)));
        }
        norm.sort_unstable();
        if let Some(w) = norm.windows(2).find(|w| w[0] == w[1]) {
            return Err(MolError::Malformed(format!("duplicate edge {:?}", w[0])));
        }
        Ok(Molecule3D {
            types,
            edges: norm,
            coords,
        })
    }

    pub fn empty() -> Self {
        Molecule3D {
            types: Vec::new(),
            edges: Vec::new(),
            coords: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.types.len()
    }

    pub fn types(&self) -> &[usize] {
        &self.types
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.binary_search(&(a.min(b), a.max(b))).is_ok()
    }

    /// Sorted neighbour lists.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for l in &mut adj {
            l.sort_unstable();
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n()];
        for &(a, b) in &self.edges {
            d[a] += 1;
            d[b] += 1;
        }
        d
    }

    /// Component id per node; ids are numbered by smallest member index.
    pub fn components(&self) -> Vec<usize> {
        components_of(self.n(), &self.edges)
    }

    pub fn num_components(&self) -> usize {
        self.components().iter().max().map_or(0, |m| m + 1)
    }

    /// Induced subgraph on `nodes`, reindexed in the given order.
    pub fn subgraph(&self, nodes: &[usize]) -> Molecule3D {
        let mut map = vec![usize::MAX; self.n()];
        for (k, &i) in nodes.iter().enumerate() {
            map[i] = k;
        }
        let mut edges: Vec<(usize, usize)> = self
            .edges
            .iter()
            .filter(|(a, b)| map[*a] != usize::MAX && map[*b] != usize::MAX)
            .map(|&(a, b)| (map[a].min(map[b]), map[a].max(map[b])))
            .collect();
        edges.sort_unstable();
        Molecule3D {
            types: nodes.iter().map(|&i| self.types[i]).collect(),
            edges,
            coords: nodes.iter().map(|&i| self.coords[i]).collect(),
        }
    }

    /// Applies `r -> r Q^T + t` to every coordinate.
    pub fn transformed(&self, q: &[[f64; 3]; 3], t: [f64; 3]) -> Molecule3D {
        let coords = self
            .coords
            .iter()
            .map(|r| {
                let mut o = [0.0; 3];
                for (a, oa) in o.iter_mut().enumerate() {
                    *oa = q[a][0] * r[0] + q[a][1] * r[1] + q[a][2] * r[2] + t[a];
                }
                o
            })
            .collect();
        Molecule3D {
            types: self.types.clone(),
            edges: self.edges.clone(),
            coords,
        }
    }

    #[cfg(test)]
    pub(crate) fn with_coords(&self, coords: Vec<[f64; 3]>) -> Molecule3D {
        debug_assert_eq!(coords.len(), self.n());
        Molecule3D {
            types: self.types.clone(),
            edges: self.edges.clone(),
            coords,
        }
    }

    /// Relabels nodes: node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Molecule3D {
        let n = self.n();
        let mut types = vec![0; n];
        let mut coords = vec![[0.0; 3]; n];
        for i in 0..n {
            types[perm[i]] = self.types[i];
            coords[perm[i]] = self.coords[i];
        }
        let mut edges: Vec<(usize, usize)> = self
            .edges
            .iter()
            .map(|&(a, b)| (perm[a].min(perm[b]), perm[a].max(perm[b])))
            .collect();
        edges.sort_unstable();
        Molecule3D {
            types,
            edges,
            coords,
        }
    }
}

pub(crate) fn components_of(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    let mut out = vec![0; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if label[r] == usize::MAX {
            label[r] = next;
            next += 1;
        }
        out[i] = label[r];
    }
    out
}

/// Maximum degree per atom type.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValenceTable {
    max_degree: Vec<usize>,
}

impl Default for ValenceTable {
    fn default() -> Self {
        ValenceTable {
            max_degree: vec![4, 3, 2, 1],
        }
    }
}

impl ValenceTable {
    pub fn new(max_degree: Vec<usize>) -> Result<Self, MolError> {
        if max_degree.is_empty() || max_degree.contains(&0) {
            return Err(MolError::Malformed("valence entries must be >= 1".into()));
        }
        Ok(ValenceTable { max_degree })
    }

    pub fn num_types(&self) -> usize {
        self.max_degree.len()
    }

    pub fn max_degree(&self, ty: usize) -> usize {
        self.max_degree.get(ty).copied().unwrap_or(0)
    }

    pub fn max_valence(&self) -> usize {
        self.max_degree.iter().copied().max().unwrap_or(0)
    }

    pub fn entries(&self) -> &[usize] {
        &self.max_degree
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ValencyViolation {
    pub node: usize,
    pub degree: usize,
    pub max: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub valency_violations: Vec<ValencyViolation>,
    pub unknown_types: Vec<usize>,
    pub duplicate_edges: usize,
    /// More than one connected component.
    pub not_linked: bool,
}

impl ValidationReport {
    pub fn valency_ok(&self) -> bool {
        self.valency_violations.is_empty() && self.unknown_types.is_empty()
    }

    pub fn is_valid(&self) -> bool {
        self.valency_ok() && self.duplicate_edges == 0 && !self.not_linked
    }
}

pub fn validate(mol: &Molecule3D, table: &ValenceTable) -> ValidationReport {
    let deg = mol.degrees();
    let mut valency_violations = Vec::new();
    let mut unknown_types = Vec::new();
    for (i, (&t, &d)) in mol.types().iter().zip(&deg).enumerate() {
        if t >= table.num_types() {
            unknown_types.push(i);
        } else if d > table.max_degree(t) {
            valency_violations.push(ValencyViolation {
                node: i,
                degree: d,
                max: table.max_degree(t),
            });
        }
    }
    let duplicate_edges = mol.edges().windows(2).filter(|w| w[0] == w[1]).count();
    ValidationReport {
        valency_violations,
        unknown_types,
        duplicate_edges,
        not_linked: mol.num_components() > 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(n: usize, ty: usize) -> Molecule3D {
        Molecule3D::new(
            vec![ty; n],
            (1..n).map(|i| (i - 1, i)).collect(),
            (0..n).map(|i| [i as f64 * 1.5, 0.0, 0.0]).collect(),
        )
        .unwrap()
    }

    #[test]
    fn path_is_valid() {
        assert!(validate(&path(3, 0), &ValenceTable::default()).is_valid());
    }

    #[test]
    fn over_valent_node_listed() {
        let star = Molecule3D::new(
            vec![0; 6],
            (1..6).map(|i| (0, i)).collect(),
            vec![[0.0; 3]; 6],
        )
        .unwrap();
        let r = validate(&star, &ValenceTable::default());
        assert_eq!(
            r.valency_violations,
            vec![ValencyViolation {
                node: 0,
                degree: 5,
                max: 4
            }]
        );
        assert!(!r.is_valid());
    }

    #[test]
    fn two_components_not_linked() {
        let m = Molecule3D::new(vec![0; 4], vec![(0, 1), (2, 3)], vec![[0.0; 3]; 4]).unwrap();
        let r = validate(&m, &ValenceTable::default());
        assert!(r.not_linked && r.valency_ok() && !r.is_valid());
    }

    #[test]
    fn constructor_rejects_bad_structure() {
        assert!(Molecule3D::new(vec![0; 2], vec![(0, 0)], vec![[0.0; 3]; 2]).is_err());
        assert!(Molecule3D::new(vec![0; 2], vec![(0, 1), (1, 0)], vec![[0.0; 3]; 2]).is_err());
        assert!(Molecule3D::new(vec![0; 2], vec![(0, 2)], vec![[0.0; 3]; 2]).is_err());
        assert!(Molecule3D::new(vec![0; 2], vec![], vec![[0.0; 3]; 1]).is_err());
        assert!(Molecule3D::new(vec![0], vec![], vec![[f64::NAN, 0.0, 0.0]]).is_err());
        assert!(ValenceTable::new(vec![2, 0]).is_err());
    }

    #[test]
    fn components_numbered_by_first_member() {
        let m = Molecule3D::new(vec![0; 5], vec![(1, 4), (0, 3)], vec![[0.0; 3]; 5]).unwrap();
        assert_eq!(m.components(), vec![0, 1, 2, 0, 1]);
    }
}
