//! Deterministic synthetic molecules and (fragments, linker) triplets.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::molgraph::io::write_samples;
use crate::molgraph::{cut_linker, LinkerSample, MolError, Molecule3D, ValenceTable};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid generator spec: {0}")]
    Spec(String),
    #[error("sample {index}: no valid decomposition after {attempts} molecules")]
    Budget { index: usize, attempts: usize },
    #[error(transparent)]
    Mol(#[from] MolError),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub min_nodes: usize,
    pub max_nodes: usize,
    /// Max degree per atom type.
    pub valence: Vec<usize>,
    pub bond_length: f64,
    pub relaxation_iterations: usize,
    /// Chance of adding one ring-closing bond.
    pub ring_probability: f64,
    pub min_frag: usize,
    pub min_linker: usize,
    /// Molecules tried per sample before giving up.
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            min_nodes: 6,
            max_nodes: 14,
            valence: ValenceTable::default().entries().to_vec(),
            bond_length: 1.5,
            relaxation_iterations: 300,
            ring_probability: 0.2,
            min_frag: 1,
            min_linker: 2,
            max_attempts: 200,
            seed: 0,
        }
    }
}

/// Bonded pairs relax toward `bond_length`; other pairs repel below this.
pub const REPULSION_RANGE: f64 = 1.0;
/// Smallest interatomic distance an emitted molecule may have.
pub const MIN_DISTANCE: f64 = 0.5;

impl GenSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Spec(m.to_string()));
        ValenceTable::new(self.valence.clone()).map_err(|e| SynthError::Spec(e.to_string()))?;
        if self.min_nodes < 2 || self.min_nodes > self.max_nodes {
            return bad("node-count range must satisfy 2 <= min <= max");
        }
        if self.min_nodes < 2 * self.min_frag + self.min_linker {
            return bad("min_nodes cannot hold two fragments and a linker");
        }
        if !(self.bond_length.is_finite() && self.bond_length > MIN_DISTANCE) {
            return bad("bond_length must exceed the minimum distance");
        }
        if !(0.0..=1.0).contains(&self.ring_probability) {
            return bad("ring_probability must lie in [0, 1]");
        }
        if self.min_frag == 0 || self.min_linker == 0 || self.max_attempts == 0 {
            return bad("min_frag, min_linker and max_attempts must be positive");
        }
        if self.max_nodes > 1 && !self.valence.iter().any(|&v| v >= 2) {
            return bad("valence table needs a type of degree at least 2");
        }
        Ok(())
    }

    fn table(&self) -> ValenceTable {
        ValenceTable::new(self.valence.clone()).expect("validated spec")
    }
}

fn unit_vector<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(&mut *rng));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            return v.map(|x| x / n);
        }
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Gradient descent on the spring-plus-repulsion energy
/// `sum_bonded (d - L)^2 + sum_other max(0, 1 - d)^2`.
pub fn relax(
    coords: &mut [[f64; 3]],
    edges: &[(usize, usize)],
    bond_length: f64,
    iterations: usize,
) {
    let n = coords.len();
    let mut bonded = vec![false; n * n];
    for &(a, b) in edges {
        bonded[a * n + b] = true;
        bonded[b * n + a] = true;
    }
    let step = 0.1;
    for _ in 0..iterations {
        let mut grad = vec![[0.0; 3]; n];
        for i in 0..n {
            for j in i + 1..n {
                let d = dist(coords[i], coords[j]).max(1e-9);
                let coef = if bonded[i * n + j] {
                    2.0 * (d - bond_length)
                } else if d < REPULSION_RANGE {
                    -2.0 * (REPULSION_RANGE - d)
                } else {
                    continue;
                };
                for a in 0..3 {
                    let g = coef * (coords[i][a] - coords[j][a]) / d;
                    grad[i][a] += g;
                    grad[j][a] -= g;
                }
            }
        }
        for (c, g) in coords.iter_mut().zip(&grad) {
            for a in 0..3 {
                c[a] -= step * g[a];
            }
        }
    }
}

/// Random valence-respecting tree with an optional ring closure, embedded
/// in 3D and relaxed.
pub fn gen_molecule<R: Rng>(spec: &GenSpec, rng: &mut R) -> Molecule3D {
    let table = spec.table();
    let n = rng.random_range(spec.min_nodes..=spec.max_nodes);
    let ntypes = table.num_types();
    let bonding: Vec<usize> = (0..ntypes).filter(|&t| table.max_degree(t) >= 1).collect();
    let branching: Vec<usize> = (0..ntypes).filter(|&t| table.max_degree(t) >= 2).collect();
    let mut types = vec![branching[rng.random_range(0..branching.len())]];
    let mut degree = vec![0usize];
    let mut coords = vec![[0.0; 3]];
    let mut edges = Vec::new();
    for k in 1..n {
        let open: Vec<usize> = (0..k)
            .filter(|&i| degree[i] < table.max_degree(types[i]))
            .collect();
        let parent = open[rng.random_range(0..open.len())];
        let free_after: usize = (0..k)
            .map(|i| table.max_degree(types[i]) - degree[i])
            .sum::<usize>()
            - 1;
        let pool = if free_after == 0 && k + 1 < n {
            &branching
        } else {
            &bonding
        };
        let t = pool[rng.random_range(0..pool.len())];
        let mut best = [0.0; 3];
        let mut best_gap = f64::NEG_INFINITY;
        for _ in 0..8 {
            let u = unit_vector(rng);
            let p = [0, 1, 2].map(|a| coords[parent][a] + spec.bond_length * u[a]);
            let gap = (0..k)
                .filter(|&i| i != parent)
                .map(|i| dist(p, coords[i]))
                .fold(f64::INFINITY, f64::min);
            if gap > best_gap {
                best_gap = gap;
                best = p;
            }
        }
        types.push(t);
        degree.push(1);
        degree[parent] += 1;
        coords.push(best);
        edges.push((parent, k));
    }
    if rng.random_bool(spec.ring_probability) {
        let mut cands = Vec::new();
        let adj_dist = graph_distances(n, &edges);
        for i in 0..n {
            for j in i + 1..n {
                let free = degree[i] < table.max_degree(types[i])
                    && degree[j] < table.max_degree(types[j]);
                if free
                    && adj_dist[i * n + j] >= 4
                    && dist(coords[i], coords[j]) < 3.0 * spec.bond_length
                {
                    cands.push((i, j));
                }
            }
        }
        if !cands.is_empty() {
            let (i, j) = cands[rng.random_range(0..cands.len())];
            edges.push((i, j));
        }
    }
    relax(
        &mut coords,
        &edges,
        spec.bond_length,
        spec.relaxation_iterations,
    );
    Molecule3D::new(types, edges, coords).expect("generator output is well formed")
}

fn graph_distances(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut d = vec![usize::MAX; n * n];
    for s in 0..n {
        let mut queue = std::collections::VecDeque::from([s]);
        d[s * n + s] = 0;
        while let Some(u) = queue.pop_front() {
            for &w in &adj[u] {
                if d[s * n + w] == usize::MAX {
                    d[s * n + w] = d[s * n + u] + 1;
                    queue.push_back(w);
                }
            }
        }
    }
    d
}

fn min_pair_distance(m: &Molecule3D) -> f64 {
    let c = m.coords();
    let mut best = f64::INFINITY;
    for i in 0..c.len() {
        for j in i + 1..c.len() {
            best = best.min(dist(c[i], c[j]));
        }
    }
    best
}

/// Independent stream for sample `index` under `seed`.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// One sample: molecules are drawn until one has a valid double cut, then
/// a decomposition is chosen uniformly and its trace attached.
fn gen_sample(spec: &GenSpec, index: usize) -> Result<(LinkerSample, usize), SynthError> {
    let mut rng = sample_rng(spec.seed, index);
    for attempt in 1..=spec.max_attempts {
        let mol = gen_molecule(spec, &mut rng);
        if min_pair_distance(&mol) <= MIN_DISTANCE {
            continue;
        }
        let cuts = cut_linker(&mol, spec.min_frag, spec.min_linker);
        if cuts.is_empty() {
            continue;
        }
        let pick = rng.random_range(0..cuts.len());
        let sample = cuts
            .into_iter()
            .nth(pick)
            .expect("index in range")
            .with_trace()?;
        return Ok((sample, attempt));
    }
    Err(SynthError::Budget {
        index,
        attempts: spec.max_attempts,
    })
}

/// Sidecar record describing how a dataset was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub spec: GenSpec,
    pub count: usize,
    pub molecules_drawn: usize,
    pub total_nodes: usize,
    pub max_linker_nodes: usize,
}

/// `n` samples generated in parallel with per-sample streams; the output is
/// independent of thread count.
pub fn gen_dataset(n: usize, spec: &GenSpec) -> Result<(Vec<LinkerSample>, Manifest), SynthError> {
    spec.validate()?;
    if n == 0 {
        return Err(SynthError::Spec("dataset size must be at least 1".into()));
    }
    let results: Vec<Result<(LinkerSample, usize), SynthError>> = (0..n)
        .into_par_iter()
        .map(|i| gen_sample(spec, i))
        .collect();
    let mut samples = Vec::with_capacity(n);
    let mut drawn = 0;
    for r in results {
        let (s, k) = r?;
        drawn += k;
        samples.push(s);
    }
    let manifest = Manifest {
        seed: spec.seed,
        spec: spec.clone(),
        count: n,
        molecules_drawn: drawn,
        total_nodes: samples.iter().map(|s| s.full.n()).sum(),
        max_linker_nodes: samples.iter().map(|s| s.n_linker()).max().unwrap_or(0),
    };
    Ok((samples, manifest))
}

pub fn manifest_path(data: &Path) -> PathBuf {
    let mut name = data
        .file_name()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.json");
    data.with_file_name(name)
}

/// Writes the JSON-lines dataset and its manifest next to it.
pub fn write_dataset(
    path: &Path,
    samples: &[LinkerSample],
    manifest: &Manifest,
) -> Result<(), SynthError> {
    let io = |e: std::io::Error| SynthError::Io(format!("{}: {e}", path.display()));
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    write_samples(&mut f, samples)?;
    f.flush().map_err(io)?;
    let mpath = manifest_path(path);
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(&mpath, text + "\n")
        .map_err(|e| SynthError::Io(format!("{}: {e}", mpath.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{replay, validate};

    #[test]
    fn two_node_bond_relaxes_to_rest_length() {
        let spec = GenSpec {
            min_nodes: 2,
            max_nodes: 2,
            min_linker: 0,
            ring_probability: 0.0,
            ..GenSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = gen_molecule(&spec, &mut rng);
        assert_eq!(m.edges(), &[(0, 1)]);
        let d = dist(m.coords()[0], m.coords()[1]);
        assert!((d - 1.5).abs() < 0.01, "bond length {d}");
    }

    #[test]
    fn relaxation_moves_stretched_bond_to_rest_length() {
        let mut c = vec![[0.0; 3], [3.0, 0.0, 0.0]];
        relax(&mut c, &[(0, 1)], 1.5, 200);
        assert!((dist(c[0], c[1]) - 1.5).abs() < 1e-6);
    }

    #[test]
    fn generated_molecules_respect_valence() {
        let spec = GenSpec::default();
        let table = spec.table();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let m = gen_molecule(&spec, &mut rng);
            assert!((6..=14).contains(&m.n()));
            let r = validate(&m, &table);
            assert!(r.is_valid(), "{r:?}");
        }
    }

    #[test]
    fn dataset_samples_satisfy_invariants() {
        let spec = GenSpec {
            seed: 11,
            ..GenSpec::default()
        };
        let (samples, manifest) = gen_dataset(40, &spec).unwrap();
        assert_eq!(samples.len(), 40);
        assert_eq!(manifest.count, 40);
        for s in &samples {
            s.check().unwrap();
            assert!(s.n_linker() >= 2);
            let rebuilt = replay(s.trace.as_ref().unwrap(), &s.fragments).unwrap();
            assert_eq!(rebuilt, s.full);
            assert!(min_pair_distance(&s.full) > MIN_DISTANCE);
            assert!(s.full.coords().iter().flatten().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn dataset_is_deterministic_and_thread_independent() {
        let spec = GenSpec {
            seed: 3,
            ..GenSpec::default()
        };
        let (a, _) = gen_dataset(12, &spec).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let (b, _) = pool.install(|| gen_dataset(12, &spec)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = GenSpec {
            min_nodes: 3,
            ..GenSpec::default()
        };
        assert!(matches!(bad.validate(), Err(SynthError::Spec(_))));
        assert!(matches!(
            gen_dataset(0, &GenSpec::default()),
            Err(SynthError::Spec(_))
        ));
    }

    #[test]
    fn cycle_only_molecules_never_yield_samples() {
        let ring = Molecule3D::new(
            vec![1; 5],
            vec![(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)],
            (0..5).map(|i| [i as f64 * 1.5, 0.0, 0.0]).collect(),
        )
        .unwrap();
        assert!(cut_linker(&ring, 1, 2).is_empty());
    }
}
