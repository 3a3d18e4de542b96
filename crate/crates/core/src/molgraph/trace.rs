use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{LinkerSample, MolError, Molecule3D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeTarget {
    Node(usize),
    Stop,
}

/// One decoder decision. Node indices use `full` indexing: fragment nodes
/// first, then linker slots in the order given by `Types`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEvent {
    Anchors {
        a1: usize,
        a2: usize,
    },
    Types {
        types: Vec<usize>,
    },
    Focus {
        node: usize,
    },
    Edge {
        focus: usize,
        target: EdgeTarget,
    },
    /// First placement of a node when it joins the current graph.
    Coord {
        node: usize,
        pos: [f64; 3],
    },
    /// Refined positions of the linker nodes in the current graph.
    Update {
        positions: Vec<(usize, [f64; 3])>,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub events: Vec<TraceEvent>,
}

impl GenerationTrace {
    pub fn anchors(&self) -> Option<(usize, usize)> {
        self.events.iter().find_map(|e| match e {
            TraceEvent::Anchors { a1, a2 } => Some((*a1, *a2)),
            _ => None,
        })
    }

    pub fn types(&self) -> Option<&[usize]> {
        self.events.iter().find_map(|e| match e {
            TraceEvent::Types { types } => Some(types.as_slice()),
            _ => None,
        })
    }

    /// Number of edge decisions (including STOP).
    pub fn num_edge_decisions(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, TraceEvent::Edge { .. }))
            .count()
    }
}

/// Breadth-first teacher-forcing order for a sample.
///
/// The queue starts with `(a1, a2)`. Each focus connects to all of its
/// remaining neighbours in ascending index order, then emits STOP and an
/// update of the linker nodes present so far. Linker nodes join the queue on
/// first connection.
pub fn bfs_order(sample: &LinkerSample) -> Result<GenerationTrace, MolError> {
    let nf = sample.n_frag();
    let full = &sample.full;
    let n = full.n();
    let (a1, a2) = sample.anchors;
    if a1 >= nf || a2 >= nf {
        return Err(MolError::InvalidSample(
            "anchor is not a fragment node".into(),
        ));
    }
    let adj = full.adjacency();
    for a in [a1, a2] {
        if !adj[a].iter().any(|&j| j >= nf) {
            return Err(MolError::LinkerNotAttached { anchor: a });
        }
    }
    let mut events = vec![
        TraceEvent::Anchors { a1, a2 },
        TraceEvent::Types {
            types: full.types()[nf..].to_vec(),
        },
    ];
    let mut present: Vec<bool> = (0..n).map(|i| i < nf).collect();
    let mut closed = vec![false; n];
    let mut added: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut queue = VecDeque::from([a1, a2]);
    while let Some(f) = queue.pop_front() {
        events.push(TraceEvent::Focus { node: f });
        for &j in &adj[f] {
            if (f < nf && j < nf) || added[f].contains(&j) || closed[j] {
                continue;
            }
            added[f].push(j);
            added[j].push(f);
            events.push(TraceEvent::Edge {
                focus: f,
                target: EdgeTarget::Node(j),
            });
            if !present[j] {
                present[j] = true;
                events.push(TraceEvent::Coord {
                    node: j,
                    pos: full.coords()[j],
                });
                queue.push_back(j);
            }
        }
        events.push(TraceEvent::Edge {
            focus: f,
            target: EdgeTarget::Stop,
        });
        closed[f] = true;
        let positions = (nf..n)
            .filter(|&i| present[i])
            .map(|i| (i, full.coords()[i]))
            .collect();
        events.push(TraceEvent::Update { positions });
    }
    if let Some(i) = (nf..n).find(|&i| !present[i]) {
        return Err(MolError::InvalidSample(format!(
            "linker node {i} unreachable from the anchors"
        )));
    }
    Ok(GenerationTrace { events })
}

/// Rebuilds the molecule a trace describes on top of `fragments`.
///
/// Linker slots that never receive an edge are dropped and the remaining
/// ones are renumbered in slot order.
pub fn replay(trace: &GenerationTrace, fragments: &Molecule3D) -> Result<Molecule3D, MolError> {
    let nf = fragments.n();
    let bad = |k: usize, m: String| MolError::BadTrace {
        event: k,
        detail: m,
    };
    let mut types: Option<Vec<usize>> = None;
    let mut coords: Vec<Option<[f64; 3]>> = Vec::new();
    let mut edges: Vec<(usize, usize)> = fragments.edges().to_vec();
    for (k, e) in trace.events.iter().enumerate() {
        match e {
            TraceEvent::Anchors { a1, a2 } => {
                if *a1 >= nf || *a2 >= nf {
                    return Err(bad(k, "anchor outside fragments".into()));
                }
            }
            TraceEvent::Types { types: t } => {
                coords = vec![None; t.len()];
                types = Some(t.clone());
            }
            TraceEvent::Focus { .. } => {}
            TraceEvent::Edge { focus, target } => {
                let EdgeTarget::Node(j) = target else {
                    continue;
                };
                let n = nf + coords.len();
                if *focus >= n || *j >= n {
                    return Err(bad(k, format!("edge ({focus}, {j}) out of range")));
                }
                edges.push((*focus, *j));
            }
            TraceEvent::Coord { node, pos } => {
                let slot = node.checked_sub(nf).filter(|s| *s < coords.len());
                let Some(s) = slot else {
                    return Err(bad(k, format!("coordinate for non-linker node {node}")));
                };
                coords[s] = Some(*pos);
            }
            TraceEvent::Update { positions } => {
                for (node, pos) in positions {
                    match node.checked_sub(nf).filter(|s| *s < coords.len()) {
                        Some(s) if coords[s].is_some() => coords[s] = Some(*pos),
                        _ => return Err(bad(k, format!("update of unplaced node {node}"))),
                    }
                }
            }
        }
    }
    let types = types.ok_or_else(|| bad(trace.events.len(), "no types event".into()))?;
    let mut new_index = vec![usize::MAX; nf + types.len()];
    let mut all_types = fragments.types().to_vec();
    let mut all_coords = fragments.coords().to_vec();
    for i in 0..nf {
        new_index[i] = i;
    }
    for (s, c) in coords.iter().enumerate() {
        if let Some(c) = c {
            new_index[nf + s] = all_types.len();
            all_types.push(types[s]);
            all_coords.push(*c);
        }
    }
    let mut remapped = Vec::with_capacity(edges.len());
    for (a, b) in edges {
        if new_index[a] == usize::MAX || new_index[b] == usize::MAX {
            return Err(bad(
                trace.events.len(),
                format!("edge ({a}, {b}) touches an unplaced node"),
            ));
        }
        remapped.push((new_index[a], new_index[b]));
    }
    Molecule3D::new(all_types, remapped, all_coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::cut_linker;

    #[test]
    fn single_node_linker_trace() {
        // Fragments {0} and {1}; linker {2} bonded to both.
        let fragments =
            Molecule3D::new(vec![0, 0], vec![], vec![[0.0; 3], [3.0, 0.0, 0.0]]).unwrap();
        let full = Molecule3D::new(
            vec![0, 0, 1],
            vec![(0, 2), (1, 2)],
            vec![[0.0; 3], [3.0, 0.0, 0.0], [1.5, 0.0, 0.0]],
        )
        .unwrap();
        let s = LinkerSample {
            linker: full.subgraph(&[2]),
            fragments: fragments.clone(),
            full: full.clone(),
            anchors: (0, 1),
            cut_edges: [(0, 2), (1, 2)],
            trace: None,
        };
        let t = bfs_order(&s).unwrap();
        let p = [1.5, 0.0, 0.0];
        use EdgeTarget::*;
        use TraceEvent::*;
        let want = vec![
            Anchors { a1: 0, a2: 1 },
            Types { types: vec![1] },
            Focus { node: 0 },
            Edge {
                focus: 0,
                target: Node(2),
            },
            Coord { node: 2, pos: p },
            Edge {
                focus: 0,
                target: Stop,
            },
            Update {
                positions: vec![(2, p)],
            },
            Focus { node: 1 },
            Edge {
                focus: 1,
                target: Node(2),
            },
            Edge {
                focus: 1,
                target: Stop,
            },
            Update {
                positions: vec![(2, p)],
            },
            Focus { node: 2 },
            Edge {
                focus: 2,
                target: Stop,
            },
            Update {
                positions: vec![(2, p)],
            },
        ];
        assert_eq!(t.events, want);
        assert_eq!(replay(&t, &fragments).unwrap(), full);
    }

    #[test]
    fn replay_reconstructs_cut_paths() {
        let n = 7;
        let path = Molecule3D::new(
            vec![0, 1, 0, 2, 0, 1, 0],
            (1..n).map(|i| (i - 1, i)).collect(),
            (0..n)
                .map(|i| [i as f64, (i * i) as f64 * 0.1, 0.0])
                .collect(),
        )
        .unwrap();
        for s in cut_linker(&path, 1, 2) {
            let t = bfs_order(&s).unwrap();
            assert_eq!(replay(&t, &s.fragments).unwrap(), s.full);
        }
    }

    #[test]
    fn unplaced_slots_are_dropped() {
        let fragments =
            Molecule3D::new(vec![0, 0], vec![], vec![[0.0; 3], [3.0, 0.0, 0.0]]).unwrap();
        let t = GenerationTrace {
            events: vec![
                TraceEvent::Anchors { a1: 0, a2: 1 },
                TraceEvent::Types {
                    types: vec![2, 1, 3],
                },
                TraceEvent::Edge {
                    focus: 0,
                    target: EdgeTarget::Node(3),
                },
                TraceEvent::Coord {
                    node: 3,
                    pos: [1.0, 0.0, 0.0],
                },
                TraceEvent::Edge {
                    focus: 1,
                    target: EdgeTarget::Node(3),
                },
            ],
        };
        let m = replay(&t, &fragments).unwrap();
        assert_eq!(m.types(), &[0, 0, 1]);
        assert_eq!(m.edges(), &[(0, 2), (1, 2)]);
    }
}
