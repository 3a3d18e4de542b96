//! JSON-lines records for molecules and samples.
//!
//! Floats are written with 17 significant digits so every value round-trips
//! bit-exactly.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use super::{GenerationTrace, LinkerSample, MolError, Molecule3D};

/// `{:.16e}` is one leading digit plus 16 fractional digits.
pub fn f17(x: f64) -> Box<RawValue> {
    RawValue::from_string(format!("{x:.16e}")).expect("formatted float is valid JSON")
}

pub fn ser_f64<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    f17(*x).serialize(s)
}

pub fn ser_vec3<S: Serializer>(v: &[f64; 3], s: S) -> Result<S::Ok, S::Error> {
    let mut seq = s.serialize_seq(Some(3))?;
    for x in v {
        seq.serialize_element(&f17(*x))?;
    }
    seq.end()
}

fn ser_coords<S: Serializer>(c: &[[f64; 3]], s: S) -> Result<S::Ok, S::Error> {
    let mut seq = s.serialize_seq(Some(c.len()))?;
    for v in c {
        seq.serialize_element(&[f17(v[0]), f17(v[1]), f17(v[2])])?;
    }
    seq.end()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MolRecord {
    types: Vec<usize>,
    edges: Vec<(usize, usize)>,
    #[serde(serialize_with = "ser_coords")]
    coords: Vec<[f64; 3]>,
}

impl MolRecord {
    fn from_mol(m: &Molecule3D) -> Self {
        MolRecord {
            types: m.types().to_vec(),
            edges: m.edges().to_vec(),
            coords: m.coords().to_vec(),
        }
    }

    fn into_mol(self) -> Result<Molecule3D, MolError> {
        Molecule3D::new(self.types, self.edges, self.coords)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    fragments: MolRecord,
    linker: MolRecord,
    full: MolRecord,
    anchors: (usize, usize),
    cut_edges: [(usize, usize); 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trace: Option<TraceRecord>,
}

/// Trace wrapper that writes positions with 17 significant digits.
#[derive(Serialize, Deserialize)]
#[serde(transparent)]
struct TraceRecord(#[serde(serialize_with = "ser_trace")] GenerationTrace);

fn ser_trace<S: Serializer>(t: &GenerationTrace, s: S) -> Result<S::Ok, S::Error> {
    use super::TraceEvent as E;
    #[derive(Serialize)]
    #[serde(tag = "kind", rename_all = "snake_case")]
    enum Out<'a> {
        Anchors {
            a1: usize,
            a2: usize,
        },
        Types {
            types: &'a [usize],
        },
        Focus {
            node: usize,
        },
        Edge {
            focus: usize,
            target: super::EdgeTarget,
        },
        Coord {
            node: usize,
            #[serde(serialize_with = "ser_vec3")]
            pos: [f64; 3],
        },
        Update {
            positions: Vec<(usize, [Box<RawValue>; 3])>,
        },
    }
    #[derive(Serialize)]
    struct Wrap<'a> {
        events: Vec<Out<'a>>,
    }
    let events = t
        .events
        .iter()
        .map(|e| match e {
            E::Anchors { a1, a2 } => Out::Anchors { a1: *a1, a2: *a2 },
            E::Types { types } => Out::Types { types },
            E::Focus { node } => Out::Focus { node: *node },
            E::Edge { focus, target } => Out::Edge {
                focus: *focus,
                target: *target,
            },
            E::Coord { node, pos } => Out::Coord {
                node: *node,
                pos: *pos,
            },
            E::Update { positions } => Out::Update {
                positions: positions
                    .iter()
                    .map(|(i, p)| (*i, [f17(p[0]), f17(p[1]), f17(p[2])]))
                    .collect(),
            },
        })
        .collect();
    Wrap { events }.serialize(s)
}

pub fn molecule_to_json(m: &Molecule3D) -> String {
    serde_json::to_string(&MolRecord::from_mol(m)).expect("molecule serializes")
}

pub fn trace_to_json(t: &GenerationTrace) -> String {
    serde_json::to_string(&TraceRecord(t.clone())).expect("trace serializes")
}

pub fn sample_to_json(s: &LinkerSample) -> String {
    let rec = SampleRecord {
        fragments: MolRecord::from_mol(&s.fragments),
        linker: MolRecord::from_mol(&s.linker),
        full: MolRecord::from_mol(&s.full),
        anchors: s.anchors,
        cut_edges: s.cut_edges,
        trace: s.trace.clone().map(TraceRecord),
    };
    serde_json::to_string(&rec).expect("sample serializes")
}

fn parse_line<T: DeserializeOwned>(text: &str, line: usize) -> Result<T, MolError> {
    serde_json::from_str(text).map_err(|e| MolError::Parse {
        line,
        detail: e.to_string(),
    })
}

pub fn molecule_from_json(text: &str, line: usize) -> Result<Molecule3D, MolError> {
    parse_line::<MolRecord>(text, line)?
        .into_mol()
        .map_err(|e| MolError::Parse {
            line,
            detail: e.to_string(),
        })
}

pub fn trace_from_json(text: &str, line: usize) -> Result<GenerationTrace, MolError> {
    parse_line::<TraceRecord>(text, line).map(|t| t.0)
}

pub fn sample_from_json(text: &str, line: usize) -> Result<LinkerSample, MolError> {
    let r: SampleRecord = parse_line(text, line)?;
    let wrap = |field: &str, e: MolError| MolError::Parse {
        line,
        detail: format!("field `{field}`: {e}"),
    };
    let s = LinkerSample {
        fragments: r.fragments.into_mol().map_err(|e| wrap("fragments", e))?,
        linker: r.linker.into_mol().map_err(|e| wrap("linker", e))?,
        full: r.full.into_mol().map_err(|e| wrap("full", e))?,
        anchors: r.anchors,
        cut_edges: r.cut_edges,
        trace: r.trace.map(|t| t.0),
    };
    s.check().map_err(|e| MolError::Parse {
        line,
        detail: e.to_string(),
    })?;
    Ok(s)
}

/// Reads one record per non-empty line; line numbers in errors are 1-based.
pub fn read_lines<T>(
    reader: impl BufRead,
    parse: impl Fn(&str, usize) -> Result<T, MolError>,
) -> Result<Vec<T>, MolError> {
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| MolError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(&line, k + 1)?);
    }
    Ok(out)
}

pub fn read_samples(reader: impl BufRead) -> Result<Vec<LinkerSample>, MolError> {
    read_lines(reader, sample_from_json)
}

pub fn write_samples(mut w: impl Write, samples: &[LinkerSample]) -> Result<(), MolError> {
    for s in samples {
        writeln!(w, "{}", sample_to_json(s)).map_err(|e| MolError::Io(e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::cut_linker;

    fn sample() -> LinkerSample {
        let n = 6;
        let m = Molecule3D::new(
            vec![0, 1, 2, 0, 3, 0],
            (1..n).map(|i| (i - 1, i)).collect(),
            (0..n)
                .map(|i| [0.1 * i as f64, 1.0 / 3.0, -2.0e-7 * i as f64])
                .collect(),
        )
        .unwrap();
        cut_linker(&m, 1, 2).remove(0).with_trace().unwrap()
    }

    #[test]
    fn molecule_round_trip_is_exact() {
        let m = sample().full;
        let text = molecule_to_json(&m);
        assert_eq!(molecule_from_json(&text, 1).unwrap(), m);
        assert!(text.contains("3.3333333333333331e-1"), "{text}");
    }

    #[test]
    fn sample_round_trip_with_trace() {
        let s = sample();
        let text = sample_to_json(&s);
        assert_eq!(sample_from_json(&text, 1).unwrap(), s);
    }

    #[test]
    fn field_order_is_irrelevant() {
        let text = r#"{"coords":[[0,0,0],[1.5,0,0]],"edges":[[1,0]],"types":[0,1]}"#;
        let m = molecule_from_json(text, 1).unwrap();
        assert_eq!(m.edges(), &[(0, 1)]);
    }

    #[test]
    fn missing_field_named_with_line() {
        let text = "\n{\"types\":[0],\"edges\":[]}\n";
        let err = read_lines(text.as_bytes(), molecule_from_json).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("coords"), "{msg}");
    }

    #[test]
    fn n_lines_give_n_samples() {
        let s = sample();
        let mut buf = Vec::new();
        write_samples(&mut buf, &[s.clone(), s.clone(), s]).unwrap();
        assert_eq!(read_samples(buf.as_slice()).unwrap().len(), 3);
    }
}
