//! Keynode and position CSV files.
//!
//! Keynode files carry `global_id,run_id,x,y,z,d0,...,d{E-1}`; the
//! descriptor dimension is taken from the header. Position files carry
//! `global_id,run_id,x,y,z`. Reals are written in shortest round-trip form,
//! so a write/read cycle is exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{PgatError, Result};
use crate::pose_graph::{Keynode, Position, Trajectory};

const POSITION_COLUMNS: [&str; 5] = ["global_id", "run_id", "x", "y", "z"];

fn parse_error(path: &Path, line: u64, msg: impl Into<String>) -> PgatError {
    PgatError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

pub fn keynode_header(dim: usize) -> String {
    let mut cols: Vec<String> = POSITION_COLUMNS.iter().map(|s| s.to_string()).collect();
    cols.extend((0..dim).map(|e| format!("d{e}")));
    cols.join(",")
}

/// Serializes keynodes in the given order.
pub fn keynodes_csv<'a>(nodes: impl IntoIterator<Item = &'a Keynode>) -> Result<String> {
    let mut out = String::new();
    let mut dim = None;
    for n in nodes {
        match dim {
            None => {
                dim = Some(n.descriptor.len());
                out.push_str(&keynode_header(n.descriptor.len()));
                out.push('\n');
            }
            Some(d) if d != n.descriptor.len() => {
                return Err(PgatError::dim(format!(
                    "keynode {} has {} descriptor entries, expected {d}",
                    n.global_id,
                    n.descriptor.len()
                )))
            }
            _ => {}
        }
        let [x, y, z] = n.position;
        out.push_str(&format!("{},{},{x},{y},{z}", n.global_id, n.run_id));
        for v in &n.descriptor {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    if dim.is_none() {
        return Err(PgatError::Input("no keynodes to write".into()));
    }
    Ok(out)
}

pub fn write_keynodes(path: &Path, trajectory: &Trajectory) -> Result<()> {
    fs::write(path, keynodes_csv(&trajectory.nodes)?).map_err(|e| PgatError::io(path, e))
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, k: usize, name: &str, path: &Path, line: u64) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = rec
        .get(k)
        .ok_or_else(|| parse_error(path, line, format!("missing column {name}")))?;
    raw.trim()
        .parse()
        .map_err(|e| parse_error(path, line, format!("column {name}: `{raw}`: {e}")))
}

fn check_header(headers: &csv::StringRecord, path: &Path) -> Result<()> {
    for (k, want) in POSITION_COLUMNS.iter().enumerate() {
        if headers.get(k).map(str::trim) != Some(*want) {
            return Err(parse_error(
                path,
                1,
                format!("header must start with {}", POSITION_COLUMNS.join(",")),
            ));
        }
    }
    Ok(())
}

/// Parses a keynode file into one trajectory per run id, in order of
/// first appearance of each run.
pub fn parse_keynodes(text: &str, path: &Path) -> Result<Vec<Trajectory>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| parse_error(path, 1, e.to_string()))?
        .clone();
    check_header(&headers, path)?;
    let dim = headers.len() - POSITION_COLUMNS.len();
    for (e, h) in headers.iter().skip(POSITION_COLUMNS.len()).enumerate() {
        if h.trim() != format!("d{e}") {
            return Err(parse_error(path, 1, format!("descriptor column {e} is named `{h}`")));
        }
    }
    if dim == 0 {
        return Err(parse_error(path, 1, "no descriptor columns"));
    }

    let mut runs: Vec<(u32, Vec<Keynode>)> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_error(path, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != headers.len() {
            return Err(parse_error(
                path,
                line,
                format!("{} fields, header has {}", rec.len(), headers.len()),
            ));
        }
        let global_id: u64 = field(&rec, 0, "global_id", path, line)?;
        let run_id: u32 = field(&rec, 1, "run_id", path, line)?;
        let mut position = [0.0; 3];
        for (k, p) in position.iter_mut().enumerate() {
            *p = field(&rec, 2 + k, POSITION_COLUMNS[2 + k], path, line)?;
        }
        let descriptor = (0..dim)
            .map(|e| field(&rec, 5 + e, &format!("d{e}"), path, line))
            .collect::<Result<Vec<f64>>>()?;
        if position.iter().chain(&descriptor).any(|v| !v.is_finite()) {
            return Err(parse_error(path, line, "non-finite value"));
        }
        let node = Keynode {
            global_id,
            run_id,
            position,
            descriptor,
        };
        match runs.iter_mut().find(|(r, _)| *r == run_id) {
            Some((_, nodes)) => {
                let prev = nodes.last().expect("non-empty").global_id;
                if global_id <= prev {
                    return Err(parse_error(
                        path,
                        line,
                        format!("global_id {global_id} follows {prev} in run {run_id}"),
                    ));
                }
                nodes.push(node);
            }
            None => runs.push((run_id, vec![node])),
        }
    }
    if runs.is_empty() {
        return Err(parse_error(path, 1, "no keynode rows"));
    }
    runs.into_iter().map(|(r, nodes)| Trajectory::new(r, nodes)).collect()
}

pub fn read_keynodes(path: &Path) -> Result<Vec<Trajectory>> {
    let text = fs::read_to_string(path).map_err(|e| PgatError::io(path, e))?;
    parse_keynodes(&text, path)
}

/// Reads several keynode files; each run id may appear in only one of them.
pub fn read_keynode_files(paths: &[impl AsRef<Path>]) -> Result<Vec<Trajectory>> {
    let mut out: Vec<Trajectory> = Vec::new();
    for p in paths {
        for t in read_keynodes(p.as_ref())? {
            if out.iter().any(|o| o.run_id == t.run_id) {
                return Err(PgatError::Dataset(format!(
                    "run {} appears in more than one file",
                    t.run_id
                )));
            }
            out.push(t);
        }
    }
    Ok(out)
}

/// Ground-truth position of one keynode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionRecord {
    pub global_id: u64,
    pub run_id: u32,
    pub position: Position,
}

pub fn positions_csv(records: &[PositionRecord]) -> String {
    let mut out = POSITION_COLUMNS.join(",");
    out.push('\n');
    for r in records {
        let [x, y, z] = r.position;
        out.push_str(&format!("{},{},{x},{y},{z}\n", r.global_id, r.run_id));
    }
    out
}

pub fn write_positions(path: &Path, records: &[PositionRecord]) -> Result<()> {
    fs::write(path, positions_csv(records)).map_err(|e| PgatError::io(path, e))
}

/// Parses a positions file; ids must be unique.
pub fn parse_positions(text: &str, path: &Path) -> Result<Vec<PositionRecord>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| parse_error(path, 1, e.to_string()))?
        .clone();
    check_header(&headers, path)?;
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_error(path, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let global_id: u64 = field(&rec, 0, "global_id", path, line)?;
        let run_id: u32 = field(&rec, 1, "run_id", path, line)?;
        let mut position = [0.0; 3];
        for (k, p) in position.iter_mut().enumerate() {
            *p = field(&rec, 2 + k, POSITION_COLUMNS[2 + k], path, line)?;
        }
        if seen.insert(global_id, line).is_some() {
            return Err(parse_error(path, line, format!("duplicate global_id {global_id}")));
        }
        out.push(PositionRecord {
            global_id,
            run_id,
            position,
        });
    }
    Ok(out)
}

pub fn read_positions(path: &Path) -> Result<Vec<PositionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| PgatError::io(path, e))?;
    parse_positions(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: u64, run: u32) -> Keynode {
        Keynode {
            global_id: id,
            run_id: run,
            position: [id as f64 * 0.1, -3.25, 0.0],
            descriptor: vec![1.0 / 3.0, -2.0e-17],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let t = Trajectory::new(4, vec![node(0, 4), node(1, 4), node(5, 4)]).unwrap();
        let text = keynodes_csv(&t.nodes).unwrap();
        assert!(text.starts_with("global_id,run_id,x,y,z,d0,d1\n"));
        let back = parse_keynodes(&text, Path::new("k.csv")).unwrap();
        assert_eq!(back, vec![t]);
    }

    #[test]
    fn errors_report_line_numbers() {
        let p = Path::new("k.csv");
        let bad_value = "global_id,run_id,x,y,z,d0\n0,0,0,0,0,1\n1,0,0,zz,0,1\n";
        match parse_keynodes(bad_value, p) {
            Err(PgatError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let non_monotonic = "global_id,run_id,x,y,z,d0\n3,0,0,0,0,1\n2,0,0,0,0,1\n";
        match parse_keynodes(non_monotonic, p) {
            Err(PgatError::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("follows"));
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_keynodes("id,run_id,x,y,z,d0\n", p).is_err());
        assert!(parse_keynodes("global_id,run_id,x,y,z,d0\n0,0,0,0,0\n", p).is_err());
    }

    #[test]
    fn runs_are_split_and_interleaving_is_allowed() {
        let text = "global_id,run_id,x,y,z,d0\n0,0,0,0,0,1\n10,1,0,0,0,1\n1,0,0,0,0,1\n";
        let runs = parse_keynodes(text, Path::new("k.csv")).unwrap();
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[0].nodes.len(), 2);
    }

    #[test]
    fn positions_round_trip() {
        let recs = vec![
            PositionRecord {
                global_id: 0,
                run_id: 0,
                position: [1.5, 2.0, 0.0],
            },
            PositionRecord {
                global_id: 9,
                run_id: 1,
                position: [-1.0, 0.1, 0.0],
            },
        ];
        let p = Path::new("p.csv");
        assert_eq!(parse_positions(&positions_csv(&recs), p).unwrap(), recs);
        let dup = "global_id,run_id,x,y,z\n1,0,0,0,0\n1,0,0,0,0\n";
        assert!(parse_positions(dup, p).is_err());
    }
}
