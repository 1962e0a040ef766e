//! Extended-XYZ dialect:
//!
//! ```text
//! <atom count>
//! energy=<real> cutoff=<real> pbc="F F F" [source=<tag>]
//! <symbol> <x> <y> <z> <fx> <fy> <fz>
//! ...
//! ```

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use super::PreprocessError;
use crate::elements;
use crate::record::{radius_graph, GraphRecord};

pub fn ingest_extxyz(path: &Path) -> Result<Vec<GraphRecord>, PreprocessError> {
    let text = std::fs::read_to_string(path)?;
    let default_tag = path.file_stem().and_then(|s| s.to_str()).unwrap_or("extxyz");
    parse_extxyz(&text, default_tag)
}

pub fn parse_extxyz(text: &str, default_tag: &str) -> Result<Vec<GraphRecord>, PreprocessError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut records = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let frame = records.len();
        let line_no = i + 1;
        let n: usize = lines[i].trim().parse().map_err(|_| PreprocessError::Parse {
            line: line_no,
            message: format!("expected an atom count, found {:?}", lines[i].trim()),
        })?;
        if n == 0 {
            return Err(PreprocessError::Parse { line: line_no, message: "atom count is zero".into() });
        }
        let comment = lines.get(i + 1).ok_or_else(|| PreprocessError::Parse {
            line: line_no + 1,
            message: "missing comment line".into(),
        })?;
        let props = parse_properties(comment).map_err(|message| PreprocessError::Parse { line: line_no + 1, message })?;
        let schema = |message: String| PreprocessError::Schema { frame, message };
        let real = |key: &str| -> Result<f64, PreprocessError> {
            let v = props.get(key).ok_or_else(|| schema(format!("missing {key}= property")))?;
            v.parse().map_err(|_| schema(format!("{key}={v:?} is not a number")))
        };
        let energy = real("energy")?;
        let cutoff = real("cutoff")?;
        if !(cutoff > 0.0) {
            return Err(schema("cutoff must be positive".into()));
        }
        if let Some(pbc) = props.get("pbc") {
            if pbc.split_whitespace().any(|t| t != "F") {
                return Err(schema(format!("periodic boundaries are not supported (pbc={pbc:?})")));
            }
        }
        let tag = props.get("source").map(String::as_str).unwrap_or(default_tag).to_string();

        let mut atomic_numbers = Vec::with_capacity(n);
        let mut positions = Vec::with_capacity(n);
        let mut forces = Vec::with_capacity(n);
        for a in 0..n {
            let ln = i + 2 + a;
            let line = lines.get(ln).ok_or_else(|| PreprocessError::Parse {
                line: ln + 1,
                message: format!("frame declares {n} atoms but the file ends"),
            })?;
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() < 7 {
                if cols.len() == 4 {
                    return Err(schema(format!("atom line {} has no force columns", ln + 1)));
                }
                return Err(PreprocessError::Parse {
                    line: ln + 1,
                    message: format!("expected 'symbol x y z fx fy fz', found {} columns", cols.len()),
                });
            }
            let z = elements::atomic_number(cols[0]).ok_or_else(|| PreprocessError::Parse {
                line: ln + 1,
                message: format!("unknown element symbol {:?}", cols[0]),
            })?;
            let mut vals = [0.0f64; 6];
            for (k, v) in vals.iter_mut().enumerate() {
                *v = cols[k + 1].parse().map_err(|_| PreprocessError::Parse {
                    line: ln + 1,
                    message: format!("column {} ({:?}) is not a number", k + 2, cols[k + 1]),
                })?;
            }
            atomic_numbers.push(z);
            positions.push([vals[0], vals[1], vals[2]]);
            forces.push([vals[3], vals[4], vals[5]]);
        }
        let edge_index = radius_graph(&positions, cutoff);
        records.push(GraphRecord { atomic_numbers, positions, edge_index, energy, forces, source_tag: tag });
        i += 2 + n;
    }
    Ok(records)
}

/// `key=value` pairs; values may be double-quoted and contain spaces.
fn parse_properties(line: &str) -> Result<HashMap<String, String>, String> {
    let mut out = HashMap::new();
    let mut chars = line.trim().chars().peekable();
    loop {
        while chars.next_if(|c| c.is_whitespace()).is_some() {}
        if chars.peek().is_none() {
            break;
        }
        let key: String = std::iter::from_fn(|| chars.next_if(|&c| c != '=' && !c.is_whitespace())).collect();
        if chars.next() != Some('=') {
            return Err(format!("property {key:?} has no '=' value"));
        }
        let value = if chars.next_if_eq(&'"').is_some() {
            let v: String = std::iter::from_fn(|| chars.next_if(|&c| c != '"')).collect();
            if chars.next() != Some('"') {
                return Err(format!("unterminated quote in property {key:?}"));
            }
            v
        } else {
            std::iter::from_fn(|| chars.next_if(|c| !c.is_whitespace())).collect()
        };
        out.insert(key.to_ascii_lowercase(), value);
    }
    Ok(out)
}

/// Writes records as extended XYZ using shortest round-trip float formatting.
pub fn write_extxyz<W: Write>(records: &[GraphRecord], cutoff: f64, mut w: W) -> std::io::Result<()> {
    for r in records {
        writeln!(w, "{}", r.n_atoms())?;
        writeln!(w, "energy={:?} cutoff={:?} pbc=\"F F F\" source={}", r.energy, cutoff, r.source_tag)?;
        for a in 0..r.n_atoms() {
            let sym = elements::symbol(r.atomic_numbers[a]).unwrap_or("X");
            let (p, f) = (r.positions[a], r.forces[a]);
            writeln!(w, "{sym} {:?} {:?} {:?} {:?} {:?} {:?}", p[0], p[1], p[2], f[0], f[1], f[2])?;
        }
    }
    Ok(())
}
