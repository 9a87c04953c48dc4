//! `gradient-dump` files: per-trajectory group norms. The group layout is
//! hoisted into the header once; rows stay slim.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{malformed, read_doc, write_doc, IoError, FORMAT_VERSION};
use crate::probe::GradientVector;

pub(super) const FORMAT: &str = "gradient-dump";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    source: String,
    group_names: Vec<String>,
    group_param_counts: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct Row {
    trajectory_id: String,
    loss_value: f64,
    norms: Vec<f64>,
}

/// Writes a non-empty, layout-homogeneous set of gradient vectors.
pub fn write_gradient_dump(path: &Path, vectors: &[GradientVector]) -> Result<(), IoError> {
    let first = vectors
        .first()
        .ok_or_else(|| IoError::Inconsistent("cannot write an empty gradient dump".into()))?;
    let mut seen = BTreeSet::new();
    for v in vectors {
        v.validate()
            .map_err(|m| IoError::Inconsistent(format!("{}: {m}", v.trajectory_id)))?;
        if v.group_names != first.group_names
            || v.group_param_counts != first.group_param_counts
            || v.source != first.source
        {
            return Err(IoError::Inconsistent(format!(
                "{} has a different group layout or source than {}",
                v.trajectory_id, first.trajectory_id
            )));
        }
        if !seen.insert(&v.trajectory_id) {
            return Err(IoError::Inconsistent(format!(
                "duplicate trajectory_id {}",
                v.trajectory_id
            )));
        }
    }
    write_doc(
        path,
        &Header {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            source: first.source.clone(),
            group_names: first.group_names.clone(),
            group_param_counts: first.group_param_counts.clone(),
        },
        vectors.iter().map(|v| Row {
            trajectory_id: v.trajectory_id.clone(),
            loss_value: v.loss_value,
            norms: v.norms.clone(),
        }),
    )
}

pub fn read_gradient_dump(path: &Path) -> Result<Vec<GradientVector>, IoError> {
    let doc = read_doc(path, FORMAT)?;
    let header: Header = serde_json::from_str(&doc.header_line)
        .map_err(|e| malformed(path, 1, format!("bad header: {e}")))?;
    if header.group_names.len() != header.group_param_counts.len() {
        return Err(malformed(
            path,
            1,
            "group_names and group_param_counts disagree in length",
        ));
    }
    let mut vectors = Vec::with_capacity(doc.rows.len());
    let mut seen = BTreeSet::new();
    for (line, text) in &doc.rows {
        let row: Row =
            serde_json::from_str(text).map_err(|e| malformed(path, *line, e.to_string()))?;
        if !seen.insert(row.trajectory_id.clone()) {
            return Err(malformed(
                path,
                *line,
                format!("duplicate trajectory_id {}", row.trajectory_id),
            ));
        }
        let v = GradientVector {
            trajectory_id: row.trajectory_id,
            norms: row.norms,
            group_names: header.group_names.clone(),
            group_param_counts: header.group_param_counts.clone(),
            loss_value: row.loss_value,
            source: header.source.clone(),
        };
        v.validate().map_err(|m| malformed(path, *line, m))?;
        vectors.push(v);
    }
    Ok(vectors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vector(id: &str, norms: Vec<f64>) -> GradientVector {
        GradientVector {
            trajectory_id: id.into(),
            group_names: (0..norms.len()).map(|i| format!("l0.g{i}")).collect(),
            group_param_counts: vec![64; norms.len()],
            norms,
            loss_value: 2.5,
            source: "internal-probe".into(),
        }
    }

    #[test]
    fn dump_round_trips_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dump.jsonl");
        // awkward values: subnormal, nextafter(1), huge
        let vectors = vec![
            vector(
                "a",
                vec![5e-324, 1.0 + f64::EPSILON, 1.2345678901234567e300],
            ),
            vector("b", vec![0.0, 0.1, 1.0 / 3.0]),
        ];
        write_gradient_dump(&path, &vectors).unwrap();
        let back = read_gradient_dump(&path).unwrap();
        assert_eq!(back, vectors);
        for (v, w) in back.iter().zip(&vectors) {
            for (x, y) in v.norms.iter().zip(&w.norms) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn writer_rejects_empty_heterogeneous_and_duplicate_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dump.jsonl");
        assert!(matches!(
            write_gradient_dump(&path, &[]).unwrap_err(),
            IoError::Inconsistent(_)
        ));

        let mut other_layout = vector("b", vec![1.0, 2.0, 3.0]);
        other_layout.group_names[0] = "l9.weird".into();
        let err = write_gradient_dump(&path, &[vector("a", vec![1.0, 2.0, 3.0]), other_layout])
            .unwrap_err();
        assert!(matches!(err, IoError::Inconsistent(_)), "{err}");

        let dupes = vec![
            vector("a", vec![1.0, 2.0, 3.0]),
            vector("a", vec![1.0, 2.0, 3.0]),
        ];
        assert!(matches!(
            write_gradient_dump(&path, &dupes).unwrap_err(),
            IoError::Inconsistent(_)
        ));
    }

    #[test]
    fn reader_applies_header_layout_to_rows_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dump.jsonl");
        std::fs::write(
            &path,
            "{\"format\":\"gradient-dump\",\"version\":1,\"source\":\"internal-probe\",\
             \"group_names\":[\"l0.wq\",\"l0.wk\"],\"group_param_counts\":[16,16]}\n\
             {\"trajectory_id\":\"a\",\"loss_value\":1.0,\"norms\":[0.5,0.25]}\n\
             {\"trajectory_id\":\"b\",\"loss_value\":1.0,\"norms\":[0.5]}\n",
        )
        .unwrap();
        let err = read_gradient_dump(&path).unwrap_err();
        assert!(matches!(err, IoError::Malformed { line: 3, .. }), "{err}");
    }

    #[test]
    fn reader_rejects_negative_norms() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dump.jsonl");
        std::fs::write(
            &path,
            "{\"format\":\"gradient-dump\",\"version\":1,\"source\":\"x\",\
             \"group_names\":[\"l0.wq\"],\"group_param_counts\":[16]}\n\
             {\"trajectory_id\":\"a\",\"loss_value\":1.0,\"norms\":[-0.5]}\n",
        )
        .unwrap();
        assert!(matches!(
            read_gradient_dump(&path).unwrap_err(),
            IoError::Malformed { line: 2, .. }
        ));
    }
}
