//! Feature datasets as CSV.
//!
//! Schema: header `label,f0,f1,...,f{d-1}`, one instance per row,
//! integer labels, decimal floats, UTF-8.

use std::path::Path;

use crate::episodes::{ClassId, Domain, Instance};
use crate::error::{Error, Result};

/// Load a domain from the documented CSV schema. The domain is named
/// after the file stem.
pub fn load_feature_dataset(path: &Path) -> Result<Domain> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let origin = path.display().to_string();
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();
    parse_feature_csv(&text, &origin, name)
}

fn parse_feature_csv(text: &str, origin: &str, name: String) -> Result<Domain> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::malformed(origin, "empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 || cols[0] != "label" {
        return Err(Error::malformed(
            origin,
            format!("unknown header '{header}'"),
        ));
    }
    for (i, col) in cols[1..].iter().enumerate() {
        if *col != format!("f{i}") {
            return Err(Error::malformed(
                origin,
                format!("unknown header column '{col}' (expected f{i})"),
            ));
        }
    }
    let d = cols.len() - 1;

    let mut instances = Vec::new();
    for (line_no, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(Error::malformed(
                origin,
                format!(
                    "line {}: {} columns, expected {}",
                    line_no + 1,
                    fields.len(),
                    d + 1
                ),
            ));
        }
        let class_id: ClassId = fields[0].parse().map_err(|_| {
            Error::malformed(
                origin,
                format!("line {}: bad label '{}'", line_no + 1, fields[0]),
            )
        })?;
        let mut features = Vec::with_capacity(d);
        for f in &fields[1..] {
            features.push(f.parse::<f64>().map_err(|_| {
                Error::malformed(
                    origin,
                    format!("line {}: non-numeric feature '{f}'", line_no + 1),
                )
            })?);
        }
        instances.push(Instance { features, class_id });
    }
    if instances.is_empty() {
        return Err(Error::malformed(origin, "no instances"));
    }
    Domain::from_instances(name, instances, None)
}

/// Write a domain in the documented CSV schema. Values use the shortest
/// representation that parses back to the identical `f64`.
pub fn export_feature_dataset(domain: &Domain, path: &Path) -> Result<()> {
    let mut out = String::from("label");
    for i in 0..domain.d_in() {
        out.push_str(&format!(",f{i}"));
    }
    out.push('\n');
    for id in domain.class_ids() {
        for inst in domain.class(id).expect("listed id") {
            out.push_str(&id.to_string());
            for f in &inst.features {
                out.push(',');
                out.push_str(&format!("{f}"));
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}
