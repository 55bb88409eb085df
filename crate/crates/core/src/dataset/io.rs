//! CSV and JSON-manifest import/export.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{validate_separability, Dataset, DatasetError, SeparabilityCertificate};

/// Writes one row per point: `D` floats followed by the integer label. No header.
pub fn write_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let mut out = String::new();
    for i in 0..data.len() {
        for v in data.point(i).iter() {
            // `{:?}` prints the shortest representation that round-trips.
            let _ = write!(out, "{v:?},");
        }
        let _ = writeln!(out, "{}", data.label(i));
    }
    std::fs::write(path, out).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads the format written by [`write_csv`]. `num_classes` defaults to `max label + 1`.
pub fn read_csv(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: p.clone(),
        source,
    })?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| DatasetError::Parse {
            path: p.clone(),
            line: lineno + 1,
            msg,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let (label, coords) = fields.split_last().expect("split yields at least one field");
        if coords.is_empty() {
            return Err(parse_err("row has no coordinates".into()));
        }
        let label: usize = label.parse().map_err(|e| parse_err(format!("label {label:?}: {e}")))?;
        let row = coords
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| parse_err(format!("value {f:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(first) = rows.first().map(Vec::len) {
            if first != row.len() {
                return Err(parse_err(format!("expected {first} coordinates, found {}", row.len())));
            }
        }
        rows.push(row);
        labels.push(label);
    }
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::from_rows(&rows, labels, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    /// File name of the CSV, relative to the manifest.
    pub csv: String,
    pub num_points: usize,
    pub dim: usize,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    pub certificate: SeparabilityCertificate,
}

pub const MANIFEST_FORMAT: &str = "ncflow-dataset/1";

/// Writes `<stem>.csv` and `<stem>.json` into `dir`.
pub fn write_manifest(data: &Dataset, dir: impl AsRef<Path>, stem: &str) -> Result<DatasetManifest, DatasetError> {
    let dir = dir.as_ref();
    let csv_name = format!("{stem}.csv");
    write_csv(data, dir.join(&csv_name))?;
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.to_string(),
        csv: csv_name,
        num_points: data.len(),
        dim: data.dim(),
        num_classes: data.num_classes(),
        class_names: data.class_names().map(<[String]>::to_vec),
        certificate: validate_separability(data)?,
    };
    let path = dir.join(format!("{stem}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(manifest)
}

/// Reads a manifest and the CSV it points to.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<(Dataset, DatasetManifest), DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut data = read_csv(base.join(&manifest.csv), Some(manifest.num_classes))?;
    if data.len() != manifest.num_points || data.dim() != manifest.dim {
        return Err(DatasetError::InvalidConfig(format!(
            "manifest declares {}x{} but the CSV holds {}x{}",
            manifest.num_points,
            manifest.dim,
            data.len(),
            data.dim()
        )));
    }
    if let Some(names) = &manifest.class_names {
        data = data.with_class_names(names.clone());
    }
    Ok((data, manifest))
}
