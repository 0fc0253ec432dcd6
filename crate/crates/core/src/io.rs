//! On-disk formats: dataset directories, annotation JSONL, distance CSVs.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{pgm, Annotation, BBox, Domain, Image};
use crate::scatter::ScatterSet;

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const ROI_DIR: &str = "rois";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub image: String,
    pub domain: Domain,
    pub resolution_factor: f64,
    pub boxes: Vec<BBox>,
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// One image of a dataset directory.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub id: String,
    pub image: Image,
    pub annotation: Annotation,
    pub domain: Domain,
    pub resolution_factor: f64,
}

/// Writes `NNNNNN.pgm` files plus `annotations.jsonl`.
pub fn write_dataset(dir: &Path, items: &[LabeledImage]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(items.len());
    for it in items {
        let file = format!("{}.pgm", it.id);
        pgm::write(&dir.join(&file), &it.image)?;
        records.push(AnnotationRecord {
            id: it.id.clone(),
            image: file,
            domain: it.domain,
            resolution_factor: it.resolution_factor,
            boxes: it.annotation.boxes.clone(),
        });
    }
    write_jsonl(&dir.join(ANNOTATIONS_FILE), &records)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<LabeledImage>> {
    let records: Vec<AnnotationRecord> = read_jsonl(&dir.join(ANNOTATIONS_FILE))?;
    records
        .into_iter()
        .map(|r| {
            Ok(LabeledImage {
                image: pgm::read(&dir.join(&r.image))?,
                id: r.id,
                annotation: Annotation { boxes: r.boxes },
                domain: r.domain,
                resolution_factor: r.resolution_factor,
            })
        })
        .collect()
}

/// ROI patches in a directory, sorted by file stem.
pub fn read_rois(dir: &Path) -> Result<Vec<(String, Image)>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let id = p
                .file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            Ok((id, pgm::read(&p)?))
        })
        .collect()
}

/// Square matrix with row/column ids, written as a CSV whose header row is
/// `id,<ids…>` and whose rows start with their id.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceTable {
    pub ids: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

pub fn write_distance_csv(path: &Path, t: &DistanceTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["id".to_string()];
    header.extend(t.ids.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (id, row) in t.ids.iter().zip(&t.values) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_distance_csv(path: &Path) -> Result<DistanceTable> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let ids: Vec<String> = r
        .headers()
        .map_err(csv_err)?
        .iter()
        .skip(1)
        .map(String::from)
        .collect();
    let mut values = Vec::with_capacity(ids.len());
    for (n, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.get(0) != ids.get(n).map(String::as_str) {
            return Err(Error::Parse(format!("row {n} id does not match header")));
        }
        let row: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {n}: {e}")))
            })
            .collect::<Result<_>>()?;
        if row.len() != ids.len() {
            return Err(Error::Parse(format!(
                "row {n} has {} values, expected {}",
                row.len(),
                ids.len()
            )));
        }
        values.push(row);
    }
    if values.len() != ids.len() {
        return Err(Error::Parse("distance matrix is not square".into()));
    }
    Ok(DistanceTable { ids, values })
}

/// Scatter sets stored next to a distance CSV.
pub fn points_sidecar(csv: &Path) -> std::path::PathBuf {
    let mut name = csv.file_name().unwrap_or_default().to_os_string();
    name.push(".points.json");
    csv.with_file_name(name)
}

pub type PointSets = BTreeMap<String, ScatterSet>;

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}
