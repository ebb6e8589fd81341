//! Tag datasets as JSONL or CSV, instance datasets as JSONL.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    build_benchmark, Benchmark, DatasetError, DetectionInstance, EvaluationPool,
    GroundTruthInstance, LabelState, TestItem,
};

pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";

/// A dataset on disk: a tag file (`.jsonl` or `.csv`), or a directory
/// holding [`DETECTIONS_FILE`] and [`GROUND_TRUTH_FILE`].
#[derive(Debug, Clone)]
pub enum DatasetSource {
    Tag(EvaluationPool),
    Instance {
        detections: Vec<DetectionInstance>,
        ground_truth: Vec<GroundTruthInstance>,
    },
}

impl DatasetSource {
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        if path.is_dir() {
            let (detections, ground_truth) =
                load_instance_dataset(&path.join(DETECTIONS_FILE), &path.join(GROUND_TRUTH_FILE))?;
            return Ok(DatasetSource::Instance {
                detections,
                ground_truth,
            });
        }
        let format = TagFormat::from_path(path).ok_or_else(|| {
            io_err(
                path,
                "expected a .jsonl or .csv tag file, or an instance directory",
            )
        })?;
        Ok(DatasetSource::Tag(load_tag_dataset(path, format)?))
    }

    /// Tag data ignores the thresholds; instance data gets one view each.
    pub fn benchmark(&self, iou_thresholds: &[f64]) -> Result<Benchmark, DatasetError> {
        match self {
            DatasetSource::Tag(pool) => Ok(Benchmark::single(pool.clone())),
            DatasetSource::Instance {
                detections,
                ground_truth,
            } => build_benchmark(detections, ground_truth, iou_thresholds),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagFormat {
    Jsonl,
    Csv,
}

impl TagFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "jsonl" | "json" => Some(TagFormat::Jsonl),
            "csv" => Some(TagFormat::Csv),
            _ => None,
        }
    }
}

/// One tag-dataset row. Labels are 0/1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagRecord {
    pub id: String,
    pub category: String,
    pub score: f64,
    pub noisy_label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vetted_label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim_truth: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRecord {
    id: String,
    category: String,
    score: f64,
    noisy_label: u8,
    vetted_label: Option<u8>,
    sim_truth: Option<u8>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn bit(value: u8, field: &str, line: usize) -> Result<bool, DatasetError> {
    match value {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(DatasetError::Parse {
            line,
            message: format!("{field} must be 0 or 1, got {other}"),
        }),
    }
}

impl TagRecord {
    fn into_item(self, line: usize) -> Result<TestItem, DatasetError> {
        if !self.score.is_finite() {
            return Err(DatasetError::Parse {
                line,
                message: "score is not finite".into(),
            });
        }
        let noisy = bit(self.noisy_label, "noisy_label", line)?;
        let label = match self.vetted_label {
            Some(v) => LabelState::Vetted {
                noisy,
                truth: bit(v, "vetted_label", line)?,
            },
            None => LabelState::Unvetted { noisy },
        };
        let sim_truth = self
            .sim_truth
            .map(|v| bit(v, "sim_truth", line))
            .transpose()?;
        if let (Some(t), Some(h)) = (label.truth(), sim_truth) {
            if t != h {
                return Err(DatasetError::Parse {
                    line,
                    message: "vetted_label disagrees with sim_truth".into(),
                });
            }
        }
        Ok(TestItem {
            id: self.id.into(),
            category: self.category.as_str().into(),
            score: self.score,
            label,
            sim_truth,
            features: None,
            meta: self.meta,
        })
    }

    pub fn from_item(item: &TestItem) -> Self {
        TagRecord {
            id: item.id.0.clone(),
            category: item.category.0.clone(),
            score: item.score,
            noisy_label: u8::from(item.label.noisy()),
            vetted_label: item.label.truth().map(u8::from),
            sim_truth: item.sim_truth.map(u8::from),
            meta: item.meta.clone(),
        }
    }
}

fn pool_from_records(
    records: impl IntoIterator<Item = (usize, TagRecord)>,
) -> Result<EvaluationPool, DatasetError> {
    let mut seen = HashSet::new();
    let mut items = Vec::new();
    for (line, record) in records {
        if !seen.insert(record.id.clone()) {
            return Err(DatasetError::DuplicateId {
                id: record.id,
                line,
            });
        }
        items.push(record.into_item(line)?);
    }
    EvaluationPool::new(items)
}

fn jsonl_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>, DatasetError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push((n + 1, value));
    }
    Ok(out)
}

pub fn load_tag_dataset(path: &Path, format: TagFormat) -> Result<EvaluationPool, DatasetError> {
    match format {
        TagFormat::Jsonl => pool_from_records(jsonl_lines::<TagRecord>(path)?),
        TagFormat::Csv => {
            let mut reader = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
            let mut records = Vec::new();
            for (n, row) in reader.deserialize::<CsvRecord>().enumerate() {
                // header is line 1
                let line = n + 2;
                let row = row.map_err(|e| DatasetError::Parse {
                    line,
                    message: e.to_string(),
                })?;
                records.push((
                    line,
                    TagRecord {
                        id: row.id,
                        category: row.category,
                        score: row.score,
                        noisy_label: row.noisy_label,
                        vetted_label: row.vetted_label,
                        sim_truth: row.sim_truth,
                        meta: None,
                    },
                ));
            }
            pool_from_records(records)
        }
    }
}

/// Writes items in pool order. CSV drops the display metadata.
pub fn write_tag_dataset(
    pool: &EvaluationPool,
    path: &Path,
    format: TagFormat,
) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    match format {
        TagFormat::Jsonl => {
            let mut w = BufWriter::new(file);
            for item in pool.items() {
                serde_json::to_writer(&mut w, &TagRecord::from_item(item))
                    .map_err(|e| io_err(path, e))?;
                w.write_all(b"\n").map_err(|e| io_err(path, e))?;
            }
            w.flush().map_err(|e| io_err(path, e))
        }
        TagFormat::Csv => {
            let mut w = csv::Writer::from_writer(file);
            for item in pool.items() {
                let r = TagRecord::from_item(item);
                w.serialize(CsvRecord {
                    id: r.id,
                    category: r.category,
                    score: r.score,
                    noisy_label: r.noisy_label,
                    vetted_label: r.vetted_label,
                    sim_truth: r.sim_truth,
                })
                .map_err(|e| io_err(path, e))?;
            }
            w.flush().map_err(|e| io_err(path, e))
        }
    }
}

fn check_unique<'a>(ids: impl Iterator<Item = (usize, &'a str)>) -> Result<(), DatasetError> {
    let mut seen = HashSet::new();
    for (line, id) in ids {
        if !seen.insert(id) {
            return Err(DatasetError::DuplicateId {
                id: id.into(),
                line,
            });
        }
    }
    Ok(())
}

/// Detections sorted by category, then descending score, then id.
pub fn read_detections(path: &Path) -> Result<Vec<DetectionInstance>, DatasetError> {
    let rows = jsonl_lines::<DetectionInstance>(path)?;
    check_unique(rows.iter().map(|(l, d)| (*l, d.id.as_str())))?;
    let mut dets: Vec<DetectionInstance> = rows.into_iter().map(|(_, d)| d).collect();
    for det in &dets {
        det.validate()?;
    }
    dets.sort_by(|a, b| {
        a.category
            .cmp(&b.category)
            .then_with(|| b.score.total_cmp(&a.score))
            .then_with(|| a.id.cmp(&b.id))
    });
    Ok(dets)
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruthInstance>, DatasetError> {
    let rows = jsonl_lines::<GroundTruthInstance>(path)?;
    check_unique(rows.iter().map(|(l, g)| (*l, g.id.as_str())))?;
    let gts: Vec<GroundTruthInstance> = rows.into_iter().map(|(_, g)| g).collect();
    for gt in &gts {
        gt.validate()?;
    }
    Ok(gts)
}

pub fn load_instance_dataset(
    det_path: &Path,
    gt_path: &Path,
) -> Result<(Vec<DetectionInstance>, Vec<GroundTruthInstance>), DatasetError> {
    Ok((read_detections(det_path)?, read_ground_truth(gt_path)?))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(|e| io_err(path, e))?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_detections(path: &Path, dets: &[DetectionInstance]) -> Result<(), DatasetError> {
    write_jsonl(path, dets)
}

pub fn write_ground_truth(path: &Path, gts: &[GroundTruthInstance]) -> Result<(), DatasetError> {
    write_jsonl(path, gts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{CategoryId, Mask};
    use std::fs;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn csv_rows_rank_by_score() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            &dir,
            "t.csv",
            "id,category,score,noisy_label,vetted_label,sim_truth\n\
             r1,c,0.9,1,,\nr2,c,0.5,0,,\nr3,c,0.7,0,,\n",
        );
        let pool = load_tag_dataset(&path, TagFormat::Csv).unwrap();
        let ids: Vec<&str> = pool
            .ranked_items(&CategoryId::from("c"))
            .map(|i| i.id.as_str())
            .collect();
        assert_eq!(ids, ["r1", "r3", "r2"]);
    }

    #[test]
    fn duplicate_id_names_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            &dir,
            "t.csv",
            "id,category,score,noisy_label,vetted_label,sim_truth\n\
             a,c,0.9,1,,\nb,c,0.5,0,,\na,c,0.7,0,,\n",
        );
        let err = load_tag_dataset(&path, TagFormat::Csv).unwrap_err();
        assert_eq!(err.to_string(), "duplicate id at line 4: a");
    }

    #[test]
    fn vetted_label_enters_vetted_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            &dir,
            "t.jsonl",
            r#"{"id":"x","category":"c","score":0.3,"noisy_label":0,"vetted_label":1}"#,
        );
        let pool = load_tag_dataset(&path, TagFormat::Jsonl).unwrap();
        assert_eq!(
            pool.get(&"x".into()).unwrap().label,
            LabelState::Vetted {
                noisy: false,
                truth: true
            }
        );
    }

    #[test]
    fn malformed_jsonl_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            &dir,
            "t.jsonl",
            "{\"id\":\"x\",\"category\":\"c\",\"score\":0.3,\"noisy_label\":0}\n{\"id\":\"y\"}\n",
        );
        assert!(matches!(
            load_tag_dataset(&path, TagFormat::Jsonl),
            Err(DatasetError::Parse { line: 2, .. })
        ));
        let path = write(
            &dir,
            "u.jsonl",
            "{\"id\":\"x\",\"category\":\"c\",\"score\":0.3,\"noisy_label\":2}\n",
        );
        assert!(matches!(
            load_tag_dataset(&path, TagFormat::Jsonl),
            Err(DatasetError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn tag_round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let src = "{\"id\":\"a\",\"category\":\"c\",\"score\":0.25,\"noisy_label\":1,\"sim_truth\":0}\n\
                   {\"id\":\"b\",\"category\":\"d\",\"score\":-1.5,\"noisy_label\":0,\"vetted_label\":1,\"sim_truth\":1,\"meta\":{\"url\":\"x.jpg\"}}\n";
        let path = write(&dir, "t.jsonl", src);
        let pool = load_tag_dataset(&path, TagFormat::Jsonl).unwrap();
        let out = dir.path().join("out.jsonl");
        write_tag_dataset(&pool, &out, TagFormat::Jsonl).unwrap();
        assert_eq!(fs::read_to_string(&out).unwrap(), src);

        let csv = dir.path().join("out.csv");
        write_tag_dataset(&pool, &csv, TagFormat::Csv).unwrap();
        let again = load_tag_dataset(&csv, TagFormat::Csv).unwrap();
        for (a, b) in pool.items().iter().zip(again.items()) {
            assert_eq!(
                (a.id.clone(), a.score, a.label, a.sim_truth),
                (b.id.clone(), b.score, b.label, b.sim_truth)
            );
        }
    }

    #[test]
    fn instance_files() {
        let dir = tempfile::tempdir().unwrap();
        let mask = Mask::from_fn(8, 8, |x, y| x < 3 && y < 2);
        let a = DetectionInstance::from_mask("a", "c", "0", 0.8, mask.clone());
        let b = DetectionInstance::from_mask("b", "c", "0", 0.9, mask.clone());
        let det_path = dir.path().join("det.jsonl");
        write_detections(&det_path, &[a, b]).unwrap();
        let gt = GroundTruthInstance {
            id: "g".into(),
            category: "c".into(),
            image: "0".into(),
            bbox: mask.tight_box().unwrap(),
            mask: None,
            sim_mask: None,
        };
        let gt_path = dir.path().join("gt.jsonl");
        write_ground_truth(&gt_path, &[gt]).unwrap();
        let (dets, gts) = load_instance_dataset(&det_path, &gt_path).unwrap();
        assert_eq!(dets[0].id, "b");
        assert_eq!(dets[1].id, "a");
        assert!(gts[0].mask.is_none());

        let bad_box = write(
            &dir,
            "bad.jsonl",
            r#"{"id":"d","category":"c","score":0.5,"mask":{"w":4,"h":1,"runs":[1,2,1]},"box":{"x_min":0,"y_min":0,"x_max":4,"y_max":1}}"#,
        );
        assert!(matches!(
            read_detections(&bad_box),
            Err(DatasetError::Instance { .. })
        ));
        let bad_rle = write(
            &dir,
            "rle.jsonl",
            r#"{"id":"d","category":"c","score":0.5,"mask":{"w":4,"h":1,"runs":[1,2]},"box":{"x_min":1,"y_min":0,"x_max":3,"y_max":1}}"#,
        );
        let err = read_detections(&bad_rle).unwrap_err();
        assert!(
            matches!(err, DatasetError::Instance { ref id, .. } if id == "d"),
            "{err}"
        );
    }
}
