//! File formats: annotation inputs, datasets and checkpoints.
//!
//! Detections and captions are JSON arrays, triples are tab-separated
//! `head relation tail score` lines and embeddings are `word v1 ... vd`
//! lines. Datasets are one JSON task per line. Everything else is JSON.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::builder::{
    default_whitelist, CaptionTuple, Detection, EmbeddingTable, KnowledgeTriple,
};
use crate::controller::{Ablation, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::synthetic::SyntheticTask;

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_string(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    write_string(path, &(text + "\n"))
}

fn validation(path: &Path, problems: Vec<String>) -> Error {
    Error::Validation(
        problems
            .into_iter()
            .map(|p| format!("{}: {p}", path.display()))
            .collect(),
    )
}

/// JSON array of detections; problems are reported by record number (from 1).
pub fn parse_detections(text: &str, path: &Path) -> Result<Vec<Detection>> {
    let dets: Vec<Detection> =
        serde_json::from_str(text).map_err(|e| Error::json(path.display().to_string(), e))?;
    let problems: Vec<String> = dets
        .iter()
        .enumerate()
        .filter_map(|(i, d)| d.validate().err().map(|e| format!("record {}: {e}", i + 1)))
        .collect();
    if problems.is_empty() {
        Ok(dets)
    } else {
        Err(validation(path, problems))
    }
}

pub fn parse_captions(text: &str, path: &Path) -> Result<Vec<CaptionTuple>> {
    let caps: Vec<CaptionTuple> =
        serde_json::from_str(text).map_err(|e| Error::json(path.display().to_string(), e))?;
    let problems: Vec<String> = caps
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.validate().err().map(|e| format!("record {}: {e}", i + 1)))
        .collect();
    if problems.is_empty() {
        Ok(caps)
    } else {
        Err(validation(path, problems))
    }
}

/// Tab-separated triples; blank lines and `#` comments are skipped.
pub fn parse_triples(text: &str, path: &Path, whitelist: &[String]) -> Result<Vec<KnowledgeTriple>> {
    let mut out = Vec::new();
    let mut problems = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            problems.push(format!("line {line_no}: expected 4 tab-separated fields, found {}", fields.len()));
            continue;
        }
        let score = match fields[3].trim().parse::<f64>() {
            Ok(s) => s,
            Err(_) => {
                problems.push(format!("line {line_no}: score `{}` is not a number", fields[3].trim()));
                continue;
            }
        };
        let t = KnowledgeTriple::new(fields[0].trim(), fields[1].trim(), fields[2].trim(), score);
        match t.validate(whitelist) {
            Ok(()) => out.push(t),
            Err(e) => problems.push(format!("line {line_no}: {e}")),
        }
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(validation(path, problems))
    }
}

/// `word v1 ... vd` per line; every row must have the dimension of the first.
pub fn parse_embeddings(text: &str, path: &Path) -> Result<EmbeddingTable> {
    let mut table: Option<EmbeddingTable> = None;
    let mut problems = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let values: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let Ok(values) = values else {
            problems.push(format!("line {line_no}: non-numeric component for `{word}`"));
            continue;
        };
        if values.is_empty() {
            problems.push(format!("line {line_no}: `{word}` has no components"));
            continue;
        }
        let t = table.get_or_insert_with(|| EmbeddingTable::new(values.len()));
        if values.len() != t.dim() {
            problems.push(format!(
                "line {line_no}: `{word}` has dimension {}, expected {}",
                values.len(),
                t.dim()
            ));
            continue;
        }
        t.insert(word, values)?;
    }
    if !problems.is_empty() {
        return Err(validation(path, problems));
    }
    table.ok_or_else(|| validation(path, vec!["no embedding rows".into()]))
}

pub fn format_embeddings(table: &EmbeddingTable) -> String {
    let mut out = String::new();
    for (word, v) in table.iter() {
        out.push_str(word);
        for x in v {
            out.push(' ');
            // shortest repr that round-trips
            out.push_str(&format!("{x:?}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationPaths {
    pub detections: PathBuf,
    pub captions: PathBuf,
    pub triples: PathBuf,
    pub embeddings: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annotations {
    pub detections: Vec<Detection>,
    pub captions: Vec<CaptionTuple>,
    pub triples: Vec<KnowledgeTriple>,
    pub embeddings: EmbeddingTable,
}

fn collect<T>(r: Result<T>, problems: &mut Vec<String>) -> Option<T> {
    match r {
        Ok(v) => Some(v),
        Err(Error::Validation(p)) => {
            problems.extend(p);
            None
        }
        Err(e) => {
            problems.push(e.to_string());
            None
        }
    }
}

/// Reads and validates all four inputs, collecting every problem before failing.
pub fn load_annotations(paths: &AnnotationPaths) -> Result<Annotations> {
    let mut problems = Vec::new();
    let detections = collect(
        read_to_string(&paths.detections).and_then(|t| parse_detections(&t, &paths.detections)),
        &mut problems,
    );
    let captions = collect(
        read_to_string(&paths.captions).and_then(|t| parse_captions(&t, &paths.captions)),
        &mut problems,
    );
    let triples = collect(
        read_to_string(&paths.triples)
            .and_then(|t| parse_triples(&t, &paths.triples, &default_whitelist())),
        &mut problems,
    );
    let embeddings = collect(
        read_to_string(&paths.embeddings).and_then(|t| parse_embeddings(&t, &paths.embeddings)),
        &mut problems,
    );
    match (detections, captions, triples, embeddings) {
        (Some(detections), Some(captions), Some(triples), Some(embeddings)) => Ok(Annotations {
            detections,
            captions,
            triples,
            embeddings,
        }),
        _ => Err(Error::Validation(problems)),
    }
}

pub fn write_dataset(path: &Path, tasks: &[SyntheticTask]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in tasks {
        serde_json::to_writer(&mut w, t).map_err(|e| Error::json(path.display().to_string(), e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One task per line; an empty file is an error.
pub fn read_dataset(path: &Path) -> Result<Vec<SyntheticTask>> {
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let task: SyntheticTask = serde_json::from_str(line)
            .map_err(|e| Error::json(format!("{} line {}", path.display(), i + 1), e))?;
        out.push(task);
    }
    if out.is_empty() {
        return Err(Error::Validation(vec![format!("{}: dataset is empty", path.display())]));
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelConfig,
    /// Free-form snapshot of the training configuration.
    pub config: serde_json::Value,
    /// Ablation the model was trained under; evaluation applies it by default.
    pub ablation: Ablation,
    pub params: ParamStore,
    pub embeddings: EmbeddingTable,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn new(model: &Model, config: serde_json::Value, ablation: Ablation, rng: ChaCha8Rng) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            model: model.config.clone(),
            config,
            ablation,
            params: model.store.clone(),
            embeddings: model.embeddings.clone(),
            rng,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path.display().to_string(), e))?;
        write_string(path, &text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        Self::from_json(&text, path)
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let ctx = || path.display().to_string();
        let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::json(ctx(), e))?;
        let found = raw
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Validation(vec![format!("{}: missing format_version", ctx())]))?;
        if found != u64::from(CHECKPOINT_VERSION) {
            return Err(Error::CheckpointVersion {
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected: CHECKPOINT_VERSION,
            });
        }
        serde_json::from_value(raw).map_err(|e| Error::json(ctx(), e))
    }

    /// Rebuilds the model and installs the stored parameters.
    pub fn into_model(self) -> Result<Model> {
        let mut model = Model::new(self.model, self.embeddings, 0)?;
        model.store.load_from(&self.params)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> PathBuf {
        PathBuf::from("mem")
    }

    #[test]
    fn triple_errors_name_lines() {
        let text = "cup\tUsedFor\tdrinking\t0.9\n\ncup\tFlies\tsky\t0.5\nbad line\n";
        let err = parse_triples(text, &p(), &default_whitelist()).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(err.contains("line 4"), "{err}");
        assert!(!err.contains("line 1"), "{err}");
    }

    #[test]
    fn embedding_dimension_mismatch() {
        let err = parse_embeddings("a 1 2\nb 1 2 3\n", &p()).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("dimension 3"), "{err}");
        let t = parse_embeddings("a 1 2\nb 0.5 -1e-3\n", &p()).unwrap();
        assert_eq!(t.get("b"), Some(&[0.5, -1e-3][..]));
    }

    #[test]
    fn embeddings_round_trip_exactly() {
        let mut t = EmbeddingTable::new(2);
        t.insert("x", vec![0.1 + 0.2, -1.0 / 3.0]).unwrap();
        assert_eq!(parse_embeddings(&format_embeddings(&t), &p()).unwrap(), t);
    }

    #[test]
    fn negative_bbox_names_record() {
        let text = r#"[{"bbox":[0,0,2,2],"label":"cup","score":0.9,"feature":[1]},
                       {"bbox":[0,0,-1,2],"label":"pen","score":0.8,"feature":[1]}]"#;
        let err = parse_detections(text, &p()).unwrap_err().to_string();
        assert!(err.contains("record 2") && !err.contains("record 1"), "{err}");
    }

    #[test]
    fn checkpoint_version_is_checked() {
        let err = Checkpoint::from_json(r#"{"format_version": 7}"#, &p()).unwrap_err();
        assert!(matches!(err, Error::CheckpointVersion { found: 7, expected: 1 }));
        assert!(Checkpoint::from_json("{not json", &p()).is_err());
    }
}
