//! On-disk corpus layout: a directory holding `corpus.json` (format version,
//! generating spec, sequence index with metadata) and one `seq_NNNNN.bin` per
//! sequence containing little-endian f32 triples, frames concatenated.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusSpec, FaceSequence, Point, SubjectMeta};
use crate::emotion::Emotion;
use crate::error::{Error, Result};

pub const CORPUS_FORMAT_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "corpus.json";

#[derive(Debug, Serialize, Deserialize)]
struct IndexFile {
    format_version: u32,
    spec: Option<CorpusSpec>,
    sequences: Vec<IndexEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    file: String,
    subject: SubjectMeta,
    emotion: Emotion,
    frames: usize,
    points: usize,
}

pub fn save_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(corpus.sequences.len());
    for (i, seq) in corpus.sequences.iter().enumerate() {
        let points = seq.num_points();
        if seq.frames.iter().any(|f| f.len() != points) {
            return Err(Error::invalid(format!(
                "sequence {i} has frames with differing point counts"
            )));
        }
        let file = format!("seq_{i:05}.bin");
        let mut bytes = Vec::with_capacity(seq.frames.len() * points * 12);
        for frame in &seq.frames {
            for p in frame {
                for v in p {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
        entries.push(IndexEntry {
            file,
            subject: seq.subject,
            emotion: seq.emotion,
            frames: seq.frames.len(),
            points,
        });
    }
    let index = IndexFile {
        format_version: CORPUS_FORMAT_VERSION,
        spec: corpus.spec,
        sequences: entries,
    };
    let path = dir.join(INDEX_FILE);
    let mut text = serde_json::to_string_pretty(&index)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| json_parse_error(&text, &e))?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Parse {
            offset: 0,
            message: "corpus.json lacks a numeric format_version".into(),
        })?;
    if version != CORPUS_FORMAT_VERSION as u64 {
        return Err(Error::Version {
            found: version as u32,
            expected: CORPUS_FORMAT_VERSION,
        });
    }
    let index: IndexFile = serde_json::from_str(&text).map_err(|e| json_parse_error(&text, &e))?;

    let mut sequences = Vec::with_capacity(index.sequences.len());
    for entry in &index.sequences {
        if entry.file.contains(['/', '\\']) || entry.file.starts_with('.') {
            return Err(Error::Parse {
                offset: 0,
                message: format!("illegal sequence file name '{}'", entry.file),
            });
        }
        let bin_path = dir.join(&entry.file);
        let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let expected = entry.frames * entry.points * 12;
        if bytes.len() != expected {
            return Err(Error::Parse {
                offset: bytes.len().min(expected) as u64,
                message: format!(
                    "{}: expected {expected} bytes for {} frames x {} points, found {}",
                    entry.file,
                    entry.frames,
                    entry.points,
                    bytes.len()
                ),
            });
        }
        let floats: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let frames = floats
            .chunks_exact(entry.points * 3)
            .map(|frame| {
                frame
                    .chunks_exact(3)
                    .map(|p| -> Point { [p[0], p[1], p[2]] })
                    .collect()
            })
            .collect();
        sequences.push(FaceSequence {
            subject: entry.subject,
            emotion: entry.emotion,
            frames,
        });
    }
    Ok(Corpus {
        spec: index.spec,
        sequences,
    })
}

/// Converts serde_json's (line, column) into a byte offset into `text`.
pub(crate) fn json_parse_error(text: &str, err: &serde_json::Error) -> Error {
    let offset: usize = text
        .split_inclusive('\n')
        .take(err.line().saturating_sub(1))
        .map(str::len)
        .sum::<usize>()
        + err.column().saturating_sub(1);
    Error::Parse {
        offset: offset as u64,
        message: err.to_string(),
    }
}
