//! Corpus manifests, label-noise injection, stratified splits and the
//! synthetic corpus generator.
//!
//! Manifest files are JSON lines. The first line is a header object
//! `{"vocabulary": [...], "metadata": {...}}`; every following non-empty line
//! is one record:
//!
//! ```text
//! {"utterance_id":"u1","audio_ref":"wav/u1.wav","label":"ball","attended":true,"speaker_id":"s1","duration_s":1.25}
//! ```

mod noise;
mod split;
mod synth;

pub use noise::apply_attention_noise;
pub use split::{stratified_split, SplitAssignment};
pub use synth::{generate_synthetic_corpus, SyntheticCorpus, SyntheticCorpusSpec};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered set of referent classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisualVocabulary {
    classes: Vec<String>,
    index: HashMap<String, usize>,
}

impl VisualVocabulary {
    pub fn new<S: Into<String>>(classes: impl IntoIterator<Item = S>) -> Result<Self> {
        let classes: Vec<String> = classes.into_iter().map(Into::into).collect();
        if classes.len() < 2 {
            return Err(Error::Vocabulary(format!(
                "need at least 2 classes, got {}",
                classes.len()
            )));
        }
        let mut index = HashMap::with_capacity(classes.len());
        for (i, c) in classes.iter().enumerate() {
            if index.insert(c.clone(), i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate class {c:?}")));
            }
        }
        Ok(VisualVocabulary { classes, index })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, class: &str) -> Option<usize> {
        self.index.get(class).copied()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.classes[idx]
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub audio_ref: String,
    /// Index into the manifest vocabulary.
    pub label: usize,
    pub attended: bool,
    pub speaker_id: String,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub records: Vec<UtteranceRecord>,
    pub vocabulary: VisualVocabulary,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    vocabulary: Vec<String>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    utterance_id: String,
    audio_ref: String,
    label: String,
    attended: bool,
    speaker_id: String,
    duration_s: f64,
}

impl CorpusManifest {
    /// Validates record labels and id uniqueness.
    pub fn new(
        vocabulary: VisualVocabulary,
        records: Vec<UtteranceRecord>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.label >= vocabulary.len() {
                return Err(Error::UnknownClass {
                    label: format!("#{}", r.label),
                    utterance_id: r.utterance_id.clone(),
                });
            }
            if !seen.insert(r.utterance_id.as_str()) {
                return Err(Error::DuplicateId(r.utterance_id.clone()));
            }
            if !(r.duration_s >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "record {:?}: negative duration",
                    r.utterance_id
                )));
            }
        }
        Ok(CorpusManifest { records, vocabulary, metadata })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Records per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.vocabulary.len()];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    pub fn find(&self, utterance_id: &str) -> Option<&UtteranceRecord> {
        self.records.iter().find(|r| r.utterance_id == utterance_id)
    }

    /// Sub-manifest holding the records whose ids are in `ids`, in manifest order.
    pub fn subset(&self, ids: &HashSet<String>) -> CorpusManifest {
        CorpusManifest {
            records: self
                .records
                .iter()
                .filter(|r| ids.contains(&r.utterance_id))
                .cloned()
                .collect(),
            vocabulary: self.vocabulary.clone(),
            metadata: self.metadata.clone(),
        }
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (hline, htext) = lines.next().ok_or_else(|| perr(1, "missing header line".into()))?;
        let header: HeaderLine =
            serde_json::from_str(htext).map_err(|e| perr(hline, format!("header: {e}")))?;
        let vocabulary = VisualVocabulary::new(header.vocabulary)?;
        let mut records = Vec::new();
        for (n, l) in lines {
            let r: RecordLine = serde_json::from_str(l).map_err(|e| perr(n, e.to_string()))?;
            let label = vocabulary.index_of(&r.label).ok_or_else(|| Error::UnknownClass {
                label: r.label.clone(),
                utterance_id: r.utterance_id.clone(),
            })?;
            records.push(UtteranceRecord {
                utterance_id: r.utterance_id,
                audio_ref: r.audio_ref,
                label,
                attended: r.attended,
                speaker_id: r.speaker_id,
                duration_s: r.duration_s,
            });
        }
        CorpusManifest::new(vocabulary, records, header.metadata)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&HeaderLine {
            vocabulary: self.vocabulary.classes.clone(),
            metadata: self.metadata.clone(),
        })
        .expect("header serializes");
        out.push('\n');
        for r in &self.records {
            let line = RecordLine {
                utterance_id: r.utterance_id.clone(),
                audio_ref: r.audio_ref.clone(),
                label: self.vocabulary.name(r.label).to_string(),
                attended: r.attended,
                speaker_id: r.speaker_id.clone(),
                duration_s: r.duration_s,
            };
            out.push_str(&serde_json::to_string(&line).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<CorpusManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    CorpusManifest::parse(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = r#"{"vocabulary":["ball","cat","dog"],"metadata":{"source":"test"}}"#;

    fn rec(id: &str, label: &str) -> String {
        format!(
            r#"{{"utterance_id":"{id}","audio_ref":"a/{id}.wav","label":"{label}","attended":true,"speaker_id":"s1","duration_s":1.5}}"#
        )
    }

    fn parse(text: &str) -> Result<CorpusManifest> {
        CorpusManifest::parse(text, Path::new("m.jsonl"))
    }

    #[test]
    fn three_records() {
        let text = format!("{HEADER}\n{}\n{}\n\n{}\n", rec("u1", "ball"), rec("u2", "dog"), rec("u3", "cat"));
        let m = parse(&text).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.labels(), vec![0, 2, 1]);
        assert_eq!(m.metadata["source"], "test");
        let again = parse(&m.to_jsonl()).unwrap();
        assert_eq!(again, m);
        assert_eq!(again.to_jsonl(), m.to_jsonl());
    }

    #[test]
    fn unknown_label_is_named() {
        let text = format!("{HEADER}\n{}\n", rec("u1", "giraffe"));
        match parse(&text) {
            Err(Error::UnknownClass { label, .. }) => assert_eq!(label, "giraffe"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_record_list() {
        let m = parse(&format!("{HEADER}\n")).unwrap();
        assert_eq!(m.len(), 0);
        assert_eq!(m.vocabulary.len(), 3);
    }

    #[test]
    fn duplicate_ids_and_bad_lines() {
        let text = format!("{HEADER}\n{}\n{}\n", rec("u1", "ball"), rec("u1", "cat"));
        assert!(matches!(parse(&text), Err(Error::DuplicateId(id)) if id == "u1"));
        let text = format!("{HEADER}\n{}\n{{not json\n", rec("u1", "ball"));
        assert!(matches!(parse(&text), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(parse(""), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn vocabulary_invariants() {
        assert!(VisualVocabulary::new(["a"]).is_err());
        assert!(VisualVocabulary::new(["a", "b", "a"]).is_err());
        let v = VisualVocabulary::new(["a", "b"]).unwrap();
        assert_eq!(v.index_of("b"), Some(1));
        assert_eq!(v.name(0), "a");
    }
}
