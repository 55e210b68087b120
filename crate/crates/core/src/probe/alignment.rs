use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhoneSegment {
    pub phone: String,
    pub start_s: f64,
    pub end_s: f64,
}

impl PhoneSegment {
    pub fn midpoint_s(&self) -> f64 {
        0.5 * (self.start_s + self.end_s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhoneAlignment {
    pub utterance_id: String,
    pub segments: Vec<PhoneSegment>,
}

impl PhoneAlignment {
    /// Segments must be ordered, non-overlapping, and lie within `duration_s` if given.
    pub fn validate(&self, duration_s: Option<f64>) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("alignment {}: {m}", self.utterance_id)));
        let mut prev_end = 0.0;
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.start_s >= 0.0 && s.end_s > s.start_s) {
                return bad(format!("segment {i} has bad bounds {}..{}", s.start_s, s.end_s));
            }
            if s.start_s < prev_end {
                return bad(format!("segment {i} overlaps or is out of order"));
            }
            prev_end = s.end_s;
        }
        if let Some(d) = duration_s {
            if prev_end > d + 1e-9 {
                return bad(format!("segments end at {prev_end} s beyond duration {d} s"));
            }
        }
        Ok(())
    }
}

/// Parsed alignment file together with its phone inventory.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentSet {
    pub phones: Vec<String>,
    pub alignments: Vec<PhoneAlignment>,
}

/// Parses lines of `utterance_id phone start_s end_s` (whitespace separated;
/// `#` starts a comment). With `phone_set`, labels outside it are rejected;
/// otherwise the inventory is the sorted set of labels seen.
pub fn parse_alignments(text: &str, path: &Path, phone_set: Option<&[String]>) -> Result<AlignmentSet> {
    let perr = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let allowed: Option<BTreeSet<&str>> = phone_set.map(|p| p.iter().map(String::as_str).collect());
    let mut by_utt: BTreeMap<String, Vec<PhoneSegment>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(perr(i + 1, format!("expected 4 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| perr(i + 1, format!("bad time {s:?}: {e}")));
        let (start_s, end_s) = (num(f[2])?, num(f[3])?);
        if let Some(a) = &allowed {
            if !a.contains(f[1]) {
                return Err(perr(i + 1, format!("phone {:?} not in the phone set", f[1])));
            }
        }
        seen.insert(f[1].to_string());
        by_utt.entry(f[0].to_string()).or_default().push(PhoneSegment { phone: f[1].to_string(), start_s, end_s });
    }
    let alignments: Vec<PhoneAlignment> =
        by_utt.into_iter().map(|(utterance_id, segments)| PhoneAlignment { utterance_id, segments }).collect();
    for a in &alignments {
        a.validate(None)?;
    }
    let phones = match phone_set {
        Some(p) => p.to_vec(),
        None => seen.into_iter().collect(),
    };
    Ok(AlignmentSet { phones, alignments })
}

pub fn load_alignments(path: impl AsRef<Path>, phone_set: Option<&[String]>) -> Result<AlignmentSet> {
    let path = path.as_ref();
    parse_alignments(&std::fs::read_to_string(path)?, path, phone_set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_group() {
        let text = "# utt phone start end\nu2 aa 0.0 0.1\nu1 b 0.0 0.05\nu1 iy 0.05 0.2\n\n";
        let a = parse_alignments(text, Path::new("a.txt"), None).unwrap();
        assert_eq!(a.phones, vec!["aa", "b", "iy"]);
        assert_eq!(a.alignments.len(), 2);
        assert_eq!(a.alignments[0].utterance_id, "u1");
        assert_eq!(a.alignments[0].segments.len(), 2);
    }

    #[test]
    fn rejects_bad_input() {
        let p = Path::new("a.txt");
        assert!(matches!(parse_alignments("u1 aa 0.0\n", p, None), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_alignments("u1 aa 0.0 x\n", p, None), Err(Error::Parse { .. })));
        assert!(parse_alignments("u1 aa 0.0 0.2\nu1 b 0.1 0.3\n", p, None).is_err());
        let set = vec!["aa".to_string()];
        assert!(matches!(parse_alignments("u1 zz 0 0.1\n", p, Some(&set)), Err(Error::Parse { line: 1, .. })));
        let al = PhoneAlignment {
            utterance_id: "u".into(),
            segments: vec![PhoneSegment { phone: "aa".into(), start_s: 0.0, end_s: 1.5 }],
        };
        assert!(al.validate(Some(1.0)).is_err());
        assert!(al.validate(Some(2.0)).is_ok());
    }
}
