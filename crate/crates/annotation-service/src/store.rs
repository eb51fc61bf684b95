use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use selftalk::annotation::Annotation;

use crate::ServiceError;

/// Append-only annotation log. The latest line for a (dialogue, annotator)
/// key wins on replay.
pub struct AnnotationStore {
    path: PathBuf,
    file: File,
}

impl AnnotationStore {
    /// Open (creating if needed) and replay the log.
    pub fn open(path: &Path) -> Result<(Self, BTreeMap<String, Annotation>), ServiceError> {
        let io = |e| ServiceError::Io(path.to_path_buf(), e);
        let mut current = BTreeMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let a: Annotation = serde_json::from_str(&line)
                    .map_err(|e| ServiceError::Corrupt(path.to_path_buf(), i + 1, e.to_string()))?;
                current.insert(a.key(), a);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        Ok((
            AnnotationStore {
                path: path.to_path_buf(),
                file,
            },
            current,
        ))
    }

    pub fn append(&mut self, a: &Annotation) -> Result<(), ServiceError> {
        let line = serde_json::to_string(a).expect("annotations serialize");
        let io = |e| ServiceError::Io(self.path.clone(), e);
        writeln!(self.file, "{line}").map_err(io)?;
        self.file.flush().map_err(io)?;
        self.file.sync_data().map_err(io)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use selftalk::annotation::Helpfulness;

    fn ann(d: &str, who: &str, quality: i64) -> Annotation {
        Annotation {
            dialogue_id: d.into(),
            annotator_id: who.into(),
            per_utterance_character: vec![],
            subgoal_marks: vec![],
            success: 1.0,
            quality,
            ended: 1,
            helpfulness: Helpfulness::Unsure,
            timestamp: None,
        }
    }

    #[test]
    fn replay_keeps_latest_per_key() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        {
            let (mut s, cur) = AnnotationStore::open(&p).unwrap();
            assert!(cur.is_empty());
            s.append(&ann("d1", "x", 2)).unwrap();
            s.append(&ann("d1", "y", 3)).unwrap();
            s.append(&ann("d1", "x", 5)).unwrap();
        }
        let (_, cur) = AnnotationStore::open(&p).unwrap();
        assert_eq!(cur.len(), 2);
        assert_eq!(cur["d1:x"].quality, 5);
    }

    #[test]
    fn corrupt_line_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        std::fs::write(&p, "{}\n").unwrap();
        assert!(matches!(AnnotationStore::open(&p), Err(ServiceError::Corrupt(_, 1, _))));
    }
}
