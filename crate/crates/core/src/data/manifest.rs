use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::codec::read_volume;
use super::volume::VolumeGrid;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, val or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
}

impl DatasetIndex {
    pub fn num_classes(&self) -> usize {
        self.entries.iter().map(|e| e.label + 1).max().unwrap_or(0)
    }

    pub fn split_counts(&self) -> (usize, usize, usize) {
        let count = |s| self.entries.iter().filter(|e| e.split == s).count();
        (count(Split::Train), count(Split::Val), count(Split::Test))
    }

    pub fn resolve(&self, entry: &IndexEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    /// Loads every volume of `split` with its label.
    pub fn load_split(&self, split: Split) -> Result<(Vec<VolumeGrid>, Vec<usize>)> {
        let mut volumes = Vec::new();
        let mut labels = Vec::new();
        for e in self.entries.iter().filter(|e| e.split == split) {
            volumes.push(read_volume(&self.resolve(e))?);
            labels.push(e.label);
        }
        Ok((volumes, labels))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "path", "label", "split"])?;
        for e in &self.entries {
            w.write_record([
                e.id.as_str(),
                &e.path.to_string_lossy(),
                &e.label.to_string(),
                e.split.as_str(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Parses an `id,path,label,split` manifest. Row numbers in errors are file
/// line numbers, so the first data row is row 2.
pub fn load_manifest(path: &Path) -> Result<DatasetIndex> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Err(Error::EmptyIndex(path.into()));
    }
    let parse_err = |row: usize, message: String| Error::Parse {
        path: path.into(),
        row,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let expected = ["id", "path", "label", "split"];
    if headers.len() != 4 || headers.iter().zip(expected).any(|(a, b)| a != b) {
        return Err(parse_err(1, format!("header must be id,path,label,split, got {:?}", headers.iter().collect::<Vec<_>>())));
    }
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| parse_err(row, e.to_string()))?;
        if record.len() != 4 {
            return Err(parse_err(row, format!("expected 4 fields, got {}", record.len())));
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(parse_err(row, "empty id".into()));
        }
        if !seen.insert(id.clone()) {
            return Err(parse_err(row, format!("duplicate id {id:?}")));
        }
        let label: usize = record[2]
            .parse()
            .map_err(|_| parse_err(row, format!("label {:?} is not a non-negative integer", &record[2])))?;
        let split: Split = record[3].parse().map_err(|m| parse_err(row, m))?;
        entries.push(IndexEntry {
            id,
            path: PathBuf::from(&record[1]),
            label,
            split,
        });
    }
    if entries.is_empty() {
        return Err(Error::EmptyIndex(path.into()));
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(DatasetIndex { entries, root })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.csv");
        std::fs::write(&p, text).unwrap();
        (dir, p)
    }

    #[test]
    fn three_rows_one_per_split() {
        let (_d, p) = write("id,path,label,split\na,a.vol,0,train\nb,b.vol,1,val\nc,c.vol,0,test\n");
        let idx = load_manifest(&p).unwrap();
        assert_eq!(idx.split_counts(), (1, 1, 1));
        assert_eq!(idx.num_classes(), 2);
    }

    #[test]
    fn unknown_split_names_row() {
        let (_d, p) = write("id,path,label,split\na,a.vol,0,holdout\n");
        match load_manifest(&p) {
            Err(Error::Parse { row, message, .. }) => {
                assert_eq!(row, 2);
                assert!(message.contains("holdout"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_and_bad_label() {
        let (_d, p) = write("id,path,label,split\na,a.vol,0,train\na,b.vol,0,val\n");
        assert!(matches!(load_manifest(&p), Err(Error::Parse { row: 3, .. })));
        let (_d, p) = write("id,path,label,split\na,a.vol,x,train\n");
        assert!(matches!(load_manifest(&p), Err(Error::Parse { row: 2, .. })));
        let (_d, p) = write("id,path,label,split\na,a.vol,-1,train\n");
        assert!(matches!(load_manifest(&p), Err(Error::Parse { row: 2, .. })));
    }

    #[test]
    fn empty_files() {
        let (_d, p) = write("");
        assert!(matches!(load_manifest(&p), Err(Error::EmptyIndex(_))));
        let (_d, p) = write("id,path,label,split\n");
        assert!(matches!(load_manifest(&p), Err(Error::EmptyIndex(_))));
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let idx = DatasetIndex {
            entries: vec![IndexEntry {
                id: "x".into(),
                path: "x.vol".into(),
                label: 1,
                split: Split::Test,
            }],
            root: dir.path().into(),
        };
        let p = dir.path().join("m.csv");
        idx.write_csv(&p).unwrap();
        assert_eq!(load_manifest(&p).unwrap(), idx);
    }
}
