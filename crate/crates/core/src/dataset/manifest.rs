use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DatasetManifest, ImageRecord, StoneClass, View};
use crate::error::{Error, Result};

/// Image counts per `(class, view)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassViewCounts(pub BTreeMap<(StoneClass, View), usize>);

impl ClassViewCounts {
    pub fn from_records(records: &[ImageRecord]) -> Self {
        let mut m = BTreeMap::new();
        for r in records {
            *m.entry((r.stone_class, r.view)).or_insert(0) += 1;
        }
        ClassViewCounts(m)
    }

    pub fn get(&self, class: StoneClass, view: View) -> usize {
        self.0.get(&(class, view)).copied().unwrap_or(0)
    }

    pub fn view_total(&self, view: View) -> usize {
        self.0.iter().filter(|((_, v), _)| *v == view).map(|(_, n)| n).sum()
    }

    pub fn class_total(&self, class: StoneClass) -> usize {
        self.0.iter().filter(|((c, _), _)| *c == class).map(|(_, n)| n).sum()
    }

    pub fn total(&self) -> usize {
        self.0.values().sum()
    }
}

/// Reads a JSON-lines manifest, one image object per line. Blank lines are skipped.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: ImageRecord = serde_json::from_str(line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        if !seen.insert(record.image_path.clone()) {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("duplicate image_path {:?}", record.image_path),
            });
        }
        records.push(record);
    }
    let manifest = DatasetManifest { records, ..DatasetManifest::default() };
    for ((class, view), n) in &manifest.counts().0 {
        log::info!("{}: {class}/{view} = {n} images", path.display());
    }
    Ok(manifest)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ImageRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn table_one_counts() {
        let table = [
            (StoneClass::WW, 62, 25),
            (StoneClass::WD, 13, 12),
            (StoneClass::AU, 58, 50),
            (StoneClass::STR, 43, 24),
            (StoneClass::BRU, 23, 4),
            (StoneClass::CYS, 47, 48),
        ];
        let mut lines = Vec::new();
        for (class, sur, sec) in table {
            for (view, n) in [("surface", sur), ("section", sec)] {
                for i in 0..n {
                    lines.push(format!(
                        r#"{{"image_path":"{class}/{view}/{i}.png","class":"{class}","view":"{view}","stone_id":"{class}-{i}"}}"#
                    ));
                }
            }
        }
        let f = write(&lines);
        let m = load_manifest(f.path()).unwrap();
        let counts = m.counts();
        assert_eq!(counts.view_total(View::Surface), 246);
        assert_eq!(counts.view_total(View::Section), 163);
        assert_eq!(counts.total(), 409);
        assert_eq!(counts.get(StoneClass::WW, View::Surface), 62);
        assert_eq!(counts.class_total(StoneClass::AU), 108);
    }

    #[test]
    fn empty_file_is_empty_manifest() {
        let f = write(&[]);
        let m = load_manifest(f.path()).unwrap();
        assert!(m.records.is_empty());
        assert_eq!(m.counts().total(), 0);
    }

    #[test]
    fn bad_view_names_the_line() {
        let f = write(&[
            r#"{"image_path":"a.png","class":"WW","view":"surface","stone_id":"1"}"#.into(),
            r#"{"image_path":"b.png","class":"WW","view":"profile","stone_id":"1"}"#.into(),
        ]);
        match load_manifest(f.path()) {
            Err(Error::Manifest { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("profile"), "{message}");
            }
            other => panic!("expected manifest error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_class_and_duplicates_fail() {
        let f = write(&[r#"{"image_path":"a.png","class":"XX","view":"surface","stone_id":"1"}"#.into()]);
        assert!(matches!(load_manifest(f.path()), Err(Error::Manifest { line: 1, .. })));
        let line = r#"{"image_path":"a.png","class":"WW","view":"surface","stone_id":"1"}"#.to_string();
        let f = write(&[line.clone(), line]);
        assert!(matches!(load_manifest(f.path()), Err(Error::Manifest { line: 2, .. })));
    }

    #[test]
    fn missing_file_fails() {
        assert!(matches!(load_manifest("/nonexistent/manifest.jsonl"), Err(Error::Io { .. })));
    }
}
