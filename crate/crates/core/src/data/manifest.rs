//! JSON-lines dataset manifests.
//!
//! One object per line with exactly the fields `image_path`, `caption`,
//! `label` and `generator`. Relative image paths resolve against a root
//! directory, by default the manifest's own directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// `real = 0`, `fake = 1`.
    pub fn target(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Label::Real => "real",
            Label::Fake => "fake",
        })
    }
}

/// Generator tags allowed on real images.
pub const REAL_GENERATORS: [&str; 2] = ["real", "toy-real"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_path: String,
    pub caption: String,
    pub label: Label,
    pub generator: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub path: PathBuf,
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        resolve(&self.root, &entry.image_path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn resolve(root: &Path, image_path: &str) -> PathBuf {
    let p = Path::new(image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    load_manifest_with_root(path, root)
}

/// Loads and validates every line, collecting all problems before failing.
pub fn load_manifest_with_root(path: impl AsRef<Path>, root: impl Into<PathBuf>) -> Result<Manifest> {
    let path = path.as_ref();
    let root = root.into();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    let mut problems = Vec::new();
    for (lineno, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = match serde_json::from_str(line) {
            Ok(e) => e,
            Err(e) => {
                problems.push(format!("line {lineno}: {e}"));
                continue;
            }
        };
        if entry.label == Label::Real && !REAL_GENERATORS.contains(&entry.generator.as_str()) {
            problems.push(format!(
                "line {lineno}: real image with generator `{}`",
                entry.generator
            ));
        }
        if !resolve(&root, &entry.image_path).is_file() {
            problems.push(format!("line {lineno}: image `{}` not found", entry.image_path));
        }
        entries.push(entry);
    }
    if !problems.is_empty() {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            problems,
        });
    }
    if entries.is_empty() {
        log::warn!("manifest {} has no entries", path.display());
    }
    Ok(Manifest {
        path: path.to_path_buf(),
        root,
        entries,
    })
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn touch(dir: &Path, name: &str) {
        fs::write(dir.join(name), b"x").unwrap();
    }

    #[test]
    fn parses_a_line() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.png");
        let m = dir.path().join("m.jsonl");
        fs::write(
            &m,
            r#"{"image_path":"a.png","caption":"a dog","label":"fake","generator":"glide"}"#,
        )
        .unwrap();
        let manifest = load_manifest(&m).unwrap();
        assert_eq!(
            manifest.entries,
            vec![ManifestEntry {
                image_path: "a.png".into(),
                caption: "a dog".into(),
                label: Label::Fake,
                generator: "glide".into(),
            }]
        );
        assert_eq!(manifest.resolve(&manifest.entries[0]), dir.path().join("a.png"));
    }

    #[test]
    fn empty_file_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.jsonl");
        fs::write(&m, "").unwrap();
        assert!(load_manifest(&m).unwrap().is_empty());
    }

    #[test]
    fn unknown_label_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.png");
        let m = dir.path().join("m.jsonl");
        fs::write(
            &m,
            concat!(
                r#"{"image_path":"a.png","caption":"","label":"real","generator":"real"}"#,
                "\n",
                r#"{"image_path":"a.png","caption":"","label":"genuine","generator":"real"}"#,
                "\n"
            ),
        )
        .unwrap();
        match load_manifest(&m).unwrap_err() {
            Error::Manifest { problems, .. } => {
                assert_eq!(problems.len(), 1);
                assert!(problems[0].starts_with("line 2:"), "{problems:?}");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_images_and_bad_generators_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "ok.png");
        let m = dir.path().join("m.jsonl");
        fs::write(
            &m,
            concat!(
                r#"{"image_path":"gone.png","caption":"","label":"fake","generator":"glide"}"#,
                "\n",
                r#"{"image_path":"ok.png","caption":"","label":"real","generator":"glide"}"#,
                "\n",
                r#"{"image_path":"ok.png","caption":"","label":"real","generator":"real","extra":1}"#,
                "\n"
            ),
        )
        .unwrap();
        let Error::Manifest { problems, .. } = load_manifest(&m).unwrap_err() else {
            panic!("expected manifest error");
        };
        assert_eq!(problems.len(), 3);
        assert!(problems[0].contains("gone.png"));
        assert!(problems[1].starts_with("line 2"));
        assert!(problems[2].starts_with("line 3"));
    }

    #[test]
    fn root_override() {
        let data = tempfile::tempdir().unwrap();
        let meta = tempfile::tempdir().unwrap();
        touch(data.path(), "x.png");
        let m = meta.path().join("m.jsonl");
        fs::write(&m, r#"{"image_path":"x.png","caption":"","label":"fake","generator":"toy"}"#).unwrap();
        assert!(load_manifest(&m).is_err());
        assert_eq!(load_manifest_with_root(&m, data.path()).unwrap().len(), 1);
    }

    fn entry_strategy() -> impl Strategy<Value = ManifestEntry> {
        (any::<bool>(), "[ -~]{0,24}", "[a-z\\-]{1,12}").prop_map(|(fake, caption, generator)| ManifestEntry {
            image_path: "img.png".into(),
            caption,
            label: if fake { Label::Fake } else { Label::Real },
            generator: if fake { generator } else { "real".into() },
        })
    }

    proptest! {
        #[test]
        fn write_then_load_roundtrips(entries in proptest::collection::vec(entry_strategy(), 0..12)) {
            let dir = tempfile::tempdir().unwrap();
            touch(dir.path(), "img.png");
            let m = dir.path().join("m.jsonl");
            write_manifest(&m, &entries).unwrap();
            prop_assert_eq!(load_manifest(&m).unwrap().entries, entries);
        }
    }
}
