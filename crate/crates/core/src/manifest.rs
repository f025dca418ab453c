//! Dataset manifests: one entry per line,
//! `id<TAB>lr_path<TAB>hr_path<TAB>camera_tag<TAB>split`.
//!
//! `#` starts a comment line; paths are relative to the manifest's
//! directory; `-` marks a missing hr_path (inference-only entries) or a
//! camera tag to be inferred from the id/filename prefix (`cam1_*`, `cam2_*`).

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub lr_path: PathBuf,
    pub hr_path: Option<PathBuf>,
    pub camera_tag: Option<String>,
    pub split: String,
}

#[derive(Clone, Debug, Default)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// `cam1_08` -> `cam1`.
pub fn infer_camera_tag(name: &str) -> Option<String> {
    let stem = name.rsplit('/').next()?;
    let prefix = stem.split('_').next()?;
    if prefix.len() > 3
        && prefix.starts_with("cam")
        && prefix[3..].chars().all(|c| c.is_ascii_digit())
    {
        Some(prefix.to_string())
    } else {
        None
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let root = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("expected 5 tab-separated fields, got {}", fields.len()),
            });
        }
        let id = fields[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("duplicate id '{id}'"),
            });
        }
        let lr_path = root.join(fields[1]);
        if !lr_path.exists() {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("LR file not found: {}", lr_path.display()),
            });
        }
        let hr_path = match fields[2] {
            "-" | "" => None,
            p => {
                let full = root.join(p);
                if !full.exists() {
                    return Err(Error::Manifest {
                        path: path.to_path_buf(),
                        line: lineno,
                        msg: format!("HR file not found: {}", full.display()),
                    });
                }
                Some(full)
            }
        };
        let camera_tag = match fields[3] {
            "-" | "" => infer_camera_tag(&id).or_else(|| infer_camera_tag(fields[1])),
            t => Some(t.to_string()),
        };
        entries.push(ManifestEntry {
            id,
            lr_path,
            hr_path,
            camera_tag,
            split: fields[4].to_string(),
        });
    }
    Ok(DatasetManifest { root, entries })
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let root = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = String::new();
    for e in &manifest.entries {
        let rel_path = |p: &PathBuf| {
            p.strip_prefix(root)
                .map(|r| r.to_path_buf())
                .unwrap_or_else(|_| p.clone())
        };
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            e.id,
            rel_path(&e.lr_path).display(),
            e.hr_path
                .as_ref()
                .map(|p| rel_path(p).display().to_string())
                .unwrap_or_else(|| "-".into()),
            e.camera_tag.clone().unwrap_or_else(|| "-".into()),
            e.split
        )
        .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Partition by camera tag. Errors on the first untagged entry.
pub fn split_by_camera(manifest: &DatasetManifest) -> Result<Vec<(String, DatasetManifest)>> {
    let mut order: Vec<String> = Vec::new();
    let mut parts: Vec<DatasetManifest> = Vec::new();
    for e in &manifest.entries {
        let tag = e
            .camera_tag
            .clone()
            .ok_or_else(|| Error::UntaggedEntry(e.id.clone()))?;
        let idx = match order.iter().position(|t| *t == tag) {
            Some(i) => i,
            None => {
                order.push(tag.clone());
                parts.push(DatasetManifest {
                    root: manifest.root.clone(),
                    entries: Vec::new(),
                });
                order.len() - 1
            }
        };
        parts[idx].entries.push(e.clone());
    }
    Ok(order.into_iter().zip(parts).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_files(dir: &Path, names: &[&str]) {
        for n in names {
            let img = crate::image_io::ImageBuffer::new(8, 8, vec![10; 8 * 8 * 3]).unwrap();
            crate::image_io::write_image(&img, dir.join(n)).unwrap();
        }
    }

    #[test]
    fn camera_tag_inference() {
        assert_eq!(infer_camera_tag("cam2_06"), Some("cam2".to_string()));
        assert_eq!(infer_camera_tag("cam1_08"), Some("cam1".to_string()));
        assert_eq!(infer_camera_tag("photo_01"), None);
    }

    #[test]
    fn load_validates_and_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        write_files(dir.path(), &["a_lr.png", "a_hr.png", "b_lr.png"]);
        let manifest_path = dir.path().join("data.tsv");
        std::fs::write(
            &manifest_path,
            "# comment\ncam1_a\ta_lr.png\ta_hr.png\t-\ttrain\ncam2_b\tb_lr.png\t-\tcam2\tval\n",
        )
        .unwrap();
        let m = load_manifest(&manifest_path).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].camera_tag.as_deref(), Some("cam1"));
        assert_eq!(m.entries[1].hr_path, None);
        assert_eq!(m.entries[1].split, "val");

        // idempotent reload
        let m2 = load_manifest(&manifest_path).unwrap();
        assert_eq!(m.entries, m2.entries);
    }

    #[test]
    fn empty_manifest_is_ok() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.tsv");
        std::fs::write(&p, "# nothing\n").unwrap();
        assert!(load_manifest(&p).unwrap().entries.is_empty());
    }

    #[test]
    fn duplicate_id_and_missing_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_files(dir.path(), &["x.png"]);
        let p = dir.path().join("m.tsv");
        std::fs::write(&p, "a\tx.png\t-\t-\ttrain\na\tx.png\t-\t-\ttrain\n").unwrap();
        assert!(load_manifest(&p).is_err());
        std::fs::write(&p, "a\tnope.png\t-\t-\ttrain\n").unwrap();
        assert!(load_manifest(&p).is_err());
    }

    #[test]
    fn split_by_camera_partitions() {
        let dir = tempfile::tempdir().unwrap();
        write_files(dir.path(), &["p.png"]);
        let p = dir.path().join("m.tsv");
        let mut text = String::new();
        for i in 0..10 {
            text += &format!("cam1_{i:02}\tp.png\t-\t-\tval\n");
            text += &format!("cam2_{i:02}\tp.png\t-\t-\tval\n");
        }
        std::fs::write(&p, text).unwrap();
        let m = load_manifest(&p).unwrap();
        let parts = split_by_camera(&m).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].0, "cam1");
        assert_eq!(parts[0].1.entries.len(), 10);
        assert_eq!(parts[1].1.entries.len(), 10);
        let total: usize = parts.iter().map(|(_, m)| m.entries.len()).sum();
        assert_eq!(total, m.entries.len());
    }

    #[test]
    fn all_one_camera_gives_single_part() {
        let dir = tempfile::tempdir().unwrap();
        write_files(dir.path(), &["p.png"]);
        let p = dir.path().join("m.tsv");
        std::fs::write(&p, "cam1_00\tp.png\t-\t-\tval\n").unwrap();
        let parts = split_by_camera(&load_manifest(&p).unwrap()).unwrap();
        assert_eq!(parts.len(), 1);
    }
}
