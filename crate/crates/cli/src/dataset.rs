//! `path,class_id,split` manifests and their image sets.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use ssgan_core::data::ImageSet;
use ssgan_core::tensor::{Scalar, Tensor};

use crate::images::load_png;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub class_id: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    /// Rejects manifests whose train and test splits share a class.
    pub fn new(root: PathBuf, rows: Vec<ManifestRow>) -> Result<Self> {
        let classes = |s: Split| rows.iter().filter(|r| r.split == s).map(|r| r.class_id).collect::<BTreeSet<_>>();
        let shared: Vec<_> = classes(Split::Train).intersection(&classes(Split::Test)).copied().collect();
        if !shared.is_empty() {
            bail!("train and test splits share classes {shared:?}");
        }
        Ok(Self { root, rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "class_id", "split"] {
            bail!("{}: header must be path,class_id,split", path.display());
        }
        let rows = reader
            .deserialize()
            .collect::<Result<Vec<ManifestRow>, _>>()
            .with_context(|| format!("parsing {}", path.display()))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(root, rows)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn split_rows(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    /// Decodes every image of `split` into `[N×C×size×size]`. Without
    /// `resize`, images of another size are an error.
    pub fn load<T: Scalar>(&self, split: Split, channels: usize, size: usize, resize: bool) -> Result<ImageSet<T>> {
        let rows: Vec<&ManifestRow> = self.split_rows(split).collect();
        if rows.is_empty() {
            bail!("manifest has no {split} images");
        }
        let mut data = Vec::with_capacity(rows.len() * channels * size * size);
        let mut labels = Vec::with_capacity(rows.len());
        for r in &rows {
            let path = self.root.join(&r.path);
            let img: Tensor<T> = load_png(&path, channels, resize.then_some(size))?;
            if img.shape() != [channels, size, size] {
                bail!("{} decodes to {:?}, expected {:?}", path.display(), img.shape(), [channels, size, size]);
            }
            data.extend_from_slice(img.data());
            labels.push(r.class_id);
        }
        Ok(ImageSet::new(Tensor::new(vec![rows.len(), channels, size, size], data)?, labels)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(p: &str, c: usize, s: Split) -> ManifestRow {
        ManifestRow { path: p.into(), class_id: c, split: s }
    }

    #[test]
    fn overlapping_classes_are_rejected() {
        let rows = vec![row("a.png", 0, Split::Train), row("b.png", 0, Split::Test)];
        assert!(Manifest::new(PathBuf::new(), rows).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::new(
            dir.path().to_path_buf(),
            vec![row("x/a.png", 0, Split::Train), row("x/b.png", 3, Split::Test)],
        )
        .unwrap();
        let p = dir.path().join("manifest.csv");
        m.write(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("path,class_id,split\nx/a.png,0,train\n"));
        assert_eq!(Manifest::read(&p).unwrap(), m);
    }

    #[test]
    fn missing_files_fail_to_load() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::new(dir.path().to_path_buf(), vec![row("nope.png", 0, Split::Train)]).unwrap();
        assert!(m.load::<f32>(Split::Train, 1, 32, false).is_err());
        assert!(m.load::<f32>(Split::Test, 1, 32, false).is_err());
    }
}
