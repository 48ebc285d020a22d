use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class names and image counts of the clinical dataset the default
/// imbalance profile is modelled on. The counts sum to 5309 even though the
/// source reports 5298 images overall; the per-class figures are kept.
pub const REFERENCE_CLASSES: [(&str, usize); 16] = [
    ("Other", 1798),
    ("Head (PPP, quadrigeminal plate)", 534),
    ("Four-chamber heart section", 181),
    ("Section through three vessels", 272),
    ("Kidneys", 294),
    ("Stomach", 272),
    ("Head (sagittal)", 276),
    ("Head (cerebellum)", 260),
    ("Umbilical cord (placenta)", 249),
    ("Spine", 192),
    ("Femur", 208),
    ("Nasolabial triangle", 170),
    ("Humerus", 173),
    ("Umbilical cord (anterior abdominal wall)", 149),
    ("Cervix", 143),
    ("Bladder (CDC)", 138),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub path: String,
    pub label: usize,
}

/// Labelled image list plus the class-name table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
    /// Directory relative entry paths are resolved against.
    pub base_dir: PathBuf,
}

/// Sidecar file holding one class name per line, next to the manifest.
pub const CLASSES_FILE: &str = "classes.txt";

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, class_names: Vec<String>) -> Result<Self> {
        let m = DatasetManifest {
            entries,
            class_names,
            base_dir: PathBuf::from("."),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.image_id.as_str()) {
                return Err(Error::invalid(format!("duplicate image_id {:?}", e.image_id)));
            }
            if e.label >= self.class_names.len() {
                return Err(Error::invalid(format!(
                    "image {:?} has label {} but only {} classes exist",
                    e.image_id,
                    e.label,
                    self.class_names.len()
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Same classes, a subset of entries.
    pub fn subset(&self, entries: Vec<ManifestEntry>) -> DatasetManifest {
        DatasetManifest {
            entries,
            class_names: self.class_names.clone(),
            base_dir: self.base_dir.clone(),
        }
    }

    /// Reads `image_id,path,label` CSV; class names come from the
    /// `classes.txt` sidecar when present, else `class_<k>` up to the largest label.
    pub fn read(path: &Path) -> Result<Self> {
        let csv_err = |detail: String| Error::Csv {
            path: path.to_path_buf(),
            detail,
        };
        let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
            _ => csv_err(e.to_string()),
        })?;
        let headers = rdr.headers().map_err(|e| csv_err(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["image_id", "path", "label"] {
            return Err(csv_err(format!(
                "expected header image_id,path,label, found {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut entries = Vec::new();
        for rec in rdr.deserialize() {
            entries.push(rec.map_err(|e: csv::Error| csv_err(e.to_string()))?);
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let sidecar = base_dir.join(CLASSES_FILE);
        let class_names = if sidecar.exists() {
            fs::read_to_string(&sidecar)
                .map_err(|e| Error::io(&sidecar, e))?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(str::to_string)
                .collect()
        } else {
            let k = entries.iter().map(|e: &ManifestEntry| e.label + 1).max().unwrap_or(0);
            (0..k).map(|i| format!("class_{i}")).collect()
        };
        let m = DatasetManifest {
            entries,
            class_names,
            base_dir,
        };
        m.validate().map_err(|e| csv_err(e.to_string()))?;
        Ok(m)
    }

    /// Writes the CSV and the class-name sidecar next to it.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        for e in &self.entries {
            w.serialize(e).map_err(|e| Error::Csv {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let sidecar = path.parent().unwrap_or(Path::new("")).join(CLASSES_FILE);
        let mut names = self.class_names.join("\n");
        names.push('\n');
        fs::write(&sidecar, names).map_err(|e| Error::io(&sidecar, e))
    }
}

/// Number of entries per class; always sums to the manifest length.
pub fn class_counts(manifest: &DatasetManifest) -> Vec<usize> {
    let mut counts = vec![0; manifest.class_count()];
    for e in &manifest.entries {
        counts[e.label] += 1;
    }
    counts
}

/// Image-less manifest with exactly the reference class layout and counts.
pub fn reference_fixture_manifest() -> DatasetManifest {
    let mut entries = Vec::new();
    for (label, (_, n)) in REFERENCE_CLASSES.iter().enumerate() {
        for i in 0..*n {
            entries.push(ManifestEntry {
                image_id: format!("t1_{label:02}_{i:04}"),
                path: String::new(),
                label,
            });
        }
    }
    DatasetManifest {
        entries,
        class_names: REFERENCE_CLASSES.iter().map(|(n, _)| n.to_string()).collect(),
        base_dir: PathBuf::from("."),
    }
}
