use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::tensor::{
    read_label_file, read_mask_file, read_tensor_file, write_label_file, write_mask_file,
    write_tensor_file,
};

pub const DEFAULT_CLASSES: [&str; 6] = [
    "healthy",
    "ground_glass_opacity",
    "micronodules",
    "consolidation",
    "reticulation",
    "honeycombing",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub case_id: String,
    /// Paths are relative to the manifest file.
    pub image: PathBuf,
    pub labels: PathBuf,
    pub roi: PathBuf,
    /// Labeled pixels per class; filled in (and checked) on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default = "default_classes")]
    pub classes: Vec<String>,
    pub records: Vec<ManifestRecord>,
    /// Seed and config hash of whatever generated the dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

fn default_classes() -> Vec<String> {
    DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect()
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Parses the manifest, checks ids, and tallies (or verifies) the
    /// per-case class counts against the label files.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if m.classes.is_empty() || m.classes.len() > 255 {
            return Err(Error::InvalidInput(format!(
                "manifest lists {} classes; need 1..=255",
                m.classes.len()
            )));
        }
        let mut seen = HashSet::new();
        for r in &m.records {
            if !seen.insert(r.case_id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate case_id {}", r.case_id)));
            }
        }
        let tallies: Vec<Vec<u64>> = (0..m.records.len())
            .into_par_iter()
            .map(|i| m.load_record(i)?.class_counts(m.num_classes()))
            .collect::<Result<_>>()?;
        for (r, t) in m.records.iter_mut().zip(tallies) {
            if let Some(c) = &r.counts {
                if c != &t {
                    return Err(Error::InvalidInput(format!(
                        "{}: manifest counts {c:?} disagree with label file {t:?}",
                        r.case_id
                    )));
                }
            }
            r.counts = Some(t);
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn index_of(&self, case_id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.case_id == case_id)
    }

    pub fn load_record(&self, i: usize) -> Result<SampleRecord> {
        let r = self.records.get(i).ok_or_else(|| {
            Error::InvalidParameter(format!("record {i} out of range ({})", self.records.len()))
        })?;
        let image = read_tensor_file(self.resolve(&r.image))?;
        let image = if image.shape().len() == 2 {
            let s = image.shape().to_vec();
            image.reshape(&[1, s[0], s[1]])?
        } else {
            image
        };
        let rec = SampleRecord {
            case_id: r.case_id.clone(),
            image,
            labels: read_label_file(self.resolve(&r.labels))?,
            roi: read_mask_file(self.resolve(&r.roi))?,
        };
        rec.validate(Some(self.num_classes()))?;
        Ok(rec)
    }

    pub fn load_all(&self) -> Result<Vec<SampleRecord>> {
        (0..self.records.len())
            .into_par_iter()
            .map(|i| self.load_record(i))
            .collect()
    }

    pub fn per_case_counts(&self) -> Result<Vec<Vec<u64>>> {
        self.records
            .iter()
            .map(|r| {
                r.counts.clone().ok_or_else(|| {
                    Error::InvalidInput(format!("{}: class counts not loaded", r.case_id))
                })
            })
            .collect()
    }

    /// Writes every record under `dir` (`images/`, `labels/`, `roi/`) and a
    /// `manifest.json` referencing them.
    pub fn write_dataset(
        dir: impl AsRef<Path>,
        classes: &[String],
        records: &[SampleRecord],
        provenance: Option<Provenance>,
    ) -> Result<DatasetManifest> {
        let dir = dir.as_ref();
        for sub in ["images", "labels", "roi"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let entries = records
            .iter()
            .map(|r| {
                r.validate(Some(classes.len()))?;
                let file = format!("{}.tsr", r.case_id);
                let e = ManifestRecord {
                    case_id: r.case_id.clone(),
                    image: Path::new("images").join(&file),
                    labels: Path::new("labels").join(&file),
                    roi: Path::new("roi").join(&file),
                    counts: Some(r.class_counts(classes.len())?),
                };
                write_tensor_file(&r.image, dir.join(&e.image))?;
                write_label_file(&r.labels, dir.join(&e.labels))?;
                write_mask_file(&r.roi, dir.join(&e.roi))?;
                Ok(e)
            })
            .collect::<Result<Vec<_>>>()?;
        let m = DatasetManifest {
            classes: classes.to_vec(),
            records: entries,
            provenance,
            base_dir: dir.to_path_buf(),
        };
        m.save(dir.join("manifest.json"))?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_mosaic, SynthConfig};

    fn dataset(dir: &Path, n: u64) -> DatasetManifest {
        let cfg = SynthConfig {
            height: 24,
            width: 20,
            region_granularity: 8,
            ..SynthConfig::default()
        };
        let recs: Vec<_> = (0..n).map(|s| synth_mosaic(&cfg, s).unwrap()).collect();
        DatasetManifest::write_dataset(dir, &default_classes(), &recs, None).unwrap()
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let written = dataset(dir.path(), 3);
        let loaded = DatasetManifest::load(dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded.records, written.records);
        let r = loaded.load_record(1).unwrap();
        assert_eq!(r, synth_mosaic(&SynthConfig { height: 24, width: 20, region_granularity: 8, ..SynthConfig::default() }, 1).unwrap());
    }

    #[test]
    fn inconsistent_counts_and_duplicates_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = dataset(dir.path(), 2);
        let path = dir.path().join("manifest.json");
        m.records[0].counts.as_mut().unwrap()[0] += 1;
        m.save(&path).unwrap();
        let err = DatasetManifest::load(&path).unwrap_err();
        assert!(err.to_string().contains("disagree"), "{err}");
        m.records[0].counts = None;
        m.records[1].case_id = m.records[0].case_id.clone();
        m.save(&path).unwrap();
        assert!(DatasetManifest::load(&path).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        fs::write(&path, r#"{"records": [], "extra": 1}"#).unwrap();
        assert!(matches!(DatasetManifest::load(&path), Err(Error::Json(_))));
        fs::write(&path, r#"{"records": []}"#).unwrap();
        assert_eq!(DatasetManifest::load(&path).unwrap().num_classes(), 6);
    }
}
