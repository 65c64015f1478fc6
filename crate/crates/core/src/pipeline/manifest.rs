//! Dataset manifests and ground-truth segment labels.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub hr_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_path: Option<PathBuf>,
    pub split: Split,
}

#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Load a manifest, resolving relative paths against its directory and
    /// verifying ids are unique and referenced files exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("cannot parse manifest: {e}")))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut seen = std::collections::HashSet::new();
        for entry in &mut manifest.entries {
            if !seen.insert(entry.id.clone()) {
                return Err(Error::format(format!("duplicate utterance id {}", entry.id)));
            }
            entry.hr_path = resolve(base, &entry.hr_path)?;
            if let Some(lr) = &entry.lr_path {
                entry.lr_path = Some(resolve(base, lr)?);
            }
            if let Some(lb) = &entry.labels_path {
                entry.labels_path = Some(resolve(base, lb)?);
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(format!("cannot serialize manifest: {e}")))?;
        std::fs::write(path.as_ref(), text)?;
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

fn resolve(base: &Path, p: &Path) -> Result<PathBuf> {
    let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    if !full.exists() {
        return Err(Error::format(format!("manifest references missing file {full:?}")));
    }
    Ok(full)
}

/// One labeled span of samples, end exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub label: u8,
}

#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct SegmentLabels {
    pub segments: Vec<Segment>,
}

impl SegmentLabels {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("cannot parse segment labels: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(format!("cannot serialize segment labels: {e}")))?;
        std::fs::write(path.as_ref(), text)?;
        Ok(())
    }

    /// Frame labels on a hop grid: each frame takes the label of the segment
    /// containing its center sample (silence when past the last segment).
    pub fn frame_labels(&self, hop: usize, target_len: usize) -> Vec<u8> {
        (0..target_len)
            .map(|f| {
                let center = f * hop + hop / 2;
                self.segments
                    .iter()
                    .find(|s| center >= s.start && center < s.end)
                    .map(|s| s.label)
                    .unwrap_or(0)
            })
            .collect()
    }

    /// Frames whose distance to the nearest segment boundary exceeds
    /// `pad_frames` (used to exclude transition frames from scoring).
    pub fn interior_mask(&self, hop: usize, target_len: usize, pad_frames: usize) -> Vec<bool> {
        let bounds: Vec<usize> = self
            .segments
            .iter()
            .flat_map(|s| [s.start, s.end])
            .collect();
        (0..target_len)
            .map(|f| {
                let center = (f * hop + hop / 2) as isize;
                bounds.iter().all(|&b| {
                    (center - b as isize).unsigned_abs() > pad_frames * hop
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_labels_follow_segment_centers() {
        let labels = SegmentLabels {
            segments: vec![
                Segment { start: 0, end: 400, label: 0 },
                Segment { start: 400, end: 800, label: 2 },
                Segment { start: 800, end: 1200, label: 1 },
            ],
        };
        let frames = labels.frame_labels(160, 8);
        assert_eq!(frames, vec![0, 0, 0, 2, 2, 1, 1, 0]);
    }

    #[test]
    fn interior_mask_excludes_boundary_frames() {
        let labels = SegmentLabels {
            segments: vec![
                Segment { start: 0, end: 800, label: 0 },
                Segment { start: 800, end: 1600, label: 2 },
            ],
        };
        let mask = labels.interior_mask(160, 10, 2);
        // frames with centers within 2*160 samples of 0/800/1600 are masked
        assert!(!mask[0]);
        assert!(mask[2]);
        assert!(!mask[4]);
        assert!(!mask[5]);
        assert!(mask[7]);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let wav = dir.path().join("a.wav");
        std::fs::write(&wav, b"x").unwrap();
        let manifest = Manifest {
            entries: vec![
                ManifestEntry {
                    id: "a".into(),
                    hr_path: "a.wav".into(),
                    lr_path: None,
                    labels_path: None,
                    split: Split::Train,
                },
                ManifestEntry {
                    id: "a".into(),
                    hr_path: "a.wav".into(),
                    lr_path: None,
                    labels_path: None,
                    split: Split::Test,
                },
            ],
        };
        let mpath = dir.path().join("manifest.json");
        manifest.save(&mpath).unwrap();
        assert!(Manifest::load(&mpath).is_err());
    }

    #[test]
    fn missing_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = Manifest {
            entries: vec![ManifestEntry {
                id: "a".into(),
                hr_path: "missing.wav".into(),
                lr_path: None,
                labels_path: None,
                split: Split::Train,
            }],
        };
        let mpath = dir.path().join("manifest.json");
        manifest.save(&mpath).unwrap();
        assert!(Manifest::load(&mpath).is_err());
    }
}
