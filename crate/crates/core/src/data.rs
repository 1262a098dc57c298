//! Longitudinal datasets, manifest ingestion and region masks.
//!
//! A manifest is a CSV file with header `subject_id,group,time,tensor_path`.
//! Groups are 1-based in the file and zero-based in memory. Tensor paths are
//! resolved relative to the manifest's directory. An optional `mask.ltf`
//! label volume next to the manifest marks included voxels (nonzero labels).

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ltf::{self, LabelVolume};
use crate::tensor::DenseTensor;

pub const MANIFEST_HEADER: [&str; 4] = ["subject_id", "group", "time", "tensor_path"];
pub const MASK_FILE: &str = "mask.ltf";

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    /// Zero-based group index.
    pub group: usize,
    /// Increasing observation times in `[0, 1]`.
    pub times: Vec<f64>,
    pub observations: Vec<DenseTensor>,
}

impl Subject {
    pub fn n_obs(&self) -> usize {
        self.times.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    pub grid: [usize; 3],
    pub n_groups: usize,
    pub subjects: Vec<Subject>,
    /// Included voxels (row-major over the grid); `None` means all.
    pub mask: Option<Vec<bool>>,
}

impl LongitudinalDataset {
    pub fn n_voxels(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_observations(&self) -> usize {
        self.subjects.iter().map(|s| s.n_obs()).sum()
    }

    pub fn max_visits(&self) -> usize {
        self.subjects.iter().map(|s| s.n_obs()).max().unwrap_or(0)
    }

    pub fn groups(&self) -> Vec<usize> {
        self.subjects.iter().map(|s| s.group).collect()
    }

    pub fn included_voxels(&self) -> usize {
        self.mask.as_ref().map_or(self.n_voxels(), |m| m.iter().filter(|&&b| b).count())
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(Error::Data("dataset has no subjects".into()));
        }
        if self.grid.iter().any(|&d| d == 0) {
            return Err(Error::Data("grid dimensions must be positive".into()));
        }
        let mut ids = HashSet::new();
        for s in &self.subjects {
            if !ids.insert(&s.id) {
                return Err(Error::Data(format!("duplicate subject id {}", s.id)));
            }
            if s.group >= self.n_groups {
                return Err(Error::Data(format!("subject {} has group {} outside 1..={}", s.id, s.group + 1, self.n_groups)));
            }
            if s.times.is_empty() || s.times.len() != s.observations.len() {
                return Err(Error::Data(format!("subject {} needs one tensor per time", s.id)));
            }
            for w in s.times.windows(2) {
                if !(w[0] < w[1]) {
                    return Err(Error::Data(format!("subject {} has non-increasing times", s.id)));
                }
            }
            for (t, y) in s.times.iter().zip(&s.observations) {
                if !(0.0..=1.0).contains(t) {
                    return Err(Error::Data(format!("subject {} has time {t} outside [0, 1]", s.id)));
                }
                if y.dims() != self.grid {
                    return Err(Error::Data(format!("subject {} has tensor dims {:?}, expected {:?}", s.id, y.dims(), self.grid)));
                }
                if !y.is_finite() {
                    return Err(Error::Data(format!("subject {} has non-finite values at time {t}", s.id)));
                }
            }
        }
        if let Some(m) = &self.mask {
            if m.len() != self.n_voxels() {
                return Err(Error::Data("mask size does not match grid".into()));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::Data("mask excludes every voxel".into()));
            }
        }
        Ok(())
    }
}

/// Integer label volume with a table of region names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMask {
    pub dims: Vec<usize>,
    pub labels: Vec<i32>,
    pub regions: BTreeMap<i32, String>,
}

impl RegionMask {
    pub fn new(volume: LabelVolume, regions: BTreeMap<i32, String>) -> Result<Self> {
        for l in &volume.labels {
            if *l != 0 && !regions.contains_key(l) {
                return Err(Error::Data(format!("label {l} is not in the region table")));
            }
        }
        Ok(Self { dims: volume.dims, labels: volume.labels, regions })
    }

    /// Voxel indicator for one region id.
    pub fn region(&self, id: i32) -> Result<Vec<bool>> {
        if !self.regions.contains_key(&id) {
            return Err(Error::Lookup(format!("unknown region {id}")));
        }
        Ok(self.labels.iter().map(|&l| l == id).collect())
    }
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    subject_id: String,
    group: i64,
    time: f64,
    tensor_path: String,
}

/// Reads and validates a dataset from its manifest. Times are divided by the
/// largest observed time when any exceeds 1.
pub fn load_dataset(manifest: impl AsRef<Path>) -> Result<LongitudinalDataset> {
    let manifest = manifest.as_ref();
    let dir = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(manifest)
        .map_err(|e| Error::Format { path: manifest.to_path_buf(), msg: e.to_string() })?;
    let header = reader.headers().map_err(|e| Error::Format { path: manifest.to_path_buf(), msg: e.to_string() })?;
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Format {
            path: manifest.to_path_buf(),
            msg: format!("header must be {}", MANIFEST_HEADER.join(",")),
        });
    }
    let mut rows: Vec<(usize, ManifestRow, DenseTensor)> = Vec::new();
    let mut grid: Option<Vec<usize>> = None;
    for (k, rec) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = k + 1;
        let r = rec.map_err(|e| Error::DataRow { row, msg: e.to_string() })?;
        if r.group < 1 {
            return Err(Error::DataRow { row, msg: format!("group {} must be at least 1", r.group) });
        }
        if !r.time.is_finite() || r.time < 0.0 {
            return Err(Error::DataRow { row, msg: format!("time {} must be finite and nonnegative", r.time) });
        }
        let path = dir.join(&r.tensor_path);
        let t = ltf::read_tensor(&path).map_err(|e| Error::DataRow { row, msg: e.to_string() })?;
        if t.order() != 3 {
            return Err(Error::DataRow { row, msg: format!("tensor has order {}, expected 3", t.order()) });
        }
        match &grid {
            None => grid = Some(t.dims().to_vec()),
            Some(g) if g.as_slice() != t.dims() => {
                return Err(Error::DataRow { row, msg: format!("tensor dims {:?} differ from {:?}", t.dims(), g) });
            }
            _ => {}
        }
        if !t.is_finite() {
            return Err(Error::DataRow { row, msg: "tensor contains NaN or infinite values".into() });
        }
        rows.push((row, r, t));
    }
    let grid = grid.ok_or_else(|| Error::Data("manifest has no rows".into()))?;
    let max_time = rows.iter().map(|(_, r, _)| r.time).fold(0.0, f64::max);
    let rescale = if max_time > 1.0 { max_time } else { 1.0 };
    let n_groups = rows.iter().map(|(_, r, _)| r.group as usize).max().unwrap_or(1);

    let mut order: Vec<String> = Vec::new();
    let mut by_id: BTreeMap<String, Subject> = BTreeMap::new();
    let mut seen: HashSet<(String, u64)> = HashSet::new();
    for (row, r, t) in rows {
        let time = r.time / rescale;
        if !seen.insert((r.subject_id.clone(), time.to_bits())) {
            return Err(Error::DataRow { row, msg: format!("duplicate row for subject {} at time {}", r.subject_id, r.time) });
        }
        let group = r.group as usize - 1;
        let s = by_id.entry(r.subject_id.clone()).or_insert_with(|| {
            order.push(r.subject_id.clone());
            Subject { id: r.subject_id.clone(), group, times: Vec::new(), observations: Vec::new() }
        });
        if s.group != group {
            return Err(Error::DataRow { row, msg: format!("subject {} changes group", r.subject_id) });
        }
        s.times.push(time);
        s.observations.push(t);
    }
    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let mut s = by_id.remove(&id).unwrap();
        let mut idx: Vec<usize> = (0..s.times.len()).collect();
        idx.sort_by(|&a, &b| s.times[a].total_cmp(&s.times[b]));
        s.times = idx.iter().map(|&i| s.times[i]).collect();
        s.observations = idx.iter().map(|&i| s.observations[i].clone()).collect();
        subjects.push(s);
    }
    let mask_path = dir.join(MASK_FILE);
    let mask = if mask_path.exists() {
        let v = ltf::read_labels(&mask_path)?;
        if v.dims != grid {
            return Err(Error::Data(format!("mask dims {:?} differ from grid {:?}", v.dims, grid)));
        }
        Some(v.labels.iter().map(|&l| l != 0).collect())
    } else {
        None
    };
    let ds = LongitudinalDataset { grid: [grid[0], grid[1], grid[2]], n_groups, subjects, mask };
    ds.validate()?;
    Ok(ds)
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Writes tensors under `dir/tensors/` and the manifest as `dir/manifest.csv`.
/// Times are written with full round-trip precision.
pub fn save_dataset(ds: &LongitudinalDataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let tdir = dir.join("tensors");
    std::fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| Error::Format { path: manifest.clone(), msg: e.to_string() })?;
    let csv_err = |e: csv::Error| Error::Format { path: manifest.clone(), msg: e.to_string() };
    w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for (si, s) in ds.subjects.iter().enumerate() {
        for (j, (t, y)) in s.times.iter().zip(&s.observations).enumerate() {
            let rel = format!("tensors/{:04}_{}_{j}.ltf", si, file_stem(&s.id));
            ltf::write_tensor(dir.join(&rel), y)?;
            w.write_record([s.id.clone(), (s.group + 1).to_string(), format!("{t:?}"), rel]).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    if let Some(m) = &ds.mask {
        let v = LabelVolume { dims: ds.grid.to_vec(), labels: m.iter().map(|&b| b as i32).collect() };
        ltf::write_labels(dir.join(MASK_FILE), &v)?;
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LongitudinalDataset {
        let y = |v: f64| DenseTensor::filled(&[2, 2, 2], v);
        LongitudinalDataset {
            grid: [2, 2, 2],
            n_groups: 2,
            subjects: vec![
                Subject { id: "a".into(), group: 0, times: vec![0.0, 0.5], observations: vec![y(1.0), y(2.0)] },
                Subject { id: "b".into(), group: 1, times: vec![0.25], observations: vec![y(0.1 + 0.2)] },
            ],
            mask: None,
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny();
        ds.mask = Some(vec![true, false, true, true, true, true, true, true]);
        let m = save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(m).unwrap(), ds);
    }

    #[test]
    fn validation_catches_bad_group() {
        let mut ds = tiny();
        ds.subjects[1].group = 5;
        assert!(ds.validate().is_err());
    }
}
