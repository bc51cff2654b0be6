//! Dataset manifests: labeled image lists with optional cue boxes,
//! stratified splits and stratified k-fold partitioning.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use libm::floor;

use crate::error::{Error, Result};
use crate::rng::{streams, Rng};

/// Axis-aligned cue region in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CueBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: String,
    pub cue: Option<CueBox>,
}

/// Labeled image list. The class table is the sorted set of unique labels
/// with "female" forced to index 0 when present (positive class).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = DatasetManifest { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut paths = BTreeSet::new();
        for e in &self.entries {
            if e.label.is_empty() {
                return Err(Error::Data(format!("empty label for path '{}'", e.path)));
            }
            if !paths.insert(e.path.as_str()) {
                return Err(Error::Data(format!("duplicate path '{}'", e.path)));
            }
        }
        Ok(())
    }

    /// Sorted unique labels, "female" first when present.
    pub fn classes(&self) -> Vec<String> {
        let mut set: Vec<String> = self
            .entries
            .iter()
            .map(|e| e.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if let Some(pos) = set.iter().position(|l| l == "female") {
            let f = set.remove(pos);
            set.insert(0, f);
        }
        set
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes().iter().position(|l| l == label)
    }

    /// Per-class entry counts, in class-table order.
    pub fn class_counts(&self) -> Vec<usize> {
        let classes = self.classes();
        let mut counts = vec![0usize; classes.len()];
        for e in &self.entries {
            let idx = classes.iter().position(|l| l == &e.label).unwrap();
            counts[idx] += 1;
        }
        counts
    }

    /// Label of each entry as a class index.
    pub fn label_indices(&self) -> Vec<usize> {
        let classes = self.classes();
        self.entries
            .iter()
            .map(|e| classes.iter().position(|l| l == &e.label).unwrap())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parse the CSV form: header `path,label[,cue_x,cue_y,cue_w,cue_h]`.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data("empty manifest".into()))?
            .trim();
        let has_cue = match header {
            "path,label" => false,
            "path,label,cue_x,cue_y,cue_w,cue_h" => true,
            other => return Err(Error::Data(format!("bad manifest header '{other}'"))),
        };
        let mut entries = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let entry = match (has_cue, fields.len()) {
                (false, 2) => ManifestEntry {
                    path: fields[0].to_string(),
                    label: fields[1].to_string(),
                    cue: None,
                },
                (true, 6) => {
                    let parse = |s: &str| -> Result<u32> {
                        s.parse().map_err(|_| {
                            Error::Data(format!("bad cue value '{s}' on line {}", lineno + 2))
                        })
                    };
                    ManifestEntry {
                        path: fields[0].to_string(),
                        label: fields[1].to_string(),
                        cue: Some(CueBox {
                            x: parse(fields[2])?,
                            y: parse(fields[3])?,
                            w: parse(fields[4])?,
                            h: parse(fields[5])?,
                        }),
                    }
                }
                (_, n) => {
                    return Err(Error::Data(format!(
                        "manifest line {} has {n} fields",
                        lineno + 2
                    )))
                }
            };
            entries.push(entry);
        }
        DatasetManifest::new(entries)
    }

    /// Serialize back to CSV (cue columns included when any entry has one).
    pub fn to_csv(&self) -> String {
        let has_cue = self.entries.iter().any(|e| e.cue.is_some());
        let mut s = String::new();
        if has_cue {
            s.push_str("path,label,cue_x,cue_y,cue_w,cue_h\n");
        } else {
            s.push_str("path,label\n");
        }
        for e in &self.entries {
            if has_cue {
                let c = e.cue.unwrap_or(CueBox { x: 0, y: 0, w: 0, h: 0 });
                s.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    e.path, e.label, c.x, c.y, c.w, c.h
                ));
            } else {
                s.push_str(&format!("{},{}\n", e.path, e.label));
            }
        }
        s
    }

    fn subset(&self, idxs: &[usize]) -> DatasetManifest {
        DatasetManifest {
            entries: idxs.iter().map(|&i| self.entries[i].clone()).collect(),
        }
    }
}

/// Train/validation/test fractions (must sum to 1) plus the split seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, validation: f64, test: f64, seed: u64) -> Result<Self> {
        let s = SplitSpec {
            train,
            validation,
            test,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    /// The standard 64/16/20 split.
    pub fn default_with_seed(seed: u64) -> Self {
        SplitSpec {
            train: 0.64,
            validation: 0.16,
            test: 0.20,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train <= 0.0 || self.validation <= 0.0 || self.test <= 0.0 {
            return Err(Error::Config("split fractions must be positive".into()));
        }
        if libm::fabs(self.train + self.validation + self.test - 1.0) > 1e-9 {
            return Err(Error::Config("split fractions must sum to 1".into()));
        }
        Ok(())
    }
}

// Guard against fractions like 2/3 whose f64 product lands a hair under
// the intended integer.
fn frac_floor(frac: f64, count: usize) -> usize {
    floor(frac * count as f64 + 1e-9) as usize
}

/// Stratified split: per class, a seeded shuffle cut at floor(frac*count)
/// boundaries, remainder items going to train. Outputs are disjoint and
/// cover the input.
pub fn stratified_split(
    manifest: &DatasetManifest,
    spec: &SplitSpec,
) -> Result<(DatasetManifest, DatasetManifest, DatasetManifest)> {
    spec.validate()?;
    let classes = manifest.classes();
    let labels = manifest.label_indices();
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    let mut test_idx = Vec::new();
    for ci in 0..classes.len() {
        let mut idxs: Vec<usize> = (0..manifest.len()).filter(|&i| labels[i] == ci).collect();
        if idxs.len() < 3 {
            return Err(Error::Data(format!(
                "class '{}' has {} samples; need >= 3 to split",
                classes[ci],
                idxs.len()
            )));
        }
        let mut rng = Rng::new(spec.seed)
            .substream(streams::SPLIT)
            .substream(ci as u64);
        rng.shuffle(&mut idxs);
        let c = idxs.len();
        let n_train = frac_floor(spec.train, c);
        let n_val = frac_floor(spec.validation, c);
        let n_test = frac_floor(spec.test, c);
        let rem = c - n_train - n_val - n_test;
        let t_end = n_train + rem;
        train_idx.extend_from_slice(&idxs[..t_end]);
        val_idx.extend_from_slice(&idxs[t_end..t_end + n_val]);
        test_idx.extend_from_slice(&idxs[t_end + n_val..t_end + n_val + n_test]);
    }
    Ok((
        manifest.subset(&train_idx),
        manifest.subset(&val_idx),
        manifest.subset(&test_idx),
    ))
}

/// Stratified k-fold: each class's seeded shuffle is dealt round-robin
/// into k folds; pair i trains on everything outside fold i and validates
/// on fold i. Per-class fold sizes differ by at most one.
pub fn kfold(
    manifest: &DatasetManifest,
    k: usize,
    seed: u64,
) -> Result<Vec<(DatasetManifest, DatasetManifest)>> {
    if k < 2 {
        return Err(Error::Param("kfold requires k >= 2".into()));
    }
    let classes = manifest.classes();
    let labels = manifest.label_indices();
    let mut fold_members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for ci in 0..classes.len() {
        let mut idxs: Vec<usize> = (0..manifest.len()).filter(|&i| labels[i] == ci).collect();
        if idxs.len() < k {
            return Err(Error::Data(format!(
                "class '{}' has {} samples; need >= k = {k}",
                classes[ci],
                idxs.len()
            )));
        }
        let mut rng = Rng::new(seed)
            .substream(streams::SPLIT)
            .substream(1000 + ci as u64);
        rng.shuffle(&mut idxs);
        for (i, idx) in idxs.into_iter().enumerate() {
            fold_members[i % k].push(idx);
        }
    }
    let mut pairs = Vec::with_capacity(k);
    for f in 0..k {
        let val = &fold_members[f];
        let mut train = Vec::new();
        for (g, members) in fold_members.iter().enumerate() {
            if g != f {
                train.extend_from_slice(members);
            }
        }
        pairs.push((manifest.subset(&train), manifest.subset(val)));
    }
    Ok(pairs)
}
