//! Frame-type sidecars, frame selection and split manifests.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::preprocess::PatchKind;

pub const SIDECAR_HEADER: [&str; 6] = ["video_id", "frame_index", "pict_type", "width", "height", "frame_path"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PictType {
    I,
    P,
    B,
}

impl std::str::FromStr for PictType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "I" => Ok(PictType::I),
            "P" => Ok(PictType::P),
            "B" => Ok(PictType::B),
            other => Err(format!("unknown pict_type `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameRecord {
    pub video_id: String,
    pub frame_index: u64,
    pub pict_type: PictType,
    pub width: usize,
    pub height: usize,
    pub frame_path: PathBuf,
    /// B-frames are kept for bookkeeping but never selected.
    pub excluded: bool,
}

#[derive(Debug, Deserialize)]
struct SidecarRow {
    video_id: String,
    frame_index: u64,
    pict_type: String,
    width: usize,
    height: usize,
    frame_path: String,
}

/// Parsed sidecar: records grouped per video (first-appearance order) and
/// sorted by frame index, plus human-readable diagnostics.
#[derive(Clone, Debug, Default)]
pub struct FrameIndex {
    pub records: Vec<FrameRecord>,
    pub diagnostics: Vec<String>,
}

pub fn parse_frame_index(source: impl Read) -> Result<FrameIndex> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers()?.clone();
    if !headers.is_empty() && headers.iter().ne(SIDECAR_HEADER) {
        return Err(Error::Input(format!(
            "sidecar header must be `{}`, got `{}`",
            SIDECAR_HEADER.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut diagnostics = Vec::new();
    let mut order: Vec<String> = Vec::new();
    let mut per_video: BTreeMap<String, Vec<FrameRecord>> = BTreeMap::new();
    for (i, row) in reader.deserialize::<SidecarRow>().enumerate() {
        // header is line 1
        let line = i + 2;
        let row = row.map_err(|e| Error::Input(format!("sidecar line {line}: {e}")))?;
        let pict_type = match row.pict_type.parse::<PictType>() {
            Ok(t) => t,
            Err(msg) => {
                let d = format!("sidecar line {line}: {msg}; record rejected");
                log::warn!("{d}");
                diagnostics.push(d);
                continue;
            }
        };
        if !per_video.contains_key(&row.video_id) {
            order.push(row.video_id.clone());
        }
        per_video.entry(row.video_id.clone()).or_default().push(FrameRecord {
            excluded: pict_type == PictType::B,
            video_id: row.video_id,
            frame_index: row.frame_index,
            pict_type,
            width: row.width,
            height: row.height,
            frame_path: PathBuf::from(row.frame_path),
        });
    }
    let mut records = Vec::new();
    for video in order {
        let mut frames = per_video.remove(&video).unwrap_or_default();
        if frames.windows(2).any(|w| w[0].frame_index >= w[1].frame_index) {
            frames.sort_by_key(|r| r.frame_index);
            if let Some(w) = frames.windows(2).find(|w| w[0].frame_index == w[1].frame_index) {
                return Err(Error::Input(format!(
                    "duplicate frame {} in video `{video}`",
                    w[0].frame_index
                )));
            }
            let d = format!("video `{video}`: frame indices out of order; sorted");
            log::warn!("{d}");
            diagnostics.push(d);
        }
        records.extend(frames);
    }
    Ok(FrameIndex { records, diagnostics })
}

pub fn read_frame_index(path: &Path) -> Result<FrameIndex> {
    let file = std::fs::File::open(path).at(path)?;
    parse_frame_index(file).map_err(|e| match e {
        Error::Input(msg) => Error::Input(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// The I-frame records, in input order.
pub fn select_iframes(records: &[FrameRecord]) -> Vec<FrameRecord> {
    records.iter().filter(|r| r.pict_type == PictType::I).cloned().collect()
}

/// Three P-frames of one GOP, in temporal order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletDescriptor {
    pub frames: [FrameRecord; 3],
}

impl TripletDescriptor {
    pub fn video_id(&self) -> &str {
        &self.frames[1].video_id
    }

    pub fn center_index(&self) -> u64 {
        self.frames[1].frame_index
    }
}

/// Windows of three P-frames taken per GOP after dropping B-frames, advancing
/// by `stride`. A GOP begins at every I-frame; windows never cross one.
pub fn select_pframe_triplets(records: &[FrameRecord], stride: usize) -> Result<Vec<TripletDescriptor>> {
    if stride == 0 {
        return Err(Error::Config("triplet stride must be positive".into()));
    }
    let mut out = Vec::new();
    let mut gop: Vec<&FrameRecord> = Vec::new();
    let mut flush = |gop: &mut Vec<&FrameRecord>| {
        let mut start = 0;
        while start + 3 <= gop.len() {
            out.push(TripletDescriptor {
                frames: [gop[start].clone(), gop[start + 1].clone(), gop[start + 2].clone()],
            });
            start += stride;
        }
        gop.clear();
    };
    let mut current_video: Option<&str> = None;
    for r in records {
        if current_video != Some(r.video_id.as_str()) || r.pict_type == PictType::I {
            flush(&mut gop);
            current_video = Some(r.video_id.as_str());
        }
        if r.pict_type == PictType::P {
            gop.push(r);
        }
    }
    flush(&mut gop);
    Ok(out)
}

/// Per-video class and capture device, read from `labels.csv`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoLabel {
    pub video_id: String,
    pub class: String,
    pub device: String,
}

pub fn parse_labels(source: impl Read) -> Result<Vec<VideoLabel>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let mut out: Vec<VideoLabel> = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.deserialize::<VideoLabel>().enumerate() {
        let row = row.map_err(|e| Error::Input(format!("labels line {}: {e}", i + 2)))?;
        if !seen.insert(row.video_id.clone()) {
            return Err(Error::Input(format!("video `{}` labelled twice", row.video_id)));
        }
        out.push(row);
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<Vec<VideoLabel>> {
    parse_labels(std::fs::File::open(path).at(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitBy {
    #[default]
    Video,
    Patch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.as_array();
        if r.iter().any(|v| !v.is_finite() || *v < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios {r:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }
}

/// One stored patch awaiting split assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchListing {
    pub patch_path: String,
    pub label: u32,
    pub kind: PatchKind,
    pub video_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patch_path: String,
    pub label: u32,
    pub kind: PatchKind,
    pub split: Split,
    pub video_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub class_names: Vec<String>,
    pub seed: u64,
    pub split: SplitRatios,
    pub split_by: SplitBy,
    pub tool_version: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: ManifestHeader,
}

impl Manifest {
    pub fn class_names(&self) -> &[String] {
        &self.header.class_names
    }

    pub fn select(&self, kind: PatchKind, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.kind == kind && e.split == split).collect()
    }

    /// Per-class entry counts for one (kind, split).
    pub fn class_counts(&self, kind: PatchKind, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.header.class_names.len()];
        for e in self.select(kind, split) {
            counts[e.label as usize] += 1;
        }
        counts
    }

    pub fn videos(&self, split: Split) -> BTreeSet<&str> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.video_id.as_str())
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&HeaderLine {
            header: self.header.clone(),
        })
        .expect("manifest header serializes");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::Input("empty manifest".into()))?;
        let header = serde_json::from_str::<HeaderLine>(first)
            .map_err(|e| Error::Input(format!("manifest header: {e}")))?
            .header;
        let mut entries = Vec::new();
        for (i, line) in lines {
            let e: ManifestEntry =
                serde_json::from_str(line).map_err(|e| Error::Input(format!("manifest line {}: {e}", i + 1)))?;
            if e.label as usize >= header.class_names.len() {
                return Err(Error::Input(format!(
                    "manifest line {}: label {} outside {} classes",
                    i + 1,
                    e.label,
                    header.class_names.len()
                )));
            }
            entries.push(e);
        }
        Ok(Self { header, entries })
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&std::fs::read_to_string(path).at(path)?)
    }

    /// Checks that every referenced patch file exists under `root`.
    pub fn verify_files(&self, root: &Path) -> Result<()> {
        for e in &self.entries {
            let p = root.join(&e.patch_path);
            if !p.is_file() {
                return Err(Error::Input(format!("manifest references missing patch {}", p.display())));
            }
        }
        Ok(())
    }
}

/// Splits a labelled patch listing and balances classes.
///
/// Video mode assigns whole videos per class, in seeded order, to the split
/// furthest below its target share of that class's patches (relative to the
/// target). Patch mode splits each (class, kind) patch list directly. Each
/// (kind, split) is then down-sampled to its smallest class.
pub fn build_manifest(
    listing: &[PatchListing],
    class_names: &[String],
    ratios: SplitRatios,
    split_by: SplitBy,
    seed: u64,
) -> Result<Manifest> {
    ratios.validate()?;
    let n_classes = class_names.len();
    if n_classes == 0 {
        return Err(Error::Config("no classes".into()));
    }
    if let Some(p) = listing.iter().find(|p| p.label as usize >= n_classes) {
        return Err(Error::Input(format!(
            "patch {} has label {} outside {n_classes} classes",
            p.patch_path, p.label
        )));
    }
    let mut sorted: Vec<&PatchListing> = listing.iter().collect();
    sorted.sort_by(|a, b| a.patch_path.cmp(&b.patch_path));
    if let Some(w) = sorted.windows(2).find(|w| w[0].patch_path == w[1].patch_path) {
        return Err(Error::Input(format!("patch {} listed twice", w[0].patch_path)));
    }
    let mut video_class: BTreeMap<&str, u32> = BTreeMap::new();
    for p in &sorted {
        if let Some(&c) = video_class.get(p.video_id.as_str()) {
            if c != p.label {
                return Err(Error::Input(format!("video `{}` carries two labels", p.video_id)));
            }
        }
        video_class.insert(&p.video_id, p.label);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = ratios.as_array();

    let mut assigned: Vec<(Split, &PatchListing)> = Vec::with_capacity(sorted.len());
    match split_by {
        SplitBy::Video => {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for p in &sorted {
                *counts.entry(&p.video_id).or_default() += 1;
            }
            let mut split_of: BTreeMap<&str, Split> = BTreeMap::new();
            for class in 0..n_classes as u32 {
                let mut videos: Vec<&str> = video_class
                    .iter()
                    .filter(|(_, &c)| c == class)
                    .map(|(&v, _)| v)
                    .collect();
                videos.shuffle(&mut rng);
                let total: usize = videos.iter().map(|v| counts[v]).sum();
                let mut filled = [0usize; 3];
                for v in videos {
                    let s = (0..3)
                        .filter(|&s| r[s] > 0.0)
                        .map(|s| {
                            let target = r[s] * total as f64;
                            (s, (target - filled[s] as f64) / target)
                        })
                        .fold(None, |best: Option<(usize, f64)>, cur| match best {
                            Some(b) if b.1 >= cur.1 => Some(b),
                            _ => Some(cur),
                        })
                        .map(|(s, _)| s)
                        .expect("at least one split has a positive ratio");
                    filled[s] += counts[v];
                    split_of.insert(v, Split::ALL[s]);
                }
            }
            assigned.extend(sorted.iter().map(|p| (split_of[p.video_id.as_str()], *p)));
        }
        SplitBy::Patch => {
            for class in 0..n_classes as u32 {
                for kind in [PatchKind::I, PatchKind::P] {
                    let mut group: Vec<&PatchListing> =
                        sorted.iter().copied().filter(|p| p.label == class && p.kind == kind).collect();
                    group.shuffle(&mut rng);
                    let n = group.len();
                    let n_train = (r[0] * n as f64).round() as usize;
                    let n_val = ((r[1] * n as f64).round() as usize).min(n - n_train);
                    for (i, p) in group.into_iter().enumerate() {
                        let s = if i < n_train {
                            Split::Train
                        } else if i < n_train + n_val {
                            Split::Val
                        } else {
                            Split::Test
                        };
                        assigned.push((s, p));
                    }
                }
            }
        }
    }

    let kinds: BTreeSet<PatchKind> = sorted.iter().map(|p| p.kind).collect();
    let mut entries = Vec::new();
    let mut missing = Vec::new();
    for &kind in &kinds {
        for split in Split::ALL {
            if r[split.index()] == 0.0 {
                continue;
            }
            let mut per_class: Vec<Vec<&PatchListing>> = vec![Vec::new(); n_classes];
            for (s, p) in &assigned {
                if *s == split && p.kind == kind {
                    per_class[p.label as usize].push(p);
                }
            }
            for group in &mut per_class {
                group.sort_by(|a, b| a.patch_path.cmp(&b.patch_path));
            }
            let counts: Vec<usize> = per_class.iter().map(Vec::len).collect();
            if counts.contains(&0) {
                let report: Vec<String> = class_names
                    .iter()
                    .zip(&counts)
                    .map(|(c, n)| format!("{c}={n}"))
                    .collect();
                missing.push(format!("{kind:?}/{split}: {}", report.join(", ")));
                continue;
            }
            let min = *counts.iter().min().unwrap();
            for group in per_class {
                let keep: Vec<&PatchListing> = if group.len() > min {
                    let mut idx: Vec<usize> = (0..group.len()).collect();
                    idx.shuffle(&mut rng);
                    let mut idx = idx[..min].to_vec();
                    idx.sort_unstable();
                    idx.into_iter().map(|i| group[i]).collect()
                } else {
                    group
                };
                entries.extend(keep.into_iter().map(|p| ManifestEntry {
                    patch_path: p.patch_path.clone(),
                    label: p.label,
                    kind,
                    split,
                    video_id: p.video_id.clone(),
                }));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Input(format!(
            "some classes have no patches in a split: {}",
            missing.join("; ")
        )));
    }
    Ok(Manifest {
        header: ManifestHeader {
            class_names: class_names.to_vec(),
            seed,
            split: ratios,
            split_by,
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
        },
        entries,
    })
}
