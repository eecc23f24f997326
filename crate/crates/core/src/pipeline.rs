//! Sidecar-to-manifest ingest and manifest-to-tensor loading.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::ingest::{
    build_manifest, read_frame_index, read_labels, select_iframes, select_pframe_triplets, FrameRecord, Manifest,
    PatchListing, Split, SplitBy, SplitRatios,
};
use crate::preprocess::{make_iframe_input, make_pframe_input, PFrameStack, Patch, PatchKind, RasterFrame, PATCH_SIZE};
use crate::store::{patch_file_name, read_patch, read_png, write_patch};
use crate::train::{SplitData, StreamData};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const PATCH_DIR: &str = "patches";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub patch_size: usize,
    /// Advance of the P-frame window; 3 gives non-overlapping triplets.
    pub triplet_stride: usize,
    pub split_by: SplitBy,
    pub split: SplitRatios,
    /// Keep only videos from these devices; empty keeps all.
    pub devices: Vec<String>,
    /// Class order for labels; empty uses first appearance in the labels file.
    pub classes: Vec<String>,
    pub include_pframes: bool,
    pub seed: u64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            patch_size: PATCH_SIZE,
            triplet_stride: 3,
            split_by: SplitBy::Video,
            split: SplitRatios::default(),
            devices: Vec::new(),
            classes: Vec::new(),
            include_pframes: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct IngestSummary {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    pub patches_written: usize,
    pub diagnostics: Vec<String>,
}

impl IngestSummary {
    /// Per-class counts for every (kind, split) present in the manifest.
    pub fn count_lines(&self) -> Vec<String> {
        let names = self.manifest.class_names();
        let mut lines = Vec::new();
        for kind in [PatchKind::I, PatchKind::P] {
            for split in Split::ALL {
                let counts = self.manifest.class_counts(kind, split);
                if counts.iter().all(|&c| c == 0) {
                    continue;
                }
                let cells: Vec<String> = names.iter().zip(&counts).map(|(n, c)| format!("{n}={c}")).collect();
                lines.push(format!("{kind:?} {split}: {}", cells.join(" ")));
            }
        }
        lines
    }
}

fn load_frame(root: &Path, record: &FrameRecord) -> Result<RasterFrame> {
    let path = root.join(&record.frame_path);
    if !path.is_file() {
        return Err(Error::Input(format!(
            "frame file {} missing for record (video {}, frame {})",
            path.display(),
            record.video_id,
            record.frame_index
        )));
    }
    let frame = read_png(&path)?;
    if (frame.width, frame.height) != (record.width, record.height) {
        return Err(Error::Input(format!(
            "record (video {}, frame {}) declares {}x{} but {} is {}x{}",
            record.video_id,
            record.frame_index,
            record.width,
            record.height,
            path.display(),
            frame.width,
            frame.height
        )));
    }
    Ok(frame)
}

/// Parses the sidecar and labels, crops residual patches into
/// `out/patches`, and writes a balanced, split manifest to
/// `out/manifest.jsonl`. Frame paths resolve against the sidecar's folder.
pub fn run_ingest(sidecar: &Path, labels: &Path, out: &Path, cfg: &IngestConfig) -> Result<IngestSummary> {
    if cfg.triplet_stride == 0 {
        return Err(Error::Config("triplet stride must be positive".into()));
    }
    if cfg.patch_size == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    cfg.split.validate()?;
    let root = sidecar.parent().unwrap_or(Path::new("."));
    let index = read_frame_index(sidecar)?;
    for d in &index.diagnostics {
        log::warn!("{d}");
    }
    let video_labels = read_labels(labels)?;

    let class_names: Vec<String> = if cfg.classes.is_empty() {
        let mut seen = Vec::new();
        for v in &video_labels {
            if !seen.contains(&v.class) {
                seen.push(v.class.clone());
            }
        }
        seen
    } else {
        cfg.classes.clone()
    };
    let wanted: BTreeSet<&str> = cfg.devices.iter().map(String::as_str).collect();
    let mut label_of: BTreeMap<&str, u32> = BTreeMap::new();
    for v in &video_labels {
        if !wanted.is_empty() && !wanted.contains(v.device.as_str()) {
            continue;
        }
        let Some(c) = class_names.iter().position(|c| *c == v.class) else {
            return Err(Error::Config(format!(
                "video `{}` has class `{}` outside the configured classes",
                v.video_id, v.class
            )));
        };
        label_of.insert(&v.video_id, c as u32);
    }
    let known: BTreeSet<&str> = video_labels.iter().map(|v| v.video_id.as_str()).collect();
    if let Some(r) = index.records.iter().find(|r| !known.contains(r.video_id.as_str())) {
        return Err(Error::Input(format!("video `{}` in the sidecar has no label", r.video_id)));
    }
    let records: Vec<FrameRecord> = index
        .records
        .iter()
        .filter(|r| label_of.contains_key(r.video_id.as_str()))
        .cloned()
        .collect();

    let patch_dir = out.join(PATCH_DIR);
    std::fs::create_dir_all(&patch_dir).at(&patch_dir)?;
    let mut listing = Vec::new();
    let mut emit = |patches: Vec<Patch>| -> Result<()> {
        for p in patches {
            let rel = format!("{PATCH_DIR}/{}", patch_file_name(&p));
            write_patch(&out.join(&rel), &p)?;
            listing.push(PatchListing {
                patch_path: rel,
                label: p.label,
                kind: p.kind,
                video_id: p.origin.video_id,
            });
        }
        Ok(())
    };

    for r in select_iframes(&records) {
        let frame = load_frame(root, &r)?;
        emit(make_iframe_input(&frame, &r.video_id, r.frame_index, label_of[r.video_id.as_str()], cfg.patch_size)?)?;
    }
    if cfg.include_pframes {
        for t in select_pframe_triplets(&records, cfg.triplet_stride)? {
            let [a, b, c] = &t.frames;
            let stack = PFrameStack {
                video_id: t.video_id().to_owned(),
                center_index: t.center_index(),
                frames: [load_frame(root, a)?, load_frame(root, b)?, load_frame(root, c)?],
            };
            emit(make_pframe_input(&stack, label_of[t.video_id()], cfg.patch_size)?)?;
        }
    }
    let patches_written = listing.len();
    let manifest = build_manifest(&listing, &class_names, cfg.split, cfg.split_by, cfg.seed)?;
    let manifest_path = out.join(MANIFEST_FILE);
    manifest.save(&manifest_path)?;
    Ok(IngestSummary {
        manifest,
        manifest_path,
        patches_written,
        diagnostics: index.diagnostics,
    })
}

/// Reads the patches of one (kind, split) into labelled tensors. Patch paths
/// resolve against `root`, normally the manifest's folder.
pub fn load_stream_data(manifest: &Manifest, root: &Path, kind: PatchKind, split: Split) -> Result<StreamData> {
    let mut data = StreamData::default();
    for e in manifest.select(kind, split) {
        let path = root.join(&e.patch_path);
        let patch = read_patch(&path)?;
        if patch.label != e.label || patch.kind != e.kind {
            return Err(Error::Input(format!(
                "patch {} disagrees with its manifest entry",
                path.display()
            )));
        }
        data.examples.push((patch.to_tensor(), e.label as usize));
        data.origins.push(patch.origin);
    }
    Ok(data)
}

pub fn load_split_data(manifest: &Manifest, root: &Path, kind: PatchKind) -> Result<SplitData> {
    Ok(SplitData {
        train: load_stream_data(manifest, root, kind, Split::Train)?,
        val: load_stream_data(manifest, root, kind, Split::Val)?,
        test: load_stream_data(manifest, root, kind, Split::Test)?,
    })
}
