//! Mask review state: sidecar persistence, revision checks, previews and
//! the export filter that drops rejected masks.

use serde::{Deserialize, Serialize};
use spm_core::io::{encode_pgm_mask, load_frame, load_mask};
use spm_core::manifest::{read_manifest, resolve, write_manifest};
use spm_core::mask::{measure_delta_h, FilterDecision, MaskRle};
use spm_core::{Channel, ManifestEntry, ManifestError, ScanFrame};
use std::collections::BTreeMap;
use std::fs::{self, File, TryLockError};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};
use thiserror::Error;

pub const MANIFEST_NAME: &str = "manifest.jsonl";
pub const LOCK_NAME: &str = ".review.lock";
/// Height contrast (nm) below which a mask is flagged for discarding.
pub const PHYSICS_DELTA_H_NM: f32 = 0.2;

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("dataset {0} is locked by another review service")]
    DatasetLocked(PathBuf),
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error("unknown frame `{0}`")]
    UnknownFrame(String),
    #[error("frame `{frame}` has no mask {index}")]
    UnknownMask { frame: String, index: usize },
    #[error("stale revision, current is {current}")]
    Conflict { current: u64 },
    #[error("cannot move from {from} to {to}")]
    InvalidTransition {
        from: ReviewStatus,
        to: ReviewStatus,
    },
    #[error("invalid mask payload: {0}")]
    BadMask(String),
    #[error("physics check needs a height frame, `{0}` is not one")]
    NotHeight(String),
    #[error("corrupt review sidecar {path}: {msg}")]
    BadSidecar { path: PathBuf, msg: String },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Image(#[from] spm_core::io::ImageIoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReviewStatus {
    #[default]
    Pending,
    Accepted,
    Rejected,
    Edited,
}

impl ReviewStatus {
    fn rank(self) -> u8 {
        match self {
            ReviewStatus::Pending => 0,
            ReviewStatus::Accepted | ReviewStatus::Edited => 1,
            ReviewStatus::Rejected => 2,
        }
    }

    /// Transitions never go back in rank; accepted and edited may swap.
    pub fn can_become(self, next: ReviewStatus) -> bool {
        self == next || next.rank() > self.rank() || (self.rank() == 1 && next.rank() == 1)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ReviewStatus::Pending => "pending",
            ReviewStatus::Accepted => "accepted",
            ReviewStatus::Rejected => "rejected",
            ReviewStatus::Edited => "edited",
        }
    }
}

impl std::fmt::Display for ReviewStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Persisted review state of one mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ReviewState {
    pub frame_id: String,
    pub mask_index: usize,
    pub status: ReviewStatus,
    #[serde(default)]
    pub note: String,
    pub revision: u64,
    /// Milliseconds since the Unix epoch; 0 when never modified.
    #[serde(default)]
    pub modified_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSummary {
    pub id: String,
    pub channel: Channel,
    pub scan_size_um: f32,
    pub mask_count: usize,
    pub statuses: Vec<ReviewStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskView {
    pub revision: u64,
    pub status: ReviewStatus,
    pub note: String,
    pub rle: MaskRle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskUpdate {
    pub revision: u64,
    #[serde(default)]
    pub status: Option<ReviewStatus>,
    #[serde(default)]
    pub rle: Option<MaskRle>,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsCheck {
    pub delta_h_nm: f64,
    pub verdict: FilterDecision,
}

/// Sidecar path for a mask file: `mask/x.pgm` → `mask/x.review.json`.
pub fn sidecar_path(mask_path: &Path) -> PathBuf {
    mask_path.with_extension("review.json")
}

/// Writes `bytes` to a temporary sibling, syncs it and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
    Ok(())
}

/// Reads a sidecar; a missing file is a pending mask at revision 0.
pub fn read_sidecar(
    mask_path: &Path,
    frame_id: &str,
    index: usize,
) -> Result<ReviewState, ReviewError> {
    let p = sidecar_path(mask_path);
    match fs::read(&p) {
        Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| ReviewError::BadSidecar {
            path: p,
            msg: e.to_string(),
        }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(ReviewState {
            frame_id: frame_id.to_string(),
            mask_index: index,
            ..Default::default()
        }),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone)]
struct FrameRecord {
    clean_path: PathBuf,
    channel: Channel,
    scan_size_um: f32,
    /// Pairs drawn from this frame, sorted by id; mask index `k` is the position.
    masks: Vec<ManifestEntry>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn group_frames(entries: Vec<ManifestEntry>, manifest: &Path) -> BTreeMap<String, FrameRecord> {
    let mut frames: BTreeMap<String, FrameRecord> = BTreeMap::new();
    for e in entries {
        frames
            .entry(e.frame_id())
            .or_insert_with(|| FrameRecord {
                clean_path: resolve(manifest, &e.clean_path),
                channel: e.channel,
                scan_size_um: e.scan_size_um,
                masks: Vec::new(),
            })
            .masks
            .push(e);
    }
    for f in frames.values_mut() {
        f.masks.sort_by(|a, b| a.id.cmp(&b.id));
    }
    frames
}

/// On-disk review state of one dataset, held under an exclusive lock file.
/// Methods do no locking of their own; callers serialize writes per frame.
#[derive(Debug)]
pub struct ReviewStore {
    root: PathBuf,
    manifest: PathBuf,
    frames: BTreeMap<String, FrameRecord>,
    _lock: File,
}

impl ReviewStore {
    /// Opens `root`; a missing manifest is an empty dataset.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, ReviewError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let lock = File::options()
            .create(true)
            .truncate(false)
            .write(true)
            .open(root.join(LOCK_NAME))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(TryLockError::WouldBlock) => return Err(ReviewError::DatasetLocked(root)),
            Err(TryLockError::Error(e)) => return Err(e.into()),
        }
        let manifest = root.join(MANIFEST_NAME);
        let entries = if manifest.exists() {
            read_manifest(&manifest, true)?
        } else {
            Vec::new()
        };
        Ok(Self {
            frames: group_frames(entries, &manifest),
            root,
            manifest,
            _lock: lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn frame_ids(&self) -> impl Iterator<Item = &str> {
        self.frames.keys().map(String::as_str)
    }

    fn frame(&self, id: &str) -> Result<&FrameRecord, ReviewError> {
        self.frames
            .get(id)
            .ok_or_else(|| ReviewError::UnknownFrame(id.to_string()))
    }

    fn entry(&self, id: &str, k: usize) -> Result<&ManifestEntry, ReviewError> {
        self.frame(id)?
            .masks
            .get(k)
            .ok_or_else(|| ReviewError::UnknownMask {
                frame: id.to_string(),
                index: k,
            })
    }

    fn mask_path(&self, e: &ManifestEntry) -> PathBuf {
        resolve(&self.manifest, &e.mask_path)
    }

    pub fn state(&self, id: &str, k: usize) -> Result<ReviewState, ReviewError> {
        let e = self.entry(id, k)?;
        read_sidecar(&self.mask_path(e), id, k)
    }

    pub fn list_frames(&self) -> Result<Vec<FrameSummary>, ReviewError> {
        self.frames
            .iter()
            .map(|(id, f)| {
                let statuses = (0..f.masks.len())
                    .map(|k| self.state(id, k).map(|s| s.status))
                    .collect::<Result<_, _>>()?;
                Ok(FrameSummary {
                    id: id.clone(),
                    channel: f.channel,
                    scan_size_um: f.scan_size_um,
                    mask_count: f.masks.len(),
                    statuses,
                })
            })
            .collect()
    }

    pub fn get_mask(&self, id: &str, k: usize) -> Result<MaskView, ReviewError> {
        let e = self.entry(id, k)?;
        let path = self.mask_path(e);
        let state = read_sidecar(&path, id, k)?;
        let mask = load_mask(&path)?;
        Ok(MaskView {
            revision: state.revision,
            status: state.status,
            note: state.note,
            rle: MaskRle::encode(&mask),
        })
    }

    /// Applies an update if `update.revision` is current. The mask file and
    /// then the sidecar are replaced atomically before returning the new
    /// revision.
    pub fn put_mask(&self, id: &str, k: usize, update: &MaskUpdate) -> Result<u64, ReviewError> {
        let e = self.entry(id, k)?;
        let path = self.mask_path(e);
        let mut state = read_sidecar(&path, id, k)?;
        if update.revision != state.revision {
            return Err(ReviewError::Conflict {
                current: state.revision,
            });
        }
        let next = match (update.status, &update.rle) {
            (Some(s), _) => s,
            (None, Some(_)) => ReviewStatus::Edited,
            (None, None) => state.status,
        };
        if !state.status.can_become(next) {
            return Err(ReviewError::InvalidTransition {
                from: state.status,
                to: next,
            });
        }
        if let Some(rle) = &update.rle {
            let mask = rle
                .decode()
                .map_err(|e| ReviewError::BadMask(e.to_string()))?;
            let dims = load_frame(&self.frame(id)?.clean_path)?.dims();
            if mask.dims() != dims {
                return Err(ReviewError::BadMask(format!(
                    "mask is {}x{}, frame is {}x{}",
                    mask.width(),
                    mask.height(),
                    dims.0,
                    dims.1
                )));
            }
            write_atomic(&path, &encode_pgm_mask(&mask))?;
        }
        state.status = next;
        if let Some(note) = &update.note {
            state.note = note.clone();
        }
        state.revision += 1;
        state.modified_ms = now_ms();
        let json = serde_json::to_vec_pretty(&state).expect("review state serializes");
        write_atomic(&sidecar_path(&path), &json)?;
        Ok(state.revision)
    }

    /// 8-bit grayscale PNG of the clean frame, or of mask `k`'s artefact
    /// frame, stretched to the frame's own range.
    pub fn preview_png(&self, id: &str, k: Option<usize>) -> Result<Vec<u8>, ReviewError> {
        let path = match k {
            Some(k) => resolve(&self.manifest, &self.entry(id, k)?.artefact_path),
            None => self.frame(id)?.clean_path.clone(),
        };
        Ok(encode_preview_png(&load_frame(path)?))
    }

    /// Height contrast around the current mask against the clean frame.
    pub fn physics_check(&self, id: &str, k: usize) -> Result<PhysicsCheck, ReviewError> {
        let e = self.entry(id, k)?;
        let frame = load_frame(&self.frame(id)?.clean_path)?;
        if frame.channel() != Channel::Height {
            return Err(ReviewError::NotHeight(id.to_string()));
        }
        let mask = load_mask(self.mask_path(e))?;
        let delta_h_nm =
            measure_delta_h(&mask, &frame).map_err(|e| ReviewError::BadMask(e.to_string()))?;
        let verdict = if delta_h_nm < PHYSICS_DELTA_H_NM as f64 {
            FilterDecision::Discard
        } else {
            FilterDecision::Accept
        };
        Ok(PhysicsCheck {
            delta_h_nm,
            verdict,
        })
    }
}

/// Min-max stretched 8-bit grayscale PNG.
pub fn encode_preview_png(frame: &ScanFrame) -> Vec<u8> {
    let px = frame.pixels();
    let lo = px.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = px.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bytes: Vec<u8> = px
        .iter()
        .map(|&v| ((v - lo) / span * 255.0).round() as u8)
        .collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, frame.width(), frame.height());
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().expect("png header into memory");
        w.write_image_data(&bytes).expect("png data into memory");
    }
    out
}

/// Writes the manifest of `dataset_dir` minus every rejected mask to `out`.
/// Paths are rewritten as absolute when `out` lives elsewhere. Returns
/// `(kept, dropped)`.
pub fn export_reviewed(
    dataset_dir: impl AsRef<Path>,
    out: impl AsRef<Path>,
) -> Result<(usize, usize), ReviewError> {
    let root = dataset_dir.as_ref();
    let manifest = root.join(MANIFEST_NAME);
    let entries = read_manifest(&manifest, true)?;
    let frames = group_frames(entries.clone(), &manifest);
    let out = out.as_ref();
    let same_dir = match (out.parent().map(fs::canonicalize), fs::canonicalize(root)) {
        (Some(Ok(a)), Ok(b)) => a == b,
        _ => false,
    };
    let mut kept = Vec::new();
    for mut e in entries {
        let frame_id = e.frame_id();
        let k = frames[&frame_id]
            .masks
            .iter()
            .position(|m| m.id == e.id)
            .expect("grouped entry");
        let state = read_sidecar(&resolve(&manifest, &e.mask_path), &frame_id, k)?;
        if state.status == ReviewStatus::Rejected {
            continue;
        }
        if !same_dir {
            let abs = |p: &str| -> Result<String, ReviewError> {
                Ok(fs::canonicalize(resolve(&manifest, p))?
                    .to_string_lossy()
                    .into_owned())
            };
            e.clean_path = abs(&e.clean_path)?;
            e.artefact_path = abs(&e.artefact_path)?;
            e.mask_path = abs(&e.mask_path)?;
            if let Some(p) = &e.ignore_path {
                e.ignore_path = Some(abs(p)?);
            }
        }
        kept.push(e);
    }
    let total = frames.values().map(|f| f.masks.len()).sum::<usize>();
    write_manifest(out, &kept)?;
    Ok((kept.len(), total - kept.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ReviewStatus::*;

    #[test]
    fn transitions() {
        for s in [Pending, Accepted, Rejected, Edited] {
            assert!(s.can_become(s));
            assert!(Pending.can_become(s));
            assert_eq!(s.can_become(Pending), s == Pending);
        }
        assert!(Accepted.can_become(Edited) && Edited.can_become(Accepted));
        assert!(Accepted.can_become(Rejected) && Edited.can_become(Rejected));
        assert!(!Rejected.can_become(Accepted) && !Rejected.can_become(Edited));
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn sidecar_defaults_to_pending() {
        let dir = tempfile::tempdir().unwrap();
        let s = read_sidecar(&dir.path().join("m.pgm"), "f", 2).unwrap();
        assert_eq!((s.status, s.revision, s.mask_index), (Pending, 0, 2));
        assert_eq!(
            sidecar_path(Path::new("mask/a_01.pgm")),
            Path::new("mask/a_01.review.json")
        );
    }

    #[test]
    fn preview_is_stretched_png() {
        let f = ScanFrame::from_fn(4, 2, Channel::Height, |x, _| 0.2 + 0.1 * x as f32).unwrap();
        let png = encode_preview_png(&f);
        assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
        let dec = png::Decoder::new(std::io::Cursor::new(png));
        let mut r = dec.read_info().unwrap();
        let mut buf = vec![0; r.output_buffer_size()];
        let info = r.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (4, 2));
        assert_eq!(&buf[..4], &[0, 85, 170, 255]);
    }

    #[test]
    fn second_store_on_same_dataset_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let a = ReviewStore::open(dir.path()).unwrap();
        assert!(matches!(
            ReviewStore::open(dir.path()),
            Err(ReviewError::DatasetLocked(_))
        ));
        drop(a);
        ReviewStore::open(dir.path()).unwrap();
    }
}
