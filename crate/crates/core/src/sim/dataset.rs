//! Artefact–clean pair dataset generation.
//!
//! Layout written under `out_dir`:
//! `clean/<frame>.spmf`, `artefact/<id>.spmf`, `mask/<id>.pgm` and
//! `manifest.jsonl`. Every random choice is derived from the dataset seed and
//! the frame index, so output is identical across runs.

use super::{
    simulate_gain_noise, simulate_line_dropout, simulate_tip_tailing, transplant_artefact_patch, ArtefactSpec, Blob,
    SimError, TipKernel,
};
use crate::frame::{MaskImage, ScanFrame};
use crate::io::{load_frame, save_mask, save_spmf, ImageIoError};
use crate::manifest::{write_manifest, ArtefactClass, ManifestEntry, ManifestError, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid dataset configuration: {0}")]
    Config(String),
}

/// Number of masks drawn per clean frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskCount {
    Fixed(u32),
    /// Rounded normal draw clipped to `[min, max]`.
    Gaussian { mean: f64, sd: f64, min: u32, max: u32 },
}

impl Default for MaskCount {
    fn default() -> Self {
        MaskCount::Gaussian {
            mean: 10.0,
            sd: 3.1,
            min: 1,
            max: 25,
        }
    }
}

pub fn draw_mask_count(count: MaskCount, rng: &mut impl Rng) -> u32 {
    match count {
        MaskCount::Fixed(k) => k,
        MaskCount::Gaussian { mean, sd, min, max } => {
            let normal = Normal::new(mean, sd).expect("finite positive sd");
            let k = normal.sample(rng).round();
            k.clamp(min as f64, max as f64) as u32
        }
    }
}

/// A real artefact patch that can be transplanted onto clean frames.
#[derive(Debug, Clone)]
pub struct Donor {
    pub frame: ScanFrame,
    pub mask: MaskImage,
    pub class: ArtefactClass,
}

#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub masks_per_frame: MaskCount,
    /// Relative weights over [`ArtefactClass::ALL`].
    pub class_weights: [f64; 4],
    pub donors: Vec<Donor>,
    /// Probability of using a donor patch instead of a simulator, when donors exist.
    pub donor_ratio: f64,
    /// Fraction of frames (not masks) assigned to the bench split.
    pub bench_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            masks_per_frame: MaskCount::default(),
            class_weights: [1.0; 4],
            donors: Vec::new(),
            donor_ratio: 0.5,
            bench_fraction: 0.0,
            seed: 0,
        }
    }
}

fn pick_class(weights: &[f64; 4], rng: &mut impl Rng) -> ArtefactClass {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (class, &w) in ArtefactClass::ALL.iter().zip(weights) {
        if u < w {
            return *class;
        }
        u -= w;
    }
    ArtefactClass::PhaseHop
}

/// Draws a random artefact of `class` and applies it. Tip tailing is confined
/// to a random window so the pair stays a local inpainting problem.
pub fn random_artefact(
    frame: &ScanFrame,
    class: ArtefactClass,
    rng: &mut impl Rng,
) -> Result<(ScanFrame, MaskImage, ArtefactClass), SimError> {
    let (w, h) = frame.dims();
    match class {
        ArtefactClass::LineDropout => {
            let n = rng.random_range(1..=3u32).min(h);
            let mut rows: Vec<u32> = Vec::new();
            while rows.len() < n as usize {
                let r = rng.random_range(0..h);
                if !rows.contains(&r) {
                    rows.push(r);
                }
            }
            rows.sort_unstable();
            let level = if rng.random_bool(0.5) {
                if rng.random_bool(0.5) {
                    1.0
                } else {
                    0.0
                }
            } else {
                rng.random::<f32>()
            };
            let (f, m) = simulate_line_dropout(frame, &rows, level)?;
            Ok((f, m, class))
        }
        ArtefactClass::GainNoise => {
            let band = rng.random_range(2..=8u32).min(h);
            let r0 = rng.random_range(0..=h - band);
            let amplitude = rng.random_range(0.05..0.3f32);
            let (f, m) = simulate_gain_noise(frame, r0, r0 + band, amplitude, rng.random())?;
            Ok((f, m, class))
        }
        ArtefactClass::TipTailing => {
            for _ in 0..8 {
                let radius = rng.random_range(2..=4u32);
                if 2 * radius + 1 > w.min(h) {
                    break;
                }
                let tip = TipKernel::paraboloid(radius, rng.random_range(0.005..0.04), rng.random_range(-0.6..0.6))?;
                let (tailed, change) = simulate_tip_tailing(frame, &tip)?;
                let bw = rng.random_range(12..=32u32).min(w);
                let bh = rng.random_range(12..=32u32).min(h);
                let x0 = rng.random_range(0..=w - bw);
                let y0 = rng.random_range(0..=h - bh);
                let window = MaskImage::from_fn(w, h, |x, y| x >= x0 && x < x0 + bw && y >= y0 && y < y0 + bh);
                let mask = change.intersection(&window)?;
                if mask.is_empty() {
                    continue;
                }
                let pixels = frame
                    .pixels()
                    .iter()
                    .zip(tailed.pixels())
                    .zip(mask.bits())
                    .map(|((&a, &b), &m)| if m { b } else { a })
                    .collect();
                return Ok((frame.with_pixels(pixels)?, mask, class));
            }
            // flat frames show no tailing; fall back to a dropout
            random_artefact(frame, ArtefactClass::LineDropout, rng)
        }
        ArtefactClass::PhaseHop => {
            let n = rng.random_range(1..=3);
            let max_r = (w.min(h) / 4).clamp(1, 8);
            let blobs: Vec<Blob> = (0..n)
                .map(|_| Blob {
                    cx: rng.random_range(0..w),
                    cy: rng.random_range(0..h),
                    radius: rng.random_range(max_r.min(3)..=max_r),
                })
                .collect();
            let spec = ArtefactSpec::PhaseHop {
                blobs,
                hop_sign: if rng.random_bool(0.5) { 1 } else { -1 },
                seed: rng.random(),
            };
            let (f, m) = spec.apply(frame)?;
            Ok((f, m, class))
        }
    }
}

fn transplant_random(
    frame: &ScanFrame,
    donor: &Donor,
    rng: &mut impl Rng,
) -> Result<Option<(ScanFrame, MaskImage)>, SimError> {
    let Some((x0, y0, x1, y1)) = donor.mask.bounding_box() else {
        return Ok(None);
    };
    let (w, h) = frame.dims();
    let (bw, bh) = (x1 - x0 + 1, y1 - y0 + 1);
    if bw > w || bh > h {
        return Ok(None);
    }
    let tx = rng.random_range(0..=w - bw) as i32;
    let ty = rng.random_range(0..=h - bh) as i32;
    transplant_artefact_patch(frame, &donor.frame, &donor.mask, (tx - x0 as i32, ty - y0 as i32)).map(Some)
}

/// Writes the artefact/mask pairs for in-memory clean frames `(frame_id, frame)`.
pub fn generate_pairs_from_frames(
    frames: &[(String, ScanFrame)],
    out_dir: impl AsRef<Path>,
    cfg: &DatasetConfig,
) -> Result<Vec<ManifestEntry>, DatasetError> {
    if cfg.class_weights.iter().any(|w| !(*w >= 0.0)) || cfg.class_weights.iter().sum::<f64>() <= 0.0 {
        return Err(DatasetError::Config("class weights must be non-negative with positive sum".into()));
    }
    if !(0.0..=1.0).contains(&cfg.donor_ratio) || !(0.0..=1.0).contains(&cfg.bench_fraction) {
        return Err(DatasetError::Config("ratios must lie in [0, 1]".into()));
    }
    let out = out_dir.as_ref();
    for sub in ["clean", "artefact", "mask"] {
        fs::create_dir_all(out.join(sub))?;
    }
    let n_bench = (frames.len() as f64 * cfg.bench_fraction).round() as usize;
    let mut entries = Vec::new();
    for (index, (frame_id, frame)) in frames.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index as u64 + 1);
        let clean_rel = format!("clean/{frame_id}.spmf");
        save_spmf(frame, out.join(&clean_rel))?;
        // trailing frames form the bench split
        let split = if index >= frames.len() - n_bench {
            Split::Bench
        } else {
            Split::Train
        };
        let k = draw_mask_count(cfg.masks_per_frame, &mut rng);
        for j in 0..k {
            let id = format!("{frame_id}_{j:02}");
            let donor_pick = if !cfg.donors.is_empty() && rng.random_bool(cfg.donor_ratio) {
                let donor = &cfg.donors[rng.random_range(0..cfg.donors.len())];
                transplant_random(frame, donor, &mut rng)?.map(|(f, m)| (f, m, donor.class))
            } else {
                None
            };
            let (artefact, mask, class) = match donor_pick {
                Some(t) => t,
                None => {
                    let class = pick_class(&cfg.class_weights, &mut rng);
                    random_artefact(frame, class, &mut rng)?
                }
            };
            let artefact_rel = format!("artefact/{id}.spmf");
            let mask_rel = format!("mask/{id}.pgm");
            save_spmf(&artefact, out.join(&artefact_rel))?;
            save_mask(&mask, out.join(&mask_rel))?;
            entries.push(ManifestEntry {
                id,
                clean_path: clean_rel.clone(),
                artefact_path: artefact_rel,
                mask_path: mask_rel,
                ignore_path: None,
                channel: frame.channel(),
                scan_size_um: frame.scan_size_um(),
                z_scale: frame.z_scale(),
                split,
                artefact_class: class,
            });
        }
    }
    write_manifest(out.join("manifest.jsonl"), &entries)?;
    Ok(entries)
}

/// Loads clean frames from disk (ids are file stems) and generates pairs.
pub fn generate_pair_dataset(
    clean_paths: &[PathBuf],
    out_dir: impl AsRef<Path>,
    cfg: &DatasetConfig,
) -> Result<Vec<ManifestEntry>, DatasetError> {
    let mut frames = Vec::with_capacity(clean_paths.len());
    for p in clean_paths {
        let id = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| DatasetError::Config(format!("bad clean path {}", p.display())))?;
        frames.push((id, load_frame(p)?));
    }
    generate_pairs_from_frames(&frames, out_dir, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::Channel;
    use crate::manifest::read_manifest;
    use crate::sim::{synthetic_surface, SurfaceKind};

    #[test]
    fn mask_count_mean_matches_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000;
        let total: u64 = (0..n).map(|_| draw_mask_count(MaskCount::default(), &mut rng) as u64).sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 10.0).abs() < 0.1, "mean {mean}");
    }

    #[test]
    fn mask_count_clipping() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = MaskCount::Gaussian { mean: 0.0, sd: 10.0, min: 1, max: 25 };
        for _ in 0..1000 {
            let k = draw_mask_count(c, &mut rng);
            assert!((1..=25).contains(&k));
        }
    }

    #[test]
    fn expected_pair_count_for_training_subset() {
        // 739 frames at a mean of 10 masks each
        let mut rng = ChaCha8Rng::seed_from_u64(739);
        let total: u32 = (0..739).map(|_| draw_mask_count(MaskCount::default(), &mut rng)).sum();
        let three_sigma = 3.0 * 3.1 * (739f64).sqrt();
        assert!((total as f64 - 7390.0).abs() < three_sigma, "total {total}");
    }

    #[test]
    fn single_frame_single_mask() {
        let dir = tempfile::tempdir().unwrap();
        let f = synthetic_surface(32, 32, SurfaceKind::Grains, 3).unwrap();
        let cfg = DatasetConfig {
            masks_per_frame: MaskCount::Fixed(1),
            ..Default::default()
        };
        let entries = generate_pairs_from_frames(&[("f0".into(), f)], dir.path(), &cfg).unwrap();
        assert_eq!(entries.len(), 1);
        let m = dir.path().join("manifest.jsonl");
        let read = read_manifest(&m, true).unwrap();
        assert_eq!(read, entries);
        assert!(dir.path().join(&entries[0].artefact_path).exists());
    }

    #[test]
    fn ten_frames_deterministic() {
        let frames: Vec<_> = (0..10)
            .map(|i| (format!("f{i}"), synthetic_surface(24, 24, SurfaceKind::Mixed, i).unwrap()))
            .collect();
        let cfg = DatasetConfig {
            seed: 99,
            bench_fraction: 0.2,
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ea = generate_pairs_from_frames(&frames, a.path(), &cfg).unwrap();
        let eb = generate_pairs_from_frames(&frames, b.path(), &cfg).unwrap();
        assert_eq!(ea, eb);
        let ma = fs::read(a.path().join("manifest.jsonl")).unwrap();
        assert_eq!(ma, fs::read(b.path().join("manifest.jsonl")).unwrap());
        for e in &ea {
            assert_eq!(
                fs::read(a.path().join(&e.artefact_path)).unwrap(),
                fs::read(b.path().join(&e.artefact_path)).unwrap()
            );
        }
        // count = sum over frames of the per-frame draws
        let mut expected = 0;
        for i in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            rng.set_stream(i + 1);
            expected += draw_mask_count(MaskCount::default(), &mut rng) as usize;
        }
        assert_eq!(ea.len(), expected);
        let bench_frames: std::collections::BTreeSet<_> =
            ea.iter().filter(|e| e.split == Split::Bench).map(|e| e.frame_id()).collect();
        assert_eq!(bench_frames.len(), 2);
        assert!(ea.iter().all(|e| e.channel == Channel::Height));
    }

    #[test]
    fn artefacts_stay_inside_masks() {
        let frame = synthetic_surface(40, 40, SurfaceKind::Terraces, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for class in ArtefactClass::ALL {
            for _ in 0..5 {
                let (f, m, _) = random_artefact(&frame, class, &mut rng).unwrap();
                assert!(!m.is_empty());
                for ((a, b), &inside) in f.pixels().iter().zip(frame.pixels()).zip(m.bits()) {
                    assert!(inside || a.to_bits() == b.to_bits());
                }
            }
        }
    }

    #[test]
    fn donors_are_used() {
        let frame = synthetic_surface(24, 24, SurfaceKind::Domains, 1).unwrap();
        let donor_frame = ScanFrame::constant(24, 24, Channel::Height, 1.0).unwrap();
        let donor = Donor {
            mask: MaskImage::from_fn(24, 24, |x, y| (5..9).contains(&x) && (5..7).contains(&y)),
            frame: donor_frame,
            class: ArtefactClass::GainNoise,
        };
        let cfg = DatasetConfig {
            masks_per_frame: MaskCount::Fixed(6),
            donors: vec![donor],
            donor_ratio: 1.0,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let entries = generate_pairs_from_frames(&[("d".into(), frame)], dir.path(), &cfg).unwrap();
        assert!(entries.iter().all(|e| e.artefact_class == ArtefactClass::GainNoise));
        let m = crate::io::load_mask(dir.path().join(&entries[0].mask_path)).unwrap();
        assert_eq!(m.count(), 8);
    }
}
