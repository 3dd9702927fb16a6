//! Benchmark harness: every method on every bench-split pair, scored inside
//! the pair's mask against the clean frame.

use spm_core::inpaint::{inpaint, InpaintMethod, InpaintParams};
use spm_core::io::{load_frame, load_mask};
use spm_core::manifest::{read_manifest, resolve};
use spm_core::metrics::score_restoration;
use spm_core::{ManifestError, MaskImage, ScanFrame, Split};
use spm_diffusion::{sample_inpaint, NoiseSchedule, ToyDenoiser};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;
use thiserror::Error;

pub const CSV_HEADER: [&str; 8] = [
    "method",
    "image_id",
    "psnr_db",
    "mse",
    "ssim",
    "lpips",
    "masked_pixels",
    "wall_ms",
];

/// `image_id` of the per-method summary rows.
pub const SUMMARY_ID: &str = "__mean__";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("manifest invalid: {0}")]
    ManifestInvalid(String),
    #[error("no methods requested")]
    NoMethods,
    #[error("the diffusion method needs a trained model")]
    MissingModel,
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("malformed bench csv: {0}")]
    BadCsv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<ManifestError> for BenchError {
    fn from(e: ManifestError) -> Self {
        BenchError::ManifestInvalid(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BenchMethod {
    Classic(InpaintMethod),
    Diffusion,
}

impl BenchMethod {
    /// The five classical baselines followed by the diffusion model.
    pub fn all() -> Vec<BenchMethod> {
        InpaintMethod::ALL
            .into_iter()
            .map(BenchMethod::Classic)
            .chain([BenchMethod::Diffusion])
            .collect()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BenchMethod::Classic(m) => m.as_str(),
            BenchMethod::Diffusion => "diffusion",
        }
    }
}

impl fmt::Display for BenchMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchMethod {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "diffusion" {
            return Ok(BenchMethod::Diffusion);
        }
        s.parse::<InpaintMethod>()
            .map(BenchMethod::Classic)
            .map_err(|_| BenchError::UnknownMethod(s.to_string()))
    }
}

/// Parses a comma-separated method list; `all` expands to every method.
pub fn parse_methods(list: &str) -> Result<Vec<BenchMethod>, BenchError> {
    let mut out = Vec::new();
    for tok in list.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        if tok == "all" {
            out.extend(BenchMethod::all());
        } else {
            out.push(tok.parse()?);
        }
    }
    if out.is_empty() {
        return Err(BenchError::NoMethods);
    }
    Ok(out)
}

/// One scored (method, image) pair. A failed method leaves the metrics at NaN
/// and carries the error message.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub method: String,
    pub image_id: String,
    pub psnr_db: f64,
    pub mse: f64,
    pub ssim: f64,
    pub masked_pixels: u32,
    pub wall_ms: f64,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub images: usize,
    pub failures: usize,
    pub mean_psnr_db: f64,
    pub mean_mse: f64,
    pub mean_ssim: f64,
    pub masked_pixels: u64,
    pub mean_wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    /// Method-major: all images of the first method, then the next.
    pub records: Vec<BenchRecord>,
    pub summary: Vec<MethodSummary>,
}

pub struct BenchConfig<'a> {
    pub methods: Vec<BenchMethod>,
    pub parallelism: usize,
    pub model: Option<&'a ToyDenoiser>,
    pub schedule: NoiseSchedule,
    pub seed: u64,
}

impl Default for BenchConfig<'_> {
    fn default() -> Self {
        Self {
            methods: InpaintMethod::ALL
                .into_iter()
                .map(BenchMethod::Classic)
                .collect(),
            parallelism: 1,
            model: None,
            schedule: NoiseSchedule::default(),
            seed: 0,
        }
    }
}

struct BenchImage {
    id: String,
    artefact: ScanFrame,
    clean: ScanFrame,
    mask: MaskImage,
}

fn load_bench_images(manifest: &Path) -> Result<Vec<BenchImage>, BenchError> {
    let entries = read_manifest(manifest, true)?;
    let mut images = Vec::new();
    for e in entries.into_iter().filter(|e| e.split == Split::Bench) {
        let load = |rel: &str| {
            load_frame(resolve(manifest, rel))
                .map_err(|err| BenchError::ManifestInvalid(format!("{}: {err}", e.id)))
        };
        let artefact = load(&e.artefact_path)?;
        let clean = load(&e.clean_path)?;
        let mask = load_mask(resolve(manifest, &e.mask_path))
            .map_err(|err| BenchError::ManifestInvalid(format!("{}: {err}", e.id)))?;
        if artefact.dims() != clean.dims() || mask.dims() != clean.dims() {
            return Err(BenchError::ManifestInvalid(format!(
                "{}: frame and mask sizes differ",
                e.id
            )));
        }
        images.push(BenchImage {
            id: e.id,
            artefact,
            clean,
            mask,
        });
    }
    Ok(images)
}

fn run_one(img: &BenchImage, index: usize, method: BenchMethod, cfg: &BenchConfig) -> BenchRecord {
    let start = Instant::now();
    let restored = match method {
        BenchMethod::Classic(m) => {
            inpaint(&img.artefact, &img.mask, &InpaintParams::new(m)).map_err(|e| e.to_string())
        }
        BenchMethod::Diffusion => match cfg.model {
            Some(model) => sample_inpaint(
                model,
                &img.artefact,
                &img.mask,
                &cfg.schedule,
                cfg.seed.wrapping_add(index as u64),
            )
            .map_err(|e| e.to_string()),
            None => Err(BenchError::MissingModel.to_string()),
        },
    };
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let scored = restored
        .and_then(|r| score_restoration(&r, &img.clean, &img.mask).map_err(|e| e.to_string()));
    let (psnr_db, mse, ssim, failure) = match scored {
        Ok(s) => (s.psnr_db, s.mse, s.ssim, None),
        Err(e) => (f64::NAN, f64::NAN, f64::NAN, Some(e)),
    };
    BenchRecord {
        method: method.to_string(),
        image_id: img.id.clone(),
        psnr_db,
        mse,
        ssim,
        masked_pixels: img.mask.count() as u32,
        wall_ms,
        failure,
    }
}

/// Per-method means over the successful rows, in record order.
pub fn summarize(records: &[BenchRecord]) -> Vec<MethodSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in records {
        if !order.contains(&r.method.as_str()) {
            order.push(&r.method);
        }
    }
    order
        .into_iter()
        .map(|method| {
            let rows: Vec<&BenchRecord> = records.iter().filter(|r| r.method == method).collect();
            let ok: Vec<&&BenchRecord> = rows.iter().filter(|r| r.failure.is_none()).collect();
            let n = ok.len() as f64;
            let mean = |f: fn(&BenchRecord) -> f64| {
                if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().map(|r| f(r)).sum::<f64>() / n
                }
            };
            MethodSummary {
                method: method.to_string(),
                images: rows.len(),
                failures: rows.len() - ok.len(),
                mean_psnr_db: mean(|r| r.psnr_db),
                mean_mse: mean(|r| r.mse),
                mean_ssim: mean(|r| r.ssim),
                masked_pixels: ok.iter().map(|r| r.masked_pixels as u64).sum(),
                mean_wall_ms: rows.iter().map(|r| r.wall_ms).sum::<f64>()
                    / rows.len().max(1) as f64,
            }
        })
        .collect()
}

/// Scores every method on every bench-split pair of `manifest`. Images are
/// processed in parallel; output order and values do not depend on
/// `parallelism`.
pub fn run_benchmark(
    manifest: impl AsRef<Path>,
    cfg: &BenchConfig,
) -> Result<BenchReport, BenchError> {
    if cfg.methods.is_empty() {
        return Err(BenchError::NoMethods);
    }
    if cfg.methods.contains(&BenchMethod::Diffusion) && cfg.model.is_none() {
        return Err(BenchError::MissingModel);
    }
    let images = load_bench_images(manifest.as_ref())?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Vec<BenchRecord>>>> = Mutex::new(vec![None; images.len()]);
    std::thread::scope(|s| {
        for _ in 0..cfg.parallelism.clamp(1, images.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(img) = images.get(i) else { break };
                let rows = cfg
                    .methods
                    .iter()
                    .map(|&m| run_one(img, i, m, cfg))
                    .collect();
                results.lock().expect("bench worker panicked")[i] = Some(rows);
            });
        }
    });
    let per_image: Vec<Vec<BenchRecord>> = results
        .into_inner()
        .expect("bench worker panicked")
        .into_iter()
        .map(|r| r.expect("every image processed"))
        .collect();
    let mut records = Vec::with_capacity(images.len() * cfg.methods.len());
    for m in 0..cfg.methods.len() {
        records.extend(per_image.iter().map(|rows| rows[m].clone()));
    }
    let summary = summarize(&records);
    Ok(BenchReport { records, summary })
}

fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

/// Writes records followed by one summary row per method.
pub fn write_csv<W: std::io::Write>(report: &BenchReport, out: W) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in &report.records {
        w.write_record([
            r.method.clone(),
            r.image_id.clone(),
            num(r.psnr_db),
            num(r.mse),
            num(r.ssim),
            String::new(),
            r.masked_pixels.to_string(),
            format!("{:.3}", r.wall_ms),
        ])?;
    }
    for s in &report.summary {
        w.write_record([
            s.method.clone(),
            SUMMARY_ID.to_string(),
            num(s.mean_psnr_db),
            num(s.mean_mse),
            num(s.mean_ssim),
            String::new(),
            s.masked_pixels.to_string(),
            format!("{:.3}", s.mean_wall_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(report: &BenchReport, path: impl AsRef<Path>) -> Result<(), BenchError> {
    let file = std::fs::File::create(path)?;
    write_csv(report, std::io::BufWriter::new(file))
}

/// Reads the per-image rows of a bench CSV, skipping summary rows.
pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<BenchRecord>, BenchError> {
    let mut rd = csv::Reader::from_path(path)?;
    if rd.headers()?.iter().ne(CSV_HEADER) {
        return Err(BenchError::BadCsv("unexpected header".into()));
    }
    let parse = |s: &str| -> Result<f64, BenchError> {
        if s.is_empty() {
            Ok(f64::NAN)
        } else {
            s.parse()
                .map_err(|_| BenchError::BadCsv(format!("bad number `{s}`")))
        }
    };
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        if &row[1] == SUMMARY_ID {
            continue;
        }
        let psnr_db = parse(&row[2])?;
        out.push(BenchRecord {
            method: row[0].to_string(),
            image_id: row[1].to_string(),
            psnr_db,
            mse: parse(&row[3])?,
            ssim: parse(&row[4])?,
            masked_pixels: row[6]
                .parse()
                .map_err(|_| BenchError::BadCsv(format!("bad count `{}`", &row[6])))?,
            wall_ms: parse(&row[7])?,
            failure: psnr_db.is_nan().then(|| "failed".to_string()),
        });
    }
    Ok(out)
}

/// PSNR pairs `(a, b)` for images both methods scored successfully, in the
/// order of `a`'s rows.
pub fn paired_psnr(records: &[BenchRecord], a: &str, b: &str) -> (Vec<f64>, Vec<f64>) {
    let mut xa = Vec::new();
    let mut xb = Vec::new();
    for ra in records
        .iter()
        .filter(|r| r.method == a && r.failure.is_none())
    {
        if let Some(rb) = records
            .iter()
            .find(|r| r.method == b && r.image_id == ra.image_id && r.failure.is_none())
        {
            xa.push(ra.psnr_db);
            xb.push(rb.psnr_db);
        }
    }
    (xa, xb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: &str, id: &str, psnr: f64) -> BenchRecord {
        BenchRecord {
            method: method.into(),
            image_id: id.into(),
            psnr_db: psnr,
            mse: if psnr.is_nan() { f64::NAN } else { 0.01 },
            ssim: if psnr.is_nan() { f64::NAN } else { 0.9 },
            masked_pixels: 10,
            wall_ms: 1.0,
            failure: psnr.is_nan().then(|| "x".into()),
        }
    }

    #[test]
    fn method_list_parsing() {
        assert_eq!(parse_methods("all").unwrap().len(), 6);
        assert_eq!(
            parse_methods("telea, diffusion").unwrap(),
            vec![
                BenchMethod::Classic(InpaintMethod::Telea),
                BenchMethod::Diffusion
            ]
        );
        assert!(matches!(parse_methods(""), Err(BenchError::NoMethods)));
        assert!(matches!(
            parse_methods("lama"),
            Err(BenchError::UnknownMethod(_))
        ));
    }

    #[test]
    fn summary_skips_failures() {
        let rows = vec![
            rec("a", "1", 20.0),
            rec("a", "2", f64::NAN),
            rec("a", "3", 30.0),
            rec("b", "1", 10.0),
        ];
        let s = summarize(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].images, s[0].failures), (3, 1));
        assert_eq!(s[0].mean_psnr_db, 25.0);
        assert_eq!(s[0].masked_pixels, 20);
        assert_eq!(s[1].mean_psnr_db, 10.0);
    }

    #[test]
    fn csv_roundtrip_keeps_values() {
        let records = vec![rec("a", "1", 21.123456789012345), rec("a", "2", f64::NAN)];
        let report = BenchReport {
            summary: summarize(&records),
            records,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        save_csv(&report, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("method,image_id,psnr_db,mse,ssim,lpips,masked_pixels,wall_ms\n"));
        assert!(text.contains("a,2,,,,,10,1.000\n"), "{text}");
        let back = read_csv(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].psnr_db.to_bits(), 21.123456789012345f64.to_bits());
        assert!(back[1].failure.is_some());
    }

    #[test]
    fn pairing_by_image() {
        let rows = vec![
            rec("a", "1", 20.0),
            rec("a", "2", 21.0),
            rec("b", "2", 19.0),
            rec("b", "1", f64::NAN),
        ];
        assert_eq!(paired_psnr(&rows, "a", "b"), (vec![21.0], vec![19.0]));
    }
}
