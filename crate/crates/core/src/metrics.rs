//! Image-quality metrics and evaluation reports.
//!
//! PSNR and SSIM compare de-normalized 8-bit images. PSNR is the mean of the
//! per-channel values; SSIM runs on BT.601 luma. MSE in reports is measured
//! in the normalized `[-1, 1]` domain, matching the training objective.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::pyramid_data::{ImagePyramid, ImageTensor};
use crate::reconstructor::PyramidReconstructor;
use crate::store::write_atomic;
use crate::trainer::{AblationResult, EncodedDataset};

pub const PEAK_8BIT: f64 = 255.0;

/// Note written at the top of every report.
pub const COLOR_NOTE: &str = "psnr: mean over channels, 8-bit; ssim: luma (0.299 R + 0.587 G + 0.114 B), 8-bit; mse: [-1, 1] domain";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, peak: PEAK_8BIT }
    }
}

fn same_shape(x: &ImageTensor, y: &ImageTensor) -> Result<()> {
    if (x.channels(), x.height(), x.width()) != (y.channels(), y.height(), y.width()) {
        return Err(Error::Shape(format!(
            "cannot compare {}x{}x{} with {}x{}x{}",
            x.channels(),
            x.height(),
            x.width(),
            y.channels(),
            y.height(),
            y.width()
        )));
    }
    Ok(())
}

/// `10 log10(peak^2 / mse)`; `+inf` when `mse == 0`.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// PSNR of two 8-bit sample planes.
pub fn psnr_u8(x: &[u8], y: &[u8], peak: f64) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Shape(format!("cannot compare {} samples with {}", x.len(), y.len())));
    }
    let sum: f64 = x.iter().zip(y).map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2)).sum();
    Ok(psnr_from_mse(sum / x.len() as f64, peak))
}

/// PSNR in dB after de-normalizing both images to 8 bits, averaged over
/// channels.
pub fn psnr(x: &ImageTensor, y: &ImageTensor, peak: f64) -> Result<f64> {
    same_shape(x, y)?;
    let (a, b) = (x.to_u8(), y.to_u8());
    let plane = x.height() * x.width();
    let mut total = 0.0;
    for c in 0..x.channels() {
        total += psnr_u8(&a[c * plane..(c + 1) * plane], &b[c * plane..(c + 1) * plane], peak)?;
    }
    Ok(total / x.channels() as f64)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let center = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - center).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian filter, valid region only.
fn filter_valid(plane: &[f64], width: usize, height: usize, w: &[f64]) -> Vec<f64> {
    let n = w.len();
    let (ow, oh) = (width - n + 1, height - n + 1);
    let mut rows = vec![0.0; height * ow];
    for y in 0..height {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| w[i] * plane[y * width + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| w[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two `width x height` planes of equal range.
pub fn ssim_plane(x: &[f64], y: &[f64], width: usize, height: usize, p: &SsimParams) -> Result<f64> {
    if x.len() != width * height || y.len() != width * height {
        return Err(Error::Shape(format!("planes of {} and {} values are not {width}x{height}", x.len(), y.len())));
    }
    if width < p.window || height < p.window {
        return Err(Error::Shape(format!("{width}x{height} image is smaller than the {} pixel SSIM window", p.window)));
    }
    let w = gaussian_window(p.window, p.sigma);
    let f = |v: &[f64]| filter_valid(v, width, height, &w);
    let product = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<_>>();
    let (mx, my) = (f(x), f(y));
    let (sxx, syy, sxy) = (f(&product(x, x)), f(&product(y, y)), f(&product(x, y)));
    let c1 = (p.k1 * p.peak).powi(2);
    let c2 = (p.k2 * p.peak).powi(2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// 8-bit luma plane; the single channel for grayscale images.
pub fn luma(image: &ImageTensor) -> Vec<f64> {
    let samples = image.to_u8();
    let plane = image.height() * image.width();
    match image.channels() {
        1 => samples.iter().map(|&v| f64::from(v)).collect(),
        3 => (0..plane)
            .map(|i| 0.299 * f64::from(samples[i]) + 0.587 * f64::from(samples[plane + i]) + 0.114 * f64::from(samples[2 * plane + i]))
            .collect(),
        c => (0..plane).map(|i| (0..c).map(|k| f64::from(samples[k * plane + i])).sum::<f64>() / c as f64).collect(),
    }
}

/// SSIM of the 8-bit luma of two images.
pub fn ssim(x: &ImageTensor, y: &ImageTensor, params: &SsimParams) -> Result<f64> {
    same_shape(x, y)?;
    ssim_plane(&luma(x), &luma(y), x.width(), x.height(), params)
}

/// Mean squared difference in the normalized domain.
pub fn mse(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    same_shape(x, y)?;
    let sum: f64 = x.data().iter().zip(y.data()).map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2)).sum();
    Ok(sum / x.data().len() as f64)
}

fn finite_or_string<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(&v.to_string())
    }
}

fn opt_finite_or_string<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => finite_or_string(v, s),
        None => s.serialize_none(),
    }
}

/// Mean metrics of one pyramid level.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelQuality {
    pub stage: usize,
    pub side: usize,
    #[serde(serialize_with = "finite_or_string")]
    pub psnr: f64,
    /// `None` for levels smaller than the SSIM window.
    #[serde(serialize_with = "opt_finite_or_string")]
    pub ssim: Option<f64>,
    pub mse: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QualityReport {
    pub dataset: String,
    pub compression_ratio: f64,
    /// Measurements per channel handed to the reconstructor.
    pub available: usize,
    /// Depth reached by every sample.
    pub depth: usize,
    pub levels: Vec<LevelQuality>,
    pub samples: usize,
    pub config_hash: String,
}

impl QualityReport {
    /// The deepest reconstructed level.
    pub fn final_level(&self) -> &LevelQuality {
        self.levels.last().expect("reports have at least one level")
    }
}

#[derive(Default)]
struct Accumulator {
    psnr: f64,
    ssim: Option<f64>,
    mse: f64,
    n: usize,
}

/// Metrics of one reconstructed level against its reference.
pub fn level_metrics(out: &ImageTensor, reference: &ImageTensor) -> Result<(f64, Option<f64>, f64)> {
    let params = SsimParams::default();
    let s = if out.width() >= params.window && out.height() >= params.window { Some(ssim(out, reference, &params)?) } else { None };
    Ok((psnr(out, reference, PEAK_8BIT)?, s, mse(out, reference)?))
}

/// Truncates each sample's measurements to `floor(N / cr)` per channel,
/// reconstructs, and averages metrics of every level against the matching
/// pyramid level. Samples are processed in order and summed sequentially.
pub fn evaluate(
    reconstructor: &dyn PyramidReconstructor,
    data: &EncodedDataset,
    signal_dim: usize,
    ratios: &[f64],
    dataset: &str,
    config_hash: &str,
) -> Result<Vec<QualityReport>> {
    if data.is_empty() {
        return Err(Error::Data(format!("{dataset}: no samples to evaluate")));
    }
    let mut reports = Vec::with_capacity(ratios.len());
    for &cr in ratios {
        if !(cr >= 1.0 && cr.is_finite()) {
            return Err(Error::Config(format!("compression ratio must be at least 1, got {cr}")));
        }
        let available = (signal_dim as f64 / cr).floor() as usize;
        let mut acc: Vec<Accumulator> = Vec::new();
        for i in 0..data.len() {
            let set = data.measurement_set(i).truncated(available);
            let out = reconstructor.reconstruct(&set)?;
            let truth = data.pyramid(i);
            if acc.is_empty() {
                acc = (0..out.depth()).map(|_| Accumulator::default()).collect();
            } else if acc.len() != out.depth() {
                return Err(Error::Data(format!("sample {i} reached depth {} instead of {}", out.depth(), acc.len())));
            }
            accumulate(&mut acc, &out, &truth)?;
        }
        let levels = acc
            .iter()
            .enumerate()
            .map(|(s, a)| LevelQuality {
                stage: s + 1,
                side: data.pyramid(0).level(s + 1).side(),
                psnr: a.psnr / a.n as f64,
                ssim: a.ssim.map(|v| v / a.n as f64),
                mse: a.mse / a.n as f64,
                samples: a.n,
            })
            .collect();
        reports.push(QualityReport {
            dataset: dataset.to_string(),
            compression_ratio: cr,
            available,
            depth: acc.len(),
            levels,
            samples: data.len(),
            config_hash: config_hash.to_string(),
        });
    }
    Ok(reports)
}

fn accumulate(acc: &mut [Accumulator], out: &ImagePyramid, truth: &ImagePyramid) -> Result<()> {
    for (s, a) in acc.iter_mut().enumerate() {
        let (p, q, m) = level_metrics(out.level(s + 1), truth.level(s + 1))?;
        a.psnr += p;
        a.mse += m;
        a.ssim = q.map(|v| a.ssim.unwrap_or(0.0) + v);
        a.n += 1;
    }
    Ok(())
}

pub const REPORT_HEADER: &str = "dataset,compression_ratio,available,depth,stage,side,psnr_db,ssim,mse,samples";

/// One row per (report, level).
pub fn reports_csv(reports: &[QualityReport], config_hash: &str) -> String {
    let mut out = format!("# config_hash={config_hash}\n# {COLOR_NOTE}\n{REPORT_HEADER}\n");
    for r in reports {
        for l in &r.levels {
            let ssim = l.ssim.map_or(String::new(), |v| v.to_string());
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.dataset, r.compression_ratio, r.available, r.depth, l.stage, l.side, l.psnr, ssim, l.mse, l.samples
            )
            .expect("string write");
        }
    }
    out
}

/// Writes `<stem>.csv` and `<stem>.json` into `dir`.
pub fn write_reports(dir: &Path, stem: &str, reports: &[QualityReport], config_hash: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join(format!("{stem}.csv")), reports_csv(reports, config_hash).as_bytes())?;
    let json = serde_json::json!({ "config_hash": config_hash, "note": COLOR_NOTE, "reports": reports });
    write_atomic(&dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&json).expect("report serializes").as_bytes())
}

/// Per-stage MSE curves of a fusion ablation over several seeds,
/// plot-ready.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCurves {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<AblationResult>,
}

fn mean_curve<'a>(runs: impl Iterator<Item = &'a Vec<f64>> + Clone) -> Vec<f64> {
    let n = runs.clone().count();
    let stages = runs.clone().map(Vec::len).min().unwrap_or(0);
    (0..stages).map(|s| runs.clone().map(|r| r[s]).sum::<f64>() / n as f64).collect()
}

impl AblationCurves {
    pub fn fused_mean(&self) -> Vec<f64> {
        mean_curve(self.runs.iter().map(|r| &r.fused))
    }

    pub fn no_fusion_mean(&self) -> Vec<f64> {
        mean_curve(self.runs.iter().map(|r| &r.no_fusion))
    }

    pub fn fused_own_level_mean(&self) -> Vec<f64> {
        mean_curve(self.runs.iter().map(|r| &r.fused_own_level))
    }

    pub fn no_fusion_own_level_mean(&self) -> Vec<f64> {
        mean_curve(self.runs.iter().map(|r| &r.no_fusion_own_level))
    }

    /// Columns: variant, reference (`full` or `own_level`), seed (or
    /// `mean`), stage, test MSE.
    pub fn csv(&self) -> String {
        let mut out = format!("# config_hash={}\nvariant,reference,seed,stage,test_mse\n", self.config_hash);
        type Pick = fn(&AblationResult) -> &Vec<f64>;
        let curves: [(&str, &str, Pick); 4] = [
            ("fused", "full", |r| &r.fused),
            ("no_fusion", "full", |r| &r.no_fusion),
            ("fused", "own_level", |r| &r.fused_own_level),
            ("no_fusion", "own_level", |r| &r.no_fusion_own_level),
        ];
        for (variant, reference, pick) in curves {
            for (seed, run) in self.seeds.iter().zip(&self.runs) {
                for (s, v) in pick(run).iter().enumerate() {
                    writeln!(out, "{variant},{reference},{seed},{},{v}", s + 1).expect("string write");
                }
            }
            for (s, v) in mean_curve(self.runs.iter().map(pick)).iter().enumerate() {
                writeln!(out, "{variant},{reference},mean,{},{v}", s + 1).expect("string write");
            }
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("ablation.csv"), self.csv().as_bytes())?;
        let json = serde_json::to_string_pretty(self).expect("curves serialize");
        write_atomic(&dir.join("ablation.json"), json.as_bytes())
    }
}
