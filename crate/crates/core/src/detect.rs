//! Reconstruction-error scoring, thresholding and attribution of flagged
//! samples to their simulation and time window.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::nn::AutoencoderModel;
use crate::tensor::Tensor;
use crate::train::evaluate_split;

/// Default threshold for min-max normalized vortex frames.
pub const KARMAN_THRESHOLD: f64 = 3e-4;
/// Default threshold for byte-scale droplet volumes.
pub const DROPLET_THRESHOLD: f64 = 115.0;
pub const DEFAULT_TIME_BUCKET: u32 = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRecord {
    pub sample_index: usize,
    pub sim_id: u32,
    pub t_start: u32,
    pub t_end: u32,
    pub mse: f64,
    pub flagged: bool,
    pub percentile_rank: f64,
}

/// Fraction of `reference` scores that are `<= value`.
pub fn percentile_against(value: f64, reference: &[f64]) -> f64 {
    if reference.is_empty() {
        return 0.0;
    }
    reference.iter().filter(|&&r| r <= value).count() as f64 / reference.len() as f64
}

fn assign_percentiles(records: &mut [ScoreRecord]) {
    let mut sorted: Vec<f64> = records.iter().map(|r| r.mse).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    for r in records.iter_mut() {
        // rank of the last element tied with r
        let le = sorted.partition_point(|&v| v.total_cmp(&r.mse) != Ordering::Greater);
        r.percentile_rank = le as f64 / n;
    }
}

/// One record per sample of `split`, in manifest order.
pub fn score(model: &AutoencoderModel<f32>, manifest: &DatasetManifest, split: Split) -> Result<Vec<ScoreRecord>> {
    let idx = manifest.indices(split);
    if idx.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    let tensors: Vec<&Tensor<f32>> = idx.iter().map(|&i| &manifest.samples[i].values).collect();
    let mses = evaluate_split(model, &tensors)?;
    let mut records: Vec<ScoreRecord> = idx
        .iter()
        .zip(mses)
        .map(|(&i, mse)| {
            let s = &manifest.samples[i];
            ScoreRecord {
                sample_index: i,
                sim_id: s.sim_id,
                t_start: s.t_start,
                t_end: s.t_end,
                mse,
                flagged: false,
                percentile_rank: 0.0,
            }
        })
        .collect();
    assign_percentiles(&mut records);
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeBucket {
    pub t_start: u32,
    pub t_end: u32,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyReport {
    pub threshold: f64,
    /// Every scored record with its `flagged` bit set, in scoring order.
    pub records: Vec<ScoreRecord>,
    /// Flagged records by descending mse, ties by `(sim_id, t_start)`.
    pub flagged: Vec<ScoreRecord>,
    pub per_simulation: BTreeMap<u32, usize>,
    pub bucket_width: u32,
    pub per_time_bucket: Vec<TimeBucket>,
}

pub fn flag(records: &[ScoreRecord], threshold: f64) -> AnomalyReport {
    flag_with_buckets(records, threshold, DEFAULT_TIME_BUCKET)
}

pub fn flag_with_buckets(records: &[ScoreRecord], threshold: f64, bucket_width: u32) -> AnomalyReport {
    let bucket_width = bucket_width.max(1);
    let records: Vec<ScoreRecord> = records
        .iter()
        .map(|r| ScoreRecord {
            flagged: r.mse > threshold,
            ..r.clone()
        })
        .collect();
    let mut flagged: Vec<ScoreRecord> = records.iter().filter(|r| r.flagged).cloned().collect();
    flagged.sort_by(|a, b| {
        b.mse
            .total_cmp(&a.mse)
            .then(a.sim_id.cmp(&b.sim_id))
            .then(a.t_start.cmp(&b.t_start))
    });
    let mut per_simulation = BTreeMap::new();
    let mut buckets: BTreeMap<u32, usize> = BTreeMap::new();
    for r in &flagged {
        *per_simulation.entry(r.sim_id).or_insert(0) += 1;
        *buckets.entry(r.t_start / bucket_width).or_insert(0) += 1;
    }
    let per_time_bucket = buckets
        .into_iter()
        .map(|(b, count)| TimeBucket {
            t_start: b * bucket_width,
            t_end: b * bucket_width + bucket_width - 1,
            count,
        })
        .collect();
    AnomalyReport {
        threshold,
        records,
        flagged,
        per_simulation,
        bucket_width,
        per_time_bucket,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributionRow {
    pub sim_id: u32,
    pub t_start: u32,
    pub t_end: u32,
    pub n_steps: u32,
    pub sample_index: usize,
    pub mse: f64,
}

/// One row per flagged record, grouped by simulation and ordered by time.
pub fn attribute(report: &AnomalyReport, manifest: &DatasetManifest) -> Result<Vec<AttributionRow>> {
    let mut rows = report
        .flagged
        .iter()
        .map(|r| {
            let s = manifest
                .samples
                .get(r.sample_index)
                .filter(|s| s.sim_id == r.sim_id && s.t_start == r.t_start && s.t_end == r.t_end)
                .ok_or(Error::UnknownSample(r.sample_index))?;
            Ok(AttributionRow {
                sim_id: s.sim_id,
                t_start: s.t_start,
                t_end: s.t_end,
                n_steps: s.t_end - s.t_start + 1,
                sample_index: r.sample_index,
                mse: r.mse,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by_key(|r| (r.sim_id, r.t_start, r.sample_index));
    Ok(rows)
}

pub fn scores_csv(records: &[ScoreRecord]) -> String {
    let mut s = String::from("sample_index,sim_id,t_start,t_end,mse,flagged\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{:?},{}\n",
            r.sample_index, r.sim_id, r.t_start, r.t_end, r.mse, r.flagged as u8
        ));
    }
    s
}

#[derive(Serialize)]
struct ReportJson<'a> {
    threshold: f64,
    n_scored: usize,
    n_flagged: usize,
    flagged: &'a [ScoreRecord],
    per_simulation: &'a BTreeMap<u32, usize>,
    bucket_width: u32,
    per_time_bucket: &'a [TimeBucket],
    attribution: Option<&'a [AttributionRow]>,
}

pub fn report_json(report: &AnomalyReport, attribution: Option<&[AttributionRow]>) -> String {
    let j = ReportJson {
        threshold: report.threshold,
        n_scored: report.records.len(),
        n_flagged: report.flagged.len(),
        flagged: &report.flagged,
        per_simulation: &report.per_simulation,
        bucket_width: report.bucket_width,
        per_time_bucket: &report.per_time_bucket,
        attribution,
    };
    serde_json::to_string_pretty(&j).expect("report is always serializable") + "\n"
}

/// Binary greyscale image, maximum value 255.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Central slice of a `[1, H, W]` frame or `[1, D, H, W]` volume as bytes,
/// with `to_byte` mapping stored values to the 0..=255 display range.
pub fn central_slice(t: &Tensor<f32>, to_byte: impl Fn(f64) -> f64) -> Result<(usize, usize, usize, Vec<u8>)> {
    let d = t.dims();
    let (depth, h, w) = match d.len() {
        3 => (1, d[1], d[2]),
        4 => (d[1], d[2], d[3]),
        _ => return Err(Error::shape(format!("cannot slice {}", t.shape()))),
    };
    let slice = depth / 2;
    let px = t.data()[slice * h * w..(slice + 1) * h * w]
        .iter()
        .map(|&v| to_byte(v as f64).round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok((slice, w, h, px))
}

pub struct ReportPaths {
    pub scores_csv: PathBuf,
    pub report_json: PathBuf,
    pub dump_dir: Option<PathBuf>,
}

impl ReportPaths {
    pub fn in_dir(dir: &Path) -> Self {
        ReportPaths {
            scores_csv: dir.join("scores.csv"),
            report_json: dir.join("report.json"),
            dump_dir: Some(dir.join("dumps")),
        }
    }
}

/// Writes the scores CSV, the report JSON and, when a model is given,
/// original/reconstruction slice pairs for every flagged sample.
pub fn emit_report(
    report: &AnomalyReport,
    manifest: &DatasetManifest,
    model: Option<&AutoencoderModel<f32>>,
    paths: &ReportPaths,
) -> Result<Vec<PathBuf>> {
    let attribution = attribute(report, manifest)?;
    let mut written = Vec::new();
    write_atomic(&paths.scores_csv, scores_csv(&report.records).as_bytes())?;
    written.push(paths.scores_csv.clone());
    write_atomic(&paths.report_json, report_json(report, Some(&attribution)).as_bytes())?;
    written.push(paths.report_json.clone());
    if let (Some(model), Some(dir)) = (model, &paths.dump_dir) {
        let norm = manifest.normalization;
        for r in &report.flagged {
            let x = &manifest.samples[r.sample_index].values;
            let recon = model.reconstruct(x)?;
            for (tag, t) in [("orig", x), ("recon", &recon)] {
                let (slice, w, h, px) = central_slice(t, |v| norm.denormalize(v))?;
                let p = dir.join(format!("sample{}_{tag}_d{slice}.pgm", r.sample_index));
                write_atomic(&p, &encode_pgm(w, h, &px))?;
                written.push(p);
            }
        }
    }
    Ok(written)
}
