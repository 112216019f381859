//! Dataset preparation: temporal selection, normalization, stacking,
//! downsampling, splitting and the serialized dataset file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fsutil::{next_line, write_atomic};
use crate::tensor::{Shape, Tensor};
use crate::tnsr;

/// Leading time steps of every vortex-street simulation that only show the
/// street forming.
pub const KARMAN_DISCARD_STEPS: usize = 18;
/// Frames per temporal stack.
pub const STACK_DEPTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
    /// Raw data that has not been through a preparation step.
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(Error::format(format!("unknown split `{other}`"))),
        }
    }
}

/// One scoring unit: a frame (`[1, H, W]`) or a volume (`[1, D, H, W]`)
/// with the simulation and inclusive time range it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sim_id: u32,
    pub t_start: u32,
    pub t_end: u32,
    pub values: Tensor<f32>,
}

impl Sample {
    pub fn new(sim_id: u32, t_start: u32, t_end: u32, values: Tensor<f32>) -> Self {
        Sample {
            sim_id,
            t_start,
            t_end,
            values,
        }
    }

    /// Single time step.
    pub fn at(sim_id: u32, t: u32, values: Tensor<f32>) -> Self {
        Self::new(sim_id, t, t, values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizationMode {
    /// `(v - min) / (max - min)` with dataset-wide extremes.
    MinMax,
    /// Raw byte-range values, untouched.
    BytePassthrough,
}

impl NormalizationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NormalizationMode::MinMax => "minmax",
            NormalizationMode::BytePassthrough => "byte",
        }
    }
}

impl FromStr for NormalizationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minmax" => Ok(NormalizationMode::MinMax),
            "byte" | "byte_passthrough" => Ok(NormalizationMode::BytePassthrough),
            other => Err(Error::format(format!("unknown normalization `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mode: NormalizationMode,
    pub min: f64,
    pub max: f64,
}

impl Normalization {
    pub fn byte() -> Self {
        Normalization {
            mode: NormalizationMode::BytePassthrough,
            min: 0.0,
            max: 255.0,
        }
    }

    /// Upper end of the stored value range.
    pub fn data_max(&self) -> f64 {
        match self.mode {
            NormalizationMode::MinMax => 1.0,
            NormalizationMode::BytePassthrough => 255.0,
        }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        match self.mode {
            NormalizationMode::MinMax => (v - self.min) / (self.max - self.min),
            NormalizationMode::BytePassthrough => v,
        }
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        match self.mode {
            NormalizationMode::MinMax => v * (self.max - self.min) + self.min,
            NormalizationMode::BytePassthrough => v,
        }
    }
}

/// Normalized, split dataset with provenance for every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub samples: Vec<Sample>,
    pub splits: Vec<Split>,
    pub normalization: Normalization,
    pub source: String,
}

impl DatasetManifest {
    /// Raw samples with no split assignment.
    pub fn raw(samples: Vec<Sample>, source: impl Into<String>) -> Self {
        let splits = vec![Split::Unassigned; samples.len()];
        DatasetManifest {
            samples,
            splits,
            normalization: Normalization::byte(),
            source: source.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    pub fn tensors(&self, split: Split) -> Vec<&Tensor<f32>> {
        self.indices(split)
            .into_iter()
            .map(|i| &self.samples[i].values)
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|&&s| s == split).count()
    }
}

/// Train/val/test sizes: `floor(0.70 n)`, `floor(0.15 n)`, remainder.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = n * 70 / 100;
    let val = n * 15 / 100;
    (train, val, n - train - val)
}

fn assign_splits(n: usize) -> Vec<Split> {
    let (train, val, _) = split_counts(n);
    (0..n)
        .map(|i| {
            if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect()
}

/// Maps every value to `(v - min) / (max - min)` using the extremes over
/// all samples and returns the constants used.
pub fn normalize_global_minmax(samples: &mut [Sample]) -> Result<Normalization> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("no samples to normalize".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in samples.iter() {
        for &v in s.values.data() {
            lo = lo.min(v as f64);
            hi = hi.max(v as f64);
        }
    }
    if hi <= lo {
        return Err(Error::DegenerateRange(lo));
    }
    let norm = Normalization {
        mode: NormalizationMode::MinMax,
        min: lo,
        max: hi,
    };
    for s in samples.iter_mut() {
        for v in s.values.data_mut() {
            *v = norm.normalize(*v as f64) as f32;
        }
    }
    Ok(norm)
}

fn group_by_sim(samples: Vec<Sample>) -> BTreeMap<u32, Vec<Sample>> {
    let mut sims: BTreeMap<u32, Vec<Sample>> = BTreeMap::new();
    for s in samples {
        sims.entry(s.sim_id).or_default().push(s);
    }
    for frames in sims.values_mut() {
        frames.sort_by_key(|s| s.t_start);
    }
    sims
}

/// Vortex-street preparation: drop the formation phase, draw
/// `n_sims_selected` simulations, shuffle all frames, split 70/15/15 and
/// min-max normalize over the selected frames.
pub fn prepare_karman(frames: Vec<Sample>, n_sims_selected: usize, seed: u64) -> Result<DatasetManifest> {
    let sims = group_by_sim(frames);
    if n_sims_selected == 0 || sims.len() < n_sims_selected {
        return Err(Error::InsufficientData(format!(
            "{} simulations available, {n_sims_selected} requested",
            sims.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<u32> = sims.keys().copied().collect();
    ids.shuffle(&mut rng);
    ids.truncate(n_sims_selected);
    ids.sort_unstable();

    let mut sims = sims;
    let mut selected = Vec::new();
    for id in ids {
        let frames = sims.remove(&id).expect("id drawn from the map");
        if frames.len() <= KARMAN_DISCARD_STEPS {
            return Err(Error::InsufficientData(format!(
                "simulation {id} has {} steps, needs more than {KARMAN_DISCARD_STEPS}",
                frames.len()
            )));
        }
        selected.extend(frames.into_iter().skip(KARMAN_DISCARD_STEPS));
    }
    selected.shuffle(&mut rng);
    let normalization = normalize_global_minmax(&mut selected)?;
    let splits = assign_splits(selected.len());
    Ok(DatasetManifest {
        samples: selected,
        splits,
        normalization,
        source: format!("karman frames, {n_sims_selected} sims, seed {seed}"),
    })
}

fn stack_frames(frames: &[Sample]) -> Result<Tensor<f32>> {
    let frame_dims = frames[0].values.dims();
    if frame_dims.len() != 3 || frame_dims[0] != 1 {
        return Err(Error::shape(format!(
            "stacking expects [1, H, W] frames, got {}",
            frames[0].values.shape()
        )));
    }
    let mut data = Vec::with_capacity(frames.len() * frames[0].values.len());
    for f in frames {
        if f.values.dims() != frame_dims {
            return Err(Error::shape("frames of one simulation differ in shape"));
        }
        data.extend_from_slice(f.values.data());
    }
    Tensor::from_dims(&[1, frames.len(), frame_dims[1], frame_dims[2]], data)
}

/// Cuts each simulation into disjoint windows of three consecutive frames
/// and re-splits the resulting volumes.
pub fn stack_temporal(manifest: &DatasetManifest, seed: u64) -> Result<DatasetManifest> {
    let sims = group_by_sim(manifest.samples.clone());
    let mut volumes = Vec::new();
    for (id, frames) in &sims {
        if frames.len() < STACK_DEPTH {
            return Err(Error::InsufficientData(format!(
                "simulation {id} has {} frames, stacking needs {STACK_DEPTH}",
                frames.len()
            )));
        }
        let mut i = 0;
        while i + STACK_DEPTH <= frames.len() {
            let window = &frames[i..i + STACK_DEPTH];
            let consecutive = window
                .windows(2)
                .all(|p| p[1].t_start == p[0].t_end + 1);
            if consecutive {
                volumes.push(Sample::new(
                    *id,
                    window[0].t_start,
                    window[STACK_DEPTH - 1].t_end,
                    stack_frames(window)?,
                ));
                i += STACK_DEPTH;
            } else {
                i += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    volumes.shuffle(&mut rng);
    let splits = assign_splits(volumes.len());
    Ok(DatasetManifest {
        samples: volumes,
        splits,
        normalization: manifest.normalization,
        source: format!("{}; stacked by {STACK_DEPTH}, seed {seed}", manifest.source),
    })
}

/// 2×2×2 mean pooling over the spatial axes of a `[C, D, H, W]` volume.
pub fn mean_pool2(volume: &Tensor<f32>) -> Result<Tensor<f32>> {
    let d = volume.dims();
    if d.len() != 4 || d[1..].iter().any(|&e| e % 2 != 0) {
        return Err(Error::shape(format!(
            "pooling needs [C, D, H, W] with even extents, got {}",
            volume.shape()
        )));
    }
    let (c, zd, yd, xd) = (d[0], d[1], d[2], d[3]);
    let (oz, oy, ox) = (zd / 2, yd / 2, xd / 2);
    let src = volume.data();
    let mut out = vec![0f32; c * oz * oy * ox];
    for ch in 0..c {
        for z in 0..oz {
            for y in 0..oy {
                for x in 0..ox {
                    let mut acc = 0f64;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            let row = ((ch * zd + 2 * z + dz) * yd + 2 * y + dy) * xd + 2 * x;
                            acc += src[row] as f64 + src[row + 1] as f64;
                        }
                    }
                    out[((ch * oz + z) * oy + y) * ox + x] = (acc / 8.0) as f32;
                }
            }
        }
    }
    Tensor::new(Shape::new(vec![c, oz, oy, ox])?, out)
}

/// Leading time steps kept from a droplet series (the first 600 of 1000).
pub fn droplet_keep_count(n_steps: usize) -> usize {
    (n_steps * 3 / 5).max(1)
}

/// Droplet preparation: keep the leading 60% of time steps, halve every
/// spatial axis by mean pooling, normalize per `mode` and split 70/15/15
/// over time steps.
pub fn prepare_droplet(volumes: Vec<Sample>, mode: NormalizationMode, seed: u64) -> Result<DatasetManifest> {
    if volumes.is_empty() {
        return Err(Error::InsufficientData("no droplet volumes".into()));
    }
    let mut volumes = volumes;
    volumes.sort_by_key(|s| (s.t_start, s.sim_id));
    let keep = droplet_keep_count(volumes.len());
    volumes.truncate(keep);
    let mut pooled = volumes
        .into_iter()
        .map(|s| Ok(Sample::new(s.sim_id, s.t_start, s.t_end, mean_pool2(&s.values)?)))
        .collect::<Result<Vec<_>>>()?;
    let normalization = match mode {
        NormalizationMode::MinMax => normalize_global_minmax(&mut pooled)?,
        NormalizationMode::BytePassthrough => Normalization::byte(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pooled.shuffle(&mut rng);
    let splits = assign_splits(pooled.len());
    Ok(DatasetManifest {
        samples: pooled,
        splits,
        normalization,
        source: format!("droplet volumes, first {keep} steps, {} normalization, seed {seed}", mode.as_str()),
    })
}

const DATASET_MAGIC: &str = "CAE-DATASET 1";

/// Serializes a manifest: a text header with counts, the normalization
/// record, the split table (`sample_index,split`) and the provenance table
/// (`sample_index,sim_id,t_start,t_end`), then one TNSR record per sample.
pub fn encode_dataset(m: &DatasetManifest) -> Vec<u8> {
    let mut h = String::new();
    h.push_str(DATASET_MAGIC);
    h.push('\n');
    h.push_str(&format!("source = {}\n", m.source.replace('\n', " ")));
    h.push_str(&format!(
        "normalization = {} {:?} {:?}\n",
        m.normalization.mode.as_str(),
        m.normalization.min,
        m.normalization.max
    ));
    h.push_str(&format!("samples = {}\n", m.samples.len()));
    h.push_str(&format!(
        "counts = train {} val {} test {} unassigned {}\n",
        m.count(Split::Train),
        m.count(Split::Val),
        m.count(Split::Test),
        m.count(Split::Unassigned)
    ));
    h.push_str("split_table\n");
    for (i, s) in m.splits.iter().enumerate() {
        h.push_str(&format!("{i},{s}\n"));
    }
    h.push_str("provenance_table\n");
    for (i, s) in m.samples.iter().enumerate() {
        h.push_str(&format!("{i},{},{},{}\n", s.sim_id, s.t_start, s.t_end));
    }
    h.push_str("end\n");
    let mut out = h.into_bytes();
    for s in &m.samples {
        tnsr::write_tensor(&mut out, &s.values).expect("writing to a Vec cannot fail");
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<DatasetManifest> {
    let mut pos = 0;
    let mut line = || next_line(bytes, &mut pos).ok_or_else(|| Error::format("truncated dataset header"));
    if line()? != DATASET_MAGIC {
        return Err(Error::format("not a dataset file"));
    }
    let mut field = |key: &str| -> Result<String> {
        let l = line()?;
        l.strip_prefix(key)
            .and_then(|r| r.strip_prefix(" = "))
            .map(str::to_string)
            .ok_or_else(|| Error::format(format!("expected `{key}`, found `{l}`")))
    };
    let source = field("source")?;
    let norm = field("normalization")?;
    let n: usize = field("samples")?
        .parse()
        .map_err(|_| Error::format("bad sample count"))?;
    let _counts = field("counts")?;
    let parts: Vec<&str> = norm.split_whitespace().collect();
    let parse_f = |s: &str| s.parse::<f64>().map_err(|_| Error::format("bad normalization constant"));
    if parts.len() != 3 {
        return Err(Error::format("bad normalization record"));
    }
    let normalization = Normalization {
        mode: parts[0].parse()?,
        min: parse_f(parts[1])?,
        max: parse_f(parts[2])?,
    };

    let mut line = || next_line(bytes, &mut pos).ok_or_else(|| Error::format("truncated dataset header"));
    if line()? != "split_table" {
        return Err(Error::format("missing split table"));
    }
    let mut splits = Vec::with_capacity(n);
    for i in 0..n {
        let l = line()?;
        let (idx, s) = l.split_once(',').ok_or_else(|| Error::format("bad split row"))?;
        if idx.parse::<usize>().ok() != Some(i) {
            return Err(Error::format(format!("split row {i} out of order")));
        }
        splits.push(s.parse()?);
    }
    if line()? != "provenance_table" {
        return Err(Error::format("missing provenance table"));
    }
    let mut prov = Vec::with_capacity(n);
    for i in 0..n {
        let l = line()?;
        let cols: Vec<u64> = l
            .split(',')
            .map(|c| c.parse().map_err(|_| Error::format("bad provenance row")))
            .collect::<Result<_>>()?;
        if cols.len() != 4 || cols[0] != i as u64 {
            return Err(Error::format(format!("bad provenance row {i}")));
        }
        let narrow = |v: u64| u32::try_from(v).map_err(|_| Error::format("provenance value too large"));
        prov.push((narrow(cols[1])?, narrow(cols[2])?, narrow(cols[3])?));
    }
    if line()? != "end" {
        return Err(Error::format("missing end of header"));
    }
    let mut rest = &bytes[pos..];
    let mut samples = Vec::with_capacity(n);
    for (sim_id, t_start, t_end) in prov {
        let values = match tnsr::read_record(&mut rest)? {
            tnsr::Record::F32(t) => t,
            other => other.into_tensor(),
        };
        samples.push(Sample::new(sim_id, t_start, t_end, values));
    }
    if !rest.is_empty() {
        return Err(Error::format("trailing bytes after dataset records"));
    }
    Ok(DatasetManifest {
        samples,
        splits,
        normalization,
        source,
    })
}

pub fn write_dataset(m: &DatasetManifest, path: &Path) -> Result<()> {
    write_atomic(path, &encode_dataset(m))
}

pub fn read_dataset(path: &Path) -> Result<DatasetManifest> {
    decode_dataset(&std::fs::read(path)?)
}
