//! Synthetic stand-ins for the two simulation datasets: an advected
//! vortex street ensemble and a dispersing droplet volume series, plus
//! labelled anomaly injection.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Free-stream intensity of vortex frames.
pub const BACKGROUND: f64 = 110.0;
pub const MAX_VALUE: f64 = 255.0;
pub const DEFAULT_FRAME: [usize; 2] = [64, 48];

fn mix(parts: &[u64]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_mul(0x0000_0100_0000_01b3).rotate_left(17) ^ (h >> 29);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct VortexParams {
    pub sim_id: u32,
    /// Cells per time step.
    pub inflow_speed: f64,
    /// Distance between same-sign vortices, in cells.
    pub shedding_wavelength: f64,
    pub vortex_amplitude: f64,
    pub obstacle_x: f64,
    pub obstacle_y: f64,
    pub noise_level: f64,
    pub seed: u64,
}

impl VortexParams {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadParams(format!("sim {}: {m}", self.sim_id)));
        if !(self.inflow_speed > 0.0 && self.inflow_speed.is_finite()) {
            return bad(format!("inflow_speed {} must be positive", self.inflow_speed));
        }
        if !(self.shedding_wavelength >= 4.0 && self.shedding_wavelength.is_finite()) {
            return bad(format!("shedding_wavelength {} must be at least 4", self.shedding_wavelength));
        }
        if !(0.0..=100.0).contains(&self.vortex_amplitude) {
            return bad(format!("vortex_amplitude {} outside [0, 100]", self.vortex_amplitude));
        }
        if !(self.noise_level >= 0.0 && self.noise_level <= 10.0) {
            return bad(format!("noise_level {} outside [0, 10]", self.noise_level));
        }
        Ok(())
    }

    /// A randomized ensemble of `n` simulations around a common obstacle.
    pub fn ensemble(n: usize, frame_shape: [usize; 2], seed: u64) -> Vec<VortexParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cy = frame_shape[1] as f64 / 2.0;
        (0..n)
            .map(|i| VortexParams {
                sim_id: i as u32,
                inflow_speed: rng.gen_range(2.5..4.0),
                shedding_wavelength: rng.gen_range(12.0..20.0),
                vortex_amplitude: rng.gen_range(60.0..95.0),
                obstacle_x: rng.gen_range(6.0..10.0),
                obstacle_y: cy + rng.gen_range(-2.0..2.0),
                noise_level: 2.0,
                seed: mix(&[seed, i as u64]),
            })
            .collect()
    }

    fn sigma(&self) -> f64 {
        self.shedding_wavelength / 6.0
    }
}

/// Clean vortex field (no noise) at time `t`.
fn vortex_field(p: &VortexParams, t: u32, [len, width]: [usize; 2]) -> Vec<f64> {
    let mut field = vec![BACKGROUND; len * width];
    if p.vortex_amplitude == 0.0 {
        return field;
    }
    let half = p.shedding_wavelength / 2.0;
    let sigma = p.sigma();
    let reach = 4.0 * sigma;
    let travelled = p.inflow_speed * t as f64;
    let shed = (travelled / half).floor() as i64;
    let lateral = 0.14 * p.shedding_wavelength;
    for k in 0..=shed {
        let x = p.obstacle_x + (travelled - k as f64 * half);
        if x < p.obstacle_x || x > (len - 1) as f64 + reach {
            continue;
        }
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let y = p.obstacle_y + sign * lateral;
        let x0 = (x - reach).floor().max(0.0) as usize;
        let x1 = ((x + reach).ceil() as usize).min(len - 1);
        let y0 = (y - reach).floor().max(0.0) as usize;
        let y1 = ((y + reach).ceil().max(0.0) as usize).min(width - 1);
        for i in x0..=x1 {
            let dx = i as f64 - x;
            for j in y0..=y1 {
                let dy = j as f64 - y;
                field[i * width + j] +=
                    sign * p.vortex_amplitude * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    field
}

/// One `[1, len, width]` frame: background plus advected vortices plus
/// seeded noise, clipped to `[0, 255]`.
pub fn vortex_frame(p: &VortexParams, t: u32, frame_shape: [usize; 2]) -> Result<Tensor<f32>> {
    p.validate()?;
    if frame_shape.iter().any(|&e| e < 8) {
        return Err(Error::BadParams(format!("frame shape {frame_shape:?} too small")));
    }
    let mut field = vortex_field(p, t, frame_shape);
    if p.noise_level > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[p.seed, p.sim_id as u64, t as u64]));
        let normal = Normal::new(0.0, p.noise_level).expect("validated std-dev");
        for v in field.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let data = field.into_iter().map(|v| v.clamp(0.0, MAX_VALUE) as f32).collect();
    Tensor::new(Shape::new(vec![1, frame_shape[0], frame_shape[1]])?, data)
}

/// Frames for every simulation and time step, ordered by simulation then time.
pub fn gen_vortex_ensemble(params: &[VortexParams], n_steps: usize, frame_shape: [usize; 2]) -> Result<Vec<Sample>> {
    for p in params {
        p.validate()?;
    }
    let jobs: Vec<(usize, u32)> = (0..params.len())
        .flat_map(|i| (0..n_steps as u32).map(move |t| (i, t)))
        .collect();
    jobs.par_iter()
        .map(|&(i, t)| Ok(Sample::at(params[i].sim_id, t, vortex_frame(&params[i], t, frame_shape)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropletParams {
    pub n_droplets_initial: usize,
    pub initial_radius: f64,
    /// Radius growth per step.
    pub dispersal_rate: f64,
    /// Intensity sum over the domain, conserved until droplets exit.
    pub total_mass: f64,
    pub domain_side: usize,
    pub seed: u64,
}

impl DropletParams {
    /// Two compact droplets in a 64³ domain with an initial peak of 250.
    pub fn desk(seed: u64) -> Self {
        let r0 = 2.5;
        DropletParams {
            n_droplets_initial: 2,
            initial_radius: r0,
            dispersal_rate: 0.0375,
            total_mass: 2.0 * 250.0 * profile_sum([0.0; 3], r0),
            domain_side: 64,
            seed,
        }
    }

    fn validate(&self, n_steps: usize) -> Result<()> {
        let bad = |m: String| Err(Error::BadParams(m));
        if self.domain_side < 16 {
            return bad(format!("domain_side {} below 16", self.domain_side));
        }
        if n_steps < 10 {
            return bad(format!("n_steps {n_steps} below 10"));
        }
        if self.n_droplets_initial == 0 {
            return bad("need at least one droplet".into());
        }
        if !(self.initial_radius >= 1.0 && self.initial_radius.is_finite()) {
            return bad(format!("initial_radius {} below 1", self.initial_radius));
        }
        if !(self.dispersal_rate > 0.0 && self.dispersal_rate.is_finite()) {
            return bad(format!("dispersal_rate {} must be positive", self.dispersal_rate));
        }
        if !(self.total_mass > 0.0 && self.total_mass.is_finite()) {
            return bad(format!("total_mass {} must be positive", self.total_mass));
        }
        let peak = self.droplet_mass() / profile_sum([0.0; 3], self.initial_radius);
        if peak > MAX_VALUE {
            return bad(format!("initial peak {peak:.1} exceeds {MAX_VALUE}"));
        }
        Ok(())
    }

    fn droplet_mass(&self) -> f64 {
        self.total_mass / self.n_droplets_initial as f64
    }

    pub fn radius_at(&self, t: u32) -> f64 {
        self.initial_radius + self.dispersal_rate * t as f64
    }
}

/// First step of the exit phase (the final 40% of the series).
pub fn exit_start(n_steps: usize) -> u32 {
    (n_steps * 3).div_ceil(5) as u32
}

fn bump(r2: f64, radius: f64) -> f64 {
    let q = 1.0 - r2 / (radius * radius);
    if q > 0.0 {
        q * q
    } else {
        0.0
    }
}

/// Sum of the `(1 - (r/R)²)²` profile over the unbounded lattice for a
/// centre offset `frac` from a lattice point.
pub fn profile_sum(frac: [f64; 3], radius: f64) -> f64 {
    let reach = radius.ceil() as i64 + 1;
    let mut s = 0.0;
    for i in -reach..=reach {
        let dz = i as f64 - frac[0];
        for j in -reach..=reach {
            let dy = j as f64 - frac[1];
            for k in -reach..=reach {
                let dx = k as f64 - frac[2];
                s += bump(dz * dz + dy * dy + dx * dx, radius);
            }
        }
    }
    s
}

/// Adds a sphere of the given mass to a cubic `side³` buffer. Mass falling
/// outside the domain is lost.
fn splat(buf: &mut [f64], side: usize, centre: [f64; 3], radius: f64, mass: f64) {
    let base = centre.map(f64::floor);
    let frac = [centre[0] - base[0], centre[1] - base[1], centre[2] - base[2]];
    let peak = mass / profile_sum(frac, radius);
    let reach = radius.ceil() as i64 + 1;
    let n = side as i64;
    for i in -reach..=reach {
        let z = base[0] as i64 + i;
        if z < 0 || z >= n {
            continue;
        }
        let dz = i as f64 - frac[0];
        for j in -reach..=reach {
            let y = base[1] as i64 + j;
            if y < 0 || y >= n {
                continue;
            }
            let dy = j as f64 - frac[1];
            for k in -reach..=reach {
                let x = base[2] as i64 + k;
                if x < 0 || x >= n {
                    continue;
                }
                let dx = k as f64 - frac[2];
                let w = bump(dz * dz + dy * dy + dx * dx, radius);
                if w > 0.0 {
                    buf[((z * n + y) * n + x) as usize] += peak * w;
                }
            }
        }
    }
}

/// Integer droplet centres, kept apart by the largest pre-exit diameter.
pub fn droplet_centres(p: &DropletParams, n_steps: usize) -> Result<Vec<[f64; 3]>> {
    p.validate(n_steps)?;
    let side = p.domain_side as f64;
    let r_exit = p.radius_at(exit_start(n_steps));
    let min_sep = 2.0 * r_exit + 2.0;
    let (lo, hi) = ((side * 0.25).floor() as i64, (side * 0.75).ceil() as i64);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[p.seed, 0xd1]));
    let mut centres: Vec<[f64; 3]> = Vec::new();
    for _ in 0..10_000 {
        if centres.len() == p.n_droplets_initial {
            return Ok(centres);
        }
        let c = [0; 3].map(|_: i32| rng.gen_range(lo..hi) as f64);
        let clear = centres.iter().all(|o| {
            let d2: f64 = (0..3).map(|a| (o[a] - c[a]).powi(2)).sum();
            d2.sqrt() >= min_sep
        });
        if clear {
            centres.push(c);
        }
    }
    if p.n_droplets_initial == 1 {
        return Ok(vec![[(side / 2.0).floor(); 3]]);
    }
    Err(Error::BadParams(format!(
        "cannot place {} droplets of radius {r_exit:.1} apart in a {}³ domain",
        p.n_droplets_initial, p.domain_side
    )))
}

fn drift_direction(c: [f64; 3], side: f64) -> [f64; 3] {
    let mut best = (f64::INFINITY, 0usize, 0.0);
    for a in 0..3 {
        for (dist, dir) in [(c[a], -1.0), (side - 1.0 - c[a], 1.0)] {
            if dist < best.0 {
                best = (dist, a, dir);
            }
        }
    }
    let mut d = [0.0; 3];
    d[best.1] = best.2;
    d
}

/// The volume at step `t` as a `side³` buffer.
fn droplet_field(p: &DropletParams, centres: &[[f64; 3]], t: u32, n_steps: usize) -> Vec<f64> {
    let side = p.domain_side;
    let mut buf = vec![0.0; side * side * side];
    let radius = p.radius_at(t);
    let exit = exit_start(n_steps);
    let speed = 0.5 * side as f64 / (n_steps as f64 - exit as f64).max(1.0);
    for &c in centres {
        let mut c = c;
        if t > exit {
            let d = drift_direction(c, side as f64);
            let moved = speed * (t - exit) as f64;
            for a in 0..3 {
                c[a] += d[a] * moved;
            }
        }
        splat(&mut buf, side, c, radius, p.droplet_mass());
    }
    buf
}

/// `[1, side, side, side]` volumes for steps `0..n_steps`: compact spheres
/// that widen at constant mass, then drift out through the nearest face
/// during the final 40% of steps.
pub fn gen_droplet_series(p: &DropletParams, n_steps: usize) -> Result<Vec<Sample>> {
    let centres = droplet_centres(p, n_steps)?;
    let side = p.domain_side;
    let shape = Shape::new(vec![1, side, side, side])?;
    (0..n_steps as u32)
        .into_par_iter()
        .map(|t| {
            let data = droplet_field(p, &centres, t, n_steps)
                .into_iter()
                .map(|v| v.clamp(0.0, MAX_VALUE) as f32)
                .collect();
            Ok(Sample::at(0, t, Tensor::new(shape.clone(), data)?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AnomalyKind {
    MagnitudeInversion,
    TurbulenceBurst,
    FrozenMotion,
    MassConcentration,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 4] = [
        AnomalyKind::MagnitudeInversion,
        AnomalyKind::TurbulenceBurst,
        AnomalyKind::FrozenMotion,
        AnomalyKind::MassConcentration,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyKind::MagnitudeInversion => "MAGNITUDE_INVERSION",
            AnomalyKind::TurbulenceBurst => "TURBULENCE_BURST",
            AnomalyKind::FrozenMotion => "FROZEN_MOTION",
            AnomalyKind::MassConcentration => "MASS_CONCENTRATION",
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AnomalyKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::BadLabel(format!("unknown anomaly kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AnomalyLabel {
    pub kind: AnomalyKind,
    pub sim_id: u32,
    pub t_start: u32,
    pub t_end: u32,
}

pub const LABELS_HEADER: &str = "kind,sim_id,t_start,t_end";

pub fn labels_to_csv(labels: &[AnomalyLabel]) -> String {
    let mut s = format!("{LABELS_HEADER}\n");
    for l in labels {
        s.push_str(&format!("{},{},{},{}\n", l.kind, l.sim_id, l.t_start, l.t_end));
    }
    s
}

pub fn labels_from_csv(text: &str) -> Result<Vec<AnomalyLabel>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(LABELS_HEADER) {
        return Err(Error::format("labels file must start with `kind,sim_id,t_start,t_end`"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            let num = |s: &str| s.parse::<u32>().map_err(|_| Error::format(format!("bad label row `{l}`")));
            if f.len() != 4 {
                return Err(Error::format(format!("bad label row `{l}`")));
            }
            Ok(AnomalyLabel {
                kind: f[0].parse()?,
                sim_id: num(f[1])?,
                t_start: num(f[2])?,
                t_end: num(f[3])?,
            })
        })
        .collect()
}

/// Half-open box over the spatial axes of one time step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
}

impl Region {
    /// The middle half of every axis.
    pub fn central(dims: &[usize]) -> Region {
        Region {
            lo: dims.iter().map(|&d| d / 4).collect(),
            hi: dims.iter().map(|&d| (d - d / 4).max(d / 4 + 1)).collect(),
        }
    }

    pub fn whole(dims: &[usize]) -> Region {
        Region {
            lo: vec![0; dims.len()],
            hi: dims.to_vec(),
        }
    }

    pub fn contains(&self, idx: &[usize]) -> bool {
        idx.iter().zip(&self.lo).zip(&self.hi).all(|((&i, &l), &h)| i >= l && i < h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectOptions {
    /// Defaults to the central half for spatial kinds and the whole step
    /// for mass concentration.
    pub region: Option<Region>,
    /// Value range of the data being modified.
    pub value_range: (f64, f64),
    pub seed: u64,
}

impl Default for InjectOptions {
    fn default() -> Self {
        InjectOptions {
            region: None,
            value_range: (0.0, MAX_VALUE),
            seed: 0,
        }
    }
}

/// Where one time step lives: sample index, offset into its data, and the
/// spatial extents of the step.
struct StepView {
    sample: usize,
    offset: usize,
    dims: Vec<usize>,
}

fn locate(samples: &[Sample], sim_id: u32, t: u32) -> Option<StepView> {
    samples.iter().enumerate().find_map(|(i, s)| {
        if s.sim_id != sim_id || t < s.t_start || t > s.t_end {
            return None;
        }
        let d = s.values.dims();
        if s.t_end > s.t_start {
            // temporal stack [C, depth, ...]
            let span = (s.t_end - s.t_start + 1) as usize;
            if d.len() < 3 || d[1] != span {
                return None;
            }
            let step: usize = d[2..].iter().product();
            Some(StepView {
                sample: i,
                offset: (t - s.t_start) as usize * step,
                dims: d[2..].to_vec(),
            })
        } else {
            Some(StepView {
                sample: i,
                offset: 0,
                dims: d[1..].to_vec(),
            })
        }
    })
}

fn unravel(mut flat: usize, dims: &[usize], out: &mut [usize]) {
    for a in (0..dims.len()).rev() {
        out[a] = flat % dims[a];
        flat /= dims[a];
    }
}

fn region_indices(dims: &[usize], region: &Region) -> Vec<usize> {
    let n: usize = dims.iter().product();
    let mut idx = vec![0; dims.len()];
    (0..n)
        .filter(|&f| {
            unravel(f, dims, &mut idx);
            region.contains(&idx)
        })
        .collect()
}

fn step_slice<'a>(samples: &'a mut [Sample], v: &StepView) -> &'a mut [f32] {
    let len: usize = v.dims.iter().product();
    &mut samples[v.sample].values.data_mut()[v.offset..v.offset + len]
}

/// Applies `label` to the matching samples in place and returns the label.
///
/// Samples are looked up by `(sim_id, t)`; a sample whose `t_end` exceeds
/// its `t_start` is treated as a temporal stack with one depth slice per step.
pub fn inject_anomaly(samples: &mut [Sample], label: &AnomalyLabel, opts: &InjectOptions) -> Result<AnomalyLabel> {
    if label.t_end < label.t_start {
        return Err(Error::BadLabel(format!("t_end {} before t_start {}", label.t_end, label.t_start)));
    }
    if label.kind == AnomalyKind::FrozenMotion && label.t_end == label.t_start {
        return Err(Error::BadLabel("frozen motion needs at least two steps".into()));
    }
    let (lo, hi) = opts.value_range;
    if !(hi > lo) {
        return Err(Error::BadLabel(format!("empty value range {lo}..{hi}")));
    }
    let views = (label.t_start..=label.t_end)
        .map(|t| {
            locate(samples, label.sim_id, t)
                .ok_or_else(|| Error::BadLabel(format!("sim {} has no step {t}", label.sim_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let dims = views[0].dims.clone();
    if views.iter().any(|v| v.dims != dims) {
        return Err(Error::BadLabel("steps in the window differ in shape".into()));
    }
    let region = match &opts.region {
        Some(r) => {
            let ok = r.lo.len() == dims.len()
                && r.hi.len() == dims.len()
                && r.lo.iter().zip(&r.hi).zip(&dims).all(|((&l, &h), &d)| l < h && h <= d);
            if !ok {
                return Err(Error::BadLabel(format!("region {r:?} does not fit steps of {dims:?}")));
            }
            r.clone()
        }
        None if label.kind == AnomalyKind::MassConcentration => Region::whole(&dims),
        None => Region::central(&dims),
    };
    let cells = region_indices(&dims, &region);

    match label.kind {
        AnomalyKind::FrozenMotion => {
            let first = step_slice(samples, &views[0]).to_vec();
            for v in &views[1..] {
                step_slice(samples, v).copy_from_slice(&first);
            }
        }
        AnomalyKind::MagnitudeInversion => {
            let band = 0.15 * (hi - lo);
            for v in &views {
                let s = step_slice(samples, v);
                let (mut rmin, mut rmax) = (f64::INFINITY, f64::NEG_INFINITY);
                for &c in &cells {
                    rmin = rmin.min(s[c] as f64);
                    rmax = rmax.max(s[c] as f64);
                }
                for &c in &cells {
                    let u = if rmax > rmin { (s[c] as f64 - rmin) / (rmax - rmin) } else { 0.0 };
                    s[c] = (lo + u * band) as f32;
                }
            }
        }
        AnomalyKind::TurbulenceBurst => {
            let sigma = 1.2;
            let amp = 0.35 * (hi - lo);
            let n_blobs = (cells.len() / 12).max(4);
            let mut idx = vec![0; dims.len()];
            for (k, v) in views.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(&[opts.seed, label.sim_id as u64, k as u64, 0x7b]));
                let blobs: Vec<(Vec<f64>, f64)> = (0..n_blobs)
                    .map(|_| {
                        let c = (0..dims.len())
                            .map(|a| rng.gen_range(region.lo[a] as f64..region.hi[a] as f64))
                            .collect();
                        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                        (c, sign * amp)
                    })
                    .collect();
                let s = step_slice(samples, v);
                for &c in &cells {
                    unravel(c, &dims, &mut idx);
                    let mut add = 0.0;
                    for (centre, a) in &blobs {
                        let r2: f64 = idx.iter().zip(centre).map(|(&i, &m)| (i as f64 - m).powi(2)).sum();
                        if r2 < 16.0 * sigma * sigma {
                            add += a * (-r2 / (2.0 * sigma * sigma)).exp();
                        }
                    }
                    s[c] = (s[c] as f64 + add).clamp(lo, hi) as f32;
                }
            }
        }
        AnomalyKind::MassConcentration => {
            if dims.len() != 3 {
                return Err(Error::BadLabel(format!("mass concentration needs volumes, got steps of {dims:?}")));
            }
            let mut idx = vec![0; 3];
            for v in &views {
                let s = step_slice(samples, v);
                let mut mass = 0.0;
                let mut moment = [0.0; 3];
                for &c in &cells {
                    let m = s[c] as f64 - lo;
                    unravel(c, &dims, &mut idx);
                    mass += m;
                    for a in 0..3 {
                        moment[a] += m * idx[a] as f64;
                    }
                }
                if mass <= 0.0 {
                    return Err(Error::BadLabel("no mass inside the region".into()));
                }
                let centre = moment.map(|m| (m / mass).round());
                let mut radius = 1.0;
                while mass / profile_sum([0.0; 3], radius) > hi - lo {
                    radius += 0.05;
                }
                let peak = mass / profile_sum([0.0; 3], radius);
                let reach = radius.ceil() as i64 + 1;
                let inside = (0..3).all(|a| centre[a] as i64 - reach >= 0 && centre[a] as i64 + reach < dims[a] as i64);
                if !inside {
                    return Err(Error::BadLabel("concentrated core would leave the domain".into()));
                }
                for &c in &cells {
                    s[c] = lo as f32;
                }
                let mut buf = vec![0.0f64; s.len()];
                let n = s.len();
                for (f, b) in buf.iter_mut().enumerate().take(n) {
                    unravel(f, &dims, &mut idx);
                    let r2: f64 = (0..3).map(|a| (idx[a] as f64 - centre[a]).powi(2)).sum();
                    *b = peak * bump(r2, radius);
                }
                for (x, b) in s.iter_mut().zip(&buf) {
                    if *b > 0.0 {
                        *x = ((*x as f64) + b).min(hi) as f32;
                    }
                }
            }
        }
    }
    Ok(*label)
}
