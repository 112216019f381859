//! End-to-end acceptance criteria. Runs as a plain binary so every
//! criterion prints one PASS/FAIL line; `ACCEPTANCE_ONLY=4,7` restricts
//! the run to the listed criteria.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use cae_anomaly::data::{
    decode_dataset, encode_dataset, split_counts, DatasetManifest, NormalizationMode, Sample, Split,
};
use cae_anomaly::detect::{flag, percentile_against, ScoreRecord};
use cae_anomaly::experiments::{karman_datasets, train_model, DropletSetup, KarmanSetup};
use cae_anomaly::nn::gradcheck::check_all;
use cae_anomaly::nn::{AutoencoderModel, ConvLayer, TransposedConvLayer};
use cae_anomaly::synth::{droplet_centres, inject_anomaly, AnomalyKind, AnomalyLabel, InjectOptions, Region};
use cae_anomaly::train::{evaluate_split, LossHistory};
use cae_anomaly::{mse, Shape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

struct KarmanRun {
    frames: DatasetManifest,
    stacks: DatasetManifest,
    model_2d: AutoencoderModel<f32>,
    history_2d: LossHistory,
    model_3d: Option<AutoencoderModel<f32>>,
}

struct DropletRun {
    byte: DatasetManifest,
    minmax: DatasetManifest,
    byte_model: AutoencoderModel<f32>,
    minmax_model: AutoencoderModel<f32>,
}

#[derive(Default)]
struct Ctx {
    karman: BTreeMap<u64, KarmanRun>,
    droplet: BTreeMap<u64, DropletRun>,
}

impl Ctx {
    fn karman(&mut self, seed: u64, with_3d: bool) -> &KarmanRun {
        let setup = KarmanSetup::desk();
        let run = self.karman.entry(seed).or_insert_with(|| {
            let (frames, stacks) = karman_datasets(&setup, seed).unwrap();
            let (model_2d, history_2d) = train_model(setup.arch_2d(), &frames, &setup.train, seed).unwrap();
            KarmanRun {
                frames,
                stacks,
                model_2d,
                history_2d,
                model_3d: None,
            }
        });
        if with_3d && run.model_3d.is_none() {
            let (m, _) = train_model(setup.arch_3d(), &run.stacks, &setup.train, seed).unwrap();
            run.model_3d = Some(m);
        }
        run
    }

    fn droplet(&mut self, seed: u64) -> &DropletRun {
        self.droplet.entry(seed).or_insert_with(|| {
            let setup = DropletSetup::desk(seed);
            let byte = setup.dataset(NormalizationMode::BytePassthrough, seed).unwrap();
            let minmax = setup.dataset(NormalizationMode::MinMax, seed).unwrap();
            let (byte_model, _) =
                train_model(setup.arch(NormalizationMode::BytePassthrough), &byte, &setup.train, seed).unwrap();
            let (minmax_model, _) =
                train_model(setup.arch(NormalizationMode::MinMax), &minmax, &setup.train, seed).unwrap();
            DropletRun {
                byte,
                minmax,
                byte_model,
                minmax_model,
            }
        })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn test_scores(model: &AutoencoderModel<f32>, m: &DatasetManifest) -> Vec<f64> {
    evaluate_split(model, &m.tensors(Split::Test)).unwrap()
}

fn gradient_fidelity(_: &mut Ctx) -> Outcome {
    let results = check_all(1e-5, 1e-4, 3);
    let worst = results
        .iter()
        .map(|(n, r)| (n.clone(), if r.failure.is_some() { f64::INFINITY } else { r.max_rel_error() }))
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let failed: Vec<&str> = results.iter().filter(|(_, r)| !r.passed()).map(|(n, _)| n.as_str()).collect();
    outcome(
        failed.is_empty(),
        format!(
            "{} checks, worst relative error {:.2e} ({}){}",
            results.len(),
            worst.1,
            worst.0,
            if failed.is_empty() { String::new() } else { format!(", failing: {failed:?}") }
        ),
    )
}

fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::from_dims(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct nested-loop convolution over spatial axes padded to rank 3.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: &[usize], pad: &[usize]) -> Option<Tensor<f64>> {
    let rank = x.dims().len() - 1;
    let lift = |v: &[usize], fill: usize| {
        let mut out = [fill; 3];
        out[3 - rank..].copy_from_slice(v);
        out
    };
    let (ci, co) = (x.dims()[0], w.dims()[0]);
    let n = lift(&x.dims()[1..], 1);
    let k = lift(&w.dims()[2..], 1);
    let s = lift(stride, 1);
    let p = lift(pad, 0);
    let mut o = [0usize; 3];
    for a in 0..3 {
        if n[a] + 2 * p[a] < k[a] {
            return None;
        }
        o[a] = (n[a] + 2 * p[a] - k[a]) / s[a] + 1;
    }
    let mut out = vec![0.0; co * o.iter().product::<usize>()];
    let xi = |c: usize, z: usize, y: usize, xx: usize| ((c * n[0] + z) * n[1] + y) * n[2] + xx;
    let wi = |f: usize, c: usize, a: usize, bb: usize, cc: usize| (((f * ci + c) * k[0] + a) * k[1] + bb) * k[2] + cc;
    for f in 0..co {
        for oz in 0..o[0] {
            for oy in 0..o[1] {
                for ox in 0..o[2] {
                    let mut acc = b.data()[f];
                    for c in 0..ci {
                        for a in 0..k[0] {
                            for bb in 0..k[1] {
                                for cc in 0..k[2] {
                                    let z = (oz * s[0] + a) as i64 - p[0] as i64;
                                    let y = (oy * s[1] + bb) as i64 - p[1] as i64;
                                    let xx = (ox * s[2] + cc) as i64 - p[2] as i64;
                                    if z < 0 || y < 0 || xx < 0 || z >= n[0] as i64 || y >= n[1] as i64 || xx >= n[2] as i64 {
                                        continue;
                                    }
                                    acc += x.data()[xi(c, z as usize, y as usize, xx as usize)] * w.data()[wi(f, c, a, bb, cc)];
                                }
                            }
                        }
                    }
                    out[((f * o[0] + oz) * o[1] + oy) * o[2] + ox] = acc;
                }
            }
        }
    }
    let mut dims = vec![co];
    dims.extend(&o[3 - rank..]);
    Some(Tensor::from_dims(&dims, out).unwrap())
}

fn extents(rank: usize) -> Vec<Vec<usize>> {
    let mut all = vec![vec![]];
    for _ in 0..rank {
        all = all
            .into_iter()
            .flat_map(|p| (1..=5).map(move |e| [p.clone(), vec![e]].concat()))
            .collect();
    }
    all
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn convolution_oracle(_: &mut Ctx) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    for rank in [2usize, 3] {
        for ext in extents(rank) {
            for ci in 1..=3 {
                for co in 1..=3 {
                    for (k, stride, pad) in [(3, 1, 0), (3, 1, 1), (3, 2, 1), (2, 2, 0)] {
                        let mut xd = vec![ci];
                        xd.extend(&ext);
                        let mut wd = vec![co, ci];
                        wd.extend(vec![k; rank]);
                        let x = random_tensor(&mut rng, &xd);
                        let w = random_tensor(&mut rng, &wd);
                        let b = random_tensor(&mut rng, &[co]);
                        let Some(want) = naive_conv(&x, &w, &b, &vec![stride; rank], &vec![pad; rank]) else {
                            continue;
                        };
                        let layer = ConvLayer::new(w, b, vec![stride; rank], vec![pad; rank]).unwrap();
                        let got = layer.forward(&x).unwrap();
                        if got.shape() != want.shape() {
                            return outcome(false, format!("shape {} vs reference {}", got.shape(), want.shape()));
                        }
                        for (g, r) in got.data().iter().zip(want.data()) {
                            worst = worst.max((g - r).abs());
                        }
                        cases += 1;
                    }
                }
            }
        }
    }
    let mut adj_worst: f64 = 0.0;
    for case in 0..100 {
        let rank = 2 + case % 2;
        let (ci, co) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let stride: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=2)).collect();
        let small: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=4)).collect();
        let mut xd = vec![ci];
        xd.extend((0..rank).map(|a| (small[a] - 1) * stride[a] + 3));
        let mut yd = vec![co];
        yd.extend(&small);
        let mut wd = vec![co, ci];
        wd.extend(vec![3; rank]);
        let w = random_tensor(&mut rng, &wd);
        let conv = ConvLayer::new(w.clone(), Tensor::zeros(Shape::new(vec![co]).unwrap()), stride.clone(), vec![0; rank]).unwrap();
        let convt = TransposedConvLayer::new(w, Tensor::zeros(Shape::new(vec![ci]).unwrap()), stride).unwrap();
        let x = random_tensor(&mut rng, &xd);
        let y = random_tensor(&mut rng, &yd);
        let lhs = dot(&conv.forward(&x).unwrap(), &y);
        let rhs = dot(&x, &convt.forward(&y).unwrap());
        adj_worst = adj_worst.max((lhs - rhs).abs());
    }
    outcome(
        worst <= 1e-12 && adj_worst <= 1e-10,
        format!("{cases} exhaustive cases max |diff| {worst:.1e} (≤ 1e-12); 100 adjoint cases max |diff| {adj_worst:.1e} (≤ 1e-10)"),
    )
}

fn pipeline_arithmetic(_: &mut Ctx) -> Outcome {
    let setup = KarmanSetup {
        n_sims_generated: 90,
        n_sims_selected: 90,
        n_steps: 54,
        ..KarmanSetup::desk()
    };
    let ds = setup.dataset(3).unwrap();
    let counts = (ds.count(Split::Train), ds.count(Split::Val), ds.count(Split::Test));
    let (lo, hi) = ds.samples.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), s| {
        (lo.min(s.values.min_value()), hi.max(s.values.max_value()))
    });
    let bytes = encode_dataset(&ds);
    let back = decode_dataset(&bytes).unwrap();
    let exact = back.samples.iter().zip(&ds.samples).all(|(a, b)| {
        a.sim_id == b.sim_id
            && a.t_start == b.t_start
            && a.t_end == b.t_end
            && a.values.data().iter().zip(b.values.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    }) && back.splits == ds.splits
        && back.normalization == ds.normalization
        && encode_dataset(&back) == bytes;
    let ok = ds.len() == 3240 && counts == (2268, 486, 486) && split_counts(3240) == counts && lo == 0.0 && hi == 1.0 && exact;
    outcome(
        ok,
        format!(
            "{} samples split {}/{}/{}, normalized range [{lo}, {hi}], bit-exact round trip: {exact}",
            ds.len(),
            counts.0,
            counts.1,
            counts.2
        ),
    )
}

fn training_behavior(ctx: &mut Ctx) -> Outcome {
    let run = ctx.karman(0, false);
    let h = &run.history_2d;
    let first = h.epochs[0].val_mse;
    let last = h.epochs.last().unwrap().val_mse;
    let (best_epoch, best) = h.best_val().unwrap();
    let val = evaluate_split(&run.model_2d, &run.frames.tensors(Split::Val)).unwrap();
    let returned = mean(&val);
    let checkpoint_exact = returned.to_bits() == best.to_bits();
    outcome(
        last <= 0.5 * first && checkpoint_exact && h.len() <= 70,
        format!(
            "{} epochs, val mse epoch 1 {first:.3e} -> final {last:.3e} (ratio {:.3}); best epoch {} val {best:.6e}, returned model val {returned:.6e}",
            h.len(),
            last / first,
            best_epoch + 1
        ),
    )
}

/// A random box covering a quarter of the frame area.
fn random_region(rng: &mut ChaCha8Rng, dims: &[usize]) -> Region {
    let size: Vec<usize> = dims.iter().map(|&d| d / 2).collect();
    let lo: Vec<usize> = dims.iter().zip(&size).map(|(&d, &s)| rng.gen_range(0..=d - s)).collect();
    let hi = lo.iter().zip(&size).map(|(l, s)| l + s).collect();
    Region { lo, hi }
}

fn spatial_anomalies(ctx: &mut Ctx) -> Outcome {
    let mut hits = Vec::new();
    for seed in 0..3u64 {
        let run = ctx.karman(seed, false);
        let test = run.frames.indices(Split::Test);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
        let chosen: Vec<usize> = test.choose_multiple(&mut rng, 10).copied().collect();
        let clean: Vec<f64> = test
            .iter()
            .filter(|i| !chosen.contains(i))
            .map(|&i| mse(&run.model_2d.reconstruct(&run.frames.samples[i].values).unwrap(), &run.frames.samples[i].values).unwrap())
            .collect();
        let mut top = 0;
        for (k, &i) in chosen.iter().enumerate() {
            let mut s = vec![run.frames.samples[i].clone()];
            let kind = if k % 2 == 0 { AnomalyKind::MagnitudeInversion } else { AnomalyKind::TurbulenceBurst };
            let label = AnomalyLabel {
                kind,
                sim_id: s[0].sim_id,
                t_start: s[0].t_start,
                t_end: s[0].t_end,
            };
            let opts = InjectOptions {
                region: Some(random_region(&mut rng, &s[0].values.dims()[1..])),
                value_range: (0.0, 1.0),
                seed: seed * 100 + k as u64,
            };
            inject_anomaly(&mut s, &label, &opts).unwrap();
            let e = mse(&run.model_2d.reconstruct(&s[0].values).unwrap(), &s[0].values).unwrap();
            if percentile_against(e, &clean) >= 0.95 {
                top += 1;
            }
        }
        hits.push(top);
    }
    let mut sorted = hits.clone();
    sorted.sort_unstable();
    let median = sorted[1];
    outcome(median >= 8, format!("injected frames in the top 5% per seed {hits:?}, median {median} (≥ 8 of 10)"))
}

/// Frames and stack for one window of the stacked test split.
fn event_window(run: &KarmanRun, rng: &mut ChaCha8Rng) -> (Sample, Vec<Sample>) {
    let stack_idx = *run.stacks.indices(Split::Test).choose(rng).unwrap();
    let stack = run.stacks.samples[stack_idx].clone();
    let mut frames: Vec<Sample> = run
        .frames
        .samples
        .iter()
        .filter(|s| s.sim_id == stack.sim_id && s.t_start >= stack.t_start && s.t_end <= stack.t_end)
        .cloned()
        .collect();
    frames.sort_by_key(|s| s.t_start);
    assert_eq!(frames.len(), 3);
    (stack, frames)
}

fn records(model: &AutoencoderModel<f32>, samples: &[Sample]) -> Vec<ScoreRecord> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| ScoreRecord {
            sample_index: i,
            sim_id: s.sim_id,
            t_start: s.t_start,
            t_end: s.t_end,
            mse: mse(&model.reconstruct(&s.values).unwrap(), &s.values).unwrap(),
            flagged: false,
            percentile_rank: 0.0,
        })
        .collect()
}

/// Smallest score strictly above `q` of the reference scores.
fn quantile_threshold(scores: &[f64], q: f64) -> f64 {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s[((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1]
}

fn temporal_context(ctx: &mut Ctx) -> Outcome {
    let mut wins = 0;
    let mut consolidated = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let run = ctx.karman(seed, true);
        let m3 = run.model_3d.as_ref().unwrap();
        let clean2 = test_scores(&run.model_2d, &run.frames);
        let clean3 = test_scores(m3, &run.stacks);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 900);
        let (stack, frames) = event_window(run, &mut rng);
        let label = AnomalyLabel {
            kind: AnomalyKind::FrozenMotion,
            sim_id: stack.sim_id,
            t_start: stack.t_start,
            t_end: stack.t_end,
        };
        let opts = InjectOptions {
            value_range: (0.0, 1.0),
            ..InjectOptions::default()
        };
        let mut s3 = vec![stack.clone()];
        let mut f2 = frames.clone();
        inject_anomaly(&mut s3, &label, &opts).unwrap();
        inject_anomaly(&mut f2, &label, &opts).unwrap();
        let p3 = percentile_against(records(m3, &s3)[0].mse, &clean3);
        let p2 = records(&run.model_2d, &f2)
            .iter()
            .map(|r| percentile_against(r.mse, &clean2))
            .fold(0.0, f64::max);
        if p3 > p2 {
            wins += 1;
        }

        let burst = AnomalyLabel {
            kind: AnomalyKind::TurbulenceBurst,
            ..label
        };
        let opts = InjectOptions {
            region: Some(random_region(&mut rng, &frames[0].values.dims()[1..])),
            value_range: (0.0, 1.0),
            seed,
        };
        let mut s3 = vec![stack];
        let mut f2 = frames;
        inject_anomaly(&mut s3, &burst, &opts).unwrap();
        inject_anomaly(&mut f2, &burst, &opts).unwrap();
        let n3 = flag(&records(m3, &s3), quantile_threshold(&clean3, 0.95)).flagged.len();
        let n2 = flag(&records(&run.model_2d, &f2), quantile_threshold(&clean2, 0.95)).flagged.len();
        if n3 <= n2 {
            consolidated += 1;
        }
        lines.push(format!("seed {seed}: frozen 3D {p3:.3} vs 2D {p2:.3}, burst detections 3D {n3} / 2D {n2}"));
    }
    outcome(
        wins >= 4 && consolidated == 5,
        format!("3D rank higher in {wins}/5 seeds (≥ 4), consolidation held in {consolidated}/5; {}", lines.join("; ")),
    )
}

fn total_mass(xs: &[&Tensor<f32>]) -> f64 {
    xs.iter().map(|x| x.sum()).sum()
}

fn recovered_mass(model: &AutoencoderModel<f32>, m: &DatasetManifest) -> f64 {
    let test = m.tensors(Split::Test);
    let recon: Vec<Tensor<f32>> = test.iter().map(|x| model.reconstruct(x).unwrap()).collect();
    total_mass(&recon.iter().collect::<Vec<_>>()) / total_mass(&test)
}

fn sparsity_collapse(ctx: &mut Ctx) -> Outcome {
    let mut wins = 0;
    let mut data_ok = true;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let run = ctx.droplet(seed);
        let voxels: usize = run.minmax.samples.iter().map(|s| s.values.len()).sum();
        let zeros: usize = run
            .minmax
            .samples
            .iter()
            .map(|s| s.values.data().iter().filter(|&&v| v == 0.0).count())
            .sum();
        let empty = zeros as f64 / voxels as f64;
        let test = run.minmax.tensors(Split::Test);
        let baseline = mean(
            &test
                .iter()
                .map(|x| mse(&Tensor::zeros(x.shape().clone()), x).unwrap())
                .collect::<Vec<_>>(),
        );
        let analytic = test
            .iter()
            .flat_map(|x| x.data().iter().map(|&v| (v as f64) * (v as f64)))
            .sum::<f64>()
            / (test.len() * test[0].len()) as f64;
        data_ok &= empty >= 0.99 && baseline < 0.01 && (baseline - analytic).abs() <= 1e-12 * analytic.max(1e-300);
        let byte = recovered_mass(&run.byte_model, &run.byte);
        let unit = recovered_mass(&run.minmax_model, &run.minmax);
        if byte >= 0.5 && unit < byte {
            wins += 1;
        }
        lines.push(format!(
            "seed {seed}: empty {:.2}%, zero-output mse {baseline:.2e}, mass recovered byte {:.1}% vs [0,1] {:.1}%",
            100.0 * empty,
            100.0 * byte,
            100.0 * unit
        ));
    }
    outcome(data_ok && wins >= 4, format!("{wins}/5 seeds (≥ 4); {}", lines.join("; ")))
}

fn mass_concentration(ctx: &mut Ctx) -> Outcome {
    let mut wins = 0;
    let mut early = 0;
    let mut mass_ok = true;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let setup = DropletSetup::desk(seed);
        let centres = droplet_centres(&setup.params, setup.n_steps).unwrap();
        let run = ctx.droplet(seed);
        let test = run.byte.indices(Split::Test);
        let side = run.byte.samples[test[0]].values.dims()[1];
        let mut clean = Vec::new();
        let mut compact = Vec::new();
        for (k, &i) in test.iter().enumerate() {
            let s = &run.byte.samples[i];
            clean.push(mse(&run.byte_model.reconstruct(&s.values).unwrap(), &s.values).unwrap());
            let c = centres[k % centres.len()].map(|v| v / 2.0);
            let r = (setup.params.radius_at(s.t_start) / 2.0).ceil() as usize + 2;
            let region = Region {
                lo: c.iter().map(|&v| (v as usize).saturating_sub(r)).collect(),
                hi: c.iter().map(|&v| (v as usize + r + 1).min(side)).collect(),
            };
            let mut v = vec![s.clone()];
            let label = AnomalyLabel {
                kind: AnomalyKind::MassConcentration,
                sim_id: s.sim_id,
                t_start: s.t_start,
                t_end: s.t_end,
            };
            let opts = InjectOptions {
                region: Some(region),
                ..InjectOptions::default()
            };
            inject_anomaly(&mut v, &label, &opts).unwrap();
            let (m0, m1) = (s.values.sum(), v[0].values.sum());
            mass_ok &= (m1 - m0).abs() <= 1e-3 * m0;
            compact.push(mse(&run.byte_model.reconstruct(&v[0].values).unwrap(), &v[0].values).unwrap());
        }
        let (mc, mclean) = (mean(&compact), mean(&clean));
        if mc > mclean {
            wins += 1;
        }

        // the four highest-error clean test volumes, as in the reference run
        let recs: Vec<ScoreRecord> = test
            .iter()
            .zip(&clean)
            .map(|(&i, &e)| {
                let s = &run.byte.samples[i];
                ScoreRecord {
                    sample_index: i,
                    sim_id: s.sim_id,
                    t_start: s.t_start,
                    t_end: s.t_end,
                    mse: e,
                    flagged: false,
                    percentile_rank: 0.0,
                }
            })
            .collect();
        let mut sorted = clean.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let threshold = (sorted[3] + sorted[4]) / 2.0;
        let report = flag(&recs, threshold);
        let mut times: Vec<u32> = recs.iter().map(|r| r.t_start).collect();
        times.sort_unstable();
        let median_t = times[times.len() / 2];
        let flagged_t: Vec<u32> = report.flagged.iter().map(|r| r.t_start).collect();
        if report.flagged.len() == 4 && flagged_t.iter().all(|&t| t < median_t) {
            early += 1;
        }
        lines.push(format!(
            "seed {seed}: mse compact {mc:.2} vs dispersed {mclean:.2}, flagged steps {flagged_t:?} (test median step {median_t})"
        ));
    }
    outcome(
        mass_ok && wins >= 4 && early >= 4,
        format!(
            "compact > dispersed in {wins}/5 seeds (≥ 4), flags before the median step in {early}/5 (≥ 4), equal mass: {mass_ok}; {}",
            lines.join("; ")
        ),
    )
}

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cae-anomaly"))
        .args(args)
        .env_remove("TRACE_SEED")
        .output()
        .expect("binary runs")
}

fn monotonicity_and_determinism(ctx: &mut Ctx) -> Outcome {
    let run = ctx.karman(0, false);
    let recs = cae_anomaly::detect::score(&run.model_2d, &run.frames, Split::Test).unwrap();
    let mut thresholds: Vec<f64> = recs.iter().map(|r| r.mse).collect();
    thresholds.push(thresholds.iter().cloned().fold(0.0, f64::max) * 2.0);
    thresholds.sort_by(f64::total_cmp);
    let mut monotone = true;
    let mut prev: Option<Vec<usize>> = None;
    for &t in &thresholds {
        let now: Vec<usize> = flag(&recs, t).flagged.iter().map(|r| r.sample_index).collect();
        if let Some(p) = &prev {
            monotone &= now.iter().all(|i| p.contains(i)) && now.len() <= p.len();
        }
        prev = Some(now);
    }

    let dir = tempfile::tempdir().unwrap();
    let mut identical = true;
    let mut notes = Vec::new();
    let short_droplet = ["--epochs", "2", "--set", "n_steps=40"];
    for (preset, extra) in [
        ("karman-2d", ["--epochs", "3", "--set", "n_sims=8"]),
        ("droplet", short_droplet),
        ("droplet-500", short_droplet),
    ] {
        let mut outputs = Vec::new();
        for (k, threads) in ["1", "2"].iter().enumerate() {
            let out = dir.path().join(format!("{preset}-{k}"));
            let mut args = vec!["reproduce", preset, "--seed", "7", "--threads", threads, "--out", out.to_str().unwrap()];
            args.extend(extra);
            let o = run_cli(&args);
            if !o.status.success() {
                return outcome(false, format!("reproduce {preset} failed: {}", String::from_utf8_lossy(&o.stderr)));
            }
            outputs.push(out);
        }
        for f in ["scores.csv", "report.json", "model.ckpt", "dataset.ds"] {
            let read = |p: &Path| std::fs::read(p.join(f)).unwrap_or_default();
            let (a, b) = (read(&outputs[0]), read(&outputs[1]));
            identical &= !a.is_empty() && a == b;
        }
        notes.push(format!("{preset} seed 7 twice"));
    }
    outcome(
        monotone && identical,
        format!(
            "{} thresholds nested: {monotone}; {} byte-identical: {identical}",
            thresholds.len(),
            notes.join(", ")
        ),
    )
}

type Criterion = fn(&mut Ctx) -> Outcome;

fn main() {
    // cargo passes libtest flags such as --nocapture; a filter argument selects nothing special
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [(usize, &str, Criterion); 9] = [
        (1, "gradient fidelity", gradient_fidelity),
        (2, "convolution oracle", convolution_oracle),
        (3, "pipeline arithmetic", pipeline_arithmetic),
        (4, "training behavior", training_behavior),
        (5, "spatial anomaly detection", spatial_anomalies),
        (6, "temporal context", temporal_context),
        (7, "sparsity collapse", sparsity_collapse),
        (8, "mass-concentration sensitivity", mass_concentration),
        (9, "threshold monotonicity and determinism", monotonicity_and_determinism),
    ];
    let mut ctx = Ctx::default();
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let o = run(&mut ctx);
        println!(
            "criterion {id} {}: {name} [{:.1}s] {}",
            if o.passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.passed {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
