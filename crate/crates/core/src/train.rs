//! Minibatch Adam on reconstruction MSE with validation monitoring.
//!
//! Per-sample forward/backward passes within a batch may run on the rayon
//! pool; gradients are always summed in batch order, so results do not
//! depend on the thread count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::nn::AutoencoderModel;
use crate::tensor::{mse, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 70,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            early_stop_patience: 10,
        }
    }
}

impl TrainConfig {
    /// Vortex-street defaults (70 epochs).
    pub fn karman() -> Self {
        Self::default()
    }

    /// Droplet defaults (100 epochs).
    pub fn droplet() -> Self {
        TrainConfig {
            epochs: 100,
            ..Self::default()
        }
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// First/second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<Tensor<T>> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape().clone()))
            .collect();
        AdamState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    hp: &AdamParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape(format!(
                "param {i}: {} vs grad {} vs moment {}",
                p.shape(),
                g.shape(),
                state.m[i].shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j].to_f64();
            let mj = hp.beta1 * m[j].to_f64() + (1.0 - hp.beta1) * gj;
            let vj = hp.beta2 * v[j].to_f64() + (1.0 - hp.beta2) * gj * gj;
            m[j] = T::from_f64(mj);
            v[j] = T::from_f64(vj);
            let update = hp.learning_rate * (mj / c1) / ((vj / c2).sqrt() + hp.epsilon);
            *w = T::from_f64(w.to_f64() - update);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossHistory {
    pub epochs: Vec<EpochLoss>,
}

impl LossHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn best_val(&self) -> Option<(usize, f64)> {
        self.epochs
            .iter()
            .enumerate()
            .map(|(i, e)| (i, e.val_mse))
            .fold(None, |best, (i, v)| match best {
                Some((_, b)) if b <= v => best,
                _ => Some((i, v)),
            })
    }

    /// `epoch,train_mse,val_mse` with 1-based epochs.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_mse,val_mse\n");
        for (i, e) in self.epochs.iter().enumerate() {
            s.push_str(&format!("{},{:?},{:?}\n", i + 1, e.train_mse, e.val_mse));
        }
        s
    }
}

/// Reconstruction MSE of every sample, in input order.
pub fn evaluate_split(model: &AutoencoderModel<f32>, samples: &[&Tensor<f32>]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptySplit("nothing to evaluate".into()));
    }
    samples
        .par_iter()
        .map(|x| mse(&model.reconstruct(x)?, x))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Trains on the train split, monitoring the validation split after every
/// epoch, and returns the parameters with the lowest validation MSE seen.
pub fn fit(
    model: AutoencoderModel<f32>,
    dataset: &DatasetManifest,
    cfg: &TrainConfig,
) -> Result<(AutoencoderModel<f32>, LossHistory)> {
    fit_with(model, dataset, cfg, |_, _| {})
}

/// [`fit`] with a per-epoch callback receiving the 1-based epoch and its losses.
pub fn fit_with(
    mut model: AutoencoderModel<f32>,
    dataset: &DatasetManifest,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &EpochLoss),
) -> Result<(AutoencoderModel<f32>, LossHistory)> {
    let train = dataset.tensors(Split::Train);
    let val = dataset.tensors(Split::Val);
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("val".into()));
    }
    if cfg.epochs == 0 {
        return Err(Error::config("epochs", "must be at least 1"));
    }
    if cfg.batch_size == 0 || cfg.batch_size > train.len() {
        return Err(Error::config(
            "batch_size",
            format!("must be in 1..={} (training-set size)", train.len()),
        ));
    }
    if let Some(bad) = train.iter().chain(&val).find(|t| t.shape() != model.input_shape()) {
        return Err(Error::shape(format!(
            "sample {} does not match model input {}",
            bad.shape(),
            model.input_shape()
        )));
    }

    let hp = cfg.adam();
    let mut state = AdamState::new(model.network().params());
    let mut history = LossHistory::default();
    let mut best: Option<(f64, AutoencoderModel<f32>)> = None;
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut losses = Vec::with_capacity(train.len());
        for batch in order.chunks(cfg.batch_size) {
            let per_sample: Vec<(f64, Vec<Tensor<f32>>)> = batch
                .par_iter()
                .map(|&i| model.backward(train[i], train[i]))
                .collect::<Result<_>>()?;
            let mut iter = per_sample.into_iter();
            let (first_loss, mut acc) = iter.next().expect("non-empty batch");
            losses.push(first_loss);
            for (loss, grads) in iter {
                losses.push(loss);
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += *y;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f32;
            for a in acc.iter_mut() {
                for x in a.data_mut() {
                    *x *= scale;
                }
            }
            let batch_loss = mean(&losses[losses.len() - batch.len()..]);
            if !batch_loss.is_finite() || acc.iter().any(|g| g.check_finite("gradient").is_err()) {
                return Err(Error::NumericFailure(format!(
                    "non-finite loss or gradient in epoch {}",
                    epoch + 1
                )));
            }
            let mut params = model.network_mut().params_mut();
            adam_step(&mut params, &acc, &mut state, &hp)?;
        }
        let val_mse = mean(&evaluate_split(&model, &val)?);
        if !val_mse.is_finite() {
            return Err(Error::NumericFailure(format!(
                "non-finite validation loss in epoch {}",
                epoch + 1
            )));
        }
        let entry = EpochLoss {
            train_mse: mean(&losses),
            val_mse,
        };
        history.epochs.push(entry);
        on_epoch(epoch + 1, &entry);

        if best.as_ref().is_none_or(|(b, _)| val_mse < *b) {
            best = Some((val_mse, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }
    let (_, best_model) = best.expect("at least one epoch ran");
    Ok((best_model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetManifest, Normalization, Sample};
    use crate::nn::ArchSpec;
    use crate::tensor::Shape;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_dims(&[1], vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::from_dims(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let orig = p.clone();
        let g = Tensor::zeros(p.shape().clone());
        let mut st = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[g], &mut st, &TrainConfig::default().adam()).unwrap();
        assert_eq!(p, orig);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar(0.0);
        let mut st = AdamState::new([&p]);
        let hp = AdamParams {
            learning_rate: 0.1,
            ..TrainConfig::default().adam()
        };
        adam_step(&mut [&mut p], &[scalar(1.0)], &mut st, &hp).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        assert!((p.data()[0] + 0.1).abs() < 1e-8);
        let before = p.data()[0];
        adam_step(&mut [&mut p], &[scalar(1.0)], &mut st, &hp).unwrap();
        assert!(p.data()[0] < before);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut p = scalar(0.0);
        let mut st = AdamState::new([&p]);
        let g = Tensor::from_dims(&[2], vec![1.0, 1.0]).unwrap();
        assert!(adam_step(&mut [&mut p], &[g], &mut st, &TrainConfig::default().adam()).is_err());
    }

    fn constant_dataset(n: usize, h: usize, w: usize, v: f32) -> DatasetManifest {
        let samples: Vec<Sample> = (0..n)
            .map(|i| Sample::at(0, i as u32, Tensor::full(Shape::new(vec![1, h, w]).unwrap(), v)))
            .collect();
        let (tr, va, _) = crate::data::split_counts(n);
        let splits = (0..n)
            .map(|i| if i < tr { Split::Train } else if i < tr + va { Split::Val } else { Split::Test })
            .collect();
        DatasetManifest {
            samples,
            splits,
            normalization: Normalization {
                mode: crate::data::NormalizationMode::MinMax,
                min: 0.0,
                max: 1.0,
            },
            source: "constant".into(),
        }
    }

    #[test]
    fn single_epoch_history() {
        let ds = constant_dataset(20, 16, 16, 0.4);
        let model = AutoencoderModel::new(ArchSpec::karman_2d(16, 16).with_filters(2).with_dense(8, 4), 0).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (_, h) = fit(model, &ds, &cfg).unwrap();
        assert_eq!(h.len(), 1);
    }

    #[test]
    fn empty_splits_and_bad_batch() {
        let mut ds = constant_dataset(20, 8, 8, 0.4);
        let model = AutoencoderModel::new(ArchSpec::karman_2d(8, 8).with_filters(2).with_dense(4, 2), 0).unwrap();
        let cfg = TrainConfig {
            batch_size: 100,
            ..TrainConfig::default()
        };
        assert!(matches!(fit(model.clone(), &ds, &cfg), Err(Error::Config { .. })));
        for s in ds.splits.iter_mut() {
            if *s == Split::Val {
                *s = Split::Test;
            }
        }
        assert!(matches!(fit(model.clone(), &ds, &TrainConfig::default()), Err(Error::EmptySplit(_))));
        assert!(matches!(evaluate_split(&model, &[]), Err(Error::EmptySplit(_))));
    }

    #[test]
    fn evaluation_is_order_stable() {
        let model = AutoencoderModel::new(ArchSpec::karman_2d(8, 8).with_filters(2).with_dense(4, 2), 3).unwrap();
        let xs: Vec<Tensor<f32>> = (0..5)
            .map(|i| Tensor::full(Shape::new(vec![1, 8, 8]).unwrap(), i as f32 / 5.0))
            .collect();
        let refs: Vec<&Tensor<f32>> = xs.iter().collect();
        let all = evaluate_split(&model, &refs).unwrap();
        assert_eq!(all, evaluate_split(&model, &refs).unwrap());
        let one = evaluate_split(&model, &refs[2..3]).unwrap();
        assert_eq!(one[0], all[2]);
        let direct = mse(&model.reconstruct(&xs[2]).unwrap(), &xs[2]).unwrap();
        assert_eq!(one[0], direct);
    }
}
