//! Central finite-difference check of the analytic gradients.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::conv::{ConvLayer, TransposedConvLayer};
use crate::nn::layer::{DenseLayer, Layer};
use crate::nn::model::{ArchSpec, AutoencoderModel, ConfigId, Sequential};
use crate::tensor::{mse, Shape, Tensor};

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub len: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
    /// Set when the model could not be evaluated at all.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.params.iter().all(|p| p.max_rel_error <= self.tolerance)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(msg) = &self.failure {
            return writeln!(f, "FAIL: {msg}");
        }
        for p in &self.params {
            writeln!(
                f,
                "  {:<18} n={:<6} max_rel={:.3e} max_abs={:.3e}",
                p.name, p.len, p.max_rel_error, p.max_abs_error
            )?;
        }
        writeln!(
            f,
            "{} (max relative error {:.3e}, tolerance {:.1e}, eps {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_error(),
            self.tolerance,
            self.epsilon
        )
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Perturbs every parameter by `±epsilon` and compares the central
/// difference of the MSE loss to the analytic gradient.
pub fn gradient_check(
    net: &Sequential<f64>,
    x: &Tensor<f64>,
    target: &Tensor<f64>,
    epsilon: f64,
    tolerance: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        epsilon,
        tolerance,
        params: Vec::new(),
        failure: None,
    };
    let analytic = match net.loss_and_grad(x, target) {
        Ok((_, g)) => g,
        Err(e) => {
            report.failure = Some(e.to_string());
            return report;
        }
    };
    let names = net.param_names();
    let mut probe = net.clone();
    let loss = |n: &Sequential<f64>| -> Option<f64> { mse(&n.forward(x).ok()?, target).ok() };
    for (pi, grad) in analytic.iter().enumerate() {
        let mut check = ParamCheck {
            name: names[pi].clone(),
            len: grad.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for j in 0..grad.len() {
            let orig = probe.params()[pi].data()[j];
            probe.params_mut()[pi].data_mut()[j] = orig + epsilon;
            let plus = loss(&probe);
            probe.params_mut()[pi].data_mut()[j] = orig - epsilon;
            let minus = loss(&probe);
            probe.params_mut()[pi].data_mut()[j] = orig;
            let (Some(plus), Some(minus)) = (plus, minus) else {
                report.failure = Some(format!("forward failed while probing {}", check.name));
                return report;
            };
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad.data()[j];
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
            check.max_rel_error = check.max_rel_error.max(rel_error(a, numeric));
        }
        report.params.push(check);
    }
    report
}

/// Tiny instance of `config` with random weights and biases.
///
/// Zero biases put ReLU inputs exactly on the kink wherever the upstream
/// activations vanish, where the one-sided derivatives disagree.
pub fn toy_model(config: ConfigId, seed: u64) -> AutoencoderModel<f64> {
    let spec = match config {
        ConfigId::Karman2d => ArchSpec::karman_2d(8, 8).with_filters(2).with_dense(5, 3),
        ConfigId::Karman3dStack => ArchSpec::karman_3d_stack(6, 6).with_filters(2).with_dense(4, 3),
        ConfigId::Droplet3d => ArchSpec::droplet_3d(8)
            .with_droplet_widths([2, 2])
            .with_output_range(0.0, 1.0),
    };
    let mut model = AutoencoderModel::<f64>::new(spec, seed).expect("toy specs are valid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in model.network_mut().params_mut() {
        if p.shape().rank() == 1 {
            for v in p.data_mut() {
                *v = rng.gen_range(-0.2..0.2);
            }
        }
    }
    model
}

/// Runs [`gradient_check`] on a toy instance of `config` with random input
/// and target in `[0, 1]`.
pub fn check_toy_config(config: ConfigId, seed: u64, epsilon: f64, tolerance: f64) -> GradCheckReport {
    let model = toy_model(config, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let shape = model.input_shape().clone();
    let mut draw = || {
        let data = (0..shape.numel()).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(shape.clone(), data).expect("matching length")
    };
    let x = draw();
    let target = draw();
    gradient_check(model.network(), &x, &target, epsilon, tolerance)
}

fn random(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::from_dims(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("matching length")
}

/// Single-layer networks for every layer type. Parameter-free layers sit
/// behind a dense layer so there is something upstream to differentiate.
pub fn layer_cases(seed: u64) -> Vec<(String, Sequential<f64>, Shape)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = |d: &[usize]| Shape::new(d.to_vec()).expect("static shape");
    let conv2 = ConvLayer::new(random(&mut rng, &[3, 2, 3, 3]), random(&mut rng, &[3]), vec![2, 2], vec![1, 1]);
    let conv3 = ConvLayer::new(random(&mut rng, &[2, 2, 3, 3, 3]), random(&mut rng, &[2]), vec![1, 2, 2], vec![1, 1, 1]);
    let convt2 = TransposedConvLayer::new(random(&mut rng, &[2, 3, 3, 3]), random(&mut rng, &[3]), vec![2, 2]);
    let convt3 = TransposedConvLayer::new(random(&mut rng, &[2, 1, 3, 3, 3]), random(&mut rng, &[1]), vec![2, 1, 2]);
    let dense = DenseLayer::new(random(&mut rng, &[4, 6]), random(&mut rng, &[4])).expect("static shapes");
    let one = |l: Layer<f64>| Sequential::new(vec![l]);
    let behind = |l: Layer<f64>| Sequential::new(vec![Layer::Dense(dense.clone()), l]);
    vec![
        ("conv 2d".into(), one(Layer::Conv(conv2.expect("static shapes"))), shape(&[2, 5, 6])),
        ("conv 3d".into(), one(Layer::Conv(conv3.expect("static shapes"))), shape(&[2, 3, 5, 4])),
        ("transposed conv 2d".into(), one(Layer::ConvTranspose(convt2.expect("static shapes"))), shape(&[2, 3, 2])),
        ("transposed conv 3d".into(), one(Layer::ConvTranspose(convt3.expect("static shapes"))), shape(&[2, 2, 3, 2])),
        ("dense".into(), one(Layer::Dense(dense.clone())), shape(&[6])),
        ("relu".into(), behind(Layer::Relu), shape(&[6])),
        ("clamp".into(), behind(Layer::Clamp { lo: -0.5, hi: 0.5 }), shape(&[6])),
        ("reshape".into(), behind(Layer::Reshape(shape(&[2, 2]))), shape(&[6])),
        ("crop".into(), behind(Layer::Crop(shape(&[3]))), shape(&[6])),
    ]
}

/// Every layer type in isolation plus the toy instance of every
/// configuration for `seeds` seeds.
pub fn check_all(epsilon: f64, tolerance: f64, seeds: u64) -> Vec<(String, GradCheckReport)> {
    let mut out = Vec::new();
    for (name, net, in_shape) in layer_cases(9) {
        let mut rng = ChaCha8Rng::seed_from_u64(out.len() as u64 + 1);
        let x = random(&mut rng, in_shape.dims());
        let report = match net.forward(&x) {
            Ok(y) => {
                let t = random(&mut rng, y.dims());
                gradient_check(&net, &x, &t, epsilon, tolerance)
            }
            Err(e) => GradCheckReport {
                epsilon,
                tolerance,
                params: Vec::new(),
                failure: Some(e.to_string()),
            },
        };
        out.push((format!("layer {name}"), report));
    }
    for config in [ConfigId::Karman2d, ConfigId::Karman3dStack, ConfigId::Droplet3d] {
        for seed in 0..seeds {
            out.push((format!("toy {config} seed {seed}"), check_toy_config(config, seed, epsilon, tolerance)));
        }
    }
    out
}
