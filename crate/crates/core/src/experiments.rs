//! Dataset and model presets shared by the command line and the
//! reproduction tests.

use crate::data::{prepare_droplet, prepare_karman, stack_temporal, DatasetManifest, NormalizationMode, Sample};
use crate::error::Result;
use crate::nn::{ArchSpec, AutoencoderModel};
use crate::synth::{gen_droplet_series, gen_vortex_ensemble, DropletParams, VortexParams, DEFAULT_FRAME};
use crate::train::{fit, LossHistory, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct KarmanSetup {
    pub n_sims_generated: usize,
    pub n_sims_selected: usize,
    pub n_steps: usize,
    pub frame: [usize; 2],
    pub filters: usize,
    pub hidden_units: usize,
    pub latent_units: usize,
    pub train: TrainConfig,
}

impl KarmanSetup {
    /// 20 simulations × 40 steps, 16 filters.
    pub fn desk() -> Self {
        KarmanSetup {
            n_sims_generated: 20,
            n_sims_selected: 20,
            n_steps: 40,
            frame: DEFAULT_FRAME,
            filters: 16,
            hidden_units: 256,
            latent_units: 128,
            train: TrainConfig::karman(),
        }
    }

    /// 300 simulations × 54 steps of which 90 are used, 64 filters.
    pub fn full() -> Self {
        KarmanSetup {
            n_sims_generated: 300,
            n_sims_selected: 90,
            n_steps: 54,
            filters: 64,
            ..Self::desk()
        }
    }

    pub fn frames(&self, seed: u64) -> Result<Vec<Sample>> {
        let params = VortexParams::ensemble(self.n_sims_generated, self.frame, seed);
        gen_vortex_ensemble(&params, self.n_steps, self.frame)
    }

    pub fn dataset(&self, seed: u64) -> Result<DatasetManifest> {
        prepare_karman(self.frames(seed)?, self.n_sims_selected, seed)
    }

    pub fn arch_2d(&self) -> ArchSpec {
        ArchSpec::karman_2d(self.frame[0], self.frame[1])
            .with_filters(self.filters)
            .with_dense(self.hidden_units, self.latent_units)
    }

    pub fn arch_3d(&self) -> ArchSpec {
        ArchSpec::karman_3d_stack(self.frame[0], self.frame[1])
            .with_filters(self.filters)
            .with_dense(self.hidden_units, self.latent_units)
    }
}

/// Frame dataset and its disjoint three-frame stacks.
pub fn karman_datasets(setup: &KarmanSetup, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    let frames = setup.dataset(seed)?;
    let stacks = stack_temporal(&frames, seed)?;
    Ok((frames, stacks))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropletSetup {
    pub params: DropletParams,
    pub n_steps: usize,
    pub widths: [usize; 2],
    pub train: TrainConfig,
}

impl DropletSetup {
    /// 200 steps generated at 64³ and pooled to 32³, widths 8/16.
    pub fn desk(seed: u64) -> Self {
        DropletSetup {
            params: DropletParams::desk(seed),
            n_steps: 200,
            widths: [8, 16],
            train: TrainConfig {
                batch_size: 8,
                ..TrainConfig::droplet()
            },
        }
    }

    /// The desk data and model trained for 500 epochs.
    pub fn long(seed: u64) -> Self {
        let mut s = Self::desk(seed);
        s.train.epochs = 500;
        s
    }

    pub fn volumes(&self) -> Result<Vec<Sample>> {
        gen_droplet_series(&self.params, self.n_steps)
    }

    pub fn dataset(&self, mode: NormalizationMode, seed: u64) -> Result<DatasetManifest> {
        prepare_droplet(self.volumes()?, mode, seed)
    }

    /// Model for pooled volumes; output clamped to the data range of `mode`.
    pub fn arch(&self, mode: NormalizationMode) -> ArchSpec {
        let spec = ArchSpec::droplet_3d(self.params.domain_side / 2).with_droplet_widths(self.widths);
        match mode {
            NormalizationMode::BytePassthrough => spec.with_output_range(0.0, 255.0),
            NormalizationMode::MinMax => spec.with_output_range(0.0, 1.0),
        }
    }
}

/// Initializes `spec` from `seed` and fits it with `cfg` reseeded by `seed`.
pub fn train_model(
    spec: ArchSpec,
    dataset: &DatasetManifest,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(AutoencoderModel<f32>, LossHistory)> {
    let model = AutoencoderModel::new(spec, seed)?;
    fit(model, dataset, &TrainConfig { seed, ..cfg.clone() })
}
