//! Configuration shared by the CLI, training and the service. Stored as TOML.

use std::path::Path;

use diffmath::Interp;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub radius: f64,
    pub fov_deg: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self { radius: 1.0, fov_deg: 12.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub samples: usize,
    pub stratified: bool,
    pub near: f64,
    pub far: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { samples: 24, stratified: true, near: 0.8, far: 1.2 }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::Config("sampling.samples must be >= 2".into()));
        }
        if !(self.near < self.far) || self.near <= 0.0 {
            return Err(Error::Config(format!("need 0 < near < far, got {} / {}", self.near, self.far)));
        }
        Ok(())
    }
}

/// Gaussian pose prior, clamped to `max_*`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseDist {
    pub sigma_pitch: f64,
    pub sigma_yaw: f64,
    pub max_pitch: f64,
    pub max_yaw: f64,
}

impl Default for PoseDist {
    fn default() -> Self {
        Self { sigma_pitch: 0.15, sigma_yaw: 0.3, max_pitch: 0.45, max_yaw: 0.9 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Injection {
    None,
    Trunk,
    #[default]
    ColorBranch,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterpMode {
    #[default]
    Trilinear,
    Tricubic,
}

impl From<InterpMode> for Interp {
    fn from(m: InterpMode) -> Self {
        match m {
            InterpMode::Trilinear => Interp::Trilinear,
            InterpMode::Tricubic => Interp::Tricubic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub classes: usize,
    pub z_shape: usize,
    pub z_texture: usize,
    pub mapping_hidden: usize,
    pub trunk_depth: usize,
    pub trunk_width: usize,
    pub color_width: usize,
    pub grid_size: usize,
    pub grid_features: usize,
    pub interp: InterpMode,
    pub injection: Injection,
    pub image_branch: bool,
    pub semantic_branch: bool,
    /// Added to the frequency outputs of both mapping networks.
    pub omega0: f64,
    /// Half-size of the axis-aligned box mapped to [-1, 1]^3 before the trunk.
    pub box_half: f64,
    pub density_gain: f64,
    /// Density an untrained field emits on average.
    pub density_init: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            z_shape: 64,
            z_texture: 64,
            mapping_hidden: 128,
            trunk_depth: 8,
            trunk_width: 128,
            color_width: 128,
            grid_size: 32,
            grid_features: 16,
            interp: InterpMode::Trilinear,
            injection: Injection::ColorBranch,
            image_branch: true,
            semantic_branch: true,
            omega0: 25.0,
            box_half: 0.24,
            density_gain: 10.0,
            density_init: 5.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.classes < 2 {
            return bad("generator.classes must be >= 2");
        }
        if self.trunk_depth < 1 || self.trunk_width < 1 || self.color_width < 1 {
            return bad("generator layer sizes must be positive");
        }
        if self.z_shape < 1 || self.z_texture < 1 || self.mapping_hidden < 1 {
            return bad("generator latent sizes must be positive");
        }
        if self.grid_size < 2 || self.grid_features < 1 {
            return bad("generator grid needs size >= 2 and at least one feature");
        }
        if !self.image_branch && !self.semantic_branch {
            return bad("at least one of image_branch / semantic_branch must be on");
        }
        if self.box_half <= 0.0 || self.density_init <= 0.0 || self.density_gain <= 0.0 {
            return bad("box_half, density_gain and density_init must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscConfig {
    /// Channel width per block; the block count must equal log2(resolution) - 1.
    pub widths: Vec<usize>,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self { widths: vec![32, 64, 128, 128] }
    }
}

impl DiscConfig {
    /// Widths for `resolution`, extending with the last width one block per doubling past 32.
    pub fn widths_for(&self, resolution: usize) -> Result<Vec<usize>> {
        if resolution < 8 || !resolution.is_power_of_two() {
            return Err(Error::Config(format!("discriminator resolution must be a power of two >= 8, got {resolution}")));
        }
        let blocks = resolution.trailing_zeros() as usize - 1;
        let mut w = self.widths.clone();
        if w.is_empty() {
            return Err(Error::Config("discriminator.widths is empty".into()));
        }
        let last = *w.last().unwrap();
        w.resize(blocks, last);
        Ok(w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub lambda_p: f64,
    /// Squared L2 pose distance when true, plain L2 otherwise.
    pub pose_squared: bool,
    /// Weight of the pose regression on fakes inside the D_c update.
    pub disc_pose: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_c: 10.0, lambda_s: 10.0, lambda_p: 10.0, pose_squared: true, disc_pose: 10.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStage {
    pub iteration: u64,
    pub resolution: usize,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub resolution: usize,
    pub batch: usize,
    pub iterations: u64,
    pub seed: u64,
    pub lr_g: f64,
    pub lr_dc: f64,
    pub lr_ds: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub losses: LossWeights,
    pub schedule: Vec<ScheduleStage>,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            batch: 8,
            iterations: 2000,
            seed: 0,
            lr_g: 6e-5,
            lr_dc: 2e-4,
            lr_ds: 1e-4,
            beta1: 0.0,
            beta2: 0.9,
            losses: LossWeights::default(),
            schedule: Vec::new(),
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    /// Resolution and batch in effect at `iteration`.
    pub fn stage_at(&self, iteration: u64) -> (usize, usize) {
        let mut cur = (self.resolution, self.batch);
        for s in &self.schedule {
            if iteration >= s.iteration {
                cur = (s.resolution, s.batch);
            }
        }
        cur
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch < 1 || self.schedule.iter().any(|s| s.batch < 1) {
            return Err(Error::Config("train.batch must be >= 1".into()));
        }
        let lw = &self.losses;
        if [lw.lambda_c, lw.lambda_s, lw.lambda_p, lw.disc_pose].iter().any(|v| *v < 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub steps: usize,
    pub lr: f64,
    pub w_sem: f64,
    pub w_rgb: f64,
    pub proximity: f64,
    pub optimize_pose: bool,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self { steps: 200, lr: 1e-2, w_sem: 0.5, w_rgb: 1.0, proximity: 0.1, optimize_pose: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_scenes: usize,
    pub resolution: usize,
    pub classes: usize,
    pub sigma_pitch: f64,
    pub sigma_yaw: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { n_scenes: 2000, resolution: 32, classes: 4, sigma_pitch: 0.15, sigma_yaw: 0.3, seed: 0 }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("dataset.classes must be >= 2".into()));
        }
        if ![32, 64, 128].contains(&self.resolution) {
            return Err(Error::Config(format!("dataset.resolution must be 32, 64 or 128, got {}", self.resolution)));
        }
        Ok(())
    }

    pub fn pose_dist(&self) -> PoseDist {
        PoseDist { sigma_pitch: self.sigma_pitch, sigma_yaw: self.sigma_yaw, ..PoseDist::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub dataset: DatasetSpec,
    pub camera: CameraConfig,
    pub sampling: SamplingConfig,
    pub pose: PoseDist,
    pub generator: GeneratorConfig,
    pub discriminator: DiscConfig,
    pub train: TrainConfig,
    pub inversion: InversionConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.sampling.validate()?;
        self.generator.validate()?;
        self.train.validate()?;
        self.discriminator.widths_for(self.train.resolution)?;
        if self.dataset.classes != self.generator.classes {
            return Err(Error::Config(format!(
                "dataset.classes ({}) != generator.classes ({})",
                self.dataset.classes, self.generator.classes
            )));
        }
        Ok(())
    }
}
