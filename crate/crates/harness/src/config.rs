//! TOML experiment configuration.
//!
//! Relative paths are resolved against the directory of the config file.
//! Every field except `dataset` has a default; the seed has none and must
//! come from the file or the command line.

use std::path::{Path, PathBuf};

use distransfer_core::attacks::{scaled_budget, AttackSpec, Norm};
use distransfer_core::certification::{self, ExtendedRadiusParams};
use distransfer_core::classifier::Architecture;
use distransfer_core::diffusion::{self, make_schedule, NoiseSchedule};
use distransfer_core::purifier::{DistanceMode, GuidanceConfig, GuidanceTarget, ReferenceNoise, SsimSign};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, HarnessError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Shapes,
    Mixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    #[serde(default = "d_train_per_class")]
    pub train_per_class: usize,
    #[serde(default = "d_test_per_class")]
    pub test_per_class: usize,
    /// Image side; shapes only.
    #[serde(default = "d_side")]
    pub side: usize,
    /// Mixture only.
    #[serde(default = "d_classes")]
    pub classes: usize,
    /// Mixture only.
    #[serde(default = "d_spread")]
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    /// Defaults to `small_conv` for images and `mlp` for points.
    #[serde(default)]
    pub arch: Option<String>,
    #[serde(default = "d_clf_epochs")]
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSpec {
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_beta_start")]
    pub beta_start: f64,
    #[serde(default = "d_beta_end")]
    pub beta_end: f64,
    #[serde(default = "d_diff_epochs")]
    pub epochs: usize,
}

/// One attack of the defense evaluation. Budgets are nominal 1/255 units,
/// converted with [`scaled_budget`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackEntry {
    pub norm: Norm,
    pub epsilon_255: f64,
    #[serde(default = "d_attack_steps")]
    pub steps: usize,
    /// Absolute step size; the core default when absent.
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default = "d_true")]
    pub random_start: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSpec {
    /// Defaults to `floor(0.06 T)`.
    #[serde(default)]
    pub t_star: Option<usize>,
    #[serde(default)]
    pub s: Option<f64>,
    #[serde(default)]
    pub phi: Option<f64>,
    #[serde(default)]
    pub distance: Option<DistanceMode>,
    #[serde(default)]
    pub ssim_sign: Option<SsimSign>,
    #[serde(default)]
    pub reference_noise: Option<ReferenceNoise>,
    #[serde(default)]
    pub target: Option<GuidanceTarget>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificationSpec {
    #[serde(default = "d_sigma")]
    pub sigma: f64,
    #[serde(default = "d_n0")]
    pub n0: usize,
    #[serde(default = "d_n")]
    pub n: usize,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// Number of test points certified.
    #[serde(default = "d_points")]
    pub points: usize,
    #[serde(default)]
    pub delta: f64,
    #[serde(default = "d_one")]
    pub c_alpha: f64,
    #[serde(default = "d_one")]
    pub c_s: f64,
    /// Overrides `-ln(alpha_bar_{t*}) / 2`.
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Smooth the purifier-prefixed classifier rather than the bare one.
    #[serde(default = "d_true")]
    pub purified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "d_eps_grid")]
    pub epsilon_255: Vec<f64>,
    #[serde(default = "d_tstar_grid")]
    pub t_star: Vec<usize>,
    /// The epsilon sweep covers every norm; the t* sweep and the sweep
    /// checks use the first.
    #[serde(default = "d_sweep_norms")]
    pub norms: Vec<Norm>,
    #[serde(default = "d_attack_steps")]
    pub steps: usize,
    /// Adds the (epsilon, t*) grid to the t* sweep.
    #[serde(default)]
    pub joint: bool,
    /// Test-set prefix used by the sweeps; the full test set when absent.
    #[serde(default)]
    pub per_class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveSpec {
    #[serde(default = "d_linf")]
    pub norm: Norm,
    #[serde(default = "d_eps_255")]
    pub epsilon_255: f64,
    #[serde(default = "d_adaptive_steps")]
    pub steps: usize,
    #[serde(default = "d_adaptive_per_class")]
    pub per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct OodSpec {
    #[serde(default)]
    pub per_class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualitySpec {
    /// Images per grid row.
    #[serde(default = "d_grid_columns")]
    pub columns: usize,
    /// Perturbation panels show `0.5 + amplification * delta`.
    #[serde(default = "d_amplification")]
    pub amplification: f64,
    #[serde(default)]
    pub per_class: Option<usize>,
}

/// Checkpoints and datasets produced by earlier commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default)]
    pub train_data: Option<PathBuf>,
    #[serde(default)]
    pub test_data: Option<PathBuf>,
    #[serde(default)]
    pub classifier: Option<PathBuf>,
    #[serde(default)]
    pub diffusion: Option<PathBuf>,
    /// Row files read by `report`; every `rows.jsonl` under the output
    /// directory when empty.
    #[serde(default)]
    pub rows: Vec<PathBuf>,
}

/// Thresholds enforced by `--check`, in accuracy fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSpec {
    #[serde(default = "d_defense_gain")]
    pub defense_gain: f64,
    #[serde(default = "d_clean_drop")]
    pub clean_drop: f64,
    #[serde(default = "d_eps_gap")]
    pub epsilon_gap: f64,
    #[serde(default = "d_adaptive_gain")]
    pub adaptive_gain: f64,
    #[serde(default = "d_ood_gain")]
    pub ood_gain: f64,
    #[serde(default = "d_min_ssim")]
    pub min_ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "d_workers")]
    pub workers: usize,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub classifier: ClassifierSpec,
    #[serde(default)]
    pub diffusion: DiffusionSpec,
    #[serde(default = "d_attacks")]
    pub attacks: Vec<AttackEntry>,
    #[serde(default)]
    pub guidance: GuidanceSpec,
    #[serde(default)]
    pub certification: CertificationSpec,
    #[serde(default)]
    pub sweeps: SweepSpec,
    #[serde(default)]
    pub adaptive: AdaptiveSpec,
    #[serde(default)]
    pub ood: OodSpec,
    #[serde(default)]
    pub quality: QualitySpec,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub check: CheckSpec,
}

fn d_train_per_class() -> usize {
    300
}
fn d_test_per_class() -> usize {
    100
}
fn d_side() -> usize {
    16
}
fn d_classes() -> usize {
    4
}
fn d_spread() -> f64 {
    0.1
}
fn d_clf_epochs() -> usize {
    80
}
fn d_steps() -> usize {
    diffusion::DEFAULT_T
}
fn d_beta_start() -> f64 {
    diffusion::DEFAULT_BETA_START
}
fn d_beta_end() -> f64 {
    diffusion::DEFAULT_BETA_END
}
fn d_diff_epochs() -> usize {
    100
}
fn d_attack_steps() -> usize {
    40
}
fn d_true() -> bool {
    true
}
fn d_sigma() -> f64 {
    certification::DEFAULT_SIGMA
}
fn d_n0() -> usize {
    certification::DEFAULT_N0
}
fn d_n() -> usize {
    certification::DEFAULT_N
}
fn d_alpha() -> f64 {
    certification::DEFAULT_ALPHA
}
fn d_points() -> usize {
    20
}
fn d_one() -> f64 {
    1.0
}
fn d_eps_grid() -> Vec<f64> {
    vec![0.0, 4.0, 8.0, 16.0, 32.0, 64.0, 80.0]
}
fn d_tstar_grid() -> Vec<usize> {
    vec![0, 4, 8, 12, 16, 24, 32, 48]
}
fn d_linf() -> Norm {
    Norm::Linf
}
fn d_sweep_norms() -> Vec<Norm> {
    vec![Norm::Linf, Norm::L2]
}
fn d_eps_255() -> f64 {
    8.0
}
fn d_adaptive_steps() -> usize {
    20
}
fn d_adaptive_per_class() -> usize {
    20
}
fn d_grid_columns() -> usize {
    8
}
fn d_amplification() -> f64 {
    10.0
}
fn d_defense_gain() -> f64 {
    0.30
}
fn d_clean_drop() -> f64 {
    0.15
}
fn d_eps_gap() -> f64 {
    0.20
}
fn d_adaptive_gain() -> f64 {
    0.40
}
fn d_ood_gain() -> f64 {
    0.10
}
fn d_min_ssim() -> f64 {
    0.6
}
fn d_workers() -> usize {
    1
}
fn d_attacks() -> Vec<AttackEntry> {
    vec![
        AttackEntry {
            norm: Norm::Linf,
            epsilon_255: 8.0,
            steps: 40,
            step_size: None,
            random_start: true,
        },
        AttackEntry {
            norm: Norm::L2,
            epsilon_255: 128.0,
            steps: 40,
            step_size: None,
            random_start: true,
        },
    ]
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            arch: None,
            epochs: d_clf_epochs(),
        }
    }
}

impl Default for DiffusionSpec {
    fn default() -> Self {
        Self {
            steps: d_steps(),
            beta_start: d_beta_start(),
            beta_end: d_beta_end(),
            epochs: d_diff_epochs(),
        }
    }
}

impl Default for CertificationSpec {
    fn default() -> Self {
        Self {
            sigma: d_sigma(),
            n0: d_n0(),
            n: d_n(),
            alpha: d_alpha(),
            points: d_points(),
            delta: 0.0,
            c_alpha: 1.0,
            c_s: 1.0,
            gamma: None,
            purified: true,
        }
    }
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            epsilon_255: d_eps_grid(),
            t_star: d_tstar_grid(),
            norms: d_sweep_norms(),
            steps: d_attack_steps(),
            joint: false,
            per_class: None,
        }
    }
}

impl Default for AdaptiveSpec {
    fn default() -> Self {
        Self {
            norm: Norm::Linf,
            epsilon_255: d_eps_255(),
            steps: d_adaptive_steps(),
            per_class: d_adaptive_per_class(),
        }
    }
}


impl Default for QualitySpec {
    fn default() -> Self {
        Self {
            columns: d_grid_columns(),
            amplification: d_amplification(),
            per_class: None,
        }
    }
}

impl Default for CheckSpec {
    fn default() -> Self {
        Self {
            defense_gain: d_defense_gain(),
            clean_drop: d_clean_drop(),
            epsilon_gap: d_eps_gap(),
            adaptive_gain: d_adaptive_gain(),
            ood_gain: d_ood_gain(),
            min_ssim: d_min_ssim(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| config_err(format!("config: {e}")))
    }

    /// Parses the file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        for p in [&mut paths.train_data, &mut paths.test_data, &mut paths.classifier, &mut paths.diffusion]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        paths.rows.iter_mut().for_each(fix);
        if let Some(out) = &mut self.out_dir {
            fix(out);
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let d = &self.dataset;
        if d.train_per_class == 0 || d.test_per_class == 0 {
            return Err(config_err("dataset sizes must be positive"));
        }
        if self.workers == 0 {
            return Err(config_err("workers must be at least 1"));
        }
        if self.sweeps.epsilon_255.is_empty() || self.sweeps.t_star.is_empty() || self.sweeps.norms.is_empty() {
            return Err(config_err("sweep grids and norms must be nonempty"));
        }
        if self.sweeps.epsilon_255.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(config_err("epsilon grid entries must be finite and nonnegative"));
        }
        if self.attacks.is_empty() {
            return Err(config_err("at least one attack is required"));
        }
        for a in &self.attacks {
            self.attack_spec(a).validate().map_err(|e| config_err(format!("attack: {e}")))?;
        }
        let schedule = self.schedule()?;
        if let Some(&t) = self.sweeps.t_star.iter().find(|&&t| t > schedule.steps()) {
            return Err(config_err(format!("t* grid entry {t} exceeds T = {}", schedule.steps())));
        }
        self.guidance_config(&schedule)
            .validate(&schedule)
            .map_err(|e| config_err(format!("guidance: {e}")))?;
        let c = &self.certification;
        if !(c.sigma >= 0.0 && c.alpha > 0.0 && c.alpha < 1.0 && c.n0 > 0 && c.n > 0) {
            return Err(config_err("certification needs sigma >= 0, alpha in (0, 1), n0, n >= 1"));
        }
        if self.quality.columns == 0 {
            return Err(config_err("quality grid needs at least one column"));
        }
        Ok(())
    }

    pub fn is_images(&self) -> bool {
        self.dataset.kind == DatasetKind::Shapes
    }

    pub fn dataset_name(&self) -> &'static str {
        match self.dataset.kind {
            DatasetKind::Shapes => "shapes",
            DatasetKind::Mixture => "mixture",
        }
    }

    /// Flattened sample dimension, used for budget scaling.
    pub fn sample_dim(&self) -> usize {
        match self.dataset.kind {
            DatasetKind::Shapes => self.dataset.side * self.dataset.side,
            DatasetKind::Mixture => 2,
        }
    }

    pub fn architecture(&self) -> Result<Architecture, HarnessError> {
        match &self.classifier.arch {
            Some(name) => Architecture::parse(name).map_err(|e| config_err(e.to_string())),
            None if self.is_images() => Ok(Architecture::SmallConv),
            None => Ok(Architecture::Mlp),
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, HarnessError> {
        let d = &self.diffusion;
        make_schedule(d.steps, d.beta_start, d.beta_end).map_err(|e| config_err(format!("diffusion: {e}")))
    }

    pub fn guidance_config(&self, schedule: &NoiseSchedule) -> GuidanceConfig {
        let mut g = GuidanceConfig::defaults(schedule, self.is_images());
        let spec = &self.guidance;
        if let Some(t) = spec.t_star {
            g.t_star = t;
        }
        if let Some(s) = spec.s {
            g.s = s;
        }
        if let Some(phi) = spec.phi {
            g.phi = phi;
        }
        if let Some(d) = spec.distance {
            g.distance = d;
        }
        if let Some(v) = spec.ssim_sign {
            g.ssim_sign = v;
        }
        if let Some(v) = spec.reference_noise {
            g.reference_noise = v;
        }
        if let Some(v) = spec.target {
            g.target = v;
        }
        g
    }

    /// Norm of the t* sweep and of the sweep checks.
    pub fn primary_sweep_norm(&self) -> Norm {
        self.sweeps.norms[0]
    }

    pub fn budget(&self, norm: Norm, nominal_255: f64) -> f64 {
        scaled_budget(norm, nominal_255, self.sample_dim())
    }

    pub fn attack_spec(&self, a: &AttackEntry) -> AttackSpec {
        let mut spec = AttackSpec::new(a.norm, self.budget(a.norm, a.epsilon_255), a.steps);
        if let Some(step) = a.step_size {
            spec.step_size = step;
        }
        spec.random_start = a.random_start;
        spec
    }

    pub fn extended_params(&self, schedule: &NoiseSchedule, t_star: usize) -> Result<ExtendedRadiusParams, HarnessError> {
        let c = &self.certification;
        let gamma = match c.gamma {
            Some(g) => g,
            None if t_star == 0 => 0.0,
            None => certification::gamma_from_schedule(schedule, t_star).map_err(|e| config_err(e.to_string()))?,
        };
        let p = ExtendedRadiusParams {
            delta: c.delta,
            gamma_tstar: gamma,
            c_alpha: c.c_alpha,
            c_s: c.c_s,
        };
        p.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(p)
    }

    /// SHA-256 of the canonical JSON form with the output directory excluded,
    /// so hashes are comparable across output locations.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.out_dir = None;
        let text = serde_json::to_string(&canon).expect("config serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Seed of one experiment cell: a hash of the master seed and the cell's
/// identifiers, so adding cells never changes the seeds of others.
pub fn cell_seed(master: u64, ids: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for id in ids {
        h.update((id.len() as u64).to_le_bytes());
        h.update(id.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
