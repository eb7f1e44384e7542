//! Experiment runners. Each returns its result rows; files are written by
//! the CLI layer.

use std::path::Path;

use distransfer_core::attacks::{adaptive_pgd, pgd, AttackResult, AttackSpec, Norm};
use distransfer_core::certification::{certify, CertificateRecord, CertifyConfig};
use distransfer_core::classifier::{train_classifier, ClassifierModel, Predictor, TrainReport};
use distransfer_core::datasets::{corrupt, make_gaussian_mixture, make_shape_images, CorruptionFamily, CorruptionSpec, LabeledDataset};
use distransfer_core::diffusion::{train_diffusion, DiffusionModel, DiffusionTrainReport};
use distransfer_core::io::load_dataset;
use distransfer_core::metrics::{accuracy_on, psnr_batch, ssim_batch, MeanSe};
use distransfer_core::purifier::{purify, GuidanceConfig, PurifiedClassifier};
use ndarray::{ArrayD, Axis};
use rayon::prelude::*;

use crate::config::{cell_seed, ExperimentConfig};
use crate::error::{config_err, HarnessError, Result};
use crate::rows::ResultRow;

pub const SEVERITIES: [u8; 5] = [1, 2, 3, 4, 5];

/// Resolved configuration plus the worker pool.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    pool: rayon::ThreadPool,
}

impl Context {
    pub fn new(cfg: ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| config_err(format!("worker pool: {e}")))?;
        Ok(Self { cfg, seed, pool })
    }

    pub fn seed_for(&self, ids: &[&str]) -> u64 {
        cell_seed(self.seed, ids)
    }

    /// Runs independent cells on the pool; results keep the input order.
    pub fn run_cells<T, R, F>(&self, cells: &[T], f: F) -> Result<Vec<R>>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> Result<R> + Sync,
    {
        self.pool.install(|| cells.par_iter().map(&f).collect())
    }

    fn generate(&self, split: &str, per_class: usize) -> Result<LabeledDataset> {
        let d = &self.cfg.dataset;
        let seed = self.seed_for(&["data", split]);
        let ds = if self.cfg.is_images() {
            make_shape_images(per_class, d.side, seed)?
        } else {
            make_gaussian_mixture(per_class, d.classes, d.spread, seed)?
        };
        Ok(ds)
    }

    fn load_or_generate(&self, path: &Option<std::path::PathBuf>, split: &str, per_class: usize) -> Result<LabeledDataset> {
        match path {
            Some(p) => Ok(load_dataset(&existing(p)?)?),
            None => self.generate(split, per_class),
        }
    }

    pub fn train_data(&self) -> Result<LabeledDataset> {
        self.load_or_generate(&self.cfg.paths.train_data, "train", self.cfg.dataset.train_per_class)
    }

    pub fn test_data(&self) -> Result<LabeledDataset> {
        self.load_or_generate(&self.cfg.paths.test_data, "test", self.cfg.dataset.test_per_class)
    }

    /// Balanced prefix of the test set (labels cycle through the classes).
    pub fn test_subset(&self, per_class: Option<usize>) -> Result<LabeledDataset> {
        let test = self.test_data()?;
        match per_class {
            Some(k) => Ok(test.head((k * test.class_count()).min(test.len()))?),
            None => Ok(test),
        }
    }

    pub fn classifier_path(&self) -> Result<&Path> {
        self.cfg
            .paths
            .classifier
            .as_deref()
            .ok_or_else(|| config_err("paths.classifier is required"))
    }

    pub fn diffusion_path(&self) -> Result<&Path> {
        self.cfg
            .paths
            .diffusion
            .as_deref()
            .ok_or_else(|| config_err("paths.diffusion is required"))
    }

    pub fn load_classifier(&self) -> Result<ClassifierModel> {
        Ok(ClassifierModel::load(&existing(self.classifier_path()?)?)?)
    }

    pub fn load_models(&self) -> Result<Models> {
        let clf = self.load_classifier()?;
        let diff = DiffusionModel::load(&existing(self.diffusion_path()?)?)?;
        let guidance = self.cfg.guidance_config(diff.schedule());
        guidance
            .validate(diff.schedule())
            .map_err(|e| config_err(format!("guidance: {e}")))?;
        Ok(Models { clf, diff, guidance })
    }
}

fn existing(p: &Path) -> Result<std::path::PathBuf> {
    if p.exists() {
        Ok(p.to_path_buf())
    } else {
        Err(HarnessError::MissingPath(p.to_path_buf()))
    }
}

pub struct Models {
    pub clf: ClassifierModel,
    pub diff: DiffusionModel,
    pub guidance: GuidanceConfig,
}

impl Models {
    pub fn name(&self) -> &'static str {
        self.clf.architecture().name()
    }

    pub fn t_star(&self) -> usize {
        self.guidance.t_star
    }

    fn with_t_star(&self, t_star: usize) -> GuidanceConfig {
        GuidanceConfig { t_star, ..self.guidance }
    }

    /// Classifier accuracy on `purify(x)`; `t_star = 0` is the identity.
    pub fn defended_accuracy(&self, x: &ArrayD<f64>, y: &[usize], t_star: usize, seed: u64) -> Result<f64> {
        let purified = self.purify_at(x, t_star, seed)?;
        Ok(accuracy_on(&self.clf, &purified, y)?)
    }

    pub fn purify_at(&self, x: &ArrayD<f64>, t_star: usize, seed: u64) -> Result<ArrayD<f64>> {
        if t_star == 0 {
            return Ok(x.clone());
        }
        Ok(purify(&self.diff, &self.clf, x, &self.with_t_star(t_star), seed)?.0)
    }
}

pub fn attack_name(norm: Norm) -> String {
    format!("pgd_{}", norm.name())
}

fn attack_ids(norm: Norm, nominal_255: f64) -> [String; 2] {
    [attack_name(norm), format!("{nominal_255}")]
}

/// PGD against the bare classifier; a zero budget returns `x`.
fn attack_or_clean(clf: &ClassifierModel, x: &ArrayD<f64>, y: &[usize], spec: &AttackSpec, seed: u64) -> Result<ArrayD<f64>> {
    if spec.epsilon == 0.0 {
        return Ok(x.clone());
    }
    Ok(pgd(clf, x, y, spec, seed)?.adversarial)
}

pub fn generate_data(ctx: &Context) -> Result<(LabeledDataset, LabeledDataset)> {
    Ok((ctx.train_data()?, ctx.test_data()?))
}

pub fn run_train_classifier(ctx: &Context) -> Result<(ClassifierModel, TrainReport)> {
    let train = ctx.train_data()?;
    let test = ctx.test_data()?;
    let arch = ctx.cfg.architecture()?;
    Ok(train_classifier(&train, Some(&test), arch, ctx.cfg.classifier.epochs, ctx.seed_for(&["train-clf"]))?)
}

pub fn run_train_diffusion(ctx: &Context) -> Result<(DiffusionModel, DiffusionTrainReport)> {
    let train = ctx.train_data()?;
    let schedule = ctx.cfg.schedule()?;
    Ok(train_diffusion(&train, &schedule, ctx.cfg.diffusion.epochs, ctx.seed_for(&["train-diff"]))?)
}

pub struct AttackOutput {
    pub name: String,
    pub nominal_255: f64,
    pub result: AttackResult,
}

/// Every configured attack on the test set, against the bare classifier.
pub fn run_attacks(ctx: &Context) -> Result<(LabeledDataset, Vec<AttackOutput>, Vec<ResultRow>)> {
    let clf = ctx.load_classifier()?;
    let test = ctx.test_data()?;
    let (x, y) = (test.samples(), test.labels());
    let outs = ctx.run_cells(&ctx.cfg.attacks, |a| {
        let spec = ctx.cfg.attack_spec(a);
        let [name, eps] = attack_ids(a.norm, a.epsilon_255);
        let result = pgd(&clf, x, y, &spec, ctx.seed_for(&["attack", &name, &eps]))?;
        Ok(AttackOutput {
            name,
            nominal_255: a.epsilon_255,
            result,
        })
    })?;
    let rows = outs
        .iter()
        .zip(&ctx.cfg.attacks)
        .map(|(o, a)| {
            ResultRow::new("attack", ctx.cfg.dataset_name(), clf.architecture().name(), "accuracy")
                .attack(&o.name, ctx.cfg.attack_spec(a).epsilon)
                .accuracy(1.0 - o.result.success_rate(), y.len())
        })
        .collect();
    Ok((test, outs, rows))
}

/// Clean and attacked accuracy with and without the
/// purifier; `(|attacks| + 1) * 2` rows.
pub fn run_defense_eval(ctx: &Context, models: &Models) -> Result<Vec<ResultRow>> {
    let test = ctx.test_data()?;
    let (x, y) = (test.samples(), test.labels());
    let mut cells: Vec<Option<usize>> = vec![None];
    cells.extend((0..ctx.cfg.attacks.len()).map(Some));
    let per_cell = ctx.run_cells(&cells, |cell| {
        let (name, eps_ids, adv, eps) = match cell {
            None => ("clean".to_string(), "0".to_string(), x.clone(), 0.0),
            Some(i) => {
                let a = &ctx.cfg.attacks[*i];
                let spec = ctx.cfg.attack_spec(a);
                let [name, eps] = attack_ids(a.norm, a.epsilon_255);
                let adv = attack_or_clean(&models.clf, x, y, &spec, ctx.seed_for(&["eval-defense", &name, &eps, "attack"]))?;
                (name, eps, adv, spec.epsilon)
            }
        };
        let base = ResultRow::new("eval-defense", ctx.cfg.dataset_name(), models.name(), "accuracy").attack(&name, eps);
        let undefended = accuracy_on(&models.clf, &adv, y)?;
        let seed = ctx.seed_for(&["eval-defense", &name, &eps_ids, "purify"]);
        let defended = models.defended_accuracy(&adv, y, models.t_star(), seed)?;
        Ok(vec![
            base.clone().accuracy(undefended, y.len()),
            base.defended(models.t_star()).accuracy(defended, y.len()),
        ])
    })?;
    Ok(per_cell.into_iter().flatten().collect())
}

/// Accuracy against the budget grid for every sweep norm, with and without
/// defense.
pub fn run_epsilon_sweep(ctx: &Context, models: &Models) -> Result<Vec<ResultRow>> {
    let test = ctx.test_subset(ctx.cfg.sweeps.per_class)?;
    let (x, y) = (test.samples(), test.labels());
    let sw = &ctx.cfg.sweeps;
    let cells: Vec<(Norm, f64)> = sw
        .norms
        .iter()
        .flat_map(|&n| sw.epsilon_255.iter().map(move |&e| (n, e)))
        .collect();
    let per_cell = ctx.run_cells(&cells, |&(norm, nominal)| {
        let eps = ctx.cfg.budget(norm, nominal);
        let spec = AttackSpec::new(norm, eps, sw.steps);
        let [name, eps_id] = attack_ids(norm, nominal);
        let adv = attack_or_clean(&models.clf, x, y, &spec, ctx.seed_for(&["sweep-eps", &name, &eps_id, "attack"]))?;
        let base = ResultRow::new("sweep-eps", ctx.cfg.dataset_name(), models.name(), "accuracy").attack(&name, eps);
        let seed = ctx.seed_for(&["sweep-eps", &name, &eps_id, "purify"]);
        Ok(vec![
            base.clone().accuracy(accuracy_on(&models.clf, &adv, y)?, y.len()),
            base.defended(models.t_star())
                .accuracy(models.defended_accuracy(&adv, y, models.t_star(), seed)?, y.len()),
        ])
    })?;
    Ok(per_cell.into_iter().flatten().collect())
}

/// Defended clean and adversarial accuracy along the t* grid; with `joint`,
/// also the full (epsilon, t*) grid.
pub fn run_tstar_sweep(ctx: &Context, models: &Models) -> Result<Vec<ResultRow>> {
    let test = ctx.test_subset(ctx.cfg.sweeps.per_class)?;
    let (x, y) = (test.samples(), test.labels());
    let sw = &ctx.cfg.sweeps;
    let norm = ctx.cfg.primary_sweep_norm();
    let nominal = ctx
        .cfg
        .attacks
        .iter()
        .find(|a| a.norm == norm)
        .map_or(8.0, |a| a.epsilon_255);
    let mut budgets = vec![nominal];
    if sw.joint {
        budgets.extend(sw.epsilon_255.iter().copied().filter(|&e| e != nominal));
    }
    let advs = ctx.run_cells(&budgets, |&nom| {
        let spec = AttackSpec::new(norm, ctx.cfg.budget(norm, nom), sw.steps);
        let [name, eps_id] = attack_ids(norm, nom);
        let adv = attack_or_clean(&models.clf, x, y, &spec, ctx.seed_for(&["sweep-tstar", &name, &eps_id, "attack"]))?;
        Ok((name, eps_id, spec.epsilon, adv))
    })?;
    let mut cells: Vec<(Option<usize>, usize)> = sw.t_star.iter().map(|&t| (None, t)).collect();
    for k in 0..advs.len() {
        cells.extend(sw.t_star.iter().map(|&t| (Some(k), t)));
    }
    ctx.run_cells(&cells, |&(k, t)| {
        let (name, eps_id, eps, input) = match k {
            None => ("clean", "0", 0.0, x),
            Some(k) => {
                let (n, e, eps, adv) = &advs[k];
                (n.as_str(), e.as_str(), *eps, adv)
            }
        };
        let seed = ctx.seed_for(&["sweep-tstar", name, eps_id, &t.to_string()]);
        let acc = models.defended_accuracy(input, y, t, seed)?;
        Ok(ResultRow::new("sweep-tstar", ctx.cfg.dataset_name(), models.name(), "accuracy")
            .attack(name, eps)
            .defended(t)
            .accuracy(acc, y.len()))
    })
}

/// PGD with exact end-to-end gradients through the purifier,
/// evaluated with defender randomness the attacker never saw.
pub fn run_adaptive_eval(ctx: &Context, models: &Models) -> Result<Vec<ResultRow>> {
    let a = &ctx.cfg.adaptive;
    let test = ctx.test_subset(Some(a.per_class))?;
    let (x, y) = (test.samples(), test.labels());
    let eps = ctx.cfg.budget(a.norm, a.epsilon_255);
    let spec = AttackSpec::new(a.norm, eps, a.steps);
    let pgd_name = attack_name(a.norm);
    let adaptive_name = format!("adaptive_{pgd_name}");
    let eps_id = format!("{}", a.epsilon_255);
    let mut guidance = models.guidance;
    guidance.differentiable_mode = true;
    let attacked = PurifiedClassifier::new(&models.diff, &models.clf, guidance, ctx.seed_for(&["eval-adaptive", "attack-defender"]));
    let fresh = PurifiedClassifier::new(&models.diff, &models.clf, guidance, ctx.seed_for(&["eval-adaptive", "eval-defender"]));
    let cells = ["clean", "pgd", "adaptive"];
    let t = models.t_star();
    let base = |name: &str, e: f64| ResultRow::new("eval-adaptive", ctx.cfg.dataset_name(), models.name(), "accuracy").attack(name, e);
    let rows = ctx.run_cells(&cells, |&cell| {
        Ok(match cell {
            "clean" => vec![
                base("clean", 0.0).accuracy(accuracy_on(&models.clf, x, y)?, y.len()),
                base("clean", 0.0).defended(t).accuracy(accuracy_on(&fresh, x, y)?, y.len()),
            ],
            "pgd" => {
                let adv = pgd(&models.clf, x, y, &spec, ctx.seed_for(&["eval-adaptive", &pgd_name, &eps_id]))?;
                vec![base(&pgd_name, eps).accuracy(1.0 - adv.success_rate(), y.len())]
            }
            _ => {
                let adv = adaptive_pgd(&attacked, x, y, &spec, ctx.seed_for(&["eval-adaptive", &adaptive_name, &eps_id]))?;
                vec![base(&adaptive_name, eps)
                    .adaptive()
                    .defended(t)
                    .accuracy(accuracy_on(&fresh, &adv.adversarial, y)?, y.len())]
            }
        })
    })?;
    Ok(rows.into_iter().flatten().collect())
}

/// Corruption accuracy: 5 families x 5 severities x {off, on} = 50 rows.
pub fn run_ood_eval(ctx: &Context, models: &Models) -> Result<Vec<ResultRow>> {
    if !ctx.cfg.is_images() {
        return Err(config_err("eval-ood requires image data"));
    }
    let test = ctx.test_subset(ctx.cfg.ood.per_class)?;
    let y = test.labels();
    let cells: Vec<(CorruptionFamily, u8)> = CorruptionFamily::ALL
        .iter()
        .flat_map(|&f| SEVERITIES.iter().map(move |&s| (f, s)))
        .collect();
    let per_cell = ctx.run_cells(&cells, |&(family, severity)| {
        let sev = severity.to_string();
        let corrupted = corrupt(&test, CorruptionSpec::new(family, severity)?, ctx.seed_for(&["eval-ood", family.name(), &sev]))?;
        let xc = corrupted.samples();
        let base = ResultRow::new("eval-ood", ctx.cfg.dataset_name(), models.name(), "accuracy").corruption(family.name(), severity);
        let seed = ctx.seed_for(&["eval-ood", family.name(), &sev, "purify"]);
        Ok(vec![
            base.clone().accuracy(accuracy_on(&models.clf, xc, y)?, y.len()),
            base.defended(models.t_star())
                .accuracy(models.defended_accuracy(xc, y, models.t_star(), seed)?, y.len()),
        ])
    })?;
    Ok(per_cell.into_iter().flatten().collect())
}

pub struct QualityOutput {
    pub rows: Vec<ResultRow>,
    /// clean, adversarial, purified, amplified adversarial perturbation,
    /// amplified residual perturbation.
    pub grid: Vec<Vec<ArrayD<f64>>>,
}

/// SSIM/PSNR of purified images and a five-row image grid.
pub fn run_quality_eval(ctx: &Context, models: &Models) -> Result<QualityOutput> {
    if !ctx.cfg.is_images() {
        return Err(config_err("eval-quality requires image data"));
    }
    let test = ctx.test_subset(ctx.cfg.quality.per_class)?;
    let (x, y) = (test.samples(), test.labels());
    let a = ctx
        .cfg
        .attacks
        .iter()
        .find(|a| a.norm == Norm::Linf)
        .unwrap_or(&ctx.cfg.attacks[0]);
    let spec = ctx.cfg.attack_spec(a);
    let [name, eps_id] = attack_ids(a.norm, a.epsilon_255);
    let adv = attack_or_clean(&models.clf, x, y, &spec, ctx.seed_for(&["eval-quality", &name, &eps_id, "attack"]))?;
    let t = models.t_star();
    let pur_clean = models.purify_at(x, t, ctx.seed_for(&["eval-quality", "clean", "purify"]))?;
    let pur_adv = models.purify_at(&adv, t, ctx.seed_for(&["eval-quality", &name, &eps_id, "purify"]))?;
    let k = ctx.cfg.quality.amplification;
    let amp = |d: ArrayD<f64>| d.mapv(|v| (0.5 + k * v).clamp(0.0, 1.0));
    let adv_panel = amp(&adv - x);
    let res_panel = amp(&pur_adv - x);
    let panel_mad = (&adv_panel - &res_panel).mapv(f64::abs).mean().unwrap_or(0.0);
    let n = y.len();
    let row = |metric: &str, attack: &str, e: f64| {
        ResultRow::new("eval-quality", ctx.cfg.dataset_name(), models.name(), metric)
            .attack(attack, e)
            .defended(t)
    };
    let report = |v: Vec<f64>| MeanSe::of(&v);
    let mut rows = Vec::new();
    for (metric, attack, e, values) in [
        ("ssim_vs_clean", "clean", 0.0, ssim_batch(&pur_clean, x)?),
        ("psnr_vs_clean", "clean", 0.0, psnr_batch(&pur_clean, x)?),
        ("ssim_vs_clean", name.as_str(), spec.epsilon, ssim_batch(&pur_adv, x)?),
        ("psnr_vs_clean", name.as_str(), spec.epsilon, psnr_batch(&pur_adv, x)?),
        ("ssim_vs_adversarial", name.as_str(), spec.epsilon, ssim_batch(&pur_adv, &adv)?),
        ("psnr_vs_adversarial", name.as_str(), spec.epsilon, psnr_batch(&pur_adv, &adv)?),
    ] {
        let m = report(values);
        rows.push(row(metric, attack, e).measured(m.mean, m.std_error, n));
    }
    rows.push(row("perturbation_panel_mad", &name, spec.epsilon).measured(panel_mad, 0.0, n));
    let cols = ctx.cfg.quality.columns.min(n);
    let take = |a: &ArrayD<f64>| (0..cols).map(|i| a.index_axis(Axis(0), i).to_owned()).collect::<Vec<_>>();
    let grid = vec![take(x), take(&adv), take(&pur_adv), take(&adv_panel), take(&res_panel)];
    Ok(QualityOutput { rows, grid })
}

/// Which model the certification smooths.
pub fn certification_model<'a>(ctx: &Context, models: &'a Models, purified: bool) -> Box<dyn Predictor + 'a> {
    if purified {
        Box::new(PurifiedClassifier::new(
            &models.diff,
            &models.clf,
            models.guidance,
            ctx.seed_for(&["certify", "defender"]),
        ))
    } else {
        Box::new(models.clf.clone())
    }
}

/// Certificates for the first `points` test samples plus summary rows:
/// certified accuracy at radius 0 and mean radii over non-abstaining points.
pub fn run_certify(ctx: &Context, models: &Models, purified: bool) -> Result<(Vec<CertificateRecord>, Vec<ResultRow>)> {
    let c = &ctx.cfg.certification;
    let test = ctx.test_data()?;
    let points = c.points.min(test.len());
    let extended = ctx.cfg.extended_params(models.diff.schedule(), if purified { models.t_star() } else { 0 })?;
    let cfg = CertifyConfig {
        sigma: c.sigma,
        n0: c.n0,
        n: c.n,
        alpha: c.alpha,
        extended,
    };
    let model = certification_model(ctx, models, purified);
    let idx: Vec<usize> = (0..points).collect();
    let records = ctx.run_cells(&idx, |&i| {
        let xi = test.samples().index_axis(Axis(0), i).to_owned();
        Ok(certify(model.as_ref(), &xi, &cfg, ctx.seed_for(&["certify", &i.to_string()]))?)
    })?;
    let y = test.labels();
    let correct: Vec<f64> = records
        .iter()
        .zip(y)
        .map(|(r, &label)| f64::from(u8::from(r.class == Some(label))))
        .collect();
    let certified: Vec<&CertificateRecord> = records.iter().filter(|r| r.class.is_some()).collect();
    let radii = |f: fn(&CertificateRecord) -> f64| -> Vec<f64> { certified.iter().map(|r| f(r)).collect() };
    let t = if purified { models.t_star() } else { 0 };
    let base = |metric: &str| {
        let r = ResultRow::new("certify", ctx.cfg.dataset_name(), models.name(), metric).attack("smoothing", c.sigma);
        if purified {
            r.defended(t)
        } else {
            r
        }
    };
    let acc = MeanSe::of(&correct);
    let cohen = MeanSe::of(&radii(|r| r.radius_cohen));
    let ext = MeanSe::of(&radii(|r| r.radius_extended));
    let rows = vec![
        base("certified_accuracy").accuracy(acc.mean, points),
        base("mean_radius_cohen").measured(cohen.mean, cohen.std_error, certified.len()),
        base("mean_radius_extended").measured(ext.mean, ext.std_error, certified.len()),
    ];
    Ok((records, rows))
}

/// Mean of `value` over rows matching `pred`; `None` when nothing matches.
pub fn mean_value(rows: &[ResultRow], pred: impl Fn(&ResultRow) -> bool) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| pred(r)).map(|r| r.value).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
