//! Command-line front end. Every subcommand writes under
//! `<out>/<subcommand>/` and finishes with a `manifest.json`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use distransfer_core::io::{save_dataset, write_json};
use distransfer_core::metrics::accuracy;
use distransfer_core::purifier::purify;
use log::info;
use serde::Serialize;

use crate::artifacts::{self, line_plot_svg, write_image_grid, write_text, RunDir};
use crate::checks::{self, Outcome};
use crate::config::ExperimentConfig;
use crate::error::{config_err, io_err, HarnessError, Result, EXIT_OK};
use crate::experiments::{self as exp, Context};
use crate::report::{self, table_series};
use crate::rows::{read_jsonl, sort_rows, write_csv, write_jsonl, ResultRow};

#[derive(Debug, Parser)]
#[command(name = "distransfer", version, about = "Diffusion-based adversarial purification experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for independent cells; overrides `workers`.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Exit with status 4 when a directional threshold is not met.
    #[arg(long)]
    pub check: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train and test datasets.
    GenData(Common),
    /// Train the classifier.
    TrainClf(Common),
    /// Train the diffusion model.
    TrainDiff(Common),
    /// Run the configured PGD attacks against the classifier.
    Attack(Common),
    /// Purify the test set and record per-step traces.
    Purify(Common),
    /// Randomized-smoothing certificates for test points.
    Certify(Common),
    /// Clean and attacked accuracy with and without purification.
    EvalDefense(Common),
    /// Accuracy against the perturbation budget.
    SweepEps(Common),
    /// Purified accuracy against the diffusion depth.
    SweepTstar(Common),
    /// Exact-gradient adaptive attack through the purifier.
    EvalAdaptive(Common),
    /// Accuracy on corrupted inputs.
    EvalOod(Common),
    /// Image-quality metrics and image grids.
    EvalQuality(Common),
    /// Tables and plots from earlier result rows.
    Report(Common),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::TrainClf(_) => "train-clf",
            Command::TrainDiff(_) => "train-diff",
            Command::Attack(_) => "attack",
            Command::Purify(_) => "purify",
            Command::Certify(_) => "certify",
            Command::EvalDefense(_) => "eval-defense",
            Command::SweepEps(_) => "sweep-eps",
            Command::SweepTstar(_) => "sweep-tstar",
            Command::EvalAdaptive(_) => "eval-adaptive",
            Command::EvalOod(_) => "eval-ood",
            Command::EvalQuality(_) => "eval-quality",
            Command::Report(_) => "report",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData(c)
            | Command::TrainClf(c)
            | Command::TrainDiff(c)
            | Command::Attack(c)
            | Command::Purify(c)
            | Command::Certify(c)
            | Command::EvalDefense(c)
            | Command::SweepEps(c)
            | Command::SweepTstar(c)
            | Command::EvalAdaptive(c)
            | Command::EvalOod(c)
            | Command::EvalQuality(c)
            | Command::Report(c) => c,
        }
    }
}

/// Parses `args` (program name first) and runs; returns the exit status.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { crate::error::EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Seed, output directory and worker count after command-line overrides.
pub fn resolve(common: &Common) -> Result<(ExperimentConfig, u64, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(s) = common.seed {
        cfg.seed = Some(s);
    }
    let seed = cfg
        .seed
        .ok_or_else(|| config_err("no seed: set `seed` in the config or pass --seed"))?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| config_err("no output directory: set `out_dir` or pass --out"))?;
    Ok((cfg, seed, out))
}

pub fn run(cmd: &Command) -> Result<()> {
    let common = cmd.common();
    let (cfg, seed, out) = resolve(common)?;
    let ctx = Context::new(cfg, seed)?;
    let mut run = RunDir::create(&out, cmd.name())?;
    info!("{} -> {}", cmd.name(), run.dir.display());
    let outcomes = match cmd {
        Command::GenData(_) => gen_data(&ctx, &mut run)?,
        Command::TrainClf(_) => train_clf(&ctx, &mut run)?,
        Command::TrainDiff(_) => train_diff(&ctx, &mut run)?,
        Command::Attack(_) => attack(&ctx, &mut run)?,
        Command::Purify(_) => purify_cmd(&ctx, &mut run)?,
        Command::Certify(_) => certify_cmd(&ctx, &mut run)?,
        Command::EvalDefense(_) => {
            let (rows, _) = with_models(&ctx, &mut run, exp::run_defense_eval)?;
            emit_rows(&mut run, rows.clone())?;
            checks::defense(&rows, &ctx.cfg.check)
        }
        Command::SweepEps(_) => {
            let (rows, _) = with_models(&ctx, &mut run, exp::run_epsilon_sweep)?;
            emit_rows(&mut run, rows.clone())?;
            for t in report::epsilon_tables(&rows) {
                emit_table(&mut run, &t)?;
                emit_plot(&mut run, &t, &epsilon_plot_name(&t), "epsilon")?;
            }
            checks::epsilon_sweep(&rows, &ctx.cfg.check, ctx.cfg.primary_sweep_norm())
        }
        Command::SweepTstar(_) => {
            let (rows, _) = with_models(&ctx, &mut run, exp::run_tstar_sweep)?;
            emit_rows(&mut run, rows.clone())?;
            emit_table_plot(&mut run, report::tstar_table(&rows), "accuracy_vs_tstar.svg", "t*")?;
            checks::tstar_sweep(&rows)
        }
        Command::EvalAdaptive(_) => {
            let (rows, _) = with_models(&ctx, &mut run, exp::run_adaptive_eval)?;
            emit_rows(&mut run, rows.clone())?;
            checks::adaptive(&rows, &ctx.cfg.check)
        }
        Command::EvalOod(_) => {
            let (rows, _) = with_models(&ctx, &mut run, exp::run_ood_eval)?;
            emit_rows(&mut run, rows.clone())?;
            checks::ood(&rows, &ctx.cfg.check)
        }
        Command::EvalQuality(_) => {
            let (q, _) = with_models(&ctx, &mut run, exp::run_quality_eval)?;
            write_image_grid(&run.path("grid.png"), &q.grid)?;
            run.record("grid.png", artifacts::PNG);
            emit_rows(&mut run, q.rows.clone())?;
            checks::quality(&q.rows, &ctx.cfg.check)
        }
        Command::Report(_) => report_cmd(&ctx, &out, &mut run)?,
    };
    run.finish(&ctx.cfg, seed)?;
    for o in &outcomes {
        info!("check {}: {} ({})", o.name, if o.passed { "pass" } else { "FAIL" }, o.detail);
    }
    if common.check {
        let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.passed).collect();
        if !failed.is_empty() {
            let names: Vec<String> = failed.iter().map(|o| format!("{} ({})", o.name, o.detail)).collect();
            return Err(HarnessError::Check(names.join("; ")));
        }
    }
    Ok(())
}

fn with_models<T>(
    ctx: &Context,
    run: &mut RunDir,
    f: impl FnOnce(&Context, &exp::Models) -> Result<T>,
) -> Result<(T, exp::Models)> {
    let models = ctx.load_models()?;
    run.input(ctx.classifier_path()?)?;
    run.input(ctx.diffusion_path()?)?;
    let out = f(ctx, &models)?;
    Ok((out, models))
}

fn emit_rows(run: &mut RunDir, mut rows: Vec<ResultRow>) -> Result<()> {
    sort_rows(&mut rows);
    write_jsonl(&run.path("rows.jsonl"), &rows)?;
    run.record("rows.jsonl", artifacts::JSONL);
    write_csv(&run.path("rows.csv"), &rows)?;
    run.record("rows.csv", artifacts::CSV);
    Ok(())
}

fn emit_table(run: &mut RunDir, table: &report::Table) -> Result<()> {
    let csv = format!("{}.csv", table.name);
    let txt = format!("{}.txt", table.name);
    write_text(&run.path(&csv), &table.to_csv())?;
    write_text(&run.path(&txt), &table.to_text())?;
    run.record(&csv, artifacts::CSV);
    run.record(&txt, artifacts::TEXT);
    Ok(())
}

fn emit_table_plot(run: &mut RunDir, table: Option<report::Table>, file: &str, x_label: &str) -> Result<()> {
    let Some(table) = table else {
        return Ok(());
    };
    emit_table(run, &table)?;
    emit_plot(run, &table, file, x_label)
}

fn epsilon_plot_name(table: &report::Table) -> String {
    format!("accuracy_vs_epsilon_{}.svg", table.name.trim_start_matches("sweep_eps_"))
}

fn emit_plot(run: &mut RunDir, table: &report::Table, file: &str, x_label: &str) -> Result<()> {
    let svg = line_plot_svg(&table.title, x_label, "accuracy", &table_series(table));
    write_text(&run.path(file), &svg)?;
    run.record(file, artifacts::SVG);
    Ok(())
}

fn emit_json<T: Serialize>(run: &mut RunDir, name: &str, value: &T) -> Result<()> {
    write_json(&run.path(name), value)?;
    run.record(name, artifacts::JSON);
    Ok(())
}

fn emit_jsonl<T: Serialize>(run: &mut RunDir, name: &str, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it).expect("records serialise");
        buf.push(b'\n');
    }
    let p = run.path(name);
    fs::write(&p, buf).map_err(io_err(&p))?;
    run.record(name, artifacts::JSONL);
    Ok(())
}

fn emit_dataset(run: &mut RunDir, ds: &distransfer_core::datasets::LabeledDataset, stem: &str) -> Result<()> {
    save_dataset(ds, &run.dir, stem)?;
    run.record(&format!("{stem}.json"), artifacts::JSON);
    run.record(&format!("{stem}.bin"), artifacts::BIN);
    Ok(())
}

fn emit_checkpoint(run: &mut RunDir, stem: &str) {
    run.record(&format!("{stem}.json"), artifacts::JSON);
    run.record(&format!("{stem}.bin"), artifacts::BIN);
}

fn gen_data(ctx: &Context, run: &mut RunDir) -> Result<Vec<Outcome>> {
    let (train, test) = exp::generate_data(ctx)?;
    emit_dataset(run, &train, "train")?;
    emit_dataset(run, &test, "test")?;
    Ok(Vec::new())
}

fn train_clf(ctx: &Context, run: &mut RunDir) -> Result<Vec<Outcome>> {
    let (model, report) = exp::run_train_classifier(ctx)?;
    model.save(&run.path("classifier.json"))?;
    emit_checkpoint(run, "classifier");
    emit_json(run, "train_report.json", &report)?;
    let test = ctx.test_data()?;
    let row = ResultRow::new("train-clf", ctx.cfg.dataset_name(), model.architecture().name(), "accuracy")
        .accuracy(accuracy(&model, &test)?, test.len());
    emit_rows(run, vec![row])?;
    Ok(Vec::new())
}

fn train_diff(ctx: &Context, run: &mut RunDir) -> Result<Vec<Outcome>> {
    let (model, report) = exp::run_train_diffusion(ctx)?;
    model.save(&run.path("diffusion.json"))?;
    emit_checkpoint(run, "diffusion");
    emit_json(run, "train_report.json", &report)?;
    let last = report.epoch_losses.last().copied().unwrap_or(0.0);
    let row = ResultRow::new("train-diff", ctx.cfg.dataset_name(), model.architecture().name(), "final_loss").measured(
        last,
        0.0,
        ctx.train_data()?.len(),
    );
    emit_rows(run, vec![row])?;
    Ok(Vec::new())
}

fn attack(ctx: &Context, run: &mut RunDir) -> Result<Vec<Outcome>> {
    run.input(ctx.classifier_path()?)?;
    let (test, outputs, rows) = exp::run_attacks(ctx)?;
    for o in &outputs {
        let stem = format!("adv_{}_{}", o.name, o.nominal_255);
        emit_dataset(run, &test.with_samples(o.result.adversarial.clone())?, &stem)?;
        emit_jsonl(run, &format!("{stem}_records.jsonl"), &o.result.records(test.labels(), 0))?;
    }
    emit_rows(run, rows)?;
    Ok(Vec::new())
}

fn purify_cmd(ctx: &Context, run: &mut RunDir) -> Result<Vec<Outcome>> {
    let (_, models) = with_models(ctx, run, |_, _| Ok(()))?;
    let test = ctx.test_data()?;
    if let Some(p) = &ctx.cfg.paths.test_data {
        run.input(p)?;
    }
    let (x, y) = (test.samples(), test.labels());
    let (purified, trace) = purify(&models.diff, &models.clf, x, &models.guidance, ctx.seed_for(&["purify"]))?;
    emit_dataset(run, &test.with_samples(purified.clone())?, "purified")?;
    emit_jsonl(run, "trace.jsonl", &trace.lines(0))?;
    let base = ResultRow::new("purify", ctx.cfg.dataset_name(), models.name(), "accuracy");
    let before = distransfer_core::metrics::accuracy_on(&models.clf, x, y)?;
    let after = distransfer_core::metrics::accuracy_on(&models.clf, &purified, y)?;
    emit_rows(
        run,
        vec![
            base.clone().accuracy(before, y.len()),
            base.defended(models.t_star()).accuracy(after, y.len()),
        ],
    )?;
    Ok(Vec::new())
}

fn certify_cmd(ctx: &Context, run: &mut RunDir) -> Result<Vec<Outcome>> {
    let (_, models) = with_models(ctx, run, |_, _| Ok(()))?;
    let (records, rows) = exp::run_certify(ctx, &models, ctx.cfg.certification.purified)?;
    emit_jsonl(run, "certificates.jsonl", &records)?;
    emit_rows(run, rows)?;
    Ok(Vec::new())
}

/// Every `*/rows.jsonl` directly under `out`, in path order, excluding the
/// report's own directory.
fn discover_rows(out: &Path, own: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let entries = fs::read_dir(out).map_err(io_err(out))?;
    for e in entries {
        let dir = e.map_err(io_err(out))?.path();
        let candidate = dir.join("rows.jsonl");
        if dir != own && candidate.is_file() {
            found.push(candidate);
        }
    }
    found.sort();
    Ok(found)
}

fn report_cmd(ctx: &Context, out: &Path, run: &mut RunDir) -> Result<Vec<Outcome>> {
    let files = if ctx.cfg.paths.rows.is_empty() {
        discover_rows(out, &run.dir)?
    } else {
        ctx.cfg.paths.rows.clone()
    };
    let mut rows = Vec::new();
    for f in &files {
        rows.extend(read_jsonl(f)?);
    }
    sort_rows(&mut rows);
    write_csv(&run.path("results.csv"), &rows)?;
    run.record("results.csv", artifacts::CSV);
    for t in report::all_tables(&rows) {
        emit_table(run, &t)?;
        match t.name.as_str() {
            name if name.starts_with("sweep_eps") => emit_plot(run, &t, &epsilon_plot_name(&t), "epsilon")?,
            "sweep_tstar" => emit_plot(run, &t, "accuracy_vs_tstar.svg", "t*")?,
            _ => {}
        }
    }
    Ok(Vec::new())
}
