use std::fs;
use std::path::Path;

use cq_core::geometry::write_index_csv;
use cq_core::gradsuite::{self, TOLERANCE};
use cq_core::imaging::dataset::{generate_set, read_dataset, write_dataset};
use cq_core::metrics::MetricsReport;
use cq_core::numfmt::sig6;
use cq_core::train::{
    cross_validate, curves_csv, evaluate, log_csv, prepare_samples, quantify_subject, train, IdentitySegmenter, LogRow,
    Model, Segmenter, Strategy,
};
use cq_tensor::gradcheck::GradCheck;

use crate::config::{RunConfig, SNAPSHOT};
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::new("E_IO", format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Creates the output directory, refusing a non-empty one unless forced,
/// and writes the resolved configuration into it.
pub fn prepare_out(cfg: &RunConfig, force: bool) -> Result<&Path> {
    let out = cfg.out_dir()?;
    if let Ok(mut entries) = fs::read_dir(out) {
        if entries.next().is_some() && !force {
            return Err(CliError::new(
                "E_OUTPUT",
                format!("output directory {} is not empty (pass --force to overwrite)", out.display()),
            ));
        }
    } else if out.exists() {
        return Err(CliError::new("E_OUTPUT", format!("{} exists and is not a directory", out.display())));
    }
    mkdir(out)?;
    write(&out.join(SNAPSHOT), cfg.to_toml())?;
    Ok(out)
}

pub fn phantom(cfg: &RunConfig, force: bool) -> Result<()> {
    let set = generate_set(&cfg.phantom, cfg.seed)?;
    let out = prepare_out(cfg, force)?;
    write_dataset(out, &set)?;
    println!("wrote {} phantom subjects to {}", set.len(), out.display());
    Ok(())
}

fn write_logs(dir: &Path, strategy: Strategy, primary: &[LogRow], secondary: &[LogRow]) -> Result<()> {
    match strategy {
        Strategy::Multistage => {
            write(&dir.join("log_segmentation.csv"), log_csv(primary))?;
            write(&dir.join("log_multitask.csv"), log_csv(secondary))
        }
        Strategy::End2end => write(&dir.join("log_joint.csv"), log_csv(primary)),
    }
}

fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    model.save(&mut buf)?;
    write(path, buf)
}

fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Model::load(bytes.as_slice()).map_err(|e| CliError::new(e.code(), format!("{}: {e}", path.display())))
}

pub fn train_cmd(cfg: &RunConfig, force: bool) -> Result<()> {
    let subjects = read_dataset(cfg.dataset_dir()?)?;
    cfg.train.validate()?;
    let out = prepare_out(cfg, force)?;
    let samples = prepare_samples(&subjects, &cfg.train, cfg.seed)?;
    let outcome = train(&samples, &cfg.train, cfg.seed)?;
    save_model(&outcome.model, &out.join("model.cqt"))?;
    write_logs(out, cfg.train.strategy, &outcome.log_primary, &outcome.log_secondary)?;
    let last = outcome.log_secondary.last().or(outcome.log_primary.last());
    println!(
        "trained {} samples ({:?}); final total loss {}; checkpoint {}",
        samples.len(),
        cfg.train.strategy,
        last.map_or("n/a".into(), |r| sig6(r.total_loss)),
        out.join("model.cqt").display()
    );
    Ok(())
}

fn write_report(dir: &Path, report: &MetricsReport, curves: &str) -> Result<()> {
    write(&dir.join("metrics.csv"), report.to_csv())?;
    write(&dir.join("summary.txt"), report.summary())?;
    write(&dir.join("curves.csv"), curves)
}

pub fn eval(cfg: &RunConfig, force: bool) -> Result<()> {
    let subjects = read_dataset(cfg.dataset_dir()?)?;
    cfg.train.validate()?;
    let out = prepare_out(cfg, force)?;
    let cv = cross_validate(&subjects, &cfg.train, cfg.eval.folds, cfg.seed)?;
    let mut folds_csv = String::from("fold,subject\n");
    let mut pooled = Vec::new();
    for f in &cv.folds {
        let dir = out.join(format!("fold_{}", f.fold));
        mkdir(&dir)?;
        save_model(&f.model, &dir.join("model.cqt"))?;
        write_logs(&dir, cfg.train.strategy, &f.log_primary, &f.log_secondary)?;
        write_report(&dir, &f.report, &curves_csv(&f.evals))?;
        for id in &f.test_ids {
            folds_csv.push_str(&format!("{},{id}\n", f.fold));
        }
        pooled.extend(f.evals.iter().cloned());
    }
    write(&out.join("folds.csv"), folds_csv)?;
    write_report(out, &cv.aggregate, &curves_csv(&pooled))?;
    print!("{}", cv.aggregate.summary());
    Ok(())
}

pub fn quantify(cfg: &RunConfig, force: bool) -> Result<()> {
    let subjects = read_dataset(cfg.dataset_dir()?)?;
    let model = if cfg.quantify.identity { None } else { Some(load_model(cfg.checkpoint_path()?)?) };
    let seg: &dyn Segmenter = match &model {
        Some(m) => m,
        None => &IdentitySegmenter,
    };
    let out = prepare_out(cfg, force)?;
    for s in &subjects {
        let rows = quantify_subject(seg, s, cfg.quantify.connectivity)
            .map_err(|e| CliError::new(e.code(), format!("subject {}: {e}", s.id)))?;
        let dir = out.join(&s.id);
        mkdir(&dir)?;
        let mut buf = Vec::new();
        write_index_csv(&mut buf, &rows)?;
        write(&dir.join("indices.csv"), buf)?;
    }
    println!("quantified {} subjects into {}", subjects.len(), out.display());
    Ok(())
}

pub fn report(cfg: &RunConfig, force: bool) -> Result<()> {
    let subjects = read_dataset(cfg.dataset_dir()?)?;
    let model = load_model(cfg.checkpoint_path()?)?;
    let out = prepare_out(cfg, force)?;
    let evals = evaluate(&model, &subjects)?;
    let report = MetricsReport::compute(&evals)?;
    write_report(out, &report, &curves_csv(&evals))?;
    print!("{}", report.summary());
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, force: bool) -> Result<()> {
    let checker = GradCheck { eps: cfg.gradcheck.eps, max_coords: cfg.gradcheck.max_coords };
    let rows = gradsuite::run(&checker)?;
    let mut table = String::from("check,max_relative_error,coordinates,status\n");
    for r in &rows {
        let status = if r.passed() { "pass" } else { "FAIL" };
        table.push_str(&format!("{},{},{},{status}\n", r.name, sig6(r.max_relative_error), r.coordinates));
    }
    if cfg.out.is_some() {
        let out = prepare_out(cfg, force)?;
        write(&out.join("gradcheck.csv"), &table)?;
    }
    println!("{:<24} {:>14} {:>6}  status", "check", "max rel err", "coords");
    for r in &rows {
        let status = if r.passed() { "pass" } else { "FAIL" };
        println!("{:<24} {:>14} {:>6}  {status}", r.name, sig6(r.max_relative_error), r.coordinates);
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if !failed.is_empty() {
        return Err(CliError::new(
            "E_GRADCHECK",
            format!("{} checks above tolerance {}: {}", failed.len(), sig6(TOLERANCE), failed.join(", ")),
        ));
    }
    Ok(())
}
