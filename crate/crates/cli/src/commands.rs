use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};

use seglab::attacks::{AttackKind, Schedule};
use seglab::campaign::run_transfer;
use seglab::data::{gen_dataset, read_dataset, write_dataset, Dataset, SegSample};
use seglab::gradcheck::{run_gradcheck, CheckedOp, GradcheckOptions};
use seglab::metrics::AttackTrace;
use seglab::training::{train, write_loss_csv};
use seglab::{
    build_model, load_checkpoint, save_checkpoint, ModelCheckpoint, SegModel, Segmenter,
    TrainingMeta,
};

use crate::config::{AttackSection, EvaluationSection, ExperimentConfig, Split};
use crate::error::{CliError, CliResult};
use crate::results::{ResultRow, ResultsFile};
use crate::svg::{LinePlot, Series};
use crate::{Command, OutArgs};

pub const GIT_DESCRIBE: &str = env!("SEGLAB_GIT_DESCRIBE");

pub fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::Train { config, data, out } => train_cmd(&config, &data, &out),
        Command::Attack {
            config,
            data,
            checkpoint,
            out,
            emit_svg,
        } => attack_cmd(&config, &data, &checkpoint, &out, emit_svg),
        Command::Transfer {
            source_checkpoint,
            target_checkpoint,
            attack,
            data,
            out,
            config,
        } => transfer_cmd(
            &source_checkpoint,
            &target_checkpoint,
            &attack,
            &data,
            &out,
            config.as_deref(),
        ),
        Command::Gradcheck {
            scope,
            cases,
            seed,
            corrupt,
        } => gradcheck_cmd(&scope, cases, seed, corrupt.as_deref()),
        Command::Summarize { results, out } => summarize_cmd(&results, out.as_deref()),
    }
}

/// Creates `out`, refusing to reuse a non-empty directory unless forced.
pub fn prepare_out(out: &OutArgs) -> CliResult<()> {
    let dir = &out.out;
    if dir.exists() {
        let non_empty = dir.is_file() || std::fs::read_dir(dir)?.next().is_some();
        if non_empty {
            if !out.force {
                return Err(CliError::Config(format!(
                    "output directory {} is not empty; pass --force to replace it",
                    dir.display()
                )));
            }
            if dir.is_file() {
                std::fs::remove_file(dir)?;
            } else {
                std::fs::remove_dir_all(dir)?;
            }
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_run_json(dir: &Path, command: &str, config: Value, inputs: Value, started: Instant) -> CliResult<()> {
    let run = json!({
        "command": command,
        "seglab_version": env!("CARGO_PKG_VERSION"),
        "git_describe": GIT_DESCRIBE,
        "jobs": rayon::current_num_threads(),
        "inputs": inputs,
        "config": config,
        "wall_time_seconds": started.elapsed().as_secs_f64(),
    });
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&run)? + "\n")?;
    Ok(())
}

fn path_value(p: &Path) -> Value {
    Value::from(p.display().to_string())
}

fn load_data(dir: &Path) -> CliResult<Dataset> {
    read_dataset(dir).map_err(|e| match e {
        seglab::Error::Io(io) => CliError::Runtime(format!("cannot read dataset {}: {io}", dir.display())),
        other => other.into(),
    })
}

fn load_model(path: &Path) -> CliResult<ModelCheckpoint> {
    load_checkpoint(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn check_compatible(model: &SegModel<f32>, data: &Dataset, what: &str) -> CliResult<()> {
    if model.in_channels() != data.channels() || model.classes() != data.classes() {
        return Err(CliError::Config(format!(
            "{what} expects C={}, M={} but the dataset has C={}, M={}",
            model.in_channels(),
            model.classes(),
            data.channels(),
            data.classes()
        )));
    }
    Ok(())
}

pub fn eval_samples<'a>(data: &'a Dataset, eval: &EvaluationSection) -> CliResult<&'a [SegSample]> {
    let split = match eval.split {
        Split::Train => data.train(),
        Split::Val => data.val(),
    };
    let n = eval.max_images.map_or(split.len(), |m| m.min(split.len()));
    if n == 0 {
        return Err(CliError::Config("evaluation split is empty".into()));
    }
    Ok(&split[..n])
}

fn gen_data(config: &Path, out: &OutArgs) -> CliResult<()> {
    let started = Instant::now();
    let cfg = ExperimentConfig::load(config)?;
    prepare_out(out)?;
    let samples = gen_dataset(&cfg.dataset)?;
    write_dataset(&out.out, &cfg.dataset, &samples)?;
    write_run_json(&out.out, "gen-data", cfg.to_value(), json!({ "config": path_value(config) }), started)?;
    println!("wrote {} samples to {}", samples.len(), out.out.display());
    Ok(())
}

fn train_cmd(config: &Path, data: &Path, out: &OutArgs) -> CliResult<()> {
    let started = Instant::now();
    let cfg = ExperimentConfig::load(config)?;
    let train_cfg = cfg
        .train
        .clone()
        .ok_or_else(|| CliError::Config(format!("{}: missing `train` section", config.display())))?;
    let ds = load_data(data)?;
    prepare_out(out)?;
    let init = build_model::<f32>(cfg.model.arch, ds.channels(), ds.classes(), cfg.model.seed)?;
    let outcome = train(&init, ds.train(), &train_cfg)?;
    let epochs = u32::try_from(train_cfg.iterations)
        .map_err(|_| CliError::Config("iteration count exceeds u32".into()))?;
    let ckpt = ModelCheckpoint {
        model: outcome.model,
        meta: TrainingMeta {
            epochs,
            seed: train_cfg.seed,
            mode: train_cfg.mode,
        },
    };
    save_checkpoint(&ckpt, out.out.join("model.ckpt"))?;
    write_loss_csv(&outcome.curve, BufWriter::new(File::create(out.out.join("loss.csv"))?))?;
    write_run_json(
        &out.out,
        "train",
        cfg.to_value(),
        json!({ "config": path_value(config), "data": path_value(data) }),
        started,
    )?;
    let last = outcome.curve.last().expect("at least one iteration");
    println!(
        "trained {} ({}) for {} iterations; final losses clean {:.4} second half {:.4}",
        cfg.model.arch, train_cfg.mode, train_cfg.iterations, last.clean_loss, last.adv_loss
    );
    Ok(())
}

struct RowRun {
    label: String,
    row: ResultRow,
    traces: Option<Vec<AttackTrace>>,
}

fn run_rows(
    source: &SegModel<f32>,
    target: &SegModel<f32>,
    samples: &[SegSample],
    sections: &[AttackSection],
    keep_traces: bool,
) -> CliResult<Vec<RowRun>> {
    let mut out = Vec::new();
    for (i, section) in sections.iter().enumerate() {
        for t in section.budgets() {
            let acfg = section.attack_config(t);
            let run = run_transfer(source, target, samples, section.kind, &acfg, keep_traces)?;
            let summary = run.summary(target.classes())?;
            println!(
                "{:<8} T={:<4} {:<16} mIoU clean {:6.2}  adv {:6.2}  MisRatio adv {:6.2}",
                section.kind.name(),
                t,
                section.schedule.name(),
                100.0 * summary.clean_miou,
                100.0 * summary.adv_miou,
                100.0 * summary.adv_mis_ratio
            );
            out.push(RowRun {
                label: format!("{i:02}_{}_t{t}", section.kind.name()),
                row: ResultRow {
                    attack: section.kind,
                    iterations: t,
                    schedule: section.schedule,
                    epsilon: section.epsilon,
                    alpha: section.alpha,
                    summary,
                    images: run.images,
                },
                traces: run.traces,
            });
        }
    }
    Ok(out)
}

fn write_traces(dir: &Path, runs: &[RowRun]) -> CliResult<()> {
    for r in runs {
        let Some(traces) = &r.traces else { continue };
        let sub = dir.join("traces").join(&r.label);
        std::fs::create_dir_all(&sub)?;
        for (img, trace) in r.row.images.iter().zip(traces) {
            let f = File::create(sub.join(format!("img_{:06}.csv", img.index)))?;
            trace.write_csv(BufWriter::new(f))?;
        }
    }
    Ok(())
}

/// Per-iteration mean over images of one trace column.
fn mean_curve(traces: &[AttackTrace], column: impl Fn(&seglab::TraceRow) -> f64) -> Vec<(f64, f64)> {
    let len = traces.iter().map(|t| t.rows.len()).min().unwrap_or(0);
    (0..len)
        .map(|i| {
            let sum: f64 = traces.iter().map(|t| column(&t.rows[i])).sum();
            (i as f64, sum / traces.len() as f64)
        })
        .collect()
}

fn series_label(row: &ResultRow) -> String {
    match row.attack {
        AttackKind::SegPgd if row.schedule != Schedule::Linear => {
            format!("segpgd {}", row.schedule.name())
        }
        kind => kind.name().to_string(),
    }
}

fn write_plots(dir: &Path, runs: &[RowRun]) -> CliResult<()> {
    let plots = dir.join("plots");
    std::fs::create_dir_all(&plots)?;
    for r in runs {
        let Some(traces) = &r.traces else { continue };
        let plot = LinePlot {
            title: format!("{} T={} loss decomposition", series_label(&r.row), r.row.iterations),
            x_label: "iteration".into(),
            y_label: "mean cross-entropy".into(),
            series: vec![
                Series { name: "TLoss".into(), points: mean_curve(traces, |x| x.t_loss) },
                Series { name: "FLoss".into(), points: mean_curve(traces, |x| x.f_loss) },
                Series { name: "total".into(), points: mean_curve(traces, |x| x.total_loss) },
            ],
        };
        std::fs::write(plots.join(format!("decomp_{}.svg", r.label)), plot.render())?;
    }

    let mut budgets: Vec<usize> = runs.iter().map(|r| r.row.iterations).collect();
    budgets.sort_unstable();
    budgets.dedup();
    for t in budgets {
        let series: Vec<Series> = runs
            .iter()
            .filter(|r| r.row.iterations == t)
            .filter_map(|r| {
                r.traces.as_ref().map(|tr| Series {
                    name: series_label(&r.row),
                    points: mean_curve(tr, |x| x.posi_ratio),
                })
            })
            .collect();
        let plot = LinePlot {
            title: format!("PosiRatio, T={t}"),
            x_label: "iteration".into(),
            y_label: "PosiRatio".into(),
            series,
        };
        std::fs::write(plots.join(format!("posi_ratio_t{t}.svg")), plot.render())?;
    }

    let mut series: Vec<Series> = Vec::new();
    for r in runs {
        let name = series_label(&r.row);
        let point = (r.row.iterations as f64, 100.0 * r.row.summary.adv_miou);
        match series.iter_mut().find(|s| s.name == name) {
            Some(s) => s.points.push(point),
            None => series.push(Series { name, points: vec![point] }),
        }
    }
    let plot = LinePlot {
        title: "mIoU under attack".into(),
        x_label: "attack iterations".into(),
        y_label: "mIoU (%)".into(),
        series,
    };
    std::fs::write(plots.join("miou_vs_budget.svg"), plot.render())?;
    Ok(())
}

fn attack_cmd(config: &Path, data: &Path, checkpoint: &Path, out: &OutArgs, emit_svg: bool) -> CliResult<()> {
    let started = Instant::now();
    let cfg = ExperimentConfig::load(config)?;
    if cfg.attacks.is_empty() {
        return Err(CliError::Config(format!("{}: no attacks configured", config.display())));
    }
    let ds = load_data(data)?;
    let ckpt = load_model(checkpoint)?;
    check_compatible(&ckpt.model, &ds, "checkpoint")?;
    let samples = eval_samples(&ds, &cfg.evaluation)?;
    prepare_out(out)?;
    let runs = run_rows(
        &ckpt.model,
        &ckpt.model,
        samples,
        &cfg.attacks,
        cfg.evaluation.traces || emit_svg,
    )?;
    let results = ResultsFile {
        classes: ds.classes(),
        rows: runs.iter().map(|r| r.row.clone()).collect(),
    };
    results.save(&out.out)?;
    if cfg.evaluation.traces {
        write_traces(&out.out, &runs)?;
    }
    if emit_svg {
        write_plots(&out.out, &runs)?;
    }
    write_run_json(
        &out.out,
        "attack",
        cfg.to_value(),
        json!({
            "config": path_value(config),
            "data": path_value(data),
            "checkpoint": path_value(checkpoint),
            "emit_svg": emit_svg,
        }),
        started,
    )
}

/// Parses `kind[:iterations]`.
pub fn parse_attack_spec(spec: &str) -> CliResult<(AttackKind, Option<usize>)> {
    let (kind, iters) = match spec.split_once(':') {
        Some((k, t)) => {
            let t: usize = t
                .parse()
                .map_err(|_| CliError::Config(format!("bad iteration count in attack spec {spec:?}")))?;
            (k, Some(t))
        }
        None => (spec, None),
    };
    let kind: AttackKind = kind.parse()?;
    Ok((kind, iters))
}

fn transfer_cmd(
    source: &Path,
    target: &Path,
    spec: &str,
    data: &Path,
    out: &OutArgs,
    config: Option<&Path>,
) -> CliResult<()> {
    let started = Instant::now();
    let (kind, iters) = parse_attack_spec(spec)?;
    let cfg = config.map(ExperimentConfig::load).transpose()?;
    let base = cfg
        .as_ref()
        .and_then(|c| c.attacks.iter().find(|a| a.kind == kind).cloned());
    let mut section: AttackSection = match base {
        Some(s) => s,
        None => serde_json::from_value(json!({ "kind": kind, "seed": cfg.as_ref().map_or(0, |c| c.seed) }))?,
    };
    if let Some(t) = iters {
        section.iterations = vec![t];
    }
    if section.budgets().len() != 1 {
        return Err(CliError::Config(format!(
            "attack spec {spec:?} needs an iteration count, e.g. {}:20",
            kind.name()
        )));
    }
    let evaluation = cfg.as_ref().map(|c| c.evaluation.clone()).unwrap_or_default();

    let ds = load_data(data)?;
    let src = load_model(source)?;
    let tgt = load_model(target)?;
    check_compatible(&src.model, &ds, "source checkpoint")?;
    check_compatible(&tgt.model, &ds, "target checkpoint")?;
    let samples = eval_samples(&ds, &evaluation)?;
    prepare_out(out)?;
    let runs = run_rows(&src.model, &tgt.model, samples, std::slice::from_ref(&section), evaluation.traces)?;
    let results = ResultsFile {
        classes: ds.classes(),
        rows: runs.iter().map(|r| r.row.clone()).collect(),
    };
    results.save(&out.out)?;
    if evaluation.traces {
        write_traces(&out.out, &runs)?;
    }
    write_run_json(
        &out.out,
        "transfer",
        json!({ "attack": section, "evaluation": evaluation }),
        json!({
            "source_checkpoint": path_value(source),
            "target_checkpoint": path_value(target),
            "data": path_value(data),
            "config": config.map(path_value),
            "attack": spec,
        }),
        started,
    )
}

fn gradcheck_cmd(scope: &[String], cases: usize, seed: u64, corrupt: Option<&str>) -> CliResult<()> {
    let ops: Vec<CheckedOp> = if scope.is_empty() {
        CheckedOp::ALL.to_vec()
    } else {
        scope.iter().map(|s| s.trim().parse()).collect::<Result<_, _>>()?
    };
    if cases == 0 {
        return Err(CliError::Config("--cases must be positive".into()));
    }
    let opts = GradcheckOptions {
        cases,
        seed,
        corrupt: corrupt.map(str::parse).transpose()?,
    };
    let reports = run_gradcheck(&ops, &opts)?;
    println!("{:<14} {:>6} {:>8} {:>14} {:>10}  status", "op", "cases", "skipped", "worst_rel_err", "tolerance");
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{:<14} {:>6} {:>8} {:>14.3e} {:>10.0e}  {}",
            r.op,
            r.cases,
            r.skipped,
            r.worst_rel_err,
            r.tolerance,
            if r.passed { "ok" } else { "FAIL" }
        );
        if !r.passed {
            failed.push(r.op);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

fn summarize_cmd(results: &Path, out: Option<&Path>) -> CliResult<()> {
    let file = ResultsFile::load(results)?;
    let csv = file.regenerated()?.csv_string()?;
    match out {
        Some(p) => std::fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

/// Directory holding the per-image traces of attack section `section` at one budget.
pub fn trace_dir(out: &Path, section: usize, kind: AttackKind, iterations: usize) -> PathBuf {
    out.join("traces").join(format!("{section:02}_{}_t{iterations}", kind.name()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attack_specs() {
        assert_eq!(parse_attack_spec("segpgd:20").unwrap(), (AttackKind::SegPgd, Some(20)));
        assert_eq!(parse_attack_spec("fgsm").unwrap(), (AttackKind::Fgsm, None));
        assert!(matches!(parse_attack_spec("pgd:x"), Err(CliError::Config(_))));
        assert!(matches!(parse_attack_spec("cw:10"), Err(CliError::Config(_))));
    }

    #[test]
    fn refuses_non_empty_out_without_force() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("x"), "1").unwrap();
        let out = OutArgs { out: dir.path().to_path_buf(), force: false };
        assert!(matches!(prepare_out(&out), Err(CliError::Config(_))));
        let out = OutArgs { force: true, ..out };
        prepare_out(&out).unwrap();
        assert!(!dir.path().join("x").exists());
    }
}
