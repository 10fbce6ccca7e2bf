use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tkd_core::eval::{
    ablate_lambda, bench_loss_cost, evaluate_report, lambda_table, loss_cost_table, run_and_evaluate, summary_table,
};
use tkd_core::pipeline::{checkpoint_save, PipelineReport, Student};
use tkd_core::sim::{write_trace, Stream};

use crate::config::RunConfig;
use crate::CliError;

fn output(cfg: &RunConfig, default: &str) -> PathBuf {
    cfg.output.path.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(CliError::runtime)?;
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// Writes rows as CSV or JSON by extension, otherwise the rendered text.
fn write_table<T: Serialize>(path: &Path, rows: &[T], text: &str) -> Result<(), CliError> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "csv" => {
            let mut w = csv::Writer::from_path(path).map_err(CliError::runtime)?;
            for r in rows {
                w.serialize(r).map_err(CliError::runtime)?;
            }
            w.flush().map_err(CliError::runtime)
        }
        "json" => write_json(path, &rows),
        _ => fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display()))),
    }
}

fn class_histogram(stream: &Stream) -> Vec<usize> {
    let mut counts = vec![0; stream.header.c];
    for f in &stream.frames {
        for o in &f.gt {
            counts[o.class_id] += 1;
        }
    }
    counts
}

pub fn generate(cfg: &RunConfig) -> Result<(), CliError> {
    let stream = cfg.generate()?;
    let path = output(cfg, "stream.jsonl");
    write_trace(&stream, &path).map_err(CliError::runtime)?;
    let hist = class_histogram(&stream);
    let hist: Vec<String> = hist.iter().enumerate().map(|(k, n)| format!("{k}:{n}")).collect();
    println!(
        "{} frames, {} scene changes -> {}",
        stream.len(),
        stream.change_points().len(),
        path.display()
    );
    println!("class histogram (object-frames): {}", hist.join(" "));
    Ok(())
}

fn student_for(cfg: &RunConfig) -> Result<(Stream, Student), CliError> {
    let (stream, world) = cfg.load_stream()?;
    let student = Student::pretrain(&world, &cfg.model)?;
    Ok((stream, student))
}

fn one_line(r: &PipelineReport) -> String {
    let f1 = r
        .eval
        .as_ref()
        .and_then(|e| e.at(0.5))
        .map_or("n/a".to_string(), |m| format!("{:.4}", m.f1));
    format!(
        "{} / {}: {} frames, {:.1} fps, key fraction {:.4}, F1@0.5 {f1}",
        r.mode,
        r.selector,
        r.frames.len(),
        r.fps,
        r.key_frame_fraction
    )
}

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let (stream, student) = student_for(cfg)?;
    let out = run_and_evaluate(&stream, &cfg.pipeline(), &student, &cfg.eval)?;
    let path = output(cfg, "report.json");
    write_json(&path, &out.report)?;
    if let (Some(ckpt), Some(sel)) = (&cfg.output.checkpoint, &out.selector) {
        checkpoint_save(ckpt, &out.decoder, sel)?;
    }
    println!("{}", one_line(&out.report));
    match &out.report.abort {
        Some(reason) => Err(CliError::Runtime(format!(
            "run aborted after {} frames ({reason}); partial report in {}",
            out.report.frames.len(),
            path.display()
        ))),
        None => Ok(()),
    }
}

pub fn ablate(cfg: &RunConfig) -> Result<(), CliError> {
    let (stream, student) = student_for(cfg)?;
    let rows = ablate_lambda(&stream, &cfg.ablate.lambdas, &cfg.pipeline(), &student, &cfg.eval)?;
    let text = lambda_table(&rows);
    print!("{text}");
    if let Some(path) = &cfg.output.path {
        write_table(path, &rows, &text)?;
    }
    Ok(())
}

pub fn bench(cfg: &RunConfig) -> Result<(), CliError> {
    let rows = bench_loss_cost(&cfg.bench.target_counts, cfg.bench.trials, cfg.seed())?;
    let text = loss_cost_table(&rows);
    print!("{text}");
    if let Some(path) = &cfg.output.path {
        write_table(path, &rows, &text)?;
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, report: &Path) -> Result<(), CliError> {
    let text =
        fs::read_to_string(report).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", report.display())))?;
    let report: PipelineReport =
        serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", report.display())))?;
    let (stream, _) = cfg.load_stream()?;
    let pipeline = cfg.pipeline();
    let summary = evaluate_report(&report, &stream, &pipeline.oracle(&stream), &cfg.eval)?;
    print!("{}", summary_table(&summary));
    if let Some(path) = &cfg.output.path {
        write_json(path, &summary)?;
    }
    Ok(())
}
