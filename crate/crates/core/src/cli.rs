//! Command-line front end. Every command resolves a [`RunConfig`], writes
//! its outputs under `<run.dir>/<config hash>/` and prints one JSON summary
//! line. Failures print one JSON error line and exit with
//! [`crate::Error::exit_code`].

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::Result;
use crate::eval::{
    base_novel_split, evaluate, gating_report, render_table, run_ablation, Experiment, GatingReport, Prepared,
};
use crate::model::{Backbone, VisualTokenSequence};
use crate::trainer::{export_student, ExportInfo, TrainState, TrainedStudent};
use crate::world::SyntheticWorld;

#[derive(Debug, Parser)]
#[command(name = "transagent", version, about = "Multi-source distillation into the prompts of a frozen dual encoder")]
pub struct Cli {
    /// TOML config file merged over the defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key, as key=value; repeatable, applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every agent over the training pool and write a knowledge cache.
    Extract,
    /// Train one student per seed; writes training snapshots and logs.
    Train,
    /// Unload the agents from each snapshot and write the students.
    Export,
    /// Evaluate the exported students on base and novel classes.
    Eval,
    /// Train and evaluate every setting of one ablation axis.
    Ablate {
        /// vac_mode | lac_token | mac_source | fusion | mac_loss_type | pooling
        #[arg(long)]
        axis: String,
    },
    /// Average gate weights of each snapshot over the base-class test images.
    GatingReport,
}

fn command() -> clap::Command {
    let keys = RunConfig::help_text();
    Cli::command()
        .after_help(keys.clone())
        .mut_subcommands(|c| c.after_help(keys.clone()))
}

/// Parse `args`, run the command, and return the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match command().try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind::{DisplayHelp, DisplayVersion};
            if matches!(e.kind(), DisplayHelp | DisplayVersion) {
                let _ = write!(out, "{}", e.render());
                return 0;
            }
            let text = e.to_string();
            let msg = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            let line = json!({"error": "usage", "exit_code": 2, "message": msg});
            let _ = writeln!(err, "{line}");
            return 2;
        }
    };
    match run(&cli) {
        Ok(summary) => {
            let _ = writeln!(out, "{summary}");
            0
        }
        Err(e) => {
            let line = json!({"error": e.kind(), "exit_code": e.exit_code(), "message": e.to_string()});
            let _ = writeln!(err, "{line}");
            e.exit_code()
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.merge_file(path)?;
    }
    for pair in &cli.overrides {
        cfg.set_pair(pair)?;
    }
    Ok(cfg)
}

fn snapshot_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("state-seed{seed}.takc"))
}

fn student_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("student-seed{seed}.takc"))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    std::fs::write(&p, contents)?;
    Ok(p)
}

pub fn run(cli: &Cli) -> Result<serde_json::Value> {
    let cfg = resolve(cli)?;
    let exp = cfg.experiment()?;
    let dir = cfg.run_dir()?;
    std::fs::create_dir_all(&dir)?;
    write(&dir, "config.toml", &cfg.to_toml())?;
    let mut summary = match &cli.command {
        Command::Extract => {
            let path = cfg.cache_path()?;
            let records = exp.extract(&path)?;
            let s = json!({"cache": path, "records": records});
            write(&dir, "extract.json", &format!("{s}\n"))?;
            s
        }
        Command::Train => train(&exp, &dir)?,
        Command::Export => export(&exp, &dir)?,
        Command::Eval => eval(&exp, &dir)?,
        Command::Ablate { axis } => {
            let table = run_ablation(axis, &exp)?;
            let txt = write(&dir, &format!("ablation-{}.txt", table.axis), &table.render())?;
            let jsonl = write(&dir, &format!("ablation-{}.jsonl", table.axis), &table.to_jsonl())?;
            let rows: Vec<&str> = table.rows.iter().map(|r| r.setting.as_str()).collect();
            json!({"axis": table.axis, "rows": rows, "table": txt, "records": jsonl})
        }
        Command::GatingReport => gating(&exp, &dir)?,
    };
    summary["run_dir"] = json!(dir);
    summary["config_hash"] = json!(exp.config_hash);
    Ok(summary)
}

fn train(exp: &Experiment, dir: &Path) -> Result<serde_json::Value> {
    let prep = exp.prepare()?;
    let layout = prep.knowledge.layout();
    let vision: Vec<String> = layout.vision.iter().map(|v| v.0.clone()).collect();
    let language: Vec<String> = layout.language.iter().map(|v| v.0.clone()).collect();
    let mut files = Vec::new();
    let mut all = String::new();
    for &seed in &exp.seeds {
        let (state, log) = exp.train_seed(&prep, seed)?;
        let path = snapshot_path(dir, seed);
        state.save(&path, &prep.dataset.id, &vision, &language)?;
        write(dir, &format!("train-seed{seed}.jsonl"), &log)?;
        for line in log.lines() {
            let mut v: serde_json::Value = serde_json::from_str(line).expect("log line is JSON");
            v["seed"] = json!(seed);
            all.push_str(&format!("{v}\n"));
        }
        files.push(path);
    }
    let log = write(dir, "train.jsonl", &all)?;
    Ok(json!({"snapshots": files, "log": log}))
}

fn export(exp: &Experiment, dir: &Path) -> Result<serde_json::Value> {
    let world = SyntheticWorld::new(exp.world.clone())?;
    let dataset = world.dataset();
    let backbone = Backbone::new(&exp.model)?;
    let mut files = Vec::new();
    for &seed in &exp.seeds {
        let mut state = TrainState::load(&snapshot_path(dir, seed))?;
        let info = ExportInfo {
            config_hash: exp.config_hash.clone(),
            seed,
            dataset_id: dataset.id.clone(),
            num_classes: dataset.num_classes(),
        };
        let student = export_student(&mut state, &backbone, &exp.model, &info)?;
        let path = student_path(dir, seed);
        student.save(&path)?;
        files.push(path);
    }
    Ok(json!({"students": files}))
}

fn eval(exp: &Experiment, dir: &Path) -> Result<serde_json::Value> {
    let world = SyntheticWorld::new(exp.world.clone())?;
    let dataset = world.dataset();
    let ids: Vec<usize> = (0..dataset.num_classes()).collect();
    let split = base_novel_split(&dataset.id, &ids, exp.split_seed, exp.train.shots)?;
    let students = exp
        .seeds
        .iter()
        .map(|&s| TrainedStudent::load(&student_path(dir, s)))
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&students, &dataset, &split)?;
    let jsonl = write(dir, "report.jsonl", &format!("{}\n", serde_json::to_string(&report).expect("report serializes")))?;
    let txt = write(dir, "report.txt", &render_table("student", &[("transagent".to_string(), &report)]))?;
    Ok(json!({"base": report.base, "novel": report.novel, "hm": report.hm, "report": jsonl, "table": txt}))
}

fn gating(exp: &Experiment, dir: &Path) -> Result<serde_json::Value> {
    let prep: Prepared = exp.prepare()?;
    let images: Vec<&VisualTokenSequence> = prep
        .dataset
        .test
        .iter()
        .filter(|s| prep.split.base.contains(&s.label))
        .map(|s| &s.image)
        .collect();
    let ctx = prep.context(&exp.model);
    let mut grid = String::new();
    let mut records = String::new();
    for &seed in &exp.seeds {
        let state = TrainState::load(&snapshot_path(dir, seed))?;
        let report: GatingReport = gating_report(&ctx, &exp.seed_config(seed), &state, &images)?;
        for line in report.to_grid().lines().skip(usize::from(!grid.is_empty())) {
            let line = if line.starts_with("group\t") {
                format!("seed\t{line}")
            } else {
                format!("{seed}\t{line}")
            };
            grid.push_str(&line);
            grid.push('\n');
        }
        let mut v = serde_json::to_value(&report).expect("report serializes");
        v["seed"] = json!(seed);
        records.push_str(&format!("{v}\n"));
    }
    let tsv = write(dir, "gating.tsv", &grid)?;
    let jsonl = write(dir, "gating.jsonl", &records)?;
    Ok(json!({"grid": tsv, "records": jsonl}))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = main_with(std::iter::once("transagent").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn help_and_version_exit_zero() {
        let (code, out, _) = call(&["train", "--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("loss.lambda2") && out.contains("[25]"));
        assert_eq!(call(&["--version"]).0, 0);
    }

    #[test]
    fn usage_errors_are_single_json_lines() {
        let (code, out, err) = call(&["ablate"]);
        assert_eq!(code, 2);
        assert!(out.is_empty());
        let v: serde_json::Value = serde_json::from_str(err.trim_end()).unwrap();
        assert_eq!(v["error"], "usage");
        assert_eq!(err.lines().count(), 1);
    }

    #[test]
    fn bad_override_is_a_config_error() {
        let (code, _, err) = call(&["train", "--set", "train.lr"]);
        assert_eq!(code, 2);
        assert!(err.contains("\"config\""));
    }
}
