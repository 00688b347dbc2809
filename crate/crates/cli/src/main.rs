//! `unlearn`: run, sweep and compare unlearning experiments.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid input, 3 numeric abort.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use unlearn_core::engine::{
    evaluate, non_dominated_indices, pass_overhead, prepare, pretrain, run_prepared, ParetoPoint,
    Pretrained, ProblemSpec, RunConfig, RunRecord,
};
use unlearn_core::Error;

#[derive(Parser, Debug)]
#[command(name = "unlearn", version, about = "Two-task unlearning experiments on desk-scale problems")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one unlearning experiment.
    Run(RunArgs),
    /// Run one experiment per value of a parameter.
    Sweep(SweepArgs),
    /// Fine-tune the classification baseline only and report its accuracy.
    Finetune(RunArgs),
    /// Split run records into dominated and non-dominated sets.
    Pareto(CollectArgs),
    /// Tabulate final metrics of run records into one CSV.
    Report(CollectArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the `out` key of the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    seeds: SeedArgs,
}

#[derive(Args, Debug)]
struct SeedArgs {
    #[arg(long)]
    seed_data: Option<u64>,
    #[arg(long)]
    seed_init: Option<u64>,
    #[arg(long)]
    seed_method: Option<u64>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Parameter to vary: c, eta, beta or method.
    #[arg(long)]
    param: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    values: Vec<String>,
    /// Maximum concurrent runs (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct CollectArgs {
    /// Glob patterns or paths of record.json files.
    #[arg(required = true)]
    records: Vec<String>,
    /// Directory for the CSV output.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Invalid(String),
    Numeric(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Invalid(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Invalid(m) | Failure::Numeric(m) | Failure::Io(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Diverged { step, reason, .. } => Failure::Numeric(format!("aborted at step {step}: {reason}")),
            Error::NonFinite { .. } => Failure::Numeric(e.to_string()),
            Error::Io(_) => Failure::Io(e.to_string()),
            other => Failure::Invalid(other.to_string()),
        }
    }
}

fn io_fail(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

type Outcome<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.cmd {
        Command::Run(a) => cmd_run(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Finetune(a) => cmd_finetune(&a),
        Command::Pareto(a) => cmd_pareto(&a),
        Command::Report(a) => cmd_report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

/// Reads a config file: a `RunConfig` object with an optional `out` key.
fn load_config(args: &RunArgs) -> Outcome<(RunConfig, PathBuf)> {
    let text = fs::read_to_string(&args.config).map_err(|e| io_fail(&args.config, e))?;
    let invalid = |m: String| Failure::Invalid(format!("{}: {m}", args.config.display()));
    let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| invalid(e.to_string()))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| invalid("top level must be an object".into()))?;
    let file_out = match obj.remove("out") {
        None => None,
        Some(serde_json::Value::String(s)) => Some(PathBuf::from(s)),
        Some(_) => return Err(invalid("out: must be a string".into())),
    };
    let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| invalid(e.to_string()))?;
    if let Some(s) = args.seeds.seed_data {
        cfg.seeds.data = s;
    }
    if let Some(s) = args.seeds.seed_init {
        cfg.seeds.init = s;
    }
    if let Some(s) = args.seeds.seed_method {
        cfg.seeds.method = s;
    }
    check(&cfg).map_err(invalid)?;
    let out = args
        .out
        .clone()
        .or(file_out)
        .unwrap_or_else(|| PathBuf::from("runs"));
    Ok((cfg, out))
}

/// Validation with the offending section named.
fn check(cfg: &RunConfig) -> std::result::Result<(), String> {
    cfg.method.validate().map_err(|e| format!("method: {e}"))?;
    cfg.lr.validate().map_err(|e| format!("lr: {e}"))?;
    cfg.problem.validate().map_err(|e| format!("problem: {e}"))?;
    cfg.validate().map_err(|e| e.to_string())
}

fn config_hash(cfg: &RunConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(&Sha256::digest(&bytes)[..6])
}

fn run_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    let s = &cfg.seeds;
    root.join(format!(
        "{}_{}-{}-{}_{}",
        cfg.method.name(),
        s.data,
        s.init,
        s.method,
        config_hash(cfg)
    ))
}

fn write_artifacts(dir: &Path, cfg: &RunConfig, rec: &RunRecord) -> Outcome<()> {
    fs::create_dir_all(dir).map_err(|e| io_fail(dir, e))?;
    let cfg_path = dir.join("config.json");
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(&cfg_path, text + "\n").map_err(|e| io_fail(&cfg_path, e))?;
    let rec_path = dir.join("record.json");
    fs::write(&rec_path, rec.to_json()? + "\n").map_err(|e| io_fail(&rec_path, e))?;
    let trace_path = dir.join("trace.csv");
    let file = fs::File::create(&trace_path).map_err(|e| io_fail(&trace_path, e))?;
    rec.write_trace_csv(std::io::BufWriter::new(file))?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn summary_line(rec: &RunRecord) -> String {
    let f = &rec.final_state;
    format!(
        "{} L_R={:.6e} L_F={:.6e} acc_R={} acc_F={} overhead={:.4}",
        rec.tag,
        f.loss_retain,
        f.loss_forget,
        fmt_opt(f.acc_retain),
        fmt_opt(f.acc_forget),
        pass_overhead(rec)
    )
}

fn execute(cfg: &RunConfig, pre: Option<&Pretrained>, root: &Path) -> Outcome<(RunRecord, PathBuf)> {
    let rec = run_prepared(cfg, prepare(cfg, pre)?)?;
    let dir = run_dir(root, cfg);
    write_artifacts(&dir, cfg, &rec)?;
    Ok((rec, dir))
}

fn cmd_run(args: &RunArgs) -> Outcome<()> {
    let (cfg, out) = load_config(args)?;
    let (rec, dir) = execute(&cfg, None, &out)?;
    println!("{} -> {}", summary_line(&rec), dir.display());
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Outcome<()> {
    let (base, out) = load_config(&args.run)?;
    let values: Vec<&String> = args.values.iter().filter(|v| !v.trim().is_empty()).collect();
    if values.is_empty() {
        return Err(Failure::Invalid("--values is empty".into()));
    }
    let configs = values
        .iter()
        .map(|v| {
            base.with_param(&args.param, v)
                .map_err(|e| Failure::Invalid(format!("{}={v}: {e}", args.param)))
        })
        .collect::<Outcome<Vec<_>>>()?;

    // Children differ only in method or step size, so one fine-tune serves all.
    let pre = match &base.problem {
        ProblemSpec::Gaussian(g) => Some(pretrain(g, &base.seeds)?),
        ProblemSpec::QuadPair(_) => None,
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = args.jobs {
        if j == 0 {
            return Err(Failure::Invalid("--jobs must be at least 1".into()));
        }
        pool = pool.num_threads(j);
    }
    let pool = pool.build().map_err(|e| Failure::Io(e.to_string()))?;
    let results: Vec<Outcome<(RunRecord, PathBuf)>> =
        pool.install(|| configs.par_iter().map(|c| execute(c, pre.as_ref(), &out)).collect());

    fs::create_dir_all(&out).map_err(|e| io_fail(&out, e))?;
    let path = out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| io_fail(&path, e))?;
    let csv_err = |e: csv::Error| io_fail(&path, e);
    w.write_record([
        &args.param,
        "loss_retain",
        "loss_forget",
        "acc_retain",
        "acc_forget",
        "status",
        "dir",
    ])
    .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    let mut worst: Option<Failure> = None;
    for (value, res) in values.into_iter().zip(results) {
        match res {
            Ok((rec, dir)) => {
                let f = &rec.final_state;
                println!("{}={value} {}", args.param, summary_line(&rec));
                w.write_record([
                    value.clone(),
                    format!("{:?}", f.loss_retain),
                    format!("{:?}", f.loss_forget),
                    opt(f.acc_retain),
                    opt(f.acc_forget),
                    "ok".into(),
                    dir.display().to_string(),
                ])
                .map_err(csv_err)?;
            }
            Err(fail) => {
                eprintln!("{}={value}: {}", args.param, fail.message());
                w.write_record([value.as_str(), "", "", "", "", "failed", ""])
                    .map_err(csv_err)?;
                if worst.as_ref().is_none_or(|w| fail.code() > w.code()) {
                    worst = Some(fail);
                }
            }
        }
    }
    w.flush().map_err(|e| io_fail(&path, e))?;
    match worst {
        Some(f) => Err(f),
        None => Ok(()),
    }
}

fn cmd_finetune(args: &RunArgs) -> Outcome<()> {
    let (cfg, out) = load_config(args)?;
    let ProblemSpec::Gaussian(spec) = &cfg.problem else {
        return Err(Failure::Invalid("problem: finetune needs a gaussian problem".into()));
    };
    let pre = pretrain(spec, &cfg.seeds)?;
    let e = evaluate(&pre.graph, &pre.snapshot, &pre.split)?;
    let s = &cfg.seeds;
    let dir = out.join(format!("finetune_{}-{}_{}", s.data, s.init, config_hash(&cfg)));
    fs::create_dir_all(&dir).map_err(|e| io_fail(&dir, e))?;
    let doc = serde_json::json!({
        "problem": cfg.problem,
        "seeds": cfg.seeds,
        "loss_retain": e.loss_retain,
        "loss_forget": e.loss_forget,
        "acc_retain": e.acc_retain,
        "acc_forget": e.acc_forget,
        "params": pre.snapshot.data(),
        "digest": pre.snapshot.digest(),
    });
    let path = dir.join("finetune.json");
    let text = serde_json::to_string_pretty(&doc).expect("json");
    fs::write(&path, text + "\n").map_err(|e| io_fail(&path, e))?;
    println!(
        "finetune_{}-{} L_R={:.6e} L_F={:.6e} acc_R={:.4} acc_F={:.4} -> {}",
        s.data,
        s.init,
        e.loss_retain,
        e.loss_forget,
        e.acc_retain,
        e.acc_forget,
        dir.display()
    );
    Ok(())
}

/// Expands patterns into a sorted, de-duplicated list of paths. A pattern
/// that matches nothing is an error naming it.
fn expand(patterns: &[String]) -> Outcome<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for p in patterns {
        let matches = glob::glob(p).map_err(|e| Failure::Invalid(format!("{p}: {e}")))?;
        let mut found = false;
        for m in matches {
            let m = m.map_err(|e| Failure::Invalid(format!("{}: unreadable record", e.path().display())))?;
            found = true;
            paths.push(m);
        }
        if !found {
            return Err(Failure::Invalid(format!("{p}: unreadable record (no such file)")));
        }
    }
    paths.sort();
    paths.dedup();
    Ok(paths)
}

fn load_records(patterns: &[String]) -> Outcome<Vec<(PathBuf, RunRecord)>> {
    expand(patterns)?
        .into_iter()
        .map(|p| {
            let file = fs::File::open(&p)
                .map_err(|e| Failure::Invalid(format!("{}: unreadable record: {e}", p.display())))?;
            let rec = RunRecord::from_json(std::io::BufReader::new(file))
                .map_err(|e| Failure::Invalid(format!("{}: unreadable record: {e}", p.display())))?;
            Ok((p, rec))
        })
        .collect()
}

fn cmd_pareto(args: &CollectArgs) -> Outcome<()> {
    let records = load_records(&args.records)?;
    let points: Vec<ParetoPoint> = records
        .iter()
        .map(|(p, r)| ParetoPoint::new(r.final_state.loss_retain, r.final_state.loss_forget, p.display().to_string()))
        .collect();
    let front = non_dominated_indices(&points);
    fs::create_dir_all(&args.out).map_err(|e| io_fail(&args.out, e))?;
    let path = args.out.join("pareto.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| io_fail(&path, e))?;
    let csv_err = |e: csv::Error| io_fail(&path, e);
    w.write_record(["record", "tag", "loss_retain", "loss_forget", "dominated"])
        .map_err(csv_err)?;
    for (i, (pt, (_, rec))) in points.iter().zip(&records).enumerate() {
        let dominated = !front.contains(&i);
        println!(
            "{} {} L_R={:.6e} L_F={:.6e}",
            if dominated { "dominated    " } else { "non-dominated" },
            pt.tag,
            pt.retain_loss,
            pt.forget_loss
        );
        w.write_record([
            pt.tag.clone(),
            rec.tag.clone(),
            format!("{:?}", pt.retain_loss),
            format!("{:?}", pt.forget_loss),
            u8::from(dominated).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| io_fail(&path, e))?;
    println!("{} of {} records non-dominated", front.len(), points.len());
    Ok(())
}

fn cmd_report(args: &CollectArgs) -> Outcome<()> {
    let records = load_records(&args.records)?;
    fs::create_dir_all(&args.out).map_err(|e| io_fail(&args.out, e))?;
    let path = args.out.join("report.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| io_fail(&path, e))?;
    let csv_err = |e: csv::Error| io_fail(&path, e);
    w.write_record([
        "record",
        "tag",
        "method",
        "steps",
        "loss_retain",
        "loss_forget",
        "acc_retain",
        "acc_forget",
        "overhead",
    ])
    .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for (p, rec) in &records {
        let f = &rec.final_state;
        w.write_record([
            p.display().to_string(),
            rec.tag.clone(),
            rec.config.method.name(),
            rec.config.steps.to_string(),
            format!("{:?}", f.loss_retain),
            format!("{:?}", f.loss_forget),
            opt(f.acc_retain),
            opt(f.acc_forget),
            format!("{:?}", pass_overhead(rec)),
        ])
        .map_err(csv_err)?;
        println!("{}", summary_line(rec));
    }
    w.flush().map_err(|e| io_fail(&path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_flags_are_rejected() {
        assert!(Cli::try_parse_from(["unlearn", "run", "--config", "x.json", "--bogus"]).is_err());
    }

    #[test]
    fn sweep_values_split_on_commas() {
        let cli = Cli::try_parse_from([
            "unlearn", "sweep", "--config", "x.json", "--param", "c", "--values", "0.6,0.75,0.9",
        ])
        .unwrap();
        let Command::Sweep(s) = cli.cmd else { panic!() };
        assert_eq!(s.values, ["0.6", "0.75", "0.9"]);
    }

    #[test]
    fn divergence_maps_to_numeric_exit() {
        let f: Failure = Error::Diverged {
            step: 7,
            reason: "nan".into(),
            last_params: vec![],
        }
        .into();
        assert_eq!(f.code(), 3);
        assert!(f.message().contains("step 7"));
    }
}
