use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use sspa_core::ablation::{run_ablation, Axis};
use sspa_core::config::{apply_variant, RunConfig};
use sspa_core::data::{gen_synthetic, manifest_path, save_bundle, save_manifest, Manifest};
use sspa_core::model::{forward, SspaParams};
use sspa_core::parallel::Exec;
use sspa_core::pgm::{patch_grid, write_pgm};
use sspa_core::prompting::{assemble_description, save_description_cache};
use sspa_core::suite::{op_names, run_suite, DEFAULT_INSTANCES};
use sspa_core::train::{evaluate_params, history_csv, sample_semantics, train, Split, TaskData};
use sspa_core::Error;

/// Semantic-prompted multi-label recognition head: data generation,
/// training, evaluation, ablations and diagnostics.
#[derive(Parser, Debug)]
#[command(name = "sspa", version)]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic task as SSPA-FB bundles with manifests.
    GenData(Common),
    /// Train a model and record its metric history.
    Train {
        #[command(flatten)]
        common: Common,
        /// Named variant applied on top of the config (e.g. "w/o Gate").
        #[arg(long)]
        variant: Option<String>,
    },
    /// Evaluate saved parameters on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Parameter file; defaults to <out>/params.json.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Train every row of one ablation axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// synthesis, gdma, gate, aggregator, branch, ssp or split.
        #[arg(long)]
        axis: String,
    },
    /// Compare backward-pass gradients with finite differences.
    GradCheck {
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_INSTANCES)]
        instances: usize,
        /// Check a single op.
        #[arg(long)]
        op: Option<String>,
    },
    /// Dump patch-importance and gate-vector maps as PGM images.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        /// Number of test images to dump.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run config; defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed for the model and the synthetic data.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config field, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

/// Failure with its exit code: 1 config, 2 I/O, 3 numerical.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            _ if e.is_numerical() => 3,
            Error::Io(_) | Error::Format(_) | Error::Json(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn resolve(common: &Common, variant: Option<&str>) -> CliResult<RunConfig> {
    let mut run = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        run.set_seed(seed);
    }
    let mut run = run.with_overrides(&common.overrides)?;
    if let Some(v) = variant {
        run.model = apply_variant(&run.model, v)?;
    }
    run.validate()?;
    Ok(run)
}

fn prepare_out(dir: &Path, resolved: &impl Serialize) -> CliResult {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("resolved_config.json"), resolved)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text)?;
    Ok(())
}

fn gen_data(common: &Common) -> CliResult {
    let run = resolve(common, None)?;
    prepare_out(&common.out, &run)?;
    let data = gen_synthetic(&run.data.synthetic)?;
    let descriptions: Vec<_> = data
        .names
        .iter()
        .map(|n| assemble_description(&format!("A synthetic category whose patches cluster around the {n} prototype."), n))
        .collect();
    save_description_cache(&common.out.join("descriptions.json"), &descriptions)?;
    let manifest = Manifest {
        categories: data.names.clone(),
        descriptions_file: Some("descriptions.json".into()),
    };
    for (name, set) in [("train", &data.train), ("test", &data.test)] {
        let path = common.out.join(format!("{name}.sspa"));
        save_bundle(&path, set)?;
        save_manifest(&manifest_path(&path), &manifest)?;
        info!("wrote {} ({} samples)", path.display(), set.len());
    }
    Ok(())
}

fn train_cmd(common: &Common, variant: Option<&str>) -> CliResult {
    let run = resolve(common, variant)?;
    prepare_out(&common.out, &run)?;
    let data = TaskData::load(&run)?;
    let out = train(&run.model, &run.train, &data, Exec::from_env())?;
    out.params.save(&common.out.join("params.json"))?;
    out.raw_params.save(&common.out.join("params_raw.json"))?;
    write_json(&common.out.join("metrics.json"), &out.final_metrics)?;
    fs::write(common.out.join("history.csv"), history_csv(&out.history))?;
    println!("{}", out.final_metrics.to_text());
    Ok(())
}

fn eval_cmd(common: &Common, params: Option<&Path>, variant: Option<&str>) -> CliResult {
    let run = resolve(common, variant)?;
    let params_path = params.map_or_else(|| common.out.join("params.json"), Path::to_path_buf);
    let p = SspaParams::load(&params_path, &run.model)?;
    prepare_out(&common.out, &run)?;
    let data = TaskData::load(&run)?;
    let table = evaluate_params(&run.model, &p, &data.test, &data.semantics, Split::Test, Exec::from_env())?;
    write_json(&common.out.join("eval.json"), &table)?;
    let text = table.to_text();
    fs::write(common.out.join("eval.txt"), &text)?;
    println!("{text}");
    Ok(())
}

fn ablate_cmd(common: &Common, axis: &str) -> CliResult {
    let axis: Axis = axis.parse()?;
    let run = resolve(common, None)?;
    prepare_out(&common.out, &run)?;
    let data = TaskData::load(&run)?;
    let table = run_ablation(&run.model, &run.train, &data, axis, Exec::from_env())?;
    let stem = format!("ablation_{}", axis.name());
    fs::write(common.out.join(format!("{stem}.csv")), table.to_csv())?;
    fs::write(common.out.join(format!("{stem}.txt")), table.to_text())?;
    write_json(&common.out.join(format!("{stem}.json")), &table)?;
    println!("{}", table.to_text());
    Ok(())
}

#[derive(Serialize)]
struct GradCheckSettings<'a> {
    seed: u64,
    instances: usize,
    ops: Vec<&'a str>,
}

fn grad_check_cmd(out: &Path, seed: u64, instances: usize, op: Option<&str>) -> CliResult {
    let ops = match op {
        Some(o) => vec![o],
        None => op_names(),
    };
    prepare_out(out, &GradCheckSettings { seed, instances, ops })?;
    let report = run_suite(instances, seed, op)?;
    write_json(&out.join("grad_check.json"), &report)?;
    print!("{}", report.to_text());
    if !report.passed() {
        return Err(Failure {
            code: 3,
            message: format!("gradient check failed at tolerance {:e}", report.tolerance),
        });
    }
    Ok(())
}

fn inspect_cmd(common: &Common, params: Option<&Path>, variant: Option<&str>, count: usize) -> CliResult {
    let run = resolve(common, variant)?;
    let params_path = params.map_or_else(|| common.out.join("params.json"), Path::to_path_buf);
    let p = SspaParams::load(&params_path, &run.model)?;
    prepare_out(&common.out, &run)?;
    let dir = common.out.join("inspect");
    fs::create_dir_all(&dir)?;
    let data = TaskData::load(&run)?;
    let names: Vec<String> = match &run.data.train_path {
        Some(path) => sspa_core::data::load_manifest(&manifest_path(Path::new(path)))?.categories,
        None => sspa_core::data::category_names(run.model.categories),
    };
    let (rows, cols) = patch_grid(run.model.patches);
    for i in 0..count.min(data.test.len()) {
        let sem = sample_semantics(&run.model, &data.semantics, Split::Test, i);
        let o = forward(&run.model, &p, &data.test.samples[i], &sem)?;
        if let Some(gamma) = &o.gamma {
            for (j, name) in names.iter().enumerate() {
                let col: Vec<f64> = (0..gamma.rows()).map(|r| gamma.get(r, j)).collect();
                write_pgm(&dir.join(format!("img{i}_gamma_{name}.pgm")), &col, rows, cols)?;
            }
        }
        if let Some(v) = &o.gate_s2v {
            let means: Vec<f64> = (0..v.rows()).map(|r| v.row(r).iter().sum::<f64>() / v.cols() as f64).collect();
            write_pgm(&dir.join(format!("img{i}_gate_s2v.pgm")), &means, rows, cols)?;
        }
        if let Some(v) = &o.gate_v2s {
            write_pgm(&dir.join(format!("img{i}_gate_v2s.pgm")), v.data(), v.rows(), v.cols())?;
        }
        let labels: Vec<&str> = names
            .iter()
            .zip(&data.test.samples[i].y)
            .filter(|(_, &y)| y == 1.0)
            .map(|(n, _)| n.as_str())
            .collect();
        info!("image {i}: labels {labels:?}, scores {:?}", o.prediction.p);
    }
    println!("wrote maps for {} images to {}", count.min(data.test.len()), dir.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train { common, variant } => train_cmd(common, variant.as_deref()),
        Command::Eval {
            common,
            params,
            variant,
        } => eval_cmd(common, params.as_deref(), variant.as_deref()),
        Command::Ablate { common, axis } => ablate_cmd(common, axis),
        Command::GradCheck {
            out,
            seed,
            instances,
            op,
        } => grad_check_cmd(out, *seed, *instances, op.as_deref()),
        Command::Inspect {
            common,
            params,
            variant,
            count,
        } => inspect_cmd(common, params.as_deref(), variant.as_deref(), *count),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
