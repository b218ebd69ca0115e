use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use facecascade::metrics::{evaluate, EvalReport};
use facecascade::{
    generate_dataset, load_model, predict, read_dataset, save_model, train_traced, write_dataset,
    DescriptorKind, DescriptorSpec, Error, GenConfig, TrainConfig,
};

/// Joint landmark, visibility, head-pose and deformation estimation.
#[derive(Parser, Debug)]
#[command(name = "facecascade", version)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory from a TOML config.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a cascade model on a dataset directory.
    Train(TrainArgs),
    /// Write per-sample predictions as CSV.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model; writes a JSON report and per-stage curves.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        curves: Option<PathBuf>,
    },
}

fn parse_energy(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err("energy must be in (0, 1]".into())
    }
}

fn parse_lambda(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err("lambda must be finite and nonnegative".into())
    }
}

fn parse_descriptor(s: &str) -> Result<DescriptorKind, String> {
    s.parse::<DescriptorKind>().map_err(|e| e.to_string())
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    stages: u32,
    /// grad-hist or raw-patch.
    #[arg(long, default_value = "grad-hist", value_parser = parse_descriptor)]
    descriptor: DescriptorKind,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(1..))]
    patch_radius: u32,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    cells: u32,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(1..))]
    bins: u32,
    #[arg(long, default_value_t = 0.9, value_parser = parse_energy)]
    energy: f64,
    /// Ridge weight; defaults to 1e-3 times the design width.
    #[arg(long, value_parser = parse_lambda)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(1..))]
    augmentations: u32,
    /// Disable visibility weighting and pose/deformation features.
    #[arg(long)]
    baseline: bool,
}

fn run_gen(config: &Path, out: &Path) -> Result<(), Error> {
    let text = fs::read_to_string(config)?;
    let cfg: GenConfig =
        toml::from_str(&text).map_err(|e| Error::format("config", e.to_string()))?;
    let data = generate_dataset(&cfg)?;
    write_dataset(out, &data)?;
    log::info!("wrote {} samples to {}", data.samples.len(), out.display());
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<(), Error> {
    if a.descriptor == DescriptorKind::Oracle {
        return Err(Error::OracleUnavailable);
    }
    let data = read_dataset(&a.data)?;
    let cfg = TrainConfig {
        stages: a.stages as usize,
        descriptor: DescriptorSpec {
            kind: a.descriptor,
            patch_radius: a.patch_radius as usize,
            cells: a.cells as usize,
            bins: a.bins as usize,
        },
        energy: a.energy,
        lambda: a.lambda,
        seed: a.seed,
        augmentations: a.augmentations as usize,
        use_visibility: !a.baseline,
        use_pose_deform: !a.baseline,
        ..TrainConfig::default()
    };
    let (model, trace) = train_traced(&data, &cfg)?;
    save_model(&a.out, &model)?;
    log::info!(
        "trained {} stages on {} states; training error per stage {:?}",
        model.n_stages(),
        trace.n_states,
        trace.mean_error
    );
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::format("csv output", e.to_string())
}

fn run_predict(model: &Path, data: &Path, out: &Path) -> Result<(), Error> {
    let model = load_model(model)?;
    let data = read_dataset(data)?;
    let d = model.landmarks();
    let k = model.deformable.n_components();
    let mut w = csv::Writer::from_path(out).map_err(csv_error)?;
    let mut header = vec!["id".to_string()];
    for i in 0..d {
        header.extend([format!("u{i}"), format!("v{i}"), format!("c{i}")]);
    }
    header.extend(["pitch", "yaw", "roll"].map(String::from));
    header.extend((0..k).map(|j| format!("alpha{j}")));
    w.write_record(&header).map_err(csv_error)?;
    for s in &data.samples {
        let state = predict(&model, &s.image, &s.face_box)?;
        let mut row = vec![s.id.to_string()];
        for i in 0..d {
            let p = state.x.point(i);
            row.extend([
                p[0].to_string(),
                p[1].to_string(),
                state.c.as_slice()[i].to_string(),
            ]);
        }
        row.extend(state.h.to_degrees().iter().map(|v| v.to_string()));
        row.extend(state.alpha.as_slice().iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn write_curves(path: &Path, report: &EvalReport) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(["stage", "mean_landmark_error", "yaw_mae", "recall_at_p80"])
        .map_err(csv_error)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for c in &report.per_stage_curves {
        w.write_record([
            c.stage.to_string(),
            c.mean_landmark_error.to_string(),
            opt(c.yaw_mae),
            opt(c.recall_at_p80),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn run_eval(
    model: &Path,
    data: &Path,
    report_path: &Path,
    curves: Option<&Path>,
) -> Result<(), Error> {
    let model = load_model(model)?;
    let data = read_dataset(data)?;
    let report = evaluate(&model, &data)?;
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::format("report", e.to_string()))?;
    fs::write(report_path, text + "\n")?;
    if let Some(p) = curves {
        write_curves(p, &report)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::Gen { config, out } => run_gen(config, out),
        Command::Train(a) => run_train(a),
        Command::Predict { model, data, out } => run_predict(model, data, out),
        Command::Eval {
            model,
            data,
            report,
            curves,
        } => run_eval(model, data, report, curves.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
