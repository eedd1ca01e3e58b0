use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nwn_core::encoding::{encode_trajectory, write_encoded, EncodeError, EncoderParams};
use nwn_core::ltl::{eval_finite_trace, induced_trace};
use nwn_core::nwn::parse_log;
use nwn_core::Label;
use nwn_harness::cases::{CaseName, CaseSpec};
use nwn_harness::dataset::{build_dataset, case_of, Dataset, DatasetError, SplitName};
use nwn_harness::experiment::{
    evaluate_checkpoint, format_table, load_checkpoint, run_ablation, run_case, save_run, write_report_csv, ExperimentConfig,
    ExperimentError, Labels, ReportRow, DATA_DIR,
};
use nwn_model::Variant;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "nwn", version, about = "Normal and spurious multi-robot trajectories, and a transformer that tells them apart")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a balanced dataset of trajectory logs.
    Generate {
        #[arg(long)]
        case: CaseName,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode a generated dataset into action tokens.
    Encode {
        #[arg(long = "in")]
        input: PathBuf,
        /// Embedding tables as JSON; drawn from the dataset seed and written here if missing.
        #[arg(long)]
        params: PathBuf,
    },
    /// Generate a dataset and train a classifier on it.
    Train {
        #[arg(long)]
        case: CaseName,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
    },
    /// Train every requested variant on one dataset.
    Ablate {
        #[arg(long)]
        case: CaseName,
        /// `all` or a comma-separated list of variant tags.
        #[arg(long, default_value = "all")]
        variants: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds; the config seed when absent.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Print a trajectory log, its induced trace and the formula verdicts.
    Inspect {
        #[arg(long)]
        trajectory: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cmd: Command) -> Result<(), ExperimentError> {
    match cmd {
        Command::Generate { case, n, seed, out } => generate(case, n, seed, &out),
        Command::Encode { input, params } => encode(&input, &params),
        Command::Train { case, config } => train_case(case, config.as_deref()),
        Command::Eval { checkpoint, split } => eval(&checkpoint, split),
        Command::Ablate {
            case,
            variants,
            config,
            seeds,
        } => ablate(case, &variants, config.as_deref(), &seeds),
        Command::Inspect { trajectory } => inspect(&trajectory),
    }
}

fn read_config(path: Option<&Path>) -> Result<ExperimentConfig, ExperimentError> {
    match path {
        Some(p) => ExperimentConfig::from_toml(&fs::read_to_string(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn generate(case: CaseName, n: usize, seed: u64, out: &Path) -> Result<(), ExperimentError> {
    let spec = case.load()?;
    let ds = build_dataset(&spec, n, seed)?;
    ds.save(out, &spec)?;
    let m = &ds.manifest;
    println!(
        "{case}: {} normal, {} spurious ({} relabeled, {} discarded, {} attempts)",
        m.normal, m.spurious, m.relabeled, m.discarded, m.attempts
    );
    println!("splits {}/{}/{}, t_max {:.3} s", m.train.len(), m.val.len(), m.test.len(), m.t_max);
    println!("digest {}", m.digest);
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    team: usize,
    places: usize,
    n_reg: usize,
    t_max: f64,
    w_id: Vec<f64>,
    w_place: Vec<f64>,
}

fn encode(dir: &Path, params_path: &Path) -> Result<(), ExperimentError> {
    let spec = case_of(dir)?.load()?;
    let ds = Dataset::load(dir, &spec)?;
    let params = if params_path.exists() {
        let file: ParamsFile = serde_json::from_str(&fs::read_to_string(params_path)?).map_err(DatasetError::from)?;
        check_params(&file, &spec, &ds)?;
        EncoderParams {
            w_id: file.w_id,
            w_place: file.w_place,
            team: file.team,
            places: file.places,
            n_reg: file.n_reg,
            t_max: file.t_max,
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(ds.manifest.seed);
        rng.set_stream(u64::MAX - 1);
        let p = EncoderParams::random(spec.team(), spec.places(), spec.n_reg(), ds.manifest.t_max, &mut rng)?;
        let file = ParamsFile {
            team: p.team,
            places: p.places,
            n_reg: p.n_reg,
            t_max: p.t_max,
            w_id: p.w_id.clone(),
            w_place: p.w_place.clone(),
        };
        fs::write(params_path, serde_json::to_string(&file).map_err(DatasetError::from)? + "\n")?;
        p
    };
    let items = ds
        .trajectories
        .iter()
        .map(|t| encode_trajectory(t, &params))
        .collect::<Result<Vec<_>, _>>()?;
    let out = dir.join("encoded.bin");
    let mut w = io::BufWriter::new(fs::File::create(&out)?);
    write_encoded(&mut w, &items, spec.n_reg(), params.t_max, ds.manifest.seed)?;
    w.flush()?;
    let tokens: usize = items.iter().map(|e| e.len).sum();
    println!(
        "{} trajectories, {tokens} tokens of dimension {} -> {}",
        items.len(),
        params.token_dim(),
        out.display()
    );
    Ok(())
}

fn check_params(file: &ParamsFile, spec: &CaseSpec, ds: &Dataset) -> Result<(), ExperimentError> {
    let expect = (spec.team(), spec.places(), spec.n_reg());
    if (file.team, file.places, file.n_reg) != expect {
        return Err(ExperimentError::Config(format!(
            "params are for {} robots, {} places, {} atoms; the dataset needs {expect:?}",
            file.team, file.places, file.n_reg
        )));
    }
    if file.t_max != ds.manifest.t_max {
        return Err(ExperimentError::Config(format!(
            "params t_max {} differs from the dataset's {}",
            file.t_max, ds.manifest.t_max
        )));
    }
    if file.w_id.len() != file.team * 32 || file.w_place.len() != file.places * 32 {
        return Err(ExperimentError::Encode(EncodeError::Format("embedding tables have the wrong size".into())));
    }
    Ok(())
}

fn train_case(case: CaseName, config: Option<&Path>) -> Result<(), ExperimentError> {
    let cfg = read_config(config)?;
    let out = cfg.out_dir(case);
    let spec = case.load()?;
    let ds = build_dataset(&spec, cfg.n, cfg.seed)?;
    ds.save(&out.join(DATA_DIR), &spec)?;
    let tc = cfg.training();
    let run = run_case(&spec, &ds, &tc, Labels::True)?;
    save_run(&out, &spec, &ds, &tc, &run)?;
    for e in &run.outcome.log {
        println!(
            "epoch {:3}  train {:.4}  val {:.4}  val acc {:.3}",
            e.epoch, e.train_loss, e.val_loss, e.val_accuracy
        );
    }
    println!("best epoch {}\n", run.outcome.best_epoch);
    let row = ReportRow::new(case, tc.variant, tc.seed, &run.confusion, &ds.manifest.test_digest);
    print!("{}", format_table(&[row]));
    println!("\nwrote {}", out.display());
    Ok(())
}

fn eval(checkpoint: &Path, split: SplitName) -> Result<(), ExperimentError> {
    let loaded = load_checkpoint(checkpoint)?;
    let c = evaluate_checkpoint(&loaded, split)?;
    let row = ReportRow::new(
        loaded.spec.name,
        loaded.header.variant,
        loaded.header.seed,
        &c,
        &loaded.dataset.manifest.test_digest,
    );
    print!("{}", format_table(std::slice::from_ref(&row)));
    let name = format!("eval_{}.csv", split_tag(split));
    let path = checkpoint.parent().unwrap_or(Path::new(".")).join(name);
    write_report_csv(fs::File::create(&path)?, &[row])?;
    println!("\nwrote {}", path.display());
    Ok(())
}

fn split_tag(s: SplitName) -> &'static str {
    match s {
        SplitName::Train => "train",
        SplitName::Val => "val",
        SplitName::Test => "test",
    }
}

fn parse_variants(text: &str) -> Result<Vec<Variant>, ExperimentError> {
    if text == "all" {
        return Ok(Variant::ALL.to_vec());
    }
    text.split(',')
        .map(|t| t.trim().parse::<Variant>().map_err(|e| ExperimentError::Config(e.to_string())))
        .collect()
}

fn ablate(case: CaseName, variants: &str, config: Option<&Path>, seeds: &[u64]) -> Result<(), ExperimentError> {
    let variants = parse_variants(variants)?;
    let cfg = read_config(config)?;
    let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds.to_vec() };
    let spec = case.load()?;
    let mut rows = Vec::new();
    for &seed in &seeds {
        let ds = build_dataset(&spec, cfg.n, seed)?;
        let tc = nwn_model::TrainConfig { seed, ..cfg.train.clone() };
        for run in run_ablation(&spec, &ds, &tc, &variants)? {
            let row = ReportRow::new(case, run.variant, seed, &run.confusion, &ds.manifest.test_digest);
            eprintln!("{} seed {seed}: F1 {:.3}", run.variant.title(), row.f1);
            rows.push(row);
        }
    }
    print!("{}", format_table(&rows));
    let out = cfg.out_dir(case);
    fs::create_dir_all(&out)?;
    let path = out.join("ablation.csv");
    write_report_csv(fs::File::create(&path)?, &rows)?;
    println!("\nwrote {}", path.display());
    Ok(())
}

/// Case slug from a log's `# case=...` header.
fn log_case(text: &str) -> Option<CaseName> {
    text.lines()
        .filter_map(|l| l.trim().strip_prefix('#'))
        .flat_map(|h| h.split_whitespace())
        .find_map(|kv| kv.strip_prefix("case="))
        .and_then(|s| s.parse().ok())
}

fn inspect(path: &Path) -> Result<(), ExperimentError> {
    let text = fs::read_to_string(path)?;
    let case = log_case(&text).ok_or_else(|| ExperimentError::Config(format!("{}: no known case in header", path.display())))?;
    let spec = case.load()?;
    let traj = parse_log(&text, &spec.env).map_err(|source| DatasetError::Log {
        file: path.display().to_string(),
        source,
    })?;
    let env = &spec.env;
    let label = match traj.label {
        Label::Normal => "normal",
        Label::Spurious => "spurious",
    };
    println!("case {case}, labeled {label}, seed {}", traj.seed);
    println!("{:>4}  {:>7}  actions", "step", "seconds");
    for (k, step) in traj.steps.iter().enumerate() {
        let secs = step.iter().map(|a| a.duration).fold(0.0, f64::max);
        let acts: Vec<String> = step
            .iter()
            .map(|a| format!("r{} {}>{}", a.robot, env.place_name(a.start), env.place_name(a.end)))
            .collect();
        println!("{k:>4}  {secs:>7.3}  {}", acts.join(", "));
    }
    let trace = induced_trace(&traj, env).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let shown: Vec<String> = trace.as_slice().iter().map(|y| y.to_string()).collect();
    println!("trace: {}", shown.join(" "));
    let normal = eval_finite_trace(&spec.normal, trace.as_slice());
    println!("normal formula: {}", verdict(normal));
    if let Some(f) = &spec.spurious {
        println!("spurious formula: {}", verdict(eval_finite_trace(f, trace.as_slice())));
    }
    if spec.spurious.is_some() {
        let consistent = normal == (traj.label == Label::Normal);
        println!("label {} the normal formula", if consistent { "agrees with" } else { "disagrees with" });
    }
    Ok(())
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "satisfied"
    } else {
        "violated"
    }
}
