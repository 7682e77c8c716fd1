use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ht_core::checks;
use ht_core::forge::{generate_scenario, load_scenarios, save_scenarios, MapKind, NoiseMode, Scenario};
use ht_core::model::{Ablation, HtModel};
use ht_core::train::{
    ablate, evaluate, export_attention, noise_sweep, write_ablation_csv, write_noise_csv, RunManifest, TrainConfig,
    MANIFEST_FILE, NOISE_LEVELS,
};

const SCENARIO_FILE: &str = "scenarios.jsonl";

#[derive(Parser)]
#[command(name = "ht", version, about = "Trajectory prediction and behavior decision on lane graphs")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Training configuration (TOML). Missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenarios.
    Gen {
        /// Map kind, or `mixed` to cycle through all of them.
        #[arg(long, default_value = "mixed")]
        map: String,
        #[arg(long, default_value_t = 10)]
        n: usize,
        /// Agents per scenario, ego included.
        #[arg(long, default_value_t = 5)]
        agents: usize,
    },
    /// Train a model and evaluate it, recording a run manifest.
    Train {
        /// Scenario file, or a directory holding scenarios.jsonl.
        #[arg(long, required_unless_present = "manifest")]
        data: Option<PathBuf>,
        /// Evaluation scenarios; the training set is used when absent.
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Re-run a recorded manifest instead of building one.
        #[arg(long, conflicts_with_all = ["data", "eval"])]
        manifest: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        ablation: Option<Ablation>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Sparse versus vanilla attention under history noise.
    NoiseSweep {
        #[arg(long)]
        sparse: PathBuf,
        #[arg(long)]
        vanilla: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Gaussian)]
        mode: Mode,
        #[arg(long, default_value_t = 5)]
        trials: usize,
    },
    /// Train every ablation variant and tabulate its metrics.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Lane attention of one scenario as CSV and SVG.
    ExportAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Scenario index within the file.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Agent whose weights color the SVG.
        #[arg(long, default_value_t = 0)]
        agent: usize,
    },
    /// Finite-difference gradient checks of every layer and loss.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        coords: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// KL, entropy and sparse/full attention property suites.
    PropCheck {
        #[arg(long, default_value_t = 1000)]
        draws: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Gaussian,
    Loss,
}

impl From<Mode> for NoiseMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Gaussian => NoiseMode::Gaussian,
            Mode::Loss => NoiseMode::Loss,
        }
    }
}

fn scenario_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(SCENARIO_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_data(p: &Path) -> Result<Vec<Scenario>> {
    let path = scenario_path(p);
    let data = load_scenarios(&path).with_context(|| format!("reading {}", path.display()))?;
    if data.is_empty() {
        bail!("{} holds no scenarios", path.display());
    }
    Ok(data)
}

fn load_model(p: &Path) -> Result<HtModel> {
    HtModel::load(p).with_context(|| format!("loading checkpoint {}", p.display()))
}

fn output_dir(g: &Global, default: &str) -> Result<PathBuf> {
    let dir = g.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn train_config(g: &Global) -> Result<TrainConfig> {
    let mut cfg = match &g.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Gen { map, n, agents } => {
            let kinds: Vec<MapKind> = if map == "mixed" {
                MapKind::ALL.to_vec()
            } else {
                vec![map.parse().map_err(anyhow::Error::msg)?]
            };
            let seed = g.seed.unwrap_or(0);
            let data = (0..n)
                .map(|i| generate_scenario(kinds[i % kinds.len()], agents, seed.wrapping_add(i as u64)))
                .collect::<Result<Vec<_>, _>>()?;
            let dir = output_dir(g, "data")?;
            let path = dir.join(SCENARIO_FILE);
            save_scenarios(&path, &data)?;
            println!("wrote {} scenarios to {}", data.len(), path.display());
        }
        Command::Train {
            data,
            eval,
            manifest,
            steps,
            ablation,
        } => {
            let mut m = match (manifest, data) {
                (Some(p), _) => RunManifest::load(&p).with_context(|| format!("reading {}", p.display()))?,
                (None, Some(d)) => {
                    let mut cfg = train_config(g)?;
                    if let Some(s) = steps {
                        cfg.steps = s;
                    }
                    if let Some(a) = ablation {
                        cfg.model.ablation = a;
                    }
                    let ev = eval.as_deref().map(scenario_path);
                    RunManifest::new(cfg, &scenario_path(&d), ev.as_deref())?
                }
                (None, None) => bail!("--data or --manifest is required"),
            };
            if let Some(s) = g.seed {
                m.seed = s;
                m.config.seed = s;
            }
            let dir = output_dir(g, "runs/train")?;
            let (_, ev) = m.run(&dir)?;
            print!("{}", ev.metrics.summary());
            println!("run recorded in {}", dir.join(MANIFEST_FILE).display());
        }
        Command::Eval { checkpoint, data } => {
            let cfg = train_config(g)?;
            let model = load_model(&checkpoint)?;
            let ev = evaluate(&model, &load_data(&data)?, cfg.lane_threshold)?;
            let dir = output_dir(g, "runs/eval")?;
            let mut csv = Vec::new();
            ev.metrics.write_csv(&mut csv)?;
            write_file(&dir.join("metrics.csv"), csv)?;
            let summary = ev.metrics.summary();
            write_file(&dir.join("summary.txt"), &summary)?;
            print!("{summary}");
        }
        Command::NoiseSweep {
            sparse,
            vanilla,
            data,
            mode,
            trials,
        } => {
            let s = load_model(&sparse)?;
            let v = load_model(&vanilla)?;
            let scenes = load_data(&data)?;
            let seed = g.seed.unwrap_or(0);
            let cells = noise_sweep(&[("sparse", &s), ("vanilla", &v)], &scenes, &NOISE_LEVELS, mode.into(), trials, seed)?;
            let dir = output_dir(g, "runs/noise")?;
            let mut csv = Vec::new();
            write_noise_csv(&mut csv, &cells)?;
            write_file(&dir.join("noise.csv"), &csv)?;
            print!("{}", String::from_utf8_lossy(&csv));
        }
        Command::Ablate { data, eval, steps } => {
            let mut cfg = train_config(g)?;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let train_set = load_data(&data)?;
            let eval_set = match &eval {
                Some(e) => load_data(e)?,
                None => train_set.clone(),
            };
            let rows = ablate(&train_set, &eval_set, &cfg)?;
            let dir = output_dir(g, "runs/ablate")?;
            let mut csv = Vec::new();
            write_ablation_csv(&mut csv, &rows)?;
            write_file(&dir.join("ablation.csv"), &csv)?;
            print!("{}", String::from_utf8_lossy(&csv));
        }
        Command::ExportAttn {
            checkpoint,
            data,
            index,
            agent,
        } => {
            let model = load_model(&checkpoint)?;
            let scenes = load_data(&data)?;
            let sc = scenes
                .get(index)
                .with_context(|| format!("scenario {index} out of {}", scenes.len()))?;
            let ex = export_attention(&model, sc, agent)?;
            let dir = output_dir(g, "runs/attention")?;
            write_file(&dir.join("attention.csv"), &ex.csv)?;
            write_file(&dir.join("attention.svg"), &ex.svg)?;
            println!("wrote attention.csv and attention.svg to {}", dir.display());
        }
        Command::GradCheck { coords, step, tolerance } => {
            let reps = checks::gradient_suite(coords, step, g.seed.unwrap_or(0))?;
            let mut report = String::from("check,coords,max_rel_error,status\n");
            let mut failed = 0;
            for (name, r) in &reps {
                let ok = r.passes(tolerance);
                failed += usize::from(!ok);
                report.push_str(&format!(
                    "{name},{},{:.3e},{}\n",
                    r.coords_checked,
                    r.max_rel_error,
                    if ok { "pass" } else { "FAIL" }
                ));
            }
            print!("{report}");
            if let Some(dir) = &g.out {
                fs::create_dir_all(dir)?;
                write_file(&dir.join("grad_check.csv"), &report)?;
            }
            if failed > 0 {
                bail!("{failed} gradient checks above tolerance {tolerance}");
            }
        }
        Command::PropCheck { draws } => {
            let seed = g.seed.unwrap_or(0);
            let mut reps = checks::kl_suite(draws, seed);
            reps.extend(checks::entropy_suite(draws, seed));
            reps.push(checks::sparse_full_equivalence(100, 20, 128, seed));
            let mut report = String::new();
            for r in &reps {
                report.push_str(&format!("{}: {}/{} passed (worst {:.3e})\n", r.name, r.passed, r.total, r.worst));
            }
            print!("{report}");
            if let Some(dir) = &g.out {
                fs::create_dir_all(dir)?;
                write_file(&dir.join("prop_check.txt"), &report)?;
            }
            let failed = reps.iter().filter(|r| !r.ok()).count();
            if failed > 0 {
                bail!("{failed} property suites failed");
            }
        }
    }
    std::io::stdout().flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
