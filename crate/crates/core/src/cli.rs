//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage or config error,
//! 3 verification failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::codec::{direct_encode, event_bin, parse_event_csv};
use crate::config::{require_file, ExperimentConfig, InputKind, OutputFormat};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::io;
use crate::metrics::{count_flops, lfsi_layer, MetricsReport};
use crate::network::build_network;
use crate::nn::{Ctx, Mode};
use crate::tensor::{RealTensor, Shape};
use crate::train::train_toy;
use crate::verify::run_checks;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "SPIKEDET_THREADS";

#[derive(Parser, Debug)]
#[command(name = "spikelab", version, about = "Integer spiking network laboratory")]
pub struct Cli {
    /// TOML experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Format of the summary printed to stdout.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Forward pass with firing, saturation and energy report.
    Simulate,
    /// Train on a synthetic task; writes the model and history.
    Train,
    /// Monte Carlo checks of the block algebra.
    Verify(VerifyArgs),
    /// Encode an event CSV or a PNG image into a tensor file.
    Encode,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Check to run; repeat for several. Defaults to the config list.
    #[arg(long = "check")]
    pub checks: Vec<String>,
    /// Use positive constant weights in the decorrelation check.
    #[arg(long)]
    pub negative_control: bool,
}

/// Outcome of a command that ran to completion.
struct Outcome {
    summary: String,
    code: i32,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    match execute(&cli) {
        Ok(out) => {
            use std::io::Write;
            // A closed stdout (for example `| head`) is not an error.
            let _ = writeln!(std::io::stdout(), "{}", out.summary);
            out.code
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Argument(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // A pool may already exist when called twice in one process; the first
    // setting stands.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output.dir = o.clone();
    }
    if let Some(f) = cli.format {
        cfg.output.format = match f {
            Format::Json => OutputFormat::Json,
            Format::Csv => OutputFormat::Csv,
        };
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<Outcome> {
    let mut cfg = load_config(cli)?;
    if let Command::Verify(a) = &cli.command {
        if !a.checks.is_empty() {
            cfg.verify.checks = a.checks.clone();
        }
        cfg.verify.negative_control |= a.negative_control;
    }
    let dir = cfg.output.dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    match &cli.command {
        Command::Simulate => simulate(&cfg, &dir),
        Command::Train => train(&cfg, &dir),
        Command::Verify(_) => verify(&cfg, &dir),
        Command::Encode => encode(&cfg, &dir),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))
}

/// Grayscale PNG as a single-step `(1, 1, 1, H, W)` tensor in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<RealTensor> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    RealTensor::from_vec(Shape::new(1, 1, h as usize, w as usize), data)
}

fn is_png(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

#[derive(Serialize)]
struct LfsiPoint {
    window: usize,
    lfsi: f64,
}

#[derive(Serialize)]
struct SimulateSummary<'a> {
    network: &'a str,
    input_shape: [usize; 5],
    #[serde(flatten)]
    report: &'a MetricsReport,
    lfsi_sweep: Vec<LfsiPoint>,
}

fn simulate(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let windows = cfg.lfsi_windows()?;
    let (net, mut store) = match &cfg.simulate.model {
        Some(m) => {
            require_file(m, "simulate.model")?;
            io::load_model(m)?
        }
        None => build_network(&cfg.network_spec()?, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?,
    };
    let spec = &net.spec;
    let s = &cfg.simulate;
    let x = match &s.input {
        Some(p) => {
            require_file(p, "simulate.input")?;
            if is_png(p) {
                load_png(p)?
            } else {
                io::load_tensor(p)?
            }
        }
        None => {
            if s.batch == 0 || s.input_size.contains(&0) {
                return Err(Error::Config("simulate.batch and input_size must be positive".into()));
            }
            let shape = Shape::batched(1, s.batch, spec.in_channels, s.input_size[0], s.input_size[1]);
            match s.input_kind {
                InputKind::Zeros => RealTensor::zeros(shape),
                InputKind::Random => {
                    use rand::Rng;
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    rng.set_stream(1);
                    let data = (0..shape.numel())
                        .map(|_| s.sigma * rng.sample::<f64, _>(rand_distr::StandardNormal))
                        .collect();
                    RealTensor::from_vec(shape, data)?
                }
            }
        }
    };
    let x = if x.shape().t == 1 && spec.t_steps > 1 {
        direct_encode(&x, spec.t_steps)?
    } else {
        x
    };
    let input_shape = x.shape();
    let mut g = Graph::new();
    {
        let mut cx = Ctx::new(&mut g, &mut store, Mode::eval())?;
        let xv = cx.g.input(x);
        net.forward(&mut cx, xv)?;
    }
    let flops = count_flops(spec, input_shape)?;
    let mut report = MetricsReport::from_graph(&g, &windows[0], flops)?;
    report.config_hash = Some(cfg.hash());
    let tensors = g
        .spike_records()
        .iter()
        .map(|r| g.spike_tensor(r))
        .collect::<Result<Vec<_>>>()?;
    let lfsi_sweep = windows
        .iter()
        .map(|w| {
            let mut sum = 0.0;
            for t in &tensors {
                sum += lfsi_layer(t, w)?;
            }
            Ok(LfsiPoint {
                window: w.s,
                lfsi: sum / tensors.len() as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = json(&SimulateSummary {
        network: &spec.name,
        input_shape: input_shape.dims(),
        report: &report,
        lfsi_sweep,
    })?;
    let csv = report.to_csv()?;
    write(&dir.join("report.json"), &summary)?;
    write(&dir.join("report.csv"), &csv)?;
    Ok(Outcome {
        summary: match cfg.output.format {
            OutputFormat::Json => summary,
            OutputFormat::Csv => csv,
        },
        code: EXIT_OK,
    })
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    network: &'a str,
    parameters: usize,
    epochs: usize,
    final_loss: f64,
    final_acc: f64,
    final_lfsi: f64,
    final_firing_rate: f64,
    model: String,
    history: String,
    config_hash: String,
}

fn train(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let spec = cfg.network_spec()?;
    let tc = cfg.train_config()?;
    let trained = train_toy(&spec, cfg.train.task, &tc)?;
    let model = dir.join("model.sdl");
    let history = dir.join("history.csv");
    io::save_model(&model, &trained.net.spec, &trained.store)?;
    let csv = trained.history.to_csv()?;
    write(&history, &csv)?;
    let last = trained.history.last().expect("history has the initial row");
    let summary = json(&TrainSummary {
        network: &spec.name,
        parameters: trained.store.trainable_count(),
        epochs: tc.epochs,
        final_loss: last.loss,
        final_acc: last.acc,
        final_lfsi: last.lfsi,
        final_firing_rate: last.firing_rate,
        model: model.display().to_string(),
        history: history.display().to_string(),
        config_hash: cfg.hash(),
    })?;
    write(&dir.join("train.json"), &summary)?;
    Ok(Outcome {
        summary: match cfg.output.format {
            OutputFormat::Json => summary,
            OutputFormat::Csv => csv,
        },
        code: EXIT_OK,
    })
}

#[derive(Serialize)]
struct VerifySummary<'a> {
    #[serde(flatten)]
    report: &'a crate::verify::VerifyReport,
    config_hash: String,
}

fn verify(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let report = run_checks(&cfg.verify.checks, &cfg.verify_config())?;
    let summary = json(&VerifySummary {
        report: &report,
        config_hash: cfg.hash(),
    })?;
    let mut csv = String::from("check,pass\n");
    for c in &report.checks {
        csv.push_str(&format!("{},{}\n", c.name, c.pass));
    }
    write(&dir.join("verify.json"), &summary)?;
    write(&dir.join("verify.csv"), &csv)?;
    for c in report.checks.iter().filter(|c| !c.pass) {
        eprintln!("check {} failed", c.name);
    }
    Ok(Outcome {
        summary: match cfg.output.format {
            OutputFormat::Json => summary,
            OutputFormat::Csv => csv,
        },
        code: if report.pass { EXIT_OK } else { EXIT_VERIFY },
    })
}

#[derive(Serialize)]
struct EncodeSummary {
    output: String,
    shape: [usize; 5],
    sum: f64,
    events: Option<usize>,
    config_hash: String,
}

fn encode(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let e = &cfg.encode;
    let (x, events) = match (&e.events, &e.image) {
        (Some(p), None) => {
            require_file(p, "encode.events")?;
            let f = fs::File::open(p).map_err(|err| Error::io(p, err))?;
            let records = parse_event_csv(std::io::BufReader::new(f))?;
            (event_bin(&records, &e.encoding())?, Some(records.len()))
        }
        (None, Some(p)) => {
            require_file(p, "encode.image")?;
            (direct_encode(&load_png(p)?, e.t_steps)?, None)
        }
        _ => return Err(Error::Config("encode needs exactly one of events or image".into())),
    };
    let out = dir.join(&e.output);
    io::save_tensor(&out, &x)?;
    let s = EncodeSummary {
        output: out.display().to_string(),
        shape: x.shape().dims(),
        sum: x.sum(),
        events,
        config_hash: cfg.hash(),
    };
    let summary = match cfg.output.format {
        OutputFormat::Json => json(&s)?,
        OutputFormat::Csv => format!(
            "output,t,n,c,h,w,sum\n{},{},{},{},{},{},{}\n",
            s.output, s.shape[0], s.shape[1], s.shape[2], s.shape[3], s.shape[4], s.sum
        ),
    };
    Ok(Outcome { summary, code: EXIT_OK })
}
