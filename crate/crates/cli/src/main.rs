//! `turbo-sim`: generate toy collider data, train a Turbo-Sim model,
//! sample from it, evaluate it, and run the mutual-information diagnostic.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical
//! abort during training, 4 I/O or file-format error.

// Range checks are written `!(x > 0.0)` so that NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use turbo_sim::collider::generate_dataset;
use turbo_sim::dataio::{import_csv, read_dataset, write_dataset, DataError};
use turbo_sim::evalx::{evaluate_model, summary_table, EvalError};
use turbo_sim::turbo::{mi_demo, train, Checkpoint, TurboError, TurboModel, TERM_NAMES};
use turbo_sim::binio::FormatError;
use turbo_sim::Standardizer;

use config::{ConfigError, RunConfig};

/// `println!` that tolerates a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(name = "turbo-sim", version, about = "Turbo-Sim: bidirectional simulation with adversarial autoencoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate paired truth/detector events into a TSDS file.
    GenData {
        #[arg(long)]
        events: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Build a TSDS file from two delimited-text files with header rows.
    Import {
        #[arg(long)]
        z: PathBuf,
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train encoder, decoder and critics; writes CKPT and CKPT.log.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw samples: direction x decodes truth z, direction z encodes x.
    Sample {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        direction: Direction,
        /// Number of leading records to use (default: all).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// KS distances, histograms and mass reconstruction against held-out data.
    Evaluate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Comma-separated observables (default: all).
        #[arg(long, value_delimiter = ',')]
        observables: Vec<String>,
        /// Also write an SVG overlay per observable.
        #[arg(long)]
        svg: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fit linear-Gaussian mappers on correlated Gaussians and print the
    /// four mutual-information bounds next to the exact value.
    MiDemo {
        #[arg(long, allow_hyphen_values = true)]
        rho: f64,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Direction {
    X,
    Z,
}

enum CliError {
    Usage(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) | CliError::Io(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Usage(format!("config: {e}")),
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. }
            | DataError::Format(_)
            | DataError::Csv { .. }
            | DataError::NonNumeric { .. }
            | DataError::RaggedRow { .. } => CliError::Io(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<TurboError> for CliError {
    fn from(e: TurboError) -> Self {
        match e {
            TurboError::Data(d) => d.into(),
            TurboError::Format(f) => f.into(),
            TurboError::Nnet(turbo_sim::nnet::NnetError::Format(f)) => f.into(),
            TurboError::Diverged { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Turbo(t) => t.into(),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

/// Flag, then config `seed`, then `TURBO_SEED`, then 0.
fn resolve_seed(flag: Option<u64>, cfg: &RunConfig) -> Result<u64> {
    if let Some(s) = flag.or(cfg.seed) {
        return Ok(s);
    }
    match std::env::var("TURBO_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("TURBO_SEED must be a non-negative integer, got {v:?}"))),
        Err(_) => Ok(0),
    }
}

/// Flag, then `paths.<key>` from the config.
fn resolve_path(flag: Option<PathBuf>, cfg: &RunConfig, key: &str, flag_name: &str) -> Result<PathBuf> {
    flag.or_else(|| cfg.paths.get(key).cloned())
        .ok_or_else(|| CliError::Usage(format!("missing --{flag_name} (or paths.{key} in the config)")))
}

fn log_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".log");
    PathBuf::from(s)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            events,
            seed,
            out,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            if events == 0 {
                return Err(CliError::Usage("--events must be at least 1".into()));
            }
            let seed = resolve_seed(seed, &cfg)?;
            let out = resolve_path(out, &cfg, "out", "out")?;
            let d = generate_dataset(events as usize, seed, &cfg.gen, &cfg.det)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            write_dataset(&d, &out)?;
            say!(
                "wrote {} events to {} (z width {}, x width {}, seed {seed})",
                d.len(),
                out.display(),
                d.z_width(),
                d.x_width()
            );
        }
        Command::Import { z, x, out } => {
            let d = import_csv(&z, &x)?;
            write_dataset(&d, &out)?;
            say!(
                "wrote {} records to {} (z width {}, x width {})",
                d.len(),
                out.display(),
                d.z_width(),
                d.x_width()
            );
        }
        Command::Train {
            data,
            config,
            out,
            resume,
            epochs,
            seed,
        } => {
            let cfg = load_config(config.as_deref())?;
            let seed = resolve_seed(seed, &cfg)?;
            let data = read_dataset(&resolve_path(data, &cfg, "data", "data")?)?;
            let out = resolve_path(out, &cfg, "model", "out")?;
            let mut schedule = cfg.schedule(seed);
            if let Some(e) = epochs {
                schedule.epochs = e;
            }
            let mut ck = match resume {
                Some(p) => Checkpoint::load(&p)?,
                None => {
                    let std = Standardizer::fit(&data)?;
                    let model = TurboModel::new(data.z_width(), data.x_width(), &cfg.model_config(seed), cfg.weights, std)?;
                    Checkpoint::new(model, schedule.generator_adam, schedule.critic_adam)
                }
            };
            let log = log_path(&out);
            let mut log_file = fs::File::create(&log).map_err(|e| io_err(&log, e))?;
            let header = format!("epoch\t{}\ttotal\tseconds", TERM_NAMES.join("\t"));
            say!("{header}");
            writeln!(log_file, "{header}").map_err(|e| io_err(&log, e))?;
            let mut write_err = None;
            let result = train(&mut ck, &data, &schedule, |rec| {
                say!("{rec}");
                if let Err(e) = writeln!(log_file, "{rec}") {
                    write_err.get_or_insert(e);
                }
            });
            if let Some(e) = write_err {
                return Err(io_err(&log, e));
            }
            match result {
                Ok(_) => {
                    ck.save(&out)?;
                    say!("wrote checkpoint {} (epoch {})", out.display(), ck.epoch);
                }
                Err(TurboError::Diverged {
                    epoch,
                    batch,
                    reason,
                    last_good,
                }) => {
                    last_good.save(&out)?;
                    let msg = format!(
                        "training diverged at epoch {epoch}, batch {batch}: {reason}; kept last good checkpoint (epoch {}) at {}",
                        last_good.epoch,
                        out.display()
                    );
                    let _ = writeln!(log_file, "# {msg}");
                    return Err(CliError::Numerical(msg));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Command::Sample {
            model,
            data,
            direction,
            n,
            out,
            seed,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let seed = resolve_seed(seed, &cfg)?;
            let ck = Checkpoint::load(&resolve_path(model, &cfg, "model", "model")?)?;
            let data = read_dataset(&resolve_path(data, &cfg, "data", "data")?)?;
            let out = resolve_path(out, &cfg, "out", "out")?;
            let m = &ck.model;
            if data.z_width() != m.z_width() || data.x_width() != m.x_width() {
                return Err(CliError::Usage(format!(
                    "checkpoint expects z/x widths {}/{}, dataset has {}/{}",
                    m.z_width(),
                    m.x_width(),
                    data.z_width(),
                    data.x_width()
                )));
            }
            let n = n.unwrap_or(data.len());
            if n == 0 || n > data.len() {
                return Err(CliError::Usage(format!("--n must lie in 1..={}, got {n}", data.len())));
            }
            let head = data.head(n);
            let (names, values) = match direction {
                Direction::X => (head.x_names(), m.sample_x(head.z(), seed)?),
                Direction::Z => (head.z_names(), m.sample_z(head.x(), seed)?),
            };
            fs::write(&out, to_tsv(names, &values)).map_err(|e| io_err(&out, e))?;
            say!("wrote {n} samples of width {} to {}", names.len(), out.display());
        }
        Command::Evaluate {
            model,
            data,
            report,
            observables,
            svg,
            seed,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let seed = match seed.or(cfg.eval_seed) {
                Some(s) => s,
                None => resolve_seed(None, &cfg)?,
            };
            let ck = Checkpoint::load(&resolve_path(model, &cfg, "model", "model")?)?;
            let data = read_dataset(&resolve_path(data, &cfg, "data", "data")?)?;
            let dir = resolve_path(report, &cfg, "report", "report")?;
            let observables = if observables.is_empty() { cfg.observables.clone() } else { observables };
            let eval = evaluate_model(&ck.model, &data, &observables, &cfg.chi, cfg.bins, seed)?;
            write_report(&dir, &eval, svg || cfg.svg)?;
            let summary = summary_table(&eval);
            let _ = write!(std::io::stdout(), "{summary}");
            say!("report written to {}", dir.display());
        }
        Command::MiDemo { rho, steps, seed } => {
            if !(rho.abs() < 1.0) {
                return Err(CliError::Usage(format!("--rho must satisfy |rho| < 1, got {rho}")));
            }
            let seed = resolve_seed(seed, &RunConfig::default())?;
            let demo = mi_demo(rho, steps, seed)?;
            say!("rho\t{rho}");
            say!("analytic_mi\t{:.4}\tnats", demo.analytic);
            say!("bound\testimate\tstderr\tsamples");
            for (dir, b) in &demo.bounds {
                say!("{}\t{:.4}\t{:.4}\t{}", dir.name(), b.mean, b.stderr, b.samples);
            }
        }
    }
    Ok(())
}

fn to_tsv(names: &[String], values: &[f64]) -> String {
    let mut s = names.join("\t");
    s.push('\n');
    for row in values.chunks_exact(names.len()) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                s.push('\t');
            }
            let _ = write!(s, "{v}");
        }
        s.push('\n');
    }
    s
}

fn write_report(dir: &Path, eval: &turbo_sim::evalx::Evaluation, svg: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let put = |name: String, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| io_err(&p, e))
    };
    put("ks.tsv".into(), eval.ks.to_tsv())?;
    put("summary.txt".into(), summary_table(eval))?;
    for h in &eval.histograms {
        put(format!("hist_{}.tsv", h.observable), h.to_tsv())?;
        if svg {
            put(format!("hist_{}.svg", h.observable), h.to_svg())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = std::io::stdout().flush();
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
