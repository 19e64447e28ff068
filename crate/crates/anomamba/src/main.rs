//! Command-line front end: train, eval, infer, selftest, bench.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anomamba::config::RunConfig;
use anomamba::error::{io_err, Error, Result};
use anomamba::imagefmt::{self, Image, Pixels};
use anomamba::synth::{self, SynthSpec};
use anomamba::{bench, checks, report, trainer};
use anomamba_core::Tensor;
use clap::{Args, Parser, Subcommand};

struct StderrLogger;

impl log::Log for StderrLogger {
    fn enabled(&self, metadata: &log::Metadata) -> bool {
        metadata.level() <= log::max_level()
    }
    fn log(&self, record: &log::Record) {
        if self.enabled(record.metadata()) {
            eprintln!("[{}] {}", record.level().as_str().to_lowercase(), record.args());
        }
    }
    fn flush(&self) {}
}

static LOGGER: StderrLogger = StderrLogger;

#[derive(Parser)]
#[command(
    name = "anomamba",
    version,
    about = "Reconstruction-based anomaly detection with pyramidal state-space scans"
)]
struct Cli {
    /// Print progress details to stderr
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file; built-in defaults apply when omitted
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set epochs=50 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Restrict the run to a class (repeatable); overrides the config list
    #[arg(long = "class", value_name = "NAME")]
    class: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        for s in &self.set {
            cfg.apply(s)?;
        }
        if !self.class.is_empty() {
            cfg.classes = self.class.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train and write checkpoints plus a per-epoch loss log
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory for checkpoints, logs, and the resolved config
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint: per-class metrics plus a mean row
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint file, or the training output directory
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Report file to write
        #[arg(long, default_value = "out/report.json")]
        out: PathBuf,
    },
    /// Score an image or a directory of images
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint file, or the training output directory
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Directory for the anomaly maps
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also write each map as PNG
        #[arg(long)]
        png: bool,
        /// Image file or directory
        input: PathBuf,
    },
    /// Write a synthetic striped-texture dataset with defect masks
    Synth {
        /// Dataset root; the class tree is created under it
        #[arg(long, default_value = "data")]
        out: PathBuf,
        /// Class directory name
        #[arg(long, default_value = "stripes")]
        class: String,
        /// Image side length in pixels
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Defect-free training images
        #[arg(long, default_value_t = 8)]
        train: usize,
        /// Defect-free test images
        #[arg(long, default_value_t = 5)]
        test_good: usize,
        /// Defective test images, each with a ground-truth mask
        #[arg(long, default_value_t = 5)]
        test_defect: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the oracle and invariant suites; exits nonzero on any failure
    Selftest,
    /// Print throughput for the scan variants
    Bench,
}

fn collect_images(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files = Vec::new();
    let entries = std::fs::read_dir(input).map_err(|e| io_err(input, e))?;
    for entry in entries {
        let path = entry.map_err(|e| io_err(input, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        if path.is_file() && matches!(ext.as_str(), "ppm" | "pgm" | "png") {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no images under {}", input.display())));
    }
    Ok(files)
}

/// Rescales a map to bytes; the returned bounds let callers recover the
/// original values.
fn quantize(map: &Tensor) -> (Vec<u8>, f32, f32) {
    let lo = map.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let bytes = if span > 0.0 {
        map.data().iter().map(|v| ((v - lo) / span * 255.0).round() as u8).collect()
    } else {
        vec![0u8; map.numel()]
    };
    (bytes, lo, hi)
}

fn infer_command(
    cfg: &RunConfig,
    checkpoint: &Path,
    out: &Path,
    png: bool,
    input: &Path,
) -> Result<()> {
    if !cfg.multi_class && checkpoint.is_dir() && cfg.classes.is_empty() {
        return Err(Error::Config(
            "single-class mode with a checkpoint directory needs --class or a checkpoint file"
                .into(),
        ));
    }
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let class = cfg.classes.first().cloned().unwrap_or_default();
    let model = trainer::load_model(cfg, checkpoint, &class)?;
    for file in collect_images(input)? {
        let (score, map) = trainer::infer_file(cfg, &model, &file)?;
        let stem = file
            .file_stem()
            .ok_or_else(|| Error::Config(format!("no file name in {}", file.display())))?
            .to_string_lossy();
        let (h, w) = (map.shape()[0], map.shape()[1]);
        let (bytes, lo, hi) = quantize(&map);
        let pgm = out.join(format!("{stem}_amap.pgm"));
        imagefmt::save_pgm(&pgm, w, h, &bytes)?;
        if png {
            let img = Image { width: w, height: h, pixels: Pixels::Gray(bytes) };
            imagefmt::save_png(&out.join(format!("{stem}_amap.png")), &img)?;
        }
        let sidecar = out.join(format!("{stem}_amap.txt"));
        std::fs::write(&sidecar, format!("min {lo}\nmax {hi}\n"))
            .map_err(|e| io_err(&sidecar, e))?;
        println!("{} {score}", file.display());
    }
    Ok(())
}

fn selftest() -> ExitCode {
    let suites: [(&str, std::result::Result<(), String>); 7] = [
        ("scan equivalence", checks::scan_equivalence(20)),
        ("discretization", checks::discretization()),
        ("partition identities", checks::partition_identities(50)),
        ("gradient suite", checks::gradient_suite()),
        ("gradient css block", checks::gradient_css_block()),
        ("metric oracles", checks::metric_oracles(200)),
        ("overlap curve oracle", checks::aupro_oracle_check(25)),
    ];
    let mut failed = 0usize;
    for (name, result) in suites {
        match result {
            Ok(()) => println!("ok   {name}"),
            Err(e) => {
                failed += 1;
                println!("FAIL {name}: {e}");
            }
        }
    }
    if failed == 0 {
        println!("selftest passed");
        ExitCode::SUCCESS
    } else {
        println!("selftest: {failed} suite(s) failed");
        ExitCode::FAILURE
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { cfg, out } => {
            let cfg = cfg.resolve()?;
            for path in trainer::train(&cfg, &out)? {
                println!("{}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { cfg, checkpoint, out } => {
            let cfg = cfg.resolve()?;
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
                }
            }
            let results = trainer::evaluate(&cfg, &checkpoint, &out)?;
            print!("{}", report::render(&results));
            Ok(ExitCode::SUCCESS)
        }
        Command::Infer { cfg, checkpoint, out, png, input } => {
            let cfg = cfg.resolve()?;
            infer_command(&cfg, &checkpoint, &out, png, &input)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth { out, class, size, train, test_good, test_defect, seed } => {
            let spec = SynthSpec { size, train, test_good, test_defect, seed };
            synth::generate(&out, &class, &spec)?;
            println!("{}", out.join(&class).display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest => Ok(selftest()),
        Command::Bench => {
            print!("{}", bench::table(false));
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let _ = log::set_logger(&LOGGER);
    log::set_max_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn });
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
