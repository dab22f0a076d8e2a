//! Batch driver for the grasp pipeline: dataset generation, training, grasp
//! detection on stored volumes, the clutter-removal benchmark, and artifact
//! statistics.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use voxgrasp_core::bench::{self, BenchmarkReport, Scenario, SelectPolicy};
use voxgrasp_core::config::Config;
use voxgrasp_core::dataset::{self, grasp_angle_histogram, HISTOGRAM_BINS};
use voxgrasp_core::detect;
use voxgrasp_core::fsutil;
use voxgrasp_core::neural::{load_checkpoint, save_checkpoint, write_loss_csv, Trainer};
use voxgrasp_core::volume::TsdfVolume;

#[derive(Parser)]
#[command(name = "voxgrasp", version, about = "Volumetric grasp pipeline driver")]
struct Cli {
    /// Pipeline configuration JSON; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; rederives every stage seed and overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data-parallel stages; defaults to VOXGRASP_JOBS
    /// or all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled grasp dataset into a directory.
    GenData(GenDataArgs),
    /// Train the network on a generated dataset.
    Train(TrainArgs),
    /// Detect grasps in a stored TSDF volume with a trained checkpoint.
    Detect(DetectArgs),
    /// Run the simulated clutter-removal benchmark.
    Bench(BenchArgs),
    /// Summarize a dataset directory or a benchmark report.
    Stats(StatsArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for records, volumes, scenes, manifest, histogram.
    #[arg(long)]
    out: PathBuf,
    /// Override the configured scene count.
    #[arg(long)]
    scenes: Option<usize>,
    /// Override surface samples per scene.
    #[arg(long)]
    points: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by gen-data.
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    /// Continue from an existing checkpoint instead of a fresh model.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the configured epoch count.
    #[arg(long)]
    epochs: Option<u32>,
    /// Override the configured batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Override the configured learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Loss curve CSV path; defaults to the checkpoint path with .loss.csv.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    /// Trained checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Fused TSDF volume file.
    #[arg(long)]
    volume: PathBuf,
    /// Write detection JSON lines here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the configured quality threshold.
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    /// Trained checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Report basename; writes .json, .csv, .rounds.jsonl (and .svg with --plot).
    #[arg(long)]
    out: PathBuf,
    /// Override the configured round count.
    #[arg(long)]
    rounds: Option<usize>,
    /// Override objects per scene.
    #[arg(long)]
    m: Option<usize>,
    /// Scenario: blocks, pile, or packed.
    #[arg(long)]
    scenario: Option<String>,
    /// Override the quality threshold.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Selection policy: random_above_eps, max_quality, or highest_z.
    #[arg(long)]
    policy: Option<String>,
    /// Also emit a static SVG bar chart of the headline metrics.
    #[arg(long)]
    plot: bool,
}

#[derive(Args)]
struct StatsArgs {
    /// Dataset directory to summarize.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Benchmark report JSON to summarize.
    #[arg(long)]
    report: Option<PathBuf>,
}

const USAGE: u8 = 2;
const RUNTIME: u8 = 3;

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Failure {
        Failure {
            code: USAGE,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Failure {
        Failure {
            code: RUNTIME,
            message: message.into(),
        }
    }
}

/// Maps stage errors to exit codes: failures while loading or validating
/// inputs are usage errors, failures mid-pipeline are runtime errors.
trait StageExt<T> {
    fn usage(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T> StageExt<T> for voxgrasp_core::Result<T> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::usage(e.to_string()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::runtime(e.to_string()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    init_jobs(cli.jobs)?;
    let config = load_config(cli.config.as_deref(), cli.seed)?;
    match &cli.command {
        Command::GenData(args) => cmd_gen_data(config, args),
        Command::Train(args) => cmd_train(config, args),
        Command::Detect(args) => cmd_detect(config, args),
        Command::Bench(args) => cmd_bench(config, args),
        Command::Stats(args) => cmd_stats(args),
    }
}

fn init_jobs(flag: Option<usize>) -> Result<(), Failure> {
    let jobs = match flag {
        Some(n) => Some(n),
        None => match std::env::var("VOXGRASP_JOBS") {
            Ok(text) => Some(text.parse::<usize>().map_err(|_| {
                Failure::usage(format!("VOXGRASP_JOBS must be a thread count, got {text:?}"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = jobs {
        if n == 0 {
            return Err(Failure::usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<Config, Failure> {
    let mut config = match path {
        Some(p) => Config::load(p).usage()?,
        None => Config::default(),
    };
    if let Some(s) = seed {
        config.reseed(s);
    }
    Ok(config)
}

fn cmd_gen_data(config: Config, args: &GenDataArgs) -> Result<(), Failure> {
    let mut resolved = config;
    if let Some(s) = args.scenes {
        resolved.dataset.scene_count = s;
    }
    if let Some(p) = args.points {
        resolved.dataset.surface_points = p;
    }
    resolved.validate().usage()?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Failure::usage(format!("cannot create {}: {e}", args.out.display())))?;

    let dataset = dataset::build_dataset(&resolved.dataset).runtime()?;
    dataset::save_dataset(&args.out, &dataset).runtime()?;
    resolved.save(&args.out.join("config.json")).runtime()?;
    if dataset.records.iter().any(|r| r.is_positive()) {
        let hist = grasp_angle_histogram(&dataset.records).runtime()?;
        write_histogram_csv(&args.out.join("angle_histogram.csv"), &hist)?;
    } else {
        eprintln!("no positive records; angle histogram skipped");
    }

    let m = &dataset.manifest;
    println!("scenes {} (skipped {})", dataset.volumes.len(), dataset.skipped_scenes);
    println!("records {} ({} positive, {} negative)", m.record_count, m.positives, m.negatives);
    println!("wrote {}", args.out.display());
    Ok(())
}

fn write_histogram_csv(path: &Path, hist: &[u64; HISTOGRAM_BINS]) -> Result<(), Failure> {
    fsutil::atomic_write(path, |w| {
        for (i, count) in hist.iter().enumerate() {
            let lo = i as f64 * 180.0 / HISTOGRAM_BINS as f64;
            let hi = (i + 1) as f64 * 180.0 / HISTOGRAM_BINS as f64;
            writeln!(w, "{lo},{hi},{count}")?;
        }
        Ok(())
    })
    .runtime()
}

fn cmd_train(config: Config, args: &TrainArgs) -> Result<(), Failure> {
    let mut resolved = config;
    if let Some(e) = args.epochs {
        resolved.train.epochs = e;
    }
    if let Some(b) = args.batch_size {
        resolved.train.batch_size = b;
    }
    if let Some(lr) = args.learning_rate {
        resolved.train.learning_rate = lr;
    }
    resolved.validate().usage()?;

    let data = dataset::load_dataset(&args.dataset).usage()?;
    if data.manifest.grid_n != resolved.dataset.grid_n {
        return Err(Failure::usage(format!(
            "dataset grid {} does not match config grid {}",
            data.manifest.grid_n, resolved.dataset.grid_n
        )));
    }
    let gripper = resolved.dataset.oracle.gripper;
    let mut trainer = match &args.resume {
        Some(path) => {
            let (model, adam, manifest) = load_checkpoint(path).usage()?;
            if manifest.grid_n != data.manifest.grid_n {
                return Err(Failure::usage(format!(
                    "checkpoint grid {} does not match dataset grid {}",
                    manifest.grid_n, data.manifest.grid_n
                )));
            }
            if manifest.config_hash != resolved.canonical_hash() {
                eprintln!("note: resuming under a different configuration than the checkpoint");
            }
            Trainer::from_parts(model, adam, manifest.epochs_done, manifest.grid_n).usage()?
        }
        None => Trainer::new(resolved.train.seed, data.manifest.grid_n).usage()?,
    };

    let stats = trainer.run(&data, &gripper, &resolved.train).runtime()?;
    save_checkpoint(
        &args.out,
        &trainer.model,
        &trainer.adam,
        trainer.epochs_done,
        trainer.grid_n,
        &resolved.canonical_hash(),
    )
    .runtime()?;
    let loss_csv = args
        .loss_csv
        .clone()
        .unwrap_or_else(|| args.out.with_extension("loss.csv"));
    write_loss_csv(&loss_csv, &stats).runtime()?;
    let accuracy = trainer.quality_accuracy(&data, &gripper).runtime()?;

    if let Some(last) = stats.last() {
        println!("epoch {} loss {:.6}", last.epoch, last.loss);
    }
    println!("training quality accuracy {:.1}%", accuracy * 100.0);
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_detect(config: Config, args: &DetectArgs) -> Result<(), Failure> {
    let (model, _adam, manifest) = load_checkpoint(&args.checkpoint).usage()?;
    let volume = TsdfVolume::load(&args.volume).usage()?;
    if volume.n() != manifest.grid_n {
        return Err(Failure::usage(format!(
            "volume grid {} does not match checkpoint grid {}",
            volume.n(),
            manifest.grid_n
        )));
    }
    let mut dcfg = config.detection.clone();
    if let Some(e) = args.epsilon {
        dcfg.epsilon = e;
    }
    dcfg.validate().usage()?;

    let gripper = config.dataset.oracle.gripper;
    let (detections, timing) = detect::plan(&volume, &model, &gripper, &dcfg).runtime()?;
    let mut lines = String::new();
    for d in &detections {
        let line =
            serde_json::to_string(d).map_err(|e| Failure::runtime(format!("detections: {e}")))?;
        lines.push_str(&line);
        lines.push('\n');
    }
    match &args.out {
        Some(path) => fsutil::atomic_write_bytes(path, lines.as_bytes()).runtime()?,
        None => print!("{lines}"),
    }
    eprintln!(
        "planning {:.1} ms (forward {:.1} ms, post {:.1} ms), {} grasps",
        timing.total_ms,
        timing.forward_ms,
        timing.post_ms,
        detections.len()
    );
    Ok(())
}

fn parse_scenario(text: &str) -> Result<Scenario, Failure> {
    match text {
        "blocks" | "blocks-pile" => Ok(Scenario::BlocksPile),
        "pile" => Ok(Scenario::Pile),
        "packed" => Ok(Scenario::Packed),
        other => Err(Failure::usage(format!(
            "unknown scenario {other:?}; expected blocks, pile, or packed"
        ))),
    }
}

fn parse_policy(text: &str) -> Result<SelectPolicy, Failure> {
    match text {
        "random_above_eps" => Ok(SelectPolicy::RandomAboveEps),
        "max_quality" => Ok(SelectPolicy::MaxQuality),
        "highest_z" => Ok(SelectPolicy::HighestZ),
        other => Err(Failure::usage(format!(
            "unknown policy {other:?}; expected random_above_eps, max_quality, or highest_z"
        ))),
    }
}

fn cmd_bench(config: Config, args: &BenchArgs) -> Result<(), Failure> {
    let (model, _adam, manifest) = load_checkpoint(&args.checkpoint).usage()?;
    let mut params = config.bench.clone();
    if let Some(r) = args.rounds {
        params.rounds = r;
    }
    if let Some(m) = args.m {
        params.object_count = m;
    }
    if let Some(s) = &args.scenario {
        params.scenario = parse_scenario(s)?;
    }
    if let Some(e) = args.epsilon {
        params.detection.epsilon = e;
    }
    if let Some(p) = &args.policy {
        params.policy = parse_policy(p)?;
    }
    if params.grid_n != manifest.grid_n {
        return Err(Failure::usage(format!(
            "bench grid {} does not match checkpoint grid {}",
            params.grid_n, manifest.grid_n
        )));
    }
    params.validate().usage()?;

    let (report, rounds) = bench::run_benchmark(&params, &model).runtime()?;
    bench::write_report_json(&args.out.with_extension("json"), &report).runtime()?;
    bench::write_report_csv(&args.out.with_extension("csv"), &report).runtime()?;
    bench::write_round_log(&args.out.with_extension("rounds.jsonl"), &rounds).runtime()?;
    if args.plot {
        write_plot_svg(&args.out.with_extension("svg"), &report)?;
    }

    println!(
        "{} on {} rounds (m={}, epsilon={}, policy={})",
        report.scenario.label(),
        report.rounds,
        report.m,
        report.epsilon,
        report.policy.label()
    );
    println!(
        "success rate {:.1}% | percent cleared {:.1}% | {} attempts",
        report.success_rate, report.percent_cleared, report.attempts
    );
    println!(
        "planning mean {:.1} ms, p50 {:.1} ms, p99 {:.1} ms",
        report.mean_planning_ms, report.p50_planning_ms, report.p99_planning_ms
    );
    println!("wrote {}", args.out.with_extension("json").display());
    Ok(())
}

/// Two labeled bars on a fixed 0..100% axis.
fn write_plot_svg(path: &Path, report: &BenchmarkReport) -> Result<(), Failure> {
    let bars = [
        ("success rate", report.success_rate, "#4878cf"),
        ("percent cleared", report.percent_cleared, "#6acc65"),
    ];
    let (w, h) = (420.0, 260.0);
    let (left, top, plot_w, plot_h) = (60.0, 40.0, 320.0, 170.0);
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{} (m={}, eps={})</text>\n",
        left + plot_w / 2.0,
        report.scenario.label(),
        report.m,
        report.epsilon
    ));
    for tick in [0.0f64, 25.0, 50.0, 75.0, 100.0] {
        let y = top + plot_h * (1.0 - tick / 100.0);
        svg.push_str(&format!(
            "<line x1=\"{left}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#ddd\"/>\n",
            left + plot_w
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{tick:.0}%</text>\n",
            left - 6.0,
            y + 4.0
        ));
    }
    let bar_w = 90.0;
    for (i, (label, value, color)) in bars.iter().enumerate() {
        let clamped = value.clamp(0.0, 100.0);
        let x = left + plot_w * (0.28 + 0.44 * i as f64) - bar_w / 2.0;
        let bh = plot_h * clamped / 100.0;
        let y = top + plot_h - bh;
        svg.push_str(&format!(
            "<rect x=\"{x}\" y=\"{y}\" width=\"{bar_w}\" height=\"{bh}\" fill=\"{color}\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{value:.1}%</text>\n",
            x + bar_w / 2.0,
            y - 6.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{label}</text>\n",
            x + bar_w / 2.0,
            top + plot_h + 18.0
        ));
    }
    svg.push_str("</svg>\n");
    fsutil::atomic_write_bytes(path, svg.as_bytes()).runtime()
}

fn cmd_stats(args: &StatsArgs) -> Result<(), Failure> {
    if args.dataset.is_none() && args.report.is_none() {
        return Err(Failure::usage("stats needs --dataset and/or --report"));
    }
    if let Some(dir) = &args.dataset {
        let data = dataset::load_dataset(dir).usage()?;
        let m = &data.manifest;
        println!("dataset {}", dir.display());
        println!(
            "  records {} ({} positive, {} negative)",
            m.record_count, m.positives, m.negatives
        );
        println!(
            "  grid {} | workspace {:.2} m | seed {} | gripper {}",
            m.grid_n,
            m.workspace_side,
            m.seed,
            &m.gripper_hash[..12]
        );
        println!("  scenes {}", data.volumes.len());
        if m.positives > 0 {
            let hist = grasp_angle_histogram(&data.records).runtime()?;
            let total: u64 = hist.iter().sum();
            let below_30: u64 = hist[..3].iter().sum();
            let side: u64 = hist[6..12].iter().sum();
            println!(
                "  grasp angles: {:.0}% below 30 deg, {:.0}% between 60 and 120 deg",
                100.0 * below_30 as f64 / total as f64,
                100.0 * side as f64 / total as f64
            );
        }
    }
    if let Some(path) = &args.report {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        let report: BenchmarkReport = serde_json::from_str(&text)
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        println!("report {}", path.display());
        println!(
            "  {} | m={} | epsilon={} | policy={} | rounds {}",
            report.scenario.label(),
            report.m,
            report.epsilon,
            report.policy.label(),
            report.rounds
        );
        println!(
            "  success rate {:.1}% | percent cleared {:.1}% | {} attempts",
            report.success_rate, report.percent_cleared, report.attempts
        );
        println!(
            "  planning mean {:.1} ms, p50 {:.1} ms, p99 {:.1} ms",
            report.mean_planning_ms, report.p50_planning_ms, report.p99_planning_ms
        );
        println!("  config {}", &report.config_hash[..12]);
    }
    Ok(())
}
