use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use quantflow::bitwidth::{
    read_sweep_csv, select_bitwidths, sensitivity_sweep, write_sweep_csv, OutputMse, PoseEsa, PoseHead, SelectionPolicy,
    SweepConfig, SweepMetric, SweepTarget,
};
use quantflow::dataflow::{
    demo_spec, estimate_resources, fold_graph, latency_budget, simulate_pipeline, CostModel, FifoConfig, FifoPreset,
    FoldingPlan, Pipeline, ResourceBudget,
};
use quantflow::engine::{quantize_input, run_int, run_reference, verify};
use quantflow::graph::{
    build_backbone_with_seed, build_network, load_model, save_model, BlockSpec, NetworkSpec, Shape, Stage, StemSpec,
};
use quantflow::lowering::lower;
use quantflow::pose::{esa_score, read_poses, super_fibonacci_bins, PoseSample};
use quantflow::quantize::{calibrate, quantize_graph, BitWidthPlan};
use quantflow::synth::synthetic_images;
use quantflow::{FloatTensor, Graph};
use serde::{Deserialize, Serialize};

/// Quantization, integer lowering and dataflow accelerator modeling for
/// pose-estimation CNNs.
#[derive(Parser, Debug)]
#[command(name = "quantflow", version)]
struct Cli {
    /// Directory that receives every artifact.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Seed for every random choice (weights, synthetic images, bins).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML file with defaults; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Build a float model and write it to <out-dir>/float.
    GenModel {
        #[arg(long, value_enum, default_value_t = ModelKind::Toy)]
        kind: ModelKind,
        /// Input resolution of the backbone.
        #[arg(long, default_value_t = 240)]
        resolution: usize,
    },
    /// Calibrate and quantize a float model into <out-dir>/quantized.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        /// plan.json; uniform bit-widths are used without it.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        weight_bits: u8,
        #[arg(long, default_value_t = 8)]
        act_bits: u8,
        #[arg(long)]
        calib_images: Option<usize>,
    },
    /// Lower a quantized model into <out-dir>/lowered.
    Lower {
        #[arg(long)]
        model: PathBuf,
    },
    /// Run one synthetic image; writes trace.json (integer graphs) or output.json.
    Run {
        #[arg(long)]
        model: PathBuf,
        /// Seed of the synthetic input image (defaults to --seed).
        #[arg(long)]
        image_seed: Option<u64>,
    },
    /// Compare integer and reference execution; exit 0 iff bit-exact.
    Verify {
        #[arg(long)]
        quantized: PathBuf,
        #[arg(long)]
        lowered: PathBuf,
        #[arg(long, default_value_t = 2)]
        images: usize,
    },
    /// Pick per-node PE/SIMD for a latency budget; writes folding.json.
    Fold {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        hw: HwArgs,
        /// Cycles per frame; derived from clock and target FPS when absent.
        #[arg(long)]
        latency_budget: Option<u64>,
    },
    /// Discrete-event pipeline simulation; writes fifos.json and simreport.json.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        folding: PathBuf,
        #[command(flatten)]
        hw: HwArgs,
        #[command(flatten)]
        fifo: FifoArgs,
        /// Frames to simulate; chosen automatically when absent.
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        power_watts: Option<f64>,
    },
    /// Resource estimate of a folded model; writes resources.json.
    Resources {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        folding: PathBuf,
        #[command(flatten)]
        fifo: FifoArgs,
    },
    /// Per-layer quantization sensitivity; writes sweep.csv.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        eval_images: Option<usize>,
        #[arg(long, value_enum, default_value_t = Target::Weights)]
        target: Target,
        #[arg(long, default_value_t = 1)]
        probe_bits: u8,
        #[arg(long, value_enum, default_value_t = Metric::Mse)]
        metric: Metric,
        /// Orientation bins of the pose head (metric esa).
        #[arg(long, default_value_t = 64)]
        bins: usize,
    },
    /// Turn sweep.csv into plan.json.
    SelectBits {
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long, value_enum, default_value_t = Policy::Mixed)]
        policy: Policy,
        #[arg(long)]
        act_bits: Option<u8>,
        #[arg(long)]
        base_bits: Option<u8>,
        /// Bits of the most sensitive layers, most sensitive first.
        #[arg(long, value_delimiter = ',')]
        ladder: Option<Vec<u8>>,
    },
    /// ESA score of a poses.csv; writes score.json.
    Score {
        #[arg(long)]
        poses: PathBuf,
    },
}

#[derive(Args, Debug)]
struct HwArgs {
    #[arg(long)]
    clock_mhz: Option<f64>,
    #[arg(long)]
    target_fps: Option<f64>,
}

#[derive(Args, Debug)]
struct FifoArgs {
    #[arg(long, value_enum)]
    fifos: Option<Fifos>,
    /// fifos.json with explicit depths; overrides --fifos.
    #[arg(long)]
    fifos_file: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModelKind {
    Backbone,
    Toy,
    Demo,
}

#[derive(ValueEnum, Clone, Copy, Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Fifos {
    Deep,
    Default,
    Starved,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Target {
    Weights,
    Activations,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Metric {
    Mse,
    Esa,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Policy {
    Mixed,
    Uniform,
}

/// Keys accepted in the `--config` file.
#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    clock_mhz: Option<f64>,
    target_fps: Option<f64>,
    power_watts: Option<f64>,
    frames: Option<usize>,
    fifos: Option<Fifos>,
    calib_images: Option<usize>,
    eval_images: Option<usize>,
    budget: Option<ResourceBudget>,
    cost: Option<CostModel>,
}

/// Settings shared by all subcommands after merging file and flags.
struct RunConfig {
    seed: u64,
    out_dir: PathBuf,
    file: FileConfig,
}

impl RunConfig {
    fn new(cli: &Cli) -> Result<Self> {
        let file: FileConfig = match &cli.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => FileConfig::default(),
        };
        let seed = cli.seed.or(file.seed).unwrap_or(0);
        let out_dir = cli.out_dir.clone().or(file.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
        Ok(Self { seed, out_dir, file })
    }

    fn clock(&self, hw: &HwArgs) -> Result<f64> {
        let c = hw.clock_mhz.or(self.file.clock_mhz).unwrap_or(187.5);
        ensure!(c.is_finite() && c > 0.0, "clock must be positive, got {c} MHz");
        Ok(c)
    }

    fn target_fps(&self, hw: &HwArgs) -> Result<f64> {
        let f = hw.target_fps.or(self.file.target_fps).unwrap_or(250.0);
        ensure!(f.is_finite() && f > 0.0, "target FPS must be positive, got {f}");
        Ok(f)
    }

    fn budget(&self) -> ResourceBudget {
        self.file.budget.clone().unwrap_or_default()
    }

    fn cost(&self) -> CostModel {
        self.file.cost.clone().unwrap_or_default()
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

fn load(path: &Path, want: Option<Stage>) -> Result<Graph> {
    let g: Graph = load_model(path).with_context(|| format!("loading model {}", path.display()))?;
    if let Some(s) = want {
        ensure!(g.stage() == s, "{} is a {:?} model, expected {:?}", path.display(), g.stage(), s);
    }
    Ok(g)
}

fn save(g: &Graph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_model(g, dir).with_context(|| format!("writing model to {}", dir.display()))
}

fn toy_spec() -> NetworkSpec {
    NetworkSpec {
        input: Shape::new(3, 16, 16),
        stem: Some(StemSpec { out_channels: 8, kernel: 3, stride: 2 }),
        blocks: vec![
            BlockSpec { expansion: 1, out_channels: 8, stride: 1, kernel: 3 },
            BlockSpec { expansion: 4, out_channels: 8, stride: 1, kernel: 3 },
        ],
        head: None,
    }
}

fn fifo_config(cfg: &RunConfig, args: &FifoArgs, p: &Pipeline, fallback: Fifos) -> Result<FifoConfig> {
    if let Some(path) = &args.fifos_file {
        let f: FifoConfig = read_json(path)?;
        f.validate(p)?;
        return Ok(f);
    }
    let preset = match args.fifos.or(cfg.file.fifos).unwrap_or(fallback) {
        Fifos::Deep => FifoPreset::Deep,
        Fifos::Default => FifoPreset::Default,
        Fifos::Starved => FifoPreset::Starved,
    };
    Ok(FifoConfig::preset(p, preset)?)
}

#[derive(Serialize)]
struct ResourceReport {
    estimate: quantflow::dataflow::ResourceEstimate,
    budget: ResourceBudget,
    utilization: std::collections::BTreeMap<&'static str, f64>,
}

#[derive(Serialize)]
struct OutputReport {
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn execute(cli: Cli) -> Result<ExitCode> {
    let cfg = RunConfig::new(&cli)?;
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    match cli.cmd {
        Cmd::GenModel { kind, resolution } => {
            let g: Graph = match kind {
                ModelKind::Backbone => build_backbone_with_seed(resolution, cfg.seed)?,
                ModelKind::Toy => build_network(&toy_spec(), cfg.seed, 0.0)?,
                ModelKind::Demo => build_network(&demo_spec(), cfg.seed, 0.0)?,
            };
            save(&g, &cfg.path("float"))?;
            println!("{} nodes written to {}", g.nodes.len(), cfg.path("float").display());
        }
        Cmd::Quantize { model, plan, weight_bits, act_bits, calib_images } => {
            let g = load(&model, Some(Stage::Float))?;
            let plan = match plan {
                Some(p) => read_json::<BitWidthPlan>(&p)?,
                None => BitWidthPlan::uniform(&g, weight_bits, act_bits),
            };
            let n = calib_images.or(cfg.file.calib_images).unwrap_or(4);
            ensure!(n > 0, "calibration needs at least one image");
            let cal = calibrate(&g, &synthetic_images(g.input_shape(), n, cfg.seed))?;
            let q = quantize_graph(&g, &plan, &cal)?;
            save(&q, &cfg.path("quantized"))?;
            println!("quantized model written to {}", cfg.path("quantized").display());
        }
        Cmd::Lower { model } => {
            let l = lower(&load(&model, Some(Stage::Quantized))?)?;
            save(&l, &cfg.path("lowered"))?;
            println!("{} integer nodes written to {}", l.nodes.len(), cfg.path("lowered").display());
        }
        Cmd::Run { model, image_seed } => {
            let g = load(&model, None)?;
            let x: FloatTensor = synthetic_images(g.input_shape(), 1, image_seed.unwrap_or(cfg.seed)).remove(0);
            if g.stage() == Stage::Lowered {
                let trace = run_int(&g, &quantize_input(&g, &x)?)?;
                write_json(&cfg.path("trace.json"), &trace)?;
                let mut log = BufWriter::new(File::create(cfg.path("run.log"))?);
                for (id, ns) in trace.timings() {
                    writeln!(log, "{id}\t{ns} ns")?;
                }
                println!("output checksum {}", trace.output().checksum);
            } else {
                let out = run_reference(&g, &x)?.output().clone();
                write_json(&cfg.path("output.json"), &OutputReport { dims: out.dims().to_vec(), data: out.data().to_vec() })?;
                println!("output written to {}", cfg.path("output.json").display());
            }
        }
        Cmd::Verify { quantized, lowered, images } => {
            ensure!(images > 0, "verify needs at least one image");
            let q = load(&quantized, Some(Stage::Quantized))?;
            let l = load(&lowered, Some(Stage::Lowered))?;
            let mut reports = Vec::new();
            for x in synthetic_images(q.input_shape(), images, cfg.seed) {
                reports.push(verify(&q, &l, &x)?);
            }
            write_json(&cfg.path("verify.json"), &reports)?;
            let max_mse = reports.iter().map(|r| r.max_mse).fold(0.0, f64::max);
            if let Some(d) = reports.iter().flat_map(|r| &r.nodes).find(|d| d.mismatches > 0) {
                bail!("not bit-exact: node {} differs in {} of {} elements (max MSE {max_mse})", d.id, d.mismatches, d.elements);
            }
            println!("bit-exact on {images} images, max MSE {max_mse}");
        }
        Cmd::Fold { model, hw, latency_budget: budget } => {
            let g = load(&model, Some(Stage::Lowered))?;
            let clock = cfg.clock(&hw)?;
            let cycles = match budget {
                Some(c) => c,
                None => latency_budget(clock, cfg.target_fps(&hw)?),
            };
            let plan = fold_graph(&g, cycles, &cfg.budget(), &cfg.cost(), clock)?;
            write_json(&cfg.path("folding.json"), &plan)?;
            let p = Pipeline::from_graph(&g, &plan)?;
            let (slow, c) = p.bottleneck();
            println!("bottleneck {} at {c} cycles, {:.3} FPS", p.stages[slow].id, p.closed_form_fps());
        }
        Cmd::Simulate { model, folding, hw, fifo, frames, power_watts } => {
            let power = power_watts.or(cfg.file.power_watts);
            if let Some(w) = power {
                ensure!(w.is_finite() && w > 0.0, "power must be positive, got {w} W");
            }
            let g = load(&model, Some(Stage::Lowered))?;
            let mut plan: FoldingPlan = read_json(&folding)?;
            if hw.clock_mhz.is_some() || cfg.file.clock_mhz.is_some() {
                plan.clock_mhz = cfg.clock(&hw)?;
            }
            let p = Pipeline::from_graph(&g, &plan)?;
            let fifos = fifo_config(&cfg, &fifo, &p, Fifos::Deep)?;
            write_json(&cfg.path("fifos.json"), &fifos)?;
            let mut report = simulate_pipeline(&p, &fifos, frames.or(cfg.file.frames))?;
            if let Some(w) = power {
                report = report.with_power(w)?;
            }
            write_json(&cfg.path("simreport.json"), &report)?;
            match report.fps_per_watt {
                Some(e) => println!("steady-state {} FPS, {e:.2} FPS/W", report.steady_state_fps),
                None => println!("steady-state {} FPS", report.steady_state_fps),
            }
        }
        Cmd::Resources { model, folding, fifo } => {
            let g = load(&model, Some(Stage::Lowered))?;
            let plan: FoldingPlan = read_json(&folding)?;
            let p = Pipeline::from_graph(&g, &plan)?;
            let fifos = fifo_config(&cfg, &fifo, &p, Fifos::Default)?;
            let budget = cfg.budget();
            let estimate = estimate_resources(&g, &plan, &fifos.depths, &cfg.cost())?;
            let utilization = estimate.utilization(&budget);
            println!(
                "{} LUT ({:.1}%), {} BRAM18 ({:.1}%), {} DSP",
                estimate.luts, utilization["luts"], estimate.brams, utilization["brams"], estimate.dsps
            );
            write_json(&cfg.path("resources.json"), &ResourceReport { estimate, budget, utilization })?;
        }
        Cmd::Sweep { model, eval_images, target, probe_bits, metric, bins } => {
            let g = load(&model, Some(Stage::Float))?;
            let n = eval_images.or(cfg.file.eval_images).unwrap_or(4);
            let evalset = synthetic_images(g.input_shape(), n, cfg.seed);
            let sweep_cfg = SweepConfig {
                probe_bits,
                target: match target {
                    Target::Weights => SweepTarget::Weights,
                    Target::Activations => SweepTarget::Activations,
                },
                ..SweepConfig::default()
            };
            let head = PoseHead { bins: super_fibonacci_bins(bins, cfg.seed), z0: 10.0 };
            let esa;
            let metric: &dyn SweepMetric<f64> = match metric {
                Metric::Mse => &OutputMse,
                Metric::Esa => {
                    let labels = evalset
                        .iter()
                        .map(|x| {
                            let e = head.decode(run_reference(&g, x)?.output()).map_err(anyhow::Error::msg)?;
                            Ok(PoseSample::new(e.q, e.t)?)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    esa = PoseEsa { labels, decode: |o: &FloatTensor| head.decode(o) };
                    &esa
                }
            };
            let records = sensitivity_sweep(&g, &evalset, metric, &sweep_cfg)?;
            write_sweep_csv(File::create(cfg.path("sweep.csv"))?, &records)?;
            let failed = records.iter().filter(|r| r.failure.is_some()).count();
            println!("{} layers swept, {failed} failed", records.len());
        }
        Cmd::SelectBits { sweep, policy, act_bits, base_bits, ladder } => {
            let records = read_sweep_csv(File::open(&sweep).with_context(|| format!("opening {}", sweep.display()))?)?;
            let mut pol = match policy {
                Policy::Mixed => SelectionPolicy::mixed_3_4(),
                Policy::Uniform => SelectionPolicy::uniform(8, 8),
            };
            pol.act_bits = act_bits.unwrap_or(pol.act_bits);
            pol.base_bits = base_bits.unwrap_or(pol.base_bits);
            pol.ladder = ladder.unwrap_or(pol.ladder);
            let plan = select_bitwidths(&records, &pol)?;
            write_json(&cfg.path("plan.json"), &plan)?;
            println!("plan for {} layers written to {}", plan.weight_bits.len(), cfg.path("plan.json").display());
        }
        Cmd::Score { poses } => {
            let samples = read_poses::<f64, _>(File::open(&poses).with_context(|| format!("opening {}", poses.display()))?)?;
            let m = esa_score(&samples)?;
            write_json(&cfg.path("score.json"), &m)?;
            println!("ESA {}", m.esa);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
