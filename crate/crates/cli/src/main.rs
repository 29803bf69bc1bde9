use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use pdk_core::depth::{DepthDecoder, DEFAULT_D_MAX};
use pdk_core::eval::{evaluate_dirs, write_report, EvalConfig};
use pdk_core::io::{read_bundle, write_bundle, write_depth, write_json, write_panoptic, DepthEncoding};
use pdk_core::kernel_fusion::DEFAULT_DEDUP_THRESHOLD;
use pdk_core::mask::DiscardConfig;
use pdk_core::metrics::{DEFAULT_LAMBDAS, DEFAULT_VOID_IGNORE_FRACTION};
use pdk_core::pipeline::{run_inference, InferenceConfig};
use pdk_core::synth::{
    fit_micro_variants, format_table, generate_scene, scene_seed, toy_bundle, write_batch, BatchConfig, FitConfig,
    SceneSpec, Variant, VariantReport,
};
use pdk_core::{Error, SegmentRef};

#[derive(Parser)]
#[command(name = "pdk", version, about = "Depth-aware panoptic segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score predicted panoptic + depth rasters against ground truth.
    Eval(EvalArgs),
    /// Write synthetic ground-truth scenes and perturbed predictions.
    Synth(SynthArgs),
    /// Write a toy kernel bundle derived from a synthetic scene.
    Bundle(BundleArgs),
    /// Run the forward pass on a kernel bundle.
    Demo(DemoArgs),
    /// Fit depth-head variants on step-depth scenes and compare them.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    gt_dir: PathBuf,
    /// Relative depth error thresholds.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LAMBDAS.to_vec())]
    lambdas: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_D_MAX)]
    d_max: f64,
    /// Unmatched predictions with more than this fraction over VOID are not false positives.
    #[arg(long, default_value_t = DEFAULT_VOID_IGNORE_FRACTION)]
    void_ignore_fraction: f64,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    #[arg(long, env = "PDK_JOBS", default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 256)]
    width: usize,
    /// Predicted depth = ratio * ground truth.
    #[arg(long, default_value_t = 1.0)]
    depth_ratio: f64,
    /// Pixels eroded from every thing boundary in the prediction.
    #[arg(long, default_value_t = 0)]
    erode: usize,
    /// Std. dev. of multiplicative Gaussian noise on predicted depth.
    #[arg(long, default_value_t = 0.0)]
    depth_noise: f64,
    /// Flat things over ramped stuff.
    #[arg(long)]
    step_depth: bool,
    #[arg(long, default_value_t = 0)]
    voids: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scheme {
    Plain,
    T1,
    T2,
}

impl From<Scheme> for DepthDecoder {
    fn from(s: Scheme) -> Self {
        match s {
            Scheme::Plain => DepthDecoder::Plain,
            Scheme::T1 => DepthDecoder::T1,
            Scheme::T2 => DepthDecoder::T2,
        }
    }
}

#[derive(Args)]
struct BundleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 48)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Decoder the depth kernels are fitted for.
    #[arg(long, value_enum, default_value_t = Scheme::T2)]
    scheme: Scheme,
    #[arg(long, default_value_t = DEFAULT_D_MAX)]
    d_max: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct DemoArgs {
    /// Bundle manifest (JSON).
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long, value_enum, default_value_t = Scheme::T2)]
    scheme: Scheme,
    #[arg(long, default_value_t = DEFAULT_D_MAX)]
    d_max: f64,
    /// Cosine similarity above which kernels are merged.
    #[arg(long, default_value_t = DEFAULT_DEDUP_THRESHOLD)]
    dedup_threshold: f64,
    #[arg(long)]
    no_dedup: bool,
    #[arg(long, default_value_t = DiscardConfig::default().score_threshold)]
    score_threshold: f64,
    #[arg(long, default_value_t = DiscardConfig::default().overlap_threshold)]
    overlap_threshold: f64,
    #[arg(long, default_value_t = DiscardConfig::default().min_stuff_area)]
    min_stuff_area: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_delimiter = ',', default_values_t = Variant::ALL.to_vec())]
    variants: Vec<Variant>,
    #[arg(long, default_value_t = 20)]
    scenes: usize,
    #[arg(long, default_value_t = FitConfig::default().iterations)]
    iters: usize,
    #[arg(long, default_value_t = FitConfig::default().step_size)]
    step_size: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 48)]
    width: usize,
    /// JSON report; the text table goes next to it with a .txt extension.
    #[arg(long, default_value = "ablation.json")]
    out: PathBuf,
}

fn eval(args: EvalArgs) -> Result<(), Error> {
    let cfg = EvalConfig {
        lambdas: args.lambdas,
        d_max: args.d_max,
        void_ignore_fraction: args.void_ignore_fraction,
        jobs: args.jobs,
    };
    let report = evaluate_dirs(&args.pred_dir, &args.gt_dir, &cfg)?;
    write_report(&report, &args.out)?;
    eprintln!(
        "{} images: PQ {:.4}  DPQ {:.4}  DPQ_th {:.4}  DPQ_st {:.4}  RMSE {}",
        report.images_evaluated,
        report.aggregate.pq,
        report.aggregate.dpq,
        report.aggregate.dpq_thing,
        report.aggregate.dpq_stuff,
        report.aggregate.rmse.map_or("n/a".into(), |r| format!("{r:.4}")),
    );
    Ok(())
}

fn synth(args: SynthArgs) -> Result<(), Error> {
    let base = if args.step_depth {
        SceneSpec::step_depth(0, args.height, args.width)
    } else {
        SceneSpec::new(0, args.height, args.width)
    };
    let cfg = BatchConfig {
        seed: args.seed,
        count: args.count,
        template: SceneSpec {
            n_void: args.voids,
            ..base
        },
        depth_ratio: args.depth_ratio,
        erode: args.erode,
        depth_noise: args.depth_noise,
    };
    let manifest = write_batch(&args.out_dir, &cfg)?;
    eprintln!("wrote {} scene pairs to {}", manifest.scenes.len(), args.out_dir.display());
    Ok(())
}

fn bundle(args: BundleArgs) -> Result<(), Error> {
    let scene = generate_scene(&SceneSpec::new(args.seed, args.height, args.width))?;
    let bundle = toy_bundle(&scene, args.scheme.into(), args.d_max)?;
    let path = write_bundle(&args.out_dir, &bundle)?;
    write_panoptic(args.out_dir.join("source_panoptic.pdps"), &scene.panoptic)?;
    write_depth(args.out_dir.join("source_depth.pdps"), &scene.depth, DepthEncoding::F64)?;
    eprintln!("wrote {} ({} kernels)", path.display(), bundle.kernels.len());
    Ok(())
}

#[derive(Serialize)]
struct InstanceLog {
    kernel: usize,
    class_id: u16,
    instance_id: u16,
    is_thing: bool,
    score: f64,
    area: u64,
    /// Sigmoid outputs of the range and shift logits.
    range: Option<f64>,
    shift: Option<f64>,
    mean_depth: Option<f64>,
}

#[derive(Serialize)]
struct DemoLog {
    scheme: &'static str,
    d_max: f64,
    kernels_in: usize,
    kernels_after_dedup: usize,
    kept: usize,
    instances: Vec<InstanceLog>,
}

fn demo(args: DemoArgs) -> Result<(), Error> {
    let bundle = read_bundle(&args.bundle)?;
    let cfg = InferenceConfig {
        dedup_threshold: (!args.no_dedup).then_some(args.dedup_threshold),
        discard: DiscardConfig {
            score_threshold: args.score_threshold,
            overlap_threshold: args.overlap_threshold,
            min_stuff_area: args.min_stuff_area,
        },
        decoder: args.scheme.into(),
        d_max: args.d_max,
        keep_best_if_empty: true,
    };
    let out = run_inference(&bundle, &cfg)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::Io {
        path: args.out_dir.clone(),
        source: e,
    })?;
    write_panoptic(args.out_dir.join("panoptic.pdps"), out.panoptic())?;
    write_depth(args.out_dir.join("depth.pdps"), &out.depth, DepthEncoding::F64)?;

    let areas = out.panoptic().areas();
    let labels = out.panoptic().labels().values();
    let instances = out
        .merge
        .instance_segments
        .iter()
        .map(|&(k, seg): &(usize, SegmentRef)| {
            let depth = out.instance_depths[k].depth.values();
            let (sum, n) = labels
                .iter()
                .zip(depth)
                .filter(|(l, _)| **l == seg)
                .fold((0.0, 0usize), |(s, n), (_, d)| (s + d, n + 1));
            let kernel = out.kernels.get(k);
            InstanceLog {
                kernel: k,
                class_id: seg.class_id(),
                instance_id: seg.instance_id(),
                is_thing: kernel.is_thing,
                score: kernel.score,
                area: areas.get(&seg).copied().unwrap_or(0),
                range: out.instance_depths[k].triplet.map(|t| t.0),
                shift: out.instance_depths[k].triplet.map(|t| t.1),
                mean_depth: (n > 0).then(|| sum / n as f64),
            }
        })
        .collect();
    let log = DemoLog {
        scheme: match args.scheme {
            Scheme::Plain => "plain",
            Scheme::T1 => "t1",
            Scheme::T2 => "t2",
        },
        d_max: args.d_max,
        kernels_in: bundle.kernels.len(),
        kernels_after_dedup: out.kernels.len(),
        kept: out.kept.len(),
        instances,
    };
    write_json(args.out_dir.join("instances.json"), &log)?;
    eprintln!(
        "{} kernels -> {} after dedup -> {} segments; outputs in {}",
        log.kernels_in,
        log.kernels_after_dedup,
        log.kept,
        args.out_dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct AblationReport<'a> {
    seed: u64,
    scenes: usize,
    height: usize,
    width: usize,
    config: &'a FitConfig,
    variants: &'a [VariantReport],
}

fn ablate(args: AblateArgs) -> Result<(), Error> {
    if args.scenes == 0 {
        return Err(Error::Validation {
            field: "scenes".into(),
            reason: "must be at least 1".into(),
        });
    }
    let scenes = (0..args.scenes as u64)
        .map(|i| generate_scene(&SceneSpec::step_depth(scene_seed(args.seed, i), args.height, args.width)))
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = FitConfig {
        iterations: args.iters,
        step_size: args.step_size,
        ..Default::default()
    };
    let reports = args
        .variants
        .iter()
        .map(|v| fit_micro_variants(&scenes, *v, &cfg))
        .collect::<Result<Vec<_>, _>>()?;
    write_json(
        &args.out,
        &AblationReport {
            seed: args.seed,
            scenes: args.scenes,
            height: args.height,
            width: args.width,
            config: &cfg,
            variants: &reports,
        },
    )?;
    let table = format_table(&reports);
    let table_path = table_path(&args.out);
    std::fs::write(&table_path, &table).map_err(|e| Error::Io {
        path: table_path.clone(),
        source: e,
    })?;
    eprint!("{table}");
    Ok(())
}

fn table_path(json: &Path) -> PathBuf {
    json.with_extension("txt")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
        Command::Bundle(a) => bundle(a),
        Command::Demo(a) => demo(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 3 })
        }
    }
}
