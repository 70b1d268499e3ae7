mod config;
mod files;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use splatfix::confidence::accumulate_training_fisher;
use splatfix::guidance::{
    external_denoiser_bridge, Denoiser, IdentityDenoiser, NoisyOracleDenoiser, OracleDenoiser, PriorDenoiser,
};
use splatfix::metrics::{reports_csv, MetricReport};
use splatfix::pipeline::{run_ablation, fix_trajectory, stage_confidence, standard_variants, AblationCase};
use splatfix::refine::{refine_3d, refine_log_csv, FixedViewSet};
use splatfix::render::render_color;
use splatfix::scene::{save_cameras, save_scene};
use splatfix::synth::{corrupt_scene, make_synthetic_scene, SceneKind};
use splatfix::{AttributeImage, Error, GaussianScene, Result, ViewSet};

use crate::config::{parse_gamma, RunConfig};
use crate::files::{create_dir, load_any_scene, load_views, read_all_images, write_images, write_text};

#[derive(Parser)]
#[command(name = "splatfix", version, about = "Fix artifacts in extrapolated views of Gaussian-splat scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic scene with training and extrapolated cameras and images.
    Synth {
        #[arg(long)]
        kind: Option<SceneKind>,
        #[command(flatten)]
        common: Common,
    },
    /// Add floaters visible only from the trajectory cameras.
    Corrupt {
        #[arg(long)]
        count: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Optimize a scene against the training views alone.
    Fit {
        #[command(flatten)]
        common: Common,
    },
    /// Render the scene at the trajectory cameras.
    Render {
        #[command(flatten)]
        common: Common,
    },
    /// Confidence maps at the trajectory cameras from training-view Fisher information.
    Confidence {
        #[command(flatten)]
        common: Common,
    },
    /// Fix every trajectory view in order, refining the scene after each.
    Refine {
        #[command(flatten)]
        common: Common,
    },
    /// Run the module toggles over synthetic corrupted scenes.
    Ablate {
        /// Number of cases, seeded from `--seed` upward.
        #[arg(long)]
        cases: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare two image directories.
    Eval {
        #[arg(long)]
        predicted: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON run config; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for synthesis, corruption and the pipeline.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// oracle, noisy-oracle, identity, prior or bridge:<dir>.
    #[arg(long)]
    denoiser: Option<String>,
    /// Certainty levels `lo,mid,hi`.
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    sigma_start: Option<f64>,
    /// Denoising steps.
    #[arg(long)]
    steps: Option<usize>,
    /// 3D refinement steps per view.
    #[arg(long)]
    refine_steps: Option<usize>,
    /// Scene JSON or 3DGS PLY.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Training camera file.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    train_images: Option<PathBuf>,
    /// Trajectory (extrapolated) camera file.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    #[arg(long)]
    trajectory_images: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            c.synth.seed = seed;
            c.corrupt.seed = seed;
            c.pipeline.seed = seed;
        }
        if let Some(t) = self.threads {
            c.threads = Some(t);
        }
        if let Some(d) = &self.denoiser {
            c.denoiser.kind = d.clone();
        }
        if let Some(g) = &self.gamma {
            let [lo, mid, hi] = parse_gamma(g)?;
            c.pipeline.guidance.gamma.lo = lo;
            c.pipeline.guidance.gamma.mid = mid;
            c.pipeline.guidance.gamma.hi = hi;
        }
        if let Some(b) = self.beta {
            c.pipeline.guidance.beta = b;
        }
        if let Some(r) = self.rho {
            c.pipeline.guidance.rho = r;
        }
        if let Some(s) = self.sigma_start {
            c.pipeline.guidance.sigma_start = s;
        }
        if let Some(s) = self.steps {
            c.pipeline.guidance.steps = s;
        }
        if let Some(s) = self.refine_steps {
            c.pipeline.refine.steps = s;
        }
        let inputs = &mut c.inputs;
        for (slot, flag) in [
            (&mut inputs.scene, &self.scene),
            (&mut inputs.train, &self.train),
            (&mut inputs.train_images, &self.train_images),
            (&mut inputs.trajectory, &self.trajectory),
            (&mut inputs.trajectory_images, &self.trajectory_images),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        // the output location comes from `--out`, never from the echoed config
        c.pipeline.out_dir = None;
        Ok(c)
    }
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::InvalidArgument(format!("missing input: pass --{flag} or set it in the config")))
}

fn make_denoiser(config: &RunConfig, targets: Option<&Vec<AttributeImage>>) -> Result<Box<dyn Denoiser>> {
    let kind = config.denoiser.kind.as_str();
    if let Some(dir) = kind.strip_prefix("bridge:") {
        let timeout = Duration::from_secs_f64(config.denoiser.bridge_timeout_secs);
        return Ok(Box::new(external_denoiser_bridge(dir, timeout)?));
    }
    if kind == "identity" {
        return Ok(Box::new(IdentityDenoiser));
    }
    if !matches!(kind, "oracle" | "noisy-oracle" | "prior") {
        return Err(Error::UnknownKind(format!("denoiser `{kind}`")));
    }
    let targets = match targets {
        Some(t) if !t.is_empty() => t.clone(),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "denoiser `{kind}` needs trajectory images"
            )))
        }
    };
    let spread = config.denoiser.spread;
    Ok(match kind {
        "oracle" => Box::new(OracleDenoiser::per_view(targets)),
        "noisy-oracle" => Box::new(NoisyOracleDenoiser::per_view(targets, spread, config.pipeline.seed)),
        _ => Box::new(PriorDenoiser::per_view(targets, spread)),
    })
}

fn renders(scene: &GaussianScene, views: &ViewSet) -> Vec<AttributeImage> {
    views.views.iter().map(|v| render_color(v, scene)).collect()
}

fn cmd_synth(c: &RunConfig, out: &Path) -> Result<()> {
    let (scene, train, extrap) = make_synthetic_scene(&c.synth)?;
    save_scene(&scene, out.join("scene.json"))?;
    save_cameras(&train, out.join("train.json"))?;
    save_cameras(&extrap, out.join("extrap.json"))?;
    write_images(&out.join("train"), train.images.as_deref().unwrap_or_default())?;
    write_images(&out.join("extrap"), extrap.images.as_deref().unwrap_or_default())
}

fn cmd_corrupt(c: &RunConfig, out: &Path) -> Result<()> {
    let scene = load_any_scene(required(&c.inputs.scene, "scene")?)?;
    let train = load_views(required(&c.inputs.train, "train")?, None)?;
    let traj = load_views(required(&c.inputs.trajectory, "trajectory")?, None)?;
    let (corrupted, floaters) = corrupt_scene(&scene, &train, &traj, &c.corrupt)?;
    save_scene(&corrupted, out.join("scene.json"))?;
    write_text(&out.join("floaters.json"), &serde_json::to_string(&floaters).expect("indices serialize"))
}

fn cmd_fit(c: &RunConfig, out: &Path) -> Result<()> {
    let scene = load_any_scene(required(&c.inputs.scene, "scene")?)?;
    let train = load_views(
        required(&c.inputs.train, "train")?,
        Some(required(&c.inputs.train_images, "train-images")?),
    )?;
    let mut refine = c.pipeline.refine.clone();
    refine.seed = c.pipeline.seed;
    let (fitted, log) = refine_3d(&scene, &train, &mut FixedViewSet::new(), None, &refine)?;
    save_scene(&fitted, out.join("scene.json"))?;
    write_text(&out.join("fit_log.csv"), &refine_log_csv(&log))
}

fn cmd_render(c: &RunConfig, out: &Path) -> Result<()> {
    let scene = load_any_scene(required(&c.inputs.scene, "scene")?)?;
    let traj = load_views(required(&c.inputs.trajectory, "trajectory")?, None)?;
    write_images(out, &renders(&scene, &traj))
}

fn cmd_confidence(c: &RunConfig, out: &Path) -> Result<()> {
    let scene = load_any_scene(required(&c.inputs.scene, "scene")?)?;
    let train = load_views(required(&c.inputs.train, "train")?, None)?;
    let traj = load_views(required(&c.inputs.trajectory, "trajectory")?, None)?;
    let acc = accumulate_training_fisher(&scene, &train, c.pipeline.mask)?;
    for (i, view) in traj.views.iter().enumerate() {
        let dir = out.join(format!("view_{i}"));
        create_dir(&dir)?;
        for map in stage_confidence(&scene, &acc, view, i, &c.pipeline)? {
            let stem = format!("conf_{}", map.gamma);
            map.image.write_pfm(dir.join(format!("{stem}.pfm")))?;
            map.image.write_png(dir.join(format!("{stem}.png")))?;
            let (min, max) = map.image.min_max();
            let sidecar = serde_json::json!({
                "gamma": map.gamma,
                "min": min,
                "max": max,
                "mean": map.image.mean(),
            });
            write_text(&dir.join(format!("{stem}.json")), &sidecar.to_string())?;
        }
    }
    Ok(())
}

fn cmd_refine(c: &RunConfig, out: &Path) -> Result<()> {
    let scene = load_any_scene(required(&c.inputs.scene, "scene")?)?;
    let train = load_views(
        required(&c.inputs.train, "train")?,
        Some(required(&c.inputs.train_images, "train-images")?),
    )?;
    let traj = load_views(required(&c.inputs.trajectory, "trajectory")?, c.inputs.trajectory_images.as_deref())?;
    let mut denoiser = make_denoiser(c, traj.images.as_ref())?;
    let mut pipeline = c.pipeline.clone();
    pipeline.out_dir = Some(out.to_path_buf());
    let result = fix_trajectory(&scene, &train, &traj, &pipeline, denoiser.as_mut())?;
    log::info!("refined {} views", result.records.len());
    Ok(())
}

fn cmd_ablate(c: &RunConfig, out: &Path) -> Result<()> {
    let seeds = if c.ablation_seeds.is_empty() {
        vec![c.pipeline.seed]
    } else {
        c.ablation_seeds.clone()
    };
    let cases = seeds
        .iter()
        .map(|&seed| {
            let synth = splatfix::synth::SynthSpec {
                seed,
                ..c.synth.clone()
            };
            let corrupt = splatfix::synth::CorruptSpec {
                seed,
                ..c.corrupt.clone()
            };
            let (truth, train, traj) = make_synthetic_scene(&synth)?;
            let (scene, _) = corrupt_scene(&truth, &train, &traj, &corrupt)?;
            Ok(AblationCase {
                name: format!("{}-{seed}", synth_kind_name(&synth.kind)),
                seed,
                scene,
                train,
                trajectory: traj,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut make = |case: &AblationCase| {
        let per_case = RunConfig {
            pipeline: splatfix::pipeline::PipelineConfig {
                seed: case.seed,
                ..c.pipeline.clone()
            },
            ..c.clone()
        };
        make_denoiser(&per_case, case.trajectory.images.as_ref())
    };
    let table = run_ablation(&c.pipeline, &standard_variants(), &cases, &mut make)?;
    write_text(&out.join("ablation.csv"), &table.to_csv())?;
    write_text(&out.join("ablation.md"), &table.to_markdown())?;
    write_text(&out.join("reports.csv"), &reports_csv(&table.reports))
}

fn synth_kind_name(kind: &SceneKind) -> String {
    serde_json::to_value(kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

fn cmd_eval(c: &RunConfig, out: &Path) -> Result<()> {
    let predicted = read_all_images(required(&c.inputs.predicted, "predicted")?)?;
    let reference = read_all_images(required(&c.inputs.reference, "reference")?)?;
    let report = MetricReport::evaluate("eval", "predicted", c.pipeline.seed, &predicted, &reference)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&out.join("metrics.json"), &json)?;
    write_text(&out.join("metrics.csv"), &reports_csv(std::slice::from_ref(&report)))?;
    println!("{json}");
    Ok(())
}

type Handler = fn(&RunConfig, &Path) -> Result<()>;

fn run(cli: Cli) -> Result<()> {
    let (common, cmd): (&Common, Handler) = match &cli.command {
        Command::Synth { common, .. } => (common, cmd_synth),
        Command::Corrupt { common, .. } => (common, cmd_corrupt),
        Command::Fit { common } => (common, cmd_fit),
        Command::Render { common } => (common, cmd_render),
        Command::Confidence { common } => (common, cmd_confidence),
        Command::Refine { common } => (common, cmd_refine),
        Command::Ablate { common, .. } => (common, cmd_ablate),
        Command::Eval { common, .. } => (common, cmd_eval),
    };
    let mut config = common.resolve()?;
    match &cli.command {
        Command::Synth { kind: Some(k), .. } => config.synth.kind = *k,
        Command::Corrupt { count: Some(n), .. } => config.corrupt.count = *n,
        Command::Ablate { cases: Some(n), .. } => {
            let base = config.pipeline.seed;
            config.ablation_seeds = (base..base + n).collect();
        }
        Command::Eval {
            predicted, reference, ..
        } => {
            if predicted.is_some() {
                config.inputs.predicted.clone_from(predicted);
            }
            if reference.is_some() {
                config.inputs.reference.clone_from(reference);
            }
        }
        _ => {}
    }
    config.check()?;
    if let Some(n) = config.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    create_dir(&common.out)?;
    write_text(&common.out.join("effective_config.json"), &config.to_json())?;
    cmd(&config, &common.out)
}

fn fail(kind: &str, message: String) -> ExitCode {
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => return fail("usage", e.to_string()),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string()),
    }
}
