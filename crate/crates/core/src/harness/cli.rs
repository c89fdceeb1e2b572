//! Command-line interface: dataset generation, training, sampling,
//! upsampling, likelihood, and evaluation. Exit codes: 0 success, 1 runtime
//! failure, 2 usage error.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::conditioning::image::read_image;
use crate::conditioning::ConditioningMode;
use crate::diffusion::EmaState;
use crate::error::{Error, Result};
use crate::geometry::io::{read_pcb, write_pcb, write_ply};
use crate::geometry::{fit_normalization, NormalizationMode, PointCloud};
use crate::harness::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::harness::config::ConfigFile;
use crate::harness::dataset::{gen_dataset, load_dataset, DatasetSpec, ShapeClass};
use crate::harness::train::{train, TrainConfig};
use crate::metrics::{
    chamfer, emd, evaluate_sets, icp_align, write_mtx1, ChamferNorm, EmdMethod, PairMetric,
};
use crate::model::NetModel;
use crate::rng::StreamRng;
use crate::samplers::{
    log_likelihood, sample, upsample_cached, upsample_inpaint, DivergenceMethod, SamplerConfig,
    SamplerKind,
};
use crate::scorenet::NetConfig;

#[derive(Parser)]
#[command(name = "pcdiff", version, about = "Point-cloud diffusion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shape dataset.
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Draw samples from a trained model.
    Sample(SampleArgs),
    /// Upsample a point cloud by inpainting.
    Upsample(UpsampleArgs),
    /// Exact or probed log-likelihood of clouds under a model.
    Likelihood(LikelihoodArgs),
    /// Generative metrics between a reference and a generated batch.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Comma-separated shape families (sphere,box,torus).
    #[arg(long, default_value = "sphere,box,torus")]
    families: String,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 128)]
    points: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Optional config file; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory from gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    data_fraction: Option<f64>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// none, projective, or global.
    #[arg(long)]
    conditioning: Option<String>,
    /// Diffuse in camera-frustum coordinates.
    #[arg(long)]
    frustum: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// global or none.
    #[arg(long)]
    normalization: Option<String>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Number of clouds.
    #[arg(long, default_value_t = 1)]
    n: usize,
    /// Points per cloud.
    #[arg(long, default_value_t = 128)]
    points: usize,
    /// sde or ode.
    #[arg(long, default_value = "sde")]
    sampler: String,
    #[arg(long, default_value_t = 128)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Conditioning image (IMG1/PGM/PPM) for conditional models.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Optional ASCII PLY export of the first sampled cloud.
    #[arg(long)]
    ply: Option<PathBuf>,
    /// Use the raw (non-EMA) weights.
    #[arg(long)]
    no_ema: bool,
}

#[derive(Args)]
struct UpsampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Input .pcb; the first cloud is the context.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    target_m: usize,
    #[arg(long, default_value_t = 4)]
    resample_substeps: usize,
    /// Use the inducer-cache upsampler.
    #[arg(long)]
    cached: bool,
    /// New points per conditionally-independent completion.
    #[arg(long)]
    tile_new: Option<usize>,
    #[arg(long, default_value_t = 64)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    image: Option<PathBuf>,
}

#[derive(Args)]
struct LikelihoodArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// exact or probe.
    #[arg(long, default_value = "exact")]
    divergence: String,
    #[arg(long, default_value_t = 64)]
    probes: usize,
    #[arg(long, default_value_t = 128)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output text file (also printed to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Reference batch (.pcb).
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Generated batch (.pcb).
    #[arg(long)]
    gen: PathBuf,
    /// Comma-separated pair metrics: cd, cd-l1, emd.
    #[arg(long, default_value = "cd")]
    metrics: String,
    /// ICP-align each generated cloud to its paired reference first.
    #[arg(long)]
    icp: bool,
    /// Estimate scale during ICP.
    #[arg(long)]
    icp_scale: bool,
    /// Apply per-shape normalization to every cloud before comparing.
    #[arg(long)]
    normalize_per_shape: bool,
    /// Write the report rows to this file.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Dump the reference x generated distance matrix (MTX1).
    #[arg(long)]
    mtx: Option<PathBuf>,
}

/// Run the CLI; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version on stdout with code 0
            let code = e.exit_code();
            let _ = e.print();
            return if code == 0 { 0 } else { 2 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Upsample(a) => cmd_upsample(a),
        Command::Likelihood(a) => cmd_likelihood(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    }
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let spec = DatasetSpec {
        families: ShapeClass::parse_list(&a.families)?,
        count: a.count,
        points: a.points,
        image_size: a.image_size,
        seed: a.seed,
    };
    gen_dataset(&spec, &a.out)?;
    println!(
        "wrote {} scenes ({} points, {}x{} images) to {}",
        spec.count,
        spec.points,
        spec.image_size,
        spec.image_size,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let file = match &a.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let defaults = TrainConfig::default();
    let tcfg = TrainConfig {
        steps: a.steps.or(file.get("train", "steps")?).unwrap_or(defaults.steps),
        batch: a.batch.or(file.get("train", "batch")?).unwrap_or(defaults.batch),
        lr: a.lr.or(file.get("train", "lr")?).unwrap_or(defaults.lr),
        data_fraction: a
            .data_fraction
            .or(file.get("train", "data_fraction")?)
            .unwrap_or(defaults.data_fraction),
        eval_every: a
            .eval_every
            .or(file.get("train", "eval_every")?)
            .unwrap_or(defaults.eval_every),
        points_per_cloud: a
            .points
            .or(file.get("train", "points")?)
            .unwrap_or(defaults.points_per_cloud),
        mode: ConditioningMode::parse(
            a.conditioning
                .or(file.get("train", "conditioning")?)
                .as_deref()
                .unwrap_or("none"),
        )?,
        norm_mode: NormalizationMode::parse(
            a.normalization
                .or(file.get("train", "normalization")?)
                .as_deref()
                .unwrap_or("global"),
        )?,
        frustum: a.frustum || file.get("train", "frustum")?.unwrap_or(false),
        seed: a.seed.or(file.get("train", "seed")?).unwrap_or(defaults.seed),
        ema_rate: file.get("train", "ema_rate")?.unwrap_or(defaults.ema_rate),
        sigma_max_samples: defaults.sigma_max_samples,
    };
    let ncfg = NetConfig {
        layers: file.get("net", "layers")?.unwrap_or(NetConfig::desk().layers),
        d_nn: file.get("net", "d_nn")?.unwrap_or(NetConfig::desk().d_nn),
        inducers: file
            .get("net", "inducers")?
            .unwrap_or(NetConfig::desk().inducers),
        heads: file.get("net", "heads")?.unwrap_or(NetConfig::desk().heads),
        groups: file.get("net", "groups")?.unwrap_or(NetConfig::desk().groups),
        d_ff: file.get("net", "d_ff")?.unwrap_or(NetConfig::desk().d_ff),
        d_emb: file.get("net", "d_emb")?.unwrap_or(NetConfig::desk().d_emb),
        gaussian_a: file
            .get("net", "gaussian_a")?
            .unwrap_or(NetConfig::desk().gaussian_a),
    };
    let dataset = load_dataset(&a.data)?;
    let outcome = train(&dataset, &tcfg, &ncfg, None)?;
    save_checkpoint(
        &a.out,
        &outcome.model,
        &outcome.ema,
        outcome.step,
        tcfg.points_per_cloud,
    )?;
    let last = outcome.loss_history.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} steps (final loss {last:.6}), checkpoint at {}",
        outcome.step,
        a.out.display()
    );
    if outcome.diverged {
        return Err(Error::TrainingDivergence(format!(
            "loss diverged at step {}; last-good checkpoint saved to {}",
            outcome.step,
            a.out.display()
        )));
    }
    Ok(())
}

/// Load a checkpoint and prepare it for inference (EMA weights unless told
/// otherwise, conditioning image attached when given).
fn inference_model(
    ckpt: &std::path::Path,
    image: &Option<PathBuf>,
    use_ema: bool,
) -> Result<(NetModel, EmaState, usize)> {
    let Checkpoint {
        mut model,
        mut ema,
        train_points,
        ..
    } = load_checkpoint(ckpt)?;
    if use_ema {
        ema.swap(model.params.tensors_mut())?;
    }
    match (&image, model.mode) {
        (Some(path), ConditioningMode::None) => {
            return Err(Error::UsageError(format!(
                "model is unconditional but an image was given ({})",
                path.display()
            )))
        }
        (Some(path), _) => {
            let img = read_image(path)?;
            model.set_image(&img)?;
        }
        (None, ConditioningMode::None) => {}
        (None, _) => {
            return Err(Error::UsageError(
                "conditional model needs --image".into(),
            ))
        }
    }
    Ok((model, ema, train_points))
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let (model, _, _) = inference_model(&a.ckpt, &a.image, !a.no_ema)?;
    let mut scfg = match SamplerKind::parse(&a.sampler)? {
        SamplerKind::Sde => SamplerConfig::sde(a.steps),
        SamplerKind::Ode => SamplerConfig::ode(a.steps),
    };
    scfg.steps = a.steps;
    let master = StreamRng::stream(a.seed, 0);
    let mut clouds = Vec::with_capacity(a.n);
    for i in 0..a.n {
        let mut rng = master.substream(i as u64);
        let diff = sample(&model, &scfg, a.points, &mut rng)?;
        clouds.push(model.frame.diffusion_to_world(&diff)?);
    }
    write_pcb(&a.out, &clouds)?;
    if let Some(ply) = &a.ply {
        write_ply(ply, &clouds[0])?;
    }
    println!(
        "sampled {} cloud(s) of {} points to {}",
        a.n,
        a.points,
        a.out.display()
    );
    Ok(())
}

fn cmd_upsample(a: UpsampleArgs) -> Result<()> {
    let (model, _, train_points) = inference_model(&a.ckpt, &a.image, true)?;
    let clouds = read_pcb(&a.input)?;
    let context_world = clouds
        .first()
        .ok_or_else(|| Error::UsageError("input batch is empty".into()))?;
    let context = model.frame.world_to_diffusion(context_world)?;
    let scfg = SamplerConfig::ode(a.steps);
    let mut rng = StreamRng::new(a.seed);
    let n = context.nrows();
    let result = if a.cached {
        if a.target_m <= n {
            return Err(Error::UsageError(format!(
                "target m {} must exceed the context size {n}",
                a.target_m
            )));
        }
        let per_tile = a.tile_new.unwrap_or(train_points.max(1)).max(1);
        let tiles = (a.target_m - n).div_ceil(per_tile);
        let full = upsample_cached(
            &model,
            &context,
            per_tile,
            tiles,
            &scfg,
            a.resample_substeps,
            &mut rng,
        )?;
        full.slice(ndarray::s![..a.target_m, ..]).to_owned()
    } else {
        upsample_inpaint(
            &model,
            &context,
            a.target_m,
            &scfg,
            a.resample_substeps,
            a.tile_new,
            Some(train_points),
            &mut rng,
        )?
    };
    // context back-maps exactly: replace the mapped block with the original
    let world = model.frame.diffusion_to_world(&result)?;
    let mut pts = world.into_points();
    for (i, row) in context_world.points().rows().into_iter().enumerate() {
        pts.row_mut(i).assign(&row);
    }
    write_pcb(&a.out, &[PointCloud::euclidean(pts)?])?;
    println!(
        "upsampled {n} -> {} points ({}) to {}",
        a.target_m,
        if a.cached { "cached" } else { "inpaint" },
        a.out.display()
    );
    Ok(())
}

fn cmd_likelihood(a: LikelihoodArgs) -> Result<()> {
    let (model, _, _) = inference_model(&a.ckpt, &a.image, true)?;
    let clouds = read_pcb(&a.input)?;
    let method = match a.divergence.as_str() {
        "exact" => DivergenceMethod::Exact,
        "probe" => DivergenceMethod::StochasticProbe,
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown divergence method {other:?}"
            )))
        }
    };
    let mut lines = String::new();
    for (i, world) in clouds.iter().enumerate() {
        let diff = model.frame.world_to_diffusion(world)?;
        let mut rng = StreamRng::stream(a.seed, i as u64);
        let res = log_likelihood(&model, &diff, a.steps, method, a.probes, &mut rng)?;
        let method_name = match res.divergence_method {
            DivergenceMethod::Exact => "exact",
            DivergenceMethod::StochasticProbe => "stochastic-probe",
        };
        let line = format!(
            "{i} {} {} {} {method_name}",
            res.total, res.log_density, res.frame_correction
        );
        println!("{line}");
        lines.push_str(&line);
        lines.push('\n');
    }
    if let Some(out) = &a.out {
        std::fs::write(out, lines)?;
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let mut refs = read_pcb(&a.reference)?;
    let mut gens = read_pcb(&a.gen)?;
    if a.normalize_per_shape {
        let normalize = |clouds: &mut Vec<PointCloud>| -> Result<()> {
            for c in clouds.iter_mut() {
                let stats = fit_normalization(
                    std::slice::from_ref(c),
                    NormalizationMode::PerShape,
                )?
                .for_cloud(c)?;
                *c = stats.apply(c)?;
            }
            Ok(())
        };
        normalize(&mut refs)?;
        normalize(&mut gens)?;
    }
    if a.icp {
        if refs.len() != gens.len() {
            return Err(Error::UsageError(
                "--icp pairs clouds by index and needs equal batch sizes".into(),
            ));
        }
        for (g, r) in gens.iter_mut().zip(refs.iter()) {
            let res = icp_align(g, r, a.icp_scale, 50, 1e-9)?;
            *g = res.aligned;
        }
    }

    let mut rows = String::new();
    for name in a.metrics.split(',') {
        let metric = PairMetric::parse(name.trim())?;
        if refs.len() == gens.len() {
            let report = evaluate_sets(&refs, &gens, metric)?;
            rows.push_str(&report.table_rows());
            if let Some(mtx) = &a.mtx {
                write_mtx1(mtx, &report.matrix)?;
            }
            // paired reconstruction protocol
            let mut paired = 0.0;
            for (r, g) in refs.iter().zip(gens.iter()) {
                paired += match metric {
                    PairMetric::Cd => chamfer(r, g, ChamferNorm::SquaredL2)?,
                    PairMetric::CdL1 => chamfer(r, g, ChamferNorm::L1OfL2)?,
                    PairMetric::Emd => emd(r, g, EmdMethod::Exact)?,
                };
            }
            rows.push_str(&format!(
                "paired-mean,{},{}\n",
                metric.name(),
                paired / refs.len() as f64
            ));
        } else {
            // unequal sizes: only matrix-based metrics are defined
            let matrix = crate::metrics::pairwise_matrix(&refs, &gens, metric)?;
            rows.push_str(&format!(
                "cov,{},{}\nmmd,{},{}\n",
                metric.name(),
                crate::metrics::coverage(&matrix),
                metric.name(),
                crate::metrics::mmd(&matrix)
            ));
            if let Some(mtx) = &a.mtx {
                write_mtx1(mtx, &matrix)?;
            }
        }
    }
    print!("{rows}");
    if let Some(path) = &a.report {
        std::fs::write(path, rows)?;
    }
    Ok(())
}
