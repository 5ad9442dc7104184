use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use codemap::config::RunConfig;
use codemap::fusion::{extract_mesh, fuse_views};
use codemap::image::{Channel, DenseImage};
use codemap::io::{load_sequence, read_float_image, save_sequence, write_float_image, write_ply};
use codemap::noise_sim::{build_training_pair, EmgParams, GroundTruthFrame, DEFAULT_KEYPOINTS};
use codemap::optimizer::FactorFlags;
use codemap::pipeline::{
    collect_metrics, evaluate, metrics_csv, run_lockstep, KeyframePacket, MapperService, MapperState,
};
use codemap::synth::{make_sequence, nearest_neighbor, preset, SceneSpec, SequenceOptions};

#[derive(Parser)]
#[command(name = "codemap", version, about = "Dense depth mapping from sparse SLAM keyframes")]
struct Cli {
    /// Worker threads for rendering, factor evaluation and fusion (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic sequence with ground truth.
    Simulate(SimulateArgs),
    /// Build decoder training pairs with simulated SLAM noise.
    Perturb(PerturbArgs),
    /// Predict and refine depth for every keyframe of a sequence.
    Map(MapArgs),
    /// Fuse depth maps into a TSDF volume and write its mesh.
    Fuse(FuseArgs),
    /// Compare predicted depth maps with ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scene file, or one of the presets: wall, textureless, plane, box.
    #[arg(long)]
    scene: String,
    #[arg(long)]
    out: PathBuf,
    /// Frames to render for a preset scene.
    #[arg(long, default_value_t = 6)]
    frames: usize,
    /// Perturb sparse points with EMG reprojection noise.
    #[arg(long)]
    noise: bool,
    #[arg(long, value_parser = parse_emg)]
    emg: Option<EmgParams>,
    #[arg(long, default_value_t = 500)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PerturbArgs {
    /// Sequence directory with ground-truth depth.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// EMG parameters as K,LOC,SCALE.
    #[arg(long, value_parser = parse_emg, default_value = "4.31,0.44,0.20")]
    emg: EmgParams,
    #[arg(long, default_value_t = DEFAULT_KEYPOINTS)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct MapArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated factor types to enable, overriding the config
    /// (photometric, reprojection, geometric, prior).
    #[arg(long)]
    factors: Option<String>,
    /// Run the mapper on its own thread, coalescing windows that queue up
    /// while a solve runs. The default replays keyframes one at a time.
    #[arg(long)]
    threaded: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum DepthSource {
    Initial,
    Refined,
    Gt,
}

#[derive(Args)]
struct FuseArgs {
    /// Sequence directory providing poses and intrinsics.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "refined")]
    depths: DepthSource,
    /// Output directory of `codemap map`; required unless fusing ground truth.
    #[arg(long)]
    maps: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of `<id>.pfm` depth maps, or a sequence directory (its ground truth is used).
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_emg(s: &str) -> Result<EmgParams, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("bad number `{t}`")))
        .collect::<Result<_, _>>()?;
    let [k, loc, scale] = v[..] else {
        return Err(format!("expected K,LOC,SCALE, got `{s}`"));
    };
    EmgParams::new(k, loc, scale).map_err(|e| e.to_string())
}

fn parse_factors(s: &str) -> Result<FactorFlags> {
    let mut f = FactorFlags { photometric: false, reprojection: false, geometric: false, prior: false };
    for name in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match name {
            "photometric" => f.photometric = true,
            "reprojection" => f.reprojection = true,
            "geometric" => f.geometric = true,
            "prior" => f.prior = true,
            other => bail!("unknown factor type `{other}`"),
        }
    }
    ensure!(f.prior, "the zero-code prior cannot be disabled");
    Ok(f)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn depth_file(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("{id:06}.pfm"))
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let path = Path::new(&args.scene);
    let spec = if path.is_file() {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        SceneSpec::parse(&text).with_context(|| format!("parsing scene {}", path.display()))?
    } else {
        match preset(&args.scene, args.frames, args.seed) {
            Some(s) => s,
            None => bail!("`{}` is neither a scene file nor a preset (wall, textureless, plane, box)", args.scene),
        }
    };
    let noise = match (args.noise, args.emg) {
        (_, Some(e)) => Some(e),
        (true, None) => Some(EmgParams::default()),
        (false, None) => None,
    };
    let opts = SequenceOptions { n_points: args.points, noise, seed: args.seed, ..Default::default() };
    let packets = make_sequence(&spec, &opts)?;
    save_sequence(&args.out, &packets)?;
    info!("wrote {} keyframes to {}", packets.len(), args.out.display());
    Ok(())
}

fn perturb(args: &PerturbArgs) -> Result<()> {
    let packets = load_sequence(&args.input)?;
    let trajectory: Vec<_> = packets.iter().map(|p| p.pose).collect();
    let mut pairs = Vec::new();
    for (f, p) in packets.iter().enumerate() {
        let Some(gt) = &p.gt_depth else {
            warn!("keyframe {}: no ground-truth depth, skipped", p.id);
            continue;
        };
        let Some(n) = nearest_neighbor(&trajectory, f) else {
            warn!("keyframe {}: no other keyframe within 2 m, skipped", p.id);
            continue;
        };
        let frame = GroundTruthFrame { intensity: &p.intensity, depth: gt, pose: p.pose };
        let pair =
            build_training_pair(&frame, &trajectory[n], &p.intrinsics, Some(&args.emg), args.points, args.seed.wrapping_add(p.id))
                .with_context(|| format!("keyframe {}", p.id))?;
        if pair.dropped > 0 {
            info!("keyframe {}: {} points without a perturbation root dropped", p.id, pair.dropped);
        }
        pairs.push(KeyframePacket {
            sparse_depth: pair.conditioning.sparse_depth,
            rep_error: pair.conditioning.rep_error,
            observations: pair.observations,
            matches: Vec::new(),
            gt_depth: Some(pair.gt_depth),
            ..p.clone()
        });
    }
    ensure!(!pairs.is_empty(), "no keyframe has a neighbor within 2 m");
    save_sequence(&args.out, &pairs)?;
    println!("{} training pairs from {} keyframes", pairs.len(), packets.len());
    Ok(())
}

fn map(args: &MapArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(f) = &args.factors {
        cfg.optimizer.flags = parse_factors(f)?;
    }
    let decoder = cfg.decoder()?;
    let packets = load_sequence(&args.input)?;
    let state = if args.threaded {
        let handle = MapperService::spawn(decoder, cfg.optimizer.clone(), cfg.window_size);
        for p in packets {
            handle.ingest(p)?;
        }
        let (state, errors) = handle.finish()?;
        ensure!(errors.is_empty(), "mapper reported {} error(s): {}", errors.len(), errors.join("; "));
        state
    } else {
        run_lockstep(packets, MapperState::with_window_size(cfg.window_size), &decoder, &cfg.optimizer)?
    };
    for id in state.skipped() {
        warn!("keyframe {id} was skipped");
    }
    for (name, maps) in [("initial", state.initial_depths()), ("refined", state.refined_depths())] {
        let dir = args.out.join(name);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for (id, depth) in maps {
            write_float_image(&depth_file(&dir, *id), depth)?;
        }
    }
    let rows = collect_metrics(&state)?;
    if !rows.is_empty() {
        let csv = metrics_csv(&rows);
        fs::write(args.out.join("metrics.csv"), &csv)?;
        print!("{csv}");
    }
    info!(
        "{} keyframes, {} predictions, {} windows processed",
        state.keyframe_ids().count(),
        state.predictions,
        state.windows_processed
    );
    Ok(())
}

fn fuse(args: &FuseArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let packets = load_sequence(&args.input)?;
    let k = packets.first().context("empty sequence")?.intrinsics;
    let mut depths = Vec::new();
    for p in &packets {
        let depth = match args.depths {
            DepthSource::Gt => match &p.gt_depth {
                Some(d) => d.clone(),
                None => bail!("keyframe {} has no ground-truth depth", p.id),
            },
            DepthSource::Initial | DepthSource::Refined => {
                let maps = args.maps.as_ref().context("--maps is required for initial/refined depths")?;
                let sub = if matches!(args.depths, DepthSource::Initial) { "initial" } else { "refined" };
                let path = depth_file(&maps.join(sub), p.id);
                if !path.is_file() {
                    warn!("keyframe {}: {} missing, not fused", p.id, path.display());
                    continue;
                }
                read_float_image(&path, Channel::Depth)?
            }
        };
        depths.push((depth, p.pose));
    }
    ensure!(!depths.is_empty(), "no depth maps to fuse");
    let views: Vec<_> = depths.iter().map(|(d, p)| (d, p)).collect();
    let vol = fuse_views(&views, &k, cfg.fusion)?;
    let mesh = extract_mesh(&vol);
    write_ply(&args.out, &mesh)?;
    println!("fused {} depth maps: {} vertices, {} faces", views.len(), mesh.vertices.len(), mesh.triangles.len());
    Ok(())
}

/// Depth maps keyed by keyframe id: ground truth of a sequence directory,
/// or every `<id>.pfm` in a plain directory.
fn read_depths(dir: &Path) -> Result<BTreeMap<u64, DenseImage>> {
    if dir.join(codemap::io::MANIFEST_FILE).is_file() {
        return load_sequence(dir)?
            .into_iter()
            .map(|p| match p.gt_depth {
                Some(d) => Ok((p.id, d)),
                None => bail!("{}: keyframe {} has no ground-truth depth", dir.display(), p.id),
            })
            .collect();
    }
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("pfm") {
            continue;
        }
        let Some(id) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<u64>().ok()) else {
            continue;
        };
        out.insert(id, read_float_image(&path, Channel::Depth)?);
    }
    ensure!(!out.is_empty(), "{} holds no depth maps", dir.display());
    Ok(out)
}

fn eval(args: &EvalArgs) -> Result<()> {
    let pred = read_depths(&args.pred)?;
    let gt = read_depths(&args.gt)?;
    let mut table = String::from("kf_id,mae,rmse\n");
    let (mut mae_sum, mut rmse_sum, mut n) = (0.0, 0.0, 0usize);
    for (id, g) in &gt {
        let Some(p) = pred.get(id) else {
            warn!("keyframe {id}: no prediction");
            continue;
        };
        let (mae, rmse) = evaluate(p, g).with_context(|| format!("keyframe {id}"))?;
        table.push_str(&format!("{id},{mae:.6},{rmse:.6}\n"));
        mae_sum += mae;
        rmse_sum += rmse;
        n += 1;
    }
    ensure!(n > 0, "no keyframe has both a prediction and ground truth");
    table.push_str(&format!("mean,{:.6},{:.6}\n", mae_sum / n as f64, rmse_sum / n as f64));
    print!("{table}");
    if let Some(out) = &args.out {
        fs::write(out, &table).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CODEMAP_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        ensure!(j > 0, "--jobs must be positive");
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global()?;
    }
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Perturb(a) => perturb(a),
        Command::Map(a) => map(a),
        Command::Fuse(a) => fuse(a),
        Command::Eval(a) => eval(a),
    }
}
