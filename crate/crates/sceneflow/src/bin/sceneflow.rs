//! Command-line interface for scene-flow estimation on RGB-D frame pairs.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sceneflow::geometry::{static_flow, unproject};
use sceneflow::icp::{icp_flow, icp_register, IcpConfig};
use sceneflow::losses::{total_loss, LevelInputs};
use sceneflow::optimizer::estimate_flow;
use sceneflow::preprocess::preprocess;
use sceneflow::{io, synth, Error, Result};

#[derive(Parser)]
#[command(name = "sceneflow", version, about = "Unsupervised 3D scene flow from RGB-D frame pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Unproject a 16-bit depth image to a PLY point cloud.
    Unproject(UnprojectArgs),
    /// Crop ground/sky, far range, and optionally occluded points.
    Preprocess(PreprocessArgs),
    /// Evaluate the loss components of a given flow on a frame pair.
    Loss(LossArgs),
    /// Estimate per-point scene flow for a frame pair.
    Estimate(EstimateArgs),
    /// Rigidly register two clouds with point-to-point ICP.
    Icp(IcpArgs),
    /// Compare a predicted flow file against ground truth.
    Eval(EvalArgs),
    /// Render a synthetic RGB-D scene bundle with ground truth.
    Synth(SynthArgs),
}

#[derive(Args)]
struct UnprojectArgs {
    /// 16-bit single-channel depth PNG; raw value 0 marks invalid pixels.
    #[arg(long)]
    depth: PathBuf,
    /// Text file with "fx fy cx cy".
    #[arg(long)]
    intrinsics: PathBuf,
    /// Optional 8-bit RGB PNG supplying per-point colors.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Output PLY path.
    #[arg(long)]
    out: PathBuf,
    /// Meters per raw depth unit.
    #[arg(long, default_value_t = io::DEPTH_SCALE)]
    depth_scale: f64,
    /// Write ascii PLY instead of binary little-endian.
    #[arg(long)]
    ascii: bool,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Input PLY cloud.
    #[arg(long = "in")]
    input: PathBuf,
    /// Flat key = value preprocess configuration.
    #[arg(long)]
    config: PathBuf,
    /// Camera pose frame1 -> frame2 (12 values, row-major [R|t]); enables the
    /// occlusion check together with --depth2 and --intrinsics.
    #[arg(long, requires_all = ["depth2", "intrinsics"])]
    pose: Option<PathBuf>,
    /// Frame-2 depth image for the occlusion check.
    #[arg(long, requires_all = ["pose", "intrinsics"])]
    depth2: Option<PathBuf>,
    /// Intrinsics for the occlusion check.
    #[arg(long, requires_all = ["pose", "depth2"])]
    intrinsics: Option<PathBuf>,
    /// Output PLY path.
    #[arg(long)]
    out: PathBuf,
    /// Meters per raw depth unit for --depth2.
    #[arg(long, default_value_t = io::DEPTH_SCALE)]
    depth_scale: f64,
    /// Write ascii PLY instead of binary little-endian.
    #[arg(long)]
    ascii: bool,
}

#[derive(Args)]
struct LossArgs {
    /// Frame-1 cloud (PLY).
    #[arg(long)]
    pc1: PathBuf,
    /// Frame-2 cloud (PLY).
    #[arg(long)]
    pc2: PathBuf,
    /// Overall flow (SFL1), aligned with --pc1.
    #[arg(long)]
    flow: PathBuf,
    /// Dynamic flow (SFL1); defaults to overall minus static.
    #[arg(long)]
    dynamic: Option<PathBuf>,
    /// Camera pose frame1 -> frame2.
    #[arg(long)]
    pose: PathBuf,
    /// Frame-2 depth image.
    #[arg(long)]
    depth2: PathBuf,
    /// Intrinsics file.
    #[arg(long)]
    intrinsics: PathBuf,
    /// Loss weights file; alpha must contain exactly one value because the
    /// command scores a single level.
    #[arg(long)]
    weights: PathBuf,
    /// Meters per raw depth unit for --depth2.
    #[arg(long, default_value_t = io::DEPTH_SCALE)]
    depth_scale: f64,
}

#[derive(Args)]
struct EstimateArgs {
    /// Frame-1 cloud (PLY).
    #[arg(long)]
    pc1: PathBuf,
    /// Frame-2 cloud (PLY).
    #[arg(long)]
    pc2: PathBuf,
    /// Camera pose frame1 -> frame2.
    #[arg(long)]
    pose: PathBuf,
    /// Frame-2 depth image.
    #[arg(long)]
    depth2: PathBuf,
    /// Intrinsics file.
    #[arg(long)]
    intrinsics: PathBuf,
    /// Optimizer configuration (flat key = value).
    #[arg(long)]
    config: PathBuf,
    /// Output overall flow (SFL1).
    #[arg(long)]
    out_flow: PathBuf,
    /// Optional CSV trace of accepted iterates.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Optional output for the dynamic flow component (SFL1).
    #[arg(long)]
    out_dynamic: Option<PathBuf>,
    /// Meters per raw depth unit for --depth2.
    #[arg(long, default_value_t = io::DEPTH_SCALE)]
    depth_scale: f64,
}

#[derive(Args)]
struct IcpArgs {
    /// Source cloud (PLY), registered onto the target.
    #[arg(long)]
    source: PathBuf,
    /// Target cloud (PLY).
    #[arg(long)]
    target: PathBuf,
    /// Output pose file (12 values, row-major [R|t]).
    #[arg(long)]
    out_pose: PathBuf,
    /// Optional rigid flow (SFL1) induced on the source cloud.
    #[arg(long)]
    out_flow: Option<PathBuf>,
    /// Maximum iterations.
    #[arg(long, default_value_t = IcpConfig::default().max_iterations)]
    max_iterations: usize,
    /// Convergence threshold on the RMS residual change.
    #[arg(long, default_value_t = IcpConfig::default().convergence_delta)]
    delta: f64,
    /// Correspondence gating distance in meters.
    #[arg(long, default_value_t = IcpConfig::default().max_correspondence_distance)]
    max_distance: f64,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted flow (SFL1).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth flow (SFL1), same length.
    #[arg(long)]
    gt: PathBuf,
    /// Emit CSV (header plus one row) instead of key-value lines.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Scene description (flat key = value).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory for the rendered bundle.
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR {}: {}", e.code(), e);
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Unproject(a) => cmd_unproject(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Loss(a) => cmd_loss(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Icp(a) => cmd_icp(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn cmd_unproject(a: UnprojectArgs) -> Result<()> {
    let depth = io::read_depth_image(&a.depth, a.depth_scale)?;
    let intr = io::read_intrinsics(&a.intrinsics)?;
    let image = a.image.as_deref().map(io::read_color_image).transpose()?;
    let cloud = unproject(&depth, &intr, image.as_ref())?;
    io::write_ply(&a.out, &cloud, !a.ascii)?;
    println!("unprojected {} points", cloud.len());
    Ok(())
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<()> {
    let cloud = io::read_ply(&a.input)?;
    let cfg = io::read_preprocess_config(&a.config)?;
    let frame2 = match (&a.pose, &a.depth2, &a.intrinsics) {
        (Some(p), Some(d), Some(k)) => Some((
            io::read_pose(p)?,
            io::read_depth_image(d, a.depth_scale)?,
            io::read_intrinsics(k)?,
        )),
        _ => None,
    };
    let frame2_ref = frame2.as_ref().map(|(p, d, k)| (p, d, k));
    let (kept, _indices) = preprocess(&cloud, &cfg, frame2_ref);
    io::write_ply(&a.out, &kept, !a.ascii)?;
    println!("kept {} removed {}", kept.len(), cloud.len() - kept.len());
    Ok(())
}

fn cmd_loss(a: LossArgs) -> Result<()> {
    let pc1 = io::read_ply(&a.pc1)?;
    let pc2 = io::read_ply(&a.pc2)?;
    let overall = io::read_flow(&a.flow)?;
    let pose = io::read_pose(&a.pose)?;
    let depth2 = io::read_depth_image(&a.depth2, a.depth_scale)?;
    let intr = io::read_intrinsics(&a.intrinsics)?;
    let weights = io::read_loss_weights(&a.weights)?;
    if weights.alpha.len() != 1 {
        return Err(Error::invalid(format!(
            "loss scores one level; alpha must have exactly 1 value, got {}",
            weights.alpha.len()
        )));
    }
    if overall.len() != pc1.len() {
        return Err(Error::invalid(format!(
            "flow has {} vectors for {} points",
            overall.len(),
            pc1.len()
        )));
    }
    let dynamic = match &a.dynamic {
        Some(p) => {
            let d = io::read_flow(p)?;
            if d.len() != pc1.len() {
                return Err(Error::invalid(format!(
                    "dynamic flow has {} vectors for {} points",
                    d.len(),
                    pc1.len()
                )));
            }
            d
        }
        None => {
            // Residual after removing camera-induced motion.
            let sf = static_flow(&pc1, &pose);
            sceneflow::geometry::FlowField {
                vectors: overall
                    .vectors
                    .iter()
                    .zip(&sf.vectors)
                    .map(|(o, s)| o - s)
                    .collect(),
            }
        }
    };
    let point_count = pc1.len();
    let level = LevelInputs {
        pc1,
        pc2,
        overall,
        dynamic,
    };
    let result = total_loss(&[level], &depth2, &intr, &pose, &weights, 9)?;
    print!("{}", result.levels[0].to_kv(point_count));
    Ok(())
}

fn cmd_estimate(a: EstimateArgs) -> Result<()> {
    let pc1 = io::read_ply(&a.pc1)?;
    let pc2 = io::read_ply(&a.pc2)?;
    let pose = io::read_pose(&a.pose)?;
    let depth2 = io::read_depth_image(&a.depth2, a.depth_scale)?;
    let intr = io::read_intrinsics(&a.intrinsics)?;
    let cfg = io::read_optimizer_config(&a.config)?;
    let estimate = estimate_flow(&pc1, &pc2, &depth2, &intr, &pose, &cfg)?;
    io::write_flow(&a.out_flow, &estimate.overall)?;
    if let Some(p) = &a.out_dynamic {
        io::write_flow(p, &estimate.dynamic)?;
    }
    if let Some(p) = &a.trace {
        let mut csv = String::from("level,iteration,depth1,depth2,ds,chamfer,laplacian,total\n");
        for e in &estimate.loss_trace {
            let b = &e.breakdown;
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                e.level, e.iteration, b.depth1, b.depth2, b.ds, b.chamfer, b.laplacian, b.total
            ));
        }
        fs::write(p, csv).map_err(|e| Error::io(p, e))?;
    }
    println!(
        "estimated flow for {} points over {} accepted iterations",
        estimate.overall.len(),
        estimate.loss_trace.len()
    );
    Ok(())
}

fn cmd_icp(a: IcpArgs) -> Result<()> {
    let source = io::read_ply(&a.source)?;
    let target = io::read_ply(&a.target)?;
    let cfg = IcpConfig {
        max_iterations: a.max_iterations,
        convergence_delta: a.delta,
        max_correspondence_distance: a.max_distance,
    };
    let result = icp_register(&source, &target, &cfg)?;
    io::write_pose(&a.out_pose, &result.transform)?;
    if let Some(p) = &a.out_flow {
        io::write_flow(p, &icp_flow(&source, &result.transform))?;
    }
    println!(
        "converged in {} iterations, rms residual {:.6e}",
        result.iterations_used, result.rms_residual
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let pred = io::read_flow(&a.pred)?;
    let gt = io::read_flow(&a.gt)?;
    let m = sceneflow::eval::evaluate(&pred, &gt)?;
    if a.csv {
        println!("epe3d,acc3d_strict,acc3d_relax,outliers3d,point_count");
        println!(
            "{},{},{},{},{}",
            m.epe3d, m.acc3d_strict, m.acc3d_relax, m.outliers3d, m.point_count
        );
    } else {
        print!(
            "epe3d {}\nacc3d_strict {}\nacc3d_relax {}\noutliers3d {}\npoint_count {}\n",
            m.epe3d, m.acc3d_strict, m.acc3d_relax, m.outliers3d, m.point_count
        );
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = io::read_scene_spec(&a.spec)?;
    let out = synth::render(&spec)?;
    let dir = &a.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = |name: &str| dir.join(name);

    io::write_depth_image(p("depth1.png"), &out.depth1, io::DEPTH_SCALE)?;
    io::write_depth_image(p("depth2.png"), &out.depth2, io::DEPTH_SCALE)?;
    io::write_color_image(p("image1.png"), &out.image1)?;
    io::write_color_image(p("image2.png"), &out.image2)?;
    io::write_intrinsics(p("intrinsics.txt"), &spec.intrinsics)?;
    io::write_pose(p("pose.txt"), &out.gt_pose)?;
    io::write_flow(p("gt_flow.sfl"), &out.gt_flow)?;
    write_mask(&p("occlusion_mask.txt"), &out.occlusion_mask)?;

    // Full-precision clouds; the PNG depths are quantized to 1/256 m.
    let pc1 = unproject(&out.depth1, &spec.intrinsics, Some(&out.image1))?;
    let pc2 = unproject(&out.depth2, &spec.intrinsics, Some(&out.image2))?;
    io::write_ply(p("pc1.ply"), &pc1, true)?;
    io::write_ply(p("pc2.ply"), &pc2, true)?;

    println!(
        "rendered {}x{} scene: {} frame-1 points, {} occluded",
        spec.width,
        spec.height,
        out.gt_flow.len(),
        out.occlusion_mask.iter().filter(|&&m| m).count()
    );
    Ok(())
}

fn write_mask(path: &Path, mask: &[bool]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for &m in mask {
        writeln!(w, "{}", u8::from(m)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
