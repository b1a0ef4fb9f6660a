//! Command-line front end: training, evaluation, planning, and the
//! end-to-end pipeline.

use clap::{Parser, Subcommand};
use loinprep::cutting::{self, CutSegmentProfile, KnifeModel, StrokeDirection};
use loinprep::rl;
use loinprep::sim::ShapeId;
use nalgebra::Vector3;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "loinprep", version, about = "Loin preparation toolkit: shape servoing, cut planning, tactile monitoring, visual picking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the shape-servoing policy in the soft-body simulator.
    Train {
        /// JSON config; defaults to the desk-scale preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (checkpoint + return curve).
        #[arg(long, default_value = "out/train")]
        out: PathBuf,
    },
    /// Evaluate a trained policy on seeded episodes of one shape preset.
    EvalShape {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Initial shape preset: L, C or Z.
        #[arg(long)]
        shape: String,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON config for the episode environment (desk preset if absent).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Plan a slice cut and export per-segment trajectory CSVs.
    PlanCut {
        /// Slice thickness in metres (positions the follow-up cut).
        #[arg(long, default_value_t = 0.007)]
        thickness: f64,
        /// Knife tilt in degrees.
        #[arg(long, default_value_t = 0.0)]
        tilt: f64,
        /// 1 = single backward stroke, 2 = forward then backward.
        #[arg(long, default_value_t = 1)]
        strokes: usize,
        /// Product height in metres (the knife descends through it plus a
        /// small over-penetration margin).
        #[arg(long, default_value_t = 0.05)]
        height: f64,
        /// Stroke length in metres.
        #[arg(long, default_value_t = 0.15)]
        length: f64,
        /// Knife model JSON; defaults to the built-in sashimi blade.
        #[arg(long)]
        knife: Option<PathBuf>,
        #[arg(long, default_value = "out/plan-cut")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn load_rl_config(path: &Option<PathBuf>) -> anyhow::Result<rl::RlConfig> {
    match path {
        None => Ok(rl::RlConfig::desk()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| anyhow::anyhow!("reading {}: {e}", p.display()))?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn parse_shape(s: &str) -> anyhow::Result<ShapeId> {
    match s.to_ascii_uppercase().as_str() {
        "STRAIGHT" => Ok(ShapeId::Straight),
        "L" => Ok(ShapeId::L),
        "C" => Ok(ShapeId::C),
        "Z" => Ok(ShapeId::Z),
        "ARBITRARY" => Ok(ShapeId::Arbitrary),
        other => anyhow::bail!("unknown shape preset {other:?} (expected L, C or Z)"),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = load_rl_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let report = rl::train(&cfg, &out)?;
            println!(
                "trained {} episodes ({} updates); checkpoint {}",
                report.episodes,
                report.updates,
                report.checkpoint.display()
            );
            if let (Some(first), Some(last)) = (report.curve.first(), report.curve.last()) {
                println!(
                    "return: first set {:.3} ± {:.3}, last set {:.3} ± {:.3}",
                    first.mean_return, first.std_return, last.mean_return, last.std_return
                );
            }
            Ok(())
        }
        Command::EvalShape {
            checkpoint,
            shape,
            trials,
            seed,
            config,
        } => {
            let cfg = load_rl_config(&config)?;
            let preset = parse_shape(&shape)?;
            let server = rl::ActServer::load(&checkpoint)?;
            let report = rl::evaluate(&server, &cfg, preset, trials, seed)?;
            println!(
                "{}/{} trials converged; mean pushes on success {:.2}",
                report.successes, report.trials, report.mean_pushes_on_success
            );
            for (i, p) in report.pushes.iter().enumerate() {
                match p {
                    Some(k) => println!("trial {i}: converged after {k} pushes"),
                    None => println!("trial {i}: did not converge"),
                }
            }
            Ok(())
        }
        Command::PlanCut {
            thickness,
            tilt,
            strokes,
            height,
            length,
            knife,
            out,
        } => {
            if !(0.005..=0.02).contains(&thickness) {
                eprintln!(
                    "warning: slice thickness {thickness} m is outside the 5-20 mm range \
                     known to cut cleanly"
                );
            }
            let knife = match &knife {
                Some(p) => KnifeModel::load(p)?,
                None => KnifeModel::sashimi_default(),
            };
            let tilt_rad = tilt.to_radians();
            let descent = height + cutting::DEFAULT_OVER_PENETRATION;
            let (first_dir, profiles) = match strokes {
                1 => (
                    StrokeDirection::Backward,
                    vec![CutSegmentProfile::backward(length, descent).with_tilt(tilt_rad)],
                ),
                2 => (
                    StrokeDirection::Forward,
                    vec![
                        CutSegmentProfile::forward(length, descent / 2.0).with_tilt(tilt_rad),
                        CutSegmentProfile::backward(length, descent / 2.0).with_tilt(tilt_rad),
                    ],
                ),
                n => anyhow::bail!("--strokes must be 1 or 2, got {n}"),
            };
            let contact = Vector3::new(0.0, 0.0, height);
            let t_init =
                cutting::initial_knife_pose(&contact, &Vector3::x(), tilt_rad, first_dir, &knife)?;
            let plan = cutting::plan_cut(&t_init, &profiles, &knife)?;
            std::fs::create_dir_all(&out)?;
            let mut csvs = Vec::new();
            for traj in &plan {
                let path = out.join(format!("segment_{}.csv", traj.segment));
                std::fs::write(&path, traj.to_csv())?;
                println!(
                    "segment {} ({:?}): {} waypoints -> {}",
                    traj.segment,
                    profiles[traj.segment].direction,
                    traj.waypoints.len(),
                    path.display()
                );
                csvs.push(path);
            }
            let next = cutting::next_cut_pose(&t_init, thickness)?;
            let summary = serde_json::json!({
                "thickness_m": thickness,
                "tilt_deg": tilt,
                "strokes": strokes,
                "height_m": height,
                "length_m": length,
                "profiles": profiles,
                "initial_pose": t_init,
                "next_cut_pose": next,
                "segments": csvs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            });
            let plan_path = out.join("plan.json");
            std::fs::write(&plan_path, serde_json::to_string_pretty(&summary)?)?;
            println!("plan -> {}", plan_path.display());
            Ok(())
        }
    }
}
