//! `bodyorient` command-line tool.
//!
//! Exit status: 0 on success, 1 on data errors (and failed gradient checks),
//! 2 on configuration or usage errors.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use bodyorient::config::{Config, CONFIG_ENV};
use bodyorient::dataset::{
    convert_native_labels, load_orientation_labels, load_person_annotations_with, reconstruct,
    LoadOptions,
};
use bodyorient::gradcheck::{check_loss_gradients, COMPONENT_NAMES};
use bodyorient::metrics::evaluate;
use bodyorient::plot::{render_svg, PlotItem};
use bodyorient::postprocess::{load_predictions, nms_per_image, predictions_to_string};
use bodyorient::toytrain::{history_csv, train_and_evaluate};
use bodyorient::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "bodyorient", version, about = "Person detection and body orientation tooling")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Merge person boxes with strong and weak orientation labels.
    Reconstruct {
        /// Person annotations in the detection-benchmark layout.
        #[arg(long)]
        persons: PathBuf,
        /// Strong orientation labels.
        #[arg(long)]
        labels: PathBuf,
        /// Weak labels for the persons the strong file leaves out.
        #[arg(long)]
        weak: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Drop unlabeled persons instead of failing.
        #[arg(long)]
        permit_missing: bool,
        #[arg(long)]
        include_crowd: bool,
    },
    /// Convert a native `{"<image>_<annotation>": degrees}` map to a label file.
    ConvertLabels {
        #[arg(long)]
        input: PathBuf,
        /// Defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against merged ground truth.
    Evaluate {
        /// Prediction CSV.
        #[arg(long)]
        preds: PathBuf,
        /// Merged ground-truth file.
        #[arg(long)]
        gts: PathBuf,
        #[arg(long)]
        iou: Option<f64>,
        #[arg(long)]
        conf: Option<f64>,
        #[arg(long)]
        exclude_weak: bool,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Train the linear head on synthetic scenes and evaluate it.
    TrainToy {
        #[arg(long, default_value = "toy-run")]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compare analytic loss gradients with central differences.
    Gradcheck {
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Per-image greedy non-maximum suppression over a prediction CSV.
    Nms {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        iou: Option<f64>,
        /// Defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw boxes and orientation arrows for one image as SVG.
    Plot {
        /// Prediction CSV (`.csv`) or annotation JSON.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the first image in the file.
        #[arg(long)]
        image_id: Option<u64>,
        #[arg(long, requires = "height")]
        width: Option<u32>,
        #[arg(long, requires = "width")]
        height: Option<u32>,
    },
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn emit(out: Option<&Path>, contents: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, contents),
        None => std::io::stdout()
            .write_all(contents.as_bytes())
            .map_err(|e| Error::Io {
                path: "<stdout>".into(),
                source: e,
            }),
    }
}

fn unit_flag(name: &str, v: Option<f64>, fallback: f64) -> Result<f64> {
    match v {
        Some(v) if !(0.0..=1.0).contains(&v) => {
            Err(Error::Config(format!("--{name} {v} outside [0, 1]")))
        }
        Some(v) => Ok(v),
        None => Ok(fallback),
    }
}

/// Returns whether the command succeeded; errors carry their own exit code.
fn run(cli: Cli) -> Result<bool> {
    let cfg = Config::resolve(cli.config.as_deref())?;
    match cli.command {
        Command::Reconstruct {
            persons,
            labels,
            weak,
            out,
            permit_missing,
            include_crowd,
        } => {
            let pa = load_person_annotations_with(&persons, &LoadOptions { include_crowd })?;
            let c = pa.counts;
            if c.warnings() > 0 {
                eprintln!(
                    "warning: skipped {} annotation(s): unknown_category={} degenerate={} unknown_image={}",
                    c.warnings(),
                    c.unknown_category,
                    c.degenerate,
                    c.unknown_image
                );
            }
            let strong = load_orientation_labels(&labels)?;
            let weak = weak.map(|p| load_orientation_labels(&p)).transpose()?;
            let merged = reconstruct(&pa, &strong, weak.as_ref(), permit_missing)?;
            if merged.stats.orphan_labels > 0 {
                eprintln!(
                    "warning: {} strong label(s) name no person annotation",
                    merged.stats.orphan_labels
                );
            }
            merged.write(&out)?;
            println!("{}", merged.stats);
        }
        Command::ConvertLabels { input, out } => {
            let text = std::fs::read_to_string(&input).map_err(|e| Error::Io {
                path: input.clone(),
                source: e,
            })?;
            let labels = convert_native_labels(&input, &text)?;
            emit(out.as_deref(), &labels.to_json())?;
            eprintln!("converted {} label(s)", labels.len());
        }
        Command::Evaluate {
            preds,
            gts,
            iou,
            conf,
            exclude_weak,
            json,
        } => {
            let mut params = cfg.eval_params();
            params.iou_thresh = unit_flag("iou", iou, params.iou_thresh)?;
            params.conf_thresh = unit_flag("conf", conf, params.conf_thresh)?;
            params.exclude_weak |= exclude_weak;
            let preds = load_predictions(&preds)?;
            let gts = load_person_annotations_with(&gts, &LoadOptions::default())?;
            let report = evaluate(&preds, &gts.instances, &params)?;
            if json {
                print!("{}", report.to_json());
            } else {
                println!("{report}");
            }
        }
        Command::TrainToy {
            out_dir,
            seed,
            steps,
        } => {
            let mut train = cfg.train.clone();
            if let Some(s) = seed {
                train.seed = s;
            }
            if let Some(s) = steps {
                train.steps = s;
            }
            train.validate()?;
            let start = Instant::now();
            let run = train_and_evaluate(&train)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::Io {
                path: out_dir.clone(),
                source: e,
            })?;
            write_file(&out_dir.join("history.csv"), &history_csv(&run.output.history))?;
            write_file(&out_dir.join("head.json"), &run.output.head.to_json())?;
            write_file(&out_dir.join("report.json"), &run.report.to_json())?;
            eprintln!("trained {} steps in {:.1} s", train.steps, start.elapsed().as_secs_f64());
            println!("{}", run.report);
            let f = run.output.final_loss;
            let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
            println!(
                "final: steps={} total={:.6} l_obj={:.6} l_box={:.6} l_ori={:.6} mae={} ap50={}",
                train.steps,
                f.total,
                f.objectness,
                f.box_loss,
                f.orientation,
                show(run.report.mae_degrees),
                show(run.report.ap50),
            );
        }
        Command::Gradcheck { seeds } => {
            let g = cfg.gradcheck;
            let seeds = seeds.unwrap_or(g.seeds);
            if seeds == 0 {
                return Err(Error::Config("--seeds must be at least 1".into()));
            }
            let start = Instant::now();
            let mut worst = [0.0f64; 4];
            let mut worst_seed = [0u64; 4];
            for seed in 0..seeds {
                let check = check_loss_gradients(seed, &cfg.loss, g.eps)?;
                for k in 0..4 {
                    if check.max_error[k] > worst[k] {
                        worst[k] = check.max_error[k];
                        worst_seed[k] = seed;
                    }
                }
            }
            eprintln!("checked {seeds} seed(s) in {:.1} s", start.elapsed().as_secs_f64());
            let mut ok = true;
            for k in 0..4 {
                let pass = worst[k] < g.tolerance;
                ok &= pass;
                println!(
                    "{:<11} max_rel_error={:.3e} seed={} {}",
                    COMPONENT_NAMES[k],
                    worst[k],
                    worst_seed[k],
                    if pass { "PASS" } else { "FAIL" }
                );
            }
            println!(
                "{} seeds={seeds} tolerance={:e}",
                if ok { "PASS" } else { "FAIL" },
                g.tolerance
            );
            return Ok(ok);
        }
        Command::Nms { preds, iou, out } => {
            let iou = unit_flag("iou", iou, cfg.postprocess.iou_thresh)?;
            let dets = load_predictions(&preds)?;
            let kept = nms_per_image(&dets, iou);
            eprintln!("kept {} of {} prediction(s)", kept.len(), dets.len());
            emit(out.as_deref(), &predictions_to_string(&kept))?;
        }
        Command::Plot {
            input,
            out,
            image_id,
            width,
            height,
        } => {
            let is_csv = input
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
            let (id, dims, items) = if is_csv {
                let dets = load_predictions(&input)?;
                let id = image_id.or_else(|| dets.iter().map(|d| d.image_id).min());
                let items: Vec<PlotItem> = dets
                    .iter()
                    .filter(|d| Some(d.image_id) == id)
                    .map(|d| PlotItem {
                        bbox: d.bbox,
                        orientation_deg: Some(d.orientation),
                        weak: false,
                        label: Some(format!("{:.2}", d.score)),
                    })
                    .collect();
                (id, None, items)
            } else {
                let pa = load_person_annotations_with(&input, &LoadOptions::default())?;
                let id = image_id.or_else(|| pa.images.keys().next().copied());
                if let Some(i) = image_id {
                    if !pa.images.contains_key(&i) {
                        return Err(Error::Data {
                            path: input,
                            message: format!("no image with id {i}"),
                        });
                    }
                }
                let dims = id.and_then(|i| pa.images.get(&i)).map(|i| (i.width, i.height));
                let items: Vec<PlotItem> = id
                    .map(|i| {
                        pa.on_image(i)
                            .map(|a| PlotItem {
                                bbox: a.bbox,
                                orientation_deg: a.orientation.map(|o| o.degrees()),
                                weak: a.weak,
                                label: Some(a.annotation_id.to_string()),
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                (id, dims, items)
            };
            let (w, h) = match (width.zip(height), dims) {
                (Some(d), _) | (None, Some(d)) => d,
                (None, None) => {
                    return Err(Error::Config(
                        "--width and --height are required for prediction input".into(),
                    ))
                }
            };
            write_file(&out, &render_svg(w, h, &items, &cfg.plot))?;
            match id {
                Some(i) => eprintln!("image {i}: {} item(s)", items.len()),
                None => eprintln!("no items"),
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
