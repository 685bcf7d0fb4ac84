//! `metreg` — dataset synthesis, per-class weight training, registration,
//! and evaluation for multi-metric deformable registration.
//!
//! Exit codes: 0 success, 2 spec error, 3 training non-convergence (with
//! --strict), 4 geometry mismatch, 5 missing pairs.

mod config;
mod dataset;
mod svgplot;
mod util;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use metreg_core::deform::{warp_image, warp_mask};
use metreg_core::dice::exact_dice;
use metreg_core::lssvm::{
    assemble_weight_matrix, cccp_train, weights_from_json, weights_to_json,
};
use metreg_core::metrics::MetricKind;
use metreg_core::register::{register, Weights};
use metreg_core::solver::WeightVector;
use metreg_core::volume::ClassSet;
use metreg_core::Error as CoreError;

use config::RunConfig;
use dataset::{synthesize, Manifest, SetSpec};
use util::{load_mask, load_volume_normalized, load_volume_raw, write_atomic};

#[derive(Parser)]
#[command(name = "metreg", about = "Multi-metric deformable registration toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a spec file.
    Synth {
        /// JSON set spec (seed, dims, classes, transforms, deformation).
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for .vvol files and manifest.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn per-class metric weights from a dataset manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Class id to train, or "all" for every foreground class.
        #[arg(long, default_value = "all")]
        class: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output weight file (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Training report (JSON lines).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also train the background class instead of giving it w0.
        #[arg(long)]
        include_background: bool,
        /// Exit nonzero when any class fails to converge.
        #[arg(long)]
        strict: bool,
    },
    /// Register a source volume onto a target volume.
    Register {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Source segmentation; required for multi-metric weights.
        #[arg(long)]
        source_seg: Option<PathBuf>,
        /// Learned weight file (multi-metric mode).
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Single-metric mode: sad, mi, ncc or dwt.
        #[arg(long)]
        metric: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate single metrics and learned weights over a dataset.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for dice.csv and dice_boxplot.svg.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { spec, out } => cmd_synth(&spec, &out),
        Command::Train {
            manifest,
            class,
            config,
            out,
            report,
            include_background,
            strict,
        } => cmd_train(
            &manifest,
            &class,
            config.as_deref(),
            &out,
            report.as_deref(),
            include_background,
            strict,
        ),
        Command::Register {
            source,
            target,
            source_seg,
            weights,
            metric,
            config,
            out,
        } => cmd_register(
            &source,
            &target,
            source_seg.as_deref(),
            weights.as_deref(),
            metric.as_deref(),
            config.as_deref(),
            &out,
        ),
        Command::Evaluate {
            manifest,
            weights,
            config,
            out,
        } => cmd_evaluate(&manifest, &weights, config.as_deref(), &out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            // geometry failures map to their reserved exit code
            let code = if e
                .downcast_ref::<CoreError>()
                .is_some_and(|c| matches!(c, CoreError::GeometryMismatch(_)))
            {
                4
            } else {
                1
            };
            ExitCode::from(code)
        }
    }
}

fn cmd_synth(spec_path: &std::path::Path, out: &std::path::Path) -> anyhow::Result<ExitCode> {
    let text = match std::fs::read_to_string(spec_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read spec {}: {e}", spec_path.display());
            return Ok(ExitCode::from(2));
        }
    };
    let spec: SetSpec = match serde_json::from_str(&text) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: bad spec: {e}");
            return Ok(ExitCode::from(2));
        }
    };
    if let Err(e) = spec.validate() {
        eprintln!("error: bad spec: {e}");
        return Ok(ExitCode::from(2));
    }
    let manifest = synthesize(&spec, out)?;
    println!(
        "wrote {} sample pairs to {}",
        manifest.samples.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    manifest_path: &std::path::Path,
    class_arg: &str,
    config_path: Option<&std::path::Path>,
    out: &std::path::Path,
    report_path: Option<&std::path::Path>,
    include_background: bool,
    strict: bool,
) -> anyhow::Result<ExitCode> {
    let cfg = RunConfig::load(config_path)?;
    cfg.init_threads();
    let (manifest, dir) = Manifest::load(manifest_path)?;
    let samples: Vec<_> = manifest
        .samples
        .iter()
        .map(|e| manifest.load_sample(&dir, e))
        .collect::<anyhow::Result<Vec<_>>>()?;

    let classes: Vec<u8> = match class_arg {
        "all" => {
            let mut ids = manifest.classes.foreground_ids();
            if include_background {
                ids.insert(0, 0);
            }
            ids
        }
        s => vec![s
            .parse::<u8>()
            .map_err(|_| anyhow::anyhow!("bad class id {s:?}"))?],
    };
    if classes.is_empty() {
        anyhow::bail!("no classes to train");
    }

    let hp = cfg.hyperparams();
    let reg = cfg.reg_params();
    let mut report_lines = Vec::new();
    report_lines.push(serde_json::json!({
        "w0": hp.w0.to_concat(),
        "c": hp.c, "alpha": hp.alpha, "eta": hp.eta, "epsilon": hp.epsilon,
        "classes": classes,
    }).to_string());

    let mut per_class = Vec::new();
    let mut all_converged = true;
    for &class in &classes {
        let (w, rep) = cccp_train(&samples, class, &hp, &reg)?;
        println!(
            "class {class}: {} outer iterations, converged = {}, w = {:?}",
            rep.iterations.len(),
            rep.converged,
            w.to_concat()
        );
        all_converged &= rep.converged;
        for it in &rep.iterations {
            report_lines.push(
                serde_json::json!({
                    "class": class,
                    "iter": it.iter,
                    "objective": it.objective,
                    "constraints_total": it.constraints_total,
                    "mean_imputed_loss": it.mean_imputed_loss,
                })
                .to_string(),
            );
        }
        per_class.push((class, w));
    }

    // untrained classes (background by default) fall back to w0
    let num_classes = manifest.classes.len();
    for id in 0..num_classes as u8 {
        if !per_class.iter().any(|(c, _)| *c == id) {
            per_class.push((id, hp.w0.clone()));
        }
    }
    let matrix = assemble_weight_matrix(&per_class, num_classes)?;
    write_atomic(out, weights_to_json(&matrix).as_bytes())?;
    if let Some(rp) = report_path {
        write_atomic(rp, (report_lines.join("\n") + "\n").as_bytes())?;
    }
    println!("wrote weights to {}", out.display());

    if strict && !all_converged {
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_weight_mode(
    weights: Option<&std::path::Path>,
    metric: Option<&str>,
    source_seg_present: bool,
    cfg: &RunConfig,
) -> anyhow::Result<(Weights, Vec<MetricKind>)> {
    match (weights, metric) {
        (Some(_), Some(_)) => anyhow::bail!("use either --weights or --metric, not both"),
        (None, None) => anyhow::bail!("one of --weights or --metric is required"),
        (None, Some(m)) => {
            let kind = MetricKind::parse(m)?;
            Ok((
                Weights::Uniform(WeightVector {
                    metric_weights: vec![1.0],
                    pairwise_weight: cfg.single_metric_pairwise,
                }),
                vec![kind],
            ))
        }
        (Some(path), None) => {
            if !source_seg_present {
                anyhow::bail!("multi-metric mode requires source segmentation");
            }
            let matrix = weights_from_json(&std::fs::read_to_string(path)?)?;
            let names: Vec<String> = (0..matrix.num_classes())
                .map(|i| format!("class{i}"))
                .collect();
            let classes = ClassSet {
                classes: names
                    .iter()
                    .enumerate()
                    .map(|(i, n)| (i as u8, n.clone()))
                    .collect(),
            };
            Ok((
                Weights::PerClass { matrix, classes },
                cfg.metrics.clone(),
            ))
        }
    }
}

fn cmd_register(
    source: &std::path::Path,
    target: &std::path::Path,
    source_seg: Option<&std::path::Path>,
    weights: Option<&std::path::Path>,
    metric: Option<&str>,
    config_path: Option<&std::path::Path>,
    out: &std::path::Path,
) -> anyhow::Result<ExitCode> {
    let cfg = RunConfig::load(config_path)?;
    cfg.init_threads();
    let src_raw = load_volume_raw(source)?;
    let src = src_raw.normalized();
    let tgt = load_volume_normalized(target)?;
    let seg = source_seg.map(load_mask).transpose()?;

    let (mode, metrics) = parse_weight_mode(weights, metric, seg.is_some(), &cfg)?;
    let mut reg_params = cfg.reg_params();
    reg_params.metrics = metrics;

    let result = register(&src, &tgt, seg.as_ref(), &mode, &reg_params)?;

    std::fs::create_dir_all(out)?;
    metreg_core::io::save_field(&out.join("field.vvol"), &result.field)?;
    let warped = warp_image(&src_raw, &result.field);
    metreg_core::io::save_volume(&out.join("warped.vvol"), &warped)?;
    if let Some(m) = &seg {
        let wm = warp_mask(m, &result.field);
        metreg_core::io::save_mask(&out.join("warped_mask.vvol"), &wm)?;
    }
    write_atomic(&out.join("trace.json"), result.trace_json().as_bytes())?;
    println!(
        "registered {} -> {}; mean displacement {:.3} voxels",
        source.display(),
        target.display(),
        result.field.mean_magnitude_vox()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_evaluate(
    manifest_path: &std::path::Path,
    weights_path: &std::path::Path,
    config_path: Option<&std::path::Path>,
    out: &std::path::Path,
) -> anyhow::Result<ExitCode> {
    let cfg = RunConfig::load(config_path)?;
    cfg.init_threads();
    let (manifest, dir) = Manifest::load(manifest_path)?;
    if manifest.samples.is_empty() {
        eprintln!("error: manifest has no sample pairs");
        return Ok(ExitCode::from(5));
    }
    for e in &manifest.samples {
        for f in [&e.source, &e.target, &e.source_mask, &e.target_mask] {
            if !dir.join(f).exists() {
                eprintln!("error: missing pair file {}", dir.join(f).display());
                return Ok(ExitCode::from(5));
            }
        }
    }
    let matrix = weights_from_json(&std::fs::read_to_string(weights_path)?)?;
    let class_ids = manifest.classes.foreground_ids();

    let mut rows: Vec<(String, u8, Vec<f64>)> = Vec::new();
    for entry in &manifest.samples {
        let sample = manifest.load_sample(&dir, entry)?;
        let src = sample.source.normalized();
        let tgt = sample.target.normalized();
        let mut dices: Vec<Vec<f64>> = Vec::new();
        for kind in MetricKind::ALL {
            let mut params = cfg.reg_params();
            params.metrics = vec![kind];
            let mode = Weights::Uniform(WeightVector {
                metric_weights: vec![1.0],
                pairwise_weight: cfg.single_metric_pairwise,
            });
            let reg = register(&src, &tgt, None, &mode, &params)?;
            let warped = warp_mask(&sample.source_mask, &reg.field);
            dices.push(
                class_ids
                    .iter()
                    .map(|&c| exact_dice(&warped, &sample.target_mask, c))
                    .collect::<Result<Vec<_>, _>>()?,
            );
        }
        // learned multi-metric registration
        let params = cfg.reg_params();
        let mode = Weights::PerClass {
            matrix: matrix.clone(),
            classes: manifest.classes.clone(),
        };
        let reg = register(&src, &tgt, Some(&sample.source_mask), &mode, &params)?;
        let warped = warp_mask(&sample.source_mask, &reg.field);
        dices.push(
            class_ids
                .iter()
                .map(|&c| exact_dice(&warped, &sample.target_mask, c))
                .collect::<Result<Vec<_>, _>>()?,
        );

        for (ci, &c) in class_ids.iter().enumerate() {
            rows.push((
                entry.id.clone(),
                c,
                (0..5).map(|mi| dices[mi][ci]).collect(),
            ));
        }
        println!("evaluated {}", entry.id);
    }

    std::fs::create_dir_all(out)?;
    let mut csv = String::from("pair_id,class,sad,mi,ncc,dwt,mw\n");
    for (id, c, vals) in &rows {
        csv.push_str(&format!(
            "{id},{c},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            vals[0], vals[1], vals[2], vals[3], vals[4]
        ));
    }
    for &c in &class_ids {
        let of_class: Vec<&Vec<f64>> = rows
            .iter()
            .filter(|(_, rc, _)| *rc == c)
            .map(|(_, _, v)| v)
            .collect();
        let n = of_class.len().max(1) as f64;
        let means: Vec<f64> = (0..5)
            .map(|mi| of_class.iter().map(|v| v[mi]).sum::<f64>() / n)
            .collect();
        csv.push_str(&format!(
            "mean,{c},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            means[0], means[1], means[2], means[3], means[4]
        ));
    }
    write_atomic(&out.join("dice.csv"), csv.as_bytes())?;

    let class_name = |c: u8| -> String {
        manifest
            .classes
            .classes
            .iter()
            .find(|(id, _)| *id == c)
            .map(|(_, n)| n.clone())
            .unwrap_or_else(|| format!("class {c}"))
    };
    let groups: Vec<(String, Vec<Vec<f64>>)> = class_ids
        .iter()
        .map(|&c| {
            let per_method: Vec<Vec<f64>> = (0..5)
                .map(|mi| {
                    rows.iter()
                        .filter(|(_, rc, _)| *rc == c)
                        .map(|(_, _, v)| v[mi])
                        .collect()
                })
                .collect();
            (class_name(c), per_method)
        })
        .collect();
    let svg = svgplot::boxplot_svg(&groups, &["sad", "mi", "ncc", "dwt", "mw"]);
    write_atomic(&out.join("dice_boxplot.svg"), svg.as_bytes())?;
    println!("wrote {}", out.join("dice.csv").display());
    Ok(ExitCode::SUCCESS)
}
