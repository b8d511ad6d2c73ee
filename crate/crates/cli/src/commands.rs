use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{info, LevelFilter};
use rotfeat::eval::{
    angle_grid, emit_report, extract, filter_matches, load_hpatches, match_images, run_rotated_mma,
    run_vpr, ReportFormat, VprDatabase,
};
use rotfeat::group::{check_equivariance, EquivarianceProbe, FeatureField};
use rotfeat::io::{load_image, resize_image, write_descriptors, BlobEncoding};
use rotfeat::matching::{ensemble_correspondences, CorrespondenceFile};
use rotfeat::network::{load_checkpoint, save_checkpoint, RefNet};
use rotfeat::training::{train, write_loss_csv};
use rotfeat::Tensor;
use serde::Serialize;

use crate::config::CliConfig;
use crate::{
    Cli, Command, EncodingArg, ExtractArgs, FormatArg, ModelArgs, RansacArgs, StageArg, UsageError,
};

fn init_logging(config: &CliConfig, verbose: u8, quiet: u8) {
    const LEVELS: [LevelFilter; 6] = [
        LevelFilter::Off,
        LevelFilter::Error,
        LevelFilter::Warn,
        LevelFilter::Info,
        LevelFilter::Debug,
        LevelFilter::Trace,
    ];
    let base = config
        .log_level
        .as_deref()
        .and_then(|l| l.parse::<LevelFilter>().ok())
        .unwrap_or(LevelFilter::Warn);
    let idx = (base as i32 + verbose as i32 - quiet as i32).clamp(0, 5) as usize;
    let _ = env_logger::Builder::new()
        .filter_level(LEVELS[idx])
        .format_timestamp(None)
        .try_init();
}

fn set_jobs(jobs: Option<usize>) -> Result<usize> {
    let jobs = match jobs {
        Some(0) => return Err(UsageError("--jobs must be >= 1".into()).into()),
        Some(j) => j,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    // Fails only if a pool already exists, which is harmless.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global();
    Ok(jobs)
}

fn apply_model(config: &mut CliConfig, args: &ModelArgs) {
    if let Some(m) = &args.model {
        config.paths.model = Some(m.clone());
    }
    if let Some(n) = args.group_order {
        config.group_order = Some(n);
    }
}

fn apply_extract(config: &mut CliConfig, args: &ExtractArgs) {
    if let Some(k) = args.max_keypoints {
        config.extract.max_keypoints = k;
        config.mma.extract.max_keypoints = k;
    }
    if let Some(r) = args.nms_radius {
        config.extract.nms_radius = r;
        config.mma.extract.nms_radius = r;
    }
    if let Some(size) = args.resize {
        config.mma.resize = size;
    }
}

fn apply_ransac(config: &mut CliConfig, args: &RansacArgs) {
    if let Some(t) = args.ransac_threshold {
        config.ransac.threshold_px = t;
        config.mma.ransac.threshold_px = t;
    }
    if let Some(n) = args.ransac_iters {
        config.ransac.max_iters = n;
        config.mma.ransac.max_iters = n;
    }
}

fn set_output(config: &mut CliConfig, out: &Option<PathBuf>) {
    if let Some(o) = out {
        config.paths.output = Some(o.clone());
    }
}

fn load_model(config: &CliConfig) -> Result<RefNet> {
    let path = config.model_path()?;
    let ckpt = load_checkpoint(path, config.group_order)?;
    info!(
        "loaded {} (C_{}, step {})",
        path.display(),
        ckpt.net.group().order(),
        ckpt.step
    );
    Ok(ckpt.net)
}

/// Tag recorded in correspondence files: the checkpoint's file stem.
fn model_tag(config: &CliConfig) -> String {
    config
        .paths
        .model
        .as_deref()
        .and_then(Path::file_stem)
        .map_or_else(|| "ref".into(), |s| s.to_string_lossy().into_owned())
}

fn load_input(path: &Path, resize: Option<[usize; 2]>) -> Result<Tensor> {
    let img = load_image(path)?;
    Ok(match resize {
        Some([w, h]) => resize_image(&img, w, h)?,
        None => img,
    })
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct EquivarianceRow {
    p: usize,
    angle_deg: f64,
    max_abs: f64,
    relative: f64,
}

pub fn run(cli: Cli) -> Result<()> {
    let mut config = CliConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = Some(seed);
    }
    config.apply_seed();
    init_logging(&config, cli.verbose, cli.quiet);

    // Flags first, then one validation pass before any work.
    match &cli.command {
        Command::Train {
            out,
            steps,
            group_order,
            variant,
            ..
        } => {
            set_output(&mut config, out);
            if let Some(s) = steps {
                config.train.steps = *s;
            }
            if let Some(n) = group_order {
                config.train.model.group_order = *n;
            }
            if let Some(v) = variant {
                config.train.model.variant = (*v).into();
            }
        }
        Command::Extract {
            model,
            extract,
            out,
            ..
        } => {
            apply_model(&mut config, model);
            apply_extract(&mut config, extract);
            set_output(&mut config, out);
        }
        Command::Match {
            model,
            extract,
            ransac,
            out,
            ..
        } => {
            apply_model(&mut config, model);
            apply_extract(&mut config, extract);
            apply_ransac(&mut config, ransac);
            set_output(&mut config, out);
        }
        Command::Ensemble {
            keep_fraction,
            ransac,
            out,
            ..
        } => {
            if let Some(k) = keep_fraction {
                config.ensemble.keep_fraction = *k;
            }
            apply_ransac(&mut config, ransac);
            set_output(&mut config, out);
        }
        Command::EvalMma {
            model,
            dataset,
            angles,
            angle_step,
            thresholds,
            extract,
            ransac,
            ransac_params,
            out,
            ..
        } => {
            apply_model(&mut config, model);
            apply_extract(&mut config, extract);
            apply_ransac(&mut config, ransac_params);
            set_output(&mut config, out);
            if let Some(d) = dataset {
                config.paths.dataset = Some(d.clone());
            }
            if let Some(a) = angles {
                config.mma.angles = a.clone();
            } else if let Some(step) = angle_step {
                if !(*step > 0.0) {
                    return Err(UsageError("--angle-step must be > 0".into()).into());
                }
                config.mma.angles = angle_grid(*step);
            }
            if let Some(t) = thresholds {
                config.mma.thresholds = t.clone();
            }
            if *ransac {
                config.mma.use_ransac = true;
            }
        }
        Command::EvalVpr {
            model,
            dataset,
            tolerance,
            extract,
            ransac,
            out,
        } => {
            apply_model(&mut config, model);
            apply_extract(&mut config, extract);
            apply_ransac(&mut config, ransac);
            set_output(&mut config, out);
            if let Some(d) = dataset {
                config.paths.dataset = Some(d.clone());
            }
            if let Some(t) = tolerance {
                config.vpr.tolerance = *t;
            }
        }
        Command::CheckEquivariance {
            model,
            size,
            trials,
            noise,
            out,
            ..
        } => {
            apply_model(&mut config, model);
            set_output(&mut config, out);
            if let Some(s) = size {
                config.equivariance.size = *s;
            }
            if let Some(t) = trials {
                config.equivariance.trials = *t;
            }
            if *noise {
                config.equivariance.smooth = false;
            }
        }
    }
    config.validate()?;
    let jobs = set_jobs(cli.jobs)?;

    match cli.command {
        Command::Train { loss_csv, .. } => {
            let out = config.output_path()?;
            let outcome = train(&config.train)?;
            save_checkpoint(&outcome.net, config.train.steps as u64, out)?;
            if let Some(csv) = loss_csv {
                write_loss_csv(&outcome.reports, &csv)?;
            }
            if let Some(last) = outcome.reports.last() {
                info!("final loss {:.4}", last.total);
            }
            println!("wrote {}", out.display());
        }
        Command::Extract {
            image,
            extract: ex,
            encoding,
            ..
        } => {
            let net = load_model(&config)?;
            let out = config.output_path()?;
            let img = load_input(&image, ex.resize)?;
            let set = extract(&net, &img, &config.extract)?;
            let encoding = match encoding {
                EncodingArg::Base64 => BlobEncoding::Base64,
                EncodingArg::Raw => BlobEncoding::Raw,
            };
            write_descriptors(&set, &image, out, encoding)?;
            println!("{} keypoints -> {}", set.len(), out.display());
        }
        Command::Match {
            image_a,
            image_b,
            extract: ex,
            verify,
            ..
        } => {
            let net = load_model(&config)?;
            let out = config.output_path()?;
            let a = load_input(&image_a, ex.resize)?;
            let b = load_input(&image_b, ex.resize)?;
            let mut matches = match_images(&net, &a, &b, &config.extract)?;
            if verify {
                matches = filter_matches(&matches, &config.ransac);
            }
            let frame = [a.shape()[3], a.shape()[2]];
            let file = CorrespondenceFile::from_match_set(
                &matches,
                &image_a.to_string_lossy(),
                &image_b.to_string_lossy(),
                &model_tag(&config),
                frame,
            );
            file.write(out)?;
            println!("{} matches -> {}", file.matches.len(), out.display());
        }
        Command::Ensemble { first, second, .. } => {
            let out = config.output_path()?;
            let f1 = CorrespondenceFile::read(&first)?;
            let f2 = CorrespondenceFile::read(&second)?;
            if (&f1.image_a, &f1.image_b, f1.frame) != (&f2.image_a, &f2.image_b, f2.frame) {
                return Err(rotfeat::Error::Format {
                    path: second,
                    msg: "image pair or frame differs from the first file".into(),
                }
                .into());
            }
            let pooled = ensemble_correspondences(
                &f1.to_match_set(),
                &f2.to_match_set(),
                config.ensemble.keep_fraction,
            )?;
            let verified = filter_matches(&pooled, &config.ransac);
            let file = CorrespondenceFile::from_match_set(
                &verified,
                &f1.image_a,
                &f1.image_b,
                &format!("{}+{}", f1.model, f2.model),
                f1.frame,
            );
            file.write(out)?;
            println!(
                "{} ensembled, {} inliers -> {}",
                verified.len(),
                verified.num_inliers(),
                out.display()
            );
        }
        Command::EvalMma { format, .. } => {
            let net = load_model(&config)?;
            let out = config.output_path()?;
            let dataset = load_hpatches(config.dataset_path()?)?;
            let format = match format {
                Some(FormatArg::Json) => ReportFormat::Json,
                Some(FormatArg::Csv) => ReportFormat::Csv,
                None if out.extension().is_some_and(|e| e == "csv") => ReportFormat::Csv,
                None => ReportFormat::Json,
            };
            let report = run_rotated_mma(&net, &dataset, &config.mma, jobs)?;
            emit_report(&report, out, format)?;
            println!(
                "{} evaluations ({} skipped pairs) -> {}",
                report.total_evaluations,
                report.skipped.len(),
                out.display()
            );
        }
        Command::EvalVpr { .. } => {
            let net = load_model(&config)?;
            let out = config.output_path()?;
            let db = VprDatabase::load(config.dataset_path()?, config.vpr.tolerance)?;
            let report = run_vpr(&net, &db, &config.vpr_config(), jobs)?;
            write_json(&report, out)?;
            for r in &report.recall {
                println!("{}: {}/{} ({:.4})", r.variant, r.correct, r.total, r.recall);
            }
        }
        Command::CheckEquivariance { stage, .. } => {
            let net = load_model(&config)?;
            let eq = &config.equivariance;
            let probe = EquivarianceProbe {
                size: eq.size,
                trials: eq.trials,
                seed: config.probe_seed(),
                border: eq.border,
                smooth: eq.smooth,
            };
            let fragment = |x: &FeatureField| match stage {
                StageArg::Backbone => net.backbone(x),
                StageArg::Pooled => net.pooled_features(x),
                StageArg::Descriptors => net.descriptor_field(x),
            };
            let report = check_equivariance(fragment, net.input_type(), &probe)?;
            let group = net.group();
            let rows: Vec<EquivarianceRow> = (0..group.order())
                .map(|p| EquivarianceRow {
                    p,
                    angle_deg: group.angle_deg(p),
                    max_abs: report.max_abs[p],
                    relative: report.relative(p),
                })
                .collect();
            println!(
                "{:>3} {:>9} {:>12} {:>12}",
                "p", "angle", "max_abs", "relative"
            );
            for r in &rows {
                println!(
                    "{:>3} {:>9.3} {:>12.4e} {:>12.4e}",
                    r.p, r.angle_deg, r.max_abs, r.relative
                );
            }
            if let Some(out) = &config.paths.output {
                write_json(&rows, out)?;
            }
        }
    }
    Ok(())
}
