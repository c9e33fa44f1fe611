use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use calidet::califormer::Checkpoint;
use calidet::detector::{ConstantDetector, Detector, HttpDetector};
use calidet::edge::{delta, edge_mae, flat_prior, flip_edge, EdgeMatrix};
use calidet::eval::{prior_sweep, standard_prior, subset_eval, subset_table, EvalConfig, PriorKind};
use calidet::ingest::{dataset_edge, remap_dataset, split_subsets, ClassMapping, Dataset};
use calidet::seed::{resolve_seed, stream, substream, Stream, SEED_ENV};
use calidet::selfcal::{selfcal_run, SelfCalConfig, Statistics, ZAxis};
use calidet::simworld::{gen_dataset, gen_world, Response, SimDetector, WorldSpec};
use calidet::training::{ordering_check, sample_edge, train_toy, write_metrics, EdgeSamplerConfig, SourceSet, ToyTrainConfig};
use calidet::{Error, Result};

use crate::{
    Axis, Cli, Command, DataCmd, DetectorArgs, DetectorKind, EdgesCmd, EvalCmd, ReportArgs, SelfcalArgs, SelfcalCmd, Source, TrainCmd,
    WorldCmd,
};

fn seed(flag: Option<u64>, config: Option<u64>) -> Result<u64> {
    let env = std::env::var(SEED_ENV).ok();
    resolve_seed(flag, env.as_deref(), config).map_err(Error::Config)
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Edges(cmd) => edges(cmd, cli.seed),
        Command::World(cmd) => world(cmd, cli.seed),
        Command::Data(cmd) => data(cmd, cli.seed),
        Command::Train(TrainCmd::Toy {
            config,
            ablation,
            metrics,
            checkpoint,
        }) => train(config.as_deref(), ablation, &metrics, checkpoint.as_deref(), cli.seed),
        Command::Selfcal(SelfcalCmd::Run(args)) => selfcal(args, cli.seed),
        Command::Eval(cmd) => eval(cmd, cli.seed),
    }
}

fn edges(cmd: EdgesCmd, seed_flag: Option<u64>) -> Result<()> {
    match cmd {
        EdgesCmd::Stats { annotations, out } => {
            let d = Dataset::read(&annotations)?;
            let e = dataset_edge::<f64>(&d)?;
            e.write(&out)?;
            println!("{} images, {} classes -> {}", d.len(), d.k(), out.display());
        }
        EdgesCmd::Flat { k, out } => {
            flat_prior::<f64>(k)?.write(&out)?;
            println!("flat prior over {k} classes -> {}", out.display());
        }
        EdgesCmd::Flip { input, out } => {
            flip_edge(&EdgeMatrix::<f64>::read(&input)?).write(&out)?;
            println!("flipped -> {}", out.display());
        }
        EdgesCmd::Delta { input, out } => {
            let d = delta(&EdgeMatrix::<f64>::read(&input)?);
            write_text(&out, &(d.to_json()? + "\n"))?;
            println!("delta -> {}", out.display());
        }
        EdgesCmd::Compare { a, b } => {
            let dist = edge_mae(&EdgeMatrix::<f64>::read(&a)?, &EdgeMatrix::<f64>::read(&b)?)?;
            println!("{}", dist.summary());
        }
        EdgesCmd::Sample {
            ex,
            eb,
            et,
            sigma,
            sources,
            out,
        } => {
            let cfg = EdgeSamplerConfig {
                sigma,
                sources: SourceSet {
                    sample: sources.contains(&Source::Sample),
                    batch: sources.contains(&Source::Batch),
                    train: sources.contains(&Source::Train),
                },
            };
            let mut rng = ChaCha8Rng::seed_from_u64(stream(seed(seed_flag, None)?, Stream::Sampler));
            let e = sample_edge(
                &EdgeMatrix::<f64>::read(&ex)?,
                &EdgeMatrix::read(&eb)?,
                &EdgeMatrix::read(&et)?,
                &cfg,
                &mut rng,
            )?;
            e.write(&out)?;
            println!("sampled prior -> {}", out.display());
        }
        EdgesCmd::Csv { input, out } => {
            write_text(&out, &EdgeMatrix::<f64>::read(&input)?.to_csv())?;
            println!("csv -> {}", out.display());
        }
    }
    Ok(())
}

fn normalized(weights: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || total.is_nan() || total <= 0.0 {
        return Err(Error::Config("scene weights must be non-negative with a positive sum".into()));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

fn world(cmd: WorldCmd, seed_flag: Option<u64>) -> Result<()> {
    match cmd {
        WorldCmd::Gen {
            k,
            scenes,
            lambda,
            noise_std,
            target_iou,
            fp_rate,
            base_present,
            base_absent,
            out,
        } => {
            let seed = seed(seed_flag, None)?;
            let d = Response::default();
            let response = Response {
                lambda: lambda.unwrap_or(d.lambda),
                noise_std: noise_std.unwrap_or(d.noise_std),
                target_iou: target_iou.unwrap_or(d.target_iou),
                fp_rate: fp_rate.unwrap_or(d.fp_rate),
                base_logit_present: base_present.unwrap_or(d.base_logit_present),
                base_logit_absent: base_absent.unwrap_or(d.base_logit_absent),
            };
            let w = gen_world(k, scenes, seed)?.with_response(response)?;
            w.write(&out)?;
            println!("world: {k} classes, {scenes} scenes, seed {seed} -> {}", out.display());
        }
        WorldCmd::Reweight { world, weights, out } => {
            let w = WorldSpec::read(&world)?.with_scene_weights(normalized(&weights)?)?;
            w.write(&out)?;
            println!("reweighted world -> {}", out.display());
        }
    }
    Ok(())
}

fn data(cmd: DataCmd, seed_flag: Option<u64>) -> Result<()> {
    match cmd {
        DataCmd::Gen { world, n, out } => {
            let w = WorldSpec::read(&world)?;
            let d = gen_dataset(&w, n, substream(seed(seed_flag, None)?, "data"))?;
            d.write(&out)?;
            println!("{} images, {} annotations -> {}", d.len(), d.annotation_count(), out.display());
        }
        DataCmd::Remap {
            annotations,
            mapping,
            targets,
            out,
            report,
        } => {
            let d = Dataset::read(&annotations)?;
            let text = std::fs::read_to_string(&mapping).map_err(|e| io_err(&mapping, e))?;
            let m = ClassMapping::from_json(&text)?;
            let targets = targets.unwrap_or_else(|| m.targets());
            let (remapped, r) = remap_dataset(&d, &m, &targets)?;
            remapped.write(&out)?;
            if let Some(path) = report {
                write_json(&path, &r)?;
            }
            println!(
                "images {} -> {} ({:.1}%), annotations {} -> {} ({:.1}%)",
                r.images_before,
                r.images_after,
                r.image_retention_pct,
                r.annotations_before,
                r.annotations_after,
                r.annotation_retention_pct
            );
        }
        DataCmd::Split {
            annotations,
            size,
            out_dir,
        } => {
            let d = Dataset::read(&annotations)?;
            let subsets = split_subsets(&d, size, stream(seed(seed_flag, None)?, Stream::Split))?;
            std::fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;
            for (n, s) in subsets.iter().enumerate() {
                s.write(out_dir.join(format!("subset_{n:04}.json")))?;
            }
            println!("{} subsets of {size} images -> {}", subsets.len(), out_dir.display());
        }
    }
    Ok(())
}

fn train(config: Option<&Path>, ablation: bool, metrics: &Path, checkpoint: Option<&Path>, seed_flag: Option<u64>) -> Result<()> {
    let (mut cfg, config_seed) = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            let raw: serde_json::Value = serde_json::from_str(&text)?;
            let config_seed = raw.get("seed").and_then(serde_json::Value::as_u64);
            let cfg: ToyTrainConfig = serde_json::from_value(raw).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            (cfg, config_seed)
        }
        None => (ToyTrainConfig::default(), None),
    };
    cfg.seed = seed(seed_flag, config_seed)?;
    if ablation {
        cfg = cfg.ablation();
    }
    let mut out = create(metrics)?;
    let outcome = train_toy(&cfg, |m| write_metrics(&mut out, m))?;
    out.flush().map_err(|e| io_err(metrics, e))?;
    if let Some(path) = checkpoint {
        Checkpoint::from_model(&outcome.model).write(path)?;
    }
    let last = outcome.metrics.last().expect("at least one epoch");
    let map: Vec<String> = last.map.iter().map(|(k, v)| format!("{k} {v:.2}")).collect();
    let check = ordering_check(&last.map)?;
    println!("seed {}: {} epochs, final loss {:.4}", cfg.seed, last.epoch, last.total_loss);
    println!("mAP {}", map.join(", "));
    println!(
        "ordering {}: flipped margin {:.2}, sample margin {:.2}",
        if check.holds { "holds" } else { "fails" },
        check.flipped_margin,
        check.sample_margin
    );
    Ok(())
}

fn detector(args: &DetectorArgs, k: usize, world: Option<&WorldSpec>, seed: u64) -> Result<Box<dyn Detector>> {
    Ok(match args.detector {
        DetectorKind::Sim => {
            let w = world.ok_or_else(|| Error::Config("the sim detector needs --world".into()))?;
            if w.k != k {
                return Err(Error::ShapeMismatch(format!("world has {} classes, dataset {k}", w.k)));
            }
            Box::new(SimDetector::new(w.clone(), stream(seed, Stream::Noise)))
        }
        DetectorKind::Oracle => {
            let path = args
                .predictions
                .as_ref()
                .ok_or_else(|| Error::Config("the oracle detector needs --predictions".into()))?;
            Box::new(ConstantDetector::read_jsonl(k, path)?)
        }
        DetectorKind::Http => {
            let url = args
                .url
                .clone()
                .ok_or_else(|| Error::Config("the http detector needs --url".into()))?;
            if !(args.timeout_secs.is_finite() && args.timeout_secs > 0.0) {
                return Err(Error::Config("timeout must be positive".into()));
            }
            Box::new(HttpDetector::new(k, url, Duration::from_secs_f64(args.timeout_secs), args.retries))
        }
    })
}

fn read_world(args: &DetectorArgs) -> Result<Option<WorldSpec>> {
    args.world.as_ref().map(WorldSpec::read).transpose()
}

/// `--et` when given, else the world reference.
fn training_prior(et: Option<&PathBuf>, world: Option<&WorldSpec>) -> Result<EdgeMatrix<f64>> {
    match (et, world) {
        (Some(path), _) => EdgeMatrix::read(path),
        (None, Some(w)) => Ok(w.reference.clone()),
        (None, None) => Err(Error::Config("pass --et or --world for the training prior".into())),
    }
}

fn selfcal(args: SelfcalArgs, seed_flag: Option<u64>) -> Result<()> {
    let seed = seed(seed_flag, None)?;
    let world = read_world(&args.detector)?;
    let images = match &args.annotations {
        Some(path) => {
            let d = Dataset::read(path)?;
            split_subsets(&d, args.subset_size, stream(seed, Stream::Split))?
                .into_iter()
                .next()
                .ok_or_else(|| Error::Config(format!("{} has fewer than {} images", path.display(), args.subset_size)))?
        }
        None => {
            let w = world
                .as_ref()
                .ok_or_else(|| Error::Config("pass --annotations or --world".into()))?;
            let deploy = match &args.scene_weights {
                Some(weights) => w.with_scene_weights(normalized(weights)?)?,
                None => w.clone(),
            };
            gen_dataset(&deploy, args.subset_size, substream(seed, "data"))?
        }
    };
    let e_t = training_prior(args.et.as_ref(), world.as_ref())?;
    let det = detector(&args.detector, images.k(), world.as_ref(), seed)?;
    let cfg = SelfCalConfig {
        eta: args.eta,
        max_iterations: args.iters,
        presence_threshold: args.tau,
        confidence_floor: args.floor,
        tolerance: args.tolerance,
        z_axis: match args.z_axis {
            Axis::Column => ZAxis::Column,
            Axis::Row => ZAxis::Row,
        },
        statistics: args.running_decay.map_or(Statistics::Full, |decay| Statistics::Running { decay }),
    };
    let eval_cfg = EvalConfig::default();
    let result = selfcal_run(det.as_ref(), &images, &cfg, &e_t, (!args.no_eval).then_some(&eval_cfg));
    let (trace, error) = match result {
        Ok(trace) => (trace, None),
        Err(failure) => (failure.trace, Some(failure.error)),
    };
    let mut out = create(&args.trace)?;
    trace.write_jsonl(&mut out)?;
    out.flush().map_err(|e| io_err(&args.trace, e))?;
    if let Some(e) = error {
        return Err(e);
    }
    if let Some(path) = &args.out {
        trace.final_edge.write(path)?;
    }
    let (first, last) = match (trace.iterations.first(), trace.iterations.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => {
            println!("no iterations run");
            return Ok(());
        }
    };
    println!(
        "{} iteration(s) on {} images, {}",
        trace.iterations.len(),
        images.len(),
        if trace.converged { "converged" } else { "not converged" }
    );
    println!(
        "step max {:.3e} -> {:.3e}, step mae {:.3e} -> {:.3e}",
        first.step_max, last.step_max, first.step_mae, last.step_mae
    );
    if let (Some(a), Some(b)) = (&first.metrics, &last.metrics) {
        println!("AP {:.2} -> {:.2}", a.ap, b.ap);
    }
    let large = last.effective_step.iter().filter(|&&s| s >= 2.0).count();
    if large > 0 {
        log::warn!("{large} class(es) have an effective step of 2 or more; their columns may oscillate");
    }
    Ok(())
}

fn eval_config(r: &ReportArgs) -> EvalConfig {
    EvalConfig {
        max_detections: r.max_detections,
        area_ranges: r.area_ranges,
        ..EvalConfig::default()
    }
}

fn eval(cmd: EvalCmd, seed_flag: Option<u64>) -> Result<()> {
    let seed = seed(seed_flag, None)?;
    match cmd {
        EvalCmd::Sweep {
            detector: det_args,
            annotations,
            priors,
            et,
            batch_size,
            report,
        } => {
            let d = Dataset::read(&annotations)?;
            let world = read_world(&det_args)?;
            let e_t = training_prior(et.as_ref(), world.as_ref())?;
            let det = detector(&det_args, d.k(), world.as_ref(), seed)?;
            let sources = priors
                .iter()
                .map(|code| {
                    let kind = PriorKind::parse(code)?;
                    Ok((kind, standard_prior(kind, &d, &e_t, (batch_size, stream(seed, Stream::Split)))?))
                })
                .collect::<Result<Vec<_>>>()?;
            let r = prior_sweep(det.as_ref(), &d, &sources, &e_t, &eval_config(&report))?;
            write_json(&report.out, &r)?;
            let text = r.to_text();
            if let Some(path) = &report.text {
                write_text(path, &text)?;
            }
            print!("{text}");
        }
        EvalCmd::Subsets {
            detector: det_args,
            annotations,
            sizes,
            et,
            report,
        } => {
            let d = Dataset::read(&annotations)?;
            let world = read_world(&det_args)?;
            let e_t = training_prior(et.as_ref(), world.as_ref())?;
            let det = detector(&det_args, d.k(), world.as_ref(), seed)?;
            let cfg = eval_config(&report);
            let reports = sizes
                .iter()
                .map(|&size| subset_eval(det.as_ref(), &d, size, stream(seed, Stream::Split), &e_t, &cfg))
                .collect::<Result<Vec<_>>>()?;
            write_json(&report.out, &reports)?;
            let text = subset_table(&reports);
            if let Some(path) = &report.text {
                write_text(path, &text)?;
            }
            print!("{text}");
        }
    }
    Ok(())
}
