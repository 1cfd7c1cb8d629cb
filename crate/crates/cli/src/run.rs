use std::fs;
use std::path::{Path, PathBuf};

use advmetric::attacks::{attack_gallery, AttackConfig, AttackMode, Iterations, TargetPolicy};
use advmetric::checkpoint::{load_checkpoint, save_checkpoint};
use advmetric::data::{
    export_adversarial_gallery, load_image_folder, synth_generate, write_split, Dataset,
    ImageBatch, ImageRecord, ImageShape, Jitter, Naming, Split, SynthSpec,
};
use advmetric::defense::{generate_adv_training_set, train_metric_preserving, DefensePlan};
use advmetric::embedder::{
    extract_features, init_model, train_cross_entropy, train_triplet, EmbedderConfig, FeatureModel,
    ModelParams, TrainHyper,
};
use advmetric::eval::{
    evaluate, map_ratio, ranking_list, render_ranking_strip, save_ranking_strip, EvalReport, Labels,
};
use advmetric::metrics::{pairwise_distances, MetricSpec, PsdMatrix};
use anyhow::{bail, Context, Result};
use log::info;
use serde::Serialize;

use crate::args::{
    AttackArgs, AttackSettings, BenchArgs, Command, DefendArgs, EvalArgs, HyperArgs, LossArg,
    RerunArgs, SynthArgs, TrainArgs,
};

pub const CONFIG_FILE: &str = "config.json";

/// Fills every defaulted setting that depends on other settings, so that
/// the recorded config reproduces the run on its own.
fn resolve(command: Command) -> Result<Command> {
    Ok(match command {
        Command::Attack(mut a) => {
            resolve_attack(&mut a.attack)?;
            Command::Attack(a)
        }
        Command::Defend(mut d) => {
            resolve_attack(&mut d.attack)?;
            Command::Defend(d)
        }
        Command::Bench(mut b) => {
            resolve_attack(&mut b.attack)?;
            if b.eval_metric.is_none() {
                b.eval_metric = Some(b.attack.metric.clone());
            }
            Command::Bench(b)
        }
        other => other,
    })
}

fn resolve_attack(settings: &mut AttackSettings) -> Result<()> {
    settings.alpha.get_or_insert(settings.eps.min(1.0));
    let cfg = attack_config(settings, AttackMode::NonTargeted, TargetPolicy::RandomOther)?;
    settings.iters = Iterations::Fixed(cfg.resolved_iters()?);
    Ok(())
}

pub fn execute(command: Command) -> Result<()> {
    if let Command::Rerun(RerunArgs { config }) = &command {
        let text =
            fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
        let recorded: Command =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
        if matches!(recorded, Command::Rerun(_)) {
            bail!("{} records a rerun, not a command", config.display());
        }
        return execute(recorded);
    }
    let command = resolve(command)?;
    match &command {
        Command::Synth(a) => synth(a, &command),
        Command::Train(a) => train(a, &command),
        Command::Attack(a) => attack(a, &command),
        Command::Defend(a) => defend(a, &command),
        Command::Eval(a) => eval(a, &command),
        Command::Bench(a) => bench(a, &command),
        Command::Rerun(_) => unreachable!("handled above"),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `model.ckpt` → `model.config.json`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn parse_metric(spec: &str) -> Result<MetricSpec> {
    if spec == "euclidean" {
        return Ok(MetricSpec::Euclidean);
    }
    match spec.strip_prefix("mahalanobis:") {
        Some(path) => Ok(MetricSpec::Mahalanobis(PsdMatrix::load_json(Path::new(
            path,
        ))?)),
        None => bail!("unknown metric {spec:?} (expected euclidean or mahalanobis:<file>)"),
    }
}

fn attack_config(
    settings: &AttackSettings,
    mode: AttackMode,
    policy: TargetPolicy,
) -> Result<AttackConfig> {
    let mut cfg = AttackConfig::new(settings.method.into(), settings.eps);
    if let Some(alpha) = settings.alpha {
        cfg.alpha = alpha;
    }
    cfg.mu = settings.mu;
    cfg.iters = settings.iters;
    cfg.mode = mode;
    cfg.target_policy = policy;
    cfg.seed = settings.attack_seed;
    cfg.validate()?;
    Ok(cfg)
}

fn hyper(h: &HyperArgs) -> Result<TrainHyper> {
    let &[p, k] = h.pk.as_slice() else {
        bail!("--pk takes two values, P,K");
    };
    let hyper = TrainHyper {
        learning_rate: h.learning_rate,
        epochs: h.epochs,
        batch_size: h.batch_size,
        margin: h.margin,
        pk_batch: (p, k),
        seed: h.seed,
    };
    hyper.validate()?;
    Ok(hyper)
}

fn split_dir(data: Option<&PathBuf>, explicit: Option<&PathBuf>, split: Split) -> Result<PathBuf> {
    match (explicit, data) {
        (Some(dir), _) => Ok(dir.clone()),
        (None, Some(root)) => Ok(root.join(split.dir_name())),
        (None, None) => bail!(
            "no {} directory given (use --data or --{})",
            split.dir_name(),
            split.dir_name()
        ),
    }
}

fn load_split(dir: &Path, naming: Naming, split: Split) -> Result<Vec<ImageRecord>> {
    let records = load_image_folder(dir, naming, split)?;
    info!(
        "loaded {} {} images from {}",
        records.len(),
        split.dir_name(),
        dir.display()
    );
    Ok(records)
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<ModelParams>> {
    paths
        .iter()
        .map(|p| load_checkpoint(p).map_err(anyhow::Error::from))
        .collect()
}

fn as_feature_models(models: &[ModelParams]) -> Vec<&dyn FeatureModel> {
    models.iter().map(|m| m as &dyn FeatureModel).collect()
}

fn synth(a: &SynthArgs, command: &Command) -> Result<()> {
    let spec = SynthSpec {
        num_train_ids: a.train_ids,
        num_test_ids: a.test_ids,
        images_per_id_per_camera: a.images_per_camera,
        num_cameras: a.cameras,
        image_size: ImageShape::new(a.height, a.width, a.channels),
        jitter: Jitter {
            color_sigma: a.color_sigma,
            shift_max: a.shift_max,
            noise_sigma: a.noise_sigma,
        },
        seed: a.seed,
    };
    let Dataset {
        train,
        probe,
        gallery,
        ..
    } = synth_generate(&spec)?;
    let mut listing = String::new();
    for (split, records) in [
        (Split::Train, &train),
        (Split::Probe, &probe),
        (Split::Gallery, &gallery),
    ] {
        write_split(records, &a.out.join(split.dir_name()))?;
        for r in records {
            let line = serde_json::json!({
                "split": split,
                "file": r.source_path,
                "identity": r.identity,
                "camera": r.camera,
            });
            listing.push_str(&line.to_string());
            listing.push('\n');
        }
    }
    let splits = a.out.join("splits.jsonl");
    fs::write(&splits, listing).with_context(|| format!("writing {}", splits.display()))?;
    write_json(&a.out.join(CONFIG_FILE), command)?;
    println!(
        "wrote {} train, {} probe and {} gallery images to {}",
        train.len(),
        probe.len(),
        gallery.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainLog<'a> {
    loss: &'a str,
    initial_loss: f32,
    final_loss: f32,
    epoch_losses: &'a [f32],
}

fn train(a: &TrainArgs, command: &Command) -> Result<()> {
    let records = load_split(
        &a.data.join(Split::Train.dir_name()),
        a.naming.into(),
        Split::Train,
    )?;
    let batch = ImageBatch::from_records(&records)?;
    let labels = batch.class_labels();
    let hyper = hyper(&a.hyper)?;
    let mut config = EmbedderConfig::new(batch.shape, a.hidden.clone(), a.feature_dim);
    if a.loss == LossArg::Ce {
        config = config.with_classes(labels.num_classes());
    }
    let fresh = init_model(&config, hyper.seed)?;
    let report = match a.loss {
        LossArg::Ce => train_cross_entropy(&fresh, &batch, &labels.labels, &hyper)?,
        LossArg::Triplet => train_triplet(&fresh, &batch, &labels.labels, &hyper)?,
    };
    save_checkpoint(&report.model, &a.out)?;
    write_json(&sibling(&a.out, CONFIG_FILE), command)?;
    write_json(
        &sibling(&a.out, "log.json"),
        &TrainLog {
            loss: match a.loss {
                LossArg::Ce => "cross_entropy",
                LossArg::Triplet => "triplet",
            },
            initial_loss: report.initial_loss,
            final_loss: report.final_loss,
            epoch_losses: &report.epoch_losses,
        },
    )?;
    println!(
        "training loss {:.6} -> {:.6}; checkpoint {}",
        report.initial_loss,
        report.final_loss,
        a.out.display()
    );
    Ok(())
}

fn attack(a: &AttackArgs, command: &Command) -> Result<()> {
    let naming = a.naming.into();
    let probe = load_split(
        &split_dir(a.data.as_ref(), a.probe.as_ref(), Split::Probe)?,
        naming,
        Split::Probe,
    )?;
    let gallery = load_split(
        &split_dir(a.data.as_ref(), a.gallery.as_ref(), Split::Gallery)?,
        naming,
        Split::Gallery,
    )?;
    let models = load_models(&a.models)?;
    let metric = parse_metric(&a.attack.metric)?;
    let (mode, policy) = match (a.targeted, a.target_id) {
        (false, _) => (AttackMode::NonTargeted, TargetPolicy::RandomOther),
        (true, Some(t)) => (AttackMode::Targeted, TargetPolicy::FixedIdentity(t)),
        (true, None) => (AttackMode::Targeted, TargetPolicy::RandomOther),
    };
    let cfg = attack_config(&a.attack, mode, policy)?;
    let examples = attack_gallery(&as_feature_models(&models), &metric, &probe, &gallery, &cfg)?;
    let manifest = export_adversarial_gallery(&examples, &a.out)?;
    write_json(&a.out.join(CONFIG_FILE), command)?;
    let attacked = examples.iter().filter(|e| e.attacked).count();
    println!(
        "attacked {attacked} of {} gallery images ({} iterations); manifest {}",
        examples.len(),
        cfg.resolved_iters()?,
        manifest.display()
    );
    Ok(())
}

fn defend(a: &DefendArgs, command: &Command) -> Result<()> {
    let train = load_split(
        &a.data.join(Split::Train.dir_name()),
        a.naming.into(),
        Split::Train,
    )?;
    let clean = load_checkpoint(&a.model)?;
    let metric = parse_metric(&a.attack.metric)?;
    let cfg = attack_config(
        &a.attack,
        AttackMode::NonTargeted,
        TargetPolicy::RandomOther,
    )?;
    let plan = DefensePlan::new(clean, cfg, hyper(&a.hyper)?).with_init(a.init.into());
    plan.validate()?;
    let adversarial =
        generate_adv_training_set(&plan.clean_model, &metric, &train, &plan.attack_cfg)?;
    export_adversarial_gallery(&adversarial, &a.adv_out)?;
    write_json(&a.adv_out.join(CONFIG_FILE), command)?;
    let report = train_metric_preserving(&plan, &train, &adversarial)?;
    save_checkpoint(&report.model, &a.out)?;
    write_json(&sibling(&a.out, CONFIG_FILE), command)?;
    println!(
        "generated {} adversarial training images in {}; retraining loss {:.6} -> {:.6}; checkpoint {}",
        adversarial.len(),
        a.adv_out.display(),
        report.initial_loss,
        report.final_loss,
        a.out.display()
    );
    Ok(())
}

fn evaluate_model(
    model: &ModelParams,
    metric: &MetricSpec,
    probe: &ImageBatch,
    gallery: &ImageBatch,
    ranks: &[usize],
    protocol: advmetric::eval::Protocol,
) -> Result<(EvalReport, advmetric::metrics::DistanceMatrix)> {
    let pf = extract_features(model, probe)?;
    let gf = extract_features(model, gallery)?;
    let dist = pairwise_distances(metric, &pf, &gf)?;
    let report = evaluate(
        &dist,
        &Labels::new(&probe.identities, &probe.cameras),
        &Labels::new(&gallery.identities, &gallery.cameras),
        ranks,
        protocol,
    )?;
    Ok((report, dist))
}

fn eval(a: &EvalArgs, command: &Command) -> Result<()> {
    let naming = a.naming.into();
    let probe_records = load_split(
        &split_dir(a.data.as_ref(), a.probe.as_ref(), Split::Probe)?,
        naming,
        Split::Probe,
    )?;
    let gallery_records = load_split(
        &split_dir(a.data.as_ref(), a.gallery.as_ref(), Split::Gallery)?,
        naming,
        Split::Gallery,
    )?;
    let probe = ImageBatch::from_records(&probe_records)?;
    let gallery = ImageBatch::from_records(&gallery_records)?;
    let model = load_checkpoint(&a.model)?;
    let metric = parse_metric(&a.metric)?;
    let (report, dist) = evaluate_model(
        &model,
        &metric,
        &probe,
        &gallery,
        &a.ranks,
        a.protocol.into(),
    )?;

    println!("{}", serde_json::to_string(&report)?);
    if let Some(baseline) = &a.baseline {
        let text = fs::read_to_string(baseline)
            .with_context(|| format!("reading {}", baseline.display()))?;
        let base: EvalReport = serde_json::from_str(&text)?;
        println!("mAP ratio {:.6}", map_ratio(&report, &base)?);
    }
    if let Some(out) = &a.out {
        write_json(out, &report)?;
        write_json(&sibling(out, CONFIG_FILE), command)?;
    }
    if let (Some(top_k), Some(dir)) = (a.ranking, &a.ranking_out) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut lists = Vec::new();
        for p in 0..a.ranking_probes.min(probe.len()) {
            let list = ranking_list(p, probe.identities[p], &dist, &gallery.identities, top_k)?;
            let strip = render_ranking_strip(probe.shape, probe.image(p), &list, |j| {
                gallery.image(j).to_vec()
            });
            save_ranking_strip(&strip, &dir.join(format!("probe_{p:04}.png")))?;
            lists.push(list);
        }
        write_json(&dir.join("rankings.json"), &lists)?;
        write_json(&dir.join(CONFIG_FILE), command)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchTable {
    models: Vec<String>,
    attack_metric: String,
    eval_metric: String,
    /// Clean-gallery mAP of each model.
    clean: Vec<f64>,
    /// `adversarial[i][j]`: mAP of model j on the gallery attacked with
    /// model i. The diagonal is white-box, the rest black-box.
    adversarial: Vec<Vec<f64>>,
    /// `adversarial[i][j] / clean[j]`.
    ratio: Vec<Vec<f64>>,
}

fn bench(a: &BenchArgs, command: &Command) -> Result<()> {
    let naming: Naming = a.naming.into();
    let probe_records = load_split(&a.data.join(Split::Probe.dir_name()), naming, Split::Probe)?;
    let gallery_records = load_split(
        &a.data.join(Split::Gallery.dir_name()),
        naming,
        Split::Gallery,
    )?;
    let probe = ImageBatch::from_records(&probe_records)?;
    let gallery = ImageBatch::from_records(&gallery_records)?;
    let models = load_models(&a.models)?;
    let attack_metric = parse_metric(&a.attack.metric)?;
    let eval_name = a
        .eval_metric
        .clone()
        .unwrap_or_else(|| a.attack.metric.clone());
    let eval_metric = parse_metric(&eval_name)?;
    let cfg = attack_config(
        &a.attack,
        AttackMode::NonTargeted,
        TargetPolicy::RandomOther,
    )?;
    let protocol = a.protocol.into();
    let ranks = [1];

    let clean = models
        .iter()
        .map(|m| {
            Ok(
                evaluate_model(m, &eval_metric, &probe, &gallery, &ranks, protocol)?
                    .0
                    .map,
            )
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut adversarial = Vec::with_capacity(models.len());
    for (i, source) in models.iter().enumerate() {
        info!("attacking with {}", a.models[i].display());
        let examples = attack_gallery(
            &[source as &dyn FeatureModel],
            &attack_metric,
            &probe_records,
            &gallery_records,
            &cfg,
        )?;
        let adv = ImageBatch::from_adversarial(&examples)?;
        let row = models
            .iter()
            .map(|m| {
                Ok(
                    evaluate_model(m, &eval_metric, &probe, &adv, &ranks, protocol)?
                        .0
                        .map,
                )
            })
            .collect::<Result<Vec<f64>>>()?;
        adversarial.push(row);
    }
    let ratio = adversarial
        .iter()
        .map(|row| row.iter().zip(&clean).map(|(a, c)| a / c).collect())
        .collect();
    let table = BenchTable {
        models: a.models.iter().map(|p| p.display().to_string()).collect(),
        attack_metric: a.attack.metric.clone(),
        eval_metric: eval_name,
        clean,
        adversarial,
        ratio,
    };
    write_json(&a.out, &table)?;
    write_json(&sibling(&a.out, CONFIG_FILE), command)?;
    println!("{}", serde_json::to_string(&table)?);
    Ok(())
}
