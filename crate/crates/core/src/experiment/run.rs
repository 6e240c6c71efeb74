use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::report::{directional_check, render_report, render_sweep, summarize, EvalReport, SweepReport};
use super::{
    canonical_pretty, read_checkpoint, write_atomic, write_checkpoint, ExperimentConfig, ExperimentError, Protocol,
    Result,
};
use crate::aggregation::{AggregationStrategy, PromptLearner};
use crate::backbone::{pretrain_contrastive, Backbone};
use crate::data::{filter_classes, generate, generate_pretraining, make_shifted_variant, split_base_new, Shift, SyntheticSpec};
use crate::par;
use crate::tensor::Namespace;
use crate::train::{
    corollary1_experiment, eval_cross_dataset, eval_domain_generalization, eval_open_world, training_loss,
    tune_prompts, CorollaryResult, CrossDatasetRecord, DomainRecord, LabelSpace, OpenWorldRecord, PromptedModel,
    TrainConfig,
};

/// Everything measured for one seed. Contains no timings, so re-running the
/// same config reproduces the file byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub config_digest: String,
    pub seed: u64,
    pub strategy: AggregationStrategy,
    pub depth: usize,
    pub length: usize,
    pub backbone_digest: String,
    pub prompt_census: usize,
    pub trainable_census: usize,
    pub epoch_losses: Vec<f64>,
    pub final_train_loss: f64,
    pub base_classes: Vec<usize>,
    pub new_classes: Vec<usize>,
    pub open_world: Option<OpenWorldRecord>,
    pub cross_dataset: Option<CrossDatasetRecord>,
    pub domain: Option<DomainRecord>,
    pub corollary: Option<CorollaryResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedStatus {
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    pub code_version: String,
    pub strategy: AggregationStrategy,
    pub backbone_key: String,
    pub backbone_digest: String,
    pub backbone_cached: bool,
    pub parallel: bool,
    /// "complete", or "partial" when any seed failed.
    pub status: String,
    pub seeds: Vec<SeedStatus>,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub report: Option<EvalReport>,
}

/// Pretrained backbone for the config, loaded from the cache under `root`
/// or trained and stored there. Returns whether it came from the cache.
pub fn backbone_for(cfg: &ExperimentConfig, root: &Path) -> Result<(Backbone, bool)> {
    let key = cfg.backbone_key();
    let path = root.join("backbones").join(format!("{}.ckpt", &key[..16]));
    let mut bb = Backbone::new(cfg.backbone.clone())?;
    if path.exists() {
        let ck = read_checkpoint(&path, &key, Namespace::Backbone)?;
        for (name, t) in ck.params.iter() {
            bb.params.assign(name, t.clone())?;
        }
        if ck.params.len() != bb.params.len() {
            return Err(ExperimentError::Checkpoint {
                path,
                message: "parameter count does not match the backbone layout".into(),
            });
        }
        bb.freeze();
        return Ok((bb, true));
    }
    let world = SyntheticSpec {
        visual_variance: cfg.pretrain.visual_variance,
        sample_seed: 0,
        ..cfg.data.clone()
    };
    let corpus = generate_pretraining(&world, cfg.pretrain.per_class)?;
    pretrain_contrastive(&mut bb, &corpus, &cfg.pretrain)?;
    write_checkpoint(&path, &bb.params, &key)?;
    Ok((bb, false))
}

fn permutation(n: usize, seed: u64, target: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(target));
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng);
    p
}

/// Tune and evaluate one seed against a frozen backbone.
pub fn run_seed(cfg: &ExperimentConfig, backbone: &Backbone, seed: u64) -> Result<(SeedRecord, PromptLearner)> {
    let spec = SyntheticSpec {
        sample_seed: seed,
        ..cfg.data.clone()
    };
    let data = generate(&spec)?;
    let (base, new) = split_base_new(spec.classes, cfg.protocols.base_fraction)?;
    let train = filter_classes(&data.train, &base);
    let space = LabelSpace::new(&data, &base)?;
    let before = backbone.digest();

    let mut learner = PromptLearner::new(&backbone.config, cfg.prompt.clone(), seed)?;
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let log = tune_prompts(backbone, &mut learner, &train, &space, &train_cfg)?;
    let final_train_loss = training_loss(backbone, &learner, &train, &space)?;
    let model = PromptedModel {
        backbone,
        learner: &learner,
    };
    let on = |p: Protocol| cfg.protocols.enabled.contains(&p);

    let open_world = if on(Protocol::OpenWorld) {
        Some(eval_open_world(&model, &data, &base, &new)?)
    } else {
        None
    };
    let cross_dataset = if on(Protocol::CrossDataset) {
        let mut targets = Vec::new();
        for t in 1..=cfg.protocols.cross_targets as u64 {
            let fresh = generate(&SyntheticSpec {
                sample_seed: seed.wrapping_add(1000 * t),
                ..cfg.data.clone()
            })?;
            let perm = permutation(spec.classes, seed, t);
            targets.push((format!("permuted-{t}"), fresh.permute_classes(&perm)?));
        }
        Some(eval_cross_dataset(&model, &data, &targets)?)
    } else {
        None
    };
    let domain = if on(Protocol::DomainGeneralization) {
        let mut variants = Vec::new();
        for shift in Shift::ALL {
            for &m in &cfg.protocols.shift_magnitudes {
                variants.push((format!("{shift}@{m:.2}"), make_shifted_variant(&data, shift, m)?));
            }
        }
        Some(eval_domain_generalization(&model, &data, &variants)?)
    } else {
        None
    };
    let corollary = if on(Protocol::Corollary) {
        Some(corollary1_experiment(
            backbone,
            &cfg.prompt,
            &train_cfg,
            &cfg.corollary,
            &train,
            &space,
            seed,
        )?)
    } else {
        None
    };

    let after = backbone.digest();
    if after != before {
        return Err(ExperimentError::Report(format!(
            "backbone digest changed during seed {seed}: {before} -> {after}"
        )));
    }
    let record = SeedRecord {
        config_digest: cfg.digest(),
        seed,
        strategy: cfg.prompt.aggregation,
        depth: cfg.prompt.depth,
        length: cfg.prompt.length,
        backbone_digest: after,
        prompt_census: learner.prompt_census(),
        trainable_census: learner.trainable_census(),
        epoch_losses: log.epoch_losses,
        final_train_loss,
        base_classes: base,
        new_classes: new,
        open_world,
        cross_dataset,
        domain,
        corollary,
    };
    Ok((record, learner))
}

pub fn run_dir(cfg: &ExperimentConfig, root: &Path) -> PathBuf {
    root.join("runs").join(format!(
        "{}-J{}-b{}-{}",
        cfg.prompt.aggregation,
        cfg.prompt.depth,
        cfg.prompt.length,
        &cfg.digest()[..12]
    ))
}

/// Full pipeline: backbone, per-seed tuning and evaluation, artifacts.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let root = cfg.output_root();
    let (backbone, cached) = backbone_for(cfg, &root)?;
    run_with_backbone(cfg, &backbone, cached, start)
}

fn run_with_backbone(cfg: &ExperimentConfig, backbone: &Backbone, cached: bool, start: Instant) -> Result<RunOutcome> {
    let root = cfg.output_root();
    let dir = run_dir(cfg, &root);
    let digest = cfg.digest();
    write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;

    let results = par::with_workers(cfg.run.workers, || {
        par::map(&cfg.run.seeds, |&seed| run_seed(cfg, backbone, seed))
    });
    let mut statuses = Vec::new();
    let mut records = Vec::new();
    for (&seed, res) in cfg.run.seeds.iter().zip(results) {
        match res {
            Ok((record, learner)) => {
                let seed_dir = dir.join(format!("seed-{seed}"));
                write_atomic(&seed_dir.join("metrics.json"), canonical_pretty(&record).as_bytes())?;
                write_checkpoint(&seed_dir.join("prompts.ckpt"), &learner.params, &digest)?;
                records.push(record);
                statuses.push(SeedStatus {
                    seed,
                    ok: true,
                    error: None,
                });
            }
            Err(e) => statuses.push(SeedStatus {
                seed,
                ok: false,
                error: Some(e.to_string()),
            }),
        }
    }
    let report = if records.is_empty() {
        None
    } else {
        let r = summarize(&records)?;
        write_atomic(&dir.join("report.json"), canonical_pretty(&r).as_bytes())?;
        write_atomic(&dir.join("report.txt"), render_report(&r).as_bytes())?;
        Some(r)
    };
    let complete = statuses.iter().all(|s| s.ok);
    let manifest = Manifest {
        config_digest: digest,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        strategy: cfg.prompt.aggregation,
        backbone_key: cfg.backbone_key(),
        backbone_digest: backbone.digest(),
        backbone_cached: cached,
        parallel: par::is_parallel(),
        status: if complete { "complete" } else { "partial" }.to_string(),
        seeds: statuses,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    write_atomic(&dir.join("manifest.json"), canonical_pretty(&manifest).as_bytes())?;
    Ok(RunOutcome { dir, manifest, report })
}

/// Axes of an ablation sweep; empty axes keep the config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub strategies: Vec<AggregationStrategy>,
    pub depths: Vec<usize>,
    pub lengths: Vec<usize>,
}

/// Run every combination on one shared backbone and tabulate them.
pub fn sweep(cfg: &ExperimentConfig, spec: &SweepSpec) -> Result<(SweepReport, Vec<RunOutcome>, PathBuf)> {
    cfg.validate()?;
    let root = cfg.output_root();
    let (backbone, cached) = backbone_for(cfg, &root)?;
    let or = |v: &Vec<usize>, d: usize| if v.is_empty() { vec![d] } else { v.clone() };
    let strategies = if spec.strategies.is_empty() {
        vec![cfg.prompt.aggregation]
    } else {
        spec.strategies.clone()
    };
    let mut outcomes = Vec::new();
    for &depth in &or(&spec.depths, cfg.prompt.depth) {
        for &length in &or(&spec.lengths, cfg.prompt.length) {
            for &aggregation in &strategies {
                let mut c = cfg.clone();
                c.prompt.depth = depth;
                c.prompt.length = length;
                c.prompt.aggregation = aggregation;
                c.validate()?;
                outcomes.push(run_with_backbone(&c, &backbone, cached, Instant::now())?);
            }
        }
    }
    let rows: Vec<EvalReport> = outcomes.iter().filter_map(|o| o.report.clone()).collect();
    let mut directional = Vec::new();
    for bmip in rows.iter().filter(|r| r.strategy == AggregationStrategy::Bmip) {
        for other in &rows {
            let same_shape = other.depth == bmip.depth && other.length == bmip.length;
            let baseline = matches!(
                other.strategy,
                AggregationStrategy::Independent | AggregationStrategy::UniDirectional
            );
            if same_shape && baseline {
                directional.extend(directional_check("open_world.hm", bmip, other));
            }
        }
    }
    let flagged = directional.iter().any(|d| !d.met);
    let report = SweepReport {
        rows,
        directional,
        flagged,
    };
    let key = serde_json::json!({ "config": cfg.digest(), "sweep": spec }).to_string();
    let id = crate::tensor::to_hex(&<sha2::Sha256 as sha2::Digest>::digest(key.as_bytes()));
    let dir = root.join("sweeps").join(&id[..12]);
    write_atomic(&dir.join("sweep.json"), canonical_pretty(&report).as_bytes())?;
    write_atomic(&dir.join("sweep.txt"), render_sweep(&report).as_bytes())?;
    Ok((report, outcomes, dir))
}
