//! Experiment orchestration: stage-1 reconstruction pretraining, the
//! external-arm proxy pretraining, stage-2 frozen-then-partially-unfrozen
//! classification, and the two-arm comparison with its parity gate.

pub mod checkpoint;
pub mod config;
pub mod log;

pub use checkpoint::{
    load_encoder, load_vae, load_weights_into, read_manifest, save_checkpoint, save_weights,
    CheckpointKind, CheckpointManifest, OptimizerNote,
};
pub use config::{
    BackboneConfig, DataConfig, ExperimentConfig, FocalConfig, HeadConfig, SourceConfig,
    SourceKind, Stage1Config, Stage2Config,
};
pub use log::{EpochLog, EpochRow};

use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array2, Array3, Array4, ArrayD, ArrayViewD, ArrayViewMutD, Axis, Ix2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classify::{
    focal_loss, focal_loss_grad, Backbone, Classifier, FocalParams, Head, HeadSpec,
};
use crate::data::{
    dedupe_by_patient, filter_modality, read_manifest as read_data_manifest, split, ImageRecord,
    PriorityMap,
};
use crate::error::{Error, Result};
use crate::nn::init::standard_normal;
use crate::nn::layer::{Linear, RunMode};
use crate::nn::params::{checksum_params, checksum_params_where, GradStore, Model};
use crate::nn::{Adam, ScheduleFreeAdamW};
use crate::vae::{beta_schedule, elbo_forward, elbo_step, InitKind, VaeModel};

/// Train/validation records after ingest filtering and the configured split.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: Vec<ImageRecord>,
    pub val: Vec<ImageRecord>,
}

/// Applies the configured ingest pipeline: manifest read, modality filter,
/// per-patient cap, deterministic split.
pub fn load_split(cfg: &ExperimentConfig) -> Result<SplitData> {
    let map = match &cfg.data.priority_map {
        Some(path) => PriorityMap::from_path(path)?,
        None => PriorityMap::new(),
    };
    let mut records = read_data_manifest(&cfg.data.manifest, &map)?;
    if cfg.data.dermatoscopic_only {
        records = filter_modality(&records);
    }
    if let Some(max) = cfg.data.max_per_patient {
        records = dedupe_by_patient(&records, max);
    }
    let (train, val) = split(&records, &cfg.data.split_spec())?;
    Ok(SplitData { train, val })
}

/// Image tensors and class indices for one split, loaded up front so
/// epochs never touch the filesystem.
struct Tensors {
    xs: Vec<Array3<f64>>,
    ys: Vec<usize>,
}

fn load_tensors(records: &[ImageRecord], resolution: usize) -> Result<Tensors> {
    let mut xs = Vec::with_capacity(records.len());
    let mut ys = Vec::with_capacity(records.len());
    for r in records {
        xs.push(r.pixels(resolution)?);
        ys.push(r.priority.index());
    }
    Ok(Tensors { xs, ys })
}

fn stack(xs: &[Array3<f64>], idx: &[usize]) -> Array4<f64> {
    let (c, h, w) = xs[0].dim();
    let mut out = Array4::zeros((idx.len(), c, h, w));
    for (row, &i) in idx.iter().enumerate() {
        out.index_axis_mut(Axis(0), row).assign(&xs[i]);
    }
    out
}

fn gather(ys: &[usize], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| ys[i]).collect()
}

fn chunks(n: usize, size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(size)
        .map(|c| c.to_vec())
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).expect("artifact serializes");
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn abort_on_non_finite(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(term) => Error::TrainingAbort { epoch, term },
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Stage 1: reconstruction pretraining

#[derive(Debug)]
pub struct PretrainOutcome {
    pub log: EpochLog,
    pub log_path: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub final_recon: f64,
    pub final_kl: f64,
    pub final_total: f64,
}

/// Mean ELBO terms over a split without gradient work; noise is zero so
/// validation scores the posterior mean deterministically.
fn vae_eval_terms(vae: &VaeModel, t: &Tensors, beta: f64, batch: usize) -> Result<(f64, f64, f64)> {
    let n = t.xs.len();
    let (mut recon, mut kl, mut total) = (0.0, 0.0, 0.0);
    for idx in chunks(n, batch) {
        let x = stack(&t.xs, &idx);
        let noise = Array2::zeros((idx.len(), vae.latent_dim));
        let terms = elbo_forward(vae, &x, beta, &noise)?;
        let w = idx.len() as f64;
        recon += terms.recon * w;
        kl += terms.kl * w;
        total += terms.total * w;
    }
    Ok((recon / n as f64, kl / n as f64, total / n as f64))
}

/// Trains a randomly initialized VAE on the train split and writes the
/// epoch log and final checkpoint under `out_dir`.
pub fn pretrain(
    cfg: &ExperimentConfig,
    data: &SplitData,
    out_dir: &Path,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let spec = cfg.backbone.resolve()?;
    if spec.init != InitKind::Random {
        return Err(Error::InvalidConfig(
            "pretraining starts from scratch; backbone.init must be \"random\"".into(),
        ));
    }
    let s1 = &cfg.stage1;
    let resolution = cfg.data.resolution;
    let config_hash = cfg.config_hash();

    let mut rng = ChaCha8Rng::seed_from_u64(s1.seed);
    let mut vae = VaeModel::new(spec.clone(), resolution, s1.latent_dim, &mut rng)?;
    let train = load_tensors(&data.train, resolution)?;
    let val = load_tensors(&data.val, resolution)?;
    let mut opt = Adam::new(s1.learning_rate);
    let mut log = EpochLog::new();

    for epoch in 0..s1.epochs {
        let beta = beta_schedule(epoch, s1.warmup_epochs);
        let mut order: Vec<usize> = (0..train.xs.len()).collect();
        order.shuffle(&mut rng);

        let (mut recon_sum, mut kl_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for idx in order.chunks(s1.batch_size) {
            let x = stack(&train.xs, idx);
            let noise = standard_normal(&[idx.len(), s1.latent_dim], &mut rng)
                .into_dimensionality::<Ix2>()
                .unwrap();
            let (terms, grads) =
                elbo_step(&vae, &x, beta, &noise).map_err(abort_on_non_finite(epoch))?;
            if !terms.total.is_finite() {
                return Err(Error::TrainingAbort {
                    epoch,
                    term: "total".into(),
                });
            }
            if grads.any_non_finite() {
                return Err(Error::TrainingAbort {
                    epoch,
                    term: "gradient".into(),
                });
            }
            opt.step(&mut vae, &grads);
            let w = idx.len() as f64;
            recon_sum += terms.recon * w;
            kl_sum += terms.kl * w;
            total_sum += terms.total * w;
        }
        let n = train.xs.len() as f64;
        let (train_recon, train_kl, train_total) = (recon_sum / n, kl_sum / n, total_sum / n);
        let (val_recon, val_kl, val_total) =
            vae_eval_terms(&vae, &val, beta, s1.batch_size).map_err(abort_on_non_finite(epoch))?;

        let mut row = EpochRow::new(&cfg.run_id, epoch, (train_total, val_total), (0.0, 0.0));
        row.train_recon = Some(train_recon);
        row.train_kl = Some(train_kl);
        row.val_recon = Some(val_recon);
        row.val_kl = Some(val_kl);
        row.beta = Some(beta);
        row.config_hash = Some(config_hash.clone());
        log.push(row)?;
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("pretrain.jsonl");
    log.write_jsonl(&log_path)?;
    log.write_csv(&out_dir.join("pretrain.csv"))?;

    let manifest = CheckpointManifest {
        kind: CheckpointKind::Vae,
        family: spec.family,
        stage_widths: spec.stage_widths.clone(),
        feature_dim: spec.feature_dim,
        resolution,
        init: InitKind::Random,
        epoch: s1.epochs - 1,
        seed: s1.seed,
        config_hash,
        param_checksum: checksum_params(&vae, ""),
        latent_dim: Some(s1.latent_dim),
        optimizer: Some(OptimizerNote {
            name: "adam".into(),
            learning_rate: s1.learning_rate,
            schedule: "none".into(),
            interpolation: None,
        }),
        head: None,
        focal: None,
    };
    let checkpoint_dir = save_checkpoint(&out_dir.join("checkpoint"), &manifest, &vae)?;

    let last = log.rows.last().expect("at least one epoch");
    Ok(PretrainOutcome {
        final_recon: last.train_recon.unwrap(),
        final_kl: last.train_kl.unwrap(),
        final_total: last.train_loss,
        log,
        log_path,
        checkpoint_dir,
    })
}

// ---------------------------------------------------------------------------
// External arm: supervised proxy pretraining

/// Encoder plus a linear probe, trained jointly on the proxy task.
struct ProxyNet {
    encoder: crate::vae::Encoder,
    probe: Linear,
}

impl Model for ProxyNet {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ArrayViewD<f64>)) {
        self.encoder.net.visit("backbone/", f);
        f("probe/w", self.probe.w.view().into_dyn());
        f("probe/b", self.probe.b.view().into_dyn());
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<f64>)) {
        self.encoder.net.visit_mut("backbone/", f);
        f("probe/w", self.probe.w.view_mut().into_dyn());
        f("probe/b", self.probe.b.view_mut().into_dyn());
    }
}

#[derive(Debug)]
pub struct ExternalPretrainOutcome {
    pub log: EpochLog,
    pub log_path: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub final_val_acc: f64,
}

fn accuracy(logits: &Array2<f64>, ys: &[usize]) -> f64 {
    let mut hits = 0usize;
    for (row, &y) in logits.rows().into_iter().zip(ys) {
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if pred == y {
            hits += 1;
        }
    }
    hits as f64 / ys.len() as f64
}

/// Produces an externally-sourced feature extractor for the comparison's
/// second arm by fully training the encoder on a supervised proxy task,
/// then checkpointing the encoder alone with init = external_pretrained.
pub fn pretrain_external(
    cfg: &ExperimentConfig,
    data: &SplitData,
    out_dir: &Path,
) -> Result<ExternalPretrainOutcome> {
    cfg.validate()?;
    let spec = cfg.backbone.resolve()?;
    if spec.init != InitKind::ExternalPretrained {
        return Err(Error::InvalidConfig(
            "external pretraining produces an external_pretrained checkpoint; set backbone.init accordingly".into(),
        ));
    }
    let s1 = &cfg.stage1;
    let resolution = cfg.data.resolution;
    let config_hash = cfg.config_hash();

    let mut rng = ChaCha8Rng::seed_from_u64(s1.seed);
    let encoder = crate::vae::Encoder::new(spec.clone(), resolution, &mut rng)?;
    let probe = Linear::new(spec.feature_dim, 3, &mut rng);
    let mut net = ProxyNet { encoder, probe };
    let ce = FocalParams::uniform(0.0, 3);
    let train = load_tensors(&data.train, resolution)?;
    let val = load_tensors(&data.val, resolution)?;
    let mut opt = Adam::new(s1.learning_rate);
    let mut log = EpochLog::new();

    for epoch in 0..s1.epochs {
        let mut order: Vec<usize> = (0..train.xs.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hit_sum) = (0.0, 0.0);
        for idx in order.chunks(s1.batch_size) {
            let x = stack(&train.xs, idx);
            let yb = gather(&train.ys, idx);
            let mut caches = Vec::new();
            let feats = net.encoder.forward_cached(&x, &mut caches)?;
            let logits = net.probe.forward(&feats);
            let (loss, glogits) =
                focal_loss_grad(&logits, &yb, &ce).map_err(abort_on_non_finite(epoch))?;
            let mut grads = GradStore::new();
            let gfeat = net.probe.backward(&feats, &glogits, "probe", &mut grads);
            net.encoder
                .net
                .backward(gfeat.into_dyn(), &mut caches, "backbone/", &mut grads);
            if grads.any_non_finite() {
                return Err(Error::TrainingAbort {
                    epoch,
                    term: "gradient".into(),
                });
            }
            opt.step(&mut net, &grads);
            loss_sum += loss * idx.len() as f64;
            hit_sum += accuracy(&logits, &yb) * idx.len() as f64;
        }
        let n = train.xs.len() as f64;

        let (mut vloss, mut vhits) = (0.0, 0.0);
        for idx in chunks(val.xs.len(), s1.batch_size) {
            let x = stack(&val.xs, &idx);
            let yb = gather(&val.ys, &idx);
            let logits = net.probe.forward(&net.encoder.forward(&x)?);
            let loss = focal_loss(&logits, &yb, &ce).map_err(abort_on_non_finite(epoch))?;
            vloss += loss * idx.len() as f64;
            vhits += accuracy(&logits, &yb) * idx.len() as f64;
        }
        let vn = val.xs.len() as f64;

        let mut row = EpochRow::new(
            &cfg.run_id,
            epoch,
            (loss_sum / n, vloss / vn),
            (hit_sum / n, vhits / vn),
        );
        row.config_hash = Some(config_hash.clone());
        log.push(row)?;
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("external.jsonl");
    log.write_jsonl(&log_path)?;
    log.write_csv(&out_dir.join("external.csv"))?;

    let manifest = CheckpointManifest {
        kind: CheckpointKind::Encoder,
        family: spec.family,
        stage_widths: spec.stage_widths.clone(),
        feature_dim: spec.feature_dim,
        resolution,
        init: InitKind::ExternalPretrained,
        epoch: s1.epochs - 1,
        seed: s1.seed,
        config_hash,
        param_checksum: checksum_params(&net.encoder, ""),
        latent_dim: None,
        optimizer: Some(OptimizerNote {
            name: "adam".into(),
            learning_rate: s1.learning_rate,
            schedule: "none".into(),
            interpolation: None,
        }),
        head: None,
        focal: None,
    };
    let checkpoint_dir = save_checkpoint(&out_dir.join("checkpoint"), &manifest, &net.encoder)?;

    let final_val_acc = log.rows.last().unwrap().val_acc;
    Ok(ExternalPretrainOutcome {
        log,
        log_path,
        checkpoint_dir,
        final_val_acc,
    })
}

// ---------------------------------------------------------------------------
// Stage 2: frozen-backbone classification with the epoch-30 partial unfreeze

/// Per-epoch integrity checksums over the backbone, recorded after each
/// epoch's updates: the whole backbone, the final stage, and everything
/// before it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FreezeAudit {
    pub epoch: usize,
    pub full: String,
    pub final_stage: String,
    pub earlier: String,
}

#[derive(Debug)]
pub struct ClassifierOutcome {
    pub log: EpochLog,
    pub log_path: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub audits: Vec<FreezeAudit>,
    pub head_param_count: usize,
    pub focal: FocalParams,
    pub final_val_acc: f64,
}

/// Loads the stage-2 backbone encoder according to the [source] section,
/// checking the checkpoint against the configured architecture.
fn load_source_encoder(cfg: &ExperimentConfig) -> Result<crate::vae::Encoder> {
    let source = cfg
        .source
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("classification requires a [source] section".into()))?;
    let spec = cfg.backbone.resolve()?;
    let (encoder, manifest) = match source.kind {
        SourceKind::VaeCheckpoint => {
            let (vae, man) = load_vae(&source.path)?;
            (vae.encoder, man)
        }
        SourceKind::ExternalPretrained => {
            let (enc, man) = load_encoder(&source.path)?;
            if man.init != InitKind::ExternalPretrained {
                return Err(Error::CheckpointMismatch(format!(
                    "{}: external arm requires an external_pretrained checkpoint",
                    source.path.display()
                )));
            }
            (enc, man)
        }
    };
    if manifest.family != spec.family || manifest.stage_widths != spec.stage_widths {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint architecture {:?}/{:?} does not match configured {:?}/{:?}",
            manifest.family, manifest.stage_widths, spec.family, spec.stage_widths
        )));
    }
    if manifest.resolution != cfg.data.resolution {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint resolution {} does not match data resolution {}",
            manifest.resolution, cfg.data.resolution
        )));
    }
    Ok(encoder)
}

fn resolve_focal(cfg: &ExperimentConfig, train_ys: &[usize]) -> Result<FocalParams> {
    match &cfg.stage2.focal.alpha {
        Some(alpha) => FocalParams::new(cfg.stage2.focal.gamma, alpha.clone()),
        None => {
            let mut counts = [0usize; 3];
            for &y in train_ys {
                counts[y] += 1;
            }
            FocalParams::inverse_frequency(cfg.stage2.focal.gamma, &counts)
        }
    }
}

/// Features for one split in whichever phase the run is in: pooled
/// features while fully frozen, activations after the frozen prefix once
/// the final stage is trainable.
struct PhaseData {
    feats: Array2<f64>,
    mid: Option<ArrayD<f64>>,
}

fn extract_all(backbone: &Backbone, xs: &[Array3<f64>], batch: usize) -> Result<Array2<f64>> {
    let f = backbone.encoder.spec.feature_dim;
    let mut out = Array2::zeros((xs.len(), f));
    for idx in chunks(xs.len(), batch) {
        let feats = backbone.extract_features(&stack(xs, &idx))?;
        for (row, &i) in idx.iter().enumerate() {
            out.row_mut(i).assign(&feats.row(row));
        }
    }
    Ok(out)
}

fn prefix_all(
    backbone: &Backbone,
    xs: &[Array3<f64>],
    boundary: usize,
    batch: usize,
) -> Result<ArrayD<f64>> {
    let mut parts = Vec::new();
    for idx in chunks(xs.len(), batch) {
        let x = stack(xs, &idx).into_dyn();
        parts.push(backbone.encoder.net.forward_prefix(boundary, x));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::ShapeMismatch {
        context: "prefix activations".into(),
        expected: "uniform chunk shapes".into(),
        actual: e.to_string(),
    })
}

/// Eval-mode logits for the rows `idx` of a split.
fn eval_logits(
    clf: &Classifier,
    data: &PhaseData,
    boundary: usize,
    idx: &[usize],
) -> Result<Array2<f64>> {
    let feats = match &data.mid {
        None => data.feats.select(Axis(0), idx),
        Some(mid) => {
            let x = mid.select(Axis(0), idx);
            let y = clf.backbone.encoder.net.forward_from(
                boundary,
                x,
                RunMode::Eval,
                None,
                &mut Vec::new(),
            );
            y.into_dimensionality::<Ix2>().unwrap()
        }
    };
    clf.head.classify(&feats, RunMode::Eval, None)
}

/// Full-split loss and accuracy under the current (evaluation) weights.
fn eval_metrics(
    clf: &Classifier,
    data: &PhaseData,
    ys: &[usize],
    focal: &FocalParams,
    boundary: usize,
    batch: usize,
) -> Result<(f64, f64)> {
    let n = ys.len();
    let (mut loss_sum, mut hit_sum) = (0.0, 0.0);
    for idx in chunks(n, batch) {
        let logits = eval_logits(clf, data, boundary, &idx)?;
        let yb = gather(ys, &idx);
        loss_sum += focal_loss(&logits, &yb, focal)? * idx.len() as f64;
        hit_sum += accuracy(&logits, &yb) * idx.len() as f64;
    }
    Ok((loss_sum / n as f64, hit_sum / n as f64))
}

/// Trains the classification stage: head only while the backbone is
/// frozen, then head plus final stage from `epochs_frozen` on. Evaluation
/// always uses the optimizer's averaged iterate.
pub fn train_classifier(
    cfg: &ExperimentConfig,
    data: &SplitData,
    out_dir: &Path,
) -> Result<ClassifierOutcome> {
    cfg.validate()?;
    let s2 = &cfg.stage2;
    let resolution = cfg.data.resolution;
    let config_hash = cfg.config_hash();

    let encoder = load_source_encoder(cfg)?;
    let final_sections = encoder.final_stage_sections();
    let boundary = encoder
        .net
        .section_index(&final_sections[0])
        .expect("final stage section exists");

    let mut rng = ChaCha8Rng::seed_from_u64(s2.seed);
    let mut backbone = Backbone::new(encoder);
    backbone.freeze();
    let head_spec = HeadSpec {
        in_dim: backbone.encoder.spec.feature_dim,
        hidden_dim: cfg.head.hidden_dim,
        out_dim: 3,
        dropout_rate: cfg.head.dropout_rate,
    };
    let head = Head::new(head_spec.clone(), &mut rng)?;
    let head_param_count = head.param_count();
    let mut clf = Classifier::new(backbone, head);

    let train = load_tensors(&data.train, resolution)?;
    let val = load_tensors(&data.val, resolution)?;
    let focal = resolve_focal(cfg, &train.ys)?;

    let mut train_data = PhaseData {
        feats: extract_all(&clf.backbone, &train.xs, s2.batch_size)?,
        mid: None,
    };
    let mut val_data = PhaseData {
        feats: extract_all(&clf.backbone, &val.xs, s2.batch_size)?,
        mid: None,
    };

    let final_prefixes: Vec<String> = final_sections
        .iter()
        .map(|s| format!("backbone/{s}/"))
        .collect();
    let is_final = move |p: &str| final_prefixes.iter().any(|pre| p.starts_with(pre.as_str()));

    let mut opt = ScheduleFreeAdamW::new(s2.learning_rate);
    let mut log = EpochLog::new();
    let mut audits = Vec::with_capacity(s2.epochs_total);

    for epoch in 0..s2.epochs_total {
        if epoch == s2.epochs_frozen {
            clf.backbone.unfreeze_final_stage()?;
            // the prefix stays frozen for the rest of the run, so its
            // activations can be cached once
            train_data.mid = Some(prefix_all(
                &clf.backbone,
                &train.xs,
                boundary,
                s2.batch_size,
            )?);
            val_data.mid = Some(prefix_all(&clf.backbone, &val.xs, boundary, s2.batch_size)?);
        }

        let mut order: Vec<usize> = (0..train.xs.len()).collect();
        order.shuffle(&mut rng);
        for idx in order.chunks(s2.batch_size) {
            let yb = gather(&train.ys, idx);
            let mut grads = GradStore::new();
            let loss = match &train_data.mid {
                None => {
                    let feats = train_data.feats.select(Axis(0), idx);
                    let mut caches = Vec::new();
                    let logits = clf.head.forward_cached(&feats, &mut rng, &mut caches)?;
                    let (loss, glogits) = focal_loss_grad(&logits, &yb, &focal)
                        .map_err(abort_on_non_finite(epoch))?;
                    clf.head.block.backward_cached(
                        glogits.into_dyn(),
                        &mut caches,
                        "head",
                        &mut grads,
                    );
                    loss
                }
                Some(mid) => {
                    let x = mid.select(Axis(0), idx);
                    let mut enc_caches = Vec::new();
                    let feats = clf
                        .backbone
                        .encoder
                        .net
                        .forward_from(boundary, x, RunMode::Train, None, &mut enc_caches)
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let mut head_caches = Vec::new();
                    let logits = clf
                        .head
                        .forward_cached(&feats, &mut rng, &mut head_caches)?;
                    let (loss, glogits) = focal_loss_grad(&logits, &yb, &focal)
                        .map_err(abort_on_non_finite(epoch))?;
                    let gfeat = clf.head.block.backward_cached(
                        glogits.into_dyn(),
                        &mut head_caches,
                        "head",
                        &mut grads,
                    );
                    clf.backbone.encoder.net.backward_from(
                        boundary,
                        gfeat,
                        &mut enc_caches,
                        "backbone/",
                        &mut grads,
                    );
                    loss
                }
            };
            if !loss.is_finite() {
                return Err(Error::TrainingAbort {
                    epoch,
                    term: "focal".into(),
                });
            }
            if grads.any_non_finite() {
                return Err(Error::TrainingAbort {
                    epoch,
                    term: "gradient".into(),
                });
            }
            clf.retain_trainable(&mut grads);
            opt.step(&mut clf, &grads);
        }

        opt.swap_to_eval(&mut clf);
        let (train_loss, train_acc) = eval_metrics(
            &clf,
            &train_data,
            &train.ys,
            &focal,
            boundary,
            s2.batch_size,
        )
        .map_err(abort_on_non_finite(epoch))?;
        let (val_loss, val_acc) =
            eval_metrics(&clf, &val_data, &val.ys, &focal, boundary, s2.batch_size)
                .map_err(abort_on_non_finite(epoch))?;
        opt.swap_to_train(&mut clf);

        audits.push(FreezeAudit {
            epoch,
            full: checksum_params_where(&clf, |p| p.starts_with("backbone/")),
            final_stage: checksum_params_where(&clf, &is_final),
            earlier: checksum_params_where(&clf, |p| p.starts_with("backbone/") && !is_final(p)),
        });

        let mut row = EpochRow::new(
            &cfg.run_id,
            epoch,
            (train_loss, val_loss),
            (train_acc, val_acc),
        );
        row.config_hash = Some(config_hash.clone());
        log.push(row)?;
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("classifier.jsonl");
    log.write_jsonl(&log_path)?;
    log.write_csv(&out_dir.join("classifier.csv"))?;
    write_json(&out_dir.join("freeze_audit.json"), &audits)?;

    let spec = &clf.backbone.encoder.spec;
    let manifest = CheckpointManifest {
        kind: CheckpointKind::Classifier,
        family: spec.family,
        stage_widths: spec.stage_widths.clone(),
        feature_dim: spec.feature_dim,
        resolution,
        init: spec.init,
        epoch: s2.epochs_total - 1,
        seed: s2.seed,
        config_hash,
        param_checksum: checksum_params(&clf, ""),
        latent_dim: None,
        optimizer: Some(OptimizerNote {
            name: "schedule_free_adamw".into(),
            learning_rate: s2.learning_rate,
            schedule: "none".into(),
            interpolation: Some(opt.interpolation),
        }),
        head: Some(head_spec),
        focal: Some(focal.clone()),
    };
    let checkpoint_dir = save_checkpoint(&out_dir.join("checkpoint"), &manifest, &clf)?;

    let final_val_acc = log.rows.last().unwrap().val_acc;
    Ok(ClassifierOutcome {
        log,
        log_path,
        checkpoint_dir,
        audits,
        head_param_count,
        focal,
        final_val_acc,
    })
}

// ---------------------------------------------------------------------------
// Two-arm comparison

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParityReport {
    pub head_params_a: usize,
    pub head_params_b: usize,
    pub stage2_hash_a: String,
    pub stage2_hash_b: String,
}

#[derive(Debug)]
pub struct CompareOutcome {
    pub arm_a: ClassifierOutcome,
    pub arm_b: ClassifierOutcome,
    pub parity: ParityReport,
}

/// Runs both classification arms on identical data under the parity gate:
/// stage-2 hyperparameters must hash identically before anything trains,
/// and the two heads must come out the same size.
pub fn compare(
    cfg_a: &ExperimentConfig,
    cfg_b: &ExperimentConfig,
    out_dir: &Path,
) -> Result<CompareOutcome> {
    cfg_a.validate()?;
    cfg_b.validate()?;
    match (&cfg_a.source, &cfg_b.source) {
        (Some(a), Some(b))
            if a.kind == SourceKind::VaeCheckpoint && b.kind == SourceKind::ExternalPretrained => {}
        _ => {
            return Err(Error::InvalidConfig(
                "compare expects arm A sourced from a vae_checkpoint and arm B from external_pretrained".into(),
            ))
        }
    }
    let hash_a = cfg_a.stage2_parity_hash()?;
    let hash_b = cfg_b.stage2_parity_hash()?;
    if hash_a != hash_b {
        return Err(Error::Parity(format!(
            "stage-2 config hashes differ: {hash_a} vs {hash_b}"
        )));
    }

    let data = load_split(cfg_a)?;
    let arm_a = train_classifier(cfg_a, &data, &out_dir.join("arm_a"))?;
    let arm_b = train_classifier(cfg_b, &data, &out_dir.join("arm_b"))?;

    if arm_a.head_param_count != arm_b.head_param_count {
        return Err(Error::Parity(format!(
            "head parameter counts differ: {} vs {}",
            arm_a.head_param_count, arm_b.head_param_count
        )));
    }
    let parity = ParityReport {
        head_params_a: arm_a.head_param_count,
        head_params_b: arm_b.head_param_count,
        stage2_hash_a: hash_a,
        stage2_hash_b: hash_b,
    };
    write_json(&out_dir.join("parity.json"), &parity)?;
    Ok(CompareOutcome {
        arm_a,
        arm_b,
        parity,
    })
}
