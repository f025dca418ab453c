//! Adam training loop: sample -> augment -> forward -> loss -> backward ->
//! update, with periodic held-out metrics and bit-exact checkpoints.
//!
//! All randomness comes from named substreams of the config seed
//! (`init`, `augment`, `crop`), so a run is fully reproducible.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::augment::{apply_geometric, sample_augmentation};
use crate::checkpoint::{save_checkpoint, spec_to_config, Checkpoint};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image_io::read_image;
use crate::manifest::{load_manifest, DatasetManifest};
use crate::metrics::{psnr, ssim};
use crate::models::{build_network, preset, NetworkSpec};
use crate::ops::{crop, LossMode};
use crate::optim::{adam_step, lr_at, AdamState, LrSchedule};
use crate::rng::SeededRng;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Preset name; ignored when `override_spec` is set.
    pub model: String,
    pub override_spec: Option<NetworkSpec>,
    pub loss: LossMode,
    pub patch_size: usize,
    pub batch_size: usize,
    pub updates: u64,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub data_manifest: PathBuf,
    pub ckpt_dir: PathBuf,
    pub eval_interval: u64,
}

impl TrainConfig {
    /// Defaults mirror the reference protocol: L1 loss, 64x64 patches,
    /// batches of 16, Adam at 1e-4.
    pub fn new(data_manifest: impl Into<PathBuf>, ckpt_dir: impl Into<PathBuf>) -> Self {
        TrainConfig {
            model: "msrn".into(),
            override_spec: None,
            loss: LossMode::L1,
            patch_size: 64,
            batch_size: 16,
            updates: 10_000,
            schedule: LrSchedule::default(),
            seed: 0,
            data_manifest: data_manifest.into(),
            ckpt_dir: ckpt_dir.into(),
            eval_interval: 500,
        }
    }

    /// Parses the plain-text `key=value` config format.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut cfg = TrainConfig::new("", "");
        let mut saw_manifest = false;
        let mut saw_ckpt = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key=value",
                    path.display(),
                    lineno + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                Error::Config(format!(
                    "{}:{}: bad {what} '{value}'",
                    path.display(),
                    lineno + 1
                ))
            };
            match key {
                "model" => cfg.model = value.to_string(),
                "loss" => cfg.loss = LossMode::parse(value)?,
                "patch_size" => cfg.patch_size = value.parse().map_err(|_| bad("patch_size"))?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("batch_size"))?,
                "updates" => cfg.updates = value.parse().map_err(|_| bad("updates"))?,
                "lr_initial" => {
                    cfg.schedule.initial = value.parse().map_err(|_| bad("lr_initial"))?
                }
                "lr_decay_factor" => {
                    cfg.schedule.decay_factor = value.parse().map_err(|_| bad("lr_decay_factor"))?
                }
                "lr_decay_start" => {
                    cfg.schedule.decay_start = value.parse().map_err(|_| bad("lr_decay_start"))?
                }
                "lr_decay_interval" => {
                    cfg.schedule.decay_interval =
                        value.parse().map_err(|_| bad("lr_decay_interval"))?
                }
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "data_manifest" => {
                    cfg.data_manifest = base.join(value);
                    saw_manifest = true;
                }
                "ckpt_dir" => {
                    cfg.ckpt_dir = base.join(value);
                    saw_ckpt = true;
                }
                "eval_interval" => {
                    cfg.eval_interval = value.parse().map_err(|_| bad("eval_interval"))?
                }
                other => return Err(Error::Config(format!("unknown config key '{other}'"))),
            }
        }
        if !saw_manifest || !saw_ckpt {
            return Err(Error::Config(
                "config needs data_manifest and ckpt_dir".into(),
            ));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "patch_size {} must be a positive multiple of 4",
                self.patch_size
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn resolve_spec(&self) -> Result<NetworkSpec> {
        match &self.override_spec {
            Some(s) => Ok(s.clone()),
            None => preset(&self.model),
        }
    }

    fn echo(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.model,
            "loss": match self.loss { LossMode::L1 => "l1", LossMode::L2 => "l2" },
            "patch_size": self.patch_size,
            "batch_size": self.batch_size,
            "updates": self.updates,
            "lr_initial": self.schedule.initial,
            "lr_decay_factor": self.schedule.decay_factor,
            "lr_decay_start": self.schedule.decay_start,
            "lr_decay_interval": self.schedule.decay_interval,
            "seed": self.seed,
            "eval_interval": self.eval_interval,
        })
    }
}

/// Same random window from both members of a same-size pair.
pub fn crop_patch(
    lr: &Tensor<f32>,
    hr: &Tensor<f32>,
    size: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    lr.same_shape(hr)?;
    let (h, w) = (lr.shape.h, lr.shape.w);
    if h < size || w < size {
        return Err(Error::ImageTooSmall { h, w, min: size });
    }
    let y0 = rng.gen_range(0..=h - size);
    let x0 = rng.gen_range(0..=w - size);
    Ok((crop(lr, y0, x0, size, size), crop(hr, y0, x0, size, size)))
}

pub struct TrainOutcome {
    pub graph: Graph<f32>,
    pub final_loss: f64,
    /// Moving average of the last 100 update losses.
    pub windowed_loss: f64,
    pub metrics_path: PathBuf,
}

struct Pair {
    lr: Tensor<f32>,
    hr: Tensor<f32>,
}

fn load_pairs(manifest: &DatasetManifest, split: &str) -> Result<Vec<Pair>> {
    let mut pairs = Vec::new();
    for e in &manifest.entries {
        if e.split != split {
            continue;
        }
        let hr_path = match &e.hr_path {
            Some(p) => p,
            None => continue,
        };
        let lr = read_image(&e.lr_path)?;
        let hr = read_image(hr_path)?;
        if lr.width != hr.width || lr.height != hr.height {
            return Err(Error::PairSizeMismatch {
                id: e.id.clone(),
                lr_w: lr.width,
                lr_h: lr.height,
                hr_w: hr.width,
                hr_h: hr.height,
            });
        }
        pairs.push(Pair {
            lr: lr.to_tensor(),
            hr: hr.to_tensor(),
        });
    }
    Ok(pairs)
}

fn stack_batch(patches: &[(Tensor<f32>, Tensor<f32>)]) -> (Tensor<f32>, Tensor<f32>) {
    let s = patches[0].0.shape;
    let shape = Shape::new(patches.len(), s.c, s.h, s.w);
    let mut lr = Tensor::zeros(shape);
    let mut hr = Tensor::zeros(shape);
    let stride = s.len();
    for (i, (pl, ph)) in patches.iter().enumerate() {
        lr.data[i * stride..(i + 1) * stride].copy_from_slice(&pl.data);
        hr.data[i * stride..(i + 1) * stride].copy_from_slice(&ph.data);
    }
    (lr, hr)
}

pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let manifest = load_manifest(&config.data_manifest)?;
    let mut train_pairs = load_pairs(&manifest, "train")?;
    if train_pairs.is_empty() {
        // manifests without split tags train on everything with an HR side
        let all: Vec<&str> = manifest.entries.iter().map(|e| e.split.as_str()).collect();
        if !all.contains(&"train") {
            for split in ["", "all"] {
                train_pairs = load_pairs(&manifest, split)?;
                if !train_pairs.is_empty() {
                    break;
                }
            }
        }
    }
    if train_pairs.is_empty() {
        return Err(Error::Config("manifest has no training pairs".into()));
    }

    // held-out curve set: fixed 64x64 center crops of the validation pairs
    const CURVE_CROP: usize = 64;
    let val_pairs = load_pairs(&manifest, "val")?;
    let heldout: Vec<(Tensor<f32>, Tensor<f32>)> = val_pairs
        .iter()
        .filter(|p| p.lr.shape.h >= CURVE_CROP && p.lr.shape.w >= CURVE_CROP)
        .map(|p| {
            let y0 = (p.lr.shape.h - CURVE_CROP) / 2;
            let x0 = (p.lr.shape.w - CURVE_CROP) / 2;
            (
                crop(&p.lr, y0, x0, CURVE_CROP, CURVE_CROP),
                crop(&p.hr, y0, x0, CURVE_CROP, CURVE_CROP),
            )
        })
        .collect();

    let spec = config.resolve_spec()?;
    let rng = SeededRng::new(config.seed);
    let mut init_rng = rng.stream("init");
    let mut augment_rng = rng.stream("augment");
    let mut crop_rng = rng.stream("crop");

    let mut graph = build_network(&spec, &mut init_rng)?;
    let mut adam = AdamState::new(&graph);

    std::fs::create_dir_all(&config.ckpt_dir)?;
    let metrics_path = config.ckpt_dir.join("metrics.tsv");
    let mut metrics_log = String::from("# update\tloss\tlr\tpsnr\tssim\n");

    let mut config_echo = config.echo();
    config_echo["spec"] = spec_to_config(&spec);

    let mut recent: Vec<f64> = Vec::with_capacity(100);
    let mut final_loss = f64::NAN;

    for u in 0..config.updates {
        let lr_rate = lr_at(u, &config.schedule);
        let mut patches = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let pick = crop_rng.gen_range(0..train_pairs.len());
            let pair = &train_pairs[pick];
            let (pl, ph) = crop_patch(&pair.lr, &pair.hr, config.patch_size, &mut crop_rng)?;
            let t = sample_augmentation(&mut augment_rng);
            patches.push((apply_geometric(t, &pl), apply_geometric(t, &ph)));
        }
        let (batch_lr, batch_hr) = stack_batch(&patches);

        let (loss, grads) = graph.backward(&batch_lr, &batch_hr, config.loss)?;
        let loss = loss as f64;
        if !loss.is_finite() {
            // abort, preserving the last checkpoint already on disk
            return Err(Error::NonFinite(format!("training loss at update {u}")));
        }
        adam_step(&mut graph, &mut adam, &grads, lr_rate)?;

        final_loss = loss;
        if recent.len() == 100 {
            recent.remove(0);
        }
        recent.push(loss);

        let at_interval = config.eval_interval > 0 && (u + 1) % config.eval_interval == 0;
        let last = u + 1 == config.updates;
        if at_interval || last {
            let (mut p_sum, mut s_sum, mut n) = (0.0, 0.0, 0usize);
            for (vl, vh) in &heldout {
                let sr = graph.forward(vl)?;
                p_sum += psnr(&sr, vh)?;
                s_sum += ssim(&sr, vh)?;
                n += 1;
            }
            let (p, s) = if n > 0 {
                (p_sum / n as f64, s_sum / n as f64)
            } else {
                (f64::NAN, f64::NAN)
            };
            writeln!(
                metrics_log,
                "{}\t{loss:.6}\t{lr_rate:e}\t{p:.4}\t{s:.6}",
                u + 1
            )
            .expect("string write");
            std::fs::write(&metrics_path, &metrics_log)?;
            let ckpt = Checkpoint::from_model(&graph, &adam, u + 1, config_echo.clone());
            save_checkpoint(&ckpt, &config.ckpt_dir)?;
        }
    }

    if config.updates == 0 {
        let ckpt = Checkpoint::from_model(&graph, &adam, 0, config_echo.clone());
        save_checkpoint(&ckpt, &config.ckpt_dir)?;
        std::fs::write(&metrics_path, &metrics_log)?;
    }

    let windowed_loss = if recent.is_empty() {
        f64::NAN
    } else {
        recent.iter().sum::<f64>() / recent.len() as f64
    };
    Ok(TrainOutcome {
        graph,
        final_loss,
        windowed_loss,
        metrics_path,
    })
}
