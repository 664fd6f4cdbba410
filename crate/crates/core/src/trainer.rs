//! Minibatch AdamW training, top-1 evaluation and the modality ablation.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{gather_frames, sample_frames, AugmentFlags, AugmentPlan, Dataset, SampleMode, SamplerConfig, Split, VideoClip};
use crate::encoders::{read_json, write_json, BoundEncoders, ClassEmbed, EncoderConfig, Encoders};
use crate::error::{Error, Result};
use crate::fusion::{classify, classify_conditioned, fuse_clip, FusionConfig, ModalityMask};
use crate::heatmap::pose_images;
use crate::loss::loss_total_from_cosines;
use crate::numerics::{Graph, Tensor, Var};

pub const RUN_SCHEMA: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Weight initialization.
    pub init: u64,
    /// Shuffling, frame sampling and augmentation.
    pub data: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Dataset root; may also be given on the command line.
    pub dataset: Option<PathBuf>,
    pub frames_per_clip: usize,
    pub model: EncoderConfig,
    pub share_vision_weights: bool,
    pub class_embed: ClassEmbed,
    pub tau_saliency: f64,
    pub tau_loss: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub modalities: Vec<String>,
    pub seeds: Seeds,
    pub ungated_pooling: bool,
    pub constant_vector_value: f64,
    pub masked_video_value: f64,
    pub heatmap_sigma: f64,
    pub augment: AugmentFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: RUN_SCHEMA,
            dataset: None,
            frames_per_clip: 8,
            model: EncoderConfig::default(),
            share_vision_weights: false,
            class_embed: ClassEmbed::Mean,
            tau_saliency: 0.01,
            tau_loss: 0.01,
            learning_rate: 5e-5,
            weight_decay: 0.01,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            epochs: 30,
            batch_size: 16,
            modalities: vec!["video".into(), "pose".into(), "text".into()],
            seeds: Seeds::default(),
            ungated_pooling: false,
            constant_vector_value: 0.0,
            masked_video_value: 1.0,
            heatmap_sigma: 2.0,
            augment: AugmentFlags::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RUN_SCHEMA {
            return Err(Error::InvalidArgument(format!(
                "run config schema {} unsupported (expected {RUN_SCHEMA})",
                self.schema_version
            )));
        }
        self.mask()?;
        self.model.validate()?;
        let positive = [
            ("tau_saliency", self.tau_saliency),
            ("tau_loss", self.tau_loss),
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("heatmap_sigma", self.heatmap_sigma),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("weight_decay must be nonnegative".into()));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::InvalidArgument("betas must lie in [0, 1)".into()));
        }
        if self.frames_per_clip == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("frames_per_clip and batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn mask(&self) -> Result<ModalityMask> {
        ModalityMask::from_names(&self.modalities)
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            tau_saliency: self.tau_saliency,
            ungated_pooling: self.ungated_pooling,
            constant_vector_value: self.constant_vector_value,
            masked_video_value: self.masked_video_value,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Decoupled-weight-decay Adam over a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &[&mut Tensor], lr: f64, betas: [f64; 2], eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            betas,
            eps,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// One update. Parameters whose gradient is `None` are left untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::InvalidArgument("optimizer parameter list changed".into()));
        }
        self.step += 1;
        let [b1, b2] = self.betas;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                *w -= self.lr * self.weight_decay * *w;
                *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Model inputs for one clip: frames and pose images scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipInput {
    pub frames: Tensor,
    pub poses: Tensor,
    pub label: usize,
}

/// Samples `T` frames, optionally augments them, and renders pose images
/// from the (augmented) keypoints.
pub fn prepare_clip(
    clip: &VideoClip,
    cfg: &RunConfig,
    mode: SampleMode,
    augment: Option<&AugmentFlags>,
    rng: &mut ChaCha8Rng,
) -> Result<ClipInput> {
    let sampler = SamplerConfig {
        frames: cfg.frames_per_clip,
        mode,
    };
    let idx = sample_frames(clip.num_frames(), &sampler, rng)?;
    let frames = gather_frames(&clip.frames, &idx)?;
    let keypoints: Vec<_> = idx.iter().map(|&i| clip.keypoints[i].clone()).collect();
    let (h, w) = (clip.height(), clip.width());
    let (frames, keypoints) = match augment {
        Some(flags) => {
            let plan = AugmentPlan::draw(flags, h, w, rng)?;
            (plan.apply_images(&frames, true)?, plan.apply_keypoints(&keypoints, h, w))
        }
        None => (frames, keypoints),
    };
    let poses = pose_images(&keypoints, h, w, cfg.heatmap_sigma)?;
    Ok(ClipInput {
        frames: frames.map(|x| x / 255.0),
        poses: poses.map(|x| x / 255.0),
        label: clip.label,
    })
}

fn clip_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Encodes a batch of clips in one pass per branch and returns each clip's
/// `T x d` frame and pose embeddings (`None` for a disabled branch).
fn encode_clips(
    g: &mut Graph,
    enc: &Encoders,
    bound: &BoundEncoders,
    inputs: &[&ClipInput],
    mask: ModalityMask,
) -> Result<Vec<(Option<Var>, Option<Var>)>> {
    let t = inputs[0].frames.shape()[0];
    let stack = |f: fn(&ClipInput) -> &Tensor| -> Result<Tensor> {
        Tensor::stack_leading(&inputs.iter().map(|c| f(c).clone()).collect::<Vec<_>>())
    };
    let v = if mask.video {
        Some(enc.encode_frames(g, bound, &stack(|c| &c.frames)?)?)
    } else {
        None
    };
    let p = if mask.pose {
        Some(enc.encode_poses(g, bound, &stack(|c| &c.poses)?)?)
    } else {
        None
    };
    (0..inputs.len())
        .map(|i| {
            let vi = v.map(|v| g.slice_rows(v, i * t, (i + 1) * t)).transpose()?;
            let pi = p.map(|p| g.slice_rows(p, i * t, (i + 1) * t)).transpose()?;
            Ok((vi, pi))
        })
        .collect()
}

/// Loss of one minibatch, built on `g`.
///
/// With text enabled each clip is pooled once per distinct class in the
/// batch, so entry `(i, j)` of the cosine matrix compares clip `i` pooled
/// with the words of class `y_j` against the embedding of `y_j`. This is
/// the same score inference uses to rank candidate classes.
fn batch_loss(
    g: &mut Graph,
    enc: &Encoders,
    bound: &BoundEncoders,
    inputs: &[ClipInput],
    class_names: &[String],
    cfg: &RunConfig,
    mask: ModalityMask,
) -> Result<Var> {
    let mut distinct: Vec<usize> = inputs.iter().map(|c| c.label).collect();
    distinct.sort_unstable();
    distinct.dedup();
    let fusion = cfg.fusion();
    let (t, d) = (cfg.frames_per_clip, enc.embed_dim());
    let refs: Vec<&ClipInput> = inputs.iter().collect();
    let branches = encode_clips(g, enc, bound, &refs, mask)?;

    // Row u of `scores`: cosines of every clip (pooled for class u) with class u.
    let mut scores = HashMap::new();
    let mut shared: Option<Vec<Var>> = None;
    for &u in &distinct {
        let (words, emb) = enc.encode_words(g, bound, &class_names[u])?;
        let pooled = match (&shared, mask.text) {
            (Some(rows), false) => rows.clone(),
            _ => {
                let rows = branches
                    .iter()
                    .map(|&(v, p)| Ok(fuse_clip(g, v, p, mask.text.then_some(words), (t, d), &fusion)?.0))
                    .collect::<Result<Vec<_>>>()?;
                if !mask.text {
                    shared = Some(rows.clone());
                }
                rows
            }
        };
        let video = g.concat_rows(&pooled)?;
        let vn = g.l2_normalize_rows(video)?;
        let cn = g.l2_normalize_rows(emb)?;
        let ct = g.transpose(cn)?;
        let col = g.matmul(vn, ct)?;
        scores.insert(u, g.transpose(col)?);
    }
    let rows: Vec<Var> = inputs.iter().map(|c| scores[&c.label]).collect();
    let cos_t = g.concat_rows(&rows)?;
    let cos = g.transpose(cos_t)?;
    let labels: Vec<usize> = inputs.iter().map(|c| c.label).collect();
    loss_total_from_cosines(g, cos, &labels, cfg.tau_loss)
}

/// Predicted class of each prepared clip.
pub fn predict(
    enc: &Encoders,
    inputs: &[ClipInput],
    class_names: &[String],
    mask: ModalityMask,
    fusion: &FusionConfig,
) -> Result<Vec<usize>> {
    mask.validate()?;
    let mut preds = Vec::with_capacity(inputs.len());
    for c in inputs {
        let mut g = Graph::new();
        let bound = enc.bind(&mut g, false);
        let mut words = Vec::with_capacity(class_names.len());
        let mut embs = Vec::with_capacity(class_names.len());
        for name in class_names {
            let (w, e) = enc.encode_words(&mut g, &bound, name)?;
            words.push(mask.text.then_some(w));
            embs.push(g.value(e).clone());
        }
        let (m, d) = (class_names.len(), enc.embed_dim());
        let t = c.frames.shape()[0];
        let categories = Tensor::stack_leading(&embs)?.reshape(&[m, d])?;
        let (v, p) = encode_clips(&mut g, enc, &bound, &[c], mask)?[0];
        let pred = if mask.text {
            let mut rows = Vec::with_capacity(m);
            for w in words {
                let e = fuse_clip(&mut g, v, p, w, (t, d), fusion)?.0;
                rows.push(g.value(e).clone());
            }
            classify_conditioned(&Tensor::stack_leading(&rows)?.reshape(&[m, d])?, &categories)?.0
        } else {
            let e = fuse_clip(&mut g, v, p, None, (t, d), fusion)?.0;
            classify(&g.value(e).reshape(&[d])?, &categories)?.0
        };
        preds.push(pred);
    }
    Ok(preds)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptySplit("no predictions to score".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument("predictions and labels differ in length".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Top-1 accuracy over clips with center sampling and no augmentation.
pub fn evaluate_clips(
    enc: &Encoders,
    clips: &[VideoClip],
    class_names: &[String],
    cfg: &RunConfig,
    mask: ModalityMask,
) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::EmptySplit("split has no clips".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let inputs = clips
        .iter()
        .map(|c| prepare_clip(c, cfg, SampleMode::EvalSegmentCenter, None, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let preds = predict(enc, &inputs, class_names, mask, &cfg.fusion())?;
    let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
    accuracy(&preds, &labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub schema_version: u32,
    pub modalities: String,
    pub initial_train_acc: f64,
    pub initial_test_acc: f64,
    pub epochs: Vec<EpochRecord>,
    pub early_stop: Option<String>,
    /// Relative to the run's output directory.
    pub checkpoint: Option<String>,
    pub config: RunConfig,
    /// Kept out of `report.json` so repeated runs produce identical files.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn final_test_acc(&self) -> f64 {
        self.epochs.last().map_or(self.initial_test_acc, |e| e.test_acc)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:>5}  {:>10}  {:>9}  {:>8}\n", "epoch", "loss", "train_acc", "test_acc");
        let _ = writeln!(s, "{:>5}  {:>10}  {:>9.4}  {:>8.4}", 0, "-", self.initial_train_acc, self.initial_test_acc);
        for e in &self.epochs {
            let _ = writeln!(s, "{:>5}  {:>10.6}  {:>9.4}  {:>8.4}", e.epoch, e.loss, e.train_acc, e.test_acc);
        }
        s
    }

    /// Writes `report.json`, `report.txt` and `timing.json` into `out`.
    pub fn write(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_json(&out.join("report.json"), self)?;
        let txt = out.join("report.txt");
        fs::write(&txt, self.to_table()).map_err(|e| Error::io(&txt, e))?;
        write_json(&out.join("timing.json"), &serde_json::json!({ "wall_time_secs": self.wall_time_secs }))
    }
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 3;

fn numerical_context(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}, batch {batch}: {msg}")),
        other => other,
    }
}

/// Trains a fresh model and, when `out` is given, saves the checkpoint
/// under `out/checkpoint`.
pub fn train(cfg: &RunConfig, data: &Dataset, out: Option<&Path>) -> Result<(TrainReport, Encoders)> {
    let start = Instant::now();
    cfg.validate()?;
    let mask = cfg.mask()?;
    if data.train.is_empty() {
        return Err(Error::EmptySplit("training split has no clips".into()));
    }
    let class_names = data.manifest.class_names();
    let (h, w) = (data.train[0].height(), data.train[0].width());
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seeds.init);
    let mut enc = Encoders::new(
        &cfg.model,
        h,
        w,
        &class_names,
        cfg.class_embed,
        cfg.share_vision_weights,
        &mut init_rng,
    )?;
    let mut opt = AdamW::new(&enc.params_mut(), cfg.learning_rate, cfg.betas, cfg.adam_eps, cfg.weight_decay);

    let eval = |enc: &Encoders, split: &[VideoClip]| -> Result<f64> {
        if split.is_empty() {
            Ok(f64::NAN)
        } else {
            evaluate_clips(enc, split, &class_names, cfg, mask)
        }
    };
    let initial_train_acc = eval(&enc, &data.train)?;
    let initial_test_acc = eval(&enc, &data.test)?;

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seeds.data);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut reference: Option<f64> = None;
    let mut over = 0usize;
    let mut early_stop = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let inputs = chunk
                .iter()
                .map(|&i| {
                    let mut rng = clip_rng(cfg.seeds.data, epoch, i);
                    prepare_clip(&data.train[i], cfg, SampleMode::TrainRandomInSegment, Some(&cfg.augment), &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new();
            let (loss, grads, vars) = {
                let bound = enc.bind(&mut g, true);
                let loss = batch_loss(&mut g, &enc, &bound, &inputs, &class_names, cfg, mask)
                    .map_err(|e| numerical_context(e, epoch, b))?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("epoch {epoch}, batch {b}: loss {value}")));
                }
                let grads = g.backward(loss).map_err(|e| numerical_context(e, epoch, b))?;
                (value, grads, bound.vars())
            };
            reference.get_or_insert(loss);
            let grad_refs: Vec<Option<&Tensor>> = vars.iter().map(|&v| grads.get(v)).collect();
            opt.step(&mut enc.params_mut(), &grad_refs)?;
            total += loss * chunk.len() as f64;
            count += chunk.len();
        }
        let loss = total / count as f64;
        records.push(EpochRecord {
            epoch,
            loss,
            train_acc: eval(&enc, &data.train)?,
            test_acc: eval(&enc, &data.test)?,
        });
        let limit = DIVERGENCE_FACTOR * reference.unwrap_or(f64::INFINITY);
        over = if loss > limit { over + 1 } else { 0 };
        if over >= DIVERGENCE_PATIENCE {
            early_stop = Some(format!(
                "loss above {DIVERGENCE_FACTOR}x the initial batch loss for {DIVERGENCE_PATIENCE} epochs"
            ));
            break;
        }
    }

    let checkpoint = match out {
        Some(dir) => {
            save_checkpoint(&dir.join("checkpoint"), &enc, cfg)?;
            Some("checkpoint".to_string())
        }
        None => None,
    };
    let report = TrainReport {
        schema_version: RUN_SCHEMA,
        modalities: mask.label(),
        initial_train_acc,
        initial_test_acc,
        epochs: records,
        early_stop,
        checkpoint,
        config: cfg.clone(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out {
        report.write(dir)?;
    }
    Ok((report, enc))
}

pub fn save_checkpoint(dir: &Path, enc: &Encoders, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    enc.save(dir)?;
    write_json(&dir.join("run.json"), cfg)
}

pub fn load_checkpoint(dir: &Path) -> Result<(Encoders, RunConfig)> {
    let cfg = RunConfig::load(&dir.join("run.json"))?;
    let enc = Encoders::load(dir)?;
    if enc.frame.config != cfg.model {
        return Err(Error::Checkpoint("encoder architecture disagrees with run.json".into()));
    }
    Ok((enc, cfg))
}

/// Top-1 accuracy of a saved checkpoint on one split. `mask` defaults to
/// the modalities the checkpoint was trained with.
pub fn evaluate(checkpoint: &Path, data: &Dataset, split: Split, mask: Option<ModalityMask>) -> Result<f64> {
    let (enc, cfg) = load_checkpoint(checkpoint)?;
    let class_names = data.manifest.class_names();
    if enc.text.vocabulary.is_empty() {
        return Err(Error::Checkpoint("text encoder has no vocabulary".into()));
    }
    for name in &class_names {
        enc.text.token_ids(name)?;
    }
    let mask = match mask {
        Some(m) => m,
        None => cfg.mask()?,
    };
    evaluate_clips(&enc, data.split(split), &class_names, &cfg, mask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub modalities: String,
    pub test_acc: f64,
    pub train_acc: f64,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.modalities.len()).max().unwrap_or(0).max(10);
        let mut s = format!("{:<width$}  {:>8}  {:>9}\n", "modalities", "test_acc", "train_acc");
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$}  {:>8.2}  {:>9.2}", r.modalities, 100.0 * r.test_acc, 100.0 * r.train_acc);
        }
        s
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_json(&out.join("ablation.json"), self)?;
        let txt = out.join("ablation.txt");
        fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))
    }
}

/// Retrains and evaluates once per ablation mode with identical seeds.
/// Each run lands in `out/<mode>` when `out` is given.
pub fn ablate(cfg: &RunConfig, data: &Dataset, out: Option<&Path>) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(4);
    for mode in ModalityMask::ABLATION_MODES {
        let run = RunConfig {
            modalities: mode.names(),
            ..cfg.clone()
        };
        let dir = out.map(|o| o.join(mode.names().join("_")));
        let (report, _) = train(&run, data, dir.as_deref())?;
        rows.push(AblationRow {
            modalities: mode.label(),
            test_acc: report.final_test_acc(),
            train_acc: report.epochs.last().map_or(report.initial_train_acc, |e| e.train_acc),
            final_loss: report.epochs.last().map(|e| e.loss),
        });
    }
    let table = AblationTable { rows };
    if let Some(o) = out {
        table.write(o)?;
    }
    Ok(table)
}
