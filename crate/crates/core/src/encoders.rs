//! Small transformer encoders for frames, pose images and class-name words.
//!
//! The vision encoder cuts each image into non-overlapping patches, runs a
//! stack of pre-norm transformer blocks over the patches of that image only,
//! mean-pools the patch tokens and projects to the embedding width. Frames
//! never attend to each other, so each output row depends on one input image.
//! The text encoder runs the same blocks over the word tokens of a class
//! name. It has no positional table, so repeated words produce identical rows.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{load_tensor, save_tensor, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassEmbed {
    Mean,
    LastWord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub embed_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            layers: 2,
            heads: 2,
            width: 64,
            embed_dim: 64,
            mlp_ratio: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.patch_size == 0 || self.width == 0 || self.embed_dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("encoder extents must be positive".into());
        }
        if self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    fn insert(&mut self, name: String, t: Tensor) {
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every tensor on the graph as a leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { set: self, vars }
    }

    /// Uses existing graph variables as this set's parameters, in set order.
    pub fn bind_vars(&self, g: &Graph, vars: &[Var]) -> Result<Bound<'_>> {
        if vars.len() != self.tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.tensors.len()
            )));
        }
        for ((n, t), &v) in self.names.iter().zip(&self.tensors).zip(vars) {
            if g.value(v).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{n}: variable shape {:?}, parameter shape {:?}",
                    g.value(v).shape(),
                    t.shape()
                )));
            }
        }
        Ok(Bound {
            set: self,
            vars: vars.to_vec(),
        })
    }

    fn save(&self, dir: &Path) -> Result<()> {
        for (n, t) in self.names.iter().zip(&self.tensors) {
            save_tensor(dir.join(n), t)?;
        }
        Ok(())
    }

    /// Loads tensors named like `template`'s, checking every shape.
    fn load_like(template: &ParamSet, dir: &Path) -> Result<ParamSet> {
        let mut out = ParamSet::default();
        for (n, expected) in template.names.iter().zip(&template.tensors) {
            let t = load_tensor(dir.join(n))?;
            if t.shape() != expected.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {:?}, architecture expects {:?}",
                    n,
                    t.shape(),
                    expected.shape()
                )));
            }
            out.insert(n.clone(), t);
        }
        Ok(out)
    }
}

/// A [`ParamSet`] placed on a graph.
pub struct Bound<'a> {
    set: &'a ParamSet,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn get(&self, name: &str) -> Var {
        self.vars[*self
            .set
            .index
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))]
    }

    /// Variables in parameter-set order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn weight<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], -bound, bound, rng)
}

fn add_blocks<R: Rng + ?Sized>(ps: &mut ParamSet, cfg: &EncoderConfig, rng: &mut R) {
    let w = cfg.width;
    let hidden = w * cfg.mlp_ratio;
    for l in 0..cfg.layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        ps.insert(p("ln1.g"), Tensor::ones(&[w]));
        ps.insert(p("ln1.b"), Tensor::zeros(&[w]));
        for proj in ["q", "k", "v", "o"] {
            ps.insert(p(&format!("attn.w{proj}")), weight(rng, w, w));
            ps.insert(p(&format!("attn.b{proj}")), Tensor::zeros(&[w]));
        }
        ps.insert(p("ln2.g"), Tensor::ones(&[w]));
        ps.insert(p("ln2.b"), Tensor::zeros(&[w]));
        ps.insert(p("mlp.w1"), weight(rng, w, hidden));
        ps.insert(p("mlp.b1"), Tensor::zeros(&[hidden]));
        ps.insert(p("mlp.w2"), weight(rng, hidden, w));
        ps.insert(p("mlp.b2"), Tensor::zeros(&[w]));
    }
    ps.insert("ln_f.g".into(), Tensor::ones(&[w]));
    ps.insert("ln_f.b".into(), Tensor::zeros(&[w]));
    ps.insert("head.w".into(), weight(rng, w, cfg.embed_dim));
    ps.insert("head.b".into(), Tensor::zeros(&[cfg.embed_dim]));
}

/// Pre-norm transformer blocks over groups of `group` rows, then mean pool
/// (when `pool`) and project.
fn run_blocks(g: &mut Graph, b: &Bound, cfg: &EncoderConfig, mut x: Var, group: usize, pool: bool) -> Result<Var> {
    for l in 0..cfg.layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        let h = g.layer_norm(x, b.get(&p("ln1.g")), b.get(&p("ln1.b")))?;
        let q = g.linear(h, b.get(&p("attn.wq")), b.get(&p("attn.bq")))?;
        let k = g.linear(h, b.get(&p("attn.wk")), b.get(&p("attn.bk")))?;
        let v = g.linear(h, b.get(&p("attn.wv")), b.get(&p("attn.bv")))?;
        let a = g.attention(q, k, v, group, cfg.heads)?;
        let o = g.linear(a, b.get(&p("attn.wo")), b.get(&p("attn.bo")))?;
        x = g.add(x, o)?;
        let h = g.layer_norm(x, b.get(&p("ln2.g")), b.get(&p("ln2.b")))?;
        let m = g.linear(h, b.get(&p("mlp.w1")), b.get(&p("mlp.b1")))?;
        let m = g.gelu(m)?;
        let m = g.linear(m, b.get(&p("mlp.w2")), b.get(&p("mlp.b2")))?;
        x = g.add(x, m)?;
    }
    if pool {
        x = g.group_mean(x, group)?;
    }
    let x = g.layer_norm(x, b.get("ln_f.g"), b.get("ln_f.b"))?;
    g.linear(x, b.get("head.w"), b.get("head.b"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct VisionDescriptor {
    kind: String,
    height: usize,
    width: usize,
    config: EncoderConfig,
}

/// Patch-based vision encoder, used for RGB frames and for pose images.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionEncoder {
    pub config: EncoderConfig,
    pub height: usize,
    pub width: usize,
    pub params: ParamSet,
}

const PATCH_CHANNELS: usize = 3;

impl VisionEncoder {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, height: usize, width: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let p = config.patch_size;
        if height % p != 0 || width % p != 0 {
            return Err(Error::InvalidArgument(format!(
                "{height}x{width} image does not divide into {p}x{p} patches"
            )));
        }
        let mut params = ParamSet::default();
        let patch_dim = p * p * PATCH_CHANNELS;
        params.insert("patch.w".into(), weight(rng, patch_dim, config.width));
        params.insert("patch.b".into(), Tensor::zeros(&[config.width]));
        let n = (height / p) * (width / p);
        let bound = 1.0 / (config.width as f64).sqrt();
        params.insert("pos".into(), Tensor::uniform(&[n, config.width], -bound, bound, rng));
        add_blocks(&mut params, &config, rng);
        Ok(Self {
            config,
            height,
            width,
            params,
        })
    }

    pub fn patches_per_image(&self) -> usize {
        (self.height / self.config.patch_size) * (self.width / self.config.patch_size)
    }

    /// `T x H x W x C` (C = 1 or 3) to `(T*P) x (p*p*3)`. Single-channel
    /// input is replicated across the three patch channels.
    pub fn patchify(&self, images: &Tensor) -> Result<Tensor> {
        let (t, h, w, c) = match images.shape() {
            &[t, h, w, c] if c == 1 || c == PATCH_CHANNELS => (t, h, w, c),
            s => {
                return Err(Error::InvalidShape {
                    shape: s.to_vec(),
                    reason: "expected T x H x W x {1,3} images".into(),
                })
            }
        };
        if h != self.height || w != self.width {
            return Err(Error::InvalidShape {
                shape: images.shape().to_vec(),
                reason: format!("encoder built for {}x{} images", self.height, self.width),
            });
        }
        let p = self.config.patch_size;
        let (ph, pw) = (h / p, w / p);
        let dim = p * p * PATCH_CHANNELS;
        let src = images.data();
        let mut out = Vec::with_capacity(t * ph * pw * dim);
        for f in 0..t {
            for py in 0..ph {
                for px in 0..pw {
                    for dy in 0..p {
                        for dx in 0..p {
                            let base = ((f * h + py * p + dy) * w + px * p + dx) * c;
                            for ch in 0..PATCH_CHANNELS {
                                out.push(src[base + if c == 1 { 0 } else { ch }]);
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![t * ph * pw, dim], out))
    }

    /// One embedding row per image: `T x H x W x C` to `T x d`.
    pub fn forward(&self, g: &mut Graph, b: &Bound, images: &Tensor) -> Result<Var> {
        let t = images.shape()[0];
        let patches = self.patchify(images)?;
        let n = self.patches_per_image();
        let x = g.constant(patches);
        let x = g.linear(x, b.get("patch.w"), b.get("patch.b"))?;
        let idx: Vec<usize> = (0..t).flat_map(|_| 0..n).collect();
        let pos = g.select_rows(b.get("pos"), &idx)?;
        let x = g.add(x, pos)?;
        run_blocks(g, b, &self.config, x, n, true)
    }

    fn descriptor(&self, kind: &str) -> VisionDescriptor {
        VisionDescriptor {
            kind: kind.into(),
            height: self.height,
            width: self.width,
            config: self.config.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("architecture.json"), &self.descriptor("vision"))?;
        self.params.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let d: VisionDescriptor = read_json(&dir.join("architecture.json"))?;
        if d.kind != "vision" {
            return Err(Error::Checkpoint(format!("{}: not a vision encoder", dir.display())));
        }
        // Shapes come from a throwaway initialization of the same architecture.
        let template = Self::new(d.config, d.height, d.width, &mut rand::rngs::mock::StepRng::new(0, 1))?;
        let params = ParamSet::load_like(&template.params, dir)?;
        Ok(Self { params, ..template })
    }
}

/// Lower-cased whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TextDescriptor {
    kind: String,
    vocabulary: Vec<String>,
    class_embed: ClassEmbed,
    config: EncoderConfig,
}

/// Word-level text encoder over a closed vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub config: EncoderConfig,
    pub vocabulary: Vec<String>,
    pub class_embed: ClassEmbed,
    pub params: ParamSet,
    lookup: HashMap<String, usize>,
}

impl TextEncoder {
    /// Builds the vocabulary from every word of `class_names`.
    pub fn new<R: Rng + ?Sized>(
        config: EncoderConfig,
        class_names: &[String],
        class_embed: ClassEmbed,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let vocab: BTreeSet<String> = class_names.iter().flat_map(|n| tokenize(n)).collect();
        if vocab.is_empty() {
            return Err(Error::InvalidArgument("no words in class names".into()));
        }
        Self::with_vocabulary(config, vocab.into_iter().collect(), class_embed, rng)
    }

    fn with_vocabulary<R: Rng + ?Sized>(
        config: EncoderConfig,
        vocabulary: Vec<String>,
        class_embed: ClassEmbed,
        rng: &mut R,
    ) -> Result<Self> {
        let mut params = ParamSet::default();
        let bound = 1.0 / (config.width as f64).sqrt();
        params.insert(
            "embed".into(),
            Tensor::uniform(&[vocabulary.len(), config.width], -bound, bound, rng),
        );
        add_blocks(&mut params, &config, rng);
        let lookup = vocabulary.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(Self {
            config,
            vocabulary,
            class_embed,
            params,
            lookup,
        })
    }

    pub fn token_ids(&self, class_name: &str) -> Result<Vec<usize>> {
        let words = tokenize(class_name);
        if words.is_empty() {
            return Err(Error::InvalidArgument("empty class name".into()));
        }
        words
            .into_iter()
            .map(|w| self.lookup.get(&w).copied().ok_or(Error::UnknownWord(w)))
            .collect()
    }

    /// Word embeddings `N x d` and the class embedding `1 x d`.
    pub fn forward(&self, g: &mut Graph, b: &Bound, class_name: &str) -> Result<(Var, Var)> {
        let ids = self.token_ids(class_name)?;
        let n = ids.len();
        let x = g.select_rows(b.get("embed"), &ids)?;
        let words = run_blocks(g, b, &self.config, x, n, false)?;
        let class_emb = match self.class_embed {
            ClassEmbed::Mean => g.group_mean(words, n)?,
            ClassEmbed::LastWord => g.select_rows(words, &[n - 1])?,
        };
        Ok((words, class_emb))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let d = TextDescriptor {
            kind: "text".into(),
            vocabulary: self.vocabulary.clone(),
            class_embed: self.class_embed,
            config: self.config.clone(),
        };
        write_json(&dir.join("architecture.json"), &d)?;
        self.params.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let d: TextDescriptor = read_json(&dir.join("architecture.json"))?;
        if d.kind != "text" {
            return Err(Error::Checkpoint(format!("{}: not a text encoder", dir.display())));
        }
        let template = Self::with_vocabulary(
            d.config,
            d.vocabulary,
            d.class_embed,
            &mut rand::rngs::mock::StepRng::new(0, 1),
        )?;
        let params = ParamSet::load_like(&template.params, dir)?;
        Ok(Self { params, ..template })
    }
}

/// The three encoders of the model. With shared vision weights the pose
/// branch reuses the frame encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoders {
    pub frame: VisionEncoder,
    pub pose: Option<VisionEncoder>,
    pub text: TextEncoder,
}

pub struct BoundEncoders<'a> {
    pub frame: Bound<'a>,
    pub pose: Option<Bound<'a>>,
    pub text: Bound<'a>,
}

impl Encoders {
    pub fn new<R: Rng + ?Sized>(
        config: &EncoderConfig,
        height: usize,
        width: usize,
        class_names: &[String],
        class_embed: ClassEmbed,
        share_vision_weights: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let frame = VisionEncoder::new(config.clone(), height, width, rng)?;
        let pose = if share_vision_weights {
            None
        } else {
            Some(VisionEncoder::new(config.clone(), height, width, rng)?)
        };
        let text = TextEncoder::new(config.clone(), class_names, class_embed, rng)?;
        Ok(Self { frame, pose, text })
    }

    pub fn embed_dim(&self) -> usize {
        self.frame.config.embed_dim
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundEncoders<'_> {
        BoundEncoders {
            frame: self.frame.params.bind(g, trainable),
            pose: self.pose.as_ref().map(|p| p.params.bind(g, trainable)),
            text: self.text.params.bind(g, trainable),
        }
    }

    /// Frames with pixel values in `[0, 1]`, `T x H x W x 3`, to `T x d`.
    pub fn encode_frames(&self, g: &mut Graph, b: &BoundEncoders, frames: &Tensor) -> Result<Var> {
        self.frame.forward(g, &b.frame, frames)
    }

    /// Pose images scaled to `[0, 1]`, `T x H x W x 1`, to `T x d`.
    pub fn encode_poses(&self, g: &mut Graph, b: &BoundEncoders, heatmaps: &Tensor) -> Result<Var> {
        match (&self.pose, &b.pose) {
            (Some(enc), Some(bound)) => enc.forward(g, bound, heatmaps),
            _ => self.frame.forward(g, &b.frame, heatmaps),
        }
    }

    pub fn encode_words(&self, g: &mut Graph, b: &BoundEncoders, class_name: &str) -> Result<(Var, Var)> {
        self.text.forward(g, &b.text, class_name)
    }

    /// Parameter tensors in a stable order, paired with the bound variables.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.frame.params.tensors_mut().iter_mut().collect();
        if let Some(p) = &mut self.pose {
            out.extend(p.params.tensors_mut().iter_mut());
        }
        out.extend(self.text.params.tensors_mut().iter_mut());
        out
    }

    pub fn num_values(&self) -> usize {
        self.frame.params.num_values()
            + self.pose.as_ref().map_or(0, |p| p.params.num_values())
            + self.text.params.num_values()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.frame.save(&dir.join("frame_encoder"))?;
        if let Some(p) = &self.pose {
            p.save(&dir.join("pose_encoder"))?;
        }
        self.text.save(&dir.join("text_encoder"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let frame = VisionEncoder::load(&dir.join("frame_encoder"))?;
        let pose_dir = dir.join("pose_encoder");
        let pose = if pose_dir.exists() {
            Some(VisionEncoder::load(&pose_dir)?)
        } else {
            None
        };
        let text = TextEncoder::load(&dir.join("text_encoder"))?;
        Ok(Self { frame, pose, text })
    }
}

impl BoundEncoders<'_> {
    /// All bound variables in the order of [`Encoders::params_mut`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.frame.vars().to_vec();
        if let Some(p) = &self.pose {
            out.extend_from_slice(p.vars());
        }
        out.extend_from_slice(self.text.vars());
        out
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}
