//! A small pre-norm ViT image encoder that serves as both the dense
//! teacher and the dilated student, exposing every block's output.

mod params;

pub use params::{BoundParams, ParamSet, MANIFEST};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, Kernel};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum AttentionMode {
    Dense,
    /// Head `j` uses offset `j mod interval`.
    Dilated { segment_len: usize, interval: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub attention: AttentionMode,
    pub kernel: Kernel,
}

impl EncoderConfig {
    /// 384-wide, 6 heads, 6 blocks, dilated over 1024² inputs in 16² patches.
    pub fn base_student() -> Self {
        EncoderConfig {
            image_size: 1024,
            patch_size: 16,
            in_channels: 3,
            embed_dim: 384,
            num_layers: 6,
            num_heads: 6,
            mlp_ratio: 4.0,
            attention: AttentionMode::Dilated {
                segment_len: 512,
                interval: 2,
            },
            kernel: Kernel::Tiled { tile_size: 64 },
        }
    }

    /// 768-wide, 12-block dense encoder standing in for a large teacher.
    pub fn teacher() -> Self {
        EncoderConfig {
            embed_dim: 768,
            num_layers: 12,
            num_heads: 12,
            attention: AttentionMode::Dense,
            kernel: Kernel::Naive,
            ..Self::base_student()
        }
    }

    /// 64-wide, 4 heads, 2 dilated blocks over 32² images in 4² patches.
    pub fn desk() -> Self {
        EncoderConfig {
            image_size: 32,
            patch_size: 4,
            in_channels: 3,
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            mlp_ratio: 4.0,
            attention: AttentionMode::Dilated {
                segment_len: 16,
                interval: 2,
            },
            kernel: Kernel::Naive,
        }
    }

    /// Dense 4-block counterpart of [`EncoderConfig::desk`].
    pub fn desk_teacher() -> Self {
        EncoderConfig {
            num_layers: 4,
            attention: AttentionMode::Dense,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "base-student" => Ok(Self::base_student()),
            "teacher" => Ok(Self::teacher()),
            "desk" => Ok(Self::desk()),
            "desk-teacher" => Ok(Self::desk_teacher()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (base-student, teacher, desk, desk-teacher)"
            ))),
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch size {} must divide image size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.in_channels == 0 || self.mlp_hidden() == 0 {
            return Err(Error::Config("channels and MLP width must be positive".into()));
        }
        self.attention_config().map(|_| ())
    }

    /// The attention geometry every block uses. Dense mode is one segment
    /// spanning the sequence with unit interval.
    pub fn attention_config(&self) -> Result<AttentionConfig> {
        let n = self.num_tokens();
        let (w, r) = match self.attention {
            AttentionMode::Dense => (n, 1),
            AttentionMode::Dilated {
                segment_len,
                interval,
            } => (segment_len, interval),
        };
        let cfg = AttentionConfig::new(n, w, r, self.num_heads, self.head_dim())?
            .with_kernel(self.kernel)
            .with_full_coverage()?;
        Ok(cfg)
    }

    /// Scalar parameter count, computed without allocating tensors.
    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, shape, _)| shape.iter().product::<usize>())
            .sum()
    }

    /// Every parameter name with its shape and initializer, in a fixed order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let d = self.embed_dim;
        let hidden = self.mlp_hidden();
        let mut specs = Vec::new();
        let mut add = |name: String, shape: &[usize], init: Init| specs.push((name, shape.to_vec(), init));
        add("patch_embed.weight".into(), &[self.patch_dim(), d], Init::TruncNormal);
        add("patch_embed.bias".into(), &[d], Init::Zeros);
        add("pos_embed".into(), &[self.num_tokens(), d], Init::TruncNormal);
        for i in 0..self.num_layers {
            let b = format!("blocks.{i}");
            add(format!("{b}.norm1.weight"), &[d], Init::Ones);
            add(format!("{b}.norm1.bias"), &[d], Init::Zeros);
            for proj in ["q", "k", "v", "proj"] {
                add(format!("{b}.attn.{proj}.weight"), &[d, d], Init::TruncNormal);
                add(format!("{b}.attn.{proj}.bias"), &[d], Init::Zeros);
            }
            add(format!("{b}.norm2.weight"), &[d], Init::Ones);
            add(format!("{b}.norm2.bias"), &[d], Init::Zeros);
            add(format!("{b}.mlp.fc1.weight"), &[d, hidden], Init::TruncNormal);
            add(format!("{b}.mlp.fc1.bias"), &[hidden], Init::Zeros);
            add(format!("{b}.mlp.fc2.weight"), &[hidden, d], Init::TruncNormal);
            add(format!("{b}.mlp.fc2.bias"), &[d], Init::Zeros);
        }
        add("norm.weight".into(), &[d], Init::Ones);
        add("norm.bias".into(), &[d], Init::Zeros);
        specs
    }

    /// Truncated-normal projections (σ = 0.02), zero biases, unit norm gains.
    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamSet<T>> {
        self.validate()?;
        let mut p = ParamSet::new();
        for (name, shape, init) in self.param_specs() {
            let t = match init {
                Init::TruncNormal => Tensor::trunc_normal(&shape, INIT_STD, rng),
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::ones(&shape),
            };
            p.insert(name, t);
        }
        Ok(p)
    }

    /// Checks that `params` has exactly the shapes this config expects.
    pub fn check_params<T: Scalar>(&self, params: &ParamSet<T>) -> Result<()> {
        for (name, shape, _) in self.param_specs() {
            let got = params.get(&name)?;
            if got.shape() != shape.as_slice() {
                return Err(Error::dim("encoder parameter", got.shape(), &shape));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

/// Per-block outputs, `layers[i]` being block `i`'s residual stream.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeatures<T> {
    pub layers: Vec<Tensor<T>>,
}

/// Handles produced by one recorded forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Final layer-norm output, `(batch · tokens) × D`.
    pub output: Var,
    /// Each block's output, same layout.
    pub features: Vec<Var>,
}

/// Non-overlapping patches, row-major over the grid, each flattened in
/// `(row, column, channel)` order.
pub fn patchify<T: Scalar>(image: &Tensor<T>, cfg: &EncoderConfig) -> Result<Tensor<T>> {
    let expected = [cfg.image_size, cfg.image_size, cfg.in_channels];
    if image.shape() != expected {
        return Err(Error::dim("patchify", image.shape(), &expected));
    }
    let (s, p, c, g) = (cfg.image_size, cfg.patch_size, cfg.in_channels, cfg.grid());
    let src = image.data();
    let mut out = Vec::with_capacity(s * s * c);
    for gy in 0..g {
        for gx in 0..g {
            for py in 0..p {
                let y = gy * p + py;
                let start = (y * s + gx * p) * c;
                out.extend_from_slice(&src[start..start + p * c]);
            }
        }
    }
    Tensor::new(vec![g * g, cfg.patch_dim()], out)
}

/// Patch projection plus learned positional embedding, `tokens × D`.
pub fn patch_embed<T: Scalar>(image: &Tensor<T>, params: &ParamSet<T>, cfg: &EncoderConfig) -> Result<Tensor<T>> {
    patchify(image, cfg)?
        .matmul(params.get("patch_embed.weight")?)?
        .add_rows(params.get("patch_embed.bias")?)?
        .add_rows(params.get("pos_embed")?)
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &BoundParams, name: &str) -> Result<Var> {
    let w = p.var(&format!("{name}.weight"))?;
    let b = p.var(&format!("{name}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add_rows(y, b)
}

fn norm<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &BoundParams, name: &str) -> Result<Var> {
    let g = p.var(&format!("{name}.weight"))?;
    let b = p.var(&format!("{name}.bias"))?;
    tape.layer_norm(x, g, b, T::from_f64_lossy(LN_EPS))
}

/// Multi-head attention over a batch stacked as `(batch · N) × D`. Each
/// head attends within every sparsified segment of every sample and
/// scatters the results back to the original rows.
pub fn attention_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &BoundParams,
    prefix: &str,
    cfg: &AttentionConfig,
    batch: usize,
) -> Result<Var> {
    let q = linear(tape, x, p, &format!("{prefix}.q"))?;
    let k = linear(tape, x, p, &format!("{prefix}.k"))?;
    let v = linear(tape, x, p, &format!("{prefix}.v"))?;
    let (n, d) = (cfg.seq_len, cfg.head_dim);
    let scale = T::from_f64_lossy(cfg.score_scale());

    let mut views = Vec::with_capacity(cfg.num_heads);
    for &offset in &cfg.head_offsets {
        let head_views = (0..cfg.num_segments())
            .map(|s| cfg.segment_view(s, offset))
            .collect::<Result<Vec<_>>>()?;
        views.push(head_views);
    }

    let mut heads = Vec::with_capacity(cfg.num_heads);
    for (j, head_views) in views.iter().enumerate() {
        let qh = tape.slice_cols(q, j * d, d)?;
        let kh = tape.slice_cols(k, j * d, d)?;
        let vh = tape.slice_cols(v, j * d, d)?;
        let mut out = tape.leaf(Tensor::zeros(&[batch * n, d]));
        for b in 0..batch {
            for view in head_views.iter().filter(|v| !v.is_empty()) {
                let start = b * n + view.offset;
                let qs = tape.slice_rows_strided(qh, start, view.stride, view.len())?;
                let ks = tape.slice_rows_strided(kh, start, view.stride, view.len())?;
                let vs = tape.slice_rows_strided(vh, start, view.stride, view.len())?;
                let o = tape.attention(qs, ks, vs, scale, cfg.kernel)?;
                let rows: Vec<usize> = view.row_indices.iter().map(|r| b * n + r).collect();
                out = tape.scatter_rows(out, o, &rows)?;
            }
        }
        heads.push(out);
    }
    let merged = tape.concat_cols(&heads)?;
    linear(tape, merged, p, &format!("{prefix}.proj"))
}

/// Records a forward pass over `patches`, the row-stacked [`patchify`]
/// outputs of `batch` images.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &EncoderConfig,
    p: &BoundParams,
    patches: Var,
    batch: usize,
) -> Result<Trace> {
    let attn_cfg = cfg.attention_config()?;
    let expected = [batch * cfg.num_tokens(), cfg.patch_dim()];
    if tape.value(patches).shape() != expected {
        return Err(Error::dim("encoder input", tape.value(patches).shape(), &expected));
    }
    let x = linear(tape, patches, p, "patch_embed")?;
    let mut x = tape.add_rows(x, p.var("pos_embed")?)?;
    let mut features = Vec::with_capacity(cfg.num_layers);
    for i in 0..cfg.num_layers {
        let b = format!("blocks.{i}");
        let h = norm(tape, x, p, &format!("{b}.norm1"))?;
        let a = attention_on_tape(tape, h, p, &format!("{b}.attn"), &attn_cfg, batch)?;
        x = tape.add(x, a)?;
        let h = norm(tape, x, p, &format!("{b}.norm2"))?;
        let h = linear(tape, h, p, &format!("{b}.mlp.fc1"))?;
        let h = tape.gelu(h);
        let h = linear(tape, h, p, &format!("{b}.mlp.fc2"))?;
        x = tape.add(x, h)?;
        features.push(x);
    }
    let output = norm(tape, x, p, "norm")?;
    Ok(Trace { output, features })
}

/// Stacks the patches of several images for [`forward_on_tape`].
pub fn patchify_batch<T: Scalar>(images: &[&Tensor<T>], cfg: &EncoderConfig) -> Result<Tensor<T>> {
    let patches = images
        .iter()
        .map(|im| patchify(im, cfg))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<T>> = patches.iter().collect();
    Tensor::concat_rows(&refs)
}

/// Forward pass of one `H × W × C` image.
pub fn encoder_forward<T: Scalar>(
    image: &Tensor<T>,
    params: &ParamSet<T>,
    cfg: &EncoderConfig,
) -> Result<(Tensor<T>, LayerFeatures<T>)> {
    let (out, feats) = encoder_forward_batch(&[image], params, cfg)?;
    Ok((out.into_iter().next().expect("one image"), feats.into_iter().next().expect("one image")))
}

/// Forward pass of a batch; returns one output and one feature list per image.
pub fn encoder_forward_batch<T: Scalar>(
    images: &[&Tensor<T>],
    params: &ParamSet<T>,
    cfg: &EncoderConfig,
) -> Result<(Vec<Tensor<T>>, Vec<LayerFeatures<T>>)> {
    cfg.check_params(params)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let patches = tape.leaf(patchify_batch(images, cfg)?);
    let trace = forward_on_tape(&mut tape, cfg, &bound, patches, images.len())?;
    let n = cfg.num_tokens();
    let split = |v: Var, b: usize| tape.value(v).slice_rows_strided(b * n, 1, n);
    let mut outputs = Vec::with_capacity(images.len());
    let mut features = Vec::with_capacity(images.len());
    for b in 0..images.len() {
        outputs.push(split(trace.output, b)?);
        let layers = trace
            .features
            .iter()
            .map(|&f| split(f, b))
            .collect::<Result<Vec<_>>>()?;
        features.push(LayerFeatures { layers });
    }
    Ok((outputs, features))
}
