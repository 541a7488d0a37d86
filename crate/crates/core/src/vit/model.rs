//! Forward pass of the backbone on a tape.
//!
//! A batch of `B` sequences of length `T` is stored as one `[B·T × D]` node,
//! sample-major. Linear layers and normalization run over all rows at once;
//! attention runs per sample and head.

use std::ops::Range;

use super::{Binder, ViTConfig};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Token layout `[CLS | prompts | patches]` of every sample in a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentMap {
    pub num_prompts: usize,
    pub num_patches: usize,
}

impl SegmentMap {
    pub fn len(&self) -> usize {
        1 + self.num_prompts + self.num_patches
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cls(&self) -> Range<usize> {
        0..1
    }

    pub fn prompts(&self) -> Range<usize> {
        1..1 + self.num_prompts
    }

    pub fn patches(&self) -> Range<usize> {
        1 + self.num_prompts..self.len()
    }
}

#[derive(Clone, Debug)]
pub struct TokenSequence {
    /// `[batch · seq_len × D]`, sample-major.
    pub tokens: Var,
    pub batch: usize,
    pub segments: SegmentMap,
}

impl TokenSequence {
    pub fn seq_len(&self) -> usize {
        self.segments.len()
    }

    /// Rows `range` of every sample, stacked sample-major into
    /// `[batch · range.len() × D]`.
    pub fn slice_tokens(&self, range: Range<usize>) -> Result<Var> {
        let t = self.seq_len();
        if range.is_empty() || range.end > t {
            return Err(Error::OutOfBounds {
                what: "token positions",
                index: range.end,
                len: t,
            });
        }
        let idx: Vec<usize> = (0..self.batch)
            .flat_map(|b| range.clone().map(move |i| b * t + i))
            .collect();
        self.tokens.gather_rows(&idx)
    }

    /// A new sequence with the given segment replaced by `values`
    /// (`[batch · range.len() × D]`). The segment map is unchanged.
    pub fn replace_segment(&self, range: Range<usize>, values: &Var) -> Result<TokenSequence> {
        let t = self.seq_len();
        let mut parts = Vec::new();
        if range.start > 0 {
            parts.push((self.slice_tokens(0..range.start)?, range.start));
        }
        parts.push((values.clone(), range.len()));
        if range.end < t {
            parts.push((self.slice_tokens(range.end..t)?, t - range.end));
        }
        let tokens = concat_tokens(&parts, self.batch)?;
        Ok(TokenSequence {
            tokens,
            batch: self.batch,
            segments: self.segments,
        })
    }

    /// Inserts `prompts` (`[N_p × D]`, shared by every sample) between the
    /// CLS token and the patches of a prompt-free sequence.
    pub fn insert_prompts(&self, prompts: &Var) -> Result<TokenSequence> {
        if self.segments.num_prompts != 0 {
            return Err(Error::State("sequence already carries prompts".into()));
        }
        let np = prompts.value().rows();
        let tiled = tile_rows(prompts, self.batch)?;
        let cls = self.slice_tokens(self.segments.cls())?;
        let patches = self.slice_tokens(self.segments.patches())?;
        let n = self.segments.num_patches;
        let tokens = concat_tokens(&[(cls, 1), (tiled, np), (patches, n)], self.batch)?;
        Ok(TokenSequence {
            tokens,
            batch: self.batch,
            segments: SegmentMap {
                num_prompts: np,
                num_patches: n,
            },
        })
    }
}

/// Repeats a `[r × D]` node `batch` times → `[batch · r × D]`.
pub fn tile_rows(x: &Var, batch: usize) -> Result<Var> {
    let r = x.value().rows();
    let idx: Vec<usize> = (0..batch).flat_map(|_| 0..r).collect();
    x.gather_rows(&idx)
}

/// Interleaves per-segment blocks into sample-major order. Each part is
/// `[batch · len × D]` holding one segment of every sample.
pub fn concat_tokens(parts: &[(Var, usize)], batch: usize) -> Result<Var> {
    let vars: Vec<Var> = parts.iter().map(|(v, _)| v.clone()).collect();
    for (v, len) in parts {
        if v.value().rows() != batch * len {
            return Err(Error::Shape {
                op: "concat_tokens",
                lhs: v.shape(),
                rhs: vec![batch, *len],
            });
        }
    }
    let stacked = Var::concat_rows(&vars)?;
    let mut offsets = Vec::with_capacity(parts.len());
    let mut off = 0;
    for (_, len) in parts {
        offsets.push(off);
        off += batch * len;
    }
    let mut idx = Vec::with_capacity(off);
    for b in 0..batch {
        for ((_, len), o) in parts.iter().zip(&offsets) {
            idx.extend((0..*len).map(|i| o + b * len + i));
        }
    }
    stacked.gather_rows(&idx)
}

/// Per-block attention tensors captured during a forward pass.
#[derive(Clone, Debug)]
pub struct AttentionState {
    pub block: usize,
    /// `[B, h, T, d_head]` each.
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// `[B, h, T, T]`, each row a probability distribution.
    pub scores: Tensor,
}

/// Forward-pass context: the parameter binder plus optional attention capture.
pub struct Forward<'a> {
    pub binder: Binder<'a>,
    pub config: &'a ViTConfig,
    pub capture_attention: bool,
    pub attention: Vec<AttentionState>,
}

impl<'a> Forward<'a> {
    pub fn new(binder: Binder<'a>, config: &'a ViTConfig) -> Self {
        Self {
            binder,
            config,
            capture_attention: false,
            attention: Vec::new(),
        }
    }

    fn p(&mut self, name: &str) -> Result<Var> {
        self.binder.var(name)
    }

    fn linear(&mut self, x: &Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        x.matmul(&w)?.add_bias(&b)
    }

    fn norm(&mut self, x: &Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        x.layer_norm(&w, &b, self.config.layer_norm_eps)
    }
}

/// Cuts `[B, H, W, C]` images into a `[B·N × P·P·C]` matrix. Patches are
/// taken in raster order; each patch is flattened row, column, channel.
pub fn extract_patches(config: &ViTConfig, images: &Tensor) -> Result<Tensor> {
    let (s, c, p) = (config.image_size, config.channels, config.patch_size);
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != s || shape[2] != s || shape[3] != c {
        return Err(Error::Config(format!(
            "images of shape {shape:?} do not match configured [B, {s}, {s}, {c}]"
        )));
    }
    let b = shape[0];
    let grid = config.grid();
    let pd = config.patch_dim();
    let mut out = Vec::with_capacity(b * grid * grid * pd);
    let data = images.data();
    for n in 0..b {
        let img = &data[n * s * s * c..(n + 1) * s * s * c];
        for gy in 0..grid {
            for gx in 0..grid {
                for y in 0..p {
                    let row = (gy * p + y) * s + gx * p;
                    out.extend_from_slice(&img[row * c..(row + p) * c]);
                }
            }
        }
    }
    Tensor::new([b * grid * grid, pd], out)
}

/// Linear patch projection plus positional embeddings, with the CLS token
/// prepended. The result carries no prompts.
pub fn patch_embed(fwd: &mut Forward<'_>, images: &Tensor) -> Result<TokenSequence> {
    let patches = extract_patches(fwd.config, images)?;
    let b = images.shape()[0];
    let n = fwd.config.num_patches();
    let x = fwd.binder.tape().constant(patches);
    let emb = fwd.linear(&x, "patch_embed")?;
    let pos = fwd.p("pos_embed")?;
    let emb = emb.add(&tile_rows(&pos, b)?)?;
    let cls = tile_rows(&fwd.p("cls_token")?, b)?;
    let tokens = concat_tokens(&[(cls, 1), (emb, n)], b)?;
    Ok(TokenSequence {
        tokens,
        batch: b,
        segments: SegmentMap {
            num_prompts: 0,
            num_patches: n,
        },
    })
}

/// Multi-head self-attention of block `block` over the whole sequence,
/// including the output projection. Logits are `q·kᵀ / (τ·√d_head)`; with
/// `tau = None` the division by `τ` is skipped entirely.
pub fn attention(
    fwd: &mut Forward<'_>,
    block: usize,
    x: &TokenSequence,
    tau: Option<&Var>,
) -> Result<TokenSequence> {
    if let Some(t) = tau {
        let v = t.item();
        if !(v > 0.0) {
            return Err(Error::Domain(format!("temperature must be positive, got {v}")));
        }
    }
    let cfg = fwd.config;
    let (d, heads, dh) = (cfg.embed_dim, cfg.num_heads, cfg.head_dim());
    let (b, t) = (x.batch, x.seq_len());
    let scale = 1.0 / (dh as f64).sqrt();
    let qkv = fwd.linear(&x.tokens, &format!("blocks.{block}.attn.qkv"))?;
    let merged = qkv.multi_head_attention(b, heads, scale, tau)?;
    if fwd.capture_attention {
        let probs = merged.attention_probs().expect("attention node");
        let qv = qkv.value();
        let mut parts = [
            Vec::with_capacity(b * heads * t * dh),
            Vec::with_capacity(b * heads * t * dh),
            Vec::with_capacity(b * heads * t * dh),
        ];
        for s in 0..b {
            for h in 0..heads {
                for r in 0..t {
                    let row = qv.row(s * t + r);
                    for (i, part) in parts.iter_mut().enumerate() {
                        part.extend_from_slice(&row[i * d + h * dh..i * d + (h + 1) * dh]);
                    }
                }
            }
        }
        let [q, k, v] = parts;
        fwd.attention.push(AttentionState {
            block,
            q: Tensor::new([b, heads, t, dh], q)?,
            k: Tensor::new([b, heads, t, dh], k)?,
            v: Tensor::new([b, heads, t, dh], v)?,
            scores: Tensor::new([b, heads, t, t], probs)?,
        });
    }
    let tokens = fwd.linear(&merged, &format!("blocks.{block}.attn.proj"))?;
    Ok(TokenSequence {
        tokens,
        batch: b,
        segments: x.segments,
    })
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `+ MLP(LN(·))`.
pub fn block_forward(
    fwd: &mut Forward<'_>,
    block: usize,
    x: &TokenSequence,
    tau: Option<&Var>,
) -> Result<TokenSequence> {
    let h = fwd.norm(&x.tokens, &format!("blocks.{block}.norm1"))?;
    let normed = TokenSequence {
        tokens: h,
        batch: x.batch,
        segments: x.segments,
    };
    let a = attention(fwd, block, &normed, tau)?;
    let x1 = x.tokens.add(&a.tokens)?;
    let h2 = fwd.norm(&x1, &format!("blocks.{block}.norm2"))?;
    let m = fwd.linear(&h2, &format!("blocks.{block}.mlp.fc1"))?.gelu()?;
    let m = fwd.linear(&m, &format!("blocks.{block}.mlp.fc2"))?;
    Ok(TokenSequence {
        tokens: x1.add(&m)?,
        batch: x.batch,
        segments: x.segments,
    })
}

/// Classification logits `[B × classes]` from the final CLS tokens only
/// (after the encoder's closing layer norm).
pub fn head_forward(fwd: &mut Forward<'_>, x: &TokenSequence) -> Result<Var> {
    let cls = x.slice_tokens(x.segments.cls())?;
    let cls = fwd.norm(&cls, "norm")?;
    fwd.linear(&cls, "head")
}

/// Plain backbone forward (no prompts) with optional per-block temperatures.
pub fn encode(fwd: &mut Forward<'_>, images: &Tensor, taus: Option<&[f64]>) -> Result<Var> {
    let cfg = fwd.config;
    if let Some(t) = taus {
        if t.len() != cfg.num_blocks {
            return Err(Error::Config(format!(
                "{} temperatures for {} blocks",
                t.len(),
                cfg.num_blocks
            )));
        }
    }
    let mut x = patch_embed(fwd, images)?;
    for l in 0..cfg.num_blocks {
        let tau = taus.map(|t| fwd.binder.tape().scalar(t[l]));
        x = block_forward(fwd, l, &x, tau.as_ref())?;
    }
    head_forward(fwd, &x)
}
