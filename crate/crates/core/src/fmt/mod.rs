//! Observation encoder: image and force/torque tokenization, frequency-aware
//! multimodal embeddings, bi-directional cross-attention and token fusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Attention, LayerNorm, Linear, Mlp};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use crate::Scalar;

pub const FT_DIM: usize = 6;
const EMBED_STD: f64 = 0.02;
const FT_KERNEL: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FmtConfig {
    /// Model width.
    pub d: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    pub patch: usize,
    pub channels: usize,
    /// Image frames per observation.
    pub t_img: usize,
    /// F/T tokens per observation.
    pub t_ft: usize,
    /// Rows of the resampled F/T block fed to the convolution stack.
    pub ft_raw_len: usize,
    pub ft_conv_channels: usize,
    pub heads: usize,
    pub cross_layers: usize,
    pub freq_embed: bool,
    pub modality_embed: bool,
    pub cross_attention: bool,
    /// When false the policy sees images only and no F/T tokens exist.
    pub use_ft: bool,
}

impl Default for FmtConfig {
    fn default() -> Self {
        Self {
            d: 64,
            image_size: 32,
            patch: 8,
            channels: 1,
            t_img: 2,
            t_ft: 8,
            ft_raw_len: 16,
            ft_conv_channels: 32,
            heads: 4,
            cross_layers: 1,
            freq_embed: true,
            modality_embed: true,
            cross_attention: true,
            use_ft: true,
        }
    }
}

impl FmtConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.patch == 0 || self.image_size == 0 || self.image_size % self.patch != 0 {
            return Err(format!("image_size={} must be a positive multiple of patch={}", self.image_size, self.patch));
        }
        if self.channels == 0 || self.t_img == 0 {
            return Err("channels and t_img must be positive".into());
        }
        if self.use_ft && (self.t_ft == 0 || self.ft_raw_len < self.t_ft || self.ft_raw_len % self.t_ft != 0) {
            return Err(format!("ft_raw_len={} must be a positive multiple of t_ft={}", self.ft_raw_len, self.t_ft));
        }
        if self.use_ft && self.ft_conv_channels == 0 {
            return Err("ft_conv_channels must be positive".into());
        }
        Ok(())
    }

    /// Visual tokens per image (`L`).
    pub fn tokens_per_image(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn visual_tokens(&self) -> usize {
        2 * self.tokens_per_image() * self.t_img
    }

    pub fn ft_tokens(&self) -> usize {
        if self.use_ft {
            self.t_ft
        } else {
            0
        }
    }

    /// Rows of the fused observation sequence.
    pub fn obs_tokens(&self) -> usize {
        self.visual_tokens() + self.ft_tokens()
    }

    pub fn image_len(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }

    fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// One policy input. `images` holds `[camera][frame][y][x][channel]` for two
/// cameras; `ft` holds `ft_raw_len` rows of 6 compensated, normalized wrench
/// components (empty when F/T is disabled).
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub images: Vec<f32>,
    pub ft: Vec<f32>,
}

/// Bi-directional cross-attention layer; both directions read the same
/// pre-attention inputs.
#[derive(Debug, Clone, Copy)]
pub struct CrossAttentionBlock {
    pub norm_img: LayerNorm,
    pub norm_ft: LayerNorm,
    pub img_from_ft: Attention,
    pub ft_from_img: Attention,
    pub pre_norm: bool,
    pub residual: bool,
}

impl CrossAttentionBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        Ok(Self {
            norm_img: LayerNorm::new(store, &format!("{name}.norm_img"), d)?,
            norm_ft: LayerNorm::new(store, &format!("{name}.norm_ft"), d)?,
            img_from_ft: Attention::new(store, &format!("{name}.img_from_ft"), d, heads, rng)?,
            ft_from_img: Attention::new(store, &format!("{name}.ft_from_img"), d, heads, rng)?,
            pre_norm: true,
            residual: true,
        })
    }

    /// Returns `(img'', ft'')` plus the attention weights of each direction.
    pub fn forward_with_weights<T: Scalar>(
        &self,
        t: &mut Tape<T>,
        s: &ParamStore<T>,
        img: Var,
        ft: Var,
    ) -> Result<(Var, Var, Var, Var), TensorError> {
        let (wi, wf) = (t.shape(img)[2], t.shape(ft)[2]);
        if wi != wf {
            return Err(TensorError::Shape { op: "cross_attend", lhs: t.shape(img).to_vec(), rhs: t.shape(ft).to_vec() });
        }
        let (qi, qf) = if self.pre_norm {
            (self.norm_img.forward(t, s, img)?, self.norm_ft.forward(t, s, ft)?)
        } else {
            (img, ft)
        };
        let kv_ft = self.img_from_ft.key_values(t, s, qf)?;
        let (a_img, w_img) = self.img_from_ft.attend(t, s, qi, kv_ft, false)?;
        let kv_img = self.ft_from_img.key_values(t, s, qi)?;
        let (a_ft, w_ft) = self.ft_from_img.attend(t, s, qf, kv_img, false)?;
        if self.residual {
            Ok((t.add(img, a_img)?, t.add(ft, a_ft)?, w_img, w_ft))
        } else {
            Ok((a_img, a_ft, w_img, w_ft))
        }
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, s: &ParamStore<T>, img: Var, ft: Var) -> Result<(Var, Var), TensorError> {
        let (i, f, _, _) = self.forward_with_weights(t, s, img, ft)?;
        Ok((i, f))
    }
}

#[derive(Debug, Clone, Copy)]
struct FtEncoder {
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    proj: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct EmbeddingTables {
    pub spatial: ParamId,
    pub freq: Option<ParamId>,
    /// `(E_cam1, E_cam2, E_ft)`
    pub modality: Option<(ParamId, ParamId, ParamId)>,
}

/// Encoder parameters live in a [`ParamStore`]; this struct holds their ids.
#[derive(Debug, Clone)]
pub struct FmtEncoder {
    pub config: FmtConfig,
    patch_embed: Linear,
    patch_blocks: Vec<Mlp>,
    ft: Option<FtEncoder>,
    pub tables: EmbeddingTables,
    pub cross: Vec<CrossAttentionBlock>,
    fuse: Linear,
    fuse_norm: LayerNorm,
}

impl FmtEncoder {
    pub fn new<T: Scalar>(config: FmtConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self, TensorError> {
        config.validate().map_err(|msg| TensorError::Invalid { op: "fmt_config", msg })?;
        let d = config.d;
        let l = config.tokens_per_image();
        let patch_embed = Linear::new(store, "fmt.patch_embed", config.patch_len(), d, rng)?;
        let patch_blocks =
            (0..2).map(|i| Mlp::new(store, &format!("fmt.patch_block{i}"), d, d, rng)).collect::<Result<Vec<_>, _>>()?;
        let ft = if config.use_ft {
            let c = config.ft_conv_channels;
            Some(FtEncoder {
                conv1_w: store.xavier("fmt.ft_conv1.weight", &[FT_KERNEL, FT_DIM, c], rng)?,
                conv1_b: store.zeros("fmt.ft_conv1.bias", &[c])?,
                conv2_w: store.xavier("fmt.ft_conv2.weight", &[FT_KERNEL, c, c], rng)?,
                conv2_b: store.zeros("fmt.ft_conv2.bias", &[c])?,
                proj: Linear::new(store, "fmt.ft_proj", c, d, rng)?,
            })
        } else {
            None
        };
        let spatial = store.normal("fmt.e_spatial", &[l, d], EMBED_STD, rng)?;
        let freq = if config.freq_embed { Some(store.normal("fmt.e_freq", &[config.t_ft.max(1), d], EMBED_STD, rng)?) } else { None };
        let modality = if config.modality_embed {
            Some((
                store.normal("fmt.e_cam1", &[1, d], EMBED_STD, rng)?,
                store.normal("fmt.e_cam2", &[1, d], EMBED_STD, rng)?,
                store.normal("fmt.e_ft", &[1, d], EMBED_STD, rng)?,
            ))
        } else {
            None
        };
        let cross = if config.cross_attention && config.use_ft {
            (0..config.cross_layers)
                .map(|i| CrossAttentionBlock::new(store, &format!("fmt.cross{i}"), d, config.heads, rng))
                .collect::<Result<Vec<_>, _>>()?
        } else {
            Vec::new()
        };
        let fuse = Linear::new(store, "fmt.fuse", d, d, rng)?;
        let fuse_norm = LayerNorm::new(store, "fmt.fuse_norm", d)?;
        Ok(Self { config, patch_embed, patch_blocks, ft, tables: EmbeddingTables { spatial, freq, modality }, cross, fuse, fuse_norm })
    }

    /// Cuts every image into row-major patches: `[B * 2 * T_img, L, p*p*C]`.
    fn patchify<T: Scalar>(&self, obs: &[&Observation]) -> Result<Tensor<T>, TensorError> {
        let c = &self.config;
        let per_obs = 2 * c.t_img * c.image_len();
        let (side, p, ch) = (c.image_size, c.patch, c.channels);
        let grid = side / p;
        let mut data = Vec::with_capacity(obs.len() * per_obs);
        for o in obs {
            if o.images.len() != per_obs {
                return Err(TensorError::Shape {
                    op: "tokenize_images",
                    lhs: vec![o.images.len()],
                    rhs: vec![2, c.t_img, side, side, ch],
                });
            }
            for img in o.images.chunks(c.image_len()) {
                for gy in 0..grid {
                    for gx in 0..grid {
                        for y in 0..p {
                            let row = ((gy * p + y) * side + gx * p) * ch;
                            data.extend(img[row..row + p * ch].iter().map(|&v| T::of(v as f64)));
                        }
                    }
                }
            }
        }
        Tensor::new(&[obs.len() * 2 * c.t_img, c.tokens_per_image(), c.patch_len()], data)
    }

    /// Patch tokens for both cameras: `[B, 2, T_img, L, d]`.
    pub fn tokenize_images<T: Scalar>(&self, t: &mut Tape<T>, s: &ParamStore<T>, obs: &[&Observation]) -> Result<Var, TensorError> {
        let c = &self.config;
        let patches = t.constant(self.patchify(obs)?);
        let mut x = self.patch_embed.forward(t, s, patches)?;
        for block in &self.patch_blocks {
            let h = block.forward(t, s, x)?;
            x = t.add(x, h)?;
        }
        t.reshape(x, &[obs.len(), 2, c.t_img, c.tokens_per_image(), c.d])
    }

    /// F/T tokens `[B, T_ft, d]` from the resampled wrench blocks.
    pub fn encode_ft<T: Scalar>(&self, t: &mut Tape<T>, s: &ParamStore<T>, obs: &[&Observation]) -> Result<Var, TensorError> {
        let c = &self.config;
        let enc = self.ft.ok_or_else(|| TensorError::Invalid { op: "encode_ft", msg: "F/T input disabled".into() })?;
        let r = c.ft_raw_len;
        let mut data = Vec::with_capacity(obs.len() * r * FT_DIM);
        for o in obs {
            if o.ft.len() % FT_DIM != 0 || o.ft.len() > r * FT_DIM {
                return Err(TensorError::Shape { op: "encode_ft", lhs: vec![o.ft.len()], rhs: vec![r, FT_DIM] });
            }
            let rows = o.ft.len() / FT_DIM;
            if rows < r {
                log::warn!("F/T block has {rows} rows, padding to {r}");
                let first: Vec<f32> = if rows > 0 { o.ft[..FT_DIM].to_vec() } else { vec![0.0; FT_DIM] };
                for _ in rows..r {
                    data.extend(first.iter().map(|&v| T::of(v as f64)));
                }
            }
            data.extend(o.ft.iter().map(|&v| T::of(v as f64)));
        }
        let x = t.constant(Tensor::new(&[obs.len(), r, FT_DIM], data)?);
        let x = replicate_pad(t, x, FT_KERNEL / 2)?;
        let (w1, b1) = (t.param(s, enc.conv1_w), t.param(s, enc.conv1_b));
        let h = t.conv1d(x, w1, Some(b1), 1, 0)?;
        let h = t.gelu(h)?;
        let h = replicate_pad(t, h, FT_KERNEL / 2)?;
        let (w2, b2) = (t.param(s, enc.conv2_w), t.param(s, enc.conv2_b));
        let h = t.conv1d(h, w2, Some(b2), r / c.t_ft, 0)?;
        let h = t.gelu(h)?;
        enc.proj.forward(t, s, h)
    }

    /// Adds positional, frequency and modality embeddings; flattens visual
    /// tokens to `[B, 2 * T_img * L, d]`.
    pub fn apply_embeddings<T: Scalar>(
        &self,
        t: &mut Tape<T>,
        s: &ParamStore<T>,
        visual: Var,
        ft: Option<Var>,
    ) -> Result<(Var, Option<Var>), TensorError> {
        let c = &self.config;
        let (l, ti) = (c.tokens_per_image(), c.t_img);
        let vs = t.shape(visual).to_vec();
        if vs.len() != 5 || vs[1..] != [2, ti, l, c.d] {
            return Err(TensorError::Shape { op: "apply_embeddings", lhs: vs, rhs: vec![2, ti, l, c.d] });
        }
        let n = 2 * ti * l;
        let spatial = t.param(s, self.tables.spatial);
        let idx: Vec<usize> = (0..n).map(|i| i % l).collect();
        let mut table = t.index_select(spatial, &idx)?;
        if let Some(f) = self.tables.freq {
            let ef = t.param(s, f);
            let rows = t.linear_interpolate_rows(ef, ti)?;
            let idx: Vec<usize> = (0..n).map(|i| (i / l) % ti).collect();
            let rows = t.index_select(rows, &idx)?;
            table = t.add(table, rows)?;
        }
        if let Some((c1, c2, _)) = self.tables.modality {
            let (c1, c2) = (t.param(s, c1), t.param(s, c2));
            let cams = t.concat(&[c1, c2], 0)?;
            let idx: Vec<usize> = (0..n).map(|i| i / (ti * l)).collect();
            let rows = t.index_select(cams, &idx)?;
            table = t.add(table, rows)?;
        }
        let flat = t.reshape(visual, &[vs[0], n, c.d])?;
        let visual = t.embedding_add(flat, table)?;

        let ft = match ft {
            None => None,
            Some(ft) => {
                let fs = t.shape(ft).to_vec();
                if fs.len() != 3 || fs[1..] != [c.t_ft, c.d] {
                    return Err(TensorError::Shape { op: "apply_embeddings", lhs: fs, rhs: vec![c.t_ft, c.d] });
                }
                let mut table = None;
                if let Some(f) = self.tables.freq {
                    table = Some(t.param(s, f));
                }
                if let Some((_, _, e)) = self.tables.modality {
                    let e = t.param(s, e);
                    let rows = t.index_select(e, &vec![0; c.t_ft])?;
                    table = Some(match table {
                        Some(tb) => t.add(tb, rows)?,
                        None => rows,
                    });
                }
                Some(match table {
                    Some(tb) => t.embedding_add(ft, tb)?,
                    None => ft,
                })
            }
        };
        Ok((visual, ft))
    }

    /// Concatenates visual then F/T tokens, applies the shared token-wise
    /// linear layer and layer norm.
    pub fn fuse_observation<T: Scalar>(
        &self,
        t: &mut Tape<T>,
        s: &ParamStore<T>,
        img: Var,
        ft: Option<Var>,
    ) -> Result<Var, TensorError> {
        let x = match ft {
            Some(ft) => t.concat(&[img, ft], 1)?,
            None => img,
        };
        let x = self.fuse.forward(t, s, x)?;
        self.fuse_norm.forward(t, s, x)
    }

    /// Full encoder: `T_obs` of shape `[B, obs_tokens, d]`.
    pub fn encode<T: Scalar>(&self, t: &mut Tape<T>, s: &ParamStore<T>, obs: &[&Observation]) -> Result<Var, TensorError> {
        if obs.is_empty() {
            return Err(TensorError::Invalid { op: "encode", msg: "empty batch".into() });
        }
        let visual = self.tokenize_images(t, s, obs)?;
        let ft = if self.config.use_ft { Some(self.encode_ft(t, s, obs)?) } else { None };
        let (mut img, mut ft) = self.apply_embeddings(t, s, visual, ft)?;
        if let Some(mut f) = ft {
            for block in &self.cross {
                (img, f) = block.forward(t, s, img, f)?;
            }
            ft = Some(f);
        }
        self.fuse_observation(t, s, img, ft)
    }
}

/// Pads an `h x w x c` image to a square with zeros (centered), then
/// resizes it to `side x side` by bilinear sampling.
pub fn square_pad_resize(img: &[f32], h: usize, w: usize, c: usize, side: usize) -> Vec<f32> {
    assert_eq!(img.len(), h * w * c, "image buffer does not match {h}x{w}x{c}");
    let n = h.max(w);
    let (oy, ox) = ((n - h) / 2, (n - w) / 2);
    let at = |y: isize, x: isize, ch: usize| -> f32 {
        let (yy, xx) = (y - oy as isize, x - ox as isize);
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            img[(yy as usize * w + xx as usize) * c + ch]
        }
    };
    let scale = n as f64 / side as f64;
    let mut out = vec![0.0; side * side * c];
    for y in 0..side {
        let sy = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let (y0, fy) = (sy.floor() as isize, (sy - sy.floor()) as f32);
        for x in 0..side {
            let sx = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
            let (x0, fx) = (sx.floor() as isize, (sx - sx.floor()) as f32);
            let y1 = (y0 + 1).min(n as isize - 1);
            let x1 = (x0 + 1).min(n as isize - 1);
            for ch in 0..c {
                let top = at(y0, x0, ch) * (1.0 - fx) + at(y0, x1, ch) * fx;
                let bot = at(y1, x0, ch) * (1.0 - fx) + at(y1, x1, ch) * fx;
                out[(y * side + x) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Pads `[B, L, C]` along `L` by repeating the edge rows `pad` times.
fn replicate_pad<T: Scalar>(t: &mut Tape<T>, x: Var, pad: usize) -> Result<Var, TensorError> {
    if pad == 0 {
        return Ok(x);
    }
    let len = t.shape(x)[1];
    let index: Vec<usize> = (0..len + 2 * pad).map(|i| i.saturating_sub(pad).min(len - 1)).collect();
    let xt = t.transpose(x, 0, 1)?;
    let padded = t.index_select(xt, &index)?;
    t.transpose(padded, 0, 1)
}

#[cfg(test)]
mod tests;
