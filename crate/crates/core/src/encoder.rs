//! 3D ViT image encoder with frozen attention blocks, trainable spatial
//! adapters after every block, and one alignment adapter per stage.
//!
//! Stage `s` runs its blocks on the token grid to produce `F_s`, then
//! `A_s = act(F_s W_s)` and `F'_s = lambda * A_s + (1 - lambda) * F_s`, which
//! feeds the next stage. The token grid keeps its resolution throughout.

use ndarray::{s, Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Init, ParamGroup, ParamId, ParamStore, Var};
use crate::error::{Result, TagsError};
use crate::volume::{ModelInput, Shape3};

pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => crate::autograd::kernels::gelu(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Spatial extent of the volumes fed to the encoder.
    pub input_size: Shape3,
    pub patch_size: usize,
    pub embed_width: usize,
    pub num_stages: usize,
    pub blocks_per_stage: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Bottleneck width of the spatial adapters.
    pub adapter_width: usize,
    /// Residual weight of the alignment adapter output.
    pub lambda: f64,
    #[serde(default)]
    pub alignment_activation: Activation,
    #[serde(default)]
    pub tiny_mode: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_size: [128, 128, 128],
            patch_size: 16,
            embed_width: 768,
            num_stages: 4,
            blocks_per_stage: 3,
            num_heads: 12,
            mlp_ratio: 4,
            adapter_width: 192,
            lambda: 0.2,
            alignment_activation: Activation::Gelu,
            tiny_mode: false,
        }
    }
}

impl EncoderConfig {
    /// Desk-scale configuration: 2 stages, width 32, 32^3 input, patch 8.
    pub fn tiny() -> Self {
        EncoderConfig {
            input_size: [32, 32, 32],
            patch_size: 8,
            embed_width: 32,
            num_stages: 2,
            blocks_per_stage: 2,
            num_heads: 4,
            mlp_ratio: 2,
            adapter_width: 8,
            lambda: 0.2,
            alignment_activation: Activation::Gelu,
            tiny_mode: true,
        }
    }

    pub fn grid(&self) -> Shape3 {
        self.input_size.map(|n| n / self.patch_size)
    }

    pub fn num_tokens(&self) -> usize {
        self.grid().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(TagsError::InvalidArgument(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if self.patch_size == 0 || self.input_size.iter().any(|&n| n == 0 || n % self.patch_size != 0) {
            return Err(TagsError::InvalidArgument(format!(
                "input size {:?} is not divisible by patch size {}",
                self.input_size, self.patch_size
            )));
        }
        if self.num_stages == 0 || self.blocks_per_stage == 0 {
            return Err(TagsError::InvalidArgument("need at least one stage and one block".into()));
        }
        if self.num_heads == 0 || !self.embed_width.is_multiple_of(self.num_heads) {
            return Err(TagsError::InvalidArgument("embed width must be divisible by num_heads".into()));
        }
        if self.adapter_width == 0 || self.mlp_ratio == 0 {
            return Err(TagsError::InvalidArgument("adapter width and mlp ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Patch tokens on a `P_d x P_h x P_w` grid, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct StageFeatures {
    pub grid: Shape3,
    pub tokens: Array2<f64>,
}

impl StageFeatures {
    pub fn new(grid: Shape3, tokens: Array2<f64>) -> Result<Self> {
        if grid.iter().product::<usize>() != tokens.nrows() {
            return Err(TagsError::ShapeMismatch(format!(
                "grid {grid:?} holds {} tokens, got {}",
                grid.iter().product::<usize>(),
                tokens.nrows()
            )));
        }
        Ok(StageFeatures { grid, tokens })
    }

    pub fn width(&self) -> usize {
        self.tokens.ncols()
    }

    /// Token at grid position `(z, y, x)`.
    pub fn token(&self, p: [usize; 3]) -> ndarray::ArrayView1<'_, f64> {
        let [_, h, w] = self.grid;
        self.tokens.row((p[0] * h + p[1]) * w + p[2])
    }
}

/// `A_s(F_s) = act(F_s W_s)`, applied per token.
pub fn apply_alignment_adapter(f: &StageFeatures, w: &Array2<f64>, act: Activation) -> Result<StageFeatures> {
    if w.nrows() != f.width() {
        return Err(TagsError::ShapeMismatch(format!(
            "adapter weight has {} rows, features have width {}",
            w.nrows(),
            f.width()
        )));
    }
    StageFeatures::new(f.grid, f.tokens.dot(w).mapv(|x| act.apply(x)))
}

/// `F'_s = lambda * A_out + (1 - lambda) * F_s`.
pub fn stage_residual(f: &StageFeatures, a_out: &StageFeatures, lambda: f64) -> Result<StageFeatures> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(TagsError::InvalidArgument(format!("lambda must be in [0, 1], got {lambda}")));
    }
    if f.tokens.dim() != a_out.tokens.dim() {
        return Err(TagsError::ShapeMismatch("stage residual operands differ in shape".into()));
    }
    let keep = 1.0 - lambda;
    let tokens = ndarray::Zip::from(&a_out.tokens)
        .and(&f.tokens)
        .map_collect(|&a, &x| a * lambda + x * keep);
    StageFeatures::new(f.grid, tokens)
}

/// Rearranges non-overlapping cubic patches into rows of length
/// `3 * p^3`, ordered `(channel, kz, ky, kx)`.
pub fn patchify(input: &ModelInput, patch: usize) -> Result<(Shape3, Array2<f64>)> {
    let shape = input.shape();
    if patch == 0 || shape.iter().any(|&n| n % patch != 0) {
        return Err(TagsError::InvalidArgument(format!(
            "volume {shape:?} is not divisible by patch size {patch}"
        )));
    }
    let grid = shape.map(|n| n / patch);
    let n = grid.iter().product();
    let p3 = patch * patch * patch;
    let mut out = Array2::zeros((n, INPUT_CHANNELS * p3));
    for gz in 0..grid[0] {
        for gy in 0..grid[1] {
            for gx in 0..grid[2] {
                let row = (gz * grid[1] + gy) * grid[2] + gx;
                let mut r = out.row_mut(row);
                for c in 0..INPUT_CHANNELS {
                    let block = input.channels.slice(s![
                        c,
                        gz * patch..(gz + 1) * patch,
                        gy * patch..(gy + 1) * patch,
                        gx * patch..(gx + 1) * patch
                    ]);
                    for (k, v) in block.iter().enumerate() {
                        r[c * p3 + k] = *v;
                    }
                }
            }
        }
    }
    Ok((grid, out))
}

/// Something that hands out parameter ids: a real store, or a shape counter.
pub trait ParamSink {
    fn declare(&mut self, name: String, group: ParamGroup, shape: (usize, usize), init: Init) -> ParamId;
}

pub struct StoreSink<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> ParamSink for StoreSink<'_, R> {
    fn declare(&mut self, name: String, group: ParamGroup, shape: (usize, usize), init: Init) -> ParamId {
        self.store.init(name, group, shape, init, self.rng)
    }
}

/// Records declared shapes without allocating.
#[derive(Debug, Default)]
pub struct ShapeCounter {
    pub entries: Vec<(String, ParamGroup, (usize, usize))>,
}

impl ParamSink for ShapeCounter {
    fn declare(&mut self, name: String, group: ParamGroup, shape: (usize, usize), _init: Init) -> ParamId {
        self.entries.push((name, group, shape));
        ParamId(self.entries.len() - 1)
    }
}

impl ShapeCounter {
    pub fn count(&self, pred: impl Fn(ParamGroup) -> bool) -> usize {
        self.entries.iter().filter(|(_, g, _)| pred(*g)).map(|(_, _, (r, c))| r * c).sum()
    }
}

const STD: Init = Init::TruncNormal(0.02);

#[derive(Debug, Clone)]
struct SpatialAdapter {
    down_w: ParamId,
    down_b: ParamId,
    conv_w: ParamId,
    conv_b: ParamId,
    up_w: ParamId,
    up_b: ParamId,
}

#[derive(Debug, Clone)]
struct Block {
    norm1: (ParamId, ParamId),
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    norm2: (ParamId, ParamId),
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
    adapter: SpatialAdapter,
}

#[derive(Debug, Clone)]
struct Stage {
    blocks: Vec<Block>,
    align_w: ParamId,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    stages: Vec<Stage>,
}

/// Graph handles produced by [`Encoder::forward`].
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub grid: Shape3,
    /// Stage features before the alignment residual (`F_s`).
    pub features: Vec<Var>,
    /// `A_s(F_s)`.
    pub adapter_outputs: Vec<Var>,
    /// `F'_s`.
    pub stage_outputs: Vec<Var>,
}

impl Encoder {
    pub fn build(cfg: &EncoderConfig, sink: &mut dyn ParamSink) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.embed_width;
        let b = cfg.adapter_width;
        let p3 = cfg.patch_size.pow(3);
        let mut d = |name: String, group, shape, init| sink.declare(name, group, shape, init);
        let patch_w = d("encoder.patch_embed.weight".into(), ParamGroup::PatchEmbed, (INPUT_CHANNELS * p3, c), STD);
        let patch_b = d("encoder.patch_embed.bias".into(), ParamGroup::PatchEmbed, (1, c), Init::Zeros);
        let pos = d("encoder.pos_embed".into(), ParamGroup::PositionalEncoding, (cfg.num_tokens(), c), STD);
        let mut stages = Vec::with_capacity(cfg.num_stages);
        for s in 0..cfg.num_stages {
            let mut blocks = Vec::with_capacity(cfg.blocks_per_stage);
            for k in 0..cfg.blocks_per_stage {
                let pre = format!("encoder.stage{s}.block{k}");
                let norm = ParamGroup::Normalization;
                let att = ParamGroup::Attention;
                let sa = ParamGroup::SpatialAdapter;
                blocks.push(Block {
                    norm1: (
                        d(format!("{pre}.norm1.gamma"), norm, (1, c), Init::Ones),
                        d(format!("{pre}.norm1.beta"), norm, (1, c), Init::Zeros),
                    ),
                    qkv_w: d(format!("{pre}.attn.qkv.weight"), att, (c, 3 * c), STD),
                    qkv_b: d(format!("{pre}.attn.qkv.bias"), att, (1, 3 * c), Init::Zeros),
                    proj_w: d(format!("{pre}.attn.proj.weight"), att, (c, c), STD),
                    proj_b: d(format!("{pre}.attn.proj.bias"), att, (1, c), Init::Zeros),
                    norm2: (
                        d(format!("{pre}.norm2.gamma"), norm, (1, c), Init::Ones),
                        d(format!("{pre}.norm2.beta"), norm, (1, c), Init::Zeros),
                    ),
                    fc1_w: d(format!("{pre}.mlp.fc1.weight"), att, (c, cfg.mlp_ratio * c), STD),
                    fc1_b: d(format!("{pre}.mlp.fc1.bias"), att, (1, cfg.mlp_ratio * c), Init::Zeros),
                    fc2_w: d(format!("{pre}.mlp.fc2.weight"), att, (cfg.mlp_ratio * c, c), STD),
                    fc2_b: d(format!("{pre}.mlp.fc2.bias"), att, (1, c), Init::Zeros),
                    adapter: SpatialAdapter {
                        down_w: d(format!("{pre}.adapter.down.weight"), sa, (c, b), STD),
                        down_b: d(format!("{pre}.adapter.down.bias"), sa, (1, b), Init::Zeros),
                        conv_w: d(format!("{pre}.adapter.conv.weight"), sa, (27 * b, b), STD),
                        conv_b: d(format!("{pre}.adapter.conv.bias"), sa, (1, b), Init::Zeros),
                        up_w: d(format!("{pre}.adapter.up.weight"), sa, (b, c), STD),
                        up_b: d(format!("{pre}.adapter.up.bias"), sa, (1, c), Init::Zeros),
                    },
                });
            }
            let align_w = d(format!("encoder.stage{s}.align.weight"), ParamGroup::AlignmentAdapter, (c, c), STD);
            stages.push(Stage { blocks, align_w });
        }
        Ok(Encoder {
            cfg: cfg.clone(),
            patch_w,
            patch_b,
            pos,
            stages,
        })
    }

    pub fn alignment_weight(&self, stage: usize) -> ParamId {
        self.stages[stage].align_w
    }

    pub fn patch_embedding_weight(&self) -> ParamId {
        self.patch_w
    }

    pub fn positional_encoding(&self) -> ParamId {
        self.pos
    }

    /// Stage-0 tokens: patch projection plus positional encodings.
    pub fn embed(&self, g: &mut Graph<'_>, input: &ModelInput) -> Result<Var> {
        if input.shape() != self.cfg.input_size {
            return Err(TagsError::ShapeMismatch(format!(
                "encoder expects input {:?}, got {:?}",
                self.cfg.input_size,
                input.shape()
            )));
        }
        let (_, patches) = patchify(input, self.cfg.patch_size)?;
        let x = g.input(patches);
        let t = g.linear(x, self.patch_w, Some(self.patch_b));
        let pos = g.param(self.pos);
        Ok(g.add(t, pos))
    }

    fn attention(&self, g: &mut Graph<'_>, blk: &Block, x: Var) -> Var {
        let c = self.cfg.embed_width;
        let heads = self.cfg.num_heads;
        let dh = c / heads;
        let qkv = g.linear(x, blk.qkv_w, Some(blk.qkv_b));
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = g.slice_cols(qkv, h * dh, dh);
            let k = g.slice_cols(qkv, c + h * dh, dh);
            let v = g.slice_cols(qkv, 2 * c + h * dh, dh);
            let scores = g.matmul_bt(q, k);
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, v));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        g.linear(cat, blk.proj_w, Some(blk.proj_b))
    }

    fn spatial_adapter(&self, g: &mut Graph<'_>, a: &SpatialAdapter, x: Var) -> Var {
        let h = g.linear(x, a.down_w, Some(a.down_b));
        let h = g.gelu(h);
        let h = g.im2col3(h, self.cfg.grid());
        let h = g.linear(h, a.conv_w, Some(a.conv_b));
        let h = g.gelu(h);
        g.linear(h, a.up_w, Some(a.up_b))
    }

    fn block(&self, g: &mut Graph<'_>, blk: &Block, x: Var) -> Var {
        let h = g.layer_norm(x, blk.norm1.0, blk.norm1.1);
        let a = self.attention(g, blk, h);
        let x = g.add(x, a);
        let h = g.layer_norm(x, blk.norm2.0, blk.norm2.1);
        let h = g.linear(h, blk.fc1_w, Some(blk.fc1_b));
        let h = g.gelu(h);
        let h = g.linear(h, blk.fc2_w, Some(blk.fc2_b));
        let x = g.add(x, h);
        let ad = self.spatial_adapter(g, &blk.adapter, x);
        g.add(x, ad)
    }

    /// Alignment adapter and residual on graph values (same arithmetic as
    /// [`apply_alignment_adapter`] and [`stage_residual`]).
    fn align(&self, g: &mut Graph<'_>, stage: usize, f: Var) -> (Var, Var) {
        let w = g.param(self.stages[stage].align_w);
        let z = g.matmul(f, w);
        let a = match self.cfg.alignment_activation {
            Activation::Gelu => g.gelu(z),
            Activation::Identity => z,
        };
        let la = g.scale(a, self.cfg.lambda);
        let lf = g.scale(f, 1.0 - self.cfg.lambda);
        (a, g.add(la, lf))
    }

    pub fn forward(&self, g: &mut Graph<'_>, input: &ModelInput) -> Result<EncoderVars> {
        let mut x = self.embed(g, input)?;
        let mut out = EncoderVars {
            grid: self.cfg.grid(),
            features: Vec::new(),
            adapter_outputs: Vec::new(),
            stage_outputs: Vec::new(),
        };
        for (s, stage) in self.stages.iter().enumerate() {
            for blk in &stage.blocks {
                x = self.block(g, blk, x);
            }
            g.ensure_finite(x, &format!("encoder stage {s} features"))?;
            let (a, f_prime) = self.align(g, s, x);
            out.features.push(x);
            out.adapter_outputs.push(a);
            out.stage_outputs.push(f_prime);
            x = f_prime;
        }
        Ok(out)
    }

    /// Value-level forward: `(F'_s, A_s(F_s))` for every stage.
    pub fn forward_values(&self, store: &ParamStore, input: &ModelInput) -> Result<(Vec<StageFeatures>, Vec<StageFeatures>)> {
        let mut g = Graph::new(store);
        let vars = self.forward(&mut g, input)?;
        let grab = |vs: &[Var]| {
            vs.iter()
                .map(|v| StageFeatures::new(vars.grid, g.value(*v).clone()))
                .collect::<Result<Vec<_>>>()
        };
        Ok((grab(&vars.stage_outputs)?, grab(&vars.adapter_outputs)?))
    }
}

/// Mean-preserving inflation of a 2D patch-embedding kernel
/// `[c_out, c_in, kh, kw]` to a 3D kernel of the given depth, laid out like
/// [`patchify`] rows: `[c_in * depth * kh * kw, c_out]`.
pub fn inflate_patch_kernel(kernel_2d: &Array4<f64>, depth: usize) -> Array2<f64> {
    let (c_out, c_in, kh, kw) = kernel_2d.dim();
    let mut out = Array2::zeros((c_in * depth * kh * kw, c_out));
    for o in 0..c_out {
        for ci in 0..c_in {
            for z in 0..depth {
                for y in 0..kh {
                    for x in 0..kw {
                        let row = ((ci * depth + z) * kh + y) * kw + x;
                        out[[row, o]] = kernel_2d[[o, ci, y, x]] / depth as f64;
                    }
                }
            }
        }
    }
    out
}

/// 3D positional encodings from a 2D `[h * w, c]` table plus a learned depth
/// table `[d, c]`: `pos[z, y, x] = pos2d[y, x] + depth[z]`.
pub fn inflate_positional(pos_2d: &Array2<f64>, depth_table: &Array2<f64>) -> Array2<f64> {
    let hw = pos_2d.nrows();
    let d = depth_table.nrows();
    let mut out = Array2::zeros((d * hw, pos_2d.ncols()));
    for z in 0..d {
        for i in 0..hw {
            let mut row = out.row_mut(z * hw + i);
            row.assign(&pos_2d.row(i));
            row += &depth_table.row(z);
        }
    }
    out
}
