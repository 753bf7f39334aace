//! Compact token U-Net: patch embedding, two resolution levels plus a
//! bottleneck, and one residual MLP, one self-attention and one text
//! cross-attention block per level. Skip connections join encoder and decoder
//! levels of equal resolution.
//!
//! Activations are row-stacked token matrices (`batch * tokens x width`).
//! Linear layers store their weight as `in x out` and compute `x * W`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hypernet::{apply_offsets, OffsetBundle};
use crate::schedule::NoiseSchedule;
use crate::tape::{AttentionLayout, Matrix, Tape, Var};
use crate::text::PromptEncoding;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub text_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch: 2,
            width: 64,
            heads: 4,
            text_dim: 32,
            mlp_ratio: 2,
        }
    }
}

impl UNetConfig {
    /// Smallest configuration with the full topology; used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            channels: 3,
            patch: 2,
            width: 8,
            heads: 2,
            text_dim: 6,
            mlp_ratio: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.image_size / self.patch.max(1);
        if self.patch == 0 || self.image_size % self.patch != 0 || grid % 4 != 0 || grid == 0 {
            return Err(Error::Config(format!(
                "image size {} with patch {} must give a token grid divisible by 4",
                self.image_size, self.patch
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.width % 2 != 0 || self.text_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("width must be even; text_dim and mlp_ratio positive".into()));
        }
        Ok(())
    }

    /// Flattened size of one image (`H * W * C`).
    pub fn image_dim(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Token grid side at `level` (0 = finest).
    pub fn grid(&self, level: usize) -> usize {
        (self.image_size / self.patch) >> level
    }

    pub fn tokens(&self, level: usize) -> usize {
        self.grid(level) * self.grid(level)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Partition {
    Encoder,
    Bottleneck,
    Decoder,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Encoder => "encoder",
            Partition::Bottleneck => "bottleneck",
            Partition::Decoder => "decoder",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Query,
    Key,
    Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    SelfAttention,
    CrossAttention,
}

/// An addressable attention projection matrix. `id` is the parameter name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionSite {
    pub id: String,
    pub partition: Partition,
    pub role: Role,
    pub kind: AttentionKind,
    pub dim_r: usize,
    pub dim_c: usize,
}

/// Blocks in forward order with their partition tag and level.
pub const BLOCKS: [(&str, Partition, usize); 5] = [
    ("enc0", Partition::Encoder, 0),
    ("enc1", Partition::Encoder, 1),
    ("mid", Partition::Bottleneck, 2),
    ("dec1", Partition::Decoder, 1),
    ("dec0", Partition::Decoder, 0),
];

/// Named parameter arrays with a content fingerprint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.params.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Matrix> {
        self.params.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|m| m.len()).sum()
    }

    /// Feeds names, shapes and exact bit patterns into `hasher`.
    pub fn hash_into(&self, hasher: &mut Sha256) {
        for (name, m) in &self.params {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update((m.nrows() as u64).to_le_bytes());
            hasher.update((m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        self.hash_into(&mut h);
        hex::encode(h.finalize())
    }
}

/// Tape handles for every parameter of one forward pass.
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    /// Replaces the handle used for `name`, e.g. with an offset-adjusted weight.
    pub fn set(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Conditioning rows for a batch: one prompt encoding per sample, row-stacked.
pub struct CondBatch {
    pub rows: Matrix,
    pub offsets: Arc<[usize]>,
}

impl CondBatch {
    pub fn new(prompts: &[&PromptEncoding]) -> Result<Self> {
        let dim = prompts.first().map(|p| p.embeddings.ncols()).unwrap_or(0);
        let mut offsets = vec![0usize];
        for p in prompts {
            if p.embeddings.ncols() != dim {
                return Err(Error::ShapeMismatch("prompt encodings differ in width".into()));
            }
            if p.is_empty() {
                return Err(Error::Parameter("empty prompt".into()));
            }
            offsets.push(offsets.last().unwrap() + p.len());
        }
        let views: Vec<_> = prompts.iter().map(|p| p.embeddings.view()).collect();
        let rows = if views.is_empty() {
            Matrix::zeros((0, dim))
        } else {
            ndarray::concatenate(Axis(0), &views).expect("same width")
        };
        Ok(Self {
            rows,
            offsets: offsets.into(),
        })
    }

    pub fn batch(&self) -> usize {
        self.offsets.len() - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetModel {
    pub config: UNetConfig,
    pub params: ParamStore,
    sites: Vec<AttentionSite>,
}

impl UNetModel {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = config.width;
        let d = config.text_dim;
        let hidden = c * config.mlp_ratio;
        let mut dense = |params: &mut ParamStore, name: &str, rows: usize, cols: usize, gain: f64| {
            let std = gain / (rows as f64).sqrt();
            params.insert(
                name,
                Matrix::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal) * std),
            );
        };
        let zeros = |params: &mut ParamStore, name: &str, cols: usize| {
            params.insert(name, Matrix::zeros((1, cols)));
        };

        dense(&mut params, "patch.w", config.patch_dim(), c, 1.0);
        zeros(&mut params, "patch.b", c);
        dense(&mut params, "pos0", config.tokens(0), c, 0.1 * (config.tokens(0) as f64).sqrt());
        dense(&mut params, "time.w1", c, c, 1.0);
        zeros(&mut params, "time.b1", c);
        dense(&mut params, "time.w2", c, c, 1.0);
        zeros(&mut params, "time.b2", c);
        for (block, _, _) in BLOCKS {
            dense(&mut params, &format!("{block}.time.w"), c, c, 1.0);
            zeros(&mut params, &format!("{block}.time.b"), c);
            dense(&mut params, &format!("{block}.mlp.w1"), c, hidden, 1.0);
            zeros(&mut params, &format!("{block}.mlp.b1"), hidden);
            dense(&mut params, &format!("{block}.mlp.w2"), hidden, c, 0.5);
            zeros(&mut params, &format!("{block}.mlp.b2"), c);
            for role in ["q", "k", "v"] {
                dense(&mut params, &format!("{block}.self.{role}"), c, c, 1.0);
            }
            dense(&mut params, &format!("{block}.self.o"), c, c, 0.5);
            zeros(&mut params, &format!("{block}.self.ob"), c);
            dense(&mut params, &format!("{block}.cross.q"), c, c, 1.0);
            dense(&mut params, &format!("{block}.cross.k"), d, c, 1.0);
            dense(&mut params, &format!("{block}.cross.v"), d, c, 1.0);
            dense(&mut params, &format!("{block}.cross.o"), c, c, 0.5);
            zeros(&mut params, &format!("{block}.cross.ob"), c);
        }
        for lvl in 0..2 {
            dense(&mut params, &format!("down{lvl}.w"), 4 * c, c, 1.0);
            zeros(&mut params, &format!("down{lvl}.b"), c);
            dense(&mut params, &format!("up{lvl}.w"), c, 4 * c, 1.0);
            zeros(&mut params, &format!("up{lvl}.b"), 4 * c);
            dense(&mut params, &format!("skip{lvl}.w"), 2 * c, c, 1.0);
            zeros(&mut params, &format!("skip{lvl}.b"), c);
        }
        dense(&mut params, "out.w", c, config.patch_dim(), 0.2);
        zeros(&mut params, "out.b", config.patch_dim());
        Self::from_params(config, params)
    }

    /// Wraps an existing parameter store, checking every expected name and shape.
    pub fn from_params(config: UNetConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Self::expected_shapes(&config);
        for (name, shape) in &reference {
            match params.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
                Some(m) if m.dim() != *shape => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        m.dim()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = params.names().find(|n| !reference.contains_key(*n)) {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        let sites = Self::enumerate_sites(&config);
        Ok(Self {
            config,
            params,
            sites,
        })
    }

    fn expected_shapes(config: &UNetConfig) -> BTreeMap<String, (usize, usize)> {
        let c = config.width;
        let d = config.text_dim;
        let hidden = c * config.mlp_ratio;
        let mut m = BTreeMap::new();
        let mut put = |n: String, s: (usize, usize)| {
            m.insert(n, s);
        };
        put("patch.w".into(), (config.patch_dim(), c));
        put("patch.b".into(), (1, c));
        put("pos0".into(), (config.tokens(0), c));
        put("time.w1".into(), (c, c));
        put("time.b1".into(), (1, c));
        put("time.w2".into(), (c, c));
        put("time.b2".into(), (1, c));
        for (b, _, _) in BLOCKS {
            put(format!("{b}.time.w"), (c, c));
            put(format!("{b}.time.b"), (1, c));
            put(format!("{b}.mlp.w1"), (c, hidden));
            put(format!("{b}.mlp.b1"), (1, hidden));
            put(format!("{b}.mlp.w2"), (hidden, c));
            put(format!("{b}.mlp.b2"), (1, c));
            for r in ["q", "k", "v", "o"] {
                put(format!("{b}.self.{r}"), (c, c));
            }
            put(format!("{b}.self.ob"), (1, c));
            put(format!("{b}.cross.q"), (c, c));
            put(format!("{b}.cross.k"), (d, c));
            put(format!("{b}.cross.v"), (d, c));
            put(format!("{b}.cross.o"), (c, c));
            put(format!("{b}.cross.ob"), (1, c));
        }
        for l in 0..2 {
            put(format!("down{l}.w"), (4 * c, c));
            put(format!("down{l}.b"), (1, c));
            put(format!("up{l}.w"), (c, 4 * c));
            put(format!("up{l}.b"), (1, 4 * c));
            put(format!("skip{l}.w"), (2 * c, c));
            put(format!("skip{l}.b"), (1, c));
        }
        put("out.w".into(), (c, config.patch_dim()));
        put("out.b".into(), (1, config.patch_dim()));
        m
    }

    fn enumerate_sites(config: &UNetConfig) -> Vec<AttentionSite> {
        let c = config.width;
        let mut sites = Vec::new();
        for (block, partition, _) in BLOCKS {
            for (kind, tag) in [
                (AttentionKind::SelfAttention, "self"),
                (AttentionKind::CrossAttention, "cross"),
            ] {
                for (role, r) in [(Role::Query, "q"), (Role::Key, "k"), (Role::Value, "v")] {
                    let rows = if kind == AttentionKind::CrossAttention && role != Role::Query {
                        config.text_dim
                    } else {
                        c
                    };
                    sites.push(AttentionSite {
                        id: format!("{block}.{tag}.{r}"),
                        partition,
                        role,
                        kind,
                        dim_r: rows,
                        dim_c: c,
                    });
                }
            }
        }
        sites
    }

    pub fn sites(&self) -> &[AttentionSite] {
        &self.sites
    }

    pub fn site(&self, id: &str) -> Option<&AttentionSite> {
        self.sites.iter().find(|s| s.id == id)
    }

    pub fn sites_in(&self, partition: Partition) -> Vec<AttentionSite> {
        self.sites
            .iter()
            .filter(|s| s.partition == partition)
            .cloned()
            .collect()
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    /// Binds every parameter onto `tape`; names accepted by `trainable` become
    /// differentiable leaves, the rest constants.
    pub fn bind(&self, tape: &mut Tape, trainable: &dyn Fn(&str) -> bool) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|(name, m)| {
                let var = if trainable(name) {
                    tape.param(m.clone())
                } else {
                    tape.constant(m.clone())
                };
                (name.clone(), var)
            })
            .collect();
        Binding { vars }
    }

    /// Records the forward pass. `x_tokens` is the patchified noisy input
    /// (`batch * tokens0 x patch_dim`); the result has the same layout.
    pub fn forward(
        &self,
        tape: &mut Tape,
        w: &Binding,
        x_tokens: Var,
        timesteps: &[usize],
        cond: Var,
        cond_offsets: Arc<[usize]>,
    ) -> Var {
        let cfg = &self.config;
        let batch = timesteps.len();
        let n0 = cfg.tokens(0);
        debug_assert_eq!(tape.shape(x_tokens).0, batch * n0);

        let mut h = tape.matmul(x_tokens, w.get("patch.w"));
        h = tape.add_row(h, w.get("patch.b"));
        let pos_idx: Arc<[Option<usize>]> = (0..batch * n0).map(|i| Some(i % n0)).collect();
        let pos = tape.gather_rows(w.get("pos0"), pos_idx);
        h = tape.add(h, pos);

        let sinus = tape.constant(timestep_features(timesteps, cfg.width));
        let mut temb = tape.matmul(sinus, w.get("time.w1"));
        temb = tape.add_row(temb, w.get("time.b1"));
        temb = tape.silu(temb);
        temb = tape.matmul(temb, w.get("time.w2"));
        temb = tape.add_row(temb, w.get("time.b2"));
        let temb = tape.silu(temb);

        let ctx = BlockContext {
            temb,
            cond,
            cond_offsets,
            batch,
            heads: cfg.heads,
        };
        h = self.block(tape, w, "enc0", h, &ctx, n0);
        let skip0 = h;
        h = self.down(tape, w, 0, h, batch);
        h = self.block(tape, w, "enc1", h, &ctx, cfg.tokens(1));
        let skip1 = h;
        h = self.down(tape, w, 1, h, batch);
        h = self.block(tape, w, "mid", h, &ctx, cfg.tokens(2));
        h = self.up(tape, w, 1, h, skip1, batch);
        h = self.block(tape, w, "dec1", h, &ctx, cfg.tokens(1));
        h = self.up(tape, w, 0, h, skip0, batch);
        h = self.block(tape, w, "dec0", h, &ctx, n0);

        let n = tape.layer_norm(h);
        let out = tape.matmul(n, w.get("out.w"));
        tape.add_row(out, w.get("out.b"))
    }

    fn linear(&self, tape: &mut Tape, w: &Binding, x: Var, weight: &str, bias: &str) -> Var {
        let y = tape.matmul(x, w.get(weight));
        tape.add_row(y, w.get(bias))
    }

    fn block(&self, tape: &mut Tape, w: &Binding, name: &str, h: Var, ctx: &BlockContext, tokens: usize) -> Var {
        // residual MLP with time conditioning
        let tproj = self.linear(tape, w, ctx.temb, &format!("{name}.time.w"), &format!("{name}.time.b"));
        let mut n = tape.layer_norm(h);
        n = tape.add_blocks(n, tproj, tokens);
        let mut m = self.linear(tape, w, n, &format!("{name}.mlp.w1"), &format!("{name}.mlp.b1"));
        m = tape.silu(m);
        m = self.linear(tape, w, m, &format!("{name}.mlp.w2"), &format!("{name}.mlp.b2"));
        let h = tape.add(h, m);

        // self-attention
        let n = tape.layer_norm(h);
        let q = tape.matmul(n, w.get(&format!("{name}.self.q")));
        let k = tape.matmul(n, w.get(&format!("{name}.self.k")));
        let v = tape.matmul(n, w.get(&format!("{name}.self.v")));
        let layout = AttentionLayout::uniform(ctx.batch, tokens, tokens, ctx.heads);
        let a = tape.attention(q, k, v, layout);
        let o = self.linear(tape, w, a, &format!("{name}.self.o"), &format!("{name}.self.ob"));
        let h = tape.add(h, o);

        // cross-attention to the prompt
        let n = tape.layer_norm(h);
        let q = tape.matmul(n, w.get(&format!("{name}.cross.q")));
        let k = tape.matmul(ctx.cond, w.get(&format!("{name}.cross.k")));
        let v = tape.matmul(ctx.cond, w.get(&format!("{name}.cross.v")));
        let layout = AttentionLayout {
            query_offsets: (0..=ctx.batch).map(|i| i * tokens).collect(),
            kv_offsets: ctx.cond_offsets.clone(),
            heads: ctx.heads,
        };
        let a = tape.attention(q, k, v, layout);
        let o = self.linear(tape, w, a, &format!("{name}.cross.o"), &format!("{name}.cross.ob"));
        tape.add(h, o)
    }

    fn down(&self, tape: &mut Tape, w: &Binding, level: usize, h: Var, batch: usize) -> Var {
        let g = self.config.grid(level);
        let c = self.config.width;
        let (idx, shape) = merge_index(batch, g, c);
        let merged = tape.permute(h, idx, shape);
        self.linear(tape, w, merged, &format!("down{level}.w"), &format!("down{level}.b"))
    }

    fn up(&self, tape: &mut Tape, w: &Binding, level: usize, h: Var, skip: Var, batch: usize) -> Var {
        let g = self.config.grid(level);
        let c = self.config.width;
        let wide = self.linear(tape, w, h, &format!("up{level}.w"), &format!("up{level}.b"));
        let (idx, shape) = split_index(batch, g, c);
        let split = tape.permute(wide, idx, shape);
        let joined = tape.concat_cols(split, skip);
        self.linear(tape, w, joined, &format!("skip{level}.w"), &format!("skip{level}.b"))
    }

    /// Numeric noise prediction for a batch of noisy images (`batch x image_dim`,
    /// model space). Offsets, when given, are applied as `w + lambda * dw` on
    /// the fly; the stored weights are never modified.
    pub fn predict_noise(
        &self,
        x_t: &Matrix,
        timesteps: &[usize],
        cond: &[&PromptEncoding],
        offsets: Option<&OffsetBundle>,
        lambda: f64,
    ) -> Result<Matrix> {
        self.check_inputs(x_t, timesteps, cond)?;
        let weights = self.effective_weights(offsets, lambda)?;
        let mut tape = Tape::new();
        let mut binding = self.bind(&mut tape, &|_| false);
        for (id, m) in weights {
            let v = tape.constant(m);
            binding.set(&id, v);
        }
        let cond = CondBatch::new(cond)?;
        let xv = tape.constant(patchify(&self.config, x_t));
        let cv = tape.constant(cond.rows);
        let out = self.forward(&mut tape, &binding, xv, timesteps, cv, cond.offsets);
        Ok(unpatchify(&self.config, tape.value(out)))
    }

    /// `w + lambda * dw` for every site in `offsets`.
    pub fn effective_weights(
        &self,
        offsets: Option<&OffsetBundle>,
        lambda: f64,
    ) -> Result<Vec<(String, Matrix)>> {
        let Some(bundle) = offsets else {
            return Ok(Vec::new());
        };
        if !lambda.is_finite() {
            return Err(Error::Numeric(format!("lambda must be finite, got {lambda}")));
        }
        bundle
            .deltas
            .iter()
            .map(|(id, dw)| {
                let w = self
                    .params
                    .get(id)
                    .filter(|_| self.site(id).is_some())
                    .ok_or_else(|| Error::UnknownSite(id.clone()))?;
                Ok((id.clone(), apply_offsets(w, dw, lambda)?))
            })
            .collect()
    }

    pub(crate) fn check_inputs(&self, x_t: &Matrix, timesteps: &[usize], cond: &[&PromptEncoding]) -> Result<()> {
        let dim = self.config.image_dim();
        if x_t.ncols() != dim {
            return Err(Error::ShapeMismatch(format!(
                "input has {} values per image, model expects {dim}",
                x_t.ncols()
            )));
        }
        if x_t.nrows() != timesteps.len() || x_t.nrows() != cond.len() {
            return Err(Error::ShapeMismatch(format!(
                "batch of {} images with {} timesteps and {} prompts",
                x_t.nrows(),
                timesteps.len(),
                cond.len()
            )));
        }
        if x_t.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite value in noisy input".into()));
        }
        if let Some(p) = cond.iter().find(|p| p.embeddings.ncols() != self.config.text_dim) {
            return Err(Error::ShapeMismatch(format!(
                "prompt width {} vs model text width {}",
                p.embeddings.ncols(),
                self.config.text_dim
            )));
        }
        Ok(())
    }
}

struct BlockContext {
    temb: Var,
    cond: Var,
    cond_offsets: Arc<[usize]>,
    batch: usize,
    heads: usize,
}

/// Mean-square noise-prediction error on `x_t = add_noise(x0, t, eps)`.
#[allow(clippy::too_many_arguments)]
pub fn denoising_loss(
    model: &UNetModel,
    schedule: &NoiseSchedule,
    x0: &Matrix,
    timesteps: &[usize],
    eps: &Matrix,
    cond: &[&PromptEncoding],
    offsets: Option<&OffsetBundle>,
    lambda: f64,
) -> Result<f64> {
    let x_t = noisy_batch(schedule, x0, timesteps, eps)?;
    let pred = model.predict_noise(&x_t, timesteps, cond, offsets, lambda)?;
    Ok(mean_square_error(&pred, eps))
}

pub fn mean_square_error(pred: &Matrix, target: &Matrix) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter()
        .zip(target.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n
}

/// Row-wise forward noising of a batch.
pub fn noisy_batch(schedule: &NoiseSchedule, x0: &Matrix, timesteps: &[usize], eps: &Matrix) -> Result<Matrix> {
    if x0.dim() != eps.dim() {
        return Err(Error::ShapeMismatch(format!("x0 {:?} vs eps {:?}", x0.dim(), eps.dim())));
    }
    if timesteps.len() != x0.nrows() {
        return Err(Error::ShapeMismatch("one timestep per row expected".into()));
    }
    let mut out = Matrix::zeros(x0.dim());
    for (i, &t) in timesteps.iter().enumerate() {
        let row = schedule.add_noise(&x0.row(i), t, &eps.row(i))?;
        out.row_mut(i).assign(&row);
    }
    Ok(out)
}

/// Sinusoidal timestep features, `batch x dim`.
pub fn timestep_features(timesteps: &[usize], dim: usize) -> Matrix {
    let half = dim / 2;
    Matrix::from_shape_fn((timesteps.len(), dim), |(b, i)| {
        let k = (i % half) as f64;
        let freq = (-(10_000f64.ln()) * k / half as f64).exp();
        let a = timesteps[b] as f64 * freq;
        if i < half {
            a.sin()
        } else {
            a.cos()
        }
    })
}

/// Flattened index map merging each 2x2 group of tokens into one row of `4 * c` columns.
fn merge_index(batch: usize, grid: usize, c: usize) -> (Arc<[usize]>, (usize, usize)) {
    let half = grid / 2;
    let rows = batch * half * half;
    let mut idx = Vec::with_capacity(rows * 4 * c);
    for b in 0..batch {
        for y in 0..half {
            for x in 0..half {
                for k in 0..4 {
                    let (dy, dx) = (k / 2, k % 2);
                    let src_row = b * grid * grid + (2 * y + dy) * grid + 2 * x + dx;
                    idx.extend((0..c).map(|ch| src_row * c + ch));
                }
            }
        }
    }
    (idx.into(), (rows, 4 * c))
}

/// Inverse of [`merge_index`] onto a `grid x grid` token layout.
fn split_index(batch: usize, grid: usize, c: usize) -> (Arc<[usize]>, (usize, usize)) {
    let half = grid / 2;
    let rows = batch * grid * grid;
    let mut idx = Vec::with_capacity(rows * c);
    for b in 0..batch {
        for y in 0..grid {
            for x in 0..grid {
                let src_row = b * half * half + (y / 2) * half + x / 2;
                let k = (y % 2) * 2 + x % 2;
                idx.extend((0..c).map(|ch| src_row * 4 * c + k * c + ch));
            }
        }
    }
    (idx.into(), (rows, c))
}

/// `batch x (H*W*C)` images to `batch * tokens x patch_dim` patch rows.
pub fn patchify(cfg: &UNetConfig, images: &Matrix) -> Matrix {
    let (p, g, ch, side) = (cfg.patch, cfg.grid(0), cfg.channels, cfg.image_size);
    let batch = images.nrows();
    let mut out = Matrix::zeros((batch * g * g, cfg.patch_dim()));
    for b in 0..batch {
        for py in 0..g {
            for px in 0..g {
                let row = b * g * g + py * g + px;
                let mut col = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        let base = ((py * p + dy) * side + px * p + dx) * ch;
                        for c in 0..ch {
                            out[[row, col]] = images[[b, base + c]];
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn unpatchify(cfg: &UNetConfig, tokens: &Matrix) -> Matrix {
    let (p, g, ch, side) = (cfg.patch, cfg.grid(0), cfg.channels, cfg.image_size);
    let batch = tokens.nrows() / (g * g);
    let mut out = Matrix::zeros((batch, cfg.image_dim()));
    for b in 0..batch {
        for py in 0..g {
            for px in 0..g {
                let row = b * g * g + py * g + px;
                let mut col = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        let base = ((py * p + dy) * side + px * p + dx) * ch;
                        for c in 0..ch {
                            out[[b, base + c]] = tokens[[row, col]];
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{TextEncoder, TextEncoderConfig, Vocabulary};

    fn tiny_setup() -> (UNetModel, TextEncoder) {
        let cfg = UNetConfig::tiny();
        let text = TextEncoder::new(
            Vocabulary::standard(),
            TextEncoderConfig {
                dim: cfg.text_dim,
                max_len: 24,
            },
            3,
        );
        (UNetModel::new(cfg, 11).unwrap(), text)
    }

    fn random_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn patchify_round_trips() {
        let cfg = UNetConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_batch(&mut rng, 2, cfg.image_dim());
        assert_eq!(unpatchify(&cfg, &patchify(&cfg, &x)), x);
    }

    #[test]
    fn merge_and_split_are_inverse() {
        let (idx_m, shape_m) = merge_index(2, 4, 3);
        let (idx_s, shape_s) = split_index(2, 4, 3);
        assert_eq!(shape_m, (8, 12));
        assert_eq!(shape_s, (32, 3));
        for (i, &j) in idx_s.iter().enumerate() {
            assert_eq!(idx_m[j], i);
        }
    }

    #[test]
    fn sites_cover_partitions_exactly_once() {
        let (model, _) = tiny_setup();
        let sites = model.sites();
        assert_eq!(sites.len(), 30);
        let mut ids: Vec<_> = sites.iter().map(|s| s.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 30);
        for s in sites {
            assert_eq!(model.params.get(&s.id).unwrap().dim(), (s.dim_r, s.dim_c));
        }
        assert_eq!(model.sites_in(Partition::Encoder).len(), 12);
        assert_eq!(model.sites_in(Partition::Decoder).len(), 12);
        assert_eq!(model.sites_in(Partition::Bottleneck).len(), 6);
    }

    #[test]
    fn predict_noise_shapes_and_errors() {
        let (model, text) = tiny_setup();
        let p = text.encode("a red star").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_batch(&mut rng, 2, model.config.image_dim());
        let out = model.predict_noise(&x, &[3, 9], &[&p, &p], None, 0.0).unwrap();
        assert_eq!(out.dim(), x.dim());
        assert!(out.iter().all(|v| v.is_finite()));

        let mut bad = x.clone();
        bad[[1, 4]] = f64::NAN;
        assert!(matches!(model.predict_noise(&bad, &[3, 9], &[&p, &p], None, 0.0), Err(Error::Numeric(_))));
        let narrow = random_batch(&mut rng, 2, 5);
        assert!(matches!(model.predict_noise(&narrow, &[3, 9], &[&p, &p], None, 0.0), Err(Error::ShapeMismatch(_))));

        let mut bundle = OffsetBundle::empty(Partition::Encoder);
        bundle.deltas.insert("nonexistent.q".into(), Matrix::zeros((2, 2)));
        assert!(matches!(
            model.predict_noise(&x, &[3, 9], &[&p, &p], Some(&bundle), 1.0),
            Err(Error::UnknownSite(_))
        ));
    }

    #[test]
    fn batched_prediction_equals_per_sample_prediction() {
        let (model, text) = tiny_setup();
        let p1 = text.encode("a red star").unwrap();
        let p2 = text.encode("a thing in the shape of circle in the style of flat").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_batch(&mut rng, 2, model.config.image_dim());
        let both = model.predict_noise(&x, &[5, 17], &[&p1, &p2], None, 0.0).unwrap();
        let a = model.predict_noise(&x.slice(ndarray::s![0..1, ..]).to_owned(), &[5], &[&p1], None, 0.0).unwrap();
        let b = model.predict_noise(&x.slice(ndarray::s![1..2, ..]).to_owned(), &[17], &[&p2], None, 0.0).unwrap();
        for (u, v) in both.row(0).iter().zip(a.row(0).iter()) {
            assert!((u - v).abs() < 1e-12);
        }
        for (u, v) in both.row(1).iter().zip(b.row(0).iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_arithmetic() {
        let pred = Matrix::from_elem((2, 3), 1.5);
        let eps = Matrix::from_elem((2, 3), 0.5);
        assert_eq!(mean_square_error(&pred, &eps), 1.0);
        assert_eq!(mean_square_error(&eps, &eps), 0.0);
    }

    #[test]
    fn from_params_rejects_mismatches() {
        let (model, _) = tiny_setup();
        let mut p = model.params.clone();
        p.insert("enc0.self.q", Matrix::zeros((3, 3)));
        assert!(matches!(UNetModel::from_params(model.config.clone(), p), Err(Error::Checkpoint(_))));
        let mut p = model.params.clone();
        p.insert("extra", Matrix::zeros((1, 1)));
        assert!(UNetModel::from_params(model.config.clone(), p).is_err());
    }

    #[test]
    fn full_backprop_matches_finite_differences() {
        // All base parameters trainable on the tiny model; spot-check a few entries each.
        let (model, text) = tiny_setup();
        let cfg = model.config.clone();
        let p = text.encode("a dotted thing in the shape of cross").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_batch(&mut rng, 1, cfg.image_dim());
        let eps = random_batch(&mut rng, 1, cfg.image_dim());
        let eps_tokens = patchify(&cfg, &eps);
        let cond = CondBatch::new(&[&p]).unwrap();
        let loss_of = |m: &UNetModel| {
            let mut tape = Tape::new();
            let b = m.bind(&mut tape, &|_| false);
            let xv = tape.constant(patchify(&cfg, &x));
            let cv = tape.constant(cond.rows.clone());
            let out = m.forward(&mut tape, &b, xv, &[7], cv, cond.offsets.clone());
            let l = tape.mean_square(out, eps_tokens.clone());
            tape.scalar(l)
        };
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, &|_| true);
        let xv = tape.constant(patchify(&cfg, &x));
        let cv = tape.constant(cond.rows.clone());
        let out = model.forward(&mut tape, &b, xv, &[7], cv, cond.offsets.clone());
        let l = tape.mean_square(out, eps_tokens.clone());
        let grads = tape.backward(l);
        for (name, var) in b.iter() {
            let g = grads.get_or_zeros(*var, tape.shape(*var));
            let shape = g.dim();
            for k in 0..3.min(g.len()) {
                let idx = (k * 7919) % g.len();
                let (r, c) = (idx / shape.1, idx % shape.1);
                let h = 1e-5;
                let mut plus = model.clone();
                plus.params.get_mut(name).unwrap()[[r, c]] += h;
                let mut minus = model.clone();
                minus.params.get_mut(name).unwrap()[[r, c]] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let an = g[[r, c]];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-4 || (fd - an).abs() < 1e-9, "{name}[{r},{c}]: fd {fd} vs {an}");
            }
        }
    }
}
