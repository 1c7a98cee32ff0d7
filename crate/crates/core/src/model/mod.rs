//! The profiling network: a gradient encoder built from two difference
//! convolution branches and a residual extractor, a transformer encoder block,
//! a feature projection and a linear classifier head.

mod checkpoint;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Rng, Scalar, Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};

// ── configuration ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhenoNetConfig {
    pub in_channels: usize,
    pub image_size: usize,
    /// Output channels of each difference-convolution branch.
    pub branch_channels: usize,
    /// Width of the 1×1 fusion MLP; `None` means `in_channels * 8`.
    pub mlp_hidden: Option<usize>,
    /// Channel width of the residual extractor.
    pub residual_width: usize,
    /// Number of basic residual blocks.
    pub residual_depth: usize,
    pub feat_dim: usize,
    pub num_heads: usize,
    /// Attention sequence length obtained by splitting each feature vector
    /// into equal tokens; `None` means `num_heads * 4`.
    pub attn_tokens: Option<usize>,
    pub ffn_hidden: usize,
    pub out_dim: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub bn_eps: f64,
    pub ln_eps: f64,
    /// Weight of the newest batch in the running batch-norm statistics.
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for PhenoNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 5,
            image_size: 32,
            branch_channels: 8,
            mlp_hidden: None,
            residual_width: 32,
            residual_depth: 2,
            feat_dim: 128,
            num_heads: 2,
            attn_tokens: None,
            ffn_hidden: 256,
            out_dim: 32,
            num_classes: 1,
            dropout: 0.1,
            theta1: 0.7,
            theta2: 0.3,
            bn_eps: 1e-5,
            ln_eps: 1e-5,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

impl PhenoNetConfig {
    /// Full-size dimensions: 448-pixel inputs, 2048 latent features and a
    /// 672-dimensional embedding.
    pub fn full_scale(num_classes: usize) -> Self {
        Self {
            image_size: 448,
            branch_channels: 16,
            residual_width: 256,
            residual_depth: 4,
            feat_dim: 2048,
            num_heads: 8,
            attn_tokens: Some(32),
            ffn_hidden: 2048,
            out_dim: 672,
            num_classes,
            ..Self::default()
        }
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_hidden.unwrap_or(self.in_channels * 8)
    }

    pub fn attn_tokens(&self) -> usize {
        self.attn_tokens.unwrap_or(self.num_heads * 4)
    }

    pub fn token_dim(&self) -> usize {
        self.feat_dim / self.attn_tokens()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("in_channels", self.in_channels),
            ("image_size", self.image_size),
            ("branch_channels", self.branch_channels),
            ("mlp_hidden", self.mlp_hidden()),
            ("residual_width", self.residual_width),
            ("feat_dim", self.feat_dim),
            ("num_heads", self.num_heads),
            ("attn_tokens", self.attn_tokens()),
            ("ffn_hidden", self.ffn_hidden),
            ("out_dim", self.out_dim),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout must lie in [0,1), got {}", self.dropout)));
        }
        for (name, t) in [("theta1", self.theta1), ("theta2", self.theta2)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0,1], got {t}")));
            }
        }
        if !(self.bn_eps > 0.0 && self.ln_eps > 0.0) {
            return Err(Error::InvalidArgument("normalization eps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::InvalidArgument(format!("bn_momentum must lie in [0,1], got {}", self.bn_momentum)));
        }
        if !self.feat_dim.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidArgument(format!(
                "num_heads {} does not divide feat_dim {}",
                self.num_heads, self.feat_dim
            )));
        }
        let tokens = self.attn_tokens();
        if !self.feat_dim.is_multiple_of(tokens) || !self.token_dim().is_multiple_of(self.num_heads) {
            return Err(Error::InvalidArgument(format!(
                "feat_dim {} cannot be split into {tokens} tokens of {} heads",
                self.feat_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Forward-pass mode. Training draws dropout masks from the supplied
/// generator and normalizes with batch statistics.
pub enum Mode<'a> {
    Train(&'a mut Rng),
    Eval,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

// ── parameter layout ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    Kaiming {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Debug, Clone, Copy)]
struct BnIdx {
    gain: usize,
    bias: usize,
    /// Index of the layer's running statistics.
    slot: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    conv_a: usize,
    bn_a: BnIdx,
    conv_b: usize,
    bn_b: BnIdx,
}

#[derive(Debug, Clone)]
struct Layout {
    dg: usize,
    sg: usize,
    bn_dg: BnIdx,
    bn_sg: BnIdx,
    mlp_w: usize,
    mlp_b: usize,
    bn_mlp: BnIdx,
    stem: usize,
    bn_stem: BnIdx,
    blocks: Vec<BlockIdx>,
    feat_w: usize,
    feat_b: usize,
    attn: [usize; 8],
    ln1: [usize; 2],
    ffn: [usize; 4],
    ln2: [usize; 2],
    proj: [usize; 4],
    ln3: [usize; 2],
    head: [usize; 2],
    bn_names: Vec<String>,
}

#[derive(Default)]
struct Builder {
    specs: Vec<Spec>,
    bn_names: Vec<String>,
}

impl Builder {
    fn add(&mut self, name: &str, shape: &[usize], init: Init) -> usize {
        self.specs.push(Spec { name: name.to_string(), shape: shape.to_vec(), init });
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize) -> usize {
        self.add(name, &[out, inp, k, k], Init::Kaiming { fan_in: inp * k * k })
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) -> [usize; 2] {
        let w = self.add(&format!("{name}.weight"), &[out, inp], Init::Kaiming { fan_in: inp });
        let b = self.add(&format!("{name}.bias"), &[out], Init::Zeros);
        [w, b]
    }

    fn norm(&mut self, name: &str, dim: usize) -> [usize; 2] {
        [self.add(&format!("{name}.gain"), &[dim], Init::Ones), self.add(&format!("{name}.bias"), &[dim], Init::Zeros)]
    }

    fn bn(&mut self, name: &str, channels: usize) -> BnIdx {
        let [gain, bias] = self.norm(name, channels);
        self.bn_names.push(name.to_string());
        BnIdx { gain, bias, slot: self.bn_names.len() - 1 }
    }
}

fn layout(cfg: &PhenoNetConfig) -> (Layout, Vec<Spec>) {
    let mut b = Builder::default();
    let (c, bc, hid, rw, k) = (cfg.in_channels, cfg.branch_channels, cfg.mlp_hidden(), cfg.residual_width, 3);
    let dg = b.conv("encoder.dg.weight", bc, c, k);
    let bn_dg = b.bn("encoder.dg.bn", bc);
    let sg = b.conv("encoder.sg.weight", bc, c, k);
    let bn_sg = b.bn("encoder.sg.bn", bc);
    let mlp_w = b.conv("encoder.mlp.weight", hid, 2 * bc, 1);
    let mlp_b = b.add("encoder.mlp.bias", &[hid], Init::Zeros);
    let bn_mlp = b.bn("encoder.mlp.bn", hid);
    let stem = b.conv("encoder.stem.weight", rw, hid, k);
    let bn_stem = b.bn("encoder.stem.bn", rw);
    let blocks = (0..cfg.residual_depth)
        .map(|i| BlockIdx {
            conv_a: b.conv(&format!("encoder.block{i}.conv_a.weight"), rw, rw, k),
            bn_a: b.bn(&format!("encoder.block{i}.bn_a"), rw),
            conv_b: b.conv(&format!("encoder.block{i}.conv_b.weight"), rw, rw, k),
            bn_b: b.bn(&format!("encoder.block{i}.bn_b"), rw),
        })
        .collect();
    let [feat_w, feat_b] = b.linear("encoder.feat", cfg.feat_dim, rw);
    let e = cfg.token_dim();
    let [qw, qb] = b.linear("transformer.query", e, e);
    let [kw, kb] = b.linear("transformer.key", e, e);
    let [vw, vb] = b.linear("transformer.value", e, e);
    let [ow, ob] = b.linear("transformer.out", e, e);
    let ln1 = b.norm("transformer.ln1", cfg.feat_dim);
    let [w1, b1] = b.linear("transformer.ffn1", cfg.ffn_hidden, cfg.feat_dim);
    let [w2, b2] = b.linear("transformer.ffn2", cfg.feat_dim, cfg.ffn_hidden);
    let ln2 = b.norm("transformer.ln2", cfg.feat_dim);
    let [w3, b3] = b.linear("projection.w3", cfg.out_dim, cfg.feat_dim);
    let [w4, b4] = b.linear("projection.w4", cfg.out_dim, cfg.out_dim);
    let ln3 = b.norm("projection.ln", cfg.out_dim);
    let head = b.linear("head", cfg.num_classes, cfg.out_dim);
    let lay = Layout {
        dg,
        sg,
        bn_dg,
        bn_sg,
        mlp_w,
        mlp_b,
        bn_mlp,
        stem,
        bn_stem,
        blocks,
        feat_w,
        feat_b,
        attn: [qw, qb, kw, kb, vw, vb, ow, ob],
        ln1,
        ffn: [w1, b1, w2, b2],
        ln2,
        proj: [w3, b3, w4, b4],
        ln3,
        head,
        bn_names: b.bn_names,
    };
    (lay, b.specs)
}

// ── network ──────────────────────────────────────────────────────────────

/// Running mean and variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

/// Intermediate results of a forward pass.
pub struct ForwardOut {
    pub h2: Var,
    pub h6: Var,
    pub z_hat: Var,
    pub logits: Var,
    /// Batch statistics of every batch-norm layer in training mode, in layer
    /// order; empty in evaluation mode.
    pub bn_stats: Vec<BatchStats>,
}

/// Parameters bound to a tape for one forward pass, in the order of
/// [`PhenoNet::param_names`].
#[derive(Debug, Clone)]
pub struct Bound(pub Vec<Var>);

#[derive(Debug, Clone)]
pub struct PhenoNet<T> {
    config: PhenoNetConfig,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    running: Vec<RunningStats<T>>,
    stats_ready: bool,
}

impl<T: Scalar> PhenoNet<T> {
    /// Build a freshly initialized network from `config.seed`.
    pub fn new(config: PhenoNetConfig) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = layout(&config);
        let mut rng = Rng::new(config.seed);
        let params = specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::Kaiming { fan_in } => {
                        let bound = (6.0 / fan_in as f64).sqrt();
                        (0..n).map(|_| T::from_f64(rng.uniform_range(-bound, bound))).collect()
                    }
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                };
                Tensor::new(s.shape.clone(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        let running = layout
            .bn_names
            .iter()
            .map(|name| {
                let c = params[specs.iter().position(|s| s.name == format!("{name}.gain")).unwrap()].numel();
                RunningStats { mean: Tensor::zeros(&[c]), var: Tensor::ones(&[c]) }
            })
            .collect();
        let names = specs.into_iter().map(|s| s.name).collect();
        Ok(Self { config, layout, names, params, running, stats_ready: false })
    }

    pub fn config(&self) -> &PhenoNetConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    /// Look up a parameter by name.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    /// Replace a parameter by name; the shape must match.
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if value.shape() != self.params[i].shape() {
            return Err(Error::shape(
                "set_param",
                format!("{name}: {:?} vs {:?}", value.shape(), self.params[i].shape()),
            ));
        }
        self.params[i] = value;
        Ok(())
    }

    pub fn bn_names(&self) -> &[String] {
        &self.layout.bn_names
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    /// Whether the running batch-norm statistics have been estimated.
    pub fn stats_ready(&self) -> bool {
        self.stats_ready
    }

    /// Install running statistics directly, e.g. from a checkpoint.
    pub fn set_running_stats(&mut self, running: Vec<RunningStats<T>>, ready: bool) -> Result<()> {
        if running.len() != self.running.len()
            || running
                .iter()
                .zip(&self.running)
                .any(|(a, b)| a.mean.shape() != b.mean.shape() || a.var.shape() != b.var.shape())
        {
            return Err(Error::shape("set_running_stats", "layer count or channel mismatch"));
        }
        if running.iter().any(|r| r.var.data().iter().any(|v| *v <= T::zero())) {
            return Err(Error::Invariant("running variance must be positive".into()));
        }
        self.running = running;
        self.stats_ready = ready;
        Ok(())
    }

    /// Total number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Fold one training batch's statistics into the running estimates.
    /// Variances enter with the unbiased correction `n/(n−1)`.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        if stats.len() != self.running.len() {
            return Err(Error::shape(
                "update_running_stats",
                format!("{} vs {} layers", stats.len(), self.running.len()),
            ));
        }
        let m = self.config.bn_momentum;
        for (run, s) in self.running.iter_mut().zip(stats) {
            let corr = if s.count > 1 { s.count as f64 / (s.count - 1) as f64 } else { 1.0 };
            let blend = |old: &Tensor<T>, new: &[f64], scale: f64, floor: f64| -> Result<Tensor<T>> {
                let data = old
                    .data()
                    .iter()
                    .zip(new)
                    .map(|(o, n)| T::from_f64(((1.0 - m) * o.as_f64() + m * n * scale).max(floor)))
                    .collect();
                old.with_data(data)
            };
            run.mean = blend(&run.mean, &s.mean, 1.0, f64::NEG_INFINITY)?;
            run.var = blend(&run.var, &s.var, corr, f64::MIN_POSITIVE)?;
        }
        self.stats_ready = true;
        Ok(())
    }

    /// Convert every tensor to another scalar type.
    pub fn cast<U: Scalar>(&self) -> PhenoNet<U> {
        PhenoNet {
            config: self.config.clone(),
            layout: self.layout.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            running: self.running.iter().map(|r| RunningStats { mean: r.mean.cast(), var: r.var.cast() }).collect(),
            stats_ready: self.stats_ready,
        }
    }

    /// Record every parameter on `tape`, as differentiable leaves when
    /// `trainable` is set and as constants otherwise.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| if trainable { tape.leaf(p.clone()) } else { tape.constant(p.clone()) })
                .collect(),
        )
    }

    // ── components ───────────────────────────────────────────────────────

    fn batch_norm(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        p: &Bound,
        idx: BnIdx,
        mode: &Mode<'_>,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let (g, b) = (p.0[idx.gain], p.0[idx.bias]);
        if mode.is_train() {
            let (y, s) = tape.batch_norm2d(x, g, b, self.config.bn_eps)?;
            stats.push(s);
            Ok(y)
        } else {
            let run = &self.running[idx.slot];
            tape.batch_norm2d_eval(x, g, b, run.mean.data(), run.var.data(), self.config.bn_eps)
        }
    }

    fn dropout(&self, tape: &mut Tape<T>, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        match mode {
            Mode::Train(rng) => tape.dropout(x, self.config.dropout, rng),
            Mode::Eval => Ok(x),
        }
    }

    fn check_eval_ready(&self, mode: &Mode<'_>) -> Result<()> {
        if !mode.is_train() && !self.stats_ready {
            return Err(Error::Invariant(
                "evaluation requested before batch-norm running statistics were estimated".into(),
            ));
        }
        Ok(())
    }

    /// The two difference-convolution branches `BN(ReLU(DC(x, θ)))` with
    /// θ1 and θ2 respectively.
    pub fn branches(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        p: &Bound,
        mode: &mut Mode<'_>,
        stats: &mut Vec<BatchStats>,
    ) -> Result<(Var, Var)> {
        let (cfg, l) = (&self.config, &self.layout);
        let dg = tape.diff_conv2d(x, p.0[l.dg], cfg.theta1, 1, 1)?;
        let dg = tape.relu(dg)?;
        let dg = self.batch_norm(tape, dg, p, l.bn_dg, mode, stats)?;
        let sg = tape.diff_conv2d(x, p.0[l.sg], cfg.theta2, 1, 1)?;
        let sg = tape.relu(sg)?;
        let sg = self.batch_norm(tape, sg, p, l.bn_sg, mode, stats)?;
        Ok((dg, sg))
    }

    /// Gradient encoder: `x [B,C,S,S]` to `H2 [B, feat_dim]`. Batch-norm
    /// statistics of training mode are appended to `stats`.
    pub fn gradient_encoder_forward(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        p: &Bound,
        mode: &mut Mode<'_>,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != cfg.in_channels || shape[2] != cfg.image_size || shape[3] != cfg.image_size {
            return Err(Error::shape(
                "gradient_encoder",
                format!("expected [B,{},{s},{s}], got {shape:?}", cfg.in_channels, s = cfg.image_size),
            ));
        }
        self.check_eval_ready(mode)?;
        let l = &self.layout;
        let (dg, sg) = self.branches(tape, x, p, mode, stats)?;
        let fused = tape.concat(&[dg, sg], 1)?;
        let h = tape.conv2d(fused, p.0[l.mlp_w], 1, 0)?;
        let h = tape.add_channel_bias(h, p.0[l.mlp_b])?;
        let h = tape.relu(h)?;
        let h1 = self.batch_norm(tape, h, p, l.bn_mlp, mode, stats)?;

        let r = tape.conv2d(h1, p.0[l.stem], 2, 1)?;
        let r = self.batch_norm(tape, r, p, l.bn_stem, mode, stats)?;
        let mut r = tape.relu(r)?;
        for blk in &l.blocks {
            let a = tape.conv2d(r, p.0[blk.conv_a], 1, 1)?;
            let a = self.batch_norm(tape, a, p, blk.bn_a, mode, stats)?;
            let a = tape.relu(a)?;
            let b = tape.conv2d(a, p.0[blk.conv_b], 1, 1)?;
            let b = self.batch_norm(tape, b, p, blk.bn_b, mode, stats)?;
            let sum = tape.add(b, r)?;
            r = tape.relu(sum)?;
        }
        let pooled = tape.global_avg_pool(r)?;
        tape.linear(pooled, p.0[l.feat_w], p.0[l.feat_b])
    }

    /// Multi-head self-attention over the token view of `h2 [B, feat_dim]`.
    pub fn attention(&self, tape: &mut Tape<T>, h2: Var, p: &Bound) -> Result<Var> {
        let cfg = &self.config;
        let b = tape.shape(h2)[0];
        let (t, e, h) = (cfg.attn_tokens(), cfg.token_dim(), cfg.num_heads);
        let hd = e / h;
        let [qw, qb, kw, kb, vw, vb, ow, ob] = self.layout.attn.map(|i| p.0[i]);
        let tokens = tape.reshape(h2, &[b * t, e])?;
        let split = |tape: &mut Tape<T>, w: Var, bias: Var| -> Result<Var> {
            let y = tape.linear(tokens, w, bias)?;
            let y = tape.reshape(y, &[b, t, h, hd])?;
            let y = tape.permute(y, &[0, 2, 1, 3])?;
            tape.reshape(y, &[b * h, t, hd])
        };
        let q = split(tape, qw, qb)?;
        let k = split(tape, kw, kb)?;
        let v = split(tape, vw, vb)?;
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (hd as f64).sqrt())?;
        let weights = tape.softmax_last(scores)?;
        let ctx = tape.bmm(weights, v, false)?;
        let ctx = tape.reshape(ctx, &[b, h, t, hd])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b * t, e])?;
        let out = tape.linear(ctx, ow, ob)?;
        tape.reshape(out, &[b, cfg.feat_dim])
    }

    /// Transformer encoder block: `H2 [B,D]` to `H6 [B,D]`.
    pub fn transformer_forward(&self, tape: &mut Tape<T>, h2: Var, p: &Bound, mode: &mut Mode<'_>) -> Result<Var> {
        let cfg = &self.config;
        let shape = tape.shape(h2).to_vec();
        if shape.len() != 2 || shape[1] != cfg.feat_dim {
            return Err(Error::shape("transformer", format!("expected [B,{}], got {shape:?}", cfg.feat_dim)));
        }
        let h3 = self.attention(tape, h2, p)?;
        let h3 = self.dropout(tape, h3, mode)?;
        let r = tape.add(h2, h3)?;
        let h4 = tape.layer_norm(r, p.0[self.layout.ln1[0]], p.0[self.layout.ln1[1]], cfg.ln_eps)?;
        let [w1, b1, w2, b2] = self.layout.ffn.map(|i| p.0[i]);
        let f = tape.linear(h4, w1, b1)?;
        let f = tape.relu(f)?;
        let f = tape.linear(f, w2, b2)?;
        let h5 = tape.relu(f)?;
        let h5 = self.dropout(tape, h5, mode)?;
        let r = tape.add(h4, h5)?;
        tape.layer_norm(r, p.0[self.layout.ln2[0]], p.0[self.layout.ln2[1]], cfg.ln_eps)
    }

    /// Feature projection: `H6 [B,D]` to `Ẑ [B,out_dim]`.
    pub fn project(&self, tape: &mut Tape<T>, h6: Var, p: &Bound, mode: &mut Mode<'_>) -> Result<Var> {
        let cfg = &self.config;
        let shape = tape.shape(h6).to_vec();
        if shape.len() != 2 || shape[1] != cfg.feat_dim {
            return Err(Error::shape("project", format!("expected [B,{}], got {shape:?}", cfg.feat_dim)));
        }
        let [w3, b3, w4, b4] = self.layout.proj.map(|i| p.0[i]);
        let z1 = tape.linear(h6, w3, b3)?;
        let g = tape.gelu(z1)?;
        let z2 = tape.linear(g, w4, b4)?;
        let z2 = self.dropout(tape, z2, mode)?;
        let r = tape.add(z1, z2)?;
        tape.layer_norm(r, p.0[self.layout.ln3[0]], p.0[self.layout.ln3[1]], cfg.ln_eps)
    }

    /// Linear classifier head on `Ẑ`.
    pub fn classify(&self, tape: &mut Tape<T>, z_hat: Var, p: &Bound) -> Result<Var> {
        classify(tape, z_hat, p.0[self.layout.head[0]], p.0[self.layout.head[1]])
    }

    /// Full composition encoder → transformer → projection → head.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, p: &Bound, mode: &mut Mode<'_>) -> Result<ForwardOut> {
        if p.0.len() != self.params.len() {
            return Err(Error::shape(
                "forward",
                format!("{} bound parameters, expected {}", p.0.len(), self.params.len()),
            ));
        }
        let mut bn_stats = Vec::new();
        let h2 = self.gradient_encoder_forward(tape, x, p, mode, &mut bn_stats)?;
        let h6 = self.transformer_forward(tape, h2, p, mode)?;
        let z_hat = self.project(tape, h6, p, mode)?;
        let logits = self.classify(tape, z_hat, p)?;
        Ok(ForwardOut { h2, h6, z_hat, logits, bn_stats })
    }

    /// Evaluation-mode embeddings `Ẑ` of `images [N,C,S,S]`, computed in
    /// chunks of `batch_size` that run in parallel, each on its own tape.
    pub fn embed(&self, images: &Tensor<T>, batch_size: usize) -> Result<Tensor<T>> {
        let shape = images.shape();
        if shape.len() != 4 || batch_size == 0 {
            return Err(Error::shape("embed", format!("images {shape:?}, batch size {batch_size}")));
        }
        self.check_eval_ready(&Mode::Eval)?;
        let n = shape[0];
        let per: usize = shape[1..].iter().product();
        let chunks: Vec<_> = (0..n).step_by(batch_size).collect();
        let parts = chunks
            .par_iter()
            .map(|&start| {
                let end = (start + batch_size).min(n);
                let mut sub_shape = shape.to_vec();
                sub_shape[0] = end - start;
                let x = Tensor::new(sub_shape, images.data()[start * per..end * per].to_vec())?;
                let mut tape = Tape::new();
                let p = self.bind(&mut tape, false);
                let xv = tape.constant(x);
                let out = self.forward(&mut tape, xv, &p, &mut Mode::Eval)?;
                Ok(tape.value(out.z_hat).data().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(vec![n, self.config.out_dim], parts.concat())
    }
}

/// `logits = Ẑ·Wᵀ + b` with no activation.
pub fn classify<T: Scalar>(tape: &mut Tape<T>, z_hat: Var, weight: Var, bias: Var) -> Result<Var> {
    tape.linear(z_hat, weight, bias)
}
