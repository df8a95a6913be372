//! The conditional denoiser.
//!
//! Corrupted tokens are embedded (one table row per codebook × state,
//! `MASK` included), normalized with timestep-conditioned AdaLN, fused
//! with the condition features, and refined by a stack of blocks, each
//! FeedForward → bidirectional SSD scan → depthwise Conv → LayerNorm with
//! a residual around every sub-layer. The condition path embeds the
//! low-resolution tokens and enriches them with the CLS output of a small
//! transformer encoder. Output: per-position logits over the K real codes.

use std::collections::BTreeMap;

use rand::RngExt;

use super::graph::{Graph, Var};
use super::scan::ScanDims;
use super::tensor::Tensor;
use crate::d3pm::{Condition, Denoiser, DenoiserOutput, TokenGrid};
use crate::{rng, Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Denoiser hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoiserConfig {
    /// K, real codes per codebook.
    pub num_codes: usize,
    /// M_cb, codebooks per frame.
    pub codebooks: usize,
    /// T, diffusion steps the model will be queried with.
    pub num_steps: usize,
    pub layers: usize,
    pub feature_dim: usize,
    pub state_dim: usize,
    /// Causal conv kernel inside each scan direction.
    pub conv_width: usize,
    /// SSD head count; must divide `feature_dim`.
    pub heads: usize,
    /// Depthwise conv width of the block Conv sub-layer (odd).
    pub block_conv_width: usize,
    pub ffn_mult: usize,
    /// Half-step FeedForward residual (0.5 · FFN(x) + x) when set.
    pub half_step_ffn: bool,
    /// Transformer-encoder layers in the condition path.
    pub cond_layers: usize,
    /// Sinusoidal positional encodings in the condition path.
    pub cond_positional: bool,
}

impl DenoiserConfig {
    /// Full-size configuration (10 × 512).
    pub fn new(num_codes: usize, codebooks: usize, num_steps: usize) -> Self {
        Self {
            num_codes,
            codebooks,
            num_steps,
            layers: 10,
            feature_dim: 512,
            state_dim: 16,
            conv_width: 4,
            heads: 8,
            block_conv_width: 5,
            ffn_mult: 2,
            half_step_ffn: true,
            cond_layers: 2,
            cond_positional: true,
        }
    }

    /// Small configuration for tests and laptop-scale runs.
    pub fn desk_scale(num_codes: usize, codebooks: usize, num_steps: usize) -> Self {
        Self {
            layers: 2,
            feature_dim: 32,
            state_dim: 16,
            heads: 2,
            ..Self::new(num_codes, codebooks, num_steps)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.heads == 0 || !self.feature_dim.is_multiple_of(self.heads)
        {
            return Err(Error::Model(format!(
                "feature_dim {} must be a positive multiple of heads {}",
                self.feature_dim, self.heads
            )));
        }
        if self.block_conv_width.is_multiple_of(2) {
            return Err(Error::Model("block_conv_width must be odd".into()));
        }
        if self.num_codes < 2 || self.codebooks == 0 || self.layers == 0 || self.num_steps == 0 {
            return Err(Error::Model("degenerate model dimensions".into()));
        }
        if self.conv_width == 0 || self.state_dim == 0 || self.ffn_mult == 0 {
            return Err(Error::Model("degenerate model dimensions".into()));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.feature_dim / self.heads
    }
}

/// AdaLN primitive: `scale ⊙ LayerNorm(x) + shift` with `scale`/`shift`
/// broadcast over rows.
pub fn adaln_modulate(g: &mut Graph, x: Var, scale: Var, shift: Var) -> Var {
    let normed = g.layer_norm(x, LAYER_NORM_EPS);
    let scaled = g.mul(normed, scale);
    g.add(scaled, shift)
}

/// Single-head softmax attention core: `softmax(QKᵀ/√d) V Wo`.
fn attention_core(g: &mut Graph, x: Var, wq: Var, wk: Var, wv: Var, wo: Var) -> Var {
    let d = g.value(x).cols();
    let q = g.matmul(x, wq);
    let k = g.matmul(x, wk);
    let v = g.matmul(x, wv);
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt);
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = g.softmax(scaled);
    let mixed = g.matmul(attn, v);
    g.matmul(mixed, wo)
}

/// Sinusoidal embedding of a scalar position, shape `(1, dim)`.
fn sinusoid(pos: f64, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    let half = dim / 2;
    for i in 0..half {
        let freq = (10_000f64).powf(-(2.0 * i as f64) / dim as f64);
        out[2 * i] = (pos * freq).sin();
        out[2 * i + 1] = (pos * freq).cos();
    }
    out
}

/// The trainable denoiser: a configuration plus named parameters.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    params: BTreeMap<String, Tensor>,
}

/// One graph leaf per parameter name, no matter how often it is used.
struct ParamCtx<'m> {
    params: &'m BTreeMap<String, Tensor>,
    vars: BTreeMap<String, Var>,
}

impl<'m> ParamCtx<'m> {
    fn new(params: &'m BTreeMap<String, Tensor>) -> Self {
        Self {
            params,
            vars: BTreeMap::new(),
        }
    }

    fn get(&mut self, g: &mut Graph, name: &str) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        let t = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone();
        let v = g.param(name, t);
        self.vars.insert(name.to_string(), v);
        v
    }
}

impl DenoiserModel {
    /// Deterministic seeded initialization.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "model-init", 0);
        let d = config.feature_dim;
        let k1 = config.num_codes + 1;
        let m = config.codebooks;
        let n = config.state_dim;
        let h = config.heads;
        let f = config.ffn_mult * d;
        let mut p = BTreeMap::new();

        let mat = |p: &mut BTreeMap<String, Tensor>,
                   rng: &mut rand_chacha::ChaCha8Rng,
                   name: &str,
                   rows: usize,
                   cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            p.insert(
                name.to_string(),
                Tensor::uniform(&[rows, cols], -limit, limit, rng),
            );
        };
        let zeros = |p: &mut BTreeMap<String, Tensor>, name: &str, shape: &[usize]| {
            p.insert(name.to_string(), Tensor::zeros(shape));
        };
        let ones = |p: &mut BTreeMap<String, Tensor>, name: &str, len: usize| {
            p.insert(name.to_string(), Tensor::full(&[len], 1.0));
        };

        p.insert(
            "embed.xt".to_string(),
            Tensor::uniform(&[k1 * m, d], -0.1, 0.1, &mut rng),
        );
        p.insert(
            "embed.cond".to_string(),
            Tensor::uniform(&[k1 * m, d], -0.1, 0.1, &mut rng),
        );
        p.insert(
            "cond.cls".to_string(),
            Tensor::uniform(&[1, d], -0.1, 0.1, &mut rng),
        );
        for l in 0..config.cond_layers {
            let pre = format!("cond.l{l}");
            ones(&mut p, &format!("{pre}.ln1.g"), d);
            zeros(&mut p, &format!("{pre}.ln1.b"), &[d]);
            mat(&mut p, &mut rng, &format!("{pre}.wq"), d, d);
            mat(&mut p, &mut rng, &format!("{pre}.wk"), d, d);
            mat(&mut p, &mut rng, &format!("{pre}.wv"), d, d);
            mat(&mut p, &mut rng, &format!("{pre}.wo"), d, d);
            ones(&mut p, &format!("{pre}.ln2.g"), d);
            zeros(&mut p, &format!("{pre}.ln2.b"), &[d]);
            mat(&mut p, &mut rng, &format!("{pre}.ffn.w1"), d, f);
            zeros(&mut p, &format!("{pre}.ffn.b1"), &[f]);
            mat(&mut p, &mut rng, &format!("{pre}.ffn.w2"), f, d);
            zeros(&mut p, &format!("{pre}.ffn.b2"), &[d]);
        }
        mat(&mut p, &mut rng, "t.w1", d, d);
        zeros(&mut p, "t.b1", &[d]);
        mat(&mut p, &mut rng, "t.w2", d, d);
        zeros(&mut p, "t.b2", &[d]);
        // Zero AdaLN projection: scale starts at exactly 1, shift at 0.
        zeros(&mut p, "ada.wa", &[d, d]);
        zeros(&mut p, "ada.ba", &[d]);
        zeros(&mut p, "ada.wb", &[d, d]);
        zeros(&mut p, "ada.bb", &[d]);
        mat(&mut p, &mut rng, "cond.proj.w", 2 * d, d);
        zeros(&mut p, "cond.proj.b", &[d]);
        for b in 0..config.layers {
            let pre = format!("blk{b}");
            mat(&mut p, &mut rng, &format!("{pre}.ffn.w1"), d, f);
            zeros(&mut p, &format!("{pre}.ffn.b1"), &[f]);
            mat(&mut p, &mut rng, &format!("{pre}.ffn.w2"), f, d);
            zeros(&mut p, &format!("{pre}.ffn.b2"), &[d]);
            for dir in ["fwd", "bwd"] {
                let dp = format!("{pre}.{dir}");
                mat(&mut p, &mut rng, &format!("{dp}.wx"), d, d);
                mat(&mut p, &mut rng, &format!("{dp}.wz"), d, d);
                mat(&mut p, &mut rng, &format!("{dp}.wb"), d, n);
                mat(&mut p, &mut rng, &format!("{dp}.wc"), d, n);
                mat(&mut p, &mut rng, &format!("{dp}.wdt"), d, h);
                let climit = 1.0 / (config.conv_width as f64).sqrt();
                p.insert(
                    format!("{dp}.convx.w"),
                    Tensor::uniform(&[d, config.conv_width], -climit, climit, &mut rng),
                );
                zeros(&mut p, &format!("{dp}.convx.b"), &[d]);
                p.insert(
                    format!("{dp}.convb.w"),
                    Tensor::uniform(&[n, config.conv_width], -climit, climit, &mut rng),
                );
                zeros(&mut p, &format!("{dp}.convb.b"), &[n]);
                p.insert(
                    format!("{dp}.convc.w"),
                    Tensor::uniform(&[n, config.conv_width], -climit, climit, &mut rng),
                );
                zeros(&mut p, &format!("{dp}.convc.b"), &[n]);
                // softplus(dt_bias) log-uniform in [1e-3, 0.1].
                let dt_bias: Vec<f64> = (0..h)
                    .map(|_| {
                        let dt = (rng.random_range((1e-3f64).ln()..(0.1f64).ln())).exp();
                        (dt.exp_m1()).ln()
                    })
                    .collect();
                p.insert(format!("{dp}.dt_bias"), Tensor::new(vec![h], dt_bias));
                let a_log: Vec<f64> = (0..h)
                    .map(|_| rng.random_range(1.0f64..16.0).ln())
                    .collect();
                p.insert(format!("{dp}.a_log"), Tensor::new(vec![h], a_log));
                ones(&mut p, &format!("{dp}.d_skip"), d);
                mat(&mut p, &mut rng, &format!("{dp}.out.w"), d, d);
                zeros(&mut p, &format!("{dp}.out.b"), &[d]);
            }
            let climit = 1.0 / (config.block_conv_width as f64).sqrt();
            p.insert(
                format!("{pre}.conv.w"),
                Tensor::uniform(&[d, config.block_conv_width], -climit, climit, &mut rng),
            );
            zeros(&mut p, &format!("{pre}.conv.b"), &[d]);
            ones(&mut p, &format!("{pre}.ln.g"), d);
            zeros(&mut p, &format!("{pre}.ln.b"), &[d]);
        }
        mat(&mut p, &mut rng, "head.w", d, m * config.num_codes);
        zeros(&mut p, "head.b", &[m * config.num_codes]);

        Ok(Self { config, params: p })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    /// Replace parameters wholesale (checkpoint restore). Shapes must match.
    pub fn set_params(&mut self, params: BTreeMap<String, Tensor>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Model(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (name, t) in &params {
            match self.params.get(name) {
                Some(cur) if cur.shape() == t.shape() => {}
                Some(cur) => {
                    return Err(Error::Model(format!(
                        "parameter {name}: shape {:?} != {:?}",
                        t.shape(),
                        cur.shape()
                    )))
                }
                None => return Err(Error::Model(format!("unexpected parameter {name}"))),
            }
        }
        self.params = params;
        Ok(())
    }

    fn linear(&self, g: &mut Graph, ctx: &mut ParamCtx, x: Var, w: &str, b: &str) -> Var {
        let wv = ctx.get(g, w);
        let bv = ctx.get(g, b);
        let xw = g.matmul(x, wv);
        g.add(xw, bv)
    }

    fn ffn(&self, g: &mut Graph, ctx: &mut ParamCtx, x: Var, prefix: &str) -> Var {
        let h = self.linear(g, ctx, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"));
        let h = g.silu(h);
        self.linear(g, ctx, h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    fn ln_affine(&self, g: &mut Graph, ctx: &mut ParamCtx, x: Var, gain: &str, bias: &str) -> Var {
        let normed = g.layer_norm(x, LAYER_NORM_EPS);
        let gv = ctx.get(g, gain);
        let bv = ctx.get(g, bias);
        let scaled = g.mul(normed, gv);
        g.add(scaled, bv)
    }

    /// One scan direction: project, causal-conv, selective SSD scan, gate.
    fn mamba_dir(&self, g: &mut Graph, ctx: &mut ParamCtx, x: Var, prefix: &str) -> Var {
        let cfg = &self.config;
        let frames = g.value(x).rows();
        let (d, h, pp, n) = (cfg.feature_dim, cfg.heads, cfg.head_dim(), cfg.state_dim);
        let wx = ctx.get(g, &format!("{prefix}.wx"));
        let wz = ctx.get(g, &format!("{prefix}.wz"));
        let wb = ctx.get(g, &format!("{prefix}.wb"));
        let wc = ctx.get(g, &format!("{prefix}.wc"));
        let wdt = ctx.get(g, &format!("{prefix}.wdt"));
        let xp = g.matmul(x, wx);
        let z = g.matmul(x, wz);
        let bp = g.matmul(x, wb);
        let cp = g.matmul(x, wc);
        let dt_raw = g.matmul(x, wdt);

        let pad = cfg.conv_width - 1;
        let conv = |g: &mut Graph, ctx: &mut ParamCtx, v: Var, tag: &str| {
            let w = ctx.get(g, &format!("{prefix}.{tag}.w"));
            let b = ctx.get(g, &format!("{prefix}.{tag}.b"));
            let c = g.conv1d_depthwise(v, w, pad);
            let c = g.add(c, b);
            g.silu(c)
        };
        let xp = conv(g, ctx, xp, "convx");
        let bp = conv(g, ctx, bp, "convb");
        let cp = conv(g, ctx, cp, "convc");

        let dt_bias = ctx.get(g, &format!("{prefix}.dt_bias"));
        let dt_shift = g.add(dt_raw, dt_bias);
        let dt = g.softplus(dt_shift); // (F, H)
        let a_log = ctx.get(g, &format!("{prefix}.a_log"));
        let a_exp = g.exp(a_log);
        let a_neg = g.neg(a_exp);
        let dt_a = g.mul(dt, a_neg); // row-broadcast (H)
        let decay = g.exp(dt_a); // (F, H) in (0, 1)

        // Scale the scan input by dt (per head).
        let xs = g.reshape(xp, vec![frames * h, pp]);
        let dt_col = g.reshape(dt, vec![frames * h, 1]);
        let xs = g.mul(xs, dt_col);
        let xs = g.reshape(xs, vec![frames, h, pp]);
        let b3 = g.reshape(bp, vec![frames, 1, n]);
        let c3 = g.reshape(cp, vec![frames, 1, n]);
        let dims = ScanDims {
            len: frames,
            heads: h,
            head_dim: pp,
            state_dim: n,
            groups: 1,
        };
        let y = g.ssd_scan(xs, decay, b3, c3, dims);
        let y = g.reshape(y, vec![frames, d]);
        let d_skip = ctx.get(g, &format!("{prefix}.d_skip"));
        let skip = g.mul(xp, d_skip);
        let y = g.add(y, skip);
        let gate = g.silu(z);
        let y = g.mul(y, gate);
        self.linear(
            g,
            ctx,
            y,
            &format!("{prefix}.out.w"),
            &format!("{prefix}.out.b"),
        )
    }

    /// Forward scan plus a scan over the reversed sequence, summed.
    fn bi_mamba(&self, g: &mut Graph, ctx: &mut ParamCtx, x: Var, block: usize) -> Var {
        let fwd = self.mamba_dir(g, ctx, x, &format!("blk{block}.fwd"));
        let xr = g.reverse_rows(x);
        let bwd_r = self.mamba_dir(g, ctx, xr, &format!("blk{block}.bwd"));
        let bwd = g.reverse_rows(bwd_r);
        g.add(fwd, bwd)
    }

    /// FeedForward → Bi-scan → Conv → LayerNorm, residual around each.
    /// Sub-layers read a pre-normalized copy of the stream, which keeps
    /// activations bounded without breaking the zero-weights identity.
    fn block(&self, g: &mut Graph, ctx: &mut ParamCtx, x: Var, idx: usize) -> Var {
        let cfg = &self.config;
        let xn = g.layer_norm(x, LAYER_NORM_EPS);
        let ffn = self.ffn(g, ctx, xn, &format!("blk{idx}.ffn"));
        let ffn = if cfg.half_step_ffn {
            g.scale(ffn, 0.5)
        } else {
            ffn
        };
        let x1 = g.add(x, ffn);
        let x1n = g.layer_norm(x1, LAYER_NORM_EPS);
        let mamba = self.bi_mamba(g, ctx, x1n, idx);
        let x2 = g.add(x1, mamba);
        let x2n = g.layer_norm(x2, LAYER_NORM_EPS);
        let cw = ctx.get(g, &format!("blk{idx}.conv.w"));
        let cb = ctx.get(g, &format!("blk{idx}.conv.b"));
        let conv = g.conv1d_depthwise(x2n, cw, (cfg.block_conv_width - 1) / 2);
        let conv = g.add(conv, cb);
        let x3 = g.add(x2, conv);
        let ln = self.ln_affine(
            g,
            ctx,
            x3,
            &format!("blk{idx}.ln.g"),
            &format!("blk{idx}.ln.b"),
        );
        g.add(x3, ln)
    }

    /// Summed per-codebook embeddings of a grid. `table` rows are indexed
    /// `codebook · (K+1) + code`.
    fn embed_grid(&self, g: &mut Graph, ctx: &mut ParamCtx, grid: &TokenGrid, table: &str) -> Var {
        let k1 = self.config.num_codes + 1;
        let tv = ctx.get(g, table);
        let mut acc: Option<Var> = None;
        for m in 0..self.config.codebooks {
            let idx: Vec<usize> = (0..grid.frames())
                .map(|fr| m * k1 + grid.get(fr, m) as usize)
                .collect();
            let rows = g.gather(tv, idx);
            acc = Some(match acc {
                None => rows,
                Some(a) => g.add(a, rows),
            });
        }
        acc.expect("at least one codebook")
    }

    /// Condition-path graph: embeddings, CLS token, transformer encoder,
    /// CLS output broadcast back onto the token features.
    fn condition_graph(&self, g: &mut Graph, ctx: &mut ParamCtx, cond: &TokenGrid) -> Var {
        let cfg = &self.config;
        let d = cfg.feature_dim;
        let frames = cond.frames();
        let tok = self.embed_grid(g, ctx, cond, "embed.cond");
        let cls = ctx.get(g, "cond.cls");
        let mut seq = g.concat_rows(cls, tok);
        if cfg.cond_positional {
            let mut pe = Vec::with_capacity((frames + 1) * d);
            for pos in 0..=frames {
                pe.extend(sinusoid(pos as f64, d));
            }
            let pe = g.constant(Tensor::new(vec![frames + 1, d], pe));
            seq = g.add(seq, pe);
        }
        for l in 0..cfg.cond_layers {
            let pre = format!("cond.l{l}");
            let normed = self.ln_affine(
                g,
                ctx,
                seq,
                &format!("{pre}.ln1.g"),
                &format!("{pre}.ln1.b"),
            );
            let wq = ctx.get(g, &format!("{pre}.wq"));
            let wk = ctx.get(g, &format!("{pre}.wk"));
            let wv = ctx.get(g, &format!("{pre}.wv"));
            let wo = ctx.get(g, &format!("{pre}.wo"));
            let attn = attention_core(g, normed, wq, wk, wv, wo);
            seq = g.add(seq, attn);
            let normed = self.ln_affine(
                g,
                ctx,
                seq,
                &format!("{pre}.ln2.g"),
                &format!("{pre}.ln2.b"),
            );
            let ffn = self.ffn(g, ctx, normed, &format!("{pre}.ffn"));
            seq = g.add(seq, ffn);
        }
        let cls_out = g.slice_rows(seq, 0, 1);
        let cls_row = g.reshape(cls_out, vec![d]);
        let toks = g.slice_rows(seq, 1, frames + 1);
        g.add(toks, cls_row)
    }

    /// Denoiser-path graph from a corrupted grid, timestep and condition
    /// features (a `(F, d)` var), producing `(F, M·K)` logits.
    fn logits_graph(
        &self,
        g: &mut Graph,
        ctx: &mut ParamCtx,
        x_t: &TokenGrid,
        t: usize,
        cond_feat: Var,
    ) -> Var {
        let cfg = &self.config;
        let d = cfg.feature_dim;
        let tok = self.embed_grid(g, ctx, x_t, "embed.xt");
        let t_sin = g.constant(Tensor::new(vec![1, d], sinusoid(t as f64, d)));
        let t1 = self.linear(g, ctx, t_sin, "t.w1", "t.b1");
        let t1 = g.silu(t1);
        let t_emb = self.linear(g, ctx, t1, "t.w2", "t.b2");
        let a_raw = self.linear(g, ctx, t_emb, "ada.wa", "ada.ba");
        let b_raw = self.linear(g, ctx, t_emb, "ada.wb", "ada.bb");
        let a_one = g.add_scalar(a_raw, 1.0);
        let a = g.reshape(a_one, vec![d]);
        let b = g.reshape(b_raw, vec![d]);
        let h = adaln_modulate(g, tok, a, b);
        let hc = g.concat_last(h, cond_feat);
        let mut h = self.linear(g, ctx, hc, "cond.proj.w", "cond.proj.b");
        for idx in 0..cfg.layers {
            h = self.block(g, ctx, h, idx);
        }
        self.linear(g, ctx, h, "head.w", "head.b")
    }

    fn check_grid(&self, grid: &TokenGrid, what: &str) -> Result<()> {
        if grid.num_codes() != self.config.num_codes || grid.codebooks() != self.config.codebooks {
            return Err(Error::Model(format!(
                "{what} grid {}x{} (K={}) does not match model (M_cb={}, K={})",
                grid.frames(),
                grid.codebooks(),
                grid.num_codes(),
                self.config.codebooks,
                self.config.num_codes
            )));
        }
        Ok(())
    }

    /// Run the condition path and snapshot the features.
    pub fn prepare_condition(&self, cond: &TokenGrid) -> Result<Condition> {
        self.check_grid(cond, "condition")?;
        if !cond.is_clean() {
            return Err(Error::Model("condition tokens contain MASK".into()));
        }
        if cond.frames() == 0 {
            return Err(Error::Model("empty condition sequence".into()));
        }
        let mut g = Graph::new();
        let mut ctx = ParamCtx::new(&self.params);
        let out = self.condition_graph(&mut g, &mut ctx, cond);
        let v = g.value(out);
        Condition::new(cond.frames(), self.config.feature_dim, v.data().to_vec())
    }

    /// Graph-level forward used by training; returns the logits var.
    pub fn training_graph(
        &self,
        g: &mut Graph,
        x_t: &TokenGrid,
        t: usize,
        cond: &TokenGrid,
    ) -> Result<Var> {
        self.check_grid(x_t, "x_t")?;
        self.check_grid(cond, "condition")?;
        self.check_t(t)?;
        let mut ctx = ParamCtx::new(&self.params);
        let cond_feat = self.condition_graph(g, &mut ctx, cond);
        Ok(self.logits_graph(g, &mut ctx, x_t, t, cond_feat))
    }

    /// Like [`training_graph`](Self::training_graph) but reusing
    /// pre-registered graph leaves for the named parameters, so callers
    /// (e.g. gradient checkers) can differentiate with respect to vars
    /// they own. Names absent from `bound` fall back to the model's own
    /// parameters.
    pub fn training_graph_bound(
        &self,
        g: &mut Graph,
        x_t: &TokenGrid,
        t: usize,
        cond: &TokenGrid,
        bound: &BTreeMap<String, Var>,
    ) -> Result<Var> {
        self.check_grid(x_t, "x_t")?;
        self.check_grid(cond, "condition")?;
        self.check_t(t)?;
        let mut ctx = ParamCtx {
            params: &self.params,
            vars: bound.clone(),
        };
        let cond_feat = self.condition_graph(g, &mut ctx, cond);
        Ok(self.logits_graph(g, &mut ctx, x_t, t, cond_feat))
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.config.num_steps {
            return Err(Error::Model(format!(
                "timestep {t} out of range 1..={}",
                self.config.num_steps
            )));
        }
        Ok(())
    }
}

impl Denoiser for DenoiserModel {
    fn denoise(&self, x_t: &TokenGrid, t: usize, cond: &Condition) -> Result<DenoiserOutput> {
        self.check_grid(x_t, "x_t")?;
        self.check_t(t)?;
        if cond.frames() != x_t.frames() {
            return Err(Error::Shape(format!(
                "condition frames {} != grid frames {}",
                cond.frames(),
                x_t.frames()
            )));
        }
        if cond.dim() != self.config.feature_dim {
            return Err(Error::Shape(format!(
                "condition dim {} != feature_dim {}",
                cond.dim(),
                self.config.feature_dim
            )));
        }
        let mut g = Graph::new();
        let mut ctx = ParamCtx::new(&self.params);
        let cond_feat = g.constant(Tensor::new(
            vec![cond.frames(), cond.dim()],
            cond.features().to_vec(),
        ));
        let logits = self.logits_graph(&mut g, &mut ctx, x_t, t, cond_feat);
        let v = g.value(logits);
        if v.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite denoiser logits".into()));
        }
        DenoiserOutput::new(
            x_t.frames(),
            self.config.codebooks,
            self.config.num_codes,
            v.data().to_vec(),
        )
    }
}
