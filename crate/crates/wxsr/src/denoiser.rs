//! The ε-predicting U-Net: ResNet blocks with self-attention and skip
//! connections, conditioned by channel concatenation at the input and (for
//! the resdiff variants) wavelet-guided cross-attention at the bottleneck.
//!
//! The noise level is injected as a sinusoidal embedding of `100·(−ln ᾱ_t)`
//! fed through a two-layer MLP and added per ResNet block. The final output
//! projection is zero-initialized so a freshly built model predicts ε̂ ≡ 0.

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha20Rng;
use std::collections::{BTreeMap, BTreeSet};

use crate::dwt_attention::{cross_attend, hf_guidance, CrossAttnWeights};
use crate::error::{Result, WxError};
use crate::nn::{
    conv2d, dropout, group_norm, norm_groups, self_attention, sinusoidal_embedding, Init,
    ParamStore, ParamView, SelfAttnWeights,
};

/// Model variants compared by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Sr3,
    Resdiff,
    ResdiffPhysics,
}

impl Variant {
    pub fn uses_freq_split(&self) -> bool {
        matches!(self, Variant::Resdiff)
    }

    pub fn uses_physics(&self) -> bool {
        matches!(self, Variant::ResdiffPhysics)
    }

    /// The resdiff variants diffuse the HR−bicubic residual and add the
    /// bicubic image back after sampling.
    pub fn is_residual(&self) -> bool {
        !matches!(self, Variant::Sr3)
    }

    pub fn uses_cross_attention(&self) -> bool {
        self.is_residual()
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Sr3 => "sr3",
            Variant::Resdiff => "resdiff",
            Variant::ResdiffPhysics => "resdiff_physics",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Variant {
    type Err = WxError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sr3" => Ok(Variant::Sr3),
            "resdiff" => Ok(Variant::Resdiff),
            "resdiff_physics" => Ok(Variant::ResdiffPhysics),
            other => Err(WxError::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// Architecture configuration of the denoiser.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DenoiserConfig {
    pub variant: Variant,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub resnet_blocks_per_level: usize,
    pub dropout: f64,
    /// Level indices (0 = finest) that get self-attention after each block.
    pub attention_levels: BTreeSet<usize>,
    /// Heads of the bottleneck cross-attention (resdiff variants).
    pub cross_attention_heads: usize,
}

impl DenoiserConfig {
    /// Defaults mirroring the full-scale setup: 64 base channels, four
    /// levels, two blocks per level, self-attention at the two coarsest.
    pub fn default_for(variant: Variant) -> Self {
        DenoiserConfig {
            variant,
            base_channels: 64,
            channel_mults: vec![1, 2, 4, 8],
            resnet_blocks_per_level: 2,
            dropout: 0.2,
            attention_levels: BTreeSet::from([2, 3]),
            cross_attention_heads: 4,
        }
    }

    /// Input channels: interpolated+noisy for sr3, five maps otherwise.
    pub fn conditioning_channels(&self) -> usize {
        match self.variant {
            Variant::Sr3 => 2,
            Variant::Resdiff | Variant::ResdiffPhysics => 5,
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn time_embed_dim(&self) -> usize {
        4 * self.base_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.base_channels % 2 != 0 {
            return Err(WxError::Config(format!(
                "base_channels must be positive and even, got {}",
                self.base_channels
            )));
        }
        if self.channel_mults.is_empty() || self.channel_mults.iter().any(|&m| m == 0) {
            return Err(WxError::Config("channel_mults must be positive".into()));
        }
        if self.resnet_blocks_per_level == 0 {
            return Err(WxError::Config("need at least one block per level".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(WxError::Config(format!(
                "dropout must be in [0,1), got {}",
                self.dropout
            )));
        }
        if let Some(&l) = self.attention_levels.iter().max() {
            if l >= self.levels() {
                return Err(WxError::Config(format!(
                    "attention level {l} out of range for {} levels",
                    self.levels()
                )));
            }
        }
        if self.cross_attention_heads == 0 {
            return Err(WxError::Config("cross_attention_heads must be >= 1".into()));
        }
        let c_mid = self.base_channels * self.channel_mults.last().unwrap();
        if c_mid % self.cross_attention_heads != 0 {
            return Err(WxError::Config(format!(
                "bottleneck channels {c_mid} not divisible by {} heads",
                self.cross_attention_heads
            )));
        }
        Ok(())
    }
}

/// Conditioning inputs for one forward pass.
pub struct Conditioning {
    /// `[batch, conditioning_channels, h, w]` channel stack.
    pub channels: Tensor,
    /// `[batch, 3, h/2, w/2]` DWT high-frequency subbands of the
    /// interpolated image (resdiff variants only).
    pub guidance: Option<Tensor>,
}

fn chans(cfg: &DenoiserConfig) -> Vec<usize> {
    cfg.channel_mults
        .iter()
        .map(|m| cfg.base_channels * m)
        .collect()
}

fn register_linear(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize) -> Result<()> {
    store.register(
        &format!("{prefix}.w"),
        &[c_out, c_in],
        Init::ScaledNormal { fan_in: c_in, scale: 1.0 },
    )?;
    store.register(&format!("{prefix}.b"), &[c_out], Init::Zeros)
}

fn register_conv(
    store: &mut ParamStore,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
) -> Result<()> {
    store.register(
        &format!("{prefix}.w"),
        &[c_out, c_in, k, k],
        Init::ScaledNormal { fan_in: c_in * k * k, scale: 1.0 },
    )?;
    store.register(&format!("{prefix}.b"), &[c_out], Init::Zeros)
}

fn register_norm(store: &mut ParamStore, prefix: &str, c: usize) -> Result<()> {
    store.register(&format!("{prefix}.g"), &[c], Init::Ones)?;
    store.register(&format!("{prefix}.b"), &[c], Init::Zeros)
}

fn register_resblock(
    store: &mut ParamStore,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    tdim: usize,
) -> Result<()> {
    register_norm(store, &format!("{prefix}.norm1"), c_in)?;
    register_conv(store, &format!("{prefix}.conv1"), c_in, c_out, 3)?;
    register_linear(store, &format!("{prefix}.temb"), tdim, c_out)?;
    register_norm(store, &format!("{prefix}.norm2"), c_out)?;
    register_conv(store, &format!("{prefix}.conv2"), c_out, c_out, 3)?;
    if c_in != c_out {
        register_conv(store, &format!("{prefix}.skip"), c_in, c_out, 1)?;
    }
    Ok(())
}

fn register_self_attn(store: &mut ParamStore, prefix: &str, c: usize) -> Result<()> {
    register_norm(store, &format!("{prefix}.norm"), c)?;
    for name in ["wq", "wk", "wv", "wo"] {
        store.register(
            &format!("{prefix}.{name}"),
            &[c, c],
            Init::ScaledNormal { fan_in: c, scale: 1.0 },
        )?;
    }
    for name in ["bq", "bk", "bv", "bo"] {
        store.register(&format!("{prefix}.{name}"), &[c], Init::Zeros)?;
    }
    Ok(())
}

fn register_cross_attn(store: &mut ParamStore, prefix: &str, c: usize) -> Result<()> {
    store.register(
        &format!("{prefix}.hfproj.w"),
        &[1, 3, 1, 1],
        Init::ScaledNormal { fan_in: 3, scale: 1.0 },
    )?;
    store.register(&format!("{prefix}.hfproj.b"), &[1], Init::Zeros)?;
    store.register(
        &format!("{prefix}.wq"),
        &[c, c],
        Init::ScaledNormal { fan_in: c, scale: 1.0 },
    )?;
    store.register(
        &format!("{prefix}.wk"),
        &[c, 1],
        Init::ScaledNormal { fan_in: 1, scale: 1.0 },
    )?;
    store.register(
        &format!("{prefix}.wv"),
        &[c, 1],
        Init::ScaledNormal { fan_in: 1, scale: 1.0 },
    )?;
    store.register(
        &format!("{prefix}.wo"),
        &[c, c],
        Init::ScaledNormal { fan_in: c, scale: 1.0 },
    )?;
    for name in ["bq", "bk", "bv", "bo"] {
        store.register(&format!("{prefix}.{name}"), &[c], Init::Zeros)?;
    }
    Ok(())
}

/// Register every parameter of the architecture into `store`.
fn register_unet(cfg: &DenoiserConfig, store: &mut ParamStore) -> Result<()> {
    let ch = chans(cfg);
    let levels = cfg.levels();
    let tdim = cfg.time_embed_dim();
    register_linear(store, "time.lin1", cfg.base_channels, tdim)?;
    register_linear(store, "time.lin2", tdim, tdim)?;
    register_conv(store, "in.conv", cfg.conditioning_channels(), ch[0], 3)?;

    let mut c_cur = ch[0];
    let mut skip_chans = vec![c_cur];
    for l in 0..levels {
        for b in 0..cfg.resnet_blocks_per_level {
            register_resblock(store, &format!("down.{l}.block.{b}"), c_cur, ch[l], tdim)?;
            c_cur = ch[l];
            if cfg.attention_levels.contains(&l) {
                register_self_attn(store, &format!("down.{l}.attn.{b}"), c_cur)?;
            }
            skip_chans.push(c_cur);
        }
        if l < levels - 1 {
            register_conv(store, &format!("down.{l}.downsample.conv"), c_cur, c_cur, 3)?;
            skip_chans.push(c_cur);
        }
    }

    register_resblock(store, "mid.block1", c_cur, c_cur, tdim)?;
    register_self_attn(store, "mid.attn", c_cur)?;
    if cfg.variant.uses_cross_attention() {
        register_cross_attn(store, "mid.cross", c_cur)?;
    }
    register_resblock(store, "mid.block2", c_cur, c_cur, tdim)?;

    for l in (0..levels).rev() {
        for b in 0..=cfg.resnet_blocks_per_level {
            let c_skip = skip_chans.pop().expect("skip bookkeeping");
            register_resblock(
                store,
                &format!("up.{l}.block.{b}"),
                c_cur + c_skip,
                ch[l],
                tdim,
            )?;
            c_cur = ch[l];
            if cfg.attention_levels.contains(&l) {
                register_self_attn(store, &format!("up.{l}.attn.{b}"), c_cur)?;
            }
        }
        if l > 0 {
            register_conv(store, &format!("up.{l}.upsample.conv"), c_cur, c_cur, 3)?;
        }
    }
    debug_assert!(skip_chans.is_empty());

    register_norm(store, "out.norm", ch[0])?;
    // Zero-initialized output projection: a fresh model emits ε̂ ≡ 0.
    store.register("out.conv.w", &[1, ch[0], 3, 3], Init::Zeros)?;
    store.register("out.conv.b", &[1], Init::Zeros)?;
    Ok(())
}

struct ForwardCtx<'a, 'b> {
    params: &'a ParamView<'a>,
    temb: Tensor,
    train: Option<(f64, &'b mut ChaCha20Rng)>,
}

impl ForwardCtx<'_, '_> {
    fn t(&self, name: &str) -> Result<Tensor> {
        self.params.tensor(name)
    }

    fn resblock(&mut self, prefix: &str, x: &Tensor, c_in: usize, c_out: usize) -> Result<Tensor> {
        let h = group_norm(
            x,
            &self.t(&format!("{prefix}.norm1.g"))?,
            &self.t(&format!("{prefix}.norm1.b"))?,
            norm_groups(c_in),
        )?;
        let h = conv2d(
            &h.silu()?,
            &self.t(&format!("{prefix}.conv1.w"))?,
            &self.t(&format!("{prefix}.conv1.b"))?,
            1,
            1,
        )?;
        let emb = self
            .temb
            .silu()?
            .broadcast_matmul(&self.t(&format!("{prefix}.temb.w"))?.t()?)?
            .broadcast_add(&self.t(&format!("{prefix}.temb.b"))?)?;
        let h = h.broadcast_add(&emb.unsqueeze(2)?.unsqueeze(3)?)?;
        let h = group_norm(
            &h,
            &self.t(&format!("{prefix}.norm2.g"))?,
            &self.t(&format!("{prefix}.norm2.b"))?,
            norm_groups(c_out),
        )?;
        let mut h = h.silu()?;
        if let Some((p, rng)) = &mut self.train {
            h = dropout(&h, *p, rng)?;
        }
        let h = conv2d(
            &h,
            &self.t(&format!("{prefix}.conv2.w"))?,
            &self.t(&format!("{prefix}.conv2.b"))?,
            1,
            1,
        )?;
        let skip = if c_in == c_out {
            x.clone()
        } else {
            conv2d(
                x,
                &self.t(&format!("{prefix}.skip.w"))?,
                &self.t(&format!("{prefix}.skip.b"))?,
                0,
                1,
            )?
        };
        Ok((skip + h)?)
    }

    fn self_attn(&self, prefix: &str, x: &Tensor) -> Result<Tensor> {
        let w = SelfAttnWeights {
            norm_g: self.t(&format!("{prefix}.norm.g"))?,
            norm_b: self.t(&format!("{prefix}.norm.b"))?,
            wq: self.t(&format!("{prefix}.wq"))?,
            bq: self.t(&format!("{prefix}.bq"))?,
            wk: self.t(&format!("{prefix}.wk"))?,
            bk: self.t(&format!("{prefix}.bk"))?,
            wv: self.t(&format!("{prefix}.wv"))?,
            bv: self.t(&format!("{prefix}.bv"))?,
            wo: self.t(&format!("{prefix}.wo"))?,
            bo: self.t(&format!("{prefix}.bo"))?,
        };
        self_attention(x, &w)
    }
}

fn forward_unet(
    cfg: &DenoiserConfig,
    params: &ParamView,
    cond: &Tensor,
    s_values: &[f64],
    guidance: Option<&Tensor>,
    train: Option<(f64, &mut ChaCha20Rng)>,
) -> Result<Tensor> {
    let ch = chans(cfg);
    let levels = cfg.levels();
    let (b, c_cond, h, w) = cond.dims4()?;
    if c_cond != cfg.conditioning_channels() {
        return Err(WxError::Shape(format!(
            "variant {} expects {} conditioning channels, got {c_cond}",
            cfg.variant,
            cfg.conditioning_channels()
        )));
    }
    if s_values.len() != b {
        return Err(WxError::Shape(format!(
            "got {} noise levels for batch of {b}",
            s_values.len()
        )));
    }
    let down_factor = 1usize << (levels - 1);
    if h % down_factor != 0 || w % down_factor != 0 {
        return Err(WxError::Shape(format!(
            "spatial dims {h}x{w} must be divisible by {down_factor}"
        )));
    }
    if cfg.variant.uses_cross_attention() && guidance.is_none() {
        return Err(WxError::Contract(format!(
            "variant {} requires wavelet guidance",
            cfg.variant
        )));
    }

    let emb = sinusoidal_embedding(s_values, cfg.base_channels, cond.dtype(), cond.device())?;
    let temb = emb
        .broadcast_matmul(&params.tensor("time.lin1.w")?.t()?)?
        .broadcast_add(&params.tensor("time.lin1.b")?)?
        .silu()?;
    let temb = temb
        .broadcast_matmul(&params.tensor("time.lin2.w")?.t()?)?
        .broadcast_add(&params.tensor("time.lin2.b")?)?;

    let mut ctx = ForwardCtx { params, temb, train };

    let mut x = conv2d(
        cond,
        &params.tensor("in.conv.w")?,
        &params.tensor("in.conv.b")?,
        1,
        1,
    )?;
    let mut c_cur = ch[0];
    let mut skips: Vec<(Tensor, usize)> = vec![(x.clone(), c_cur)];
    for l in 0..levels {
        for blk in 0..cfg.resnet_blocks_per_level {
            x = ctx.resblock(&format!("down.{l}.block.{blk}"), &x, c_cur, ch[l])?;
            c_cur = ch[l];
            if cfg.attention_levels.contains(&l) {
                x = ctx.self_attn(&format!("down.{l}.attn.{blk}"), &x)?;
            }
            skips.push((x.clone(), c_cur));
        }
        if l < levels - 1 {
            x = conv2d(
                &x,
                &ctx.t(&format!("down.{l}.downsample.conv.w"))?,
                &ctx.t(&format!("down.{l}.downsample.conv.b"))?,
                1,
                2,
            )?;
            skips.push((x.clone(), c_cur));
        }
    }

    x = ctx.resblock("mid.block1", &x, c_cur, c_cur)?;
    x = ctx.self_attn("mid.attn", &x)?;
    if cfg.variant.uses_cross_attention() {
        let sub = guidance.expect("checked above");
        let g = hf_guidance(
            sub,
            &ctx.t("mid.cross.hfproj.w")?,
            &ctx.t("mid.cross.hfproj.b")?,
        )?;
        let weights = CrossAttnWeights {
            wq: &ctx.t("mid.cross.wq")?,
            bq: &ctx.t("mid.cross.bq")?,
            wk: &ctx.t("mid.cross.wk")?,
            bk: &ctx.t("mid.cross.bk")?,
            wv: &ctx.t("mid.cross.wv")?,
            bv: &ctx.t("mid.cross.bv")?,
            wo: &ctx.t("mid.cross.wo")?,
            bo: &ctx.t("mid.cross.bo")?,
        };
        x = cross_attend(&x, &g, &weights, cfg.cross_attention_heads)?;
    }
    x = ctx.resblock("mid.block2", &x, c_cur, c_cur)?;

    for l in (0..levels).rev() {
        for blk in 0..=cfg.resnet_blocks_per_level {
            let (skip, c_skip) = skips.pop().expect("skip bookkeeping");
            let xin = Tensor::cat(&[&x, &skip], 1)?;
            x = ctx.resblock(&format!("up.{l}.block.{blk}"), &xin, c_cur + c_skip, ch[l])?;
            c_cur = ch[l];
            if cfg.attention_levels.contains(&l) {
                x = ctx.self_attn(&format!("up.{l}.attn.{blk}"), &x)?;
            }
        }
        if l > 0 {
            let (_, _, hh, ww) = x.dims4()?;
            x = x.upsample_nearest2d(hh * 2, ww * 2)?;
            x = conv2d(
                &x,
                &ctx.t(&format!("up.{l}.upsample.conv.w"))?,
                &ctx.t(&format!("up.{l}.upsample.conv.b"))?,
                1,
                1,
            )?;
        }
    }

    let x = group_norm(
        &x,
        &ctx.t("out.norm.g")?,
        &ctx.t("out.norm.b")?,
        norm_groups(ch[0]),
    )?;
    let out = conv2d(
        &x.silu()?,
        &ctx.t("out.conv.w")?,
        &ctx.t("out.conv.b")?,
        1,
        1,
    )?;
    Ok(out)
}

/// The denoiser parameters plus their EMA shadow copy.
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    pub store: ParamStore,
    pub ema: BTreeMap<String, Tensor>,
}

impl DenoiserModel {
    /// Deterministic build: parameter values are a pure function of
    /// `(config, seed)`; the EMA shadow starts equal to the parameters.
    pub fn build(cfg: &DenoiserConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed, dtype, device.clone());
        register_unet(cfg, &mut store)?;
        let ema = store.snapshot()?;
        Ok(DenoiserModel {
            config: cfg.clone(),
            store,
            ema,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    fn scaled_log_levels(alpha_bar: &[f64]) -> Result<Vec<f64>> {
        alpha_bar
            .iter()
            .map(|&ab| {
                if !(ab > 0.0 && ab < 1.0) {
                    return Err(WxError::Domain(format!(
                        "alpha_bar must lie in (0,1), got {ab}"
                    )));
                }
                Ok(100.0 * (-ab.ln()))
            })
            .collect()
    }

    /// Deterministic evaluation-mode prediction (dropout disabled).
    pub fn predict_noise(
        &self,
        cond: &Conditioning,
        alpha_bar: &[f64],
        use_ema: bool,
    ) -> Result<Tensor> {
        let s = Self::scaled_log_levels(alpha_bar)?;
        let view = if use_ema {
            ParamView::Snapshot(&self.ema)
        } else {
            ParamView::Live(&self.store)
        };
        forward_unet(
            &self.config,
            &view,
            &cond.channels,
            &s,
            cond.guidance.as_ref(),
            None,
        )
    }

    /// Training-mode prediction on the live parameters with dropout.
    pub fn predict_noise_train(
        &self,
        cond: &Conditioning,
        alpha_bar: &[f64],
        rng: &mut ChaCha20Rng,
    ) -> Result<Tensor> {
        let s = Self::scaled_log_levels(alpha_bar)?;
        let view = ParamView::Live(&self.store);
        forward_unet(
            &self.config,
            &view,
            &cond.channels,
            &s,
            cond.guidance.as_ref(),
            Some((self.config.dropout, rng)),
        )
    }
}
