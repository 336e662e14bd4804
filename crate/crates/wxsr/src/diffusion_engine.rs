//! Training objective, EMA maintenance, ancestral sampling loop, and the
//! residual composition that adds the diffusion output back onto the bicubic
//! image for the resdiff variants.

use candle_core::{Tensor, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;

use crate::denoiser::{Conditioning, DenoiserModel, Variant};
use crate::dwt_attention::{dwt2, WaveletFamily};
use crate::error::{Result, WxError};
use crate::freq_split::FdInfoSplitter;
use crate::grid_data::{GridField, PairedSample, Units};
use crate::interp::bicubic_upsample_values;
use crate::physics_filters::physics_conditioning;
use crate::schedule::{forward_noise_values, NoiseSchedule};

/// Adam with bias correction (β1 = 0.9, β2 = 0.999, ε = 1e-8), no weight
/// decay and no gradient clipping.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_t
    }

    /// Apply one update to every named var that received a gradient.
    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = (&'a String, &'a Var)>,
        grads: &candle_core::backprop::GradStore,
    ) -> Result<()> {
        self.step_t += 1;
        let bc1 = 1.0 / (1.0 - self.beta1.powi(self.step_t as i32));
        let bc2 = 1.0 / (1.0 - self.beta2.powi(self.step_t as i32));
        for (name, var) in params {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m_prev = match self.m.get(name) {
                Some(t) => t.clone(),
                None => grad.zeros_like()?,
            };
            let v_prev = match self.v.get(name) {
                Some(t) => t.clone(),
                None => grad.zeros_like()?,
            };
            let m_next = ((m_prev * self.beta1)? + (grad * (1.0 - self.beta1))?)?;
            let v_next = ((v_prev * self.beta2)? + (grad.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&m_next * bc1)?;
            let v_hat = (&v_next * bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let next = (var.as_tensor() - (update * self.lr)?)?;
            var.set(&next)?;
            self.m.insert(name.clone(), m_next);
            self.v.insert(name.clone(), v_next);
        }
        Ok(())
    }

    /// Moments for checkpointing.
    pub fn state(&self) -> (u64, &BTreeMap<String, Tensor>, &BTreeMap<String, Tensor>) {
        (self.step_t, &self.m, &self.v)
    }

    pub fn restore(&mut self, step_t: u64, m: BTreeMap<String, Tensor>, v: BTreeMap<String, Tensor>) {
        self.step_t = step_t;
        self.m = m;
        self.v = v;
    }
}

/// ema' = decay·ema + (1−decay)·params, elementwise over matching names.
pub fn ema_update(
    ema: &mut BTreeMap<String, Tensor>,
    params: impl Iterator<Item = (String, Tensor)>,
    decay: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(WxError::Config(format!(
            "ema decay must lie in [0,1], got {decay}"
        )));
    }
    for (name, p) in params {
        let shadow = ema.get(&name).ok_or_else(|| {
            WxError::Contract(format!("ema shadow missing parameter {name:?}"))
        })?;
        if shadow.shape() != p.shape() {
            return Err(WxError::Contract(format!(
                "ema shape mismatch for {name:?}: {:?} vs {:?}",
                shadow.shape(),
                p.shape()
            )));
        }
        let next = ((shadow * decay)? + (p * (1.0 - decay))?)?;
        ema.insert(name, next);
    }
    Ok(())
}

/// Everything the training loop mutates.
pub struct TrainState {
    pub model: DenoiserModel,
    pub splitter: FdInfoSplitter,
    pub opt: Adam,
    pub ema_decay: f64,
    pub iteration: u64,
    pub rng: ChaCha20Rng,
}

impl TrainState {
    pub fn new(
        model: DenoiserModel,
        splitter: FdInfoSplitter,
        lr: f64,
        ema_decay: f64,
        seed: u64,
    ) -> Self {
        TrainState {
            model,
            splitter,
            opt: Adam::new(lr),
            ema_decay,
            iteration: 0,
            rng: ChaCha20Rng::seed_from_u64(seed ^ 0x7261_696e),
        }
    }
}

fn random_field_like(rng: &mut ChaCha20Rng, (h, w): (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Variant-specific conditioning stack (2 channels for sr3, 5 otherwise).
pub fn assemble_conditioning(
    variant: Variant,
    splitter: &FdInfoSplitter,
    x_interp: &Array2<f64>,
    y_t: &Array2<f64>,
) -> Result<Vec<Array2<f64>>> {
    match variant {
        Variant::Sr3 => Ok(vec![x_interp.clone(), y_t.clone()]),
        Variant::Resdiff => {
            let maps = splitter.split(x_interp, y_t, y_t)?;
            Ok(maps.channels().into_iter().cloned().collect())
        }
        Variant::ResdiffPhysics => physics_conditioning(x_interp, y_t),
    }
}

/// DWT high-frequency subbands of the interpolated image, stacked for the
/// cross-attention guidance input.
fn guidance_stack(x_interp: &Array2<f64>) -> Result<[Array2<f64>; 3]> {
    let sub = dwt2(x_interp, WaveletFamily::Haar)?;
    Ok([sub.lh, sub.hl, sub.hh])
}

fn channels_to_tensor(
    batch: &[Vec<Array2<f64>>],
    model: &DenoiserModel,
) -> Result<Tensor> {
    let b = batch.len();
    let c = batch[0].len();
    let (h, w) = batch[0][0].dim();
    let mut data = Vec::with_capacity(b * c * h * w);
    for channels in batch {
        for ch in channels {
            data.extend(ch.iter().copied());
        }
    }
    let t = Tensor::from_vec(data, (b, c, h, w), &model.store.device)?
        .to_dtype(model.store.dtype)?;
    Ok(t)
}

fn guidance_to_tensor(batch: &[[Array2<f64>; 3]], model: &DenoiserModel) -> Result<Tensor> {
    let b = batch.len();
    let (h, w) = batch[0][0].dim();
    let mut data = Vec::with_capacity(b * 3 * h * w);
    for bands in batch {
        for band in bands {
            data.extend(band.iter().copied());
        }
    }
    let t = Tensor::from_vec(data, (b, 3, h, w), &model.store.device)?
        .to_dtype(model.store.dtype)?;
    Ok(t)
}

fn tensor_to_fields(t: &Tensor) -> Result<Vec<Array2<f64>>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(WxError::Shape(format!("expected single channel, got {c}")));
    }
    let flat = t.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let slice = flat[i * h * w..(i + 1) * h * w].to_vec();
        out.push(
            Array2::from_shape_vec((h, w), slice)
                .map_err(|e| WxError::Shape(e.to_string()))?,
        );
    }
    Ok(out)
}

/// The diffused quantity: the HR field itself for sr3, the HR−bicubic
/// residual for the resdiff variants.
pub fn diffusion_target(variant: Variant, hr: &Array2<f64>, x_interp: &Array2<f64>) -> Array2<f64> {
    if variant.is_residual() {
        hr - x_interp
    } else {
        hr.clone()
    }
}

/// Final composition after the reverse loop: bicubic + residual for the
/// resdiff variants, the plain y_0 estimate for sr3.
pub fn compose_output(variant: Variant, x_interp: &Array2<f64>, y0: &Array2<f64>) -> Array2<f64> {
    if variant.is_residual() {
        x_interp + y0
    } else {
        y0.clone()
    }
}

/// One optimization step over a batch: per sample draw `t` and ε, noise the
/// target, assemble conditioning, regress ε̂ on ε, and apply Adam + EMA.
pub fn training_step(
    state: &mut TrainState,
    batch: &[PairedSample],
    sched: &NoiseSchedule,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(WxError::Contract("empty training batch".into()));
    }
    let variant = state.model.config.variant;
    let mut cond_batch = Vec::with_capacity(batch.len());
    let mut guidance_batch = Vec::with_capacity(batch.len());
    let mut eps_batch = Vec::with_capacity(batch.len());
    let mut alpha_bars = Vec::with_capacity(batch.len());
    for sample in batch {
        if sample.lr.units != Units::Standardized || sample.hr.units != Units::Standardized {
            return Err(WxError::Contract(
                "training batch must be standardized".into(),
            ));
        }
        let (hh, hw) = sample.hr.shape();
        let t = state.rng.random_range(1..=sched.t_max());
        let x_interp = bicubic_upsample_values(&sample.lr.values, hh, hw)?;
        let y0 = diffusion_target(variant, &sample.hr.values, &x_interp);
        let eps = random_field_like(&mut state.rng, (hh, hw));
        let y_t = forward_noise_values(&y0, t, &eps, sched)?;
        cond_batch.push(assemble_conditioning(
            variant,
            &state.splitter,
            &x_interp,
            &y_t,
        )?);
        if variant.uses_cross_attention() {
            guidance_batch.push(guidance_stack(&x_interp)?);
        }
        eps_batch.push(vec![eps]);
        alpha_bars.push(sched.alpha_bar(t)?);
    }

    let cond = Conditioning {
        channels: channels_to_tensor(&cond_batch, &state.model)?,
        guidance: if variant.uses_cross_attention() {
            Some(guidance_to_tensor(&guidance_batch, &state.model)?)
        } else {
            None
        },
    };
    let target = channels_to_tensor(&eps_batch, &state.model)?;

    let eps_hat = state
        .model
        .predict_noise_train(&cond, &alpha_bars, &mut state.rng)?;
    let loss = (eps_hat - target)?.sqr()?.mean_all()?;
    let loss_value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if !loss_value.is_finite() {
        return Err(WxError::Numeric(format!(
            "non-finite loss at iteration {}",
            state.iteration
        )));
    }
    let grads = loss.backward()?;
    state.opt.step(state.model.store.iter(), &grads)?;
    let lr_decay = state.ema_decay;
    ema_update(
        &mut state.model.ema,
        state
            .model
            .store
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone())),
        lr_decay,
    )?;
    state.iteration += 1;
    Ok(loss_value)
}

/// One reverse-process update:
/// y_{t−1} = (1/√α_t)(y_t − ((1−α_t)/√(1−ᾱ_t))·ε̂) + √(1−α_t)·z.
pub fn sample_step(
    y_t: &GridField,
    eps_hat: &GridField,
    t: usize,
    sched: &NoiseSchedule,
    z: &GridField,
) -> Result<GridField> {
    let values = sample_step_values(&y_t.values, &eps_hat.values, t, sched, &z.values)?;
    let mut out = y_t.clone();
    out.values = values;
    Ok(out)
}

/// Array-level reverse update; `z` must be all zero at t = 1.
pub fn sample_step_values(
    y_t: &Array2<f64>,
    eps_hat: &Array2<f64>,
    t: usize,
    sched: &NoiseSchedule,
    z: &Array2<f64>,
) -> Result<Array2<f64>> {
    if y_t.dim() != eps_hat.dim() || y_t.dim() != z.dim() {
        return Err(WxError::Shape(format!(
            "sample_step shapes disagree: {:?}/{:?}/{:?}",
            y_t.dim(),
            eps_hat.dim(),
            z.dim()
        )));
    }
    let alpha = sched.alpha(t)?;
    let alpha_bar = sched.alpha_bar(t)?;
    if t == 1 && z.iter().any(|&v| v != 0.0) {
        return Err(WxError::Contract(
            "the final step (t = 1) must not add noise".into(),
        ));
    }
    // at alpha = 1 the epsilon coefficient (1-alpha)/sqrt(1-alpha_bar) is 0/0;
    // its limit is 0, making the update the identity
    let coef = if alpha < 1.0 {
        (1.0 - alpha) / (1.0 - alpha_bar).sqrt()
    } else {
        0.0
    };
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let noise_scale = (1.0 - alpha).sqrt();
    Ok((y_t - &(eps_hat * coef)) * inv_sqrt_alpha + z * noise_scale)
}

/// Sampling controls.
#[derive(Debug, Clone, Copy)]
pub struct SampleOptions {
    /// Evaluate with the EMA shadow parameters.
    pub use_ema: bool,
    /// Suppress the per-step noise z entirely (oracle/debug runs).
    pub deterministic: bool,
    pub keep_trace: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            use_ema: true,
            deterministic: false,
            keep_trace: false,
        }
    }
}

/// The sampled output plus optional per-step intermediates (decreasing t).
pub struct SampleTrace {
    pub final_field: GridField,
    pub intermediates: Vec<(usize, GridField)>,
}

fn per_sample_rng(seed: u64, idx: usize) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed ^ (idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Ancestral sampling for one LR field.
pub fn sample(
    model: &DenoiserModel,
    splitter: &FdInfoSplitter,
    lr: &GridField,
    sched: &NoiseSchedule,
    seed: u64,
    opts: SampleOptions,
) -> Result<SampleTrace> {
    Ok(sample_batch(model, splitter, std::slice::from_ref(lr), sched, seed, opts)?
        .into_iter()
        .next()
        .expect("batch of one"))
}

/// Batched ancestral sampling; per-sample randomness depends only on
/// `(seed, index)` so results are reproducible item by item.
pub fn sample_batch(
    model: &DenoiserModel,
    splitter: &FdInfoSplitter,
    lrs: &[GridField],
    sched: &NoiseSchedule,
    seed: u64,
    opts: SampleOptions,
) -> Result<Vec<SampleTrace>> {
    if lrs.is_empty() {
        return Err(WxError::Contract("empty sampling batch".into()));
    }
    let variant = model.config.variant;
    let n = lrs.len();
    let mut rngs: Vec<ChaCha20Rng> = (0..n).map(|i| per_sample_rng(seed, i)).collect();

    let mut x_interps = Vec::with_capacity(n);
    let mut guidance_batch = Vec::with_capacity(n);
    for lr in lrs {
        if lr.units != Units::Standardized {
            return Err(WxError::Contract("sampling expects standardized LR".into()));
        }
        let (h, w) = lr.shape();
        let x_interp = bicubic_upsample_values(&lr.values, 4 * h, 4 * w)?;
        if variant.uses_cross_attention() {
            guidance_batch.push(guidance_stack(&x_interp)?);
        }
        x_interps.push(x_interp);
    }
    let guidance = if variant.uses_cross_attention() {
        Some(guidance_to_tensor(&guidance_batch, model)?)
    } else {
        None
    };

    let hr_shape = x_interps[0].dim();
    let mut states: Vec<Array2<f64>> = rngs
        .iter_mut()
        .map(|rng| random_field_like(rng, hr_shape))
        .collect();
    let mut traces: Vec<Vec<(usize, GridField)>> = vec![Vec::new(); n];

    for t in (1..=sched.t_max()).rev() {
        let cond_batch: Vec<Vec<Array2<f64>>> = states
            .iter()
            .zip(&x_interps)
            .map(|(y_t, x_interp)| assemble_conditioning(variant, splitter, x_interp, y_t))
            .collect::<Result<_>>()?;
        let cond = Conditioning {
            channels: channels_to_tensor(&cond_batch, model)?,
            guidance: guidance.clone(),
        };
        let ab = sched.alpha_bar(t)?;
        let eps_hat = model.predict_noise(&cond, &vec![ab; n], opts.use_ema)?;
        let eps_fields = tensor_to_fields(&eps_hat)?;
        for (i, (state, eps)) in states.iter_mut().zip(&eps_fields).enumerate() {
            let z = if t > 1 && !opts.deterministic {
                random_field_like(&mut rngs[i], hr_shape)
            } else {
                Array2::zeros(hr_shape)
            };
            *state = sample_step_values(state, eps, t, sched, &z)?;
            if !state.iter().all(|v| v.is_finite()) {
                return Err(WxError::Numeric(format!(
                    "non-finite sample state at t = {t}"
                )));
            }
            if opts.keep_trace {
                let mut snap = lrs[i].clone();
                snap.values = state.clone();
                snap.grid_spacing_deg = lrs[i].grid_spacing_deg / 4.0;
                traces[i].push((t, snap));
            }
        }
    }

    let mut out = Vec::with_capacity(n);
    for (i, state) in states.into_iter().enumerate() {
        let composed = compose_output(variant, &x_interps[i], &state);
        let mut final_field = lrs[i].clone();
        final_field.values = composed;
        final_field.grid_spacing_deg = lrs[i].grid_spacing_deg / 4.0;
        out.push(SampleTrace {
            final_field,
            intermediates: std::mem::take(&mut traces[i]),
        });
    }
    Ok(out)
}
