//! Losses, optimiser and the alternating generator/discriminator loop.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{s, Array1, Array3, Array4, ArrayD, ArrayView, ArrayViewD, ArrayViewMutD, Axis, Dimension, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::databus::{DatasetManifest, QuadFactory, QuadRecord, TrainingQuad};
use crate::model::{LatentStack, ModelConfig, ModelParams};
use crate::nn::{join, Params};
use crate::stft::Stft;
use crate::{Error, Result};

/// Probability clamp for the adversarial log terms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_spec: f64,
    pub w_latent: f64,
    pub w_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_spec: 1.0,
            w_latent: 1.0,
            w_adv: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub adv_start_epoch: usize,
    pub total_epochs: usize,
    /// Quads per optimisation step.
    pub batch_size: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Redraw both gammas of every quad each epoch.
    pub redraw_gamma: bool,
    /// Defaults to `ceil(quads / batch_size)`.
    pub steps_per_epoch: Option<usize>,
    /// Keep rendered spectrograms in memory between epochs.
    pub cache_quads: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            adv_start_epoch: 20,
            total_epochs: 100,
            batch_size: 4,
            loss_weights: LossWeights::default(),
            seed: 0,
            clip_norm: Some(5.0),
            redraw_gamma: true,
            steps_per_epoch: None,
            cache_quads: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.adv_start_epoch > self.total_epochs {
            return bad("adv_start_epoch must not exceed total_epochs");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("training config: {e}")))
    }

    pub fn adv_active(&self, epoch: usize) -> bool {
        epoch >= self.adv_start_epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub step: usize,
    pub l_spec: f64,
    pub l_latent: f64,
    pub l_gen_adv: f64,
    pub l_disc: f64,
    pub adv_active: bool,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_spec, self.l_latent, self.l_gen_adv, self.l_disc].iter().all(|v| v.is_finite())
    }
}

fn check_shapes(a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Shape(format!("{a:?} vs {b:?}")))
    }
}

/// `mean|d| + mean(d^2)` with `d = pred - target`.
pub fn spec_loss<D: Dimension>(pred: ArrayView<'_, f64, D>, target: ArrayView<'_, f64, D>) -> Result<f64> {
    check_shapes(pred.shape(), target.shape())?;
    let n = pred.len().max(1) as f64;
    let (l1, l2) = Zip::from(&pred)
        .and(&target)
        .fold((0.0, 0.0), |(a, b), &p, &t| (a + (p - t).abs(), b + (p - t) * (p - t)));
    Ok((l1 + l2) / n)
}

fn l1_l2_grad<D: Dimension>(pred: ArrayView<'_, f64, D>, target: ArrayView<'_, f64, D>) -> (f64, ndarray::Array<f64, D>) {
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = Zip::from(&pred).and(&target).map_collect(|&p, &t| {
        let d = p - t;
        loss += d.abs() + d * d;
        (d.signum() * (d != 0.0) as u8 as f64 + 2.0 * d) / n
    });
    (loss / n, grad)
}

/// Sum over layers of `mean|dr| + mean(dr^2)` on the reverb halves only.
pub fn latent_loss(x: &LatentStack, y: &LatentStack) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape("latent stacks differ in depth".into()));
    }
    let mut total = 0.0;
    for i in 0..x.len() {
        total += spec_loss(x.reverb_half(i), y.reverb_half(i))?;
    }
    Ok(total)
}

/// Loss plus full-layer gradients w.r.t. both stacks.
fn latent_loss_grad(x: &LatentStack, y: &LatentStack) -> (f64, Vec<Array4<f64>>, Vec<Array4<f64>>) {
    let mut total = 0.0;
    let mut gx = Vec::with_capacity(x.len());
    let mut gy = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let (l, g) = l1_l2_grad(x.reverb_half(i), y.reverb_half(i));
        total += l;
        let half = x.layer(i).dim().1 / 2;
        let mut dx = Array4::zeros(x.layer(i).raw_dim());
        dx.slice_mut(s![.., half.., .., ..]).assign(&g);
        let dy = -&dx;
        gx.push(dx);
        gy.push(dy);
    }
    (total, gx, gy)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `(l_disc, l_gen)` as batch means: `-[log d_real + log(1 - d_fake)]` and
/// `log(1 - d_fake)`.
pub fn adversarial_losses(d_real: &[f64], d_fake: &[f64]) -> (f64, f64) {
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&p| f(clamp_prob(p))).sum::<f64>() / v.len().max(1) as f64;
    let l_real = mean(d_real, &|p| p.ln());
    let l_fake = mean(d_fake, &|p| (1.0 - p).ln());
    (-(l_real + l_fake), l_fake)
}

/// d/dp of the batch mean of `log(1 - clamp(p))`.
fn d_log_one_minus(p: &Array1<f64>) -> Array1<f64> {
    let n = p.len().max(1) as f64;
    p.mapv(|v| if v > PROB_EPS && v < 1.0 - PROB_EPS { -1.0 / (1.0 - v) / n } else { 0.0 })
}

/// d/dp of the batch mean of `log(clamp(p))`.
fn d_log(p: &Array1<f64>) -> Array1<f64> {
    let n = p.len().max(1) as f64;
    p.mapv(|v| if v > PROB_EPS && v < 1.0 - PROB_EPS { 1.0 / v / n } else { 0.0 })
}

/// Flat list of named tensors, used for optimiser moments.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensors(pub Vec<(String, ArrayD<f64>)>);

impl NamedTensors {
    pub fn zeros_like(p: &impl Params) -> Self {
        let mut v = Vec::new();
        p.visit("", &mut |name, t| v.push((name, ArrayD::zeros(t.raw_dim()))));
        Self(v)
    }
}

impl Params for NamedTensors {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        for (name, t) in &self.0 {
            f(join(prefix, name), t.view());
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>)) {
        for (name, t) in &mut self.0 {
            f(join(prefix, name), t.view_mut());
        }
    }
}

/// Rectified Adam: plain momentum SGD while the variance estimate is
/// unreliable (`rho_t <= 5`), adaptive steps with variance rectification after.
#[derive(Debug, Clone, PartialEq)]
pub struct RAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: NamedTensors,
    pub v: NamedTensors,
}

impl RAdam {
    pub fn new(params: &impl Params, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: NamedTensors::zeros_like(params),
            v: NamedTensors::zeros_like(params),
        }
    }

    pub fn step(&mut self, params: &mut impl Params, grads: &impl Params) {
        self.t += 1;
        let t = self.t as f64;
        let (b1, b2) = (self.beta1, self.beta2);
        let bias1 = 1.0 - b1.powf(t);
        let bias2 = 1.0 - b2.powf(t);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let rho_t = rho_inf - 2.0 * t * b2.powf(t) / bias2;
        let rect = (rho_t > 5.0).then(|| {
            ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt()
        });

        let mut gs = Vec::new();
        grads.visit("", &mut |_, g| gs.push(g));
        for ((m, v), g) in self.m.0.iter_mut().zip(self.v.0.iter_mut()).zip(&gs) {
            Zip::from(&mut m.1).and(g).for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
            Zip::from(&mut v.1).and(g).for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
        }
        let (lr, eps) = (self.lr, self.eps);
        let mut i = 0;
        params.visit_mut("", &mut |_, mut p| {
            let m = &self.m.0[i].1;
            let v = &self.v.0[i].1;
            match rect {
                Some(r) => Zip::from(&mut p).and(m).and(v).for_each(|p, &m, &v| {
                    *p -= lr * (m / bias1) * r * bias2.sqrt() / (v.sqrt() + eps);
                }),
                None => Zip::from(&mut p).and(m).for_each(|p, &m| *p -= lr * m / bias1),
            }
            i += 1;
        });
    }

    fn save_into(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.insert_params(&join(prefix, "m"), &self.m);
        ck.insert_params(&join(prefix, "v"), &self.v);
    }

    fn load_from(&mut self, ck: &Checkpoint, prefix: &str, t: u64) -> Result<()> {
        ck.load_into(&join(prefix, "m"), &mut self.m)?;
        ck.load_into(&join(prefix, "v"), &mut self.v)?;
        self.t = t;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers {
    pub generator: RAdam,
    pub discriminator: RAdam,
}

impl Optimizers {
    pub fn new(params: &ModelParams, cfg: &TrainConfig) -> Self {
        Self {
            generator: RAdam::new(&params.generator, cfg),
            discriminator: RAdam::new(&params.discriminator, cfg),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.generator.lr = lr;
        self.discriminator.lr = lr;
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut impl Params, max_norm: f64) -> f64 {
    let norm = grads.squared_norm().sqrt();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Network-ready magnitudes of one quad, each `[2, bins, frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadTensors {
    pub in_a: Array3<f64>,
    pub in_b: Array3<f64>,
    pub gt_a: Array3<f64>,
    pub gt_b: Array3<f64>,
}

impl QuadTensors {
    pub fn from_quad(quad: &TrainingQuad, stft: &Stft) -> Result<Self> {
        let mag = |w: &crate::audio::Waveform| -> Result<Array3<f64>> { Ok(stft.analyze(w)?.0.network_bins()) };
        Ok(Self {
            in_a: mag(&quad.in_a.audio)?,
            in_b: mag(&quad.in_b.audio)?,
            gt_a: mag(&quad.gt_a.audio)?,
            gt_b: mag(&quad.gt_b.audio)?,
        })
    }
}

/// A stack of quads along the batch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub in_a: Array4<f64>,
    pub in_b: Array4<f64>,
    pub gt_a: Array4<f64>,
    pub gt_b: Array4<f64>,
}

impl Batch {
    pub fn stack(quads: &[&QuadTensors]) -> Result<Self> {
        let cat = |f: &dyn Fn(&QuadTensors) -> &Array3<f64>| -> Result<Array4<f64>> {
            let views: Vec<_> = quads.iter().map(|q| f(q).view().insert_axis(Axis(0))).collect();
            ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
        };
        if quads.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        Ok(Self {
            in_a: cat(&|q| &q.in_a)?,
            in_b: cat(&|q| &q.in_b)?,
            gt_a: cat(&|q| &q.gt_a)?,
            gt_b: cat(&|q| &q.gt_b)?,
        })
    }

    pub fn len(&self) -> usize {
        self.in_a.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Generator objective, its parameter gradient and the two outputs.
pub struct GeneratorPass {
    pub l_spec: f64,
    pub l_latent: f64,
    pub l_gen_adv: f64,
    pub total: f64,
    pub grad: crate::model::Generator,
    pub out_a: Array4<f64>,
    pub out_b: Array4<f64>,
}

/// Evaluates the generator objective only (no gradients).
pub fn generator_objective(params: &ModelParams, batch: &Batch, w: &LossWeights, adv_active: bool) -> Result<f64> {
    let enc = &params.generator.encoder;
    let dec = &params.generator.decoder;
    for x in [&batch.in_a, &batch.in_b, &batch.gt_a, &batch.gt_b] {
        params.check_input(x)?;
    }
    let sa = enc.forward(&batch.in_a);
    let sb = enc.forward(&batch.in_b);
    let sga = enc.forward(&batch.gt_a);
    let sgb = enc.forward(&batch.gt_b);
    let out_a = dec.forward(&sa, &sb);
    let out_b = dec.forward(&sb, &sa);
    let l_spec = spec_loss(out_a.view(), batch.gt_a.view())? + spec_loss(out_b.view(), batch.gt_b.view())?;
    let l_latent = latent_loss(&sa, &sgb)? + latent_loss(&sb, &sga)?;
    let mut total = w.w_spec * l_spec + w.w_latent * l_latent;
    if adv_active {
        let pool = params.config.disc_pool;
        let pa = params.discriminator.forward(&out_a, pool);
        let pb = params.discriminator.forward(&out_b, pool);
        let l_gen = adversarial_losses(&[], pa.as_slice().unwrap()).1 + adversarial_losses(&[], pb.as_slice().unwrap()).1;
        total += w.w_adv * l_gen;
    }
    Ok(total)
}

/// Forward and backward through the full generator objective. The
/// discriminator is only differentiated w.r.t. its input.
pub fn generator_pass(params: &ModelParams, batch: &Batch, w: &LossWeights, adv_active: bool) -> Result<GeneratorPass> {
    for x in [&batch.in_a, &batch.in_b, &batch.gt_a, &batch.gt_b] {
        params.check_input(x)?;
    }
    let enc = &params.generator.encoder;
    let dec = &params.generator.decoder;
    let ta = enc.forward_traced(&batch.in_a);
    let tb = enc.forward_traced(&batch.in_b);
    let tga = enc.forward_traced(&batch.gt_a);
    let tgb = enc.forward_traced(&batch.gt_b);
    let (sa, sb, sga, sgb) = (ta.stack(), tb.stack(), tga.stack(), tgb.stack());

    let da = dec.forward_traced(&sa, &sb);
    let db = dec.forward_traced(&sb, &sa);
    let out_a = da.output().clone();
    let out_b = db.output().clone();

    let (la, mut d_out_a) = l1_l2_grad(out_a.view(), batch.gt_a.view());
    let (lb, mut d_out_b) = l1_l2_grad(out_b.view(), batch.gt_b.view());
    let l_spec = la + lb;
    d_out_a *= w.w_spec;
    d_out_b *= w.w_spec;

    let (l_lat_1, mut g_sa, mut g_sgb) = latent_loss_grad(&sa, &sgb);
    let (l_lat_2, mut g_sb, mut g_sga) = latent_loss_grad(&sb, &sga);
    let l_latent = l_lat_1 + l_lat_2;
    for g in g_sa.iter_mut().chain(&mut g_sgb).chain(&mut g_sb).chain(&mut g_sga) {
        *g *= w.w_latent;
    }

    let mut l_gen_adv = 0.0;
    if adv_active {
        let pool = params.config.disc_pool;
        let disc = &params.discriminator;
        let mut scratch = disc.zeros_like();
        for (out, d_out) in [(&out_a, &mut d_out_a), (&out_b, &mut d_out_b)] {
            let t = disc.forward_traced(out, pool);
            l_gen_adv += adversarial_losses(&[], t.prob.as_slice().unwrap()).1;
            let dp = d_log_one_minus(&t.prob) * w.w_adv;
            let dx = disc.backward(&t, &dp, &mut scratch, true).unwrap();
            *d_out += &dx;
        }
    }

    let mut grad = params.generator.zeros_like();
    let ga = dec.backward(&da, d_out_a, &mut grad.decoder, &sa);
    let gb = dec.backward(&db, d_out_b, &mut grad.decoder, &sb);
    drop((da, db));
    for (i, (own, other)) in ga.own.into_iter().zip(gb.other).enumerate() {
        g_sa[i] += &own;
        g_sa[i] += &other;
    }
    for (i, (own, other)) in gb.own.into_iter().zip(ga.other).enumerate() {
        g_sb[i] += &own;
        g_sb[i] += &other;
    }
    enc.backward(&ta, g_sa, &mut grad.encoder, false);
    enc.backward(&tb, g_sb, &mut grad.encoder, false);
    enc.backward(&tga, g_sga, &mut grad.encoder, false);
    enc.backward(&tgb, g_sgb, &mut grad.encoder, false);

    let total = w.w_spec * l_spec + w.w_latent * l_latent + if adv_active { w.w_adv * l_gen_adv } else { 0.0 };
    Ok(GeneratorPass {
        l_spec,
        l_latent,
        l_gen_adv,
        total,
        grad,
        out_a,
        out_b,
    })
}

/// Discriminator loss on `(real, fake)` pairs, summed over pairs, and its
/// parameter gradient. Fakes are treated as constants.
pub fn discriminator_pass(params: &ModelParams, pairs: &[(&Array4<f64>, &Array4<f64>)]) -> (f64, crate::model::Discriminator) {
    let disc = &params.discriminator;
    let pool = params.config.disc_pool;
    let mut grad = disc.zeros_like();
    let mut loss = 0.0;
    for (real, fake) in pairs {
        let tr = disc.forward_traced(real, pool);
        let tf = disc.forward_traced(fake, pool);
        loss += adversarial_losses(tr.prob.as_slice().unwrap(), tf.prob.as_slice().unwrap()).0;
        disc.backward(&tr, &-d_log(&tr.prob), &mut grad, false);
        disc.backward(&tf, &-d_log_one_minus(&tf.prob), &mut grad, false);
    }
    (loss, grad)
}

/// One generator update, followed by one discriminator update once the
/// adversarial phase is active.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut Optimizers,
    batch: &Batch,
    cfg: &TrainConfig,
    epoch: usize,
    step: usize,
) -> Result<LossReport> {
    let adv_active = cfg.adv_active(epoch);
    let mut gen = generator_pass(params, batch, &cfg.loss_weights, adv_active)?;
    let diverged = |detail: String| Error::Diverged { epoch, step, detail };
    if !gen.total.is_finite() {
        return Err(diverged(format!(
            "generator loss {} (spec {}, latent {}, adv {})",
            gen.total, gen.l_spec, gen.l_latent, gen.l_gen_adv
        )));
    }
    if let Some(c) = cfg.clip_norm {
        let norm = clip_grad_norm(&mut gen.grad, c);
        if !norm.is_finite() {
            return Err(diverged("non-finite generator gradient".into()));
        }
    }
    opt.generator.step(&mut params.generator, &gen.grad);

    let mut l_disc = 0.0;
    if adv_active {
        let (loss, mut grad) = discriminator_pass(params, &[(&batch.gt_a, &gen.out_a), (&batch.gt_b, &gen.out_b)]);
        if !loss.is_finite() {
            return Err(diverged(format!("discriminator loss {loss}")));
        }
        if let Some(c) = cfg.clip_norm {
            clip_grad_norm(&mut grad, c);
        }
        opt.discriminator.step(&mut params.discriminator, &grad);
        l_disc = loss;
    }

    Ok(LossReport {
        epoch,
        step,
        l_spec: gen.l_spec,
        l_latent: gen.l_latent,
        l_gen_adv: gen.l_gen_adv,
        l_disc,
        adv_active,
    })
}

/// Quad descriptors plus the machinery to render them into spectrograms.
pub struct TrainData {
    factory: QuadFactory,
    records: Vec<QuadRecord>,
    stft: Stft,
    cache: HashMap<String, Arc<QuadTensors>>,
}

impl TrainData {
    pub fn new(factory: QuadFactory, records: Vec<QuadRecord>, model: &ModelConfig) -> Result<Self> {
        let stft = Stft::new(model.stft_config())?;
        let needed = stft.config().samples_for_frames(model.time_frames);
        if factory.clip_frames() != needed {
            return Err(Error::Manifest(format!(
                "clips are {} samples but the model expects {needed} ({} frames)",
                factory.clip_frames(),
                model.time_frames
            )));
        }
        Ok(Self {
            factory,
            records,
            stft,
            cache: HashMap::new(),
        })
    }

    pub fn from_manifest(m: &DatasetManifest, model: &ModelConfig, allow_resample: bool) -> Result<Self> {
        Self::new(m.factory(allow_resample), m.quads.clone(), model)
    }

    pub fn records(&self) -> &[QuadRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn factory_mut(&mut self) -> &mut QuadFactory {
        &mut self.factory
    }

    fn key(rec: &QuadRecord) -> String {
        serde_json::to_string(rec).expect("record serialises")
    }

    /// Renders the given records; independent quads are built in parallel.
    pub fn tensors(&mut self, recs: &[QuadRecord], cache: bool) -> Result<Vec<Arc<QuadTensors>>> {
        let mut quads = Vec::with_capacity(recs.len());
        let mut todo = Vec::new();
        for (i, r) in recs.iter().enumerate() {
            match self.cache.get(&Self::key(r)) {
                Some(t) => quads.push(Some(t.clone())),
                None => {
                    quads.push(None);
                    todo.push((i, self.factory.build(r)?));
                }
            }
        }
        let stft = &self.stft;
        let built: Vec<(usize, Result<QuadTensors>)> = todo
            .into_par_iter()
            .map(|(i, q)| (i, QuadTensors::from_quad(&q, stft)))
            .collect();
        for (i, t) in built {
            let t = Arc::new(t?);
            if cache {
                self.cache.insert(Self::key(&recs[i]), t.clone());
            }
            quads[i] = Some(t);
        }
        Ok(quads.into_iter().map(|q| q.expect("filled")).collect())
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    /// Epochs completed in total (including resumed ones).
    pub epochs_completed: usize,
    pub reports: Vec<LossReport>,
    pub last_checkpoint: PathBuf,
    pub params: ModelParams,
}

pub const LOSS_LOG: &str = "loss_log.jsonl";
pub const CONFIG_FILE: &str = "train_config.toml";

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.ckpt"))
}

/// Highest-numbered checkpoint in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for e in std::fs::read_dir(dir)? {
        let path = e?.path();
        let epoch = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch_")?.strip_suffix(".ckpt")?.parse::<usize>().ok());
        if let Some(ep) = epoch {
            if best.as_ref().is_none_or(|(b, _)| ep > *b) {
                best = Some((ep, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

fn save_state(dir: &Path, params: &ModelParams, opt: &Optimizers, cfg: &TrainConfig, epoch: usize, step: usize) -> Result<PathBuf> {
    let mut ck = Checkpoint::new(params, epoch, step);
    opt.generator.save_into(&mut ck, "opt.generator");
    opt.discriminator.save_into(&mut ck, "opt.discriminator");
    ck.meta.extra = serde_json::json!({
        "opt_generator_t": opt.generator.t,
        "opt_discriminator_t": opt.discriminator.t,
        "train_config": cfg,
    });
    let path = checkpoint_path(dir, epoch);
    ck.save(&path)?;
    Ok(path)
}

/// Restores parameters, optimiser state and the completed-epoch count.
pub fn load_state(path: &Path, cfg: &TrainConfig) -> Result<(ModelParams, Optimizers, usize, usize)> {
    let ck = Checkpoint::load(path)?;
    let params = ck.params()?;
    let mut opt = Optimizers::new(&params, cfg);
    if ck.has_prefix("opt.") {
        let t = |k: &str| ck.meta.extra.get(k).and_then(|v| v.as_u64()).unwrap_or(0);
        opt.generator.load_from(&ck, "opt.generator", t("opt_generator_t"))?;
        opt.discriminator.load_from(&ck, "opt.discriminator", t("opt_discriminator_t"))?;
    }
    Ok((params, opt, ck.meta.epoch, ck.meta.step))
}

/// Keeps only log records from epochs before `epoch`.
fn truncate_log(path: &Path, epoch: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<LossReport> = crate::databus::read_jsonl::<LossReport>(path)?
        .into_iter()
        .filter(|r| r.epoch < epoch)
        .collect();
    crate::databus::write_jsonl(path, &kept)
}

/// Full training run writing `epoch_NNNN.ckpt` after every epoch plus a
/// JSONL loss log into `out_dir`. With `resume`, continues from the latest
/// checkpoint found there.
pub fn train(
    data: &mut TrainData,
    model: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: bool,
    log: &mut dyn FnMut(&str),
) -> Result<TrainSummary> {
    cfg.validate()?;
    model.validate()?;
    if data.is_empty() {
        return Err(Error::Manifest("dataset has no quads".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    let log_path = out_dir.join(LOSS_LOG);

    let resumed = if resume { latest_checkpoint(out_dir)? } else { None };
    let (mut params, mut opt, start_epoch, mut step) = match &resumed {
        Some(path) => {
            let (p, mut o, e, s) = load_state(path, cfg)?;
            if &p.config != model {
                return Err(Error::Checkpoint("checkpoint model config differs from the requested one".into()));
            }
            o.set_lr(cfg.lr);
            log(&format!("resuming from {} at epoch {e}", path.display()));
            (p, o, e, s)
        }
        None => {
            let p = ModelParams::new(model.clone(), cfg.seed)?;
            let o = Optimizers::new(&p, cfg);
            (p, o, 0, 0)
        }
    };
    if resumed.is_some() {
        truncate_log(&log_path, start_epoch)?;
    } else if log_path.exists() {
        std::fs::remove_file(&log_path)?;
    }

    let mut last = match &resumed {
        Some(p) => p.clone(),
        None => checkpoint_path(out_dir, 0),
    };
    if cfg.total_epochs == 0 && resumed.is_none() {
        last = save_state(out_dir, &params, &opt, cfg, 0, 0)?;
    }

    let n = data.len();
    let steps = cfg.steps_per_epoch.unwrap_or(n.div_ceil(cfg.batch_size));
    let mut reports = Vec::new();
    for epoch in start_epoch..cfg.total_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0xa076_1d64_78bd_642f));
        order.shuffle(&mut rng);
        let mut cursor = 0;
        let mut epoch_spec = 0.0;
        for _ in 0..steps {
            let recs: Vec<QuadRecord> = (0..cfg.batch_size)
                .map(|_| {
                    let r = &data.records[order[cursor % n]];
                    cursor += 1;
                    if cfg.redraw_gamma {
                        r.for_epoch(epoch)
                    } else {
                        r.clone()
                    }
                })
                .collect();
            let tensors = data.tensors(&recs, cfg.cache_quads)?;
            let refs: Vec<&QuadTensors> = tensors.iter().map(|t| t.as_ref()).collect();
            let batch = Batch::stack(&refs)?;
            let report = train_step(&mut params, &mut opt, &batch, cfg, epoch, step)?;
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&log_path)?;
            serde_json::to_writer(&mut f, &report)?;
            f.write_all(b"\n")?;
            epoch_spec += report.l_spec;
            reports.push(report);
            step += 1;
        }
        last = save_state(out_dir, &params, &opt, cfg, epoch + 1, step)?;
        log(&format!(
            "epoch {} done: mean l_spec {:.6}, adv {}",
            epoch + 1,
            epoch_spec / steps as f64,
            cfg.adv_active(epoch)
        ));
    }

    Ok(TrainSummary {
        epochs_completed: cfg.total_epochs.max(start_epoch),
        reports,
        last_checkpoint: last,
        params,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    /// Probes discarded because a ReLU/abs kink fell inside `[-h, h]`.
    pub kinks_skipped: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }
}

fn nudge(p: &mut ModelParams, tensor: usize, idx: usize, delta: f64) {
    let mut seen = 0;
    p.generator.visit_mut("", &mut |_, mut t| {
        if seen == tensor {
            *t.iter_mut().nth(idx).unwrap() += delta;
        }
        seen += 1;
    });
}

/// Gradients smaller than this are compared in absolute terms; below it
/// central differences are dominated by rounding.
pub const GRAD_FLOOR: f64 = 1e-5;

/// Compares analytic generator gradients with central differences at
/// `samples` randomly chosen parameters. A probe whose one-sided slopes
/// disagree by more than `tol` (relative) straddles a kink of the piecewise
/// linear network and is replaced by another draw.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    params: &ModelParams,
    batch: &Batch,
    w: &LossWeights,
    adv_active: bool,
    samples: usize,
    step: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    use rand::Rng;
    let pass = generator_pass(params, batch, w, adv_active)?;
    let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
    pass.grad.visit("", &mut |name, t| grads.push((name, t.iter().copied().collect())));
    let f0 = generator_objective(params, batch, w, adv_active)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut entries = Vec::with_capacity(samples);
    let mut kinks_skipped = 0;
    let mut k = 0;
    while entries.len() < samples {
        if k > 4 * samples + 100 {
            return Err(Error::InvalidArgument("too many kinks; use a smaller step".into()));
        }
        // cycle through tensors so every layer is covered
        let ti = k % grads.len();
        k += 1;
        let (name, g) = &grads[ti];
        let idx = rng.gen_range(0..g.len());
        let mut eval = |delta: f64| -> Result<f64> {
            nudge(&mut probe, ti, idx, delta);
            let f = generator_objective(&probe, batch, w, adv_active);
            nudge(&mut probe, ti, idx, -delta);
            f
        };
        let (fp, fm) = (eval(step)?, eval(-step)?);
        let numeric = (fp - fm) / (2.0 * step);
        let analytic = g[idx];
        let scale = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
        let one_sided_gap = ((fp - f0) - (f0 - fm)).abs() / step;
        if one_sided_gap > tol * scale {
            kinks_skipped += 1;
            continue;
        }
        entries.push(GradCheckEntry {
            name: format!("generator.{name}"),
            index: idx,
            analytic,
            numeric,
            rel_error: (analytic - numeric).abs() / scale,
        });
    }
    Ok(GradCheckReport { entries, kinks_skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr2, Array2};

    #[test]
    fn spec_loss_hand_values() {
        let t = Array2::<f64>::zeros((2, 2));
        assert_eq!(spec_loss(t.view(), t.view()).unwrap(), 0.0);
        let p = &t + 1.0;
        assert_abs_diff_eq!(spec_loss(p.view(), t.view()).unwrap(), 2.0, epsilon = 1e-15);
        let e = 0.1;
        let half = arr2(&[[e, 0.0], [e, 0.0]]);
        assert_abs_diff_eq!(spec_loss(half.view(), t.view()).unwrap(), e / 2.0 + e * e / 2.0, epsilon = 1e-15);
        let wrong = Array2::<f64>::zeros((2, 3));
        assert!(spec_loss(wrong.view(), t.view()).is_err());
    }

    fn stack(layers: Vec<Array4<f64>>) -> LatentStack {
        LatentStack { layers }
    }

    #[test]
    fn latent_loss_touches_only_reverb_halves() {
        let base = stack(vec![Array4::from_elem((1, 4, 2, 2), 0.5)]);
        assert_eq!(latent_loss(&base, &base).unwrap(), 0.0);
        let mut src = base.clone();
        src.layers[0].slice_mut(s![.., ..2, .., ..]).fill(9.0);
        assert_eq!(latent_loss(&src, &base).unwrap(), 0.0);
        let c = -0.3;
        let mut rev = base.clone();
        rev.reverb_half_mut(0).mapv_inplace(|v| v + c);
        assert_abs_diff_eq!(latent_loss(&rev, &base).unwrap(), c.abs() + c * c, epsilon = 1e-15);
    }

    #[test]
    fn adversarial_hand_values() {
        let (d, _) = adversarial_losses(&[1.0 - PROB_EPS], &[PROB_EPS]);
        assert!(d < 1e-6);
        let (d, g) = adversarial_losses(&[0.5], &[0.5]);
        assert_abs_diff_eq!(d, 1.3862943611198906, epsilon = 1e-12);
        assert_abs_diff_eq!(g, 0.5f64.ln(), epsilon = 1e-15);
        let (_, g) = adversarial_losses(&[0.5], &[PROB_EPS]);
        assert!(g.abs() < 1e-6);
        // exact 0 and 1 are clamped rather than producing infinities
        let (d, g) = adversarial_losses(&[0.0], &[1.0]);
        assert!(d.is_finite() && g.is_finite());
    }

    #[test]
    fn radam_matches_hand_rolled_first_steps() {
        // scalar problem; the first five steps (rho_t <= 5) are bias-corrected SGD with momentum
        let cfg = TrainConfig::default();
        let mut p = NamedTensors(vec![("x".into(), ArrayD::from_elem(ndarray::IxDyn(&[1]), 1.0))]);
        let mut opt = RAdam::new(&p, &cfg);
        let g = NamedTensors(vec![("x".into(), ArrayD::from_elem(ndarray::IxDyn(&[1]), 0.5))]);
        let mut x = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        let rho_inf = 2.0 / (1.0 - 0.999) - 1.0;
        for t in 1..=10 {
            opt.step(&mut p, &g);
            m = 0.9 * m + 0.1 * 0.5;
            v = 0.999 * v + 0.001 * 0.25;
            let tf = t as f64;
            let mh = m / (1.0 - 0.9f64.powf(tf));
            let rho = rho_inf - 2.0 * tf * 0.999f64.powf(tf) / (1.0 - 0.999f64.powf(tf));
            if rho > 5.0 {
                let r = ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt();
                let vh = (v / (1.0 - 0.999f64.powf(tf))).sqrt();
                x -= 1e-3 * mh * r / (vh + 1e-8 / (1.0 - 0.999f64.powf(tf)).sqrt());
            } else {
                x -= 1e-3 * mh;
            }
            assert_abs_diff_eq!(p.0[0].1[[0]], x, epsilon = 1e-12);
        }
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = NamedTensors(vec![
            ("a".into(), ArrayD::from_elem(ndarray::IxDyn(&[2]), 3.0)),
            ("b".into(), ArrayD::from_elem(ndarray::IxDyn(&[1]), 4.0)),
        ]);
        let before = clip_grad_norm(&mut g, 5.0);
        assert_abs_diff_eq!(before, 34f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(g.squared_norm().sqrt(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn config_toml_round_trip_and_validation() {
        let cfg = TrainConfig {
            seed: 7,
            cache_quads: true,
            ..TrainConfig::default()
        };
        let text = cfg.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(TrainConfig::from_toml("lr = 0.01").unwrap().adv_start_epoch, 20);
        let bad = TrainConfig {
            adv_start_epoch: 5,
            total_epochs: 3,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(!cfg.adv_active(19));
        assert!(cfg.adv_active(20));
    }
}
