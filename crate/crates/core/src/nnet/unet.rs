use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{self, voxels};
use super::Scalar;
use crate::error::{PsatError, Result};
use crate::plan::TrainingPlan;

/// Smoothing constant of the soft-Dice term.
pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub num_levels: usize,
    pub base_channels: usize,
    pub patch_size: [usize; 3],
}

/// One convolution layer in parameter order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel_volume: usize,
}

impl UNetConfig {
    pub fn new(num_classes: usize, num_levels: usize, base_channels: usize, patch_size: [usize; 3]) -> Result<Self> {
        let cfg = UNetConfig { in_channels: 1, num_classes, num_levels, base_channels, patch_size };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_plan(plan: &TrainingPlan, num_classes: usize) -> Result<Self> {
        Self::new(num_classes, plan.num_levels, plan.base_channels, plan.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 {
            return Err(PsatError::invalid("network takes a single input channel"));
        }
        if self.num_classes < 2 {
            return Err(PsatError::invalid("need background plus at least one foreground class"));
        }
        if self.base_channels == 0 || self.num_levels == 0 {
            return Err(PsatError::invalid("base_channels and num_levels must be positive"));
        }
        let div = 1usize << self.num_levels;
        if self.patch_size.iter().any(|&p| p == 0 || p % div != 0) {
            return Err(PsatError::invalid(format!(
                "patch {:?} not divisible by 2^{}",
                self.patch_size, self.num_levels
            )));
        }
        Ok(())
    }

    /// Width at resolution level `l`: doubles per level, capped at 8x base.
    pub fn channels(&self, level: usize) -> usize {
        (self.base_channels << level.min(3)).min(8 * self.base_channels)
    }

    pub fn level_dims(&self, level: usize) -> [usize; 3] {
        self.patch_size.map(|p| p >> level)
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let l_max = self.num_levels;
        let mut out = Vec::new();
        let conv = |name: String, cin, cout| LayerSpec { name, cin, cout, kernel_volume: 27 };
        for l in 0..=l_max {
            let cin = if l == 0 { self.in_channels } else { self.channels(l - 1) };
            out.push(conv(format!("enc{l}.conv1"), cin, self.channels(l)));
            out.push(conv(format!("enc{l}.conv2"), self.channels(l), self.channels(l)));
        }
        for l in (0..l_max).rev() {
            let cin = self.channels(l + 1) + self.channels(l);
            out.push(conv(format!("dec{l}.conv1"), cin, self.channels(l)));
            out.push(conv(format!("dec{l}.conv2"), self.channels(l), self.channels(l)));
        }
        out.push(LayerSpec {
            name: "head".into(),
            cin: self.channels(0),
            cout: self.num_classes,
            kernel_volume: 1,
        });
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|s| s.cout * s.cin * s.kernel_volume + s.cout).sum()
    }

    fn enc_layer(&self, level: usize, conv: usize) -> usize {
        2 * level + conv
    }

    fn dec_layer(&self, level: usize, conv: usize) -> usize {
        2 * (self.num_levels + 1) + 2 * (self.num_levels - 1 - level) + conv
    }

    fn head_layer(&self) -> usize {
        4 * self.num_levels + 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Named parameters in fixed order (weight, bias per layer) plus Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    pub config: UNetConfig,
    pub tensors: Vec<Tensor<T>>,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> ParamStore<T> {
    pub fn zeros(config: &UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut tensors = Vec::new();
        for layer in config.layers() {
            let wshape = if layer.kernel_volume == 27 {
                vec![layer.cout, layer.cin, 3, 3, 3]
            } else {
                vec![layer.cout, layer.cin]
            };
            let wlen = wshape.iter().product();
            tensors.push(Tensor { name: format!("{}.weight", layer.name), shape: wshape, data: vec![T::zero(); wlen] });
            tensors.push(Tensor {
                name: format!("{}.bias", layer.name),
                shape: vec![layer.cout],
                data: vec![T::zero(); layer.cout],
            });
        }
        let first_moment = tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect();
        let second_moment = tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect();
        Ok(ParamStore { config: config.clone(), tensors, first_moment, second_moment, step: 0 })
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Same parameters in another precision; optimizer state is reset.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let tensors: Vec<Tensor<U>> = self
            .tensors
            .iter()
            .map(|t| Tensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                data: t.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
            })
            .collect();
        let first_moment = tensors.iter().map(|t| vec![U::zero(); t.data.len()]).collect();
        let second_moment = tensors.iter().map(|t| vec![U::zero(); t.data.len()]).collect();
        ParamStore { config: self.config.clone(), tensors, first_moment, second_moment, step: 0 }
    }

    /// Drop the optimizer state, keeping the weights.
    pub fn reset_optimizer(&mut self) {
        for m in self.first_moment.iter_mut().chain(self.second_moment.iter_mut()) {
            m.fill(T::zero());
        }
        self.step = 0;
    }

    fn weight(&self, layer: usize) -> &[T] {
        &self.tensors[2 * layer].data
    }

    fn bias(&self, layer: usize) -> &[T] {
        &self.tensors[2 * layer + 1].data
    }
}

/// He (fan-in) Gaussian weights, zero biases.
pub fn init<T: Scalar>(config: &UNetConfig, seed: u64) -> Result<ParamStore<T>> {
    let mut store = ParamStore::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (i, layer) in config.layers().iter().enumerate() {
        let fan_in = (layer.cin * layer.kernel_volume) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        for w in store.tensors[2 * i].data.iter_mut() {
            *w = T::of_f64(normal.sample(&mut rng));
        }
    }
    Ok(store)
}

/// Single-channel patches, item-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub items: usize,
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(items: usize, dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        if data.len() != items * voxels(dims) {
            return Err(PsatError::ShapeMismatch(format!(
                "batch of {items} x {dims:?} needs {} values, got {}",
                items * voxels(dims),
                data.len()
            )));
        }
        Ok(Batch { items, dims, data })
    }

    pub fn item(&self, i: usize) -> &[T] {
        let n = voxels(self.dims);
        &self.data[i * n..(i + 1) * n]
    }
}

/// Class logits laid out `(item, class, z, y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    pub items: usize,
    pub classes: usize,
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Scalar> Logits<T> {
    pub fn item(&self, i: usize) -> &[T] {
        let n = self.classes * voxels(self.dims);
        &self.data[i * n..(i + 1) * n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub dice_term: f64,
    pub ce_term: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(p: &ParamStore<T>) -> Self {
        Gradients { tensors: p.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect() }
    }
}

struct ItemCache<T> {
    enc_in: Vec<Vec<T>>,
    enc_mid: Vec<Vec<T>>,
    enc_out: Vec<Vec<T>>,
    dec_cat: Vec<Vec<T>>,
    dec_mid: Vec<Vec<T>>,
    dec_out: Vec<Vec<T>>,
    logits: Vec<T>,
}

fn conv_block<T: Scalar>(p: &ParamStore<T>, layer: usize, x: &[T], cin: usize, dims: [usize; 3], cout: usize) -> Vec<T> {
    let mut y = ops::conv3_forward(x, cin, dims, p.weight(layer), p.bias(layer), cout);
    ops::leaky_relu_inplace(&mut y);
    y
}

fn forward_item<T: Scalar>(p: &ParamStore<T>, input: &[T]) -> ItemCache<T> {
    let cfg = &p.config;
    let l_max = cfg.num_levels;
    let mut cache = ItemCache {
        enc_in: Vec::with_capacity(l_max + 1),
        enc_mid: Vec::with_capacity(l_max + 1),
        enc_out: Vec::with_capacity(l_max + 1),
        dec_cat: (0..l_max).map(|_| Vec::new()).collect(),
        dec_mid: (0..l_max).map(|_| Vec::new()).collect(),
        dec_out: (0..l_max).map(|_| Vec::new()).collect(),
        logits: Vec::new(),
    };
    for l in 0..=l_max {
        let dims = cfg.level_dims(l);
        let (x, cin) = if l == 0 {
            (input.to_vec(), cfg.in_channels)
        } else {
            let c = cfg.channels(l - 1);
            (ops::avgpool2_forward(&cache.enc_out[l - 1], c, cfg.level_dims(l - 1)), c)
        };
        let ch = cfg.channels(l);
        let a = conv_block(p, cfg.enc_layer(l, 0), &x, cin, dims, ch);
        let e = conv_block(p, cfg.enc_layer(l, 1), &a, ch, dims, ch);
        cache.enc_in.push(x);
        cache.enc_mid.push(a);
        cache.enc_out.push(e);
    }
    for l in (0..l_max).rev() {
        let dims = cfg.level_dims(l);
        let below = if l + 1 == l_max { &cache.enc_out[l_max] } else { &cache.dec_out[l + 1] };
        let (cu, ch) = (cfg.channels(l + 1), cfg.channels(l));
        let mut cat = ops::upsample2_forward(below, cu, cfg.level_dims(l + 1));
        cat.extend_from_slice(&cache.enc_out[l]);
        let b = conv_block(p, cfg.dec_layer(l, 0), &cat, cu + ch, dims, ch);
        let d = conv_block(p, cfg.dec_layer(l, 1), &b, ch, dims, ch);
        cache.dec_cat[l] = cat;
        cache.dec_mid[l] = b;
        cache.dec_out[l] = d;
    }
    let top = if l_max == 0 { &cache.enc_out[0] } else { &cache.dec_out[0] };
    let head = cfg.head_layer();
    cache.logits = ops::conv1_forward(
        top,
        cfg.channels(0),
        voxels(cfg.patch_size),
        p.weight(head),
        p.bias(head),
        cfg.num_classes,
    );
    cache
}

fn backward_item<T: Scalar>(p: &ParamStore<T>, cache: &ItemCache<T>, d_logits: &[T], grads: &mut Gradients<T>) {
    let cfg = &p.config;
    let l_max = cfg.num_levels;
    let n0 = voxels(cfg.patch_size);

    // split borrows of the gradient slots for one layer
    fn slots<T>(g: &mut Gradients<T>, layer: usize) -> (&mut [T], &mut [T]) {
        let (lo, hi) = g.tensors.split_at_mut(2 * layer + 1);
        (&mut lo[2 * layer], &mut hi[0])
    }

    let head = cfg.head_layer();
    let (dw, db) = slots(grads, head);
    let mut d_up = ops::conv1_backward(
        &cache.dec_out[0],
        cfg.channels(0),
        n0,
        p.weight(head),
        cfg.num_classes,
        d_logits,
        dw,
        db,
    );

    let mut d_skip: Vec<Vec<T>> = (0..=l_max).map(|_| Vec::new()).collect();
    for l in 0..l_max {
        let dims = cfg.level_dims(l);
        let (cu, ch) = (cfg.channels(l + 1), cfg.channels(l));
        ops::leaky_relu_backward_inplace(&cache.dec_out[l], &mut d_up);
        let layer = cfg.dec_layer(l, 1);
        let (dw, db) = slots(grads, layer);
        let mut d_mid = ops::conv3_backward(&cache.dec_mid[l], ch, dims, p.weight(layer), ch, &d_up, dw, db, true)
            .expect("input gradient requested");
        ops::leaky_relu_backward_inplace(&cache.dec_mid[l], &mut d_mid);
        let layer = cfg.dec_layer(l, 0);
        let (dw, db) = slots(grads, layer);
        let mut d_cat =
            ops::conv3_backward(&cache.dec_cat[l], cu + ch, dims, p.weight(layer), ch, &d_mid, dw, db, true)
                .expect("input gradient requested");
        let split = cu * voxels(dims);
        d_skip[l] = d_cat.split_off(split);
        d_up = ops::upsample2_backward(&d_cat, cu, cfg.level_dims(l + 1));
    }
    d_skip[l_max] = d_up;

    for l in (0..=l_max).rev() {
        let dims = cfg.level_dims(l);
        let ch = cfg.channels(l);
        let mut d_e = std::mem::take(&mut d_skip[l]);
        ops::leaky_relu_backward_inplace(&cache.enc_out[l], &mut d_e);
        let layer = cfg.enc_layer(l, 1);
        let (dw, db) = slots(grads, layer);
        let mut d_mid = ops::conv3_backward(&cache.enc_mid[l], ch, dims, p.weight(layer), ch, &d_e, dw, db, true)
            .expect("input gradient requested");
        ops::leaky_relu_backward_inplace(&cache.enc_mid[l], &mut d_mid);
        let layer = cfg.enc_layer(l, 0);
        let cin = if l == 0 { cfg.in_channels } else { cfg.channels(l - 1) };
        let (dw, db) = slots(grads, layer);
        let d_in = ops::conv3_backward(&cache.enc_in[l], cin, dims, p.weight(layer), ch, &d_mid, dw, db, l > 0);
        if let Some(d_in) = d_in {
            let pooled = ops::avgpool2_backward(&d_in, cin, cfg.level_dims(l - 1));
            for (a, b) in d_skip[l - 1].iter_mut().zip(pooled) {
                *a = *a + b;
            }
        }
    }
}

fn check_batch<T: Scalar>(p: &ParamStore<T>, batch: &Batch<T>) -> Result<()> {
    if batch.dims != p.config.patch_size {
        return Err(PsatError::ShapeMismatch(format!(
            "batch spatial shape {:?} differs from network patch {:?}",
            batch.dims, p.config.patch_size
        )));
    }
    if batch.data.len() != batch.items * voxels(batch.dims) {
        return Err(PsatError::ShapeMismatch("batch buffer length inconsistent with its shape".into()));
    }
    Ok(())
}

pub fn forward<T: Scalar>(p: &ParamStore<T>, batch: &Batch<T>) -> Result<Logits<T>> {
    check_batch(p, batch)?;
    let mut data = Vec::with_capacity(batch.items * p.config.num_classes * voxels(batch.dims));
    for i in 0..batch.items {
        data.extend(forward_item(p, batch.item(i)).logits);
    }
    Ok(Logits { items: batch.items, classes: p.config.num_classes, dims: batch.dims, data })
}

/// Soft-Dice (batch-pooled, mean over foreground classes) plus voxel-mean
/// cross-entropy. Returns the loss and d(loss)/d(logits) per item.
fn compound_loss<T: Scalar>(
    logits: &[Vec<T>],
    labels: &[u16],
    classes: usize,
    n: usize,
    want_grad: bool,
) -> (LossValue, Vec<Vec<T>>) {
    let items = logits.len();
    let mut probs = vec![0.0f64; items * classes * n];
    let mut ce_sum = 0.0;
    let mut inter = vec![0.0; classes];
    let mut psum = vec![0.0; classes];
    let mut gsum = vec![0.0; classes];
    let mut z = vec![0.0; classes];
    for (i, lg) in logits.iter().enumerate() {
        let pr = &mut probs[i * classes * n..(i + 1) * classes * n];
        for v in 0..n {
            let mut zmax = f64::NEG_INFINITY;
            for c in 0..classes {
                z[c] = lg[c * n + v].as_f64();
                zmax = zmax.max(z[c]);
            }
            let mut s = 0.0;
            for zc in z.iter_mut() {
                *zc = (*zc - zmax).exp();
                s += *zc;
            }
            let t = labels[i * n + v] as usize;
            ce_sum += s.ln() - (lg[t * n + v].as_f64() - zmax);
            for c in 0..classes {
                let pc = z[c] / s;
                pr[c * n + v] = pc;
                psum[c] += pc;
            }
            inter[t] += pr[t * n + v];
            gsum[t] += 1.0;
        }
    }
    let total_vox = (items * n) as f64;
    let k = (classes - 1) as f64;
    let mut dice_mean = 0.0;
    let mut coef_hit = vec![0.0; classes];
    let mut coef_miss = vec![0.0; classes];
    for c in 1..classes {
        let denom = psum[c] + gsum[c] + DICE_SMOOTH;
        let num = 2.0 * inter[c] + DICE_SMOOTH;
        dice_mean += num / denom / k;
        // d(1 - mean dice)/dp_c at voxels with / without label c
        coef_hit[c] = -(2.0 * denom - num) / (denom * denom) / k;
        coef_miss[c] = num / (denom * denom) / k;
    }
    let ce_term = ce_sum / total_vox;
    let dice_term = 1.0 - dice_mean;
    let loss = LossValue { total: dice_term + ce_term, dice_term, ce_term };
    if !want_grad {
        return (loss, Vec::new());
    }

    let mut d_logits = Vec::with_capacity(items);
    let mut a = vec![0.0; classes];
    for i in 0..items {
        let pr = &probs[i * classes * n..(i + 1) * classes * n];
        let mut d = vec![T::zero(); classes * n];
        for v in 0..n {
            let t = labels[i * n + v] as usize;
            let mut pa = 0.0;
            for c in 0..classes {
                a[c] = if c == 0 {
                    0.0
                } else if c == t {
                    coef_hit[c]
                } else {
                    coef_miss[c]
                };
                pa += pr[c * n + v] * a[c];
            }
            for c in 0..classes {
                let pc = pr[c * n + v];
                let onehot = if c == t { 1.0 } else { 0.0 };
                d[c * n + v] = T::of_f64(pc * (a[c] - pa) + (pc - onehot) / total_vox);
            }
        }
        d_logits.push(d);
    }
    (loss, d_logits)
}

fn check_labels<T: Scalar>(p: &ParamStore<T>, batch: &Batch<T>, labels: &[u16]) -> Result<()> {
    if labels.len() != batch.data.len() {
        return Err(PsatError::ShapeMismatch(format!(
            "{} labels for {} voxels",
            labels.len(),
            batch.data.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= p.config.num_classes) {
        return Err(PsatError::invalid(format!("label {bad} outside [0, {})", p.config.num_classes)));
    }
    Ok(())
}

/// Loss without gradients (used by finite-difference checks).
pub fn loss<T: Scalar>(p: &ParamStore<T>, batch: &Batch<T>, labels: &[u16]) -> Result<LossValue> {
    check_batch(p, batch)?;
    check_labels(p, batch, labels)?;
    let logits: Vec<Vec<T>> = (0..batch.items).map(|i| forward_item(p, batch.item(i)).logits).collect();
    let (l, _) = compound_loss(&logits, labels, p.config.num_classes, voxels(batch.dims), false);
    Ok(l)
}

/// Loss plus a bitset of which activation inputs were positive, so callers
/// can tell whether a perturbation crossed a nonlinearity kink.
pub fn loss_and_signs<T: Scalar>(p: &ParamStore<T>, batch: &Batch<T>, labels: &[u16]) -> Result<(LossValue, Vec<u64>)> {
    check_batch(p, batch)?;
    check_labels(p, batch, labels)?;
    let mut bits = Vec::new();
    let mut word = 0u64;
    let mut filled = 0;
    let mut logits = Vec::with_capacity(batch.items);
    for i in 0..batch.items {
        let cache = forward_item(p, batch.item(i));
        let acts = [&cache.enc_mid, &cache.enc_out, &cache.dec_mid, &cache.dec_out];
        for v in acts.iter().flat_map(|a| a.iter()).flat_map(|a| a.iter()) {
            word = (word << 1) | u64::from(*v > T::zero());
            filled += 1;
            if filled == 64 {
                bits.push(word);
                word = 0;
                filled = 0;
            }
        }
        logits.push(cache.logits);
    }
    bits.push(word);
    let (l, _) = compound_loss(&logits, labels, p.config.num_classes, voxels(batch.dims), false);
    Ok((l, bits))
}

pub fn loss_and_grad<T: Scalar>(
    p: &ParamStore<T>,
    batch: &Batch<T>,
    labels: &[u16],
) -> Result<(LossValue, Gradients<T>)> {
    check_batch(p, batch)?;
    check_labels(p, batch, labels)?;
    let caches: Vec<ItemCache<T>> = (0..batch.items).map(|i| forward_item(p, batch.item(i))).collect();
    let logits: Vec<Vec<T>> = caches.iter().map(|c| c.logits.clone()).collect();
    let (l, d_logits) = compound_loss(&logits, labels, p.config.num_classes, voxels(batch.dims), true);
    if !l.total.is_finite() {
        return Err(PsatError::NonFinite(format!("loss became {}", l.total)));
    }
    drop(logits);
    let mut grads = Gradients::zeros_like(p);
    for (cache, d) in caches.iter().zip(&d_logits) {
        backward_item(p, cache, d, &mut grads);
    }
    Ok((l, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam. Gradients are screened for non-finite values before
/// any parameter is touched.
pub fn adam_step<T: Scalar>(p: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64, hyper: AdamHyper) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(PsatError::invalid(format!("learning rate {lr} must be finite and non-negative")));
    }
    if grads.tensors.len() != p.tensors.len() {
        return Err(PsatError::ShapeMismatch("gradient set does not match parameters".into()));
    }
    for (t, g) in p.tensors.iter().zip(&grads.tensors) {
        if g.len() != t.data.len() {
            return Err(PsatError::ShapeMismatch(format!("gradient for {} has wrong length", t.name)));
        }
        if g.iter().any(|v| !v.as_f64().is_finite()) {
            return Err(PsatError::NonFiniteGradient(t.name.clone()));
        }
    }
    p.step += 1;
    let t = p.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (idx, g) in grads.tensors.iter().enumerate() {
        let (m, v) = (&mut p.first_moment[idx], &mut p.second_moment[idx]);
        let w = &mut p.tensors[idx].data;
        for j in 0..g.len() {
            let gj = g[j].as_f64();
            let mj = hyper.beta1 * m[j].as_f64() + (1.0 - hyper.beta1) * gj;
            let vj = hyper.beta2 * v[j].as_f64() + (1.0 - hyper.beta2) * gj * gj;
            m[j] = T::of_f64(mj);
            v[j] = T::of_f64(vj);
            let upd = lr * (mj / bc1) / ((vj / bc2).sqrt() + hyper.eps);
            w[j] = T::of_f64(w[j].as_f64() - upd);
        }
    }
    if let Some(bad) = p.tensors.iter().find(|t| t.data.iter().any(|v| !v.as_f64().is_finite())) {
        return Err(PsatError::NonFinite(format!("parameter {} after update", bad.name)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_batch(items: usize, dims: [usize; 3], classes: usize, seed: u64) -> (Batch<f64>, Vec<u16>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = items * voxels(dims);
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels = (0..n).map(|_| rng.gen_range(0..classes as u16)).collect();
        (Batch::new(items, dims, data).unwrap(), labels)
    }

    // walks the architecture level by level without using `layers()`
    fn param_count_oracle(levels: usize, base: usize, classes: usize) -> usize {
        let ch = |l: usize| std::cmp::min(base * 2usize.pow(l as u32), 8 * base);
        let conv = |cin: usize, cout: usize| cin * cout * 27 + cout;
        let mut total = 0;
        let mut cin = 1;
        for l in 0..=levels {
            total += conv(cin, ch(l)) + conv(ch(l), ch(l));
            cin = ch(l);
        }
        for l in (0..levels).rev() {
            total += conv(ch(l + 1) + ch(l), ch(l)) + conv(ch(l), ch(l));
        }
        total + ch(0) * classes + classes
    }

    #[test]
    fn param_count_matches_shape_walk() {
        let cfg = UNetConfig::new(3, 2, 4, [16, 16, 16]).unwrap();
        let p: ParamStore<f32> = init(&cfg, 0).unwrap();
        assert_eq!(p.num_params(), param_count_oracle(2, 4, 3));
        assert_eq!(cfg.param_count(), p.num_params());
        // the channel cap kicks in from level 3 onwards
        let deep = UNetConfig::new(7, 5, 2, [32, 32, 32]).unwrap();
        assert_eq!(deep.channels(5), 16);
        assert_eq!(deep.param_count(), param_count_oracle(5, 2, 7));
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = UNetConfig::new(3, 2, 2, [8, 8, 8]).unwrap();
        let a: ParamStore<f32> = init(&cfg, 5).unwrap();
        let b: ParamStore<f32> = init(&cfg, 5).unwrap();
        let c: ParamStore<f32> = init(&cfg, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for t in a.tensors.iter().filter(|t| t.name.ends_with(".bias")) {
            assert!(t.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(UNetConfig::new(1, 2, 2, [8, 8, 8]).is_err());
        assert!(UNetConfig::new(3, 2, 2, [8, 8, 6]).is_err());
        assert!(UNetConfig::new(3, 0, 2, [8, 8, 8]).is_err());
    }

    #[test]
    fn forward_shapes_and_softmax() {
        let cfg = UNetConfig::new(4, 2, 2, [8, 8, 8]).unwrap();
        let p: ParamStore<f64> = init(&cfg, 1).unwrap();
        let (batch, _) = random_batch(2, [8, 8, 8], 4, 2);
        let out = forward(&p, &batch).unwrap();
        assert_eq!((out.items, out.classes, out.dims), (2, 4, [8, 8, 8]));
        let n = 512;
        for i in 0..2 {
            let lg = out.item(i);
            for v in 0..n {
                let m = (0..4).map(|c| lg[c * n + v]).fold(f64::MIN, f64::max);
                let s: f64 = (0..4).map(|c| (lg[c * n + v] - m).exp()).sum();
                let total: f64 = (0..4).map(|c| (lg[c * n + v] - m).exp() / s).sum();
                assert!((total - 1.0).abs() < 1e-6);
            }
        }
        let wrong = Batch::new(1, [16, 8, 8], vec![0.0; 1024]).unwrap();
        assert!(matches!(forward(&p, &wrong), Err(PsatError::ShapeMismatch(_))));
    }

    #[test]
    fn zero_network_gives_uniform_probabilities() {
        let cfg = UNetConfig::new(3, 2, 2, [8, 8, 8]).unwrap();
        let p: ParamStore<f32> = ParamStore::zeros(&cfg).unwrap();
        let batch = Batch::new(1, [8, 8, 8], vec![0.0f32; 512]).unwrap();
        let out = forward(&p, &batch).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_logits_balanced_labels_give_ln2() {
        let logits = vec![vec![0.0f64; 2 * 8]];
        let labels = [0, 1, 0, 1, 0, 1, 0, 1];
        let (l, _) = compound_loss(&logits, &labels, 2, 8, false);
        assert!((l.ce_term - std::f64::consts::LN_2).abs() < 1e-6);
        assert!((l.total - l.dice_term - l.ce_term).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_logits_give_small_loss() {
        let n = 64;
        let classes = 3;
        let labels: Vec<u16> = (0..n).map(|v| (v % 3) as u16).collect();
        let mut lg = vec![-20.0f64; classes * n];
        for v in 0..n {
            lg[labels[v] as usize * n + v] = 20.0;
        }
        let (l, _) = compound_loss(&[lg], &labels, classes, n, false);
        assert!(l.ce_term < 0.01 && l.dice_term < 0.01, "{l:?}");
    }

    #[test]
    fn loss_gradient_wrt_logits_matches_finite_differences() {
        let n = 20;
        let classes = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lg: Vec<Vec<f64>> = (0..2).map(|_| (0..classes * n).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let labels: Vec<u16> = (0..2 * n).map(|_| rng.gen_range(0..3)).collect();
        let (_, d) = compound_loss(&lg, &labels, classes, n, true);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..classes * n {
                let mut up = lg.clone();
                up[i][j] += h;
                let mut dn = lg.clone();
                dn[i][j] -= h;
                let fd = (compound_loss(&up, &labels, classes, n, false).0.total
                    - compound_loss(&dn, &labels, classes, n, false).0.total)
                    / (2.0 * h);
                assert!((fd - d[i][j]).abs() < 1e-8, "{fd} vs {}", d[i][j]);
            }
        }
    }

    #[test]
    fn adam_zero_grad_and_zero_lr_leave_params() {
        let cfg = UNetConfig::new(3, 2, 2, [8, 8, 8]).unwrap();
        let mut p: ParamStore<f32> = init(&cfg, 3).unwrap();
        let before = p.tensors.clone();
        let zero = Gradients::zeros_like(&p);
        adam_step(&mut p, &zero, 1e-3, AdamHyper::default()).unwrap();
        assert_eq!(p.tensors, before);
        assert_eq!(p.step, 1);
        let mut ones = Gradients::zeros_like(&p);
        for g in ones.tensors.iter_mut() {
            g.fill(1.0);
        }
        adam_step(&mut p, &ones, 0.0, AdamHyper::default()).unwrap();
        assert_eq!(p.tensors, before);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        // one step with constant g: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
        let cfg = UNetConfig::new(2, 1, 1, [2, 2, 2]).unwrap();
        let mut p: ParamStore<f64> = ParamStore::zeros(&cfg).unwrap();
        let mut g = Gradients::zeros_like(&p);
        g.tensors[0][0] = 0.37;
        g.tensors[1][0] = -2.0;
        adam_step(&mut p, &g, 1e-2, AdamHyper::default()).unwrap();
        let expect0 = -1e-2 * 0.37 / (0.37 + 1e-8);
        let expect1 = 1e-2 * 2.0 / (2.0 + 1e-8);
        assert!((p.tensors[0].data[0] - expect0).abs() < 1e-15);
        assert!((p.tensors[1].data[0] - expect1).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_nonfinite_gradient_by_name() {
        let cfg = UNetConfig::new(3, 2, 2, [8, 8, 8]).unwrap();
        let mut p: ParamStore<f32> = init(&cfg, 3).unwrap();
        let before = p.clone();
        let mut g = Gradients::zeros_like(&p);
        g.tensors[5][0] = f32::NAN;
        match adam_step(&mut p, &g, 1e-3, AdamHyper::default()) {
            Err(PsatError::NonFiniteGradient(name)) => assert_eq!(name, "enc1.conv1.bias"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p, before);
    }

    #[test]
    fn loss_and_grad_rejects_bad_labels() {
        let cfg = UNetConfig::new(3, 2, 2, [8, 8, 8]).unwrap();
        let p: ParamStore<f64> = init(&cfg, 3).unwrap();
        let (batch, mut labels) = random_batch(1, [8, 8, 8], 3, 1);
        labels[7] = 3;
        assert!(loss_and_grad(&p, &batch, &labels).is_err());
    }
}
