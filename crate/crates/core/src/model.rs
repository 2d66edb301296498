//! Desk-scale networks: a shared rectified affine trunk feeding either `m`
//! softmax branch heads (multi-branch model) or one sigmoid head (baseline),
//! with hand-written backpropagation and a mini-batch SGD loop.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aap::{
    aap_backward, aap_forward, aap_loss, random_priors, random_target, selection_margin, AapConfig,
    BranchProbabilities, GradcheckReport,
};
use crate::data::Dataset;
use crate::error::{AapError, Result};
use crate::matrix::Matrix;
use crate::metrics::{binarize, mean_accuracy, Thresholds};
use crate::priors::CoOccurrencePriors;

/// Contiguous hidden-unit ranges seen by each branch head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchLayout {
    slices: Vec<(usize, usize)>,
}

impl BranchLayout {
    /// With `global_first`, branch 0 sees all `d_h` units and the remaining
    /// `m - 1` branches split them into contiguous groups; otherwise all `m`
    /// branches split them.
    pub fn new(d_h: usize, m: usize, global_first: bool) -> Result<Self> {
        if m < 2 {
            return Err(AapError::Domain(format!("need at least 2 branches, got {m}")));
        }
        let parts = if global_first { m - 1 } else { m };
        if d_h < parts {
            return Err(AapError::Domain(format!(
                "hidden width {d_h} cannot be split into {parts} groups"
            )));
        }
        let mut slices = Vec::with_capacity(m);
        if global_first {
            slices.push((0, d_h));
        }
        let (base, extra) = (d_h / parts, d_h % parts);
        let mut start = 0;
        for g in 0..parts {
            let len = base + usize::from(g < extra);
            slices.push((start, start + len));
            start += len;
        }
        Ok(BranchLayout { slices })
    }

    pub fn from_slices(d_h: usize, slices: Vec<(usize, usize)>) -> Result<Self> {
        if slices.len() < 2 || slices.iter().any(|&(s, e)| s >= e || e > d_h) {
            return Err(AapError::Schema(format!(
                "invalid branch slices {slices:?} for width {d_h}"
            )));
        }
        Ok(BranchLayout { slices })
    }

    pub fn m(&self) -> usize {
        self.slices.len()
    }

    pub fn slice(&self, l: usize) -> (usize, usize) {
        self.slices[l]
    }

    pub fn slices(&self) -> &[(usize, usize)] {
        &self.slices
    }
}

/// Affine map `z = W x + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl Affine {
    fn init(out: usize, inp: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        Affine {
            w: Matrix::from_fn(out, inp, |_, _| rng.gen_range(-bound..=bound)),
            b: vec![0.0; out],
        }
    }

    fn zeros(out: usize, inp: usize) -> Self {
        Affine {
            w: Matrix::zeros(out, inp),
            b: vec![0.0; out],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim());
        (0..self.out_dim())
            .map(|r| self.b[r] + self.w.row(r).iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Accumulates parameter gradients for upstream `dz` at input `x` and
    /// returns the input gradient when `want_input` is set.
    fn backward(&self, x: &[f64], dz: &[f64], grad: &mut Affine, want_input: bool) -> Option<Vec<f64>> {
        let mut dx = want_input.then(|| vec![0.0; self.in_dim()]);
        for (r, &g) in dz.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.b[r] += g;
            for (gw, &v) in grad.w.row_mut(r).iter_mut().zip(x) {
                *gw += g * v;
            }
            if let Some(dx) = dx.as_mut() {
                for (d, &w) in dx.iter_mut().zip(self.w.row(r)) {
                    *d += g * w;
                }
            }
        }
        dx
    }

    fn tensors(&self) -> [&[f64]; 2] {
        [self.w.as_slice(), &self.b]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [self.w.as_mut_slice(), &mut self.b]
    }
}

pub fn relu(v: f64) -> f64 {
    v.max(0.0)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Parameter containers that can be walked tensor by tensor.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;
    fn zeros_like(&self) -> Self;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }
}

/// Rectified affine map from the input to `d_h` hidden units. With
/// `groups > 1` the weight matrix is block diagonal: hidden block `g` reads
/// only input block `g`, both split into `groups` contiguous blocks, so
/// branches over different hidden blocks see different input features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trunk {
    pub affine: Affine,
    pub groups: usize,
}

/// Trunk intermediates for one input.
#[derive(Clone, Debug)]
pub struct TrunkCache {
    pub x: Vec<f64>,
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl Trunk {
    fn init(d_in: usize, d_h: usize, groups: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut t = Trunk::zeros(d_in, d_h, groups)?;
        let bound = 1.0 / (t.fan_in() as f64).sqrt();
        for r in 0..d_h {
            let (s, e) = t.inputs_of(r);
            for v in &mut t.affine.w.row_mut(r)[s..e] {
                *v = rng.gen_range(-bound..=bound);
            }
        }
        Ok(t)
    }

    fn zeros(d_in: usize, d_h: usize, groups: usize) -> Result<Self> {
        let groups = groups.max(1);
        if d_in == 0 || d_h == 0 || !d_in.is_multiple_of(groups) || !d_h.is_multiple_of(groups) {
            return Err(AapError::Domain(format!(
                "d_in={d_in} and d_h={d_h} must be positive multiples of trunk groups={groups}"
            )));
        }
        Ok(Trunk {
            affine: Affine::zeros(d_h, d_in),
            groups,
        })
    }

    fn fan_in(&self) -> usize {
        self.d_in() / self.groups
    }

    /// Input columns connected to hidden unit `r`.
    fn inputs_of(&self, r: usize) -> (usize, usize) {
        let g = r / (self.d_h() / self.groups);
        (g * self.fan_in(), (g + 1) * self.fan_in())
    }

    pub fn d_in(&self) -> usize {
        self.affine.in_dim()
    }

    pub fn d_h(&self) -> usize {
        self.affine.out_dim()
    }

    fn forward(&self, x: &[f64]) -> Result<TrunkCache> {
        if x.len() != self.d_in() {
            return Err(AapError::Dimension {
                what: "input features",
                expected: self.d_in(),
                got: x.len(),
            });
        }
        let pre: Vec<f64> = (0..self.d_h())
            .map(|r| {
                let (s, e) = self.inputs_of(r);
                let w = &self.affine.w.row(r)[s..e];
                self.affine.b[r] + w.iter().zip(&x[s..e]).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let hidden = pre.iter().map(|&v| relu(v)).collect();
        Ok(TrunkCache {
            x: x.to_vec(),
            pre,
            hidden,
        })
    }

    fn backward(&self, cache: &TrunkCache, d_hidden: &[f64], grad: &mut Trunk) {
        for (r, (&g, &p)) in d_hidden.iter().zip(&cache.pre).enumerate() {
            if g == 0.0 || p <= 0.0 {
                continue;
            }
            grad.affine.b[r] += g;
            let (s, e) = self.inputs_of(r);
            for (gw, &v) in grad.affine.w.row_mut(r)[s..e].iter_mut().zip(&cache.x[s..e]) {
                *gw += g * v;
            }
        }
    }

    fn zeros_like(&self) -> Self {
        Trunk {
            affine: Affine::zeros(self.d_h(), self.d_in()),
            groups: self.groups,
        }
    }
}

/// Shared trunk plus `m` softmax heads over hidden-unit slices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiBranchNet {
    pub trunk: Trunk,
    pub layout: BranchLayout,
    pub heads: Vec<Affine>,
}

/// Forward intermediates of [`MultiBranchNet`].
#[derive(Clone, Debug)]
pub struct BranchCache {
    pub trunk: TrunkCache,
    pub probs: Matrix,
}

impl MultiBranchNet {
    pub fn new(
        d_in: usize,
        d_h: usize,
        groups: usize,
        k: usize,
        layout: BranchLayout,
        seed: u64,
    ) -> Result<Self> {
        if k < 2 {
            return Err(AapError::Domain(format!("need at least 2 attributes, got {k}")));
        }
        if layout.slices().iter().any(|&(_, e)| e > d_h) {
            return Err(AapError::Schema("branch slices exceed hidden width".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = Trunk::init(d_in, d_h, groups, &mut rng)?;
        let heads = layout
            .slices()
            .iter()
            .map(|&(s, e)| Affine::init(k, e - s, &mut rng))
            .collect();
        Ok(MultiBranchNet { trunk, layout, heads })
    }

    pub fn m(&self) -> usize {
        self.heads.len()
    }

    pub fn k(&self) -> usize {
        self.heads[0].out_dim()
    }

    pub fn d_in(&self) -> usize {
        self.trunk.d_in()
    }

    pub fn d_h(&self) -> usize {
        self.trunk.d_h()
    }

    /// Row `l` of the result is the softmax of head `l` on its hidden slice.
    pub fn forward_branches(&self, x: &[f64]) -> Result<BranchCache> {
        let trunk = self.trunk.forward(x)?;
        let mut probs = Matrix::zeros(self.m(), self.k());
        for (l, head) in self.heads.iter().enumerate() {
            let (s, e) = self.layout.slice(l);
            let z = head.apply(&trunk.hidden[s..e]);
            probs.row_mut(l).copy_from_slice(&softmax(&z));
        }
        Ok(BranchCache { trunk, probs })
    }

    /// Accumulates into `grad` the parameter gradient for upstream `d_probs`.
    pub fn backward_to_params(&self, d_probs: &Matrix, cache: &BranchCache, grad: &mut Self) -> Result<()> {
        if d_probs.shape() != (self.m(), self.k()) || cache.probs.shape() != d_probs.shape() {
            return Err(AapError::Contract(format!(
                "gradient is {:?}, cache {:?}, model {}x{}",
                d_probs.shape(),
                cache.probs.shape(),
                self.m(),
                self.k()
            )));
        }
        let mut d_hidden = vec![0.0; self.d_h()];
        for (l, head) in self.heads.iter().enumerate() {
            let p = cache.probs.row(l);
            let g = d_probs.row(l);
            let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
            let dz: Vec<f64> = p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)).collect();
            let (s, e) = self.layout.slice(l);
            let dh = head
                .backward(&cache.trunk.hidden[s..e], &dz, &mut grad.heads[l], true)
                .expect("input gradient requested");
            for (acc, v) in d_hidden[s..e].iter_mut().zip(dh) {
                *acc += v;
            }
        }
        self.trunk.backward(&cache.trunk, &d_hidden, &mut grad.trunk);
        Ok(())
    }

    /// Loss and accumulated parameter gradient of the pooled objective for
    /// one instance.
    pub fn aap_instance_grad(
        &self,
        x: &[f64],
        y: &[u8],
        priors: &CoOccurrencePriors,
        config: &AapConfig,
        grad: &mut Self,
    ) -> Result<f64> {
        let cache = self.forward_branches(x)?;
        let probs = BranchProbabilities::new(cache.probs.clone())?;
        let fwd = aap_forward(&probs, priors, config)?;
        let loss = aap_loss(&fwd.phat, y)?;
        let d_probs = aap_backward(&fwd, y, priors)?;
        self.backward_to_params(&d_probs, &cache, grad)?;
        Ok(loss)
    }

    /// Branch forward followed by the pooling layer.
    pub fn predict(&self, x: &[f64], priors: &CoOccurrencePriors, lambda: f64) -> Result<Vec<f64>> {
        let cache = self.forward_branches(x)?;
        let config = AapConfig::with_lambda(lambda)?;
        Ok(aap_forward(&BranchProbabilities::new(cache.probs)?, priors, &config)?.phat)
    }
}

impl Parameters for MultiBranchNet {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.trunk.affine.tensors().to_vec();
        for h in &self.heads {
            out.extend(h.tensors());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.trunk.affine.tensors_mut().into_iter().collect();
        for h in &mut self.heads {
            out.extend(h.tensors_mut());
        }
        out
    }

    fn zeros_like(&self) -> Self {
        MultiBranchNet {
            trunk: self.trunk.zeros_like(),
            layout: self.layout.clone(),
            heads: self
                .heads
                .iter()
                .map(|h| Affine::zeros(h.out_dim(), h.in_dim()))
                .collect(),
        }
    }
}

/// Shared trunk plus one sigmoid classifier per attribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineNet {
    pub trunk: Trunk,
    pub head: Affine,
}

impl BaselineNet {
    pub fn new(d_in: usize, d_h: usize, groups: usize, k: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(AapError::Domain(format!("need at least 2 attributes, got {k}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = Trunk::init(d_in, d_h, groups, &mut rng)?;
        let head = Affine::init(k, d_h, &mut rng);
        Ok(BaselineNet { trunk, head })
    }

    pub fn k(&self) -> usize {
        self.head.out_dim()
    }

    pub fn d_in(&self) -> usize {
        self.trunk.d_in()
    }

    pub fn d_h(&self) -> usize {
        self.trunk.d_h()
    }

    pub fn logits(&self, x: &[f64]) -> Result<(TrunkCache, Vec<f64>)> {
        let trunk = self.trunk.forward(x)?;
        let z = self.head.apply(&trunk.hidden);
        Ok((trunk, z))
    }

    /// Per-attribute sigmoid probabilities.
    pub fn baseline_forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.logits(x)?.1.into_iter().map(sigmoid).collect())
    }

    /// Mean binary cross-entropy over attributes; accumulates its gradient.
    pub fn bce_instance_grad(&self, x: &[f64], y: &[u8], grad: &mut Self) -> Result<f64> {
        if y.len() != self.k() {
            return Err(AapError::Dimension {
                what: "label vector",
                expected: self.k(),
                got: y.len(),
            });
        }
        let (trunk, z) = self.logits(x)?;
        let inv_k = 1.0 / self.k() as f64;
        let mut loss = 0.0;
        let mut dz = Vec::with_capacity(z.len());
        for (&zi, &yi) in z.iter().zip(y) {
            let t = f64::from(yi);
            // softplus(z) - t z, evaluated stably
            loss += zi.max(0.0) + (-zi.abs()).exp().ln_1p() - t * zi;
            dz.push((sigmoid(zi) - t) * inv_k);
        }
        let dh = self
            .head
            .backward(&trunk.hidden, &dz, &mut grad.head, true)
            .expect("input gradient requested");
        self.trunk.backward(&trunk, &dh, &mut grad.trunk);
        Ok(loss * inv_k)
    }
}

impl Parameters for BaselineNet {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.trunk.affine.tensors().to_vec();
        out.extend(self.head.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.trunk.affine.tensors_mut().into_iter().collect();
        out.extend(self.head.tensors_mut());
        out
    }

    fn zeros_like(&self) -> Self {
        BaselineNet {
            trunk: self.trunk.zeros_like(),
            head: Affine::zeros(self.head.out_dim(), self.head.in_dim()),
        }
    }
}

/// Settings of the whole-model weight gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightGradcheckSpec {
    pub seed: u64,
    pub d_in: usize,
    pub d_h: usize,
    pub m: usize,
    pub k: usize,
    pub lambda: f64,
    pub trials: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for WeightGradcheckSpec {
    fn default() -> Self {
        WeightGradcheckSpec {
            seed: 0,
            d_in: 8,
            d_h: 12,
            m: 3,
            k: 4,
            lambda: 0.2,
            trials: 5,
            step: 1e-6,
            tolerance: 1e-4,
        }
    }
}

fn nudge<N: Parameters>(net: &mut N, mut idx: usize, delta: f64) {
    for t in net.tensors_mut() {
        if idx < t.len() {
            t[idx] += delta;
            return;
        }
        idx -= t.len();
    }
    panic!("parameter index out of range");
}

/// Compares [`MultiBranchNet::aap_instance_grad`] with central differences
/// over every weight of randomly initialized networks. Inputs whose rectifier
/// pre-activations or argmax selections sit near a kink are redrawn.
pub fn weight_gradcheck(spec: &WeightGradcheckSpec) -> Result<GradcheckReport> {
    let config = AapConfig::with_lambda(spec.lambda)?;
    let min_margin = 1000.0 * spec.step;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut report = GradcheckReport::new(spec.tolerance);
    for trial in 0..spec.trials {
        let layout = BranchLayout::new(spec.d_h, spec.m, true)?;
        let net = MultiBranchNet::new(
            spec.d_in,
            spec.d_h,
            1,
            spec.k,
            layout,
            spec.seed.wrapping_add(trial as u64),
        )?;
        let priors = random_priors(&mut rng, spec.k, 64)?;
        let y = random_target(&mut rng, spec.k);
        let mut attempts = 0;
        let x = loop {
            attempts += 1;
            if attempts > 10_000 {
                return Err(AapError::Degenerate("no kink-free input found".into()));
            }
            let x: Vec<f64> = (0..spec.d_in).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let cache = net.forward_branches(&x)?;
            let probs = BranchProbabilities::new(cache.probs.clone())?;
            let fwd = aap_forward(&probs, &priors, &config)?;
            let pre_gap = cache
                .trunk
                .pre
                .iter()
                .map(|v| v.abs())
                .fold(f64::INFINITY, f64::min);
            if pre_gap > min_margin && selection_margin(probs.matrix(), &fwd) > min_margin {
                break x;
            }
        };
        let mut grad = net.zeros_like();
        net.aap_instance_grad(&x, &y, &priors, &config, &mut grad)?;
        let analytic = grad.flat();
        let loss_of =
            |n: &MultiBranchNet| -> Result<f64> { aap_loss(&n.predict(&x, &priors, spec.lambda)?, &y) };
        let mut numeric = Vec::with_capacity(analytic.len());
        for idx in 0..analytic.len() {
            let mut plus = net.clone();
            nudge(&mut plus, idx, spec.step);
            let mut minus = net.clone();
            nudge(&mut minus, idx, -spec.step);
            numeric.push((loss_of(&plus)? - loss_of(&minus)?) / (2.0 * spec.step));
        }
        let n = analytic.len();
        report.record(
            &Matrix::from_vec(1, n, analytic),
            &Matrix::from_vec(1, n, numeric),
        );
    }
    Ok(report)
}

/// The three model variants compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    /// Single sigmoid head trained with binary cross-entropy.
    Baseline,
    /// Branch heads pooled without context (`lambda = 0`).
    Multibranch,
    /// Branch heads pooled with the auxiliary context estimate.
    Cocnn,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Multibranch => "multibranch",
            Arm::Cocnn => "cocnn",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Arm {
    type Err = AapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Arm::Baseline),
            "multibranch" => Ok(Arm::Multibranch),
            "cocnn" => Ok(Arm::Cocnn),
            other => Err(AapError::Domain(format!("unknown arm {other:?}"))),
        }
    }
}

/// Network shape shared by all arms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_h: usize,
    pub m: usize,
    pub global_first: bool,
    /// Block count of a block-diagonal trunk (see [`Trunk`]); 0 or 1 is dense.
    #[serde(default)]
    pub trunk_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_h: 24,
            m: 3,
            global_first: true,
            trunk_groups: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub seed: u64,
    /// Classical momentum coefficient; 0 is plain SGD.
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.5,
            batch_size: 32,
            epochs: 30,
            lambda: 0.2,
            seed: 0,
            momentum: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(AapError::Domain(format!(
                "learning rate must be >= 0, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(AapError::Domain("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(AapError::Domain(format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        AapConfig::with_lambda(self.lambda)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Validation mA at the default threshold, when a validation set was given.
    pub ma: Option<f64>,
}

/// Training log rendered as `epoch,loss,mA` CSV.
pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,loss,mA\n");
    for e in log {
        let ma = e.ma.map(|v| format!("{v}")).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", e.epoch, e.loss, ma));
    }
    out
}

/// Generic mini-batch SGD with optional momentum. `instance_grad` returns the
/// loss of one example and accumulates its gradient.
fn sgd<N, F>(
    mut net: N,
    data: &Dataset,
    cfg: &TrainConfig,
    mut instance_grad: F,
    mut evaluate: impl FnMut(&N) -> Result<Option<f64>>,
) -> Result<(N, Vec<EpochLog>)>
where
    N: Parameters,
    F: FnMut(&N, &[f64], &[u8], &mut N) -> Result<f64>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(AapError::Domain("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut velocity = net.zeros_like();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = net.zeros_like();
            for &i in batch {
                total += instance_grad(&net, data.x(i), data.y(i), &mut grad)?;
            }
            let scale = cfg.lr / batch.len() as f64;
            for ((p, g), v) in net
                .tensors_mut()
                .into_iter()
                .zip(grad.tensors())
                .zip(velocity.tensors_mut())
            {
                for ((pi, gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                    *vi = cfg.momentum * *vi + scale * gi;
                    *pi -= *vi;
                }
            }
        }
        let loss = total / data.len() as f64;
        if !loss.is_finite() {
            return Err(AapError::Diverged {
                epoch,
                msg: format!("mean loss is {loss}; lower the learning rate"),
            });
        }
        log.push(EpochLog {
            epoch,
            loss,
            ma: evaluate(&net)?,
        });
    }
    Ok((net, log))
}

/// Either trained network together with what is needed to score inputs.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Baseline(BaselineNet),
    Branches {
        net: MultiBranchNet,
        arm: Arm,
        lambda: f64,
    },
}

impl Model {
    pub fn init(arm: Arm, d_in: usize, k: usize, model: &ModelConfig, seed: u64) -> Result<Self> {
        match arm {
            Arm::Baseline => Ok(Model::Baseline(BaselineNet::new(
                d_in,
                model.d_h,
                model.trunk_groups,
                k,
                seed,
            )?)),
            Arm::Multibranch | Arm::Cocnn => {
                let layout = BranchLayout::new(model.d_h, model.m, model.global_first)?;
                Ok(Model::Branches {
                    net: MultiBranchNet::new(d_in, model.d_h, model.trunk_groups, k, layout, seed)?,
                    arm,
                    lambda: 0.0,
                })
            }
        }
    }

    pub fn arm(&self) -> Arm {
        match self {
            Model::Baseline(_) => Arm::Baseline,
            Model::Branches { arm, .. } => *arm,
        }
    }

    pub fn k(&self) -> usize {
        match self {
            Model::Baseline(n) => n.k(),
            Model::Branches { net, .. } => net.k(),
        }
    }

    /// Per-attribute scores: sigmoid probabilities or the pooled distribution.
    pub fn scores(&self, x: &[f64], priors: &CoOccurrencePriors) -> Result<Vec<f64>> {
        match self {
            Model::Baseline(n) => n.baseline_forward(x),
            Model::Branches { net, lambda, .. } => net.predict(x, priors, *lambda),
        }
    }

    pub fn score_all(&self, data: &Dataset, priors: &CoOccurrencePriors) -> Result<Matrix> {
        let mut out = Matrix::zeros(data.len(), self.k());
        for i in 0..data.len() {
            out.row_mut(i).copy_from_slice(&self.scores(data.x(i), priors)?);
        }
        Ok(out)
    }

    /// Threshold used when none is calibrated.
    pub fn default_thresholds(&self) -> Thresholds {
        match self {
            Model::Baseline(_) => Thresholds::Global(0.5),
            Model::Branches { net, .. } => Thresholds::uniform(net.k()),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Model::Baseline(n) => n.num_params(),
            Model::Branches { net, .. } => net.num_params(),
        }
    }
}

fn validation_ma(model: &Model, val: Option<&Dataset>, priors: &CoOccurrencePriors) -> Result<Option<f64>> {
    let Some(val) = val else { return Ok(None) };
    let t = model.default_thresholds();
    let mut preds = Vec::with_capacity(val.len());
    for i in 0..val.len() {
        preds.push(binarize(&model.scores(val.x(i), priors)?, &t));
    }
    mean_accuracy(&preds, &val.labels).map(Some)
}

/// Trains `arm` from a seeded initialization. Branch arms optimize the
/// pooled squared loss with `cfg.lambda` (forced to 0 for the plain
/// multi-branch arm); the baseline optimizes binary cross-entropy.
pub fn train(
    arm: Arm,
    data: &Dataset,
    val: Option<&Dataset>,
    priors: &CoOccurrencePriors,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Model, Vec<EpochLog>)> {
    if priors.k() != data.k() {
        return Err(AapError::Dimension {
            what: "prior attributes",
            expected: data.k(),
            got: priors.k(),
        });
    }
    let init = Model::init(arm, data.d_in(), data.k(), model, cfg.seed)?;
    match init {
        Model::Baseline(net) => {
            let (net, log) = sgd(
                net,
                data,
                cfg,
                |n, x, y, g| n.bce_instance_grad(x, y, g),
                |n| validation_ma(&Model::Baseline(n.clone()), val, priors),
            )?;
            Ok((Model::Baseline(net), log))
        }
        Model::Branches { net, arm, .. } => {
            let lambda = if arm == Arm::Multibranch { 0.0 } else { cfg.lambda };
            let aap = AapConfig::with_lambda(lambda)?;
            let wrap = |n: &MultiBranchNet| Model::Branches {
                net: n.clone(),
                arm,
                lambda,
            };
            let (net, log) = sgd(
                net,
                data,
                cfg,
                |n, x, y, g| n.aap_instance_grad(x, y, priors, &aap, g),
                |n| validation_ma(&wrap(n), val, priors),
            )?;
            Ok((wrap(&net), log))
        }
    }
}

const CHECKPOINT_FORMAT: &str = "aap-checkpoint";

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    arm: Arm,
    lambda: f64,
    d_in: usize,
    d_h: usize,
    trunk_groups: usize,
    m: usize,
    k: usize,
    /// Hidden-unit range of each branch; empty for the baseline.
    branch_slices: Vec<(usize, usize)>,
    /// Flat weight arrays in the order trunk.w, trunk.b, then each head's w, b.
    weights: Vec<Vec<f64>>,
}

impl Model {
    pub fn save(&self, path: &Path) -> Result<()> {
        let (trunk, m, branch_slices, weights, lambda) = match self {
            Model::Baseline(n) => (&n.trunk, 1, Vec::new(), n.tensors(), 0.0),
            Model::Branches { net, lambda, .. } => (
                &net.trunk,
                net.m(),
                net.layout.slices().to_vec(),
                net.tensors(),
                *lambda,
            ),
        };
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            arm: self.arm(),
            lambda,
            d_in: trunk.d_in(),
            d_h: trunk.d_h(),
            trunk_groups: trunk.groups,
            m,
            k: self.k(),
            branch_slices,
            weights: weights.into_iter().map(<[f64]>::to_vec).collect(),
        };
        let out = File::create(path).map_err(|e| AapError::io(path, e))?;
        let mut w = BufWriter::new(out);
        serde_json::to_writer(&mut w, &file)?;
        writeln!(w).map_err(|e| AapError::io(path, e))?;
        w.flush().map_err(|e| AapError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AapError::io(path, e))?;
        let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| {
            AapError::parse(
                path.display(),
                e.line(),
                format!("column {}", e.column()),
                e.to_string(),
            )
        })?;
        if file.format != CHECKPOINT_FORMAT || file.version != 1 {
            return Err(AapError::Schema(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        let trunk = Trunk::zeros(file.d_in, file.d_h, file.trunk_groups)
            .map_err(|e| AapError::Schema(e.to_string()))?;
        let mut model = match file.arm {
            Arm::Baseline => Model::Baseline(BaselineNet {
                head: Affine::zeros(file.k, file.d_h),
                trunk,
            }),
            arm => {
                let layout = BranchLayout::from_slices(file.d_h, file.branch_slices.clone())?;
                if layout.m() != file.m {
                    return Err(AapError::Schema(format!(
                        "m = {} but {} branch slices",
                        file.m,
                        layout.m()
                    )));
                }
                let heads = layout
                    .slices()
                    .iter()
                    .map(|&(s, e)| Affine::zeros(file.k, e - s))
                    .collect();
                Model::Branches {
                    net: MultiBranchNet { trunk, layout, heads },
                    arm,
                    lambda: file.lambda,
                }
            }
        };
        let slots: Vec<&mut [f64]> = match &mut model {
            Model::Baseline(n) => n.tensors_mut(),
            Model::Branches { net, .. } => net.tensors_mut(),
        };
        if slots.len() != file.weights.len() {
            return Err(AapError::Schema(format!(
                "expected {} weight arrays, found {}",
                slots.len(),
                file.weights.len()
            )));
        }
        for (i, (slot, src)) in slots.into_iter().zip(&file.weights).enumerate() {
            if slot.len() != src.len() {
                return Err(AapError::Schema(format!(
                    "weight array {i} has {} values, expected {}",
                    src.len(),
                    slot.len()
                )));
            }
            slot.copy_from_slice(src);
        }
        Ok(model)
    }
}
