//! The attribute-aware pooling layer.
//!
//! Forward: local max-pooling over the other branches gives the context
//! matrix `Q`; the co-occurrence tables turn it into the auxiliary estimate
//! `P+ = (Q C + (1 - Q) Ctilde) / k`; the combined matrix `P + lambda P+` is
//! max-pooled per attribute and l1-normalized into the prediction.
//!
//! Backward: the analytic gradient of the squared loss with respect to `P`,
//! holding both argmax selections fixed.

use std::fmt;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{AapError, Result};
use crate::matrix::Matrix;
use crate::priors::{AttributeSchema, CoOccurrencePriors, LabelMatrix};

/// Floor on the denominator of [`relative_error`].
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AapConfig {
    /// Weight of the auxiliary estimate.
    pub lambda: f64,
    /// Threshold of the hard-indicator variant.
    pub tau: f64,
}

impl Default for AapConfig {
    fn default() -> Self {
        AapConfig {
            lambda: 0.2,
            tau: 0.5,
        }
    }
}

impl AapConfig {
    pub fn new(lambda: f64, tau: f64) -> Result<Self> {
        let cfg = AapConfig { lambda, tau };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_lambda(lambda: f64) -> Result<Self> {
        Self::new(lambda, AapConfig::default().tau)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(AapError::Domain(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(AapError::Domain(format!(
                "tau must lie in (0,1), got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// The `m x k` matrix of per-branch attribute probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchProbabilities(Matrix);

impl BranchProbabilities {
    /// Wraps `p` after checking `m >= 2` and that every entry lies in `[0,1]`.
    pub fn new(p: Matrix) -> Result<Self> {
        if p.rows() < 2 {
            return Err(AapError::Domain(format!(
                "need at least 2 branches for local pooling, got {}",
                p.rows()
            )));
        }
        if p.cols() == 0 {
            return Err(AapError::Domain("branch matrix has no attributes".into()));
        }
        if let Some(bad) = p.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(AapError::Domain(format!(
                "branch probability {bad} outside [0,1]"
            )));
        }
        Ok(BranchProbabilities(p))
    }

    /// Skips the range check; used where entries may leave `[0,1]` by a
    /// finite-difference step.
    pub(crate) fn new_unchecked(p: Matrix) -> Self {
        BranchProbabilities(p)
    }

    pub fn m(&self) -> usize {
        self.0.rows()
    }

    pub fn k(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// Branch indices chosen by a max-pooling step, stored row-major `m x k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArgmaxTable {
    rows: usize,
    cols: usize,
    idx: Vec<usize>,
}

impl ArgmaxTable {
    #[inline]
    pub fn get(&self, l: usize, j: usize) -> usize {
        self.idx[l * self.cols + j]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct AapForwardCache {
    pub q: Matrix,
    pub local_argmax: ArgmaxTable,
    pub pplus: Matrix,
    pub phat_matrix: Matrix,
    /// Branch realizing each column maximum of the combined matrix.
    pub col_argmax: Vec<usize>,
    /// Column maxima of the combined matrix.
    pub e: Vec<f64>,
    pub phat: Vec<f64>,
    pub lambda: f64,
}

impl AapForwardCache {
    pub fn m(&self) -> usize {
        self.q.rows()
    }

    pub fn k(&self) -> usize {
        self.q.cols()
    }
}

/// `Q[l][j] = max_{i != l} P[i][j]`, smallest index on ties.
pub fn local_max_pool(p: &Matrix) -> Result<(Matrix, ArgmaxTable)> {
    let (m, k) = p.shape();
    if m < 2 {
        return Err(AapError::Domain(format!(
            "local max-pooling needs at least 2 branches, got {m}"
        )));
    }
    let mut q = Matrix::zeros(m, k);
    let mut idx = vec![0usize; m * k];
    for j in 0..k {
        // best and runner-up with smallest-index tie-breaking
        let mut best = 0;
        let mut second = usize::MAX;
        for i in 1..m {
            let v = p[(i, j)];
            if v > p[(best, j)] {
                second = best;
                best = i;
            } else if second == usize::MAX || v > p[(second, j)] {
                second = i;
            }
        }
        for l in 0..m {
            let sel = if l == best { second } else { best };
            q[(l, j)] = p[(sel, j)];
            idx[l * k + j] = sel;
        }
    }
    Ok((
        q,
        ArgmaxTable {
            rows: m,
            cols: k,
            idx,
        },
    ))
}

/// Binary indicator `S[l][j] = 1` iff `Q[l][j] > tau`.
pub fn hard_indicator(q: &Matrix, tau: f64) -> Matrix {
    q.map(|v| if v > tau { 1.0 } else { 0.0 })
}

/// Average of the conditional rows of the attributes switched on in `S`.
/// Rows of `S` without any active attribute fall back to the marginals.
///
/// Kept as a comparison baseline; training uses [`auxiliary_soft`].
pub fn auxiliary_hard(s: &Matrix, priors: &CoOccurrencePriors) -> Result<Matrix> {
    let k = priors.k();
    check_cols("indicator matrix", s, k)?;
    let mut out = s.matmul(&priors.cond);
    for l in 0..s.rows() {
        let active: f64 = s.row(l).iter().sum();
        let row = out.row_mut(l);
        if active > 0.0 {
            row.iter_mut().for_each(|v| *v /= active);
        } else {
            row.copy_from_slice(&priors.p);
        }
    }
    Ok(out)
}

/// `P+ = (Q C + (1 - Q) Ctilde) / k`.
pub fn auxiliary_soft(q: &Matrix, priors: &CoOccurrencePriors) -> Result<Matrix> {
    let k = priors.k();
    check_cols("context matrix", q, k)?;
    let pos = q.matmul(&priors.cond);
    let neg = q.map(|v| 1.0 - v).matmul(&priors.neg_cond);
    let inv_k = 1.0 / k as f64;
    let mut out = pos;
    for (o, n) in out.as_mut_slice().iter_mut().zip(neg.as_slice()) {
        *o = (*o + n) * inv_k;
    }
    Ok(out)
}

/// `P_hat = P + lambda P+`.
pub fn combine(p: &Matrix, pplus: &Matrix, lambda: f64) -> Result<Matrix> {
    if p.shape() != pplus.shape() {
        return Err(AapError::Dimension {
            what: "auxiliary matrix rows",
            expected: p.rows(),
            got: pplus.rows(),
        });
    }
    let mut out = p.clone();
    for (o, a) in out.as_mut_slice().iter_mut().zip(pplus.as_slice()) {
        *o += lambda * a;
    }
    Ok(out)
}

/// Column max-pooling followed by l1 normalization.
///
/// Returns `(phat, col_argmax, e)`.
pub fn global_max_normalize(phat_matrix: &Matrix) -> Result<(Vec<f64>, Vec<usize>, Vec<f64>)> {
    let (m, k) = phat_matrix.shape();
    let mut e = Vec::with_capacity(k);
    let mut arg = Vec::with_capacity(k);
    for j in 0..k {
        let mut best = 0;
        for l in 1..m {
            if phat_matrix[(l, j)] > phat_matrix[(best, j)] {
                best = l;
            }
        }
        arg.push(best);
        e.push(phat_matrix[(best, j)]);
    }
    let norm: f64 = e.iter().map(|v| v.abs()).sum();
    if !(norm > 0.0) {
        return Err(AapError::Degenerate(
            "combined matrix has no positive entry; normalization undefined".into(),
        ));
    }
    let phat = e.iter().map(|v| v / norm).collect();
    Ok((phat, arg, e))
}

/// Full forward pass of the layer.
pub fn aap_forward(
    p: &BranchProbabilities,
    priors: &CoOccurrencePriors,
    config: &AapConfig,
) -> Result<AapForwardCache> {
    let p = p.matrix();
    check_cols("branch matrix", p, priors.k())?;
    let (q, local_argmax) = local_max_pool(p)?;
    let pplus = auxiliary_soft(&q, priors)?;
    let phat_matrix = combine(p, &pplus, config.lambda)?;
    let (phat, col_argmax, e) = global_max_normalize(&phat_matrix)?;
    Ok(AapForwardCache {
        q,
        local_argmax,
        pplus,
        phat_matrix,
        col_argmax,
        e,
        phat,
        lambda: config.lambda,
    })
}

/// Ground-truth distribution `y / |y|_1`.
pub fn target_distribution(y: &[u8]) -> Result<Vec<f64>> {
    let count = y.iter().filter(|&&v| v == 1).count();
    if count == 0 {
        return Err(AapError::Domain(
            "all-zero label vector has no target distribution".into(),
        ));
    }
    Ok(y.iter().map(|&v| f64::from(v) / count as f64).collect())
}

/// Per-instance loss `0.5 * |phat - y/|y|_1|^2`.
pub fn aap_loss(phat: &[f64], y: &[u8]) -> Result<f64> {
    if phat.len() != y.len() {
        return Err(AapError::Dimension {
            what: "label vector",
            expected: phat.len(),
            got: y.len(),
        });
    }
    let target = target_distribution(y)?;
    Ok(0.5
        * phat
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>())
}

/// Mean of the per-instance losses.
pub fn aap_batch_loss<'a>(pairs: impl IntoIterator<Item = (&'a [f64], &'a [u8])>) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (phat, y) in pairs {
        total += aap_loss(phat, y)?;
        n += 1;
    }
    if n == 0 {
        return Err(AapError::Domain("empty batch".into()));
    }
    Ok(total / n as f64)
}

/// Analytic gradient of [`aap_loss`] with respect to the branch matrix.
pub fn aap_backward(cache: &AapForwardCache, y: &[u8], priors: &CoOccurrencePriors) -> Result<Matrix> {
    let (m, k) = (cache.m(), cache.k());
    if y.len() != k || priors.k() != k || cache.e.len() != k || cache.local_argmax.shape() != (m, k) {
        return Err(AapError::Contract(format!(
            "cache is {m}x{k} but labels have {} and priors {} attributes",
            y.len(),
            priors.k()
        )));
    }
    let target = target_distribution(y)?;

    let norm: f64 = cache.e.iter().map(|v| v.abs()).sum();
    let resid: Vec<f64> = cache.phat.iter().zip(&target).map(|(a, b)| a - b).collect();
    let resid_dot_e: f64 = resid.iter().zip(&cache.e).map(|(r, e)| r * e).sum();
    let shift = resid_dot_e / (norm * norm);

    // dJ/dP_hat is nonzero only at the column argmax positions.
    let mut d_phat = Matrix::zeros(m, k);
    for j in 0..k {
        d_phat[(cache.col_argmax[j], j)] = resid[j] / norm - shift;
    }

    let mut grad = d_phat.clone();
    if cache.lambda != 0.0 {
        let scale = cache.lambda / k as f64;
        let mut diff = priors.cond.clone();
        for (d, n) in diff.as_mut_slice().iter_mut().zip(priors.neg_cond.as_slice()) {
            *d -= n;
        }
        for l in 0..m {
            // sensitivity of row l of P+ to Q[l][i]
            for i in 0..k {
                let w: f64 = d_phat.row(l).iter().zip(diff.row(i)).map(|(g, d)| g * d).sum();
                grad[(cache.local_argmax.get(l, i), i)] += scale * w;
            }
        }
    }
    Ok(grad)
}

/// Central-difference gradient of `aap_loss(aap_forward(P))` with respect to
/// every entry of `P`.
pub fn finite_difference_grad(
    p: &BranchProbabilities,
    y: &[u8],
    priors: &CoOccurrencePriors,
    config: &AapConfig,
    h: f64,
) -> Result<Matrix> {
    if !(h > 0.0) {
        return Err(AapError::Domain(format!("step must be positive, got {h}")));
    }
    let base = p.matrix();
    let (m, k) = base.shape();
    let loss_at = |mat: Matrix| -> Result<f64> {
        let cache = aap_forward(&BranchProbabilities::new_unchecked(mat), priors, config)?;
        aap_loss(&cache.phat, y)
    };
    let mut grad = Matrix::zeros(m, k);
    for l in 0..m {
        for j in 0..k {
            let mut plus = base.clone();
            plus[(l, j)] += h;
            let mut minus = base.clone();
            minus[(l, j)] -= h;
            grad[(l, j)] = (loss_at(plus)? - loss_at(minus)?) / (2.0 * h);
        }
    }
    Ok(grad)
}

/// Smallest gap between a selected maximum and its runner-up, over both the
/// local pooling of `P` and the column pooling of the combined matrix.
///
/// Finite differences are only meaningful when this exceeds the step size.
pub fn selection_margin(p: &Matrix, cache: &AapForwardCache) -> f64 {
    let (m, k) = p.shape();
    let mut margin = f64::INFINITY;
    for l in 0..m {
        for j in 0..k {
            let sel = cache.local_argmax.get(l, j);
            for i in (0..m).filter(|&i| i != l && i != sel) {
                margin = margin.min(p[(sel, j)] - p[(i, j)]);
            }
        }
    }
    for j in 0..k {
        let sel = cache.col_argmax[j];
        for l in (0..m).filter(|&l| l != sel) {
            margin = margin.min(cache.phat_matrix[(sel, j)] - cache.phat_matrix[(l, j)]);
        }
    }
    margin
}

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckEntry {
    pub trial: usize,
    pub position: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub passed: bool,
}

/// Tabular comparison of analytic and numeric gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub tolerance: f64,
    pub trials: usize,
}

impl GradcheckReport {
    pub fn new(tolerance: f64) -> Self {
        GradcheckReport {
            entries: Vec::new(),
            tolerance,
            trials: 0,
        }
    }

    /// Appends one trial's gradients.
    pub fn record(&mut self, analytic: &Matrix, numeric: &Matrix) {
        let trial = self.trials;
        self.trials += 1;
        for l in 0..analytic.rows() {
            for j in 0..analytic.cols() {
                let (a, n) = (analytic[(l, j)], numeric[(l, j)]);
                let rel_err = relative_error(a, n);
                self.entries.push(GradcheckEntry {
                    trial,
                    position: (l, j),
                    analytic: a,
                    numeric: n,
                    rel_err,
                    passed: rel_err < self.tolerance,
                });
            }
        }
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    /// Single machine-readable line.
    pub fn summary_line(&self) -> String {
        format!(
            "gradcheck status={} trials={} entries={} failures={} max_rel_err={:.6e} tol={:.1e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.trials,
            self.entries.len(),
            self.entries.iter().filter(|e| !e.passed).count(),
            self.max_rel_err(),
            self.tolerance
        )
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>5} {:>9} {:>16} {:>16} {:>12} {:>6}",
            "trial", "position", "analytic", "numeric", "rel_err", "status"
        )?;
        for e in &self.entries {
            writeln!(
                f,
                "{:>5} {:>9} {:>16.9e} {:>16.9e} {:>12.3e} {:>6}",
                e.trial,
                format!("({},{})", e.position.0, e.position.1),
                e.analytic,
                e.numeric,
                e.rel_err,
                if e.passed { "pass" } else { "FAIL" }
            )?;
        }
        write!(f, "{}", self.summary_line())
    }
}

/// Settings of a randomized gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckSpec {
    pub seed: u64,
    pub m: usize,
    pub k: usize,
    pub lambda: f64,
    pub trials: usize,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        GradcheckSpec {
            seed: 0,
            m: 3,
            k: 6,
            lambda: 0.2,
            trials: 100,
            step: 1e-6,
            tolerance: 1e-4,
        }
    }
}

impl GradcheckSpec {
    pub fn validate(&self) -> Result<()> {
        AapConfig::with_lambda(self.lambda)?;
        if self.m < 2 || self.k < 2 {
            return Err(AapError::Domain(format!(
                "need m >= 2 and k >= 2, got m={} k={}",
                self.m, self.k
            )));
        }
        if !(self.step > 0.0) || !(self.tolerance > 0.0) {
            return Err(AapError::Domain("step and tolerance must be positive".into()));
        }
        Ok(())
    }

    /// Selections closer than this are redrawn.
    pub fn min_margin(&self) -> f64 {
        1000.0 * self.step
    }
}

/// Random priors from `n` Bernoulli(0.4) label rows, for gradient checks.
pub fn random_priors(rng: &mut impl Rng, k: usize, n: usize) -> Result<CoOccurrencePriors> {
    let rows: Vec<Vec<u8>> = (0..n)
        .map(|_| (0..k).map(|_| u8::from(rng.gen_bool(0.4))).collect())
        .collect();
    let labels = LabelMatrix::new(AttributeSchema::numbered(k)?, &rows)?;
    CoOccurrencePriors::from_labels(&labels, 0.5)
}

/// Random label vector with at least one positive attribute.
pub fn random_target(rng: &mut impl Rng, k: usize) -> Vec<u8> {
    let mut y: Vec<u8> = (0..k).map(|_| u8::from(rng.gen_bool(0.4))).collect();
    if y.iter().all(|&v| v == 0) {
        y[rng.gen_range(0..k)] = 1;
    }
    y
}

/// Compares [`aap_backward`] with central differences on `trials` random
/// row-stochastic `P`, redrawing any point whose argmax selections are
/// within [`GradcheckSpec::min_margin`] of a tie.
pub fn run_gradcheck(spec: &GradcheckSpec) -> Result<GradcheckReport> {
    spec.validate()?;
    let config = AapConfig::with_lambda(spec.lambda)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut report = GradcheckReport::new(spec.tolerance);
    for _ in 0..spec.trials {
        let priors = random_priors(&mut rng, spec.k, 64)?;
        let y = random_target(&mut rng, spec.k);
        let mut attempts = 0;
        let (p, cache) = loop {
            attempts += 1;
            if attempts > 10_000 {
                return Err(AapError::Degenerate("no tie-free point found".into()));
            }
            let mut p = Matrix::from_fn(spec.m, spec.k, |_, _| rng.gen::<f64>() + 1e-3);
            for l in 0..spec.m {
                let s: f64 = p.row(l).iter().sum();
                p.row_mut(l).iter_mut().for_each(|v| *v /= s);
            }
            let p = BranchProbabilities::new(p)?;
            let cache = aap_forward(&p, &priors, &config)?;
            if selection_margin(p.matrix(), &cache) > spec.min_margin() {
                break (p, cache);
            }
        };
        let analytic = aap_backward(&cache, &y, &priors)?;
        let numeric = finite_difference_grad(&p, &y, &priors, &config, spec.step)?;
        report.record(&analytic, &numeric);
    }
    Ok(report)
}

fn check_cols(what: &'static str, m: &Matrix, k: usize) -> Result<()> {
    if m.cols() != k {
        return Err(AapError::Dimension {
            what,
            expected: k,
            got: m.cols(),
        });
    }
    Ok(())
}
