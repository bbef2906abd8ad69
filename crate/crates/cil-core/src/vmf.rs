//! Directional-statistics core: Bessel function ratios, von Mises-Fisher
//! densities and sampling, the closed-form KL divergence between two vMF
//! distributions sharing a concentration, and the classifier losses with
//! analytic gradients.
//!
//! Everything here is pure and independently verifiable without any training
//! loop: the sampler doubles as a Monte-Carlo oracle for the KL closed form,
//! and the loss gradients are checked against central finite differences.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{CilError, Result};

/// Above this concentration the Bessel ratio uses the first-order
/// asymptotic `1 - (d-1)/(2k)`; below it, a Lentz continued fraction.
pub const KAPPA_SWITCH: f64 = 1e4;

const UNIT_NORM_TOL: f64 = 1e-4;

// ---------------------------------------------------------------------------
// Bessel machinery
// ---------------------------------------------------------------------------

/// Bessel ratio `A_d(k) = I_{d/2}(k) / I_{d/2-1}(k)`, the expected cosine
/// between a vMF sample and its mean direction.
///
/// Evaluated with the Gauss continued fraction (modified Lentz) in double
/// precision; for `k > KAPPA_SWITCH` the asymptotic branch takes over.
pub fn bessel_ratio_a(d: usize, kappa: f64) -> Result<f64> {
    if d < 2 {
        return Err(CilError::Config(format!("bessel_ratio_a requires d >= 2, got {d}")));
    }
    if !kappa.is_finite() || kappa < 0.0 {
        return Err(CilError::Numeric(format!(
            "bessel_ratio_a: kappa must be finite and nonnegative (d={d}, kappa={kappa})"
        )));
    }
    if kappa == 0.0 {
        return Ok(0.0);
    }
    if kappa > KAPPA_SWITCH {
        return Ok(1.0 - (d as f64 - 1.0) / (2.0 * kappa));
    }

    // I_nu(x)/I_{nu-1}(x) = 1 / (2nu/x + 1 / (2(nu+1)/x + ...)), nu = d/2.
    let nu = d as f64 / 2.0;
    let tiny = 1e-300;
    let mut f = tiny;
    let mut c = f;
    let mut dd = 0.0f64;
    let mut converged = false;
    for k in 1..=200_000u64 {
        let b = 2.0 * (nu + (k - 1) as f64) / kappa;
        dd = b + dd;
        if dd.abs() < tiny {
            dd = tiny;
        }
        c = b + 1.0 / c;
        if c.abs() < tiny {
            c = tiny;
        }
        dd = 1.0 / dd;
        let delta = c * dd;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            converged = true;
            break;
        }
    }
    if !converged || !f.is_finite() || f < 0.0 || f >= 1.0 {
        return Err(CilError::Numeric(format!(
            "bessel_ratio_a continued fraction failed (d={d}, kappa={kappa}, value={f})"
        )));
    }
    Ok(f)
}

/// Derivative `d/dk A_d(k) = 1 - A^2 - (d-1) A / k`.
pub fn bessel_ratio_a_deriv(d: usize, kappa: f64) -> Result<f64> {
    if kappa <= 0.0 {
        return Err(CilError::Numeric(format!(
            "bessel_ratio_a_deriv requires kappa > 0 (d={d}, kappa={kappa})"
        )));
    }
    let a = bessel_ratio_a(d, kappa)?;
    Ok(1.0 - a * a - (d as f64 - 1.0) * a / kappa)
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `log I_nu(x)` for `nu >= 0`, `x >= 0`.
///
/// Power series accumulated in the log domain up to `x = KAPPA_SWITCH`;
/// beyond that, the large-argument asymptotic expansion.
pub fn log_bessel_i(nu: f64, x: f64) -> Result<f64> {
    if nu < 0.0 || x < 0.0 || !x.is_finite() {
        return Err(CilError::Numeric(format!("log_bessel_i: bad arguments nu={nu}, x={x}")));
    }
    if x == 0.0 {
        return Ok(if nu == 0.0 { 0.0 } else { f64::NEG_INFINITY });
    }
    if x > KAPPA_SWITCH {
        // A&S 9.7.1 with mu = 4 nu^2.
        let mu = 4.0 * nu * nu;
        let z8 = 8.0 * x;
        let mut term = 1.0;
        let mut series = 1.0;
        for j in 1..=6u32 {
            let c = mu - ((2 * j - 1) as f64).powi(2);
            term *= -c / (j as f64 * z8);
            series += term;
        }
        if series <= 0.0 {
            return Err(CilError::Numeric(format!(
                "log_bessel_i asymptotic series failed (nu={nu}, x={x})"
            )));
        }
        return Ok(x - 0.5 * (2.0 * std::f64::consts::PI * x).ln() + series.ln());
    }

    let log_half_x = (0.5 * x).ln();
    let peak = 0.5 * (-nu + (nu * nu + x * x).sqrt());
    let mut lse = f64::NEG_INFINITY;
    let mut k = 0u64;
    loop {
        let kf = k as f64;
        let log_term = (nu + 2.0 * kf) * log_half_x
            - libm::lgamma(kf + 1.0)
            - libm::lgamma(nu + kf + 1.0);
        lse = log_add_exp(lse, log_term);
        if kf > peak && log_term < lse - 40.0 {
            break;
        }
        k += 1;
        if k > 2_000_000 {
            return Err(CilError::Numeric(format!(
                "log_bessel_i series did not terminate (nu={nu}, x={x})"
            )));
        }
    }
    Ok(lse)
}

/// Log normalization constant of the vMF density on `S^{d-1}`:
/// `log C_d(k) = (d/2-1) log k - (d/2) log 2pi - log I_{d/2-1}(k)`.
pub fn log_norm_const(d: usize, kappa: f64) -> Result<f64> {
    if d < 2 {
        return Err(CilError::Config(format!("log_norm_const requires d >= 2, got {d}")));
    }
    if kappa < 0.0 || !kappa.is_finite() {
        return Err(CilError::Numeric(format!("log_norm_const: bad kappa={kappa} (d={d})")));
    }
    let half_d = d as f64 / 2.0;
    if kappa < 1e-12 {
        // Uniform density: C_d(0) = Gamma(d/2) / (2 pi^{d/2}).
        return Ok(libm::lgamma(half_d)
            - std::f64::consts::LN_2
            - half_d * std::f64::consts::PI.ln());
    }
    let v = log_norm_const_inner(d, kappa)?;
    if !v.is_finite() {
        return Err(CilError::Numeric(format!("log_norm_const overflow (d={d}, kappa={kappa})")));
    }
    Ok(v)
}

fn log_norm_const_inner(d: usize, kappa: f64) -> Result<f64> {
    let half_d = d as f64 / 2.0;
    Ok((half_d - 1.0) * kappa.ln()
        - half_d * (2.0 * std::f64::consts::PI).ln()
        - log_bessel_i(half_d - 1.0, kappa)?)
}

// ---------------------------------------------------------------------------
// Vector helpers
// ---------------------------------------------------------------------------

fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

fn check_unit(v: ArrayView1<'_, f64>, what: &str) -> Result<()> {
    let n = norm(v);
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        return Err(CilError::Precondition(format!("{what} must be unit norm, got ||.|| = {n}")));
    }
    Ok(())
}

/// Normalizes each row to unit L2 norm, returning the row norms.
/// Errors on any near-zero row.
pub fn normalize_rows(a: &Array2<f64>, what: &str) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut out = a.clone();
    let mut norms = Vec::with_capacity(a.nrows());
    for mut row in out.rows_mut() {
        let n = norm(row.view());
        if !(n > 1e-12) {
            return Err(CilError::Numeric(format!("{what}: near-zero row norm {n}")));
        }
        row.mapv_inplace(|x| x / n);
        norms.push(n);
    }
    Ok((out, norms))
}

// ---------------------------------------------------------------------------
// Density, sampler, KL
// ---------------------------------------------------------------------------

/// Log vMF density `log C_d(k) + k <mu, z>` for unit vectors `z`, `mu`.
pub fn vmf_log_pdf(z_bar: ArrayView1<'_, f64>, mu: ArrayView1<'_, f64>, kappa: f64) -> Result<f64> {
    if z_bar.len() != mu.len() {
        return Err(CilError::Precondition(format!(
            "vmf_log_pdf: dimension mismatch {} vs {}",
            z_bar.len(),
            mu.len()
        )));
    }
    check_unit(z_bar, "vmf_log_pdf feature")?;
    check_unit(mu, "vmf_log_pdf mean direction")?;
    let d = z_bar.len();
    Ok(log_norm_const(d, kappa)? + kappa * z_bar.dot(&mu))
}

/// Draws `n` unit vectors from vMF(`mu`, `kappa`) with Wood's rejection
/// scheme; `kappa = 0` falls back to the uniform sphere distribution.
pub fn vmf_sample<R: Rng + ?Sized>(
    mu: ArrayView1<'_, f64>,
    kappa: f64,
    n: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let d = mu.len();
    if d < 2 {
        return Err(CilError::Config(format!("vmf_sample requires d >= 2, got {d}")));
    }
    if kappa < 0.0 || !kappa.is_finite() {
        return Err(CilError::Numeric(format!("vmf_sample: bad kappa={kappa}")));
    }
    check_unit(mu, "vmf_sample mean direction")?;

    let mut out = Array2::zeros((n, d));
    if kappa == 0.0 {
        for mut row in out.rows_mut() {
            let v = random_unit(d, rng);
            row.assign(&v);
        }
        return Ok(out);
    }

    let m = (d - 1) as f64;
    let b = m / ((4.0 * kappa * kappa + m * m).sqrt() + 2.0 * kappa);
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + m * (1.0 - x0 * x0).ln();
    let beta = Beta::new(m / 2.0, m / 2.0)
        .map_err(|e| CilError::Numeric(format!("vmf_sample beta setup: {e}")))?;

    for mut row in out.rows_mut() {
        let mut w = f64::NAN;
        let mut accepted = false;
        for _ in 0..1000 {
            let z: f64 = beta.sample(rng);
            let u: f64 = rng.gen::<f64>();
            let cand = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
            if kappa * cand + m * (1.0 - x0 * cand).ln() - c >= u.ln() {
                w = cand;
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(CilError::Numeric(format!(
                "vmf_sample rejection loop exceeded retry cap (d={d}, kappa={kappa})"
            )));
        }
        // Tangential part uniform on S^{d-2}, assembled in the e1 frame.
        let v = random_unit(d - 1, rng);
        let s = (1.0 - w * w).max(0.0).sqrt();
        row[0] = w;
        for j in 0..d - 1 {
            row[j + 1] = s * v[j];
        }
        householder_to(mu, row.as_slice_mut().expect("contiguous row"));
    }
    Ok(out)
}

fn random_unit<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Array1<f64> {
    loop {
        let v: Array1<f64> = Array1::from_iter((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let n = norm(v.view());
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Reflects `x` (expressed in the frame where the pole is e1) so the pole
/// maps onto `mu`.
fn householder_to(mu: ArrayView1<'_, f64>, x: &mut [f64]) {
    let d = mu.len();
    let mut u = vec![0.0; d];
    u[0] = 1.0 - mu[0];
    for j in 1..d {
        u[j] = -mu[j];
    }
    let un: f64 = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if un < 1e-12 {
        return; // mu is already e1
    }
    for v in u.iter_mut() {
        *v /= un;
    }
    let dot: f64 = u.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
    for j in 0..d {
        x[j] -= 2.0 * dot * u[j];
    }
}

/// Closed-form KL divergence between two vMF distributions sharing `kappa`:
/// `KL(p || q) = k A_d(k) (1 - <mu_p, mu_q>)`.
pub fn vmf_kl(mu_p: ArrayView1<'_, f64>, mu_q: ArrayView1<'_, f64>, kappa: f64) -> Result<f64> {
    if mu_p.len() != mu_q.len() {
        return Err(CilError::Precondition(format!(
            "vmf_kl: dimension mismatch {} vs {}",
            mu_p.len(),
            mu_q.len()
        )));
    }
    check_unit(mu_p, "vmf_kl mu_p")?;
    check_unit(mu_q, "vmf_kl mu_q")?;
    let a = bessel_ratio_a(mu_p.len(), kappa)?;
    Ok(kappa * a * (1.0 - mu_p.dot(&mu_q)))
}

// ---------------------------------------------------------------------------
// Classifier state, posterior, losses
// ---------------------------------------------------------------------------

/// vMF classifier parameters: one raw weight row per class (normalized on
/// use) plus a single learnable concentration stored as `rho = log kappa`.
#[derive(Debug, Clone, PartialEq)]
pub struct VmfClassifierState {
    weights: Array2<f64>,
    rho: f64,
}

impl VmfClassifierState {
    pub fn new(weights: Array2<f64>, kappa: f64) -> Result<Self> {
        if !(kappa > 0.0) || !kappa.is_finite() {
            return Err(CilError::Config(format!("kappa must be positive and finite, got {kappa}")));
        }
        normalize_rows(&weights, "vmf classifier weights")?;
        Ok(Self { weights, rho: kappa.ln() })
    }

    pub fn kappa(&self) -> f64 {
        self.rho.exp()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn set_rho(&mut self, rho: f64) {
        self.rho = rho;
    }

    /// Raw (unnormalized) weight rows.
    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weights
    }

    /// Unit-norm class directions.
    pub fn directions(&self) -> Result<Array2<f64>> {
        Ok(normalize_rows(&self.weights, "vmf classifier weights")?.0)
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }
}

/// Posterior `softmax_i(k <mu_i, z>)` for unit features (rows of `z_bar`).
/// Every output row sums to 1.
pub fn vmf_posterior(z_bar: &Array2<f64>, state: &VmfClassifierState) -> Result<Array2<f64>> {
    for row in z_bar.rows() {
        check_unit(row, "vmf_posterior feature")?;
    }
    let dirs = state.directions()?;
    let logits = z_bar.dot(&dirs.t()) * state.kappa();
    Ok(softmax_rows(&logits))
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}

/// Soft-target negative log-likelihood: mean over the batch of
/// `sum_c y_c * (-log p_c)`. Reduces to the usual NLL for one-hot labels.
///
/// Takes materialized probabilities; the training path evaluates the same
/// quantity from logits through log-sum-exp (see [`nll_soft_eval`]) so a
/// zero probability is never materialized there.
pub fn nll_soft(probabilities: &Array2<f64>, soft_labels: &Array2<f64>) -> Result<f64> {
    if probabilities.dim() != soft_labels.dim() {
        return Err(CilError::Precondition(format!(
            "nll_soft: shape mismatch {:?} vs {:?}",
            probabilities.dim(),
            soft_labels.dim()
        )));
    }
    for row in probabilities.rows() {
        let s = row.sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(CilError::Precondition(format!("nll_soft: probability row sums to {s}")));
        }
    }
    let b = probabilities.nrows() as f64;
    let mut total = 0.0;
    for (p, y) in probabilities.rows().into_iter().zip(soft_labels.rows()) {
        for (pc, yc) in p.iter().zip(y.iter()) {
            if *yc != 0.0 {
                total -= yc * pc.ln();
            }
        }
    }
    Ok(total / b)
}

/// Per-class unit mean directions of the classes present in a batch.
#[derive(Debug, Clone)]
pub struct BatchPrototypes {
    pub classes: Vec<usize>,
    /// One unit row per entry of `classes`.
    pub means: Array2<f64>,
    pub counts: Vec<usize>,
}

impl BatchPrototypes {
    /// Builds prototypes from raw feature rows and their class ids:
    /// normalize each feature, average per class, normalize the average.
    pub fn from_features(features: &Array2<f64>, class_ids: &[usize]) -> Result<Self> {
        if features.nrows() != class_ids.len() {
            return Err(CilError::Precondition(format!(
                "prototypes: {} features vs {} labels",
                features.nrows(),
                class_ids.len()
            )));
        }
        let (z_bar, _) = normalize_rows(features, "prototype features")?;
        let mut classes: Vec<usize> = class_ids.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let d = features.ncols();
        let mut means = Array2::zeros((classes.len(), d));
        let mut counts = vec![0usize; classes.len()];
        for (row, &y) in z_bar.rows().into_iter().zip(class_ids.iter()) {
            let slot = classes.binary_search(&y).expect("class present");
            let mut acc = means.row_mut(slot);
            acc += &row;
            counts[slot] += 1;
        }
        for (slot, mut row) in means.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|x| x / counts[slot] as f64);
            let n = norm(row.view());
            if !(n > 1e-12) {
                return Err(CilError::Numeric(format!(
                    "prototype for class {} has near-zero mean norm {n}",
                    classes[slot]
                )));
            }
            row.mapv_inplace(|x| x / n);
        }
        Ok(Self { classes, means, counts })
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Matching loss value: mean over prototype classes of
/// `k A_d(k) (1 - <mu_i, mu~_i>)`. Empty prototype set gives 0.
pub fn matching_loss(state: &VmfClassifierState, prototypes: &BatchPrototypes) -> Result<f64> {
    if prototypes.is_empty() {
        return Ok(0.0);
    }
    let dirs = state.directions()?;
    let kappa = state.kappa();
    let a = bessel_ratio_a(state.dim(), kappa)?;
    let mut total = 0.0;
    for (slot, &class) in prototypes.classes.iter().enumerate() {
        if class >= state.num_classes() {
            return Err(CilError::Precondition(format!(
                "matching_loss: prototype class {class} outside classifier ({} classes)",
                state.num_classes()
            )));
        }
        let cos = dirs.row(class).dot(&prototypes.means.row(slot));
        total += kappa * a * (1.0 - cos);
    }
    Ok(total / prototypes.classes.len() as f64)
}

// ---------------------------------------------------------------------------
// Differentiable loss evaluations
// ---------------------------------------------------------------------------

/// Loss value plus analytic gradients with respect to the raw inputs.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub loss: f64,
    /// Gradient w.r.t. the raw (unnormalized) feature rows.
    pub d_features: Array2<f64>,
    /// Gradient w.r.t. the raw classifier weight rows.
    pub d_weights: Array2<f64>,
    /// Gradient w.r.t. `rho = log kappa`.
    pub d_rho: f64,
}

/// Soft-target NLL of the vMF posterior, evaluated from raw features and
/// raw weights through log-sum-exp. Returns the loss and gradients w.r.t.
/// features, weights, and `rho`.
pub fn nll_soft_eval(
    features: &Array2<f64>,
    weights: &Array2<f64>,
    rho: f64,
    soft_labels: &Array2<f64>,
) -> Result<HeadGrads> {
    let bsz = features.nrows();
    let ncls = weights.nrows();
    if soft_labels.dim() != (bsz, ncls) {
        return Err(CilError::Precondition(format!(
            "nll_soft_eval: labels shape {:?}, expected ({bsz}, {ncls})",
            soft_labels.dim()
        )));
    }
    if features.ncols() != weights.ncols() {
        return Err(CilError::Precondition(format!(
            "nll_soft_eval: feature dim {} vs weight dim {}",
            features.ncols(),
            weights.ncols()
        )));
    }
    let kappa = rho.exp();
    let (z_bar, r) = normalize_rows(features, "nll_soft_eval features")?;
    let (dirs, q) = normalize_rows(weights, "nll_soft_eval weights")?;

    let cos = z_bar.dot(&dirs.t()); // B x C
    let logits = &cos * kappa;
    let probs = softmax_rows(&logits);

    let mut loss = 0.0;
    for (lrow, yrow) in logits.rows().into_iter().zip(soft_labels.rows()) {
        let max = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lrow.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let s: f64 = yrow.sum();
        loss += s * lse - yrow.dot(&lrow);
    }
    loss /= bsz as f64;
    if !loss.is_finite() {
        return Err(CilError::Numeric(format!("nll_soft_eval produced non-finite loss {loss}")));
    }

    // dL/dlogit_bi = (s_b p_bi - y_bi) / B
    let mut g = probs.clone();
    for ((mut grow, yrow), _) in g.rows_mut().into_iter().zip(soft_labels.rows()).zip(0..) {
        let s: f64 = yrow.sum();
        grow.mapv_inplace(|p| p * s);
        grow -= &yrow;
    }
    g.mapv_inplace(|x| x / bsz as f64);

    let d_rho = kappa * (&g * &cos).sum();

    // Back through the two normalizations.
    let gz = g.dot(&dirs) * kappa; // B x d, gradient w.r.t. z_bar
    let mut d_features = Array2::zeros(features.raw_dim());
    for b in 0..bsz {
        let zb = z_bar.row(b);
        let gb = gz.row(b);
        let proj = gb.dot(&zb);
        let mut row = d_features.row_mut(b);
        for j in 0..zb.len() {
            row[j] = (gb[j] - proj * zb[j]) / r[b];
        }
    }

    let gw = g.t().dot(&z_bar) * kappa; // C x d, gradient w.r.t. directions
    let mut d_weights = Array2::zeros(weights.raw_dim());
    for i in 0..ncls {
        let mi = dirs.row(i);
        let hi = gw.row(i);
        let proj = hi.dot(&mi);
        let mut row = d_weights.row_mut(i);
        for j in 0..mi.len() {
            row[j] = (hi[j] - proj * mi[j]) / q[i];
        }
    }

    Ok(HeadGrads { loss, d_features, d_weights, d_rho })
}

/// Matching loss evaluated from raw features grouped by class id, with
/// gradients w.r.t. features, weights, and `rho`. Gradients flow into both
/// the classifier directions and (through the batch prototypes) the
/// features unless `stop_feature_grad` is set.
pub fn matching_eval(
    features: &Array2<f64>,
    class_ids: &[usize],
    weights: &Array2<f64>,
    rho: f64,
    stop_feature_grad: bool,
) -> Result<HeadGrads> {
    if features.nrows() != class_ids.len() {
        return Err(CilError::Precondition(format!(
            "matching_eval: {} features vs {} labels",
            features.nrows(),
            class_ids.len()
        )));
    }
    let ncls = weights.nrows();
    let d = weights.ncols();
    if features.ncols() != d {
        return Err(CilError::Precondition(format!(
            "matching_eval: feature dim {} vs weight dim {d}",
            features.ncols()
        )));
    }
    if let Some(&bad) = class_ids.iter().find(|&&y| y >= ncls) {
        return Err(CilError::Precondition(format!(
            "matching_eval: class {bad} outside classifier ({ncls} classes)"
        )));
    }
    let zero = || HeadGrads {
        loss: 0.0,
        d_features: Array2::zeros(features.raw_dim()),
        d_weights: Array2::zeros(weights.raw_dim()),
        d_rho: 0.0,
    };
    if class_ids.is_empty() {
        return Ok(zero());
    }

    let kappa = rho.exp();
    let a = bessel_ratio_a(d, kappa)?;
    let a_deriv = bessel_ratio_a_deriv(d, kappa)?;
    let (z_bar, r) = normalize_rows(features, "matching_eval features")?;
    let (dirs, q) = normalize_rows(weights, "matching_eval weights")?;

    let protos = BatchPrototypes::from_features(features, class_ids)?;
    let npresent = protos.classes.len() as f64;

    // Raw (pre-normalization) per-class means, for the chain rule.
    let mut raw_means = Array2::<f64>::zeros((protos.classes.len(), d));
    for (row, &y) in z_bar.rows().into_iter().zip(class_ids.iter()) {
        let slot = protos.classes.binary_search(&y).expect("class present");
        let mut acc = raw_means.row_mut(slot);
        acc += &row;
    }
    for (slot, mut row) in raw_means.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|x| x / protos.counts[slot] as f64);
    }

    let mut loss = 0.0;
    let mut sum_one_minus_cos = 0.0;
    let mut d_weights = Array2::zeros(weights.raw_dim());
    let mut d_zbar = Array2::<f64>::zeros(z_bar.raw_dim());

    for (slot, &class) in protos.classes.iter().enumerate() {
        let mu = dirs.row(class);
        let mt = protos.means.row(slot);
        let cos = mu.dot(&mt);
        loss += kappa * a * (1.0 - cos);
        sum_one_minus_cos += 1.0 - cos;

        // d/dW_class: (-kA/|P|) (mt - cos*mu) / q
        let scale = -kappa * a / npresent;
        let mut wrow = d_weights.row_mut(class);
        for j in 0..d {
            wrow[j] += scale * (mt[j] - cos * mu[j]) / q[class];
        }

        if !stop_feature_grad {
            // d/d mt = (-kA/|P|) mu; through mt = m/||m||, m = mean(z_bar).
            let m = raw_means.row(slot);
            let mnorm = norm(m.view());
            let proj = {
                let gm: Vec<f64> = (0..d).map(|j| scale * mu[j]).collect();
                let dot_mt: f64 = gm.iter().zip(mt.iter()).map(|(a, b)| a * b).sum();
                (gm, dot_mt)
            };
            let (gm, dot_mt) = proj;
            let inv_cnt = 1.0 / protos.counts[slot] as f64;
            for (bidx, &y) in class_ids.iter().enumerate() {
                if y != class {
                    continue;
                }
                let mut zrow = d_zbar.row_mut(bidx);
                for j in 0..d {
                    zrow[j] += (gm[j] - dot_mt * mt[j]) / mnorm * inv_cnt;
                }
            }
        }
    }
    loss /= npresent;
    if !loss.is_finite() {
        return Err(CilError::Numeric(format!("matching_eval produced non-finite loss {loss}")));
    }

    let mut d_features = Array2::zeros(features.raw_dim());
    if !stop_feature_grad {
        for b in 0..features.nrows() {
            let zb = z_bar.row(b);
            let gb = d_zbar.row(b);
            let proj = gb.dot(&zb);
            let mut row = d_features.row_mut(b);
            for j in 0..d {
                row[j] = (gb[j] - proj * zb[j]) / r[b];
            }
        }
    }

    // d/drho = kappa * d/dkappa, with d(k A_d(k))/dk = A + k A'.
    let d_rho = kappa * (a + kappa * a_deriv) * sum_one_minus_cos / npresent;

    Ok(HeadGrads { loss, d_features, d_weights, d_rho })
}
