//! Monte Carlo gradient estimators of the ELBO: the plain score-function
//! estimator, its Rao-Blackwellized form restricted to Markov-blanket
//! factors, the control-variate form with the score as the variate, and the
//! subsampled estimator for hierarchical models.
//!
//! Per-sample factor log-densities and scores are computed once per batch so
//! the estimators stay comparable on paired draws.

use rand::Rng;

use crate::families::MeanFieldFamily;
use crate::model::ModelSpec;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimatorKind {
    Naive,
    RaoBlackwell,
    RaoBlackwellCv,
    Subsampled,
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Naive => "naive",
            EstimatorKind::RaoBlackwell => "rb",
            EstimatorKind::RaoBlackwellCv => "rbcv",
            EstimatorKind::Subsampled => "subsampled",
        }
    }
}

/// How the control-variate scale is estimated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CvMode {
    /// No control variate; reduces to the Rao-Blackwellized estimator.
    Disabled,
    /// Estimate each scale from the same samples used for the gradient.
    SameSamples,
    /// Estimate each scale on a held-out sub-batch of size max(2, S/10) and
    /// average the gradient over the remaining samples.
    Holdout,
}

/// S joint draws from q(.|lambda) with cached per-factor log-densities and
/// scores.
///
/// A batch may be drawn for a subset of factors (globals plus selected
/// observation blocks); values of inactive latents are placeholders and the
/// batch is then only valid for factor-level evaluation of active factors.
pub struct SampleBatch {
    pub draws: Vec<Vec<f64>>,
    log_q: Vec<Vec<f64>>,
    scores: Vec<Vec<Vec<f64>>>,
    active: Vec<bool>,
}

impl SampleBatch {
    pub fn draw<R: Rng + ?Sized>(
        family: &MeanFieldFamily,
        lambda: &[f64],
        s: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let active = vec![true; family.n_factors()];
        Self::draw_active(family, lambda, s, rng, active)
    }

    /// Draw only global latents and the latents of the given observation
    /// blocks; everything else is a placeholder value of 1.0 (in-support for
    /// both real and positive latents).
    pub fn draw_for_blocks<R: Rng + ?Sized>(
        model: &ModelSpec,
        family: &MeanFieldFamily,
        lambda: &[f64],
        s: usize,
        rng: &mut R,
        blocks: &[usize],
    ) -> Result<Self> {
        let mut active = vec![false; family.n_factors()];
        for &i in &model.layout().global_latents() {
            active[i] = true;
        }
        for &b in blocks {
            for &i in &model.layout().block_latents(b) {
                active[i] = true;
            }
        }
        Self::draw_active(family, lambda, s, rng, active)
    }

    fn draw_active<R: Rng + ?Sized>(
        family: &MeanFieldFamily,
        lambda: &[f64],
        s: usize,
        rng: &mut R,
        active: Vec<bool>,
    ) -> Result<Self> {
        let mut draws = Vec::with_capacity(s);
        let mut log_q = Vec::with_capacity(s);
        let mut scores = Vec::with_capacity(s);
        for _ in 0..s {
            let mut z = vec![1.0; family.n_values()];
            let mut lq = vec![0.0; family.n_factors()];
            let mut sc = vec![Vec::new(); family.n_factors()];
            for i in 0..family.n_factors() {
                if !active[i] {
                    continue;
                }
                let params = &lambda[family.param_range(i)];
                let v = family.factor(i).sample(params, rng)?;
                z[family.value_range(i)].copy_from_slice(&v);
                lq[i] = family.factor(i).log_pdf(params, &v)?;
                sc[i] = family.factor(i).score(params, &v)?;
            }
            draws.push(z);
            log_q.push(lq);
            scores.push(sc);
        }
        Ok(SampleBatch {
            draws,
            log_q,
            scores,
            active,
        })
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn factor_log_q(&self, s: usize, i: usize) -> f64 {
        self.log_q[s][i]
    }

    pub fn factor_score(&self, s: usize, i: usize) -> &[f64] {
        &self.scores[s][i]
    }

    fn fully_active(&self) -> bool {
        self.active.iter().all(|&a| a)
    }
}

/// Per-latent control-variate diagnostic.
#[derive(Clone, Copy, Debug)]
pub struct CvScaleDiag {
    pub latent: usize,
    pub a_star: f64,
    /// True when the variate had zero empirical variance and no control was
    /// applied.
    pub degenerate: bool,
}

/// A gradient estimate over the full unconstrained parameter vector, with
/// per-component variance of the averaged terms and any control-variate
/// scales used.
#[derive(Clone, Debug)]
pub struct GradientEstimate {
    pub gradient: Vec<f64>,
    pub term_variance: Vec<f64>,
    pub cv: Vec<CvScaleDiag>,
    /// Monte Carlo ELBO estimate from the same draws (noisy for the
    /// subsampled estimator, which sees only the sampled blocks).
    pub elbo: f64,
}

/// Check that the family has one factor per model latent with matching
/// dimension and support.
pub fn check_compatibility(model: &ModelSpec, family: &MeanFieldFamily) -> Result<()> {
    let layout = model.layout();
    if family.n_factors() != layout.len() {
        return Err(Error::Mismatch(format!(
            "family has {} factors, model has {} latents",
            family.n_factors(),
            layout.len()
        )));
    }
    for i in 0..layout.len() {
        let e = layout.entry(i);
        let f = family.factor(i);
        if f.dim() != e.dim {
            return Err(Error::Mismatch(format!(
                "latent {} has dimension {}, factor has {}",
                e.id,
                e.dim,
                f.dim()
            )));
        }
        if f.support() != e.support {
            return Err(Error::Mismatch(format!(
                "latent {} support differs from its variational factor",
                e.id
            )));
        }
    }
    Ok(())
}

fn factor_evals(model: &ModelSpec, batch: &SampleBatch) -> Vec<Vec<f64>> {
    batch
        .draws
        .iter()
        .map(|z| (0..model.n_factors()).map(|k| model.eval_factor(k, z)).collect())
        .collect()
}

fn mean_and_variance(terms: &[Vec<f64>], n_params: usize) -> (Vec<f64>, Vec<f64>) {
    let s = terms.len();
    let mut mean = vec![0.0; n_params];
    for t in terms {
        for c in 0..n_params {
            mean[c] += t[c];
        }
    }
    for m in &mut mean {
        *m /= s as f64;
    }
    let mut var = vec![0.0; n_params];
    if s >= 2 {
        for t in terms {
            for c in 0..n_params {
                let d = t[c] - mean[c];
                var[c] += d * d;
            }
        }
        for v in &mut var {
            *v /= (s - 1) as f64;
        }
    }
    (mean, var)
}

fn require_finite(w: f64, what: &str) -> Result<f64> {
    if w.is_finite() {
        Ok(w)
    } else {
        Err(Error::Mismatch(format!(
            "{what} is {w}; family support does not match the model support"
        )))
    }
}

/// Plain score-function estimator over the full parameter vector:
/// (1/S) sum_s score(z_s) (log p(x, z_s) - log q(z_s | lambda)).
pub fn naive_gradient(
    model: &ModelSpec,
    family: &MeanFieldFamily,
    batch: &SampleBatch,
) -> Result<GradientEstimate> {
    check_compatibility(model, family)?;
    if batch.is_empty() {
        return Err(Error::Config("empty sample batch".into()));
    }
    if !batch.fully_active() {
        return Err(Error::Config("naive estimator needs a full batch".into()));
    }
    let evals = factor_evals(model, batch);
    let n_params = family.n_params();
    let mut terms = Vec::with_capacity(batch.len());
    let mut elbo = 0.0;
    for s in 0..batch.len() {
        let lj: f64 = evals[s].iter().sum();
        let lq: f64 = (0..family.n_factors()).map(|i| batch.factor_log_q(s, i)).sum();
        let w = require_finite(lj - lq, "log p - log q")?;
        elbo += w;
        let mut term = vec![0.0; n_params];
        for i in 0..family.n_factors() {
            let range = family.param_range(i);
            for (c, &sv) in range.zip(batch.factor_score(s, i)) {
                term[c] = sv * w;
            }
        }
        terms.push(term);
    }
    let (gradient, term_variance) = mean_and_variance(&terms, n_params);
    Ok(GradientEstimate {
        gradient,
        term_variance,
        cv: Vec::new(),
        elbo: elbo / batch.len() as f64,
    })
}

fn rb_terms(
    model: &ModelSpec,
    family: &MeanFieldFamily,
    batch: &SampleBatch,
    evals: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let n_params = family.n_params();
    let mut terms = vec![vec![0.0; n_params]; batch.len()];
    for i in 0..family.n_factors() {
        let range = family.param_range(i);
        for s in 0..batch.len() {
            let lp: f64 = model.factors_of_latent(i).iter().map(|&k| evals[s][k]).sum();
            let w = require_finite(lp - batch.factor_log_q(s, i), "local log p - log q")?;
            for (c, &sv) in range.clone().zip(batch.factor_score(s, i)) {
                terms[s][c] = sv * w;
            }
        }
    }
    Ok(terms)
}

fn elbo_from_evals(family: &MeanFieldFamily, batch: &SampleBatch, evals: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for s in 0..batch.len() {
        let lj: f64 = evals[s].iter().sum();
        let lq: f64 = (0..family.n_factors()).map(|i| batch.factor_log_q(s, i)).sum();
        total += lj - lq;
    }
    total / batch.len() as f64
}

/// Rao-Blackwellized estimator: per latent i, only the Markov-blanket
/// factors of i enter the log-ratio.
pub fn rb_gradient(
    model: &ModelSpec,
    family: &MeanFieldFamily,
    batch: &SampleBatch,
) -> Result<GradientEstimate> {
    check_compatibility(model, family)?;
    if batch.is_empty() {
        return Err(Error::Config("empty sample batch".into()));
    }
    if !batch.fully_active() {
        return Err(Error::Config("rb estimator needs a full batch".into()));
    }
    let evals = factor_evals(model, batch);
    let terms = rb_terms(model, family, batch, &evals)?;
    let (gradient, term_variance) = mean_and_variance(&terms, family.n_params());
    Ok(GradientEstimate {
        gradient,
        term_variance,
        cv: Vec::new(),
        elbo: elbo_from_evals(family, batch, &evals),
    })
}

/// Optimal control-variate scale a* = sum_d Cov(f^d, h^d) / sum_d Var(h^d)
/// with unbiased (n-1) estimators, summed over the coordinates of one
/// latent's parameter block. Returns (a*, degenerate-variance flag).
pub fn cv_scale(f_terms: &[Vec<f64>], h_terms: &[Vec<f64>]) -> (f64, bool) {
    let s = f_terms.len();
    assert!(s >= 2, "control variates need at least 2 samples");
    assert_eq!(s, h_terms.len());
    let d = f_terms[0].len();
    let mut cov_sum = 0.0;
    let mut var_sum = 0.0;
    for c in 0..d {
        let fm: f64 = f_terms.iter().map(|t| t[c]).sum::<f64>() / s as f64;
        let hm: f64 = h_terms.iter().map(|t| t[c]).sum::<f64>() / s as f64;
        for k in 0..s {
            cov_sum += (f_terms[k][c] - fm) * (h_terms[k][c] - hm);
            var_sum += (h_terms[k][c] - hm) * (h_terms[k][c] - hm);
        }
    }
    // (n-1) normalization cancels in the ratio; applied for the record.
    let n1 = (s - 1) as f64;
    let (cov, var) = (cov_sum / n1, var_sum / n1);
    if var == 0.0 {
        (0.0, true)
    } else {
        (cov / var, false)
    }
}

/// Rao-Blackwellized estimator with the per-latent score control variate
/// (Black Box Variational Inference II):
/// (1/S) sum_s score_i(z_s) (log p_i - log q_i - a*_i).
pub fn rb_cv_gradient(
    model: &ModelSpec,
    family: &MeanFieldFamily,
    batch: &SampleBatch,
    mode: CvMode,
) -> Result<GradientEstimate> {
    check_compatibility(model, family)?;
    if !batch.fully_active() {
        return Err(Error::Config("rbcv estimator needs a full batch".into()));
    }
    let evals = factor_evals(model, batch);
    controlled_gradient(model, family, batch, &evals, mode, None)
}

/// Shared core for the controlled estimators. `block_weights`, when present,
/// replaces the per-latent log-ratio with the subsampled weights and zeroes
/// inactive latents.
fn controlled_gradient(
    model: &ModelSpec,
    family: &MeanFieldFamily,
    batch: &SampleBatch,
    evals: &[Vec<f64>],
    mode: CvMode,
    block_weights: Option<&SubsampledWeights>,
) -> Result<GradientEstimate> {
    let s_total = batch.len();
    if mode != CvMode::Disabled && s_total < 2 {
        return Err(Error::Config(
            "control variates need at least 2 samples".into(),
        ));
    }
    if s_total == 0 {
        return Err(Error::Config("empty sample batch".into()));
    }
    // Sample index ranges: with holdout, the scale comes from the first m
    // samples and the gradient from the rest.
    let holdout = match mode {
        CvMode::Holdout => {
            let m = (s_total / 10).max(2);
            if s_total < m + 1 {
                return Err(Error::Config(format!(
                    "holdout control variates need more than {m} samples"
                )));
            }
            m
        }
        _ => 0,
    };
    let grad_range = holdout..s_total;
    let scale_range = if mode == CvMode::Holdout { 0..holdout } else { 0..s_total };

    let n_params = family.n_params();
    let mut terms = vec![vec![0.0; n_params]; grad_range.len()];
    let mut cv = Vec::new();
    for i in 0..family.n_factors() {
        let active = block_weights.map_or(true, |bw| bw.active_latents[i]);
        if !active {
            continue;
        }
        let range = family.param_range(i);
        let w_of = |s: usize| -> Result<f64> {
            let w = match block_weights {
                Some(bw) => (bw.weight)(i, s, evals, batch),
                None => {
                    let lp: f64 =
                        model.factors_of_latent(i).iter().map(|&k| evals[s][k]).sum();
                    lp - batch.factor_log_q(s, i)
                }
            };
            require_finite(w, "local log p - log q")
        };
        let a_star = if mode == CvMode::Disabled {
            CvScaleDiag {
                latent: i,
                a_star: 0.0,
                degenerate: false,
            }
        } else {
            let mut f_terms = Vec::with_capacity(scale_range.len());
            let mut h_terms = Vec::with_capacity(scale_range.len());
            for s in scale_range.clone() {
                let w = w_of(s)?;
                let score = batch.factor_score(s, i);
                f_terms.push(score.iter().map(|&sv| sv * w).collect::<Vec<f64>>());
                h_terms.push(score.to_vec());
            }
            let (a, degenerate) = cv_scale(&f_terms, &h_terms);
            CvScaleDiag {
                latent: i,
                a_star: a,
                degenerate,
            }
        };
        for (row, s) in grad_range.clone().enumerate() {
            let w = w_of(s)? - a_star.a_star;
            for (c, &sv) in range.clone().zip(batch.factor_score(s, i)) {
                terms[row][c] = sv * w;
            }
        }
        cv.push(a_star);
    }
    let (gradient, term_variance) = mean_and_variance(&terms, n_params);
    let elbo = match block_weights {
        Some(bw) => bw.elbo(family, batch, evals),
        None => elbo_from_evals(family, batch, evals),
    };
    Ok(GradientEstimate {
        gradient,
        term_variance,
        cv,
        elbo,
    })
}

/// Weights for the subsampled hierarchical estimator.
struct SubsampledWeights<'a> {
    active_latents: Vec<bool>,
    weight: Box<dyn Fn(usize, usize, &[Vec<f64>], &SampleBatch) -> f64 + 'a>,
    elbo_fn: Box<dyn Fn(&MeanFieldFamily, &SampleBatch, &[Vec<f64>]) -> f64 + 'a>,
}

impl SubsampledWeights<'_> {
    fn elbo(&self, family: &MeanFieldFamily, batch: &SampleBatch, evals: &[Vec<f64>]) -> f64 {
        (self.elbo_fn)(family, batch, evals)
    }
}

/// Subsampled estimator for a hierarchical model and one observation block:
/// global components see their prior factors plus n times the block's
/// blanket factors; block-i locals see n times their blanket; all other
/// local gradients are exactly zero.
pub fn subsampled_gradient(
    model: &ModelSpec,
    family: &MeanFieldFamily,
    batch: &SampleBatch,
    obs: usize,
    mode: CvMode,
) -> Result<GradientEstimate> {
    check_compatibility(model, family)?;
    let n = model.n_observations();
    if n == 0 {
        return Err(Error::Config("model is not hierarchical (n = 0)".into()));
    }
    if obs >= n {
        return Err(Error::Config(format!(
            "observation index {obs} out of range 0..{n}"
        )));
    }
    let layout = model.layout();
    let mut active_latents = vec![false; layout.len()];
    for &g in &layout.global_latents() {
        active_latents[g] = true;
    }
    for &l in &layout.block_latents(obs) {
        active_latents[l] = true;
    }
    let block: std::collections::BTreeSet<usize> =
        model.block_factors(obs).into_iter().collect();
    let global_prior: std::collections::BTreeSet<usize> =
        model.global_prior_factors().into_iter().collect();
    let is_global: Vec<bool> = (0..layout.len())
        .map(|i| layout.entry(i).role == crate::model::Role::Global)
        .collect();

    // Evaluate only the factors the estimator touches.
    let mut needed: Vec<usize> = global_prior.iter().chain(block.iter()).copied().collect();
    needed.sort_unstable();
    let evals: Vec<Vec<f64>> = batch
        .draws
        .iter()
        .map(|z| {
            let mut row = vec![0.0; model.n_factors()];
            for &k in &needed {
                row[k] = model.eval_factor(k, z);
            }
            row
        })
        .collect();

    let nf = n as f64;
    let is_global_w = is_global.clone();
    let block_w = block.clone();
    let global_prior_w = global_prior.clone();
    let weight = move |i: usize, s: usize, evals: &[Vec<f64>], batch: &SampleBatch| -> f64 {
        let blanket_block: f64 = model
            .factors_of_latent(i)
            .iter()
            .filter(|k| block_w.contains(k))
            .map(|&k| evals[s][k])
            .sum();
        if is_global_w[i] {
            let prior: f64 = model
                .factors_of_latent(i)
                .iter()
                .filter(|k| global_prior_w.contains(k))
                .map(|&k| evals[s][k])
                .sum();
            prior + nf * blanket_block - batch.factor_log_q(s, i)
        } else {
            nf * (blanket_block - batch.factor_log_q(s, i))
        }
    };
    let elbo_block = block.clone();
    let elbo_gp = global_prior.clone();
    let is_global_e = is_global;
    let elbo_fn = move |family: &MeanFieldFamily, batch: &SampleBatch, evals: &[Vec<f64>]| -> f64 {
        let mut total = 0.0;
        for s in 0..batch.len() {
            let prior: f64 = elbo_gp.iter().map(|&k| evals[s][k]).sum();
            let blk: f64 = elbo_block.iter().map(|&k| evals[s][k]).sum();
            let mut lq = 0.0;
            for i in 0..family.n_factors() {
                if is_global_e[i] {
                    lq += batch.factor_log_q(s, i);
                }
            }
            let lq_local: f64 = model
                .layout()
                .block_latents(obs)
                .iter()
                .map(|&i| batch.factor_log_q(s, i))
                .sum();
            total += prior + nf * (blk - lq_local) - lq;
        }
        total / batch.len() as f64
    };
    let weights = SubsampledWeights {
        active_latents,
        weight: Box::new(weight),
        elbo_fn: Box::new(elbo_fn),
    };
    controlled_gradient(model, family, batch, &evals, mode, Some(&weights))
}

/// Average of single-observation subsampled estimates over a minibatch of
/// observation indices, sharing one sample batch.
pub fn subsampled_minibatch_gradient(
    model: &ModelSpec,
    family: &MeanFieldFamily,
    batch: &SampleBatch,
    obs: &[usize],
    mode: CvMode,
) -> Result<GradientEstimate> {
    if obs.is_empty() {
        return Err(Error::Config("empty observation minibatch".into()));
    }
    let n_params = family.n_params();
    let mut gradient = vec![0.0; n_params];
    let mut term_variance = vec![0.0; n_params];
    let mut cv = Vec::new();
    let mut elbo = 0.0;
    for &i in obs {
        let g = subsampled_gradient(model, family, batch, i, mode)?;
        for c in 0..n_params {
            gradient[c] += g.gradient[c];
            term_variance[c] += g.term_variance[c];
        }
        cv.extend(g.cv);
        elbo += g.elbo;
    }
    let b = obs.len() as f64;
    for c in 0..n_params {
        gradient[c] /= b;
        term_variance[c] /= b;
    }
    Ok(GradientEstimate {
        gradient,
        term_variance,
        cv,
        elbo: elbo / b,
    })
}

/// Dispatch on estimator kind. `obs` must be given for the subsampled kind.
pub fn estimate_gradient(
    model: &ModelSpec,
    family: &MeanFieldFamily,
    batch: &SampleBatch,
    kind: EstimatorKind,
    cv_mode: CvMode,
    obs: Option<&[usize]>,
) -> Result<GradientEstimate> {
    match kind {
        EstimatorKind::Naive => naive_gradient(model, family, batch),
        EstimatorKind::RaoBlackwell => rb_gradient(model, family, batch),
        EstimatorKind::RaoBlackwellCv => rb_cv_gradient(model, family, batch, cv_mode),
        EstimatorKind::Subsampled => {
            let obs = obs.ok_or_else(|| {
                Error::Config("subsampled estimator needs observation indices".into())
            })?;
            subsampled_minibatch_gradient(model, family, batch, obs, cv_mode)
        }
    }
}

/// Empirical per-coordinate variance of single-sample estimator terms over
/// `replicates` independent draws at a fixed lambda.
///
/// For the control-variate estimator the scales are fixed from a pilot
/// batch of 256 samples, then applied to each single-sample term.
pub fn estimator_variance<R: Rng + ?Sized>(
    model: &ModelSpec,
    family: &MeanFieldFamily,
    lambda: &[f64],
    kind: EstimatorKind,
    replicates: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_compatibility(model, family)?;
    if replicates < 2 {
        return Err(Error::Config("variance needs at least 2 replicates".into()));
    }
    let pilot_scales: Option<Vec<f64>> = match kind {
        EstimatorKind::RaoBlackwellCv => {
            let pilot = SampleBatch::draw(family, lambda, 256, rng)?;
            let est = rb_cv_gradient(model, family, &pilot, CvMode::SameSamples)?;
            let mut scales = vec![0.0; family.n_factors()];
            for d in &est.cv {
                scales[d.latent] = d.a_star;
            }
            Some(scales)
        }
        _ => None,
    };
    let n_params = family.n_params();
    let mut terms = Vec::with_capacity(replicates);
    for r in 0..replicates {
        let batch = SampleBatch::draw(family, lambda, 1, rng)?;
        let term = match kind {
            EstimatorKind::Naive => naive_gradient(model, family, &batch)?.gradient,
            EstimatorKind::RaoBlackwell => rb_gradient(model, family, &batch)?.gradient,
            EstimatorKind::RaoBlackwellCv => {
                let evals = factor_evals(model, &batch);
                let scales = pilot_scales.as_ref().unwrap();
                let mut term = vec![0.0; n_params];
                for i in 0..family.n_factors() {
                    let lp: f64 =
                        model.factors_of_latent(i).iter().map(|&k| evals[0][k]).sum();
                    let w = require_finite(lp - batch.factor_log_q(0, i), "local ratio")?
                        - scales[i];
                    for (c, &sv) in family.param_range(i).zip(batch.factor_score(0, i)) {
                        term[c] = sv * w;
                    }
                }
                term
            }
            EstimatorKind::Subsampled => {
                let n = model.n_observations().max(1);
                let obs = r % n;
                subsampled_gradient(model, family, &batch, obs, CvMode::Disabled)?.gradient
            }
        };
        terms.push(term);
    }
    let (_, var) = mean_and_variance(&terms, n_params);
    Ok(var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::{normal_log_pdf, FactorKind};
    use crate::model::{LatentEntry, LatentLayout, LogJointFactor, Role};
    use crate::families::Support;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn entry(id: &str, support: Support, role: Role) -> LatentEntry {
        LatentEntry {
            id: id.into(),
            support,
            dim: 1,
            role,
        }
    }

    /// log p(x, z) := log q(z | lambda0) for a fixed lambda0, factor by factor.
    fn matched_model(lambda0: Vec<f64>) -> (ModelSpec, MeanFieldFamily, Vec<f64>) {
        let family = MeanFieldFamily::new(vec![
            FactorKind::GaussianMeanLogStd { dim: 1 },
            FactorKind::GammaShapeRate { dim: 1 },
        ]);
        let layout = LatentLayout::new(vec![
            entry("a", Support::Real, Role::Global),
            entry("b", Support::Positive, Role::Global),
        ])
        .unwrap();
        let mut factors = Vec::new();
        for i in 0..family.n_factors() {
            let f = *family.factor(i);
            let params: Vec<f64> = lambda0[family.param_range(i)].to_vec();
            factors.push(LogJointFactor::new(
                format!("q{i}"),
                vec![i],
                None,
                move |s: &[&[f64]]| f.log_pdf(&params, s[0]).unwrap(),
            ));
        }
        let model = ModelSpec::new(layout, factors, 0).unwrap();
        (model, family, lambda0)
    }

    /// z ~ N(0,1), x | z ~ N(z,1); q = N(mu, sigma) with lambda = (mu, log sigma).
    /// Closed-form gradient at lambda: (x - 2 mu, 1 - 2 sigma^2).
    fn normal_normal(x: f64) -> (ModelSpec, MeanFieldFamily) {
        let layout = LatentLayout::new(vec![entry("z", Support::Real, Role::Global)]).unwrap();
        let factors = vec![
            LogJointFactor::new("prior", vec![0], None, |s: &[&[f64]]| {
                normal_log_pdf(0.0, 1.0, s[0][0])
            }),
            LogJointFactor::new("lik", vec![0], None, move |s: &[&[f64]]| {
                normal_log_pdf(s[0][0], 1.0, x)
            }),
        ];
        let model = ModelSpec::new(layout, factors, 0).unwrap();
        let family = MeanFieldFamily::new(vec![FactorKind::GaussianMeanLogStd { dim: 1 }]);
        (model, family)
    }

    /// Two-latent overlap: z1, z2 ~ N(0,1), x ~ N(z1 + z2, 1).
    fn two_latent_overlap(x: f64) -> (ModelSpec, MeanFieldFamily) {
        let layout = LatentLayout::new(vec![
            entry("z1", Support::Real, Role::Global),
            entry("z2", Support::Real, Role::Global),
        ])
        .unwrap();
        let factors = vec![
            LogJointFactor::new("p1", vec![0], None, |s: &[&[f64]]| {
                normal_log_pdf(0.0, 1.0, s[0][0])
            }),
            LogJointFactor::new("p2", vec![1], None, |s: &[&[f64]]| {
                normal_log_pdf(0.0, 1.0, s[0][0])
            }),
            LogJointFactor::new("lik", vec![0, 1], None, move |s: &[&[f64]]| {
                normal_log_pdf(s[0][0] + s[1][0], 1.0, x)
            }),
        ];
        let model = ModelSpec::new(layout, factors, 0).unwrap();
        let family = MeanFieldFamily::new(vec![
            FactorKind::GaussianMeanLogStd { dim: 1 },
            FactorKind::GaussianMeanLogStd { dim: 1 },
        ]);
        (model, family)
    }

    /// Hierarchical: beta ~ N(0,1) global; per block i: z_i ~ N(beta, 1)
    /// local, one observation x_i ~ N(z_i, 1).
    fn hierarchical_with_locals(xs: &[f64]) -> (ModelSpec, MeanFieldFamily) {
        let n = xs.len();
        let mut entries = vec![entry("beta", Support::Real, Role::Global)];
        for i in 0..n {
            entries.push(entry(&format!("z{i}"), Support::Real, Role::Local(i)));
        }
        let layout = LatentLayout::new(entries).unwrap();
        let mut factors = vec![LogJointFactor::new("prior_beta", vec![0], None, |s: &[&[f64]]| {
            normal_log_pdf(0.0, 1.0, s[0][0])
        })];
        for (i, &x) in xs.iter().enumerate() {
            factors.push(LogJointFactor::new(
                format!("prior_z{i}"),
                vec![0, i + 1],
                Some(i),
                |s: &[&[f64]]| normal_log_pdf(s[0][0], 1.0, s[1][0]),
            ));
            factors.push(LogJointFactor::new(
                format!("lik{i}"),
                vec![i + 1],
                Some(i),
                move |s: &[&[f64]]| normal_log_pdf(s[0][0], 1.0, x),
            ));
        }
        let model = ModelSpec::new(layout, factors, n).unwrap();
        let family = MeanFieldFamily::new(vec![FactorKind::GaussianMeanLogStd { dim: 1 }; n + 1]);
        (model, family)
    }

    /// Hierarchical with no locals: beta ~ N(0,1), x_i ~ N(beta, 1).
    /// Closed-form mean-gradient: sum(x) - (n + 1) mu at sigma = 1.
    fn hierarchical_no_locals(xs: &[f64]) -> (ModelSpec, MeanFieldFamily) {
        let layout =
            LatentLayout::new(vec![entry("beta", Support::Real, Role::Global)]).unwrap();
        let mut factors = vec![LogJointFactor::new("prior", vec![0], None, |s: &[&[f64]]| {
            normal_log_pdf(0.0, 1.0, s[0][0])
        })];
        for (i, &x) in xs.iter().enumerate() {
            factors.push(LogJointFactor::new(
                format!("lik{i}"),
                vec![0],
                Some(i),
                move |s: &[&[f64]]| normal_log_pdf(s[0][0], 1.0, x),
            ));
        }
        let model = ModelSpec::new(layout, factors, xs.len()).unwrap();
        let family = MeanFieldFamily::new(vec![FactorKind::GaussianMeanLogStd { dim: 1 }]);
        (model, family)
    }

    #[test]
    fn matched_densities_give_exact_zero_gradients() {
        let (model, family, lambda) = matched_model(vec![0.4, -0.2, 0.1, 0.3]);
        let mut r = rng(21);
        let batch = SampleBatch::draw(&family, &lambda, 16, &mut r).unwrap();
        for g in [
            naive_gradient(&model, &family, &batch).unwrap(),
            rb_gradient(&model, &family, &batch).unwrap(),
            rb_cv_gradient(&model, &family, &batch, CvMode::SameSamples).unwrap(),
        ] {
            assert!(g.gradient.iter().all(|&v| v == 0.0), "{:?}", g.gradient);
            assert_eq!(g.elbo, 0.0);
        }
    }

    #[test]
    fn single_sample_naive_is_the_single_term() {
        let (model, family) = normal_normal(1.0);
        let lambda = [0.2, -0.1];
        let mut r = rng(22);
        let batch = SampleBatch::draw(&family, &lambda, 1, &mut r).unwrap();
        let g = naive_gradient(&model, &family, &batch).unwrap();
        let z = batch.draws[0].clone();
        let w = model.log_joint(&z).unwrap() - family.log_pdf(&lambda, &z).unwrap();
        let score = family.factor_score(0, &lambda, &z).unwrap();
        assert_eq!(g.gradient, vec![score[0] * w, score[1] * w]);
        assert_eq!(g.term_variance, vec![0.0, 0.0]);
    }

    #[test]
    fn naive_estimator_is_unbiased_on_conjugate_oracle() {
        let (model, family) = normal_normal(1.0);
        let lambda = [0.0, 0.0]; // q = N(0, 1); true gradient (1, -1)
        let mut r = rng(23);
        let reps = 200;
        let mut means = vec![Vec::new(); 2];
        for _ in 0..reps {
            let batch = SampleBatch::draw(&family, &lambda, 250, &mut r).unwrap();
            let g = naive_gradient(&model, &family, &batch).unwrap();
            means[0].push(g.gradient[0]);
            means[1].push(g.gradient[1]);
        }
        for (c, truth) in [(0usize, 1.0f64), (1, -1.0)] {
            let m: f64 = means[c].iter().sum::<f64>() / reps as f64;
            let v: f64 = means[c].iter().map(|x| (x - m) * (x - m)).sum::<f64>()
                / (reps - 1) as f64;
            let se = (v / reps as f64).sqrt();
            assert!((m - truth).abs() < 3.0 * se, "coord {c}: {m} vs {truth} se {se}");
        }
    }

    #[test]
    fn rb_matches_naive_bitwise_on_single_latent_model() {
        let (model, family) = normal_normal(-0.5);
        let lambda = [0.3, 0.1];
        let mut r = rng(24);
        let batch = SampleBatch::draw(&family, &lambda, 64, &mut r).unwrap();
        let a = naive_gradient(&model, &family, &batch).unwrap();
        let b = rb_gradient(&model, &family, &batch).unwrap();
        assert_eq!(a.gradient, b.gradient);
    }

    #[test]
    fn rb_component_ignores_factors_outside_the_blanket() {
        let build = |constant: bool| {
            let layout = LatentLayout::new(vec![
                entry("a", Support::Real, Role::Global),
                entry("b", Support::Real, Role::Global),
            ])
            .unwrap();
            let pb: Box<dyn Fn(&[&[f64]]) -> f64 + Send + Sync> = if constant {
                Box::new(|_: &[&[f64]]| 7.3)
            } else {
                Box::new(|s: &[&[f64]]| normal_log_pdf(0.0, 2.0, s[0][0]))
            };
            let factors = vec![
                LogJointFactor::new("pa", vec![0], None, |s: &[&[f64]]| {
                    normal_log_pdf(0.0, 1.0, s[0][0])
                }),
                LogJointFactor::new("pb", vec![1], None, move |s: &[&[f64]]| pb(s)),
            ];
            ModelSpec::new(layout, factors, 0).unwrap()
        };
        let family = MeanFieldFamily::new(vec![
            FactorKind::GaussianMeanLogStd { dim: 1 },
            FactorKind::GaussianMeanLogStd { dim: 1 },
        ]);
        let lambda = [0.1, 0.0, -0.2, 0.05];
        let mut r1 = rng(25);
        let batch = SampleBatch::draw(&family, &lambda, 32, &mut r1).unwrap();
        let g1 = rb_gradient(&build(false), &family, &batch).unwrap();
        let g2 = rb_gradient(&build(true), &family, &batch).unwrap();
        assert_eq!(&g1.gradient[0..2], &g2.gradient[0..2]);
        assert_ne!(&g1.gradient[2..4], &g2.gradient[2..4]);
    }

    #[test]
    fn cv_scale_perfect_correlation_and_orthogonality() {
        let h: Vec<Vec<f64>> = vec![vec![1.0], vec![-0.5], vec![2.0], vec![0.25]];
        let f: Vec<Vec<f64>> = h.iter().map(|v| vec![2.0 * v[0]]).collect();
        let (a, degenerate) = cv_scale(&f, &h);
        assert_relative_eq!(a, 2.0, epsilon = 1e-14);
        assert!(!degenerate);
        let residual_var: f64 = f
            .iter()
            .zip(&h)
            .map(|(fv, hv)| {
                let d = fv[0] - a * hv[0];
                d * d
            })
            .sum();
        assert!(residual_var < 1e-24);

        let h2: Vec<Vec<f64>> = vec![vec![1.0], vec![-1.0], vec![1.0], vec![-1.0]];
        let f2: Vec<Vec<f64>> = vec![vec![1.0], vec![1.0], vec![-1.0], vec![-1.0]];
        let (a2, _) = cv_scale(&f2, &h2);
        assert_eq!(a2, 0.0);

        let hc: Vec<Vec<f64>> = vec![vec![3.0]; 4];
        let (a3, degenerate3) = cv_scale(&f2, &hc);
        assert_eq!(a3, 0.0);
        assert!(degenerate3);
    }

    #[test]
    fn cv_scale_matches_direct_covariance_oracle() {
        // Fixed 5-sample, 2-dimensional toy set against the textbook
        // sum(fh) - n fbar hbar formula.
        let f = vec![
            vec![1.0, 2.0],
            vec![-0.3, 0.7],
            vec![2.2, -1.1],
            vec![0.05, 0.6],
            vec![-1.9, 3.3],
        ];
        let h = vec![
            vec![0.5, 1.0],
            vec![-0.2, 0.3],
            vec![1.8, -0.9],
            vec![0.0, 0.35],
            vec![-1.5, 2.6],
        ];
        let n = 5.0;
        let mut cov = 0.0;
        let mut var = 0.0;
        for d in 0..2 {
            let fb: f64 = f.iter().map(|v| v[d]).sum::<f64>() / n;
            let hb: f64 = h.iter().map(|v| v[d]).sum::<f64>() / n;
            let sfh: f64 = f.iter().zip(&h).map(|(a, b)| a[d] * b[d]).sum();
            let shh: f64 = h.iter().map(|v| v[d] * v[d]).sum();
            cov += (sfh - n * fb * hb) / (n - 1.0);
            var += (shh - n * hb * hb) / (n - 1.0);
        }
        let (a, _) = cv_scale(&f, &h);
        assert_relative_eq!(a, cov / var, epsilon = 1e-12);
    }

    #[test]
    fn disabled_control_variate_equals_rb() {
        let (model, family) = two_latent_overlap(0.7);
        let lambda = [0.1, -0.1, 0.2, 0.0];
        let mut r = rng(26);
        let batch = SampleBatch::draw(&family, &lambda, 40, &mut r).unwrap();
        let a = rb_gradient(&model, &family, &batch).unwrap();
        let b = rb_cv_gradient(&model, &family, &batch, CvMode::Disabled).unwrap();
        assert_eq!(a.gradient, b.gradient);
    }

    #[test]
    fn rbcv_rejects_single_sample_batches() {
        let (model, family) = normal_normal(1.0);
        let mut r = rng(27);
        let batch = SampleBatch::draw(&family, &[0.0, 0.0], 1, &mut r).unwrap();
        assert!(rb_cv_gradient(&model, &family, &batch, CvMode::SameSamples).is_err());
    }

    #[test]
    fn variance_ordering_on_paired_batches() {
        // Var(rbcv) <= Var(rb) <= Var(naive), per coordinate, in most trials.
        let (model, family) = two_latent_overlap(1.3);
        let lambda = [0.4, -0.3, -0.2, 0.1];
        let mut r = rng(28);
        let trials = 100;
        let mut rb_le_naive = 0usize;
        let mut cv_le_rb = 0usize;
        let mut coords = 0usize;
        for _ in 0..trials {
            let batch = SampleBatch::draw(&family, &lambda, 100, &mut r).unwrap();
            let n = naive_gradient(&model, &family, &batch).unwrap();
            let rb = rb_gradient(&model, &family, &batch).unwrap();
            let cv = rb_cv_gradient(&model, &family, &batch, CvMode::SameSamples).unwrap();
            for c in 0..family.n_params() {
                coords += 1;
                if rb.term_variance[c] <= n.term_variance[c] {
                    rb_le_naive += 1;
                }
                if cv.term_variance[c] <= rb.term_variance[c] {
                    cv_le_rb += 1;
                }
            }
        }
        assert!(
            rb_le_naive * 100 >= coords * 90,
            "rb <= naive only {rb_le_naive}/{coords}"
        );
        assert!(cv_le_rb * 100 >= coords * 90, "cv <= rb only {cv_le_rb}/{coords}");
    }

    #[test]
    fn rbcv_is_unbiased_on_conjugate_oracle() {
        let (model, family) = normal_normal(1.0);
        let lambda = [0.0, 0.0];
        let mut r = rng(29);
        let reps = 200;
        let mut means = Vec::new();
        for _ in 0..reps {
            let batch = SampleBatch::draw(&family, &lambda, 100, &mut r).unwrap();
            means.push(rb_cv_gradient(&model, &family, &batch, CvMode::SameSamples)
                .unwrap()
                .gradient[0]);
        }
        let m: f64 = means.iter().sum::<f64>() / reps as f64;
        let v: f64 =
            means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (reps - 1) as f64;
        let se = (v / reps as f64).sqrt();
        assert!((m - 1.0).abs() < 3.0 * se, "mean {m} se {se}");
    }

    #[test]
    fn holdout_mode_runs_and_stays_unbiased() {
        let (model, family) = normal_normal(1.0);
        let lambda = [0.0, 0.0];
        let mut r = rng(30);
        let reps = 300;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..reps {
            let batch = SampleBatch::draw(&family, &lambda, 60, &mut r).unwrap();
            let g = rb_cv_gradient(&model, &family, &batch, CvMode::Holdout).unwrap();
            sum += g.gradient[0];
            sq += g.gradient[0] * g.gradient[0];
        }
        let m = sum / reps as f64;
        let v = sq / reps as f64 - m * m;
        let se = (v / reps as f64).sqrt();
        assert!((m - 1.0).abs() < 4.0 * se, "mean {m} se {se}");
    }

    #[test]
    fn subsampled_single_observation_model_matches_rb() {
        let (model, family) = hierarchical_with_locals(&[0.8]);
        let lambda = vec![0.1, -0.2, 0.3, 0.0];
        let mut r = rng(31);
        let batch = SampleBatch::draw(&family, &lambda, 32, &mut r).unwrap();
        let sub = subsampled_gradient(&model, &family, &batch, 0, CvMode::Disabled).unwrap();
        let rb = rb_gradient(&model, &family, &batch).unwrap();
        for c in 0..family.n_params() {
            assert_relative_eq!(sub.gradient[c], rb.gradient[c], epsilon = 1e-12);
        }
    }

    #[test]
    fn exhaustive_average_over_observations_equals_full_rb() {
        let xs = [0.8, -0.4, 1.2, 0.1];
        let (model, family) = hierarchical_with_locals(&xs);
        let lambda: Vec<f64> = (0..family.n_params()).map(|i| 0.05 * i as f64 - 0.2).collect();
        let mut r = rng(32);
        let batch = SampleBatch::draw(&family, &lambda, 25, &mut r).unwrap();
        let rb = rb_gradient(&model, &family, &batch).unwrap();
        let mut avg = vec![0.0; family.n_params()];
        for i in 0..xs.len() {
            let g = subsampled_gradient(&model, &family, &batch, i, CvMode::Disabled).unwrap();
            for c in 0..avg.len() {
                avg[c] += g.gradient[c] / xs.len() as f64;
            }
        }
        for c in 0..avg.len() {
            assert!(
                (avg[c] - rb.gradient[c]).abs() <= 1e-10 * rb.gradient[c].abs().max(1.0),
                "coord {c}: {} vs {}",
                avg[c],
                rb.gradient[c]
            );
        }
    }

    #[test]
    fn subsampled_zeroes_other_local_blocks() {
        let xs = [0.8, -0.4, 1.2];
        let (model, family) = hierarchical_with_locals(&xs);
        let lambda = vec![0.0; family.n_params()];
        let mut r = rng(33);
        let batch = SampleBatch::draw(&family, &lambda, 8, &mut r).unwrap();
        let g = subsampled_gradient(&model, &family, &batch, 1, CvMode::Disabled).unwrap();
        // latent order: beta, z0, z1, z2 -> params 2..4 (z0) and 6..8 (z2) zero
        assert_eq!(&g.gradient[2..4], &[0.0, 0.0]);
        assert_ne!(&g.gradient[4..6], &[0.0, 0.0]);
        assert_eq!(&g.gradient[6..8], &[0.0, 0.0]);
    }

    #[test]
    fn subsampled_mean_matches_closed_form_hierarchical_gradient() {
        let xs = [1.0, 0.5, -0.2, 0.9];
        let (model, family) = hierarchical_no_locals(&xs);
        let mu = 0.1;
        let lambda = [mu, 0.0];
        let truth = xs.iter().sum::<f64>() - (xs.len() as f64 + 1.0) * mu;
        let mut r = rng(34);
        let reps = 500;
        let mut means = Vec::new();
        for rep in 0..reps {
            let batch = SampleBatch::draw(&family, &lambda, 20, &mut r).unwrap();
            let obs = rep % xs.len();
            let g = subsampled_gradient(&model, &family, &batch, obs, CvMode::Disabled).unwrap();
            means.push(g.gradient[0]);
        }
        let m: f64 = means.iter().sum::<f64>() / reps as f64;
        let v: f64 =
            means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (reps - 1) as f64;
        let se = (v / reps as f64).sqrt();
        assert!((m - truth).abs() < 3.0 * se, "mean {m} vs {truth} se {se}");
    }

    #[test]
    fn subsampled_requires_hierarchical_model() {
        let (model, family) = normal_normal(1.0);
        let mut r = rng(35);
        let batch = SampleBatch::draw(&family, &[0.0, 0.0], 4, &mut r).unwrap();
        assert!(subsampled_gradient(&model, &family, &batch, 0, CvMode::Disabled).is_err());
    }

    #[test]
    fn estimator_variance_zero_on_matched_model() {
        let (model, family, lambda) = matched_model(vec![0.0, 0.0, 0.2, -0.1]);
        let mut r = rng(36);
        let v = estimator_variance(&model, &family, &lambda, EstimatorKind::Naive, 50, &mut r)
            .unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn batch_average_variance_follows_one_over_s() {
        let (model, family) = normal_normal(1.0);
        let lambda = [0.0, 0.0];
        let mut r = rng(37);
        let term_var =
            estimator_variance(&model, &family, &lambda, EstimatorKind::Naive, 20000, &mut r)
                .unwrap();
        for s in [10usize, 100] {
            let reps = 2000;
            let mut ests = Vec::new();
            for _ in 0..reps {
                let batch = SampleBatch::draw(&family, &lambda, s, &mut r).unwrap();
                ests.push(naive_gradient(&model, &family, &batch).unwrap().gradient[0]);
            }
            let m: f64 = ests.iter().sum::<f64>() / reps as f64;
            let v: f64 =
                ests.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (reps - 1) as f64;
            let expected = term_var[0] / s as f64;
            assert!(
                (v - expected).abs() < 0.2 * expected,
                "S={s}: {v} vs {expected}"
            );
        }
    }

    #[test]
    fn support_mismatch_aborts_estimation() {
        // Positive-support model paired with a real-support family.
        let layout =
            LatentLayout::new(vec![entry("x", Support::Positive, Role::Global)]).unwrap();
        let factors = vec![LogJointFactor::new("p", vec![0], None, |s: &[&[f64]]| {
            crate::families::gamma_log_pdf(1.0, 1.0, s[0][0])
        })];
        let model = ModelSpec::new(layout, factors, 0).unwrap();
        let family = MeanFieldFamily::new(vec![FactorKind::GaussianMeanLogStd { dim: 1 }]);
        let mut r = rng(38);
        let batch = SampleBatch::draw(&family, &[0.0, 0.0], 4, &mut r).unwrap();
        assert!(naive_gradient(&model, &family, &batch).is_err());
    }
}
