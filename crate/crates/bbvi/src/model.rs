//! Model description: latent-variable layout and a factorized log-joint with
//! declared dependency sets. Dependency sets are what enable the
//! Rao-Blackwellized estimators and the hierarchical subsampling path; they
//! are declared by the model builder, not inferred.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::families::Support;
use crate::{Error, Result};

/// Role of a latent in a hierarchical model. Local latents belong to one
/// observation block (one subsampling unit).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Global,
    Local(usize),
}

#[derive(Clone, Debug)]
pub struct LatentEntry {
    pub id: String,
    pub support: Support,
    pub dim: usize,
    pub role: Role,
}

/// Ordered layout of all latent variables over a flat value vector.
#[derive(Clone, Debug)]
pub struct LatentLayout {
    entries: Vec<LatentEntry>,
    offsets: Vec<usize>,
    total_dim: usize,
}

impl LatentLayout {
    pub fn new(entries: Vec<LatentEntry>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.id.clone()) {
                return Err(Error::Config(format!("duplicate latent id {}", e.id)));
            }
            if e.dim == 0 {
                return Err(Error::Config(format!("latent {} has dimension 0", e.id)));
            }
        }
        let mut offsets = Vec::with_capacity(entries.len());
        let mut total = 0;
        for e in &entries {
            offsets.push(total);
            total += e.dim;
        }
        Ok(LatentLayout {
            entries,
            offsets,
            total_dim: total,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, i: usize) -> &LatentEntry {
        &self.entries[i]
    }

    pub fn entries(&self) -> &[LatentEntry] {
        &self.entries
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn value_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i] + self.entries[i].dim
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.entries
            .iter()
            .position(|e| e.id == id)
            .ok_or_else(|| Error::UnknownLatent(id.to_string()))
    }

    pub fn slice<'a>(&self, z: &'a [f64], i: usize) -> &'a [f64] {
        &z[self.value_range(i)]
    }

    /// Indices of global latents.
    pub fn global_latents(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.entries[i].role == Role::Global)
            .collect()
    }

    /// Indices of latents in observation block `b`.
    pub fn block_latents(&self, b: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.entries[i].role == Role::Local(b))
            .collect()
    }
}

type Evaluator = Box<dyn Fn(&[&[f64]]) -> f64 + Send + Sync>;

/// One additive term of the log-joint. The evaluator receives exactly the
/// slices of the latents it declared, in `depends_on` order; data enters by
/// closure capture at construction time.
pub struct LogJointFactor {
    pub id: String,
    pub depends_on: Vec<usize>,
    pub data_scope: Option<usize>,
    eval: Evaluator,
}

impl LogJointFactor {
    pub fn new(
        id: impl Into<String>,
        depends_on: Vec<usize>,
        data_scope: Option<usize>,
        eval: impl Fn(&[&[f64]]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        LogJointFactor {
            id: id.into(),
            depends_on,
            data_scope,
            eval: Box::new(eval),
        }
    }
}

impl std::fmt::Debug for LogJointFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogJointFactor")
            .field("id", &self.id)
            .field("depends_on", &self.depends_on)
            .field("data_scope", &self.data_scope)
            .finish()
    }
}

/// Classification of a factor for the hierarchical estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FactorScope {
    /// Depends only on global latents, no per-observation data.
    GlobalPrior,
    /// Tied to observation block `b`.
    Block(usize),
}

/// A full model: layout plus factorized log-joint.
pub struct ModelSpec {
    layout: LatentLayout,
    factors: Vec<LogJointFactor>,
    n_observations: usize,
    factors_by_latent: Vec<Vec<usize>>,
    scopes: Vec<FactorScope>,
}

impl ModelSpec {
    pub fn new(
        layout: LatentLayout,
        factors: Vec<LogJointFactor>,
        n_observations: usize,
    ) -> Result<Self> {
        let mut factors_by_latent = vec![Vec::new(); layout.len()];
        let mut scopes = Vec::with_capacity(factors.len());
        for (k, f) in factors.iter().enumerate() {
            let mut local_block = None;
            for &i in &f.depends_on {
                if i >= layout.len() {
                    return Err(Error::Config(format!(
                        "factor {} depends on unknown latent index {i}",
                        f.id
                    )));
                }
                factors_by_latent[i].push(k);
                if let Role::Local(b) = layout.entry(i).role {
                    match local_block {
                        None => local_block = Some(b),
                        Some(prev) if prev != b => {
                            return Err(Error::Config(format!(
                                "factor {} spans local blocks {prev} and {b}",
                                f.id
                            )));
                        }
                        _ => {}
                    }
                }
            }
            let scope = match (f.data_scope, local_block) {
                (None, None) => FactorScope::GlobalPrior,
                (Some(b), None) => FactorScope::Block(b),
                (None, Some(b)) => FactorScope::Block(b),
                (Some(ds), Some(b)) => {
                    if ds != b {
                        return Err(Error::Config(format!(
                            "factor {} has data scope {ds} but depends on block {b} locals",
                            f.id
                        )));
                    }
                    FactorScope::Block(b)
                }
            };
            if let FactorScope::Block(b) = scope {
                if b >= n_observations.max(1) {
                    return Err(Error::Config(format!(
                        "factor {} references block {b} but model has {n_observations} observations",
                        f.id
                    )));
                }
            }
            scopes.push(scope);
        }
        for (i, fs) in factors_by_latent.iter().enumerate() {
            if fs.is_empty() {
                return Err(Error::Config(format!(
                    "latent {} appears in no factor",
                    layout.entry(i).id
                )));
            }
        }
        Ok(ModelSpec {
            layout,
            factors,
            n_observations,
            factors_by_latent,
            scopes,
        })
    }

    pub fn layout(&self) -> &LatentLayout {
        &self.layout
    }

    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn factor(&self, k: usize) -> &LogJointFactor {
        &self.factors[k]
    }

    pub fn n_observations(&self) -> usize {
        self.n_observations
    }

    pub fn factor_scope(&self, k: usize) -> FactorScope {
        self.scopes[k]
    }

    /// Factor indices whose dependency set contains latent `i`.
    pub fn factors_of_latent(&self, i: usize) -> &[usize] {
        &self.factors_by_latent[i]
    }

    pub fn global_prior_factors(&self) -> Vec<usize> {
        (0..self.factors.len())
            .filter(|&k| self.scopes[k] == FactorScope::GlobalPrior)
            .collect()
    }

    pub fn block_factors(&self, b: usize) -> Vec<usize> {
        (0..self.factors.len())
            .filter(|&k| self.scopes[k] == FactorScope::Block(b))
            .collect()
    }

    fn in_support(&self, z: &[f64]) -> bool {
        (0..self.layout.len()).all(|i| {
            let support = self.layout.entry(i).support;
            self.layout.slice(z, i).iter().all(|&v| support.contains(v))
        })
    }

    /// Evaluate one factor at assignment `z`.
    pub fn eval_factor(&self, k: usize, z: &[f64]) -> f64 {
        let f = &self.factors[k];
        let slices: Vec<&[f64]> = f
            .depends_on
            .iter()
            .map(|&i| self.layout.slice(z, i))
            .collect();
        (f.eval)(&slices)
    }

    /// log p(x, z): sum of all factors in declaration order. Out-of-support
    /// assignments yield the `-inf` sentinel.
    pub fn log_joint(&self, z: &[f64]) -> Result<f64> {
        self.check_assignment(z)?;
        if !self.in_support(z) {
            return Ok(f64::NEG_INFINITY);
        }
        let mut total = 0.0;
        for k in 0..self.factors.len() {
            total += self.eval_factor(k, z);
        }
        Ok(total)
    }

    /// Sum of the factors in the Markov blanket of latent `i`:
    /// exactly those whose dependency set contains `i`.
    pub fn local_log_joint(&self, z: &[f64], i: usize) -> Result<f64> {
        self.check_assignment(z)?;
        if i >= self.layout.len() {
            return Err(Error::UnknownLatent(format!("index {i}")));
        }
        if !self.in_support(z) {
            return Ok(f64::NEG_INFINITY);
        }
        let mut total = 0.0;
        for &k in &self.factors_by_latent[i] {
            total += self.eval_factor(k, z);
        }
        Ok(total)
    }

    /// Latents sharing a factor with latent `i`, excluding `i` itself.
    pub fn markov_blanket(&self, i: usize) -> Result<BTreeSet<usize>> {
        if i >= self.layout.len() {
            return Err(Error::UnknownLatent(format!("index {i}")));
        }
        let mut blanket = BTreeSet::new();
        for &k in &self.factors_by_latent[i] {
            for &j in &self.factors[k].depends_on {
                if j != i {
                    blanket.insert(j);
                }
            }
        }
        Ok(blanket)
    }

    fn check_assignment(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.layout.total_dim() {
            return Err(Error::Mismatch(format!(
                "assignment has {} values, layout needs {}",
                z.len(),
                self.layout.total_dim()
            )));
        }
        Ok(())
    }

    /// Draw a prior-ish in-support assignment: standard normal for real
    /// latents, lognormal for positive ones.
    pub fn random_assignment<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut z = vec![0.0; self.layout.total_dim()];
        for i in 0..self.layout.len() {
            let support = self.layout.entry(i).support;
            for v in &mut z[self.layout.value_range(i)] {
                let e: f64 = StandardNormal.sample(rng);
                *v = match support {
                    Support::Real => e,
                    Support::Positive => (0.5 * e).exp(),
                };
            }
        }
        z
    }

    /// Fail-fast check: the log-joint must never be NaN at random in-support
    /// points.
    pub fn validate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<()> {
        for _ in 0..100 {
            let z = self.random_assignment(rng);
            let lj = self.log_joint(&z)?;
            if lj.is_nan() {
                return Err(Error::Validation(format!(
                    "log_joint is NaN at a random in-support point of model with {} factors",
                    self.factors.len()
                )));
            }
        }
        Ok(())
    }
}

impl std::fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelSpec")
            .field("latents", &self.layout.len())
            .field("factors", &self.factors.len())
            .field("n_observations", &self.n_observations)
            .finish()
    }
}
