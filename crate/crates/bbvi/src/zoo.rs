//! Longitudinal factor models over sparse per-visit lab panels, synthetic
//! data generation, a conjugate oracle model, and the held-out predictive
//! likelihood protocol.
//!
//! All four model variants share the structure: weights W (L x K), a
//! per-patient offset o_p (length L), per-visit factor states x_pv
//! (length K), and a per-lab likelihood with mean W x_pv + o_p. Variants
//! differ in the weight/offset prior support (normal vs gamma), whether the
//! states form a mean-preserving gamma chain over visits, and the
//! likelihood family.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma as GammaDist, StandardNormal};

use crate::families::{
    gamma_log_pdf, gammae_to_shape_rate, normal_log_pdf, FactorKind, MeanFieldFamily, Support,
};
use crate::model::{LatentEntry, LatentLayout, LogJointFactor, ModelSpec, Role};
use crate::optimize::{init_lambda, run_bbvi, RunConfig};
use crate::baseline::{run_chain, ChainConfig};
use crate::{Error, Result};

/// Floor for in-support log densities whose exact value underflows or
/// overflows in floating point; the true density is positive for any z in
/// support, so a finite (if astronomically negative) value keeps gradient
/// terms well defined.
const LOG_DENSITY_FLOOR: f64 = -1e18;

/// log density of GammaE(mean, variance): the gamma with that mean and
/// variance.
pub fn gammae_log_pdf(mean: f64, variance: f64, z: f64) -> f64 {
    if z <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let lp = match gammae_to_shape_rate(mean, variance) {
        Ok((shape, rate)) => gamma_log_pdf(shape, rate, z),
        Err(_) => return f64::NEG_INFINITY,
    };
    if lp.is_finite() {
        lp
    } else {
        LOG_DENSITY_FLOOR
    }
}

fn sample_gammae<R: Rng + ?Sized>(mean: f64, variance: f64, rng: &mut R) -> Result<f64> {
    let (shape, rate) = gammae_to_shape_rate(mean, variance)?;
    let dist = GammaDist::new(shape, 1.0 / rate)
        .map_err(|e| Error::InvalidParameter(format!("gamma sampler: {e}")))?;
    let v: f64 = dist.sample(rng);
    // The chain is a positive martingale and can drift toward zero; the
    // floor keeps mean^2 (the implied shape of the next transition) away
    // from underflow.
    Ok(v.max(1e-100))
}

// --------------------------------------------------------------------------
// Dataset

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
        }
    }
}

/// One patient: ordered visits, each a sparse lab-id -> value map.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub visits: Vec<BTreeMap<usize, f64>>,
}

impl PatientRecord {
    pub fn n_observations(&self) -> usize {
        self.visits.iter().map(|v| v.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LongitudinalDataset {
    pub patients: Vec<PatientRecord>,
    pub n_labs: usize,
    /// Parallel to `patients`.
    pub split: Vec<SplitTag>,
}

impl LongitudinalDataset {
    pub fn train_patients(&self) -> Vec<&PatientRecord> {
        self.tagged(SplitTag::Train)
    }

    pub fn test_patients(&self) -> Vec<&PatientRecord> {
        self.tagged(SplitTag::Test)
    }

    fn tagged(&self, tag: SplitTag) -> Vec<&PatientRecord> {
        self.patients
            .iter()
            .zip(&self.split)
            .filter(|(_, &t)| t == tag)
            .map(|(p, _)| p)
            .collect()
    }

    /// Tag the last `n_test` patients as the test set.
    pub fn assign_split(&mut self, n_test: usize) -> Result<()> {
        if n_test >= self.patients.len() {
            return Err(Error::Config(format!(
                "cannot hold out {n_test} of {} patients",
                self.patients.len()
            )));
        }
        let n_train = self.patients.len() - n_test;
        self.split = (0..self.patients.len())
            .map(|i| if i < n_train { SplitTag::Train } else { SplitTag::Test })
            .collect();
        Ok(())
    }

    /// Rows are `patient_id,visit_index,lab_id,value`, one per observation,
    /// after a header. Lines starting with `#` are comments.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "patient_id,visit_index,lab_id,value")?;
        for p in &self.patients {
            for (v, labs) in p.visits.iter().enumerate() {
                for (&lab, &value) in labs {
                    writeln!(out, "{},{},{},{}", p.id, v, lab, value)?;
                }
            }
        }
        Ok(())
    }

    pub fn write_split_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "patient_id,split")?;
        for (p, tag) in self.patients.iter().zip(&self.split) {
            writeln!(out, "{},{}", p.id, tag.as_str())?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut patients: Vec<PatientRecord> = Vec::new();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        let mut n_labs = 0usize;
        let parse_err = |line_no: usize, msg: &str| Error::Parse {
            path: path.display().to_string(),
            message: format!("line {line_no}: {msg}"),
        };
        for (line_no, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("patient_id") {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(parse_err(line_no + 1, "expected 4 fields"));
            }
            let visit: usize = fields[1]
                .parse()
                .map_err(|_| parse_err(line_no + 1, "bad visit_index"))?;
            let lab: usize = fields[2]
                .parse()
                .map_err(|_| parse_err(line_no + 1, "bad lab_id"))?;
            let value: f64 = fields[3]
                .parse()
                .map_err(|_| parse_err(line_no + 1, "bad value"))?;
            let pi = *index.entry(fields[0].to_string()).or_insert_with(|| {
                patients.push(PatientRecord {
                    id: fields[0].to_string(),
                    visits: Vec::new(),
                });
                patients.len() - 1
            });
            while patients[pi].visits.len() <= visit {
                patients[pi].visits.push(BTreeMap::new());
            }
            patients[pi].visits[visit].insert(lab, value);
            n_labs = n_labs.max(lab + 1);
        }
        let split = vec![SplitTag::Train; patients.len()];
        Ok(LongitudinalDataset {
            patients,
            n_labs,
            split,
        })
    }

    pub fn read_split_csv(&mut self, path: &Path) -> Result<()> {
        let file = std::fs::File::open(path)?;
        let mut tags: BTreeMap<String, SplitTag> = BTreeMap::new();
        for (line_no, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("patient_id") {
                continue;
            }
            let (id, tag) = line.split_once(',').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                message: format!("line {}: expected 2 fields", line_no + 1),
            })?;
            let tag = match tag {
                "train" => SplitTag::Train,
                "test" => SplitTag::Test,
                other => {
                    return Err(Error::Parse {
                        path: path.display().to_string(),
                        message: format!("line {}: unknown split '{other}'", line_no + 1),
                    })
                }
            };
            tags.insert(id.to_string(), tag);
        }
        for (p, slot) in self.patients.iter().zip(self.split.iter_mut()) {
            *slot = *tags.get(&p.id).ok_or_else(|| {
                Error::Validation(format!("patient {} missing from split manifest", p.id))
            })?;
        }
        Ok(())
    }
}

// --------------------------------------------------------------------------
// Model configuration

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightPrior {
    Normal,
    Gamma,
}

/// Hyperparameters and shape of one zoo model. Normal distributions take
/// sigma as a standard deviation; gamma distributions take sigma squared as
/// the variance of a mean-parameterized gamma.
#[derive(Clone, Debug)]
pub struct FactorModelConfig {
    pub n_labs: usize,
    pub n_factors: usize,
    pub n_patients: usize,
    pub n_visits: usize,
    pub weight_prior: WeightPrior,
    pub time_series: bool,
    /// Weight prior scale: Normal(0, sigma_w) or GammaE(1, sigma_w^2).
    pub sigma_w: f64,
    /// Normal models: offset prior std. Gamma models: likelihood scale
    /// (GammaE variance sigma_o^2); their offset prior is GammaE(1, 1).
    pub sigma_o: f64,
    /// Factor state scale: x ~ GammaE(previous or alpha0, sigma_x^2).
    pub sigma_x: f64,
    /// Normal-likelihood std (unused by gamma-likelihood models).
    pub sigma_l: f64,
    /// Initial state mean, applied per factor dimension.
    pub alpha0: f64,
}

pub const MODEL_NAMES: [&str; 4] = ["gamma", "gamma-ts", "gamma-normal", "gamma-normal-ts"];

impl FactorModelConfig {
    /// Desk-scale defaults: 25 patients, 5 visits, 5 labs, 2 factors.
    pub fn by_name(name: &str) -> Result<Self> {
        let base = FactorModelConfig {
            n_labs: 5,
            n_factors: 2,
            n_patients: 25,
            n_visits: 5,
            weight_prior: WeightPrior::Normal,
            time_series: false,
            sigma_w: 1.0,
            sigma_o: 1.0,
            sigma_x: 1.0,
            sigma_l: 0.01,
            alpha0: 1.0,
        };
        match name {
            "gamma-normal" => Ok(base),
            "gamma-normal-ts" => Ok(FactorModelConfig {
                time_series: true,
                ..base
            }),
            "gamma" => Ok(FactorModelConfig {
                weight_prior: WeightPrior::Gamma,
                sigma_o: 0.01,
                sigma_l: 1.0,
                ..base
            }),
            "gamma-ts" => Ok(FactorModelConfig {
                weight_prior: WeightPrior::Gamma,
                time_series: true,
                sigma_o: 0.01,
                sigma_l: 1.0,
                ..base
            }),
            other => Err(Error::Config(format!("unknown model '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_labs == 0 || self.n_factors == 0 || self.n_patients == 0 || self.n_visits == 0 {
            return Err(Error::Config("all model dimensions must be >= 1".into()));
        }
        if self.n_factors > self.n_labs {
            return Err(Error::Config(format!(
                "n_factors {} exceeds n_labs {}",
                self.n_factors, self.n_labs
            )));
        }
        for (name, v) in [
            ("sigma_w", self.sigma_w),
            ("sigma_o", self.sigma_o),
            ("sigma_x", self.sigma_x),
            ("sigma_l", self.sigma_l),
            ("alpha0", self.alpha0),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    fn weight_support(&self) -> Support {
        match self.weight_prior {
            WeightPrior::Normal => Support::Real,
            WeightPrior::Gamma => Support::Positive,
        }
    }

    /// log density of one observed lab value given the latents that feed it.
    pub fn obs_log_density(&self, w: &[f64], o: &[f64], x: &[f64], lab: usize, value: f64) -> f64 {
        let k = self.n_factors;
        let mut mean = o[lab];
        for j in 0..k {
            mean += w[lab * k + j] * x[j];
        }
        let lp = match self.weight_prior {
            WeightPrior::Normal => normal_log_pdf(mean, self.sigma_l, value),
            WeightPrior::Gamma => gammae_log_pdf(mean, self.sigma_o * self.sigma_o, value),
        };
        if lp.is_finite() {
            lp
        } else {
            LOG_DENSITY_FLOOR
        }
    }
}

// --------------------------------------------------------------------------
// Model construction

/// Mean of the factor-state prior at visit `v` (1-based) given the previous
/// state; non-chain models always anchor at alpha0.
fn state_prior_mean(config: &FactorModelConfig, v: usize, prev: Option<&[f64]>, j: usize) -> f64 {
    if config.time_series && v > 1 {
        prev.expect("chain state requires predecessor")[j]
    } else {
        config.alpha0
    }
}

/// Assemble the factorized log-joint for `patients` under `config`. The
/// latent order is W, then per patient (block b): offset, then one state per
/// visit. Only observed (visit, lab) cells enter the likelihood.
pub fn build_model(config: &FactorModelConfig, patients: &[PatientRecord]) -> Result<ModelSpec> {
    config.validate()?;
    if patients.is_empty() {
        return Err(Error::Config("build_model needs at least one patient".into()));
    }
    let (l, k) = (config.n_labs, config.n_factors);
    let mut entries = vec![LatentEntry {
        id: "W".into(),
        support: config.weight_support(),
        dim: l * k,
        role: Role::Global,
    }];
    for (b, p) in patients.iter().enumerate() {
        if p.visits.is_empty() {
            return Err(Error::Config(format!("patient {} has no visits", p.id)));
        }
        entries.push(LatentEntry {
            id: format!("o:{}", p.id),
            support: config.weight_support(),
            dim: l,
            role: Role::Local(b),
        });
        for v in 1..=p.visits.len() {
            entries.push(LatentEntry {
                id: format!("x:{}:{v}", p.id),
                support: Support::Positive,
                dim: k,
                role: Role::Local(b),
            });
        }
        for labs in &p.visits {
            if let Some((&lab, &value)) = labs.iter().next_back() {
                if lab >= l {
                    return Err(Error::Config(format!(
                        "patient {} observes lab {lab} but model has {l} labs",
                        p.id
                    )));
                }
                if config.weight_prior == WeightPrior::Gamma && value <= 0.0 {
                    return Err(Error::Config(format!(
                        "patient {} has non-positive value {value} under a gamma likelihood",
                        p.id
                    )));
                }
            }
        }
    }
    let layout = LatentLayout::new(entries)?;
    let mut factors = Vec::new();

    let cfg = config.clone();
    let w_prior = move |s: &[&[f64]]| -> f64 {
        s[0].iter()
            .map(|&w| match cfg.weight_prior {
                WeightPrior::Normal => normal_log_pdf(0.0, cfg.sigma_w, w),
                WeightPrior::Gamma => gammae_log_pdf(1.0, cfg.sigma_w * cfg.sigma_w, w),
            })
            .sum()
    };
    factors.push(LogJointFactor::new("prior:W", vec![0], None, w_prior));

    for (b, p) in patients.iter().enumerate() {
        let o_idx = layout.index_of(&format!("o:{}", p.id))?;
        let cfg = config.clone();
        factors.push(LogJointFactor::new(
            format!("prior:o:{}", p.id),
            vec![o_idx],
            None,
            move |s: &[&[f64]]| -> f64 {
                s[0].iter()
                    .map(|&o| match cfg.weight_prior {
                        WeightPrior::Normal => normal_log_pdf(0.0, cfg.sigma_o, o),
                        WeightPrior::Gamma => gammae_log_pdf(1.0, 1.0, o),
                    })
                    .sum()
            },
        ));
        for v in 1..=p.visits.len() {
            let x_idx = layout.index_of(&format!("x:{}:{v}", p.id))?;
            let chained = config.time_series && v > 1;
            let deps = if chained {
                vec![x_idx, layout.index_of(&format!("x:{}:{}", p.id, v - 1))?]
            } else {
                vec![x_idx]
            };
            let cfg = config.clone();
            factors.push(LogJointFactor::new(
                format!("prior:x:{}:{v}", p.id),
                deps,
                None,
                move |s: &[&[f64]]| -> f64 {
                    let var = cfg.sigma_x * cfg.sigma_x;
                    s[0].iter()
                        .enumerate()
                        .map(|(j, &x)| {
                            let mean = state_prior_mean(&cfg, v, s.get(1).copied(), j);
                            gammae_log_pdf(mean, var, x)
                        })
                        .sum()
                },
            ));
            let obs: Vec<(usize, f64)> = p.visits[v - 1]
                .iter()
                .map(|(&lab, &value)| (lab, value))
                .collect();
            if obs.is_empty() {
                continue;
            }
            let cfg = config.clone();
            factors.push(LogJointFactor::new(
                format!("lik:{}:{v}", p.id),
                vec![0, o_idx, x_idx],
                Some(b),
                move |s: &[&[f64]]| -> f64 {
                    obs.iter()
                        .map(|&(lab, value)| cfg.obs_log_density(s[0], s[1], s[2], lab, value))
                        .sum()
                },
            ));
        }
    }
    ModelSpec::new(layout, factors, patients.len())
}

/// Mean-field family matched to a model's supports: Gaussian factors for
/// real latents, shape-rate gamma factors for positive ones.
pub fn default_family(model: &ModelSpec) -> MeanFieldFamily {
    let kinds = (0..model.layout().len())
        .map(|i| {
            let e = model.layout().entry(i);
            match e.support {
                Support::Real => FactorKind::GaussianMeanLogStd { dim: e.dim },
                Support::Positive => FactorKind::GammaShapeRate { dim: e.dim },
            }
        })
        .collect();
    MeanFieldFamily::new(kinds)
}

/// Generic random init with each patient offset started at its per-lab
/// sample mean. Lab values often sit far from the origin; starting the
/// offsets at zero makes the early gradients pure offset travel, and an
/// adaptive schedule then mistakes that travel for curvature on the weight
/// and state coordinates, freezing them before the structure is visible.
pub fn init_factor_lambda<R: Rng + ?Sized>(
    config: &FactorModelConfig,
    family: &MeanFieldFamily,
    patients: &[PatientRecord],
    rng: &mut R,
) -> Vec<f64> {
    let mut lambda = init_lambda(family, rng);
    let l = config.n_labs;
    let mut idx = 1usize;
    for p in patients {
        let mut sum = vec![0.0; l];
        let mut count = vec![0usize; l];
        let (mut all_sum, mut all_count) = (0.0, 0usize);
        for visit in &p.visits {
            for (&lab, &value) in visit {
                sum[lab] += value;
                count[lab] += 1;
                all_sum += value;
                all_count += 1;
            }
        }
        let fallback = if all_count > 0 {
            all_sum / all_count as f64
        } else {
            1.0
        };
        let params = &mut lambda[family.param_range(idx)];
        for lab in 0..l {
            let m = if count[lab] > 0 {
                sum[lab] / count[lab] as f64
            } else {
                fallback
            };
            match config.weight_prior {
                WeightPrior::Normal => params[lab] = m,
                WeightPrior::Gamma => {
                    // Shape 25 gives a 20% relative spread around the mean.
                    let m = m.max(1e-3);
                    params[lab] = 25.0f64.ln();
                    params[l + lab] = (25.0 / m).ln();
                }
            }
        }
        idx += 1 + p.visits.len();
    }
    lambda
}

// --------------------------------------------------------------------------
// Synthetic data

/// Forward-sample the generative process. Returns the dataset (all patients
/// tagged train; retag with `assign_split`) and the true latent assignment
/// in the layout order of `build_model(config, &dataset.patients)`.
pub fn generate_synthetic(
    config: &FactorModelConfig,
    sparsity: f64,
    seed: u64,
) -> Result<(LongitudinalDataset, Vec<f64>)> {
    config.validate()?;
    if !(sparsity > 0.0 && sparsity <= 1.0) {
        return Err(Error::Config(format!(
            "sparsity must be in (0, 1], got {sparsity}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l, k) = (config.n_labs, config.n_factors);
    let var_x = config.sigma_x * config.sigma_x;

    let draw_weightlike = |sigma: f64, rng: &mut ChaCha8Rng| -> Result<f64> {
        match config.weight_prior {
            WeightPrior::Normal => {
                let e: f64 = StandardNormal.sample(rng);
                Ok(sigma * e)
            }
            WeightPrior::Gamma => sample_gammae(1.0, sigma * sigma, rng),
        }
    };

    let mut truth = Vec::new();
    let w: Vec<f64> = (0..l * k)
        .map(|_| draw_weightlike(config.sigma_w, &mut rng))
        .collect::<Result<_>>()?;
    truth.extend_from_slice(&w);

    let mut patients = Vec::with_capacity(config.n_patients);
    for p in 0..config.n_patients {
        let o_sigma = match config.weight_prior {
            WeightPrior::Normal => config.sigma_o,
            WeightPrior::Gamma => 1.0,
        };
        let o: Vec<f64> = (0..l)
            .map(|_| draw_weightlike(o_sigma, &mut rng))
            .collect::<Result<_>>()?;
        truth.extend_from_slice(&o);
        let mut visits = Vec::with_capacity(config.n_visits);
        let mut prev: Option<Vec<f64>> = None;
        for v in 1..=config.n_visits {
            let x: Vec<f64> = (0..k)
                .map(|j| {
                    let mean = state_prior_mean(config, v, prev.as_deref(), j);
                    sample_gammae(mean, var_x, &mut rng)
                })
                .collect::<Result<_>>()?;
            truth.extend_from_slice(&x);
            let mut labs = BTreeMap::new();
            // Keep at least one lab per visit so the CSV form (one row per
            // observation) can represent every visit.
            let keep: Vec<bool> = (0..l).map(|_| rng.random::<f64>() < sparsity).collect();
            let forced = if keep.iter().any(|&b| b) {
                usize::MAX
            } else {
                rng.random_range(0..l)
            };
            for lab in 0..l {
                if !keep[lab] && lab != forced {
                    continue;
                }
                let mut mean = o[lab];
                for j in 0..k {
                    mean += w[lab * k + j] * x[j];
                }
                let value = match config.weight_prior {
                    WeightPrior::Normal => {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        mean + config.sigma_l * e
                    }
                    WeightPrior::Gamma => {
                        sample_gammae(mean, config.sigma_o * config.sigma_o, &mut rng)?
                    }
                };
                labs.insert(lab, value);
            }
            visits.push(labs);
            prev = Some(x);
        }
        patients.push(PatientRecord {
            id: format!("p{p:03}"),
            visits,
        });
    }
    let split = vec![SplitTag::Train; patients.len()];
    Ok((
        LongitudinalDataset {
            patients,
            n_labs: l,
            split,
        },
        truth,
    ))
}

// --------------------------------------------------------------------------
// Conjugate oracle

/// Normal prior, normal likelihood with known variance, and the exact
/// posterior that coordinate updates would reach in closed form.
pub struct ConjugateOracle {
    pub model: ModelSpec,
    pub posterior_mean: f64,
    pub posterior_var: f64,
}

pub fn build_conjugate_oracle(
    prior_mean: f64,
    prior_var: f64,
    lik_var: f64,
    observations: Vec<f64>,
) -> Result<ConjugateOracle> {
    if !(prior_var > 0.0) || !(lik_var > 0.0) {
        return Err(Error::Config("variances must be positive".into()));
    }
    let n = observations.len();
    let posterior_var = 1.0 / (1.0 / prior_var + n as f64 / lik_var);
    let posterior_mean =
        posterior_var * (prior_mean / prior_var + observations.iter().sum::<f64>() / lik_var);
    let layout = LatentLayout::new(vec![LatentEntry {
        id: "z".into(),
        support: Support::Real,
        dim: 1,
        role: Role::Global,
    }])?;
    let prior_sd = prior_var.sqrt();
    let mut factors = vec![LogJointFactor::new("prior:z", vec![0], None, move |s: &[&[f64]]| {
        normal_log_pdf(prior_mean, prior_sd, s[0][0])
    })];
    let lik_sd = lik_var.sqrt();
    for (i, &x) in observations.iter().enumerate() {
        factors.push(LogJointFactor::new(
            format!("lik:{i}"),
            vec![0],
            Some(i),
            move |s: &[&[f64]]| normal_log_pdf(s[0][0], lik_sd, x),
        ));
    }
    let model = ModelSpec::new(layout, factors, n)?;
    Ok(ConjugateOracle {
        model,
        posterior_mean,
        posterior_var,
    })
}

// --------------------------------------------------------------------------
// Predictive likelihood

#[derive(Clone, Copy, Debug)]
pub struct PredictiveProtocol {
    /// Fraction of each test patient's observations used to fit local
    /// posteriors; the rest are scored.
    pub fit_fraction: f64,
    /// Monte Carlo draws for the predictive integral.
    pub m_samples: usize,
    pub seed: u64,
}

impl PredictiveProtocol {
    pub fn new(seed: u64) -> Self {
        PredictiveProtocol {
            fit_fraction: 0.75,
            m_samples: 200,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fit_fraction > 0.0 && self.fit_fraction < 1.0) {
            return Err(Error::Config(format!(
                "fit_fraction must be in (0, 1), got {}",
                self.fit_fraction
            )));
        }
        if self.m_samples == 0 {
            return Err(Error::Config("m_samples must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PatientScore {
    pub patient_id: String,
    pub n_eval: usize,
    pub avg_log_likelihood: f64,
}

#[derive(Clone, Debug)]
pub struct PredictiveReport {
    pub per_patient: Vec<PatientScore>,
    /// Observation-weighted mean over all scored cells.
    pub aggregate: f64,
    pub total_eval: usize,
}

pub fn log_mean_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + (sum / xs.len() as f64).ln()
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn patient_seed(protocol_seed: u64, patient_id: &str, stream: u64) -> u64 {
    protocol_seed
        ^ fnv1a(patient_id)
        ^ stream.wrapping_mul(0x9e3779b97f4a7c15)
}

/// Deterministic per-patient split of (visit, lab) observations. Seeding
/// depends only on the patient id, so results do not depend on test-set
/// order. Guarantees a nonempty eval side when the patient has >= 2
/// observations.
pub fn split_observations(
    record: &PatientRecord,
    fit_fraction: f64,
    seed: u64,
) -> (Vec<(usize, usize, f64)>, Vec<(usize, usize, f64)>) {
    let mut obs: Vec<(usize, usize, f64)> = Vec::new();
    for (v, labs) in record.visits.iter().enumerate() {
        for (&lab, &value) in labs {
            obs.push((v, lab, value));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(patient_seed(seed, &record.id, 1));
    // Fisher-Yates on the (visit, lab)-ordered list.
    for i in (1..obs.len()).rev() {
        let j = rng.random_range(0..=i);
        obs.swap(i, j);
    }
    let n = obs.len();
    let n_fit = ((fit_fraction * n as f64).round() as usize).min(n.saturating_sub(1));
    let eval = obs.split_off(n_fit);
    (obs, eval)
}

fn record_with_obs(record: &PatientRecord, obs: &[(usize, usize, f64)]) -> PatientRecord {
    let mut visits = vec![BTreeMap::new(); record.visits.len()];
    for &(v, lab, value) in obs {
        visits[v].insert(lab, value);
    }
    PatientRecord {
        id: record.id.clone(),
        visits,
    }
}

/// Score `eval` cells for one patient by averaging the likelihood over
/// latent draws; each draw is a full assignment for the single-patient
/// model.
fn score_eval_cells(
    config: &FactorModelConfig,
    model: &ModelSpec,
    draws: &[Vec<f64>],
    eval: &[(usize, usize, f64)],
) -> Result<f64> {
    let layout = model.layout();
    let w_range = layout.value_range(0);
    let o_range = layout.value_range(1);
    let mut total = 0.0;
    for &(v, lab, value) in eval {
        let x_idx = 2 + v;
        let x_range = layout.value_range(x_idx);
        let terms: Vec<f64> = draws
            .iter()
            .map(|z| {
                config.obs_log_density(
                    &z[w_range.clone()],
                    &z[o_range.clone()],
                    &z[x_range.clone()],
                    lab,
                    value,
                )
            })
            .collect();
        total += log_mean_exp(&terms);
    }
    Ok(total)
}

/// Build the single-patient model on the fit cells. The fit record and the
/// eval split are returned alongside; errors if the eval split is empty.
fn prepare_patient(
    config: &FactorModelConfig,
    record: &PatientRecord,
    protocol: &PredictiveProtocol,
) -> Result<(ModelSpec, PatientRecord, Vec<(usize, usize, f64)>)> {
    let (fit, eval) = split_observations(record, protocol.fit_fraction, protocol.seed);
    if eval.is_empty() {
        return Err(Error::Validation(format!(
            "patient {} has no observations to score",
            record.id
        )));
    }
    let fit_record = record_with_obs(record, &fit);
    let model = build_model(config, std::slice::from_ref(&fit_record))?;
    Ok((model, fit_record, eval))
}

fn assemble_report(per_patient: Vec<PatientScore>, totals: (f64, usize)) -> PredictiveReport {
    let (sum, total_eval) = totals;
    PredictiveReport {
        per_patient,
        aggregate: sum / total_eval as f64,
        total_eval,
    }
}

/// Held-out predictive likelihood under a fitted variational posterior.
/// `w_lambda` is the fitted parameter vector for the weight factor; it is
/// held frozen while each test patient's local latents are fitted on their
/// fit-fraction cells, then `m_samples` draws from the fitted family score
/// the eval cells.
pub fn predictive_likelihood(
    config: &FactorModelConfig,
    w_lambda: &[f64],
    test: &[PatientRecord],
    protocol: &PredictiveProtocol,
    local_run: &RunConfig,
) -> Result<PredictiveReport> {
    protocol.validate()?;
    if test.is_empty() {
        return Err(Error::Validation("empty test set".into()));
    }
    let mut per_patient = Vec::with_capacity(test.len());
    let mut sum = 0.0;
    let mut total_eval = 0usize;
    for record in test {
        let (model, fit_record, eval) = prepare_patient(config, record, protocol)?;
        let family = default_family(&model);
        let w_params = family.param_range(0);
        if w_params.len() != w_lambda.len() {
            return Err(Error::Mismatch(format!(
                "weight parameter vector has length {}, expected {}",
                w_lambda.len(),
                w_params.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(patient_seed(protocol.seed, &record.id, 2));
        let mut lambda0 =
            init_factor_lambda(config, &family, std::slice::from_ref(&fit_record), &mut rng);
        lambda0[w_params.clone()].copy_from_slice(w_lambda);
        let mut frozen = vec![false; family.n_params()];
        for f in frozen[w_params].iter_mut() {
            *f = true;
        }
        let mut run = local_run.clone();
        run.seed = patient_seed(protocol.seed, &record.id, 3);
        run.frozen = Some(frozen);
        let (lambda, _) = run_bbvi(&model, &family, &lambda0, &run)?;
        let mut draw_rng = ChaCha8Rng::seed_from_u64(patient_seed(protocol.seed, &record.id, 4));
        let draws: Vec<Vec<f64>> = (0..protocol.m_samples)
            .map(|_| family.sample(&lambda, &mut draw_rng))
            .collect::<Result<_>>()?;
        let patient_sum = score_eval_cells(config, &model, &draws, &eval)?;
        sum += patient_sum;
        total_eval += eval.len();
        per_patient.push(PatientScore {
            patient_id: record.id.clone(),
            n_eval: eval.len(),
            avg_log_likelihood: patient_sum / eval.len() as f64,
        });
    }
    Ok(assemble_report(per_patient, (sum, total_eval)))
}

/// Predictive likelihood from a sampler baseline: per test patient, a
/// Metropolis-within-Gibbs chain over the local latents with the weights
/// pinned at `w_hat` (a posterior point estimate from the training chain);
/// thinned post-burn-in states replace the variational draws.
pub fn predictive_likelihood_mcmc(
    config: &FactorModelConfig,
    w_hat: &[f64],
    test: &[PatientRecord],
    protocol: &PredictiveProtocol,
    chain: &ChainConfig,
) -> Result<PredictiveReport> {
    protocol.validate()?;
    if test.is_empty() {
        return Err(Error::Validation("empty test set".into()));
    }
    if w_hat.len() != config.n_labs * config.n_factors {
        return Err(Error::Mismatch(format!(
            "weight point estimate has length {}, expected {}",
            w_hat.len(),
            config.n_labs * config.n_factors
        )));
    }
    let mut per_patient = Vec::with_capacity(test.len());
    let mut sum = 0.0;
    let mut total_eval = 0usize;
    for record in test {
        let (model, _, eval) = prepare_patient(config, record, protocol)?;
        let mut rng = ChaCha8Rng::seed_from_u64(patient_seed(protocol.seed, &record.id, 5));
        let mut z0 = model.random_assignment(&mut rng);
        z0[model.layout().value_range(0)].copy_from_slice(w_hat);
        let mut frozen = vec![false; model.layout().len()];
        frozen[0] = true;
        let mut cc = chain.clone();
        cc.seed = patient_seed(protocol.seed, &record.id, 6);
        cc.frozen = Some(frozen);
        let out = run_chain(&model, &z0, &cc)?;
        // Thin the stored states down to m_samples, evenly spaced.
        let n = out.samples.len();
        let take = protocol.m_samples.min(n);
        let draws: Vec<Vec<f64>> = (0..take)
            .map(|i| out.samples[i * n / take].clone())
            .collect();
        let patient_sum = score_eval_cells(config, &model, &draws, &eval)?;
        sum += patient_sum;
        total_eval += eval.len();
        per_patient.push(PatientScore {
            patient_id: record.id.clone(),
            n_eval: eval.len(),
            avg_log_likelihood: patient_sum / eval.len() as f64,
        });
    }
    Ok(assemble_report(per_patient, (sum, total_eval)))
}
