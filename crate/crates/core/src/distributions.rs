//! Exponential-family response kernels: negative log-likelihoods, their
//! derivatives on the link scale and with respect to log-dispersion, the
//! zero-inflated negative binomial mixture and Poisson deviance.
//!
//! The negative binomial is the NB2 form, `Var = m + m²/θ`, with θ the
//! inverse dispersion. Normal dispersion is the variance.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

/// Link-scale predictors are clamped to this range before exponentiation.
pub const ETA_CLAMP: f64 = 30.0;
/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    Bernoulli,
    Poisson,
    NegativeBinomial,
    ZeroInflatedNb,
    Normal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Logit,
    Log,
    Identity,
}

impl FamilyKind {
    pub fn link(self) -> Link {
        match self {
            FamilyKind::Bernoulli => Link::Logit,
            FamilyKind::Poisson | FamilyKind::NegativeBinomial | FamilyKind::ZeroInflatedNb => {
                Link::Log
            }
            FamilyKind::Normal => Link::Identity,
        }
    }

    pub fn has_dispersion(self) -> bool {
        matches!(
            self,
            FamilyKind::NegativeBinomial | FamilyKind::ZeroInflatedNb | FamilyKind::Normal
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::Bernoulli => "bernoulli",
            FamilyKind::Poisson => "poisson",
            FamilyKind::NegativeBinomial => "negative_binomial",
            FamilyKind::ZeroInflatedNb => "zero_inflated_nb",
            FamilyKind::Normal => "normal",
        }
    }

    /// Inverse link applied to a clamped predictor.
    pub fn inverse_link(self, eta: f64) -> f64 {
        let eta = clamp_eta(eta);
        match self.link() {
            Link::Logit => sigmoid(eta),
            Link::Log => eta.exp(),
            Link::Identity => eta,
        }
    }
}

impl std::str::FromStr for FamilyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "bernoulli" => FamilyKind::Bernoulli,
            "poisson" => FamilyKind::Poisson,
            "negative_binomial" | "nb" => FamilyKind::NegativeBinomial,
            "zero_inflated_nb" | "zinb" => FamilyKind::ZeroInflatedNb,
            "normal" | "gaussian" => FamilyKind::Normal,
            _ => return Err(Error::Invalid(format!("unknown family {s:?}"))),
        })
    }
}

/// A response family with optional per-species dispersion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseFamily {
    pub kind: FamilyKind,
    pub dispersion: Option<Vec<f64>>,
}

impl ResponseFamily {
    pub fn new(kind: FamilyKind, m: usize) -> Self {
        ResponseFamily {
            kind,
            dispersion: kind.has_dispersion().then(|| vec![1.0; m]),
        }
    }

    pub fn link(&self) -> Link {
        self.kind.link()
    }

    pub fn dispersion_of(&self, species: usize) -> Option<f64> {
        self.dispersion.as_ref().map(|d| d[species])
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.dispersion, self.kind.has_dispersion()) {
            (Some(d), true) => {
                if let Some(v) = d.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                    return Err(Error::Invalid(format!("dispersion {v} must be positive")));
                }
                Ok(())
            }
            (None, false) => Ok(()),
            (Some(_), false) => Err(Error::Invalid(format!(
                "family {} takes no dispersion",
                self.kind.name()
            ))),
            (None, true) => Err(Error::Invalid(format!(
                "family {} requires a dispersion per species",
                self.kind.name()
            ))),
        }
    }
}

pub fn clamp_eta(eta: f64) -> f64 {
    eta.clamp(-ETA_CLAMP, ETA_CLAMP)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn need_dispersion(kind: FamilyKind, d: Option<f64>) -> Result<f64> {
    match d {
        Some(v) if v > 0.0 && v.is_finite() => Ok(v),
        Some(v) => Err(Error::Domain(format!("dispersion {v} must be positive"))),
        None => Err(Error::Domain(format!("{} needs a dispersion", kind.name()))),
    }
}

/// NB2 negative log-likelihood.
pub fn nb_nll(y: f64, mean: f64, theta: f64) -> f64 {
    -(ln_gamma(y + theta) - ln_gamma(theta) - ln_gamma(y + 1.0)
        + theta * (theta / (theta + mean)).ln()
        + if y > 0.0 { y * (mean / (theta + mean)).ln() } else { 0.0 })
}

/// `−log P(y | mean, dispersion)`.
pub fn nll(kind: FamilyKind, y: f64, mean: f64, dispersion: Option<f64>) -> Result<f64> {
    if !mean.is_finite() {
        return Err(Error::Domain(format!("mean {mean} is not finite")));
    }
    match kind {
        FamilyKind::Bernoulli => {
            if !(mean > 0.0 && mean < 1.0) {
                return Err(Error::Domain(format!("Bernoulli mean {mean} outside (0, 1)")));
            }
            if y != 0.0 && y != 1.0 {
                return Err(Error::Domain(format!("Bernoulli outcome {y}")));
            }
            let m = mean.clamp(PROB_EPS, 1.0 - PROB_EPS);
            Ok(if y == 1.0 { -m.ln() } else { -(1.0 - m).ln() })
        }
        FamilyKind::Poisson => {
            check_count(y)?;
            if mean <= 0.0 {
                return Err(Error::Domain(format!("Poisson mean {mean} must be positive")));
            }
            Ok(mean - y * mean.ln() + ln_gamma(y + 1.0))
        }
        FamilyKind::NegativeBinomial | FamilyKind::ZeroInflatedNb => {
            check_count(y)?;
            if mean <= 0.0 {
                return Err(Error::Domain(format!("NB mean {mean} must be positive")));
            }
            let theta = need_dispersion(kind, dispersion)?;
            Ok(nb_nll(y, mean, theta))
        }
        FamilyKind::Normal => {
            let var = need_dispersion(kind, dispersion)?;
            Ok(0.5 * (2.0 * std::f64::consts::PI * var).ln() + (y - mean).powi(2) / (2.0 * var))
        }
    }
}

fn check_count(y: f64) -> Result<()> {
    if y < 0.0 || y.fract() != 0.0 {
        return Err(Error::Domain(format!("count outcome {y}")));
    }
    Ok(())
}

/// Negative log-likelihood as a function of the (clamped) link-scale
/// predictor. Infallible for valid outcomes; used on the training path.
pub fn nll_eta(kind: FamilyKind, y: f64, eta: f64, dispersion: Option<f64>) -> f64 {
    let eta = clamp_eta(eta);
    match kind {
        FamilyKind::Bernoulli => softplus(eta) - y * eta,
        FamilyKind::Poisson => eta.exp() - y * eta + ln_gamma(y + 1.0),
        FamilyKind::NegativeBinomial | FamilyKind::ZeroInflatedNb => {
            nb_nll(y, eta.exp(), dispersion.unwrap_or(1.0))
        }
        FamilyKind::Normal => {
            let var = dispersion.unwrap_or(1.0);
            0.5 * (2.0 * std::f64::consts::PI * var).ln() + (y - eta).powi(2) / (2.0 * var)
        }
    }
}

/// `d nll / d eta` in closed form.
pub fn nll_gradient(kind: FamilyKind, y: f64, eta: f64, dispersion: Option<f64>) -> f64 {
    if eta.abs() > ETA_CLAMP {
        return 0.0;
    }
    match kind {
        FamilyKind::Bernoulli => sigmoid(eta) - y,
        FamilyKind::Poisson => eta.exp() - y,
        FamilyKind::NegativeBinomial | FamilyKind::ZeroInflatedNb => {
            let theta = dispersion.unwrap_or(1.0);
            let m = eta.exp();
            (theta + y) * m / (theta + m) - y
        }
        FamilyKind::Normal => (eta - y) / dispersion.unwrap_or(1.0),
    }
}

/// `d nll / d ln(dispersion)`; zero for families without dispersion.
pub fn dispersion_gradient(kind: FamilyKind, y: f64, eta: f64, dispersion: Option<f64>) -> f64 {
    let eta = clamp_eta(eta);
    match kind {
        FamilyKind::Bernoulli | FamilyKind::Poisson => 0.0,
        FamilyKind::NegativeBinomial | FamilyKind::ZeroInflatedNb => {
            let theta = dispersion.unwrap_or(1.0);
            let m = eta.exp();
            -theta
                * (digamma(y + theta) - digamma(theta) + (theta / (theta + m)).ln() + 1.0
                    - (theta + y) / (theta + m))
        }
        FamilyKind::Normal => {
            let var = dispersion.unwrap_or(1.0);
            0.5 - (y - eta).powi(2) / (2.0 * var)
        }
    }
}

/// Zero-inflated NB: `−log[(1 − p)·1{y = 0} + p·NB(y | mean, θ)]`.
pub fn zinb_nll(p_present: f64, nb_mean: f64, theta: f64, y: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_present) {
        return Err(Error::Domain(format!("occupancy probability {p_present}")));
    }
    check_count(y)?;
    if nb_mean <= 0.0 || !nb_mean.is_finite() {
        return Err(Error::Domain(format!("NB mean {nb_mean} must be positive")));
    }
    if theta <= 0.0 {
        return Err(Error::Domain(format!("NB theta {theta} must be positive")));
    }
    let log_nb = -nb_nll(y, nb_mean, theta);
    if y > 0.0 {
        if p_present == 0.0 {
            return Ok(f64::INFINITY);
        }
        Ok(-(p_present.ln() + log_nb))
    } else {
        Ok(-((1.0 - p_present) + p_present * log_nb.exp()).ln())
    }
}

/// `2 Σ [y ln(y/μ) − (y − μ)]`, the `y = 0` term being `2μ`.
pub fn poisson_deviance(y: &[f64], mu: &[f64]) -> Result<f64> {
    if y.len() != mu.len() {
        return Err(Error::Dimension(format!(
            "{} outcomes for {} means",
            y.len(),
            mu.len()
        )));
    }
    let mut dev = 0.0;
    for (&yi, &mi) in y.iter().zip(mu) {
        if mi <= 0.0 || !mi.is_finite() {
            return Err(Error::Domain(format!("Poisson mean {mi} must be positive")));
        }
        dev += if yi > 0.0 {
            yi * (yi / mi).ln() - (yi - mi)
        } else {
            mi
        };
    }
    Ok(2.0 * dev)
}
