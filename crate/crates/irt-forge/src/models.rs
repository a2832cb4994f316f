//! Item characteristic curves and response likelihoods for the four model kinds.
//!
//! 1PL:  p = sigmoid(theta - b)
//! 2PL:  p = sigmoid(a (theta - b))
//! 3PL:  p = c + (1 - c) sigmoid(a (theta - b))
//! 4PL:  p = lambda sigmoid(a (theta - b))   (feasibility upper asymptote)
//!
//! Log-probabilities for 1PL/2PL stay in logit space (never forming p), so they
//! are exact in the far tails. 3PL/4PL probabilities are clamped to
//! [1e-12, 1 - 1e-12] before the log.

use crate::dataset::ResponsePatternDataset;
use crate::error::Error;
use crate::math::{log_sigmoid, sigmoid};
use crate::Result;

/// Probability clamp for the bounded-asymptote kinds.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    OneParam,
    TwoParam,
    ThreeParam,
    FourParam,
}

impl ModelKind {
    /// Canonical lowercase name, also the built-in registry key.
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::OneParam => "1pl",
            ModelKind::TwoParam => "2pl",
            ModelKind::ThreeParam => "3pl",
            ModelKind::FourParam => "4pl",
        }
    }

    pub fn uses_discrimination(self) -> bool {
        !matches!(self, ModelKind::OneParam)
    }

    pub fn uses_guessing(self) -> bool {
        matches!(self, ModelKind::ThreeParam)
    }

    pub fn uses_feasibility(self) -> bool {
        matches!(self, ModelKind::FourParam)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1pl" => Ok(ModelKind::OneParam),
            "2pl" => Ok(ModelKind::TwoParam),
            "3pl" => Ok(ModelKind::ThreeParam),
            "4pl" => Ok(ModelKind::FourParam),
            other => Err(Error::Format(format!("unknown model kind '{other}'"))),
        }
    }
}

/// One item's curve parameters, validated at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItemCurve {
    kind: ModelKind,
    a: f64,
    b: f64,
    c: f64,
    lambda: f64,
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be finite, got {v}")))
    }
}

fn check_discrimination(a: f64) -> Result<()> {
    check_finite("discrimination", a)?;
    if a <= 0.0 {
        return Err(Error::Domain(format!("discrimination must be > 0, got {a}")));
    }
    Ok(())
}

impl ItemCurve {
    pub fn one_param(b: f64) -> Result<Self> {
        check_finite("difficulty", b)?;
        Ok(ItemCurve { kind: ModelKind::OneParam, a: 1.0, b, c: 0.0, lambda: 1.0 })
    }

    pub fn two_param(a: f64, b: f64) -> Result<Self> {
        check_discrimination(a)?;
        check_finite("difficulty", b)?;
        Ok(ItemCurve { kind: ModelKind::TwoParam, a, b, c: 0.0, lambda: 1.0 })
    }

    pub fn three_param(a: f64, b: f64, c: f64) -> Result<Self> {
        check_discrimination(a)?;
        check_finite("difficulty", b)?;
        check_finite("guessing", c)?;
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Domain(format!("guessing must lie in [0, 1], got {c}")));
        }
        Ok(ItemCurve { kind: ModelKind::ThreeParam, a, b, c, lambda: 1.0 })
    }

    pub fn four_param(a: f64, b: f64, lambda: f64) -> Result<Self> {
        check_discrimination(a)?;
        check_finite("difficulty", b)?;
        check_finite("feasibility", lambda)?;
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(Error::Domain(format!("feasibility must lie in (0, 1], got {lambda}")));
        }
        Ok(ItemCurve { kind: ModelKind::FourParam, a, b, lambda, c: 0.0 })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn discrimination(&self) -> f64 {
        self.a
    }

    pub fn difficulty(&self) -> f64 {
        self.b
    }

    pub fn guessing(&self) -> f64 {
        self.c
    }

    pub fn feasibility(&self) -> f64 {
        self.lambda
    }

    /// P(correct | theta). Assumes finite theta.
    #[inline]
    pub fn prob(&self, theta: f64) -> f64 {
        let s = sigmoid(self.a * (theta - self.b));
        match self.kind {
            ModelKind::OneParam | ModelKind::TwoParam => s,
            ModelKind::ThreeParam => self.c + (1.0 - self.c) * s,
            ModelKind::FourParam => self.lambda * s,
        }
    }

    /// ln P(y | theta) for y in {0, 1}. Finite for every finite theta.
    #[inline]
    pub fn log_prob(&self, y: u8, theta: f64) -> f64 {
        let x = self.a * (theta - self.b);
        match self.kind {
            ModelKind::OneParam | ModelKind::TwoParam => {
                if y == 1 {
                    log_sigmoid(x)
                } else {
                    log_sigmoid(-x)
                }
            }
            ModelKind::ThreeParam => {
                if y == 1 {
                    let p = self.c + (1.0 - self.c) * sigmoid(x);
                    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR).ln()
                } else {
                    let q = (1.0 - self.c) * sigmoid(-x);
                    q.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR).ln()
                }
            }
            ModelKind::FourParam => {
                if y == 1 {
                    let p = self.lambda * sigmoid(x);
                    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR).ln()
                } else {
                    // 1 - lambda s without cancellation
                    let q = (1.0 - self.lambda) + self.lambda * sigmoid(-x);
                    q.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR).ln()
                }
            }
        }
    }
}

fn checked_theta(theta: f64) -> Result<()> {
    check_finite("theta", theta)
}

/// Rasch probability of a correct response.
pub fn icc_1pl(theta: f64, b: f64) -> Result<f64> {
    checked_theta(theta)?;
    Ok(ItemCurve::one_param(b)?.prob(theta))
}

pub fn icc_2pl(theta: f64, a: f64, b: f64) -> Result<f64> {
    checked_theta(theta)?;
    Ok(ItemCurve::two_param(a, b)?.prob(theta))
}

pub fn icc_3pl(theta: f64, a: f64, b: f64, c: f64) -> Result<f64> {
    checked_theta(theta)?;
    Ok(ItemCurve::three_param(a, b, c)?.prob(theta))
}

pub fn icc_4pl(theta: f64, a: f64, b: f64, lambda: f64) -> Result<f64> {
    checked_theta(theta)?;
    Ok(ItemCurve::four_param(a, b, lambda)?.prob(theta))
}

/// ln P(y | theta) after validating every input.
pub fn bernoulli_log_prob(y: u8, theta: f64, curve: &ItemCurve) -> Result<f64> {
    if y > 1 {
        return Err(Error::Domain(format!("response must be 0 or 1, got {y}")));
    }
    checked_theta(theta)?;
    Ok(curve.log_prob(y, theta))
}

/// Full per-item parameter vectors for one fitted (or simulated) model.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemParams {
    kind: ModelKind,
    difficulty: Vec<f64>,
    discrimination: Option<Vec<f64>>,
    guessing: Option<Vec<f64>>,
    feasibility: Option<Vec<f64>>,
}

fn check_all<F>(name: &str, xs: &[f64], ok: F) -> Result<()>
where
    F: Fn(f64) -> bool,
{
    for (i, &v) in xs.iter().enumerate() {
        if !v.is_finite() || !ok(v) {
            return Err(Error::Domain(format!("{name}[{i}] out of range: {v}")));
        }
    }
    Ok(())
}

impl ItemParams {
    pub fn one_param(difficulty: Vec<f64>) -> Result<Self> {
        check_all("difficulty", &difficulty, |_| true)?;
        Ok(ItemParams {
            kind: ModelKind::OneParam,
            difficulty,
            discrimination: None,
            guessing: None,
            feasibility: None,
        })
    }

    pub fn two_param(difficulty: Vec<f64>, discrimination: Vec<f64>) -> Result<Self> {
        Self::with_extras(ModelKind::TwoParam, difficulty, discrimination, None)
    }

    pub fn three_param(
        difficulty: Vec<f64>,
        discrimination: Vec<f64>,
        guessing: Vec<f64>,
    ) -> Result<Self> {
        Self::with_extras(ModelKind::ThreeParam, difficulty, discrimination, Some(guessing))
    }

    pub fn four_param(
        difficulty: Vec<f64>,
        discrimination: Vec<f64>,
        feasibility: Vec<f64>,
    ) -> Result<Self> {
        Self::with_extras(ModelKind::FourParam, difficulty, discrimination, Some(feasibility))
    }

    fn with_extras(
        kind: ModelKind,
        difficulty: Vec<f64>,
        discrimination: Vec<f64>,
        bound: Option<Vec<f64>>,
    ) -> Result<Self> {
        check_all("difficulty", &difficulty, |_| true)?;
        check_all("discrimination", &discrimination, |a| a > 0.0)?;
        if discrimination.len() != difficulty.len() {
            return Err(Error::Contract(format!(
                "discrimination length {} != difficulty length {}",
                discrimination.len(),
                difficulty.len()
            )));
        }
        let (guessing, feasibility) = match (kind, bound) {
            (ModelKind::TwoParam, None) => (None, None),
            (ModelKind::ThreeParam, Some(c)) => {
                check_all("guessing", &c, |v| (0.0..=1.0).contains(&v))?;
                if c.len() != difficulty.len() {
                    return Err(Error::Contract(format!(
                        "guessing length {} != difficulty length {}",
                        c.len(),
                        difficulty.len()
                    )));
                }
                (Some(c), None)
            }
            (ModelKind::FourParam, Some(l)) => {
                check_all("feasibility", &l, |v| v > 0.0 && v <= 1.0)?;
                if l.len() != difficulty.len() {
                    return Err(Error::Contract(format!(
                        "feasibility length {} != difficulty length {}",
                        l.len(),
                        difficulty.len()
                    )));
                }
                (None, Some(l))
            }
            _ => unreachable!("constructor/kind pairing is fixed above"),
        };
        Ok(ItemParams { kind, difficulty, discrimination: Some(discrimination), guessing, feasibility })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.difficulty.len()
    }

    pub fn is_empty(&self) -> bool {
        self.difficulty.is_empty()
    }

    pub fn difficulty(&self) -> &[f64] {
        &self.difficulty
    }

    pub fn discrimination(&self) -> Option<&[f64]> {
        self.discrimination.as_deref()
    }

    pub fn guessing(&self) -> Option<&[f64]> {
        self.guessing.as_deref()
    }

    pub fn feasibility(&self) -> Option<&[f64]> {
        self.feasibility.as_deref()
    }

    /// Curve view of item `i`. Panics on out-of-range index.
    #[inline]
    pub fn curve(&self, i: usize) -> ItemCurve {
        ItemCurve {
            kind: self.kind,
            a: self.discrimination.as_ref().map_or(1.0, |a| a[i]),
            b: self.difficulty[i],
            c: self.guessing.as_ref().map_or(0.0, |c| c[i]),
            lambda: self.feasibility.as_ref().map_or(1.0, |l| l[i]),
        }
    }
}

/// Per-subject ability estimates; finite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct AbilityParams {
    theta: Vec<f64>,
}

impl AbilityParams {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        check_all("theta", &theta, |_| true)?;
        Ok(AbilityParams { theta })
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn thetas(&self) -> &[f64] {
        &self.theta
    }
}

/// Total log-likelihood of every observed cell under the given parameters.
///
/// Summation runs in observation index order so the result is reproducible.
pub fn dataset_log_likelihood(
    dataset: &ResponsePatternDataset,
    items: &ItemParams,
    abilities: &AbilityParams,
) -> Result<f64> {
    if items.len() != dataset.n_items() {
        return Err(Error::Contract(format!(
            "item count {} != dataset item count {}",
            items.len(),
            dataset.n_items()
        )));
    }
    if abilities.len() != dataset.n_subjects() {
        return Err(Error::Contract(format!(
            "ability count {} != dataset subject count {}",
            abilities.len(),
            dataset.n_subjects()
        )));
    }
    let thetas = abilities.thetas();
    let mut total = 0.0;
    for obs in dataset.observations() {
        let curve = items.curve(obs.item as usize);
        total += curve.log_prob(obs.response, thetas[obs.subject as usize]);
    }
    Ok(total)
}
