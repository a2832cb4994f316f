//! Bock-Aitkin marginal maximum likelihood: EM over item parameters with
//! ability integrated out on a fixed Gauss-Hermite grid, then MAP ability
//! estimation under the same Normal(0,1) prior.
//!
//! The E-step works entirely in log space; per-subject work is parallel over
//! fixed-size chunks and every reduction runs in index order, so results do not
//! depend on thread count. The M-step maximizes each item's expected
//! complete-data log-likelihood by coordinate-wise safeguarded Newton steps
//! with closed-form first and second derivatives, projected into the parameter
//! boxes (a in [0.05, 10], c in [0, 0.5], lambda in [0.01, 1]).

use crate::dataset::ResponsePatternDataset;
use crate::error::Error;
use crate::math::{logit, logsumexp, sigmoid};
use crate::models::{AbilityParams, ItemCurve, ItemParams, ModelKind};
use crate::quadrature::{make_quadrature, QuadratureRule};
use crate::vi::{ConfigEcho, FitReport};
use crate::Result;
use rayon::prelude::*;
use std::time::Instant;

const SUBJECT_CHUNK: usize = 64;
const DEGENERATE_DIFFICULTY_BOUND: f64 = 6.0;

#[derive(Debug, Clone)]
pub struct MmlConfig {
    pub n_quad: usize,
    pub max_iters: usize,
    /// Relative marginal-log-likelihood change that counts as converged.
    pub tol: f64,
}

impl Default for MmlConfig {
    fn default() -> Self {
        MmlConfig { n_quad: 41, max_iters: 200, tol: 1e-6 }
    }
}

impl MmlConfig {
    fn validate(&self) -> Result<()> {
        if self.n_quad < 3 {
            return Err(Error::Contract(format!("n_quad must be >= 3, got {}", self.n_quad)));
        }
        if self.max_iters == 0 {
            return Err(Error::Contract("max_iters must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Contract(format!("tol must be > 0, got {}", self.tol)));
        }
        Ok(())
    }
}

/// E-step output: per-subject node posteriors and per-(item, node) counts.
#[derive(Debug, Clone)]
pub struct EStep {
    /// J x K row-major: posterior weight of node k for subject j.
    pub posterior: Vec<f64>,
    /// I x K row-major: expected number of correct responses.
    pub expected_correct: Vec<f64>,
    /// I x K row-major: expected number of responses of either kind.
    pub expected_exposure: Vec<f64>,
    pub marginal_log_lik: f64,
}

pub fn e_step(
    dataset: &ResponsePatternDataset,
    items: &ItemParams,
    rule: &QuadratureRule,
) -> Result<EStep> {
    if items.len() != dataset.n_items() {
        return Err(Error::Contract(format!(
            "item count {} != dataset item count {}",
            items.len(),
            dataset.n_items()
        )));
    }
    let n_subjects = dataset.n_subjects();
    let k = rule.len();
    let nodes = rule.nodes();
    let log_w: Vec<f64> = rule.weights().iter().map(|w| w.ln()).collect();
    let curves: Vec<ItemCurve> = (0..items.len()).map(|i| items.curve(i)).collect();
    let (offsets, entries) = dataset.by_subject();
    let observations = dataset.observations();

    let mut posterior = vec![0.0f64; n_subjects * k];
    let mut log_marginals = vec![0.0f64; n_subjects];

    posterior
        .par_chunks_mut(SUBJECT_CHUNK * k)
        .zip(log_marginals.par_chunks_mut(SUBJECT_CHUNK))
        .enumerate()
        .for_each(|(chunk, (r_chunk, lm_chunk))| {
            let base = chunk * SUBJECT_CHUNK;
            let mut scratch = vec![0.0f64; k];
            for (local, lm_slot) in lm_chunk.iter_mut().enumerate() {
                let j = base + local;
                let row = &entries[offsets[j]..offsets[j + 1]];
                for (node_idx, slot) in scratch.iter_mut().enumerate() {
                    let theta = nodes[node_idx];
                    let mut ll = log_w[node_idx];
                    for &obs_idx in row {
                        let obs = observations[obs_idx as usize];
                        ll += curves[obs.item as usize].log_prob(obs.response, theta);
                    }
                    *slot = ll;
                }
                let lm = logsumexp(&scratch);
                *lm_slot = lm;
                let r_row = &mut r_chunk[local * k..(local + 1) * k];
                for (slot, &lw) in r_row.iter_mut().zip(scratch.iter()) {
                    *slot = (lw - lm).exp();
                }
            }
        });

    if let Some(j) = log_marginals.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!(
            "subject '{}' produced a non-finite row likelihood",
            dataset.subject_ids()[j]
        )));
    }

    // count accumulation stays sequential in index order for reproducibility
    let mut expected_correct = vec![0.0f64; items.len() * k];
    let mut expected_exposure = vec![0.0f64; items.len() * k];
    for (j, window) in offsets.windows(2).enumerate() {
        let r_row = &posterior[j * k..(j + 1) * k];
        for &obs_idx in &entries[window[0]..window[1]] {
            let obs = observations[obs_idx as usize];
            let i = obs.item as usize;
            let correct = &mut expected_correct[i * k..(i + 1) * k];
            let exposure = &mut expected_exposure[i * k..(i + 1) * k];
            if obs.response == 1 {
                for ((c, e), &r) in correct.iter_mut().zip(exposure.iter_mut()).zip(r_row) {
                    *c += r;
                    *e += r;
                }
            } else {
                for (e, &r) in exposure.iter_mut().zip(r_row) {
                    *e += r;
                }
            }
        }
    }

    let marginal_log_lik = log_marginals.iter().sum();
    Ok(EStep { posterior, expected_correct, expected_exposure, marginal_log_lik })
}

// Expected complete-data objective for one item: sum_k n1 ln p_k + n0 ln(1-p_k),
// with the same probability clamps as the likelihood kernels.
fn item_objective(curve: &ItemCurve, nodes: &[f64], n1: &[f64], n: &[f64]) -> f64 {
    let mut total = 0.0;
    for ((&x, &n1k), &nk) in nodes.iter().zip(n1).zip(n) {
        if nk == 0.0 {
            continue;
        }
        total += n1k * curve.log_prob(1, x) + (nk - n1k) * curve.log_prob(0, x);
    }
    total
}

#[derive(Clone, Copy)]
enum Coord {
    Difficulty,
    Discrimination,
    Guessing,
    Feasibility,
}

fn rebuild(kind: ModelKind, a: f64, b: f64, c: f64, lam: f64) -> ItemCurve {
    match kind {
        ModelKind::OneParam => ItemCurve::one_param(b),
        ModelKind::TwoParam => ItemCurve::two_param(a, b),
        ModelKind::ThreeParam => ItemCurve::three_param(a, b, c),
        ModelKind::FourParam => ItemCurve::four_param(a, b, lam),
    }
    .expect("coordinate updates stay inside validated boxes")
}

// First and second derivative of the expected objective along one coordinate.
fn coord_derivatives(
    curve: &ItemCurve,
    coord: Coord,
    nodes: &[f64],
    n1: &[f64],
    n: &[f64],
) -> (f64, f64) {
    let a = curve.discrimination();
    let b = curve.difficulty();
    let kappa = match curve.kind() {
        ModelKind::ThreeParam => 1.0 - curve.guessing(),
        ModelKind::FourParam => curve.feasibility(),
        _ => 1.0,
    };
    let mut grad = 0.0;
    let mut hess = 0.0;
    for ((&x, &n1k), &nk) in nodes.iter().zip(n1).zip(n) {
        if nk == 0.0 {
            continue;
        }
        let n0k = nk - n1k;
        let s = sigmoid(a * (x - b));
        let p = match curve.kind() {
            ModelKind::OneParam | ModelKind::TwoParam => s,
            ModelKind::ThreeParam => curve.guessing() + kappa * s,
            ModelKind::FourParam => kappa * s,
        };
        let p = p.clamp(1e-12, 1.0 - 1e-12);
        let q = 1.0 - p;
        let u = n1k / p - n0k / q;
        let du_dp = -n1k / (p * p) - n0k / (q * q);
        let sz = kappa * s * (1.0 - s); // dp/dz
        let szz = sz * (1.0 - 2.0 * s); // d2p/dz2
        let (dp, d2p) = match coord {
            Coord::Difficulty => (-a * sz, a * a * szz),
            Coord::Discrimination => ((x - b) * sz, (x - b) * (x - b) * szz),
            Coord::Guessing => (1.0 - s, 0.0),
            Coord::Feasibility => (s, 0.0),
        };
        grad += u * dp;
        hess += du_dp * dp * dp + u * d2p;
    }
    (grad, hess)
}

// Safeguarded Newton along one coordinate inside [lo, hi]; never decreases the
// objective. Returns the new value and whether the coordinate is stationary.
fn newton_coordinate(
    kind: ModelKind,
    coord: Coord,
    mut a: f64,
    mut b: f64,
    mut c: f64,
    mut lam: f64,
    lo: f64,
    hi: f64,
    nodes: &[f64],
    n1: &[f64],
    n: &[f64],
) -> (f64, bool) {
    let read = |a: f64, b: f64, c: f64, lam: f64| match coord {
        Coord::Difficulty => b,
        Coord::Discrimination => a,
        Coord::Guessing => c,
        Coord::Feasibility => lam,
    };
    let total: f64 = n.iter().sum();
    let gtol = 1e-9 * total.max(1.0);
    let mut value = read(a, b, c, lam);
    let mut stationary = false;
    for _ in 0..30 {
        let curve = rebuild(kind, a, b, c, lam);
        let (grad, hess) = coord_derivatives(&curve, coord, nodes, n1, n);
        let at_lo = value <= lo && grad < 0.0;
        let at_hi = value >= hi && grad > 0.0;
        if grad.abs() <= gtol || at_lo || at_hi {
            stationary = true;
            break;
        }
        let mut step = if hess < 0.0 { -grad / hess } else { grad.signum() * 0.5 };
        step = step.clamp(-3.0, 3.0);
        let current = item_objective(&curve, nodes, n1, n);
        let mut accepted = false;
        for _ in 0..30 {
            let cand = (value + step).clamp(lo, hi);
            if cand == value {
                break;
            }
            match coord {
                Coord::Difficulty => b = cand,
                Coord::Discrimination => a = cand,
                Coord::Guessing => c = cand,
                Coord::Feasibility => lam = cand,
            }
            let trial = rebuild(kind, a, b, c, lam);
            if item_objective(&trial, nodes, n1, n) >= current - 1e-12 {
                value = cand;
                accepted = true;
                break;
            }
            // roll back and shrink
            match coord {
                Coord::Difficulty => b = value,
                Coord::Discrimination => a = value,
                Coord::Guessing => c = value,
                Coord::Feasibility => lam = value,
            }
            step *= 0.5;
        }
        if !accepted {
            stationary = true;
            break;
        }
        if step.abs() < 1e-11 {
            stationary = true;
            break;
        }
    }
    (value, stationary)
}

/// Maximize each item's expected complete-data log-likelihood.
///
/// Starts from the current parameters (warm start across EM iterations).
pub fn m_step(
    counts: &EStep,
    rule: &QuadratureRule,
    items: &ItemParams,
) -> Result<ItemParams> {
    let kind = items.kind();
    let k = rule.len();
    let nodes = rule.nodes();
    if counts.expected_correct.len() != items.len() * k {
        return Err(Error::Contract(format!(
            "counts shaped for {} item-node cells, expected {}",
            counts.expected_correct.len(),
            items.len() * k
        )));
    }

    let mut difficulty = Vec::with_capacity(items.len());
    let mut discrimination = Vec::with_capacity(items.len());
    let mut guessing = Vec::with_capacity(items.len());
    let mut feasibility = Vec::with_capacity(items.len());

    for i in 0..items.len() {
        let n1 = &counts.expected_correct[i * k..(i + 1) * k];
        let n = &counts.expected_exposure[i * k..(i + 1) * k];
        let curve = items.curve(i);
        let mut a = curve.discrimination();
        let mut b = curve.difficulty();
        let mut c = curve.guessing();
        let mut lam = curve.feasibility();

        let sweeps: &[(Coord, f64, f64)] = match kind {
            ModelKind::OneParam => &[(Coord::Difficulty, -20.0, 20.0)],
            ModelKind::TwoParam => {
                &[(Coord::Difficulty, -20.0, 20.0), (Coord::Discrimination, 0.05, 10.0)]
            }
            ModelKind::ThreeParam => &[
                (Coord::Difficulty, -20.0, 20.0),
                (Coord::Discrimination, 0.05, 10.0),
                (Coord::Guessing, 0.0, 0.5),
            ],
            ModelKind::FourParam => &[
                (Coord::Difficulty, -20.0, 20.0),
                (Coord::Discrimination, 0.05, 10.0),
                (Coord::Feasibility, 0.01, 1.0),
            ],
        };

        let mut settled = false;
        for _ in 0..50 {
            let before = item_objective(&rebuild(kind, a, b, c, lam), nodes, n1, n);
            let mut all_stationary = true;
            for &(coord, lo, hi) in sweeps {
                let (value, stationary) =
                    newton_coordinate(kind, coord, a, b, c, lam, lo, hi, nodes, n1, n);
                match coord {
                    Coord::Difficulty => b = value,
                    Coord::Discrimination => a = value,
                    Coord::Guessing => c = value,
                    Coord::Feasibility => lam = value,
                }
                all_stationary &= stationary;
            }
            let after = item_objective(&rebuild(kind, a, b, c, lam), nodes, n1, n);
            if all_stationary || after - before <= 1e-10 * before.abs().max(1.0) {
                settled = true;
                break;
            }
        }
        if !settled {
            return Err(Error::MStepNonConvergence { item: i });
        }
        difficulty.push(b);
        discrimination.push(a);
        guessing.push(c);
        feasibility.push(lam);
    }

    match kind {
        ModelKind::OneParam => ItemParams::one_param(difficulty),
        ModelKind::TwoParam => ItemParams::two_param(difficulty, discrimination),
        ModelKind::ThreeParam => ItemParams::three_param(difficulty, discrimination, guessing),
        ModelKind::FourParam => ItemParams::four_param(difficulty, discrimination, feasibility),
    }
}

fn initial_items(dataset: &ResponsePatternDataset, kind: ModelKind) -> Result<ItemParams> {
    let n_items = dataset.n_items();
    let mut correct = vec![0.0f64; n_items];
    let mut total = vec![0.0f64; n_items];
    for obs in dataset.observations() {
        let i = obs.item as usize;
        total[i] += 1.0;
        correct[i] += f64::from(obs.response);
    }
    let difficulty: Vec<f64> = correct
        .iter()
        .zip(&total)
        .map(|(&c, &n)| {
            let p = if n > 0.0 { (c / n).clamp(0.01, 0.99) } else { 0.5 };
            -logit(p)
        })
        .collect();
    match kind {
        ModelKind::OneParam => ItemParams::one_param(difficulty),
        ModelKind::TwoParam => ItemParams::two_param(difficulty, vec![1.0; n_items]),
        ModelKind::ThreeParam => {
            ItemParams::three_param(difficulty, vec![1.0; n_items], vec![0.1; n_items])
        }
        ModelKind::FourParam => {
            ItemParams::four_param(difficulty, vec![1.0; n_items], vec![0.95; n_items])
        }
    }
}

// Items whose observed responses are all 0 or all 1 have no interior optimum
// in b; they get flagged and their difficulty clamped after each M-step.
fn degenerate_items(dataset: &ResponsePatternDataset) -> Vec<bool> {
    let n_items = dataset.n_items();
    let mut any0 = vec![false; n_items];
    let mut any1 = vec![false; n_items];
    for obs in dataset.observations() {
        if obs.response == 1 {
            any1[obs.item as usize] = true;
        } else {
            any0[obs.item as usize] = true;
        }
    }
    any0.iter().zip(&any1).map(|(&a0, &a1)| !(a0 && a1)).collect()
}

fn clamp_degenerate(items: ItemParams, flags: &[bool]) -> Result<ItemParams> {
    if !flags.iter().any(|&f| f) {
        return Ok(items);
    }
    let kind = items.kind();
    let difficulty: Vec<f64> = items
        .difficulty()
        .iter()
        .zip(flags)
        .map(|(&b, &flag)| {
            if flag {
                b.clamp(-DEGENERATE_DIFFICULTY_BOUND, DEGENERATE_DIFFICULTY_BOUND)
            } else {
                b
            }
        })
        .collect();
    let disc = items.discrimination().map(<[f64]>::to_vec);
    match kind {
        ModelKind::OneParam => ItemParams::one_param(difficulty),
        ModelKind::TwoParam => ItemParams::two_param(difficulty, disc.expect("2pl has a")),
        ModelKind::ThreeParam => ItemParams::three_param(
            difficulty,
            disc.expect("3pl has a"),
            items.guessing().expect("3pl has c").to_vec(),
        ),
        ModelKind::FourParam => ItemParams::four_param(
            difficulty,
            disc.expect("4pl has a"),
            items.feasibility().expect("4pl has lambda").to_vec(),
        ),
    }
}

/// Alternate E and M steps until the marginal log-likelihood settles.
pub fn fit_mml(
    dataset: &ResponsePatternDataset,
    kind: ModelKind,
    config: &MmlConfig,
) -> Result<(ItemParams, FitReport)> {
    config.validate()?;
    if dataset.n_observations() == 0 {
        return Err(Error::Contract("dataset has no observations".into()));
    }
    let mut seen = vec![false; dataset.n_items()];
    for obs in dataset.observations() {
        seen[obs.item as usize] = true;
    }
    if let Some(i) = seen.iter().position(|&s| !s) {
        return Err(Error::Format(format!(
            "item '{}' has no observations; remove it before fitting",
            dataset.item_ids()[i]
        )));
    }

    let start = Instant::now();
    let rule = make_quadrature(config.n_quad)?;
    let flags = degenerate_items(dataset);
    let mut items = clamp_degenerate(initial_items(dataset, kind)?, &flags)?;
    let mut mll_trace: Vec<f64> = Vec::new();
    let mut epoch_seconds: Vec<f64> = Vec::new();
    let mut converged = false;

    // the final E-step is evaluation-only, so the last trace entry always
    // describes the returned parameters
    for iter in 0..config.max_iters {
        let counts = e_step(dataset, &items, &rule)?;
        let mll = counts.marginal_log_lik;
        let done = mll_trace
            .last()
            .is_some_and(|prev| (mll - prev).abs() <= config.tol * prev.abs().max(1.0));
        mll_trace.push(mll);
        epoch_seconds.push(start.elapsed().as_secs_f64());
        if done {
            converged = true;
            break;
        }
        if iter + 1 < config.max_iters {
            items = clamp_degenerate(m_step(&counts, &rule, &items)?, &flags)?;
        }
    }

    let abilities = map_ability(dataset, &items)?;
    let report = FitReport {
        items: items.clone(),
        abilities,
        scales: None,
        trace: mll_trace.iter().map(|m| -m).collect(),
        epoch_seconds,
        seconds: start.elapsed().as_secs_f64(),
        converged,
        config: ConfigEcho::Mml(config.clone()),
    };
    Ok((items, report))
}

// (d/dtheta, d2/dtheta2) of ln p(y | theta) for one observation.
fn logp_theta_derivatives(curve: &ItemCurve, y: u8, theta: f64) -> (f64, f64) {
    let a = curve.discrimination();
    let s = sigmoid(a * (theta - curve.difficulty()));
    match curve.kind() {
        ModelKind::OneParam | ModelKind::TwoParam => {
            (a * (f64::from(y) - s), -a * a * s * (1.0 - s))
        }
        ModelKind::ThreeParam => {
            let c = curve.guessing();
            if y == 1 {
                let p = (c + (1.0 - c) * s).max(1e-300);
                let u = (1.0 - c) * a * s * (1.0 - s);
                let du = (1.0 - c) * a * a * s * (1.0 - s) * (1.0 - 2.0 * s);
                (u / p, (du * p - u * u) / (p * p))
            } else {
                (-a * s, -a * a * s * (1.0 - s))
            }
        }
        ModelKind::FourParam => {
            let lam = curve.feasibility();
            if y == 1 {
                (a * (1.0 - s), -a * a * s * (1.0 - s))
            } else {
                let q = (1.0 - lam * s).max(1e-300);
                let v = -lam * a * s * (1.0 - s);
                let dv = -lam * a * a * s * (1.0 - s) * (1.0 - 2.0 * s);
                (v / q, (dv * q - v * v) / (q * q))
            }
        }
    }
}

fn map_single(
    row: &[u32],
    observations: &[crate::dataset::Observation],
    curves: &[ItemCurve],
) -> f64 {
    if row.is_empty() {
        return 0.0; // prior mode
    }
    let objective = |theta: f64| -> f64 {
        let mut f = -0.5 * theta * theta;
        for &obs_idx in row {
            let obs = observations[obs_idx as usize];
            f += curves[obs.item as usize].log_prob(obs.response, theta);
        }
        f
    };
    let mut theta = 0.0f64;
    for _ in 0..60 {
        let mut grad = -theta;
        let mut hess = -1.0;
        for &obs_idx in row {
            let obs = observations[obs_idx as usize];
            let (d, d2) = logp_theta_derivatives(&curves[obs.item as usize], obs.response, theta);
            grad += d;
            hess += d2;
        }
        if grad.abs() < 1e-12 {
            break;
        }
        let mut step = if hess < 0.0 { -grad / hess } else { grad.signum() };
        step = step.clamp(-2.0, 2.0);
        let current = objective(theta);
        let mut moved = false;
        for _ in 0..40 {
            let cand = (theta + step).clamp(-10.0, 10.0);
            if objective(cand) >= current - 1e-14 {
                moved = cand != theta;
                theta = cand;
                break;
            }
            step *= 0.5;
        }
        if !moved || step.abs() < 1e-13 {
            break;
        }
    }
    theta
}

/// MAP ability per subject under the Normal(0,1) prior; subjects without
/// observations sit at the prior mode 0.
pub fn map_ability(
    dataset: &ResponsePatternDataset,
    items: &ItemParams,
) -> Result<AbilityParams> {
    if items.len() != dataset.n_items() {
        return Err(Error::Contract(format!(
            "item count {} != dataset item count {}",
            items.len(),
            dataset.n_items()
        )));
    }
    let curves: Vec<ItemCurve> = (0..items.len()).map(|i| items.curve(i)).collect();
    let (offsets, entries) = dataset.by_subject();
    let observations = dataset.observations();
    let mut theta = vec![0.0f64; dataset.n_subjects()];
    theta
        .par_chunks_mut(SUBJECT_CHUNK)
        .enumerate()
        .for_each(|(chunk, slots)| {
            let base = chunk * SUBJECT_CHUNK;
            for (local, slot) in slots.iter_mut().enumerate() {
                let j = base + local;
                let row = &entries[offsets[j]..offsets[j + 1]];
                *slot = map_single(row, observations, &curves);
            }
        });
    AbilityParams::new(theta)
}
