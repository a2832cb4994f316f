//! Stochastic variational inference over the logistic item response models.
//!
//! The guide is fully factorized: one Normal factor per ability and per item
//! latent (difficulty directly; discrimination, guessing and feasibility in
//! unconstrained space), plus Normal q(mu) and Gamma q(tau) hyper-factors for
//! the hierarchical ability prior theta_j ~ Normal(mu, 1/sqrt(tau)).
//!
//! Gradients are computed analytically term by term rather than through an
//! autodiff tape. The likelihood term is a reparameterized single-sample (by
//! default) estimate rescaled by N/|batch|; Normal entropy and cross terms are
//! closed form; the Gamma factor is handled through a log-space sample
//! log tau = digamma(conc) - ln(rate) + sqrt(trigamma(conc)) * eps,
//! differentiated exactly through that path. The score correction for the
//! sampling density's own parameter dependence is deliberately omitted, so the
//! tau gradient is approximate; the objective value itself is unaffected, and
//! at the prior (conc = rate = 1) the tau term vanishes identically.
//!
//! The training loop is sequential: Adam state is a serial dependency, and
//! keeping every reduction in index order makes runs bit-reproducible.

use crate::dataset::{split_batches, ResponsePatternDataset};
use crate::error::Error;
use crate::math::{digamma, ln_gamma, logit, sigmoid, tetragamma, trigamma};
use crate::mml::MmlConfig;
use crate::models::{AbilityParams, ItemCurve, ItemParams, ModelKind};
use crate::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use std::time::Instant;

/// Smoothing window (in epochs) for the convergence check and the
/// best-snapshot selection.
const SMOOTH_WINDOW: usize = 10;

// ---------------------------------------------------------------------------
// constraint transforms

/// Item latents that live in a constrained space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ItemLatent {
    /// a > 0 via exp.
    Discrimination,
    /// c in (0,1) via sigmoid.
    Guessing,
    /// lambda in (0,1) via sigmoid.
    Feasibility,
}

/// Map an unconstrained value into model space.
pub fn constrain(latent: ItemLatent, raw: f64) -> f64 {
    match latent {
        ItemLatent::Discrimination => raw.exp(),
        ItemLatent::Guessing | ItemLatent::Feasibility => sigmoid(raw),
    }
}

/// Inverse of [`constrain`] on the open domain.
pub fn unconstrain(latent: ItemLatent, value: f64) -> f64 {
    match latent {
        ItemLatent::Discrimination => value.ln(),
        ItemLatent::Guessing | ItemLatent::Feasibility => logit(value),
    }
}

/// loc + scale * eps, the Normal reparameterization. A scale that has
/// underflowed to zero collapses to the location; the divergence envelope in
/// the training loop is what keeps scales honest.
#[inline]
pub fn reparam_sample_normal(loc: f64, scale: f64, eps: f64) -> f64 {
    loc + scale * eps
}

// ---------------------------------------------------------------------------
// priors and configuration

/// Fixed prior family. Ability is hierarchical by default:
/// theta_j ~ Normal(mu, 1/sqrt(tau)), mu ~ Normal(0,1), tau ~ Gamma(1,1);
/// with `hierarchical` off, theta_j ~ Normal(0,1). Items always get fixed
/// priors: b ~ Normal(0,1), raw_a ~ Normal(0, raw_disc_sd), raw_c and
/// raw_lambda ~ Normal(0, 1) in their unconstrained spaces.
#[derive(Debug, Clone)]
pub struct PriorSpec {
    pub hierarchical: bool,
    pub raw_disc_sd: f64,
    pub raw_guess_sd: f64,
    pub raw_feas_sd: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec { hierarchical: true, raw_disc_sd: 0.25, raw_guess_sd: 1.0, raw_feas_sd: 1.0 }
    }
}

impl PriorSpec {
    fn validate(&self) -> Result<()> {
        for (name, sd) in [
            ("raw_disc_sd", self.raw_disc_sd),
            ("raw_guess_sd", self.raw_guess_sd),
            ("raw_feas_sd", self.raw_feas_sd),
        ] {
            if !(sd > 0.0 && sd.is_finite()) {
                return Err(Error::Contract(format!("{name} must be positive, got {sd}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub epochs: usize,
    /// None means full-batch training.
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub mc_samples: usize,
    pub seed: u64,
    pub priors: PriorSpec,
    /// Converged when the smoothed loss improves by less than this relative
    /// amount across [`SMOOTH_WINDOW`] epochs.
    pub rel_tol: f64,
}

impl TrainConfig {
    pub fn new(kind: ModelKind, seed: u64) -> Self {
        TrainConfig {
            kind,
            epochs: 1000,
            batch_size: None,
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            mc_samples: 1,
            seed,
            priors: PriorSpec::default(),
            rel_tol: 1e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Contract("epochs must be >= 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Contract("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Contract(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Contract(format!("{name} must lie in [0,1), got {beta}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Contract("adam_eps must be positive".into()));
        }
        if self.mc_samples == 0 {
            return Err(Error::Contract("mc_samples must be >= 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::Contract("rel_tol must be positive".into()));
        }
        self.priors.validate()
    }
}

// ---------------------------------------------------------------------------
// parameter layout

// Offsets into the flat parameter vector. Block order: theta, b, then the
// optional raw item blocks, then the hyper-latents. Each Normal block stores
// all locs followed by all log-scales.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    n_subjects: usize,
    n_items: usize,
    kind: ModelKind,
    hierarchical: bool,
    theta: usize,
    b: usize,
    raw_a: Option<usize>,
    raw_c: Option<usize>,
    raw_lam: Option<usize>,
    // (mu_loc, mu_log_scale, tau_log_conc, tau_log_rate)
    hyper: Option<usize>,
    n_params: usize,
}

impl Layout {
    fn new(kind: ModelKind, n_subjects: usize, n_items: usize, hierarchical: bool) -> Self {
        let mut cursor = 0;
        let theta = cursor;
        cursor += 2 * n_subjects;
        let b = cursor;
        cursor += 2 * n_items;
        let raw_a = kind.uses_discrimination().then(|| {
            let at = cursor;
            cursor += 2 * n_items;
            at
        });
        let raw_c = kind.uses_guessing().then(|| {
            let at = cursor;
            cursor += 2 * n_items;
            at
        });
        let raw_lam = kind.uses_feasibility().then(|| {
            let at = cursor;
            cursor += 2 * n_items;
            at
        });
        let hyper = hierarchical.then(|| {
            let at = cursor;
            cursor += 4;
            at
        });
        Layout { n_subjects, n_items, kind, hierarchical, theta, b, raw_a, raw_c, raw_lam, hyper, n_params: cursor }
    }
}

/// Mean-field posterior state: a flat f64 vector plus the layout that
/// interprets it.
#[derive(Debug, Clone)]
pub struct VariationalPosterior {
    layout: Layout,
    pub(crate) params: Vec<f64>,
}

impl VariationalPosterior {
    /// Initialize every factor at its prior.
    pub fn init(
        kind: ModelKind,
        n_subjects: usize,
        n_items: usize,
        priors: &PriorSpec,
    ) -> Self {
        let layout = Layout::new(kind, n_subjects, n_items, priors.hierarchical);
        let mut params = vec![0.0f64; layout.n_params];
        // Normal blocks: loc 0, log_scale ln(prior sd). theta/b/c/lambda have
        // unit prior sd so their zeros are already right.
        if let Some(at) = layout.raw_a {
            for slot in &mut params[at + n_items..at + 2 * n_items] {
                *slot = priors.raw_disc_sd.ln();
            }
        }
        if let Some(at) = layout.raw_c {
            for slot in &mut params[at + n_items..at + 2 * n_items] {
                *slot = priors.raw_guess_sd.ln();
            }
        }
        if let Some(at) = layout.raw_lam {
            for slot in &mut params[at + n_items..at + 2 * n_items] {
                *slot = priors.raw_feas_sd.ln();
            }
        }
        // hyper block zeros: mu ~ (0, ln 1), tau conc = rate = e^0 = 1
        VariationalPosterior { layout, params }
    }

    pub fn kind(&self) -> ModelKind {
        self.layout.kind
    }

    pub fn n_subjects(&self) -> usize {
        self.layout.n_subjects
    }

    pub fn n_items(&self) -> usize {
        self.layout.n_items
    }

    pub fn hierarchical(&self) -> bool {
        self.layout.hierarchical
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    fn locs(&self, at: usize, len: usize) -> &[f64] {
        &self.params[at..at + len]
    }

    fn scales(&self, at: usize, len: usize) -> Vec<f64> {
        self.params[at + len..at + 2 * len].iter().map(|ls| ls.exp()).collect()
    }

    pub fn ability_locs(&self) -> &[f64] {
        self.locs(self.layout.theta, self.layout.n_subjects)
    }

    pub fn ability_scales(&self) -> Vec<f64> {
        self.scales(self.layout.theta, self.layout.n_subjects)
    }

    pub fn difficulty_locs(&self) -> &[f64] {
        self.locs(self.layout.b, self.layout.n_items)
    }

    pub fn difficulty_scales(&self) -> Vec<f64> {
        self.scales(self.layout.b, self.layout.n_items)
    }

    /// Back-transformed point estimates exp(loc) for discrimination.
    pub fn discrimination_locs(&self) -> Option<Vec<f64>> {
        let at = self.layout.raw_a?;
        Some(self.locs(at, self.layout.n_items).iter().map(|r| r.exp()).collect())
    }

    /// Guide scales in the unconstrained (log-discrimination) space.
    pub fn discrimination_scales(&self) -> Option<Vec<f64>> {
        Some(self.scales(self.layout.raw_a?, self.layout.n_items))
    }

    pub fn guessing_locs(&self) -> Option<Vec<f64>> {
        let at = self.layout.raw_c?;
        Some(self.locs(at, self.layout.n_items).iter().map(|r| sigmoid(*r)).collect())
    }

    pub fn guessing_scales(&self) -> Option<Vec<f64>> {
        Some(self.scales(self.layout.raw_c?, self.layout.n_items))
    }

    pub fn feasibility_locs(&self) -> Option<Vec<f64>> {
        let at = self.layout.raw_lam?;
        Some(self.locs(at, self.layout.n_items).iter().map(|r| sigmoid(*r)).collect())
    }

    pub fn feasibility_scales(&self) -> Option<Vec<f64>> {
        Some(self.scales(self.layout.raw_lam?, self.layout.n_items))
    }

    pub fn point_items(&self) -> Result<ItemParams> {
        let b = self.difficulty_locs().to_vec();
        match self.layout.kind {
            ModelKind::OneParam => ItemParams::one_param(b),
            ModelKind::TwoParam => {
                ItemParams::two_param(b, self.discrimination_locs().expect("2pl has a"))
            }
            ModelKind::ThreeParam => ItemParams::three_param(
                b,
                self.discrimination_locs().expect("3pl has a"),
                self.guessing_locs().expect("3pl has c"),
            ),
            ModelKind::FourParam => ItemParams::four_param(
                b,
                self.discrimination_locs().expect("4pl has a"),
                self.feasibility_locs().expect("4pl has lambda"),
            ),
        }
    }

    pub fn point_abilities(&self) -> Result<AbilityParams> {
        AbilityParams::new(self.ability_locs().to_vec())
    }

    pub fn posterior_scales(&self) -> PosteriorScales {
        PosteriorScales {
            ability: self.ability_scales(),
            difficulty: self.difficulty_scales(),
            discrimination: self.discrimination_scales(),
            guessing: self.guessing_scales(),
            feasibility: self.feasibility_scales(),
        }
    }

    /// Raw flat parameter vector: per block, all locs then all log-scales.
    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// ELBO and gradients

/// One complete set of standard-normal driving noise for an ELBO evaluation.
/// Draw order is fixed: theta block, b, raw_a, raw_c, raw_lambda, then tau.
#[derive(Debug, Clone)]
pub(crate) struct EpsDraws {
    theta: Vec<f64>,
    b: Vec<f64>,
    raw_a: Vec<f64>,
    raw_c: Vec<f64>,
    raw_lam: Vec<f64>,
    tau: f64,
}

impl EpsDraws {
    #[cfg(test)]
    pub(crate) fn zeros(layout: &Layout) -> Self {
        EpsDraws {
            theta: vec![0.0; layout.n_subjects],
            b: vec![0.0; layout.n_items],
            raw_a: vec![0.0; if layout.raw_a.is_some() { layout.n_items } else { 0 }],
            raw_c: vec![0.0; if layout.raw_c.is_some() { layout.n_items } else { 0 }],
            raw_lam: vec![0.0; if layout.raw_lam.is_some() { layout.n_items } else { 0 }],
            tau: 0.0,
        }
    }

    fn draw(layout: &Layout, rng: &mut impl Rng) -> Self {
        let mut take = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.sample(StandardNormal)).collect()
        };
        let theta = take(layout.n_subjects);
        let b = take(layout.n_items);
        let raw_a = take(if layout.raw_a.is_some() { layout.n_items } else { 0 });
        let raw_c = take(if layout.raw_c.is_some() { layout.n_items } else { 0 });
        let raw_lam = take(if layout.raw_lam.is_some() { layout.n_items } else { 0 });
        let tau = if layout.hierarchical { rng.sample(StandardNormal) } else { 0.0 };
        EpsDraws { theta, b, raw_a, raw_c, raw_lam, tau }
    }
}

// Closed-form E_q[ln p] + H(q) for one Normal factor against a fixed
// Normal(0, sd0) prior: -ln(sd0) - (loc^2 + scale^2)/(2 sd0^2) + 1/2 + ln scale.
// Returns (value, d/d loc, d/d log_scale). Zero exactly when q equals the prior.
#[inline]
fn normal_block_term(loc: f64, log_scale: f64, sd0: f64) -> (f64, f64, f64) {
    let scale = log_scale.exp();
    let var0 = sd0 * sd0;
    let value = -sd0.ln() - (loc * loc + scale * scale) / (2.0 * var0) + 0.5 + log_scale;
    (value, -loc / var0, -scale * scale / var0 + 1.0)
}

/// Deterministic ELBO value and gradient for a fixed noise bundle.
///
/// The likelihood sum runs over `batch` (observation indices) and is rescaled
/// by n_observations/|batch|; every regularization term covers all latents.
pub(crate) fn elbo_core(
    dataset: &ResponsePatternDataset,
    batch: &[u32],
    layout: &Layout,
    params: &[f64],
    priors: &PriorSpec,
    eps: &EpsDraws,
) -> (f64, Vec<f64>) {
    let j_n = layout.n_subjects;
    let i_n = layout.n_items;
    let mut value = 0.0f64;
    let mut grad = vec![0.0f64; layout.n_params];

    // sampled latents
    let theta_loc = &params[layout.theta..layout.theta + j_n];
    let theta_ls = &params[layout.theta + j_n..layout.theta + 2 * j_n];
    let theta_scale: Vec<f64> = theta_ls.iter().map(|ls| ls.exp()).collect();
    let theta_tilde: Vec<f64> = (0..j_n)
        .map(|j| reparam_sample_normal(theta_loc[j], theta_scale[j], eps.theta[j]))
        .collect();

    let b_loc = &params[layout.b..layout.b + i_n];
    let b_ls = &params[layout.b + i_n..layout.b + 2 * i_n];
    let b_scale: Vec<f64> = b_ls.iter().map(|ls| ls.exp()).collect();
    let b_tilde: Vec<f64> =
        (0..i_n).map(|i| reparam_sample_normal(b_loc[i], b_scale[i], eps.b[i])).collect();

    let mut a_scale = Vec::new();
    let mut a_tilde = Vec::new();
    if let Some(at) = layout.raw_a {
        a_scale = params[at + i_n..at + 2 * i_n].iter().map(|ls| ls.exp()).collect();
        a_tilde = (0..i_n)
            .map(|i| reparam_sample_normal(params[at + i], a_scale[i], eps.raw_a[i]).exp())
            .collect();
    }
    let mut c_scale = Vec::new();
    let mut c_tilde = Vec::new();
    if let Some(at) = layout.raw_c {
        c_scale = params[at + i_n..at + 2 * i_n].iter().map(|ls| ls.exp()).collect();
        c_tilde = (0..i_n)
            .map(|i| sigmoid(reparam_sample_normal(params[at + i], c_scale[i], eps.raw_c[i])))
            .collect();
    }
    let mut lam_scale = Vec::new();
    let mut lam_tilde = Vec::new();
    if let Some(at) = layout.raw_lam {
        lam_scale = params[at + i_n..at + 2 * i_n].iter().map(|ls| ls.exp()).collect();
        lam_tilde = (0..i_n)
            .map(|i| sigmoid(reparam_sample_normal(params[at + i], lam_scale[i], eps.raw_lam[i])))
            .collect();
    }

    let curves: Vec<ItemCurve> = (0..i_n)
        .map(|i| {
            match layout.kind {
                ModelKind::OneParam => ItemCurve::one_param(b_tilde[i]),
                ModelKind::TwoParam => ItemCurve::two_param(a_tilde[i], b_tilde[i]),
                ModelKind::ThreeParam => {
                    ItemCurve::three_param(a_tilde[i], b_tilde[i], c_tilde[i])
                }
                ModelKind::FourParam => {
                    ItemCurve::four_param(a_tilde[i], b_tilde[i], lam_tilde[i])
                }
            }
            .expect("sampled latents satisfy the curve domains")
        })
        .collect();

    // likelihood term over the batch
    if !batch.is_empty() {
        let rescale = dataset.n_observations() as f64 / batch.len() as f64;
        let observations = dataset.observations();
        let mut lik = 0.0f64;
        for &obs_idx in batch {
            let obs = observations[obs_idx as usize];
            let j = obs.subject as usize;
            let i = obs.item as usize;
            let y = f64::from(obs.response);
            let theta = theta_tilde[j];
            let curve = &curves[i];
            lik += curve.log_prob(obs.response, theta);

            let a = curve.discrimination();
            let s = sigmoid(a * (theta - curve.difficulty()));
            // d ln p / d theta_tilde and the per-latent chains
            let (g_theta, g_raw_a, g_raw_c, g_raw_lam) = match layout.kind {
                ModelKind::OneParam => (y - s, 0.0, 0.0, 0.0),
                ModelKind::TwoParam => {
                    let e = y - s;
                    (a * e, (theta - curve.difficulty()) * e * a, 0.0, 0.0)
                }
                ModelKind::ThreeParam => {
                    let c = c_tilde[i];
                    let p = (c + (1.0 - c) * s).clamp(1e-12, 1.0 - 1e-12);
                    let w = if obs.response == 1 { 1.0 / p } else { -1.0 / (1.0 - p) };
                    let dp_dz = (1.0 - c) * s * (1.0 - s);
                    (
                        w * dp_dz * a,
                        w * dp_dz * (theta - curve.difficulty()) * a,
                        w * (1.0 - s) * c * (1.0 - c),
                        0.0,
                    )
                }
                ModelKind::FourParam => {
                    let lam = lam_tilde[i];
                    let p = (lam * s).clamp(1e-12, 1.0 - 1e-12);
                    let w = if obs.response == 1 { 1.0 / p } else { -1.0 / (1.0 - p) };
                    let dp_dz = lam * s * (1.0 - s);
                    (
                        w * dp_dz * a,
                        w * dp_dz * (theta - curve.difficulty()) * a,
                        0.0,
                        w * s * lam * (1.0 - lam),
                    )
                }
            };
            let g_b = -g_theta;

            grad[layout.theta + j] += rescale * g_theta;
            grad[layout.theta + j_n + j] += rescale * g_theta * eps.theta[j] * theta_scale[j];
            grad[layout.b + i] += rescale * g_b;
            grad[layout.b + i_n + i] += rescale * g_b * eps.b[i] * b_scale[i];
            if let Some(at) = layout.raw_a {
                grad[at + i] += rescale * g_raw_a;
                grad[at + i_n + i] += rescale * g_raw_a * eps.raw_a[i] * a_scale[i];
            }
            if let Some(at) = layout.raw_c {
                grad[at + i] += rescale * g_raw_c;
                grad[at + i_n + i] += rescale * g_raw_c * eps.raw_c[i] * c_scale[i];
            }
            if let Some(at) = layout.raw_lam {
                grad[at + i] += rescale * g_raw_lam;
                grad[at + i_n + i] += rescale * g_raw_lam * eps.raw_lam[i] * lam_scale[i];
            }
        }
        value += rescale * lik;
    }

    // item regularization: closed-form Normal cross-entropy plus entropy
    for i in 0..i_n {
        let (v, gl, gs) = normal_block_term(b_loc[i], b_ls[i], 1.0);
        value += v;
        grad[layout.b + i] += gl;
        grad[layout.b + i_n + i] += gs;
    }
    if let Some(at) = layout.raw_a {
        for i in 0..i_n {
            let (v, gl, gs) = normal_block_term(params[at + i], params[at + i_n + i], priors.raw_disc_sd);
            value += v;
            grad[at + i] += gl;
            grad[at + i_n + i] += gs;
        }
    }
    if let Some(at) = layout.raw_c {
        for i in 0..i_n {
            let (v, gl, gs) = normal_block_term(params[at + i], params[at + i_n + i], priors.raw_guess_sd);
            value += v;
            grad[at + i] += gl;
            grad[at + i_n + i] += gs;
        }
    }
    if let Some(at) = layout.raw_lam {
        for i in 0..i_n {
            let (v, gl, gs) = normal_block_term(params[at + i], params[at + i_n + i], priors.raw_feas_sd);
            value += v;
            grad[at + i] += gl;
            grad[at + i_n + i] += gs;
        }
    }

    // ability regularization
    if let Some(at) = layout.hyper {
        let mu_loc = params[at];
        let mu_ls = params[at + 1];
        let mu_scale = mu_ls.exp();
        let tau_lc = params[at + 2];
        let tau_lr = params[at + 3];
        let conc = tau_lc.exp();
        let rate = tau_lr.exp();

        // sampled log-precision and its exact path derivatives
        let tri = trigamma(conc);
        let log_tau = digamma(conc) - tau_lr + tri.sqrt() * eps.tau;
        let tau = log_tau.exp();
        let dlogtau_dconc = tri + eps.tau * tetragamma(conc) / (2.0 * tri.sqrt());

        // E_q[ln Normal(theta_j | mu, 1/sqrt(tau))] + H(q(theta_j)), tau fixed
        // at its sampled value; expectations over q(theta_j) and q(mu) are
        // closed form.
        let mut dv_dlogtau = 0.0;
        for j in 0..j_n {
            let d = (theta_loc[j] - mu_loc).powi(2)
                + theta_scale[j] * theta_scale[j]
                + mu_scale * mu_scale;
            value += 0.5 * log_tau - 0.5 * tau * d + 0.5 + theta_ls[j];
            dv_dlogtau += 0.5 - 0.5 * tau * d;
            grad[layout.theta + j] += -tau * (theta_loc[j] - mu_loc);
            grad[layout.theta + j_n + j] += -tau * theta_scale[j] * theta_scale[j] + 1.0;
            grad[at] += tau * (theta_loc[j] - mu_loc);
        }
        grad[at + 1] += -(tau * mu_scale * mu_scale) * j_n as f64;

        // mu against its Normal(0,1) prior
        let (v_mu, g_mu_loc, g_mu_ls) = normal_block_term(mu_loc, mu_ls, 1.0);
        value += v_mu;
        grad[at] += g_mu_loc;
        grad[at + 1] += g_mu_ls;

        // tau term: single-sample ln p(tau) - ln q(tau) under Gamma(1,1) prior
        // and Gamma(conc, rate) guide; identically zero at the prior.
        let g_term = -tau - conc * tau_lr + ln_gamma(conc) - (conc - 1.0) * log_tau + rate * tau;
        value += g_term;
        let dg_dlogtau = -tau - (conc - 1.0) + rate * tau;
        let dg_dconc = -tau_lr + digamma(conc) - log_tau;
        let dg_drate = -conc / rate + tau;
        let total_dlogtau = dv_dlogtau + dg_dlogtau;
        grad[at + 2] += conc * (dg_dconc + total_dlogtau * dlogtau_dconc);
        grad[at + 3] += rate * dg_drate - total_dlogtau;
    } else {
        for j in 0..j_n {
            let (v, gl, gs) = normal_block_term(theta_loc[j], theta_ls[j], 1.0);
            value += v;
            grad[layout.theta + j] += gl;
            grad[layout.theta + j_n + j] += gs;
        }
    }

    (value, grad)
}

/// Monte Carlo ELBO estimate with gradients, averaging `mc_samples`
/// independent noise bundles.
pub fn elbo_estimate(
    dataset: &ResponsePatternDataset,
    batch: &[u32],
    posterior: &VariationalPosterior,
    priors: &PriorSpec,
    rng: &mut ChaCha8Rng,
    mc_samples: usize,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Contract("elbo batch must be non-empty".into()));
    }
    if mc_samples == 0 {
        return Err(Error::Contract("mc_samples must be >= 1".into()));
    }
    let layout = posterior.layout();
    let mut value = 0.0;
    let mut grad = vec![0.0f64; layout.n_params];
    for _ in 0..mc_samples {
        let eps = EpsDraws::draw(layout, rng);
        let (v, g) = elbo_core(dataset, batch, layout, &posterior.params, priors, &eps);
        value += v;
        for (acc, gi) in grad.iter_mut().zip(&g) {
            *acc += gi;
        }
    }
    let inv = 1.0 / mc_samples as f64;
    value *= inv;
    for g in &mut grad {
        *g *= inv;
    }
    Ok((value, grad))
}

/// ELBO value and gradient under one noise bundle drawn deterministically
/// from `noise_seed`. Re-evaluating at perturbed parameters with the same
/// seed keeps the random numbers common, which is what finite-difference
/// validation of the gradient paths needs.
pub fn elbo_with_noise(
    dataset: &ResponsePatternDataset,
    batch: &[u32],
    posterior: &VariationalPosterior,
    priors: &PriorSpec,
    noise_seed: u64,
) -> (f64, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let eps = EpsDraws::draw(posterior.layout(), &mut rng);
    elbo_core(dataset, batch, posterior.layout(), &posterior.params, priors, &eps)
}

// ---------------------------------------------------------------------------
// Adam

/// First/second moment accumulators; step count starts at 0.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState { m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }
}

/// One bias-corrected Adam update. Ascent convention: `grads` point uphill on
/// the ELBO and are added, scaled, to the parameters.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    config: &TrainConfig,
) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let b1 = config.beta1;
    let b2 = config.beta2;
    let bias1 = 1.0 - b1.powi(state.t as i32);
    let bias2 = 1.0 - b2.powi(state.t as i32);
    for k in 0..params.len() {
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * grads[k];
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * grads[k] * grads[k];
        let m_hat = state.m[k] / bias1;
        let v_hat = state.v[k] / bias2;
        params[k] += config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
    }
}

// ---------------------------------------------------------------------------
// reports

#[derive(Debug, Clone)]
pub struct PosteriorScales {
    pub ability: Vec<f64>,
    pub difficulty: Vec<f64>,
    /// Unconstrained-space guide scales for the transformed latents.
    pub discrimination: Option<Vec<f64>>,
    pub guessing: Option<Vec<f64>>,
    pub feasibility: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub enum ConfigEcho {
    Svi(TrainConfig),
    Mml(MmlConfig),
}

/// What a fit hands back: point estimates, optional posterior scales, the
/// per-epoch loss trace (negative ELBO, or negative marginal log-likelihood
/// for the EM path), timing and convergence status.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub items: ItemParams,
    pub abilities: AbilityParams,
    pub scales: Option<PosteriorScales>,
    pub trace: Vec<f64>,
    /// Cumulative wall-clock seconds at the end of each traced epoch.
    pub epoch_seconds: Vec<f64>,
    pub seconds: f64,
    pub converged: bool,
    pub config: ConfigEcho,
}

// ---------------------------------------------------------------------------
// training loop

fn smoothed_loss(trace: &[f64]) -> f64 {
    let w = trace.len().min(SMOOTH_WINDOW);
    trace[trace.len() - w..].iter().sum::<f64>() / w as f64
}

/// Run stochastic variational inference to convergence or the epoch budget.
///
/// Deterministic for a fixed (dataset, config): batch shuffles and noise
/// draws come from one seeded generator and all reductions are sequential.
/// Returns the posterior snapshot whose smoothed loss was best (ties go to
/// the later epoch) together with the full report.
pub fn fit_svi(
    dataset: &ResponsePatternDataset,
    config: &TrainConfig,
) -> Result<(VariationalPosterior, FitReport)> {
    config.validate()?;
    if dataset.n_observations() == 0 {
        return Err(Error::Contract("dataset has no observations".into()));
    }
    let start = Instant::now();
    let mut posterior = VariationalPosterior::init(
        config.kind,
        dataset.n_subjects(),
        dataset.n_items(),
        &config.priors,
    );
    let n_params = posterior.layout().n_params;
    let mut adam = AdamState::new(n_params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batch_size = config.batch_size.unwrap_or(dataset.n_observations());

    let mut trace: Vec<f64> = Vec::with_capacity(config.epochs);
    let mut epoch_seconds: Vec<f64> = Vec::with_capacity(config.epochs);
    let mut smoothed: Vec<f64> = Vec::with_capacity(config.epochs);
    let mut best_params = posterior.params.clone();
    let mut best_smoothed = f64::INFINITY;
    let mut converged = false;

    for epoch in 0..config.epochs {
        let batches = split_batches(dataset, batch_size, &mut rng);
        let mut epoch_loss = 0.0;
        for batch in batches.iter() {
            let (value, grads) = elbo_estimate(
                dataset,
                batch,
                &posterior,
                &config.priors,
                &mut rng,
                config.mc_samples,
            )?;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, trace });
            }
            adam_step(&mut posterior.params, &grads, &mut adam, config);
            epoch_loss += -value;
        }
        epoch_loss /= batches.n_batches() as f64;
        // log scales past +-500 would take exp() out of the positive finite
        // range, and no sane location gets anywhere near that either
        if !posterior.params.iter().all(|p| p.is_finite() && p.abs() <= 500.0) {
            return Err(Error::Divergence { epoch, trace });
        }
        trace.push(epoch_loss);
        epoch_seconds.push(start.elapsed().as_secs_f64());
        let sm = smoothed_loss(&trace);
        smoothed.push(sm);
        if sm <= best_smoothed {
            best_smoothed = sm;
            best_params.copy_from_slice(&posterior.params);
        }
        if trace.len() > SMOOTH_WINDOW {
            let prev = smoothed[smoothed.len() - 1 - SMOOTH_WINDOW];
            if prev - sm < config.rel_tol * prev.abs() {
                converged = true;
                break;
            }
        }
    }

    posterior.params.copy_from_slice(&best_params);
    debug_assert!(posterior.ability_scales().iter().all(|s| *s > 0.0));
    let report = FitReport {
        items: posterior.point_items()?,
        abilities: posterior.point_abilities()?,
        scales: Some(posterior.posterior_scales()),
        trace,
        epoch_seconds,
        seconds: start.elapsed().as_secs_f64(),
        converged,
        config: ConfigEcho::Svi(config.clone()),
    };
    Ok((posterior, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::build;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;

    fn rows(spec: &[(&str, &[(&str, u8)])]) -> Vec<(String, Vec<(String, u8)>)> {
        spec.iter()
            .map(|(s, items)| {
                (s.to_string(), items.iter().map(|(i, r)| (i.to_string(), *r)).collect())
            })
            .collect()
    }

    fn small_dataset() -> ResponsePatternDataset {
        build(rows(&[
            ("s0", &[("q0", 1), ("q1", 0)]),
            ("s1", &[("q0", 0), ("q1", 1)]),
            ("s2", &[("q0", 1)]),
        ]))
        .unwrap()
    }

    #[test]
    fn transforms_round_trip() {
        assert_eq!(constrain(ItemLatent::Discrimination, 0.0), 1.0);
        assert_eq!(constrain(ItemLatent::Guessing, 0.0), 0.5);
        assert_eq!(constrain(ItemLatent::Feasibility, 0.0), 0.5);
        let mut rng = StdRng::seed_from_u64(5);
        for latent in [ItemLatent::Discrimination, ItemLatent::Guessing, ItemLatent::Feasibility] {
            for _ in 0..200 {
                let raw = rng.gen_range(-4.0..4.0);
                let back = unconstrain(latent, constrain(latent, raw));
                assert_relative_eq!(back, raw, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn reparam_is_affine_in_eps() {
        assert_eq!(reparam_sample_normal(2.0, 1.0, 0.0), 2.0);
        assert_eq!(reparam_sample_normal(0.0, 3.0, 1.0), 3.0);
        // derivative in scale equals eps
        let eps = -0.73;
        let h = 1e-6;
        let d = (reparam_sample_normal(0.4, 1.2 + h, eps)
            - reparam_sample_normal(0.4, 1.2 - h, eps))
            / (2.0 * h);
        assert_relative_eq!(d, eps, epsilon = 1e-9);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let config = TrainConfig::new(ModelKind::OneParam, 0);
        let mut params = vec![0.5, -1.5];
        let mut state = AdamState::new(2);
        adam_step(&mut params, &[0.0, 0.0], &mut state, &config);
        assert_eq!(params, vec![0.5, -1.5]);
        // preloaded moments decay toward zero under a zero gradient
        state.m = vec![0.2, -0.1];
        state.v = vec![0.3, 0.4];
        adam_step(&mut params, &[0.0, 0.0], &mut state, &config);
        assert!(state.m[0].abs() < 0.2 && state.v[0] < 0.3);
        assert_eq!(state.t, 2);
    }

    #[test]
    fn adam_single_step_matches_hand_formula() {
        let config = TrainConfig::new(ModelKind::OneParam, 0);
        let mut params = vec![1.0];
        let mut state = AdamState::new(1);
        adam_step(&mut params, &[0.3], &mut state, &config);
        // lr * g / (|g| + eps) after bias correction cancels exactly
        assert_relative_eq!(params[0] - 1.0, 0.09999999666666678, max_relative = 1e-12);
    }

    #[test]
    fn adam_constant_gradient_approaches_learning_rate_steps() {
        let config = TrainConfig::new(ModelKind::OneParam, 0);
        let mut params = vec![0.0];
        let mut state = AdamState::new(1);
        let mut last = 0.0;
        for _ in 0..2000 {
            last = params[0];
            adam_step(&mut params, &[-0.42], &mut state, &config);
        }
        let step = (params[0] - last).abs();
        assert_relative_eq!(step, config.learning_rate, max_relative = 1e-2);
        assert!(params[0] < 0.0, "moves in the gradient direction");
    }

    #[test]
    fn regularization_vanishes_at_the_prior_without_hierarchy() {
        let ds = small_dataset();
        for kind in
            [ModelKind::OneParam, ModelKind::TwoParam, ModelKind::ThreeParam, ModelKind::FourParam]
        {
            let priors = PriorSpec { hierarchical: false, ..PriorSpec::default() };
            let post = VariationalPosterior::init(kind, ds.n_subjects(), ds.n_items(), &priors);
            let eps = EpsDraws::zeros(post.layout());
            let (value, _) = elbo_core(&ds, &[], post.layout(), &post.params, &priors, &eps);
            assert!(value.abs() < 1e-12, "{kind:?}: {value}");
        }
    }

    #[test]
    fn hierarchical_terms_match_frozen_values_at_the_prior() {
        // J=1, I=1, guide at the prior, likelihood omitted. The item terms are
        // zero; what remains is 0.5*log_tau - tau + 0.5 with
        // log_tau = digamma(1) + sqrt(trigamma(1)) * eps_tau.
        let ds = build(rows(&[("s", &[("q", 1)])])).unwrap();
        let priors = PriorSpec::default();
        let post =
            VariationalPosterior::init(ModelKind::OneParam, ds.n_subjects(), ds.n_items(), &priors);
        let mut eps = EpsDraws::zeros(post.layout());
        let (v0, _) = elbo_core(&ds, &[], post.layout(), &post.params, &priors, &eps);
        assert_relative_eq!(v0, -0.3500673160176516, max_relative = 1e-12);
        eps.tau = 0.7;
        let (v1, _) = elbo_core(&ds, &[], post.layout(), &post.params, &priors, &eps);
        assert_relative_eq!(v1, -0.7176272628211328, max_relative = 1e-12);
    }

    #[test]
    fn likelihood_term_agrees_with_model_kernels() {
        let ds = build(rows(&[("s", &[("q", 1)])])).unwrap();
        let priors = PriorSpec { hierarchical: false, ..PriorSpec::default() };
        let mut post =
            VariationalPosterior::init(ModelKind::ThreeParam, ds.n_subjects(), ds.n_items(), &priors);
        // move everything off the prior so the test is not trivially zero
        for (k, p) in post.params.iter_mut().enumerate() {
            *p += 0.1 + 0.07 * k as f64;
        }
        let eps = EpsDraws::zeros(post.layout());
        let (with_lik, _) =
            elbo_core(&ds, &[0], post.layout(), &post.params, &priors, &eps);
        let (without, _) = elbo_core(&ds, &[], post.layout(), &post.params, &priors, &eps);
        let curve = ItemCurve::three_param(
            post.discrimination_locs().unwrap()[0],
            post.difficulty_locs()[0],
            post.guessing_locs().unwrap()[0],
        )
        .unwrap();
        let want = curve.log_prob(1, post.ability_locs()[0]);
        assert_relative_eq!(with_lik - without, want, max_relative = 1e-12);
    }

    fn fd_dataset() -> ResponsePatternDataset {
        build(rows(&[
            ("s0", &[("q0", 1), ("q1", 0)]),
            ("s1", &[("q0", 0), ("q1", 1)]),
            ("s2", &[("q1", 1)]),
        ]))
        .unwrap()
    }

    fn check_gradients(kind: ModelKind, hierarchical: bool, seed: u64) {
        let ds = fd_dataset();
        let priors = PriorSpec { hierarchical, ..PriorSpec::default() };
        let mut post = VariationalPosterior::init(kind, ds.n_subjects(), ds.n_items(), &priors);
        let mut rng = StdRng::seed_from_u64(seed);
        for p in &mut post.params {
            *p += rng.gen_range(-0.4..0.4);
        }
        let layout = post.layout().clone();
        let mut eps = EpsDraws::zeros(&layout);
        for e in eps
            .theta
            .iter_mut()
            .chain(eps.b.iter_mut())
            .chain(eps.raw_a.iter_mut())
            .chain(eps.raw_c.iter_mut())
            .chain(eps.raw_lam.iter_mut())
        {
            *e = rng.sample(StandardNormal);
        }
        eps.tau = rng.sample(StandardNormal);

        let batch: Vec<u32> = (0..ds.n_observations() as u32).collect();
        let (_, analytic) = elbo_core(&ds, &batch, &layout, &post.params, &priors, &eps);
        for k in 0..post.params.len() {
            let h = 1e-5 * post.params[k].abs().max(1.0);
            let mut plus = post.params.clone();
            plus[k] += h;
            let mut minus = post.params.clone();
            minus[k] -= h;
            let (vp, _) = elbo_core(&ds, &batch, &layout, &plus, &priors, &eps);
            let (vm, _) = elbo_core(&ds, &batch, &layout, &minus, &priors, &eps);
            let fd = (vp - vm) / (2.0 * h);
            let tol = 1e-4 * analytic[k].abs().max(0.1);
            assert!(
                (fd - analytic[k]).abs() <= tol,
                "{kind:?} hier={hierarchical} param {k}: analytic {} vs fd {}",
                analytic[k],
                fd
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_1pl() {
        check_gradients(ModelKind::OneParam, false, 11);
        check_gradients(ModelKind::OneParam, true, 12);
    }

    #[test]
    fn gradients_match_finite_differences_2pl() {
        check_gradients(ModelKind::TwoParam, false, 13);
    }

    #[test]
    fn gradients_match_finite_differences_3pl() {
        check_gradients(ModelKind::ThreeParam, false, 14);
        check_gradients(ModelKind::ThreeParam, true, 15);
    }

    #[test]
    fn gradients_match_finite_differences_4pl() {
        check_gradients(ModelKind::FourParam, true, 16);
    }

    #[test]
    fn fit_is_deterministic_for_a_fixed_seed() {
        let ds = small_dataset();
        let mut config = TrainConfig::new(ModelKind::TwoParam, 42);
        config.epochs = 25;
        let (post_a, report_a) = fit_svi(&ds, &config).unwrap();
        let (post_b, report_b) = fit_svi(&ds, &config).unwrap();
        assert_eq!(report_a.trace, report_b.trace);
        assert_eq!(post_a.params, post_b.params);
        assert_eq!(report_a.converged, report_b.converged);
    }

    #[test]
    fn all_correct_responses_pull_difficulty_down() {
        let spec: Vec<(String, Vec<(String, u8)>)> = (0..25)
            .map(|j| {
                (format!("s{j}"), (0..4).map(|i| (format!("q{i}"), 1u8)).collect())
            })
            .collect();
        let ds = build(spec).unwrap();
        let mut config = TrainConfig::new(ModelKind::OneParam, 3);
        config.epochs = 150;
        config.priors.hierarchical = false;
        let (post, report) = fit_svi(&ds, &config).unwrap();
        assert!(
            post.difficulty_locs().iter().all(|b| *b < 0.0),
            "difficulties {:?}",
            post.difficulty_locs()
        );
        assert!(report.trace.len() <= 150);
    }

    #[test]
    fn absurd_learning_rate_reports_divergence() {
        let ds = small_dataset();
        let mut config = TrainConfig::new(ModelKind::OneParam, 1);
        config.epochs = 50;
        config.learning_rate = 1e12;
        match fit_svi(&ds, &config) {
            Err(Error::Divergence { epoch, trace }) => {
                assert!(epoch < 50);
                assert!(trace.len() <= epoch + 1);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn report_carries_positive_scales_and_bounded_trace() {
        let ds = small_dataset();
        let mut config = TrainConfig::new(ModelKind::FourParam, 8);
        config.epochs = 40;
        let (post, report) = fit_svi(&ds, &config).unwrap();
        assert!(report.trace.len() <= 40);
        assert!(!report.trace.is_empty());
        assert!(report.seconds >= 0.0);
        let scales = report.scales.as_ref().unwrap();
        assert!(scales.ability.iter().all(|s| *s > 0.0));
        assert!(scales.difficulty.iter().all(|s| *s > 0.0));
        assert!(scales.feasibility.as_ref().unwrap().iter().all(|s| *s > 0.0));
        assert_eq!(post.point_items().unwrap().kind(), ModelKind::FourParam);
    }
}
