//! Sparse response storage, synthetic data generation, and batch iteration.
//!
//! Observations live in coordinate form (subject, item, response) because the
//! target scale (10^5 items, sparse exposure) makes a dense J x I matrix
//! wasteful. Index assignment is deterministic: subjects in row order, items in
//! first-appearance order across rows.
//!
//! All randomness flows through ChaCha8, seeded from a u64. `simulate` splits
//! its generator into two streams: stream 0 draws the true parameters, stream 1
//! draws missingness and responses, in a fixed row-major cell order.

use crate::error::Error;
use crate::models::{AbilityParams, ItemCurve, ItemParams, ModelKind};
use crate::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use std::collections::HashMap;

/// One observed cell of the response matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub subject: u32,
    pub item: u32,
    /// 0 or 1.
    pub response: u8,
}

/// Immutable response dataset with id <-> index bijections.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponsePatternDataset {
    subject_ids: Vec<String>,
    item_ids: Vec<String>,
    observations: Vec<Observation>,
    subject_lookup: HashMap<String, u32>,
    item_lookup: HashMap<String, u32>,
}

impl ResponsePatternDataset {
    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn n_observations(&self) -> usize {
        self.observations.len()
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn subject_index(&self, id: &str) -> Option<usize> {
        self.subject_lookup.get(id).map(|&i| i as usize)
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.item_lookup.get(id).map(|&i| i as usize)
    }

    /// Observation indices grouped by subject, in subject order.
    /// Returned as a CSR-style (offsets, entries) pair over `observations()`.
    pub(crate) fn by_subject(&self) -> (Vec<usize>, Vec<u32>) {
        let mut counts = vec![0usize; self.n_subjects() + 1];
        for obs in &self.observations {
            counts[obs.subject as usize + 1] += 1;
        }
        for j in 0..self.n_subjects() {
            counts[j + 1] += counts[j];
        }
        let mut entries = vec![0u32; self.observations.len()];
        let mut cursor = counts.clone();
        for (idx, obs) in self.observations.iter().enumerate() {
            let slot = &mut cursor[obs.subject as usize];
            entries[*slot] = idx as u32;
            *slot += 1;
        }
        (counts, entries)
    }
}

/// Assemble a dataset from rows of (subject id, ordered item-id -> response).
pub fn build(rows: Vec<(String, Vec<(String, u8)>)>) -> Result<ResponsePatternDataset> {
    let mut subject_ids = Vec::with_capacity(rows.len());
    let mut subject_lookup = HashMap::with_capacity(rows.len());
    let mut item_ids = Vec::new();
    let mut item_lookup: HashMap<String, u32> = HashMap::new();
    let mut observations = Vec::new();

    for (subject_id, responses) in rows {
        let j = subject_ids.len() as u32;
        if subject_lookup.insert(subject_id.clone(), j).is_some() {
            return Err(Error::Format(format!("duplicate subject id '{subject_id}'")));
        }
        subject_ids.push(subject_id);
        let mut seen_in_row: HashMap<u32, ()> = HashMap::new();
        for (item_id, response) in responses {
            if response > 1 {
                return Err(Error::Format(format!(
                    "response for item '{item_id}' must be 0 or 1, got {response}"
                )));
            }
            let i = match item_lookup.get(&item_id) {
                Some(&i) => i,
                None => {
                    let i = item_ids.len() as u32;
                    item_lookup.insert(item_id.clone(), i);
                    item_ids.push(item_id.clone());
                    i
                }
            };
            if seen_in_row.insert(i, ()).is_some() {
                return Err(Error::Format(format!(
                    "item '{item_id}' appears twice for subject '{}'",
                    subject_ids.last().expect("row pushed above")
                )));
            }
            observations.push(Observation { subject: j, item: i, response });
        }
    }

    Ok(ResponsePatternDataset { subject_ids, item_ids, observations, subject_lookup, item_lookup })
}

/// Configuration for synthetic response generation.
///
/// True parameters are drawn as: theta ~ Normal(0,1), b ~ Normal(0,1),
/// a ~ LogNormal(0, 0.25), c ~ fixed value or Uniform(0, 0.3),
/// lambda ~ Uniform(0.7, 1).
#[derive(Debug, Clone)]
pub struct SimulationSpec {
    pub kind: ModelKind,
    pub subjects: usize,
    pub items: usize,
    /// Probability each cell is unobserved, in [0, 1).
    pub missing_rate: f64,
    pub seed: u64,
    /// 3PL only: hold guessing at this value instead of drawing it.
    pub fixed_guessing: Option<f64>,
}

impl SimulationSpec {
    pub fn new(kind: ModelKind, subjects: usize, items: usize, seed: u64) -> Self {
        SimulationSpec { kind, subjects, items, missing_rate: 0.0, seed, fixed_guessing: None }
    }

    fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.items == 0 {
            return Err(Error::Contract(
                "simulation needs at least one subject and one item".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Contract(format!(
                "missing_rate must lie in [0, 1), got {}",
                self.missing_rate
            )));
        }
        if let Some(c) = self.fixed_guessing {
            if !(0.0..1.0).contains(&c) {
                return Err(Error::Contract(format!(
                    "fixed_guessing must lie in [0, 1), got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// Draw true parameters and a response dataset; returns the truth for scoring.
pub fn simulate(
    spec: &SimulationSpec,
) -> Result<(ResponsePatternDataset, ItemParams, AbilityParams)> {
    spec.validate()?;
    let mut param_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    param_rng.set_stream(0);

    let theta: Vec<f64> =
        (0..spec.subjects).map(|_| param_rng.sample(StandardNormal)).collect();
    let b: Vec<f64> = (0..spec.items).map(|_| param_rng.sample(StandardNormal)).collect();
    let items = match spec.kind {
        ModelKind::OneParam => ItemParams::one_param(b)?,
        ModelKind::TwoParam => {
            let a = draw_discrimination(&mut param_rng, spec.items);
            ItemParams::two_param(b, a)?
        }
        ModelKind::ThreeParam => {
            let a = draw_discrimination(&mut param_rng, spec.items);
            let c: Vec<f64> = (0..spec.items)
                .map(|_| spec.fixed_guessing.unwrap_or_else(|| param_rng.gen_range(0.0..0.3)))
                .collect();
            ItemParams::three_param(b, a, c)?
        }
        ModelKind::FourParam => {
            let a = draw_discrimination(&mut param_rng, spec.items);
            let lam: Vec<f64> =
                (0..spec.items).map(|_| param_rng.gen_range(0.7..1.0)).collect();
            ItemParams::four_param(b, a, lam)?
        }
    };
    let abilities = AbilityParams::new(theta)?;
    let dataset = simulate_with(&items, &abilities, spec.missing_rate, spec.seed)?;
    Ok((dataset, items, abilities))
}

fn draw_discrimination(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let log_normal = LogNormal::new(0.0, 0.25).expect("fixed shape is valid");
    (0..n).map(|_| log_normal.sample(rng)).collect()
}

/// Generate responses for explicitly supplied parameters.
///
/// Cells are visited row-major; with missing_rate > 0 each cell first draws a
/// keep/drop uniform, then (if kept) its Bernoulli response.
pub fn simulate_with(
    items: &ItemParams,
    abilities: &AbilityParams,
    missing_rate: f64,
    seed: u64,
) -> Result<ResponsePatternDataset> {
    if !(0.0..1.0).contains(&missing_rate) {
        return Err(Error::Contract(format!(
            "missing_rate must lie in [0, 1), got {missing_rate}"
        )));
    }
    let mut cell_rng = ChaCha8Rng::seed_from_u64(seed);
    cell_rng.set_stream(1);

    let n_subjects = abilities.len();
    let n_items = items.len();
    let curves: Vec<ItemCurve> = (0..n_items).map(|i| items.curve(i)).collect();
    let subject_ids: Vec<String> = (0..n_subjects).map(|j| format!("s{j}")).collect();
    let item_ids: Vec<String> = (0..n_items).map(|i| format!("q{i}")).collect();

    let mut observations = Vec::with_capacity(n_subjects * n_items);
    for (j, &theta) in abilities.thetas().iter().enumerate() {
        for (i, curve) in curves.iter().enumerate() {
            if missing_rate > 0.0 && cell_rng.gen_range(0.0..1.0) < missing_rate {
                continue;
            }
            let response = u8::from(cell_rng.gen_bool(curve.prob(theta)));
            observations.push(Observation { subject: j as u32, item: i as u32, response });
        }
    }

    let subject_lookup =
        subject_ids.iter().enumerate().map(|(j, id)| (id.clone(), j as u32)).collect();
    let item_lookup =
        item_ids.iter().enumerate().map(|(i, id)| (id.clone(), i as u32)).collect();
    Ok(ResponsePatternDataset { subject_ids, item_ids, observations, subject_lookup, item_lookup })
}

/// One epoch's shuffled partition of observation indices.
#[derive(Debug, Clone)]
pub struct ObservationBatches {
    order: Vec<u32>,
    batch_size: usize,
}

impl ObservationBatches {
    pub fn iter(&self) -> impl Iterator<Item = &[u32]> {
        self.order.chunks(self.batch_size)
    }

    pub fn n_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

/// Shuffle all observation indices and cut them into consecutive chunks.
/// Every observation appears exactly once; the last chunk may be short.
pub fn split_batches(
    dataset: &ResponsePatternDataset,
    batch_size: usize,
    rng: &mut impl Rng,
) -> ObservationBatches {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<u32> = (0..dataset.n_observations() as u32).collect();
    order.shuffle(rng);
    ObservationBatches { order, batch_size }
}
