//! Gauss-Hermite quadrature rescaled against the Normal(0,1) ability prior.
//!
//! Nodes and weights come from Newton iteration on the orthonormal Hermite
//! recurrence (largest root inward, mirrored by symmetry), then the physicists'
//! rule (weight e^{-x^2}) is rescaled: node x sqrt(2), weight / sqrt(pi),
//! weights renormalized to sum exactly 1.

use crate::error::Error;
use crate::Result;

/// pi^(-1/4), seed value of the orthonormal Hermite recurrence.
const PIM4: f64 = 0.7511255444649425;
const MAX_NEWTON: usize = 100;
const NEWTON_EPS: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    /// Validating constructor; mainly useful for tests with hand-built rules.
    pub fn new(nodes: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if nodes.is_empty() || nodes.len() != weights.len() {
            return Err(Error::Contract(format!(
                "rule needs matching nonempty nodes/weights, got {}/{}",
                nodes.len(),
                weights.len()
            )));
        }
        if nodes.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Contract("nodes must be strictly increasing".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::Contract("weights must be positive and finite".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Contract(format!("weights must sum to 1, got {total}")));
        }
        Ok(QuadratureRule { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Build an n-point rule for integrals against the standard Normal density.
pub fn make_quadrature(n_points: usize) -> Result<QuadratureRule> {
    if n_points < 3 {
        return Err(Error::Contract(format!(
            "quadrature needs at least 3 points, got {n_points}"
        )));
    }
    let n = n_points;
    let mut nodes = vec![0.0f64; n];
    let mut weights = vec![0.0f64; n];
    let mut upper: Vec<f64> = Vec::with_capacity((n + 1) / 2);

    for i in 0..(n + 1) / 2 {
        // initial guesses march inward from the largest root
        let mut z = match i {
            0 => {
                let an = (2 * n + 1) as f64;
                an.sqrt() - 1.85575 * an.powf(-1.0 / 6.0)
            }
            1 => upper[0] - 1.14 * (n as f64).powf(0.426) / upper[0],
            2 => 1.86 * upper[1] - 0.86 * upper[0],
            3 => 1.91 * upper[2] - 0.91 * upper[1],
            _ => 2.0 * upper[i - 1] - upper[i - 2],
        };
        let mut pp = 0.0;
        for iter in 0..=MAX_NEWTON {
            assert!(iter < MAX_NEWTON, "Hermite Newton iteration failed to settle");
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= NEWTON_EPS {
                break;
            }
        }
        if n % 2 == 1 && i == (n - 1) / 2 {
            z = 0.0; // middle root is exactly zero by symmetry
        }
        upper.push(z);
        let w = 2.0 / (pp * pp);
        nodes[n - 1 - i] = z;
        nodes[i] = -z;
        weights[n - 1 - i] = w;
        weights[i] = w;
    }

    // rescale for the Normal(0,1) measure and renormalize
    let sqrt2 = std::f64::consts::SQRT_2;
    for x in &mut nodes {
        *x *= sqrt2;
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    QuadratureRule::new(nodes, weights)
}
