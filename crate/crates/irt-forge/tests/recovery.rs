//! Statistical behavior on synthetic data: parameter recovery, estimator
//! stability under quadrature density, training-curve shape, and MAP
//! optimality.

use irt_forge::dataset::{simulate, SimulationSpec};
use irt_forge::{fit_mml, fit_svi, map_ability, MmlConfig, ModelKind, TrainConfig};

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[test]
fn svi_recovers_difficulties_and_abilities_on_a_large_instance() {
    let spec = SimulationSpec::new(ModelKind::OneParam, 1000, 100, 99);
    let (dataset, items, abilities) = simulate(&spec).unwrap();
    let config = TrainConfig::new(ModelKind::OneParam, 99);
    let (_, report) = fit_svi(&dataset, &config).unwrap();

    let b_corr = pearson(items.difficulty(), report.items.difficulty());
    let theta_corr = pearson(abilities.thetas(), report.abilities.thetas());
    assert!(b_corr >= 0.9, "difficulty correlation {b_corr}");
    assert!(theta_corr >= 0.85, "ability correlation {theta_corr}");
}

#[test]
fn difficulty_estimates_are_insensitive_to_quadrature_density() {
    let spec = SimulationSpec::new(ModelKind::OneParam, 500, 20, 7);
    let (dataset, _, _) = simulate(&spec).unwrap();
    let coarse = MmlConfig { n_quad: 41, ..MmlConfig::default() };
    let fine = MmlConfig { n_quad: 81, ..MmlConfig::default() };
    let (items_41, _) = fit_mml(&dataset, ModelKind::OneParam, &coarse).unwrap();
    let (items_81, _) = fit_mml(&dataset, ModelKind::OneParam, &fine).unwrap();

    let n = items_41.len() as f64;
    let rms = (items_41
        .difficulty()
        .iter()
        .zip(items_81.difficulty())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
        .sqrt();
    assert!(rms < 1e-3, "doubling the node count moved difficulties by RMS {rms}");
}

#[test]
fn smoothed_loss_is_nonincreasing_after_warmup() {
    let spec = SimulationSpec::new(ModelKind::OneParam, 500, 50, 13);
    let (dataset, _, _) = simulate(&spec).unwrap();
    let mut config = TrainConfig::new(ModelKind::OneParam, 13);
    config.epochs = 200;
    config.rel_tol = 1e-15; // run down to the noise floor; this test is about the curve
    let (_, report) = fit_svi(&dataset, &config).unwrap();
    assert!(report.trace.len() >= 30, "trace too short ({}) to judge", report.trace.len());

    // 10-epoch moving average, same smoothing the convergence rule uses
    let window = 10;
    let smoothed: Vec<f64> = (0..report.trace.len())
        .map(|k| {
            let lo = k.saturating_sub(window - 1);
            let slice = &report.trace[lo..=k];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect();
    let slack = 0.01 * smoothed.last().unwrap().abs();
    for k in 20..smoothed.len() - 1 {
        assert!(
            smoothed[k + 1] <= smoothed[k] + slack,
            "smoothed loss rose from {} to {} at epoch {}",
            smoothed[k],
            smoothed[k + 1],
            k + 1
        );
    }
}

#[test]
fn map_ability_finds_the_global_posterior_mode() {
    for kind in [ModelKind::OneParam, ModelKind::TwoParam] {
        let spec = SimulationSpec::new(kind, 40, 12, 17);
        let (dataset, items, _) = simulate(&spec).unwrap();
        let maps = map_ability(&dataset, &items).unwrap();

        // subjects' observations grouped by hand, straight from the flat list
        let mut per_subject: Vec<Vec<(usize, u8)>> = vec![Vec::new(); dataset.n_subjects()];
        for obs in dataset.observations() {
            per_subject[obs.subject as usize].push((obs.item as usize, obs.response));
        }
        let objective = |j: usize, theta: f64| -> f64 {
            let data: f64 = per_subject[j]
                .iter()
                .map(|&(i, y)| items.curve(i).log_prob(y, theta))
                .sum();
            data - 0.5 * theta * theta
        };

        // a dense scan over the plausible range must not beat the Newton solution
        let step = 1e-3;
        for j in 0..dataset.n_subjects() {
            let mut best_grid = f64::NEG_INFINITY;
            let mut best_theta = 0.0;
            let mut t = -6.0;
            while t <= 6.0 {
                let v = objective(j, t);
                if v > best_grid {
                    best_grid = v;
                    best_theta = t;
                }
                t += step;
            }
            let found = maps.thetas()[j];
            assert!(
                (found - best_theta).abs() <= 2.0 * step,
                "subject {j}: map {found} vs grid argmax {best_theta}"
            );
            assert!(
                objective(j, found) >= best_grid - 1e-9,
                "subject {j}: grid value beat the map solution"
            );
        }
    }
}
