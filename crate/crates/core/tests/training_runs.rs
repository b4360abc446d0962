use opo_core::datagen::generate_dataset;
use opo_core::rng::seeded;
use opo_core::solvers::{Neighborhood, ShortestPath};
use opo_core::training::{loss_dfl, sample_pi, train_opo, ExperimentConfig, LossMode, PiMode, Runtime, WeightMode};
use rand::Rng;

/// Every simple path from tile 0 to the last tile with king moves, as tile lists.
fn all_paths(k: usize) -> Vec<Vec<usize>> {
    fn go(path: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
        let node = *path.last().unwrap();
        if node == k * k - 1 {
            out.push(path.clone());
            return;
        }
        let (r, c) = ((node / k) as i64, (node % k) as i64);
        for dr in -1..=1i64 {
            for dc in -1..=1i64 {
                let (nr, nc) = (r + dr, c + dc);
                if (dr, dc) == (0, 0) || nr < 0 || nc < 0 || nr >= k as i64 || nc >= k as i64 {
                    continue;
                }
                let next = (nr * k as i64 + nc) as usize;
                if !path.contains(&next) {
                    path.push(next);
                    go(path, k, out);
                    path.pop();
                }
            }
        }
    }
    let mut out = Vec::new();
    go(&mut vec![0], k, &mut out);
    out
}

fn cost(theta: &[f32], path: &[usize]) -> f64 {
    path.iter().map(|&i| theta[i] as f64).sum()
}

#[test]
fn dfl_loss_matches_enumerated_regret() {
    let cfg = ExperimentConfig {
        k: 3,
        h: 4,
        train_size: 12,
        val_size: 1,
        test_size: 1,
        ..Default::default()
    };
    let data = generate_dataset(&cfg.dataset_config()).unwrap();
    let paths = all_paths(3);
    let mut rng = seeded(77);
    let thetas: Vec<Vec<f32>> = data.train.iter().map(|i| i.theta.data().to_vec()).collect();
    let preds: Vec<Vec<f32>> = thetas
        .iter()
        .map(|_| (0..9).map(|_| rng.random_range(0.5f32..9.5)).collect())
        .collect();

    let mut expected = 0.0;
    for (theta, pred) in thetas.iter().zip(&preds) {
        let chosen = paths
            .iter()
            .min_by(|a, b| cost(pred, a).total_cmp(&cost(pred, b)))
            .unwrap();
        let best = paths.iter().map(|p| cost(theta, p)).fold(f64::INFINITY, f64::min);
        expected += cost(theta, chosen) - best;
    }
    expected /= thetas.len() as f64;

    let got = loss_dfl(&ShortestPath::new(3, Neighborhood::Eight), &thetas, &preds).unwrap();
    assert!((got - expected).abs() < 1e-9, "loss {got} vs enumeration {expected}");
    assert!(expected > 0.0, "random predictions should incur some regret");
}

#[test]
fn learnt_pi_changes_the_acquisition_decision() {
    let cfg = ExperimentConfig {
        k: 4,
        h: 4,
        d_model: 16,
        blocks: 1,
        heads: 2,
        batch_size: 8,
        max_epochs: 3,
        patience: 3,
        lr_pi: 0.05,
        loss: LossMode::Dfl,
        pi_mode: PiMode::Learnt,
        w_mode: WeightMode::Joint,
        train_size: 48,
        val_size: 8,
        test_size: 8,
        ..Default::default()
    };
    let data = generate_dataset(&cfg.dataset_config()).unwrap();
    let o = train_opo(&cfg, &data, &sample_pi(&cfg, 0), None, &Runtime::default()).unwrap();
    assert_eq!(o.decisions.len(), o.metrics.epochs.len());
    assert!(o.decision_changes >= 1, "decision never changed");
}
