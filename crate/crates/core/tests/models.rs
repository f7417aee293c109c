use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trackscreen_core::detect::copula::{copula_fit, CopulaModel};
use trackscreen_core::detect::gbt::{BoostedResidualModel, GbtParams};
use trackscreen_core::detect::iforest::IsolationForestModel;

fn matrix(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

fn reload<T: serde::Serialize + serde::de::DeserializeOwned>(model: &T) -> T {
    serde_json::from_str(&serde_json::to_string(model).unwrap()).unwrap()
}

#[test]
fn isolation_forest_reloads_with_identical_scores() {
    let data = matrix(500, 5, 1);
    let model = IsolationForestModel::fit(&data, 5, 50, 9).unwrap();
    let back = reload(&model);
    assert_eq!(back, model);
    assert_eq!(back.format_version, 1);
    assert_eq!(back.score_all(&data), model.score_all(&data));
}

#[test]
fn boosted_model_reloads_with_identical_predictions() {
    let data = matrix(400, 3, 2);
    let targets: Vec<f64> = data.chunks(3).map(|r| 10.0 - 0.05 * r[0] + 0.02 * r[1] * r[2]).collect();
    let params = GbtParams { n_trees: 20, max_depth: 3, learning_rate: 0.1 };
    let model = BoostedResidualModel::fit(&data, 3, &targets, params, 0.95).unwrap();
    let back = reload(&model);
    assert_eq!(back.format_version, 1);
    for row in data.chunks(3) {
        assert_eq!(back.predict(row), model.predict(row));
    }
}

#[test]
fn copula_model_reloads_with_identical_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<[f64; 3]> = (0..300)
        .map(|_| {
            let t: f64 = rng.gen_range(9.8..11.5);
            [t, rng.gen_range(-2.0..2.0), 0.12 + 0.02 * (t - 10.0) + rng.gen_range(0.0..0.03)]
        })
        .collect();
    let (model, _) = copula_fit(&rows, 0.05).unwrap();
    let back: CopulaModel = reload(&model);
    assert_eq!(back.format_version, 1);
    for r in &rows {
        assert_eq!(back.log_density(r), model.log_density(r));
    }
}
