//! Final model aggregation, validation-ordered client selection and the
//! per-round summary statistics.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Mlp, WeightVector};
use crate::seed;

/// Sample-weighted average `Σ N_i w_i / Σ N_i` over `subset`, accumulated in
/// ascending client order so the result does not depend on subset order.
/// Falls back to the unweighted mean when every selected client is empty.
pub fn final_average(weights: &[WeightVector], sizes: &[usize], subset: &[usize]) -> Result<WeightVector> {
    if subset.is_empty() {
        return Err(Error::Empty("aggregation subset"));
    }
    if weights.len() != sizes.len() {
        return Err(Error::mismatch("client sizes", weights.len(), sizes.len()));
    }
    let mut order = subset.to_vec();
    order.sort_unstable();
    if let Some(&bad) = order.iter().find(|&&i| i >= weights.len()) {
        return Err(Error::ClientOutOfRange {
            index: bad,
            clients: weights.len(),
        });
    }
    let total: usize = order.iter().map(|&i| sizes[i]).sum();
    if total == 0 {
        return WeightVector::mean(order.iter().map(|&i| &weights[i]));
    }
    let d = weights[order[0]].len();
    let mut acc = WeightVector::zeros(d);
    for &i in &order {
        if weights[i].len() != d {
            return Err(Error::mismatch("weight length", d, weights[i].len()));
        }
        acc.scaled_add(sizes[i] as f64 / total as f64, &weights[i]);
    }
    Ok(acc)
}

/// `V = (1/d) Σ_j sqrt(Σ_i (w̄_j − w_ij)²)` around the unweighted mean `w̄`.
pub fn inter_model_variance(weights: &[WeightVector]) -> Result<f64> {
    if weights.len() < 2 {
        return Err(Error::TooFewClients {
            needed: 2,
            found: weights.len(),
        });
    }
    let mean = WeightVector::mean(weights)?;
    let d = mean.len();
    if d == 0 {
        return Ok(0.0);
    }
    let mut sq = vec![0.0; d];
    for w in weights {
        for ((s, &m), &v) in sq.iter_mut().zip(mean.as_slice()).zip(w.as_slice()) {
            *s += (m - v) * (m - v);
        }
    }
    Ok(sq.iter().map(|s| s.sqrt()).sum::<f64>() / d as f64)
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, v) in row.into_iter().enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    best.0
}

/// Fraction of samples whose highest output matches the label.
pub fn evaluate_accuracy(mlp: &Mlp, w: &WeightVector, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let out = mlp.forward(w, data.images.view())?;
    let correct = out
        .outer_iter()
        .zip(&data.labels)
        .filter(|(row, &label)| argmax(row.iter().copied()) == label)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Accuracy of every model on the same data, in client order.
pub fn evaluate_all(mlp: &Mlp, weights: &[WeightVector], data: &Dataset) -> Result<Vec<f64>> {
    let results: Vec<Result<f64>> = weights
        .par_iter()
        .map(|w| evaluate_accuracy(mlp, w, data))
        .collect();
    results
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| e.in_client(i)))
        .collect()
}

/// First 1-based round whose accuracy reaches `threshold`.
pub fn rounds_to_threshold(history: &[f64], threshold: f64) -> Option<usize> {
    history.iter().position(|&a| a >= threshold).map(|k| k + 1)
}

/// Mean, population standard deviation, minimum and maximum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("summary input"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Self {
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionCriterion {
    HighToLow,
    Random,
    LowToHigh,
}

impl SelectionCriterion {
    pub const ALL: [SelectionCriterion; 3] = [
        SelectionCriterion::HighToLow,
        SelectionCriterion::Random,
        SelectionCriterion::LowToHigh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelectionCriterion::HighToLow => "high_to_low",
            SelectionCriterion::Random => "random",
            SelectionCriterion::LowToHigh => "low_to_high",
        }
    }
}

/// Order in which clients join the final average. Sorting is stable, so
/// equal validation accuracies keep ascending client order.
pub fn order_clients(val_accuracies: &[f64], criterion: SelectionCriterion, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..val_accuracies.len()).collect();
    match criterion {
        SelectionCriterion::HighToLow => {
            order.sort_by(|&a, &b| val_accuracies[b].total_cmp(&val_accuracies[a]))
        }
        SelectionCriterion::LowToHigh => {
            order.sort_by(|&a, &b| val_accuracies[a].total_cmp(&val_accuracies[b]))
        }
        SelectionCriterion::Random => order.shuffle(&mut seed::rng(seed)),
    }
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionOrder {
    pub criterion: SelectionCriterion,
    pub ordering: Vec<usize>,
    /// Test accuracy of the average of the first `k + 1` clients in `ordering`.
    pub prefix_accuracies: Vec<f64>,
}

/// Ranks clients by validation accuracy and evaluates the running
/// sample-weighted average of each prefix on `test`.
pub fn selection_order(
    mlp: &Mlp,
    models: &[WeightVector],
    sizes: &[usize],
    val_accuracies: &[f64],
    test: &Dataset,
    criterion: SelectionCriterion,
    seed: u64,
) -> Result<SelectionOrder> {
    if models.is_empty() {
        return Err(Error::Empty("client models"));
    }
    if val_accuracies.len() != models.len() {
        return Err(Error::mismatch("validation accuracies", models.len(), val_accuracies.len()));
    }
    let ordering = order_clients(val_accuracies, criterion, seed);
    let prefix_models = (1..=ordering.len())
        .map(|k| final_average(models, sizes, &ordering[..k]))
        .collect::<Result<Vec<_>>>()?;
    let prefix_accuracies = evaluate_all(mlp, &prefix_models, test)?;
    Ok(SelectionOrder {
        criterion,
        ordering,
        prefix_accuracies,
    })
}

#[cfg(test)]
mod tests {
    use ndarray::{array, Array2};
    use rand_distr::{Distribution, Normal};

    use super::*;
    use crate::nn::{InitScheme, ModelDims};

    fn wv(v: &[f64]) -> WeightVector {
        WeightVector::from_vec(v.to_vec())
    }

    #[test]
    fn final_average_cases() {
        let ws = [wv(&[0.0, 0.0]), wv(&[4.0, 4.0])];
        assert_eq!(final_average(&ws, &[5, 5], &[0, 1]).unwrap(), wv(&[2.0, 2.0]));
        assert_eq!(final_average(&ws, &[5, 5], &[1]).unwrap(), ws[1]);
        assert_eq!(final_average(&ws, &[1, 3], &[0, 1]).unwrap(), wv(&[3.0, 3.0]));
        assert_eq!(final_average(&ws, &[0, 0], &[0, 1]).unwrap(), wv(&[2.0, 2.0]));
        assert!(matches!(final_average(&ws, &[1, 1], &[]), Err(Error::Empty(_))));
        assert!(final_average(&ws, &[1, 1], &[2]).is_err());
    }

    #[test]
    fn final_average_ignores_subset_order() {
        let mut rng = seed::rng(1);
        let n = Normal::new(0.0, 1.0).unwrap();
        let ws: Vec<WeightVector> = (0..6)
            .map(|_| WeightVector::from_vec((0..5).map(|_| n.sample(&mut rng)).collect()))
            .collect();
        let sizes = [3, 1, 4, 1, 5, 9];
        let a = final_average(&ws, &sizes, &[0, 2, 4, 5]).unwrap();
        let b = final_average(&ws, &sizes, &[5, 4, 0, 2]).unwrap();
        assert_eq!(a, b);
        let same = vec![ws[0].clone(); 4];
        assert!(final_average(&same, &[1, 2, 3, 4], &[0, 1, 2, 3]).unwrap().max_abs_diff(&ws[0]) < 1e-15);
    }

    #[test]
    fn variance_cases() {
        assert_eq!(inter_model_variance(&vec![wv(&[1.0, 2.0]); 3]).unwrap(), 0.0);
        let v = inter_model_variance(&[wv(&[0.0]), wv(&[2.0])]).unwrap();
        assert!((v - 2f64.sqrt()).abs() < 1e-15);
        assert!(matches!(
            inter_model_variance(&[wv(&[1.0])]),
            Err(Error::TooFewClients { needed: 2, found: 1 })
        ));
    }

    #[test]
    fn variance_homogeneity_and_translation() {
        let mut rng = seed::rng(2);
        let n = Normal::new(0.0, 1.0).unwrap();
        let ws: Vec<WeightVector> = (0..5)
            .map(|_| WeightVector::from_vec((0..8).map(|_| n.sample(&mut rng)).collect()))
            .collect();
        let v = inter_model_variance(&ws).unwrap();
        let scaled: Vec<WeightVector> = ws
            .iter()
            .map(|w| {
                let mut w = w.clone();
                w.scale(-3.0);
                w
            })
            .collect();
        assert!((inter_model_variance(&scaled).unwrap() - 3.0 * v).abs() < 1e-12);
        let shift = WeightVector::from_vec((0..8).map(|k| k as f64).collect());
        let shifted: Vec<WeightVector> = ws
            .iter()
            .map(|w| {
                let mut w = w.clone();
                w.scaled_add(1.0, &shift);
                w
            })
            .collect();
        assert!((inter_model_variance(&shifted).unwrap() - v).abs() < 1e-12);
    }

    #[test]
    fn rounds_to_threshold_cases() {
        assert_eq!(rounds_to_threshold(&[0.5, 0.86], 0.85), Some(2));
        assert_eq!(rounds_to_threshold(&[0.5, 0.6], 0.85), None);
        assert_eq!(rounds_to_threshold(&[0.85], 0.85), Some(1));
        assert_eq!(rounds_to_threshold(&[], 0.1), None);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax([1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax([0.0; 4]), 0);
    }

    fn dataset(n: usize, seed_: u64) -> Dataset {
        let mut rng = seed::rng(seed_);
        let u = Normal::new(0.0, 1.0).unwrap();
        let x = Array2::from_shape_fn((n, 4), |_| u.sample(&mut rng));
        let labels = (0..n).map(|i| (i * 3 + i / 7) % 3).collect();
        Dataset::new(x, labels, 3).unwrap()
    }

    #[test]
    fn zero_model_predicts_class_zero() {
        let mlp = Mlp::new(ModelDims::new(4, 5, 3).unwrap());
        let data = dataset(50, 3);
        let freq = data.labels.iter().filter(|&&l| l == 0).count() as f64 / 50.0;
        let acc = evaluate_accuracy(&mlp, &WeightVector::zeros(mlp.param_count()), &data).unwrap();
        assert_eq!(acc, freq);
        assert!(evaluate_accuracy(&mlp, &WeightVector::zeros(mlp.param_count()), &data.truncate(0)).is_err());
    }

    #[test]
    fn perfect_model_scores_one() {
        // Identity network: W1 = I, b1 = 0, W2 = I, b2 = 0 on one-hot inputs.
        let mlp = Mlp::new(ModelDims::new(3, 3, 3).unwrap());
        let mut w = vec![0.0; mlp.param_count()];
        for k in 0..3 {
            w[k * 3 + k] = 1.0;
            w[12 + k * 3 + k] = 1.0;
        }
        let data = Dataset::new(array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]], vec![0, 2, 1], 3).unwrap();
        assert_eq!(evaluate_accuracy(&mlp, &wv(&w), &data).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_matches_per_sample_loop() {
        let mlp = Mlp::new(ModelDims::new(4, 5, 3).unwrap());
        let w = mlp.init_weights(4, InitScheme::Shared, 0);
        let data = dataset(100, 5);
        let mut correct = 0;
        for (i, &label) in data.labels.iter().enumerate() {
            let x = data.images.row(i).to_owned().insert_axis(ndarray::Axis(0));
            let out = mlp.forward(&w, x.view()).unwrap();
            let mut best = 0;
            for k in 1..3 {
                if out[[0, k]] > out[[0, best]] {
                    best = k;
                }
            }
            correct += usize::from(best == label);
        }
        assert_eq!(evaluate_accuracy(&mlp, &w, &data).unwrap(), correct as f64 / 100.0);
    }

    #[test]
    fn ordering_by_criterion() {
        let val = [0.9, 0.3, 0.7];
        assert_eq!(order_clients(&val, SelectionCriterion::HighToLow, 0), vec![0, 2, 1]);
        assert_eq!(order_clients(&val, SelectionCriterion::LowToHigh, 0), vec![1, 2, 0]);
        let mut r = order_clients(&val, SelectionCriterion::Random, 0);
        r.sort_unstable();
        assert_eq!(r, vec![0, 1, 2]);
        assert_eq!(order_clients(&[0.5, 0.5], SelectionCriterion::HighToLow, 0), vec![0, 1]);
    }

    #[test]
    fn identical_models_give_identical_curves() {
        let mlp = Mlp::new(ModelDims::new(4, 5, 3).unwrap());
        let w = mlp.init_weights(6, InitScheme::Shared, 0);
        let models = vec![w; 4];
        let test = dataset(40, 7);
        let val = [0.1, 0.4, 0.2, 0.3];
        let curves: Vec<Vec<f64>> = SelectionCriterion::ALL
            .iter()
            .map(|&c| {
                selection_order(&mlp, &models, &[1, 2, 3, 4], &val, &test, c, 3)
                    .unwrap()
                    .prefix_accuracies
            })
            .collect();
        assert_eq!(curves[0].len(), 4);
        assert!(curves.iter().all(|c| c == &curves[0]));
    }

    #[test]
    fn full_prefix_agrees_across_criteria() {
        let mlp = Mlp::new(ModelDims::new(4, 5, 3).unwrap());
        let models: Vec<WeightVector> = (0..5).map(|i| mlp.init_weights(8, InitScheme::PerClient, i)).collect();
        let test = dataset(60, 9);
        let val = [0.3, 0.1, 0.5, 0.2, 0.4];
        let sizes = [3, 1, 4, 1, 5];
        let hi = selection_order(&mlp, &models, &sizes, &val, &test, SelectionCriterion::HighToLow, 0).unwrap();
        let lo = selection_order(&mlp, &models, &sizes, &val, &test, SelectionCriterion::LowToHigh, 0).unwrap();
        assert_eq!(hi.ordering, vec![2, 4, 0, 3, 1]);
        assert_eq!(hi.prefix_accuracies.last(), lo.prefix_accuracies.last());
    }

    #[test]
    fn summary_uses_population_std() {
        let s = Summary::of(&[1.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.std, s.min, s.max), (2.0, 1.0, 1.0, 3.0));
        assert!(Summary::of(&[]).is_err());
    }
}
