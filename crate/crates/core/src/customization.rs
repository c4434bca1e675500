//! Per-client customization of a global model by retraining its last `k` layers.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Partition;
use crate::error::{Error, Result};
use crate::federation::{evaluate, ClientState};
use crate::nn::{self, ModelParams, OptimizerState};
use crate::transport::SessionSpec;

/// Deepest customization tried by [`select_customization`].
pub const MAX_CUSTOM_LAYERS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetunePlan {
    /// Number of trailing layers to retrain; earlier layers stay frozen.
    pub k: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: Option<usize>,
}

impl FinetunePlan {
    /// Finetuning uses half the global learning rate.
    pub fn from_spec(spec: &SessionSpec, k: usize, patience: usize) -> Self {
        Self {
            k,
            learning_rate: spec.learning_rate / 2.0,
            momentum: spec.momentum,
            batch_size: spec.batch_size,
            patience,
            max_epochs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneResult {
    pub k: usize,
    pub params: ModelParams,
    pub val_rmse: f64,
    /// Epoch whose weights were kept; 0 means the global model was not improved.
    pub best_epoch: usize,
    pub epochs: usize,
    pub seconds: f64,
}

/// Retrains the last `plan.k` layers of `global` on the client's training data.
///
/// The global model itself is the epoch-0 candidate, so the result never scores
/// worse than `global` on the client's validation set.
pub fn finetune(
    global: &ModelParams,
    client: &ClientState,
    plan: &FinetunePlan,
) -> Result<FinetuneResult> {
    let n_layers = global.architecture().num_layers();
    if plan.k == 0 || plan.k > n_layers {
        return Err(Error::Config(format!(
            "cannot customize {} of {n_layers} layers",
            plan.k
        )));
    }
    if plan.patience == 0 {
        return Err(Error::Config("patience must be >= 1".into()));
    }
    let started = Instant::now();
    let first_trainable = n_layers - plan.k;
    let mut best = global.clone();
    let mut best_rmse = evaluate(global, client, Partition::Validation)?;
    let mut best_epoch = 0;
    let mut epoch = 0;

    if !client.data.train.is_empty() {
        let mut model = global.clone();
        let mut opt = OptimizerState::new(
            global.architecture(),
            plan.learning_rate,
            plan.momentum,
            plan.batch_size,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(client.seed);
        rng.set_stream(100 + plan.k as u64);
        let mut stale = 0;
        while plan.max_epochs.is_none_or(|m| epoch < m) {
            nn::train_epoch(
                &mut model,
                &mut opt,
                &client.data.train,
                &mut rng,
                first_trainable,
            )?;
            epoch += 1;
            let rmse = evaluate(&model, client, Partition::Validation)?;
            if rmse < best_rmse {
                best_rmse = rmse;
                best = model.clone();
                best_epoch = epoch;
                stale = 0;
            } else {
                stale += 1;
                if stale >= plan.patience {
                    break;
                }
            }
        }
    }

    Ok(FinetuneResult {
        k: plan.k,
        params: best,
        val_rmse: best_rmse,
        best_epoch,
        epochs: epoch,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Tries every `k` in `1..=min(3, layers)` and keeps the lowest validation RMSE;
/// ties go to the smaller `k`. `plan.k` is ignored. `seconds` is the total over all
/// candidates.
pub fn select_customization(
    global: &ModelParams,
    client: &ClientState,
    plan: &FinetunePlan,
) -> Result<FinetuneResult> {
    let max_k = global.architecture().num_layers().min(MAX_CUSTOM_LAYERS);
    let results = (1..=max_k)
        .into_par_iter()
        .map(|k| finetune(global, client, &FinetunePlan { k, ..plan.clone() }))
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = results.iter().map(|r| r.seconds).sum();
    let mut best = results
        .into_iter()
        .reduce(|a, b| if b.val_rmse < a.val_rmse { b } else { a })
        .expect("at least one layer");
    best.seconds = total;
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::ClientData;
    use crate::nn::{init_weights, Architecture, Batch, Matrix};

    fn client(seed: u64, train_rows: usize) -> ClientState {
        let arch = Architecture::power_curve();
        let f = |x: f64| (3.0 * x).sin() + 0.2;
        let mk = |xs: Vec<f64>| {
            let ys = xs.iter().map(|&x| f(x)).collect();
            Batch::new(Matrix::new(xs.len(), 1, xs).unwrap(), ys).unwrap()
        };
        let data = ClientData {
            train: mk((0..train_rows).map(|i| i as f64 / 50.0).collect()),
            validation: mk(vec![0.05, 0.33, 0.61, 0.87]),
            test: mk(vec![0.1, 0.9]),
        };
        let spec = SessionSpec {
            architecture: arch.clone(),
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 8,
            local_epochs: 3,
        };
        ClientState::new(0, data, init_weights(&arch, 3), &spec, seed).unwrap()
    }

    fn plan(k: usize) -> FinetunePlan {
        FinetunePlan {
            k,
            learning_rate: 0.025,
            momentum: 0.9,
            batch_size: 8,
            patience: 5,
            max_epochs: Some(60),
        }
    }

    #[test]
    fn frozen_layers_are_untouched() {
        let c = client(1, 50);
        let g = init_weights(&Architecture::power_curve(), 11);
        for k in 1..=3 {
            let r = finetune(&g, &c, &plan(k)).unwrap();
            let frozen = 3 - k;
            for (a, b) in r.params.layers()[..frozen]
                .iter()
                .zip(&g.layers()[..frozen])
            {
                assert_eq!(a, b, "k = {k}");
            }
        }
    }

    #[test]
    fn never_worse_than_global_on_validation() {
        let c = client(2, 50);
        let g = init_weights(&Architecture::power_curve(), 12);
        let base = evaluate(&g, &c, Partition::Validation).unwrap();
        for k in 1..=3 {
            let r = finetune(&g, &c, &plan(k)).unwrap();
            assert!(r.val_rmse <= base);
            assert_eq!(
                evaluate(&r.params, &c, Partition::Validation).unwrap(),
                r.val_rmse
            );
        }
    }

    #[test]
    fn empty_training_set_keeps_global() {
        let c = client(2, 0);
        let g = init_weights(&Architecture::power_curve(), 12);
        let r = finetune(&g, &c, &plan(2)).unwrap();
        assert_eq!(r.params, g);
        assert_eq!(r.best_epoch, 0);
    }

    #[test]
    fn k_out_of_range_is_rejected() {
        let c = client(2, 50);
        let g = init_weights(&Architecture::power_curve(), 12);
        assert!(matches!(finetune(&g, &c, &plan(0)), Err(Error::Config(_))));
        assert!(matches!(finetune(&g, &c, &plan(4)), Err(Error::Config(_))));
    }

    #[test]
    fn selection_picks_minimum_and_is_deterministic() {
        let c = client(5, 50);
        let g = init_weights(&Architecture::power_curve(), 13);
        let s = select_customization(&g, &c, &plan(0)).unwrap();
        let each: Vec<f64> = (1..=3)
            .map(|k| finetune(&g, &c, &plan(k)).unwrap().val_rmse)
            .collect();
        let min = each.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(s.val_rmse, min);
        assert_eq!(s.k, 1 + each.iter().position(|&v| v == min).unwrap());
        let again = select_customization(&g, &c, &plan(0)).unwrap();
        assert_eq!(s.params, again.params);
    }

    #[test]
    fn ties_go_to_smaller_k() {
        // With no training data every k keeps the global model: all tie.
        let c = client(5, 0);
        let g = init_weights(&Architecture::power_curve(), 13);
        assert_eq!(select_customization(&g, &c, &plan(0)).unwrap().k, 1);
    }
}
