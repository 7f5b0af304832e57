use std::fmt::Write as _;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{adam_step, shuffle_in_place, AdamConfig, AdamState, Matrix, MlpModel, Mode, NeuralError, Real, Rng};

/// Rows per forward call during inference; fixed so that predictions are
/// bit-identical no matter how the caller batches them.
pub const EVAL_CHUNK_ROWS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        Self {
            patience: 20,
            min_delta: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// `None` trains for exactly `max_epochs` and keeps the final weights.
    pub early_stopping: Option<EarlyStopping>,
    pub seed: u64,
    pub loss: Loss,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainConfig {
    /// Batch 128, up to 200 epochs, early stopping on validation MSE.
    pub fn baseline(seed: u64) -> Self {
        Self {
            batch_size: 128,
            max_epochs: 200,
            early_stopping: Some(EarlyStopping::default()),
            seed,
            loss: Loss::Mse,
            adam: AdamConfig::default(),
        }
    }

    /// Batch 32 for exactly 100 epochs.
    pub fn corrector(seed: u64) -> Self {
        Self {
            batch_size: 32,
            max_epochs: 100,
            early_stopping: None,
            seed,
            loss: Loss::Mse,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(NeuralError::InvalidSpec(
                "batch_size and max_epochs must be >= 1".into(),
            ));
        }
        if let Some(es) = self.early_stopping {
            if es.patience == 0 {
                return Err(NeuralError::InvalidSpec("patience must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Per-epoch learning curves. Epochs are numbered from 1.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainRecord {
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
    pub train_mae: Vec<f64>,
    pub val_mae: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

impl TrainRecord {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_mse,val_mse,train_mae,val_mae\n");
        for e in 0..self.train_mse.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                e + 1,
                self.train_mse[e],
                self.val_mse[e],
                self.train_mae[e],
                self.val_mae[e]
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience counter over validation losses.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    config: EarlyStopping,
    best: f64,
    best_epoch: usize,
    waited: usize,
}

impl EarlyStopper {
    pub fn new(config: EarlyStopping) -> Self {
        Self {
            config,
            best: f64::INFINITY,
            best_epoch: 0,
            waited: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best - self.config.min_delta {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.waited = 0;
            return StopDecision::Improved;
        }
        self.waited += 1;
        if self.waited >= self.config.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

/// Eval-mode predictions for every row of `x`.
pub fn predict<T: Real>(model: &MlpModel<T>, x: &Matrix<T>) -> Result<Matrix<T>, NeuralError> {
    if x.cols != model.input_dim() {
        return Err(NeuralError::ShapeMismatch(format!(
            "input has {} columns, model expects {}",
            x.cols,
            model.input_dim()
        )));
    }
    let out_dim = model.output_dim();
    let mut data = Vec::with_capacity(x.rows * out_dim);
    for start in (0..x.rows).step_by(EVAL_CHUNK_ROWS) {
        let end = (start + EVAL_CHUNK_ROWS).min(x.rows);
        let chunk = &x.data[start * x.cols..end * x.cols];
        data.extend(model.forward(chunk, end - start)?);
    }
    Matrix::new(x.rows, out_dim, data)
}

/// Mean squared and mean absolute error over all rows and outputs.
pub fn error_metrics<T: Real>(pred: &Matrix<T>, y: &Matrix<T>) -> Result<Metrics, NeuralError> {
    if pred.rows != y.rows || pred.cols != y.cols {
        return Err(NeuralError::ShapeMismatch("prediction and target shapes differ".into()));
    }
    if y.data.is_empty() {
        return Err(NeuralError::EmptyData("no samples to evaluate".into()));
    }
    let (mut se, mut ae) = (0.0, 0.0);
    for (&p, &t) in pred.data.iter().zip(&y.data) {
        let r = p.as_f64() - t.as_f64();
        se += r * r;
        ae += r.abs();
    }
    let n = y.data.len() as f64;
    Ok(Metrics {
        mse: se / n,
        mae: ae / n,
    })
}

pub fn evaluate<T: Real>(model: &MlpModel<T>, x: &Matrix<T>, y: &Matrix<T>) -> Result<Metrics, NeuralError> {
    if x.rows == 0 {
        return Err(NeuralError::EmptyData("no samples to evaluate".into()));
    }
    error_metrics(&predict(model, x)?, y)
}

fn check_pair<T>(x: &Matrix<T>, y: &Matrix<T>, in_dim: usize, out_dim: usize, what: &str) -> Result<(), NeuralError> {
    if x.rows == 0 {
        return Err(NeuralError::EmptyData(format!("{what} split is empty")));
    }
    if x.rows != y.rows || x.cols != in_dim || y.cols != out_dim {
        return Err(NeuralError::ShapeMismatch(format!(
            "{what}: x is {}x{}, y is {}x{}, model maps {in_dim} -> {out_dim}",
            x.rows, x.cols, y.rows, y.cols
        )));
    }
    Ok(())
}

/// Mini-batch Adam on batch-mean MSE.
///
/// Each epoch reshuffles the training rows with the seeded generator, which
/// also draws the dropout masks. Training metrics are the running averages of
/// the train-mode batch outputs; validation metrics use eval mode. With early
/// stopping the parameters of the best validation epoch are restored.
pub fn train<T: Real>(
    model: &mut MlpModel<T>,
    train_x: &Matrix<T>,
    train_y: &Matrix<T>,
    val_x: &Matrix<T>,
    val_y: &Matrix<T>,
    config: &TrainConfig,
) -> Result<TrainRecord, NeuralError> {
    config.validate()?;
    let (in_dim, out_dim) = (model.input_dim(), model.output_dim());
    check_pair(train_x, train_y, in_dim, out_dim, "training")?;
    check_pair(val_x, val_y, in_dim, out_dim, "validation")?;

    let mut rng = Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(model, config.adam);
    let mut stopper = config.early_stopping.map(EarlyStopper::new);
    let mut best_params: Option<MlpModel<T>> = None;
    let mut record = TrainRecord::default();
    let mut order: Vec<usize> = (0..train_x.rows).collect();
    let mut bx = Vec::with_capacity(config.batch_size * in_dim);
    let mut by = Vec::with_capacity(config.batch_size * out_dim);

    model.set_mode(Mode::Train);
    for epoch in 1..=config.max_epochs {
        shuffle_in_place(&mut order, &mut rng);
        let (mut se, mut ae) = (0.0, 0.0);
        for (b, rows) in order.chunks(config.batch_size).enumerate() {
            bx.clear();
            by.clear();
            for &r in rows {
                bx.extend_from_slice(train_x.row(r));
                by.extend_from_slice(train_y.row(r));
            }
            let cache = model.forward_train(&bx, rows.len(), &mut rng)?;
            let (loss, grads) = model.backward(&cache, &by)?;
            if !loss.is_finite() {
                model.set_mode(Mode::Eval);
                return Err(NeuralError::NonFiniteLoss { epoch, batch: b + 1 });
            }
            for (&p, &t) in cache.output.iter().zip(&by) {
                let r = p.as_f64() - t.as_f64();
                se += r * r;
                ae += r.abs();
            }
            adam_step(model, &grads, &mut adam)?;
        }
        let n = (train_x.rows * out_dim) as f64;
        model.set_mode(Mode::Eval);
        let val = evaluate(model, val_x, val_y)?;
        model.set_mode(Mode::Train);
        if !val.mse.is_finite() {
            model.set_mode(Mode::Eval);
            return Err(NeuralError::NonFiniteLoss { epoch, batch: 0 });
        }
        record.train_mse.push(se / n);
        record.train_mae.push(ae / n);
        record.val_mse.push(val.mse);
        record.val_mae.push(val.mae);
        record.stopped_epoch = epoch;
        log::debug!("epoch {epoch}: train mse {:.6e}, val mse {:.6e}", se / n, val.mse);

        match stopper.as_mut().map(|s| s.observe(epoch, val.mse)) {
            Some(StopDecision::Improved) => best_params = Some(model.clone()),
            Some(StopDecision::Stop) => break,
            Some(StopDecision::Continue) | None => {}
        }
    }
    model.set_mode(Mode::Eval);
    match (stopper, best_params) {
        (Some(s), Some(best)) => {
            model.layers = best.layers;
            record.best_epoch = s.best_epoch();
        }
        _ => record.best_epoch = record.stopped_epoch,
    }
    Ok(record)
}

/// Finite-difference step that suits [`gradient_check`] on ReLU-family nets.
pub const GRADIENT_CHECK_EPSILON: f64 = 1e-4;

/// Largest relative disagreement between backward gradients and central
/// differences of the loss, `|g_num - g_an| / max(|g_num| + |g_an|, 1e-12)`.
///
/// Runs in eval mode, so dropout is disabled. With piecewise-linear
/// activations the loss is quadratic in any single parameter between kinks,
/// so the central difference is exact there and a large step only buys
/// lower round-off. A step that moves any pre-activation across its hinge
/// is retried at a tenth of the size; parameters that still straddle one at
/// `epsilon * 1e-6` sit on a kink, where no derivative exists, and are skipped.
pub fn gradient_check(
    model: &MlpModel<f64>,
    x: &Matrix<f64>,
    y: &Matrix<f64>,
    epsilon: f64,
) -> Result<f64, NeuralError> {
    check_pair(x, y, model.input_dim(), model.output_dim(), "gradient check")?;
    let mut probe = model.clone();
    probe.set_mode(Mode::Eval);
    let mut rng = Rng::seed_from_u64(0);
    let cache = probe.forward_train(&x.data, x.rows, &mut rng)?;
    let hinges = cache.hinge_pattern(&probe);
    let (_, grads) = probe.backward(&cache, &y.data)?;
    let analytic = grads.flatten();

    // Loss and whether the hinge pattern matches the unperturbed one.
    let mut loss = |m: &MlpModel<f64>| -> Result<(f64, bool), NeuralError> {
        let c = m.forward_train(&x.data, x.rows, &mut rng)?;
        let l = c
            .output
            .iter()
            .zip(&y.data)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / y.data.len() as f64;
        Ok((l, c.hinge_pattern(m) == hinges))
    };
    let mut worst: f64 = 0.0;
    let mut skipped = 0usize;
    for (k, &g_an) in analytic.iter().enumerate() {
        let original = *probe.parameter_mut(k);
        let mut h = epsilon;
        let g_num = loop {
            *probe.parameter_mut(k) = original + h;
            let (plus, same_plus) = loss(&probe)?;
            *probe.parameter_mut(k) = original - h;
            let (minus, same_minus) = loss(&probe)?;
            *probe.parameter_mut(k) = original;
            if same_plus && same_minus {
                break Some((plus - minus) / (2.0 * h));
            }
            h /= 10.0;
            if h < epsilon * 1e-6 {
                break None;
            }
        };
        match g_num {
            Some(g_num) => {
                let rel = (g_num - g_an).abs() / (g_num.abs() + g_an.abs()).max(1e-12);
                worst = worst.max(rel);
            }
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::debug!("gradient check skipped {skipped} parameters sitting on a kink");
    }
    Ok(worst)
}
