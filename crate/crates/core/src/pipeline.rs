//! The three inverse-design models built on the MLP engine:
//!
//! * FIM: spectrum to geometry in one pass (`P0`).
//! * HiFR2: FIM, then a forward model reconstructs the spectrum from `P0` and a
//!   residual model maps `x - S_hat` to a correction `dP`.
//! * IRC: FIM, then `T` small correctors applied additively in geometry space.
//!
//! All networks work in normalized units; [`NormalizationStats`] converts to
//! millimetres at the edges.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checksum::sha256_hex;
use crate::dataset::{Dataset, DatasetError, NormalizationStats, SplitIndices, N_TARGETS};
use crate::neural::{
    self, chain_specs, error_metrics, init_model, save_checkpoint, Activation, AdamConfig, CheckpointMeta, LayerSpec,
    Matrix, Metrics, MlpModel, NeuralError, TrainConfig, TrainRecord,
};
use crate::wave::{FrequencyGrid, Geometry, Spectrum};

pub const FIM_HIDDEN: [usize; 7] = [1500, 1000, 500, 250, 125, 64, 32];
pub const FFM_HIDDEN: [usize; 6] = [32, 64, 128, 256, 512, 1024];
pub const CORRECTOR_HIDDEN: [usize; 2] = [64, 64];
pub const IRC_ITERATIONS: usize = 5;
pub const DROPOUT_RATE: f64 = 0.1;
pub const BUNDLE_VERSION: u32 = 1;
pub const BUNDLE_MANIFEST_FILE: &str = "bundle.json";
/// Adam step size for the FIM. At 1e-3 the first epoch drives every unit of
/// the ReLU head negative for all inputs and training stalls at zero output.
pub const FIM_LEARNING_RATE: f64 = 3e-4;

const FFM_SEED_OFFSET: u64 = 100;
const RRM_SEED_OFFSET: u64 = 200;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("stage ordering: {0}")]
    StageOrder(String),
    #[error("spectrum grid {found:?} does not match the training grid {expected:?}")]
    GridMismatch {
        expected: FrequencyGrid,
        found: FrequencyGrid,
    },
    #[error("dataset has no split or normalization statistics; prepare it first")]
    NotPrepared,
    #[error("bundle is missing the {0} component")]
    Missing(&'static str),
    #[error("bundle integrity error: {0}")]
    Integrity(String),
    #[error("bundle version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Fim,
    Hifr2,
    Irc,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Fim, ModelKind::Hifr2, ModelKind::Irc];

    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Fim => "FIM",
            ModelKind::Hifr2 => "HiFR2",
            ModelKind::Irc => "IRC",
        }
    }
}

/// Which geometry estimate each corrector sees as input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IrcInput {
    /// The running estimate `P_{i-1}`.
    #[default]
    Updated,
    /// Always the FIM output `P0`.
    FixedP0,
}

/// Hidden-layer widths; the input/output widths come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HiddenWidths {
    pub fim: Vec<usize>,
    pub ffm: Vec<usize>,
    pub corrector: Vec<usize>,
}

impl Default for HiddenWidths {
    fn default() -> Self {
        Self {
            fim: FIM_HIDDEN.to_vec(),
            ffm: FFM_HIDDEN.to_vec(),
            corrector: CORRECTOR_HIDDEN.to_vec(),
        }
    }
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(input);
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

/// Inverse-model layout: ReLU throughout, dropout after every hidden layer
/// except the first and the last.
fn inverse_specs(n_features: usize, hidden: &[usize], head: Activation, rate: f64) -> Vec<LayerSpec> {
    let w = widths(n_features, hidden, N_TARGETS);
    let n_layers = w.len() - 1;
    let dropout: Vec<usize> = (1..n_layers.saturating_sub(2)).collect();
    chain_specs(&w, Activation::Relu, head, &dropout, rate)
}

pub fn fim_specs(n_features: usize, hidden: &[usize], rate: f64) -> Vec<LayerSpec> {
    inverse_specs(n_features, hidden, Activation::Relu, rate)
}

/// FIM layout with a linear head, since the correction target is signed.
pub fn rrm_specs(n_features: usize, hidden: &[usize], rate: f64) -> Vec<LayerSpec> {
    inverse_specs(n_features, hidden, Activation::Linear, rate)
}

/// Forward model: dropout after every hidden layer but the last. The head is
/// linear because the reconstructed features are standardized.
pub fn ffm_specs(n_features: usize, hidden: &[usize], rate: f64) -> Vec<LayerSpec> {
    let w = widths(N_TARGETS, hidden, n_features);
    let n_layers = w.len() - 1;
    let dropout: Vec<usize> = (0..n_layers.saturating_sub(2)).collect();
    chain_specs(&w, Activation::Relu, Activation::Linear, &dropout, rate)
}

pub fn corrector_specs(hidden: &[usize]) -> Vec<LayerSpec> {
    chain_specs(
        &widths(N_TARGETS, hidden, N_TARGETS),
        Activation::leaky(),
        Activation::Linear,
        &[],
        0.0,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Base seed `S`: FIM uses `S`, FFM `S + 100`, RRM `S + 200`, corrector
    /// `i` (1-based) `S + i`.
    pub seed: u64,
    pub fim: TrainConfig,
    pub ffm: TrainConfig,
    pub rrm: TrainConfig,
    pub corrector: TrainConfig,
    pub irc_iterations: usize,
    pub irc_input: IrcInput,
    pub hidden: HiddenWidths,
    pub dropout_rate: f64,
}

impl PipelineConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            fim: TrainConfig {
                adam: AdamConfig {
                    learning_rate: FIM_LEARNING_RATE,
                    ..AdamConfig::default()
                },
                ..TrainConfig::baseline(seed)
            },
            ffm: TrainConfig::baseline(seed),
            rrm: TrainConfig::baseline(seed),
            corrector: TrainConfig::corrector(seed),
            irc_iterations: IRC_ITERATIONS,
            irc_input: IrcInput::Updated,
            hidden: HiddenWidths::default(),
            dropout_rate: DROPOUT_RATE,
        }
    }

    fn stage(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..*base }
    }

    pub fn fim_train(&self) -> TrainConfig {
        self.stage(&self.fim, self.seed)
    }

    pub fn ffm_train(&self) -> TrainConfig {
        self.stage(&self.ffm, self.seed + FFM_SEED_OFFSET)
    }

    pub fn rrm_train(&self) -> TrainConfig {
        self.stage(&self.rrm, self.seed + RRM_SEED_OFFSET)
    }

    /// `iteration` counts from 1.
    pub fn corrector_train(&self, iteration: usize) -> TrainConfig {
        self.stage(&self.corrector, self.seed + iteration as u64)
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::new(42)
    }
}

/// Normalized design matrices for every sample, plus the split.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub x: Matrix<f32>,
    pub y: Matrix<f32>,
    pub split: SplitIndices,
    pub stats: NormalizationStats,
    pub frequency_grid: FrequencyGrid,
    pub dataset_checksum: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Validation,
    Test,
    All,
}

impl SplitName {
    pub const EACH: [SplitName; 3] = [SplitName::Train, SplitName::Validation, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
            SplitName::All => "all",
        }
    }
}

impl PreparedData {
    pub fn from_dataset(ds: &Dataset) -> Result<Self, PipelineError> {
        let (Some(split), Some(stats)) = (ds.split.clone(), ds.stats.clone()) else {
            return Err(PipelineError::NotPrepared);
        };
        let n_features = ds.n_features();
        let mut x = Vec::with_capacity(ds.n_samples * n_features);
        let mut y = Vec::with_capacity(ds.n_samples * N_TARGETS);
        for i in 0..ds.n_samples {
            let raw: Vec<f64> = ds.feature_row(i).iter().map(|&v| v as f64).collect();
            x.extend(stats.normalize_features(&raw)?.into_iter().map(|v| v as f32));
            y.extend(
                stats
                    .normalize_targets(&ds.geometry(i).to_array())?
                    .into_iter()
                    .map(|v| v as f32),
            );
        }
        Ok(Self {
            x: Matrix::new(ds.n_samples, n_features, x)?,
            y: Matrix::new(ds.n_samples, N_TARGETS, y)?,
            split,
            stats,
            frequency_grid: ds.frequency_grid,
            dataset_checksum: ds.checksum(),
        })
    }

    pub fn n_features(&self) -> usize {
        self.x.cols
    }

    pub fn indices(&self, which: SplitName) -> Vec<usize> {
        match which {
            SplitName::Train => self.split.train.clone(),
            SplitName::Validation => self.split.validation.clone(),
            SplitName::Test => self.split.test.clone(),
            SplitName::All => (0..self.x.rows).collect(),
        }
    }

    /// `(x, y)` rows of one split.
    pub fn rows(&self, which: SplitName) -> (Matrix<f32>, Matrix<f32>) {
        if which == SplitName::All {
            return (self.x.clone(), self.y.clone());
        }
        let idx = self.indices(which);
        (self.x.select_rows(&idx), self.y.select_rows(&idx))
    }
}

fn zip_map(a: &Matrix<f32>, b: &Matrix<f32>, f: impl Fn(f32, f32) -> f32) -> Matrix<f32> {
    debug_assert_eq!((a.rows, a.cols), (b.rows, b.cols));
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&p, &q)| f(p, q)).collect(),
    }
}

fn sub(a: &Matrix<f32>, b: &Matrix<f32>) -> Matrix<f32> {
    zip_map(a, b, |p, q| p - q)
}

fn add(a: &Matrix<f32>, b: &Matrix<f32>) -> Matrix<f32> {
    zip_map(a, b, |p, q| p + q)
}

/// A network plus the learning curves of its training run (`None` before
/// training).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedNet {
    pub net: MlpModel<f32>,
    pub record: Option<TrainRecord>,
}

impl TrainedNet {
    pub fn is_trained(&self) -> bool {
        self.record.is_some()
    }
}

pub type FimModel = TrainedNet;
pub type FfmModel = TrainedNet;
pub type RrmModel = TrainedNet;

#[derive(Debug, Clone, PartialEq)]
pub struct IrcStage {
    pub correctors: Vec<TrainedNet>,
    pub input: IrcInput,
    /// Full-dataset `(mse, mae)` after 0..=T corrections.
    pub trace: Vec<Metrics>,
}

pub fn untrained_fim(n_features: usize, config: &PipelineConfig) -> Result<FimModel, PipelineError> {
    Ok(TrainedNet {
        net: init_model(
            &fim_specs(n_features, &config.hidden.fim, config.dropout_rate),
            config.seed,
        )?,
        record: None,
    })
}

fn fit(
    specs: &[LayerSpec],
    train_cfg: &TrainConfig,
    train: (&Matrix<f32>, &Matrix<f32>),
    val: (&Matrix<f32>, &Matrix<f32>),
) -> Result<TrainedNet, PipelineError> {
    let mut net = init_model(specs, train_cfg.seed)?;
    let record = neural::train(&mut net, train.0, train.1, val.0, val.1, train_cfg)?;
    Ok(TrainedNet {
        net,
        record: Some(record),
    })
}

pub fn train_fim(data: &PreparedData, config: &PipelineConfig) -> Result<FimModel, PipelineError> {
    let (tx, ty) = data.rows(SplitName::Train);
    let (vx, vy) = data.rows(SplitName::Validation);
    let specs = fim_specs(data.n_features(), &config.hidden.fim, config.dropout_rate);
    log::info!("training FIM on {} samples", tx.rows);
    fit(&specs, &config.fim_train(), (&tx, &ty), (&vx, &vy))
}

fn require_trained(fim: &FimModel) -> Result<(), PipelineError> {
    if fim.is_trained() {
        Ok(())
    } else {
        Err(PipelineError::StageOrder("the FIM must be trained first".into()))
    }
}

/// Normalized `P0` for each row of `x`.
pub fn fim_forward(fim: &FimModel, x: &Matrix<f32>) -> Result<Matrix<f32>, PipelineError> {
    Ok(neural::predict(&fim.net, x)?)
}

/// Residual-model input and target: `x - ffm(P0)` and `y - P0`.
pub fn rrm_pairs(
    fim: &FimModel,
    ffm: &FfmModel,
    x: &Matrix<f32>,
    y: &Matrix<f32>,
) -> Result<(Matrix<f32>, Matrix<f32>), PipelineError> {
    let p0 = fim_forward(fim, x)?;
    let s_hat = neural::predict(&ffm.net, &p0)?;
    Ok((sub(x, &s_hat), sub(y, &p0)))
}

/// Trains the forward model on true geometry to spectrum, then the residual
/// model on `(x - ffm(P0), y - P0)`.
pub fn train_hifr2(
    data: &PreparedData,
    fim: &FimModel,
    config: &PipelineConfig,
) -> Result<(FfmModel, RrmModel), PipelineError> {
    require_trained(fim)?;
    let (tx, ty) = data.rows(SplitName::Train);
    let (vx, vy) = data.rows(SplitName::Validation);
    let n_features = data.n_features();

    log::info!("training FFM");
    let ffm = fit(
        &ffm_specs(n_features, &config.hidden.ffm, config.dropout_rate),
        &config.ffm_train(),
        (&ty, &tx),
        (&vy, &vx),
    )?;

    log::info!("training RRM");
    let (rtx, rty) = rrm_pairs(fim, &ffm, &tx, &ty)?;
    let (rvx, rvy) = rrm_pairs(fim, &ffm, &vx, &vy)?;
    let rrm = fit(
        &rrm_specs(n_features, &config.hidden.fim, config.dropout_rate),
        &config.rrm_train(),
        (&rtx, &rty),
        (&rvx, &rvy),
    )?;
    Ok((ffm, rrm))
}

/// `(P0, dP, P0 + dP)`, one row per input row.
pub type Hifr2Rows = (Matrix<f32>, Matrix<f32>, Matrix<f32>);

pub fn hifr2_forward(
    fim: &FimModel,
    ffm: &FfmModel,
    rrm: &RrmModel,
    x: &Matrix<f32>,
) -> Result<Hifr2Rows, PipelineError> {
    let p0 = fim_forward(fim, x)?;
    let s_hat = neural::predict(&ffm.net, &p0)?;
    let dp = neural::predict(&rrm.net, &sub(x, &s_hat))?;
    let p = add(&p0, &dp);
    Ok((p0, dp, p))
}

/// `P_0 ..= P_T` starting from `p0`.
pub fn irc_iterates(
    correctors: &[MlpModel<f32>],
    input: IrcInput,
    p0: Matrix<f32>,
) -> Result<Vec<Matrix<f32>>, PipelineError> {
    let mut out = vec![p0];
    for c in correctors {
        let prev = out.last().expect("starts with P0");
        let feed = match input {
            IrcInput::Updated => prev,
            IrcInput::FixedP0 => &out[0],
        };
        let dp = neural::predict(c, feed)?;
        out.push(add(prev, &dp));
    }
    Ok(out)
}

/// Trains the correctors one after another on the training split, each on
/// the residual left by its predecessors, and records the full-dataset trace.
pub fn train_irc(data: &PreparedData, fim: &FimModel, config: &PipelineConfig) -> Result<IrcStage, PipelineError> {
    require_trained(fim)?;
    let (tx, ty) = data.rows(SplitName::Train);
    let (vx, vy) = data.rows(SplitName::Validation);
    let specs = corrector_specs(&config.hidden.corrector);

    let p0_train = fim_forward(fim, &tx)?;
    let p0_val = fim_forward(fim, &vx)?;
    let (mut prev_train, mut prev_val) = (p0_train.clone(), p0_val.clone());
    let mut correctors = Vec::with_capacity(config.irc_iterations);
    for i in 1..=config.irc_iterations {
        let (in_train, in_val) = match config.irc_input {
            IrcInput::Updated => (&prev_train, &prev_val),
            IrcInput::FixedP0 => (&p0_train, &p0_val),
        };
        log::info!("training corrector {i}/{}", config.irc_iterations);
        let c = fit(
            &specs,
            &config.corrector_train(i),
            (in_train, &sub(&ty, &prev_train)),
            (in_val, &sub(&vy, &prev_val)),
        )?;
        let next_train = add(&prev_train, &neural::predict(&c.net, in_train)?);
        let next_val = add(&prev_val, &neural::predict(&c.net, in_val)?);
        prev_train = next_train;
        prev_val = next_val;
        correctors.push(c);
    }

    let nets: Vec<MlpModel<f32>> = correctors.iter().map(|c| c.net.clone()).collect();
    let iterates = irc_iterates(&nets, config.irc_input, fim_forward(fim, &data.x)?)?;
    let trace = iterates
        .iter()
        .map(|p| error_metrics(p, &data.y))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(IrcStage {
        correctors,
        input: config.irc_input,
        trace,
    })
}

/// One geometry estimate in normalized and physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub normalized: Vec<f64>,
    pub geometry: Geometry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hifr2Prediction {
    pub p0: Estimate,
    /// Normalized correction from the residual model.
    pub delta: Vec<f64>,
    pub p: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrcPrediction {
    /// `P_0 ..= P_T`.
    pub iterations: Vec<Estimate>,
}

impl IrcPrediction {
    pub fn final_estimate(&self) -> &Estimate {
        self.iterations.last().expect("at least P0")
    }
}

/// Everything needed to run inference on raw spectra.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineBundle {
    pub config: PipelineConfig,
    pub stats: NormalizationStats,
    pub frequency_grid: FrequencyGrid,
    pub dataset_checksum: String,
    pub fim: Option<FimModel>,
    pub ffm: Option<FfmModel>,
    pub rrm: Option<RrmModel>,
    pub irc: Option<IrcStage>,
}

impl PipelineBundle {
    pub fn new(data: &PreparedData, config: PipelineConfig) -> Self {
        Self {
            config,
            stats: data.stats.clone(),
            frequency_grid: data.frequency_grid,
            dataset_checksum: data.dataset_checksum.clone(),
            fim: None,
            ffm: None,
            rrm: None,
            irc: None,
        }
    }

    /// Trains the requested model along with any stage it depends on that is
    /// not yet present.
    pub fn train(&mut self, data: &PreparedData, kind: ModelKind) -> Result<(), PipelineError> {
        if data.dataset_checksum != self.dataset_checksum {
            return Err(PipelineError::Integrity("bundle and dataset checksums differ".into()));
        }
        if self.fim.is_none() || kind == ModelKind::Fim {
            self.fim = Some(train_fim(data, &self.config)?);
        }
        let fim = self.fim.as_ref().expect("trained above");
        match kind {
            ModelKind::Fim => {}
            ModelKind::Hifr2 => {
                let (ffm, rrm) = train_hifr2(data, fim, &self.config)?;
                self.ffm = Some(ffm);
                self.rrm = Some(rrm);
            }
            ModelKind::Irc => self.irc = Some(train_irc(data, fim, &self.config)?),
        }
        Ok(())
    }

    pub fn fim(&self) -> Result<&FimModel, PipelineError> {
        self.fim.as_ref().ok_or(PipelineError::Missing("FIM"))
    }

    fn hifr2_parts(&self) -> Result<(&FimModel, &FfmModel, &RrmModel), PipelineError> {
        Ok((
            self.fim()?,
            self.ffm.as_ref().ok_or(PipelineError::Missing("FFM"))?,
            self.rrm.as_ref().ok_or(PipelineError::Missing("RRM"))?,
        ))
    }

    pub fn irc(&self) -> Result<&IrcStage, PipelineError> {
        self.irc.as_ref().ok_or(PipelineError::Missing("IRC"))
    }

    pub fn has(&self, kind: ModelKind) -> bool {
        match kind {
            ModelKind::Fim => self.fim.is_some(),
            ModelKind::Hifr2 => self.fim.is_some() && self.ffm.is_some() && self.rrm.is_some(),
            ModelKind::Irc => self.fim.is_some() && self.irc.is_some(),
        }
    }

    /// Final normalized estimate of `kind` for every row of `x`.
    pub fn predict_normalized(&self, kind: ModelKind, x: &Matrix<f32>) -> Result<Matrix<f32>, PipelineError> {
        match kind {
            ModelKind::Fim => fim_forward(self.fim()?, x),
            ModelKind::Hifr2 => {
                let (fim, ffm, rrm) = self.hifr2_parts()?;
                Ok(hifr2_forward(fim, ffm, rrm, x)?.2)
            }
            ModelKind::Irc => {
                let mut it = self.irc_iterates(x)?;
                Ok(it.pop().expect("at least P0"))
            }
        }
    }

    pub fn irc_iterates(&self, x: &Matrix<f32>) -> Result<Vec<Matrix<f32>>, PipelineError> {
        let irc = self.irc()?;
        let nets: Vec<MlpModel<f32>> = irc.correctors.iter().map(|c| c.net.clone()).collect();
        irc_iterates(&nets, irc.input, fim_forward(self.fim()?, x)?)
    }

    /// Normalized network input for a raw spectrum on the training grid.
    pub fn features(&self, spectrum: &Spectrum) -> Result<Matrix<f32>, PipelineError> {
        if spectrum.grid != self.frequency_grid {
            return Err(PipelineError::GridMismatch {
                expected: self.frequency_grid,
                found: spectrum.grid,
            });
        }
        let x = self.stats.normalize_features(&spectrum.to_features())?;
        Ok(Matrix::new(1, x.len(), x.into_iter().map(|v| v as f32).collect())?)
    }

    /// Converts a normalized row to physical units, optionally clamped into
    /// the training range of each parameter.
    pub fn estimate(&self, normalized: &[f32], clamp: bool) -> Result<Estimate, PipelineError> {
        let normalized: Vec<f64> = normalized.iter().map(|&v| v as f64).collect();
        let mut phys = self.stats.denormalize_targets(&normalized)?;
        if clamp {
            for (j, v) in phys.iter_mut().enumerate() {
                *v = v.clamp(self.stats.target_min[j], self.stats.target_max[j]);
            }
        }
        Ok(Estimate {
            normalized,
            geometry: Geometry::from_array([phys[0], phys[1], phys[2], phys[3], phys[4], phys[5]]),
        })
    }
}

pub fn predict_fim(bundle: &PipelineBundle, spectrum: &Spectrum, clamp: bool) -> Result<Estimate, PipelineError> {
    let x = bundle.features(spectrum)?;
    bundle.estimate(&fim_forward(bundle.fim()?, &x)?.data, clamp)
}

pub fn predict_hifr2(bundle: &PipelineBundle, spectrum: &Spectrum) -> Result<Hifr2Prediction, PipelineError> {
    let x = bundle.features(spectrum)?;
    let (fim, ffm, rrm) = bundle.hifr2_parts()?;
    let (p0, dp, p) = hifr2_forward(fim, ffm, rrm, &x)?;
    Ok(Hifr2Prediction {
        p0: bundle.estimate(&p0.data, false)?,
        delta: dp.data.iter().map(|&v| v as f64).collect(),
        p: bundle.estimate(&p.data, false)?,
    })
}

pub fn predict_irc(bundle: &PipelineBundle, spectrum: &Spectrum) -> Result<IrcPrediction, PipelineError> {
    let x = bundle.features(spectrum)?;
    let iterations = bundle
        .irc_iterates(&x)?
        .iter()
        .map(|p| bundle.estimate(&p.data, false))
        .collect::<Result<_, _>>()?;
    Ok(IrcPrediction { iterations })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ComponentEntry {
    label: String,
    file: String,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IrcEntry {
    input: IrcInput,
    trace: Vec<Metrics>,
    correctors: Vec<ComponentEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleManifest {
    version: u32,
    config: PipelineConfig,
    stats: NormalizationStats,
    frequency_grid: FrequencyGrid,
    dataset_checksum: String,
    fim: Option<ComponentEntry>,
    ffm: Option<ComponentEntry>,
    rrm: Option<ComponentEntry>,
    irc: Option<IrcEntry>,
}

fn write_component(
    dir: &Path,
    label: &str,
    net: &TrainedNet,
    bundle: &PipelineBundle,
) -> Result<ComponentEntry, PipelineError> {
    let file = format!("{label}.ckpt");
    let path = dir.join(&file);
    let meta = CheckpointMeta {
        label: label.into(),
        train_config: None,
        dataset_checksum: Some(bundle.dataset_checksum.clone()),
        record: net.record.clone(),
    };
    save_checkpoint(&path, &net.net, None, &meta)?;
    Ok(ComponentEntry {
        label: label.into(),
        file,
        sha256: sha256_hex(&fs::read(&path)?),
    })
}

fn read_component(dir: &Path, entry: &ComponentEntry, dataset_checksum: &str) -> Result<TrainedNet, PipelineError> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path)?;
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(PipelineError::Integrity(format!("{} checksum mismatch", entry.file)));
    }
    let loaded = neural::decode_checkpoint(&bytes, Some(dataset_checksum))?;
    if !loaded.warnings.is_empty() {
        return Err(PipelineError::Integrity(format!(
            "{} was trained on a different dataset",
            entry.label
        )));
    }
    Ok(TrainedNet {
        net: loaded.model,
        record: loaded.meta.record,
    })
}

/// Writes `bundle.json` plus one checkpoint per network into `dir`.
pub fn save_bundle(bundle: &PipelineBundle, dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir)?;
    let comp = |label: &str, net: &Option<TrainedNet>| -> Result<Option<ComponentEntry>, PipelineError> {
        net.as_ref().map(|n| write_component(dir, label, n, bundle)).transpose()
    };
    let irc = match &bundle.irc {
        Some(stage) => Some(IrcEntry {
            input: stage.input,
            trace: stage.trace.clone(),
            correctors: stage
                .correctors
                .iter()
                .enumerate()
                .map(|(i, c)| write_component(dir, &format!("corrector_{}", i + 1), c, bundle))
                .collect::<Result<_, _>>()?,
        }),
        None => None,
    };
    let manifest = BundleManifest {
        version: BUNDLE_VERSION,
        config: bundle.config.clone(),
        stats: bundle.stats.clone(),
        frequency_grid: bundle.frequency_grid,
        dataset_checksum: bundle.dataset_checksum.clone(),
        fim: comp("fim", &bundle.fim)?,
        ffm: comp("ffm", &bundle.ffm)?,
        rrm: comp("rrm", &bundle.rrm)?,
        irc,
    };
    fs::write(dir.join(BUNDLE_MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<PipelineBundle, PipelineError> {
    let text = fs::read_to_string(dir.join(BUNDLE_MANIFEST_FILE))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let version = raw.get("version").and_then(serde_json::Value::as_u64).unwrap_or(0) as u32;
    if version != BUNDLE_VERSION {
        return Err(PipelineError::VersionMismatch {
            found: version,
            expected: BUNDLE_VERSION,
        });
    }
    let m: BundleManifest = serde_json::from_value(raw)?;
    let sum = &m.dataset_checksum;
    let comp = |e: &Option<ComponentEntry>| e.as_ref().map(|e| read_component(dir, e, sum)).transpose();
    let irc = match &m.irc {
        Some(entry) => Some(IrcStage {
            correctors: entry
                .correctors
                .iter()
                .map(|e| read_component(dir, e, sum))
                .collect::<Result<_, _>>()?,
            input: entry.input,
            trace: entry.trace.clone(),
        }),
        None => None,
    };
    Ok(PipelineBundle {
        fim: comp(&m.fim)?,
        ffm: comp(&m.ffm)?,
        rrm: comp(&m.rrm)?,
        irc,
        config: m.config,
        stats: m.stats,
        frequency_grid: m.frequency_grid,
        dataset_checksum: m.dataset_checksum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_widths(specs: &[LayerSpec]) -> Vec<usize> {
        let mut w = vec![specs[0].in_dim];
        w.extend(specs.iter().map(|s| s.out_dim));
        w
    }

    fn dropout_layers(specs: &[LayerSpec]) -> Vec<usize> {
        specs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.dropout_after > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    #[test]
    fn fim_conformance() {
        let s = fim_specs(2002, &FIM_HIDDEN, DROPOUT_RATE);
        assert_eq!(table_widths(&s), vec![2002, 1500, 1000, 500, 250, 125, 64, 32, 6]);
        assert_eq!(dropout_layers(&s), vec![1, 2, 3, 4, 5]);
        assert!(s.iter().all(|l| l.activation == Activation::Relu));
        assert!(s.iter().all(|l| l.dropout_after == 0.0 || l.dropout_after == 0.1));
    }

    #[test]
    fn ffm_conformance() {
        let s = ffm_specs(2002, &FFM_HIDDEN, DROPOUT_RATE);
        assert_eq!(table_widths(&s), vec![6, 32, 64, 128, 256, 512, 1024, 2002]);
        assert_eq!(dropout_layers(&s), vec![0, 1, 2, 3, 4]);
        assert!(s[..6].iter().all(|l| l.activation == Activation::Relu));
        assert_eq!(s[6].activation, Activation::Linear);
    }

    #[test]
    fn rrm_matches_fim_but_head() {
        let f = fim_specs(2002, &FIM_HIDDEN, DROPOUT_RATE);
        let r = rrm_specs(2002, &FIM_HIDDEN, DROPOUT_RATE);
        assert_eq!(table_widths(&f), table_widths(&r));
        assert_eq!(dropout_layers(&f), dropout_layers(&r));
        assert_eq!(r.last().unwrap().activation, Activation::Linear);
    }

    #[test]
    fn corrector_conformance() {
        let s = corrector_specs(&CORRECTOR_HIDDEN);
        assert_eq!(table_widths(&s), vec![6, 64, 64, 6]);
        assert_eq!(s[0].activation, Activation::LeakyRelu { slope: 0.01 });
        assert_eq!(s[1].activation, Activation::LeakyRelu { slope: 0.01 });
        assert_eq!(s[2].activation, Activation::Linear);
        assert!(dropout_layers(&s).is_empty());
    }

    #[test]
    fn stage_seeds() {
        let c = PipelineConfig::new(7);
        assert_eq!(c.fim_train().seed, 7);
        assert_eq!(c.ffm_train().seed, 107);
        assert_eq!(c.rrm_train().seed, 207);
        assert_eq!(c.corrector_train(3).seed, 10);
        assert_eq!(c.corrector_train(1).batch_size, 32);
        assert_eq!(c.fim_train().batch_size, 128);
    }

    fn constant_corrector(c: f32) -> MlpModel<f32> {
        let mut m: MlpModel<f32> = init_model(&corrector_specs(&[4]), 1).unwrap();
        for l in &mut m.layers {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        m.layers.last_mut().unwrap().biases.iter_mut().for_each(|b| *b = c);
        m
    }

    #[test]
    fn zero_correctors_keep_p0() {
        let p0 = Matrix::new(2, 6, (0..12).map(|v| v as f32 * 0.1).collect()).unwrap();
        let nets = vec![constant_corrector(0.0); 5];
        let it = irc_iterates(&nets, IrcInput::Updated, p0.clone()).unwrap();
        assert_eq!(it.len(), 6);
        assert_eq!(it[5], p0);
    }

    #[test]
    fn constant_correctors_telescope() {
        let p0 = Matrix::new(1, 6, vec![0.5; 6]).unwrap();
        for input in [IrcInput::Updated, IrcInput::FixedP0] {
            let nets = vec![constant_corrector(0.25); 5];
            let it = irc_iterates(&nets, input, p0.clone()).unwrap();
            assert!(it[5].data.iter().all(|v| (*v - 1.75).abs() < 1e-6));
        }
    }
}
