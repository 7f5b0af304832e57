//! Evaluation artifacts: metric tables, the IRC iteration trace, log-scale
//! error histograms, the per-parameter comparison table, spectrum loop-back
//! verification and resonance trend checks. Every report is plain CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{NormalizationStats, N_TARGETS};
use crate::neural::{error_metrics, Matrix, Metrics};
use crate::pipeline::{ModelKind, PipelineBundle, PipelineError, PreparedData, SplitName};
use crate::wave::{
    self, find_resonances, simulate_with, CascadeOptions, FrequencyGrid, Geometry, Spectrum, SubstrateSpec, WaveError,
    PARAMETER_NAMES,
};

pub const HIST_LOG10_MIN: f64 = -5.0;
pub const HIST_LOG10_MAX: f64 = 0.0;
pub const HIST_BIN_WIDTH: f64 = 0.1;
pub const HIST_BINS: usize = 50;
/// Errors are floored here before taking log10.
pub const HIST_ERROR_FLOOR: f64 = 1e-12;
/// Margin added above the `G` threshold when snapping.
pub const SNAP_G_MARGIN: f64 = 1e-3;
pub const SPECTRUM_CSV_HEADER: &str = "frequency_GHz,s11_mag,s21_mag";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Wave(#[from] WaveError),
    #[error("bundle and dataset do not match: {0}")]
    SplitMismatch(String),
    #[error("invalid error value {0}; errors must be finite and non-negative")]
    InvalidError(f64),
    #[error("csv line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error("unknown parameter '{0}' (expected one of D1, D2, R1, R2, R3, G)")]
    UnknownParameter(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn csv_err(line: usize, reason: impl Into<String>) -> EvalError {
    EvalError::Csv {
        line,
        reason: reason.into(),
    }
}

fn check_match(bundle: &PipelineBundle, data: &PreparedData) -> Result<(), EvalError> {
    if bundle.dataset_checksum != data.dataset_checksum {
        return Err(EvalError::SplitMismatch(
            "dataset checksum differs from the one the bundle was trained on".into(),
        ));
    }
    if bundle.stats != data.stats {
        return Err(EvalError::SplitMismatch("normalization statistics differ".into()));
    }
    Ok(())
}

fn present_models(bundle: &PipelineBundle) -> Vec<ModelKind> {
    ModelKind::ALL.into_iter().filter(|k| bundle.has(*k)).collect()
}

/// Per-parameter mean absolute error in physical units.
fn physical_mae(pred: &Matrix<f32>, y: &Matrix<f32>, stats: &NormalizationStats) -> [f64; N_TARGETS] {
    let scale = stats.target_scale();
    let mut out = [0.0; N_TARGETS];
    for r in 0..pred.rows {
        for (j, (p, t)) in pred.row(r).iter().zip(y.row(r)).enumerate() {
            out[j] += (p - t).abs() as f64;
        }
    }
    for (j, v) in out.iter_mut().enumerate() {
        *v = *v / pred.rows as f64 * scale[j];
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: ModelKind,
    pub split: SplitName,
    pub n_samples: usize,
    /// Normalized units.
    pub mse: f64,
    pub mae: f64,
    /// mm for D and R, dimensionless for G.
    pub param_mae: [f64; N_TARGETS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn get(&self, model: ModelKind, split: SplitName) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.model == model && r.split == split)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,split,n_samples,mse,mae");
        for p in PARAMETER_NAMES {
            let unit = if p == "G" { "" } else { "_mm" };
            let _ = write!(out, ",mae_{p}{unit}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{},{}",
                r.model.label(),
                r.split.as_str(),
                r.n_samples,
                r.mse,
                r.mae
            );
            for v in r.param_mae {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// MSE/MAE of every trained model on every split (plus the union).
pub fn compute_metrics(bundle: &PipelineBundle, data: &PreparedData) -> Result<MetricsReport, EvalError> {
    check_match(bundle, data)?;
    let mut rows = Vec::new();
    for model in present_models(bundle) {
        for split in [SplitName::Train, SplitName::Validation, SplitName::Test, SplitName::All] {
            let (x, y) = data.rows(split);
            let pred = bundle.predict_normalized(model, &x)?;
            let m = error_metrics(&pred, &y).map_err(PipelineError::from)?;
            rows.push(MetricRow {
                model,
                split,
                n_samples: x.rows,
                mse: m.mse,
                mae: m.mae,
                param_mae: physical_mae(&pred, &y, &data.stats),
            });
        }
    }
    Ok(MetricsReport { rows })
}

/// Per-sample normalized predictions and targets of every trained model, for
/// external recomputation of the metric tables.
pub fn predictions_csv(bundle: &PipelineBundle, data: &PreparedData) -> Result<String, EvalError> {
    check_match(bundle, data)?;
    let mut split_of = vec![SplitName::Train; data.x.rows];
    for s in SplitName::EACH {
        for i in data.indices(s) {
            split_of[i] = s;
        }
    }
    let mut out = String::from("model,index,split");
    for p in PARAMETER_NAMES {
        let _ = write!(out, ",pred_{p}");
    }
    for p in PARAMETER_NAMES {
        let _ = write!(out, ",true_{p}");
    }
    out.push('\n');
    for model in present_models(bundle) {
        let pred = bundle.predict_normalized(model, &data.x)?;
        for (i, split) in split_of.iter().enumerate() {
            let _ = write!(out, "{},{i},{}", model.label(), split.as_str());
            for v in pred.row(i).iter().chain(data.y.row(i)) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Mean-of-training-targets predictor scored on `split`.
pub fn mean_predictor_metrics(data: &PreparedData, split: SplitName) -> Result<Metrics, EvalError> {
    let (_, ty) = data.rows(SplitName::Train);
    let mut mean = [0.0f64; N_TARGETS];
    for r in 0..ty.rows {
        for (m, v) in mean.iter_mut().zip(ty.row(r)) {
            *m += *v as f64;
        }
    }
    let mean: Vec<f32> = mean.iter().map(|m| (m / ty.rows as f64) as f32).collect();
    let (_, y) = data.rows(split);
    let pred = Matrix {
        rows: y.rows,
        cols: N_TARGETS,
        data: mean.iter().copied().cycle().take(y.rows * N_TARGETS).collect(),
    };
    Ok(error_metrics(&pred, &y).map_err(PipelineError::from)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub mse: f64,
    pub mae: f64,
}

/// IRC error after 0..=T corrections over every sample of the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub points: Vec<TracePoint>,
}

impl IterationTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,mse,mae\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.iteration, p.mse, p.mae);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, EvalError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "iteration,mse,mae")) => {}
            _ => return Err(csv_err(1, "expected header 'iteration,mse,mae'")),
        }
        let mut points = Vec::new();
        for (i, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(csv_err(i + 1, "expected 3 fields"));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| csv_err(i + 1, e.to_string()));
            points.push(TracePoint {
                iteration: f[0].trim().parse().map_err(|_| csv_err(i + 1, "bad iteration index"))?,
                mse: num(f[1])?,
                mae: num(f[2])?,
            });
        }
        Ok(Self { points })
    }

    /// Largest ratio `mse[i+1] / mse[i]` between consecutive points.
    pub fn worst_step_ratio(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| w[1].mse / w[0].mse)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// MSE never rises by more than `tolerance` (relative) between steps.
    pub fn non_increasing_within(&self, tolerance: f64) -> bool {
        self.points.windows(2).all(|w| w[1].mse <= w[0].mse * (1.0 + tolerance))
    }
}

pub fn iteration_trace(bundle: &PipelineBundle, data: &PreparedData) -> Result<IterationTrace, EvalError> {
    check_match(bundle, data)?;
    let points = bundle
        .irc_iterates(&data.x)?
        .iter()
        .enumerate()
        .map(|(iteration, p)| {
            let m = error_metrics(p, &data.y).map_err(PipelineError::from)?;
            Ok(TracePoint {
                iteration,
                mse: m.mse,
                mae: m.mae,
            })
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(IterationTrace { points })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorMetric {
    Mse,
    Mae,
}

impl ErrorMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorMetric::Mse => "mse",
            ErrorMetric::Mae => "mae",
        }
    }
}

/// Counts over log10 bins of width 0.1 on `[-5, 0)`, plus explicit
/// underflow and overflow bins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramCounts {
    pub underflow: u64,
    pub bins: Vec<u64>,
    pub overflow: u64,
}

impl HistogramCounts {
    pub fn total(&self) -> u64 {
        self.underflow + self.overflow + self.bins.iter().sum::<u64>()
    }
}

/// Bin of one error: `None` for underflow, `Some(HIST_BINS)` for overflow.
pub fn histogram_bin(error: f64) -> Option<usize> {
    let l = error.max(HIST_ERROR_FLOOR).log10();
    let x = (l - HIST_LOG10_MIN) / HIST_BIN_WIDTH;
    // Values within rounding of an edge belong to the bin that starts there.
    let k = if (x - x.round()).abs() < 1e-9 {
        x.round()
    } else {
        x.floor()
    };
    if k < 0.0 {
        None
    } else {
        Some((k as usize).min(HIST_BINS))
    }
}

pub fn error_histogram(errors: &[f64]) -> Result<HistogramCounts, EvalError> {
    let mut h = HistogramCounts {
        underflow: 0,
        bins: vec![0; HIST_BINS],
        overflow: 0,
    };
    for &e in errors {
        if !(e.is_finite() && e >= 0.0) {
            return Err(EvalError::InvalidError(e));
        }
        match histogram_bin(e) {
            None => h.underflow += 1,
            Some(k) if k >= HIST_BINS => h.overflow += 1,
            Some(k) => h.bins[k] += 1,
        }
    }
    Ok(h)
}

/// Per-sample errors across the six normalized outputs.
pub fn per_sample_errors(pred: &Matrix<f32>, y: &Matrix<f32>, metric: ErrorMetric) -> Vec<f64> {
    (0..pred.rows)
        .map(|r| {
            let s: f64 = pred
                .row(r)
                .iter()
                .zip(y.row(r))
                .map(|(p, t)| {
                    let d = (p - t) as f64;
                    match metric {
                        ErrorMetric::Mse => d * d,
                        ErrorMetric::Mae => d.abs(),
                    }
                })
                .sum();
            s / pred.cols as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorHistogram {
    pub metric: ErrorMetric,
    pub split: SplitName,
    pub counts: BTreeMap<String, HistogramCounts>,
}

impl ErrorHistogram {
    pub fn to_csv(&self) -> String {
        let models: Vec<&String> = self.counts.keys().collect();
        let mut out = String::from("bin_lo,bin_hi");
        for m in &models {
            let _ = write!(out, ",{m}");
        }
        out.push('\n');
        let edge = |k: usize| HIST_LOG10_MIN + k as f64 * HIST_BIN_WIDTH;
        let mut row = |lo: String, hi: String, pick: &dyn Fn(&HistogramCounts) -> u64| {
            let _ = write!(out, "{lo},{hi}");
            for m in &models {
                let _ = write!(out, ",{}", pick(&self.counts[*m]));
            }
            out.push('\n');
        };
        row("-inf".into(), format!("{:.1}", HIST_LOG10_MIN), &|c| c.underflow);
        for k in 0..HIST_BINS {
            row(format!("{:.1}", edge(k)), format!("{:.1}", edge(k + 1)), &|c| c.bins[k]);
        }
        row(format!("{:.1}", HIST_LOG10_MAX), "inf".into(), &|c| c.overflow);
        out
    }
}

pub fn model_histogram(
    bundle: &PipelineBundle,
    data: &PreparedData,
    metric: ErrorMetric,
    split: SplitName,
) -> Result<ErrorHistogram, EvalError> {
    check_match(bundle, data)?;
    let (x, y) = data.rows(split);
    let mut counts = BTreeMap::new();
    for model in present_models(bundle) {
        let pred = bundle.predict_normalized(model, &x)?;
        counts.insert(
            model.label().to_string(),
            error_histogram(&per_sample_errors(&pred, &y, metric))?,
        );
    }
    Ok(ErrorHistogram { metric, split, counts })
}

/// Physical-unit predictions of each model for one target, next to the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub fim: Geometry,
    pub hifr2: Geometry,
    pub irc: Geometry,
    pub ground_truth: Geometry,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let cols = [&self.fim, &self.hifr2, &self.irc, &self.ground_truth].map(|g| g.to_array());
        let mut out = String::from("parameter,FIM,HiFR2,IRC,ground_truth\n");
        for (j, p) in PARAMETER_NAMES.iter().enumerate() {
            let _ = writeln!(out, "{p},{},{},{},{}", cols[0][j], cols[1][j], cols[2][j], cols[3][j]);
        }
        out
    }
}

pub fn comparison_table(
    bundle: &PipelineBundle,
    target: &Spectrum,
    truth: Geometry,
) -> Result<ComparisonTable, EvalError> {
    let x = bundle.features(target)?;
    let geom = |k: ModelKind| -> Result<Geometry, EvalError> {
        let p = bundle.predict_normalized(k, &x)?;
        Ok(bundle.estimate(&p.data, false)?.geometry)
    };
    Ok(ComparisonTable {
        fim: geom(ModelKind::Fim)?,
        hifr2: geom(ModelKind::Hifr2)?,
        irc: geom(ModelKind::Irc)?,
        ground_truth: truth,
    })
}

/// Makes a predicted geometry simulable: clamp into the sampled ranges, sort
/// the radii ascending, then lift `G` just above its threshold if needed.
/// Fails when the lifted `G` would leave its range.
pub fn snap_geometry(g: &Geometry, bounds: &[(f64, f64); N_TARGETS]) -> Result<Geometry, String> {
    let mut v = g.to_array();
    for (j, x) in v.iter_mut().enumerate() {
        if !x.is_finite() {
            return Err(format!("{} is not finite", PARAMETER_NAMES[j]));
        }
        *x = x.clamp(bounds[j].0, bounds[j].1);
    }
    let mut radii = [v[2], v[3], v[4]];
    radii.sort_by(f64::total_cmp);
    v[2..5].copy_from_slice(&radii);
    let mut out = Geometry::from_array(v);
    if !wave::satisfies_g_constraint(&out) {
        let lifted = out.g_threshold() + SNAP_G_MARGIN;
        if lifted > bounds[5].1 {
            return Err(format!(
                "G would need {lifted:.4}, above the sampled maximum {}",
                bounds[5].1
            ));
        }
        out.g = lifted;
    }
    out.validate().map_err(|e| e.to_string())?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectrumScore {
    #[default]
    S21,
    S11,
    Both,
}

pub fn spectrum_mse(a: &Spectrum, b: &Spectrum, score: SpectrumScore) -> f64 {
    let mse = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64;
    match score {
        SpectrumScore::S21 => mse(&a.s21_mag, &b.s21_mag),
        SpectrumScore::S11 => mse(&a.s11_mag, &b.s11_mag),
        SpectrumScore::Both => 0.5 * (mse(&a.s21_mag, &b.s21_mag) + mse(&a.s11_mag, &b.s11_mag)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyItem {
    pub target: usize,
    pub model: ModelKind,
    pub predicted: Geometry,
    /// `None` when snapping or re-simulation failed.
    pub snapped: Option<Geometry>,
    pub spectrum_mse: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub score: SpectrumScore,
    pub items: Vec<VerifyItem>,
}

impl VerifyReport {
    /// Mean spectrum MSE of `model` over the targets it could be scored on.
    pub fn mean_mse(&self, model: ModelKind) -> Option<f64> {
        let v: Vec<f64> = self
            .items
            .iter()
            .filter(|i| i.model == model)
            .filter_map(|i| i.spectrum_mse)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("target,model");
        for p in PARAMETER_NAMES {
            let _ = write!(out, ",{p}");
        }
        let _ = writeln!(out, ",status,{}_mse", self.score_label());
        for it in &self.items {
            let _ = write!(out, "{},{}", it.target, it.model.label());
            match (&it.snapped, it.spectrum_mse) {
                (Some(g), Some(m)) => {
                    for v in g.to_array() {
                        let _ = write!(out, ",{v}");
                    }
                    let _ = writeln!(out, ",ok,{m}");
                }
                _ => {
                    for v in it.predicted.to_array() {
                        let _ = write!(out, ",{v}");
                    }
                    let reason = it.error.as_deref().unwrap_or("failed").replace(',', ";");
                    let _ = writeln!(out, ",infeasible: {reason},");
                }
            }
        }
        out
    }

    fn score_label(&self) -> &'static str {
        match self.score {
            SpectrumScore::S21 => "s21",
            SpectrumScore::S11 => "s11",
            SpectrumScore::Both => "s11_s21",
        }
    }
}

fn verify_one(
    spec: &SubstrateSpec,
    bounds: &[(f64, f64); N_TARGETS],
    target_index: usize,
    target: &Spectrum,
    model: ModelKind,
    predicted: Geometry,
    score: SpectrumScore,
) -> VerifyItem {
    let mut item = VerifyItem {
        target: target_index,
        model,
        predicted,
        snapped: None,
        spectrum_mse: None,
        error: None,
    };
    match snap_geometry(&predicted, bounds) {
        Err(e) => item.error = Some(e),
        Ok(g) => match wave::simulate(spec, &g, &target.grid) {
            Err(e) => item.error = Some(e.to_string()),
            Ok(s) => {
                item.snapped = Some(g);
                item.spectrum_mse = Some(spectrum_mse(target, &s, score));
            }
        },
    }
    item
}

/// Predicts each target with every trained model, snaps, re-simulates and
/// scores the re-simulated spectrum against the target. Per-item failures
/// are recorded rather than returned.
pub fn verify_designs(
    bundle: &PipelineBundle,
    spec: &SubstrateSpec,
    bounds: &[(f64, f64); N_TARGETS],
    targets: &[Spectrum],
    score: SpectrumScore,
) -> Result<VerifyReport, EvalError> {
    let models = present_models(bundle);
    let mut jobs = Vec::with_capacity(targets.len() * models.len());
    if !targets.is_empty() {
        let mut x = Vec::with_capacity(targets.len() * 2 * bundle.frequency_grid.n_points);
        for t in targets {
            x.extend(bundle.features(t)?.data);
        }
        let x = Matrix::new(targets.len(), x.len() / targets.len(), x).map_err(PipelineError::from)?;
        let preds: Vec<Matrix<f32>> = models
            .iter()
            .map(|&m| bundle.predict_normalized(m, &x))
            .collect::<Result<_, _>>()?;
        for t in 0..targets.len() {
            for (k, &m) in models.iter().enumerate() {
                jobs.push((t, m, bundle.estimate(preds[k].row(t), false)?.geometry));
            }
        }
    }
    let run = |&(t, m, g): &(usize, ModelKind, Geometry)| verify_one(spec, bounds, t, &targets[t], m, g, score);
    #[cfg(feature = "parallel")]
    let items = {
        use rayon::prelude::*;
        jobs.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let items = jobs.iter().map(run).collect();
    Ok(VerifyReport { score, items })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parameter {
    D1,
    D2,
    R1,
    R2,
    R3,
    G,
}

impl Parameter {
    pub const ALL: [Parameter; 6] = [
        Parameter::D1,
        Parameter::D2,
        Parameter::R1,
        Parameter::R2,
        Parameter::R3,
        Parameter::G,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        PARAMETER_NAMES[self.index()]
    }

    pub fn set(self, g: &Geometry, value: f64) -> Geometry {
        let mut v = g.to_array();
        v[self.index()] = value;
        Geometry::from_array(v)
    }
}

impl FromStr for Parameter {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Parameter::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| EvalError::UnknownParameter(s.into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendVerdict {
    StrictlyDecreasing,
    StrictlyIncreasing,
    Flat,
    NonMonotonic,
    /// Some variant showed no resonance in band.
    Undetermined,
}

impl TrendVerdict {
    pub fn as_str(self) -> &'static str {
        match self {
            TrendVerdict::StrictlyDecreasing => "strictly_decreasing",
            TrendVerdict::StrictlyIncreasing => "strictly_increasing",
            TrendVerdict::Flat => "flat",
            TrendVerdict::NonMonotonic => "non_monotonic",
            TrendVerdict::Undetermined => "undetermined",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub parameter: Parameter,
    pub values: Vec<f64>,
    /// Lowest in-band resonance per value, GHz.
    pub lowest_resonance_ghz: Vec<Option<f64>>,
    pub verdict: TrendVerdict,
}

impl TrendReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},lowest_resonance_GHz\n", self.parameter.name());
        for (v, r) in self.values.iter().zip(&self.lowest_resonance_ghz) {
            let _ = writeln!(out, "{v},{}", r.map(|f| f.to_string()).unwrap_or_default());
        }
        out
    }
}

/// Resonances closer than this are treated as equal.
const FLAT_TOLERANCE_GHZ: f64 = 1e-9;

pub fn trend_verdict(seq: &[Option<f64>]) -> TrendVerdict {
    let Some(v) = seq.iter().copied().collect::<Option<Vec<f64>>>() else {
        return TrendVerdict::Undetermined;
    };
    let steps: Vec<f64> = v.windows(2).map(|w| w[1] - w[0]).collect();
    if steps.iter().all(|d| d.abs() <= FLAT_TOLERANCE_GHZ) {
        TrendVerdict::Flat
    } else if steps.iter().all(|d| *d < -FLAT_TOLERANCE_GHZ) {
        TrendVerdict::StrictlyDecreasing
    } else if steps.iter().all(|d| *d > FLAT_TOLERANCE_GHZ) {
        TrendVerdict::StrictlyIncreasing
    } else {
        TrendVerdict::NonMonotonic
    }
}

/// Sweeps one parameter around `base` and classifies how the lowest
/// resonance moves. Variants only need to be buildable: a sweep may cross
/// the `G` inequality, which bounds the dataset rather than the structure.
pub fn trend_check(
    spec: &SubstrateSpec,
    base: &Geometry,
    parameter: Parameter,
    values: &[f64],
    grid: &FrequencyGrid,
    options: &CascadeOptions,
) -> Result<TrendReport, EvalError> {
    let lowest = values
        .iter()
        .map(|&v| {
            let g = parameter.set(base, v);
            let options = CascadeOptions {
                relax_g_constraint: true,
                ..*options
            };
            let s = simulate_with(spec, &g, grid, &options)?;
            Ok(find_resonances(&s).first().copied())
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(TrendReport {
        parameter,
        values: values.to_vec(),
        verdict: trend_verdict(&lowest),
        lowest_resonance_ghz: lowest,
    })
}

/// Twelve significant digits per value.
pub fn write_spectrum_csv(s: &Spectrum) -> String {
    let mut out = String::with_capacity(48 * s.grid.n_points);
    out.push_str(SPECTRUM_CSV_HEADER);
    out.push('\n');
    for (i, f) in s.grid.frequencies().iter().enumerate() {
        let _ = writeln!(out, "{f:.11e},{:.11e},{:.11e}", s.s11_mag[i], s.s21_mag[i]);
    }
    out
}

/// Parses a spectrum CSV. The frequency column must be a uniform grid; with
/// `expected` given it must be that grid.
pub fn read_spectrum_csv(text: &str, expected: Option<&FrequencyGrid>) -> Result<Spectrum, EvalError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == SPECTRUM_CSV_HEADER => {}
        _ => return Err(csv_err(1, format!("expected header '{SPECTRUM_CSV_HEADER}'"))),
    }
    let (mut f, mut s11, mut s21) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in lines {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(csv_err(i + 1, "expected 3 fields"));
        }
        let mut vals = [0.0; 3];
        for (v, c) in vals.iter_mut().zip(&cols) {
            *v = c
                .trim()
                .parse()
                .map_err(|_| csv_err(i + 1, format!("'{c}' is not a number")))?;
        }
        f.push(vals[0]);
        s11.push(vals[1]);
        s21.push(vals[2]);
    }
    if f.len() < 2 {
        return Err(csv_err(1, "need at least two frequency points"));
    }
    let grid = FrequencyGrid::new(f[0], f[f.len() - 1], f.len())?;
    for (i, &fi) in f.iter().enumerate() {
        if (fi - grid.frequency(i)).abs() > 1e-9 * fi.abs().max(1.0) {
            return Err(csv_err(i + 2, "frequencies are not a uniform grid"));
        }
    }
    let grid = match expected {
        Some(e) if grid_close(e, &grid) => *e,
        Some(e) => {
            return Err(PipelineError::GridMismatch {
                expected: *e,
                found: grid,
            }
            .into())
        }
        None => grid,
    };
    Ok(Spectrum::new(grid, s11, s21)?)
}

fn grid_close(a: &FrequencyGrid, b: &FrequencyGrid) -> bool {
    a.n_points == b.n_points
        && (a.start_ghz - b.start_ghz).abs() <= 1e-9 * a.start_ghz.abs()
        && (a.stop_ghz - b.stop_ghz).abs() <= 1e-9 * a.stop_ghz.abs()
}

/// Reads every `*.csv` spectrum in `dir`, sorted by file name.
pub fn read_spectrum_dir(dir: &Path, expected: Option<&FrequencyGrid>) -> Result<Vec<(String, Spectrum)>, EvalError> {
    let mut names: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|p| {
            let s = read_spectrum_csv(&fs::read_to_string(&p)?, expected)?;
            Ok((p.file_name().unwrap_or_default().to_string_lossy().into_owned(), s))
        })
        .collect()
}

/// Writes metrics.csv, trace.csv (when IRC is trained), histogram_mse.csv,
/// histogram_mae.csv (test split) and, with all models present,
/// comparison_table.csv for `reference`.
pub fn write_reports(
    dir: &Path,
    bundle: &PipelineBundle,
    data: &PreparedData,
    reference: Option<(&Spectrum, Geometry)>,
) -> Result<MetricsReport, EvalError> {
    fs::create_dir_all(dir)?;
    let metrics = compute_metrics(bundle, data)?;
    fs::write(dir.join("metrics.csv"), metrics.to_csv())?;
    if bundle.has(ModelKind::Irc) {
        fs::write(dir.join("trace.csv"), iteration_trace(bundle, data)?.to_csv())?;
    }
    for metric in [ErrorMetric::Mse, ErrorMetric::Mae] {
        let h = model_histogram(bundle, data, metric, SplitName::Test)?;
        fs::write(dir.join(format!("histogram_{}.csv", metric.as_str())), h.to_csv())?;
    }
    if let Some((target, truth)) = reference {
        if ModelKind::ALL.iter().all(|k| bundle.has(*k)) {
            fs::write(
                dir.join("comparison_table.csv"),
                comparison_table(bundle, target, truth)?.to_csv(),
            )?;
        }
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_bins() {
        assert_eq!(histogram_bin(0.01), Some(30));
        assert_eq!(histogram_bin(1e-5), Some(0));
        assert_eq!(histogram_bin(0.0), None);
        assert_eq!(histogram_bin(1e-6), None);
        assert_eq!(histogram_bin(1.0), Some(HIST_BINS));
        assert_eq!(histogram_bin(0.99), Some(49));
        assert_eq!(histogram_bin(10f64.powf(-1.9)), Some(31));
    }

    #[test]
    fn histogram_conserves_mass() {
        let e = [0.0, 0.01, 0.01, 3.0, 1e-7, 0.2];
        let h = error_histogram(&e).unwrap();
        assert_eq!(h.total(), 6);
        assert_eq!(h.underflow, 2);
        assert_eq!(h.overflow, 1);
        assert_eq!(h.bins[30], 2);
        assert!(matches!(error_histogram(&[-1.0]), Err(EvalError::InvalidError(_))));
        let same = error_histogram(&[0.003; 9]).unwrap();
        assert_eq!(same.bins.iter().filter(|c| **c > 0).count(), 1);
    }

    #[test]
    fn verdicts() {
        assert_eq!(
            trend_verdict(&[Some(3.0), Some(2.0), Some(1.0)]),
            TrendVerdict::StrictlyDecreasing
        );
        assert_eq!(trend_verdict(&[Some(1.0), Some(2.0)]), TrendVerdict::StrictlyIncreasing);
        assert_eq!(trend_verdict(&[Some(1.0), Some(1.0)]), TrendVerdict::Flat);
        assert_eq!(
            trend_verdict(&[Some(1.0), Some(2.0), Some(1.5)]),
            TrendVerdict::NonMonotonic
        );
        assert_eq!(trend_verdict(&[Some(1.0), None]), TrendVerdict::Undetermined);
    }

    #[test]
    fn parameter_names_parse() {
        assert_eq!("d1".parse::<Parameter>().unwrap(), Parameter::D1);
        assert_eq!("G".parse::<Parameter>().unwrap(), Parameter::G);
        assert!("R4".parse::<Parameter>().is_err());
        let g = Parameter::R2.set(&Geometry::reference(), 0.6);
        assert_eq!(g.r2, 0.6);
    }

    fn bounds() -> [(f64, f64); 6] {
        [
            (4.0, 10.0),
            (4.0, 10.0),
            (0.2, 1.0),
            (0.2, 1.0),
            (0.2, 1.0),
            (26.0, 36.0),
        ]
    }

    #[test]
    fn snapping_repairs_order_and_range() {
        let g = Geometry::from_array([3.0, 11.0, 0.9, 0.1, 0.5, 20.0]);
        let s = snap_geometry(&g, &bounds()).unwrap();
        assert_eq!([s.d1, s.d2], [4.0, 10.0]);
        assert_eq!([s.r1, s.r2, s.r3], [0.2, 0.5, 0.9]);
        assert_eq!(s.g, 26.0);
        // Threshold (2 * 20 - 0.4) / 1.3 = 30.4615 forces a lift.
        let g = Geometry::from_array([8.0, 9.0, 0.9, 0.1, 0.5, 20.0]);
        let s = snap_geometry(&g, &bounds()).unwrap();
        assert!(wave::satisfies_g_constraint(&s));
        assert!((s.g - (39.6 / 1.3 + SNAP_G_MARGIN)).abs() < 1e-12);
        let reference = Geometry::reference();
        assert_eq!(snap_geometry(&reference, &bounds()).unwrap(), reference);
    }

    #[test]
    fn snapping_reports_infeasible() {
        let g = Geometry::from_array([10.0, 10.0, 1.0, 1.0, 1.0, 36.0]);
        assert!(snap_geometry(&g, &bounds()).is_err());
        let g = Geometry::from_array([f64::NAN, 5.0, 0.2, 0.2, 0.2, 30.0]);
        assert!(snap_geometry(&g, &bounds()).is_err());
    }

    #[test]
    fn trace_csv_round_trip() {
        let t = IterationTrace {
            points: (0..6)
                .map(|i| TracePoint {
                    iteration: i,
                    mse: 0.1 / (i + 1) as f64,
                    mae: 1.0 / 3.0,
                })
                .collect(),
        };
        assert_eq!(IterationTrace::from_csv(&t.to_csv()).unwrap(), t);
        assert!(t.non_increasing_within(0.05));
        assert!(IterationTrace::from_csv("nope\n").is_err());
    }

    #[test]
    fn spectrum_csv_round_trip() {
        let grid = FrequencyGrid::new(9.0, 20.0, 5).unwrap();
        let s = Spectrum::new(grid, vec![0.1, 0.2, 0.3, 0.4, 0.123456789012345], vec![0.9; 5]).unwrap();
        let text = write_spectrum_csv(&s);
        assert!(text.starts_with("frequency_GHz,s11_mag,s21_mag\n9.00000000000e0,"));
        let back = read_spectrum_csv(&text, Some(&grid)).unwrap();
        assert_eq!(back.grid, grid);
        assert!((back.s11_mag[4] - 0.123456789012).abs() < 1e-12);
        let other = FrequencyGrid::new(9.0, 20.0, 7).unwrap();
        assert!(matches!(
            read_spectrum_csv(&text, Some(&other)),
            Err(EvalError::Pipeline(PipelineError::GridMismatch { .. }))
        ));
        assert!(read_spectrum_csv("frequency_GHz,s11_mag,s21_mag\n9,0.1,0.9\n", None).is_err());
    }
}
