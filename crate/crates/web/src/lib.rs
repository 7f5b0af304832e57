//! wasm-bindgen bindings for the static demo page in `www/`.
//!
//! Three operations: simulate one geometry, sweep one parameter and report
//! how the lowest resonance moves, and a substrate waveguide calculator.

use siw_core::eval::{trend_check, Parameter};
use siw_core::wave::{self, CascadeOptions, FrequencyGrid, Geometry, SubstrateSpec};
use wasm_bindgen::prelude::*;

/// Largest grid the page may request.
pub const MAX_POINTS: usize = 4001;

fn grid(start_ghz: f64, stop_ghz: f64, n_points: usize) -> Result<FrequencyGrid, String> {
    if n_points > MAX_POINTS {
        return Err(format!("at most {MAX_POINTS} frequency points"));
    }
    FrequencyGrid::new(start_ghz, stop_ghz, n_points).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub struct SpectrumView {
    frequencies: Vec<f64>,
    s11: Vec<f64>,
    s21: Vec<f64>,
    resonances: Vec<f64>,
    unitarity_error: f64,
    g_constraint_met: bool,
}

#[wasm_bindgen]
impl SpectrumView {
    #[wasm_bindgen(getter)]
    pub fn frequencies(&self) -> Vec<f64> {
        self.frequencies.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn s11(&self) -> Vec<f64> {
        self.s11.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn s21(&self) -> Vec<f64> {
        self.s21.clone()
    }

    /// In-band |S21| dips, GHz.
    #[wasm_bindgen(getter)]
    pub fn resonances(&self) -> Vec<f64> {
        self.resonances.clone()
    }

    #[wasm_bindgen(getter, js_name = unitarityError)]
    pub fn unitarity_error(&self) -> f64 {
        self.unitarity_error
    }

    /// False when the geometry is buildable but outside the dataset's `G` bound.
    #[wasm_bindgen(getter, js_name = gConstraintMet)]
    pub fn g_constraint_met(&self) -> bool {
        self.g_constraint_met
    }
}

/// Spectrum of one geometry on the reference substrate. Geometry in mm,
/// `g` dimensionless.
#[allow(clippy::too_many_arguments)]
#[wasm_bindgen]
pub fn simulate(
    d1: f64,
    d2: f64,
    r1: f64,
    r2: f64,
    r3: f64,
    g: f64,
    start_ghz: f64,
    stop_ghz: f64,
    n_points: usize,
) -> Result<SpectrumView, String> {
    let geom = Geometry { d1, d2, r1, r2, r3, g };
    let grid = grid(start_ghz, stop_ghz, n_points)?;
    let opts = CascadeOptions {
        relax_g_constraint: true,
        ..CascadeOptions::default()
    };
    let s = wave::simulate_with(&SubstrateSpec::default(), &geom, &grid, &opts).map_err(|e| e.to_string())?;
    Ok(SpectrumView {
        frequencies: grid.frequencies(),
        resonances: wave::find_resonances(&s),
        unitarity_error: s.max_unitarity_error(),
        g_constraint_met: wave::satisfies_g_constraint(&geom),
        s11: s.s11_mag,
        s21: s.s21_mag,
    })
}

#[wasm_bindgen]
pub struct SweepView {
    values: Vec<f64>,
    lowest: Vec<f64>,
    verdict: String,
    frequencies: Vec<f64>,
    curves: Vec<f64>,
}

#[wasm_bindgen]
impl SweepView {
    #[wasm_bindgen(getter)]
    pub fn values(&self) -> Vec<f64> {
        self.values.clone()
    }

    /// Lowest resonance per value, NaN where none is in band.
    #[wasm_bindgen(getter)]
    pub fn lowest(&self) -> Vec<f64> {
        self.lowest.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn verdict(&self) -> String {
        self.verdict.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn frequencies(&self) -> Vec<f64> {
        self.frequencies.clone()
    }

    /// |S21| per value, concatenated row by row.
    #[wasm_bindgen(getter)]
    pub fn curves(&self) -> Vec<f64> {
        self.curves.clone()
    }
}

/// Sweeps `parameter` (D1, D2, R1, R2, R3 or G) around the base geometry.
#[allow(clippy::too_many_arguments)]
#[wasm_bindgen]
pub fn sweep(
    parameter: &str,
    values: &[f64],
    d1: f64,
    d2: f64,
    r1: f64,
    r2: f64,
    r3: f64,
    g: f64,
    start_ghz: f64,
    stop_ghz: f64,
    n_points: usize,
) -> Result<SweepView, String> {
    let p: Parameter = parameter
        .parse()
        .map_err(|e: siw_core::eval::EvalError| e.to_string())?;
    if values.is_empty() {
        return Err("no sweep values".into());
    }
    let base = Geometry { d1, d2, r1, r2, r3, g };
    let grid = grid(start_ghz, stop_ghz, n_points)?;
    let spec = SubstrateSpec::default();
    let opts = CascadeOptions::default();
    let report = trend_check(&spec, &base, p, values, &grid, &opts).map_err(|e| e.to_string())?;
    let relaxed = CascadeOptions {
        relax_g_constraint: true,
        ..opts
    };
    let mut curves = Vec::with_capacity(values.len() * grid.n_points);
    for &v in values {
        let s = wave::simulate_with(&spec, &p.set(&base, v), &grid, &relaxed).map_err(|e| e.to_string())?;
        curves.extend(s.s21_mag);
    }
    Ok(SweepView {
        values: values.to_vec(),
        lowest: report
            .lowest_resonance_ghz
            .iter()
            .map(|f| f.unwrap_or(f64::NAN))
            .collect(),
        verdict: report.verdict.as_str().into(),
        frequencies: grid.frequencies(),
        curves,
    })
}

#[wasm_bindgen]
pub struct WaveguideView {
    effective_width_mm: f64,
    cutoff_ghz: f64,
    lambda_g_mm: f64,
    diameter_margin_mm: f64,
    pitch_margin_mm: f64,
}

#[wasm_bindgen]
impl WaveguideView {
    #[wasm_bindgen(getter, js_name = effectiveWidthMm)]
    pub fn effective_width_mm(&self) -> f64 {
        self.effective_width_mm
    }

    #[wasm_bindgen(getter, js_name = cutoffGhz)]
    pub fn cutoff_ghz(&self) -> f64 {
        self.cutoff_ghz
    }

    /// NaN below cutoff.
    #[wasm_bindgen(getter, js_name = lambdaGMm)]
    pub fn lambda_g_mm(&self) -> f64 {
        self.lambda_g_mm
    }

    /// `p - d`, positive when the vias do not touch.
    #[wasm_bindgen(getter, js_name = diameterMarginMm)]
    pub fn diameter_margin_mm(&self) -> f64 {
        self.diameter_margin_mm
    }

    /// `lambda_g / 4 - p`, positive when the via fence does not leak. NaN
    /// below cutoff.
    #[wasm_bindgen(getter, js_name = pitchMarginMm)]
    pub fn pitch_margin_mm(&self) -> f64 {
        self.pitch_margin_mm
    }

    #[wasm_bindgen(getter)]
    pub fn passes(&self) -> bool {
        self.diameter_margin_mm > 0.0 && self.pitch_margin_mm > 0.0
    }
}

/// Equivalent-waveguide figures of a substrate at one frequency.
#[wasm_bindgen]
pub fn waveguide(
    relative_permittivity: f64,
    width_mm: f64,
    via_diameter_mm: f64,
    via_pitch_mm: f64,
    frequency_ghz: f64,
) -> Result<WaveguideView, String> {
    let spec = SubstrateSpec {
        relative_permittivity,
        width_mm,
        via_diameter_mm,
        via_pitch_mm,
    };
    let effective_width_mm = wave::effective_width(&spec).map_err(|e| e.to_string())?;
    let cutoff_ghz = wave::cutoff_frequency(&spec).map_err(|e| e.to_string())?;
    let lambda_g_mm = match wave::propagation(&spec, frequency_ghz) {
        Ok(p) => p.lambda_g_mm,
        Err(wave::WaveError::BelowCutoff { .. }) => f64::NAN,
        Err(e) => return Err(e.to_string()),
    };
    Ok(WaveguideView {
        effective_width_mm,
        cutoff_ghz,
        lambda_g_mm,
        diameter_margin_mm: via_pitch_mm - via_diameter_mm,
        pitch_margin_mm: lambda_g_mm / 4.0 - via_pitch_mm,
    })
}
