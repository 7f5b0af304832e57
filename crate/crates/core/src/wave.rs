//! Surrogate forward solver for the post-loaded SIW resonator.
//!
//! The substrate-integrated waveguide is replaced by its equivalent
//! rectangular waveguide (width `W_eff`). Each metallic post is a thin shunt
//! inductive reactance and the spacings between posts are lossless line
//! sections. The two-port response is the ordered product of the section
//! ABCD matrices, evaluated independently at every frequency point.

use std::f64::consts::PI;
use std::ops::Mul;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speed of light used throughout the solver, m/s.
pub const SPEED_OF_LIGHT: f64 = 2.998e8;

/// Magnitude threshold (-10 dB) below which an `|S11|` dip counts as a resonance.
pub const RESONANCE_THRESHOLD: f64 = 0.316;

/// Lower clamp applied to the normalized post reactance.
pub const MIN_POST_REACTANCE: f64 = 0.01;

/// Shortest end section allowed between the port reference plane and the first post, mm.
pub const MIN_END_LENGTH_MM: f64 = 0.1;

/// Identifies the solver revision in dataset manifests.
pub const SOLVER_VERSION: &str = "siw-abcd-cascade/1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WaveError {
    #[error("invalid substrate: {0}")]
    InvalidSubstrate(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid frequency grid: {0}")]
    InvalidGrid(String),
    #[error("{frequency_ghz} GHz is at or below the TE10 cutoff {cutoff_ghz} GHz")]
    BelowCutoff { frequency_ghz: f64, cutoff_ghz: f64 },
    #[error("geometry does not fit the active length: end section would be {end_length_mm} mm")]
    InfeasibleGeometry { end_length_mm: f64 },
    #[error("degenerate ABCD matrix: a + b + c + d = 0")]
    Degenerate,
}

/// Substrate and sidewall-via parameters. Lengths in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubstrateSpec {
    pub relative_permittivity: f64,
    pub width_mm: f64,
    pub via_diameter_mm: f64,
    pub via_pitch_mm: f64,
}

impl Default for SubstrateSpec {
    /// RT5880 board with the reference sidewall vias.
    fn default() -> Self {
        Self {
            relative_permittivity: 2.2,
            width_mm: 15.0,
            via_diameter_mm: 0.8,
            via_pitch_mm: 1.3,
        }
    }
}

impl SubstrateSpec {
    pub fn validate(&self) -> Result<(), WaveError> {
        let finite = [
            self.relative_permittivity,
            self.width_mm,
            self.via_diameter_mm,
            self.via_pitch_mm,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(WaveError::InvalidSubstrate("non-finite field".into()));
        }
        if self.relative_permittivity < 1.0 {
            return Err(WaveError::InvalidSubstrate(format!(
                "relative permittivity {} < 1",
                self.relative_permittivity
            )));
        }
        if self.width_mm <= 0.0 {
            return Err(WaveError::InvalidSubstrate(format!(
                "width {} mm must be positive",
                self.width_mm
            )));
        }
        if self.via_diameter_mm <= 0.0 || self.via_pitch_mm <= 0.0 {
            return Err(WaveError::InvalidSubstrate(
                "via diameter and pitch must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// The six design parameters of the resonator. Lengths in mm, `g` dimensionless.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub d1: f64,
    pub d2: f64,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub g: f64,
}

/// Parameter names in the canonical `[D1, D2, R1, R2, R3, G]` order.
pub const PARAMETER_NAMES: [&str; 6] = ["D1", "D2", "R1", "R2", "R3", "G"];

impl Geometry {
    /// The reference structure: D1 5.5, D2 8, radii 0.2/0.4/0.8 mm, G 26.
    pub fn reference() -> Self {
        Self {
            d1: 5.5,
            d2: 8.0,
            r1: 0.2,
            r2: 0.4,
            r3: 0.8,
            g: 26.0,
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.d1, self.d2, self.r1, self.r2, self.r3, self.g]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            d1: v[0],
            d2: v[1],
            r1: v[2],
            r2: v[3],
            r3: v[4],
            g: v[5],
        }
    }

    /// Smallest admissible `G` is strictly above this value.
    pub fn g_threshold(&self) -> f64 {
        ((self.r1 + 2.0 * self.r2 + self.d1 + self.d2 + 2.0 * self.r3) * 2.0 - 0.4) / 1.3
    }

    /// `R3 >= R2 >= R1 > 0`, positive spacings and the spacing constraint on `G`.
    pub fn validate(&self) -> Result<(), WaveError> {
        self.validate_structure()?;
        if !satisfies_g_constraint(self) {
            return Err(WaveError::InvalidGeometry(format!(
                "G = {} does not exceed {}",
                self.g,
                self.g_threshold()
            )));
        }
        Ok(())
    }

    /// Everything in [`Geometry::validate`] except the `G` inequality.
    pub fn validate_structure(&self) -> Result<(), WaveError> {
        if !self.to_array().iter().all(|v| v.is_finite()) {
            return Err(WaveError::InvalidGeometry("non-finite parameter".into()));
        }
        if self.r1 <= 0.0 {
            return Err(WaveError::InvalidGeometry(format!("R1 = {} must be positive", self.r1)));
        }
        if !(self.r3 >= self.r2 && self.r2 >= self.r1) {
            return Err(WaveError::InvalidGeometry(format!(
                "radii must satisfy R3 >= R2 >= R1, got ({}, {}, {})",
                self.r1, self.r2, self.r3
            )));
        }
        if self.d1 <= 0.0 || self.d2 <= 0.0 {
            return Err(WaveError::InvalidGeometry("post spacings must be positive".into()));
        }
        Ok(())
    }
}

/// Strict `threshold < G`. Exact ties (reachable on decimal grids) are
/// rejected regardless of floating-point rounding.
pub fn satisfies_g_constraint(g: &Geometry) -> bool {
    g.g_threshold() < g.g - 1e-9
}

/// Uniform frequency grid in GHz, endpoints inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrequencyGrid {
    pub start_ghz: f64,
    pub stop_ghz: f64,
    pub n_points: usize,
}

impl Default for FrequencyGrid {
    fn default() -> Self {
        Self {
            start_ghz: 9.0,
            stop_ghz: 20.0,
            n_points: 1001,
        }
    }
}

impl FrequencyGrid {
    pub fn new(start_ghz: f64, stop_ghz: f64, n_points: usize) -> Result<Self, WaveError> {
        let grid = Self {
            start_ghz,
            stop_ghz,
            n_points,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), WaveError> {
        if !(self.start_ghz.is_finite() && self.stop_ghz.is_finite()) || self.start_ghz >= self.stop_ghz {
            return Err(WaveError::InvalidGrid(format!(
                "need start < stop, got [{}, {}]",
                self.start_ghz, self.stop_ghz
            )));
        }
        if self.n_points < 2 {
            return Err(WaveError::InvalidGrid("need at least two points".into()));
        }
        Ok(())
    }

    pub fn step_ghz(&self) -> f64 {
        (self.stop_ghz - self.start_ghz) / (self.n_points - 1) as f64
    }

    pub fn frequency(&self, index: usize) -> f64 {
        if index + 1 == self.n_points {
            self.stop_ghz
        } else {
            self.start_ghz + index as f64 * self.step_ghz()
        }
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.frequency(i)).collect()
    }
}

/// Two-port magnitude response on a frequency grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub grid: FrequencyGrid,
    pub s11_mag: Vec<f64>,
    pub s21_mag: Vec<f64>,
}

impl Spectrum {
    pub fn new(grid: FrequencyGrid, s11_mag: Vec<f64>, s21_mag: Vec<f64>) -> Result<Self, WaveError> {
        grid.validate()?;
        if s11_mag.len() != grid.n_points || s21_mag.len() != grid.n_points {
            return Err(WaveError::InvalidGrid(format!(
                "expected {} points per channel, got {} and {}",
                grid.n_points,
                s11_mag.len(),
                s21_mag.len()
            )));
        }
        Ok(Self { grid, s11_mag, s21_mag })
    }

    /// `[|S11| ..., |S21| ...]`, the network input layout.
    pub fn to_features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.s11_mag.len());
        out.extend_from_slice(&self.s11_mag);
        out.extend_from_slice(&self.s21_mag);
        out
    }

    pub fn from_features(grid: FrequencyGrid, features: &[f64]) -> Result<Self, WaveError> {
        if features.len() != 2 * grid.n_points {
            return Err(WaveError::InvalidGrid(format!(
                "feature vector has {} entries, grid needs {}",
                features.len(),
                2 * grid.n_points
            )));
        }
        let (s11, s21) = features.split_at(grid.n_points);
        Self::new(grid, s11.to_vec(), s21.to_vec())
    }

    /// Largest deviation of `|S11|^2 + |S21|^2` from one.
    pub fn max_unitarity_error(&self) -> f64 {
        self.s11_mag
            .iter()
            .zip(&self.s21_mag)
            .map(|(a, b)| (a * a + b * b - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// ABCD transfer matrix, normalized to a unit reference impedance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbcdMatrix {
    pub a: Complex64,
    pub b: Complex64,
    pub c: Complex64,
    pub d: Complex64,
}

impl AbcdMatrix {
    pub fn identity() -> Self {
        Self {
            a: Complex64::new(1.0, 0.0),
            b: Complex64::new(0.0, 0.0),
            c: Complex64::new(0.0, 0.0),
            d: Complex64::new(1.0, 0.0),
        }
    }

    /// Matched lossless line of electrical length `theta` radians.
    pub fn line(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self {
            a: Complex64::new(c, 0.0),
            b: Complex64::new(0.0, s),
            c: Complex64::new(0.0, s),
            d: Complex64::new(c, 0.0),
        }
    }

    /// Shunt element of normalized reactance `x` (admittance `1 / (j x)`).
    pub fn shunt_reactance(x: f64) -> Self {
        Self {
            a: Complex64::new(1.0, 0.0),
            b: Complex64::new(0.0, 0.0),
            c: Complex64::new(0.0, -1.0 / x),
            d: Complex64::new(1.0, 0.0),
        }
    }

    pub fn determinant(&self) -> Complex64 {
        self.a * self.d - self.b * self.c
    }

    /// The same network seen from port 2.
    pub fn reversed(&self) -> Self {
        Self {
            a: self.d,
            b: self.b,
            c: self.c,
            d: self.a,
        }
    }
}

impl Mul for AbcdMatrix {
    type Output = AbcdMatrix;

    /// `self` followed by `rhs`.
    fn mul(self, rhs: AbcdMatrix) -> AbcdMatrix {
        AbcdMatrix {
            a: self.a * rhs.a + self.b * rhs.c,
            b: self.a * rhs.b + self.b * rhs.d,
            c: self.c * rhs.a + self.d * rhs.c,
            d: self.c * rhs.b + self.d * rhs.d,
        }
    }
}

/// Converts a normalized ABCD matrix to `(S11, S21)`.
pub fn abcd_to_s(m: &AbcdMatrix) -> Result<(Complex64, Complex64), WaveError> {
    let den = m.a + m.b + m.c + m.d;
    if den.norm() == 0.0 || !den.is_finite() {
        return Err(WaveError::Degenerate);
    }
    let s21 = Complex64::new(2.0, 0.0) / den;
    let s11 = (m.a + m.b - m.c - m.d) / den;
    Ok((s11, s21))
}

/// `S22` of a normalized ABCD matrix.
pub fn abcd_to_s22(m: &AbcdMatrix) -> Result<Complex64, WaveError> {
    let den = m.a + m.b + m.c + m.d;
    if den.norm() == 0.0 || !den.is_finite() {
        return Err(WaveError::Degenerate);
    }
    Ok((-m.a + m.b - m.c + m.d) / den)
}

/// Equivalent rectangular-waveguide width `W - d^2 / (0.95 p)`, mm.
pub fn effective_width(spec: &SubstrateSpec) -> Result<f64, WaveError> {
    spec.validate()?;
    let w_eff = spec.width_mm - spec.via_diameter_mm * spec.via_diameter_mm / (0.95 * spec.via_pitch_mm);
    if w_eff <= 0.0 || w_eff <= spec.via_diameter_mm {
        return Err(WaveError::InvalidSubstrate(format!(
            "effective width {w_eff} mm must be positive and exceed the via diameter"
        )));
    }
    Ok(w_eff)
}

/// TE10 cutoff of the equivalent waveguide, GHz.
pub fn cutoff_frequency(spec: &SubstrateSpec) -> Result<f64, WaveError> {
    let w_eff_m = effective_width(spec)? * 1e-3;
    Ok(SPEED_OF_LIGHT / (2.0 * w_eff_m * spec.relative_permittivity.sqrt()) / 1e9)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Propagation {
    /// Phase constant, rad/m.
    pub beta: f64,
    /// Guided wavelength, mm.
    pub lambda_g_mm: f64,
}

pub fn propagation(spec: &SubstrateSpec, frequency_ghz: f64) -> Result<Propagation, WaveError> {
    let w_eff_mm = effective_width(spec)?;
    propagation_with_width(spec.relative_permittivity, w_eff_mm, frequency_ghz)
}

fn propagation_with_width(eps_r: f64, w_eff_mm: f64, frequency_ghz: f64) -> Result<Propagation, WaveError> {
    let k = 2.0 * PI * frequency_ghz * 1e9 * eps_r.sqrt() / SPEED_OF_LIGHT;
    let kc = PI / (w_eff_mm * 1e-3);
    let beta_sq = k * k - kc * kc;
    if beta_sq.is_nan() || beta_sq <= 0.0 {
        return Err(WaveError::BelowCutoff {
            frequency_ghz,
            cutoff_ghz: SPEED_OF_LIGHT / (2.0 * w_eff_mm * 1e-3 * eps_r.sqrt()) / 1e9,
        });
    }
    let beta = beta_sq.sqrt();
    Ok(Propagation {
        beta,
        lambda_g_mm: 2.0 * PI / beta * 1e3,
    })
}

/// Per-rule margins from [`check_via_rules`]. Positive margins pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ViaRuleReport {
    pub passes: bool,
    /// `p - d`, mm.
    pub diameter_margin_mm: f64,
    /// `lambda_g / 4 - p` at the top of the grid, mm.
    pub pitch_margin_mm: f64,
    pub lambda_g_mm: f64,
}

/// Leakage rules `d < p` and `p < lambda_g / 4`, with the guided wavelength
/// taken at the highest grid frequency.
pub fn check_via_rules(spec: &SubstrateSpec, grid: &FrequencyGrid) -> Result<ViaRuleReport, WaveError> {
    spec.validate()?;
    grid.validate()?;
    let lambda_g_mm = propagation(spec, grid.stop_ghz)?.lambda_g_mm;
    let diameter_margin_mm = spec.via_pitch_mm - spec.via_diameter_mm;
    let pitch_margin_mm = lambda_g_mm / 4.0 - spec.via_pitch_mm;
    Ok(ViaRuleReport {
        passes: via_rules_pass(diameter_margin_mm, pitch_margin_mm),
        diameter_margin_mm,
        pitch_margin_mm,
        lambda_g_mm,
    })
}

fn via_rules_pass(diameter_margin_mm: f64, pitch_margin_mm: f64) -> bool {
    diameter_margin_mm > 0.0 && pitch_margin_mm > 0.0
}

/// Normalized reactance of a centered inductive post,
/// `(W_eff / lambda_g) (ln(W_eff / (pi r)) - 1)`, clamped below.
pub fn post_reactance(spec: &SubstrateSpec, radius_mm: f64, frequency_ghz: f64) -> Result<f64, WaveError> {
    let w_eff = effective_width(spec)?;
    let prop = propagation_with_width(spec.relative_permittivity, w_eff, frequency_ghz)?;
    Ok(reactance_from(w_eff, prop.lambda_g_mm, radius_mm))
}

fn reactance_from(w_eff_mm: f64, lambda_g_mm: f64, radius_mm: f64) -> f64 {
    let x = (w_eff_mm / lambda_g_mm) * ((w_eff_mm / (PI * radius_mm)).ln() - 1.0);
    x.max(MIN_POST_REACTANCE)
}

/// Knobs for test harnesses; the default is the production cascade.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CascadeOptions {
    /// Replaces the end-section length derived from `G`, mm.
    pub end_length_override_mm: Option<f64>,
    /// Accept geometries on the wrong side of the `G` inequality as long as
    /// they are physically buildable (non-negative end sections).
    pub relax_g_constraint: bool,
}

/// Length of each of the two end sections, mm.
pub fn end_length(spec: &SubstrateSpec, g: &Geometry) -> Result<f64, WaveError> {
    let active = g.g * spec.via_pitch_mm + spec.via_diameter_mm;
    let footprint = 2.0 * g.r1 + 4.0 * g.r2 + 2.0 * g.r3 + 2.0 * g.d1 + 2.0 * g.d2;
    let raw = (active - footprint) / 2.0;
    if raw < 0.0 {
        return Err(WaveError::InfeasibleGeometry { end_length_mm: raw });
    }
    Ok(raw.max(MIN_END_LENGTH_MM))
}

/// The symmetric cascade
/// `L_end | R1 | D1 | R2 | D2 | R3 | D2 | R2 | D1 | R1 | L_end`
/// at a single frequency.
pub fn cascade_at(
    spec: &SubstrateSpec,
    g: &Geometry,
    frequency_ghz: f64,
    options: &CascadeOptions,
) -> Result<AbcdMatrix, WaveError> {
    let w_eff = effective_width(spec)?;
    let l_end = match options.end_length_override_mm {
        Some(l) => l,
        None => end_length(spec, g)?,
    };
    let prop = propagation_with_width(spec.relative_permittivity, w_eff, frequency_ghz)?;
    Ok(cascade_with(w_eff, &prop, g, l_end))
}

fn cascade_with(w_eff: f64, prop: &Propagation, g: &Geometry, l_end: f64) -> AbcdMatrix {
    let line = |len_mm: f64| AbcdMatrix::line(prop.beta * len_mm * 1e-3);
    let post = |r: f64| AbcdMatrix::shunt_reactance(reactance_from(w_eff, prop.lambda_g_mm, r));
    let sections = [
        line(l_end),
        post(g.r1),
        line(g.d1),
        post(g.r2),
        line(g.d2),
        post(g.r3),
        line(g.d2),
        post(g.r2),
        line(g.d1),
        post(g.r1),
        line(l_end),
    ];
    sections
        .iter()
        .fold(AbcdMatrix::identity(), |acc, section| acc * *section)
}

pub fn simulate(spec: &SubstrateSpec, g: &Geometry, grid: &FrequencyGrid) -> Result<Spectrum, WaveError> {
    simulate_with(spec, g, grid, &CascadeOptions::default())
}

pub fn simulate_with(
    spec: &SubstrateSpec,
    g: &Geometry,
    grid: &FrequencyGrid,
    options: &CascadeOptions,
) -> Result<Spectrum, WaveError> {
    grid.validate()?;
    if options.relax_g_constraint {
        g.validate_structure()?;
    } else {
        g.validate()?;
    }
    let w_eff = effective_width(spec)?;
    let l_end = match options.end_length_override_mm {
        Some(l) => l,
        None => end_length(spec, g)?,
    };
    let mut s11_mag = Vec::with_capacity(grid.n_points);
    let mut s21_mag = Vec::with_capacity(grid.n_points);
    for i in 0..grid.n_points {
        let prop = propagation_with_width(spec.relative_permittivity, w_eff, grid.frequency(i))?;
        let m = cascade_with(w_eff, &prop, g, l_end);
        let (s11, s21) = abcd_to_s(&m)?;
        s11_mag.push(s11.norm());
        s21_mag.push(s21.norm());
    }
    Ok(Spectrum {
        grid: *grid,
        s11_mag,
        s21_mag,
    })
}

/// Frequencies of the `|S11|` dips below [`RESONANCE_THRESHOLD`], ascending.
///
/// A dip is a run of equal samples strictly lower than both neighbours; the
/// run reports its first index. Grid endpoints never qualify.
pub fn find_resonances(s: &Spectrum) -> Vec<f64> {
    let v = &s.s11_mag;
    let mut out = Vec::new();
    let mut i = 1;
    while i + 1 < v.len() {
        let mut j = i;
        while j + 1 < v.len() && v[j + 1] == v[i] {
            j += 1;
        }
        if j + 1 < v.len() && v[i] < v[i - 1] && v[i] < v[j + 1] && v[i] < RESONANCE_THRESHOLD {
            out.push(s.grid.frequency(i));
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::assert_close;

    mod approx_eq {
        macro_rules! assert_close {
            ($a:expr, $b:expr, $tol:expr) => {{
                let (a, b, tol): (f64, f64, f64) = ($a, $b, $tol);
                assert!((a - b).abs() <= tol, "{} vs {} (tol {})", a, b, tol);
            }};
        }
        pub(crate) use assert_close;
    }

    fn spec(w: f64, d: f64, p: f64, er: f64) -> SubstrateSpec {
        SubstrateSpec {
            relative_permittivity: er,
            width_mm: w,
            via_diameter_mm: d,
            via_pitch_mm: p,
        }
    }

    #[test]
    fn effective_width_examples() {
        assert_close!(effective_width(&SubstrateSpec::default()).unwrap(), 14.4818, 1e-4);
        assert_close!(effective_width(&spec(15.0, 1e-9, 1.3, 2.2)).unwrap(), 15.0, 1e-9);
        assert_close!(effective_width(&spec(10.0, 1.0, 1.0, 2.2)).unwrap(), 8.9474, 1e-4);
    }

    #[test]
    fn effective_width_rejects_non_positive() {
        let s = spec(0.5, 0.9, 1.0, 2.2);
        assert!(matches!(effective_width(&s), Err(WaveError::InvalidSubstrate(_))));
    }

    #[test]
    fn cutoff_examples() {
        assert_close!(cutoff_frequency(&SubstrateSpec::default()).unwrap(), 6.98, 0.005);
        // W_eff = 15 mm with vanishing vias.
        let free = spec(15.0, 1e-9, 1.3, 1.0);
        assert_close!(cutoff_frequency(&free).unwrap(), 9.993, 0.005);
        let wide = spec(30.0, 1e-9, 1.3, 1.0);
        assert_close!(
            cutoff_frequency(&wide).unwrap(),
            cutoff_frequency(&free).unwrap() / 2.0,
            1e-6
        );
    }

    #[test]
    fn propagation_at_12_ghz() {
        let p = propagation(&SubstrateSpec::default(), 12.0).unwrap();
        assert_close!(p.beta, 303.4, 0.1);
        assert_close!(p.lambda_g_mm, 20.7, 0.01);
    }

    #[test]
    fn propagation_limits() {
        let s = SubstrateSpec::default();
        let fc = cutoff_frequency(&s).unwrap();
        let near = propagation(&s, fc * (1.0 + 1e-9)).unwrap();
        assert!(near.beta > 0.0 && near.beta < 1.0);
        assert!(near.lambda_g_mm > 1e4);
        assert!(matches!(propagation(&s, fc * 0.99), Err(WaveError::BelowCutoff { .. })));

        let huge = spec(1e9, 1e-9, 1.3, 1.0);
        let p = propagation(&huge, 10.0).unwrap();
        let free_space = 2.0 * PI * 10e9 / SPEED_OF_LIGHT;
        assert_close!(p.beta, free_space, 1e-6 * free_space);
    }

    #[test]
    fn via_rules() {
        let grid = FrequencyGrid::default();
        let report = check_via_rules(&SubstrateSpec::default(), &grid).unwrap();
        assert!(report.passes);
        assert_close!(report.lambda_g_mm, 10.784, 1e-3);
        assert_close!(report.pitch_margin_mm, 10.784 / 4.0 - 1.3, 1e-3);

        let bad = spec(15.0, 1.4, 1.3, 2.2);
        let report = check_via_rules(&bad, &grid).unwrap();
        assert!(!report.passes);
        assert!(report.diameter_margin_mm < 0.0);
    }

    #[test]
    fn via_pitch_boundary_is_strict() {
        let mut s = SubstrateSpec::default();
        let grid = FrequencyGrid::default();
        // W_eff depends on p, so iterate p = lambda_g(p) / 4 to a fixed point.
        for _ in 0..200 {
            let lg = propagation(&s, grid.stop_ghz).unwrap().lambda_g_mm;
            s.via_pitch_mm = lg / 4.0;
        }
        let report = check_via_rules(&s, &grid).unwrap();
        assert!(report.pitch_margin_mm.abs() < 1e-12);
        assert_eq!(report.passes, report.pitch_margin_mm > 0.0);
        assert!(!via_rules_pass(0.5, 0.0));
        assert!(!via_rules_pass(0.0, 0.5));
    }

    #[test]
    fn below_cutoff_grid_errors() {
        let grid = FrequencyGrid::new(1.0, 20.0, 11).unwrap();
        assert!(check_via_rules(&SubstrateSpec::default(), &grid).is_ok());
        let low = FrequencyGrid::new(1.0, 5.0, 11).unwrap();
        assert!(matches!(
            check_via_rules(&SubstrateSpec::default(), &low),
            Err(WaveError::BelowCutoff { .. })
        ));
    }

    #[test]
    fn post_reactance_example_and_trends() {
        let s = SubstrateSpec::default();
        assert_close!(post_reactance(&s, 0.8, 12.0).unwrap(), 0.525, 5e-4);
        assert!(post_reactance(&s, 1e-6, 12.0).unwrap() > 5.0);
        let thin = post_reactance(&s, 0.2, 12.0).unwrap();
        let thick = post_reactance(&s, 0.6, 12.0).unwrap();
        assert!(thin > thick);
        assert!(post_reactance(&s, 0.6, 15.0).unwrap() > thick);
        // Radius wider than the guide clamps.
        assert_eq!(post_reactance(&s, 10.0, 12.0).unwrap(), MIN_POST_REACTANCE);
    }

    #[test]
    fn abcd_to_s_examples() {
        let (s11, s21) = abcd_to_s(&AbcdMatrix::identity()).unwrap();
        assert_close!(s11.norm(), 0.0, 1e-15);
        assert_close!(s21.norm(), 1.0, 1e-15);

        let (s11, s21) = abcd_to_s(&AbcdMatrix::line(0.73)).unwrap();
        assert_close!(s11.norm(), 0.0, 1e-15);
        assert_close!(s21.norm(), 1.0, 1e-15);

        let (s11, _) = abcd_to_s(&AbcdMatrix::shunt_reactance(0.5)).unwrap();
        assert_close!(s11.norm(), 1.0 / 2f64.sqrt(), 1e-12);

        let zero = AbcdMatrix {
            a: Complex64::new(1.0, 0.0),
            b: Complex64::new(-1.0, 0.0),
            c: Complex64::new(0.0, 0.0),
            d: Complex64::new(0.0, 0.0),
        };
        assert_eq!(abcd_to_s(&zero), Err(WaveError::Degenerate));
    }

    #[test]
    fn cascade_properties_reference_geometry() {
        let s = SubstrateSpec::default();
        let g = Geometry::reference();
        for f in [9.0, 12.5, 17.3, 20.0] {
            let m = cascade_at(&s, &g, f, &CascadeOptions::default()).unwrap();
            assert!((m.determinant() - Complex64::new(1.0, 0.0)).norm() < 1e-12);
            let (s11, _) = abcd_to_s(&m).unwrap();
            let s22 = abcd_to_s22(&m.reversed()).unwrap();
            assert!((s11.norm() - s22.norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn end_length_reference() {
        assert_close!(
            end_length(&SubstrateSpec::default(), &Geometry::reference()).unwrap(),
            2.0,
            1e-12
        );
        let crowded = Geometry {
            g: 20.0,
            ..Geometry::reference()
        };
        assert!(matches!(
            end_length(&SubstrateSpec::default(), &crowded),
            Err(WaveError::InfeasibleGeometry { .. })
        ));
    }

    #[test]
    fn transparent_posts_pass_everything() {
        // The reactance only grows like ln(1/r), so the limit needs a very thin post.
        let g = Geometry {
            r1: 1e-30,
            r2: 1e-30,
            r3: 1e-30,
            ..Geometry::reference()
        };
        let sp = simulate(&SubstrateSpec::default(), &g, &FrequencyGrid::default()).unwrap();
        assert!(sp.s21_mag.iter().all(|&v| v >= 0.99));
        assert!(sp.max_unitarity_error() < 1e-9);
    }

    #[test]
    fn simulate_rejects_invalid_geometry() {
        let g = Geometry {
            r1: 0.9,
            ..Geometry::reference()
        };
        assert!(matches!(
            simulate(&SubstrateSpec::default(), &g, &FrequencyGrid::default()),
            Err(WaveError::InvalidGeometry(_))
        ));
    }

    #[test]
    fn g_constraint_reference() {
        let g = Geometry::reference();
        assert_close!(g.g_threshold(), 24.4615, 1e-4);
        assert!(g.validate().is_ok());
        let big = Geometry {
            d1: 10.0,
            d2: 10.0,
            r1: 1.0,
            r2: 1.0,
            r3: 1.0,
            g: 36.0,
        };
        assert_close!(big.g_threshold(), 38.15, 1e-2);
        assert!(big.validate().is_err());
    }

    #[test]
    fn resonances_synthetic() {
        let grid = FrequencyGrid::new(9.0, 20.0, 11).unwrap();
        let flat = Spectrum::new(grid, vec![0.9; 11], vec![0.1; 11]).unwrap();
        assert!(find_resonances(&flat).is_empty());

        let mut s11 = vec![0.9; 11];
        s11[4] = 0.1;
        let dip = Spectrum::new(grid, s11, vec![0.5; 11]).unwrap();
        assert_eq!(find_resonances(&dip), vec![grid.frequency(4)]);

        // Plateau reports its first index; a plateau that keeps descending does not count.
        let s11 = vec![0.9, 0.5, 0.2, 0.2, 0.2, 0.6, 0.9, 0.3, 0.2, 0.2, 0.1];
        let sp = Spectrum::new(grid, s11, vec![0.5; 11]).unwrap();
        assert_eq!(find_resonances(&sp), vec![grid.frequency(2)]);
    }

    #[test]
    fn frequency_grid_spacing() {
        let g = FrequencyGrid::default();
        assert_close!(g.step_ghz(), 0.011, 1e-15);
        assert_eq!(g.frequency(1000), 20.0);
        assert_eq!(g.frequency(0), 9.0);
        assert!(FrequencyGrid::new(20.0, 9.0, 10).is_err());
        assert!(FrequencyGrid::new(9.0, 20.0, 1).is_err());
    }
}
