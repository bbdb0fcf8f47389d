//! Scenario files, residual reports and the batch runner behind the
//! `theta-lab` binary.
//!
//! A scenario file holds one scenario object or a list of them:
//!
//! ```json
//! {"name": "kp-genus1", "kind": "kp", "seed": 7,
//!  "tolerances": {"kp": 1e-4}, "payload": {"lattice": {...}, ...}}
//! ```
//!
//! Each run produces a [`ResidualReport`] whose JSON form depends only on the
//! scenario, so reruns with the same seed are byte-identical. Timings are
//! kept beside the report, never inside it.

use crate::error::{Error, Result};
use crate::numerics::{c, median, C64};
use crate::pole_systems::{
    bethe_residual, bethe_solve, calibrate_flow, cm_flow, cm_flow_energy, cm_hamiltonian, heat_residual_perturbed,
    heat_to_lax_reduction, lax_residual, lax_residual_with, random_cm_state, random_cm_state_scaled, reduction_spectrum, rs_f,
    rs_flow, rs_hamiltonian, rs_lax, spectral_invariants, spectral_invariants_of, BetheTrajectory, CMState, RSState,
};
use crate::secant_conditions::{
    bdhe_condition_c_residual, cm_condition_c_residual, fit_flex_b, fit_tangent_trisecant_b, fit_trisecant_b, flex_residual_b,
    genus1_bdhe_datum, genus1_kp_datum, genus1_rs_datum, genus1_toda_involution_v, involution_kp_conditions,
    involution_toda_conditions, linear_problem_residual_bdhe, linear_problem_residual_kp, linear_problem_residual_rs,
    random_g2_datum, rs_condition_c_residual, sample_theta_divisor, tangent_trisecant_residual_b, trisecant_residual_b,
    validation_grid, ThetaDivisorSample,
};
use crate::siegel_theta::{addition_residual, quasiperiodicity_residual, PeriodMatrix, TruncationPolicy};
use crate::tau_divisor::{find_zeros, pole_dynamics_residual, TauLine, Window};
use crate::wave_ba::{
    bdhe_tau_residual, bdhe_theta_grid, genus1_one_point, genus1_two_point, kp_residual_with, toda_pair_residual, toda_residual,
    wave_recursion_with, GridResidual, KpConstant, TodaLayout, WaveOptions,
};
use crate::weierstrass::{EllipticLattice, LatticeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

// ---------------------------------------------------------------------------
// Scenarios

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    ThetaCheck,
    Cm,
    Rs,
    Bethe,
    Secant,
    Involution,
    Wave,
    Kp,
    Toda,
    Bdhe,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::ThetaCheck => "theta-check",
            Kind::Cm => "cm",
            Kind::Rs => "rs",
            Kind::Bethe => "bethe",
            Kind::Secant => "secant",
            Kind::Involution => "involution",
            Kind::Wave => "wave",
            Kind::Kp => "kp",
            Kind::Toda => "toda",
            Kind::Bdhe => "bdhe",
        }
    }
}

impl std::fmt::Display for Kind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    /// Directory for reports and artifacts when `--out` is not given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    /// Write CSV artifacts (trajectories, grids).
    #[serde(default = "yes")]
    pub artifacts: bool,
    /// Also write each artifact as a whitespace table for gnuplot.
    #[serde(default)]
    pub plot_data: bool,
}

impl Default for Outputs {
    fn default() -> Self {
        Self {
            dir: None,
            artifacts: true,
            plot_data: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub kind: Kind,
    #[serde(default)]
    pub seed: u64,
    /// Threshold for every upper-bound residual not named in `tolerances`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    /// Per-residual thresholds.
    #[serde(default)]
    pub tolerances: BTreeMap<String, f64>,
    #[serde(default)]
    pub payload: Value,
    #[serde(default)]
    pub outputs: Outputs,
}

fn config_err(prefix: &str, path: &str, inner: impl std::fmt::Display) -> Error {
    let at = match (prefix.is_empty(), path == ".") {
        (true, true) => "scenario".to_string(),
        (true, false) => path.to_string(),
        (false, true) => prefix.to_string(),
        (false, false) => format!("{prefix}.{path}"),
    };
    Error::ConfigInvalid(format!("{at}: {inner}"))
}

fn parse_at<T: DeserializeOwned>(v: &Value, prefix: &str) -> Result<T> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        config_err(prefix, &path, e.into_inner())
    })
}

impl Scenario {
    /// Parses and validates one scenario, payload included.
    pub fn from_value(v: &Value) -> Result<Self> {
        let s: Scenario = parse_at(v, "")?;
        s.validate()?;
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(s).map_err(|e| Error::ConfigInvalid(format!("scenario: {e}")))?;
        Self::from_value(&v)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.tol {
            if !(t > 0.0) {
                return Err(Error::ConfigInvalid("tol: must be positive".into()));
            }
        }
        for (k, t) in &self.tolerances {
            if !t.is_finite() {
                return Err(Error::ConfigInvalid(format!("tolerances.{k}: must be finite")));
            }
        }
        self.payload().map(|_| ())
    }

    /// Typed payload for the scenario's kind.
    pub fn payload(&self) -> Result<Payload> {
        let v = &self.payload;
        let p = "payload";
        let out = match self.kind {
            Kind::ThetaCheck => Payload::ThetaCheck(parse_at(v, p)?),
            Kind::Cm => Payload::Cm(parse_at(v, p)?),
            Kind::Rs => Payload::Rs(parse_at(v, p)?),
            Kind::Bethe => Payload::Bethe(parse_at(v, p)?),
            Kind::Secant => Payload::Secant(parse_at(v, p)?),
            Kind::Involution => Payload::Involution(parse_at(v, p)?),
            Kind::Wave => Payload::Wave(parse_at(v, p)?),
            Kind::Kp => Payload::Kp(parse_at(v, p)?),
            Kind::Toda => Payload::Toda(parse_at(v, p)?),
            Kind::Bdhe => Payload::Bdhe(parse_at(v, p)?),
        };
        out.check(self.kind)?;
        Ok(out)
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.to_string())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("scenario serializes");
        hex(&Sha256::digest(&bytes))
    }
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(2 * bytes.len());
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Reads a scenario file: one object, a list of objects, or a bare
/// pole-system object `{"system": "cm", "N": .., "q": .., ...}`.
/// Unnamed scenarios take the file stem as name.
pub fn load_scenarios(path: &Path) -> Result<Vec<Scenario>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scenario").to_string();
    let items: Vec<Value> = match v {
        Value::Array(a) => a,
        other => vec![other],
    };
    let single = items.len() == 1;
    let mut out = Vec::with_capacity(items.len());
    for (i, item) in items.into_iter().enumerate() {
        let item = wrap_pole_system(item);
        let mut s = Scenario::from_value(&item).map_err(|e| match e {
            Error::ConfigInvalid(m) if !single => Error::ConfigInvalid(format!("[{i}].{m}")),
            e => e,
        })?;
        if s.name.is_none() {
            s.name = Some(if single { stem.clone() } else { format!("{stem}-{i}") });
        }
        out.push(s);
    }
    Ok(out)
}

fn wrap_pole_system(v: Value) -> Value {
    match v {
        Value::Object(map) if !map.contains_key("kind") && map.contains_key("system") => {
            let kind = map["system"].clone();
            serde_json::json!({ "kind": kind, "payload": Value::Object(map) })
        }
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Payloads

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    ThetaCheck(ThetaCheckPayload),
    Cm(CmPayload),
    Rs(RsPayload),
    Bethe(BethePayload),
    Secant(SecantPayload),
    Involution(InvolutionPayload),
    Wave(WavePayload),
    Kp(KpPayload),
    Toda(TodaPayload),
    Bdhe(BdhePayload),
}

impl Payload {
    fn check(&self, kind: Kind) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::ConfigInvalid(format!("payload.{field}: {msg}")));
        match self {
            Payload::ThetaCheck(p) => {
                if p.battery == Battery::Siegel && p.genera.iter().any(|&g| g == 0 || g > 4) {
                    return bad("genera", "each genus must lie in 1..=4");
                }
                if !(p.policy_tol > 0.0) {
                    return bad("policy_tol", "must be positive");
                }
            }
            Payload::Cm(p) => {
                p.pole_system().check(kind)?;
                if p.random_states + p.flow_states > 0 && p.n_max < 2 {
                    return bad("n_max", "must be at least 2");
                }
                if p.heat_states > 0 && p.heat_n_max == 0 {
                    return bad("heat_n_max", "must be positive");
                }
                if p.z.is_empty() {
                    return bad("z", "needs at least one spectral parameter");
                }
                if p.q.is_empty() && p.random_states + p.flow_states + p.heat_states == 0 {
                    return bad("q", "give a state or request random, flow or heat states");
                }
            }
            Payload::Rs(p) => {
                p.check(kind)?;
                if p.q.is_empty() {
                    return bad("q", "needs at least one particle");
                }
                if p.z.is_empty() {
                    return bad("z", "needs at least one spectral parameter");
                }
            }
            Payload::Bethe(p) => {
                if let Some(s) = &p.system {
                    if s != kind.as_str() {
                        return bad("system", &format!("expected \"{kind}\""));
                    }
                }
                if p.seeds.is_empty() {
                    return bad("seeds", "needs at least one particle");
                }
                if p.len < 3 {
                    return bad("len", "needs at least three levels");
                }
            }
            Payload::Wave(p) => {
                if p.order == 0 {
                    return bad("order", "must be positive");
                }
            }
            Payload::Bdhe(p) => {
                if p.dims.iter().any(|&d| d < 3) {
                    return bad("dims", "each extent must be at least 3");
                }
            }
            Payload::Involution(p) => {
                if p.system == InvolutionSystem::Kp && p.v.is_none() {
                    return bad("v", "required for the KP criterion");
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Battery {
    #[default]
    Siegel,
    Weierstrass,
}

fn d_genera() -> Vec<usize> {
    vec![1, 2, 3]
}
fn d_samples() -> usize {
    100
}
fn d_policy_tol() -> f64 {
    1e-12
}
fn d_y_floor() -> f64 {
    0.5
}
fn d_grid() -> usize {
    10
}
fn d_lattice() -> LatticeConfig {
    LatticeConfig {
        omega1: [1.0, 0.0],
        omega2: [0.5, 0.9],
        guard: None,
    }
}

/// Identity battery: theta quasi-periodicity and addition, or the
/// Weierstrass checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaCheckPayload {
    #[serde(default)]
    pub battery: Battery,
    #[serde(default = "d_genera")]
    pub genera: Vec<usize>,
    #[serde(default = "d_samples")]
    pub samples: usize,
    #[serde(default = "d_policy_tol")]
    pub policy_tol: f64,
    /// Lower bound on the eigenvalues of `Im B` for random matrices.
    #[serde(default = "d_y_floor")]
    pub y_floor: f64,
    #[serde(default = "d_lattice")]
    pub lattice: LatticeConfig,
    /// Side of the Lame grid.
    #[serde(default = "d_grid")]
    pub grid: usize,
}

fn d_z() -> Vec<C64> {
    vec![c(0.33, 0.17)]
}
fn d_dt() -> f64 {
    1e-3
}

/// Pole-system fields `{"system", "N", "q", "p", "lattice", "z", "dt", "steps"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoleSystem {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    #[serde(rename = "N", default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default)]
    pub q: Vec<C64>,
    #[serde(default)]
    pub p: Vec<C64>,
    pub lattice: LatticeConfig,
    /// Spectral parameters.
    #[serde(default = "d_z")]
    pub z: Vec<C64>,
    #[serde(default = "d_dt")]
    pub dt: f64,
    #[serde(default)]
    pub steps: usize,
}

impl PoleSystem {
    fn check(&self, kind: Kind) -> Result<()> {
        if let Some(s) = &self.system {
            if s != kind.as_str() {
                return Err(Error::ConfigInvalid(format!("payload.system: expected \"{kind}\", got \"{s}\"")));
            }
        }
        if let Some(n) = self.n {
            if self.q.len() != n {
                return Err(Error::ConfigInvalid(format!("payload.q: expected N = {n} entries, got {}", self.q.len())));
            }
        }
        if self.p.len() != self.q.len() {
            return Err(Error::ConfigInvalid(format!(
                "payload.p: expected {} entries to match q, got {}",
                self.q.len(),
                self.p.len()
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::ConfigInvalid("payload.dt: must be positive".into()));
        }
        Ok(())
    }

    fn lattice(&self) -> Result<EllipticLattice> {
        EllipticLattice::from_config(&self.lattice).map_err(|e| Error::ConfigInvalid(format!("payload.lattice: {e}")))
    }
}

fn d_nmax() -> usize {
    4
}
fn d_min_sep() -> f64 {
    0.15
}
fn d_flow_min_sep() -> f64 {
    0.6
}
fn d_p_scale() -> f64 {
    0.3
}
fn d_heat_nmax() -> usize {
    3
}
fn d_perturbation() -> f64 {
    1e-2
}

/// Calogero-Moser scenario: an optional explicit trajectory plus random
/// Lax, conservation and heat-to-Lax batteries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmPayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    #[serde(rename = "N", default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default)]
    pub q: Vec<C64>,
    #[serde(default)]
    pub p: Vec<C64>,
    pub lattice: LatticeConfig,
    #[serde(default = "d_z")]
    pub z: Vec<C64>,
    #[serde(default = "d_dt")]
    pub dt: f64,
    #[serde(default)]
    pub steps: usize,
    #[serde(default)]
    pub random_states: usize,
    #[serde(default = "d_nmax")]
    pub n_max: usize,
    #[serde(default = "d_min_sep")]
    pub min_sep: f64,
    /// Random states flowed for `steps` RK4 steps.
    #[serde(default)]
    pub flow_states: usize,
    /// Trajectories closer than this to a collision are redrawn.
    #[serde(default = "d_flow_min_sep")]
    pub flow_min_sep: f64,
    #[serde(default = "d_p_scale")]
    pub p_scale: f64,
    #[serde(default)]
    pub heat_states: usize,
    #[serde(default = "d_heat_nmax")]
    pub heat_n_max: usize,
    #[serde(default = "d_perturbation")]
    pub perturbation: f64,
}

pub type RsPayload = PoleSystem;

impl CmPayload {
    pub fn pole_system(&self) -> PoleSystem {
        PoleSystem {
            system: self.system.clone(),
            n: self.n,
            q: self.q.clone(),
            p: self.p.clone(),
            lattice: self.lattice.clone(),
            z: self.z.clone(),
            dt: self.dt,
            steps: self.steps,
        }
    }
}

fn d_step() -> C64 {
    c(1.0, 0.0)
}
fn d_len() -> usize {
    5
}
fn d_solve_tol() -> f64 {
    1e-11
}
fn d_max_iter() -> usize {
    60
}

/// Nested Bethe chain seeded by `x_i(n) = seeds_i + n step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BethePayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    pub lattice: LatticeConfig,
    pub seeds: Vec<C64>,
    #[serde(default = "d_step")]
    pub step: C64,
    #[serde(default)]
    pub n0: i64,
    #[serde(default = "d_len")]
    pub len: usize,
    /// Run Newton from the linear seed.
    #[serde(default)]
    pub solve: bool,
    #[serde(default = "d_solve_tol")]
    pub solve_tol: f64,
    #[serde(default = "d_max_iter")]
    pub max_iter: usize,
}

fn d_sample() -> usize {
    6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genus1Block {
    pub datasets: usize,
    #[serde(default = "d_sample")]
    pub sample_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolePairsBlock {
    #[serde(default)]
    pub genus1: usize,
    #[serde(default)]
    pub genus2: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlsBlock {
    pub draws: usize,
    #[serde(default = "d_sample")]
    pub sample_size: usize,
}

/// Secant-condition batteries: genus-one positives, pole dynamics against
/// the divisor condition, and random genus-two controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecantPayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genus1: Option<Genus1Block>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pole_pairs: Option<PolePairsBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genus2_controls: Option<ControlsBlock>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InvolutionSystem {
    Kp,
    Toda,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub center: C64,
    pub half_width: f64,
    pub half_height: f64,
}

impl WindowConfig {
    fn window(&self, field: &str) -> Result<Window> {
        Window::centered(self.center, self.half_width, self.half_height)
            .map_err(|e| Error::ConfigInvalid(format!("payload.{field}: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvolutionPayload {
    pub system: InvolutionSystem,
    #[serde(rename = "B")]
    pub b: PeriodMatrix,
    #[serde(rename = "U")]
    pub u: Vec<C64>,
    /// Omitted for the genus-one Toda criterion, where it is solved for.
    #[serde(rename = "V", default, skip_serializing_if = "Option::is_none")]
    pub v: Option<Vec<C64>>,
    pub zeta: Vec<C64>,
    pub window: WindowConfig,
}

fn d_order() -> usize {
    6
}
fn d_t_range() -> [f64; 2] {
    [0.0, 0.2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WavePayload {
    #[serde(rename = "B")]
    pub b: PeriodMatrix,
    #[serde(rename = "U")]
    pub u: Vec<C64>,
    #[serde(rename = "V")]
    pub v: Vec<C64>,
    #[serde(rename = "Z")]
    pub z: Vec<C64>,
    pub window: WindowConfig,
    #[serde(default = "d_t_range")]
    pub t_range: [f64; 2],
    #[serde(default = "d_order")]
    pub order: usize,
    #[serde(default = "yes")]
    pub periodic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KpConstantChoice {
    #[default]
    Datum,
    Fitted,
}

fn d_trunc_kp() -> usize {
    12
}
fn d_flows_kp() -> usize {
    3
}
fn d_kp_grid() -> Vec<[f64; 3]> {
    (0..4)
        .flat_map(|i| (0..3).map(move |j| [-0.3 + 0.2 * i as f64, -0.1 + 0.1 * j as f64, 0.05]))
        .collect()
}

/// Genus-one one-point datum checked against KP on an `(x, y, t)` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KpPayload {
    pub lattice: LatticeConfig,
    pub beta: C64,
    #[serde(rename = "Z")]
    pub z: C64,
    #[serde(default = "d_trunc_kp")]
    pub trunc_order: usize,
    #[serde(default = "d_flows_kp")]
    pub flows: usize,
    #[serde(default = "d_kp_grid")]
    pub grid: Vec<[f64; 3]>,
    #[serde(default)]
    pub constant: KpConstantChoice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TodaLayoutChoice {
    #[default]
    Forward,
    Backward,
}

fn d_trunc_toda() -> usize {
    20
}
fn d_flows_toda() -> usize {
    2
}
fn d_toda_grid() -> Vec<(i64, f64, f64)> {
    (0..3)
        .flat_map(|n| (0..3).map(move |j| (n - 1, -0.2 + 0.2 * j as f64, 0.1 - 0.1 * j as f64)))
        .collect()
}

/// Genus-one two-point datum checked against 2D Toda on `(n, xi, eta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TodaPayload {
    pub lattice: LatticeConfig,
    /// Position of the second marked point.
    pub a: C64,
    #[serde(rename = "Z")]
    pub z: C64,
    #[serde(default = "d_trunc_toda")]
    pub trunc_order: usize,
    #[serde(default = "d_flows_toda")]
    pub flows: usize,
    #[serde(default = "d_toda_grid")]
    pub grid: Vec<(i64, f64, f64)>,
    #[serde(default)]
    pub layout: TodaLayoutChoice,
    /// Spectral point for the pair of linear problems.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_k: Option<C64>,
}

fn d_dims() -> [usize; 3] {
    [5, 5, 5]
}
fn d_n0() -> i64 {
    -2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BdhePayload {
    #[serde(rename = "B")]
    pub b: PeriodMatrix,
    #[serde(rename = "U")]
    pub u: Vec<C64>,
    #[serde(rename = "V")]
    pub v: Vec<C64>,
    #[serde(rename = "W")]
    pub w: Vec<C64>,
    #[serde(rename = "Z")]
    pub z: Vec<C64>,
    #[serde(default = "d_dims")]
    pub dims: [usize; 3],
    #[serde(default = "d_n0")]
    pub n0: i64,
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Check {
    /// Passes when `value <= threshold`.
    Upper,
    /// Passes when `value > threshold`; negative controls.
    Lower,
    /// Reported, never gated.
    Info,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub name: String,
    /// `None` when the computed value was not finite.
    pub value: Option<f64>,
    pub check: Check,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub crate_version: String,
    pub seed: u64,
    /// The effective scenario; running it again reproduces the report.
    pub scenario: Scenario,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<TruncationPolicy>,
    #[serde(default)]
    pub grids: Vec<String>,
    /// Fitted constants, calibrations and counts.
    #[serde(default)]
    pub notes: BTreeMap<String, Value>,
    #[serde(default)]
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub scenario: String,
    pub kind: Kind,
    pub scenario_hash: String,
    pub pass: bool,
    pub residuals: Vec<Residual>,
    pub provenance: Provenance,
}

impl ResidualReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn residual(&self, name: &str) -> Option<&Residual> {
        self.residuals.iter().find(|r| r.name == name)
    }

    /// Largest upper-bound residual.
    pub fn max_residual(&self) -> Option<f64> {
        self.residuals
            .iter()
            .filter(|r| r.check == Check::Upper)
            .map(|r| r.value.unwrap_or(f64::INFINITY))
            .reduce(f64::max)
    }

    pub fn status(&self) -> Status {
        if self.pass {
            Status::Pass
        } else {
            Status::Fail
        }
    }

    pub fn csv_header() -> &'static str {
        "scenario,kind,scenario_hash,residual,value,check,threshold,pass"
    }

    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for r in &self.residuals {
            let v = r.value.map(|v| format!("{v:e}")).unwrap_or_else(|| "nan".into());
            let t = r.threshold.map(|t| format!("{t:e}")).unwrap_or_default();
            let chk = match r.check {
                Check::Upper => "upper",
                Check::Lower => "lower",
                Check::Info => "info",
            };
            let _ = writeln!(s, "{},{},{},{},{v},{chk},{t},{}", self.scenario, self.kind, self.scenario_hash, r.name, r.pass);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}", Self::csv_header(), self.csv_rows())
    }
}

/// Outcome severity, ordered from best to worst.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Error,
}

impl Status {
    /// Process exit code: 0 pass, 2 residual failure, 1 error.
    pub fn code(self) -> u8 {
        match self {
            Status::Pass => 0,
            Status::Fail => 2,
            Status::Error => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Error => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    /// File name suffix, e.g. `trajectory.csv`.
    pub name: String,
    pub content: String,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: ResidualReport,
    pub artifacts: Vec<Artifact>,
    pub seconds: f64,
}

struct Ctx<'a> {
    sc: &'a Scenario,
    rng: ChaCha8Rng,
    residuals: Vec<Residual>,
    truncation: Option<TruncationPolicy>,
    grids: Vec<String>,
    notes: BTreeMap<String, Value>,
    artifacts: Vec<Artifact>,
}

impl<'a> Ctx<'a> {
    fn new(sc: &'a Scenario) -> Self {
        Self {
            sc,
            rng: ChaCha8Rng::seed_from_u64(sc.seed),
            residuals: Vec::new(),
            truncation: None,
            grids: Vec::new(),
            notes: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, value: f64, check: Check, threshold: Option<f64>) {
        let value = value.is_finite().then_some(value);
        let pass = match (check, value, threshold) {
            (Check::Info, _, _) => true,
            (_, None, _) | (_, _, None) => false,
            (Check::Upper, Some(v), Some(t)) => v <= t,
            (Check::Lower, Some(v), Some(t)) => v > t,
        };
        self.residuals.push(Residual {
            name: name.to_string(),
            value,
            check,
            threshold,
            pass,
        });
    }

    fn upper(&mut self, name: &str, value: f64, default: f64) {
        let t = self.sc.tolerances.get(name).copied().or(self.sc.tol).unwrap_or(default);
        self.push(name, value, Check::Upper, Some(t));
    }

    fn lower(&mut self, name: &str, value: f64, default: f64) {
        let t = self.sc.tolerances.get(name).copied().unwrap_or(default);
        self.push(name, value, Check::Lower, Some(t));
    }

    fn info(&mut self, name: &str, value: f64) {
        self.push(name, value, Check::Info, None);
    }

    fn note(&mut self, key: &str, v: impl Serialize) {
        self.notes.insert(key.to_string(), serde_json::to_value(v).unwrap_or(Value::Null));
    }

    fn artifact(&mut self, name: &str, content: String) {
        if self.sc.outputs.artifacts {
            if self.sc.outputs.plot_data && name.ends_with(".csv") {
                let dat = name.trim_end_matches(".csv").to_string() + ".dat";
                self.artifacts.push(Artifact {
                    name: dat,
                    content: csv_to_table(&content),
                });
            }
            self.artifacts.push(Artifact {
                name: name.to_string(),
                content,
            });
        }
    }

    fn grid(&mut self, r: &GridResidual) {
        self.grids.push(format!("{} ({} points)", r.grid, r.values.len()));
    }

    fn finish(self) -> (ResidualReport, Vec<Artifact>) {
        let mut artifacts = self.artifacts;
        artifacts.sort_by(|a, b| a.name.cmp(&b.name));
        let pass = self.residuals.iter().all(|r| r.pass);
        let report = ResidualReport {
            scenario: self.sc.label(),
            kind: self.sc.kind,
            scenario_hash: self.sc.hash(),
            pass,
            residuals: self.residuals,
            provenance: Provenance {
                crate_version: env!("CARGO_PKG_VERSION").to_string(),
                seed: self.sc.seed,
                scenario: self.sc.clone(),
                truncation: self.truncation,
                grids: self.grids,
                notes: self.notes,
                artifacts: artifacts.iter().map(|a| a.name.clone()).collect(),
            },
        };
        (report, artifacts)
    }
}

/// Gnuplot-style table: `#` header and whitespace-separated columns.
pub fn csv_to_table(csv: &str) -> String {
    let mut out = String::new();
    for (i, line) in csv.lines().enumerate() {
        if i == 0 {
            out.push_str("# ");
        }
        out.push_str(&line.replace(',', " "));
        out.push('\n');
    }
    out
}

/// Runs one validated scenario.
pub fn run_scenario(sc: &Scenario) -> Result<Outcome> {
    let payload = sc.payload()?;
    let start = Instant::now();
    let mut cx = Ctx::new(sc);
    match &payload {
        Payload::ThetaCheck(p) => run_theta_check(&mut cx, p)?,
        Payload::Cm(p) => run_cm(&mut cx, p)?,
        Payload::Rs(p) => run_rs(&mut cx, p)?,
        Payload::Bethe(p) => run_bethe(&mut cx, p)?,
        Payload::Secant(p) => run_secant(&mut cx, p)?,
        Payload::Involution(p) => run_involution(&mut cx, p)?,
        Payload::Wave(p) => run_wave(&mut cx, p)?,
        Payload::Kp(p) => run_kp(&mut cx, p)?,
        Payload::Toda(p) => run_toda(&mut cx, p)?,
        Payload::Bdhe(p) => run_bdhe(&mut cx, p)?,
    }
    let (report, artifacts) = cx.finish();
    Ok(Outcome {
        report,
        artifacts,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn with_context<T>(what: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::ConfigInvalid(m) => Error::ConfigInvalid(m),
        e => Error::InvalidArgument(format!("{what}: {e}")),
    })
}

fn uniform_c(rng: &mut ChaCha8Rng, re: (f64, f64), im: (f64, f64)) -> C64 {
    c(rng.random_range(re.0..re.1), rng.random_range(im.0..im.1))
}

// ---------------------------------------------------------------------------
// theta-check

fn run_theta_check(cx: &mut Ctx, p: &ThetaCheckPayload) -> Result<()> {
    match p.battery {
        Battery::Siegel => run_siegel_battery(cx, p),
        Battery::Weierstrass => run_weierstrass_battery(cx, p),
    }
}

fn run_siegel_battery(cx: &mut Ctx, p: &ThetaCheckPayload) -> Result<()> {
    cx.truncation = Some(TruncationPolicy::with_tol(p.policy_tol));
    for &g in &p.genera {
        let mut qp: f64 = 0.0;
        let mut add: f64 = 0.0;
        for _ in 0..p.samples {
            let b = PeriodMatrix::random(g, p.y_floor, &mut cx.rng)?;
            let pol = TruncationPolicy::for_matrix(&b, p.policy_tol)?;
            let z = random_point(&b, &mut cx.rng);
            let w = random_point(&b, &mut cx.rng);
            let m: Vec<i64> = (0..g).map(|_| cx.rng.random_range(-2..=2)).collect();
            let n: Vec<i64> = (0..g).map(|_| cx.rng.random_range(-2..=2)).collect();
            qp = qp.max(with_context("quasi-periodicity", quasiperiodicity_residual(&z, &m, &n, &b, &pol))?);
            add = add.max(with_context("addition formula", addition_residual(&z, &w, &b, &pol))?);
        }
        cx.upper(&format!("quasiperiodicity_g{g}"), qp, 1e-9);
        cx.upper(&format!("addition_g{g}"), add, 1e-9);
    }
    cx.grids.push(format!("{} random points per genus, z = x + B y with x, y in [-1/2, 1/2)^g", p.samples));
    Ok(())
}

fn random_point(b: &PeriodMatrix, rng: &mut ChaCha8Rng) -> Vec<C64> {
    let g = b.genus();
    let x: Vec<f64> = (0..g).map(|_| rng.random_range(-0.5..0.5)).collect();
    let y: Vec<C64> = (0..g).map(|_| c(rng.random_range(-0.5..0.5), 0.0)).collect();
    let by = b.apply(&y);
    (0..g).map(|i| x[i] + by[i]).collect()
}

fn run_weierstrass_battery(cx: &mut Ctx, p: &ThetaCheckPayload) -> Result<()> {
    let lat = EllipticLattice::from_config(&p.lattice).map_err(|e| Error::ConfigInvalid(format!("payload.lattice: {e}")))?;
    cx.upper("legendre", lat.legendre_residual(), 1e-12);
    let (w1, w2) = (lat.omega1, lat.omega2);
    let n = p.grid.max(1);
    let step = 1.0 / n as f64;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let (a, b) = ((i as f64 + 0.5) * step, (j as f64 + 0.5) * step);
            let x = w1 * (0.1 + 0.8 * a) + w2 * (0.1 + 0.8 * b);
            let z = w1 * (0.15 + 0.7 * b) + w2 * (0.85 - 0.7 * a);
            worst = worst.max(with_context("lame", lat.lame_residual(x, z))?);
        }
    }
    cx.upper("lame", worst, 1e-6);
    cx.grids.push(format!("{n}x{n} Lame grid in the fundamental cell"));
    // Phi(x, z) - 1/x = O(x): log-log slope of the defect.
    let z = w1 * 0.37 + w2 * 0.21;
    let xs = [1e-2, 1e-3, 1e-4, 1e-5];
    let lx: Vec<f64> = xs.iter().map(|x: &f64| x.ln()).collect();
    let mut ly = Vec::new();
    for &x in &xs {
        let d = with_context("phi", lat.phi_lame(c(x, 0.0), z))? - 1.0 / x;
        ly.push(d.norm().ln());
    }
    let k = xs.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let slope = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / lx.iter().map(|a| (a - mx).powi(2)).sum::<f64>();
    cx.lower("phi_slope", slope, 0.9);
    Ok(())
}

// ---------------------------------------------------------------------------
// Pole systems

fn rel(a: C64, b: C64) -> f64 {
    (a - b).norm() / (1.0 + a.norm())
}

fn traj_header(n: usize, kmax: usize) -> String {
    let mut h = String::from("t");
    for i in 0..n {
        let _ = write!(h, ",re_q{i},im_q{i}");
    }
    for i in 0..n {
        let _ = write!(h, ",re_p{i},im_p{i}");
    }
    h.push_str(",re_H,im_H");
    for k in 1..=kmax {
        let _ = write!(h, ",re_trL{k},im_trL{k}");
    }
    h
}

fn traj_row(t: f64, q: &[C64], p: &[C64], h: C64, traces: &[C64]) -> String {
    let mut r = format!("{t:e}");
    for x in q.iter().chain(p).chain(std::iter::once(&h)).chain(traces) {
        let _ = write!(r, ",{:e},{:e}", x.re, x.im);
    }
    r
}

fn run_cm(cx: &mut Ctx, p: &CmPayload) -> Result<()> {
    let sys = &p.pole_system();
    let lat = sys.lattice()?;
    let cal = calibrate_flow();
    let kappa = cal.kappa;
    cx.note("flow_kappa", kappa);
    cx.note("flow_calibration", &cal.candidates);
    if !sys.q.is_empty() {
        let s = CMState::new(sys.q.clone(), sys.p.clone(), lat)?;
        let n = s.n();
        let mut lax: f64 = 0.0;
        for &z in &sys.z {
            lax = lax.max(with_context("lax residual", lax_residual(&s, z))?);
        }
        cx.upper("lax", lax, 1e-8);
        if s.p.iter().all(|v| v.norm() == 0.0) {
            let mut sym: f64 = 0.0;
            for &z in &sys.z {
                let a = spectral_invariants(&s, z, n)?;
                let b = spectral_invariants(&s, -z, n)?;
                for (j, (x, y)) in a.charpoly.iter().zip(&b.charpoly).enumerate() {
                    let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                    sym = sym.max((x - sign * y).norm());
                }
            }
            cx.upper("involution_symmetry", sym, 1e-8);
        }
        let tr = with_context("cm flow", cm_flow(&s, sys.dt, sys.steps))?;
        let z0 = sys.z[0];
        let mut csv = traj_header(n, n);
        csv.push('\n');
        for (i, st) in tr.iter().enumerate() {
            let h = cm_hamiltonian(st)?;
            let inv = spectral_invariants(st, z0, n)?;
            csv.push_str(&traj_row(i as f64 * sys.dt, &st.q, &st.p, h, &inv.power_traces));
            csv.push('\n');
        }
        cx.artifact("trajectory.csv", csv);
        if sys.steps > 0 {
            let last = tr.last().expect("trajectory is non-empty");
            let e0 = cm_flow_energy(&s, kappa)?;
            cx.upper("energy_drift", rel(e0, cm_flow_energy(last, kappa)?), 1e-7);
            let mut drift: f64 = 0.0;
            for &z in &sys.z {
                let a = spectral_invariants(&s, z, n)?;
                let b = spectral_invariants(last, z, n)?;
                for (x, y) in a.power_traces.iter().zip(&b.power_traces) {
                    drift = drift.max(rel(*x, *y));
                }
            }
            cx.upper("spectral_drift", drift, 1e-7);
            cx.grids.push(format!("RK4 dt = {} for {} steps", sys.dt, sys.steps));
        }
    }
    if p.random_states > 0 {
        let mut lax: f64 = 0.0;
        let mut wrong = f64::INFINITY;
        for i in 0..p.random_states {
            let n = 2 + i % (p.n_max - 1);
            let s = random_cm_state(n, &lat, p.min_sep, &mut cx.rng);
            let z = sys.z[i % sys.z.len()];
            lax = lax.max(with_context("lax residual", lax_residual(&s, z))?);
            wrong = wrong.min(with_context("lax residual", lax_residual_with(&s, z, -kappa))?);
        }
        cx.upper("lax_random", lax, 1e-8);
        cx.lower("lax_wrong_sign", wrong, 1e-2);
    }
    if p.flow_states > 0 {
        let steps = sys.steps.max(1);
        let mut drift: f64 = 0.0;
        let mut energy: f64 = 0.0;
        let mut redraws = 0usize;
        for i in 0..p.flow_states {
            let n = 2 + i % (p.n_max - 1);
            let (s, last) = flow_clear_of_collisions(cx, &lat, n, p, steps, &mut redraws)?;
            let z = sys.z[i % sys.z.len()];
            let a = spectral_invariants(&s, z, n)?;
            let b = spectral_invariants(&last, z, n)?;
            for (x, y) in a.power_traces.iter().zip(&b.power_traces) {
                drift = drift.max(rel(*x, *y));
            }
            energy = energy.max(rel(cm_flow_energy(&s, kappa)?, cm_flow_energy(&last, kappa)?));
        }
        cx.upper("spectral_drift_random", drift, 1e-7);
        cx.upper("energy_drift_random", energy, 1e-7);
        cx.note("flow_redraws", redraws);
        cx.grids.push(format!("{} random trajectories, RK4 dt = {} for {steps} steps", p.flow_states, sys.dt));
    }
    if p.heat_states > 0 {
        let mut heat: f64 = 0.0;
        let mut kernel: f64 = 0.0;
        let mut evolved: f64 = 0.0;
        let mut perturbed = f64::INFINITY;
        for i in 0..p.heat_states {
            let n = 1 + i % p.heat_n_max;
            let s = random_cm_state(n, &lat, 0.3, &mut cx.rng);
            let z = sys.z[i % sys.z.len()];
            for k in with_context("reduction spectrum", reduction_spectrum(&s, z))? {
                let r = with_context("heat reduction", heat_to_lax_reduction(&s, z, k))?;
                heat = heat.max(r.heat_residual);
                kernel = kernel.max(r.residual_l);
                evolved = evolved.max(r.residual_m);
                // A one-dimensional kernel vector only rescales under perturbation.
                if n > 1 {
                    perturbed = perturbed.min(with_context("perturbed heat residual", heat_residual_perturbed(&s, z, k, p.perturbation))?);
                }
            }
        }
        cx.upper("heat", heat, 1e-5);
        cx.info("heat_kernel", kernel);
        cx.info("heat_kernel_evolved", evolved);
        if p.heat_n_max > 1 {
            cx.lower("heat_perturbed", perturbed, 1e-2);
        }
    }
    Ok(())
}

const FLOW_DRAWS: usize = 5000;

fn flow_clear_of_collisions(
    cx: &mut Ctx,
    lat: &EllipticLattice,
    n: usize,
    p: &CmPayload,
    steps: usize,
    redraws: &mut usize,
) -> Result<(CMState, CMState)> {
    // Integrated in chunks so that a trajectory nearing a collision is
    // abandoned early; RK4 steps do not depend on the chunking.
    const CHUNK: usize = 50;
    'draw: for _ in 0..FLOW_DRAWS {
        let s = random_cm_state_scaled(n, lat, 0.5, p.p_scale, &mut cx.rng);
        let mut cur = s.clone();
        let mut done = 0;
        while done < steps {
            let m = CHUNK.min(steps - done);
            let Ok(tr) = cm_flow(&cur, p.dt, m) else {
                *redraws += 1;
                continue 'draw;
            };
            if tr.iter().map(min_separation).fold(f64::INFINITY, f64::min) < p.flow_min_sep {
                *redraws += 1;
                continue 'draw;
            }
            cur = tr.last().expect("trajectory is non-empty").clone();
            done += m;
        }
        return Ok((s, cur));
    }
    Err(Error::InvalidArgument(format!(
        "no collision-free trajectory for N = {n} within {FLOW_DRAWS} draws"
    )))
}

fn min_separation(st: &CMState) -> f64 {
    let mut d = f64::INFINITY;
    for i in 0..st.n() {
        for j in (i + 1)..st.n() {
            d = d.min(st.lat.lattice_distance(st.q[i] - st.q[j]));
        }
    }
    d
}

fn run_rs(cx: &mut Ctx, sys: &RsPayload) -> Result<()> {
    let lat = sys.lattice()?;
    let s = RSState::new(sys.q.clone(), sys.p.clone(), lat)?;
    let n = s.n();
    let z0 = sys.z[0];
    let phi = with_context("phi", lat.phi_lame(c(-1.0, 0.0), z0))?;
    let l0 = rs_lax(&s, z0)?;
    let tr_f: C64 = rs_f(&s).iter().map(|f| f * phi).sum();
    cx.upper("trace_identity", rel(l0.trace(), tr_f), 1e-10);
    let tr = with_context("rs flow", rs_flow(&s, sys.dt, sys.steps))?;
    let mut csv = traj_header(n, n);
    csv.push('\n');
    for (i, st) in tr.iter().enumerate() {
        let inv = spectral_invariants_of(&rs_lax(st, z0)?, n);
        csv.push_str(&traj_row(i as f64 * sys.dt, &st.q, &st.p, rs_hamiltonian(st), &inv.power_traces));
        csv.push('\n');
    }
    cx.artifact("trajectory.csv", csv);
    if sys.steps > 0 {
        let last = tr.last().expect("trajectory is non-empty");
        cx.upper("hamiltonian_drift", rel(rs_hamiltonian(&s), rs_hamiltonian(last)), 1e-6);
        let mut drift: f64 = 0.0;
        for &z in &sys.z {
            let a = spectral_invariants_of(&rs_lax(&s, z)?, n);
            let b = spectral_invariants_of(&rs_lax(last, z)?, n);
            for (x, y) in a.power_traces.iter().zip(&b.power_traces) {
                drift = drift.max(rel(*x, *y));
            }
        }
        cx.upper("spectral_drift", drift, 1e-6);
        cx.grids.push(format!("RK4 dt = {} for {} steps", sys.dt, sys.steps));
    }
    Ok(())
}

fn bethe_max(t: &BetheTrajectory) -> Result<f64> {
    let len = t.levels.len() as i64;
    let mut m: f64 = 0.0;
    for n in (t.n0 + 1)..(t.n0 + len - 1) {
        for i in 0..t.k {
            m = m.max(bethe_residual(t, n, i)?.norm());
        }
    }
    Ok(m)
}

fn run_bethe(cx: &mut Ctx, p: &BethePayload) -> Result<()> {
    let lat = EllipticLattice::from_config(&p.lattice).map_err(|e| Error::ConfigInvalid(format!("payload.lattice: {e}")))?;
    let seed = BetheTrajectory::linear(&p.seeds, p.step, p.n0, p.len, lat)?;
    let r0 = with_context("bethe residual", bethe_max(&seed))?;
    let traj = if p.solve {
        cx.info("bethe_seed", r0);
        let (sol, r) = with_context("bethe solve", bethe_solve(&seed, p.solve_tol, p.max_iter))?;
        cx.note("newton_residual", r);
        cx.upper("bethe_solved", bethe_max(&sol)?, 1e-9);
        sol
    } else {
        cx.upper("bethe", r0, 1e-12);
        seed
    };
    let mut csv = String::from("n");
    for i in 0..traj.k {
        let _ = write!(csv, ",re_x{i},im_x{i}");
    }
    csv.push('\n');
    for (j, level) in traj.levels.iter().enumerate() {
        let _ = write!(csv, "{}", traj.n0 + j as i64);
        for x in level {
            let _ = write!(csv, ",{:e},{:e}", x.re, x.im);
        }
        csv.push('\n');
    }
    cx.artifact("levels.csv", csv);
    cx.grids.push(format!("levels {}..{}", p.n0, p.n0 + p.len as i64 - 1));
    Ok(())
}

// ---------------------------------------------------------------------------
// Secant conditions

fn genus1_draw(rng: &mut ChaCha8Rng) -> (C64, C64, C64, C64, C64) {
    let tau = uniform_c(rng, (-0.4, 0.4), (0.8, 1.4));
    let u = uniform_c(rng, (0.6, 1.2), (-0.3, 0.3));
    let v = uniform_c(rng, (-0.6, 0.6), (-0.6, 0.6));
    let a = uniform_c(rng, (0.1, 0.4), (0.1, 0.4));
    let z = uniform_c(rng, (-0.1, 0.1), (-0.1, 0.1));
    (tau, u, v, a, z)
}

fn run_secant(cx: &mut Ctx, p: &SecantPayload) -> Result<()> {
    let pol = TruncationPolicy::default();
    cx.truncation = Some(pol);
    if let Some(g1) = &p.genus1 {
        let ipi = c(0.0, PI);
        let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
        let mut bump = |k: &'static str, v: f64| {
            let e = worst.entry(k).or_insert(0.0);
            *e = e.max(v);
        };
        for k in 0..g1.datasets {
            let (tau, u, v, a, z) = genus1_draw(&mut cx.rng);
            let kp = with_context("genus-one KP datum", genus1_kp_datum(tau, u, v, a, z))?;
            let rs = with_context("genus-one RS datum", genus1_rs_datum(tau, u, v, a, z))?;
            let bd = with_context("genus-one BDHE datum", genus1_bdhe_datum(tau, u, v, a, z))?;
            bump("linear_kp", kp.validation_residual);
            bump("linear_rs", rs.validation_residual);
            bump("linear_bdhe", bd.validation_residual);
            bump("flex", flex_residual_b(&kp.datum, &pol)?);
            bump("tangent_trisecant", tangent_trisecant_residual_b(&rs.datum, &pol)?);
            let shifted = bd.datum.clone().with_pe(bd.datum.p + ipi, bd.datum.e + ipi);
            bump("trisecant", trisecant_residual_b(&shifted, &pol)?);
            let scale = 0.4 / u.norm();
            let fb = fit_flex_b(&kp.datum, &pol)?;
            let d = kp.datum.clone().with_pe(fb.p, fb.e);
            bump("flex_converse", linear_problem_residual_kp(&d, &kp.z, &validation_grid(scale, 5, c(0.02, 0.0)))?);
            let fb = fit_tangent_trisecant_b(&rs.datum, &pol)?;
            let d = rs.datum.clone().with_pe(fb.p, fb.e);
            bump("tangent_trisecant_converse", linear_problem_residual_rs(&d, &rs.z, &validation_grid(scale, 4, c(0.01, 0.0)))?);
            let fb = fit_trisecant_b(&bd.datum, &pol)?;
            let d = bd.datum.clone().with_pe(fb.p - ipi, fb.e - ipi);
            let grid: Vec<(C64, i64)> = validation_grid(scale, 4, c(0.0, 0.0)).iter().map(|(x, _)| (*x, 0)).collect();
            bump("trisecant_converse", linear_problem_residual_bdhe(&d, &bd.z, &grid)?);
            let b = PeriodMatrix::new(1, vec![tau])?;
            let s = sample_theta_divisor(&b, &[u], g1.sample_size, cx.sc.seed.wrapping_add(k as u64))?;
            bump("condition_c_cm", cm_condition_c_residual(&b, &[u], &[v], &s)?.max);
            bump("condition_c_rs", rs_condition_c_residual(&b, &[u], &[v], &s)?.max);
            bump("condition_c_bdhe", bdhe_condition_c_residual(&b, &[u], &[v], &s)?.max);
        }
        for (k, v) in worst {
            cx.upper(k, v, 1e-7);
        }
        cx.grids.push(format!("{} genus-one datasets, {} divisor points each", g1.datasets, g1.sample_size));
    }
    if let Some(pp) = &p.pole_pairs {
        run_pole_pairs(cx, pp)?;
    }
    if let Some(ctl) = &p.genus2_controls {
        run_controls(cx, ctl, &pol)?;
    }
    Ok(())
}

// Pole-dynamics defect from zero tracking next to the divisor condition at
// the same zeros of a random line.
fn paired_residuals(b: &PeriodMatrix, u: &[C64], v: &[C64], rng: &mut ChaCha8Rng) -> Result<Vec<(f64, f64)>> {
    let g = b.genus();
    let z0: Vec<C64> = (0..g).map(|_| uniform_c(rng, (0.0, 1.0), (0.0, 0.5))).collect();
    let un = u.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    let w = Window::centered(c(0.01, -0.02), 1.03 / un, 0.97 / un)?;
    let line = TauLine::new(b.clone(), u.to_vec(), v.to_vec(), z0, w, [-0.1, 0.1])?;
    let mut out = Vec::new();
    for z in find_zeros(&line, 0.0)?.iter().filter(|z| z.simple) {
        let d = z.q - w.center();
        if d.re.abs() >= 0.8 / un || d.im.abs() >= 0.8 / un {
            continue;
        }
        let pd = pole_dynamics_residual(&line, z)?;
        let s = ThetaDivisorSample::from_points(vec![line.point(z.q, 0.0)]);
        out.push((pd, cm_condition_c_residual(b, u, v, &s)?.max));
    }
    Ok(out)
}

fn run_pole_pairs(cx: &mut Ctx, pp: &PolePairsBlock) -> Result<()> {
    let (pd_tol, c_tol) = (1e-6, 1e-7);
    let mut pd_g1: f64 = 0.0;
    let mut c_g1: f64 = 0.0;
    let mut pd_g2 = f64::INFINITY;
    let mut disagreements = 0usize;
    let mut empty = 0usize;
    let mut judge = |pairs: &[(f64, f64)]| {
        let pd_pass = pairs.iter().all(|p| p.0 <= pd_tol);
        let c_pass = pairs.iter().all(|p| p.1 <= c_tol);
        if pd_pass != c_pass {
            disagreements += 1;
        }
        if pairs.is_empty() {
            empty += 1;
        }
    };
    for _ in 0..pp.genus1 {
        let (tau, u, v, _, _) = genus1_draw(&mut cx.rng);
        let b = PeriodMatrix::new(1, vec![tau])?;
        let pairs = with_context("genus-one pole pairs", paired_residuals(&b, &[u], &[v], &mut cx.rng))?;
        for &(pd, cm) in &pairs {
            pd_g1 = pd_g1.max(pd);
            c_g1 = c_g1.max(cm);
        }
        judge(&pairs);
    }
    for _ in 0..pp.genus2 {
        let b = PeriodMatrix::random(2, 0.7, &mut cx.rng)?;
        let u = vec![uniform_c(&mut cx.rng, (0.4, 0.9), (-0.3, 0.3)), uniform_c(&mut cx.rng, (0.2, 0.6), (-0.3, 0.3))];
        let v = vec![uniform_c(&mut cx.rng, (-0.5, 0.5), (-0.5, 0.5)), uniform_c(&mut cx.rng, (-0.5, 0.5), (-0.5, 0.5))];
        let pairs = with_context("genus-two pole pairs", paired_residuals(&b, &u, &v, &mut cx.rng))?;
        for &(pd, _) in &pairs {
            pd_g2 = pd_g2.min(pd);
        }
        judge(&pairs);
    }
    if pp.genus1 > 0 {
        cx.upper("pole_dynamics", pd_g1, pd_tol);
        cx.upper("condition_c", c_g1, c_tol);
    }
    if pp.genus2 > 0 {
        cx.info("pole_dynamics_genus2_min", pd_g2);
    }
    cx.upper("pass_fail_disagreements", disagreements as f64, 0.0);
    cx.note("datasets_without_zeros", empty);
    cx.grids.push(format!("{} genus-one and {} genus-two lines", pp.genus1, pp.genus2));
    Ok(())
}

fn run_controls(cx: &mut Ctx, ctl: &ControlsBlock, pol: &TruncationPolicy) -> Result<()> {
    let names = ["control_flex", "control_tangent_trisecant", "control_trisecant", "control_condition_c_cm", "control_condition_c_rs", "control_condition_c_bdhe"];
    let mut vals: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    let mut skipped = 0usize;
    for k in 0..ctl.draws {
        let (d, _) = random_g2_datum(&mut cx.rng)?;
        vals[0].push(fit_flex_b(&d, pol)?.fit_residual);
        vals[1].push(fit_tangent_trisecant_b(&d, pol)?.fit_residual);
        vals[2].push(fit_trisecant_b(&d, pol)?.fit_residual);
        let s = sample_theta_divisor(&d.b, &d.u, ctl.sample_size, cx.sc.seed.wrapping_add(k as u64))?;
        vals[3].push(cm_condition_c_residual(&d.b, &d.u, &d.v, &s)?.median);
        vals[4].push(rs_condition_c_residual(&d.b, &d.u, &d.v, &s)?.median);
        match bdhe_condition_c_residual(&d.b, &d.u, &d.v, &s) {
            Ok(r) => vals[5].push(r.median),
            Err(Error::FactorVanishes(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    for (name, v) in names.iter().zip(&vals) {
        cx.lower(name, if v.is_empty() { f64::NAN } else { median(v) }, 1e-3);
    }
    cx.note("control_bdhe_skipped", skipped);
    cx.grids.push(format!("{} random genus-two data, medians", ctl.draws));
    Ok(())
}

fn run_involution(cx: &mut Ctx, p: &InvolutionPayload) -> Result<()> {
    let w = p.window.window("window")?;
    cx.truncation = Some(TruncationPolicy::default());
    match p.system {
        InvolutionSystem::Kp => {
            let v = p.v.as_ref().expect("checked at validation");
            let r = with_context("KP involution", involution_kp_conditions(&p.b, &p.u, v, &p.zeta, w))?;
            cx.upper("condition_c", r.residual_c, 1e-7);
            cx.upper("turning_points", r.residual_turn, 1e-7);
            cx.upper("b1", r.residual_b1, 1e-7);
            cx.upper("orthogonality", r.residual_ort, 1e-7);
            cx.note("zeros", r.zeros.len());
            cx.note("b2", r.b2);
            cx.note("b2_ort", r.b2_ort);
        }
        InvolutionSystem::Toda => {
            let v = match (&p.v, p.b.genus()) {
                (Some(v), _) => v.clone(),
                (None, 1) => vec![with_context("Toda involution V", genus1_toda_involution_v(p.b.entry(0, 0), p.u[0]))?],
                (None, _) => return Err(Error::ConfigInvalid("payload.V: required above genus one".into())),
            };
            cx.note("V", &v);
            let r = with_context("Toda involution", involution_toda_conditions(&p.b, &p.u, &v, &p.zeta, w))?;
            cx.upper("condition_cd", r.residual_cd, 1e-6);
            cx.upper("orthogonality", r.residual_ortd, 1e-7);
            cx.info("shift_distance", r.shift_distance);
            cx.note("zeros", r.zeros.len());
            cx.note("b2", r.b2);
            cx.note("b3", r.b3);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Wave and nonlinear residuals

fn run_wave(cx: &mut Ctx, p: &WavePayload) -> Result<()> {
    let w = p.window.window("window")?;
    let line = TauLine::new(p.b.clone(), p.u.clone(), p.v.clone(), p.z.clone(), w, p.t_range)
        .map_err(|e| Error::ConfigInvalid(format!("payload: {e}")))?;
    cx.truncation = Some(TruncationPolicy::default());
    let opts = WaveOptions {
        halt_tol: None,
        ..WaveOptions::default()
    };
    let s = with_context("wave recursion", wave_recursion_with(&line, p.order, p.periodic, &opts))?;
    cx.note("zeros", s.zeros.len());
    cx.upper("obstruction", s.max_obstruction(), 1e-7);
    cx.upper("propagation", s.max_propagation_defect(), 1e-7);
    if let Some(d) = s.max_periodicity_defect() {
        cx.upper("periodicity", d, 1e-8);
    }
    let mut csv = String::from("zero,re_q,im_q,order,re_obstruction,im_obstruction");
    csv.push('\n');
    for (i, z) in s.zeros.iter().enumerate() {
        for (k, o) in z.obstructions.iter().enumerate() {
            let _ = writeln!(csv, "{i},{:e},{:e},{k},{:e},{:e}", z.zero.q.re, z.zero.q.im, o.re, o.im);
        }
    }
    cx.artifact("obstructions.csv", csv);
    cx.grids.push(format!("wave order {}, periodic = {}, Fourier nodes {}", p.order, p.periodic, opts.nx));
    Ok(())
}

fn lattice_of(cfg: &LatticeConfig) -> Result<EllipticLattice> {
    EllipticLattice::from_config(cfg).map_err(|e| Error::ConfigInvalid(format!("payload.lattice: {e}")))
}

fn run_kp(cx: &mut Ctx, p: &KpPayload) -> Result<()> {
    let lat = lattice_of(&p.lattice)?;
    let cd = with_context("one-point datum", genus1_one_point(&lat, p.beta, p.z, p.trunc_order, p.flows))?;
    let constant = match p.constant {
        KpConstantChoice::Datum => KpConstant::FromDatum,
        KpConstantChoice::Fitted => KpConstant::Fitted,
    };
    let r = with_context("KP residual", kp_residual_with(&cd, &p.grid, constant))?;
    cx.upper("kp", r.max, 1e-4);
    cx.lower("kp_order", r.order.unwrap_or(f64::NAN), 1.9);
    if let (Some(a), Some(b)) = (r.fitted("const_datum"), r.fitted("const_fit")) {
        cx.upper("kp_constant_agreement", (a - b).norm() / (1.0 + a.norm()), 1e-5);
    }
    for (k, v) in &r.fitted {
        cx.note(k, v);
    }
    cx.note("abel_defect", cd.abel_defect());
    cx.grid(&r);
    cx.artifact("kp.csv", r.to_csv());
    Ok(())
}

fn run_toda(cx: &mut Ctx, p: &TodaPayload) -> Result<()> {
    let lat = lattice_of(&p.lattice)?;
    let cd = with_context("two-point datum", genus1_two_point(&lat, p.a, p.z, p.trunc_order, p.flows))?;
    let layout = match p.layout {
        TodaLayoutChoice::Forward => TodaLayout::Forward,
        TodaLayoutChoice::Backward => TodaLayout::Backward,
    };
    let r = with_context("Toda residual", toda_residual(&cd, &p.grid, layout))?;
    cx.upper("toda", r.max, 1e-4);
    cx.lower("toda_order", r.order.unwrap_or(f64::NAN), 1.9);
    for (k, v) in &r.fitted {
        cx.note(k, v);
    }
    cx.grid(&r);
    cx.artifact("toda.csv", r.to_csv());
    if let Some(k) = p.pair_k {
        let (a, b) = with_context("Toda linear pair", toda_pair_residual(&cd, &p.grid, k))?;
        cx.upper("toda_pair_xi", a.max, 1e-8);
        cx.upper("toda_pair_eta", b.max, 1e-8);
    }
    Ok(())
}

fn run_bdhe(cx: &mut Ctx, p: &BdhePayload) -> Result<()> {
    let dims = (p.dims[0], p.dims[1], p.dims[2]);
    let g = with_context("BDHE theta grid", bdhe_theta_grid(&p.b, &p.u, &p.v, &p.w, &p.z, dims, p.n0))?;
    cx.truncation = Some(TruncationPolicy::default());
    let r = bdhe_tau_residual(&g.grid);
    cx.upper("bdhe", r.max, 1e-8);
    cx.info("bdhe_fit_ratio", g.fit_ratio);
    cx.note("coeffs", g.coeffs);
    cx.grid(&r);
    cx.artifact("bdhe.csv", r.to_csv());
    Ok(())
}

// ---------------------------------------------------------------------------
// Files and batches

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

/// Command-line overrides applied to every scenario before it runs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub tol: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, sc: &mut Scenario) {
        if let Some(s) = self.seed {
            sc.seed = s;
        }
        if let Some(t) = self.tol {
            sc.tol = Some(t);
        }
    }
}

/// One scenario's result inside a file or batch run.
#[derive(Debug, Clone)]
pub struct Entry {
    pub file: PathBuf,
    pub label: String,
    pub result: std::result::Result<Outcome, String>,
}

impl Entry {
    pub fn status(&self) -> Status {
        match &self.result {
            Ok(o) => o.report.status(),
            Err(_) => Status::Error,
        }
    }

    pub fn seconds(&self) -> f64 {
        self.result.as_ref().map(|o| o.seconds).unwrap_or(0.0)
    }
}

/// Loads and runs every scenario in a file. A file that fails to load
/// yields a single errored entry.
pub fn run_file(path: &Path, ov: &Overrides) -> Vec<Entry> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scenario").to_string();
    let scenarios = match load_scenarios(path) {
        Ok(s) => s,
        Err(e) => {
            return vec![Entry {
                file: path.to_path_buf(),
                label: stem,
                result: Err(e.to_string()),
            }]
        }
    };
    scenarios
        .into_iter()
        .map(|mut sc| {
            ov.apply(&mut sc);
            let label = sc.label();
            let result = sc.validate().and_then(|_| run_scenario(&sc)).map_err(|e| e.to_string());
            Entry {
                file: path.to_path_buf(),
                label,
                result,
            }
        })
        .collect()
}

/// Worst status over the entries; empty lists pass.
pub fn worst(entries: &[Entry]) -> Status {
    entries.iter().map(Entry::status).max().unwrap_or(Status::Pass)
}

/// `*.json` files of a directory in filename order.
pub fn scenario_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

/// Runs every scenario file of `dir` in parallel; entries come back in
/// filename order.
pub fn batch(dir: &Path, ov: &Overrides) -> Result<Vec<Entry>> {
    let files = scenario_files(dir)?;
    let per_file: Vec<Vec<Entry>> = files.par_iter().map(|f| run_file(f, ov)).collect();
    Ok(per_file.into_iter().flatten().collect())
}

fn max_residual_cell(e: &Entry) -> String {
    match &e.result {
        Ok(o) => o.report.max_residual().map(|v| format!("{v:.3e}")).unwrap_or_else(|| "-".into()),
        Err(_) => "-".into(),
    }
}

/// Summary table: scenario, status, max residual, seconds.
pub fn summary_table(entries: &[Entry]) -> String {
    let w = entries.iter().map(|e| e.label.len()).max().unwrap_or(8).max(8);
    let mut s = format!("{:<w$}  {:<6}  {:>12}  {:>9}\n", "scenario", "status", "max_resid", "seconds");
    for e in entries {
        let _ = write!(s, "{:<w$}  {:<6}  {:>12}  {:>9.3}", e.label, e.status().as_str(), max_residual_cell(e), e.seconds());
        if let Err(m) = &e.result {
            let _ = write!(s, "  {m}");
        }
        s.push('\n');
    }
    s
}

pub fn summary_csv(entries: &[Entry]) -> String {
    let mut s = String::from("scenario,file,status,max_residual,seconds,error\n");
    for e in entries {
        let err = e.result.as_ref().err().map(|m| m.replace(['"', '\n'], " ")).unwrap_or_default();
        let file = e.file.file_name().and_then(|f| f.to_str()).unwrap_or("");
        let _ = writeln!(s, "{},{file},{},{},{:.6},\"{err}\"", e.label, e.status().as_str(), max_residual_cell(e), e.seconds());
    }
    s
}

fn safe_name(label: &str) -> String {
    label
        .chars()
        .map(|ch| if ch.is_ascii_alphanumeric() || ch == '-' || ch == '_' || ch == '.' { ch } else { '-' })
        .collect()
}

/// Writes the report and artifacts of an entry into `dir`; returns the
/// written paths. Errored entries write nothing.
pub fn write_entry(dir: &Path, e: &Entry, format: Format) -> Result<Vec<PathBuf>> {
    let Ok(o) = &e.result else {
        return Ok(Vec::new());
    };
    std::fs::create_dir_all(dir)?;
    let base = safe_name(&e.label);
    let mut written = Vec::new();
    let (path, body) = match format {
        Format::Json => (dir.join(format!("{base}.report.json")), o.report.to_json()),
        Format::Csv => (dir.join(format!("{base}.report.csv")), o.report.to_csv()),
    };
    std::fs::write(&path, body)?;
    written.push(path);
    for a in &o.artifacts {
        let p = dir.join(format!("{base}.{}", a.name));
        std::fs::write(&p, &a.content)?;
        written.push(p);
    }
    Ok(written)
}

/// Report document for a whole file: a single report or a list.
pub fn reports_json(entries: &[Entry]) -> String {
    let reports: Vec<&ResidualReport> = entries.iter().filter_map(|e| e.result.as_ref().ok()).map(|o| &o.report).collect();
    if reports.len() == 1 && entries.len() == 1 {
        reports[0].to_json()
    } else {
        serde_json::to_string_pretty(&reports).expect("reports serialize")
    }
}

pub fn reports_csv(entries: &[Entry]) -> String {
    let mut s = format!("{}\n", ResidualReport::csv_header());
    for e in entries {
        if let Ok(o) = &e.result {
            s.push_str(&o.report.csv_rows());
        }
    }
    s
}

/// Scenario for the theta identity battery used by `check-identities`.
pub fn identity_scenario(genera: Vec<usize>, samples: usize, seed: u64) -> Scenario {
    Scenario {
        name: Some("check-identities".into()),
        kind: Kind::ThetaCheck,
        seed,
        tol: None,
        tolerances: BTreeMap::new(),
        payload: serde_json::json!({ "battery": "siegel", "genera": genera, "samples": samples }),
        outputs: Outputs::default(),
    }
}
