//! TOML run configuration and its merge with command-line overrides.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use lqmhpe::dynamics::{DisturbanceChannels, ModelSpec, NominalParams};
use lqmhpe::monte_carlo::{BatteryConfig, Scheme, TrialConfig};
use serde::Deserialize;

pub const DEFAULT_TRIALS: usize = 100;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub trial: TrialSection,
    #[serde(default)]
    pub nmpc: NmpcSection,
    #[serde(default)]
    pub battery: BatterySection,
}

/// Vehicle parameters: mass `mu`, inertia `Ixx..Izz`, drag `Axx..Azz`, and per-rotor
/// torque ratios `b` and body-frame arm positions `c` (x) and `d` (y).
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: Option<String>,
    pub mu: Option<f64>,
    #[serde(rename = "Ixx")]
    pub ixx: Option<f64>,
    #[serde(rename = "Iyy")]
    pub iyy: Option<f64>,
    #[serde(rename = "Izz")]
    pub izz: Option<f64>,
    #[serde(rename = "Axx")]
    pub axx: Option<f64>,
    #[serde(rename = "Ayy")]
    pub ayy: Option<f64>,
    #[serde(rename = "Azz")]
    pub azz: Option<f64>,
    pub b: Option<Vec<f64>>,
    pub c: Option<Vec<f64>>,
    pub d: Option<Vec<f64>>,
    /// Per-rotor thrust ceiling [N]; 2.5x hover thrust when absent.
    pub u_max: Option<f64>,
    pub gravity: Option<[f64; 3]>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialSection {
    pub duration: Option<f64>,
    pub dt: Option<f64>,
    pub param_factors: Option<[f64; 2]>,
    pub noise_bound: Option<f64>,
    pub disturbance_channels: Option<DisturbanceChannels>,
    pub position_bound: Option<f64>,
    pub velocity_bound: Option<f64>,
    pub angular_velocity_bound: Option<f64>,
    pub random_attitude: Option<bool>,
    pub window: Option<usize>,
    pub disturbance_weight: Option<f64>,
    pub nmhpe_max_iter: Option<usize>,
    pub cost_ceiling: Option<f64>,
    pub divergence_radius: Option<f64>,
    pub convergence_radius: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NmpcSection {
    pub horizon: Option<usize>,
    /// Defaults to `trial.dt`.
    pub dt: Option<f64>,
    pub q_diag: Option<Vec<f64>>,
    pub terminal_factor: Option<f64>,
    pub r_weight: Option<f64>,
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
    pub qp_tol: Option<f64>,
    pub qp_max_iter: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatterySection {
    pub schemes: Option<Vec<String>>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub model: Option<String>,
    pub schemes: Option<Vec<Scheme>>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub horizon_n: Option<usize>,
    pub horizon_m: Option<usize>,
    pub q_diag: Option<Vec<f64>>,
    pub r_weight: Option<f64>,
}

pub fn load(path: &Path) -> Result<FileConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
    toml::from_str(&text).map_err(|e| anyhow!("invalid config file {}: {}", path.display(), e.to_string().trim_end()))
}

/// Accepts `all` or a comma-separated scheme list.
pub fn parse_schemes(s: &str) -> Result<Vec<Scheme>> {
    if s.trim().eq_ignore_ascii_case("all") {
        return Ok(Scheme::ALL.to_vec());
    }
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let sc: Scheme = part.parse().map_err(|_| anyhow!("unknown scheme `{part}`; expected lq_mhpe, nmhpe, none or all"))?;
        if !out.contains(&sc) {
            out.push(sc);
        }
    }
    if out.is_empty() {
        bail!("empty scheme list");
    }
    Ok(out)
}

fn model_spec(sec: &ModelSection, name: &str) -> Result<ModelSpec> {
    let base = ModelSpec::by_name(name);
    let get = |key: &str, v: Option<f64>, fallback: Option<f64>| {
        v.or(fallback).ok_or_else(|| anyhow!("model `{name}` is not built in, so model.{key} is required"))
    };
    let nominal = base.as_ref().map(|b| &b.params);
    let vec_key = |key: &str, v: &Option<Vec<f64>>, fallback: Option<&Vec<f64>>| {
        v.clone()
            .or_else(|| fallback.cloned())
            .ok_or_else(|| anyhow!("model `{name}` is not built in, so model.{key} is required"))
    };
    let params = NominalParams {
        mass: get("mu", sec.mu, nominal.map(|p| p.mass))?,
        inertia: [
            get("Ixx", sec.ixx, nominal.map(|p| p.inertia[0]))?,
            get("Iyy", sec.iyy, nominal.map(|p| p.inertia[1]))?,
            get("Izz", sec.izz, nominal.map(|p| p.inertia[2]))?,
        ],
        drag: [
            get("Axx", sec.axx, nominal.map(|p| p.drag[0]))?,
            get("Ayy", sec.ayy, nominal.map(|p| p.drag[1]))?,
            get("Azz", sec.azz, nominal.map(|p| p.drag[2]))?,
        ],
        torque_ratio: vec_key("b", &sec.b, nominal.map(|p| &p.torque_ratio))?,
        rotor_x: vec_key("c", &sec.c, nominal.map(|p| &p.rotor_x))?,
        rotor_y: vec_key("d", &sec.d, nominal.map(|p| &p.rotor_y))?,
    };
    let m = params.rotors();
    for (key, v) in [("c", &params.rotor_x), ("d", &params.rotor_y)] {
        if v.len() != m {
            bail!("model.{key} has {} entries but model.b has {m}", v.len());
        }
    }
    params.validate().map_err(|e| anyhow!("model parameters: {e}"))?;
    let mut spec = ModelSpec::new(name, params);
    if let Some(g) = sec.gravity {
        spec.gravity = g;
        spec.u_max = lqmhpe::dynamics::DEFAULT_THRUST_MARGIN * spec.params.hover_thrust(&g);
    }
    if let Some(u) = sec.u_max {
        spec.u_max = u;
    }
    Ok(spec)
}

/// Defaults, then the file, then the overrides.
pub fn resolve(file: &FileConfig, ov: &Overrides) -> Result<BatteryConfig> {
    let name = match (&ov.model, &file.model.name) {
        (Some(flag), Some(named)) if !flag.eq_ignore_ascii_case(named) => {
            bail!("--model {flag} conflicts with model.name = \"{named}\" in the config file")
        }
        (Some(flag), _) => flag.to_ascii_lowercase(),
        (None, Some(named)) => named.clone(),
        (None, None) => "crazyflie".to_string(),
    };
    let model = model_spec(&file.model, &name)?;

    let mut t = TrialConfig::for_model(model);
    let s = &file.trial;
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src.clone() {
                $dst = v;
            }
        };
    }
    set!(t.duration, s.duration);
    set!(t.dt, s.dt);
    set!(t.param_factors, s.param_factors);
    set!(t.noise_bound, s.noise_bound);
    set!(t.disturbance_channels, s.disturbance_channels);
    set!(t.position_bound, s.position_bound);
    set!(t.velocity_bound, s.velocity_bound);
    set!(t.angular_velocity_bound, s.angular_velocity_bound);
    set!(t.random_attitude, s.random_attitude);
    set!(t.window, s.window);
    set!(t.disturbance_weight, s.disturbance_weight);
    set!(t.nmhpe_max_iter, s.nmhpe_max_iter);
    set!(t.cost_ceiling, s.cost_ceiling);
    set!(t.divergence_radius, s.divergence_radius);
    set!(t.convergence_radius, s.convergence_radius);

    let n = &file.nmpc;
    t.nmpc.dt = t.dt;
    set!(t.nmpc.horizon, n.horizon);
    set!(t.nmpc.dt, n.dt);
    set!(t.nmpc.q_diag, n.q_diag);
    set!(t.nmpc.terminal_factor, n.terminal_factor);
    set!(t.nmpc.r_weight, n.r_weight);
    set!(t.nmpc.max_iter, n.max_iter);
    set!(t.nmpc.tol, n.tol);
    set!(t.nmpc.qp_tol, n.qp_tol);
    set!(t.nmpc.qp_max_iter, n.qp_max_iter);

    set!(t.nmpc.horizon, ov.horizon_n);
    set!(t.window, ov.horizon_m);
    set!(t.nmpc.q_diag, ov.q_diag);
    set!(t.nmpc.r_weight, ov.r_weight);

    let schemes = match (&ov.schemes, &file.battery.schemes) {
        (Some(s), _) => s.clone(),
        (None, Some(list)) => parse_schemes(&list.join(",")).context("battery.schemes")?,
        (None, None) => Scheme::ALL.to_vec(),
    };
    let cfg = BatteryConfig {
        trial: t,
        schemes,
        trials: ov.trials.or(file.battery.trials).unwrap_or(DEFAULT_TRIALS),
        base_seed: ov.seed.or(file.battery.seed).unwrap_or(0),
    };
    cfg.validate()?;
    Ok(cfg)
}
