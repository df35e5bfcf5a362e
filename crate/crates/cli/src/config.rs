//! Scenario configuration: TOML schema, overrides and conversion to core types.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use rdcontrol::hum::SteerConfig;
use rdcontrol::spectral::{project_fn, NeumannBasis};
use rdcontrol::{Envelope, SpectralState, SystemSpec};

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: Option<String>,
    pub output: Option<String>,
    pub system: SystemBlock,
    #[serde(default)]
    pub numerics: Numerics,
    pub initial: Option<DataBlock>,
    pub target: Option<DataBlock>,
    #[serde(default)]
    pub tasks: Vec<Task>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    pub n: usize,
    pub m: usize,
    /// Row-major `n × n`.
    pub d: Vec<f64>,
    pub a: Vec<f64>,
    /// Row-major `n × m`.
    pub b: Vec<f64>,
    pub omega: [f64; 2],
    #[serde(default = "neumann")]
    pub bc: String,
}

fn neumann() -> String {
    "neumann".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Numerics {
    /// Highest propagated mode.
    pub modes: usize,
    pub j_ctrl: usize,
    /// Control time knots per steering phase.
    pub intervals: usize,
    pub substeps: usize,
    pub grid_points: usize,
    pub envelope: String,
    pub seed: u64,
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            modes: 32,
            j_ctrl: 8,
            intervals: 64,
            substeps: 4,
            grid_points: 512,
            envelope: "none".into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataBlock {
    /// Constant per component.
    Constant { values: Vec<f64> },
    /// Cosine coefficients, one list per component.
    Modes { coefficients: Vec<Vec<f64>> },
    /// `base + amplitude · ½(1 + cos(π(x − center)/width))` on `|x − center| < width`.
    CosineBump {
        base: Vec<f64>,
        amplitude: Vec<f64>,
        center: f64,
        width: f64,
    },
    /// Nonnegative band-limited data drawn from the run seed.
    Random {
        #[serde(default = "default_random_modes")]
        modes: usize,
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default)]
        floor: f64,
    },
}

fn default_random_modes() -> usize {
    6
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Task {
    Validate {
        #[serde(default = "default_tol")]
        tol: f64,
    },
    Kalman {
        #[serde(default = "default_p_max")]
        p_max: usize,
    },
    Free {
        horizon: f64,
        #[serde(default = "default_free_steps")]
        steps: usize,
    },
    Steer {
        tau: f64,
    },
    StaircaseIdentity {
        #[serde(default = "half")]
        tau: f64,
        #[serde(default = "two")]
        safety: f64,
    },
    StaircaseGeneral {
        #[serde(default = "half")]
        tau: f64,
        #[serde(default = "default_floor")]
        floor: String,
        epsilon: Option<f64>,
        #[serde(default = "two")]
        safety: f64,
    },
    CostSweep {
        taus: Vec<f64>,
    },
    MinimalTime {
        bound: f64,
        #[serde(default = "default_t_lo")]
        t_lo: f64,
        #[serde(default = "two")]
        t_hi: f64,
        #[serde(default = "default_iterations")]
        iterations: usize,
        #[serde(default = "default_mt_modes")]
        j: usize,
        #[serde(default = "default_knots")]
        knots: usize,
        #[serde(default)]
        presweep: Vec<f64>,
        ball_center: Option<f64>,
        ball_radius: Option<f64>,
        #[serde(default = "default_sl_modes")]
        sl_modes: usize,
    },
    Obstruction {
        #[serde(default = "default_horizon")]
        horizon: f64,
    },
}

fn default_tol() -> f64 {
    1e-12
}
fn default_p_max() -> usize {
    200
}
fn default_free_steps() -> usize {
    100
}
fn half() -> f64 {
    0.5
}
fn two() -> f64 {
    2.0
}
fn default_floor() -> String {
    "relaxed".into()
}
fn default_t_lo() -> f64 {
    0.01
}
fn default_iterations() -> usize {
    10
}
fn default_mt_modes() -> usize {
    8
}
fn default_knots() -> usize {
    10
}
fn default_sl_modes() -> usize {
    20
}
fn default_horizon() -> f64 {
    10.0
}

impl Task {
    pub fn kind(&self) -> &'static str {
        match self {
            Task::Validate { .. } => "validate",
            Task::Kalman { .. } => "kalman",
            Task::Free { .. } => "free",
            Task::Steer { .. } => "steer",
            Task::StaircaseIdentity { .. } => "staircase_identity",
            Task::StaircaseGeneral { .. } => "staircase_general",
            Task::CostSweep { .. } => "cost_sweep",
            Task::MinimalTime { .. } => "minimal_time",
            Task::Obstruction { .. } => "obstruction",
        }
    }

    fn needs_data(&self) -> bool {
        !matches!(self, Task::Validate { .. } | Task::Kalman { .. })
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub modes: Option<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn describe(&self) -> String {
        format!("modes={:?};steps={:?};seed={:?}", self.modes, self.steps, self.seed)
    }
}

pub fn parse_table(text: &str, origin: &str) -> Result<toml::Table, CliError> {
    text.parse::<toml::Table>()
        .map_err(|e| CliError::Validation(format!("{origin}: {e}")))
}

/// Parses a scenario; schema errors carry the offending line and key.
pub fn from_text(text: &str, origin: &str, ov: &Overrides) -> Result<ScenarioConfig, CliError> {
    let mut cfg: ScenarioConfig =
        toml::from_str(text).map_err(|e| CliError::Validation(format!("{origin}: {e}")))?;
    if let Some(j) = ov.modes {
        cfg.numerics.modes = j;
    }
    if let Some(k) = ov.steps {
        cfg.numerics.intervals = k;
    }
    if let Some(s) = ov.seed {
        cfg.numerics.seed = s;
    }
    cfg.validate()
        .map_err(|e| CliError::Validation(format!("{origin}: {}", e.message())))?;
    Ok(cfg)
}

pub fn load(path: &Path, ov: &Overrides) -> Result<(ScenarioConfig, String), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    let cfg = from_text(&text, &path.display().to_string(), ov)?;
    Ok((cfg, text))
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let s = &self.system;
        if s.bc != "neumann" {
            return Err(invalid(format!("system.bc: only \"neumann\" is supported, got {:?}", s.bc)));
        }
        if s.n == 0 || s.m == 0 {
            return Err(invalid("system.n and system.m must be at least 1"));
        }
        for (key, len, want) in [("d", s.d.len(), s.n * s.n), ("a", s.a.len(), s.n * s.n), ("b", s.b.len(), s.n * s.m)] {
            if len != want {
                return Err(invalid(format!("system.{key}: expected {want} entries, got {len}")));
            }
        }
        let nm = &self.numerics;
        if nm.j_ctrl > nm.modes {
            return Err(invalid(format!("numerics.j_ctrl = {} exceeds numerics.modes = {}", nm.j_ctrl, nm.modes)));
        }
        if nm.intervals == 0 || nm.substeps == 0 || nm.grid_points < 4 {
            return Err(invalid("numerics: intervals and substeps must be positive, grid_points at least 4"));
        }
        self.envelope()?;
        self.spec()?;
        if self.tasks.iter().any(Task::needs_data) && (self.initial.is_none() || self.target.is_none()) {
            return Err(invalid("tasks other than validate and kalman need [initial] and [target] blocks"));
        }
        for block in [&self.initial, &self.target].into_iter().flatten() {
            check_block(block, s.n)?;
        }
        for (i, t) in self.tasks.iter().enumerate() {
            check_task(t).map_err(|e| invalid(format!("tasks[{i}] ({}): {e}", t.kind())))?;
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<SystemSpec, CliError> {
        let s = &self.system;
        SystemSpec::from_rows(s.n, s.m, &s.d, &s.a, &s.b, (s.omega[0], s.omega[1]))
            .map_err(|e| invalid(format!("system: {e}")))
    }

    pub fn envelope(&self) -> Result<Envelope, CliError> {
        match self.numerics.envelope.as_str() {
            "none" => Ok(Envelope::None),
            "bump" => Ok(Envelope::Bump),
            other => Err(invalid(format!("numerics.envelope: expected \"none\" or \"bump\", got {other:?}"))),
        }
    }

    pub fn steer_config(&self) -> SteerConfig {
        SteerConfig {
            j_ctrl: self.numerics.j_ctrl,
            j_state: self.numerics.modes,
            intervals: self.numerics.intervals,
            substeps: self.numerics.substeps,
            envelope: self.envelope().unwrap_or_default(),
        }
    }

    /// Initial and target data in `modes + 1` coefficients; the seed streams are distinct.
    pub fn data(&self) -> Result<(SpectralState, SpectralState), CliError> {
        let (Some(i), Some(t)) = (&self.initial, &self.target) else {
            return Err(invalid("missing [initial] or [target] block"));
        };
        Ok((self.build(i, 0)?, self.build(t, 1)?))
    }

    fn build(&self, block: &DataBlock, stream: u64) -> Result<SpectralState, CliError> {
        let n = self.system.n;
        let modes = self.numerics.modes + 1;
        let s = match block {
            DataBlock::Constant { values } => SpectralState::constant(values, modes),
            DataBlock::Modes { coefficients } => {
                let mut s = SpectralState::zeros(modes, n);
                for (c, list) in coefficients.iter().enumerate() {
                    for (p, v) in list.iter().enumerate().take(modes) {
                        s.coeffs[(p, c)] = *v;
                    }
                }
                s
            }
            DataBlock::CosineBump { base, amplitude, center, width } => {
                let basis = NeumannBasis::new(self.numerics.modes);
                let points = (16 * modes).max(2049);
                let (c, w) = (*center, *width);
                project_fn(
                    |x: f64| -> Vec<f64> {
                        let bump = if (x - c).abs() < w { 0.5 * (1.0 + (std::f64::consts::PI * (x - c) / w).cos()) } else { 0.0 };
                        base.iter().zip(amplitude).map(|(b, a)| b + a * bump).collect()
                    },
                    n,
                    &basis,
                    points,
                )
                .map_err(|e| invalid(format!("cosine_bump: {e}")))?
            }
            DataBlock::Random { modes: rm, amplitude, floor } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.numerics.seed);
                rng.set_stream(stream);
                let mut s = SpectralState::zeros(modes, n);
                for c in 0..n {
                    let mut total = 0.0;
                    for p in 1..=(*rm).min(modes - 1) {
                        let v = amplitude * rng.random_range(-1.0..1.0) / p as f64;
                        s.coeffs[(p, c)] = v;
                        total += v.abs();
                    }
                    s.coeffs[(0, c)] = 2f64.sqrt() * total + floor;
                }
                s
            }
        };
        Ok(s)
    }
}

fn check_block(block: &DataBlock, n: usize) -> Result<(), CliError> {
    let len_ok = |name: &str, len: usize| {
        if len == n {
            Ok(())
        } else {
            Err(invalid(format!("data block: {name} has {len} entries, system has {n} components")))
        }
    };
    match block {
        DataBlock::Constant { values } => len_ok("values", values.len()),
        DataBlock::Modes { coefficients } => len_ok("coefficients", coefficients.len()),
        DataBlock::CosineBump { base, amplitude, width, .. } => {
            len_ok("base", base.len())?;
            len_ok("amplitude", amplitude.len())?;
            if *width > 0.0 {
                Ok(())
            } else {
                Err(invalid("cosine_bump: width must be positive"))
            }
        }
        DataBlock::Random { amplitude, floor, .. } => {
            if *amplitude >= 0.0 && *floor >= 0.0 {
                Ok(())
            } else {
                Err(invalid("random: amplitude and floor must be nonnegative"))
            }
        }
    }
}

fn positive(name: &str, v: f64) -> Result<(), String> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(format!("{name} must be positive, got {v}"))
    }
}

fn check_task(t: &Task) -> Result<(), String> {
    match t {
        Task::Validate { tol } => positive("tol", *tol),
        Task::Kalman { .. } => Ok(()),
        Task::Free { horizon, steps } => {
            positive("horizon", *horizon)?;
            if *steps == 0 {
                return Err("steps must be positive".into());
            }
            Ok(())
        }
        Task::Steer { tau } => positive("tau", *tau),
        Task::StaircaseIdentity { tau, safety } => {
            positive("tau", *tau)?;
            positive("safety", *safety)
        }
        Task::StaircaseGeneral { tau, floor, epsilon, safety } => {
            positive("tau", *tau)?;
            positive("safety", *safety)?;
            match (floor.as_str(), epsilon) {
                ("relaxed" | "zeta_shift", Some(e)) => positive("epsilon", *e),
                ("relaxed" | "zeta_shift", None) => Err(format!("floor {floor:?} needs epsilon")),
                ("exact", None) => Ok(()),
                ("exact", Some(_)) => Err("floor \"exact\" takes no epsilon".into()),
                (other, _) => Err(format!("floor must be relaxed, zeta_shift or exact, got {other:?}")),
            }
        }
        Task::CostSweep { taus } => taus.iter().try_for_each(|&v| positive("taus entry", v)),
        Task::MinimalTime { bound, t_lo, t_hi, knots, ball_center, ball_radius, .. } => {
            if !(*bound >= 0.0) {
                return Err(format!("bound must be nonnegative, got {bound}"));
            }
            positive("t_lo", *t_lo)?;
            if t_hi <= t_lo {
                return Err(format!("t_hi = {t_hi} must exceed t_lo = {t_lo}"));
            }
            if *knots == 0 {
                return Err("knots must be positive".into());
            }
            if ball_center.is_some() != ball_radius.is_some() {
                return Err("ball_center and ball_radius go together".into());
            }
            Ok(())
        }
        Task::Obstruction { horizon } => positive("horizon", *horizon),
    }
}

/// Sets `param` in a parsed config: a dotted path (`tasks.0.tau`, `numerics.modes`)
/// or a bare key applied to every task that already sets it.
pub fn set_param(table: &mut toml::Table, param: &str, value: toml::Value) -> Result<(), CliError> {
    if param.contains('.') {
        let parts: Vec<&str> = param.split('.').collect();
        return set_path(table, &parts, value).map_err(|e| invalid(format!("parameter {param}: {e}")));
    }
    let mut hits = 0;
    if let Some(toml::Value::Array(tasks)) = table.get_mut("tasks") {
        for t in tasks.iter_mut() {
            if let toml::Value::Table(t) = t {
                if t.contains_key(param) {
                    t.insert(param.to_string(), value.clone());
                    hits += 1;
                }
            }
        }
    }
    if hits == 0 {
        return Err(invalid(format!("parameter {param:?} is not set by any task; use a dotted path")));
    }
    Ok(())
}

fn set_path(table: &mut toml::Table, parts: &[&str], value: toml::Value) -> Result<(), String> {
    let (head, rest) = parts.split_first().ok_or("empty path")?;
    if rest.is_empty() {
        table.insert(head.to_string(), value);
        return Ok(());
    }
    let next = table
        .entry(head.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    set_in_value(next, rest, value)
}

fn set_in_value(node: &mut toml::Value, parts: &[&str], value: toml::Value) -> Result<(), String> {
    match node {
        toml::Value::Table(t) => set_path(t, parts, value),
        toml::Value::Array(a) => {
            let (head, rest) = parts.split_first().ok_or("empty path")?;
            let idx: usize = head.parse().map_err(|_| format!("{head:?} is not an index"))?;
            let len = a.len();
            let slot = a.get_mut(idx).ok_or_else(|| format!("index {idx} out of {len}"))?;
            if rest.is_empty() {
                *slot = value;
                Ok(())
            } else {
                set_in_value(slot, rest, value)
            }
        }
        _ => Err(format!("{:?} is not addressable", parts[0])),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rdcontrol::spectral::min_on_grid;

    const SYSTEM: &str = "[system]\nn = 2\nm = 1\nd = [1.0, 0.0, 0.0, 1.0]\na = [0.0, 1.0, 0.0, -1.0]\nb = [0.0, 1.0]\nomega = [0.3, 0.8]\n";

    fn parse(extra: &str) -> Result<ScenarioConfig, CliError> {
        from_text(&format!("{SYSTEM}{extra}"), "test", &Overrides::default())
    }

    #[test]
    fn random_data_respects_its_floor() {
        for seed in 0..20 {
            let cfg = parse(&format!(
                "[numerics]\nseed = {seed}\n[initial]\nkind = \"random\"\nfloor = 0.1\n[target]\nkind = \"random\"\n"
            ))
            .unwrap();
            let (y0, yf0) = cfg.data().unwrap();
            assert!(min_on_grid(&y0, 1024).iter().all(|&v| v >= 0.1 - 1e-12));
            assert!(min_on_grid(&yf0, 1024).iter().all(|&v| v >= -1e-12));
            assert_ne!(y0.coeffs, yf0.coeffs, "initial and target use different streams");
        }
    }

    #[test]
    fn cosine_bump_projects_to_its_profile() {
        let cfg = parse(
            "[numerics]\nmodes = 64\n[initial]\nkind = \"cosine_bump\"\nbase = [1.0, 0.5]\namplitude = [2.0, 0.0]\ncenter = 0.4\nwidth = 0.2\n\
             [target]\nkind = \"constant\"\nvalues = [1.0, 1.0]\n",
        )
        .unwrap();
        let (y0, yf0) = cfg.data().unwrap();
        let v = y0.eval(0.4);
        assert!((v[0] - 3.0).abs() < 1e-2 && (v[1] - 0.5).abs() < 1e-9);
        assert!((y0.eval(0.9)[0] - 1.0).abs() < 1e-2);
        assert!((y0.means()[0] - (1.0 + 2.0 * 0.2)).abs() < 1e-6, "bump mass is amplitude · width");
        assert_eq!(yf0.means(), vec![1.0, 1.0]);
    }

    #[test]
    fn modes_block_fills_coefficients() {
        let cfg = parse("[initial]\nkind = \"modes\"\ncoefficients = [[1.0, 0.5], [2.0]]\n[target]\nkind = \"constant\"\nvalues = [0.0, 0.0]\n").unwrap();
        let (y0, _) = cfg.data().unwrap();
        assert_eq!(y0.modes(), 33);
        assert_eq!((y0.coeffs[(0, 0)], y0.coeffs[(1, 0)], y0.coeffs[(0, 1)]), (1.0, 0.5, 2.0));
    }

    #[test]
    fn schema_checks() {
        assert!(parse("").is_ok());
        assert!(parse("[numerics]\nenvelope = \"square\"\n").is_err());
        assert!(parse("[numerics]\nmodes = 4\nj_ctrl = 8\n").is_err());
        assert!(parse("[initial]\nkind = \"constant\"\nvalues = [1.0]\n[target]\nkind = \"constant\"\nvalues = [1.0, 1.0]\n").is_err());
        let data = "[initial]\nkind = \"constant\"\nvalues = [1.0, 1.0]\n[target]\nkind = \"constant\"\nvalues = [1.0, 1.0]\n";
        assert!(parse(&format!("{data}[[tasks]]\nkind = \"staircase_general\"\nfloor = \"exact\"\nepsilon = 0.1\n")).is_err());
        assert!(parse(&format!("{data}[[tasks]]\nkind = \"minimal_time\"\nbound = 1.0\nt_lo = 2.0\nt_hi = 1.0\n")).is_err());
        assert!(parse(&format!("{data}[[tasks]]\nkind = \"minimal_time\"\nbound = 1.0\nball_center = 0.1\n")).is_err());
        assert!(parse(&format!("{data}[[tasks]]\nkind = \"cost_sweep\"\ntaus = [0.1, -0.2]\n")).is_err());
        let s = SYSTEM.replace("[system]", "[system]\nbc = \"dirichlet\"");
        assert!(from_text(&s, "t", &Overrides::default()).is_err());
    }

    #[test]
    fn overrides_apply() {
        let ov = Overrides { modes: Some(16), steps: Some(32), seed: Some(9) };
        let cfg = from_text(SYSTEM, "t", &ov).unwrap();
        let sc = cfg.steer_config();
        assert_eq!((sc.j_state, sc.intervals, cfg.numerics.seed), (16, 32, 9));
    }
}
