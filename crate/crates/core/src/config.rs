//! Run configuration: a TOML document describing the model, the global
//! simulation budget and the list of experiments.
//!
//! ```toml
//! seed = 42
//! n_paths = 20000
//! n_steps = 128
//! t = 1.0
//! x = [0.0]
//! output_dir = "bismut-runs"
//! verbosity = "info"
//! threads = 4
//!
//! [model]
//! name = "ou"
//! a = 1.0
//! sigma = 1.0
//!
//! [[experiments]]
//! kind = "quasi_invariance"
//! h = ["0", "0.5", "sin(0.5,1)"]
//! f = ["one", "x", "x2", "bump"]
//! ```
//!
//! Every error in a document is reported, not just the first.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::field_model::catalog::{self, PolyModel, Polynomial};
use crate::field_model::{ModelError, PerturbationSchedule, TestFunction, VectorFieldSet};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    /// Dotted path of the offending key, e.g. `experiments[1].n_paths`.
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// All errors found in one document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelConfig {
    Bm { dim: usize },
    Ou { a: f64, sigma: f64 },
    Gbm { mu: f64, sigma: f64 },
    Poly(PolyModel),
}

impl ModelConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::Bm { .. } => "bm",
            ModelConfig::Ou { .. } => "ou",
            ModelConfig::Gbm { .. } => "gbm",
            ModelConfig::Poly(_) => "poly",
        }
    }

    /// Catalog defaults for `name`.
    pub fn default_for(name: &str) -> Result<Self, ModelError> {
        Ok(match name {
            "bm" => ModelConfig::Bm { dim: 1 },
            "ou" => ModelConfig::Ou { a: 1.0, sigma: 1.0 },
            "gbm" => ModelConfig::Gbm { mu: 0.0, sigma: 0.5 },
            "poly" => ModelConfig::Poly(catalog::default_poly()),
            other => return Err(ModelError::UnknownModel(other.to_string())),
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            ModelConfig::Bm { dim } => *dim,
            ModelConfig::Poly(p) => p.dim,
            _ => 1,
        }
    }

    pub fn build(&self) -> Result<VectorFieldSet, ModelError> {
        Ok(match self {
            ModelConfig::Bm { dim } => catalog::bm(*dim),
            ModelConfig::Ou { a, sigma } => catalog::ou(*a, *sigma),
            ModelConfig::Gbm { mu, sigma } => catalog::gbm(*mu, *sigma),
            ModelConfig::Poly(p) => catalog::poly(p)?,
        })
    }

    fn to_table(&self) -> Table {
        let mut t = Table::new();
        t.insert("name".into(), Value::String(self.name().into()));
        match self {
            ModelConfig::Bm { dim } => {
                t.insert("dim".into(), Value::Integer(*dim as i64));
            }
            ModelConfig::Ou { a, sigma } => {
                t.insert("a".into(), Value::Float(*a));
                t.insert("sigma".into(), Value::Float(*sigma));
            }
            ModelConfig::Gbm { mu, sigma } => {
                t.insert("mu".into(), Value::Float(*mu));
                t.insert("sigma".into(), Value::Float(*sigma));
            }
            ModelConfig::Poly(p) => {
                t.insert("dim".into(), Value::Integer(p.dim as i64));
                t.insert("drift".into(), field_to_value(&p.drift));
                t.insert(
                    "noise".into(),
                    Value::Array(p.noise.iter().map(|f| field_to_value(f)).collect()),
                );
            }
        }
        t
    }
}

fn field_to_value(components: &[Polynomial]) -> Value {
    Value::Array(
        components
            .iter()
            .map(|p| {
                Value::Array(
                    p.terms
                        .iter()
                        .map(|(c, e)| {
                            let mut term = vec![Value::Float(*c)];
                            term.extend(e.iter().map(|k| Value::Integer(*k as i64)));
                            Value::Array(term)
                        })
                        .collect(),
                )
            })
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    QuasiInvariance,
    ElementaryIbp,
    GradientTransfer,
    Bismut,
    Nondegeneracy,
    Density,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::QuasiInvariance,
        ExperimentKind::ElementaryIbp,
        ExperimentKind::GradientTransfer,
        ExperimentKind::Bismut,
        ExperimentKind::Nondegeneracy,
        ExperimentKind::Density,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::QuasiInvariance => "quasi_invariance",
            ExperimentKind::ElementaryIbp => "elementary_ibp",
            ExperimentKind::GradientTransfer => "gradient_transfer",
            ExperimentKind::Bismut => "bismut",
            ExperimentKind::Nondegeneracy => "nondegeneracy",
            ExperimentKind::Density => "density",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    pub fn description(self) -> &'static str {
        match self {
            ExperimentKind::QuasiInvariance => {
                "perturbed-drift semigroup vs Girsanov-weighted semigroup (and PDE oracle in d = 1)"
            }
            ExperimentKind::ElementaryIbp => {
                "time-quadrature of nested PDE semigroups vs integration-by-parts weighted Monte Carlo"
            }
            ExperimentKind::GradientTransfer => {
                "E[Df(x_t) U_t] vs finite differences of P_t f (and PDE gradient in d = 1)"
            }
            ExperimentKind::Bismut => "E[Df(x_t) U_t V_t] vs E[f(x_t) u_t] on common noise",
            ExperimentKind::Nondegeneracy => {
                "inverse covariance moments under sample doubling and small-ball slopes over a direction net"
            }
            ExperimentKind::Density => "Malliavin-weight and kernel density estimates vs the exact Gaussian marginal",
        }
    }

    fn keys(self) -> &'static [&'static str] {
        match self {
            ExperimentKind::QuasiInvariance => &["h", "f", "bump_center", "pde", "pde_nodes", "pde_steps"],
            ExperimentKind::ElementaryIbp => &["h", "f", "bump_center", "pde_nodes", "pde_steps", "quadrature_nodes"],
            ExperimentKind::GradientTransfer => &["f", "bump_center", "pde", "pde_nodes", "pde_steps", "delta"],
            ExperimentKind::Bismut => &["f", "bump_center"],
            ExperimentKind::Nondegeneracy => &["exponents", "epsilons", "directions"],
            ExperimentKind::Density => &["y", "y_points", "y_sigmas", "kde_tolerance", "weight_tolerance"],
        }
    }
}

const COMMON_EXPERIMENT_KEYS: [&str; 9] = [
    "kind",
    "name",
    "seed",
    "n_paths",
    "n_steps",
    "t",
    "x",
    "model",
    "control_model",
];

/// One entry of `[[experiments]]`, with defaults filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Unique within a config; defaults to the kind.
    pub name: String,
    pub seed: Option<u64>,
    pub n_paths: Option<usize>,
    pub n_steps: Option<usize>,
    pub t: Option<f64>,
    pub x: Option<Vec<f64>>,
    pub model: Option<ModelConfig>,
    /// Model substituted on the right-hand side; a mismatch is a negative control.
    pub control_model: Option<ModelConfig>,
    /// Perturbation schedules: a number (constant on every channel) or `sin(amplitude,frequency)`.
    pub h: Vec<String>,
    /// Test functions from the dictionary `one`, `x`, `x2`, `bump`.
    pub f: Vec<String>,
    pub bump_center: f64,
    pub pde: bool,
    pub pde_nodes: usize,
    pub pde_steps: usize,
    pub quadrature_nodes: usize,
    pub delta: f64,
    pub exponents: Vec<f64>,
    pub epsilons: Option<Vec<f64>>,
    pub directions: usize,
    pub y: Option<Vec<f64>>,
    pub y_points: usize,
    pub y_sigmas: f64,
    pub weight_tolerance: f64,
    pub kde_tolerance: f64,
}

impl ExperimentConfig {
    /// An experiment of `kind` with every default filled in.
    pub fn new(kind: ExperimentKind) -> Self {
        let (h, f) = match kind {
            ExperimentKind::QuasiInvariance => (vec!["0", "0.5", "sin(0.5,1)"], vec!["one", "x", "x2", "bump"]),
            ExperimentKind::ElementaryIbp => (vec!["0.5", "1"], vec!["x", "x2"]),
            ExperimentKind::GradientTransfer | ExperimentKind::Bismut => (vec![], vec!["one", "x", "x2", "bump"]),
            _ => (vec![], vec![]),
        };
        Self {
            kind,
            name: kind.as_str().to_string(),
            seed: None,
            n_paths: None,
            n_steps: None,
            t: None,
            x: None,
            model: None,
            control_model: None,
            h: h.into_iter().map(String::from).collect(),
            f: f.into_iter().map(String::from).collect(),
            bump_center: 0.5,
            pde: true,
            pde_nodes: 401,
            pde_steps: 200,
            quadrature_nodes: 16,
            delta: 1e-3,
            exponents: vec![1.0, 2.0, 4.0],
            epsilons: None,
            directions: 64,
            y: None,
            y_points: 81,
            y_sigmas: 4.0,
            weight_tolerance: 0.01,
            kde_tolerance: 0.02,
        }
    }

    fn to_table(&self) -> Table {
        let mut t = Table::new();
        let k = self.kind;
        t.insert("kind".into(), Value::String(k.as_str().into()));
        t.insert("name".into(), Value::String(self.name.clone()));
        if let Some(s) = self.seed {
            t.insert("seed".into(), Value::Integer(s as i64));
        }
        if let Some(n) = self.n_paths {
            t.insert("n_paths".into(), Value::Integer(n as i64));
        }
        if let Some(n) = self.n_steps {
            t.insert("n_steps".into(), Value::Integer(n as i64));
        }
        if let Some(v) = self.t {
            t.insert("t".into(), Value::Float(v));
        }
        if let Some(x) = &self.x {
            t.insert("x".into(), floats(x));
        }
        if let Some(m) = &self.model {
            t.insert("model".into(), Value::Table(m.to_table()));
        }
        if let Some(m) = &self.control_model {
            t.insert("control_model".into(), Value::Table(m.to_table()));
        }
        let keys = k.keys();
        let mut put = |key: &str, v: Value| {
            if keys.contains(&key) {
                t.insert(key.into(), v);
            }
        };
        put("h", strings(&self.h));
        put("f", strings(&self.f));
        put("bump_center", Value::Float(self.bump_center));
        put("pde", Value::Boolean(self.pde));
        put("pde_nodes", Value::Integer(self.pde_nodes as i64));
        put("pde_steps", Value::Integer(self.pde_steps as i64));
        put("quadrature_nodes", Value::Integer(self.quadrature_nodes as i64));
        put("delta", Value::Float(self.delta));
        put("exponents", floats(&self.exponents));
        if let Some(e) = &self.epsilons {
            put("epsilons", floats(e));
        }
        put("directions", Value::Integer(self.directions as i64));
        if let Some(y) = &self.y {
            put("y", floats(y));
        }
        put("y_points", Value::Integer(self.y_points as i64));
        put("y_sigmas", Value::Float(self.y_sigmas));
        put("weight_tolerance", Value::Float(self.weight_tolerance));
        put("kde_tolerance", Value::Float(self.kde_tolerance));
        t
    }
}

fn floats(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|x| Value::Float(*x)).collect())
}

fn strings(v: &[String]) -> Value {
    Value::Array(v.iter().map(|x| Value::String(x.clone())).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verbosity {
    Error,
    Warn,
    Info,
    Debug,
    Trace,
}

impl Verbosity {
    pub fn as_str(self) -> &'static str {
        match self {
            Verbosity::Error => "error",
            Verbosity::Warn => "warn",
            Verbosity::Info => "info",
            Verbosity::Debug => "debug",
            Verbosity::Trace => "trace",
        }
    }

    pub fn level(self) -> log::LevelFilter {
        match self {
            Verbosity::Error => log::LevelFilter::Error,
            Verbosity::Warn => log::LevelFilter::Warn,
            Verbosity::Info => log::LevelFilter::Info,
            Verbosity::Debug => log::LevelFilter::Debug,
            Verbosity::Trace => log::LevelFilter::Trace,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [Self::Error, Self::Warn, Self::Info, Self::Debug, Self::Trace]
            .into_iter()
            .find(|v| v.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub t: f64,
    /// Starting point; defaults to the origin (or `1` on the positive half-line).
    pub x: Option<Vec<f64>>,
    pub output_dir: String,
    pub verbosity: Verbosity,
    /// Worker count; `None` uses every available core.
    pub threads: Option<usize>,
    pub model: ModelConfig,
    pub experiments: Vec<ExperimentConfig>,
}

pub const DEFAULT_SEED: u64 = 20_240_601;
pub const DEFAULT_N_PATHS: usize = 20_000;
pub const DEFAULT_N_STEPS: usize = 128;
pub const DEFAULT_OUTPUT_DIR: &str = "bismut-runs";

impl RunConfig {
    pub fn new(model: ModelConfig, experiments: Vec<ExperimentConfig>) -> Self {
        Self {
            seed: DEFAULT_SEED,
            n_paths: DEFAULT_N_PATHS,
            n_steps: DEFAULT_N_STEPS,
            t: 1.0,
            x: None,
            output_dir: DEFAULT_OUTPUT_DIR.into(),
            verbosity: Verbosity::Info,
            threads: None,
            model,
            experiments,
        }
    }

    pub fn to_toml_string(&self) -> String {
        let mut t = Table::new();
        t.insert("seed".into(), Value::Integer(self.seed as i64));
        t.insert("n_paths".into(), Value::Integer(self.n_paths as i64));
        t.insert("n_steps".into(), Value::Integer(self.n_steps as i64));
        t.insert("t".into(), Value::Float(self.t));
        if let Some(x) = &self.x {
            t.insert("x".into(), floats(x));
        }
        t.insert("output_dir".into(), Value::String(self.output_dir.clone()));
        t.insert("verbosity".into(), Value::String(self.verbosity.as_str().into()));
        if let Some(n) = self.threads {
            t.insert("threads".into(), Value::Integer(n as i64));
        }
        t.insert("model".into(), Value::Table(self.model.to_table()));
        t.insert(
            "experiments".into(),
            Value::Array(self.experiments.iter().map(|e| Value::Table(e.to_table())).collect()),
        );
        toml::to_string(&t).expect("table serializes")
    }
}

/// FNV-1a of `name`, mixed with the master seed through splitmix64.
pub fn experiment_seed(master: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = master ^ h;
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    // Seeds stay representable as TOML integers.
    (z ^ (z >> 31)) & (i64::MAX as u64)
}

/// Parses a schedule spec: a number, or `sin(amplitude,frequency)`.
pub fn parse_schedule(spec: &str, num_noise: usize) -> Result<PerturbationSchedule, String> {
    let s = spec.trim();
    if let Ok(c) = s.parse::<f64>() {
        if !c.is_finite() {
            return Err(format!("schedule `{spec}` is not finite"));
        }
        return Ok(PerturbationSchedule::constant(vec![c; num_noise]));
    }
    if let Some(args) = s.strip_prefix("sin(").and_then(|r| r.strip_suffix(')')) {
        let parts: Vec<&str> = args.split(',').map(str::trim).collect();
        if let [a, f] = parts[..] {
            if let (Ok(a), Ok(f)) = (a.parse::<f64>(), f.parse::<f64>()) {
                if a.is_finite() && f.is_finite() {
                    return Ok(PerturbationSchedule::sine(num_noise, a, f));
                }
            }
        }
    }
    Err(format!(
        "schedule `{spec}` is neither a number nor sin(amplitude,frequency)"
    ))
}

struct Ctx {
    errors: Vec<ConfigError>,
}

impl Ctx {
    fn err(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.errors.push(ConfigError {
            path: path.into(),
            message: message.into(),
        });
    }

    fn reject_unknown(&mut self, table: &Table, allowed: &[&str], prefix: &str) {
        for key in table.keys() {
            if !allowed.contains(&key.as_str()) {
                self.err(join_path(prefix, key), "unknown key");
            }
        }
    }

    fn float(&mut self, table: &Table, key: &str, prefix: &str) -> Option<f64> {
        match table.get(key)? {
            Value::Float(v) => Some(*v),
            Value::Integer(v) => Some(*v as f64),
            _ => {
                self.err(join_path(prefix, key), "expected a number");
                None
            }
        }
    }

    fn positive_float(&mut self, table: &Table, key: &str, prefix: &str) -> Option<f64> {
        let v = self.float(table, key, prefix)?;
        if !(v > 0.0 && v.is_finite()) {
            self.err(join_path(prefix, key), format!("must be positive, got {v}"));
            return None;
        }
        Some(v)
    }

    fn count(&mut self, table: &Table, key: &str, prefix: &str) -> Option<usize> {
        match table.get(key)? {
            Value::Integer(v) if *v > 0 => Some(*v as usize),
            Value::Integer(v) => {
                self.err(join_path(prefix, key), format!("must be positive, got {v}"));
                None
            }
            _ => {
                self.err(join_path(prefix, key), "expected a positive integer");
                None
            }
        }
    }

    fn seed(&mut self, table: &Table, key: &str, prefix: &str) -> Option<u64> {
        match table.get(key)? {
            Value::Integer(v) if *v >= 0 => Some(*v as u64),
            _ => {
                self.err(join_path(prefix, key), "expected a non-negative integer");
                None
            }
        }
    }

    fn string(&mut self, table: &Table, key: &str, prefix: &str) -> Option<String> {
        match table.get(key)? {
            Value::String(s) => Some(s.clone()),
            _ => {
                self.err(join_path(prefix, key), "expected a string");
                None
            }
        }
    }

    fn boolean(&mut self, table: &Table, key: &str, prefix: &str) -> Option<bool> {
        match table.get(key)? {
            Value::Boolean(b) => Some(*b),
            _ => {
                self.err(join_path(prefix, key), "expected true or false");
                None
            }
        }
    }

    fn float_list(&mut self, table: &Table, key: &str, prefix: &str) -> Option<Vec<f64>> {
        let path = join_path(prefix, key);
        match table.get(key)? {
            Value::Array(a) => {
                let mut out = Vec::with_capacity(a.len());
                for (i, v) in a.iter().enumerate() {
                    match v {
                        Value::Float(f) if f.is_finite() => out.push(*f),
                        Value::Integer(n) => out.push(*n as f64),
                        _ => {
                            self.err(format!("{path}[{i}]"), "expected a finite number");
                            return None;
                        }
                    }
                }
                Some(out)
            }
            _ => {
                self.err(path, "expected an array of numbers");
                None
            }
        }
    }

    fn string_list(&mut self, table: &Table, key: &str, prefix: &str) -> Option<Vec<String>> {
        let path = join_path(prefix, key);
        match table.get(key)? {
            Value::Array(a) => {
                let mut out = Vec::with_capacity(a.len());
                for (i, v) in a.iter().enumerate() {
                    match v {
                        Value::String(s) => out.push(s.clone()),
                        Value::Float(f) => out.push(f.to_string()),
                        Value::Integer(n) => out.push(n.to_string()),
                        _ => {
                            self.err(format!("{path}[{i}]"), "expected a string");
                            return None;
                        }
                    }
                }
                Some(out)
            }
            Value::String(s) => Some(vec![s.clone()]),
            _ => {
                self.err(path, "expected an array of strings");
                None
            }
        }
    }

    fn model(&mut self, value: &Value, prefix: &str) -> Option<ModelConfig> {
        let table = match value {
            Value::Table(t) => t,
            Value::String(name) => {
                return match ModelConfig::default_for(name) {
                    Ok(m) => Some(m),
                    Err(e) => {
                        self.err(prefix, e.to_string());
                        None
                    }
                };
            }
            _ => {
                self.err(prefix, "expected a table with a `name` key");
                return None;
            }
        };
        let Some(name) = self.string(table, "name", prefix) else {
            if !table.contains_key("name") {
                self.err(join_path(prefix, "name"), "required");
            }
            return None;
        };
        let mut model = match ModelConfig::default_for(&name) {
            Ok(m) => m,
            Err(e) => {
                self.err(join_path(prefix, "name"), e.to_string());
                return None;
            }
        };
        match &mut model {
            ModelConfig::Bm { dim } => {
                self.reject_unknown(table, &["name", "dim"], prefix);
                if let Some(d) = self.count(table, "dim", prefix) {
                    *dim = d;
                }
            }
            ModelConfig::Ou { a, sigma } => {
                self.reject_unknown(table, &["name", "a", "sigma"], prefix);
                if let Some(v) = self.float(table, "a", prefix) {
                    *a = v;
                }
                if let Some(v) = self.positive_float(table, "sigma", prefix) {
                    *sigma = v;
                }
            }
            ModelConfig::Gbm { mu, sigma } => {
                self.reject_unknown(table, &["name", "mu", "sigma"], prefix);
                if let Some(v) = self.float(table, "mu", prefix) {
                    *mu = v;
                }
                if let Some(v) = self.positive_float(table, "sigma", prefix) {
                    *sigma = v;
                }
            }
            ModelConfig::Poly(p) => {
                self.reject_unknown(table, &["name", "dim", "drift", "noise"], prefix);
                let any = ["dim", "drift", "noise"].iter().any(|k| table.contains_key(*k));
                if any {
                    let dim = self.count(table, "dim", prefix).unwrap_or(1);
                    let drift = match table.get("drift") {
                        Some(v) => self.poly_field(v, dim, &join_path(prefix, "drift"))?,
                        None => vec![Polynomial { terms: vec![] }; dim],
                    };
                    let noise = match table.get("noise") {
                        Some(Value::Array(fields)) => {
                            let mut out = Vec::new();
                            for (i, f) in fields.iter().enumerate() {
                                out.push(self.poly_field(f, dim, &format!("{prefix}.noise[{i}]"))?);
                            }
                            out
                        }
                        Some(_) => {
                            self.err(join_path(prefix, "noise"), "expected an array of fields");
                            return None;
                        }
                        None => {
                            self.err(join_path(prefix, "noise"), "required for a custom poly model");
                            return None;
                        }
                    };
                    *p = PolyModel { dim, drift, noise };
                }
            }
        }
        if let Err(e) = model.build() {
            self.err(prefix, e.to_string());
            return None;
        }
        Some(model)
    }

    /// A field is an array of `dim` components; a component is an array of
    /// terms `[coefficient, exponent_1, …, exponent_dim]`.
    fn poly_field(&mut self, value: &Value, dim: usize, path: &str) -> Option<Vec<Polynomial>> {
        let Value::Array(components) = value else {
            self.err(path, "expected an array of components");
            return None;
        };
        if components.len() != dim {
            self.err(path, format!("expected {dim} components, got {}", components.len()));
            return None;
        }
        let mut out = Vec::with_capacity(dim);
        for (ci, comp) in components.iter().enumerate() {
            let Value::Array(terms) = comp else {
                self.err(format!("{path}[{ci}]"), "expected an array of terms");
                return None;
            };
            let mut poly = Polynomial { terms: vec![] };
            for (ti, term) in terms.iter().enumerate() {
                let tp = format!("{path}[{ci}][{ti}]");
                let parsed = match term {
                    Value::Array(parts) if parts.len() == dim + 1 => {
                        let coef = match &parts[0] {
                            Value::Float(f) => Some(*f),
                            Value::Integer(n) => Some(*n as f64),
                            _ => None,
                        };
                        let exps: Option<Vec<u32>> = parts[1..]
                            .iter()
                            .map(|p| match p {
                                Value::Integer(n) if (0..=32).contains(n) => Some(*n as u32),
                                _ => None,
                            })
                            .collect();
                        coef.zip(exps)
                    }
                    _ => None,
                };
                match parsed {
                    Some(t) => poly.terms.push(t),
                    None => {
                        self.err(tp, format!("expected [coefficient, {dim} exponents in 0..=32]"));
                        return None;
                    }
                }
            }
            out.push(poly);
        }
        Some(out)
    }
}

fn join_path(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

const TOP_KEYS: [&str; 10] = [
    "seed",
    "n_paths",
    "n_steps",
    "t",
    "x",
    "output_dir",
    "verbosity",
    "threads",
    "model",
    "experiments",
];

/// Parses and validates a run configuration, collecting every error.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigErrors> {
    let table: Table = match text.parse() {
        Ok(t) => t,
        Err(e) => {
            return Err(ConfigErrors(vec![ConfigError {
                path: "<document>".into(),
                message: e.to_string().trim().to_string(),
            }]))
        }
    };
    let mut cx = Ctx { errors: vec![] };
    cx.reject_unknown(&table, &TOP_KEYS, "");

    let model = match table.get("model") {
        Some(v) => cx.model(v, "model"),
        None => {
            cx.err("model", "required");
            None
        }
    };
    let mut cfg = RunConfig::new(model.clone().unwrap_or(ModelConfig::Bm { dim: 1 }), vec![]);
    if let Some(s) = cx.seed(&table, "seed", "") {
        cfg.seed = s;
    }
    if let Some(n) = cx.count(&table, "n_paths", "") {
        cfg.n_paths = n;
    }
    if let Some(n) = cx.count(&table, "n_steps", "") {
        cfg.n_steps = n;
    }
    if let Some(t) = cx.positive_float(&table, "t", "") {
        cfg.t = t;
    }
    cfg.x = cx.float_list(&table, "x", "");
    if let Some(dir) = cx.string(&table, "output_dir", "") {
        if dir.is_empty() {
            cx.err("output_dir", "must not be empty");
        }
        cfg.output_dir = dir;
    }
    if let Some(v) = cx.string(&table, "verbosity", "") {
        match Verbosity::parse(&v) {
            Some(level) => cfg.verbosity = level,
            None => cx.err(
                "verbosity",
                format!("`{v}` is not one of error, warn, info, debug, trace"),
            ),
        }
    }
    cfg.threads = cx.count(&table, "threads", "");
    if let (Some(x), Some(m)) = (&cfg.x, &model) {
        if x.len() != m.dim() {
            cx.err(
                "x",
                format!("model has dimension {}, x has {} entries", m.dim(), x.len()),
            );
        }
    }

    match table.get("experiments") {
        Some(Value::Array(list)) if !list.is_empty() => {
            let mut names = BTreeSet::new();
            for (i, v) in list.iter().enumerate() {
                let prefix = format!("experiments[{i}]");
                let Value::Table(et) = v else {
                    cx.err(prefix, "expected a table");
                    continue;
                };
                if let Some(e) = parse_experiment(&mut cx, et, &prefix, model.as_ref()) {
                    if !names.insert(e.name.clone()) {
                        cx.err(
                            join_path(&prefix, "name"),
                            format!("duplicate experiment name `{}`", e.name),
                        );
                    }
                    cfg.experiments.push(e);
                }
            }
        }
        Some(Value::Array(_)) | None => cx.err("experiments", "at least one experiment is required"),
        Some(_) => cx.err("experiments", "expected an array of tables ([[experiments]])"),
    }

    if cx.errors.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigErrors(cx.errors))
    }
}

fn parse_experiment(
    cx: &mut Ctx,
    et: &Table,
    prefix: &str,
    global_model: Option<&ModelConfig>,
) -> Option<ExperimentConfig> {
    let kind_name = match cx.string(et, "kind", prefix) {
        Some(k) => k,
        None => {
            if !et.contains_key("kind") {
                cx.err(join_path(prefix, "kind"), "required");
            }
            return None;
        }
    };
    let Some(kind) = ExperimentKind::parse(&kind_name) else {
        let known: Vec<&str> = ExperimentKind::ALL.iter().map(|k| k.as_str()).collect();
        cx.err(
            join_path(prefix, "kind"),
            format!("unknown experiment `{kind_name}` (known: {})", known.join(", ")),
        );
        return None;
    };
    let mut allowed: Vec<&str> = COMMON_EXPERIMENT_KEYS.to_vec();
    allowed.extend_from_slice(kind.keys());
    cx.reject_unknown(et, &allowed, prefix);

    let mut e = ExperimentConfig::new(kind);
    if let Some(name) = cx.string(et, "name", prefix) {
        if name.is_empty() || name.contains(['/', '\\']) {
            cx.err(
                join_path(prefix, "name"),
                "must be non-empty and free of path separators",
            );
        }
        e.name = name;
    }
    e.seed = cx.seed(et, "seed", prefix);
    e.n_paths = cx.count(et, "n_paths", prefix);
    e.n_steps = cx.count(et, "n_steps", prefix);
    e.t = cx.positive_float(et, "t", prefix);
    e.x = cx.float_list(et, "x", prefix);
    e.model = et.get("model").and_then(|v| cx.model(v, &join_path(prefix, "model")));
    e.control_model = et
        .get("control_model")
        .and_then(|v| cx.model(v, &join_path(prefix, "control_model")));
    let model = e.model.as_ref().or(global_model);
    if let (Some(x), Some(m)) = (&e.x, model) {
        if x.len() != m.dim() {
            cx.err(
                join_path(prefix, "x"),
                format!("model has dimension {}, x has {} entries", m.dim(), x.len()),
            );
        }
    }
    if let (Some(c), Some(m)) = (&e.control_model, model) {
        if c.dim() != m.dim() {
            cx.err(
                join_path(prefix, "control_model"),
                "control model must have the model's dimension",
            );
        }
    }

    if let Some(h) = cx.string_list(et, "h", prefix) {
        e.h = h;
    }
    for (i, h) in e.h.iter().enumerate() {
        if let Err(msg) = parse_schedule(h, 1) {
            cx.err(format!("{prefix}.h[{i}]"), msg);
        }
    }
    if let Some(f) = cx.string_list(et, "f", prefix) {
        e.f = f;
    }
    for (i, f) in e.f.iter().enumerate() {
        if TestFunction::dictionary(f, 0, 0.0).is_none() {
            cx.err(
                format!("{prefix}.f[{i}]"),
                format!("`{f}` is not one of {}", TestFunction::DICTIONARY.join(", ")),
            );
        }
    }
    let needs_lists = matches!(kind, ExperimentKind::QuasiInvariance | ExperimentKind::ElementaryIbp);
    if needs_lists && e.h.is_empty() {
        cx.err(join_path(prefix, "h"), "at least one schedule is required");
    }
    if kind.keys().contains(&"f") && e.f.is_empty() {
        cx.err(join_path(prefix, "f"), "at least one test function is required");
    }
    if let Some(c) = cx.float(et, "bump_center", prefix) {
        e.bump_center = c;
    }
    if let Some(b) = cx.boolean(et, "pde", prefix) {
        e.pde = b;
    }
    if let Some(n) = cx.count(et, "pde_nodes", prefix) {
        if n < 5 {
            cx.err(join_path(prefix, "pde_nodes"), "needs at least 5 nodes");
        }
        e.pde_nodes = n;
    }
    if let Some(n) = cx.count(et, "pde_steps", prefix) {
        e.pde_steps = n;
    }
    if let Some(n) = cx.count(et, "quadrature_nodes", prefix) {
        if n < 16 {
            cx.err(join_path(prefix, "quadrature_nodes"), "needs at least 16 nodes");
        }
        e.quadrature_nodes = n;
    }
    if let Some(d) = cx.positive_float(et, "delta", prefix) {
        e.delta = d;
    }
    if let Some(p) = cx.float_list(et, "exponents", prefix) {
        if p.is_empty() || p.iter().any(|v| *v < 0.0) {
            cx.err(
                join_path(prefix, "exponents"),
                "must be a non-empty list of non-negative numbers",
            );
        }
        e.exponents = p;
    }
    if let Some(eps) = cx.float_list(et, "epsilons", prefix) {
        if eps.is_empty() || eps.iter().any(|v| *v <= 0.0) {
            cx.err(
                join_path(prefix, "epsilons"),
                "must be a non-empty list of positive numbers",
            );
        }
        e.epsilons = Some(eps);
    }
    if let Some(n) = cx.count(et, "directions", prefix) {
        e.directions = n;
    }
    if let Some(y) = cx.float_list(et, "y", prefix) {
        if y.is_empty() {
            cx.err(join_path(prefix, "y"), "must not be empty");
        }
        e.y = Some(y);
    }
    if let Some(n) = cx.count(et, "y_points", prefix) {
        e.y_points = n;
    }
    if let Some(s) = cx.positive_float(et, "y_sigmas", prefix) {
        e.y_sigmas = s;
    }
    if let Some(s) = cx.positive_float(et, "weight_tolerance", prefix) {
        e.weight_tolerance = s;
    }
    if let Some(s) = cx.positive_float(et, "kde_tolerance", prefix) {
        e.kde_tolerance = s;
    }
    Some(e)
}

/// The fast tier run by `selfcheck`: one small experiment per kind on the
/// simplest models.
pub const SELFCHECK_CONFIG: &str = r#"
seed = 7
n_paths = 4000
n_steps = 32
t = 1.0
verbosity = "warn"

[model]
name = "bm"

[[experiments]]
kind = "quasi_invariance"
name = "quasi_invariance_bm"
h = ["0", "0.5"]
f = ["one", "x"]
pde_nodes = 201
pde_steps = 50

[[experiments]]
kind = "elementary_ibp"
name = "elementary_ibp_bm"
h = ["0.5"]
f = ["one", "x2"]
x = [1.0]
pde_nodes = 201
pde_steps = 50

[[experiments]]
kind = "gradient_transfer"
name = "gradient_transfer_ou"
model = { name = "ou" }
f = ["one", "x"]
pde_nodes = 201
pde_steps = 50

[[experiments]]
kind = "bismut"
name = "bismut_bm"
f = ["one", "x"]

[[experiments]]
kind = "nondegeneracy"
name = "nondegeneracy_bm"

[[experiments]]
kind = "density"
name = "density_bm"
n_paths = 100000
n_steps = 1
weight_tolerance = 0.03
kde_tolerance = 0.03
"#;
