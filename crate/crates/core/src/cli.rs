//! Batch experiment runner.
//!
//! A run is described by a TOML file with an optional `[output]` table and a
//! list of `[[experiment]]` tables. Each experiment has a `model`, exactly one
//! `product`, and any of the method blocks `pde`, `mc` and `vrst`:
//!
//! ```toml
//! [output]
//! timings = false            # add a wall_time_s column (breaks byte-identical output)
//!
//! [[experiment]]
//! name = "bermudan-atm-n5"
//! reference = "bermudan-atm-n5"   # row of the bundled reference table
//! model = { n = 5, level = 0.10 }  # alpha = 0.25, phi = 0.0413, vol = 0.2 by default
//! product = { type = "bermudan", strike = 0.10 }   # schedule defaults to yearly
//! pde = { r = 1, s = 1 }           # j = 601, steps = 10, g_max = 1000
//! mc = { drift = "full", paths = 1_000_000, policy_paths = 100_000 }
//! ```
//!
//! Ratchet floors use `product = { type = "ratchet", k1 = 0.10, a = 0.2, b = 0.9, c = 0.0 }`
//! (`legs = "last"` or `"portfolio"`). Schedules are 0-based fixing indices.
//! `pde.profile = true` adds the partial sums of a first-order plan;
//! `vrst = { paths, r, levels = [[0, 0], [1, 1]] }` estimates expansion terms
//! by shared-noise simulation.
//!
//! Output columns (fixed order): `experiment, n, strike, method, detail,
//! terms, value, std_error, lower, upper, midpoint, gap_std_error,
//! reference, delta_abs, delta_rel, value_full, paths, seed` and optionally
//! `wall_time_s`. Values are in units of notional; floats are printed with 6
//! significant digits, `value_full` with 17.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::anova::ExpansionPlan;
use crate::error::{Error, Result};
use crate::heatpde::{solve_plan, GridSpec, PdeContract};
use crate::mcbench::{bermudan_bounds, mc_price, mc_vrst, DriftMode, McConfig};
use crate::model::{LmmConfig, LmmModel};
use crate::products::{BermudanSwaption, PathContract, RatchetFloor, RatchetLegs};

const REFERENCE_TOML: &str = include_str!("../data/reference.toml");

#[derive(Debug, Parser)]
#[command(name = "pdexpand", version, about = "Run PDE-expansion and Monte Carlo pricing experiments")]
pub struct Args {
    /// Experiment file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output file; stdout if omitted. The resolved configuration is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Overrides every Monte Carlo seed in the file.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub experiment: Vec<ExperimentSpec>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub format: Format,
    pub timings: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    pub model: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub product: Option<ProductSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pde: Option<PdeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc: Option<McSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vrst: Option<VrstSpec>,
}

fn default_alpha() -> f64 {
    0.25
}
fn default_phi() -> f64 {
    0.0413
}
fn default_vol() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_phi")]
    pub phi: f64,
    #[serde(default = "default_vol")]
    pub vol: f64,
    /// Flat initial curve; ignored when `rates` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LegsSpec {
    #[default]
    Last,
    Portfolio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProductSpec {
    Bermudan {
        strike: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        schedule: Option<Vec<usize>>,
    },
    Ratchet {
        k1: f64,
        a: f64,
        b: f64,
        c: f64,
        #[serde(default)]
        legs: LegsSpec,
    },
}

impl ProductSpec {
    fn strike(&self) -> f64 {
        match self {
            ProductSpec::Bermudan { strike, .. } => *strike,
            ProductSpec::Ratchet { k1, .. } => *k1,
        }
    }
}

fn default_r() -> usize {
    1
}
fn default_s() -> usize {
    1
}
fn default_j() -> usize {
    GridSpec::default().j
}
fn default_steps() -> usize {
    GridSpec::default().steps_per_accrual
}
fn default_g_max() -> f64 {
    GridSpec::default().g_max
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeSpec {
    #[serde(default = "default_r")]
    pub r: usize,
    #[serde(default = "default_s")]
    pub s: usize,
    /// Explicit `[s, t]` levels; defaults to `(i, i)` for `i = 0..=s`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<[usize; 2]>>,
    #[serde(default = "default_j")]
    pub j: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_g_max")]
    pub g_max: f64,
    #[serde(default)]
    pub profile: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftSpec {
    #[default]
    Full,
    Frozen,
}

impl DriftSpec {
    fn mode(self) -> DriftMode {
        match self {
            DriftSpec::Full => DriftMode::Full,
            DriftSpec::Frozen => DriftMode::Frozen,
        }
    }

    fn label(self) -> &'static str {
        match self {
            DriftSpec::Full => "full",
            DriftSpec::Frozen => "frozen",
        }
    }
}

fn mc_defaults() -> McConfig {
    McConfig::default()
}
fn d_policy() -> usize {
    mc_defaults().policy_paths
}
fn d_paths() -> usize {
    mc_defaults().paths
}
fn d_outer() -> usize {
    mc_defaults().outer_paths
}
fn d_inner() -> usize {
    mc_defaults().inner_paths
}
fn d_substeps() -> usize {
    mc_defaults().substeps
}
fn d_seed() -> u64 {
    mc_defaults().seed
}
fn d_batch() -> usize {
    mc_defaults().batch_size
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSpec {
    #[serde(default)]
    pub drift: DriftSpec,
    #[serde(default = "d_policy")]
    pub policy_paths: usize,
    #[serde(default = "d_paths")]
    pub paths: usize,
    #[serde(default = "d_outer")]
    pub outer_paths: usize,
    #[serde(default = "d_inner")]
    pub inner_paths: usize,
    #[serde(default = "d_substeps")]
    pub substeps: usize,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VrstSpec {
    #[serde(default = "d_paths")]
    pub paths: usize,
    #[serde(default = "default_r")]
    pub r: usize,
    pub levels: Vec<[usize; 2]>,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
}

impl RunConfig {
    /// Parse and validate; every error names the offending field.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.is_empty() {
            return Err(Error::InvalidConfig("experiment: at least one [[experiment]] is required".into()));
        }
        for (i, e) in self.experiment.iter().enumerate() {
            e.validate().map_err(|err| match err {
                Error::InvalidConfig(m) | Error::InvalidInput(m) => {
                    Error::InvalidConfig(format!("experiment[{i}] ({}): {m}", e.name))
                }
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        for e in &mut self.experiment {
            if let Some(mc) = &mut e.mc {
                mc.seed = seed;
            }
            if let Some(v) = &mut e.vrst {
                v.seed = seed;
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let product = self
            .product
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("product: missing product block".into()))?;
        if self.pde.is_none() && self.mc.is_none() && self.vrst.is_none() {
            return Err(Error::InvalidConfig("no method block (pde, mc or vrst)".into()));
        }
        let model = self.model_config().map_err(|e| prefix("model", e))?;
        let n = model.n();
        build_product(product, &model).map_err(|e| prefix("product", e))?;
        if let Some(pde) = &self.pde {
            pde.grid().validate().map_err(|e| prefix("pde", e))?;
            let plan = pde.plan(n).map_err(|e| prefix("pde", e))?;
            if plan.max_dimension() > 2 {
                return Err(Error::InvalidConfig(format!(
                    "pde: r + s = {} needs {}-dimensional solves, at most 2 are supported",
                    pde.r + pde.s,
                    plan.max_dimension()
                )));
            }
            if pde.profile && (pde.r != 1 || pde.s != 1 || pde.levels.is_some()) {
                return Err(Error::InvalidConfig("pde.profile: requires the first-order plan r = 1, s = 1".into()));
            }
        }
        if let Some(mc) = &self.mc {
            mc.config().validate().map_err(|e| prefix("mc", e))?;
        }
        if let Some(v) = &self.vrst {
            if v.paths == 0 || v.batch_size == 0 {
                return Err(Error::InvalidConfig("vrst: paths and batch_size must be at least 1".into()));
            }
            v.plan(n).map_err(|e| prefix("vrst", e))?;
        }
        if let Some(id) = &self.reference {
            if ReferenceTable::bundled()?.entry(id).is_none() {
                return Err(Error::InvalidConfig(format!("reference: unknown reference row '{id}'")));
            }
        }
        Ok(())
    }

    fn model_config(&self) -> Result<LmmConfig> {
        let m = &self.model;
        let rates = match (&m.rates, m.level) {
            (Some(r), _) => {
                if r.len() != m.n {
                    return Err(Error::InvalidConfig(format!(
                        "rates has {} entries but n = {}",
                        r.len(),
                        m.n
                    )));
                }
                r.clone()
            }
            (None, Some(l)) => vec![l; m.n],
            (None, None) => return Err(Error::InvalidConfig("either level or rates is required".into())),
        };
        LmmConfig::new(m.alpha, m.phi, m.vol, rates)
    }
}

fn prefix(field: &str, e: Error) -> Error {
    match e {
        Error::InvalidConfig(m) | Error::InvalidInput(m) | Error::Domain(m) | Error::IncompletePlan(m) => {
            if m.starts_with(field) {
                Error::InvalidConfig(m)
            } else {
                Error::InvalidConfig(format!("{field}: {m}"))
            }
        }
        other => other,
    }
}

impl PdeSpec {
    fn grid(&self) -> GridSpec {
        GridSpec {
            j: self.j,
            steps_per_accrual: self.steps,
            g_max: self.g_max,
            ..GridSpec::default()
        }
    }

    fn plan(&self, n: usize) -> Result<ExpansionPlan> {
        match &self.levels {
            Some(l) => {
                let levels: Vec<(usize, usize)> = l.iter().map(|[s, t]| (*s, *t)).collect();
                ExpansionPlan::new(n, self.r, &levels)
            }
            None => ExpansionPlan::truncation(n, self.r, self.s),
        }
    }
}

impl McSpec {
    fn config(&self) -> McConfig {
        McConfig {
            policy_paths: self.policy_paths,
            paths: self.paths,
            outer_paths: self.outer_paths,
            inner_paths: self.inner_paths,
            substeps: self.substeps,
            drift: self.drift.mode(),
            seed: self.seed,
            batch_size: self.batch_size,
        }
    }
}

impl VrstSpec {
    fn plan(&self, n: usize) -> Result<ExpansionPlan> {
        let levels: Vec<(usize, usize)> = self.levels.iter().map(|[s, t]| (*s, *t)).collect();
        ExpansionPlan::new(n, self.r, &levels)
    }
}

enum Product {
    Bermudan(BermudanSwaption),
    Ratchet(RatchetFloor),
}

impl Product {
    fn pde(&self) -> &dyn PdeContract {
        match self {
            Product::Bermudan(p) => p,
            Product::Ratchet(p) => p,
        }
    }

    fn path(&self) -> &dyn PathContract {
        match self {
            Product::Bermudan(p) => p,
            Product::Ratchet(p) => p,
        }
    }
}

fn build_product(spec: &ProductSpec, model: &LmmConfig) -> Result<Product> {
    let n = model.n();
    Ok(match spec {
        ProductSpec::Bermudan { strike, schedule } => {
            let sched = schedule.clone().unwrap_or_else(|| BermudanSwaption::yearly_schedule(n));
            Product::Bermudan(BermudanSwaption::new(n, model.alpha, *strike, &sched)?)
        }
        ProductSpec::Ratchet { k1, a, b, c, legs } => {
            let legs = match legs {
                LegsSpec::Last => RatchetLegs::LastFloorlet,
                LegsSpec::Portfolio => RatchetLegs::Portfolio,
            };
            Product::Ratchet(RatchetFloor::new(n, model.alpha, *k1, *a, *b, *c, legs)?)
        }
    })
}

/// Published benchmark values keyed by row id, then by quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTable {
    rows: BTreeMap<String, BTreeMap<String, f64>>,
}

impl ReferenceTable {
    pub fn bundled() -> Result<Self> {
        Self::parse(REFERENCE_TOML)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, toml::Table> =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("reference table: {e}")))?;
        let rows = raw
            .into_iter()
            .map(|(id, t)| {
                let values = t
                    .into_iter()
                    .filter_map(|(k, v)| match v {
                        toml::Value::Float(f) => Some((k, f)),
                        toml::Value::Integer(i) => Some((k, i as f64)),
                        _ => None,
                    })
                    .collect();
                (id, values)
            })
            .collect();
        Ok(Self { rows })
    }

    pub fn entry(&self, id: &str) -> Option<&BTreeMap<String, f64>> {
        self.rows.get(id)
    }

    pub fn value(&self, id: &str, key: &str) -> Option<f64> {
        self.rows.get(id).and_then(|r| r.get(key)).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(String::as_str)
    }
}

/// One output line.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultRow {
    pub experiment: String,
    pub n: usize,
    pub strike: f64,
    pub method: String,
    pub detail: String,
    pub terms: Option<usize>,
    pub value: f64,
    pub std_error: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub midpoint: Option<f64>,
    pub gap_std_error: Option<f64>,
    pub reference: Option<f64>,
    pub paths: Option<usize>,
    pub seed: Option<u64>,
    pub wall_time: Option<f64>,
}

impl ResultRow {
    pub fn delta_abs(&self) -> Option<f64> {
        self.reference.map(|r| self.value - r)
    }

    pub fn delta_rel(&self) -> Option<f64> {
        self.reference.filter(|r| *r != 0.0).map(|r| (self.value - r) / r)
    }
}

pub const COLUMNS: [&str; 18] = [
    "experiment",
    "n",
    "strike",
    "method",
    "detail",
    "terms",
    "value",
    "std_error",
    "lower",
    "upper",
    "midpoint",
    "gap_std_error",
    "reference",
    "delta_abs",
    "delta_rel",
    "value_full",
    "paths",
    "seed",
];

fn sig6(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{v:.5e}"),
        None => String::new(),
    }
}

fn cells(row: &ResultRow, timings: bool) -> Vec<String> {
    let mut c = vec![
        row.experiment.clone(),
        row.n.to_string(),
        format!("{}", row.strike),
        row.method.clone(),
        row.detail.clone(),
        row.terms.map(|t| t.to_string()).unwrap_or_default(),
        sig6(Some(row.value)),
        sig6(row.std_error),
        sig6(row.lower),
        sig6(row.upper),
        sig6(row.midpoint),
        sig6(row.gap_std_error),
        sig6(row.reference),
        sig6(row.delta_abs()),
        sig6(row.delta_rel()),
        format!("{:.16e}", row.value),
        row.paths.map(|p| p.to_string()).unwrap_or_default(),
        row.seed.map(|s| s.to_string()).unwrap_or_default(),
    ];
    if timings {
        c.push(row.wall_time.map(|t| format!("{t:.3}")).unwrap_or_default());
    }
    c
}

fn header(timings: bool) -> Vec<String> {
    let mut h: Vec<String> = COLUMNS.iter().map(|s| s.to_string()).collect();
    if timings {
        h.push("wall_time_s".into());
    }
    h
}

/// Write `rows` as RFC-4180 CSV or column-aligned text.
pub fn emit_table<W: Write>(rows: &[ResultRow], format: Format, timings: bool, out: W) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("no rows to write".into()));
    }
    let head = header(timings);
    let body: Vec<Vec<String>> = rows.iter().map(|r| cells(r, timings)).collect();
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(&head).map_err(csv_err)?;
            for r in &body {
                w.write_record(r).map_err(csv_err)?;
            }
            w.flush()?;
        }
        Format::Plain => {
            let mut widths: Vec<usize> = head.iter().map(String::len).collect();
            for r in &body {
                for (w, c) in widths.iter_mut().zip(r) {
                    *w = (*w).max(c.len());
                }
            }
            let mut out = out;
            for r in std::iter::once(&head).chain(&body) {
                let mut line = String::new();
                for (i, (c, w)) in r.iter().zip(&widths).enumerate() {
                    if i > 0 {
                        line.push_str("  ");
                    }
                    let _ = write!(line, "{c:<w$}");
                }
                writeln!(out, "{}", line.trim_end())?;
            }
            out.flush()?;
        }
    }
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// Run one experiment. Rows already produced are appended to `rows` even if
/// a later method fails.
pub fn run_experiment(spec: &ExperimentSpec, refs: &ReferenceTable, rows: &mut Vec<ResultRow>) -> Result<()> {
    spec.validate()?;
    let cfg = spec.model_config()?;
    let product_spec = spec.product.as_ref().expect("validated");
    let product = build_product(product_spec, &cfg)?;
    let model = LmmModel::new(cfg)?;
    let n = model.n();
    let discount = model.config.terminal_discount();
    let lookup = |key: &str| spec.reference.as_deref().and_then(|id| refs.value(id, key));
    let base = ResultRow {
        experiment: spec.name.clone(),
        n,
        strike: product_spec.strike(),
        ..ResultRow::default()
    };

    if let Some(pde) = &spec.pde {
        let plan = pde.plan(n)?;
        info!("{}: PDE plan with {} terms", spec.name, plan.terms.len());
        let start = Instant::now();
        let sol = solve_plan(&model, &plan, product.pde(), &pde.grid())?;
        let elapsed = start.elapsed().as_secs_f64();
        let clamps = product.pde().clamp_count();
        if clamps > 0 {
            warn!("{}: {clamps} strike updates were clamped at the top of the strike axis", spec.name);
        }
        let value = sol.assembly.total * discount;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("{}: PDE value is not finite", spec.name)));
        }
        rows.push(ResultRow {
            method: "pde".into(),
            detail: format!("r{}-s{}", plan.r, pde.s),
            terms: Some(plan.terms.len()),
            value,
            reference: lookup("pde"),
            wall_time: Some(elapsed),
            ..base.clone()
        });
        if plan.levels.len() > 1 {
            for (lvl, v) in plan.levels.iter().zip(&sol.assembly.levels) {
                let label = format!("V{}{}{}", plan.r, lvl.s, lvl.t);
                rows.push(ResultRow {
                    method: "pde-level".into(),
                    terms: Some(lvl.weights.len()),
                    value: v * discount,
                    reference: lookup(&label),
                    detail: label,
                    ..base.clone()
                });
            }
        }
        if pde.profile {
            let base_idx = plan.find(&[]).expect("first-order plan has a base term");
            let corrections = (1..n)
                .map(|k| {
                    plan.find(&[(k, 1)])
                        .map(|i| sol.terms[i])
                        .ok_or_else(|| Error::IncompletePlan(format!("no term for direction {}", k + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            let profile = crate::anova::partial_sum_profile(sol.terms[base_idx], &corrections);
            for (k, v) in profile.iter().enumerate() {
                let label = format!("k{}", k + 1);
                rows.push(ResultRow {
                    method: "pde-profile".into(),
                    terms: Some(k + 1),
                    value: v * discount,
                    reference: lookup(&label),
                    detail: label,
                    ..base.clone()
                });
            }
        }
    }

    if let Some(mc) = &spec.mc {
        let mcfg = mc.config();
        let drift = mc.drift.label();
        let start = Instant::now();
        match &product {
            Product::Bermudan(b) => {
                let (_, bounds) = bermudan_bounds(&model, b, &mcfg)?;
                rows.push(ResultRow {
                    method: "mc-bounds".into(),
                    detail: drift.into(),
                    value: bounds.midpoint(),
                    std_error: Some(bounds.lower_std_error),
                    lower: Some(bounds.lower),
                    upper: Some(bounds.upper()),
                    midpoint: Some(bounds.midpoint()),
                    gap_std_error: Some(bounds.gap_std_error),
                    reference: lookup(&format!("mid_{drift}")),
                    paths: Some(mcfg.paths),
                    seed: Some(mcfg.seed),
                    wall_time: Some(start.elapsed().as_secs_f64()),
                    ..base.clone()
                });
            }
            Product::Ratchet(r) => {
                let est = mc_price(&model, r, &mcfg)?;
                rows.push(ResultRow {
                    method: "mc".into(),
                    detail: drift.into(),
                    value: est.value,
                    std_error: Some(est.std_error),
                    reference: lookup(&format!("mc_{drift}")),
                    paths: Some(est.paths),
                    seed: Some(mcfg.seed),
                    wall_time: Some(start.elapsed().as_secs_f64()),
                    ..base.clone()
                });
            }
        }
    }

    if let Some(v) = &spec.vrst {
        let plan = v.plan(n)?;
        let start = Instant::now();
        let est = mc_vrst(&model, &plan, product.path(), v.paths, v.seed, v.batch_size)?;
        let elapsed = start.elapsed().as_secs_f64();
        let row = |detail: String, terms: Option<usize>, e: &crate::mcbench::PriceEstimate| ResultRow {
            method: "mc-vrst".into(),
            reference: lookup(&detail),
            detail,
            terms,
            value: e.value,
            std_error: Some(e.std_error),
            paths: Some(e.paths),
            seed: Some(v.seed),
            ..base.clone()
        };
        for (i, lvl) in plan.levels.iter().enumerate() {
            rows.push(row(format!("V{}{}{}", plan.r, lvl.s, lvl.t), Some(lvl.weights.len()), &est.levels[i]));
        }
        for (i, lvl) in plan.levels.iter().enumerate() {
            rows.push(row(format!("sum-to-V{}{}{}", plan.r, lvl.s, lvl.t), None, &est.totals[i]));
            rows.push(row(format!("sum-to-V{}{}{}-minus-full", plan.r, lvl.s, lvl.t), None, &est.errors[i]));
        }
        let mut full = row("full".into(), None, &est.full);
        full.wall_time = Some(elapsed);
        rows.push(full);
    }
    Ok(())
}

/// Run every experiment in order. On failure the rows produced so far are
/// returned together with the error.
pub fn run_all(cfg: &RunConfig) -> (Vec<ResultRow>, Option<Error>) {
    let refs = match ReferenceTable::bundled() {
        Ok(r) => r,
        Err(e) => return (Vec::new(), Some(e)),
    };
    let mut rows = Vec::new();
    for spec in &cfg.experiment {
        info!("running experiment {}", spec.name);
        if let Err(e) = run_experiment(spec, &refs, &mut rows) {
            return (rows, Some(e));
        }
    }
    (rows, None)
}

impl Error {
    /// Process exit code: 1 for invalid input, 2 for numerical failures, 3 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::InvalidInput(_) | Error::IncompletePlan(_) => 1,
            Error::Domain(_) | Error::Numerical(_) => 2,
            Error::Io(_) => 3,
        }
    }
}

fn resolved_path(out: &Path) -> PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(".resolved.toml");
    PathBuf::from(p)
}

/// Entry point behind the binary; returns the process exit code.
pub fn run(args: &Args) -> i32 {
    match run_inner(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run_inner(args: &Args) -> Result<()> {
    if let Some(t) = args.threads {
        if t == 0 {
            return Err(Error::InvalidConfig("--threads must be at least 1".into()));
        }
        // Fails only if a global pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let text = fs::read_to_string(&args.config)?;
    let mut cfg = RunConfig::from_toml(&text)?;
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    if let Some(f) = args.format {
        cfg.output.format = f;
    }
    let resolved = cfg.to_toml();
    info!("resolved configuration:\n{resolved}");
    if let Some(out) = &args.out {
        fs::write(resolved_path(out), &resolved)?;
    }

    let (rows, failure) = run_all(&cfg);
    if !rows.is_empty() {
        match &args.out {
            Some(path) => {
                let file = fs::File::create(path)?;
                emit_table(&rows, cfg.output.format, cfg.output.timings, std::io::BufWriter::new(file))?;
            }
            None => emit_table(&rows, cfg.output.format, cfg.output.timings, std::io::stdout().lock())?,
        }
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
