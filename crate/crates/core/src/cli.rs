//! Command-line front end: config ingestion, experiment runs and deterministic output.
//!
//! Each subcommand reads one flat TOML document. Every problem in the document is
//! reported at once (unknown keys with their paths, type errors, range errors) before
//! anything is computed. Outputs are a JSON summary plus CSV series; each carries the
//! SHA-256 of the validated config.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use num_complex::Complex64 as C64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diophantine::{measure_estimate, DioParams, FrequencyMap, MeasureResult};
use crate::duffing::{
    frequency_extract, shell_sample, simulate, stability_fraction, DuffingNetwork, ForcingTerm, FrequencyEstimate,
    ShellSetup, StabilityOptions, StabilityReport,
};
use crate::error::{KamError, Result};
use crate::kam::{make_schedule, run, KamConfig, KamProblem, ResidualReport, ScheduleEcho, StepLog};
use crate::series::FourierTaylorSeries;
use crate::smoothing::{algebraic_series, decay_regression, decompose, DecayFit, DecompositionSchedule, SmoothingKernel};
use crate::taylor::{layout, Taylor};

/// Environment variable that replaces the default output directory.
pub const OUT_DIR_ENV: &str = "KAM_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "kamtorus", version, about = "Invariant tori, Diophantine measure and Duffing network experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML document for the subcommand; defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $KAM_OUT_DIR, else ./out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides every seed in the document.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the norm-check slack factor.
    #[arg(long, global = true)]
    pub slack: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Derived constants and the step schedule.
    Schedule,
    /// Analytic decomposition of algebraically decaying series.
    SmoothDemo,
    /// Monte-Carlo measure of Diophantine initial actions.
    Dio,
    /// Normal-form iteration for one invariant torus.
    Kam,
    /// Stability fraction of a forced Duffing network.
    Duffing,
}

/// One monomial `coeff * I^exp` of the integrable part, about `I = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Monomial {
    pub exp: Vec<u8>,
    pub coeff: f64,
}

/// `amp * cos(<k, theta> + l t)`, or `sin` when `sine` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigTerm {
    pub k: Vec<i32>,
    pub l: i32,
    pub amp: f64,
    #[serde(default)]
    pub sine: bool,
}

/// `amp * sum (1 + |k| + |l|)^(-ell-2) e^{i(<k,theta> + l t)}` over modes of order `<= order`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayGenerator {
    pub ell: f64,
    pub order: u32,
    pub amp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleDoc {
    pub a: f64,
    pub b: f64,
    pub d: usize,
    pub mu: f64,
    pub eps: f64,
    /// Entries of each sequence to print.
    pub entries: u64,
}

impl Default for ScheduleDoc {
    fn default() -> Self {
        ScheduleDoc { a: 2.0, b: 1.0, d: 1, mu: 1e-3, eps: 1e-3, entries: 12 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothDoc {
    pub d: usize,
    pub ells: Vec<f64>,
    pub order: u32,
    pub s0: f64,
    pub q: f64,
    pub fitted: usize,
    pub a1: f64,
    pub plateau: f64,
}

impl Default for SmoothDoc {
    fn default() -> Self {
        SmoothDoc { d: 1, ells: vec![4.0, 8.0], order: 171, s0: 1.0 / 40.0, q: 0.7, fitted: 6, a1: 1.0, plateau: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DioDoc {
    pub a: f64,
    pub b: f64,
    pub d: usize,
    pub mu: f64,
    pub eps: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// High-order check runs up to `k_max = ceil(k_max_factor * cutoff)`.
    pub k_max_factor: f64,
    /// Extra values of eps for the measure curve.
    pub eps_curve: Vec<f64>,
    /// Integrable part; empty means `sum I_j^2 / 2`.
    pub h0: Vec<Monomial>,
}

impl Default for DioDoc {
    fn default() -> Self {
        DioDoc {
            a: 2.0,
            b: 1.0,
            d: 1,
            mu: 1e-3,
            eps: 1e-3,
            n_samples: 500,
            seed: 7,
            k_max_factor: 10.0,
            eps_curve: Vec::new(),
            h0: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KamDoc {
    pub a: f64,
    pub b: f64,
    pub d: usize,
    pub mu: f64,
    pub eps: f64,
    pub h0: Vec<Monomial>,
    pub perturbation: Vec<TrigTerm>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<DecayGenerator>,
    pub i0: Vec<f64>,
    pub engine: KamConfig,
}

impl Default for KamDoc {
    fn default() -> Self {
        KamDoc {
            a: 2.0,
            b: 1.0,
            d: 1,
            mu: 1e-3,
            eps: 0.1,
            h0: Vec::new(),
            perturbation: vec![TrigTerm { k: vec![1], l: -1, amp: 1e-3, sine: false }],
            generator: None,
            i0: vec![1.3 + (5f64.sqrt() - 1.0) / 200.0],
            engine: KamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DuffingDoc {
    pub m: usize,
    pub n: u32,
    pub terms: Vec<ForcingTerm>,
    /// Inner shell radii `A` in total action.
    pub shells: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
    /// Samples of the first shell written out as full trajectories.
    pub trajectories: usize,
    pub stability: StabilityOptions,
}

impl Default for DuffingDoc {
    fn default() -> Self {
        DuffingDoc {
            m: 1,
            n: 1,
            terms: vec![ForcingTerm::cosine(vec![1], 1, 0.5)],
            shells: vec![10.0],
            n_samples: 50,
            seed: 7,
            trajectories: 2,
            stability: StabilityOptions { periods: 400.0, ..StabilityOptions::default() },
        }
    }
}

/// A config document: defaults, a fully populated example for key checking, and
/// range checks.
pub trait Document: Serialize + DeserializeOwned + Default {
    /// Every optional field set and every list non-empty, so that all legal key paths appear.
    fn example() -> Self {
        Self::default()
    }

    fn validate(&self) -> Vec<String>;

    /// Apply command-line overrides.
    fn apply(&mut self, _seed: Option<u64>, _slack: Option<f64>) {}
}

fn dio_errors(a: f64, b: f64, d: usize, mu: f64, eps: f64) -> Vec<String> {
    let mut e = Vec::new();
    if !(b > 0.0 && a > b) {
        e.push(format!("a, b: need a>b>0 (got a={a}, b={b})"));
    }
    if d == 0 {
        e.push("d: must be >= 1".into());
    }
    if !(mu > 0.0 && mu < 1.0) {
        e.push(format!("mu: must lie in (0, 1) (got {mu})"));
    }
    if !(eps > 0.0 && eps < 1.0) {
        e.push(format!("eps: must lie in (0, 1) (got {eps})"));
    }
    e
}

fn h0_errors(h0: &[Monomial], d: usize, key: &str) -> Vec<String> {
    h0.iter()
        .enumerate()
        .filter(|(_, m)| m.exp.len() != d)
        .map(|(i, m)| format!("{key}[{i}].exp: has {} entries, expected d={d}", m.exp.len()))
        .collect()
}

impl Document for ScheduleDoc {
    fn validate(&self) -> Vec<String> {
        let mut e = dio_errors(self.a, self.b, self.d, self.mu, self.eps);
        if self.entries == 0 {
            e.push("entries: must be >= 1".into());
        }
        e
    }
}

impl Document for SmoothDoc {
    fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        if self.d == 0 {
            e.push("d: must be >= 1".into());
        }
        if self.ells.iter().any(|&l| !(l > 0.0)) {
            e.push("ells: every entry must be positive".into());
        }
        if !(self.s0 > 0.0 && self.s0 <= 0.25) {
            e.push(format!("s0: must lie in (0, 1/4] (got {})", self.s0));
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            e.push(format!("q: must lie in (0, 1) (got {})", self.q));
        }
        if self.fitted < 2 {
            e.push("fitted: need at least 2 pieces".into());
        }
        if !(self.plateau > 0.0 && self.plateau < self.a1) {
            e.push("a1, plateau: need 0 < plateau < a1".into());
        }
        e
    }
}

impl Document for DioDoc {
    fn example() -> Self {
        DioDoc { eps_curve: vec![1e-4], h0: vec![Monomial { exp: vec![2], coeff: 0.5 }], ..DioDoc::default() }
    }

    fn validate(&self) -> Vec<String> {
        let mut e = dio_errors(self.a, self.b, self.d, self.mu, self.eps);
        for (i, &x) in self.eps_curve.iter().enumerate() {
            if !(x > 0.0 && x < 1.0) {
                e.push(format!("eps_curve[{i}]: must lie in (0, 1) (got {x})"));
            }
        }
        if self.n_samples < 100 {
            e.push(format!("n_samples: need at least 100 (got {})", self.n_samples));
        }
        if !(self.k_max_factor >= 1.0) {
            e.push("k_max_factor: must be >= 1".into());
        }
        e.extend(h0_errors(&self.h0, self.d, "h0"));
        e
    }

    fn apply(&mut self, seed: Option<u64>, _slack: Option<f64>) {
        if let Some(s) = seed {
            self.seed = s;
        }
    }
}

impl Document for KamDoc {
    fn example() -> Self {
        KamDoc {
            h0: vec![Monomial { exp: vec![2], coeff: 0.5 }],
            generator: Some(DecayGenerator { ell: 4.0, order: 4, amp: 1e-3 }),
            ..KamDoc::default()
        }
    }

    fn validate(&self) -> Vec<String> {
        let mut e = dio_errors(self.a, self.b, self.d, self.mu, self.eps);
        e.extend(h0_errors(&self.h0, self.d, "h0"));
        for (i, t) in self.perturbation.iter().enumerate() {
            if t.k.len() != self.d {
                e.push(format!("perturbation[{i}].k: has {} entries, expected d={}", t.k.len(), self.d));
            }
        }
        if let Some(g) = &self.generator {
            if !(g.ell > 0.0) {
                e.push("generator.ell: must be positive".into());
            }
        }
        if self.i0.len() != self.d {
            e.push(format!("i0: has {} entries, expected d={}", self.i0.len(), self.d));
        }
        e.extend(self.engine.validate().into_iter().map(|m| format!("engine: {m}")));
        e
    }

    fn apply(&mut self, seed: Option<u64>, slack: Option<f64>) {
        if let Some(s) = seed {
            self.engine.check_seed = s;
        }
        if let Some(s) = slack {
            self.engine.slack = s;
        }
    }
}

impl Document for DuffingDoc {
    fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        if let Err(err) = DuffingNetwork::new(self.m, self.n, self.terms.clone()) {
            e.push(format!("terms: {err}"));
        }
        if self.shells.is_empty() || self.shells.iter().any(|&a| !(a > 0.0)) {
            e.push("shells: need at least one positive shell".into());
        }
        if self.n_samples < 50 {
            e.push(format!("n_samples: need at least 50 (got {})", self.n_samples));
        }
        if self.trajectories > self.n_samples {
            e.push("trajectories: cannot exceed n_samples".into());
        }
        let s = &self.stability;
        if !(s.c4 > 1.0) {
            e.push(format!("stability.c4: must exceed 1 (got {})", s.c4));
        }
        if !(s.periods > 0.0) || s.steps_per_period == 0 {
            e.push("stability: periods and steps_per_period must be positive".into());
        }
        e
    }

    fn apply(&mut self, seed: Option<u64>, _slack: Option<f64>) {
        if let Some(s) = seed {
            self.seed = s;
        }
    }
}

/// Drop keys absent from `schema`, recording their paths.
fn strip_unknown(user: &toml::Value, schema: &toml::Value, path: &str, errs: &mut Vec<String>) -> toml::Value {
    let join = |k: &str| if path.is_empty() { k.to_string() } else { format!("{path}.{k}") };
    match (user, schema) {
        (toml::Value::Table(u), toml::Value::Table(s)) => {
            let mut out = toml::Table::new();
            for (k, v) in u {
                match s.get(k) {
                    Some(sv) => {
                        out.insert(k.clone(), strip_unknown(v, sv, &join(k), errs));
                    }
                    None => errs.push(format!("{}: unknown key", join(k))),
                }
            }
            toml::Value::Table(out)
        }
        (toml::Value::Array(u), toml::Value::Array(s)) if s.first().is_some_and(|x| x.is_table()) => toml::Value::Array(
            u.iter().enumerate().map(|(i, v)| strip_unknown(v, &s[0], &format!("{path}[{i}]"), errs)).collect(),
        ),
        _ => user.clone(),
    }
}

/// Type-check each value by substituting it into the example document.
fn type_errors<D: Document>(user: &toml::Table, example: &toml::Table, prefix: &[&str], errs: &mut Vec<String>) {
    for (k, v) in user {
        let mut path = prefix.to_vec();
        path.push(k);
        if let (toml::Value::Table(ut), Some(toml::Value::Table(_))) = (v, example.get(k)) {
            let sub = match example.get(k) {
                Some(toml::Value::Table(t)) => t,
                _ => unreachable!(),
            };
            type_errors::<D>(ut, sub, &path, errs);
            continue;
        }
        let mut probe = toml::Value::try_from(D::example()).expect("documents serialize to TOML");
        let mut slot = &mut probe;
        for p in &path {
            slot = slot.get_mut(*p).expect("key present after stripping");
        }
        *slot = v.clone();
        if let Err(e) = probe.try_into::<D>() {
            errs.push(format!("{}: {}", path.join("."), e.message().trim()));
        }
    }
}

/// Parse a document, returning all problems found rather than the first.
pub fn parse_document<D: Document>(text: &str) -> Result<D> {
    let user: toml::Table = text.parse().map_err(|e: toml::de::Error| KamError::Config(vec![e.to_string()]))?;
    let schema = toml::Value::try_from(D::example()).expect("documents serialize to TOML");
    let mut errs = Vec::new();
    let clean = match strip_unknown(&toml::Value::Table(user), &schema, "", &mut errs) {
        toml::Value::Table(t) => t,
        _ => unreachable!(),
    };
    let schema_table = schema.as_table().expect("documents are tables");
    let mut type_errs = Vec::new();
    type_errors::<D>(&clean, schema_table, &[], &mut type_errs);
    if !type_errs.is_empty() {
        errs.extend(type_errs);
        return Err(KamError::Config(errs));
    }
    let doc: D = toml::Value::Table(clean).try_into().map_err(|e: toml::de::Error| KamError::Config(vec![e.to_string()]))?;
    errs.extend(doc.validate());
    if errs.is_empty() {
        Ok(doc)
    } else {
        Err(KamError::Config(errs))
    }
}

/// JSON formatter that prints every float with 17 significant digits.
struct Fixed17(serde_json::ser::PrettyFormatter<'static>);

impl serde_json::ser::Formatter for Fixed17 {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> std::io::Result<()> {
        write!(w, "{v:.16e}")
    }
    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, v: f32) -> std::io::Result<()> {
        write!(w, "{:.16e}", v as f64)
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Serialize with fixed float formatting.
pub fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Fixed17(serde_json::ser::PrettyFormatter::new()));
    v.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

/// SHA-256 of the validated document in its fixed JSON form.
pub fn config_hash<D: Serialize>(cmd: Command, doc: &D) -> Result<String> {
    let mut h = Sha256::new();
    h.update(format!("{cmd:?}\n").as_bytes());
    h.update(to_json(doc)?.as_bytes());
    Ok(hex::encode(h.finalize()))
}

fn f(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV writer with the config hash on its first line.
struct Csv {
    buf: String,
}

impl Csv {
    fn new(hash: &str, header: &[String]) -> Csv {
        Csv { buf: format!("# config_hash={hash}\n{}\n", header.join(",")) }
    }

    fn row(&mut self, cells: impl IntoIterator<Item = String>) {
        self.buf.push_str(&cells.into_iter().collect::<Vec<_>>().join(","));
        self.buf.push('\n');
    }

    fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, &self.buf)?;
        Ok(())
    }
}

fn numbered(name: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{name}_{i}"))
}

fn build_h0(h0: &[Monomial], d: usize) -> Result<FourierTaylorSeries> {
    let deg = h0.iter().map(|m| m.exp.iter().map(|&e| e as usize).sum::<usize>()).max().unwrap_or(2).max(2);
    let lay = layout(d, deg);
    let mut p = Taylor::zero(&lay);
    if h0.is_empty() {
        for j in 0..d {
            let mut e = vec![0u8; d];
            e[j] = 2;
            p.coeffs_mut()[lay.index_of(&e).expect("degree 2 is in the layout")] += C64::new(0.5, 0.0);
        }
    }
    for m in h0 {
        let i = lay.index_of(&m.exp).ok_or_else(|| KamError::InvalidParameter(format!("monomial {:?} out of range", m.exp)))?;
        p.coeffs_mut()[i] += C64::new(m.coeff, 0.0);
    }
    Ok(FourierTaylorSeries::action_polynomial(vec![0.0; d], p))
}

#[derive(Serialize)]
struct ScheduleOut {
    config_hash: String,
    params: DioParams,
    schedule: ScheduleEcho,
}

fn run_schedule(doc: &ScheduleDoc, hash: &str, out: &Path) -> Result<()> {
    let params = DioParams::derive(doc.a, doc.b, doc.d, doc.mu, doc.eps)?;
    let schedule = make_schedule(&params)?.echo(doc.entries);
    let summary = ScheduleOut { config_hash: hash.into(), params, schedule };
    std::fs::write(out.join("schedule.json"), to_json(&summary)?)?;
    Ok(())
}

#[derive(Serialize)]
struct SmoothOut {
    config_hash: String,
    kernel: SmoothingKernel,
    /// Largest coefficient error of the sum of the pieces, per `ell`.
    reconstruction: Vec<f64>,
    fits: Vec<DecayFit>,
}

fn run_smooth(doc: &SmoothDoc, hash: &str, out: &Path) -> Result<()> {
    let kernel = SmoothingKernel::new(doc.a1, doc.plateau)?;
    let mut csv = Csv::new(hash, &["ell", "piece", "width", "norm", "constant"].map(String::from));
    let mut fits = Vec::new();
    let mut reconstruction = Vec::new();
    for &ell in &doc.ells {
        let series = algebraic_series(doc.d, ell, doc.order);
        let max_xi = series.modes().map(|(m, _)| m.euclid()).fold(0.0, f64::max);
        let sched = DecompositionSchedule::geometric(doc.s0, doc.q, doc.fitted + 1, max_xi, &kernel, ell)?;
        let mut sum = FourierTaylorSeries::zero(series.center().to_vec(), 0, 0);
        for p in decompose(&series, &sched, &kernel)? {
            sum = sum.add(&p.series)?;
        }
        reconstruction.push(series.sub(&sum)?.max_coeff());
        let fit = decay_regression(&series, &sched, &kernel, doc.fitted)?;
        for (nu, ((s, norm), c)) in fit.widths.iter().zip(&fit.norms).zip(&fit.constants).enumerate() {
            csv.row([f(ell), (nu + 1).to_string(), f(*s), f(*norm), f(*c)]);
        }
        fits.push(fit);
    }
    csv.save(&out.join("smooth_decay.csv"))?;
    let summary = SmoothOut { config_hash: hash.into(), kernel, reconstruction, fits };
    std::fs::write(out.join("smooth.json"), to_json(&summary)?)?;
    Ok(())
}

#[derive(Serialize)]
struct DioPoint {
    eps: f64,
    params: DioParams,
    measure: MeasureResult,
}

#[derive(Serialize)]
struct DioOut {
    config_hash: String,
    params: DioParams,
    fraction: f64,
    ci: (f64, f64),
    worst_witnesses: Vec<(Vec<f64>, crate::diophantine::Witness)>,
    curve: Vec<DioPoint>,
}

fn run_dio(doc: &DioDoc, hash: &str, out: &Path) -> Result<()> {
    let fm = FrequencyMap::new(build_h0(&doc.h0, doc.d)?)?;
    let mut curve = Vec::new();
    let mut csv = Csv::new(hash, &["eps", "log_inv_eps", "fraction", "ci_lo", "ci_hi", "k_max"].map(String::from));
    for &eps in std::iter::once(&doc.eps).chain(&doc.eps_curve) {
        let params = DioParams::derive(doc.a, doc.b, doc.d, doc.mu, eps)?;
        let k_max = (doc.k_max_factor * params.cutoff).ceil() as u64;
        let measure = measure_estimate(&fm, &params, doc.n_samples, doc.seed, k_max, 10_000_000)?;
        csv.row([f(eps), f((1.0 / eps).ln()), f(measure.fraction), f(measure.ci.0), f(measure.ci.1), k_max.to_string()]);
        curve.push(DioPoint { eps, params, measure });
    }
    csv.save(&out.join("dio_curve.csv"))?;
    let head = &curve[0];
    let summary = DioOut {
        config_hash: hash.into(),
        params: head.params.clone(),
        fraction: head.measure.fraction,
        ci: head.measure.ci,
        worst_witnesses: head.measure.worst_witnesses.clone(),
        curve,
    };
    std::fs::write(out.join("dio.json"), to_json(&summary)?)?;
    Ok(())
}

/// The perturbation described by a kam document.
pub fn build_perturbation(doc: &KamDoc) -> Result<FourierTaylorSeries> {
    let mut p = FourierTaylorSeries::zero(vec![0.0; doc.d], 0, 0);
    for t in &doc.perturbation {
        p.add_trig(t.k.clone(), t.l, t.amp, t.sine)?;
    }
    if let Some(g) = &doc.generator {
        p = p.add(&algebraic_series(doc.d, g.ell, g.order).scale_re(g.amp))?;
    }
    Ok(p)
}

/// The torus problem described by a kam document.
pub fn build_problem(doc: &KamDoc) -> Result<KamProblem> {
    Ok(KamProblem {
        params: DioParams::derive(doc.a, doc.b, doc.d, doc.mu, doc.eps)?,
        h0: build_h0(&doc.h0, doc.d)?,
        perturbation: build_perturbation(doc)?,
        i0: doc.i0.clone(),
    })
}

#[derive(Serialize)]
struct KamOut<'a> {
    config_hash: String,
    params: &'a DioParams,
    schedule: ScheduleEcho,
    i0: &'a [f64],
    omega0: &'a [f64],
    anchor: &'a [f64],
    anchor_trajectory: &'a [Vec<f64>],
    steps: &'a [StepLog],
    residual: &'a ResidualReport,
    deviation_bound: f64,
    pieces: usize,
    unabsorbed_pieces: usize,
    final_norm: f64,
}

fn run_kam(doc: &KamDoc, hash: &str, out: &Path) -> Result<()> {
    let problem = build_problem(doc)?;
    let params = problem.params.clone();
    let echo_len = (doc.engine.pre_steps + doc.engine.main_steps + 2) as u64;
    let schedule = make_schedule(&params)?.echo(echo_len);
    let res = run(problem, doc.engine.clone())?;
    let d = doc.d;

    let mut decay = Csv::new(
        hash,
        &[
            "phase", "step", "cutoff", "s", "r", "norm_before", "norm_after", "bound_after", "min_divisor",
            "homological_residual", "composition_defect", "symplectic_defect", "anchor_shift",
        ]
        .map(String::from),
    );
    for l in &res.decay_log {
        decay.row([
            format!("{:?}", l.phase).to_lowercase(),
            l.step.to_string(),
            l.cutoff_used.to_string(),
            f(l.s),
            f(l.r),
            f(l.norm_before),
            f(l.norm_after),
            f(l.bound_after),
            f(l.min_divisor),
            f(l.homological_residual),
            l.composition_defect.map(f).unwrap_or_default(),
            f(l.symplectic_defect),
            f(l.anchor_shift),
        ]);
    }
    decay.save(&out.join("kam_decay.csv"))?;

    let header: Vec<String> =
        numbered("phi", d).chain(["t".to_string()]).chain(numbered("theta", d)).chain(numbered("action", d)).collect();
    let mut emb = Csv::new(hash, &header);
    for e in &res.embedding {
        emb.row(e.phi.iter().chain([&e.t]).chain(&e.theta).chain(&e.action).map(|&v| f(v)));
    }
    emb.save(&out.join("kam_embedding.csv"))?;

    let summary = KamOut {
        config_hash: hash.into(),
        params: &params,
        schedule,
        i0: &res.i0,
        omega0: &res.omega0,
        anchor: &res.anchor,
        anchor_trajectory: &res.anchor_trajectory,
        steps: &res.decay_log,
        residual: &res.residual,
        deviation_bound: res.deviation_bound,
        pieces: res.pieces,
        unabsorbed_pieces: res.unabsorbed_pieces,
        final_norm: res.final_norm,
    };
    std::fs::write(out.join("kam.json"), to_json(&summary)?)?;
    Ok(())
}

#[derive(Serialize)]
struct TrajectoryFrequencies {
    shell: f64,
    sample: usize,
    estimates: Vec<FrequencyEstimate>,
}

#[derive(Serialize)]
struct DuffingOut<'a> {
    config_hash: String,
    m: usize,
    n: u32,
    shells: Vec<StabilityReport>,
    trajectories: Vec<TrajectoryFrequencies>,
    stability: &'a StabilityOptions,
}

fn run_duffing(doc: &DuffingDoc, hash: &str, out: &Path) -> Result<()> {
    let net = DuffingNetwork::new(doc.m, doc.n, doc.terms.clone())?;
    let m = doc.m;
    let mut reports = Vec::new();
    let mut samples = Csv::new(
        hash,
        &["shell".to_string(), "sample".to_string()]
            .into_iter()
            .chain(numbered("action", m))
            .chain(["sup", "escaped", "birkhoff_change", "stable"].map(String::from))
            .collect::<Vec<_>>(),
    );
    for &shell in &doc.shells {
        let r = stability_fraction(&net, shell, doc.n_samples, doc.seed, &doc.stability)?;
        for (i, s) in r.samples.iter().enumerate() {
            samples.row(
                [f(shell), i.to_string()]
                    .into_iter()
                    .chain(s.actions.iter().map(|&a| f(a)))
                    .chain([f(s.sup), s.escaped.to_string(), f(s.birkhoff_change), s.stable.to_string()]),
            );
        }
        reports.push(r);
    }
    samples.save(&out.join("duffing_samples.csv"))?;

    let shell = doc.shells[0];
    let setup = ShellSetup::new(m, doc.n, shell, &doc.stability)?;
    let header: Vec<String> = ["sample".to_string(), "t".to_string()]
        .into_iter()
        .chain(numbered("x", m))
        .chain(numbered("xdot", m))
        .chain(numbered("action", m))
        .collect();
    let mut traj_csv = Csv::new(hash, &header);
    let mut trajectories = Vec::new();
    for i in 0..doc.trajectories {
        let (_, x0, v0) = shell_sample(m, doc.n, shell, doc.stability.c4, doc.seed, i as u64)?;
        let tr = simulate(&net, &x0, &v0, 0.0, setup.dt, setup.steps, &setup.sim)?;
        for (k, &t) in tr.times.iter().enumerate() {
            traj_csv.row(
                [i.to_string(), f(t)]
                    .into_iter()
                    .chain(tr.x[k].iter().chain(&tr.v[k]).chain(&tr.actions[k]).map(|&v| f(v))),
            );
        }
        let estimates = if tr.escaped {
            Vec::new()
        } else {
            (0..m).filter_map(|j| frequency_extract(&tr, j, 10.0).ok()).collect()
        };
        trajectories.push(TrajectoryFrequencies { shell, sample: i, estimates });
    }
    traj_csv.save(&out.join("duffing_trajectories.csv"))?;

    let summary = DuffingOut { config_hash: hash.into(), m, n: doc.n, shells: reports, trajectories, stability: &doc.stability };
    std::fs::write(out.join("duffing.json"), to_json(&summary)?)?;
    Ok(())
}

fn load<D: Document>(cli: &Cli) -> Result<D> {
    let mut doc = match &cli.config {
        Some(p) => parse_document::<D>(&std::fs::read_to_string(p)?)?,
        None => D::default(),
    };
    doc.apply(cli.seed, cli.slack);
    let errs = doc.validate();
    if errs.is_empty() {
        Ok(doc)
    } else {
        Err(KamError::Config(errs))
    }
}

fn prepare<D: Document>(cli: &Cli, out: &Path) -> Result<(D, String)> {
    let doc = load::<D>(cli)?;
    let hash = config_hash(cli.command, &doc)?;
    std::fs::create_dir_all(out)?;
    Ok((doc, hash))
}

/// Output directory: `--out`, then the environment override, then `./out`.
pub fn out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Validate the config fully, then run the experiment and write its artifacts.
pub fn execute(cli: &Cli) -> Result<PathBuf> {
    let out = out_dir(cli);
    match cli.command {
        Command::Schedule => {
            let (doc, h) = prepare::<ScheduleDoc>(cli, &out)?;
            run_schedule(&doc, &h, &out)?
        }
        Command::SmoothDemo => {
            let (doc, h) = prepare::<SmoothDoc>(cli, &out)?;
            run_smooth(&doc, &h, &out)?
        }
        Command::Dio => {
            let (doc, h) = prepare::<DioDoc>(cli, &out)?;
            run_dio(&doc, &h, &out)?
        }
        Command::Kam => {
            let (doc, h) = prepare::<KamDoc>(cli, &out)?;
            run_kam(&doc, &h, &out)?
        }
        Command::Duffing => {
            let (doc, h) = prepare::<DuffingDoc>(cli, &out)?;
            run_duffing(&doc, &h, &out)?
        }
    }
    Ok(out)
}

/// Entry point; returns the process exit code.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(out) => {
            eprintln!("wrote results to {}", out.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
