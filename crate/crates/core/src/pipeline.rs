//! End-to-end runs behind the command-line front end: validate, certify,
//! solve and sweep, each producing a JSON report and CSV tables.
//!
//! Stages are cached under `<out>/cache`, keyed by a SHA-256 of the model,
//! the options the stage depends on, the seed and the crate version. Cached
//! and fresh runs produce byte-identical reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::certify::{
    self, check_function_contraction, check_measure_contraction, check_one_step_growth, check_r_step_decay,
    ContractionConstants, ContractionReport, DriftCertificate, DriftOptions, MinorizationCertificate, Provenance,
    RStepCertificate, RStepOptions, Sandwich, DEFAULT_GAMMA1_FLOOR, DEFAULT_RADIUS_MARGIN,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::io::{self, ModelFile};
use crate::lipschitz::{
    self, Constant, EmpiricalReport, LipschitzBounds, LipschitzHypotheses, PairCheckReport, RelaxedBounds,
};
use crate::models::{Generated, GeneratorSpec, SelfTest};
use crate::norms::WeightParam;
use crate::poisson::{self, InvariantMeasure, PoissonSolution};
use crate::statespace::{Measure, PairMode};
use crate::tolerance::{self, Tolerances};

/// Where the model comes from: exactly one of `path` and `generator`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelSource {
    pub path: Option<PathBuf>,
    pub generator: Option<GeneratorSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifyOptions {
    /// Explicit `alpha0`; requires `gamma0`. Midpoints are used otherwise.
    pub alpha0: Option<f64>,
    pub gamma0: Option<f64>,
    /// Grid search over `(alpha0, gamma0)` with this many points per axis.
    pub search_steps: Option<usize>,
    /// Small-set radius; defaults to `2K/(1-gamma) (1 + radius_margin)`.
    pub radius: Option<f64>,
    pub radius_margin: f64,
    pub r_max: usize,
    pub gamma1_floor: f64,
    pub tail_fraction: f64,
    pub pair_mode: PairMode,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            alpha0: None,
            gamma0: None,
            search_steps: None,
            radius: None,
            radius_margin: DEFAULT_RADIUS_MARGIN,
            r_max: 8,
            gamma1_floor: DEFAULT_GAMMA1_FLOOR,
            tail_fraction: DriftOptions::default().tail_fraction,
            pair_mode: PairMode::Adjacent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckOptions {
    /// Random trials per grid point (or pair) in every empirical check.
    pub trials: usize,
    /// Horizon of the n-step checks.
    pub n_max: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { trials: 200, n_max: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveOptions {
    /// Absolute accuracy targeted by the truncated Poisson series.
    pub series_tol: f64,
    /// Stopping threshold of the invariant-measure power iteration.
    pub invariant_tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            series_tol: poisson::DEFAULT_SERIES_TOL,
            invariant_tol: poisson::DEFAULT_INVARIANT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SweepOptions {
    /// `alpha''` of the relaxed theory; `1.05 alpha'` when absent.
    pub alpha_doubleprime: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputOptions {
    pub dir: PathBuf,
    pub formats: Vec<Format>,
    pub cache: bool,
}

impl Default for OutputOptions {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            formats: vec![Format::Json, Format::Csv],
            cache: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSource,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub certify: CertifyOptions,
    #[serde(default)]
    pub checks: CheckOptions,
    #[serde(default)]
    pub solve: SolveOptions,
    #[serde(default)]
    pub sweep: SweepOptions,
    #[serde(default)]
    pub output: OutputOptions,
}

fn positive(name: &'static str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::param(name, x, "must be positive and finite"))
    }
}

impl RunConfig {
    pub fn from_generator(generator: GeneratorSpec) -> Self {
        Self {
            model: ModelSource {
                path: None,
                generator: Some(generator),
            },
            seed: 0,
            workers: None,
            certify: CertifyOptions::default(),
            checks: CheckOptions::default(),
            solve: SolveOptions::default(),
            sweep: SweepOptions::default(),
            output: OutputOptions::default(),
        }
    }

    /// Reads a TOML config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_text(path)?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(p) = &cfg.model.path {
            if p.is_relative() {
                cfg.model.path = Some(base.join(p));
            }
        }
        if cfg.output.dir.is_relative() {
            cfg.output.dir = base.join(&cfg.output.dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.model.path, &self.model.generator) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::Config(
                    "[model] needs exactly one of `path` and `generator`".into(),
                ))
            }
            _ => {}
        }
        positive("series_tol", self.solve.series_tol)?;
        positive("invariant_tol", self.solve.invariant_tol)?;
        positive("gamma1_floor - 1", self.certify.gamma1_floor - 1.0)?;
        positive("tail_fraction", self.certify.tail_fraction)?;
        if self.certify.radius_margin < 0.0 {
            return Err(Error::param(
                "radius_margin",
                self.certify.radius_margin,
                "must be nonnegative",
            ));
        }
        if let Some(r) = self.certify.radius {
            positive("radius", r)?;
        }
        if self.certify.alpha0.is_some() != self.certify.gamma0.is_some() {
            return Err(Error::Config("`alpha0` and `gamma0` must be given together".into()));
        }
        if self.certify.alpha0.is_some() && self.certify.search_steps.is_some() {
            return Err(Error::Config(
                "explicit `alpha0`/`gamma0` and `search_steps` are exclusive".into(),
            ));
        }
        if self.checks.trials == 0 || self.checks.n_max == 0 {
            return Err(Error::Config("`trials` and `n_max` must be positive".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("`workers` must be positive".into()));
        }
        if let Some(p) = &self.model.path {
            if !p.exists() {
                return Err(Error::Io {
                    path: p.clone(),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "model file not found"),
                });
            }
        }
        Ok(())
    }

    fn drift_options(&self) -> DriftOptions {
        DriftOptions {
            tail_fraction: self.certify.tail_fraction,
            ..DriftOptions::default()
        }
    }

    fn r_step_options(&self) -> RStepOptions {
        RStepOptions {
            r_max: self.certify.r_max,
            radius_margin: self.certify.radius_margin,
            gamma1_floor: self.certify.gamma1_floor,
            drift: self.drift_options(),
        }
    }
}

/// A loaded, validated model with its content hash.
pub struct Context {
    pub config: RunConfig,
    pub model: Generated,
    pub model_hash: String,
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn json<T: Serialize>(x: &T) -> String {
    serde_json::to_string(x).expect("report types serialize")
}

impl Context {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = match (&config.model.path, &config.model.generator) {
            (Some(p), None) => io::load_model(p)?,
            (None, Some(g)) => g.generate()?,
            _ => unreachable!("checked by validate"),
        };
        let model_hash = sha256_hex(&[ModelFile::from_generated(&model).to_toml().as_bytes()]);
        Ok(Self {
            config,
            model,
            model_hash,
        })
    }

    fn cache_key(&self, stage: &str, parts: &[String]) -> String {
        let mut all: Vec<&[u8]> = vec![
            stage.as_bytes(),
            env!("CARGO_PKG_VERSION").as_bytes(),
            self.model_hash.as_bytes(),
        ];
        let seed = self.config.seed.to_le_bytes();
        all.push(&seed);
        all.extend(parts.iter().map(|p| p.as_bytes()));
        sha256_hex(&all)
    }

    fn cached<T: Serialize + DeserializeOwned>(
        &self,
        stage: &str,
        key: &str,
        run: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        if !self.config.output.cache {
            return run();
        }
        let path = self.config.output.dir.join("cache").join(format!("{stage}-{key}.json"));
        if let Ok(text) = std::fs::read_to_string(&path) {
            if let Ok(v) = serde_json::from_str(&text) {
                return Ok(v);
            }
        }
        let v = run()?;
        io::write_text(&path, &json(&v))?;
        Ok(v)
    }
}

/// Common header of every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub command: String,
    pub status: String,
    pub version: String,
    pub seed: u64,
    pub model_hash: String,
    pub grid_hash: String,
    pub states: usize,
    pub grid_points: usize,
    pub tolerances: Tolerances,
}

fn header(ctx: &Context, command: &str) -> Header {
    Header {
        command: command.into(),
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: ctx.config.seed,
        model_hash: ctx.model_hash.clone(),
        grid_hash: ctx.model.family.grid_hash(),
        states: ctx.model.family.n_states(),
        grid_points: ctx.model.family.grid_len(),
        tolerances: Tolerances::default(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidateReport {
    pub header: Header,
    pub parameter_dim: usize,
    pub kernel_rows_checked: usize,
    pub has_individual_lyapunov: bool,
    pub linear_self_test: Option<Vec<SelfTest>>,
    pub notes: Vec<String>,
}

/// Loading already enforces every invariant; this records what was checked.
pub fn cmd_validate(ctx: &Context) -> Result<ValidateReport> {
    let fam = &ctx.model.family;
    Ok(ValidateReport {
        header: header(ctx, "validate"),
        parameter_dim: fam.theta(0).len(),
        kernel_rows_checked: fam.grid_len() * fam.n_states(),
        has_individual_lyapunov: ctx.model.v_family.is_some(),
        linear_self_test: ctx.model.linear_self_test.clone(),
        notes: ctx.model.notes.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    /// One-step drift and minorization.
    OneStep,
    /// Drift for `P^r` with one-step growth.
    RStep,
    /// Per-parameter drift converted to an r-step certificate.
    Individual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleConstant {
    pub name: String,
    pub value: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualSummary {
    pub gamma: f64,
    pub k: f64,
    pub provenance: Provenance,
    pub sandwich: Sandwich,
}

/// Everything certified about the family, with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateBundle {
    pub route: Route,
    /// Why the one-step route was not taken.
    pub fallback_reason: Option<String>,
    pub drift: Option<DriftCertificate>,
    pub minorization: Option<MinorizationCertificate>,
    pub contraction: Option<ContractionConstants>,
    pub r_step: Option<RStepCertificate>,
    pub individual: Option<IndividualSummary>,
    pub hypotheses: Option<LipschitzHypotheses>,
    pub checks: Vec<ContractionReport>,
    pub constants: Vec<BundleConstant>,
}

impl CertificateBundle {
    pub fn beta(&self) -> f64 {
        match (&self.contraction, &self.r_step) {
            (Some(cc), _) => cc.beta,
            (None, Some(r)) => r.beta,
            _ => unreachable!("a bundle holds one of the two certificates"),
        }
    }

    pub fn weight(&self) -> WeightParam {
        WeightParam::new(self.beta()).expect("certified beta is valid")
    }

    /// `K / (1 - gamma)` of whichever drift was certified.
    pub fn stationary_bound(&self) -> f64 {
        match (&self.drift, &self.r_step) {
            (Some(d), _) => d.stationary_bound(),
            (None, Some(r)) => r.drift_r.stationary_bound(),
            _ => unreachable!("a bundle holds one of the two certificates"),
        }
    }

    pub fn constant(&self, name: &str) -> Option<f64> {
        self.constants.iter().find(|c| c.name == name).map(|c| c.value)
    }
}

fn push(out: &mut Vec<BundleConstant>, name: &str, value: f64, provenance: Provenance) {
    out.push(BundleConstant {
        name: name.into(),
        value,
        provenance,
    });
}

fn one_step_constants(
    out: &mut Vec<BundleConstant>,
    d: &DriftCertificate,
    m: &MinorizationCertificate,
    cc: &ContractionConstants,
) {
    push(out, "gamma", d.gamma, d.provenance);
    push(out, "K", d.k, d.provenance);
    push(out, "R", m.radius, Provenance::Derived);
    push(out, "alpha_bar", m.alpha_bar, m.provenance);
    push(out, "alpha0", cc.alpha0, cc.alpha0_provenance);
    push(out, "gamma0", cc.gamma0, cc.gamma0_provenance);
    push(out, "beta", cc.beta, Provenance::Derived);
    push(out, "alpha", cc.alpha, Provenance::Derived);
}

fn r_step_constants(out: &mut Vec<BundleConstant>, r: &RStepCertificate) {
    push(out, "r", r.r as f64, Provenance::Derived);
    one_step_constants(out, &r.drift_r, &r.minor_r, &r.cc_r);
    for c in out.iter_mut() {
        match c.name.as_str() {
            "gamma" => c.name = "gamma_r".into(),
            "K" => c.name = "K_r".into(),
            "alpha" => c.name = "alpha_r".into(),
            _ => {}
        }
    }
    push(out, "gamma_1", r.gamma_1, r.growth.provenance);
    push(out, "K_1", r.k_1, r.growth.provenance);
    push(out, "alpha_prime", r.alpha_prime, Provenance::Derived);
    push(out, "C", r.c, Provenance::Derived);
    push(out, "alpha", r.alpha, Provenance::Derived);
}

fn contraction_constants(
    cfg: &CertifyOptions,
    drift: &DriftCertificate,
    minor: &MinorizationCertificate,
) -> Result<ContractionConstants> {
    match (cfg.alpha0, cfg.gamma0, cfg.search_steps) {
        (Some(a0), Some(g0), _) => certify::hm_constants(drift, minor, a0, g0),
        (_, _, Some(steps)) => certify::hm_constants_search(drift, minor, steps),
        _ => certify::hm_constants_default(drift, minor),
    }
}

fn run_certify(ctx: &Context) -> Result<CertificateBundle> {
    let cfg = &ctx.config;
    let (fam, v) = (&ctx.model.family, &ctx.model.v);
    let (trials, seed) = (cfg.checks.trials, cfg.seed);
    let mut constants = Vec::new();
    let mut bundle = if let (Some(vf), Some(sandwich)) = (&ctx.model.v_family, ctx.model.sandwich) {
        let ind =
            certify::individual_to_uniform(fam, vf, v, sandwich, ctx.model.individual_drift, cfg.r_step_options())?;
        r_step_constants(&mut constants, &ind.certificate);
        CertificateBundle {
            route: Route::Individual,
            fallback_reason: Some("the model declares per-parameter Lyapunov functions".into()),
            drift: None,
            minorization: None,
            contraction: None,
            r_step: Some(ind.certificate),
            individual: Some(IndividualSummary {
                gamma: ind.gamma,
                k: ind.k,
                provenance: ind.drift_provenance,
                sandwich: ind.sandwich,
            }),
            hypotheses: None,
            checks: Vec::new(),
            constants: Vec::new(),
        }
    } else {
        let one_step = certify::fit_drift_with(fam, v, cfg.drift_options()).and_then(|drift| {
            let radius = cfg
                .certify
                .radius
                .unwrap_or(drift.default_radius(cfg.certify.radius_margin));
            let minor = certify::fit_minorization(fam, v, &drift, radius)?;
            Ok((drift, minor))
        });
        match one_step {
            Ok((drift, minor)) => {
                let cc = contraction_constants(&cfg.certify, &drift, &minor)?;
                one_step_constants(&mut constants, &drift, &minor, &cc);
                CertificateBundle {
                    route: Route::OneStep,
                    fallback_reason: None,
                    drift: Some(drift),
                    minorization: Some(minor),
                    contraction: Some(cc),
                    r_step: None,
                    individual: None,
                    hypotheses: None,
                    checks: Vec::new(),
                    constants: Vec::new(),
                }
            }
            Err(e @ (Error::InfeasibleDrift { .. } | Error::ZeroMinorization | Error::EmptySmallSet { .. })) => {
                let cert = certify::fit_r_step(fam, v, cfg.r_step_options())?;
                r_step_constants(&mut constants, &cert);
                CertificateBundle {
                    route: Route::RStep,
                    fallback_reason: Some(e.to_string()),
                    drift: None,
                    minorization: None,
                    contraction: None,
                    r_step: Some(cert),
                    individual: None,
                    hypotheses: None,
                    checks: Vec::new(),
                    constants: Vec::new(),
                }
            }
            Err(e) => return Err(e),
        }
    };
    bundle.checks = match (&bundle.contraction, &bundle.r_step) {
        (Some(cc), _) => vec![
            check_function_contraction(fam, v, cc, trials, seed)?,
            check_measure_contraction(fam, v, cc, trials, seed)?,
        ],
        (None, Some(r)) => {
            let mut c = vec![check_r_step_decay(fam, v, r, cfg.checks.n_max, trials, seed)?];
            c.extend(check_one_step_growth(fam, v, r, trials, seed)?);
            c
        }
        _ => unreachable!(),
    };
    if fam.grid_len() >= 2 {
        let hyp = lipschitz::fit_hypotheses(fam, v, bundle.weight(), cfg.certify.pair_mode)?;
        push(&mut constants, "L_P", hyp.l_p, Provenance::Fitted);
        push(&mut constants, "L_f", hyp.l_f, Provenance::Fitted);
        push(&mut constants, "K_f", hyp.k_f, Provenance::Fitted);
        bundle.hypotheses = Some(hyp);
    }
    let k_u = match (&bundle.contraction, &bundle.drift, &bundle.r_step) {
        (Some(cc), Some(d), _) => poisson::k_u_constant(cc, d),
        (_, _, Some(r)) => poisson::r_step_k(r),
        _ => unreachable!(),
    };
    push(&mut constants, "K_u", k_u, Provenance::Derived);
    bundle.constants = constants;
    Ok(bundle)
}

pub fn certify_bundle(ctx: &Context) -> Result<CertificateBundle> {
    let c = &ctx.config;
    let key = ctx.cache_key("certify", &[json(&c.certify), json(&c.checks)]);
    ctx.cached("certify", &key, || run_certify(ctx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyReport {
    pub header: Header,
    pub bundle: CertificateBundle,
}

pub fn cmd_certify(ctx: &Context) -> Result<CertifyReport> {
    Ok(CertifyReport {
        header: header(ctx, "certify"),
        bundle: certify_bundle(ctx)?,
    })
}

/// Solutions at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSolution {
    pub theta_index: usize,
    pub theta: Vec<f64>,
    pub invariant: InvariantMeasure,
    /// `mu*(V)` and the drift bound `K/(1-gamma)` it must respect.
    pub mu_v: f64,
    pub mu_v_bound: f64,
    pub series: PoissonSolution,
    pub direct: PoissonSolution,
    /// `||u_series - u_direct||_beta`.
    pub oracle_gap: f64,
}

fn solve_point(ctx: &Context, bundle: &CertificateBundle, t: usize) -> Result<PointSolution> {
    let (fam, v) = (&ctx.model.family, &ctx.model.v);
    let beta = bundle.weight();
    let (kern, f) = (fam.kernel(t), fam.observable(t));
    let invariant = poisson::invariant_measure(kern, v, beta, ctx.config.solve.invariant_tol)?;
    let mu_v = invariant.mean(v.values());
    let mu_v_bound = bundle.stationary_bound();
    if mu_v > mu_v_bound * (1.0 + tolerance::POISSON_RESIDUAL) + tolerance::POISSON_RESIDUAL {
        return Err(Error::ViolatedBound {
            check: "mu*(V) <= K/(1-gamma)".into(),
            lhs: mu_v,
            rhs: mu_v_bound,
            witness: format!("grid point {t}"),
        });
    }
    let mu = &invariant.mu_star;
    let tol = ctx.config.solve.series_tol;
    let series = match (&bundle.contraction, &bundle.r_step) {
        (Some(cc), _) => poisson::poisson_series(kern, f, v, mu, cc, tol)?,
        (None, Some(r)) => poisson::poisson_r_step(kern, f, v, r, mu, tol)?,
        _ => unreachable!(),
    };
    let direct = poisson::poisson_direct(kern, f, v, beta, mu)?;
    let oracle_gap = poisson::solution_gap(&series, &direct, v, beta);
    if oracle_gap > tolerance::POISSON_ORACLE {
        return Err(Error::OracleMismatch {
            what: "Poisson series vs direct",
            gap: oracle_gap,
            tol: tolerance::POISSON_ORACLE,
        });
    }
    Ok(PointSolution {
        theta_index: t,
        theta: fam.theta(t).to_vec(),
        invariant,
        mu_v,
        mu_v_bound,
        series,
        direct,
        oracle_gap,
    })
}

pub fn solve_all(ctx: &Context, bundle: &CertificateBundle) -> Result<Vec<PointSolution>> {
    let c = &ctx.config;
    let key = ctx.cache_key("solve", &[json(bundle), json(&c.solve)]);
    ctx.cached("solve", &key, || {
        exec::try_map_indexed(ctx.model.family.grid_len(), |t| solve_point(ctx, bundle, t))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub header: Header,
    pub route: Route,
    pub beta: f64,
    pub points: Vec<PointSolution>,
}

pub fn cmd_solve(ctx: &Context) -> Result<SolveReport> {
    let bundle = certify_bundle(ctx)?;
    let points = solve_all(ctx, &bundle)?;
    Ok(SolveReport {
        header: header(ctx, "solve"),
        route: bundle.route,
        beta: bundle.beta(),
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightnessSummary {
    pub h: f64,
    pub u: f64,
    /// Invariant measures against `L_P L_P' |dtheta|`; one-step route only.
    pub invariant_measure: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub header: Header,
    pub route: Route,
    pub hypotheses: LipschitzHypotheses,
    pub one_step: Option<LipschitzBounds>,
    pub relaxed: Option<RelaxedBounds>,
    pub constants: Vec<Constant>,
    pub empirical: EmpiricalReport,
    pub checks: Vec<PairCheckReport>,
    pub tightness: TightnessSummary,
    pub notes: Vec<String>,
}

pub fn cmd_sweep(ctx: &Context) -> Result<SweepReport> {
    let cfg = &ctx.config;
    let (fam, v) = (&ctx.model.family, &ctx.model.v);
    let bundle = certify_bundle(ctx)?;
    let hyp = bundle
        .hypotheses
        .clone()
        .ok_or_else(|| Error::DegenerateGrid(format!("{} grid point(s); a sweep needs at least 2", fam.grid_len())))?;
    let points = solve_all(ctx, &bundle)?;
    let sols: Vec<PoissonSolution> = points.iter().map(|p| p.series.clone()).collect();
    let beta = bundle.weight();
    let mode = cfg.certify.pair_mode;
    let (trials, seed, n_max) = (cfg.checks.trials, cfg.seed, cfg.checks.n_max);
    let mut checks = lipschitz::extend_to_measures_check(fam, v, beta, hyp.l_p, trials, seed, mode)?;
    let mut notes = Vec::new();
    let (one_step, relaxed, constants, empirical, mu_tight) = match (&bundle.contraction, &bundle.drift, &bundle.r_step)
    {
        (Some(cc), Some(drift), _) => {
            let bounds = lipschitz::theoretical_constants(cc, drift, &hyp);
            let empirical = lipschitz::empirical_certify(fam, v, beta, bounds.l_h, bounds.l_u, &sols, mode)?;
            let nb = lipschitz::nstep_bounds(cc, drift, hyp.l_p)?;
            checks.extend(lipschitz::nstep_empirical_check(
                fam, v, &nb, n_max, trials, seed, mode,
            )?);
            let mus: Vec<Measure> = points.iter().map(|p| p.invariant.mu_star.clone()).collect();
            let inv = lipschitz::invariant_measure_check(fam, v, &mus, &nb, mode)?;
            let mu_tight = inv.tightness;
            checks.push(inv);
            (Some(bounds.clone()), None, bounds.constants, empirical, Some(mu_tight))
        }
        (_, _, Some(r)) => {
            let rb = lipschitz::relaxed_constants(fam, v, r, &hyp, cfg.sweep.alpha_doubleprime)?;
            let empirical = lipschitz::empirical_certify(fam, v, beta, rb.l_rh, rb.l_ru, &sols, mode)?;
            checks.push(lipschitz::relaxed_nstep_check(
                fam, v, beta, &rb, n_max, trials, seed, mode,
            )?);
            notes.push("invariant-measure comparison needs one-step contraction; not run on the r-step route".into());
            (None, Some(rb.clone()), rb.constants, empirical, None)
        }
        _ => unreachable!(),
    };
    Ok(SweepReport {
        header: header(ctx, "sweep"),
        route: bundle.route,
        hypotheses: hyp,
        one_step,
        relaxed,
        constants,
        tightness: TightnessSummary {
            h: empirical.max_h_tightness,
            u: empirical.max_u_tightness,
            invariant_measure: mu_tight,
        },
        empirical,
        checks,
        notes,
    })
}

/// Failure record written in place of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureReport {
    pub command: String,
    pub status: String,
    pub kind: String,
    pub exit_code: i32,
    /// The assumption or stage that could not be established.
    pub failed: String,
    pub message: String,
}

pub fn failure_report(command: &str, e: &Error) -> FailureReport {
    let failed = match e {
        Error::InfeasibleDrift { .. } => "drift condition",
        Error::EmptySmallSet { .. } | Error::ZeroMinorization => "minorization",
        Error::NoFeasibleR { .. } => "r-step drift condition",
        Error::SandwichViolated { .. } => "per-parameter Lyapunov sandwich",
        Error::DegenerateGrid(_) => "parameter grid",
        Error::ViolatedBound { .. } => "bound check",
        Error::GridTooCoarse { .. } => "discretization self-test",
        Error::NonConvergence { .. }
        | Error::SingularSystem { .. }
        | Error::OracleMismatch { .. }
        | Error::LinearProgram(_) => "numerics",
        Error::Io { .. } => "input/output",
        Error::Parse { .. } | Error::Config(_) | Error::InvalidParameter { .. } => "configuration",
        Error::InvalidModel { .. } | Error::DimensionMismatch { .. } => "model invariants",
        Error::Postcondition { .. } => "postcondition",
    };
    FailureReport {
        command: command.into(),
        status: "error".into(),
        kind: e.kind().into(),
        exit_code: e.exit_code(),
        failed: failed.into(),
        message: e.to_string(),
    }
}

fn csv_num(x: f64) -> String {
    format!("{x}")
}

fn theta_cells(theta: &[f64]) -> String {
    theta.iter().map(|x| csv_num(*x)).collect::<Vec<_>>().join(",")
}

fn theta_header(dim: usize) -> String {
    (0..dim).map(|k| format!("theta_{k}")).collect::<Vec<_>>().join(",")
}

/// Per-grid-point table of a solve run.
pub fn solve_points_csv(r: &SolveReport) -> String {
    let dim = r.points.first().map_or(0, |p| p.theta.len());
    let mut s = format!(
        "theta_index,{},h,h_direct,series_terms,residual,centering,oracle_gap,mu_v,mu_v_bound,bound_worst_slack\n",
        theta_header(dim)
    );
    for p in &r.points {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            p.theta_index,
            theta_cells(&p.theta),
            csv_num(p.series.h),
            csv_num(p.direct.h),
            p.series.truncation_n.map_or(String::new(), |n| n.to_string()),
            csv_num(p.series.residual_norm),
            csv_num(p.series.centering),
            csv_num(p.oracle_gap),
            csv_num(p.mu_v),
            csv_num(p.mu_v_bound),
            p.series
                .bound
                .as_ref()
                .map_or(String::new(), |b| csv_num(b.worst_slack)),
        );
    }
    s
}

/// Long-format table of `u` with its pointwise bound.
pub fn solve_u_csv(r: &SolveReport) -> String {
    let mut s = String::from("theta_index,state,u,u_direct,bound\n");
    for p in &r.points {
        let bound = p.series.bound.as_ref().map(|b| &b.bound);
        for (x, (u, ud)) in p.series.u.values().iter().zip(p.direct.u.values()).enumerate() {
            let _ = writeln!(
                s,
                "{},{x},{},{},{}",
                p.theta_index,
                csv_num(*u),
                csv_num(*ud),
                bound.map_or(String::new(), |b| csv_num(b[x]))
            );
        }
    }
    s
}

/// Per-pair Lipschitz table of a sweep run.
pub fn sweep_pairs_csv(r: &SweepReport) -> String {
    let mut s = String::from("theta_a,theta_b,distance,h_gap,h_tightness,u_tightness,u_worst_state,u_beta_slope\n");
    for p in &r.empirical.pairs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            p.theta_a,
            p.theta_b,
            csv_num(p.distance),
            csv_num(p.h_gap),
            csv_num(p.h_tightness),
            csv_num(p.u_tightness),
            p.u_worst_state,
            csv_num(p.u_beta_slope)
        );
    }
    s
}

pub fn certify_constants_csv(r: &CertifyReport) -> String {
    let mut s = String::from("name,value,provenance\n");
    for c in &r.bundle.constants {
        let prov = serde_json::to_value(c.provenance)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default();
        let _ = writeln!(s, "{},{},{}", c.name, csv_num(c.value), prov);
    }
    s
}

pub fn to_json<T: Serialize>(report: &T) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report types serialize");
    s.push('\n');
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Validate,
    Certify,
    Solve,
    Sweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Certify => "certify",
            Command::Solve => "solve",
            Command::Sweep => "sweep",
        }
    }
}

fn write_outputs(
    dir: &Path,
    formats: &[Format],
    name: &str,
    json_text: String,
    tables: Vec<(&str, String)>,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    if formats.contains(&Format::Json) {
        let p = dir.join(format!("{name}.json"));
        io::write_text(&p, &json_text)?;
        written.push(p);
    }
    if formats.contains(&Format::Csv) {
        for (file, text) in tables {
            let p = dir.join(file);
            io::write_text(&p, &text)?;
            written.push(p);
        }
    }
    Ok(written)
}

/// Runs one command and writes its outputs; on failure writes a failure
/// report (when JSON output is enabled) and returns the error.
pub fn run(command: Command, config: RunConfig) -> Result<Vec<PathBuf>> {
    let dir = config.output.dir.clone();
    let formats = config.output.formats.clone();
    let workers = config.workers;
    let name = command.name();
    let result = exec::with_workers(workers, || -> Result<(String, Vec<(&'static str, String)>)> {
        let ctx = Context::new(config)?;
        Ok(match command {
            Command::Validate => (to_json(&cmd_validate(&ctx)?), Vec::new()),
            Command::Certify => {
                let r = cmd_certify(&ctx)?;
                (to_json(&r), vec![("certify_constants.csv", certify_constants_csv(&r))])
            }
            Command::Solve => {
                let r = cmd_solve(&ctx)?;
                (
                    to_json(&r),
                    vec![
                        ("solve_points.csv", solve_points_csv(&r)),
                        ("solve_u.csv", solve_u_csv(&r)),
                    ],
                )
            }
            Command::Sweep => {
                let r = cmd_sweep(&ctx)?;
                (to_json(&r), vec![("sweep_pairs.csv", sweep_pairs_csv(&r))])
            }
        })
    });
    match result {
        Ok((text, tables)) => write_outputs(&dir, &formats, name, text, tables),
        Err(e) => {
            if formats.contains(&Format::Json) {
                let _ = io::write_text(&dir.join(format!("{name}.json")), &to_json(&failure_report(name, &e)));
            }
            Err(e)
        }
    }
}
