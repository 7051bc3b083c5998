//! Batch command-line front end: exact distributions, moments, contour
//! probabilities, EPG simulation, likelihoods, fits, likelihood ratios and
//! the uniformity diagnostic.

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use strpgf::amplicon::{self, AmpliconParams, Sampling};
use strpgf::contour::{self, ContourSpec};
use strpgf::estimate::{self, FitOptions, FitResult};
use strpgf::genomic::{self, GenomicParams, StutterMode, TrackedProduct};
use strpgf::io as formats;
use strpgf::likelihood::{Evaluation, PeakModel, ProfileEvaluator};
use strpgf::sample::{DropinMode, SampleConfig};
use strpgf::spectral::ProbVec;

mod selfcheck;

const EXIT_VALIDATION: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(
    name = "strpgf",
    about = "PCR branching-process distributions and STR profile likelihoods",
    version
)]
struct Cli {
    /// Worker threads for data-parallel sections (default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Exact count distributions of the PCR models, as CSV.
    Dist(DistArgs),
    /// Closed-recurrence moments of the PCR models, as CSV.
    Moments(MomentsArgs),
    /// Single or cumulative probabilities through truncated contour sums.
    Prob(ProbArgs),
    /// Forward-simulate an EPG peak file.
    Simulate(SimulateArgs),
    /// Log-likelihood of an EPG under a hypothesis.
    Loglik(LoglikArgs),
    /// Maximum-likelihood fit of cell counts (and optionally degradation).
    Fit(FitArgs),
    /// Likelihood ratio in bans from two fits or two log-likelihoods.
    Lr(LrArgs),
    /// Conditional-CDF uniformity diagnostic, as CSV.
    Qq(QqArgs),
    /// Fast internal invariant checks; prints one PASS/FAIL line each.
    Selfcheck,
}

#[derive(Args)]
struct DistArgs {
    /// Model family: amplicon or genomic.
    model: String,
    #[arg(long, default_value_t = 0.85)]
    p: f64,
    /// Conditional stutter probability (amplicon model).
    #[arg(long, default_value_t = 0.0)]
    xi: f64,
    #[arg(long = "K")]
    cycles: u32,
    /// Initial amplicons (amplicon) or genome pairs (genomic).
    #[arg(long = "M", default_value_t = 1)]
    initial: u64,
    #[arg(long, default_value_t = 1.0)]
    phi: f64,
    /// Which marginal: target or stutter.
    #[arg(long, default_value = "target")]
    component: String,
    /// Stutter machinery for the genomic model: none, single or full.
    #[arg(long, default_value = "none")]
    stutter: String,
    /// Stutter order for genomic stutter marginals: -1, -2 or 1.
    #[arg(long, default_value_t = -1, allow_negative_numbers = true)]
    order: i8,
    #[arg(long, default_value_t = 0.0)]
    xi_s: f64,
    #[arg(long, default_value_t = 0.0)]
    xi_r: f64,
    #[arg(long, default_value_t = 0.0)]
    xi_f: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MomentsArgs {
    /// Model family: amplicon or genomic.
    model: String,
    #[arg(long, default_value_t = 0.85)]
    p: f64,
    #[arg(long, default_value_t = 0.0)]
    xi: f64,
    #[arg(long = "n")]
    cycles: u32,
    /// Pre-sampling: none, binomial or poisson (amplicon model).
    #[arg(long, default_value = "none")]
    sampling: String,
    #[arg(long = "M", default_value_t = 1)]
    initial: u64,
    #[arg(long, default_value_t = 1.0)]
    phi: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = false)]
    with_stutter: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbArgs {
    /// Iteration: amplicon, amplicon-stutter or genomic.
    #[arg(long, default_value = "amplicon")]
    model: String,
    #[arg(long, default_value_t = 0.85)]
    p: f64,
    #[arg(long, default_value_t = 0.0)]
    xi: f64,
    #[arg(long = "K")]
    cycles: u32,
    #[arg(long = "M", default_value_t = 1)]
    initial: u64,
    #[arg(long, default_value_t = 1.0)]
    phi: f64,
    /// Genomic stutter machinery and tracked product.
    #[arg(long, default_value = "single")]
    stutter: String,
    #[arg(long, default_value = "target")]
    component: String,
    #[arg(long, default_value_t = 0.0)]
    xi_s: f64,
    #[arg(long, default_value_t = 0.0)]
    xi_r: f64,
    #[arg(long, default_value_t = 0.0)]
    xi_f: f64,
    /// Probability of exactly this count.
    #[arg(long, conflicts_with = "below")]
    at: Option<u64>,
    /// Cumulative probability of at most this count.
    #[arg(long)]
    below: Option<u64>,
    #[arg(long, default_value_t = 1e-9)]
    rtol: f64,
    #[arg(long, default_value_t = 512)]
    start_terms: usize,
    #[arg(long, default_value_t = 1 << 20)]
    max_terms: usize,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    #[arg(long)]
    psi: Option<f64>,
    #[arg(long)]
    pi_f: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    cycles: Option<u32>,
    /// Tagged amplicons per RFU.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    threshold: Option<u32>,
    #[arg(long)]
    theta: Option<f64>,
    /// Stutter components carried by the model: none, single or full.
    #[arg(long)]
    stutter: Option<String>,
    /// Drop-in material: genomic or amplicon.
    #[arg(long)]
    dropin_mode: Option<String>,
    /// Per-dye baseline noise pmf file.
    #[arg(long)]
    noise: Option<PathBuf>,
}

impl ConfigArgs {
    /// Resolves flags against the optional key=value defaults file named
    /// by STRPGF_CONFIG, then built-in defaults.
    fn build(&self) -> Result<SampleConfig, CliError> {
        let file = config_file_defaults()?;
        let get = |key: &str| file.get(key).cloned();
        let parse_num = |key: &str| -> Result<Option<f64>, CliError> {
            get(key)
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| CliError::validation(format!("bad {key} in config file")))
                })
                .transpose()
        };
        let psi = self.psi.or(parse_num("psi")?).unwrap_or(0.3);
        let pi_f = self.pi_f.or(parse_num("pi_f")?).unwrap_or(0.06);
        let delta = self.delta.or(parse_num("delta")?).unwrap_or(0.0);
        let cycles = self.cycles.or(parse_num("cycles")?.map(|v| v as u32)).unwrap_or(28);
        let rho = self.rho.or(parse_num("rho")?).unwrap_or(800_000.0);
        let threshold = self
            .threshold
            .or(parse_num("threshold")?.map(|v| v as u32))
            .unwrap_or(30);
        let theta = self.theta.or(parse_num("theta")?).unwrap_or(0.02);
        let stutter = self.stutter.clone().or(get("stutter")).unwrap_or_else(|| "full".into());
        let dropin = self
            .dropin_mode
            .clone()
            .or(get("dropin_mode"))
            .unwrap_or_else(|| "genomic".into());
        let noise_path = self.noise.clone().or(get("noise").map(PathBuf::from));

        let mut cfg = SampleConfig::new(psi, pi_f, cycles, rho, threshold);
        cfg.delta = delta;
        cfg.theta = theta;
        cfg.stutter = parse_stutter(&stutter)?;
        cfg.dropin_mode = match dropin.as_str() {
            "genomic" => DropinMode::Genomic,
            "amplicon" => DropinMode::Amplicon,
            other => return Err(CliError::usage(format!("unknown dropin mode {other:?}"))),
        };
        if let Some(path) = &noise_path {
            cfg.noise = formats::load_noise(path)?;
        }
        Ok(cfg)
    }
}

/// Key=value lines from the file named by STRPGF_CONFIG, if set.
fn config_file_defaults() -> Result<std::collections::BTreeMap<String, String>, CliError> {
    let mut map = std::collections::BTreeMap::new();
    if let Ok(path) = std::env::var("STRPGF_CONFIG") {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::validation(format!("config file {path}: {e}")))?;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((k, v)) = line.split_once('=') {
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
    }
    Ok(map)
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    kit: PathBuf,
    #[arg(long)]
    profiles: PathBuf,
    /// Profile ids of the simulated contributors, comma separated.
    #[arg(long, value_delimiter = ',')]
    contributors: Vec<String>,
    /// Cells per contributor, comma separated, aligned with --contributors.
    #[arg(long, value_delimiter = ',')]
    cells: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LoglikArgs {
    #[arg(long)]
    kit: PathBuf,
    #[arg(long)]
    freq: PathBuf,
    #[arg(long)]
    profiles: PathBuf,
    #[arg(long)]
    epg: PathBuf,
    #[arg(long)]
    hypothesis: PathBuf,
    #[arg(long, default_value = "fft")]
    model: String,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    loglik: LoglikArgs,
    #[arg(long, default_value_t = false)]
    fit_delta: bool,
    #[arg(long, default_value_t = 12)]
    max_sweeps: usize,
    /// Structured fit result (JSON) destination.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluation trace CSV destination.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
struct LrArgs {
    /// Fit result file of the numerator hypothesis.
    #[arg(long)]
    fit_a: Option<PathBuf>,
    /// Fit result file of the denominator hypothesis.
    #[arg(long)]
    fit_b: Option<PathBuf>,
    /// Numerator log-likelihood given directly.
    #[arg(long, allow_negative_numbers = true)]
    ll_a: Option<f64>,
    /// Denominator log-likelihood given directly.
    #[arg(long, allow_negative_numbers = true)]
    ll_b: Option<f64>,
}

#[derive(Args)]
struct QqArgs {
    #[command(flatten)]
    loglik: LoglikArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

struct CliError {
    message: String,
    code: u8,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError { message: message.into(), code: EXIT_USAGE }
    }

    fn validation(message: impl Into<String>) -> Self {
        CliError { message: message.into(), code: EXIT_VALIDATION }
    }
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::validation(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help and version requests are successes, everything else is
            // a usage error
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(threads) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let result = match cli.cmd {
        Cmd::Dist(args) => cmd_dist(args),
        Cmd::Moments(args) => cmd_moments(args),
        Cmd::Prob(args) => cmd_prob(args),
        Cmd::Simulate(args) => cmd_simulate(args),
        Cmd::Loglik(args) => cmd_loglik(args),
        Cmd::Fit(args) => cmd_fit(args),
        Cmd::Lr(args) => cmd_lr(args),
        Cmd::Qq(args) => cmd_qq(args),
        Cmd::Selfcheck => selfcheck::run(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

/// 17 significant digits, enough to reproduce any f64 exactly.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| CliError::validation(e.to_string())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn dist_csv(dist: &ProbVec) -> String {
    let mut s = String::from("#format:dist:1\n# index,probability\n");
    for (i, p) in dist.probs().iter().enumerate() {
        s.push_str(&format!("{i},{}\n", fmt_f64(*p)));
    }
    s
}

fn parse_stutter(s: &str) -> Result<StutterMode, CliError> {
    match s {
        "none" => Ok(StutterMode::None),
        "single" => Ok(StutterMode::Single),
        "full" => Ok(StutterMode::Full),
        other => Err(CliError::usage(format!("unknown stutter mode {other:?}"))),
    }
}

fn cmd_dist(args: DistArgs) -> Result<(), CliError> {
    let dist = match args.model.as_str() {
        "amplicon" => {
            let params = AmpliconParams::new(args.p, args.xi, args.cycles, args.initial, args.phi);
            match args.component.as_str() {
                "target" => amplicon::target_dist(&params)?,
                "stutter" => amplicon::stutter_marginal(&params)?,
                other => return Err(CliError::usage(format!("unknown component {other:?}"))),
            }
        }
        "genomic" => {
            let params = GenomicParams::uniform(args.p, args.cycles, args.initial, args.phi)
                .with_stutter(args.xi_s, args.xi_r, args.xi_f);
            match args.component.as_str() {
                "target" => genomic::tagged_dist(&params, parse_stutter(&args.stutter)?)?,
                "stutter" => genomic::tagged_stutter_dist(&params, args.order)?,
                other => return Err(CliError::usage(format!("unknown component {other:?}"))),
            }
        }
        other => return Err(CliError::usage(format!("unknown model {other:?}"))),
    };
    emit(&args.out, &dist_csv(&dist))
}

fn cmd_moments(args: MomentsArgs) -> Result<(), CliError> {
    let mut rows: Vec<(&str, f64)> = Vec::new();
    match args.model.as_str() {
        "amplicon" => {
            let base = amplicon::moments(args.p, args.xi, args.cycles);
            let ms = match args.sampling.as_str() {
                "none" => base,
                "binomial" => amplicon::sampled_moments(
                    &base,
                    Sampling::Binomial { m: args.initial, phi: args.phi },
                ),
                "poisson" => {
                    amplicon::sampled_moments(&base, Sampling::Poisson { lambda: args.lambda })
                }
                other => return Err(CliError::usage(format!("unknown sampling {other:?}"))),
            };
            rows.push(("mean_target", ms.mean_target));
            rows.push(("mean_stutter", ms.mean_stutter));
            rows.push(("var_target", ms.var_target));
            rows.push(("var_stutter", ms.var_stutter));
            rows.push(("cov", ms.cov));
            if let Some(c) = ms.correlation() {
                rows.push(("correlation", c));
            }
        }
        "genomic" => {
            let params = GenomicParams::uniform(args.p, args.cycles, args.initial, args.phi)
                .with_stutter(args.xi, 0.0, 0.0);
            let ms = genomic::moment_matrices(&params, args.cycles, args.with_stutter);
            rows.push(("mean_target", ms.mean_target));
            rows.push(("var_target", ms.var_target));
            rows.push(("mean_stutter", ms.mean_stutter));
            rows.push(("var_stutter", ms.var_stutter));
            rows.push(("cov", ms.cov));
            if let Some(c) = ms.correlation() {
                rows.push(("correlation", c));
            }
        }
        other => return Err(CliError::usage(format!("unknown model {other:?}"))),
    }
    let mut text = String::from("#format:moments:1\n# quantity,value\n");
    for (k, v) in rows {
        text.push_str(&format!("{k},{}\n", fmt_f64(v)));
    }
    emit(&args.out, &text)
}

fn cmd_prob(args: ProbArgs) -> Result<(), CliError> {
    let (model, support) = match args.model.as_str() {
        "amplicon" => {
            let params = AmpliconParams::new(args.p, args.xi, args.cycles, args.initial, args.phi);
            (amplicon::target_model(&params), params.support_bound())
        }
        "amplicon-stutter" => {
            let params = AmpliconParams::new(args.p, args.xi, args.cycles, args.initial, args.phi);
            (amplicon::stutter_model(&params), params.support_bound())
        }
        "genomic" => {
            let params = GenomicParams::uniform(args.p, args.cycles, args.initial, args.phi)
                .with_stutter(args.xi_s, args.xi_r, args.xi_f);
            let tracked = match args.component.as_str() {
                "target" => TrackedProduct::Target,
                "stutter" => TrackedProduct::Stutter,
                "double" => TrackedProduct::Double,
                "forward" => TrackedProduct::Forward,
                other => return Err(CliError::usage(format!("unknown component {other:?}"))),
            };
            let mode = parse_stutter(&args.stutter)?;
            (params.scalar_model(mode, tracked), params.support_bound())
        }
        other => return Err(CliError::usage(format!("unknown model {other:?}"))),
    };
    let spec = ContourSpec::for_support(support)
        .with_rtol(args.rtol)
        .with_terms(args.start_terms, args.max_terms);
    let (value, report) = match (args.at, args.below) {
        (Some(n), None) => contour::point_prob_presampled_with_report(
            &spec,
            &model,
            args.phi,
            args.initial,
            n,
        )?,
        (None, Some(n)) => contour::cumulative_below_presampled_with_report(
            &spec,
            &model,
            args.phi,
            args.initial,
            n,
        )?,
        _ => return Err(CliError::usage("exactly one of --at or --below is required")),
    };
    println!("probability,{}", fmt_f64(value));
    println!("terms,{}", report.terms);
    println!("last_delta,{}", fmt_f64(report.last_delta));
    println!("exact,{}", report.exact);
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let kit = formats::load_kit(&args.kit)?;
    let profiles = formats::load_profiles(&args.profiles)?;
    if args.contributors.len() != args.cells.len() {
        return Err(CliError::usage("--contributors and --cells must align"));
    }
    let cfg = args.config.build()?;
    // the simulator produces every product the configured model carries
    let stutter = cfg.stutter;
    let mut picked = Vec::new();
    for (id, &cells) in args.contributors.iter().zip(args.cells.iter()) {
        let p = profiles
            .iter()
            .find(|p| &p.id == id)
            .ok_or_else(|| CliError::validation(format!("profile {id} not found")))?;
        picked.push((p, cells));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let picked_refs: Vec<(&strpgf::sample::Profile, u64)> =
        picked.iter().map(|(p, c)| (*p, *c)).collect();
    let peaks = strpgf::simulate::simulate_epg(&picked_refs, &cfg, &kit, &mut rng, stutter);
    emit(&args.out, &formats::write_epg(&peaks))
}

fn load_evaluation(args: &LoglikArgs) -> Result<LoadedEvaluation, CliError> {
    Ok(LoadedEvaluation {
        kit: formats::load_kit(&args.kit)?,
        freqs: formats::load_frequencies(&args.freq)?,
        profiles: formats::load_profiles(&args.profiles)?,
        epg: formats::load_epg(&args.epg)?,
        hypothesis: formats::load_hypothesis(&args.hypothesis)?,
        cfg: args.config.build()?,
        model: PeakModel::parse(&args.model)
            .ok_or_else(|| CliError::usage(format!("unknown model {:?}", args.model)))?,
    })
}

struct LoadedEvaluation {
    kit: strpgf::sample::Kit,
    freqs: strpgf::likelihood::FrequencyTable,
    profiles: Vec<strpgf::sample::Profile>,
    epg: Vec<strpgf::sample::EpgPeak>,
    hypothesis: strpgf::sample::Hypothesis,
    cfg: SampleConfig,
    model: PeakModel,
}

impl LoadedEvaluation {
    fn evaluator(&self) -> Result<ProfileEvaluator<'_>, CliError> {
        let ev = Evaluation {
            kit: &self.kit,
            freqs: &self.freqs,
            profiles: &self.profiles,
            cfg: &self.cfg,
        };
        Ok(ProfileEvaluator::new(ev, &self.epg)?)
    }
}

fn cmd_loglik(args: LoglikArgs) -> Result<(), CliError> {
    let loaded = load_evaluation(&args)?;
    let mut evaluator = loaded.evaluator()?;
    let ll = evaluator.loglik(&loaded.hypothesis, loaded.model)?;
    println!("loglik,{}", fmt_f64(ll.total));
    for l in &ll.per_locus {
        println!("locus,{},{}", l.locus, fmt_f64(l.loglik));
        for z in &l.zero_alleles {
            println!("zero_probability,{z}");
        }
    }
    Ok(())
}

fn fit_json(fit: &FitResult) -> String {
    let cells: Vec<String> = fit.cells.iter().map(|c| c.to_string()).collect();
    format!(
        "{{\"model\":\"{}\",\"ll_max\":{},\"cells\":[{}],\"delta\":{},\"evaluations\":{},\"improved\":{}}}\n",
        fit.model,
        fmt_f64(fit.ll_max),
        cells.join(","),
        fmt_f64(fit.delta_hat),
        fit.trace.len(),
        fit.improved
    )
}

fn cmd_fit(args: FitArgs) -> Result<(), CliError> {
    let loaded = load_evaluation(&args.loglik)?;
    let mut evaluator = loaded.evaluator()?;
    let opts = FitOptions {
        fit_delta: args.fit_delta,
        max_sweeps: args.max_sweeps,
        ..FitOptions::default()
    };
    let fit = estimate::fit(&mut evaluator, &loaded.hypothesis, loaded.model, &opts)?;
    println!("{fit}");
    if !fit.improved {
        println!("note: no candidate improved on the initial point");
    }
    if let Some(path) = &args.out {
        std::fs::write(path, fit_json(&fit)).map_err(|e| CliError::validation(e.to_string()))?;
    }
    if let Some(path) = &args.trace_out {
        let mut text = String::from("#format:fit-trace:1\n# step,delta,ll,accepted,cells...\n");
        for (i, step) in fit.trace.iter().enumerate() {
            let cells: Vec<String> = step.cells.iter().map(|c| c.to_string()).collect();
            text.push_str(&format!(
                "{i},{},{},{},{}\n",
                fmt_f64(step.delta),
                fmt_f64(step.ll),
                step.accepted,
                cells.join(",")
            ));
        }
        std::fs::write(path, text).map_err(|e| CliError::validation(e.to_string()))?;
    }
    Ok(())
}

/// Pulls `"ll_max":<value>` out of a fit JSON file.
fn ll_from_fit_file(path: &Path) -> Result<f64, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::validation(e.to_string()))?;
    let key = "\"ll_max\":";
    let start = text
        .find(key)
        .ok_or_else(|| CliError::validation(format!("{} has no ll_max field", path.display())))?
        + key.len();
    let rest = &text[start..];
    let end = rest
        .find([',', '}'])
        .ok_or_else(|| CliError::validation("malformed fit file"))?;
    rest[..end]
        .trim()
        .parse()
        .map_err(|_| CliError::validation("malformed ll_max value"))
}

fn cmd_lr(args: LrArgs) -> Result<(), CliError> {
    let ll_a = match (args.ll_a, &args.fit_a) {
        (Some(v), _) => v,
        (None, Some(p)) => ll_from_fit_file(p)?,
        (None, None) => return Err(CliError::usage("provide --ll-a or --fit-a")),
    };
    let ll_b = match (args.ll_b, &args.fit_b) {
        (Some(v), _) => v,
        (None, Some(p)) => ll_from_fit_file(p)?,
        (None, None) => return Err(CliError::usage("provide --ll-b or --fit-b")),
    };
    println!("bans,{:.6}", estimate::lr_bans(ll_a, ll_b));
    Ok(())
}

fn cmd_qq(args: QqArgs) -> Result<(), CliError> {
    let loaded = load_evaluation(&args.loglik)?;
    let mut evaluator = loaded.evaluator()?;
    let pairs = estimate::qq_diagnostic(&mut evaluator, &loaded.hypothesis, loaded.model)?;
    let mut text = String::from("#format:qq:1\n# uniform_quantile,conditional_cdf\n");
    for (q, v) in pairs {
        text.push_str(&format!("{},{}\n", fmt_f64(q), fmt_f64(v)));
    }
    emit(&args.out, &text)
}
