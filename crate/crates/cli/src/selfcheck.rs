//! Fast internal consistency checks wired to the `selfcheck` subcommand:
//! deterministic strand counts, the exact dropout mass, and moment
//! cross-checks between independent evaluation routes.

use crate::CliError;
use strpgf::amplicon::{self, Sampling};
use strpgf::contour::{self, ContourSpec};
use strpgf::genomic::{self, GenomicParams, StutterMode, TrackedProduct};

struct Check {
    name: String,
    detail: String,
    pass: bool,
}

fn check(name: impl Into<String>, detail: impl Into<String>, pass: bool) -> Check {
    Check { name: name.into(), detail: detail.into(), pass }
}

pub fn run() -> Result<(), CliError> {
    let mut checks = Vec::new();

    // deterministic strand counts follow 2^n - n - 1
    let c10 = genomic::deterministic_counts(10).tagged_total();
    checks.push(check("eulerian n=10", format!("{c10}"), c10 == 1013));
    let all_match = (0..=20u32)
        .all(|n| genomic::deterministic_counts(n).tagged_total() == (1u64 << n) - n as u64 - 1);
    checks.push(check("eulerian n=0..20", "2^n - n - 1", all_match));

    // the dropout mass at 28 cycles through the contour path
    let params = amplicon::AmpliconParams::new(0.8, 0.0, 28, 1, 2.0 / 11.0);
    let spec = ContourSpec::for_support(params.support_bound()).with_rtol(1e-13);
    let model = amplicon::target_model(&params);
    let p0 = contour::point_prob_presampled(&spec, &model, 2.0 / 11.0, 1, 0)
        .map_err(CliError::from)?;
    let want = 9.0 / 11.0;
    checks.push(check(
        "dropout mass K=28 phi=2/11",
        format!("{p0:.12} vs 9/11"),
        (p0 - want).abs() < 1e-12,
    ));

    // amplicon moment recurrences against the closed forms
    let (p, xi, n) = (0.85, 0.03, 16u32);
    let ms = amplicon::moments(p, xi, n);
    let pt = p * (1.0 - xi);
    let a = 1.0 + p;
    let b = 1.0 + pt;
    let mean_s_closed = a.powi(n as i32) - b.powi(n as i32);
    checks.push(check(
        "amplicon stutter mean closed form",
        format!("{:.4} vs {:.4}", ms.mean_stutter, mean_s_closed),
        (ms.mean_stutter - mean_s_closed).abs() / mean_s_closed < 1e-12,
    ));

    // genomic closed-form mean against the matrix recurrence
    let gp = GenomicParams::uniform(0.85, 14, 1, 1.0);
    let closed = genomic::mean_tagged(&gp, 14).map_err(CliError::from)?;
    let (matrix, _) = genomic::tracked_moments(&gp, StutterMode::None, TrackedProduct::Target, 14);
    checks.push(check(
        "genomic mean matrix vs closed form",
        format!("{matrix:.6} vs {closed:.6}"),
        (matrix - closed).abs() / closed < 1e-12,
    ));

    // binomial sampling correlation approaches the Poisson one
    let base = amplicon::moments(0.8, 0.005, 20);
    let cb = amplicon::sampled_moments(&base, Sampling::Binomial { m: 1_000_000, phi: 1e-6 })
        .correlation()
        .unwrap_or(0.0);
    let cp = amplicon::sampled_moments(&base, Sampling::Poisson { lambda: 1.0 })
        .correlation()
        .unwrap_or(1.0);
    checks.push(check(
        "binomial correlation limits to poisson",
        format!("{cb:.8} vs {cp:.8}"),
        (cb - cp).abs() < 1e-4,
    ));

    let mut failed = false;
    for c in &checks {
        let status = if c.pass { "PASS" } else { "FAIL" };
        println!("{}: {} {}", c.name, c.detail, status);
        if !c.pass {
            failed = true;
        }
    }
    if failed {
        Err(CliError::validation("selfcheck failed"))
    } else {
        Ok(())
    }
}
