//! Memory-light evaluation of single and cumulative probabilities through
//! truncated unit-circle sums.
//!
//! A coefficient of the composed PGF is a contour integral around the
//! origin; on the unit circle it becomes the full root-of-unity sum the
//! DFT would compute. The circle iterates contract towards the origin away
//! from `j = 0`, so the sum can be truncated symmetrically. Pre-sampling
//! compositions converge to the flat value `(1-phi)^M` instead of zero,
//! and the omitted flat tail cancels against the roots of unity, leaving a
//! closed-form correction. Truncation levels double until the value stops
//! moving; once the retained terms cover the whole circle the result is
//! the exact full sum.

use crate::branching::BranchSystem;
use num_complex::Complex64;
use std::fmt;

#[derive(Clone, Debug, PartialEq)]
pub enum ContourError {
    /// Two successive doublings of the term count still moved the value by
    /// more than the tolerance.
    NotConverged { terms: usize, last_delta: f64 },
    /// A point estimate came out below -1e-9, the signature of a
    /// prematurely truncated series.
    NegativeProbability { value: f64 },
}

impl fmt::Display for ContourError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContourError::NotConverged { terms, last_delta } => write!(
                f,
                "truncated series not converged after {terms} terms (last delta {last_delta:e})"
            ),
            ContourError::NegativeProbability { value } => {
                write!(f, "negative probability estimate {value:e} from truncated series")
            }
        }
    }
}

impl std::error::Error for ContourError {}

/// Truncation control for a contour evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ContourSpec {
    /// Modulus of the root-of-unity grid; must bound the count support.
    pub modulus: u64,
    /// Absolute convergence tolerance between doublings.
    pub rtol: f64,
    /// Terms on each side of `j = 0` at the first evaluation.
    pub start_terms: usize,
    /// Hard cap on one-sided terms.
    pub max_terms: usize,
}

impl ContourSpec {
    pub fn for_support(support: u64) -> Self {
        ContourSpec {
            modulus: crate::numeric::next_pow2(support) as u64,
            rtol: 1e-9,
            start_terms: 512,
            max_terms: 1 << 20,
        }
    }

    pub fn with_rtol(mut self, rtol: f64) -> Self {
        self.rtol = rtol;
        self
    }

    pub fn with_terms(mut self, start: usize, max: usize) -> Self {
        self.start_terms = start.max(1);
        self.max_terms = max.max(self.start_terms);
        self
    }
}

/// Outcome bookkeeping for a truncated evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ConvergenceReport {
    /// One-sided terms actually used.
    pub terms: usize,
    /// Change produced by the final doubling (zero for exact sums).
    pub last_delta: f64,
    /// Whether the retained terms covered the entire circle.
    pub exact: bool,
}

/// A single-point PGF iteration: which branching system to run, from which
/// seed kinds, tracking which product kind.
#[derive(Clone, Debug)]
pub struct ScalarModel {
    system: BranchSystem,
    seeds: Vec<usize>,
    tracked: usize,
    cycles: u32,
}

impl ScalarModel {
    pub fn new(system: BranchSystem, seeds: Vec<usize>, tracked: usize, cycles: u32) -> Self {
        ScalarModel { system, seeds, tracked, cycles }
    }

    pub fn cycles(&self) -> u32 {
        self.cycles
    }

    /// The tracked-product PGF at the root of unity `e^{-2 pi i j / N}`.
    pub fn eval(&self, j: u64, modulus: u64) -> Complex64 {
        let theta = -2.0 * std::f64::consts::PI * ((j % modulus) as f64) / modulus as f64;
        let z = Complex64::new(theta.cos(), theta.sin());
        self.system.scalar_pgf(&self.seeds, self.tracked, z, self.cycles)
    }
}

/// `e^{2 pi i k / n}` with the index reduced exactly.
pub fn phase(modulus: u64, k: u128) -> Complex64 {
    let k = (k % modulus as u128) as f64;
    let theta = 2.0 * std::f64::consts::PI * k / modulus as f64;
    Complex64::new(theta.cos(), theta.sin())
}

/// Kernel weight of the `j`-th term in a cumulative sum up to `n`
/// inclusive: the geometric series of the point weights, with the `j = 0`
/// singularity replaced by its analytic limit `n + 1`.
pub fn cumulative_kernel(modulus: u64, j: u64, n: u64) -> Complex64 {
    if j.is_multiple_of(modulus) {
        return Complex64::new((n + 1) as f64, 0.0);
    }
    let z = phase(modulus, j as u128);
    let top = phase(modulus, j as u128 * (n as u128 + 1)) - 1.0;
    top / (z - 1.0)
}

enum Kernel {
    Point(u64),
    CumulativeThrough(u64),
}

impl Kernel {
    fn weight(&self, modulus: u64, j: u64) -> Complex64 {
        match *self {
            Kernel::Point(n) => phase(modulus, j as u128 * n as u128),
            Kernel::CumulativeThrough(n) => cumulative_kernel(modulus, j, n),
        }
    }

    /// Closed-form contribution of a constant integrand over the entire
    /// circle, already divided by the modulus.
    fn flat_full_sum(&self) -> f64 {
        match *self {
            // sum over all j of e^{2 pi i j n / N} is N at n = 0, else 0
            Kernel::Point(n) => {
                if n == 0 {
                    1.0
                } else {
                    0.0
                }
            }
            // the count 0 is always inside 0..=n
            Kernel::CumulativeThrough(_) => 1.0,
        }
    }
}

/// Pre-sampling composition applied to the raw iteration value.
#[derive(Clone, Copy)]
struct Composition {
    phi: f64,
    m: u64,
}

impl Composition {
    fn apply(&self, f: Complex64) -> Complex64 {
        crate::spectral::complex_powu(Complex64::new(1.0 - self.phi, 0.0) + self.phi * f, self.m)
    }

    fn flat(&self) -> f64 {
        if self.m == 0 {
            1.0
        } else {
            (1.0 - self.phi).powf(self.m as f64)
        }
    }
}

fn truncated_value(
    spec: &ContourSpec,
    model: &ScalarModel,
    comp: Composition,
    kernel: Kernel,
) -> Result<(f64, ConvergenceReport), ContourError> {
    let n = spec.modulus;
    let flat = comp.flat();
    let half = (n / 2).max(1);

    // j = 0 term plus the flat-tail closed form
    let base = ((comp.apply(model.eval(0, n)).re - flat) * kernel.weight(n, 0).re) / n as f64
        + flat * kernel.flat_full_sum();

    let mut acc = 0.0f64;
    let mut level_end = spec.start_terms.min(spec.max_terms);
    let mut j = 1u64;
    let mut prev: Option<f64> = None;
    let mut last_delta = f64::INFINITY;
    loop {
        let cover_all = level_end as u64 >= half - 1 || n <= 2;
        let top = if cover_all { half } else { level_end as u64 };
        while j <= top && j < n {
            let t = comp.apply(model.eval(j, n)) - flat;
            if cover_all && j == half && n.is_multiple_of(2) {
                // Nyquist point appears once in the full sum
                acc += (t * kernel.weight(n, j)).re / n as f64;
            } else {
                acc += 2.0 * (t * kernel.weight(n, j)).re / n as f64;
            }
            j += 1;
        }
        let value = base + acc;
        if cover_all {
            let report =
                ConvergenceReport { terms: half as usize, last_delta: 0.0, exact: true };
            return finish(value, report, &kernel);
        }
        if let Some(p) = prev {
            last_delta = (value - p).abs();
            if last_delta < spec.rtol {
                let report = ConvergenceReport { terms: level_end, last_delta, exact: false };
                return finish(value, report, &kernel);
            }
        }
        if level_end >= spec.max_terms {
            return Err(ContourError::NotConverged { terms: level_end, last_delta });
        }
        prev = Some(value);
        level_end = (level_end * 2).min(spec.max_terms);
    }
}

fn finish(
    value: f64,
    report: ConvergenceReport,
    kernel: &Kernel,
) -> Result<(f64, ConvergenceReport), ContourError> {
    if matches!(kernel, Kernel::Point(_)) && value < -1e-9 {
        return Err(ContourError::NegativeProbability { value });
    }
    Ok((value, report))
}

/// Probability of exactly `n` products from a single seed set.
pub fn point_prob(spec: &ContourSpec, model: &ScalarModel, n: u64) -> Result<f64, ContourError> {
    point_prob_with_report(spec, model, n).map(|(v, _)| v)
}

pub fn point_prob_with_report(
    spec: &ContourSpec,
    model: &ScalarModel,
    n: u64,
) -> Result<(f64, ConvergenceReport), ContourError> {
    truncated_value(spec, model, Composition { phi: 1.0, m: 1 }, Kernel::Point(n))
}

/// Probability of exactly `n` products when `m` seed sets are pre-sampled
/// binomially with probability `phi`; the omitted flat tail `(1-phi)^m`
/// cancels against the roots of unity and is restored in closed form.
pub fn point_prob_presampled(
    spec: &ContourSpec,
    model: &ScalarModel,
    phi: f64,
    m: u64,
    n: u64,
) -> Result<f64, ContourError> {
    point_prob_presampled_with_report(spec, model, phi, m, n).map(|(v, _)| v)
}

pub fn point_prob_presampled_with_report(
    spec: &ContourSpec,
    model: &ScalarModel,
    phi: f64,
    m: u64,
    n: u64,
) -> Result<(f64, ConvergenceReport), ContourError> {
    truncated_value(spec, model, Composition { phi, m }, Kernel::Point(n))
}

/// Cumulative probability of at most `n` products from a single seed set.
pub fn cumulative_below(
    spec: &ContourSpec,
    model: &ScalarModel,
    n: u64,
) -> Result<f64, ContourError> {
    cumulative_below_with_report(spec, model, n).map(|(v, _)| v)
}

pub fn cumulative_below_with_report(
    spec: &ContourSpec,
    model: &ScalarModel,
    n: u64,
) -> Result<(f64, ConvergenceReport), ContourError> {
    truncated_value(spec, model, Composition { phi: 1.0, m: 1 }, Kernel::CumulativeThrough(n))
}

/// Cumulative probability of at most `n` products under binomial
/// pre-sampling of `m` seed sets.
pub fn cumulative_below_presampled(
    spec: &ContourSpec,
    model: &ScalarModel,
    phi: f64,
    m: u64,
    n: u64,
) -> Result<f64, ContourError> {
    cumulative_below_presampled_with_report(spec, model, phi, m, n).map(|(v, _)| v)
}

pub fn cumulative_below_presampled_with_report(
    spec: &ContourSpec,
    model: &ScalarModel,
    phi: f64,
    m: u64,
    n: u64,
) -> Result<(f64, ConvergenceReport), ContourError> {
    truncated_value(spec, model, Composition { phi, m }, Kernel::CumulativeThrough(n))
}

/// One probability of the joint (target, stutter) distribution of the
/// amplicon model, through a truncated double series over the two
/// root-of-unity grids running the coupled recursions.
pub fn bivariate_point(
    spec_target: &ContourSpec,
    spec_stutter: &ContourSpec,
    params: &crate::amplicon::AmpliconParams,
    n_target: u64,
    n_stutter: u64,
) -> Result<f64, ContourError> {
    let (n1, n2) = (spec_target.modulus, spec_stutter.modulus);
    let (p, xi) = (params.p, params.xi);
    let flat = if params.initial == 0 {
        1.0
    } else {
        (1.0 - params.phi).powf(params.initial as f64)
    };
    let eval = |j1: u64, j2: u64| -> Complex64 {
        let t1 = -2.0 * std::f64::consts::PI * ((j1 % n1) as f64) / n1 as f64;
        let t2 = -2.0 * std::f64::consts::PI * ((j2 % n2) as f64) / n2 as f64;
        let mut ft = Complex64::new(t1.cos(), t1.sin());
        let mut fs = Complex64::new(t2.cos(), t2.sin());
        for _ in 0..params.cycles {
            let ft_new = ft * (1.0 - p + p * ((1.0 - xi) * ft + xi * fs));
            let fs_new = fs * (1.0 - p + p * fs);
            ft = ft_new;
            fs = fs_new;
        }
        crate::spectral::complex_powu(
            Complex64::new(1.0 - params.phi, 0.0) + params.phi * ft,
            params.initial,
        ) - flat
    };
    let weight = |j1: u64, j2: u64| -> Complex64 {
        phase(n1, j1 as u128 * n_target as u128) * phase(n2, j2 as u128 * n_stutter as u128)
    };
    let scale = 1.0 / (n1 as f64 * n2 as f64);
    let correction = if n_target == 0 && n_stutter == 0 { flat } else { 0.0 };

    let mut l1 = spec_target.start_terms as u64;
    let mut l2 = spec_stutter.start_terms as u64;
    let half1 = n1 / 2;
    let half2 = n2 / 2;
    let mut prev: Option<f64> = None;
    let mut last_delta = f64::INFINITY;
    loop {
        let exact = l1 >= half1 && l2 >= half2;
        let value = if exact {
            // full grid, exact by definition
            let mut sum = 0.0;
            for j1 in 0..n1 {
                for j2 in 0..n2 {
                    sum += (eval(j1, j2) * weight(j1, j2)).re;
                }
            }
            sum * scale + correction
        } else {
            let t1 = l1.min(half1.saturating_sub(1));
            let t2 = l2.min(half2.saturating_sub(1));
            // origin plus two half-spaces folded by conjugate symmetry
            let mut sum = (eval(0, 0) * weight(0, 0)).re;
            for j2 in 1..=t2 {
                sum += 2.0 * (eval(0, j2) * weight(0, j2)).re;
            }
            for j1 in 1..=t1 {
                for j2 in 0..=t2 {
                    sum += 2.0 * (eval(j1, j2) * weight(j1, j2)).re;
                }
                for j2 in 1..=t2 {
                    sum += 2.0 * (eval(j1, n2 - j2) * weight(j1, n2 - j2)).re;
                }
            }
            sum * scale + correction
        };
        if let Some(pv) = prev {
            last_delta = (value - pv).abs();
            if last_delta < spec_target.rtol.max(spec_stutter.rtol) || exact {
                if value < -1e-9 {
                    return Err(ContourError::NegativeProbability { value });
                }
                return Ok(value);
            }
        } else if exact {
            if value < -1e-9 {
                return Err(ContourError::NegativeProbability { value });
            }
            return Ok(value);
        }
        if l1 as usize >= spec_target.max_terms && l2 as usize >= spec_stutter.max_terms {
            return Err(ContourError::NotConverged { terms: l1.max(l2) as usize, last_delta });
        }
        prev = Some(value);
        l1 = (l1 * 2).min(spec_target.max_terms as u64);
        l2 = (l2 * 2).min(spec_stutter.max_terms as u64);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amplicon::{self, AmpliconParams};

    #[test]
    fn full_coverage_matches_transform_exactly() {
        let params = AmpliconParams::new(0.8, 0.0, 6, 1, 1.0);
        let dist = amplicon::target_dist(&params).unwrap();
        let n = crate::numeric::next_pow2(dist.len() as u64) as u64;
        let spec = ContourSpec {
            modulus: n,
            rtol: 1e-9,
            start_terms: (n / 2 - 1) as usize,
            max_terms: n as usize,
        };
        let model = amplicon::target_model(&params);
        for k in 0..dist.len() as u64 {
            let got = point_prob(&spec, &model, k).unwrap();
            assert!(
                (got - dist.probs()[k as usize]).abs() < 1e-14,
                "k={k}: {got} vs {}",
                dist.probs()[k as usize]
            );
        }
    }

    #[test]
    fn truncated_matches_transform_at_feasible_cycles() {
        let params = AmpliconParams::new(0.85, 0.0, 16, 1, 1.0);
        let dist = amplicon::target_dist(&params).unwrap();
        let spec = ContourSpec::for_support(params.support_bound()).with_rtol(1e-12);
        let model = amplicon::target_model(&params);
        for &k in &[0u64, 1, 100, 5_000, 20_000, 40_000, 65_000] {
            let got = point_prob(&spec, &model, k).unwrap();
            assert!(
                (got - dist.probs()[k as usize]).abs() < 1e-10,
                "k={k}: {got} vs {}",
                dist.probs()[k as usize]
            );
        }
    }

    #[test]
    fn presampled_reduces_and_corrects() {
        let params = AmpliconParams::new(0.8, 0.0, 12, 1, 1.0);
        let spec = ContourSpec::for_support(params.support_bound()).with_rtol(1e-12);
        let model = amplicon::target_model(&params);
        // phi = 1, m = 1 equals the plain point probability
        for &k in &[0u64, 7, 300] {
            let a = point_prob(&spec, &model, k).unwrap();
            let b = point_prob_presampled(&spec, &model, 1.0, 1, k).unwrap();
            assert!((a - b).abs() < 1e-13);
        }
        // the dropout mass is exactly (1 - phi)^m
        let params = AmpliconParams::new(0.8, 0.0, 18, 1, 2.0 / 11.0);
        let spec = ContourSpec::for_support(params.support_bound()).with_rtol(1e-13);
        let model = amplicon::target_model(&params);
        let p0 = point_prob_presampled(&spec, &model, 2.0 / 11.0, 1, 0).unwrap();
        assert!((p0 - 9.0 / 11.0).abs() < 1e-12, "p0={p0}");
    }

    #[test]
    fn presampled_matches_transform() {
        // a low-template multimodal configuration
        let params = AmpliconParams::new(0.85, 0.0, 10, 50, 0.6);
        let dist = amplicon::target_dist(&params).unwrap();
        let spec = ContourSpec::for_support(params.support_bound()).with_rtol(1e-12);
        let model = amplicon::target_model(&params);
        for &k in &[0u64, 1, 1000, 10_000, 30_000, 44_000] {
            let got = point_prob_presampled(&spec, &model, params.phi, params.initial, k).unwrap();
            assert!(
                (got - dist.probs()[k as usize]).abs() < 1e-9,
                "k={k}: {got} vs {}",
                dist.probs()[k as usize]
            );
        }
    }

    #[test]
    fn cumulative_cases() {
        let params = AmpliconParams::new(0.85, 0.0, 12, 2, 0.3);
        let dist = amplicon::target_dist(&params).unwrap();
        let spec = ContourSpec::for_support(params.support_bound()).with_rtol(1e-12);
        let model = amplicon::target_model(&params);
        let m = params.initial;
        let total =
            cumulative_below_presampled(&spec, &model, params.phi, m, spec.modulus - 1).unwrap();
        assert!((total - 1.0).abs() < 1e-9);
        let c0 = cumulative_below_presampled(&spec, &model, params.phi, m, 0).unwrap();
        let p0 = point_prob_presampled(&spec, &model, params.phi, m, 0).unwrap();
        assert!((c0 - p0).abs() < 1e-12);
        for &k in &[10u64, 500, 4_000, 12_000] {
            let got = cumulative_below_presampled(&spec, &model, params.phi, m, k).unwrap();
            let want = dist.cumulative(k as usize);
            assert!((got - want).abs() < 1e-9, "k={k}: {got} vs {want}");
        }
    }

    #[test]
    fn dropout_threshold_case_matches_transform() {
        // the dropout-figure configuration scaled to K = 12 so the oracle
        // transform stays cheap: P(count < threshold)
        let (p, k, phi, m) = (0.85, 12u32, 0.1, 30u64);
        let params = AmpliconParams::new(p, 0.0, k, m, phi);
        let dist = amplicon::target_dist(&params).unwrap();
        let threshold = 9_000u64;
        let spec = ContourSpec::for_support(params.support_bound()).with_rtol(1e-12);
        let model = amplicon::target_model(&params);
        let got = cumulative_below_presampled(&spec, &model, phi, m, threshold - 1).unwrap();
        let want = dist.cumulative(threshold as usize - 1);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn stutter_marginal_point_values() {
        let params = AmpliconParams::new(0.8, 0.01, 12, 1, 1.0);
        let dist = amplicon::stutter_marginal(&params).unwrap();
        let spec = ContourSpec::for_support(params.support_bound()).with_rtol(1e-12);
        let model = amplicon::stutter_model(&params);
        for &k in &[0u64, 1, 5, 40, 200] {
            let got = point_prob(&spec, &model, k).unwrap();
            assert!(
                (got - dist.probs()[k as usize]).abs() < 1e-10,
                "k={k}: {got} vs {}",
                dist.probs()[k as usize]
            );
        }
    }

    #[test]
    fn not_converged_is_reported() {
        let params = AmpliconParams::new(0.85, 0.0, 16, 1, 1.0);
        let spec = ContourSpec::for_support(params.support_bound())
            .with_rtol(1e-14)
            .with_terms(2, 8);
        let model = amplicon::target_model(&params);
        match point_prob(&spec, &model, 20_000) {
            Err(ContourError::NotConverged { .. }) => {}
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }

    #[test]
    fn bivariate_zero_xi_and_small_grid_oracle() {
        let params = AmpliconParams::new(0.9, 0.0, 4, 1, 1.0);
        let spec = ContourSpec::for_support(params.support_bound()).with_terms(4, 64);
        let v = bivariate_point(&spec, &spec, &params, 3, 2).unwrap();
        assert!(v.abs() < 1e-10);

        let params = AmpliconParams::new(0.85, 0.1, 4, 1, 1.0);
        let joint = amplicon::joint_target_stutter(&params).unwrap();
        let spec = ContourSpec::for_support(params.support_bound())
            .with_terms(4, 64)
            .with_rtol(1e-13);
        for t in 0..joint.rows().min(12) {
            for s in 0..joint.cols().min(6) {
                let got = bivariate_point(&spec, &spec, &params, t as u64, s as u64).unwrap();
                assert!(
                    (got - joint.at(t, s)).abs() < 1e-10,
                    "t={t} s={s}: {got} vs {}",
                    joint.at(t, s)
                );
            }
        }
    }

    #[test]
    fn point_sweep_sums_to_one_with_full_coverage() {
        let params = AmpliconParams::new(0.7, 0.0, 5, 1, 0.8);
        let n = crate::numeric::next_pow2(params.support_bound()) as u64;
        let spec =
            ContourSpec { modulus: n, rtol: 1e-9, start_terms: n as usize, max_terms: n as usize };
        let model = amplicon::target_model(&params);
        let mut total = 0.0;
        for k in 0..n {
            total += point_prob_presampled(&spec, &model, params.phi, 1, k).unwrap();
        }
        assert!((total - 1.0).abs() < 1e-9);
    }
}
