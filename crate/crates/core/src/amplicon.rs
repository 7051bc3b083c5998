//! The amplicon model: PCR starts from ready-made amplicons, each cycle an
//! amplicon copies itself or, conditionally, mis-copies one repeat short.
//!
//! Exact distributions come from iterating the branching PGF over roots of
//! unity and inverting; moments come from the derivative recurrences of
//! the same branching table. The closed-form moment expressions live in
//! the test suite as cross-checks.

use crate::branching::{Branch, BranchSystem};
use crate::contour::{self, ContourError, ContourSpec, ScalarModel};
use crate::numeric::next_pow2;
use crate::spectral::{self, ProbVec, SpectralError};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use std::fmt;

/// Default ceiling on transform allocations, in bytes.
pub const DEFAULT_MEMORY_BUDGET: u64 = 4 << 30;

/// Kind indices in the amplicon branching system.
pub const KIND_TARGET: usize = 0;
pub const KIND_STUTTER: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum DistError {
    /// The transform needed for an exact distribution does not fit the
    /// memory budget; single probabilities are still reachable through the
    /// truncated contour sums.
    MemoryBudgetExceeded { required: u64, budget: u64 },
    Spectral(SpectralError),
    Contour(ContourError),
}

impl fmt::Display for DistError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistError::MemoryBudgetExceeded { required, budget } => write!(
                f,
                "transform needs {required} bytes against a budget of {budget}; \
                 use the contour evaluator for point or cumulative values"
            ),
            DistError::Spectral(e) => write!(f, "{e}"),
            DistError::Contour(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for DistError {}

impl From<SpectralError> for DistError {
    fn from(e: SpectralError) -> Self {
        DistError::Spectral(e)
    }
}

impl From<ContourError> for DistError {
    fn from(e: ContourError) -> Self {
        DistError::Contour(e)
    }
}

/// Parameters of the amplicon model. `p` is the per-cycle product
/// probability and `xi` the conditional stutter probability, recovering
/// the split rates as `p_s = p xi` and `p_t = p (1 - xi)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AmpliconParams {
    pub p: f64,
    pub xi: f64,
    pub cycles: u32,
    /// Initial amplicon count before pre-sampling.
    pub initial: u64,
    /// Binomial pre-sampling probability.
    pub phi: f64,
}

impl AmpliconParams {
    pub fn new(p: f64, xi: f64, cycles: u32, initial: u64, phi: f64) -> Self {
        assert!((0.0..=1.0).contains(&p), "p out of [0,1]");
        assert!((0.0..=1.0).contains(&xi), "xi out of [0,1]");
        assert!((0.0..=1.0).contains(&phi), "phi out of [0,1]");
        AmpliconParams { p, xi, cycles, initial, phi }
    }

    pub fn p_t(&self) -> f64 {
        self.p * (1.0 - self.xi)
    }

    pub fn p_s(&self) -> f64 {
        self.p * self.xi
    }

    /// The two-kind branching table: a target copies itself or stutters,
    /// a stutter product only copies itself.
    pub fn system(&self) -> BranchSystem {
        BranchSystem {
            kind_names: vec!["target", "stutter"],
            fire_prob: vec![self.p, self.p],
            branches: vec![
                vec![
                    Branch { weight: 1.0 - self.xi, offspring: KIND_TARGET },
                    Branch { weight: self.xi, offspring: KIND_STUTTER },
                ],
                vec![Branch { weight: 1.0, offspring: KIND_STUTTER }],
            ],
        }
    }

    /// Hard upper bound on any product count: every amplicon at most
    /// doubles per cycle.
    pub fn support_bound(&self) -> u64 {
        self.initial
            .checked_shl(self.cycles)
            .map(|s| s + 1)
            .unwrap_or(u64::MAX)
    }

    fn scalar_target(&self) -> ScalarModel {
        ScalarModel::new(self.system(), vec![KIND_TARGET], KIND_TARGET, self.cycles)
    }

    fn scalar_stutter(&self) -> ScalarModel {
        ScalarModel::new(self.system(), vec![KIND_TARGET], KIND_STUTTER, self.cycles)
    }
}

/// One draw of the final amplicon count, no stutter accounting.
pub fn simulate_counts<R: Rng + ?Sized>(params: &AmpliconParams, rng: &mut R) -> u64 {
    let mut n = binom(params.initial, params.phi, rng);
    let p_t = params.p_t();
    for _ in 0..params.cycles {
        n += binom(n, p_t, rng);
    }
    n
}

/// One draw of `(target, stutter)` counts under the corrected three-draw
/// update: per cycle the products of existing targets split between true
/// copies and stutters, and existing stutters copy themselves.
pub fn simulate_with_stutter<R: Rng + ?Sized>(
    params: &AmpliconParams,
    rng: &mut R,
) -> (u64, u64) {
    let mut n = binom(params.initial, params.phi, rng);
    let mut m = 0u64;
    let p = params.p;
    let frac_t = if p > 0.0 { params.p_t() / p } else { 0.0 };
    for _ in 0..params.cycles {
        let j = binom(n, p, rng);
        let j_t = binom(j, frac_t, rng);
        let j_s = binom(m, p, rng);
        n += j_t;
        m += (j - j_t) + j_s;
    }
    (n, m)
}

fn binom<R: Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("valid binomial").sample(rng)
}

fn check_budget(entries: u64, vectors: u64, budget: u64) -> Result<(), DistError> {
    let required = entries.saturating_mul(16).saturating_mul(vectors);
    if required > budget {
        return Err(DistError::MemoryBudgetExceeded { required, budget });
    }
    Ok(())
}

/// Exact distribution of the final target-amplicon count. Only the
/// effective copy rate `p_t` enters, so with `xi = 0` this is the plain
/// model with rate `p`.
pub fn target_dist(params: &AmpliconParams) -> Result<ProbVec, DistError> {
    target_dist_with_budget(params, DEFAULT_MEMORY_BUDGET)
}

pub fn target_dist_with_budget(params: &AmpliconParams, budget: u64) -> Result<ProbVec, DistError> {
    marginal_with_budget(params, KIND_TARGET, budget)
}

/// Marginal distribution of the stutter-product count.
pub fn stutter_marginal(params: &AmpliconParams) -> Result<ProbVec, DistError> {
    stutter_marginal_with_budget(params, DEFAULT_MEMORY_BUDGET)
}

pub fn stutter_marginal_with_budget(
    params: &AmpliconParams,
    budget: u64,
) -> Result<ProbVec, DistError> {
    marginal_with_budget(params, KIND_STUTTER, budget)
}

fn marginal_with_budget(
    params: &AmpliconParams,
    tracked: usize,
    budget: u64,
) -> Result<ProbVec, DistError> {
    let support = params.support_bound();
    if support == u64::MAX {
        return Err(DistError::MemoryBudgetExceeded { required: u64::MAX, budget });
    }
    let n = next_pow2(support) as u64;
    check_budget(n, 3, budget)?;
    let sys = params.system();
    let spectrum =
        crate::branching::marginal_spectrum(&sys, &[KIND_TARGET], tracked, n as usize, params.cycles);
    let mixed = spectral::binomial_mix(
        &spectral::SpectralVec::from_values(spectrum),
        params.phi,
        params.initial,
    );
    let full = spectral::inverse_dft(&mixed)?;
    Ok(full.resized(support as usize))
}

/// Joint pmf over `(target, stutter)` counts; row index is the target count.
#[derive(Clone, Debug)]
pub struct ProbMatrix {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl ProbMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, target: usize, stutter: usize) -> f64 {
        self.data[target * self.cols + stutter]
    }

    /// Marginal over stutter counts (sums each row).
    pub fn target_marginal(&self) -> ProbVec {
        let probs = (0..self.rows)
            .map(|r| crate::numeric::pairwise_sum(&self.data[r * self.cols..(r + 1) * self.cols]))
            .collect();
        ProbVec::from_raw(probs).expect("non-negative marginal")
    }

    /// Marginal over target counts (sums each column).
    pub fn stutter_marginal(&self) -> ProbVec {
        let mut probs = vec![0.0; self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                probs[c] += self.data[r * self.cols + c];
            }
        }
        ProbVec::from_raw(probs).expect("non-negative marginal")
    }

    pub fn total_mass(&self) -> f64 {
        crate::numeric::pairwise_sum(&self.data)
    }
}

/// Exact joint distribution of target and stutter counts through a
/// two-dimensional transform. Memory grows with the square of the support,
/// so this is only practical for small cycle counts.
pub fn joint_target_stutter(params: &AmpliconParams) -> Result<ProbMatrix, DistError> {
    joint_target_stutter_with_budget(params, DEFAULT_MEMORY_BUDGET)
}

pub fn joint_target_stutter_with_budget(
    params: &AmpliconParams,
    budget: u64,
) -> Result<ProbMatrix, DistError> {
    let support = params.support_bound();
    if support == u64::MAX {
        return Err(DistError::MemoryBudgetExceeded { required: u64::MAX, budget });
    }
    // the only coefficient beyond M*2^K - 1 is the all-target corner with
    // mass at most p^(M*2^K - 1); when that is provably below 1e-12 the
    // grid drops it, halving each axis at forensic depths
    let full_run = (support - 2) as f64 * (1.0 / params.p.max(1e-12)).ln();
    let n64 = if params.p < 1.0 && full_run > 30.0 {
        next_pow2(support - 1) as u64
    } else {
        next_pow2(support) as u64
    };
    check_budget(n64.saturating_mul(n64), 2, budget)?;
    let n = n64 as usize;
    let (p, xi) = (params.p, params.xi);
    let mut grid = vec![Complex64::new(0.0, 0.0); n * n];
    for f in 0..n {
        let zt = spectral_root(n, f);
        for g in 0..n {
            let zs = spectral_root(n, g);
            let mut ft = zt;
            let mut fs = zs;
            for _ in 0..params.cycles {
                let ft_new = ft * (1.0 - p + p * ((1.0 - xi) * ft + xi * fs));
                let fs_new = fs * (1.0 - p + p * fs);
                ft = ft_new;
                fs = fs_new;
            }
            let pre = Complex64::new(1.0 - params.phi, 0.0) + params.phi * ft;
            grid[f * n + g] = spectral::complex_powu(pre, params.initial);
        }
    }
    inverse_fft_2d(&mut grid, n);
    let rows = (support as usize).min(n);
    let cols = (support as usize).min(n);
    let mut data = vec![0.0; rows * cols];
    let scale = 1.0 / (n as f64 * n as f64);
    for r in 0..rows {
        for c in 0..cols {
            let z = grid[r * n + c];
            if z.im.abs() * scale > spectral::IMAG_TOL {
                return Err(DistError::Spectral(SpectralError::ImaginaryResidue {
                    index: r * n + c,
                    magnitude: z.im.abs() * scale,
                }));
            }
            data[r * cols + c] = (z.re * scale).max(0.0);
        }
    }
    Ok(ProbMatrix { data, rows, cols })
}

fn spectral_root(n: usize, j: usize) -> Complex64 {
    let theta = -2.0 * std::f64::consts::PI * j as f64 / n as f64;
    Complex64::new(theta.cos(), theta.sin())
}

fn inverse_fft_2d(grid: &mut [Complex64], n: usize) {
    for r in 0..n {
        spectral::fft_in_place(&mut grid[r * n..(r + 1) * n], true);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for c in 0..n {
        for r in 0..n {
            col[r] = grid[r * n + c];
        }
        spectral::fft_in_place(&mut col, true);
        for r in 0..n {
            grid[r * n + c] = col[r];
        }
    }
}

/// Mean, variance and covariance of target and stutter counts from a
/// single starting amplicon.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentSet {
    pub mean_target: f64,
    pub mean_stutter: f64,
    pub var_target: f64,
    pub var_stutter: f64,
    pub cov: f64,
}

impl MomentSet {
    pub fn correlation(&self) -> Option<f64> {
        let denom = (self.var_target * self.var_stutter).sqrt();
        if denom > 0.0 {
            Some(self.cov / denom)
        } else {
            None
        }
    }

    pub fn e_target_sq(&self) -> f64 {
        self.var_target + self.mean_target * self.mean_target
    }

    pub fn e_stutter_sq(&self) -> f64 {
        self.var_stutter + self.mean_stutter * self.mean_stutter
    }

    pub fn e_cross(&self) -> f64 {
        self.cov + self.mean_target * self.mean_stutter
    }
}

/// Moments after `n` cycles from one amplicon, by iterating the derivative
/// recurrences of the branching table.
pub fn moments(p: f64, xi: f64, n: u32) -> MomentSet {
    let params = AmpliconParams::new(p, xi, n, 1, 1.0);
    let sys = params.system();
    let (yt, zt) = sys.first_second_moments(KIND_TARGET, n);
    let (ys, zs) = sys.first_second_moments(KIND_STUTTER, n);
    let (yx, yy, dd) = sys.mixed_moments(KIND_TARGET, KIND_STUTTER, n);
    let i = KIND_TARGET;
    MomentSet {
        mean_target: yt[i],
        mean_stutter: ys[i],
        var_target: zt[i] + yt[i] - yt[i] * yt[i],
        var_stutter: zs[i] + ys[i] - ys[i] * ys[i],
        cov: dd[i] - yx[i] * yy[i],
    }
}

/// How the initial amplicon count is drawn before the cycles run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    Binomial { m: u64, phi: f64 },
    Poisson { lambda: f64 },
}

/// Applies pre-sampling to single-amplicon moments through the
/// conditional-expectation identities.
pub fn sampled_moments(ms: &MomentSet, sampling: Sampling) -> MomentSet {
    match sampling {
        Sampling::Binomial { m, phi } => {
            let mq = m as f64 * phi;
            MomentSet {
                mean_target: mq * ms.mean_target,
                mean_stutter: mq * ms.mean_stutter,
                var_target: mq * (ms.var_target + (1.0 - phi) * ms.mean_target * ms.mean_target),
                var_stutter: mq
                    * (ms.var_stutter + (1.0 - phi) * ms.mean_stutter * ms.mean_stutter),
                cov: mq * (ms.cov + (1.0 - phi) * ms.mean_target * ms.mean_stutter),
            }
        }
        Sampling::Poisson { lambda } => MomentSet {
            mean_target: lambda * ms.mean_target,
            mean_stutter: lambda * ms.mean_stutter,
            var_target: lambda * ms.e_target_sq(),
            var_stutter: lambda * ms.e_stutter_sq(),
            cov: lambda * ms.e_cross(),
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Zygosity {
    /// One allele copy per cell.
    Heterozygous,
    /// Two allele copies per cell.
    Homozygous,
}

/// Dropout probability `P(count < threshold)` for each cell count, through
/// the truncated contour evaluator so no full transform is materialised.
pub fn dropout_curve(
    p: f64,
    cycles: u32,
    phi: f64,
    threshold: u64,
    cells: &[u64],
    zygosity: Zygosity,
) -> Result<Vec<f64>, DistError> {
    let factor = match zygosity {
        Zygosity::Heterozygous => 1,
        Zygosity::Homozygous => 2,
    };
    // a zero count never produces a peak, so the zero class drops out even
    // at threshold 0
    let threshold = threshold.max(1);
    let mut out = Vec::with_capacity(cells.len());
    for &c in cells {
        let m = c * factor;
        let params = AmpliconParams::new(p, 0.0, cycles, m, phi);
        let pd = if threshold == 1 {
            (1.0 - phi).powf(m as f64)
        } else {
            let spec = ContourSpec::for_support(params.support_bound());
            let model = params.scalar_target();
            contour::cumulative_below_presampled(&spec, &model, phi, m, threshold - 1)?
        };
        out.push(pd);
    }
    Ok(out)
}

/// Contour model for the target-count PGF of a single amplicon.
pub fn target_model(params: &AmpliconParams) -> ScalarModel {
    params.scalar_target()
}

/// Contour model for the stutter-count PGF of a single amplicon.
pub fn stutter_model(params: &AmpliconParams) -> ScalarModel {
    params.scalar_stutter()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum XiError {
    /// The requested stutter ratio is not attainable for any xi in [0, 1).
    OutOfRange { sr: f64 },
}

impl fmt::Display for XiError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            XiError::OutOfRange { sr } => write!(f, "stutter ratio {sr} has no root in [0,1)"),
        }
    }
}

impl std::error::Error for XiError {}

/// Conditional stutter probability from a stutter-ratio regression
/// `SR = a + b LUS`, inverting `SR = ((1+p)/(1+p(1-xi)))^k - 1` by
/// bisection. Negative regression values clamp to zero.
pub fn xi_from_lus(a: f64, b: f64, lus: f64, p: f64, k: u32) -> Result<f64, XiError> {
    let sr = a + b * lus;
    if sr <= 0.0 {
        return Ok(0.0);
    }
    let sr_of = |xi: f64| ((1.0 + p) / (1.0 + p * (1.0 - xi))).powi(k as i32) - 1.0;
    if sr >= sr_of(1.0) {
        return Err(XiError::OutOfRange { sr });
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if sr_of(mid) < sr {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn closed_form_moments(p: f64, xi: f64, n: u32) -> MomentSet {
        // Appendix-style closed forms, kept here as the independent
        // cross-check of the recurrence path.
        let pt = p * (1.0 - xi);
        let a = 1.0 + p;
        let b = 1.0 + pt;
        let ni = n as i32;
        let mean_t = b.powi(ni);
        let var_t = (1.0 - pt) / (1.0 + pt) * b.powi(ni) * (b.powi(ni) - 1.0);
        let mean_s = a.powi(ni) - b.powi(ni);
        let es2 = 2.0 * (a.powi(2 * ni) - b.powi(ni)) / a
            - (4.0 - 2.0 * xi) * b.powi(ni - 1) * (a.powi(ni) - 1.0)
            + 2.0 * b.powi(ni - 1) * (b.powi(ni) - 1.0)
            - (1.0 - p) / a * (a.powi(ni) - b.powi(ni));
        let var_s = es2 - mean_s * mean_s;
        let cov = b.powi(ni - 1)
            * ((1.0 - pt) * (a.powi(ni) - b.powi(ni)) - xi * (a.powi(ni) - 1.0));
        MomentSet {
            mean_target: mean_t,
            mean_stutter: mean_s,
            var_target: var_t,
            var_stutter: var_s,
            cov,
        }
    }

    #[test]
    fn simulate_counts_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AmpliconParams::new(0.3, 0.0, 0, 5, 1.0);
        for _ in 0..20 {
            assert_eq!(simulate_counts(&p, &mut rng), 5);
        }
        let p = AmpliconParams::new(1.0, 0.0, 10, 1, 1.0);
        for _ in 0..20 {
            assert_eq!(simulate_counts(&p, &mut rng), 1024);
        }
    }

    #[test]
    fn simulate_with_stutter_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AmpliconParams::new(0.8, 0.0, 12, 3, 0.7);
        for _ in 0..50 {
            let (_, s) = simulate_with_stutter(&p, &mut rng);
            assert_eq!(s, 0);
        }
        let p = AmpliconParams::new(1.0, 0.0, 5, 1, 1.0);
        for _ in 0..10 {
            assert_eq!(simulate_with_stutter(&p, &mut rng), (32, 0));
        }
    }

    #[test]
    fn stutter_correlation_near_paper_value() {
        // scatter of (n_K, m_K) at p_t = 0.8, p_s = 0.004 has correlation
        // around 0.22 in the source analysis
        let p = 0.804;
        let xi = 0.004 / p;
        let params = AmpliconParams::new(p, xi, 28, 1, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..10_000 {
            let (n, m) = simulate_with_stutter(&params, &mut rng);
            xs.push(n as f64);
            ys.push(m as f64);
        }
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        let mut sxy = 0.0;
        for (x, y) in xs.iter().zip(ys.iter()) {
            sxx += (x - mx) * (x - mx);
            syy += (y - my) * (y - my);
            sxy += (x - mx) * (y - my);
        }
        let corr = sxy / (sxx * syy).sqrt();
        assert!((corr - 0.22).abs() < 0.05, "corr = {corr}");
    }

    #[test]
    fn target_dist_one_cycle() {
        let params = AmpliconParams::new(0.8, 0.0, 1, 1, 1.0);
        let d = target_dist(&params).unwrap();
        assert_eq!(d.len(), 3);
        assert!(d.probs()[0].abs() < 1e-14);
        assert!((d.probs()[1] - 0.2).abs() < 1e-14);
        assert!((d.probs()[2] - 0.8).abs() < 1e-14);
    }

    #[test]
    fn target_dist_dropout_mass_is_exact() {
        // the zero-count coefficient is exactly (1 - phi)^M at any K
        let params = AmpliconParams::new(0.8, 0.0, 10, 1, 2.0 / 11.0);
        let d = target_dist(&params).unwrap();
        assert!((d.probs()[0] - 9.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn target_dist_mean_matches_formula() {
        for &(p, k, m, phi) in &[(0.8f64, 12u32, 1u64, 1.0f64), (0.6, 9, 3, 0.5)] {
            let params = AmpliconParams::new(p, 0.0, k, m, phi);
            let d = target_dist(&params).unwrap();
            let want = m as f64 * phi * (1.0 + p).powi(k as i32);
            assert!(
                (d.mean() - want).abs() / want < 1e-6,
                "p={p} k={k}: {} vs {want}",
                d.mean()
            );
        }
    }

    /// Exhaustive enumeration with binomial pre-sampling mixed in by hand.
    fn enumerate_presampled(params: &AmpliconParams, tracked: usize) -> Vec<f64> {
        let sys = params.system();
        let single = sys.enumerate_tracked(&[KIND_TARGET], tracked, params.cycles);
        let m = params.initial;
        let mut out = vec![0.0f64; 1];
        for k in 0..=m {
            let c = choose(m, k) * params.phi.powi(k as i32)
                * (1.0 - params.phi).powi((m - k) as i32);
            let mut term = vec![1.0f64];
            for _ in 0..k {
                term = conv(&term, &single);
            }
            if out.len() < term.len() {
                out.resize(term.len(), 0.0);
            }
            for (i, &t) in term.iter().enumerate() {
                out[i] += c * t;
            }
        }
        out
    }

    fn conv(a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; a.len() + b.len() - 1];
        for (i, &x) in a.iter().enumerate() {
            for (j, &y) in b.iter().enumerate() {
                out[i + j] += x * y;
            }
        }
        out
    }

    fn choose(n: u64, k: u64) -> f64 {
        let mut v = 1.0;
        for i in 0..k {
            v *= (n - i) as f64 / (i + 1) as f64;
        }
        v
    }

    #[test]
    fn target_dist_matches_enumeration() {
        let params = AmpliconParams::new(0.6, 0.0, 3, 2, 0.5);
        let want = enumerate_presampled(&params, KIND_TARGET);
        let got = target_dist(&params).unwrap();
        assert_eq!(got.len(), 17);
        for (i, &w) in want.iter().enumerate() {
            assert!((got.probs()[i] - w).abs() < 1e-12, "i={i}");
        }
        let tail: f64 = got.probs()[want.len()..].iter().sum();
        assert!(tail < 1e-12);
    }

    #[test]
    fn stutter_marginal_matches_enumeration() {
        let params = AmpliconParams::new(0.7, 0.15, 3, 1, 1.0);
        let want = enumerate_presampled(&params, KIND_STUTTER);
        let got = stutter_marginal(&params).unwrap();
        for (i, &w) in want.iter().enumerate() {
            assert!((got.probs()[i] - w).abs() < 1e-12, "i={i}");
        }
    }

    #[test]
    fn stutter_marginal_zero_xi_is_delta() {
        let params = AmpliconParams::new(0.8, 0.0, 6, 2, 0.4);
        let got = stutter_marginal(&params).unwrap();
        assert!((got.probs()[0] - 1.0).abs() < 1e-12);
        assert!(got.probs()[1..].iter().all(|&p| p < 1e-13));
    }

    #[test]
    fn stutter_marginal_mean_matches_closed_form() {
        // long right tail case: K=22, p=0.8, xi=0.004
        let params = AmpliconParams::new(0.8, 0.004, 22, 1, 1.0);
        let got = stutter_marginal(&params).unwrap();
        let want = (1.8f64).powi(22) - (1.0f64 + 0.8 * 0.996).powi(22);
        assert!((got.mean() - want).abs() / want < 1e-6, "{} vs {want}", got.mean());
    }

    #[test]
    fn joint_zero_xi_has_empty_stutter_columns() {
        let params = AmpliconParams::new(0.9, 0.0, 3, 1, 1.0);
        let joint = joint_target_stutter(&params).unwrap();
        for r in 0..joint.rows() {
            for c in 1..joint.cols() {
                assert!(joint.at(r, c) < 1e-13);
            }
        }
    }

    #[test]
    fn joint_matches_enumeration_and_marginals() {
        let params = AmpliconParams::new(0.9, 0.1, 2, 1, 1.0);
        let joint = joint_target_stutter(&params).unwrap();
        // enumeration of the full joint state
        let sys = params.system();
        let mut initial = vec![0u64; 2];
        initial[KIND_TARGET] = 1;
        let states = enumerate_joint(&sys, &initial, params.cycles);
        for ((t, s), w) in &states {
            assert!(
                (joint.at(*t as usize, *s as usize) - w).abs() < 1e-12,
                "t={t} s={s}"
            );
        }
        assert!((joint.total_mass() - 1.0).abs() < 1e-10);

        // marginals agree with the one-dimensional paths
        let tm = joint.target_marginal();
        let sm = joint.stutter_marginal();
        let t1 = target_dist(&params).unwrap();
        let s1 = stutter_marginal(&params).unwrap();
        for i in 0..t1.len() {
            assert!((tm.probs()[i] - t1.probs()[i]).abs() < 1e-9);
            assert!((sm.probs()[i] - s1.probs()[i]).abs() < 1e-9);
        }
    }

    fn enumerate_joint(
        sys: &BranchSystem,
        initial: &[u64],
        cycles: u32,
    ) -> std::collections::HashMap<(u64, u64), f64> {
        // reuse the generic enumerator by tracking full states
        let mut dist: std::collections::HashMap<Vec<u64>, f64> = std::collections::HashMap::new();
        dist.insert(initial.to_vec(), 1.0);
        for _ in 0..cycles {
            let mut next: std::collections::HashMap<Vec<u64>, f64> =
                std::collections::HashMap::new();
            for (state, prob) in dist {
                let mut partials = vec![(state.clone(), prob)];
                for i in 0..sys.arity() {
                    for _ in 0..state[i] {
                        let mut grown = Vec::new();
                        for (s, q) in &partials {
                            let p = sys.fire_prob[i];
                            if p < 1.0 {
                                grown.push((s.clone(), q * (1.0 - p)));
                            }
                            for b in &sys.branches[i] {
                                if b.weight == 0.0 {
                                    continue;
                                }
                                let mut s2 = s.clone();
                                s2[b.offspring] += 1;
                                grown.push((s2, q * p * b.weight));
                            }
                        }
                        partials = grown;
                    }
                }
                for (s, q) in partials {
                    *next.entry(s).or_insert(0.0) += q;
                }
            }
            dist = next;
        }
        let mut out = std::collections::HashMap::new();
        for (state, prob) in dist {
            *out.entry((state[KIND_TARGET], state[KIND_STUTTER])).or_insert(0.0) += prob;
        }
        out
    }

    #[test]
    fn joint_moment_structure_midsize() {
        // K = 10 keeps the grid small while checking mean agreement
        let params = AmpliconParams::new(0.85, 0.005, 10, 1, 1.0);
        let joint = joint_target_stutter(&params).unwrap();
        let ms = moments(params.p, params.xi, params.cycles);
        let tm = joint.target_marginal();
        let sm = joint.stutter_marginal();
        assert!((tm.mean() - ms.mean_target).abs() / ms.mean_target < 1e-9);
        assert!((sm.mean() - ms.mean_stutter).abs() / ms.mean_stutter < 1e-9);
    }

    #[test]
    fn moments_degenerate_cases() {
        let m0 = moments(0.8, 0.1, 0);
        assert_eq!(m0.mean_target, 1.0);
        assert_eq!(m0.mean_stutter, 0.0);
        assert_eq!(m0.var_target, 0.0);
        assert_eq!(m0.var_stutter, 0.0);
        assert_eq!(m0.cov, 0.0);

        let m = moments(0.8, 0.0, 7);
        assert!((m.mean_target - 1.8f64.powi(7)).abs() < 1e-9);
        assert_eq!(m.mean_stutter, 0.0);

        let m = moments(1.0, 0.0, 10);
        assert!((m.mean_target - 1024.0).abs() < 1e-9);
        assert!(m.var_target.abs() < 1e-6);
    }

    #[test]
    fn moments_match_closed_forms() {
        for &(p, xi, n) in &[(0.8, 0.004, 18u32), (0.85, 0.03, 16), (0.7, 0.1, 9)] {
            let got = moments(p, xi, n);
            let want = closed_form_moments(p, xi, n);
            let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-30);
            assert!(rel(got.mean_target, want.mean_target) < 1e-9);
            assert!(rel(got.mean_stutter, want.mean_stutter) < 1e-9);
            assert!(rel(got.var_target, want.var_target) < 1e-9);
            assert!(rel(got.var_stutter, want.var_stutter) < 1e-9, "vs {}", want.var_stutter);
            assert!(rel(got.cov, want.cov) < 1e-9);
        }
    }

    #[test]
    fn moments_match_simulation() {
        let (p, xi, n) = (0.8, 0.01, 12);
        let params = AmpliconParams::new(p, xi, n, 1, 1.0);
        let ms = moments(p, xi, n);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let runs = 100_000;
        let mut st = 0.0;
        let mut ss = 0.0;
        for _ in 0..runs {
            let (t, s) = simulate_with_stutter(&params, &mut rng);
            st += t as f64;
            ss += s as f64;
        }
        let se_t = (ms.var_target / runs as f64).sqrt();
        let se_s = (ms.var_stutter / runs as f64).sqrt();
        assert!((st / runs as f64 - ms.mean_target).abs() < 4.0 * se_t);
        assert!((ss / runs as f64 - ms.mean_stutter).abs() < 4.0 * se_s);
    }

    #[test]
    fn sampled_moments_identities() {
        let ms = moments(0.8, 0.005, 14);
        // phi = 1 scales means and variances by M
        let sm = sampled_moments(&ms, Sampling::Binomial { m: 7, phi: 1.0 });
        assert!((sm.mean_target - 7.0 * ms.mean_target).abs() < 1e-9);
        assert!((sm.var_target - 7.0 * ms.var_target).abs() < 1e-6);
        // Poisson correlation does not depend on lambda
        let c1 = sampled_moments(&ms, Sampling::Poisson { lambda: 1.0 })
            .correlation()
            .unwrap();
        let c2 = sampled_moments(&ms, Sampling::Poisson { lambda: 100.0 })
            .correlation()
            .unwrap();
        assert!((c1 - c2).abs() < 1e-12);
        // binomial correlation approaches the Poisson one as phi -> 0
        let cb = sampled_moments(&ms, Sampling::Binomial { m: 1_000_000, phi: 1e-6 })
            .correlation()
            .unwrap();
        assert!((cb - c1).abs() < 1e-4);
    }

    #[test]
    fn dropout_curve_degenerate_and_shape() {
        // at threshold 0 only the zero class drops out: P(D) = (1-phi)^M
        let pd = dropout_curve(0.85, 6, 0.3, 0, &[1, 2, 3], Zygosity::Heterozygous).unwrap();
        for (i, &x) in pd.iter().enumerate() {
            let want = 0.7f64.powi(i as i32 + 1);
            assert!((x - want).abs() < 1e-12);
        }

        // M=1, phi=0.5, K=1, p=1, threshold 2: P(count < 2) = P(0) = 0.5
        let pd = dropout_curve(1.0, 1, 0.5, 2, &[1], Zygosity::Heterozygous).unwrap();
        assert!((pd[0] - 0.5).abs() < 1e-9);

        // monotone decreasing in cells, hom below het
        let cells: Vec<u64> = (1..=12).collect();
        let het = dropout_curve(0.85, 10, 0.1, 400, &cells, Zygosity::Heterozygous).unwrap();
        let hom = dropout_curve(0.85, 10, 0.1, 400, &cells, Zygosity::Homozygous).unwrap();
        for i in 1..het.len() {
            assert!(het[i] <= het[i - 1] + 1e-12);
        }
        for i in 0..het.len() {
            assert!(hom[i] <= het[i] + 1e-12);
        }
    }

    #[test]
    fn xi_from_lus_cases() {
        assert_eq!(xi_from_lus(-0.1, 0.001, 10.0, 0.85, 28).unwrap(), 0.0);

        // round-trip: pick xi, compute SR from the mean formulas, invert
        let (p, k) = (0.85, 28u32);
        for &xi in &[0.002, 0.004, 0.01] {
            let ms = moments(p, xi, k);
            let sr = ms.mean_stutter / ms.mean_target;
            let back = xi_from_lus(sr, 0.0, 0.0, p, k).unwrap();
            assert!((back - xi).abs() < 1e-9, "xi={xi} back={back}");
        }

        // D10S1248 regression row: a = -0.0576, b = 0.0089, LUS 12
        let xi = xi_from_lus(-0.0576, 0.0089, 12.0, 0.85, 28).unwrap();
        let ms = moments(0.85, xi, 28);
        let sr = ms.mean_stutter / ms.mean_target;
        assert!((sr - 0.0492).abs() < 1e-6, "sr={sr}");
    }
}
