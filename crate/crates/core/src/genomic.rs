//! The genomic-strand model: PCR starts from genome pairs, builds
//! half-strands, then amplicons, and only the dye-tagged amplicons are
//! visible to capillary electrophoresis.
//!
//! The no-stutter system has six strand kinds; adding single backward
//! stutter lifts it to ten, and double/forward stutter to eighteen. All
//! three live in one branching table, so the spectral, scalar, moment and
//! Monte Carlo evaluations share the same transition data. Per-cycle
//! updates always read the previous cycle's snapshot, which resolves the
//! cyclic dependency between the two amplicon strands.

use crate::branching::{Branch, BranchSystem};
pub use crate::amplicon::DistError;
use crate::contour::ScalarModel;
use crate::numeric::next_pow2;
use crate::spectral::{self, ProbVec};
use rand::Rng;
use std::fmt;

/// Strand kinds across all model variants. The `d` suffix marks a dye tag;
/// `s`, `r` and `f` mark single backward, double backward and forward
/// stutter variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StrandKind {
    G,
    Gd,
    H,
    Hd,
    Hs,
    Hsd,
    Hr,
    Hrd,
    Hf,
    Hfd,
    A,
    Ad,
    As,
    Asd,
    Ar,
    Ard,
    Af,
    Afd,
}

impl StrandKind {
    /// Repeat-unit offset of the products this kind contributes to,
    /// relative to the origin allele.
    pub fn repeat_offset(self) -> i8 {
        use StrandKind::*;
        match self {
            Hs | Hsd | As | Asd => -1,
            Hr | Hrd | Ar | Ard => -2,
            Hf | Hfd | Af | Afd => 1,
            _ => 0,
        }
    }
}

/// Which stutter machinery the branching system carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StutterMode {
    None,
    Single,
    Full,
}

impl StutterMode {
    pub fn kinds(self) -> &'static [StrandKind] {
        use StrandKind::*;
        match self {
            StutterMode::None => &[G, Gd, H, Hd, A, Ad],
            StutterMode::Single => &[G, Gd, H, Hd, Hs, Hsd, A, Ad, As, Asd],
            StutterMode::Full => &[
                G, Gd, H, Hd, Hs, Hsd, Hr, Hrd, Hf, Hfd, A, Ad, As, Asd, Ar, Ard, Af, Afd,
            ],
        }
    }

    pub fn kind_index(self, kind: StrandKind) -> Option<usize> {
        self.kinds().iter().position(|&k| k == kind)
    }
}

/// The tagged product kind whose marginal is being evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackedProduct {
    Target,
    Stutter,
    Double,
    Forward,
}

impl TrackedProduct {
    pub fn kind(self) -> StrandKind {
        match self {
            TrackedProduct::Target => StrandKind::Ad,
            TrackedProduct::Stutter => StrandKind::Asd,
            TrackedProduct::Double => StrandKind::Ard,
            TrackedProduct::Forward => StrandKind::Afd,
        }
    }

    pub fn repeat_offset(self) -> i8 {
        self.kind().repeat_offset()
    }

    /// The smallest stutter mode whose system carries this product.
    pub fn minimal_mode(self, params: &GenomicParams) -> StutterMode {
        match self {
            TrackedProduct::Target | TrackedProduct::Stutter
                if params.xi_r == 0.0 && params.xi_f == 0.0 =>
            {
                if params.xi_s == 0.0 && self == TrackedProduct::Target {
                    StutterMode::None
                } else {
                    StutterMode::Single
                }
            }
            _ => StutterMode::Full,
        }
    }
}

/// Optional per-kind amplification overrides for the stutter variants; by
/// default each shares its base strand's probability.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StutterAmpOverrides {
    pub h_s: Option<f64>,
    pub h_sd: Option<f64>,
    pub h_r: Option<f64>,
    pub h_rd: Option<f64>,
    pub h_f: Option<f64>,
    pub h_fd: Option<f64>,
    pub a_s: Option<f64>,
    pub a_sd: Option<f64>,
    pub a_r: Option<f64>,
    pub a_rd: Option<f64>,
    pub a_f: Option<f64>,
    pub a_fd: Option<f64>,
}

/// Parameters of the genomic model for one allele.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenomicParams {
    pub p_g: f64,
    pub p_gd: f64,
    pub p_h: f64,
    pub p_hd: f64,
    pub p_a: f64,
    pub p_ad: f64,
    /// Conditional single, double and forward stutter probabilities.
    pub xi_s: f64,
    pub xi_r: f64,
    pub xi_f: f64,
    pub cycles: u32,
    /// Initial genome-pair count before pre-sampling.
    pub pairs: u64,
    /// Binomial pre-sampling probability per pair.
    pub phi: f64,
    pub overrides: StutterAmpOverrides,
}

impl GenomicParams {
    /// All strand probabilities equal, no stutter.
    pub fn uniform(p: f64, cycles: u32, pairs: u64, phi: f64) -> Self {
        assert!((0.0..=1.0).contains(&p));
        assert!((0.0..=1.0).contains(&phi));
        GenomicParams {
            p_g: p,
            p_gd: p,
            p_h: p,
            p_hd: p,
            p_a: p,
            p_ad: p,
            xi_s: 0.0,
            xi_r: 0.0,
            xi_f: 0.0,
            cycles,
            pairs,
            phi,
            overrides: StutterAmpOverrides::default(),
        }
    }

    pub fn with_stutter(mut self, xi_s: f64, xi_r: f64, xi_f: f64) -> Self {
        assert!(xi_s >= 0.0 && xi_r >= 0.0 && xi_f >= 0.0);
        assert!(xi_s + xi_r + xi_f <= 1.0, "stutter probabilities sum above 1");
        self.xi_s = xi_s;
        self.xi_r = xi_r;
        self.xi_f = xi_f;
        self
    }

    /// Amplification probability of a kind, falling back to the base
    /// strand's value for stutter variants without an override.
    pub fn amp_prob(&self, kind: StrandKind) -> f64 {
        use StrandKind::*;
        let o = &self.overrides;
        match kind {
            G => self.p_g,
            Gd => self.p_gd,
            H => self.p_h,
            Hd => self.p_hd,
            A => self.p_a,
            Ad => self.p_ad,
            Hs => o.h_s.unwrap_or(self.p_h),
            Hsd => o.h_sd.unwrap_or(self.p_hd),
            Hr => o.h_r.unwrap_or(self.p_h),
            Hrd => o.h_rd.unwrap_or(self.p_hd),
            Hf => o.h_f.unwrap_or(self.p_h),
            Hfd => o.h_fd.unwrap_or(self.p_hd),
            As => o.a_s.unwrap_or(self.p_a),
            Asd => o.a_sd.unwrap_or(self.p_ad),
            Ar => o.a_r.unwrap_or(self.p_a),
            Ard => o.a_rd.unwrap_or(self.p_ad),
            Af => o.a_f.unwrap_or(self.p_a),
            Afd => o.a_fd.unwrap_or(self.p_ad),
        }
    }

    /// Builds the branching table for the requested stutter machinery.
    /// `StutterMode::None` ignores the stutter probabilities entirely.
    pub fn system(&self, mode: StutterMode) -> BranchSystem {
        use StrandKind::*;
        let kinds = mode.kinds();
        let idx = |k: StrandKind| mode.kind_index(k).expect("kind in mode");
        let mut branches: Vec<Vec<Branch>> = Vec::with_capacity(kinds.len());
        let (xs, xr, xf) = (self.xi_s, self.xi_r, self.xi_f);
        for &kind in kinds {
            let rules: Vec<(f64, StrandKind)> = match mode {
                StutterMode::None => match kind {
                    G => vec![(1.0, Hd)],
                    Gd => vec![(1.0, H)],
                    H => vec![(1.0, Ad)],
                    Hd => vec![(1.0, A)],
                    A => vec![(1.0, Ad)],
                    Ad => vec![(1.0, A)],
                    _ => unreachable!(),
                },
                StutterMode::Single => match kind {
                    G => vec![(1.0 - xs, Hd), (xs, Hsd)],
                    Gd => vec![(1.0 - xs, H), (xs, Hs)],
                    H => vec![(1.0 - xs, Ad), (xs, Asd)],
                    Hd => vec![(1.0 - xs, A), (xs, As)],
                    Hs => vec![(1.0, Asd)],
                    Hsd => vec![(1.0, As)],
                    A => vec![(1.0 - xs, Ad), (xs, Asd)],
                    Ad => vec![(1.0 - xs, A), (xs, As)],
                    As => vec![(1.0, Asd)],
                    Asd => vec![(1.0, As)],
                    _ => unreachable!(),
                },
                StutterMode::Full => match kind {
                    G => vec![
                        (1.0 - xr - xs - xf, Hd),
                        (xr, Hrd),
                        (xs, Hsd),
                        (xf, Hfd),
                    ],
                    Gd => vec![(1.0 - xr - xs - xf, H), (xr, Hr), (xs, Hs), (xf, Hf)],
                    H => vec![
                        (1.0 - xr - xs - xf, Ad),
                        (xr, Ard),
                        (xs, Asd),
                        (xf, Afd),
                    ],
                    Hr => vec![(1.0 - xf, Ard), (xf, Asd)],
                    Hs => vec![(1.0 - xs - xf, Asd), (xs, Ard), (xf, Ad)],
                    Hf => vec![(1.0 - xs, Afd), (xs, Ad)],
                    Hd => vec![(1.0 - xr - xs - xf, A), (xr, Ar), (xs, As), (xf, Af)],
                    Hrd => vec![(1.0 - xf, Ar), (xf, As)],
                    Hsd => vec![(1.0 - xf, As), (xf, A)],
                    Hfd => vec![(1.0 - xs, Af), (xs, A)],
                    A => vec![(1.0 - xs - xf, Ad), (xs, Asd), (xf, Afd)],
                    Ad => vec![(1.0 - xs - xf, A), (xs, As), (xf, Af)],
                    As => vec![(1.0 - xs - xf, Asd), (xs, Ard), (xf, Ad)],
                    Asd => vec![(1.0 - xs - xf, As), (xs, Ar), (xf, A)],
                    Ar => vec![(1.0 - xf, Ard), (xf, Asd)],
                    Ard => vec![(1.0 - xf, Ar), (xf, As)],
                    Af => vec![(1.0 - xs, Afd), (xs, Ad)],
                    Afd => vec![(1.0 - xs, Af), (xs, A)],
                },
            };
            branches.push(
                rules
                    .into_iter()
                    .filter(|&(w, _)| w != 0.0)
                    .map(|(w, k)| Branch { weight: w, offspring: idx(k) })
                    .collect(),
            );
        }
        BranchSystem {
            kind_names: kinds.iter().map(kind_name).collect(),
            fire_prob: kinds.iter().map(|&k| self.amp_prob(k)).collect(),
            branches,
        }
    }

    /// Hard support bound for a tagged-product count from all pairs.
    pub fn support_bound(&self) -> u64 {
        // total strands from one pair at most double each cycle
        self.pairs
            .checked_mul(2)
            .and_then(|s| s.checked_shl(self.cycles))
            .map(|s| s + 1)
            .unwrap_or(u64::MAX)
    }

    fn seeds(&self, mode: StutterMode) -> Vec<usize> {
        vec![
            mode.kind_index(StrandKind::G).unwrap(),
            mode.kind_index(StrandKind::Gd).unwrap(),
        ]
    }

    /// Contour model of the tagged product of one genome pair.
    pub fn scalar_model(&self, mode: StutterMode, tracked: TrackedProduct) -> ScalarModel {
        let sys = self.system(mode);
        let seeds = self.seeds(mode);
        let t = mode.kind_index(tracked.kind()).expect("tracked kind in mode");
        ScalarModel::new(sys, seeds, t, self.cycles)
    }
}

fn kind_name(kind: &StrandKind) -> &'static str {
    use StrandKind::*;
    match kind {
        G => "g",
        Gd => "g_d",
        H => "h",
        Hd => "h_d",
        Hs => "h_s",
        Hsd => "h_sd",
        Hr => "h_r",
        Hrd => "h_rd",
        Hf => "h_f",
        Hfd => "h_fd",
        A => "a",
        Ad => "a_d",
        As => "a_s",
        Asd => "a_sd",
        Ar => "a_r",
        Ard => "a_rd",
        Af => "a_f",
        Afd => "a_fd",
    }
}

/// Per-kind strand counts after each line of a fully efficient
/// amplification, starting from one genome pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeterministicCounts {
    /// From the untagged genomic strand: half-strands and amplicons.
    pub g_line_hd: u64,
    pub g_line_a: u64,
    pub g_line_ad: u64,
    /// From the tagged genomic strand.
    pub gd_line_h: u64,
    pub gd_line_ad: u64,
    pub gd_line_a: u64,
}

impl DeterministicCounts {
    pub fn tagged_total(&self) -> u64 {
        self.g_line_ad + self.gd_line_ad
    }
}

/// Exact strand counts at 100% efficiency after `n` cycles; the tagged
/// total follows `2^n - n - 1`.
pub fn deterministic_counts(n: u32) -> DeterministicCounts {
    let mut hd = 0u64;
    let mut a = 0u64;
    let mut ad = 0u64;
    for _ in 0..n {
        let (hd0, a0, ad0) = (hd, a, ad);
        hd = hd0 + 1;
        a = a0 + hd0 + ad0;
        ad = ad0 + a0;
    }
    // the tagged-strand line mirrors the untagged one with a and a_d roles
    // swapped
    DeterministicCounts {
        g_line_hd: hd,
        g_line_a: a,
        g_line_ad: ad,
        gd_line_h: hd,
        gd_line_ad: a,
        gd_line_a: ad,
    }
}

/// Marginal distribution of dye-tagged target amplicons from `pairs`
/// genome pairs under binomial pair selection.
pub fn tagged_dist(params: &GenomicParams, mode: StutterMode) -> Result<ProbVec, DistError> {
    tagged_product_dist_with_budget(
        params,
        mode,
        TrackedProduct::Target,
        crate::amplicon::DEFAULT_MEMORY_BUDGET,
    )
}

/// Marginal distribution of a tagged stutter product of the given order.
/// Single backward stutter runs the ten-variable system when no double or
/// forward rates are set; everything else runs the full system.
pub fn tagged_stutter_dist(params: &GenomicParams, order: i8) -> Result<ProbVec, DistError> {
    let tracked = match order {
        -1 => TrackedProduct::Stutter,
        -2 => TrackedProduct::Double,
        1 => TrackedProduct::Forward,
        other => panic!("unsupported stutter order {other}"),
    };
    let mode = tracked.minimal_mode(params);
    tagged_product_dist_with_budget(params, mode, tracked, crate::amplicon::DEFAULT_MEMORY_BUDGET)
}

pub fn tagged_product_dist_with_budget(
    params: &GenomicParams,
    mode: StutterMode,
    tracked: TrackedProduct,
    budget: u64,
) -> Result<ProbVec, DistError> {
    let support = params.support_bound();
    if support == u64::MAX {
        return Err(DistError::MemoryBudgetExceeded {
            required: u64::MAX,
            budget,
        });
    }
    let n = next_pow2(support) as u64;
    let required = n.saturating_mul(16).saturating_mul(3);
    if required > budget {
        return Err(DistError::MemoryBudgetExceeded { required, budget });
    }
    let sys = params.system(mode);
    let seeds = params.seeds(mode);
    let t = mode.kind_index(tracked.kind()).expect("tracked kind");
    let spectrum =
        crate::branching::marginal_spectrum(&sys, &seeds, t, n as usize, params.cycles);
    let mixed = spectral::binomial_mix(
        &spectral::SpectralVec::from_values(spectrum),
        params.phi,
        params.pairs,
    );
    let full = spectral::inverse_dft(&mixed)?;
    Ok(full.resized(support as usize))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MeanTaggedError {
    /// A closed-form mean needs both amplicon rates positive; fall back to
    /// the matrix recurrences otherwise.
    DegenerateRates,
}

impl fmt::Display for MeanTaggedError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "closed-form mean needs p_a > 0 and p_ad > 0; use the matrix recurrences")
    }
}

impl std::error::Error for MeanTaggedError {}

/// Closed-form mean of tagged target amplicons from one genome pair after
/// `n` cycles, no stutter.
pub fn mean_tagged(params: &GenomicParams, n: u32) -> Result<f64, MeanTaggedError> {
    let (pa, pad) = (params.p_a, params.p_ad);
    if pa <= 0.0 || pad <= 0.0 {
        return Err(MeanTaggedError::DegenerateRates);
    }
    let r = (pa * pad).sqrt();
    let up = (1.0 + r).powi(n as i32);
    let dn = (1.0 - r).powi(n as i32);
    let g_term = params.p_g * params.p_hd / (pa * pad)
        * ((pa / pad).sqrt() * (up - dn) / 2.0 - n as f64 * pa);
    let gd_term = params.p_gd * params.p_h / (pa * pad) * ((up + dn) / 2.0 - 1.0);
    Ok(g_term + gd_term)
}

/// Mean, variance and covariance of tagged target and tagged
/// single-stutter products from one genome pair, by iterating the
/// derivative recurrences of the system matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenomicMoments {
    pub mean_target: f64,
    pub var_target: f64,
    pub mean_stutter: f64,
    pub var_stutter: f64,
    pub cov: f64,
}

impl GenomicMoments {
    pub fn correlation(&self) -> Option<f64> {
        let d = (self.var_target * self.var_stutter).sqrt();
        if d > 0.0 {
            Some(self.cov / d)
        } else {
            None
        }
    }
}

/// Moments of tagged products from one genome pair. With
/// `with_stutter = false` the six-variable system runs and the stutter
/// fields are zero.
pub fn moment_matrices(params: &GenomicParams, n: u32, with_stutter: bool) -> GenomicMoments {
    let mode = if with_stutter {
        if params.xi_r == 0.0 && params.xi_f == 0.0 {
            StutterMode::Single
        } else {
            StutterMode::Full
        }
    } else {
        StutterMode::None
    };
    let (mt, vt) = tracked_moments(params, mode, TrackedProduct::Target, n);
    if !with_stutter {
        return GenomicMoments {
            mean_target: mt,
            var_target: vt,
            mean_stutter: 0.0,
            var_stutter: 0.0,
            cov: 0.0,
        };
    }
    let (ms, vs) = tracked_moments(params, mode, TrackedProduct::Stutter, n);
    let sys = params.system(mode);
    let ti = mode.kind_index(StrandKind::Ad).unwrap();
    let si = mode.kind_index(StrandKind::Asd).unwrap();
    let (yx, yy, dd) = sys.mixed_moments(ti, si, n);
    let gi = mode.kind_index(StrandKind::G).unwrap();
    let gdi = mode.kind_index(StrandKind::Gd).unwrap();
    // the two genomic lines amplify independently, so covariances add
    let cov = (dd[gi] - yx[gi] * yy[gi]) + (dd[gdi] - yx[gdi] * yy[gdi]);
    GenomicMoments {
        mean_target: mt,
        var_target: vt,
        mean_stutter: ms,
        var_stutter: vs,
        cov,
    }
}

/// Per-pair mean and variance of one tracked product kind.
pub fn tracked_moments(
    params: &GenomicParams,
    mode: StutterMode,
    tracked: TrackedProduct,
    n: u32,
) -> (f64, f64) {
    let sys = params.system(mode);
    let t = mode.kind_index(tracked.kind()).expect("tracked kind in mode");
    let (y, z) = sys.first_second_moments(t, n);
    let gi = mode.kind_index(StrandKind::G).unwrap();
    let gdi = mode.kind_index(StrandKind::Gd).unwrap();
    let mean = y[gi] + y[gdi];
    let var = z[gi] + y[gi] - y[gi] * y[gi] + z[gdi] + y[gdi] - y[gdi] * y[gdi];
    (mean, var)
}

/// One Monte Carlo draw of all strand counts from a single genome pair.
pub fn simulate_genomic<R: Rng + ?Sized>(
    params: &GenomicParams,
    mode: StutterMode,
    rng: &mut R,
) -> Vec<u64> {
    let sys = params.system(mode);
    let mut initial = vec![0u64; sys.arity()];
    initial[mode.kind_index(StrandKind::G).unwrap()] = 1;
    initial[mode.kind_index(StrandKind::Gd).unwrap()] = 1;
    sys.simulate(&initial, params.cycles, rng)
}

/// Tagged product totals per repeat offset from a strand-count vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TaggedCounts {
    pub target: u64,
    pub stutter: u64,
    pub double: u64,
    pub forward: u64,
}

pub fn tagged_counts(mode: StutterMode, counts: &[u64]) -> TaggedCounts {
    let get = |k: StrandKind| mode.kind_index(k).map(|i| counts[i]).unwrap_or(0);
    TaggedCounts {
        target: get(StrandKind::Ad),
        stutter: get(StrandKind::Asd),
        double: get(StrandKind::Ard),
        forward: get(StrandKind::Afd),
    }
}
