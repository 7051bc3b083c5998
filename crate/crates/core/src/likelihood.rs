//! Per-allele peak-height distributions under the factorized model, and
//! locus/profile log-likelihoods with untyped-contributor summation.
//!
//! For one allele the height is the sum of independent pieces: baseline
//! noise, drop-in, and the tagged products of up to four source alleles
//! (itself plus the three stutter neighbours), each binomially pre-sampled
//! per genome pair. The exact backends compose all piece PGFs at the
//! roots of unity and read peak masses and censored tails straight off
//! truncated contour sums, so a peak's likelihood never needs the full
//! transform. The moment backends carry an exact selection-dropout atom
//! per piece and moment-match only the conditional positive part with a
//! normal, lognormal or gamma density.

use crate::contour::{self, ContourError};
use crate::genomic::{StutterMode, TrackedProduct};
use crate::numeric;
use crate::sample::{
    count_to_rfu, rfu_to_amplicon_range, AlleleId, EpgPeak, Genotype, Kit, KitLocus, NoiseCounts,
    Profile, SampleConfig, SampleError,
};
use crate::spectral::ProbVec;
use num_complex::Complex64;
use std::collections::{BTreeMap, HashMap};
use std::fmt;

/// Peak-height evaluation backends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PeakModel {
    Normal,
    Lognormal,
    Gamma,
    Fft,
    /// The exact backend with stutter pieces included only when their
    /// source position shows a peak above a threshold multiple.
    Mfft,
}

impl PeakModel {
    pub fn is_exact(self) -> bool {
        matches!(self, PeakModel::Fft | PeakModel::Mfft)
    }

    pub fn parse(s: &str) -> Option<PeakModel> {
        match s.to_ascii_lowercase().as_str() {
            "normal" => Some(PeakModel::Normal),
            "lognormal" => Some(PeakModel::Lognormal),
            "gamma" => Some(PeakModel::Gamma),
            "fft" => Some(PeakModel::Fft),
            "mfft" => Some(PeakModel::Mfft),
            _ => None,
        }
    }
}

impl fmt::Display for PeakModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PeakModel::Normal => "normal",
            PeakModel::Lognormal => "lognormal",
            PeakModel::Gamma => "gamma",
            PeakModel::Fft => "fft",
            PeakModel::Mfft => "mfft",
        };
        write!(f, "{s}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LikelihoodError {
    Sample(SampleError),
    Contour(ContourError),
    Dist(crate::amplicon::DistError),
    /// Lognormal and gamma matching need positive mean and variance.
    NonPositiveMoments { mean: f64, var: f64 },
    /// Genotype enumeration is exhaustive; more untyped contributors than
    /// this cap would explode combinatorially.
    TooManyUntyped { count: usize, cap: usize },
    /// A profile references an allele missing from the frequency table.
    UnknownAllele { locus: String, allele: String },
    /// A hypothesis references a profile id that was not loaded.
    UnknownProfile { id: String },
    /// A known profile has no genotype at a kit locus.
    MissingGenotype { profile: String, locus: String },
}

impl fmt::Display for LikelihoodError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LikelihoodError::Sample(e) => write!(f, "{e}"),
            LikelihoodError::Contour(e) => write!(f, "{e}"),
            LikelihoodError::Dist(e) => write!(f, "{e}"),
            LikelihoodError::NonPositiveMoments { mean, var } => {
                write!(f, "moment matching needs mean > 0 and var > 0, got {mean}, {var}")
            }
            LikelihoodError::TooManyUntyped { count, cap } => {
                write!(f, "{count} untyped contributors exceed the exhaustive-enumeration cap of {cap}")
            }
            LikelihoodError::UnknownAllele { locus, allele } => {
                write!(f, "allele {allele} at {locus} missing from the frequency table")
            }
            LikelihoodError::UnknownProfile { id } => write!(f, "unknown profile {id}"),
            LikelihoodError::MissingGenotype { profile, locus } => {
                write!(f, "profile {profile} has no genotype at {locus}")
            }
        }
    }
}

impl std::error::Error for LikelihoodError {}

impl From<SampleError> for LikelihoodError {
    fn from(e: SampleError) -> Self {
        LikelihoodError::Sample(e)
    }
}

impl From<ContourError> for LikelihoodError {
    fn from(e: ContourError) -> Self {
        LikelihoodError::Contour(e)
    }
}

/// Exhaustive genotype enumeration cap for untyped contributors.
pub const MAX_UNTYPED: usize = 3;

/// Inclusion multiple of the analytic threshold for the modified exact
/// backend; equality is inclusive.
pub const MFFT_FACTOR: f64 = 3.0;

// ---------------------------------------------------------------------------
// moment-matched densities

/// A continuous density matched to a mean and variance.
#[derive(Clone, Copy, Debug)]
pub enum MomentDensity {
    Normal { mean: f64, sd: f64 },
    Lognormal { mu: f64, sigma: f64 },
    Gamma { shape: f64, scale: f64 },
}

/// Matches the requested family to `(mean, var)` exactly.
pub fn moment_matched_density(
    mean: f64,
    var: f64,
    model: PeakModel,
) -> Result<MomentDensity, LikelihoodError> {
    match model {
        PeakModel::Normal => {
            if var <= 0.0 {
                return Err(LikelihoodError::NonPositiveMoments { mean, var });
            }
            Ok(MomentDensity::Normal { mean, sd: var.sqrt() })
        }
        PeakModel::Lognormal => {
            if mean <= 0.0 || var <= 0.0 {
                return Err(LikelihoodError::NonPositiveMoments { mean, var });
            }
            let sigma2 = (1.0 + var / (mean * mean)).ln();
            Ok(MomentDensity::Lognormal { mu: mean.ln() - sigma2 / 2.0, sigma: sigma2.sqrt() })
        }
        PeakModel::Gamma => {
            if mean <= 0.0 || var <= 0.0 {
                return Err(LikelihoodError::NonPositiveMoments { mean, var });
            }
            Ok(MomentDensity::Gamma { shape: mean * mean / var, scale: var / mean })
        }
        _ => panic!("moment matching applies to the moment models only"),
    }
}

impl MomentDensity {
    pub fn pdf(&self, x: f64) -> f64 {
        match *self {
            MomentDensity::Normal { mean, sd } => numeric::normal_pdf((x - mean) / sd) / sd,
            MomentDensity::Lognormal { mu, sigma } => {
                if x <= 0.0 {
                    0.0
                } else {
                    numeric::normal_pdf((x.ln() - mu) / sigma) / (x * sigma)
                }
            }
            MomentDensity::Gamma { shape, scale } => {
                if x <= 0.0 {
                    0.0
                } else {
                    ((shape - 1.0) * x.ln() - x / scale
                        - numeric::ln_gamma(shape)
                        - shape * scale.ln())
                    .exp()
                }
            }
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            MomentDensity::Normal { mean, sd } => numeric::normal_cdf((x - mean) / sd),
            MomentDensity::Lognormal { mu, sigma } => {
                if x <= 0.0 {
                    0.0
                } else {
                    numeric::normal_cdf((x.ln() - mu) / sigma)
                }
            }
            MomentDensity::Gamma { shape, scale } => {
                if x <= 0.0 {
                    0.0
                } else {
                    numeric::reg_gamma_lower(shape, x / scale)
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            MomentDensity::Normal { mean, .. } => mean,
            MomentDensity::Lognormal { mu, sigma } => (mu + sigma * sigma / 2.0).exp(),
            MomentDensity::Gamma { shape, scale } => shape * scale,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            MomentDensity::Normal { sd, .. } => sd * sd,
            MomentDensity::Lognormal { mu, sigma } => {
                let s2 = sigma * sigma;
                (s2.exp() - 1.0) * (2.0 * mu + s2).exp()
            }
            MomentDensity::Gamma { shape, scale } => shape * scale * scale,
        }
    }
}

// ---------------------------------------------------------------------------
// genotype probabilities

/// Normalized allele frequencies of one locus.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LocusFreqs {
    pub probs: BTreeMap<AlleleId, f64>,
}

/// Allele frequencies per locus, already minimum-count adjusted, plus the
/// unadjusted relative frequencies used to split locus-wide drop-in rates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrequencyTable {
    pub per_locus: BTreeMap<String, LocusFreqs>,
    pub unadjusted_rel: BTreeMap<String, BTreeMap<AlleleId, f64>>,
}

/// Sequential substructure-corrected allele sampling within one locus:
/// having drawn `m` alleles of which `m_a` were of type `a`, the next is
/// `a` with probability `(m_a theta + (1-theta) p_a) / (1 + (m-1) theta)`.
/// The resulting joint probability of a multiset is order-invariant.
#[derive(Clone, Debug)]
pub struct GenotypeSampler<'a> {
    freqs: &'a LocusFreqs,
    theta: f64,
    counts: BTreeMap<AlleleId, u32>,
    total: u32,
}

impl<'a> GenotypeSampler<'a> {
    pub fn new(freqs: &'a LocusFreqs, theta: f64) -> Self {
        GenotypeSampler { freqs, theta, counts: BTreeMap::new(), total: 0 }
    }

    fn allele_prob(&self, a: AlleleId) -> Option<f64> {
        let p = *self.freqs.probs.get(&a)?;
        let m_a = *self.counts.get(&a).unwrap_or(&0) as f64;
        let m = self.total as f64;
        let th = self.theta;
        Some((m_a * th + (1.0 - th) * p) / (1.0 + (m - 1.0) * th))
    }

    fn push(&mut self, a: AlleleId) {
        *self.counts.entry(a).or_insert(0) += 1;
        self.total += 1;
    }

    /// Probability of an unordered genotype, advancing the tally.
    pub fn genotype_prob(&mut self, g: Genotype) -> Option<f64> {
        let p1 = self.allele_prob(g.0)?;
        self.push(g.0);
        let p2 = self.allele_prob(g.1)?;
        self.push(g.1);
        let hom = g.0 == g.1;
        Some(if hom { p1 * p2 } else { 2.0 * p1 * p2 })
    }
}

/// Probability of one genotype with no prior conditioning.
pub fn genotype_probability(
    g: Genotype,
    freqs: &LocusFreqs,
    theta: f64,
) -> Result<f64, LikelihoodError> {
    GenotypeSampler::new(freqs, theta).genotype_prob(g).ok_or_else(|| {
        LikelihoodError::UnknownAllele { locus: String::new(), allele: g.0.to_string() }
    })
}

// ---------------------------------------------------------------------------
// the mFFT inclusion rule

/// Stutter offsets whose source alleles feed each allele of a locus. The
/// exact backend keeps an offset only if the source position carries a
/// peak at or above `factor` times the threshold; noise, drop-in and the
/// allele's own genomes are always present.
pub fn mfft_inclusion(
    peaks: &[(AlleleId, u32)],
    locus: &KitLocus,
    threshold: u32,
    factor: f64,
) -> BTreeMap<AlleleId, Vec<i8>> {
    let cutoff = factor * threshold as f64;
    let peak_at = |id: AlleleId| peaks.iter().any(|&(a, h)| a == id && h as f64 >= cutoff);
    let mut out = BTreeMap::new();
    for allele in &locus.alleles {
        let mut offsets = vec![0i8];
        for off in [-1i8, -2, 1] {
            // the source sits `off` away in the opposite direction
            if let Some(source) = allele.id.offset_by(-off) {
                if locus.allele(source).is_some() && peak_at(source) {
                    offsets.push(off);
                }
            }
        }
        out.insert(allele.id, offsets);
    }
    out
}

fn mode_offsets(mode: StutterMode) -> &'static [i8] {
    match mode {
        StutterMode::None => &[0],
        StutterMode::Single => &[0, -1],
        StutterMode::Full => &[0, -1, -2, 1],
    }
}

fn tracked_for_offset(offset: i8) -> TrackedProduct {
    match offset {
        0 => TrackedProduct::Target,
        -1 => TrackedProduct::Stutter,
        -2 => TrackedProduct::Double,
        1 => TrackedProduct::Forward,
        _ => unreachable!(),
    }
}

// ---------------------------------------------------------------------------
// per-locus evaluation engine

/// One piece of an allele's height: `pairs` genome pairs of the source
/// allele, selected with probability `phi` each, whose offset-`offset`
/// tagged products land on the evaluated allele.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub source: AlleleId,
    pub offset: i8,
    pub pairs: u64,
    pub phi: f64,
}

/// Everything needed to evaluate one allele's peak-height distribution.
#[derive(Clone, Debug)]
pub struct AlleleContext {
    pub allele: AlleleId,
    pub components: Vec<Component>,
    pub dropin_lambda: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Observation {
    /// A retained peak of this height in RFU.
    Height(u32),
    /// No peak at or above the analytic threshold.
    BelowThreshold,
}

/// Cached circle values and moments for one locus.
pub struct LocusEngine {
    pub locus: KitLocus,
    cfg: SampleConfig,
    noise: NoiseCounts,
    /// Observed peaks at this locus after censoring.
    pub peaks: Vec<(AlleleId, u32)>,
    /// Per (source allele, offset): circle-point values of the per-pair
    /// tagged-product PGF, keyed by grid modulus.
    circle: HashMap<(AlleleId, i8, u64), Vec<Complex64>>,
    /// Per (source allele, offset): per-pair mean and variance.
    pair_moments: HashMap<(AlleleId, i8), (f64, f64)>,
    /// Drop-in per-pair circle values and moments per allele.
    dropin_circle: HashMap<(AlleleId, u64), Vec<Complex64>>,
    dropin_moments: HashMap<AlleleId, (f64, f64)>,
    /// Memoized per-observation log factors keyed by the component pair
    /// counts, so repeated fit evaluations hit the cache.
    query_cache: HashMap<QueryKey, f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct QueryKey {
    allele: AlleleId,
    ks: Vec<(i8, u64)>,
    obs: ObsKey,
    model: PeakModel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum ObsKey {
    Height(u32),
    Below,
    CdfBelowHeight(u32),
}

impl LocusEngine {
    pub fn new(
        locus: &KitLocus,
        cfg: &SampleConfig,
        peaks: Vec<(AlleleId, u32)>,
    ) -> Result<Self, LikelihoodError> {
        let noise = crate::sample::noise_pgf(cfg, &locus.dye)?;
        Ok(LocusEngine {
            locus: locus.clone(),
            cfg: cfg.clone(),
            noise,
            peaks,
            circle: HashMap::new(),
            pair_moments: HashMap::new(),
            dropin_circle: HashMap::new(),
            dropin_moments: HashMap::new(),
            query_cache: HashMap::new(),
        })
    }

    /// Changes the degradation rate, invalidating only the caches that
    /// depend on selection probabilities.
    pub fn set_delta(&mut self, delta: f64) {
        if self.cfg.delta != delta {
            self.cfg.delta = delta;
            self.query_cache.clear();
        }
    }

    /// Included stutter offsets per allele for a backend: the stutter mode
    /// caps the set, and the modified exact backend filters by source
    /// peaks.
    pub fn included_offsets(&self, model: PeakModel) -> BTreeMap<AlleleId, Vec<i8>> {
        let base: Vec<i8> = mode_offsets(self.cfg.stutter).to_vec();
        match model {
            PeakModel::Mfft => {
                let rule = mfft_inclusion(
                    &self.peaks,
                    &self.locus,
                    self.cfg.analytic_threshold,
                    MFFT_FACTOR,
                );
                rule.into_iter()
                    .map(|(a, offs)| {
                        (a, offs.into_iter().filter(|o| base.contains(o)).collect())
                    })
                    .collect()
            }
            _ => self.locus.alleles.iter().map(|a| (a.id, base.clone())).collect(),
        }
    }

    /// Builds the height context of one allele from per-allele genome-pair
    /// counts, keeping only components with sources inside the ladder.
    pub fn context(
        &self,
        allele: AlleleId,
        pair_counts: &BTreeMap<AlleleId, u64>,
        offsets: &[i8],
    ) -> AlleleContext {
        let mut components = Vec::new();
        for &off in offsets {
            let source = match allele.offset_by(-off) {
                Some(s) => s,
                None => continue,
            };
            let source_allele = match self.locus.allele(source) {
                Some(a) => a,
                None => continue,
            };
            // a source only contributes when its products can reach this
            // allele, i.e. its effective stutter rate is positive (or the
            // offset is zero)
            if off != 0 && self.locus.effective_xi(source_allele, off) == 0.0 {
                continue;
            }
            let pairs = *pair_counts.get(&source).unwrap_or(&0);
            if pairs == 0 {
                continue;
            }
            components.push(Component {
                source,
                offset: off,
                pairs,
                phi: self.cfg.selection_probability(source_allele.size_bp),
            });
        }
        let dropin_lambda = self
            .locus
            .allele(allele)
            .map(|a| a.dropin_rate)
            .unwrap_or(0.0);
        AlleleContext { allele, components, dropin_lambda }
    }

    fn pair_moments(&mut self, source: AlleleId, offset: i8) -> (f64, f64) {
        if let Some(&m) = self.pair_moments.get(&(source, offset)) {
            return m;
        }
        let allele = self.locus.allele(source).expect("source in ladder").clone();
        let params = self.locus.genomic_params(&allele, self.cfg.cycles, 1, 1.0);
        let tracked = tracked_for_offset(offset);
        let mode = match self.cfg.stutter {
            StutterMode::Full => StutterMode::Full,
            _ => tracked.minimal_mode(&params),
        };
        let m = crate::genomic::tracked_moments(&params, mode, tracked, self.cfg.cycles);
        self.pair_moments.insert((source, offset), m);
        m
    }

    fn dropin_moments(&mut self, allele: AlleleId) -> (f64, f64) {
        if let Some(&m) = self.dropin_moments.get(&allele) {
            return m;
        }
        let a = self.locus.allele(allele).expect("allele in ladder").clone();
        let params = self.locus.genomic_params(&a, self.cfg.cycles, 1, 1.0);
        let mode = TrackedProduct::Target.minimal_mode(&params);
        let m = crate::genomic::tracked_moments(&params, mode, TrackedProduct::Target, self.cfg.cycles);
        self.dropin_moments.insert(allele, m);
        m
    }

    fn circle_values(&mut self, source: AlleleId, offset: i8, modulus: u64, upto: usize) -> &[Complex64] {
        let key = (source, offset, modulus);
        if !self.circle.contains_key(&key) {
            self.circle.insert(key, Vec::new());
        }
        let have = self.circle[&key].len();
        if have < upto {
            let allele = self.locus.allele(source).expect("source in ladder").clone();
            let params = self.locus.genomic_params(&allele, self.cfg.cycles, 1, 1.0);
            let tracked = tracked_for_offset(offset);
            let mode = match self.cfg.stutter {
                StutterMode::Full => StutterMode::Full,
                _ => tracked.minimal_mode(&params),
            };
            let model = params.scalar_model(mode, tracked);
            let mut vals = self.circle.remove(&key).unwrap();
            for j in (have + 1)..=upto {
                vals.push(model.eval(j as u64, modulus));
            }
            self.circle.insert(key, vals);
        }
        &self.circle[&key]
    }

    fn dropin_circle_values(&mut self, allele: AlleleId, modulus: u64, upto: usize) -> &[Complex64] {
        let key = (allele, modulus);
        self.dropin_circle.entry(key).or_insert_with(|| Vec::new());
        let have = self.dropin_circle[&key].len();
        if have < upto {
            let a = self.locus.allele(allele).expect("allele in ladder").clone();
            let model = crate::sample::dropin_pair_model(&a_locus(&self.locus), &a, &self.cfg);
            let mut vals = self.dropin_circle.remove(&key).unwrap();
            for j in (have + 1)..=upto {
                vals.push(model.eval(j as u64, modulus));
            }
            self.dropin_circle.insert(key, vals);
        }
        &self.dropin_circle[&key]
    }

    /// Grid modulus for a context: bounded by the hard support, the
    /// effective mass edge (mean + 48 sd), and never below the largest
    /// count the queries touch.
    fn modulus_for(&mut self, ctx: &AlleleContext, max_query_count: u64) -> u64 {
        let pair_hard = 2u64.checked_shl(self.cfg.cycles).unwrap_or(u64::MAX);
        let mut hard: u64 = 1;
        let mut mean = 0.0f64;
        let mut var = 0.0f64;
        for c in &ctx.components {
            hard = hard.saturating_add(c.pairs.saturating_mul(pair_hard));
            let (pm, pv) = self.pair_moments(c.source, c.offset);
            let kq = c.pairs as f64 * c.phi;
            mean += kq * pm;
            var += kq * (pv + (1.0 - c.phi) * pm * pm);
        }
        if ctx.dropin_lambda > 0.0 {
            let lam = ctx.dropin_lambda;
            hard = hard
                .saturating_add(crate::spectral::poisson_support_bound(lam).saturating_mul(pair_hard));
            let (pm, pv) = self.dropin_moments(ctx.allele);
            mean += lam * pm;
            var += lam * (pv + pm * pm);
        }
        let noise_max = self.noise.max_count();
        hard = hard.saturating_add(noise_max);
        let effective = (mean + 48.0 * var.sqrt()).ceil() as u64 + noise_max + 16;
        let support = hard.min(effective).max(max_query_count + 2);
        crate::numeric::next_pow2(support) as u64
    }

    /// Composed PGF value of the total count at circle point `j`, minus
    /// the flat tail.
    fn composed_minus_flat(&mut self, ctx: &AlleleContext, j: u64, modulus: u64) -> Complex64 {
        let mut value = Complex64::new(1.0, 0.0);
        for c in &ctx.components {
            let g = if j == 0 {
                Complex64::new(1.0, 0.0)
            } else {
                self.circle_values(c.source, c.offset, modulus, j as usize)[j as usize - 1]
            };
            value *= crate::spectral::complex_powu(
                Complex64::new(1.0 - c.phi, 0.0) + c.phi * g,
                c.pairs,
            );
        }
        if ctx.dropin_lambda > 0.0 {
            let g = if j == 0 {
                Complex64::new(1.0, 0.0)
            } else {
                self.dropin_circle_values(ctx.allele, modulus, j as usize)[j as usize - 1]
            };
            value *= (ctx.dropin_lambda * (g - 1.0)).exp();
        }
        let noise_cf = self.noise.spectrum_at(j, modulus);
        value * noise_cf - self.flat(ctx) * noise_cf
    }

    /// Flat limit of the amplification part: full selection dropout times
    /// the empty drop-in class.
    fn flat(&self, ctx: &AlleleContext) -> f64 {
        let mut f = (-ctx.dropin_lambda).exp();
        for c in &ctx.components {
            f *= (1.0 - c.phi).powf(c.pairs as f64);
        }
        f
    }

    /// Exact mass of the count window `[lo, hi)` by an adaptive truncated
    /// contour sum.
    fn window_mass(&mut self, ctx: &AlleleContext, lo: u64, hi: u64) -> Result<f64, ContourError> {
        if hi <= lo {
            return Ok(0.0);
        }
        let modulus = self.modulus_for(ctx, hi);
        let flat = self.flat(ctx);
        // noise tail in closed form over the window
        let noise_tail: f64 = self
            .noise
            .atoms
            .iter()
            .filter(|&&(pos, _)| pos >= lo && pos < hi)
            .map(|&(_, w)| w)
            .sum();
        let kernel = |j: u64| -> Complex64 {
            contour::cumulative_kernel(modulus, j, hi - 1)
                - if lo == 0 {
                    Complex64::new(0.0, 0.0)
                } else {
                    contour::cumulative_kernel(modulus, j, lo - 1)
                }
        };
        let base = (self.composed_minus_flat(ctx, 0, modulus) * kernel(0)).re / modulus as f64
            + flat * noise_tail;
        let half = modulus / 2;
        let rtol = 1e-10;
        let mut acc = 0.0f64;
        let mut level_end = 256usize.min(half as usize);
        let mut j = 1u64;
        let mut prev: Option<f64> = None;
        let mut last_delta = f64::INFINITY;
        loop {
            let cover_all = level_end as u64 >= half - 1 || modulus <= 2;
            let top = if cover_all { half } else { level_end as u64 };
            while j <= top && j < modulus {
                let t = self.composed_minus_flat(ctx, j, modulus);
                if cover_all && j == half && modulus.is_multiple_of(2) {
                    acc += (t * kernel(j)).re / modulus as f64;
                } else {
                    acc += 2.0 * (t * kernel(j)).re / modulus as f64;
                }
                j += 1;
            }
            let value = base + acc;
            if cover_all {
                return Ok(value.max(0.0));
            }
            if let Some(p) = prev {
                last_delta = (value - p).abs();
                if last_delta < rtol {
                    return Ok(value.max(0.0));
                }
            }
            if level_end >= 1 << 22 {
                return Err(ContourError::NotConverged { terms: level_end, last_delta });
            }
            prev = Some(value);
            level_end = (level_end * 2).min(1 << 22);
        }
    }

    /// Log-likelihood factor of one allele's observation under a backend.
    pub fn peak_loglik(
        &mut self,
        ctx: &AlleleContext,
        model: PeakModel,
        obs: Observation,
    ) -> Result<f64, LikelihoodError> {
        let obs_key = match obs {
            Observation::Height(h) => ObsKey::Height(h),
            Observation::BelowThreshold => ObsKey::Below,
        };
        let key = QueryKey {
            allele: ctx.allele,
            ks: ctx.components.iter().map(|c| (c.offset, c.pairs)).collect(),
            obs: obs_key,
            model,
        };
        if let Some(&v) = self.query_cache.get(&key) {
            return Ok(v);
        }
        let value = if model.is_exact() {
            match obs {
                Observation::Height(h) => {
                    let (lo, hi) = rfu_to_amplicon_range(h, self.cfg.rho);
                    let mass = self.window_mass(ctx, lo, hi)?;
                    log_or_neg_inf(mass)
                }
                Observation::BelowThreshold => {
                    let (lo, _) = rfu_to_amplicon_range(self.cfg.analytic_threshold, self.cfg.rho);
                    let mass = if lo == 0 { 0.0 } else { self.window_mass(ctx, 0, lo)? };
                    log_or_neg_inf(mass)
                }
            }
        } else {
            let mix = self.moment_mixture(ctx, model)?;
            match obs {
                Observation::Height(h) => log_or_neg_inf(mix.pdf(h as f64)),
                Observation::BelowThreshold => {
                    log_or_neg_inf(mix.cdf_below(self.cfg.analytic_threshold as f64))
                }
            }
        };
        self.query_cache.insert(key, value);
        Ok(value)
    }

    /// CDF of the height strictly below `x` RFU.
    pub fn height_cdf_below(
        &mut self,
        ctx: &AlleleContext,
        model: PeakModel,
        x: u32,
    ) -> Result<f64, LikelihoodError> {
        let key = QueryKey {
            allele: ctx.allele,
            ks: ctx.components.iter().map(|c| (c.offset, c.pairs)).collect(),
            obs: ObsKey::CdfBelowHeight(x),
            model,
        };
        if let Some(&v) = self.query_cache.get(&key) {
            return Ok(v);
        }
        let value = if model.is_exact() {
            let (lo, _) = rfu_to_amplicon_range(x, self.cfg.rho);
            if lo == 0 {
                0.0
            } else {
                self.window_mass(ctx, 0, lo)?
            }
        } else {
            self.moment_mixture(ctx, model)?.cdf_below(x as f64)
        };
        self.query_cache.insert(key, value.clamp(0.0, 1.0));
        Ok(value.clamp(0.0, 1.0))
    }

    /// Moment-model mixture over per-piece dropout patterns, in RFU units.
    fn moment_mixture(
        &mut self,
        ctx: &AlleleContext,
        model: PeakModel,
    ) -> Result<MomentMixture, LikelihoodError> {
        let rho = self.cfg.rho;
        let mut pieces: Vec<(f64, f64, f64)> = Vec::new(); // (atom, mean+, var+)
        for c in &ctx.components {
            let (pm, pv) = self.pair_moments(c.source, c.offset);
            let kq = c.pairs as f64 * c.phi;
            let mean_u = kq * pm;
            let var_u = kq * (pv + (1.0 - c.phi) * pm * pm);
            let atom = (1.0 - c.phi).powf(c.pairs as f64);
            let q = 1.0 - atom;
            if q <= 0.0 {
                continue;
            }
            let mean_pos = mean_u / q;
            let e2_pos = (var_u + mean_u * mean_u) / q;
            let var_pos = (e2_pos - mean_pos * mean_pos).max(mean_pos * 1e-12);
            pieces.push((atom, mean_pos / rho, var_pos / (rho * rho)));
        }
        if ctx.dropin_lambda > 0.0 {
            let lam = ctx.dropin_lambda;
            let (pm, pv) = self.dropin_moments(ctx.allele);
            let mean_u = lam * pm;
            let var_u = lam * (pv + pm * pm);
            let atom = (-lam).exp();
            let q = 1.0 - atom;
            if q > 0.0 {
                let mean_pos = mean_u / q;
                let e2_pos = (var_u + mean_u * mean_u) / q;
                let var_pos = (e2_pos - mean_pos * mean_pos).max(mean_pos * 1e-12);
                pieces.push((atom, mean_pos / rho, var_pos / (rho * rho)));
            }
        }
        // enumerate dropout patterns of the pieces
        let mut patterns: Vec<(f64, f64, f64)> = vec![(1.0, 0.0, 0.0)]; // weight, sum mean, sum var
        for &(atom, m, v) in &pieces {
            let mut next = Vec::with_capacity(patterns.len() * 2);
            for &(w, sm, sv) in &patterns {
                next.push((w * atom, sm, sv));
                next.push((w * (1.0 - atom), sm + m, sv + v));
            }
            patterns = next;
        }
        let mut empty_weight = 0.0;
        let mut alive = Vec::new();
        for (w, m, v) in patterns {
            if m == 0.0 {
                empty_weight += w;
            } else {
                let d = moment_matched_density(m, v, model)?;
                alive.push((w, d));
            }
        }
        let noise_rfu: Vec<(u32, f64)> = self
            .noise
            .atoms
            .iter()
            .map(|&(pos, w)| (count_to_rfu(pos, rho), w))
            .collect();
        Ok(MomentMixture { empty_weight, alive, noise_rfu })
    }
}

// dropin_pair_model takes the locus by reference with the same lifetime
// conventions as the engine's own clone
fn a_locus(l: &KitLocus) -> KitLocus {
    l.clone()
}

fn log_or_neg_inf(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Mixture density of a moment backend: an all-dropped discrete part that
/// is pure noise, plus moment-matched continuous parts shifted by the
/// noise pmf.
pub struct MomentMixture {
    empty_weight: f64,
    alive: Vec<(f64, MomentDensity)>,
    noise_rfu: Vec<(u32, f64)>,
}

impl MomentMixture {
    /// Density at an observed height, with the all-dropped pattern
    /// contributing the noise pmf mass of the exact bin (one-RFU bins).
    pub fn pdf(&self, h: f64) -> f64 {
        let mut total = 0.0;
        for &(nu, w) in &self.noise_rfu {
            if (h - nu as f64).abs() < 0.5 {
                total += self.empty_weight * w;
            }
            for &(wc, d) in &self.alive {
                total += wc * w * d.pdf(h - nu as f64);
            }
        }
        total
    }

    /// Mass strictly below `x` RFU.
    pub fn cdf_below(&self, x: f64) -> f64 {
        let mut total = 0.0;
        for &(nu, w) in &self.noise_rfu {
            if (nu as f64) < x {
                total += self.empty_weight * w;
            }
            for &(wc, d) in &self.alive {
                total += wc * w * d.cdf(x - nu as f64);
            }
        }
        total
    }

    pub fn mean(&self) -> f64 {
        let noise_mean: f64 = self.noise_rfu.iter().map(|&(nu, w)| nu as f64 * w).sum();
        let alive_mean: f64 = self.alive.iter().map(|&(w, d)| w * d.mean()).sum();
        noise_mean + alive_mean
    }
}

// ---------------------------------------------------------------------------
// public per-allele distributions

/// A computed allele height distribution: an exact pmf over RFU bins, or
/// a mixed moment density.
pub enum HeightDist {
    Pmf(ProbVec),
    Mixed(MomentMixture),
}

impl HeightDist {
    pub fn mean(&self) -> f64 {
        match self {
            HeightDist::Pmf(p) => p.mean(),
            HeightDist::Mixed(m) => m.mean(),
        }
    }
}

/// Full height distribution of one allele context. The exact backends
/// return bin masses until the cumulative mass reaches `1 - 1e-10` (or
/// `max_rfu`); moment backends return the mixture density.
pub fn allele_height_dist(
    engine: &mut LocusEngine,
    ctx: &AlleleContext,
    model: PeakModel,
    max_rfu: u32,
) -> Result<HeightDist, LikelihoodError> {
    if model.is_exact() {
        let mut probs = Vec::new();
        let mut cum = 0.0;
        for r in 0..=max_rfu {
            let (lo, hi) = rfu_to_amplicon_range(r, engine.cfg.rho);
            let mass = engine.window_mass(ctx, lo, hi)?;
            probs.push(mass.max(0.0));
            cum += mass;
            if cum >= 1.0 - 1e-10 && r > 0 {
                break;
            }
        }
        Ok(HeightDist::Pmf(ProbVec::from_raw(probs).expect("window masses non-negative")))
    } else {
        Ok(HeightDist::Mixed(engine.moment_mixture(ctx, model)?))
    }
}

/// Distribution handle of a single component: the exact backend gives the
/// count distribution of `(1 - phi + phi G)^k`; moment backends give the
/// dropout atom plus conditional-positive moments (in counts).
pub enum ComponentDist {
    Counts(ProbVec),
    Moment { atom: f64, mean_pos: f64, var_pos: f64 },
}

pub fn allele_component_dist(
    engine: &mut LocusEngine,
    source: AlleleId,
    offset: i8,
    pairs: u64,
    phi: f64,
    model: PeakModel,
) -> Result<ComponentDist, LikelihoodError> {
    if pairs == 0 {
        return Ok(ComponentDist::Counts(ProbVec::delta(0, 1)));
    }
    if model.is_exact() {
        let allele = engine
            .locus
            .allele(source)
            .ok_or_else(|| LikelihoodError::UnknownAllele {
                locus: engine.locus.name.clone(),
                allele: source.to_string(),
            })?
            .clone();
        let params = engine.locus.genomic_params(&allele, engine.cfg.cycles, pairs, phi);
        let tracked = tracked_for_offset(offset);
        let mode = match engine.cfg.stutter {
            StutterMode::Full => StutterMode::Full,
            _ => tracked.minimal_mode(&params),
        };
        let d = crate::genomic::tagged_product_dist_with_budget(
            &params,
            mode,
            tracked,
            crate::amplicon::DEFAULT_MEMORY_BUDGET,
        )
        .map_err(LikelihoodError::Dist)?;
        Ok(ComponentDist::Counts(d))
    } else {
        let (pm, pv) = engine.pair_moments(source, offset);
        let kq = pairs as f64 * phi;
        let mean_u = kq * pm;
        let var_u = kq * (pv + (1.0 - phi) * pm * pm);
        let atom = (1.0 - phi).powf(pairs as f64);
        let q = 1.0 - atom;
        let mean_pos = if q > 0.0 { mean_u / q } else { 0.0 };
        let e2_pos = if q > 0.0 { (var_u + mean_u * mean_u) / q } else { 0.0 };
        Ok(ComponentDist::Moment {
            atom,
            mean_pos,
            var_pos: e2_pos - mean_pos * mean_pos,
        })
    }
}

// ---------------------------------------------------------------------------
// profile likelihood

/// Immutable inputs shared by all likelihood evaluations of one EPG.
pub struct Evaluation<'a> {
    pub kit: &'a Kit,
    pub freqs: &'a FrequencyTable,
    pub profiles: &'a [Profile],
    pub cfg: &'a SampleConfig,
}

/// Per-locus diagnostics of a profile log-likelihood.
#[derive(Clone, Debug)]
pub struct LocusLoglik {
    pub locus: String,
    pub loglik: f64,
    /// Alleles whose factor was exactly zero (reported as -inf).
    pub zero_alleles: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct ProfileLoglik {
    pub total: f64,
    pub per_locus: Vec<LocusLoglik>,
}

/// One-shot profile log-likelihood; builds a throwaway evaluator. Repeated
/// evaluations over the same EPG should hold a [`ProfileEvaluator`] to keep
/// its caches.
pub fn profile_loglik(
    ev: Evaluation<'_>,
    epg: &[EpgPeak],
    hyp: &crate::sample::Hypothesis,
    model: PeakModel,
) -> Result<ProfileLoglik, LikelihoodError> {
    ProfileEvaluator::new(ev, epg)?.loglik(hyp, model)
}

/// Mutable evaluation state: one engine per kit locus, with all caches.
pub struct ProfileEvaluator<'a> {
    pub ev: Evaluation<'a>,
    pub engines: Vec<LocusEngine>,
}

impl<'a> ProfileEvaluator<'a> {
    /// Groups the EPG by locus, censors below the analytic threshold and
    /// builds one engine per kit locus.
    pub fn new(ev: Evaluation<'a>, epg: &[EpgPeak]) -> Result<Self, LikelihoodError> {
        // every peak must land on a kit locus and a ladder allele, or its
        // evidence would silently vanish from the product
        for p in epg {
            let locus = ev.kit.locus(&p.locus).ok_or_else(|| {
                LikelihoodError::Sample(SampleError::UnknownLocus { locus: p.locus.clone() })
            })?;
            if locus.allele(p.allele).is_none() {
                return Err(LikelihoodError::Sample(SampleError::UnknownAllele {
                    locus: p.locus.clone(),
                    allele: p.allele.to_string(),
                }));
            }
        }
        // known profiles may only carry ladder alleles at kit loci
        for profile in ev.profiles {
            for locus in &ev.kit.loci {
                if let Some(g) = profile.genotypes.get(&locus.name) {
                    for id in [g.0, g.1] {
                        if locus.allele(id).is_none() {
                            return Err(LikelihoodError::Sample(SampleError::UnknownAllele {
                                locus: locus.name.clone(),
                                allele: format!("{} (profile {})", id, profile.id),
                            }));
                        }
                    }
                }
            }
        }
        let mut engines = Vec::new();
        for locus in &ev.kit.loci {
            let peaks: Vec<(AlleleId, u32)> = epg
                .iter()
                .filter(|p| p.locus == locus.name && p.height >= ev.cfg.analytic_threshold)
                .map(|p| (p.allele, p.height))
                .collect();
            engines.push(LocusEngine::new(locus, ev.cfg, peaks)?);
        }
        Ok(ProfileEvaluator { ev, engines })
    }

    /// Resolves each contributor's genotype at a locus: known profiles
    /// directly, untyped ones as None.
    fn known_genotypes(
        &self,
        hyp: &crate::sample::Hypothesis,
        locus: &str,
    ) -> Result<Vec<(Option<Genotype>, u64)>, LikelihoodError> {
        hyp.contributors
            .iter()
            .map(|c| match c {
                crate::sample::ContributorSpec::Known { profile, cells } => {
                    let p = self
                        .ev
                        .profiles
                        .iter()
                        .find(|p| &p.id == profile)
                        .ok_or_else(|| LikelihoodError::UnknownProfile { id: profile.clone() })?;
                    let g = p.genotypes.get(locus).ok_or_else(|| {
                        LikelihoodError::MissingGenotype {
                            profile: profile.clone(),
                            locus: locus.to_string(),
                        }
                    })?;
                    Ok((Some(*g), *cells))
                }
                crate::sample::ContributorSpec::Untyped { cells, .. } => Ok((None, *cells)),
            })
            .collect()
    }

    /// Genotype options for one untyped contributor at a locus.
    fn genotype_options(&self, locus: &KitLocus) -> Result<Vec<Genotype>, LikelihoodError> {
        if locus.is_amelogenin() {
            return Ok(vec![
                Genotype::new(AlleleId::X, AlleleId::X),
                Genotype::new(AlleleId::X, AlleleId::Y),
            ]);
        }
        let freqs = self.ev.freqs.per_locus.get(&locus.name).ok_or_else(|| {
            LikelihoodError::UnknownAllele { locus: locus.name.clone(), allele: "*".into() }
        })?;
        let ids: Vec<AlleleId> = freqs
            .probs
            .keys()
            .filter(|id| locus.allele(**id).is_some())
            .copied()
            .collect();
        let mut out = Vec::new();
        for (i, &a) in ids.iter().enumerate() {
            for &b in &ids[i..] {
                out.push(Genotype::new(a, b));
            }
        }
        Ok(out)
    }

    /// Changes the degradation rate in place, keeping the per-pair circle
    /// and moment caches (they do not depend on the selection probability)
    /// and clearing the memoized query factors.
    pub fn set_delta(&mut self, delta: f64) {
        for e in &mut self.engines {
            e.set_delta(delta);
        }
    }

    /// Log-likelihood of the EPG under a hypothesis and backend: product
    /// over loci of genotype-averaged per-allele factors. Loci evaluate
    /// independently and in parallel.
    pub fn loglik(
        &mut self,
        hyp: &crate::sample::Hypothesis,
        model: PeakModel,
    ) -> Result<ProfileLoglik, LikelihoodError> {
        use rayon::prelude::*;
        let untyped_count = hyp.contributors.iter().filter(|c| c.is_untyped()).count();
        if untyped_count > MAX_UNTYPED {
            return Err(LikelihoodError::TooManyUntyped { count: untyped_count, cap: MAX_UNTYPED });
        }
        let mut inputs = Vec::new();
        for engine in &self.engines {
            let assignments = self.known_genotypes(hyp, &engine.locus.name)?;
            let options = if untyped_count == 0 {
                Vec::new()
            } else {
                self.genotype_options(&engine.locus)?
            };
            let freqs = self.ev.freqs.per_locus.get(&engine.locus.name).cloned();
            inputs.push(LocusInput { assignments, options, freqs });
        }
        let theta = self.ev.cfg.theta;
        let results: Vec<Result<LocusLoglik, LikelihoodError>> = self
            .engines
            .par_iter_mut()
            .zip(inputs.into_par_iter())
            .map(|(engine, input)| locus_loglik(engine, &input, untyped_count, theta, model))
            .collect();
        let mut per_locus = Vec::new();
        let mut total = 0.0;
        for r in results {
            let ll = r?;
            total += ll.loglik;
            per_locus.push(ll);
        }
        Ok(ProfileLoglik { total, per_locus })
    }

    /// Conditional CDF of one observed peak given exceedance of the
    /// threshold and everything else fixed: for untyped hypotheses the
    /// genotype combinations are posterior-weighted by the other peaks of
    /// the locus.
    pub fn peak_conditional_cdf(
        &mut self,
        hyp: &crate::sample::Hypothesis,
        model: PeakModel,
        locus: &str,
        allele: AlleleId,
        height: u32,
    ) -> Result<f64, LikelihoodError> {
        let ei = self
            .engines
            .iter()
            .position(|e| e.locus.name == locus)
            .ok_or_else(|| LikelihoodError::Sample(SampleError::UnknownLocus {
                locus: locus.to_string(),
            }))?;
        let assignments = self.known_genotypes(hyp, locus)?;
        let untyped: Vec<usize> = hyp
            .contributors
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_untyped())
            .map(|(i, _)| i)
            .collect();
        let locus_obj = self.engines[ei].locus.clone();
        let options = if untyped.is_empty() {
            Vec::new()
        } else {
            self.genotype_options(&locus_obj)?
        };
        let amel = locus_obj.is_amelogenin();
        let theta = self.ev.cfg.theta;
        let threshold = self.ev.cfg.analytic_threshold;

        let mut combo = vec![0usize; untyped.len()];
        let mut weights: Vec<f64> = Vec::new();
        let mut cdf_parts: Vec<(f64, f64)> = Vec::new(); // (F(h), F(T))
        loop {
            let prior = if untyped.is_empty() {
                1.0
            } else if amel {
                (0.5f64).powi(untyped.len() as i32)
            } else {
                let freqs = self.ev.freqs.per_locus.get(&locus_obj.name).unwrap();
                let mut sampler = GenotypeSampler::new(freqs, theta);
                let mut pr = 1.0;
                for &opt in combo.iter() {
                    pr *= sampler.genotype_prob(options[opt]).unwrap_or(0.0);
                }
                pr
            };
            if prior > 0.0 {
                let mut pair_counts: BTreeMap<AlleleId, u64> = BTreeMap::new();
                let mut u_slot = 0usize;
                for &(g, cells) in assignments.iter() {
                    let genotype = match g {
                        Some(g) => g,
                        None => {
                            let g = options[combo[u_slot]];
                            u_slot += 1;
                            g
                        }
                    };
                    for id in [genotype.0, genotype.1] {
                        *pair_counts.entry(id).or_insert(0) += cells;
                    }
                }
                // posterior weight from the other observed factors
                let engine = &mut self.engines[ei];
                let included = engine.included_offsets(model);
                let peaks = engine.peaks.clone();
                let mut rest_ll = 0.0;
                for kit_allele in engine.locus.alleles.clone() {
                    if kit_allele.id == allele {
                        continue;
                    }
                    let offsets =
                        included.get(&kit_allele.id).cloned().unwrap_or_else(|| vec![0]);
                    let ctx = engine.context(kit_allele.id, &pair_counts, &offsets);
                    let obs = peaks
                        .iter()
                        .find(|&&(a, _)| a == kit_allele.id)
                        .map(|&(_, h)| Observation::Height(h))
                        .unwrap_or(Observation::BelowThreshold);
                    rest_ll += engine.peak_loglik(&ctx, model, obs)?;
                }
                let offsets = included.get(&allele).cloned().unwrap_or_else(|| vec![0]);
                let ctx = engine.context(allele, &pair_counts, &offsets);
                let f_h = engine.height_cdf_below(&ctx, model, height)?;
                let f_t = engine.height_cdf_below(&ctx, model, threshold)?;
                weights.push(prior.ln() + rest_ll);
                cdf_parts.push((f_h, f_t));
            }
            if untyped.is_empty() {
                break;
            }
            let opt_count = if amel { 2 } else { options.len() };
            let mut pos = 0;
            loop {
                combo[pos] += 1;
                if combo[pos] < opt_count {
                    break;
                }
                combo[pos] = 0;
                pos += 1;
                if pos == combo.len() {
                    break;
                }
            }
            if pos == combo.len() {
                break;
            }
        }
        // normalize posterior weights
        let wmax = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut num = 0.0;
        let mut den = 0.0;
        for (lw, (f_h, f_t)) in weights.iter().zip(cdf_parts.iter()) {
            let w = (lw - wmax).exp();
            num += w * (f_h - f_t).max(0.0);
            den += w * (1.0 - f_t).max(0.0);
        }
        if den <= 0.0 {
            return Ok(0.0);
        }
        Ok((num / den).clamp(0.0, 1.0))
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Per-locus inputs resolved before the parallel locus loop.
struct LocusInput {
    assignments: Vec<(Option<Genotype>, u64)>,
    options: Vec<Genotype>,
    freqs: Option<LocusFreqs>,
}

fn locus_loglik(
    engine: &mut LocusEngine,
    input: &LocusInput,
    untyped_count: usize,
    theta: f64,
    model: PeakModel,
) -> Result<LocusLoglik, LikelihoodError> {
    let amel = engine.locus.is_amelogenin();
    let options: &[Genotype] = if amel {
        &[
            Genotype(AlleleId::X, AlleleId::X),
            Genotype(AlleleId::X, AlleleId::Y),
        ]
    } else {
        &input.options
    };
    if untyped_count > 0 && options.is_empty() {
        return Err(LikelihoodError::UnknownAllele {
            locus: engine.locus.name.clone(),
            allele: "*".into(),
        });
    }
    let mut combo = vec![0usize; untyped_count];
    let mut log_terms: Vec<f64> = Vec::new();
    let mut zero_alleles: Vec<String> = Vec::new();
    loop {
        let prior = if untyped_count == 0 {
            1.0
        } else if amel {
            (0.5f64).powi(untyped_count as i32)
        } else {
            let freqs = input.freqs.as_ref().ok_or_else(|| LikelihoodError::UnknownAllele {
                locus: engine.locus.name.clone(),
                allele: "*".into(),
            })?;
            let mut sampler = GenotypeSampler::new(freqs, theta);
            let mut pr = 1.0;
            for &opt in combo.iter() {
                let g = options[opt];
                pr *= sampler.genotype_prob(g).ok_or_else(|| LikelihoodError::UnknownAllele {
                    locus: engine.locus.name.clone(),
                    allele: format!("{}", g.0),
                })?;
            }
            pr
        };
        if prior > 0.0 {
            let mut pair_counts: BTreeMap<AlleleId, u64> = BTreeMap::new();
            let mut u_slot = 0usize;
            for &(g, cells) in input.assignments.iter() {
                let genotype = match g {
                    Some(g) => g,
                    None => {
                        let g = options[combo[u_slot]];
                        u_slot += 1;
                        g
                    }
                };
                for id in [genotype.0, genotype.1] {
                    *pair_counts.entry(id).or_insert(0) += cells;
                }
            }
            let ll = combo_loglik(engine, &pair_counts, model, &mut zero_alleles)?;
            log_terms.push(prior.ln() + ll);
        }
        if untyped_count == 0 {
            break;
        }
        let mut pos = 0;
        loop {
            combo[pos] += 1;
            if combo[pos] < options.len() {
                break;
            }
            combo[pos] = 0;
            pos += 1;
            if pos == combo.len() {
                break;
            }
        }
        if pos == combo.len() {
            break;
        }
    }
    let loglik = if log_terms.is_empty() { f64::NEG_INFINITY } else { log_sum_exp(&log_terms) };
    Ok(LocusLoglik { locus: engine.locus.name.clone(), loglik, zero_alleles })
}

fn combo_loglik(
    engine: &mut LocusEngine,
    pair_counts: &BTreeMap<AlleleId, u64>,
    model: PeakModel,
    zero_alleles: &mut Vec<String>,
) -> Result<f64, LikelihoodError> {
    let included = engine.included_offsets(model);
    let allele_ids: Vec<AlleleId> = engine.locus.alleles.iter().map(|a| a.id).collect();
    let peaks = engine.peaks.clone();
    let mut ll = 0.0;
    for id in allele_ids {
        let offsets = included.get(&id).cloned().unwrap_or_else(|| vec![0]);
        let ctx = engine.context(id, pair_counts, &offsets);
        let obs = peaks
            .iter()
            .find(|&&(a, _)| a == id)
            .map(|&(_, h)| Observation::Height(h))
            .unwrap_or(Observation::BelowThreshold);
        let term = engine.peak_loglik(&ctx, model, obs)?;
        if term == f64::NEG_INFINITY {
            let tag = format!("{}:{}", engine.locus.name, id);
            if !zero_alleles.contains(&tag) {
                zero_alleles.push(tag);
            }
        }
        ll += term;
    }
    Ok(ll)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::{ContributorSpec, Hypothesis, KitAllele, StrandRates};

    fn freqs(entries: &[(&str, f64)]) -> LocusFreqs {
        LocusFreqs {
            probs: entries
                .iter()
                .map(|&(s, p)| (AlleleId::parse(s).unwrap(), p))
                .collect(),
        }
    }

    #[test]
    fn genotype_probability_hardy_weinberg() {
        let f = freqs(&[("10", 0.3), ("11", 0.7)]);
        let het = genotype_probability(
            Genotype::new(AlleleId::parse("10").unwrap(), AlleleId::parse("11").unwrap()),
            &f,
            0.0,
        )
        .unwrap();
        assert!((het - 2.0 * 0.3 * 0.7).abs() < 1e-15);
        let hom = genotype_probability(
            Genotype::new(AlleleId::parse("10").unwrap(), AlleleId::parse("10").unwrap()),
            &f,
            0.0,
        )
        .unwrap();
        assert!((hom - 0.09).abs() < 1e-15);
    }

    #[test]
    fn theta_correction_gives_homozygote_excess() {
        let f = freqs(&[("10", 0.3), ("11", 0.7)]);
        let g = Genotype::new(AlleleId::parse("10").unwrap(), AlleleId::parse("10").unwrap());
        let hom = genotype_probability(g, &f, 0.02).unwrap();
        assert!(hom > 0.09);
        // closed form: p (theta + (1-theta) p)
        let want = 0.3 * (0.02 + 0.98 * 0.3);
        assert!((hom - want).abs() < 1e-15);
    }

    #[test]
    fn sequential_sampling_is_exchangeable() {
        let f = freqs(&[("10", 0.2), ("11", 0.5), ("12", 0.3)]);
        let g1 = Genotype::new(AlleleId::parse("10").unwrap(), AlleleId::parse("11").unwrap());
        let g2 = Genotype::new(AlleleId::parse("12").unwrap(), AlleleId::parse("12").unwrap());
        let mut s12 = GenotypeSampler::new(&f, 0.03);
        let p12 = s12.genotype_prob(g1).unwrap() * s12.genotype_prob(g2).unwrap();
        let mut s21 = GenotypeSampler::new(&f, 0.03);
        let p21 = s21.genotype_prob(g2).unwrap() * s21.genotype_prob(g1).unwrap();
        assert!((p12 - p21).abs() < 1e-15);
    }

    #[test]
    fn moment_matching_families() {
        // gamma with mean 4 and variance 8 has shape 2, scale 2
        match moment_matched_density(4.0, 8.0, PeakModel::Gamma).unwrap() {
            MomentDensity::Gamma { shape, scale } => {
                assert!((shape - 2.0).abs() < 1e-12);
                assert!((scale - 2.0).abs() < 1e-12);
            }
            _ => unreachable!(),
        }
        // lognormal round-trip: analytic mean and variance reproduce inputs
        let d = moment_matched_density(120.0, 900.0, PeakModel::Lognormal).unwrap();
        assert!((d.mean() - 120.0).abs() < 1e-9);
        assert!((d.variance() - 900.0).abs() < 1e-6);
        // degenerate moments are rejected
        assert!(matches!(
            moment_matched_density(0.0, 1.0, PeakModel::Gamma),
            Err(LikelihoodError::NonPositiveMoments { .. })
        ));
    }

    fn two_allele_locus(p: f64, xi: f64) -> KitLocus {
        KitLocus {
            name: "L1".into(),
            dye: "blue".into(),
            repeat_bp: 4,
            rates: StrandRates::uniform(p),
            alleles: vec![
                KitAllele {
                    id: AlleleId::parse("9").unwrap(),
                    size_bp: 120.0,
                    xi_s: xi,
                    xi_r: 0.0,
                    xi_f: 0.0,
                    dropin_rate: 0.0,
                },
                KitAllele {
                    id: AlleleId::parse("10").unwrap(),
                    size_bp: 124.0,
                    xi_s: xi,
                    xi_r: 0.0,
                    xi_f: 0.0,
                    dropin_rate: 0.0,
                },
            ],
        }
    }

    fn base_cfg(cycles: u32, rho: f64, threshold: u32) -> SampleConfig {
        let mut cfg = SampleConfig::new(1.0, 1.0, cycles, rho, threshold);
        cfg.stutter = StutterMode::Single;
        cfg
    }

    #[test]
    fn mfft_inclusion_rule() {
        let locus = two_allele_locus(0.85, 0.004);
        // no peaks: stutter components dropped everywhere
        let inc = mfft_inclusion(&[], &locus, 30, 3.0);
        for offs in inc.values() {
            assert_eq!(offs, &vec![0]);
        }
        // source peak below three times the threshold is ignored,
        // inclusive at equality
        let a10 = AlleleId::parse("10").unwrap();
        let inc = mfft_inclusion(&[(a10, 89)], &locus, 30, 3.0);
        assert_eq!(inc[&AlleleId::parse("9").unwrap()], vec![0]);
        let inc = mfft_inclusion(&[(a10, 90)], &locus, 30, 3.0);
        assert_eq!(inc[&AlleleId::parse("9").unwrap()], vec![0, -1]);
    }

    #[test]
    fn dropout_only_below_threshold_mass() {
        // no noise, no drop-in, one contributor: the below-threshold factor
        // of an unobserved allele with k pairs is dominated by (1-phi)^k
        // when every selected pair amplifies beyond the threshold
        let locus = two_allele_locus(0.9, 0.0);
        let mut cfg = base_cfg(10, 4.0, 3);
        cfg.psi = 0.4;
        cfg.pi_f = 1.0;
        cfg.delta = 0.0;
        let mut engine = LocusEngine::new(&locus, &cfg, vec![]).unwrap();
        let phi = cfg.selection_probability(120.0);
        let k = 5u64;
        let mut counts = BTreeMap::new();
        counts.insert(AlleleId::parse("9").unwrap(), k);
        let ctx = engine.context(AlleleId::parse("9").unwrap(), &counts, &[0]);
        let got = engine
            .peak_loglik(&ctx, PeakModel::Fft, Observation::BelowThreshold)
            .unwrap();
        // P(below) = (1-phi)^k + P(selected but < 12 amplicons), second
        // term tiny at p = 0.9, K = 10 (mean ~ 1280)
        let want = (1.0 - phi).powi(k as i32);
        assert!((got.exp() - want).abs() < 1e-4, "{} vs {want}", got.exp());
    }

    #[test]
    fn exact_backend_matches_direct_convolution_at_unit_rho() {
        // xi = 0, phi = 1, rho = 1: the factorized exact backend must equal
        // the directly convolved count distribution
        let locus = two_allele_locus(0.8, 0.0);
        let mut cfg = base_cfg(6, 1.0, 1);
        cfg.stutter = StutterMode::None;
        let mut engine = LocusEngine::new(&locus, &cfg, vec![]).unwrap();
        let a9 = AlleleId::parse("9").unwrap();
        let k = 2u64;
        let mut counts = BTreeMap::new();
        counts.insert(a9, k);
        let ctx = engine.context(a9, &counts, &[0]);

        // oracle: per-pair count distribution convolved k times
        let allele = locus.allele(a9).unwrap().clone();
        let params = locus.genomic_params(&allele, cfg.cycles, 1, 1.0);
        let single = crate::genomic::tagged_dist(&params, StutterMode::None).unwrap();
        let mut direct = crate::spectral::ProbVec::delta(0, 1);
        for _ in 0..k {
            direct = crate::spectral::convolve(&direct, &single).unwrap();
        }
        for h in 0..direct.len() as u32 {
            let got = engine
                .peak_loglik(&ctx, PeakModel::Fft, Observation::Height(h))
                .unwrap();
            let want = direct.probs()[h as usize];
            if want > 1e-300 {
                assert!(
                    (got.exp() - want).abs() < 1e-9,
                    "h={h}: {} vs {want}",
                    got.exp()
                );
            }
        }
    }

    #[test]
    fn height_dist_sums_to_one_and_single_source_matches_component() {
        let locus = two_allele_locus(0.8, 0.0);
        let mut cfg = base_cfg(8, 2.0, 1);
        cfg.stutter = StutterMode::None;
        let mut engine = LocusEngine::new(&locus, &cfg, vec![]).unwrap();
        let a9 = AlleleId::parse("9").unwrap();
        let mut counts = BTreeMap::new();
        counts.insert(a9, 3u64);
        let ctx = engine.context(a9, &counts, &[0]);
        let dist = allele_height_dist(&mut engine, &ctx, PeakModel::Fft, 4000).unwrap();
        let pmf = match dist {
            HeightDist::Pmf(p) => p,
            _ => unreachable!(),
        };
        assert!((pmf.total_mass() - 1.0).abs() < 1e-8);

        // single source with no noise or drop-in: the height distribution
        // is the component distribution binned by rho
        let comp = allele_component_dist(&mut engine, a9, 0, 3, 1.0, PeakModel::Fft).unwrap();
        let counts_dist = match comp {
            ComponentDist::Counts(c) => c,
            _ => unreachable!(),
        };
        for (r, &mass) in pmf.probs().iter().enumerate() {
            let (lo, hi) = rfu_to_amplicon_range(r as u32, cfg.rho);
            let want: f64 = (lo..hi.min(counts_dist.len() as u64))
                .map(|m| counts_dist.probs()[m as usize])
                .sum();
            assert!((mass - want).abs() < 1e-9, "r={r}");
        }
    }

    #[test]
    fn all_components_empty_reduces_to_noise() {
        let locus = two_allele_locus(0.8, 0.0);
        let mut cfg = base_cfg(8, 10.0, 1);
        cfg.stutter = StutterMode::None;
        cfg.noise.per_dye.insert("blue".into(), vec![0.25, 0.5, 0.25]);
        let mut engine = LocusEngine::new(&locus, &cfg, vec![]).unwrap();
        let a9 = AlleleId::parse("9").unwrap();
        let counts = BTreeMap::new();
        let ctx = engine.context(a9, &counts, &[0]);
        for (h, want) in [(0u32, 0.25), (1, 0.5), (2, 0.25)] {
            let got = engine
                .peak_loglik(&ctx, PeakModel::Fft, Observation::Height(h))
                .unwrap();
            assert!((got.exp() - want).abs() < 1e-10, "h={h}");
        }
    }

    #[test]
    fn mean_is_monotone_in_copies() {
        let locus = two_allele_locus(0.85, 0.004);
        let cfg = base_cfg(10, 8.0, 1);
        let mut engine = LocusEngine::new(&locus, &cfg, vec![]).unwrap();
        let a9 = AlleleId::parse("9").unwrap();
        let mut last = 0.0;
        for k in [1u64, 2, 5, 9] {
            let mut counts = BTreeMap::new();
            counts.insert(a9, k);
            let ctx = engine.context(a9, &counts, &[0, -1]);
            let dist = allele_height_dist(&mut engine, &ctx, PeakModel::Fft, 100_000).unwrap();
            let mean = dist.mean();
            assert!(mean > last, "k={k}");
            last = mean;
        }
    }

    #[test]
    fn low_template_height_dist_is_multimodal() {
        // sparse selection: modes at zero, one and two selected pairs
        let locus = two_allele_locus(0.85, 0.0);
        let mut cfg = base_cfg(9, 4.0, 1);
        cfg.stutter = StutterMode::None;
        cfg.psi = 0.1;
        let mut engine = LocusEngine::new(&locus, &cfg, vec![]).unwrap();
        let a9 = AlleleId::parse("9").unwrap();
        let mut counts = BTreeMap::new();
        counts.insert(a9, 20u64);
        let ctx = engine.context(a9, &counts, &[0]);
        let dist = allele_height_dist(&mut engine, &ctx, PeakModel::Fft, 2000).unwrap();
        let pmf = match dist {
            HeightDist::Pmf(p) => p,
            _ => unreachable!(),
        };
        // count interior local maxima of the smoothed positive part
        let probs = pmf.probs();
        let mut modes = 0;
        for i in 2..probs.len().saturating_sub(2) {
            if probs[i] > 1e-9
                && probs[i] > probs[i - 1]
                && probs[i] > probs[i - 2]
                && probs[i] >= probs[i + 1]
                && probs[i] >= probs[i + 2]
            {
                modes += 1;
            }
        }
        assert!(modes >= 2, "modes={modes}");
    }

    #[test]
    fn moment_models_match_exact_at_high_template() {
        // large k, phi = 1: the count distribution is near-normal and all
        // backends should agree closely on an observed peak
        let locus = two_allele_locus(0.85, 0.0);
        let mut cfg = base_cfg(10, 16.0, 1);
        cfg.stutter = StutterMode::None;
        let mut engine = LocusEngine::new(&locus, &cfg, vec![]).unwrap();
        let a9 = AlleleId::parse("9").unwrap();
        let k = 200u64;
        let mut counts = BTreeMap::new();
        counts.insert(a9, k);
        let ctx = engine.context(a9, &counts, &[0]);
        let (pm, _) = engine.pair_moments(a9, 0);
        let mean_rfu = (k as f64 * pm / cfg.rho).round() as u32;
        let exact = engine
            .peak_loglik(&ctx, PeakModel::Fft, Observation::Height(mean_rfu))
            .unwrap();
        for model in [PeakModel::Normal, PeakModel::Lognormal, PeakModel::Gamma] {
            let got = engine.peak_loglik(&ctx, model, Observation::Height(mean_rfu)).unwrap();
            assert!((got - exact).abs() < 0.05, "{model}: {got} vs {exact}");
        }
    }

    #[test]
    fn profile_loglik_structure() {
        let locus = two_allele_locus(0.85, 0.0);
        let kit = Kit { loci: vec![locus] };
        let mut cfg = base_cfg(8, 2.0, 1);
        cfg.stutter = StutterMode::None;
        cfg.psi = 0.5;
        let mut freq_table = FrequencyTable::default();
        freq_table
            .per_locus
            .insert("L1".into(), freqs(&[("9", 0.4), ("10", 0.6)]));
        let mut profile = Profile { id: "P1".into(), genotypes: BTreeMap::new() };
        profile.genotypes.insert(
            "L1".into(),
            Genotype::new(AlleleId::parse("9").unwrap(), AlleleId::parse("10").unwrap()),
        );
        let profiles = vec![profile];
        let cfg2 = cfg.clone();
        let ev = Evaluation { kit: &kit, freqs: &freq_table, profiles: &profiles, cfg: &cfg2 };
        let epg = vec![
            EpgPeak { locus: "L1".into(), allele: AlleleId::parse("9").unwrap(), height: 60 },
        ];
        let mut evaluator = ProfileEvaluator::new(ev, &epg).unwrap();

        // known-only: no enumeration
        let hyp = Hypothesis {
            contributors: vec![ContributorSpec::Known { profile: "P1".into(), cells: 2 }],
        };
        let known = evaluator.loglik(&hyp, PeakModel::Fft).unwrap();
        assert!(known.total.is_finite());

        // one untyped contributor enumerates A(A+1)/2 = 3 genotypes and
        // still yields a finite value
        let hyp_u = Hypothesis {
            contributors: vec![ContributorSpec::Untyped { label: "U1".into(), cells: 2 }],
        };
        let unk = evaluator.loglik(&hyp_u, PeakModel::Fft).unwrap();
        assert!(unk.total.is_finite());

        // too many untyped contributors are rejected
        let hyp_many = Hypothesis {
            contributors: (0..4)
                .map(|i| ContributorSpec::Untyped { label: format!("U{i}"), cells: 1 })
                .collect(),
        };
        assert!(matches!(
            evaluator.loglik(&hyp_many, PeakModel::Fft),
            Err(LikelihoodError::TooManyUntyped { .. })
        ));
    }

    #[test]
    fn stray_evidence_is_rejected_not_dropped() {
        let locus = two_allele_locus(0.85, 0.0);
        let kit = Kit { loci: vec![locus] };
        let cfg = base_cfg(8, 2.0, 1);
        let freq_table = FrequencyTable::default();
        let profiles: Vec<crate::sample::Profile> = Vec::new();
        let ev = Evaluation { kit: &kit, freqs: &freq_table, profiles: &profiles, cfg: &cfg };

        // a peak at an allele outside the ladder
        let epg = vec![EpgPeak {
            locus: "L1".into(),
            allele: AlleleId::parse("14").unwrap(),
            height: 60,
        }];
        assert!(matches!(
            ProfileEvaluator::new(ev, &epg),
            Err(LikelihoodError::Sample(SampleError::UnknownAllele { .. }))
        ));

        // a peak at an unknown locus
        let ev = Evaluation { kit: &kit, freqs: &freq_table, profiles: &profiles, cfg: &cfg };
        let epg = vec![EpgPeak {
            locus: "NOPE".into(),
            allele: AlleleId::parse("9").unwrap(),
            height: 60,
        }];
        assert!(matches!(
            ProfileEvaluator::new(ev, &epg),
            Err(LikelihoodError::Sample(SampleError::UnknownLocus { .. }))
        ));

        // a known profile carrying an out-of-ladder allele
        let mut profile = crate::sample::Profile { id: "P1".into(), genotypes: BTreeMap::new() };
        profile.genotypes.insert(
            "L1".into(),
            Genotype::new(AlleleId::parse("9").unwrap(), AlleleId::parse("14").unwrap()),
        );
        let profiles = vec![profile];
        let ev = Evaluation { kit: &kit, freqs: &freq_table, profiles: &profiles, cfg: &cfg };
        assert!(matches!(
            ProfileEvaluator::new(ev, &[]),
            Err(LikelihoodError::Sample(SampleError::UnknownAllele { .. }))
        ));
    }

    #[test]
    fn mfft_equals_fft_when_sources_loud_and_stutterless_when_silent() {
        let locus = two_allele_locus(0.85, 0.02);
        let mut cfg = base_cfg(10, 8.0, 10);
        cfg.psi = 0.8;
        let a9 = AlleleId::parse("9").unwrap();
        let a10 = AlleleId::parse("10").unwrap();
        let mut counts = BTreeMap::new();
        counts.insert(a9, 3u64);
        counts.insert(a10, 3u64);

        // a loud source peak at allele 10 (>= 3x threshold): allele 9's
        // mFFT context includes the stutter component, same as FFT
        let peaks = vec![(a10, 200u32)];
        let mut engine = LocusEngine::new(&locus, &cfg, peaks).unwrap();
        let inc = engine.included_offsets(PeakModel::Mfft);
        assert_eq!(inc[&a9], vec![0, -1]);
        let ctx_m = engine.context(a9, &counts, &inc[&a9]);
        let inc_f = engine.included_offsets(PeakModel::Fft);
        let ctx_f = engine.context(a9, &counts, &inc_f[&a9]);
        let m = engine.peak_loglik(&ctx_m, PeakModel::Mfft, Observation::Height(40)).unwrap();
        let f = engine.peak_loglik(&ctx_f, PeakModel::Fft, Observation::Height(40)).unwrap();
        assert!((m - f).abs() < 1e-12);

        // no source peak: the mFFT context drops the stutter component
        let engine = LocusEngine::new(&locus, &cfg, vec![]).unwrap();
        let inc = engine.included_offsets(PeakModel::Mfft);
        assert_eq!(inc[&a9], vec![0]);
    }

    #[test]
    fn loglik_invariant_to_locus_and_contributor_order() {
        let mut locus_a = two_allele_locus(0.85, 0.0);
        locus_a.name = "LA".into();
        let mut locus_b = two_allele_locus(0.8, 0.0);
        locus_b.name = "LB".into();
        let mut cfg = base_cfg(8, 2.0, 1);
        cfg.stutter = StutterMode::None;
        cfg.psi = 0.6;
        let mut freq_table = FrequencyTable::default();
        for l in ["LA", "LB"] {
            freq_table.per_locus.insert(l.into(), freqs(&[("9", 0.4), ("10", 0.6)]));
        }
        let mut p1 = Profile { id: "P1".into(), genotypes: BTreeMap::new() };
        let mut p2 = Profile { id: "P2".into(), genotypes: BTreeMap::new() };
        for l in ["LA", "LB"] {
            p1.genotypes.insert(
                l.into(),
                Genotype::new(AlleleId::parse("9").unwrap(), AlleleId::parse("9").unwrap()),
            );
            p2.genotypes.insert(
                l.into(),
                Genotype::new(AlleleId::parse("10").unwrap(), AlleleId::parse("10").unwrap()),
            );
        }
        let profiles = vec![p1, p2];
        let epg = vec![
            EpgPeak { locus: "LA".into(), allele: AlleleId::parse("9").unwrap(), height: 35 },
            EpgPeak { locus: "LB".into(), allele: AlleleId::parse("10").unwrap(), height: 20 },
        ];
        let kit_ab = Kit { loci: vec![locus_a.clone(), locus_b.clone()] };
        let kit_ba = Kit { loci: vec![locus_b, locus_a] };
        let hyp = Hypothesis {
            contributors: vec![
                ContributorSpec::Known { profile: "P1".into(), cells: 2 },
                ContributorSpec::Known { profile: "P2".into(), cells: 3 },
            ],
        };
        let hyp_swapped = Hypothesis {
            contributors: vec![
                ContributorSpec::Known { profile: "P2".into(), cells: 3 },
                ContributorSpec::Known { profile: "P1".into(), cells: 2 },
            ],
        };
        let cfg2 = cfg.clone();
        let ev1 =
            Evaluation { kit: &kit_ab, freqs: &freq_table, profiles: &profiles, cfg: &cfg2 };
        let mut e1 = ProfileEvaluator::new(ev1, &epg).unwrap();
        let l1 = e1.loglik(&hyp, PeakModel::Gamma).unwrap().total;
        let ev2 =
            Evaluation { kit: &kit_ba, freqs: &freq_table, profiles: &profiles, cfg: &cfg2 };
        let mut e2 = ProfileEvaluator::new(ev2, &epg).unwrap();
        let l2 = e2.loglik(&hyp_swapped, PeakModel::Gamma).unwrap().total;
        assert!((l1 - l2).abs() < 1e-10);
    }
}
