//! The forensic data model: typing kits, contributor genotypes, extraction
//! and degradation, drop-in, RFU scaling and baseline noise.
//!
//! Everything here is immutable after loading; the likelihood and the
//! simulator consume the same structures so no simulation-only parameters
//! can exist.

use crate::genomic::{GenomicParams, StutterAmpOverrides};
use crate::spectral::{self, ProbVec};
use num_complex::Complex64;
use std::collections::BTreeMap;
use std::fmt;

/// Allele designation: repeat count with optional partial repeat (for
/// example `9.3`), or the Amelogenin X/Y pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AlleleId {
    X,
    Y,
    Repeat { units: u16, partial: u8 },
}

impl AlleleId {
    pub fn parse(s: &str) -> Option<AlleleId> {
        match s {
            "X" | "x" => return Some(AlleleId::X),
            "Y" | "y" => return Some(AlleleId::Y),
            _ => {}
        }
        let mut parts = s.splitn(2, '.');
        let units: u16 = parts.next()?.parse().ok()?;
        match parts.next() {
            None => Some(AlleleId::Repeat { units, partial: 0 }),
            Some(p) if p.len() == 1 => {
                let partial: u8 = p.parse().ok()?;
                if partial == 0 {
                    return None;
                }
                Some(AlleleId::Repeat { units, partial })
            }
            Some(_) => None,
        }
    }

    /// Shifts the designation by whole repeat units; partial repeats are
    /// preserved (`9.3 -> 8.3`), sex markers never shift (but a zero
    /// offset is always the identity).
    pub fn offset_by(self, delta: i8) -> Option<AlleleId> {
        if delta == 0 {
            return Some(self);
        }
        match self {
            AlleleId::Repeat { units, partial } => {
                let shifted = units as i32 + delta as i32;
                if shifted < 1 {
                    None
                } else {
                    Some(AlleleId::Repeat { units: shifted as u16, partial })
                }
            }
            _ => None,
        }
    }
}

impl fmt::Display for AlleleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlleleId::X => write!(f, "X"),
            AlleleId::Y => write!(f, "Y"),
            AlleleId::Repeat { units, partial: 0 } => write!(f, "{units}"),
            AlleleId::Repeat { units, partial } => write!(f, "{units}.{partial}"),
        }
    }
}

/// Per-strand amplification probabilities of one locus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrandRates {
    pub p_g: f64,
    pub p_gd: f64,
    pub p_h: f64,
    pub p_hd: f64,
    pub p_a: f64,
    pub p_ad: f64,
}

impl StrandRates {
    pub fn uniform(p: f64) -> Self {
        StrandRates { p_g: p, p_gd: p, p_h: p, p_hd: p, p_a: p, p_ad: p }
    }
}

/// One allele of a kit locus: designation, fragment size, conditional
/// stutter probabilities at the three allowed offsets, and its drop-in
/// rate.
#[derive(Clone, Debug, PartialEq)]
pub struct KitAllele {
    pub id: AlleleId,
    pub size_bp: f64,
    pub xi_s: f64,
    pub xi_r: f64,
    pub xi_f: f64,
    pub dropin_rate: f64,
}

/// A kit locus: alleles with sizes and stutter rates, its dye lane and
/// strand amplification probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct KitLocus {
    pub name: String,
    pub dye: String,
    /// Repeat unit length in base pairs.
    pub repeat_bp: u32,
    pub rates: StrandRates,
    pub alleles: Vec<KitAllele>,
}

impl KitLocus {
    pub fn allele(&self, id: AlleleId) -> Option<&KitAllele> {
        self.alleles.iter().find(|a| a.id == id)
    }

    pub fn is_amelogenin(&self) -> bool {
        self.name.eq_ignore_ascii_case("amelogenin") || self.name.eq_ignore_ascii_case("amel")
    }

    /// Effective stutter probability from `source` at the given repeat
    /// offset: zero when the destination designation is not in the allelic
    /// range, and always zero for Amelogenin.
    pub fn effective_xi(&self, source: &KitAllele, offset: i8) -> f64 {
        if self.is_amelogenin() {
            return 0.0;
        }
        let dest = match source.id.offset_by(offset) {
            Some(d) => d,
            None => return 0.0,
        };
        if self.allele(dest).is_none() {
            return 0.0;
        }
        match offset {
            -1 => source.xi_s,
            -2 => source.xi_r,
            1 => source.xi_f,
            _ => 0.0,
        }
    }

    /// Genomic branching parameters for products of one allele of this
    /// locus, with the stutter rates already restricted to in-range
    /// destinations.
    pub fn genomic_params(
        &self,
        allele: &KitAllele,
        cycles: u32,
        pairs: u64,
        phi: f64,
    ) -> GenomicParams {
        GenomicParams {
            p_g: self.rates.p_g,
            p_gd: self.rates.p_gd,
            p_h: self.rates.p_h,
            p_hd: self.rates.p_hd,
            p_a: self.rates.p_a,
            p_ad: self.rates.p_ad,
            xi_s: self.effective_xi(allele, -1),
            xi_r: self.effective_xi(allele, -2),
            xi_f: self.effective_xi(allele, 1),
            cycles,
            pairs,
            phi,
            overrides: StutterAmpOverrides::default(),
        }
    }
}

/// A typing kit: the ordered locus list.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Kit {
    pub loci: Vec<KitLocus>,
}

impl Kit {
    pub fn locus(&self, name: &str) -> Option<&KitLocus> {
        self.loci.iter().find(|l| l.name == name)
    }
}

/// An unordered genotype; construction normalizes the order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Genotype(pub AlleleId, pub AlleleId);

impl Genotype {
    pub fn new(a: AlleleId, b: AlleleId) -> Self {
        if a <= b {
            Genotype(a, b)
        } else {
            Genotype(b, a)
        }
    }

    /// Copy count of an allele in this genotype: 0, 1 or 2.
    pub fn copies(&self, id: AlleleId) -> u64 {
        (self.0 == id) as u64 + (self.1 == id) as u64
    }
}

/// A reference profile: genotypes per locus.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Profile {
    pub id: String,
    pub genotypes: BTreeMap<String, Genotype>,
}

/// One hypothesised contributor: a typed reference or an untyped person
/// whose genotypes are summed over.
#[derive(Clone, Debug, PartialEq)]
pub enum ContributorSpec {
    Known { profile: String, cells: u64 },
    Untyped { label: String, cells: u64 },
}

impl ContributorSpec {
    pub fn cells(&self) -> u64 {
        match self {
            ContributorSpec::Known { cells, .. } => *cells,
            ContributorSpec::Untyped { cells, .. } => *cells,
        }
    }

    pub fn set_cells(&mut self, c: u64) {
        match self {
            ContributorSpec::Known { cells, .. } => *cells = c,
            ContributorSpec::Untyped { cells, .. } => *cells = c,
        }
    }

    pub fn label(&self) -> &str {
        match self {
            ContributorSpec::Known { profile, .. } => profile,
            ContributorSpec::Untyped { label, .. } => label,
        }
    }

    pub fn is_untyped(&self) -> bool {
        matches!(self, ContributorSpec::Untyped { .. })
    }
}

/// The contributor set under one hypothesis.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Hypothesis {
    pub contributors: Vec<ContributorSpec>,
}

/// Per-dye baseline noise pmfs over RFU values `0..=w`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NoiseModel {
    pub per_dye: BTreeMap<String, Vec<f64>>,
}

impl NoiseModel {
    /// The noise pmf for a dye; absent dyes mean noise-free (a point mass
    /// at zero).
    pub fn pmf(&self, dye: &str) -> Vec<f64> {
        self.per_dye.get(dye).cloned().unwrap_or_else(|| vec![1.0])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropinMode {
    /// Drop-in material enters as genome pairs (the default).
    Genomic,
    /// Drop-in material enters as amplicon pairs.
    Amplicon,
}

/// Sample-level configuration shared by likelihood evaluation and
/// simulation.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    /// Extraction efficiency.
    pub psi: f64,
    /// Aliquot fraction taken for amplification.
    pub pi_f: f64,
    /// Degradation rate per base pair.
    pub delta: f64,
    pub cycles: u32,
    /// Tagged amplicons per RFU.
    pub rho: f64,
    /// Censoring threshold in RFU.
    pub analytic_threshold: u32,
    /// Population substructure correction.
    pub theta: f64,
    pub dropin_mode: DropinMode,
    /// Which stutter products the model carries.
    pub stutter: crate::genomic::StutterMode,
    pub noise: NoiseModel,
}

impl SampleConfig {
    pub fn new(psi: f64, pi_f: f64, cycles: u32, rho: f64, threshold: u32) -> Self {
        assert!((0.0..=1.0).contains(&psi));
        assert!((0.0..=1.0).contains(&pi_f));
        assert!(rho > 0.0);
        SampleConfig {
            psi,
            pi_f,
            delta: 0.0,
            cycles,
            rho,
            analytic_threshold: threshold,
            theta: 0.0,
            dropin_mode: DropinMode::Genomic,
            stutter: crate::genomic::StutterMode::None,
            noise: NoiseModel::default(),
        }
    }

    /// Binomial selection probability of one genome pair of fragment size
    /// `size_bp`: extraction, aliquot fraction and exponential
    /// degradation.
    pub fn selection_probability(&self, size_bp: f64) -> f64 {
        self.psi * self.pi_f * (-self.delta * size_bp).exp()
    }
}

/// One retained electropherogram peak.
#[derive(Clone, Debug, PartialEq)]
pub struct EpgPeak {
    pub locus: String,
    pub allele: AlleleId,
    pub height: u32,
}

/// How degradation breaks a genome pair before extraction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExtractionVariant {
    /// No breakage model: selection is the bare extraction probability.
    None,
    /// One Poisson break process severs both strands together.
    JointBreak { lambda: f64 },
    /// Each complementary strand breaks independently.
    IndependentBreaks { lambda: f64, lambda_d: f64 },
}

/// The two-argument extraction PGF `E_x(t_g, t_gd)` for one genome pair.
#[derive(Clone, Copy, Debug)]
pub struct ExtractionPgf {
    pub variant: ExtractionVariant,
    pub pi_e: f64,
}

impl ExtractionPgf {
    pub fn eval(&self, t_g: Complex64, t_gd: Complex64) -> Complex64 {
        let pi = self.pi_e;
        match self.variant {
            ExtractionVariant::None => 1.0 - pi + pi * t_g * t_gd,
            ExtractionVariant::JointBreak { lambda } => {
                1.0 - pi * lambda + pi * lambda * t_g * t_gd
            }
            ExtractionVariant::IndependentBreaks { lambda, lambda_d } => {
                let intact = 1.0 - (1.0 - lambda) * (1.0 - lambda_d);
                Complex64::new(1.0 - pi * intact, 0.0)
                    + pi * (1.0 - lambda + lambda * t_g) * (1.0 - lambda_d + lambda_d * t_gd)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SampleError {
    MissingNoiseModel { dye: String },
    UnknownLocus { locus: String },
    UnknownAllele { locus: String, allele: String },
}

impl fmt::Display for SampleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleError::MissingNoiseModel { dye } => write!(f, "no noise model for dye {dye}"),
            SampleError::UnknownLocus { locus } => write!(f, "unknown locus {locus}"),
            SampleError::UnknownAllele { locus, allele } => {
                write!(f, "unknown allele {allele} at locus {locus}")
            }
        }
    }
}

impl std::error::Error for SampleError {}

/// Count range `[lo, hi)` of tagged amplicons reading as RFU value `r`:
/// nearest-integer binning, so every count maps to exactly one RFU value.
pub fn rfu_to_amplicon_range(r: u32, rho: f64) -> (u64, u64) {
    (bin_floor(r, rho), bin_floor(r + 1, rho))
}

/// First count belonging to RFU bin `r`.
fn bin_floor(r: u32, rho: f64) -> u64 {
    if r == 0 {
        return 0;
    }
    (rho * (r as f64 - 0.5)).ceil() as u64
}

/// RFU value a tagged-amplicon count reads as.
pub fn count_to_rfu(m: u64, rho: f64) -> u32 {
    (m as f64 / rho + 0.5).floor() as u32
}

/// Baseline noise re-indexed to the tagged-amplicon lattice: RFU bin `j`
/// becomes a point mass at count `round(j rho)`. Kept sparse because rho
/// is typically large.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NoiseCounts {
    pub atoms: Vec<(u64, f64)>,
}

impl NoiseCounts {
    /// Characteristic value at the root of unity `e^{-2 pi i j / N}`.
    pub fn spectrum_at(&self, j: u64, modulus: u64) -> Complex64 {
        self.atoms
            .iter()
            .map(|&(pos, w)| w * crate::contour::phase(modulus, (j as u128) * (pos as u128)).conj())
            .sum()
    }

    pub fn pmf_at(&self, count: u64) -> f64 {
        self.atoms
            .iter()
            .filter(|&&(pos, _)| pos == count)
            .map(|&(_, w)| w)
            .sum()
    }

    pub fn cdf_through(&self, count: u64) -> f64 {
        self.atoms
            .iter()
            .filter(|&&(pos, _)| pos <= count)
            .map(|&(_, w)| w)
            .sum()
    }

    pub fn max_count(&self) -> u64 {
        self.atoms.iter().map(|&(pos, _)| pos).max().unwrap_or(0)
    }

    /// Dense distribution over counts, for small lattices.
    pub fn to_prob_vec(&self) -> ProbVec {
        let len = self.max_count() as usize + 1;
        let mut probs = vec![0.0; len];
        for &(pos, w) in &self.atoms {
            probs[pos as usize] += w;
        }
        ProbVec::from_raw(probs).expect("noise pmf non-negative")
    }
}

/// The dye's noise pmf lifted to the count lattice.
pub fn noise_pgf(cfg: &SampleConfig, dye: &str) -> Result<NoiseCounts, SampleError> {
    if !cfg.noise.per_dye.is_empty() && !cfg.noise.per_dye.contains_key(dye) {
        return Err(SampleError::MissingNoiseModel { dye: dye.to_string() });
    }
    let pmf = cfg.noise.pmf(dye);
    let atoms = pmf
        .iter()
        .enumerate()
        .filter(|&(_, &w)| w > 0.0)
        .map(|(j, &w)| ((j as f64 * cfg.rho).round() as u64, w))
        .collect();
    Ok(NoiseCounts { atoms })
}

/// Distribution of tagged amplicons produced by drop-in at one allele:
/// a Poisson number of genome pairs (or amplicon pairs), each amplified
/// with the allele's branching parameters and no stutter output tracked.
pub fn dropin_dist(
    locus: &KitLocus,
    allele: &KitAllele,
    cfg: &SampleConfig,
) -> Result<ProbVec, crate::amplicon::DistError> {
    let lambda = allele.dropin_rate;
    let params = locus.genomic_params(allele, cfg.cycles, 1, 1.0);
    let model = dropin_pair_model(locus, allele, cfg);
    let support = match cfg.dropin_mode {
        DropinMode::Genomic => params.support_bound(),
        DropinMode::Amplicon => 2u64 << cfg.cycles,
    };
    let bound = spectral::poisson_support_bound(lambda).saturating_mul(support.max(2));
    let n = crate::numeric::next_pow2(bound.min(1 << 24));
    let values: Vec<Complex64> = (0..n as u64)
        .map(|j| {
            let f = model.eval(j, n as u64);
            (lambda * (f - 1.0)).exp()
        })
        .collect();
    let full = spectral::inverse_dft(&spectral::SpectralVec::from_values(values))?;
    Ok(full)
}

/// Per-pair tagged-product model used for drop-in; stutter products of
/// drop-in strands are ignored, so the target kind is tracked with the
/// allele's stutter losses in place.
pub fn dropin_pair_model(
    locus: &KitLocus,
    allele: &KitAllele,
    cfg: &SampleConfig,
) -> crate::contour::ScalarModel {
    use crate::genomic::{StrandKind, TrackedProduct};
    let params = locus.genomic_params(allele, cfg.cycles, 1, 1.0);
    match cfg.dropin_mode {
        DropinMode::Genomic => {
            let mode = TrackedProduct::Target.minimal_mode(&params);
            params.scalar_model(mode, TrackedProduct::Target)
        }
        DropinMode::Amplicon => {
            // a dropped-in amplicon pair: seeds are the two amplicon
            // strands rather than the genomic pair
            let mode = TrackedProduct::Target.minimal_mode(&params);
            let sys = params.system(mode);
            let seeds = vec![
                mode.kind_index(StrandKind::A).unwrap(),
                mode.kind_index(StrandKind::Ad).unwrap(),
            ];
            let tracked = mode.kind_index(StrandKind::Ad).unwrap();
            crate::contour::ScalarModel::new(sys, seeds, tracked, cfg.cycles)
        }
    }
}
