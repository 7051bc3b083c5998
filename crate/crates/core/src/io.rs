//! Line-oriented file formats: kit, allele frequencies, reference
//! profiles, baseline noise, EPG peaks and hypotheses.
//!
//! Every file starts with a `#format:<name>:<version>` line; later `#`
//! lines are comments. Writers emit shortest-round-trip float text, so
//! `load(write(x)) == x` holds bit-exactly for every format.

use crate::likelihood::{FrequencyTable, LocusFreqs};
use crate::sample::{
    AlleleId, ContributorSpec, EpgPeak, Genotype, Hypothesis, Kit, KitAllele, KitLocus,
    NoiseModel, Profile, StrandRates,
};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

/// Counts below this are raised before normalizing a counts-based
/// frequency table.
pub const MIN_ALLELE_COUNT: f64 = 5.0;

#[derive(Debug)]
pub enum IoError {
    Io(std::io::Error),
    Parse { line: usize, column: usize, message: String },
    Validation(String),
}

impl fmt::Display for IoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IoError::Io(e) => write!(f, "{e}"),
            IoError::Parse { line, column, message } => {
                write!(f, "parse error at line {line}, field {column}: {message}")
            }
            IoError::Validation(m) => write!(f, "validation error: {m}"),
        }
    }
}

impl std::error::Error for IoError {}

impl From<std::io::Error> for IoError {
    fn from(e: std::io::Error) -> Self {
        IoError::Io(e)
    }
}

fn parse_err(line: usize, column: usize, message: impl Into<String>) -> IoError {
    IoError::Parse { line, column, message: message.into() }
}

/// Iterates data rows of a format file, checking the header line.
fn data_rows<'a>(text: &'a str, format: &str) -> Result<Vec<(usize, Vec<&'a str>)>, IoError> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| parse_err(1, 0, "empty file"))?;
    let want = format!("#format:{format}:1");
    if first.trim() != want {
        return Err(parse_err(1, 0, format!("expected header {want:?}, found {first:?}")));
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        rows.push((idx + 1, line.split(',').map(|f| f.trim()).collect()));
    }
    Ok(rows)
}

fn field<'a>(row: &[&'a str], line: usize, idx: usize) -> Result<&'a str, IoError> {
    row.get(idx)
        .copied()
        .ok_or_else(|| parse_err(line, idx + 1, "missing field"))
}

fn parse_f64(row: &[&str], line: usize, idx: usize) -> Result<f64, IoError> {
    let s = field(row, line, idx)?;
    s.parse()
        .map_err(|_| parse_err(line, idx + 1, format!("invalid number {s:?}")))
}

fn parse_u64(row: &[&str], line: usize, idx: usize) -> Result<u64, IoError> {
    let s = field(row, line, idx)?;
    s.parse()
        .map_err(|_| parse_err(line, idx + 1, format!("invalid integer {s:?}")))
}

fn parse_allele(row: &[&str], line: usize, idx: usize) -> Result<AlleleId, IoError> {
    let s = field(row, line, idx)?;
    AlleleId::parse(s).ok_or_else(|| parse_err(line, idx + 1, format!("invalid allele designation {s:?}")))
}

fn prob_field(row: &[&str], line: usize, idx: usize, name: &str) -> Result<f64, IoError> {
    let v = parse_f64(row, line, idx)?;
    if !(0.0..=1.0).contains(&v) {
        return Err(IoError::Validation(format!("{name} {v} outside [0,1] at line {line}")));
    }
    Ok(v)
}

// ---------------------------------------------------------------------------
// kit

pub fn parse_kit(text: &str) -> Result<Kit, IoError> {
    let mut loci: Vec<KitLocus> = Vec::new();
    for (line, row) in data_rows(text, "kit")? {
        let name = field(&row, line, 0)?.to_string();
        let dye = field(&row, line, 1)?.to_string();
        let repeat_bp = parse_u64(&row, line, 2)? as u32;
        let rates = StrandRates {
            p_g: prob_field(&row, line, 3, "p_g")?,
            p_gd: prob_field(&row, line, 4, "p_gd")?,
            p_h: prob_field(&row, line, 5, "p_h")?,
            p_hd: prob_field(&row, line, 6, "p_hd")?,
            p_a: prob_field(&row, line, 7, "p_a")?,
            p_ad: prob_field(&row, line, 8, "p_ad")?,
        };
        let allele = KitAllele {
            id: parse_allele(&row, line, 9)?,
            size_bp: parse_f64(&row, line, 10)?,
            xi_s: prob_field(&row, line, 11, "xi_s")?,
            xi_r: prob_field(&row, line, 12, "xi_r")?,
            xi_f: prob_field(&row, line, 13, "xi_f")?,
            dropin_rate: parse_f64(&row, line, 14)?,
        };
        if allele.size_bp <= 0.0 {
            return Err(IoError::Validation(format!(
                "allele size must be positive at line {line}"
            )));
        }
        if allele.xi_s + allele.xi_r + allele.xi_f > 1.0 {
            return Err(IoError::Validation(format!(
                "stutter probabilities sum above 1 at line {line}"
            )));
        }
        if allele.dropin_rate < 0.0 {
            return Err(IoError::Validation(format!(
                "negative drop-in rate at line {line}"
            )));
        }
        match loci.iter_mut().find(|l| l.name == name) {
            Some(locus) => {
                if locus.dye != dye || locus.repeat_bp != repeat_bp || locus.rates != rates {
                    return Err(IoError::Validation(format!(
                        "locus {name} repeated with inconsistent fields at line {line}"
                    )));
                }
                if locus.alleles.iter().any(|a| a.id == allele.id) {
                    return Err(IoError::Validation(format!(
                        "duplicate allele {} at locus {name}",
                        allele.id
                    )));
                }
                locus.alleles.push(allele);
            }
            None => loci.push(KitLocus { name, dye, repeat_bp, rates, alleles: vec![allele] }),
        }
    }
    let kit = Kit { loci };
    for locus in &kit.loci {
        if locus.is_amelogenin() {
            for a in &locus.alleles {
                if a.xi_s != 0.0 || a.xi_r != 0.0 || a.xi_f != 0.0 {
                    return Err(IoError::Validation(format!(
                        "Amelogenin does not form stutters; allele {} carries stutter rates",
                        a.id
                    )));
                }
            }
        }
    }
    Ok(kit)
}

pub fn write_kit(kit: &Kit) -> String {
    let mut out = String::from("#format:kit:1\n");
    out.push_str("# locus,dye,repeat_bp,p_g,p_gd,p_h,p_hd,p_a,p_ad,allele,size_bp,xi_s,xi_r,xi_f,dropin\n");
    for l in &kit.loci {
        for a in &l.alleles {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                l.name,
                l.dye,
                l.repeat_bp,
                l.rates.p_g,
                l.rates.p_gd,
                l.rates.p_h,
                l.rates.p_hd,
                l.rates.p_a,
                l.rates.p_ad,
                a.id,
                a.size_bp,
                a.xi_s,
                a.xi_r,
                a.xi_f,
                a.dropin_rate
            ));
        }
    }
    out
}

pub fn load_kit(path: &Path) -> Result<Kit, IoError> {
    parse_kit(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// frequencies

/// Parses a `locus,allele,count` table. Integer-scale rows are treated as
/// raw counts and receive the minimum-count adjustment (each count raised
/// to at least 5, then renormalized over the raised total); rows that
/// already sum to one per locus are taken as frequencies verbatim.
pub fn parse_frequencies(text: &str) -> Result<FrequencyTable, IoError> {
    let mut raw: BTreeMap<String, Vec<(AlleleId, f64)>> = BTreeMap::new();
    for (line, row) in data_rows(text, "freq")? {
        let locus = field(&row, line, 0)?.to_string();
        let allele = parse_allele(&row, line, 1)?;
        let value = parse_f64(&row, line, 2)?;
        if value <= 0.0 {
            return Err(IoError::Validation(format!(
                "non-positive frequency value at line {line}"
            )));
        }
        let entry = raw.entry(locus).or_default();
        if entry.iter().any(|(a, _)| *a == allele) {
            return Err(IoError::Validation(format!("duplicate allele at line {line}")));
        }
        entry.push((allele, value));
    }
    let mut table = FrequencyTable::default();
    for (locus, entries) in raw {
        let total: f64 = entries.iter().map(|(_, v)| v).sum();
        let is_probability = (total - 1.0).abs() < 1e-6;
        let mut unadj: BTreeMap<AlleleId, f64> = BTreeMap::new();
        for (a, v) in &entries {
            unadj.insert(*a, v / total);
        }
        let probs: BTreeMap<AlleleId, f64> = if is_probability {
            entries.into_iter().collect()
        } else {
            let raised: Vec<(AlleleId, f64)> = entries
                .into_iter()
                .map(|(a, v)| (a, v.max(MIN_ALLELE_COUNT)))
                .collect();
            let new_total: f64 = raised.iter().map(|(_, v)| v).sum();
            raised.into_iter().map(|(a, v)| (a, v / new_total)).collect()
        };
        table.per_locus.insert(locus.clone(), LocusFreqs { probs });
        table.unadjusted_rel.insert(locus, unadj);
    }
    Ok(table)
}

pub fn write_frequencies(table: &FrequencyTable) -> String {
    let mut out = String::from("#format:freq:1\n# locus,allele,count\n");
    for (locus, freqs) in &table.per_locus {
        for (allele, p) in &freqs.probs {
            out.push_str(&format!("{locus},{allele},{p}\n"));
        }
    }
    out
}

pub fn load_frequencies(path: &Path) -> Result<FrequencyTable, IoError> {
    parse_frequencies(&std::fs::read_to_string(path)?)
}

/// Splits a locus-wide drop-in rate over alleles by their relative
/// unadjusted frequencies.
pub fn split_locus_dropin(
    table: &FrequencyTable,
    locus: &str,
    locus_rate: f64,
) -> BTreeMap<AlleleId, f64> {
    table
        .unadjusted_rel
        .get(locus)
        .map(|rel| rel.iter().map(|(a, r)| (*a, locus_rate * r)).collect())
        .unwrap_or_default()
}

// ---------------------------------------------------------------------------
// profiles

pub fn parse_profiles(text: &str) -> Result<Vec<Profile>, IoError> {
    let mut profiles: Vec<Profile> = Vec::new();
    for (line, row) in data_rows(text, "profiles")? {
        let id = field(&row, line, 0)?.to_string();
        let locus = field(&row, line, 1)?.to_string();
        let a = parse_allele(&row, line, 2)?;
        let b = parse_allele(&row, line, 3)?;
        let profile = match profiles.iter_mut().find(|p| p.id == id) {
            Some(p) => p,
            None => {
                profiles.push(Profile { id: id.clone(), genotypes: BTreeMap::new() });
                profiles.last_mut().unwrap()
            }
        };
        if profile.genotypes.insert(locus.clone(), Genotype::new(a, b)).is_some() {
            return Err(IoError::Validation(format!(
                "profile {id} repeats locus {locus} at line {line}"
            )));
        }
    }
    Ok(profiles)
}

pub fn write_profiles(profiles: &[Profile]) -> String {
    let mut out = String::from("#format:profiles:1\n# contributor,locus,allele1,allele2\n");
    for p in profiles {
        for (locus, g) in &p.genotypes {
            out.push_str(&format!("{},{},{},{}\n", p.id, locus, g.0, g.1));
        }
    }
    out
}

pub fn load_profiles(path: &Path) -> Result<Vec<Profile>, IoError> {
    parse_profiles(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// noise

/// Parses `dye,rfu,prob` rows into per-dye pmfs; each pmf is renormalized
/// (empirical tables often arrive truncated).
pub fn parse_noise(text: &str) -> Result<NoiseModel, IoError> {
    let mut model = NoiseModel::default();
    for (line, row) in data_rows(text, "noise")? {
        let dye = field(&row, line, 0)?.to_string();
        let rfu = parse_u64(&row, line, 1)? as usize;
        let prob = parse_f64(&row, line, 2)?;
        if prob < 0.0 {
            return Err(IoError::Validation(format!("negative probability at line {line}")));
        }
        let pmf = model.per_dye.entry(dye).or_default();
        if pmf.len() <= rfu {
            pmf.resize(rfu + 1, 0.0);
        }
        pmf[rfu] += prob;
    }
    for (dye, pmf) in &mut model.per_dye {
        let total: f64 = pmf.iter().sum();
        if total <= 0.0 {
            return Err(IoError::Validation(format!("noise pmf for {dye} sums to zero")));
        }
        if (total - 1.0).abs() > 1e-12 {
            for p in pmf.iter_mut() {
                *p /= total;
            }
        }
    }
    Ok(model)
}

pub fn write_noise(model: &NoiseModel) -> String {
    let mut out = String::from("#format:noise:1\n# dye,rfu,prob\n");
    for (dye, pmf) in &model.per_dye {
        for (rfu, p) in pmf.iter().enumerate() {
            if *p > 0.0 {
                out.push_str(&format!("{dye},{rfu},{p}\n"));
            }
        }
    }
    out
}

pub fn load_noise(path: &Path) -> Result<NoiseModel, IoError> {
    parse_noise(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// epg

pub fn parse_epg(text: &str) -> Result<Vec<EpgPeak>, IoError> {
    let mut peaks = Vec::new();
    for (line, row) in data_rows(text, "epg")? {
        let locus = field(&row, line, 0)?.to_string();
        let allele = parse_allele(&row, line, 1)?;
        let height = parse_u64(&row, line, 2)? as u32;
        peaks.push(EpgPeak { locus, allele, height });
    }
    Ok(peaks)
}

pub fn write_epg(peaks: &[EpgPeak]) -> String {
    let mut out = String::from("#format:epg:1\n# locus,allele,height\n");
    for p in peaks {
        out.push_str(&format!("{},{},{}\n", p.locus, p.allele, p.height));
    }
    out
}

pub fn load_epg(path: &Path) -> Result<Vec<EpgPeak>, IoError> {
    parse_epg(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// hypothesis

pub fn parse_hypothesis(text: &str) -> Result<Hypothesis, IoError> {
    let mut contributors = Vec::new();
    for (line, row) in data_rows(text, "hypothesis")? {
        let id = field(&row, line, 0)?.to_string();
        let kind = field(&row, line, 1)?;
        let cells = parse_u64(&row, line, 2)?;
        let spec = match kind {
            "known" => ContributorSpec::Known { profile: id, cells },
            "untyped" => ContributorSpec::Untyped { label: id, cells },
            other => {
                return Err(parse_err(line, 2, format!("kind must be known or untyped, got {other:?}")))
            }
        };
        contributors.push(spec);
    }
    Ok(Hypothesis { contributors })
}

pub fn write_hypothesis(hyp: &Hypothesis) -> String {
    let mut out = String::from("#format:hypothesis:1\n# id,kind,cells\n");
    for c in &hyp.contributors {
        let kind = if c.is_untyped() { "untyped" } else { "known" };
        out.push_str(&format!("{},{},{}\n", c.label(), kind, c.cells()));
    }
    out
}

pub fn load_hypothesis(path: &Path) -> Result<Hypothesis, IoError> {
    parse_hypothesis(&std::fs::read_to_string(path)?)
}
