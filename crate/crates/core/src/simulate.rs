//! Forward electropherogram simulation from the full sample model: the
//! generated peak files follow exactly the distributions the likelihood
//! evaluates, sharing one parameter structure.

use crate::genomic::{tagged_counts, StutterMode};
use crate::sample::{
    count_to_rfu, AlleleId, DropinMode, EpgPeak, Kit, Profile, SampleConfig,
};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use std::collections::BTreeMap;

/// Simulates one EPG: per allele, binomially selected genome pairs are
/// amplified strand by strand, stutter products land on their destination
/// alleles, Poisson drop-in pairs amplify without stutter, baseline noise
/// is drawn per allele position, and the tagged totals are scaled to RFU
/// and censored at the analytic threshold.
pub fn simulate_epg<R: Rng + ?Sized>(
    contributors: &[(&Profile, u64)],
    cfg: &SampleConfig,
    kit: &Kit,
    rng: &mut R,
    stutter_mode: StutterMode,
) -> Vec<EpgPeak> {
    let mut peaks = Vec::new();
    for locus in &kit.loci {
        // genome-pair counts per allele from all contributors
        let mut pair_counts: BTreeMap<AlleleId, u64> = BTreeMap::new();
        for (profile, cells) in contributors {
            if let Some(g) = profile.genotypes.get(&locus.name) {
                for id in [g.0, g.1] {
                    *pair_counts.entry(id).or_insert(0) += cells;
                }
            }
        }
        // tagged product accumulation per destination allele
        let mut tagged: BTreeMap<AlleleId, u64> = BTreeMap::new();
        for (&allele_id, &pairs) in &pair_counts {
            let allele = match locus.allele(allele_id) {
                Some(a) => a,
                None => continue,
            };
            let phi = cfg.selection_probability(allele.size_bp);
            let selected = binom(pairs, phi, rng);
            if selected == 0 {
                continue;
            }
            let params = locus.genomic_params(allele, cfg.cycles, 1, 1.0);
            let mode = effective_mode(stutter_mode, &params);
            let sys = params.system(mode);
            let mut initial = vec![0u64; sys.arity()];
            initial[mode.kind_index(crate::genomic::StrandKind::G).unwrap()] = 1;
            initial[mode.kind_index(crate::genomic::StrandKind::Gd).unwrap()] = 1;
            for _ in 0..selected {
                let counts = sys.simulate(&initial, cfg.cycles, rng);
                let t = tagged_counts(mode, &counts);
                add_product(&mut tagged, locus, allele_id, 0, t.target);
                add_product(&mut tagged, locus, allele_id, -1, t.stutter);
                add_product(&mut tagged, locus, allele_id, -2, t.double);
                add_product(&mut tagged, locus, allele_id, 1, t.forward);
            }
        }
        // drop-in pairs amplify with no stutter output tracked
        for allele in &locus.alleles {
            if allele.dropin_rate <= 0.0 {
                continue;
            }
            let n_dropin = Poisson::new(allele.dropin_rate)
                .expect("positive rate")
                .sample(rng) as u64;
            if n_dropin == 0 {
                continue;
            }
            let params = locus.genomic_params(allele, cfg.cycles, 1, 1.0);
            let mode = effective_mode(StutterMode::None, &params);
            let sys = params.system(mode);
            let mut initial = vec![0u64; sys.arity()];
            match cfg.dropin_mode {
                DropinMode::Genomic => {
                    initial[mode.kind_index(crate::genomic::StrandKind::G).unwrap()] = 1;
                    initial[mode.kind_index(crate::genomic::StrandKind::Gd).unwrap()] = 1;
                }
                DropinMode::Amplicon => {
                    initial[mode.kind_index(crate::genomic::StrandKind::A).unwrap()] = 1;
                    initial[mode.kind_index(crate::genomic::StrandKind::Ad).unwrap()] = 1;
                }
            }
            for _ in 0..n_dropin {
                let counts = sys.simulate(&initial, cfg.cycles, rng);
                let t = tagged_counts(mode, &counts);
                *tagged.entry(allele.id).or_insert(0) += t.target;
            }
        }
        // noise per allele position, then scale and censor
        let noise_pmf = cfg.noise.pmf(&locus.dye);
        for allele in &locus.alleles {
            let mut count = *tagged.get(&allele.id).unwrap_or(&0);
            let nu = sample_pmf(&noise_pmf, rng);
            count += (nu as f64 * cfg.rho).round() as u64;
            let rfu = count_to_rfu(count, cfg.rho);
            if rfu >= cfg.analytic_threshold && rfu > 0 {
                peaks.push(EpgPeak { locus: locus.name.clone(), allele: allele.id, height: rfu });
            }
        }
    }
    peaks
}

fn effective_mode(requested: StutterMode, params: &crate::genomic::GenomicParams) -> StutterMode {
    // shrink to the smallest system that carries the allele's live rates
    match requested {
        StutterMode::Full if params.xi_r == 0.0 && params.xi_f == 0.0 && params.xi_s == 0.0 => {
            StutterMode::None
        }
        StutterMode::Full if params.xi_r == 0.0 && params.xi_f == 0.0 => StutterMode::Single,
        StutterMode::Single if params.xi_s == 0.0 => StutterMode::None,
        other => other,
    }
}

fn add_product(
    tagged: &mut BTreeMap<AlleleId, u64>,
    locus: &crate::sample::KitLocus,
    origin: AlleleId,
    offset: i8,
    count: u64,
) {
    if count == 0 {
        return;
    }
    if let Some(dest) = if offset == 0 { Some(origin) } else { origin.offset_by(offset) } {
        if locus.allele(dest).is_some() {
            *tagged.entry(dest).or_insert(0) += count;
        }
    }
}

fn binom<R: Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    rand_distr::Binomial::new(n, p).expect("valid binomial").sample(rng)
}

fn sample_pmf<R: Rng + ?Sized>(pmf: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, &p) in pmf.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    pmf.len().saturating_sub(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::{Genotype, KitAllele, KitLocus, StrandRates};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_kit(p: f64, xi: f64, dropin: f64) -> Kit {
        let alleles: Vec<KitAllele> = (8..=11)
            .map(|u| KitAllele {
                id: AlleleId::Repeat { units: u, partial: 0 },
                size_bp: 100.0 + 4.0 * u as f64,
                xi_s: xi,
                xi_r: 0.0,
                xi_f: 0.0,
                dropin_rate: dropin,
            })
            .collect();
        Kit {
            loci: vec![KitLocus {
                name: "L1".into(),
                dye: "blue".into(),
                repeat_bp: 4,
                rates: StrandRates::uniform(p),
                alleles,
            }],
        }
    }

    fn profile(a: &str, b: &str) -> Profile {
        let mut genotypes = std::collections::BTreeMap::new();
        genotypes.insert(
            "L1".into(),
            Genotype::new(AlleleId::parse(a).unwrap(), AlleleId::parse(b).unwrap()),
        );
        Profile { id: "P1".into(), genotypes }
    }

    #[test]
    fn empty_inputs_give_empty_epg() {
        let kit = small_kit(0.85, 0.0, 0.0);
        let cfg = SampleConfig::new(0.5, 1.0, 8, 2.0, 1);
        let prof = profile("9", "10");
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let peaks = simulate_epg(&[(&prof, 0)], &cfg, &kit, &mut rng, StutterMode::None);
        assert!(peaks.is_empty());
    }

    #[test]
    fn peaks_land_on_contributor_alleles_without_stutter() {
        let kit = small_kit(0.9, 0.0, 0.0);
        let cfg = SampleConfig::new(1.0, 1.0, 8, 2.0, 1);
        let prof = profile("9", "11");
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let peaks = simulate_epg(&[(&prof, 5)], &cfg, &kit, &mut rng, StutterMode::None);
        assert_eq!(peaks.len(), 2);
        let alleles: Vec<String> = peaks.iter().map(|p| p.allele.to_string()).collect();
        assert!(alleles.contains(&"9".to_string()));
        assert!(alleles.contains(&"11".to_string()));
    }

    #[test]
    fn stutter_peaks_appear_one_repeat_short() {
        let kit = small_kit(0.9, 0.05, 0.0);
        let mut cfg = SampleConfig::new(1.0, 1.0, 10, 2.0, 1);
        cfg.stutter = StutterMode::Single;
        let prof = profile("11", "11");
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let peaks = simulate_epg(&[(&prof, 10)], &cfg, &kit, &mut rng, StutterMode::Single);
        assert!(peaks.iter().any(|p| p.allele.to_string() == "10"), "{peaks:?}");
    }

    #[test]
    fn empirical_height_mean_matches_height_dist() {
        let kit = small_kit(0.85, 0.0, 0.0);
        let mut cfg = SampleConfig::new(0.3, 1.0, 8, 2.0, 1);
        cfg.stutter = StutterMode::None;
        let prof = profile("9", "10");
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let runs = 10_000;
        let mut total9 = 0.0;
        for _ in 0..runs {
            let peaks = simulate_epg(&[(&prof, 6)], &cfg, &kit, &mut rng, StutterMode::None);
            total9 += peaks
                .iter()
                .filter(|p| p.allele.to_string() == "9")
                .map(|p| p.height as f64)
                .sum::<f64>();
        }
        let emp_mean = total9 / runs as f64;

        let mut engine =
            crate::likelihood::LocusEngine::new(&kit.loci[0], &cfg, vec![]).unwrap();
        let mut counts = std::collections::BTreeMap::new();
        counts.insert(AlleleId::parse("9").unwrap(), 6u64);
        let ctx = engine.context(AlleleId::parse("9").unwrap(), &counts, &[0]);
        let dist = crate::likelihood::allele_height_dist(
            &mut engine,
            &ctx,
            crate::likelihood::PeakModel::Fft,
            100_000,
        )
        .unwrap();
        let want = dist.mean();
        // censoring at 1 RFU and rounding shift the empirical mean by less
        // than half an RFU here; allow 3 standard errors plus that bias
        let se = (want * want / runs as f64).sqrt().max(1.0);
        assert!(
            (emp_mean - want).abs() < 3.0 * se + 0.5,
            "{emp_mean} vs {want}"
        );
    }
}
