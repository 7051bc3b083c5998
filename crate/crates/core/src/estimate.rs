//! Maximum-likelihood fitting of integer cell counts and discretized
//! degradation, likelihood ratios in bans, and the uniformity diagnostic.

use crate::likelihood::{LikelihoodError, PeakModel, ProfileEvaluator};
use crate::sample::Hypothesis;
use std::collections::HashMap;
use std::fmt;

/// Search options; the degradation grid is geometric with the zero point
/// prepended.
#[derive(Clone, Debug)]
pub struct FitOptions {
    pub fit_delta: bool,
    pub delta_grid: Vec<f64>,
    pub max_sweeps: usize,
    pub max_cells: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            fit_delta: false,
            delta_grid: default_delta_grid(),
            max_sweeps: 12,
            max_cells: 2_000_000,
        }
    }
}

/// 25 geometric points spanning 1e-4..3e-2, plus zero.
pub fn default_delta_grid() -> Vec<f64> {
    let mut grid = vec![0.0];
    let (lo, hi, n) = (1e-4f64, 3e-2f64, 25usize);
    let ratio = (hi / lo).powf(1.0 / (n - 1) as f64);
    let mut v = lo;
    for _ in 0..n {
        grid.push(v);
        v *= ratio;
    }
    grid
}

/// One evaluated candidate during the search.
#[derive(Clone, Debug)]
pub struct TraceStep {
    pub cells: Vec<u64>,
    pub delta: f64,
    pub ll: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub ll_max: f64,
    pub cells: Vec<u64>,
    pub delta_hat: f64,
    pub model: PeakModel,
    pub trace: Vec<TraceStep>,
    /// False when no candidate improved on the initial point.
    pub improved: bool,
}

impl fmt::Display for FitResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "model: {}", self.model)?;
        writeln!(f, "ll_max: {:.6}", self.ll_max)?;
        writeln!(f, "cells: {:?}", self.cells)?;
        writeln!(f, "delta: {:.8}", self.delta_hat)?;
        write!(f, "evaluations: {}", self.trace.len())
    }
}

/// Log-likelihood ratio in bans.
pub fn lr_bans(ll_num: f64, ll_den: f64) -> f64 {
    (ll_num - ll_den) / std::f64::consts::LN_10
}

struct SearchState<'a, 'b> {
    evaluator: &'a mut ProfileEvaluator<'b>,
    hyp: Hypothesis,
    model: PeakModel,
    memo: HashMap<Vec<u64>, f64>,
    trace: Vec<TraceStep>,
    delta: f64,
}

impl SearchState<'_, '_> {
    fn eval(&mut self, cells: &[u64]) -> Result<f64, LikelihoodError> {
        if let Some(&v) = self.memo.get(cells) {
            return Ok(v);
        }
        for (c, &v) in self.hyp.contributors.iter_mut().zip(cells.iter()) {
            c.set_cells(v);
        }
        let ll = self.evaluator.loglik(&self.hyp, self.model)?.total;
        self.memo.insert(cells.to_vec(), ll);
        self.trace.push(TraceStep { cells: cells.to_vec(), delta: self.delta, ll, accepted: false });
        Ok(ll)
    }
}

/// Crude deterministic initialization: each contributor gets a share of
/// the total observed RFU proportional to the peaks its genotype carries
/// (untyped contributors share every peak), scaled by the expected
/// per-cell yield.
fn initial_cells(
    evaluator: &ProfileEvaluator,
    hyp: &Hypothesis,
    max_cells: u64,
) -> Vec<u64> {
    let cfg = evaluator.ev.cfg;
    let n = hyp.contributors.len();
    let mut attributed = vec![0.0f64; n];
    let mut yield_per_cell = 0.0f64;
    for engine in &evaluator.engines {
        let locus = &engine.locus;
        // expected tagged RFU of one cell's two genome pairs at this locus
        let mid_allele = &locus.alleles[locus.alleles.len() / 2];
        let params = locus.genomic_params(mid_allele, cfg.cycles, 1, 1.0);
        let (pair_mean, _) = crate::genomic::tracked_moments(
            &params,
            crate::genomic::StutterMode::None,
            crate::genomic::TrackedProduct::Target,
            cfg.cycles,
        );
        let phi = cfg.selection_probability(mid_allele.size_bp);
        yield_per_cell += 2.0 * pair_mean * phi / cfg.rho;
        for &(allele, height) in &engine.peaks {
            // carriers of this allele
            let mut carriers = Vec::new();
            for (i, c) in hyp.contributors.iter().enumerate() {
                let carries = match c {
                    crate::sample::ContributorSpec::Known { profile, .. } => evaluator
                        .ev
                        .profiles
                        .iter()
                        .find(|p| &p.id == profile)
                        .and_then(|p| p.genotypes.get(&locus.name))
                        .map(|g| g.copies(allele) > 0)
                        .unwrap_or(false),
                    crate::sample::ContributorSpec::Untyped { .. } => true,
                };
                if carries {
                    carriers.push(i);
                }
            }
            if carriers.is_empty() {
                continue;
            }
            let share = height as f64 / carriers.len() as f64;
            for i in carriers {
                attributed[i] += share;
            }
        }
    }
    attributed
        .iter()
        .map(|&rfu| {
            if yield_per_cell > 0.0 {
                ((rfu / yield_per_cell).round() as u64).min(max_cells)
            } else {
                0
            }
        })
        .collect()
}

fn ascend_once(
    state: &mut SearchState,
    cells: &mut Vec<u64>,
    index: usize,
    max_cells: u64,
) -> Result<bool, LikelihoodError> {
    let f0 = state.eval(cells)?;
    let base = cells[index];
    let probe = |state: &mut SearchState, cells: &mut Vec<u64>, v: u64| {
        cells[index] = v;
        let f = state.eval(cells);
        cells[index] = base;
        f
    };
    let up = if base < max_cells {
        probe(state, cells, base + 1)?
    } else {
        f64::NEG_INFINITY
    };
    let down = if base > 0 { probe(state, cells, base - 1)? } else { f64::NEG_INFINITY };
    if up <= f0 && down <= f0 {
        return Ok(false);
    }
    let dir: i64 = if up >= down { 1 } else { -1 };
    let mut best = (base as i64 + dir) as u64;
    let mut fbest = if dir == 1 { up } else { down };
    let mut step = 1u64;
    // expand
    loop {
        let cand = best as i64 + dir * (step as i64 * 2);
        if cand < 0 || cand as u64 > max_cells {
            break;
        }
        let f = probe(state, cells, cand as u64)?;
        if f > fbest {
            best = cand as u64;
            fbest = f;
            step *= 2;
        } else {
            break;
        }
    }
    // contract
    let mut s = step;
    while s >= 1 {
        for cand in [best as i64 + s as i64, best as i64 - s as i64] {
            if cand < 0 || cand as u64 > max_cells {
                continue;
            }
            let f = probe(state, cells, cand as u64)?;
            if f > fbest {
                best = cand as u64;
                fbest = f;
            }
        }
        if s == 1 {
            break;
        }
        s /= 2;
    }
    cells[index] = best;
    Ok(fbest > f0)
}

/// Coordinate ascent over integer cell counts, optionally crossed with the
/// degradation grid. Deterministic for fixed options: sweep order is by
/// initial crude estimate (descending, ties by lower index), candidates
/// only replace the incumbent on strict improvement.
pub fn fit(
    evaluator: &mut ProfileEvaluator,
    hypothesis: &Hypothesis,
    model: PeakModel,
    opts: &FitOptions,
) -> Result<FitResult, LikelihoodError> {
    let deltas: Vec<f64> = if opts.fit_delta {
        opts.delta_grid.clone()
    } else {
        vec![evaluator.ev.cfg.delta]
    };
    let init = initial_cells(evaluator, hypothesis, opts.max_cells);
    let mut order: Vec<usize> = (0..init.len()).collect();
    order.sort_by(|&a, &b| init[b].cmp(&init[a]).then(a.cmp(&b)));

    let mut best: Option<(f64, Vec<u64>, f64)> = None;
    let mut trace = Vec::new();
    let mut improved_any = false;
    let mut warm = init.clone();
    for &delta in &deltas {
        evaluator.set_delta(delta);
        let mut state = SearchState {
            evaluator,
            hyp: hypothesis.clone(),
            model,
            memo: HashMap::new(),
            trace: Vec::new(),
            delta,
        };
        let mut cells = warm.clone();
        let f_init = state.eval(&cells)?;
        let mut f_cur = f_init;
        for _sweep in 0..opts.max_sweeps {
            let mut changed = false;
            for &i in &order {
                if ascend_once(&mut state, &mut cells, i, opts.max_cells)? {
                    changed = true;
                }
            }
            let f_new = state.eval(&cells)?;
            debug_assert!(f_new >= f_cur - 1e-9);
            f_cur = f_new;
            if !changed {
                break;
            }
        }
        if f_cur > f_init {
            improved_any = true;
        }
        state.trace.push(TraceStep { cells: cells.clone(), delta, ll: f_cur, accepted: true });
        trace.extend(state.trace);
        let better = match &best {
            None => true,
            Some((ll, _, _)) => f_cur > *ll,
        };
        if better {
            best = Some((f_cur, cells.clone(), delta));
            warm = cells;
        }
    }
    let (ll_max, cells, delta_hat) = best.expect("at least one delta evaluated");
    evaluator.set_delta(delta_hat);
    Ok(FitResult { ll_max, cells, delta_hat, model, trace, improved: improved_any })
}

/// Conditional-CDF uniformity diagnostic: for each retained peak, the
/// probability of a smaller height given threshold exceedance and all
/// other peaks, paired with uniform plotting positions.
pub fn qq_diagnostic(
    evaluator: &mut ProfileEvaluator,
    hyp: &Hypothesis,
    model: PeakModel,
) -> Result<Vec<(f64, f64)>, LikelihoodError> {
    let mut values = Vec::new();
    let peaks: Vec<(String, crate::sample::AlleleId, u32)> = evaluator
        .engines
        .iter()
        .flat_map(|e| {
            e.peaks
                .iter()
                .map(|&(a, h)| (e.locus.name.clone(), a, h))
                .collect::<Vec<_>>()
        })
        .collect();
    for (locus, allele, height) in peaks {
        let u = evaluator.peak_conditional_cdf(hyp, model, &locus, allele, height)?;
        values.push(u);
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    Ok(values
        .into_iter()
        .enumerate()
        .map(|(i, v)| ((i as f64 + 0.5) / n as f64, v))
        .collect())
}

/// Kolmogorov-Smirnov statistic of sorted uniform values against the
/// uniform CDF.
pub fn ks_statistic(sorted_values: &[f64]) -> f64 {
    let n = sorted_values.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &v) in sorted_values.iter().enumerate() {
        let lo = i as f64 / n;
        let hi = (i as f64 + 1.0) / n;
        d = d.max((v - lo).abs()).max((hi - v).abs());
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_bans_arithmetic() {
        assert_eq!(lr_bans(-100.0, -100.0), 0.0);
        let bans = lr_bans(-194.748, -209.557);
        assert!((bans - 6.43).abs() < 0.005, "bans={bans}");
        assert!((lr_bans(-194.748, -209.557) + lr_bans(-209.557, -194.748)).abs() < 1e-12);
    }

    #[test]
    fn delta_grid_shape() {
        let g = default_delta_grid();
        assert_eq!(g.len(), 26);
        assert_eq!(g[0], 0.0);
        assert!((g[1] - 1e-4).abs() < 1e-18);
        assert!((g[25] - 3e-2).abs() < 1e-10);
        // brackets the reported fitted range 0.004..0.011
        assert!(g.iter().any(|&d| (0.004..=0.006).contains(&d)));
        assert!(g.iter().any(|&d| (0.009..=0.012).contains(&d)));
    }

    #[test]
    fn ks_statistic_extremes() {
        let perfect: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        assert!(ks_statistic(&perfect) < 0.006);
        let awful = vec![0.0; 100];
        assert!(ks_statistic(&awful) > 0.99);
    }
}
