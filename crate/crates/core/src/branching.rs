//! Per-cycle branching systems described as data.
//!
//! Every PCR model in this crate is a collection of strand kinds where, in
//! one thermal cycle, an individual of kind `i` fires with probability
//! `p_i` and, conditional on firing, produces one offspring of kind
//! `c(i,b)` with branch weight `w_b` (the parent always persists). The
//! single-cycle PGF substitution is therefore
//!
//! `t_i -> t_i (1 - p_i + p_i sum_b w_b t_{c(i,b)})`
//!
//! From this one table we derive the spectral iteration over roots of
//! unity, the scalar iteration used by the contour sums, the first and
//! second moment recurrences, the mixed-derivative recurrence for
//! covariances, and the Monte Carlo sampler. All cycle updates read a
//! snapshot of the previous cycle's state, which also breaks the cyclic
//! amplicon dependency in the genomic model.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Binomial, Distribution};

#[derive(Clone, Debug)]
pub struct Branch {
    pub weight: f64,
    pub offspring: usize,
}

/// A multi-type branching system; kind indices are positions in `kinds`.
#[derive(Clone, Debug)]
pub struct BranchSystem {
    pub kind_names: Vec<&'static str>,
    pub fire_prob: Vec<f64>,
    pub branches: Vec<Vec<Branch>>,
}

impl BranchSystem {
    pub fn arity(&self) -> usize {
        self.fire_prob.len()
    }

    /// One cycle of the PGF recursion on a state of per-kind values
    /// (complex numbers for a single root of unity, or whole spectra when
    /// invoked pointwise). Reads only `prev`, writes `next`.
    #[inline]
    pub fn step(&self, prev: &[Complex64], next: &mut [Complex64]) {
        for i in 0..self.arity() {
            let mut s = Complex64::new(0.0, 0.0);
            for b in &self.branches[i] {
                s += b.weight * prev[b.offspring];
            }
            next[i] = prev[i] * (1.0 - self.fire_prob[i] + self.fire_prob[i] * s);
        }
    }

    /// Evaluates the joint PGF of products from the given seed kinds at a
    /// single point: every kind's symbol is 1 except `tracked`, which is
    /// set to `z`. Returns the product of the seeds' PGFs after `cycles`.
    pub fn scalar_pgf(&self, seeds: &[usize], tracked: usize, z: Complex64, cycles: u32) -> Complex64 {
        let mut state = vec![Complex64::new(1.0, 0.0); self.arity()];
        state[tracked] = z;
        let mut next = state.clone();
        for _ in 0..cycles {
            self.step(&state, &mut next);
            std::mem::swap(&mut state, &mut next);
        }
        seeds.iter().map(|&s| state[s]).product()
    }

    /// As [`scalar_pgf`](Self::scalar_pgf) with several tracked symbols set
    /// at once, for joint distributions.
    pub fn scalar_pgf_multi(
        &self,
        seeds: &[usize],
        tracked: &[(usize, Complex64)],
        cycles: u32,
    ) -> Complex64 {
        let mut state = vec![Complex64::new(1.0, 0.0); self.arity()];
        for &(kind, z) in tracked {
            state[kind] = z;
        }
        let mut next = state.clone();
        for _ in 0..cycles {
            self.step(&state, &mut next);
            std::mem::swap(&mut state, &mut next);
        }
        seeds.iter().map(|&s| state[s]).product()
    }

    /// First-derivative recurrence: entry `i` of the result is the expected
    /// number of `tracked` products after `cycles` from one kind-`i` seed.
    pub fn first_moments(&self, tracked: usize, cycles: u32) -> Vec<f64> {
        let (y, _) = self.first_second_moments(tracked, cycles);
        y
    }

    /// First- and second-derivative recurrences (Y and Z vectors). For a
    /// kind-`i` seed the variance of the tracked count is
    /// `Z[i] + Y[i] - Y[i]^2`.
    pub fn first_second_moments(&self, tracked: usize, cycles: u32) -> (Vec<f64>, Vec<f64>) {
        let n = self.arity();
        let mut y = vec![0.0; n];
        y[tracked] = 1.0;
        let mut z = vec![0.0; n];
        let mut y_next = vec![0.0; n];
        let mut z_next = vec![0.0; n];
        for _ in 0..cycles {
            for i in 0..n {
                let sy: f64 = self.branches[i]
                    .iter()
                    .map(|b| b.weight * y[b.offspring])
                    .sum();
                let sz: f64 = self.branches[i]
                    .iter()
                    .map(|b| b.weight * z[b.offspring])
                    .sum();
                let p = self.fire_prob[i];
                y_next[i] = y[i] + p * sy;
                z_next[i] = z[i] + p * sz + 2.0 * y[i] * p * sy;
            }
            std::mem::swap(&mut y, &mut y_next);
            std::mem::swap(&mut z, &mut z_next);
        }
        (y, z)
    }

    /// Mixed-derivative recurrence for two tracked kinds; returns
    /// `(Y_x, Y_y, DD)` where for a kind-`i` seed the covariance of the two
    /// tracked counts is `DD[i] - Y_x[i] Y_y[i]`.
    pub fn mixed_moments(&self, tracked_x: usize, tracked_y: usize, cycles: u32) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.arity();
        let mut yx = vec![0.0; n];
        yx[tracked_x] = 1.0;
        let mut yy = vec![0.0; n];
        yy[tracked_y] = 1.0;
        let mut dd = vec![0.0; n];
        if tracked_x == tracked_y {
            // DD is then E X(X-1): same recurrence as Z
            let (y, z) = self.first_second_moments(tracked_x, cycles);
            return (y.clone(), y, z);
        }
        let mut yx_next = vec![0.0; n];
        let mut yy_next = vec![0.0; n];
        let mut dd_next = vec![0.0; n];
        for _ in 0..cycles {
            for i in 0..n {
                let sx: f64 = self.branches[i]
                    .iter()
                    .map(|b| b.weight * yx[b.offspring])
                    .sum();
                let sy: f64 = self.branches[i]
                    .iter()
                    .map(|b| b.weight * yy[b.offspring])
                    .sum();
                let sdd: f64 = self.branches[i]
                    .iter()
                    .map(|b| b.weight * dd[b.offspring])
                    .sum();
                let p = self.fire_prob[i];
                yx_next[i] = yx[i] + p * sx;
                yy_next[i] = yy[i] + p * sy;
                dd_next[i] = dd[i] + p * sdd + yx[i] * p * sy + yy[i] * p * sx;
            }
            std::mem::swap(&mut yx, &mut yx_next);
            std::mem::swap(&mut yy, &mut yy_next);
            std::mem::swap(&mut dd, &mut dd_next);
        }
        (yx, yy, dd)
    }

    /// Advances per-kind counts by one cycle: each individual fires with
    /// its kind's probability and the firing individuals are split over the
    /// branch weights multinomially. Offspring join at the end of the
    /// cycle, matching the snapshot semantics of the PGF step.
    pub fn simulate_cycle<R: Rng + ?Sized>(&self, counts: &mut [u64], rng: &mut R) {
        let mut born = vec![0u64; self.arity()];
        for i in 0..self.arity() {
            if counts[i] == 0 || self.fire_prob[i] == 0.0 {
                continue;
            }
            let firing = Binomial::new(counts[i], self.fire_prob[i])
                .expect("valid binomial")
                .sample(rng);
            // multinomial split over branches by sequential binomials
            let mut rest = firing;
            let mut wrest: f64 = self.branches[i].iter().map(|b| b.weight).sum();
            for b in &self.branches[i] {
                if rest == 0 {
                    break;
                }
                let take = if b.weight >= wrest {
                    rest
                } else {
                    Binomial::new(rest, (b.weight / wrest).clamp(0.0, 1.0))
                        .expect("valid binomial")
                        .sample(rng)
                };
                born[b.offspring] += take;
                rest -= take;
                wrest -= b.weight;
            }
        }
        for (c, b) in counts.iter_mut().zip(born.iter()) {
            *c += *b;
        }
    }

    /// Runs `cycles` of Monte Carlo from the given initial counts.
    pub fn simulate<R: Rng + ?Sized>(&self, initial: &[u64], cycles: u32, rng: &mut R) -> Vec<u64> {
        let mut counts = initial.to_vec();
        for _ in 0..cycles {
            self.simulate_cycle(&mut counts, rng);
        }
        counts
    }

    /// Exhaustive enumeration of the joint outcome distribution over a small
    /// number of cycles, tracking one kind. Expands every per-individual
    /// branch choice, so it is exponential in the product count and only
    /// usable as a test oracle for one or two seeds and a few cycles.
    pub fn enumerate_tracked(&self, seeds: &[usize], tracked: usize, cycles: u32) -> Vec<f64> {
        let mut initial = vec![0u64; self.arity()];
        for &s in seeds {
            initial[s] += 1;
        }
        let mut dist: std::collections::HashMap<Vec<u64>, f64> = std::collections::HashMap::new();
        dist.insert(initial, 1.0);
        for _ in 0..cycles {
            let mut next: std::collections::HashMap<Vec<u64>, f64> = std::collections::HashMap::new();
            for (state, prob) in dist {
                // expand each individual's choice, kind by kind
                let mut partials: Vec<(Vec<u64>, f64)> = vec![(state.clone(), prob)];
                for i in 0..self.arity() {
                    for _ in 0..state[i] {
                        let mut grown = Vec::with_capacity(partials.len() * 2);
                        for (s, q) in &partials {
                            let p = self.fire_prob[i];
                            if p < 1.0 {
                                grown.push((s.clone(), q * (1.0 - p)));
                            }
                            for b in &self.branches[i] {
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
        let max_tracked = dist.keys().map(|s| s[tracked]).max().unwrap_or(0) as usize;
        let mut out = vec![0.0; max_tracked + 1];
        for (state, prob) in dist {
            out[state[tracked] as usize] += prob;
        }
        out
    }
}

/// Marginal-PGF spectrum of the tracked product from the given seeds: entry
/// `j` holds the joint PGF evaluated with the tracked symbol at
/// `e^{-2 pi i j / n}` and every other symbol at 1. Grid points are
/// independent, so the loop runs data-parallel with one writer per slot.
pub fn marginal_spectrum(
    system: &BranchSystem,
    seeds: &[usize],
    tracked: usize,
    n: usize,
    cycles: u32,
) -> Vec<Complex64> {
    use rayon::prelude::*;
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    out.par_iter_mut().enumerate().for_each(|(j, slot)| {
        let theta = -2.0 * std::f64::consts::PI * j as f64 / n as f64;
        let z = Complex64::new(theta.cos(), theta.sin());
        *slot = system.scalar_pgf(seeds, tracked, z, cycles);
    });
    out
}
