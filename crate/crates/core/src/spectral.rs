//! Probability vectors and their discrete Fourier images.
//!
//! A [`ProbVec`] holds the coefficients of a probability generating
//! function: entry `n` is the probability of exactly `n` amplicons. Its
//! transform, a [`SpectralVec`], holds the PGF evaluated at the N-th roots
//! of unity `e^{-2 pi i j / N}`; PGF recursions and compositions become
//! elementwise complex arithmetic there. Transform lengths are powers of
//! two. After an inverse transform we clamp negative numerical dust to
//! zero and renormalize when the total mass drifted by more than 1e-9,
//! because downstream likelihoods take logs.

use num_complex::Complex64;
use rustfft::FftPlanner;
use std::fmt;

/// Tolerance below which a negative entry is treated as numerical dust.
pub const NEG_DUST_TOL: f64 = 1e-12;
/// Per-entry imaginary residue allowed after an inverse transform.
pub const IMAG_TOL: f64 = 1e-9;
/// Mass drift over which a clamped vector is renormalized.
pub const DRIFT_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub enum SpectralError {
    /// A transform was requested on an empty vector.
    EmptyInput,
    /// An inverse transform left imaginary parts above [`IMAG_TOL`].
    ImaginaryResidue { index: usize, magnitude: f64 },
    /// An inverse transform produced a real part below -[`IMAG_TOL`].
    NegativeMass { index: usize, value: f64 },
}

impl fmt::Display for SpectralError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpectralError::EmptyInput => write!(f, "zero-length input"),
            SpectralError::ImaginaryResidue { index, magnitude } => write!(
                f,
                "imaginary residue {magnitude:e} at index {index} exceeds {IMAG_TOL:e}"
            ),
            SpectralError::NegativeMass { index, value } => {
                write!(f, "negative mass {value:e} at index {index}")
            }
        }
    }
}

impl std::error::Error for SpectralError {}

/// A finite discrete distribution over counts `0..N-1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVec {
    probs: Vec<f64>,
}

impl ProbVec {
    /// Wraps raw coefficients, clamping dust in `(-1e-12, 0)` to zero.
    pub fn from_raw(mut probs: Vec<f64>) -> Result<Self, SpectralError> {
        if probs.is_empty() {
            return Err(SpectralError::EmptyInput);
        }
        for (i, p) in probs.iter_mut().enumerate() {
            if *p < 0.0 {
                if *p < -NEG_DUST_TOL {
                    return Err(SpectralError::NegativeMass { index: i, value: *p });
                }
                *p = 0.0;
            }
        }
        Ok(ProbVec { probs })
    }

    /// Point mass at `n` in a vector of length `len`.
    pub fn delta(n: usize, len: usize) -> Self {
        assert!(n < len, "delta position {n} outside length {len}");
        let mut probs = vec![0.0; len];
        probs[n] = 1.0;
        ProbVec { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        crate::numeric::pairwise_sum(&self.probs)
    }

    pub fn mean(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(n, p)| n as f64 * p)
            .sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.probs
            .iter()
            .enumerate()
            .map(|(n, p)| (n as f64 - m) * (n as f64 - m) * p)
            .sum()
    }

    /// Mass at or below `n` (saturating at the top of the support).
    pub fn cumulative(&self, n: usize) -> f64 {
        let end = (n + 1).min(self.probs.len());
        crate::numeric::pairwise_sum(&self.probs[..end])
    }

    /// Zero-pads (or truncates zero tail) to length `len`.
    pub fn resized(&self, len: usize) -> Self {
        let mut probs = self.probs.clone();
        probs.resize(len, 0.0);
        ProbVec { probs }
    }
}

/// The DFT image of a coefficient vector: one value per root of unity.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralVec {
    values: Vec<Complex64>,
}

impl SpectralVec {
    pub fn from_values(values: Vec<Complex64>) -> Self {
        SpectralVec { values }
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Spectrum of a point mass at `n`: values `e^{-2 pi i j n / N}`.
    pub fn delta(n: usize, len: usize) -> Self {
        let values = (0..len)
            .map(|j| root_of_unity_pow(len, (j as u64).wrapping_mul(n as u64)))
            .collect();
        SpectralVec { values }
    }
}

/// `e^{-2 pi i k / n}` raised through exact index arithmetic mod n.
pub(crate) fn root_of_unity_pow(n: usize, k: u64) -> Complex64 {
    let k = (k % n as u64) as f64;
    let theta = -2.0 * std::f64::consts::PI * k / n as f64;
    Complex64::new(theta.cos(), theta.sin())
}

/// Forward DFT of the coefficient sequence.
pub fn forward_dft(v: &ProbVec) -> SpectralVec {
    let mut buf: Vec<Complex64> = v.probs.iter().map(|&p| Complex64::new(p, 0.0)).collect();
    fft_in_place(&mut buf, false);
    SpectralVec { values: buf }
}

/// Inverse DFT. Takes real parts, checks the imaginary residue, clamps
/// dust and renormalizes when total drift exceeds [`DRIFT_TOL`].
pub fn inverse_dft(s: &SpectralVec) -> Result<ProbVec, SpectralError> {
    if s.values.is_empty() {
        return Err(SpectralError::EmptyInput);
    }
    let mut buf = s.values.clone();
    fft_in_place(&mut buf, true);
    let n = buf.len() as f64;
    let mut probs = Vec::with_capacity(buf.len());
    for (i, z) in buf.iter().enumerate() {
        let re = z.re / n;
        let im = z.im / n;
        if im.abs() > IMAG_TOL {
            return Err(SpectralError::ImaginaryResidue {
                index: i,
                magnitude: im.abs(),
            });
        }
        if re < -IMAG_TOL {
            return Err(SpectralError::NegativeMass { index: i, value: re });
        }
        probs.push(re.max(0.0));
    }
    let total = crate::numeric::pairwise_sum(&probs);
    // renormalize only when the vector is a full distribution that drifted
    if (total - 1.0).abs() > DRIFT_TOL && (total - 1.0).abs() < 1e-6 {
        for p in &mut probs {
            *p /= total;
        }
    }
    Ok(ProbVec { probs })
}

/// Convolution of two count distributions; output length is padded to the
/// next power of two above `len(a) + len(b) - 1` and truncated back.
pub fn convolve(a: &ProbVec, b: &ProbVec) -> Result<ProbVec, SpectralError> {
    if a.is_empty() || b.is_empty() {
        return Err(SpectralError::EmptyInput);
    }
    let out_len = a.len() + b.len() - 1;
    let n = crate::numeric::next_pow2(out_len as u64);
    let mut fa: Vec<Complex64> = a
        .probs
        .iter()
        .map(|&p| Complex64::new(p, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(n)
        .collect();
    let mut fb: Vec<Complex64> = b
        .probs
        .iter()
        .map(|&p| Complex64::new(p, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(n)
        .collect();
    fft_in_place(&mut fa, false);
    fft_in_place(&mut fb, false);
    for (x, y) in fa.iter_mut().zip(fb.iter()) {
        *x *= *y;
    }
    fft_in_place(&mut fa, true);
    let nf = n as f64;
    let mut probs: Vec<f64> = fa.iter().take(out_len).map(|z| (z.re / nf).max(0.0)).collect();
    let total = crate::numeric::pairwise_sum(&probs);
    let want = a.total_mass() * b.total_mass();
    if (total - want).abs() > DRIFT_TOL && total > 0.0 && (total - want).abs() < 1e-6 {
        let scale = want / total;
        for p in &mut probs {
            *p *= scale;
        }
    }
    Ok(ProbVec { probs })
}

/// Binomial pre-sampling composition `(1 - phi + phi s_j)^M`, applied
/// elementwise. `M = 0` gives the all-ones spectrum (a point mass at 0).
pub fn binomial_mix(s: &SpectralVec, phi: f64, m: u64) -> SpectralVec {
    let values = s
        .values
        .iter()
        .map(|&v| complex_powu(Complex64::new(1.0 - phi, 0.0) + phi * v, m))
        .collect();
    SpectralVec { values }
}

/// Poisson composition `exp(lambda (s_j - 1))`, applied elementwise.
pub fn poisson_mix(s: &SpectralVec, lambda: f64) -> SpectralVec {
    let values = s
        .values
        .iter()
        .map(|&v| (lambda * (v - 1.0)).exp())
        .collect();
    SpectralVec { values }
}

/// Support length such that a Poisson(lambda) tail beyond it carries less
/// than 1e-12 mass (the `lambda + 12 sqrt(lambda)` rule, padded).
pub fn poisson_support_bound(lambda: f64) -> u64 {
    (lambda + 12.0 * lambda.sqrt()).ceil() as u64 + 8
}

/// Integer power by binary exponentiation; exact composition count keeps
/// rounding predictable for large M.
pub fn complex_powu(base: Complex64, mut exp: u64) -> Complex64 {
    let mut acc = Complex64::new(1.0, 0.0);
    let mut b = base;
    while exp > 0 {
        if exp & 1 == 1 {
            acc *= b;
        }
        b *= b;
        exp >>= 1;
    }
    acc
}

pub(crate) fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(buf.len())
    } else {
        planner.plan_fft_forward(buf.len())
    };
    fft.process(buf);
}
