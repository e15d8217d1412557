//! Square Gray-coded QAM, the per-dimension MMSE denoiser and soft LLR output.
//!
//! A square `M`-QAM symbol is two independent `sqrt(M)`-PAM symbols, one per
//! real dimension, so the denoiser works on the PAM alphabet. Symbol labels
//! are integers: the high `log2(M)/2` bits select the in-phase level and the
//! low bits the quadrature level, each through a reflected Gray code.
//!
//! Priors: the per-symbol prior is `1/M` (per-dimension PAM prior
//! `1/sqrt(M)`). Writing the prior with weight `1/sqrt(M)` per complex
//! symbol, as is sometimes done, does not normalize over `M` points; it is
//! the per-dimension weight.
//!
//! Noise-variance argument: `tau2` is the variance of the complex-domain
//! equivalent AWGN, i.e. the weights are `p(s) exp(-(r - s)^2 / tau2)`.
//! Callers holding a per-real-dimension variance `v` pass `tau2 = 2 v`.

use nalgebra::DVector;
use num_complex::Complex64;

use crate::error::{Error, Result};

const MAX_LEVELS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    order: usize,
    bits_per_symbol: usize,
    points: Vec<Complex64>,
    priors: Vec<f64>,
    pam_points: Vec<f64>,
    pam_priors: Vec<f64>,
    ln_pam_priors: Vec<f64>,
    /// Gray label of each PAM level (levels in ascending amplitude).
    pam_labels: Vec<usize>,
    /// PAM level carrying each label.
    level_of_label: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftSymbol {
    pub mean: f64,
    pub var: f64,
}

pub fn make_constellation(order: usize) -> Result<Constellation> {
    if !matches!(order, 4 | 16 | 64) {
        return Err(Error::Config(format!("unsupported QAM order {order}")));
    }
    let levels = (order as f64).sqrt().round() as usize;
    // Per-dimension energy c^2 (L^2 - 1) / 3 must equal 1/2.
    let scale = (3.0 / (2.0 * (order as f64 - 1.0))).sqrt();
    let pam_points: Vec<f64> = (0..levels)
        .map(|l| (2.0 * l as f64 - (levels as f64 - 1.0)) * scale)
        .collect();
    let pam_labels: Vec<usize> = (0..levels).map(|l| l ^ (l >> 1)).collect();
    let mut level_of_label = vec![0; levels];
    for (level, &label) in pam_labels.iter().enumerate() {
        level_of_label[label] = level;
    }
    let bits_per_symbol = order.trailing_zeros() as usize;
    let half = bits_per_symbol / 2;
    let points = (0..order)
        .map(|label| {
            let i = level_of_label[label >> half];
            let q = level_of_label[label & (levels - 1)];
            Complex64::new(pam_points[i], pam_points[q])
        })
        .collect();
    let mut c = Constellation {
        order,
        bits_per_symbol,
        points,
        priors: Vec::new(),
        pam_points,
        pam_priors: Vec::new(),
        ln_pam_priors: Vec::new(),
        pam_labels,
        level_of_label,
    };
    c.set_pam_priors(&vec![1.0; levels])?;
    Ok(c)
}

impl Constellation {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.bits_per_symbol
    }

    pub fn bits_per_dim(&self) -> usize {
        self.bits_per_symbol / 2
    }

    /// Symbol points indexed by label.
    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    /// PAM amplitudes in ascending order, shared by both real dimensions.
    pub fn pam_points(&self) -> &[f64] {
        &self.pam_points
    }

    pub fn pam_priors(&self) -> &[f64] {
        &self.pam_priors
    }

    pub fn pam_labels(&self) -> &[usize] {
        &self.pam_labels
    }

    pub fn point(&self, label: usize) -> Complex64 {
        self.points[label]
    }

    /// Bit word of a symbol label, most significant bit first.
    pub fn bit_label(&self, label: usize) -> Vec<u8> {
        (0..self.bits_per_symbol)
            .rev()
            .map(|b| ((label >> b) & 1) as u8)
            .collect()
    }

    /// Replace the per-dimension PAM priors (soft input). Normalized here.
    pub fn with_pam_priors(mut self, priors: &[f64]) -> Result<Self> {
        self.set_pam_priors(priors)?;
        Ok(self)
    }

    fn set_pam_priors(&mut self, priors: &[f64]) -> Result<()> {
        if priors.len() != self.pam_points.len() {
            return Err(Error::Dimension {
                context: "PAM priors",
                expected: self.pam_points.len().to_string(),
                got: priors.len().to_string(),
            });
        }
        let total: f64 = priors.iter().sum();
        if priors.iter().any(|p| !(*p >= 0.0)) || !(total > 0.0) || !total.is_finite() {
            return Err(Error::Config("PAM priors must be nonnegative with positive sum".into()));
        }
        self.pam_priors = priors.iter().map(|p| p / total).collect();
        self.ln_pam_priors = self.pam_priors.iter().map(|p| p.ln()).collect();
        let half = self.bits_per_dim();
        let mask = self.pam_points.len() - 1;
        self.priors = (0..self.order)
            .map(|label| {
                self.pam_priors[self.level_of_label[label >> half]] * self.pam_priors[self.level_of_label[label & mask]]
            })
            .collect();
        Ok(())
    }

    /// Max-subtracted log posterior weights over PAM levels.
    fn log_weights(&self, r: f64, tau2: f64, out: &mut [f64; MAX_LEVELS]) -> usize {
        let n = self.pam_points.len();
        let mut max = f64::NEG_INFINITY;
        for (k, (&s, &lp)) in self.pam_points.iter().zip(&self.ln_pam_priors).enumerate() {
            let d = r - s;
            out[k] = lp - d * d / tau2;
            max = max.max(out[k]);
        }
        for w in out.iter_mut().take(n) {
            *w -= max;
        }
        n
    }

    /// Normalized posterior probabilities of the PAM levels given `r`.
    pub fn posterior(&self, r: f64, tau2: f64) -> Vec<f64> {
        let mut lw = [0.0; MAX_LEVELS];
        let n = self.log_weights(r, tau2, &mut lw);
        let w: Vec<f64> = lw[..n].iter().map(|v| v.exp()).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|v| v / z).collect()
    }

    /// Posterior mean and variance of one real dimension.
    pub fn denoise(&self, r: f64, tau2: f64) -> SoftSymbol {
        let mut lw = [0.0; MAX_LEVELS];
        let n = self.log_weights(r, tau2, &mut lw);
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for (&l, &s) in lw[..n].iter().zip(&self.pam_points) {
            let w = l.exp();
            z += w;
            m1 += w * s;
            m2 += w * s * s;
        }
        if !(z > 0.0) || !z.is_finite() || !m1.is_finite() {
            let level = self.nearest_level(r);
            return SoftSymbol {
                mean: self.pam_points[level],
                var: 0.0,
            };
        }
        let mean = m1 / z;
        let var = (m2 / z - mean * mean).max(0.0);
        SoftSymbol { mean, var }
    }

    /// Per-bit LLRs `log P(b=1) / P(b=0)` of the PAM label bits of one real
    /// dimension, most significant bit first.
    pub fn llr_into(&self, r: f64, tau2: f64, out: &mut Vec<f64>) {
        let mut lw = [0.0; MAX_LEVELS];
        let n = self.log_weights(r, tau2, &mut lw);
        let bits = self.bits_per_dim();
        for b in (0..bits).rev() {
            let (mut num, mut den) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for (&label, &w) in self.pam_labels.iter().zip(&lw[..n]) {
                if (label >> b) & 1 == 1 {
                    num = log_add(num, w);
                } else {
                    den = log_add(den, w);
                }
            }
            out.push(num - den);
        }
    }

    /// Nearest PAM level; exact midpoints go to the lower level index.
    pub fn nearest_level(&self, r: f64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, &s) in self.pam_points.iter().enumerate() {
            let d = (r - s).abs();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Nearest symbol label to a complex value.
    pub fn hard_decision(&self, re: f64, im: f64) -> usize {
        let half = self.bits_per_dim();
        (self.pam_labels[self.nearest_level(re)] << half) | self.pam_labels[self.nearest_level(im)]
    }

    /// Labels of the nearest symbols for a real-equivalent vector `[Re; Im]`.
    pub fn hard_decisions_real(&self, x: &DVector<f64>) -> Vec<usize> {
        let n = x.len() / 2;
        (0..n).map(|j| self.hard_decision(x[j], x[j + n])).collect()
    }

    /// Real-equivalent vector `[Re; Im]` of a list of symbol labels.
    pub fn symbols_to_real(&self, labels: &[usize]) -> DVector<f64> {
        let n = labels.len();
        DVector::from_fn(2 * n, |i, _| {
            let p = self.points[labels[i % n]];
            if i < n {
                p.re
            } else {
                p.im
            }
        })
    }

    pub fn labels_to_bits(&self, labels: &[usize]) -> Vec<u8> {
        labels.iter().flat_map(|&l| self.bit_label(l)).collect()
    }

    pub fn bits_to_labels(&self, bits: &[u8]) -> Result<Vec<usize>> {
        let k = self.bits_per_symbol;
        if !bits.len().is_multiple_of(k) {
            return Err(Error::Dimension {
                context: "bits_to_labels",
                expected: format!("multiple of {k}"),
                got: bits.len().to_string(),
            });
        }
        Ok(bits
            .chunks(k)
            .map(|w| w.iter().fold(0usize, |acc, &b| (acc << 1) | (b & 1) as usize))
            .collect())
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn modulate(bits: &[u8], c: &Constellation) -> Result<Vec<Complex64>> {
    Ok(c.bits_to_labels(bits)?.into_iter().map(|l| c.point(l)).collect())
}

pub fn mmse_denoise(r: f64, tau2: f64, c: &Constellation) -> SoftSymbol {
    c.denoise(r, tau2)
}

pub fn llr(r: f64, tau2: f64, c: &Constellation) -> Vec<f64> {
    let mut out = Vec::with_capacity(c.bits_per_dim());
    c.llr_into(r, tau2, &mut out);
    out
}

/// Bits of the nearest symbol to `(re, im)`.
pub fn hard_decision(re: f64, im: f64, c: &Constellation) -> Vec<u8> {
    c.bit_label(c.hard_decision(re, im))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qam(m: usize) -> Constellation {
        make_constellation(m).unwrap()
    }

    #[test]
    fn qpsk_points() {
        let c = qam(4);
        let a = std::f64::consts::FRAC_1_SQRT_2;
        for p in c.points() {
            assert!((p.re.abs() - a).abs() < 1e-15 && (p.im.abs() - a).abs() < 1e-15);
        }
        assert_eq!(c.point(0), Complex64::new(-a, -a));
    }

    #[test]
    fn unit_energy_and_normalized_priors() {
        for m in [4, 16, 64] {
            let c = qam(m);
            let e: f64 = c.points().iter().map(|p| p.norm_sqr()).sum::<f64>() / m as f64;
            assert!((e - 1.0).abs() < 1e-12, "M={m} energy {e}");
            assert!((c.priors().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((c.pam_priors().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sixteen_qam_pam_levels() {
        // (2/4)(c^2 + 9 c^2) * 2 = 1  =>  c = 1/sqrt(10)
        let unit = 1.0 / 10f64.sqrt();
        let c = qam(16);
        let want = [-3.0 * unit, -unit, unit, 3.0 * unit];
        for (a, b) in c.pam_points().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn unsupported_order() {
        assert!(make_constellation(8).is_err());
        assert!(make_constellation(32).is_err());
    }

    #[test]
    fn gray_adjacency() {
        for m in [4, 16, 64] {
            let c = qam(m);
            for w in c.pam_labels().windows(2) {
                assert_eq!((w[0] ^ w[1]).count_ones(), 1);
            }
        }
    }

    #[test]
    fn modulate_zero_bits_and_length_check() {
        let c = qam(4);
        let s = modulate(&[0, 0, 0, 0], &c).unwrap();
        assert_eq!(s, vec![c.point(0), c.point(0)]);
        assert!(modulate(&[0, 1, 1], &c).is_err());
    }

    #[test]
    fn modulate_hard_decision_round_trip() {
        for m in [4, 16, 64] {
            let c = qam(m);
            for label in 0..m {
                let p = c.point(label);
                assert_eq!(c.hard_decision(p.re, p.im), label);
                let bits = c.bit_label(label);
                let back = modulate(&bits, &c).unwrap();
                assert_eq!(hard_decision(back[0].re, back[0].im, &c), bits);
            }
        }
    }

    #[test]
    fn midpoint_goes_to_lower_level() {
        let c = qam(16);
        let p = c.pam_points();
        assert_eq!(c.nearest_level((p[1] + p[2]) / 2.0), 1);
        assert_eq!(c.nearest_level((p[0] + p[1]) / 2.0), 0);
    }

    #[test]
    fn denoiser_symmetry_and_limits() {
        let c = qam(16);
        assert!(c.denoise(0.0, 0.3).mean.abs() < 1e-15);
        let wide = c.denoise(0.2, 1e12);
        assert!(wide.mean.abs() < 1e-9);
        assert!((wide.var - 0.5).abs() < 1e-9);
    }

    #[test]
    fn qpsk_denoiser_closed_form() {
        let c = qam(4);
        let a = std::f64::consts::FRAC_1_SQRT_2;
        let got = c.denoise(0.3, 0.5);
        let want = a * (0.3 * 2f64.sqrt() / 0.5).tanh();
        assert!((got.mean - want).abs() < 1e-14);
        // direct two-point enumeration
        let wp = (-(0.3 - a) * (0.3 - a) / 0.5f64).exp();
        let wm = (-(0.3 + a) * (0.3 + a) / 0.5f64).exp();
        assert!((got.mean - a * (wp - wm) / (wp + wm)).abs() < 1e-14);
        assert!((got.var - (0.5 - got.mean * got.mean)).abs() < 1e-14);
    }

    #[test]
    fn qpsk_llr_closed_form() {
        let c = qam(4);
        let l = llr(0.3, 0.5, &c);
        assert_eq!(l.len(), 1);
        assert!((l[0] - 2.0 * 0.3 * 2f64.sqrt() / 0.5).abs() < 1e-12);
        assert_eq!(llr(0.0, 0.5, &c)[0], 0.0);
    }

    #[test]
    fn sign_bit_llr_monotone() {
        let c = qam(16);
        let mut prev = f64::NEG_INFINITY;
        for k in 0..200 {
            let r = -1.5 + 3.0 * k as f64 / 199.0;
            let l = llr(r, 0.05, &c)[0];
            assert!(l >= prev - 1e-9, "r={r}");
            prev = l;
        }
        assert_eq!(llr(0.0, 0.05, &c)[0], 0.0);
        assert!(llr(1.0, 1e-3, &c)[0] > 100.0);
    }

    #[test]
    fn underflow_falls_back_to_hard_point() {
        let c = qam(4);
        let s = c.denoise(f64::INFINITY, 0.1);
        assert_eq!(s.var, 0.0);
        assert!(s.mean.is_finite());
    }

    #[test]
    fn soft_input_priors_shift_mean() {
        let c = qam(4).with_pam_priors(&[0.9, 0.1]).unwrap();
        assert!(c.denoise(0.0, 1.0).mean < 0.0);
        assert!((c.priors().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(qam(4).with_pam_priors(&[1.0, -1.0]).is_err());
    }
}
