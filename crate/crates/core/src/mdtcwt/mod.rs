//! Modified dual-tree complex wavelet transform for quadrature signals and
//! the wavelet-shrinkage denoiser built on it.
//!
//! Both real-coefficient filter trees run on the complex IQ sequence (the
//! transform is linear, so each tree acts on I and Q at once). Per level the
//! two tree outputs `wa`, `wb` are combined into a positive-frequency band
//! `(wa + j wb)/sqrt 2` and a negative-frequency band `(wa - j wb)/sqrt 2`.
//! Level 1 uses the near-symmetric biorthogonal pair without decimation, the
//! trees being its even and odd output phases; deeper levels use the
//! quarter-shift pair, as in Kingsbury's 1-D DT-CWT.

pub mod filters;
mod lowlevel;

use std::f64::consts::FRAC_1_SQRT_2;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iqsim::IQRecord;
use filters::{NEAR_SYM_A, QSHIFT_A};
use lowlevel::{coldfilt, colfilter, colifilt};

pub const DEFAULT_LEVELS: usize = 3;
const MAX_FILTER_LEN: usize = 10;

type C = Complex64;

#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPyramid {
    /// Positive-frequency detail bands, finest (level 1) first.
    pub pos_detail: Vec<Vec<C>>,
    pub neg_detail: Vec<Vec<C>>,
    pub pos_approx: Vec<C>,
    pub neg_approx: Vec<C>,
    pub n_input: usize,
    pub levels: usize,
}

impl WaveletPyramid {
    /// Detail energy per level, `(positive, negative)`.
    pub fn detail_energy(&self) -> Vec<(f64, f64)> {
        self.pos_detail.iter().zip(&self.neg_detail).map(|(p, n)| (energy(p), energy(n))).collect()
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::shape(format!("corrupt pyramid: {msg}")));
        if self.levels == 0 || self.pos_detail.len() != self.levels || self.neg_detail.len() != self.levels {
            return bad(format!("{} levels but {}/{} detail bands", self.levels, self.pos_detail.len(), self.neg_detail.len()));
        }
        for (k, (p, n)) in self.pos_detail.iter().zip(&self.neg_detail).enumerate() {
            if p.len() != n.len() || p.is_empty() {
                return bad(format!("level {} band lengths {} / {}", k + 1, p.len(), n.len()));
            }
        }
        let deepest = self.pos_detail[self.levels - 1].len();
        if self.pos_approx.len() != deepest || self.neg_approx.len() != deepest {
            return bad(format!("approximation lengths {} / {} vs deepest detail {deepest}", self.pos_approx.len(), self.neg_approx.len()));
        }
        if 2 * self.pos_detail[0].len() != self.n_input + self.n_input % 2 {
            return bad(format!("level 1 holds {} coefficients for {} inputs", self.pos_detail[0].len(), self.n_input));
        }
        Ok(())
    }
}

fn energy(v: &[C]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum()
}

/// Splits interleaved filter-bank output into (positive, negative) bands.
/// Odd phases form tree a, even phases tree b.
fn split_trees(v: &[C]) -> (Vec<C>, Vec<C>) {
    let j = C::new(0.0, 1.0);
    v.chunks_exact(2)
        .map(|ba| {
            let (b, a) = (ba[0], ba[1]);
            ((a + j * b) * FRAC_1_SQRT_2, (a - j * b) * FRAC_1_SQRT_2)
        })
        .unzip()
}

fn merge_trees(pos: &[C], neg: &[C]) -> Vec<C> {
    let j = C::new(0.0, 1.0);
    let mut out = Vec::with_capacity(2 * pos.len());
    for (&p, &n) in pos.iter().zip(neg) {
        out.push(-j * (p - n) * FRAC_1_SQRT_2);
        out.push((p + n) * FRAC_1_SQRT_2);
    }
    out
}

fn add(a: Vec<C>, b: &[C]) -> Vec<C> {
    a.into_iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Forward transform to `levels` levels.
pub fn dt_forward(x: &[C], levels: usize) -> Result<WaveletPyramid> {
    if levels == 0 {
        return Err(Error::invalid("levels must be >= 1"));
    }
    let min_len = (1usize << levels) * MAX_FILTER_LEN;
    if x.len() < min_len {
        return Err(Error::invalid(format!("{} samples is too short for {levels} levels (need >= {min_len})", x.len())));
    }
    let mut input = x.to_vec();
    if input.len() % 2 == 1 {
        input.push(*input.last().unwrap());
    }

    let mut pos_detail = Vec::with_capacity(levels);
    let mut neg_detail = Vec::with_capacity(levels);
    let hi = colfilter(&input, NEAR_SYM_A.h1o);
    let mut lo = colfilter(&input, NEAR_SYM_A.h0o);
    let (p, n) = split_trees(&hi);
    pos_detail.push(p);
    neg_detail.push(n);

    for _ in 1..levels {
        if !lo.len().is_multiple_of(4) {
            let (first, last) = (lo[0], lo[lo.len() - 1]);
            lo.insert(0, first);
            lo.push(last);
        }
        let hi = coldfilt(&lo, QSHIFT_A.h1b, QSHIFT_A.h1a);
        lo = coldfilt(&lo, QSHIFT_A.h0b, QSHIFT_A.h0a);
        let (p, n) = split_trees(&hi);
        pos_detail.push(p);
        neg_detail.push(n);
    }
    let (pos_approx, neg_approx) = split_trees(&lo);
    Ok(WaveletPyramid { pos_detail, neg_detail, pos_approx, neg_approx, n_input: x.len(), levels })
}

/// Inverse transform; exact reconstruction of an untouched pyramid.
pub fn dt_inverse(p: &WaveletPyramid) -> Result<Vec<C>> {
    p.validate()?;
    let mut lo = merge_trees(&p.pos_approx, &p.neg_approx);
    for level in (1..p.levels).rev() {
        let hi = merge_trees(&p.pos_detail[level], &p.neg_detail[level]);
        lo = add(colifilt(&lo, QSHIFT_A.g0b, QSHIFT_A.g0a), &colifilt(&hi, QSHIFT_A.g1b, QSHIFT_A.g1a));
        let want = 2 * p.pos_detail[level - 1].len();
        if lo.len() == want + 2 {
            lo = lo[1..lo.len() - 1].to_vec();
        }
        if lo.len() != want {
            return Err(Error::shape(format!(
                "corrupt pyramid: level {} reconstructs {} samples, level {} expects {want}",
                level + 1,
                lo.len(),
                level
            )));
        }
    }
    let hi = merge_trees(&p.pos_detail[0], &p.neg_detail[0]);
    let mut out = add(colfilter(&lo, NEAR_SYM_A.g0o), &colfilter(&hi, NEAR_SYM_A.g1o));
    out.truncate(p.n_input);
    Ok(out)
}

/// Shrinks `w` towards zero by `t`, keeping its phase.
pub fn soft_threshold(w: C, t: f64) -> C {
    let mag = w.norm();
    if mag <= t {
        C::new(0.0, 0.0)
    } else {
        w * ((mag - t) / mag)
    }
}

/// Keeps `w` unchanged above `t`, zero otherwise.
pub fn hard_threshold(w: C, t: f64) -> C {
    if w.norm() <= t {
        C::new(0.0, 0.0)
    } else {
        w
    }
}

/// Robust noise level from level-1 detail coefficients: for circular complex
/// Gaussian noise `|w|` is Rayleigh with median `sigma * sqrt(2 ln 2)`.
pub fn estimate_sigma(level1_detail: &[C]) -> Result<f64> {
    if level1_detail.is_empty() {
        return Err(Error::invalid("cannot estimate noise from an empty band"));
    }
    let mut mags: Vec<f64> = level1_detail.iter().map(|c| c.norm()).collect();
    mags.sort_by(f64::total_cmp);
    let n = mags.len();
    let median = if n % 2 == 1 { mags[n / 2] } else { 0.5 * (mags[n / 2 - 1] + mags[n / 2]) };
    Ok(median / (2.0 * std::f64::consts::LN_2).sqrt())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    #[default]
    Soft,
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseOptions {
    pub levels: usize,
    pub rule: ThresholdRule,
}

impl Default for DenoiseOptions {
    fn default() -> Self {
        DenoiseOptions { levels: DEFAULT_LEVELS, rule: ThresholdRule::Soft }
    }
}

/// Universal-threshold shrinkage of every detail band of `p` in place;
/// returns the noise estimate used.
pub fn shrink(p: &mut WaveletPyramid, rule: ThresholdRule) -> Result<f64> {
    let mut level1 = p.pos_detail[0].clone();
    level1.extend_from_slice(&p.neg_detail[0]);
    let sigma = estimate_sigma(&level1)?;
    let apply = match rule {
        ThresholdRule::Soft => soft_threshold,
        ThresholdRule::Hard => hard_threshold,
    };
    for band in p.pos_detail.iter_mut().chain(p.neg_detail.iter_mut()) {
        let t = sigma * (2.0 * (band.len() as f64).ln()).sqrt();
        band.iter_mut().for_each(|w| *w = apply(*w, t));
    }
    Ok(sigma)
}

/// Soft-threshold denoising with the default three-level decomposition.
pub fn denoise(iq: &IQRecord, levels: usize) -> Result<IQRecord> {
    denoise_with(iq, DenoiseOptions { levels, ..DenoiseOptions::default() })
}

pub fn denoise_with(iq: &IQRecord, opts: DenoiseOptions) -> Result<IQRecord> {
    let mut pyr = dt_forward(&iq.samples, opts.levels)?;
    shrink(&mut pyr, opts.rule)?;
    let out = dt_inverse(&pyr)?;
    let stage = match opts.rule {
        ThresholdRule::Soft => format!("mdtcwt_soft_l{}", opts.levels),
        ThresholdRule::Hard => format!("mdtcwt_hard_l{}", opts.levels),
    };
    let rec = iq.with_samples(out, &stage);
    rec.check_finite()?;
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::PI;

    fn random_complex(n: usize, seed: u64) -> Vec<C> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| C::new(rng.sample(StandardNormal), rng.sample(StandardNormal))).collect()
    }

    fn rel_err(a: &[C], b: &[C]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
        (num / energy(b)).sqrt()
    }

    #[test]
    fn round_trip_random_signal() {
        let x = random_complex(1024, 1);
        let p = dt_forward(&x, 3).unwrap();
        let y = dt_inverse(&p).unwrap();
        assert!(rel_err(&y, &x) <= 1e-8, "{}", rel_err(&y, &x));
    }

    #[test]
    fn round_trip_odd_and_unaligned_lengths() {
        for (n, levels) in [(1000, 3), (1001, 2), (3072, 4), (642, 4), (170, 4)] {
            let x = random_complex(n, n as u64);
            let p = dt_forward(&x, levels).unwrap();
            let y = dt_inverse(&p).unwrap();
            assert_eq!(y.len(), n);
            assert!(rel_err(&y, &x) <= 1e-8, "n={n} L={levels}: {}", rel_err(&y, &x));
        }
    }

    #[test]
    fn round_trip_impulse() {
        let mut x = vec![C::new(0.0, 0.0); 512];
        x[200] = C::new(1.0, 0.0);
        let y = dt_inverse(&dt_forward(&x, 3).unwrap()).unwrap();
        let peak = (0..512).max_by(|&a, &b| y[a].norm().total_cmp(&y[b].norm())).unwrap();
        assert_eq!(peak, 200);
        let worst = x.iter().zip(&y).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(worst <= 1e-8);
    }

    #[test]
    fn band_lengths_halve_per_level() {
        let p = dt_forward(&random_complex(3072, 2), 3).unwrap();
        let lens: Vec<usize> = p.pos_detail.iter().map(Vec::len).collect();
        assert_eq!(lens, vec![1536, 768, 384]);
        assert_eq!(p.pos_approx.len(), 384);
    }

    #[test]
    fn zeros_stay_zero() {
        let p = dt_forward(&vec![C::new(0.0, 0.0); 1024], 3).unwrap();
        assert!(p.detail_energy().iter().all(|&(a, b)| a == 0.0 && b == 0.0));
        assert!(p.pos_approx.iter().chain(&p.neg_approx).all(|c| c.norm() == 0.0));
    }

    #[test]
    fn analytic_tone_lands_in_positive_bands() {
        // 2.5 kHz at 10 kHz PRF, centre of the level-1 band.
        let x: Vec<C> = (0..1024).map(|n| C::from_polar(1.0, 2.0 * PI * 0.25 * n as f64)).collect();
        let e = dt_forward(&x, 3).unwrap().detail_energy();
        let pos: f64 = e.iter().map(|v| v.0).sum();
        let neg: f64 = e.iter().map(|v| v.1).sum();
        assert!(pos >= 0.9 * (pos + neg), "pos {pos} neg {neg}");
    }

    #[test]
    fn band_matched_level_separates_signs() {
        // Band centres in cycles/sample halve per level.
        for (level, f) in [(0usize, 0.25), (1, 0.125), (2, 0.0625)] {
            for sign in [1.0, -1.0] {
                let x: Vec<C> = (0..2048).map(|n| C::from_polar(1.0, sign * 2.0 * PI * f * n as f64)).collect();
                let (p, n) = dt_forward(&x, 3).unwrap().detail_energy()[level];
                let (hit, miss) = if sign > 0.0 { (p, n) } else { (n, p) };
                assert!(hit >= 9.0 * miss, "level {} f {}: {hit} vs {miss}", level + 1, sign * f);
            }
        }
    }

    #[test]
    fn conjugation_swaps_band_energies() {
        let x = random_complex(1024, 5);
        let xc: Vec<C> = x.iter().map(|c| c.conj()).collect();
        let a = dt_forward(&x, 3).unwrap().detail_energy();
        let b = dt_forward(&xc, 3).unwrap().detail_energy();
        for ((ap, an), (bp, bn)) in a.iter().zip(&b) {
            assert!((ap - bn).abs() <= 1e-9 * ap.max(1.0));
            assert!((an - bp).abs() <= 1e-9 * an.max(1.0));
        }
    }

    #[test]
    fn too_short_or_corrupt_inputs_rejected() {
        assert!(dt_forward(&random_complex(64, 0), 3).is_err());
        assert!(dt_forward(&random_complex(1024, 0), 0).is_err());
        let mut p = dt_forward(&random_complex(1024, 0), 3).unwrap();
        p.pos_detail[1].pop();
        assert!(dt_inverse(&p).is_err());
        let mut p = dt_forward(&random_complex(1024, 0), 3).unwrap();
        p.pos_detail.pop();
        assert!(dt_inverse(&p).is_err());
    }

    #[test]
    fn soft_threshold_rules() {
        assert_eq!(soft_threshold(C::new(0.6, 0.8), 1.0), C::new(0.0, 0.0));
        let theta = 0.77;
        let w = soft_threshold(C::from_polar(4.0, theta), 2.0);
        assert!((w.norm() - 2.0).abs() < 1e-12);
        assert!((w.arg() - theta).abs() < 1e-12);
        // (3+4j) * (5-1)/5 computed by hand: 2.4 + 3.2j.
        let w = soft_threshold(C::new(3.0, 4.0), 1.0);
        assert!((w - C::new(2.4, 3.2)).norm() < 1e-12);
        assert_eq!(soft_threshold(C::new(3.0, 4.0), 0.0), C::new(3.0, 4.0));
    }

    #[test]
    fn sigma_estimate_on_gaussian_noise() {
        // Per-component standard deviation 1.
        let w = random_complex(4096, 77);
        let s = estimate_sigma(&w).unwrap();
        assert!((0.9..=1.1).contains(&s), "{s}");
        assert_eq!(estimate_sigma(&[C::new(0.0, 0.0); 10]).unwrap(), 0.0);
        assert!(estimate_sigma(&[]).is_err());
    }

    #[test]
    fn sigma_estimate_is_homogeneous() {
        let w = random_complex(1001, 3);
        let s = estimate_sigma(&w).unwrap();
        for c in [2.0, 0.5, 8.0] {
            let scaled: Vec<C> = w.iter().map(|v| v * c).collect();
            assert_eq!(estimate_sigma(&scaled).unwrap(), s * c);
        }
    }

    fn heli3(n: usize, seed: u64) -> IQRecord {
        use crate::iqsim::{class_presets, simulate_rotor_iq, ClassId, CpiSpec};
        simulate_rotor_iq(&class_presets(ClassId::Heli3), &CpiSpec::new(n), seed).unwrap()
    }

    fn dist(a: &[C], b: &[C]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt()
    }

    #[test]
    fn round_trip_simulated_record() {
        let rec = heli3(3072, 4);
        let y = dt_inverse(&dt_forward(&rec.samples, 3).unwrap()).unwrap();
        assert!(rel_err(&y, &rec.samples) <= 1e-8);
    }

    #[test]
    fn denoise_is_near_identity_on_clean_records() {
        let rec = heli3(3072, 5);
        let out = denoise(&rec, 3).unwrap();
        let snr = crate::dsp::snr_db(&rec, &out).unwrap();
        assert!(snr >= 20.0, "{snr} dB");
        assert_eq!(out.meta.processing.last().map(String::as_str), Some("mdtcwt_soft_l3"));
    }

    #[test]
    fn denoise_gains_on_noisy_heli3() {
        let clean = heli3(3072, 6);
        let noisy = crate::iqsim::add_noise(&clean, 0.0, 60).unwrap();
        let out = denoise(&noisy, 3).unwrap();
        let before = crate::dsp::snr_db(&clean, &noisy).unwrap();
        let after = crate::dsp::snr_db(&clean, &out).unwrap();
        assert!(after - before >= 3.0, "{before} -> {after}");
    }

    #[test]
    fn second_pass_changes_less_than_first() {
        let x = crate::iqsim::add_noise(&heli3(2048, 7), 5.0, 70).unwrap();
        let d1 = denoise(&x, 3).unwrap();
        let d2 = denoise(&d1, 3).unwrap();
        assert!(dist(&d2.samples, &d1.samples) <= dist(&d1.samples, &x.samples));
    }

    #[test]
    fn hard_rule_is_reachable() {
        let x = crate::iqsim::add_noise(&heli3(1024, 8), 0.0, 80).unwrap();
        let out = denoise_with(&x, DenoiseOptions { levels: 3, rule: ThresholdRule::Hard }).unwrap();
        assert_eq!(out.meta.processing.last().map(String::as_str), Some("mdtcwt_hard_l3"));
        assert!(denoise(&heli3(1024, 8), 7).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]

            #[test]
            fn perfect_reconstruction(len in prop::sample::select(vec![512usize, 1024, 3072]), levels in 1usize..=4, seed in any::<u64>()) {
                let x = random_complex(len, seed);
                let y = dt_inverse(&dt_forward(&x, levels).unwrap()).unwrap();
                prop_assert!(rel_err(&y, &x) <= 1e-8);
            }

            #[test]
            fn forward_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
                let x = random_complex(512, seed);
                let y = random_complex(512, seed ^ 0x5555);
                let z: Vec<C> = x.iter().zip(&y).map(|(u, v)| u * a + v * b).collect();
                let (px, py, pz) = (dt_forward(&x, 3).unwrap(), dt_forward(&y, 3).unwrap(), dt_forward(&z, 3).unwrap());
                let bands = |p: &WaveletPyramid| -> Vec<C> {
                    p.pos_detail.iter().chain(&p.neg_detail).flatten().chain(&p.pos_approx).chain(&p.neg_approx).copied().collect()
                };
                for ((u, v), w) in bands(&px).iter().zip(bands(&py)).zip(bands(&pz)) {
                    prop_assert!((u * a + v * b - w).norm() <= 1e-10);
                }
            }

            #[test]
            fn thresholding_never_grows(re in -10.0f64..10.0, im in -10.0f64..10.0, t in 0.0f64..12.0) {
                let w = C::new(re, im);
                prop_assert!(soft_threshold(w, t).norm() <= w.norm());
                prop_assert!(hard_threshold(w, t).norm() <= w.norm());
            }
        }
    }
}
