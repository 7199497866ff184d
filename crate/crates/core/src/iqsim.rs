//! Synthetic complex-baseband returns of rotating-blade targets.
//!
//! Each blade is a line of point scatterers between its root and tip radius.
//! The return of a scatterer at radius `r` on a blade at angle `theta(t)` is
//! `A * exp(-j * 4*pi/lambda * r * cos(theta(t)))`, summed coherently over
//! scatterers, blades and rotors, plus a constant body echo at zero Doppler.
//! A blade flashes whenever it is perpendicular to the line of sight,
//! i.e. `theta(t) mod pi == pi/2`; those instants are reported as ground truth.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, RNG_ALGORITHM};

/// C band, 5.6 GHz.
pub const DEFAULT_WAVELENGTH_M: f64 = 0.0536;
pub const DEFAULT_PRF_HZ: f64 = 10_000.0;
/// CPI lengths the rest of the pipeline accepts.
pub const CPI_PULSES: [usize; 3] = [1024, 2048, 3072];
/// Lower bound on scatterers per blade.
pub const MIN_SCATTERERS_PER_BLADE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassId {
    /// Hexacopter, six two-blade rotors.
    Drone6x2,
    /// Light helicopter, one three-blade main rotor.
    Heli3,
    /// Battlefield helicopter, one four-blade main rotor.
    Heli4,
}

impl ClassId {
    pub const ALL: [ClassId; 3] = [ClassId::Drone6x2, ClassId::Heli3, ClassId::Heli4];

    pub fn index(self) -> usize {
        match self {
            ClassId::Drone6x2 => 0,
            ClassId::Heli3 => 1,
            ClassId::Heli4 => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<ClassId> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassId::Drone6x2 => "Drone6x2",
            ClassId::Heli3 => "Heli3",
            ClassId::Heli4 => "Heli4",
        }
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.iter().copied().find(|c| c.name().eq_ignore_ascii_case(s)).ok_or_else(|| Error::invalid(format!("unknown class id {s:?}")))
    }
}

/// Per-rotor revolution rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationRate {
    Fixed(f64),
    /// Each rotor draws its own rate uniformly from `[min_hz, max_hz]`.
    Uniform {
        min_hz: f64,
        max_hz: f64,
    },
}

impl RotationRate {
    fn min_hz(&self) -> f64 {
        match *self {
            RotationRate::Fixed(f) => f,
            RotationRate::Uniform { min_hz, .. } => min_hz,
        }
    }
}

/// Sense of rotation; `Reverse` runs the blade angle backwards in time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spin {
    #[default]
    Forward,
    Reverse,
}

impl Spin {
    fn sign(self) -> f64 {
        match self {
            Spin::Forward => 1.0,
            Spin::Reverse => -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotorParams {
    pub class_id: ClassId,
    pub rotor_count: usize,
    pub blades_per_rotor: usize,
    pub blade_root_m: f64,
    pub blade_tip_m: f64,
    pub rotation: RotationRate,
    #[serde(default)]
    pub spin: Spin,
    /// One angle per rotor; drawn from the seed when absent.
    #[serde(default)]
    pub initial_phase_rad: Option<Vec<f64>>,
    /// Body echo amplitude relative to one blade's full coherent return.
    pub body_rcs_rel: f64,
}

impl RotorParams {
    /// Checks the parameter invariants, including that at least one blade
    /// flash falls inside a CPI of `cpi`.
    pub fn validate(&self, cpi: &CpiSpec) -> Result<()> {
        if self.rotor_count == 0 {
            return Err(Error::invalid("rotor_count must be at least 1"));
        }
        if !(2..=4).contains(&self.blades_per_rotor) {
            return Err(Error::invalid(format!("blades_per_rotor must be 2, 3 or 4, got {}", self.blades_per_rotor)));
        }
        if !(self.blade_root_m >= 0.0 && self.blade_tip_m > self.blade_root_m) {
            return Err(Error::invalid(format!("need 0 <= blade_root_m < blade_tip_m, got {} / {}", self.blade_root_m, self.blade_tip_m)));
        }
        match self.rotation {
            RotationRate::Fixed(f) if !(f > 0.0 && f.is_finite()) => {
                return Err(Error::invalid(format!("rotation must be positive, got {f} Hz")));
            }
            RotationRate::Uniform { min_hz, max_hz } if !(min_hz > 0.0 && max_hz >= min_hz && max_hz.is_finite()) => {
                return Err(Error::invalid(format!("rotation band must satisfy 0 < min <= max, got [{min_hz}, {max_hz}] Hz")));
            }
            _ => {}
        }
        if let Some(phases) = &self.initial_phase_rad {
            if phases.len() != self.rotor_count || phases.iter().any(|p| !p.is_finite()) {
                return Err(Error::invalid("initial_phase_rad needs one finite angle per rotor"));
            }
        }
        if !self.body_rcs_rel.is_finite() || self.body_rcs_rel < 0.0 {
            return Err(Error::invalid("body_rcs_rel must be finite and non-negative"));
        }
        let interval = 1.0 / (self.blades_per_rotor as f64 * self.rotation.min_hz());
        if interval > cpi.duration_s() {
            return Err(Error::invalid(format!("flash interval {:.4} s exceeds CPI duration {:.4} s", interval, cpi.duration_s())));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpiSpec {
    pub prf_hz: f64,
    pub n_pulses: usize,
    pub wavelength_m: f64,
}

impl CpiSpec {
    pub fn new(n_pulses: usize) -> Self {
        CpiSpec { prf_hz: DEFAULT_PRF_HZ, n_pulses, wavelength_m: DEFAULT_WAVELENGTH_M }
    }

    pub fn duration_s(&self) -> f64 {
        self.n_pulses as f64 / self.prf_hz
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.prf_hz > 0.0 && self.prf_hz.is_finite()) {
            return Err(Error::invalid(format!("prf_hz must be positive, got {}", self.prf_hz)));
        }
        if !CPI_PULSES.contains(&self.n_pulses) {
            return Err(Error::invalid(format!("n_pulses must be one of {CPI_PULSES:?}, got {}", self.n_pulses)));
        }
        if !(self.wavelength_m > 0.0 && self.wavelength_m.is_finite()) {
            return Err(Error::invalid("wavelength_m must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IqMeta {
    pub class_id: Option<ClassId>,
    pub seed: u64,
    /// `None` means noiseless.
    pub snr_db: Option<f64>,
    pub flash_times_s: Vec<f64>,
    #[serde(default)]
    pub rng: String,
    /// Mean power of the blade return alone (body echo excluded).
    #[serde(default)]
    pub rotor_power: Option<f64>,
    /// Processing stages applied after simulation, in order.
    #[serde(default)]
    pub processing: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IQRecord {
    pub samples: Vec<Complex64>,
    pub prf_hz: f64,
    pub wavelength_m: f64,
    pub meta: IqMeta,
}

impl IQRecord {
    pub fn n_pulses(&self) -> usize {
        self.samples.len()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.prf_hz
    }

    pub fn mean_power(&self) -> f64 {
        mean_power(&self.samples)
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.samples.iter().all(|s| s.re.is_finite() && s.im.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric("IQ record contains non-finite samples".into()))
        }
    }

    pub(crate) fn with_samples(&self, samples: Vec<Complex64>, stage: &str) -> IQRecord {
        let mut meta = self.meta.clone();
        meta.processing.push(stage.to_string());
        IQRecord { samples, prf_hz: self.prf_hz, wavelength_m: self.wavelength_m, meta }
    }
}

pub(crate) fn mean_power(samples: &[Complex64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / samples.len() as f64
}

/// Default preset for a class.
pub fn class_presets(class_id: ClassId) -> RotorParams {
    match class_id {
        ClassId::Drone6x2 => RotorParams {
            class_id,
            rotor_count: 6,
            blades_per_rotor: 2,
            blade_root_m: 0.03,
            blade_tip_m: 0.26,
            rotation: RotationRate::Uniform { min_hz: 40.0, max_hz: 70.0 },
            spin: Spin::Forward,
            initial_phase_rad: None,
            body_rcs_rel: 10.0,
        },
        ClassId::Heli3 => RotorParams {
            class_id,
            rotor_count: 1,
            blades_per_rotor: 3,
            blade_root_m: 0.6,
            blade_tip_m: 4.5,
            rotation: RotationRate::Fixed(8.5),
            spin: Spin::Forward,
            initial_phase_rad: None,
            body_rcs_rel: 10.0,
        },
        ClassId::Heli4 => RotorParams {
            class_id,
            rotor_count: 1,
            blades_per_rotor: 4,
            blade_root_m: 1.2,
            blade_tip_m: 7.85,
            rotation: RotationRate::Fixed(4.4),
            spin: Spin::Forward,
            initial_phase_rad: None,
            body_rcs_rel: 10.0,
        },
    }
}

/// Scatterer count for a blade of length `span_m`: at least
/// [`MIN_SCATTERERS_PER_BLADE`], and dense enough (spacing <= lambda/4) that
/// the discrete line produces no grating-lobe flashes.
pub fn scatterers_per_blade(span_m: f64, wavelength_m: f64) -> usize {
    let dense = (4.0 * span_m / wavelength_m).ceil() as usize + 1;
    dense.max(MIN_SCATTERERS_PER_BLADE)
}

struct Rotor {
    omega: f64,
    phase: f64,
}

fn draw_rotors(params: &RotorParams, seed: u64) -> Vec<Rotor> {
    let mut rng = rng_from_seed(derive_seed(seed, 1));
    (0..params.rotor_count)
        .map(|i| {
            let hz = match params.rotation {
                RotationRate::Fixed(f) => f,
                RotationRate::Uniform { min_hz, max_hz } => min_hz + (max_hz - min_hz) * rng.gen::<f64>(),
            };
            let drawn = TAU * rng.gen::<f64>();
            let phase = params.initial_phase_rad.as_ref().map_or(drawn, |p| p[i]);
            Rotor { omega: params.spin.sign() * TAU * hz, phase }
        })
        .collect()
}

/// All instants in `[0, duration]` at which some blade is perpendicular to
/// the line of sight, sorted and deduplicated.
fn flash_times(rotors: &[Rotor], blades: usize, duration: f64) -> Vec<f64> {
    let mut times = Vec::new();
    for rotor in rotors {
        for b in 0..blades {
            let phi = rotor.phase + TAU * b as f64 / blades as f64;
            // Solve omega*t + phi = pi/2 + k*pi for t.
            let k_lo = ((phi.min(rotor.omega * duration + phi) - PI / 2.0) / PI).floor() as i64 - 1;
            let k_hi = ((phi.max(rotor.omega * duration + phi) - PI / 2.0) / PI).ceil() as i64 + 1;
            for k in k_lo..=k_hi {
                let t = (PI / 2.0 + k as f64 * PI - phi) / rotor.omega;
                if t >= 0.0 && t <= duration {
                    times.push(t);
                }
            }
        }
    }
    times.sort_by(f64::total_cmp);
    times.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * duration.max(1.0));
    times
}

/// Simulates one CPI of a rotorcraft echo.
pub fn simulate_rotor_iq(params: &RotorParams, cpi: &CpiSpec, seed: u64) -> Result<IQRecord> {
    cpi.validate()?;
    params.validate(cpi)?;

    let rotors = draw_rotors(params, seed);
    let blades = params.blades_per_rotor;
    let span = params.blade_tip_m - params.blade_root_m;
    let k_count = scatterers_per_blade(span, cpi.wavelength_m);
    let amp = 1.0 / k_count as f64;
    let dr = span / (k_count - 1) as f64;
    let wave = 4.0 * PI / cpi.wavelength_m;

    let mut body_rng = rng_from_seed(derive_seed(seed, 2));
    let body_phase = TAU * body_rng.gen::<f64>();
    let body = Complex64::from_polar(params.body_rcs_rel, body_phase);

    let mut blade_sum = vec![Complex64::new(0.0, 0.0); cpi.n_pulses];
    for (n, out) in blade_sum.iter_mut().enumerate() {
        let t = n as f64 / cpi.prf_hz;
        let mut acc = Complex64::new(0.0, 0.0);
        for rotor in &rotors {
            for b in 0..blades {
                let theta = rotor.omega * t + rotor.phase + TAU * b as f64 / blades as f64;
                let c = theta.cos();
                // Phase is linear in scatterer index: step with a unit rotator.
                let mut term = Complex64::from_polar(amp, -wave * params.blade_root_m * c);
                let step = Complex64::from_polar(1.0, -wave * dr * c);
                for _ in 0..k_count {
                    acc += term;
                    term *= step;
                }
            }
        }
        *out = acc;
    }

    let rotor_power = mean_power(&blade_sum);
    let samples = blade_sum.into_iter().map(|s| s + body).collect();
    let meta = IqMeta {
        class_id: Some(params.class_id),
        seed,
        snr_db: None,
        flash_times_s: flash_times(&rotors, blades, cpi.duration_s()),
        rng: RNG_ALGORITHM.to_string(),
        rotor_power: Some(rotor_power),
        processing: Vec::new(),
    };
    let rec = IQRecord { samples, prf_hz: cpi.prf_hz, wavelength_m: cpi.wavelength_m, meta };
    rec.check_finite()?;
    Ok(rec)
}

/// Adds circular white Gaussian noise at `snr_db` relative to the record's
/// own mean power. `+inf` leaves the samples unchanged.
pub fn add_noise(iq: &IQRecord, snr_db: f64, seed: u64) -> Result<IQRecord> {
    add_noise_relative(iq, snr_db, iq.mean_power(), seed)
}

/// Like [`add_noise`], but the SNR is measured against `reference_power`
/// (for example the blade-only power in `meta.rotor_power`).
pub fn add_noise_relative(iq: &IQRecord, snr_db: f64, reference_power: f64, seed: u64) -> Result<IQRecord> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::invalid(format!("snr_db must be finite or +inf, got {snr_db}")));
    }
    if !(reference_power >= 0.0 && reference_power.is_finite()) {
        return Err(Error::invalid("reference power must be finite and non-negative"));
    }
    if snr_db == f64::INFINITY {
        let mut out = iq.clone();
        out.meta.snr_db = None;
        return Ok(out);
    }
    let variance = reference_power / 10f64.powf(snr_db / 10.0);
    let component_std = (variance / 2.0).sqrt();
    let mut rng = rng_from_seed(seed);
    let samples = iq
        .samples
        .iter()
        .map(|s| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            s + Complex64::new(re, im) * component_std
        })
        .collect();
    let mut out = iq.with_samples(samples, "noise");
    out.meta.snr_db = Some(snr_db);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed(class: ClassId, phase: f64) -> RotorParams {
        let mut p = class_presets(class);
        p.initial_phase_rad = Some(vec![phase; p.rotor_count]);
        p
    }

    /// Independent oracle: scan a fine time grid for sign changes of
    /// cos(theta_b(t)) and merge crossings closer than the grid step.
    fn brute_force_flash_count(omega: f64, phase: f64, blades: usize, dur: f64) -> usize {
        let steps = 2_000_000;
        let dt = dur / steps as f64;
        let mut hits: Vec<f64> = Vec::new();
        for b in 0..blades {
            let phi = phase + TAU * b as f64 / blades as f64;
            let mut prev = phi.cos();
            for i in 1..=steps {
                let t = i as f64 * dt;
                let cur = (omega * t + phi).cos();
                if prev == 0.0 || prev.signum() != cur.signum() {
                    hits.push(t);
                }
                prev = cur;
            }
        }
        hits.sort_by(f64::total_cmp);
        hits.dedup_by(|a, b| (*a - *b).abs() < 4.0 * dt);
        hits.len()
    }

    #[test]
    fn presets_match_blade_counts() {
        let d = class_presets(ClassId::Drone6x2);
        assert_eq!((d.rotor_count, d.blades_per_rotor), (6, 2));
        let h3 = class_presets(ClassId::Heli3);
        assert_eq!((h3.rotor_count, h3.blades_per_rotor), (1, 3));
        let h4 = class_presets(ClassId::Heli4);
        assert_eq!((h4.rotor_count, h4.blades_per_rotor), (1, 4));
    }

    #[test]
    fn class_id_round_trips_through_names() {
        for c in ClassId::ALL {
            assert_eq!(c.name().parse::<ClassId>().unwrap(), c);
            assert_eq!(ClassId::from_index(c.index()), Some(c));
        }
        assert!("Tricopter".parse::<ClassId>().is_err());
    }

    #[test]
    fn heli4_short_cpi_flash_count() {
        let cpi = CpiSpec::new(1024);
        for seed in 0..20 {
            let rec = simulate_rotor_iq(&class_presets(ClassId::Heli4), &cpi, seed).unwrap();
            let n = rec.meta.flash_times_s.len();
            assert!((1..=4).contains(&n), "seed {seed}: {n} flashes");
        }
    }

    #[test]
    fn flash_times_agree_with_grid_scan() {
        let omega = TAU * 4.4;
        for phase in [0.0, 0.3, 1.1, 2.9, 5.0] {
            let rotors = [Rotor { omega, phase }];
            let analytic = flash_times(&rotors, 4, 0.1024).len();
            let scanned = brute_force_flash_count(omega, phase, 4, 0.1024);
            assert_eq!(analytic, scanned, "phase {phase}");
        }
    }

    #[test]
    fn heli3_long_cpi_flash_count() {
        let expected = (2.0f64 * 3.0 * 8.5 * 0.3072).round() as i64;
        let cpi = CpiSpec::new(3072);
        for seed in 0..10 {
            let rec = simulate_rotor_iq(&class_presets(ClassId::Heli3), &cpi, seed).unwrap();
            let n = rec.meta.flash_times_s.len() as i64;
            assert!((n - expected).abs() <= 1, "seed {seed}: {n} vs {expected}");
        }
    }

    #[test]
    fn zero_rotation_rejected() {
        let mut p = class_presets(ClassId::Heli3);
        p.rotation = RotationRate::Fixed(0.0);
        assert!(simulate_rotor_iq(&p, &CpiSpec::new(1024), 0).is_err());
        p.rotation = RotationRate::Fixed(-3.0);
        assert!(simulate_rotor_iq(&p, &CpiSpec::new(1024), 0).is_err());
    }

    #[test]
    fn slow_rotor_violating_flash_guarantee_rejected() {
        let mut p = class_presets(ClassId::Heli4);
        // One flash every 1/(4*2) = 125 ms > 102.4 ms.
        p.rotation = RotationRate::Fixed(2.0);
        assert!(simulate_rotor_iq(&p, &CpiSpec::new(1024), 0).is_err());
        assert!(simulate_rotor_iq(&p, &CpiSpec::new(2048), 0).is_ok());
    }

    #[test]
    fn bad_geometry_rejected() {
        let mut p = class_presets(ClassId::Heli3);
        p.blade_tip_m = p.blade_root_m;
        assert!(p.validate(&CpiSpec::new(1024)).is_err());
        let mut p = class_presets(ClassId::Heli3);
        p.blades_per_rotor = 5;
        assert!(p.validate(&CpiSpec::new(1024)).is_err());
        let mut p = class_presets(ClassId::Heli3);
        p.rotor_count = 0;
        assert!(p.validate(&CpiSpec::new(1024)).is_err());
        assert!(CpiSpec::new(1000).validate().is_err());
    }

    #[test]
    fn simulation_is_deterministic() {
        let cpi = CpiSpec::new(1024);
        let p = class_presets(ClassId::Drone6x2);
        let a = simulate_rotor_iq(&p, &cpi, 42).unwrap();
        let b = simulate_rotor_iq(&p, &cpi, 42).unwrap();
        assert_eq!(a, b);
        let c = simulate_rotor_iq(&p, &cpi, 43).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn every_record_has_a_flash() {
        for (i, class) in ClassId::ALL.iter().enumerate() {
            for &n in &CPI_PULSES {
                for seed in 0..5 {
                    let rec = simulate_rotor_iq(&class_presets(*class), &CpiSpec::new(n), seed + 10 * i as u64).unwrap();
                    assert!(!rec.meta.flash_times_s.is_empty());
                    assert_eq!(rec.n_pulses(), n);
                }
            }
        }
    }

    #[test]
    fn flash_sample_carries_full_blade_amplitude() {
        // Blade 0 perpendicular at t = 0: all scatterers add in phase.
        let mut p = fixed(ClassId::Heli3, PI / 2.0);
        p.body_rcs_rel = 0.0;
        let rec = simulate_rotor_iq(&p, &CpiSpec::new(1024), 0).unwrap();
        assert!(rec.meta.flash_times_s[0].abs() < 1e-12);
        assert!(rec.samples[0].norm() > 0.99);
        let off_flash = rec.samples[100].norm();
        assert!(off_flash < 0.2, "off-flash magnitude {off_flash}");
    }

    #[test]
    fn reversed_spin_conjugates_blade_return() {
        let cpi = CpiSpec::new(1024);
        let phase = 0.7;
        let mut rev = fixed(ClassId::Heli4, phase);
        rev.spin = Spin::Reverse;
        rev.body_rcs_rel = 0.0;
        let mut fwd = fixed(ClassId::Heli4, -phase - PI);
        fwd.body_rcs_rel = 0.0;
        let a = simulate_rotor_iq(&rev, &cpi, 1).unwrap();
        let b = simulate_rotor_iq(&fwd, &cpi, 1).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert!((x - y.conj()).norm() < 1e-9);
        }
    }

    #[test]
    fn infinite_snr_is_identity() {
        let rec = simulate_rotor_iq(&class_presets(ClassId::Heli3), &CpiSpec::new(1024), 3).unwrap();
        let out = add_noise(&rec, f64::INFINITY, 9).unwrap();
        assert_eq!(out.samples, rec.samples);
        assert_eq!(out.meta.snr_db, None);
    }

    #[test]
    fn zero_db_noise_matches_signal_power() {
        let rec = simulate_rotor_iq(&class_presets(ClassId::Heli3), &CpiSpec::new(3072), 4).unwrap();
        let noisy = add_noise(&rec, 0.0, 11).unwrap();
        let noise: Vec<Complex64> = noisy.samples.iter().zip(&rec.samples).map(|(a, b)| a - b).collect();
        let ratio = mean_power(&noise) / rec.mean_power();
        assert!((ratio - 1.0).abs() < 0.1, "noise/signal power {ratio}");
        assert_eq!(noisy.meta.snr_db, Some(0.0));
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let rec = simulate_rotor_iq(&class_presets(ClassId::Heli4), &CpiSpec::new(1024), 5).unwrap();
        let a = add_noise(&rec, 7.0, 100).unwrap();
        let b = add_noise(&rec, 7.0, 100).unwrap();
        assert_eq!(a.samples, b.samples);
        assert!(add_noise(&rec, f64::NAN, 0).is_err());
    }

    #[test]
    fn rotor_power_excludes_body() {
        let mut p = class_presets(ClassId::Heli3);
        p.initial_phase_rad = Some(vec![0.4]);
        let with_body = simulate_rotor_iq(&p, &CpiSpec::new(1024), 8).unwrap();
        p.body_rcs_rel = 0.0;
        let bare = simulate_rotor_iq(&p, &CpiSpec::new(1024), 8).unwrap();
        let rp = with_body.meta.rotor_power.unwrap();
        assert!((rp - bare.mean_power()).abs() < 1e-12);
        assert!(with_body.mean_power() > 50.0 * rp);
    }
}
