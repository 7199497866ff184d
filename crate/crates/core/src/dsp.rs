//! Clutter highpass, short-time Fourier transform and spectrogram rendering.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iqsim::{ClassId, IQRecord};

/// Spectrogram height and STFT length (zero-padded).
pub const N_FREQ: usize = 384;
pub const WIN_LEN: usize = 32;
/// 81.25 % overlap of a 32-sample window.
pub const HOP: usize = 6;
/// Rendered columns per 1024 pulses.
pub const COLUMNS_PER_1024: usize = 384;
pub const DISPLAY_RANGE_DB: f64 = 60.0;
pub const HIGHPASS_TAPS: usize = 129;
pub const DEFAULT_CUTOFF_HZ: f64 = 200.0;

const BH_COEFFS: [f64; 4] = [0.35875, 0.48829, 0.14128, 0.01168];

/// Symmetric 4-term Blackman-Harris window.
pub fn blackman_harris(n: usize) -> Result<Vec<f64>> {
    if n < 4 {
        return Err(Error::invalid(format!("window length must be >= 4, got {n}")));
    }
    let [a0, a1, a2, a3] = BH_COEFFS;
    let denom = (n - 1) as f64;
    Ok((0..n)
        .map(|k| {
            let x = 2.0 * PI * k as f64 / denom;
            a0 - a1 * x.cos() + a2 * (2.0 * x).cos() - a3 * (3.0 * x).cos()
        })
        .collect())
}

/// Linear-phase highpass taps: spectral inversion of a Hamming-windowed sinc
/// lowpass normalized to unit DC gain, so the highpass has an exact zero at DC.
pub fn highpass_taps(cutoff_hz: f64, prf_hz: f64, len: usize) -> Result<Vec<f64>> {
    if !(cutoff_hz > 0.0 && cutoff_hz < prf_hz / 2.0) {
        return Err(Error::invalid(format!("cutoff must lie in (0, prf/2) = (0, {}), got {cutoff_hz}", prf_hz / 2.0)));
    }
    if len.is_multiple_of(2) || len < 3 {
        return Err(Error::invalid("highpass length must be odd and >= 3"));
    }
    let fc = cutoff_hz / prf_hz;
    let mid = (len / 2) as f64;
    let mut lp: Vec<f64> = (0..len)
        .map(|n| {
            let x = n as f64 - mid;
            let sinc = if x == 0.0 { 2.0 * fc } else { (2.0 * PI * fc * x).sin() / (PI * x) };
            let hamming = 0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos();
            sinc * hamming
        })
        .collect();
    let dc: f64 = lp.iter().sum();
    lp.iter_mut().for_each(|v| *v /= dc);
    let mut hp: Vec<f64> = lp.into_iter().map(|v| -v).collect();
    hp[len / 2] += 1.0;
    Ok(hp)
}

/// Complex frequency response of real taps at `freq_hz`.
pub fn frequency_response(taps: &[f64], freq_hz: f64, prf_hz: f64) -> Complex64 {
    taps.iter().enumerate().map(|(n, &h)| h * Complex64::from_polar(1.0, -2.0 * PI * freq_hz / prf_hz * n as f64)).sum()
}

fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m >= n {
        2 * n - 1 - m
    } else {
        m
    }
}

/// Removes near-zero-Doppler clutter with the default 129-tap FIR.
///
/// The filter runs over a half-sample symmetric extension of the record and
/// the group delay is removed, so the output is aligned with the input and
/// has the same length.
pub fn highpass(iq: &IQRecord, cutoff_hz: f64) -> Result<IQRecord> {
    let taps = highpass_taps(cutoff_hz, iq.prf_hz, HIGHPASS_TAPS)?;
    let n = iq.samples.len();
    if n == 0 {
        return Err(Error::invalid("empty record"));
    }
    let half = (taps.len() / 2) as isize;
    let out = (0..n as isize).map(|i| taps.iter().enumerate().map(|(k, &h)| iq.samples[reflect(i + half - k as isize, n)] * h).sum()).collect();
    Ok(iq.with_samples(out, "highpass"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftParams {
    pub win_len: usize,
    pub hop: usize,
    pub nfft: usize,
}

impl Default for StftParams {
    fn default() -> Self {
        StftParams { win_len: WIN_LEN, hop: HOP, nfft: N_FREQ }
    }
}

/// Complex STFT, `[n_freq x n_frames]` row-major. Row 0 is the highest
/// positive Doppler bin (`prf/2 - prf/nfft`), the last row is `-prf/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct StftFrames {
    pub data: Vec<Complex64>,
    pub n_freq: usize,
    pub n_frames: usize,
    pub prf_hz: f64,
    pub hop: usize,
    pub win_len: usize,
}

impl StftFrames {
    pub fn at(&self, row: usize, frame: usize) -> Complex64 {
        self.data[row * self.n_frames + frame]
    }

    /// Centre frequency of `row`.
    pub fn row_frequency(&self, row: usize) -> f64 {
        row_frequency(row, self.n_freq, self.prf_hz)
    }

    /// Centre time of `frame` in seconds.
    pub fn frame_time(&self, frame: usize) -> f64 {
        (frame * self.hop) as f64 / self.prf_hz + self.win_len as f64 / (2.0 * self.prf_hz)
    }
}

pub fn row_frequency(row: usize, n_freq: usize, prf_hz: f64) -> f64 {
    (n_freq as f64 / 2.0 - 1.0 - row as f64) * prf_hz / n_freq as f64
}

pub fn n_frames(n_pulses: usize, win_len: usize, hop: usize) -> usize {
    (n_pulses - win_len) / hop + 1
}

pub fn stft(iq: &IQRecord, params: StftParams) -> Result<StftFrames> {
    let StftParams { win_len, hop, nfft } = params;
    if hop == 0 || nfft < win_len || nfft % 2 != 0 {
        return Err(Error::invalid(format!("bad STFT parameters {params:?}")));
    }
    let n = iq.samples.len();
    if n < win_len {
        return Err(Error::invalid(format!("record of {n} samples is shorter than the {win_len}-sample window")));
    }
    let window = blackman_harris(win_len)?;
    let frames = n_frames(n, win_len, hop);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nfft);
    let mut data = vec![Complex64::new(0.0, 0.0); nfft * frames];
    let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
    for m in 0..frames {
        buf.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        for (k, w) in window.iter().enumerate() {
            buf[k] = iq.samples[m * hop + k] * *w;
        }
        fft.process(&mut buf);
        for row in 0..nfft {
            // Row r holds DFT bin nfft/2 - 1 - r (mod nfft).
            let bin = (nfft + nfft / 2 - 1 - row) % nfft;
            data[row * frames + m] = buf[bin];
        }
    }
    Ok(StftFrames { data, n_freq: nfft, n_frames: frames, prf_hz: iq.prf_hz, hop, win_len })
}

/// A rendered spectrogram image.
///
/// All three colour channels carry the same grey level, so only one plane is
/// stored; [`Spectrogram::pixel`] exposes the three-channel view.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    /// `[height x width]` row-major, values in `[0, 1]`.
    pub gray: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub duration_s: f64,
    pub class_id: Option<ClassId>,
    /// dB level mapped to pixel value 0.
    pub db_floor: f64,
}

impl Spectrogram {
    pub const CHANNELS: usize = 3;

    pub fn pixel(&self, _channel: usize, row: usize, col: usize) -> f32 {
        self.gray[row * self.width + col]
    }

    pub fn len(&self) -> usize {
        Self::CHANNELS * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.gray.is_empty()
    }

    /// Rendered columns per second of signal.
    pub fn columns_per_second(&self) -> f64 {
        self.width as f64 / self.duration_s
    }
}

/// Width of the rendered image for a CPI of `n_pulses`.
pub fn render_width(n_pulses: usize) -> Result<usize> {
    if n_pulses == 0 || !(COLUMNS_PER_1024 * n_pulses).is_multiple_of(1024) {
        return Err(Error::invalid(format!("{n_pulses} pulses do not map onto a whole number of columns")));
    }
    Ok(COLUMNS_PER_1024 * n_pulses / 1024)
}

/// Maps STFT magnitudes onto `[0, 1]` over a 60 dB window below the image
/// maximum, frame by frame (no time resampling). `None` marks a flat image.
pub fn unit_magnitudes(frames: &StftFrames) -> (Vec<f64>, Option<f64>) {
    let db: Vec<f64> = frames.data.iter().map(|v| 20.0 * (v.norm() + 1e-12).log10()).collect();
    let max = db.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = db.iter().copied().fold(f64::INFINITY, f64::min);
    if (max - min).is_nan() || max - min < 1e-9 {
        return (vec![0.5; db.len()], None);
    }
    let floor = max - DISPLAY_RANGE_DB;
    let unit = db.iter().map(|&v| (v.clamp(floor, max) - floor) / DISPLAY_RANGE_DB).collect();
    (unit, Some(floor))
}

/// Renders a spectrogram image `384 x (384 * n_pulses / 1024)`.
pub fn render(frames: &StftFrames, n_pulses: usize) -> Result<Spectrogram> {
    if frames.n_frames == 0 || frames.n_freq == 0 {
        return Err(Error::invalid("no STFT frames to render"));
    }
    let width = render_width(n_pulses)?;
    let (unit, floor) = unit_magnitudes(frames);
    let nf = frames.n_frames;
    let mut gray = vec![0f32; frames.n_freq * width];
    for col in 0..width {
        let pos = if width == 1 { 0.0 } else { col as f64 * (nf - 1) as f64 / (width - 1) as f64 };
        let left = (pos.floor() as usize).min(nf - 1);
        let right = (left + 1).min(nf - 1);
        let frac = pos - left as f64;
        for row in 0..frames.n_freq {
            let a = unit[row * nf + left];
            let b = unit[row * nf + right];
            gray[row * width + col] = (a + (b - a) * frac) as f32;
        }
    }
    Ok(Spectrogram {
        gray,
        height: frames.n_freq,
        width,
        duration_s: n_pulses as f64 / frames.prf_hz,
        class_id: None,
        db_floor: floor.unwrap_or(f64::NEG_INFINITY),
    })
}

/// Rendered column (fractional) showing time `t_s` of a default-STFT
/// record of `n_pulses`. Inverts the frame-centre resampling in [`render`].
pub fn time_to_column(t_s: f64, n_pulses: usize, prf_hz: f64) -> Result<f64> {
    let width = render_width(n_pulses)?;
    if n_pulses < WIN_LEN {
        return Err(Error::invalid(format!("{n_pulses} pulses is shorter than one STFT window")));
    }
    let nf = n_frames(n_pulses, WIN_LEN, HOP);
    let frame = (t_s * prf_hz - WIN_LEN as f64 / 2.0) / HOP as f64;
    Ok(if nf == 1 { 0.0 } else { frame * (width - 1) as f64 / (nf - 1) as f64 })
}

/// Full STFT + render path for one record.
pub fn spectrogram(iq: &IQRecord) -> Result<Spectrogram> {
    let frames = stft(iq, StftParams::default())?;
    let mut img = render(&frames, iq.n_pulses())?;
    img.class_id = iq.meta.class_id;
    Ok(img)
}

/// `10 log10(sum |clean|^2 / sum |clean - estimate|^2)`; `+inf` when the
/// estimate is exact.
pub fn snr_db(clean: &IQRecord, estimate: &IQRecord) -> Result<f64> {
    snr_db_samples(&clean.samples, &estimate.samples)
}

pub fn snr_db_samples(clean: &[Complex64], estimate: &[Complex64]) -> Result<f64> {
    if clean.len() != estimate.len() {
        return Err(Error::shape(format!("snr: lengths differ ({} vs {})", clean.len(), estimate.len())));
    }
    let sig: f64 = clean.iter().map(|v| v.norm_sqr()).sum();
    let err: f64 = clean.iter().zip(estimate).map(|(a, b)| (a - b).norm_sqr()).sum();
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (sig / err).log10())
}

/// Peak SNR of `[0, 1]` images given as flat pixel arrays of equal shape.
pub fn psnr_db_pixels(reference: &[f32], img: &[f32]) -> Result<f64> {
    if reference.len() != img.len() || reference.is_empty() {
        return Err(Error::shape(format!("psnr: {} vs {} pixels", reference.len(), img.len())));
    }
    let sq: f64 = reference
        .iter()
        .zip(img)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    if sq == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = sq / reference.len() as f64;
    Ok(10.0 * (1.0 / mse).log10())
}

/// Peak SNR between two spectrograms. The channels are replicas, so the
/// three-channel MSE equals the MSE of the grey plane.
pub fn psnr_db(reference: &Spectrogram, img: &Spectrogram) -> Result<f64> {
    if reference.height != img.height || reference.width != img.width {
        return Err(Error::shape(format!("psnr: {}x{} vs {}x{}", reference.height, reference.width, img.height, img.width)));
    }
    psnr_db_pixels(&reference.gray, &img.gray)
}
