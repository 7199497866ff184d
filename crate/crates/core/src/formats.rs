//! On-disk formats for IQ records (`MDIQ`), spectrograms (`MDSP`) and PNG
//! export.
//!
//! Binary layouts are little-endian. Decoders check every length against the
//! remaining input before allocating, so arbitrary bytes yield an error rather
//! than a panic or an oversized allocation.

use std::fs;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::iqsim::{ClassId, IQRecord, IqMeta};

pub const MDIQ_MAGIC: &[u8; 4] = b"MDIQ";
pub const MDSP_MAGIC: &[u8; 4] = b"MDSP";
pub const FORMAT_VERSION: u16 = 1;

/// Cursor over a byte slice with bounds-checked little-endian reads.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        ByteReader { buf, pos: 0, what }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format(format!("{}: truncated at byte {} (wanted {n} more, {} left)", self.what, self.pos, self.remaining())));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub(crate) fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(Error::format(format!("{}: bad magic {:?}", self.what, String::from_utf8_lossy(got))));
        }
        Ok(())
    }

    pub(crate) fn version(&mut self, want: u16) -> Result<()> {
        let v = self.u16()?;
        if v != want {
            return Err(Error::format(format!("{}: unsupported version {v}", self.what)));
        }
        Ok(())
    }

    /// Reads `count` items of `size` bytes, checking the total fits first.
    pub(crate) fn check_items(&self, count: usize, size: usize) -> Result<()> {
        match count.checked_mul(size) {
            Some(total) if total <= self.remaining() => Ok(()),
            _ => Err(Error::format(format!("{}: header promises {count} x {size} bytes, {} remain", self.what, self.remaining()))),
        }
    }

    pub(crate) fn json<T: serde::de::DeserializeOwned>(&mut self) -> Result<T> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        Ok(serde_json::from_slice(bytes)?)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(format!("{}: {} trailing bytes", self.what, self.remaining())));
        }
        Ok(())
    }
}

pub(crate) fn put_json<T: Serialize>(out: &mut Vec<u8>, value: &T) -> Result<()> {
    let json = serde_json::to_vec(value)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::invalid("metadata too large"))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    Ok(())
}

fn positive_finite(v: f64, name: &str, what: &str) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::format(format!("{what}: {name} = {v} is not a positive finite number")))
    }
}

/// Serializes an IQ record; samples are stored as `f32` pairs.
pub fn encode_mdiq(iq: &IQRecord) -> Result<Vec<u8>> {
    let n = u32::try_from(iq.samples.len()).map_err(|_| Error::invalid("too many pulses for MDIQ"))?;
    let mut out = Vec::with_capacity(64 + 8 * iq.samples.len());
    out.extend_from_slice(MDIQ_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&iq.prf_hz.to_le_bytes());
    out.extend_from_slice(&iq.wavelength_m.to_le_bytes());
    put_json(&mut out, &iq.meta)?;
    for s in &iq.samples {
        out.extend_from_slice(&(s.re as f32).to_le_bytes());
        out.extend_from_slice(&(s.im as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_mdiq(bytes: &[u8]) -> Result<IQRecord> {
    let mut r = ByteReader::new(bytes, "MDIQ");
    r.magic(MDIQ_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let n = r.u32()? as usize;
    let prf_hz = r.f64()?;
    let wavelength_m = r.f64()?;
    positive_finite(prf_hz, "prf_hz", "MDIQ")?;
    positive_finite(wavelength_m, "wavelength_m", "MDIQ")?;
    let meta: IqMeta = r.json()?;
    r.check_items(n, 8)?;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let re = r.f32()?;
        let im = r.f32()?;
        samples.push(Complex64::new(re as f64, im as f64));
    }
    r.finish()?;
    let rec = IQRecord { samples, prf_hz, wavelength_m, meta };
    rec.check_finite().map_err(|_| Error::format("MDIQ: non-finite sample"))?;
    Ok(rec)
}

#[derive(Serialize, Deserialize)]
struct SpectrogramMeta {
    class_id: Option<ClassId>,
    /// `None` for an image with no dynamic range (floor at -inf).
    db_floor: Option<f64>,
}

/// Serializes a spectrogram with its grey plane replicated to three
/// channel-major planes.
pub fn encode_mdsp(img: &Spectrogram) -> Result<Vec<u8>> {
    let plane = img.height * img.width;
    if img.gray.len() != plane {
        return Err(Error::shape(format!("spectrogram holds {} pixels, expected {plane}", img.gray.len())));
    }
    let dim = |v: usize| u32::try_from(v).map_err(|_| Error::invalid("spectrogram too large"));
    let mut out = Vec::with_capacity(64 + 4 * img.len());
    out.extend_from_slice(MDSP_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim(Spectrogram::CHANNELS)?.to_le_bytes());
    out.extend_from_slice(&dim(img.height)?.to_le_bytes());
    out.extend_from_slice(&dim(img.width)?.to_le_bytes());
    out.extend_from_slice(&img.duration_s.to_le_bytes());
    put_json(&mut out, &SpectrogramMeta { class_id: img.class_id, db_floor: Some(img.db_floor).filter(|f| f.is_finite()) })?;
    for _ in 0..Spectrogram::CHANNELS {
        for v in &img.gray {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes an `MDSP` file. The three channels must be identical and every
/// pixel must lie in `[0, 1]`.
pub fn decode_mdsp(bytes: &[u8]) -> Result<Spectrogram> {
    let mut r = ByteReader::new(bytes, "MDSP");
    r.magic(MDSP_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let channels = r.u32()? as usize;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let duration_s = r.f64()?;
    if channels != Spectrogram::CHANNELS {
        return Err(Error::format(format!("MDSP: {channels} channels, expected 3")));
    }
    if height == 0 || width == 0 {
        return Err(Error::format("MDSP: empty image"));
    }
    positive_finite(duration_s, "duration_s", "MDSP")?;
    let meta: SpectrogramMeta = r.json()?;
    let plane = height.checked_mul(width).ok_or_else(|| Error::format("MDSP: image size overflows"))?;
    r.check_items(plane, 4 * channels)?;
    let mut gray = Vec::with_capacity(plane);
    for _ in 0..plane {
        let v = r.f32()?;
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::format(format!("MDSP: pixel value {v} outside [0, 1]")));
        }
        gray.push(v);
    }
    for c in 1..channels {
        for (i, g) in gray.iter().enumerate() {
            if r.f32()?.to_bits() != g.to_bits() {
                return Err(Error::format(format!("MDSP: channel {c} differs from channel 0 at pixel {i}")));
            }
        }
    }
    r.finish()?;
    Ok(Spectrogram { gray, height, width, duration_s, class_id: meta.class_id, db_floor: meta.db_floor.unwrap_or(f64::NEG_INFINITY) })
}

/// 8-bit level of a `[0, 1]` pixel.
pub fn to_u8(v: f32) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

fn encode_png(data: &[u8], width: usize, height: usize, color: png::ColorType) -> Result<Vec<u8>> {
    let (w, h) =
        (u32::try_from(width).map_err(|_| Error::invalid("image too wide"))?, u32::try_from(height).map_err(|_| Error::invalid("image too tall"))?);
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w, h);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::invalid(format!("png: {e}")))?;
        writer.write_image_data(data).map_err(|e| Error::invalid(format!("png: {e}")))?;
    }
    Ok(out)
}

/// Encodes a row-major `[0, 1]` plane as an 8-bit greyscale PNG with only the
/// mandatory chunks, so equal inputs give byte-identical files.
pub fn encode_gray_png(plane: &[f32], width: usize, height: usize) -> Result<Vec<u8>> {
    if plane.len() != width * height || plane.is_empty() {
        return Err(Error::shape(format!("{} pixels for a {width}x{height} image", plane.len())));
    }
    let data: Vec<u8> = plane.iter().map(|&v| to_u8(v)).collect();
    encode_png(&data, width, height, png::ColorType::Grayscale)
}

/// Encodes interleaved 8-bit RGB.
pub fn encode_rgb_png(rgb: &[u8], width: usize, height: usize) -> Result<Vec<u8>> {
    if rgb.len() != 3 * width * height || rgb.is_empty() {
        return Err(Error::shape(format!("{} bytes for a {width}x{height} RGB image", rgb.len())));
    }
    encode_png(rgb, width, height, png::ColorType::Rgb)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn save_iq(path: &Path, iq: &IQRecord) -> Result<()> {
    write_bytes(path, &encode_mdiq(iq)?)
}

pub fn load_iq(path: &Path) -> Result<IQRecord> {
    decode_mdiq(&fs::read(path)?)
}

pub fn save_spectrogram(path: &Path, img: &Spectrogram) -> Result<()> {
    write_bytes(path, &encode_mdsp(img)?)
}

pub fn load_spectrogram(path: &Path) -> Result<Spectrogram> {
    decode_mdsp(&fs::read(path)?)
}
