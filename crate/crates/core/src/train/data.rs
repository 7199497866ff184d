//! Synthetic dataset generation, the JSON-lines manifest and sample loading.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, Spectrogram};
use crate::error::{Error, Result};
use crate::formats::{load_spectrogram, save_spectrogram, write_bytes};
use crate::iqsim::{add_noise_relative, class_presets, simulate_rotor_iq, ClassId, CpiSpec, CPI_PULSES, DEFAULT_PRF_HZ};
use crate::mdtcwt::{denoise, DEFAULT_LEVELS};
use crate::rng::{derive_seed, rng_from_seed};
use crate::vit::{pad_and_mask, PaddedInput, ViTConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split {s:?}"))),
        }
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRow {
    pub id: String,
    pub class_id: ClassId,
    pub duration_ms: f64,
    pub snr_db: f64,
    pub seed: u64,
    pub split: Split,
    /// MDSP file, relative to the manifest's directory.
    pub path: String,
    /// Ground-truth blade flash instants within the record.
    #[serde(default)]
    pub flash_times_s: Vec<f64>,
}

/// What [`build_dataset`] generates.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    /// Records over all nine (class, duration) cells; spread as evenly as
    /// possible, earlier cells taking the remainder.
    pub total: usize,
    /// Inclusive SNR range in dB, drawn uniformly per record.
    pub snr_db: (f64, f64),
    pub seed: u64,
}

impl DatasetSpec {
    pub fn per_cell(n: usize, snr_db: (f64, f64), seed: u64) -> Self {
        DatasetSpec { total: n * ClassId::ALL.len() * CPI_PULSES.len(), snr_db, seed }
    }

    fn validate(&self) -> Result<()> {
        let cells = ClassId::ALL.len() * CPI_PULSES.len();
        if self.total < 10 * cells {
            return Err(Error::invalid(format!("need at least 10 records per cell ({} total), got {}", 10 * cells, self.total)));
        }
        let (lo, hi) = self.snr_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::invalid(format!("bad SNR range [{lo}, {hi}]")));
        }
        Ok(())
    }
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

pub fn duration_ms(n_pulses: usize) -> f64 {
    n_pulses as f64 * 1000.0 / DEFAULT_PRF_HZ
}

/// Split sizes for one stratum: 80/10/10 rounded to the nearest sample.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = (0.8 * n as f64).round() as usize;
    let val = ((0.1 * n as f64).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Noisy, highpassed, denoised spectrogram of one simulated record, plus the
/// record's flash instants.
pub fn synthesize(class_id: ClassId, n_pulses: usize, snr_db: f64, seed: u64) -> Result<(Spectrogram, Vec<f64>)> {
    let clean = simulate_rotor_iq(&class_presets(class_id), &CpiSpec::new(n_pulses), derive_seed(seed, 0))?;
    let reference = clean.meta.rotor_power.unwrap_or_else(|| clean.mean_power());
    let noisy = add_noise_relative(&clean, snr_db, reference, derive_seed(seed, 1))?;
    let filtered = dsp::highpass(&noisy, dsp::DEFAULT_CUTOFF_HZ)?;
    let cleaned = denoise(&filtered, DEFAULT_LEVELS)?;
    let img = dsp::spectrogram(&cleaned)?;
    Ok((img, clean.meta.flash_times_s))
}

/// Generates every record, writes `spectrograms/*.mdsp` and
/// `manifest.jsonl` under `out_dir`, and returns the manifest rows.
pub fn build_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Vec<SampleRow>> {
    spec.validate()?;
    fs::create_dir_all(out_dir.join("spectrograms"))?;
    let cells: Vec<(ClassId, usize)> = ClassId::ALL.iter().flat_map(|&c| CPI_PULSES.iter().map(move |&n| (c, n))).collect();
    let base = spec.total / cells.len();
    let mut rows = Vec::with_capacity(spec.total);
    let mut index = 0u64;
    for (ci, &(class_id, n_pulses)) in cells.iter().enumerate() {
        let count = base + usize::from(ci < spec.total % cells.len());
        let mut splits: Vec<Split> = {
            let (tr, va, te) = split_counts(count);
            [(Split::Train, tr), (Split::Val, va), (Split::Test, te)].iter().flat_map(|&(s, k)| std::iter::repeat_n(s, k)).collect()
        };
        splits.shuffle(&mut rng_from_seed(derive_seed(spec.seed, 1_000_000 + ci as u64)));
        for split in splits {
            let seed = derive_seed(spec.seed, index);
            let snr_db = rng_from_seed(derive_seed(seed, 2)).gen_range(spec.snr_db.0..=spec.snr_db.1);
            let (img, flash_times_s) = synthesize(class_id, n_pulses, snr_db, seed)?;
            let id = format!("{}-{}-{index:05}", class_id.name().to_lowercase(), n_pulses);
            let path = format!("spectrograms/{id}.mdsp");
            save_spectrogram(&out_dir.join(&path), &img)?;
            rows.push(SampleRow { id, class_id, duration_ms: duration_ms(n_pulses), snr_db, seed, split, path, flash_times_s });
            index += 1;
        }
    }
    write_manifest(&out_dir.join(MANIFEST_FILE), &rows)?;
    Ok(rows)
}

pub fn manifest_to_string(rows: &[SampleRow]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, rows: &[SampleRow]) -> Result<()> {
    write_bytes(path, manifest_to_string(rows)?.as_bytes())
}

/// Parses manifest text, checking each row and that no id or path repeats.
pub fn parse_manifest(text: &str) -> Result<Vec<SampleRow>> {
    let mut rows = Vec::new();
    let mut paths = HashSet::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: SampleRow = serde_json::from_str(line).map_err(|e| Error::format(format!("manifest line {}: {e}", i + 1)))?;
        let known = CPI_PULSES.iter().any(|&n| (duration_ms(n) - row.duration_ms).abs() < 1e-9);
        if !known || !row.snr_db.is_finite() {
            return Err(Error::format(format!("manifest line {}: bad duration or SNR", i + 1)));
        }
        if row.path.is_empty() || Path::new(&row.path).is_absolute() || row.path.split('/').any(|c| c == "..") {
            return Err(Error::format(format!("manifest line {}: path must be relative and stay inside the dataset", i + 1)));
        }
        if !paths.insert(row.path.clone()) || !ids.insert(row.id.clone()) {
            return Err(Error::format(format!("manifest line {}: duplicate id or path", i + 1)));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_manifest(path: &Path) -> Result<Vec<SampleRow>> {
    parse_manifest(&fs::read_to_string(path)?)
}

/// Per-(class, duration, split) counts, for reports and tests.
pub fn strata(rows: &[SampleRow]) -> BTreeMap<(ClassId, u64, Split), usize> {
    let mut out = BTreeMap::new();
    for r in rows {
        *out.entry((r.class_id, (r.duration_ms * 10.0).round() as u64, r.split)).or_insert(0) += 1;
    }
    out
}

/// A padded input with its class index.
#[derive(Clone, Debug)]
pub struct Labeled {
    pub input: PaddedInput,
    pub label: usize,
}

/// Random-access labelled samples.
pub trait Samples {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<Labeled>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Samples for [Labeled] {
    fn len(&self) -> usize {
        <[Labeled]>::len(self)
    }

    fn get(&self, index: usize) -> Result<Labeled> {
        <[Labeled]>::get(self, index).cloned().ok_or_else(|| Error::invalid(format!("sample {index} out of range")))
    }
}

impl Samples for Vec<Labeled> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<Labeled> {
        Samples::get(self.as_slice(), index)
    }
}

/// Manifest rows read from disk on demand.
#[derive(Clone, Debug)]
pub struct ManifestSamples {
    root: PathBuf,
    rows: Vec<SampleRow>,
    config: ViTConfig,
}

impl ManifestSamples {
    /// Rows of `split` from a manifest whose files live under `root`.
    pub fn new(root: &Path, rows: &[SampleRow], split: Split, config: &ViTConfig) -> Self {
        ManifestSamples { root: root.to_path_buf(), rows: rows.iter().filter(|r| r.split == split).cloned().collect(), config: config.clone() }
    }

    pub fn rows(&self) -> &[SampleRow] {
        &self.rows
    }

    pub fn load_image(&self, index: usize) -> Result<Spectrogram> {
        let row = self.rows.get(index).ok_or_else(|| Error::invalid(format!("sample {index} out of range")))?;
        load_spectrogram(&self.root.join(&row.path))
    }
}

impl Samples for ManifestSamples {
    fn len(&self) -> usize {
        self.rows.len()
    }

    fn get(&self, index: usize) -> Result<Labeled> {
        let img = self.load_image(index)?;
        let label = self.rows[index].class_id.index();
        if label >= self.config.n_classes {
            return Err(Error::invalid(format!("class {label} outside a {}-class model", self.config.n_classes)));
        }
        Ok(Labeled { input: pad_and_mask(&img, &self.config)?, label })
    }
}
