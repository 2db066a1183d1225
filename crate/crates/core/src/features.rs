//! Log-Mel spectrogram features on the alignment frame grid.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, PathContext, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const HOPSIZE: usize = 160;
pub const WINDOW_SIZE: usize = 1024;
pub const NUM_MELS: usize = 80;
pub const LOG_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub hopsize: usize,
    pub window_size: usize,
    pub num_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    /// Center-padded analysis with reflect padding.
    pub padding: String,
    pub window: String,
    pub mel_scale: String,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            hopsize: HOPSIZE,
            window_size: WINDOW_SIZE,
            num_mels: NUM_MELS,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: LOG_FLOOR,
            padding: "reflect".into(),
            window: "hann".into(),
            mel_scale: "slaney".into(),
        }
    }
}

impl FeatureConfig {
    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("serializable config")))
    }
}

/// `[channels × frames]` natural-log Mel magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Array2<f32>,
}

impl MelSpectrogram {
    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn frames(&self) -> usize {
        self.values.ncols()
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.values.mapv(f64::from)
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        F_SP * mel
    }
}

/// Slaney-style triangular Mel filterbank `[num_mels × (n_fft/2 + 1)]` with
/// area normalization.
pub fn mel_filterbank(config: &FeatureConfig) -> Array2<f64> {
    let bins = config.window_size / 2 + 1;
    let fft_freqs: Vec<f64> = (0..bins)
        .map(|k| k as f64 * config.sample_rate as f64 / config.window_size as f64)
        .collect();
    let mel_min = hz_to_mel(config.fmin);
    let mel_max = hz_to_mel(config.fmax);
    let points: Vec<f64> = (0..config.num_mels + 2)
        .map(|i| mel_to_hz(mel_min + (mel_max - mel_min) * i as f64 / (config.num_mels + 1) as f64))
        .collect();

    let mut weights = Array2::zeros((config.num_mels, bins));
    for m in 0..config.num_mels {
        let (lower, center, upper) = (points[m], points[m + 1], points[m + 2]);
        let norm = 2.0 / (upper - lower);
        for (k, &f) in fft_freqs.iter().enumerate() {
            let rising = (f - lower) / (center - lower);
            let falling = (upper - f) / (upper - center);
            let w = rising.min(falling).max(0.0);
            weights[[m, k]] = w * norm;
        }
    }
    weights
}

/// Maps an out-of-range index into `[0, len)` by mirror reflection without
/// repeating the edge sample.
pub(crate) fn reflect_index(index: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut i = index.rem_euclid(period);
    if i >= len as isize {
        i = period - i;
    }
    i as usize
}

fn hann(size: usize) -> Vec<f64> {
    // Periodic Hann, as used for STFT analysis.
    (0..size)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / size as f64).cos())
        .collect()
}

/// Computes the log-Mel spectrogram of 16 kHz mono audio with the default
/// feature configuration.
pub fn melspectrogram(audio: &[f32]) -> Result<MelSpectrogram> {
    melspectrogram_with(audio, &FeatureConfig::default())
}

pub fn melspectrogram_with(audio: &[f32], config: &FeatureConfig) -> Result<MelSpectrogram> {
    if audio.is_empty() {
        return Err(Error::Feature("empty audio".into()));
    }
    if let Some(i) = audio.iter().position(|s| !s.is_finite()) {
        return Err(Error::Input(format!("non-finite sample at index {i}")));
    }
    let n_fft = config.window_size;
    let frames = audio.len().div_ceil(config.hopsize);
    let bins = n_fft / 2 + 1;
    let window = hann(n_fft);
    let filterbank = mel_filterbank(config);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);

    let half = (n_fft / 2) as isize;
    let mut buffer = vec![Complex::new(0.0, 0.0); n_fft];
    let mut magnitude = Array2::<f64>::zeros((bins, frames));
    for t in 0..frames {
        let center = (t * config.hopsize) as isize;
        for (n, slot) in buffer.iter_mut().enumerate() {
            let index = reflect_index(center - half + n as isize, audio.len());
            *slot = Complex::new(audio[index] as f64 * window[n], 0.0);
        }
        fft.process(&mut buffer);
        for k in 0..bins {
            magnitude[[k, t]] = buffer[k].norm();
        }
    }
    let mel = filterbank.dot(&magnitude);
    let floor = config.log_floor;
    Ok(MelSpectrogram {
        values: mel.mapv(|v| v.max(floor).ln() as f32),
    })
}

/// Reads a mono WAV file as `f32` samples in `[-1, 1]`.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::Load {
        utterance: path.display().to_string(),
        reason: e.to_string(),
    })?;
    decode_wav_reader(reader)
}

/// Decodes an in-memory mono WAV file.
pub fn decode_wav(bytes: &[u8]) -> Result<(Vec<f32>, u32)> {
    decode_wav_reader(hound::WavReader::new(std::io::Cursor::new(bytes))?)
}

fn decode_wav_reader<R: std::io::Read>(mut reader: hound::WavReader<R>) -> Result<(Vec<f32>, u32)> {
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Input(format!(
            "expected mono audio, found {} channels",
            spec.channels
        )));
    }
    let samples = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<Result<Vec<_>, _>>()?,
        hound::SampleFormat::Int => {
            if spec.bits_per_sample == 0 || spec.bits_per_sample > 32 {
                return Err(Error::Input(format!("unsupported bit depth {}", spec.bits_per_sample)));
            }
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    Ok((samples, spec.sample_rate))
}

pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Loads audio and computes its features, rejecting other sample rates.
pub fn features_for_file(path: &Path, config: &FeatureConfig) -> Result<MelSpectrogram> {
    let (samples, rate) = read_wav(path)?;
    if rate != config.sample_rate {
        return Err(Error::Input(format!(
            "{}: sample rate {rate} Hz, expected {} Hz (resample upstream)",
            path.display(),
            config.sample_rate
        )));
    }
    melspectrogram_with(&samples, config)
}

const CACHE_MAGIC: &[u8; 4] = b"PMEL";
const CACHE_VERSION: u16 = 1;

/// Serializes a spectrogram: magic, version, channels, frames, then
/// little-endian `f32` values in row-major order.
pub fn encode_cached(mel: &MelSpectrogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + 4 * mel.values.len());
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(mel.channels() as u32).to_le_bytes());
    out.extend_from_slice(&(mel.frames() as u32).to_le_bytes());
    for v in mel.values.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_cached(bytes: &[u8]) -> Result<MelSpectrogram> {
    let bad = |reason: &str| Error::format("feature cache", reason);
    if bytes.len() < 14 || &bytes[..4] != CACHE_MAGIC {
        return Err(bad("missing header"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CACHE_VERSION {
        return Err(bad("unsupported version"));
    }
    let channels = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let frames = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let body = &bytes[14..];
    let count = channels
        .checked_mul(frames)
        .filter(|n| n.checked_mul(4) == Some(body.len()))
        .ok_or_else(|| bad("size does not match header"))?;
    let values: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite value"));
    }
    debug_assert_eq!(values.len(), count);
    let values = Array2::from_shape_vec((channels, frames), values).map_err(|e| bad(&e.to_string()))?;
    Ok(MelSpectrogram { values })
}

/// On-disk feature cache keyed by (audio hash, feature config hash).
#[derive(Debug, Clone)]
pub struct FeatureCache {
    root: PathBuf,
    config: FeatureConfig,
    config_hash: String,
}

impl FeatureCache {
    pub fn new(root: impl Into<PathBuf>, config: FeatureConfig) -> Self {
        let config_hash = config.hash();
        Self {
            root: root.into(),
            config,
            config_hash,
        }
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn key(&self, audio: &[f32]) -> String {
        let mut hasher = Sha256::new();
        for s in audio {
            hasher.update(s.to_le_bytes());
        }
        format!("{}-{}", hex::encode(hasher.finalize()), &self.config_hash[..16])
    }

    fn path(&self, key: &str) -> PathBuf {
        self.root.join(&key[..2]).join(format!("{key}.mel"))
    }

    /// Returns cached features for `audio`, computing and storing them on a miss.
    pub fn get_or_compute(&self, audio: &[f32]) -> Result<MelSpectrogram> {
        let key = self.key(audio);
        let path = self.path(&key);
        if let Ok(bytes) = fs::read(&path) {
            match decode_cached(&bytes) {
                Ok(mel) => return Ok(mel),
                Err(e) => log::warn!("discarding corrupt cache entry {}: {e}", path.display()),
            }
        }
        let mel = melspectrogram_with(audio, &self.config)?;
        let parent = path.parent().expect("cache path has a parent");
        fs::create_dir_all(parent).with_path(parent)?;
        // Write-then-rename so concurrent readers never see a partial entry.
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, encode_cached(&mel)).with_path(&tmp)?;
        fs::rename(&tmp, &path).with_path(&path)?;
        Ok(mel)
    }

    pub fn load_file(&self, path: &Path) -> Result<MelSpectrogram> {
        let (samples, rate) = read_wav(path)?;
        if rate != self.config.sample_rate {
            return Err(Error::Input(format!(
                "{}: sample rate {rate} Hz, expected {} Hz (resample upstream)",
                path.display(),
                self.config.sample_rate
            )));
        }
        self.get_or_compute(&samples)
    }
}
