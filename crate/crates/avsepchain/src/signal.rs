//! Domain types and deterministic signal primitives: half-stride chunking
//! with overlap-add inversion, log-mel extraction, frame-rate alignment, and
//! frame folding.

use crate::error::{invalid_arg, Error, Result};
use crate::tensor::{chunk_layout, make_window, Window};
use ndarray::{Array1, Array2, Array3};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub const SAMPLE_RATE: u32 = 16_000;
/// 10 ms hop at 16 kHz.
pub const MEL_HOP: usize = 160;
/// 40 ms analysis window.
pub const MEL_WIN: usize = 640;
pub const MEL_FFT: usize = 1024;
pub const N_MELS: usize = 80;
pub const MEL_FMAX: f64 = 8_000.0;
/// Floor applied to mel power before the log.
pub const MEL_FLOOR: f64 = 1e-10;
/// Video frame rate (one viseme frame per 40 ms).
pub const VIDEO_FPS: f64 = 25.0;
/// Mel frame rate (one frame per 10 ms hop).
pub const MEL_FPS: f64 = 100.0;

/// 1-D audio samples at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Array1<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Array1<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return invalid_arg("waveform must be non-empty");
        }
        if sample_rate == 0 {
            return invalid_arg("sample rate must be positive");
        }
        if !samples.iter().all(|v| v.is_finite()) {
            return invalid_arg("waveform must be finite");
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn from_vec(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(Array1::from(samples), sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }
}

/// 2-D latent feature `[channels x time]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array2<f64>,
}

impl FeatureMap {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return invalid_arg("feature map must have positive dimensions");
        }
        if !data.iter().all(|v| v.is_finite()) {
            return invalid_arg("feature map must be finite");
        }
        Ok(FeatureMap { data })
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn time(&self) -> usize {
        self.data.ncols()
    }
}

/// 3-D chunked feature `[channels x chunk_len x num_chunks]` plus the
/// pre-padding time length.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkedFeature {
    pub data: Array3<f64>,
    pub original_time: usize,
}

impl ChunkedFeature {
    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn chunk_len(&self) -> usize {
        self.data.dim().1
    }

    pub fn num_chunks(&self) -> usize {
        self.data.dim().2
    }
}

/// Log-mel spectrogram `[n_mels x mel_frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpec {
    pub data: Array2<f64>,
    pub hop_seconds: f64,
    pub win_seconds: f64,
}

impl MelSpec {
    pub fn n_mels(&self) -> usize {
        self.data.nrows()
    }

    pub fn frames(&self) -> usize {
        self.data.ncols()
    }
}

/// Frame-rate-tagged embedding sequence `[dim x frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSeq {
    pub data: Array2<f64>,
    pub frame_rate: f64,
}

impl EmbeddingSeq {
    pub fn new(data: Array2<f64>, frame_rate: f64) -> Result<Self> {
        if data.nrows() == 0 {
            return invalid_arg("embedding dim must be positive");
        }
        if !(frame_rate > 0.0) {
            return invalid_arg("frame rate must be positive");
        }
        if !data.iter().all(|v| v.is_finite()) {
            return invalid_arg("embedding must be finite");
        }
        Ok(EmbeddingSeq { data, frame_rate })
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn frames(&self) -> usize {
        self.data.ncols()
    }
}

/// Split `[N x T]` into half-overlapping chunks `[N x K x S]`, right-padding
/// with zeros to `K + (S-1) K/2`.
pub fn chunk(feat: &FeatureMap, chunk_len: usize) -> Result<ChunkedFeature> {
    if chunk_len < 2 || chunk_len % 2 != 0 {
        return invalid_arg(format!("chunk_len must be even and >= 2, got {chunk_len}"));
    }
    let (n, t) = feat.data.dim();
    let (s, _) = chunk_layout(t, chunk_len);
    let stride = chunk_len / 2;
    let mut data = Array3::<f64>::zeros((n, chunk_len, s));
    for si in 0..s {
        for k in 0..chunk_len {
            let ti = si * stride + k;
            if ti < t {
                for c in 0..n {
                    data[[c, k, si]] = feat.data[[c, ti]];
                }
            }
        }
    }
    Ok(ChunkedFeature { data, original_time: t })
}

/// Coverage-normalized overlap-add inverse of [`chunk`], truncated to the
/// recorded original time.
pub fn unchunk(cf: &ChunkedFeature) -> Result<FeatureMap> {
    let (n, k, s) = cf.data.dim();
    let stride = k / 2;
    let padded = k + (s - 1) * stride;
    if cf.original_time == 0 || cf.original_time > padded {
        return Err(Error::InvalidState(format!(
            "original_time {} inconsistent with padded length {}",
            cf.original_time, padded
        )));
    }
    let mut coverage = vec![0.0f64; padded];
    for si in 0..s {
        for kk in 0..k {
            coverage[si * stride + kk] += 1.0;
        }
    }
    let mut out = Array2::<f64>::zeros((n, cf.original_time));
    for si in 0..s {
        for kk in 0..k {
            let ti = si * stride + kk;
            if ti < cf.original_time {
                for c in 0..n {
                    out[[c, ti]] += cf.data[[c, kk, si]] / coverage[ti];
                }
            }
        }
    }
    FeatureMap::new(out)
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filterbank `[n_filters x fft_size/2+1]` spanning `[0, fmax]`.
pub fn mel_filterbank(n_filters: usize, fft_size: usize, sample_rate: f64, fmax: f64) -> Array2<f64> {
    let bins = fft_size / 2 + 1;
    let mel_max = hz_to_mel(fmax);
    let points: Vec<f64> = (0..n_filters + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_filters + 1) as f64))
        .collect();
    let mut fb = Array2::<f64>::zeros((n_filters, bins));
    for m in 0..n_filters {
        let (lo, ctr, hi) = (points[m], points[m + 1], points[m + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate / fft_size as f64;
            let w = if f >= lo && f <= ctr && ctr > lo {
                (f - lo) / (ctr - lo)
            } else if f > ctr && f <= hi && hi > ctr {
                (hi - f) / (hi - ctr)
            } else {
                0.0
            };
            fb[[m, k]] = w;
        }
    }
    fb
}

/// Number of mel frames produced for a waveform of `len` samples.
pub fn mel_frames_for(len: usize) -> usize {
    len / MEL_HOP
}

/// Offset of mel frame 0 relative to sample 0 (center padding).
pub const MEL_START_OFFSET: isize = (MEL_HOP as isize) / 2 - (MEL_WIN as isize) / 2;

/// One-sided power spectrogram `[n_frames x bins]` with Hann window and
/// center padding; shared by the mel extractor and its autodiff twin.
pub fn power_spectrogram(
    samples: &Array1<f64>,
    win_len: usize,
    hop: usize,
    fft_size: usize,
    n_frames: usize,
    start_offset: isize,
    window: Window,
) -> Array2<f64> {
    let bins = fft_size / 2 + 1;
    let win = make_window(window, win_len);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(fft_size);
    let mut power = Array2::<f64>::zeros((n_frames, bins));
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    for f in 0..n_frames {
        for v in buf.iter_mut() {
            *v = Complex::new(0.0, 0.0);
        }
        let start = start_offset + (f * hop) as isize;
        for m in 0..win_len {
            let idx = start + m as isize;
            if idx >= 0 && (idx as usize) < samples.len() {
                buf[m] = Complex::new(samples[idx as usize] * win[m], 0.0);
            }
        }
        fft.process(&mut buf);
        for k in 0..bins {
            power[[f, k]] = buf[k].norm_sqr();
        }
    }
    power
}

/// Log-mel spectrogram: 1024-point FFT, 160-sample hop, 640-sample Hann
/// window, 80 triangular filters over 0-8 kHz, `log(max(power, 1e-10))`.
pub fn log_mel(w: &Waveform) -> Result<MelSpec> {
    if w.sample_rate != SAMPLE_RATE {
        return invalid_arg(format!("log_mel expects {SAMPLE_RATE} Hz input"));
    }
    if w.len() < MEL_WIN {
        return invalid_arg(format!("input shorter than one window ({MEL_WIN} samples)"));
    }
    let frames = mel_frames_for(w.len());
    let power = power_spectrogram(
        &w.samples,
        MEL_WIN,
        MEL_HOP,
        MEL_FFT,
        frames,
        MEL_START_OFFSET,
        Window::Hann,
    );
    let fb = mel_filterbank(N_MELS, MEL_FFT, SAMPLE_RATE as f64, MEL_FMAX);
    // [n_mels x bins] . [bins x frames]
    let mel = fb.dot(&power.t()).mapv(|p| p.max(MEL_FLOOR).ln());
    Ok(MelSpec {
        data: mel,
        hop_seconds: MEL_HOP as f64 / SAMPLE_RATE as f64,
        win_seconds: MEL_WIN as f64 / SAMPLE_RATE as f64,
    })
}

/// Linear interpolation along the frame axis to exactly `target_frames`,
/// preserving endpoints.
pub fn resample_embedding(e: &EmbeddingSeq, target_frames: usize) -> Result<EmbeddingSeq> {
    if target_frames == 0 {
        return invalid_arg("target_frames must be >= 1");
    }
    if e.frames() == 0 {
        return invalid_arg("cannot resample an empty embedding");
    }
    let src = e.frames();
    let dim = e.dim();
    if src == target_frames {
        return Ok(e.clone());
    }
    let mut out = Array2::<f64>::zeros((dim, target_frames));
    for j in 0..target_frames {
        let pos = if target_frames == 1 {
            0.0
        } else {
            j as f64 * (src - 1) as f64 / (target_frames - 1) as f64
        };
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(src - 1);
        let frac = pos - i0 as f64;
        for d in 0..dim {
            out[[d, j]] = e.data[[d, i0]] * (1.0 - frac) + e.data[[d, i1]] * frac;
        }
    }
    EmbeddingSeq::new(out, e.frame_rate * target_frames as f64 / src as f64)
}

/// Nearest-neighbor upsampling from 25 Hz video frames to 100 Hz mel frames
/// (each frame repeated 4 times), then edge-replicated or truncated to
/// `mel_frames`.
pub fn upsample_to_mel(e: &EmbeddingSeq, mel_frames: usize) -> Result<EmbeddingSeq> {
    if (e.frame_rate - VIDEO_FPS).abs() > 1e-9 {
        return invalid_arg(format!(
            "upsample_to_mel expects {VIDEO_FPS} Hz input, got {}",
            e.frame_rate
        ));
    }
    if mel_frames == 0 {
        return invalid_arg("mel_frames must be >= 1");
    }
    let ratio = (MEL_FPS / VIDEO_FPS) as usize;
    let dim = e.dim();
    let src = e.frames();
    let mut out = Array2::<f64>::zeros((dim, mel_frames));
    for j in 0..mel_frames {
        let i = (j / ratio).min(src - 1);
        for d in 0..dim {
            out[[d, j]] = e.data[[d, i]];
        }
    }
    EmbeddingSeq::new(out, MEL_FPS)
}

/// Interpret `[160 x T]` columns as consecutive 10 ms hops of samples.
pub fn fold_frames(f: &FeatureMap) -> Result<Waveform> {
    if f.channels() != MEL_HOP {
        return invalid_arg(format!(
            "fold_frames expects {MEL_HOP} channels, got {}",
            f.channels()
        ));
    }
    let t = f.time();
    let mut samples = Array1::<f64>::zeros(MEL_HOP * t);
    for ti in 0..t {
        for i in 0..MEL_HOP {
            samples[ti * MEL_HOP + i] = f.data[[i, ti]];
        }
    }
    Waveform::new(samples, SAMPLE_RATE)
}

/// Inverse of [`fold_frames`].
pub fn unfold_to_frames(w: &Waveform) -> Result<FeatureMap> {
    if w.len() % MEL_HOP != 0 {
        return invalid_arg("waveform length must be a multiple of the hop");
    }
    let t = w.len() / MEL_HOP;
    let mut data = Array2::<f64>::zeros((MEL_HOP, t));
    for ti in 0..t {
        for i in 0..MEL_HOP {
            data[[i, ti]] = w.samples[ti * MEL_HOP + i];
        }
    }
    FeatureMap::new(data)
}
