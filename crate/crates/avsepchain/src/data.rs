//! Synthetic audio-visual corpus: toy speakers render viseme unit sequences
//! as harmonic audio with unit-specific resonances, mixtures are built at
//! controlled SNR, and everything round-trips through 16-bit WAV files plus
//! a line-delimited manifest.

use crate::error::{invalid_arg, Error, Result};
use crate::frontends::{unit_center_hz, write_embedding, VisemeStream, DEFAULT_N_UNITS};
use crate::signal::{EmbeddingSeq, Waveform, SAMPLE_RATE, VIDEO_FPS};
use ndarray::Array1;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Samples per viseme frame (40 ms at 16 kHz).
pub const FRAME_SAMPLES: usize = 640;
/// Fixed clip length: 2 s.
pub const CLIP_SAMPLES: usize = 32_000;
/// Viseme frames per clip.
pub const CLIP_FRAMES: usize = CLIP_SAMPLES / FRAME_SAMPLES;
/// Linear crossfade width at unit boundaries (5 ms).
const XFADE: usize = 80;
/// Resonator warm-up before each frame.
const WARMUP: usize = 512;
const MAX_HARMONIC_HZ: f64 = 7_600.0;

/// Deterministic toy speaker: a fundamental frequency and fixed harmonic
/// amplitudes drawn from the speaker seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySpeakerSpec {
    pub speaker_id: usize,
    pub f0: f64,
    pub timbre_weights: Vec<f64>,
    pub seed: u64,
}

impl ToySpeakerSpec {
    pub fn seeded(speaker_id: usize, corpus_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(corpus_seed, &format!("spk{speaker_id}")));
        let f0 = rng.gen_range(90.0..300.0);
        let n_harmonics = (MAX_HARMONIC_HZ / 90.0) as usize + 1;
        let timbre_weights = (1..=n_harmonics)
            .map(|h| rng.gen_range(0.5..1.0) / h as f64)
            .collect();
        ToySpeakerSpec { speaker_id, f0, timbre_weights, seed: corpus_seed }
    }
}

/// Stable 64-bit FNV-1a over the corpus seed and a label; drives per-example
/// and per-speaker randomness.
pub fn mix_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(label.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Two-pole resonator (zeros at DC and Nyquist) applied over a sample range.
fn resonate(src: &[f64], start: isize, end: usize, center_hz: f64) -> Vec<f64> {
    let r = 0.97f64;
    let omega = 2.0 * std::f64::consts::PI * center_hz / SAMPLE_RATE as f64;
    let a1 = 2.0 * r * omega.cos();
    let a2 = -r * r;
    let b0 = (1.0 - r * r) / 2.0;
    let mut y1 = 0.0;
    let mut y2 = 0.0;
    let mut x1 = 0.0;
    let mut x2 = 0.0;
    let mut out = Vec::with_capacity((end as isize - start).max(0) as usize);
    let mut n = start;
    while (n as usize) < end || n < 0 {
        let x = if n >= 0 && (n as usize) < src.len() { src[n as usize] } else { 0.0 };
        let y = b0 * (x - x2) + a1 * y1 + a2 * y2;
        x2 = x1;
        x1 = x;
        y2 = y1;
        y1 = y;
        out.push(y);
        n += 1;
        if n >= end as isize {
            break;
        }
    }
    out
}

/// Render a viseme unit sequence as audio: a continuous harmonic complex at
/// the speaker's f0, filtered per 40 ms frame by the unit's resonance, with
/// 5 ms linear crossfades at frame boundaries, peak-normalized to 0.5.
pub fn render_units(units: &VisemeStream, spk: &ToySpeakerSpec) -> Result<Waveform> {
    if units.frames() == 0 {
        return invalid_arg("empty unit stream");
    }
    let total = units.frames() * FRAME_SAMPLES;
    // continuous-phase harmonic source
    let mut src = vec![0.0f64; total];
    let mut h = 1usize;
    while h as f64 * spk.f0 < MAX_HARMONIC_HZ {
        let amp = spk.timbre_weights.get(h - 1).copied().unwrap_or(0.0);
        if amp > 0.0 {
            let w = 2.0 * std::f64::consts::PI * h as f64 * spk.f0 / SAMPLE_RATE as f64;
            for (n, s) in src.iter_mut().enumerate() {
                *s += amp * (w * n as f64).sin();
            }
        }
        h += 1;
    }
    // per-frame resonances, each rendered with warm-up and a crossfade tail
    let frames = units.frames();
    let mut rendered: Vec<Vec<f64>> = Vec::with_capacity(frames);
    for (t, &unit) in units.unit_ids.iter().enumerate() {
        let center = unit_center_hz(unit, units.n_units);
        let fs = t * FRAME_SAMPLES;
        let fe = ((t + 1) * FRAME_SAMPLES + XFADE).min(total);
        let run = resonate(&src, fs as isize - WARMUP as isize, fe, center);
        rendered.push(run[WARMUP..].to_vec()); // covers [fs, fe)
    }
    let mut out = vec![0.0f64; total];
    for t in 0..frames {
        let fs = t * FRAME_SAMPLES;
        let fe = ((t + 1) * FRAME_SAMPLES).min(total);
        for n in fs..fe {
            let v = rendered[t][n - fs];
            out[n] = if t > 0 && n < fs + XFADE {
                let w = (n - fs) as f64 / XFADE as f64;
                let prev = &rendered[t - 1];
                let tail = prev[n - (t - 1) * FRAME_SAMPLES];
                (1.0 - w) * tail + w * v
            } else {
                v
            };
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let scale = 0.5 / peak;
        for v in out.iter_mut() {
            *v *= scale;
        }
    }
    Waveform::from_vec(out, SAMPLE_RATE)
}

/// Scale factor for the interferer so the target-to-interferer ratio is
/// `snr_db`.
pub fn scale_for_snr(target: &Waveform, interferer: &Waveform, snr_db: f64) -> Result<f64> {
    if target.len() != interferer.len() {
        return invalid_arg("mixture components must have equal lengths");
    }
    if !(-5.0..=5.0).contains(&snr_db) {
        return invalid_arg(format!("snr_db {snr_db} outside [-5, 5]"));
    }
    let p1: f64 = target.samples.iter().map(|v| v * v).sum();
    let p2: f64 = interferer.samples.iter().map(|v| v * v).sum();
    if p1 == 0.0 || p2 == 0.0 {
        return Err(Error::DegenerateInput("zero-power mixture component".into()));
    }
    Ok((p1 / (p2 * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// Mix two equal-length signals at the requested SNR (dB of s1 over the
/// scaled s2).
pub fn make_mixture(s1: &Waveform, s2: &Waveform, snr_db: f64) -> Result<Waveform> {
    let g = scale_for_snr(s1, s2, snr_db)?;
    let samples = Array1::from_shape_fn(s1.len(), |i| s1.samples[i] + g * s2.samples[i]);
    Waveform::new(samples, s1.sample_rate)
}

/// One training item.
#[derive(Debug, Clone)]
pub struct MixtureExample {
    pub mixture: Waveform,
    pub target: Waveform,
    pub interferer: Waveform,
    pub visemes: VisemeStream,
    pub snr_db: f64,
    pub example_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Valid => write!(f, "valid"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other}"))),
        }
    }
}

/// One manifest record; paths are relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRow {
    pub example_id: String,
    pub mixture: String,
    pub target: String,
    pub interferer: String,
    pub visemes: String,
    pub snr_db: f64,
    pub split: Split,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// Directory the manifest was loaded from; resolves relative paths.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn rows_for(&self, split: Split) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            for row in &self.rows {
                serde_json::to_writer(&mut f, row)
                    .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
                f.write_all(b"\n")?;
            }
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut rows = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: ManifestRow = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 1)))?;
            if !seen.insert(row.example_id.clone()) {
                return Err(Error::Format(format!("duplicate example_id {}", row.example_id)));
            }
            rows.push(row);
        }
        let base_dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        Ok(Manifest { rows, base_dir })
    }
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::Format(format!("wav create {}: {e}", path.display())))?;
    for &v in w.samples.iter() {
        writer
            .write_sample(quantize_i16(v))
            .map_err(|e| Error::Format(format!("wav write: {e}")))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::Format(format!("wav finalize: {e}")))?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| Error::Format(format!("wav open {}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format(format!(
            "expected 16-bit PCM mono, got {spec:?} in {}",
            path.display()
        )));
    }
    let samples: std::result::Result<Vec<i16>, _> = reader.samples::<i16>().collect();
    let samples = samples.map_err(|e| Error::Format(format!("wav read: {e}")))?;
    Waveform::from_vec(
        samples.into_iter().map(dequantize_i16).collect(),
        spec.sample_rate,
    )
}

fn quantize_i16(v: f64) -> i16 {
    (v * 32767.0).round().clamp(-32768.0, 32767.0) as i16
}

fn dequantize_i16(v: i16) -> f64 {
    v as f64 / 32767.0
}

fn write_visemes(path: &Path, v: &VisemeStream) -> Result<()> {
    let data = ndarray::Array2::from_shape_fn((1, v.frames()), |(_, t)| v.unit_ids[t] as f64);
    write_embedding(path, &EmbeddingSeq::new(data, VIDEO_FPS)?)
}

/// Read a viseme stream from the embedding container (dim=1 rows) or a
/// `frame,unit_id` CSV, chosen by extension.
pub fn read_visemes(path: &Path, n_units: usize) -> Result<VisemeStream> {
    if path.extension().and_then(|e| e.to_str()) == Some("csv") {
        let text = std::fs::read_to_string(path)?;
        let mut ids = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.starts_with("frame")) {
                continue;
            }
            let mut parts = line.split(',');
            let _frame = parts.next();
            let id: usize = parts
                .next()
                .ok_or_else(|| Error::Format(format!("viseme csv line {}", i + 1)))?
                .trim()
                .parse()
                .map_err(|e| Error::Format(format!("viseme csv line {}: {e}", i + 1)))?;
            ids.push(id);
        }
        VisemeStream::new(ids, n_units).map_err(|e| Error::Format(e.to_string()))
    } else {
        let emb = crate::frontends::load_precomputed(path)?;
        if emb.dim() != 1 {
            return Err(Error::Format(format!("viseme container dim {} != 1", emb.dim())));
        }
        let mut ids = Vec::with_capacity(emb.frames());
        for t in 0..emb.frames() {
            let v = emb.data[[0, t]];
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Format(format!("non-integral viseme id {v} at frame {t}")));
            }
            ids.push(v as usize);
        }
        VisemeStream::new(ids, n_units).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Corpus generation request.
#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub n_speakers: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Optional additive white noise folded into the interferer track so the
    /// mixture identity is preserved.
    pub noise_std: f64,
}

/// Deterministic disjoint partition of speaker ids across splits. Splits
/// with no requested examples receive no speakers.
pub fn speaker_partition(spec: &CorpusSpec) -> Result<[Vec<usize>; 3]> {
    let mut ids: Vec<usize> = (0..spec.n_speakers).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, "partition"));
    ids.shuffle(&mut rng);
    let want = [spec.n_train > 0, spec.n_valid > 0, spec.n_test > 0];
    let active = want.iter().filter(|w| **w).count();
    if active == 0 {
        return invalid_arg("corpus must request at least one example");
    }
    // non-train splits get a quarter of the speakers each, at least two
    let quarter = (spec.n_speakers / 4).max(2);
    let mut sizes = [0usize; 3];
    for i in [1, 2] {
        if want[i] {
            sizes[i] = quarter;
        }
    }
    if want[0] {
        sizes[0] = spec
            .n_speakers
            .checked_sub(sizes[1] + sizes[2])
            .filter(|&n| n >= 2)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "{} speakers cannot cover the requested splits",
                    spec.n_speakers
                ))
            })?;
    } else if sizes[1] + sizes[2] > spec.n_speakers {
        return invalid_arg(format!(
            "{} speakers cannot cover the requested splits",
            spec.n_speakers
        ));
    }
    let mut out: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut cursor = 0;
    for i in 0..3 {
        out[i] = ids[cursor..cursor + sizes[i]].to_vec();
        cursor += sizes[i];
    }
    Ok(out)
}

/// Render one example deterministically from the corpus seed and its id.
fn render_example(spec: &CorpusSpec, split: Split, index: usize, speakers: &[usize]) -> Result<MixtureExample> {
    let example_id = format!("{split}_{index:05}");
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, &example_id));
    let ti = rng.gen_range(0..speakers.len());
    let mut ii = rng.gen_range(0..speakers.len() - 1);
    if ii >= ti {
        ii += 1;
    }
    let target_spk = ToySpeakerSpec::seeded(speakers[ti], spec.seed);
    let intf_spk = ToySpeakerSpec::seeded(speakers[ii], spec.seed);
    let units: Vec<usize> = (0..CLIP_FRAMES).map(|_| rng.gen_range(0..DEFAULT_N_UNITS)).collect();
    let intf_units: Vec<usize> =
        (0..CLIP_FRAMES).map(|_| rng.gen_range(0..DEFAULT_N_UNITS)).collect();
    let visemes = VisemeStream::new(units, DEFAULT_N_UNITS)?;
    let intf_visemes = VisemeStream::new(intf_units, DEFAULT_N_UNITS)?;
    let target = render_units(&visemes, &target_spk)?;
    let interferer_raw = render_units(&intf_visemes, &intf_spk)?;
    let snr_db = rng.gen_range(-5.0..5.0);
    let g = scale_for_snr(&target, &interferer_raw, snr_db)?;
    let mut interferer = Array1::from_iter(interferer_raw.samples.iter().map(|v| v * g));
    if spec.noise_std > 0.0 {
        for v in interferer.iter_mut() {
            *v += rng.gen_range(-1.0..1.0) * spec.noise_std * 1.732;
        }
    }
    // joint headroom so target + interferer never clips the 16-bit range
    let peak = target
        .samples
        .iter()
        .zip(interferer.iter())
        .map(|(a, b)| a.abs() + b.abs())
        .fold(0.0f64, f64::max);
    let headroom = if peak > 0.98 { 0.98 / peak } else { 1.0 };
    let target = Waveform::new(target.samples * headroom, SAMPLE_RATE)?;
    let interferer = Waveform::new(interferer * headroom, SAMPLE_RATE)?;
    let mixture = Waveform::new(&target.samples + &interferer.samples, SAMPLE_RATE)?;
    Ok(MixtureExample { mixture, target, interferer, visemes, snr_db, example_id })
}

/// Generate the corpus under `out_dir` and write its manifest.
/// Fully reproducible from the seed.
pub fn build_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<Manifest> {
    if spec.n_speakers < 4 {
        return invalid_arg("need at least 4 speakers");
    }
    let partition = speaker_partition(spec)?;
    std::fs::create_dir_all(out_dir.join("audio"))?;
    std::fs::create_dir_all(out_dir.join("visemes"))?;
    let jobs: Vec<(Split, usize, usize)> = [
        (Split::Train, spec.n_train, 0usize),
        (Split::Valid, spec.n_valid, 1),
        (Split::Test, spec.n_test, 2),
    ]
    .iter()
    .flat_map(|&(split, count, pi)| (0..count).map(move |i| (split, i, pi)))
    .collect();
    let rows: Result<Vec<ManifestRow>> = jobs
        .par_iter()
        .map(|&(split, index, pi)| {
            let ex = render_example(spec, split, index, &partition[pi])?;
            // the mixture written to disk is the sum of the quantized
            // components, so the identity survives 16-bit quantization
            let q = |w: &Waveform| -> Waveform {
                Waveform::new(
                    w.samples.mapv(|v| dequantize_i16(quantize_i16(v))),
                    SAMPLE_RATE,
                )
                .unwrap()
            };
            let tq = q(&ex.target);
            let iq = q(&ex.interferer);
            let xq = Waveform::new(&tq.samples + &iq.samples, SAMPLE_RATE).unwrap();
            let id = &ex.example_id;
            let paths = [
                format!("audio/{id}_mix.wav"),
                format!("audio/{id}_target.wav"),
                format!("audio/{id}_interf.wav"),
                format!("visemes/{id}.avse"),
            ];
            write_wav(&out_dir.join(&paths[0]), &xq)?;
            write_wav(&out_dir.join(&paths[1]), &tq)?;
            write_wav(&out_dir.join(&paths[2]), &iq)?;
            write_visemes(&out_dir.join(&paths[3]), &ex.visemes)?;
            Ok(ManifestRow {
                example_id: id.clone(),
                mixture: paths[0].clone(),
                target: paths[1].clone(),
                interferer: paths[2].clone(),
                visemes: paths[3].clone(),
                snr_db: ex.snr_db,
                split,
            })
        })
        .collect();
    let manifest = Manifest { rows: rows?, base_dir: out_dir.to_path_buf() };
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Load and verify one example from a manifest row.
pub fn load_example(manifest: &Manifest, row: &ManifestRow) -> Result<MixtureExample> {
    let base = &manifest.base_dir;
    let mixture = read_wav(&base.join(&row.mixture))?;
    let target = read_wav(&base.join(&row.target))?;
    let interferer = read_wav(&base.join(&row.interferer))?;
    let visemes = read_visemes(&base.join(&row.visemes), DEFAULT_N_UNITS)?;
    if mixture.len() != target.len() || mixture.len() != interferer.len() {
        return Err(Error::Format(format!(
            "{}: component lengths differ",
            row.example_id
        )));
    }
    if mixture.len() != CLIP_SAMPLES {
        return Err(Error::Format(format!(
            "{}: expected {CLIP_SAMPLES} samples, got {}",
            row.example_id,
            mixture.len()
        )));
    }
    if visemes.frames() != CLIP_FRAMES {
        return Err(Error::Format(format!(
            "{}: expected {CLIP_FRAMES} viseme frames, got {}",
            row.example_id,
            visemes.frames()
        )));
    }
    let max_gap = mixture
        .samples
        .iter()
        .zip(target.samples.iter().zip(interferer.samples.iter()))
        .map(|(x, (s, i))| (x - s - i).abs())
        .fold(0.0f64, f64::max);
    if max_gap > 1e-6 {
        return Err(Error::Format(format!(
            "{}: mixture identity violated by {max_gap:e}",
            row.example_id
        )));
    }
    Ok(MixtureExample {
        mixture,
        target,
        interferer,
        visemes,
        snr_db: row.snr_db,
        example_id: row.example_id.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_spec(seed: u64) -> CorpusSpec {
        CorpusSpec { n_speakers: 8, n_train: 6, n_valid: 3, n_test: 3, seed, noise_std: 0.0 }
    }

    #[test]
    fn render_units_length_and_determinism() {
        let spk = ToySpeakerSpec::seeded(0, 7);
        let units = VisemeStream::new(vec![1; CLIP_FRAMES], DEFAULT_N_UNITS).unwrap();
        let w1 = render_units(&units, &spk).unwrap();
        let w2 = render_units(&units, &spk).unwrap();
        assert_eq!(w1.len(), CLIP_SAMPLES);
        assert_eq!(w1.samples, w2.samples);
        let peak = w1.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 0.5).abs() < 1e-12);
    }

    #[test]
    fn same_units_two_speakers_differ() {
        let a = ToySpeakerSpec::seeded(0, 7);
        let b = ToySpeakerSpec::seeded(1, 7);
        assert!((a.f0 - b.f0).abs() > 1e-6);
        let units = VisemeStream::new(vec![2, 5, 9, 0, 3], DEFAULT_N_UNITS).unwrap();
        let wa = render_units(&units, &a).unwrap();
        let wb = render_units(&units, &b).unwrap();
        let diff = (&wa.samples - &wb.samples).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff > 1e-3);
    }

    #[test]
    fn constant_units_are_quasi_stationary() {
        // all-same-unit stream: per-frame spectra stay near the resonance,
        // so the dominant FFT bin is identical across interior frames
        let spk = ToySpeakerSpec::seeded(2, 7);
        let units = VisemeStream::new(vec![6; 10], DEFAULT_N_UNITS).unwrap();
        let w = render_units(&units, &spk).unwrap();
        let power = crate::signal::power_spectrogram(
            &w.samples,
            FRAME_SAMPLES,
            FRAME_SAMPLES,
            1024,
            10,
            0,
            crate::tensor::Window::Hann,
        );
        let argmax = |row: ndarray::ArrayView1<f64>| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        let first = argmax(power.row(1));
        for t in 2..9 {
            assert_eq!(argmax(power.row(t)), first, "frame {t}");
        }
    }

    #[test]
    fn mixture_snr_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let s1 = Waveform::new(Array1::from_shape_fn(4000, |_| rng.gen_range(-0.5..0.5)), SAMPLE_RATE)
            .unwrap();
        let s2 = Waveform::new(Array1::from_shape_fn(4000, |_| rng.gen_range(-0.5..0.5)), SAMPLE_RATE)
            .unwrap();
        for snr in [-5.0, -1.3, 0.0, 2.2, 5.0] {
            let g = scale_for_snr(&s1, &s2, snr).unwrap();
            let p1: f64 = s1.samples.iter().map(|v| v * v).sum();
            let p2: f64 = s2.samples.iter().map(|v| (v * g) * (v * g)).sum();
            let achieved = 10.0 * (p1 / p2).log10();
            assert!((achieved - snr).abs() < 1e-6, "snr {snr}: achieved {achieved}");
        }
        // equal-power inputs at 0 dB: scale 1
        let g = scale_for_snr(&s1, &s1.clone(), 0.0).unwrap();
        assert!((g - 1.0).abs() < 1e-6);
        assert!(make_mixture(&s1, &s2, 6.0).is_err());
        let zero = Waveform::new(Array1::zeros(4000), SAMPLE_RATE).unwrap();
        assert!(matches!(
            make_mixture(&s1, &zero, 0.0),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn corpus_round_trip_and_identity() {
        let dir = tempdir().unwrap();
        let manifest = build_corpus(&small_spec(7), dir.path()).unwrap();
        assert_eq!(manifest.rows_for(Split::Train).len(), 6);
        assert_eq!(manifest.rows_for(Split::Valid).len(), 3);
        assert_eq!(manifest.rows_for(Split::Test).len(), 3);
        let reloaded = Manifest::load(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(reloaded.rows.len(), manifest.rows.len());
        for row in &reloaded.rows {
            let ex = load_example(&reloaded, row).unwrap();
            assert_eq!(ex.mixture.len(), CLIP_SAMPLES);
            assert_eq!(ex.visemes.frames(), CLIP_FRAMES);
        }
    }

    #[test]
    fn corpus_is_bitwise_deterministic() {
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        build_corpus(&small_spec(9), d1.path()).unwrap();
        build_corpus(&small_spec(9), d2.path()).unwrap();
        let mut files: Vec<_> = walk(d1.path());
        files.sort();
        assert!(!files.is_empty());
        for rel in files {
            let a = std::fs::read(d1.path().join(&rel)).unwrap();
            let b = std::fs::read(d2.path().join(&rel)).unwrap();
            assert_eq!(a, b, "file {rel} differs between identical seeds");
        }
    }

    fn walk(root: &Path) -> Vec<String> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p.strip_prefix(root).unwrap().to_string_lossy().into_owned());
                }
            }
        }
        out
    }

    #[test]
    fn speaker_splits_are_disjoint() {
        let spec = small_spec(7);
        let parts = speaker_partition(&spec).unwrap();
        let all: std::collections::HashSet<_> = parts.iter().flatten().collect();
        assert_eq!(all.len(), parts.iter().map(|p| p.len()).sum::<usize>());
        assert!(parts.iter().all(|p| p.len() >= 2));
    }

    #[test]
    fn tampered_target_fails_identity_check() {
        let dir = tempdir().unwrap();
        let manifest = build_corpus(&small_spec(11), dir.path()).unwrap();
        let row = &manifest.rows[0];
        // overwrite the target with silence
        let zeros = Waveform::new(Array1::from_elem(CLIP_SAMPLES, 0.25), SAMPLE_RATE).unwrap();
        write_wav(&dir.path().join(&row.target), &zeros).unwrap();
        assert!(matches!(
            load_example(&manifest, row),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn viseme_csv_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.csv");
        std::fs::write(&path, "frame,unit_id\n0,3\n1,3\n2,11\n").unwrap();
        let v = read_visemes(&path, DEFAULT_N_UNITS).unwrap();
        assert_eq!(v.unit_ids, vec![3, 3, 11]);
    }
}
