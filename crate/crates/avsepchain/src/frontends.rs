//! Frozen, differentiable front-end embedding extractors.
//!
//! The audio front-end maps a waveform to a 25 Hz embedding sequence through
//! a fixed triangular filterbank and a seeded linear projection; the video
//! front-end is a seeded lookup table over viseme unit ids. Both are built
//! once and never updated. A binary container format stores embedding
//! sequences computed offline.

use crate::error::{invalid_arg, Error, Result};
use crate::signal::{mel_filterbank, power_spectrogram, EmbeddingSeq, Waveform, SAMPLE_RATE, VIDEO_FPS};
use crate::tensor::Window;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Samples per 25 Hz audio frame.
pub const AUDIO_FRAME: usize = 640;
/// Number of triangular bandpass filters in the audio front-end.
pub const AUDIO_BANDS: usize = 16;
pub const AUDIO_FFT: usize = 1024;
pub const LOG_FLOOR: f64 = 1e-10;
/// Default number of viseme units.
pub const DEFAULT_N_UNITS: usize = 12;

/// Which front-end to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrontendKind {
    OracleAudio,
    OracleVideo,
    Precomputed,
}

/// Construction parameters for a frozen front-end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontendSpec {
    pub kind: FrontendKind,
    pub embed_dim: usize,
    pub seed: u64,
}

impl FrontendSpec {
    pub fn oracle_audio(embed_dim: usize, seed: u64) -> Self {
        FrontendSpec { kind: FrontendKind::OracleAudio, embed_dim, seed }
    }

    pub fn oracle_video(embed_dim: usize, seed: u64) -> Self {
        FrontendSpec { kind: FrontendKind::OracleVideo, embed_dim, seed }
    }
}

/// One viseme unit id per 40 ms video frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisemeStream {
    pub unit_ids: Vec<usize>,
    pub n_units: usize,
}

impl VisemeStream {
    pub fn new(unit_ids: Vec<usize>, n_units: usize) -> Result<Self> {
        if let Some(&bad) = unit_ids.iter().find(|&&id| id >= n_units) {
            return invalid_arg(format!("unit id {bad} out of range (n_units={n_units})"));
        }
        Ok(VisemeStream { unit_ids, n_units })
    }

    pub fn frames(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn frame_rate(&self) -> f64 {
        VIDEO_FPS
    }
}

/// Resonance center shared across speakers for a viseme unit: log-spaced
/// over the speech band.
pub fn unit_center_hz(unit: usize, n_units: usize) -> f64 {
    let lo: f64 = 300.0;
    let hi: f64 = 3400.0;
    if n_units <= 1 {
        return lo;
    }
    lo * (hi / lo).powf(unit as f64 / (n_units - 1) as f64)
}

/// Seeded projection from filterbank log-energies to the embedding space.
/// Rows are mean-centered so constant log offsets map to zero.
fn seeded_projection(embed_dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    let mut p = Array2::<f64>::zeros((embed_dim, AUDIO_BANDS));
    for v in p.iter_mut() {
        *v = rng.sample::<f64, _>(StandardNormal) / (AUDIO_BANDS as f64).sqrt();
    }
    for mut row in p.rows_mut() {
        let m = row.mean().unwrap();
        row.mapv_inplace(|v| v - m);
    }
    p
}

/// Frozen audio front-end: 25 Hz framing, triangular filterbank
/// log-energies, seeded linear map. Differentiable with respect to the
/// input waveform; parameters never change after construction.
#[derive(Debug, Clone)]
pub struct AudioFrontend {
    pub spec: FrontendSpec,
    filterbank: Array2<f64>,
    projection: Array2<f64>,
}

impl AudioFrontend {
    pub fn new(spec: FrontendSpec) -> Result<Self> {
        if spec.kind != FrontendKind::OracleAudio {
            return invalid_arg("AudioFrontend requires kind oracle_audio");
        }
        if spec.embed_dim == 0 {
            return invalid_arg("embed_dim must be positive");
        }
        Ok(AudioFrontend {
            spec,
            filterbank: mel_filterbank(AUDIO_BANDS, AUDIO_FFT, SAMPLE_RATE as f64, 8000.0),
            projection: seeded_projection(spec.embed_dim, spec.seed),
        })
    }

    pub fn filterbank(&self) -> &Array2<f64> {
        &self.filterbank
    }

    pub fn projection(&self) -> &Array2<f64> {
        &self.projection
    }

    /// Per-frame filterbank log-energies `[frames x bands]`.
    pub fn log_energies(&self, w: &Waveform) -> Result<Array2<f64>> {
        if w.sample_rate != SAMPLE_RATE {
            return invalid_arg(format!("embed_audio expects {SAMPLE_RATE} Hz input"));
        }
        let frames = w.len() / AUDIO_FRAME;
        if frames == 0 {
            return invalid_arg("input shorter than one 40 ms frame");
        }
        let power = power_spectrogram(
            &w.samples,
            AUDIO_FRAME,
            AUDIO_FRAME,
            AUDIO_FFT,
            frames,
            0,
            Window::Rect,
        );
        let energies = power.dot(&self.filterbank.t());
        Ok(energies.mapv(|e| e.max(LOG_FLOOR).ln()))
    }

    /// Embed a waveform as a 25 Hz sequence `[embed_dim x frames]`.
    pub fn embed(&self, w: &Waveform) -> Result<EmbeddingSeq> {
        let loge = self.log_energies(w)?;
        let emb = self.projection.dot(&loge.t());
        EmbeddingSeq::new(emb, VIDEO_FPS)
    }

    /// Tape twin of [`AudioFrontend::embed`], time-major `[frames x dim]`.
    /// The filterbank and projection enter as constants, so gradients flow
    /// only to the input waveform.
    pub fn embed_tape(&self, t: &mut crate::tensor::Tape, x: crate::tensor::Tx) -> crate::tensor::Tx {
        let len = t.shape(x)[0];
        let frames = len / AUDIO_FRAME;
        assert!(frames > 0, "input shorter than one audio frame");
        let cfg = crate::tensor::SpecConfig {
            win_len: AUDIO_FRAME,
            hop: AUDIO_FRAME,
            fft_size: AUDIO_FFT,
            n_frames: frames,
            start_offset: 0,
            window: Window::Rect,
        };
        let power = t.power_spec(x, cfg); // [frames, bins]
        let fb_t = t.constant(self.filterbank.t().to_owned().into_dyn());
        let energies = t.matmul(power, fb_t); // [frames, bands]
        let loge = t.ln_clamped(energies, LOG_FLOOR);
        let proj_t = t.constant(self.projection.t().to_owned().into_dyn());
        t.matmul(loge, proj_t) // [frames, dim]
    }
}

/// Frozen video front-end: lookup table from viseme unit ids to embeddings.
/// The table routes each unit's analytic filterbank signature through the
/// same seeded projection as the audio front-end, so matched audio/viseme
/// content lands nearby in embedding space.
#[derive(Debug, Clone)]
pub struct VideoFrontend {
    pub spec: FrontendSpec,
    pub n_units: usize,
    table: Array2<f64>,
}

impl VideoFrontend {
    pub fn new(spec: FrontendSpec, n_units: usize) -> Result<Self> {
        if spec.kind != FrontendKind::OracleVideo {
            return invalid_arg("VideoFrontend requires kind oracle_video");
        }
        if spec.embed_dim == 0 || n_units == 0 {
            return invalid_arg("embed_dim and n_units must be positive");
        }
        let fb = mel_filterbank(AUDIO_BANDS, AUDIO_FFT, SAMPLE_RATE as f64, 8000.0);
        let projection = seeded_projection(spec.embed_dim, spec.seed);
        let mut table = Array2::<f64>::zeros((n_units, spec.embed_dim));
        for u in 0..n_units {
            let hz = unit_center_hz(u, n_units);
            let sig = narrowband_signature(&fb, hz);
            let emb = projection.dot(&sig);
            // unit-norm rows keep downstream attention logits at unit scale;
            // the matching loss is normalization-invariant either way
            let norm = emb.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            table.row_mut(u).assign(&(&emb / norm));
        }
        Ok(VideoFrontend { spec, n_units, table })
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.table
    }

    /// Embed a viseme stream as a 25 Hz sequence `[embed_dim x frames]`.
    pub fn embed(&self, v: &VisemeStream) -> Result<EmbeddingSeq> {
        if v.n_units != self.n_units {
            return invalid_arg(format!(
                "stream has {} units, frontend expects {}",
                v.n_units, self.n_units
            ));
        }
        if v.frames() == 0 {
            return invalid_arg("empty viseme stream");
        }
        let mut out = Array2::<f64>::zeros((self.spec.embed_dim, v.frames()));
        for (t, &id) in v.unit_ids.iter().enumerate() {
            if id >= self.n_units {
                return invalid_arg(format!("unit id {id} out of range"));
            }
            out.column_mut(t).assign(&self.table.row(id));
        }
        EmbeddingSeq::new(out, VIDEO_FPS)
    }
}

/// Filterbank log-energy signature of an idealized narrowband source at
/// `hz`: each filter's triangle weight evaluated at that frequency.
fn narrowband_signature(fb: &Array2<f64>, hz: f64) -> Array1<f64> {
    let bins = fb.ncols();
    let bin_hz = SAMPLE_RATE as f64 / AUDIO_FFT as f64;
    let pos = hz / bin_hz;
    let k0 = pos.floor() as usize;
    let frac = pos - k0 as f64;
    let mut sig = Array1::<f64>::zeros(fb.nrows());
    for m in 0..fb.nrows() {
        let w0 = fb[[m, k0.min(bins - 1)]];
        let w1 = fb[[m, (k0 + 1).min(bins - 1)]];
        let w = w0 * (1.0 - frac) + w1 * frac;
        sig[m] = w.max(LOG_FLOOR).ln();
    }
    sig
}

const MAGIC: &[u8; 4] = b"AVSE";
const CONTAINER_VERSION: u32 = 1;

/// Write an embedding sequence to the binary container format:
/// magic "AVSE", u32 version, u32 dim, u32 frames, f32 frame_rate, then
/// `dim * frames` little-endian f32 values in frame-major order.
pub fn write_embedding(path: &Path, e: &EmbeddingSeq) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(CONTAINER_VERSION)?;
    w.write_u32::<LittleEndian>(e.dim() as u32)?;
    w.write_u32::<LittleEndian>(e.frames() as u32)?;
    w.write_f32::<LittleEndian>(e.frame_rate as f32)?;
    for t in 0..e.frames() {
        for d in 0..e.dim() {
            w.write_f32::<LittleEndian>(e.data[[d, t]] as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load an embedding sequence stored by [`write_embedding`] (or computed
/// offline by an external front-end).
pub fn load_precomputed(path: &Path) -> Result<EmbeddingSeq> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated container header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::Format("truncated container header".into()))?;
    if version != CONTAINER_VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let dim = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::Format("truncated container header".into()))? as usize;
    let frames = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::Format("truncated container header".into()))? as usize;
    let frame_rate = r
        .read_f32::<LittleEndian>()
        .map_err(|_| Error::Format("truncated container header".into()))? as f64;
    if dim == 0 {
        return Err(Error::Format("container dim must be positive".into()));
    }
    let mut data = Array2::<f64>::zeros((dim, frames));
    for t in 0..frames {
        for d in 0..dim {
            let v = r
                .read_f32::<LittleEndian>()
                .map_err(|_| Error::Format(format!("truncated container body at frame {t}")))?;
            data[[d, t]] = v as f64;
        }
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after container body".into()));
    }
    EmbeddingSeq::new(data, frame_rate).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use tempfile::tempdir;

    fn audio_fe() -> AudioFrontend {
        AudioFrontend::new(FrontendSpec::oracle_audio(64, 7)).unwrap()
    }

    fn video_fe() -> VideoFrontend {
        VideoFrontend::new(FrontendSpec::oracle_video(64, 7), DEFAULT_N_UNITS).unwrap()
    }

    #[test]
    fn embed_audio_two_seconds_is_50_frames() {
        let w = Waveform::new(ndarray::Array1::zeros(32_000), SAMPLE_RATE).unwrap();
        let e = audio_fe().embed(&w).unwrap();
        assert_eq!(e.data.dim(), (64, 50));
        assert_eq!(e.frame_rate, 25.0);
    }

    #[test]
    fn silence_embeds_constant() {
        let w = Waveform::new(ndarray::Array1::zeros(6400), SAMPLE_RATE).unwrap();
        let e = audio_fe().embed(&w).unwrap();
        let first = e.data.column(0).to_owned();
        for t in 1..e.frames() {
            for d in 0..e.dim() {
                assert!((e.data[[d, t]] - first[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embed_audio_rejects_short() {
        let w = Waveform::new(ndarray::Array1::zeros(100), SAMPLE_RATE).unwrap();
        assert!(audio_fe().embed(&w).is_err());
    }

    #[test]
    fn embed_audio_input_gradcheck() {
        use crate::tensor::Tape;
        let fe = AudioFrontend::new(FrontendSpec::oracle_audio(6, 3)).unwrap();
        let mut rng = rand::rngs::StdRng::seed_from_u64(71);
        let n = 2 * AUDIO_FRAME;
        let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let eval = |x: &[f64]| -> (f64, Option<Vec<f64>>) {
            let mut t = Tape::new();
            let xt = t.var(ndarray::Array1::from(x.to_vec()).into_dyn());
            let e = fe.embed_tape(&mut t, xt);
            let sq = t.mul(e, e);
            let loss = t.sum_all(sq);
            let v = *t.value(loss).iter().next().unwrap();
            t.backward(loss);
            let g = t.grad(xt).map(|g| g.iter().cloned().collect());
            (v, g)
        };
        let (_, g) = eval(&x0);
        let analytic = g.unwrap();
        let mut xp = x0.clone();
        for i in (0..n).step_by(37) {
            let orig = xp[i];
            xp[i] = orig + 1e-5;
            let (fp, _) = eval(&xp);
            xp[i] = orig - 1e-5;
            let (fm, _) = eval(&xp);
            xp[i] = orig;
            let numeric = (fp - fm) / 2e-5;
            let denom = analytic[i].abs().max(numeric.abs());
            assert!(
                (analytic[i] - numeric).abs() < (1e-4 * denom).max(1e-8),
                "sample {i}: {} vs {numeric}",
                analytic[i]
            );
        }
    }

    #[test]
    fn frontends_deterministic_per_seed() {
        let a1 = AudioFrontend::new(FrontendSpec::oracle_audio(32, 9)).unwrap();
        let a2 = AudioFrontend::new(FrontendSpec::oracle_audio(32, 9)).unwrap();
        assert_eq!(a1.projection(), a2.projection());
        let v1 = VideoFrontend::new(FrontendSpec::oracle_video(32, 9), 12).unwrap();
        let v2 = VideoFrontend::new(FrontendSpec::oracle_video(32, 9), 12).unwrap();
        assert_eq!(v1.table(), v2.table());
    }

    #[test]
    fn embed_video_lookup_semantics() {
        let fe = video_fe();
        let stream = VisemeStream::new(vec![3, 3, 7], DEFAULT_N_UNITS).unwrap();
        let e = fe.embed(&stream).unwrap();
        assert_eq!(e.data.dim(), (64, 3));
        assert_eq!(e.frame_rate, 25.0);
        assert_eq!(e.data.column(0), e.data.column(1));
        assert_eq!(e.data.column(0).to_owned(), fe.table().row(3).to_owned());
        assert_eq!(e.data.column(2).to_owned(), fe.table().row(7).to_owned());
    }

    #[test]
    fn viseme_stream_rejects_out_of_range() {
        assert!(VisemeStream::new(vec![0, 12], 12).is_err());
    }

    #[test]
    fn container_round_trip_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("e.avse");
        // f32-exact values survive the on-disk f32 encoding bitwise
        let e = EmbeddingSeq::new(arr2(&[[0.5, -1.25], [3.0, 0.0], [-2.5, 7.5]]), 25.0).unwrap();
        write_embedding(&path, &e).unwrap();
        let back = load_precomputed(&path).unwrap();
        assert_eq!(back.data, e.data);
        assert_eq!(back.frame_rate, e.frame_rate);
    }

    #[test]
    fn container_write_load_fixpoint() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.avse");
        let p2 = dir.path().join("b.avse");
        let e = EmbeddingSeq::new(
            Array2::from_shape_fn((5, 9), |(d, t)| ((d * 31 + t) as f64).sin()),
            50.0,
        )
        .unwrap();
        write_embedding(&p1, &e).unwrap();
        let once = load_precomputed(&p1).unwrap();
        write_embedding(&p2, &once).unwrap();
        let twice = load_precomputed(&p2).unwrap();
        assert_eq!(once.data, twice.data);
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn container_header_contract() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("big.avse");
        let e = EmbeddingSeq::new(Array2::zeros((768, 50)), 25.0).unwrap();
        write_embedding(&path, &e).unwrap();
        let back = load_precomputed(&path).unwrap();
        assert_eq!(back.data.dim(), (768, 50));
    }

    #[test]
    fn container_rejects_truncation_and_bad_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.avse");
        let e = EmbeddingSeq::new(Array2::ones((4, 6)), 25.0).unwrap();
        write_embedding(&path, &e).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_precomputed(&path), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_precomputed(&path), Err(Error::Format(_))));
    }

    #[test]
    fn unit_centers_are_log_spaced_and_in_band() {
        for u in 0..12 {
            let hz = unit_center_hz(u, 12);
            assert!((300.0..=3400.0).contains(&hz));
        }
        let r1 = unit_center_hz(1, 12) / unit_center_hz(0, 12);
        let r2 = unit_center_hz(11, 12) / unit_center_hz(10, 12);
        assert!((r1 - r2).abs() < 1e-9);
    }
}
