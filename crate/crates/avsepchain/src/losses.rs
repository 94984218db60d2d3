//! SI-SNR loss, contrastive semantic matching loss, total objective, and the
//! SI-SNRi / SDRi evaluation metrics.
//!
//! Each loss exists in two forms that share their arithmetic: a pure function
//! of arrays and a tape form used inside training graphs.

use crate::error::{invalid_arg, Error, Result};
use crate::signal::{EmbeddingSeq, Waveform};
use crate::tensor::{Tape, Tx};
use ndarray::Array1;

/// Loss weighting and numeric guards.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    /// Weight of the matching loss in the total objective.
    pub lambda: f64,
    /// Contrastive margin.
    pub margin: f64,
    /// Additive guard in ratios.
    pub epsilon: f64,
    /// Magnitude cap (dB) applied to reported metrics.
    pub clamp_db: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 1.0, margin: 0.5, epsilon: 1e-8, clamp_db: 30.0 }
    }
}

/// Guard inside per-frame norms; keeps the distance differentiable at zero.
const NORM_EPS: f64 = 1e-12;

/// Negative scale-invariant SNR in dB (lower is better); both signals are
/// mean-subtracted, the estimate is projected onto the target, and the loss
/// is `-10 log10((|s_t|^2 + eps) / (|e|^2 + eps))`.
pub fn si_snr_loss(target: &Waveform, estimate: &Waveform, eps: f64) -> Result<f64> {
    si_snr_loss_raw(
        target.samples.as_slice().unwrap(),
        estimate.samples.as_slice().unwrap(),
        eps,
    )
}

pub fn si_snr_loss_raw(target: &[f64], estimate: &[f64], eps: f64) -> Result<f64> {
    if target.len() != estimate.len() {
        return invalid_arg(format!(
            "length mismatch: target {} vs estimate {}",
            target.len(),
            estimate.len()
        ));
    }
    if target.is_empty() {
        return invalid_arg("empty signals");
    }
    let n = target.len() as f64;
    let mu = target.iter().sum::<f64>() / n;
    let me = estimate.iter().sum::<f64>() / n;
    let u: Vec<f64> = target.iter().map(|v| v - mu).collect();
    let e: Vec<f64> = estimate.iter().map(|v| v - me).collect();
    let u_pow: f64 = u.iter().map(|v| v * v).sum();
    if u_pow == 0.0 {
        return Err(Error::DegenerateTarget("target is identically zero".into()));
    }
    let dot: f64 = e.iter().zip(&u).map(|(a, b)| a * b).sum();
    let alpha = dot / (u_pow + eps);
    let mut s_pow = 0.0;
    let mut n_pow = 0.0;
    for i in 0..u.len() {
        let s = alpha * u[i];
        let d = e[i] - s;
        s_pow += s * s;
        n_pow += d * d;
    }
    Ok(-10.0 * ((s_pow + eps) / (n_pow + eps)).log10())
}

/// Tape form of [`si_snr_loss`]; `target` and `estimate` are 1-D tensors of
/// equal length.
pub fn si_snr_loss_tape(t: &mut Tape, target: Tx, estimate: Tx, eps: f64) -> Tx {
    let u = t.zero_mean(target);
    let e = t.zero_mean(estimate);
    let dot = t.dot(e, u);
    let u_pow = t.dot(u, u);
    let denom = t.add_scalar(u_pow, eps);
    let alpha = t.div(dot, denom);
    let s_t = t.mul(alpha, u);
    let resid = t.sub(e, s_t);
    let s_pow = t.dot(s_t, s_t);
    let n_pow = t.dot(resid, resid);
    let num = t.add_scalar(s_pow, eps);
    let den = t.add_scalar(n_pow, eps);
    let ratio = t.div(num, den);
    let l = t.log10(ratio);
    t.mul_scalar(l, -10.0)
}

/// Positive scale-invariant SNR in dB (higher is better).
pub fn si_snr(reference: &Waveform, estimate: &Waveform, eps: f64) -> Result<f64> {
    Ok(-si_snr_loss(reference, estimate, eps)?)
}

/// Map audio frame index to its viseme frame by the frame-rate ratio.
/// Rates must divide integrally one way or the other.
fn frame_pairs(audio_frames: usize, audio_rate: f64, video_frames: usize, video_rate: f64) -> Result<Vec<(usize, usize)>> {
    let ratio_av = audio_rate / video_rate;
    let ratio_va = video_rate / audio_rate;
    let integral = |x: f64| (x - x.round()).abs() < 1e-9 && x.round() >= 1.0;
    if !integral(ratio_av) && !integral(ratio_va) {
        return invalid_arg(format!(
            "frame rates {audio_rate} and {video_rate} are not integrally related"
        ));
    }
    let mut pairs = Vec::new();
    for i in 0..audio_frames {
        let j = (i as f64 * video_rate / audio_rate).floor() as usize;
        if j < video_frames {
            pairs.push((i, j));
        }
    }
    if pairs.is_empty() {
        return invalid_arg("no aligned frames between audio and video sequences");
    }
    Ok(pairs)
}

fn normalized_col(data: &ndarray::Array2<f64>, col: usize) -> Array1<f64> {
    let c = data.column(col);
    let norm = (c.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
    c.mapv(|v| v / norm)
}

/// Mean per-frame L2 distance between per-frame L2-normalized sequences,
/// pairing audio frame `i` with viseme frame `floor(i * r_v / r_a)`.
pub fn embedding_distance(f_v: &EmbeddingSeq, f_a: &EmbeddingSeq) -> Result<f64> {
    if f_v.dim() != f_a.dim() {
        return invalid_arg("embedding dims differ");
    }
    let pairs = frame_pairs(f_a.frames(), f_a.frame_rate, f_v.frames(), f_v.frame_rate)?;
    let mut acc = 0.0;
    for &(i, j) in &pairs {
        let a = normalized_col(&f_a.data, i);
        let v = normalized_col(&f_v.data, j);
        let d2: f64 = a.iter().zip(v.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
        acc += (d2 + NORM_EPS).sqrt();
    }
    Ok(acc / pairs.len() as f64)
}

/// Contrastive hinge over embedding distances.
pub fn matching_hinge(d_pos: f64, d_neg: f64, margin: f64) -> f64 {
    (d_pos - d_neg + margin).max(0.0)
}

/// Contrastive semantic matching loss:
/// `max(d(n(f_v), n(f_a)) - d(n(f_v), n(f_a_neg)) + m, 0)`.
pub fn matching_loss(
    f_v: &EmbeddingSeq,
    f_a: &EmbeddingSeq,
    f_a_neg: &EmbeddingSeq,
    margin: f64,
) -> Result<f64> {
    if (f_a.frame_rate - f_a_neg.frame_rate).abs() > 1e-9 || f_a.frames() != f_a_neg.frames() {
        return invalid_arg("positive and negative audio embeddings must share rate and length");
    }
    let d_pos = embedding_distance(f_v, f_a)?;
    let d_neg = embedding_distance(f_v, f_a_neg)?;
    Ok(matching_hinge(d_pos, d_neg, margin))
}

/// Tape distance between time-major `[T, D]` sequences with a precomputed
/// frame pairing; `f_v_aligned` must already be gathered to the audio frames.
fn tape_distance(t: &mut Tape, f_a: Tx, f_v_aligned: Tx) -> Tx {
    let na = tape_normalize_rows(t, f_a);
    let nv = tape_normalize_rows(t, f_v_aligned);
    let diff = t.sub(na, nv);
    let sq = t.mul(diff, diff);
    let ssum = t.sum_last(sq);
    let dist = t.sqrt_eps(ssum, NORM_EPS);
    t.mean_all(dist)
}

/// Row-wise L2 normalization of a time-major `[T, D]` tensor.
pub fn tape_normalize_rows(t: &mut Tape, x: Tx) -> Tx {
    let sq = t.mul(x, x);
    let ssum = t.sum_last(sq);
    let norm = t.sqrt_eps(ssum, NORM_EPS);
    let rows = t.shape(norm)[0];
    let norm_col = t.reshape(norm, &[rows, 1]);
    t.div(x, norm_col)
}

/// Tape form of [`matching_loss`]: `f_a`/`f_a_neg` are `[T_a, D]` tape
/// tensors at `audio_rate`; `f_v` is a constant `[T_v, D]` at `video_rate`.
pub fn matching_loss_tape(
    t: &mut Tape,
    f_v: &ndarray::Array2<f64>,
    video_rate: f64,
    f_a: Tx,
    f_a_neg: Tx,
    audio_rate: f64,
    margin: f64,
) -> Result<Tx> {
    let audio_frames = t.shape(f_a)[0];
    let pairs = frame_pairs(audio_frames, audio_rate, f_v.nrows(), video_rate)?;
    let mut gathered = ndarray::Array2::<f64>::zeros((pairs.len(), f_v.ncols()));
    for (row, &(_, j)) in pairs.iter().enumerate() {
        gathered.row_mut(row).assign(&f_v.row(j));
    }
    let n_pairs = pairs.len();
    let fv_const = t.constant(gathered.into_dyn());
    let fa = if n_pairs < audio_frames { t.narrow(f_a, 0, 0, n_pairs) } else { f_a };
    let fneg = if n_pairs < audio_frames { t.narrow(f_a_neg, 0, 0, n_pairs) } else { f_a_neg };
    let d_pos = tape_distance(t, fa, fv_const);
    let d_neg = tape_distance(t, fneg, fv_const);
    let diff = t.sub(d_pos, d_neg);
    let shifted = t.add_scalar(diff, margin);
    Ok(t.relu(shifted))
}

/// Total objective `L_per + L_syn + lambda * L_mat`.
pub fn total_loss(l_per: f64, l_syn: f64, l_mat: f64, weights: &LossWeights) -> Result<f64> {
    let total = l_per + l_syn + weights.lambda * l_mat;
    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite total loss: per={l_per} syn={l_syn} mat={l_mat}"
        )));
    }
    Ok(total)
}

fn clamp_db(v: f64, cap: f64) -> f64 {
    v.clamp(-cap, cap)
}

/// SI-SNR improvement of the estimate over the unprocessed mixture,
/// clamped to `±clamp_db`.
pub fn si_snri(mix: &Waveform, est: &Waveform, reference: &Waveform, w: &LossWeights) -> Result<f64> {
    let s_est = si_snr(reference, est, w.epsilon)?;
    let s_mix = si_snr(reference, mix, w.epsilon)?;
    Ok(clamp_db(s_est - s_mix, w.clamp_db))
}

fn sdr(reference: &Waveform, estimate: &Waveform, eps: f64) -> Result<f64> {
    if reference.len() != estimate.len() {
        return invalid_arg("length mismatch");
    }
    let n = reference.len() as f64;
    let mr = reference.samples.sum() / n;
    let me = estimate.samples.sum() / n;
    let mut ref_pow = 0.0;
    let mut err_pow = 0.0;
    for i in 0..reference.len() {
        let r = reference.samples[i] - mr;
        let e = estimate.samples[i] - me;
        ref_pow += r * r;
        err_pow += (r - e) * (r - e);
    }
    if ref_pow == 0.0 {
        return Err(Error::DegenerateTarget("reference is identically zero".into()));
    }
    Ok(10.0 * (ref_pow / (err_pow + eps)).log10())
}

/// SDR improvement over the mixture (plain SDR, no distortion decomposition),
/// clamped to `±clamp_db`.
pub fn sdri(mix: &Waveform, est: &Waveform, reference: &Waveform, w: &LossWeights) -> Result<f64> {
    let d_est = sdr(reference, est, w.epsilon)?;
    let d_mix = sdr(reference, mix, w.epsilon)?;
    Ok(clamp_db(d_est - d_mix, w.clamp_db))
}
