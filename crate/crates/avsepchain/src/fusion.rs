//! Cross-modal fusion: scaled dot-product cross attention generalized over
//! which modality supplies the query versus key/value, plus concatenation
//! and summation baselines.
//!
//! Convention throughout: the key/value modality is the dominant one, the
//! query modality is the conditional one. Features are time-major `[T x d]`.

use crate::error::{invalid_arg, Result};
use crate::tensor::{Tape, Tx};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Modality {
    Audio,
    Video,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Modality::Audio => write!(f, "audio"),
            Modality::Video => write!(f, "video"),
        }
    }
}

/// Which modality is the query (conditional) and which the key/value
/// (dominant) side of cross-modal attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DominanceConfig {
    pub query: Modality,
    pub kv: Modality,
}

impl DominanceConfig {
    pub fn new(query: Modality, kv: Modality) -> Result<Self> {
        if query == kv {
            return invalid_arg("query and key/value modalities must differ");
        }
        Ok(DominanceConfig { query, kv })
    }

    /// Video query, audio key/value: the audio-dominant configuration.
    pub fn audio_dominant() -> Self {
        DominanceConfig { query: Modality::Video, kv: Modality::Audio }
    }

    /// Audio query, video key/value: the visual-dominant configuration.
    pub fn video_dominant() -> Self {
        DominanceConfig { query: Modality::Audio, kv: Modality::Video }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FusionStrategy {
    CrossAttention,
    Concatenation,
    Summation,
}

impl std::fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FusionStrategy::CrossAttention => write!(f, "cross-attention"),
            FusionStrategy::Concatenation => write!(f, "concatenation"),
            FusionStrategy::Summation => write!(f, "summation"),
        }
    }
}

/// Learnable projections of one cross-modal attention layer. No biases.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
}

impl AttentionParams {
    pub fn seeded(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mk = || xavier(d, d, &mut rng);
        AttentionParams { w_q: mk(), w_k: mk(), w_v: mk() }
    }
}

/// Learnable state of one fusion layer, by strategy.
#[derive(Debug, Clone, PartialEq)]
pub enum FusionParams {
    CrossAttention(AttentionParams),
    /// `[2d x d]` projection applied to channel-concatenated features.
    Concatenation { proj: Array2<f64> },
    /// `[d x d]` projection applied to the conditional modality.
    Summation { proj: Array2<f64> },
}

impl FusionParams {
    pub fn seeded(strategy: FusionStrategy, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match strategy {
            FusionStrategy::CrossAttention => {
                FusionParams::CrossAttention(AttentionParams::seeded(d, seed))
            }
            FusionStrategy::Concatenation => {
                FusionParams::Concatenation { proj: xavier(2 * d, d, &mut rng) }
            }
            FusionStrategy::Summation => {
                FusionParams::Summation { proj: xavier(d, d, &mut rng) }
            }
        }
    }

    pub fn strategy(&self) -> FusionStrategy {
        match self {
            FusionParams::CrossAttention(_) => FusionStrategy::CrossAttention,
            FusionParams::Concatenation { .. } => FusionStrategy::Concatenation,
            FusionParams::Summation { .. } => FusionStrategy::Summation,
        }
    }
}

pub fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

/// Tape handles for one attention layer's projections.
#[derive(Debug, Clone, Copy)]
pub struct AttentionTx {
    pub w_q: Tx,
    pub w_k: Tx,
    pub w_v: Tx,
}

/// Batched cross-modal attention on the tape: `query [B, T_q, d]`,
/// `kv [B, T_kv, d]` -> `[B, T_q, d]`, softmax over the key axis, scores
/// scaled by `1/sqrt(d)`.
pub fn cross_modal_attention_tape(t: &mut Tape, query: Tx, kv: Tx, p: AttentionTx) -> Tx {
    let (b, tq, d) = {
        let s = t.shape(query);
        (s[0], s[1], s[2])
    };
    let tkv = t.shape(kv)[1];
    let q2 = t.reshape(query, &[b * tq, d]);
    let k2 = t.reshape(kv, &[b * tkv, d]);
    let qp = t.matmul(q2, p.w_q);
    let kp = t.matmul(k2, p.w_k);
    let vp = t.matmul(k2, p.w_v);
    let q3 = t.reshape(qp, &[b, tq, d]);
    let k3 = t.reshape(kp, &[b, tkv, d]);
    let v3 = t.reshape(vp, &[b, tkv, d]);
    t.attention(q3, k3, v3, 1.0 / (d as f64).sqrt())
}

/// Single-head cross-modal attention `[T_q x d]` from time-major features.
pub fn cross_modal_attention(
    query_feat: &Array2<f64>,
    kv_feat: &Array2<f64>,
    params: &AttentionParams,
) -> Result<Array2<f64>> {
    let d = query_feat.ncols();
    if kv_feat.ncols() != d || params.w_q.nrows() != d {
        return invalid_arg(format!(
            "inner dimension mismatch: query d={d}, kv d={}, params d={}",
            kv_feat.ncols(),
            params.w_q.nrows()
        ));
    }
    if query_feat.nrows() == 0 || kv_feat.nrows() == 0 {
        return invalid_arg("attention inputs must be non-empty");
    }
    let mut t = Tape::new();
    let q = t.constant(query_feat.clone().insert_axis(ndarray::Axis(0)).into_dyn());
    let kv = t.constant(kv_feat.clone().insert_axis(ndarray::Axis(0)).into_dyn());
    let p = AttentionTx {
        w_q: t.constant(params.w_q.clone().into_dyn()),
        w_k: t.constant(params.w_k.clone().into_dyn()),
        w_v: t.constant(params.w_v.clone().into_dyn()),
    };
    let out = cross_modal_attention_tape(&mut t, q, kv, p);
    Ok(t.value(out)
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
        .index_axis(ndarray::Axis(0), 0)
        .to_owned())
}

/// Attention weights (row-stochastic over keys) for a single-head instance.
pub fn attention_weights(
    query_feat: &Array2<f64>,
    kv_feat: &Array2<f64>,
    params: &AttentionParams,
) -> Result<Array2<f64>> {
    let mut t = Tape::new();
    let q = t.constant(query_feat.clone().insert_axis(ndarray::Axis(0)).into_dyn());
    let kv = t.constant(kv_feat.clone().insert_axis(ndarray::Axis(0)).into_dyn());
    let p = AttentionTx {
        w_q: t.constant(params.w_q.clone().into_dyn()),
        w_k: t.constant(params.w_k.clone().into_dyn()),
        w_v: t.constant(params.w_v.clone().into_dyn()),
    };
    let out = cross_modal_attention_tape(&mut t, q, kv, p);
    Ok(t.attention_weights(out)
        .unwrap()
        .index_axis(ndarray::Axis(0), 0)
        .to_owned())
}

/// Tape handles for one fusion layer, by strategy.
#[derive(Debug, Clone, Copy)]
pub enum FusionTx {
    CrossAttention(AttentionTx),
    Concatenation { proj: Tx },
    Summation { proj: Tx },
}

/// Batched fusion on the tape. `query [B, T_q, d]` is the conditional
/// feature, `kv [B, T_kv, d]` the dominant one. Concatenation and summation
/// require `T_q == T_kv`; their output is `[B, T, d]` with channel order
/// `[dominant; conditional]` for concatenation and
/// `dominant + proj(conditional)` for summation.
pub fn fuse_tape(t: &mut Tape, query: Tx, kv: Tx, params: FusionTx) -> Result<Tx> {
    match params {
        FusionTx::CrossAttention(p) => Ok(cross_modal_attention_tape(t, query, kv, p)),
        FusionTx::Concatenation { proj } => {
            let (b, tq, d) = {
                let s = t.shape(query);
                (s[0], s[1], s[2])
            };
            if t.shape(kv)[1] != tq {
                return invalid_arg("concatenation requires time-aligned features");
            }
            let cat = t.concat(&[kv, query], 2);
            let cat2 = t.reshape(cat, &[b * tq, 2 * d]);
            let out = t.matmul(cat2, proj);
            Ok(t.reshape(out, &[b, tq, d]))
        }
        FusionTx::Summation { proj } => {
            let (b, tq, d) = {
                let s = t.shape(query);
                (s[0], s[1], s[2])
            };
            if t.shape(kv)[1] != tq {
                return invalid_arg("summation requires time-aligned features");
            }
            let q2 = t.reshape(query, &[b * tq, d]);
            let qp = t.matmul(q2, proj);
            let q3 = t.reshape(qp, &[b, tq, d]);
            Ok(t.add(kv, q3))
        }
    }
}

/// Fuse time-major audio and video features with the given strategy and
/// dominance configuration.
pub fn fuse(
    a_feat: &Array2<f64>,
    v_feat: &Array2<f64>,
    dominance: DominanceConfig,
    params: &FusionParams,
) -> Result<Array2<f64>> {
    let (query, kv) = match dominance.query {
        Modality::Audio => (a_feat, v_feat),
        Modality::Video => (v_feat, a_feat),
    };
    if query.ncols() != kv.ncols() {
        return invalid_arg("feature dimensions differ");
    }
    let mut t = Tape::new();
    let q = t.constant(query.clone().insert_axis(ndarray::Axis(0)).into_dyn());
    let k = t.constant(kv.clone().insert_axis(ndarray::Axis(0)).into_dyn());
    let ptx = match params {
        FusionParams::CrossAttention(p) => FusionTx::CrossAttention(AttentionTx {
            w_q: t.constant(p.w_q.clone().into_dyn()),
            w_k: t.constant(p.w_k.clone().into_dyn()),
            w_v: t.constant(p.w_v.clone().into_dyn()),
        }),
        FusionParams::Concatenation { proj } => {
            FusionTx::Concatenation { proj: t.constant(proj.clone().into_dyn()) }
        }
        FusionParams::Summation { proj } => {
            FusionTx::Summation { proj: t.constant(proj.clone().into_dyn()) }
        }
    };
    let out = fuse_tape(&mut t, q, k, ptx)?;
    Ok(t.value(out)
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
        .index_axis(ndarray::Axis(0), 0)
        .to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn dominance_config_rejects_same_modality() {
        assert!(DominanceConfig::new(Modality::Audio, Modality::Audio).is_err());
        assert!(DominanceConfig::new(Modality::Video, Modality::Audio).is_ok());
    }

    #[test]
    fn single_key_outputs_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 4;
        let params = AttentionParams::seeded(d, 3);
        let q = rand_mat(&mut rng, 5, d);
        let kv = rand_mat(&mut rng, 1, d);
        let out = cross_modal_attention(&q, &kv, &params).unwrap();
        let expect = kv.dot(&params.w_v);
        for r in 0..5 {
            for c in 0..d {
                assert!((out[[r, c]] - expect[[0, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weights_are_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let params = AttentionParams::seeded(6, 4);
        let q = rand_mat(&mut rng, 7, 6);
        let kv = rand_mat(&mut rng, 9, 6);
        let w = attention_weights(&q, &kv, &params).unwrap();
        assert_eq!(w.dim(), (7, 9));
        for row in w.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn output_length_equals_query_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let params = AttentionParams::seeded(3, 5);
        for (tq, tkv) in [(1usize, 1usize), (2, 9), (8, 3), (5, 5)] {
            let q = rand_mat(&mut rng, tq, 3);
            let kv = rand_mat(&mut rng, tkv, 3);
            let out = cross_modal_attention(&q, &kv, &params).unwrap();
            assert_eq!(out.dim(), (tq, 3));
        }
    }

    #[test]
    fn key_value_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let params = AttentionParams::seeded(4, 6);
        let q = rand_mat(&mut rng, 3, 4);
        let kv = rand_mat(&mut rng, 6, 4);
        let base = cross_modal_attention(&q, &kv, &params).unwrap();
        let perm = [4usize, 0, 5, 2, 1, 3];
        let mut kv_p = Array2::<f64>::zeros((6, 4));
        for (i, &p) in perm.iter().enumerate() {
            kv_p.row_mut(i).assign(&kv.row(p));
        }
        let permuted = cross_modal_attention(&q, &kv_p, &params).unwrap();
        let max_err = (&base - &permuted).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(max_err < 1e-10);
    }

    #[test]
    fn attention_gradcheck_3x4_5x4() {
        // d=4 instance with T_q=3, T_kv=5: gradients w.r.t. all three
        // projections and both inputs against central differences.
        let d = 4;
        let (tq, tkv) = (3usize, 5usize);
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let n_total = tq * d + tkv * d + 3 * d * d;
        let x0: Vec<f64> = (0..n_total).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let build = |t: &mut Tape, x: &[f64]| {
            let mut ofs = 0;
            let mut take = |n: usize| {
                let s = &x[ofs..ofs + n];
                ofs += n;
                s.to_vec()
            };
            let q = t.var(ArrayD::from_shape_vec(IxDyn(&[1, tq, d]), take(tq * d)).unwrap());
            let kv = t.var(ArrayD::from_shape_vec(IxDyn(&[1, tkv, d]), take(tkv * d)).unwrap());
            let w_q = t.var(ArrayD::from_shape_vec(IxDyn(&[d, d]), take(d * d)).unwrap());
            let w_k = t.var(ArrayD::from_shape_vec(IxDyn(&[d, d]), take(d * d)).unwrap());
            let w_v = t.var(ArrayD::from_shape_vec(IxDyn(&[d, d]), take(d * d)).unwrap());
            let out = cross_modal_attention_tape(t, q, kv, AttentionTx { w_q, w_k, w_v });
            let sq = t.mul(out, out);
            (vec![q, kv, w_q, w_k, w_v], t.sum_all(sq))
        };
        let mut t = Tape::new();
        let (vars, out) = build(&mut t, &x0);
        t.backward(out);
        let mut analytic = Vec::new();
        for v in &vars {
            analytic.extend(t.grad(*v).unwrap().iter().cloned());
        }
        let mut xp = x0.clone();
        for i in 0..x0.len() {
            let orig = xp[i];
            let eval = |xv: &[f64]| {
                let mut t = Tape::new();
                let (_, o) = build(&mut t, xv);
                *t.value(o).iter().next().unwrap()
            };
            xp[i] = orig + 1e-5;
            let fp = eval(&xp);
            xp[i] = orig - 1e-5;
            let fm = eval(&xp);
            xp[i] = orig;
            let numeric = (fp - fm) / 2e-5;
            let denom = analytic[i].abs().max(numeric.abs());
            if denom > 1e-8 {
                assert!(
                    (analytic[i] - numeric).abs() / denom < 1e-4,
                    "rel err too large at {i}: {} vs {}",
                    analytic[i],
                    numeric
                );
            }
        }
    }

    #[test]
    fn summation_zero_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let d = 5;
        let a = rand_mat(&mut rng, 8, d);
        let v = rand_mat(&mut rng, 8, d);
        let params = FusionParams::Summation { proj: Array2::zeros((d, d)) };
        // audio-dominant: video is the conditional (projected) side
        let out = fuse(&a, &v, DominanceConfig::audio_dominant(), &params).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn concatenation_restores_channel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let d = 6;
        let a = rand_mat(&mut rng, 4, d);
        let v = rand_mat(&mut rng, 4, d);
        let params = FusionParams::seeded(FusionStrategy::Concatenation, d, 9);
        let out = fuse(&a, &v, DominanceConfig::audio_dominant(), &params).unwrap();
        assert_eq!(out.dim(), (4, d));
    }

    #[test]
    fn concat_and_sum_reject_misaligned_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let a = rand_mat(&mut rng, 4, 3);
        let v = rand_mat(&mut rng, 5, 3);
        for strat in [FusionStrategy::Concatenation, FusionStrategy::Summation] {
            let params = FusionParams::seeded(strat, 3, 1);
            assert!(fuse(&a, &v, DominanceConfig::audio_dominant(), &params).is_err());
        }
        // cross-attention accepts any lengths
        let params = FusionParams::seeded(FusionStrategy::CrossAttention, 3, 1);
        assert!(fuse(&a, &v, DominanceConfig::audio_dominant(), &params).is_ok());
    }

    #[test]
    fn strategies_and_dominances_produce_distinct_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let d = 4;
        let a = rand_mat(&mut rng, 6, d);
        let v = rand_mat(&mut rng, 6, d);
        let mut outputs: Vec<Array2<f64>> = Vec::new();
        for strat in [
            FusionStrategy::CrossAttention,
            FusionStrategy::Concatenation,
            FusionStrategy::Summation,
        ] {
            for dom in [DominanceConfig::audio_dominant(), DominanceConfig::video_dominant()] {
                let params = FusionParams::seeded(strat, d, 11);
                outputs.push(fuse(&a, &v, dom, &params).unwrap());
            }
        }
        for i in 0..outputs.len() {
            for j in i + 1..outputs.len() {
                let diff = (&outputs[i] - &outputs[j])
                    .iter()
                    .map(|x| x.abs())
                    .fold(0.0, f64::max);
                assert!(diff > 1e-6, "outputs {i} and {j} coincide");
            }
        }
    }
}
