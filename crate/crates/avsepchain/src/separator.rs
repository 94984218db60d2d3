//! Speech perception stage: a 1-D convolutional encoder, half-stride
//! chunking, cross-modal fusion of chunked audio with aligned video
//! embeddings, dual-path transformer blocks (intra along chunk positions,
//! inter across chunks), a sigmoid mask over the encoded feature, and a
//! transposed-convolution decoder back to a waveform.

use crate::error::{invalid_arg, Result};
use crate::fusion::{
    xavier, AttentionTx, DominanceConfig, FusionStrategy, FusionTx, Modality,
};
use crate::params::{Binding, ParamStore};
use crate::signal::{ChunkedFeature, EmbeddingSeq, FeatureMap, Waveform, SAMPLE_RATE, VIDEO_FPS};
use crate::tensor::{chunk_layout, Tape, Tx};
use ndarray::{Array2, ArrayD, Ix3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SeparatorConfig {
    /// Encoder channels N_a.
    pub n_channels: usize,
    /// Chunk length K_X (even).
    pub chunk_len: usize,
    pub n_intra: usize,
    pub n_inter: usize,
    pub n_repeats: usize,
    pub encoder_kernel: usize,
    pub encoder_stride: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub fusion: FusionStrategy,
    pub dominance: DominanceConfig,
}

impl SeparatorConfig {
    /// Published configuration: 256 channels, chunk length 160, two repeats
    /// of 8 intra- and 7 inter-transformers.
    pub fn paper() -> Self {
        SeparatorConfig {
            n_channels: 256,
            chunk_len: 160,
            n_intra: 8,
            n_inter: 7,
            n_repeats: 2,
            encoder_kernel: 16,
            encoder_stride: 8,
            n_heads: 4,
            ff_dim: 1024,
            fusion: FusionStrategy::CrossAttention,
            dominance: DominanceConfig::audio_dominant(),
        }
    }

    /// Desk-scale configuration that trains in minutes on a small CPU. The
    /// longer encoder kernel/stride keeps the feature sequence short and
    /// suits quasi-stationary harmonic material.
    pub fn toy() -> Self {
        SeparatorConfig {
            n_channels: 64,
            chunk_len: 40,
            n_intra: 2,
            n_inter: 2,
            n_repeats: 1,
            encoder_kernel: 128,
            encoder_stride: 64,
            n_heads: 4,
            ff_dim: 256,
            fusion: FusionStrategy::CrossAttention,
            dominance: DominanceConfig::audio_dominant(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0
            || self.chunk_len == 0
            || self.n_intra == 0
            || self.n_inter == 0
            || self.n_repeats == 0
            || self.encoder_kernel == 0
            || self.encoder_stride == 0
            || self.n_heads == 0
            || self.ff_dim == 0
        {
            return invalid_arg("separator config fields must be positive");
        }
        if self.chunk_len % 2 != 0 {
            return invalid_arg("chunk_len must be even");
        }
        if self.encoder_stride > self.encoder_kernel {
            return invalid_arg("encoder stride must not exceed kernel");
        }
        if self.n_channels % self.n_heads != 0 {
            return invalid_arg("n_channels must be divisible by n_heads");
        }
        Ok(())
    }

    pub fn feature_len(&self, samples: usize) -> Result<usize> {
        if samples < self.encoder_kernel {
            return invalid_arg(format!(
                "input of {samples} samples shorter than encoder kernel {}",
                self.encoder_kernel
            ));
        }
        Ok((samples - self.encoder_kernel) / self.encoder_stride + 1)
    }
}

/// Parameter indices of one transformer encoder layer.
#[derive(Debug, Clone)]
pub struct BlockRef {
    w_q: usize,
    b_q: usize,
    w_k: usize,
    b_k: usize,
    w_v: usize,
    b_v: usize,
    w_o: usize,
    b_o: usize,
    ln1_g: usize,
    ln1_b: usize,
    ff1_w: usize,
    ff1_b: usize,
    ff2_w: usize,
    ff2_b: usize,
    ln2_g: usize,
    ln2_b: usize,
}

#[derive(Debug, Clone)]
pub enum FusionRef {
    CrossAttention { w_q: usize, w_k: usize, w_v: usize },
    Concatenation { proj: usize },
    Summation { proj: usize },
}

impl FusionRef {
    pub(crate) fn bind(&self, b: &Binding) -> FusionTx {
        match self {
            FusionRef::CrossAttention { w_q, w_k, w_v } => FusionTx::CrossAttention(AttentionTx {
                w_q: b.get(*w_q),
                w_k: b.get(*w_k),
                w_v: b.get(*w_v),
            }),
            FusionRef::Concatenation { proj } => FusionTx::Concatenation { proj: b.get(*proj) },
            FusionRef::Summation { proj } => FusionTx::Summation { proj: b.get(*proj) },
        }
    }
}

fn register_fusion(
    store: &mut ParamStore,
    prefix: &str,
    strategy: FusionStrategy,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> FusionRef {
    match strategy {
        FusionStrategy::CrossAttention => FusionRef::CrossAttention {
            w_q: store.add(format!("{prefix}.fusion.w_q"), xavier(d, d, rng).into_dyn()),
            w_k: store.add(format!("{prefix}.fusion.w_k"), xavier(d, d, rng).into_dyn()),
            w_v: store.add(format!("{prefix}.fusion.w_v"), xavier(d, d, rng).into_dyn()),
        },
        FusionStrategy::Concatenation => FusionRef::Concatenation {
            proj: store.add(format!("{prefix}.fusion.concat_proj"), xavier(2 * d, d, rng).into_dyn()),
        },
        FusionStrategy::Summation => FusionRef::Summation {
            proj: store.add(format!("{prefix}.fusion.sum_proj"), xavier(d, d, rng).into_dyn()),
        },
    }
}

fn add_linear(
    store: &mut ParamStore,
    prefix: &str,
    name: &str,
    r: usize,
    c: usize,
    rng: &mut ChaCha8Rng,
) -> usize {
    store.add(format!("{prefix}.{name}"), xavier(r, c, rng).into_dyn())
}

fn register_block(store: &mut ParamStore, prefix: &str, d: usize, ff: usize, rng: &mut ChaCha8Rng) -> BlockRef {
    let w_q = add_linear(store, prefix, "attn.w_q", d, d, rng);
    let b_q = store.add(format!("{prefix}.attn.b_q"), ArrayD::zeros(ndarray::IxDyn(&[d])));
    let w_k = add_linear(store, prefix, "attn.w_k", d, d, rng);
    let b_k = store.add(format!("{prefix}.attn.b_k"), ArrayD::zeros(ndarray::IxDyn(&[d])));
    let w_v = add_linear(store, prefix, "attn.w_v", d, d, rng);
    let b_v = store.add(format!("{prefix}.attn.b_v"), ArrayD::zeros(ndarray::IxDyn(&[d])));
    let w_o = add_linear(store, prefix, "attn.w_o", d, d, rng);
    let b_o = store.add(format!("{prefix}.attn.b_o"), ArrayD::zeros(ndarray::IxDyn(&[d])));
    let ln1_g = store.add(format!("{prefix}.ln1.gamma"), ArrayD::ones(ndarray::IxDyn(&[d])));
    let ln1_b = store.add(format!("{prefix}.ln1.beta"), ArrayD::zeros(ndarray::IxDyn(&[d])));
    let ff1_w = add_linear(store, prefix, "ff1.w", d, ff, rng);
    let ff1_b = store.add(format!("{prefix}.ff1.b"), ArrayD::zeros(ndarray::IxDyn(&[ff])));
    let ff2_w = add_linear(store, prefix, "ff2.w", ff, d, rng);
    let ff2_b = store.add(format!("{prefix}.ff2.b"), ArrayD::zeros(ndarray::IxDyn(&[d])));
    let ln2_g = store.add(format!("{prefix}.ln2.gamma"), ArrayD::ones(ndarray::IxDyn(&[d])));
    let ln2_b = store.add(format!("{prefix}.ln2.beta"), ArrayD::zeros(ndarray::IxDyn(&[d])));
    BlockRef {
        w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o,
        ln1_g, ln1_b, ff1_w, ff1_b, ff2_w, ff2_b, ln2_g, ln2_b,
    }
}

/// Sinusoidal positional encoding `[len x d]`.
pub fn sinusoidal_pe(len: usize, d: usize) -> Array2<f64> {
    let mut pe = Array2::<f64>::zeros((len, d));
    for pos in 0..len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10_000f64.powf(exponent);
            pe[[pos, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

fn linear(t: &mut Tape, x: Tx, b: &Binding, w: usize, bias: usize) -> Tx {
    let y = t.matmul(x, b.get(w));
    t.add(y, b.get(bias))
}

/// One post-norm transformer encoder layer over `[B, T, N]` with sinusoidal
/// positions added at the input.
fn transformer_layer(t: &mut Tape, x: Tx, blk: &BlockRef, b: &Binding, heads: usize) -> Tx {
    let (bb, tt, n) = {
        let s = t.shape(x);
        (s[0], s[1], s[2])
    };
    let dh = n / heads;
    let pe = t.constant(sinusoidal_pe(tt, n).into_dyn());
    let x = t.add(x, pe);
    let x2 = t.reshape(x, &[bb * tt, n]);
    let q = linear(t, x2, b, blk.w_q, blk.b_q);
    let k = linear(t, x2, b, blk.w_k, blk.b_k);
    let v = linear(t, x2, b, blk.w_v, blk.b_v);
    let split = |t: &mut Tape, m: Tx| {
        let m4 = t.reshape(m, &[bb, tt, heads, dh]);
        let mp = t.permute(m4, &[0, 2, 1, 3]);
        t.reshape(mp, &[bb * heads, tt, dh])
    };
    let qh = split(t, q);
    let kh = split(t, k);
    let vh = split(t, v);
    let att = t.attention(qh, kh, vh, 1.0 / (dh as f64).sqrt());
    let a4 = t.reshape(att, &[bb, heads, tt, dh]);
    let ap = t.permute(a4, &[0, 2, 1, 3]);
    let a2 = t.reshape(ap, &[bb * tt, n]);
    let o = linear(t, a2, b, blk.w_o, blk.b_o);
    let o3 = t.reshape(o, &[bb, tt, n]);
    let res = t.add(x, o3);
    let y = t.layer_norm(res, b.get(blk.ln1_g), b.get(blk.ln1_b), 1e-5);
    let y2 = t.reshape(y, &[bb * tt, n]);
    let h1 = linear(t, y2, b, blk.ff1_w, blk.ff1_b);
    let h1r = t.relu(h1);
    let h2 = linear(t, h1r, b, blk.ff2_w, blk.ff2_b);
    let h3 = t.reshape(h2, &[bb, tt, n]);
    let res2 = t.add(y, h3);
    t.layer_norm(res2, b.get(blk.ln2_g), b.get(blk.ln2_b), 1e-5)
}

/// Endpoint-preserving linear interpolation matrix `[target x src]`,
/// matching `signal::resample_embedding`.
pub fn interp_matrix(src: usize, target: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((target, src));
    for j in 0..target {
        let pos = if target == 1 {
            0.0
        } else {
            j as f64 * (src - 1) as f64 / (target - 1) as f64
        };
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(src - 1);
        let frac = pos - i0 as f64;
        m[[j, i0]] += 1.0 - frac;
        m[[j, i1]] += frac;
    }
    m
}

/// Separator model: parameter references plus configuration. All learnable
/// state lives in the [`ParamStore`].
#[derive(Debug, Clone)]
pub struct SeparatorModel {
    pub config: SeparatorConfig,
    pub video_dim: usize,
    enc_w: usize,
    dec_w: usize,
    video_proj: usize,
    fusion: FusionRef,
    /// Blocks in execution order: per repeat, intra layers then inter layers.
    blocks: Vec<(BlockKind, BlockRef)>,
    mask_w: usize,
    mask_b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Intra,
    Inter,
}

impl SeparatorModel {
    pub fn new(
        config: SeparatorConfig,
        video_dim: usize,
        seed: u64,
        store: &mut ParamStore,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e9a_1a70);
        let n = config.n_channels;
        let enc_w = store.add(
            "separator.encoder.w",
            xavier(n, config.encoder_kernel, &mut rng)
                .into_shape_with_order((n, 1, config.encoder_kernel))
                .unwrap()
                .into_dyn(),
        );
        let video_proj = store.add(
            "separator.video_proj.w",
            xavier(video_dim, n, &mut rng).into_dyn(),
        );
        let fusion = register_fusion(store, "separator", config.fusion, n, &mut rng);
        let mut blocks = Vec::new();
        for r in 0..config.n_repeats {
            for i in 0..config.n_intra {
                let prefix = format!("separator.repeat{r}.intra{i}");
                blocks.push((BlockKind::Intra, register_block(store, &prefix, n, config.ff_dim, &mut rng)));
            }
            for i in 0..config.n_inter {
                let prefix = format!("separator.repeat{r}.inter{i}");
                blocks.push((BlockKind::Inter, register_block(store, &prefix, n, config.ff_dim, &mut rng)));
            }
        }
        let mask_w = store.add("separator.mask.w", xavier(n, n, &mut rng).into_dyn());
        let mask_b = store.add("separator.mask.b", ArrayD::zeros(ndarray::IxDyn(&[n])));
        let dec_w = store.add(
            "separator.decoder.w",
            xavier(n, config.encoder_kernel, &mut rng)
                .into_shape_with_order((n, 1, config.encoder_kernel))
                .unwrap()
                .into_dyn(),
        );
        Ok(SeparatorModel {
            config,
            video_dim,
            enc_w,
            dec_w,
            video_proj,
            fusion,
            blocks,
            mask_w,
            mask_b,
        })
    }

    pub fn param_indices(&self) -> (usize, usize) {
        (self.enc_w, self.dec_w)
    }

    pub fn mask_indices(&self) -> (usize, usize) {
        (self.mask_w, self.mask_b)
    }

    /// Encoded feature on the tape: `[N, T_X]`, rectified, bias-free.
    pub fn encode_tape(&self, t: &mut Tape, b: &Binding, x: Tx) -> Tx {
        let len = t.shape(x)[0];
        let x2 = t.reshape(x, &[1, len]);
        let enc = t.conv1d(x2, b.get(self.enc_w), None, self.config.encoder_stride, 0);
        t.relu(enc)
    }

    /// Aligned video feature on the tape: `[S, K, N]` (batch-major chunks),
    /// from a time-major constant video embedding `[T_v, D_v]`.
    fn align_video_tape(&self, t: &mut Tape, b: &Binding, f_v: &Array2<f64>, s: usize) -> Tx {
        let k = self.config.chunk_len;
        let n = self.config.n_channels;
        let fv = t.constant(f_v.clone().into_dyn());
        let vp = t.matmul(fv, b.get(self.video_proj));
        let r = t.constant(interp_matrix(f_v.nrows(), s).into_dyn());
        let vs = t.matmul(r, vp);
        let v1 = t.reshape(vs, &[s, 1, n]);
        let zeros = t.constant(ArrayD::zeros(ndarray::IxDyn(&[s, k, n])));
        t.add(zeros, v1)
    }

    /// Full separation pipeline on the tape; returns `s_pre` of the input
    /// length. `f_v` is time-major `[T_v, D_v]`.
    pub fn separate_tape(&self, t: &mut Tape, b: &Binding, x: Tx, f_v: &Array2<f64>) -> Result<Tx> {
        let t_a = t.shape(x)[0];
        let feat = self.encode_tape(t, b, x);
        let t_x = t.shape(feat)[1];
        let k = self.config.chunk_len;
        let (s, _) = chunk_layout(t_x, k);
        let x_c = t.chunk_op(feat, k); // [N, K, S]
        let audio_b = t.permute(x_c, &[2, 1, 0]); // [S, K, N]
        let video_b = self.align_video_tape(t, b, f_v, s);
        let (query, kv) = match self.config.dominance.query {
            Modality::Audio => (audio_b, video_b),
            Modality::Video => (video_b, audio_b),
        };
        let fused = crate::fusion::fuse_tape(t, query, kv, self.fusion.bind(b))?;
        let mut h = fused;
        for (kind, blk) in &self.blocks {
            match kind {
                BlockKind::Intra => {
                    h = transformer_layer(t, h, blk, b, self.config.n_heads);
                }
                BlockKind::Inter => {
                    let hp = t.permute(h, &[1, 0, 2]); // [K, S, N]
                    let ho = transformer_layer(t, hp, blk, b, self.config.n_heads);
                    h = t.permute(ho, &[1, 0, 2]);
                }
            }
        }
        let n = self.config.n_channels;
        let h2 = t.reshape(h, &[s * k, n]);
        let m = linear(t, h2, b, self.mask_w, self.mask_b);
        let sig = t.sigmoid(m);
        let m3 = t.reshape(sig, &[s, k, n]);
        let mask = t.permute(m3, &[2, 1, 0]); // [N, K, S]
        let masked = t.mul(mask, x_c);
        let unchunked = t.unchunk_op(masked, t_x);
        let dec = t.conv_transpose1d(unchunked, b.get(self.dec_w), self.config.encoder_stride);
        let t_dec = t.shape(dec)[1];
        let flat = t.reshape(dec, &[t_dec]);
        let out = if t_dec > t_a {
            t.narrow(flat, 0, 0, t_a)
        } else if t_dec < t_a {
            let pad = t.constant(ArrayD::zeros(ndarray::IxDyn(&[t_a - t_dec])));
            t.concat(&[flat, pad], 0)
        } else {
            flat
        };
        Ok(out)
    }

    /// Strided rectified 1-D convolution of the waveform.
    pub fn encode(&self, store: &ParamStore, x: &Waveform) -> Result<FeatureMap> {
        self.config.feature_len(x.len())?;
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let xt = t.constant(x.samples.clone().into_dyn());
        let out = self.encode_tape(&mut t, &b, xt);
        FeatureMap::new(
            t.value(out)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned(),
        )
    }

    /// Project video channels to N_a, resample frames to `s_x`, replicate
    /// across the intra-chunk axis: `[N_a x K_X x S_X]`.
    pub fn align_video(
        &self,
        store: &ParamStore,
        f_v: &EmbeddingSeq,
        s_x: usize,
        k_x: usize,
    ) -> Result<ChunkedFeature> {
        if f_v.frames() == 0 {
            return invalid_arg("empty video embedding");
        }
        if k_x != self.config.chunk_len {
            return invalid_arg("k_x must match the configured chunk length");
        }
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let aligned = self.align_video_tape(&mut t, &b, &f_v.data.t().to_owned(), s_x);
        let v = t
            .value(aligned)
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap()
            .permuted_axes([2, 1, 0])
            .to_owned();
        Ok(ChunkedFeature { data: v, original_time: s_x })
    }

    /// Tape twin of [`SeparatorModel::dual_path_block`] over a batched
    /// `[S, K, N]` tensor.
    pub fn dual_path_block_tape(
        &self,
        t: &mut Tape,
        b: &Binding,
        x: Tx,
        kind: BlockKind,
        index: usize,
    ) -> Result<Tx> {
        let blk = self
            .blocks
            .iter()
            .filter(|(k, _)| *k == kind)
            .nth(index)
            .ok_or_else(|| {
                crate::error::Error::InvalidArgument(format!("no block {index} of {kind:?}"))
            })?;
        Ok(match kind {
            BlockKind::Intra => transformer_layer(t, x, &blk.1, b, self.config.n_heads),
            BlockKind::Inter => {
                let xp = t.permute(x, &[1, 0, 2]);
                let yo = transformer_layer(t, xp, &blk.1, b, self.config.n_heads);
                t.permute(yo, &[1, 0, 2])
            }
        })
    }

    /// Apply one dual-path transformer layer to a chunked feature.
    pub fn dual_path_block(
        &self,
        store: &ParamStore,
        cf: &ChunkedFeature,
        kind: BlockKind,
        index: usize,
    ) -> Result<ChunkedFeature> {
        let blk = self
            .blocks
            .iter()
            .filter(|(k, _)| *k == kind)
            .nth(index)
            .ok_or_else(|| {
                crate::error::Error::InvalidArgument(format!("no block {index} of {kind:?}"))
            })?;
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let x = t.constant(cf.data.clone().permuted_axes([2, 1, 0]).to_owned().into_dyn());
        let y = match kind {
            BlockKind::Intra => transformer_layer(&mut t, x, &blk.1, &b, self.config.n_heads),
            BlockKind::Inter => {
                let xp = t.permute(x, &[1, 0, 2]);
                let yo = transformer_layer(&mut t, xp, &blk.1, &b, self.config.n_heads);
                t.permute(yo, &[1, 0, 2])
            }
        };
        let out = t
            .value(y)
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap()
            .permuted_axes([2, 1, 0])
            .to_owned();
        Ok(ChunkedFeature { data: out, original_time: cf.original_time })
    }

    /// Extract the target speaker's waveform estimate.
    pub fn separate(&self, store: &ParamStore, x: &Waveform, f_v: &EmbeddingSeq) -> Result<Waveform> {
        check_duration(x, f_v)?;
        self.config.feature_len(x.len())?;
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let xt = t.constant(x.samples.clone().into_dyn());
        let s_pre = self.separate_tape(&mut t, &b, xt, &f_v.data.t().to_owned())?;
        Waveform::new(
            t.value(s_pre)
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
                .to_owned(),
            SAMPLE_RATE,
        )
    }

    /// Sigmoid mask over the encoded feature, `[N, K, S]`.
    pub fn mask(&self, store: &ParamStore, x: &Waveform, f_v: &EmbeddingSeq) -> Result<ChunkedFeature> {
        check_duration(x, f_v)?;
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let xt = t.constant(x.samples.clone().into_dyn());
        let feat = self.encode_tape(&mut t, &b, xt);
        let t_x = t.shape(feat)[1];
        let k = self.config.chunk_len;
        let (s, _) = chunk_layout(t_x, k);
        let x_c = t.chunk_op(feat, k);
        let audio_b = t.permute(x_c, &[2, 1, 0]);
        let video_b = self.align_video_tape(&mut t, &b, &f_v.data.t().to_owned(), s);
        let (query, kv) = match self.config.dominance.query {
            Modality::Audio => (audio_b, video_b),
            Modality::Video => (video_b, audio_b),
        };
        let fused = crate::fusion::fuse_tape(&mut t, query, kv, self.fusion.bind(&b))?;
        let mut h = fused;
        for (kind, blk) in &self.blocks {
            match kind {
                BlockKind::Intra => h = transformer_layer(&mut t, h, blk, &b, self.config.n_heads),
                BlockKind::Inter => {
                    let hp = t.permute(h, &[1, 0, 2]);
                    let ho = transformer_layer(&mut t, hp, blk, &b, self.config.n_heads);
                    h = t.permute(ho, &[1, 0, 2]);
                }
            }
        }
        let n = self.config.n_channels;
        let h2 = t.reshape(h, &[s * k, n]);
        let m = linear(&mut t, h2, &b, self.mask_w, self.mask_b);
        let sig = t.sigmoid(m);
        let m3 = t.reshape(sig, &[s, k, n]);
        let mask = t.permute(m3, &[2, 1, 0]);
        Ok(ChunkedFeature {
            data: t.value(mask).view().into_dimensionality::<Ix3>().unwrap().to_owned(),
            original_time: t_x,
        })
    }
}

/// Mixture and video must cover the same utterance within one video frame.
pub fn check_duration(x: &Waveform, f_v: &EmbeddingSeq) -> Result<()> {
    let audio_s = x.len() as f64 / SAMPLE_RATE as f64;
    let video_s = f_v.frames() as f64 / f_v.frame_rate;
    if (audio_s - video_s).abs() > 1.0 / VIDEO_FPS + 1e-9 {
        return invalid_arg(format!(
            "duration mismatch: audio {audio_s:.3} s vs video {video_s:.3} s"
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Axis};

    fn tiny_config() -> SeparatorConfig {
        SeparatorConfig {
            n_channels: 8,
            chunk_len: 4,
            n_intra: 1,
            n_inter: 1,
            n_repeats: 1,
            encoder_kernel: 8,
            encoder_stride: 4,
            n_heads: 2,
            ff_dim: 16,
            fusion: FusionStrategy::CrossAttention,
            dominance: DominanceConfig::audio_dominant(),
        }
    }

    fn rand_wave(rng: &mut ChaCha8Rng, n: usize) -> Waveform {
        Waveform::new(Array1::from_shape_fn(n, |_| rng.gen_range(-0.5..0.5)), SAMPLE_RATE).unwrap()
    }

    fn rand_video(rng: &mut ChaCha8Rng, dim: usize, frames: usize) -> EmbeddingSeq {
        EmbeddingSeq::new(
            Array2::from_shape_fn((dim, frames), |_| rng.gen_range(-1.0..1.0)),
            VIDEO_FPS,
        )
        .unwrap()
    }

    #[test]
    fn encode_length_formula() {
        let mut store = ParamStore::new();
        let mut cfg = SeparatorConfig::toy();
        cfg.encoder_kernel = 16;
        cfg.encoder_stride = 8;
        let model = SeparatorModel::new(cfg, 16, 1, &mut store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = rand_wave(&mut rng, 32_000);
        let f = model.encode(&store, &x).unwrap();
        assert_eq!(f.data.dim(), (64, 3999));
    }

    #[test]
    fn encode_zero_is_zero() {
        let mut store = ParamStore::new();
        let model = SeparatorModel::new(tiny_config(), 6, 2, &mut store).unwrap();
        let x = Waveform::new(Array1::zeros(64), SAMPLE_RATE).unwrap();
        let f = model.encode(&store, &x).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_shift_covariance() {
        let mut store = ParamStore::new();
        let model = SeparatorModel::new(tiny_config(), 6, 3, &mut store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let x = rand_wave(&mut rng, 200);
        let stride = model.config.encoder_stride;
        let mut shifted = Array1::zeros(200);
        for i in stride..200 {
            shifted[i] = x.samples[i - stride];
        }
        let a = model.encode(&store, &x).unwrap();
        let b = model
            .encode(&store, &Waveform::new(shifted, SAMPLE_RATE).unwrap())
            .unwrap();
        // interior frames shift by exactly one
        for t in 0..a.time() - 1 {
            for c in 0..a.channels() {
                assert!(
                    (b.data[[c, t + 1]] - a.data[[c, t]]).abs() < 1e-10,
                    "c={c} t={t}"
                );
            }
        }
    }

    #[test]
    fn encode_rejects_short_input() {
        let mut store = ParamStore::new();
        let model = SeparatorModel::new(tiny_config(), 6, 4, &mut store).unwrap();
        let x = Waveform::new(Array1::ones(4), SAMPLE_RATE).unwrap();
        assert!(model.encode(&store, &x).is_err());
    }

    #[test]
    fn align_video_shape_and_replication() {
        let mut store = ParamStore::new();
        let model = SeparatorModel::new(tiny_config(), 6, 5, &mut store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let f_v = rand_video(&mut rng, 6, 5);
        let cf = model.align_video(&store, &f_v, 7, 4).unwrap();
        assert_eq!(cf.data.dim(), (8, 4, 7));
        // replication: intra-chunk slices identical per chunk
        for s in 0..7 {
            for k in 1..4 {
                for c in 0..8 {
                    assert_eq!(cf.data[[c, k, s]], cf.data[[c, 0, s]]);
                }
            }
        }
        // constant input stays constant
        let const_v = EmbeddingSeq::new(Array2::ones((6, 5)) * 0.7, VIDEO_FPS).unwrap();
        let cc = model.align_video(&store, &const_v, 3, 4).unwrap();
        let first = cc.data[[0, 0, 0]];
        for s in 0..3 {
            assert!((cc.data[[0, 0, s]] - first).abs() < 1e-12);
        }
    }

    #[test]
    fn dual_path_block_preserves_shape() {
        let mut store = ParamStore::new();
        let model = SeparatorModel::new(tiny_config(), 6, 6, &mut store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let cf = ChunkedFeature {
            data: ndarray::Array3::from_shape_fn((8, 4, 5), |_| rng.gen_range(-1.0..1.0)),
            original_time: 12,
        };
        for kind in [BlockKind::Intra, BlockKind::Inter] {
            let out = model.dual_path_block(&store, &cf, kind, 0).unwrap();
            assert_eq!(out.data.dim(), cf.data.dim());
        }
    }

    #[test]
    fn intra_block_with_single_chunk_is_plain_transformer() {
        let mut store = ParamStore::new();
        let model = SeparatorModel::new(tiny_config(), 6, 7, &mut store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let cf = ChunkedFeature {
            data: ndarray::Array3::from_shape_fn((8, 4, 1), |_| rng.gen_range(-1.0..1.0)),
            original_time: 4,
        };
        let via_block = model.dual_path_block(&store, &cf, BlockKind::Intra, 0).unwrap();
        // reference: run the same layer on the single [K, N] sequence
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let seq = cf.data.index_axis(Axis(2), 0).t().to_owned(); // [K, N]
        let x = t.constant(seq.insert_axis(Axis(0)).into_dyn());
        let blk = model
            .blocks
            .iter()
            .find(|(k, _)| *k == BlockKind::Intra)
            .unwrap();
        let y = transformer_layer(&mut t, x, &blk.1, &b, model.config.n_heads);
        let yv = t.value(y).view().into_dimensionality::<Ix3>().unwrap().to_owned();
        for k in 0..4 {
            for c in 0..8 {
                assert!((via_block.data[[c, k, 0]] - yv[[0, k, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dual_path_block_gradcheck() {
        // tiny dims: all block parameters and the input against central FD
        let cfg = SeparatorConfig {
            n_channels: 4,
            chunk_len: 4,
            n_intra: 1,
            n_inter: 1,
            n_repeats: 1,
            encoder_kernel: 4,
            encoder_stride: 2,
            n_heads: 2,
            ff_dim: 6,
            fusion: FusionStrategy::CrossAttention,
            dominance: DominanceConfig::audio_dominant(),
        };
        let mut store = ParamStore::new();
        let model = SeparatorModel::new(cfg, 3, 8, &mut store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let x0 = ndarray::Array3::from_shape_fn((2, 3, 4), |_| rng.gen_range(-1.0..1.0));
        let blk_idx: Vec<usize> = {
            let blk = &model.blocks[0].1;
            vec![
                blk.w_q, blk.b_q, blk.w_k, blk.b_k, blk.w_v, blk.b_v, blk.w_o, blk.b_o,
                blk.ln1_g, blk.ln1_b, blk.ff1_w, blk.ff1_b, blk.ff2_w, blk.ff2_b, blk.ln2_g,
                blk.ln2_b,
            ]
        };
        let eval = |store: &ParamStore, x: &ndarray::Array3<f64>| -> (f64, Option<(Vec<ArrayD<f64>>, ArrayD<f64>)>) {
            let mut t = Tape::new();
            let b = store.bind(&mut t);
            let xt = t.var(x.clone().into_dyn());
            let blk = &model.blocks[0].1;
            let y = transformer_layer(&mut t, xt, blk, &b, 2);
            let sq = t.mul(y, y);
            let loss = t.sum_all(sq);
            let v = *t.value(loss).iter().next().unwrap();
            t.backward(loss);
            let grads = blk_idx
                .iter()
                .map(|&i| {
                    t.grad(b.get(i))
                        .cloned()
                        .unwrap_or_else(|| ArrayD::zeros(store.value(i).raw_dim()))
                })
                .collect();
            let gx = t.grad(xt).unwrap().clone();
            (v, Some((grads, gx)))
        };
        let (_, some) = eval(&store, &x0);
        let (analytic_params, analytic_x) = some.unwrap();
        // FD over parameters
        let h = 1e-5;
        for (pi, &idx) in blk_idx.iter().enumerate() {
            let n = store.value(idx).len();
            for e in 0..n {
                let mut sp = store.clone();
                sp.value_mut(idx).as_slice_mut().unwrap()[e] += h;
                let (fp, _) = eval(&sp, &x0);
                let mut sm = store.clone();
                sm.value_mut(idx).as_slice_mut().unwrap()[e] -= h;
                let (fm, _) = eval(&sm, &x0);
                let numeric = (fp - fm) / (2.0 * h);
                let analytic = analytic_params[pi].as_slice().unwrap()[e];
                let denom = analytic.abs().max(numeric.abs());
                // 1e-8 absolute floor: below it central differences are
                // dominated by roundoff at this step size
                assert!(
                    (analytic - numeric).abs() < (1e-4 * denom).max(1e-8),
                    "param {} elem {e}: {analytic} vs {numeric}",
                    store.name(idx)
                );
            }
        }
        // FD over the input
        let xs = x0.as_slice().unwrap().to_vec();
        for e in 0..xs.len() {
            let mut xp = x0.clone();
            xp.as_slice_mut().unwrap()[e] += h;
            let (fp, _) = eval(&store, &xp);
            let mut xm = x0.clone();
            xm.as_slice_mut().unwrap()[e] -= h;
            let (fm, _) = eval(&store, &xm);
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = analytic_x.as_slice().unwrap()[e];
            let denom: f64 = analytic.abs().max(numeric.abs());
            assert!(
                (analytic - numeric).abs() < (1e-4 * denom).max(1e-8),
                "input elem {e}: {analytic} vs {numeric}"
            );
        }
    }

    #[test]
    fn separate_output_length_and_mask_range() {
        let mut store = ParamStore::new();
        let model = SeparatorModel::new(tiny_config(), 6, 9, &mut store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        // 0.2 s => 3200 samples, 5 video frames
        let x = rand_wave(&mut rng, 3200);
        let f_v = rand_video(&mut rng, 6, 5);
        let out = model.separate(&store, &x, &f_v).unwrap();
        assert_eq!(out.len(), x.len());
        let mask = model.mask(&store, &x, &f_v).unwrap();
        assert!(mask.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // deterministic
        let out2 = model.separate(&store, &x, &f_v).unwrap();
        assert_eq!(out.samples, out2.samples);
    }

    #[test]
    fn separate_rejects_duration_mismatch() {
        let mut store = ParamStore::new();
        let model = SeparatorModel::new(tiny_config(), 6, 10, &mut store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let x = rand_wave(&mut rng, 3200);
        let f_v = rand_video(&mut rng, 6, 25); // 1 s of video vs 0.2 s audio
        assert!(model.separate(&store, &x, &f_v).is_err());
    }

    #[test]
    fn default_dominance_is_video_query_audio_kv() {
        let cfg = SeparatorConfig::toy();
        assert_eq!(cfg.dominance.query, Modality::Video);
        assert_eq!(cfg.dominance.kv, Modality::Audio);
        let paper = SeparatorConfig::paper();
        assert_eq!(paper.dominance, DominanceConfig::audio_dominant());
    }

    #[test]
    fn masked_identity_reconstruction() {
        // encoder rows hold an orthonormal basis and its negation; the
        // decoder applies the transpose; a saturated mask leaves the
        // encoded feature untouched, so the pipeline reproduces the input.
        let cfg = SeparatorConfig {
            n_channels: 8,
            chunk_len: 4,
            n_intra: 1,
            n_inter: 1,
            n_repeats: 1,
            encoder_kernel: 4,
            encoder_stride: 4,
            n_heads: 2,
            ff_dim: 8,
            fusion: FusionStrategy::CrossAttention,
            dominance: DominanceConfig::audio_dominant(),
        };
        let mut store = ParamStore::new();
        let model = SeparatorModel::new(cfg, 4, 11, &mut store).unwrap();
        // orthonormal DCT-II basis, 4x4
        let mut basis = Array2::<f64>::zeros((4, 4));
        for k in 0..4 {
            for n in 0..4 {
                let scale = if k == 0 { (1.0f64 / 4.0).sqrt() } else { (2.0f64 / 4.0).sqrt() };
                basis[[k, n]] =
                    scale * (std::f64::consts::PI * (n as f64 + 0.5) * k as f64 / 4.0).cos();
            }
        }
        let mut enc = ndarray::Array3::<f64>::zeros((8, 1, 4));
        let mut dec = ndarray::Array3::<f64>::zeros((8, 1, 4));
        for k in 0..4 {
            for n in 0..4 {
                enc[[k, 0, n]] = basis[[k, n]];
                enc[[k + 4, 0, n]] = -basis[[k, n]];
                dec[[k, 0, n]] = basis[[k, n]];
                dec[[k + 4, 0, n]] = -basis[[k, n]];
            }
        }
        store.set_by_name("separator.encoder.w", enc.into_dyn()).unwrap();
        store.set_by_name("separator.decoder.w", dec.into_dyn()).unwrap();
        store
            .set_by_name("separator.mask.w", ArrayD::zeros(ndarray::IxDyn(&[8, 8])))
            .unwrap();
        store
            .set_by_name(
                "separator.mask.b",
                ArrayD::from_elem(ndarray::IxDyn(&[8]), 40.0),
            )
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let x = rand_wave(&mut rng, 640); // 25 video frames worth: 0.04 s
        let f_v = rand_video(&mut rng, 4, 1);
        let out = model.separate(&store, &x, &f_v).unwrap();
        let max_err = (&out.samples - &x.samples)
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-6, "reconstruction error {max_err}");
    }
}
