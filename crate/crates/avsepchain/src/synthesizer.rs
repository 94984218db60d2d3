//! Speech production stage: the mel spectrogram of the preliminary estimate
//! and upsampled lip embeddings are projected to a shared width, fused with
//! audio as the query and video as key/value, passed through three 1-D
//! convolutions, and folded into a residual waveform that is added to the
//! preliminary estimate.

use crate::error::{invalid_arg, Result};
use crate::fusion::{xavier, DominanceConfig, FusionStrategy, Modality};
use crate::params::{Binding, ParamStore};
use crate::separator::FusionRef;
use crate::signal::{EmbeddingSeq, MelSpec, Waveform, MEL_HOP, N_MELS, SAMPLE_RATE, VIDEO_FPS};
use crate::tensor::{Tape, Tx};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthesizerConfig {
    /// Shared projection width N_pro.
    pub proj_dim: usize,
    /// Mel bands expected in the conditioning spectrogram.
    pub mel_dim: usize,
    /// Hidden channels of the three convolution layers; the last equals the
    /// hop size so columns fold into waveform samples.
    pub conv_channels: (usize, usize, usize),
    pub conv_kernel: usize,
    pub fusion: FusionStrategy,
    pub dominance: DominanceConfig,
}

impl SynthesizerConfig {
    pub fn paper() -> Self {
        SynthesizerConfig {
            proj_dim: 256,
            mel_dim: N_MELS,
            conv_channels: (256, 128, 160),
            conv_kernel: 7,
            fusion: FusionStrategy::CrossAttention,
            dominance: DominanceConfig::video_dominant(),
        }
    }

    pub fn toy() -> Self {
        SynthesizerConfig {
            proj_dim: 64,
            mel_dim: N_MELS,
            conv_channels: (64, 64, 160),
            conv_kernel: 7,
            fusion: FusionStrategy::CrossAttention,
            dominance: DominanceConfig::video_dominant(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.proj_dim == 0 || self.mel_dim == 0 {
            return invalid_arg("synthesizer dims must be positive");
        }
        if self.conv_channels.2 != MEL_HOP {
            return invalid_arg(format!(
                "last conv channel count must equal the hop ({MEL_HOP}), got {}",
                self.conv_channels.2
            ));
        }
        if self.conv_kernel % 2 == 0 {
            return invalid_arg("conv kernel must be odd for same padding");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthesizerModel {
    pub config: SynthesizerConfig,
    pub video_dim: usize,
    mel_proj: usize,
    video_proj: usize,
    fusion: FusionRef,
    conv_w: [usize; 3],
    conv_b: [usize; 3],
}

impl SynthesizerModel {
    pub fn new(
        config: SynthesizerConfig,
        video_dim: usize,
        seed: u64,
        store: &mut ParamStore,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x57a7_e512);
        let d = config.proj_dim;
        let mel_proj = store.add(
            "synthesizer.mel_proj.w",
            xavier(config.mel_dim, d, &mut rng).into_dyn(),
        );
        let video_proj = store.add(
            "synthesizer.video_proj.w",
            xavier(video_dim, d, &mut rng).into_dyn(),
        );
        let fusion = register_synth_fusion(store, config.fusion, d, &mut rng);
        let (c1, c2, c3) = config.conv_channels;
        let k = config.conv_kernel;
        let conv_shapes = [(c1, d), (c2, c1), (c3, c2)];
        let mut conv_w = [0usize; 3];
        let mut conv_b = [0usize; 3];
        for (i, &(cout, cin)) in conv_shapes.iter().enumerate() {
            // final layer zero-initialized: the residual starts at zero and
            // grows as the head learns
            let w = if i == 2 {
                ArrayD::zeros(IxDyn(&[cout, cin, k]))
            } else {
                xavier(cout, cin * k, &mut rng)
                    .into_shape_with_order((cout, cin, k))
                    .unwrap()
                    .into_dyn()
            };
            conv_w[i] = store.add(format!("synthesizer.conv{}.w", i + 1), w);
            conv_b[i] = store.add(
                format!("synthesizer.conv{}.b", i + 1),
                ArrayD::zeros(IxDyn(&[cout])),
            );
        }
        Ok(SynthesizerModel { config, video_dim, mel_proj, video_proj, fusion, conv_w, conv_b })
    }

    /// Residual waveform on the tape from a mel tensor `[mel_dim, T_mel]`
    /// and a time-major constant video embedding `[T_v, D_v]` at 25 Hz.
    pub fn synthesize_tape(
        &self,
        t: &mut Tape,
        b: &Binding,
        mel: Tx,
        f_v: &Array2<f64>,
    ) -> Result<Tx> {
        let t_mel = t.shape(mel)[1];
        let d = self.config.proj_dim;
        let mel_tm = t.permute(mel, &[1, 0]); // [T_mel, mel_dim]
        // fixed affine conditioning: log-mel values live around [-23, 0]
        let shifted = t.add_scalar(mel_tm, 8.0);
        let mel_n = t.mul_scalar(shifted, 0.2);
        let s_hat = t.matmul(mel_n, b.get(self.mel_proj)); // [T_mel, d]
        let up = t.constant(upsample_matrix(f_v.nrows(), t_mel).into_dyn());
        let fv = t.constant(f_v.clone().into_dyn());
        let v_up = t.matmul(up, fv); // [T_mel, D_v]
        let v_hat = t.matmul(v_up, b.get(self.video_proj)); // [T_mel, d]
        let s3 = t.reshape(s_hat, &[1, t_mel, d]);
        let v3 = t.reshape(v_hat, &[1, t_mel, d]);
        let (query, kv) = match self.config.dominance.query {
            Modality::Audio => (s3, v3),
            Modality::Video => (v3, s3),
        };
        let fused = crate::fusion::fuse_tape(t, query, kv, self.fusion.bind(b))?;
        let f2 = t.reshape(fused, &[t_mel, d]);
        let mut h = t.permute(f2, &[1, 0]); // [d, T_mel]
        let pad = (self.config.conv_kernel - 1) / 2;
        for i in 0..3 {
            h = t.conv1d(h, b.get(self.conv_w[i]), Some(b.get(self.conv_b[i])), 1, pad);
            if i < 2 {
                h = t.relu(h);
            }
        }
        Ok(t.fold_frames(h)) // [160 * T_mel]
    }

    /// Predict the residual waveform for a mel-conditioned utterance.
    pub fn synthesize_residual(
        &self,
        store: &ParamStore,
        s_pre_mel: &MelSpec,
        f_v: &EmbeddingSeq,
    ) -> Result<Waveform> {
        if (f_v.frame_rate - VIDEO_FPS).abs() > 1e-9 {
            return invalid_arg(format!(
                "synthesizer expects {VIDEO_FPS} Hz video embeddings, got {}",
                f_v.frame_rate
            ));
        }
        if (s_pre_mel.hop_seconds - 0.01).abs() > 1e-12 {
            return invalid_arg("synthesizer expects 100 Hz mel frames");
        }
        if s_pre_mel.n_mels() != self.config.mel_dim {
            return invalid_arg(format!(
                "mel has {} bands, model expects {}",
                s_pre_mel.n_mels(),
                self.config.mel_dim
            ));
        }
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let mel = t.constant(s_pre_mel.data.clone().into_dyn());
        let out = self.synthesize_tape(&mut t, &b, mel, &f_v.data.t().to_owned())?;
        Waveform::new(
            t.value(out)
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
                .to_owned(),
            SAMPLE_RATE,
        )
    }
}

fn register_synth_fusion(
    store: &mut ParamStore,
    strategy: FusionStrategy,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> FusionRef {
    match strategy {
        FusionStrategy::CrossAttention => FusionRef::CrossAttention {
            w_q: store.add("synthesizer.fusion.w_q", xavier(d, d, rng).into_dyn()),
            w_k: store.add("synthesizer.fusion.w_k", xavier(d, d, rng).into_dyn()),
            w_v: store.add("synthesizer.fusion.w_v", xavier(d, d, rng).into_dyn()),
        },
        FusionStrategy::Concatenation => FusionRef::Concatenation {
            proj: store.add("synthesizer.fusion.concat_proj", xavier(2 * d, d, rng).into_dyn()),
        },
        FusionStrategy::Summation => FusionRef::Summation {
            proj: store.add("synthesizer.fusion.sum_proj", xavier(d, d, rng).into_dyn()),
        },
    }
}

/// Nearest-neighbor 25 Hz -> 100 Hz upsampling as a constant matrix
/// `[t_mel x t_v]`, matching `signal::upsample_to_mel`.
pub fn upsample_matrix(t_v: usize, t_mel: usize) -> Array2<f64> {
    let ratio = 4usize;
    let mut m = Array2::<f64>::zeros((t_mel, t_v));
    for j in 0..t_mel {
        let i = (j / ratio).min(t_v - 1);
        m[[j, i]] = 1.0;
    }
    m
}

/// Final speech: `s_fin = s_pre + s_res`. The residual is trimmed (or
/// zero-extended) to the estimate's length when folding over- or
/// under-shoots by less than one hop.
pub fn produce(s_pre: &Waveform, s_res: &Waveform) -> Result<Waveform> {
    let la = s_pre.len();
    let lr = s_res.len();
    if la.abs_diff(lr) >= MEL_HOP {
        return invalid_arg(format!(
            "length gap {} is at least one hop ({MEL_HOP})",
            la.abs_diff(lr)
        ));
    }
    let mut out = s_pre.samples.clone();
    for i in 0..la.min(lr) {
        out[i] += s_res.samples[i];
    }
    Waveform::new(out, s_pre.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::log_mel;
    use ndarray::{Array1, Array2};

    fn tiny_config() -> SynthesizerConfig {
        SynthesizerConfig {
            proj_dim: 6,
            mel_dim: 5,
            conv_channels: (4, 3, MEL_HOP),
            conv_kernel: 3,
            fusion: FusionStrategy::CrossAttention,
            dominance: DominanceConfig::video_dominant(),
        }
    }

    fn rand_mel(rng: &mut ChaCha8Rng, bands: usize, frames: usize) -> MelSpec {
        MelSpec {
            data: Array2::from_shape_fn((bands, frames), |_| rng.gen_range(-3.0..0.0)),
            hop_seconds: 0.01,
            win_seconds: 0.04,
        }
    }

    fn rand_video(rng: &mut ChaCha8Rng, dim: usize, frames: usize) -> EmbeddingSeq {
        EmbeddingSeq::new(
            Array2::from_shape_fn((dim, frames), |_| rng.gen_range(-1.0..1.0)),
            VIDEO_FPS,
        )
        .unwrap()
    }

    #[test]
    fn residual_length_is_hop_times_frames() {
        let mut store = ParamStore::new();
        let model = SynthesizerModel::new(SynthesizerConfig::toy(), 8, 1, &mut store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let w = Waveform::new(Array1::from_shape_fn(32_000, |_| rng.gen_range(-0.4..0.4)), SAMPLE_RATE)
            .unwrap();
        let mel = log_mel(&w).unwrap();
        assert_eq!(mel.data.dim(), (80, 200));
        let f_v = rand_video(&mut rng, 8, 50);
        let res = model.synthesize_residual(&store, &mel, &f_v).unwrap();
        assert_eq!(res.len(), 32_000);
    }

    #[test]
    fn zero_final_conv_means_zero_residual() {
        let mut store = ParamStore::new();
        let model = SynthesizerModel::new(tiny_config(), 4, 2, &mut store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        // make every non-final parameter random, then zero the output head
        for name in ["synthesizer.conv1.w", "synthesizer.conv2.w"] {
            let shape = store.by_name(name).unwrap().shape().to_vec();
            let vals = ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.gen_range(-0.5..0.5));
            store.set_by_name(name, vals).unwrap();
        }
        let mel = rand_mel(&mut rng, 5, 8);
        let f_v = rand_video(&mut rng, 4, 2);
        let res = model.synthesize_residual(&store, &mel, &f_v).unwrap();
        assert!(res.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_frame_rate_mismatch() {
        let mut store = ParamStore::new();
        let model = SynthesizerModel::new(tiny_config(), 4, 3, &mut store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mel = rand_mel(&mut rng, 5, 8);
        let bad = EmbeddingSeq::new(Array2::ones((4, 2)), 50.0).unwrap();
        assert!(model.synthesize_residual(&store, &mel, &bad).is_err());
    }

    #[test]
    fn synthesizer_gradcheck() {
        let mut store = ParamStore::new();
        let model = SynthesizerModel::new(tiny_config(), 4, 4, &mut store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        // non-degenerate head so every parameter participates
        for name in ["synthesizer.conv3.w", "synthesizer.conv3.b"] {
            let shape = store.by_name(name).unwrap().shape().to_vec();
            let vals = ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.gen_range(-0.5..0.5));
            store.set_by_name(name, vals).unwrap();
        }
        let mel = Array2::from_shape_fn((5, 6), |_| rng.gen_range(-2.0..0.0));
        let f_v = Array2::from_shape_fn((2, 4), |_| rng.gen_range(-1.0..1.0)); // [T_v, D_v]
        let eval = |store: &ParamStore, mel: &Array2<f64>| -> (f64, Vec<ArrayD<f64>>, ArrayD<f64>) {
            let mut t = Tape::new();
            let b = store.bind(&mut t);
            let m = t.var(mel.clone().into_dyn());
            let out = model.synthesize_tape(&mut t, &b, m, &f_v).unwrap();
            let sq = t.mul(out, out);
            let loss = t.sum_all(sq);
            let v = *t.value(loss).iter().next().unwrap();
            t.backward(loss);
            let grads = (0..store.len())
                .map(|i| {
                    t.grad(b.get(i))
                        .cloned()
                        .unwrap_or_else(|| ArrayD::zeros(store.value(i).raw_dim()))
                })
                .collect();
            let gm = t.grad(m).unwrap().clone();
            (v, grads, gm)
        };
        let (_, analytic, analytic_mel) = eval(&store, &mel);
        let h = 1e-5;
        for idx in 0..store.len() {
            let n = store.value(idx).len();
            for e in 0..n {
                let mut sp = store.clone();
                sp.value_mut(idx).as_slice_mut().unwrap()[e] += h;
                let (fp, _, _) = eval(&sp, &mel);
                let mut sm = store.clone();
                sm.value_mut(idx).as_slice_mut().unwrap()[e] -= h;
                let (fm, _, _) = eval(&sm, &mel);
                let numeric = (fp - fm) / (2.0 * h);
                let analytic_v = analytic[idx].as_slice().unwrap()[e];
                let denom = analytic_v.abs().max(numeric.abs());
                assert!(
                    (analytic_v - numeric).abs() < (1e-4 * denom).max(1e-8),
                    "param {} elem {e}: {analytic_v} vs {numeric}",
                    store.name(idx)
                );
            }
        }
        // gradient w.r.t. the mel condition
        let ms = mel.as_slice().unwrap().to_vec();
        for e in 0..ms.len() {
            let mut mp = mel.clone();
            mp.as_slice_mut().unwrap()[e] += h;
            let (fp, _, _) = eval(&store, &mp);
            let mut mm = mel.clone();
            mm.as_slice_mut().unwrap()[e] -= h;
            let (fm, _, _) = eval(&store, &mm);
            let numeric = (fp - fm) / (2.0 * h);
            let analytic_v = analytic_mel.as_slice().unwrap()[e];
            let denom = analytic_v.abs().max(numeric.abs());
            assert!(
                (analytic_v - numeric).abs() < (1e-4 * denom).max(1e-8),
                "mel elem {e}"
            );
        }
    }

    #[test]
    fn produce_adds_elementwise() {
        let a = Waveform::from_vec(vec![0.1, 0.2], SAMPLE_RATE).unwrap();
        let b = Waveform::from_vec(vec![0.0, -0.1], SAMPLE_RATE).unwrap();
        let out = produce(&a, &b).unwrap();
        assert_eq!(out.samples.to_vec(), vec![0.1, 0.1]);
        // additive identity
        let zero = Waveform::from_vec(vec![0.0, 0.0], SAMPLE_RATE).unwrap();
        assert_eq!(produce(&a, &zero).unwrap().samples, a.samples);
    }

    #[test]
    fn produce_identity_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let pre = Waveform::new(Array1::from_shape_fn(500, |_| rng.gen_range(-1.0..1.0)), SAMPLE_RATE)
            .unwrap();
        let res = Waveform::new(Array1::from_shape_fn(500, |_| rng.gen_range(-1.0..1.0)), SAMPLE_RATE)
            .unwrap();
        let fin = produce(&pre, &res).unwrap();
        for i in 0..500 {
            // bitwise at double precision: the sum is stored unmodified
            assert_eq!(fin.samples[i], pre.samples[i] + res.samples[i]);
        }
    }

    #[test]
    fn produce_trims_within_one_hop_and_rejects_beyond() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let pre = Waveform::new(Array1::from_shape_fn(1000, |_| rng.gen_range(-1.0..1.0)), SAMPLE_RATE)
            .unwrap();
        let res = Waveform::new(Array1::from_shape_fn(1100, |_| rng.gen_range(-1.0..1.0)), SAMPLE_RATE)
            .unwrap();
        let fin = produce(&pre, &res).unwrap();
        assert_eq!(fin.len(), 1000);
        let too_long =
            Waveform::new(Array1::zeros(1000 + MEL_HOP), SAMPLE_RATE).unwrap();
        assert!(produce(&pre, &too_long).is_err());
    }
}
