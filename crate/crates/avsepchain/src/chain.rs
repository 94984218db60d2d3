//! The full two-stage pipeline: separator estimate, mel conditioning,
//! residual synthesis, final addition, and the joint objective with frozen
//! front-end embeddings. One struct drives both the training graph and
//! inference.

use crate::data::MixtureExample;
use crate::error::{invalid_arg, Result};
use crate::frontends::{AudioFrontend, FrontendSpec, VideoFrontend};
use crate::losses::{matching_loss_tape, si_snr_loss_tape, LossWeights};
use crate::params::{Binding, ParamStore};
use crate::separator::{SeparatorConfig, SeparatorModel};
use crate::signal::{
    mel_filterbank, mel_frames_for, Waveform, MEL_FFT, MEL_FLOOR, MEL_HOP, MEL_START_OFFSET,
    MEL_WIN, N_MELS, SAMPLE_RATE, VIDEO_FPS,
};
use crate::synthesizer::{SynthesizerConfig, SynthesizerModel};
use crate::tensor::{SpecConfig, Tape, Tx, Window};
use ndarray::{Array2, ArrayD, IxDyn};

/// Loss components of one example.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub per: f64,
    pub syn: f64,
    pub mat: f64,
    pub total: f64,
}

/// Assembled model: trainable stages plus frozen front-ends.
pub struct ChainModel {
    pub separator: SeparatorModel,
    pub synthesizer: Option<SynthesizerModel>,
    pub audio_frontend: AudioFrontend,
    pub video_frontend: VideoFrontend,
    pub weights: LossWeights,
    pub use_matching_loss: bool,
    pub predict_complete: bool,
}

impl ChainModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        separator: SeparatorConfig,
        synthesizer: Option<SynthesizerConfig>,
        frontend_audio: FrontendSpec,
        frontend_video: FrontendSpec,
        n_units: usize,
        weights: LossWeights,
        use_matching_loss: bool,
        predict_complete: bool,
        seed: u64,
        store: &mut ParamStore,
    ) -> Result<Self> {
        if predict_complete && synthesizer.is_none() {
            return invalid_arg("predict_complete requires the synthesizer stage");
        }
        let embed_dim = frontend_video.embed_dim;
        let sep = SeparatorModel::new(separator, embed_dim, seed, store)?;
        let synth = match synthesizer {
            Some(cfg) => Some(SynthesizerModel::new(cfg, embed_dim, seed, store)?),
            None => None,
        };
        Ok(ChainModel {
            separator: sep,
            synthesizer: synth,
            audio_frontend: AudioFrontend::new(frontend_audio)?,
            video_frontend: VideoFrontend::new(frontend_video, n_units)?,
            weights,
            use_matching_loss,
            predict_complete,
        })
    }

    /// Log-mel of a waveform tensor on the tape: `[N_MELS, frames]`.
    fn log_mel_tape(&self, t: &mut Tape, x: Tx) -> Tx {
        let len = t.shape(x)[0];
        let frames = mel_frames_for(len);
        let cfg = SpecConfig {
            win_len: MEL_WIN,
            hop: MEL_HOP,
            fft_size: MEL_FFT,
            n_frames: frames,
            start_offset: MEL_START_OFFSET,
            window: Window::Hann,
        };
        let power = t.power_spec(x, cfg); // [frames, bins]
        let fb_t = t.constant(
            mel_filterbank(N_MELS, MEL_FFT, SAMPLE_RATE as f64, 8000.0)
                .t()
                .to_owned()
                .into_dyn(),
        );
        let mel = t.matmul(power, fb_t); // [frames, N_MELS]
        let logm = t.ln_clamped(mel, MEL_FLOOR);
        t.permute(logm, &[1, 0])
    }

    /// Estimate on the tape: `(s_pre, s_fin)`. Without a synthesizer both
    /// are the separator output; in predict-complete mode the synthesizer
    /// output replaces the estimate instead of correcting it.
    pub fn estimate_tape(
        &self,
        t: &mut Tape,
        b: &Binding,
        x: Tx,
        f_v: &Array2<f64>,
    ) -> Result<(Tx, Tx)> {
        let s_pre = self.separator.separate_tape(t, b, x, f_v)?;
        let Some(synth) = &self.synthesizer else {
            return Ok((s_pre, s_pre));
        };
        let mel = self.log_mel_tape(t, s_pre);
        let s_res = synth.synthesize_tape(t, b, mel, f_v)?;
        let t_a = t.shape(s_pre)[0];
        let t_r = t.shape(s_res)[0];
        if t_a.abs_diff(t_r) >= MEL_HOP {
            return invalid_arg("residual length differs from estimate by a full hop");
        }
        let s_res_adj = if t_r > t_a {
            t.narrow(s_res, 0, 0, t_a)
        } else if t_r < t_a {
            let pad = t.constant(ArrayD::zeros(IxDyn(&[t_a - t_r])));
            t.concat(&[s_res, pad], 0)
        } else {
            s_res
        };
        let s_fin = if self.predict_complete {
            s_res_adj
        } else {
            t.add(s_pre, s_res_adj)
        };
        Ok((s_pre, s_fin))
    }

    /// Joint objective on the tape. Returns the scalar total and the
    /// component handles `(per, syn, mat)`.
    pub fn loss_tape(
        &self,
        t: &mut Tape,
        b: &Binding,
        ex: &MixtureExample,
        separator_only: bool,
    ) -> Result<(Tx, Tx, Option<Tx>, Option<Tx>)> {
        let f_v_seq = self.video_frontend.embed(&ex.visemes)?;
        let f_v = f_v_seq.data.t().to_owned();
        let x = t.constant(ex.mixture.samples.clone().into_dyn());
        let target = t.constant(ex.target.samples.clone().into_dyn());
        if separator_only || self.synthesizer.is_none() {
            let s_pre = self.separator.separate_tape(t, b, x, &f_v)?;
            let l_per = si_snr_loss_tape(t, target, s_pre, self.weights.epsilon);
            return Ok((l_per, l_per, None, None));
        }
        let (s_pre, s_fin) = self.estimate_tape(t, b, x, &f_v)?;
        let l_per = si_snr_loss_tape(t, target, s_pre, self.weights.epsilon);
        let l_syn = si_snr_loss_tape(t, target, s_fin, self.weights.epsilon);
        let mut total = t.add(l_per, l_syn);
        let mut l_mat_tx = None;
        if self.use_matching_loss && self.weights.lambda != 0.0 {
            let f_a = self.audio_frontend.embed_tape(t, s_fin);
            let residual_audio = t.sub(x, s_fin);
            let f_a_neg = self.audio_frontend.embed_tape(t, residual_audio);
            let l_mat = matching_loss_tape(
                t,
                &f_v,
                VIDEO_FPS,
                f_a,
                f_a_neg,
                VIDEO_FPS,
                self.weights.margin,
            )?;
            let weighted = t.mul_scalar(l_mat, self.weights.lambda);
            total = t.add(total, weighted);
            l_mat_tx = Some(l_mat);
        }
        Ok((total, l_per, Some(l_syn), l_mat_tx))
    }

    /// Forward loss components without gradient bookkeeping.
    pub fn eval_losses(
        &self,
        store: &ParamStore,
        ex: &MixtureExample,
        separator_only: bool,
    ) -> Result<LossParts> {
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let (total, per, syn, mat) = self.loss_tape(&mut t, &b, ex, separator_only)?;
        let get = |tx: Tx| *t.value(tx).iter().next().unwrap();
        let parts = LossParts {
            per: get(per),
            syn: syn.map(get).unwrap_or(0.0),
            mat: mat.map(get).unwrap_or(0.0),
            total: get(total),
        };
        if !parts.total.is_finite() {
            return Err(crate::error::Error::Numeric(format!(
                "non-finite loss on {}",
                ex.example_id
            )));
        }
        Ok(parts)
    }

    /// One example's loss components and parameter gradients.
    pub fn loss_and_grads(
        &self,
        store: &ParamStore,
        ex: &MixtureExample,
        separator_only: bool,
    ) -> Result<(LossParts, Vec<ArrayD<f64>>)> {
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let (total, per, syn, mat) = self.loss_tape(&mut t, &b, ex, separator_only)?;
        let get = |t: &Tape, tx: Tx| *t.value(tx).iter().next().unwrap();
        let parts = LossParts {
            per: get(&t, per),
            syn: syn.map(|s| get(&t, s)).unwrap_or(0.0),
            mat: mat.map(|m| get(&t, m)).unwrap_or(0.0),
            total: get(&t, total),
        };
        if !parts.total.is_finite() {
            return Err(crate::error::Error::Numeric(format!(
                "non-finite loss on {}",
                ex.example_id
            )));
        }
        t.backward(total);
        let grads = store.grads(&t, &b);
        Ok((parts, grads))
    }

    /// Final estimate for one example.
    pub fn infer(&self, store: &ParamStore, ex: &MixtureExample) -> Result<Waveform> {
        let f_v_seq = self.video_frontend.embed(&ex.visemes)?;
        let f_v = f_v_seq.data.t().to_owned();
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let x = t.constant(ex.mixture.samples.clone().into_dyn());
        let (_, s_fin) = self.estimate_tape(&mut t, &b, x, &f_v)?;
        Waveform::new(
            t.value(s_fin)
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
                .to_owned(),
            SAMPLE_RATE,
        )
    }
}
