//! Evaluation over a manifest split: per-example and aggregate SI-SNRi and
//! SDRi, emitted as line-delimited records plus an aligned text table.

use crate::chain::ChainModel;
use crate::data::MixtureExample;
use crate::error::Result;
use crate::losses::{sdri, si_snri, LossWeights};
use crate::params::ParamStore;
use crate::signal::Waveform;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub example_id: String,
    pub si_snri: f64,
    pub sdri: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub mean_si_snri: f64,
    pub median_si_snri: f64,
    pub mean_sdri: f64,
    pub median_sdri: f64,
}

fn median(sorted: &mut [f64]) -> f64 {
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Score an arbitrary estimator over examples. The estimator must be pure;
/// examples are processed in parallel and aggregated in input order.
pub fn evaluate_examples<F>(
    examples: &[MixtureExample],
    weights: &LossWeights,
    estimator: F,
) -> Result<(Vec<EvalRecord>, EvalSummary)>
where
    F: Fn(&MixtureExample) -> Result<Waveform> + Sync,
{
    let records: Result<Vec<EvalRecord>> = examples
        .par_iter()
        .map(|ex| {
            let est = estimator(ex)?;
            Ok(EvalRecord {
                example_id: ex.example_id.clone(),
                si_snri: si_snri(&ex.mixture, &est, &ex.target, weights)?,
                sdri: sdri(&ex.mixture, &est, &ex.target, weights)?,
            })
        })
        .collect();
    let records = records?;
    let mut si: Vec<f64> = records.iter().map(|r| r.si_snri).collect();
    let mut sd: Vec<f64> = records.iter().map(|r| r.sdri).collect();
    let n = records.len();
    let summary = EvalSummary {
        n,
        mean_si_snri: si.iter().sum::<f64>() / n.max(1) as f64,
        median_si_snri: median(&mut si),
        mean_sdri: sd.iter().sum::<f64>() / n.max(1) as f64,
        median_sdri: median(&mut sd),
    };
    Ok((records, summary))
}

/// Score a trained model over examples.
pub fn evaluate_model(
    model: &ChainModel,
    store: &ParamStore,
    examples: &[MixtureExample],
) -> Result<(Vec<EvalRecord>, EvalSummary)> {
    evaluate_examples(examples, &model.weights, |ex| model.infer(store, ex))
}

/// Aligned text table of per-example metrics with a summary footer.
pub fn format_table(records: &[EvalRecord], summary: &EvalSummary) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<16} {:>10} {:>10}\n", "example", "SI-SNRi", "SDRi"));
    out.push_str(&format!("{:-<16} {:->10} {:->10}\n", "", "", ""));
    for r in records {
        out.push_str(&format!(
            "{:<16} {:>10.3} {:>10.3}\n",
            r.example_id, r.si_snri, r.sdri
        ));
    }
    out.push_str(&format!("{:-<16} {:->10} {:->10}\n", "", "", ""));
    out.push_str(&format!(
        "{:<16} {:>10.3} {:>10.3}\n",
        format!("mean (n={})", summary.n),
        summary.mean_si_snri,
        summary.mean_sdri
    ));
    out.push_str(&format!(
        "{:<16} {:>10.3} {:>10.3}\n",
        "median", summary.median_si_snri, summary.median_sdri
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render_units, ToySpeakerSpec};
    use crate::frontends::{VisemeStream, DEFAULT_N_UNITS};
    use crate::signal::SAMPLE_RATE;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn examples(n: usize, seed: u64) -> Vec<MixtureExample> {
        (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed + i as u64);
                let frames = 5;
                let units: Vec<usize> =
                    (0..frames).map(|_| rng.gen_range(0..DEFAULT_N_UNITS)).collect();
                let iu: Vec<usize> =
                    (0..frames).map(|_| rng.gen_range(0..DEFAULT_N_UNITS)).collect();
                let v = VisemeStream::new(units, DEFAULT_N_UNITS).unwrap();
                let vi = VisemeStream::new(iu, DEFAULT_N_UNITS).unwrap();
                let target = render_units(&v, &ToySpeakerSpec::seeded(0, seed)).unwrap();
                let interferer = render_units(&vi, &ToySpeakerSpec::seeded(1, seed)).unwrap();
                let mixture =
                    Waveform::new(&target.samples + &interferer.samples, SAMPLE_RATE).unwrap();
                MixtureExample {
                    mixture,
                    target,
                    interferer,
                    visemes: v,
                    snr_db: 0.0,
                    example_id: format!("ex{i}"),
                }
            })
            .collect()
    }

    #[test]
    fn identity_estimator_scores_zero() {
        let exs = examples(6, 81);
        let w = LossWeights::default();
        let (records, summary) = evaluate_examples(&exs, &w, |ex| Ok(ex.mixture.clone())).unwrap();
        assert_eq!(records.len(), 6);
        assert!(summary.mean_si_snri.abs() < 1e-12);
        assert!(summary.mean_sdri.abs() < 1e-12);
    }

    #[test]
    fn oracle_estimator_hits_clamp_ceiling() {
        let exs = examples(4, 82);
        let w = LossWeights::default();
        let (records, summary) = evaluate_examples(&exs, &w, |ex| Ok(ex.target.clone())).unwrap();
        for r in &records {
            assert_eq!(r.si_snri, w.clamp_db);
        }
        assert_eq!(summary.mean_si_snri, w.clamp_db);
    }

    #[test]
    fn evaluation_is_order_independent() {
        let mut exs = examples(8, 83);
        let w = LossWeights::default();
        let est = |ex: &MixtureExample| {
            Ok(Waveform::new(
                &ex.target.samples * 0.8 + &ex.interferer.samples * 0.2,
                SAMPLE_RATE,
            )
            .unwrap())
        };
        let (_, s1) = evaluate_examples(&exs, &w, est).unwrap();
        exs.reverse();
        let (_, s2) = evaluate_examples(&exs, &w, est).unwrap();
        assert!((s1.mean_si_snri - s2.mean_si_snri).abs() < 1e-9);
        assert!((s1.median_si_snri - s2.median_si_snri).abs() < 1e-9);
    }

    #[test]
    fn table_is_aligned() {
        let exs = examples(2, 84);
        let w = LossWeights::default();
        let (records, summary) = evaluate_examples(&exs, &w, |ex| Ok(ex.mixture.clone())).unwrap();
        let table = format_table(&records, &summary);
        let widths: std::collections::HashSet<usize> =
            table.lines().map(|l| l.chars().count()).collect();
        assert_eq!(widths.len(), 1, "ragged table:\n{table}");
    }
}
