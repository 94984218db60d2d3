//! Ablation suites: every variant trains with the same seed and data order,
//! evaluates on the test split, and lands in a comparison table.

use crate::config::ExperimentConfig;
use crate::data::{Manifest, Split};
use crate::error::{invalid_arg, Result};
use crate::eval::{evaluate_model, EvalSummary};
use crate::fusion::{DominanceConfig, FusionStrategy};
use crate::train::{load_split, train};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    /// Full model, separator alone, no matching loss, predict-complete.
    Stage,
    /// Cross-attention vs concatenation vs summation in both stages.
    Fusion,
    /// The four query/key-value assignments across the two stages.
    Dominance,
}

impl std::str::FromStr for Suite {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stage_ablation" => Ok(Suite::Stage),
            "fusion_ablation" => Ok(Suite::Fusion),
            "dominance_ablation" => Ok(Suite::Dominance),
            other => Err(crate::error::Error::InvalidArgument(format!(
                "unknown suite `{other}` (expected stage_ablation, fusion_ablation, or dominance_ablation)"
            ))),
        }
    }
}

/// Named configuration variants of a suite, in table order.
pub fn variants(suite: Suite, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    match suite {
        Suite::Stage => {
            let full = base.clone();
            let mut no_synth = base.clone();
            no_synth.ablation.use_synthesizer = false;
            no_synth.ablation.predict_complete = false;
            let mut no_mat = base.clone();
            no_mat.ablation.use_matching_loss = false;
            let mut complete = base.clone();
            complete.ablation.predict_complete = true;
            vec![
                ("full".into(), full),
                ("w/o AV-Synthesizer".into(), no_synth),
                ("w/o L_mat".into(), no_mat),
                ("predict complete signal".into(), complete),
            ]
        }
        Suite::Fusion => [
            ("cross-attention", FusionStrategy::CrossAttention),
            ("concatenation", FusionStrategy::Concatenation),
            ("summation", FusionStrategy::Summation),
        ]
        .iter()
        .map(|(name, strat)| {
            let mut cfg = base.clone();
            cfg.separator.fusion = *strat;
            cfg.synthesizer.fusion = *strat;
            (name.to_string(), cfg)
        })
        .collect(),
        Suite::Dominance => {
            let va = DominanceConfig::audio_dominant(); // video query, audio kv
            let av = DominanceConfig::video_dominant(); // audio query, video kv
            [
                ("sep V:A | syn A:V", va, av),
                ("sep A:V | syn A:V", av, av),
                ("sep V:A | syn V:A", va, va),
                ("sep A:V | syn V:A", av, va),
            ]
            .iter()
            .map(|(name, sep_dom, syn_dom)| {
                let mut cfg = base.clone();
                cfg.separator.dominance = *sep_dom;
                cfg.synthesizer.dominance = *syn_dom;
                (name.to_string(), cfg)
            })
            .collect()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mean_si_snri: f64,
    pub median_si_snri: f64,
    pub mean_sdri: f64,
    pub n_test: usize,
}

/// Train and evaluate every variant of the suite. Writes per-variant
/// artifacts under `out_dir` when given.
pub fn run_suite(
    suite: Suite,
    base: &ExperimentConfig,
    manifest: &Manifest,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let test_set = load_split(manifest, Split::Test)?;
    if test_set.is_empty() {
        return invalid_arg("ablation requires a non-empty test split");
    }
    let mut rows = Vec::new();
    for (name, cfg) in variants(suite, base) {
        let (model, mut store) = cfg.build()?;
        let variant_dir = out_dir.map(|d| d.join(sanitize(&name)));
        let outcome = train(&cfg, &model, &mut store, manifest, variant_dir.as_deref())?;
        let (_, summary): (_, EvalSummary) =
            evaluate_model(&model, &outcome.best_store, &test_set)?;
        rows.push(AblationRow {
            variant: name,
            mean_si_snri: summary.mean_si_snri,
            median_si_snri: summary.median_si_snri,
            mean_sdri: summary.mean_sdri,
            n_test: summary.n,
        });
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut text = String::new();
        for row in &rows {
            text.push_str(&serde_json::to_string(row).map_err(|e| crate::error::Error::Format(e.to_string()))?);
            text.push('\n');
        }
        std::fs::write(dir.join("ablation.jsonl"), text)?;
    }
    Ok(rows)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// Aligned comparison table mirroring the suite's row order.
pub fn format_table(suite: Suite, rows: &[AblationRow]) -> String {
    let title = match suite {
        Suite::Stage => "stage ablation",
        Suite::Fusion => "fusion strategies",
        Suite::Dominance => "dominance assignments",
    };
    let mut out = format!("{title} (test split, n={})\n", rows.first().map(|r| r.n_test).unwrap_or(0));
    out.push_str(&format!(
        "{:<26} {:>12} {:>14} {:>10}\n",
        "variant", "SI-SNRi", "SI-SNRi med", "SDRi"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<26} {:>12.3} {:>14.3} {:>10.3}\n",
            r.variant, r.mean_si_snri, r.median_si_snri, r.mean_sdri
        ));
    }
    out
}
