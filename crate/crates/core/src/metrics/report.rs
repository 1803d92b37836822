//! Assembles the seven scores into a report with a per-clip breakdown.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scores::{check_sets, clip_corr, clip_dist, clip_div, clip_syn, clip_var, fr_dvs, fr_rea};
use super::{ReactionSet, DEFAULT_L_MAX, DEFAULT_THRESHOLD};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Speaker similarity needed for a listener to count as appropriate.
    pub threshold: f64,
    /// Largest lag searched by the synchrony score.
    pub l_max: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, l_max: DEFAULT_L_MAX }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRow {
    pub clip_id: String,
    pub appropriate: usize,
    pub fr_corr: f64,
    pub fr_dist: f64,
    pub fr_div: f64,
    pub fr_var: f64,
    pub fr_syn: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// What was scored, e.g. a baseline name or a generation directory.
    pub source: String,
    pub fr_corr: f64,
    pub fr_dist: f64,
    pub fr_div: f64,
    pub fr_var: f64,
    pub fr_dvs: f64,
    /// Fréchet distance on emotion channels, a proxy for rendered realism.
    pub fr_rea: f64,
    pub fr_syn: f64,
    pub alpha: usize,
    pub n_clips: usize,
    pub n_frames: usize,
    pub config: EvalConfig,
    pub clips: Vec<ClipRow>,
    pub warnings: Vec<String>,
}

fn mean(rows: &[ClipRow], f: impl Fn(&ClipRow) -> f64) -> f64 {
    rows.iter().map(f).sum::<f64>() / rows.len() as f64
}

/// Scores `sets` with every metric.
pub fn evaluate(sets: &[ReactionSet], cfg: &EvalConfig, source: impl Into<String>) -> Result<MetricsReport> {
    check_sets(sets)?;
    let row = |s: &ReactionSet| -> Result<ClipRow> {
        Ok(ClipRow {
            clip_id: s.clip_id.clone(),
            appropriate: s.appropriate.len(),
            fr_corr: clip_corr(s)?,
            fr_dist: clip_dist(s)?,
            fr_div: clip_div(s),
            fr_var: clip_var(s),
            fr_syn: clip_syn(s, cfg.l_max)?,
        })
    };
    let (rows, (dvs, rea)) = rayon::join(
        || sets.par_iter().map(row).collect::<Result<Vec<_>>>(),
        || rayon::join(|| fr_dvs(sets), || fr_rea(sets)),
    );
    let (rows, dvs, rea) = (rows?, dvs?, rea?);
    let warnings = [dvs.warning, rea.warning].into_iter().flatten().collect();
    Ok(MetricsReport {
        source: source.into(),
        fr_corr: mean(&rows, |r| r.fr_corr),
        fr_dist: mean(&rows, |r| r.fr_dist),
        fr_div: mean(&rows, |r| r.fr_div),
        fr_var: mean(&rows, |r| r.fr_var),
        fr_dvs: dvs.value,
        fr_rea: rea.value,
        fr_syn: mean(&rows, |r| r.fr_syn),
        alpha: sets[0].alpha(),
        n_clips: sets.len(),
        n_frames: sets[0].n_frames(),
        config: *cfg,
        clips: rows,
        warnings,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn scores(&self) -> [(&'static str, f64); 7] {
        [
            ("FRCorr", self.fr_corr),
            ("FRDist", self.fr_dist),
            ("FRDiv", self.fr_div),
            ("FRVar", self.fr_var),
            ("FRDvs", self.fr_dvs),
            ("FRRea (proxy)", self.fr_rea),
            ("FRSyn", self.fr_syn),
        ]
    }

    /// Aligned text table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "source     {}", self.source);
        let _ = writeln!(
            out,
            "clips      {}  alpha {}  frames {}  threshold {}  l_max {}",
            self.n_clips, self.alpha, self.n_frames, self.config.threshold, self.config.l_max
        );
        out.push('\n');
        for (name, v) in self.scores() {
            let _ = writeln!(out, "{name:<14} {v:>12.4}");
        }
        out.push('\n');
        let _ = writeln!(
            out,
            "{:<16} {:>5} {:>10} {:>12} {:>10} {:>10} {:>8}",
            "clip", "|Y|", "FRCorr", "FRDist", "FRDiv", "FRVar", "FRSyn"
        );
        for r in &self.clips {
            let _ = writeln!(
                out,
                "{:<16} {:>5} {:>10.4} {:>12.4} {:>10.4} {:>10.4} {:>8.2}",
                r.clip_id, r.appropriate, r.fr_corr, r.fr_dist, r.fr_div, r.fr_var, r.fr_syn
            );
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }

    /// Per-clip breakdown as CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("clip_id,appropriate,fr_corr,fr_dist,fr_div,fr_var,fr_syn\n");
        for r in &self.clips {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.clip_id, r.appropriate, r.fr_corr, r.fr_dist, r.fr_div, r.fr_var, r.fr_syn
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{synth_dataset, FeatureConfig, Split};
    use crate::metrics::{baseline_reactions, fr_corr, fr_dist, fr_div, fr_syn, fr_var, reaction_sets, Baseline};

    #[test]
    fn report_agrees_with_scores() {
        let cfg = FeatureConfig::desk(100);
        let train = synth_dataset(&cfg, 3, 2, Split::Train).unwrap();
        let test = synth_dataset(&cfg, 3, 2, Split::Test).unwrap();
        let gen = baseline_reactions(Baseline::Random, &train.clips, &test.clips, 3, 1).unwrap();
        let sets = reaction_sets(&test.clips, gen, 0.75).unwrap();
        let ec = EvalConfig::default();
        let report = evaluate(&sets, &ec, "b_random").unwrap();
        assert_eq!(report.fr_corr, fr_corr(&sets).unwrap());
        assert_eq!(report.fr_dist, fr_dist(&sets).unwrap());
        assert_eq!(report.fr_div, fr_div(&sets).unwrap());
        assert_eq!(report.fr_var, fr_var(&sets).unwrap());
        assert_eq!(report.fr_syn, fr_syn(&sets, ec.l_max).unwrap());
        assert_eq!(report.clips.len(), 3);
        let back: MetricsReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
        assert!(report.to_text().contains("FRRea (proxy)"));
        assert_eq!(report.to_csv().lines().count(), 4);
    }
}
