//! One function per verb.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use reactdiff::diffusion::{train_diffusion, Diffusion};
use reactdiff::features::dataset::MANIFEST_FILE;
use reactdiff::features::{synth_dataset, write_dataset, Container, Dataset, Manifest, Split};
use reactdiff::metrics::{baseline_reactions, evaluate as score, reaction_sets, Baseline, EvalConfig};
use reactdiff::mmt::{train_mmt, Mmt, MmtArch};
use reactdiff::numerics::gradcheck::{check_gradients, PrimitiveCase};
use reactdiff::numerics::tape::PRIMITIVES;
use reactdiff::numerics::Tensor;
use reactdiff::{diffusion, mmt, Error};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult, Command, RunConfig};

pub const MMT_CHECKPOINT: &str = "mmt.ckpt";
pub const DIFFUSION_CHECKPOINT: &str = "diffusion.ckpt";
pub const STAGE1_TRACE: &str = "stage1_loss.csv";
pub const STAGE2_TRACE: &str = "stage2_loss.csv";
pub const GENERATION_INDEX: &str = "generation.json";
pub const REACTION_KIND: &str = "reaction";
pub const GRADCHECK_TOL: f64 = 1e-4;

pub type Out<'a> = &'a mut (dyn Write + Send);

pub fn dispatch(cmd: &Command, cfg: &RunConfig, out: Out<'_>) -> CliResult<()> {
    match cmd {
        Command::Synth { preset, n_frames } => {
            let mut cfg = cfg.clone();
            if let Some(p) = preset {
                cfg.preset = p.clone();
            }
            if let Some(n) = n_frames {
                cfg.n_frames = *n;
            }
            synth(&cfg, out)
        }
        Command::Train { stage: 1, epochs } => train_stage1(cfg, epochs.unwrap_or(cfg.epochs_stage1), out),
        Command::Train { epochs, .. } => train_stage2(cfg, epochs.unwrap_or(cfg.epochs_stage2), out),
        Command::Generate { split, alpha } => generate(cfg, split, alpha.unwrap_or(cfg.alpha), out),
        Command::Evaluate { baseline, generated, split, alpha, threshold, l_max } => {
            let ec = EvalConfig { threshold: threshold.unwrap_or(cfg.threshold), l_max: l_max.unwrap_or(cfg.l_max) };
            let source = match (baseline, generated) {
                (Some(b), _) => Source::Baseline(Baseline::from_str(b)?),
                (None, Some(dir)) => Source::Generated(dir.clone()),
                (None, None) => return Err(CliError::Usage("pass --baseline or --generated".into())),
            };
            evaluate(cfg, &source, split, alpha.unwrap_or(cfg.alpha), &ec, out)
        }
        Command::Gradcheck { corrupt } => gradcheck(cfg, corrupt.as_deref(), out),
    }
}

fn say(out: Out<'_>, msg: impl AsRef<str>) {
    let _ = writeln!(out, "{}", msg.as_ref());
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e }.into())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io { path: path.to_path_buf(), source: e }.into())
}

fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e }.into())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn pretty(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn load_manifest(cfg: &RunConfig) -> CliResult<Manifest> {
    if !cfg.data_dir.join(MANIFEST_FILE).exists() {
        return Err(Error::Dependency(format!(
            "no dataset manifest in {}; run `reactdiff synth` first",
            cfg.data_dir.display()
        ))
        .into());
    }
    Ok(Manifest::read(&cfg.data_dir)?)
}

fn load_split(cfg: &RunConfig, manifest: &Manifest, split: Split) -> CliResult<Dataset> {
    Ok(manifest.load_split(&cfg.data_dir, split)?)
}

fn require(path: &Path, what: &str) -> CliResult<()> {
    if !path.exists() {
        return Err(Error::Dependency(format!("{what} not found at {}", path.display())).into());
    }
    Ok(())
}

fn trace_csv(cfg: &RunConfig, header: &str, rows: &[Vec<f64>]) -> String {
    let p = cfg.provenance();
    let mut s = format!(
        "# config_digest={},seed={},code_version={}\n{header}\n",
        p["config_digest"].as_str().unwrap_or_default(),
        cfg.seed,
        reactdiff::CODE_VERSION
    );
    for (i, r) in rows.iter().enumerate() {
        let cols: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{},{}", i + 1, cols.join(","));
    }
    s
}

pub fn synth(cfg: &RunConfig, out: Out<'_>) -> CliResult<()> {
    let features = cfg.features()?;
    let datasets = [(Split::Train, cfg.train_clips), (Split::Val, cfg.val_clips), (Split::Test, cfg.test_clips)]
        .into_par_iter()
        .filter(|(_, n)| *n > 0)
        .map(|(split, n)| synth_dataset(&features, n, cfg.seed, split))
        .collect::<reactdiff::Result<Vec<_>>>()?;
    if datasets.is_empty() {
        return Err(CliError::Usage("every split has zero clips".into()));
    }
    create_dir(&cfg.data_dir)?;
    let manifest = write_dataset(&cfg.data_dir, &features, cfg.seed, &datasets)?;
    let counts: Vec<String> = manifest.splits.iter().map(|s| format!("{} {}", s.split.as_str(), s.count)).collect();
    say(out, format!("wrote {} clips ({}) to {}", manifest.clips.len(), counts.join(", "), cfg.data_dir.display()));
    Ok(())
}

pub fn train_stage1(cfg: &RunConfig, epochs: usize, out: Out<'_>) -> CliResult<()> {
    let manifest = load_manifest(cfg)?;
    let train = load_split(cfg, &manifest, Split::Train)?;
    let tc = cfg.train_config(epochs);
    let (model, trace) = train_mmt(manifest.config, MmtArch::default(), &train.clips, &tc)?;
    create_dir(&cfg.checkpoint_dir)?;
    let extra = json!({ "provenance": cfg.provenance(), "dataset_digest": train.digest(), "train": tc });
    let path = cfg.checkpoint_dir.join(MMT_CHECKPOINT);
    model.save_with(&path, &extra)?;
    let rows: Vec<Vec<f64>> = trace.iter().map(|l| vec![*l]).collect();
    write_file(&cfg.checkpoint_dir.join(STAGE1_TRACE), trace_csv(cfg, "epoch,loss", &rows))?;
    let (first, last) = (trace[0], *trace.last().expect("at least one epoch"));
    say(
        out,
        format!(
            "stage 1: {} clips, {epochs} epochs, loss {first:.4} -> {last:.4} ({:.1}% reduction); wrote {}",
            train.len(),
            100.0 * (1.0 - last / first),
            path.display()
        ),
    );
    Ok(())
}

pub fn train_stage2(cfg: &RunConfig, epochs: usize, out: Out<'_>) -> CliResult<()> {
    let manifest = load_manifest(cfg)?;
    let mmt_path = cfg.checkpoint_dir.join(MMT_CHECKPOINT);
    require(&mmt_path, "stage-1 checkpoint (run `reactdiff train --stage 1` first)")?;
    let mmt = Mmt::load(&mmt_path, &manifest.config)?;
    let before = mmt.params.digest();
    let train = load_split(cfg, &manifest, Split::Train)?;
    let s2 = cfg.stage2_config(epochs);
    let outcome = train_diffusion(&mmt, cfg.diffusion_arch(), &train.clips, &s2)?;
    let after = Mmt::load(&mmt_path, &manifest.config)?.params.digest();
    if mmt.params.digest() != before || after != before {
        return Err(Error::Compatibility {
            field: "mmt_digest".into(),
            detail: format!("stage 2 changed the frozen transformer ({before} -> {after})"),
        }
        .into());
    }
    let extra = json!({ "provenance": cfg.provenance(), "dataset_digest": train.digest(), "stage2": s2 });
    let path = cfg.checkpoint_dir.join(DIFFUSION_CHECKPOINT);
    outcome.model.save_with(&path, &before, &extra)?;
    let rows: Vec<Vec<f64>> =
        outcome.probe_trace.iter().zip(&outcome.train_trace).map(|(p, t)| vec![*p, *t]).collect();
    write_file(&cfg.checkpoint_dir.join(STAGE2_TRACE), trace_csv(cfg, "epoch,probe_loss,train_loss", &rows))?;
    let first = outcome.probe_trace[0];
    let last = *outcome.probe_trace.last().expect("at least one epoch");
    say(
        out,
        format!(
            "stage 2: {} clips, {epochs} epochs, probe loss {first:.4} -> {last:.4}; transformer digest unchanged ({}); wrote {}",
            train.len(),
            &before[..12],
            path.display()
        ),
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReactionRecord {
    pub clip_id: String,
    pub sample: usize,
    /// File name relative to the generation directory.
    pub path: PathBuf,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationIndex {
    pub provenance: Value,
    pub split: Split,
    pub alpha: usize,
    pub mmt_digest: String,
    pub diffusion_digest: String,
    pub records: Vec<ReactionRecord>,
}

fn load_models(cfg: &RunConfig, manifest: &Manifest) -> CliResult<(Mmt, Diffusion)> {
    let mmt_path = cfg.checkpoint_dir.join(MMT_CHECKPOINT);
    let diff_path = cfg.checkpoint_dir.join(DIFFUSION_CHECKPOINT);
    require(&mmt_path, "stage-1 checkpoint")?;
    require(&diff_path, "stage-2 checkpoint")?;
    let mmt = Mmt::load(&mmt_path, &manifest.config)?;
    let (diff, trained_on) = Diffusion::load(&diff_path, &manifest.config)?;
    if trained_on != mmt.params.digest() {
        return Err(Error::Compatibility {
            field: "mmt_digest".into(),
            detail: format!("diffusion checkpoint was trained against {trained_on}, found {}", mmt.params.digest()),
        }
        .into());
    }
    Ok((mmt, diff))
}

pub fn generate(cfg: &RunConfig, split: &str, alpha: usize, out: Out<'_>) -> CliResult<()> {
    if alpha == 0 {
        return Err(CliError::Usage("alpha must be at least 1".into()));
    }
    let split = Split::from_str(split)?;
    let manifest = load_manifest(cfg)?;
    let (mmt, diff) = load_models(cfg, &manifest)?;
    let clips = load_split(cfg, &manifest, split)?.clips;
    let per_clip = clips
        .par_iter()
        .map(|clip| diff.sample_reactions(&mmt, &clip.speaker, &clip.id, alpha, cfg.seed))
        .collect::<reactdiff::Result<Vec<_>>>()?;
    let dir = &cfg.generated_dir;
    create_dir(dir)?;
    let (mmt_digest, diffusion_digest) = (mmt.params.digest(), diff.params.digest());
    let provenance = cfg.provenance();
    let mut records = Vec::new();
    for (clip, reactions) in clips.iter().zip(per_clip) {
        for r in reactions {
            let meta = json!({
                "clip_id": clip.id,
                "sample": r.sample,
                "split": split,
                "alpha": alpha,
                "mmt_digest": mmt_digest,
                "diffusion_digest": diffusion_digest,
                "provenance": provenance,
            });
            let mut c = Container::new(REACTION_KIND, meta);
            c.push("3dmm", r.pred_3dmm);
            c.push("emo", r.pred_emo);
            let bytes = c.to_bytes();
            let name = PathBuf::from(format!("{}.{:03}.reaction", clip.id, r.sample));
            write_file(&dir.join(&name), &bytes)?;
            records.push(ReactionRecord { clip_id: clip.id.clone(), sample: r.sample, path: name, digest: sha256_hex(&bytes) });
        }
    }
    let index = GenerationIndex { provenance, split, alpha, mmt_digest, diffusion_digest, records };
    write_file(&dir.join(GENERATION_INDEX), pretty(&index))?;
    say(out, format!("wrote {} reactions for {} clips to {}", index.records.len(), clips.len(), dir.display()));
    Ok(())
}

/// Emotion sequences of a generation directory, grouped by clip id and
/// ordered by sample index.
pub fn read_generated(dir: &Path) -> CliResult<(GenerationIndex, BTreeMap<String, Vec<Tensor>>)> {
    let index_path = dir.join(GENERATION_INDEX);
    require(&index_path, "generation index")?;
    let index: GenerationIndex = serde_json::from_slice(&read_file(&index_path)?)
        .map_err(|e| Error::Format { offset: 0, message: format!("{}: {e}", index_path.display()) })?;
    let mut records = index.records.clone();
    records.sort_by(|a, b| (&a.clip_id, a.sample).cmp(&(&b.clip_id, b.sample)));
    let mut grouped: BTreeMap<String, Vec<Tensor>> = BTreeMap::new();
    for rec in &records {
        let path = dir.join(&rec.path);
        let bytes = read_file(&path)?;
        if sha256_hex(&bytes) != rec.digest {
            return Err(Error::Data(format!("{}: digest mismatch", path.display())).into());
        }
        let c = Container::from_bytes(&bytes)?;
        if c.kind != REACTION_KIND {
            return Err(Error::Format { offset: 0, message: format!("{}: kind `{}`", path.display(), c.kind) }.into());
        }
        let emo = c
            .get("emo")
            .cloned()
            .ok_or_else(|| Error::Format { offset: 0, message: format!("{}: no emo field", path.display()) })?;
        grouped.entry(rec.clip_id.clone()).or_default().push(emo);
    }
    Ok((index, grouped))
}

pub enum Source {
    Baseline(Baseline),
    Generated(PathBuf),
}

pub fn evaluate(cfg: &RunConfig, source: &Source, split: &str, alpha: usize, ec: &EvalConfig, out: Out<'_>) -> CliResult<()> {
    let split = Split::from_str(split)?;
    let manifest = load_manifest(cfg)?;
    let clips = load_split(cfg, &manifest, split)?.clips;
    let (label, generated, extra) = match source {
        Source::Baseline(kind) => {
            if alpha == 0 {
                return Err(CliError::Usage("alpha must be at least 1".into()));
            }
            let train = match kind {
                Baseline::MeanSeq | Baseline::MeanFr => load_split(cfg, &manifest, Split::Train)?.clips,
                Baseline::Random | Baseline::Mime => Vec::new(),
            };
            let gen = baseline_reactions(*kind, &train, &clips, alpha, cfg.seed)?;
            (kind.name().to_string(), gen, json!({ "baseline": kind }))
        }
        Source::Generated(dir) => {
            let (index, mut grouped) = read_generated(dir)?;
            let gen = clips
                .iter()
                .map(|c| {
                    grouped
                        .remove(&c.id)
                        .ok_or_else(|| Error::Data(format!("no generated reactions for clip {}", c.id)).into())
                })
                .collect::<CliResult<Vec<_>>>()?;
            let extra = json!({
                "generated_provenance": index.provenance,
                "mmt_digest": index.mmt_digest,
                "diffusion_digest": index.diffusion_digest,
            });
            ("generated".to_string(), gen, extra)
        }
    };
    let sets = reaction_sets(&clips, generated, ec.threshold)?;
    let report = score(&sets, ec, label.clone())?;
    let mut doc = serde_json::to_value(&report).expect("report serializes");
    reactdiff::checkpoint::merge_meta(&mut doc, &json!({ "provenance": cfg.provenance(), "split": split }));
    reactdiff::checkpoint::merge_meta(&mut doc, &extra);
    create_dir(&cfg.report_dir)?;
    write_file(&cfg.report_dir.join(format!("{label}.json")), pretty(&doc))?;
    let text = report.to_text();
    write_file(&cfg.report_dir.join(format!("{label}.txt")), &text)?;
    write_file(&cfg.report_dir.join(format!("{label}.csv")), report.to_csv())?;
    let _ = write!(out, "{text}");
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradRow {
    pub name: String,
    pub max_rel_error: f64,
}

impl GradRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOL
    }
}

/// Relative errors for every primitive and for both training losses.
pub fn gradcheck_rows(seed: u64, corrupt: Option<&'static str>) -> reactdiff::Result<Vec<GradRow>> {
    let mut rows = PrimitiveCase::all()
        .par_iter()
        .map(|case| {
            let report = check_gradients(
                &case.inputs,
                |tape, vars| {
                    tape.corrupt_gradient_of(corrupt);
                    (case.build)(tape, vars)
                },
                1e-5,
            )?;
            Ok(GradRow { name: case.name.to_string(), max_rel_error: report.max_rel_error })
        })
        .collect::<reactdiff::Result<Vec<_>>>()?;
    let (l_mmt, l_eps) = rayon::join(|| mmt::loss_gradcheck(seed), || diffusion::loss_gradcheck(seed));
    rows.push(GradRow { name: "L_mmt".into(), max_rel_error: l_mmt?.max_rel_error });
    rows.push(GradRow { name: "L_eps".into(), max_rel_error: l_eps?.max_rel_error });
    Ok(rows)
}

pub fn gradcheck(cfg: &RunConfig, corrupt: Option<&str>, out: Out<'_>) -> CliResult<()> {
    let corrupt = match corrupt {
        None => None,
        Some(op) => Some(*PRIMITIVES.iter().find(|p| **p == op).ok_or_else(|| {
            CliError::Usage(format!("unknown primitive `{op}`; expected one of {}", PRIMITIVES.join(", ")))
        })?),
    };
    let rows = gradcheck_rows(cfg.seed, corrupt)?;
    say(out, format!("{:<14} {:>12}  result", "graph", "rel. error"));
    for r in &rows {
        say(out, format!("{:<14} {:>12.3e}  {}", r.name, r.max_rel_error, if r.passed() { "PASS" } else { "FAIL" }));
    }
    let failed: Vec<String> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.clone()).collect();
    if failed.is_empty() {
        say(out, format!("all {} gradient checks below {GRADCHECK_TOL:e}", rows.len()));
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(failed))
    }
}
