use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = r#"{
    "train_clips": 4, "val_clips": 1, "test_clips": 2,
    "epochs_stage1": 2, "epochs_stage2": 2, "batch_size": 4,
    "inversion_steps": 3, "probe_clips": 2, "diffusion_steps": 5,
    "alpha": 3, "l_max": 10
}"#;

struct Run {
    dir: TempDir,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.json"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn cmd(&self, args: &[&str]) -> Command {
        let mut c = Command::new(env!("CARGO_BIN_EXE_reactdiff"));
        c.current_dir(self.dir.path()).args(args).env_remove("REACTDIFF_SEED");
        c
    }

    fn exec(&self, args: &[&str]) -> Output {
        self.cmd(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.exec(args);
        assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }

    fn small(&self, args: &[&str]) -> String {
        let mut all = vec!["--config", "run.json"];
        all.extend_from_slice(args);
        self.ok(&all)
    }

    fn json(&self, rel: &str) -> Value {
        serde_json::from_slice(&std::fs::read(self.path(rel)).unwrap()).unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn synth_desk_writes_48_clips_and_manifest() {
    let run = Run::new();
    let msg = run.ok(&["synth"]);
    assert!(msg.contains("48 clips"), "{msg}");
    let all = files(&run.path("data"));
    assert_eq!(all.iter().filter(|p| p.extension().is_some_and(|e| e == "clip")).count(), 48);
    let manifest = run.json("data/manifest.json");
    assert_eq!(manifest["clips"].as_array().unwrap().len(), 48);
    assert_eq!(manifest["seed"], 0);
}

#[test]
fn synth_rerun_gives_identical_bytes() {
    let run = Run::new();
    run.ok(&["synth", "--data-dir", "a"]);
    run.ok(&["synth", "--data-dir", "b"]);
    let (a, b) = (files(&run.path("a")), files(&run.path("b")));
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn invalid_preset_is_usage_error() {
    let run = Run::new();
    let o = run.exec(&["synth", "--preset", "huge"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("huge"));
}

#[test]
fn unknown_flag_and_zero_jobs_are_usage_errors() {
    let run = Run::new();
    assert_eq!(code(&run.exec(&["synth", "--nope"])), 2);
    assert_eq!(code(&run.exec(&["--jobs", "0", "synth"])), 2);
    assert_eq!(code(&run.exec(&["train", "--stage", "3"])), 2);
    assert_eq!(code(&run.exec(&["evaluate"])), 2);
}

#[test]
fn missing_dependencies_exit_4() {
    let run = Run::new();
    let o = run.exec(&["train", "--stage", "1"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    run.small(&["synth"]);
    let o = run.exec(&["--config", "run.json", "train", "--stage", "2"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("stage-1"));
    let o = run.exec(&["--config", "run.json", "generate"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn alpha_zero_is_usage_error() {
    let run = Run::new();
    assert_eq!(code(&run.exec(&["generate", "--alpha", "0"])), 2);
    run.ok(&["synth"]);
    assert_eq!(code(&run.exec(&["evaluate", "--baseline", "b_random", "--alpha", "0"])), 2);
}

#[test]
fn seed_env_and_flag_precedence() {
    let run = Run::new();
    let o = run.cmd(&["synth", "--data-dir", "env"]).env("REACTDIFF_SEED", "7").output().unwrap();
    assert!(o.status.success());
    assert_eq!(run.json("env/manifest.json")["seed"], 7);
    let o = run.cmd(&["--seed", "9", "synth", "--data-dir", "flag"]).env("REACTDIFF_SEED", "7").output().unwrap();
    assert!(o.status.success());
    assert_eq!(run.json("flag/manifest.json")["seed"], 9);
    let o = run.cmd(&["synth"]).env("REACTDIFF_SEED", "x").output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn baseline_reports() {
    let run = Run::new();
    run.ok(&["synth"]);
    run.ok(&["evaluate", "--baseline", "b_meanfr"]);
    let r = run.json("reports/b_meanfr.json");
    for key in ["fr_div", "fr_var", "fr_dvs", "fr_corr"] {
        assert_eq!(r[key], 0.0, "{key}");
    }
    assert_eq!(r["alpha"], 10);
    assert_eq!(r["n_clips"], 8);
    assert!(r["provenance"]["config_digest"].is_string());
    assert!(run.path("reports/b_meanfr.txt").exists());
    assert!(run.path("reports/b_meanfr.csv").exists());

    let text = run.ok(&["evaluate", "--baseline", "b_random"]);
    assert!(text.contains("FRRea (proxy)"));
    let fr_var = run.json("reports/b_random.json")["fr_var"].as_f64().unwrap();
    assert!((fr_var - 1.0 / 12.0).abs() < 0.003, "{fr_var}");

    assert_eq!(code(&run.exec(&["evaluate", "--baseline", "b_nope"])), 2);
}

#[test]
fn report_json_schema() {
    let run = Run::new();
    run.ok(&["synth"]);
    run.ok(&["evaluate", "--baseline", "b_mime"]);
    let r = run.json("reports/b_mime.json");
    let numeric = ["fr_corr", "fr_dist", "fr_div", "fr_var", "fr_dvs", "fr_rea", "fr_syn"];
    for k in numeric {
        assert!(r[k].is_f64(), "{k}");
    }
    for k in ["alpha", "n_clips", "n_frames"] {
        assert!(r[k].is_u64(), "{k}");
    }
    assert_eq!(r["source"], "b_mime");
    assert_eq!(r["baseline"], "b_mime");
    assert_eq!(r["split"], "test");
    assert!(r["config"]["threshold"].is_f64());
    assert!(r["config"]["l_max"].is_u64());
    assert!(r["warnings"].is_array());
    for key in ["config_digest", "seed", "code_version"] {
        assert!(!r["provenance"][key].is_null(), "{key}");
    }
    let rows = r["clips"].as_array().unwrap();
    assert_eq!(rows.len(), 8);
    for row in rows {
        for k in ["clip_id", "appropriate", "fr_corr", "fr_dist", "fr_div", "fr_var", "fr_syn"] {
            assert!(!row[k].is_null(), "{k}");
        }
    }
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    let run = Run::new();
    let table = run.ok(&["gradcheck"]);
    assert!(table.contains("L_mmt") && table.contains("L_eps"));
    assert!(!table.contains("FAIL"));

    let o = run.exec(&["gradcheck", "--corrupt", "tanh"]);
    assert_eq!(code(&o), 5);
    assert!(stderr(&o).contains("tanh"), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).lines().any(|l| l.starts_with("tanh") && l.ends_with("FAIL")));

    assert_eq!(code(&run.exec(&["gradcheck", "--corrupt", "nope"])), 2);
}

#[test]
fn small_pipeline_end_to_end() {
    let run = Run::new();
    run.small(&["synth"]);
    let s1 = run.small(&["train", "--stage", "1"]);
    assert!(s1.contains("stage 1"));
    let trace = std::fs::read_to_string(run.path("checkpoints/stage1_loss.csv")).unwrap();
    assert!(trace.starts_with("# config_digest="));
    assert_eq!(trace.lines().count(), 2 + 2);

    let mmt_before = std::fs::read(run.path("checkpoints/mmt.ckpt")).unwrap();
    run.small(&["train", "--stage", "2"]);
    assert_eq!(std::fs::read(run.path("checkpoints/mmt.ckpt")).unwrap(), mmt_before);
    assert_eq!(std::fs::read_to_string(run.path("checkpoints/stage2_loss.csv")).unwrap().lines().nth(1), Some("epoch,probe_loss,train_loss"));

    run.small(&["generate"]);
    let index = run.json("generated/generation.json");
    let records = index["records"].as_array().unwrap();
    assert_eq!(records.len(), 3 * 2);
    assert_eq!(index["provenance"]["seed"], 0);
    let first = std::fs::read(run.path("generated").join(records[0]["path"].as_str().unwrap())).unwrap();
    let header = String::from_utf8_lossy(&first);
    assert!(header.contains("config_digest") && header.contains("code_version"));

    run.small(&["generate", "--generated-dir", "again"]);
    let again = run.json("again/generation.json");
    assert_eq!(index["records"], again["records"]);

    run.small(&["evaluate", "--generated", "generated"]);
    let r = run.json("reports/generated.json");
    assert_eq!(r["alpha"], 3);
    assert_eq!(r["n_clips"], 2);
    assert!(r["fr_div"].as_f64().unwrap() > 0.0);

    run.small(&["generate", "--alpha", "2", "--split", "val"]);
    assert_eq!(run.json("generated/generation.json")["records"].as_array().unwrap().len(), 2);
}

#[test]
fn mismatches_are_reported() {
    let run = Run::new();
    run.small(&["synth"]);
    run.small(&["train", "--stage", "1"]);
    run.small(&["train", "--stage", "2"]);
    run.small(&["generate"]);

    // A transformer retrained with another seed no longer matches the diffusion checkpoint.
    run.small(&["--seed", "5", "train", "--stage", "1", "--checkpoint-dir", "other"]);
    std::fs::copy(run.path("checkpoints/diffusion.ckpt"), run.path("other/diffusion.ckpt")).unwrap();
    let o = run.exec(&["--config", "run.json", "--checkpoint-dir", "other", "generate"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("mmt_digest"), "{}", stderr(&o));

    // Checkpoints trained on one shape cannot be used with another.
    std::fs::write(run.path("wide.json"), SMALL.replace("\"alpha\"", "\"d_latent\": 8, \"alpha\"")).unwrap();
    run.ok(&["--config", "wide.json", "synth", "--data-dir", "wide"]);
    let o = run.exec(&["--config", "wide.json", "--data-dir", "wide", "generate"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("d_latent"), "{}", stderr(&o));

    // Generated reactions with 100 frames scored against a 200-frame split.
    run.small(&["synth", "--n-frames", "200", "--data-dir", "long"]);
    let o = run.exec(&["--config", "run.json", "--data-dir", "long", "evaluate", "--generated", "generated"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    // A tampered reaction file is rejected.
    let index = run.json("generated/generation.json");
    let victim = run.path("generated").join(index["records"][0]["path"].as_str().unwrap());
    let mut bytes = std::fs::read(&victim).unwrap();
    *bytes.last_mut().unwrap() ^= 1;
    std::fs::write(&victim, bytes).unwrap();
    let o = run.exec(&["--config", "run.json", "evaluate", "--generated", "generated"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("digest"));
}

#[test]
fn outputs_do_not_depend_on_jobs() {
    let run = Run::new();
    for (jobs, tag) in [("1", "one"), ("3", "three")] {
        let dirs = [
            "--data-dir", &format!("{tag}/data"),
            "--checkpoint-dir", &format!("{tag}/ckpt"),
            "--generated-dir", &format!("{tag}/gen"),
            "--report-dir", &format!("{tag}/rep"),
        ]
        .map(String::from);
        let with = |verb: &[&str]| {
            let mut args: Vec<&str> = vec!["--jobs", jobs];
            args.extend(dirs.iter().map(String::as_str));
            args.extend_from_slice(verb);
            run.small(&args);
        };
        with(&["synth"]);
        with(&["train", "--stage", "1"]);
        with(&["train", "--stage", "2"]);
        with(&["generate"]);
        let gen = format!("{tag}/gen");
        with(&["evaluate", "--generated", &gen]);
    }
    let (a, b) = (files(&run.path("one")), files(&run.path("three")));
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
}
