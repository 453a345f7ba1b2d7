use std::path::Path;
use std::process::{Command, Output};

fn camoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_camoe")).args(args).output().unwrap()
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

const TINY: &str = r#"
seeds = [0]
baseline = "base"

[data]
n = 12000

[simulation]
steps = 300

[[arms]]
name = "base"
grouping = "single"
expert_kind = "mlp"
masking = false
loss = { kind = "bce", optimizer = { epochs = 1, batch_size = 512 } }

[[arms]]
name = "camoe"
grouping = "modality"
loss = { optimizer = { epochs = 1, batch_size = 512 } }

[[tables]]
name = "table4"
arms = ["base", "camoe"]

[[masked_tables]]
name = "table7"
arm = "camoe"
"#;

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("exp.toml");
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn help_documents_every_subcommand_and_flag() {
    let o = camoe(&["--help"]);
    assert!(o.status.success());
    let h = text(&o);
    for sub in [
        "generate",
        "train",
        "calibrate",
        "evaluate",
        "simulate",
        "ablate",
        "pareto",
    ] {
        assert!(h.contains(sub), "{sub} missing from\n{h}");
    }
    for sub in ["generate", "train", "calibrate", "evaluate", "simulate", "ablate"] {
        let h = text(&camoe(&[sub, "--help"]));
        for flag in ["--config", "--seed", "--out"] {
            assert!(h.contains(flag), "{sub}: {flag} missing");
        }
    }
    let h = text(&camoe(&["pareto", "--help"]));
    assert!(h.contains("--reports"));
}

#[test]
fn usage_errors_exit_2() {
    let o = camoe(&["ablate", "--config", "x.toml", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("Usage"));
    assert_eq!(camoe(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(camoe(&["ablate"]).status.code(), Some(2));
}

#[test]
fn missing_or_bad_config_exits_2() {
    let o = camoe(&["ablate", "--config", "/no/such/dir/exp.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("/no/such/dir/exp.toml"));

    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "seeds = []\nbaseline = \"a\"\n[[arms]]\nname = \"a\"\ngrouping = \"single\"\n",
    );
    let o = camoe(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));

    let cfg = write_config(
        tmp.path(),
        "baseline = \"a\"\n[[arms]]\nname = \"a\"\ngrouping = \"single\"\n",
    );
    let o = camoe(&["simulate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn staged_commands_match_ablate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let staged = tmp.path().join("staged");
    let whole = tmp.path().join("whole");
    let s = staged.to_str().unwrap();

    let o = camoe(&["generate", "--config", &cfg, "--out", s, "--seed", "3"]);
    assert!(o.status.success(), "{}", text(&o));
    let csv = std::fs::read_to_string(staged.join("data.csv")).unwrap();
    assert_eq!(csv.lines().count(), 12001);

    for sub in ["train", "calibrate", "evaluate", "simulate"] {
        let o = camoe(&[sub, "--config", &cfg, "--out", s]);
        assert!(o.status.success(), "{sub}: {}", text(&o));
    }
    let o = camoe(&["ablate", "--config", &cfg, "--out", whole.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    for f in ["table4.csv", "table7.csv", "arms.json", "simulation.csv", "pareto.json"] {
        assert!(whole.join(f).exists(), "{f}");
    }
    for f in [
        "camoe/0/slot_report.json",
        "camoe/0/masked_eval.json",
        "camoe/0/sim_report.json",
        "table4.csv",
        "table7.csv",
    ] {
        assert_eq!(
            std::fs::read(staged.join(f)).unwrap(),
            std::fs::read(whole.join(f)).unwrap(),
            "{f}"
        );
    }

    let o = camoe(&[
        "pareto",
        "--reports",
        whole.to_str().unwrap(),
        "--out",
        tmp.path().join("p.json").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["front"].is_array() && v["points"].as_array().unwrap().len() == 2);
    assert_eq!(
        std::fs::read(tmp.path().join("p.json")).unwrap(),
        std::fs::read(whole.join("pareto.json")).unwrap()
    );
}

#[test]
fn failed_job_exits_1_and_others_finish() {
    let tmp = tempfile::tempdir().unwrap();
    let body = TINY.replace(
        "[[tables]]",
        "[[arms]]\nname = \"broken\"\ngrouping = \"modality\"\nmasking = false\n\n[[tables]]",
    );
    let cfg = write_config(tmp.path(), &body);
    let out = tmp.path().join("o");
    let o = camoe(&[
        "ablate",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    assert!(text(&o).contains("broken/2"));
    assert!(out.join("camoe/2/slot_report.json").exists());
    let failures: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("failures.json")).unwrap()).unwrap();
    assert_eq!(failures.as_array().unwrap().len(), 1);
}
