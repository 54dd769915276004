use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lavit(args: &[&str]) -> Output {
    lavit_env(args, &[])
}

fn lavit_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lavit"));
    cmd.args(args).env_remove("LAVIT_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TRAIN: &[&str] = &[
    "train", "--preset", "toy", "--seed", "3", "--steps", "6", "--batch-size", "4", "--eval-every", "3", "--checkpoint-every", "3",
    "--collect", "saturation",
];

fn train_into(dir: &Path, env: &[(&str, &str)]) -> Output {
    let mut args = TRAIN.to_vec();
    args.extend(["--out", path(dir)]);
    lavit_env(&args, env)
}

#[test]
fn help_documents_every_flag() {
    let expect: &[(&str, &[&str])] = &[
        (
            "train",
            &[
                "--config", "--preset", "--train-config", "--seed", "--steps", "--warmup-steps", "--batch-size", "--dp-weight",
                "--target-accuracy", "--eval-every", "--checkpoint-every", "--out", "--collect",
            ],
        ),
        ("gradcheck", &["--seed", "--module"]),
        ("flops", &["--preset", "--config", "--image-size", "--csv"]),
        ("saturate", &["--checkpoint", "--seed", "--probe-size", "--out"]),
        ("inspect", &["--checkpoint", "--config", "--preset"]),
    ];
    for (cmd, flags) in expect {
        let o = lavit(&[cmd, "--help"]);
        assert!(o.status.success());
        let text = stdout(&o);
        for f in *flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
    assert!(stdout(&lavit(&["--help"])).contains("LAVIT_THREADS"));
}

#[test]
fn usage_errors_exit_one() {
    let o = lavit(&["flops", "--preset", "lavit-t", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(lavit(&["flops"]).status.code(), Some(1));
    assert_eq!(lavit(&["flops", "--preset", "lavit-t", "--config", "x.json"]).status.code(), Some(1));
    assert_eq!(lavit(&[]).status.code(), Some(1));
    let o = lavit(&["gradcheck", "--module", "conv3x3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("la_transform"));
}

#[test]
fn flops_reports_against_published_size() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("t.csv");
    let o = lavit(&["flops", "--preset", "lavit-t", "--image-size", "224", "--csv", path(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("9989702 params"), "{text}");
    assert!(text.contains("params (M): 9.990 vs published 10.9"), "{text}");
    assert!(text.contains("all-VA counterfactual"));
    let rows = fs::read_to_string(&csv).unwrap();
    assert!(rows.starts_with("stage,layer,kind,flops,params,paper_asymptotic\n"));
    assert!(rows.lines().any(|l| l.starts_with("3,1,LA,")));

    let o = lavit(&["flops", "--preset", "toy", "--csv", "/no/such/dir/t.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/no/such/dir"));
}

#[test]
fn gradcheck_passes_on_a_correct_build() {
    let o = lavit(&["gradcheck", "--seed", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    for name in ["matmul", "dwconv", "la_transform", "dp_loss", "la_block", "toy_model"] {
        assert!(text.lines().any(|l| l.starts_with(name) && l.ends_with("ok")), "{name}: {text}");
    }
    let o = lavit(&["gradcheck", "--module", "softmax", "--seed", "4"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 3);
}

#[test]
fn training_is_reproducible_and_thread_independent() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let a = train_into(dirs[0].path(), &[]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(stdout(&a).contains("finished after 6 steps"));
    assert!(train_into(dirs[1].path(), &[]).status.success());
    assert!(train_into(dirs[2].path(), &[("LAVIT_THREADS", "2")]).status.success());
    for file in ["metrics.jsonl", "saturation_step3.csv", "saturation_step6.csv", "checkpoint_step6.lavt", "config.json"] {
        let first = fs::read(dirs[0].path().join(file)).unwrap();
        for d in &dirs[1..] {
            assert_eq!(first, fs::read(d.path().join(file)).unwrap(), "{file}");
        }
    }
    assert_eq!(fs::read_to_string(dirs[0].path().join("metrics.jsonl")).unwrap().lines().count(), 6);

    let ckpt = dirs[0].path().join("checkpoint_step6.lavt");
    let o = lavit(&["inspect", "--checkpoint", path(&ckpt)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("stage 1: 16 tokens (4x4), D=32, H=2, layers [VA LA]"));

    let csv = dirs[0].path().join("probe.csv");
    let o = lavit(&["saturate", "--checkpoint", path(&ckpt), "--seed", "3", "--out", path(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "stage,layer,similarity,symmetry,dp_loss");
    assert_eq!(text.lines().count(), 4);
    // The trainer probes the same held-out samples at its last evaluation.
    assert_eq!(text, fs::read_to_string(dirs[0].path().join("saturation_step6.csv")).unwrap());
}

#[test]
fn bad_thread_setting_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_into(dir.path(), &[("LAVIT_THREADS", "many")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("LAVIT_THREADS"));
}

#[test]
fn input_files_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.lavt");
    let o = lavit(&["saturate", "--checkpoint", path(&missing), "--out", path(&dir.path().join("s.csv"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("cannot open"), "{}", stderr(&o));
    assert_eq!(stderr(&o).lines().count(), 1);

    let junk = dir.path().join("junk.lavt");
    fs::write(&junk, b"not a checkpoint at all").unwrap();
    let o = lavit(&["inspect", "--checkpoint", path(&junk)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));

    let cfg = dir.path().join("model.json");
    let o = lavit(&["inspect", "--preset", "toy"]);
    let text = stdout(&o);
    let json_end = text.find("\nparams:").unwrap();
    fs::write(&cfg, &text[..json_end]).unwrap();
    let o = lavit(&["flops", "--config", path(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));

    fs::write(&cfg, text[..json_end].replacen("\"patch_size\"", "\"patch\"", 1)).unwrap();
    let o = lavit(&["inspect", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("patch"), "{}", stderr(&o));

    fs::write(&cfg, "{").unwrap();
    assert_eq!(lavit(&["inspect", "--config", path(&cfg)]).status.code(), Some(1));
    let o = lavit(&["inspect", "--config", path(&dir.path().join("nope.json"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("cannot read"));

    let tc = dir.path().join("train.json");
    fs::write(&tc, r#"{"steps": 4, "warmup_steps": 1, "momentum": 0.9}"#).unwrap();
    let o = lavit(&["train", "--preset", "toy", "--train-config", path(&tc), "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("momentum"), "{}", stderr(&o));
}
