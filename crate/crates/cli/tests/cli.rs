use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
world.n_backbone = 8
world.n_edit = 8
world.n_video = 8
world.n_fdd = 4
world.n_eval = 3
model.c1 = 8
model.c2 = 16
model.emb = 16
model.groups = 4
model.instr_dim = 4
schedule.steps = 16
teacher.backbone_iters = 2
teacher.edit_iters = 2
teacher.video_iters = 2
teacher.batch = 4
teacher.heldout = 2
fdd.warmup_iters = 2
fdd.adversarial_iters = 1
fdd.batch = 2
fdd.teacher_steps = 2
eval.first_steps = 2
eval.ppm_items = 1
";

fn fddlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fddlab"))
        .args(args)
        .arg("--out")
        .arg(dir.join("run"))
        .env("RUST_LOG", "warn")
        .current_dir(dir)
        .output()
        .unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn tiny(dir: &Path) -> String {
    let p = dir.join("tiny.conf");
    std::fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn missing_artifact_exits_2_with_path() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(d.path());
    let o = fddlab(d.path(), &["--config", &cfg, "train-edit"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains(&d.path().join("run").join("data").display().to_string()));
    let o = fddlab(d.path(), &["compare", "nope_a.csv", "nope_b.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("nope_a.csv"));
}

#[test]
fn config_error_exits_3_with_line() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("bad.conf");
    std::fs::write(&p, "seed = 1\n\nfdd.k = lots\n").unwrap();
    let o = fddlab(d.path(), &["--config", p.to_str().unwrap(), "gen-data"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(text(&o).contains("line 3"), "{}", text(&o));
    std::fs::write(&p, "no_such.key = 1\n").unwrap();
    let o = fddlab(d.path(), &["--config", p.to_str().unwrap(), "show-config"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn divergence_exits_4() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("hot.conf");
    std::fs::write(&p, format!("{TINY}teacher.lr = 1e30\nteacher.backbone_iters = 20\n")).unwrap();
    let cfg = p.to_str().unwrap();
    assert!(fddlab(d.path(), &["--config", cfg, "gen-data"]).status.success());
    let o = fddlab(d.path(), &["--config", cfg, "pretrain-backbone"]);
    assert_eq!(o.status.code(), Some(4), "{}", text(&o));
}

#[test]
fn seed_flag_overrides_config() {
    let d = tempfile::tempdir().unwrap();
    let o = fddlab(d.path(), &["--seed", "42", "show-config"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).lines().any(|l| l == "seed = 42"));
}

#[test]
fn selftest_prints_pass_lines() {
    let d = tempfile::tempdir().unwrap();
    let o = fddlab(d.path(), &["selftest", "--cases", "3"]);
    assert!(o.status.success(), "{}", text(&o));
    let out = String::from_utf8_lossy(&o.stdout).into_owned();
    for needle in ["PASS zero-init", "PASS gradcheck", "PASS schedule", "PASS hinge"] {
        assert!(out.contains(needle), "missing {needle}:\n{out}");
    }
    assert!(!out.contains("FAIL"));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(d.path());
    let run = d.path().join("run");
    for stage in ["gen-data", "pretrain-backbone", "train-edit", "train-video"] {
        let o = fddlab(d.path(), &["--config", &cfg, stage]);
        assert!(o.status.success(), "{stage}: {}", text(&o));
    }

    let o = fddlab(d.path(), &["--config", &cfg, "ablate", "no_alignment"]);
    assert!(o.status.success(), "{}", text(&o));
    let timing = std::fs::read_to_string(run.join("fdd/no_alignment/timing.txt")).unwrap();
    assert!(timing.contains("iterations = 0"));
    let secs: f64 = timing.lines().find_map(|l| l.strip_prefix("seconds = ")).unwrap().parse().unwrap();
    assert!(secs < 0.01, "{secs}");
    assert!(run.join("eval/no_alignment/report.csv").exists());

    let o = fddlab(d.path(), &["--config", &cfg, "fdd-align"]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(std::fs::read_to_string(run.join("fdd/full/fdd.csv")).unwrap().lines().count() == 4);
    let o = fddlab(d.path(), &["--config", &cfg, "evaluate", "--label", "full"]);
    assert!(o.status.success(), "{}", text(&o));
    let first = std::fs::read_to_string(run.join("eval/full/report.csv")).unwrap();
    fddlab(d.path(), &["--config", &cfg, "evaluate", "--label", "full"]);
    assert_eq!(std::fs::read_to_string(run.join("eval/full/report.csv")).unwrap(), first);

    let a = run.join("eval/no_alignment/report.csv");
    let b = run.join("eval/full/report.csv");
    let table = d.path().join("cmp.csv");
    let o = fddlab(d.path(), &["compare", a.to_str().unwrap(), b.to_str().unwrap(), "--output", table.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(std::fs::read_to_string(&table).unwrap().contains("edit_fidelity_db"));

    let video = run.join("data/eval/eval00000_input.fdt");
    let o = fddlab(
        d.path(),
        &["--config", &cfg, "sample", "--video", video.to_str().unwrap(), "--instruction", "local blue", "--caption", "circle blue bg_red solid still", "--label", "full"],
    );
    assert!(o.status.success(), "{}", text(&o));
    for f in 0..4 {
        assert!(run.join(format!("sample/full/frame_{f:03}.ppm")).exists());
    }
}
