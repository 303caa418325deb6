use std::path::Path;
use std::process::{Command, Output};

fn ssadv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssadv"))
        .args(args)
        .env_remove("SSADV_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"
dataset = "striped-classes"
synthetic_samples = 60
image_size = 8
arch = "tiny-cnn"
width = 0.25
mode = "T3"
lambda1 = 1.0
epsilon = "2/255"
steps = 1
epochs = 2
batch_size = 20
checkpoint_every = 1
eval_steps = 2
eval_eps = [0, "2/255"]
"#;

fn write_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

#[test]
fn train_then_eval_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = dir.path().join("run");
    let run_s = run.display().to_string();
    let o = ssadv(&["--config", &cfg, "--out", &run_s, "--set", "lambda1=0.5", "train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["best.ckpt", "last.ckpt", "history.csv", "config.toml", "state.ckpt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let snap = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(snap.contains("lambda1 = 0.5"), "{snap}");

    // the snapshot alone reproduces the config
    let o = ssadv(&["--config", &run.join("config.toml").display().to_string(), "eval", "--checkpoint", &run.join("best.ckpt").display().to_string()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(run.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 2 + 2);
    assert!(report.lines().nth(2).unwrap().contains(",T3,0.5,1.0,0.0,"), "{report}");

    let sweep_out = dir.path().join("sweep").display().to_string();
    let best = run.join("best.ckpt").display().to_string();
    let last = run.join("last.ckpt").display().to_string();
    let o = ssadv(&["--config", &cfg, "--out", &sweep_out, "sweep", "--checkpoints", &best, &last]);
    assert!(o.status.success(), "{}", stderr(&o));
    let sweep = std::fs::read_to_string(dir.path().join("sweep/sweep.csv")).unwrap();
    let base_rows: Vec<&str> = sweep.lines().filter(|l| l.starts_with(&best)).collect();
    assert_eq!(base_rows.len(), 2);
    assert!(base_rows.iter().all(|l| l.ends_with(",0.00")), "{sweep}");

    let adv = dir.path().join("adv.ckpt");
    let o = ssadv(&["--config", &cfg, "--out", &sweep_out, "attack", "--checkpoint", &best, "--output", &adv.display().to_string()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let set = ssadv_core::data::ImageDataset::load(&adv).unwrap();
    assert_eq!(set.images().shape()[1..], [3, 8, 8]);
}

#[test]
fn missing_data_dir_fails_with_path() {
    let o = ssadv(&["--set", "data_root=/no/such/cifar", "--set", "arch=tiny-cnn", "train"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/no/such/cifar"), "{}", stderr(&o));
}

#[test]
fn contradictory_flags_name_both_keys() {
    let o = ssadv(&["--set", "mode=T1", "--set", "lambda1=0.5", "--set", "use_ss_loss=true", "train"]);
    assert!(!o.status.success());
    let e = stderr(&o);
    assert!(e.contains("mode") && e.contains("use_ss_loss"), "{e}");
}

#[test]
fn unknown_key_rejected() {
    let o = ssadv(&["--set", "lamda1=0.5", "train"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("lamda1"));
}

#[test]
fn corrupt_is_deterministic_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let gen = |name: &str| {
        let out = dir.path().join(name).display().to_string();
        let o = ssadv(&["--config", &cfg, "--out", &out, "--set", "corruptions=[\"gaussian_noise\"]", "--set", "severities=[2]", "corrupt"]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(dir.path().join(name).join("corruptions/gaussian_noise-2.ckpt")).unwrap()
    };
    assert_eq!(gen("a"), gen("b"));

    let o = ssadv(&["--config", &cfg, "--set", "severities=[6]", "corrupt"]);
    assert!(!o.status.success());
    let o = ssadv(&["--config", &cfg, "--set", "corruptions=[\"fog\"]", "corrupt"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("gaussian_noise"));
}

#[test]
fn corrupt_reads_cifar10c_files_when_configured() {
    use ssadv_core::data::{encode_npy, NpyData};
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let c10c = dir.path().join("c10c");
    std::fs::create_dir_all(&c10c).unwrap();
    // five severities of 4 NHWC 8x8 images
    let n = 20;
    let pixels: Vec<u8> = (0..n * 8 * 8 * 3).map(|i| (i * 7 % 256) as u8).collect();
    std::fs::write(c10c.join("fog.npy"), encode_npy(&[n, 8, 8, 3], &NpyData::U8(pixels))).unwrap();
    std::fs::write(c10c.join("labels.npy"), encode_npy(&[n], &NpyData::I64((0..n as i64).map(|i| i % 10).collect()))).unwrap();

    let run = dir.path().join("run").display().to_string();
    let o = ssadv(&["--config", &cfg, "--out", &run, "--set", "epochs=1", "train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let best = dir.path().join("run/best.ckpt").display().to_string();
    let c10c_s = format!("cifar10c_dir={:?}", c10c.display().to_string());
    let o = ssadv(&["--config", &cfg, "--out", &run, "--set", &c10c_s, "--set", "corruptions=[\"fog\"]", "--set", "severities=[2, 5]", "corrupt", "--eval", &best]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(dir.path().join("run/report.csv")).unwrap();
    assert_eq!(report.lines().filter(|l| l.contains(",fog,")).count(), 2, "{report}");
    assert!(report.lines().all(|l| !l.contains(",fog,") || l.ends_with(",4,0")), "{report}");

    let o = ssadv(&["--config", &cfg, "--out", &run, "--set", &c10c_s, "--set", "corruptions=[\"snow\"]", "corrupt", "--eval", &best]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("snow.npy"), "{}", stderr(&o));
}

#[test]
fn report_merge_dedups() {
    let dir = tempfile::tempdir().unwrap();
    let header = "#schema=ssadv-report/1\nmodel_id,norm,eps_train,mode,lambda1,lambda2,eps_test,corruption,severity,accuracy,n_samples,seed\n";
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    std::fs::write(&a, format!("{header}m,linf,0.03,T0,0,1,0,,,80.00,100,0\n")).unwrap();
    std::fs::write(&b, format!("{header}m,linf,0.03,T0,0,1,0,,,81.00,100,0\nm,linf,0.03,T0,0,1,0.01,,,50.00,100,0\n")).unwrap();
    let out = dir.path().join("m.csv");
    let o = ssadv(&["report-merge", "--output", &out.display().to_string(), &a.display().to_string(), &b.display().to_string()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.contains(",81.00,"));
}
