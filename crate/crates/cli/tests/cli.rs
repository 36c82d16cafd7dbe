use std::path::Path;
use std::process::{Command, Output};

fn blockpool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blockpool"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn check_mask_passes() {
    let o = blockpool(&["check", "mask"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.lines().count() >= 2 && out.lines().all(|l| l.starts_with("PASS\t")), "{out}");
}

#[test]
fn bleu_of_identical_files_is_100() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "h.txt", "the dog sleeps .\na fox ran home\n");
    let o = blockpool(&["evaluate", "bleu", "--hyp", &f, "--ref", &f]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).lines().nth(1).unwrap().starts_with("100.00\t"), "{}", stdout(&o));
}

#[test]
fn ablation_prints_signed_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "r.tsv", "fixed\t10\nbuffered_fixed\t12.5\nwdd\t11\nsdd\t13\n");
    let o = blockpool(&["evaluate", "ablation", "--results", &f]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("position\t+2.50") && out.contains("length\t+2.00") && out.contains("morpheme\t+0.50"), "{out}");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(blockpool(&["check", "mask", "--bogus"]).status.code(), Some(2));
    assert_eq!(blockpool(&["segment", "--method", "nope", "--input", "x"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "a.conf", "run.seed = 1\nmodel.colour = blue\n");
    let o = blockpool(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("a.conf:2: unknown key"));

    let cfg = write(dir.path(), "b.conf", "run.out = x\n");
    assert_eq!(blockpool(&["train", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn data_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let h = write(dir.path(), "h.txt", "a\nb\n");
    let r = write(dir.path(), "r.txt", "a\n");
    assert_eq!(blockpool(&["evaluate", "bleu", "--hyp", &h, "--ref", &r]).status.code(), Some(1));
    let missing = dir.path().join("nope.txt").display().to_string();
    assert_eq!(blockpool(&["evaluate", "bleu", "--hyp", &missing, "--ref", &r]).status.code(), Some(1));
}

#[test]
fn bad_thread_setting_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_blockpool"))
        .args(["check", "mask"])
        .env("BLOCKPOOL_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn segment_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "in.txt", "the dog sleeps\nthe  fox\n");
    let o = blockpool(&["segment", "--method", "wdd", "--input", &input]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "3\t4\t7\n3\t4\n");
    let o = blockpool(&["segment", "report", "--method", "buffixed", "--k", "4", "--input", &input]);
    assert_eq!(o.status.code(), Some(0));
    let o = blockpool(&["segment", "--method", "sdd", "--input", &input]);
    assert_eq!(o.status.code(), Some(2), "sdd without a vocabulary");
}

#[test]
fn tiny_train_translate_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let src = write(d, "s.txt", "the dog\na fox\n");
    let tgt = write(d, "t.txt", "eThay ogday\naway oxfay\n");
    let out = d.join("run").display().to_string();
    let cfg = write(
        d,
        "run.conf",
        &format!(
            "run.seed = 3\nrun.out = {out}\nrun.variant = fixed\ndata.train_src = {src}\ndata.train_tgt = {tgt}\n\
             train.batch_size = 2\ntrain.warmup_steps = 1\ntrain.max_steps = 3\ntrain.eval_metric = loss\n"
        ),
    );
    let o = blockpool(&["train", "--config", &cfg, "--override", "train.lr=1e-3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let resolved = std::fs::read_to_string(d.join("run/config.resolved")).unwrap();
    assert!(resolved.contains("train.lr = 1e-3") && resolved.contains("run.seed = 3"));
    let metrics = std::fs::read_to_string(d.join("run/metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().filter(|l| l.contains("\ttrain\tloss\t")).count(), 3);

    let ckpt = d.join("run/checkpoint").display().to_string();
    let hyp = d.join("hyp.txt").display().to_string();
    let o = blockpool(&["translate", "--ckpt", &ckpt, "--input", &src, "--out", &hyp, "--max-blocks", "8"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&hyp).unwrap().lines().count(), 2);
}
