use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "data.scale=0.25",
    "--set",
    "model.height=16",
    "--set",
    "model.width=16",
    "--set",
    "model.layers=2",
    "--set",
    "model.dim=8",
    "--set",
    "model.heads=2",
    "--set",
    "model.haf_heads=2",
    "--set",
    "model.out_dim=4",
    "--set",
    "train.epochs=1",
    "--set",
    "train.batch_size=4",
];

fn fasdg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fasdg")).args(args).output().unwrap()
}

fn small(cmd: &str, extra: &[&str]) -> Output {
    let mut args = vec![cmd];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    fasdg(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_exits_zero() {
    let o = fasdg(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("gradcheck"));
}

#[test]
fn bad_arguments_exit_two() {
    assert_eq!(fasdg(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(fasdg(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(fasdg(&["eval"]).status.code(), Some(2));
}

#[test]
fn domain_errors_exit_one_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.cfg");
    let o = fasdg(&["eval", "--config", s(&missing), "--checkpoint", "x.bin"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    let o = fasdg(&["train", "--set", "train.no_such_key=1"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    let bad = dir.path().join("bad.bin");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let o = fasdg(&["eval", "--checkpoint", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gen_data_writes_png_tree() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = small("gen-data", &["--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for domain in ["SynC", "SynI", "SynM", "SynO"] {
        for kind in ["real", "print", "replay"] {
            let d = out.join(domain).join(kind);
            let pngs = fs::read_dir(&d).unwrap().filter_map(|e| e.ok()).count();
            assert!(pngs > 0, "{}", d.display());
        }
    }
}

#[test]
fn train_eval_dump_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ckpt = d.join("m.bin");
    let o = small("train", &["--set", "protocol.targets=SynO", "--out", s(&ckpt)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let log = fs::read_to_string(d.join("m.bin.log.csv")).unwrap();
    assert!(log.starts_with("epoch,mean_loss,mean_cls,mean_tri"));

    let (report, scores) = (d.join("eval.csv"), d.join("scores.csv"));
    let o = small(
        "eval",
        &[
            "--set",
            "protocol.targets=SynO",
            "--checkpoint",
            s(&ckpt),
            "--out",
            s(&report),
            "--scores",
            s(&scores),
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = fs::read_to_string(&scores).unwrap();
    assert!(rows.lines().count() > 1);
    for line in rows.lines().skip(1) {
        let score: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&score));
    }

    let (emb, att) = (d.join("emb.csv"), d.join("att.csv"));
    let o = small(
        "dump",
        &[
            "--set",
            "protocol.targets=SynO",
            "--checkpoint",
            s(&ckpt),
            "--out",
            s(&emb),
            "--attention",
            s(&att),
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(fs::read_to_string(&emb).unwrap().lines().count() > 1);
    assert!(fs::read_to_string(&att).unwrap().lines().count() > 1);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gc.txt");
    let o = small("gradcheck", &["--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(!fs::read_to_string(&out).unwrap().is_empty());
}
