use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stripflow::flowio::{generate_sample, read_flo, GeneratorSpec};

fn stripflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stripflow"))
        .args(args)
        .env("STRIPFLOW_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn out(dir: &Path) -> String {
    dir.display().to_string()
}

/// A tiny, fast model shared by the checkpoint-consuming tests.
const SMALL: &[&str] = &[
    "--channels", "8", "--cprime", "4", "--set", "context-channels=8", "--set", "motion-corr=8",
    "--set", "motion-flow=4", "--set", "motion-out=8", "--radius", "1", "--eval-samples", "3",
    "--set", "height=32", "--set", "width=32", "--set", "max-disp=4",
];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    SMALL.iter().copied().chain(args.iter().copied()).collect()
}

fn train_small(dir: &Path) -> PathBuf {
    let d = out(dir);
    let o = stripflow(&with_small(&["--outdir", &d, "--steps", "2", "--batch", "1", "--m", "2", "train"]));
    assert!(o.status.success(), "{}", text(&o.stderr));
    dir.join("checkpoint.bin")
}

fn save_png(t: &stripflow::Tensor, path: &Path) {
    let (h, w) = (t.dim(1), t.dim(2));
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (t.get(&[c, y as usize, x as usize]) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path).unwrap();
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = stripflow(&["--bogus", "train"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = stripflow(&["--outdir", &out(dir.path()), "--gamma", "1.5", "train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("gamma"), "{}", text(&o.stderr));
    let o = stripflow(&["--outdir", &out(dir.path()), "--init-mode", "sideways", "train"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unwritable_outdir_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    std::fs::write(&file, b"x").unwrap();
    let o = stripflow(&["--outdir", &out(&file.join("sub")), "--steps", "1", "train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("occupied"), "{}", text(&o.stderr));
}

#[test]
fn flags_override_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# experiment\nlr = 0.5\nsteps = 7\ninit_mode = zeros\n").unwrap();
    let o = stripflow(&[
        "--config", &out(&cfg), "--outdir", &out(dir.path()), "--steps", "9", "eval", "--oracle-predictor",
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let resolved = std::fs::read_to_string(dir.path().join("config.resolved")).unwrap();
    assert!(resolved.contains("lr = 0.5\n"));
    assert!(resolved.contains("steps = 9\n"));
    assert!(resolved.contains("init-mode = zeros\n"));
    assert!(resolved.contains("m = 12\n"), "refinement iterations default to 12");
}

#[test]
fn oracle_predictor_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = stripflow(&["--outdir", &out(dir.path()), "--eval-samples", "5", "eval", "--oracle-predictor"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let line = text(&o.stdout);
    assert!(line.starts_with("epe=0.000000 f1_all=0.000000"), "{line}");
    let csv = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert!(csv.starts_with("sample_id,epe,f1_all\n"));
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn eval_is_reproducible_and_iterations_selectable() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_small(dir.path());
    let c = out(&ckpt);
    let mut lines = Vec::new();
    for m in ["24", "32", "24"] {
        let sub = dir.path().join(format!("eval{}", lines.len()));
        let o = stripflow(&with_small(&["--outdir", &out(&sub), "--m", m, "eval", "--checkpoint", &c]));
        assert!(o.status.success(), "{}", text(&o.stderr));
        let line = text(&o.stdout);
        assert!(line.contains(&format!("m={m}")), "{line}");
        lines.push((line, std::fs::read(sub.join("eval.csv")).unwrap()));
    }
    assert_eq!(lines[0], lines[2]);
}

#[test]
fn checkpoint_must_match_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_small(dir.path());
    let o = stripflow(&[
        "--outdir", &out(&dir.path().join("e")), "--channels", "16", "--eval-samples", "2", "eval", "--checkpoint",
        &out(&ckpt),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let missing = dir.path().join("nope.bin");
    let o = stripflow(&["--outdir", &out(&dir.path().join("e")), "eval", "--checkpoint", &out(&missing)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("nope.bin"));
}

#[test]
fn both_init_modes_train_and_are_labelled() {
    for mode in ["zeros", "cri-soft-argmax", "cri-paper-literal", "flow-head"] {
        let dir = tempfile::tempdir().unwrap();
        let o = stripflow(&with_small(&[
            "--outdir", &out(dir.path()), "--steps", "1", "--batch", "1", "--m", "1", "--init-mode", mode, "train",
        ]));
        assert!(o.status.success(), "{mode}: {}", text(&o.stderr));
        assert!(text(&o.stdout).contains(&format!("init_mode={mode}")), "{}", text(&o.stdout));
        let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert!(log.starts_with("step,loss,epe_eval\n"), "{log}");
    }
}

#[test]
fn infer_writes_flow_and_picture() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_small(dir.path());
    let spec = GeneratorSpec {
        height: 32,
        width: 32,
        max_disp: 4.0,
        ..GeneratorSpec::default()
    };
    let s = generate_sample(&spec, 3).unwrap();
    let (p1, p2) = (dir.path().join("a.png"), dir.path().join("b.png"));
    save_png(&s.pair.i1, &p1);
    save_png(&s.pair.i2, &p2);
    let o = stripflow(&with_small(&[
        "--outdir", &out(&dir.path().join("pred")), "--m", "2", "infer", "--checkpoint", &out(&ckpt), &out(&p1),
        &out(&p2),
    ]));
    assert!(o.status.success(), "{}", text(&o.stderr));
    let flow = read_flo(dir.path().join("pred/pred.flo")).unwrap();
    assert_eq!((flow.height(), flow.width()), (32, 32));
    let ppm = std::fs::read(dir.path().join("pred/pred.ppm")).unwrap();
    let header = String::from_utf8_lossy(&ppm[..ppm.len() - 32 * 32 * 3]).into_owned();
    assert_eq!(header.split_whitespace().collect::<Vec<_>>(), ["P6", "32", "32", "255"]);
}

#[test]
fn infer_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_small(dir.path());
    let s = generate_sample(&GeneratorSpec::default(), 0).unwrap();
    let big = dir.path().join("big.png");
    save_png(&s.pair.i1, &big);
    let small = dir.path().join("small.png");
    let crop = stripflow::Tensor::from_fn([3, 40, 36], |i| s.pair.i1.data()[i]).unwrap();
    save_png(&crop, &small);

    let o = stripflow(&with_small(&["--outdir", &out(dir.path()), "infer", "--checkpoint", &out(&ckpt), &out(&big), &out(&small)]));
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("crop both to 40x36"), "{}", text(&o.stderr));

    let absent = dir.path().join("absent.png");
    let o = stripflow(&with_small(&["--outdir", &out(dir.path()), "infer", "--checkpoint", &out(&ckpt), &out(&big), &out(&absent)]));
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("absent.png"), "{}", text(&o.stderr));

    let odd = dir.path().join("odd.png");
    save_png(&stripflow::Tensor::from_fn([3, 30, 30], |i| s.pair.i1.data()[i]).unwrap(), &odd);
    let o = stripflow(&with_small(&["--outdir", &out(dir.path()), "infer", "--checkpoint", &out(&ckpt), &out(&odd), &out(&odd)]));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_catches_an_injected_sign_flip() {
    let dir = tempfile::tempdir().unwrap();
    let o = stripflow(&["--outdir", &out(dir.path()), "gradcheck", "--inject-sign-flip"]);
    assert_eq!(o.status.code(), Some(1));
    let table = text(&o.stdout);
    assert!(table.lines().any(|l| l.starts_with("softmax_sign_flipped") && l.ends_with("FAIL")), "{table}");
    assert!(text(&o.stderr).contains("softmax_sign_flipped"));
}

#[test]
fn bench_guard_skips_oversized_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = stripflow(&["--outdir", &out(dir.path()), "bench", "--sizes", "4,8,64", "--memory-limit", "100000"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "H,W,allpair_elems,strip_elems,ratio,allpair_ms,strip_ms,peak_bytes");
    assert!(rows[1].starts_with("4,4,256,128,2,"));
    assert!(rows[3].starts_with("64,64,16777216,524288,32,skipped,skipped,"), "{}", rows[3]);
    let o = stripflow(&["--outdir", &out(dir.path()), "bench", "--runs", "3"]);
    assert_eq!(o.status.code(), Some(2));
}
