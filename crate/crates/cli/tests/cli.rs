use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

use loopfit::encoder::SpeakerEmbedding;
use loopfit::features::{read_frames, Corpus};

fn loopfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loopfit"))
        .args(args)
        .env_remove("LOOPFIT_SEED")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Small corpus matching the miniature preset: 4 speakers, 2 test
/// utterances each, 5-dimensional frames, 4 phonemes.
fn corpus(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&loopfit(&[
        "gen-data",
        "--out",
        s(&data),
        "--speakers",
        "4",
        "--seed",
        "3",
        "--utterances",
        "20",
        "--inventory",
        "4",
        "--dim",
        "5",
    ]));
    data
}

fn train(dir: &Path, data: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let cfg = dir.join("mini.txt");
    std::fs::write(&cfg, "preset = miniature\n").unwrap();
    let run = dir.join(name);
    let mut args = vec![
        "train",
        "--config",
        s(&cfg),
        "--run-dir",
        s(&run),
        "--data",
        s(data),
        "--quiet",
    ];
    args.extend_from_slice(extra);
    ok(&loopfit(&args));
    run
}

fn best(run: &Path) -> PathBuf {
    run.join("checkpoints").join("best")
}

fn sha(p: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(p).unwrap()).to_vec()
}

#[test]
fn unknown_flag_is_a_usage_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = loopfit(&["train", "--run-dir", s(&run), "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert!(!run.exists());
}

#[test]
fn bad_config_key_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    std::fs::write(&cfg, "preset = miniature\nmodel.nonsense = 3\n").unwrap();
    let out = loopfit(&[
        "train",
        "--config",
        s(&cfg),
        "--run-dir",
        s(&dir.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = corpus(&dir.path().join("a"));
    let b = corpus(&dir.path().join("b"));
    let ma = std::fs::read(a.join("manifest.tsv")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("manifest.tsv")).unwrap());
    let c = Corpus::load(&a, None).unwrap();
    assert_eq!(c.speakers().len(), 4);
    assert_eq!(c.feature_dim, 5);
    for r in &c.manifest.records {
        assert_eq!(
            sha(&c.manifest.resolve(&a, r)),
            sha(&c.manifest.resolve(&b, r))
        );
    }
}

#[test]
fn ablation_flags_are_recorded_in_the_run_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let run = train(
        dir.path(),
        &data,
        "nocycle",
        &["--no-cycle", "--no-contrast"],
    );
    let cfg = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(cfg.lines().any(|l| l == "loss.beta = 0"), "{cfg}");
    assert!(cfg.lines().any(|l| l == "loss.alpha = 0"), "{cfg}");
    assert!(run.join("losses.log").exists());
    assert!(best(&run).exists());
}

#[test]
fn fit_synthesize_and_score_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = corpus(d);
    let run = train(d, &data, "full", &[]);
    let ck = best(&run);
    let c = Corpus::load(&data, None).unwrap();
    let frames = c.manifest.resolve(&data, &c.manifest.records[0]);

    // fitting needs only frames and leaves the checkpoint untouched
    let before = sha(&ck);
    let emb = d.join("z.txt");
    ok(&loopfit(&[
        "embed",
        "--checkpoint",
        s(&ck),
        "--frames",
        s(&frames),
        "--out",
        s(&emb),
    ]));
    assert_eq!(sha(&ck), before);
    let z = SpeakerEmbedding::parse(&std::fs::read_to_string(&emb).unwrap()).unwrap();
    assert_eq!(z.dim(), 4);
    let norm = z.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-9);

    let out = d.join("out.vlf");
    ok(&loopfit(&[
        "synth",
        "--checkpoint",
        s(&ck),
        "--embedding",
        s(&emb),
        "--phonemes",
        "0,1,2",
        "--out",
        s(&out),
    ]));
    let y = read_frames(&out).unwrap();
    assert_eq!(y.dim(), 5);
    assert!(!y.is_empty() && y.len() <= 3 * 40);

    // phoneme names through a map file
    let map = d.join("names.txt");
    std::fs::write(&map, "a 0\nb 1\n").unwrap();
    ok(&loopfit(&[
        "synth",
        "--checkpoint",
        s(&ck),
        "--embedding",
        s(&emb),
        "--phonemes",
        "a,b,2",
        "--phoneme-map",
        s(&map),
        "--out",
        s(&out),
    ]));

    let missing = loopfit(&[
        "synth",
        "--checkpoint",
        s(&ck),
        "--phonemes",
        "0",
        "--out",
        s(&out),
    ]);
    assert_eq!(missing.status.code(), Some(1));
    let bad_id = loopfit(&[
        "synth",
        "--checkpoint",
        s(&ck),
        "--embedding",
        s(&emb),
        "--phonemes",
        "9",
        "--out",
        s(&out),
    ]);
    assert_eq!(bad_id.status.code(), Some(1));

    let mcd = loopfit(&[
        "eval",
        "mcd",
        "--reference",
        s(&frames),
        "--synth",
        s(&frames),
    ]);
    ok(&mcd);
    assert_eq!(String::from_utf8_lossy(&mcd.stdout).trim(), "mcd 0");

    let id = loopfit(&[
        "eval",
        "id",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ck),
        "--classifier-epochs",
        "2",
    ]);
    ok(&id);
    let text = String::from_utf8_lossy(&id.stdout);
    assert!(
        text.contains("ground_truth_top1 ") && text.contains("free_run_top1 "),
        "{text}"
    );

    let roc = d.join("roc.csv");
    let auc = loopfit(&[
        "eval",
        "auc",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ck),
        "--classifier-epochs",
        "2",
        "--roc-out",
        s(&roc),
    ]);
    ok(&auc);
    let v: f64 = String::from_utf8_lossy(&auc.stdout)
        .lines()
        .find_map(|l| l.strip_prefix("auc "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&v));
    assert!(std::fs::read_to_string(&roc)
        .unwrap()
        .starts_with("fpr,tpr\n"));

    let strat = loopfit(&[
        "eval",
        "stratify",
        "--data",
        s(&data),
        "--classifier-epochs",
        "2",
        "--threshold",
        "0",
    ]);
    ok(&strat);
    assert_eq!(String::from_utf8_lossy(&strat.stdout).lines().count(), 4);

    // priming is only for speaker-agnostic models
    let prime = loopfit(&[
        "prime-synth",
        "--checkpoint",
        s(&ck),
        "--primer",
        s(&frames),
        "--primer-phonemes",
        "0",
        "--phonemes",
        "1",
        "--primer-frames",
        "3",
        "--out",
        s(&out),
    ]);
    assert_eq!(prime.status.code(), Some(1));
}

#[test]
fn agnostic_model_primes_and_synthesizes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = corpus(d);
    let run = train(d, &data, "agn", &["--agnostic"]);
    let cfg = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(cfg.lines().any(|l| l == "model.mode = agnostic"));
    let ck = best(&run);
    let c = Corpus::load(&data, None).unwrap();
    let r = &c.manifest.records[0];
    let frames = c.manifest.resolve(&data, r);
    let ids: Vec<String> = r.phoneme_ids.iter().map(|i| i.to_string()).collect();
    let out = d.join("primed.vlf");
    ok(&loopfit(&[
        "prime-synth",
        "--checkpoint",
        s(&ck),
        "--primer",
        s(&frames),
        "--primer-phonemes",
        &ids.join(","),
        "--phonemes",
        "1,2",
        "--primer-frames",
        "4",
        "--out",
        s(&out),
    ]));
    assert_eq!(read_frames(&out).unwrap().dim(), 5);

    let too_long = loopfit(&[
        "prime-synth",
        "--checkpoint",
        s(&ck),
        "--primer",
        s(&frames),
        "--primer-phonemes",
        "0",
        "--phonemes",
        "1",
        "--primer-frames",
        "100000",
        "--out",
        s(&out),
    ]);
    assert_eq!(too_long.status.code(), Some(1));
    ok(&loopfit(&[
        "synth",
        "--checkpoint",
        s(&ck),
        "--phonemes",
        "1,2",
        "--out",
        s(&out),
    ]));
}

#[test]
fn resume_continues_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = corpus(d);
    let full = train(d, &data, "straight", &[]);
    let part = train(d, &data, "split", &["--stop-after", "1"]);
    ok(&loopfit(&[
        "train",
        "--run-dir",
        s(&part),
        "--resume",
        "--quiet",
    ]));
    assert_eq!(sha(&best(&part)), sha(&best(&full)));
    assert_eq!(
        std::fs::read(part.join("losses.log")).unwrap(),
        std::fs::read(full.join("losses.log")).unwrap()
    );
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("bad");
    std::fs::write(&ck, b"VLCKnot really").unwrap();
    let data = dir.path().join("f.vlf");
    let out = loopfit(&[
        "embed",
        "--checkpoint",
        s(&ck),
        "--frames",
        s(&data),
        "--out",
        s(&dir.path().join("z")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn grad_check_passes_on_the_miniature_and_desk_presets() {
    for preset in ["miniature", "desk"] {
        let out = loopfit(&["grad-check", "--preset", preset]);
        ok(&out);
        assert!(String::from_utf8_lossy(&out.stdout).contains("max_rel_error"));
    }
}
