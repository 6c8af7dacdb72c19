//! End-to-end acceptance run on the synthetic corpus.
//!
//! Trains the desk preset for three seeds (full objective, each ablation and
//! the speaker-agnostic model), evaluates fitting, priming and
//! identification, and checks reproducibility. Prints one PASS/FAIL line per
//! criterion and fails if any criterion fails. Takes roughly 45 minutes on
//! one core.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use loopfit::attention::{context, position_weights, AttentionParams, AttentionState};
use loopfit::benchmark::{Benchmark, BenchmarkConfig};
use loopfit::checkpoint::Checkpoint;
use loopfit::config::{Preset, RunConfig};
use loopfit::encoder::{BnMode, EncoderConfig, SpeakerEncoder};
use loopfit::evaluation::{dtw_align, verification_auc};
use loopfit::features::{
    generate_toy_corpus, Corpus, CorpusConfig, PhonemeSequence, VocoderFrameSequence,
};
use loopfit::loop_core::{buffer_push, LoopModel, MemoryBuffer, ModelConfig, SeqBatch};
use loopfit::losses::{contrastive_loss, cycle_loss, mse_loss, total_loss, CyclePass, LossWeights};
use loopfit::tape::Tape;
use loopfit::tensor::Tensor;
use loopfit::training::{
    objective_gradient_check, RunOptions, Trainer, TrainingData, BEST_CHECKPOINT, CHECKPOINT_DIR,
    LOSS_LOG,
};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn random_seq(rng: &mut ChaCha8Rng, l: usize, d: usize) -> VocoderFrameSequence {
    let v: Vec<f64> = (0..l * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    VocoderFrameSequence::from_f64(d, &v).unwrap()
}

fn brute_force_dtw(a: &VocoderFrameSequence, b: &VocoderFrameSequence) -> f64 {
    fn dist(x: &[f32], y: &[f32]) -> f64 {
        x.iter()
            .zip(y)
            .map(|(p, q)| (*p as f64 - *q as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }
    fn go(a: &VocoderFrameSequence, b: &VocoderFrameSequence, i: usize, j: usize, acc: f64) -> f64 {
        let acc = acc + dist(a.frame(i), b.frame(j));
        if i + 1 == a.len() && j + 1 == b.len() {
            return acc;
        }
        let mut best = f64::INFINITY;
        if i + 1 < a.len() && j + 1 < b.len() {
            best = best.min(go(a, b, i + 1, j + 1, acc));
        }
        if i + 1 < a.len() {
            best = best.min(go(a, b, i + 1, j, acc));
        }
        if j + 1 < b.len() {
            best = best.min(go(a, b, i, j + 1, acc));
        }
        best
    }
    go(a, b, 0, 0, 0.0)
}

fn exact_oracles() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    // buffer against a queue, newest first
    for k in [3usize, 7, 100] {
        let d = 3;
        let mut buf = MemoryBuffer::zeros(k, d);
        let mut queue: VecDeque<Vec<f64>> = (0..k).map(|_| vec![0.0; d]).collect();
        for _ in 0..1000 {
            let u: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            buf = buffer_push(&buf, &u).unwrap();
            queue.push_front(u);
            queue.pop_back();
            if (0..k).any(|i| buf.slot(i) != queue[i].as_slice()) {
                failures.push(format!("buffer k={k}"));
                break;
            }
        }
    }

    // attention weights against the mixture formula, context against E·w
    for _ in 0..100 {
        let m = rng.random_range(1..5);
        let l = rng.random_range(1..12);
        let raw: Vec<f64> = (0..3 * m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let p = AttentionParams::from_raw(&raw, m, 0.5).unwrap();
        let st = AttentionState {
            means: (0..m)
                .map(|_| rng.random_range(0.0..l as f64 + 1.0))
                .collect(),
        };
        let w = position_weights(&st, &p, l).unwrap();
        let phi: Vec<f64> = (1..=l)
            .map(|j| {
                (0..m)
                    .map(|i| {
                        let var = p.log_variances[i].exp();
                        p.priors[i] * (-(st.means[i] - j as f64).powi(2) / (2.0 * var)).exp()
                    })
                    .sum::<f64>()
            })
            .collect();
        let total: f64 = phi.iter().sum();
        if !w.fell_back
            && phi
                .iter()
                .zip(&w.weights)
                .any(|(a, b)| rel(a / total, *b) > 1e-12 && (a / total - b).abs() > 1e-300)
        {
            failures.push("attention weights".into());
            break;
        }
        let dp = 4;
        let e = Tensor::from_vec(
            &[dp, l],
            (0..dp * l).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let c = context(&w.weights, &e).unwrap();
        for (r, cr) in c.iter().enumerate() {
            let want: f64 = (0..l).map(|j| e.data()[r * l + j] * w.weights[j]).sum();
            if rel(*cr, want) > 1e-12 && (cr - want).abs() > 1e-15 {
                failures.push("context".into());
            }
        }
    }

    // reconstruction loss
    let a: Vec<f64> = (0..5 * 7).map(|_| rng.random_range(-3.0..3.0)).collect();
    let b: Vec<f64> = (0..5 * 7).map(|_| rng.random_range(-3.0..3.0)).collect();
    let want: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 7.0;
    let got = mse_loss(&Tensor::from_vec(&[5, 7], a), &Tensor::from_vec(&[5, 7], b)).unwrap();
    if rel(got, want) > 1e-12 {
        failures.push("mse".into());
    }

    // contrastive loss, including the all-equal case
    let z = [0.6, 0.8];
    if contrastive_loss(&z, &z, &z, 1.0) != 0.5 {
        failures.push("contrastive equal-embedding case".into());
    }
    for _ in 0..50 {
        let v: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let d12: f64 = v[0].iter().zip(&v[1]).map(|(x, y)| (x - y).powi(2)).sum();
        let d23: f64 = v[1]
            .iter()
            .zip(&v[2])
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let want = 0.5 * (d12 + (2.0 - d23).max(0.0).powi(2));
        if rel(contrastive_loss(&v[0], &v[1], &v[2], 2.0), want) > 1e-12 {
            failures.push("contrastive".into());
            break;
        }
    }

    // cycle loss against separately computed embeddings
    let model = LoopModel::new(ModelConfig::miniature(), 1).unwrap();
    let enc = SpeakerEncoder::new(EncoderConfig::miniature(), 2).unwrap();
    let y = random_seq(&mut rng, 6, 5);
    let s = PhonemeSequence::new(vec![0, 2, 1], 4).unwrap();
    let got = cycle_loss(&model, &enc, &y, &s, CyclePass::TeacherForced).unwrap();
    let zy = enc.embed(&y).unwrap();
    let batch = SeqBatch::new(vec![s.ids().to_vec()], &[&y]).unwrap();
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let zv = tape.leaf(Tensor::from_vec(&[1, 4], zy.as_slice().to_vec()));
    let o = model.teacher_forced_tape(&mut tape, &bound, &batch, Some(zv));
    let mut etape = Tape::new();
    let eb = enc.params.bind(&mut etape);
    let ov = etape.leaf(tape.value(o).clone());
    let eo = enc.forward_tape(&mut etape, &eb, ov, &[6], BnMode::Eval);
    let want: f64 = zy
        .as_slice()
        .iter()
        .zip(etape.value(eo.z).data())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    if rel(got, want) > 1e-12 {
        failures.push("cycle".into());
    }

    // weighted total
    let w = LossWeights::default();
    let (m, c, y) = (1.25, 0.375, 0.0625);
    if rel(
        total_loss(m, c, y, &w).unwrap().total,
        m + 10.0 * c + 10.0 * y,
    ) > 1e-12
    {
        failures.push("total".into());
    }

    // DTW against exhaustive enumeration
    for _ in 0..200 {
        let (la, lb) = (rng.random_range(1..=10), rng.random_range(1..=10));
        let a = random_seq(&mut rng, la, 3);
        let b = random_seq(&mut rng, lb, 3);
        if dtw_align(&a, &b).unwrap().cost != brute_force_dtw(&a, &b) {
            failures.push(format!("dtw {la}x{lb}"));
            break;
        }
    }

    // AUC against the rank-sum count
    for _ in 0..100 {
        let same: Vec<f64> = (0..rng.random_range(1..20))
            .map(|_| rng.random_range(0..10) as f64)
            .collect();
        let notsame: Vec<f64> = (0..rng.random_range(1..20))
            .map(|_| rng.random_range(0..10) as f64)
            .collect();
        let mut count = 0.0;
        for a in &same {
            for b in &notsame {
                count += if a < b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let want = count / (same.len() * notsame.len()) as f64;
        if rel(verification_auc(&same, &notsame).unwrap().auc, want) > 1e-12 {
            failures.push("auc".into());
            break;
        }
    }

    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(60) {
        failures.push(format!("runtime {elapsed:?}"));
    }
    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            format!("all oracles exact in {:.1}s", elapsed.as_secs_f64())
        } else {
            format!("mismatches: {}", failures.join(", "))
        },
    }
}

fn gradient_verification() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::preset(Preset::Miniature);
    let ck = Checkpoint::fresh(cfg).unwrap();
    let r =
        objective_gradient_check(&ck.model, &ck.encoder, &ck.config.weights, 3, 1e-5, 5).unwrap();
    let elapsed = start.elapsed();
    Outcome {
        pass: r.max_rel_error < 1e-4 && elapsed < Duration::from_secs(300),
        detail: format!(
            "max relative error {:.2e} over {} probes ({} rechecked at a kink) in {:.1}s",
            r.max_rel_error,
            r.probes,
            r.kinked,
            elapsed.as_secs_f64()
        ),
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Variant {
    Full,
    NoCycle,
    NoContrast,
    Agnostic,
}

fn variant_config(seed: u64, data: &Path, v: Variant) -> RunConfig {
    let mut c = RunConfig::preset(Preset::Desk);
    c.seed = seed;
    c.data_dir = Some(data.to_path_buf());
    match v {
        Variant::Full => {}
        Variant::NoCycle => c.set("loss.beta", "0").unwrap(),
        Variant::NoContrast => c.set("loss.alpha", "0").unwrap(),
        Variant::Agnostic => c.set("model.mode", "agnostic").unwrap(),
    }
    c
}

struct TrainedRun {
    checkpoint: Checkpoint,
    initial_val: f64,
    final_val: f64,
    finished: bool,
    elapsed: Duration,
    best_path: PathBuf,
}

fn train(corpus: &Corpus, config: RunConfig, run_dir: &Path) -> TrainedRun {
    let start = Instant::now();
    let mut t = Trainer::new(config, corpus).unwrap().with_run_dir(run_dir);
    let s = t.run(&RunOptions::default()).unwrap();
    let best_path = run_dir.join(CHECKPOINT_DIR).join(BEST_CHECKPOINT);
    TrainedRun {
        checkpoint: Checkpoint::load(&best_path).unwrap(),
        initial_val: s.initial_val,
        final_val: s.final_val,
        finished: s.finished,
        elapsed: start.elapsed(),
        best_path,
    }
}

struct SeedResults {
    full: TrainedRun,
    gt_accuracy: f64,
    free_run_accuracy: f64,
    auc_full: f64,
    auc_no_cycle: f64,
    auc_no_contrast: f64,
    auc_priming: f64,
    continuous: bool,
    fitting_mutated: bool,
}

fn run_seed(seed: u64, bench: &Benchmark, data: &Path, root: &Path) -> SeedResults {
    let corpus = bench.corpus;
    let run = |v: Variant, name: &str| {
        train(
            corpus,
            variant_config(seed, data, v),
            &root.join(format!("{name}_{seed}")),
        )
    };
    let full = run(Variant::Full, "full");
    let no_cycle = run(Variant::NoCycle, "no_cycle");
    let no_contrast = run(Variant::NoContrast, "no_contrast");
    let agnostic = run(Variant::Agnostic, "agnostic");

    let split = TrainingData::new(corpus, &full.checkpoint.config).unwrap();
    let (train_spk, held_out) = (
        split.train_speakers.clone(),
        split.held_out_speakers.clone(),
    );

    let before = full.checkpoint.to_bytes();
    let fit = |r: &TrainedRun| {
        bench
            .fitting_verification(&r.checkpoint.model, &r.checkpoint.encoder, &held_out)
            .unwrap()
            .auc
    };
    let auc_full = fit(&full);
    let fitting_mutated = full.checkpoint.to_bytes() != before;
    let (priming, continuous) = bench
        .priming_verification(&agnostic.checkpoint.model, &held_out)
        .unwrap();
    let r = SeedResults {
        gt_accuracy: bench.ground_truth_accuracy().unwrap(),
        free_run_accuracy: bench
            .free_run_accuracy(&full.checkpoint.model, &full.checkpoint.encoder, &train_spk)
            .unwrap(),
        auc_full,
        auc_no_cycle: fit(&no_cycle),
        auc_no_contrast: fit(&no_contrast),
        auc_priming: priming.auc,
        continuous,
        fitting_mutated,
        full,
    };
    println!(
        "seed {seed}: val {:.3} -> {:.3} in {:.0}s; id gt {:.3} free-run {:.3}; auc full {:.3} no-cycle {:.3} no-contrast {:.3} priming {:.3}",
        r.full.initial_val,
        r.full.final_val,
        r.full.elapsed.as_secs_f64(),
        r.gt_accuracy,
        r.free_run_accuracy,
        r.auc_full,
        r.auc_no_cycle,
        r.auc_no_contrast,
        r.auc_priming
    );
    r
}

fn sha256(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

fn reproducibility(corpus: &Corpus, data: &Path, root: &Path, trained: &Path) -> Outcome {
    let mut failures = Vec::new();
    let dirs = [root.join("repro_a"), root.join("repro_b")];
    for d in &dirs {
        let cfg = variant_config(7, data, Variant::Full);
        let mut t = Trainer::new(cfg, corpus).unwrap().with_run_dir(d);
        t.run(&RunOptions {
            stop_after_epochs: Some(2),
            verbose: false,
        })
        .unwrap();
    }
    for f in [
        PathBuf::from(LOSS_LOG),
        Path::new(CHECKPOINT_DIR).join("epoch_1"),
        Path::new(CHECKPOINT_DIR).join("epoch_2"),
        Path::new(CHECKPOINT_DIR).join(BEST_CHECKPOINT),
    ] {
        let (a, b) = (
            std::fs::read(dirs[0].join(&f)).unwrap(),
            std::fs::read(dirs[1].join(&f)).unwrap(),
        );
        if a != b {
            failures.push(format!("{} differs", f.display()));
        }
    }

    let frames = corpus.manifest.resolve(data, &corpus.manifest.records[0]);
    let before = sha256(trained);
    let out = root.join("embedding.txt");
    let status = Command::new(env!("CARGO_BIN_EXE_loopfit"))
        .args(["embed", "--checkpoint"])
        .arg(trained)
        .arg("--frames")
        .arg(&frames)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    if !status.success() {
        failures.push(format!("embed exited with {status}"));
    }
    if sha256(trained) != before {
        failures.push("embed changed the checkpoint".into());
    }
    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            "identical logs and checkpoints across two runs; embed leaves the checkpoint hash unchanged".into()
        } else {
            failures.join(", ")
        },
    }
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("corpus");
    generate_toy_corpus(&CorpusConfig::desk(), &data).unwrap();
    let corpus = Corpus::load(&data, Some(ModelConfig::desk().phoneme_inventory)).unwrap();

    let mut outcomes: Vec<(usize, &str, Outcome)> = Vec::new();
    outcomes.push((1, "exact oracles", exact_oracles()));
    outcomes.push((2, "gradient verification", gradient_verification()));

    // one identification network, trained once, scores every run
    let bench = Benchmark::new(
        &corpus,
        RunConfig::preset(Preset::Desk).encoder_config(),
        BenchmarkConfig::default(),
    )
    .unwrap();
    let results: Vec<SeedResults> = SEEDS
        .iter()
        .map(|&s| run_seed(s, &bench, &data, tmp.path()))
        .collect();
    let col = |f: &dyn Fn(&SeedResults) -> f64| -> Vec<f64> { results.iter().map(f).collect() };

    let ratios = col(&|r| r.full.final_val / r.full.initial_val);
    let train_time: Duration = results.iter().map(|r| r.full.elapsed).sum();
    let finished = results.iter().all(|r| r.full.finished);
    outcomes.push((
        3,
        "desk-scale training",
        Outcome {
            pass: finished && median(&ratios) <= 0.5 && train_time <= Duration::from_secs(30 * 60),
            detail: format!(
                "median final/initial validation MSE {:.3} (per seed {ratios:.3?}), schedules finished: {finished}, {:.1} min for 3 seeds",
                median(&ratios),
                train_time.as_secs_f64() / 60.0
            ),
        },
    ));

    let gt = median(&col(&|r| r.gt_accuracy));
    let fr = median(&col(&|r| r.free_run_accuracy));
    outcomes.push((
        4,
        "trained-voice identifiability",
        Outcome {
            pass: gt >= 0.95 && fr >= 0.90,
            detail: format!("median top-1 ground truth {gt:.3}, free-run {fr:.3}"),
        },
    ));

    let full = median(&col(&|r| r.auc_full));
    let mutated = results.iter().any(|r| r.fitting_mutated);
    outcomes.push((
        5,
        "feed-forward fitting",
        Outcome {
            pass: full >= 0.8 && !mutated,
            detail: format!(
                "median held-out AUC {full:.3} (per seed {:.3?}), parameters untouched: {}",
                col(&|r| r.auc_full),
                !mutated
            ),
        },
    ));

    let no_cycle = median(&col(&|r| r.auc_no_cycle));
    let no_contrast = median(&col(&|r| r.auc_no_contrast));
    outcomes.push((
        6,
        "ablation trends",
        Outcome {
            pass: full >= no_cycle && full >= no_contrast + 0.05,
            detail: format!(
                "median AUC full {full:.3}, no cycle {no_cycle:.3}, no contrast {no_contrast:.3}"
            ),
        },
    ));

    let priming = median(&col(&|r| r.auc_priming));
    let continuous = results.iter().all(|r| r.continuous);
    outcomes.push((
        7,
        "priming",
        Outcome {
            pass: priming > 0.5 && priming < full && continuous,
            detail: format!("median AUC priming {priming:.3} vs encoder {full:.3}, buffer continuity: {continuous}"),
        },
    ));

    outcomes.push((
        8,
        "reproducibility",
        reproducibility(&corpus, &data, tmp.path(), &results[0].full.best_path),
    ));

    for (n, name, o) in &outcomes {
        println!(
            "criterion {n} {} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.2.pass).map(|o| o.0).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
