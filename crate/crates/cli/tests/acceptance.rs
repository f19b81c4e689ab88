//! Go/no-go acceptance checks, one test per criterion. Each pins its
//! tolerances as constants and prints a single PASS line with the measured
//! numbers (visible under `--nocapture`).

mod common;

use std::fs;
use std::time::{Duration, Instant};

use divatt::autodiff::{Tape, Tensor, ValueId};
use divatt::config::Scoring;
use divatt::error::Error;
use divatt::model::{self, ModelConfig, ModelParams};
use divatt::{checks, corpus, losses, rng, synth, trainer, tritrain, HyperParams};
use rand::Rng;

use common::{divatt, run, stderr_of, train_args, write_data};

/// Max relative error of analytic vs central-difference gradients.
const GRAD_TOL: f64 = 1e-4;
/// Vectorized losses vs explicit-loop brute force.
const ORACLE_TOL: f64 = 1e-10;
/// Pseudo-label confidence threshold under test.
const TAU: f64 = 0.7;
/// The diversity-constrained model may trail the unconstrained one on
/// target accuracy by at most one percentage point.
const ACC_SLACK: f64 = 0.01;

#[test]
fn c1_gradient_suite_matches_finite_differences() {
    let t0 = Instant::now();
    let reports = checks::run_gradcheck_suite(0).expect("gradcheck suite");
    let failures: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| r.to_string()).collect();
    assert!(failures.is_empty(), "gradient checks failed:\n{}", failures.join("\n"));
    // primitives, every loss, and the full model objective are all covered
    for name in [
        "matmul/left",
        "bce",
        "context_mix/states",
        "diversity_loss/head0",
        "cross_orthogonality_loss/stack1",
        "tri_diversity_loss",
        "total_loss/attention",
        "joint_loss/yhat1",
        "model/additive/enc_fw.wx",
        "model/dot_product/att.query",
        "model/trained_embeddings/embedding",
    ] {
        assert!(reports.iter().any(|r| r.name == name), "missing check {name}");
    }
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    assert!(worst <= GRAD_TOL, "worst rel err {worst:.3e} above {GRAD_TOL:.0e}");
    let elapsed = t0.elapsed();
    assert!(elapsed < Duration::from_secs(60), "suite took {elapsed:?}");
    println!(
        "PASS gradients: {} checks, worst rel err {worst:.2e} <= {GRAD_TOL:.0e}, {elapsed:?}",
        reports.len()
    );
}

/// `stack[h]` is one head's batch of attention rows.
fn brute_diversity(stack: &[Tensor]) -> f64 {
    let t_y = stack.len();
    if t_y <= 2 {
        return 0.0;
    }
    let k = ((t_y - 2) * (t_y - 1) / 2) as f64;
    let (b, t) = stack[0].shape();
    let mut mean = 0.0;
    for bi in 0..b {
        let mut per_example = 0.0;
        for i in 0..t_y - 1 {
            for j in i + 1..t_y - 1 {
                let mut dot = 0.0;
                for p in 0..t {
                    dot += stack[i].get(bi, p) * stack[j].get(bi, p);
                }
                per_example += dot * dot;
            }
        }
        mean += per_example / k;
    }
    mean / b as f64
}

fn brute_cross(s1: &[Tensor], s2: &[Tensor]) -> f64 {
    let t_y = s1.len();
    let k = if t_y == 1 { 1.0 } else { ((t_y - 1) * t_y / 2) as f64 };
    let (b, t) = s1[0].shape();
    let mut mean = 0.0;
    for bi in 0..b {
        let mut per_example = 0.0;
        for i in 0..t_y {
            for j in 0..t_y {
                let mut dot = 0.0;
                for p in 0..t {
                    dot += s1[i].get(bi, p) * s2[j].get(bi, p);
                }
                per_example += dot * dot;
            }
        }
        mean += per_example / k;
    }
    mean / b as f64
}

fn random_stack(r: &mut impl Rng, t_y: usize, b: usize, t: usize) -> Vec<Tensor> {
    (0..t_y)
        .map(|_| Tensor::new(b, t, (0..b * t).map(|_| r.random::<f64>()).collect()).unwrap())
        .collect()
}

fn put_stack(tape: &mut Tape, stack: &[Tensor]) -> Vec<ValueId> {
    stack.iter().map(|h| tape.constant(h.clone())).collect()
}

#[test]
fn c2_loss_oracles() {
    let mut r = rng::stream(0, "acceptance-losses");
    let mut worst = 0.0f64;
    for case in 0..100 {
        let t_y = 2 + case % 4;
        let b = 1 + case % 3;
        let t = 2 + case % 5;
        let s1 = random_stack(&mut r, t_y, b, t);
        let s2 = random_stack(&mut r, t_y, b, t);
        let (alpha, beta) = (0.05, 0.01);
        let expected_ld1 = brute_diversity(&s1);
        let expected_ld2 = brute_diversity(&s2);
        let expected_lo = brute_cross(&s1, &s2);
        let expected_tri = alpha * expected_lo + beta * (expected_ld1 + expected_ld2);

        let mut tape = Tape::new();
        let ids1 = put_stack(&mut tape, &s1);
        let ids2 = put_stack(&mut tape, &s2);
        let ld1 = losses::diversity_loss(&mut tape, &ids1).unwrap();
        let ld2 = losses::diversity_loss(&mut tape, &ids2).unwrap();
        let lo = losses::cross_orthogonality_loss(&mut tape, &ids1, &ids2).unwrap();
        let tri = losses::tri_diversity_loss(&mut tape, lo, ld1, ld2, alpha, beta).unwrap();
        for (name, id, expected) in [
            ("L_d m1", ld1, expected_ld1),
            ("L_d m2", ld2, expected_ld2),
            ("L_o", lo, expected_lo),
            ("L_dtri", tri, expected_tri),
        ] {
            let got = tape.value(id).item();
            let err = (got - expected).abs();
            assert!(err <= ORACLE_TOL, "{name} case {case}: {got} vs brute {expected}, err {err:.3e}");
            worst = worst.max(err);
        }
    }

    // disjoint one-hot constrained heads overlap not at all
    let mut tape = Tape::new();
    let disjoint = [
        Tensor::new(1, 2, vec![1.0, 0.0]).unwrap(),
        Tensor::new(1, 2, vec![0.0, 1.0]).unwrap(),
        Tensor::new(1, 2, vec![0.3, 0.7]).unwrap(),
    ];
    let ids = put_stack(&mut tape, &disjoint);
    let ld = losses::diversity_loss(&mut tape, &ids).unwrap();
    assert_eq!(tape.value(ld).item(), 0.0);

    // duplicated constrained heads: dot 0.5, squared 0.25, k = 1
    let mut tape = Tape::new();
    let duplicated = [
        Tensor::new(1, 2, vec![0.5, 0.5]).unwrap(),
        Tensor::new(1, 2, vec![0.5, 0.5]).unwrap(),
        Tensor::new(1, 2, vec![0.9, 0.1]).unwrap(),
    ];
    let ids = put_stack(&mut tape, &duplicated);
    let ld = losses::diversity_loss(&mut tape, &ids).unwrap();
    assert_eq!(tape.value(ld).item(), 0.25, "free head must not contribute");

    println!("PASS loss oracles: 400 comparisons on 100 random stacks, worst abs err {worst:.2e} <= {ORACLE_TOL:.0e}");
}

#[test]
fn c3_tri_training_logic_oracles() {
    // accept: brute-force filter over 1000 random prediction pairs
    let mut r = rng::stream(0, "acceptance-accept");
    for i in 0..1000 {
        let p = r.random::<f64>();
        let q = r.random::<f64>();
        let expected = {
            let (lp, lq) = (u8::from(p > 0.5), u8::from(q > 0.5));
            let conf = f64::max(p.max(1.0 - p), q.max(1.0 - q));
            (lp == lq && conf > TAU).then_some(lp)
        };
        assert_eq!(tritrain::accept(p, q, TAU), expected, "pair {i}: p={p} q={q}");
    }

    // majority vote is the per-example mode
    let mut r = rng::stream(0, "acceptance-vote");
    for _ in 0..1000 {
        let l: Vec<u8> = (0..3).map(|_| u8::from(r.random::<bool>())).collect();
        let mode = u8::from(l.iter().map(|&x| x as u32).sum::<u32>() >= 2);
        assert_eq!(tritrain::vote_of_labels(&l[..1], &l[1..2], &l[2..]), vec![mode]);
    }

    // agreement rate against a hand count: rows 0, 2, 5 agree out of 6
    let l1 = [1, 1, 0, 0, 1, 0];
    let l2 = [1, 0, 0, 1, 1, 0];
    let l3 = [1, 1, 0, 0, 0, 0];
    assert_eq!(tritrain::agreement_of_labels(&l1, &l2, &l3), 3.0 / 6.0);

    // the full loop terminates within max_iters on a synthetic corpus
    let data = synth::two_domain(synth::TwoDomainConfig {
        n_source: 40,
        n_unlabeled: 40,
        n_target: 16,
        ..synth::TwoDomainConfig::default()
    });
    let hp = HyperParams {
        hidden: 4,
        heads: 3,
        max_len: 12,
        dropout: 0.2,
        batch_size: 16,
        max_epochs: 4,
        patience: 0,
        val_fraction: 0.2,
        learning_rate: 0.01,
        tau: 0.5,
        ..HyperParams::default()
    };
    let vocab = data.vocabulary(0).unwrap();
    let (labeled, unlabeled, _target) = data.encode_all(&vocab, hp.max_len).unwrap();
    let max_iters = 2;
    let (ensemble, history) =
        tritrain::tritrain_full(&labeled, &unlabeled, &vocab, &hp, 0, max_iters).expect("tri-training");
    assert!(history.iterations <= max_iters, "ran {} iterations", history.iterations);
    assert_eq!(history.agreement.len(), history.iterations + 1);

    // ensemble inference is exactly the mode of its members' predictions
    let votes = ensemble.majority_vote(&unlabeled).unwrap();
    let p1 = model::predict(&ensemble.m1, &unlabeled, hp.batch_size).unwrap().labels;
    let p2 = model::predict(&ensemble.m2, &unlabeled, hp.batch_size).unwrap().labels;
    let p3 = model::predict(&ensemble.m3, &unlabeled, hp.batch_size).unwrap().labels;
    assert_eq!(votes, tritrain::vote_of_labels(&p1, &p2, &p3));

    println!(
        "PASS tri-training oracles: accept x1000 at tau={TAU}, vote=mode x1000, agreement hand count, loop stopped after {} iterations",
        history.iterations
    );
}

#[test]
fn c4_overfit_sanity() {
    let t0 = Instant::now();
    let (vocab, train) = synth::overfit_task(0).unwrap();
    assert_eq!((vocab.size(), vocab.dim(), train.len(), train.max_len()), (50, 8, 32, 10));
    let hp = HyperParams {
        hidden: 8,
        heads: 3,
        max_len: 10,
        scoring: Scoring::Additive,
        dropout: 0.0,
        learning_rate: 0.01,
        lr_decay: 0.0,
        batch_size: 16,
        max_epochs: 200,
        patience: 0,
        ..HyperParams::default()
    };
    let config = ModelConfig::from_hyper(&hp, &vocab);
    let mut params = ModelParams::init(config, vocab.embeddings().clone(), 0).unwrap();
    let report = trainer::fit(&mut params, &train, &train, &hp, 0).unwrap();
    let acc = trainer::evaluate_accuracy(&params, &train, hp.batch_size).unwrap();
    let elapsed = t0.elapsed();
    assert!(report.epochs.len() <= 200);
    assert_eq!(acc, 1.0, "training accuracy stuck at {acc}");
    assert!(elapsed < Duration::from_secs(60), "overfit took {elapsed:?}");
    println!("PASS overfit: 32/32 training examples correct within {} epochs, {elapsed:?}", report.epochs.len());
}

#[test]
fn c5_diversity_lowers_head_overlap_without_hurting_transfer() {
    let t0 = Instant::now();
    let data = synth::two_domain(synth::TwoDomainConfig::default());
    let hp = HyperParams {
        hidden: 8,
        heads: 4,
        max_len: 12,
        dropout: 0.0,
        learning_rate: 0.01,
        lr_decay: 0.0,
        batch_size: 16,
        max_epochs: 60,
        patience: 0,
        ..HyperParams::default()
    };
    let seeds = [0u64, 1, 2, 3, 4];
    let (mut dot_mha, mut dot_mhad) = (0.0, 0.0);
    let (mut acc_mha, mut acc_mhad) = (0.0, 0.0);
    for seed in seeds {
        let vocab = data.vocabulary(seed).unwrap();
        let (labeled, _unlabeled, target) = data.encode_all(&vocab, hp.max_len).unwrap();
        let (train, val) = corpus::train_val_split(&labeled, 0.2, rng::derive(seed, "split")).unwrap();
        for (gamma, dot_sum, acc_sum) in
            [(0.0, &mut dot_mha, &mut acc_mha), (0.01, &mut dot_mhad, &mut acc_mhad)]
        {
            let mut h = hp.clone();
            h.gamma = gamma;
            let config = ModelConfig::from_hyper(&h, &vocab);
            let mut params = ModelParams::init(config, vocab.embeddings().clone(), seed).unwrap();
            trainer::fit(&mut params, &train, &val, &h, seed).unwrap();
            let (_probs, stack) = model::eval_batch(&params, val.id_rows(0, val.len())).unwrap();
            *dot_sum += losses::mean_constrained_head_dot(&stack);
            *acc_sum += trainer::evaluate_accuracy(&params, &target, h.batch_size).unwrap();
        }
    }
    let n = seeds.len() as f64;
    let (dot_mha, dot_mhad) = (dot_mha / n, dot_mhad / n);
    let (acc_mha, acc_mhad) = (acc_mha / n, acc_mhad / n);
    let elapsed = t0.elapsed();
    assert!(
        dot_mhad < dot_mha,
        "constrained-head overlap did not drop: mhad {dot_mhad:.6} vs mha {dot_mha:.6}"
    );
    assert!(
        acc_mhad >= acc_mha - ACC_SLACK,
        "target accuracy fell more than {ACC_SLACK}: mhad {acc_mhad:.4} vs mha {acc_mha:.4}"
    );
    assert!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    println!(
        "PASS diversity effect: mean head dot {dot_mha:.4} -> {dot_mhad:.4}, target accuracy {acc_mha:.4} -> {acc_mhad:.4} over 5 seeds, {elapsed:?}"
    );
}

#[test]
fn c6_byte_identical_reruns() {
    let d = write_data();
    let dirs = [d.root.join("a"), d.root.join("b")];
    for out in &dirs {
        // train a single model, then a tri-training ensemble
        let t = run(divatt().args(train_args(&d, out)).args(["--seed", "5"]));
        assert!(t.status.success(), "stderr: {}", stderr_of(&t));
        let tri = run(divatt().args([
            "tritrain",
            "--variant", "tri1",
            "--train", d.train.to_str().unwrap(),
            "--embeddings", d.embeddings.to_str().unwrap(),
            "--output-dir", out.to_str().unwrap(),
            "--hidden", "4",
            "--heads", "3",
            "--max-len", "12",
            "--max-epochs", "2",
            "--patience", "0",
            "--batch-size", "16",
            "--seed", "5",
        ]));
        assert!(tri.status.success(), "stderr: {}", stderr_of(&tri));
    }
    // the recorded configs match except for the output_dir they point at
    let strip = |text: String| -> String {
        text.lines().filter(|l| !l.starts_with("output_dir")).collect::<Vec<_>>().join("\n")
    };
    let conf_a = strip(fs::read_to_string(dirs[0].join("run.conf")).unwrap());
    let conf_b = strip(fs::read_to_string(dirs[1].join("run.conf")).unwrap());
    assert_eq!(conf_a, conf_b, "run.conf differs beyond output_dir");
    let mut compared = 1;
    for file in [
        "mhad-seed5/model.ckpt",
        "mhad-seed5/train_report.csv",
        "tri1-seed5/ensemble/m1.ckpt",
        "tri1-seed5/ensemble/m2.ckpt",
        "tri1-seed5/ensemble/m3.ckpt",
        "tri1-seed5/ensemble/ensemble.json",
    ] {
        let a = fs::read(dirs[0].join(file)).unwrap();
        let b = fs::read(dirs[1].join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical invocations");
        compared += 1;
    }
    // stdout of read-only commands is byte-identical too
    for args in [
        vec![
            "eval",
            "--variant", "mhad",
            "--test", d.test.to_str().unwrap(),
            "--embeddings", d.embeddings.to_str().unwrap(),
            "--checkpoint", dirs[0].join("mhad-seed5/model.ckpt").to_str().unwrap(),
        ],
        vec!["gradcheck", "--seed", "0"],
    ] {
        let first = run(divatt().args(&args));
        let second = run(divatt().args(&args));
        assert!(first.status.success(), "stderr: {}", stderr_of(&first));
        assert_eq!(first.stdout, second.stdout, "{args:?} stdout differs");
        compared += 1;
    }
    println!("PASS determinism: {compared} artifacts and outputs byte-identical across reruns");
}

#[test]
fn c7_training_never_accepts_target_data() {
    let data = synth::two_domain(synth::TwoDomainConfig {
        n_source: 40,
        n_unlabeled: 24,
        n_target: 16,
        ..synth::TwoDomainConfig::default()
    });
    let hp = HyperParams { hidden: 4, heads: 3, max_len: 12, max_epochs: 1, ..HyperParams::default() };
    let vocab = data.vocabulary(0).unwrap();
    let (labeled, _unlabeled, target) = data.encode_all(&vocab, hp.max_len).unwrap();
    let config = ModelConfig::from_hyper(&hp, &vocab);
    let params = ModelParams::init(config, vocab.embeddings().clone(), 0).unwrap();

    let rejected = |e: Error| assert!(matches!(e, Error::TargetDataRejected), "wrong error: {e}");
    let mut m = params.clone();
    rejected(trainer::fit(&mut m, &target, &labeled, &hp, 0).unwrap_err());
    rejected(trainer::fit(&mut m, &labeled, &target, &hp, 0).unwrap_err());
    rejected(tritrain::one_step_tritrain(&target, &vocab, &hp, 0).unwrap_err());
    rejected(tritrain::tritrain_full(&target, &target, &vocab, &hp, 0, 1).unwrap_err());
    rejected(tritrain::tritrain_full(&labeled, &target, &vocab, &hp, 0, 1).unwrap_err());
    rejected(tritrain::pseudo_label(&params, &params, &target, hp.tau, hp.batch_size).unwrap_err());
    let (mut a, mut b) = (params.clone(), params.clone());
    rejected(
        tritrain::joint_diversity_train(&mut a, &mut b, &target, &labeled, &hp, (1.0, 1.0), 0).unwrap_err(),
    );
    let (mut a, mut b) = (params.clone(), params.clone());
    rejected(
        tritrain::joint_diversity_train(&mut a, &mut b, &labeled, &target, &hp, (1.0, 1.0), 0).unwrap_err(),
    );
    println!("PASS source-only guarantee: 8 training entry points rejected target-test data");
}

/// Exercises scripts/amazon_matrix.sh end to end. With AMAZON_DATA set it
/// runs the real 12-transfer matrix at full scale (hours); otherwise it
/// plumbs synthetic stand-in domains through the same script at toy scale.
#[test]
#[ignore = "full-scale experiment harness; run explicitly with --ignored"]
fn c8_transfer_matrix_harness() {
    let script = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scripts/amazon_matrix.sh");
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let (data_dir, variants, seeds, extra) = match std::env::var("AMAZON_DATA") {
        Ok(dir) => (std::path::PathBuf::from(dir), "mha mhad tri1 tri2", "1,2,3,4,5", String::new()),
        Err(_) => {
            let data_dir = tmp.path().join("data");
            let domains = ["books", "dvd", "electronics", "kitchen"];
            let data = synth::two_domain(synth::TwoDomainConfig {
                n_source: 40,
                n_unlabeled: 24,
                n_target: 24,
                ..synth::TwoDomainConfig::default()
            });
            fs::create_dir_all(&data_dir).unwrap();
            synth::write_embeddings(data_dir.join("vectors.txt"), &data.embedding_rows).unwrap();
            for domain in domains {
                let dir = data_dir.join(domain);
                fs::create_dir_all(&dir).unwrap();
                synth::write_labeled(dir.join("train.tsv"), &data.source_labeled).unwrap();
                synth::write_unlabeled(dir.join("unlabeled.txt"), &data.source_unlabeled).unwrap();
                synth::write_labeled(dir.join("test.tsv"), &data.target_test).unwrap();
            }
            let extra = "--hidden 4 --heads 3 --max-len 12 --max-epochs 2 --patience 0 --batch-size 16 --max-iterations 1 --tau 0.5".to_string();
            (data_dir, "mha tri2", "1", extra)
        }
    };
    let out = std::process::Command::new(script)
        .arg(&data_dir)
        .arg(&out_dir)
        .env("BIN", env!("CARGO_BIN_EXE_divatt"))
        .env("VARIANTS", variants)
        .env("SEEDS", seeds)
        .env("EXTRA", extra)
        .output()
        .expect("run harness script");
    assert!(
        out.status.success(),
        "harness failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let matrix = fs::read_to_string(out_dir.join("matrix.csv")).unwrap();
    let lines: Vec<&str> = matrix.lines().collect();
    assert_eq!(lines.len(), 13, "header plus 12 ordered transfers:\n{matrix}");
    let columns = 1 + variants.split_whitespace().count();
    assert_eq!(lines[0].split(',').count(), columns, "{matrix}");
    for line in &lines[1..] {
        assert_eq!(line.split(',').count(), columns, "ragged row {line}");
        assert!(!line.ends_with(','), "missing accuracy in {line}");
    }
    let runs = fs::read_to_string(out_dir.join("runs.csv")).unwrap();
    let expected_runs = 1 + 12 * (columns - 1) * seeds.split(',').count();
    assert_eq!(runs.lines().count(), expected_runs, "{runs}");
    println!("PASS transfer matrix harness: 12 transfers tabulated into {}", out_dir.join("matrix.csv").display());
}
