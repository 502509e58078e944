//! End-to-end acceptance checks. Once all criteria have run, one PASS/FAIL
//! line per criterion goes to stderr, written directly so that the test
//! harness does not capture it. The test fails if any criterion fails.
//!
//! The desk-scale training runs dominate the runtime: about twelve
//! minutes on one core. Setting `MMEL_ACCEPTANCE_SKIP_DESK` skips them;
//! the two criteria they decide are then reported as failed.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use mmel::augment::{build_image_group, build_vector_group, Image, Payload, Sample, Target, TokenPredictor};
use mmel::augment::{
    crop_at, greedy_text_augment, hflip, load_offline_groups, mask_count, pad_crop, stream, write_groups,
};
use mmel::cli::{run_training, Config, FileDigest, RunManifest};
use mmel::data::{decode_cifar, encode_cifar, synthetic_cifar, InputEncoder};
use mmel::diffcore::{checkpoint, Model, ModelSpec};
use mmel::engine::{group_step, TrainConfig, TrainMode};
use mmel::oracle::{grad_check_group, random_instance, summarize, verify_theorem1, MAX_GRAD_REL_ERROR};
use mmel::reweight::{expected_loss, hard_objective, mmel_weights, MmelConfig, WeightVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Default)]
struct Report {
    lines: Vec<(u32, bool, String)>,
}

impl Report {
    fn line(&mut self, id: u32, pass: bool, detail: String) {
        self.lines.push((id, pass, detail));
    }
}

fn progress(msg: String) {
    let _ = writeln!(std::io::stderr().lock(), "{}", msg);
}

fn out_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> WeightVector {
    let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    let mut w: Vec<f64> = e.iter().map(|v| v / s).collect();
    let drift = 1.0 - w.iter().sum::<f64>();
    w[0] = (w[0] + drift).max(0.0);
    WeightVector::new(w).unwrap()
}

fn oracle_equivalence(r: &mut Report) {
    let start = Instant::now();
    let reports = verify_theorem1(1000, 0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let s = summarize(&reports);
    r.line(
        1,
        s.max_linf_gap < 1e-5 && s.max_value_gap < 1e-9 && secs < 60.0,
        format!(
            "max linf gap {:.2e}, max value gap {:.2e}, {:.1}s",
            s.max_linf_gap, s.max_value_gap, secs
        ),
    );
}

fn supremum(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = f64::NEG_INFINITY;
    for i in 0..1000 {
        let inst = random_instance(0, i);
        let best = hard_objective(&inst.losses, inst.lambda_p).unwrap().value;
        for _ in 0..100 {
            let w = random_simplex(&mut rng, inst.losses.len());
            worst = worst.max(expected_loss(&inst.losses, &w, inst.lambda_p).unwrap() - best);
        }
    }
    r.line(
        2,
        worst <= 1e-12,
        format!("largest excess over the closed form {:.2e}", worst),
    );
}

fn limits(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut flat, mut sharp, mut value_shift) = (0.0f64, 1.0f64, 0.0f64);
    let mut bitwise = true;
    for _ in 0..1000 {
        let n = rng.random_range(2..=8);
        // Losses on a 2^-20 grid and integer shifts keep every difference
        // exact.
        let l: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..(5u32 << 20)) as f64 / (1u64 << 20) as f64)
            .collect();
        let u = 1.0 / n as f64;
        let w = mmel_weights(&l, 1e6).unwrap();
        flat = flat.max(w.as_slice().iter().map(|v| (v - u).abs()).fold(0.0, f64::max));
        let mut sorted = l.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted[n - 1] - sorted[n - 2] > 1e-4 {
            sharp = sharp.min(mmel_weights(&l, 1e-6).unwrap().max());
        }
        let c = rng.random_range(-100i32..=100) as f64;
        let lp = [0.1, 1.0, 10.0][rng.random_range(0..3)];
        let shifted: Vec<f64> = l.iter().map(|v| v + c).collect();
        let a = hard_objective(&l, lp).unwrap();
        let b = hard_objective(&shifted, lp).unwrap();
        bitwise &= a.weights == b.weights;
        value_shift = value_shift.max((b.value - a.value - c).abs());
    }
    r.line(
        3,
        flat < 1e-4 && sharp > 1.0 - 1e-6 && bitwise && value_shift < 1e-9,
        format!(
            "max |w - uniform| {:.2e}, min argmax weight 1-{:.2e}, weights bitwise {}, value shift error {:.2e}",
            flat,
            1.0 - sharp,
            bitwise,
            value_shift
        ),
    );
}

fn gradients(r: &mut Report) {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for mode in [TrainMode::MmelHard, TrainMode::MmelSoft] {
        for seed in 0..20 {
            worst = worst.max(grad_check_group(seed, mode).unwrap().max_rel_error);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    r.line(
        4,
        worst < MAX_GRAD_REL_ERROR && secs < 30.0,
        format!("max relative error {:.2e} over 40 checks, {:.1}s", worst, secs),
    );
}

fn reduction(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mean_gap = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=10);
        let l: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let mean = l.iter().sum::<f64>() / n as f64;
        mean_gap = mean_gap.max((expected_loss(&l, &WeightVector::uniform(n), 1.0).unwrap() - mean).abs());
    }
    let model = Model::<f64>::init(ModelSpec::mlp(4, 6, 3), &mut rng).unwrap();
    let enc = InputEncoder::new(vec![4], None);
    let uniform = TrainConfig {
        mode: TrainMode::Uniform,
        ..TrainConfig::default()
    };
    let flat = TrainConfig {
        mode: TrainMode::MmelHard,
        mmel: MmelConfig {
            lambda_p: 1e6,
            ..MmelConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut rel = 0.0f64;
    for i in 0..100 {
        let s = Sample {
            id: format!("r{}", i),
            payload: Payload::Vector {
                features: (0..4).map(|_| rng.random_range(-2.0..2.0)).collect(),
            },
            label: Target::Class(rng.random_range(0..3)),
        };
        let g = build_vector_group(&s, rng.random_range(1..8), 0.8, i).unwrap();
        let a = group_step(&model, &enc, &g, &uniform, None, 0).unwrap().loss;
        let b = group_step(&model, &enc, &g, &flat, None, 0).unwrap().loss;
        rel = rel.max((a - b).abs() / a.abs());
    }
    r.line(
        5,
        mean_gap < 1e-12 && rel < 1e-4,
        format!(
            "uniform expected loss vs mean {:.2e}, uniform vs large-lambda hard {:.2e} relative",
            mean_gap, rel
        ),
    );
}

struct DeskRun {
    seed: u64,
    mode: TrainMode,
    eval_acc: f64,
    seconds: f64,
    csv: Vec<u8>,
    ckpt: Vec<u8>,
}

fn desk_run(seed: u64, mode: TrainMode, tag: &str) -> DeskRun {
    let mut cfg = Config::preset("cifar-desk").unwrap();
    cfg.seed = seed;
    cfg.mode = mode;
    cfg.strict_determinism = true;
    cfg.out_dir = out_dir().join(format!("{}-{:?}-{}", tag, mode, seed).to_lowercase());
    let start = Instant::now();
    let run = run_training(&cfg).unwrap();
    DeskRun {
        seed,
        mode,
        eval_acc: run.metrics.last().unwrap().eval_acc.unwrap(),
        seconds: start.elapsed().as_secs_f64(),
        csv: std::fs::read(&run.metrics_path).unwrap(),
        ckpt: std::fs::read(&run.checkpoint).unwrap(),
    }
}

fn desk_scale(r: &mut Report) {
    let mut runs = Vec::new();
    for seed in SEEDS {
        for mode in [TrainMode::BaselineDa, TrainMode::Uniform, TrainMode::MmelHard] {
            let run = desk_run(seed, mode, "desk");
            progress(format!(
                "cifar-desk seed {} {:?}: eval {:.4} in {:.0}s",
                seed, mode, run.eval_acc, run.seconds
            ));
            runs.push(run);
        }
    }

    let replay = desk_run(SEEDS[0], TrainMode::MmelHard, "replay");
    let first = runs
        .iter()
        .find(|x| x.seed == SEEDS[0] && x.mode == TrainMode::MmelHard)
        .unwrap();
    r.line(
        6,
        first.csv == replay.csv && first.ckpt == replay.ckpt,
        format!(
            "strict replay of seed {} mmel_hard: metrics identical {}, checkpoint identical {}",
            SEEDS[0],
            first.csv == replay.csv,
            first.ckpt == replay.ckpt
        ),
    );

    let mean = |m: TrainMode| {
        let v: Vec<f64> = runs
            .iter()
            .filter(|x| x.mode == m)
            .map(|x| x.eval_acc * 100.0)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (base, uni, hard) = (
        mean(TrainMode::BaselineDa),
        mean(TrainMode::Uniform),
        mean(TrainMode::MmelHard),
    );
    let total: f64 = runs.iter().map(|x| x.seconds).sum();
    let pass = hard >= uni - 0.3 && hard > base - 1.0 && uni > base - 1.0 && total < 1800.0;

    let manifest_path = out_dir().join("desk.manifest.json");
    let mut m = RunManifest::new(
        "acceptance-desk",
        SEEDS[0],
        serde_json::to_value(Config::preset("cifar-desk").unwrap()).unwrap(),
    );
    m.outputs = runs
        .iter()
        .map(|x| {
            let dir = out_dir().join(format!("desk-{:?}-{}", x.mode, x.seed).to_lowercase());
            FileDigest::of(&dir.join("metrics.csv")).unwrap()
        })
        .collect();
    m.results = json!({
        "seeds": SEEDS,
        "runs": runs.iter().map(|x| json!({ "seed": x.seed, "mode": x.mode, "eval_acc": x.eval_acc, "seconds": x.seconds })).collect::<Vec<_>>(),
        "mean_eval_acc_percent": { "baseline_da": base, "uniform": uni, "mmel_hard": hard },
        "total_seconds": total,
        "passed": pass,
    });
    m.write(&manifest_path).unwrap();

    r.line(
        7,
        pass,
        format!(
            "mean eval accuracy over seeds {:?}: mmel_hard {:.2}, uniform {:.2}, baseline_da {:.2}; {:.0}s total; {}",
            SEEDS,
            hard,
            uni,
            base,
            total,
            manifest_path.display()
        ),
    );
}

fn formats(r: &mut Report) {
    let good = encode_cifar(&synthetic_cifar(3, 1, "f")).unwrap();
    let mut rejected = true;
    for len in [1usize, 100, 3072, 3074, 6145, 3 * 3073 - 1] {
        let mut bytes = good.clone();
        bytes.resize(len, 0);
        rejected &= decode_cifar(&bytes, "f-").is_err();
    }
    let loaded = decode_cifar(&good, "f-").unwrap();
    rejected &= loaded.len() == 3;

    let dir = tempfile::tempdir().unwrap();
    let groups: Vec<_> = loaded
        .samples
        .iter()
        .map(|s| build_image_group(s, 3, 4, 2).unwrap())
        .collect();
    let path = dir.path().join("g.jsonl");
    write_groups(&path, &groups).unwrap();
    let back = load_offline_groups(&path).unwrap();
    let mut worst = 0.0f32;
    let mut same_shape = back.len() == groups.len();
    for (a, b) in groups.iter().zip(&back) {
        for (x, y) in a.members.iter().zip(&b.members) {
            match (x, y) {
                (Payload::Image(x), Payload::Image(y)) if x.shape == y.shape => {
                    for (p, q) in x.data.iter().zip(&y.data) {
                        worst = worst.max((p - q).abs() / p.abs().max(f32::MIN_POSITIVE));
                    }
                }
                _ => same_shape = false,
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = Model::<f32>::init(ModelSpec::cnn([3, 32, 32], 2, 8, 16, 10), &mut rng).unwrap();
    let norm = mmel::data::compute_normalization(&loaded.samples);
    let bytes = checkpoint::encode(&model, norm.as_ref()).unwrap();
    let (decoded, header) = checkpoint::decode::<f32>(&bytes).unwrap();
    let exact = decoded.params() == model.params()
        && header.normalization == norm
        && checkpoint::encode(&decoded, header.normalization.as_ref()).unwrap() == bytes;

    r.line(
        8,
        rejected && same_shape && worst <= f32::EPSILON && exact,
        format!(
            "bad sizes rejected {}, group round trip max relative error {:.1e}, checkpoint bit-exact {}",
            rejected, worst, exact
        ),
    );
}

struct Counting;

impl TokenPredictor for Counting {
    fn vocab_size(&self) -> usize {
        1000
    }

    fn rank(&self, _tokens: &[u32], _pos: usize, _original: u32, depth: usize) -> Vec<u32> {
        (0..depth as u32).collect()
    }
}

fn augmentation(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut involution, mut identity, mut distinct) = (true, true, true);
    for i in 0..200 {
        let shape = [rng.random_range(1..4), rng.random_range(1..12), rng.random_range(1..12)];
        let img = Image::new(
            shape,
            (0..shape.iter().product()).map(|_| rng.random::<f32>()).collect(),
        )
        .unwrap();
        let mut s = stream(i, "img", 0, "acceptance");
        involution &= hflip(&hflip(&img, &mut s, 1.0), &mut s, 1.0) == img;
        identity &= pad_crop(&img, 0, &mut s) == img && crop_at(&img, 2, 2, 2) == img;

        let len = rng.random_range(1..60);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..1000)).collect();
        let n_aug = rng.random_range(1..10);
        let out = greedy_text_augment(&tokens, 0.4, n_aug, &Counting, i, "t").unwrap();
        // The first drawn position is the only one where outputs differ.
        let mut first: Vec<u32> = Vec::new();
        for p in 0..len {
            let column: Vec<u32> = out.iter().map(|z| z[p]).collect();
            let mut uniq = column.clone();
            uniq.sort_unstable();
            uniq.dedup();
            if uniq.len() > 1 {
                first = column;
            }
        }
        if n_aug > 1 {
            let mut uniq = first.clone();
            uniq.sort_unstable();
            uniq.dedup();
            distinct &= uniq.len() == n_aug;
        }
    }
    let expected = [
        (1, 1),
        (2, 1),
        (4, 2),
        (5, 2),
        (7, 3),
        (10, 4),
        (12, 5),
        (25, 10),
        (128, 51),
    ];
    let counts = expected.iter().all(|&(len, k)| mask_count(len, 0.4) == k);
    r.line(
        9,
        involution && identity && distinct && counts,
        format!(
            "hflip involution {}, zero-pad crop identity {}, distinct first-position tokens {}, mask counts {}",
            involution, identity, distinct, counts
        ),
    );
}

#[test]
fn acceptance() {
    let mut r = Report::default();
    oracle_equivalence(&mut r);
    supremum(&mut r);
    limits(&mut r);
    gradients(&mut r);
    reduction(&mut r);
    formats(&mut r);
    augmentation(&mut r);
    if std::env::var_os("MMEL_ACCEPTANCE_SKIP_DESK").is_some() {
        r.line(6, false, "not run".into());
        r.line(7, false, "not run".into());
    } else {
        desk_scale(&mut r);
    }
    r.lines.sort_by_key(|l| l.0);
    let mut err = std::io::stderr().lock();
    for (id, pass, detail) in &r.lines {
        let verdict = if *pass { "PASS" } else { "FAIL" };
        let _ = writeln!(err, "acceptance criterion {}: {} ({})", id, verdict, detail);
    }
    drop(err);
    let failed: Vec<u32> = r.lines.iter().filter(|l| !l.1).map(|l| l.0).collect();
    assert!(failed.is_empty(), "failed criteria: {:?}", failed);
}
