//! End-to-end acceptance checks. One test per criterion; each prints a single
//! `criterion N: PASS` line (visible with --nocapture) or panics with a
//! matching FAIL message. The pretraining runs are shared across criteria,
//! so the first test to need them pays their cost once.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use audio_ssl::checkpoint::load_checkpoint;
use audio_ssl::config::{Config, NetworkSize, ProbeSource};
use audio_ssl::gradcheck;
use audio_ssl::losses::{
    alignment_value, decorrelation_value, diversity_bruteforce, diversity_fast_value,
    PredictionBatch,
};
use audio_ssl::manifest::Manifest;
use audio_ssl::mel;
use audio_ssl::network::{self, NetworkDims};
use audio_ssl::probe::{self, EmbeddingRow, EmbeddingTable};
use audio_ssl::synth::{self, ClipInfo};
use audio_ssl::tensor::Tensor;
use audio_ssl::trainer::{self, TrainOutcome};
use audio_ssl::wav::{load_wav, random_crop_clip, resample_linear, AudioClip};

const SEED: u64 = 7;
const CORPUS_SEED: u64 = 42;

fn unit_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> PredictionBatch {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        data.extend(v.into_iter().map(|x| x / norm));
    }
    PredictionBatch::from_rows(Tensor::from_vec(vec![n, d], data)).unwrap()
}

// -- shared pretraining runs ---------------------------------------------------

struct Shared {
    _dir: TempDir,
    manifest: Manifest,
    infos: Vec<ClipInfo>,
    run_a: TrainOutcome,
    run_b: TrainOutcome,
    synth_secs: f64,
    run_a_secs: f64,
    run_b_secs: f64,
}

fn run_config() -> Config {
    let mut cfg = Config::default();
    cfg.network = NetworkSize::Small;
    cfg.batch_size = 16;
    cfg.epochs = 20;
    // high enough that the ablated run reaches its collapsed fixed point
    // within the 20-epoch budget
    cfg.learning_rate = 5e-3;
    // shorter EMA horizon than the production default: 140 total steps leave
    // tau = 0.995 too far behind its online branch for a fair target probe
    cfg.tau = 0.99;
    cfg.seed = SEED;
    cfg.log_seconds = false;
    cfg
}

fn shared() -> &'static Shared {
    static SHARED: OnceLock<Shared> = OnceLock::new();
    SHARED.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let t = Instant::now();
        let (manifest, infos) = synth::generate(&dir.path().join("corpus"), 4, 25, CORPUS_SEED)
            .expect("corpus generation failed");
        let synth_secs = t.elapsed().as_secs_f64();

        // run A: the full objective
        let cfg_a = run_config();
        let t = Instant::now();
        let run_a =
            trainer::train(&manifest, &cfg_a, &dir.path().join("run_a"), None).expect("run A");
        let run_a_secs = t.elapsed().as_secs_f64();

        // run B: alignment only, predictor removed, tau = 0 (target tracks
        // the online network exactly)
        let mut cfg_b = run_config();
        cfg_b.lambda_div = 0.0;
        cfg_b.lambda_dec = 0.0;
        cfg_b.use_predictor = false;
        cfg_b.tau = 0.0;
        let t = Instant::now();
        let run_b =
            trainer::train(&manifest, &cfg_b, &dir.path().join("run_b"), None).expect("run B");
        let run_b_secs = t.elapsed().as_secs_f64();

        Shared { _dir: dir, manifest, infos, run_a, run_b, synth_secs, run_a_secs, run_b_secs }
    })
}

fn mean_std(report: &audio_ssl::diagnostics::CollapseReport) -> f64 {
    report.per_dim_std.iter().sum::<f64>() / report.per_dim_std.len() as f64
}

/// Mean of the eff_rank metrics column over the final epoch of a run.
fn final_epoch_mean_rank(run: &TrainOutcome) -> f64 {
    let text = std::fs::read_to_string(&run.metrics_path).expect("metrics file");
    let last_epoch = run_config().epochs.to_string();
    let ranks: Vec<f64> = text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next() == Some(last_epoch.as_str()))
        .map(|l| l.split(',').nth(6).unwrap().parse().unwrap())
        .collect();
    assert!(!ranks.is_empty(), "no metrics rows for the final epoch");
    ranks.iter().sum::<f64>() / ranks.len() as f64
}

/// Probe the given branch of a checkpoint on the shared corpus and return the
/// cross-validated mean accuracy.
fn probe_checkpoint(path: &std::path::Path, source: ProbeSource) -> f64 {
    let mut ckpt = load_checkpoint(path).expect("checkpoint loads");
    let cfg = run_config();
    let table =
        probe::extract_embeddings(&mut ckpt.state, &shared().manifest, source, false, cfg.seed)
            .expect("embedding extraction");
    probe::cross_validate(&table, cfg.probe_lr, cfg.probe_iters).expect("probe").mean_accuracy
}

// -- criteria -------------------------------------------------------------------

#[test]
fn criterion_01_diversity_closed_form_identity() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..120 {
        let n = rng.gen_range(2..=64);
        let d = rng.gen_range(2..=32);
        let batch = unit_batch(&mut rng, n, d);
        worst = worst.max((diversity_fast_value(&batch) - diversity_bruteforce(&batch)).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    assert!(worst <= 1e-6, "criterion 1: FAIL — max |fast - brute| = {worst:.3e} > 1e-6");
    assert!(secs < 10.0, "criterion 1: FAIL — took {secs:.1}s, budget 10s");
    println!("criterion 1: PASS — 120 batches, max |fast - brute| = {worst:.3e}, {secs:.2}s");
}

#[test]
fn criterion_02_gradient_suite() {
    let t = Instant::now();
    let rows = gradcheck::full_battery(2024);
    let secs = t.elapsed().as_secs_f64();
    for row in &rows {
        assert!(
            row.pass(),
            "criterion 2: FAIL — {} rel err {:.3e} > tol {:.0e}",
            row.name,
            row.max_rel_err,
            row.tol
        );
    }
    assert!(secs < 60.0, "criterion 2: FAIL — took {secs:.1}s, budget 60s");
    println!("criterion 2: PASS — {} finite-difference checks, {secs:.2}s", rows.len());
}

#[test]
fn criterion_03_loss_bounds_and_fixed_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    // alignment: zero when identical, four when antipodal, bounded between
    let b = unit_batch(&mut rng, 8, 6);
    let align_same = alignment_value(&b, &b).unwrap();
    assert!(align_same.abs() <= 1e-10, "criterion 3: FAIL — alignment at identity = {align_same:e}");
    let flipped = PredictionBatch::from_rows(
        Tensor::from_vec(vec![8, 6], b.rows().data().iter().map(|x| -x).collect()),
    )
    .unwrap();
    let align_anti = alignment_value(&b, &flipped).unwrap();
    assert!(
        (align_anti - 4.0).abs() <= 1e-10,
        "criterion 3: FAIL — alignment at antipodes = {align_anti}"
    );
    for _ in 0..50 {
        let p = unit_batch(&mut rng, 8, 6);
        let q = unit_batch(&mut rng, 8, 6);
        let a = alignment_value(&p, &q).unwrap();
        assert!(
            (-1e-10..=4.0 + 1e-10).contains(&a),
            "criterion 3: FAIL — alignment {a} outside [0, 4]"
        );
    }

    // diversity: zero at collapse, -2 when the batch sums to zero
    let row: Vec<f64> = {
        let v = [0.3, -0.5, 0.7, 0.1];
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / norm).collect()
    };
    let collapse = PredictionBatch::from_rows(Tensor::from_vec(
        vec![6, 4],
        row.iter().cycle().take(24).copied().collect(),
    ))
    .unwrap();
    let div_collapse = diversity_fast_value(&collapse);
    assert!(div_collapse.abs() <= 1e-10, "criterion 3: FAIL — diversity at collapse = {div_collapse:e}");
    let mut balanced = Vec::new();
    for sign in [1.0, -1.0, 1.0, -1.0] {
        balanced.extend(row.iter().map(|x| sign * x));
    }
    let balanced = PredictionBatch::from_rows(Tensor::from_vec(vec![4, 4], balanced)).unwrap();
    let div_balanced = diversity_fast_value(&balanced);
    assert!(
        (div_balanced + 2.0).abs() <= 1e-10,
        "criterion 3: FAIL — diversity at zero-sum batch = {div_balanced}"
    );
    for _ in 0..50 {
        let p = unit_batch(&mut rng, 12, 5);
        let dv = diversity_fast_value(&p);
        assert!(
            (-2.0 - 1e-10..=1e-10).contains(&dv),
            "criterion 3: FAIL — diversity {dv} outside [-2, 0]"
        );
    }

    // decorrelation: zero at collapse and at a constructed-uncorrelated batch
    let dec_collapse = decorrelation_value(&collapse).unwrap();
    assert!(dec_collapse.abs() <= 1e-10, "criterion 3: FAIL — decorrelation at collapse = {dec_collapse:e}");
    let s = 1.0 / 2f64.sqrt();
    let uncorrelated = PredictionBatch::from_rows(Tensor::from_vec(
        vec![4, 2],
        vec![s, s, -s, s, s, -s, -s, -s],
    ))
    .unwrap();
    let dec_ortho = decorrelation_value(&uncorrelated).unwrap();
    assert!(
        dec_ortho.abs() <= 1e-10,
        "criterion 3: FAIL — decorrelation at uncorrelated batch = {dec_ortho:e}"
    );

    println!("criterion 3: PASS — alignment/diversity/decorrelation bounds and fixed points hold");
}

#[test]
fn criterion_04_ema_law() {
    let tau = 0.995f64;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut state = network::init(&mut rng, NetworkDims::tiny(), tau);
    // displace the target from the frozen online parameters
    for (_, t) in state.target.encoder.trainable_mut("") {
        for v in t.data_mut() {
            *v += 0.5;
        }
    }
    for (_, t) in state.target.projector.trainable_mut("") {
        for v in t.data_mut() {
            *v += 0.5;
        }
    }
    let gap = |state: &network::DualNetworkState| -> f64 {
        let mut ss = 0.0;
        for ((_, t), (_, o)) in state
            .target
            .encoder
            .trainable("")
            .iter()
            .zip(state.online.encoder.trainable(""))
        {
            ss += t.data().iter().zip(o.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        for ((_, t), (_, o)) in state
            .target
            .projector
            .trainable("")
            .iter()
            .zip(state.online.projector.trainable(""))
        {
            ss += t.data().iter().zip(o.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        ss.sqrt()
    };
    let initial = gap(&state);
    assert!(initial > 0.0);
    let mut worst = 0.0f64;
    for k in 1..=100u32 {
        network::ema_update(&mut state);
        let ratio = gap(&state) / initial;
        let expect = tau.powi(k as i32);
        worst = worst.max((ratio - expect).abs() / expect);
    }
    assert!(worst <= 1e-6, "criterion 4: FAIL — max relative deviation from tau^k = {worst:.3e}");
    println!("criterion 4: PASS — ||xi_k - theta|| tracks tau^k to {worst:.3e} over 100 steps");
}

#[test]
fn criterion_05_collapse_ablation() {
    let t = Instant::now();
    let sh = shared();
    let b_first = mean_std(sh.run_b.first_report.as_ref().unwrap());
    let b_last = mean_std(sh.run_b.last_report.as_ref().unwrap());
    // effective rank averaged over the last epoch's steps: a single step's
    // value is noisy, and the trailing remainder batch holds few samples
    let rank_a = final_epoch_mean_rank(&sh.run_a);
    let rank_b = final_epoch_mean_rank(&sh.run_b);
    let total = sh.synth_secs + sh.run_a_secs + sh.run_b_secs + t.elapsed().as_secs_f64();
    assert!(
        b_last < 0.1 * b_first,
        "criterion 5: FAIL — ablated run kept std {b_last:.4} vs initial {b_first:.4} (needs < 10%)"
    );
    assert!(
        rank_a >= 2.0 * rank_b,
        "criterion 5: FAIL — effective rank A {rank_a:.2} vs B {rank_b:.2} (needs >= 2x)"
    );
    assert!(total < 900.0, "criterion 5: FAIL — runs took {total:.0}s, budget 900s");
    println!(
        "criterion 5: PASS — ablated std {b_first:.3} -> {b_last:.4} ({:.1}%), \
         effective rank {rank_a:.2} vs {rank_b:.2} ({:.1}x), {total:.0}s",
        100.0 * b_last / b_first,
        rank_a / rank_b
    );
}

#[test]
fn criterion_06_learning_signal_beats_raw_baseline() {
    let t = Instant::now();
    let sh = shared();
    let ssl = probe_checkpoint(&sh.run_a.checkpoint_path, ProbeSource::Online);

    // raw baseline: flattened log-mel of the exact same crops, identical
    // probe budget
    let cfg = run_config();
    let mut clips = Vec::new();
    for row in &sh.manifest.rows {
        let c = load_wav(&row.path)
            .and_then(|c| resample_linear(&c, mel::SAMPLE_RATE))
            .expect("corpus clip loads");
        clips.push((row, c));
    }
    let avg = clips.iter().map(|(_, c)| c.duration_seconds()).sum::<f64>() / clips.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for (row, clip) in clips {
        let crop = random_crop_clip(&clip, avg, &mut rng).unwrap();
        let spec = mel::logmel(&crop).unwrap();
        rows.push(EmbeddingRow {
            id: row.path.to_string_lossy().into_owned(),
            embedding: spec.values.data().to_vec(),
            label: row.label.clone(),
            fold: row.fold,
        });
    }
    let raw_table = EmbeddingTable { rows };
    let raw = probe::cross_validate(&raw_table, cfg.probe_lr, cfg.probe_iters)
        .expect("baseline probe")
        .mean_accuracy;

    let total = sh.synth_secs + sh.run_a_secs + t.elapsed().as_secs_f64();
    assert!(ssl >= 0.50, "criterion 6: FAIL — probe accuracy {ssl:.3} < 0.50");
    assert!(
        ssl > raw,
        "criterion 6: FAIL — probe accuracy {ssl:.3} not above raw log-mel baseline {raw:.3}"
    );
    assert!(total < 1200.0, "criterion 6: FAIL — took {total:.0}s, budget 1200s");
    println!("criterion 6: PASS — probe {ssl:.3} vs raw baseline {raw:.3}, {total:.0}s");
}

#[test]
fn criterion_07_online_target_parity() {
    let sh = shared();
    let online = probe_checkpoint(&sh.run_a.checkpoint_path, ProbeSource::Online);
    let target = probe_checkpoint(&sh.run_a.checkpoint_path, ProbeSource::Target);
    let gap = (online - target).abs();
    assert!(
        gap <= 0.05,
        "criterion 7: FAIL — online {online:.3} vs target {target:.3}, gap {gap:.3} > 0.05"
    );
    println!("criterion 7: PASS — online {online:.3} vs target {target:.3}, gap {gap:.3}");
}

#[test]
fn criterion_08_batch_size_stability() {
    let sh = shared();
    let dir = TempDir::new().unwrap();
    // the shared run A is the batch-16 member of the sweep
    let mut accs = vec![probe_checkpoint(&sh.run_a.checkpoint_path, ProbeSource::Online)];
    for batch in [32usize, 64] {
        let mut cfg = run_config();
        cfg.batch_size = batch;
        let out = trainer::train(&sh.manifest, &cfg, &dir.path().join(format!("b{batch}")), None)
            .expect("sweep run");
        accs.push(probe_checkpoint(&out.checkpoint_path, ProbeSource::Online));
    }
    let lo = accs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(
        hi - lo <= 0.10,
        "criterion 8: FAIL — accuracies {accs:.3?} span {:.3} > 0.10",
        hi - lo
    );
    println!(
        "criterion 8: PASS — batch 16/32/64 accuracies {:.3}/{:.3}/{:.3}, span {:.3}",
        accs[0],
        accs[1],
        accs[2],
        hi - lo
    );
}

#[test]
fn criterion_09_bitwise_determinism() {
    let sh = shared();
    let dir = TempDir::new().unwrap();
    let mut cfg = run_config();
    cfg.network = NetworkSize::Tiny;
    cfg.epochs = 3;
    let mut artifacts = Vec::new();
    for run in ["first", "second"] {
        let out = trainer::train(&sh.manifest, &cfg, &dir.path().join(run), None).expect("run");
        artifacts.push((
            std::fs::read(&out.metrics_path).unwrap(),
            std::fs::read(&out.checkpoint_path).unwrap(),
        ));
    }
    assert!(
        artifacts[0].0 == artifacts[1].0,
        "criterion 9: FAIL — metrics CSVs differ between identical runs"
    );
    assert!(
        artifacts[0].1 == artifacts[1].1,
        "criterion 9: FAIL — checkpoints differ between identical runs"
    );
    println!(
        "criterion 9: PASS — identical runs: {} metrics bytes, {} checkpoint bytes",
        artifacts[0].0.len(),
        artifacts[0].1.len()
    );
}

#[test]
fn criterion_10_frontend_shape_and_tone_peaks() {
    // shape law: 0.95 s at 16 kHz -> 96 x 64
    let n = (0.95 * mel::SAMPLE_RATE as f64).round() as usize;
    let samples: Vec<f64> = (0..n)
        .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16000.0).sin())
        .collect();
    let clip = AudioClip::new(samples, mel::SAMPLE_RATE).unwrap();
    let spec = mel::logmel(&clip).unwrap();
    assert_eq!(
        spec.values.shape(),
        &[96, mel::N_MELS],
        "criterion 10: FAIL — 0.95s clip gave {:?}, expected [96, 64]",
        spec.values.shape()
    );

    // peak-bin law for every synthesized tone in the shared corpus
    let sh = shared();
    let centers = mel::mel_centers();
    let mut tones = 0;
    for (row, info) in sh.manifest.rows.iter().zip(&sh.infos) {
        if info.label != "tone" {
            continue;
        }
        tones += 1;
        let pitch = info.pitch.unwrap();
        let spec = mel::logmel(&load_wav(&row.path).unwrap()).unwrap();
        let expect = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - pitch).abs().partial_cmp(&(b.1 - pitch).abs()).unwrap())
            .unwrap()
            .0;
        let frames = spec.frames();
        let mid = frames / 2;
        let band = spec.values.data()[mid * mel::N_MELS..(mid + 1) * mel::N_MELS]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert!(
            band.abs_diff(expect) <= 1,
            "criterion 10: FAIL — tone at {pitch:.1} Hz peaked in band {band}, expected {expect}"
        );
    }
    assert!(tones > 0, "criterion 10: FAIL — corpus contains no tone clips");
    println!("criterion 10: PASS — 0.95s -> 96x64; {tones} tone clips peak at their pitch band");
}
