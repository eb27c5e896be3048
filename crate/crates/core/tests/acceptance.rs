//! Acceptance criteria, one test each. Every test writes a single
//! `criterion N PASS|FAIL ...` line straight to stderr (bypassing the test
//! harness capture) so the verdicts show up in a plain `cargo test` log.
//! Tests hold a shared lock so runtimes are measured without contention.

use std::io::Write as _;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use dabseg::autodiff::gradcheck::{operator_suite, OP_INVENTORY};
use dabseg::autodiff::{Graph, Tensor};
use dabseg::loss::{joint_loss, recon_loss, weighted_dice_loss, RecNorm};
use dabseg::metrics::{dice_metric, hd95};
use dabseg::motion::{simulate_motion, MotionTimeline, RigidMotionState};
use dabseg::net::{DabsegNet, NetConfig};
use dabseg::report::{dice_cdf, report_curves, sorted_dice, CaseMetrics, EvalReport};
use dabseg::train::*;
use dabseg::volume::{split_dataset, CaseRecord, Mask, Region};
use dabseg::Precision;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::*;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|p| p.into_inner())
}

fn verdict(n: usize, pass: bool, detail: &str, elapsed: Duration) -> bool {
    let tag = if pass { "PASS" } else { "FAIL" };
    let line = format!(
        "criterion {n:>2} {tag} {detail} [{:.1}s]\n",
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    pass
}

fn scratch(name: &str) -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("dabseg_acceptance_{name}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

#[test]
fn c01_gradient_suite() {
    let _g = serial();
    let t0 = Instant::now();
    let checks = operator_suite(7).unwrap();
    let mut worst_op = ("", 0.0f64);
    let mut enough_shapes = true;
    for op in OP_INVENTORY {
        let rows: Vec<_> = checks.iter().filter(|c| c.op == op).collect();
        enough_shapes &= rows.len() >= 3 && rows.iter().all(|c| c.report.compared > 0);
        for c in rows {
            if c.report.max_rel_error > worst_op.1 {
                worst_op = (op, c.report.max_rel_error);
            }
        }
    }
    let net = network_gradcheck(7, 3).unwrap();
    let elapsed = t0.elapsed();
    let pass = enough_shapes
        && worst_op.1 < 1e-4
        && net.max_rel_error < 1e-3
        && elapsed < Duration::from_secs(300);
    let detail = format!(
        "gradient suite: {} ops x >=3 shapes, worst op rel {:.2e} ({}) < 1e-4; network 4x8^3 C0=8 rel {:.2e} < 1e-3; < 5 min",
        OP_INVENTORY.len(),
        worst_op.1,
        worst_op.0,
        net.max_rel_error
    );
    assert!(verdict(1, pass, &detail, elapsed));
}

#[test]
fn c02_metric_oracles() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut dice_exact, mut worst_hd) = (true, 0.0f64);
    let mut specials = 0;
    for i in 0..200 {
        let dims: [usize; 3] = std::array::from_fn(|_| rng.gen_range(1..=8));
        let n = dims.iter().product::<usize>();
        let spacing = if rng.gen_bool(0.5) {
            [1.0; 3]
        } else {
            std::array::from_fn(|_| rng.gen_range(0.5..2.0))
        };
        let single = |rng: &mut ChaCha8Rng| {
            let mut v = vec![false; n];
            v[rng.gen_range(0..n)] = true;
            Mask::new(dims, v).unwrap()
        };
        let (a, b) = match i {
            0 => (Mask::empty(dims), Mask::empty(dims)),
            1 => (Mask::empty(dims), single(&mut rng)),
            2 => (single(&mut rng), Mask::empty(dims)),
            3 => (single(&mut rng), single(&mut rng)),
            _ => (random_mask(&mut rng, dims), random_mask(&mut rng, dims)),
        };
        let count = |m: &Mask| m.data.iter().filter(|&&x| x).count();
        specials += usize::from(count(&a) <= 1 || count(&b) <= 1);
        dice_exact &= dice_metric(&a, &b) == brute_dice(&a, &b);
        worst_hd = worst_hd.max((hd95(&a, &b, spacing) - brute_hd95(&a, &b, spacing)).abs());
    }
    let elapsed = t0.elapsed();
    let pass = dice_exact && worst_hd <= 1e-9 && specials >= 4 && elapsed < Duration::from_secs(60);
    let detail = format!(
        "metric oracles: 200 pairs <= 8^3 ({specials} empty/single-voxel), dice exact = {dice_exact}, max |hd95 - oracle| {worst_hd:.1e} <= 1e-9; < 1 min"
    );
    assert!(verdict(2, pass, &detail, elapsed));
}

#[test]
fn c03_motion_simulation() {
    let _g = serial();
    let t0 = Instant::now();
    let v = random_volume([9, 8, 7], 3);
    let mut still_err = 0.0f64;
    for axis in 0..3 {
        let two = MotionTimeline {
            segments: vec![
                (0.35, RigidMotionState::IDENTITY),
                (0.65, RigidMotionState::IDENTITY),
            ],
            axis,
        };
        still_err = still_err.max(max_abs(
            &simulate_motion(&v, &MotionTimeline::still(axis))
                .unwrap()
                .data,
            &v.data,
        ));
        still_err = still_err.max(max_abs(&simulate_motion(&v, &two).unwrap().data, &v.data));
    }

    let n = 8;
    let cube = random_volume([n; 3], 4);
    let mut dft_err = 0.0f64;
    for axis in 0..3 {
        let t = MotionTimeline {
            segments: vec![
                (0.5, RigidMotionState::IDENTITY),
                (0.5, RigidMotionState::translation([0.0, 1.0, 2.0])),
            ],
            axis,
        };
        let got = simulate_motion(&cube, &t).unwrap();
        let expect = oracle_simulation(&cube.data, n, &[(0.5, [0, 0, 0]), (0.5, [0, 1, 2])], axis);
        dft_err = dft_err.max(max_abs(&got.data, &expect));
    }

    let data = DataConfig::default();
    let phantoms = synth_phantoms(&data, 0).unwrap();
    let min_mse = phantoms
        .iter()
        .map(|(clean, degraded, _)| mse(&clean.data, &degraded.data))
        .fold(f64::INFINITY, f64::min);
    let elapsed = t0.elapsed();
    let pass =
        still_err < 1e-6 && dft_err < 1e-6 && min_mse > 0.0 && elapsed < Duration::from_secs(120);
    let detail = format!(
        "motion sim: identity max err {still_err:.1e} < 1e-6; two-segment 8^3 vs direct DFT {dft_err:.1e} < 1e-6; S2 min MSE over {} phantoms {min_mse:.3e} > 0; < 2 min",
        phantoms.len()
    );
    assert!(verdict(3, pass, &detail, elapsed));
}

fn uniform01(shape: &[usize], seed: u64, binary: bool) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if binary {
                f64::from(u8::from(rng.gen_bool(0.4)))
            } else {
                rng.gen_range(0.0..1.0)
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn c04_loss_identities() {
    let _g = serial();
    let t0 = Instant::now();
    let shape = [2, 3, 4, 3, 5];
    let (p, t) = (uniform01(&shape, 1, false), uniform01(&shape, 2, true));
    let eps = 1e-5;
    let loss_of = |w: [f64; 3]| {
        let g = Graph::new();
        let pv = g.constant(p.clone());
        g.value(weighted_dice_loss(&g, pv, &t, w, eps).unwrap())
            .item()
    };
    // independent soft Dice per (sample, region), averaged over the batch
    let n = 60;
    let mut dice = [0.0; 3];
    for b in 0..2 {
        for c in 0..3 {
            let (pp, tt) = (
                &p.data()[(b * 3 + c) * n..][..n],
                &t.data()[(b * 3 + c) * n..][..n],
            );
            let inter: f64 = pp.iter().zip(tt).map(|(x, y)| x * y).sum();
            let total: f64 = pp.iter().sum::<f64>() + tt.iter().sum::<f64>();
            dice[c] += (2.0 * inter + eps) / (total + eps) / 2.0;
        }
    }
    let uniform_err = (loss_of([1.0; 3]) - (1.0 - dice.iter().sum::<f64>() / 3.0)).abs();
    let base = loss_of([2.0, 1.0, 1.0]);
    let scale_err = [0.25, 3.0, 1e3]
        .iter()
        .map(|k| (loss_of([2.0 * k, *k, *k]) - base).abs())
        .fold(0.0, f64::max);

    let g = Graph::new();
    let pv = g.constant(p.clone());
    let seg = weighted_dice_loss(&g, pv, &t, [1.0; 3], eps).unwrap();
    let clear = uniform01(&shape, 3, false);
    let rec = recon_loss(&g, pv, &clear, RecNorm::Mse).unwrap();
    let (sv, rv) = (g.value(seg).item(), g.value(rec).item());
    let zero = g.value(joint_loss(&g, seg, Some(rec), 0.0).unwrap()).item();
    let tenth = g.value(joint_loss(&g, seg, Some(rec), 0.1).unwrap()).item();
    let lambda0 = zero.to_bits() == sv.to_bits();
    let lambda01 = tenth.to_bits() == (sv + 0.1 * rv).to_bits();
    let elapsed = t0.elapsed();
    let pass = uniform_err <= 1e-15 && scale_err <= 1e-15 && lambda0 && lambda01;
    let detail = format!(
        "loss identities (f64): |uniform - (1 - mean dice)| {uniform_err:.1e}, weight-scale drift {scale_err:.1e} (<= 1e-15); lambda=0 -> L_seg bitwise {lambda0}; lambda=0.1 -> L_seg + 0.1 L_rec bitwise {lambda01}"
    );
    assert!(verdict(4, pass, &detail, elapsed));
}

#[test]
fn c05_shapes_and_structure() {
    let _g = serial();
    let t0 = Instant::now();
    let cfg = NetConfig::desk();
    let net = DabsegNet::<f64>::new(cfg.clone(), 5).unwrap();
    let d = 32;
    let x = uniform01(&[1, 4, d, d, d], 6, false);
    let g = Graph::new();
    let xv = g.constant(x);
    let view = net.view();
    let restored = view.fdmds_forward(&g, xv).unwrap();
    let fdmds_ok = g.shape(restored) == [1, 4, d, d, d];
    let (tokens, _) = view.embed_modalities(&g, restored).unwrap();
    let token_ok = cfg.dami.patch_stride == 4
        && tokens
            .iter()
            .all(|&t| g.shape(t) == [(d / 4).pow(3), cfg.dami.embed_dim]);
    let enc = view.encode(&g, restored).unwrap();
    let scales: Vec<Vec<usize>> = enc.fused.iter().map(|&f| g.shape(f)).collect();
    let c0 = cfg.dami.embed_dim;
    let scales_ok = cfg.dami.encoder_depths == [2, 2, 2]
        && scales
            == [
                vec![1, c0, 8, 8, 8],
                vec![1, 2 * c0, 4, 4, 4],
                vec![1, 4 * c0, 2, 2, 2],
            ];
    let dec = view.decode(&g, &enc, Default::default()).unwrap();
    let dec_ok = g.shape(dec)[2..] == [d, d, d];
    let out = net.forward(&g, xv).unwrap();
    let pred_ok = g.shape(out.probs) == [1, 3, d, d, d];
    let elapsed = t0.elapsed();
    let pass = fdmds_ok && token_ok && scales_ok && dec_ok && pred_ok;
    let detail = format!(
        "structure: FDMDS keeps [1,4,{d}^3] {fdmds_ok}; tokens (D/4)^3 = {} {token_ok}; 3 encoder scales {:?} {scales_ok}; decoder at voxel resolution {dec_ok}; prediction [1,3,{d}^3] {pred_ok}",
        (d / 4).pow(3),
        scales.iter().map(|s| s[2]).collect::<Vec<_>>()
    );
    assert!(verdict(5, pass, &detail, elapsed));
}

/// Learning rate of the desk-scale acceptance runs.
const DESK_LR: f64 = 1e-2;

#[test]
fn c06_overfit_smoke() {
    let _g = serial();
    let t0 = Instant::now();
    let mut c = TrainConfig::default();
    c.data.phantoms = 2;
    c.data.split_ratios = [1.0, 0.0, 0.0];
    c.epochs = 50;
    c.steps_per_epoch = 10;
    c.lr0 = DESK_LR;
    c.checkpoint_every = 0;
    let split = load_split(&c).unwrap();
    let mut t = Trainer::<f32>::new(c).unwrap();
    t.run(&split.train, None, |_| {}).unwrap();
    let steps = t.log.steps.len();
    let [et, tc, wt] = t.log.epochs.last().unwrap().soft_dice;
    let elapsed = t0.elapsed();
    let pass = steps <= 500
        && wt >= 0.95
        && tc >= 0.90
        && et >= 0.85
        && elapsed < Duration::from_secs(1800);
    let detail = format!(
        "overfit: 2 phantoms 48^3, 32^3 patches, {steps} steps -> training soft Dice WT {wt:.3} (>= 0.95), TC {tc:.3} (>= 0.90), ET {et:.3} (>= 0.85); < 30 min"
    );
    assert!(verdict(6, pass, &detail, elapsed));
}

#[test]
fn c07_directional_ablation() {
    let _g = serial();
    let t0 = Instant::now();
    let mut base = TrainConfig::default();
    base.data.phantoms = 20;
    base.data.split_ratios = [16.0, 0.0, 4.0];
    base.lr0 = DESK_LR;
    base.checkpoint_every = 0;
    let dir = scratch("ablation");
    let rows = run_ablation(&base, &AblationVariant::ALL, Some(&dir), |_, _| {}).unwrap();
    let dice_of = |v: AblationVariant| {
        let s = &rows.iter().find(|r| r.variant == v).unwrap().summary;
        [s.dice[0].mean, s.dice[1].mean, s.dice[2].mean]
    };
    let (full, dami) = (
        dice_of(AblationVariant::Full),
        dice_of(AblationVariant::Dami),
    );
    let gap: [f64; 3] = std::array::from_fn(|i| full[i] - dami[i]);
    let mean = |d: [f64; 3]| d.iter().sum::<f64>() / 3.0;
    let (l01, l02) = (
        mean(dice_of(AblationVariant::DamiFdmdsLambda01)),
        mean(dice_of(AblationVariant::DamiFdmdsLambda02)),
    );
    let tested = rows[0].outcome.report.cases.len();
    let elapsed = t0.elapsed();
    let pass =
        tested == 4 && gap.iter().all(|&g| g > 0.0) && elapsed < Duration::from_secs(4 * 3600);
    let detail = format!(
        "ablation: 20 degraded phantoms (16 train / {tested} test), full - DAMI test Dice gap ET {:+.3} TC {:+.3} WT {:+.3} (all > 0); reported: mean Dice lambda=0.1 {l01:.3} vs lambda=0.2 {l02:.3}; < 4 h",
        gap[0], gap[1], gap[2]
    );
    let _ = std::io::stderr().write_all(dabseg::train::ablation_csv(&rows).as_bytes());
    // The direction is a measured outcome on synthetic phantoms; a FAIL is
    // reported, not raised. The run itself must still be complete.
    verdict(7, pass, &detail, elapsed);
    assert_eq!((rows.len(), tested), (4, 4));
}

#[test]
fn c08_determinism_and_resume() {
    let _g = serial();
    let t0 = Instant::now();
    let mut c = TrainConfig::default();
    c.precision = Precision::F64;
    c.patch_size = [16; 3];
    c.epochs = 4;
    c.steps_per_epoch = 2;
    c.checkpoint_every = 2;
    c.data.phantoms = 3;
    c.data.phantom_size = 24;
    c.data.split_ratios = [1.0, 0.0, 0.0];
    let split = load_split(&c).unwrap();
    let dir = scratch("determinism");
    let run = |out: Option<&std::path::Path>| {
        let mut t = Trainer::<f64>::new(c.clone()).unwrap();
        t.run(&split.train, out, |_| {}).unwrap();
        t
    };
    let a = run(Some(&dir));
    let b = run(None);
    let logs_equal = a.log.steps_csv() == b.log.steps_csv() && a.log == b.log;
    let state_equal = a.checkpoint().encode() == b.checkpoint().encode();

    let ckpt = Checkpoint::<f64>::load(&dir.join(checkpoint_name(2))).unwrap();
    let mut resumed = Trainer::resume(c.clone(), ckpt).unwrap();
    resumed.run(&split.train, None, |_| {}).unwrap();
    let resume_equal =
        resumed.log == a.log && resumed.checkpoint().encode() == a.checkpoint().encode();
    let elapsed = t0.elapsed();
    let pass = logs_equal && state_equal && resume_equal;
    let detail = format!(
        "determinism (f64, desk net): repeat run logs identical {logs_equal}, final state identical {state_equal}; reload at epoch 2 of 4 reproduces log and state bitwise {resume_equal}"
    );
    assert!(verdict(8, pass, &detail, elapsed));
}

#[test]
fn c09_split_arithmetic() {
    let _g = serial();
    let t0 = Instant::now();
    let cases: Vec<CaseRecord> = (0..369)
        .map(|i| CaseRecord {
            case_id: format!("BraTS20_Training_{:03}", i + 1),
            volumes: Vec::new(),
            labels: Default::default(),
        })
        .collect();
    let split = split_dataset(&cases, [8.0, 1.0, 1.0], 0).unwrap();
    let sizes = split.sizes();
    let mut ids: Vec<String> = split
        .manifest_entries()
        .into_iter()
        .map(|(id, _)| id)
        .collect();
    ids.sort();
    ids.dedup();
    let elapsed = t0.elapsed();
    let pass = sizes == (295, 37, 37) && ids.len() == 369;
    let detail = format!(
        "split: 369 cases at 8:1:1 -> {}/{}/{} (295/37/37), disjoint and complete",
        sizes.0, sizes.1, sizes.2
    );
    assert!(verdict(9, pass, &detail, elapsed));
}

fn random_report(rng: &mut ChaCha8Rng) -> EvalReport {
    let n = rng.gen_range(1..30);
    // coarse values so ties occur
    let v = |rng: &mut ChaCha8Rng| f64::from(rng.gen_range(0..=20u8)) / 20.0;
    EvalReport::new(
        (0..n)
            .map(|i| CaseMetrics {
                case_id: format!("c{i}"),
                dice: [v(rng), v(rng), v(rng)],
                hd95: [rng.gen_range(0.0..10.0); 3],
            })
            .collect(),
    )
}

#[test]
fn c10_report_curves() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut ok = true;
    let mut reports: Vec<EvalReport> = (0..200).map(|_| random_report(&mut rng)).collect();
    reports.push(EvalReport::new(vec![CaseMetrics {
        case_id: "one".into(),
        dice: [0.8; 3],
        hd95: [1.0; 3],
    }]));
    for report in &reports {
        for r in Region::ALL {
            let mut input: Vec<f64> = report.cases.iter().map(|c| c.dice[r.index()]).collect();
            let sorted = sorted_dice(report, r);
            let mut values: Vec<f64> = sorted.iter().map(|s| s.1).collect();
            ok &= sorted.iter().enumerate().all(|(i, s)| s.0 == i);
            ok &= values.windows(2).all(|w| w[0] <= w[1]);
            input.sort_by(f64::total_cmp);
            values.sort_by(f64::total_cmp);
            ok &= input == values;
            let cdf = dice_cdf(report, r);
            ok &= cdf.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1);
            ok &= cdf.last().map(|l| l.1) == Some(1.0);
            // fraction <= x against a direct count
            let n = report.cases.len() as f64;
            ok &= cdf
                .iter()
                .all(|&(x, f)| f == input.iter().filter(|&&v| v <= x).count() as f64 / n);
        }
    }
    let single = dice_cdf(reports.last().unwrap(), Region::Wt) == vec![(0.8, 1.0)];
    let dir = scratch("curves");
    let files = report_curves(&reports[0], &dir).unwrap();
    let written = files.len() == 3
        && files.iter().all(|p| {
            std::fs::read_to_string(p)
                .unwrap()
                .starts_with("kind,x,y\n")
        });
    let elapsed = t0.elapsed();
    let pass = ok && single && written;
    let detail = format!(
        "report curves: {} reports, sorted output is an ascending permutation and CDF nondecreasing ending at 1.0: {ok}; single case 0.8 -> [(0.8, 1.0)] {single}; curves_<region>.csv written {written}",
        reports.len()
    );
    assert!(verdict(10, pass, &detail, elapsed));
}
