use std::path::PathBuf;

use dabseg::metrics::{dice_metric, hd95};
use dabseg::motion::{degrade_dataset, SeverityPreset};
use dabseg::net::{DabsegNet, NetConfig};
use dabseg::report::CSV_HEADER;
use dabseg::train::*;
use dabseg::volume::{
    generate_phantom, scan_dataset, write_case, Dims, Mask, MultiModalVolume, PhantomProfile,
    Region,
};
use dabseg::{Error, Precision};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("dabseg_train_{name}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

/// Smallest network on 12^3 phantoms with 8^3 patches, 64-bit.
fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.net = NetConfig::tiny();
    c.precision = Precision::F64;
    c.patch_size = [8; 3];
    c.epochs = 3;
    c.steps_per_epoch = 2;
    c.lr0 = 1e-3;
    c.checkpoint_every = 1;
    c.data.phantoms = 3;
    c.data.phantom_size = 12;
    c.data.split_ratios = [1.0, 0.0, 0.0];
    c
}

fn train64(config: &TrainConfig) -> Trainer<f64> {
    let split = load_split(config).unwrap();
    let mut t = Trainer::<f64>::new(config.clone()).unwrap();
    t.run(&split.train, None, |_| {}).unwrap();
    t
}

fn assert_same_params(a: &Trainer<f64>, b: &Trainer<f64>) {
    for (ia, ib) in a.net.store.ids().zip(b.net.store.ids()) {
        let (va, vb) = (a.net.store.value(ia).data(), b.net.store.value(ib).data());
        assert!(
            va.iter().zip(vb).all(|(x, y)| x.to_bits() == y.to_bits()),
            "{} differs",
            a.net.store.name(ia)
        );
    }
}

#[test]
fn logged_lr_follows_the_closed_form_cosine() {
    let mut c = tiny_config();
    c.lr_min = 1e-5;
    let t = train64(&c);
    let total = (c.epochs * c.steps_per_epoch) as f64;
    assert_eq!(t.log.steps.len(), 6);
    for (i, s) in t.log.steps.iter().enumerate() {
        assert_eq!(s.step, i);
        let expect =
            1e-5 + 0.5 * (1e-3 - 1e-5) * (1.0 + (std::f64::consts::PI * i as f64 / total).cos());
        assert!(
            (s.lr - expect).abs() < 1e-15,
            "step {i}: {} vs {expect}",
            s.lr
        );
    }
    assert_eq!(t.log.steps[0].lr, 1e-3);
}

#[test]
fn crop_corners_are_uniform() {
    // 8 valid corners per axis; each count must sit within 5 sigma of N/8.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000;
    let mut counts = [[0usize; 8]; 3];
    for _ in 0..n {
        let w = crop_window([12, 15, 9], [5, 8, 2], &mut rng).unwrap();
        for a in 0..3 {
            counts[a][w.origin[a]] += 1;
        }
    }
    let p = 1.0 / 8.0;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for axis in counts {
        for c in axis {
            assert!((c as f64 - n as f64 * p).abs() < 5.0 * sigma, "{axis:?}");
        }
    }
}

#[test]
fn crop_is_deterministic_under_a_seed() {
    let a = crop_window([20; 3], [8; 3], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let b = crop_window([20; 3], [8; 3], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(a, b);
}

/// A case whose every value encodes its channel and voxel index, so the
/// source window of any crop can be read back.
fn indexed_case(dims: Dims) -> PreparedCase {
    let n = dims.iter().product::<usize>();
    let code = |c: usize, off: f64| (0..c * n).map(|i| off + i as f64).collect::<Vec<_>>();
    let volume = MultiModalVolume::new("idx", dims, [1.0; 3], vec![0.0; 4 * n]).unwrap();
    let labels = dabseg::volume::LabelVolume::new(dims, vec![0; n]).unwrap();
    let mut case = prepare_case(&volume, None, &labels).unwrap();
    case.input = code(4, 0.0);
    case.clean = Some(code(4, 1e7));
    case.target = code(3, 2e7);
    case
}

fn origin_of(first: f64, off: f64, dims: Dims) -> [usize; 3] {
    let i = (first - off) as usize;
    [i / (dims[1] * dims[2]), i / dims[2] % dims[1], i % dims[2]]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn crop_windows_are_aligned(d in 2usize..9, h in 2usize..9, w in 2usize..9, frac in 0.1f64..1.0, seed in any::<u64>(), clean_input in any::<bool>()) {
        let dims = [d, h, w];
        let size = dims.map(|n| ((n as f64 * frac).ceil() as usize).clamp(1, n));
        let case = indexed_case(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_crop(&case, size, &mut rng, clean_input).unwrap();
        let clean = p.clean.as_ref().unwrap();
        prop_assert_eq!(origin_of(clean[0], 1e7, dims), p.window.origin);
        prop_assert_eq!(origin_of(p.target[0], 2e7, dims), p.window.origin);
        let input_off = if clean_input { 1e7 } else { 0.0 };
        prop_assert_eq!(origin_of(p.input[0], input_off, dims), p.window.origin);
        prop_assert_eq!(&p.input[..], &extract(if clean_input { clean_src(&case) } else { &case.input }, dims, &p.window)[..]);
        prop_assert_eq!(&p.target[..], &extract(&case.target, dims, &p.window)[..]);
    }
}

fn clean_src(case: &PreparedCase) -> &[f64] {
    case.clean.as_deref().unwrap()
}

#[test]
fn oversize_crop_is_a_shape_error() {
    let case = indexed_case([4, 4, 4]);
    let r = random_crop(&case, [5, 4, 4], &mut ChaCha8Rng::seed_from_u64(0), false);
    assert!(matches!(r, Err(Error::Shape(_))));
}

#[test]
fn without_reconstruction_the_loss_is_the_segmentation_loss() {
    let mut c = tiny_config();
    c.set_flags(AblationVariant::Dami.flags(false));
    assert!(!c.needs_clean());
    let t = train64(&c);
    for s in &t.log.steps {
        assert_eq!(s.rec_loss, None);
        assert_eq!(s.loss.to_bits(), s.seg_loss.to_bits());
    }
    assert!(t.log.epochs.iter().all(|e| e.rec_loss.is_none()));
}

#[test]
fn joint_loss_adds_a_tenth_of_the_reconstruction() {
    let t = train64(&tiny_config());
    for s in &t.log.steps {
        let rec = s.rec_loss.expect("full configuration reconstructs");
        assert!((s.loss - (s.seg_loss + 0.1 * rec)).abs() < 1e-12);
    }
}

#[test]
fn et_weight_switches_on_halfway() {
    let mut c = tiny_config();
    c.epochs = 4;
    c.steps_per_epoch = 1;
    let t = train64(&c);
    let w: Vec<[f64; 3]> = t.log.steps.iter().map(|s| s.weights).collect();
    assert_eq!(
        w,
        vec![[1.0; 3], [1.0; 3], [2.0, 1.0, 1.0], [2.0, 1.0, 1.0]]
    );
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let c = tiny_config();
    let (a, b) = (train64(&c), train64(&c));
    assert_eq!(a.log.steps_csv(), b.log.steps_csv());
    assert_eq!(a.log, b.log);
    assert_same_params(&a, &b);
    assert_eq!(a.checkpoint().encode(), b.checkpoint().encode());

    let mut other = c.clone();
    other.seed = 1;
    assert_ne!(train64(&other).log.steps_csv(), a.log.steps_csv());
}

#[test]
fn resuming_from_a_checkpoint_reproduces_the_trajectory() {
    let c = tiny_config();
    let split = load_split(&c).unwrap();
    let dir = scratch("resume");
    let mut straight = Trainer::<f64>::new(c.clone()).unwrap();
    straight.run(&split.train, Some(&dir), |_| {}).unwrap();
    for e in 1..=3 {
        assert!(dir.join(checkpoint_name(e)).is_file());
    }

    let ckpt = Checkpoint::<f64>::load(&dir.join("ckpt_1.bin")).unwrap();
    assert_eq!((ckpt.epoch, ckpt.step), (1, 2));
    let mut resumed = Trainer::resume(c.clone(), ckpt).unwrap();
    resumed.run(&split.train, None, |_| {}).unwrap();
    assert_eq!(resumed.log, straight.log);
    assert_same_params(&resumed, &straight);
    assert_eq!(resumed.adam.t, straight.adam.t);
    assert_eq!(
        resumed.checkpoint().encode(),
        straight.checkpoint().encode()
    );

    let mut changed = c.clone();
    changed.lr0 = 2e-3;
    let ckpt = Checkpoint::<f64>::load(&dir.join("ckpt_1.bin")).unwrap();
    assert!(matches!(
        Trainer::resume(changed, ckpt),
        Err(Error::Config(_))
    ));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let t = train64(&tiny_config());
    let bytes = t.checkpoint().encode();
    assert!(Checkpoint::<f64>::decode(&bytes).is_ok());
    assert!(matches!(
        Checkpoint::<f32>::decode(&bytes),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        Checkpoint::<f64>::decode(&bytes[..bytes.len() - 3]),
        Err(Error::Corruption(_))
    ));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(
        Checkpoint::<f64>::decode(&extra),
        Err(Error::Corruption(_))
    ));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(
        Checkpoint::<f64>::decode(&magic),
        Err(Error::Format(_))
    ));

    let mut ck = Checkpoint::<f64>::decode(&bytes).unwrap();
    ck.config_json = ck.config_json.replace("\"epochs\":3", "\"epochs\":4");
    assert!(matches!(ck.config(), Err(Error::Corruption(_))));
}

#[test]
fn tiled_inference_on_one_patch_equals_direct_inference() {
    let c = tiny_config();
    let net = DabsegNet::<f64>::new(c.net.clone(), 3).unwrap();
    let split = load_split(&c).unwrap();
    let case = &split.train[0];
    let w = CropWindow {
        origin: [2, 2, 2],
        size: [8; 3],
    };
    let input = extract(&case.input, case.dims, &w);
    let model = NetPredictor {
        net: &net,
        patch: [8; 3],
    };
    let tiled = tiled_predict(&model, &input, [8; 3]).unwrap();
    let x = dabseg::autodiff::Tensor::from_f64(&[1, 4, 8, 8, 8], &input).unwrap();
    let direct = net.infer(&x).unwrap().to_f64();
    assert_eq!(tiled, direct);
}

/// Returns the first three input channels as probabilities.
struct Passthrough([usize; 3]);

impl PatchPredictor for Passthrough {
    fn patch_size(&self) -> Dims {
        self.0
    }

    fn predict_patch(&self, input: &[f64]) -> dabseg::Result<Vec<f64>> {
        Ok(input[..input.len() / 4 * 3].to_vec())
    }
}

/// Emits the same probability everywhere.
struct Constant(f64, [usize; 3]);

impl PatchPredictor for Constant {
    fn patch_size(&self) -> Dims {
        self.1
    }

    fn predict_patch(&self, input: &[f64]) -> dabseg::Result<Vec<f64>> {
        Ok(vec![self.0; input.len() / 4 * 3])
    }
}

fn phantom_case(seed: u64, size: usize) -> PreparedCase {
    let (v, l) = generate_phantom(seed, [size; 3], &PhantomProfile::for_size(size)).unwrap();
    prepare_case(&v, None, &l).unwrap()
}

#[test]
fn oracle_model_scores_perfectly() {
    // The oracle reads the targets from its input; 7 does not divide 20,
    // so edge tiles are padded and cropped.
    let cases: Vec<PreparedCase> = (0..3)
        .map(|s| {
            let mut c = phantom_case(s, 20);
            let n = 20 * 20 * 20;
            c.input[..3 * n].copy_from_slice(&c.target);
            c
        })
        .collect();
    let report = evaluate(&Passthrough([7, 7, 7]), &cases, 0.5).unwrap();
    for row in &report.cases {
        assert_eq!(row.dice, [1.0; 3]);
        assert_eq!(row.hd95, [0.0; 3]);
    }
    let s = report.summary();
    assert_eq!(s.dice[0].mean, 1.0);
    assert_eq!(s.dice[0].std, 0.0);
}

#[test]
fn constant_model_matches_the_all_foreground_value() {
    let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
    let case = phantom_case(9, 16);
    let n = 16 * 16 * 16;
    let report = evaluate(
        &Constant(sigmoid(0.5), [8; 3]),
        std::slice::from_ref(&case),
        0.5,
    )
    .unwrap();
    let all = Mask::new([16; 3], vec![true; n]).unwrap();
    for r in Region::ALL {
        let gt = case.regions.get(r);
        let g = gt.data.iter().filter(|&&b| b).count() as f64;
        let dice = report.cases[0].dice[r.index()];
        assert!((dice - 2.0 * g / (n as f64 + g)).abs() < 1e-12);
        assert_eq!(dice, dice_metric(&all, gt));
        assert_eq!(report.cases[0].hd95[r.index()], hd95(&all, gt, [1.0; 3]));
    }
    // A constant below threshold predicts nothing.
    let none = evaluate(
        &Constant(sigmoid(-0.5), [8; 3]),
        std::slice::from_ref(&case),
        0.5,
    )
    .unwrap();
    assert_eq!(none.cases[0].dice, [0.0; 3]);
}

#[test]
fn logs_and_reports_follow_their_csv_contracts() {
    let c = tiny_config();
    let dir = scratch("csv");
    let mut with_test = c.clone();
    with_test.data.phantoms = 4;
    with_test.data.split_ratios = [3.0, 0.0, 1.0];
    let out = train_and_evaluate(&with_test, Some(&dir), |_| {}).unwrap();

    let steps = std::fs::read_to_string(dir.join("steps.csv")).unwrap();
    let mut lines = steps.lines();
    assert_eq!(lines.next(), Some(STEP_CSV_HEADER));
    let cols = STEP_CSV_HEADER.split(',').count();
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6);
    for (i, row) in rows.iter().enumerate() {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f.len(), cols);
        assert_eq!(f[1].parse::<usize>().unwrap(), i);
        assert_eq!(f[8].parse::<f64>().unwrap(), out.log.steps[i].loss);
    }
    let epochs = std::fs::read_to_string(dir.join("train_log.jsonl")).unwrap();
    assert_eq!(epochs.lines().count(), 3);
    let e: EpochRecord = serde_json::from_str(epochs.lines().last().unwrap()).unwrap();
    assert_eq!(e, out.log.epochs[2]);

    let report = std::fs::read_to_string(dir.join("report.csv")).unwrap();
    assert_eq!(report.lines().next(), Some(CSV_HEADER));
    let ids: Vec<&str> = report
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(ids.len(), 3);
    assert!(ids[0].starts_with("phantom_"));
    assert_eq!(&ids[1..], ["mean", "std"]);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["metadata"]["config_hash"], with_test.hash());
    assert_eq!(
        std::fs::read_to_string(dir.join("config.sha256"))
            .unwrap()
            .trim(),
        with_test.hash()
    );
    let snap = TrainConfig::load(&dir.join("config.json")).unwrap();
    assert_eq!(snap, with_test);

    let (cfg, again) = evaluate_checkpoint(&dir.join("ckpt_3.bin"), None).unwrap();
    assert_eq!(cfg, with_test);
    assert_eq!(again.to_csv(), out.report.to_csv());
}

#[test]
fn dami_only_never_reads_clean_volumes() {
    let root = scratch("noclean");
    let profile = PhantomProfile::for_size(12);
    for i in 0..3 {
        let (mut v, l) = generate_phantom(i, [12; 3], &profile).unwrap();
        v.case_id = format!("case{i}");
        write_case(&root, &v, &l).unwrap();
    }
    let records = scan_dataset(&root).unwrap();
    degrade_dataset(
        &records,
        &SeverityPreset::resolve("S2").unwrap(),
        0,
        None,
        false,
    )
    .unwrap();
    // Corrupt every clean modality; any read of one fails.
    for r in &records {
        for p in &r.volumes {
            std::fs::write(p, b"corrupted").unwrap();
        }
    }
    let mut c = tiny_config();
    c.data.root = Some(root.clone());
    c.data.degraded_suffix = Some("S2".into());
    let dami = AblationVariant::Dami.apply(&c);
    assert!(!dami.needs_clean());
    let split = load_split(&dami).unwrap();
    assert_eq!(split.train.len(), 3);
    assert!(split.train.iter().all(|p| p.clean.is_none()));
    let mut t = Trainer::<f64>::new(dami).unwrap();
    t.run(&split.train, None, |_| {}).unwrap();

    let full = AblationVariant::Full.apply(&c);
    assert!(full.needs_clean());
    assert!(load_split(&full).is_err());
}

#[test]
fn non_finite_loss_aborts_with_a_dump() {
    let c = tiny_config();
    let split = load_split(&c).unwrap();
    let mut t = Trainer::<f64>::new(c).unwrap();
    let id = t
        .net
        .store
        .ids()
        .find(|&id| t.net.store.name(id) == "head.b")
        .unwrap();
    t.net.store.value_mut(id).data_mut()[0] = f64::NAN;
    let dir = scratch("nan");
    let err = t.run(&split.train, Some(&dir), |_| {}).unwrap_err();
    let Error::Diverged { step, lr, .. } = err else {
        panic!("expected divergence, got {err:?}")
    };
    assert_eq!(step, 0);
    assert_eq!(lr, 1e-3);
    let dump: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("nan_dump.json")).unwrap()).unwrap();
    assert_eq!(dump["step"], 0);
    assert!(dump["error"].as_str().unwrap().contains("step 0"));
}

#[test]
fn precision_mismatch_is_a_config_error() {
    let c = tiny_config();
    assert!(matches!(Trainer::<f32>::new(c), Err(Error::Config(_))));
}

#[test]
fn single_precision_training_runs() {
    let mut c = tiny_config();
    c.precision = Precision::F32;
    let split = load_split(&c).unwrap();
    let mut t = Trainer::<f32>::new(c).unwrap();
    t.run(&split.train, None, |_| {}).unwrap();
    assert!(t.log.steps.iter().all(|s| s.loss.is_finite()));
}

#[test]
fn seed_env_overrides_the_config() {
    let mut c = tiny_config();
    std::env::set_var(SEED_ENV, "77");
    c.apply_env().unwrap();
    std::env::remove_var(SEED_ENV);
    assert_eq!(c.seed, 77);
    let mut d = tiny_config();
    d.apply_env().unwrap();
    assert_eq!(d.seed, 0);
}

#[test]
fn network_gradient_check_passes() {
    let r = network_gradcheck(0, 2).unwrap();
    assert!(r.compared > 0);
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}
