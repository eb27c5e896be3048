use dabseg::autodiff::gradcheck::{check_params, GradCheckOptions};
use dabseg::autodiff::{Graph, ParamStore, Tensor, Var};
use dabseg::loss::{recon_loss, weighted_dice_loss, RecNorm};
use dabseg::net::{DabsegNet, ForwardOptions, NetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn binary(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
            .collect(),
    )
    .unwrap()
}

fn fdmds_only(c_mid: usize) -> NetConfig {
    let mut c = NetConfig::tiny();
    c.fdmds.c_mid = c_mid;
    c
}

#[test]
fn fdmds_preserves_shape() {
    let net = DabsegNet::<f64>::new(fdmds_only(4), 1).unwrap();
    for shape in [[1, 4, 3, 3, 3], [2, 4, 5, 4, 6], [1, 4, 8, 8, 8]] {
        let g = Graph::new();
        let x = g.constant(random(&shape, 2));
        let v = net.view().fdmds_forward(&g, x).unwrap();
        assert_eq!(g.shape(v), shape);
    }
    let g = Graph::new();
    let bad = g.constant(random(&[1, 3, 4, 4, 4], 3));
    assert!(net.view().fdmds_forward(&g, bad).is_err());
}

#[test]
fn fdmds_zero_residual_is_leaky_identity() {
    let mut net = DabsegNet::<f64>::new(fdmds_only(4), 1).unwrap();
    let conv3 = net.params.fdmds.clone().unwrap().conv3;
    net.store.value_mut(conv3.w).data_mut().fill(0.0);
    net.store.value_mut(conv3.b.unwrap()).data_mut().fill(0.0);
    let x = random(&[1, 4, 5, 5, 5], 4);
    let g = Graph::new();
    let v = net.view().fdmds_forward(&g, g.constant(x.clone())).unwrap();
    let expect: Vec<f64> = x
        .data()
        .iter()
        .map(|&a| if a > 0.0 { a } else { 0.01 * a })
        .collect();
    assert_eq!(g.value(v).data(), &expect[..]);
}

#[test]
fn fdmds_parameter_gradients_match_finite_differences() {
    let stem = DabsegNet::<f64>::new(fdmds_only(3), 5).unwrap();
    let x = random(&[1, 4, 6, 6, 6], 6);
    let mut store = stem.store.clone();
    let report = check_params(
        &mut store,
        |g, s| {
            let v = stem.view_with(s).fdmds_forward(g, g.constant(x.clone()))?;
            Ok(g.sum(v))
        },
        GradCheckOptions {
            max_per_tensor: Some(40),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert!(report.compared > 100, "{report:?}");
}

#[test]
fn embedding_token_shapes() {
    let net = DabsegNet::<f64>::new(NetConfig::default(), 1).unwrap();
    let g = Graph::new();
    let x = g.constant(random(&[1, 4, 32, 32, 32], 1));
    let (tokens, grid) = net.view().embed_modalities(&g, x).unwrap();
    assert_eq!(grid, [8, 8, 8]);
    assert_eq!(tokens.len(), 4);
    for t in &tokens {
        assert_eq!(g.shape(*t), [512, 32]);
    }

    let mut cfg = NetConfig::tiny();
    cfg.dami.patch_stride = 1;
    cfg.dami.decoder_stages = 3;
    let net = DabsegNet::<f64>::new(cfg, 1).unwrap();
    let g = Graph::new();
    let x = g.constant(random(&[1, 4, 4, 3, 2], 1));
    let (tokens, _) = net.view().embed_modalities(&g, x).unwrap();
    assert_eq!(g.shape(tokens[0]), [24, 8]);

    let g = Graph::new();
    let x = g.constant(random(&[1, 4, 6, 6, 6], 1));
    let net = DabsegNet::<f64>::new(NetConfig::default(), 1).unwrap();
    assert!(net.view().embed_modalities(&g, x).is_err());
}

#[test]
fn identical_modalities_embed_identically() {
    let net = DabsegNet::<f64>::new(NetConfig::tiny(), 3).unwrap();
    let one = random(&[8, 8, 8], 9);
    let data: Vec<f64> = (0..4).flat_map(|_| one.data().to_vec()).collect();
    let g = Graph::new();
    let x = g.constant(Tensor::new(&[1, 4, 8, 8, 8], data).unwrap());
    let (tokens, _) = net.view().embed_modalities(&g, x).unwrap();
    for t in &tokens[1..] {
        assert_eq!(g.value(*t).data(), g.value(tokens[0]).data());
    }
}

fn block_outputs(
    net: &DabsegNet<f64>,
    inputs: &[Tensor<f64>],
) -> (Vec<Vec<f64>>, Vec<Tensor<f64>>) {
    let g = Graph::new();
    let xs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let (out, maps) = net
        .view()
        .cross_modal_block(&g, &net.params.stages[0].blocks[0], &xs)
        .unwrap();
    (
        out.iter().map(|&v| g.value(v).data().to_vec()).collect(),
        maps.iter().map(|&m| (*g.value(m)).clone()).collect(),
    )
}

#[test]
fn cross_modal_block_symmetries() {
    let net = DabsegNet::<f64>::new(NetConfig::tiny(), 7).unwrap();
    let same = random(&[10, 8], 1);
    let (out, _) = block_outputs(&net, &[same.clone(), same.clone(), same.clone(), same]);
    assert!(out.iter().all(|o| *o == out[0]));

    let inputs: Vec<_> = (0..4).map(|i| random(&[10, 8], 10 + i)).collect();
    let (out, maps) = block_outputs(&net, &inputs);
    assert_eq!(maps.len(), 16);
    for m in &maps {
        for row in m.data().chunks(10) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    let sigma = [2, 0, 3, 1];
    let permuted: Vec<_> = sigma.iter().map(|&i| inputs[i].clone()).collect();
    let (pout, _) = block_outputs(&net, &permuted);
    for (j, &i) in sigma.iter().enumerate() {
        let err = pout[j]
            .iter()
            .zip(&out[i])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "modality {i}: {err}");
    }

    let g = Graph::new();
    let xs: Vec<Var> = inputs[..3].iter().map(|t| g.constant(t.clone())).collect();
    assert!(net
        .view()
        .cross_modal_block(&g, &net.params.stages[0].blocks[0], &xs)
        .is_err());
}

#[test]
fn encoder_scales_and_decoder_resolution() {
    let net = DabsegNet::<f32>::new(NetConfig::default(), 2).unwrap();
    let g = Graph::new();
    let x = g.constant(random(&[1, 4, 32, 32, 32], 3).cast::<f32>());
    let view = net.view();
    let enc = view.encode(&g, x).unwrap();
    let shapes: Vec<_> = enc.fused.iter().map(|&f| g.shape(f)).collect();
    assert_eq!(
        shapes,
        [
            vec![1, 32, 8, 8, 8],
            vec![1, 64, 4, 4, 4],
            vec![1, 128, 2, 2, 2]
        ]
    );
    assert_eq!(enc.attention.len(), 6);
    for (l, stage) in net.params.stages.iter().enumerate() {
        assert_eq!(
            net.store.value(stage.fuse.conv.w).shape()[1],
            4 * net.config.dami.stage_channels[l]
        );
    }
    let out = view.decode(&g, &enc, ForwardOptions::default()).unwrap();
    assert_eq!(g.shape(out), [1, 16, 32, 32, 32]);
    let (_, probs) = view.predict(&g, out).unwrap();
    assert_eq!(g.shape(probs), [1, 3, 32, 32, 32]);
    assert!(g.value(probs).data().iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn decoder_returns_to_voxel_resolution_for_other_configs() {
    for (cfg, dims) in [
        (NetConfig::tiny(), [8, 16, 8]),
        (NetConfig::desk(), [16, 16, 32]),
    ] {
        let net = DabsegNet::<f64>::new(cfg, 1).unwrap();
        let g = Graph::new();
        let x = g.constant(random(&[2, 4, dims[0], dims[1], dims[2]], 1));
        let out = net.forward(&g, x).unwrap();
        assert_eq!(g.shape(out.probs), [2, 3, dims[0], dims[1], dims[2]]);
        assert_eq!(
            g.shape(out.restored.unwrap()),
            [2, 4, dims[0], dims[1], dims[2]]
        );
    }
}

#[test]
fn skips_are_live() {
    let net = DabsegNet::<f64>::new(NetConfig::tiny(), 4).unwrap();
    let x = random(&[1, 4, 8, 8, 8], 5);
    let run = |zero: bool| {
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let f = net
            .view()
            .forward_with(&g, xv, ForwardOptions { zero_skips: zero })
            .unwrap();
        g.value(f.logits).data().to_vec()
    };
    let (a, b) = (run(false), run(true));
    let diff = a
        .iter()
        .zip(&b)
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max);
    assert!(diff > 1e-6, "{diff}");
}

#[test]
fn zero_logits_give_one_half() {
    let mut net = DabsegNet::<f64>::new(NetConfig::tiny(), 4).unwrap();
    let head = net.params.head.clone();
    net.store.value_mut(head.w).data_mut().fill(0.0);
    net.store.value_mut(head.b.unwrap()).data_mut().fill(0.0);
    let p = net.infer(&random(&[1, 4, 8, 8, 8], 5)).unwrap();
    assert!(p.data().iter().all(|&v| v == 0.5));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let x = random(&[1, 4, 16, 16, 16], 8).cast::<f32>();
    let a = DabsegNet::<f32>::new(NetConfig::tiny(), 9)
        .unwrap()
        .infer(&x)
        .unwrap();
    let b = DabsegNet::<f32>::new(NetConfig::tiny(), 9)
        .unwrap()
        .infer(&x)
        .unwrap();
    assert_eq!(a.data(), b.data());
}

fn training_loss(
    net: &DabsegNet<f64>,
    store: &ParamStore<f64>,
    g: &Graph<f64>,
    x: &Tensor<f64>,
    target: &Tensor<f64>,
    clear: &Tensor<f64>,
) -> dabseg::Result<Var> {
    let out = net.view_with(store).forward(g, g.constant(x.clone()))?;
    let seg = weighted_dice_loss(g, out.probs, target, [2.0, 1.0, 1.0], 1e-5)?;
    match out.restored {
        Some(v) => {
            let rec = recon_loss(g, v, clear, RecNorm::Mse)?;
            g.add(seg, g.scale(rec, 0.1))
        }
        None => Ok(seg),
    }
}

#[test]
fn every_parameter_receives_gradient() {
    for literal in [false, true] {
        let mut cfg = NetConfig::tiny();
        cfg.fdmds.literal_eq3 = literal;
        let mut net = DabsegNet::<f64>::new(cfg, 11).unwrap();
        let (x, t, c) = (
            random(&[1, 4, 16, 16, 16], 1),
            binary(&[1, 3, 16, 16, 16], 2),
            random(&[1, 4, 16, 16, 16], 3),
        );
        let g = Graph::new();
        let loss = training_loss(&net, &net.store, &g, &x, &t, &c).unwrap();
        let grads = g.backward(loss).unwrap();
        net.store.zero_grads();
        net.store.accumulate(&g, &grads);
        drop(g);
        for id in net.store.ids() {
            let name = net.store.name(id);
            let nonzero = net.store.grad(id).data().iter().any(|&v| v != 0.0);
            let detached = literal && name.starts_with("fdmds.block1");
            assert_eq!(nonzero, !detached, "{name} (literal_eq3 = {literal})");
        }
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let mut net = DabsegNet::<f64>::new(NetConfig::tiny(), 12).unwrap();
    // zero-initialised shifts put leaky ReLU inputs exactly on the kink where
    // a 1^3 instance norm leaves only the shift; move off it
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let ids: Vec<_> = net.store.ids().collect();
    for id in ids {
        let name = net.store.name(id).to_string();
        if name.ends_with(".beta") || name.ends_with(".b") {
            net.store
                .value_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-0.2..0.2));
        }
    }
    let (x, t, c) = (
        random(&[1, 4, 8, 8, 8], 4),
        binary(&[1, 3, 8, 8, 8], 5),
        random(&[1, 4, 8, 8, 8], 6),
    );
    let mut store = net.store.clone();
    let report = check_params(
        &mut store,
        |g, s| training_loss(&net, s, g, &x, &t, &c),
        GradCheckOptions {
            max_per_tensor: Some(3),
            floor: 1e-7,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
    assert!(report.compared > 100, "{report:?}");
}
