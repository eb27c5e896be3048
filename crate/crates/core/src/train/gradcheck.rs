//! Finite-difference check of the whole training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{check_params, GradCheckOptions, GradCheckReport};
use crate::autodiff::Tensor;
use crate::error::Result;
use crate::loss::{joint_loss, recon_loss, weighted_dice_loss, RecNorm};
use crate::net::{DabsegNet, NetConfig};

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Checks parameter gradients of the joint loss (ET-weighted Dice plus 0.1
/// times the reconstruction MSE) for the smallest network configuration
/// (width 8) on a random `[1, 4, 8, 8, 8]` input, sampling `per_tensor`
/// elements of every parameter tensor.
///
/// Zero-initialized shifts place many leaky ReLU inputs exactly on the kink
/// (a 1^3 instance norm leaves only its shift), so biases and shifts are
/// first moved to random values in `[-0.2, 0.2]`.
pub fn network_gradcheck(seed: u64, per_tensor: usize) -> Result<GradCheckReport> {
    let mut net = DabsegNet::<f64>::new(NetConfig::tiny(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = net.store.ids().collect();
    for id in ids {
        if net.store.name(id).ends_with(".beta") || net.store.name(id).ends_with(".b") {
            net.store
                .value_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-0.2..0.2));
        }
    }
    let shape = [1, 4, 8, 8, 8];
    let x = uniform(&shape, &mut rng);
    let clear = uniform(&shape, &mut rng);
    let n = 3 * 512;
    let target = Tensor::new(
        &[1, 3, 8, 8, 8],
        (0..n)
            .map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
            .collect(),
    )?;
    let mut store = net.store.clone();
    check_params(
        &mut store,
        |g, s| {
            let out = net.view_with(s).forward(g, g.constant(x.clone()))?;
            let seg = weighted_dice_loss(g, out.probs, &target, [2.0, 1.0, 1.0], 1e-5)?;
            let rec = out
                .restored
                .map(|v| recon_loss(g, v, &clear, RecNorm::Mse))
                .transpose()?;
            joint_loss(g, seg, rec, 0.1)
        },
        GradCheckOptions {
            max_per_tensor: Some(per_tensor),
            floor: 1e-7,
            seed,
            ..GradCheckOptions::default()
        },
    )
}
