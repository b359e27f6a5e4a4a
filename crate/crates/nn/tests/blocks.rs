//! Block contracts: shape preservation, identity reductions, attention
//! normalization, parameter-count closed forms, and finite-difference
//! gradient checks on tiny shapes (f64, rel err <= 1e-3).

use pmr_nn::blocks::{DsAlign, PartConv3d, StcBlock, WaveConv3d};
use pmr_nn::deblur::{DebConfig, DebNet};
use pmr_nn::detilt::{DetConfig, DetNet};
use pmr_nn::gradcheck::max_rel_error_sampled;
use pmr_nn::init::seeded;
use pmr_nn::tape::{Tape, VarId};
use pmr_nn::tensor::Tensor;
use pmr_nn::NnError;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.iter().product::<usize>())
        .map(|_| lo + rng.random::<f64>() * (hi - lo))
        .collect();
    Tensor::from_vec(shape, data)
}

/// FD-check d(loss)/d(input) for a forward closure, probing a deterministic
/// subset of elements. Loss is a fixed random weighting of the output.
fn check_input_grad(
    x0: &Tensor<f64>,
    forward: impl Fn(&mut Tape<f64>, VarId) -> VarId,
    samples: usize,
    tol: f64,
) {
    let probe = |x: &Tensor<f64>| {
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let y = forward(&mut tape, xid);
        let coeffs = rand_tensor(tape.value(y).shape(), -1.0, 1.0, 4242);
        let cid = tape.leaf(coeffs);
        let prod = tape.mul(y, cid);
        let loss = tape.mean_all(prod);
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss);
        (value, grads.take(xid))
    };
    let (_, grad) = probe(x0);
    let analytic = grad.expect("input gradient");
    let mut f = |x: &Tensor<f64>| probe(x).0;
    let worst = max_rel_error_sampled(&mut f, x0, &analytic, 1e-5, 1e-7, samples);
    assert!(worst <= tol, "max rel err {worst} > {tol}");
}

#[test]
fn ds_align_zero_offsets_reduce_to_two_ds_convs() {
    let mut rng = seeded(3);
    let mut block = DsAlign::<f64>::new(&mut rng, 4, 4);
    for (name, t) in block.params_mut() {
        if name.starts_with("offset") {
            *t = Tensor::zeros(t.shape());
        }
    }
    let x = rand_tensor(&[2, 8, 8, 4], 0.0, 1.0, 5);
    let full = block.forward(&x).unwrap();

    // oracle: run the two inner convolutions directly (identity warp elided)
    let params = block.params();
    let find = |n: &str| params.iter().find(|(pn, _)| pn == n).unwrap().1.clone();
    let mid = pmr_nn::ops::conv3d_fwd(&x, &find("conv_in.dw_w"), &find("conv_in.dw_b"), 4, 1, 1);
    let mid = pmr_nn::ops::conv3d_fwd(&mid, &find("conv_in.pw_w"), &find("conv_in.pw_b"), 1, 1, 1);
    let out = pmr_nn::ops::conv3d_fwd(&mid, &find("conv_out.dw_w"), &find("conv_out.dw_b"), 4, 1, 1);
    let out = pmr_nn::ops::conv3d_fwd(&out, &find("conv_out.pw_w"), &find("conv_out.pw_b"), 1, 1, 1);
    assert_eq!(full, out, "zero offsets must make the warp an exact identity");
}

#[test]
fn ds_align_shape_contract_and_gradients() {
    let mut rng = seeded(7);
    let block = DsAlign::<f64>::new(&mut rng, 4, 6);
    let x = rand_tensor(&[4, 32, 32, 4], 0.0, 1.0, 8);
    let y = block.forward(&x).unwrap();
    assert_eq!(y.shape(), &[4, 32, 32, 6]);
    assert!(matches!(
        block.forward(&rand_tensor(&[4, 32, 32, 3], 0.0, 1.0, 9)),
        Err(NnError::ShapeMismatch(_))
    ));

    let x = rand_tensor(&[2, 8, 8, 4], 0.0, 1.0, 10);
    let mut ids = Vec::new();
    check_input_grad(&x, |tape, xid| block.forward_t(tape, xid, &mut Vec::new()), 512, 1e-3);
    // parameter binding sanity: forward registers one leaf per named param
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    block.forward_t(&mut tape, xid, &mut ids);
    assert_eq!(ids.len(), block.params().len());
}

#[test]
fn wave_conv_rejects_odd_dims_and_checks_gradient() {
    let mut rng = seeded(11);
    let block = WaveConv3d::<f64>::new(&mut rng, 2, 4);
    let odd = rand_tensor(&[2, 7, 8, 2], 0.0, 1.0, 12);
    assert!(matches!(block.forward(&odd), Err(NnError::OddDimensions { .. })));

    let x = rand_tensor(&[2, 8, 8, 2], 0.0, 1.0, 13);
    let y = block.forward(&x).unwrap();
    assert_eq!(y.shape(), &[2, 4, 4, 4]);
    check_input_grad(&x, |tape, xid| block.forward_t(tape, xid, &mut Vec::new()), 256, 1e-3);
}

#[test]
fn part_conv_pass_through_and_param_count() {
    let mut rng = seeded(17);
    let mut block = PartConv3d::<f64>::new(&mut rng, 8, 8, 0.25);
    assert_eq!(block.part_channels(), 2);
    // zero the partial conv, make the trailing ds-conv the identity
    for (name, t) in block.params_mut() {
        let ident: Tensor<f64> = match name.as_str() {
            "part_w" | "part_b" | "conv.dw_b" | "conv.pw_b" => Tensor::zeros(t.shape()),
            "conv.dw_w" => {
                // depthwise identity: 1 at the kernel center
                let mut w = Tensor::zeros(t.shape());
                for c in 0..8 {
                    let center = ((c * 3 + 1) * 3 + 1) * 3 + 1;
                    w.data_mut()[center] = 1.0;
                }
                w
            }
            "conv.pw_w" => {
                let mut w = Tensor::zeros(t.shape());
                for c in 0..8 {
                    w.data_mut()[c * 8 + c] = 1.0;
                }
                w
            }
            _ => continue,
        };
        *t = ident;
    }
    let x = rand_tensor(&[2, 8, 8, 8], 0.0, 1.0, 18);
    let y = block.forward(&x).unwrap();
    assert_eq!(y.shape(), x.shape());
    // untouched channels (2..8) pass through bitwise
    for p in 0..2 * 8 * 8 {
        for c in 2..8 {
            assert_eq!(y.data()[p * 8 + c], x.data()[p * 8 + c]);
        }
    }

    // closed-form parameter count at C=32, ratio 1/4, Cout=32
    let block32 = PartConv3d::<f64>::new(&mut rng, 32, 32, 0.25);
    let part = 8;
    let expect = (part * 27 + part) + (32 * 27 + 32) + (32 * 32 + 32);
    let total: usize = block32.params().iter().map(|(_, t)| t.numel()).sum();
    assert_eq!(total, expect);

    let block2 = PartConv3d::<f64>::new(&mut rng, 4, 4, 0.5);
    let x = rand_tensor(&[2, 8, 8, 4], 0.0, 1.0, 19);
    check_input_grad(&x, |tape, xid| block2.forward_t(tape, xid, &mut Vec::new()), 256, 1e-3);
}

#[test]
fn stc_attention_rows_sum_to_one_and_identity_at_init() {
    let mut rng = seeded(23);
    let block = StcBlock::<f64>::new(&mut rng, 12, 2);
    let x = rand_tensor(&[2, 8, 8, 12], 0.0, 1.0, 24);
    let att = block.attention_matrix(&x).unwrap();
    let s = att.shape().to_vec();
    assert_eq!(s, vec![2, 2, 2], "per-head channel attention is c' x c'");
    for r in 0..s[0] * s[1] {
        let row: f64 = att.data()[r * s[2]..(r + 1) * s[2]].iter().sum();
        assert!((row - 1.0).abs() < 1e-6, "attention row sums to 1, got {row}");
    }

    // default init zeroes the output and feed-forward projections
    let y = block.forward(&x).unwrap();
    assert_eq!(y, x, "stc block must start as the identity");
}

#[test]
fn stc_gradient_check() {
    let mut rng = seeded(29);
    let mut block = StcBlock::<f64>::new(&mut rng, 12, 2);
    // exercise every sublayer: replace the zero-initialized projections
    let mut prng = seeded(31);
    for (name, t) in block.params_mut() {
        if name.starts_with("proj") || name.starts_with("ff_out") {
            *t = pmr_nn::init::uniform_fan_in(&mut prng, t.shape(), t.numel().max(8));
        }
    }
    let x = rand_tensor(&[2, 8, 8, 12], 0.0, 1.0, 32);
    check_input_grad(&x, |tape, xid| block.forward_t(tape, xid, &mut Vec::new()), 256, 1e-3);
}

#[test]
fn det_forward_gradient_check_on_tiny_shape() {
    let cfg = DetConfig { base_channels: 4, in_frames: 2, in_channels: 1, part_ratio: 0.25 };
    let mut net = DetNet::<f64>::new(cfg, 41).unwrap();
    // non-zero tilt heads so the correction path carries gradient
    let mut prng = seeded(43);
    for (name, t) in net.named_params_mut() {
        if name.starts_with("head") {
            *t = pmr_nn::init::uniform_fan_in(&mut prng, t.shape(), 64);
        }
    }
    let x = rand_tensor(&[2, 8, 8, 1], 0.2, 0.8, 44);
    check_input_grad(
        &x,
        |tape, xid| {
            let (_, corrected) = net.forward_t(tape, xid, &mut Vec::new());
            corrected
        },
        128,
        1e-3,
    );
}

#[test]
fn det_parameter_gradient_matches_fd() {
    // validates both the backward pass and the leaf/param ordering contract
    let cfg = DetConfig { base_channels: 4, in_frames: 2, in_channels: 1, part_ratio: 0.25 };
    let mut net = DetNet::<f64>::new(cfg, 47).unwrap();
    // move tilts off the integer lattice, where bilinear warps have kinks
    let mut prng = seeded(51);
    for (name, t) in net.named_params_mut() {
        if name.starts_with("head") {
            *t = pmr_nn::init::uniform_fan_in(&mut prng, t.shape(), 64);
        }
    }
    let net = net;
    let x0 = rand_tensor(&[2, 8, 8, 1], 0.2, 0.8, 48);
    let target = rand_tensor(&[2, 8, 8, 1], 0.2, 0.8, 49);

    let names: Vec<String> = net.named_params().iter().map(|(n, _)| n.clone()).collect();
    let probe_name = "head3.w";
    let probe_idx = names.iter().position(|n| n == probe_name).unwrap();

    let run = |net: &DetNet<f64>| {
        let mut tape = Tape::new();
        let xid = tape.leaf(x0.clone());
        let mut ids = Vec::new();
        let (_, corrected) = net.forward_t(&mut tape, xid, &mut ids);
        let tgt = tape.leaf(target.clone());
        let d = tape.sub(corrected, tgt);
        let k = tape.mul(d, d);
        let loss = tape.mean_all(k);
        let value = tape.value(loss).item();
        (value, tape, ids, loss)
    };

    let (_, tape, ids, loss_id) = run(&net);
    assert_eq!(ids.len(), names.len(), "one leaf per named parameter");
    let mut grads = tape.backward(loss_id);
    let analytic = grads.take(ids[probe_idx]).expect("head gradient");

    let mut net_mut = net.clone();
    let mut fd_loss = |t: &Tensor<f64>| {
        for (name, p) in net_mut.named_params_mut() {
            if name == probe_name {
                *p = t.clone();
            }
        }
        run(&net_mut).0
    };
    let x_param = net.named_params()[probe_idx].1.clone();
    let worst = max_rel_error_sampled(&mut fd_loss, &x_param, &analytic, 1e-6, 1e-8, 16);
    assert!(worst <= 1e-3, "parameter gradient rel err {worst}");
}

#[test]
fn deb_forward_gradient_check_on_tiny_shape() {
    let cfg = DebConfig { base_channels: 6, heads: 1, in_channels: 1, residual_output: true };
    let mut net = DebNet::<f64>::new(cfg, 53).unwrap();
    let mut prng = seeded(55);
    for (name, t) in net.named_params_mut() {
        if name.contains("proj") || name.contains("ff_out") {
            *t = pmr_nn::init::uniform_fan_in(&mut prng, t.shape(), t.numel().max(8));
        }
    }
    let x = rand_tensor(&[2, 8, 8, 1], 0.2, 0.8, 56);
    check_input_grad(
        &x,
        |tape, xid| net.forward_t(tape, xid, &mut Vec::new()),
        128,
        1e-3,
    );
}
