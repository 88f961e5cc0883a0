use lscnn_core::arch::{self, build_lscnn, build_nuaa_variant, build_patchnet, ArchitectureSpec, LayerParams, ModelParams};
use lscnn_core::compose::{compose, split_patches, verify_block_independence, BlockMap, LayerBlocks, PatchGrid};
use lscnn_core::{Rng, Tensor};

/// PatchNet with random weights and non-trivial batch-norm state, as after training.
fn trained_like(spec: &ArchitectureSpec, rng: &mut Rng) -> ModelParams {
    let mut p: ModelParams = arch::init_params(spec, 0.3, rng).unwrap();
    for layer in &mut p.layers {
        if let LayerParams::Conv { conv, bn } = layer {
            for v in conv.bias.data_mut() {
                *v = rng.normal(0.0, 0.1) as f32;
            }
            for c in 0..bn.channels() {
                bn.gamma[c] = rng.normal(1.0, 0.2) as f32;
                bn.beta[c] = rng.normal(0.0, 0.2) as f32;
                bn.running_mean[c] = rng.normal(0.0, 0.5) as f32;
                bn.running_var[c] = 0.5 + rng.uniform() as f32;
            }
            bn.updates = 300;
        }
    }
    p
}

fn nine(spec: &ArchitectureSpec, seed: u64) -> Vec<ModelParams> {
    let mut rng = Rng::new(seed);
    (0..9).map(|_| trained_like(spec, &mut rng)).collect()
}

fn check_structure(patch: &ArchitectureSpec, whole: &ArchitectureSpec, seed: u64) {
    let nets = nine(patch, seed);
    let composed = compose(&nets, patch, whole, 0.01, &mut Rng::new(seed + 1)).unwrap();
    composed.validate(whole).unwrap();
    let map = BlockMap::new(patch, whole).unwrap();
    for (li, blocks) in map.layers.iter().enumerate() {
        match blocks {
            LayerBlocks::Conv { outputs, inputs } => {
                let LayerParams::Conv { conv, bn } = &composed.layers[li] else { panic!() };
                let [_, cin, k, _] = *conv.weight.shape() else { panic!() };
                assert_eq!(bn.updates, 0, "layer {li} keeps patch-level averaging weight");
                for (b, range) in outputs.iter().enumerate() {
                    let LayerParams::Conv { conv: pc, bn: pb } = &nets[b].layers[li] else { panic!() };
                    let pin = pc.in_channels();
                    for (oi, o) in range.clone().enumerate() {
                        assert_eq!(conv.bias[o], pc.bias[oi]);
                        assert_eq!(bn.gamma[o], pb.gamma[oi]);
                        assert_eq!(bn.beta[o], pb.beta[oi]);
                        assert_eq!(bn.running_mean[o], pb.running_mean[oi]);
                        assert_eq!(bn.running_var[o], pb.running_var[oi]);
                        let own = inputs.as_ref().map_or(0..cin, |r| r[b].clone());
                        for c in 0..cin {
                            for t in 0..k * k {
                                let w = conv.weight.data()[(o * cin + c) * k * k + t];
                                if own.contains(&c) {
                                    let pc_idx = (oi * pin + (c - own.start)) * k * k + t;
                                    assert_eq!(w, pc.weight.data()[pc_idx]);
                                } else {
                                    assert_eq!(w.to_bits(), 0, "cross-block weight at layer {li}, out {o}, in {c}");
                                }
                            }
                        }
                    }
                }
            }
            LayerBlocks::RandomInit => match &composed.layers[li] {
                LayerParams::Fc { fc, bn } => {
                    assert!(fc.bias.data().iter().all(|&v| v == 0.0));
                    assert!(bn.gamma.data().iter().all(|&v| v == 1.0));
                    assert!(bn.beta.data().iter().all(|&v| v == 0.0));
                    let w = fc.weight.data();
                    let std = (w.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
                    assert!((std - 0.01).abs() < 0.002, "fc std {std}");
                }
                LayerParams::Softmax { fc } => assert!(fc.bias.data().iter().all(|&v| v == 0.0)),
                _ => panic!("unexpected params"),
            },
            LayerBlocks::Passthrough => {}
        }
    }
}

#[test]
fn composed_lscnn_is_block_diagonal() {
    check_structure(&build_patchnet(), &build_lscnn(), 11);
}

#[test]
fn composed_nuaa_is_block_diagonal() {
    check_structure(&build_nuaa_variant(true), &build_nuaa_variant(false), 12);
}

#[test]
fn first_layer_matches_patchnets_locally() {
    let (patch, whole) = (build_patchnet(), build_lscnn());
    let nets = nine(&patch, 21);
    let composed = compose(&nets, &patch, &whole, 0.01, &mut Rng::new(22)).unwrap();
    let grid = PatchGrid::new(96).unwrap();
    let mut rng = Rng::new(23);
    let face: Tensor = Tensor::fill_normal(&[3, 96, 96], 0.0, 1.0, &mut rng).unwrap();
    let big = arch::infer_prefix(&whole, &composed, &face.clone().reshape(&[1, 3, 96, 96]).unwrap(), 1).unwrap();
    let [_, _, bh, bw] = *big.shape() else { panic!() };
    for (k, p) in split_patches(&face, &grid).unwrap().into_iter().enumerate() {
        let small = arch::infer_prefix(&patch, &nets[k], &p.reshape(&[1, 3, 32, 32]).unwrap(), 1).unwrap();
        let [_, w, sh, sw] = *small.shape() else { panic!() };
        let (r0, c0) = grid.origin(k);
        let mut worst = 0f32;
        for o in 0..w {
            for r in 0..sh {
                for c in 0..sw {
                    let a = small.data()[(o * sh + r) * sw + c];
                    let b = big.data()[((k * w + o) * bh + r0 + r) * bw + c0 + c];
                    worst = worst.max((a - b).abs());
                }
            }
        }
        assert!(worst < 1e-6, "block {k}: max diff {worst}");
    }
}

#[test]
fn trunk_blocks_are_independent() {
    let (patch, whole) = (build_patchnet(), build_lscnn());
    let composed = compose(&nine(&patch, 31), &patch, &whole, 0.01, &mut Rng::new(32)).unwrap();
    let report = verify_block_independence(&composed, &patch, &whole, 2, &mut Rng::new(33)).unwrap();
    assert_eq!(report.blocks.len(), 9);
    assert!(report.holds(), "{report:?}");
    report.into_result().unwrap();
}

#[test]
fn leaked_cross_block_weight_is_detected() {
    let (patch, whole) = (build_patchnet(), build_lscnn());
    let mut composed = compose(&nine(&patch, 41), &patch, &whole, 0.01, &mut Rng::new(42)).unwrap();
    // Conv2 output channel 0 (block 0) reading from input channel 3 (block 1).
    let conv2 = 2;
    let LayerParams::Conv { conv, .. } = &mut composed.layers[conv2] else { panic!() };
    let cin = conv.in_channels();
    conv.weight.data_mut()[3 * 9 + 4] = 0.5;
    assert_eq!(cin, 27);
    let report = verify_block_independence(&composed, &patch, &whole, 2, &mut Rng::new(43)).unwrap();
    assert!(!report.holds());
    assert!(report.blocks[0].changed > 0);
    assert!(report.blocks[1..].iter().all(|b| b.changed == 0));
    assert!(report.into_result().is_err());
}
