use std::collections::BTreeSet;

use hipnet::autodiff::{NormMode, Tape};
use hipnet::densenet::{ModelError, Network, NetworkSpec, SlotKind};
use hipnet::tensor::Tensor;
use hipnet::weights;
use proptest::prelude::*;

fn tiny(layout: Vec<usize>, growth: usize) -> NetworkSpec {
    NetworkSpec {
        input_size: 16,
        initial_channels: 4,
        growth_rate: growth,
        block_layout: layout,
        ..NetworkSpec::default()
    }
}

fn seeded(spec: NetworkSpec, seed: u64) -> Network {
    let mut net = Network::build(spec).unwrap();
    net.init_gaussian(seed).unwrap();
    net
}

fn input(spec: &NetworkSpec, n: usize, seed: u32) -> Tensor<f32> {
    let s = spec.input_size;
    Tensor::from_fn(&[n, 1, s, s], |i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f32 / 500.0 - 1.0).unwrap()
}

fn block_outputs(net: &Network, x: &Tensor<f32>) -> Vec<Tensor<f32>> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), false);
    let pass = net.forward(&mut tape, v, NormMode::Eval, false).unwrap();
    pass.block_outputs.iter().map(|&b| tape.value(b).unwrap().clone()).collect()
}

fn logits(net: &Network, x: &Tensor<f32>) -> Tensor<f32> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), false);
    let pass = net.forward(&mut tape, v, NormMode::Eval, false).unwrap();
    tape.value(pass.logits).unwrap().clone()
}

#[test]
fn channel_bookkeeping_matches_the_formula() {
    for growth in [4, 8, 12] {
        for a in 1..=4 {
            for b in 1..=4 {
                for c in 1..=4 {
                    let spec = NetworkSpec {
                        growth_rate: growth,
                        block_layout: vec![a, b, c],
                        ..NetworkSpec::default()
                    };
                    let plan = spec.block_plan().unwrap();
                    let mut channels = spec.initial_channels;
                    for (i, p) in plan.iter().enumerate() {
                        assert_eq!(p.in_channels, channels);
                        assert_eq!(p.out_channels, channels + p.layers * growth);
                        channels = if i + 1 < plan.len() {
                            (spec.compression * p.out_channels as f64).floor() as usize
                        } else {
                            p.out_channels
                        };
                    }
                    assert_eq!(spec.feature_len().unwrap(), channels);
                }
            }
        }
    }
    assert_eq!(NetworkSpec::default().feature_len().unwrap(), 88);
}

#[test]
fn eval_forward_is_bit_deterministic() {
    let spec = tiny(vec![2, 2], 4);
    let net = seeded(spec.clone(), 5);
    let x = input(&spec, 3, 1);
    assert_eq!(logits(&net, &x), logits(&net, &x));
    assert_eq!(logits(&net, &x).shape(), &[3, 3]);
}

#[test]
fn every_dense_layer_reaches_the_block_exit() {
    let spec = tiny(vec![3, 3], 4);
    let net = seeded(spec.clone(), 9);
    let x = input(&spec, 2, 2);
    let base = block_outputs(&net, &x);
    let plan = spec.block_plan().unwrap();
    for (b, p) in plan.iter().enumerate() {
        for layer in 0..p.layers {
            let mut cut = net.clone();
            let name = format!("block{b}.layer{layer}.conv.weight");
            cut.state_mut().get_mut(&name).unwrap().data_mut().fill(0.0);
            let out = block_outputs(&cut, &x);
            let start = p.in_channels + layer * spec.growth_rate;
            let own = out[b].slice_channels(start, start + spec.growth_rate).unwrap();
            assert!(own.data().iter().all(|&v| v == 0.0), "{name}");
            assert_ne!(out[b], base[b], "{name}");
            if layer + 1 < p.layers {
                // Later layers see the zeroed features through the concatenation.
                let later = p.in_channels + (layer + 1) * spec.growth_rate;
                assert_ne!(
                    out[b].slice_channels(later, p.out_channels).unwrap(),
                    base[b].slice_channels(later, p.out_channels).unwrap(),
                    "{name}"
                );
            }
        }
    }
}

#[test]
fn gradient_reaches_the_input() {
    let spec = tiny(vec![2, 2], 4);
    let net = seeded(spec.clone(), 3);
    let mut tape = Tape::new();
    let v = tape.leaf(input(&spec, 1, 4), true);
    let pass = net.forward(&mut tape, v, NormMode::Eval, false).unwrap();
    let score = tape.element(pass.logits, 0).unwrap();
    let g = tape.backward(score).unwrap().wrt(v);
    assert!(g.data().iter().filter(|&&v| v != 0.0).count() > g.len() / 2);
}

#[test]
fn gaussian_init_has_he_scale() {
    let spec = NetworkSpec {
        initial_channels: 64,
        growth_rate: 64,
        block_layout: vec![3],
        ..NetworkSpec::default()
    };
    let net = seeded(spec.clone(), 11);
    let mut samples = Vec::new();
    for slot in spec.slots().unwrap() {
        let fan_in: usize = slot.shape[1..].iter().product();
        if slot.kind == SlotKind::ConvWeight && fan_in == 576 {
            samples.extend_from_slice(net.state().get(&slot.name).unwrap().data());
        }
    }
    assert!(samples.len() >= 10_000, "{}", samples.len());
    let n = samples.len() as f64;
    let mean = samples.iter().map(|&v| v as f64).sum::<f64>() / n;
    let std = (samples.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    let target = (2.0f64 / 576.0).sqrt();
    assert!((std - target).abs() < 0.1 * target, "{std} vs {target}");
    for slot in spec.slots().unwrap() {
        let t = net.state().get(&slot.name).unwrap();
        match slot.kind {
            SlotKind::LinearBias | SlotKind::NormBeta | SlotKind::NormMean => {
                assert!(t.data().iter().all(|&v| v == 0.0))
            }
            SlotKind::NormGamma | SlotKind::NormVar => assert!(t.data().iter().all(|&v| v == 1.0)),
            _ => {}
        }
    }
}

#[test]
fn frozen_load_copies_the_body_and_reinitializes_the_head() {
    let donor_spec = NetworkSpec {
        num_classes: 5,
        ..tiny(vec![2, 2], 4)
    };
    let donor = seeded(donor_spec, 21);
    let spec = tiny(vec![2, 2], 4);
    let head = NetworkSpec::head_names();
    let net = Network::load_pretrained_frozen(spec.clone(), &donor, &head, 1).unwrap();
    for (name, t) in net.state().iter() {
        if head.contains(name) {
            assert!(!net.is_frozen(name));
            assert_ne!(Some(t), donor.state().get(name));
        } else {
            assert!(net.is_frozen(name));
            assert_eq!(Some(t), donor.state().get(name));
        }
    }
    let all: BTreeSet<String> = net.state().names();
    let open = Network::load_pretrained_frozen(spec, &donor, &all, 1).unwrap();
    assert!(open.frozen().is_empty());

    let other = tiny(vec![2, 3], 4);
    assert!(matches!(
        Network::load_pretrained_frozen(other, &donor, &head, 1),
        Err(ModelError::DonorMismatch(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn weights_round_trip_bit_exactly(seed in any::<u64>(), a in 1usize..3, b in 1usize..3) {
        let spec = tiny(vec![a, b], 4);
        let net = seeded(spec.clone(), seed);
        let bytes = weights::encode(net.state()).unwrap();
        let back = Network::from_state(spec, weights::decode(&bytes).unwrap()).unwrap();
        prop_assert_eq!(back.state(), net.state());
    }
}
