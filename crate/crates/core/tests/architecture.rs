//! Structural properties of the co-learning network and its baselines.

mod common;

use colearn::model::{ForwardOptions, FusionRatio, Network, Variant, NUM_SCALES};
use colearn::training::{scaled_ce_loss, LossConfig};
use colearn::{Mode, ModelParams, Tape, Tensor};
use common::*;

fn network(variant: Variant, size: usize, c: usize) -> Network {
    let ratio = (variant == Variant::Fs).then(|| FusionRatio::new(0.5).unwrap());
    Network::new(variant, small_config(size, c), ratio).unwrap()
}

#[test]
fn traces_match_shape_calculus() {
    for v in Variant::ALL {
        let net = network(v, 64, 8);
        let params = net.init_params(0).unwrap();
        let (ct, pet, _) = random_batch(0, 2, 64);
        let mut tape = Tape::new();
        let out = net
            .forward(&mut tape, &params, &ct, &pet, Mode::Train, &ForwardOptions::default())
            .unwrap();
        let got: Vec<(String, Vec<usize>)> = out.trace.iter().map(|e| (e.layer.clone(), e.shape.clone())).collect();
        assert_eq!(got, expected_trace(v, &net.config, 2), "{v}");
    }
}

/// Swaps the CT and PET encoders, the modality slices and output halves of
/// every co-learning kernel, and the matching input-channel blocks of the
/// first reconstruction convolutions.
fn swap_modalities(params: &ModelParams, c: usize) -> ModelParams {
    let mut out = params.clone();
    let ids: Vec<String> = params.ids().map(str::to_string).collect();
    for id in &ids {
        if let Some(rest) = id.strip_prefix("enc.ct.") {
            let other = format!("enc.pet.{rest}");
            out.get_mut(id).unwrap().value = params.value(&other).unwrap().clone();
            out.get_mut(&other).unwrap().value = params.value(id).unwrap().clone();
        }
    }
    let half = |o: usize| (o + c) % (2 * c);
    for s in 0..NUM_SCALES {
        let w = params.value(&format!("colearn.u{s}.w")).unwrap();
        let k = w.shape()[0];
        let mut nw = w.clone();
        for i in 0..k * k {
            for m in 0..2 {
                for ch in 0..c {
                    for o in 0..2 * c {
                        let dst = ((i * 2 + m) * c + ch) * 2 * c + o;
                        let src = ((i * 2 + (1 - m)) * c + ch) * 2 * c + half(o);
                        nw.data_mut()[dst] = w.data()[src];
                    }
                }
            }
        }
        out.get_mut(&format!("colearn.u{s}.w")).unwrap().value = nw;
        let b = params.value(&format!("colearn.u{s}.b")).unwrap();
        let nb = Tensor::from_fn([2 * c], |o| b.data()[half(o)]);
        out.get_mut(&format!("colearn.u{s}.b")).unwrap().value = nb;
    }
    for j in 0..NUM_SCALES {
        let id = format!("rec.b{j}.c0.w");
        let w = params.value(&id).unwrap();
        let (kk, cin, cout) = (w.shape()[0] * w.shape()[1], w.shape()[2], w.shape()[3]);
        // skip block first, then the upsampled block (also two halves below the bottleneck)
        let perm = |q: usize| {
            if q < 2 * c {
                half(q)
            } else if j == 0 {
                2 * c + half(q - 2 * c)
            } else {
                q
            }
        };
        let mut nw = w.clone();
        for i in 0..kk {
            for q in 0..cin {
                for o in 0..cout {
                    nw.data_mut()[(i * cin + q) * cout + o] = w.data()[(i * cin + perm(q)) * cout + o];
                }
            }
        }
        out.get_mut(&id).unwrap().value = nw;
    }
    out
}

#[test]
fn swapping_modalities_with_their_weights_changes_nothing() {
    let c = 3;
    let net = network(Variant::Colearn, 16, c);
    for seed in 0..3 {
        let params = net.init_params(seed).unwrap();
        let swapped = swap_modalities(&params, c);
        let (ct, pet, _) = random_batch(seed, 2, 16);
        for mode in [Mode::Train, Mode::Inference] {
            let a = net.predict(&params, &ct, &pet, mode).unwrap();
            let b = net.predict(&swapped, &pet, &ct, mode).unwrap();
            let err = a.prob.max_abs_diff(&b.prob);
            assert!(err < 1e-5, "seed {seed}: {err:e}");
        }
    }
}

#[test]
fn zeroed_fusion_map_cuts_encoder_gradients() {
    let net = network(Variant::Colearn, 16, 4);
    let (ct, pet, labels) = random_batch(3, 2, 16);
    let cfg = LossConfig {
        lambda: 0.0,
        num_classes: 4,
    };
    for s in 0..NUM_SCALES {
        let mut params = net.init_params(s as u64).unwrap();
        let mut opts = ForwardOptions::default();
        opts.fixed_fusion[s] = Some(0.0);
        opts.detach_pool[s] = true;
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &params, &ct, &pet, Mode::Train, &opts).unwrap();
        let loss = scaled_ce_loss(&mut tape, out.prob, &labels, &params, &cfg).unwrap();
        tape.backward(loss, &mut params).unwrap();
        for enc in ["ct", "pet"] {
            for conv in 0..2 {
                let g = &params.get(&format!("enc.{enc}.b{s}.c{conv}.w")).unwrap().grad;
                assert!(g.data().iter().all(|&v| v == 0.0), "unit {s}, {enc} conv {conv}");
            }
        }
        // Without the intervention the same weights do receive gradient.
        let mut fresh = net.init_params(s as u64).unwrap();
        let mut opts = ForwardOptions::default();
        opts.detach_pool[s] = true;
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &fresh, &ct, &pet, Mode::Train, &opts).unwrap();
        let loss = scaled_ce_loss(&mut tape, out.prob, &labels, &fresh, &cfg).unwrap();
        tape.backward(loss, &mut fresh).unwrap();
        let g = &fresh.get(&format!("enc.ct.b{s}.c0.w")).unwrap().grad;
        assert!(g.data().iter().any(|&v| v != 0.0), "unit {s} ungated");
    }
}

#[test]
fn multi_branch_is_colearn_with_unit_fusion() {
    let cl = network(Variant::Colearn, 16, 4);
    let mb = network(Variant::Mb, 16, 4);
    let cl_params = cl.init_params(5).unwrap();
    let mut mb_params = mb.empty_params().unwrap();
    let mb_ids: Vec<String> = mb_params.ids().map(str::to_string).collect();
    let cl_ids: Vec<String> = cl_params.ids().filter(|id| !id.starts_with("colearn.")).map(str::to_string).collect();
    assert_eq!(mb_ids, cl_ids);
    for id in &mb_ids {
        mb_params.get_mut(id).unwrap().value = cl_params.value(id).unwrap().clone();
    }
    let (ct, pet, _) = random_batch(5, 2, 16);
    let opts = ForwardOptions {
        fixed_fusion: [Some(1.0); NUM_SCALES],
        ..ForwardOptions::default()
    };
    let mut tape = Tape::new();
    let a = cl.forward(&mut tape, &cl_params, &ct, &pet, Mode::Train, &opts).unwrap();
    let b = mb
        .forward(&mut tape, &mb_params, &ct, &pet, Mode::Train, &ForwardOptions::default())
        .unwrap();
    assert_eq!(tape.value(a.prob), tape.value(b.prob));
}

#[test]
fn all_variants_share_configuration_and_output_shape() {
    let (ct, pet, _) = random_batch(1, 2, 32);
    for v in Variant::ALL {
        let net = network(v, 32, 4);
        let p = net.predict(&net.init_params(0).unwrap(), &ct, &pet, Mode::Inference).unwrap();
        assert_eq!(p.prob.shape(), &[2, 32, 32, 4], "{v}");
    }
}

#[test]
fn forward_is_bit_reproducible() {
    let net = network(Variant::Colearn, 32, 4);
    let params = net.init_params(9).unwrap();
    let (ct, pet, _) = random_batch(9, 2, 32);
    let a = net.predict(&params, &ct, &pet, Mode::Train).unwrap();
    let b = net.predict(&net.init_params(9).unwrap(), &ct, &pet, Mode::Train).unwrap();
    assert_eq!(a.prob, b.prob);
    assert_eq!(a.fusion_maps, b.fusion_maps);
}
