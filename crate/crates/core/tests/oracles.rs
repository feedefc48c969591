//! Layer outputs against brute-force definitions on random small instances.

mod common;

use colearn::model::{ColearnConfig, ForwardOptions, Network};
use colearn::Mode;
use colearn::Tape;
use common::*;

const INSTANCES: u64 = 100;

#[test]
fn primitives_match_brute_force_oracles() {
    for (name, case) in ORACLE_CASES {
        for seed in 0..INSTANCES {
            let err = case(seed);
            assert!(err <= 1e-5, "{name}, instance {seed}: abs error {err:.3e}");
        }
    }
}

#[test]
fn uniform_prediction_loss_is_three_quarters_ln4() {
    assert!((uniform_prediction_loss() - 0.75 * 4f64.ln()).abs() < 1e-6);
}

#[test]
fn fused_unit_matches_hand_composition() {
    let cfg = ColearnConfig {
        input_size: [16, 16],
        channels: 3,
        ..ColearnConfig::default()
    };
    let net = Network::colearn(cfg).unwrap();
    for seed in 0..5 {
        let params = net.init_params(seed).unwrap();
        let (ct, pet, _) = random_batch(seed, 1, 16);
        let mut tape = Tape::new();
        let out = net
            .forward(&mut tape, &params, &ct, &pet, Mode::Inference, &ForwardOptions::default())
            .unwrap();
        for s in 0..4 {
            let f_ct = tape.value(out.feature(&format!("enc.ct.b{s}")).unwrap()).clone();
            let f_pet = tape.value(out.feature(&format!("enc.pet.b{s}")).unwrap()).clone();
            let c = f_ct.shape()[3];
            // stack the two modalities by hand: [b,h,w,2,c]
            let n = f_ct.len() / c;
            let mut stacked = Vec::with_capacity(2 * f_ct.len());
            for p in 0..n {
                stacked.extend_from_slice(&f_ct.data()[p * c..(p + 1) * c]);
                stacked.extend_from_slice(&f_pet.data()[p * c..(p + 1) * c]);
            }
            let mut shape = f_ct.shape().to_vec();
            shape.insert(3, 2);
            let stacked = colearn::Tensor::new(shape, stacked).unwrap();
            let (_, pre) = conv3d_oracle(
                &stacked,
                params.value(&format!("colearn.u{s}.w")).unwrap(),
                params.value(&format!("colearn.u{s}.b")).unwrap(),
            );
            let mut want = Vec::with_capacity(pre.len());
            for p in 0..n {
                for o in 0..2 * c {
                    let gate = lrelu(pre[p * 2 * c + o], 0.1);
                    let x = if o < c { f_ct.data()[p * c + o] } else { f_pet.data()[p * c + o - c] };
                    want.push(gate * x as f64);
                }
            }
            let got = tape.value(out.feature(&format!("fused.u{s}")).unwrap());
            let err = max_abs_diff(got.data(), &want);
            assert!(err < 1e-4, "unit {s}, seed {seed}: {err:.3e}");
        }
    }
}
