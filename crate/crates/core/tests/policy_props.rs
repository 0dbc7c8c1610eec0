use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfd_core::policy::{act, self_instruct, softmax, Instruction, NetConfig, PolicyNet, PolicyOutput};
use sfd_core::sensor::Observation;

fn output(v: [[f64; 2]; 3], logits: [f64; 3]) -> PolicyOutput {
    PolicyOutput { v, p: softmax(&logits), logits }
}

fn any_rows() -> impl Strategy<Value = [[f64; 2]; 3]> {
    prop::array::uniform3((-1.0..=1.0f64, 0.0..=1.0f64).prop_map(|(s, t)| [s, t]))
}

#[test]
fn uniform_classes_are_drawn_evenly() {
    let out = output([[0.0, 0.0]; 3], [0.0; 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut counts = [0usize; 3];
    let n = 30_000;
    for _ in 0..n {
        counts[self_instruct(&out, &mut rng).index()] += 1;
    }
    for c in counts {
        let f = c as f64 / n as f64;
        assert!((f - 1.0 / 3.0).abs() < 0.02, "frequency {f}");
    }
}

#[test]
fn draws_repeat_under_a_fixed_seed() {
    let out = output([[0.0, 0.0]; 3], [0.3, -1.0, 0.7]);
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..500).map(|_| self_instruct(&out, &mut rng)).collect::<Vec<_>>()
    };
    assert_eq!(draw(5), draw(5));
}

#[test]
fn forward_is_byte_identical_across_fresh_nets() {
    let cfg = NetConfig::standard(48, 24, 9);
    let mut obs = Observation::blank(48, 24);
    for (i, p) in obs.pixels.iter_mut().enumerate() {
        *p = ((i * 37) % 101) as f32 / 100.0;
    }
    let a = PolicyNet::new(cfg.clone()).unwrap().forward(&obs).unwrap();
    let b = PolicyNet::new(cfg).unwrap().forward(&obs).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

proptest! {
    #[test]
    fn softmax_ignores_a_common_offset(logits in prop::array::uniform3(-30.0..30.0f64), c in -50.0..50.0f64) {
        let a = softmax(&logits);
        let b = softmax(&[logits[0] + c, logits[1] + c, logits[2] + c]);
        for i in 0..3 {
            prop_assert!((a[i] - b[i]).abs() < 1e-9);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn action_only_reads_the_selected_row(rows in any_rows(), other in any_rows(), i in 0..3usize) {
        let instr = Instruction::from_index(i).unwrap();
        let base = output(rows, [0.0; 3]);
        let mut changed = rows;
        for (j, row) in changed.iter_mut().enumerate() {
            if j != i {
                *row = other[j];
            }
        }
        prop_assert_eq!(act(&base, instr), act(&output(changed, [0.0; 3]), instr));
        let a = act(&base, instr);
        prop_assert!(a.validate().is_ok());
        prop_assert_eq!([a.steering, a.throttle], rows[i]);
    }

    #[test]
    fn heads_have_fixed_shapes_and_ranges(seed in 0u64..1000, fill in prop::collection::vec(0.0..=1.0f32, 32 * 16)) {
        let net = PolicyNet::new(NetConfig::standard(32, 16, seed)).unwrap();
        let mut obs = Observation::blank(32, 16);
        obs.pixels.copy_from_slice(&fill);
        let out = net.forward(&obs).unwrap();
        for row in out.v {
            prop_assert!((-1.0..=1.0).contains(&row[0]));
            prop_assert!((0.0..=1.0).contains(&row[1]));
        }
        prop_assert!((out.p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for i in 0..3 {
            prop_assert!(act(&out, Instruction::from_index(i).unwrap()).validate().is_ok());
        }
    }
}
