mod common;

use proptest::prelude::*;
use sfd_core::learn::{grad, loss, DemoDataset, Sample};
use sfd_core::policy::{softmax, Instruction, PolicyOutput};
use sfd_core::sensor::Observation;

#[test]
fn analytic_gradients_match_central_differences() {
    let (err, params) = common::gradient_check(3, 1e-4);
    assert!(params <= 5000, "{params} parameters");
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn zero_k_cuts_the_class_head_off() {
    let net = common::small_net(8);
    let samples = common::random_samples(5, 24, 12, 2);
    let batch: Vec<&Sample> = samples.iter().collect();
    let (g, _) = grad(&net, &batch, 0.0).unwrap();
    for (t, p) in net.params().iter().enumerate() {
        if p.name.starts_with("head_p.") {
            assert!(g.0[t].iter().all(|&v| v == 0.0), "{} has gradient", p.name);
        }
    }
}

fn any_output() -> impl Strategy<Value = PolicyOutput> {
    (
        prop::array::uniform3((-1.0..=1.0f64, 0.0..=1.0f64).prop_map(|(s, t)| [s, t])),
        prop::array::uniform3(-10.0..10.0f64),
    )
        .prop_map(|(v, logits)| PolicyOutput { v, p: softmax(&logits), logits })
}

fn any_sample() -> impl Strategy<Value = Sample> {
    (-1.0..=1.0f64, 0.0..=1.0f64, 0..3usize, prop::collection::vec(0.0..=1.0f32, 8 * 4)).prop_map(
        |(y_s, y_t, c, px)| {
            let mut obs = Observation::blank(8, 4);
            obs.pixels = px;
            Sample { obs, y_s, y_t, y_c: Instruction::from_index(c).unwrap() }
        },
    )
}

proptest! {
    #[test]
    fn loss_is_action_term_plus_weighted_cross_entropy(out in any_output(), s in any_sample(), k in 0.0..5.0f64) {
        let parts = loss(&out, &s, k);
        let row = out.v[s.y_c.index()];
        let action = (row[0] - s.y_s).powi(2) + (row[1] - s.y_t).powi(2);
        let ce = -out.p[s.y_c.index()].max(1e-12).ln();
        prop_assert!((parts.action - action).abs() < 1e-12);
        prop_assert!((parts.ce - ce).abs() < 1e-12);
        prop_assert_eq!(parts.total, parts.action + k * parts.ce);
    }

    #[test]
    fn datasets_survive_a_file_round_trip(
        routes in prop::collection::vec((0..3usize, prop::collection::vec(any_sample(), 1..5)), 1..5),
        gz in any::<bool>(),
    ) {
        let mut d = DemoDataset::default();
        for (c, samples) in routes {
            d.push_route(Instruction::from_index(c).unwrap(), samples);
        }
        let dir = std::env::temp_dir().join(format!("sfd-ds-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(if gz { "d.jsonl.gz" } else { "d.jsonl" });
        d.save(&path).unwrap();
        let back = DemoDataset::load(&path).unwrap();
        prop_assert_eq!(back, d);
    }
}
