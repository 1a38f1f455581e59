use props_core::condenc::{
    self, build_condition_matrix, clip_pad, encode_condition, encode_condition_tensor, tokenize, CondLimits, Condition,
    ConditionKind, ConditionSet, Pooling, Vocab,
};
use props_core::numkernel::{gradcheck, Graph, Tensor};
use props_core::params::ParamSet;
use props_core::{rng, Error};
use proptest::prelude::*;

fn vocab() -> Vocab {
    Vocab::from_list(["translate", "en", "to", "fr", "jump", "twice"].map(String::from))
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut rng::stream(seed, &[3]))
}

#[test]
fn tokenize_examples() {
    let v = vocab();
    assert_eq!(
        tokenize("Translate en to fr", &v),
        vec![v.id("translate"), v.id("en"), v.id("to"), v.id("fr")]
    );
    assert!(tokenize("", &v).is_empty());
    assert_eq!(tokenize("zebra", &v), vec![1]);
}

#[test]
fn clip_pad_examples() {
    let ids = [4, 5, 6, 7, 8, 9, 10];
    assert_eq!(clip_pad(&ids, 5), vec![4, 5, 6, 7, 8]);
    assert_eq!(clip_pad(&ids[..3], 5), vec![4, 5, 6, 0, 0]);
    assert_eq!(clip_pad(&ids[..5], 5), ids[..5].to_vec());
}

#[test]
fn vocab_orders_by_frequency_then_lexicographically() {
    let v = Vocab::build(["b a c", "a b", "a d"]);
    assert_eq!(&v.tokens()[..4], &["<pad>", "<unk>", "<bos>", "<eos>"]);
    assert_eq!(&v.tokens()[4..], &["a", "b", "c", "d"]);
    let again = Vocab::build(["b a c", "a b", "a d"]);
    assert_eq!(v, again);
    let back = Vocab::from_json(&v.to_json()).unwrap();
    assert_eq!(back.id("c"), v.id("c"));
    assert_eq!(v.decode(&[2, 4, 5, 3, 6]), "a b");
    assert!(matches!(v.token(99), Err(Error::Vocabulary { .. })));
}

#[test]
fn singleton_sequence_pools_to_its_projection() {
    let x = rand_tensor(&[1, 6], 1);
    let w = rand_tensor(&[6, 1], 2);
    let wp = rand_tensor(&[6, 6], 3);
    let out = encode_condition_tensor(&x, &[true], &w, &wp, Pooling::AttentiveMax).unwrap();
    let mut g = Graph::new();
    let (vx, vp) = (g.frozen(&x), g.frozen(&wp));
    let proj = g.matmul(vx, vp).unwrap();
    assert_eq!(out.data(), g.value(proj));
}

#[test]
fn swapping_tokens_keeps_the_pooled_vector() {
    let x = rand_tensor(&[4, 6], 4);
    let mut rows: Vec<Vec<f64>> = (0..4).map(|i| x.row(i).to_vec()).collect();
    rows.swap(0, 2);
    let swapped = Tensor::from_rows(&rows).unwrap();
    let w = rand_tensor(&[6, 1], 5);
    let wp = rand_tensor(&[6, 6], 6);
    let a = encode_condition_tensor(&x, &[true; 4], &w, &wp, Pooling::AttentiveMax).unwrap();
    let b = encode_condition_tensor(&swapped, &[true; 4], &w, &wp, Pooling::AttentiveMax).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-15);
}

#[test]
fn pooling_passes_finite_differences() {
    for pooling in [Pooling::AttentiveMax, Pooling::WeightedSum] {
        for trial in 0..10 {
            let inputs = [
                rand_tensor(&[5, 4], 10 + trial),
                rand_tensor(&[4, 1], 20 + trial),
                rand_tensor(&[4, 4], 30 + trial),
            ];
            let rep = gradcheck::check(
                |g, v| {
                    let y = encode_condition(g, v[0], v[1], v[2], pooling)?;
                    let y2 = g.mul(y, y)?;
                    g.sum(y2)
                },
                &inputs,
                None,
                trial,
            )
            .unwrap();
            assert!(rep.max_rel_err < 1e-3, "{pooling:?} {rep:?}");
        }
    }
}

#[test]
fn trailing_padding_never_changes_the_encoding() {
    let v = vocab();
    let mut p = ParamSet::new();
    let idx = condenc::add_encoder_params(&mut p, "cond", v.len(), 8, &mut rng::stream(1, &[]));
    let ids = tokenize("translate en to fr", &v);
    let encode = |t_c: usize| {
        let c = Condition::new("instruction", ConditionKind::Instruction, &ids, t_c).unwrap();
        let cs = ConditionSet::new(vec![c]).unwrap();
        let mut g = Graph::new();
        let vars = p.bind(&mut g);
        let e = build_condition_matrix(&mut g, &cs, &vars, idx, Pooling::AttentiveMax).unwrap();
        g.to_tensor(e)
    };
    let base = encode(4);
    for t_c in [5, 9, 50] {
        assert_eq!(base.data(), encode(t_c).data());
    }
}

#[test]
fn all_pad_condition_is_an_error() {
    let c = Condition::new("direction", ConditionKind::Instruction, &[], 5).unwrap();
    let cs = ConditionSet::new(vec![c]).unwrap();
    let mut p = ParamSet::new();
    let idx = condenc::add_encoder_params(&mut p, "cond", 10, 4, &mut rng::stream(1, &[]));
    let mut g = Graph::new();
    let vars = p.bind(&mut g);
    let err = build_condition_matrix(&mut g, &cs, &vars, idx, Pooling::AttentiveMax).unwrap_err();
    assert!(matches!(err, Error::EmptyCondition(n) if n == "direction"));
    let x = rand_tensor(&[2, 4], 1);
    let err = encode_condition_tensor(
        &x,
        &[false, false],
        &rand_tensor(&[4, 1], 2),
        &rand_tensor(&[4, 4], 3),
        Pooling::AttentiveMax,
    );
    assert!(matches!(err, Err(Error::EmptyCondition(_))));
}

#[test]
fn condition_matrix_rows_follow_set_order() {
    let v = vocab();
    let lim = CondLimits::default();
    let mut p = ParamSet::new();
    let idx = condenc::add_encoder_params(&mut p, "cond", v.len(), 64, &mut rng::stream(2, &[]));
    let cs = ConditionSet::new(vec![
        Condition::from_text(
            "instruction",
            ConditionKind::Instruction,
            "translate en to fr",
            &v,
            &lim,
        )
        .unwrap(),
        Condition::from_text("direction", ConditionKind::Metadata, "jump twice", &v, &lim).unwrap(),
        Condition::from_text("copy", ConditionKind::Metadata, "jump twice", &v, &lim).unwrap(),
    ])
    .unwrap();
    let mut g = Graph::new();
    let vars = p.bind(&mut g);
    let e = build_condition_matrix(&mut g, &cs, &vars, idx, Pooling::AttentiveMax).unwrap();
    let e = g.to_tensor(e);
    assert_eq!(e.shape(), &[3, 64]);
    assert_eq!(e.row(1), e.row(2));
    assert_ne!(e.row(0), e.row(1));
    assert_eq!(cs.conditions()[1].max_t_c, 5);
}

proptest! {
    #[test]
    fn pooled_coordinates_are_bounded(seed in 0u64..5000, t in 1usize..7) {
        let x = rand_tensor(&[t, 5], seed);
        let w = rand_tensor(&[5, 1], seed + 1);
        let wp = rand_tensor(&[5, 5], seed + 2);
        let out = encode_condition_tensor(&x, &vec![true; t], &w, &wp, Pooling::AttentiveMax).unwrap();
        let mut g = Graph::new();
        let (vx, vw, vp) = (g.frozen(&x), g.frozen(&w), g.frozen(&wp));
        let s = g.matmul(vx, vw).unwrap();
        let a = g.softmax(s, 0).unwrap();
        let proj = g.matmul(vx, vp).unwrap();
        let amax = g.value(a).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for j in 0..5 {
            let pmax = (0..t).map(|i| g.value(proj)[i * 5 + j].abs()).fold(0.0, f64::max);
            prop_assert!(out.data()[j].abs() <= amax * pmax + 1e-12);
        }
        let again = encode_condition_tensor(&x, &vec![true; t], &w, &wp, Pooling::AttentiveMax).unwrap();
        prop_assert_eq!(out.data(), again.data());
    }
}
