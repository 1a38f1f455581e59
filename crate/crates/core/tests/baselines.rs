use props_core::baselines::{prefixpp_prepare, Generator, GeneratorKind, TrsfGenerator, PREFIX_HIDDEN};
use props_core::condenc::{CondLimits, Condition, ConditionKind, ConditionSet, EncoderIdx, Vocab};
use props_core::numkernel::{gradcheck, Graph, Tensor};
use props_core::plm::{build_plm, forward_graph, Adaptation, PlmConfig, PlmVars, PretrainExample, PromptPack, Site};
use props_core::props::{GenCtx, PropsConfig};
use props_core::{params, Error};

fn vocab() -> Vocab {
    Vocab::from_list(
        [
            "jump",
            "walk",
            "twice",
            "and",
            "left",
            "translate",
            "actions",
            "to",
            "§",
        ]
        .map(String::from),
    )
}

fn small_cfg() -> PropsConfig {
    PropsConfig {
        n_rules: 4,
        k: 2,
        layers: 2,
        tau: 1.0,
        t_p: 2,
        d: 8,
        ffn_dim: 16,
        ..Default::default()
    }
}

fn plm_cfg(v: &Vocab) -> PlmConfig {
    PlmConfig {
        vocab_size: v.len(),
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 2,
        ffn_dim: 16,
        max_len: 16,
    }
}

fn conditions(v: &Vocab, instr: &str, extra: &[(&str, &str)]) -> ConditionSet {
    let lim = CondLimits {
        instruction: 10,
        ..Default::default()
    };
    let mut cs = vec![Condition::from_text("instruction", ConditionKind::Instruction, instr, v, &lim).unwrap()];
    for (name, text) in extra {
        cs.push(Condition::from_text(*name, ConditionKind::Metadata, text, v, &lim).unwrap());
    }
    ConditionSet::new(cs).unwrap()
}

fn generate(gen: &Generator, cs: &ConditionSet, adapt: &Adaptation) -> PromptPack {
    let mut g = Graph::new();
    let v = gen.params().bind(&mut g);
    let (pv, _) = gen.generate(&mut g, &v, cs, adapt, GenCtx::eval(0)).unwrap();
    pv.to_pack(&g)
}

fn max_pack_diff(a: &PromptPack, b: &PromptPack) -> f64 {
    a.slots
        .iter()
        .map(|(k, (ak, av))| {
            let (bk, bv) = b.slots.get(k).unwrap();
            ak.max_abs_diff(bk).max(av.max_abs_diff(bv))
        })
        .fold(0.0, f64::max)
}

#[test]
fn kind_names_roundtrip() {
    for k in GeneratorKind::ALL {
        assert_eq!(k.as_str().parse::<GeneratorKind>().unwrap(), k);
        let json = serde_json::to_string(&k).unwrap();
        assert_eq!(json, format!("\"{}\"", k.as_str()));
    }
    assert!(matches!("lora".parse::<GeneratorKind>(), Err(Error::Config(_))));
}

#[test]
fn prefixpp_writes_conditions_before_the_source() {
    let v = vocab();
    let sep = v.id("§");
    let cs = conditions(&v, "translate actions", &[("direction", "left")]);
    let src = [v.id("jump"), v.id("twice")];
    let out = prefixpp_prepare(&src, Some(&cs), sep, 16).unwrap();
    let want = [
        v.id("translate"),
        v.id("actions"),
        sep,
        v.id("left"),
        sep,
        v.id("jump"),
        v.id("twice"),
    ];
    assert_eq!(out, want);
    assert_eq!(prefixpp_prepare(&src, None, sep, 16).unwrap(), src);
}

#[test]
fn prefixpp_overflow_cuts_the_source_tail() {
    let v = vocab();
    let sep = v.id("§");
    let cs = conditions(&v, "translate actions", &[]);
    let src = [v.id("jump"), v.id("twice"), v.id("and"), v.id("walk")];
    let out = prefixpp_prepare(&src, Some(&cs), sep, 5).unwrap();
    assert_eq!(
        out,
        [v.id("translate"), v.id("actions"), sep, v.id("jump"), v.id("twice")]
    );
    assert!(matches!(
        prefixpp_prepare(&src, Some(&cs), sep, 2),
        Err(Error::Config(_))
    ));
}

#[test]
fn unconditional_prompts_ignore_the_conditions() {
    let v = vocab();
    let plm = plm_cfg(&v);
    let adapt = Adaptation::all(&plm);
    let a = conditions(&v, "jump twice", &[]);
    let b = conditions(&v, "translate actions to walk", &[("direction", "left")]);
    for kind in [GeneratorKind::Prefix, GeneratorKind::PrefixPp] {
        let gen = Generator::new(kind, &small_cfg(), v.len(), &plm, &adapt, 3).unwrap();
        let (pa, pb) = (generate(&gen, &a, &adapt), generate(&gen, &b, &adapt));
        pa.validate(&plm, &adapt).unwrap();
        assert_eq!(max_pack_diff(&pa, &pb), 0.0, "{kind}");
    }
}

#[test]
fn conditional_prompts_respond_to_the_conditions() {
    let v = vocab();
    let plm = plm_cfg(&v);
    let adapt = Adaptation::all(&plm);
    let a = conditions(&v, "jump twice", &[]);
    let b = conditions(&v, "translate actions to walk", &[("direction", "left")]);
    for kind in [GeneratorKind::TrsfP, GeneratorKind::STrsfP, GeneratorKind::Props] {
        let gen = Generator::new(kind, &small_cfg(), v.len(), &plm, &adapt, 3).unwrap();
        let (pa, pb) = (generate(&gen, &a, &adapt), generate(&gen, &b, &adapt));
        pa.validate(&plm, &adapt).unwrap();
        assert!(max_pack_diff(&pa, &pb) > 1e-6, "{kind}");
    }
}

#[test]
fn shared_generator_repeats_one_pack_and_per_site_does_not() {
    let v = vocab();
    let plm = plm_cfg(&v);
    let adapt = Adaptation::all(&plm);
    let cs = conditions(&v, "jump twice", &[("direction", "left")]);
    let s = generate(
        &Generator::new(GeneratorKind::STrsfP, &small_cfg(), v.len(), &plm, &adapt, 1).unwrap(),
        &cs,
        &adapt,
    );
    let first = s.get(Site::EncSelf, 0).unwrap();
    assert!(s.slots.values().all(|p| p == first));
    let t = generate(
        &Generator::new(GeneratorKind::TrsfP, &small_cfg(), v.len(), &plm, &adapt, 1).unwrap(),
        &cs,
        &adapt,
    );
    assert_eq!(t.get(Site::DecSelf, 0), t.get(Site::DecSelf, 1));
    assert_ne!(t.get(Site::EncSelf, 0), t.get(Site::Cross, 0));
}

#[test]
fn every_generator_is_trained_through_the_frozen_model() {
    let v = vocab();
    let plm = plm_cfg(&v);
    let mut model = build_plm(&plm, 4).unwrap();
    model.freeze();
    let adapt = Adaptation::all(&plm);
    let cs = conditions(&v, "jump twice and walk", &[("direction", "left")]);
    let (dec_in, targets) = PretrainExample::teacher_forcing(&[v.id("walk"), v.id("jump")]);
    for kind in GeneratorKind::ALL {
        let gen = Generator::new(kind, &small_cfg(), v.len(), &plm, &adapt, 5).unwrap();
        let mut g = Graph::new();
        let pv = gen.params().bind(&mut g);
        let (prompts, _) = gen.generate(&mut g, &pv, &cs, &adapt, GenCtx::eval(0)).unwrap();
        let mv = PlmVars::bind(&model, &mut g);
        let logits = forward_graph(&mut g, &model, &mv, &[v.id("jump")], &dec_in, Some(&prompts)).unwrap();
        let loss = g.cross_entropy(logits, &targets).unwrap();
        let grads = g.backward(loss).unwrap();
        let pg = params::collect_grads(gen.params(), &pv, &grads);
        let total: f64 = pg.iter().flat_map(|t| t.iter()).map(|x| x * x).sum();
        assert!(total > 0.0, "{kind}");
        assert!(mv.vars.iter().all(|&x| grads.get(x).is_none()), "{kind}");
    }
}

#[test]
fn transformer_generator_passes_finite_differences() {
    let v = vocab();
    let plm = plm_cfg(&v);
    let adapt = Adaptation::all(&plm);
    let cs = conditions(&v, "jump twice", &[("direction", "left")]);
    let gen = TrsfGenerator::new(&small_cfg(), v.len(), plm.d_model, true, 9).unwrap();
    let wrapped = Generator::STrsfP(gen);
    let inputs: Vec<Tensor> = wrapped.params().tensors().to_vec();
    let rep = gradcheck::check(
        |g, vars| {
            let (pv, _) = wrapped.generate(g, vars, &cs, &adapt, GenCtx::eval(0))?;
            let (pk, pvv) = *pv.slots.values().next().unwrap();
            let a = g.mul(pk, pk)?;
            let b = g.mul(pk, pvv)?;
            let s = g.add(a, b)?;
            g.sum(s)
        },
        &inputs,
        Some(200),
        2,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-3, "{rep:?}");
}

#[test]
fn parameter_counts_follow_the_closed_forms() {
    let v = vocab();
    let plm = plm_cfg(&v);
    let adapt = Adaptation::all(&plm);
    let cfg = small_cfg();
    let (d, n, dm, vs, f) = (cfg.d, cfg.n_rules, plm.d_model, v.len(), cfg.ffn_dim);
    let count = |k| Generator::new(k, &cfg, vs, &plm, &adapt, 0).unwrap().param_count();
    let transition = 2 * d + d * f + f + f * d + d;
    let shared_block = vs * d + n * 3 * d * d + n * d * d + 2 * d + transition + d * 2 * dm;
    assert_eq!(count(GeneratorKind::STrsfP), shared_block);
    assert_eq!(count(GeneratorKind::TrsfP), 3 * count(GeneratorKind::STrsfP));
    let props = EncoderIdx::param_count(vs, d) + n * d + 3 * d * d + n * 3 * d * d + 2 * d + transition + d * 2 * dm;
    assert_eq!(count(GeneratorKind::Props), props);
    let w = 2 * dm;
    let ffn = w * PREFIX_HIDDEN + PREFIX_HIDDEN + PREFIX_HIDDEN * w + w;
    let layers = plm.n_enc_layers + 2 * plm.n_dec_layers;
    assert_eq!(count(GeneratorKind::Prefix), layers * cfg.t_p * w + 3 * ffn);
    assert_eq!(count(GeneratorKind::PrefixPp), count(GeneratorKind::Prefix));
}
