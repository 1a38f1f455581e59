use std::collections::{HashMap, HashSet};

use props_core::condenc::{CondLimits, Vocab};
use props_core::plm::UNK;
use props_core::tasks::{
    self, all_commands, attach_conditions, build_dataset, composition_instructions, content_words, from_tsv,
    gen_multitask_transduction, gen_scan_split, scan_interpret, to_tsv, universe_vocab, BridgeSpec, Example,
    InstructionVariant, Languages, SplitKind, SplitSpec, TaskKind, TaskSpec, TransductionSpec,
};
use props_core::Error;

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn interp(s: &str) -> String {
    scan_interpret(&words(s)).unwrap().join(" ")
}

/// Second interpreter built from textual templates.
fn template_oracle(cmd: &str) -> String {
    fn phrase(p: &str) -> String {
        let w = words(p);
        let act = format!("i_{}", w[0]);
        let (body, count) = match w.last() {
            Some(&"twice") => (&w[1..w.len() - 1], 2),
            Some(&"thrice") => (&w[1..w.len() - 1], 3),
            _ => (&w[1..], 1),
        };
        let unit = match body {
            [] => act,
            [d] => format!("i_turn_{d} {act}"),
            ["opposite", d] => format!("i_turn_{d} i_turn_{d} {act}"),
            ["around", d] => vec![format!("i_turn_{d} {act}"); 4].join(" "),
            _ => panic!("bad phrase {p}"),
        };
        vec![unit; count].join(" ")
    }
    if let Some((a, b)) = cmd.split_once(" and ") {
        format!("{} {}", phrase(a), phrase(b))
    } else if let Some((a, b)) = cmd.split_once(" after ") {
        format!("{} {}", phrase(b), phrase(a))
    } else {
        phrase(cmd)
    }
}

#[test]
fn interpreter_examples() {
    assert_eq!(interp("walk"), "i_walk");
    assert_eq!(interp("walk left twice"), "i_turn_left i_walk i_turn_left i_walk");
    assert_eq!(
        interp("run thrice and walk opposite left"),
        "i_run i_run i_run i_turn_left i_turn_left i_walk"
    );
    assert_eq!(interp("look after jump right"), "i_turn_right i_jump i_look");
    let err = scan_interpret(&words("walk sideways")).unwrap_err();
    assert!(
        matches!(err, Error::Grammar { ref token, .. } if token == "sideways"),
        "{err}"
    );
    assert!(matches!(scan_interpret(&words("twice walk")), Err(Error::Grammar { token, .. }) if token == "twice"));
    assert!(matches!(scan_interpret(&words("walk around")), Err(Error::Grammar { token, .. }) if token == "around"));
}

#[test]
fn interpreter_agrees_with_template_oracle_on_the_whole_language() {
    let all = all_commands();
    assert_eq!(all.len(), 84 + 2 * 84 * 84);
    let mut longest = 0;
    for c in &all {
        let out = scan_interpret(c).unwrap();
        longest = longest.max(out.len());
        assert_eq!(out.join(" "), template_oracle(&c.join(" ")), "{c:?}");
        assert!(c.len() <= 9);
    }
    assert_eq!(longest, tasks::MAX_ACTIONS);
}

fn has_prim(ex: &Example, p: &str) -> bool {
    ex.src.iter().any(|w| w == p)
}

#[test]
fn add_primitive_split_sees_the_primitive_only_alone() {
    let spec = SplitSpec {
        kind: SplitKind::AddPrimitive {
            primitive: "jump".into(),
        },
        seed: 3,
        n_train: 500,
        n_test: 200,
        max_actions: 0,
    };
    let (train, test) = gen_scan_split(&spec).unwrap();
    assert_eq!((train.len(), test.len()), (500, 200));
    let alone: Vec<_> = train.iter().filter(|e| has_prim(e, "jump")).collect();
    assert_eq!(alone.len(), 10);
    assert!(alone.iter().all(|e| e.src == ["jump"] && e.tgt == ["i_jump"]));
    assert!(test.iter().all(|e| has_prim(e, "jump") && e.src.len() > 1));
    let train_cmds: HashSet<_> = train.iter().map(|e| e.src.join(" ")).collect();
    assert!(test.iter().all(|e| !train_cmds.contains(&e.src.join(" "))));
    assert_eq!(gen_scan_split(&spec).unwrap(), (train, test));
}

#[test]
fn action_cap_applies_to_both_sides_of_the_split() {
    let (train, test) = gen_scan_split(&SplitSpec {
        kind: SplitKind::AddPrimitive {
            primitive: "jump".into(),
        },
        seed: 3,
        n_train: 500,
        n_test: 200,
        max_actions: 8,
    })
    .unwrap();
    assert!(train.iter().chain(&test).all(|e| e.tgt.len() <= 8));
    assert!(test.iter().all(|e| has_prim(e, "jump")));
}

#[test]
fn length_and_random_splits_honor_their_contracts() {
    let (train, test) = gen_scan_split(&SplitSpec {
        kind: SplitKind::Length { max_train_len: 6 },
        seed: 1,
        n_train: 300,
        n_test: 300,
        max_actions: 0,
    })
    .unwrap();
    assert!(train.iter().all(|e| e.tgt.len() <= 6));
    assert!(test.iter().all(|e| e.tgt.len() > 6));
    let (train, test) = gen_scan_split(&SplitSpec {
        kind: SplitKind::Random,
        seed: 1,
        n_train: 400,
        n_test: 100,
        max_actions: 0,
    })
    .unwrap();
    let seen: HashSet<_> = train.iter().map(|e| e.src.join(" ")).collect();
    assert_eq!(seen.len(), 400);
    assert!(test.iter().all(|e| !seen.contains(&e.src.join(" "))));
    for e in train.iter().chain(&test) {
        let src: Vec<&str> = e.src.iter().map(String::as_str).collect();
        assert_eq!(e.tgt.join(" "), template_oracle(&src.join(" ")));
    }
    let too_many = gen_scan_split(&SplitSpec {
        kind: SplitKind::Length { max_train_len: 1 },
        seed: 1,
        n_train: 10,
        n_test: 1,
        max_actions: 0,
    });
    assert!(matches!(too_many, Err(Error::Generation(_))));
}

#[test]
fn scan_conditions_follow_the_command() {
    let (train, _) = gen_scan_split(&SplitSpec {
        kind: SplitKind::Random,
        seed: 2,
        n_train: 2000,
        n_test: 0,
        max_actions: 0,
    })
    .unwrap();
    let conds = tasks::scan_conditions(&words("jump and walk left"));
    let texts: Vec<&str> = conds.iter().map(|c| c.text.as_str()).collect();
    assert_eq!(texts, ["generate actions", "and", "left"]);
    for e in &train {
        assert_eq!(e.conditions[0].text, "generate actions");
        let has_conj = e.src.iter().any(|w| w == "and" || w == "after");
        assert_eq!(e.conditions.iter().any(|c| c.name == "conjunction"), has_conj);
    }
}

#[test]
fn transduction_labels_match_independent_recomputation() {
    let langs = Languages::new(7);
    let pairs = langs.all_pairs();
    assert_eq!(pairs.len(), 12);
    let (train, eval) = gen_multitask_transduction(
        &pairs,
        &TransductionSpec {
            n_per_pair: 20,
            n_eval: 5,
            min_len: 3,
            max_len: 8,
            bridge: None,
            seed: 1,
        },
    )
    .unwrap();
    assert_eq!((train.len(), eval.len()), (240, 60));
    let idx = |t: &str| t[1..].parse::<usize>().unwrap();
    let lang = |n: &str| langs.names.iter().position(|x| x == n).unwrap();
    for e in train.iter().chain(&eval) {
        let (s, t) = e.task_id.split_once('-').unwrap();
        let (ps, pt) = (&langs.perms[lang(s)], &langs.perms[lang(t)]);
        let inv: HashMap<usize, usize> = ps.iter().enumerate().map(|(x, &y)| (y, x)).collect();
        let want: Vec<String> = e.src.iter().map(|y| format!("p{:02}", pt[inv[&idx(y)]])).collect();
        assert_eq!(e.tgt, want);
        assert_eq!(e.conditions.len(), 1);
        assert_eq!(e.conditions[0].text, format!("translate {s} to {t}"));
    }
    let copy = langs.task("fr", "fr").unwrap();
    assert!(copy.image().iter().enumerate().all(|(i, t)| *t == format!("p{i:02}")));
}

#[test]
fn bridge_target_stays_out_of_training() {
    let langs = Languages::new(7);
    let tasks = vec![
        langs.task("en", "de").unwrap(),
        langs.task("de", "fr").unwrap(),
        langs.task("en", "fr").unwrap(),
    ];
    let spec = TransductionSpec {
        n_per_pair: 30,
        n_eval: 10,
        min_len: 3,
        max_len: 6,
        bridge: Some(BridgeSpec {
            target: "en-fr".into(),
            few_shot: 0,
        }),
        seed: 2,
    };
    let (train, eval) = gen_multitask_transduction(&tasks, &spec).unwrap();
    assert!(train.iter().all(|e| e.task_id != "en-fr"));
    assert_eq!(eval.iter().filter(|e| e.task_id == "en-fr").count(), 10);
    let dup = vec![tasks[0].clone(), tasks[0].clone()];
    assert!(matches!(gen_multitask_transduction(&dup, &spec), Err(Error::Config(_))));

    let with = |n| {
        build_dataset(&TaskSpec {
            kind: TaskKind::Bridge,
            n_bridges: n,
            n_train: 40,
            n_valid: 8,
            n_test: 10,
            few_shot: 12,
            ..Default::default()
        })
        .unwrap()
    };
    let base = with(0);
    for n in [2, 3] {
        let d = with(n);
        let target = |ds: &tasks::Dataset| {
            ds.train
                .iter()
                .chain(&ds.valid)
                .filter(|e| e.task_id == "en-fr")
                .map(|e| e.src.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(target(&d), target(&base));
    }
}

#[test]
fn datasets_are_deterministic_and_use_known_tokens() {
    let vocab: Vocab = universe_vocab();
    let lim = CondLimits::default();
    for kind in [
        TaskKind::ScanAddPrimitive,
        TaskKind::ScanLength,
        TaskKind::ScanRandom,
        TaskKind::Transduction,
        TaskKind::RuleSep,
        TaskKind::Bridge,
        TaskKind::Summarization,
    ] {
        let spec = TaskSpec {
            kind,
            n_train: 60,
            n_valid: 12,
            n_test: 20,
            n_bridges: 3,
            ..Default::default()
        };
        let a = build_dataset(&spec).unwrap();
        assert_eq!(a, build_dataset(&spec).unwrap(), "{kind:?}");
        assert!(!a.train.is_empty() && !a.valid.is_empty() && !a.test.is_empty());
        for e in a.train.iter().chain(&a.valid).chain(&a.test) {
            let all = e.src.iter().chain(&e.tgt);
            assert!(all.clone().all(|w| vocab.id(w) != UNK), "{kind:?} {e:?}");
            let cs = attach_conditions(e, &vocab, &lim).unwrap();
            assert!(cs.iter().all(|c| c.real_tokens().iter().all(|&t| t != UNK)));
        }
    }
}

#[test]
fn summarization_tags_select_language_and_length() {
    let rows = tasks::gen_summarization(&Languages::new(7), 50, 4).unwrap();
    for e in &rows {
        let outlet = &e.conditions[1].text;
        assert_eq!(e.task_id, format!("sum-{outlet}"));
        let open = e.src.iter().position(|w| w == "[").unwrap();
        let close = e.src.iter().position(|w| w == "]").unwrap();
        let span = close - open - 1;
        let want = if e.conditions[2].text == "lead" { 2 } else { span };
        assert_eq!(e.tgt.len(), want);
    }
}

#[test]
fn detailed_instructions_overlap_each_support_task() {
    let (support, target) = composition_instructions(InstructionVariant::Detailed);
    let t = content_words(target);
    for s in support {
        assert!(content_words(s).intersection(&t).count() >= 3, "{s}");
    }
    let (support, target) = composition_instructions(InstructionVariant::Simple);
    let t = content_words(target);
    assert!(support.iter().any(|s| content_words(s).intersection(&t).count() < 3));
}

#[test]
fn tsv_roundtrip_keeps_rows_and_hash() {
    let spec = TaskSpec {
        kind: TaskKind::ScanRandom,
        n_train: 30,
        n_valid: 5,
        n_test: 5,
        ..Default::default()
    };
    let d = build_dataset(&spec).unwrap();
    let text = to_tsv(&d.train, &spec.hash()).unwrap();
    assert!(text.starts_with(&format!("# spec_hash={}\n", spec.hash())));
    let (hash, rows) = from_tsv(&text).unwrap();
    assert_eq!(hash, spec.hash());
    assert_eq!(rows, d.train);
    assert!(matches!(from_tsv("scan\ta\tb\t\n"), Err(Error::Parse(_))));
    let other = TaskSpec { data_seed: 99, ..spec };
    assert_ne!(other.hash(), TaskSpec::default().hash());
}
