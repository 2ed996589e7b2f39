use std::collections::HashMap;

use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

use super::bundled::{bios_suite, loo_suite, range_suite, rng_suite, FILES};
use super::*;
use crate::model::{TokenSequence, Vocabulary};
use crate::numerics::{Rng, Stream};
use crate::objective::validate_prefix_free;

fn no_files(name: &str) -> Result<String> {
    Err(Error::Config(format!("unexpected sample file {name}")))
}

fn bundled_file(name: &str) -> Result<String> {
    FILES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| t.to_string())
        .ok_or_else(|| Error::Config(name.into()))
}

fn binding(low: i64, high: i64) -> SlotValues {
    SlotValues::from([("low".to_string(), low), ("high".to_string(), high)])
}

#[test]
fn rng_1_10_is_uniform_over_ten_braced_numbers() {
    let suite = rng_suite();
    let insts = instantiate_all(suite.task("rng_1_10").unwrap()).unwrap();
    assert_eq!(insts.len(), 5);
    let dist = insts[0].target.as_ref().unwrap();
    assert_eq!(dist.len(), 10);
    for n in 1..=10 {
        assert!((dist.weight_of(&format!("{{{n}}}")).unwrap() - 0.1).abs() < 1e-15);
    }
    assert!(!insts[0].proxy);
}

#[test]
fn unseen_range_has_fifty_one_targets() {
    let suite = range_suite();
    let spec = suite.task("rng_range").unwrap();
    let insts = instantiate(spec, &binding(154, 204), None).unwrap();
    assert_eq!(insts.len(), 5);
    let dist = insts[0].target.as_ref().unwrap();
    assert_eq!(dist.len(), 51);
    assert!(dist.weight_of("{154}").is_some() && dist.weight_of("{204}").is_some());
    assert!(dist.weight_of("{153}").is_none() && dist.weight_of("{205}").is_none());
    assert_eq!(insts[2].prompt, "Give me a random number, 154 to 204.");
}

#[test]
fn five_paraphrases_give_five_distinct_instances() {
    let suite = range_suite();
    let insts = instantiate(suite.task("rng_range").unwrap(), &binding(1, 10), None).unwrap();
    let mut prompts: Vec<&str> = insts.iter().map(|i| i.prompt.as_str()).collect();
    prompts.sort();
    prompts.dedup();
    assert_eq!(prompts.len(), 5);
    assert!(insts.iter().all(|i| i.target.as_ref().unwrap().len() == 10));
}

#[test]
fn instantiation_errors() {
    let suite = range_suite();
    let spec = suite.task("rng_range").unwrap();
    assert!(matches!(instantiate(spec, &binding(10, 5), None), Err(Error::Domain(_))));
    assert!(matches!(instantiate(spec, &binding(0, 5), None), Err(Error::Domain(_))));
    let only_low = SlotValues::from([("low".to_string(), 3)]);
    assert!(matches!(instantiate(spec, &only_low, None), Err(Error::Domain(_))));
    assert!(matches!(range_target(3, 2), Err(Error::Domain(_))));
}

#[test]
fn missing_slots_are_drawn_from_the_rng() {
    let suite = range_suite();
    let spec = suite.task("rng_range").unwrap();
    let only_low = SlotValues::from([("low".to_string(), 1)]);
    let mut rng = Rng::new(3, Stream::Tasks);
    let insts = instantiate(spec, &only_low, Some(&mut rng)).unwrap();
    let n = insts[0].target.as_ref().unwrap().len();
    assert!((1..=1000).contains(&n));
}

#[test]
fn names_proxy_has_forty_weighted_entries() {
    let suite = loo_suite();
    let insts = instantiate_all(suite.task("names").unwrap()).unwrap();
    let dist = insts[0].target.as_ref().unwrap();
    assert_eq!(dist.len(), 40);
    assert!(insts[0].proxy);
    let top = dist.weight_of("{Para}").unwrap();
    let tail = dist.weight_of("{Pael}").unwrap();
    assert!(top > 40.0 * tail);
    assert!((dist.weights().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn loo_suite_has_six_tasks() {
    let suite = loo_suite();
    assert_eq!(
        suite.task_names(),
        vec!["names", "countries", "fruits", "dates", "numbers", "occupations"]
    );
    assert_eq!(suite.task("occupations").unwrap().fixed_target().unwrap().0.unwrap().len(), 17);
}

#[test]
fn bundled_prompts_and_targets_fit_the_default_context() {
    let max = crate::model::ModelConfig::default().max_context;
    for suite in [rng_suite(), range_suite(), loo_suite(), bios_suite()] {
        for t in &suite.tasks {
            for inst in instantiate_all(t).unwrap() {
                let longest = inst.target.as_ref().map_or(0, |d| d.longest_target());
                assert!(inst.prompt.len() + longest <= max, "{}", t.name);
            }
        }
    }
}

#[test]
fn weights_summing_to_point_eight_are_rejected_by_task_name() {
    let text = "diffuse-suite v1\n[task dice]\nprompt: Roll.\ntarget: weighted\nvalue: 0.5 one\nvalue: 0.3 two\n";
    match parse_suite(text, "dice.suite", &no_files) {
        Err(Error::Validation { task, message }) => {
            assert_eq!(task, "dice");
            assert!(message.contains("0.8"), "{message}");
        }
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn schema_errors_name_field_and_line() {
    let cases = [
        ("diffuse-suite v2\n", 1, "header"),
        ("diffuse-suite v1\n[task a]\nprompt: x\nslot: low 1-3\n", 4, "slot"),
        ("diffuse-suite v1\n[task a]\nprompt: x\ncolour: red\n", 4, "colour"),
        ("diffuse-suite v1\n\n[task a]\nprompt: x\ntarget: gaussian\n", 5, "target"),
        ("diffuse-suite v1\n[task a]\nprompt: x\ntarget: uniform\nvalue: a\nsamples: lots\n", 6, "samples"),
        ("diffuse-suite v1\n[task a]\nprompt: x\nparser: multi\n", 4, "parser"),
        ("diffuse-suite v1\n[task a]\nprompt: x\nbudget: 3\n", 4, "budget"),
    ];
    for (text, want_line, want_field) in cases {
        match parse_suite(text, "t.suite", &no_files) {
            Err(Error::Schema { line, field, file, .. }) => {
                assert_eq!((line, field.as_str()), (want_line, want_field), "{text}");
                assert_eq!(file, "t.suite");
            }
            other => panic!("{text}: {other:?}"),
        }
    }
}

#[test]
fn sample_file_errors_carry_the_file_line() {
    let suite = "diffuse-suite v1\n[task n]\nprompt: x\ntarget: samples s.tsv\n";
    let read = |_: &str| Ok("Ann\t3\nBo\tmany\n".to_string());
    match parse_suite(suite, "x.suite", &read) {
        Err(Error::Schema { file, line, .. }) => assert_eq!((file.as_str(), line), ("s.tsv", 2)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn undeclared_slot_and_duplicate_tasks_fail_validation() {
    let undeclared = "diffuse-suite v1\n[task a]\nprompt: from ${lo}\ntarget: open\n";
    assert!(matches!(parse_suite(undeclared, "t", &no_files), Err(Error::Validation { .. })));
    let dup = "diffuse-suite v1\n[task a]\nprompt: x\ntarget: open\n[task a]\nprompt: y\ntarget: open\n";
    assert!(matches!(parse_suite(dup, "t", &no_files), Err(Error::Validation { .. })));
    let held = "diffuse-suite v1\nheld-out: zzz\n[task a]\nprompt: x\ntarget: open\n";
    assert!(matches!(parse_suite(held, "t", &no_files), Err(Error::Validation { .. })));
}

#[test]
fn open_tasks_have_no_target() {
    let text = "diffuse-suite v1\n[task story]\nparser: multi 2\nprompt: Tell me.\ntarget: open\n";
    let suite = parse_suite(text, "t", &no_files).unwrap();
    let spec = suite.task("story").unwrap();
    assert!(spec.is_open());
    assert_eq!(spec.field_names(), vec!["field1", "field2"]);
    assert!(instantiate_all(spec).unwrap()[0].target.is_none());
}

#[test]
fn every_bundled_suite_round_trips() {
    for name in ["rng", "range", "loo", "bios"] {
        let suite = bundled::suite(name).unwrap();
        let text = serialize_suite(&suite);
        let again = parse_suite(&text, name, &bundled_file).unwrap();
        assert_eq!(suite, again, "{name}");
        assert_eq!(serialize_suite(&again), text);
    }
}

#[test]
fn load_suite_resolves_sample_files_next_to_the_suite() {
    let dir = tempfile::tempdir().unwrap();
    bundled::export(dir.path()).unwrap();
    let loaded = load_suite(dir.path().join("loo.suite")).unwrap();
    assert_eq!(loaded, loo_suite());
    assert!(matches!(load_suite(dir.path().join("missing.suite")), Err(Error::Io { .. })));
}

#[test]
fn leave_one_out_splits() {
    let suite = loo_suite();
    let (train, eval) = leave_one_out(&suite, Some("numbers")).unwrap();
    assert_eq!(train.tasks.len(), 5);
    assert!(train.task("numbers").is_none());
    assert_eq!(eval.task_names(), vec!["numbers"]);
    assert!(matches!(leave_one_out(&suite, Some("planets")), Err(Error::Validation { .. })));
    let (train, eval) = leave_one_out(&suite, None).unwrap();
    assert_eq!(train, suite);
    assert_eq!(eval, suite);
}

#[test]
fn leave_one_out_is_disjoint_by_prompt_for_every_task() {
    let suite = loo_suite();
    for held in suite.task_names() {
        let (train, eval) = leave_one_out(&suite, Some(held)).unwrap();
        let prompts = |s: &SuiteConfig| -> Vec<String> {
            s.tasks
                .iter()
                .flat_map(|t| instantiate_all(t).unwrap())
                .map(|i| i.prompt)
                .collect()
        };
        let train_prompts = prompts(&train);
        assert!(prompts(&eval).iter().all(|p| !train_prompts.contains(p)), "{held}");
    }
}

#[test]
fn held_out_tasks_are_excluded_from_training() {
    let mut suite = loo_suite();
    suite.held_out = vec!["fruits".into()];
    suite.validate().unwrap();
    assert!(suite.train_tasks().iter().all(|t| t.name != "fruits"));
    assert_eq!(suite.train_tasks().len(), 5);
}

#[test]
fn bios_record_task_has_210_balanced_tuples() {
    let suite = bios_suite();
    let spec = suite.task("bios").unwrap();
    assert_eq!(spec.parser, ParserMode::Multi(3));
    let dist = instantiate_all(spec).unwrap()[0].target.clone().unwrap();
    assert_eq!(dist.len(), 210);
    let TargetSpec::Records(schema) = &spec.target else { unreachable!() };
    let tuples = balanced_tuples(schema).unwrap();
    let mut per_gender: HashMap<usize, usize> = HashMap::new();
    for t in &tuples {
        *per_gender.entry(t[0]).or_default() += 1;
    }
    assert_eq!(per_gender.values().copied().collect::<Vec<_>>(), vec![70; 3]);
    assert!(dist.weight_of("{Nonbinary} {1950} {Delhi}").is_some());
}

#[test]
fn record_task_builder_validates_schema() {
    let schema = RecordSchema {
        fields: vec![FieldSpec {
            name: "gender".into(),
            kind: FieldKind::Categorical,
            values: vec![],
        }],
        budget: 1,
    };
    assert!(matches!(
        record_task("r", vec!["Go.".into()], schema),
        Err(Error::Schema { .. })
    ));
}

#[test]
fn pretraining_corpus_repeats_bias_per_instance() {
    let corpus = rng_suite().pretraining_corpus().unwrap();
    // 5 prompts with 100 biased completions each, 10 echo copies of {1}..{10},
    // and two aside prompts with 300 × 0.1 copies of each value.
    assert_eq!(corpus.len(), 5 * 100 + 10 * 10 + 2 * 300);
    let spec = rng_suite().task("rng_1_10").unwrap().clone();
    let fives = corpus
        .iter()
        .filter(|(p, c)| c == "{5}" && spec.prompts.contains(p))
        .count();
    assert_eq!(fives, 5 * 60);
    let die = corpus.iter().filter(|(p, _)| p == "Roll a ten-sided die.").count();
    assert_eq!(die, 300);
    let corpus = range_suite().pretraining_corpus().unwrap();
    // 5 bindings; echo values are the distinct targets {1}..{100}.
    assert_eq!(corpus.len(), 25 * 100 + 4 * 100);
    assert!(corpus.contains(&("Repeat: {73}".to_string(), "{73}".to_string())));
}

#[test]
fn aside_prompts_follow_the_target_and_fill_slots() {
    let text = "diffuse-suite v1\n[task r]\nslot: hi 2..20\nbind: hi=4\nprompt: Pick 1..${hi}.\ntarget: range 1 ${hi}\naside: 8 Ball from 1 to ${hi}:\n";
    let suite = parse_suite(text, "a.suite", &no_files).unwrap();
    let corpus = suite.pretraining_corpus().unwrap();
    assert_eq!(corpus.len(), 4 * 2);
    assert!(corpus.iter().all(|(p, _)| p == "Ball from 1 to 4:"));
    let open = "diffuse-suite v1\n[task o]\nprompt: Say.\ntarget: open\naside: 8 Any:\n";
    match parse_suite(open, "o.suite", &no_files) {
        Err(Error::Validation { task, message }) => {
            assert_eq!(task, "o");
            assert!(message.contains("aside"));
        }
        other => panic!("expected a validation error, got {other:?}"),
    }
}

proptest! {
    #[test]
    fn range_targets_are_exact_uniform_and_prefix_free(low in 1i64..900, width in 0i64..120) {
        let high = low + width;
        let dist = range_target(low, high).unwrap();
        prop_assert_eq!(dist.len() as i64, width + 1);
        for n in low..=high {
            let w = dist.weight_of(&format!("{{{n}}}")).unwrap();
            prop_assert!((w - 1.0 / (width + 1) as f64).abs() < 1e-12);
        }
        prop_assert!(validate_prefix_free(dist.targets()).is_empty());
    }

    #[test]
    fn unbraced_numbers_with_eos_are_prefix_free(low in 1i64..200, width in 0i64..150) {
        let seqs: Vec<TokenSequence> = (low..=low + width)
            .map(|n| Vocabulary.encode(&n.to_string()).unwrap().with_eos())
            .collect();
        prop_assert!(validate_prefix_free(&seqs).is_empty());
    }

    #[test]
    fn serialized_uniform_tasks_round_trip(values in prop::collection::btree_set("[a-zA-Z][a-zA-Z ]{0,6}[a-z]", 1..8), n in 1usize..5000) {
        let spec = TaskSpec {
            name: "gen".into(),
            prompts: vec!["Pick one.".into(), "Choose!".into()],
            slots: vec![],
            bindings: vec![],
            target: TargetSpec::Uniform(values.into_iter().collect()),
            parser: ParserMode::Single,
            samples: n,
            bias: vec![(3, "{x}".into())],
            echo: 2,
            aside: vec![(40, "Any one:".into())],
        };
        let suite = SuiteConfig { tasks: vec![spec], held_out: vec![] };
        let again = parse_suite(&serialize_suite(&suite), "p", &no_files).unwrap();
        prop_assert_eq!(again, suite);
    }
}
