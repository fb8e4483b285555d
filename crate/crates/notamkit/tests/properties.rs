//! Randomized invariant checks over the library's pure cores: aggregation,
//! voting, the debate field manager, metrics, parsing, and corpus statistics.

use std::collections::BTreeMap;

use proptest::prelude::*;
use serde_json::{json, Value};

use notamkit::corpus::{compute_stats, parse_notam, NotamRecord};
use notamkit::debate::{
    field_manager_apply, Critique, CritiqueAction, ExpertRole, Proposal, ProposalAction,
};
use notamkit::discovery::{
    consensus_aggregate, tokenize, AgentOrigin, AggregatorConfig, EmergentField,
};
use notamkit::evalkit::{f1_score, split_corpus, Counts, EvalReport};
use notamkit::schema::{builtin_schema, grade_als, ExtractionResult, FieldRecord};
use notamkit::strategies::{first_json_value, self_consistency_vote, VoteSample};

const VOCAB: [&str; 10] = [
    "runway", "closure", "status", "wind", "shear", "apron", "taxiway", "snow", "light", "work",
];

fn field_strategy() -> impl Strategy<Value = EmergentField> {
    (
        proptest::sample::subsequence(VOCAB.to_vec(), 1..=4),
        proptest::sample::subsequence(VOCAB.to_vec(), 0..=4),
        1..=3usize,
    )
        .prop_map(|(name_tokens, desc_tokens, source_count)| EmergentField {
            name: name_tokens.join("_"),
            description: desc_tokens.join(" "),
            value: "v".into(),
            sources: (0..source_count).map(|k| format!("s{k}")).collect(),
            origin_agent: AgentOrigin::Validation,
        })
}

fn fields_strategy(max: usize) -> impl Strategy<Value = Vec<EmergentField>> {
    proptest::collection::vec(field_strategy(), 0..=max)
}

fn proposal_strategy() -> impl Strategy<Value = Proposal> {
    let name = proptest::sample::select(VOCAB.to_vec()).prop_map(str::to_string);
    let action = prop_oneof![
        (proptest::collection::vec(name.clone(), 2..=3), name.clone()).prop_map(
            |(fields_to_merge, new_field_name)| ProposalAction::Merge {
                fields_to_merge,
                new_field_name,
            }
        ),
        name.clone().prop_map(|target_field| ProposalAction::Remove { target_field }),
        (name.clone(), name).prop_map(|(old_field_name, new_field_name)| {
            ProposalAction::Rename {
                old_field_name,
                new_field_name,
            }
        }),
    ];
    (action, 0.0..=1.0f64).prop_map(|(action, confidence)| Proposal {
        action,
        reason: "r".into(),
        confidence,
        origin: ExpertRole::Consolidation,
    })
}

fn plain_field(name: &str) -> EmergentField {
    EmergentField {
        name: name.into(),
        description: "d".into(),
        value: "v".into(),
        sources: vec![format!("src {name}")],
        origin_agent: AgentOrigin::Validation,
    }
}

fn taxiway_sample(status: &str, cause: Option<&str>, temperature: f64) -> VoteSample {
    let mut record = FieldRecord::new();
    record.insert("airport".into(), json!("ZBAA"));
    record.insert("surface_id".into(), json!("18L"));
    record.insert("surface_type".into(), json!("RWY"));
    record.insert("status".into(), json!(status));
    record.insert(
        "cause".into(),
        cause.map(|c| json!(c)).unwrap_or(Value::Null),
    );
    record.insert("end_time".into(), Value::Null);
    let mut result = ExtractionResult::empty("n1", "runway_taxiway");
    result.records.push(record);
    VoteSample {
        result,
        temperature,
    }
}

proptest! {
    // A threshold of 1.0 admits no edge, so aggregation is the identity.
    #[test]
    fn aggregation_at_tau_one_is_identity(fields in fields_strategy(8)) {
        let out = consensus_aggregate(&fields, &AggregatorConfig::new(1.0).unwrap());
        prop_assert_eq!(out, fields);
    }

    // Raising the threshold removes merge edges, never adds them, so the
    // output can only get more granular.
    #[test]
    fn aggregation_output_size_grows_with_tau(fields in fields_strategy(8)) {
        let loose = consensus_aggregate(&fields, &AggregatorConfig::new(0.3).unwrap());
        let strict = consensus_aggregate(&fields, &AggregatorConfig::new(0.7).unwrap());
        prop_assert!(strict.len() >= loose.len());
        prop_assert!(loose.len() <= fields.len());
    }

    // Evidence conservation: every source excerpt survives into the output,
    // and within-component duplicates collapse rather than multiply.
    #[test]
    fn aggregation_conserves_sources(
        fields in fields_strategy(8),
        tau in 0.1..=0.9f64,
    ) {
        let out = consensus_aggregate(&fields, &AggregatorConfig::new(tau).unwrap());
        for f in &fields {
            for source in &f.sources {
                prop_assert!(out.iter().any(|g| g.sources.contains(source)));
            }
        }
        for g in &out {
            let mut seen = g.sources.clone();
            seen.sort();
            seen.dedup();
            prop_assert_eq!(seen.len(), g.sources.len());
        }
    }

    // Voting over identical samples returns that sample's records.
    #[test]
    fn vote_of_identical_samples_is_the_sample(copies in 1..=5usize) {
        let schema = builtin_schema("runway_taxiway").unwrap();
        let samples: Vec<VoteSample> =
            (0..copies).map(|_| taxiway_sample("closed", Some("WIP"), 0.0)).collect();
        let voted = self_consistency_vote(&samples, schema).unwrap();
        prop_assert_eq!(&voted.records, &samples[0].result.records);
    }

    // Every voted value was cast by some sample; the vote invents nothing.
    #[test]
    fn voted_values_come_from_samples(
        statuses in proptest::collection::vec(
            proptest::sample::select(vec!["closed", "restricted", "open"]),
            1..=5,
        ),
        causes in proptest::collection::vec(
            proptest::option::of(proptest::sample::select(vec!["WIP", "SNOW"])),
            1..=5,
        ),
    ) {
        let schema = builtin_schema("runway_taxiway").unwrap();
        let samples: Vec<VoteSample> = statuses
            .iter()
            .zip(causes.iter().cycle())
            .map(|(status, cause)| taxiway_sample(status, *cause, 0.0))
            .collect();
        let voted = self_consistency_vote(&samples, schema).unwrap();
        prop_assert_eq!(voted.records.len(), 1);
        for (name, value) in &voted.records[0] {
            let cast = samples.iter().any(|s| {
                s.result.records[0].get(name).unwrap_or(&Value::Null) == value
            });
            prop_assert!(cast, "field {} voted {} but nobody cast it", name, value);
        }
    }

    // Applying the same round twice gives byte-identical outcomes, and a
    // blanket veto leaves the field list untouched.
    #[test]
    fn field_manager_is_deterministic_and_vetoable(
        proposals in proptest::collection::vec(proposal_strategy(), 0..=4),
        names in proptest::sample::subsequence(VOCAB.to_vec(), 1..=5),
    ) {
        let fields: Vec<EmergentField> = names.iter().map(|n| plain_field(n)).collect();
        let a = field_manager_apply(&proposals, &[], &fields);
        let b = field_manager_apply(&proposals, &[], &fields);
        prop_assert_eq!(&a.fields, &b.fields);
        prop_assert_eq!(&a.accepted, &b.accepted);

        let veto: Vec<Critique> = (0..proposals.len())
            .map(|i| Critique {
                action: CritiqueAction::Challenge,
                target_proposal: i,
                reason: "no".into(),
                confidence: 1.0,
            })
            .collect();
        let vetoed = field_manager_apply(&proposals, &veto, &fields);
        prop_assert_eq!(&vetoed.fields, &fields);
        prop_assert!(vetoed.accepted.is_empty());
    }

    // F1 is a symmetric mean bounded by its arguments, and a report's F1 is
    // always recomputable from its own precision and recall.
    #[test]
    fn f1_is_a_symmetric_bounded_mean(p in 0.0..=1.0f64, r in 0.0..=1.0f64) {
        let f1 = f1_score(p, r);
        prop_assert!((f1 - f1_score(r, p)).abs() < 1e-12);
        prop_assert!(f1 >= p.min(r) - 1e-12);
        prop_assert!(f1 <= p.max(r) + 1e-12);
    }

    #[test]
    fn report_f1_matches_its_own_counts(tp in 0..50u64, fp in 0..50u64, fn_ in 0..50u64) {
        let report = EvalReport::from_counts(
            Counts { tp, fp, fn_ },
            BTreeMap::new(),
            BTreeMap::new(),
            None,
        );
        prop_assert!((report.f1 - f1_score(report.precision, report.recall)).abs() < 1e-12);
    }

    // More lighting distance never grades to a lower tier.
    #[test]
    fn als_grade_is_monotone_in_distance(d1 in 0.0..2000.0f64, d2 in 0.0..2000.0f64) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        prop_assert!(grade_als(Some(lo), None).unwrap() <= grade_als(Some(hi), None).unwrap());
    }

    // Corpus means compose: the mean over a concatenation is the count
    // weighted mean of the parts.
    #[test]
    fn stats_means_compose_under_concatenation(
        a in proptest::collection::vec(1..=12usize, 1..=6),
        b in proptest::collection::vec(1..=12usize, 1..=6),
    ) {
        let build = |counts: &[usize], prefix: &str| -> Vec<NotamRecord> {
            counts
                .iter()
                .enumerate()
                .map(|(i, &words)| {
                    let text = vec!["WRD"; words].join(" ");
                    parse_notam(&format!("{prefix}{i}"), &text).unwrap()
                })
                .collect()
        };
        let ra = build(&a, "a");
        let rb = build(&b, "b");
        let sa = compute_stats(&ra).unwrap();
        let sb = compute_stats(&rb).unwrap();
        let mut all = ra.clone();
        all.extend(rb.clone());
        let sall = compute_stats(&all).unwrap();
        let (na, nb) = (ra.len() as f64, rb.len() as f64);
        let expected = (na * sa.mean_word_count + nb * sb.mean_word_count) / (na + nb);
        prop_assert!((sall.mean_word_count - expected).abs() < 1e-9);
    }

    // The split is a true partition: sizes follow the 80/10/10 rule and the
    // id multiset is preserved.
    #[test]
    fn split_is_a_partition(n in 1..=40usize, seed in 0..1000u64) {
        let records: Vec<NotamRecord> = (0..n)
            .map(|i| parse_notam(&format!("n{i}"), "A) ZBAA E) RWY CLSD").unwrap())
            .collect();
        let (train, dev, test) = split_corpus(&records, seed);
        prop_assert_eq!(train.len(), n * 8 / 10);
        prop_assert_eq!(dev.len(), n / 10);
        prop_assert_eq!(train.len() + dev.len() + test.len(), n);
        let mut ids: Vec<String> = train
            .iter()
            .chain(&dev)
            .chain(&test)
            .map(|r| r.id.clone())
            .collect();
        ids.sort();
        let mut expected: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
        expected.sort();
        prop_assert_eq!(ids, expected);
    }

    // A JSON object embedded in prose is recovered exactly.
    #[test]
    fn first_json_value_recovers_embedded_object(
        entries in proptest::collection::btree_map("[a-z]{1,6}", -1000..1000i64, 0..=5),
    ) {
        let object: Value = json!(entries);
        let text = format!("model says: {object} and then some trailing prose");
        prop_assert_eq!(first_json_value(&text).unwrap(), object);
    }

    // Tokenization never emits empty tokens, stopwords, or uppercase.
    #[test]
    fn tokenize_output_is_clean(text in "[A-Za-z_ \\-]{0,60}") {
        for token in tokenize(&text) {
            prop_assert!(!token.is_empty());
            prop_assert!(!["the", "a", "of", "to", "for", "and"].contains(&token.as_str()));
            prop_assert_eq!(token.to_lowercase(), token.clone());
        }
    }
}
