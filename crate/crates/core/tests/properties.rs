//! Randomized invariants: tokenizer inversion, kernel normalization, the
//! position-remapping law, compression-rate bounds, metric symmetries, and
//! the action grammar.

use icae_core::agentic::{
    assemble_context, effective_compression_rate, select_compression_steps, CompressionPolicy,
    Role, Segment, SpanCache, Trajectory,
};
use icae_core::data::Tokenizer;
use icae_core::env::{parse_action, render_action, EditorCmd, ToolCall};
use icae_core::kernels;
use icae_core::metrics::{bleu, welch_t};
use proptest::prelude::*;

// ---- strategies ----

fn obs_text() -> impl Strategy<Value = String> {
    proptest::collection::vec(proptest::char::range('a', 'z'), 1..60)
        .prop_map(|cs| cs.into_iter().collect())
}

fn trajectory() -> impl Strategy<Value = Trajectory> {
    proptest::collection::vec((obs_text(), 1usize..20), 1..8).prop_map(|rounds| {
        let tok = Tokenizer::byte_level();
        let mut t = Trajectory::new("prop", 0);
        t.push(Role::System, "do the task".into(), &tok);
        for (obs, alen) in rounds {
            t.push(Role::Action, format!("$ probe {}", "x".repeat(alen)), &tok);
            t.push(Role::Observation, obs, &tok);
        }
        t.push(Role::Action, "$ submit".into(), &tok);
        t
    })
}

fn policy() -> impl Strategy<Value = CompressionPolicy> {
    prop_oneof![
        Just(CompressionPolicy::None),
        (1usize..80).prop_map(|tau| CompressionPolicy::LengthThreshold { tau }),
        (1usize..6).prop_map(|k| CompressionPolicy::LastK { k }),
        (0u32..=100, 0u64..50)
            .prop_map(|(pct, seed)| CompressionPolicy::RandomPct { pct, seed }),
    ]
}

proptest! {
    #[test]
    fn tokenizer_inverts_any_bytes(data in proptest::collection::vec(any::<u8>(), 0..300)) {
        let tok = Tokenizer::byte_level();
        let ids = tok.encode_bytes(&data);
        prop_assert_eq!(tok.decode_bytes(&ids).unwrap(), data);
    }

    #[test]
    fn tokenizer_inverts_any_text(text in ".{0,120}") {
        let tok = Tokenizer::byte_level();
        let ids = tok.encode(&text);
        prop_assert_eq!(tok.token_len(&text), text.len());
        prop_assert_eq!(tok.decode(&ids).unwrap(), text);
    }

    #[test]
    fn softmax_rows_are_distributions(row in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
        let mut out = row.clone();
        kernels::softmax_row(&mut out);
        let sum: f64 = out.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12, "sum {sum}");
        prop_assert!(out.iter().all(|&p| p >= 0.0));
        // order preserved
        let arg_in = row.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
        let arg_out = out.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
        prop_assert_eq!(arg_in, arg_out);
    }

    #[test]
    fn compression_rate_stays_within_rho(traj in trajectory(), pol in policy(), rho in 1usize..6) {
        let rate = effective_compression_rate(&traj, &pol, rho).unwrap();
        prop_assert!(rate >= 1.0 - 1e-12, "rate {rate}");
        prop_assert!(rate <= rho as f64 + 1e-12, "rate {rate} over rho {rho}");
        if matches!(pol, CompressionPolicy::None) {
            prop_assert!((rate - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn assembled_positions_are_dense_and_swap_shifts_by_n_minus_m(
        traj in trajectory(),
        pol in policy(),
        rho in 1usize..6,
    ) {
        let tok = Tokenizer::byte_level();
        let k = traj.steps.len() - 1; // final action
        let chosen = select_compression_steps(&traj, &pol, k);
        let cache = SpanCache::new();
        let ctx = assemble_context(&tok, &traj, &chosen, &cache, k, rho, usize::MAX / 4).unwrap();

        // dense consecutive ids: max + 1 == slot count
        let total = ctx.total_slots();
        prop_assert_eq!(ctx.position_ids.len(), total);
        for (i, &p) in ctx.position_ids.iter().enumerate() {
            prop_assert_eq!(p, i);
        }

        // replacing any one span with its source shifts everything after it
        if let Some(&j) = chosen.iter().next() {
            let mut without: std::collections::BTreeSet<usize> = chosen.clone();
            without.remove(&j);
            let swapped =
                assemble_context(&tok, &traj, &without, &cache, k, rho, usize::MAX / 4).unwrap();
            let (n, m) = match ctx.segments.iter().find_map(|s| match s {
                Segment::Span { step, m, n } if *step == j => Some((*n, *m)),
                _ => None,
            }) {
                Some(pair) => pair,
                None => return Err(TestCaseError::fail("span segment missing")),
            };
            prop_assert_eq!(swapped.total_slots(), total + n - m);

            // starts of segments after j: shifted by exactly n - m
            let starts = |c: &icae_core::agentic::AssembledContext| {
                let mut at = 0usize;
                let mut v = Vec::new();
                for s in &c.segments {
                    v.push((segment_step(s), at));
                    at += s.slots();
                }
                v
            };
            let a = starts(&ctx);
            let b = starts(&swapped);
            prop_assert_eq!(a.len(), b.len());
            for ((step_a, at_a), (step_b, at_b)) in a.iter().zip(&b) {
                prop_assert_eq!(step_a, step_b);
                if *step_a < j {
                    prop_assert_eq!(at_a, at_b);
                } else if *step_a > j {
                    prop_assert_eq!(*at_b, *at_a + n - m, "segment at step {}", step_a);
                }
            }
        }
    }

    #[test]
    fn bleu_is_one_on_identity(tokens in proptest::collection::vec("[a-f]{1,4}", 1..30)) {
        prop_assert!((bleu(&tokens, &tokens) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_stays_in_unit_interval(
        cand in proptest::collection::vec("[a-d]{1,2}", 1..25),
        reference in proptest::collection::vec("[a-d]{1,2}", 1..25),
    ) {
        let s = bleu(&cand, &reference);
        prop_assert!((0.0..=1.0).contains(&s), "score {s}");
    }

    #[test]
    fn welch_is_antisymmetric(
        a in proptest::collection::vec(-100.0f64..100.0, 2..12),
        b in proptest::collection::vec(-100.0f64..100.0, 2..12),
    ) {
        let fwd = welch_t(&a, &b);
        let rev = welch_t(&b, &a);
        match (fwd, rev) {
            (Ok((t1, df1, p1)), Ok((t2, df2, p2))) => {
                prop_assert_eq!(t1, -t2);
                prop_assert_eq!(df1, df2);
                prop_assert_eq!(p1, p2);
            }
            (Err(_), Err(_)) => {}
            _ => return Err(TestCaseError::fail("asymmetric degeneracy")),
        }
    }

    #[test]
    fn action_grammar_round_trips(call in toolcall()) {
        let line = render_action(&call);
        match parse_action(&line) {
            Ok(back) => prop_assert_eq!(back, call),
            Err(e) => return Err(TestCaseError::fail(format!("{line:?}: {e}"))),
        }
    }
}

fn segment_step(s: &Segment) -> usize {
    match s {
        Segment::Discrete { step, .. } => *step,
        Segment::Span { step, .. } => *step,
    }
}

fn arg_string() -> impl Strategy<Value = String> {
    // any printable plus the escape-relevant characters
    proptest::collection::vec(
        prop_oneof![
            proptest::char::range(' ', '~'),
            Just('"'),
            Just('\\'),
            Just('\n'),
            Just('\t'),
            proptest::char::range('\u{a1}', '\u{2ff}'),
        ],
        0..24,
    )
    .prop_map(|cs| cs.into_iter().collect())
}

fn toolcall() -> impl Strategy<Value = ToolCall> {
    prop_oneof![
        arg_string().prop_map(|cmd| ToolCall::Bash { cmd }),
        arg_string().prop_map(|payload| ToolCall::Submit { payload }),
        (arg_string(), arg_string(), arg_string()).prop_map(|(path, old, new)| ToolCall::Editor {
            command: EditorCmd::StrReplace,
            path,
            old,
            new,
            line: 0,
            text: String::new(),
        }),
        (arg_string(), arg_string()).prop_map(|(path, text)| ToolCall::Editor {
            command: EditorCmd::Create,
            path,
            old: String::new(),
            new: String::new(),
            line: 0,
            text,
        }),
        (arg_string(), 0usize..500, arg_string()).prop_map(|(path, line, text)| ToolCall::Editor {
            command: EditorCmd::Insert,
            path,
            old: String::new(),
            new: String::new(),
            line,
            text,
        }),
        arg_string().prop_map(|path| ToolCall::Editor {
            command: EditorCmd::View,
            path,
            old: String::new(),
            new: String::new(),
            line: 0,
            text: String::new(),
        }),
    ]
}
