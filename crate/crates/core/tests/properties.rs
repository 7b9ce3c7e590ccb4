mod common;

use std::sync::Arc;

use evidence_core::backends::{Backends, Role, Script, ScriptTurn, ScriptedBackend};
use evidence_core::eval::{balanced_accuracy, invasion_prf, parse_grid, run_ablation, AblationAxis, Protocol};
use evidence_core::highlight::{ground_regions, similarity_matrix, Prototype, Toolkit, ToolkitMode};
use evidence_core::parser::{parse_response, render_response, split_items, ParsedResponse};
use evidence_core::protocol::{start_session, CaseInput, Stage};
use evidence_core::reward::{
    diagnostic_reward, total_reward, ExamQuality, JudgeVerdict, RewardConfig, ToolRuleSet,
};
use evidence_core::store::{Level, PatchRecord};
use proptest::prelude::*;
use proptest::sample::select;

// ---------------------------------------------------------------- parser

fn item() -> impl Strategy<Value = String> {
    prop::collection::vec("[A-Za-z0-9][A-Za-z0-9-]{0,8}", 1..4).prop_flat_map(|words| {
        let joined = words.join(" ");
        prop_oneof![Just(joined.clone()), Just(format!("{joined} (x, y)"))]
    })
}

fn items(min: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(item(), min..5)
}

prop_compose! {
    fn reply()(
        think in "[a-z ]{1,30}",
        diff in prop::option::of(items(1)),
        exam in prop::option::of(items(0)),
        tool in prop::option::of(items(0)),
        boxed in prop::option::of(item()),
    ) -> ParsedResponse {
        let diff = if diff.is_none() && boxed.is_none() { Some(vec!["Tumor".to_string()]) } else { diff };
        ParsedResponse {
            think: Some(think.trim().to_string()),
            diff_list: diff,
            exam_list: exam,
            tool_list: tool,
            boxed,
            ..ParsedResponse::default()
        }
    }
}

fn token_soup() -> impl Strategy<Value = String> {
    let tokens = select(vec![
        "<think>", "</think>", "<answer>", "</answer>", "\\DiffList", "\\ExamList", "\\ToolCallList", "\\boxed",
        "{", "}", "(", ")", ",", "，", " ", "\n", "ccRCC", "漢",
    ]);
    prop::collection::vec(prop_oneof![tokens.prop_map(str::to_string), any::<char>().prop_map(String::from)], 0..60)
        .prop_map(|v| v.concat())
}

proptest! {
    #[test]
    fn parser_is_total_and_counts_errors(raw in prop_oneof![token_soup(), any::<String>()]) {
        let p = parse_response(&raw);
        prop_assert!(p.format_errors <= 2);
        prop_assert_eq!(p.format_errors, u8::from(p.tag_error) + u8::from(p.presentation_error));
        prop_assert_eq!(p.format_errors == 0, p.is_well_formed());
        for list in [&p.diff_list, &p.exam_list, &p.tool_list].into_iter().flatten() {
            prop_assert!(list.iter().all(|s| !s.is_empty() && s.trim() == s));
        }
    }

    #[test]
    fn render_then_parse_round_trips(want in reply()) {
        let text = render_response(&want);
        let got = parse_response(&text);
        prop_assert_eq!(got.format_errors, 0);
        prop_assert_eq!(&got.think, &want.think);
        prop_assert_eq!(&got.diff_list, &want.diff_list);
        prop_assert_eq!(&got.exam_list, &want.exam_list);
        prop_assert_eq!(&got.tool_list, &want.tool_list);
        prop_assert_eq!(&got.boxed, &want.boxed);
    }

    #[test]
    fn split_items_keeps_bracketed_commas(list in items(1)) {
        prop_assert_eq!(split_items(&list.join(", ")), list.clone());
        prop_assert_eq!(split_items(&list.join("，")), list);
    }
}

// ---------------------------------------------------------------- reward

fn quality() -> impl Strategy<Value = ExamQuality> {
    select(vec![ExamQuality::Differentiates, ExamQuality::Neutral, ExamQuality::Problematic])
}

proptest! {
    #[test]
    fn rank_weights_are_a_distribution(len in 1usize..=64, alpha in 0.25f64..20.0) {
        let w: Vec<f64> = (1..=len).map(|i| diagnostic_reward(len, Some(i), alpha).unwrap()).collect();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.windows(2).all(|p| p[0] > p[1]));
        prop_assert!(w.iter().all(|&x| x > 0.0 && x <= 1.0));
        prop_assert_eq!(diagnostic_reward(len, None, alpha).unwrap(), 0.0);
    }

    #[test]
    fn bad_rank_arguments_are_rejected(len in 0usize..8, pos in 0usize..12, alpha in -2.0f64..0.0) {
        prop_assert!(diagnostic_reward(len.max(1), Some(1), alpha).is_err());
        if pos == 0 || pos > len {
            prop_assert!(diagnostic_reward(len, Some(pos), 1.0).is_err());
        }
    }

    #[test]
    fn format_errors_override_everything(
        tag in any::<bool>(),
        diff in prop::option::of(items(0)),
        exam in prop::option::of(items(0)),
        tool in prop::option::of(items(0)),
        q in quality(),
        hacking in any::<bool>(),
    ) {
        let presentation = !tag || diff.as_ref().is_none_or(Vec::is_empty);
        let p = ParsedResponse {
            tag_error: tag,
            presentation_error: presentation,
            format_errors: u8::from(tag) + u8::from(presentation),
            diff_list: diff,
            exam_list: exam,
            tool_list: tool,
            ..ParsedResponse::default()
        };
        let cfg = RewardConfig::default();
        let v = JudgeVerdict { match_position: None, exam_quality: q, hacking };
        let r = total_reward(&p, &v, &cfg, &ToolRuleSet::default_rules()).unwrap();
        prop_assert_eq!(r.total, -cfg.format_penalty * f64::from(p.format_errors));
    }

    #[test]
    fn well_formed_total_is_bounded(
        want in reply(),
        q in quality(),
        hacking in any::<bool>(),
        pick in any::<prop::sample::Index>(),
        matched in any::<bool>(),
    ) {
        let p = parse_response(&render_response(&want));
        let n = p.diagnoses().len();
        let v = JudgeVerdict {
            match_position: matched.then(|| pick.index(n) + 1),
            exam_quality: q,
            hacking,
        };
        let cfg = RewardConfig::default();
        let r = total_reward(&p, &v, &cfg, &ToolRuleSet::default_rules()).unwrap();
        prop_assert_eq!(r.n_f, 0);
        prop_assert!((0.0..=1.0).contains(&r.r_d));
        let hi = 1.0 + cfg.consistency_bonus + cfg.tool_bonus;
        let lo = -cfg.hacking_penalty - cfg.consistency_bonus - cfg.tool_bonus;
        prop_assert!(r.total <= hi + 1e-12 && r.total >= lo - 1e-12, "{:?}", r);
        let penalty = if r.hacking { cfg.hacking_penalty } else { 0.0 };
        prop_assert!((r.total - (r.r_d + r.r_e + r.r_t - penalty)).abs() < 1e-12);
    }
}

// --------------------------------------------------------------- metrics

prop_compose! {
    fn labelled(max_k: usize)(k in 2..=max_k)(
        pairs in prop::collection::vec((0..k, 0..=k), 1..150),
        k in Just(k),
    ) -> (usize, Vec<usize>, Vec<usize>) {
        let (truths, preds) = pairs.into_iter().unzip();
        (k, preds, truths)
    }
}

proptest! {
    #[test]
    fn balanced_accuracy_matches_confusion_matrix((k, preds, truths) in labelled(6)) {
        let classes: Vec<usize> = (0..k).collect();
        let got = balanced_accuracy(&preds, &truths, &classes).unwrap();
        let mut total = vec![0usize; k];
        let mut hit = vec![0usize; k];
        for (&p, &t) in preds.iter().zip(&truths) {
            total[t] += 1;
            hit[t] += usize::from(p == t);
        }
        let recalls: Vec<f64> = (0..k).filter(|&c| total[c] > 0).map(|c| hit[c] as f64 / total[c] as f64).collect();
        prop_assert_eq!(got.balanced_accuracy, recalls.iter().sum::<f64>() / recalls.len() as f64);
        prop_assert_eq!(got.accuracy, hit.iter().sum::<usize>() as f64 / truths.len() as f64);
        prop_assert!((0.0..=1.0).contains(&got.balanced_accuracy));
    }

    #[test]
    fn metrics_ignore_case_order((k, preds, truths) in labelled(5), rot in any::<prop::sample::Index>()) {
        let classes: Vec<usize> = (0..k).collect();
        let r = rot.index(preds.len());
        let mut p2 = preds.clone();
        let mut t2 = truths.clone();
        p2.rotate_left(r);
        t2.rotate_left(r);
        p2.reverse();
        t2.reverse();
        let a = balanced_accuracy(&preds, &truths, &classes).unwrap();
        let b = balanced_accuracy(&p2, &t2, &classes).unwrap();
        prop_assert!((a.balanced_accuracy - b.balanced_accuracy).abs() < 1e-12);
        prop_assert_eq!(a.accuracy, b.accuracy);
        let bp: Vec<bool> = preds.iter().map(|&x| x % 2 == 0).collect();
        let bt: Vec<bool> = truths.iter().map(|&x| x % 2 == 0).collect();
        let bp2: Vec<bool> = p2.iter().map(|&x| x % 2 == 0).collect();
        let bt2: Vec<bool> = t2.iter().map(|&x| x % 2 == 0).collect();
        prop_assert_eq!(invasion_prf(&bp, &bt).unwrap(), invasion_prf(&bp2, &bt2).unwrap());
    }
}

// ----------------------------------------------------------- highlighter

fn toolkit(vectors: Vec<Vec<f32>>, highlight: usize) -> Toolkit {
    let prototypes = vectors
        .into_iter()
        .enumerate()
        .map(|(t, vector)| Prototype {
            description: format!("d{t}"),
            level: Level::X10,
            vector,
            support_ids: vec![format!("p{t}")],
            category: "c".into(),
            cluster: None,
        })
        .collect();
    Toolkit::new("prop", prototypes, vec![format!("d{highlight}")], ToolkitMode::Grounding).unwrap()
}

prop_compose! {
    fn instance()(d in 1usize..12, t in 1usize..6, n in 1usize..40)(
        protos in prop::collection::vec(prop::collection::vec(-4.0f32..4.0, d), t),
        patches in prop::collection::vec(prop::collection::vec(-4.0f32..4.0, d), n),
        h in 0..t,
    ) -> (Vec<Vec<f32>>, Vec<Vec<f32>>, usize) {
        (protos, patches, h)
    }
}

fn records(vectors: &[Vec<f32>], scale: f32) -> Vec<PatchRecord> {
    vectors
        .iter()
        .enumerate()
        .map(|(i, v)| PatchRecord {
            slide_id: "s".into(),
            x: i as i32,
            y: 0,
            level: Level::X10,
            embedding: v.iter().map(|x| x * scale).collect(),
        })
        .collect()
}

fn nonzero(v: &[f32]) -> bool {
    v.iter().any(|x| x.abs() > 1e-3)
}

proptest! {
    #[test]
    fn grounding_is_scale_invariant((protos, patches, h) in instance(), e in -4i32..6, c in 0.01f32..50.0) {
        prop_assume!(protos.iter().chain(&patches).all(|v| nonzero(v)));
        let tk = toolkit(protos, h);
        let s = similarity_matrix(&records(&patches, 1.0), &tk).unwrap();
        let exact = similarity_matrix(&records(&patches, 2f32.powi(e)), &tk).unwrap();
        prop_assert_eq!(&exact, &s);
        let g = ground_regions(&s, &tk).unwrap();
        prop_assert_eq!(ground_regions(&exact, &tk).unwrap(), g.clone());
        // arbitrary positive scales move cosines by rounding only
        let loose = similarity_matrix(&records(&patches, c), &tk).unwrap();
        for (a, b) in loose.values().iter().zip(s.values()) {
            prop_assert!((a - b).abs() < 1e-5);
        }
        for (i, &a) in g.assignment.iter().enumerate() {
            let row = s.row(i);
            prop_assert!(row.iter().all(|&v| v <= row[a]));
            prop_assert!(row[..a].iter().all(|&v| v < row[a]));
            prop_assert_eq!(g.highlighted.contains(&i), a == h);
        }
    }
}

// -------------------------------------------------------------- protocol

fn adversarial_turn() -> impl Strategy<Value = ScriptTurn> {
    let reasoner = prop_oneof![
        Just("<think>x</think><answer>\\boxed{Thymic carcinoma}</answer>".to_string()),
        Just("<think>x</think><answer>\\DiffList{Lymphoma, Thymoma}\\ExamList{CD117, PAX8}</answer>".to_string()),
        Just("<think>x</think><answer>\\DiffList{Clear cell renal cell carcinoma}\\ToolCallList{tool-ccRCC, tool-X}</answer>".to_string()),
        token_soup(),
    ];
    let other = prop_oneof![Just("Yes".to_string()), Just("No".to_string()), token_soup()];
    prop_oneof![
        3 => reasoner.prop_map(|r| ScriptTurn::new(Role::Reasoner, r)),
        4 => other.clone().prop_map(|r| ScriptTurn::new(Role::Interpreter, r)),
        1 => other.prop_map(|r| ScriptTurn::new(Role::ExamOracle, r)),
        1 => Just(ScriptTurn { status: Some(503), ..ScriptTurn::new(Role::Reasoner, "") }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sessions_terminate_grow_and_replay(
        turns in prop::collection::vec(adversarial_turn(), 0..30),
        max_rounds in 1usize..4,
        seed in 0u64..100,
    ) {
        let script = Script::from_turns(turns);
        let slide = common::worked_fixtures()[0].slide_id.clone();
        let case = CaseInput { case_id: "p".into(), case_info: "Mass.".into(), slide_id: slide };
        let run = || {
            let mut ctx = common::worked_context(Backends::shared(Arc::new(ScriptedBackend::new(script.clone()))));
            ctx.config.max_rounds = max_rounds;
            let mut s = start_session(&ctx, case.clone(), seed);
            let mut steps = 0;
            let mut seen = Vec::new();
            while !s.is_finished() && steps <= max_rounds + 1 {
                s.advance(&ctx, None).unwrap();
                steps += 1;
                assert!(s.evidence.starts_with(&seen), "evidence shrank");
                seen = s.evidence.clone();
            }
            (s, steps)
        };
        let (a, steps) = run();
        prop_assert!(a.is_finished());
        prop_assert!(steps <= max_rounds + 1);
        prop_assert!(a.turns.len() <= 2 * (max_rounds + 1));
        prop_assert!(matches!(a.stage, Stage::Done | Stage::Aborted));
        let (b, _) = run();
        prop_assert_eq!(a.log_text(), b.log_text());
    }
}

// -------------------------------------------------------------- ablation

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn ablation_is_deterministic(seed in 0u64..1000) {
        let (env, fixtures) = common::synthetic_env(4, seed);
        let grid = parse_grid(AblationAxis::EvidenceSources, Some("FF,TT")).unwrap();
        let a = run_ablation(&env, &fixtures, AblationAxis::EvidenceSources, &grid, Protocol::Es).unwrap();
        let b = run_ablation(&env, &fixtures, AblationAxis::EvidenceSources, &grid, Protocol::Es).unwrap();
        prop_assert_eq!(a.rows.len(), 2);
        prop_assert_eq!(a, b);
    }
}
