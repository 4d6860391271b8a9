use proptest::prelude::*;

use toolrl_core::eval::{weighted_mean, MetricReport, SplitScore};
use toolrl_core::grammar::{find_delimiter, parse_turn, render_turn, Segment, SegmentKind};
use toolrl_core::grpo::{group_advantages, kl_penalty};
use toolrl_core::imagekit::{self, ImageBuffer};
use toolrl_core::reward::{f1_score, normalize_text};

fn kind() -> impl Strategy<Value = SegmentKind> {
    prop::sample::select(SegmentKind::ALL.to_vec())
}

fn body() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 <>/_\n\t.,é]{0,24}".prop_filter("no delimiters", |s| find_delimiter(s).is_none())
}

fn segments() -> impl Strategy<Value = Vec<Segment>> {
    prop::collection::vec((kind(), body()).prop_map(|(k, b)| Segment::new(k, b)), 0..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn parse_inverts_render(segs in segments()) {
        let text = render_turn(&segs).unwrap();
        let parsed = parse_turn(&text);
        prop_assert_eq!(parsed.segments, segs);
        prop_assert!(!parsed.unclosed && !parsed.stray_text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn parse_is_total(text in ".{0,200}") {
        let p = parse_turn(&text);
        prop_assert!(!p.valid || (!p.unclosed && !p.stray_text));
    }

    #[test]
    fn parse_is_total_on_tag_soup(parts in prop::collection::vec(prop::sample::select(vec![
        "<think>", "</think>", "<search>", "</search>", "<code>", "</code>", "<answer>", "</answer>",
        "<information>", "</information>", "<", ">", "x", " ", "\n", "</", "<Think>",
    ]), 0..30)) {
        let p = parse_turn(&parts.concat());
        prop_assert!(!p.valid || (!p.unclosed && !p.stray_text));
    }

    #[test]
    fn dropping_a_close_tag_invalidates(think in body(), act in prop::sample::select(vec![SegmentKind::Search, SegmentKind::Code, SegmentKind::Answer]), b in "[a-z]{1,10}", which in 0usize..2) {
        let segs = vec![Segment::new(SegmentKind::Think, think), Segment::new(act, b)];
        let text = render_turn(&segs).unwrap();
        prop_assert!(parse_turn(&text).valid);
        let close = segs[which].kind.close();
        let at = text.find(&close).unwrap();
        let broken = format!("{}{}", &text[..at], &text[at + close.len()..]);
        prop_assert!(!parse_turn(&broken).valid);
    }

    #[test]
    fn render_rejects_embedded_delimiters(k in kind(), pre in "[a-z]{0,5}", d in kind(), close in any::<bool>()) {
        let tag = if close { d.close() } else { d.open() };
        let rendered = render_turn(&[Segment::new(k, format!("{pre}{tag}"))]);
        prop_assert!(rendered.is_err());
    }

    #[test]
    fn f1_bounds_and_self_match(a in "[a-z ,.]{0,30}", b in "[a-z ,.]{0,30}") {
        let f = f1_score(&a, &[b.as_str()]);
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(f1_score(&a, &[a.as_str()]), 1.0);
        prop_assert_eq!(f, f1_score(&b, &[a.as_str()]));
        prop_assert_eq!(normalize_text(&a), normalize_text(&normalize_text(&a).join(" ")));
    }

    #[test]
    fn advantages_are_centered_and_scaled(r in prop::collection::vec(-10.0f64..10.0, 2..16)) {
        let a = group_advantages(&r, 1e-6).unwrap();
        prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        let std = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / r.len() as f64).sqrt();
        if std > 1e-2 {
            let sa = (a.iter().map(|x| x * x).sum::<f64>() / a.len() as f64).sqrt();
            prop_assert!((sa - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn kl_nonnegative_zero_only_on_equality(t in -20.0f64..0.0, r in -20.0f64..0.0) {
        let k = kl_penalty(t, r);
        prop_assert!(k >= 0.0);
        prop_assert_eq!(kl_penalty(t, t), 0.0);
        if (t - r).abs() > 1e-6 {
            prop_assert!(k > 0.0);
        }
    }

    #[test]
    fn weighted_mean_identity(f1s in 0.0f64..100.0, f1h in 0.0f64..100.0, ns in 0usize..300, nh in 0usize..300) {
        let r = MetricReport::from_splits(
            SplitScore { count: ns, f1: f1s, em: f1s / 2.0 },
            SplitScore { count: nh, f1: f1h, em: f1h / 2.0 },
        );
        prop_assert_eq!(r.avg.f1, weighted_mean(&[(f1s, ns), (f1h, nh)]));
        prop_assert_eq!(r.avg.count, ns + nh);
    }

    #[test]
    fn rotations_compose(w in 1u32..9, h in 1u32..9, seed in any::<u8>(), q in -8i32..8) {
        let img = ImageBuffer::from_fn(w, h, |x, y| [seed.wrapping_add(x as u8), (y * 17) as u8, (x * y) as u8]).unwrap();
        prop_assert_eq!(imagekit::rotate(&imagekit::rotate(&img, q), -q), img.clone());
        prop_assert_eq!(imagekit::rotate(&img, 4 * q), img);
    }
}
