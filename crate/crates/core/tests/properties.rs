use std::collections::BTreeSet;

use memeaudit_core::audit::classify_case;
use memeaudit_core::corpus::{LabelSchema, Polarity};
use memeaudit_core::metrics::{accuracy_macro_f1, krippendorff_alpha, weighted_mf1};
use memeaudit_core::parse::{parse_label, Ambiguity};
use memeaudit_core::raster::RasterImage;
use memeaudit_core::slic::{slic_segment, SlicParams};
use memeaudit_core::typology::{bisect, l2_normalize, within_ss};
use proptest::prelude::*;

fn polarity() -> impl Strategy<Value = Polarity> {
    prop_oneof![Just(Polarity::Positive), Just(Polarity::Negative)]
}

fn flip(p: Polarity) -> Polarity {
    p.flip()
}

fn schema_strategy() -> impl Strategy<Value = LabelSchema> {
    ("[a-z]{3,10}", any::<bool>(), "[a-z]{3,10}").prop_filter_map("distinct", |(pos, negated, other)| {
        let neg = if negated { format!("not-{pos}") } else { other };
        LabelSchema::new("synthetic", pos, neg, "p def", "n def").ok()
    })
}

proptest! {
    #[test]
    fn names_parse_to_their_polarity(schema in schema_strategy(), pad_l in "[ \t\n]{0,3}", pad_r in "[ \t\n]{0,3}", upper in any::<bool>()) {
        for p in [Polarity::Positive, Polarity::Negative] {
            let name = schema.name(p);
            let name = if upper { name.to_uppercase() } else { name.to_string() };
            let parsed = parse_label(&format!("{pad_l}{name}{pad_r}"), &schema);
            prop_assert_eq!(parsed.label, Some(p));
            prop_assert_eq!(parsed.ambiguity, Ambiguity::None);
        }
    }

    #[test]
    fn parse_is_case_and_whitespace_invariant(schema in schema_strategy(), text in "[a-zA-Z \\-\n.]{0,40}") {
        let base = parse_label(&text, &schema);
        let lower = parse_label(&text.to_lowercase(), &schema);
        let padded = parse_label(&format!("  \n{text}\t "), &schema);
        prop_assert_eq!(base.label, lower.label);
        prop_assert_eq!(base.ambiguity, lower.ambiguity);
        prop_assert_eq!(base.label, padded.label);
        prop_assert_eq!(base.ambiguity, padded.ambiguity);
    }

    #[test]
    fn metrics_invariant_under_relabeling(pairs in prop::collection::vec((polarity(), polarity()), 1..50)) {
        let gold: Vec<Polarity> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<Polarity> = pairs.iter().map(|p| p.1).collect();
        let (a, f) = accuracy_macro_f1(&gold, &pred).unwrap();
        let gold_f: Vec<Polarity> = gold.iter().copied().map(flip).collect();
        let pred_f: Vec<Polarity> = pred.iter().copied().map(flip).collect();
        let (a2, f2) = accuracy_macro_f1(&gold_f, &pred_f).unwrap();
        prop_assert!((a - a2).abs() < 1e-9 && (f - f2).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&a) && (0.0..=100.0).contains(&f));
    }

    #[test]
    fn weighted_mf1_is_bounded_and_scale_free(rows in prop::collection::vec((0.0f64..100.0, 1usize..2000), 1..8), scale in 1usize..20) {
        let w = weighted_mf1(&rows).unwrap();
        let lo = rows.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(w >= lo - 1e-9 && w <= hi + 1e-9);
        let scaled: Vec<(f64, usize)> = rows.iter().map(|&(f, n)| (f, n * scale)).collect();
        prop_assert!((weighted_mf1(&scaled).unwrap() - w).abs() < 1e-9);
    }

    #[test]
    fn alpha_invariant_under_label_renaming(table in prop::collection::vec(prop::collection::vec(prop::option::of(0u8..3), 3), 2..10)) {
        prop_assume!(table.iter().any(|row| row.iter().flatten().count() >= 2));
        let renamed: Vec<Vec<Option<u8>>> = table.iter().map(|r| r.iter().map(|c| c.map(|v| (v + 1) % 3 + 10)).collect()).collect();
        let a = krippendorff_alpha(&table).unwrap().alpha;
        let b = krippendorff_alpha(&renamed).unwrap().alpha;
        prop_assert!((a - b).abs() < 1e-9 || (a.is_nan() && b.is_nan()));
        prop_assert!(a <= 1.0 + 1e-12);
    }

    #[test]
    fn case_flips_iff_flipping_segments(gold in polarity(), occ in prop::collection::vec(prop::option::of(polarity()), 1..6)) {
        let (case, flips) = classify_case(gold, Some(gold.flip()), &occ).unwrap();
        prop_assert_eq!(case.is_flip(), !flips.is_empty());
        prop_assert_eq!(case.original_pred(), gold.flip());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bisect_reaches_single_move_optimum(points in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 4..30), seed in any::<u64>()) {
        let vectors: Vec<Vec<f64>> = points.iter().filter_map(|p| l2_normalize(p).ok()).collect();
        prop_assume!(vectors.len() >= 2);
        let b = bisect(&vectors, seed).unwrap();
        prop_assume!(!b.degenerate);
        let base = within_ss(&vectors, &b.assignment);
        let sizes = [b.members(0).len(), b.members(1).len()];
        prop_assert!(sizes[0] >= sizes[1] && sizes[1] > 0);
        for i in 0..vectors.len() {
            if sizes[b.assignment[i]] < 2 {
                continue;
            }
            let mut moved = b.assignment.clone();
            moved[i] = 1 - moved[i];
            prop_assert!(within_ss(&vectors, &moved) >= base - 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn slic_partitions_into_connected_segments(w in 200usize..260, h in 200usize..260, seed in any::<u32>()) {
        let img = RasterImage::from_fn(w, h, |x, y| {
            let v = (x as u32).wrapping_mul(2654435761) ^ (y as u32).wrapping_mul(40503) ^ seed;
            [(v >> 3) as u8, ((x / 40) * 60) as u8, ((y / 50) * 45) as u8]
        })
        .unwrap();
        let params = SlicParams::for_image(w, h).unwrap();
        let map = slic_segment(&img, &params).unwrap();
        prop_assert!((5..=12).contains(&map.segment_count()));
        prop_assert_eq!(map.segment_sizes().iter().sum::<usize>(), w * h);
        prop_assert!(map.segment_sizes().iter().all(|&s| s > 0));
        prop_assert!(map.components_per_segment().iter().all(|&c| c == 1));
        let labels: BTreeSet<u32> = map.labels().iter().copied().collect();
        prop_assert_eq!(labels.len(), map.segment_count());
    }
}

#[test]
fn higher_compactness_approaches_seed_grid() {
    // Diagonal colour stripes pull low-m segments away from the grid.
    let img = RasterImage::from_fn(300, 300, |x, y| {
        let band = ((x + 2 * y) / 70) % 3;
        [[200, 40, 40], [40, 200, 40], [40, 40, 200]][band]
    })
    .unwrap();
    let base = SlicParams::new(9).unwrap();
    let default_m = slic_segment(&img, &base).unwrap();
    let tight = slic_segment(&img, &base.with_compactness(1000.0)).unwrap();
    // A 3x3 grid of 100px cells has 2 * 2 * 300 boundary pairs.
    let grid = 1200.0;
    assert!((tight.boundary_length() as f64 - grid).abs() / grid < 0.05);
    assert!(tight.boundary_length() < default_m.boundary_length());
}

#[test]
fn block_purity_on_solid_grid() {
    let colors = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [128, 128, 0],
    ];
    let img = RasterImage::from_fn(450, 450, |x, y| colors[(y / 150) * 3 + x / 150]).unwrap();
    let map = slic_segment(&img, &SlicParams::new(9).unwrap()).unwrap();
    let mut counts = vec![[0usize; 9]; map.segment_count()];
    for y in 0..450 {
        for x in 0..450 {
            counts[map.label(x, y) as usize][(y / 150) * 3 + x / 150] += 1;
        }
    }
    let majority: usize = counts.iter().map(|c| *c.iter().max().unwrap()).sum();
    assert!(majority as f64 / (450.0 * 450.0) >= 0.95);
}
