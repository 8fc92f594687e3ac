use alad::adapter::{adapter_param_count, AdapterConfig, AlignmentAdapter};
use alad::checkpoint::Checkpoint;
use alad::numerics::{assemble_windows, Module, Tape, Tensor};
use alad::seed::{derive_seed, rng};
use alad::tasks::{
    decode_span, gen_spanqa_corpus, gen_tagging_corpus, spanqa_metrics, tagging_metrics, MetricsReport, SpanQaDataset,
    SpanQaParams, TaggingDataset, TaggingParams,
};
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(m, d)| {
        prop::collection::vec(-10.0f64..10.0, m * d).prop_map(move |v| Tensor::new(vec![m, d], v).unwrap())
    })
}

fn window() -> impl Strategy<Value = usize> {
    prop::sample::select(vec![1usize, 3, 5])
}

fn spans(len: usize) -> impl Strategy<Value = Option<(usize, usize)>> {
    prop::option::of((0..len, 0..len).prop_map(|(a, b)| (a.min(b), a.max(b))))
}

proptest! {
    #[test]
    fn windows_are_local(x in matrix(12, 6), n in window(), pick in any::<prop::sample::Index>()) {
        let m = x.rows();
        let j = pick.index(m);
        let before = assemble_windows(&x, n).unwrap();
        let mut y = x.clone();
        let d = y.cols();
        for v in &mut y.data_mut()[j * d..(j + 1) * d] {
            *v += 1.0;
        }
        let after = assemble_windows(&y, n).unwrap();
        for i in 0..m {
            let near = i.abs_diff(j) <= n / 2;
            prop_assert_eq!(before.row(i) != after.row(i), near, "row {} after touching row {}", i, j);
        }
    }

    #[test]
    fn windows_commute_with_zero_prefix(x in matrix(10, 5), n in window(), k in 1usize..4) {
        let d = x.cols();
        let pad = Tensor::zeros(&[k, d]);
        let shifted = Tensor::concat_rows(&[&pad, &x]).unwrap();
        let w = assemble_windows(&x, n).unwrap();
        let ws = assemble_windows(&shifted, n).unwrap();
        for i in 0..x.rows() {
            prop_assert_eq!(w.row(i), ws.row(i + k));
        }
    }

    #[test]
    fn single_window_is_identity(x in matrix(12, 8)) {
        prop_assert_eq!(assemble_windows(&x, 1).unwrap(), x);
    }

    #[test]
    fn tape_windows_match_tensor_windows(x in matrix(8, 4), n in window()) {
        let tape = Tape::new();
        let v = tape.windows(tape.constant(x.clone()), n).unwrap();
        prop_assert_eq!(&*v.value(), &assemble_windows(&x, n).unwrap());
    }

    #[test]
    fn mse_is_nonnegative_and_zero_on_self((x, y) in matrix(6, 6).prop_flat_map(|x| {
        let shape = x.shape().to_vec();
        let n = x.numel();
        (Just(x), prop::collection::vec(-10.0f64..10.0, n).prop_map(move |v| Tensor::new(shape.clone(), v).unwrap()))
    })) {
        let tape = Tape::new();
        let l = tape.mse_loss(tape.constant(x.clone()), &y).unwrap().value().item().unwrap();
        prop_assert!(l >= 0.0);
        let tape = Tape::new();
        let z = tape.mse_loss(tape.constant(x.clone()), &x).unwrap().value().item().unwrap();
        prop_assert_eq!(z, 0.0);
    }

    #[test]
    fn cross_entropy_of_constant_logits_is_log_k(rows in 1usize..6, k in 2usize..20, c in -5.0f64..5.0) {
        let tape = Tape::new();
        let labels: Vec<usize> = (0..rows).map(|i| i % k).collect();
        let logits = tape.constant(Tensor::full(&[rows, k], c));
        let l = tape.cross_entropy(logits, &labels, None).unwrap().value().item().unwrap();
        prop_assert!((l - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one(x in matrix(6, 7)) {
        let tape = Tape::new();
        let p = tape.softmax_rows(tape.constant(x)).unwrap();
        let p = p.value();
        for i in 0..p.rows() {
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn tagging_metrics_are_bounded_and_micro_matches_accuracy(
        k in 2usize..6,
        pairs in prop::collection::vec(prop::collection::vec((0usize..6, 0usize..6), 1..10), 1..6),
        outside in prop::option::of(0usize..2),
    ) {
        let pred: Vec<Vec<usize>> = pairs.iter().map(|s| s.iter().map(|&(p, _)| p % k).collect()).collect();
        let gold: Vec<Vec<usize>> = pairs.iter().map(|s| s.iter().map(|&(_, g)| g % k).collect()).collect();
        let report = tagging_metrics(&pred, &gold, k, outside).unwrap();
        for (_, v) in report.fields() {
            prop_assert!((0.0..=100.0).contains(&v));
        }
        let MetricsReport::Tagging { accuracy, ref counts, .. } = report else { unreachable!() };
        prop_assert_eq!(counts.micro_f1(None), accuracy);
        prop_assert_eq!(report.recompute(), report.clone());
    }

    #[test]
    fn span_metrics_are_bounded_with_em_below_f1(items in prop::collection::vec((spans(12), spans(12)), 1..30)) {
        let (pred, gold): (Vec<_>, Vec<_>) = items.into_iter().unzip();
        let report = spanqa_metrics(&pred, &gold).unwrap();
        let MetricsReport::Span { exact_match, f1, .. } = report else { unreachable!() };
        prop_assert!((0.0..=100.0).contains(&exact_match));
        prop_assert!((0.0..=100.0).contains(&f1));
        prop_assert!(exact_match <= f1 + 1e-9);
    }

    #[test]
    fn decoded_span_is_valid_and_optimal(
        logits in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..12),
        max_len in 1usize..6,
        from in 0usize..3,
    ) {
        let (start, end): (Vec<f64>, Vec<f64>) = logits.into_iter().unzip();
        let from = from.min(start.len() - 1);
        let d = decode_span(&start, &end, from..start.len(), max_len, f64::INFINITY).unwrap();
        let (s, e) = d.span.unwrap();
        prop_assert!(from <= s && s <= e && e - s < max_len);
        let mut best = f64::NEG_INFINITY;
        for a in from..start.len() {
            for b in a..start.len().min(a + max_len) {
                best = best.max(start[a] + end[b]);
            }
        }
        prop_assert_eq!(d.best_score, best);
        prop_assert_eq!(start[s] + end[e], best);
    }

    #[test]
    fn adapter_param_count_matches_formula(n in window(), d_c in 1usize..40, h in 1usize..40, d_l in 1usize..40) {
        let cfg = AdapterConfig { hidden: h, ..AdapterConfig::new(n, d_c, d_l) };
        let a = AlignmentAdapter::<f32>::init(cfg.clone(), 0).unwrap();
        prop_assert_eq!(a.param_count(), n * d_c * h + h + h * d_l + d_l);
        prop_assert_eq!(adapter_param_count(&cfg), a.param_count());
    }

    #[test]
    fn derived_seeds_differ_by_tag(root in any::<u64>()) {
        prop_assert_eq!(derive_seed(root, "a"), derive_seed(root, "a"));
        prop_assert_ne!(derive_seed(root, "a"), derive_seed(root, "b"));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn tagging_dataset_text_round_trips(seed in any::<u64>(), ner in any::<bool>()) {
        let mut p = TaggingParams { num_sequences: 200, ..TaggingParams::default() };
        if ner {
            p.scheme = alad::tasks::TagScheme::Ner { entity_tags: 3 };
        }
        let d = gen_tagging_corpus(&p, seed).unwrap();
        prop_assert_eq!(TaggingDataset::from_text(&d.to_text().unwrap()).unwrap(), d);
    }

    #[test]
    fn spanqa_dataset_text_round_trips(seed in any::<u64>()) {
        let d = gen_spanqa_corpus(&SpanQaParams { num_items: 40, ..SpanQaParams::default() }, seed).unwrap();
        prop_assert_eq!(SpanQaDataset::from_text(&d.to_text().unwrap()).unwrap(), d);
    }

    #[test]
    fn adapter_checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), n in window()) {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("adapter");
        let mut a = AlignmentAdapter::<f32>::init(AdapterConfig::new(n, 6, 5), seed).unwrap();
        let mut r = rng(seed);
        for (_, p) in a.named_params_mut() {
            p.value = Tensor::randn(p.value.shape(), 1.0, &mut r);
        }
        Checkpoint::from_modules("adapter", a.config(), &[("", &a)]).unwrap().save(&base).unwrap();
        let loaded = Checkpoint::load(&base).unwrap();
        let mut b = AlignmentAdapter::<f32>::zeros(loaded.config().unwrap()).unwrap();
        loaded.restore_into("", &mut b).unwrap();
        prop_assert_eq!(a.weight_hash(), b.weight_hash());
        for ((_, p), (_, q)) in a.named_params().into_iter().zip(b.named_params()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&p.value), bits(&q.value));
        }
    }
}
