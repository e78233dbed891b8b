mod common;

use common::{max_gradient_error, LossInstance};
use mvec::losses::{
    aam_logits, aam_softmax_loss, mrl_combined_loss, truncate_columns, MarginConfig, MarginSign,
    PrefixSchedule,
};
use mvec::math::{cosine, Mat64, Prng};
use mvec::model::ClassifierHeads;
use proptest::prelude::*;

fn plain_cross_entropy(w: &Mat64, emb: &Mat64, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let z: Vec<f64> = (0..w.rows())
            .map(|j| cosine(w.row(j), emb.row(i)).unwrap())
            .collect();
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        total += -(z[y].exp() / denom).ln();
    }
    total / labels.len() as f64
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..50 {
        let inst = LossInstance::random(seed);
        let err = max_gradient_error(&inst);
        assert!(err < 1e-6, "seed {seed}: max relative error {err:e}");
    }
}

#[test]
fn single_prefix_reduces_to_aam() {
    for seed in 0..20 {
        let inst = LossInstance::random(1000 + seed);
        let full = inst.heads.last().unwrap().clone();
        let d = inst.embeddings.cols();
        let heads = ClassifierHeads::from_matrices(vec![full.clone()]).unwrap();
        let schedule = PrefixSchedule::full_only(d).unwrap();
        let a = mrl_combined_loss(&heads, &inst.embeddings, &inst.labels, &schedule, &inst.cfg)
            .unwrap();
        let b = aam_softmax_loss(&full, &inst.embeddings, &inst.labels, &inst.cfg).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
        assert_eq!(a.grad_embeddings, b.grad_embeddings);
    }
}

#[test]
fn unit_scale_zero_margin_is_softmax_cross_entropy() {
    let cfg = MarginConfig::new(1.0, 0.0, MarginSign::SubtractFromTarget).unwrap();
    for seed in 0..20 {
        let inst = LossInstance::random(2000 + seed);
        let w = inst.heads.last().unwrap();
        let got = aam_softmax_loss(w, &inst.embeddings, &inst.labels, &cfg)
            .unwrap()
            .value;
        let want = plain_cross_entropy(w, &inst.embeddings, &inst.labels);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn two_prefix_loss_composes_from_parts() {
    let mut rng = Prng::new(77);
    let mut mat = |r: usize, c: usize| {
        Mat64::from_vec(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    };
    let w2 = mat(3, 2);
    let w4 = mat(3, 4);
    let emb = mat(2, 4);
    let labels = [2, 0];
    let cfg = MarginConfig::desk_default();
    let schedule = PrefixSchedule::uniform(vec![2, 4]).unwrap();
    let heads = ClassifierHeads::from_matrices(vec![w2.clone(), w4.clone()]).unwrap();
    let combined = mrl_combined_loss(&heads, &emb, &labels, &schedule, &cfg)
        .unwrap()
        .value;
    let part2 = aam_softmax_loss(&w2, &truncate_columns(&emb, 2).unwrap(), &labels, &cfg)
        .unwrap()
        .value;
    let part4 = aam_softmax_loss(&w4, &emb, &labels, &cfg).unwrap().value;
    assert!((combined - (part2 + part4)).abs() < 1e-12);
}

#[test]
fn doubling_weights_doubles_value_and_gradients() {
    for seed in 0..20 {
        let inst = LossInstance::random(3000 + seed);
        let heads = inst.heads();
        let doubled = inst.schedule.scaled(2.0).unwrap();
        let a = mrl_combined_loss(
            &heads,
            &inst.embeddings,
            &inst.labels,
            &inst.schedule,
            &inst.cfg,
        )
        .unwrap();
        let b =
            mrl_combined_loss(&heads, &inst.embeddings, &inst.labels, &doubled, &inst.cfg).unwrap();
        assert!((b.value - 2.0 * a.value).abs() <= 1e-12 * a.value.abs().max(1.0));
        for (x, y) in a
            .grad_embeddings
            .as_slice()
            .iter()
            .zip(b.grad_embeddings.as_slice())
        {
            assert!((y - 2.0 * x).abs() <= 1e-12 * x.abs().max(1.0));
        }
        for (ga, gb) in a.grad_heads.iter().zip(&b.grad_heads) {
            for (x, y) in ga.as_slice().iter().zip(gb.as_slice()) {
                assert!((y - 2.0 * x).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }
}

#[test]
fn coordinates_beyond_smaller_prefixes_see_only_the_full_term() {
    for seed in 0..30 {
        let inst = LossInstance::random(4000 + seed);
        let dims = inst.schedule.dims().to_vec();
        if dims.len() < 2 {
            continue;
        }
        let below_full = dims[dims.len() - 2];
        let full_weight = *inst.schedule.weights().last().unwrap();
        let heads = inst.heads();
        let all = mrl_combined_loss(
            &heads,
            &inst.embeddings,
            &inst.labels,
            &inst.schedule,
            &inst.cfg,
        )
        .unwrap();

        let full_only =
            ClassifierHeads::from_matrices(vec![inst.heads.last().unwrap().clone()]).unwrap();
        let schedule = PrefixSchedule::new(vec![*dims.last().unwrap()], vec![full_weight]).unwrap();
        let alone = mrl_combined_loss(
            &full_only,
            &inst.embeddings,
            &inst.labels,
            &schedule,
            &inst.cfg,
        )
        .unwrap();
        for i in 0..inst.embeddings.rows() {
            for t in below_full..inst.embeddings.cols() {
                assert_eq!(
                    all.grad_embeddings.get(i, t),
                    alone.grad_embeddings.get(i, t)
                );
            }
        }
    }
}

#[test]
fn gradient_descent_never_increases_loss() {
    let mut inst = LossInstance::random(5);
    inst.cfg = MarginConfig::desk_default();
    let step = 1e-3;
    let mut prev = inst.value();
    for _ in 0..100 {
        let out = mrl_combined_loss(
            &inst.heads(),
            &inst.embeddings,
            &inst.labels,
            &inst.schedule,
            &inst.cfg,
        )
        .unwrap();
        inst.embeddings.axpy(-step, &out.grad_embeddings);
        for (h, g) in inst.heads.iter_mut().zip(&out.grad_heads) {
            h.axpy(-step, g);
        }
        let cur = inst.value();
        assert!(cur <= prev + 1e-9, "{cur} > {prev}");
        prev = cur;
    }
}

proptest! {
    #[test]
    fn logits_ignore_embedding_scale(
        e in prop::collection::vec(-3.0f64..3.0, 4),
        factor in 1e-3f64..1e3,
        target in 0usize..3,
    ) {
        prop_assume!(e.iter().map(|x| x * x).sum::<f64>() > 1e-6);
        let w = Mat64::from_rows(&[
            vec![1.0, 0.5, -0.2, 0.3],
            vec![-0.4, 1.0, 0.8, 0.0],
            vec![0.2, -0.7, 0.1, 1.1],
        ]).unwrap();
        let cfg = MarginConfig::desk_default();
        let scaled: Vec<f64> = e.iter().map(|x| x * factor).collect();
        let a = aam_logits(&w, &e, target, &cfg).unwrap();
        let b = aam_logits(&w, &scaled, target, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn loss_is_nonnegative_and_finite(seed in 0u64..10_000) {
        let inst = LossInstance::random(seed);
        let v = inst.value();
        prop_assert!(v.is_finite());
        prop_assert!(v >= 0.0);
    }
}
