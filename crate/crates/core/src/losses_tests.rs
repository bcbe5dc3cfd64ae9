use super::*;
use crate::decoder::StagePrediction;
use crate::matching::{cost_matrix, hungarian, CostWeights, PredictionView};
use crate::synthdata::{Instance, Mask, SceneAnnotation};
use crate::tensor::finite_diff_check;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn eval(f: impl FnOnce(&mut Graph, Var) -> Result<Var>, x: Tensor) -> f64 {
    let mut g = Graph::new();
    let v = g.constant(x);
    let out = f(&mut g, v).unwrap();
    g.value(out).item()
}

fn t(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape, v.to_vec()).unwrap()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn bce_oracle(x: f64, y: f64) -> f64 {
    let p = sig(x);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

#[test]
fn focal_at_zero_logit_positive_target() {
    let v = eval(|g, x| focal_loss(g, x, &t(&[1], &[1.0]), 0.25, 2.0), t(&[1], &[0.0]));
    let expect = 0.25 * 0.25 * 2f64.ln();
    assert!((v - expect).abs() < 1e-15);
    assert!((v - 0.043321).abs() < 1e-6);
    assert!((focal_elem(0.0, 1.0, 0.25, 2.0) - expect).abs() < 1e-15);
}

#[test]
fn focal_vanishes_when_confidently_right() {
    let v = eval(|g, x| focal_loss(g, x, &t(&[2], &[1.0, 0.0]), 0.25, 2.0), t(&[2], &[40.0, -40.0]));
    assert!(v < 1e-30);
}

#[test]
fn focal_with_flat_weighting_is_half_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..50).map(|_| rng.random_range(-6.0..6.0)).collect();
    let y: Vec<f64> = (0..50).map(|i| (i % 3 == 0) as u8 as f64).collect();
    for (&xi, &yi) in x.iter().zip(&y) {
        let f = eval(|g, v| focal_loss(g, v, &t(&[1], &[yi]), 0.5, 0.0), t(&[1], &[xi]));
        assert!((f - 0.5 * bce_oracle(xi, yi)).abs() < 1e-12);
    }
}

#[test]
fn non_binary_targets_are_rejected() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2]));
    let bad = t(&[2], &[0.0, 0.5]);
    assert!(focal_loss(&mut g, x, &bad, 0.25, 2.0).is_err());
    assert!(attribute_loss(&mut g, x, &bad).is_err());
    assert!(dice_loss(&mut g, x, &t(&[1], &[1.0])).is_err());
}

#[test]
fn dice_examples() {
    let half = eval(|g, x| dice_loss(g, x, &t(&[1, 4], &[1.0, 0.0, 0.0, 0.0])), Tensor::zeros(&[1, 4]));
    assert!((half - 0.5).abs() < 1e-15);
    let same = eval(
        |g, x| dice_loss(g, x, &t(&[1, 4], &[1.0, 1.0, 0.0, 1.0])),
        t(&[1, 4], &[40.0, 40.0, -40.0, 40.0]),
    );
    assert!(same < 1e-3);
    // disjoint, each area 2: 1 − 1/(2·2 + 1)
    let disjoint = eval(
        |g, x| dice_loss(g, x, &t(&[1, 4], &[0.0, 0.0, 1.0, 1.0])),
        t(&[1, 4], &[40.0, 40.0, -40.0, -40.0]),
    );
    assert!((disjoint - 0.8).abs() < 1e-12);
    let empty = eval(|g, x| dice_loss(g, x, &Tensor::zeros(&[1, 4])), Tensor::full(&[1, 4], -40.0));
    assert!(empty < 1e-12);
}

#[test]
fn attribute_examples() {
    let y = t(&[2, 3], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    let zero = eval(|g, x| attribute_loss(g, x, &y), Tensor::zeros(&[2, 3]));
    assert!((zero - 2f64.ln()).abs() < 1e-15);
    let perfect = eval(
        |g, x| attribute_loss(g, x, &y),
        y.map(|v| if v == 1.0 { 40.0 } else { -40.0 }),
    );
    assert!(perfect < 1e-15);
    let x = t(&[2, 3], &[0.3, -1.2, 2.5, 0.7, -0.1, -3.0]);
    let expect: f64 = x.data().iter().zip(y.data()).map(|(&a, &b)| bce_oracle(a, b)).sum::<f64>() / 6.0;
    let got = eval(|g, v| attribute_loss(g, v, &y), x);
    assert!((got - expect).abs() < 1e-14);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_fn(&[3, 4], |_| rng.random_range(-2.0..2.0));
    let y = Tensor::from_fn(&[3, 4], |i| ((i * 7) % 3 == 0) as u8 as f64);
    let f = |g: &mut Graph, v: Var| focal_loss(g, v, &y, 0.25, 2.0);
    assert!(finite_diff_check(f, &x, 1e-5).unwrap() < 1e-5);
    let f = |g: &mut Graph, v: Var| dice_loss(g, v, &y);
    assert!(finite_diff_check(f, &x, 1e-5).unwrap() < 1e-5);
    let f = |g: &mut Graph, v: Var| attribute_loss(g, v, &y);
    assert!(finite_diff_check(f, &x, 1e-5).unwrap() < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn components_are_non_negative(x in prop::collection::vec(-30.0f64..30.0, 6), bits in prop::collection::vec(any::<bool>(), 6)) {
        let y = Tensor::from_fn(&[2, 3], |i| bits[i] as u8 as f64);
        let xt = t(&[2, 3], &x);
        prop_assert!(eval(|g, v| focal_loss(g, v, &y, 0.25, 2.0), xt.clone()) >= 0.0);
        prop_assert!(eval(|g, v| dice_loss(g, v, &y), xt.clone()) >= 0.0);
        prop_assert!(eval(|g, v| attribute_loss(g, v, &y), xt) >= 0.0);
    }
}

fn square_mask(size: usize, y0: usize, x0: usize, side: usize) -> Mask {
    let mut m = Mask::empty(size, size);
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            m.set(y, x, true);
        }
    }
    m
}

fn one_instance_scene() -> SceneAnnotation {
    SceneAnnotation {
        instances: vec![Instance {
            class_id: 2,
            mask: square_mask(8, 2, 3, 4),
            attributes: vec![0, 1, 0, 1, 0, 0, 0, 1, 0],
            layer_order: 0,
        }],
    }
}

struct Fixture {
    cls: Tensor,
    mask: Tensor,
    attr: Tensor,
}

fn fixture(n_q: usize, perfect_for: &SceneAnnotation, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cls = Tensor::from_fn(&[n_q, 5], |_| rng.random_range(-1.0..1.0));
    let mut mask = Tensor::from_fn(&[n_q, 8, 8], |_| rng.random_range(-1.0..1.0));
    let mut attr = Tensor::from_fn(&[n_q, 9], |_| rng.random_range(-1.0..1.0));
    if seed == 0 {
        // saturated perfect prediction: query q predicts instance q, the rest predict nothing
        cls = Tensor::from_fn(&[n_q, 5], |i| {
            let (q, c) = (i / 5, i % 5);
            let want = perfect_for.instances.get(q).map_or(4, |inst| inst.class_id);
            if c == want {
                40.0
            } else {
                -40.0
            }
        });
        mask = Tensor::from_fn(&[n_q, 8, 8], |i| {
            let (q, p) = (i / 64, i % 64);
            match perfect_for.instances.get(q) {
                Some(inst) if inst.mask.bits[p] => 40.0,
                _ => -40.0,
            }
        });
        attr = Tensor::from_fn(&[n_q, 9], |i| {
            let (q, k) = (i / 9, i % 9);
            match perfect_for.instances.get(q) {
                Some(inst) if inst.attributes[k] == 1 => 40.0,
                _ => -40.0,
            }
        });
    }
    Fixture { cls, mask, attr }
}

fn run_total(fx: &Fixture, ann: &SceneAnnotation, stages: usize, w: LossWeights) -> LossReport {
    let gt = Targets::new(ann, (8, 8), 9);
    let mut g = Graph::new();
    let mut preds = Vec::new();
    let mut assigns = Vec::new();
    for _ in 0..stages {
        let view = PredictionView {
            class_logits: &fx.cls,
            mask_logits: &fx.mask,
            attr_logits: &fx.attr,
        };
        assigns.push(hungarian(&cost_matrix(view, &gt, CostWeights::default()).unwrap()).unwrap());
        let c = g.param(fx.cls.clone());
        let m = g.param(fx.mask.clone());
        let a = g.param(fx.attr.clone());
        preds.push(StagePrediction {
            mask_logits: m,
            internal_mask_logits: m,
            class_logits: c,
            attr_logits: a,
            queries_in: c,
            queries_out: c,
        });
    }
    total_loss(&mut g, &preds, &gt, &assigns, w, stages).unwrap().report
}

#[test]
fn perfect_prediction_has_near_zero_total() {
    let ann = one_instance_scene();
    let r = run_total(&fixture(3, &ann, 0), &ann, 3, LossWeights::default());
    assert!(r.total < 1e-3, "{r:?}");
}

#[test]
fn mask_weight_scales_only_the_mask_terms() {
    let ann = one_instance_scene();
    let fx = fixture(4, &ann, 7);
    let base = run_total(&fx, &ann, 3, LossWeights::default());
    let doubled = run_total(&fx, &ann, 3, LossWeights { mask: 2.0, ..LossWeights::default() });
    assert_eq!(base.focal, doubled.focal);
    assert_eq!(base.dice, doubled.dice);
    let mask_part: f64 = base.focal.iter().zip(&base.dice).map(|(f, d)| f + d).sum();
    assert!((doubled.total - base.total - mask_part).abs() < 1e-12);
    assert_eq!(base.total, base.recompose(LossWeights::default()));
}

#[test]
fn single_instance_total_matches_hand_composition() {
    let ann = one_instance_scene();
    let fx = fixture(3, &ann, 11);
    let r = run_total(&fx, &ann, 1, LossWeights::default());
    let inst = &ann.instances[0];

    // brute-force the matched query with the same cost definition
    let cost = |q: usize| {
        let row = &fx.cls.data()[q * 5..q * 5 + 5];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        let (mut focal, mut inter, mut psum) = (0.0, 0.0, 0.0);
        for p in 0..64 {
            let x = fx.mask.data()[q * 64 + p];
            let y = inst.mask.bits[p] as u8 as f64;
            focal += focal_elem(x, y, 0.25, 2.0);
            psum += sig(x);
            inter += y * sig(x);
        }
        let dice = 1.0 - (2.0 * inter + 1.0) / (psum + 16.0 + 1.0);
        let bce: f64 = (0..9).map(|k| bce_oracle(fx.attr.data()[q * 9 + k], inst.attributes[k] as f64)).sum::<f64>() / 9.0;
        (-row[2].exp() / z + focal / 64.0 + dice + bce, focal / 64.0, dice, bce)
    };
    let q = (0..3).min_by(|&a, &b| cost(a).0.partial_cmp(&cost(b).0).unwrap()).unwrap();
    let (_, focal, dice, attr) = cost(q);
    let mut cls = 0.0;
    for qq in 0..3 {
        for c in 0..5 {
            let target = if qq == q { c == 2 } else { c == 4 };
            cls += focal_elem(fx.cls.data()[qq * 5 + c], target as u8 as f64, 0.25, 2.0);
        }
    }
    let expect = cls + focal + dice + attr;
    assert!((r.cls[0] - cls).abs() < 1e-12);
    assert!((r.focal[0] - focal).abs() < 1e-12);
    assert!((r.dice[0] - dice).abs() < 1e-12);
    assert!((r.attr[0] - attr).abs() < 1e-12);
    assert!((r.total - expect).abs() < 1e-12);
}

#[test]
fn stage_count_must_match_configuration() {
    let ann = one_instance_scene();
    let gt = Targets::new(&ann, (8, 8), 9);
    let fx = fixture(2, &ann, 3);
    let mut g = Graph::new();
    let c = g.param(fx.cls.clone());
    let m = g.param(fx.mask.clone());
    let a = g.param(fx.attr.clone());
    let pred = StagePrediction {
        mask_logits: m,
        internal_mask_logits: m,
        class_logits: c,
        attr_logits: a,
        queries_in: c,
        queries_out: c,
    };
    let asg = Assignment { pairs: vec![(0, 0)] };
    let err = total_loss(&mut g, &[pred, pred], &gt, &[asg.clone(), asg.clone()], LossWeights::default(), 3);
    assert!(err.is_err());
    assert!(total_loss(&mut g, &[pred, pred], &gt, &[asg.clone(), asg], LossWeights::default(), 2).is_err());
}
