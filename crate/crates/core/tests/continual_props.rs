use oneshot_dil::continual::{ewc_penalty, gem_project, FisherDiag};
use oneshot_dil::rng::SeedTree;
use oneshot_dil::tensor::{Graph, ParameterSet, Tensor};
use proptest::prelude::*;
use rand::Rng as _;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn projected_gradient_never_opposes_reference(g in vec_strategy(1000), r in vec_strategy(1000)) {
        let p = gem_project(&g, &r).unwrap();
        prop_assert!(dot(&p.grad, &r) >= -1e-10 * dot(&g, &g).sqrt().max(1.0) * dot(&r, &r).sqrt());
        if dot(&g, &r) >= 0.0 {
            prop_assert_eq!(&p.grad, &g);
            prop_assert!(!p.projected);
        }
    }
}

proptest! {
    #[test]
    fn projection_is_idempotent_and_minimal(g in vec_strategy(50), r in vec_strategy(50)) {
        let once = gem_project(&g, &r).unwrap();
        let twice = gem_project(&once.grad, &r).unwrap();
        for (a, b) in once.grad.iter().zip(&twice.grad) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
        if once.projected {
            // g̃ − g is parallel to r, so g̃ is the closest point of the half-space.
            let diff: Vec<f64> = once.grad.iter().zip(&g).map(|(a, b)| a - b).collect();
            let cos = dot(&diff, &r) / (dot(&diff, &diff).sqrt() * dot(&r, &r).sqrt());
            prop_assert!((cos.abs() - 1.0).abs() < 1e-9);
            prop_assert!(dot(&once.grad, &r).abs() < 1e-8 * dot(&r, &r).max(1.0));
        }
    }
}

#[test]
fn hand_worked_projection() {
    let p = gem_project(&[1.0, -1.0], &[0.0, 1.0]).unwrap();
    assert_eq!(p.grad, vec![1.0, 0.0]);
    assert_eq!(p.raw_dot, -1.0);
    let q = gem_project(&[1.0, 1.0], &[0.0, 1.0]).unwrap();
    assert_eq!(q.grad, vec![1.0, 1.0]);
    assert!(gem_project(&[1.0], &[1.0, 2.0]).is_err());
}

fn set(entries: &[(&str, Vec<usize>, Vec<f64>)]) -> ParameterSet {
    let mut p = ParameterSet::new();
    for (name, shape, data) in entries {
        p.insert(*name, Tensor::new(shape.clone(), data.clone()).unwrap()).unwrap();
    }
    p
}

fn random_set(rng: &mut oneshot_dil::rng::Rng, positive: bool) -> ParameterSet {
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n).map(|_| if positive { rng.gen_range(0.0..2.0) } else { rng.gen_range(-1.0..1.0) }).collect()
    };
    let (a, b) = (draw(6), draw(3));
    set(&[("w", vec![2, 3], a), ("b", vec![3], b)])
}

fn penalty_and_grad(params: &ParameterSet, fisher: &FisherDiag, lambda: f64) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let pen = ewc_penalty(&mut g, params, fisher, lambda).unwrap();
    (g.value(pen).item(), g.param_grads(pen, params).unwrap().flatten())
}

#[test]
fn ewc_vanishes_at_anchor_and_matches_closed_form() {
    let mut rng = SeedTree::new(4).stream("ewc");
    for _ in 0..20 {
        let fisher = FisherDiag { fisher: random_set(&mut rng, true), anchor: random_set(&mut rng, false) };
        let lambda = rng.gen_range(0.1..200.0);
        let (v, grad) = penalty_and_grad(&fisher.anchor, &fisher, lambda);
        assert_eq!(v, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));

        let theta = random_set(&mut rng, false);
        let (v, grad) = penalty_and_grad(&theta, &fisher, lambda);
        let (f, a, t) = (fisher.fisher.flatten(), fisher.anchor.flatten(), theta.flatten());
        let expected_v: f64 = 0.5 * lambda * (0..t.len()).map(|i| f[i] * (t[i] - a[i]).powi(2)).sum::<f64>();
        assert!((v - expected_v).abs() < 1e-10 * expected_v.max(1.0));
        for i in 0..t.len() {
            assert!((grad[i] - lambda * f[i] * (t[i] - a[i])).abs() < 1e-10);
        }
    }
}

#[test]
fn ewc_rejects_bad_lambda() {
    let p = set(&[("t", vec![1], vec![1.0])]);
    let fisher = FisherDiag { fisher: p.clone(), anchor: p.clone() };
    let mut g = Graph::new();
    assert!(ewc_penalty(&mut g, &p, &fisher, -1.0).is_err());
    assert!(ewc_penalty(&mut g, &p, &fisher, f64::NAN).is_err());
}
