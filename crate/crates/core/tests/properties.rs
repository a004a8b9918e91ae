use lsd_core::env::{clamp_action, point_step, PointState};
use lsd_core::metrics::{skill_state_correlation, state_coverage, traveled_distance};
use lsd_core::nn::{Activation, NetworkParameters, OptimizerState};
use lsd_core::replay::Transition;
use lsd_core::reward::{discrete_reward_from_delta, lsd_reward, RewardForm};
use lsd_core::skill::{discrete_skill_encoding, SkillLatent};
use lsd_core::trainer::Trajectory;
use lsd_core::zeroshot::lsd_zero_shot_skill;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn net(seed: u64, sn: bool) -> NetworkParameters {
    NetworkParameters::new(&[2, 16, 16, 2], Activation::Relu, sn, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn trajectory(points: &[[f64; 2]], skill: Vec<f64>) -> Trajectory {
    let transitions = points
        .windows(2)
        .map(|w| Transition {
            state: w[0].to_vec(),
            action: vec![0.0, 0.0],
            next_state: w[1].to_vec(),
            skill: skill.clone(),
            intrinsic_reward: 0.0,
            done: false,
        })
        .collect();
    Trajectory {
        skill: SkillLatent::continuous(skill),
        transitions,
        positions: points.to_vec(),
        episode_index: 0,
    }
}

fn point() -> impl Strategy<Value = [f64; 2]> {
    [-20.0..20.0f64, -20.0..20.0f64]
}

fn paths() -> impl Strategy<Value = Vec<Vec<[f64; 2]>>> {
    prop::collection::vec(prop::collection::vec(point(), 2..8), 1..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rewards_telescope(seed in 0u64..1000, sn: bool, start in point(),
                         steps in prop::collection::vec([-1.0..1.0f64, -1.0..1.0f64], 1..12),
                         z in [-3.0..3.0f64, -3.0..3.0f64]) {
        let phi = net(seed, sn);
        let mut s = start.to_vec();
        let mut total = 0.0;
        for a in &steps {
            let next = point_step(PointState { position: [s[0], s[1]] }, *a).unwrap();
            total += lsd_reward(&phi, &s, &next.position, &z).unwrap();
            s = next.position.to_vec();
        }
        let direct = lsd_reward(&phi, &start, &s, &z).unwrap();
        prop_assert!((total - direct).abs() <= 1e-9);
    }

    #[test]
    fn squared_distance_decomposes(a in prop::collection::vec(-10.0..10.0f64, 1..6), seed: u64) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = a.iter().map(|_| rng.random_range(-3.0..3.0)).collect();
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let lhs = RewardForm::SquaredDistance.evaluate(&a, &z);
        let rhs = RewardForm::InnerProduct.evaluate(&a, &z) - 0.5 * sq(&a) - 0.5 * sq(&z);
        prop_assert!((lhs - rhs).abs() <= 1e-9);
    }

    #[test]
    fn discrete_rewards_sum_to_zero(delta in prop::collection::vec(-5.0..5.0f64, 2..20)) {
        let total: f64 = (1..=delta.len()).map(|k| discrete_reward_from_delta(&delta, k)).sum();
        prop_assert!(total.abs() <= 1e-12);
    }

    #[test]
    fn discrete_reward_equals_inner_product_with_encoding(delta in prop::collection::vec(-5.0..5.0f64, 2..12), pick: prop::sample::Index) {
        let n = delta.len();
        let k = pick.index(n) + 1;
        let e = discrete_skill_encoding(n, k).unwrap();
        let dot: f64 = e.vector.iter().zip(&delta).map(|(a, b)| a * b).sum();
        prop_assert!((dot - discrete_reward_from_delta(&delta, k)).abs() <= 1e-12);
    }

    #[test]
    fn zero_shot_skill_has_requested_norm(s in point(), g in point(), alpha in 0.01..10.0f64, c in 0.01..100.0f64) {
        prop_assume!(s != g);
        let a = lsd_zero_shot_skill(&s, &g, alpha).unwrap();
        prop_assert!((a.skill.norm() - alpha).abs() <= 1e-9 * alpha.max(1.0));
        let cs: Vec<f64> = s.iter().map(|x| c * x).collect();
        let cg: Vec<f64> = g.iter().map(|x| c * x).collect();
        let b = lsd_zero_shot_skill(&cs, &cg, alpha).unwrap();
        for (x, y) in a.skill.vector.iter().zip(&b.skill.vector) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn coverage_ignores_order_and_duplicates(ps in paths(), bin in 0.1..3.0f64) {
        let trajs: Vec<_> = ps.iter().map(|p| trajectory(p, vec![0.0])).collect();
        let base = state_coverage(&trajs, bin).unwrap();
        let mut shuffled = trajs.clone();
        shuffled.reverse();
        shuffled.extend(trajs.iter().cloned());
        prop_assert_eq!(state_coverage(&shuffled, bin).unwrap(), base);
        let visited: usize = ps.iter().map(|p| p.len()).sum();
        prop_assert!(base <= visited);
    }

    #[test]
    fn distance_is_translation_invariant(ps in paths(), shift in point()) {
        let trajs: Vec<_> = ps.iter().map(|p| trajectory(p, vec![0.0])).collect();
        let moved: Vec<_> = ps
            .iter()
            .map(|p| {
                let q: Vec<[f64; 2]> = p.iter().map(|x| [x[0] + shift[0], x[1] + shift[1]]).collect();
                trajectory(&q, vec![0.0])
            })
            .collect();
        let a = traveled_distance(&trajs).unwrap();
        let b = traveled_distance(&moved).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn correlations_are_bounded(ends in prop::collection::vec((point(), [-2.0..2.0f64, -2.0..2.0f64]), 2..30), per_step: bool) {
        let trajs: Vec<_> = ends
            .iter()
            .map(|(e, z)| trajectory(&[[0.0, 0.0], *e], z.to_vec()))
            .collect();
        let c = skill_state_correlation(&trajs, per_step).unwrap();
        prop_assert!(c.values.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn steps_are_bounded(s in point(), a in [-5.0..5.0f64, -5.0..5.0f64]) {
        let c = clamp_action(a);
        prop_assert!(c.iter().all(|v| (-1.0..=1.0).contains(v)));
        let next = point_step(PointState { position: s }, a).unwrap();
        prop_assert!((next.position[0] - s[0]).abs() <= 1.0 + 1e-12);
        prop_assert!((next.position[1] - s[1]).abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn adam_step_is_bounded_by_learning_rate(g in prop::collection::vec(-1e3..1e3f64, 1..10), lr in 1e-5..1e-1f64) {
        let mut opt = OptimizerState::new(&[g.len()], lr);
        let mut p = vec![0.0; g.len()];
        opt.step(&mut [&mut p], &[&g]).unwrap();
        // First bias-corrected step is lr·g/(|g|+ε) per coordinate.
        prop_assert!(p.iter().all(|x| x.abs() <= lr * (1.0 + 1e-9)));
    }

    #[test]
    fn normalized_network_is_one_lipschitz(seed in 0u64..200, x in point(), y in point()) {
        prop_assume!(x != y);
        let mut phi = net(seed, true);
        phi.spectral_step(200).unwrap();
        let fx = phi.forward_vec(&x).unwrap();
        let fy = phi.forward_vec(&y).unwrap();
        let num = ((fx[0] - fy[0]).powi(2) + (fx[1] - fy[1]).powi(2)).sqrt();
        let den = ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt();
        prop_assert!(num / den <= 1.0 + 1e-2);
    }
}
