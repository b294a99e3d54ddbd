use camforge::fusion::{self, AttentionStack};
use camforge::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random `[B, H, n, n]` stack with row-stochastic matrices.
fn stochastic_stack(rng: &mut ChaCha8Rng, b: usize, h: usize, n: usize) -> Tensor {
    let logits = Tensor::from_fn(&[b * h * n, n], |_| rng.gen_range(-3.0..3.0));
    logits.softmax_rows().unwrap().reshape(&[b, h, n, n]).unwrap()
}

fn permute_axis(x: &Tensor, axis: usize, perm: &[usize]) -> Tensor {
    let parts: Vec<Tensor> = perm
        .iter()
        .map(|&p| x.narrow(axis, p, 1).unwrap())
        .collect();
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::concat(&refs, axis).unwrap()
}

fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

fn row_sums(m: &Tensor) -> Vec<f64> {
    let c = m.shape()[1];
    m.data().chunks(c).map(|r| r.iter().sum()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn head_and_block_reductions_commute_with_permutation(
        seed in any::<u64>(), b in 1usize..5, h in 1usize..5, n in 2usize..8,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = stochastic_stack(&mut rng, b, h, n);
        let heads = shuffled(&mut rng, h);
        let avg = fusion::head_average(&stack).unwrap();
        let avg_perm = fusion::head_average(&permute_axis(&stack, 1, &heads)).unwrap();
        prop_assert!(avg.max_abs_diff(&avg_perm) < 1e-15);

        let blocks = shuffled(&mut rng, b);
        let per_block_perm = permute_axis(&avg, 0, &blocks);
        let s = fusion::block_sum(&avg).unwrap();
        prop_assert!(s.max_abs_diff(&fusion::block_sum(&per_block_perm).unwrap()) < 1e-14);
        let m = fusion::block_mean(&avg).unwrap();
        prop_assert!(m.max_abs_diff(&fusion::block_mean(&per_block_perm).unwrap()) < 1e-15);
    }

    #[test]
    fn block_mean_is_block_sum_over_b(seed in any::<u64>(), b in 1usize..6, n in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let per_block = fusion::head_average(&stochastic_stack(&mut rng, b, 2, n)).unwrap();
        let s = fusion::block_sum(&per_block).unwrap();
        let m = fusion::block_mean(&per_block).unwrap();
        // bitwise: the mean is the sum divided by B
        let by_division = s.map(|v| v / b as f64);
        prop_assert_eq!(m.data(), by_division.data());
        let scaled_back = m.scale(b as f64);
        prop_assert!(scaled_back.max_abs_diff(&s) < 1e-14);
        if b.is_power_of_two() {
            prop_assert_eq!(scaled_back.data(), s.data());
        }
    }

    #[test]
    fn refine_and_inject_are_linear_in_the_cam(
        seed in any::<u64>(), g in 1usize..5, k in 1usize..4,
        alpha in -3.0f64..3.0, beta in -3.0f64..3.0, mult in 0.0f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = g * g;
        let a = Tensor::from_fn(&[n, n], |_| rng.gen_range(0.0..1.0));
        let m1 = Tensor::from_fn(&[k, g, g], |_| rng.gen_range(-1.0..1.0));
        let m2 = Tensor::from_fn(&[k, g, g], |_| rng.gen_range(-1.0..1.0));
        let mix = m1.scale(alpha).add(&m2.scale(beta)).unwrap();
        let lhs = fusion::refine_cam(&a, &mix).unwrap();
        let rhs = fusion::refine_cam(&a, &m1).unwrap().scale(alpha)
            .add(&fusion::refine_cam(&a, &m2).unwrap().scale(beta)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        let lhs = fusion::inject_noise(&a, &mix, mult).unwrap();
        let rhs = fusion::inject_noise(&a, &m1, mult).unwrap().scale(alpha)
            .add(&fusion::inject_noise(&a, &m2, mult).unwrap().scale(beta)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn row_stochasticity_propagates(seed in any::<u64>(), b in 1usize..5, h in 1usize..5, n in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = stochastic_stack(&mut rng, b, h, n);
        let avg = fusion::head_average(&stack).unwrap();
        for blk in 0..b {
            for s in row_sums(&avg.index(blk).unwrap()) {
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }
        for s in row_sums(&fusion::block_mean(&avg).unwrap()) {
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
        for s in row_sums(&fusion::block_sum(&avg).unwrap()) {
            prop_assert!((s - b as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn stripped_rows_lose_the_class_token_column(seed in any::<u64>(), n in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = fusion::block_mean(&fusion::head_average(&stochastic_stack(&mut rng, 2, 2, n)).unwrap()).unwrap();
        let stripped = fusion::strip_class_token(&m).unwrap();
        for (i, s) in row_sums(&stripped).into_iter().enumerate() {
            let cls_mass = m.at(&[i + 1, 0]);
            prop_assert!((s - (1.0 - cls_mass)).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_and_value_paths_agree(seed in any::<u64>(), b in 1usize..4, h in 1usize..4, grid in 1usize..4, k in 0.0f64..2.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = grid * grid;
        let stack = stochastic_stack(&mut rng, b, h, n + 1);
        let cam = Tensor::from_fn(&[2, grid, grid], |_| rng.gen_range(-1.0..1.0));
        let fused = AttentionStack::new(stack.clone()).unwrap().fuse().unwrap();
        let refined = fusion::refine_cam(&fused.sum_star, &cam).unwrap();
        let noisy = fusion::inject_noise(&fused.mean_star, &refined, k).unwrap();

        let mut g = Graph::new();
        let s = g.constant(stack);
        let c = g.constant(cam);
        let fv = fusion::graph::fuse(&mut g, s).unwrap();
        let r = fusion::graph::refine_cam(&mut g, fv.sum_star, c).unwrap();
        let nz = fusion::graph::inject_noise(&mut g, fv.mean_star, r, k).unwrap();
        prop_assert_eq!(g.value(r), &refined);
        prop_assert_eq!(g.value(nz), &noisy);
        prop_assert!(g.has_marker(fusion::REFINE_MARKER));
        prop_assert!(g.has_marker(fusion::NOISE_MARKER));
    }
}

#[test]
fn spec_style_examples() {
    // two mirrored heads average to uniform
    let stack = Tensor::new(vec![1, 2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
    assert_eq!(fusion::head_average(&stack).unwrap().data(), &[0.5; 4]);

    // three identical blocks sum to three times the block
    let x = Tensor::new(vec![2, 2], vec![0.25, 0.75, 0.5, 0.5]).unwrap();
    let three = Tensor::stack(&[&x, &x, &x]).unwrap();
    assert_eq!(fusion::block_sum(&three).unwrap(), x.scale(3.0));

    // uniform A* spreads the mean of M everywhere
    let uniform = Tensor::full(&[4, 4], 0.25);
    let cam = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(fusion::refine_cam(&uniform, &cam).unwrap().data(), &[2.5; 4]);

    // doubling k doubles the output
    let a = Tensor::from_fn(&[4, 4], |i| (i % 5) as f64 / 10.0);
    let one = fusion::inject_noise(&a, &cam, 1.0).unwrap();
    assert_eq!(fusion::inject_noise(&a, &cam, 2.0).unwrap(), one.scale(2.0));
    assert!(fusion::inject_noise(&a, &cam, -1.0).is_err());
    assert!(fusion::inject_noise(&a, &cam, f64::NAN).is_err());
}
