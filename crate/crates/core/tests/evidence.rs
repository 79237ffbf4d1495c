use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;

use ineq_anova::constraints::{mc_prior_proportion, ConstraintSet};
use ineq_anova::evidence::order::{direct_marginal_blocks, BLOCK};
use ineq_anova::evidence::{direct_marginal, log_marginal_unconstrained};
use ineq_anova::numeric::{log_sum_exp, LogMeanAccumulator};
use ineq_anova::rng;
use ineq_anova::samplers::{gibbs_oneway, mc_se, ChainConfig, OneWayData, PriorSpec};

fn random_chain(rng: &mut rng::Rng) -> ConstraintSet {
    let k = rng.gen_range(1..=6);
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    let m = rng.gen_range(1..=k);
    let mut groups: Vec<Vec<usize>> = vec![vec![]];
    for (j, &i) in order[..m].iter().enumerate() {
        if j > 0 && rng.gen_bool(0.5) {
            groups.push(vec![]);
        }
        groups.last_mut().unwrap().push(i);
    }
    ConstraintSet::new(k, groups).unwrap()
}

#[test]
fn mc_proportion_agrees_with_exact_for_random_chains() {
    let mut rng = rng::stream(2024, "random-chains", 0);
    let n = 100_000;
    for case in 0..200u64 {
        let cs = random_chain(&mut rng);
        let exact = cs.prior_proportion();
        let (p, _) = mc_prior_proportion(&cs, &PriorSpec::default(), n, case).unwrap();
        let se = (exact * (1.0 - exact) / n as f64).sqrt();
        if se == 0.0 {
            assert_eq!(p, exact, "{cs}");
        } else {
            assert!((p - exact).abs() < 4.0 * se, "{cs}: mc {p} vs exact {exact}");
        }
    }
}

#[test]
fn full_orders_average_to_the_unconstrained_marginal() {
    let data = OneWayData::from_groups(&[vec![0.3, 1.2, -0.4], vec![1.1, 2.0, 0.9], vec![0.2, 0.8, 1.5]]);
    let prior = PriorSpec::default();
    let exact = log_marginal_unconstrained(&data, &prior).unwrap();
    let orders = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut logs = Vec::new();
    let mut weighted_se2 = Vec::new();
    for (seed, order) in orders.iter().enumerate() {
        let cs = ConstraintSet::new(3, order.iter().map(|&i| vec![i]).collect()).unwrap();
        let e = direct_marginal(&data, &prior, Some(&cs), 2_000_000, seed as u64).unwrap();
        // Each order carries prior weight 1/6 and log marginal l: contributes exp(l) / 6.
        logs.push(e.log_marginal - 6f64.ln());
        weighted_se2.push((e.log_marginal - 6f64.ln(), e.mc_se_log));
    }
    let total = log_sum_exp(&logs);
    let se = weighted_se2.iter().map(|(l, s)| ((l - total).exp() * s).powi(2)).sum::<f64>().sqrt();
    assert!((total - exact).abs() < 4.0 * se, "sum {total} vs exact {exact} (se {se})");
}

#[test]
fn thinning_preserves_chain_means() {
    let data = OneWayData::from_groups(&[vec![1.0, 2.0, 0.5, 1.7], vec![3.1, 2.4, 2.9, 3.3], vec![0.0, -0.6, 0.4, 0.1]]);
    let prior = PriorSpec::default();
    let run = |thin, seed| gibbs_oneway(&data, &prior, &ChainConfig { iterations: 105_000, burn_in: 5_000, thin, seed }).unwrap();
    let (a, b) = (run(1, 1), run(5, 2));
    for j in 0..3 {
        let (sa, sb) = (a.beta(j), b.beta(j));
        let (ma, mb) = (sa.iter().sum::<f64>() / sa.len() as f64, sb.iter().sum::<f64>() / sb.len() as f64);
        let se = (mc_se(&sa).powi(2) + mc_se(&sb).powi(2)).sqrt();
        assert!((ma - mb).abs() < 4.0 * se, "beta{j}: {ma} vs {mb} (se {se})");
    }
    assert!(a.sigma2().iter().chain(&b.sigma2()).all(|s| *s > 0.0));
}

#[test]
fn distinct_seeds_give_distinct_chains() {
    let data = OneWayData::from_groups(&[vec![1.0, 2.0], vec![0.5, 0.7]]);
    let config = |seed| ChainConfig { iterations: 200, burn_in: 0, thin: 1, seed };
    let prior = PriorSpec::default();
    let a = gibbs_oneway(&data, &prior, &config(1)).unwrap();
    assert_eq!(a, gibbs_oneway(&data, &prior, &config(1)).unwrap());
    let b = gibbs_oneway(&data, &prior, &config(2)).unwrap();
    assert!(a.draws.iter().zip(&b.draws).all(|(x, y)| x.beta != y.beta));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_block_partition_merges_to_the_sequential_estimate(
        n_blocks in 1u64..8,
        tail in 1u64..BLOCK,
        cuts in prop::collection::btree_set(1u64..8, 0..4),
        seed in any::<u64>(),
    ) {
        let data = OneWayData::from_groups(&[vec![0.1, 0.4], vec![1.0, 0.8], vec![-0.2, 0.3]]);
        let prior = PriorSpec::default();
        let cs = ConstraintSet::full_order(3);
        let n = (n_blocks - 1) * BLOCK + tail;
        let whole = direct_marginal_blocks(&data, &prior, Some(&cs), n, seed, 0..n_blocks).finish();
        let mut bounds: Vec<u64> = std::iter::once(0).chain(cuts.into_iter().filter(|&c| c < n_blocks)).collect();
        bounds.push(n_blocks);
        // Merge the shards in reverse to show order does not matter either.
        let mut merged = LogMeanAccumulator::new();
        for w in bounds.windows(2).rev() {
            merged.merge(&direct_marginal_blocks(&data, &prior, Some(&cs), n, seed, w[0]..w[1]));
        }
        let merged = merged.finish();
        prop_assert_eq!(merged.n_nonzero, whole.n_nonzero);
        prop_assert!((merged.log_mean - whole.log_mean).abs() < 1e-12);
        prop_assert!((merged.se_log - whole.se_log).abs() < 1e-12);
    }
}
