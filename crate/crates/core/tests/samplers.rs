use std::collections::BTreeSet;
use std::sync::OnceLock;

use proptest::prelude::*;

use scrl_core::evalharness::{select_pool, Strategy};
use scrl_core::policy::Budget;
use scrl_core::rewards::RewardContext;
use scrl_core::synthgen::{generate, SynthConfig};
use scrl_core::{Dataset32, RunConfig};

struct Fixture {
    ds: Dataset32,
    cfg: RunConfig,
    ctx: RewardContext<f32>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let mut cfg = RunConfig::default();
        cfg.synth = SynthConfig {
            n_spots: 90,
            n_slides: 3,
            genes: 12,
            feature_dim: 6,
            embed_dim: 5,
            n_types: 3,
            n_reference: 60,
            ..SynthConfig::default()
        };
        cfg.reward.n_clusters = 6;
        cfg.reward.pca_dim = 4;
        cfg.sampler.rounds = 3;
        cfg.baseline.passes = 3;
        cfg.train.epochs = 2;
        cfg.train.batch = 16;
        cfg.train.hidden = 8;
        cfg.train.head_hidden = 8;
        cfg.train.head_dim = 4;
        cfg.train.top_k = 4;
        cfg.train.top_t = 2;
        let ds = generate::<f32>(&cfg.synth).unwrap().dataset;
        let ctx = RewardContext::fit(&ds.reference, &cfg.reward).unwrap();
        Fixture { ds, cfg, ctx }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_strategy_returns_budget_distinct_candidates(
        strategy in prop::sample::select(Strategy::ALL.to_vec()),
        ratio in 0.05f64..=1.0,
        start in 0usize..30,
        len in 30usize..60,
        seed in 0u64..1000,
    ) {
        let f = fixture();
        let ds = f.ds.clone();
        ds.reset_revealed();
        let candidates: Vec<usize> = (start..start + len).collect();
        let b = Budget::Ratio(ratio).resolve(candidates.len()).unwrap();
        let sel = select_pool(strategy, &ds, &candidates, ratio, &f.cfg, seed, &f.ctx).unwrap();
        prop_assert_eq!(sel.pool.len(), b);
        let ids: BTreeSet<u64> = sel.pool.iter().copied().collect();
        prop_assert_eq!(ids.len(), b);
        let allowed: BTreeSet<u64> = candidates.iter().map(|&r| ds.spots[r].spot_id).collect();
        prop_assert!(ids.is_subset(&allowed));
    }
}
