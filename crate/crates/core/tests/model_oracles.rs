use marketrec::data::{ItemId, MarketId, UserId};
use marketrec::models::{Model, ModelConfig, ModelKind, Recommender};
use marketrec::nn::{l2_grad, l2_penalty, Init, ParamGroup};
use marketrec::training::{batch_loss, Example};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
// Central differences of an O(1) objective carry about eps/h of noise.
const ABS_FLOOR: f64 = 1e-9;
const LAMBDA: f64 = 1e-3;

fn objective(model: &Model<f64>, examples: &[Example]) -> f64 {
    batch_loss(model, model.params(), examples, None).unwrap() + l2_penalty(model.params(), LAMBDA, |_| true)
}

fn random_instance(kind: ModelKind, seed: u64) -> (Model<f64>, Vec<Example>) {
    let mut cfg = ModelConfig::new(kind, 4, 6, 2);
    cfg.embed_dim = 4;
    cfg.layer_plan = vec![8, 6, 4];
    let mut model = Model::with_inits(
        cfg,
        seed,
        Init::Gaussian { mean: 0.0, std: 0.5 },
        Init::Gaussian { mean: 1.0, std: 0.5 },
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    // Zero biases behind a dead layer put a ReLU exactly on its kink, where
    // the one-sided differences disagree; random biases avoid that.
    let biases: Vec<_> = model.params().ids().filter(|&id| model.params().param(id).name.ends_with("bias")).collect();
    for id in biases {
        for b in model.params_mut().get_mut(id).as_mut_slice() {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    let examples = (0..5)
        .map(|_| Example {
            user: UserId(rng.random_range(0..4)),
            item: ItemId(rng.random_range(0..6)),
            market: MarketId(rng.random_range(0..2)),
            label: rng.random_bool(0.5),
        })
        .collect();
    (model, examples)
}

/// Largest violation of the tolerance over every scalar parameter.
fn worst_mismatch(kind: ModelKind, seed: u64) -> (f64, usize) {
    let (mut model, examples) = random_instance(kind, seed);
    let mut grads = model.params().zero_grads();
    batch_loss(&model, model.params(), &examples, Some(&mut grads)).unwrap();
    l2_grad(model.params(), &mut grads, LAMBDA, |_| true);

    let ids: Vec<_> = model.params().ids().collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in ids {
        for k in 0..model.params().get(id).len() {
            let orig = model.params().get(id).as_slice()[k];
            model.params_mut().get_mut(id).as_mut_slice()[k] = orig + H;
            let up = objective(&model, &examples);
            model.params_mut().get_mut(id).as_mut_slice()[k] = orig - H;
            let down = objective(&model, &examples);
            model.params_mut().get_mut(id).as_mut_slice()[k] = orig;
            let numeric = (up - down) / (2.0 * H);
            let analytic = grads.get(id).as_slice()[k];
            let err = (analytic - numeric).abs();
            if err > ABS_FLOOR {
                worst = worst.max(err / analytic.abs().max(numeric.abs()));
            }
            checked += 1;
        }
    }
    (worst, checked)
}

#[test]
fn backprop_matches_central_differences_for_all_models() {
    for kind in ModelKind::ALL {
        for seed in 0..20 {
            let (worst, checked) = worst_mismatch(kind, seed);
            assert!(checked > 0);
            assert!(worst <= REL_TOL, "{kind} instance {seed}: relative error {worst:e}");
        }
    }
}

fn fill_market_tables_with_ones(model: &mut Model<f64>) {
    let ids: Vec<_> = model
        .params()
        .ids()
        .filter(|&id| model.params().group(id) == ParamGroup::MarketEmbedding)
        .collect();
    assert!(!ids.is_empty());
    for id in ids {
        model.params_mut().get_mut(id).fill(1.0);
    }
}

#[test]
fn unit_markets_reduce_to_unaware_models_bitwise() {
    let (users, items, markets) = (50, 80, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for kind in [ModelKind::GMF, ModelKind::MLP, ModelKind::NMF] {
        for split in [false, true] {
            if split && kind != ModelKind::NMF {
                continue;
            }
            let mut cfg = ModelConfig::new(kind, users, items, markets);
            cfg.split_market_tables = split;
            let plain = Model::<f64>::new(cfg.clone(), 1).unwrap();
            let mut ma = Model::<f64>::new(cfg.with_kind(kind.aware()), 2).unwrap();
            let copied = ma.copy_matching_from(plain.params());
            assert!(!copied.is_empty());
            fill_market_tables_with_ones(&mut ma);
            for _ in 0..10_000 {
                let u = UserId(rng.random_range(0..users as u32));
                let i = ItemId(rng.random_range(0..items as u32));
                let l = MarketId(rng.random_range(0..markets as u16));
                let a = ma.score(u, i, l).unwrap();
                let b = plain.score(u, i, l).unwrap();
                assert_eq!(a.to_bits(), b.to_bits(), "{kind} split={split} at {u:?} {i:?} {l:?}");
            }
        }
    }
}

#[test]
fn market_awareness_costs_one_vector_per_market() {
    for kind in [ModelKind::GMF, ModelKind::MLP, ModelKind::NMF] {
        for (n_markets, dim) in [(2, 8), (3, 8), (5, 4), (8, 16)] {
            let mut cfg = ModelConfig::new(kind, 10, 12, n_markets);
            cfg.embed_dim = dim;
            cfg.layer_plan = vec![2 * dim, 3 * dim, dim];
            let plain = Model::<f64>::new(cfg.clone(), 0).unwrap();
            let ma = Model::<f64>::new(cfg.with_kind(kind.aware()), 0).unwrap();
            assert_eq!(ma.parameter_count() - plain.parameter_count(), n_markets * dim, "{kind}");
        }
    }
    let cfg = ModelConfig::new(ModelKind::GMF, 100, 100, 2);
    let diff = Model::<f64>::new(cfg.with_kind(ModelKind::MA_GMF), 0).unwrap().parameter_count()
        - Model::<f64>::new(cfg, 0).unwrap().parameter_count();
    assert_eq!(diff, 16);
}

#[test]
fn fresh_market_aware_models_differ_across_markets() {
    let cfg = ModelConfig::new(ModelKind::MA_GMF, 5, 5, 2);
    let m = Model::<f64>::new(cfg, 3).unwrap();
    let a = m.score(UserId(0), ItemId(0), MarketId(0)).unwrap();
    let b = m.score(UserId(0), ItemId(0), MarketId(1)).unwrap();
    assert_ne!(a, b);
}
