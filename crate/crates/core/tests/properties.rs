use barnn::autodiff::Tape;
use barnn::checkpoint::Checkpoint;
use barnn::datagen::{gen_ring_corpus, gen_sinusoid, ring_validity, Trajectory};
use barnn::forecaster::{stack_states, TrainOptions};
use barnn::inference::ensemble_moments;
use barnn::layers::SampleMode;
use barnn::metrics::{metric_ece, metric_mse, metric_rmse, ECE_LEVELS};
use barnn::prior::{kl_tvamp, tvamp_stats};
use barnn::rng::seeded;
use barnn::{Forecaster, ForecasterConfig, PriorKind, Tensor, Variant};
use proptest::prelude::*;

fn triples(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
    prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64, 1e-3..4.0f64), n)
}

fn small_model(prior: PriorKind, seed: u64) -> Forecaster {
    let cfg = ForecasterConfig {
        hidden: 8,
        encoder_hidden: 4,
        ..ForecasterConfig::default()
    };
    Forecaster::new(Variant::Barnn(prior), cfg, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_permutation_invariant(rows in triples(1..60), rot in 0usize..60) {
        let (y, m, v): (Vec<f64>, Vec<f64>, Vec<f64>) =
            rows.iter().fold((vec![], vec![], vec![]), |(mut a, mut b, mut c), &(y, m, v)| {
                a.push(y);
                b.push(m);
                c.push(v);
                (a, b, c)
            });
        let k = rot % y.len();
        let rotate = |x: &[f64]| [&x[k..], &x[..k]].concat();
        let (yr, mr, vr) = (rotate(&y), rotate(&m), rotate(&v));
        let mse = metric_mse(&y, &m).unwrap();
        prop_assert!((mse - metric_mse(&yr, &mr).unwrap()).abs() <= 1e-12 * mse.max(1.0));
        let (ece, _) = metric_ece(&y, &m, &v, ECE_LEVELS).unwrap();
        let (ece_r, _) = metric_ece(&yr, &mr, &vr, ECE_LEVELS).unwrap();
        prop_assert_eq!(ece, ece_r);
    }

    #[test]
    fn rmse_is_sqrt_of_mse(rows in triples(1..60)) {
        let y: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let m: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let mse = metric_mse(&y, &m).unwrap();
        prop_assert!(mse >= 0.0);
        prop_assert_eq!(metric_rmse(&y, &m).unwrap(), mse.sqrt());
    }

    #[test]
    fn ece_is_in_unit_interval(rows in triples(1..80)) {
        let y: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let m: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let v: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let (ece, curve) = metric_ece(&y, &m, &v, ECE_LEVELS).unwrap();
        prop_assert!((0.0..=1.0).contains(&ece));
        for (p, obs) in curve {
            prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&obs));
        }
    }

    #[test]
    fn tvamp_kl_is_non_negative(alpha in prop::collection::vec(1e-3..20.0f64, 2..40), layers in 1usize..4) {
        let n = alpha.len() / layers;
        prop_assume!(n > 0);
        let a = Tensor::new([n, layers], alpha[..n * layers].to_vec()).unwrap();
        let stats = tvamp_stats(&a, 1).unwrap();
        let dims = vec![7; layers];
        for l in 0..layers {
            prop_assert!(stats.gamma[l] >= stats.beta[l] * (1.0 - 1e-12));
        }
        for r in 0..n {
            prop_assert!(kl_tvamp(a.row(r), &stats, &dims).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn epistemic_variance_is_translation_invariant(
        means in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 5), 1..12),
        shift in -1e3..1e3f64,
    ) {
        let ms: Vec<Tensor> = means.iter().map(|m| Tensor::vector(m.clone())).collect();
        let shifted: Vec<Tensor> = ms.iter().map(|m| m.map(|x| x + shift)).collect();
        let vars = vec![Tensor::full(vec![5], 0.1); ms.len()];
        let a = ensemble_moments(&ms, &vars).unwrap();
        let b = ensemble_moments(&shifted, &vars).unwrap();
        for k in 0..5 {
            prop_assert!(a.epistemic.data()[k] >= 0.0);
            prop_assert!((a.epistemic.data()[k] - b.epistemic.data()[k]).abs() < 1e-9);
            prop_assert!((a.mean.data()[k] + shift - b.mean.data()[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn ring_generator_only_emits_valid_strings(seed in any::<u64>(), max_rings in 1usize..6) {
        let corpus = gen_ring_corpus(50, max_rings, 30, seed).unwrap();
        for s in &corpus {
            prop_assert_eq!(ring_validity(&s.tokens).unwrap(), (true, s.ring_count));
            prop_assert!(s.ring_count <= max_rings);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn seeded_forward_is_deterministic(seed in any::<u64>(), t in 1usize..=100) {
        let model = small_model(PriorKind::Tvamp, seed);
        let data = gen_sinusoid(6, seed).unwrap();
        let refs: Vec<&Trajectory> = data.iter().collect();
        let states = stack_states(&refs).unwrap();
        let a = model.forecast_step(&states, t, SampleMode::Stochastic, &mut seeded(seed)).unwrap();
        let b = model.forecast_step(&states, t, SampleMode::Stochastic, &mut seeded(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact(seed in any::<u64>(), log_uniform in any::<bool>()) {
        let prior = if log_uniform { PriorKind::LogUniform } else { PriorKind::Tvamp };
        let model = small_model(prior, seed);
        let mut buf = Vec::new();
        model.to_checkpoint().write_to(&mut buf).unwrap();
        let back = Forecaster::from_checkpoint(&Checkpoint::read_from(buf.as_slice()).unwrap()).unwrap();
        let bits = |m: &Forecaster| -> Vec<u64> {
            m.named_params().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
        };
        prop_assert_eq!(bits(&model), bits(&back));
        prop_assert_eq!(back.variant, model.variant);
    }
}

#[test]
fn tvamp_kl_gradient_ignores_main_weights() {
    let data = gen_sinusoid(16, 3).unwrap();
    let refs: Vec<&Trajectory> = data.iter().collect();
    let states = stack_states(&refs).unwrap();
    let mut model = small_model(PriorKind::Tvamp, 11);
    let enc = model.encoder.as_mut().unwrap();
    enc.head.weight = barnn::rng::normal_tensor(&mut seeded(4), enc.head.weight.shape().to_vec());
    let tape = Tape::new();
    let b = model.bind(&tape);
    let (_, kl, _) = model
        .loss(&b, &states, 17, &TrainOptions::default(), 1, &mut seeded(0))
        .unwrap();
    let kl = kl.unwrap();
    assert!(kl.item() > 0.0);
    let grads = tape.grad(kl, &b.vars).unwrap();
    let names = model.named_params();
    let mut encoder_grad = 0.0;
    for ((name, _), g) in names.iter().zip(&grads) {
        let norm: f64 = g.data().iter().map(|x| x * x).sum();
        if name.starts_with("encoder") {
            encoder_grad += norm;
        } else {
            assert_eq!(norm, 0.0, "{name}");
        }
    }
    assert!(encoder_grad > 0.0);
}
