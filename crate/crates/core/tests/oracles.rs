use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdcal::metrics::{build_bins, ece, BinPolicy, ScoredSample};
use tdcal::synth::{generate, oracle_ece, oracle_projection, SynthSpec};
use tdcal::truth::project_accuracy_preserving;
use tdcal::ProbVector;

fn random_simplex(rng: &mut ChaCha8Rng, l: usize) -> ProbVector {
    let mut v: Vec<f64> = (0..l).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    let (p, _) = ProbVector::from_raw(v).unwrap();
    p
}

fn distance(a: &ProbVector, b: &ProbVector) -> f64 {
    a.squared_distance(b).sqrt()
}

#[test]
fn pooling_projection_matches_alternating_projection_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for l in 2..=6 {
        for _ in 0..200 {
            let z = random_simplex(&mut rng, l);
            let c = rng.random_range(0..l);
            let fast = project_accuracy_preserving(&z, c);
            let slow = oracle_projection(&z, c);
            assert!(distance(&fast, &slow) < 1e-8, "z={z:?} c={c} fast={fast:?} slow={slow:?}");
        }
    }
}

#[test]
fn oracle_ece_matches_metric_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..500 {
        let n = rng.random_range(1..300);
        let samples: Vec<ScoredSample> =
            (0..n).map(|_| ScoredSample::new(rng.random(), rng.random_bool(0.6))).collect();
        let b = rng.random_range(1..=n.min(20));
        let policy = if rng.random_bool(0.5) { BinPolicy::EqualMass } else { BinPolicy::EqualWidth };
        let conf: Vec<f64> = samples.iter().map(|s| s.confidence).collect();
        let bins = build_bins(&conf, b, policy).unwrap();
        assert!((ece(&samples, &bins).unwrap() - oracle_ece(&samples, &bins)).abs() < 1e-12);
    }
}

#[test]
fn generated_ensembles_are_valid() {
    for seed in 0..5 {
        let spec = SynthSpec { num_samples: 100, num_classes: 4, num_sources: 3, seed, ..SynthSpec::default() };
        let ens = generate(&spec).unwrap().ensemble;
        for i in 0..ens.num_samples() {
            for p in ens.sample(i) {
                assert!(ProbVector::new(p.as_slice().to_vec()).is_ok());
            }
            assert!(ens.labels()[i] < 4);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn oracle_ece_agrees_on_arbitrary_scores(
        pts in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..80),
        b in 1usize..12,
    ) {
        let samples: Vec<ScoredSample> = pts.iter().map(|&(w, c)| ScoredSample::new(w, c)).collect();
        let conf: Vec<f64> = samples.iter().map(|s| s.confidence).collect();
        let bins = build_bins(&conf, b.min(samples.len()), BinPolicy::EqualMass).unwrap();
        prop_assert!((ece(&samples, &bins).unwrap() - oracle_ece(&samples, &bins)).abs() < 1e-12);
    }
}
