//! Statistical behaviour of the Monte-Carlo Laplace predictive.

use kdlaplace::laplace::{
    entropy_weight, mc_predictive_softmax, predictive_entropy, LaplacePosterior, LogitPredictive, Ridge,
};
use kdlaplace::network::AuxHead;
use kdlaplace::numerics::{Matrix, RngStream};

fn variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

#[test]
fn mc_variance_scales_inversely_with_samples() {
    let pred = LogitPredictive {
        mu: vec![0.8, -0.3, 0.1],
        sigma2: 1.5,
    };
    let root = RngStream::new(11);
    let estimates = |samples: usize, tag: &str| -> Vec<f64> {
        (0..50)
            .map(|r| {
                let mut rng = root.derive(tag).derive_index(r);
                mc_predictive_softmax(&pred, samples, 1.0, &mut rng)[0]
            })
            .collect()
    };
    let small = variance(&estimates(100, "small"));
    let large = variance(&estimates(10_000, "large"));
    let ratio = small / large;
    assert!((100.0 / 3.0..=300.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn larger_ridge_pushes_weights_toward_cap() {
    let (classes, dim, n) = (3, 8, 40);
    let mut rng = RngStream::new(5);
    // Small features with a correspondingly large head: confident logits
    // but a feature covariance small next to the ridges swept below.
    let mut head = AuxHead::random(classes, dim, &mut rng);
    head.weight.as_mut_slice().iter_mut().for_each(|w| *w *= 40.0);
    let data: Vec<f64> = (0..n * dim).map(|_| 0.1 * rng.standard_normal()).collect();
    let features = Matrix::from_vec(n, dim, data).unwrap();
    let (beta, alpha, cap) = (4.0, 2.0, 100.0);

    let mut means = Vec::new();
    for eps in [1e-3, 1e-2, 1e-1, 1e0, 1e1, 1e2, 1e3] {
        let post = LaplacePosterior::fit(head.clone(), &features, Ridge::Absolute(eps)).unwrap();
        let mut total = 0.0;
        for i in 0..n {
            let pred = post.predictive(features.row(i)).unwrap();
            // Same draws at every ridge so only the variance changes.
            let mut r = RngStream::new(9).derive_index(i as u64);
            let h = predictive_entropy(&pred, 2000, 1.0, &mut r);
            total += entropy_weight(h, beta, alpha, cap).unwrap();
        }
        means.push(total / n as f64);
    }
    for w in means.windows(2) {
        assert!(w[1] >= w[0] - 1e-9, "{means:?}");
    }
    assert!(*means.last().unwrap() > 0.8 * cap, "{means:?}");
    assert!(means[0] < 0.5 * *means.last().unwrap(), "{means:?}");
}
