//! Approximate-neighbor recall and scheduling-independence checks.

use laplace_net_core::data::synth::synth_digits;
use laplace_net_core::graph::{knn_approx, knn_exact, KnnParams};

#[test]
fn approx_recall_on_digit_rows() {
    let (features, _) = synth_digits(1000, 17);
    let params = KnnParams { m: 30, n: 15 };
    let exact = knn_exact(&features, params).unwrap();
    let approx = knn_approx(&features, params, 8, 3).unwrap();
    let mut hits = 0usize;
    for i in 0..1000 {
        let truth: std::collections::HashSet<_> = exact.neighbors(i).iter().collect();
        hits += approx.neighbors(i).iter().filter(|j| truth.contains(j)).count();
    }
    let recall = hits as f64 / (1000.0 * 30.0);
    assert!(recall >= 0.9, "mean neighbor recall {recall:.4} below 0.9");
    println!("approx recall on 1000 digit rows: {recall:.4}");
}

#[test]
fn knn_results_independent_of_worker_count() {
    let (features, _) = synth_digits(300, 5);
    let params = KnnParams { m: 10, n: 5 };

    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| knn_exact(&features, params).unwrap());
    let multi = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap()
        .install(|| knn_exact(&features, params).unwrap());
    assert_eq!(single, multi);

    let approx_single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| knn_approx(&features, params, 4, 9).unwrap());
    let approx_multi = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap()
        .install(|| knn_approx(&features, params, 4, 9).unwrap());
    assert_eq!(approx_single, approx_multi);
}
