//! Euclidean distance shared by mining, the loss and gallery ranking.

/// Euclidean distance, accumulated in index order.
///
/// Panics if the lengths differ; callers validate dimensions first.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "euclidean: dimension mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
