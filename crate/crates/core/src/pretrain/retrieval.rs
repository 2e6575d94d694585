use ndarray::Array2;

/// Fraction of queries whose most similar candidate is their own pair.
/// Row `i` of `queries` pairs with row `i` of `candidates`; similarity is
/// the dot product and ties go to the lowest candidate index.
pub fn top1_accuracy(queries: &Array2<f64>, candidates: &Array2<f64>) -> f64 {
    recall_at_k(queries, candidates, 1)
}

/// Fraction of queries whose pair ranks within the top `k` candidates.
/// Candidates tied with the pair and listed before it count as ranked above.
pub fn recall_at_k(queries: &Array2<f64>, candidates: &Array2<f64>, k: usize) -> f64 {
    let n = queries.nrows();
    assert_eq!(n, candidates.nrows(), "queries and candidates must pair up");
    if n == 0 {
        return 0.0;
    }
    let sims = queries.dot(&candidates.t());
    let hits = (0..n)
        .filter(|&i| {
            let own = sims[[i, i]];
            let above = (0..n)
                .filter(|&j| sims[[i, j]] > own || (sims[[i, j]] == own && j < i))
                .count();
            above < k
        })
        .count();
    hits as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_is_perfect_and_swap_is_zero() {
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(top1_accuracy(&e, &e), 1.0);
        let swapped = array![[0.0, 1.0], [1.0, 0.0]];
        assert_eq!(top1_accuracy(&e, &swapped), 0.0);
        assert_eq!(recall_at_k(&e, &swapped, 2), 1.0);
    }

    #[test]
    fn ties_favor_the_lower_index() {
        let q = array![[1.0], [1.0]];
        assert_eq!(top1_accuracy(&q, &q), 0.5);
    }
}
