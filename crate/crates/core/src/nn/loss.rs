use super::real::Real;

/// Row-wise softmax of `[N, classes]` logits.
pub fn softmax<F: Real>(logits: &[F], classes: usize) -> Vec<F> {
    let mut out = logits.to_vec();
    for row in out.chunks_exact_mut(classes) {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Per-sample cross-entropy and its gradient w.r.t. the logits
/// (`softmax - onehot`, not averaged over the batch).
pub fn softmax_cross_entropy<F: Real>(logits: &[F], labels: &[u32], classes: usize) -> (Vec<F>, Vec<F>) {
    let mut grad = softmax(logits, classes);
    let mut losses = Vec::with_capacity(labels.len());
    for ((row, probs), &y) in logits.chunks_exact(classes).zip(grad.chunks_exact_mut(classes)).zip(labels) {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).fold(F::zero(), |a, b| a + b).ln();
        losses.push(lse - row[y as usize]);
        probs[y as usize] -= F::one();
    }
    (losses, grad)
}

pub fn argmax<F: Real>(row: &[F]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, F::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
