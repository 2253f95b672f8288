#![allow(dead_code)]

use ehpc::AttentionTrace;
use rand::Rng;

/// Random valid trace: each row is a random distribution over its causal
/// prefix with some exact zeros, stored as f32.
pub fn random_trace<R: Rng>(rng: &mut R, max_len: usize) -> AttentionTrace {
    let num_layers = rng.gen_range(1..=4);
    let num_heads = rng.gen_range(1..=4);
    let seq_len = rng.gen_range(1..=max_len);
    let window = rng.gen_range(1..=seq_len);
    let layers_present: Vec<usize> = (0..num_layers).filter(|_| rng.gen_bool(0.7)).collect();
    let mut weights = Vec::with_capacity(layers_present.len() * num_heads * window * seq_len);
    for _ in 0..layers_present.len() * num_heads {
        for r in 0..window {
            let q = seq_len - window + r;
            let raw: Vec<f64> = (0..seq_len)
                .map(|j| if j <= q && rng.gen_bool(0.85) { rng.gen::<f64>() } else { 0.0 })
                .collect();
            let total: f64 = raw.iter().sum();
            if total == 0.0 {
                weights.extend((0..seq_len).map(|j| if j == q { 1.0f32 } else { 0.0 }));
            } else {
                weights.extend(raw.iter().map(|v| (v / total) as f32));
            }
        }
    }
    let token_ids: Vec<u32> = (0..seq_len).map(|_| rng.gen_range(0..258)).collect();
    let token_texts = rng
        .gen_bool(0.5)
        .then(|| token_ids.iter().map(|&id| ehpc::tokenizer::id_text(id)).collect());
    AttentionTrace {
        model_id: format!("random-{}", rng.gen::<u16>()),
        num_layers,
        num_heads,
        seq_len,
        window,
        layers_present,
        weights,
        token_ids,
        token_texts,
    }
}

/// Reference Eq.-style evidence sum written as a plain double loop over
/// every (head, layer) and every key position.
pub fn naive_evidence(trace: &AttentionTrace, evidence: &[usize]) -> Vec<Vec<Option<f64>>> {
    let mut out = vec![vec![None; trace.num_layers]; trace.num_heads];
    for (slot, &layer) in trace.layers_present.iter().enumerate() {
        for head in 0..trace.num_heads {
            let base = ((slot * trace.num_heads + head) * trace.window + trace.window - 1) * trace.seq_len;
            let mut total = 0.0f64;
            for j in 0..trace.seq_len {
                if evidence.contains(&j) {
                    total += trace.weights[base + j] as f64;
                }
            }
            out[head][layer] = Some(total);
        }
    }
    out
}

/// Exhaustive compression oracle: among all index sets of size min(B, N)
/// containing the protected tail, the one with the largest total score;
/// ties go to the lexicographically smallest sorted index list.
pub fn brute_force_compress(scores: &[f64], budget: usize, tail: usize) -> Vec<usize> {
    let n = scores.len();
    let size = budget.min(n);
    let tail_start = n - tail.min(n);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != size {
            continue;
        }
        let set: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
        if !(tail_start..n).all(|i| set.contains(&i)) {
            continue;
        }
        let total: f64 = set.iter().map(|&i| scores[i]).sum();
        let better = match &best {
            None => true,
            Some((bt, bs)) => total > *bt || (total == *bt && set < *bs),
        };
        if better {
            best = Some((total, set));
        }
    }
    best.map(|(_, s)| s).unwrap_or_default()
}
