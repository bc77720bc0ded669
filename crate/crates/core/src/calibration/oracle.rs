//! Naive ECE re-implementation used to cross-check the fast path. It shares
//! no code with it: percentiles, bin membership and per-bin recounts are all
//! recomputed from a sorted copy by scanning.

use super::{BinningStrategy, ClampMode};

pub struct OracleInput<'a> {
    pub scores: &'a [f64],
    pub successes: &'a [bool],
    pub num_bins: usize,
    pub strategy: BinningStrategy,
    pub clamp: ClampMode,
}

/// Smallest sample `x` such that at least `p`% of the samples are ≤ `x`.
fn percentile(sorted: &[f64], p: usize) -> f64 {
    let n = sorted.len();
    let mut r = 1;
    while 100 * r < p * n {
        r += 1;
    }
    sorted[r - 1]
}

pub fn ece_bruteforce_oracle(input: &OracleInput<'_>) -> f64 {
    let n = input.scores.len();
    let m = input.num_bins;
    let mut pairs: Vec<(f64, bool)> = input
        .scores
        .iter()
        .copied()
        .zip(input.successes.iter().copied())
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let sorted: Vec<f64> = pairs.iter().map(|p| p.0).collect();

    let (lo_clip, hi_clip) = match input.clamp {
        ClampMode::TwoSided => (percentile(&sorted, 1), percentile(&sorted, 99)),
        ClampMode::OneSidedHigh => (f64::NEG_INFINITY, percentile(&sorted, 99)),
        ClampMode::None => (f64::NEG_INFINITY, f64::INFINITY),
    };
    for p in pairs.iter_mut() {
        if p.0 < lo_clip {
            p.0 = lo_clip;
        }
        if p.0 > hi_clip {
            p.0 = hi_clip;
        }
    }
    let lo = pairs[0].0;
    let hi = pairs[n - 1].0;

    let in_bin = |idx: usize, i: usize| -> bool {
        let v = pairs[idx].0;
        match input.strategy {
            BinningStrategy::EqualWidth => {
                if lo == hi {
                    return i == 1;
                }
                let t = (v - lo) / (hi - lo) * m as f64;
                let above = t >= (i - 1) as f64;
                let below = t < i as f64 || i == m;
                above && below
            }
            BinningStrategy::Quantile => {
                let rank = pairs.iter().filter(|q| q.0 < v).count();
                (i - 1) * n <= rank * m && rank * m < i * n
            }
        }
    };

    let mut ece = 0.0;
    for i in 1..=m {
        let mut count = 0usize;
        let mut hits = 0usize;
        for idx in 0..n {
            if in_bin(idx, i) {
                count += 1;
                if pairs[idx].1 {
                    hits += 1;
                }
            }
        }
        if count > 0 {
            let expected = (m - i) as f64 / (m - 1) as f64;
            let observed = hits as f64 / count as f64;
            ece += count as f64 / n as f64 * (observed - expected).abs();
        }
    }
    ece
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_examples() {
        let input = OracleInput {
            scores: &[0.9, 0.1, 0.8, 0.2],
            successes: &[false, true, true, true],
            num_bins: 2,
            strategy: BinningStrategy::EqualWidth,
            clamp: ClampMode::None,
        };
        assert_eq!(ece_bruteforce_oracle(&input), 0.25);
        let all = OracleInput {
            scores: &[0.5; 4],
            successes: &[true; 4],
            ..input
        };
        assert_eq!(ece_bruteforce_oracle(&all), 0.0);
    }

    #[test]
    fn two_queries_two_bins() {
        let input = OracleInput {
            scores: &[0.3, 0.7],
            successes: &[true, false],
            num_bins: 2,
            strategy: BinningStrategy::Quantile,
            clamp: ClampMode::TwoSided,
        };
        assert_eq!(ece_bruteforce_oracle(&input), 0.0);
        let flipped = OracleInput {
            successes: &[false, true],
            ..input
        };
        assert_eq!(ece_bruteforce_oracle(&flipped), 1.0);
    }
}
