//! Independent re-implementations used as test oracles. Nothing here calls
//! into the formulas under test.

#![allow(dead_code)]

use fedsim::trace::BandwidthTrace;

/// Utility written out longhand from the loss list.
pub fn utility(losses: &[f64], f: f64, t: f64, big_t: f64, alpha: f64) -> f64 {
    let n = losses.len() as f64;
    let mean_sq = losses.iter().map(|l| l * l).sum::<f64>() / n;
    let stat = n * f * mean_sq.sqrt();
    if big_t < t {
        stat * (big_t * f / t).powf(alpha)
    } else {
        stat
    }
}

pub fn factor(x: f64, th_low: f64, th_high: f64, c: f64) -> f64 {
    if x >= th_high {
        -(1.0 - x).ln() + 1.0 + (1.0 - th_high).ln() + c
    } else if x <= th_low {
        (x - th_low + c).exp()
    } else {
        1.0
    }
}

pub fn window(w: usize, d: f64, d_high: f64, d_slow: f64, w_min: usize, w_max: usize) -> usize {
    let mut next = w as f64;
    if d >= d_high {
        next = w as f64 * (d_high / d);
    } else if d <= d_slow {
        next = w as f64 * (d_slow / d);
    }
    let r = next.round() as usize;
    r.max(w_min).min(w_max)
}

/// Bytes deliverable between time 0 and `t` on the looping trace.
pub fn cumulative_bytes(trace: &BandwidthTrace, t: f64) -> f64 {
    let samples: Vec<(f64, f64)> = trace.samples().collect();
    let period = trace.duration();
    let per_loop: f64 = (0..samples.len())
        .map(|i| {
            let end = samples.get(i + 1).map_or(period, |s| s.0);
            samples[i].1 * (end - samples[i].0)
        })
        .sum();
    let loops = (t / period).floor();
    let rest = t - loops * period;
    let mut partial = 0.0;
    for i in 0..samples.len() {
        let begin = samples[i].0;
        let end = samples.get(i + 1).map_or(period, |s| s.0);
        if rest <= begin {
            break;
        }
        partial += samples[i].1 * (rest.min(end) - begin);
    }
    loops * per_loop + partial
}

/// Smallest duration whose cumulative delivery from `start` reaches `bytes`,
/// found by bisection.
pub fn transfer_time(trace: &BandwidthTrace, start: f64, bytes: f64) -> f64 {
    let base = cumulative_bytes(trace, start);
    let enough = |d: f64| cumulative_bytes(trace, start + d) - base >= bytes;
    let mut hi = 1.0;
    while !enough(hi) {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if enough(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    hi
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Numerically stable softmax cross-entropy for a linear model laid out as
/// class-major weights followed by biases.
pub fn cross_entropy(params: &[f64], x: &[f64], y: usize, classes: usize) -> f64 {
    let dim = x.len();
    let z: Vec<f64> = (0..classes)
        .map(|c| {
            params[dim * classes + c]
                + (0..dim).map(|j| params[c * dim + j] * x[j]).sum::<f64>()
        })
        .collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[y]
}
