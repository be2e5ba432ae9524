//! Synthetic bandwidth trace families used when no trace directory is given.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::stream_rng;
use crate::trace::BandwidthTrace;

/// Mobile-link model: a per-trace mean drawn log-uniformly, a log-space AR(1)
/// fluctuation around it, and deep fades arriving as a two-state Markov
/// chain whose rate differs per trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MobilityTraceSpec {
    /// Number of traces; 0 means one per client.
    pub count: usize,
    /// Samples per trace at a 1 s interval.
    pub duration_s: usize,
    /// Log-uniform range of the per-trace mean (bytes/s).
    pub mean_bw_range: (f64, f64),
    /// Standard deviation of the log-space fluctuation.
    pub log_sigma: f64,
    /// Correlation time of the fluctuation (s).
    pub correlation_s: f64,
    /// Uniform range of the per-trace fade rate (fades per hour).
    pub fade_rate_range: (f64, f64),
    /// Mean fade length (s).
    pub fade_mean_s: f64,
    /// Bandwidth multiplier while faded.
    pub fade_depth: f64,
}

impl Default for MobilityTraceSpec {
    fn default() -> Self {
        Self {
            count: 0,
            duration_s: 3600,
            mean_bw_range: (0.1e6, 10e6),
            log_sigma: 0.5,
            correlation_s: 60.0,
            fade_rate_range: (0.0, 6.0),
            fade_mean_s: 300.0,
            fade_depth: 0.02,
        }
    }
}

impl MobilityTraceSpec {
    pub fn generate(&self, seed: u64, n: usize) -> Vec<BandwidthTrace> {
        (0..n).map(|i| self.generate_one(seed, i)).collect()
    }

    fn generate_one(&self, seed: u64, index: usize) -> BandwidthTrace {
        let mut rng = stream_rng(seed, 0x7472_6163, index as u64);
        let (lo, hi) = self.mean_bw_range;
        let mean = (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp();
        let (rlo, rhi) = self.fade_rate_range;
        let fade_rate = rlo + rng.random::<f64>() * (rhi - rlo);
        // per-second transition probabilities of the fade chain
        let enter = (fade_rate / 3600.0).min(1.0);
        let leave = (1.0 / self.fade_mean_s.max(1.0)).min(1.0);
        let rho = (-1.0 / self.correlation_s.max(1e-9)).exp();
        let innovation = Normal::new(0.0, self.log_sigma * (1.0 - rho * rho).sqrt())
            .expect("finite sigma");
        // centre the lognormal so the fluctuation has unit mean
        let bias = -0.5 * self.log_sigma * self.log_sigma;

        let mut level = Normal::new(0.0, self.log_sigma)
            .expect("finite sigma")
            .sample(&mut rng);
        let mut faded = false;
        let samples: Vec<(f64, f64)> = (0..self.duration_s.max(1))
            .map(|t| {
                level = rho * level + innovation.sample(&mut rng);
                faded = if faded {
                    rng.random::<f64>() >= leave
                } else {
                    rng.random::<f64>() < enter
                };
                let mut bw = mean * (level + bias).exp();
                if faded {
                    bw *= self.fade_depth;
                }
                (t as f64, bw)
            })
            .collect();
        BandwidthTrace::new(format!("syn{index:04}"), &samples).expect("generated trace is valid")
    }
}

/// Sinusoid-plus-noise series used to study predictor accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinusoidTraceSpec {
    pub samples: usize,
    pub mean: f64,
    pub amplitude: f64,
    pub period: f64,
    pub noise_sd: f64,
}

impl Default for SinusoidTraceSpec {
    fn default() -> Self {
        Self {
            samples: 600,
            mean: 2e6,
            amplitude: 1e6,
            period: 30.0,
            noise_sd: 1e5,
        }
    }
}

impl SinusoidTraceSpec {
    pub fn generate(&self, seed: u64) -> BandwidthTrace {
        let mut rng = stream_rng(seed, 0x7369_6e65, 0);
        let noise = Normal::new(0.0, self.noise_sd).expect("finite noise");
        let phase = rng.random::<f64>() * std::f64::consts::TAU;
        let samples: Vec<(f64, f64)> = (0..self.samples.max(1))
            .map(|t| {
                let x = self.mean
                    + self.amplitude * (std::f64::consts::TAU * t as f64 / self.period + phase).sin()
                    + noise.sample(&mut rng);
                (t as f64, x.max(0.0))
            })
            .collect();
        BandwidthTrace::new(format!("sin{seed}"), &samples).expect("generated trace is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mobility_traces_are_deterministic_and_bounded() {
        let spec = MobilityTraceSpec {
            duration_s: 300,
            ..Default::default()
        };
        let a = spec.generate(7, 3);
        let b = spec.generate(7, 3);
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        for t in &a {
            assert_eq!(t.len(), 300);
            assert!(t.values().iter().all(|&v| v > 0.0 && v.is_finite()));
        }
    }

    #[test]
    fn sinusoid_has_requested_mean() {
        let t = SinusoidTraceSpec {
            samples: 3000,
            ..Default::default()
        }
        .generate(1);
        let mean = t.values().iter().sum::<f64>() / t.len() as f64;
        assert!((mean - 2e6).abs() < 2e4, "{mean}");
    }
}
