//! Synthetic workload profiles and their per-request resource demands.
//!
//! A profile mirrors the three knobs of the autoscale-go sample app:
//! `bloat` (MB allocated per request), `prime` (upper bound of a prime
//! computation, a CPU proxy) and `sleep` (pure waiting in milliseconds).
//! The simulator never executes any of this; profiles are mapped onto an
//! affine demand model by [`service_demand`].

use serde::{Deserialize, Serialize};

/// Roman-numeral labels for the builtin profile set, in id order.
pub const PROFILE_IDS: [&str; 17] = [
    "I", "II", "III", "IV", "V", "VI", "VII", "VIII", "IX", "X", "XI", "XII", "XIII", "XIV",
    "XV", "XVI", "XVII",
];

/// One synthetic workload: memory, CPU and waiting parameters per request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadProfile {
    /// Numeric label, 1-based. Builtin profiles use 1..=17 (printed as Roman numerals).
    #[serde(default)]
    pub id: u8,
    /// Megabytes resident per in-flight request.
    pub bloat_mb: u32,
    /// Upper bound of the per-request prime computation (CPU work proxy).
    pub prime_n: u32,
    /// Milliseconds of pure waiting per request.
    pub sleep_ms: u32,
}

impl WorkloadProfile {
    pub fn new(id: u8, bloat_mb: u32, prime_n: u32, sleep_ms: u32) -> Self {
        Self { id, bloat_mb, prime_n, sleep_ms }
    }

    /// Roman-numeral label ("VII") for builtin ids, decimal otherwise.
    pub fn label(&self) -> String {
        match self.id {
            1..=17 => PROFILE_IDS[self.id as usize - 1].to_string(),
            other => other.to_string(),
        }
    }
}

/// Free parameters mapping profile knobs onto simulator demand.
///
/// The defaults are calibration constants for the desk-scale simulator, not
/// measurements of any real cluster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConstants {
    /// Fixed CPU milliseconds per request (request handling overhead).
    pub cpu_base_ms: f64,
    /// CPU milliseconds per unit of `prime_n`.
    pub cpu_ms_per_unit_prime: f64,
    /// Fixed resident megabytes per in-flight request on top of `bloat_mb`.
    pub mem_overhead_mb: f64,
}

impl Default for CalibrationConstants {
    fn default() -> Self {
        Self { cpu_base_ms: 1.0, cpu_ms_per_unit_prime: 0.001, mem_overhead_mb: 8.0 }
    }
}

/// What one request costs the pod that serves it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServiceDemand {
    /// CPU time on a reference core, in milliseconds.
    pub cpu_ms: f64,
    /// Resident megabytes held while the request is in flight.
    pub mem_mb: f64,
    /// Non-CPU waiting, in milliseconds.
    pub wait_ms: f64,
}

/// Maps a profile onto per-request demand. Deterministic and affine:
/// `cpu = base + k * prime`, `mem = overhead + bloat`, `wait = sleep`.
pub fn service_demand(profile: &WorkloadProfile, calib: &CalibrationConstants) -> ServiceDemand {
    ServiceDemand {
        cpu_ms: calib.cpu_base_ms + calib.cpu_ms_per_unit_prime * f64::from(profile.prime_n),
        mem_mb: calib.mem_overhead_mb + f64::from(profile.bloat_mb),
        wait_ms: f64::from(profile.sleep_ms),
    }
}

/// The 17 benchmark profiles, in id order (no-op first, 1 GB bloat last).
pub fn builtin_profiles() -> Vec<WorkloadProfile> {
    const ROWS: [(u32, u32, u32); 17] = [
        (0, 0, 0),
        (128, 0, 0),
        (128, 1000, 0),
        (128, 10_000, 0),
        (128, 100_000, 0),
        (128, 1000, 1000),
        (128, 10_000, 1000),
        (128, 100_000, 1000),
        (256, 0, 0),
        (256, 1000, 0),
        (256, 10_000, 0),
        (256, 100_000, 0),
        (256, 1000, 1000),
        (256, 10_000, 1000),
        (256, 100_000, 1000),
        (512, 0, 0),
        (1024, 0, 0),
    ];
    ROWS.iter()
        .enumerate()
        .map(|(i, &(bloat, prime, sleep))| WorkloadProfile::new(i as u8 + 1, bloat, prime, sleep))
        .collect()
}

/// Looks up a builtin profile by its Roman-numeral label, e.g. `"VII"`.
pub fn builtin_profile(label: &str) -> Option<WorkloadProfile> {
    let idx = PROFILE_IDS.iter().position(|&r| r.eq_ignore_ascii_case(label))?;
    Some(builtin_profiles()[idx])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn calib() -> CalibrationConstants {
        CalibrationConstants { cpu_base_ms: 1.0, cpu_ms_per_unit_prime: 0.001, mem_overhead_mb: 8.0 }
    }

    #[test]
    fn builtin_set_matches_benchmark_table() {
        let profiles = builtin_profiles();
        assert_eq!(profiles.len(), 17);
        let vii = profiles[6];
        assert_eq!((vii.bloat_mb, vii.prime_n, vii.sleep_ms), (128, 10_000, 1000));
        let i = profiles[0];
        assert_eq!((i.bloat_mb, i.prime_n, i.sleep_ms), (0, 0, 0));
        let x = profiles[9];
        assert_eq!((x.bloat_mb, x.prime_n, x.sleep_ms), (256, 1000, 0));
        for (idx, p) in profiles.iter().enumerate() {
            assert_eq!(p.id as usize, idx + 1);
        }
    }

    #[test]
    fn roman_lookup() {
        assert_eq!(builtin_profile("VII").unwrap().id, 7);
        assert_eq!(builtin_profile("xvii").unwrap().bloat_mb, 1024);
        assert!(builtin_profile("XVIII").is_none());
        assert_eq!(builtin_profiles()[9].label(), "X");
    }

    #[test]
    fn demand_of_noop_profile_is_base_constants() {
        let d = service_demand(&WorkloadProfile::new(1, 0, 0, 0), &calib());
        assert_eq!(d.cpu_ms, 1.0);
        assert_eq!(d.mem_mb, 8.0);
        assert_eq!(d.wait_ms, 0.0);
    }

    #[test]
    fn demand_is_affine_in_profile_knobs() {
        let d = service_demand(&WorkloadProfile::new(7, 128, 10_000, 1000), &calib());
        assert_eq!(d.cpu_ms, 11.0);
        assert_eq!(d.mem_mb, 136.0);
        assert_eq!(d.wait_ms, 1000.0);

        let d = service_demand(&WorkloadProfile::new(12, 256, 100_000, 0), &calib());
        assert_eq!(d.cpu_ms, 101.0);
        assert_eq!(d.mem_mb, 264.0);
        assert_eq!(d.wait_ms, 0.0);
    }

    proptest! {
        #[test]
        fn demand_is_monotone_in_every_knob(
            bloat in 0u32..2048, prime in 0u32..200_000, sleep in 0u32..5000,
            d_bloat in 0u32..512, d_prime in 0u32..50_000, d_sleep in 0u32..2000,
        ) {
            let c = calib();
            let lo = service_demand(&WorkloadProfile::new(0, bloat, prime, sleep), &c);
            let hi = service_demand(
                &WorkloadProfile::new(0, bloat + d_bloat, prime + d_prime, sleep + d_sleep),
                &c,
            );
            prop_assert!(hi.cpu_ms >= lo.cpu_ms);
            prop_assert!(hi.mem_mb >= lo.mem_mb);
            prop_assert!(hi.wait_ms >= lo.wait_ms);
            prop_assert_eq!(lo.wait_ms, f64::from(sleep));
        }
    }
}
