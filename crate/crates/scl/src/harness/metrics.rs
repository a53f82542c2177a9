//! Run reports: throughput, latency percentiles, and audit outcomes in
//! shapes that serialize cleanly to JSON or a CSV row.

use serde::Serialize;

/// Latency distribution of completed gets, in virtual microseconds.
#[derive(Debug, Clone, Copy, Default, Serialize, PartialEq)]
pub struct Percentiles {
    pub p50: u64,
    pub p90: u64,
    pub p99: u64,
    pub max: u64,
}

/// Nearest-rank percentiles over raw samples.
pub fn percentiles(samples: &mut [u64]) -> Percentiles {
    if samples.is_empty() {
        return Percentiles::default();
    }
    samples.sort_unstable();
    let at = |p: f64| -> u64 {
        let rank = (p * samples.len() as f64).ceil().max(1.0) as usize;
        samples[rank.min(samples.len()) - 1]
    };
    Percentiles {
        p50: at(0.50),
        p90: at(0.90),
        p99: at(0.99),
        max: *samples.last().unwrap(),
    }
}

/// How the completed gets resolved.
#[derive(Debug, Clone, Copy, Default, Serialize, PartialEq)]
pub struct GetBreakdown {
    /// Answered from the worker's own table.
    pub local: u64,
    /// Answered by a record injected while the get was pending.
    pub injected: u64,
    /// The spill node answered "no such key".
    pub db_miss: u64,
    /// Nothing arrived before the deadline.
    pub timeout: u64,
}

impl GetBreakdown {
    pub fn total(&self) -> u64 {
        self.local + self.injected + self.db_miss + self.timeout
    }

    /// Gets that received an authoritative answer.
    pub fn answered(&self) -> u64 {
        self.local + self.injected + self.db_miss
    }
}

/// Convergence and integrity checks taken after the drain.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct AuditReport {
    /// Every replica table carries the same digest.
    pub digests_equal: bool,
    /// Every record in every chain verifies under the era's keys.
    pub chains_authentic: bool,
    /// Replica state equals an independent replay of the record union.
    pub oracle_matches: bool,
    /// Spill-store state digest equals the replica digest, when deployed.
    pub db_digest_matches: Option<bool>,
    /// Hex digest per node, coordinator first.
    pub node_digests: Vec<String>,
    pub stale_drops: u64,
    pub records_recovered: u64,
    /// Holes still unfilled at the end of the drain.
    pub unrecovered: u64,
}

impl AuditReport {
    pub fn clean(&self) -> bool {
        self.digests_equal
            && self.chains_authentic
            && self.oracle_matches
            && self.db_digest_matches.unwrap_or(true)
    }
}

/// Everything a finished run reports.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RunReport {
    pub seed: u64,
    pub workers: usize,
    /// Virtual time the run covered, seconds.
    pub virtual_secs: f64,
    pub puts_issued: u64,
    pub gets_issued: u64,
    pub gets: GetBreakdown,
    /// Applied updates per virtual second across the cluster.
    pub put_throughput: f64,
    /// Authoritatively answered gets per virtual second.
    pub get_throughput: f64,
    pub get_latency_us: Percentiles,
    /// Highest epoch any node reached.
    pub epochs: u64,
    pub audit: AuditReport,
    pub events: u64,
    pub multicasts: u64,
    pub deliveries: u64,
    pub link_drops: u64,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn csv_header() -> &'static str {
        "seed,workers,virtual_secs,puts_issued,gets_issued,gets_answered,gets_timeout,\
         put_throughput,get_throughput,get_p50_us,get_p99_us,epochs,digests_equal,\
         chains_authentic,oracle_matches,stale_drops,records_recovered,link_drops"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{},{},{},{},{:.1},{:.1},{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.workers,
            self.virtual_secs,
            self.puts_issued,
            self.gets_issued,
            self.gets.answered(),
            self.gets.timeout,
            self.put_throughput,
            self.get_throughput,
            self.get_latency_us.p50,
            self.get_latency_us.p99,
            self.epochs,
            self.audit.digests_equal,
            self.audit.chains_authentic,
            self.audit.oracle_matches,
            self.audit.stale_drops,
            self.audit.records_recovered,
            self.link_drops,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_pick_nearest_rank() {
        let mut s: Vec<u64> = (1..=100).collect();
        let p = percentiles(&mut s);
        assert_eq!(p.p50, 50);
        assert_eq!(p.p90, 90);
        assert_eq!(p.p99, 99);
        assert_eq!(p.max, 100);
        let mut one = vec![7];
        let p = percentiles(&mut one);
        assert_eq!((p.p50, p.max), (7, 7));
        assert_eq!(percentiles(&mut []), Percentiles::default());
    }

    #[test]
    fn csv_row_matches_header_arity() {
        let report = RunReport {
            seed: 1,
            workers: 4,
            virtual_secs: 2.0,
            puts_issued: 100,
            gets_issued: 10,
            gets: GetBreakdown {
                local: 6,
                injected: 2,
                db_miss: 1,
                timeout: 1,
            },
            put_throughput: 50.0,
            get_throughput: 4.5,
            get_latency_us: Percentiles::default(),
            epochs: 5,
            audit: AuditReport {
                digests_equal: true,
                chains_authentic: true,
                oracle_matches: true,
                db_digest_matches: None,
                node_digests: vec![],
                stale_drops: 0,
                records_recovered: 0,
                unrecovered: 0,
            },
            events: 0,
            multicasts: 0,
            deliveries: 0,
            link_drops: 0,
        };
        let headers = RunReport::csv_header().split(',').count();
        let fields = report.to_csv_row().split(',').count();
        assert_eq!(headers, fields);
        assert!(report.to_json().contains("\"put_throughput\""));
    }
}
