//! Run metrics: message counts, bytes moved and the cost-model clock.

/// Counters collected over one run. All counters are monotone while the
/// run executes.
///
/// `bytes_on_wire` sums the serialized size of every message sent
/// (page fetches and write-backs, lock and barrier exchanges, flush
/// publications, diff write-throughs). `lock_grant_payload_bytes` isolates
/// the data movement needed to satisfy consistency-region visibility at
/// lock grants: serialized grant payloads plus any page refetch caused by
/// a grant-delivered invalidation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimMetrics {
    pub page_fetches: u64,
    pub page_writebacks: u64,
    pub invalidations_applied: u64,
    pub diff_entries_applied: u64,
    pub lock_messages: u64,
    pub barrier_messages: u64,
    pub bytes_on_wire: u64,
    pub lock_grant_payload_bytes: u64,
    pub instrumented_stores: u64,
    pub simulated_time_ns: u64,
}

impl SimMetrics {
    pub const CSV_FIELDS: &'static [&'static str] = &[
        "page_fetches",
        "page_writebacks",
        "invalidations_applied",
        "diff_entries_applied",
        "lock_messages",
        "barrier_messages",
        "bytes_on_wire",
        "lock_grant_payload_bytes",
        "instrumented_stores",
        "simulated_time_ns",
    ];

    pub fn csv_values(&self) -> Vec<u64> {
        vec![
            self.page_fetches,
            self.page_writebacks,
            self.invalidations_applied,
            self.diff_entries_applied,
            self.lock_messages,
            self.barrier_messages,
            self.bytes_on_wire,
            self.lock_grant_payload_bytes,
            self.instrumented_stores,
            self.simulated_time_ns,
        ]
    }
}
