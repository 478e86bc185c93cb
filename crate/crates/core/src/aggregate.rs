//! Neighbor feature gather from a banked point buffer.
//!
//! A row's `k_max` fetches issue left to right in groups of `concurrency`
//! per cycle, so conflicting fetches always belong to the same query. Without
//! elision, losers retry; with elision, a loser takes the data returned for
//! the winner in its bank, which amounts to replicating one of the query's
//! other neighbors.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::memsim::{arbitrate, bank_of, BankConfig, Outcome, PhaseStats, Request};
use crate::split_search::NeighborMatrix;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatherResult {
    pub k_max: usize,
    /// Row-major effective indices after elision.
    pub effective: Vec<u32>,
    pub substituted: Vec<bool>,
    pub substitutions: u64,
    pub stats: PhaseStats,
}

impl GatherResult {
    pub fn row(&self, i: usize) -> &[u32] {
        &self.effective[i * self.k_max..(i + 1) * self.k_max]
    }

    pub fn query_count(&self) -> usize {
        self.effective.len().checked_div(self.k_max).unwrap_or(0)
    }

    /// Lost arbitration rounds over fetch requests.
    pub fn conflict_rate(&self) -> f64 {
        if self.stats.requests == 0 {
            0.0
        } else {
            self.stats.conflicts_total as f64 / self.stats.requests as f64
        }
    }

    /// Substituted entries over all entries.
    pub fn distortion(&self) -> f64 {
        if self.effective.is_empty() {
            0.0
        } else {
            self.substitutions as f64 / self.effective.len() as f64
        }
    }

    /// `qid,slot,requested_index,effective_index,substituted`
    pub fn write_csv<W: Write>(&self, matrix: &NeighborMatrix, mut w: W) -> io::Result<()> {
        writeln!(w, "{GATHER_CSV_HEADER}")?;
        for qid in 0..self.query_count() {
            for (slot, (req, eff)) in matrix.row(qid).iter().zip(self.row(qid)).enumerate() {
                let sub = self.substituted[qid * self.k_max + slot] as u8;
                writeln!(w, "{qid},{slot},{req},{eff},{sub}")?;
            }
        }
        Ok(())
    }
}

pub const GATHER_CSV_HEADER: &str = "qid,slot,requested_index,effective_index,substituted";

pub fn gather(matrix: &NeighborMatrix, banks: &BankConfig, elide: bool) -> GatherResult {
    let k = matrix.k_max();
    let c = banks.concurrency as usize;
    let mut effective = Vec::with_capacity(matrix.query_count() * k);
    let mut substituted = Vec::with_capacity(matrix.query_count() * k);
    let mut stats = PhaseStats::default();
    let mut requests: Vec<Option<Request>> = Vec::with_capacity(c);
    for qid in 0..matrix.query_count() {
        let row = matrix.row(qid);
        for group in row.chunks(c) {
            let mut out: Vec<Option<u32>> = vec![None; group.len()];
            let mut subs = vec![false; group.len()];
            while out.iter().any(Option::is_none) {
                requests.clear();
                requests.extend(group.iter().zip(&out).map(|(&idx, done)| {
                    done.is_none().then(|| Request {
                        bank: bank_of(idx, banks),
                        node: idx,
                        level: 1,
                    })
                }));
                // level 1 > h_e 0: every loser is elidable when elision is on
                let outcomes = arbitrate(&requests, 0, elide);
                let mut winner_of_bank = [None; 32];
                for (req, o) in requests.iter().zip(&outcomes) {
                    if let (Some(r), Some(Outcome::Granted)) = (req, o) {
                        winner_of_bank[r.bank as usize] = Some(r.node);
                    }
                }
                let mut lost = false;
                for (slot, (req, o)) in requests.iter().zip(&outcomes).enumerate() {
                    let (Some(r), Some(o)) = (req, o) else { continue };
                    stats.requests += 1;
                    match o {
                        Outcome::Granted => {
                            out[slot] = Some(r.node);
                            stats.sram_accesses += 1;
                        }
                        Outcome::Stalled => {
                            stats.conflicts_total += 1;
                            stats.stall_cycles += 1;
                            lost = true;
                        }
                        Outcome::Elided => {
                            out[slot] = winner_of_bank[r.bank as usize];
                            subs[slot] = true;
                            stats.conflicts_total += 1;
                            stats.conflicts_elided += 1;
                            stats.elided_accesses += 1;
                            lost = true;
                        }
                    }
                }
                stats.conflicted_cycles += lost as u64;
                stats.cycles += 1;
            }
            effective.extend(out.into_iter().map(|v| v.expect("every slot resolved")));
            substituted.extend(subs);
        }
    }
    let substitutions = substituted.iter().filter(|&&s| s).count() as u64;
    GatherResult {
        k_max: k,
        effective,
        substituted,
        substitutions,
        stats,
    }
}

/// Fraction of entries an elided gather replaces.
pub fn gather_distortion(matrix: &NeighborMatrix, banks: &BankConfig) -> f64 {
    gather(matrix, banks, true).distortion()
}
