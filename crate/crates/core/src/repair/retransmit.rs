//! Chunk-level selective retransmission under a per-round budget.

use super::fec::Chunk;

/// Anything that can re-send named chunks, e.g. the simulated client link.
/// `resend` returns one slot per requested id, `None` for a chunk lost again.
pub trait ChunkSource {
    fn resend(&mut self, ids: &[usize]) -> Vec<Option<Chunk>>;
}

/// Retransmissions still allowed this round, and how many were spent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetransmissionBudget {
    pub remaining: usize,
    pub used: usize,
}

impl RetransmissionBudget {
    pub fn new(limit: usize) -> Self {
        Self {
            remaining: limit,
            used: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Retransmission {
    /// Chunk ids actually re-sent (a prefix of the request when the budget ran out).
    pub sent: Vec<usize>,
    /// Ids that were not re-sent for lack of budget.
    pub skipped: Vec<usize>,
    /// Re-received chunks that passed their CRC.
    pub received: Vec<Chunk>,
}

impl Retransmission {
    pub fn complete(&self) -> bool {
        self.skipped.is_empty() && self.received.len() == self.sent.len()
    }
}

/// Re-send up to `budget.remaining` of `ids` through `source`.
pub fn request_retransmission(
    ids: &[usize],
    budget: &mut RetransmissionBudget,
    source: &mut dyn ChunkSource,
) -> Retransmission {
    let n = ids.len().min(budget.remaining);
    let (sent, skipped) = ids.split_at(n);
    budget.remaining -= n;
    budget.used += n;
    let received = if sent.is_empty() {
        Vec::new()
    } else {
        source
            .resend(sent)
            .into_iter()
            .flatten()
            .filter(Chunk::crc_ok)
            .collect()
    };
    Retransmission {
        sent: sent.to_vec(),
        skipped: skipped.to_vec(),
        received,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{apply_channel, ChannelParams};
    use crate::repair::fec::{fec_encode, ChunkedUpdate};
    use crate::update::ModelUpdate;

    struct Link {
        encoded: ChunkedUpdate,
        params: ChannelParams,
        calls: u64,
    }

    impl ChunkSource for Link {
        fn resend(&mut self, ids: &[usize]) -> Vec<Option<Chunk>> {
            self.calls += 1;
            let chunks: Vec<Chunk> = ids
                .iter()
                .map(|&i| self.encoded.chunks[i].clone())
                .collect();
            apply_channel(&chunks, &self.params, self.calls)
        }
    }

    fn link(loss: f64, n: usize) -> Link {
        let w = ModelUpdate::new((0..n).map(|i| i as f32).collect(), 0, 0);
        Link {
            encoded: fec_encode(&w, 1, 2).unwrap(),
            params: ChannelParams::lossy(loss).unwrap(),
            calls: 0,
        }
    }

    #[test]
    fn zero_budget_sends_nothing() {
        let mut l = link(0.0, 4);
        let mut budget = RetransmissionBudget::new(0);
        let r = request_retransmission(&[0, 1], &mut budget, &mut l);
        assert!(r.sent.is_empty() && r.received.is_empty());
        assert_eq!(r.skipped, vec![0, 1]);
        assert_eq!(l.calls, 0);
    }

    #[test]
    fn lossless_retry_recovers_exactly() {
        let mut l = link(0.0, 4);
        let mut budget = RetransmissionBudget::new(5);
        let r = request_retransmission(&[2], &mut budget, &mut l);
        assert!(r.complete());
        assert_eq!(r.received[0], l.encoded.chunks[2]);
        assert_eq!(
            budget,
            RetransmissionBudget {
                remaining: 4,
                used: 1
            }
        );
    }

    #[test]
    fn budget_truncates_requests() {
        let mut l = link(0.0, 8);
        let mut budget = RetransmissionBudget::new(3);
        let r = request_retransmission(&[0, 1, 2, 3, 4], &mut budget, &mut l);
        assert_eq!(r.sent, vec![0, 1, 2]);
        assert_eq!(r.skipped, vec![3, 4]);
        assert_eq!(budget.remaining, 0);
    }

    #[test]
    fn lossy_retry_recovery_rate() {
        let mut l = link(0.1, 1000);
        let ids: Vec<usize> = (0..1000).collect();
        let mut budget = RetransmissionBudget::new(1000);
        let r = request_retransmission(&ids, &mut budget, &mut l);
        let rate = r.received.len() as f64 / 1000.0;
        assert!((rate - 0.9).abs() <= 0.03, "{rate}");
    }
}
