//! The simulated edge -> fog link of one client in one round.
//!
//! The client adds link noise to its update before encoding (this noisy
//! vector is what it "sent" and the reference for reconstruction error),
//! encodes it with parity, and the channel then corrupts the data payloads
//! without tripping the per-hop CRC and erases chunks at the client's loss
//! rate. Retransmitted chunks are clean copies that cross the lossy channel
//! again.

use rand::Rng;

use crate::channel::{
    apply_channel, inject, ChannelParams, CorruptionKind, CorruptionSpec, GroundTruthMask,
};
use crate::config::CorruptionConfig;
use crate::error::Result;
use crate::privacy::add_gaussian_noise;
use crate::repair::{fec_encode, Chunk, ChunkSource, ChunkedUpdate};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::stats::robust_scale_or_rms;
use crate::update::ModelUpdate;

/// Spec for one update at `rate`, with the random-noise and heavy-tail
/// scales taken relative to the update's robust scale.
pub fn spec_at_rate(
    kind: CorruptionKind,
    cfg: &CorruptionConfig,
    w: &ModelUpdate,
    seed: u64,
) -> CorruptionSpec {
    let d = w.dim();
    let scale = robust_scale_or_rms(&w.values);
    let len = ((cfg.rate * d as f64).round() as usize).clamp(1, d);
    match kind {
        CorruptionKind::None => CorruptionSpec::none(),
        CorruptionKind::RandomNoise => {
            CorruptionSpec::random_noise(cfg.rate, cfg.noise_scale * scale, seed)
        }
        CorruptionKind::Burst => CorruptionSpec::burst(len, seed),
        CorruptionKind::MissingSegment => CorruptionSpec::missing(len, seed),
        CorruptionKind::HeavyTail => {
            CorruptionSpec::heavy_tail(cfg.rate, cfg.spike_scale * scale, seed)
        }
        CorruptionKind::SignFlip => CorruptionSpec::sign_flip(cfg.rate, seed),
    }
}

/// The corruption drawn for `(client, round)`: one kind uniformly from the
/// configured mix, or none when the rate is zero.
pub fn draw_corruption(cfg: &CorruptionConfig, w: &ModelUpdate, seed: u64) -> CorruptionSpec {
    if cfg.rate <= 0.0 {
        return CorruptionSpec::none();
    }
    let client = w.client_id as u64;
    let round = w.round as u64;
    let mut rng = stream_rng(seed, client, round, Stream::CorruptionSchedule);
    let kind = cfg.types[rng.random_range(0..cfg.types.len())];
    let stream = match kind {
        CorruptionKind::None | CorruptionKind::RandomNoise => Stream::RandomNoise,
        CorruptionKind::Burst => Stream::Burst,
        CorruptionKind::MissingSegment => Stream::Missing,
        CorruptionKind::HeavyTail => Stream::HeavyTail,
        CorruptionKind::SignFlip => Stream::SignFlip,
    };
    spec_at_rate(
        kind,
        cfg,
        w,
        derive_seed(seed, client, round, stream as u64),
    )
}

/// Add `N(0, variance)` link noise at the transmitter.
pub fn add_link_noise(w: &ModelUpdate, variance: f64, seed: u64) -> ModelUpdate {
    if variance <= 0.0 {
        return w.clone();
    }
    let mut v: Vec<f64> = w.values.iter().map(|&x| x as f64).collect();
    let mut rng = stream_rng(
        seed,
        w.client_id as u64,
        w.round as u64,
        Stream::TransmitNoise,
    );
    add_gaussian_noise(&mut v, variance.sqrt(), &mut rng);
    w.with_values(v.into_iter().map(|x| x as f32).collect())
}

#[derive(Debug, Clone)]
pub struct Transmission {
    /// What the client sent (after link noise), the repair reference.
    pub sent: ModelUpdate,
    /// Clean encoding of `sent`; retransmissions copy from here.
    pub encoded: ChunkedUpdate,
    pub corrupted: ModelUpdate,
    pub mask: GroundTruthMask,
    pub received: Vec<Option<Chunk>>,
}

impl Transmission {
    pub fn kind(&self) -> CorruptionKind {
        self.mask.kind()
    }
}

pub fn transmit(
    sent: &ModelUpdate,
    spec: &CorruptionSpec,
    block_len: usize,
    group_size: usize,
    packet_loss: f64,
    seed: u64,
) -> Result<Transmission> {
    let encoded = fec_encode(sent, block_len, group_size)?;
    let (corrupted, mask) = inject(sent, spec)?;
    let on_wire = encoded.with_data_values(&corrupted.values)?;
    let channel = ChannelParams::lossy(packet_loss)?;
    let link_seed = derive_seed(
        seed,
        sent.client_id as u64,
        sent.round as u64,
        Stream::Channel as u64,
    );
    let received = apply_channel(&on_wire.chunks, &channel, link_seed);
    Ok(Transmission {
        sent: sent.clone(),
        encoded,
        corrupted,
        mask,
        received,
    })
}

/// The client end of the link, answering the fog's retransmission requests.
pub struct ClientLink<'a> {
    encoded: &'a ChunkedUpdate,
    channel: ChannelParams,
    seed: u64,
    calls: u64,
    /// Chunks re-sent so far.
    pub retries: usize,
}

impl<'a> ClientLink<'a> {
    pub fn new(encoded: &'a ChunkedUpdate, packet_loss: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            encoded,
            channel: ChannelParams::lossy(packet_loss)?,
            seed,
            calls: 0,
            retries: 0,
        })
    }
}

impl ChunkSource for ClientLink<'_> {
    fn resend(&mut self, ids: &[usize]) -> Vec<Option<Chunk>> {
        let g = &self.encoded.geometry;
        let chunks: Vec<Chunk> = ids
            .iter()
            .filter_map(|&id| self.encoded.chunks.get(id).cloned())
            .collect();
        let seed = derive_seed(
            self.seed,
            g.client_id as u64,
            ((g.round as u64) << 32) | self.calls,
            Stream::Retransmit as u64,
        );
        self.calls += 1;
        self.retries += chunks.len();
        apply_channel(&chunks, &self.channel, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::repair::fec_decode;

    fn update(d: usize) -> ModelUpdate {
        ModelUpdate::new(
            (0..d).map(|j| ((j as f32) * 0.37).sin() * 0.05).collect(),
            3,
            2,
        )
    }

    #[test]
    fn lossless_clean_transmission_decodes_to_sent() {
        let w = update(512);
        let t = transmit(&w, &CorruptionSpec::none(), 64, 8, 0.0, 1).unwrap();
        let dec = fec_decode(&t.encoded.geometry, &t.received).unwrap();
        assert_eq!(dec.values, w.values);
        assert!(t.mask.is_empty());
    }

    #[test]
    fn injected_corruption_passes_crc() {
        let w = update(512);
        let t = transmit(&w, &CorruptionSpec::burst(40, 5), 64, 8, 0.0, 1).unwrap();
        assert!(t.received.iter().flatten().all(Chunk::crc_ok));
        let dec = fec_decode(&t.encoded.geometry, &t.received).unwrap();
        assert_eq!(dec.values, t.corrupted.values);
        assert_eq!(t.kind(), CorruptionKind::Burst);
    }

    #[test]
    fn retransmission_returns_clean_chunks_and_counts() {
        let w = update(512);
        let t = transmit(&w, &CorruptionSpec::burst(40, 5), 64, 8, 0.0, 1).unwrap();
        let mut link = ClientLink::new(&t.encoded, 0.0, 9).unwrap();
        let got = link.resend(&[0, 3]);
        assert_eq!(link.retries, 2);
        assert_eq!(got[1].as_ref().unwrap(), &t.encoded.chunks[3]);
    }

    #[test]
    fn corruption_draw_respects_rate_and_mix() {
        let mut cfg = ExperimentConfig::with_seed(0).corruption;
        let w = update(512);
        cfg.rate = 0.0;
        assert_eq!(draw_corruption(&cfg, &w, 4).kind, CorruptionKind::None);
        cfg.rate = 0.1;
        cfg.types = vec![CorruptionKind::Burst];
        let spec = draw_corruption(&cfg, &w, 4);
        assert_eq!(spec.kind, CorruptionKind::Burst);
        assert_eq!(spec.burst_len, 51);
        assert_eq!(spec, draw_corruption(&cfg, &w, 4));
    }

    #[test]
    fn link_noise_has_requested_variance() {
        let w = ModelUpdate::new(vec![0.0; 20_000], 1, 1);
        let n = add_link_noise(&w, 1e-4, 3);
        let var = n.values.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 20_000.0;
        assert!((var - 1e-4).abs() < 5e-6);
        assert_eq!(add_link_noise(&w, 0.0, 3), w);
    }
}
