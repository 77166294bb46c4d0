use bitvec::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::feed::{key_line, FeedMedium, LinkStatus};
use super::frame::{encode_qix_frame, QixFrame, QixStatus};
use super::profile::{DeliveryMode, DisturbanceWindow, LinkProfile};
use crate::keycore::{Bits, Block, KEY_BITS, KEY_BYTES};

/// Output of one secret-key cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleOutput {
    pub key_bits: Bits,
    pub qber_pct: f64,
    pub skr_bps: f64,
}

const QBER_CEILING: f64 = 50.0;

fn gaussian<R: Rng + ?Sized>(rng: &mut R, mean: f64, std: f64) -> f64 {
    if std == 0.0 {
        return mean;
    }
    Normal::new(mean, std).expect("std validated >= 0").sample(rng)
}

/// Gaussian restricted to [0, 50) by rejection, clamped as a last resort.
fn truncated_qber<R: Rng + ?Sized>(rng: &mut R, mean: f64, std: f64) -> f64 {
    for _ in 0..64 {
        let q = gaussian(rng, mean, std);
        if (0.0..QBER_CEILING).contains(&q) {
            return q;
        }
    }
    mean.clamp(0.0, QBER_CEILING - 1e-9)
}

/// Samples one cycle of a link: SKR and QBER from Gaussians shifted by the
/// active disturbance windows, then `round(skr * period)` random key bits.
pub fn sample_cycle<R: Rng + ?Sized>(
    profile: &LinkProfile,
    windows: &[DisturbanceWindow],
    now_s: f64,
    rng: &mut R,
) -> CycleOutput {
    let active = windows.iter().filter(|w| w.is_active(profile.link_index, now_s));
    let (qber_add, skr_scale) = active.fold((0.0, 1.0), |(q, s), w| (q + w.qber_add_pct, s * w.skr_scale));

    let qber_pct = truncated_qber(rng, profile.qber_mean_pct + qber_add, profile.qber_std_pct);
    let skr_bps = gaussian(rng, profile.skr_mean_bps, profile.skr_std_bps).max(0.0) * skr_scale;
    let n_bits = (skr_bps * profile.cycle_period_s).round() as usize;

    let mut bytes = vec![0u8; n_bits.div_ceil(8)];
    rng.fill_bytes(&mut bytes);
    let mut key_bits = Bits::from_vec(bytes);
    key_bits.truncate(n_bits);
    CycleOutput { key_bits, qber_pct, skr_bps }
}

struct Sink {
    medium: Box<dyn FeedMedium>,
    /// Bytes not yet written because the medium failed.
    backlog: Vec<u8>,
    stale: bool,
}

/// Emulated QKD system for one link, writing identical output to every
/// attached medium (one per link end).
pub struct LinkEmulator {
    profile: LinkProfile,
    rng: ChaCha8Rng,
    pending: Bits,
    next_frame_id: u32,
    delivered: Vec<Block>,
    sinks: Vec<Sink>,
    cycles: u64,
    sampled_bits: u64,
    delivered_keys: u64,
    write_failures: u64,
    last: Option<(f64, f64)>,
}

impl std::fmt::Debug for LinkEmulator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LinkEmulator")
            .field("link", &self.profile.link_index)
            .field("cycles", &self.cycles)
            .field("delivered_keys", &self.delivered_keys)
            .finish_non_exhaustive()
    }
}

impl LinkEmulator {
    pub fn new(profile: LinkProfile, seed: Block, media: Vec<Box<dyn FeedMedium>>) -> Self {
        let sinks = media.into_iter().map(|medium| Sink { medium, backlog: Vec::new(), stale: false }).collect();
        Self {
            profile,
            rng: ChaCha8Rng::from_seed(seed),
            pending: Bits::new(),
            next_frame_id: 0,
            delivered: Vec::new(),
            sinks,
            cycles: 0,
            sampled_bits: 0,
            delivered_keys: 0,
            write_failures: 0,
            last: None,
        }
    }

    /// Per-link RNG seed, independent of how many other links exist.
    pub fn seed_for(scenario_seed: u64, link_index: u8) -> Block {
        let mut h = Sha256::new();
        h.update(b"qkd-link-rng");
        h.update(scenario_seed.to_be_bytes());
        h.update([link_index]);
        h.finalize().into()
    }

    pub fn profile(&self) -> &LinkProfile {
        &self.profile
    }

    pub fn cycles(&self) -> u64 {
        self.cycles
    }

    /// Completion time of the next cycle.
    pub fn next_cycle_time(&self) -> f64 {
        self.profile.cycle_time(self.cycles)
    }

    pub fn sampled_bits(&self) -> u64 {
        self.sampled_bits
    }

    pub fn delivered_keys(&self) -> u64 {
        self.delivered_keys
    }

    pub fn pending_bits(&self) -> usize {
        self.pending.len()
    }

    pub fn write_failures(&self) -> u64 {
        self.write_failures
    }

    /// SKR and QBER of the most recent cycle.
    pub fn last_cycle(&self) -> Option<(f64, f64)> {
        self.last
    }

    /// Samples and delivers the next cycle.
    pub fn run_cycle(&mut self, windows: &[DisturbanceWindow]) -> CycleOutput {
        let now = self.next_cycle_time();
        let cycle = sample_cycle(&self.profile, windows, now, &mut self.rng);
        self.cycles += 1;
        self.emit_delivery(&cycle);
        cycle
    }

    /// Samples the next cycle and updates all bookkeeping without touching
    /// the media. A restarted process uses this to catch up with output it
    /// already wrote before it went down.
    pub fn replay_cycle(&mut self, windows: &[DisturbanceWindow]) -> CycleOutput {
        let now = self.next_cycle_time();
        let cycle = sample_cycle(&self.profile, windows, now, &mut self.rng);
        self.cycles += 1;
        let keys = self.cut_keys(&cycle);
        match self.profile.delivery {
            DeliveryMode::PacketStream => self.next_frame_id = self.next_frame_id.wrapping_add(keys.len() as u32),
            DeliveryMode::RewriteFile => self.delivered.extend(keys),
            DeliveryMode::AppendFile => {}
        }
        cycle
    }

    fn cut_keys(&mut self, cycle: &CycleOutput) -> Vec<Block> {
        self.sampled_bits += cycle.key_bits.len() as u64;
        self.last = Some((cycle.skr_bps, cycle.qber_pct));
        self.pending.extend_from_bitslice(&cycle.key_bits);
        let whole = self.pending.len() / KEY_BITS;
        let keys: Vec<Block> = self
            .pending
            .chunks_exact(KEY_BITS)
            .map(|c| {
                let mut k = [0u8; KEY_BYTES];
                k.view_bits_mut::<Msb0>().copy_from_bitslice(c);
                k
            })
            .collect();
        self.pending.drain(..whole * KEY_BITS);
        self.delivered_keys += keys.len() as u64;
        keys
    }

    /// Cuts whole keys from the cycle's bits and writes them in the link's
    /// delivery format. Leftover bits wait for the next cycle; failed
    /// writes are retried on the next call.
    pub fn emit_delivery(&mut self, cycle: &CycleOutput) {
        let keys = self.cut_keys(cycle);

        let status = match self.profile.delivery {
            DeliveryMode::PacketStream => LinkStatus::default(),
            _ => LinkStatus { skr_bps: Some(cycle.skr_bps), qber_pct: Some(cycle.qber_pct) },
        };
        match self.profile.delivery {
            DeliveryMode::PacketStream => {
                let flag = if cycle.qber_pct > self.profile.compromise_threshold_pct {
                    QixStatus::Compromised
                } else {
                    QixStatus::Secure
                };
                let mut bytes = Vec::with_capacity(keys.len() * super::QIX_FRAME_LEN);
                for key in keys {
                    let frame = QixFrame { key_id: self.next_frame_id, key, status: flag };
                    self.next_frame_id = self.next_frame_id.wrapping_add(1);
                    bytes.extend_from_slice(&encode_qix_frame(&frame));
                }
                self.append_all(&bytes);
            }
            DeliveryMode::AppendFile => {
                let text: String = keys.iter().map(key_line).collect();
                self.append_all(text.as_bytes());
            }
            DeliveryMode::RewriteFile => {
                let changed = !keys.is_empty();
                self.delivered.extend(keys);
                let text: String = self.delivered.iter().map(key_line).collect();
                for sink in &mut self.sinks {
                    if changed || sink.stale {
                        match sink.medium.replace(text.as_bytes()) {
                            Ok(()) => sink.stale = false,
                            Err(_) => {
                                sink.stale = true;
                                self.write_failures += 1;
                            }
                        }
                    }
                }
            }
        }
        for sink in &mut self.sinks {
            if sink.medium.set_status(status).is_err() {
                self.write_failures += 1;
            }
        }
    }

    fn append_all(&mut self, bytes: &[u8]) {
        for sink in &mut self.sinks {
            sink.backlog.extend_from_slice(bytes);
            if sink.backlog.is_empty() {
                continue;
            }
            match sink.medium.append(&sink.backlog) {
                Ok(()) => sink.backlog.clear(),
                Err(_) => self.write_failures += 1,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keycore::{KeyStatus, KeyTable, TableScope};
    use crate::qkdlink::{FeedReader, MemoryMedium};
    use std::io;

    fn profile(n: u8) -> LinkProfile {
        LinkProfile::table1(n).unwrap()
    }

    #[test]
    fn degenerate_distribution_is_exact() {
        let mut p = profile(2);
        p.skr_std_bps = 0.0;
        p.qber_std_pct = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let c = sample_cycle(&p, &[], 0.0, &mut rng);
            assert_eq!(c.skr_bps, 1310.0);
            assert_eq!(c.qber_pct, 3.9);
            assert_eq!(c.key_bits.len(), 6550);
        }
    }

    #[test]
    fn link2_skr_mean_within_three_sigma() {
        let p = profile(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 1000;
        let mean = (0..n).map(|_| sample_cycle(&p, &[], 0.0, &mut rng).skr_bps).sum::<f64>() / n as f64;
        assert!((mean - 1310.0).abs() <= 3.0 * 150.0 / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn full_outage_window_emits_nothing() {
        let p = profile(3);
        let w = DisturbanceWindow { link_index: 3, start_s: 0.0, end_s: 100.0, qber_add_pct: 0.0, skr_scale: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = sample_cycle(&p, &[w], 50.0, &mut rng);
        assert!(c.key_bits.is_empty());
        assert_eq!(c.skr_bps, 0.0);
    }

    #[test]
    fn samples_stay_in_range() {
        let mut p = profile(2);
        p.qber_mean_pct = 1.0;
        p.qber_std_pct = 20.0;
        p.skr_std_bps = 5000.0;
        let w = DisturbanceWindow { link_index: 2, start_s: 0.0, end_s: 1.0, qber_add_pct: 45.0, skr_scale: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for i in 0..2000 {
            let c = sample_cycle(&p, std::slice::from_ref(&w), (i % 2) as f64 * 0.5, &mut rng);
            assert!((0.0..50.0).contains(&c.qber_pct));
            assert!(c.skr_bps >= 0.0);
        }
    }

    fn cycle(bits: usize, qber: f64) -> CycleOutput {
        CycleOutput { key_bits: Bits::repeat(true, bits), qber_pct: qber, skr_bps: bits as f64 / 2.0 }
    }

    fn emulator(n: u8) -> (LinkEmulator, MemoryMedium) {
        let m = MemoryMedium::new();
        (LinkEmulator::new(profile(n), [0; 32], vec![Box::new(m.clone())]), m)
    }

    #[test]
    fn packet_stream_frames_secure() {
        let (mut em, m) = emulator(1);
        em.emit_delivery(&cycle(512, 2.0));
        let bytes = m.snapshot();
        assert_eq!(bytes.len(), 2 * super::super::QIX_FRAME_LEN);
        assert_eq!(bytes[40], 0x00);
        assert_eq!(bytes[45 + 40], 0x00);
    }

    #[test]
    fn packet_stream_frames_compromised_above_threshold() {
        let (mut em, m) = emulator(1);
        em.emit_delivery(&cycle(512, 14.0));
        let bytes = m.snapshot();
        assert_eq!(bytes.len(), 90);
        assert_eq!(bytes[40], 0x01);
        assert_eq!(bytes[85], 0x01);
    }

    #[test]
    fn append_file_grows_without_touching_old_lines() {
        let (mut em, m) = emulator(2);
        em.emit_delivery(&cycle(512, 2.0));
        let first = m.snapshot();
        assert_eq!(first.iter().filter(|&&b| b == b'\n').count(), 2);
        em.emit_delivery(&cycle(768, 2.0));
        let second = m.snapshot();
        assert_eq!(second.iter().filter(|&&b| b == b'\n').count(), 5);
        assert_eq!(&second[..first.len()], &first[..]);
        assert_eq!(m.status().unwrap().unwrap().qber_pct, Some(2.0));
    }

    #[test]
    fn rewrite_file_holds_full_set() {
        let (mut em, m) = emulator(3);
        em.emit_delivery(&cycle(300, 1.0));
        assert_eq!(m.snapshot().len(), 65);
        em.emit_delivery(&cycle(300, 1.0));
        assert_eq!(m.snapshot().len(), 130);
        assert_eq!(em.pending_bits(), 600 - 512);
    }

    struct Flaky {
        inner: MemoryMedium,
        fail: std::sync::Arc<std::sync::atomic::AtomicBool>,
    }

    impl FeedMedium for Flaky {
        fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
            if self.fail.load(std::sync::atomic::Ordering::SeqCst) {
                return Err(io::Error::other("disk full"));
            }
            self.inner.append(bytes)
        }
        fn replace(&mut self, bytes: &[u8]) -> io::Result<()> {
            self.inner.replace(bytes)
        }
        fn stat(&self) -> io::Result<(u64, u64)> {
            self.inner.stat()
        }
        fn read_from(&self, offset: u64) -> io::Result<Vec<u8>> {
            self.inner.read_from(offset)
        }
        fn set_status(&mut self, s: LinkStatus) -> io::Result<()> {
            self.inner.set_status(s)
        }
        fn status(&self) -> io::Result<Option<LinkStatus>> {
            self.inner.status()
        }
    }

    #[test]
    fn failed_write_retried_next_cycle() {
        let inner = MemoryMedium::new();
        let fail = std::sync::Arc::new(std::sync::atomic::AtomicBool::new(true));
        let flaky = Flaky { inner: inner.clone(), fail: fail.clone() };
        let mut em = LinkEmulator::new(profile(2), [0; 32], vec![Box::new(flaky)]);
        em.emit_delivery(&cycle(256, 1.0));
        assert!(inner.snapshot().is_empty());
        assert_eq!(em.write_failures(), 1);
        fail.store(false, std::sync::atomic::Ordering::SeqCst);
        em.emit_delivery(&cycle(256, 1.0));
        assert_eq!(inner.snapshot().len(), 130);
    }

    #[test]
    fn high_qber_cycle_yields_only_compromised_records() {
        let mut p = profile(1);
        p.qber_std_pct = 0.0;
        let w = DisturbanceWindow { link_index: 1, start_s: 0.0, end_s: 1000.0, qber_add_pct: 11.0, skr_scale: 1.0 };
        let m = MemoryMedium::new();
        let mut em = LinkEmulator::new(p, [5; 32], vec![Box::new(m.clone())]);
        let mut reader = FeedReader::new(DeliveryMode::PacketStream);
        let mut table = KeyTable::new(TableScope::QuantumLink(1));
        for _ in 0..5 {
            let c = em.run_cycle(std::slice::from_ref(&w));
            assert_eq!(c.qber_pct, 14.0);
        }
        let recs = reader.poll(&m, &mut table).unwrap();
        assert_eq!(recs.len(), 5);
        assert!(recs.iter().all(|r| r.status() == KeyStatus::Compromised));
        assert_eq!(table.available(), 0);
    }

    #[test]
    fn both_ends_receive_identical_material() {
        let (a, b) = (MemoryMedium::new(), MemoryMedium::new());
        let mut em = LinkEmulator::new(profile(2), LinkEmulator::seed_for(9, 2), vec![Box::new(a.clone()), Box::new(b.clone())]);
        for _ in 0..10 {
            em.run_cycle(&[]);
        }
        assert_eq!(a.snapshot(), b.snapshot());
        assert_eq!(em.sampled_bits(), em.delivered_keys() * 256 + em.pending_bits() as u64);
    }

    #[test]
    fn std_zero_is_periodic_and_seeded() {
        let mut p = profile(2);
        p.skr_std_bps = 0.0;
        p.qber_std_pct = 0.0;
        let run = |seed| {
            let m = MemoryMedium::new();
            let mut em = LinkEmulator::new(p.clone(), LinkEmulator::seed_for(seed, 2), vec![Box::new(m.clone())]);
            let times: Vec<f64> = (0..4).map(|_| {
                let t = em.next_cycle_time();
                em.run_cycle(&[]);
                t
            }).collect();
            (times, m.snapshot())
        };
        let (t1, s1) = run(1);
        let (t2, s2) = run(1);
        assert_eq!(t1, vec![5.0, 10.0, 15.0, 20.0]);
        assert_eq!((t1, s1.clone()), (t2, s2));
        assert_ne!(run(2).1, s1);
    }

    #[test]
    fn replay_then_resume_matches_uninterrupted_output() {
        for n in 1..=3 {
            let whole = MemoryMedium::new();
            let mut a = LinkEmulator::new(profile(n), LinkEmulator::seed_for(4, n), vec![Box::new(whole.clone())]);
            for _ in 0..6 {
                a.run_cycle(&[]);
            }
            let part = MemoryMedium::new();
            let mut b = LinkEmulator::new(profile(n), LinkEmulator::seed_for(4, n), vec![Box::new(part.clone())]);
            for _ in 0..3 {
                b.run_cycle(&[]);
            }
            // restart: a fresh emulator replays what was already written
            let mut c = LinkEmulator::new(profile(n), LinkEmulator::seed_for(4, n), vec![Box::new(part.clone())]);
            for _ in 0..3 {
                c.replay_cycle(&[]);
            }
            for _ in 0..3 {
                c.run_cycle(&[]);
            }
            assert_eq!(part.snapshot(), whole.snapshot(), "link {n}");
        }
    }
}
