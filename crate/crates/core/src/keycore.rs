//! Key material lifecycle.
//!
//! Raw key bits from a QKD link are chunked into 256-bit [`KeyRecord`]s and
//! collected in a per-link [`KeyTable`]. Every record carries its SHA-256
//! digest and a usage status; a record is consumed at most once by the
//! one-time pad. Network keys come from a [`NetworkKeySource`].

use std::collections::BTreeSet;

use bitvec::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const KEY_BITS: usize = 256;
pub const KEY_BYTES: usize = KEY_BITS / 8;

/// One 256-bit block: a key, a message or a ciphertext.
pub type Block = [u8; KEY_BYTES];

/// MSB-first bit buffer used for raw key material.
pub type Bits = BitVec<u8, Msb0>;

const TABLE_MAGIC: &[u8; 8] = b"QKTABLE1";

pub fn sha256(data: &[u8]) -> Block {
    Sha256::digest(data).into()
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KeyError {
    #[error("no fresh key left in {0}")]
    KeyExhausted(TableScope),
    #[error("unknown key id {0}")]
    UnknownKeyId(u64),
    #[error("key {0} was already used")]
    KeyAlreadyUsed(u64),
    #[error("key {0} is flagged compromised")]
    KeyCompromised(u64),
    #[error("malformed block: expected {expected} bytes, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("key id {id} does not follow last id {last:?}")]
    NonMonotonicId { id: u64, last: Option<u64> },
    #[error("corrupt key table file: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum TableScope {
    /// Keys established on QKD link `n` (1-based).
    QuantumLink(u8),
    NetworkKeys,
}

impl TableScope {
    pub fn tag(self) -> u8 {
        match self {
            TableScope::NetworkKeys => 0,
            TableScope::QuantumLink(n) => n,
        }
    }

    pub fn from_tag(tag: u8) -> Self {
        match tag {
            0 => TableScope::NetworkKeys,
            n => TableScope::QuantumLink(n),
        }
    }
}

impl std::fmt::Display for TableScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TableScope::QuantumLink(n) => write!(f, "qk{n}"),
            TableScope::NetworkKeys => f.write_str("nk"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KeyStatus {
    Fresh,
    Used,
    Compromised,
}

impl KeyStatus {
    fn to_byte(self) -> u8 {
        match self {
            KeyStatus::Fresh => 0,
            KeyStatus::Used => 1,
            KeyStatus::Compromised => 2,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(KeyStatus::Fresh),
            1 => Some(KeyStatus::Used),
            2 => Some(KeyStatus::Compromised),
            _ => None,
        }
    }
}

/// A single 256-bit key. Immutable apart from its status.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyRecord {
    id: u64,
    bits: Block,
    digest: Block,
    status: KeyStatus,
}

impl KeyRecord {
    pub fn new(id: u64, bits: Block) -> Self {
        Self { id, bits, digest: sha256(&bits), status: KeyStatus::Fresh }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn bits(&self) -> &Block {
        &self.bits
    }

    pub fn digest(&self) -> &Block {
        &self.digest
    }

    pub fn status(&self) -> KeyStatus {
        self.status
    }

    /// Recomputes the digest and compares it with the stored one.
    pub fn is_intact(&self) -> bool {
        sha256(&self.bits) == self.digest
    }
}

/// Bytewise XOR of two 32-byte blocks.
pub fn xor_bytes(a: &[u8], b: &[u8]) -> Result<Block, KeyError> {
    for side in [a, b] {
        if side.len() != KEY_BYTES {
            return Err(KeyError::LengthMismatch { expected: KEY_BYTES, actual: side.len() });
        }
    }
    let mut out = [0u8; KEY_BYTES];
    for (o, (x, y)) in out.iter_mut().zip(a.iter().zip(b)) {
        *o = x ^ y;
    }
    Ok(out)
}

/// Ordered pool of keys shared by both ends of a link, or a node's network keys.
///
/// Ids are strictly increasing in insertion order. For link tables they are
/// assigned from a counter, so both ends agree as long as they ingest the
/// same material in the same order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyTable {
    scope: TableScope,
    records: Vec<KeyRecord>,
    fresh: BTreeSet<u64>,
    next_id: u64,
    residual: Bits,
    ingested_bits: u64,
}

impl KeyTable {
    pub fn new(scope: TableScope) -> Self {
        Self {
            scope,
            records: Vec::new(),
            fresh: BTreeSet::new(),
            next_id: 0,
            residual: Bits::new(),
            ingested_bits: 0,
        }
    }

    pub fn scope(&self) -> TableScope {
        self.scope
    }

    pub fn records(&self) -> &[KeyRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Id the next ingested chunk will receive.
    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn residual(&self) -> &BitSlice<u8, Msb0> {
        &self.residual
    }

    /// Total bits passed to [`KeyTable::ingest_bits`] over the table's lifetime.
    pub fn ingested_bits_total(&self) -> u64 {
        self.ingested_bits
    }

    pub fn get(&self, id: u64) -> Option<&KeyRecord> {
        self.position(id).map(|i| &self.records[i])
    }

    fn position(&self, id: u64) -> Option<usize> {
        self.records.binary_search_by_key(&id, |r| r.id).ok()
    }

    /// Number of fresh records.
    pub fn available(&self) -> usize {
        self.fresh.len()
    }

    pub fn count(&self, status: KeyStatus) -> usize {
        match status {
            KeyStatus::Fresh => self.fresh.len(),
            other => self.records.iter().filter(|r| r.status == other).count(),
        }
    }

    /// Lowest-id fresh record, if any.
    pub fn next_fresh(&self) -> Option<&KeyRecord> {
        self.fresh.first().and_then(|&id| self.get(id))
    }

    /// Appends `bits` to the residual buffer and cuts as many 256-bit
    /// records as possible. Returns the new records in order.
    pub fn ingest_bits(&mut self, bits: &BitSlice<u8, Msb0>) -> Vec<KeyRecord> {
        self.ingested_bits += bits.len() as u64;
        self.residual.extend_from_bitslice(bits);
        let whole = self.residual.len() / KEY_BITS;
        let mut out = Vec::with_capacity(whole);
        for chunk in self.residual.chunks_exact(KEY_BITS) {
            let mut key = [0u8; KEY_BYTES];
            key.view_bits_mut::<Msb0>().copy_from_bitslice(chunk);
            let record = KeyRecord::new(self.next_id, key);
            self.next_id += 1;
            self.fresh.insert(record.id);
            self.records.push(record.clone());
            out.push(record);
        }
        self.residual.drain(..whole * KEY_BITS);
        out
    }

    /// Ingests one whole key. Equivalent to `ingest_bits` over its 256 bits.
    pub fn ingest_key(&mut self, key: &Block) -> Vec<KeyRecord> {
        self.ingest_bits(key.view_bits::<Msb0>())
    }

    /// Inserts a record under an externally assigned id (network-key tables).
    pub fn insert(&mut self, id: u64, bits: Block) -> Result<&KeyRecord, KeyError> {
        let last = self.records.last().map(|r| r.id);
        if last.is_some_and(|l| id <= l) {
            return Err(KeyError::NonMonotonicId { id, last });
        }
        self.records.push(KeyRecord::new(id, bits));
        self.fresh.insert(id);
        self.next_id = id + 1;
        Ok(self.records.last().expect("just pushed"))
    }

    fn transition(&mut self, id: u64, to: KeyStatus) -> Result<&KeyRecord, KeyError> {
        let pos = self.position(id).ok_or(KeyError::UnknownKeyId(id))?;
        let record = &mut self.records[pos];
        match record.status {
            KeyStatus::Fresh => {}
            KeyStatus::Used => return Err(KeyError::KeyAlreadyUsed(id)),
            KeyStatus::Compromised => return Err(KeyError::KeyCompromised(id)),
        }
        record.status = to;
        self.fresh.remove(&id);
        Ok(&self.records[pos])
    }

    /// Flags a fresh record as compromised. Already-compromised records are
    /// left as they are.
    pub fn mark_compromised(&mut self, id: u64) -> Result<(), KeyError> {
        match self.transition(id, KeyStatus::Compromised) {
            Ok(_) | Err(KeyError::KeyCompromised(_)) => Ok(()),
            Err(e) => Err(e),
        }
    }

    /// Marks a fresh record as used without touching any data.
    pub fn mark_used(&mut self, id: u64) -> Result<(), KeyError> {
        self.transition(id, KeyStatus::Used).map(|_| ())
    }

    /// Encrypts `message` with the lowest-id fresh key, consuming it.
    pub fn otp_encrypt(&mut self, message: &Block) -> Result<(Block, u64), KeyError> {
        let id = *self.fresh.first().ok_or(KeyError::KeyExhausted(self.scope))?;
        let record = self.transition(id, KeyStatus::Used)?;
        let ct = xor_bytes(message, &record.bits)?;
        Ok((ct, id))
    }

    /// Decrypts with the key `key_id`, consuming it. Never decrypts with a
    /// key that is not fresh.
    pub fn otp_decrypt(&mut self, ciphertext: &Block, key_id: u64) -> Result<Block, KeyError> {
        let record = self.transition(key_id, KeyStatus::Used)?;
        xor_bytes(ciphertext, &record.bits)
    }

    /// SHA-256 over the persisted form. Equal digests mean identical tables.
    pub fn digest(&self) -> Block {
        sha256(&self.to_bytes())
    }

    /// SHA-256 over `(id, bits)` of every record not flagged compromised,
    /// ignoring usage. Used to compare network-key sets across nodes.
    pub fn key_set_digest(&self) -> Block {
        let mut h = Sha256::new();
        for r in self.records.iter().filter(|r| r.status != KeyStatus::Compromised) {
            h.update(r.id.to_be_bytes());
            h.update(r.bits);
        }
        h.finalize().into()
    }

    /// Serializes in the `QKTABLE1` little-endian file layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + self.records.len() * 73 + 2 + self.residual.len() / 8 + 1);
        out.extend_from_slice(TABLE_MAGIC);
        out.push(self.scope.tag());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.id.to_le_bytes());
            out.extend_from_slice(&r.bits);
            out.extend_from_slice(&r.digest);
            out.push(r.status.to_byte());
        }
        let bit_len = self.residual.len() as u16;
        out.extend_from_slice(&bit_len.to_le_bytes());
        let mut packed = self.residual.clone();
        packed.set_uninitialized(false);
        out.extend_from_slice(packed.as_raw_slice());
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, KeyError> {
        let mut cur = Cursor { data, pos: 0 };
        if cur.take(8)? != TABLE_MAGIC {
            return Err(KeyError::Corrupt("bad magic".into()));
        }
        let scope = TableScope::from_tag(cur.take(1)?[0]);
        let count = u64::from_le_bytes(cur.array()?);
        let mut table = KeyTable::new(scope);
        for _ in 0..count {
            let id = u64::from_le_bytes(cur.array()?);
            let bits: Block = cur.array()?;
            let digest: Block = cur.array()?;
            let status = KeyStatus::from_byte(cur.take(1)?[0])
                .ok_or_else(|| KeyError::Corrupt(format!("bad status for key {id}")))?;
            if sha256(&bits) != digest {
                return Err(KeyError::Corrupt(format!("digest mismatch for key {id}")));
            }
            if table.records.last().is_some_and(|r| r.id >= id) {
                return Err(KeyError::Corrupt(format!("non-increasing id {id}")));
            }
            if status == KeyStatus::Fresh {
                table.fresh.insert(id);
            }
            table.records.push(KeyRecord { id, bits, digest, status });
            table.next_id = id + 1;
        }
        let bit_len = u16::from_le_bytes(cur.array()?) as usize;
        if bit_len >= KEY_BITS {
            return Err(KeyError::Corrupt(format!("residual of {bit_len} bits")));
        }
        let raw = cur.take(bit_len.div_ceil(8))?;
        table.residual = Bits::from_slice(raw);
        table.residual.truncate(bit_len);
        if cur.pos != data.len() {
            return Err(KeyError::Corrupt("trailing bytes".into()));
        }
        table.ingested_bits = table.records.len() as u64 * KEY_BITS as u64 + bit_len as u64;
        Ok(table)
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], KeyError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| KeyError::Corrupt("truncated".into()))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], KeyError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

/// Deterministic stand-in for the network manager's QRNG: key `c` is
/// SHA-256(seed || c as big-endian u64).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkKeySource {
    seed: Block,
    counter: u64,
}

impl NetworkKeySource {
    pub fn new(seed: Block) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn with_counter(seed: Block, counter: u64) -> Self {
        Self { seed, counter }
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn key_at(&self, counter: u64) -> Block {
        let mut h = Sha256::new();
        h.update(self.seed);
        h.update(counter.to_be_bytes());
        h.finalize().into()
    }

    /// Draws `h` fresh network keys; record ids are the draw counters.
    pub fn draw(&mut self, h: usize) -> Vec<KeyRecord> {
        let out = (0..h as u64)
            .map(|i| {
                let c = self.counter + i;
                KeyRecord::new(c, self.key_at(c))
            })
            .collect();
        self.counter += h as u64;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_block(rng: &mut impl Rng) -> Block {
        let mut b = [0u8; KEY_BYTES];
        rng.fill(&mut b);
        b
    }

    fn link_table_with(keys: &[Block]) -> KeyTable {
        let mut t = KeyTable::new(TableScope::QuantumLink(1));
        for k in keys {
            t.ingest_key(k);
        }
        t
    }

    #[test]
    fn ingest_exact_multiple() {
        let mut t = KeyTable::new(TableScope::QuantumLink(1));
        let recs = t.ingest_bits(&bitvec![u8, Msb0; 0; 512]);
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].id(), 0);
        assert_eq!(recs[1].id(), 1);
        for r in &recs {
            assert_eq!(r.bits(), &[0u8; 32]);
            assert_eq!(r.digest(), &sha256(&[0u8; 32]));
        }
        assert!(t.residual().is_empty());
    }

    #[test]
    fn ingest_keeps_remainder() {
        let mut t = KeyTable::new(TableScope::QuantumLink(2));
        let recs = t.ingest_bits(&bitvec![u8, Msb0; 1; 300]);
        assert_eq!(recs.len(), 1);
        assert_eq!(t.residual().len(), 44);
    }

    #[test]
    fn split_ingest_matches_single_call() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let key = random_block(&mut rng);
        let all = key.view_bits::<Msb0>();

        let mut oneshot = KeyTable::new(TableScope::QuantumLink(1));
        let expected = oneshot.ingest_bits(all);

        let mut split = KeyTable::new(TableScope::QuantumLink(1));
        assert!(split.ingest_bits(&all[..200]).is_empty());
        let got = split.ingest_bits(&all[200..]);
        assert_eq!(got, expected);
        assert_eq!(got[0].bits(), &key);
        assert_eq!(split, oneshot);
    }

    #[test]
    fn empty_ingest_is_noop() {
        let mut t = KeyTable::new(TableScope::QuantumLink(1));
        assert!(t.ingest_bits(BitSlice::empty()).is_empty());
        assert_eq!(t.available(), 0);
    }

    #[test]
    fn xor_identity_and_self_inverse() {
        let m = [0xa5u8; 32];
        assert_eq!(xor_bytes(&m, &[0u8; 32]).unwrap(), m);
        assert_eq!(xor_bytes(&m, &m).unwrap(), [0u8; 32]);
    }

    #[test]
    fn xor_involution_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let a = random_block(&mut rng);
            let b = random_block(&mut rng);
            let c = xor_bytes(&a, &b).unwrap();
            assert_eq!(xor_bytes(&c, &b).unwrap(), a);
        }
    }

    #[test]
    fn xor_rejects_wrong_length() {
        assert_eq!(
            xor_bytes(&[0u8; 31], &[0u8; 32]),
            Err(KeyError::LengthMismatch { expected: 32, actual: 31 })
        );
        assert!(xor_bytes(&[0u8; 32], &[0u8; 33]).is_err());
    }

    #[test]
    fn zero_message_encrypts_to_key() {
        let k = [0x3cu8; 32];
        let mut t = link_table_with(&[k]);
        let (ct, id) = t.otp_encrypt(&[0u8; 32]).unwrap();
        assert_eq!(ct, k);
        assert_eq!(id, 0);
        assert_eq!(t.get(0).unwrap().status(), KeyStatus::Used);
    }

    #[test]
    fn successive_encryptions_use_distinct_keys() {
        let mut t = link_table_with(&[[1u8; 32], [2u8; 32]]);
        let m = [9u8; 32];
        let (c1, i1) = t.otp_encrypt(&m).unwrap();
        let (c2, i2) = t.otp_encrypt(&m).unwrap();
        assert_ne!(i1, i2);
        assert_ne!(c1, c2);
        assert_eq!(t.otp_encrypt(&m), Err(KeyError::KeyExhausted(TableScope::QuantumLink(1))));
    }

    #[test]
    fn encrypt_decrypt_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let keys: Vec<Block> = (0..1000).map(|_| random_block(&mut rng)).collect();
        let mut alice = link_table_with(&keys);
        let mut bob = link_table_with(&keys);
        for _ in 0..1000 {
            let m = random_block(&mut rng);
            let (ct, id) = alice.otp_encrypt(&m).unwrap();
            assert_eq!(bob.otp_decrypt(&ct, id).unwrap(), m);
        }
        assert_eq!(alice.available(), 0);
        assert_eq!(bob.available(), 0);
    }

    #[test]
    fn decrypt_inverse_of_zero_message() {
        let k = [0x77u8; 32];
        let mut t = link_table_with(&[k]);
        assert_eq!(t.otp_decrypt(&k, 0).unwrap(), [0u8; 32]);
    }

    #[test]
    fn decrypt_with_wrong_key_gives_wrong_message() {
        let k0 = [0x11u8; 32];
        let k1 = [0x22u8; 32];
        let mut alice = link_table_with(&[k0, k1]);
        let mut bob = link_table_with(&[k0, k1]);
        let m = [0x5au8; 32];
        let (ct, id) = alice.otp_encrypt(&m).unwrap();
        assert_eq!(id, 0);
        let wrong = bob.otp_decrypt(&ct, 1).unwrap();
        assert_ne!(wrong, m);
        assert_ne!(sha256(&wrong), sha256(&m));
    }

    #[test]
    fn decrypt_twice_fails() {
        let mut t = link_table_with(&[[1u8; 32]]);
        t.otp_decrypt(&[0u8; 32], 0).unwrap();
        assert_eq!(t.otp_decrypt(&[0u8; 32], 0), Err(KeyError::KeyAlreadyUsed(0)));
        assert_eq!(t.otp_decrypt(&[0u8; 32], 7), Err(KeyError::UnknownKeyId(7)));
    }

    #[test]
    fn available_counts() {
        let mut t = KeyTable::new(TableScope::QuantumLink(1));
        assert_eq!(t.available(), 0);
        for k in [[1u8; 32], [2u8; 32], [3u8; 32]] {
            t.ingest_key(&k);
        }
        t.otp_encrypt(&[0u8; 32]).unwrap();
        assert_eq!(t.available(), 2);
    }

    #[test]
    fn compromise_only_key() {
        let mut t = link_table_with(&[[1u8; 32]]);
        t.mark_compromised(0).unwrap();
        assert_eq!(t.available(), 0);
        assert!(matches!(t.otp_encrypt(&[0u8; 32]), Err(KeyError::KeyExhausted(_))));
        assert_eq!(t.otp_decrypt(&[0u8; 32], 0), Err(KeyError::KeyCompromised(0)));
        assert_eq!(t.mark_compromised(4), Err(KeyError::UnknownKeyId(4)));
    }

    #[test]
    fn compromise_skips_in_order() {
        let keys: Vec<Block> = (0..7u8).map(|i| [i; 32]).collect();
        let mut t = link_table_with(&keys);
        for id in 0..4 {
            t.mark_used(id).unwrap();
        }
        t.mark_compromised(5).unwrap();
        assert_eq!(t.otp_encrypt(&[0u8; 32]).unwrap().1, 4);
        assert_eq!(t.otp_encrypt(&[0u8; 32]).unwrap().1, 6);
    }

    #[test]
    fn used_key_cannot_be_compromised() {
        let mut t = link_table_with(&[[1u8; 32]]);
        t.mark_used(0).unwrap();
        assert_eq!(t.mark_compromised(0), Err(KeyError::KeyAlreadyUsed(0)));
    }

    #[test]
    fn network_key_draws() {
        let mut src = NetworkKeySource::new([7u8; 32]);
        assert!(src.draw(0).is_empty());
        assert_eq!(src.counter(), 0);
        let a = src.draw(5);
        let b = NetworkKeySource::new([7u8; 32]).draw(5);
        assert_eq!(a, b);
        assert_eq!(src.counter(), 5);
        let more = src.draw(40);
        assert_eq!(more.len(), 40);
        assert_eq!(more[0].id(), 5);
        assert_ne!(more[0].bits(), a[0].bits());
    }

    #[test]
    fn insert_requires_increasing_ids() {
        let mut t = KeyTable::new(TableScope::NetworkKeys);
        t.insert(3, [1u8; 32]).unwrap();
        t.insert(9, [2u8; 32]).unwrap();
        assert_eq!(
            t.insert(9, [3u8; 32]).unwrap_err(),
            KeyError::NonMonotonicId { id: 9, last: Some(9) }
        );
        assert_eq!(t.available(), 2);
    }

    #[test]
    fn persisted_layout() {
        let mut t = KeyTable::new(TableScope::QuantumLink(2));
        t.ingest_bits(&bitvec![u8, Msb0; 1; 256 + 12]);
        t.mark_used(0).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..8], b"QKTABLE1");
        assert_eq!(bytes[8], 2);
        assert_eq!(u64::from_le_bytes(bytes[9..17].try_into().unwrap()), 1);
        assert_eq!(bytes[17..25], 0u64.to_le_bytes());
        assert_eq!(bytes[17 + 8 + 64], 1);
        let tail = &bytes[17 + 73..];
        assert_eq!(tail, &[12, 0, 0xff, 0xf0]);
        assert_eq!(KeyTable::from_bytes(&bytes).unwrap(), t);
    }

    #[test]
    fn corrupt_table_rejected() {
        let t = link_table_with(&[[1u8; 32]]);
        let mut bytes = t.to_bytes();
        bytes[30] ^= 1;
        assert!(matches!(KeyTable::from_bytes(&bytes), Err(KeyError::Corrupt(_))));
        assert!(KeyTable::from_bytes(&bytes[..10]).is_err());
        assert!(KeyTable::from_bytes(b"NOTATABLE").is_err());
    }
}
