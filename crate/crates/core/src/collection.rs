// SPDX-License-Identifier: Apache-2.0

//! Transaction intake, cluster consensus over collections, guarantees, and
//! collection retrieval.
//!
//! A cluster runs the HotStuff engine with [`ClusterPayload`] blocks. Appends
//! grow the open collection, a close seals it; once a close is finalized the
//! members sign a guarantee over the collection hash and whoever gathers more
//! than 2/3 of the cluster stake forwards the [`GuaranteedCollection`].

use std::collections::{BTreeMap, HashMap, HashSet};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::route_transaction;
use crate::codec::{Canonical, Encoder};
use crate::crypto::{hash, Digest, StakingKey, StakingKeyPair, StakingSignature};
use crate::hotstuff::{App, BlockTree, HsBlock, Validation};
use crate::state::{meets_supermajority, Committee};
use crate::transaction::{Script, SignedTransaction};

pub const DEFAULT_COLLECTION_THRESHOLD: usize = 20;

/// `hash("collection", len || h_0 || h_1 ...)`.
pub fn collection_hash(tx_hashes: &[Digest]) -> Digest {
    hash(b"collection", &tx_hashes.canonical_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Collection {
    pub cluster: u32,
    pub tx_hashes: Vec<Digest>,
    pub closed: bool,
}

impl Collection {
    pub fn hash(&self) -> Digest {
        collection_hash(&self.tx_hashes)
    }
}

fn guarantee_bytes(collection: &Digest, cluster: u32) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.raw(b"guarantee").digest(collection).u32(cluster);
    enc.finish()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GuaranteedCollection {
    pub collection_hash: Digest,
    pub cluster_index: u32,
    /// Ascending by signer key.
    pub signatures: Vec<(StakingKey, StakingSignature)>,
}

impl GuaranteedCollection {
    pub fn guarantors(&self) -> Vec<StakingKey> {
        self.signatures.iter().map(|(k, _)| *k).collect()
    }

    pub fn signer_bitmap(&self, cluster: &Committee) -> Vec<bool> {
        cluster.keys().map(|k| self.signatures.iter().any(|(s, _)| *s == k)).collect()
    }

    /// Authorized, distinct signers with valid signatures and strictly more
    /// than 2/3 of the cluster stake.
    pub fn verify(&self, cluster: &Committee) -> bool {
        if self.signatures.windows(2).any(|w| w[0].0 >= w[1].0) {
            return false;
        }
        let msg = guarantee_bytes(&self.collection_hash, self.cluster_index);
        self.signatures.iter().all(|(k, s)| cluster.contains(*k) && k.verify(&msg, s))
            && cluster.effective_votes(self.signatures.iter().map(|(k, _)| k)).is_ok_and(meets_supermajority)
    }
}

impl Canonical for GuaranteedCollection {
    fn encode(&self, enc: &mut Encoder) {
        enc.digest(&self.collection_hash).u32(self.cluster_index);
        enc.len_prefix(self.signatures.len());
        for (k, s) in &self.signatures {
            enc.u64(k.0).raw(&s.to_bytes());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GuaranteeVote {
    pub collection_hash: Digest,
    pub cluster_index: u32,
    pub signer: StakingKey,
    pub signature: StakingSignature,
}

impl GuaranteeVote {
    pub fn sign(collection_hash: Digest, cluster_index: u32, kp: &StakingKeyPair) -> Self {
        Self {
            collection_hash,
            cluster_index,
            signer: kp.public(),
            signature: kp.sign(&guarantee_bytes(&collection_hash, cluster_index)),
        }
    }
}

/// Collects guarantee votes per collection until they form a guarantee.
#[derive(Debug, Default)]
pub struct GuaranteeAggregator {
    pending: HashMap<Digest, BTreeMap<StakingKey, StakingSignature>>,
    done: HashSet<Digest>,
}

impl GuaranteeAggregator {
    pub fn add(&mut self, vote: &GuaranteeVote, cluster: &Committee) -> Option<GuaranteedCollection> {
        if self.done.contains(&vote.collection_hash)
            || !cluster.contains(vote.signer)
            || !vote.signer.verify(&guarantee_bytes(&vote.collection_hash, vote.cluster_index), &vote.signature)
        {
            return None;
        }
        let set = self.pending.entry(vote.collection_hash).or_default();
        set.insert(vote.signer, vote.signature);
        if !cluster.is_supermajority(set.keys()) {
            return None;
        }
        let set = self.pending.remove(&vote.collection_hash)?;
        self.done.insert(vote.collection_hash);
        Some(GuaranteedCollection {
            collection_hash: vote.collection_hash,
            cluster_index: vote.cluster_index,
            signatures: set.into_iter().collect(),
        })
    }
}

/// What a collector knows about the main chain.
pub trait ChainView {
    fn height_of(&self, block: &Digest) -> Option<u64>;
}

impl ChainView for HashMap<Digest, u64> {
    fn height_of(&self, block: &Digest) -> Option<u64> {
        self.get(block).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum TxError {
    #[error("transaction is missing a required field or its script does not parse")]
    MalformedFields,
    #[error("a transaction signature does not verify")]
    BadSignature,
    #[error("transaction routes to cluster {expected}, not {got}")]
    WrongCluster { expected: usize, got: usize },
    #[error("inclusion at height {inclusion} is outside ({reference}, {reference} + window]")]
    ExpiredWindow { reference: u64, inclusion: u64 },
    #[error("reference block is unknown")]
    UnknownReferenceBlock,
}

/// Field, signature and script checks that need no chain view.
pub fn check_well_formed(tx: &SignedTransaction) -> Result<(), TxError> {
    let (Some(payer_sig), false) = (tx.payer_signature, tx.script_signatures.is_empty()) else {
        return Err(TxError::MalformedFields);
    };
    if Script::parse(&tx.script).is_err() {
        return Err(TxError::MalformedFields);
    }
    let body = SignedTransaction::body_bytes(&tx.script, &tx.reference_block_hash, tx.payer);
    if !tx.payer.verify(&body, &payer_sig) || !tx.script_signatures.iter().all(|(k, s)| k.verify(&body, s)) {
        return Err(TxError::BadSignature);
    }
    Ok(())
}

/// Accepts `tx` at this cluster if it is well formed, routes here, and would
/// be included at `inclusion_height` within `(ref_height, ref_height + window]`.
pub fn validate_transaction(
    tx: &SignedTransaction,
    view: &dyn ChainView,
    window: u64,
    inclusion_height: u64,
    cluster_count: usize,
    expected_cluster: usize,
) -> Result<(), TxError> {
    check_well_formed(tx)?;
    let routed = route_transaction(&tx.hash(), cluster_count);
    if routed != expected_cluster {
        return Err(TxError::WrongCluster { expected: routed, got: expected_cluster });
    }
    let reference = view.height_of(&tx.reference_block_hash).ok_or(TxError::UnknownReferenceBlock)?;
    if inclusion_height <= reference || inclusion_height > reference + window {
        return Err(TxError::ExpiredWindow { reference, inclusion: inclusion_height });
    }
    Ok(())
}

fn ingest_bytes(tx_hash: &Digest) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.raw(b"ingest").digest(tx_hash);
    enc.finish()
}

/// A collector's signature over a transaction hash it accepted from a user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct IngestAttestation {
    pub collector: StakingKey,
    pub signature: StakingSignature,
}

impl IngestAttestation {
    pub fn sign(tx_hash: &Digest, kp: &StakingKeyPair) -> Self {
        Self { collector: kp.public(), signature: kp.sign(&ingest_bytes(tx_hash)) }
    }

    pub fn verify(&self, tx_hash: &Digest) -> bool {
        self.collector.verify(&ingest_bytes(tx_hash), &self.signature)
    }
}

#[derive(Debug, Clone)]
pub struct PoolEntry {
    pub tx: SignedTransaction,
    pub attestation: IngestAttestation,
}

/// Pending transactions in arrival order.
#[derive(Debug, Clone, Default)]
pub struct TxPool {
    entries: IndexMap<Digest, PoolEntry>,
}

impl TxPool {
    /// Returns false if the hash was already present.
    pub fn insert(&mut self, tx: SignedTransaction, attestation: IngestAttestation) -> bool {
        let h = tx.hash();
        if self.entries.contains_key(&h) {
            return false;
        }
        self.entries.insert(h, PoolEntry { tx, attestation });
        true
    }

    pub fn get(&self, h: &Digest) -> Option<&PoolEntry> {
        self.entries.get(h)
    }

    pub fn contains(&self, h: &Digest) -> bool {
        self.entries.contains_key(h)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn hashes(&self) -> impl Iterator<Item = &Digest> {
        self.entries.keys()
    }

    pub fn remove(&mut self, h: &Digest) {
        self.entries.shift_remove(h);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClusterPayload {
    Noop,
    Append(Vec<Digest>),
    Close(Digest),
}

impl Canonical for ClusterPayload {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            ClusterPayload::Noop => {
                enc.u8(0);
            }
            ClusterPayload::Append(hs) => {
                enc.u8(1);
                hs.encode(enc);
            }
            ClusterPayload::Close(h) => {
                enc.u8(2).digest(h);
            }
        }
    }
}

/// Open collection and guaranteed history of one cluster chain.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClusterLedger {
    pub open: Vec<Digest>,
    open_set: HashSet<Digest>,
    pub included: HashSet<Digest>,
    pub closed: Vec<Digest>,
}

impl ClusterLedger {
    pub fn contains(&self, h: &Digest) -> bool {
        self.open_set.contains(h) || self.included.contains(h)
    }

    /// Applies a finalized or tentative payload. Returns the closed
    /// collection's hashes on a close.
    pub fn apply(&mut self, payload: &ClusterPayload) -> Option<Vec<Digest>> {
        match payload {
            ClusterPayload::Noop => None,
            ClusterPayload::Append(hs) => {
                for h in hs {
                    if self.open_set.insert(*h) {
                        self.open.push(*h);
                    }
                }
                None
            }
            ClusterPayload::Close(_) => {
                let txs = std::mem::take(&mut self.open);
                self.open_set.clear();
                self.included.extend(txs.iter().copied());
                self.closed.push(collection_hash(&txs));
                Some(txs)
            }
        }
    }
}

/// Whether a member votes for an append: `Defer` while texts are missing,
/// `Reject` on any duplicate or unattested transaction.
pub fn validate_append_proposal(
    proposal: &[Digest],
    ledger: &ClusterLedger,
    pool: &TxPool,
    cluster: &Committee,
) -> Validation {
    if proposal.is_empty() {
        return Validation::Reject("empty append".into());
    }
    let mut seen = HashSet::new();
    for h in proposal {
        if !seen.insert(*h) {
            return Validation::Reject("duplicate within proposal".into());
        }
        if ledger.open_set.contains(h) {
            return Validation::Reject("duplicates the open collection".into());
        }
        if ledger.included.contains(h) {
            return Validation::Reject("already in a guaranteed collection".into());
        }
    }
    for h in proposal {
        let Some(entry) = pool.get(h) else {
            return Validation::Defer;
        };
        if check_well_formed(&entry.tx).is_err() {
            return Validation::Reject("malformed transaction".into());
        }
        if !cluster.contains(entry.attestation.collector) || !entry.attestation.verify(h) {
            return Validation::Reject("transaction not ingested by a cluster member".into());
        }
    }
    Validation::Accept
}

/// Cluster consensus application of one collector.
#[derive(Debug)]
pub struct CollectorApp {
    pub cluster_index: u32,
    pub cluster: Committee,
    pub pool: TxPool,
    pub finalized: ClusterLedger,
    pub threshold: usize,
    pub timespan: u64,
    /// Local clock, advanced by the driver before each call.
    pub now: u64,
    first_seen: HashMap<Digest, u64>,
    /// Collections closed by committed blocks, keyed by block id.
    closed: HashMap<Digest, Collection>,
}

impl CollectorApp {
    pub fn new(cluster_index: u32, cluster: Committee, threshold: usize, timespan: u64) -> Self {
        Self {
            cluster_index,
            cluster,
            pool: TxPool::default(),
            finalized: ClusterLedger::default(),
            threshold: threshold.max(1),
            timespan,
            now: 0,
            first_seen: HashMap::new(),
            closed: HashMap::new(),
        }
    }

    /// Ledger after applying the uncommitted chain ending at `id`.
    pub fn ledger_at(&self, id: &Digest, tree: &BlockTree<ClusterPayload>) -> Option<ClusterLedger> {
        let chain = tree.pending_chain(id)?;
        let mut l = self.finalized.clone();
        for b in chain {
            l.apply(&b.payload);
        }
        Some(l)
    }

    /// Feeds a finalized cluster block. Returns the closed collection.
    pub fn on_finalized(&mut self, block: &HsBlock<ClusterPayload>) -> Option<Collection> {
        let closed = self.finalized.apply(&block.payload)?;
        Some(Collection { cluster: self.cluster_index, tx_hashes: closed, closed: true })
    }

    /// The collection closed by committed block `id`, once.
    pub fn take_closed(&mut self, id: &Digest) -> Option<Collection> {
        self.closed.remove(id)
    }

    /// Full texts of a collection if every transaction is in the pool.
    pub fn texts(&self, hashes: &[Digest]) -> Option<Vec<SignedTransaction>> {
        hashes.iter().map(|h| self.pool.get(h).map(|e| e.tx.clone())).collect()
    }
}

impl App<ClusterPayload> for CollectorApp {
    fn propose(&mut self, parent: &HsBlock<ClusterPayload>, tree: &BlockTree<ClusterPayload>) -> ClusterPayload {
        let Some(ledger) = self.ledger_at(&parent.id(), tree) else {
            return ClusterPayload::Noop;
        };
        if let Some(first) = ledger.open.first() {
            let since = *self.first_seen.entry(*first).or_insert(self.now);
            if ledger.open.len() >= self.threshold || self.now.saturating_sub(since) >= self.timespan {
                return ClusterPayload::Close(collection_hash(&ledger.open));
            }
        }
        let room = self.threshold - ledger.open.len().min(self.threshold);
        let batch: Vec<Digest> = self.pool.hashes().filter(|h| !ledger.contains(h)).take(room).copied().collect();
        if batch.is_empty() {
            ClusterPayload::Noop
        } else {
            ClusterPayload::Append(batch)
        }
    }

    fn validate(&mut self, block: &HsBlock<ClusterPayload>, tree: &BlockTree<ClusterPayload>) -> Validation {
        let Some(ledger) = self.ledger_at(&block.parent, tree) else {
            return Validation::Reject("parent does not extend the finalized cluster chain".into());
        };
        match &block.payload {
            ClusterPayload::Noop => Validation::Accept,
            ClusterPayload::Append(hs) => validate_append_proposal(hs, &ledger, &self.pool, &self.cluster),
            ClusterPayload::Close(h) if !ledger.open.is_empty() && *h == collection_hash(&ledger.open) => {
                Validation::Accept
            }
            ClusterPayload::Close(_) => Validation::Reject("close does not match the open collection".into()),
        }
    }

    fn on_commit(&mut self, block: &HsBlock<ClusterPayload>) {
        if let Some(c) = self.on_finalized(block) {
            self.closed.insert(block.id(), c);
        }
    }
}

/// Texts a guarantor keeps for every collection it signed.
#[derive(Debug, Clone, Default)]
pub struct GuarantorStore {
    collections: HashMap<Digest, Vec<SignedTransaction>>,
}

impl GuarantorStore {
    pub fn persist(&mut self, texts: Vec<SignedTransaction>) -> Digest {
        let h = collection_hash(&texts.iter().map(|t| t.hash()).collect::<Vec<_>>());
        self.collections.insert(h, texts);
        h
    }

    pub fn len(&self) -> usize {
        self.collections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.collections.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ServeError {
    #[error("collection {0} is not stored here")]
    NotFound(Digest),
}

pub fn serve_collection(store: &GuarantorStore, h: &Digest) -> Result<Vec<SignedTransaction>, ServeError> {
    store.collections.get(h).cloned().ok_or(ServeError::NotFound(*h))
}

/// Whether `texts` reconstruct the collection hash.
pub fn texts_match(collection: &Digest, texts: &[SignedTransaction]) -> bool {
    collection_hash(&texts.iter().map(|t| t.hash()).collect::<Vec<_>>()) == *collection
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RetrievalStep {
    /// Ask this guarantor next.
    Query(StakingKey),
    Recovered(Vec<SignedTransaction>),
    /// Every guarantor failed.
    Exhausted,
}

/// Sequential retrieval from a guarantor set; a challenge is only warranted
/// after all of them were asked.
#[derive(Debug, Clone)]
pub struct Retrieval {
    pub collection: GuaranteedCollection,
    guarantors: Vec<StakingKey>,
    next: usize,
    pub flagged: Vec<StakingKey>,
    pub queries: usize,
}

impl Retrieval {
    pub fn new(collection: GuaranteedCollection) -> Self {
        let guarantors = collection.guarantors();
        Self { collection, guarantors, next: 0, flagged: Vec::new(), queries: 0 }
    }

    pub fn current(&self) -> Option<StakingKey> {
        self.next.checked_sub(1).and_then(|i| self.guarantors.get(i).copied())
    }

    /// Moves to the next guarantor.
    pub fn advance(&mut self) -> RetrievalStep {
        match self.guarantors.get(self.next) {
            Some(k) => {
                self.next += 1;
                self.queries += 1;
                RetrievalStep::Query(*k)
            }
            None => RetrievalStep::Exhausted,
        }
    }

    /// A response from `from`; mismatching texts flag the sender and move on.
    pub fn on_response(&mut self, from: StakingKey, texts: Vec<SignedTransaction>) -> Option<RetrievalStep> {
        if self.current() != Some(from) {
            return None;
        }
        if texts_match(&self.collection.collection_hash, &texts) {
            Some(RetrievalStep::Recovered(texts))
        } else {
            self.flagged.push(from);
            Some(self.advance())
        }
    }

    /// The current guarantor did not answer in time.
    pub fn on_timeout(&mut self, from: StakingKey) -> Option<RetrievalStep> {
        (self.current() == Some(from)).then(|| self.advance())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transaction::{Op, ScriptOp};

    fn tx(kp: &StakingKeyPair, n: u64, reference: Digest) -> SignedTransaction {
        let s = Script::new(vec![ScriptOp { op: Op::SetRegister { key: vec![n as u8], value: vec![1] }, cost: 1 }]);
        SignedTransaction::sign(&s, reference, kp, &[kp])
    }

    fn cluster(n: usize) -> (Vec<StakingKeyPair>, Committee) {
        let kps: Vec<_> = (0..n).map(|i| StakingKeyPair::from_seed(format!("col-{i}").as_bytes())).collect();
        let c = Committee::new(kps.iter().map(|k| (k.public(), 1)).collect());
        (kps, c)
    }

    #[test]
    fn routing_window() {
        let kp = StakingKeyPair::from_seed(b"user");
        let reference = hash(b"block", b"1000");
        let view: HashMap<Digest, u64> = [(reference, 1000)].into();
        let t = tx(&kp, 1, reference);
        let c = route_transaction(&t.hash(), 1);
        assert_eq!(validate_transaction(&t, &view, 10, 1005, 1, c), Ok(()));
        assert!(matches!(validate_transaction(&t, &view, 10, 1011, 1, c), Err(TxError::ExpiredWindow { .. })));
        assert!(matches!(validate_transaction(&t, &view, 10, 1000, 1, c), Err(TxError::ExpiredWindow { .. })));
        let mut unsigned = t.clone();
        unsigned.payer_signature = None;
        assert_eq!(validate_transaction(&unsigned, &view, 10, 1005, 1, c), Err(TxError::MalformedFields));
        let other = tx(&kp, 1, hash(b"block", b"unknown"));
        assert_eq!(validate_transaction(&other, &view, 10, 1005, 1, 0), Err(TxError::UnknownReferenceBlock));
        let mut forged = t.clone();
        forged.script_signatures[0].0 = StakingKeyPair::from_seed(b"other").public();
        assert_eq!(check_well_formed(&forged), Err(TxError::BadSignature));
    }

    #[test]
    fn wrong_cluster() {
        let kp = StakingKeyPair::from_seed(b"user");
        let view: HashMap<Digest, u64> = [(Digest::ZERO, 0)].into();
        let t = tx(&kp, 3, Digest::ZERO);
        let right = route_transaction(&t.hash(), 4);
        let wrong = (right + 1) % 4;
        assert_eq!(
            validate_transaction(&t, &view, 10, 1, 4, wrong),
            Err(TxError::WrongCluster { expected: right, got: wrong })
        );
    }

    #[test]
    fn append_conditions() {
        let (kps, c) = cluster(4);
        let user = StakingKeyPair::from_seed(b"user");
        let mut pool = TxPool::default();
        let txs: Vec<_> = (0..4).map(|i| tx(&user, i, Digest::ZERO)).collect();
        for t in &txs[..3] {
            assert!(pool.insert(t.clone(), IngestAttestation::sign(&t.hash(), &kps[0])));
        }
        assert!(!pool.insert(txs[0].clone(), IngestAttestation::sign(&txs[0].hash(), &kps[1])));
        assert_eq!(pool.len(), 3);
        let mut ledger = ClusterLedger::default();
        ledger.apply(&ClusterPayload::Append(vec![txs[0].hash()]));
        let fresh = [txs[1].hash(), txs[2].hash()];
        assert!(matches!(validate_append_proposal(&fresh, &ledger, &pool, &c), Validation::Accept));
        assert!(matches!(validate_append_proposal(&[txs[0].hash()], &ledger, &pool, &c), Validation::Reject(_)));
        assert!(matches!(validate_append_proposal(&[txs[3].hash()], &ledger, &pool, &c), Validation::Defer));
        ledger.apply(&ClusterPayload::Close(collection_hash(&[txs[0].hash()])));
        assert!(matches!(validate_append_proposal(&[txs[0].hash()], &ledger, &pool, &c), Validation::Reject(_)));
        // attested by an outsider
        let outsider = StakingKeyPair::from_seed(b"outsider");
        pool.insert(txs[3].clone(), IngestAttestation::sign(&txs[3].hash(), &outsider));
        assert!(matches!(validate_append_proposal(&[txs[3].hash()], &ledger, &pool, &c), Validation::Reject(_)));
    }

    #[test]
    fn guarantee_needs_more_than_two_thirds() {
        let (kps, c) = cluster(6);
        let h = collection_hash(&[hash(b"t", b"1")]);
        let mut agg = GuaranteeAggregator::default();
        let votes: Vec<_> = kps.iter().map(|k| GuaranteeVote::sign(h, 0, k)).collect();
        for v in &votes[..4] {
            // 4 of 6 is exactly 2/3
            assert!(agg.add(v, &c).is_none());
        }
        assert!(agg.add(&votes[0], &c).is_none());
        let g = agg.add(&votes[4], &c).expect("5 of 6");
        assert!(g.verify(&c));
        assert_eq!(g.signer_bitmap(&c).iter().filter(|b| **b).count(), 5);
        let mut short = g.clone();
        short.signatures.truncate(4);
        assert!(!short.verify(&c));
        assert!(agg.add(&votes[5], &c).is_none());
    }

    #[test]
    fn retrieval_walks_all_guarantors() {
        let (kps, c) = cluster(4);
        let user = StakingKeyPair::from_seed(b"user");
        let texts: Vec<_> = (0..3).map(|i| tx(&user, i, Digest::ZERO)).collect();
        let mut store = GuarantorStore::default();
        let h = store.persist(texts.clone());
        assert_eq!(serve_collection(&store, &h).unwrap(), texts);
        assert!(serve_collection(&store, &Digest::ZERO).is_err());
        let mut agg = GuaranteeAggregator::default();
        let g = kps.iter().find_map(|k| agg.add(&GuaranteeVote::sign(h, 0, k), &c)).unwrap();
        let n = g.signatures.len();

        let mut r = Retrieval::new(g.clone());
        let RetrievalStep::Query(first) = r.advance() else { panic!() };
        let mut tampered = texts.clone();
        tampered.pop();
        assert!(matches!(r.on_response(first, tampered), Some(RetrievalStep::Query(_))));
        assert_eq!(r.flagged, vec![first]);
        let second = r.current().unwrap();
        assert!(matches!(r.on_response(second, texts.clone()), Some(RetrievalStep::Recovered(_))));

        let mut silent = Retrieval::new(g);
        let mut step = silent.advance();
        let mut asked = 0;
        while let RetrievalStep::Query(k) = step {
            asked += 1;
            step = silent.on_timeout(k).unwrap();
        }
        assert_eq!(asked, n);
        assert_eq!(step, RetrievalStep::Exhausted);
    }
}
