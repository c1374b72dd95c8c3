//! In-process P2P overlay. Peer identities are separate keys from chain
//! accounts; the only link between the two spaces is the trainer binding a
//! broadcaster attaches.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::codec::Encoder;
use crate::contracts::AccountId;
use crate::crypto::{verify, KeyPair, PublicKey, Rng, Signature};
use crate::ledger::Chain;

pub type P2pId = PublicKey;

#[derive(Clone)]
pub struct P2pAccount {
    keys: KeyPair,
}

impl P2pAccount {
    pub fn create(rng: &mut Rng) -> Self {
        Self {
            keys: KeyPair::generate(rng),
        }
    }

    pub fn id(&self) -> P2pId {
        self.keys.public()
    }

    fn sign(&self, msg: &[u8]) -> Signature {
        self.keys.sign(msg)
    }
}

impl fmt::Debug for P2pAccount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P2pAccount({})", self.id())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Endpoint(pub u32);

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node-{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    Unicast,
    Broadcast,
    Room,
}

impl MessageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Unicast => "unicast",
            MessageKind::Broadcast => "broadcast",
            MessageKind::Room => "room",
        }
    }
}

/// A chain account's signature over a p2p id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainerBinding {
    pub chain_account: AccountId,
    pub chain_signature: Signature,
}

impl TrainerBinding {
    pub fn message(p2p_id: &P2pId) -> Vec<u8> {
        let mut enc = Encoder::tagged("genie/p2p-binding");
        enc.put(p2p_id);
        enc.finish()
    }

    pub fn create(chain_keys: &KeyPair, p2p_id: &P2pId) -> Self {
        Self {
            chain_account: chain_keys.public(),
            chain_signature: chain_keys.sign(&Self::message(p2p_id)),
        }
    }

    pub fn valid_for(&self, p2p_id: &P2pId) -> bool {
        verify(
            &self.chain_account,
            &Self::message(p2p_id),
            &self.chain_signature,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct P2pMessage {
    pub kind: MessageKind,
    pub sender: P2pId,
    pub topic: Option<String>,
    pub payload: Vec<u8>,
    pub binding: Option<TrainerBinding>,
    pub sender_signature: Signature,
}

impl P2pMessage {
    fn signing_bytes(
        kind: MessageKind,
        sender: &P2pId,
        topic: &Option<String>,
        payload: &[u8],
        binding: &Option<TrainerBinding>,
    ) -> Vec<u8> {
        let mut enc = Encoder::tagged("genie/p2p-message");
        enc.str(kind.as_str()).put(sender).put(topic).bytes(payload);
        match binding {
            None => enc.u8(0),
            Some(b) => enc.u8(1).put(&b.chain_account).put(&b.chain_signature),
        };
        enc.finish()
    }

    fn new(
        from: &P2pAccount,
        kind: MessageKind,
        topic: Option<String>,
        payload: Vec<u8>,
        binding: Option<TrainerBinding>,
    ) -> Self {
        let sig = from.sign(&Self::signing_bytes(
            kind,
            &from.id(),
            &topic,
            &payload,
            &binding,
        ));
        Self {
            kind,
            sender: from.id(),
            topic,
            payload,
            binding,
            sender_signature: sig,
        }
    }

    pub fn signature_valid(&self) -> bool {
        let msg = Self::signing_bytes(
            self.kind,
            &self.sender,
            &self.topic,
            &self.payload,
            &self.binding,
        );
        verify(&self.sender, &msg, &self.sender_signature)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum P2pError {
    #[error("recipient is not registered")]
    Undeliverable,
    #[error("sender is not registered")]
    UnknownSender,
    #[error("broadcast carries no trainer binding")]
    MissingBinding,
    #[error("trainer binding does not verify for this sender")]
    BadBinding,
    #[error("bound chain account is not a model trainer")]
    NotTrainer,
    #[error("sender has not joined room {0:?}")]
    NotJoined(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub tick: u64,
    pub kind: MessageKind,
    pub sender: P2pId,
    pub recipient: P2pId,
}

impl fmt::Display for TraceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {}",
            self.tick,
            self.kind.as_str(),
            self.sender,
            self.recipient
        )
    }
}

#[derive(Debug)]
struct Peer {
    endpoint: Endpoint,
    inbox: VecDeque<P2pMessage>,
}

/// The hub. Deliveries are synchronous and in order.
#[derive(Debug, Default)]
pub struct Network {
    peers: BTreeMap<P2pId, Peer>,
    rooms: BTreeMap<String, BTreeSet<P2pId>>,
    trace: Vec<TraceEntry>,
    tick: u64,
}

impl Network {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, account: &P2pAccount) -> Endpoint {
        let next = Endpoint(self.peers.len() as u32);
        self.peers
            .entry(account.id())
            .or_insert(Peer {
                endpoint: next,
                inbox: VecDeque::new(),
            })
            .endpoint
    }

    pub fn find_peer(&self, id: &P2pId) -> Option<Endpoint> {
        self.peers.get(id).map(|p| p.endpoint)
    }

    pub fn peer_count(&self) -> usize {
        self.peers.len()
    }

    fn next_tick(&mut self) {
        self.tick += 1;
    }

    fn deliver(&mut self, msg: &P2pMessage, to: &P2pId) {
        let peer = self.peers.get_mut(to).expect("recipient checked by caller");
        peer.inbox.push_back(msg.clone());
        self.trace.push(TraceEntry {
            tick: self.tick,
            kind: msg.kind,
            sender: msg.sender,
            recipient: *to,
        });
    }

    fn check_sender(&self, from: &P2pAccount) -> Result<(), P2pError> {
        if !self.peers.contains_key(&from.id()) {
            return Err(P2pError::UnknownSender);
        }
        Ok(())
    }

    pub fn send_unicast(
        &mut self,
        from: &P2pAccount,
        to: &P2pId,
        payload: &[u8],
    ) -> Result<(), P2pError> {
        self.check_sender(from)?;
        if !self.peers.contains_key(to) {
            return Err(P2pError::Undeliverable);
        }
        self.next_tick();
        let msg = P2pMessage::new(from, MessageKind::Unicast, None, payload.to_vec(), None);
        self.deliver(&msg, to);
        Ok(())
    }

    /// Delivers to every peer except the sender, after checking that the
    /// binding ties this p2p id to a trainer on the mined chain.
    pub fn send_broadcast(
        &mut self,
        from: &P2pAccount,
        payload: &[u8],
        binding: Option<TrainerBinding>,
        chain: &Chain,
    ) -> Result<usize, P2pError> {
        self.check_sender(from)?;
        let binding = binding.ok_or(P2pError::MissingBinding)?;
        if !binding.valid_for(&from.id()) {
            return Err(P2pError::BadBinding);
        }
        if !chain
            .contracts()
            .registry
            .is_trainer(&binding.chain_account)
        {
            return Err(P2pError::NotTrainer);
        }
        self.next_tick();
        let msg = P2pMessage::new(
            from,
            MessageKind::Broadcast,
            None,
            payload.to_vec(),
            Some(binding),
        );
        let targets: Vec<P2pId> = self
            .peers
            .keys()
            .filter(|id| **id != from.id())
            .copied()
            .collect();
        for t in &targets {
            self.deliver(&msg, t);
        }
        Ok(targets.len())
    }

    pub fn join_room(&mut self, peer: &P2pId, topic: &str) -> Result<(), P2pError> {
        if !self.peers.contains_key(peer) {
            return Err(P2pError::UnknownSender);
        }
        self.rooms
            .entry(topic.to_string())
            .or_default()
            .insert(*peer);
        Ok(())
    }

    pub fn leave_room(&mut self, peer: &P2pId, topic: &str) {
        if let Some(members) = self.rooms.get_mut(topic) {
            members.remove(peer);
        }
    }

    pub fn post_room(
        &mut self,
        from: &P2pAccount,
        topic: &str,
        payload: &[u8],
    ) -> Result<usize, P2pError> {
        self.check_sender(from)?;
        let members = self.rooms.get(topic).cloned().unwrap_or_default();
        if !members.contains(&from.id()) {
            return Err(P2pError::NotJoined(topic.to_string()));
        }
        self.next_tick();
        let msg = P2pMessage::new(
            from,
            MessageKind::Room,
            Some(topic.to_string()),
            payload.to_vec(),
            None,
        );
        let mut n = 0;
        for m in members.iter().filter(|m| **m != from.id()) {
            self.deliver(&msg, m);
            n += 1;
        }
        Ok(n)
    }

    pub fn inbox_len(&self, peer: &P2pId) -> usize {
        self.peers.get(peer).map_or(0, |p| p.inbox.len())
    }

    pub fn drain_inbox(&mut self, peer: &P2pId) -> Vec<P2pMessage> {
        self.peers
            .get_mut(peer)
            .map(|p| p.inbox.drain(..).collect())
            .unwrap_or_default()
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::{Call, EnclaveKind, SplitSpec};
    use crate::crypto::digest;
    use crate::ledger::{ChainAccount, LedgerConfig};

    fn peers(n: usize, net: &mut Network, rng: &mut Rng) -> Vec<P2pAccount> {
        (0..n)
            .map(|_| {
                let a = P2pAccount::create(rng);
                net.register(&a);
                a
            })
            .collect()
    }

    /// A chain with one audited package and one training instance mined,
    /// plus `trainer`'s model registration queued (and mined if `mine`).
    fn chain_with_model(rng: &mut Rng, mine: bool) -> (Chain, ChainAccount, ChainAccount) {
        let mut dev = ChainAccount::create(rng);
        let mut trainer = ChainAccount::create(rng);
        let other = ChainAccount::create(rng);
        let enclave = KeyPair::generate(rng);
        let miner = KeyPair::generate(rng);
        let mut chain = Chain::new(LedgerConfig::default(), &[]);
        let measurement = digest(b"image");
        for call in [
            Call::RegisterPackage {
                source_hash: digest(b"src"),
                measurement,
            },
            Call::RegisterAudit {
                measurement,
                report_hash: digest(b"audit"),
            },
            Call::RegisterInstance {
                measurement,
                enclave_pubkey: enclave.public(),
                ias_report_hash: digest(b"ias"),
                kind: EnclaveKind::Training,
            },
        ] {
            chain.submit_tx(dev.call(&call)).unwrap();
        }
        chain.mine_block(&miner, 1);
        let call = Call::RegisterModel {
            whitepaper_hash: digest(b"wp"),
            training_enclave: enclave.public(),
            price: 100,
            split: SplitSpec {
                trainer_bp: 4000,
                runner_bp: 2000,
                donor_pool_bp: 4000,
            },
        };
        chain.submit_tx(trainer.call(&call)).unwrap();
        if mine {
            chain.mine_block(&miner, 2);
            assert!(chain.contracts().registry.is_trainer(&trainer.id()));
        }
        (chain, trainer, other)
    }

    #[test]
    fn register_and_find() {
        let mut rng = Rng::new(1);
        let mut net = Network::new();
        let ps = peers(100, &mut net, &mut rng);
        for p in &ps {
            assert!(net.find_peer(&p.id()).is_some());
        }
        let stranger = P2pAccount::create(&mut rng);
        assert_eq!(net.find_peer(&stranger.id()), None);
        let endpoints: BTreeSet<_> = ps.iter().map(|p| net.find_peer(&p.id()).unwrap()).collect();
        assert_eq!(endpoints.len(), 100);
    }

    #[test]
    fn unicast_is_fifo() {
        let mut rng = Rng::new(2);
        let mut net = Network::new();
        let ps = peers(2, &mut net, &mut rng);
        for i in 0..10u8 {
            net.send_unicast(&ps[0], &ps[1].id(), &[i]).unwrap();
        }
        let got: Vec<u8> = net
            .drain_inbox(&ps[1].id())
            .iter()
            .map(|m| m.payload[0])
            .collect();
        assert_eq!(got, (0..10).collect::<Vec<_>>());
        let stranger = P2pAccount::create(&mut rng);
        assert_eq!(
            net.send_unicast(&ps[0], &stranger.id(), b"x"),
            Err(P2pError::Undeliverable)
        );
        assert_eq!(net.inbox_len(&ps[1].id()), 0);
    }

    #[test]
    fn broadcast_requires_trainer_binding() {
        let mut rng = Rng::new(3);
        let mut net = Network::new();
        let ps = peers(5, &mut net, &mut rng);
        let (chain, trainer, other) = chain_with_model(&mut rng, true);

        let good = TrainerBinding::create(trainer.keys(), &ps[0].id());
        assert_eq!(
            net.send_broadcast(&ps[0], b"recruit", Some(good.clone()), &chain),
            Ok(4)
        );
        for p in &ps[1..] {
            let m = net.drain_inbox(&p.id());
            assert_eq!(m.len(), 1);
            assert!(m[0].signature_valid());
        }

        let not_trainer = TrainerBinding::create(other.keys(), &ps[0].id());
        assert_eq!(
            net.send_broadcast(&ps[0], b"x", Some(not_trainer), &chain),
            Err(P2pError::NotTrainer)
        );
        // a binding lifted from another peer's broadcast
        assert_eq!(
            net.send_broadcast(&ps[1], b"x", Some(good), &chain),
            Err(P2pError::BadBinding)
        );
        assert_eq!(
            net.send_broadcast(&ps[1], b"x", None, &chain),
            Err(P2pError::MissingBinding)
        );
        assert!(ps.iter().all(|p| net.inbox_len(&p.id()) == 0));
    }

    #[test]
    fn pending_registration_does_not_count() {
        let mut rng = Rng::new(4);
        let mut net = Network::new();
        let ps = peers(2, &mut net, &mut rng);
        let (chain, trainer, _) = chain_with_model(&mut rng, false);
        let b = TrainerBinding::create(trainer.keys(), &ps[0].id());
        assert_eq!(
            net.send_broadcast(&ps[0], b"x", Some(b), &chain),
            Err(P2pError::NotTrainer)
        );
    }

    #[test]
    fn rooms() {
        let mut rng = Rng::new(5);
        let mut net = Network::new();
        let ps = peers(4, &mut net, &mut rng);
        assert_eq!(
            net.post_room(&ps[0], "t", b"x"),
            Err(P2pError::NotJoined("t".into()))
        );
        for p in &ps[..3] {
            net.join_room(&p.id(), "t").unwrap();
        }
        assert_eq!(net.post_room(&ps[0], "t", b"hi"), Ok(2));
        assert_eq!(net.inbox_len(&ps[3].id()), 0);
        net.leave_room(&ps[0].id(), "t");
        assert!(net.post_room(&ps[0], "t", b"x").is_err());
        assert_eq!(net.trace().len(), 2);
        assert!(net.trace()[0].to_string().starts_with("1 room "));
    }

    #[test]
    fn only_broadcasts_link_identity_spaces() {
        let mut rng = Rng::new(6);
        let mut net = Network::new();
        let ps = peers(3, &mut net, &mut rng);
        let (chain, trainer, _) = chain_with_model(&mut rng, true);
        net.send_unicast(&ps[0], &ps[1].id(), b"a").unwrap();
        net.join_room(&ps[1].id(), "r").unwrap();
        net.join_room(&ps[2].id(), "r").unwrap();
        net.post_room(&ps[1], "r", b"b").unwrap();
        net.send_broadcast(
            &ps[0],
            b"c",
            Some(TrainerBinding::create(trainer.keys(), &ps[0].id())),
            &chain,
        )
        .unwrap();
        let chain_id = trainer.id();
        for p in &ps {
            for m in net.drain_inbox(&p.id()) {
                let links = m
                    .binding
                    .as_ref()
                    .is_some_and(|b| b.chain_account == chain_id);
                assert_eq!(links, m.kind == MessageKind::Broadcast);
            }
        }
    }
}
