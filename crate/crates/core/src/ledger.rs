//! In-process hash-linked ledger.
//!
//! Mining is "the scheduled miner signs the block": no difficulty target, no
//! fees, logical timestamps. Each block carries its transactions plus one
//! receipt per transaction recording the contract outcome, and both are
//! covered by the miner signature and the block hash.
//!
//! Chain dump format: one line per block, eight space-separated fields in
//! this order, every byte value lowercase hex:
//!
//! ```text
//! index prev_hash timestamp miner miner_signature block_hash txs receipts
//! ```
//!
//! `index` and `timestamp` are decimal; `txs` and `receipts` are the hex of
//! the canonical encoding of the transaction and receipt lists.

use std::collections::{BTreeMap, VecDeque};

use serde::Serialize;
use thiserror::Error;

use crate::codec::{Decode, DecodeError, Decoder, Encode, Encoder};
use crate::contracts::{AccountId, Call, CallDecodeError, ContractError, Contracts, Credit};
use crate::crypto::{digest, verify, Digest, KeyPair, PublicKey, Rng, Signature, SIGNATURE_LEN};

pub const DEFAULT_MAX_TXS_PER_BLOCK: usize = 64;

/// A chain identity: key pair plus the next nonce this holder will use.
#[derive(Debug, Clone)]
pub struct ChainAccount {
    keys: KeyPair,
    nonce: u64,
}

impl ChainAccount {
    /// No authority is consulted; any key pair is a valid account.
    pub fn create(rng: &mut Rng) -> Self {
        Self {
            keys: KeyPair::generate(rng),
            nonce: 0,
        }
    }

    pub fn from_keys(keys: KeyPair) -> Self {
        Self { keys, nonce: 0 }
    }

    pub fn id(&self) -> AccountId {
        self.keys.public()
    }

    pub fn nonce(&self) -> u64 {
        self.nonce
    }

    pub fn keys(&self) -> &KeyPair {
        &self.keys
    }

    /// Signs a transaction with the current nonce and advances it.
    pub fn transact(&mut self, payload: Payload) -> Transaction {
        let tx = Transaction::signed(&self.keys, self.nonce, payload);
        self.nonce += 1;
        tx
    }

    pub fn call(&mut self, call: &Call) -> Transaction {
        self.transact(Payload::from_call(call))
    }

    /// Resynchronizes with the chain after a rejected submission.
    pub fn set_nonce(&mut self, nonce: u64) {
        self.nonce = nonce;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Noop,
    Call {
        contract: String,
        operation: String,
        args: Vec<u8>,
    },
}

impl Payload {
    pub fn from_call(call: &Call) -> Self {
        Payload::Call {
            contract: call.contract().to_string(),
            operation: call.operation().to_string(),
            args: call.args(),
        }
    }

    pub fn decode_call(&self) -> Result<Option<Call>, CallDecodeError> {
        match self {
            Payload::Noop => Ok(None),
            Payload::Call {
                contract,
                operation,
                args,
            } => Call::from_parts(contract, operation, args).map(Some),
        }
    }
}

impl Encode for Payload {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            Payload::Noop => {
                enc.u8(0);
            }
            Payload::Call {
                contract,
                operation,
                args,
            } => {
                enc.u8(1).str(contract).str(operation).bytes(args);
            }
        }
    }
}

impl Decode for Payload {
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        match dec.u8()? {
            0 => Ok(Payload::Noop),
            1 => Ok(Payload::Call {
                contract: dec.str()?,
                operation: dec.str()?,
                args: dec.bytes()?,
            }),
            t => Err(dec.err(format!("invalid payload tag {t}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub sender: AccountId,
    pub nonce: u64,
    pub payload: Payload,
    pub signature: Signature,
}

impl Transaction {
    pub fn signing_bytes(sender: &AccountId, nonce: u64, payload: &Payload) -> Vec<u8> {
        let mut enc = Encoder::tagged("genie/tx");
        enc.put(sender).u64(nonce).put(payload);
        enc.finish()
    }

    pub fn signed(keys: &KeyPair, nonce: u64, payload: Payload) -> Self {
        let sender = keys.public();
        let signature = keys.sign(&Self::signing_bytes(&sender, nonce, &payload));
        Self {
            sender,
            nonce,
            payload,
            signature,
        }
    }

    pub fn signature_valid(&self) -> bool {
        verify(
            &self.sender,
            &Self::signing_bytes(&self.sender, self.nonce, &self.payload),
            &self.signature,
        )
    }

    pub fn hash(&self) -> Digest {
        digest(&self.to_bytes())
    }
}

impl Encode for Transaction {
    fn encode(&self, enc: &mut Encoder) {
        enc.put(&self.sender)
            .u64(self.nonce)
            .put(&self.payload)
            .fixed(&self.signature.bytes);
    }
}

impl Decode for Transaction {
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let sender: PublicKey = dec.get()?;
        let nonce = dec.u64()?;
        let payload = dec.get()?;
        let sig: [u8; SIGNATURE_LEN] = dec.array()?;
        Ok(Self {
            sender,
            nonce,
            payload,
            signature: Signature::from_parts(sig, sender),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum TxStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Receipt {
    pub status: TxStatus,
    pub model_id: Option<Digest>,
    pub credits: Vec<Credit>,
}

impl Receipt {
    pub fn ok(&self) -> bool {
        self.status == TxStatus::Ok
    }
}

impl Encode for Receipt {
    fn encode(&self, enc: &mut Encoder) {
        match &self.status {
            TxStatus::Ok => enc.u8(0),
            TxStatus::Failed(reason) => enc.u8(1).str(reason),
        };
        enc.put(&self.model_id).put(&self.credits);
    }
}

impl Decode for Receipt {
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let status = match dec.u8()? {
            0 => TxStatus::Ok,
            1 => TxStatus::Failed(dec.str()?),
            t => return Err(dec.err(format!("invalid status tag {t}"))),
        };
        Ok(Self {
            status,
            model_id: dec.get()?,
            credits: dec.get()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub index: u64,
    pub prev_hash: Digest,
    pub timestamp: u64,
    pub txs: Vec<Transaction>,
    pub receipts: Vec<Receipt>,
    pub miner: AccountId,
    pub miner_signature: Signature,
    pub block_hash: Digest,
}

impl Block {
    /// The fixed block 0.
    pub fn genesis() -> Self {
        let mut b = Block {
            index: 0,
            prev_hash: Digest::default(),
            timestamp: 0,
            txs: Vec::new(),
            receipts: Vec::new(),
            miner: PublicKey::default(),
            miner_signature: Signature::from_parts([0; SIGNATURE_LEN], PublicKey::default()),
            block_hash: Digest::default(),
        };
        b.block_hash = b.compute_hash();
        b
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::tagged("genie/block");
        enc.u64(self.index)
            .put(&self.prev_hash)
            .u64(self.timestamp)
            .put(&self.miner)
            .put(&self.txs)
            .put(&self.receipts);
        enc.finish()
    }

    pub fn compute_hash(&self) -> Digest {
        let mut bytes = self.signing_bytes();
        bytes.extend_from_slice(&self.miner_signature.bytes);
        digest(&bytes)
    }

    pub fn sign_and_seal(&mut self, miner: &KeyPair) {
        self.miner = miner.public();
        self.miner_signature = miner.sign(&self.signing_bytes());
        self.block_hash = self.compute_hash();
    }
}

impl Encode for Block {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.index)
            .put(&self.prev_hash)
            .u64(self.timestamp)
            .put(&self.miner)
            .fixed(&self.miner_signature.bytes)
            .put(&self.block_hash)
            .put(&self.txs)
            .put(&self.receipts);
    }
}

impl Decode for Block {
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let index = dec.u64()?;
        let prev_hash = dec.get()?;
        let timestamp = dec.u64()?;
        let miner: PublicKey = dec.get()?;
        let sig: [u8; SIGNATURE_LEN] = dec.array()?;
        Ok(Self {
            index,
            prev_hash,
            timestamp,
            miner,
            miner_signature: Signature::from_parts(sig, miner),
            block_hash: dec.get()?,
            txs: dec.get()?,
            receipts: dec.get()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TxRejection {
    #[error("bad signature")]
    Signature,
    #[error("bad nonce: expected {expected}, got {got}")]
    Nonce { expected: u64, got: u64 },
    #[error("{0}")]
    UnknownOperation(CallDecodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum InvalidReason {
    Genesis,
    Index,
    Link,
    Hash,
    MinerSignature,
    TxSignature,
    Nonce,
    ReceiptCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize)]
#[error("chain invalid at block {index}: {reason:?}")]
pub struct ChainInvalid {
    pub index: u64,
    pub reason: InvalidReason,
}

/// Checks every block in order and reports the first failure.
pub fn validate_chain(blocks: &[Block]) -> Result<(), ChainInvalid> {
    let fail = |index: usize, reason| {
        Err(ChainInvalid {
            index: index as u64,
            reason,
        })
    };
    let Some(first) = blocks.first() else {
        return fail(0, InvalidReason::Genesis);
    };
    if *first != Block::genesis() {
        return fail(0, InvalidReason::Genesis);
    }
    let mut nonces: BTreeMap<AccountId, u64> = BTreeMap::new();
    for (i, pair) in blocks.windows(2).enumerate() {
        let (prev, b) = (&pair[0], &pair[1]);
        let i = i + 1;
        if b.index != i as u64 {
            return fail(i, InvalidReason::Index);
        }
        if b.prev_hash != prev.block_hash {
            return fail(i, InvalidReason::Link);
        }
        if b.compute_hash() != b.block_hash {
            return fail(i, InvalidReason::Hash);
        }
        if !verify(&b.miner, &b.signing_bytes(), &b.miner_signature) {
            return fail(i, InvalidReason::MinerSignature);
        }
        if b.txs.len() != b.receipts.len() {
            return fail(i, InvalidReason::ReceiptCount);
        }
        for tx in &b.txs {
            if !tx.signature_valid() {
                return fail(i, InvalidReason::TxSignature);
            }
            let expected = nonces.entry(tx.sender).or_insert(0);
            if tx.nonce != *expected {
                return fail(i, InvalidReason::Nonce);
            }
            *expected += 1;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgerConfig {
    pub max_txs_per_block: usize,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        Self {
            max_txs_per_block: DEFAULT_MAX_TXS_PER_BLOCK,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TxFilter {
    pub sender: Option<AccountId>,
    pub contract: Option<String>,
    pub operation: Option<String>,
    pub model_id: Option<Digest>,
}

/// A mined transaction with its position and outcome.
#[derive(Debug, Clone, Copy)]
pub struct MinedTx<'a> {
    pub block: u64,
    pub tx: &'a Transaction,
    pub receipt: &'a Receipt,
}

impl MinedTx<'_> {
    pub fn call(&self) -> Option<Call> {
        self.tx.payload.decode_call().ok().flatten()
    }
}

#[derive(Debug, Clone)]
pub struct Chain {
    config: LedgerConfig,
    blocks: Vec<Block>,
    pending: VecDeque<Transaction>,
    contracts: Contracts,
    next_nonce: BTreeMap<AccountId, u64>,
}

impl Chain {
    pub fn new(config: LedgerConfig, allocations: &[(AccountId, u64)]) -> Self {
        Self {
            config,
            blocks: vec![Block::genesis()],
            pending: VecDeque::new(),
            contracts: Contracts::with_allocations(allocations),
            next_nonce: BTreeMap::new(),
        }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn height(&self) -> u64 {
        self.blocks.len() as u64 - 1
    }

    pub fn pending(&self) -> &VecDeque<Transaction> {
        &self.pending
    }

    /// Contract state as of the last mined block.
    pub fn contracts(&self) -> &Contracts {
        &self.contracts
    }

    /// Nonce the next submission from `account` must carry.
    pub fn next_nonce(&self, account: &AccountId) -> u64 {
        self.next_nonce.get(account).copied().unwrap_or(0)
    }

    pub fn submit_tx(&mut self, tx: Transaction) -> Result<(), TxRejection> {
        if !tx.signature_valid() {
            return Err(TxRejection::Signature);
        }
        let expected = self.next_nonce(&tx.sender);
        if tx.nonce != expected {
            return Err(TxRejection::Nonce {
                expected,
                got: tx.nonce,
            });
        }
        tx.payload
            .decode_call()
            .map_err(TxRejection::UnknownOperation)?;
        self.next_nonce.insert(tx.sender, expected + 1);
        self.pending.push_back(tx);
        Ok(())
    }

    /// Drains up to `max_txs_per_block` pending transactions in FIFO order,
    /// executes each against contract state, and appends the signed block.
    pub fn mine_block(&mut self, miner: &KeyPair, timestamp: u64) -> &Block {
        let take = self.pending.len().min(self.config.max_txs_per_block);
        let txs: Vec<Transaction> = self.pending.drain(..take).collect();
        let receipts = txs.iter().map(|tx| self.apply(tx)).collect();
        let prev = self.blocks.last().expect("genesis always present");
        let mut block = Block {
            index: prev.index + 1,
            prev_hash: prev.block_hash,
            timestamp,
            txs,
            receipts,
            miner: miner.public(),
            miner_signature: Signature::from_parts([0; SIGNATURE_LEN], miner.public()),
            block_hash: Digest::default(),
        };
        block.sign_and_seal(miner);
        self.blocks.push(block);
        self.blocks.last().expect("just pushed")
    }

    fn apply(&mut self, tx: &Transaction) -> Receipt {
        let call = match tx.payload.decode_call() {
            Ok(Some(call)) => call,
            Ok(None) => {
                return Receipt {
                    status: TxStatus::Ok,
                    model_id: None,
                    credits: Vec::new(),
                }
            }
            // submit_tx already rejects these
            Err(e) => {
                return Receipt {
                    status: TxStatus::Failed(e.to_string()),
                    model_id: None,
                    credits: Vec::new(),
                }
            }
        };
        let snapshot = self.contracts.clone();
        match self.contracts.execute(tx.sender, &call) {
            Ok(effects) => Receipt {
                status: TxStatus::Ok,
                model_id: effects.model_id.or(call.model_arg()),
                credits: effects.credits,
            },
            Err(e) => {
                self.contracts = snapshot;
                Receipt {
                    status: TxStatus::Failed(failure_reason(&e)),
                    model_id: call.model_arg(),
                    credits: Vec::new(),
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), ChainInvalid> {
        validate_chain(&self.blocks)
    }

    pub fn query_txs(&self, filter: &TxFilter) -> Vec<MinedTx<'_>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for (tx, receipt) in b.txs.iter().zip(&b.receipts) {
                if filter.sender.is_some_and(|s| s != tx.sender) {
                    continue;
                }
                if filter.model_id.is_some() && filter.model_id != receipt.model_id {
                    continue;
                }
                if filter.contract.is_some() || filter.operation.is_some() {
                    let Payload::Call {
                        contract,
                        operation,
                        ..
                    } = &tx.payload
                    else {
                        continue;
                    };
                    if filter.contract.as_ref().is_some_and(|c| c != contract)
                        || filter.operation.as_ref().is_some_and(|o| o != operation)
                    {
                        continue;
                    }
                }
                out.push(MinedTx {
                    block: b.index,
                    tx,
                    receipt,
                });
            }
        }
        out
    }

    /// Receipt of a mined transaction, looked up by hash.
    pub fn receipt_for(&self, tx_hash: &Digest) -> Option<&Receipt> {
        self.blocks.iter().rev().find_map(|b| {
            b.txs
                .iter()
                .position(|t| t.hash() == *tx_hash)
                .map(|i| &b.receipts[i])
        })
    }
}

fn failure_reason(e: &ContractError) -> String {
    e.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct DumpError {
    pub line: usize,
    pub message: String,
}

pub fn dump_chain(blocks: &[Block]) -> String {
    let mut out = String::new();
    for b in blocks {
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {}\n",
            b.index,
            b.prev_hash,
            b.timestamp,
            b.miner,
            hex::encode(b.miner_signature.bytes),
            b.block_hash,
            hex::encode(b.txs.to_bytes()),
            hex::encode(b.receipts.to_bytes()),
        ));
    }
    out
}

pub fn parse_dump(text: &str) -> Result<Vec<Block>, DumpError> {
    if text.is_empty() {
        return Err(DumpError {
            line: 1,
            message: "empty dump".into(),
        });
    }
    if !text.ends_with('\n') {
        let line = text.lines().count();
        return Err(DumpError {
            line,
            message: "truncated: missing final newline".into(),
        });
    }
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            parse_line(l).map_err(|message| DumpError {
                line: i + 1,
                message,
            })
        })
        .collect()
}

fn parse_line(line: &str) -> Result<Block, String> {
    let fields: Vec<&str> = line.split(' ').collect();
    if fields.len() != 8 {
        return Err(format!("expected 8 fields, found {}", fields.len()));
    }
    let num = |s: &str, what: &str| s.parse::<u64>().map_err(|e| format!("{what}: {e}"));
    let hexed = |s: &str, what: &str| hex::decode(s).map_err(|e| format!("{what}: {e}"));
    let fixed = |s: &str, what: &str| -> Result<[u8; 32], String> {
        hexed(s, what)?
            .try_into()
            .map_err(|_| format!("{what}: expected 32 bytes"))
    };
    let miner = PublicKey(fixed(fields[3], "miner")?);
    let sig: [u8; SIGNATURE_LEN] = hexed(fields[4], "miner_signature")?
        .try_into()
        .map_err(|_| "miner_signature: expected 64 bytes".to_string())?;
    Ok(Block {
        index: num(fields[0], "index")?,
        prev_hash: Digest(fixed(fields[1], "prev_hash")?),
        timestamp: num(fields[2], "timestamp")?,
        miner,
        miner_signature: Signature::from_parts(sig, miner),
        block_hash: Digest(fixed(fields[5], "block_hash")?),
        txs: Vec::<Transaction>::from_bytes(&hexed(fields[6], "txs")?)
            .map_err(|e| format!("txs: {e}"))?,
        receipts: Vec::<Receipt>::from_bytes(&hexed(fields[7], "receipts")?)
            .map_err(|e| format!("receipts: {e}"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::ModelStatus;
    use rand::Rng as _;

    fn setup(max: usize) -> (Chain, Vec<ChainAccount>, KeyPair) {
        let mut rng = Rng::new(21);
        let accounts: Vec<_> = (0..3).map(|_| ChainAccount::create(&mut rng)).collect();
        let alloc: Vec<_> = accounts.iter().map(|a| (a.id(), 1000)).collect();
        let miner = KeyPair::generate(&mut rng);
        (
            Chain::new(
                LedgerConfig {
                    max_txs_per_block: max,
                },
                &alloc,
            ),
            accounts,
            miner,
        )
    }

    fn populated(blocks: usize) -> (Chain, KeyPair) {
        let (mut chain, mut accts, miner) = setup(8);
        for i in 0..blocks {
            for a in accts.iter_mut().take(1 + i % 3) {
                let call = Call::RegisterData {
                    report_hash: digest(&[i as u8, a.nonce() as u8]),
                };
                chain.submit_tx(a.call(&call)).unwrap();
            }
            chain.mine_block(&miner, i as u64 + 1);
        }
        (chain, miner)
    }

    #[test]
    fn fresh_accounts() {
        let mut rng = Rng::new(1);
        let a = ChainAccount::create(&mut rng);
        let b = ChainAccount::create(&mut Rng::new(2));
        assert_ne!(a.id(), b.id());
        assert_eq!(a.nonce(), 0);
    }

    #[test]
    fn new_account_noop_is_mined() {
        let (mut chain, _, miner) = setup(4);
        let mut acct = ChainAccount::create(&mut Rng::new(77));
        let tx = acct.transact(Payload::Noop);
        let h = tx.hash();
        chain.submit_tx(tx).unwrap();
        chain.mine_block(&miner, 1);
        assert!(chain.receipt_for(&h).unwrap().ok());
        assert!(chain.validate().is_ok());
    }

    #[test]
    fn submit_rejections_are_distinct() {
        let (mut chain, mut accts, _) = setup(4);
        let tx = accts[0].transact(Payload::Noop);
        chain.submit_tx(tx.clone()).unwrap();
        assert_eq!(chain.pending().len(), 1);
        assert_eq!(
            chain.submit_tx(tx.clone()),
            Err(TxRejection::Nonce {
                expected: 1,
                got: 0
            })
        );

        let mut forged = accts[1].transact(Payload::Noop);
        forged.sender = accts[2].id();
        forged.signature = Signature::from_parts(forged.signature.bytes, accts[2].id());
        assert_eq!(chain.submit_tx(forged), Err(TxRejection::Signature));

        let unknown = accts[2].transact(Payload::Call {
            contract: "registry".into(),
            operation: "mint".into(),
            args: vec![],
        });
        assert!(matches!(
            chain.submit_tx(unknown),
            Err(TxRejection::UnknownOperation(_))
        ));
        assert_eq!(chain.pending().len(), 1);
    }

    #[test]
    fn fifo_and_block_cap() {
        let (mut chain, mut accts, miner) = setup(2);
        let hashes: Vec<_> = (0..3)
            .map(|_| {
                let tx = accts[0].transact(Payload::Noop);
                let h = tx.hash();
                chain.submit_tx(tx).unwrap();
                h
            })
            .collect();
        let b = chain.mine_block(&miner, 1).clone();
        assert_eq!(
            b.txs.iter().map(Transaction::hash).collect::<Vec<_>>(),
            hashes[..2]
        );
        assert_eq!(chain.pending().len(), 1);
        let empty = chain.mine_block(&miner, 2);
        assert_eq!(empty.txs.len(), 1);
        let empty = chain.mine_block(&miner, 3);
        assert!(empty.txs.is_empty());
        assert!(chain.validate().is_ok());
    }

    #[test]
    fn failed_call_leaves_state_identical() {
        let (mut chain, mut accts, miner) = setup(4);
        let before = chain.contracts().state_bytes();
        let bad = Call::SetModelStatus {
            model_id: digest(b"none"),
            status: ModelStatus::Training,
            runner_enclave: None,
        };
        let tx = accts[0].call(&bad);
        let h = tx.hash();
        chain.submit_tx(tx).unwrap();
        chain.mine_block(&miner, 1);
        let r = chain.receipt_for(&h).unwrap();
        assert!(matches!(r.status, TxStatus::Failed(_)));
        assert_eq!(chain.contracts().state_bytes(), before);
        // nonce still consumed
        assert_eq!(chain.next_nonce(&accts[0].id()), 1);
        assert!(chain.validate().is_ok());
    }

    #[test]
    fn tamper_tx_list_fails_hash_at_that_block() {
        let (chain, _) = populated(10);
        let mut blocks = chain.blocks().to_vec();
        assert!(validate_chain(&blocks).is_ok());
        if let Payload::Call { args, .. } = &mut blocks[4].txs[0].payload {
            args[0] ^= 0xff;
        }
        assert_eq!(
            validate_chain(&blocks),
            Err(ChainInvalid {
                index: 4,
                reason: InvalidReason::Hash
            })
        );
    }

    #[test]
    fn resigning_a_tampered_block_breaks_the_next_link() {
        let (chain, _) = populated(10);
        let mut blocks = chain.blocks().to_vec();
        blocks[4].timestamp += 100;
        let attacker = KeyPair::generate(&mut Rng::new(666));
        blocks[4].sign_and_seal(&attacker);
        assert_eq!(
            validate_chain(&blocks),
            Err(ChainInvalid {
                index: 5,
                reason: InvalidReason::Link
            })
        );

        // keeping the original miner field but signing with another key
        let mut blocks = chain.blocks().to_vec();
        blocks[4].timestamp += 100;
        let original_miner = blocks[4].miner;
        blocks[4].miner_signature = attacker.sign(&blocks[4].signing_bytes());
        blocks[4].miner = original_miner;
        blocks[4].miner_signature.signer = original_miner;
        blocks[4].block_hash = blocks[4].compute_hash();
        assert_eq!(
            validate_chain(&blocks),
            Err(ChainInvalid {
                index: 4,
                reason: InvalidReason::MinerSignature
            })
        );
    }

    #[test]
    fn append_only_hashes() {
        let (mut chain, miner) = populated(5);
        let before: Vec<_> = chain.blocks().iter().map(|b| b.block_hash).collect();
        chain.mine_block(&miner, 99);
        let after: Vec<_> = chain.blocks().iter().map(|b| b.block_hash).collect();
        assert_eq!(&after[..before.len()], &before[..]);
    }

    #[test]
    fn query_filters() {
        let (chain, _) = populated(4);
        let all = chain.query_txs(&TxFilter::default());
        let total: usize = chain.blocks().iter().map(|b| b.txs.len()).sum();
        assert_eq!(all.len(), total);
        let stranger = TxFilter {
            sender: Some(PublicKey([9; 32])),
            ..Default::default()
        };
        assert!(chain.query_txs(&stranger).is_empty());
        let by_op = TxFilter {
            operation: Some("register_data".into()),
            ..Default::default()
        };
        assert_eq!(chain.query_txs(&by_op).len(), total);
        let sender = all[0].tx.sender;
        let mine = chain.query_txs(&TxFilter {
            sender: Some(sender),
            ..Default::default()
        });
        assert!(mine.iter().all(|m| m.tx.sender == sender));
        assert!(mine.windows(2).all(|w| w[0].tx.nonce + 1 == w[1].tx.nonce));
    }

    #[test]
    fn pending_txs_are_not_queryable() {
        let (mut chain, mut accts, _) = setup(4);
        chain.submit_tx(accts[0].transact(Payload::Noop)).unwrap();
        assert!(chain.query_txs(&TxFilter::default()).is_empty());
    }

    #[test]
    fn dump_round_trip_and_errors() {
        let (chain, _) = populated(6);
        let text = dump_chain(chain.blocks());
        assert_eq!(text.lines().count(), 7);
        let back = parse_dump(&text).unwrap();
        assert_eq!(back, chain.blocks());
        assert!(validate_chain(&back).is_ok());

        let truncated = &text[..text.len() - 20];
        assert!(parse_dump(truncated).is_err());
        let missing_field = text.replacen(' ', "", 1);
        assert_eq!(parse_dump(&missing_field).unwrap_err().line, 1);
    }

    #[test]
    fn nonces_form_gapless_sequences() {
        let (chain, _) = populated(12);
        let mut per: BTreeMap<AccountId, Vec<u64>> = BTreeMap::new();
        for m in chain.query_txs(&TxFilter::default()) {
            per.entry(m.tx.sender).or_default().push(m.tx.nonce);
        }
        for seq in per.values() {
            assert_eq!(*seq, (0..seq.len() as u64).collect::<Vec<_>>());
        }
    }

    #[test]
    fn random_bit_flips_are_caught_near_the_site() {
        let (chain, _) = populated(8);
        let mut rng = Rng::new(5);
        for _ in 0..200 {
            let mut blocks = chain.blocks().to_vec();
            let i = rng.gen_range(1..blocks.len());
            let mut bytes = blocks[i].to_bytes();
            let bit = rng.gen_range(0..bytes.len() * 8);
            bytes[bit / 8] ^= 1 << (bit % 8);
            match Block::from_bytes(&bytes) {
                Err(_) => continue,
                Ok(b) => blocks[i] = b,
            }
            let err = validate_chain(&blocks).unwrap_err();
            assert!(
                err.index as usize >= i && err.index as usize <= i + 1,
                "{err:?} for tamper at {i}"
            );
        }
    }
}
