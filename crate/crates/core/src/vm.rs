//! Model VM: a small stack machine with a randomized-depth input channel, a
//! chain-gated output channel, and a transactional object store that several
//! instances can share.
//!
//! Assembly is one instruction per line. `#` starts a comment; blank lines
//! are dropped. Jump targets are 0-based instruction indices. `INPUT addr`
//! pushes the next record's features then its label, or jumps to `addr` when
//! the channel is exhausted.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::sync::{Arc, Condvar, Mutex};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::Serialize;
use thiserror::Error;

use crate::codec::{Decode, DecodeError, Decoder, Encode, Encoder};
use crate::crypto::{digest, Digest, Rng};

pub const DEFAULT_STEP_BUDGET: u64 = 1_000_000;
pub const DEFAULT_DUMMY_P: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ProgramKind {
    Training,
    Query,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Value {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Value {
    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Value::Scalar(s) => Some(*s),
            Value::Vector(_) => None,
        }
    }

    pub fn as_vector(&self) -> Option<&[f64]> {
        match self {
            Value::Vector(v) => Some(v),
            Value::Scalar(_) => None,
        }
    }
}

impl Encode for Value {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            Value::Scalar(s) => {
                enc.u8(0).f64(*s);
            }
            Value::Vector(v) => {
                enc.u8(1).put(v);
            }
        }
    }
}

impl Decode for Value {
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        match dec.u8()? {
            0 => Ok(Value::Scalar(dec.f64()?)),
            1 => Ok(Value::Vector(dec.get()?)),
            t => Err(dec.err(format!("invalid value tag {t}"))),
        }
    }
}

pub type Params = BTreeMap<String, Value>;

/// Canonical bytes of a parameter map.
pub fn params_bytes(params: &Params) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.len(params.len());
    for (k, v) in params {
        enc.str(k).put(v);
    }
    enc.finish()
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<Params, DecodeError> {
    let mut dec = Decoder::new(bytes);
    let n = dec.seq_len()?;
    let mut out = Params::new();
    let mut last: Option<String> = None;
    for _ in 0..n {
        let k = dec.str()?;
        if last.as_ref().is_some_and(|l| *l >= k) {
            return Err(dec.err("keys out of order"));
        }
        out.insert(k.clone(), dec.get()?);
        last = Some(k);
    }
    dec.finish()?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Instr {
    Const(f64),
    VConst(Vec<f64>),
    Input(usize),
    Dot,
    Add,
    Sub,
    Mul,
    VAdd,
    VScale,
    Sigmoid,
    Dup,
    Swap,
    Pop,
    Load(String),
    Store(String),
    Begin,
    Commit,
    Abort,
    Jmp(usize),
    Jz(usize),
    Emit,
    Halt,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct AsmError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub instructions: Vec<Instr>,
    pub kind: ProgramKind,
    pub program_hash: Digest,
    pub text: String,
}

fn literal(tok: &str, line: usize) -> Result<f64, AsmError> {
    match tok.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(AsmError {
            line,
            message: format!("malformed literal {tok:?}"),
        }),
    }
}

pub fn assemble(text: &str, kind: ProgramKind) -> Result<Program, AsmError> {
    let mut canonical = String::new();
    let mut parsed: Vec<(usize, Instr, Option<usize>)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let code = raw.split('#').next().unwrap_or("");
        let toks: Vec<&str> = code.split_whitespace().collect();
        let Some((&op, args)) = toks.split_first() else {
            continue;
        };
        canonical.push_str(&toks.join(" "));
        canonical.push('\n');

        let err = |m: String| AsmError { line, message: m };
        let want = |n: usize| {
            if args.len() == n {
                Ok(())
            } else {
                Err(AsmError {
                    line,
                    message: format!("{op} takes {n} operand(s), got {}", args.len()),
                })
            }
        };
        let addr = |tok: &str| {
            tok.parse::<usize>()
                .map_err(|_| err(format!("malformed address {tok:?}")))
        };
        let (instr, target) = match op {
            "CONST" => {
                want(1)?;
                (Instr::Const(literal(args[0], line)?), None)
            }
            "VCONST" => {
                want(1)?;
                let v = args[0]
                    .split(',')
                    .map(|t| literal(t, line))
                    .collect::<Result<Vec<_>, _>>()?;
                (Instr::VConst(v), None)
            }
            "INPUT" | "JMP" | "JZ" => {
                want(1)?;
                let a = addr(args[0])?;
                let ins = match op {
                    "INPUT" => Instr::Input(a),
                    "JMP" => Instr::Jmp(a),
                    _ => Instr::Jz(a),
                };
                (ins, Some(a))
            }
            "LOAD" | "STORE" => {
                want(1)?;
                let name = args[0].to_string();
                (
                    if op == "LOAD" {
                        Instr::Load(name)
                    } else {
                        Instr::Store(name)
                    },
                    None,
                )
            }
            _ => {
                let ins = match op {
                    "DOT" => Instr::Dot,
                    "ADD" => Instr::Add,
                    "SUB" => Instr::Sub,
                    "MUL" => Instr::Mul,
                    "VADD" => Instr::VAdd,
                    "VSCALE" => Instr::VScale,
                    "SIGMOID" => Instr::Sigmoid,
                    "DUP" => Instr::Dup,
                    "SWAP" => Instr::Swap,
                    "POP" => Instr::Pop,
                    "BEGIN" => Instr::Begin,
                    "COMMIT" => Instr::Commit,
                    "ABORT" => Instr::Abort,
                    "EMIT" => Instr::Emit,
                    "HALT" => Instr::Halt,
                    _ => return Err(err(format!("unknown opcode {op:?}"))),
                };
                want(0)?;
                (ins, None)
            }
        };
        parsed.push((line, instr, target));
    }
    let n = parsed.len();
    for (line, _, target) in &parsed {
        if let Some(t) = target {
            if *t >= n {
                return Err(AsmError {
                    line: *line,
                    message: format!("jump target {t} out of range 0..{n}"),
                });
            }
        }
    }
    Ok(Program {
        instructions: parsed.into_iter().map(|(_, i, _)| i).collect(),
        kind,
        program_hash: digest(canonical.as_bytes()),
        text: canonical,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trap {
    StackUnderflow,
    TypeMismatch(&'static str),
    DimensionMismatch,
    NoTransaction,
    NestedTransaction,
    UnknownObject(String),
    Gate,
    AttachDenied,
}

impl fmt::Display for Trap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Trap::StackUnderflow => f.write_str("stack underflow"),
            Trap::TypeMismatch(op) => write!(f, "type mismatch in {op}"),
            Trap::DimensionMismatch => f.write_str("vector dimension mismatch"),
            Trap::NoTransaction => f.write_str("no open transaction"),
            Trap::NestedTransaction => f.write_str("nested transaction"),
            Trap::UnknownObject(n) => write!(f, "unknown object {n:?}"),
            Trap::Gate => f.write_str("output gate closed"),
            Trap::AttachDenied => f.write_str("store attachment denied"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Status {
    Halted,
    BudgetExceeded,
    Trap(Trap),
    /// Stopped by crash injection.
    Crashed,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VmError {
    #[error("program kind {0:?} not allowed here")]
    WrongKind(ProgramKind),
    #[error("store already bound to another program")]
    AttachDenied,
    #[error("query program is not registered on chain")]
    GateRefused,
    #[error("one shard per program instance is required")]
    ShardMismatch,
}

#[derive(Debug, Default)]
struct StoreState {
    committed: Params,
    bound: Option<Digest>,
    commits: u64,
    history: Option<Vec<Params>>,
}

/// Transactional object store. One transaction is open at a time; `begin`
/// blocks until the store is free, so commits are serialized.
#[derive(Debug)]
pub struct ObjectStore {
    state: Mutex<StoreState>,
    busy: Mutex<bool>,
    free: Condvar,
    zero_dim: Option<usize>,
}

impl ObjectStore {
    /// Missing objects are errors on LOAD.
    pub fn new() -> Arc<Self> {
        Self::build(None, false)
    }

    /// Missing objects read as zero vectors of `dim`.
    pub fn zeroed(dim: usize) -> Arc<Self> {
        Self::build(Some(dim), false)
    }

    /// Like [`ObjectStore::zeroed`], keeping every committed state for audits.
    pub fn zeroed_with_history(dim: usize) -> Arc<Self> {
        Self::build(Some(dim), true)
    }

    fn build(zero_dim: Option<usize>, history: bool) -> Arc<Self> {
        let state = StoreState {
            history: history.then(|| vec![Params::new()]),
            ..Default::default()
        };
        Arc::new(Self {
            state: Mutex::new(state),
            busy: Mutex::new(false),
            free: Condvar::new(),
            zero_dim,
        })
    }

    /// Binds the store to a program hash on first attach.
    pub fn attach(&self, program_hash: &Digest) -> Result<(), VmError> {
        let mut st = self.state.lock().unwrap();
        match st.bound {
            None => {
                st.bound = Some(*program_hash);
                Ok(())
            }
            Some(h) if h == *program_hash => Ok(()),
            Some(_) => Err(VmError::AttachDenied),
        }
    }

    pub fn begin(self: &Arc<Self>) -> Txn {
        let mut busy = self.busy.lock().unwrap();
        while *busy {
            busy = self.free.wait(busy).unwrap();
        }
        *busy = true;
        Txn {
            store: Arc::clone(self),
            writes: Params::new(),
        }
    }

    pub fn snapshot(&self) -> Params {
        self.state.lock().unwrap().committed.clone()
    }

    pub fn commit_count(&self) -> u64 {
        self.state.lock().unwrap().commits
    }

    /// Every committed state in order, starting from the empty one.
    pub fn history(&self) -> Option<Vec<Params>> {
        self.state.lock().unwrap().history.clone()
    }

    /// Committed value, or the zero default.
    pub fn read(&self, name: &str) -> Option<Value> {
        let st = self.state.lock().unwrap();
        st.committed
            .get(name)
            .cloned()
            .or_else(|| self.zero_dim.map(|d| Value::Vector(vec![0.0; d])))
    }

    pub fn install(&self, params: Params) {
        let mut st = self.state.lock().unwrap();
        st.committed = params;
    }

    fn dummy_read(&self, pick: usize) {
        let st = self.state.lock().unwrap();
        if !st.committed.is_empty() {
            let _ = st.committed.values().nth(pick % st.committed.len());
        }
    }
}

/// An open transaction. Dropping it without `commit` discards its writes.
#[derive(Debug)]
pub struct Txn {
    store: Arc<ObjectStore>,
    writes: Params,
}

impl Txn {
    pub fn read(&self, name: &str) -> Option<Value> {
        self.writes
            .get(name)
            .cloned()
            .or_else(|| self.store.read(name))
    }

    pub fn write(&mut self, name: &str, v: Value) {
        self.writes.insert(name.to_string(), v);
    }

    pub fn commit(mut self) {
        let writes = std::mem::take(&mut self.writes);
        let mut st = self.store.state.lock().unwrap();
        st.committed.extend(writes);
        st.commits += 1;
        let snap = st.committed.clone();
        if let Some(h) = st.history.as_mut() {
            h.push(snap);
        }
    }
}

impl Drop for Txn {
    fn drop(&mut self) {
        *self.store.busy.lock().unwrap() = false;
        self.store.free.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Record {
    pub features: Vec<f64>,
    pub label: f64,
}

/// Input queue drained through a buffer whose depth is drawn once per
/// session from `[dmin, dmax]`.
#[derive(Debug, Clone)]
pub struct InputChannel {
    source: VecDeque<Record>,
    buffer: VecDeque<Record>,
    depth: usize,
    refills: u64,
}

impl InputChannel {
    pub fn new(records: Vec<Record>, dmin: usize, dmax: usize, buffer_rng: &mut Rng) -> Self {
        let depth = buffer_rng.gen_range(dmin.max(1)..=dmax.max(dmin).max(1));
        Self {
            source: records.into(),
            buffer: VecDeque::new(),
            depth,
            refills: 0,
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn refills(&self) -> u64 {
        self.refills
    }

    pub fn next_record(&mut self) -> Option<Record> {
        if self.buffer.is_empty() && !self.source.is_empty() {
            let n = self.depth.min(self.source.len());
            self.buffer.extend(self.source.drain(..n));
            self.refills += 1;
        }
        self.buffer.pop_front()
    }
}

/// Registered query hashes (read from chain) and everything emitted.
#[derive(Debug, Clone, Default)]
pub struct OutputGate {
    registered: BTreeSet<Digest>,
    emitted: Vec<u8>,
    values: Vec<Value>,
}

impl OutputGate {
    pub fn new(registered: impl IntoIterator<Item = Digest>) -> Self {
        Self {
            registered: registered.into_iter().collect(),
            ..Default::default()
        }
    }

    pub fn closed() -> Self {
        Self::default()
    }

    pub fn is_open_for(&self, program: &Program) -> bool {
        program.kind == ProgramKind::Query && self.registered.contains(&program.program_hash)
    }

    pub fn emitted(&self) -> &[u8] {
        &self.emitted
    }

    pub fn values(&self) -> &[Value] {
        &self.values
    }

    fn emit(&mut self, v: Value) {
        match &v {
            Value::Scalar(s) => self.emitted.extend_from_slice(&s.to_be_bytes()),
            Value::Vector(xs) => xs
                .iter()
                .for_each(|x| self.emitted.extend_from_slice(&x.to_be_bytes())),
        }
        self.values.push(v);
    }
}

/// Inserts no-op store reads and page touches after real operations.
#[derive(Debug, Clone)]
pub struct DummyInjector {
    p: f64,
    rng: Rng,
    pub store_reads: u64,
    pub page_touches: u64,
}

impl DummyInjector {
    pub fn new(p: f64, rng: Rng) -> Self {
        Self {
            p: p.clamp(0.0, 1.0),
            rng,
            store_reads: 0,
            page_touches: 0,
        }
    }

    pub fn disabled() -> Self {
        Self::new(0.0, Rng::new(0))
    }

    pub fn dummy_ops(&self) -> u64 {
        self.store_reads + self.page_touches
    }

    fn after_op(&mut self, store: &ObjectStore) {
        if !self.rng.gen_bool(self.p) {
            return;
        }
        if self.rng.gen_bool(0.5) {
            store.dummy_read(self.rng.gen());
            self.store_reads += 1;
        } else {
            self.page_touches += 1;
        }
    }
}

pub struct Env<'a> {
    pub input: InputChannel,
    pub store: Arc<ObjectStore>,
    pub gate: &'a mut OutputGate,
    pub dummy: DummyInjector,
    pub step_budget: u64,
    /// Stop as if the host crashed before executing this step.
    pub crash_at: Option<u64>,
}

impl<'a> Env<'a> {
    pub fn new(input: InputChannel, store: Arc<ObjectStore>, gate: &'a mut OutputGate) -> Self {
        Self {
            input,
            store,
            gate,
            dummy: DummyInjector::disabled(),
            step_budget: DEFAULT_STEP_BUDGET,
            crash_at: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    pub status: Status,
    pub steps: u64,
    pub stack: Vec<Value>,
}

fn pop(stack: &mut Vec<Value>) -> Result<Value, Trap> {
    stack.pop().ok_or(Trap::StackUnderflow)
}

fn pop_scalar(stack: &mut Vec<Value>, op: &'static str) -> Result<f64, Trap> {
    pop(stack)?.as_scalar().ok_or(Trap::TypeMismatch(op))
}

fn pop_vector(stack: &mut Vec<Value>, op: &'static str) -> Result<Vec<f64>, Trap> {
    match pop(stack)? {
        Value::Vector(v) => Ok(v),
        Value::Scalar(_) => Err(Trap::TypeMismatch(op)),
    }
}

pub fn execute(program: &Program, env: &mut Env<'_>) -> Execution {
    let mut stack = Vec::new();
    let mut steps = 0;
    if env.store.attach(&program.program_hash).is_err() {
        return Execution {
            status: Status::Trap(Trap::AttachDenied),
            steps,
            stack,
        };
    }
    let mut txn: Option<Txn> = None;
    let mut pc = 0usize;
    let status = loop {
        if env.crash_at == Some(steps) {
            break Status::Crashed;
        }
        if steps >= env.step_budget {
            break Status::BudgetExceeded;
        }
        let Some(instr) = program.instructions.get(pc) else {
            break Status::Halted;
        };
        steps += 1;
        pc += 1;
        let result = step(instr, &mut stack, &mut pc, &mut txn, program, env);
        env.dummy.after_op(&env.store);
        match result {
            Ok(true) => {}
            Ok(false) => break Status::Halted,
            Err(t) => break Status::Trap(t),
        }
    };
    // an open transaction is discarded here
    drop(txn);
    Execution {
        status,
        steps,
        stack,
    }
}

/// Executes one instruction; `Ok(false)` means HALT.
fn step(
    instr: &Instr,
    stack: &mut Vec<Value>,
    pc: &mut usize,
    txn: &mut Option<Txn>,
    program: &Program,
    env: &mut Env<'_>,
) -> Result<bool, Trap> {
    match instr {
        Instr::Const(v) => stack.push(Value::Scalar(*v)),
        Instr::VConst(v) => stack.push(Value::Vector(v.clone())),
        Instr::Input(end) => match env.input.next_record() {
            Some(r) => {
                stack.push(Value::Vector(r.features));
                stack.push(Value::Scalar(r.label));
            }
            None => *pc = *end,
        },
        Instr::Dot => {
            let b = pop_vector(stack, "DOT")?;
            let a = pop_vector(stack, "DOT")?;
            if a.len() != b.len() {
                return Err(Trap::DimensionMismatch);
            }
            stack.push(Value::Scalar(a.iter().zip(&b).map(|(x, y)| x * y).sum()));
        }
        Instr::Add | Instr::Sub | Instr::Mul => {
            let name = match instr {
                Instr::Add => "ADD",
                Instr::Sub => "SUB",
                _ => "MUL",
            };
            let b = pop_scalar(stack, name)?;
            let a = pop_scalar(stack, name)?;
            stack.push(Value::Scalar(match instr {
                Instr::Add => a + b,
                Instr::Sub => a - b,
                _ => a * b,
            }));
        }
        Instr::VAdd => {
            let b = pop_vector(stack, "VADD")?;
            let a = pop_vector(stack, "VADD")?;
            if a.len() != b.len() {
                return Err(Trap::DimensionMismatch);
            }
            stack.push(Value::Vector(
                a.iter().zip(&b).map(|(x, y)| x + y).collect(),
            ));
        }
        Instr::VScale => {
            let s = pop_scalar(stack, "VSCALE")?;
            let v = pop_vector(stack, "VSCALE")?;
            stack.push(Value::Vector(v.iter().map(|x| x * s).collect()));
        }
        Instr::Sigmoid => {
            let x = pop_scalar(stack, "SIGMOID")?;
            stack.push(Value::Scalar(1.0 / (1.0 + (-x).exp())));
        }
        Instr::Dup => {
            let top = stack.last().cloned().ok_or(Trap::StackUnderflow)?;
            stack.push(top);
        }
        Instr::Swap => {
            let n = stack.len();
            if n < 2 {
                return Err(Trap::StackUnderflow);
            }
            stack.swap(n - 1, n - 2);
        }
        Instr::Pop => {
            pop(stack)?;
        }
        Instr::Load(name) => {
            let t = txn.as_ref().ok_or(Trap::NoTransaction)?;
            stack.push(
                t.read(name)
                    .ok_or_else(|| Trap::UnknownObject(name.clone()))?,
            );
        }
        Instr::Store(name) => {
            let t = txn.as_mut().ok_or(Trap::NoTransaction)?;
            let v = pop(stack)?;
            t.write(name, v);
        }
        Instr::Begin => {
            if txn.is_some() {
                return Err(Trap::NestedTransaction);
            }
            *txn = Some(env.store.begin());
        }
        Instr::Commit => txn.take().ok_or(Trap::NoTransaction)?.commit(),
        Instr::Abort => drop(txn.take().ok_or(Trap::NoTransaction)?),
        Instr::Jmp(a) => *pc = *a,
        Instr::Jz(a) => {
            if pop_scalar(stack, "JZ")? == 0.0 {
                *pc = *a;
            }
        }
        Instr::Emit => {
            if !env.gate.is_open_for(program) {
                return Err(Trap::Gate);
            }
            let v = pop(stack)?;
            env.gate.emit(v);
        }
        Instr::Halt => return Ok(false),
    }
    Ok(true)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingConfig {
    pub epochs: u32,
    pub dmin: usize,
    pub dmax: usize,
    pub dummy_p: f64,
    pub step_budget: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            dmin: 1,
            dmax: 8,
            dummy_p: DEFAULT_DUMMY_P,
            step_budget: DEFAULT_STEP_BUDGET,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TraceStats {
    pub real_ops: u64,
    pub dummy_ops: u64,
    pub refills: u64,
}

impl TraceStats {
    pub fn trace_len(&self) -> u64 {
        self.real_ops + self.dummy_ops
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcome {
    pub status: Status,
    pub params: Params,
    pub stats: TraceStats,
    /// Buffer depth drawn for each session, per instance.
    pub depths: Vec<usize>,
    pub emitted_bytes: usize,
    pub commits: u64,
}

/// Training over a single dataset; the one-instance case of
/// [`shared_store_training`].
pub fn run_training(
    program: &Program,
    records: &[Record],
    cfg: &TrainingConfig,
    rng: &Rng,
) -> Result<TrainingOutcome, VmError> {
    shared_store_training(std::slice::from_ref(program), &[records.to_vec()], cfg, rng)
}

/// Runs one program instance per shard, in parallel, against one store.
/// Each instance draws from its own split streams; each epoch is one
/// session with a freshly shuffled shard and a fresh buffer depth.
pub fn shared_store_training(
    programs: &[Program],
    shards: &[Vec<Record>],
    cfg: &TrainingConfig,
    rng: &Rng,
) -> Result<TrainingOutcome, VmError> {
    if programs.len() != shards.len() || programs.is_empty() {
        return Err(VmError::ShardMismatch);
    }
    if let Some(p) = programs.iter().find(|p| p.kind != ProgramKind::Training) {
        return Err(VmError::WrongKind(p.kind));
    }
    let dim = shards
        .iter()
        .flatten()
        .map(|r| r.features.len())
        .next()
        .unwrap_or(0);
    let store = ObjectStore::zeroed(dim);
    for p in programs {
        store.attach(&p.program_hash)?;
    }

    let results: Vec<(Status, TraceStats, Vec<usize>, usize)> = std::thread::scope(|s| {
        let handles: Vec<_> = programs
            .iter()
            .zip(shards)
            .enumerate()
            .map(|(i, (prog, shard))| {
                let store = Arc::clone(&store);
                let base = rng.derive(&format!("instance-{i}"));
                s.spawn(move || train_instance(prog, shard, cfg, &base, store))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    });

    let mut out = TrainingOutcome {
        status: Status::Halted,
        params: store.snapshot(),
        stats: TraceStats::default(),
        depths: Vec::new(),
        emitted_bytes: 0,
        commits: store.commit_count(),
    };
    for (status, stats, depths, emitted) in results {
        if out.status == Status::Halted {
            out.status = status;
        }
        out.stats.real_ops += stats.real_ops;
        out.stats.dummy_ops += stats.dummy_ops;
        out.stats.refills += stats.refills;
        out.depths.extend(depths);
        out.emitted_bytes += emitted;
    }
    Ok(out)
}

fn train_instance(
    program: &Program,
    shard: &[Record],
    cfg: &TrainingConfig,
    base: &Rng,
    store: Arc<ObjectStore>,
) -> (Status, TraceStats, Vec<usize>, usize) {
    let mut alg = base.derive("algorithm");
    let mut buf = base.derive("buffer");
    let dummy = base.derive("dummy");
    let mut gate = OutputGate::closed();
    let mut stats = TraceStats::default();
    let mut depths = Vec::new();
    let mut injector = DummyInjector::new(cfg.dummy_p, dummy);
    let mut status = Status::Halted;
    for _ in 0..cfg.epochs {
        let mut order: Vec<Record> = shard.to_vec();
        order.shuffle(&mut alg);
        let input = InputChannel::new(order, cfg.dmin, cfg.dmax, &mut buf);
        depths.push(input.depth());
        let mut env = Env {
            input,
            store: Arc::clone(&store),
            gate: &mut gate,
            dummy: injector,
            step_budget: cfg.step_budget,
            crash_at: None,
        };
        let ex = execute(program, &mut env);
        stats.real_ops += ex.steps;
        stats.refills += env.input.refills();
        injector = env.dummy;
        if ex.status != Status::Halted {
            status = ex.status;
            break;
        }
    }
    stats.dummy_ops = injector.dummy_ops();
    (status, stats, depths, gate.emitted().len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub status: Status,
    pub steps: u64,
    pub emitted: Vec<u8>,
    pub values: Vec<Value>,
}

/// Runs a query program over `records` against trained parameters.
/// Unregistered programs are refused before execution.
pub fn run_query(
    program: &Program,
    records: &[Record],
    params: &Params,
    gate: &OutputGate,
    rng: &Rng,
) -> Result<QueryOutcome, VmError> {
    if program.kind != ProgramKind::Query {
        return Err(VmError::WrongKind(program.kind));
    }
    if !gate.is_open_for(program) {
        return Err(VmError::GateRefused);
    }
    let store = ObjectStore::new();
    store.install(params.clone());
    let mut local_gate = gate.clone();
    local_gate.emitted.clear();
    local_gate.values.clear();
    let mut buf = rng.derive("buffer");
    let input = InputChannel::new(records.to_vec(), 1, 8, &mut buf);
    let mut env = Env::new(input, store, &mut local_gate);
    env.dummy = DummyInjector::new(DEFAULT_DUMMY_P, rng.derive("dummy"));
    let ex = execute(program, &mut env);
    Ok(QueryOutcome {
        status: ex.status,
        steps: ex.steps,
        emitted: local_gate.emitted,
        values: local_gate.values,
    })
}

/// Reference SGD least-squares program (rate 0.05) over parameter `w`.
pub const SGD_PROGRAM: &str = "\
INPUT 17
BEGIN
STORE y
DUP
LOAD w
DOT
LOAD y
SWAP
SUB
CONST 0.05
MUL
VSCALE
LOAD w
VADD
STORE w
COMMIT
JMP 0
HALT
";

/// Accumulates feature sums `sx` and a record count `n` (two-component
/// features).
pub const AVERAGING_PROGRAM: &str = "\
INPUT 12
POP
BEGIN
LOAD sx
VADD
STORE sx
LOAD n
VCONST 1,1
VADD
STORE n
COMMIT
JMP 0
HALT
";

/// Emits `w . x` for each input record.
pub const LINEAR_SCORER: &str = "\
INPUT 8
POP
BEGIN
LOAD w
COMMIT
DOT
EMIT
JMP 0
HALT
";

#[cfg(test)]
mod tests {
    use super::*;

    fn prog(text: &str, kind: ProgramKind) -> Program {
        assemble(text, kind).unwrap()
    }

    fn run_plain(p: &Program, records: Vec<Record>, gate: &mut OutputGate) -> Execution {
        let mut buf = Rng::new(0);
        let input = InputChannel::new(records, 1, 1, &mut buf);
        let mut env = Env::new(input, ObjectStore::zeroed(2), gate);
        execute(p, &mut env)
    }

    #[test]
    fn arithmetic() {
        let p = prog("CONST 2\nCONST 3\nADD\nHALT", ProgramKind::Training);
        let ex = run_plain(&p, vec![], &mut OutputGate::closed());
        assert_eq!(ex.status, Status::Halted);
        assert_eq!(ex.stack, vec![Value::Scalar(5.0)]);
        assert_eq!(ex.steps, 4);
    }

    #[test]
    fn canonical_hash() {
        let a = prog("CONST 2\nCONST 3\nADD\nHALT", ProgramKind::Query);
        let b = prog(
            "  CONST   2 \r\n\n# c\nCONST\t3  # x\nADD\nHALT\n",
            ProgramKind::Query,
        );
        assert_eq!(a.program_hash, b.program_hash);
        assert_eq!(a.text, "CONST 2\nCONST 3\nADD\nHALT\n");
        assert_eq!(a.program_hash, digest(a.text.as_bytes()));
        let c = prog("CONST 2\nCONST 4\nADD\nHALT", ProgramKind::Query);
        assert_ne!(a.program_hash, c.program_hash);
    }

    #[test]
    fn assembly_errors_have_lines() {
        let e = assemble("JMP 999\nHALT\nHALT\nHALT\nHALT", ProgramKind::Training).unwrap_err();
        assert_eq!(e.line, 1);
        assert_eq!(
            assemble("HALT\nFOO", ProgramKind::Training)
                .unwrap_err()
                .line,
            2
        );
        assert_eq!(
            assemble("CONST x", ProgramKind::Training).unwrap_err().line,
            1
        );
        assert_eq!(
            assemble("HALT\n\nCONST nan", ProgramKind::Training)
                .unwrap_err()
                .line,
            3
        );
        assert!(assemble("ADD 1", ProgramKind::Training).is_err());
        assert!(assemble("VCONST 1,x", ProgramKind::Training).is_err());
    }

    #[test]
    fn traps() {
        let cases = [
            ("ADD", Trap::StackUnderflow),
            ("VCONST 1,2\nCONST 1\nADD", Trap::TypeMismatch("ADD")),
            ("VCONST 1,2\nVCONST 1\nDOT", Trap::DimensionMismatch),
            ("LOAD w", Trap::NoTransaction),
            ("BEGIN\nBEGIN", Trap::NestedTransaction),
            ("COMMIT", Trap::NoTransaction),
            ("CONST 1\nEMIT", Trap::Gate),
        ];
        for (src, want) in cases {
            let ex = run_plain(
                &prog(src, ProgramKind::Training),
                vec![],
                &mut OutputGate::closed(),
            );
            assert_eq!(ex.status, Status::Trap(want), "{src}");
        }
        let mut gate = OutputGate::closed();
        let ex = run_plain(
            &prog("CONST 1\nEMIT\nHALT", ProgramKind::Training),
            vec![],
            &mut gate,
        );
        assert_eq!(ex.status, Status::Trap(Trap::Gate));
        assert!(gate.emitted().is_empty());
    }

    #[test]
    fn budget_exhaustion_is_exact() {
        let p = prog("JMP 0", ProgramKind::Training);
        let mut gate = OutputGate::closed();
        let mut env = Env::new(
            InputChannel::new(vec![], 1, 1, &mut Rng::new(0)),
            ObjectStore::new(),
            &mut gate,
        );
        env.step_budget = 1000;
        let ex = execute(&p, &mut env);
        assert_eq!(ex.status, Status::BudgetExceeded);
        assert_eq!(ex.steps, 1000);
    }

    #[test]
    fn transactions() {
        let run = |src: &str, crash: Option<u64>| {
            let store = ObjectStore::zeroed(1);
            let mut gate = OutputGate::closed();
            let mut env = Env::new(
                InputChannel::new(vec![], 1, 1, &mut Rng::new(0)),
                Arc::clone(&store),
                &mut gate,
            );
            env.crash_at = crash;
            let ex = execute(&prog(src, ProgramKind::Training), &mut env);
            (ex, store.snapshot())
        };
        let (_, snap) = run("BEGIN\nCONST 1\nSTORE a\nABORT\nHALT", None);
        assert!(snap.is_empty());
        let src = "BEGIN\nCONST 1\nSTORE a\nCONST 2\nSTORE b\nCOMMIT\nHALT";
        let (ex, snap) = run(src, Some(4));
        assert_eq!(ex.status, Status::Crashed);
        assert!(snap.is_empty());
        let (_, snap) = run(src, None);
        assert_eq!(snap["a"], Value::Scalar(1.0));
        assert_eq!(snap["b"], Value::Scalar(2.0));
    }

    #[test]
    fn attach_binds_once() {
        let store = ObjectStore::new();
        store.attach(&digest(b"a")).unwrap();
        store.attach(&digest(b"a")).unwrap();
        assert_eq!(store.attach(&digest(b"b")), Err(VmError::AttachDenied));
    }

    #[test]
    fn input_channel_preserves_order() {
        let recs: Vec<Record> = (0..20)
            .map(|i| Record {
                features: vec![i as f64],
                label: 0.0,
            })
            .collect();
        let mut ch = InputChannel::new(recs.clone(), 3, 3, &mut Rng::new(1));
        let got: Vec<Record> = std::iter::from_fn(|| ch.next_record()).collect();
        assert_eq!(got, recs);
        assert_eq!(ch.refills(), 7);
    }

    #[test]
    fn zero_epochs_leave_zero_params() {
        let p = prog(SGD_PROGRAM, ProgramKind::Training);
        let recs = vec![Record {
            features: vec![1.0, 0.0],
            label: 2.0,
        }];
        let cfg = TrainingConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = run_training(&p, &recs, &cfg, &Rng::new(1)).unwrap();
        assert!(out.params.is_empty());
        assert_eq!(out.commits, 0);
    }

    #[test]
    fn query_requires_registration() {
        let scorer = prog(LINEAR_SCORER, ProgramKind::Query);
        let mut params = Params::new();
        params.insert("w".into(), Value::Vector(vec![2.0, -1.0]));
        let recs = vec![Record {
            features: vec![1.0, 1.0],
            label: 0.0,
        }];
        let gate = OutputGate::new([scorer.program_hash]);
        let out = run_query(&scorer, &recs, &params, &gate, &Rng::new(3)).unwrap();
        assert_eq!(out.status, Status::Halted);
        assert_eq!(out.values, vec![Value::Scalar(1.0)]);
        assert_eq!(out.emitted, 1.0f64.to_be_bytes());

        assert_eq!(
            run_query(&scorer, &recs, &params, &OutputGate::closed(), &Rng::new(3)),
            Err(VmError::GateRefused)
        );

        let silent = prog("INPUT 3\nPOP\nPOP\nHALT", ProgramKind::Query);
        let out = run_query(
            &silent,
            &recs,
            &params,
            &OutputGate::new([silent.program_hash]),
            &Rng::new(3),
        )
        .unwrap();
        assert_eq!(out.status, Status::Halted);
        assert!(out.emitted.is_empty());
    }

    #[test]
    fn params_codec_round_trips() {
        let mut p = Params::new();
        p.insert("n".into(), Value::Vector(vec![1.0, 2.0]));
        p.insert("w".into(), Value::Scalar(-0.5));
        assert_eq!(params_from_bytes(&params_bytes(&p)).unwrap(), p);
    }
}
