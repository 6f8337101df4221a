//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       8 bytes  "PRCLCKPT"
//! major       u16      readers reject majors they do not know
//! minor       u16
//! scalar      u8       bytes per stored float (4 or 8)
//! config hash 64 bytes lowercase hex SHA-256
//! step        u64
//! config      u32 length + canonical JSON
//! body        benchmarks, rng streams, price memory, recent prices,
//!             gain window, agents, optional replay buffers
//! checksum    32 bytes SHA-256 of everything above
//! ```
//!
//! Every array is preceded by its dimensions, and floats are stored
//! bit-exactly, so a decode followed by an encode reproduces the input.

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::Agent;
use crate::market::{Benchmarks, PriceHistory};
use crate::netcore::{AdamConfig, AdamState, Layer, Matrix, Mlp, MlpGrads, ScalarAdam};
use crate::orchestrator::{Checkpoint, RngState, SessionConfig};
use crate::replay::{RawReplay, ReplayBuffer};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"PRCLCKPT";
pub const MAJOR: u16 = 1;
pub const MINOR: u16 = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format major version {0} is not supported (this build reads {MAJOR})")]
    UnsupportedMajor(u16),
    #[error("checkpoint stores {got}-byte floats, reader expects {expected}")]
    ScalarWidth { expected: usize, got: usize },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Metadata readable without knowing the float width.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub major: u16,
    pub minor: u16,
    pub scalar_bytes: usize,
    pub config_hash: String,
    pub step: u64,
    pub config: SessionConfig,
}

struct Writer {
    out: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.out.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("dimension fits in u32");
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.out.extend_from_slice(b);
    }
    fn s<S: Scalar>(&mut self, v: S) {
        v.write_le(&mut self.out);
    }
    fn ss<S: Scalar>(&mut self, vs: &[S]) {
        for &v in vs {
            v.write_le(&mut self.out);
        }
    }
    fn vec_s<S: Scalar>(&mut self, vs: &[S]) {
        self.u32(vs.len());
        self.ss(vs);
    }
    fn rows<S: Scalar>(&mut self, rows: &[Vec<S>], width: usize) {
        self.u32(rows.len());
        self.u32(width);
        for r in rows {
            self.ss(r);
        }
    }
    fn layers<S: Scalar>(&mut self, layers: &[Layer<S>]) {
        self.u32(layers.len());
        for l in layers {
            self.u32(l.weights.rows());
            self.u32(l.weights.cols());
            self.ss(l.weights.as_slice());
            self.ss(&l.biases);
        }
    }
    fn mlp<S: Scalar>(&mut self, net: &Mlp<S>) {
        self.s(net.slope);
        self.layers(&net.layers);
    }
    fn adam<S: Scalar>(&mut self, opt: &AdamState<S>) {
        self.u64(opt.step);
        self.adam_config(&opt.config);
        self.layers(&opt.first.layers);
        self.layers(&opt.second.layers);
    }
    fn adam_config(&mut self, c: &AdamConfig) {
        self.f64(c.beta1);
        self.f64(c.beta2);
        self.f64(c.eps);
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let slice = self.data.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(slice)
    }
    fn arr<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("sized take"))
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.arr()?))
    }
    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.arr()?) as usize)
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.arr()?))
    }
    fn u128(&mut self) -> Result<u128, CheckpointError> {
        Ok(u128::from_le_bytes(self.arr()?))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.arr()?))
    }
    fn s<S: Scalar>(&mut self) -> Result<S, CheckpointError> {
        Ok(S::read_le(self.take(S::BYTES)?))
    }
    fn ss<S: Scalar>(&mut self, n: usize) -> Result<Vec<S>, CheckpointError> {
        let raw = self.take(n.checked_mul(S::BYTES).ok_or(CheckpointError::Truncated)?)?;
        Ok(raw.chunks_exact(S::BYTES).map(S::read_le).collect())
    }
    fn vec_s<S: Scalar>(&mut self) -> Result<Vec<S>, CheckpointError> {
        let n = self.u32()?;
        self.ss(n)
    }
    fn rows<S: Scalar>(&mut self) -> Result<Vec<Vec<S>>, CheckpointError> {
        let count = self.u32()?;
        let width = self.u32()?;
        (0..count).map(|_| self.ss(width)).collect()
    }
    fn layers<S: Scalar>(&mut self) -> Result<Vec<Layer<S>>, CheckpointError> {
        let count = self.u32()?;
        (0..count)
            .map(|_| {
                let rows = self.u32()?;
                let cols = self.u32()?;
                let w = self.ss(rows.checked_mul(cols).ok_or(CheckpointError::Truncated)?)?;
                let biases = self.ss(rows)?;
                let weights = Matrix::from_vec(rows, cols, w).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
                Ok(Layer { weights, biases })
            })
            .collect()
    }
    fn mlp<S: Scalar>(&mut self, sizes: &[usize], what: &str) -> Result<Mlp<S>, CheckpointError> {
        let slope = self.s()?;
        let layers = self.layers()?;
        let net = Mlp { layers, slope };
        if net.shape() != sizes {
            return Err(CheckpointError::Corrupt(format!(
                "{what} has shape {:?}, config implies {sizes:?}",
                net.shape()
            )));
        }
        Ok(net)
    }
    fn adam<S: Scalar>(&mut self, net: &Mlp<S>) -> Result<AdamState<S>, CheckpointError> {
        let step = self.u64()?;
        let config = self.adam_config()?;
        let first = MlpGrads { layers: self.layers()? };
        let second = MlpGrads { layers: self.layers()? };
        let expect = net.zero_grads();
        let same = |g: &MlpGrads<S>| {
            g.layers.len() == expect.layers.len()
                && g.layers
                    .iter()
                    .zip(&expect.layers)
                    .all(|(a, b)| a.weights.rows() == b.weights.rows() && a.weights.cols() == b.weights.cols())
        };
        if !same(&first) || !same(&second) {
            return Err(CheckpointError::Corrupt(
                "optimizer moments do not match their network".into(),
            ));
        }
        Ok(AdamState {
            first,
            second,
            step,
            config,
        })
    }
    fn adam_config(&mut self) -> Result<AdamConfig, CheckpointError> {
        Ok(AdamConfig {
            beta1: self.f64()?,
            beta2: self.f64()?,
            eps: self.f64()?,
        })
    }
}

/// Serialises a checkpoint.
pub fn encode<S: Scalar>(ck: &Checkpoint<S>) -> Vec<u8> {
    let mut w = Writer { out: Vec::new() };
    w.bytes(MAGIC);
    w.u16(MAJOR);
    w.u16(MINOR);
    w.u8(S::BYTES as u8);
    w.bytes(ck.config.hash().as_bytes());
    w.u64(ck.step);
    let json = serde_json::to_string(&ck.config).expect("config serialises");
    w.u32(json.len());
    w.bytes(json.as_bytes());

    let b = &ck.bench;
    for v in [&b.p_nash, &b.p_mono, &b.pi_nash, &b.pi_mono] {
        w.vec_s(v);
    }
    w.s(b.p_low);
    w.s(b.p_high);

    w.u32(ck.rngs.len());
    for r in &ck.rngs {
        w.bytes(&r.seed);
        w.u64(r.stream);
        w.u128(r.word_pos);
    }
    let n = ck.config.market.n;
    let periods: Vec<Vec<S>> = ck.history.periods().cloned().collect();
    w.rows(&periods, n);
    w.rows(&ck.recent_prices, n);
    w.u32(ck.gain_window.len());
    for &g in &ck.gain_window {
        w.f64(g);
    }

    w.u32(ck.agents.len());
    for a in &ck.agents {
        w.s(a.log_alpha);
        w.s(a.avg_reward);
        w.s(a.alpha_opt.first);
        w.s(a.alpha_opt.second);
        w.u64(a.alpha_opt.step);
        w.adam_config(&a.alpha_opt.config);
        w.mlp(&a.actor);
        w.adam(&a.actor_opt);
        w.mlp(&a.critic1);
        w.adam(&a.critic1_opt);
        w.mlp(&a.critic2);
        w.adam(&a.critic2_opt);
        w.mlp(&a.target1);
        w.mlp(&a.target2);
    }

    match &ck.buffers {
        None => w.u8(0),
        Some(buffers) => {
            w.u8(1);
            w.u32(buffers.len());
            for buf in buffers {
                let raw = buf.raw_parts();
                w.u64(buf.capacity() as u64);
                w.u32(buf.state_dim());
                w.u64(buf.len() as u64);
                w.u64(raw.cursor as u64);
                w.ss(raw.states);
                w.ss(raw.actions);
                w.ss(raw.rewards);
                w.ss(raw.next_states);
            }
        }
    }
    let digest = Sha256::digest(&w.out);
    w.bytes(&digest);
    w.out
}

fn read_header(r: &mut Reader<'_>) -> Result<Header, CheckpointError> {
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let major = r.u16()?;
    if major != MAJOR {
        return Err(CheckpointError::UnsupportedMajor(major));
    }
    let minor = r.u16()?;
    let scalar_bytes = r.u8()? as usize;
    let config_hash = String::from_utf8(r.take(64)?.to_vec())
        .map_err(|_| CheckpointError::Corrupt("config hash is not ASCII".into()))?;
    let step = r.u64()?;
    let len = r.u32()?;
    let config: SessionConfig =
        serde_json::from_slice(r.take(len)?).map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
    if config.hash() != config_hash {
        return Err(CheckpointError::Corrupt(
            "config hash does not match the stored config".into(),
        ));
    }
    Ok(Header {
        major,
        minor,
        scalar_bytes,
        config_hash,
        step,
        config,
    })
}

/// Reads the header only (no checksum verification).
pub fn peek_header(bytes: &[u8]) -> Result<Header, CheckpointError> {
    read_header(&mut Reader { data: bytes, pos: 0 })
}

/// Decodes a checkpoint written with float type `S`.
pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<Checkpoint<S>, CheckpointError> {
    if bytes.len() < 32 {
        return Err(CheckpointError::Truncated);
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let mut r = Reader { data: body, pos: 0 };
    let header = read_header(&mut r)?;
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Checksum);
    }
    if header.scalar_bytes != S::BYTES {
        return Err(CheckpointError::ScalarWidth {
            expected: S::BYTES,
            got: header.scalar_bytes,
        });
    }
    let config = header.config;
    let n = config.market.n;
    let bench = Benchmarks {
        p_nash: r.vec_s()?,
        p_mono: r.vec_s()?,
        pi_nash: r.vec_s()?,
        pi_mono: r.vec_s()?,
        p_low: r.s()?,
        p_high: r.s()?,
    };
    let rng_count = r.u32()?;
    let rngs = (0..rng_count)
        .map(|_| {
            Ok(RngState {
                seed: r.arr()?,
                stream: r.u64()?,
                word_pos: r.u128()?,
            })
        })
        .collect::<Result<Vec<_>, CheckpointError>>()?;
    let periods = r.rows()?;
    if periods.len() != config.market.k || periods.iter().any(|p| p.len() != n) {
        return Err(CheckpointError::Corrupt(
            "price memory does not match the market".into(),
        ));
    }
    let history = PriceHistory::from_periods(periods);
    let recent_prices = r.rows()?;
    let gains = r.u32()?;
    let gain_window = (0..gains).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;

    let dim = config.state_dim();
    let actor_sizes = config.hyper.actor_sizes(dim);
    let critic_sizes = config.hyper.critic_sizes(dim);
    let agent_count = r.u32()?;
    let mut agents = Vec::with_capacity(agent_count);
    for _ in 0..agent_count {
        let log_alpha = r.s()?;
        let avg_reward = r.s()?;
        let alpha_opt = ScalarAdam {
            first: r.s()?,
            second: r.s()?,
            step: r.u64()?,
            config: r.adam_config()?,
        };
        let actor = r.mlp(&actor_sizes, "actor")?;
        let actor_opt = r.adam(&actor)?;
        let critic1 = r.mlp(&critic_sizes, "critic")?;
        let critic1_opt = r.adam(&critic1)?;
        let critic2 = r.mlp(&critic_sizes, "critic")?;
        let critic2_opt = r.adam(&critic2)?;
        let target1 = r.mlp(&critic_sizes, "target")?;
        let target2 = r.mlp(&critic_sizes, "target")?;
        agents.push(Agent {
            hyper: config.hyper.clone(),
            state_dim: dim,
            actor,
            critic1,
            critic2,
            target1,
            target2,
            log_alpha,
            avg_reward,
            actor_opt,
            critic1_opt,
            critic2_opt,
            alpha_opt,
        });
    }

    let buffers = match r.u8()? {
        0 => None,
        1 => {
            let count = r.u32()?;
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                let capacity = r.u64()? as usize;
                let state_dim = r.u32()?;
                let len = r.u64()? as usize;
                let cursor = r.u64()? as usize;
                let states = r.ss(len * state_dim)?;
                let actions = r.ss(len)?;
                let rewards = r.ss(len)?;
                let next_states = r.ss(len * state_dim)?;
                let raw = RawReplay {
                    states: &states,
                    actions: &actions,
                    rewards: &rewards,
                    next_states: &next_states,
                    cursor,
                };
                out.push(
                    ReplayBuffer::from_raw_parts(capacity, state_dim, raw)
                        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?,
                );
            }
            Some(out)
        }
        other => return Err(CheckpointError::Corrupt(format!("replay flag {other}"))),
    };
    if r.pos != body.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok(Checkpoint {
        config,
        step: header.step,
        bench,
        agents,
        rngs,
        history,
        recent_prices,
        gain_window,
        buffers,
    })
}
