//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes   "INSTDISC"
//! version  u32 LE    FORMAT_VERSION
//! section* tag [4 bytes] · payload length u64 LE · payload
//! ```
//!
//! All integers are little-endian `u64` unless noted; all floats are
//! little-endian IEEE-754 `f64`, stored bit-exactly. Sections:
//!
//! | tag    | payload |
//! |--------|---------|
//! | `CONF` | UTF-8 JSON `{"encoder": EncoderConfig, "train": TrainConfig}` |
//! | `ENCP` | step, layer count, then per layer: rows, cols, weights (row-major), bias length, bias |
//! | `VELO` | tensor count, then per tensor: length, values (SGD velocity, same order as `ENCP`) |
//! | `BANK` | rows, cols, momentum f64, normalize u8, temperature f64, rows·cols weights |
//! | `RNGS` | 32-byte ChaCha seed, stream u64, word position u128 LE |
//! | `PROG` | completed epochs, completed iterations |
//! | `HIST` | record count, then per record: epoch u64, ce, sqrtkl, total, inst_acc, lr |
//! | `END_` | empty; marks a complete file |
//!
//! Every section appears exactly once and `END_` comes last. Wall-clock
//! seconds are not stored, so identical runs give identical files; loaded
//! history records carry `secs = 0`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bank::MemoryBank;
use crate::encoder::{Dense, Encoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::optim::Sgd;
use crate::tensor::{Mat, RngState, SeededRng};
use crate::trainer::{MetricRecord, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"INSTDISC";
pub const FORMAT_VERSION: u32 = 1;

const SECTIONS: [&[u8; 4]; 7] = [b"CONF", b"ENCP", b"VELO", b"BANK", b"RNGS", b"PROG", b"HIST"];

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
struct ConfigSection {
    encoder: EncoderConfig,
    train: TrainConfig,
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn floats(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }

    fn sized_floats(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        self.floats(vs);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("{} section truncated", self.what)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Format(format!("{}: count {v} too large", self.what)))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// Reads `n` floats, checking the remaining length before allocating.
    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn sized_floats(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        self.floats(n)
    }

    fn mat(&mut self, rows: usize, cols: usize) -> Result<Mat> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format("matrix size overflow".into()))?;
        Mat::new(rows, cols, self.floats(n)?).map_err(|e| Error::Format(format!("{}: {e}", self.what)))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} section has {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn push_section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

pub fn encode(state: &TrainState, config: &TrainConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());

    let conf = ConfigSection {
        encoder: state.encoder.config.clone(),
        train: config.clone(),
    };
    push_section(&mut out, b"CONF", &serde_json::to_vec(&conf).expect("config serializes"));

    let mut w = Writer::default();
    w.u64(state.encoder.params.step);
    w.u64(state.encoder.params.layers.len() as u64);
    for layer in &state.encoder.params.layers {
        w.u64(layer.weight.rows() as u64);
        w.u64(layer.weight.cols() as u64);
        w.floats(layer.weight.as_slice());
        w.sized_floats(&layer.bias);
    }
    push_section(&mut out, b"ENCP", &w.buf);

    let mut w = Writer::default();
    let velocity = state.optimizer.velocity();
    w.u64(velocity.len() as u64);
    for v in velocity {
        w.sized_floats(v);
    }
    push_section(&mut out, b"VELO", &w.buf);

    let mut w = Writer::default();
    let bank = &state.bank;
    w.u64(bank.len() as u64);
    w.u64(bank.dim() as u64);
    w.f64(bank.momentum);
    w.u8(bank.normalize as u8);
    w.f64(bank.temperature);
    w.floats(bank.weights().as_slice());
    push_section(&mut out, b"BANK", &w.buf);

    let rng = state.rng.state();
    let mut w = Writer::default();
    w.buf.extend_from_slice(&rng.seed);
    w.u64(rng.stream);
    w.buf.extend_from_slice(&rng.word_pos.to_le_bytes());
    push_section(&mut out, b"RNGS", &w.buf);

    let mut w = Writer::default();
    w.u64(state.epoch as u64);
    w.u64(state.iteration);
    push_section(&mut out, b"PROG", &w.buf);

    let mut w = Writer::default();
    w.u64(state.history.len() as u64);
    for r in &state.history {
        w.u64(r.epoch as u64);
        w.floats(&[r.ce, r.sqrtkl, r.total, r.inst_acc, r.lr]);
    }
    push_section(&mut out, b"HIST", &w.buf);

    push_section(&mut out, b"END_", &[]);
    out
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::IncompatibleVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }

    let mut sections: HashMap<[u8; 4], &[u8]> = HashMap::new();
    let mut top = Reader::new(&bytes[12..], "checkpoint");
    let mut complete = false;
    while top.pos < top.buf.len() {
        let tag: [u8; 4] = top.take(4)?.try_into().expect("4 bytes");
        let len = top.usize()?;
        let payload = top.take(len)?;
        if &tag == b"END_" {
            complete = true;
            top.finish()?;
            break;
        }
        if !SECTIONS.contains(&&tag) {
            return Err(Error::Format(format!("unknown section {:?}", String::from_utf8_lossy(&tag))));
        }
        if sections.insert(tag, payload).is_some() {
            return Err(Error::Format(format!("duplicate section {:?}", String::from_utf8_lossy(&tag))));
        }
    }
    if !complete {
        return Err(Error::Format("checkpoint truncated (no end marker)".into()));
    }
    let section = |tag: &[u8; 4], what: &'static str| -> Result<Reader<'_>> {
        sections
            .get(tag)
            .map(|p| Reader::new(p, what))
            .ok_or_else(|| Error::Format(format!("missing {what} section")))
    };

    let conf: ConfigSection = serde_json::from_slice(section(b"CONF", "config")?.buf)
        .map_err(|e| Error::Format(format!("config section: {e}")))?;

    let mut r = section(b"ENCP", "encoder")?;
    let step = r.u64()?;
    let n_layers = r.usize()?;
    let mut layers = Vec::new();
    for _ in 0..n_layers {
        let (rows, cols) = (r.usize()?, r.usize()?);
        let weight = r.mat(rows, cols)?;
        let bias = r.sized_floats()?;
        layers.push(Dense { weight, bias });
    }
    r.finish()?;
    let encoder = Encoder::from_params(conf.encoder, EncoderParams { layers, step })
        .map_err(|e| Error::Format(format!("encoder section: {e}")))?;

    let mut r = section(b"VELO", "velocity")?;
    let n = r.usize()?;
    let mut velocity = Vec::new();
    for _ in 0..n {
        velocity.push(r.sized_floats()?);
    }
    r.finish()?;
    let shapes: Vec<usize> = encoder.params.tensors().iter().map(|t| t.len()).collect();
    if velocity.iter().map(Vec::len).ne(shapes.iter().copied()) {
        return Err(Error::Format("velocity buffers do not mirror encoder parameters".into()));
    }
    let optimizer = Sgd::with_velocity(conf.train.sgd_momentum, conf.train.weight_decay, velocity);

    let mut r = section(b"BANK", "bank")?;
    let (rows, cols) = (r.usize()?, r.usize()?);
    let momentum = r.f64()?;
    let normalize = r.u8()? != 0;
    let temperature = r.f64()?;
    let weights = r.mat(rows, cols)?;
    r.finish()?;
    let bank = MemoryBank::from_weights(weights, momentum, normalize, temperature)
        .map_err(|e| Error::Format(format!("bank section: {e}")))?;

    let mut r = section(b"RNGS", "rng")?;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    r.finish()?;

    let mut r = section(b"PROG", "progress")?;
    let epoch = r.usize()?;
    let iteration = r.u64()?;
    r.finish()?;

    let mut r = section(b"HIST", "history")?;
    let n = r.usize()?;
    let mut history = Vec::new();
    for _ in 0..n {
        let epoch = r.usize()?;
        let v = r.floats(5)?;
        history.push(MetricRecord {
            epoch,
            ce: v[0],
            sqrtkl: v[1],
            total: v[2],
            inst_acc: v[3],
            lr: v[4],
            secs: 0.0,
        });
    }
    r.finish()?;

    Ok(Checkpoint {
        version,
        config: conf.train,
        state: TrainState {
            encoder,
            optimizer,
            bank,
            epoch,
            iteration,
            rng: SeededRng::from_state(RngState { seed, stream, word_pos }),
            history,
        },
    })
}

/// Writes to a temporary sibling and renames it into place.
pub fn save_checkpoint(state: &TrainState, config: &TrainConfig, path: &Path) -> Result<()> {
    let bytes = encode(state, config);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// SHA-256 of the encoded checkpoint, hex.
pub fn state_hash(state: &TrainState, config: &TrainConfig) -> String {
    hex::encode(Sha256::digest(encode(state, config)))
}
