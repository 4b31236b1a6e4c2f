//! Length-prefixed wire framing and message encoding.
//!
//! A frame is a u32 little-endian payload length followed by the payload.
//! The payload is a one-byte message tag followed by the body. Floats
//! travel as raw bit patterns, so a model pushed through the wire comes
//! back bitwise identical; the TCP federation depends on this to match
//! the in-process run exactly.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::fed::FedConfig;
use crate::tensor::{NamedTensors, Tensor};

/// Upper bound on a single frame; a tiny model is a few hundred KB, so
/// anything near this is a corrupt or hostile length prefix.
pub const MAX_FRAME: u64 = 64 << 20;

const MAX_NAME: usize = 4096;
const MAX_DIMS: usize = 8;

const TAG_HELLO: u8 = 1;
const TAG_JOB: u8 = 2;
const TAG_GLOBAL: u8 = 3;
const TAG_UPDATE: u8 = 4;
const TAG_DONE: u8 = 5;

#[derive(Clone, Debug)]
pub enum Msg {
    /// Client introduces itself after connecting.
    Hello { client_id: u64 },
    /// Server hands the client everything needed to regenerate its shard.
    Job(Box<FedConfig>),
    /// Server broadcasts the global model at the start of a round.
    Global { round: u32, params: NamedTensors },
    /// Client returns its locally trained parameters.
    Update {
        client_id: u64,
        round: u32,
        n_tokens: u64,
        /// f64 bits, so the loss survives the wire bit-exactly.
        mean_loss: f64,
        params: NamedTensors,
    },
    /// Server ends the session.
    Done,
}

impl Msg {
    pub fn kind(&self) -> &'static str {
        match self {
            Msg::Hello { .. } => "hello",
            Msg::Job(_) => "job",
            Msg::Global { .. } => "global",
            Msg::Update { .. } => "update",
            Msg::Done => "done",
        }
    }
}

// ---- primitive readers ---------------------------------------------------

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated(what))?;
        if end > self.buf.len() {
            return Err(Error::Truncated(what));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Protocol(format!(
                "{} trailing bytes after message",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

// ---- tensor encoding -------------------------------------------------------

fn encode_tensors(out: &mut Vec<u8>, params: &NamedTensors) {
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        debug_assert!(name.len() <= MAX_NAME && t.shape().len() <= MAX_DIMS);
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn decode_tensors(r: &mut Reader) -> Result<NamedTensors> {
    let count = r.u32("tensor count")?;
    let mut params = NamedTensors::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        if name_len > MAX_NAME {
            return Err(Error::Protocol(format!("tensor name of {name_len} bytes")));
        }
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Protocol("tensor name is not utf-8".into()))?
            .to_string();
        let ndim = r.u8("rank")? as usize;
        if ndim > MAX_DIMS {
            return Err(Error::Protocol(format!("tensor rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut numel = 1usize;
        for _ in 0..ndim {
            let d = r.u32("dim")? as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Protocol("tensor size overflows".into()))?;
            shape.push(d);
        }
        let payload = r.take(numel * 4, "tensor data")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if params.get(&name).is_some() {
            return Err(Error::Protocol(format!("duplicate tensor `{name}`")));
        }
        params.insert(name, Tensor::from_vec(&shape, data)?);
    }
    Ok(params)
}

// ---- message encoding ------------------------------------------------------

pub fn encode_msg(msg: &Msg) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    match msg {
        Msg::Hello { client_id } => {
            out.push(TAG_HELLO);
            out.extend_from_slice(&client_id.to_le_bytes());
        }
        Msg::Job(cfg) => {
            out.push(TAG_JOB);
            out.extend_from_slice(&serde_json::to_vec(cfg.as_ref())?);
        }
        Msg::Global { round, params } => {
            out.push(TAG_GLOBAL);
            out.extend_from_slice(&round.to_le_bytes());
            encode_tensors(&mut out, params);
        }
        Msg::Update {
            client_id,
            round,
            n_tokens,
            mean_loss,
            params,
        } => {
            out.push(TAG_UPDATE);
            out.extend_from_slice(&client_id.to_le_bytes());
            out.extend_from_slice(&round.to_le_bytes());
            out.extend_from_slice(&n_tokens.to_le_bytes());
            out.extend_from_slice(&mean_loss.to_bits().to_le_bytes());
            encode_tensors(&mut out, params);
        }
        Msg::Done => out.push(TAG_DONE),
    }
    Ok(out)
}

pub fn decode_msg(payload: &[u8]) -> Result<Msg> {
    let mut r = Reader::new(payload);
    let tag = r.u8("message tag")?;
    let msg = match tag {
        TAG_HELLO => Msg::Hello {
            client_id: r.u64("client id")?,
        },
        TAG_JOB => {
            let body = r.take(payload.len() - 1, "job body")?;
            return Ok(Msg::Job(Box::new(serde_json::from_slice(body)?)));
        }
        TAG_GLOBAL => Msg::Global {
            round: r.u32("round")?,
            params: decode_tensors(&mut r)?,
        },
        TAG_UPDATE => Msg::Update {
            client_id: r.u64("client id")?,
            round: r.u32("round")?,
            n_tokens: r.u64("token count")?,
            mean_loss: f64::from_bits(r.u64("mean loss")?),
            params: decode_tensors(&mut r)?,
        },
        TAG_DONE => Msg::Done,
        other => return Err(Error::Protocol(format!("unknown message tag {other}"))),
    };
    r.finish()?;
    Ok(msg)
}

// ---- framing ----------------------------------------------------------------

pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> Result<()> {
    if payload.len() as u64 > MAX_FRAME {
        return Err(Error::FrameTooLarge {
            got: payload.len() as u64,
            limit: MAX_FRAME,
        });
    }
    w.write_all(&(payload.len() as u32).to_le_bytes())?;
    w.write_all(payload)?;
    Ok(())
}

/// Reads one frame. Rejects oversized length prefixes before allocating.
pub fn read_frame(r: &mut impl Read) -> Result<Vec<u8>> {
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let len = u32::from_le_bytes(len_bytes) as u64;
    if len > MAX_FRAME {
        return Err(Error::FrameTooLarge {
            got: len,
            limit: MAX_FRAME,
        });
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Ok(payload)
}

pub fn write_msg(w: &mut impl Write, msg: &Msg) -> Result<()> {
    write_frame(w, &encode_msg(msg)?)
}

pub fn read_msg(r: &mut impl Read) -> Result<Msg> {
    decode_msg(&read_frame(r)?)
}
