//! Length-prefixed frames exchanged over the secure channel.
//!
//! Every frame is `u32 length | u8 type | body`, where `length` counts the type
//! byte plus the body. Integers are big-endian; `str16` is a u16 length followed
//! by UTF-8; `bytes32` is a u32 length followed by raw bytes.
//!
//! | type | frame        | body                                        |
//! |------|--------------|---------------------------------------------|
//! | 0x01 | HELLO        | u8 role, str16 identity                     |
//! | 0x02 | PUBLISH      | str16 routing_key, bytes32 envelope         |
//! | 0x03 | ACK          | u64 tag                                     |
//! | 0x04 | DELIVER      | u64 tag, u8 redelivered, bytes32 envelope   |
//! | 0x05 | HEARTBEAT    | (empty)                                     |
//! | 0x06 | SUBSCRIBE    | str16 queue, u16 prefetch                   |
//! | 0x07 | REJECT       | u64 tag, u8 requeue                         |
//! | 0x08 | ERROR        | u16 code, str16 message                     |
//! | 0x09 | CONTROL      | u64 request_id, bytes32 JSON command        |
//! | 0x0A | CONTROL_ACK  | u64 request_id, u8 ok, bytes32 JSON body    |
//! | 0x0B | STATUS       | bytes32 JSON cart status                    |
//!
//! Publisher confirms reuse ACK: the broker answers the n-th PUBLISH on a
//! connection with `ACK(n)` once the message is durable.

use std::io::{self, Read, Write};

pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Frame {
    Hello { role: u8, identity: String },
    Publish { routing_key: String, envelope: Vec<u8> },
    Ack { tag: u64 },
    Deliver { tag: u64, redelivered: bool, envelope: Vec<u8> },
    Heartbeat,
    Subscribe { queue: String, prefetch: u16 },
    Reject { tag: u64, requeue: bool },
    Error { code: u16, message: String },
    Control { request_id: u64, command: Vec<u8> },
    ControlAck { request_id: u64, ok: bool, body: Vec<u8> },
    Status { body: Vec<u8> },
}

pub mod error_code {
    pub const UNKNOWN_TAG: u16 = 1;
    pub const BAD_FRAME: u16 = 2;
    pub const UNEXPECTED: u16 = 3;
    pub const STORAGE: u16 = 4;
    pub const IDENTITY: u16 = 5;
}

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("frame of {0} bytes exceeds limit")]
    TooLarge(usize),
    #[error("unknown frame type {0:#04x}")]
    UnknownType(u8),
    #[error("malformed {0} frame")]
    Malformed(&'static str),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Frame {
    pub fn type_code(&self) -> u8 {
        match self {
            Frame::Hello { .. } => 0x01,
            Frame::Publish { .. } => 0x02,
            Frame::Ack { .. } => 0x03,
            Frame::Deliver { .. } => 0x04,
            Frame::Heartbeat => 0x05,
            Frame::Subscribe { .. } => 0x06,
            Frame::Reject { .. } => 0x07,
            Frame::Error { .. } => 0x08,
            Frame::Control { .. } => 0x09,
            Frame::ControlAck { .. } => 0x0A,
            Frame::Status { .. } => 0x0B,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Frame::Hello { .. } => "HELLO",
            Frame::Publish { .. } => "PUBLISH",
            Frame::Ack { .. } => "ACK",
            Frame::Deliver { .. } => "DELIVER",
            Frame::Heartbeat => "HEARTBEAT",
            Frame::Subscribe { .. } => "SUBSCRIBE",
            Frame::Reject { .. } => "REJECT",
            Frame::Error { .. } => "ERROR",
            Frame::Control { .. } => "CONTROL",
            Frame::ControlAck { .. } => "CONTROL_ACK",
            Frame::Status { .. } => "STATUS",
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut body = vec![self.type_code()];
        match self {
            Frame::Hello { role, identity } => {
                body.push(*role);
                put_str16(&mut body, identity);
            }
            Frame::Publish {
                routing_key,
                envelope,
            } => {
                put_str16(&mut body, routing_key);
                put_bytes32(&mut body, envelope);
            }
            Frame::Ack { tag } => body.extend_from_slice(&tag.to_be_bytes()),
            Frame::Deliver {
                tag,
                redelivered,
                envelope,
            } => {
                body.extend_from_slice(&tag.to_be_bytes());
                body.push(*redelivered as u8);
                put_bytes32(&mut body, envelope);
            }
            Frame::Heartbeat => {}
            Frame::Subscribe { queue, prefetch } => {
                put_str16(&mut body, queue);
                body.extend_from_slice(&prefetch.to_be_bytes());
            }
            Frame::Reject { tag, requeue } => {
                body.extend_from_slice(&tag.to_be_bytes());
                body.push(*requeue as u8);
            }
            Frame::Error { code, message } => {
                body.extend_from_slice(&code.to_be_bytes());
                put_str16(&mut body, message);
            }
            Frame::Control {
                request_id,
                command,
            } => {
                body.extend_from_slice(&request_id.to_be_bytes());
                put_bytes32(&mut body, command);
            }
            Frame::ControlAck {
                request_id,
                ok,
                body: payload,
            } => {
                body.extend_from_slice(&request_id.to_be_bytes());
                body.push(*ok as u8);
                put_bytes32(&mut body, payload);
            }
            Frame::Status { body: payload } => put_bytes32(&mut body, payload),
        }
        let mut out = Vec::with_capacity(4 + body.len());
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
        out
    }

    /// Decodes one frame body (type byte onwards, without the length prefix).
    pub fn decode_body(buf: &[u8]) -> Result<Frame, WireError> {
        let (&ty, rest) = buf.split_first().ok_or(WireError::Malformed("empty"))?;
        let mut r = Cursor { buf: rest };
        let frame = match ty {
            0x01 => Frame::Hello {
                role: r.u8("HELLO")?,
                identity: r.str16("HELLO")?,
            },
            0x02 => Frame::Publish {
                routing_key: r.str16("PUBLISH")?,
                envelope: r.bytes32("PUBLISH")?,
            },
            0x03 => Frame::Ack { tag: r.u64("ACK")? },
            0x04 => Frame::Deliver {
                tag: r.u64("DELIVER")?,
                redelivered: r.flag("DELIVER")?,
                envelope: r.bytes32("DELIVER")?,
            },
            0x05 => Frame::Heartbeat,
            0x06 => Frame::Subscribe {
                queue: r.str16("SUBSCRIBE")?,
                prefetch: u16::from_be_bytes(r.take(2, "SUBSCRIBE")?.try_into().unwrap()),
            },
            0x07 => Frame::Reject {
                tag: r.u64("REJECT")?,
                requeue: r.flag("REJECT")?,
            },
            0x08 => Frame::Error {
                code: u16::from_be_bytes(r.take(2, "ERROR")?.try_into().unwrap()),
                message: r.str16("ERROR")?,
            },
            0x09 => Frame::Control {
                request_id: r.u64("CONTROL")?,
                command: r.bytes32("CONTROL")?,
            },
            0x0A => Frame::ControlAck {
                request_id: r.u64("CONTROL_ACK")?,
                ok: r.flag("CONTROL_ACK")?,
                body: r.bytes32("CONTROL_ACK")?,
            },
            0x0B => Frame::Status {
                body: r.bytes32("STATUS")?,
            },
            other => return Err(WireError::UnknownType(other)),
        };
        if !r.buf.is_empty() {
            return Err(WireError::Malformed(frame.name()));
        }
        Ok(frame)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), WireError> {
        w.write_all(&self.encode())?;
        Ok(())
    }

    /// Blocking read of exactly one frame.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Frame, WireError> {
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let len = u32::from_be_bytes(len) as usize;
        if len > MAX_FRAME_LEN {
            return Err(WireError::TooLarge(len));
        }
        let mut body = vec![0u8; len];
        r.read_exact(&mut body)?;
        Frame::decode_body(&body)
    }
}

/// Accumulates bytes from a non-blocking source and yields complete frames.
#[derive(Default, Debug)]
pub struct FrameBuffer {
    buf: Vec<u8>,
}

impl FrameBuffer {
    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn next_frame(&mut self) -> Result<Option<Frame>, WireError> {
        if self.buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_be_bytes(self.buf[..4].try_into().unwrap()) as usize;
        if len > MAX_FRAME_LEN {
            return Err(WireError::TooLarge(len));
        }
        if self.buf.len() < 4 + len {
            return Ok(None);
        }
        let frame = Frame::decode_body(&self.buf[4..4 + len]);
        self.buf.drain(..4 + len);
        frame.map(Some)
    }
}

fn put_str16(out: &mut Vec<u8>, s: &str) {
    let bytes = &s.as_bytes()[..s.len().min(u16::MAX as usize)];
    out.extend_from_slice(&(bytes.len() as u16).to_be_bytes());
    out.extend_from_slice(bytes);
}

fn put_bytes32(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_be_bytes());
    out.extend_from_slice(b);
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::Malformed(what));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, WireError> {
        Ok(self.take(1, what)?[0])
    }

    fn flag(&mut self, what: &'static str) -> Result<bool, WireError> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(WireError::Malformed(what)),
        }
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn str16(&mut self, what: &'static str) -> Result<String, WireError> {
        let len = u16::from_be_bytes(self.take(2, what)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(len, what)?.to_vec()).map_err(|_| WireError::Malformed(what))
    }

    fn bytes32(&mut self, what: &'static str) -> Result<Vec<u8>, WireError> {
        let len = u32::from_be_bytes(self.take(4, what)?.try_into().unwrap()) as usize;
        Ok(self.take(len, what)?.to_vec())
    }
}
