//! Frame layout, all integers big-endian:
//!
//! ```text
//! type u8 | round u32 | sender u32 | payload_len u64 | payload | crc32(payload) u32
//! ```

use std::io::{Read, Write};

use crc::{Crc, CRC_32_ISO_HDLC};

use crate::alignment::PeerParameterStore;
use crate::checkpoint::{decode_store, encode_store};
use crate::error::{Error, Result};
use crate::nn::ShapeSignature;

const CRC32: Crc<u32> = Crc::<u32>::new(&CRC_32_ISO_HDLC);

/// Refuse to allocate for absurd length prefixes.
pub const MAX_PAYLOAD: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageType {
    Hello = 1,
    Token = 2,
    Params = 3,
    Bye = 4,
}

impl TryFrom<u8> for MessageType {
    type Error = Error;

    fn try_from(b: u8) -> Result<Self> {
        Ok(match b {
            1 => Self::Hello,
            2 => Self::Token,
            3 => Self::Params,
            4 => Self::Bye,
            _ => return Err(Error::Protocol(format!("unknown message type {b}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub kind: MessageType,
    pub round: u32,
    pub sender: u32,
    pub payload: Vec<u8>,
}

impl WireMessage {
    pub fn new(kind: MessageType, round: usize, sender: usize, payload: Vec<u8>) -> Self {
        Self {
            kind,
            round: round as u32,
            sender: sender as u32,
            payload,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(21 + self.payload.len());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.round.to_be_bytes());
        out.extend_from_slice(&self.sender.to_be_bytes());
        out.extend_from_slice(&(self.payload.len() as u64).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&CRC32.checksum(&self.payload).to_be_bytes());
        out
    }
}

pub fn write_message(w: &mut impl Write, msg: &WireMessage) -> Result<()> {
    w.write_all(&msg.encode())?;
    w.flush()?;
    Ok(())
}

pub fn read_message(r: &mut impl Read) -> Result<WireMessage> {
    let mut head = [0u8; 17];
    r.read_exact(&mut head)?;
    let kind = MessageType::try_from(head[0])?;
    let round = u32::from_be_bytes(head[1..5].try_into().unwrap());
    let sender = u32::from_be_bytes(head[5..9].try_into().unwrap());
    let len = u64::from_be_bytes(head[9..17].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return Err(Error::Protocol(format!("payload length {len} exceeds the limit")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    let mut sum = [0u8; 4];
    r.read_exact(&mut sum)?;
    let stored = u32::from_be_bytes(sum);
    let actual = CRC32.checksum(&payload);
    if stored != actual {
        return Err(Error::Checksum(format!(
            "{kind:?} frame from {sender}: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    Ok(WireMessage {
        kind,
        round,
        sender,
        payload,
    })
}

fn expect(msg: &WireMessage, kind: MessageType) -> Result<()> {
    if msg.kind != kind {
        return Err(Error::Protocol(format!("expected {kind:?}, got {:?}", msg.kind)));
    }
    Ok(())
}

/// Rounds may repeat or advance by one; anything else is out of order.
pub fn check_round(last: Option<u32>, round: u32) -> Result<()> {
    match last {
        Some(l) if round < l => Err(Error::Protocol(format!(
            "round regression: got {round} after {l}"
        ))),
        Some(l) if round > l + 1 => Err(Error::Protocol(format!(
            "round skipped: got {round} after {l}"
        ))),
        _ => Ok(()),
    }
}

pub fn send_params(w: &mut impl Write, store: &PeerParameterStore, round: usize, sender: usize) -> Result<()> {
    write_message(w, &WireMessage::new(MessageType::Params, round, sender, encode_store(store)))
}

/// Read a PARAMS frame, rejecting rounds that go backwards relative to
/// `last_round`.
pub fn recv_params(r: &mut impl Read, last_round: Option<u32>) -> Result<(PeerParameterStore, u32)> {
    let msg = read_message(r)?;
    expect(&msg, MessageType::Params)?;
    params_from(&msg, last_round)
}

pub fn params_from(msg: &WireMessage, last_round: Option<u32>) -> Result<(PeerParameterStore, u32)> {
    expect(msg, MessageType::Params)?;
    check_round(last_round, msg.round)?;
    Ok((decode_store(&msg.payload)?, msg.round))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hello {
    pub num_peers: u32,
    pub signature: ShapeSignature,
}

impl Hello {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.num_peers.to_be_bytes().to_vec();
        out.extend_from_slice(&(self.signature.0.len() as u32).to_be_bytes());
        for (w, b) in &self.signature.0 {
            for shape in [w, b] {
                out.extend_from_slice(&(shape.len() as u32).to_be_bytes());
                for &d in shape {
                    out.extend_from_slice(&(d as u32).to_be_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut words = bytes.chunks_exact(4).map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize);
        let short = || Error::Protocol("truncated HELLO payload".into());
        if !bytes.len().is_multiple_of(4) {
            return Err(short());
        }
        let num_peers = words.next().ok_or_else(short)? as u32;
        let layers = words.next().ok_or_else(short)?;
        let mut sig = Vec::new();
        for _ in 0..layers {
            let mut shapes = [Vec::new(), Vec::new()];
            for shape in &mut shapes {
                let rank = words.next().ok_or_else(short)?;
                for _ in 0..rank {
                    shape.push(words.next().ok_or_else(short)?);
                }
            }
            let [w, b] = shapes;
            sig.push((w, b));
        }
        if words.next().is_some() {
            return Err(Error::Protocol("trailing bytes in HELLO payload".into()));
        }
        Ok(Self {
            num_peers,
            signature: ShapeSignature(sig),
        })
    }

    /// Handshake acceptance: same ring size and same architecture.
    pub fn check_against(&self, ours: &Hello) -> Result<()> {
        if self.num_peers != ours.num_peers {
            return Err(Error::Protocol(format!(
                "handshake rejected: peer expects {} nodes, we expect {}",
                self.num_peers, ours.num_peers
            )));
        }
        if self.signature != ours.signature {
            return Err(Error::Protocol(format!(
                "handshake rejected: shape signature {:?} differs from ours {:?}",
                self.signature.layer_dims(),
                ours.signature.layer_dims()
            )));
        }
        Ok(())
    }
}

/// TOKEN payload: the visit position and the round's full visit order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub step: u32,
    pub order: Vec<u32>,
}

impl Token {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.step.to_be_bytes().to_vec();
        out.extend_from_slice(&(self.order.len() as u32).to_be_bytes());
        for p in &self.order {
            out.extend_from_slice(&p.to_be_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || !bytes.len().is_multiple_of(4) {
            return Err(Error::Protocol("malformed TOKEN payload".into()));
        }
        let words: Vec<u32> = bytes
            .chunks_exact(4)
            .map(|c| u32::from_be_bytes(c.try_into().unwrap()))
            .collect();
        let (step, n) = (words[0], words[1] as usize);
        if words.len() != n + 2 || step as usize > n {
            return Err(Error::Protocol("malformed TOKEN payload".into()));
        }
        Ok(Self {
            step,
            order: words[2..].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_mlp;

    fn store() -> PeerParameterStore {
        PeerParameterStore::new((0..3).map(|s| init_mlp(&[5, 4, 2], s).unwrap()).collect()).unwrap()
    }

    #[test]
    fn frame_layout() {
        let m = WireMessage::new(MessageType::Bye, 7, 2, vec![]);
        let b = m.encode();
        assert_eq!(b.len(), 21);
        assert_eq!(b[0], 4);
        assert_eq!(&b[1..5], &[0, 0, 0, 7]);
        assert_eq!(&b[5..9], &[0, 0, 0, 2]);
        assert_eq!(&b[9..17], &[0; 8]);
        assert_eq!(read_message(&mut &b[..]).unwrap(), m);
    }

    #[test]
    fn params_round_trip_over_a_buffer() {
        let s = store();
        let mut buf = Vec::new();
        send_params(&mut buf, &s, 3, 1).unwrap();
        let (back, round) = recv_params(&mut &buf[..], Some(2)).unwrap();
        assert!(back.bit_eq(&s));
        assert_eq!(round, 3);
    }

    #[test]
    fn flipped_payload_byte_is_rejected() {
        let mut buf = Vec::new();
        send_params(&mut buf, &store(), 1, 0).unwrap();
        buf[40] ^= 0x01;
        assert!(matches!(recv_params(&mut &buf[..], None), Err(Error::Checksum(_))));
    }

    #[test]
    fn rounds_must_not_regress() {
        let mut buf = Vec::new();
        send_params(&mut buf, &store(), 2, 0).unwrap();
        assert!(matches!(recv_params(&mut &buf[..], Some(3)), Err(Error::Protocol(_))));
        assert!(recv_params(&mut &buf[..], Some(0)).is_err());
        assert!(check_round(Some(4), 4).is_ok());
    }

    #[test]
    fn hello_mismatch_is_rejected() {
        let ours = Hello {
            num_peers: 3,
            signature: init_mlp(&[5, 4, 2], 0).unwrap().signature(),
        };
        let same = Hello::decode(&ours.encode()).unwrap();
        assert_eq!(same, ours);
        same.check_against(&ours).unwrap();
        let other = Hello {
            num_peers: 3,
            signature: init_mlp(&[5, 3, 2], 0).unwrap().signature(),
        };
        assert!(other.check_against(&ours).is_err());
        let bigger = Hello { num_peers: 4, ..ours.clone() };
        assert!(bigger.check_against(&ours).is_err());
    }

    #[test]
    fn token_round_trip_and_validation() {
        let t = Token {
            step: 1,
            order: vec![2, 0, 1],
        };
        assert_eq!(Token::decode(&t.encode()).unwrap(), t);
        assert!(Token::decode(&[0, 0, 0, 9, 0, 0, 0, 1, 0, 0, 0, 0]).is_err());
    }

    #[test]
    fn unknown_type_and_huge_length() {
        let mut b = WireMessage::new(MessageType::Bye, 0, 0, vec![]).encode();
        b[0] = 9;
        assert!(read_message(&mut &b[..]).is_err());
        b[0] = 4;
        b[9] = 0xff;
        assert!(read_message(&mut &b[..]).is_err());
    }
}
