//! The single-round client-to-server release: bit-exact bundle encoding,
//! transport over a TCP stream, and offline `.plb` files.
//!
//! Byte layout:
//!
//! ```text
//! "PLRN1\n"                                   magic (50 4C 52 4E 31 0A)
//! n=<decimal>\n                               header, UTF-8 key=value lines
//! dim=<decimal>\n
//! eps_target=<float, 17 significant digits>\n
//! delta=<float>\n
//! lambda_adj=<float>\n
//! schema_hash=<decimal u32>\n
//! \n                                          blank line ends the header
//! n*dim little-endian IEEE-754 f64            embeddings, row-major
//! n little-endian i64                         labels
//! 4-byte little-endian CRC32 (IEEE)           over all preceding bytes
//! ```
//!
//! CRC32 is the reflected IEEE polynomial (integrity against corruption,
//! not authentication). The schema hash is 32-bit FNV-1a of the fitted
//! schema JSON. Labels ship in the clear; the bundle carries no raw
//! features and no per-sample epsilon values.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::time::Duration;

use thiserror::Error;

use crate::numkit::matrix::Matrix;
use crate::numkit::mlp::{Activation, Mlp};
use crate::privatizer::PrivatizerParams;

pub const MAGIC: &[u8; 6] = b"PLRN1\n";
pub const ACK: u8 = 0x06;
pub const NAK: u8 = 0x15;
pub const PARAMS_MAGIC: &[u8; 7] = b"PMPRV1\n";

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("bad magic bytes")]
    Magic,
    #[error("malformed header: {0}")]
    Header(String),
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("truncated: need {needed} bytes, have {got}")]
    Truncated { needed: usize, got: usize },
    #[error("non-finite value in payload at element {0}")]
    NonFinite(usize),
    #[error("bundle invariant violated: {0}")]
    Invariant(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("server rejected the bundle (nak)")]
    Nak,
    #[error("no acknowledgement before timeout")]
    AckTimeout,
}

/// The single-round wire message.
#[derive(Debug, Clone, PartialEq)]
pub struct ReleaseBundle {
    pub eps_target: f64,
    pub delta: f64,
    pub lambda_adj: f64,
    pub schema_hash: u32,
    /// `n x d` released embeddings.
    pub embeddings: Matrix<f64>,
    pub labels: Vec<i64>,
}

impl ReleaseBundle {
    pub fn n(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    fn check_invariants(&self) -> Result<(), ProtocolError> {
        if self.embeddings.rows() != self.labels.len() {
            return Err(ProtocolError::Invariant(format!(
                "{} embedding rows vs {} labels",
                self.embeddings.rows(),
                self.labels.len()
            )));
        }
        if let Some(i) = self.embeddings.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(ProtocolError::NonFinite(i));
        }
        if !self.eps_target.is_finite() || !self.delta.is_finite() || !self.lambda_adj.is_finite() {
            return Err(ProtocolError::Invariant("non-finite header field".into()));
        }
        Ok(())
    }
}

/// CRC32, reflected IEEE polynomial 0xEDB88320, table-driven.
pub fn crc32(bytes: &[u8]) -> u32 {
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = [0u32; 256];
        for (i, slot) in t.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            }
            *slot = c;
        }
        t
    });
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}

/// 32-bit FNV-1a hash (for the schema JSON).
pub fn fnv1a32(bytes: &[u8]) -> u32 {
    let mut hash = 0x811C_9DC5u32;
    for &b in bytes {
        hash ^= b as u32;
        hash = hash.wrapping_mul(0x0100_0193);
    }
    hash
}

/// Floats in headers carry 17 significant digits so they round-trip.
fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Encode to the exact byte layout above.
pub fn encode_bundle(bundle: &ReleaseBundle) -> Result<Vec<u8>, ProtocolError> {
    bundle.check_invariants()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(format!("n={}\n", bundle.n()).as_bytes());
    out.extend_from_slice(format!("dim={}\n", bundle.dim()).as_bytes());
    out.extend_from_slice(format!("eps_target={}\n", format_float(bundle.eps_target)).as_bytes());
    out.extend_from_slice(format!("delta={}\n", format_float(bundle.delta)).as_bytes());
    out.extend_from_slice(format!("lambda_adj={}\n", format_float(bundle.lambda_adj)).as_bytes());
    out.extend_from_slice(format!("schema_hash={}\n", bundle.schema_hash).as_bytes());
    out.push(b'\n');
    for v in bundle.embeddings.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in &bundle.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Exact inverse of [`encode_bundle`], with each rejection cause
/// distinguished.
pub fn decode_bundle(bytes: &[u8]) -> Result<ReleaseBundle, ProtocolError> {
    if bytes.len() < MAGIC.len() {
        if MAGIC.starts_with(bytes) {
            return Err(ProtocolError::Truncated { needed: MAGIC.len(), got: bytes.len() });
        }
        return Err(ProtocolError::Magic);
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(ProtocolError::Magic);
    }
    let body = &bytes[MAGIC.len()..];
    // header ends at the first blank line
    let header_end = find_blank_line(body).ok_or(ProtocolError::Truncated {
        needed: bytes.len() + 1,
        got: bytes.len(),
    })?;
    let header_text = std::str::from_utf8(&body[..header_end])
        .map_err(|_| ProtocolError::Header("header is not UTF-8".into()))?;
    let mut lines = header_text.lines();
    let n = parse_header_usize(lines.next(), "n")?;
    let dim = parse_header_usize(lines.next(), "dim")?;
    let eps_target = parse_header_float(lines.next(), "eps_target")?;
    let delta = parse_header_float(lines.next(), "delta")?;
    let lambda_adj = parse_header_float(lines.next(), "lambda_adj")?;
    let schema_hash = parse_header_usize(lines.next(), "schema_hash")? as u32;
    if lines.next().is_some() {
        return Err(ProtocolError::Header("unexpected extra header line".into()));
    }
    let payload_start = MAGIC.len() + header_end + 1; // past the blank line
    let payload_len = n
        .checked_mul(dim)
        .and_then(|e| e.checked_mul(8))
        .and_then(|e| e.checked_add(n * 8))
        .ok_or_else(|| ProtocolError::Header("size overflow".into()))?;
    let needed = payload_start + payload_len + 4;
    if bytes.len() < needed {
        return Err(ProtocolError::Truncated { needed, got: bytes.len() });
    }
    if bytes.len() > needed {
        return Err(ProtocolError::Header(format!(
            "{} trailing bytes after crc",
            bytes.len() - needed
        )));
    }
    let stored = u32::from_le_bytes(bytes[needed - 4..].try_into().expect("4 bytes"));
    let computed = crc32(&bytes[..needed - 4]);
    if stored != computed {
        return Err(ProtocolError::Crc { stored, computed });
    }
    let mut cursor = payload_start;
    let mut data = Vec::with_capacity(n * dim);
    for i in 0..n * dim {
        let v = f64::from_le_bytes(bytes[cursor..cursor + 8].try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(ProtocolError::NonFinite(i));
        }
        data.push(v);
        cursor += 8;
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(i64::from_le_bytes(bytes[cursor..cursor + 8].try_into().expect("8 bytes")));
        cursor += 8;
    }
    let embeddings = Matrix::from_vec(n, dim, data).map_err(|_| ProtocolError::NonFinite(0))?;
    Ok(ReleaseBundle { eps_target, delta, lambda_adj, schema_hash, embeddings, labels })
}

fn find_blank_line(body: &[u8]) -> Option<usize> {
    // position i such that body[i] is the '\n' of an empty line, meaning the
    // previous byte is also '\n' (or the header is empty)
    let mut i = 0;
    while i < body.len() {
        if body[i] == b'\n' && (i == 0 || body[i - 1] == b'\n') {
            return Some(i);
        }
        i += 1;
    }
    None
}

fn parse_header_kv<'a>(line: Option<&'a str>, key: &str) -> Result<&'a str, ProtocolError> {
    let line = line.ok_or_else(|| ProtocolError::Header(format!("missing key '{key}'")))?;
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| ProtocolError::Header(format!("expected '{key}=...', got {line:?}")))?;
    if k != key {
        return Err(ProtocolError::Header(format!("expected key '{key}', got '{k}'")));
    }
    Ok(v)
}

fn parse_header_usize(line: Option<&str>, key: &str) -> Result<usize, ProtocolError> {
    parse_header_kv(line, key)?
        .parse()
        .map_err(|_| ProtocolError::Header(format!("bad integer for '{key}'")))
}

fn parse_header_float(line: Option<&str>, key: &str) -> Result<f64, ProtocolError> {
    parse_header_kv(line, key)?
        .parse()
        .map_err(|_| ProtocolError::Header(format!("bad float for '{key}'")))
}

/// Write a bundle to an offline `.plb` file.
pub fn write_plb(path: &Path, bundle: &ReleaseBundle) -> Result<(), ProtocolError> {
    let bytes = encode_bundle(bundle)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_plb(path: &Path) -> Result<ReleaseBundle, ProtocolError> {
    let bytes = std::fs::read(path)?;
    decode_bundle(&bytes)
}

/// Send one bundle: connect, write the encoded bytes, half-close, wait for
/// the one-byte acknowledgement. Exactly one round trip.
pub fn send_bundle(addr: &str, bundle: &ReleaseBundle, timeout: Duration) -> Result<(), ProtocolError> {
    let bytes = encode_bundle(bundle)?;
    let mut stream = TcpStream::connect(addr)?;
    stream.set_read_timeout(Some(timeout))?;
    stream.write_all(&bytes)?;
    stream.flush()?;
    stream.shutdown(std::net::Shutdown::Write)?;
    let mut reply = [0u8; 1];
    match stream.read_exact(&mut reply) {
        Ok(()) => match reply[0] {
            ACK => Ok(()),
            NAK => Err(ProtocolError::Nak),
            other => Err(ProtocolError::Header(format!("unexpected reply byte {other:#04x}"))),
        },
        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock || e.kind() == std::io::ErrorKind::TimedOut => {
            Err(ProtocolError::AckTimeout)
        }
        Err(e) => Err(e.into()),
    }
}

/// Accept one connection on the listener, read one bundle, validate, reply
/// with ack (0x06) or nak (0x15), close.
pub fn serve_once(listener: &TcpListener, timeout: Duration) -> Result<ReleaseBundle, ProtocolError> {
    let (mut stream, _peer) = listener.accept()?;
    stream.set_read_timeout(Some(timeout))?;
    let mut bytes = Vec::new();
    stream.read_to_end(&mut bytes)?;
    match decode_bundle(&bytes) {
        Ok(bundle) => {
            stream.write_all(&[ACK])?;
            stream.flush()?;
            Ok(bundle)
        }
        Err(e) => {
            let _ = stream.write_all(&[NAK]);
            let _ = stream.flush();
            Err(e)
        }
    }
}

// ---------------------------------------------------------------------------
// Privatizer parameter blob (same encoding conventions: magic, header lines,
// little-endian f64 payload, trailing CRC32)
// ---------------------------------------------------------------------------

fn activation_tag(a: Activation) -> &'static str {
    match a {
        Activation::Identity => "identity",
        Activation::Tanh => "tanh",
        Activation::Relu => "relu",
        Activation::Softmax => "softmax",
    }
}

fn activation_from_tag(tag: &str) -> Result<Activation, ProtocolError> {
    Ok(match tag {
        "identity" => Activation::Identity,
        "tanh" => Activation::Tanh,
        "relu" => Activation::Relu,
        "softmax" => Activation::Softmax,
        other => return Err(ProtocolError::Header(format!("unknown activation '{other}'"))),
    })
}

/// Serialize privatizer parameters as a versioned binary blob.
pub fn encode_privatizer(params: &PrivatizerParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PARAMS_MAGIC);
    match params {
        PrivatizerParams::LinearPower { net, dim, power, det_jitter } => {
            out.extend_from_slice(b"variant=linear-power\n");
            out.extend_from_slice(format!("dim={dim}\n").as_bytes());
            out.extend_from_slice(format!("power={power}\n").as_bytes());
            out.extend_from_slice(format!("det_jitter={}\n", format_float(*det_jitter)).as_bytes());
            out.extend_from_slice(format!("layers={}\n", net.layers().len()).as_bytes());
            for layer in net.layers() {
                out.extend_from_slice(
                    format!(
                        "layer={},{},{}\n",
                        layer.weight.rows(),
                        layer.weight.cols(),
                        activation_tag(layer.activation)
                    )
                    .as_bytes(),
                );
            }
            out.push(b'\n');
            for layer in net.layers() {
                for v in layer.weight.as_slice() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                for v in &layer.bias {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        PrivatizerParams::TwoLayerTanh { w1, w2, b2, det_jitter } => {
            out.extend_from_slice(b"variant=two-layer-tanh\n");
            out.extend_from_slice(format!("dim={}\n", w2.rows()).as_bytes());
            out.extend_from_slice(format!("hidden={}\n", w1.rows()).as_bytes());
            out.extend_from_slice(format!("det_jitter={}\n", format_float(*det_jitter)).as_bytes());
            out.push(b'\n');
            for v in w1.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in w2.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in b2 {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Reload a privatizer parameter blob.
pub fn decode_privatizer(bytes: &[u8]) -> Result<PrivatizerParams, ProtocolError> {
    if bytes.len() < PARAMS_MAGIC.len() || &bytes[..PARAMS_MAGIC.len()] != PARAMS_MAGIC {
        return Err(ProtocolError::Magic);
    }
    if bytes.len() < PARAMS_MAGIC.len() + 4 {
        return Err(ProtocolError::Truncated { needed: PARAMS_MAGIC.len() + 4, got: bytes.len() });
    }
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32(&bytes[..bytes.len() - 4]);
    if stored != computed {
        return Err(ProtocolError::Crc { stored, computed });
    }
    let body = &bytes[PARAMS_MAGIC.len()..bytes.len() - 4];
    let header_end = find_blank_line(body)
        .ok_or(ProtocolError::Header("missing header terminator".into()))?;
    let header = std::str::from_utf8(&body[..header_end])
        .map_err(|_| ProtocolError::Header("header is not UTF-8".into()))?;
    let mut lines = header.lines();
    let variant = parse_header_kv(lines.next(), "variant")?.to_string();
    let payload = &body[header_end + 1..];
    let mut reader = F64Reader { bytes: payload, pos: 0 };
    match variant.as_str() {
        "linear-power" => {
            let dim = parse_header_usize(lines.next(), "dim")?;
            let power = parse_header_usize(lines.next(), "power")? as u32;
            let det_jitter = parse_header_float(lines.next(), "det_jitter")?;
            let n_layers = parse_header_usize(lines.next(), "layers")?;
            let mut shapes = Vec::with_capacity(n_layers);
            let mut sizes = Vec::with_capacity(n_layers + 1);
            let mut acts = Vec::with_capacity(n_layers);
            for _ in 0..n_layers {
                let v = parse_header_kv(lines.next(), "layer")?;
                let parts: Vec<&str> = v.split(',').collect();
                if parts.len() != 3 {
                    return Err(ProtocolError::Header(format!("bad layer spec {v:?}")));
                }
                let rows: usize = parts[0]
                    .parse()
                    .map_err(|_| ProtocolError::Header("bad layer rows".into()))?;
                let cols: usize = parts[1]
                    .parse()
                    .map_err(|_| ProtocolError::Header("bad layer cols".into()))?;
                if sizes.is_empty() {
                    sizes.push(cols);
                }
                sizes.push(rows);
                acts.push(activation_from_tag(parts[2])?);
                shapes.push((rows, cols));
            }
            let mut net = Mlp::new(&sizes, &acts)
                .map_err(|e| ProtocolError::Header(format!("inconsistent layer sizes: {e}")))?;
            for (layer, (rows, cols)) in net.layers_mut().iter_mut().zip(shapes) {
                let wlen = rows * cols;
                let w = reader.take(wlen)?;
                layer.weight = Matrix::from_vec(rows, cols, w)
                    .map_err(|_| ProtocolError::NonFinite(reader.pos / 8))?;
                layer.bias = reader.take(rows)?;
            }
            reader.finish()?;
            Ok(PrivatizerParams::LinearPower { net, dim, power, det_jitter })
        }
        "two-layer-tanh" => {
            let dim = parse_header_usize(lines.next(), "dim")?;
            let hidden = parse_header_usize(lines.next(), "hidden")?;
            let det_jitter = parse_header_float(lines.next(), "det_jitter")?;
            let w1 = Matrix::from_vec(hidden, dim, reader.take(hidden * dim)?)
                .map_err(|_| ProtocolError::NonFinite(0))?;
            let w2 = Matrix::from_vec(dim, hidden, reader.take(dim * hidden)?)
                .map_err(|_| ProtocolError::NonFinite(0))?;
            let b2 = reader.take(dim)?;
            reader.finish()?;
            Ok(PrivatizerParams::TwoLayerTanh { w1, w2, b2, det_jitter })
        }
        other => Err(ProtocolError::Header(format!("unknown variant '{other}'"))),
    }
}

struct F64Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl F64Reader<'_> {
    fn take(&mut self, count: usize) -> Result<Vec<f64>, ProtocolError> {
        let needed = self.pos + count * 8;
        if self.bytes.len() < needed {
            return Err(ProtocolError::Truncated { needed, got: self.bytes.len() });
        }
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            out.push(f64::from_le_bytes(
                self.bytes[self.pos..self.pos + 8].try_into().expect("8 bytes"),
            ));
            self.pos += 8;
        }
        Ok(out)
    }

    fn finish(&self) -> Result<(), ProtocolError> {
        if self.pos != self.bytes.len() {
            return Err(ProtocolError::Header(format!(
                "{} trailing payload bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}
