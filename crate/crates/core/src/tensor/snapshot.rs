//! `TNSR1` tensor snapshots: a text header line `TNSR1 <ndim> <extents...>`
//! followed by the little-endian `f32` payload in row-major order.

use super::Tensor;
use crate::error::{Error, Result};
use std::io::{BufRead, Read, Write};

const MAGIC: &str = "TNSR1";

pub fn write_snapshot<W: Write>(t: &Tensor, out: &mut W) -> std::io::Result<()> {
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    writeln!(out, "{MAGIC} {} {}", t.shape().len(), dims.join(" "))?;
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

pub fn read_snapshot<R: BufRead>(input: &mut R) -> Result<Tensor> {
    let mut line = String::new();
    input
        .read_line(&mut line)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let mut parts = line.split_whitespace();
    let magic = parts.next().unwrap_or("");
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic.to_string(),
        });
    }
    let ndim: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::MalformedHeader(format!("bad rank in {line:?}")))?;
    let shape: Vec<usize> = parts
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::MalformedHeader(format!("bad extent in {line:?}")))?;
    if shape.len() != ndim {
        return Err(Error::MalformedHeader(format!(
            "rank {ndim} but {} extents",
            shape.len()
        )));
    }
    let n: usize = shape.iter().product();
    let mut buf = Vec::with_capacity(n * 4);
    input
        .take((n * 4) as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if buf.len() != n * 4 {
        return Err(Error::TruncatedPayload {
            expected: n * 4,
            found: buf.len(),
        });
    }
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}
