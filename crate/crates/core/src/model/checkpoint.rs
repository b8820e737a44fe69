//! Checkpoints: a text manifest followed by tensor snapshots in manifest order.
//!
//! ```text
//! CKPT1
//! config base_width=8
//! meta epoch=12
//! param enc1.0.conv.weight 8,1,3,3,3
//! buffer enc1.0.bn.running_mean 8
//! END
//! <TNSR1 snapshot>...
//! ```

use super::{Network, NetworkConfig};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::{read_snapshot, write_snapshot, Tensor};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

const MAGIC: &str = "CKPT1";

fn shape_text(t: &Tensor) -> String {
    t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

/// Write the network's config, `meta`, parameters and running statistics.
pub fn write_checkpoint<W: Write>(net: &Network, meta: &KeyValues, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "{MAGIC}")?;
    let mut cfg = KeyValues::default();
    net.config().to_kv(&mut cfg);
    for (k, v) in cfg.iter() {
        writeln!(out, "config {k}={v}")?;
    }
    for (k, v) in meta.iter() {
        writeln!(out, "meta {k}={v}")?;
    }
    for (name, t) in net.param_names().iter().zip(net.params()) {
        writeln!(out, "param {name} {}", shape_text(t))?;
    }
    for (name, t) in net.buffer_names().iter().zip(net.buffers()) {
        writeln!(out, "buffer {name} {}", shape_text(t))?;
    }
    writeln!(out, "END")?;
    for t in net.params().iter().chain(net.buffers()) {
        write_snapshot(t, out)?;
    }
    Ok(())
}

/// Rebuild the network a checkpoint describes. Returns it with the `meta` entries.
pub fn read_checkpoint<R: BufRead>(input: &mut R) -> Result<(Network, KeyValues)> {
    let mut line = String::new();
    let mut next_line = |input: &mut R| -> Result<Option<String>> {
        line.clear();
        let n = input
            .read_line(&mut line)
            .map_err(|e| Error::MalformedHeader(format!("checkpoint manifest: {e}")))?;
        Ok((n > 0).then(|| line.trim_end_matches(['\n', '\r']).to_string()))
    };
    let first = next_line(input)?.unwrap_or_default();
    if first != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found: first });
    }
    let mut cfg = String::new();
    let mut meta = String::new();
    let mut entries: Vec<(String, String, String)> = Vec::new();
    loop {
        let l = next_line(input)?.ok_or_else(|| Error::MalformedHeader("checkpoint manifest has no END".into()))?;
        if l == "END" {
            break;
        }
        let (kind, rest) = l
            .split_once(' ')
            .ok_or_else(|| Error::MalformedHeader(format!("checkpoint line {l:?}")))?;
        match kind {
            "config" => cfg.push_str(&format!("{rest}\n")),
            "meta" => meta.push_str(&format!("{rest}\n")),
            "param" | "buffer" => {
                let (name, shape) = rest
                    .split_once(' ')
                    .ok_or_else(|| Error::MalformedHeader(format!("checkpoint line {l:?}")))?;
                entries.push((kind.to_string(), name.to_string(), shape.to_string()));
            }
            _ => return Err(Error::MalformedHeader(format!("checkpoint line {l:?}"))),
        }
    }
    let mut kv = KeyValues::parse(&cfg)?;
    let config = NetworkConfig::from_kv(&mut kv)?;
    kv.finish()?;
    let mut net = Network::new(config, 0)?;
    let expected: Vec<(String, String, String)> = net
        .param_names()
        .iter()
        .zip(net.params())
        .map(|(n, t)| ("param".to_string(), n.clone(), shape_text(t)))
        .chain(
            net.buffer_names()
                .iter()
                .zip(net.buffers())
                .map(|(n, t)| ("buffer".to_string(), n.clone(), shape_text(t))),
        )
        .collect();
    if entries != expected {
        let at = entries.iter().zip(&expected).position(|(a, b)| a != b).unwrap_or(entries.len().min(expected.len()));
        return Err(Error::MalformedHeader(format!(
            "checkpoint tensors do not match the configured network (first difference at entry {at})"
        )));
    }
    let n_params = net.params().len();
    for i in 0..expected.len() {
        let t = read_snapshot(input)?;
        let slot = if i < n_params {
            &mut net.params_mut()[i]
        } else {
            &mut net.buffers_mut()[i - n_params]
        };
        if t.shape() != slot.shape() {
            return Err(Error::MalformedHeader(format!("snapshot {i} has shape {:?}", t.shape())));
        }
        *slot = t;
    }
    Ok((net, KeyValues::parse(&meta)?))
}

pub fn save_checkpoint(net: &Network, meta: &KeyValues, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(net, meta, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Network, KeyValues)> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = NetworkConfig {
            base_width: 2,
            csa_levels: vec![2],
            ..Default::default()
        };
        let mut net = Network::new(cfg, 9).unwrap();
        net.buffers_mut()[0].data_mut()[0] = 0.125;
        let mut meta = KeyValues::default();
        meta.set("epoch", 3);
        let mut buf = Vec::new();
        write_checkpoint(&net, &meta, &mut buf).unwrap();
        let (back, m) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(back.buffers(), net.buffers());
        assert_eq!(back.config(), net.config());
        assert_eq!(m.get("epoch"), Some("3"));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_checkpoint(&mut &b"TNSR1\n"[..]), Err(Error::BadMagic { .. })));
        let net = Network::new(NetworkConfig { base_width: 2, ..Default::default() }, 0).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&net, &KeyValues::default(), &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
