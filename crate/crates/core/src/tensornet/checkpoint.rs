//! Versioned binary checkpoint holding named networks and string metadata.
//!
//! Layout (little-endian): magic `P6DNET\0\0`, u32 version, u32 metadata
//! count then `(key, value)` strings, u32 network count then per network its
//! name, input shape, layer table, taps, and the f64 parameters of every layer
//! in order (weights then biases). Strings are a u32 length plus UTF-8 bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::layers::{Layer, LayerKind};
use super::network::Network;
use super::tensor::{Param, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"P6DNET\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub networks: Vec<(String, Network)>,
}

impl Checkpoint {
    pub fn network(&self, name: &str) -> Result<&Network> {
        self.networks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, net)| net)
            .ok_or_else(|| Error::Data(format!("checkpoint has no network {name:?}")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Data(format!("checkpoint metadata lacks {key:?}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, VERSION)?;
        put_u32(w, self.metadata.len() as u32)?;
        for (k, v) in &self.metadata {
            put_str(w, k)?;
            put_str(w, v)?;
        }
        put_u32(w, self.networks.len() as u32)?;
        for (name, net) in &self.networks {
            put_str(w, name)?;
            put_u32(w, net.input_shape().len() as u32)?;
            for &d in net.input_shape() {
                put_u32(w, d as u32)?;
            }
            put_u32(w, net.layers().len() as u32)?;
            for layer in net.layers() {
                let (code, p) = layer.kind.code();
                w.write_all(&[code])?;
                for v in p {
                    put_u32(w, v)?;
                }
            }
            put_u32(w, net.taps().len() as u32)?;
            for (tap, after) in net.taps() {
                put_str(w, tap)?;
                put_u32(w, *after as u32)?;
            }
            for p in net.params() {
                for v in p.value.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Data("not a network checkpoint".into()));
        }
        let version = get_u32(r)?;
        if version != VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..get_u32(r)? {
            let k = get_str(r)?;
            metadata.insert(k, get_str(r)?);
        }
        let mut networks = Vec::new();
        for _ in 0..get_u32(r)? {
            let name = get_str(r)?;
            let rank = get_u32(r)? as usize;
            let shape = (0..rank).map(|_| get_u32(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let n_layers = get_u32(r)?;
            let mut kinds = Vec::new();
            for _ in 0..n_layers {
                let mut code = [0u8; 1];
                r.read_exact(&mut code)?;
                let mut p = [0u32; 5];
                for v in &mut p {
                    *v = get_u32(r)?;
                }
                kinds.push(LayerKind::from_code(code[0], p)?);
            }
            let mut taps = Vec::new();
            for _ in 0..get_u32(r)? {
                let t = get_str(r)?;
                taps.push((t, get_u32(r)? as usize));
            }
            let mut layers = Vec::new();
            for kind in kinds {
                let mut layer = Layer::zeroed(kind);
                for p in layer.params_mut() {
                    let shape = p.value.shape().to_vec();
                    let mut buf = vec![0u8; p.value.len() * 8];
                    r.read_exact(&mut buf)?;
                    let vals = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    *p = Param::new(Tensor::from_vec(&shape, vals)?);
                }
                layers.push(layer);
            }
            let mut net = Network::from_layers(&shape, layers).map_err(|e| Error::Data(format!("network {name:?}: {e}")))?;
            for (t, after) in taps {
                net.add_tap(&t, after).map_err(|e| Error::Data(e.to_string()))?;
            }
            networks.push((name, net));
        }
        Ok(Self { metadata, networks })
    }
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_str(r: &mut impl Read) -> Result<String> {
    let n = get_u32(r)? as usize;
    if n > 1 << 20 {
        return Err(Error::Data(format!("implausible string length {n}")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::Data("checkpoint string is not UTF-8".into()))
}
