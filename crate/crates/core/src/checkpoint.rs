//! Binary checkpoints holding a backbone and, optionally, fusion weights.
//!
//! Layout (little endian): magic `TCVCCKPT`, `u32` version, then sections
//! `[tag: 4 bytes][len: u64][payload]`. Tags are `BKBN` (backbone) and
//! `FFM_` (fusion module). A layer is `u32 cin, u32 cout, u32 k` followed
//! by the weights and biases as `f64`.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, ToyBackbone};
use crate::error::{Result, TcvcError};
use crate::fusion::{FfmConfig, FfmParams};
use crate::nn::Conv2d;

pub const MAGIC: &[u8; 8] = b"TCVCCKPT";
pub const VERSION: u32 = 1;
const TAG_BACKBONE: &[u8; 4] = b"BKBN";
const TAG_FFM: &[u8; 4] = b"FFM_";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub backbone: ToyBackbone,
    pub ffm: Option<FfmParams>,
}

fn bad(field: &'static str, detail: impl Into<String>) -> TcvcError {
    TcvcError::Format {
        format: "checkpoint",
        field,
        detail: detail.into(),
    }
}

fn put_layers(out: &mut Vec<u8>, layers: &[&Conv2d]) {
    out.write_u32::<LE>(layers.len() as u32).unwrap();
    for l in layers {
        for v in [l.in_channels(), l.out_channels(), l.kernel()] {
            out.write_u32::<LE>(v as u32).unwrap();
        }
        for &x in l.weight().iter().chain(l.bias()) {
            out.write_f64::<LE>(x).unwrap();
        }
    }
}

fn get_layers(r: &mut Cursor<&[u8]>) -> Result<Vec<Conv2d>> {
    let eof = |_| bad("layers", "unexpected end of section");
    let n = r.read_u32::<LE>().map_err(eof)? as usize;
    let mut layers = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        let cin = r.read_u32::<LE>().map_err(eof)? as usize;
        let cout = r.read_u32::<LE>().map_err(eof)? as usize;
        let k = r.read_u32::<LE>().map_err(eof)? as usize;
        let wlen = cin
            .checked_mul(cout)
            .and_then(|x| x.checked_mul(k * k))
            .ok_or_else(|| bad("layers", "layer size overflows"))?;
        let remaining = r.get_ref().len() - r.position() as usize;
        if (wlen + cout) * 8 > remaining {
            return Err(bad("layers", "unexpected end of section"));
        }
        let mut weight = vec![0.0; wlen];
        let mut bias = vec![0.0; cout];
        r.read_f64_into::<LE>(&mut weight).map_err(eof)?;
        r.read_f64_into::<LE>(&mut bias).map_err(eof)?;
        layers.push(Conv2d::from_parts(cin, cout, k, weight, bias)?);
    }
    Ok(layers)
}

fn backbone_payload(b: &ToyBackbone) -> Vec<u8> {
    let mut p = Vec::new();
    put_layers(&mut p, &b.layers());
    p
}

fn ffm_payload(f: &FfmParams) -> Vec<u8> {
    let mut p = Vec::new();
    let c = f.config();
    for v in [c.feature_channels, c.hidden, c.projection] {
        p.write_u32::<LE>(v as u32).unwrap();
    }
    put_layers(&mut p, &f.layers());
    p
}

/// Hex SHA-256 of the serialized backbone weights.
pub fn backbone_checksum(b: &ToyBackbone) -> String {
    Sha256::digest(backbone_payload(b))
        .iter()
        .map(|x| format!("{x:02x}"))
        .collect()
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LE>(VERSION).unwrap();
        let mut section = |tag: &[u8; 4], payload: Vec<u8>| {
            out.extend_from_slice(tag);
            out.write_u64::<LE>(payload.len() as u64).unwrap();
            out.extend_from_slice(&payload);
        };
        section(TAG_BACKBONE, backbone_payload(&self.backbone));
        if let Some(f) = &self.ffm {
            section(TAG_FFM, ffm_payload(f));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("magic", "file too short"))?;
        if &magic != MAGIC {
            return Err(bad("magic", "not a checkpoint"));
        }
        let version = r.read_u32::<LE>().map_err(|_| bad("version", "missing"))?;
        if version != VERSION {
            return Err(bad("version", format!("unsupported version {version}")));
        }
        let mut backbone = None;
        let mut ffm = None;
        while (r.position() as usize) < bytes.len() {
            let mut tag = [0u8; 4];
            r.read_exact(&mut tag).map_err(|_| bad("section", "truncated tag"))?;
            let len = r.read_u64::<LE>().map_err(|_| bad("section", "truncated length"))? as usize;
            let start = r.position() as usize;
            let end = start
                .checked_add(len)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| bad("section", "length past end of file"))?;
            let mut sec = Cursor::new(&bytes[start..end]);
            match &tag {
                TAG_BACKBONE => backbone = Some(ToyBackbone::from_layers(get_layers(&mut sec)?)?),
                TAG_FFM => {
                    let eof = |_| bad("ffm config", "truncated");
                    let config = FfmConfig {
                        feature_channels: sec.read_u32::<LE>().map_err(eof)? as usize,
                        hidden: sec.read_u32::<LE>().map_err(eof)? as usize,
                        projection: sec.read_u32::<LE>().map_err(eof)? as usize,
                    };
                    ffm = Some(FfmParams::from_layers(config, get_layers(&mut sec)?)?);
                }
                _ => log::warn!("skipping unknown checkpoint section {:?}", String::from_utf8_lossy(&tag)),
            }
            if sec.position() as usize != len && (&tag == TAG_BACKBONE || &tag == TAG_FFM) {
                return Err(bad("section", "trailing bytes in section"));
            }
            r.set_position(end as u64);
        }
        let backbone = backbone.ok_or_else(|| bad("section", "no backbone section"))?;
        if let Some(f) = &ffm {
            if f.config().feature_channels != backbone.head().conv().in_channels() {
                return Err(bad("ffm config", "feature channels differ from backbone"));
            }
        }
        Ok(Checkpoint { backbone, ffm })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| TcvcError::io(path, e))?;
        f.write_all(&self.encode()).map_err(|e| TcvcError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| TcvcError::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::build_toy_backbone;

    #[test]
    fn round_trip_bit_exact() {
        let b = build_toy_backbone(3);
        let ffm = FfmParams::new(FfmConfig::new(b.feature_channels()).with_hidden(8), 4);
        let ck = Checkpoint { backbone: b, ffm: Some(ffm) };
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
        let bare = Checkpoint { ffm: None, ..ck };
        assert_eq!(Checkpoint::decode(&bare.encode()).unwrap(), bare);
    }

    #[test]
    fn checksum_tracks_weights() {
        let a = build_toy_backbone(1);
        assert_eq!(backbone_checksum(&a), backbone_checksum(&a.clone()));
        assert_eq!(backbone_checksum(&a).len(), 64);
        let mut b = a.clone();
        b.zero_head();
        assert_ne!(backbone_checksum(&a), backbone_checksum(&b));
    }

    #[test]
    fn rejects_corruption() {
        let ck = Checkpoint { backbone: build_toy_backbone(0), ffm: None };
        let bytes = ck.encode();
        let mut m = bytes.clone();
        m[0] = b'X';
        assert!(matches!(Checkpoint::decode(&m), Err(TcvcError::Format { field: "magic", .. })));
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(Checkpoint::decode(&v), Err(TcvcError::Format { field: "version", .. })));
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::decode(&bytes[..12]).is_err());
    }
}
