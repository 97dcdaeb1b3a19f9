//! Binary checkpoints: a text header listing named `f32` arrays, then the raw
//! little-endian payload.
//!
//! ```text
//! mlhf-checkpoint 1
//! byte_order little-endian
//! arrays 2
//! array damping.fc_weight.l1.i.w f32 4,5 0
//! array damping.fc_weight.l1.i.b f32 4 80
//! payload_bytes 96
//! crc32 1a2b3c4d
//! end
//! <payload>
//! ```
//!
//! Offsets are bytes from the start of the payload.

use std::fmt::Write as _;
use std::path::Path;

use mlhf::controller::{Controller, ControllerBank};

use crate::error::{HarnessError, Result};

pub const VERSION: u32 = 1;
const MAGIC: &str = "mlhf-checkpoint";
const END: &str = "end\n";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub arrays: Vec<NamedArray>,
}

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_bank(bank: &ControllerBank) -> Self {
        let arrays = [&bank.damping, &bank.precond]
            .into_iter()
            .flat_map(Controller::named_tensors)
            .map(|(name, t)| NamedArray { name, shape: t.shape().to_vec(), data: t.data().iter().map(|&v| v as f32).collect() })
            .collect();
        Self { arrays }
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Overwrites the controllers of `bank` with the stored arrays.
    pub fn restore(&self, bank: &mut ControllerBank) -> Result<()> {
        for c in [&mut bank.damping, &mut bank.precond] {
            let mut flat = Vec::with_capacity(c.dim());
            for (name, t) in c.named_tensors() {
                let a = self.get(&name).ok_or_else(|| bad(format!("missing array `{name}`")))?;
                if a.shape != t.shape() {
                    return Err(bad(format!("`{name}` has shape {:?}, expected {:?}", a.shape, t.shape())));
                }
                flat.extend(a.data.iter().map(|&v| f64::from(v)));
            }
            c.set_flat(&flat)?;
        }
        Ok(())
    }

    pub fn to_bank(&self) -> Result<ControllerBank> {
        let mut bank = ControllerBank::init(0);
        self.restore(&mut bank)?;
        Ok(bank)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut header = format!("{MAGIC} {VERSION}\nbyte_order little-endian\narrays {}\n", self.arrays.len());
        for a in &self.arrays {
            let shape: Vec<String> = a.shape.iter().map(usize::to_string).collect();
            writeln!(header, "array {} f32 {} {}", a.name, shape.join(","), payload.len()).expect("string write");
            for v in &a.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        writeln!(header, "payload_bytes {}", payload.len()).expect("string write");
        writeln!(header, "crc32 {:08x}", crc32fast::hash(&payload)).expect("string write");
        header.push_str(END);
        let mut out = header.into_bytes();
        out.extend(payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let end = header_len(bytes).ok_or_else(|| bad("header has no end marker"))?;
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8"))?;
        let payload = &bytes[end..];
        let mut lines = header.lines();

        let first = lines.next().unwrap_or_default();
        let version = first
            .strip_prefix(MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| bad(format!("not a checkpoint: `{first}`")))?;
        if version != VERSION {
            return Err(bad(format!("version {version}, this build reads {VERSION}")));
        }
        let mut field = |key: &str| -> Result<String> {
            let line = lines.next().unwrap_or_default();
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected `{key}`, found `{line}`")))
        };
        let order = field("byte_order")?;
        if order != "little-endian" {
            return Err(bad(format!("unsupported byte order `{order}`")));
        }
        let count: usize = field("arrays")?.parse().map_err(|_| bad("bad array count"))?;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let rest = field("array")?;
            let parts: Vec<&str> = rest.split(' ').collect();
            let [name, dtype, shape, offset] = parts[..] else {
                return Err(bad(format!("malformed array line `{rest}`")));
            };
            if dtype != "f32" {
                return Err(bad(format!("`{name}` has dtype `{dtype}`")));
            }
            let shape: Vec<usize> = if shape.is_empty() {
                Vec::new()
            } else {
                shape.split(',').map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad(format!("bad shape for `{name}`")))?
            };
            let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset for `{name}`")))?;
            entries.push((name.to_string(), shape, offset));
        }
        let declared: usize = field("payload_bytes")?.parse().map_err(|_| bad("bad payload size"))?;
        let crc = u32::from_str_radix(&field("crc32")?, 16).map_err(|_| bad("bad checksum field"))?;
        if payload.len() != declared {
            return Err(bad(format!("payload is {} bytes, header declares {declared}", payload.len())));
        }
        if crc32fast::hash(payload) != crc {
            return Err(bad("checksum mismatch"));
        }

        let mut expected = 0;
        let mut arrays = Vec::with_capacity(count);
        for (name, shape, offset) in entries {
            let len = shape.iter().product::<usize>() * 4;
            if offset != expected || offset + len > payload.len() {
                return Err(bad(format!("`{name}` at offset {offset} length {len} is inconsistent with the payload")));
            }
            expected += len;
            let data = payload[offset..offset + len]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            arrays.push(NamedArray { name, shape, data });
        }
        if expected != payload.len() {
            return Err(bad("payload has bytes not covered by any array"));
        }
        Ok(Self { arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| HarnessError::io(path, e))?)
    }

    /// The header block, for display.
    pub fn header(bytes: &[u8]) -> Option<&str> {
        std::str::from_utf8(&bytes[..header_len(bytes)?]).ok()
    }
}

fn header_len(bytes: &[u8]) -> Option<usize> {
    let marker = b"\nend\n";
    bytes.windows(marker.len()).position(|w| w == marker).map(|p| p + marker.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bank_round_trip_is_exact_at_f32() {
        let bank = ControllerBank::init(5);
        let ck = Checkpoint::from_bank(&bank);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let restored = back.to_bank().unwrap();
        for (a, b) in bank.damping.flatten().iter().zip(restored.damping.flatten()) {
            assert_eq!((*a as f32).to_bits(), (b as f32).to_bits());
        }
        assert_eq!(Checkpoint::from_bank(&restored).to_bytes(), ck.to_bytes());
    }

    #[test]
    fn header_is_readable() {
        let bytes = Checkpoint::from_bank(&ControllerBank::init(0)).to_bytes();
        let h = Checkpoint::header(&bytes).unwrap();
        assert!(h.starts_with("mlhf-checkpoint 1\nbyte_order little-endian\n"));
        assert!(h.contains("array damping.fc_weight."));
        assert!(h.ends_with("end\n"));
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = Checkpoint::from_bank(&ControllerBank::init(1)).to_bytes();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(HarnessError::Checkpoint(m)) if m.contains("checksum")));
        let mut short = Checkpoint::from_bank(&ControllerBank::init(1)).to_bytes();
        short.pop();
        assert!(Checkpoint::from_bytes(&short).is_err());
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let bytes = Checkpoint::default().to_bytes();
        let text = String::from_utf8(bytes).unwrap().replacen("checkpoint 1", "checkpoint 2", 1);
        assert!(matches!(Checkpoint::from_bytes(text.as_bytes()), Err(HarnessError::Checkpoint(m)) if m.contains("version")));
    }

    #[test]
    fn empty_state_is_header_only() {
        let bytes = Checkpoint::default().to_bytes();
        let text = std::str::from_utf8(&bytes).unwrap();
        assert!(text.ends_with("payload_bytes 0\ncrc32 00000000\nend\n"));
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), Checkpoint::default());
    }

    #[test]
    fn misplaced_offsets_are_rejected() {
        let ck = Checkpoint {
            arrays: vec![
                NamedArray { name: "a".into(), shape: vec![2], data: vec![1.0, 2.0] },
                NamedArray { name: "b".into(), shape: vec![], data: vec![3.0] },
            ],
        };
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        let text = String::from_utf8_lossy(&bytes).replacen("array b f32  8", "array b f32  4", 1);
        let mut forged = text.as_bytes()[..text.find("end\n").unwrap() + 4].to_vec();
        forged.extend_from_slice(&bytes[bytes.len() - 12..]);
        assert!(Checkpoint::from_bytes(&forged).is_err());
    }
}
