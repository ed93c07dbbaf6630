//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes  "SKPCKPT\0"
//! major, minor u16, u16 (currently 1, 0)
//! max_side     u32
//! trunk        u32 count, then per layer: cin u32, cout u32, kernel u32, relu u8
//! branches     u32 count, then per branch:
//!                name (u32 length + UTF-8), u32 layer count + layer records,
//!                u32 class count + one u8 global class id each
//! tensors      u32 count, then per tensor:
//!                name, frozen u8, rank u32, dims u32 × rank, data f64 × Π dims
//! optimizer    u8 flag; when 1: base_lr f64, head_lr_multiplier f64,
//!                momentum f64, power f64, max_iter u64, iter u64,
//!                u32 count of (name, u64 length, f64 × length) velocities
//! ```
//!
//! A reader accepts any minor version of its major version and ignores bytes
//! after the last section it understands.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tinynet::{ArchSpec, BranchNet, HeadSpec, LayerSpec, OptimState};

pub const MAGIC: &[u8; 8] = b"SKPCKPT\0";
pub const MAJOR: u16 = 1;
pub const MINOR: u16 = 0;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn layer(&mut self, l: &LayerSpec) {
        self.u32(l.cin);
        self.u32(l.cout);
        self.u32(l.kernel);
        self.u8(u8::from(l.relu));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(Error::TruncatedPayload { expected: self.pos.saturating_add(n), found: self.buf.len() })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Checkpoint(format!("flag byte {v} at offset {}", self.pos - 1))),
        }
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
    fn layer(&mut self) -> Result<LayerSpec> {
        Ok(LayerSpec { cin: self.u32()?, cout: self.u32()?, kernel: self.u32()?, relu: self.bool()? })
    }
}

pub fn encode(net: &BranchNet, opt: Option<&OptimState>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u16(MAJOR);
    w.u16(MINOR);
    w.u32(net.max_side);
    let arch = net.arch();
    w.u32(arch.trunk.len());
    for l in &arch.trunk {
        w.layer(l);
    }
    w.u32(arch.heads.len());
    for h in &arch.heads {
        w.str(&h.name);
        w.u32(h.layers.len());
        for l in &h.layers {
            w.layer(l);
        }
        w.u32(h.classes.len());
        for &c in &h.classes {
            w.u8(c);
        }
    }
    let params = net.params();
    w.u32(params.len());
    for p in params {
        w.str(&p.name);
        w.u8(u8::from(p.frozen));
        w.u32(p.dims.len());
        for &d in &p.dims {
            w.u32(d);
        }
        for &v in &p.data {
            w.f64(v);
        }
    }
    match opt {
        None => w.u8(0),
        Some(o) => {
            w.u8(1);
            w.f64(o.base_lr);
            w.f64(o.head_lr_multiplier);
            w.f64(o.momentum);
            w.f64(o.power);
            w.u64(o.max_iter);
            w.u64(o.iter);
            w.u32(o.velocity.len());
            for (name, v) in &o.velocity {
                w.str(name);
                w.u64(v.len() as u64);
                for &x in v {
                    w.f64(x);
                }
            }
        }
    }
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<(BranchNet, Option<OptimState>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("missing checkpoint magic".into()));
    }
    let major = r.u16()?;
    let _minor = r.u16()?;
    if major != MAJOR {
        return Err(Error::Checkpoint(format!("unsupported major version {major}")));
    }
    let max_side = r.u32()?;
    let mut arch = ArchSpec { trunk: Vec::new(), heads: Vec::new() };
    for _ in 0..r.u32()? {
        arch.trunk.push(r.layer()?);
    }
    for _ in 0..r.u32()? {
        let name = r.str()?;
        let layers = (0..r.u32()?).map(|_| r.layer()).collect::<Result<Vec<_>>>()?;
        let classes = (0..r.u32()?).map(|_| r.u8()).collect::<Result<Vec<_>>>()?;
        arch.heads.push(HeadSpec { name, classes, layers });
    }
    let mut net = BranchNet::init(&arch, 0).map_err(|e| Error::Checkpoint(format!("bad architecture: {e}")))?;
    net.max_side = max_side;
    let expected = net.params().len();
    let count = r.u32()?;
    if count != expected {
        return Err(Error::Checkpoint(format!("{count} tensors for an architecture with {expected}")));
    }
    for _ in 0..count {
        let name = r.str()?;
        let frozen = r.bool()?;
        let dims = (0..r.u32()?).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let p = net.param_mut(&name).ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
        if dims != p.dims {
            return Err(Error::Checkpoint(format!("tensor {name} has dims {dims:?}, expected {:?}", p.dims)));
        }
        p.data = r.f64s(p.data.len())?;
        p.frozen = frozen;
    }
    let opt = if r.bool()? {
        let mut o = OptimState::new(r.f64()?, 0);
        o.head_lr_multiplier = r.f64()?;
        o.momentum = r.f64()?;
        o.power = r.f64()?;
        o.max_iter = r.u64()?;
        o.iter = r.u64()?;
        let mut velocity = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let n = usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("velocity too large".into()))?;
            velocity.insert(name, r.f64s(n)?);
        }
        o.velocity = velocity;
        Some(o)
    } else {
        None
    };
    Ok((net, opt))
}

pub fn save(path: impl AsRef<Path>, net: &BranchNet, opt: Option<&OptimState>) -> Result<()> {
    fs::write(path, encode(net, opt))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(BranchNet, Option<OptimState>)> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinynet::Widths;

    fn net() -> BranchNet {
        let w = Widths { trunk_layers: 2, trunk_channels: 3, head_hidden: 2 };
        let mut n =
            BranchNet::init(&ArchSpec::standard(w, &[("x".into(), vec![0, 2]), ("y".into(), vec![0, 1, 5])]), 4)
                .unwrap();
        n.set_trunk_frozen(true);
        n
    }

    #[test]
    fn round_trip_with_and_without_optimizer() {
        let n = net();
        let (back, opt) = decode(&encode(&n, None)).unwrap();
        assert_eq!(back, n);
        assert!(opt.is_none());
        let mut o = OptimState::new(0.01, 50);
        o.iter = 7;
        o.velocity.insert("head.x.1.bias".into(), vec![0.5, -1.25]);
        let (back, opt) = decode(&encode(&n, Some(&o))).unwrap();
        assert_eq!(back, n);
        assert_eq!(opt.unwrap(), o);
    }

    #[test]
    fn trailing_bytes_and_minor_versions_accepted() {
        let n = net();
        let mut bytes = encode(&n, None);
        bytes[10] = 9;
        bytes.extend_from_slice(b"future section");
        assert_eq!(decode(&bytes).unwrap().0, n);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = encode(&net(), None);
        assert!(matches!(decode(b"nope"), Err(Error::Checkpoint(_))));
        let mut wrong_major = bytes.clone();
        wrong_major[8] = 2;
        assert!(matches!(decode(&wrong_major), Err(Error::Checkpoint(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 5]), Err(Error::TruncatedPayload { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &net(), None).unwrap();
        assert_eq!(load(&p).unwrap().0, net());
    }
}
