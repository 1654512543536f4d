//! "wsck v1" binary checkpoints.
//!
//! All integers and reals are little-endian.
//!
//! ```text
//! header : b"WSCK" | u32 version | u64 spec_hash | u64 json_len | spec JSON
//! body   : u64 record_count, then records in forward layer order
//! conv   : u8 0 | name | u32 K | u32 n_in | u32 n_out | f64[numel] W
//!          | u8[ceil(numel/8)] mask (LSB first) | u8 has_init [f64[numel]]
//!          | u8 has_bias [f64[n_out]]
//! norm   : u8 1 | name | u32 C | f64[C] gamma, beta, running_mean,
//!          running_var | f64 eps | f64 momentum
//! name   : u32 byte_len | UTF-8
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::conv::SparseConv;
use crate::layers::network::{build_network, LayerMut, LayerRef, Network, NetworkSpec};
use crate::layers::norm::BatchNorm;

pub const MAGIC: &[u8; 4] = b"WSCK";
pub const VERSION: u32 = 1;

const KIND_CONV: u8 = 0;
const KIND_NORM: u8 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    out.reserve(v.len() * 8);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
}

fn pack_bits(mask: &[bool]) -> Vec<u8> {
    let mut bytes = vec![0u8; mask.len().div_ceil(8)];
    for (i, &m) in mask.iter().enumerate() {
        if m {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    bytes
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

fn conv_record(out: &mut Vec<u8>, conv: &SparseConv) {
    let w = &conv.weights;
    out.push(KIND_CONV);
    put_name(out, &conv.name);
    put_u32(out, w.kernel_size() as u32);
    put_u32(out, w.n_in() as u32);
    put_u32(out, w.n_out() as u32);
    put_f64s(out, w.values());
    out.extend_from_slice(&pack_bits(w.mask()));
    match w.w_init() {
        Some(init) => {
            out.push(1);
            put_f64s(out, init);
        }
        None => out.push(0),
    }
    match &conv.bias {
        Some(b) => {
            out.push(1);
            put_f64s(out, &b.value);
        }
        None => out.push(0),
    }
}

fn norm_record(out: &mut Vec<u8>, bn: &BatchNorm) {
    out.push(KIND_NORM);
    put_name(out, &bn.name);
    put_u32(out, bn.channels() as u32);
    put_f64s(out, &bn.gamma.value);
    put_f64s(out, &bn.beta.value);
    put_f64s(out, &bn.running_mean);
    put_f64s(out, &bn.running_var);
    put_f64s(out, &[bn.eps, bn.momentum]);
}

/// Serializes `net` to the in-memory wsck v1 encoding.
pub fn checkpoint_bytes(net: &Network) -> Vec<u8> {
    let json = serde_json::to_vec(net.spec()).expect("spec serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u64(&mut out, net.spec().hash());
    put_u64(&mut out, json.len() as u64);
    out.extend_from_slice(&json);
    let mut body = Vec::new();
    let mut count = 0u64;
    net.visit(&mut |l| {
        count += 1;
        match l {
            LayerRef::Conv { conv, .. } => conv_record(&mut body, conv),
            LayerRef::Norm(bn) => norm_record(&mut body, bn),
        }
    });
    put_u64(&mut out, count);
    out.extend_from_slice(&body);
    out
}

pub fn write_checkpoint<W: Write>(net: &Network, mut w: W) -> Result<()> {
    w.write_all(&checkpoint_bytes(net))?;
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    write_checkpoint(net, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    record: String,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Checkpoint {
            record: self.record.clone(),
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!("truncated: needed {n} bytes at offset {}", self.pos))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, n: u64) -> Result<usize> {
        usize::try_from(n).map_err(|_| self.err("length overflow"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.err("layer name is not UTF-8"))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.err(format!("invalid flag byte {v}"))),
        }
    }
}

fn read_conv(c: &mut Cursor<'_>, conv: &mut SparseConv) -> Result<()> {
    let (k, n_in, n_out) = (c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
    let w = &conv.weights;
    if (k, n_in, n_out) != (w.kernel_size(), w.n_in(), w.n_out()) {
        return Err(c.err(format!(
            "shape (K={k}, in={n_in}, out={n_out}) does not match network (K={}, in={}, out={})",
            w.kernel_size(),
            w.n_in(),
            w.n_out()
        )));
    }
    let numel = w.numel();
    let values = c.f64s(numel)?;
    let mask = unpack_bits(c.take(numel.div_ceil(8))?, numel);
    let init = if c.flag()? { Some(c.f64s(numel)?) } else { None };
    let bias = if c.flag()? { Some(c.f64s(n_out)?) } else { None };
    if values.iter().zip(&mask).any(|(v, m)| !m && *v != 0.0) {
        return Err(c.err("masked-out weight is nonzero"));
    }
    if bias.is_some() != conv.bias.is_some() {
        return Err(c.err("bias presence does not match network"));
    }
    conv.weights.values_mut().copy_from_slice(&values);
    conv.weights.set_mask(mask)?;
    conv.weights.set_w_init(init)?;
    if let (Some(b), Some(v)) = (&mut conv.bias, bias) {
        b.value = v;
    }
    Ok(())
}

fn read_norm(c: &mut Cursor<'_>, bn: &mut BatchNorm) -> Result<()> {
    let ch = c.u32()? as usize;
    if ch != bn.channels() {
        return Err(c.err(format!("{ch} channels, network expects {}", bn.channels())));
    }
    bn.gamma.value = c.f64s(ch)?;
    bn.beta.value = c.f64s(ch)?;
    bn.running_mean = c.f64s(ch)?;
    bn.running_var = c.f64s(ch)?;
    let tail = c.f64s(2)?;
    bn.eps = tail[0];
    bn.momentum = tail[1];
    if bn.running_var.iter().any(|&v| v < 0.0) {
        return Err(c.err("negative running variance"));
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Network> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    parse_checkpoint(&buf)
}

pub fn parse_checkpoint(buf: &[u8]) -> Result<Network> {
    let mut c = Cursor {
        buf,
        pos: 0,
        record: "header".into(),
    };
    if c.take(4)? != MAGIC {
        return Err(c.err("bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(c.err(format!("unsupported version {version}")));
    }
    let hash = c.u64()?;
    let json_len = c.u64()?;
    let json_len = c.len(json_len)?;
    let json = c.take(json_len)?;
    let spec: NetworkSpec =
        serde_json::from_slice(json).map_err(|e| c.err(format!("spec JSON: {e}")))?;
    if spec.hash() != hash {
        return Err(c.err("spec hash does not match spec JSON"));
    }
    let mut net = build_network(&spec).map_err(|e| c.err(e.to_string()))?;
    let count = c.u64()?;
    let mut seen = 0u64;
    let mut res = Ok(());
    net.visit_mut(&mut |l| {
        if res.is_err() {
            return;
        }
        seen += 1;
        res = (|| {
            if seen > count {
                return Err(c.err("fewer records than network layers"));
            }
            let kind = c.u8()?;
            let name = c.name()?;
            c.record = name.clone();
            match (kind, l) {
                (KIND_CONV, LayerMut::Conv { conv, .. }) if conv.name == name => read_conv(&mut c, conv),
                (KIND_NORM, LayerMut::Norm(bn)) if bn.name == name => read_norm(&mut c, bn),
                (_, LayerMut::Conv { conv, .. }) => Err(c.err(format!("expected conv record {:?}", conv.name))),
                (_, LayerMut::Norm(bn)) => Err(c.err(format!("expected norm record {:?}", bn.name))),
            }
        })();
    });
    res?;
    c.record = "trailer".into();
    if seen != count {
        return Err(c.err(format!("{count} records, network has {seen} layers")));
    }
    if c.pos != buf.len() {
        return Err(c.err(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::network::{Preset, LayerMut};

    fn tiny() -> Network {
        let spec = NetworkSpec::preset(Preset::Res16UNet14A)
            .with_width(1.0 / 16.0)
            .with_io(2, 3)
            .with_offset_head(true);
        build_network(&spec).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut net = tiny();
        net.capture_init();
        net.visit_mut(&mut |l| match l {
            LayerMut::Conv { conv, .. } => {
                let n = conv.weights.numel();
                conv.weights.set_mask((0..n).map(|i| i % 3 != 0).collect()).unwrap();
            }
            LayerMut::Norm(bn) => {
                bn.running_mean.iter_mut().for_each(|v| *v = 0.1f64.sqrt());
            }
        });
        let bytes = checkpoint_bytes(&net);
        let back = parse_checkpoint(&bytes).unwrap();
        assert_eq!(checkpoint_bytes(&back), bytes);
        assert_eq!(back.param_count(), net.param_count());
        assert!(back.conv("conv0").unwrap().weights.w_init().is_some());
    }

    #[test]
    fn corrupt_inputs_name_the_record() {
        let bytes = checkpoint_bytes(&tiny());
        assert!(matches!(parse_checkpoint(b"NOPE"), Err(Error::Checkpoint { .. })));
        let truncated = &bytes[..bytes.len() - 5];
        match parse_checkpoint(truncated) {
            Err(Error::Checkpoint { record, .. }) => assert_eq!(record, "offset.1"),
            other => panic!("unexpected {other:?}"),
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(parse_checkpoint(&extra).is_err());
        let mut bad_hash = bytes;
        bad_hash[8] ^= 1;
        assert!(parse_checkpoint(&bad_hash).is_err());
    }

    #[test]
    fn bit_packing_round_trip() {
        let m: Vec<bool> = (0..19).map(|i| i % 5 == 1 || i == 18).collect();
        assert_eq!(unpack_bits(&pack_bits(&m), m.len()), m);
        assert_eq!(pack_bits(&m).len(), 3);
    }
}
