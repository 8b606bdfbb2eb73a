//! Weights file: `MSDW` magic, little-endian `u32` version and tensor count,
//! then per tensor a length-prefixed UTF-8 name, rank, `u64` extents and the
//! `f64` little-endian payload. Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Network;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MSDW";
pub const VERSION: u32 = 1;

pub fn encode_tensors(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("weights file truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(&MAGIC[..]) {
        return Err(Error::format("not a weights file (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported weights version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::format("tensor name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.filter(|&n| n <= bytes.len() / 8).ok_or_else(|| Error::format("tensor too large"))?;
        let data =
            r.take(numel * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::format("trailing bytes after last tensor"));
    }
    Ok(out)
}

/// Parameters in store order, then batch-norm running statistics.
pub fn network_tensors(net: &Network) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> =
        net.store.ids().map(|id| (net.store.name(id).to_string(), net.store.get(id).clone())).collect();
    for (i, (mean, var)) in net.running_stats().into_iter().enumerate() {
        out.push((format!("bn{i}.running_mean"), Tensor::from_parts(vec![mean.len()], mean.to_vec())));
        out.push((format!("bn{i}.running_var"), Tensor::from_parts(vec![var.len()], var.to_vec())));
    }
    out
}

pub fn save_network(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_tensors(&network_tensors(net)))?;
    Ok(())
}

/// Overwrites `net`'s weights; names and shapes must match exactly.
pub fn load_into(net: &mut Network, bytes: &[u8]) -> Result<()> {
    let loaded = decode_tensors(bytes)?;
    let expected = network_tensors(net);
    if loaded.len() != expected.len() {
        return Err(Error::format(format!("weights hold {} tensors, network has {}", loaded.len(), expected.len())));
    }
    for ((name, t), (want, cur)) in loaded.iter().zip(&expected) {
        if name != want || t.shape() != cur.shape() {
            return Err(Error::format(format!(
                "weights tensor {name} {:?} does not fit {want} {:?}",
                t.shape(),
                cur.shape()
            )));
        }
    }
    let ids: Vec<_> = net.store.ids().collect();
    let (params, stats) = loaded.split_at(ids.len());
    for (id, (_, t)) in ids.into_iter().zip(params) {
        *net.store.get_mut(id) = t.clone();
    }
    for ((mean, var), pair) in net.running_stats_mut().into_iter().zip(stats.chunks_exact(2)) {
        *mean = pair[0].1.data().to_vec();
        *var = pair[1].1.data().to_vec();
    }
    Ok(())
}

pub fn load_network(net: &mut Network, path: impl AsRef<Path>) -> Result<()> {
    load_into(net, &fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let weird = vec![f64::MIN_POSITIVE, -0.0, 1.0 / 3.0, 1e300, -5e-324, 0.1];
        let tensors =
            vec![("a".to_string(), Tensor::new(vec![2, 3], weird).unwrap()), ("b.w".to_string(), Tensor::scalar(7.0))];
        let back = decode_tensors(&encode_tensors(&tensors)).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, t1), (n2, t2)) in tensors.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let bytes = encode_tensors(&[("x".to_string(), Tensor::zeros(&[4]))]);
        assert!(matches!(decode_tensors(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(decode_tensors(b"NOPE"), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_tensors(&extra), Err(Error::Format(_))));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(decode_tensors(&v2), Err(Error::Format(_))));
    }

    #[test]
    fn network_round_trip_including_running_stats() {
        let mut a = Network::cnn8(&[3, 8, 8], 4, 2, 0.3, false, 1).unwrap();
        let stats = vec![crate::model::BnStats { layer: 1, mean: vec![0.5; 32], var: vec![2.0; 32] }];
        a.update_running_stats(&stats).unwrap();
        let bytes = encode_tensors(&network_tensors(&a));
        let mut b = Network::cnn8(&[3, 8, 8], 4, 2, 0.3, false, 2).unwrap();
        assert_ne!(a.store, b.store);
        load_into(&mut b, &bytes).unwrap();
        assert_eq!(a.store, b.store);
        assert_eq!(a.running_stats(), b.running_stats());
        let mut wrong = Network::mlp(&[3, 8, 8], 4, 8, 1, 0.3, 1).unwrap();
        assert!(matches!(load_into(&mut wrong, &bytes), Err(Error::Format(_))));
    }
}
