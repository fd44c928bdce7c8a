//! GRD1 binary container for [`FieldSequence`].
//!
//! Layout (little-endian): magic `GRD1`, u32 version = 1, u32 T, C, n_lat, n_lon,
//! dtype code (0 = f32, 1 = f64), f64 d_lat, d_lon, dt, u32 name-block length,
//! UTF-8 channel names joined by `\n`, then the row-major payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::field::{FieldSequence, GridMeta};
use super::tensor::{Dtype, Tensor};
use crate::error::{Error, Result};

pub const GRD1_MAGIC: &[u8; 4] = b"GRD1";
pub const GRD1_VERSION: u32 = 1;

pub fn encode_grd1(seq: &FieldSequence, dtype: Dtype) -> Vec<u8> {
    let s = seq.data().shape();
    let names = seq.meta.channel_names.join("\n");
    let mut out = Vec::with_capacity(64 + names.len() + seq.data().len() * dtype.size());
    out.extend_from_slice(GRD1_MAGIC);
    out.extend_from_slice(&GRD1_VERSION.to_le_bytes());
    for &e in s {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out.extend_from_slice(&dtype.code().to_le_bytes());
    for v in [seq.meta.d_lat, seq.meta.d_lon, seq.meta.dt] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(names.len() as u32).to_le_bytes());
    out.extend_from_slice(names.as_bytes());
    match dtype {
        Dtype::F32 => {
            for &v in seq.data().data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in seq.data().data() {
                out.extend_from_slice(&(v as f64).to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Decodes a GRD1 buffer. f64 payloads are narrowed to the in-memory f32 representation.
pub fn decode_grd1(buf: &[u8]) -> Result<FieldSequence> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != GRD1_MAGIC {
        return Err(Error::format(
            0,
            format!("bad magic {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    let version = r.u32("version")?;
    if version != GRD1_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let mut ext = [0usize; 4];
    for (e, name) in ext.iter_mut().zip(["T", "C", "n_lat", "n_lon"]) {
        *e = r.u32(name)? as usize;
    }
    let code_at = r.pos as u64;
    let code = r.u32("dtype")?;
    let dtype = Dtype::from_code(code)
        .ok_or_else(|| Error::format(code_at, format!("unknown dtype code {code}")))?;
    let d_lat = r.f64("d_lat")?;
    let d_lon = r.f64("d_lon")?;
    let dt = r.f64("dt")?;
    let name_len = r.u32("name-block length")? as usize;
    let names_at = r.pos as u64;
    let names = std::str::from_utf8(r.take(name_len, "channel names")?)
        .map_err(|e| Error::format(names_at, format!("channel names not UTF-8: {e}")))?;
    let channel_names: Vec<String> = if names.is_empty() {
        Vec::new()
    } else {
        names.split('\n').map(str::to_string).collect()
    };
    if channel_names.len() != ext[1] {
        return Err(Error::format(
            names_at,
            format!(
                "{} channel names for C = {}",
                channel_names.len(),
                ext[1]
            ),
        ));
    }
    let count = ext.iter().product::<usize>();
    let payload_at = r.pos as u64;
    let expected = count * dtype.size();
    let remaining = buf.len() - r.pos;
    if remaining != expected {
        return Err(Error::format(
            payload_at,
            format!(
                "payload holds {remaining} bytes but extents {:?} need {expected}",
                ext
            ),
        ));
    }
    let payload = r.take(expected, "payload")?;
    let data: Vec<f32> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32)
            .collect(),
    };
    let meta = GridMeta {
        n_lat: ext[2],
        n_lon: ext[3],
        d_lat,
        d_lon,
        dt,
        channel_names,
    };
    meta.validate()
        .map_err(|e| Error::format(8, format!("invalid grid header: {e}")))?;
    FieldSequence::new(meta, Tensor::new(&ext, data)?)
}

pub fn write_grd1(seq: &FieldSequence, path: impl AsRef<Path>) -> Result<()> {
    write_grd1_as(seq, path, Dtype::F32)
}

pub fn write_grd1_as(seq: &FieldSequence, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_grd1(seq, dtype);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_grd1(path: impl AsRef<Path>) -> Result<FieldSequence> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grd1(&buf)
}

/// Writes the informative `<path>.meta.json` sidecar.
pub fn write_sidecar(path: impl AsRef<Path>, info: &serde_json::Value) -> Result<()> {
    let mut p = path.as_ref().as_os_str().to_owned();
    p.push(".meta.json");
    let text = serde_json::to_string_pretty(info).expect("json value serializes");
    fs::write(&p, text).map_err(|e| Error::io(p, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_seq(t: usize, c: usize, h: usize, w: usize, seed: u64) -> FieldSequence {
        let names: Vec<String> = (0..c).map(|i| format!("ch{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let meta = GridMeta::new(h, w, &refs)
            .unwrap()
            .with_spacing(0.25, 0.5, 3.0)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Tensor::from_fn(&[t, c, h, w], |_| rng.random::<f32>() * 4.0 - 2.0);
        FieldSequence::new(meta, data).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let seq = random_seq(3, 3, 8, 8, 7);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.grd");
        write_grd1(&seq, &p).unwrap();
        let back = read_grd1(&p).unwrap();
        assert_eq!(back, seq);
        let p2 = dir.path().join("y.grd");
        write_grd1(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn zeros_file_layout() {
        let meta = GridMeta::new(4, 4, &["u"]).unwrap();
        let seq = FieldSequence::new(meta, Tensor::zeros(&[1, 1, 4, 4])).unwrap();
        let bytes = encode_grd1(&seq, Dtype::F32);
        let header = 4 + 4 + 5 * 4 + 3 * 8 + 4 + 1;
        assert_eq!(bytes.len(), header + 64);
        assert!(bytes[header..].iter().all(|&b| b == 0));
        assert_eq!(&bytes[..4], b"GRD1");
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let seq = random_seq(1, 2, 4, 4, 1);
        let mut bytes = encode_grd1(&seq, Dtype::F32);
        bytes[3] = b'9';
        assert!(matches!(
            decode_grd1(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));

        let bytes = encode_grd1(&seq, Dtype::F32);
        let truncated = &bytes[..bytes.len() - 3];
        match decode_grd1(truncated) {
            Err(Error::Format { offset, .. }) => assert!(offset > 40),
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(decode_grd1(&bytes[..10]).is_err());
    }

    #[test]
    fn f64_payload_is_read() {
        let seq = random_seq(2, 1, 4, 4, 3);
        let bytes = encode_grd1(&seq, Dtype::F64);
        assert_eq!(decode_grd1(&bytes).unwrap(), seq);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn roundtrip_any_shape(t in 1usize..4, c in 1usize..4, h in 4usize..10, w in 4usize..10, seed in any::<u64>()) {
            let seq = random_seq(t, c, h, w, seed);
            let back = decode_grd1(&encode_grd1(&seq, Dtype::F32)).unwrap();
            prop_assert_eq!(back, seq);
        }
    }
}
