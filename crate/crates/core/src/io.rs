//! File formats: tensor checkpoints, `key = value` configs and PGM images.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! "HDIR" | version: u32 | count: u32
//! per tensor: name_len: u32 | name (UTF-8) | rank: u32 | dims: u64 * rank
//!             | dtype: u8 (0 = f32, 1 = f64) | data
//! crc32 of everything above: u32
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Float, Tensor};

pub const MAGIC: &[u8; 4] = b"HDIR";
pub const VERSION: u32 = 1;

/// Named tensors, in file order.
pub type NamedTensors<T> = Vec<(String, Tensor<T>)>;

pub fn encode_checkpoint<T: Float>(tensors: &[(String, Tensor<T>)]) -> Vec<u8> {
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
        out.push(T::DTYPE.tag());
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(self.path, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decode a checkpoint whose tensors all have dtype `T`. `path` is only used
/// in error messages.
pub fn decode_checkpoint<T: Float>(bytes: &[u8], path: &Path) -> Result<NamedTensors<T>> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::parse(path, "not an HDIR checkpoint"));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Crc {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    let mut r = Reader {
        bytes: body,
        pos: 4,
        path,
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::parse(path, format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::parse(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::parse(path, format!("unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(Error::DTypeMismatch {
                name,
                expected: T::DTYPE,
                found: dtype,
            });
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * dtype.size())?;
        let data = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::parse(path, "trailing bytes after the last tensor"));
    }
    Ok(out)
}

pub fn save_checkpoint<T: Float>(path: &Path, tensors: &[(String, Tensor<T>)]) -> Result<()> {
    fs::write(path, encode_checkpoint(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Float>(path: &Path) -> Result<NamedTensors<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Look a tensor up by name.
pub fn find<'a, T: Float>(tensors: &'a [(String, Tensor<T>)], name: &str) -> Result<&'a Tensor<T>> {
    tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::MissingTensor(name.to_string()))
}

/// Entries whose name starts with `prefix`.
pub fn with_prefix<T: Float>(tensors: &[(String, Tensor<T>)], prefix: &str) -> NamedTensors<T> {
    tensors
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .cloned()
        .collect()
}

/// `key = value` pairs from a config text; `#` starts a comment.
pub fn parse_key_values(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::parse(path, format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Byte for a value in `[-1, 1]`: `round((v + 1) / 2 * 255)`, clamped.
pub fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Binary 8-bit PGM ("P5") from row-major values in `[-1, 1]`.
pub fn encode_pgm(width: usize, height: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::shape("encode_pgm", &[height, width], &[values.len()]));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| to_byte(v)));
    Ok(out)
}

/// `(width, height, values in [-1, 1])` from a binary PGM with maxval 255.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the pixels
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::parse(path, format!("expected P5, found {}", fields[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::parse(path, format!("bad header number {s}")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::parse(path, format!("only maxval 255 is supported, got {maxval}")));
    }
    let pixels = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| Error::parse(path, "truncated pixel data"))?;
    Ok((w, h, pixels.iter().map(|&b| from_byte(b)).collect()))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    fs::write(path, encode_pgm(width, height, values)?).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

/// Square `side x side` images placed left to right.
pub fn tile_horizontally(images: &[Vec<f64>], side: usize) -> (usize, usize, Vec<f64>) {
    let width = side * images.len();
    let mut out = vec![0.0; width * side];
    for (i, img) in images.iter().enumerate() {
        for y in 0..side {
            for x in 0..side {
                out[y * width + i * side + x] = img[y * side + x];
            }
        }
    }
    (width, side, out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn checkpoint_round_trip() {
        let t = vec![
            ("a".to_string(), Tensor::<f32>::from_f64(&[2, 3], &[1., -2., 3.5, 0., 1e-8, -0.0]).unwrap()),
            ("b.c".to_string(), Tensor::<f32>::scalar(f32::MAX)),
            ("empty".to_string(), Tensor::<f32>::zeros(&[0, 4])),
        ];
        let bytes = encode_checkpoint(&t);
        assert_eq!(&bytes[..4], b"HDIR");
        let back = decode_checkpoint::<f32>(&bytes, p()).unwrap();
        assert_eq!(back.len(), 3);
        for ((n1, a), (n2, b)) in t.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(a.shape(), b.shape());
            let bits = |x: &Tensor<f32>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn corruption_and_dtype_are_detected() {
        let t = vec![("w".to_string(), Tensor::<f64>::full(&[3], 0.5))];
        let mut bytes = encode_checkpoint(&t);
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes, p()),
            Err(Error::DTypeMismatch { .. })
        ));
        bytes[20] ^= 1;
        assert!(matches!(decode_checkpoint::<f64>(&bytes, p()), Err(Error::Crc { .. })));
        assert!(matches!(decode_checkpoint::<f64>(b"nope", p()), Err(Error::Parse { .. })));
    }

    proptest! {
        #[test]
        fn any_single_bit_flip_is_caught(byte in 0usize..60, bit in 0u8..8) {
            let t = vec![("w".to_string(), Tensor::<f64>::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap())];
            let mut bytes = encode_checkpoint(&t);
            let i = byte % bytes.len();
            bytes[i] ^= 1 << bit;
            prop_assert!(decode_checkpoint::<f64>(&bytes, p()).is_err());
        }

        #[test]
        fn checkpoint_round_trip_is_bitwise(vals in proptest::collection::vec(any::<f64>(), 0..40)) {
            let n = vals.len();
            let t = vec![("x".to_string(), Tensor::<f64>::new(&[n], vals.clone()).unwrap())];
            let back = decode_checkpoint::<f64>(&encode_checkpoint(&t), p()).unwrap();
            let got: Vec<u64> = back[0].1.data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = vals.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn key_values() {
        let kv = parse_key_values("# header\na = 1\n  b=two # trailing\n\n", p()).unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b".into(), "two".into())]);
        assert!(parse_key_values("novalue\n", p()).is_err());
        assert!(parse_key_values(" = 3\n", p()).is_err());
    }

    #[test]
    fn pgm_mapping_and_round_trip() {
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(5.0), 255);
        assert_eq!(to_byte(-3.0), 0);
        assert_eq!(to_byte(0.0), 128);
        let vals: Vec<f64> = (0..6).map(|i| from_byte(i * 50)).collect();
        let bytes = encode_pgm(3, 2, &vals).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        let (w, h, back) = decode_pgm(&bytes, p()).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(back, vals);
        let commented = b"P5\n# made by hand\n1 1\n255\n\x80";
        assert_eq!(decode_pgm(commented, p()).unwrap().2, vec![from_byte(128)]);
        assert!(decode_pgm(b"P2\n1 1\n255\n0", p()).is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00", p()).is_err());
    }

    #[test]
    fn tiling_places_images_side_by_side() {
        let a = vec![0.0; 4];
        let b = vec![1.0; 4];
        let (w, h, out) = tile_horizontally(&[a, b], 2);
        assert_eq!((w, h), (4, 2));
        assert_eq!(out, vec![0., 0., 1., 1., 0., 0., 1., 1.]);
    }
}
