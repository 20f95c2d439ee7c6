//! Minimal NPY (v1.0) serialization for the array files this crate emits:
//! float32 slices, uint8 masks, float32/float64 checkpoint blobs.
//!
//! Little-endian, C-order only. The format is the portable container used by
//! every array-on-disk interface in the pipeline.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 6] = b"\x93NUMPY";

/// Element types that can live in an NPY file.
pub trait NpyElement: Copy + Default {
    const DESCR: &'static str;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    fn width() -> usize;
}

impl NpyElement for f32 {
    const DESCR: &'static str = "<f4";
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().unwrap())
    }
    fn width() -> usize {
        4
    }
}

impl NpyElement for f64 {
    const DESCR: &'static str = "<f8";
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().unwrap())
    }
    fn width() -> usize {
        8
    }
}

impl NpyElement for u8 {
    const DESCR: &'static str = "|u1";
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
    fn width() -> usize {
        1
    }
}

fn header_string(descr: &str, shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    let tuple = match shape.len() {
        0 => "()".to_string(),
        1 => format!("({},)", dims[0]),
        _ => format!("({})", dims.join(", ")),
    };
    format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {tuple}, }}")
}

/// Serialize an array to NPY bytes.
pub fn to_bytes<T: NpyElement>(arr: &ArrayD<T>) -> Vec<u8> {
    let mut header = header_string(T::DESCR, arr.shape());
    // pad so data starts on a 64-byte boundary, newline-terminated
    let unpadded = MAGIC.len() + 2 + 2 + header.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    header.push_str(&" ".repeat(pad));
    header.push('\n');

    let mut out = Vec::with_capacity(unpadded + pad + arr.len() * T::width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[0x01, 0x00]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for &v in arr.iter() {
        v.write_le(&mut out);
    }
    out
}

fn parse_header(bytes: &[u8]) -> Result<(String, Vec<usize>, usize)> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::Data("not an NPY file".into()));
    }
    if bytes[6] != 1 {
        return Err(Error::Data(format!("unsupported NPY version {}", bytes[6])));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    if bytes.len() < 10 + hlen {
        return Err(Error::Data("NPY header truncated".into()));
    }
    let header = std::str::from_utf8(&bytes[10..10 + hlen])
        .map_err(|_| Error::Data("NPY header not utf-8".into()))?;

    let grab = |key: &str| -> Result<&str> {
        let pat = format!("'{key}':");
        let at = header
            .find(&pat)
            .ok_or_else(|| Error::Data(format!("NPY header missing {key}")))?;
        Ok(header[at + pat.len()..].trim_start())
    };

    let descr = grab("descr")?
        .trim_start_matches('\'')
        .split('\'')
        .next()
        .unwrap_or("")
        .to_string();

    if grab("fortran_order")?.starts_with("True") {
        return Err(Error::Data("fortran-order NPY not supported".into()));
    }

    let shape_rest = grab("shape")?;
    let open = shape_rest
        .find('(')
        .ok_or_else(|| Error::Data("NPY shape malformed".into()))?;
    let close = shape_rest
        .find(')')
        .ok_or_else(|| Error::Data("NPY shape malformed".into()))?;
    let shape: Vec<usize> = shape_rest[open + 1..close]
        .split(',')
        .filter_map(|s| {
            let s = s.trim();
            if s.is_empty() {
                None
            } else {
                Some(s.parse::<usize>())
            }
        })
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Data("NPY shape malformed".into()))?;

    Ok((descr, shape, 10 + hlen))
}

/// Deserialize NPY bytes into an array of exactly `T`.
pub fn from_bytes<T: NpyElement>(bytes: &[u8]) -> Result<ArrayD<T>> {
    let (descr, shape, offset) = parse_header(bytes)?;
    if descr != T::DESCR {
        return Err(Error::Data(format!(
            "NPY dtype {descr} where {} expected",
            T::DESCR
        )));
    }
    read_payload::<T>(&bytes[offset..], &shape)
}

/// Deserialize NPY bytes holding `<f4` or `<f8` data into any scalar type.
pub fn from_bytes_scalar<F: Scalar>(bytes: &[u8]) -> Result<ArrayD<F>> {
    let (descr, shape, offset) = parse_header(bytes)?;
    match descr.as_str() {
        "<f4" => Ok(read_payload::<f32>(&bytes[offset..], &shape)?.mapv(F::cast)),
        "<f8" => Ok(read_payload::<f64>(&bytes[offset..], &shape)?.mapv(F::cast)),
        other => Err(Error::Data(format!("NPY dtype {other} is not a float"))),
    }
}

fn read_payload<T: NpyElement>(data: &[u8], shape: &[usize]) -> Result<ArrayD<T>> {
    let n: usize = shape.iter().product();
    let w = T::width();
    if data.len() < n * w {
        return Err(Error::Data(format!(
            "NPY payload truncated: {} bytes for {} elements",
            data.len(),
            n
        )));
    }
    let values: Vec<T> = (0..n).map(|i| T::read_le(&data[i * w..i * w + w])).collect();
    ArrayD::from_shape_vec(IxDyn(shape), values)
        .map_err(|e| Error::Data(format!("NPY shape mismatch: {e}")))
}

pub fn write_npy<T: NpyElement>(path: &Path, arr: &ArrayD<T>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&to_bytes(arr))?;
    Ok(())
}

pub fn read_npy<T: NpyElement>(path: &Path) -> Result<ArrayD<T>> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_f32_and_u8() {
        let a = ArrayD::from_shape_vec(
            IxDyn(&[2, 3]),
            vec![1.0f32, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 1e9],
        )
        .unwrap();
        let back: ArrayD<f32> = from_bytes(&to_bytes(&a)).unwrap();
        assert!(a
            .iter()
            .zip(back.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));

        let m = ArrayD::from_shape_vec(IxDyn(&[4]), vec![0u8, 1, 2, 255]).unwrap();
        let back: ArrayD<u8> = from_bytes(&to_bytes(&m)).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn scalar_cast_reads_both_widths() {
        let a = ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.5f64, -2.0, 0.25]).unwrap();
        let as32: ArrayD<f32> = from_bytes_scalar(&to_bytes(&a)).unwrap();
        assert_eq!(as32.as_slice().unwrap(), &[1.5f32, -2.0, 0.25]);
        let b = ArrayD::from_shape_vec(IxDyn(&[1]), vec![7.0f32]).unwrap();
        let as64: ArrayD<f64> = from_bytes_scalar(&to_bytes(&b)).unwrap();
        assert_eq!(as64[[0]], 7.0f64);
    }

    #[test]
    fn zero_dim_roundtrip() {
        let a = ArrayD::from_elem(IxDyn(&[]), 42.0f64);
        let back: ArrayD<f64> = from_bytes(&to_bytes(&a)).unwrap();
        assert_eq!(back[[]], 42.0);
    }

    #[test]
    fn wrong_dtype_rejected() {
        let a = ArrayD::from_elem(IxDyn(&[2]), 1.0f32);
        let err = from_bytes::<u8>(&to_bytes(&a)).unwrap_err();
        assert!(err.to_string().contains("dtype"));
    }
}
