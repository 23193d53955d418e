//! Binary tensor container and PPM image output.
//!
//! The container layout is: magic `PLT1`, one dtype byte (1 = f32, 2 = f64,
//! 3 = u8, 4 = u32), one ndim byte, `ndim` little-endian u64 extents, then the
//! elements row-major in little-endian order. Every intermediate artifact of
//! the pipeline that is not text uses this format.

use std::fs;
use std::path::Path;

use ndarray::{ArrayBase, ArrayD, Data, Dimension, IxDyn};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PLT1";

/// Element types storable in a tensor container.
pub trait Element: Copy + 'static {
    /// Dtype byte written to the header.
    const DTYPE: u8;
    /// Size of one element on disk.
    const SIZE: usize;
    fn put_le(self, out: &mut Vec<u8>);
    fn get_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_element {
    ($t:ty, $code:expr) => {
        impl Element for $t {
            const DTYPE: u8 = $code;
            const SIZE: usize = std::mem::size_of::<$t>();
            fn put_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn get_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element size checked"))
            }
        }
    };
}

impl_element!(f32, 1);
impl_element!(f64, 2);
impl_element!(u8, 3);
impl_element!(u32, 4);

fn dtype_name(code: u8) -> Option<&'static str> {
    match code {
        1 => Some("f32"),
        2 => Some("f64"),
        3 => Some("u8"),
        4 => Some("u32"),
        _ => None,
    }
}

/// Serialize a tensor of any dimensionality to the container byte layout.
pub fn tensor_bytes<A, S, D>(tensor: &ArrayBase<S, D>) -> Vec<u8>
where
    A: Element,
    S: Data<Elem = A>,
    D: Dimension,
{
    let shape = tensor.shape();
    let mut out = Vec::with_capacity(4 + 2 + 8 * shape.len() + tensor.len() * A::SIZE);
    out.extend_from_slice(MAGIC);
    out.push(A::DTYPE);
    out.push(shape.len() as u8);
    for &extent in shape {
        out.extend_from_slice(&(extent as u64).to_le_bytes());
    }
    // `iter` walks in logical row-major order regardless of memory layout.
    for &value in tensor.iter() {
        value.put_le(&mut out);
    }
    out
}

/// Write a tensor to `path` in the container format.
pub fn write_tensor<A, S, D>(path: &Path, tensor: &ArrayBase<S, D>) -> Result<()>
where
    A: Element,
    S: Data<Elem = A>,
    D: Dimension,
{
    fs::write(path, tensor_bytes(tensor))?;
    Ok(())
}

/// Parse a tensor of element type `A` from container bytes.
pub fn tensor_from_bytes<A: Element>(bytes: &[u8]) -> Result<ArrayD<A>> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(Error::format("bad magic"));
    }
    let dtype = bytes[4];
    let Some(name) = dtype_name(dtype) else {
        return Err(Error::format(format!("unknown dtype code {dtype}")));
    };
    if dtype != A::DTYPE {
        return Err(Error::format(format!(
            "dtype mismatch: container holds {name}"
        )));
    }
    let ndim = bytes[5] as usize;
    let header = 6 + 8 * ndim;
    if bytes.len() < header {
        return Err(Error::format("payload size mismatch: truncated shape"));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let start = 6 + 8 * i;
        let extent = u64::from_le_bytes(bytes[start..start + 8].try_into().unwrap());
        shape.push(usize::try_from(extent).map_err(|_| Error::format("extent overflows"))?);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::format("shape product overflows"))?;
    let expected = count
        .checked_mul(A::SIZE)
        .ok_or_else(|| Error::format("shape product overflows"))?;
    if bytes.len() - header != expected {
        return Err(Error::format(format!(
            "payload size mismatch: expected {expected} bytes, found {}",
            bytes.len() - header
        )));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let start = header + i * A::SIZE;
        data.push(A::get_le(&bytes[start..start + A::SIZE]));
    }
    ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| Error::format(format!("shape rejected: {e}")))
}

/// Read a tensor of element type `A` from a container file.
pub fn read_tensor<A: Element>(path: &Path) -> Result<ArrayD<A>> {
    let bytes = fs::read(path)?;
    tensor_from_bytes(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Encode an `[H, W, 3]` RGB image as binary PPM (`P6`).
pub fn image_rgb_bytes<S>(image: &ArrayBase<S, ndarray::Ix3>) -> Result<Vec<u8>>
where
    S: Data<Elem = u8>,
{
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::invalid(format!(
            "rgb image needs 3 channels, got {c}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("rgb image has a zero extent"));
    }
    let mut out = Vec::with_capacity(16 + h * w * 3);
    out.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    for &value in image.iter() {
        out.push(value);
    }
    Ok(out)
}

/// Write an `[H, W, 3]` RGB image to `path` as binary PPM.
pub fn write_image_rgb<S>(path: &Path, image: &ArrayBase<S, ndarray::Ix3>) -> Result<()>
where
    S: Data<Elem = u8>,
{
    fs::write(path, image_rgb_bytes(image)?)?;
    Ok(())
}
