use std::io::{BufRead, Write};

use serde::Deserialize;

use crate::error::{Result, SpineError};

/// Dense N-dimensional array of 64-bit floats in row-major order.
///
/// The universal value type of the pipeline: volumes, feature maps, layer
/// weights and gradients are all `Tensor`s. `shape.iter().product() ==
/// data.len()` always holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(SpineError::shape(
                "Tensor::from_vec",
                format!("{n} elements for shape {shape:?}"),
                format!("{}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(SpineError::shape(
                "Tensor::reshaped",
                format!("{} elements", self.data.len()),
                format!("shape {shape:?} ({n} elements)"),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// In-place `self += scale * other`. Shapes must match.
    pub fn axpy(&mut self, scale: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(SpineError::shape(
                "Tensor::axpy",
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
        Ok(())
    }

    /// Crops a [C, D, H, W] tensor spatially: all channels, the box starting
    /// at `origin` with extents `dims`. The box must lie inside the tensor.
    pub fn crop3d(&self, origin: [usize; 3], dims: [usize; 3]) -> Result<Tensor> {
        let s = &self.shape;
        if s.len() != 4 {
            return Err(SpineError::shape("Tensor::crop3d", "[C, D, H, W]", format!("{s:?}")));
        }
        let (c_n, d, h, w) = (s[0], s[1], s[2], s[3]);
        for i in 0..3 {
            if origin[i] + dims[i] > [d, h, w][i] {
                return Err(SpineError::shape(
                    "Tensor::crop3d",
                    format!("box inside [{d}, {h}, {w}]"),
                    format!("origin {origin:?} + dims {dims:?}"),
                ));
            }
        }
        let [cd, ch, cw] = dims;
        let mut out = Tensor::zeros(&[c_n, cd, ch, cw]);
        {
            let odata = out.data_mut();
            let mut oi = 0usize;
            for c in 0..c_n {
                for z in 0..cd {
                    for y in 0..ch {
                        let src = ((c * d + origin[0] + z) * h + origin[1] + y) * w + origin[2];
                        odata[oi..oi + cw].copy_from_slice(&self.data[src..src + cw]);
                        oi += cw;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Serializes as a one-line JSON header `{"shape":[...]}` terminated by a
    /// newline, followed by the raw little-endian f64 payload.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let header = format!("{{\"shape\":{:?}}}\n", self.shape);
        w.write_all(header.as_bytes())?;
        let mut bytes = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)
    }

    /// Reads back the format produced by [`Tensor::write_to`].
    pub fn read_from(r: &mut impl BufRead) -> Result<Tensor> {
        #[derive(Deserialize)]
        struct Header {
            shape: Vec<usize>,
        }
        let mut line = String::new();
        r.read_line(&mut line)
            .map_err(|e| SpineError::io("<tensor header>", e))?;
        let header: Header = serde_json::from_str(line.trim_end())?;
        let n: usize = header.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes).map_err(|e| {
            SpineError::io(format!("<tensor payload, {n} values>"), e)
        })?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::from_vec(&header.shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn serialization_round_trip() {
        let t = Tensor::from_vec(&[2, 1, 3], vec![1.0, -2.5, 0.0, 1e-300, f64::MAX, 42.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        // One-line JSON header terminated by newline.
        let nl = buf.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(&buf[..nl], b"{\"shape\":[2, 1, 3]}");
        let back = Tensor::read_from(&mut &buf[..]).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn read_rejects_truncated_payload() {
        let t = Tensor::filled(&[4], 7.0);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(Tensor::read_from(&mut &buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(data in proptest::collection::vec(-1e12f64..1e12, 1..64)) {
            let t = Tensor::from_vec(&[data.len()], data).unwrap();
            let mut buf = Vec::new();
            t.write_to(&mut buf).unwrap();
            let back = Tensor::read_from(&mut &buf[..]).unwrap();
            prop_assert_eq!(t.data(), back.data());
        }
    }
}
