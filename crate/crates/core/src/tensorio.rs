//! Raw tensor container: magic `PCQT`, u16 version, u8 rank, rank x u32
//! dims, then a little-endian payload of f32 or f64 values. The element type
//! is implied by the payload length (4 or 8 bytes per element).

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"PCQT";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("bad magic: expected PCQT")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u16),
    #[error("truncated tensor file")]
    Truncated,
    #[error("payload of {got} bytes does not fit {elements} elements of width 4 or 8")]
    BadPayload { elements: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<u32>,
    pub data: TensorData,
}

impl RawTensor {
    pub fn f32(dims: Vec<u32>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<u32>() as usize, data.len());
        Self {
            dims,
            data: TensorData::F32(data),
        }
    }

    pub fn f64(dims: Vec<u32>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<u32>() as usize, data.len());
        Self {
            dims,
            data: TensorData::F64(data),
        }
    }

    pub fn elements(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload_len = match &self.data {
            TensorData::F32(v) => v.len() * 4,
            TensorData::F64(v) => v.len() * 8,
        };
        let mut out = Vec::with_capacity(7 + self.dims.len() * 4 + payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::F64(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorIoError> {
        if bytes.len() < 7 {
            return Err(TensorIoError::Truncated);
        }
        if &bytes[..4] != MAGIC {
            return Err(TensorIoError::BadMagic);
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(TensorIoError::BadVersion(version));
        }
        let rank = bytes[6] as usize;
        let header = 7 + rank * 4;
        if bytes.len() < header {
            return Err(TensorIoError::Truncated);
        }
        let dims: Vec<u32> = (0..rank)
            .map(|i| {
                u32::from_le_bytes(bytes[7 + i * 4..11 + i * 4].try_into().expect("bounds"))
            })
            .collect();
        let elements: usize = dims.iter().map(|&d| d as usize).product();
        let payload = &bytes[header..];
        let data = if payload.len() == elements * 4 {
            TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunk")))
                    .collect(),
            )
        } else if payload.len() == elements * 8 {
            TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk")))
                    .collect(),
            )
        } else {
            return Err(TensorIoError::BadPayload {
                elements,
                got: payload.len(),
            });
        };
        Ok(Self { dims, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_round_trip() {
        let t = RawTensor::f32(vec![2, 3], vec![0.0, 1.5, -2.25, 1e-7, 1e7, 0.1]);
        let back = RawTensor::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn f64_round_trip() {
        let t = RawTensor::f64(vec![4], vec![0.1, -0.2, f64::MIN_POSITIVE, 3.0]);
        let back = RawTensor::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn header_layout_is_fixed() {
        let t = RawTensor::f32(vec![64, 64], vec![0.0; 64 * 64]);
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], b"PCQT");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(bytes[6], 2);
        assert_eq!(bytes.len(), 7 + 8 + 4 * 64 * 64);
    }

    #[test]
    fn rejects_corruption() {
        let t = RawTensor::f32(vec![2], vec![1.0, 2.0]);
        let mut bytes = t.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            RawTensor::from_bytes(&bytes),
            Err(TensorIoError::BadMagic)
        ));
        let mut bytes = t.to_bytes();
        bytes.truncate(9);
        assert!(RawTensor::from_bytes(&bytes).is_err());
        let mut bytes = t.to_bytes();
        bytes.pop();
        assert!(matches!(
            RawTensor::from_bytes(&bytes),
            Err(TensorIoError::BadPayload { .. })
        ));
    }
}
