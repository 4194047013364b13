//! Dense f32 tensors plus the recording tape that gives them reverse-mode
//! gradients. Feature maps are laid out channel-first `[C, H, W]`, kernels
//! `[Cout, Cin, Kh, Kw]`, vectors `[D]`, scalars `[1]`.

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{
    assert_reports, reference, registry, run_all_checks, run_check, run_checks, CheckCase,
    GradReport, OpCheck, FD_EPS, FD_TOL,
};
pub use kernels::PoolMode;
pub use tape::{BceEntry, BoxRow, CeRow, NodeId, Tape};

use crate::error::{Error, Result};
use std::io::{Read, Write};

/// Dense row-major f32 tensor. `grad`, when present, has the same length as
/// `data` and holds d(loss)/d(self) after a backward pass has been flushed
/// into it. Values without grad buffers are plain shareable data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Option<Vec<f32>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                &shape,
                &[data.len()],
                "tensor shape does not match data length",
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Accumulates `g` into the grad buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) {
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        debug_assert_eq!(grad.len(), g.len());
        for (dst, src) in grad.iter_mut().zip(g) {
            *dst += src;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets an interleaved `[H, W, C]` image as channel-first
    /// `[C, H, W]`, the layout every convolution kernel here expects.
    pub fn hwc_to_chw(&self) -> Result<Tensor> {
        if self.shape.len() != 3 {
            return Err(Error::shape(&self.shape, &[0, 0, 0], "expected an H x W x C image"));
        }
        let (h, w, c) = (self.shape[0], self.shape[1], self.shape[2]);
        let mut out = vec![0.0f32; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[ch * h * w + y * w + x] = self.data[(y * w + x) * c + ch];
                }
            }
        }
        Tensor::new(vec![c, h, w], out)
    }

    /// Writes the tensor in the TNSR container format: ASCII magic "TNSR",
    /// little-endian u32 rank, u32 per dimension, then row-major f32 data.
    pub fn write_tnsr<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(b"TNSR")?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for d in &self.shape {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_tnsr<R: Read>(r: &mut R) -> Result<Tensor> {
        let bad = |msg: &str| Error::Data(format!("tensor container: {msg}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != b"TNSR" {
            return Err(bad("bad magic, expected TNSR"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| bad("truncated rank"))?;
        let rank = u32::from_le_bytes(b4) as usize;
        if rank > 8 {
            return Err(bad("implausible rank"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut b4).map_err(|_| bad("truncated dims"))?;
            shape.push(u32::from_le_bytes(b4) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            r.read_exact(&mut b4).map_err(|_| bad("truncated data"))?;
            data.push(f32::from_le_bytes(b4));
        }
        Tensor::new(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tnsr_roundtrip_is_bit_exact() {
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap();
        let mut buf = Vec::new();
        t.write_tnsr(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TNSR");
        let back = Tensor::read_tnsr(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape, t.shape);
        for (a, b) in back.data.iter().zip(&t.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn tnsr_rejects_bad_magic() {
        let buf = b"XNSR\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x80\x3f".to_vec();
        assert!(Tensor::read_tnsr(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn hwc_to_chw_transposes() {
        // 2x2 image, 3 channels: pixel (y,x) carries value 10*y + x in ch 0.
        let mut data = vec![0.0; 12];
        for y in 0..2 {
            for x in 0..2 {
                data[(y * 2 + x) * 3] = (10 * y + x) as f32;
                data[(y * 2 + x) * 3 + 1] = 100.0;
                data[(y * 2 + x) * 3 + 2] = 200.0;
            }
        }
        let img = Tensor::new(vec![2, 2, 3], data).unwrap();
        let chw = img.hwc_to_chw().unwrap();
        assert_eq!(chw.shape, vec![3, 2, 2]);
        assert_eq!(&chw.data[0..4], &[0.0, 1.0, 10.0, 11.0]);
        assert!(chw.data[4..8].iter().all(|&v| v == 100.0));
    }

    #[test]
    fn shape_data_mismatch_is_an_error() {
        assert!(Tensor::new(vec![2, 2], vec![1.0]).is_err());
    }
}
