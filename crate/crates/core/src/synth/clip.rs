//! The universal media unit and its binary container.
//!
//! Container layout: `"EQTV"`, version byte `1`, then `N, H, W, C` as
//! little-endian `u32`, then `N·H·W·C` little-endian `f32` values in
//! frame-major, row-major, channel-last order.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{invalid, Error, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"EQTV";
pub const CONTAINER_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    frame_rate: f64,
    data: Vec<f32>,
}

impl VideoClip {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        frame_rate: f64,
        data: Vec<f32>,
    ) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(invalid(format!(
                "clip dims must be positive, got N={frames} H={height} W={width} C={channels}"
            )));
        }
        if !(frame_rate > 0.0) {
            return Err(invalid(format!("frame rate must be positive, got {frame_rate}")));
        }
        let n = frames * height * width * channels;
        if data.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} values"),
                got: data.len().to_string(),
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            frame_rate,
            data,
        })
    }

    /// Builds a clip, clamping every value into `[0, 1]` (non-finite values
    /// become 0).
    pub fn from_clamped(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        frame_rate: f64,
        mut data: Vec<f32>,
    ) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Self::new(frames, height, width, channels, frame_rate, data)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.frames, self.height, self.width, self.channels)
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    /// Frames `[start, start + len)` as a new clip.
    pub fn segment(&self, start: usize, len: usize) -> Result<VideoClip> {
        if len == 0 || start + len > self.frames {
            return Err(invalid(format!(
                "segment [{start}, {}) outside clip of {} frames",
                start + len,
                self.frames
            )));
        }
        let n = self.frame_len();
        Ok(self.with_data(len, self.data[start * n..(start + len) * n].to_vec()))
    }

    /// Copy with frames `[start, start + segment.frames())` replaced.
    pub fn with_segment(&self, start: usize, segment: &VideoClip) -> Result<VideoClip> {
        if (segment.height, segment.width, segment.channels) != (self.height, self.width, self.channels) {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}x{}", self.height, self.width, self.channels),
                got: format!("{}x{}x{}", segment.height, segment.width, segment.channels),
            });
        }
        if start + segment.frames > self.frames {
            return Err(invalid(format!(
                "segment of {} frames at {start} overruns clip of {} frames",
                segment.frames, self.frames
            )));
        }
        let n = self.frame_len();
        let mut data = self.data.clone();
        data[start * n..(start + segment.frames) * n].copy_from_slice(&segment.data);
        Ok(self.with_data(self.frames, data))
    }

    fn with_data(&self, frames: usize, data: Vec<f32>) -> VideoClip {
        Self {
            frames,
            height: self.height,
            width: self.width,
            channels: self.channels,
            frame_rate: self.frame_rate,
            data,
        }
    }

    /// `(N, H, W, C)` tensor in the requested dtype.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (self.frames, self.height, self.width, self.channels), &Device::Cpu)?
            .to_dtype(dtype)?)
    }

    /// Frames `[start, start+len)` as a `(len, H, W, C)` tensor.
    pub fn frames_tensor(&self, start: usize, len: usize, dtype: DType) -> Result<Tensor> {
        let n = self.frame_len();
        if start + len > self.frames {
            return Err(invalid("frame range outside clip"));
        }
        Ok(Tensor::from_slice(
            &self.data[start * n..(start + len) * n],
            (len, self.height, self.width, self.channels),
            &Device::Cpu,
        )?
        .to_dtype(dtype)?)
    }

    /// Inverse of [`to_tensor`](Self::to_tensor); values are clamped to `[0, 1]`.
    pub fn from_tensor(t: &Tensor, frame_rate: f64) -> Result<VideoClip> {
        let (n, h, w, c) = t.dims4()?;
        let data = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        Self::from_clamped(n, h, w, c, frame_rate, data)
    }

    pub fn to_container_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(21 + 4 * self.data.len());
        out.extend_from_slice(CONTAINER_MAGIC);
        out.push(CONTAINER_VERSION);
        for d in [self.frames, self.height, self.width, self.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_container_bytes(bytes: &[u8], frame_rate: f64) -> Result<VideoClip> {
        if bytes.len() < 21 {
            return Err(Error::Container("truncated header".into()));
        }
        if &bytes[..4] != CONTAINER_MAGIC {
            return Err(Error::Container("bad magic".into()));
        }
        if bytes[4] != CONTAINER_VERSION {
            return Err(Error::Container(format!("unsupported version {}", bytes[4])));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
        let (n, h, w, c) = (dim(0), dim(1), dim(2), dim(3));
        let count = n
            .checked_mul(h)
            .and_then(|x| x.checked_mul(w))
            .and_then(|x| x.checked_mul(c))
            .ok_or_else(|| Error::Container("dimension overflow".into()))?;
        let body = &bytes[21..];
        if body.len() != 4 * count {
            return Err(Error::Container(format!(
                "expected {} payload bytes, found {}",
                4 * count,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::new(n, h, w, c, frame_rate, data)
    }

    pub fn write_container(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_container_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_container(path: &Path, frame_rate: f64) -> Result<VideoClip> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_container_bytes(&bytes, frame_rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(n: usize, h: usize, w: usize) -> VideoClip {
        let len = n * h * w * 3;
        let data = (0..len).map(|i| i as f32 / len as f32).collect();
        VideoClip::new(n, h, w, 3, 30.0, data).unwrap()
    }

    #[test]
    fn container_header_layout() {
        let bytes = ramp(2, 3, 4).to_container_bytes();
        assert_eq!(&bytes[..4], b"EQTV");
        assert_eq!(bytes[4], 1);
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[17..21].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 21 + 4 * 2 * 3 * 4 * 3);
        // second value of the payload is element index 1 of frame 0
        let v1 = f32::from_le_bytes(bytes[25..29].try_into().unwrap());
        assert_eq!(v1, 1.0 / 72.0);
    }

    proptest! {
        #[test]
        fn container_round_trip(n in 1usize..4, h in 1usize..5, w in 1usize..5, seed in 0u32..1000) {
            let len = n * h * w * 3;
            let data: Vec<f32> = (0..len).map(|i| (((i as u32).wrapping_mul(2654435761u32) ^ seed) % 1000) as f32 / 999.0).collect();
            let clip = VideoClip::new(n, h, w, 3, 30.0, data).unwrap();
            let back = VideoClip::from_container_bytes(&clip.to_container_bytes(), 30.0).unwrap();
            prop_assert_eq!(back, clip);
        }
    }

    #[test]
    fn rejects_out_of_range_pixels_and_bad_dims() {
        assert!(VideoClip::new(1, 1, 1, 3, 30.0, vec![0.0, 1.5, 0.0]).is_err());
        assert!(VideoClip::new(0, 1, 1, 3, 30.0, vec![]).is_err());
        assert!(VideoClip::new(1, 1, 1, 3, 30.0, vec![0.0; 2]).is_err());
    }

    #[test]
    fn rejects_corrupt_containers() {
        let mut bytes = ramp(1, 2, 2).to_container_bytes();
        assert!(VideoClip::from_container_bytes(&bytes[..30], 30.0).is_err());
        bytes[4] = 2;
        assert!(VideoClip::from_container_bytes(&bytes, 30.0).is_err());
    }

    #[test]
    fn segment_replacement_is_local() {
        let clip = ramp(5, 2, 2);
        let seg = VideoClip::new(2, 2, 2, 3, 30.0, vec![0.0; 24]).unwrap();
        let out = clip.with_segment(2, &seg).unwrap();
        for t in [0, 1, 4] {
            assert_eq!(out.frame(t), clip.frame(t));
        }
        assert!(out.frame(3).iter().all(|v| *v == 0.0));
        assert!(clip.with_segment(4, &seg).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let clip = ramp(2, 3, 2);
        let t = clip.to_tensor(DType::F32).unwrap();
        assert_eq!(t.dims(), &[2, 3, 2, 3]);
        assert_eq!(VideoClip::from_tensor(&t, 30.0).unwrap(), clip);
    }
}
