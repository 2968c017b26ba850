//! Sliding message window: a FIFO of the most recent frames that emits one
//! signed-byte feature vector per arriving message once warm.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canlog::{Label, LabeledFrame, FRAME_BYTES};

/// Depth of the message FIFO used throughout the detectors.
pub const DEFAULT_DEPTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub depth: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { depth: DEFAULT_DEPTH }
    }
}

impl WindowConfig {
    pub fn new(depth: usize) -> Result<Self, WindowError> {
        if depth == 0 {
            return Err(WindowError::ZeroDepth);
        }
        Ok(Self { depth })
    }

    /// Width of the emitted feature vector: 10 bytes per buffered message.
    pub fn feature_width(&self) -> usize {
        self.depth * FRAME_BYTES
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum WindowError {
    #[error("window depth must be at least 1")]
    ZeroDepth,
}

/// One detector input: the packed bytes of `depth` consecutive frames,
/// oldest first, each raw byte mapped to `byte - 128`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowFeature {
    pub values: Vec<i8>,
    pub label: Label,
    pub newest_timestamp: f64,
}

/// Maps an unsigned frame byte onto the symmetric signed input range.
#[inline]
pub fn signed_from_byte(b: u8) -> i8 {
    (b as i16 - 128) as i8
}

/// Inverse of [`signed_from_byte`].
#[inline]
pub fn byte_from_signed(v: i8) -> u8 {
    (v as i16 + 128) as u8
}

/// Message FIFO; single-writer, emits immutable features.
#[derive(Debug, Clone)]
pub struct FrameWindow {
    depth: usize,
    frames: VecDeque<[u8; FRAME_BYTES]>,
}

impl FrameWindow {
    pub fn new(cfg: WindowConfig) -> Self {
        Self { depth: cfg.depth, frames: VecDeque::with_capacity(cfg.depth) }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Appends a frame; returns a feature once the FIFO holds `depth`
    /// frames. The first `depth - 1` pushes are warm-up and yield nothing.
    /// The window label is the newest frame's label.
    pub fn push(&mut self, frame: &LabeledFrame) -> Option<WindowFeature> {
        if self.frames.len() == self.depth {
            self.frames.pop_front();
        }
        self.frames.push_back(frame.encode_bytes());
        if self.frames.len() < self.depth {
            return None;
        }
        let mut values = Vec::with_capacity(self.depth * FRAME_BYTES);
        for packed in &self.frames {
            values.extend(packed.iter().map(|&b| signed_from_byte(b)));
        }
        Some(WindowFeature { values, label: frame.label, newest_timestamp: frame.timestamp })
    }

    pub fn reset(&mut self) {
        self.frames.clear();
    }
}

/// Stride-1 windows over a whole log; equivalent to streaming every frame
/// through [`FrameWindow::push`] and collecting the emitted features.
pub fn windows_of(log: &[LabeledFrame], cfg: WindowConfig) -> Vec<WindowFeature> {
    let mut window = FrameWindow::new(cfg);
    log.iter().filter_map(|frame| window.push(frame)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canlog::LabeledFrame;

    fn frame(ts: f64, id: u16, payload: &[u8], label: Label) -> LabeledFrame {
        LabeledFrame::new(ts, id, payload.to_vec(), label).unwrap()
    }

    #[test]
    fn warmup_pushes_yield_nothing() {
        let mut w = FrameWindow::new(WindowConfig::default());
        for i in 0..3 {
            assert!(w.push(&frame(i as f64, 0x130, &[i as u8], Label::Normal)).is_none());
        }
        assert!(w.push(&frame(3.0, 0x130, &[3], Label::Normal)).is_some());
    }

    #[test]
    fn zero_frames_map_to_minus_128() {
        let mut w = FrameWindow::new(WindowConfig::default());
        let zero = frame(0.0, 0, &[], Label::Normal);
        let mut out = None;
        for _ in 0..4 {
            out = w.push(&zero);
        }
        let feature = out.unwrap();
        assert_eq!(feature.values.len(), 40);
        assert!(feature.values.iter().all(|&v| v == -128));
    }

    #[test]
    fn fifo_drops_oldest_frame() {
        let mut w = FrameWindow::new(WindowConfig::default());
        let frames: Vec<LabeledFrame> =
            (0u8..5).map(|i| frame(i as f64, 0x100 + i as u16, &[i; 8], Label::Normal)).collect();
        let mut feats = Vec::new();
        for f in &frames {
            if let Some(feat) = w.push(f) {
                feats.push(feat);
            }
        }
        assert_eq!(feats.len(), 2);
        // Second feature holds frames B,C,D,E: oldest slice is frame index 1.
        let expect_oldest: Vec<i8> =
            frames[1].encode_bytes().iter().map(|&b| signed_from_byte(b)).collect();
        assert_eq!(&feats[1].values[..10], expect_oldest.as_slice());
    }

    #[test]
    fn window_label_follows_newest_frame() {
        let mut w = FrameWindow::new(WindowConfig::default());
        for i in 0..3 {
            w.push(&frame(i as f64, 0x130, &[0], Label::Normal));
        }
        let feat = w.push(&frame(3.0, 0x000, &[0; 8], Label::Attack)).unwrap();
        assert_eq!(feat.label, Label::Attack);
        assert_eq!(feat.newest_timestamp, 3.0);
    }

    #[test]
    fn windows_of_counts() {
        let log: Vec<LabeledFrame> =
            (0..100).map(|i| frame(i as f64, 0x130, &[i as u8], Label::Normal)).collect();
        assert_eq!(windows_of(&log, WindowConfig::default()).len(), 97);
        assert_eq!(windows_of(&log[..4], WindowConfig::default()).len(), 1);
        assert_eq!(windows_of(&log[..3], WindowConfig::default()).len(), 0);
    }

    #[test]
    fn stream_and_batch_agree() {
        let cfg = crate::canlog::SyntheticConfig::new(crate::canlog::AttackKind::Fuzzy, 2.0, 0.3, 9);
        let log = crate::canlog::generate_synthetic_log(&cfg).unwrap();
        let batch = windows_of(&log, WindowConfig::default());
        let mut window = FrameWindow::new(WindowConfig::default());
        let stream: Vec<WindowFeature> = log.iter().filter_map(|f| window.push(f)).collect();
        assert_eq!(batch, stream);
    }

    #[test]
    fn byte_mapping_round_trips() {
        for b in 0..=255u8 {
            assert_eq!(byte_from_signed(signed_from_byte(b)), b);
        }
    }
}
