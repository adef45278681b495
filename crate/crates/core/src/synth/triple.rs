//! Random-indicator sampling and triple-set assembly.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::annotation::EventAnnotation;
use super::clip::VideoClip;
use super::prompts::{Polarity, TextPrompt};
use crate::error::{invalid, Error, Result};

/// Length of a generated (grafted) segment.
pub const GENERATION_LEN: usize = 22;

/// Inclusive frame range the random indicator is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndicatorRange {
    pub lo: usize,
    pub hi: usize,
}

impl IndicatorRange {
    pub const PAPER: IndicatorRange = IndicatorRange { lo: 110, hi: 128 };
    pub const TOY: IndicatorRange = IndicatorRange { lo: 30, hi: 38 };

    pub fn new(lo: usize, hi: usize) -> Result<Self> {
        if lo > hi {
            return Err(invalid(format!("empty indicator range [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }
}

/// Draws the pseudo accident start uniformly from `range`; the generated
/// window `[index, index + window - 1]` always fits in the clip.
pub fn sample_random_indicator<R: Rng>(
    clip_len: usize,
    range: IndicatorRange,
    window: usize,
    rng: &mut R,
) -> Result<usize> {
    if range.lo > range.hi {
        return Err(invalid(format!("empty indicator range [{}, {}]", range.lo, range.hi)));
    }
    if range.hi + window > clip_len {
        return Err(invalid(format!(
            "clip of {clip_len} frames cannot hold a {window}-frame window starting at {}",
            range.hi
        )));
    }
    Ok(rng.random_range(range.lo..=range.hi))
}

/// Anchor clip plus its pseudo-accident and pseudo-normal variants, which
/// share the anchor outside the generated window.
#[derive(Debug, Clone)]
pub struct TripleSet {
    pub anchor: Arc<VideoClip>,
    pos_segment: VideoClip,
    neg_segment: VideoClip,
    /// Pseudo event annotation of the positive clip.
    pub annotation: EventAnnotation,
    pub prompts: (TextPrompt, TextPrompt),
}

impl TripleSet {
    pub fn t_ai(&self) -> usize {
        self.annotation.t_ai.expect("triple annotation is positive")
    }

    pub fn t_co(&self) -> usize {
        self.annotation.t_co.expect("triple annotation is positive")
    }

    pub fn window(&self) -> usize {
        self.pos_segment.frames()
    }

    /// The pseudo-accident clip (label 1).
    pub fn pos(&self) -> VideoClip {
        self.anchor
            .with_segment(self.t_ai(), &self.pos_segment)
            .expect("validated at construction")
    }

    /// The pseudo-normal clip (label 0).
    pub fn neg(&self) -> VideoClip {
        self.anchor
            .with_segment(self.t_ai(), &self.neg_segment)
            .expect("validated at construction")
    }

    pub fn pos_segment(&self) -> &VideoClip {
        &self.pos_segment
    }

    pub fn neg_segment(&self) -> &VideoClip {
        &self.neg_segment
    }

    pub fn anchor_annotation(&self) -> EventAnnotation {
        EventAnnotation::normal(None, self.annotation.rng_seed)
    }

    pub fn neg_annotation(&self) -> EventAnnotation {
        EventAnnotation::normal(Some(self.prompts.1.id), self.annotation.rng_seed)
    }

    /// Frames outside the generated window of `pos` and `neg` equal the
    /// anchor's bit for bit.
    pub fn grafting_is_local(&self) -> bool {
        let (a, w) = (self.t_ai(), self.window());
        let (pos, neg) = (self.pos(), self.neg());
        (0..self.anchor.frames())
            .filter(|t| *t < a || *t >= a + w)
            .all(|t| {
                let f = self.anchor.frame(t);
                bits_equal(pos.frame(t), f) && bits_equal(neg.frame(t), f)
            })
    }
}

fn bits_equal(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Grafts `pos_gen` / `neg_gen` into the anchor at `t_ai`. The pseudo
/// collision frame is the last generated frame.
pub fn build_triple_set(
    anchor: Arc<VideoClip>,
    t_ai: usize,
    pos_gen: VideoClip,
    neg_gen: VideoClip,
    prompts: (TextPrompt, TextPrompt),
    seed: u64,
) -> Result<TripleSet> {
    let window = pos_gen.frames();
    if neg_gen.frames() != window {
        return Err(Error::ShapeMismatch {
            expected: format!("{window}-frame negative segment"),
            got: neg_gen.frames().to_string(),
        });
    }
    let (_, h, w, c) = anchor.dims();
    for seg in [&pos_gen, &neg_gen] {
        if (seg.height(), seg.width(), seg.channels()) != (h, w, c) {
            return Err(Error::ShapeMismatch {
                expected: format!("{h}x{w}x{c}"),
                got: format!("{}x{}x{}", seg.height(), seg.width(), seg.channels()),
            });
        }
    }
    if t_ai + window > anchor.frames() {
        return Err(invalid(format!(
            "window [{t_ai}, {}] overruns anchor of {} frames",
            t_ai + window - 1,
            anchor.frames()
        )));
    }
    if prompts.0.polarity != Polarity::Positive || prompts.1.polarity != Polarity::Negative {
        return Err(invalid("triple prompts must be (positive, negative)"));
    }
    let annotation = EventAnnotation::accident(t_ai, t_ai + window - 1, Some(prompts.0.id), seed)?;
    Ok(TripleSet {
        anchor,
        pos_segment: pos_gen,
        neg_segment: neg_gen,
        annotation,
        prompts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clip(n: usize, value: f32) -> VideoClip {
        VideoClip::new(n, 2, 2, 3, 30.0, vec![value; n * 12]).unwrap()
    }

    fn ramp(n: usize) -> VideoClip {
        let data = (0..n * 12).map(|i| (i % 97) as f32 / 96.0).collect();
        VideoClip::new(n, 2, 2, 3, 30.0, data).unwrap()
    }

    fn prompts() -> (TextPrompt, TextPrompt) {
        (
            TextPrompt::new(0, "ego-car hits a car", Polarity::Positive).unwrap(),
            TextPrompt::new(8, "car moves straight", Polarity::Negative).unwrap(),
        )
    }

    #[test]
    fn paper_range_fits_150_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let i = sample_random_indicator(150, IndicatorRange::PAPER, GENERATION_LEN, &mut rng).unwrap();
            assert!((110..=128).contains(&i));
            assert!(i + 21 <= 149);
        }
    }

    #[test]
    fn toy_range_and_degenerate_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..500 {
            let i = sample_random_indicator(60, IndicatorRange::TOY, GENERATION_LEN, &mut rng).unwrap();
            assert!((30..=38).contains(&i));
            seen.insert(i);
        }
        assert_eq!(seen.len(), 9);
        let single = IndicatorRange::new(110, 110).unwrap();
        assert_eq!(sample_random_indicator(150, single, GENERATION_LEN, &mut rng).unwrap(), 110);
    }

    #[test]
    fn too_short_clip_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_random_indicator(149, IndicatorRange::PAPER, GENERATION_LEN, &mut rng).is_err());
        assert!(IndicatorRange::new(5, 4).is_err());
    }

    #[test]
    fn identity_graft_reproduces_anchor() {
        let anchor = Arc::new(ramp(60));
        let seg = anchor.segment(30, GENERATION_LEN).unwrap();
        let t = build_triple_set(anchor.clone(), 30, seg.clone(), seg, prompts(), 0).unwrap();
        assert_eq!(&t.pos(), anchor.as_ref());
        assert_eq!(t.annotation.t_co, Some(51));
    }

    #[test]
    fn last_valid_window_at_paper_boundary() {
        let anchor = Arc::new(clip(150, 0.2));
        let t = build_triple_set(anchor.clone(), 128, clip(22, 1.0), clip(22, 0.0), prompts(), 3).unwrap();
        assert_eq!(t.t_co(), 149);
        let pos = t.pos();
        assert!(pos.frame(149).iter().all(|v| *v == 1.0));
        assert!(pos.frame(127).iter().all(|v| *v == 0.2));
        assert!(t.grafting_is_local());
        assert_eq!(t.annotation.label, 1);
        assert_eq!(t.neg_annotation().label, 0);
        assert!(build_triple_set(anchor, 129, clip(22, 1.0), clip(22, 0.0), prompts(), 3).is_err());
    }

    #[test]
    fn mismatched_segments_are_rejected() {
        let anchor = Arc::new(clip(60, 0.2));
        let wide = VideoClip::new(22, 2, 3, 3, 30.0, vec![0.0; 22 * 18]).unwrap();
        assert!(build_triple_set(anchor.clone(), 30, wide, clip(22, 0.0), prompts(), 0).is_err());
        assert!(build_triple_set(anchor, 30, clip(21, 0.0), clip(22, 0.0), prompts(), 0).is_err());
    }
}
