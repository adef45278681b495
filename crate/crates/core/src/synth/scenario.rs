//! Toy dashcam scenes: parametric object paths, a geometric collision
//! oracle and a rasteriser.
//!
//! Coordinates are normalised to the frame (`x` right, `y` down, both in
//! `[0, 1]`), so a scenario renders at any resolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::annotation::EventAnnotation;
use super::clip::VideoClip;
use crate::error::{invalid, Result};

pub const HORIZON: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Ego,
    Car,
    Truck,
    Bus,
    Pedestrian,
    Cyclist,
    Motorcycle,
    Van,
    Animal,
}

impl ObjectClass {
    pub const ROAD_USERS: [ObjectClass; 8] = [
        ObjectClass::Car,
        ObjectClass::Truck,
        ObjectClass::Bus,
        ObjectClass::Pedestrian,
        ObjectClass::Cyclist,
        ObjectClass::Motorcycle,
        ObjectClass::Van,
        ObjectClass::Animal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Ego => "ego-car",
            ObjectClass::Car => "car",
            ObjectClass::Truck => "truck",
            ObjectClass::Bus => "bus",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Cyclist => "cyclist",
            ObjectClass::Motorcycle => "motorcycle",
            ObjectClass::Van => "van",
            ObjectClass::Animal => "animal",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ROAD_USERS
            .into_iter()
            .chain([ObjectClass::Ego])
            .find(|c| c.name() == name)
    }

    fn color(self) -> [f32; 3] {
        match self {
            ObjectClass::Ego => [0.12, 0.12, 0.14],
            ObjectClass::Car => [0.10, 0.30, 0.90],
            ObjectClass::Truck => [0.60, 0.20, 0.70],
            ObjectClass::Bus => [0.95, 0.80, 0.10],
            ObjectClass::Pedestrian => [0.90, 0.50, 0.60],
            ObjectClass::Cyclist => [0.10, 0.80, 0.30],
            ObjectClass::Motorcycle => [0.20, 0.80, 0.80],
            ObjectClass::Van => [0.95, 0.95, 0.95],
            ObjectClass::Animal => [0.55, 0.35, 0.15],
        }
    }

    /// Width over height.
    fn aspect(self) -> f64 {
        match self {
            ObjectClass::Ego => 4.5,
            ObjectClass::Car => 1.4,
            ObjectClass::Truck => 1.6,
            ObjectClass::Bus => 2.0,
            ObjectClass::Pedestrian => 0.45,
            ObjectClass::Cyclist => 0.6,
            ObjectClass::Motorcycle => 0.6,
            ObjectClass::Van => 1.3,
            ObjectClass::Animal => 1.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x0: cx - w / 2.0,
            y0: cy - h / 2.0,
            x1: cx + w / 2.0,
            y1: cy + h / 2.0,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn intersection(&self, o: &BBox) -> BBox {
        BBox {
            x0: self.x0.max(o.x0),
            y0: self.y0.max(o.y0),
            x1: self.x1.min(o.x1),
            y1: self.y1.min(o.y1),
        }
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let inter = self.intersection(o).area();
        let union = self.area() + o.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub frame: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Piecewise-linear box path through its keyframes, held constant outside
/// the keyframe span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub class: ObjectClass,
    pub keys: Vec<Keyframe>,
}

impl Trajectory {
    pub fn new(class: ObjectClass, mut keys: Vec<Keyframe>) -> Self {
        keys.sort_by(|a, b| a.frame.total_cmp(&b.frame));
        Self { class, keys }
    }

    /// Bounding box at (possibly fractional) frame `t`.
    pub fn box_at(&self, t: f64) -> BBox {
        let k = &self.keys;
        let pick = |a: &Keyframe| BBox::from_center(a.cx, a.cy, a.w, a.h);
        if t <= k[0].frame {
            return pick(&k[0]);
        }
        for pair in k.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if t <= b.frame {
                let s = if b.frame > a.frame {
                    (t - a.frame) / (b.frame - a.frame)
                } else {
                    1.0
                };
                let lerp = |p: f64, q: f64| p + s * (q - p);
                return BBox::from_center(lerp(a.cx, b.cx), lerp(a.cy, b.cy), lerp(a.w, b.w), lerp(a.h, b.h));
            }
        }
        pick(k.last().unwrap())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Collision {
    /// Indices of the two colliding trajectories.
    pub pair: (usize, usize),
    /// Annotated collision frame; the pair overlaps there.
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub trajectories: Vec<Trajectory>,
    pub collision: Option<Collision>,
    pub background: u8,
}

impl ScenarioSpec {
    pub fn object_count(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_collision(&self) -> bool {
        self.collision.is_some()
    }

    fn validate(&self, n_frames: usize) -> Result<()> {
        if self.trajectories.is_empty() {
            return Err(invalid("scenario has no trajectories"));
        }
        if let Some(t) = self.trajectories.iter().find(|t| t.keys.is_empty()) {
            return Err(invalid(format!("trajectory of {} has no keyframes", t.class.name())));
        }
        if let Some(c) = &self.collision {
            let n = self.trajectories.len();
            if c.pair.0 >= n || c.pair.1 >= n || c.pair.0 == c.pair.1 {
                return Err(invalid(format!("collision pair {:?} invalid for {n} objects", c.pair)));
            }
            if c.frame >= n_frames {
                return Err(invalid(format!(
                    "collision frame {} beyond clip of {n_frames} frames",
                    c.frame
                )));
            }
            if collision_iou(self, c.pair, c.frame as f64) <= 0.0 {
                return Err(invalid(format!(
                    "objects {:?} do not overlap at collision frame {}",
                    c.pair, c.frame
                )));
            }
        }
        Ok(())
    }
}

/// IoU of the pair's boxes at frame `t`, straight from the paths.
pub fn collision_iou(spec: &ScenarioSpec, pair: (usize, usize), t: f64) -> f64 {
    spec.trajectories[pair.0].box_at(t).iou(&spec.trajectories[pair.1].box_at(t))
}

/// Start of the final approach: the earliest frame from which the centre
/// distance of the pair decreases strictly every frame up to `t_co`.
pub fn approach_start(spec: &ScenarioSpec, pair: (usize, usize), t_co: usize) -> usize {
    let dist = |t: usize| {
        let (ax, ay) = spec.trajectories[pair.0].box_at(t as f64).center();
        let (bx, by) = spec.trajectories[pair.1].box_at(t as f64).center();
        ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
    };
    let mut t = t_co;
    while t > 0 && dist(t - 1) > dist(t) {
        t -= 1;
    }
    t
}

/// Renders `spec` into a clip and derives its event annotation.
pub fn generate_clip(
    spec: &ScenarioSpec,
    n_frames: usize,
    dims: (usize, usize),
    frame_rate: f64,
    seed: u64,
) -> Result<(VideoClip, EventAnnotation)> {
    if n_frames == 0 {
        return Err(invalid("n_frames must be at least 1"));
    }
    let (h, w) = dims;
    if h == 0 || w == 0 {
        return Err(invalid(format!("invalid frame dims {h}x{w}")));
    }
    spec.validate(n_frames)?;

    let mut rng = crate::seed::rng(seed, "render", 0);
    let brightness: f32 = rng.random_range(0.95..1.05);
    let phase: f64 = rng.random_range(0.0..1.0);

    let frame_len = h * w * 3;
    let mut data = vec![0f32; n_frames * frame_len];
    for t in 0..n_frames {
        render_frame(
            spec,
            t,
            h,
            w,
            brightness,
            phase,
            &mut data[t * frame_len..(t + 1) * frame_len],
        );
    }
    let clip = VideoClip::from_clamped(n_frames, h, w, 3, frame_rate, data)?;
    let annotation = match &spec.collision {
        Some(c) => EventAnnotation::accident(approach_start(spec, c.pair, c.frame), c.frame, None, seed)?,
        None => EventAnnotation::normal(None, seed),
    };
    Ok((clip, annotation))
}

const SKY: [[f32; 3]; 4] = [
    [0.55, 0.75, 0.95],
    [0.85, 0.65, 0.45],
    [0.25, 0.30, 0.45],
    [0.75, 0.78, 0.80],
];
const ROAD: [[f32; 3]; 4] = [
    [0.35, 0.35, 0.37],
    [0.40, 0.37, 0.33],
    [0.20, 0.20, 0.24],
    [0.45, 0.45, 0.45],
];

fn render_frame(spec: &ScenarioSpec, t: usize, h: usize, w: usize, brightness: f32, phase: f64, out: &mut [f32]) {
    let style = spec.background as usize % SKY.len();
    let tf = t as f64;
    let mut boxes: Vec<(BBox, ObjectClass)> = spec
        .trajectories
        .iter()
        .map(|tr| (tr.box_at(tf), tr.class))
        .collect();
    // far objects first, the ego hood last
    boxes.sort_by(|a, b| {
        (a.1 == ObjectClass::Ego)
            .cmp(&(b.1 == ObjectClass::Ego))
            .then(a.0.y1.total_cmp(&b.0.y1))
    });
    let burst = spec.collision.and_then(|c| {
        (t >= c.frame).then(|| {
            let a = spec.trajectories[c.pair.0].box_at(tf);
            let b = spec.trajectories[c.pair.1].box_at(tf);
            let (cx, cy) = a.intersection(&b).center();
            let r = 0.06 + 0.02 * ((t - c.frame).min(4) as f64);
            (cx, cy, r)
        })
    });

    for yi in 0..h {
        let y = (yi as f64 + 0.5) / h as f64;
        for xi in 0..w {
            let x = (xi as f64 + 0.5) / w as f64;
            let mut px = if y < HORIZON {
                SKY[style]
            } else {
                let mut c = ROAD[style];
                let depth = ((y - HORIZON) / (1.0 - HORIZON)) as f32;
                for ch in &mut c {
                    *ch *= 0.85 + 0.3 * depth;
                }
                let spread = 0.05 + 0.42 * (y - HORIZON) / (1.0 - HORIZON);
                let edge = (x - 0.5).abs() - spread;
                let dash = ((y * 8.0 - tf * 0.15 - phase).rem_euclid(1.0)) < 0.5;
                if edge.abs() < 0.012 || ((x - 0.5).abs() < 0.01 && dash) {
                    c = [0.9, 0.9, 0.85];
                }
                c
            };
            for (bx, class) in &boxes {
                if bx.contains(x, y) {
                    px = class.color();
                    if *class != ObjectClass::Ego && y > bx.y1 - 0.2 * (bx.y1 - bx.y0) {
                        px = px.map(|v| v * 0.45);
                    }
                }
            }
            if let Some((cx, cy, r)) = burst {
                let (dx, dy) = ((x - cx).abs(), (y - cy).abs());
                if dx < r && dy < r {
                    px = if dx < r / 2.0 && dy < r / 2.0 {
                        [1.0, 0.9, 0.2]
                    } else {
                        [1.0, 0.25, 0.05]
                    };
                }
            }
            let o = (yi * w + xi) * 3;
            for ch in 0..3 {
                out[o + ch] = (px[ch] * brightness).clamp(0.0, 1.0);
            }
        }
    }
}

pub fn ego_trajectory() -> Trajectory {
    Trajectory::new(
        ObjectClass::Ego,
        vec![Keyframe {
            frame: 0.0,
            cx: 0.5,
            cy: 0.94,
            w: 0.56,
            h: 0.12,
        }],
    )
}

/// Height of an object whose box bottom sits at `y` (crude perspective).
fn height_at(y: f64) -> f64 {
    0.04 + 0.3 * (y - HORIZON)
}

/// An object crossing the road laterally at constant depth and speed.
fn lateral_mover<R: Rng>(rng: &mut R, class: ObjectClass, n_frames: usize) -> Trajectory {
    let bottom = rng.random_range(0.5..0.72);
    let h = height_at(bottom);
    let w = h * class.aspect();
    let cy = bottom - h / 2.0;
    let speed = rng.random_range(0.004..0.014) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let x0 = rng.random_range(0.1..0.9);
    let last = (n_frames.max(2) - 1) as f64;
    Trajectory::new(
        class,
        vec![
            Keyframe { frame: 0.0, cx: x0, cy, w, h },
            Keyframe { frame: last, cx: x0 + speed * last, cy, w, h },
        ],
    )
}

/// Accident-free scene: ego hood, `focus` moving straight, and up to two
/// other road users.
pub fn sample_normal_scenario<R: Rng>(rng: &mut R, n_frames: usize, focus: ObjectClass) -> ScenarioSpec {
    let mut trajectories = vec![ego_trajectory(), lateral_mover(rng, focus, n_frames)];
    for _ in 0..rng.random_range(0..=2) {
        let class = ObjectClass::ROAD_USERS[rng.random_range(0..ObjectClass::ROAD_USERS.len())];
        trajectories.push(lateral_mover(rng, class, n_frames));
    }
    ScenarioSpec {
        trajectories,
        collision: None,
        background: rng.random_range(0..SKY.len() as u8),
    }
}

/// Ego-collision scene: `hazard` drifts away from the lane centre until
/// `approach_start`, then heads straight at the ego hood and touches it at
/// `collision_frame`.
pub fn sample_accident_scenario<R: Rng>(
    rng: &mut R,
    n_frames: usize,
    hazard: ObjectClass,
    approach_start: usize,
    collision_frame: usize,
) -> Result<ScenarioSpec> {
    if approach_start >= collision_frame || collision_frame >= n_frames {
        return Err(invalid(format!(
            "need approach {approach_start} < collision {collision_frame} < {n_frames} frames"
        )));
    }
    let ego = ego_trajectory();
    let (ex, ey) = ego.box_at(0.0).center();
    let bottom = rng.random_range(0.52..0.66);
    let h0 = height_at(bottom);
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let p0 = (0.5 + side * rng.random_range(0.08..0.3), bottom - h0 / 2.0);
    let drift = 0.004 * side;
    let start_x = p0.0 - drift * approach_start as f64;
    // end 0.1 from the ego centre along the line towards it
    let (dx, dy) = (ex - p0.0, ey - p0.1);
    let len = (dx * dx + dy * dy).sqrt();
    let end = (ex - dx / len * 0.1, ey - dy / len * 0.1);
    let h_end = rng.random_range(0.18..0.24);
    let mut keys = vec![];
    if approach_start > 0 {
        keys.push(Keyframe {
            frame: 0.0,
            cx: start_x,
            cy: p0.1,
            w: h0 * hazard.aspect(),
            h: h0,
        });
    }
    keys.push(Keyframe {
        frame: approach_start as f64,
        cx: p0.0,
        cy: p0.1,
        w: h0 * hazard.aspect(),
        h: h0,
    });
    keys.push(Keyframe {
        frame: collision_frame as f64,
        cx: end.0,
        cy: end.1,
        w: (h_end * hazard.aspect()).min(0.5),
        h: h_end,
    });
    let mut trajectories = vec![ego, Trajectory::new(hazard, keys)];
    for _ in 0..rng.random_range(0..=1) {
        let class = ObjectClass::ROAD_USERS[rng.random_range(0..ObjectClass::ROAD_USERS.len())];
        trajectories.push(lateral_mover(rng, class, n_frames));
    }
    Ok(ScenarioSpec {
        trajectories,
        collision: Some(Collision {
            pair: (0, 1),
            frame: collision_frame,
        }),
        background: rng.random_range(0..SKY.len() as u8),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Two unit-speed boxes on straight paths meeting at frame 40.
    fn crossing_spec() -> ScenarioSpec {
        let a = Trajectory::new(
            ObjectClass::Car,
            vec![
                Keyframe { frame: 0.0, cx: 0.1, cy: 0.6, w: 0.1, h: 0.08 },
                Keyframe { frame: 50.0, cx: 0.6, cy: 0.6, w: 0.1, h: 0.08 },
            ],
        );
        let b = Trajectory::new(
            ObjectClass::Truck,
            vec![
                Keyframe { frame: 0.0, cx: 0.9, cy: 0.6, w: 0.1, h: 0.08 },
                Keyframe { frame: 50.0, cx: 0.4, cy: 0.6, w: 0.1, h: 0.08 },
            ],
        );
        ScenarioSpec {
            trajectories: vec![a, b],
            collision: Some(Collision { pair: (0, 1), frame: 40 }),
            background: 0,
        }
    }

    #[test]
    fn crossing_paths_touch_at_frame_forty() {
        // both centres reach x = 0.5 at frame 40, so the boxes coincide
        let spec = crossing_spec();
        let iou40 = collision_iou(&spec, (0, 1), 40.0);
        assert!((iou40 - 1.0).abs() < 1e-12);
        // edges first meet when the centre gap (0.8 - 0.02 t) equals the width
        assert_eq!(collision_iou(&spec, (0, 1), 35.0), 0.0);
        assert!(collision_iou(&spec, (0, 1), 35.5) > 0.0);
        assert!(iou40 > 0.0);
        let (_, ann) = generate_clip(&spec, 60, (16, 16), 30.0, 5).unwrap();
        assert_eq!(ann.t_co, Some(40));
        assert_eq!(ann.label, 1);
        // distance shrinks from the first frame
        assert_eq!(ann.t_ai, Some(0));
    }

    #[test]
    fn same_spec_and_seed_is_bit_identical() {
        let spec = crossing_spec();
        let a = generate_clip(&spec, 45, (12, 20), 30.0, 3).unwrap();
        let b = generate_clip(&spec, 45, (12, 20), 30.0, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_clip(&spec, 45, (12, 20), 30.0, 4).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn normal_scene_has_sentinel_annotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = sample_normal_scenario(&mut rng, 10, ObjectClass::Bus);
        let (clip, ann) = generate_clip(&spec, 10, (16, 16), 30.0, 1).unwrap();
        assert_eq!(ann.label, 0);
        assert_eq!(ann.t_ai, None);
        assert_eq!(ann.t_co, None);
        assert_eq!(clip.dims(), (10, 16, 16, 3));
    }

    #[test]
    fn rejects_bad_inputs() {
        let spec = crossing_spec();
        assert!(generate_clip(&spec, 0, (8, 8), 30.0, 0).is_err());
        assert!(generate_clip(&spec, 60, (0, 8), 30.0, 0).is_err());
        let empty = ScenarioSpec { trajectories: vec![], collision: None, background: 0 };
        assert!(generate_clip(&empty, 5, (8, 8), 30.0, 0).is_err());
        let mut miss = crossing_spec();
        miss.collision = Some(Collision { pair: (0, 1), frame: 10 });
        assert!(generate_clip(&miss, 60, (8, 8), 30.0, 0).is_err());
    }

    #[test]
    fn sampled_accidents_match_their_design() {
        for s in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let a = rng.random_range(0..40);
            let c = a + rng.random_range(10..16);
            let hazard = ObjectClass::ROAD_USERS[(s % 8) as usize];
            let spec = sample_accident_scenario(&mut rng, 60, hazard, a, c).unwrap();
            assert!(collision_iou(&spec, (0, 1), c as f64) > 0.0, "seed {s}");
            assert_eq!(approach_start(&spec, (0, 1), c), a, "seed {s}");
        }
    }

    #[test]
    fn sampled_normals_never_touch_the_ego() {
        for s in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let spec = sample_normal_scenario(&mut rng, 60, ObjectClass::Car);
            for i in 1..spec.trajectories.len() {
                for t in 0..60 {
                    assert_eq!(collision_iou(&spec, (0, i), t as f64), 0.0);
                }
            }
        }
    }

    #[test]
    fn burst_pixels_appear_after_collision() {
        let spec = crossing_spec();
        let (clip, _) = generate_clip(&spec, 45, (32, 32), 30.0, 0).unwrap();
        let hot = |t: usize| {
            clip.frame(t)
                .chunks(3)
                .filter(|p| p[0] > 0.9 && p[1] < 0.35 && p[2] < 0.1)
                .count()
        };
        assert_eq!(hot(39), 0);
        assert!(hot(40) > 0);
    }
}
