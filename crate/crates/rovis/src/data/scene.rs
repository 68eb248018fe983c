//! Scene scripts and the deterministic renderer.
//!
//! A script fully describes a synthetic video: shaped objects with
//! piecewise-linear keyframe trajectories, a depth order, and visibility
//! intervals. Rendering resolves occlusion back to front, so ground-truth
//! masks are modal (visible parts only) and pairwise disjoint per frame. An
//! instance scripted invisible or fully occluded in a frame simply has no
//! annotation there.

use super::{BitMask, Frame, GtObject, VideoSample};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Rectangle,
    Blob,
}

#[derive(Debug, Clone)]
pub struct ObjectScript {
    pub instance_id: u64,
    pub category: usize,
    pub shape: ShapeKind,
    /// Higher depth renders in front; ties break by instance id (lower id
    /// behind).
    pub depth: i32,
    pub color: [f64; 3],
    /// (frame, center x, center y) keyframes, strictly ascending frames.
    pub position: Vec<(usize, f64, f64)>,
    /// (frame, base size) keyframes; radius for discs, half-width for
    /// rectangles, base radius for blobs.
    pub size: Vec<(usize, f64)>,
    /// Rectangle half-height = size * aspect.
    pub aspect: f64,
    /// Blob radial deformation amplitude (fraction of base radius).
    pub wobble: f64,
    pub wobble_phase: f64,
    /// Half-open [start, end) frame intervals during which the object
    /// exists; sorted and disjoint.
    pub visibility: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct SceneScript {
    pub length: usize,
    pub height: usize,
    pub width: usize,
    pub background: [f64; 3],
    /// Per-frame multiplicative color jitter amplitude.
    pub jitter: f64,
    pub objects: Vec<ObjectScript>,
}

fn interp2(keys: &[(usize, f64, f64)], t: f64) -> (f64, f64) {
    match keys.iter().position(|&(f, _, _)| f as f64 > t) {
        Some(0) => (keys[0].1, keys[0].2),
        None => {
            let last = keys[keys.len() - 1];
            (last.1, last.2)
        }
        Some(i) => {
            let (f0, x0, y0) = keys[i - 1];
            let (f1, x1, y1) = keys[i];
            let a = (t - f0 as f64) / (f1 as f64 - f0 as f64);
            (x0 + a * (x1 - x0), y0 + a * (y1 - y0))
        }
    }
}

fn interp1(keys: &[(usize, f64)], t: f64) -> f64 {
    match keys.iter().position(|&(f, _)| f as f64 > t) {
        Some(0) => keys[0].1,
        None => keys[keys.len() - 1].1,
        Some(i) => {
            let (f0, v0) = keys[i - 1];
            let (f1, v1) = keys[i];
            v0 + (t - f0 as f64) / (f1 as f64 - f0 as f64) * (v1 - v0)
        }
    }
}

impl ObjectScript {
    pub fn visible_at(&self, t: usize) -> bool {
        self.visibility.iter().any(|&(s, e)| t >= s && t < e)
    }

    /// Largest extent the object can reach across all size keyframes.
    fn max_diameter(&self) -> f64 {
        let s = self.size.iter().map(|&(_, v)| v).fold(0.0, f64::max);
        match self.shape {
            ShapeKind::Disc => 2.0 * s,
            ShapeKind::Rectangle => 2.0 * s * self.aspect.max(1.0),
            ShapeKind::Blob => 2.0 * s * (1.0 + self.wobble),
        }
    }

    /// Amodal mask at frame t (ignores occlusion and visibility).
    fn rasterize(&self, t: usize, height: usize, width: usize) -> BitMask {
        let tf = t as f64;
        let (cx, cy) = interp2(&self.position, tf);
        let s = interp1(&self.size, tf);
        BitMask::from_fn(height, width, |y, x| {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let dx = px - cx;
            let dy = py - cy;
            match self.shape {
                ShapeKind::Disc => dx * dx + dy * dy <= s * s,
                ShapeKind::Rectangle => dx.abs() <= s && dy.abs() <= s * self.aspect,
                ShapeKind::Blob => {
                    let theta = dy.atan2(dx);
                    let factor = 1.0
                        + self.wobble
                            * (0.6 * (3.0 * theta + self.wobble_phase + 0.5 * tf).sin()
                                + 0.4 * (5.0 * theta - self.wobble_phase + 0.3 * tf).cos());
                    let r = s * factor.max(0.2);
                    dx * dx + dy * dy <= r * r
                }
            }
        })
    }
}

impl SceneScript {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Invalid(format!(
                "scene: empty dimensions {}x{}x{}",
                self.length, self.height, self.width
            )));
        }
        let mut ids = std::collections::BTreeSet::new();
        for o in &self.objects {
            if !ids.insert(o.instance_id) {
                return Err(Error::Invalid(format!("scene: duplicate instance id {}", o.instance_id)));
            }
            if o.position.is_empty() || o.size.is_empty() {
                return Err(Error::Invalid(format!("scene: instance {} has no keyframes", o.instance_id)));
            }
            for w in o.position.windows(2) {
                if w[1].0 <= w[0].0 {
                    return Err(Error::Invalid(format!(
                        "scene: instance {} position keyframes not strictly ascending",
                        o.instance_id
                    )));
                }
            }
            for w in o.size.windows(2) {
                if w[1].0 <= w[0].0 {
                    return Err(Error::Invalid(format!(
                        "scene: instance {} size keyframes not strictly ascending",
                        o.instance_id
                    )));
                }
            }
            if o.size.iter().any(|&(_, s)| s <= 0.0) {
                return Err(Error::Invalid(format!("scene: instance {} has non-positive size", o.instance_id)));
            }
            if o.max_diameter() > self.height.min(self.width) as f64 {
                return Err(Error::Invalid(format!(
                    "scene: instance {} diameter {:.1} exceeds canvas {}x{}",
                    o.instance_id,
                    o.max_diameter(),
                    self.height,
                    self.width
                )));
            }
            let mut prev_end = 0usize;
            for (i, &(s, e)) in o.visibility.iter().enumerate() {
                if s >= e || e > self.length || (i > 0 && s < prev_end) {
                    return Err(Error::Invalid(format!(
                        "scene: instance {} visibility interval ({s}, {e}) invalid",
                        o.instance_id
                    )));
                }
                prev_end = e;
            }
        }
        Ok(())
    }
}

/// Render a script into frames plus modal per-frame ground truth. Pure
/// function of (script, rng seed): the rng drives only the per-frame color
/// jitter, drawn in a fixed order for every object whether visible or not.
pub fn generate(script: &SceneScript, mut rng: Rng) -> Result<VideoSample> {
    script.validate()?;
    let (h, w) = (script.height, script.width);
    // Back-to-front paint order: ascending depth, ties by instance id.
    let mut order: Vec<usize> = (0..script.objects.len()).collect();
    order.sort_by_key(|&i| (script.objects[i].depth, script.objects[i].instance_id));

    let mut frames = Vec::with_capacity(script.length);
    let mut annotations = Vec::with_capacity(script.length);
    for t in 0..script.length {
        let jitters: Vec<[f64; 3]> = script
            .objects
            .iter()
            .map(|_| {
                [
                    rng.uniform(-script.jitter, script.jitter),
                    rng.uniform(-script.jitter, script.jitter),
                    rng.uniform(-script.jitter, script.jitter),
                ]
            })
            .collect();

        let mut frame = Frame::new(h, w);
        for y in 0..h {
            for x in 0..w {
                frame.set(y, x, script.background);
            }
        }
        // owner[pixel] = index of the front-most object covering it.
        let mut owner: Vec<Option<usize>> = vec![None; h * w];
        for &oi in &order {
            let obj = &script.objects[oi];
            if !obj.visible_at(t) {
                continue;
            }
            let amodal = obj.rasterize(t, h, w);
            let color = [
                (obj.color[0] * (1.0 + jitters[oi][0])).clamp(0.0, 1.0),
                (obj.color[1] * (1.0 + jitters[oi][1])).clamp(0.0, 1.0),
                (obj.color[2] * (1.0 + jitters[oi][2])).clamp(0.0, 1.0),
            ];
            for y in 0..h {
                for x in 0..w {
                    if amodal.get(y, x) {
                        owner[y * w + x] = Some(oi);
                        frame.set(y, x, color);
                    }
                }
            }
        }
        let mut objs = Vec::new();
        for &oi in &order {
            let obj = &script.objects[oi];
            if !obj.visible_at(t) {
                continue;
            }
            let mask = BitMask::from_fn(h, w, |y, x| owner[y * w + x] == Some(oi));
            if !mask.is_empty() {
                objs.push(GtObject { instance_id: obj.instance_id, category: obj.category, mask });
            }
        }
        objs.sort_by_key(|o| o.instance_id);
        frames.push(frame);
        annotations.push(objs);
    }
    Ok(VideoSample { id: String::new(), frames, annotations })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc(id: u64, depth: i32, cx: f64, cy: f64, r: f64) -> ObjectScript {
        ObjectScript {
            instance_id: id,
            category: 0,
            shape: ShapeKind::Disc,
            depth,
            color: [0.8, 0.2, 0.2],
            position: vec![(0, cx, cy)],
            size: vec![(0, r)],
            aspect: 1.0,
            wobble: 0.0,
            wobble_phase: 0.0,
            visibility: vec![(0, 4)],
        }
    }

    fn scene(objects: Vec<ObjectScript>) -> SceneScript {
        SceneScript {
            length: 4,
            height: 32,
            width: 32,
            background: [0.1, 0.1, 0.12],
            jitter: 0.05,
            objects,
        }
    }

    #[test]
    fn masks_are_modal_and_disjoint() {
        // Two overlapping discs; the deeper one loses the overlap.
        let s = scene(vec![disc(1, 0, 14.0, 16.0, 6.0), disc(2, 1, 18.0, 16.0, 6.0)]);
        let v = generate(&s, Rng::new(1)).unwrap();
        for objs in &v.annotations {
            assert_eq!(objs.len(), 2);
            let total: usize = objs.iter().map(|o| o.mask.area()).sum();
            assert_eq!(objs[0].mask.intersection_area(&objs[1].mask), 0);
            assert!(total <= 32 * 32);
        }
        let front = v.annotations[0].iter().find(|o| o.instance_id == 2).unwrap();
        let back = v.annotations[0].iter().find(|o| o.instance_id == 1).unwrap();
        // The front disc keeps its full area (both discs have radius 6).
        assert!(front.mask.area() > back.mask.area());
    }

    #[test]
    fn fully_occluded_instance_has_no_annotation() {
        let s = scene(vec![disc(1, 0, 16.0, 16.0, 4.0), disc(2, 1, 16.0, 16.0, 6.0)]);
        let v = generate(&s, Rng::new(1)).unwrap();
        let ids: Vec<u64> = v.annotations[0].iter().map(|o| o.instance_id).collect();
        assert_eq!(ids, vec![2], "hidden disc must be absent");
    }

    #[test]
    fn visibility_intervals_gate_existence() {
        let mut d = disc(1, 0, 16.0, 16.0, 5.0);
        d.visibility = vec![(0, 1), (3, 4)];
        let v = generate(&scene(vec![d]), Rng::new(2)).unwrap();
        let present: Vec<usize> =
            v.annotations.iter().enumerate().filter(|(_, o)| !o.is_empty()).map(|(t, _)| t).collect();
        assert_eq!(present, vec![0, 3]);
        // Invisible frames show pure background in the image.
        let bg = v.frames[1].get(16, 16);
        assert_eq!(bg, [0.1, 0.1, 0.12]);
    }

    #[test]
    fn trajectories_interpolate_linearly() {
        let mut d = disc(1, 0, 4.0, 16.0, 3.0);
        d.position = vec![(0, 4.0, 16.0), (3, 28.0, 16.0)];
        let v = generate(&scene(vec![d]), Rng::new(3)).unwrap();
        // At t=1 the center is at x = 4 + (28-4)/3 = 12.
        assert!(v.annotations[1][0].mask.get(16, 12));
        assert!(!v.annotations[1][0].mask.get(16, 24));
    }

    #[test]
    fn oversized_object_rejected() {
        let s = scene(vec![disc(1, 0, 16.0, 16.0, 40.0)]);
        let err = generate(&s, Rng::new(1)).unwrap_err();
        assert!(err.to_string().contains("exceeds canvas"), "{err}");
    }

    #[test]
    fn generation_is_deterministic() {
        let s = scene(vec![disc(1, 0, 10.0, 10.0, 5.0), disc(2, 3, 20.0, 20.0, 6.0)]);
        let a = generate(&s, Rng::new(7)).unwrap();
        let b = generate(&s, Rng::new(7)).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.data, fb.data);
        }
        let c = generate(&s, Rng::new(8)).unwrap();
        assert_ne!(a.frames[0].data, c.frames[0].data, "different seed, different jitter");
    }

    #[test]
    fn blob_and_rectangle_shapes_rasterize() {
        let mut blob = disc(1, 0, 10.0, 10.0, 5.0);
        blob.shape = ShapeKind::Blob;
        blob.wobble = 0.3;
        blob.wobble_phase = 1.0;
        let mut rect = disc(2, 1, 22.0, 22.0, 5.0);
        rect.shape = ShapeKind::Rectangle;
        rect.aspect = 0.5;
        let v = generate(&scene(vec![blob, rect]), Rng::new(4)).unwrap();
        let objs = &v.annotations[0];
        assert_eq!(objs.len(), 2);
        let r = objs.iter().find(|o| o.instance_id == 2).unwrap();
        // Half-extents 5 x 2.5 around (22, 22); pixel centers at x+0.5 give
        // 10 columns (17..=26) and 6 rows (19..=24).
        assert_eq!(r.mask.area(), 10 * 6);
        let b = objs.iter().find(|o| o.instance_id == 1).unwrap();
        assert!(b.mask.area() > 20, "blob present");
        // The blob deforms over time.
        let b3 = v.annotations[3].iter().find(|o| o.instance_id == 1).unwrap();
        assert_ne!(b.mask, b3.mask);
    }
}
