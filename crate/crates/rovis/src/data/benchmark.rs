//! Built-in synthetic benchmark suites. All four emit 16-frame 64x64 videos
//! over the categories disc / rectangle / blob, with the first 80% of videos
//! as the train split and the rest as validation.

use super::scene::{generate, ObjectScript, SceneScript, ShapeKind};
use super::{Dataset, DatasetVideo, Split};
use crate::rng::Rng;
use crate::{Error, Result};

pub const FRAMES: usize = 16;
pub const CANVAS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchmarkKind {
    /// Objects with crossing paths and distinct depths.
    Occlusion,
    /// At least one object disappears for 2-8 frames and returns.
    Reappear,
    /// 7-12 small wandering objects.
    Crowding,
    /// Round-robin over the three stressors.
    Mixed,
}

impl BenchmarkKind {
    pub const ALL: [BenchmarkKind; 4] =
        [BenchmarkKind::Occlusion, BenchmarkKind::Reappear, BenchmarkKind::Crowding, BenchmarkKind::Mixed];

    pub fn name(self) -> &'static str {
        match self {
            BenchmarkKind::Occlusion => "occlusion",
            BenchmarkKind::Reappear => "reappear",
            BenchmarkKind::Crowding => "crowding",
            BenchmarkKind::Mixed => "mixed",
        }
    }
}

impl std::str::FromStr for BenchmarkKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BenchmarkKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown benchmark {s:?} (occlusion, reappear, crowding, mixed)")))
    }
}

fn shape_for(category: usize) -> ShapeKind {
    match category {
        0 => ShapeKind::Disc,
        1 => ShapeKind::Rectangle,
        _ => ShapeKind::Blob,
    }
}

fn base_object(id: u64, depth: i32, rng: &mut Rng) -> ObjectScript {
    let category = rng.below(3);
    ObjectScript {
        instance_id: id,
        category,
        shape: shape_for(category),
        depth,
        color: [rng.uniform(0.3, 0.95), rng.uniform(0.3, 0.95), rng.uniform(0.3, 0.95)],
        position: vec![],
        size: vec![],
        aspect: rng.uniform(0.45, 0.8),
        wobble: rng.uniform(0.15, 0.3),
        wobble_phase: rng.uniform(0.0, std::f64::consts::TAU),
        visibility: vec![(0, FRAMES)],
    }
}

fn scene_shell(objects: Vec<ObjectScript>) -> SceneScript {
    SceneScript {
        length: FRAMES,
        height: CANVAS,
        width: CANVAS,
        background: [0.08, 0.08, 0.1],
        jitter: 0.08,
        objects,
    }
}

/// Paths crossing near the canvas center around the middle frame.
fn occlusion_script(rng: &mut Rng) -> SceneScript {
    let n = 2 + rng.below(2);
    let c = CANVAS as f64 / 2.0;
    let cross = (c + rng.uniform(-6.0, 6.0), c + rng.uniform(-6.0, 6.0));
    let mut depths: Vec<i32> = (0..n as i32).collect();
    rng.shuffle(&mut depths);
    let objects = (0..n)
        .map(|i| {
            let mut o = base_object(i as u64 + 1, depths[i], rng);
            let size = rng.uniform(5.0, 9.0);
            let theta = i as f64 * std::f64::consts::TAU / n as f64 + rng.uniform(-0.4, 0.4);
            let r = rng.uniform(18.0, 23.0);
            let start = (cross.0 + r * theta.cos(), cross.1 + r * theta.sin());
            let end = (cross.0 - r * theta.cos(), cross.1 - r * theta.sin());
            let clamp = |v: f64| v.clamp(size + 1.0, CANVAS as f64 - size - 1.0);
            let mid = (cross.0 + rng.uniform(-2.0, 2.0), cross.1 + rng.uniform(-2.0, 2.0));
            o.position = vec![
                (0, clamp(start.0), clamp(start.1)),
                (FRAMES / 2, clamp(mid.0), clamp(mid.1)),
                (FRAMES - 1, clamp(end.0), clamp(end.1)),
            ];
            o.size = vec![(0, size)];
            o
        })
        .collect();
    scene_shell(objects)
}

/// Linear drifts; the first object (and sometimes a second) blinks out for
/// 2-8 frames, short enough for a tracker with inactivity tolerance 9.
fn reappear_script(rng: &mut Rng) -> SceneScript {
    let n = 1 + rng.below(3);
    let objects = (0..n)
        .map(|i| {
            let mut o = base_object(i as u64 + 1, i as i32, rng);
            let size = rng.uniform(5.0, 9.0);
            let y0 = rng.uniform(size + 2.0, CANVAS as f64 - size - 2.0);
            let y1 = (y0 + rng.uniform(-10.0, 10.0)).clamp(size + 2.0, CANVAS as f64 - size - 2.0);
            let (x0, x1) = if rng.bernoulli(0.5) {
                (rng.uniform(8.0, 18.0), rng.uniform(44.0, 54.0))
            } else {
                (rng.uniform(44.0, 54.0), rng.uniform(8.0, 18.0))
            };
            o.position = vec![(0, x0, y0), (FRAMES - 1, x1, y1)];
            o.size = vec![(0, size)];
            if i == 0 || rng.bernoulli(0.4) {
                let gap = 2 + rng.below(7);
                let max_start = FRAMES - 2 - gap;
                let start = 2 + rng.below(max_start - 1);
                o.visibility = vec![(0, start), (start + gap, FRAMES)];
            }
            o
        })
        .collect();
    scene_shell(objects)
}

/// Many small objects wandering with bounded per-keyframe displacement.
fn crowding_script(rng: &mut Rng) -> SceneScript {
    let n = 7 + rng.below(6);
    let objects = (0..n)
        .map(|i| {
            let mut o = base_object(i as u64 + 1, i as i32, rng);
            let size = rng.uniform(3.5, 5.5);
            let lo = size + 1.5;
            let hi = CANVAS as f64 - size - 1.5;
            let mut x = rng.uniform(lo, hi);
            let mut y = rng.uniform(lo, hi);
            let mut pos = vec![(0usize, x, y)];
            for t in [5usize, 10, 15] {
                x = (x + rng.uniform(-9.0, 9.0)).clamp(lo, hi);
                y = (y + rng.uniform(-9.0, 9.0)).clamp(lo, hi);
                pos.push((t, x, y));
            }
            o.position = pos;
            o.size = vec![(0, size)];
            o
        })
        .collect();
    scene_shell(objects)
}

/// Generate a benchmark dataset. Deterministic in (kind, seed, size); video
/// `i` of the mixed suite uses stressor `i % 3`.
pub fn make_benchmark(kind: BenchmarkKind, seed: u64, size: usize) -> Result<Dataset> {
    let mut master = Rng::new(seed);
    let train_count = size * 8 / 10;
    let mut videos = Vec::with_capacity(size);
    for i in 0..size {
        let mut vrng = master.split();
        let script = match kind {
            BenchmarkKind::Occlusion => occlusion_script(&mut vrng),
            BenchmarkKind::Reappear => reappear_script(&mut vrng),
            BenchmarkKind::Crowding => crowding_script(&mut vrng),
            BenchmarkKind::Mixed => match i % 3 {
                0 => occlusion_script(&mut vrng),
                1 => reappear_script(&mut vrng),
                _ => crowding_script(&mut vrng),
            },
        };
        let mut sample = generate(&script, vrng.split())?;
        sample.id = format!("video_{i:04}");
        videos.push(DatasetVideo {
            sample,
            split: if i < train_count { Split::Train } else { Split::Val },
        });
    }
    Ok(Dataset {
        categories: vec!["disc".into(), "rectangle".into(), "blob".into()],
        videos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gt_tracks;

    #[test]
    fn suites_have_expected_shape_and_split() {
        for kind in BenchmarkKind::ALL {
            let ds = make_benchmark(kind, 11, 5).unwrap();
            assert_eq!(ds.videos.len(), 5);
            let train = ds.videos.iter().filter(|v| v.split == Split::Train).count();
            assert_eq!(train, 4, "{kind:?}");
            for v in &ds.videos {
                assert_eq!(v.sample.frames.len(), FRAMES);
                assert_eq!(v.sample.frames[0].height, CANVAS);
                assert_eq!(v.sample.frames[0].width, CANVAS);
                assert!(!v.sample.annotations.iter().all(|a| a.is_empty()));
            }
        }
    }

    #[test]
    fn reappear_suite_has_recoverable_gaps() {
        let ds = make_benchmark(BenchmarkKind::Reappear, 3, 8).unwrap();
        for v in &ds.videos {
            let has_gap = gt_tracks(&v.sample).iter().any(|t| {
                let frames: Vec<usize> = t.masks.keys().copied().collect();
                frames.windows(2).any(|w| {
                    let gap = w[1] - w[0] - 1;
                    (2..=8).contains(&gap)
                })
            });
            assert!(has_gap, "video {} has no 2-8 frame gap", v.sample.id);
        }
    }

    #[test]
    fn crowding_suite_averages_at_least_six_instances() {
        let ds = make_benchmark(BenchmarkKind::Crowding, 5, 10).unwrap();
        let mut total = 0usize;
        let mut frames = 0usize;
        for v in &ds.videos {
            for objs in &v.sample.annotations {
                total += objs.len();
                frames += 1;
            }
        }
        let avg = total as f64 / frames as f64;
        assert!(avg >= 6.0, "average {avg}");
    }

    #[test]
    fn occlusion_suite_actually_occludes() {
        let ds = make_benchmark(BenchmarkKind::Occlusion, 9, 6).unwrap();
        for v in &ds.videos {
            // Some instance loses area mid-video relative to its own peak.
            let tracks = gt_tracks(&v.sample);
            let occluded = tracks.iter().any(|t| {
                let areas: Vec<usize> = t.masks.values().map(|m| m.area()).collect();
                let peak = areas.iter().copied().max().unwrap_or(0);
                let min = areas.iter().copied().min().unwrap_or(0);
                t.masks.len() < FRAMES || min * 5 < peak * 4
            });
            assert!(occluded, "video {} shows no occlusion", v.sample.id);
        }
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let a = make_benchmark(BenchmarkKind::Mixed, 42, 4).unwrap();
        let b = make_benchmark(BenchmarkKind::Mixed, 42, 4).unwrap();
        for (va, vb) in a.videos.iter().zip(&b.videos) {
            assert_eq!(va.sample.id, vb.sample.id);
            for (fa, fb) in va.sample.frames.iter().zip(&vb.sample.frames) {
                assert_eq!(fa.data, fb.data);
            }
        }
        let c = make_benchmark(BenchmarkKind::Mixed, 43, 4).unwrap();
        assert_ne!(a.videos[0].sample.frames[0].data, c.videos[0].sample.frames[0].data);
    }

    #[test]
    fn size_zero_is_a_valid_empty_dataset() {
        let ds = make_benchmark(BenchmarkKind::Occlusion, 1, 0).unwrap();
        assert!(ds.videos.is_empty());
        assert_eq!(ds.categories.len(), 3);
    }

    #[test]
    fn kind_parses_from_str() {
        assert_eq!("mixed".parse::<BenchmarkKind>().unwrap(), BenchmarkKind::Mixed);
        assert!("bogus".parse::<BenchmarkKind>().is_err());
    }
}
