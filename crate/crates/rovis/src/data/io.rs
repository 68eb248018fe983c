//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json                      format_version, categories, video table
//! <root>/<video_id>/frame_NNNN.ppm          binary PPM (P6, maxval 255), one per frame
//! <root>/<video_id>/annotations.json        per-frame instances with RLE masks
//! ```
//!
//! Saving is deterministic (fixed key order, fixed video/object order), and
//! save -> load -> save is byte-identical: pixel values quantize to 8 bits on
//! the first save and survive the round trip exactly.

use super::{BitMask, Dataset, DatasetVideo, Frame, GtObject, Split, VideoSample};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    categories: Vec<String>,
    videos: Vec<ManifestVideo>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestVideo {
    id: String,
    length: usize,
    height: usize,
    width: usize,
    split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    video_id: String,
    frames: Vec<FrameAnnotations>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameAnnotations {
    index: usize,
    objects: Vec<ObjectAnnotation>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectAnnotation {
    instance_id: u64,
    category: usize,
    rle: Vec<u32>,
}

pub fn write_ppm(frame: &Frame, w: &mut impl Write) -> std::io::Result<()> {
    write!(w, "P6\n{} {}\n255\n", frame.width, frame.height)?;
    let bytes: Vec<u8> = frame
        .data
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    w.write_all(&bytes)
}

pub fn read_ppm(r: &mut impl Read) -> Result<Frame> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::Dataset(format!("ppm: read failed: {e}")))?;
    // Header: "P6" then width, height, maxval as whitespace-separated
    // tokens; a single whitespace byte separates maxval from pixel data.
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Dataset("ppm: truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(&bytes)?;
    if magic != "P6" {
        return Err(Error::Dataset(format!("ppm: bad magic {magic:?}, expected \"P6\"")));
    }
    let width: usize = token(&bytes)?.parse().map_err(|_| Error::Dataset("ppm: bad width".into()))?;
    let height: usize =
        token(&bytes)?.parse().map_err(|_| Error::Dataset("ppm: bad height".into()))?;
    let maxval: usize =
        token(&bytes)?.parse().map_err(|_| Error::Dataset("ppm: bad maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Dataset(format!("ppm: maxval {maxval}, only 255 supported")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Dataset(format!("ppm: empty dimensions {width}x{height}")));
    }
    pos += 1; // the single whitespace after maxval
    let need = width * height * 3;
    let pixels = bytes.get(pos..pos + need).ok_or_else(|| {
        Error::Dataset(format!("ppm: expected {need} pixel bytes, found {}", bytes.len().saturating_sub(pos)))
    })?;
    Ok(Frame {
        height,
        width,
        data: pixels.iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

fn frame_file_name(index: usize) -> String {
    format!("frame_{index:04}.ppm")
}

/// Write a dataset directory (see module docs). The directory is created if
/// missing; existing files are overwritten.
pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        categories: ds.categories.clone(),
        videos: ds
            .videos
            .iter()
            .map(|v| {
                let first = v.sample.frames.first();
                ManifestVideo {
                    id: v.sample.id.clone(),
                    length: v.sample.frames.len(),
                    height: first.map(|f| f.height).unwrap_or(0),
                    width: first.map(|f| f.width).unwrap_or(0),
                    split: v.split,
                }
            })
            .collect(),
    };
    let manifest_path = root.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::Dataset(format!("manifest: serialize failed: {e}")))?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;

    for v in &ds.videos {
        let dir = root.join(&v.sample.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (t, frame) in v.sample.frames.iter().enumerate() {
            let path = dir.join(frame_file_name(t));
            let mut buf = Vec::new();
            write_ppm(frame, &mut buf).expect("ppm: in-memory write cannot fail");
            fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        }
        let ann = AnnotationFile {
            video_id: v.sample.id.clone(),
            frames: v
                .sample
                .annotations
                .iter()
                .enumerate()
                .map(|(t, objs)| FrameAnnotations {
                    index: t,
                    objects: objs
                        .iter()
                        .map(|o| ObjectAnnotation {
                            instance_id: o.instance_id,
                            category: o.category,
                            rle: o.mask.to_rle(),
                        })
                        .collect(),
                })
                .collect(),
        };
        let ann_path = dir.join("annotations.json");
        let json = serde_json::to_vec_pretty(&ann)
            .map_err(|e| Error::Dataset(format!("annotations: serialize failed: {e}")))?;
        fs::write(&ann_path, json).map_err(|e| Error::io(&ann_path, e))?;
    }
    Ok(())
}

/// Load a dataset directory, validating the manifest against the files and
/// every annotation against its frame dimensions.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join("manifest.json");
    let bytes = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Dataset(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Dataset(format!(
            "manifest: format version {} unsupported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let mut seen_ids = std::collections::BTreeSet::new();
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for mv in &manifest.videos {
        if !seen_ids.insert(&mv.id) {
            return Err(Error::Dataset(format!("manifest: duplicate video id {:?}", mv.id)));
        }
        let dir = root.join(&mv.id);
        let mut frames = Vec::with_capacity(mv.length);
        for t in 0..mv.length {
            let path = dir.join(frame_file_name(t));
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let frame = read_ppm(&mut bytes.as_slice())
                .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
            if frame.height != mv.height || frame.width != mv.width {
                return Err(Error::Dataset(format!(
                    "{}: frame is {}x{}, manifest says {}x{}",
                    path.display(),
                    frame.height,
                    frame.width,
                    mv.height,
                    mv.width
                )));
            }
            frames.push(frame);
        }
        let ann_path = dir.join("annotations.json");
        let bytes = fs::read(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
        let ann: AnnotationFile = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Dataset(format!("{}: {e}", ann_path.display())))?;
        if ann.video_id != mv.id {
            return Err(Error::Dataset(format!(
                "{}: video_id {:?} does not match directory {:?}",
                ann_path.display(),
                ann.video_id,
                mv.id
            )));
        }
        if ann.frames.len() != mv.length {
            return Err(Error::Dataset(format!(
                "{}: {} frame entries, manifest says {}",
                ann_path.display(),
                ann.frames.len(),
                mv.length
            )));
        }
        let mut annotations = Vec::with_capacity(mv.length);
        for (t, fa) in ann.frames.iter().enumerate() {
            if fa.index != t {
                return Err(Error::Dataset(format!(
                    "{}: frame entry {t} has index {}",
                    ann_path.display(),
                    fa.index
                )));
            }
            let mut ids = std::collections::BTreeSet::new();
            let mut objs = Vec::with_capacity(fa.objects.len());
            for o in &fa.objects {
                if !ids.insert(o.instance_id) {
                    return Err(Error::Dataset(format!(
                        "{}: duplicate instance {} in frame {t}",
                        ann_path.display(),
                        o.instance_id
                    )));
                }
                if o.category >= manifest.categories.len() {
                    return Err(Error::Dataset(format!(
                        "{}: instance {} category {} out of range ({} categories)",
                        ann_path.display(),
                        o.instance_id,
                        o.category,
                        manifest.categories.len()
                    )));
                }
                let mask = BitMask::from_rle(mv.height, mv.width, &o.rle)
                    .map_err(|e| Error::Dataset(format!("{}: instance {} frame {t}: {e}", ann_path.display(), o.instance_id)))?;
                objs.push(GtObject { instance_id: o.instance_id, category: o.category, mask });
            }
            annotations.push(objs);
        }
        videos.push(DatasetVideo {
            sample: VideoSample { id: mv.id.clone(), frames, annotations },
            split: mv.split,
        });
    }
    Ok(Dataset { categories: manifest.categories, videos })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn tiny_dataset(seed: u64) -> Dataset {
        let mut rng = Rng::new(seed);
        let mut videos = Vec::new();
        for vi in 0..2 {
            let mut frames = Vec::new();
            let mut annotations = Vec::new();
            for _ in 0..3 {
                let mut f = Frame::new(5, 6);
                for v in f.data.iter_mut() {
                    *v = rng.next_f64();
                }
                frames.push(f);
                let mask = BitMask::from_fn(5, 6, |_, _| rng.bernoulli(0.3));
                annotations.push(vec![GtObject { instance_id: 1, category: vi, mask }]);
            }
            videos.push(DatasetVideo {
                sample: VideoSample { id: format!("video_{vi:04}"), frames, annotations },
                split: if vi == 0 { Split::Train } else { Split::Val },
            });
        }
        Dataset { categories: vec!["disc".into(), "rectangle".into()], videos }
    }

    #[test]
    fn ppm_roundtrip_is_exact_after_quantization() {
        let mut rng = Rng::new(8);
        let mut f = Frame::new(7, 3);
        for v in f.data.iter_mut() {
            *v = rng.next_f64();
        }
        let mut buf = Vec::new();
        write_ppm(&f, &mut buf).unwrap();
        let loaded = read_ppm(&mut buf.as_slice()).unwrap();
        let mut buf2 = Vec::new();
        write_ppm(&loaded, &mut buf2).unwrap();
        assert_eq!(buf, buf2, "second save must be byte-identical");
    }

    #[test]
    fn ppm_rejects_malformed_input() {
        assert!(read_ppm(&mut &b"P5\n2 2\n255\n"[..]).is_err());
        assert!(read_ppm(&mut &b"P6\n2 2\n65535\n"[..]).is_err());
        assert!(read_ppm(&mut &b"P6\n2 2\n255\nxx"[..]).is_err(), "truncated pixels");
    }

    #[test]
    fn dataset_roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(1);
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.categories, ds.categories);
        assert_eq!(loaded.videos.len(), 2);
        for (a, b) in loaded.videos.iter().zip(&ds.videos) {
            assert_eq!(a.sample.id, b.sample.id);
            assert_eq!(a.split, b.split);
            assert_eq!(a.sample.frames.len(), b.sample.frames.len());
            for (fa, fb) in a.sample.annotations.iter().zip(&b.sample.annotations) {
                assert_eq!(fa.len(), fb.len());
                for (oa, ob) in fa.iter().zip(fb) {
                    assert_eq!(oa.instance_id, ob.instance_id);
                    assert_eq!(oa.category, ob.category);
                    assert_eq!(oa.mask, ob.mask);
                }
            }
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(2);
        save_dataset(&ds, dir1.path()).unwrap();
        let loaded = load_dataset(dir1.path()).unwrap();
        save_dataset(&loaded, dir2.path()).unwrap();
        for rel in ["manifest.json", "video_0000/frame_0000.ppm", "video_0000/annotations.json", "video_0001/frame_0002.ppm"] {
            let a = std::fs::read(dir1.path().join(rel)).unwrap();
            let b = std::fs::read(dir2.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel} differs");
        }
    }

    #[test]
    fn load_rejects_bad_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(3);
        save_dataset(&ds, dir.path()).unwrap();
        let ann_path = dir.path().join("video_0000/annotations.json");
        let text = std::fs::read_to_string(&ann_path).unwrap();
        // Category out of range.
        std::fs::write(&ann_path, text.replace("\"category\": 0", "\"category\": 9")).unwrap();
        assert!(load_dataset(dir.path()).is_err());
        // Unknown key in the manifest.
        std::fs::write(&ann_path, &text).unwrap();
        let man_path = dir.path().join("manifest.json");
        let man = std::fs::read_to_string(&man_path).unwrap();
        std::fs::write(&man_path, man.replace("\"format_version\"", "\"extra\": 1, \"format_version\"")).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }
}
