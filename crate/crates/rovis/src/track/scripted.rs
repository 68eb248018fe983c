//! Deterministic scripted predictor: a stand-in for the segmenter that emits
//! hand-specified detections, used to exercise the tracker state machine
//! without training anything. Object identity travels through the embedding
//! vector (slot 0 carries the object key), mimicking how track queries carry
//! instance identity between frames.

use super::{FramePredictor, PredictedFrame};
use crate::data::{BitMask, Frame};
use crate::model::QueryState;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct ScriptedObject {
    pub key: usize,
    pub category: usize,
    /// frame index -> (score, mask); absent frames mean the object is invisible.
    pub appearances: BTreeMap<usize, (f64, BitMask)>,
    /// Added to the score when the object answers a track query instead of a
    /// static one. Lets tests stage score ties and near-ties between origins.
    pub track_score_delta: f64,
}

pub struct ScriptedPredictor {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub objects: Vec<ScriptedObject>,
}

impl ScriptedPredictor {
    /// Placeholder frames for driving the tracker; content is never read.
    pub fn frames(&self, count: usize) -> Vec<Frame> {
        (0..count).map(|_| Frame::new(self.height, self.width)).collect()
    }

    fn background_row(&self) -> (Vec<f64>, Vec<f64>) {
        let mut probs = vec![0.0; self.num_classes + 1];
        probs[self.num_classes] = 1.0;
        (probs, vec![0.0; self.height * self.width])
    }

    fn detection_row(&self, category: usize, score: f64, mask: &BitMask) -> (Vec<f64>, Vec<f64>) {
        let mut probs = vec![0.0; self.num_classes + 1];
        probs[category] = score;
        probs[self.num_classes] = 1.0 - score;
        let mask_probs = (0..self.height * self.width)
            .map(|i| if mask.get_flat(i) { 1.0 } else { 0.0 })
            .collect();
        (probs, mask_probs)
    }

    fn embedding_for(&self, key: usize) -> Vec<f64> {
        let mut e = vec![0.0; self.embed_dim];
        e[0] = key as f64;
        e
    }
}

impl FramePredictor for ScriptedPredictor {
    fn num_foreground_classes(&self) -> usize {
        self.num_classes
    }

    fn predict(&self, frame_index: usize, _frame: &Frame, tracks: &[QueryState]) -> PredictedFrame {
        let mut class_probs = Vec::new();
        let mut mask_probs = Vec::new();
        let mut embeddings = Vec::new();
        let mut query_pos = Vec::new();

        // One static slot per scripted object, firing whenever it is visible.
        for obj in &self.objects {
            let (cp, mp) = match obj.appearances.get(&frame_index) {
                Some((score, mask)) => self.detection_row(obj.category, *score, mask),
                None => self.background_row(),
            };
            class_probs.push(cp);
            mask_probs.push(mp);
            embeddings.push(self.embedding_for(obj.key));
            query_pos.push(vec![0.0; self.embed_dim]);
        }

        // Track queries answer for the object whose key their embedding carries.
        for state in tracks {
            let key = state.embedding[0].round() as usize;
            let obj = self.objects.iter().find(|o| o.key == key);
            let (cp, mp) = match obj.and_then(|o| o.appearances.get(&frame_index).map(|a| (o, a))) {
                Some((o, (score, mask))) => {
                    let s = (score + o.track_score_delta).clamp(0.0, 1.0);
                    self.detection_row(o.category, s, mask)
                }
                None => self.background_row(),
            };
            class_probs.push(cp);
            mask_probs.push(mp);
            embeddings.push(self.embedding_for(key));
            query_pos.push(state.pos.clone());
        }

        PredictedFrame {
            height: self.height,
            width: self.width,
            num_static: self.objects.len(),
            class_probs,
            mask_probs,
            embeddings,
            query_pos,
        }
    }
}
