//! Memory enhancement: refine high-confidence predictions by adding the
//! affinity between a detection crop's feature and each category prototype
//! to that category's score, then re-taking the argmax.

use std::collections::BTreeMap;

use crate::backend::FeatureEmbedder;
use crate::core::{argmax, crop, Detection, Image};
use crate::error::{Result, TtaError};
use crate::tensor::dot;

/// Affinity parameters: weighting factor, sharpness ratio, and the score
/// gate below which detections pass through untouched.
#[derive(Debug, Clone, Copy)]
pub struct AffinityParams {
    pub alpha: f64,
    pub beta: f64,
    pub th_me: f64,
}

impl AffinityParams {
    pub fn new(alpha: f64, beta: f64, th_me: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0 && beta.is_finite() && beta > 0.0) {
            return Err(TtaError::Invalid(format!(
                "affinity parameters must be finite and positive, got alpha={alpha} beta={beta}"
            )));
        }
        if !(0.0..=1.0).contains(&th_me) {
            return Err(TtaError::Invalid(format!("th_me {th_me} outside [0, 1]")));
        }
        Ok(AffinityParams { alpha, beta, th_me })
    }
}

/// `alpha * exp(-beta * (1 - x))` for a similarity `x` in `[-1, 1]`.
pub fn affinity(x: f64, params: &AffinityParams) -> f64 {
    params.alpha * (-params.beta * (1.0 - x)).exp()
}

/// Enhance every detection whose top score strictly exceeds the gate.
///
/// For a gated detection the crop under its box is embedded once; every
/// category with a prototype receives additive affinity mass, categories
/// without one contribute nothing, and the label is re-derived from the
/// summed vector. Gated-out detections and detections with degenerate
/// crops are returned bit-identical, and output order equals input order.
/// Enhanced score vectors may exceed 1; they are ranking quantities.
pub fn enhance(
    image: &Image,
    detections: &[Detection],
    prototypes: &BTreeMap<usize, Vec<f64>>,
    embedder: &dyn FeatureEmbedder,
    params: &AffinityParams,
) -> Result<Vec<Detection>> {
    if prototypes.is_empty() {
        return Ok(detections.to_vec());
    }
    let mut out = Vec::with_capacity(detections.len());
    for det in detections {
        if det.score <= params.th_me {
            out.push(det.clone());
            continue;
        }
        let instance = match crop(image, &det.box_) {
            Ok(c) => c,
            Err(TtaError::DegenerateBox) => {
                out.push(det.clone());
                continue;
            }
            Err(e) => return Err(e),
        };
        let feat = embedder.embed(&instance)?;
        let mut scores = det.scores.clone();
        for (c, proto) in prototypes {
            if *c < scores.len() {
                scores[*c] += affinity(dot(&feat, proto), params);
            }
        }
        let label = argmax(&scores);
        let score = scores[label];
        out.push(Detection {
            box_: det.box_,
            scores,
            label,
            score,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ToyEmbedder, ToyEmbedderConfig};
    use crate::core::BoundingBox;

    fn params() -> AffinityParams {
        AffinityParams::new(5.0, 5.0, 0.3).unwrap()
    }

    #[test]
    fn affinity_closed_form() {
        let p = params();
        assert_eq!(affinity(1.0, &p), 5.0);
        let at_zero = affinity(0.0, &p);
        assert!((at_zero - 5.0 * (-5.0f64).exp()).abs() < 1e-12);
        assert!((at_zero - 0.033689735).abs() < 1e-6);
    }

    #[test]
    fn affinity_is_monotone() {
        let p = params();
        let mut prev = affinity(-1.0, &p);
        for i in 1..=40 {
            let x = -1.0 + i as f64 * 0.05;
            let a = affinity(x, &p);
            assert!(a > prev);
            prev = a;
        }
    }

    #[test]
    fn params_reject_nonpositive() {
        assert!(AffinityParams::new(0.0, 5.0, 0.3).is_err());
        assert!(AffinityParams::new(5.0, -1.0, 0.3).is_err());
        assert!(AffinityParams::new(5.0, 5.0, 1.5).is_err());
    }

    #[test]
    fn empty_prototypes_pass_through() {
        let embedder = ToyEmbedder::new(&ToyEmbedderConfig::default());
        let img = Image::filled(32, 32, 0.5).unwrap();
        let det = Detection::from_scores(
            BoundingBox::new(2.0, 2.0, 10.0, 10.0).unwrap(),
            vec![0.8, 0.1],
        )
        .unwrap();
        let out = enhance(
            &img,
            std::slice::from_ref(&det),
            &BTreeMap::new(),
            &embedder,
            &params(),
        )
        .unwrap();
        assert_eq!(out, vec![det]);
    }

    #[test]
    fn sub_threshold_detections_are_untouched() {
        let embedder = ToyEmbedder::new(&ToyEmbedderConfig::default());
        let img = Image::filled(32, 32, 0.5).unwrap();
        let low = Detection::from_scores(
            BoundingBox::new(2.0, 2.0, 10.0, 10.0).unwrap(),
            vec![0.29, 0.1],
        )
        .unwrap();
        let mut protos = BTreeMap::new();
        protos.insert(0usize, vec![1.0; embedder.feature_dim()]);
        let out = enhance(
            &img,
            std::slice::from_ref(&low),
            &protos,
            &embedder,
            &params(),
        )
        .unwrap();
        assert_eq!(out, vec![low]);
    }

    #[test]
    fn own_feature_prototype_adds_exactly_alpha() {
        let embedder = ToyEmbedder::new(&ToyEmbedderConfig::default());
        let img = Image::filled(32, 32, 0.5).unwrap();
        let b = BoundingBox::new(4.0, 4.0, 20.0, 20.0).unwrap();
        let det = Detection::from_scores(b, vec![0.6, 0.2]).unwrap();
        let own = embedder.embed(&crop(&img, &b).unwrap()).unwrap();
        let mut protos = BTreeMap::new();
        protos.insert(0usize, own);
        let p = params();
        let out = enhance(&img, std::slice::from_ref(&det), &protos, &embedder, &p).unwrap();
        assert!((out[0].scores[0] - (det.scores[0] + p.alpha)).abs() < 1e-9);
        assert_eq!(out[0].scores[1], det.scores[1], "class without prototype");
        assert_eq!(out[0].box_, det.box_);
    }

    #[test]
    fn degenerate_box_passes_through() {
        let embedder = ToyEmbedder::new(&ToyEmbedderConfig::default());
        let img = Image::filled(32, 32, 0.5).unwrap();
        let det = Detection::from_scores(
            BoundingBox::new(40.0, 40.0, 50.0, 50.0).unwrap(),
            vec![0.9, 0.1],
        )
        .unwrap();
        let mut protos = BTreeMap::new();
        protos.insert(0usize, vec![1.0, 0.0]);
        let out = enhance(
            &img,
            std::slice::from_ref(&det),
            &protos,
            &embedder,
            &params(),
        )
        .unwrap();
        assert_eq!(out, vec![det]);
    }

    /// A uniform shift of every class score must not change the argmax, so
    /// enhancement with a shared prototype affinity only reorders across
    /// detections, never within one.
    #[test]
    fn global_shift_preserves_argmax() {
        let scores = vec![0.4, 0.7, 0.2];
        let before = argmax(&scores);
        let shifted: Vec<f64> = scores.iter().map(|s| s + 3.3).collect();
        assert_eq!(argmax(&shifted), before);
    }
}
