//! Per-image steps shared by training stages and inference, so both paths
//! produce the same bytes for the same image.

use crate::captioner::{ImageArtifacts, ObjectSlot};
use crate::detector::{crop_rect, Detection, DetectorModel};
use crate::error::Result;
use crate::features::{object_features, schema, FeatureVector};
use crate::geom::Rect;
use crate::imgproc::{preprocess, Image, PreprocessConfig};
use crate::kgraph::{build_knowledge_graph, skeleton_regions, CrfModel, KnowledgeGraph, Region};
use crate::metrics::timed;
use crate::skeleton::{skeletonize, Mask, ThresholdPolicy};

/// Settings of the per-image steps after preprocessing.
#[derive(Clone, Debug)]
pub struct AnalysisSettings {
    pub preprocess: PreprocessConfig,
    pub threshold: ThresholdPolicy,
    pub min_skeleton_pixels: usize,
    pub max_objects: usize,
}

/// Every intermediate of one image, in original-image coordinates.
#[derive(Clone, Debug)]
pub struct ImageAnalysis {
    pub preprocessed: Image,
    pub detections: Vec<Detection>,
    pub skeleton: Mask,
    pub object_skeletons: Vec<Mask>,
    pub graph: KnowledgeGraph,
    /// Graph generation time in seconds.
    pub ggt: f64,
    pub object_features: Vec<FeatureVector>,
    /// Mean object feature row over the full schema.
    pub global: Vec<f64>,
}

/// Maps detections from an `(from_w, from_h)` frame into `(to_w, to_h)`,
/// clipped to the target image.
pub fn rescale_detections(dets: &[Detection], from: (usize, usize), to: (usize, usize)) -> Vec<Detection> {
    let sx = to.0 as f64 / from.0 as f64;
    let sy = to.1 as f64 / from.1 as f64;
    dets.iter()
        .map(|d| {
            let x0 = (d.rect.x * sx).clamp(0.0, to.0 as f64);
            let y0 = (d.rect.y * sy).clamp(0.0, to.1 as f64);
            let x1 = (d.rect.x1() * sx).clamp(0.0, to.0 as f64);
            let y1 = (d.rect.y1() * sy).clamp(0.0, to.1 as f64);
            Detection {
                rect: Rect::from_corners(x0, y0, x1, y1),
                ..d.clone()
            }
        })
        .collect()
}

/// Gray image with objects brighter than the background: inverted when the
/// border is brighter than the image mean.
pub fn polarity_gray(img: &Image) -> Image {
    let gray = img.to_gray();
    let (w, h) = (gray.width(), gray.height());
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                sum += gray.get(x, y, 0) as f64;
                n += 1;
            }
        }
    }
    if n > 0 && sum / n as f64 > gray.mean() {
        let data = gray.data().iter().map(|v| 255 - v).collect();
        Image::new(w, h, 1, data).expect("same shape as the source")
    } else {
        gray
    }
}

pub fn image_skeleton(img: &Image, policy: ThresholdPolicy) -> Result<Mask> {
    skeletonize(&polarity_gray(img), policy)
}

/// Skeleton of the box crop of the polarity-corrected image.
pub fn object_skeleton(img: &Image, rect: &Rect, policy: ThresholdPolicy) -> Result<Mask> {
    skeletonize(&crop_rect(&polarity_gray(img), rect)?, policy)
}

/// Detections plus leftover skeleton components, labelled by the CRF.
/// Returns the graph and its generation time.
pub fn image_graph(
    crf: &CrfModel,
    img: &Image,
    detections: &[Detection],
    skeleton: &Mask,
    min_pixels: usize,
) -> Result<(KnowledgeGraph, f64)> {
    let (graph, secs) = timed(|| {
        let gray = img.to_gray();
        let rects: Vec<Rect> = detections.iter().map(|d| d.rect).collect();
        let mut regions: Vec<Region> = detections
            .iter()
            .map(|d| Region::from_detection(d.rect, d.class_id, &gray))
            .collect();
        regions.extend(skeleton_regions(skeleton, &gray, &rects, min_pixels));
        build_knowledge_graph(crf, &regions)
    });
    Ok((graph?, secs))
}

pub fn object_row(img: &Image, rect: &Rect, skeleton: &Mask, graph: &KnowledgeGraph) -> Result<FeatureVector> {
    object_features(&crop_rect(img, rect)?, skeleton, graph)
}

/// Column means of `rows`; zeros over the full schema when empty.
pub fn mean_row(rows: &[FeatureVector]) -> Vec<f64> {
    let width = schema().len();
    let mut out = vec![0.0; width];
    for r in rows {
        for (o, v) in out.iter_mut().zip(&r.values) {
            *o += v / rows.len() as f64;
        }
    }
    out
}

/// Picks the masked columns of a full-schema row.
pub fn select_columns(row: &[f64], selected: &[usize]) -> Vec<f64> {
    selected.iter().map(|&i| row[i]).collect()
}

/// Captioner inputs: selected global features and one slot per detection.
pub fn image_artifacts(
    img: &Image,
    detections: &[Detection],
    global: Vec<f64>,
    max_objects: usize,
) -> Result<ImageArtifacts> {
    let slots = detections
        .iter()
        .map(|d| {
            Ok(ObjectSlot::from_detection(
                d,
                &crop_rect(img, &d.rect)?,
                img.width(),
                img.height(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageArtifacts::new(global, slots, max_objects))
}

/// Full test-time flow up to the captioner inputs.
pub fn analyze(img: &Image, detector: &DetectorModel, crf: &CrfModel, s: &AnalysisSettings) -> Result<ImageAnalysis> {
    let preprocessed = preprocess(img, &s.preprocess)?;
    let raw = detector.detect(&preprocessed)?;
    let detections = rescale_detections(
        &raw,
        (preprocessed.width(), preprocessed.height()),
        (img.width(), img.height()),
    );
    let skeleton = image_skeleton(img, s.threshold)?;
    let object_skeletons = detections
        .iter()
        .map(|d| object_skeleton(img, &d.rect, s.threshold))
        .collect::<Result<Vec<_>>>()?;
    let (graph, ggt) = image_graph(crf, img, &detections, &skeleton, s.min_skeleton_pixels)?;
    let object_features = detections
        .iter()
        .zip(&object_skeletons)
        .map(|(d, sk)| object_row(img, &d.rect, sk, &graph))
        .collect::<Result<Vec<_>>>()?;
    let global = mean_row(&object_features);
    Ok(ImageAnalysis {
        preprocessed,
        detections,
        skeleton,
        object_skeletons,
        graph,
        ggt,
        object_features,
        global,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polarity_makes_dark_objects_foreground() {
        let img = Image::from_gray_fn(9, 9, |x, y| {
            if (3..6).contains(&x) && (3..6).contains(&y) {
                20
            } else {
                220
            }
        })
        .unwrap();
        let g = polarity_gray(&img);
        assert_eq!(g.get(4, 4, 0), 235);
        assert_eq!(g.get(0, 0, 0), 35);
        let bright = Image::from_gray_fn(9, 9, |x, y| {
            if (3..6).contains(&x) && (3..6).contains(&y) {
                220
            } else {
                20
            }
        })
        .unwrap();
        assert_eq!(polarity_gray(&bright), bright);
    }

    #[test]
    fn rescaling_maps_and_clips_boxes() {
        let d = Detection {
            rect: Rect::new(7.0, 14.0, 28.0, 49.0),
            confidence: 0.9,
            class_probs: vec![1.0],
            class_id: 0,
            score: 0.9,
        };
        let out = rescale_detections(&[d], (56, 56), (64, 64));
        let r = out[0].rect;
        assert!((r.x - 8.0).abs() < 1e-12 && (r.y - 16.0).abs() < 1e-12);
        assert!((r.w - 32.0).abs() < 1e-12);
        assert!((r.y1() - 64.0).abs() < 1e-12);
    }

    #[test]
    fn mean_row_of_nothing_is_zero_schema() {
        let z = mean_row(&[]);
        assert_eq!(z.len(), schema().len());
        assert!(z.iter().all(|&v| v == 0.0));
        assert_eq!(select_columns(&[1.0, 2.0, 3.0], &[2, 0]), [3.0, 1.0]);
    }
}
