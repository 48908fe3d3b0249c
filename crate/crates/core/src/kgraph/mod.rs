//! Knowledge graphs over image regions: CRF entity labelling, spatial
//! relations and centrality features.

mod centrality;
mod crf;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use centrality::{adjacency, closeness, graph_features, pagerank, GraphFeatures};
pub use crf::{
    crf_normalize, crf_score, decode, decode_unary, feature_vector, labeling_distribution, log_sum_exp, pair_relations,
    Attribute, CrfModel, PAIR_RELATIONS,
};

use crate::error::{Error, Result};
use crate::geom::Rect;
use crate::imgproc::Image;
use crate::skeleton::Mask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegionSource {
    Detection,
    Skeleton,
}

/// A candidate entity before labelling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub bbox: Rect,
    pub centroid: (f64, f64),
    pub mean_intensity: f64,
    /// Detector class, when the region comes from a detection.
    pub class_prior: Option<usize>,
    pub source: RegionSource,
}

impl Region {
    /// Centroid at the box centre; the source follows from the prior.
    pub fn new(bbox: Rect, mean_intensity: f64, class_prior: Option<usize>) -> Self {
        Self {
            bbox,
            centroid: bbox.center(),
            mean_intensity,
            class_prior,
            source: if class_prior.is_some() {
                RegionSource::Detection
            } else {
                RegionSource::Skeleton
            },
        }
    }

    pub fn from_detection(bbox: Rect, class_id: usize, gray: &Image) -> Self {
        Self::new(bbox, mean_in_box(gray, &bbox), Some(class_id))
    }
}

fn mean_in_box(gray: &Image, b: &Rect) -> f64 {
    let clamp = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi);
    let (x0, y0) = (clamp(b.x.floor(), gray.width()), clamp(b.y.floor(), gray.height()));
    let (x1, y1) = (clamp(b.x1().ceil(), gray.width()), clamp(b.y1().ceil(), gray.height()));
    let (mut sum, mut n) = (0.0, 0usize);
    for y in y0..y1 {
        for x in x0..x1 {
            sum += gray.get(x, y, 0) as f64;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Skeleton components of at least `min_pixels` whose centroid lies outside
/// every detection box become extra regions.
pub fn skeleton_regions(skeleton: &Mask, gray: &Image, detections: &[Rect], min_pixels: usize) -> Vec<Region> {
    let (labels, count) = skeleton.components();
    let w = skeleton.width();
    let mut stats = vec![(usize::MAX, usize::MAX, 0usize, 0usize, 0.0f64, 0.0f64, 0usize); count];
    for (i, &l) in labels.iter().enumerate() {
        if l == usize::MAX {
            continue;
        }
        let (x, y) = (i % w, i / w);
        let s = &mut stats[l];
        s.0 = s.0.min(x);
        s.1 = s.1.min(y);
        s.2 = s.2.max(x);
        s.3 = s.3.max(y);
        s.4 += x as f64 + 0.5;
        s.5 += y as f64 + 0.5;
        s.6 += 1;
    }
    let inside = |c: (f64, f64), r: &Rect| c.0 >= r.x && c.0 <= r.x1() && c.1 >= r.y && c.1 <= r.y1();
    stats
        .into_iter()
        .filter(|s| s.6 >= min_pixels)
        .filter_map(|(x0, y0, x1, y1, sx, sy, n)| {
            let bbox = Rect::from_corners(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64);
            let centroid = (sx / n as f64, sy / n as f64);
            if detections.iter().any(|d| inside(centroid, d)) {
                return None;
            }
            Some(Region {
                bbox,
                centroid,
                mean_intensity: mean_in_box(gray, &bbox),
                class_prior: None,
                source: RegionSource::Skeleton,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: usize,
    pub label: String,
    pub label_index: usize,
    pub bbox: [f64; 4],
    pub centroid: (f64, f64),
    pub source: RegionSource,
}

impl Entity {
    pub fn rect(&self) -> Rect {
        Rect::new(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3])
    }
}

/// Labels regions with the most probable CRF assignment; ids follow input order.
pub fn label_entities(model: &CrfModel, regions: &[Region]) -> Result<Vec<Entity>> {
    if regions.is_empty() {
        return Ok(Vec::new());
    }
    let labeling = decode(model, regions)?;
    Ok(regions
        .iter()
        .zip(labeling)
        .enumerate()
        .map(|(id, (r, y))| Entity {
            id,
            label: model.labels[y].clone(),
            label_index: y,
            bbox: r.bbox.to_array(),
            centroid: r.centroid,
            source: r.source,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelationKind {
    LeftOf,
    RightOf,
    Above,
    Below,
    Overlaps,
    Near,
}

impl RelationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::LeftOf => "left-of",
            Self::RightOf => "right-of",
            Self::Above => "above",
            Self::Below => "below",
            Self::Overlaps => "overlaps",
            Self::Near => "near",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Relation {
    pub src: usize,
    pub dst: usize,
    pub kind: RelationKind,
}

/// Spatial predicates for every ordered pair of entities.
///
/// Overlapping boxes get `overlaps`; otherwise the dominant axis of the
/// centroid offset picks one directional predicate. `near` is added when the
/// centroid distance is below 1.5 times the pair's mean box diagonal.
pub fn extract_relations(entities: &[Entity]) -> Vec<Relation> {
    let mut out = Vec::new();
    for a in entities {
        for b in entities {
            if a.id == b.id {
                continue;
            }
            let (ra, rb) = (a.rect(), b.rect());
            let kind = if ra.intersection(&rb) > 0.0 {
                RelationKind::Overlaps
            } else {
                let dx = b.centroid.0 - a.centroid.0;
                let dy = b.centroid.1 - a.centroid.1;
                if dx.abs() >= dy.abs() {
                    if dx > 0.0 {
                        RelationKind::LeftOf
                    } else {
                        RelationKind::RightOf
                    }
                } else if dy > 0.0 {
                    RelationKind::Above
                } else {
                    RelationKind::Below
                }
            };
            out.push(Relation {
                src: a.id,
                dst: b.id,
                kind,
            });
            let dist = (b.centroid.0 - a.centroid.0).hypot(b.centroid.1 - a.centroid.1);
            if dist < 1.5 * (ra.diagonal() + rb.diagonal()) / 2.0 {
                out.push(Relation {
                    src: a.id,
                    dst: b.id,
                    kind: RelationKind::Near,
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    pub nodes: Vec<Entity>,
    pub edges: Vec<Relation>,
}

/// Validates endpoints and removes duplicate triples, keeping first occurrences.
pub fn build_graph(entities: Vec<Entity>, relations: Vec<Relation>) -> Result<KnowledgeGraph> {
    let ids: BTreeSet<usize> = entities.iter().map(|e| e.id).collect();
    if ids.len() != entities.len() {
        return Err(Error::invalid("duplicate entity id"));
    }
    let mut seen = BTreeSet::new();
    let mut edges = Vec::with_capacity(relations.len());
    for r in relations {
        if !ids.contains(&r.src) || !ids.contains(&r.dst) {
            return Err(Error::invalid(format!(
                "relation {} -> {} references a missing entity",
                r.src, r.dst
            )));
        }
        if r.src == r.dst {
            return Err(Error::invalid(format!("self relation on entity {}", r.src)));
        }
        if seen.insert(r) {
            edges.push(r);
        }
    }
    Ok(KnowledgeGraph { nodes: entities, edges })
}

/// Regions -> labelled entities -> relations -> graph.
pub fn build_knowledge_graph(model: &CrfModel, regions: &[Region]) -> Result<KnowledgeGraph> {
    let entities = label_entities(model, regions)?;
    let relations = extract_relations(&entities);
    build_graph(entities, relations)
}

impl KnowledgeGraph {
    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: KnowledgeGraph = serde_json::from_str(s)?;
        build_graph(g.nodes, g.edges)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_string(path, &self.to_json()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&crate::io::read_string(path)?)
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph kg {\n");
        for n in &self.nodes {
            let _ = writeln!(s, "  n{} [label=\"{}#{}\"];", n.id, n.label, n.id);
        }
        for e in &self.edges {
            let _ = writeln!(s, "  n{} -> n{} [label=\"{}\"];", e.src, e.dst, e.kind.as_str());
        }
        s.push_str("}\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entity(id: usize, x: f64, y: f64, w: f64, h: f64) -> Entity {
        let r = Rect::new(x, y, w, h);
        Entity {
            id,
            label: "object".into(),
            label_index: 0,
            bbox: r.to_array(),
            centroid: r.center(),
            source: RegionSource::Detection,
        }
    }

    #[test]
    fn left_of_and_overlaps() {
        let a = entity(0, 0.0, 0.0, 4.0, 4.0);
        let b = entity(1, 40.0, 1.0, 4.0, 4.0);
        let rel = extract_relations(&[a.clone(), b]);
        assert_eq!(
            rel,
            vec![
                Relation {
                    src: 0,
                    dst: 1,
                    kind: RelationKind::LeftOf
                },
                Relation {
                    src: 1,
                    dst: 0,
                    kind: RelationKind::RightOf
                },
            ]
        );
        let twin = entity(1, 0.0, 0.0, 4.0, 4.0);
        let rel = extract_relations(&[a.clone(), twin]);
        assert!(rel.contains(&Relation {
            src: 0,
            dst: 1,
            kind: RelationKind::Overlaps
        }));
        assert!(rel.contains(&Relation {
            src: 1,
            dst: 0,
            kind: RelationKind::Overlaps
        }));
        assert!(extract_relations(&[a]).is_empty());
    }

    #[test]
    fn build_dedups_and_validates() {
        let nodes = vec![
            entity(0, 0.0, 0.0, 2.0, 2.0),
            entity(1, 5.0, 0.0, 2.0, 2.0),
            entity(2, 9.0, 0.0, 2.0, 2.0),
        ];
        let r = Relation {
            src: 0,
            dst: 1,
            kind: RelationKind::LeftOf,
        };
        let r2 = Relation {
            src: 1,
            dst: 2,
            kind: RelationKind::LeftOf,
        };
        let g = build_graph(nodes.clone(), vec![r, r, r2]).unwrap();
        assert_eq!((g.nodes.len(), g.edges.len()), (3, 2));
        let dangling = Relation {
            src: 0,
            dst: 7,
            kind: RelationKind::Near,
        };
        assert!(build_graph(nodes, vec![dangling]).is_err());
        assert_eq!(build_graph(vec![], vec![]).unwrap(), KnowledgeGraph::default());
    }

    #[test]
    fn json_roundtrip_and_dot() {
        let g = build_graph(
            vec![entity(0, 0.0, 0.0, 2.0, 2.0), entity(1, 5.0, 0.0, 2.0, 2.0)],
            vec![Relation {
                src: 0,
                dst: 1,
                kind: RelationKind::LeftOf,
            }],
        )
        .unwrap();
        let json = g.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["edges"][0]["kind"], "left-of");
        assert_eq!(v["nodes"][1]["bbox"][0], 5.0);
        assert_eq!(KnowledgeGraph::from_json(&json).unwrap(), g);
        assert!(g.to_dot().contains("n0 -> n1 [label=\"left-of\"]"));
    }

    #[test]
    fn skeleton_regions_skip_detected_objects() {
        let skel = Mask::from_ascii(&["##........", "..........", "....###...", "..........", ".......###"]).unwrap();
        let gray = Image::filled(10, 5, 1, 200).unwrap();
        let dets = [Rect::new(6.0, 3.0, 4.0, 2.0)];
        let r = skeleton_regions(&skel, &gray, &dets, 3);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].bbox, Rect::new(4.0, 2.0, 3.0, 1.0));
        assert_eq!(r[0].mean_intensity, 200.0);
    }
}
