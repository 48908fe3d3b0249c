//! Fixed-schema feature vectors from object crops, skeletons and graphs.

mod image;

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use image::{
    color_histogram, edge_density, glcm_counts, glcm_stats, hog_summary, image_feature_names, image_feature_values,
    moments, GlcmStats, Moments,
};

use crate::error::{Error, Result};
use crate::imgproc::Image;
use crate::kgraph::{adjacency, graph_features as centrality, KnowledgeGraph};
use crate::skeleton::{Mask, SkeletonImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if names.len() != values.len() {
            return Err(Error::invalid(format!(
                "{} names for {} values",
                names.len(),
                values.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::invalid(format!("duplicate feature name `{dup}`")));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("feature `{}` is not finite", names[i])));
        }
        Ok(Self { names, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }

    fn prefixed(&self, prefix: &str) -> Vec<String> {
        self.names.iter().map(|n| format!("{prefix}.{n}")).collect()
    }
}

pub fn image_features(img: &Image) -> FeatureVector {
    FeatureVector::new(image_feature_names(), image_feature_values(img)).expect("image schema is valid")
}

/// 0→1 transitions in the cyclic neighbour sequence P2..P9.
fn crossing_number(n: &[bool; 8]) -> usize {
    (0..8).filter(|&i| !n[i] && n[(i + 1) % 8]).count()
}

pub fn skeleton_feature_names() -> Vec<String> {
    [
        "pixels",
        "branch_points",
        "end_points",
        "components",
        "mean_branch_length",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Junctions are pixels with at least three separate neighbour runs, so the
/// pixels flanking a crossing do not count as junctions themselves.
///
/// Each branch has two ends, counted at end points and at junction runs.
/// Closed loops without either count as one branch each.
pub fn skeleton_features(s: &SkeletonImage) -> FeatureVector {
    let (mut branch, mut end, mut junction_runs) = (0usize, 0usize, 0usize);
    for y in 0..s.height() {
        for x in 0..s.width() {
            if !s.get(x, y) {
                continue;
            }
            let n = s.neighbours(x, y);
            if n.iter().filter(|&&v| v).count() == 1 {
                end += 1;
            }
            let cn = crossing_number(&n);
            if cn >= 3 {
                branch += 1;
                junction_runs += cn;
            }
        }
    }
    let components = s.component_count();
    let segments = match (end + junction_runs).div_ceil(2) {
        0 => components,
        k => k,
    };
    let mean_branch = if segments == 0 {
        0.0
    } else {
        (s.count() - branch) as f64 / segments as f64
    };
    let values = vec![
        s.count() as f64,
        branch as f64,
        end as f64,
        components as f64,
        mean_branch,
    ];
    FeatureVector::new(skeleton_feature_names(), values).expect("skeleton schema is valid")
}

pub fn graph_feature_names() -> Vec<String> {
    [
        "mean_degree",
        "max_degree",
        "mean_closeness",
        "max_closeness",
        "mean_pagerank",
        "max_pagerank",
        "nodes",
        "relations",
        "undirected_edges",
        "density",
        "components",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Graph-level aggregates; an empty graph yields all zeros.
pub fn graph_feature_vector(g: &KnowledgeGraph) -> FeatureVector {
    let f = centrality(g);
    let adj = adjacency(g);
    let n = g.nodes.len();
    let undirected = adj.iter().map(Vec::len).sum::<usize>() / 2;
    let density = if n > 1 {
        2.0 * undirected as f64 / (n * (n - 1)) as f64
    } else {
        0.0
    };
    let values = vec![
        f.mean_degree(),
        f.max_degree(),
        f.mean_closeness(),
        f.max_closeness(),
        f.mean_pagerank(),
        f.max_pagerank(),
        n as f64,
        g.edges.len() as f64,
        undirected as f64,
        density,
        components(&adj) as f64,
    ];
    FeatureVector::new(graph_feature_names(), values).expect("graph schema is valid")
}

fn components(adj: &[Vec<usize>]) -> usize {
    let mut seen = vec![false; adj.len()];
    let mut count = 0;
    for s in 0..adj.len() {
        if seen[s] {
            continue;
        }
        count += 1;
        let mut stack = vec![s];
        seen[s] = true;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
    }
    count
}

/// Concatenates with `img.`, `skel.` and `graph.` prefixes.
pub fn assemble(img_f: &FeatureVector, skel_f: &FeatureVector, graph_f: &FeatureVector) -> Result<FeatureVector> {
    let mut names = img_f.prefixed("img");
    names.extend(skel_f.prefixed("skel"));
    names.extend(graph_f.prefixed("graph"));
    let mut values = img_f.values.clone();
    values.extend(&skel_f.values);
    values.extend(&graph_f.values);
    FeatureVector::new(names, values)
}

/// Canonical names of the full per-object schema.
pub fn schema() -> Vec<String> {
    let mut names: Vec<String> = image_feature_names().into_iter().map(|n| format!("img.{n}")).collect();
    names.extend(skeleton_feature_names().into_iter().map(|n| format!("skel.{n}")));
    names.extend(graph_feature_names().into_iter().map(|n| format!("graph.{n}")));
    names
}

/// Full feature vector of one object.
pub fn object_features(crop: &Image, skeleton: &Mask, graph: &KnowledgeGraph) -> Result<FeatureVector> {
    assemble(
        &image_features(crop),
        &skeleton_features(skeleton),
        &graph_feature_vector(graph),
    )
}

/// Rows of feature values sharing one schema.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureTable {
    pub fn new(names: Vec<String>) -> Self {
        Self {
            names,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, v: &FeatureVector) -> Result<()> {
        if v.names != self.names {
            return Err(Error::invalid("feature vector does not match the table schema"));
        }
        self.rows.push(v.values.clone());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.names).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|v| format!("{v:?}"))).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        crate::io::write_bytes(path, &bytes)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = crate::io::read_bytes(path)?;
        let mut r = csv::Reader::from_reader(bytes.as_slice());
        let names: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let row = rec
                .iter()
                .enumerate()
                .map(|(c, s)| {
                    s.trim().parse::<f64>().map_err(|e| Error::Parse {
                        what: path.display().to_string(),
                        line: i + 2,
                        column: c + 1,
                        message: e.to_string(),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            if row.len() != names.len() {
                return Err(Error::Parse {
                    what: path.display().to_string(),
                    line: i + 2,
                    column: row.len(),
                    message: format!("expected {} columns", names.len()),
                });
            }
            rows.push(row);
        }
        Ok(Self { names, rows })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Validation(format!("csv: {e}"))
}

/// One integer label per row under a `label` header.
pub fn write_labels_csv(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let mut s = String::from("label\n");
    for l in labels {
        s.push_str(&format!("{l}\n"));
    }
    crate::io::write_string(path, &s)
}

pub fn read_labels_csv(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = crate::io::read_string(path)?;
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|e: std::num::ParseIntError| Error::Parse {
                what: path.display().to_string(),
                line: i + 1,
                column: 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kgraph::{build_graph, Entity, RegionSource, Relation, RelationKind};

    #[test]
    fn line_and_plus_topology() {
        let line = Mask::from_ascii(&["............", ".##########.", "............"]).unwrap();
        let f = skeleton_features(&line);
        assert_eq!(f.get("end_points"), Some(2.0));
        assert_eq!(f.get("branch_points"), Some(0.0));
        assert_eq!(f.get("mean_branch_length"), Some(10.0));

        let plus = Mask::from_ascii(&["..#..", "..#..", "#####", "..#..", "..#.."]).unwrap();
        let f = skeleton_features(&plus);
        assert_eq!(f.get("branch_points"), Some(1.0));
        assert_eq!(f.get("end_points"), Some(4.0));
        assert_eq!(f.get("mean_branch_length"), Some(2.0));

        let empty = skeleton_features(&Mask::empty(3, 3));
        assert!(empty.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn assemble_lengths_and_duplicates() {
        let a = FeatureVector::new(vec!["a".into(), "b".into(), "c".into()], vec![1.0, 2.0, 3.0]).unwrap();
        let b = FeatureVector::new(vec!["a".into(), "b".into()], vec![4.0, 5.0]).unwrap();
        let c = FeatureVector::new(vec!["w".into(), "x".into(), "y".into(), "z".into()], vec![0.0; 4]).unwrap();
        let out = assemble(&a, &b, &c).unwrap();
        assert_eq!(out.len(), 9);
        assert_eq!(out, assemble(&a, &b, &c).unwrap());
        assert!(FeatureVector::new(vec!["a".into(), "a".into()], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn empty_graph_has_zero_slots() {
        let g = graph_feature_vector(&KnowledgeGraph::default());
        assert_eq!(g.len(), 11);
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fixed_schema_for_every_object() {
        let e = |id, x| Entity {
            id,
            label: "circle".into(),
            label_index: 0,
            bbox: [x, 0.0, 4.0, 4.0],
            centroid: (x + 2.0, 2.0),
            source: RegionSource::Detection,
        };
        let g = build_graph(
            vec![e(0, 0.0), e(1, 10.0)],
            vec![Relation {
                src: 0,
                dst: 1,
                kind: RelationKind::LeftOf,
            }],
        )
        .unwrap();
        let crop = Image::from_gray_fn(12, 9, |x, y| (x * 20 + y) as u8).unwrap();
        let f = object_features(&crop, &Mask::empty(12, 9), &g).unwrap();
        assert_eq!(f.names, schema());
        assert_eq!(f.len(), 59);
        assert_eq!(f.get("graph.undirected_edges"), Some(1.0));
        assert_eq!(f.get("graph.density"), Some(1.0));
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = FeatureTable::new(vec!["a".into(), "b".into()]);
        t.rows.push(vec![0.1, -2.5e-7]);
        t.rows.push(vec![3.0, 1.0 / 3.0]);
        let p = dir.path().join("f.csv");
        t.write_csv(&p).unwrap();
        assert_eq!(FeatureTable::read_csv(&p).unwrap(), t);
        let lp = dir.path().join("l.csv");
        write_labels_csv(&lp, &[2, 0, 1]).unwrap();
        assert_eq!(read_labels_csv(&lp).unwrap(), vec![2, 0, 1]);
    }
}
