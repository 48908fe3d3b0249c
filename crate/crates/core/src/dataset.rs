//! Annotated image collections: COCO-style ingestion and export, a seeded
//! generator of captioned shape scenes, and train/test splitting.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Rect;
use crate::imgproc::{to_u8, Image};

pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const COLORS: [&str; 3] = ["red", "green", "blue"];
pub const COUNT_WORDS: [&str; 3] = ["one", "two", "three"];
pub const SYNTH_SIZE: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<String>,
}

impl ObjectAnnotation {
    pub fn rect(&self) -> Rect {
        Rect::new(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub question: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Annotation {
    Object(ObjectAnnotation),
    Caption(CaptionAnnotation),
}

/// On-disk annotation document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    #[serde(default)]
    images: Vec<ImageRecord>,
    #[serde(default)]
    annotations: Vec<Annotation>,
    #[serde(default)]
    categories: Vec<Category>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    questions: Vec<QuestionAnnotation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub record: ImageRecord,
    pub image: Image,
    pub objects: Vec<ObjectAnnotation>,
    pub captions: Vec<CaptionAnnotation>,
    pub questions: Vec<QuestionAnnotation>,
}

impl Sample {
    /// Class index (position in the category list) of every object.
    pub fn class_indices(&self, categories: &[Category]) -> Vec<usize> {
        self.objects
            .iter()
            .map(|o| {
                categories
                    .iter()
                    .position(|c| c.id == o.category_id)
                    .expect("validated category")
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub categories: Vec<Category>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn category_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    fn to_coco(&self) -> CocoFile {
        let mut f = CocoFile {
            categories: self.categories.clone(),
            ..CocoFile::default()
        };
        for s in &self.samples {
            f.images.push(s.record.clone());
            f.annotations.extend(s.objects.iter().cloned().map(Annotation::Object));
            f.annotations
                .extend(s.captions.iter().cloned().map(Annotation::Caption));
            f.questions.extend(s.questions.iter().cloned());
        }
        f
    }

    /// Writes `annotations.json` and `images/` under `dir`.
    pub fn export(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for s in &self.samples {
            s.image.save(dir.join("images").join(&s.record.file_name))?;
        }
        crate::io::write_json(dir.join("annotations.json"), &self.to_coco())
    }

    /// Reads a directory written by [`Dataset::export`].
    pub fn load_dir(dir: impl AsRef<Path>, limit: Option<usize>) -> Result<Self> {
        let dir = dir.as_ref();
        ingest_coco_subset(
            dir.join("annotations.json"),
            dir.join("images"),
            limit.unwrap_or(usize::MAX),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            categories: self.categories.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Disjoint seeded split with `round(train_fraction * n)` training samples.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        let (train, test) = split_indices(self.len(), train_fraction, seed)?;
        Ok((self.subset(&train), self.subset(&test)))
    }
}

pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::invalid("train fraction must lie in [0, 1]"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = (train_fraction * n as f64).round() as usize;
    let test = idx.split_off(k);
    Ok((idx, test))
}

fn validate(file: &CocoFile) -> Result<()> {
    let mut problems = Vec::new();
    let mut image_ids = HashSet::new();
    for im in &file.images {
        if !image_ids.insert(im.id) {
            problems.push(format!("duplicate image id {}", im.id));
        }
    }
    let cat_ids: HashSet<u64> = file.categories.iter().map(|c| c.id).collect();
    if cat_ids.len() != file.categories.len() {
        problems.push("duplicate category id".to_string());
    }
    let mut dangling = BTreeSet::new();
    for a in &file.annotations {
        let (id, image_id) = match a {
            Annotation::Object(o) => {
                if !cat_ids.contains(&o.category_id) {
                    problems.push(format!("annotation {} has unknown category {}", o.id, o.category_id));
                }
                if o.bbox.iter().any(|v| !v.is_finite()) || o.bbox[2] <= 0.0 || o.bbox[3] <= 0.0 {
                    problems.push(format!("annotation {} has a degenerate bbox", o.id));
                }
                (o.id, o.image_id)
            }
            Annotation::Caption(c) => (c.id, c.image_id),
        };
        if !image_ids.contains(&image_id) {
            dangling.insert((id, image_id));
        }
    }
    for q in &file.questions {
        if !image_ids.contains(&q.image_id) {
            dangling.insert((q.id, q.image_id));
        }
    }
    for (id, image_id) in dangling {
        problems.push(format!("annotation {id} references missing image id {image_id}"));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(problems.join("; ")))
    }
}

/// Loads at most `limit` images (in file order) with their annotations.
pub fn ingest_coco_subset(
    annotation_file: impl AsRef<Path>,
    image_dir: impl AsRef<Path>,
    limit: usize,
) -> Result<Dataset> {
    let path = annotation_file.as_ref();
    let text = crate::io::read_string(path)?;
    let file: CocoFile = crate::io::parse_json(&path.display().to_string(), &text)?;
    validate(&file)?;
    let mut samples: Vec<Sample> = Vec::new();
    let mut index = HashMap::new();
    for rec in file.images.iter().take(limit) {
        let image = Image::load(image_dir.as_ref().join(&rec.file_name))?;
        if image.width() != rec.width || image.height() != rec.height {
            return Err(Error::Validation(format!(
                "image {} is {}x{}, annotation says {}x{}",
                rec.id,
                image.width(),
                image.height(),
                rec.width,
                rec.height
            )));
        }
        index.insert(rec.id, samples.len());
        samples.push(Sample {
            record: rec.clone(),
            image,
            objects: Vec::new(),
            captions: Vec::new(),
            questions: Vec::new(),
        });
    }
    for a in file.annotations {
        match a {
            Annotation::Object(o) => {
                if let Some(&i) = index.get(&o.image_id) {
                    samples[i].objects.push(o);
                }
            }
            Annotation::Caption(c) => {
                if let Some(&i) = index.get(&c.image_id) {
                    samples[i].captions.push(c);
                }
            }
        }
    }
    for q in file.questions {
        if let Some(&i) = index.get(&q.image_id) {
            samples[i].questions.push(q);
        }
    }
    Ok(Dataset {
        categories: file.categories,
        samples,
    })
}

fn shape_contains(shape: usize, size: usize, px: usize, py: usize) -> bool {
    let s = size as f64;
    let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
    match shape {
        0 => {
            let r = s / 2.0;
            (x - r).powi(2) + (y - r).powi(2) <= r * r
        }
        1 => true,
        // Apex at top centre, base along the bottom edge.
        _ => (x - s / 2.0).abs() <= y / 2.0,
    }
}

fn synth_color(color: usize, rng: &mut impl Rng) -> [u8; 3] {
    let mut c = [0u8; 3];
    for (k, v) in c.iter_mut().enumerate() {
        *v = if k == color {
            rng.random_range(190..=235)
        } else {
            rng.random_range(20..=60)
        };
    }
    c
}

/// Template caption listing objects from left to right.
pub fn template_caption(objects: &[(usize, usize, f64)]) -> String {
    let mut sorted: Vec<&(usize, usize, f64)> = objects.iter().collect();
    sorted.sort_by(|a, b| a.2.total_cmp(&b.2));
    sorted
        .iter()
        .map(|(shape, color, _)| format!("a {} {}", COLORS[*color], SHAPES[*shape]))
        .collect::<Vec<_>>()
        .join(" left of ")
}

/// Questions answerable from the scene: the colour of every shape that
/// appears once, the shape of every colour that appears once, and the count.
pub fn template_questions(objects: &[(usize, usize, f64)]) -> Vec<(String, String)> {
    let mut qa = Vec::new();
    for (shape, name) in SHAPES.iter().enumerate() {
        let hits: Vec<_> = objects.iter().filter(|o| o.0 == shape).collect();
        if hits.len() == 1 {
            qa.push((format!("what color is the {name}"), COLORS[hits[0].1].to_string()));
        }
    }
    for (color, name) in COLORS.iter().enumerate() {
        let hits: Vec<_> = objects.iter().filter(|o| o.1 == color).collect();
        if hits.len() == 1 {
            qa.push((
                format!("what shape is the {name} object"),
                SHAPES[hits[0].0].to_string(),
            ));
        }
    }
    qa.push((
        "how many shapes are there".to_string(),
        COUNT_WORDS[objects.len() - 1].to_string(),
    ));
    qa
}

/// `n` scenes of one to three coloured shapes on a noisy light background.
///
/// Objects occupy disjoint column ranges, so "left of" is unambiguous, and
/// every box is the tight extent of its rendered pixels.
pub fn generate_synthetic(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("synthetic dataset needs at least one image"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let categories = SHAPES
        .iter()
        .enumerate()
        .map(|(i, s)| Category {
            id: i as u64 + 1,
            name: s.to_string(),
        })
        .collect();
    let (mut ann_id, mut q_id) = (1u64, 1u64);
    let mut samples = Vec::with_capacity(n);
    for k in 0..n {
        let id = k as u64 + 1;
        let side = SYNTH_SIZE;
        let bg: i32 = rng.random_range(190..=230);
        let mut data = Vec::with_capacity(side * side * 3);
        for _ in 0..side * side {
            let v = to_u8((bg + rng.random_range(-12..=12)) as f64);
            data.extend_from_slice(&[v, v, v]);
        }
        let mut img = Image::new(side, side, 3, data)?;
        let want = rng.random_range(1..=3usize);
        let mut placed: Vec<(usize, usize, usize)> = Vec::new();
        for _ in 0..want {
            for _ in 0..200 {
                let size = rng.random_range(12..=20usize);
                let x = rng.random_range(1..=side - size - 1);
                let y = rng.random_range(1..=side - size - 1);
                let clear = placed.iter().all(|&(ox, _, os)| x + size + 2 <= ox || ox + os + 2 <= x);
                if clear {
                    placed.push((x, y, size));
                    break;
                }
            }
        }
        let mut objects = Vec::new();
        let mut scene = Vec::new();
        for &(x0, y0, size) in &placed {
            let shape = rng.random_range(0..SHAPES.len());
            let color = rng.random_range(0..COLORS.len());
            let rgb = synth_color(color, &mut rng);
            let (mut lo_x, mut lo_y, mut hi_x, mut hi_y) = (usize::MAX, usize::MAX, 0, 0);
            for py in 0..size {
                for px in 0..size {
                    if shape_contains(shape, size, px, py) {
                        for (c, &v) in rgb.iter().enumerate() {
                            img.set(x0 + px, y0 + py, c, v);
                        }
                        lo_x = lo_x.min(x0 + px);
                        lo_y = lo_y.min(y0 + py);
                        hi_x = hi_x.max(x0 + px);
                        hi_y = hi_y.max(y0 + py);
                    }
                }
            }
            let bbox = [
                lo_x as f64,
                lo_y as f64,
                (hi_x - lo_x + 1) as f64,
                (hi_y - lo_y + 1) as f64,
            ];
            scene.push((shape, color, bbox[0] + bbox[2] / 2.0));
            objects.push(ObjectAnnotation {
                id: ann_id,
                image_id: id,
                category_id: shape as u64 + 1,
                bbox,
                color: Some(COLORS[color].to_string()),
            });
            ann_id += 1;
        }
        let captions = vec![CaptionAnnotation {
            id: ann_id,
            image_id: id,
            caption: template_caption(&scene),
        }];
        ann_id += 1;
        let questions = template_questions(&scene)
            .into_iter()
            .map(|(question, answer)| {
                q_id += 1;
                QuestionAnnotation {
                    id: q_id - 1,
                    image_id: id,
                    question,
                    answer,
                }
            })
            .collect();
        samples.push(Sample {
            record: ImageRecord {
                id,
                file_name: format!("synth_{id:05}.png"),
                width: side,
                height: side,
            },
            image: img,
            objects,
            captions,
            questions,
        });
    }
    Ok(Dataset { categories, samples })
}

/// Gray scenes squeezed into a narrow intensity band.
pub fn generate_low_contrast(n: usize, seed: u64) -> Result<Vec<Image>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let side = SYNTH_SIZE;
            let base: f64 = rng.random_range(100.0..140.0);
            let span: f64 = rng.random_range(8.0..20.0);
            let (cx, cy, r) = (
                rng.random_range(16.0..48.0),
                rng.random_range(16.0..48.0),
                rng.random_range(6.0..14.0),
            );
            let noise: Vec<f64> = (0..side * side).map(|_| rng.random_range(-2.0..2.0)).collect();
            Image::from_gray_fn(side, side, |x, y| {
                let (xf, yf) = (x as f64, y as f64);
                let ramp = span * 0.5 * (xf + yf) / (2.0 * side as f64);
                let blob = if (xf - cx).powi(2) + (yf - cy).powi(2) <= r * r {
                    span * 0.5
                } else {
                    0.0
                };
                to_u8(base + ramp + blob + noise[y * side + x])
            })
        })
        .collect()
}

/// Replaces a `fraction` of pixels with 0 or 255 in every channel.
pub fn salt_and_pepper(img: &Image, fraction: f64, rng: &mut impl Rng) -> Image {
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            if rng.random::<f64>() < fraction {
                let v = if rng.random::<bool>() { 255 } else { 0 };
                for c in 0..img.channels() {
                    out.set(x, y, c, v);
                }
            }
        }
    }
    out
}
