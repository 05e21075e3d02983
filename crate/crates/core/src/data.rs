//! Synthetic multimodal QA: shapes on a grid, questions that relate two
//! shapes spatially, and the color of the referenced shape as the answer.
//!
//! Each grid cell is exactly one patch. The question names a target shape, a
//! relation and an anchor shape; the answer is the color of the target shape
//! adjacent to the anchor in that direction. A second target-shaped object
//! sits on the opposite side of the anchor, so neither the image alone nor
//! the question alone determines the answer. Scenes hold no other objects.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SHAPES: [&str; 3] = ["cube", "sphere", "cylinder"];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
/// Pixel intensity of each color on the single image channel.
pub const COLOR_LEVELS: [f64; 4] = [1.0, 0.75, 0.5, 0.25];
pub const RELATIONS: [&str; 4] = ["left-of", "right-of", "above", "below"];

const TEMPLATES: [&str; 3] = [
    "color of the {t} {r} the {a}",
    "what color is the {t} {r} the {a} ?",
    "the {t} {r} the {a} is which color ?",
];

/// Grid geometry; every cell is one `patch_size × patch_size` patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            rows: 3,
            cols: 3,
            patch_size: 4,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("scene dimensions must be positive".into()));
        }
        if self.patch_size < 2 {
            return Err(Error::Config("patch_size must be at least 2".into()));
        }
        if self.rows.max(self.cols) < 2 {
            return Err(Error::Config("scene needs at least two cells in a row or column".into()));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.rows * self.patch_size, self.cols * self.patch_size, 1]
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    fn relations(&self) -> Vec<usize> {
        let mut out = Vec::new();
        if self.cols >= 2 {
            out.extend([0, 1]);
        }
        if self.rows >= 2 {
            out.extend([2, 3]);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: usize,
    pub color: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image: Tensor,
    pub question: String,
    pub answer: usize,
    pub scene_truth: Vec<SceneObject>,
}

/// Whether pixel `(y, x)` of a cell belongs to the shape's silhouette:
/// solid for cubes, complementary checkerboards for spheres and cylinders.
/// The bottom row of every occupied cell is a color swatch instead.
fn shape_pixel(shape: usize, y: usize, x: usize) -> bool {
    match shape {
        0 => true,
        1 => (y + x).is_multiple_of(2),
        _ => (y + x) % 2 == 1,
    }
}

pub fn render(scene: &SceneSpec, objects: &[SceneObject]) -> Tensor {
    let [h, w, _] = scene.image_shape();
    let p = scene.patch_size;
    let mut data = vec![0.0; h * w];
    for o in objects {
        let at = |y: usize, x: usize| (o.row * p + y) * w + o.col * p + x;
        for y in 0..p - 1 {
            for x in 0..p {
                if shape_pixel(o.shape, y, x) {
                    data[at(y, x)] = COLOR_LEVELS[o.color];
                }
            }
        }
        data[at(p - 1, o.color * p / COLORS.len())] = 1.0;
    }
    Tensor::new(vec![h, w, 1], data).expect("sized")
}

/// Cell offset of the target relative to its anchor.
fn offset(relation: usize) -> (i64, i64) {
    match relation {
        0 => (0, -1),
        1 => (0, 1),
        2 => (-1, 0),
        _ => (1, 0),
    }
}

fn shift(scene: &SceneSpec, row: usize, col: usize, d: (i64, i64)) -> Option<(usize, usize)> {
    let (r, c) = (row as i64 + d.0, col as i64 + d.1);
    (r >= 0 && c >= 0 && (r as usize) < scene.rows && (c as usize) < scene.cols).then_some((r as usize, c as usize))
}

/// Returns `(target shape, relation, anchor shape)` named by a question.
pub fn question_parts(question: &str) -> Option<(usize, usize, usize)> {
    let words: Vec<&str> = question.split_whitespace().collect();
    let shapes: Vec<usize> = words
        .iter()
        .filter_map(|w| SHAPES.iter().position(|s| s == w))
        .collect();
    let rel = words.iter().find_map(|w| RELATIONS.iter().position(|r| r == w))?;
    match shapes.as_slice() {
        [t, a] => Some((*t, rel, *a)),
        _ => None,
    }
}

/// Answer implied by the scene: color of the target-shaped object adjacent
/// to the (unique) anchor in the question's direction.
pub fn derive_answer(scene: &SceneSpec, objects: &[SceneObject], question: &str) -> Option<usize> {
    let (t, rel, a) = question_parts(question)?;
    let mut anchors = objects.iter().filter(|o| o.shape == a);
    let anchor = anchors.next()?;
    if anchors.next().is_some() {
        return None;
    }
    let (r, c) = shift(scene, anchor.row, anchor.col, offset(rel))?;
    objects
        .iter()
        .find(|o| o.row == r && o.col == c && o.shape == t)
        .map(|o| o.color)
}

fn generate_one<R: Rng>(scene: &SceneSpec, answer: usize, rng: &mut R) -> SyntheticSample {
    let rels = scene.relations();
    let rel = *rels.choose(rng).expect("at least one relation");
    let target = rng.random_range(0..SHAPES.len());
    let anchor = (target + rng.random_range(1..SHAPES.len())) % SHAPES.len();
    let d = offset(rel);
    let opposite = (-d.0, -d.1);

    let mut cells: Vec<(usize, usize)> = Vec::new();
    for r in 0..scene.rows {
        for c in 0..scene.cols {
            if shift(scene, r, c, d).is_some() {
                cells.push((r, c));
            }
        }
    }
    // Prefer anchors that leave room for the opposite-side distractor.
    let roomy: Vec<(usize, usize)> = cells
        .iter()
        .copied()
        .filter(|&(r, c)| shift(scene, r, c, opposite).is_some())
        .collect();
    let pool = if roomy.is_empty() { &cells } else { &roomy };
    let (ar, ac) = *pool.choose(rng).expect("grid admits the relation");

    let mut objects = vec![SceneObject {
        shape: anchor,
        color: rng.random_range(0..COLORS.len()),
        row: ar,
        col: ac,
    }];
    let (tr, tc) = shift(scene, ar, ac, d).expect("chosen to fit");
    objects.push(SceneObject {
        shape: target,
        color: answer,
        row: tr,
        col: tc,
    });
    if let Some((dr, dc)) = shift(scene, ar, ac, opposite) {
        objects.push(SceneObject {
            shape: target,
            color: (answer + rng.random_range(1..COLORS.len())) % COLORS.len(),
            row: dr,
            col: dc,
        });
    }
    objects.sort_by_key(|o| (o.row, o.col));

    let template = TEMPLATES.choose(rng).expect("templates");
    let question = template
        .replace("{t}", SHAPES[target])
        .replace("{r}", RELATIONS[rel])
        .replace("{a}", SHAPES[anchor]);
    SyntheticSample {
        image: render(scene, &objects),
        question,
        answer,
        scene_truth: objects,
    }
}

/// Word list of every question the generator can emit, `<unk>` first.
pub fn text_vocab() -> Vec<String> {
    let mut words = BTreeSet::new();
    for t in TEMPLATES {
        for w in t.split_whitespace() {
            if !w.starts_with('{') {
                words.insert(w.to_string());
            }
        }
    }
    words.extend(SHAPES.iter().map(|s| s.to_string()));
    words.extend(RELATIONS.iter().map(|s| s.to_string()));
    std::iter::once("<unk>".to_string()).chain(words).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scene: SceneSpec,
    pub answers: Vec<String>,
    pub text_vocab: Vec<String>,
    pub samples: Vec<SyntheticSample>,
}

/// Warning text when `n` samples cannot be split evenly over the classes.
pub fn balance_warning(n: usize, classes: usize) -> Option<String> {
    (!n.is_multiple_of(classes)).then(|| {
        format!("{n} samples cannot be balanced exactly over {classes} answer classes")
    })
}

/// Deterministic dataset; answers cycle through the colors so every class
/// count is within one of `n / 4`.
pub fn generate_dataset(n: usize, seed: u64, scene: SceneSpec) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    scene.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| generate_one(&scene, i % COLORS.len(), &mut rng))
        .collect();
    Ok(Dataset {
        scene,
        answers: COLORS.iter().map(|s| s.to_string()).collect(),
        text_vocab: text_vocab(),
        samples,
    })
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    question: String,
    answer: usize,
    scene_truth: Vec<SceneObject>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    scene: SceneSpec,
    answers: Vec<String>,
    text_vocab: Vec<String>,
    samples: Vec<SampleRecord>,
}

impl Dataset {
    /// JSON form; images are re-rendered from `scene_truth` on load.
    pub fn to_json(&self) -> String {
        let file = DatasetFile {
            scene: self.scene,
            answers: self.answers.clone(),
            text_vocab: self.text_vocab.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| SampleRecord {
                    question: s.question.clone(),
                    answer: s.answer,
                    scene_truth: s.scene_truth.clone(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("dataset serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: DatasetFile = serde_json::from_str(s)?;
        file.scene.validate()?;
        let samples = file
            .samples
            .into_iter()
            .map(|r| {
                for o in &r.scene_truth {
                    if o.row >= file.scene.rows || o.col >= file.scene.cols || o.shape >= SHAPES.len() || o.color >= COLOR_LEVELS.len() {
                        return Err(Error::Config(format!("scene object {o:?} out of range")));
                    }
                }
                if r.answer >= file.answers.len() {
                    return Err(Error::Index {
                        what: "answer",
                        index: r.answer,
                        len: file.answers.len(),
                    });
                }
                Ok(SyntheticSample {
                    image: render(&file.scene, &r.scene_truth),
                    question: r.question,
                    answer: r.answer,
                    scene_truth: r.scene_truth,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            scene: file.scene,
            answers: file.answers,
            text_vocab: file.text_vocab,
            samples,
        })
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.answers.len()];
        for s in &self.samples {
            counts[s.answer] += 1;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{parse_triples, tokenize, Lexicon};

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_dataset(50, 7, SceneSpec::default()).unwrap();
        let b = generate_dataset(50, 7, SceneSpec::default()).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a, b);
        let c = generate_dataset(50, 8, SceneSpec::default()).unwrap();
        assert_ne!(a.to_json(), c.to_json());
    }

    #[test]
    fn classes_balanced() {
        let d = generate_dataset(1000, 3, SceneSpec::default()).unwrap();
        for c in d.class_counts() {
            assert!((225..=275).contains(&c), "{c}");
        }
    }

    #[test]
    fn answers_follow_from_scene() {
        let scene = SceneSpec::default();
        let d = generate_dataset(400, 11, scene).unwrap();
        for s in &d.samples {
            assert_eq!(derive_answer(&scene, &s.scene_truth, &s.question), Some(s.answer), "{}", s.question);
        }
    }

    #[test]
    fn questions_parse_to_triples() {
        let lex = Lexicon::default();
        let d = generate_dataset(300, 5, SceneSpec::default()).unwrap();
        for s in &d.samples {
            assert!(!parse_triples(&tokenize(&s.question, &lex)).is_empty(), "{}", s.question);
        }
    }

    #[test]
    fn vocab_covers_questions() {
        let d = generate_dataset(300, 5, SceneSpec::default()).unwrap();
        for s in &d.samples {
            for w in s.question.split_whitespace() {
                assert!(d.text_vocab.iter().any(|v| v == w), "{w}");
            }
        }
    }

    #[test]
    fn both_modalities_needed() {
        // The distractor means the image alone is ambiguous: the other side of
        // the anchor also holds a target-shaped object of a different color.
        let scene = SceneSpec::default();
        let d = generate_dataset(200, 9, scene).unwrap();
        for s in &d.samples {
            let (t, rel, a) = question_parts(&s.question).unwrap();
            let flipped = s.question.replace(RELATIONS[rel], RELATIONS[rel ^ 1]);
            let other = derive_answer(&scene, &s.scene_truth, &flipped);
            assert!(other.is_some_and(|o| o != s.answer), "{} / {:?}", s.question, (t, a));
        }
    }

    #[test]
    fn single_row_scene_uses_horizontal_relations() {
        let scene = SceneSpec {
            rows: 1,
            cols: 4,
            patch_size: 2,
        };
        let d = generate_dataset(40, 1, scene).unwrap();
        for s in &d.samples {
            let (_, rel, _) = question_parts(&s.question).unwrap();
            assert!(rel < 2);
            assert_eq!(s.image.shape(), &[2, 8, 1]);
        }
    }

    #[test]
    fn json_round_trip_rerenders_images() {
        let d = generate_dataset(20, 2, SceneSpec::default()).unwrap();
        assert_eq!(Dataset::from_json(&d.to_json()).unwrap(), d);
    }

    #[test]
    fn tiny_dataset_warns() {
        assert!(balance_warning(3, 4).is_some());
        assert!(balance_warning(8, 4).is_none());
        assert!(generate_dataset(0, 1, SceneSpec::default()).is_err());
    }
}
