//! Synthetic tabletop scenes: a fixed robot-arm silhouette at the bottom
//! edge plus one to three coloured shapes, an instruction naming one of them,
//! and the action `(x, y, grip)` that reaches it.
//!
//! Two suites ship with disjoint colour palettes so patches can be carried
//! from one to the other. On disk a dataset is a directory holding
//! `index.json` and one `EDT1` tensor per image under `images/`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::encoders::SceneSample;
use crate::error::{EdpaError, Result};
use crate::parallel;
use crate::patching::Image;
use crate::rng;
use crate::tensor::{write_file, Tensor};

/// Every word an instruction can use; token id = position.
pub const WORDS: [&str; 17] = [
    "<pad>", "pick", "push", "up", "the", "square", "circle", "triangle", "red", "green", "blue", "yellow", "cyan",
    "magenta", "orange", "purple", "to",
];

pub fn token_id(word: &str) -> Option<usize> {
    WORDS.iter().position(|w| *w == word)
}

pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|w| token_id(w).ok_or_else(|| EdpaError::Config(format!("unknown word {w:?}"))))
        .collect()
}

macro_rules! named_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = EdpaError;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(EdpaError::Config(format!(
                        concat!("unknown ", stringify!($name), " {:?}"), other
                    ))),
                }
            }
        }
    };
}

named_enum!(ShapeKind { Square => "square", Circle => "circle", Triangle => "triangle" });
named_enum!(Color {
    Red => "red", Green => "green", Blue => "blue", Yellow => "yellow",
    Cyan => "cyan", Magenta => "magenta", Orange => "orange", Purple => "purple",
});
named_enum!(Verb { Pick => "pick", Push => "push" });

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.90, 0.10, 0.10],
            Color::Green => [0.10, 0.75, 0.20],
            Color::Blue => [0.10, 0.20, 0.90],
            Color::Yellow => [0.95, 0.90, 0.10],
            Color::Cyan => [0.10, 0.85, 0.90],
            Color::Magenta => [0.90, 0.10, 0.85],
            Color::Orange => [1.00, 0.55, 0.05],
            Color::Purple => [0.50, 0.15, 0.70],
        }
    }
}

impl Verb {
    /// Gripper command: close to pick, open to push.
    pub fn grip(self) -> f64 {
        match self {
            Verb::Pick => 1.0,
            Verb::Push => -1.0,
        }
    }

    fn phrase(self) -> &'static str {
        match self {
            Verb::Pick => "pick up the",
            Verb::Push => "push the",
        }
    }
}

pub const PALETTE_A: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
pub const PALETTE_B: [Color; 4] = [Color::Cyan, Color::Magenta, Color::Orange, Color::Purple];

pub fn suite_palette(suite: &str) -> Option<&'static [Color]> {
    match suite {
        "A" | "a" => Some(&PALETTE_A),
        "B" | "b" => Some(&PALETTE_B),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub suite: String,
    pub samples: usize,
    pub shapes: Vec<ShapeKind>,
    pub colors: Vec<Color>,
    pub verbs: Vec<Verb>,
    pub height: usize,
    pub width: usize,
    pub max_objects: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn suite(name: &str, samples: usize, seed: u64) -> Result<Self> {
        let colors = suite_palette(name)
            .ok_or_else(|| EdpaError::Config(format!("unknown suite {name:?}; expected A or B")))?
            .to_vec();
        Ok(Self {
            suite: name.to_uppercase(),
            samples,
            shapes: ShapeKind::ALL.to_vec(),
            colors,
            verbs: Verb::ALL.to_vec(),
            height: 64,
            width: 64,
            max_objects: 3,
            seed,
        })
    }

    /// Builds a spec from `key=value` lines. `suite` picks the default
    /// palette; `samples`, `seed`, `height`, `width`, `max_objects`,
    /// `shapes`, `colors` and `verbs` override.
    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        cfg.reject_unknown(&[
            "suite",
            "samples",
            "seed",
            "height",
            "width",
            "max_objects",
            "shapes",
            "colors",
            "verbs",
        ])?;
        let suite = cfg.raw("suite").unwrap_or("A");
        let mut spec = Self::suite(suite, cfg.get_or("samples", 100)?, cfg.get_or("seed", 0)?)?;
        spec.height = cfg.get_or("height", spec.height)?;
        spec.width = cfg.get_or("width", spec.width)?;
        spec.max_objects = cfg.get_or("max_objects", spec.max_objects)?;
        if let Some(v) = cfg.list("shapes") {
            spec.shapes = v.iter().map(|s| s.parse()).collect::<Result<_>>()?;
        }
        if let Some(v) = cfg.list("colors") {
            spec.colors = v.iter().map(|s| s.parse()).collect::<Result<_>>()?;
        }
        if let Some(v) = cfg.list("verbs") {
            spec.verbs = v.iter().map(|s| s.parse()).collect::<Result<_>>()?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(EdpaError::Config("sample count must be at least 1".into()));
        }
        if self.shapes.is_empty() || self.colors.is_empty() {
            return Err(EdpaError::Config("object vocabulary (shapes x colors) is empty".into()));
        }
        if self.verbs.is_empty() {
            return Err(EdpaError::Config("no instruction verbs".into()));
        }
        if self.max_objects == 0 {
            return Err(EdpaError::Config("max_objects must be at least 1".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(EdpaError::Config(format!(
                "image {}x{} too small",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: Color,
    /// Centre in pixel coordinates (pixel `(y, x)` covers `[x, x+1)`).
    pub cx: f64,
    pub cy: f64,
    /// Half-extent.
    pub size: f64,
}

impl SceneObject {
    fn covers(&self, px: f64, py: f64) -> bool {
        let (dx, dy, r) = (px - self.cx, py - self.cy, self.size);
        match self.shape {
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            // apex at the top, base at the bottom
            ShapeKind::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }

    fn disjoint(&self, other: &SceneObject) -> bool {
        let gap = self.size + other.size + 2.0;
        (self.cx - other.cx).abs() > gap || (self.cy - other.cy).abs() > gap
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: usize,
    pub image: Image,
    pub instruction: String,
    pub tokens: Vec<usize>,
    pub verb: Verb,
    pub objects: Vec<SceneObject>,
    pub target: usize,
    pub action: Vec<f64>,
}

impl SceneRecord {
    pub fn sample(&self) -> SceneSample {
        SceneSample {
            image: self.image.clone(),
            tokens: self.tokens.clone(),
            action: self.action.clone(),
        }
    }
}

/// `(2 cx / W - 1, 2 cy / H - 1, grip)`: image centre maps to `(0, 0)`.
pub fn target_action(obj: &SceneObject, verb: Verb, height: usize, width: usize) -> Vec<f64> {
    vec![
        2.0 * obj.cx / width as f64 - 1.0,
        2.0 * obj.cy / height as f64 - 1.0,
        verb.grip(),
    ]
}

const BACKGROUND: [f64; 3] = [0.78, 0.74, 0.68];
const ARM: [f64; 3] = [0.25, 0.25, 0.28];
const PLACEMENT_ATTEMPTS: usize = 200;

/// Arm outline for a 64 x 64 frame, scaled to the actual size.
fn arm_polygon(height: usize, width: usize) -> Vec<(f64, f64)> {
    let (sx, sy) = (width as f64 / 64.0, height as f64 / 64.0);
    [
        (24.0, 64.0),
        (40.0, 64.0),
        (37.0, 54.0),
        (36.0, 49.0),
        (28.0, 49.0),
        (27.0, 54.0),
    ]
    .iter()
    .map(|&(x, y)| (x * sx, y * sy))
    .collect()
}

/// Even-odd rule.
fn inside_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Top of the arm: objects stay strictly above it.
fn arm_top(height: usize) -> f64 {
    49.0 * height as f64 / 64.0
}

fn place_objects<R: Rng>(rng: &mut R, spec: &DatasetSpec, id: usize) -> Result<Vec<SceneObject>> {
    let count = rng.gen_range(1..=spec.max_objects);
    let scale = spec.width.min(spec.height) as f64 / 64.0;
    let (lo, hi) = (4.0 * scale, 7.0 * scale);
    let target_kind = (*spec.shapes.choose(rng).unwrap(), *spec.colors.choose(rng).unwrap());
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for k in 0..count {
        let (shape, color) = if k == 0 {
            target_kind
        } else {
            // distractors never share the target's (shape, colour)
            let mut pick;
            let mut tries = 0;
            loop {
                pick = (*spec.shapes.choose(rng).unwrap(), *spec.colors.choose(rng).unwrap());
                tries += 1;
                if pick != target_kind || tries > PLACEMENT_ATTEMPTS {
                    break;
                }
            }
            if pick == target_kind {
                // single-item vocabulary: no distinct distractor exists
                break;
            }
            pick
        };
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let size = rng.gen_range(lo..=hi).round().max(1.0);
            let (xmin, xmax) = (size + 1.0, spec.width as f64 - size - 1.0);
            let (ymin, ymax) = (size + 1.0, arm_top(spec.height) - size - 1.0);
            if xmin > xmax || ymin > ymax {
                continue;
            }
            let obj = SceneObject {
                shape,
                color,
                cx: rng.gen_range(xmin..=xmax).round(),
                cy: rng.gen_range(ymin..=ymax).round(),
                size,
            };
            if objects.iter().all(|o| o.disjoint(&obj)) {
                placed = Some(obj);
                break;
            }
        }
        match placed {
            Some(o) => objects.push(o),
            None => {
                return Err(EdpaError::Config(format!(
                    "record {id}: could not place {shape} {color} after {PLACEMENT_ATTEMPTS} attempts"
                )))
            }
        }
    }
    Ok(objects)
}

fn render(spec: &DatasetSpec, objects: &[SceneObject], noise: &[f64]) -> Result<Image> {
    let (h, w) = (spec.height, spec.width);
    let arm = arm_polygon(h, w);
    let mut data = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut rgb = BACKGROUND;
            if inside_polygon(&arm, px, py) {
                rgb = ARM;
            }
            for o in objects {
                if o.covers(px, py) {
                    rgb = o.color.rgb();
                }
            }
            let at = (y * w + x) * 3;
            for c in 0..3 {
                data[at + c] = (rgb[c] + noise[at + c]).clamp(0.0, 1.0);
            }
        }
    }
    Image::new(Tensor::new(vec![h, w, 3], data)?)
}

fn generate_record(spec: &DatasetSpec, id: usize) -> Result<SceneRecord> {
    let mut rng = rng::substream(spec.seed, id as u64);
    let objects = place_objects(&mut rng, spec, id)?;
    let verb = *spec.verbs.choose(&mut rng).unwrap();
    let noise: Vec<f64> = (0..spec.height * spec.width * 3)
        .map(|_| rng.gen_range(-0.03..0.03))
        .collect();
    // the target is listed first during placement; shuffle the draw order
    // so it is not always painted underneath
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.shuffle(&mut rng);
    let objects: Vec<SceneObject> = order.iter().map(|&k| objects[k]).collect();
    let target = order.iter().position(|&k| k == 0).unwrap();
    let t = objects[target];
    let instruction = format!("{} {} {}", verb.phrase(), t.color, t.shape);
    Ok(SceneRecord {
        id,
        image: render(spec, &objects, &noise)?,
        tokens: tokenize(&instruction)?,
        instruction,
        verb,
        action: target_action(&t, verb, spec.height, spec.width),
        objects,
        target,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub records: Vec<SceneRecord>,
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let records = parallel::map_range(spec.samples, |id| generate_record(spec, id))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        records,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexRecord {
    id: usize,
    image: String,
    instruction: String,
    tokens: Vec<usize>,
    verb: Verb,
    target: usize,
    action: Vec<f64>,
    objects: Vec<SceneObject>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    format: String,
    spec: DatasetSpec,
    records: Vec<IndexRecord>,
}

const INDEX_FORMAT: &str = "edpa-dataset/1";
pub const INDEX_FILE: &str = "index.json";

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn samples(&self) -> Vec<SceneSample> {
        self.records.iter().map(SceneRecord::sample).collect()
    }

    /// First `n` records and the rest, as samples.
    pub fn split(&self, n: usize) -> (Vec<SceneSample>, Vec<SceneSample>) {
        let all = self.samples();
        let n = n.min(all.len());
        let rest = all[n..].to_vec();
        let mut head = all;
        head.truncate(n);
        (head, rest)
    }

    fn image_name(id: usize) -> String {
        format!("images/{id:06}.edt1")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let index = Index {
            format: INDEX_FORMAT.into(),
            spec: self.spec.clone(),
            records: self
                .records
                .iter()
                .map(|r| IndexRecord {
                    id: r.id,
                    image: Self::image_name(r.id),
                    instruction: r.instruction.clone(),
                    tokens: r.tokens.clone(),
                    verb: r.verb,
                    target: r.target,
                    action: r.action.clone(),
                    objects: r.objects.clone(),
                })
                .collect(),
        };
        for r in &self.records {
            r.image.tensor().save(&dir.join(Self::image_name(r.id)))?;
        }
        let mut json = serde_json::to_vec_pretty(&index).expect("index serialises");
        json.push(b'\n');
        write_file(&dir.join(INDEX_FILE), &json)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        if !index_path.is_file() {
            return Err(EdpaError::format(
                dir.display().to_string(),
                format!("no index: {INDEX_FILE} not found"),
            ));
        }
        let text = std::fs::read(&index_path).map_err(|e| EdpaError::io(&index_path, e))?;
        let index: Index = serde_json::from_slice(&text)
            .map_err(|e| EdpaError::format(index_path.display().to_string(), e.to_string()))?;
        if index.format != INDEX_FORMAT {
            return Err(EdpaError::format(
                index_path.display().to_string(),
                format!("unsupported format {:?}", index.format),
            ));
        }
        let spec = index.spec;
        let records = index
            .records
            .into_iter()
            .map(|r| {
                let path: PathBuf = dir.join(&r.image);
                let context = format!("record {} ({})", r.id, path.display());
                let bytes = std::fs::read(&path).map_err(|e| EdpaError::io(&path, e))?;
                let t = Tensor::from_edt1(&bytes, &context)?;
                if t.shape() != [spec.height, spec.width, 3] {
                    return Err(EdpaError::format(context, format!("image shape {:?}", t.shape())));
                }
                let image = Image::new(t).map_err(|e| EdpaError::format(context.clone(), e.to_string()))?;
                if r.target >= r.objects.len() {
                    return Err(EdpaError::format(context, format!("target {} out of range", r.target)));
                }
                Ok(SceneRecord {
                    id: r.id,
                    image,
                    instruction: r.instruction,
                    tokens: r.tokens,
                    verb: r.verb,
                    objects: r.objects,
                    target: r.target,
                    action: r.action,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(samples: usize) -> DatasetSpec {
        DatasetSpec::suite("A", samples, 7).unwrap()
    }

    #[test]
    fn generates_requested_count_in_range() {
        let ds = generate_dataset(&small_spec(100)).unwrap();
        assert_eq!(ds.len(), 100);
        for r in &ds.records {
            assert!(r.image.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!((1..=3).contains(&r.objects.len()));
            assert!(r.tokens.len() <= 8);
        }
    }

    #[test]
    fn actions_rederive_from_metadata() {
        let ds = generate_dataset(&small_spec(50)).unwrap();
        for r in &ds.records {
            let t = &r.objects[r.target];
            assert_eq!(r.action, target_action(t, r.verb, 64, 64));
            assert!(r.action.iter().all(|a| (-1.0..=1.0).contains(a)));
            assert!(r.instruction.ends_with(&format!("{} {}", t.color, t.shape)));
            // the instruction is unambiguous
            let same = r
                .objects
                .iter()
                .filter(|o| o.color == t.color && o.shape == t.shape)
                .count();
            assert_eq!(same, 1);
            for (i, a) in r.objects.iter().enumerate() {
                for b in &r.objects[i + 1..] {
                    assert!(a.disjoint(b));
                }
            }
        }
    }

    #[test]
    fn centre_target_maps_to_origin() {
        let o = SceneObject {
            shape: ShapeKind::Circle,
            color: Color::Red,
            cx: 32.0,
            cy: 32.0,
            size: 5.0,
        };
        assert_eq!(target_action(&o, Verb::Push, 64, 64), vec![0.0, 0.0, -1.0]);
    }

    #[test]
    fn palettes_are_disjoint() {
        assert!(PALETTE_A.iter().all(|c| !PALETTE_B.contains(c)));
    }

    #[test]
    fn arm_is_drawn_at_bottom() {
        let ds = generate_dataset(&small_spec(3)).unwrap();
        for r in &ds.records {
            // bottom-centre pixel is arm grey (up to noise)
            assert!((r.image.pixel(63, 32, 0) - ARM[0]).abs() <= 0.031);
            assert!((r.image.pixel(63, 2, 0) - BACKGROUND[0]).abs() <= 0.031);
        }
    }

    #[test]
    fn unplaceable_objects_are_rejected() {
        let mut spec = small_spec(5);
        spec.height = 8;
        spec.width = 8;
        let err = generate_dataset(&spec).unwrap_err();
        assert!(err.to_string().contains("could not place"), "{err}");
    }

    #[test]
    fn spec_from_config() {
        let cfg = KvConfig::parse("suite=B\nsamples=4\nseed=3\nshapes=circle\n").unwrap();
        let spec = DatasetSpec::from_config(&cfg).unwrap();
        assert_eq!(spec.colors, PALETTE_B.to_vec());
        assert_eq!(spec.shapes, vec![ShapeKind::Circle]);
        assert!(DatasetSpec::from_config(&KvConfig::parse("samples=0").unwrap()).is_err());
        assert!(DatasetSpec::from_config(&KvConfig::parse("colors=").unwrap()).is_err());
        assert!(DatasetSpec::from_config(&KvConfig::parse("bogus=1").unwrap()).is_err());
    }

    #[test]
    fn tokenizer_round_trip() {
        let t = tokenize("pick up the red square").unwrap();
        assert_eq!(t, vec![1, 3, 4, 8, 5]);
        assert!(tokenize("grab it").is_err());
    }
}
