//! Deterministic synthetic referring audio-visual benchmark.
//!
//! A scene is a short clip of coloured block shapes moving on a black canvas.
//! Each colour has its own sound class, so the audio track says *which colour*
//! is sounding without saying *where*. Referring expressions come from four
//! templates:
//!
//! * audio-dominant: "the object making a sound" (only the audio resolves it)
//! * visual-dominant: "the red square" (the colour word resolves it)
//! * joint: "the sounding warm object" (family word AND audio are both needed)
//! * null: any of the above with no matching object present
//!
//! Frozen encoders are fixed-seed random projections standing in for pretrained
//! backbones; they are never trained.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_array, read_json, write_array, write_json, Array};
use crate::nn::fnv1a;

/// Number of block cells along each canvas side.
pub const GRID_CELLS: usize = 16;
pub const NUM_COLORS: usize = 6;
pub const NUM_SOUNDS: usize = NUM_COLORS;
pub const MAX_TEXT_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Orange,
    Yellow,
    Green,
    Cyan,
    Blue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Warm,
    Cool,
}

impl Family {
    pub fn word(self) -> &'static str {
        match self {
            Family::Warm => "warm",
            Family::Cool => "cool",
        }
    }

    pub fn members(self) -> [Color; 3] {
        match self {
            Family::Warm => [Color::Red, Color::Orange, Color::Yellow],
            Family::Cool => [Color::Green, Color::Cyan, Color::Blue],
        }
    }

    fn other(self) -> Family {
        match self {
            Family::Warm => Family::Cool,
            Family::Cool => Family::Warm,
        }
    }
}

impl Color {
    pub const ALL: [Color; NUM_COLORS] = [
        Color::Red,
        Color::Orange,
        Color::Yellow,
        Color::Green,
        Color::Cyan,
        Color::Blue,
    ];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.1, 0.1],
            Color::Orange => [1.0, 0.55, 0.0],
            Color::Yellow => [0.95, 0.95, 0.1],
            Color::Green => [0.1, 0.85, 0.2],
            Color::Cyan => [0.1, 0.9, 0.9],
            Color::Blue => [0.15, 0.25, 1.0],
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Orange => "orange",
            Color::Yellow => "yellow",
            Color::Green => "green",
            Color::Cyan => "cyan",
            Color::Blue => "blue",
        }
    }

    pub fn family(self) -> Family {
        match self {
            Color::Red | Color::Orange | Color::Yellow => Family::Warm,
            _ => Family::Cool,
        }
    }

    /// Each colour has exactly one sound class.
    pub fn sound(self) -> usize {
        self as usize
    }
}

/// Block shapes built from whole grid cells, so object boundaries align with
/// the finest visual patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    WideBar,
    TallBar,
    Cross,
    Ell,
    Tee,
}

impl ShapeKind {
    pub const SEEN: [ShapeKind; 4] = [
        ShapeKind::Square,
        ShapeKind::WideBar,
        ShapeKind::TallBar,
        ShapeKind::Cross,
    ];
    pub const UNSEEN: [ShapeKind; 2] = [ShapeKind::Ell, ShapeKind::Tee];

    /// Occupied `(row, col)` cells.
    pub fn cells(self) -> &'static [(usize, usize)] {
        match self {
            ShapeKind::Square => &[
                (0, 0),
                (0, 1),
                (0, 2),
                (1, 0),
                (1, 1),
                (1, 2),
                (2, 0),
                (2, 1),
                (2, 2),
            ],
            ShapeKind::WideBar => &[
                (0, 0),
                (0, 1),
                (0, 2),
                (0, 3),
                (1, 0),
                (1, 1),
                (1, 2),
                (1, 3),
            ],
            ShapeKind::TallBar => &[
                (0, 0),
                (1, 0),
                (2, 0),
                (3, 0),
                (0, 1),
                (1, 1),
                (2, 1),
                (3, 1),
            ],
            ShapeKind::Cross => &[(0, 1), (1, 0), (1, 1), (1, 2), (2, 1)],
            ShapeKind::Ell => &[(0, 0), (1, 0), (2, 0), (2, 1), (2, 2)],
            ShapeKind::Tee => &[(0, 0), (0, 1), (0, 2), (1, 1), (2, 1)],
        }
    }

    pub fn extent(self) -> (usize, usize) {
        let cells = self.cells();
        let h = cells.iter().map(|c| c.0).max().unwrap() + 1;
        let w = cells.iter().map(|c| c.1).max().unwrap() + 1;
        (h, w)
    }

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::WideBar => "bar",
            ShapeKind::TallBar => "pillar",
            ShapeKind::Cross => "cross",
            ShapeKind::Ell => "hook",
            ShapeKind::Tee => "tee",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Audio,
    Visual,
    Joint,
    Null,
}

impl Template {
    pub fn name(self) -> &'static str {
        match self {
            Template::Audio => "audio",
            Template::Visual => "visual",
            Template::Joint => "joint",
            Template::Null => "null",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Template,
    File,
}

/// Target distribution over `[audio, visual, audio-visual]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel {
    pub p: [f64; 3],
    pub source: LabelSource,
}

impl SoftLabel {
    pub fn new(p: [f64; 3], source: LabelSource) -> Result<Self> {
        if p.iter().any(|v| !v.is_finite() || *v < 0.0)
            || (p.iter().sum::<f64>() - 1.0).abs() > 1e-6
        {
            return Err(Error::Invalid(format!(
                "soft label {p:?} is not a distribution"
            )));
        }
        Ok(Self { p, source })
    }

    /// Label implied by a referring template. Null expressions get the label
    /// of the template they imitate.
    pub fn for_style(style: Template) -> Self {
        let p = match style {
            Template::Audio => [0.8, 0.1, 0.1],
            Template::Visual => [0.1, 0.8, 0.1],
            Template::Joint => [0.1, 0.1, 0.8],
            Template::Null => [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
        };
        Self {
            p,
            source: LabelSource::Template,
        }
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..3 {
            if self.p[i] > self.p[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: ShapeKind,
    pub color: Color,
    /// Top-left cell at frame 0.
    pub origin: (i64, i64),
    /// Cells moved per frame.
    pub velocity: (i64, i64),
    /// Half-open `[start, end)` seconds during which the object sounds.
    pub sounding: Vec<(usize, usize)>,
}

impl ObjectSpec {
    pub fn sound(&self) -> usize {
        self.color.sound()
    }

    pub fn sounds_at(&self, t: usize) -> bool {
        self.sounding.iter().any(|&(a, b)| a <= t && t < b)
    }

    pub fn is_sounding(&self) -> bool {
        self.sounding.iter().any(|&(a, b)| b > a)
    }

    pub fn position(&self, t: usize) -> (i64, i64) {
        (
            self.origin.0 + self.velocity.0 * t as i64,
            self.origin.1 + self.velocity.1 * t as i64,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub objects: Vec<ObjectSpec>,
    pub template: Template,
    /// Which non-null template the expression imitates; equals `template`
    /// unless the template is null.
    pub style: Template,
    pub target: Option<usize>,
    pub words: Vec<String>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_frames == 0 {
            return Err(Error::Invalid("scene needs at least one frame".into()));
        }
        if (self.template == Template::Null) != self.target.is_none() {
            return Err(Error::Invalid(
                "target must be absent iff template is null".into(),
            ));
        }
        if let Some(t) = self.target {
            if t >= self.objects.len() {
                return Err(Error::Invalid(format!("target index {t} out of range")));
            }
        }
        for o in &self.objects {
            for &(a, b) in &o.sounding {
                if a > b || b > self.num_frames {
                    return Err(Error::Invalid(format!(
                        "sounding interval [{a},{b}) outside [0,{})",
                        self.num_frames
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn soft_label(&self) -> SoftLabel {
        SoftLabel::for_style(self.style)
    }

    /// True when some non-target object sounds, i.e. the audio track carries
    /// a competing cue.
    pub fn audio_conflict(&self) -> bool {
        self.template != Template::Null
            && self
                .objects
                .iter()
                .enumerate()
                .any(|(i, o)| Some(i) != self.target && o.is_sounding())
    }

    fn cell_px(&self) -> (usize, usize) {
        (self.height / GRID_CELLS, self.width / GRID_CELLS)
    }

    fn paint(&self, obj: &ObjectSpec, t: usize, mut put: impl FnMut(usize, usize)) {
        let (ch, cw) = self.cell_px();
        let (py, px) = obj.position(t);
        for &(r, c) in obj.shape.cells() {
            let cy = py + r as i64;
            let cx = px + c as i64;
            if cy < 0 || cx < 0 || cy as usize >= GRID_CELLS || cx as usize >= GRID_CELLS {
                continue;
            }
            for y in cy as usize * ch..(cy as usize + 1) * ch {
                for x in cx as usize * cw..(cx as usize + 1) * cw {
                    put(y, x);
                }
            }
        }
    }

    /// Frames `T x 3 x H x W` with values in `[0, 1]`.
    pub fn render(&self) -> Array<f32> {
        let (h, w) = (self.height, self.width);
        let mut a = Array::zeros(&[self.num_frames, 3, h, w]);
        for t in 0..self.num_frames {
            for obj in &self.objects {
                let rgb = obj.color.rgb();
                self.paint(obj, t, |y, x| {
                    for (c, v) in rgb.iter().enumerate() {
                        a.data[((t * 3 + c) * h + y) * w + x] = *v;
                    }
                });
            }
        }
        a
    }

    /// Ground-truth masks `T x H x W`; all zero for null scenes.
    pub fn gt_masks(&self) -> Array<u8> {
        let (h, w) = (self.height, self.width);
        let mut a = Array::zeros(&[self.num_frames, h, w]);
        if let Some(ti) = self.target {
            let obj = &self.objects[ti];
            for t in 0..self.num_frames {
                self.paint(obj, t, |y, x| a.data[(t * h + y) * w + x] = 1);
            }
        }
        a
    }
}

/// Scene sampling parameters.
#[derive(Debug, Clone, Copy)]
pub struct SceneParams {
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            num_frames: 4,
            height: 64,
            width: 64,
        }
    }
}

fn sounding_span(rng: &mut ChaCha8Rng, t: usize) -> Vec<(usize, usize)> {
    let min_len = t.div_ceil(2).max(1);
    let len = rng.gen_range(min_len..=t);
    let start = rng.gen_range(0..=t - len);
    vec![(start, start + len)]
}

fn overlaps(a: &ObjectSpec, b: &ObjectSpec, frames: usize) -> bool {
    let (ah, aw) = a.shape.extent();
    let (bh, bw) = b.shape.extent();
    (0..frames).any(|t| {
        let (ay, ax) = a.position(t);
        let (by, bx) = b.position(t);
        // one free cell between bounding boxes
        ay <= by + bh as i64 && by <= ay + ah as i64 && ax <= bx + bw as i64 && bx <= ax + aw as i64
    })
}

fn place(
    rng: &mut ChaCha8Rng,
    shape: ShapeKind,
    frames: usize,
    placed: &[ObjectSpec],
) -> Option<((i64, i64), (i64, i64))> {
    let (h, w) = shape.extent();
    let g = GRID_CELLS as i64;
    let span = frames as i64 - 1;
    for _ in 0..400 {
        let mut vel: (i64, i64) = (rng.gen_range(-1..=1), rng.gen_range(-1..=1));
        if (h as i64) + vel.0.abs() * span > g {
            vel.0 = 0;
        }
        if (w as i64) + vel.1.abs() * span > g {
            vel.1 = 0;
        }
        let range = |ext: usize, v: i64| {
            let lo = if v < 0 { -v * span } else { 0 };
            let hi = g - ext as i64 - if v > 0 { v * span } else { 0 };
            (lo, hi)
        };
        let (ylo, yhi) = range(h, vel.0);
        let (xlo, xhi) = range(w, vel.1);
        if ylo > yhi || xlo > xhi {
            continue;
        }
        let origin = (rng.gen_range(ylo..=yhi), rng.gen_range(xlo..=xhi));
        let cand = ObjectSpec {
            shape,
            color: Color::Red,
            origin,
            velocity: vel,
            sounding: vec![],
        };
        if placed.iter().all(|p| !overlaps(p, &cand, frames)) {
            return Some((origin, vel));
        }
    }
    None
}

/// Sample one scene. `null_style` picks which template a null expression
/// imitates and is ignored otherwise.
pub fn sample_scene(
    seed: u64,
    template: Template,
    null_style: Template,
    kinds: &[ShapeKind],
    params: SceneParams,
) -> Result<SceneSpec> {
    if params.height % 32 != 0 || params.width % 32 != 0 {
        return Err(Error::Invalid(format!(
            "canvas {}x{} must be divisible by 32",
            params.height, params.width
        )));
    }
    if params.num_frames == 0 || kinds.is_empty() {
        return Err(Error::Invalid(
            "need frames and at least one shape kind".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = params.num_frames;
    let style = if template == Template::Null {
        null_style
    } else {
        template
    };

    // (color, sounding?) for each object; the target is always index 0 before
    // shuffling.
    let mut colors = Color::ALL.to_vec();
    colors.shuffle(&mut rng);
    let fam = if rng.gen_bool(0.5) {
        Family::Warm
    } else {
        Family::Cool
    };
    let pick_in = |rng: &mut ChaCha8Rng, f: Family, not: &[Color]| -> Color {
        let opts: Vec<Color> = f
            .members()
            .into_iter()
            .filter(|c| !not.contains(c))
            .collect();
        *opts.choose(rng).unwrap()
    };
    let mut roles: Vec<(Color, bool)> = Vec::new();
    let mut words: Vec<String> = vec!["the".into()];
    let mut target_shape = *kinds.choose(&mut rng).unwrap();
    let mut shared_shape = false;
    match (template, style) {
        (Template::Audio, _) => {
            roles.push((colors[0], true));
            roles.push((colors[1], false));
            roles.push((colors[2], false));
            shared_shape = true;
            words.extend(["object", "making", "a", "sound"].map(String::from));
        }
        (Template::Visual, _) => {
            roles.push((colors[0], false));
            roles.push((colors[1], false));
            roles.push((colors[2], true));
            // the target may itself sound; it does not matter for a visual query
            roles[0].1 = rng.gen_bool(0.5);
            shared_shape = true;
            words.push(colors[0].word().into());
            words.push(target_shape.word().into());
        }
        (Template::Joint, _) => {
            let tc = pick_in(&mut rng, fam, &[]);
            let same_fam = pick_in(&mut rng, fam, &[tc]);
            let other = pick_in(&mut rng, fam.other(), &[]);
            roles.push((tc, true));
            roles.push((same_fam, false));
            roles.push((other, true));
            words.extend(["sounding".into(), fam.word().into(), "object".into()]);
        }
        (Template::Null, Template::Audio) => {
            for c in &colors[..3] {
                roles.push((*c, false));
            }
            words.extend(["object", "making", "a", "sound"].map(String::from));
        }
        (Template::Null, Template::Joint) => {
            let a = pick_in(&mut rng, fam, &[]);
            let b = pick_in(&mut rng, fam.other(), &[]);
            let c = pick_in(&mut rng, fam.other(), &[b]);
            roles.push((a, false));
            roles.push((b, true));
            roles.push((c, rng.gen_bool(0.5)));
            words.extend(["sounding".into(), fam.word().into(), "object".into()]);
        }
        (Template::Null, _) => {
            // named colour absent from the scene
            for c in &colors[1..4] {
                roles.push((*c, rng.gen_bool(0.4)));
            }
            target_shape = *kinds.choose(&mut rng).unwrap();
            shared_shape = true;
            words.push(colors[0].word().into());
            words.push(target_shape.word().into());
        }
    }

    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(roles.len());
    'retry: for _ in 0..50 {
        objects.clear();
        for (i, &(color, sounds)) in roles.iter().enumerate() {
            let shape = if i == 0 || (i == 1 && shared_shape) {
                target_shape
            } else {
                *kinds.choose(&mut rng).unwrap()
            };
            let Some((origin, velocity)) = place(&mut rng, shape, t, &objects) else {
                continue 'retry;
            };
            let sounding = if sounds {
                sounding_span(&mut rng, t)
            } else {
                vec![]
            };
            objects.push(ObjectSpec {
                shape,
                color,
                origin,
                velocity,
                sounding,
            });
        }
        break;
    }
    if objects.len() != roles.len() {
        return Err(Error::Invalid(format!(
            "could not place objects for seed {seed}"
        )));
    }

    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.shuffle(&mut rng);
    let target = if template == Template::Null {
        None
    } else {
        order.iter().position(|&i| i == 0)
    };
    let objects = order.iter().map(|&i| objects[i].clone()).collect();

    let scene = SceneSpec {
        seed,
        num_frames: t,
        height: params.height,
        width: params.width,
        objects,
        template,
        style,
        target,
        words,
    };
    scene.validate()?;
    Ok(scene)
}

/// Resolve a referring expression against a scene by exhaustive search over
/// its objects; used to check that every expression picks exactly its target.
pub fn resolve_expression(scene: &SceneSpec) -> Vec<usize> {
    let words: Vec<&str> = scene.words.iter().map(|s| s.as_str()).collect();
    scene
        .objects
        .iter()
        .enumerate()
        .filter(|(_, o)| match scene.style {
            Template::Audio => o.is_sounding(),
            Template::Visual => words.contains(&o.color.word()),
            Template::Joint => o.is_sounding() && words.contains(&o.color.family().word()),
            Template::Null => false,
        })
        .map(|(i, _)| i)
        .collect()
}

/// Frozen encoder configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub seed: u64,
    pub channels: [usize; 4],
    pub d_audio: usize,
    pub d_text: usize,
    pub audio_noise: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            seed: 0x5eed,
            channels: [32, 64, 128, 256],
            d_audio: 64,
            d_text: 64,
            audio_noise: 0.05,
        }
    }
}

pub const VOCAB: &[&str] = &[
    "the", "object", "making", "a", "sound", "sounding", "warm", "cool", "red", "orange", "yellow",
    "green", "cyan", "blue", "square", "bar", "pillar", "cross", "hook", "tee",
];

/// Text features: `MAX_TEXT_LEN x d_T` rows, padding rows zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatures {
    pub rows: Array<f32>,
    pub len: usize,
}

impl TextFeatures {
    pub fn global(&self) -> &[f32] {
        &self.rows.data[..self.rows.shape[1]]
    }
}

/// Fixed random projections standing in for the frozen visual, audio and
/// text backbones.
#[derive(Debug, Clone)]
pub struct Encoders {
    pub config: EncoderConfig,
    visual: [Vec<f32>; 4],
    codebook: Vec<f32>,
    sentence: Vec<f32>,
    vocab: Vec<f32>,
}

fn gaussian(seed: u64, n: usize, std: f64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (z * std) as f32
        })
        .collect()
}

impl Encoders {
    pub fn new(config: EncoderConfig) -> Self {
        let s = config.seed;
        let visual = std::array::from_fn(|n| {
            gaussian(
                s ^ fnv1a(format!("visual{n}").as_bytes()),
                config.channels[n] * 3,
                1.0,
            )
        });
        let codebook = gaussian(s ^ fnv1a(b"codebook"), NUM_SOUNDS * config.d_audio, 1.0);
        let sentence = gaussian(s ^ fnv1a(b"sentence"), config.d_text, 1.0);
        let vocab = gaussian(s ^ fnv1a(b"vocab"), VOCAB.len() * config.d_text, 1.0);
        Self {
            config,
            visual,
            codebook,
            sentence,
            vocab,
        }
    }

    pub fn codebook_row(&self, class: usize) -> &[f32] {
        let d = self.config.d_audio;
        &self.codebook[class * d..(class + 1) * d]
    }

    pub fn sentence_embedding(&self) -> &[f32] {
        &self.sentence
    }

    pub fn word_embedding(&self, word: &str) -> Result<&[f32]> {
        let i = VOCAB
            .iter()
            .position(|w| *w == word)
            .ok_or_else(|| Error::UnknownSymbol(word.to_string()))?;
        let d = self.config.d_text;
        Ok(&self.vocab[i * d..(i + 1) * d])
    }

    /// Four-stage hierarchy from `T x 3 x H x W` frames. Stage `n` (0-based)
    /// projects the mean colour of each `2^(n+2)`-pixel patch.
    pub fn encode_visual(&self, frames: &Array<f32>) -> Result<[Array<f32>; 4]> {
        let [t, c3, h, w] = frames.shape[..] else {
            return Err(Error::Shape(format!(
                "frames must be T x 3 x H x W, got {:?}",
                frames.shape
            )));
        };
        if c3 != 3 {
            return Err(Error::Shape("frames need 3 colour channels".into()));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Invalid(format!(
                "frame size {h}x{w} must be divisible by 32"
            )));
        }
        let mut out: Vec<Array<f32>> = Vec::with_capacity(4);
        for n in 0..4 {
            let p = 1usize << (n + 2);
            let (sh, sw) = (h / p, w / p);
            let c = self.config.channels[n];
            let proj = &self.visual[n];
            let mut a = Array::zeros(&[t, c, sh, sw]);
            let inv = 1.0 / (p * p) as f32;
            for ti in 0..t {
                for py in 0..sh {
                    for px in 0..sw {
                        let mut mean = [0f32; 3];
                        for (ch, m) in mean.iter_mut().enumerate() {
                            let base = (ti * 3 + ch) * h * w;
                            let mut s = 0f32;
                            for y in py * p..(py + 1) * p {
                                let row = &frames.data
                                    [base + y * w + px * p..base + y * w + (px + 1) * p];
                                s += row.iter().sum::<f32>();
                            }
                            *m = s * inv;
                        }
                        for k in 0..c {
                            let v = proj[k * 3] * mean[0]
                                + proj[k * 3 + 1] * mean[1]
                                + proj[k * 3 + 2] * mean[2];
                            a.data[((ti * c + k) * sh + py) * sw + px] = v;
                        }
                    }
                }
            }
            out.push(a);
        }
        Ok(out.try_into().expect("four stages"))
    }

    /// `T x d_A`: per second, the sum of codebook rows of sounding classes
    /// plus Gaussian noise of standard deviation `sigma`.
    pub fn encode_audio(&self, scene: &SceneSpec, sigma: f64) -> Array<f32> {
        let d = self.config.d_audio;
        let t = scene.num_frames;
        let mut a = Array::zeros(&[t, d]);
        for ti in 0..t {
            for o in &scene.objects {
                if o.sounds_at(ti) {
                    for (dst, src) in a.data[ti * d..(ti + 1) * d]
                        .iter_mut()
                        .zip(self.codebook_row(o.sound()))
                    {
                        *dst += *src;
                    }
                }
            }
        }
        if sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ fnv1a(b"audio-noise"));
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            for v in a.data.iter_mut() {
                *v += normal.sample(&mut rng) as f32;
            }
        }
        a
    }

    /// Row 0 is the sentence slot plus the mean word embedding (the global
    /// token); rows `1..=n` are the word embeddings; the rest is zero padding.
    pub fn encode_text(&self, words: &[String]) -> Result<TextFeatures> {
        let d = self.config.d_text;
        if words.len() + 1 > MAX_TEXT_LEN {
            return Err(Error::Invalid(format!(
                "expression of {} words exceeds {} tokens",
                words.len(),
                MAX_TEXT_LEN
            )));
        }
        let mut rows = Array::zeros(&[MAX_TEXT_LEN, d]);
        let mut ids = Vec::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            let e = self.word_embedding(w)?;
            rows.data[(i + 1) * d..(i + 2) * d].copy_from_slice(e);
            ids.push(VOCAB.iter().position(|v| v == w).unwrap());
        }
        // canonical summation order keeps the mean bit-identical under permutation
        ids.sort_unstable();
        let mut mean = vec![0f64; d];
        for id in &ids {
            for (m, v) in mean.iter_mut().zip(&self.vocab[id * d..(id + 1) * d]) {
                *m += *v as f64;
            }
        }
        for (j, m) in mean.iter().enumerate() {
            let avg = if ids.is_empty() {
                0.0
            } else {
                m / ids.len() as f64
            };
            rows.data[j] = (self.sentence[j] as f64 + avg) as f32;
        }
        Ok(TextFeatures {
            rows,
            len: words.len() + 1,
        })
    }

    pub fn encode(
        &self,
        scene: &SceneSpec,
        audio: Array<f32>,
        label: SoftLabel,
    ) -> Result<FeatureBundle> {
        let frames = scene.render();
        Ok(FeatureBundle {
            visual: self.encode_visual(&frames)?,
            audio,
            text: self.encode_text(&scene.words)?,
            gt_masks: scene.gt_masks(),
            soft_label: label,
        })
    }
}

/// Encoder outputs and targets for one clip.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub visual: [Array<f32>; 4],
    pub audio: Array<f32>,
    pub text: TextFeatures,
    pub gt_masks: Array<u8>,
    pub soft_label: SoftLabel,
}

impl FeatureBundle {
    pub fn num_frames(&self) -> usize {
        self.gt_masks.shape[0]
    }

    pub fn validate(&self) -> Result<()> {
        for n in 1..4 {
            let (a, b) = (&self.visual[n - 1].shape, &self.visual[n].shape);
            if b[2] * 2 != a[2] || b[3] * 2 != a[3] {
                return Err(Error::Shape(format!(
                    "stage {} is not half of stage {}",
                    n + 1,
                    n
                )));
            }
        }
        if self.gt_masks.data.iter().any(|&m| m > 1) {
            return Err(Error::Invalid("gt masks must be binary".into()));
        }
        let finite = self
            .visual
            .iter()
            .all(|v| v.data.iter().all(|x| x.is_finite()))
            && self.audio.data.iter().all(|x| x.is_finite())
            && self.text.rows.data.iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite("feature bundle".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Seen,
    Unseen,
    Null,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Seen => "seen",
            Split::Unseen => "unseen",
            Split::Null => "null",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Split::Train,
            "val" => Split::Val,
            "seen" => Split::Seen,
            "unseen" => Split::Unseen,
            "null" => Split::Null,
            other => return Err(Error::Invalid(format!("unknown split tag {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindSet {
    Seen,
    Unseen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    #[serde(default = "default_frames")]
    pub num_frames: usize,
    #[serde(default = "default_canvas")]
    pub height: usize,
    #[serde(default = "default_canvas")]
    pub width: usize,
    /// Samples per split.
    pub counts: BTreeMap<Split, i64>,
    /// Fraction of training samples that use a null expression.
    #[serde(default = "default_null_fraction")]
    pub train_null_fraction: f64,
    /// Also write encoded features next to each raw scene.
    #[serde(default)]
    pub write_features: bool,
    #[serde(default)]
    pub encoder: EncoderConfig,
}

fn default_frames() -> usize {
    4
}
fn default_canvas() -> usize {
    64
}
fn default_null_fraction() -> f64 {
    0.1
}

impl GenConfig {
    pub fn new(seed: u64, counts: &[(Split, i64)]) -> Self {
        Self {
            seed,
            num_frames: default_frames(),
            height: default_canvas(),
            width: default_canvas(),
            counts: counts.iter().copied().collect(),
            train_null_fraction: default_null_fraction(),
            write_features: false,
            encoder: EncoderConfig::default(),
        }
    }

    pub fn scene_params(&self) -> SceneParams {
        SceneParams {
            num_frames: self.num_frames,
            height: self.height,
            width: self.width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub template: Template,
    pub kinds: KindSet,
    pub audio_conflict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub generator: GenConfig,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.samples.iter().filter(move |e| e.split == split)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TextRecord {
    words: Vec<String>,
    template: Template,
    style: Template,
}

/// Template, null-style and shape-kind set for sample `i` of a split.
fn plan_sample(split: Split, i: usize, null_fraction: f64) -> (Template, Template, KindSet) {
    const CYCLE: [Template; 3] = [Template::Audio, Template::Visual, Template::Joint];
    let nstyle = CYCLE[(i / 3) % 3];
    match split {
        Split::Train => {
            let period = if null_fraction > 0.0 {
                (1.0 / null_fraction).round().max(2.0) as usize
            } else {
                usize::MAX
            };
            if i % period == period - 1 {
                (Template::Null, CYCLE[(i / period) % 3], KindSet::Seen)
            } else {
                (CYCLE[i % 3], nstyle, KindSet::Seen)
            }
        }
        Split::Val => {
            let kinds = if (i / 3) % 2 == 0 {
                KindSet::Seen
            } else {
                KindSet::Unseen
            };
            (CYCLE[i % 3], nstyle, kinds)
        }
        Split::Seen => (CYCLE[i % 3], nstyle, KindSet::Seen),
        Split::Unseen => (CYCLE[i % 3], nstyle, KindSet::Unseen),
        Split::Null => (
            Template::Null,
            CYCLE[i % 3],
            if i % 2 == 0 {
                KindSet::Seen
            } else {
                KindSet::Unseen
            },
        ),
    }
}

pub fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    fnv1a(format!("{seed}/{}/{index}", split.name()).as_bytes())
}

/// Build the scene for one planned sample.
pub fn make_sample(
    config: &GenConfig,
    split: Split,
    index: usize,
) -> Result<(ManifestEntry, SceneSpec)> {
    let (template, style, kinds) = plan_sample(split, index, config.train_null_fraction);
    let shapes: &[ShapeKind] = match kinds {
        KindSet::Seen => &ShapeKind::SEEN,
        KindSet::Unseen => &ShapeKind::UNSEEN,
    };
    let scene = sample_scene(
        sample_seed(config.seed, split, index),
        template,
        style,
        shapes,
        config.scene_params(),
    )?;
    let entry = ManifestEntry {
        id: format!("{}_{index:05}", split.name()),
        split,
        template,
        kinds,
        audio_conflict: scene.audio_conflict(),
    };
    Ok((entry, scene))
}

fn write_sample(dir: &Path, scene: &SceneSpec, enc: &Encoders, write_features: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let frames = scene.render();
    let audio = enc.encode_audio(scene, enc.config.audio_noise);
    write_array(&dir.join("frames.bin"), &frames)?;
    write_array(&dir.join("audio.bin"), &audio)?;
    write_array(&dir.join("mask.bin"), &scene.gt_masks())?;
    write_json(
        &dir.join("text.json"),
        &TextRecord {
            words: scene.words.clone(),
            template: scene.template,
            style: scene.style,
        },
    )?;
    write_json(&dir.join("label.json"), &scene.soft_label())?;
    write_json(&dir.join("scene.json"), scene)?;
    if write_features {
        let fdir = dir.join("features");
        fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
        for (n, stage) in enc.encode_visual(&frames)?.iter().enumerate() {
            write_array(&fdir.join(format!("stage{}.bin", n + 1)), stage)?;
        }
        write_array(&fdir.join("text.bin"), &enc.encode_text(&scene.words)?.rows)?;
    }
    Ok(())
}

/// Generate every split into `out_dir` and write `manifest.json`.
pub fn gen_dataset(config: &GenConfig, out_dir: &Path) -> Result<Manifest> {
    if config.counts.is_empty() {
        return Err(Error::Config("no splits requested".into()));
    }
    if let Some((s, c)) = config.counts.iter().find(|(_, c)| **c <= 0) {
        return Err(Error::Config(format!(
            "split {} has count {c}; counts must be positive",
            s.name()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let probe = out_dir.join(".write-probe");
    fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))?;

    let enc = Encoders::new(config.encoder.clone());
    let mut samples = Vec::new();
    for (&split, &count) in &config.counts {
        for i in 0..count as usize {
            let (entry, scene) = make_sample(config, split, i)?;
            write_sample(
                &out_dir.join(&entry.id),
                &scene,
                &enc,
                config.write_features,
            )?;
            samples.push(entry);
        }
    }
    let manifest = Manifest {
        format: 1,
        generator: config.clone(),
        samples,
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Read access to a generated dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub encoders: Encoders,
    labels: BTreeMap<String, SoftLabel>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&root.join("manifest.json"))?;
        let encoders = Encoders::new(manifest.generator.encoder.clone());
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            encoders,
            labels: BTreeMap::new(),
        })
    }

    /// Replace template-derived labels with externally supplied ones.
    pub fn with_labels(mut self, labels: BTreeMap<String, SoftLabel>) -> Self {
        self.labels = labels;
        self
    }

    pub fn scene(&self, id: &str) -> Result<SceneSpec> {
        read_json(&self.root.join(id).join("scene.json"))
    }

    pub fn load(&self, id: &str) -> Result<FeatureBundle> {
        let dir = self.root.join(id);
        let frames = read_array::<f32>(&dir.join("frames.bin"))?;
        let audio = read_array::<f32>(&dir.join("audio.bin"))?;
        let gt_masks = read_array::<u8>(&dir.join("mask.bin"))?;
        let text: TextRecord = read_json(&dir.join("text.json"))?;
        let label = match self.labels.get(id) {
            Some(l) => l.clone(),
            None => read_json(&dir.join("label.json"))?,
        };
        let bundle = FeatureBundle {
            visual: self.encoders.encode_visual(&frames)?,
            audio,
            text: self.encoders.encode_text(&text.words)?,
            gt_masks,
            soft_label: label,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

// ---------------------------------------------------------------------------
// Soft-label JSONL
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct LabelRecord {
    id: String,
    p: [f64; 3],
    source: String,
}

pub fn read_soft_labels(path: &Path) -> Result<BTreeMap<String, SoftLabel>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord = serde_json::from_str(line)
            .map_err(|e| Error::Invalid(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.insert(rec.id, SoftLabel::new(rec.p, LabelSource::File)?);
    }
    Ok(out)
}

pub fn write_soft_labels<'a>(
    path: &Path,
    labels: impl IntoIterator<Item = (&'a str, &'a SoftLabel, &'a str)>,
) -> Result<()> {
    let mut out = String::new();
    for (id, label, source) in labels {
        let rec = LabelRecord {
            id: id.to_string(),
            p: label.p,
            source: source.to_string(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> SceneParams {
        SceneParams::default()
    }

    fn all_templates() -> Vec<(Template, Template)> {
        vec![
            (Template::Audio, Template::Audio),
            (Template::Visual, Template::Visual),
            (Template::Joint, Template::Joint),
            (Template::Null, Template::Audio),
            (Template::Null, Template::Visual),
            (Template::Null, Template::Joint),
        ]
    }

    #[test]
    fn expressions_resolve_to_exactly_the_target() {
        for seed in 0..200 {
            for (tpl, style) in all_templates() {
                let s = sample_scene(seed, tpl, style, &ShapeKind::SEEN, params()).unwrap();
                let hits = resolve_expression(&s);
                match s.target {
                    Some(t) => assert_eq!(hits, vec![t], "seed {seed} {tpl:?}"),
                    None => assert!(hits.is_empty(), "seed {seed} null {style:?}"),
                }
            }
        }
    }

    #[test]
    fn distractors_partially_match_one_modality() {
        for seed in 0..100 {
            for tpl in [Template::Audio, Template::Visual, Template::Joint] {
                let s = sample_scene(seed, tpl, tpl, &ShapeKind::SEEN, params()).unwrap();
                let t = s.target.unwrap();
                let target = &s.objects[t];
                let partial =
                    s.objects
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| *i != t)
                        .any(|(_, o)| match tpl {
                            Template::Audio => o.shape == target.shape,
                            Template::Visual => o.is_sounding() || o.shape == target.shape,
                            Template::Joint => {
                                o.color.family() == target.color.family() || o.is_sounding()
                            }
                            Template::Null => unreachable!(),
                        });
                assert!(partial, "seed {seed} {tpl:?}");
            }
        }
    }

    #[test]
    fn null_scenes_have_empty_masks() {
        for seed in 0..30 {
            for style in [Template::Audio, Template::Visual, Template::Joint] {
                let s = sample_scene(seed, Template::Null, style, &ShapeKind::UNSEEN, params())
                    .unwrap();
                assert!(s.target.is_none());
                assert!(s.gt_masks().data.iter().all(|&m| m == 0));
            }
        }
    }

    #[test]
    fn template_label_consistency() {
        assert_eq!(SoftLabel::for_style(Template::Audio).argmax(), 0);
        assert_eq!(SoftLabel::for_style(Template::Visual).argmax(), 1);
        assert_eq!(SoftLabel::for_style(Template::Joint).argmax(), 2);
        for style in all_templates() {
            let l = SoftLabel::for_style(style.1);
            assert!((l.p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let a = sample_scene(
            9,
            Template::Joint,
            Template::Joint,
            &ShapeKind::SEEN,
            params(),
        )
        .unwrap();
        let b = sample_scene(
            9,
            Template::Joint,
            Template::Joint,
            &ShapeKind::SEEN,
            params(),
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.render(), b.render());
    }

    #[test]
    fn sounding_intervals_lie_inside_clip() {
        for seed in 0..50 {
            let p = SceneParams {
                num_frames: 10,
                ..params()
            };
            let s =
                sample_scene(seed, Template::Joint, Template::Joint, &ShapeKind::SEEN, p).unwrap();
            for o in &s.objects {
                for &(a, b) in &o.sounding {
                    assert!(a < b && b <= 10);
                }
            }
        }
    }

    #[test]
    fn black_frames_encode_to_zero() {
        let enc = Encoders::new(EncoderConfig::default());
        let frames = Array::zeros(&[2, 3, 64, 64]);
        let stages = enc.encode_visual(&frames).unwrap();
        for s in &stages {
            assert!(s.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn visual_stage_shapes() {
        let enc = Encoders::new(EncoderConfig::default());
        let stages = enc.encode_visual(&Array::zeros(&[3, 3, 64, 64])).unwrap();
        let dims: Vec<_> = stages.iter().map(|s| s.shape.clone()).collect();
        assert_eq!(
            dims,
            vec![
                vec![3, 32, 16, 16],
                vec![3, 64, 8, 8],
                vec![3, 128, 4, 4],
                vec![3, 256, 2, 2]
            ]
        );
        assert!(enc.encode_visual(&Array::zeros(&[1, 3, 48, 64])).is_err());
    }

    #[test]
    fn pixel_flip_only_changes_its_frame() {
        let enc = Encoders::new(EncoderConfig::default());
        let s = sample_scene(
            3,
            Template::Visual,
            Template::Visual,
            &ShapeKind::SEEN,
            params(),
        )
        .unwrap();
        let frames = s.render();
        let before = enc.encode_visual(&frames).unwrap();
        let mut flipped = frames.clone();
        let t_flip = 2;
        let idx = ((t_flip * 3 + 1) * 64 + 17) * 64 + 40;
        flipped.data[idx] = 1.0 - flipped.data[idx];
        let after = enc.encode_visual(&flipped).unwrap();
        for n in 0..4 {
            let per_frame = before[n].len() / 4;
            for t in 0..4 {
                let a = &before[n].data[t * per_frame..(t + 1) * per_frame];
                let b = &after[n].data[t * per_frame..(t + 1) * per_frame];
                if t == t_flip {
                    assert_ne!(a, b, "stage {n} frame {t} should change");
                } else {
                    assert_eq!(a, b, "stage {n} frame {t} should not change");
                }
            }
        }
    }

    fn silent_scene(t: usize) -> SceneSpec {
        let mut s = sample_scene(
            1,
            Template::Null,
            Template::Audio,
            &ShapeKind::SEEN,
            SceneParams {
                num_frames: t,
                ..params()
            },
        )
        .unwrap();
        for o in &mut s.objects {
            o.sounding.clear();
        }
        s
    }

    #[test]
    fn silent_audio_without_noise_is_zero() {
        let enc = Encoders::new(EncoderConfig::default());
        let a = enc.encode_audio(&silent_scene(4), 0.0);
        assert_eq!(a.shape, vec![4, 64]);
        assert!(a.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_sound_repeats_codebook_row() {
        let enc = Encoders::new(EncoderConfig::default());
        let mut s = silent_scene(4);
        s.objects[0].sounding = vec![(0, 4)];
        let a = enc.encode_audio(&s, 0.0);
        let row = enc.codebook_row(s.objects[0].sound());
        for t in 0..4 {
            assert_eq!(&a.data[t * 64..(t + 1) * 64], row);
        }
    }

    #[test]
    fn overlapping_sounds_add() {
        let enc = Encoders::new(EncoderConfig::default());
        let mut s = silent_scene(4);
        s.objects[0].sounding = vec![(0, 3)];
        s.objects[1].sounding = vec![(2, 4)];
        let a = enc.encode_audio(&s, 0.0);
        let r0 = enc.codebook_row(s.objects[0].sound());
        let r1 = enc.codebook_row(s.objects[1].sound());
        for j in 0..64 {
            assert_eq!(a.data[2 * 64 + j], r0[j] + r1[j]);
        }
        assert_eq!(&a.data[3 * 64..4 * 64], r1);
    }

    #[test]
    fn empty_text_is_sentence_slot() {
        let enc = Encoders::new(EncoderConfig::default());
        let t = enc.encode_text(&[]).unwrap();
        assert_eq!(t.len, 1);
        assert_eq!(t.global(), enc.sentence_embedding());
        assert!(t.rows.data[64..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn word_order_keeps_global_token() {
        let enc = Encoders::new(EncoderConfig::default());
        let a: Vec<String> = ["the", "red", "square"].map(String::from).to_vec();
        let b: Vec<String> = ["square", "the", "red"].map(String::from).to_vec();
        let ta = enc.encode_text(&a).unwrap();
        let tb = enc.encode_text(&b).unwrap();
        assert_eq!(ta.global(), tb.global());
        assert_ne!(ta.rows.data[64..4 * 64], tb.rows.data[64..4 * 64]);
    }

    #[test]
    fn unknown_word_is_rejected() {
        let enc = Encoders::new(EncoderConfig::default());
        let err = enc
            .encode_text(&["the".into(), "purple".into()])
            .unwrap_err();
        assert!(matches!(err, Error::UnknownSymbol(w) if w == "purple"));
    }

    #[test]
    fn counts_must_be_positive() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig::new(0, &[(Split::Train, 0)]);
        assert!(gen_dataset(&cfg, dir.path()).is_err());
    }

    #[test]
    fn unwritable_output_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("blocker");
        std::fs::write(&file, b"x").unwrap();
        let cfg = GenConfig::new(0, &[(Split::Train, 1)]);
        assert!(gen_dataset(&cfg, &file.join("sub")).is_err());
    }
}
