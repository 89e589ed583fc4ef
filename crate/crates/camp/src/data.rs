//! Procedural shape corpus: every image/caption pair is derived from a
//! small factor grid (shape × color × background × horizontal position), so
//! the full dataset is enumerable, splits are reproducible from a seed, and
//! ground-truth retrieval targets are just indices.
//!
//! Captions follow one fixed 10-word pattern:
//! `a {color} {shape} on a {background} background at the {position}`.
//!
//! Rendering is deterministic integer rasterization — no randomness, no
//! anti-aliasing — and the three horizontal positions are exact column
//! translations of each other, which tests exploit.

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] =
        [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Cross];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ColorName {
    Red,
    Green,
    Blue,
    Yellow,
}

impl ColorName {
    pub const ALL: [ColorName; 4] =
        [ColorName::Red, ColorName::Green, ColorName::Blue, ColorName::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            ColorName::Red => "red",
            ColorName::Green => "green",
            ColorName::Blue => "blue",
            ColorName::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            ColorName::Red => [0.90, 0.10, 0.10],
            ColorName::Green => [0.10, 0.80, 0.15],
            ColorName::Blue => [0.15, 0.20, 0.90],
            ColorName::Yellow => [0.95, 0.85, 0.10],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackgroundName {
    White,
    Black,
    Gray,
}

impl BackgroundName {
    pub const ALL: [BackgroundName; 3] =
        [BackgroundName::White, BackgroundName::Black, BackgroundName::Gray];

    pub fn name(self) -> &'static str {
        match self {
            BackgroundName::White => "white",
            BackgroundName::Black => "black",
            BackgroundName::Gray => "gray",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            BackgroundName::White => [0.95, 0.95, 0.95],
            BackgroundName::Black => [0.05, 0.05, 0.05],
            BackgroundName::Gray => [0.50, 0.50, 0.50],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HPosition {
    Left,
    Center,
    Right,
}

impl HPosition {
    pub const ALL: [HPosition; 3] = [HPosition::Left, HPosition::Center, HPosition::Right];

    pub fn name(self) -> &'static str {
        match self {
            HPosition::Left => "left",
            HPosition::Center => "center",
            HPosition::Right => "right",
        }
    }

    /// Shape center column for a given image size: size·(2i+1)/6, which for
    /// size 32 gives columns 5, 16 and 26. With the default radius the
    /// shape never clips, so the three positions are pure translations.
    pub fn center_x(self, size: usize) -> usize {
        let i = match self {
            HPosition::Left => 0,
            HPosition::Center => 1,
            HPosition::Right => 2,
        };
        size * (2 * i + 1) / 6
    }
}

/// One point in the factor grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FactorSpec {
    pub shape: ShapeKind,
    pub color: ColorName,
    pub background: BackgroundName,
    pub position: HPosition,
}

impl FactorSpec {
    /// All 4·4·3·3 = 144 combinations in canonical nested order
    /// (shape, then color, then background, then position).
    pub fn all() -> Vec<FactorSpec> {
        let mut out = Vec::with_capacity(144);
        for shape in ShapeKind::ALL {
            for color in ColorName::ALL {
                for background in BackgroundName::ALL {
                    for position in HPosition::ALL {
                        out.push(FactorSpec { shape, color, background, position });
                    }
                }
            }
        }
        out
    }

    pub fn caption(&self) -> String {
        format!(
            "a {} {} on a {} background at the {}",
            self.color.name(),
            self.shape.name(),
            self.background.name(),
            self.position.name()
        )
    }

    /// Rasterizes the spec into a size×size RGB image.
    pub fn render(&self, size: usize) -> Result<Image> {
        if size < 12 {
            return Err(Error::Config(format!("image size {size} too small to draw shapes")));
        }
        let mut image = Image::filled(size, self.background.rgb());
        let cx = self.position.center_x(size) as i64;
        let cy = (size / 2) as i64;
        let r = (size / 6) as i64; // 5 for the default 32×32
        let color = self.color.rgb();
        for y in 0..size as i64 {
            for x in 0..size as i64 {
                let dx = x - cx;
                let dy = y - cy;
                let inside = match self.shape {
                    ShapeKind::Circle => dx * dx + dy * dy <= r * r,
                    ShapeKind::Square => dx.abs() <= r - 1 && dy.abs() <= r - 1,
                    // Flat-bottomed triangle, apex at the top.
                    ShapeKind::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2,
                    ShapeKind::Cross => {
                        (dx.abs() <= 1 && dy.abs() <= r) || (dy.abs() <= 1 && dx.abs() <= r)
                    }
                };
                if inside {
                    image.set(x as usize, y as usize, color);
                }
            }
        }
        Ok(image)
    }
}

/// Planar channel-first RGB image, values in [0, 1]:
/// `data[c·size² + y·size + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub size: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(size: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * size * size);
        for c in rgb {
            data.extend(std::iter::repeat(c).take(size * size));
        }
        Image { size, data }
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let plane = self.size * self.size;
        let idx = y * self.size + x;
        [self.data[idx], self.data[plane + idx], self.data[2 * plane + idx]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let plane = self.size * self.size;
        let idx = y * self.size + x;
        self.data[idx] = rgb[0];
        self.data[plane + idx] = rgb[1];
        self.data[2 * plane + idx] = rgb[2];
    }

    /// Cyclic column shift by `dx` (used to relate the three horizontal
    /// positions, and to fabricate moving test videos).
    pub fn translate_columns(&self, dx: usize) -> Image {
        let mut out = Image::filled(self.size, [0.0; 3]);
        for y in 0..self.size {
            for x in 0..self.size {
                let nx = (x + dx) % self.size;
                out.set(nx, y, self.get(x, y));
            }
        }
        out
    }
}

/// A rendered image with its caption and the factors it came from.
#[derive(Debug, Clone)]
pub struct Sample {
    pub factors: FactorSpec,
    pub caption: String,
    pub image: Image,
}

/// Renders the full factor grid at `image_size`, in canonical order.
pub fn generate_corpus(image_size: usize) -> Result<Vec<Sample>> {
    FactorSpec::all()
        .into_iter()
        .map(|factors| {
            Ok(Sample { caption: factors.caption(), image: factors.render(image_size)?, factors })
        })
        .collect()
}

/// Deterministic train/eval split: shuffles the canonical corpus with the
/// seed and carves off `n_eval` samples for evaluation, `n_train` for
/// training. Requires `n_train + n_eval` ≤ corpus size so the two sets are
/// disjoint.
pub fn generate_split(
    image_size: usize,
    n_train: usize,
    n_eval: usize,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let corpus = generate_corpus(image_size)?;
    if n_train == 0 || n_eval == 0 {
        return Err(Error::Config("split sizes must be positive".into()));
    }
    if n_train + n_eval > corpus.len() {
        return Err(Error::Capacity {
            what: "requested split size",
            got: n_train + n_eval,
            max: corpus.len(),
        });
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = Rng::new(seed);
    rng.shuffle(&mut order);
    let mut corpus: Vec<Option<Sample>> = corpus.into_iter().map(Some).collect();
    let take = |indices: &[usize], corpus: &mut Vec<Option<Sample>>| {
        indices.iter().map(|&i| corpus[i].take().expect("index used twice")).collect::<Vec<_>>()
    };
    let eval = take(&order[..n_eval], &mut corpus);
    let train = take(&order[n_eval..n_eval + n_train], &mut corpus);
    Ok((train, eval))
}

/// Every word that can occur in a caption, in caption order. Feeding these
/// to the vocabulary builder makes token ids independent of which samples
/// land in the training split.
pub fn caption_words() -> Vec<&'static str> {
    let mut words = vec!["a"];
    words.extend(ColorName::ALL.map(ColorName::name));
    words.extend(ShapeKind::ALL.map(ShapeKind::name));
    words.extend(["on"]);
    words.extend(BackgroundName::ALL.map(BackgroundName::name));
    words.extend(["background", "at", "the"]);
    words.extend(HPosition::ALL.map(HPosition::name));
    words
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    /// Test-only inverse of [`FactorSpec::caption`]: recovers the factors
    /// from the fixed caption pattern.
    fn parse_caption(caption: &str) -> Option<FactorSpec> {
        let w: Vec<&str> = caption.split_whitespace().collect();
        if w.len() != 10 || w[0] != "a" || w[3] != "on" || w[4] != "a" || w[6] != "background"
            || w[7] != "at" || w[8] != "the"
        {
            return None;
        }
        let color = ColorName::ALL.into_iter().find(|c| c.name() == w[1])?;
        let shape = ShapeKind::ALL.into_iter().find(|s| s.name() == w[2])?;
        let background = BackgroundName::ALL.into_iter().find(|b| b.name() == w[5])?;
        let position = HPosition::ALL.into_iter().find(|p| p.name() == w[9])?;
        Some(FactorSpec { shape, color, background, position })
    }

    #[test]
    fn corpus_has_144_unique_ten_word_captions() {
        let specs = FactorSpec::all();
        assert_eq!(specs.len(), 144);
        let captions: HashSet<String> = specs.iter().map(FactorSpec::caption).collect();
        assert_eq!(captions.len(), 144, "captions must be unique");
        for c in &captions {
            assert_eq!(c.split_whitespace().count(), 10, "caption {c:?}");
        }
    }

    #[test]
    fn caption_round_trips_to_factors() {
        for spec in FactorSpec::all() {
            let parsed = parse_caption(&spec.caption()).expect("parsable");
            assert_eq!(parsed, spec);
        }
    }

    #[test]
    fn caption_words_cover_all_captions() {
        let words: HashSet<&str> = caption_words().into_iter().collect();
        for spec in FactorSpec::all() {
            for w in spec.caption().split_whitespace() {
                assert!(words.contains(w), "word {w:?} missing from caption_words()");
            }
        }
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        for spec in FactorSpec::all() {
            let img = spec.render(32).unwrap();
            assert_eq!(img.data.len(), 3 * 32 * 32);
            assert!(img.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn positions_are_exact_translations() {
        // center_x: 5, 16, 26 for size 32. The shape never reaches the
        // image border, so shifting the left image right by the center
        // delta reproduces the center/right images exactly.
        for shape in ShapeKind::ALL {
            let base = FactorSpec {
                shape,
                color: ColorName::Blue,
                background: BackgroundName::Gray,
                position: HPosition::Left,
            };
            let left = base.render(32).unwrap();
            for position in [HPosition::Center, HPosition::Right] {
                let target = FactorSpec { position, ..base }.render(32).unwrap();
                let dx = position.center_x(32) - HPosition::Left.center_x(32);
                assert_eq!(left.translate_columns(dx), target, "{shape:?} -> {position:?}");
            }
        }
    }

    #[test]
    fn all_factors_change_the_image() {
        let base = FactorSpec {
            shape: ShapeKind::Circle,
            color: ColorName::Red,
            background: BackgroundName::White,
            position: HPosition::Center,
        };
        let base_img = base.render(32).unwrap();
        let variants = [
            FactorSpec { shape: ShapeKind::Square, ..base },
            FactorSpec { color: ColorName::Green, ..base },
            FactorSpec { background: BackgroundName::Black, ..base },
            FactorSpec { position: HPosition::Left, ..base },
        ];
        for v in variants {
            assert_ne!(v.render(32).unwrap(), base_img, "{v:?} should differ");
        }
    }

    #[test]
    fn shape_mass_sits_at_the_requested_column() {
        for position in HPosition::ALL {
            let spec = FactorSpec {
                shape: ShapeKind::Square,
                color: ColorName::Red,
                background: BackgroundName::Black,
                position,
            };
            let img = spec.render(32).unwrap();
            // Center of mass of bright-red pixels (the background is dark).
            let (mut num, mut den) = (0.0f64, 0.0f64);
            for y in 0..32 {
                for x in 0..32 {
                    let v = if img.get(x, y)[0] > 0.5 { 1.0 } else { 0.0 };
                    num += v * x as f64;
                    den += v;
                }
            }
            let com = num / den;
            let expect = position.center_x(32) as f64;
            assert!((com - expect).abs() < 1.5, "{position:?}: com {com} vs {expect}");
        }
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (train_a, eval_a) = generate_split(32, 96, 48, 7).unwrap();
        let (train_b, _eval_b) = generate_split(32, 96, 48, 7).unwrap();
        assert_eq!(train_a.len(), 96);
        assert_eq!(eval_a.len(), 48);
        let caps = |v: &[Sample]| v.iter().map(|s| s.caption.clone()).collect::<Vec<_>>();
        assert_eq!(caps(&train_a), caps(&train_b), "same seed, same split");
        let train_set: HashSet<String> = caps(&train_a).into_iter().collect();
        assert!(eval_a.iter().all(|s| !train_set.contains(&s.caption)), "splits disjoint");

        let (train_c, _) = generate_split(32, 96, 48, 8).unwrap();
        assert_ne!(caps(&train_a), caps(&train_c), "different seed, different split");
    }

    #[test]
    fn oversized_split_is_rejected() {
        assert!(matches!(generate_split(32, 100, 48, 1), Err(crate::Error::Capacity { .. })));
        assert!(generate_split(32, 0, 4, 1).is_err());
    }

    #[test]
    fn small_images_are_rejected() {
        let spec = FactorSpec::all()[0];
        assert!(spec.render(8).is_err());
    }
}
