use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

/// Required divisor of the image side (the toy patch size).
pub const TOY_PATCH: usize = 8;
pub const TOY_IMAGE_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
const COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
const CELLS: [&str; 4] = ["top left", "top right", "bottom left", "bottom right"];

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

/// One shape placed in a cell of the 2×2 grid (cells in raster order).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Placement {
    pub cell: usize,
    pub shape: Shape,
    pub color: Color,
}

impl Placement {
    /// Pixel coordinates `(x, y)` of the cell centre in an `s × s` image.
    pub fn center(&self, s: usize) -> (usize, usize) {
        let c = s / 2;
        ((self.cell % 2) * c + c / 2, (self.cell / 2) * c + c / 2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    /// `[3, S, S]`, values in `[0, 1]`.
    pub image: Tensor,
    /// Primary caption; `captions[0]`.
    pub caption_text: String,
    pub caption_tokens: Vec<usize>,
    /// Both paraphrases.
    pub captions: Vec<String>,
    pub seed_id: u64,
    pub scene: Vec<Placement>,
}

/// Word list of the toy caption grammar.
pub fn toy_vocabulary() -> Vocabulary {
    let mut words = vec!["and", "in"];
    words.extend(COLORS.iter().map(|c| c.word()));
    words.extend(SHAPES.iter().map(|s| s.word()));
    words.extend(["top", "bottom", "left", "right"]);
    Vocabulary::new(words)
}

/// The two paraphrases for a scene whose placements are in cell order.
pub fn describe(scene: &[Placement]) -> [String; 2] {
    let first: Vec<String> = scene
        .iter()
        .map(|p| format!("{} {} {}", p.color.word(), p.shape.word(), CELLS[p.cell]))
        .collect();
    let second: Vec<String> = scene
        .iter()
        .map(|p| format!("{} {} in {}", p.color.word(), p.shape.word(), CELLS[p.cell]))
        .collect();
    [first.join(" and "), second.join(" and ")]
}

/// Paints `scene` on a black `s × s` canvas, channel-major.
pub fn render(scene: &[Placement], s: usize) -> Tensor {
    let mut data = vec![0.0; 3 * s * s];
    let cell = s / 2;
    let r = cell as f64 * 0.375;
    for p in scene {
        let (cx, cy) = p.center(s);
        let (cxf, cyf) = (cx as f64 + 0.5, cy as f64 + 0.5);
        let x0 = (p.cell % 2) * cell;
        let y0 = (p.cell / 2) * cell;
        for y in y0..y0 + cell {
            for x in x0..x0 + cell {
                let dx = x as f64 + 0.5 - cxf;
                let dy = y as f64 + 0.5 - cyf;
                let inside = match p.shape {
                    Shape::Circle => dx * dx + dy * dy <= r * r,
                    Shape::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
                    // apex up: half-width grows linearly from 0 at the top to r at the base
                    Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) * 0.5,
                };
                if inside {
                    for (ch, v) in p.color.rgb().iter().enumerate() {
                        data[(ch * s + y) * s + x] = *v;
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![3, s, s], data)
}

fn sample_scene(rng: &mut ChaCha8Rng) -> Vec<Placement> {
    let k = rng.random_range(1..=3);
    let mut cells: Vec<usize> = (0..4).collect();
    // partial Fisher-Yates for k distinct cells
    for i in 0..k {
        let j = rng.random_range(i..4);
        cells.swap(i, j);
    }
    let mut chosen = cells[..k].to_vec();
    chosen.sort_unstable();
    chosen
        .into_iter()
        .map(|cell| Placement {
            cell,
            shape: SHAPES[rng.random_range(0..SHAPES.len())],
            color: COLORS[rng.random_range(0..COLORS.len())],
        })
        .collect()
}

/// Deterministic shapes dataset. Sample `i` depends only on `(seed, i, s)`,
/// so shorter datasets are prefixes of longer ones.
pub fn generate_dataset(seed: u64, n: usize, s: usize) -> Result<Vec<ToySample>> {
    if s == 0 || !s.is_multiple_of(TOY_PATCH) {
        return Err(invalid(format!("image size {s} must be a positive multiple of {TOY_PATCH}")));
    }
    if n == 0 {
        return Err(invalid("dataset size must be at least 1"));
    }
    let vocab = toy_vocabulary();
    Ok((0..n as u64)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i);
            let scene = sample_scene(&mut rng);
            let [a, b] = describe(&scene);
            ToySample {
                image: render(&scene, s),
                caption_tokens: vocab.tokenize(&a),
                caption_text: a.clone(),
                captions: vec![a, b],
                seed_id: i,
                scene,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_caption_words_are_in_vocabulary() {
        let v = toy_vocabulary();
        for s in generate_dataset(3, 200, 32).unwrap() {
            for c in &s.captions {
                assert!(!v.tokenize(c).contains(&crate::vocab::UNK), "{c}");
            }
        }
    }

    #[test]
    fn describe_orders_by_cell() {
        let scene = [
            Placement { cell: 0, shape: Shape::Circle, color: Color::Red },
            Placement { cell: 3, shape: Shape::Square, color: Color::Blue },
        ];
        let [a, b] = describe(&scene);
        assert_eq!(a, "red circle top left and blue square bottom right");
        assert_eq!(b, "red circle in top left and blue square in bottom right");
    }

    #[test]
    fn rejects_bad_size() {
        assert!(generate_dataset(0, 1, 20).is_err());
        assert!(generate_dataset(0, 0, 32).is_err());
    }
}
