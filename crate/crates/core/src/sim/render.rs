/// Axis-aligned rectangle in the x-z plane with a gray level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub z0: f64,
    pub z1: f64,
    pub value: f32,
}

impl Rect {
    pub fn new(x0: f64, x1: f64, z0: f64, z1: f64, value: f32) -> Self {
        Self { x0, x1, z0, z1, value }
    }

    fn contains(&self, x: f64, z: f64) -> bool {
        x >= self.x0 && x < self.x1 && z >= self.z0 && z < self.z1
    }
}

/// Square view of the plane centered at `(cx, cz)` with half-width `half`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct View {
    pub cx: f64,
    pub cz: f64,
    pub half: f64,
}

/// Renders rectangles (later ones on top) into a `side x side` grayscale
/// image, row 0 at the top, averaging `ss x ss` point samples per pixel.
pub fn render(rects: &[Rect], view: View, side: usize, ss: usize) -> Vec<f32> {
    let px = 2.0 * view.half / side as f64;
    let mut img = vec![0.0f32; side * side];
    let norm = 1.0 / (ss * ss) as f32;
    for row in 0..side {
        for col in 0..side {
            let mut acc = 0.0f32;
            for sy in 0..ss {
                for sx in 0..ss {
                    let x = view.cx - view.half + (col as f64 + (sx as f64 + 0.5) / ss as f64) * px;
                    let z = view.cz + view.half - (row as f64 + (sy as f64 + 0.5) / ss as f64) * px;
                    acc += rects.iter().rev().find(|r| r.contains(x, z)).map_or(0.0, |r| r.value);
                }
            }
            img[row * side + col] = acc * norm;
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn later_rectangles_cover_earlier_ones() {
        let rects = [Rect::new(-1.0, 1.0, -1.0, 1.0, 0.5), Rect::new(0.0, 1.0, 0.0, 1.0, 1.0)];
        let img = render(&rects, View { cx: 0.0, cz: 0.0, half: 1.0 }, 2, 1);
        assert_eq!(img, vec![0.5, 1.0, 0.5, 0.5]);
    }

    #[test]
    fn partial_coverage_is_antialiased() {
        let rects = [Rect::new(0.0, 0.5, -1.0, 1.0, 1.0)];
        let img = render(&rects, View { cx: 0.0, cz: 0.0, half: 1.0 }, 2, 4);
        assert_eq!(img, vec![0.0, 0.5, 0.0, 0.5]);
    }
}
