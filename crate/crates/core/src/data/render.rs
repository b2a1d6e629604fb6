use super::{Color, Shape, IMAGE_CHANNELS, IMAGE_PIXELS, IMAGE_SIDE};

/// Black `IMAGE_SIDE²` RGB canvas.
pub(super) struct Canvas {
    pixels: Vec<f64>,
}

impl Canvas {
    pub fn new() -> Self {
        Self {
            pixels: vec![-1.0; IMAGE_PIXELS],
        }
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    /// Paints `shape` centred at `(cx, cy)` with half-extent `r`, sampling
    /// at pixel centres.
    pub fn draw(&mut self, shape: Shape, color: Color, cx: f64, cy: f64, r: f64) {
        let rgb = color.rgb();
        for y in 0..IMAGE_SIDE {
            for x in 0..IMAGE_SIDE {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                if covers(shape, dx, dy, r) {
                    let base = (y * IMAGE_SIDE + x) * IMAGE_CHANNELS;
                    self.pixels[base..base + IMAGE_CHANNELS].copy_from_slice(&rgb);
                }
            }
        }
    }
}

fn covers(shape: Shape, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= 0.65 * r && dy.abs() <= 0.65 * r,
        // apex up: width grows linearly from the top edge to the base
        Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        Shape::Cross => {
            let arm = r / 4.0;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lit(c: &Canvas) -> Vec<bool> {
        c.pixels.chunks(3).map(|p| p.iter().any(|v| *v > 0.0)).collect()
    }

    #[test]
    fn shapes_have_distinct_footprints() {
        let masks: Vec<Vec<bool>> = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross]
            .iter()
            .map(|&s| {
                let mut c = Canvas::new();
                c.draw(s, Color::Red, 8.0, 8.0, 4.5);
                lit(&c)
            })
            .collect();
        for (i, a) in masks.iter().enumerate() {
            assert!(a.iter().filter(|&&b| b).count() > 10);
            for b in &masks[i + 1..] {
                let differing = a.iter().zip(b).filter(|(x, y)| x != y).count();
                assert!(differing >= 8, "shapes {i} overlap too much");
            }
        }
    }

    #[test]
    fn colour_lands_in_the_right_channel() {
        let mut c = Canvas::new();
        c.draw(Shape::Square, Color::Blue, 8.0, 8.0, 4.5);
        let centre = (8 * IMAGE_SIDE + 8) * IMAGE_CHANNELS;
        assert_eq!(&c.pixels[centre..centre + 3], &[-1.0, -1.0, 1.0]);
    }
}
