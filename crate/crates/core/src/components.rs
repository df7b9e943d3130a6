//! 8-connected component labelling of binary frames.

#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    /// Flat `y * W + x` indices, in discovery order.
    pub pixels: Vec<usize>,
    /// `(x, y)` mean pixel position.
    pub centroid: (f64, f64),
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

/// Labels the pixels `> 0.5` of one `H x W` frame. Components are ordered by
/// their first pixel in row-major order.
pub fn label(frame: &[f64], h: usize, w: usize) -> Vec<Component> {
    assert_eq!(frame.len(), h * w, "frame size mismatch");
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || frame[start] <= 0.5 {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(p) = stack.pop() {
            pixels.push(p);
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if !seen[q] && frame[q] > 0.5 {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        let n = pixels.len() as f64;
        let cx = pixels.iter().map(|&p| (p % w) as f64).sum::<f64>() / n;
        let cy = pixels.iter().map(|&p| (p / w) as f64).sum::<f64>() / n;
        out.push(Component {
            pixels,
            centroid: (cx, cy),
        });
    }
    out
}
