//! Row-major boolean images used for segmentation masks and validity maps.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width as usize * height as usize, "mask size mismatch");
        Self { width, height, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        x < self.width && y < self.height && self.data[self.index(x, y)]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let i = self.index(x, y);
        self.data[i] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Pixel coordinates of set pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width as usize;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| ((i % w) as u32, (i / w) as u32))
    }

    pub fn intersects(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).any(|(a, b)| *a && *b)
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(a, b)| !*a || *b)
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a |= *b;
        }
    }

    /// Binary erosion by a (2r+1)x(2r+1) square; pixels outside the image count as background.
    pub fn eroded(&self, radius: u32) -> Mask {
        let mut out = self.clone();
        for _ in 0..radius {
            out = out.erode_once();
        }
        out
    }

    fn erode_once(&self) -> Mask {
        let (w, h) = (self.width as i64, self.height as i64);
        let mut out = Mask::new(self.width, self.height);
        for y in 0..h {
            for x in 0..w {
                if !self.data[(y * w + x) as usize] {
                    continue;
                }
                let mut keep = true;
                'n: for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= w || ny >= h || !self.data[(ny * w + nx) as usize] {
                            keep = false;
                            break 'n;
                        }
                    }
                }
                out.data[(y * w + x) as usize] = keep;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(w: u32, x0: u32, x1: u32) -> Mask {
        let mut m = Mask::new(w, w);
        for y in x0..x1 {
            for x in x0..x1 {
                m.set(x, y, true);
            }
        }
        m
    }

    #[test]
    fn erosion_shrinks_square() {
        let m = square(20, 5, 15);
        assert_eq!(m.count(), 100);
        let e = m.eroded(2);
        assert_eq!(e, square(20, 7, 13));
        assert!(e.is_subset_of(&m));
        assert_eq!(m.eroded(0), m);
        assert!(m.eroded(5).is_empty());
    }

    #[test]
    fn border_counts_as_background() {
        let full = square(6, 0, 6);
        assert_eq!(full.eroded(1), square(6, 1, 5));
    }
}
