//! Dense row-major 2D rasters used for masks, label maps and depth images.

use serde::{Deserialize, Serialize};

/// A `width × height` raster stored row-major; `(u, v)` is `(column, row)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// Binary pixel mask.
pub type Mask = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }
}

impl<T> Grid<T> {
    /// Wraps an existing row-major buffer. Panics if the length does not match.
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "grid buffer length mismatch");
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    /// `(width, height)`.
    #[inline]
    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn contains(&self, u: i64, v: i64) -> bool {
        u >= 0 && v >= 0 && (u as usize) < self.width && (v as usize) < self.height
    }

    #[inline]
    pub fn index(&self, u: usize, v: usize) -> usize {
        debug_assert!(u < self.width && v < self.height);
        v * self.width + u
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> &T {
        &self.data[v * self.width + u]
    }

    #[inline]
    pub fn get_mut(&mut self, u: usize, v: usize) -> &mut T {
        &mut self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: T) {
        self.data[v * self.width + u] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.data.iter()
    }

    /// Iterates `(u, v, &value)` in row-major order.
    pub fn enumerate(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        let w = self.width;
        self.data.iter().enumerate().map(move |(i, x)| (i % w, i / w, x))
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid { width: self.width, height: self.height, data: self.data.iter().map(f).collect() }
    }

    pub fn same_size<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn or(&self, other: &Mask) -> Mask {
        assert!(self.same_size(other));
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a || b).collect(),
        }
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.same_size(other) && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// Set pixel coordinates in row-major order.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        self.enumerate().filter(|(_, _, &b)| b).map(|(u, v, _)| (u, v)).collect()
    }

    /// Dilation with a Euclidean disk of the given radius (pixels).
    pub fn dilate(&self, radius: usize) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let r = radius as i64;
        let offsets: Vec<(i64, i64)> = (-r..=r)
            .flat_map(|dv| (-r..=r).map(move |du| (du, dv)))
            .filter(|(du, dv)| du * du + dv * dv <= r * r)
            .collect();
        let mut out = Mask::filled(self.width, self.height, false);
        for (u, v, &b) in self.enumerate() {
            if !b {
                continue;
            }
            for &(du, dv) in &offsets {
                let (x, y) = (u as i64 + du, v as i64 + dv);
                if self.contains(x, y) {
                    out.set(x as usize, y as usize, true);
                }
            }
        }
        out
    }
}

/// 4-connected flood fill from `(u, v)` over pixels for which `same(seed, other)` holds.
/// Returns the component as a mask.
pub fn flood_fill<T>(grid: &Grid<T>, u: usize, v: usize, same: impl Fn(&T, &T) -> bool) -> Mask {
    let mut out = Mask::filled(grid.width(), grid.height(), false);
    let seed = grid.get(u, v);
    let mut stack = vec![(u, v)];
    out.set(u, v, true);
    while let Some((x, y)) = stack.pop() {
        let mut visit = |nx: usize, ny: usize| {
            if !*out.get(nx, ny) && same(seed, grid.get(nx, ny)) {
                out.set(nx, ny, true);
                stack.push((nx, ny));
            }
        };
        if x > 0 {
            visit(x - 1, y);
        }
        if x + 1 < grid.width() {
            visit(x + 1, y);
        }
        if y > 0 {
            visit(x, y - 1);
        }
        if y + 1 < grid.height() {
            visit(x, y + 1);
        }
    }
    out
}

/// Labels 4-connected components of pixels with equal value. Returns the
/// per-pixel component index and the size of every component.
pub fn connected_components<T: PartialEq>(grid: &Grid<T>) -> (Grid<u32>, Vec<usize>) {
    let (w, h) = grid.size();
    let mut comp = Grid::filled(w, h, u32::MAX);
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if comp.as_slice()[start] != u32::MAX {
            continue;
        }
        let id = sizes.len() as u32;
        let mut size = 0usize;
        comp.as_mut_slice()[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let value = &grid.as_slice()[i];
            let mut neighbors = [usize::MAX; 4];
            if x > 0 {
                neighbors[0] = i - 1;
            }
            if x + 1 < w {
                neighbors[1] = i + 1;
            }
            if y > 0 {
                neighbors[2] = i - w;
            }
            if y + 1 < h {
                neighbors[3] = i + w;
            }
            for n in neighbors {
                if n != usize::MAX && comp.as_slice()[n] == u32::MAX && grid.as_slice()[n] == *value {
                    comp.as_mut_slice()[n] = id;
                    stack.push(n);
                }
            }
        }
        sizes.push(size);
    }
    (comp, sizes)
}
