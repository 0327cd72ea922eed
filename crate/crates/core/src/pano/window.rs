use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Seed,
    Right,
    Down,
    Up,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Seed => "seed",
            Direction::Right => "right",
            Direction::Down => "down",
            Direction::Up => "up",
        }
    }
}

/// One `S × S` window with top-left corner `(row, col)`. Columns wrap.
/// `parent` is the earlier window this one was shifted from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub row: usize,
    pub col: usize,
    pub direction: Direction,
    pub parent: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSchedule {
    pub width: usize,
    pub height: usize,
    pub size: usize,
    pub placements: Vec<Placement>,
}

impl WindowSchedule {
    pub fn stride(&self) -> usize {
        self.size / 2
    }

    pub fn len(&self) -> usize {
        self.placements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.placements.is_empty()
    }

    /// Panorama pixel indices (`y·width + x`) covered by window `i`.
    pub fn cells(&self, i: usize) -> Vec<usize> {
        let p = self.placements[i];
        let s = self.size;
        (p.row..p.row + s)
            .flat_map(|y| (p.col..p.col + s).map(move |x| y * self.width + x % self.width))
            .collect()
    }

    /// Number of pixels shared by windows `i` and `j`.
    pub fn overlap(&self, i: usize, j: usize) -> usize {
        let a = self.cells(i);
        let b: std::collections::HashSet<usize> = self.cells(j).into_iter().collect();
        a.iter().filter(|c| b.contains(c)).count()
    }

    /// A copy holding only the first `n` placements.
    pub fn truncated(&self, n: usize) -> WindowSchedule {
        WindowSchedule {
            placements: self.placements[..n.min(self.len())].to_vec(),
            ..self.clone()
        }
    }
}

/// Seed window at column 0 of the middle band (row 0 when `height == S`),
/// then rightward shifts of `S/2` around the full circle, the last one
/// wrapping onto the seed. Further bands follow, first downward then
/// upward, each starting above or below column 0 of the band it extends and
/// sweeping right the same way. Every window overlaps its parent by exactly
/// `S·S/2` pixels.
pub fn outpaint_schedule(width: usize, height: usize, size: usize) -> Result<WindowSchedule> {
    if size < 2 || size % 2 != 0 {
        return Err(Error::invalid(format!(
            "window size {size} must be even and at least 2"
        )));
    }
    let stride = size / 2;
    if size > height || size > width {
        return Err(Error::invalid(format!(
            "window {size} larger than panorama {width}x{height}"
        )));
    }
    if width % stride != 0 || height % stride != 0 {
        return Err(Error::invalid(format!(
            "panorama {width}x{height} is not a multiple of the stride {stride}"
        )));
    }
    let last_row = height - size;
    let seed_row = (last_row / 2) / stride * stride;
    let per_band = width / stride;
    let mut placements = Vec::new();
    let band = |placements: &mut Vec<Placement>, row: usize, direction: Direction, parent: Option<usize>| {
        let first = placements.len();
        placements.push(Placement {
            row,
            col: 0,
            direction,
            parent,
        });
        for k in 1..per_band {
            placements.push(Placement {
                row,
                col: k * stride,
                direction: Direction::Right,
                parent: Some(first + k - 1),
            });
        }
        first
    };
    let seed = band(&mut placements, seed_row, Direction::Seed, None);
    let mut parent = seed;
    let mut row = seed_row;
    while row < last_row {
        row += stride;
        parent = band(&mut placements, row, Direction::Down, Some(parent));
    }
    let (mut parent, mut row) = (seed, seed_row);
    while row > 0 {
        row -= stride;
        parent = band(&mut placements, row, Direction::Up, Some(parent));
    }
    Ok(WindowSchedule {
        width,
        height,
        size,
        placements,
    })
}
