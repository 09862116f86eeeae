//! Rasterization of ego-centric map polylines into the binary BEV canvas.
//!
//! The canvas covers the square |x| <= half_extent, |y| <= half_extent.
//! Rows run along -x (forward at the top), columns along +y. Points
//! exactly on the max boundary of a pixel axis fall outside (half-open
//! intervals), so world_to_pixel is reproducible at boundaries.

use crate::scene::{Point, Polyline};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("invalid raster config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterConfig {
    pub half_extent: f64,
    pub canvas_size: usize,
    pub interp_step: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            half_extent: 32.0,
            canvas_size: 256,
            interp_step: 0.1,
        }
    }
}

impl RasterConfig {
    pub fn resolution(&self) -> f64 {
        2.0 * self.half_extent / self.canvas_size as f64
    }

    /// interp_step must give at least two samples per pixel so that lit
    /// pixels along one polyline stay 8-connected.
    pub fn validate(&self) -> Result<(), RasterError> {
        if !(self.half_extent > 0.0) || self.canvas_size == 0 || !(self.interp_step > 0.0) {
            return Err(RasterError::InvalidConfig(
                "extent, canvas size and interp step must be positive".into(),
            ));
        }
        if self.interp_step > self.resolution() / 2.0 {
            return Err(RasterError::InvalidConfig(format!(
                "interp_step {} exceeds half the pixel resolution {}",
                self.interp_step,
                self.resolution()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasterCanvas {
    pub size: usize,
    grid: Vec<u8>,
}

impl RasterCanvas {
    pub fn zeros(size: usize) -> Self {
        RasterCanvas {
            size,
            grid: vec![0; size * size],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.grid[row * self.size + col]
    }

    pub fn set(&mut self, row: usize, col: usize) {
        self.grid[row * self.size + col] = 1;
    }

    pub fn count_ones(&self) -> usize {
        self.grid.iter().filter(|&&v| v == 1).count()
    }

    pub fn cells(&self) -> &[u8] {
        &self.grid
    }

    /// Binary PGM (P5) dump, 1 -> 255, for visual inspection.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.size, self.size).into_bytes();
        out.extend(self.grid.iter().map(|&v| if v == 1 { 255u8 } else { 0 }));
        out
    }
}

/// Map a world point in the ego frame to a pixel, or None when outside
/// the canvas.
pub fn world_to_pixel(p: Point, cfg: &RasterConfig) -> Option<(usize, usize)> {
    let res = cfg.resolution();
    let row = ((cfg.half_extent - p.x) / res).floor();
    let col = ((p.y + cfg.half_extent) / res).floor();
    let n = cfg.canvas_size as f64;
    if row >= 0.0 && row < n && col >= 0.0 && col < n {
        Some((row as usize, col as usize))
    } else {
        None
    }
}

/// Mark every cell touched by a polyline sample walked at interp_step arc
/// spacing (segment endpoints included). Idempotent and order-independent.
pub fn rasterize(map: &[Polyline], cfg: &RasterConfig) -> RasterCanvas {
    let mut canvas = RasterCanvas::zeros(cfg.canvas_size);
    for line in map {
        for w in line.points.windows(2) {
            let (a, b) = (w[0], w[1]);
            let len = a.dist(b);
            let n = (len / cfg.interp_step).ceil().max(1.0) as usize;
            for i in 0..=n {
                let t = i as f64 / n as f64;
                let p = Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y));
                if let Some((r, c)) = world_to_pixel(p, cfg) {
                    canvas.set(r, c);
                }
            }
        }
    }
    canvas
}
