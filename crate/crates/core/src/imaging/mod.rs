//! Images, patch grids, I/O, synthetic corruption and quality metrics.

mod io;
mod metrics;
mod noise;
pub mod pattern;

pub use io::{load_image, save_image, save_nlbf, save_pgm};
pub use metrics::{psnr, ssim, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
pub use noise::poisson_gaussian_corrupt;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Multi-channel image with channel-major, row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<F> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<F>,
}

impl<F: Real> Image<F> {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<F>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: F) -> Self {
        Image::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
        .expect("positive dimensions")
    }

    /// Single-channel image built from a per-pixel closure `f(row, col)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Image::new(width, height, 1, data).expect("positive dimensions")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn same_shape(&self, other: &Image<F>) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> F {
        self.data[(channel * self.height + row) * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, row: usize, col: usize, value: F) {
        self.data[(channel * self.height + row) * self.width + col] = value;
    }

    /// Copy of a single channel as its own image.
    pub fn channel(&self, channel: usize) -> Image<F> {
        let plane = self.width * self.height;
        let data = self.data[channel * plane..(channel + 1) * plane].to_vec();
        Image::new(self.width, self.height, 1, data).expect("plane of a valid image")
    }

    /// Stacks single-channel planes into one multi-channel image.
    pub fn from_channels(planes: &[Image<F>]) -> Result<Image<F>> {
        let first = planes
            .first()
            .ok_or_else(|| Error::InvalidArgument("no channels to stack".into()))?;
        let mut data = Vec::with_capacity(first.data.len() * planes.len());
        for p in planes {
            if p.width != first.width || p.height != first.height || p.channels != 1 {
                return Err(Error::DimensionMismatch(
                    "channel planes must share single-channel dimensions".into(),
                ));
            }
            data.extend_from_slice(&p.data);
        }
        Image::new(first.width, first.height, planes.len(), data)
    }

    /// Rectangular crop of every channel.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Image<F>> {
        if row + height > self.height || col + width > self.width || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "crop {height}x{width} at ({row}, {col}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(width * height * self.channels);
        for ch in 0..self.channels {
            for r in row..row + height {
                let start = (ch * self.height + r) * self.width + col;
                data.extend_from_slice(&self.data[start..start + width]);
            }
        }
        Image::new(width, height, self.channels, data)
    }

    pub fn map<G: Real>(&self, mut f: impl FnMut(F) -> G) -> Image<G> {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> Image<G> {
        self.map(|v| G::lit(v.as_f64()))
    }
}

/// A vectorized `side × side` window, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch<F> {
    pub side: usize,
    pub values: Vec<F>,
}

impl<F: Real> Patch<F> {
    pub fn new(side: usize, values: Vec<F>) -> Result<Self> {
        if values.len() != side * side {
            return Err(Error::DimensionMismatch(format!(
                "patch of side {side} needs {} values, got {}",
                side * side,
                values.len()
            )));
        }
        Ok(Patch { side, values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// All patches of a single-channel image at a fixed stride, with border-clamped anchors.
#[derive(Debug, Clone)]
pub struct PatchGrid<F> {
    side: usize,
    stride: usize,
    height: usize,
    width: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<F>,
}

/// Anchor positions `{0, stride, 2·stride, …} ∪ {extent − side}`.
pub fn anchor_positions(extent: usize, side: usize, stride: usize) -> Vec<usize> {
    let last = extent - side;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().expect("at least anchor 0") != last {
        out.push(last);
    }
    out
}

/// Splits a single-channel image into vectorized patches.
pub fn extract_patches<F: Real>(
    img: &Image<F>,
    side: usize,
    stride: usize,
) -> Result<PatchGrid<F>> {
    if img.channels() != 1 {
        return Err(Error::InvalidArgument(format!(
            "patch extraction needs a single channel, got {}",
            img.channels()
        )));
    }
    if side == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "patch side and stride must be ≥ 1".into(),
        ));
    }
    if side > img.width().min(img.height()) {
        return Err(Error::InvalidArgument(format!(
            "patch side {side} larger than {}x{} image",
            img.height(),
            img.width()
        )));
    }
    let rows = anchor_positions(img.height(), side, stride);
    let cols = anchor_positions(img.width(), side, stride);
    let d = side * side;
    let mut values = Vec::with_capacity(rows.len() * cols.len() * d);
    for &r in &rows {
        for &c in &cols {
            for i in 0..side {
                let start = (r + i) * img.width() + c;
                values.extend_from_slice(&img.data()[start..start + side]);
            }
        }
    }
    Ok(PatchGrid {
        side,
        stride,
        height: img.height(),
        width: img.width(),
        rows,
        cols,
        values,
    })
}

impl<F: Real> PatchGrid<F> {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.side * self.side
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Distinct anchor rows, ascending.
    pub fn anchor_rows(&self) -> &[usize] {
        &self.rows
    }

    /// Distinct anchor columns, ascending.
    pub fn anchor_cols(&self) -> &[usize] {
        &self.cols
    }

    /// Top-left `(row, col)` of patch `index` (scan order).
    #[inline]
    pub fn anchor(&self, index: usize) -> (usize, usize) {
        let nc = self.cols.len();
        (self.rows[index / nc], self.cols[index % nc])
    }

    /// Lattice coordinates `(row_index, col_index)` of patch `index`.
    #[inline]
    pub fn lattice(&self, index: usize) -> (usize, usize) {
        let nc = self.cols.len();
        (index / nc, index % nc)
    }

    #[inline]
    pub fn index_of(&self, row_index: usize, col_index: usize) -> usize {
        row_index * self.cols.len() + col_index
    }

    pub fn anchors(&self) -> Vec<(usize, usize)> {
        (0..self.len()).map(|i| self.anchor(i)).collect()
    }

    #[inline]
    pub fn patch_values(&self, index: usize) -> &[F] {
        let d = self.dim();
        &self.values[index * d..(index + 1) * d]
    }

    pub fn patch(&self, index: usize) -> Patch<F> {
        Patch {
            side: self.side,
            values: self.patch_values(index).to_vec(),
        }
    }

    pub fn patches(&self) -> Vec<Patch<F>> {
        (0..self.len()).map(|i| self.patch(i)).collect()
    }

    /// Flat storage of every patch, `len() × dim()` values.
    pub fn values(&self) -> &[F] {
        &self.values
    }
}

/// Averages overlapping patches back into an image.
pub fn reconstruct_dense<F: Real>(grid: &PatchGrid<F>, denoised: &[Patch<F>]) -> Result<Image<F>> {
    if denoised.len() != grid.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} denoised patches for a grid of {}",
            denoised.len(),
            grid.len()
        )));
    }
    let d = grid.dim();
    let mut flat = Vec::with_capacity(grid.len() * d);
    for p in denoised {
        if p.values.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "patch has {} values, grid expects {d}",
                p.values.len()
            )));
        }
        flat.extend_from_slice(&p.values);
    }
    reconstruct_dense_flat(grid, &flat)
}

/// [`reconstruct_dense`] over flat patch storage (`grid.len() × grid.dim()` values).
pub fn reconstruct_dense_flat<F: Real>(grid: &PatchGrid<F>, values: &[F]) -> Result<Image<F>> {
    let d = grid.dim();
    if values.len() != grid.len() * d {
        return Err(Error::DimensionMismatch(format!(
            "{} patch values for a grid needing {}",
            values.len(),
            grid.len() * d
        )));
    }
    let (h, w, side) = (grid.height, grid.width, grid.side);
    let mut sum = vec![F::zero(); h * w];
    let mut count = vec![0u32; h * w];
    for idx in 0..grid.len() {
        let (r, c) = grid.anchor(idx);
        let p = &values[idx * d..(idx + 1) * d];
        for i in 0..side {
            let row = (r + i) * w + c;
            for j in 0..side {
                sum[row + j] += p[i * side + j];
                count[row + j] += 1;
            }
        }
    }
    for (pos, (&n, s)) in count.iter().zip(sum.iter_mut()).enumerate() {
        if n == 0 {
            return Err(Error::CoverageGap {
                row: pos / w,
                col: pos % w,
            });
        }
        *s /= F::lit(n as f64);
    }
    Image::new(w, h, 1, sum)
}
