//! Images, analysis operators (gradients, identity) and forward operators
//! (identity, periodic convolution) together with their adjoints, the
//! resolvent `(Id + τΦᵀΦ)⁻¹` and a power-iteration norm estimate.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::blocks::BlockVector;
use crate::error::{Error, Result};

/// `height × width × channels` real image, stored channel-planar
/// (`data[(c * height + i) * width + j]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidParameter(format!(
                "image dimensions must be positive (got {height}x{width}x{channels})"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::dims(height * width * channels, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("image entries must be finite".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && channels > 0);
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// `f(channel, row, col)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut img = Self::zeros(height, width, channels);
        for c in 0..channels {
            for i in 0..height {
                for j in 0..width {
                    img.data[(c * height + i) * width + j] = f(c, i, j);
                }
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, channel: usize, row: usize, col: usize, value: f64) {
        self.data[(channel * self.height + row) * self.width + col] = value;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn dot(&self, other: &ImageGrid) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(&self, other: &ImageGrid) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageGrid {
        ImageGrid {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn same_dims(&self, other: &ImageGrid) -> bool {
        self.dims() == other.dims()
    }

    pub(crate) fn check_dims(&self, other: &ImageGrid) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::dims(
                format!("{:?}", self.dims()),
                format!("{:?}", other.dims()),
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalysisKind {
    /// Per-pixel stack `(∇ₓᴿ, ∇ᵧᴿ, ∇ₓᴳ, ∇ᵧᴳ, ∇ₓᴮ, ∇ᵧᴮ)`: `m = h·w`, `b = 6`.
    ColorGradient,
    /// Per-pixel `(∇ₓ, ∇ᵧ)` of a single channel: `m = h·w`, `b = 2`.
    ScalarGradient,
    /// All horizontal then all vertical differences: `m = 2·h·w`, `b = 1`.
    AnisotropicTv,
    /// `m = h·w·c`, `b = 1`.
    Identity,
}

/// Linear map from images to block vectors (`Γ`). Gradients use forward
/// differences with replicate boundaries, so the last column (row) of the
/// horizontal (vertical) difference is zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnalysisOperator {
    kind: AnalysisKind,
    height: usize,
    width: usize,
    channels: usize,
}

impl AnalysisOperator {
    pub fn new(kind: AnalysisKind, height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidParameter("operator geometry must be positive".into()));
        }
        let expected = match kind {
            AnalysisKind::ColorGradient => Some(3),
            AnalysisKind::ScalarGradient | AnalysisKind::AnisotropicTv => Some(1),
            AnalysisKind::Identity => None,
        };
        if let Some(c) = expected {
            if c != channels {
                return Err(Error::dims(format!("{c} channel(s)"), format!("{channels} channel(s)")));
            }
        }
        Ok(Self {
            kind,
            height,
            width,
            channels,
        })
    }

    pub fn color_gradient(height: usize, width: usize) -> Self {
        Self::new(AnalysisKind::ColorGradient, height, width, 3).expect("valid geometry")
    }

    pub fn scalar_gradient(height: usize, width: usize) -> Self {
        Self::new(AnalysisKind::ScalarGradient, height, width, 1).expect("valid geometry")
    }

    pub fn anisotropic_tv(height: usize, width: usize) -> Self {
        Self::new(AnalysisKind::AnisotropicTv, height, width, 1).expect("valid geometry")
    }

    pub fn identity(height: usize, width: usize, channels: usize) -> Self {
        Self::new(AnalysisKind::Identity, height, width, channels).expect("valid geometry")
    }

    /// Isotropic gradient matching the channel count of an image:
    /// scalar for grayscale, color-stacked for RGB.
    pub fn isotropic_for(image: &ImageGrid) -> Result<Self> {
        let kind = match image.channels() {
            1 => AnalysisKind::ScalarGradient,
            3 => AnalysisKind::ColorGradient,
            c => {
                return Err(Error::UnsupportedFormat(format!(
                    "isotropic gradient needs 1 or 3 channels, got {c}"
                )))
            }
        };
        Self::new(kind, image.height(), image.width(), image.channels())
    }

    pub fn kind(&self) -> AnalysisKind {
        self.kind
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn m(&self) -> usize {
        let n = self.height * self.width;
        match self.kind {
            AnalysisKind::ColorGradient | AnalysisKind::ScalarGradient => n,
            AnalysisKind::AnisotropicTv => 2 * n,
            AnalysisKind::Identity => n * self.channels,
        }
    }

    pub fn b(&self) -> usize {
        match self.kind {
            AnalysisKind::ColorGradient | AnalysisKind::ScalarGradient => 2 * self.channels,
            AnalysisKind::AnisotropicTv | AnalysisKind::Identity => 1,
        }
    }

    pub fn zeros_codomain(&self) -> BlockVector {
        BlockVector::zeros(self.m(), self.b())
    }

    pub fn zeros_domain(&self) -> ImageGrid {
        ImageGrid::zeros(self.height, self.width, self.channels)
    }

    fn check_image(&self, x: &ImageGrid) -> Result<()> {
        if x.dims() != self.image_dims() {
            return Err(Error::dims(
                format!("{:?}", self.image_dims()),
                format!("{:?}", x.dims()),
            ));
        }
        Ok(())
    }

    fn check_blocks(&self, z: &BlockVector) -> Result<()> {
        if z.m() != self.m() || z.b() != self.b() {
            return Err(Error::dims(
                format!("{}x{} blocks", self.m(), self.b()),
                format!("{}x{} blocks", z.m(), z.b()),
            ));
        }
        Ok(())
    }

    pub fn apply(&self, x: &ImageGrid) -> Result<BlockVector> {
        self.check_image(x)?;
        let mut out = self.zeros_codomain();
        self.apply_into(x, &mut out);
        Ok(out)
    }

    /// `out ← Γx`; shapes are the caller's responsibility.
    pub(crate) fn apply_into(&self, x: &ImageGrid, out: &mut BlockVector) {
        let (h, w, ch) = (self.height, self.width, self.channels);
        let n = h * w;
        let src = x.as_slice();
        let b = self.b();
        let dst = out.as_mut_slice();
        match self.kind {
            AnalysisKind::Identity => dst.copy_from_slice(src),
            AnalysisKind::ColorGradient | AnalysisKind::ScalarGradient => {
                for c in 0..ch {
                    let u = &src[c * n..(c + 1) * n];
                    for i in 0..h {
                        for j in 0..w {
                            let p = i * w + j;
                            let dx = if j + 1 < w { u[p + 1] - u[p] } else { 0.0 };
                            let dy = if i + 1 < h { u[p + w] - u[p] } else { 0.0 };
                            dst[p * b + 2 * c] = dx;
                            dst[p * b + 2 * c + 1] = dy;
                        }
                    }
                }
            }
            AnalysisKind::AnisotropicTv => {
                let u = src;
                for i in 0..h {
                    for j in 0..w {
                        let p = i * w + j;
                        dst[p] = if j + 1 < w { u[p + 1] - u[p] } else { 0.0 };
                        dst[n + p] = if i + 1 < h { u[p + w] - u[p] } else { 0.0 };
                    }
                }
            }
        }
    }

    pub fn adjoint(&self, z: &BlockVector) -> Result<ImageGrid> {
        self.check_blocks(z)?;
        let mut out = self.zeros_domain();
        self.adjoint_into(z, &mut out);
        Ok(out)
    }

    /// `out ← Γᵀz` (negative divergence for the gradient kinds).
    pub(crate) fn adjoint_into(&self, z: &BlockVector, out: &mut ImageGrid) {
        let (h, w, ch) = (self.height, self.width, self.channels);
        let n = h * w;
        let b = self.b();
        let src = z.as_slice();
        let dst = out.as_mut_slice();
        match self.kind {
            AnalysisKind::Identity => dst.copy_from_slice(src),
            AnalysisKind::ColorGradient | AnalysisKind::ScalarGradient => {
                for c in 0..ch {
                    let u = &mut dst[c * n..(c + 1) * n];
                    for i in 0..h {
                        for j in 0..w {
                            let p = i * w + j;
                            let mut acc = 0.0;
                            if j + 1 < w {
                                acc -= src[p * b + 2 * c];
                            }
                            if j > 0 {
                                acc += src[(p - 1) * b + 2 * c];
                            }
                            if i + 1 < h {
                                acc -= src[p * b + 2 * c + 1];
                            }
                            if i > 0 {
                                acc += src[(p - w) * b + 2 * c + 1];
                            }
                            u[p] = acc;
                        }
                    }
                }
            }
            AnalysisKind::AnisotropicTv => {
                let (gx, gy) = src.split_at(n);
                for i in 0..h {
                    for j in 0..w {
                        let p = i * w + j;
                        let mut acc = 0.0;
                        if j + 1 < w {
                            acc -= gx[p];
                        }
                        if j > 0 {
                            acc += gx[p - 1];
                        }
                        if i + 1 < h {
                            acc -= gy[p];
                        }
                        if i > 0 {
                            acc += gy[p - w];
                        }
                        dst[p] = acc;
                    }
                }
            }
        }
    }

    /// Power-iteration lower estimate of `‖ΓᵀΓ‖` (the Rayleigh quotient
    /// after `iters` steps from a fixed pseudo-random start).
    pub fn norm_sq_estimate(&self, iters: usize) -> f64 {
        let iters = iters.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut x = self.zeros_domain();
        x.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = rng.random::<f64>() - 0.5);
        let mut gx = self.zeros_codomain();
        let mut estimate = 0.0;
        for _ in 0..iters {
            let nx = x.norm();
            if nx == 0.0 {
                return 0.0;
            }
            x.as_mut_slice().iter_mut().for_each(|v| *v /= nx);
            self.apply_into(&x, &mut gx);
            estimate = gx.as_slice().iter().map(|v| v * v).sum::<f64>();
            self.adjoint_into(&gx, &mut x);
        }
        estimate
    }
}

/// Dense 2-D filter kernel; its origin is the entry `(rows / 2, cols / 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Kernel {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidParameter("kernel must be nonempty".into()));
        }
        if data.len() != rows * cols {
            return Err(Error::dims(rows * cols, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("kernel entries must be finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn delta() -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![1.0],
        }
    }

    /// Normalized linear motion blur of `length` pixels along `angle_deg`
    /// (counter-clockwise from the horizontal axis, image rows pointing
    /// down). The segment is supersampled and splatted bilinearly.
    pub fn motion(length: usize, angle_deg: f64) -> Result<Self> {
        if length == 0 {
            return Err(Error::InvalidParameter("blur length must be >= 1".into()));
        }
        if !angle_deg.is_finite() {
            return Err(Error::InvalidParameter("blur angle must be finite".into()));
        }
        if length == 1 {
            return Ok(Self::delta());
        }
        let half = (length - 1) as f64 / 2.0;
        let radius = half.ceil() as usize + 1;
        let size = 2 * radius + 1;
        let mut data = vec![0.0; size * size];
        let (sin, cos) = angle_deg.to_radians().sin_cos();
        let samples = 8 * length + 1;
        for s in 0..samples {
            let t = -half + 2.0 * half * s as f64 / (samples - 1) as f64;
            let x = radius as f64 + t * cos;
            let y = radius as f64 - t * sin;
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            let (x0, y0) = (x0 as usize, y0 as usize);
            for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                    let weight = wx * wy;
                    if weight > 0.0 {
                        data[(y0 + dy) * size + x0 + dx] += weight;
                    }
                }
            }
        }
        let total: f64 = data.iter().sum();
        data.iter_mut().for_each(|v| *v /= total);
        Self::new(size, size, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.data[a * self.cols + b]
    }

    /// Point reflection about the kernel origin.
    pub fn flipped(&self) -> Kernel {
        let (ca, cb) = (self.rows / 2, self.cols / 2);
        // keep the origin fixed: reflected entry (a, b) lands at (2ca - a, 2cb - b)
        let rows = 2 * ca.max(self.rows - 1 - ca) + 1;
        let cols = 2 * cb.max(self.cols - 1 - cb) + 1;
        let (na, nb) = (rows / 2, cols / 2);
        let mut data = vec![0.0; rows * cols];
        for a in 0..self.rows {
            for b in 0..self.cols {
                let ra = na + ca - a;
                let rb = nb + cb - b;
                data[ra * cols + rb] = self.get(a, b);
            }
        }
        Kernel { rows, cols, data }
    }
}

/// Periodic convolution on a fixed `height × width` grid, applied to every
/// channel independently.
#[derive(Clone)]
pub struct Convolution {
    kernel: Kernel,
    height: usize,
    width: usize,
    /// `|K̂|²` on the `height × width` frequency grid.
    transfer_sq: Vec<f64>,
    fft_rows: Arc<dyn Fft<f64>>,
    ifft_rows: Arc<dyn Fft<f64>>,
    fft_cols: Arc<dyn Fft<f64>>,
    ifft_cols: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Convolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Convolution")
            .field("kernel", &self.kernel)
            .field("height", &self.height)
            .field("width", &self.width)
            .finish_non_exhaustive()
    }
}

impl Convolution {
    pub fn new(kernel: Kernel, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidParameter("grid must be nonempty".into()));
        }
        let mut planner = FftPlanner::new();
        let mut conv = Self {
            fft_rows: planner.plan_fft_forward(width),
            ifft_rows: planner.plan_fft_inverse(width),
            fft_cols: planner.plan_fft_forward(height),
            ifft_cols: planner.plan_fft_inverse(height),
            kernel,
            height,
            width,
            transfer_sq: Vec::new(),
        };
        let mut embedded = vec![Complex::new(0.0, 0.0); height * width];
        let (ca, cb) = (conv.kernel.rows / 2, conv.kernel.cols / 2);
        for a in 0..conv.kernel.rows {
            for b in 0..conv.kernel.cols {
                let i = wrap(a as isize - ca as isize, height);
                let j = wrap(b as isize - cb as isize, width);
                embedded[i * width + j].re += conv.kernel.get(a, b);
            }
        }
        conv.fft2(&mut embedded, false);
        conv.transfer_sq = embedded.iter().map(|c| c.norm_sqr()).collect();
        Ok(conv)
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    fn fft2(&self, buf: &mut [Complex<f64>], inverse: bool) {
        let (h, w) = (self.height, self.width);
        let (rows, cols) = if inverse {
            (&self.ifft_rows, &self.ifft_cols)
        } else {
            (&self.fft_rows, &self.fft_cols)
        };
        rows.process(buf);
        let mut transposed = vec![Complex::new(0.0, 0.0); h * w];
        for i in 0..h {
            for j in 0..w {
                transposed[j * h + i] = buf[i * w + j];
            }
        }
        cols.process(&mut transposed);
        for i in 0..h {
            for j in 0..w {
                buf[i * w + j] = transposed[j * h + i];
            }
        }
    }

    fn correlate(&self, x: &ImageGrid, kernel_sign: isize) -> ImageGrid {
        let (h, w, ch) = x.dims();
        let k = &self.kernel;
        let (ca, cb) = ((k.rows / 2) as isize, (k.cols / 2) as isize);
        let mut out = ImageGrid::zeros(h, w, ch);
        for c in 0..ch {
            let src = x.channel(c);
            let dst = &mut out.as_mut_slice()[c * h * w..(c + 1) * h * w];
            for a in 0..k.rows {
                for b in 0..k.cols {
                    let kv = k.get(a, b);
                    if kv == 0.0 {
                        continue;
                    }
                    // forward: out(i,j) += k(a,b) x(i - (a-ca), j - (b-cb))
                    // adjoint: out(i,j) += k(a,b) x(i + (a-ca), j + (b-cb))
                    let da = -kernel_sign * (a as isize - ca);
                    let db = -kernel_sign * (b as isize - cb);
                    for i in 0..h {
                        let si = wrap(i as isize + da, h);
                        for j in 0..w {
                            let sj = wrap(j as isize + db, w);
                            dst[i * w + j] += kv * src[si * w + sj];
                        }
                    }
                }
            }
        }
        out
    }

    fn resolvent(&self, tau: f64, r: &ImageGrid) -> ImageGrid {
        let (h, w, ch) = r.dims();
        let scale = 1.0 / (h * w) as f64;
        let mut out = ImageGrid::zeros(h, w, ch);
        let mut buf = vec![Complex::new(0.0, 0.0); h * w];
        for c in 0..ch {
            for (dst, &v) in buf.iter_mut().zip(r.channel(c)) {
                *dst = Complex::new(v, 0.0);
            }
            self.fft2(&mut buf, false);
            for (v, &t) in buf.iter_mut().zip(&self.transfer_sq) {
                *v /= 1.0 + tau * t;
            }
            self.fft2(&mut buf, true);
            let dst = &mut out.as_mut_slice()[c * h * w..(c + 1) * h * w];
            for (d, v) in dst.iter_mut().zip(&buf) {
                *d = v.re * scale;
            }
        }
        out
    }
}

fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// Degradation operator `Φ`.
#[derive(Debug, Clone)]
pub enum ForwardOperator {
    Identity,
    Convolution(Convolution),
}

impl ForwardOperator {
    pub fn convolution(kernel: Kernel, height: usize, width: usize) -> Result<Self> {
        Ok(ForwardOperator::Convolution(Convolution::new(
            kernel, height, width,
        )?))
    }

    fn check(&self, x: &ImageGrid) -> Result<()> {
        if let ForwardOperator::Convolution(conv) = self {
            if (x.height(), x.width()) != (conv.height, conv.width) {
                return Err(Error::dims(
                    format!("{}x{} grid", conv.height, conv.width),
                    format!("{}x{} grid", x.height(), x.width()),
                ));
            }
        }
        Ok(())
    }

    pub fn apply(&self, x: &ImageGrid) -> Result<ImageGrid> {
        self.check(x)?;
        Ok(match self {
            ForwardOperator::Identity => x.clone(),
            ForwardOperator::Convolution(conv) => conv.correlate(x, 1),
        })
    }

    pub fn adjoint(&self, y: &ImageGrid) -> Result<ImageGrid> {
        self.check(y)?;
        Ok(match self {
            ForwardOperator::Identity => y.clone(),
            ForwardOperator::Convolution(conv) => conv.correlate(y, -1),
        })
    }

    /// Solves `(Id + τΦᵀΦ) x = r`.
    pub fn resolvent(&self, tau: f64, r: &ImageGrid) -> Result<ImageGrid> {
        if !(tau > 0.0) {
            return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
        }
        self.check(r)?;
        Ok(match self {
            ForwardOperator::Identity => r.map(|v| v / (1.0 + tau)),
            ForwardOperator::Convolution(conv) => conv.resolvent(tau, r),
        })
    }

    /// `(Id + τΦᵀΦ) x`.
    pub fn normal_apply(&self, tau: f64, x: &ImageGrid) -> Result<ImageGrid> {
        let ata = self.adjoint(&self.apply(x)?)?;
        let mut out = x.clone();
        out.as_mut_slice()
            .iter_mut()
            .zip(ata.as_slice())
            .for_each(|(o, a)| *o += tau * a);
        Ok(out)
    }
}
