//! Degradation synthesis, metrics, image I/O and experiment runs.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::operators::{AnalysisOperator, ForwardOperator, ImageGrid, Kernel};
use crate::penalties::{BlockPenalty, PenaltyTag};
use crate::solvers::{
    joint_solve_observed, posterior_refit, solve_biased_observed, IterationInfo, PrimalDualParams,
    SupportRule,
};

/// Generator behind every seeded draw in this module.
pub const RNG_ALGORITHM: &str = "ChaCha20 (rand_chacha 0.9), normals by ziggurat (rand_distr 0.5)";

pub const PSNR_CAP_DB: f64 = 99.0;

pub const METRICS_HEADER: &str = "task,penalty,lambda,iterations,psnr_input,psnr_biased,psnr_refit";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Denoise,
    Deblur,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Denoise => "denoise",
            Task::Deblur => "deblur",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the refitted image is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefitMode {
    /// Biased and refit iterations in lockstep.
    #[default]
    Joint,
    /// Refit after the biased solve has finished.
    Posterior,
}

impl FromStr for RefitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "joint" => Ok(RefitMode::Joint),
            "posterior" => Ok(RefitMode::Posterior),
            other => Err(Error::InvalidParameter(format!("unknown refit mode `{other}`"))),
        }
    }
}

/// Clean image source: a PNG file or the synthetic generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageSource {
    Png(PathBuf),
    Synthetic { height: usize, width: usize },
}

impl fmt::Display for ImageSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageSource::Png(p) => write!(f, "png:{}", p.display()),
            ImageSource::Synthetic { height, width } => write!(f, "synthetic:{height}x{width}"),
        }
    }
}

impl FromStr for ImageSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(dims) = s.strip_prefix("synthetic:") {
            let (height, width) = parse_dims(dims)?;
            Ok(ImageSource::Synthetic { height, width })
        } else if let Some(path) = s.strip_prefix("png:") {
            Ok(ImageSource::Png(PathBuf::from(path)))
        } else {
            Err(Error::InvalidParameter(format!("unknown image source `{s}`")))
        }
    }
}

/// Parses `HxW`.
pub fn parse_dims(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidParameter(format!("expected HxW, got `{s}`"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn as_display<T: fmt::Display, S: Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn from_str_de<'de, T, D>(d: D) -> std::result::Result<T, D::Error>
where
    T: FromStr<Err = Error>,
    D: Deserializer<'de>,
{
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(serialize_with = "as_display", deserialize_with = "from_str_de")]
    pub source: ImageSource,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_std: f64,
    pub lambda_factor: f64,
    #[serde(serialize_with = "as_display", deserialize_with = "from_str_de")]
    pub penalty: PenaltyTag,
    pub mode: RefitMode,
    pub iterations: usize,
    pub tau: f64,
    pub sigma: f64,
    pub theta: f64,
    pub seed: u64,
    pub blur_length: usize,
    pub blur_angle: f64,
}

impl ExperimentConfig {
    pub fn denoise(source: ImageSource, noise_std: f64, penalty: PenaltyTag, seed: u64) -> Self {
        let p = PrimalDualParams::new(1.0);
        Self {
            task: Task::Denoise,
            source,
            noise_std,
            lambda_factor: crate::solvers::LAMBDA_PER_NOISE_STD,
            penalty,
            mode: RefitMode::Joint,
            iterations: p.iterations,
            tau: p.tau,
            sigma: p.sigma,
            theta: p.theta,
            seed,
            blur_length: 9,
            blur_angle: 45.0,
        }
    }

    pub fn deblur(source: ImageSource, noise_std: f64, penalty: PenaltyTag, seed: u64) -> Self {
        Self {
            task: Task::Deblur,
            ..Self::denoise(source, noise_std, penalty, seed)
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda_factor * self.noise_std
    }

    pub fn params(&self) -> PrimalDualParams {
        PrimalDualParams {
            tau: self.tau,
            sigma: self.sigma,
            theta: self.theta,
            iterations: self.iterations,
            lambda: self.lambda(),
            tolerance: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise_std must be nonnegative, got {}",
                self.noise_std
            )));
        }
        if !(self.lambda_factor > 0.0 && self.lambda_factor.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lambda_factor must be positive, got {}",
                self.lambda_factor
            )));
        }
        if self.task == Task::Deblur {
            if self.blur_length == 0 {
                return Err(Error::InvalidParameter("blur_length must be positive".into()));
            }
            if !self.blur_angle.is_finite() {
                return Err(Error::InvalidParameter("blur_angle must be finite".into()));
            }
        }
        Ok(())
    }

    /// Key-value text block, with the generator named in a header comment.
    pub fn to_text(&self) -> String {
        let body = toml::to_string(self).expect("config fields are plain values");
        format!("# rng: {RNG_ALGORITHM}\n{body}")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidParameter(format!("bad config: {e}")))
    }

    pub fn forward_operator(&self, height: usize, width: usize) -> Result<ForwardOperator> {
        match self.task {
            Task::Denoise => Ok(ForwardOperator::Identity),
            Task::Deblur => {
                let kernel = Kernel::motion(self.blur_length, self.blur_angle)?;
                ForwardOperator::convolution(kernel, height, width)
            }
        }
    }
}

/// `x + w` with `w` i.i.d. `N(0, std²)`, drawn in storage order.
pub fn add_gaussian_noise(x: &ImageGrid, std: f64, seed: u64) -> Result<ImageGrid> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise std must be nonnegative, got {std}")));
    }
    if std == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = x.clone();
    for v in out.as_mut_slice() {
        *v += normal.sample(&mut rng);
    }
    Ok(out)
}

/// `10 log₁₀(peak² / MSE)` over all pixels and channels, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(x: &ImageGrid, reference: &ImageGrid, peak: f64) -> Result<f64> {
    reference.check_dims(x)?;
    let n = x.len().max(1) as f64;
    let mse = x.distance(reference).powi(2) / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Piecewise-constant RGB test image: a background plus one rectangle inside
/// each quadrant, all with distinct integer colors.
pub fn synthetic_color_squares(height: usize, width: usize, seed: u64) -> Result<ImageGrid> {
    if height < 16 || width < 16 {
        return Err(Error::InvalidParameter(format!(
            "synthetic image needs at least 16x16, got {height}x{width}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut colors: Vec<[f64; 3]> = Vec::with_capacity(5);
    while colors.len() < 5 {
        let c = [0; 3].map(|_| rng.random_range(20..=235) as f64);
        let distinct = colors
            .iter()
            .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b).abs()).sum::<f64>() >= 60.0);
        if distinct {
            colors.push(c);
        }
    }
    let (hh, hw) = (height / 2, width / 2);
    let mut rects = Vec::with_capacity(4);
    for (qi, qj) in [(0, 0), (0, hw), (hh, 0), (hh, hw)] {
        let qh = if qi == 0 { hh } else { height - hh };
        let qw = if qj == 0 { hw } else { width - hw };
        // at least two pixels of background around each rectangle
        let top = qi + rng.random_range(2..=qh / 4);
        let left = qj + rng.random_range(2..=qw / 4);
        let bottom = qi + qh - rng.random_range(2..=qh / 4);
        let right = qj + qw - rng.random_range(2..=qw / 4);
        rects.push((top, left, bottom, right));
    }
    Ok(ImageGrid::from_fn(height, width, 3, |c, i, j| {
        let region = rects
            .iter()
            .position(|&(t, l, b, r)| i >= t && i < b && j >= l && j < r)
            .map_or(0, |k| k + 1);
        colors[region][c]
    }))
}

/// Loads an 8-bit grayscale or RGB PNG (palette and sub-byte gray are
/// expanded).
pub fn load_png(path: &Path) -> Result<ImageGrid> {
    let file = File::open(path)?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(decoding_error)?;
    if reader.info().bit_depth == png::BitDepth::Sixteen {
        return Err(Error::UnsupportedFormat("16-bit PNG".into()));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::UnsupportedFormat("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(decoding_error)?;
    let channels = match (frame.color_type, frame.bit_depth) {
        (png::ColorType::Grayscale, png::BitDepth::Eight) => 1,
        (png::ColorType::Rgb, png::BitDepth::Eight) => 3,
        (ct, bd) => {
            return Err(Error::UnsupportedFormat(format!("{ct:?} at {bd:?} bits")));
        }
    };
    let (h, w) = (frame.height as usize, frame.width as usize);
    let bytes = &buf[..frame.buffer_size()];
    let mut img = ImageGrid::zeros(h, w, channels);
    for i in 0..h {
        let row = &bytes[i * frame.line_size..];
        for j in 0..w {
            for c in 0..channels {
                img.set(c, i, j, row[j * channels + c] as f64);
            }
        }
    }
    Ok(img)
}

fn decoding_error(e: png::DecodingError) -> Error {
    match e {
        png::DecodingError::IoError(io) => Error::Io(io),
        other => Error::UnsupportedFormat(other.to_string()),
    }
}

/// Saves as 8-bit PNG; values are clamped to `[0, 255]` and rounded.
pub fn save_png(path: &Path, img: &ImageGrid) -> Result<()> {
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::UnsupportedFormat(format!("{c} channels"))),
    };
    let (h, w, ch) = img.dims();
    let mut data = Vec::with_capacity(h * w * ch);
    for i in 0..h {
        for j in 0..w {
            for c in 0..ch {
                data.push(img.get(c, i, j).clamp(0.0, 255.0).round() as u8);
            }
        }
    }
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let encoding = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::Io(io),
        other => Error::UnsupportedFormat(other.to_string()),
    };
    let mut writer = encoder.write_header().map_err(encoding)?;
    writer.write_image_data(&data).map_err(encoding)?;
    writer.finish().map_err(encoding)?;
    Ok(())
}

pub fn load_source(source: &ImageSource, seed: u64) -> Result<ImageGrid> {
    match source {
        ImageSource::Png(path) => load_png(path),
        ImageSource::Synthetic { height, width } => synthetic_color_squares(*height, *width, seed),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub psnr_input: f64,
    pub psnr_biased: f64,
    pub psnr_refit: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub clean: ImageGrid,
    /// Degraded observation `y`.
    pub observed: ImageGrid,
    pub biased: ImageGrid,
    pub refit: ImageGrid,
    pub metrics: Metrics,
}

/// Biased and refitted reconstructions of an observation `y`.
pub fn reconstruct(
    phi: &ForwardOperator,
    y: &ImageGrid,
    params: &PrimalDualParams,
    penalty: &BlockPenalty,
    mode: RefitMode,
    observer: &mut dyn FnMut(&IterationInfo<'_>),
) -> Result<(ImageGrid, ImageGrid)> {
    let gamma = AnalysisOperator::isotropic_for(y)?;
    Ok(match mode {
        RefitMode::Joint => {
            let out = joint_solve_observed(phi, &gamma, y, params, penalty, SupportRule::Strict, observer)?;
            (out.biased.x, out.refit.x)
        }
        RefitMode::Posterior => {
            let b = solve_biased_observed(phi, &gamma, y, params, observer)?;
            let refit = posterior_refit(phi, &gamma, y, params, penalty, b.xhat(), b.zhat())?;
            (b.state.x, refit)
        }
    })
}

/// Degrades `clean`, solves the biased problem and refits.
pub fn run_experiment(config: &ExperimentConfig, clean: &ImageGrid) -> Result<ExperimentResult> {
    run_experiment_observed(config, clean, &mut |_| {})
}

/// [`run_experiment`] with per-iteration diagnostics (of the joint loop, or
/// of the biased solve in posterior mode).
pub fn run_experiment_observed(
    config: &ExperimentConfig,
    clean: &ImageGrid,
    observer: &mut dyn FnMut(&IterationInfo<'_>),
) -> Result<ExperimentResult> {
    config.validate()?;
    let phi = config.forward_operator(clean.height(), clean.width())?;
    let observed = add_gaussian_noise(&phi.apply(clean)?, config.noise_std, config.seed)?;
    let params = config.params();
    let penalty = BlockPenalty::new(config.penalty, params.lambda)?;
    let (biased, refit) = reconstruct(&phi, &observed, &params, &penalty, config.mode, observer)?;
    let metrics = Metrics {
        psnr_input: psnr(&observed, clean, 255.0)?,
        psnr_biased: psnr(&biased, clean, 255.0)?,
        psnr_refit: psnr(&refit, clean, 255.0)?,
    };
    Ok(ExperimentResult {
        clean: clean.clone(),
        observed,
        biased,
        refit,
        metrics,
    })
}

/// Header plus one row.
pub fn metrics_csv(config: &ExperimentConfig, m: &Metrics) -> String {
    format!(
        "{METRICS_HEADER}\n{},{},{},{},{:.6},{:.6},{:.6}\n",
        config.task,
        config.penalty,
        config.lambda(),
        config.iterations,
        m.psnr_input,
        m.psnr_biased,
        m.psnr_refit
    )
}
