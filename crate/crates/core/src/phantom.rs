//! Synthetic multi-tensor diffusion phantoms.
//!
//! A phantom is a single 2-D slice. Each voxel holds the signal at every
//! direction of the full protocol, stored as one column of an `N x V` matrix with
//! voxels in row-major order (`v = y * width + x`).

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::qspace::ShFit;
use crate::seed;
use crate::shbasis::BasisSpec;
use crate::sphere::{Direction, Protocol};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_SINGLE_FIBER: u8 = 1;
pub const LABEL_CROSSING: u8 = 2;
pub const LABEL_ISOTROPIC: u8 = 3;

/// Symmetric positive-semidefinite diffusivity tensor in mm^2/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tensor3([[f64; 3]; 3]);

impl Tensor3 {
    #[allow(clippy::needless_range_loop)]
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        for i in 0..3 {
            for j in 0..i {
                if (m[i][j] - m[j][i]).abs() > 1e-15 {
                    return Err(Error::InvalidArgument("tensor is not symmetric".into()));
                }
            }
        }
        let eig = SymmetricEigen::new(Matrix3::from_fn(|i, j| m[i][j]));
        let scale = m.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
        if eig.eigenvalues.min() < -1e-12 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::InvalidArgument("tensor has a negative eigenvalue".into()));
        }
        Ok(Self(m))
    }

    pub fn isotropic(d: f64) -> Self {
        Self([[d, 0.0, 0.0], [0.0, d, 0.0], [0.0, 0.0, d]])
    }

    /// Axially symmetric tensor `perp I + (par - perp) e e^T` around unit `axis`.
    pub fn cylinder(axis: [f64; 3], par: f64, perp: f64) -> Self {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = (par - perp) * axis[i] * axis[j];
            }
            m[i][i] += perp;
        }
        Self(m)
    }

    /// `g^T D g`
    pub fn quad(&self, g: [f64; 3]) -> f64 {
        let d = &self.0;
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                acc += g[i] * d[i][j] * g[j];
            }
        }
        acc
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        self.0
    }
}

/// `S0 * sum_i f_i exp(-b g^T D_i g)`.
pub fn tensor_signal(g: Direction, b: f64, components: &[(f64, Tensor3)], s0: f64) -> Result<f64> {
    let total: f64 = components.iter().map(|(f, _)| f).sum();
    if components.iter().any(|(f, _)| *f < 0.0) || (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "volume fractions must be >= 0 and sum to 1, got sum {total}"
        )));
    }
    let u = g.unit();
    Ok(signal_unchecked(u, b, components, s0))
}

fn signal_unchecked(u: [f64; 3], b: f64, components: &[(f64, Tensor3)], s0: f64) -> f64 {
    s0 * components
        .iter()
        .map(|(f, d)| f * (-b * d.quad(u)).exp())
        .sum::<f64>()
}

/// Tissue and layout parameters shared by all phantoms of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub lambda_par: f64,
    pub lambda_perp: f64,
    pub iso_diffusivity: f64,
    pub s0: f64,
    /// Angle between the two fiber populations of the crossing region, radians.
    pub crossing_angle: f64,
    /// Project every voxel onto the SH basis of this order.
    pub band_limit: Option<BasisSpec>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            lambda_par: 1.7e-3,
            lambda_perp: 0.2e-3,
            iso_diffusivity: 0.8e-3,
            s0: 1.0,
            crossing_angle: PI / 3.0,
            band_limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomImage {
    pub width: usize,
    pub height: usize,
    pub bvalue: f64,
    /// Seed of the spatial layout; shared by every b-value rendering of one phantom.
    pub seed: u64,
    pub labels: Vec<u8>,
    pub signals: DMatrix<f64>,
    pub protocol: Arc<Protocol>,
}

impl PhantomImage {
    pub fn voxels(&self) -> usize {
        self.width * self.height
    }

    pub fn signal(&self, x: usize, y: usize) -> &[f64] {
        let n = self.protocol.len();
        let v = y * self.width + x;
        &self.signals.as_slice()[v * n..(v + 1) * n]
    }

    pub fn label(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }
}

fn fiber_axis(azimuth: f64, elevation: f64) -> [f64; 3] {
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    [ce * ca, ce * sa, se]
}

/// Spatial layout drawn from the phantom seed.
struct Layout {
    center: (f64, f64),
    radii: (f64, f64),
    azimuth0: f64,
    rotation: f64,
    elevation: f64,
    crossing_center: (f64, f64),
    crossing_radius: f64,
    crossing_azimuth: f64,
    iso_center: (f64, f64),
    iso_radius: f64,
}

impl Layout {
    fn draw(width: usize, height: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed::derive(seed, "layout"));
        let (w, h) = (width as f64, height as f64);
        let short = w.min(h);
        let center = (
            w / 2.0 + rng.random_range(-0.04..0.04) * w,
            h / 2.0 + rng.random_range(-0.04..0.04) * h,
        );
        let radii = (
            rng.random_range(0.40..0.46) * w,
            rng.random_range(0.40..0.46) * h,
        );
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let crossing_center = (
            center.0 + side * rng.random_range(0.12..0.2) * w,
            center.1 + rng.random_range(-0.15..0.15) * h,
        );
        let iso_center = (
            center.0 - side * rng.random_range(0.15..0.22) * w,
            center.1 + rng.random_range(-0.15..0.15) * h,
        );
        Self {
            center,
            radii,
            azimuth0: rng.random_range(0.0..PI),
            rotation: rng.random_range(0.5 * PI..PI),
            elevation: rng.random_range(-0.35..0.35),
            crossing_center,
            crossing_radius: rng.random_range(0.14..0.2) * short,
            crossing_azimuth: rng.random_range(0.0..PI),
            iso_center,
            iso_radius: rng.random_range(0.08..0.12) * short,
        }
    }
}

/// Renders a noiseless phantom: an elliptical object on a zero background, split
/// into three single-fiber bands whose orientation rotates smoothly across the
/// slice, plus one crossing-fiber disk (50/50 mix) and one isotropic disk.
pub fn make_phantom(
    width: usize,
    height: usize,
    protocol: &Arc<Protocol>,
    b: f64,
    seed: u64,
    config: &PhantomConfig,
) -> Result<PhantomImage> {
    if width < 8 || height < 8 {
        return Err(Error::InvalidArgument(format!(
            "phantom must be at least 8x8, got {width}x{height}"
        )));
    }
    if !(b >= 0.0 && b.is_finite()) {
        return Err(Error::InvalidArgument(format!("b-value must be >= 0, got {b}")));
    }
    let layout = Layout::draw(width, height, seed);
    let units = protocol.unit_vectors();
    let n = units.len();
    let mut labels = vec![LABEL_BACKGROUND; width * height];
    let mut signals = DMatrix::zeros(n, width * height);
    let bands = 3.0;

    for y in 0..height {
        for x in 0..width {
            let v = y * width + x;
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = |c: (f64, f64), r: f64| (px - c.0).powi(2) + (py - c.1).powi(2) <= r * r;
            let ex = (px - layout.center.0) / layout.radii.0;
            let ey = (py - layout.center.1) / layout.radii.1;
            if ex * ex + ey * ey > 1.0 {
                continue;
            }
            let components: Vec<(f64, Tensor3)> = if inside(layout.crossing_center, layout.crossing_radius) {
                labels[v] = LABEL_CROSSING;
                let a = fiber_axis(layout.crossing_azimuth, 0.0);
                let c = fiber_axis(layout.crossing_azimuth + config.crossing_angle, 0.0);
                vec![
                    (0.5, Tensor3::cylinder(a, config.lambda_par, config.lambda_perp)),
                    (0.5, Tensor3::cylinder(c, config.lambda_par, config.lambda_perp)),
                ]
            } else if inside(layout.iso_center, layout.iso_radius) {
                labels[v] = LABEL_ISOTROPIC;
                vec![(1.0, Tensor3::isotropic(config.iso_diffusivity))]
            } else {
                labels[v] = LABEL_SINGLE_FIBER;
                let band = ((py / height as f64) * bands).floor().min(bands - 1.0);
                let azimuth = layout.azimuth0
                    + band * PI / bands
                    + layout.rotation * (px / width as f64 - 0.5);
                let axis = fiber_axis(azimuth, layout.elevation);
                vec![(1.0, Tensor3::cylinder(axis, config.lambda_par, config.lambda_perp))]
            };
            for (i, u) in units.iter().enumerate() {
                signals[(i, v)] = signal_unchecked(*u, b, &components, config.s0);
            }
        }
    }

    if let Some(spec) = config.band_limit {
        let fit = ShFit::new(protocol, spec);
        signals = fit.basis().values() * fit.coefficients_batch(&signals)?;
    }

    Ok(PhantomImage {
        width,
        height,
        bvalue: b,
        seed,
        labels,
        signals,
        protocol: Arc::clone(protocol),
    })
}

/// Rician magnitude noise: `sqrt((S + e1)^2 + e2^2)` with `e1, e2 ~ N(0, sigma^2)`.
pub fn add_noise(img: &PhantomImage, sigma: f64, seed: u64) -> Result<PhantomImage> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut out = img.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    let mut rng = seed::rng(seed);
    for s in out.signals.iter_mut() {
        let re = *s + normal.sample(&mut rng);
        let im = normal.sample(&mut rng);
        *s = re.hypot(im);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub count: usize,
    /// Train/validation/test fractions; must sum to 1.
    pub ratios: [f64; 3],
    pub width: usize,
    pub height: usize,
    pub bvalues: Vec<f64>,
    pub sigma: f64,
    pub seed: u64,
    pub phantom: PhantomConfig,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 255,
            ratios: [200.0 / 255.0, 24.0 / 255.0, 31.0 / 255.0],
            width: 32,
            height: 32,
            bvalues: vec![1000.0, 2000.0, 3000.0],
            sigma: 0.02,
            seed: 1,
            phantom: PhantomConfig::default(),
        }
    }
}

impl DatasetSpec {
    /// Split sizes: validation and test are rounded, training takes the rest.
    pub fn split_sizes(&self) -> Result<[usize; 3]> {
        let sum: f64 = self.ratios.iter().sum();
        if self.ratios.iter().any(|r| *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split ratios must be >= 0 and sum to 1, got {:?}",
                self.ratios
            )));
        }
        let val = (self.count as f64 * self.ratios[1]).round() as usize;
        let test = (self.count as f64 * self.ratios[2]).round() as usize;
        let train = self
            .count
            .checked_sub(val + test)
            .ok_or_else(|| Error::InvalidArgument("split sizes exceed count".into()))?;
        Ok([train, val, test])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Phantoms of every split at every b-value. Each phantom seed appears in one
/// split only; its renderings at different b-values share the layout.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub protocol: Arc<Protocol>,
    pub train: Vec<PhantomImage>,
    pub val: Vec<PhantomImage>,
    pub test: Vec<PhantomImage>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[PhantomImage] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Phantoms of a split rendered at `b`.
    pub fn at_b(&self, split: Split, b: f64) -> Vec<&PhantomImage> {
        self.split(split).iter().filter(|p| p.bvalue == b).collect()
    }

    /// Owned copies of [`Dataset::at_b`], for APIs that take a slice of images.
    pub fn images_at(&self, split: Split, b: f64) -> Vec<PhantomImage> {
        self.at_b(split, b).into_iter().cloned().collect()
    }

    /// Distinct layout seeds of a split, in generation order.
    pub fn seeds(&self, split: Split) -> Vec<u64> {
        let mut out: Vec<u64> = Vec::new();
        for p in self.split(split) {
            if !out.contains(&p.seed) {
                out.push(p.seed);
            }
        }
        out
    }
}

pub fn phantom_seed(master: u64, index: usize) -> u64 {
    seed::derive_indexed(master, "phantom", index as u64)
}

pub fn noise_seed(phantom_seed: u64, b: f64) -> u64 {
    seed::derive_indexed(phantom_seed, "noise", b.to_bits())
}

pub fn make_dataset(spec: &DatasetSpec, protocol: &Arc<Protocol>) -> Result<Dataset> {
    let sizes = spec.split_sizes()?;
    if spec.bvalues.is_empty() {
        return Err(Error::InvalidArgument("dataset needs at least one b-value".into()));
    }
    let mut splits: [Vec<PhantomImage>; 3] = Default::default();
    let mut index = 0;
    for (s, &size) in sizes.iter().enumerate() {
        for _ in 0..size {
            let pseed = phantom_seed(spec.seed, index);
            index += 1;
            for &b in &spec.bvalues {
                let clean = make_phantom(spec.width, spec.height, protocol, b, pseed, &spec.phantom)?;
                splits[s].push(add_noise(&clean, spec.sigma, noise_seed(pseed, b))?);
            }
        }
    }
    let [train, val, test] = splits;
    Ok(Dataset {
        spec: spec.clone(),
        protocol: Arc::clone(protocol),
        train,
        val,
        test,
    })
}

const PHANTOM_MAGIC: &str = "qsamp-phantom 1";

/// Writes the phantom container. `protocol_ref` is stored verbatim in the header
/// and resolved relative to the container's directory on read.
///
/// ```text
/// qsamp-phantom 1
/// width <W>
/// height <H>
/// directions <N>
/// bvalue <b>
/// seed <u64>
/// protocol <path>
/// labels <W*H space-separated integers>
/// end
/// <W*H*N little-endian f64, voxel-major (v = y*W + x), direction fastest>
/// ```
pub fn write_phantom(img: &PhantomImage, path: impl AsRef<Path>, protocol_ref: &str) -> Result<()> {
    let path = path.as_ref();
    let mut header = String::new();
    writeln!(header, "{PHANTOM_MAGIC}").unwrap();
    writeln!(header, "width {}", img.width).unwrap();
    writeln!(header, "height {}", img.height).unwrap();
    writeln!(header, "directions {}", img.protocol.len()).unwrap();
    writeln!(header, "bvalue {}", img.bvalue).unwrap();
    writeln!(header, "seed {}", img.seed).unwrap();
    writeln!(header, "protocol {protocol_ref}").unwrap();
    let labels: Vec<String> = img.labels.iter().map(u8::to_string).collect();
    writeln!(header, "labels {}", labels.join(" ")).unwrap();
    writeln!(header, "end").unwrap();

    let mut bytes = header.into_bytes();
    bytes.reserve(img.signals.len() * 8);
    for v in img.signals.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    crate::atomic_write(path, &bytes)
}

fn header_value<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| Error::format("phantom", format!("expected '{key}', found {line:?}")))
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::format("phantom", format!("bad {what}: {s:?}")))
}

/// Reads a container, loading the referenced protocol unless `protocol` is given.
pub fn read_phantom(path: impl AsRef<Path>, protocol: Option<&Arc<Protocol>>) -> Result<PhantomImage> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut lines = Vec::new();
    loop {
        let mut line = String::new();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::format("phantom", "missing 'end' line"));
        }
        let line = line.trim_end_matches('\n').to_string();
        if line == "end" {
            break;
        }
        lines.push(line);
        if lines.len() > 8 {
            return Err(Error::format("phantom", "header too long"));
        }
    }
    if lines.len() != 8 || lines[0] != PHANTOM_MAGIC {
        return Err(Error::format("phantom", "bad header"));
    }
    let width: usize = parse_num(header_value(&lines[1], "width")?, "width")?;
    let height: usize = parse_num(header_value(&lines[2], "height")?, "height")?;
    let n: usize = parse_num(header_value(&lines[3], "directions")?, "directions")?;
    let bvalue: f64 = parse_num(header_value(&lines[4], "bvalue")?, "bvalue")?;
    let seed: u64 = parse_num(header_value(&lines[5], "seed")?, "seed")?;
    let protocol_ref = header_value(&lines[6], "protocol")?;
    let labels = header_value(&lines[7], "labels")?
        .split_whitespace()
        .map(|t| parse_num::<u8>(t, "label"))
        .collect::<Result<Vec<_>>>()?;
    if labels.len() != width * height {
        return Err(Error::format("phantom", "label count does not match size"));
    }

    let protocol = match protocol {
        Some(p) => Arc::clone(p),
        None => {
            let base = path.parent().unwrap_or(Path::new("."));
            Arc::new(crate::sphere::read_protocol(base.join(protocol_ref))?)
        }
    };
    if protocol.len() != n {
        return Err(Error::ProtocolMismatch(format!(
            "container has {n} directions, protocol has {}",
            protocol.len()
        )));
    }

    let mut blob = Vec::new();
    reader.read_to_end(&mut blob).map_err(|e| Error::io(path, e))?;
    let expected = width * height * n * 8;
    if blob.len() != expected {
        return Err(Error::format(
            "phantom",
            format!("expected {expected} data bytes, found {}", blob.len()),
        ));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of 8")))
        .collect();
    Ok(PhantomImage {
        width,
        height,
        bvalue,
        seed,
        labels,
        signals: DMatrix::from_vec(n, width * height, values),
        protocol,
    })
}
