//! Directions on the unit sphere and q-space sampling protocols.
//!
//! Diffusion signals are antipodally symmetric, so a [`Protocol`] stores every
//! direction on the upper hemisphere. Optimization elsewhere in the crate moves
//! raw `(theta, phi)` pairs freely in R^2 and only canonicalizes for storage.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;

/// Angular tolerance below which two axes count as the same sample.
pub const DEGENERACY_TOL: f64 = 1e-9;

/// Allowed deviation from unit norm when reading bvec files.
pub const UNIT_NORM_TOL: f64 = 1e-6;

pub const DEFAULT_ELECTROSTATIC_ITERATIONS: usize = 10_000;

/// A direction in polar coordinates: `theta` from +z, `phi` from +x in the xy-plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction {
    pub theta: f64,
    pub phi: f64,
}

impl Direction {
    pub const fn new(theta: f64, phi: f64) -> Self {
        Self { theta, phi }
    }

    pub fn unit(&self) -> [f64; 3] {
        angles_to_unit(*self)
    }

    /// Recovers polar angles from a Cartesian vector (any nonzero length).
    pub fn from_vector(v: [f64; 3]) -> Result<Self> {
        let norm = norm3(v);
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cannot take direction of vector {v:?}"
            )));
        }
        let rho = v[0].hypot(v[1]);
        let theta = rho.atan2(v[2]);
        let phi = if rho == 0.0 {
            0.0
        } else {
            v[1].atan2(v[0]).rem_euclid(TAU)
        };
        Ok(Self::new(theta, wrap_phi(phi)))
    }

    /// The opposite point `(pi - theta, phi + pi)`, canonicalized.
    pub fn antipode(&self) -> Self {
        Self::new(PI - self.theta, wrap_phi(self.phi + PI))
    }

    /// Same axis, placed on the upper hemisphere (`theta <= pi/2`).
    ///
    /// On the equator `phi` is taken from `[0, pi)`; at the pole `phi = 0`.
    pub fn to_hemisphere(&self) -> Result<Self> {
        let mut d = normalize_direction(self.theta, self.phi)?;
        if d.theta > FRAC_PI_2 {
            d = Self::new(PI - d.theta, wrap_phi(d.phi + PI));
        } else if d.theta == FRAC_PI_2 && d.phi >= PI {
            d.phi -= PI;
        }
        if d.theta == 0.0 {
            d.phi = 0.0;
        }
        Ok(d)
    }
}

/// Standard spherical-to-Cartesian map.
pub fn angles_to_unit(d: Direction) -> [f64; 3] {
    let (st, ct) = d.theta.sin_cos();
    let (sp, cp) = d.phi.sin_cos();
    [st * cp, st * sp, ct]
}

fn wrap_phi(phi: f64) -> f64 {
    let p = phi.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs.
    if p >= TAU {
        0.0
    } else {
        p
    }
}

/// Canonical angles with `theta in [0, pi]`, `phi in [0, 2pi)` for the same unit vector.
pub fn normalize_direction(theta: f64, phi: f64) -> Result<Direction> {
    if !theta.is_finite() || !phi.is_finite() {
        return Err(Error::InvalidAngle { theta, phi });
    }
    let mut t = theta.rem_euclid(TAU);
    let mut p = phi;
    if t > PI {
        t = TAU - t;
        p += PI;
    }
    Ok(Direction::new(t, wrap_phi(p)))
}

pub(crate) fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Angle between two axes, ignoring sign: in `[0, pi/2]`.
pub fn axial_separation(a: [f64; 3], b: [f64; 3]) -> f64 {
    norm3(cross3(a, b)).atan2(dot3(a, b).abs())
}

/// An ordered set of sampling directions. Row `i` of any basis matrix built
/// from the protocol corresponds to `directions()[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    directions: Vec<Direction>,
    label: String,
}

impl Protocol {
    /// Validates and canonicalizes `directions` onto the upper hemisphere.
    pub fn new(directions: Vec<Direction>, label: impl Into<String>) -> Result<Self> {
        if directions.is_empty() {
            return Err(Error::InvalidArgument("protocol must be nonempty".into()));
        }
        let directions = directions
            .iter()
            .map(Direction::to_hemisphere)
            .collect::<Result<Vec<_>>>()?;
        let units: Vec<_> = directions.iter().map(Direction::unit).collect();
        for i in 0..units.len() {
            for j in 0..i {
                if axial_separation(units[i], units[j]) < DEGENERACY_TOL {
                    return Err(Error::DegenerateProtocol(j, i));
                }
            }
        }
        Ok(Self {
            directions,
            label: label.into(),
        })
    }

    pub fn from_vectors(vectors: &[[f64; 3]], label: impl Into<String>) -> Result<Self> {
        let dirs = vectors
            .iter()
            .map(|&v| Direction::from_vector(v))
            .collect::<Result<Vec<_>>>()?;
        Self::new(dirs, label)
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn directions(&self) -> &[Direction] {
        &self.directions
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn unit_vectors(&self) -> Vec<[f64; 3]> {
        self.directions.iter().map(Direction::unit).collect()
    }

    /// Smallest axial separation between any two directions, in radians.
    /// A single-direction protocol reports `pi/2`.
    pub fn min_separation(&self) -> f64 {
        let units = self.unit_vectors();
        let mut best = FRAC_PI_2;
        for i in 0..units.len() {
            for j in 0..i {
                best = best.min(axial_separation(units[i], units[j]));
            }
        }
        best
    }

    /// Same directions up to sign, compared by unit vectors.
    pub fn approx_eq(&self, other: &Protocol, tol: f64) -> bool {
        self.len() == other.len()
            && self
                .unit_vectors()
                .iter()
                .zip(other.unit_vectors())
                .all(|(a, b)| axial_separation(*a, b) <= tol)
    }
}

/// `n` directions drawn uniformly on the upper hemisphere.
pub fn random_protocol(n: usize, seed: u64) -> Result<Protocol> {
    if n == 0 {
        return Err(Error::InvalidArgument("random protocol needs n >= 1".into()));
    }
    let mut rng = seed::rng(seed);
    let dirs = (0..n)
        .map(|_| {
            let z: f64 = rng.random();
            let phi: f64 = rng.random::<f64>() * TAU;
            Direction::new(z.acos(), phi)
        })
        .collect();
    Protocol::new(dirs, format!("random-{n}"))
}

/// Antipodally symmetric Coulomb energy of a set of unit axes.
pub fn electrostatic_energy(points: &[[f64; 3]]) -> f64 {
    let mut e = 0.0;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let (p, q) = (points[i], points[j]);
            let minus = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
            let plus = [p[0] + q[0], p[1] + q[1], p[2] + q[2]];
            e += 1.0 / norm3(minus) + 1.0 / norm3(plus);
        }
    }
    e
}

fn electrostatic_gradient(points: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let mut grad = vec![[0.0; 3]; points.len()];
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let (p, q) = (points[i], points[j]);
            for sign in [-1.0, 1.0] {
                let d = [p[0] + sign * q[0], p[1] + sign * q[1], p[2] + sign * q[2]];
                let r = norm3(d);
                let k = -1.0 / (r * r * r);
                for a in 0..3 {
                    grad[i][a] += k * d[a];
                    grad[j][a] += sign * k * d[a];
                }
            }
        }
    }
    // Keep only the component tangent to the sphere.
    for (g, p) in grad.iter_mut().zip(points) {
        let radial = dot3(*g, *p);
        for a in 0..3 {
            g[a] -= radial * p[a];
        }
    }
    grad
}

/// Outcome of a repulsion run: the protocol plus the energy after each accepted step
/// (the first entry is the starting energy).
#[derive(Debug, Clone)]
pub struct Relaxation {
    pub protocol: Protocol,
    pub energy_trace: Vec<f64>,
}

impl Relaxation {
    pub fn initial_energy(&self) -> f64 {
        self.energy_trace[0]
    }

    pub fn final_energy(&self) -> f64 {
        *self.energy_trace.last().expect("trace holds the start energy")
    }
}

/// Electrostatic repulsion from a random hemisphere start.
///
/// Each iteration moves every point against its tangent energy gradient by at
/// most `step` radians. A step that raises the energy is rejected and `step` is
/// halved.
pub fn electrostatic_relaxation(n: usize, iterations: usize, seed: u64) -> Result<Relaxation> {
    if n < 2 {
        return Err(Error::InvalidArgument(
            "electrostatic protocol needs n >= 2".into(),
        ));
    }
    let start = random_protocol(n, seed::derive(seed, "electrostatic-start"))?;
    let mut points = start.unit_vectors();
    let mut energy = electrostatic_energy(&points);
    let mut trace = vec![energy];
    let mut step = 0.1;

    for _ in 0..iterations {
        if step < 1e-12 {
            break;
        }
        let grad = electrostatic_gradient(&points);
        let gmax = grad.iter().map(|g| norm3(*g)).fold(0.0, f64::max);
        if gmax == 0.0 {
            break;
        }
        let scale = step / gmax;
        let trial: Vec<[f64; 3]> = points
            .iter()
            .zip(&grad)
            .map(|(p, g)| {
                let q = [p[0] - scale * g[0], p[1] - scale * g[1], p[2] - scale * g[2]];
                let r = norm3(q);
                [q[0] / r, q[1] / r, q[2] / r]
            })
            .collect();
        let trial_energy = electrostatic_energy(&trial);
        if trial_energy < energy {
            points = trial;
            energy = trial_energy;
            trace.push(energy);
        } else {
            step *= 0.5;
        }
    }

    let protocol = Protocol::from_vectors(&points, format!("uniform-{n}"))?;
    Ok(Relaxation {
        protocol,
        energy_trace: trace,
    })
}

/// Near-uniform protocol from electrostatic repulsion.
pub fn electrostatic_protocol(n: usize, iterations: usize, seed: u64) -> Result<Protocol> {
    electrostatic_relaxation(n, iterations, seed).map(|r| r.protocol)
}

/// Renders a protocol in bvec layout: three rows (x, y, z), one column per direction.
pub fn format_bvec(p: &Protocol) -> String {
    let units = p.unit_vectors();
    let mut out = String::new();
    for axis in 0..3 {
        let row: Vec<String> = units.iter().map(|u| format!("{:.16e}", u[axis])).collect();
        writeln!(out, "{}", row.join(" ")).expect("writing to a String");
    }
    out
}

#[allow(clippy::needless_range_loop)]
pub fn parse_bvec(text: &str, label: impl Into<String>) -> Result<Protocol> {
    let rows: Vec<Vec<&str>> = text
        .lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>())
        .filter(|r| !r.is_empty())
        .collect();
    if rows.len() != 3 {
        return Err(Error::format(
            "bvec",
            format!("expected 3 rows, found {}", rows.len()),
        ));
    }
    let width = rows[0].len();
    if rows.iter().any(|r| r.len() != width) {
        let lens: Vec<_> = rows.iter().map(Vec::len).collect();
        return Err(Error::RaggedBvec(format!("row lengths {lens:?}")));
    }
    let mut parsed = [vec![], vec![], vec![]];
    for (axis, row) in rows.iter().enumerate() {
        for tok in row {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::format("bvec", format!("bad number {tok:?}")))?;
            parsed[axis].push(v);
        }
    }
    let mut vectors = Vec::with_capacity(width);
    for column in 0..width {
        let v = [parsed[0][column], parsed[1][column], parsed[2][column]];
        let norm = norm3(v);
        if norm.is_nan() || (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NonUnitDirection { column, norm });
        }
        vectors.push(v);
    }
    Protocol::from_vectors(&vectors, label)
}

pub fn write_protocol(p: &Protocol, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_bvec(p)).map_err(|e| Error::io(path, e))
}

/// Reads a bvec file; the protocol is labelled with the file stem.
pub fn read_protocol(path: impl AsRef<Path>) -> Result<Protocol> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_bvec(&text, label)
}
