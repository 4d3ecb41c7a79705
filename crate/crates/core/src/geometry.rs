//! Periodic lattices, per-site metric fields and the low-dimensional charts
//! used to parameterize them during estimation.
//!
//! Sites are stored in row-major order: in two dimensions the site with
//! coordinates `(i, j)` has index `i * n1 + j`, so axis 0 is the slow axis.
//! Per-site metric tensors are handled as 2×2 matrices; one-dimensional
//! metrics are embedded with a unit `(1, 1)` entry that never couples to
//! any link.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix2, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Bound on `|2ω|` for conformal metrics.
pub const MAX_CONFORMAL_EXPONENT: f64 = 20.0;

/// Periodic rectangular lattice with uniform spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeGeometry {
    extents: Vec<usize>,
    spacing: f64,
}

impl LatticeGeometry {
    pub fn new(extents: Vec<usize>, spacing: f64) -> Result<Self> {
        if extents.is_empty() || extents.len() > 2 {
            return Err(Error::InvalidLattice(format!(
                "dimension must be 1 or 2, got {}",
                extents.len()
            )));
        }
        for (axis, &n) in extents.iter().enumerate() {
            if n < 4 || n % 2 != 0 {
                return Err(Error::InvalidLattice(format!(
                    "extent along axis {axis} must be even and at least 4, got {n}"
                )));
            }
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::InvalidLattice(format!(
                "spacing must be positive and finite, got {spacing}"
            )));
        }
        Ok(Self { extents, spacing })
    }

    pub fn ring(n: usize, spacing: f64) -> Result<Self> {
        Self::new(vec![n], spacing)
    }

    pub fn torus(n0: usize, n1: usize, spacing: f64) -> Result<Self> {
        Self::new(vec![n0, n1], spacing)
    }

    pub fn dim(&self) -> usize {
        self.extents.len()
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn site_count(&self) -> usize {
        self.extents.iter().product()
    }

    /// `aᵈ`, the coordinate volume of one site.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.dim() as i32)
    }

    /// Number of independent symmetric tensor components per site.
    pub fn tensor_components(&self) -> usize {
        let d = self.dim();
        d * (d + 1) / 2
    }

    pub fn coords(&self, site: usize) -> [usize; 2] {
        match self.dim() {
            1 => [site, 0],
            _ => [site / self.extents[1], site % self.extents[1]],
        }
    }

    pub fn site(&self, coords: [usize; 2]) -> usize {
        match self.dim() {
            1 => coords[0] % self.extents[0],
            _ => (coords[0] % self.extents[0]) * self.extents[1] + coords[1] % self.extents[1],
        }
    }

    /// Periodic neighbour of `site` displaced by `step` along `axis`.
    pub fn shift(&self, site: usize, axis: usize, step: isize) -> usize {
        let mut c = self.coords(site);
        let n = self.extents[axis] as isize;
        c[axis] = (c[axis] as isize + step).rem_euclid(n) as usize;
        self.site(c)
    }

    /// Integer coordinate of `site` along `axis`.
    pub fn index_along(&self, site: usize, axis: usize) -> usize {
        self.coords(site)[axis]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    /// `g = e^{2ω} δ` with one `ω` per site.
    ConformalFlat,
    /// Full symmetric positive-definite tensor per site: `(g11)` in one
    /// dimension, `(g11, g12, g22)` in two.
    #[serde(alias = "FullSym2D")]
    FullSym,
}

/// Per-site metric on a lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricField {
    geometry: LatticeGeometry,
    kind: MetricKind,
    data: Vec<f64>,
}

impl MetricField {
    pub fn flat(geometry: &LatticeGeometry) -> Self {
        Self {
            geometry: geometry.clone(),
            kind: MetricKind::ConformalFlat,
            data: vec![0.0; geometry.site_count()],
        }
    }

    pub fn conformal(geometry: &LatticeGeometry, omega: Vec<f64>) -> Result<Self> {
        Self::from_parts(geometry.clone(), MetricKind::ConformalFlat, omega)
    }

    /// Full metric from per-site lower components, `[g11]` or `[g11, g12, g22]`
    /// flattened site by site.
    pub fn full_sym(geometry: &LatticeGeometry, components: Vec<f64>) -> Result<Self> {
        Self::from_parts(geometry.clone(), MetricKind::FullSym, components)
    }

    /// Full metric from per-site lower tensors; only the leading `dim × dim`
    /// block is read.
    pub fn from_tensors(geometry: &LatticeGeometry, tensors: &[Matrix2<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(tensors.len() * geometry.tensor_components());
        for g in tensors {
            if geometry.dim() == 1 {
                data.push(g[(0, 0)]);
            } else {
                data.extend_from_slice(&[g[(0, 0)], 0.5 * (g[(0, 1)] + g[(1, 0)]), g[(1, 1)]]);
            }
        }
        Self::full_sym(geometry, data)
    }

    pub fn from_parts(geometry: LatticeGeometry, kind: MetricKind, data: Vec<f64>) -> Result<Self> {
        let per_site = match kind {
            MetricKind::ConformalFlat => 1,
            MetricKind::FullSym => geometry.tensor_components(),
        };
        let expected = geometry.site_count() * per_site;
        if data.len() != expected {
            return Err(Error::SizeMismatch {
                what: "metric data",
                expected,
                actual: data.len(),
            });
        }
        let metric = Self {
            geometry,
            kind,
            data,
        };
        metric.validate()?;
        Ok(metric)
    }

    fn validate(&self) -> Result<()> {
        let n = self.geometry.site_count();
        for site in 0..n {
            match self.kind {
                MetricKind::ConformalFlat => {
                    let w = self.data[site];
                    if !w.is_finite() || (2.0 * w).abs() >= MAX_CONFORMAL_EXPONENT {
                        return Err(Error::InvalidMetric {
                            site,
                            reason: format!("conformal factor omega = {w} outside the conditioning bound"),
                        });
                    }
                }
                MetricKind::FullSym => {
                    let c = self.site_components(site);
                    if c.iter().any(|v| !v.is_finite()) {
                        return Err(Error::InvalidMetric {
                            site,
                            reason: "non-finite component".into(),
                        });
                    }
                    let det = if c.len() == 1 { c[0] } else { c[0] * c[2] - c[1] * c[1] };
                    if c[0] <= 0.0 || det <= 0.0 {
                        return Err(Error::InvalidMetric {
                            site,
                            reason: format!("not positive definite (g11 = {}, det = {det})", c[0]),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn geometry(&self) -> &LatticeGeometry {
        &self.geometry
    }

    pub fn kind(&self) -> MetricKind {
        self.kind
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn components_per_site(&self) -> usize {
        match self.kind {
            MetricKind::ConformalFlat => 1,
            MetricKind::FullSym => self.geometry.tensor_components(),
        }
    }

    fn site_components(&self, site: usize) -> &[f64] {
        let k = self.components_per_site();
        &self.data[site * k..(site + 1) * k]
    }

    /// Lower metric `g_{μν}` at a site (embedded 2×2).
    pub fn lower(&self, site: usize) -> Matrix2<f64> {
        let d = self.geometry.dim();
        match self.kind {
            MetricKind::ConformalFlat => {
                let s = (2.0 * self.data[site]).exp();
                if d == 1 {
                    Matrix2::new(s, 0.0, 0.0, 1.0)
                } else {
                    Matrix2::new(s, 0.0, 0.0, s)
                }
            }
            MetricKind::FullSym => {
                let c = self.site_components(site);
                if d == 1 {
                    Matrix2::new(c[0], 0.0, 0.0, 1.0)
                } else {
                    Matrix2::new(c[0], c[1], c[1], c[2])
                }
            }
        }
    }

    /// Inverse metric `g^{μν}` at a site.
    pub fn inverse(&self, site: usize) -> Matrix2<f64> {
        inverse2(&self.lower(site))
    }

    /// `√g` at a site.
    pub fn sqrt_det(&self, site: usize) -> f64 {
        match self.kind {
            MetricKind::ConformalFlat => (self.geometry.dim() as f64 * self.data[site]).exp(),
            MetricKind::FullSym => self.lower(site).determinant().sqrt(),
        }
    }

    /// Densitized inverse metric `√g g^{μν}`, the coefficient of the
    /// kinetic term.
    pub fn densitized_inverse(&self, site: usize) -> Matrix2<f64> {
        self.inverse(site) * self.sqrt_det(site)
    }

    /// Site mass weights `√g(x)·aᵈ`.
    pub fn mass_weights(&self) -> Vec<f64> {
        let cell = self.geometry.cell_volume();
        (0..self.geometry.site_count())
            .map(|x| self.sqrt_det(x) * cell)
            .collect()
    }

    /// Total volume `Σ √g aᵈ`.
    pub fn volume(&self) -> f64 {
        self.mass_weights().iter().sum()
    }

    pub fn to_document(&self) -> MetricDocument {
        let mut data = BTreeMap::new();
        match self.kind {
            MetricKind::ConformalFlat => {
                data.insert("omega".to_string(), self.data.clone());
            }
            MetricKind::FullSym => {
                let k = self.components_per_site();
                let names: &[&str] = if k == 1 { &["g11"] } else { &["g11", "g12", "g22"] };
                for (c, name) in names.iter().enumerate() {
                    data.insert(
                        name.to_string(),
                        self.data.iter().skip(c).step_by(k).copied().collect(),
                    );
                }
            }
        }
        MetricDocument {
            dim: self.geometry.dim(),
            extents: self.geometry.extents.clone(),
            spacing: self.geometry.spacing,
            kind: self.kind,
            data,
        }
    }

    pub fn from_document(doc: &MetricDocument) -> Result<Self> {
        if doc.dim != doc.extents.len() {
            return Err(Error::InvalidLattice(format!(
                "dim = {} but {} extents given",
                doc.dim,
                doc.extents.len()
            )));
        }
        let geometry = LatticeGeometry::new(doc.extents.clone(), doc.spacing)?;
        let take = |name: &str| -> Result<&Vec<f64>> {
            doc.data
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("metric document lacks data.{name}")))
        };
        let expected_keys: &[&str] = match (doc.kind, geometry.dim()) {
            (MetricKind::ConformalFlat, _) => &["omega"],
            (MetricKind::FullSym, 1) => &["g11"],
            (MetricKind::FullSym, _) => &["g11", "g12", "g22"],
        };
        if let Some(extra) = doc.data.keys().find(|k| !expected_keys.contains(&k.as_str())) {
            return Err(Error::InvalidArgument(format!("unexpected metric data key {extra:?}")));
        }
        let n = geometry.site_count();
        let mut data = Vec::with_capacity(n * expected_keys.len());
        let columns = expected_keys.iter().map(|k| take(k)).collect::<Result<Vec<_>>>()?;
        for col in &columns {
            if col.len() != n {
                return Err(Error::SizeMismatch {
                    what: "metric data column",
                    expected: n,
                    actual: col.len(),
                });
            }
        }
        for site in 0..n {
            for col in &columns {
                data.push(col[site]);
            }
        }
        Self::from_parts(geometry, doc.kind, data)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MetricDocument = serde_json::from_str(text)?;
        Self::from_document(&doc)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn content_hash(&self) -> String {
        let json = self.to_json().expect("metric documents always serialize");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// JSON layout of a metric field. Arrays are per-site in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricDocument {
    pub dim: usize,
    pub extents: Vec<usize>,
    pub spacing: f64,
    pub kind: MetricKind,
    pub data: BTreeMap<String, Vec<f64>>,
}

pub(crate) fn inverse2(m: &Matrix2<f64>) -> Matrix2<f64> {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det
}

/// Total volume `Σ √g aᵈ`.
pub fn volume(metric: &MetricField) -> f64 {
    metric.volume()
}

/// Scalar curvature of a two-dimensional conformal metric,
/// `R = -2 e^{-2ω} Δ ω` with the periodic five-point Laplacian.
pub fn scalar_curvature_2d(metric: &MetricField) -> Result<Vec<f64>> {
    let geom = metric.geometry();
    if geom.dim() != 2 {
        return Err(Error::Unsupported {
            op: "scalar_curvature_2d",
            reason: format!("{}-dimensional lattices", geom.dim()),
        });
    }
    if metric.kind() != MetricKind::ConformalFlat {
        return Err(Error::Unsupported {
            op: "scalar_curvature_2d",
            reason: "full symmetric metrics".into(),
        });
    }
    let omega = metric.data();
    let a2 = geom.spacing() * geom.spacing();
    Ok((0..geom.site_count())
        .map(|x| {
            let lap: f64 = (0..2)
                .map(|axis| {
                    omega[geom.shift(x, axis, 1)] + omega[geom.shift(x, axis, -1)] - 2.0 * omega[x]
                })
                .sum::<f64>()
                / a2;
            -2.0 * (-2.0 * omega[x]).exp() * lap
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    G11,
    G12,
    G22,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    #[default]
    Cos,
    Sin,
}

/// Recipe for one chart direction. For full metrics `component` selects the
/// perturbed entry; `None` perturbs `g11` and `g22` together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DirectionSpec {
    Constant {
        #[serde(default)]
        component: Option<Component>,
        #[serde(default = "unit")]
        scale: f64,
    },
    Fourier {
        axis: usize,
        mode: usize,
        #[serde(default)]
        phase: Phase,
        #[serde(default)]
        component: Option<Component>,
        #[serde(default = "unit")]
        scale: f64,
    },
    Delta {
        site: usize,
        #[serde(default)]
        component: Option<Component>,
        #[serde(default = "unit")]
        scale: f64,
    },
}

fn unit() -> f64 {
    1.0
}

impl DirectionSpec {
    /// Per-site perturbation vector laid out like the base metric's data.
    pub fn build(&self, base: &MetricField) -> Result<Vec<f64>> {
        let geom = base.geometry();
        let n = geom.site_count();
        let (profile, component, scale): (Vec<f64>, Option<Component>, f64) = match *self {
            DirectionSpec::Constant { component, scale } => (vec![1.0; n], component, scale),
            DirectionSpec::Fourier {
                axis,
                mode,
                phase,
                component,
                scale,
            } => {
                if axis >= geom.dim() {
                    return Err(Error::InvalidArgument(format!("axis {axis} on a {}-d lattice", geom.dim())));
                }
                let len = geom.extents()[axis] as f64;
                let profile = (0..n)
                    .map(|x| {
                        let arg = 2.0 * PI * mode as f64 * geom.index_along(x, axis) as f64 / len;
                        match phase {
                            Phase::Cos => arg.cos(),
                            Phase::Sin => arg.sin(),
                        }
                    })
                    .collect();
                (profile, component, scale)
            }
            DirectionSpec::Delta {
                site,
                component,
                scale,
            } => {
                if site >= n {
                    return Err(Error::InvalidArgument(format!("site {site} out of range")));
                }
                let mut p = vec![0.0; n];
                p[site] = 1.0;
                (p, component, scale)
            }
        };
        match base.kind() {
            MetricKind::ConformalFlat => {
                if component.is_some() {
                    return Err(Error::InvalidArgument(
                        "conformal charts do not take a tensor component".into(),
                    ));
                }
                Ok(profile.into_iter().map(|v| v * scale).collect())
            }
            MetricKind::FullSym => {
                let k = base.components_per_site();
                let slots: Vec<usize> = match (k, component) {
                    (1, None) | (1, Some(Component::G11)) => vec![0],
                    (1, Some(c)) => {
                        return Err(Error::InvalidArgument(format!("component {c:?} on a 1-d lattice")))
                    }
                    (_, None) => vec![0, 2],
                    (_, Some(Component::G11)) => vec![0],
                    (_, Some(Component::G12)) => vec![1],
                    (_, Some(Component::G22)) => vec![2],
                };
                let mut out = vec![0.0; n * k];
                for (x, v) in profile.iter().enumerate() {
                    for &s in &slots {
                        out[x * k + s] = v * scale;
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Finite-dimensional chart `θ ↦ base + Σ θᵢ directionᵢ` over a box.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricChart {
    base: MetricField,
    directions: Vec<Vec<f64>>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl MetricChart {
    pub fn new(base: MetricField, directions: Vec<Vec<f64>>, bounds: Vec<(f64, f64)>) -> Result<Self> {
        if directions.is_empty() {
            return Err(Error::InvalidArgument("a chart needs at least one direction".into()));
        }
        if bounds.len() != directions.len() {
            return Err(Error::SizeMismatch {
                what: "chart bounds",
                expected: directions.len(),
                actual: bounds.len(),
            });
        }
        let len = base.data().len();
        for d in &directions {
            if d.len() != len {
                return Err(Error::SizeMismatch {
                    what: "chart direction",
                    expected: len,
                    actual: d.len(),
                });
            }
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("chart direction has non-finite entries".into()));
            }
        }
        for &(lo, hi) in &bounds {
            if !(lo < hi) {
                return Err(Error::InvalidArgument(format!("empty chart interval [{lo}, {hi}]")));
            }
        }
        let k = directions.len();
        let norms: Vec<f64> = directions.iter().map(|d| d.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        if norms.contains(&0.0) {
            return Err(Error::InvalidArgument("chart direction is identically zero".into()));
        }
        let gram = DMatrix::from_fn(k, k, |i, j| {
            directions[i]
                .iter()
                .zip(&directions[j])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / (norms[i] * norms[j])
        });
        let min_eig = SymmetricEigen::new(gram).eigenvalues.min();
        if min_eig < 1e-10 {
            return Err(Error::InvalidArgument(format!(
                "chart directions are linearly dependent (Gram eigenvalue {min_eig:e})"
            )));
        }
        let (lower, upper) = bounds.into_iter().unzip();
        Ok(Self {
            base,
            directions,
            lower,
            upper,
        })
    }

    /// Chart from direction recipes, all sharing the same box `[lo, hi]`.
    pub fn from_specs(base: MetricField, specs: &[DirectionSpec], lo: f64, hi: f64) -> Result<Self> {
        let dirs = specs.iter().map(|s| s.build(&base)).collect::<Result<Vec<_>>>()?;
        let bounds = vec![(lo, hi); dirs.len()];
        Self::new(base, dirs, bounds)
    }

    pub fn base(&self) -> &MetricField {
        &self.base
    }

    pub fn geometry(&self) -> &LatticeGeometry {
        self.base.geometry()
    }

    pub fn dimension(&self) -> usize {
        self.directions.len()
    }

    pub fn directions(&self) -> &[Vec<f64>] {
        &self.directions
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.lower.iter().copied().zip(self.upper.iter().copied()).collect()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dimension()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(t, (lo, hi))| t.is_finite() && *lo <= *t && *t <= *hi)
    }

    /// The chart with direction `i` multiplied by `factor` (box rescaled to
    /// cover the same metrics).
    pub fn rescaled(&self, i: usize, factor: f64) -> Result<Self> {
        let mut dirs = self.directions.clone();
        dirs[i].iter_mut().for_each(|v| *v *= factor);
        let mut bounds = self.bounds();
        let (lo, hi) = bounds[i];
        bounds[i] = if factor > 0.0 { (lo / factor, hi / factor) } else { (hi / factor, lo / factor) };
        Self::new(self.base.clone(), dirs, bounds)
    }

    pub fn metric(&self, theta: &[f64]) -> Result<MetricField> {
        if theta.len() != self.dimension() {
            return Err(Error::SizeMismatch {
                what: "chart parameters",
                expected: self.dimension(),
                actual: theta.len(),
            });
        }
        if !self.contains(theta) {
            return Err(Error::ChartOutOfRange(format!(
                "theta = {theta:?} outside the box {:?}",
                self.bounds()
            )));
        }
        let mut data = self.base.data().to_vec();
        for (t, dir) in theta.iter().zip(&self.directions) {
            for (v, d) in data.iter_mut().zip(dir) {
                *v += t * d;
            }
        }
        MetricField::from_parts(self.base.geometry().clone(), self.base.kind(), data)
            .map_err(|e| Error::ChartOutOfRange(format!("theta = {theta:?} leaves the metric domain: {e}")))
    }

    /// Per-site lower-metric perturbation `∂g_{μν}/∂θᵢ` at `metric`.
    pub fn lower_derivative(&self, metric: &MetricField, i: usize) -> Vec<Matrix2<f64>> {
        let geom = metric.geometry();
        let d = geom.dim();
        let dir = &self.directions[i];
        (0..geom.site_count())
            .map(|x| match metric.kind() {
                MetricKind::ConformalFlat => {
                    let g = metric.lower(x);
                    let mut out = Matrix2::zeros();
                    for mu in 0..d {
                        out[(mu, mu)] = 2.0 * g[(mu, mu)] * dir[x];
                    }
                    out
                }
                MetricKind::FullSym => {
                    if d == 1 {
                        Matrix2::new(dir[x], 0.0, 0.0, 0.0)
                    } else {
                        let c = &dir[3 * x..3 * x + 3];
                        Matrix2::new(c[0], c[1], c[1], c[2])
                    }
                }
            })
            .collect()
    }

    /// Per-site inverse-metric derivative `∂g^{μν}/∂θᵢ = -g⁻¹ (∂g) g⁻¹`.
    pub fn inverse_derivative(&self, metric: &MetricField, i: usize) -> Vec<Matrix2<f64>> {
        let d = metric.geometry().dim();
        self.lower_derivative(metric, i)
            .into_iter()
            .enumerate()
            .map(|(x, dg)| {
                let inv = block(&metric.inverse(x), d);
                -(inv * dg * inv)
            })
            .collect()
    }

    /// `∂ volume / ∂θᵢ` at `metric`.
    pub fn volume_gradient(&self, metric: &MetricField) -> Vec<f64> {
        let geom = metric.geometry();
        let d = geom.dim();
        let cell = geom.cell_volume();
        (0..self.dimension())
            .map(|i| {
                self.lower_derivative(metric, i)
                    .iter()
                    .enumerate()
                    .map(|(x, dg)| {
                        let inv = block(&metric.inverse(x), d);
                        0.5 * metric.sqrt_det(x) * (inv * dg).trace() * cell
                    })
                    .sum()
            })
            .collect()
    }

    /// For conformal charts: a direction that is a uniform `ω` shift, with
    /// its per-site value.
    pub fn uniform_conformal_direction(&self) -> Option<(usize, f64)> {
        if self.base.kind() != MetricKind::ConformalFlat {
            return None;
        }
        self.directions.iter().enumerate().find_map(|(i, d)| {
            let v = d[0];
            (v != 0.0 && d.iter().all(|&x| x == v)).then_some((i, v))
        })
    }
}

/// Zero everything outside the leading `d × d` block.
pub(crate) fn block(m: &Matrix2<f64>, d: usize) -> Matrix2<f64> {
    if d == 2 {
        *m
    } else {
        Matrix2::new(m[(0, 0)], 0.0, 0.0, 0.0)
    }
}

/// `chart_metric(chart, θ)`.
pub fn chart_metric(chart: &MetricChart, theta: &[f64]) -> Result<MetricField> {
    chart.metric(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lattice_rejects_bad_extents() {
        assert!(LatticeGeometry::ring(3, 1.0).is_err());
        assert!(LatticeGeometry::ring(6, 0.0).is_err());
        assert!(LatticeGeometry::torus(4, 5, 1.0).is_err());
        assert!(LatticeGeometry::new(vec![4, 4, 4], 1.0).is_err());
    }

    #[test]
    fn periodic_shifts_wrap() {
        let g = LatticeGeometry::torus(4, 6, 1.0).unwrap();
        let x = g.site([0, 5]);
        assert_eq!(g.coords(g.shift(x, 1, 1)), [0, 0]);
        assert_eq!(g.coords(g.shift(x, 0, -1)), [3, 5]);
    }

    #[test]
    fn flat_volume_counts_cells() {
        let g = LatticeGeometry::torus(8, 8, 0.5).unwrap();
        assert_eq!(volume(&MetricField::flat(&g)), 16.0);
    }

    #[test]
    fn volume_of_constant_full_metric() {
        let g = LatticeGeometry::ring(4, 1.0).unwrap();
        let m = MetricField::full_sym(&g, vec![4.0; 4]).unwrap();
        assert_eq!(volume(&m), 8.0);
    }

    #[test]
    fn volume_matches_site_sum() {
        let g = LatticeGeometry::torus(8, 8, 1.0).unwrap();
        let omega: Vec<f64> = (0..64)
            .map(|x| 0.1 * (2.0 * PI * g.index_along(x, 0) as f64 / 8.0).cos())
            .collect();
        // Each row of eight sites shares one value of x₁.
        let expected: f64 = (0..8)
            .map(|i| 8.0 * (0.2 * (2.0 * PI * i as f64 / 8.0).cos()).exp())
            .sum();
        let m = MetricField::conformal(&g, omega).unwrap();
        assert!((volume(&m) - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn curvature_of_constant_conformal_factor_vanishes() {
        let g = LatticeGeometry::torus(6, 6, 0.7).unwrap();
        let m = MetricField::conformal(&g, vec![0.4; 36]).unwrap();
        assert!(scalar_curvature_2d(&m).unwrap().iter().all(|r| r.abs() < 1e-14));
    }

    #[test]
    fn curvature_small_amplitude_series() {
        let n = 32;
        let g = LatticeGeometry::torus(n, n, 1.0).unwrap();
        let eps = 1e-4;
        let k = 2.0 * PI / n as f64;
        let omega: Vec<f64> = (0..n * n).map(|x| eps * (k * g.index_along(x, 0) as f64).cos()).collect();
        let r = scalar_curvature_2d(&MetricField::conformal(&g, omega).unwrap()).unwrap();
        for x in 0..n * n {
            let series = 2.0 * eps * k * k * (k * g.index_along(x, 0) as f64).cos();
            assert!((r[x] - series).abs() < 1e-6, "site {x}: {} vs {series}", r[x]);
        }
    }

    #[test]
    fn curvature_rejects_full_and_1d() {
        let g2 = LatticeGeometry::torus(4, 4, 1.0).unwrap();
        let full = MetricField::full_sym(&g2, [1.0, 0.0, 1.0].repeat(16)).unwrap();
        assert!(scalar_curvature_2d(&full).is_err());
        let g1 = LatticeGeometry::ring(4, 1.0).unwrap();
        assert!(scalar_curvature_2d(&MetricField::flat(&g1)).is_err());
    }

    #[test]
    fn full_metric_must_be_spd() {
        let g = LatticeGeometry::torus(4, 4, 1.0).unwrap();
        let mut data = [1.0, 0.0, 1.0].repeat(16);
        data[3 * 5 + 1] = 1.5;
        assert!(matches!(
            MetricField::full_sym(&g, data),
            Err(Error::InvalidMetric { site: 5, .. })
        ));
    }

    #[test]
    fn chart_identity_and_shift() {
        let g = LatticeGeometry::torus(4, 4, 1.0).unwrap();
        let base = MetricField::flat(&g);
        let chart = MetricChart::from_specs(
            base.clone(),
            &[DirectionSpec::Constant { component: None, scale: 1.0 }],
            -1.0,
            1.0,
        )
        .unwrap();
        assert_eq!(chart.metric(&[0.0]).unwrap(), base);
        assert!(chart.metric(&[0.3]).unwrap().data().iter().all(|&w| w == 0.3));
        assert!(matches!(chart.metric(&[1.5]), Err(Error::ChartOutOfRange(_))));
    }

    #[test]
    fn chart_two_fourier_directions() {
        let g = LatticeGeometry::torus(8, 8, 1.0).unwrap();
        let chart = MetricChart::from_specs(
            MetricField::flat(&g),
            &[
                DirectionSpec::Fourier { axis: 0, mode: 1, phase: Phase::Cos, component: None, scale: 1.0 },
                DirectionSpec::Fourier { axis: 1, mode: 2, phase: Phase::Sin, component: None, scale: 1.0 },
            ],
            -1.0,
            1.0,
        )
        .unwrap();
        let m = chart.metric(&[0.1, -0.05]).unwrap();
        for x in 0..64 {
            let [i, j] = g.coords(x);
            let expected = 0.1 * (2.0 * PI * i as f64 / 8.0).cos() - 0.05 * (4.0 * PI * j as f64 / 8.0).sin();
            assert!((m.data()[x] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn chart_detects_spd_violation() {
        let g = LatticeGeometry::torus(4, 4, 1.0).unwrap();
        let base = MetricField::full_sym(&g, [1.0, 0.0, 1.0].repeat(16)).unwrap();
        let chart = MetricChart::from_specs(
            base,
            &[DirectionSpec::Constant { component: Some(Component::G12), scale: 1.0 }],
            -2.0,
            2.0,
        )
        .unwrap();
        assert!(chart.metric(&[0.5]).is_ok());
        assert!(matches!(chart.metric(&[1.2]), Err(Error::ChartOutOfRange(_))));
    }

    #[test]
    fn dependent_directions_rejected() {
        let g = LatticeGeometry::ring(4, 1.0).unwrap();
        let r = MetricChart::new(
            MetricField::flat(&g),
            vec![vec![1.0; 4], vec![2.0; 4]],
            vec![(-1.0, 1.0); 2],
        );
        assert!(r.is_err());
    }

    #[test]
    fn volume_gradient_matches_finite_difference() {
        let g = LatticeGeometry::torus(4, 4, 0.8).unwrap();
        let base = MetricField::full_sym(&g, [1.2, 0.1, 0.9].repeat(16)).unwrap();
        let chart = MetricChart::from_specs(
            base,
            &[
                DirectionSpec::Fourier { axis: 0, mode: 1, phase: Phase::Cos, component: Some(Component::G11), scale: 0.3 },
                DirectionSpec::Constant { component: Some(Component::G12), scale: 0.2 },
            ],
            -1.0,
            1.0,
        )
        .unwrap();
        let theta = [0.2, -0.1];
        let grad = chart.volume_gradient(&chart.metric(&theta).unwrap());
        for i in 0..2 {
            let h = 1e-6;
            let mut tp = theta;
            let mut tm = theta;
            tp[i] += h;
            tm[i] -= h;
            let fd = (chart.metric(&tp).unwrap().volume() - chart.metric(&tm).unwrap().volume()) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-7 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let g = LatticeGeometry::torus(4, 6, 0.37).unwrap();
        let data: Vec<f64> = (0..24)
            .flat_map(|x| {
                let t = x as f64 * 0.123_456_789_012_345_67;
                [1.0 + 0.1 * t.sin(), 0.01 * t.cos(), 1.0 / 3.0 + 0.2 * t.sin().powi(2)]
            })
            .collect();
        let m = MetricField::full_sym(&g, data).unwrap();
        let back = MetricField::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(back, m);
    }

    #[test]
    fn json_accepts_legacy_kind_name_and_rejects_unknown_keys() {
        let text = r#"{"dim":1,"extents":[4],"spacing":1.0,"kind":"FullSym2D","data":{"g11":[1,2,3,4]}}"#;
        assert_eq!(MetricField::from_json(text).unwrap().volume(), 1.0 + 2f64.sqrt() + 3f64.sqrt() + 2.0);
        let bad = r#"{"dim":1,"extents":[4],"spacing":1.0,"kind":"ConformalFlat","data":{"omega":[0,0,0,0]},"x":1}"#;
        assert!(MetricField::from_json(bad).is_err());
    }

    fn conformal_2d() -> impl Strategy<Value = MetricField> {
        (prop::collection::vec(-1.5f64..1.5, 36), 0.2f64..2.0).prop_map(|(omega, a)| {
            let g = LatticeGeometry::torus(6, 6, a).unwrap();
            MetricField::conformal(&g, omega).unwrap()
        })
    }

    proptest! {
        #[test]
        fn volume_scales_exactly_under_uniform_shift(m in conformal_2d(), c in -2.0f64..2.0) {
            let shifted: Vec<f64> = m.data().iter().map(|w| w + c).collect();
            let m2 = MetricField::conformal(m.geometry(), shifted).unwrap();
            let expected = (2.0 * c).exp() * m.volume();
            prop_assert!((m2.volume() - expected).abs() <= 1e-12 * expected);
        }

        #[test]
        fn discrete_gauss_bonnet(m in conformal_2d()) {
            let r = scalar_curvature_2d(&m).unwrap();
            let w = m.mass_weights();
            let total: f64 = r.iter().zip(&w).map(|(r, w)| r * w).sum();
            prop_assert!(total.abs() < 1e-10 * 36.0);
        }

        #[test]
        fn chart_is_affine(t1 in prop::collection::vec(-0.4f64..0.4, 2), t2 in prop::collection::vec(-0.4f64..0.4, 2)) {
            let g = LatticeGeometry::torus(4, 4, 1.0).unwrap();
            let chart = MetricChart::from_specs(
                MetricField::flat(&g),
                &[
                    DirectionSpec::Constant { component: None, scale: 1.0 },
                    DirectionSpec::Fourier { axis: 1, mode: 1, phase: Phase::Sin, component: None, scale: 1.0 },
                ],
                -1.0,
                1.0,
            ).unwrap();
            let sum: Vec<f64> = t1.iter().zip(&t2).map(|(a, b)| a + b).collect();
            let m1 = chart.metric(&t1).unwrap();
            let m2 = chart.metric(&t2).unwrap();
            let m12 = chart.metric(&sum).unwrap();
            let m0 = chart.metric(&[0.0, 0.0]).unwrap();
            for x in 0..16 {
                let lhs = m1.data()[x] + m2.data()[x] - 2.0 * m0.data()[x];
                let rhs = m12.data()[x] - m0.data()[x];
                prop_assert!((lhs - rhs).abs() < 1e-14);
            }
        }
    }
}
