//! Synthetic water-fat abdomen phantoms with exact ground truth.
//!
//! Geometry lives in canonical in-plane coordinates `(u, v)` (rows, columns,
//! in voxels, relative to the body center). A voxel `(z, y, x)` maps to them
//! through its center, the per-visit scale and the per-slice taper, so every
//! label is a point-in-region test at the voxel center:
//!
//! - body: ellipse with semi-axes `body`
//! - SAT: body minus the ellipse shrunk by `sat_thickness`
//! - muscle wall: next `wall_thickness` inwards
//! - cavity: the remaining inner ellipse; holds organs, the spine disk and
//!   the VAT blobs (ellipsoids kept clear of the spine)

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{IoError, Result};
use crate::preprocess::{fat_fraction, BodyMask, Dims, Label, LabelMask, Spacing, Volume};

const BLOB_ATTEMPTS: usize = 10_000;

/// Closed interval sampled uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Range { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.random_range(self.min..=self.max)
        }
    }

    fn check(&self, what: &str) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min <= self.max) {
            return Err(geometry(format!("{what} range [{}, {}] is empty or not finite", self.min, self.max)));
        }
        Ok(())
    }
}

fn geometry(msg: impl Into<String>) -> IoError {
    IoError::Geometry(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub seed: u64,
    pub dims: Dims,
    pub spacing: Spacing,
    /// Body semi-axes `[rows, columns]` as fractions of the half image extent.
    pub body_axes: [Range; 2],
    /// SAT ring thickness as a fraction of the smaller half image extent.
    pub sat_thickness: Range,
    /// Muscle wall thickness as a fraction of the smaller half image extent.
    pub wall_thickness: Range,
    /// Inclusive bounds on the number of VAT blobs.
    pub vat_blobs: [usize; 2],
    /// In-plane blob radius as a fraction of the cavity's smaller semi-axis.
    pub vat_radius: Range,
    /// Blob half-extent along z, in slices.
    pub vat_depth_radius: Range,
    /// Inclusive bounds on the number of intestinal gas pockets: signal-free
    /// ellipsoids in the cavity whose fat fraction is pure noise.
    pub gas_pockets: [usize; 2],
    /// In-plane gas pocket radius as a fraction of the cavity's smaller semi-axis.
    pub gas_radius: Range,
    /// Gas pocket half-extent along z, in slices.
    pub gas_depth_radius: Range,
    /// Spine disk radius as a fraction of the cavity's smaller semi-axis.
    pub spine_radius: f64,
    /// Posterior (+row) offset of the spine center as a fraction of the
    /// cavity's row semi-axis.
    pub spine_offset: f64,
    /// In-plane shrink of the outermost slices relative to the middle one.
    pub slice_taper: f64,
    /// Per-patient signal gain.
    pub gain: Range,
    /// Gaussian noise std of the water and fat signals.
    pub signal_noise: f64,
    /// Gaussian noise std added to the fat fraction.
    pub ff_noise: f64,
    /// Std of the background signal when `include_background_noise` is set.
    pub background_noise: f64,
    /// Fill the background with noise (uniform fat fraction) instead of zeros.
    pub include_background_noise: bool,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            seed: 0,
            dims: Dims::new(12, 64, 64),
            spacing: Spacing::ABDOMEN,
            body_axes: [Range::new(0.55, 0.70), Range::new(0.70, 0.82)],
            sat_thickness: Range::new(0.08, 0.15),
            wall_thickness: Range::new(0.05, 0.08),
            vat_blobs: [4, 8],
            vat_radius: Range::new(0.25, 0.45),
            vat_depth_radius: Range::new(1.5, 4.0),
            gas_pockets: [3, 6],
            gas_radius: Range::new(0.15, 0.30),
            gas_depth_radius: Range::new(1.0, 3.0),
            spine_radius: 0.22,
            spine_offset: 0.7,
            slice_taper: 0.06,
            gain: Range::new(0.8, 1.2),
            signal_noise: 25.0,
            ff_noise: 0.03,
            background_noise: 15.0,
            include_background_noise: false,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        if d.depth == 0 || d.height < 8 || d.width < 8 {
            return Err(geometry(format!("dims {}x{}x{} too small (need depth >= 1, 8x8 slices)", d.depth, d.height, d.width)));
        }
        if !self.spacing.is_valid() {
            return Err(geometry("voxel spacing must be positive"));
        }
        for (name, r) in [
            ("body row axis", self.body_axes[0]),
            ("body column axis", self.body_axes[1]),
            ("SAT thickness", self.sat_thickness),
            ("wall thickness", self.wall_thickness),
            ("VAT radius", self.vat_radius),
            ("VAT depth radius", self.vat_depth_radius),
            ("gas radius", self.gas_radius),
            ("gas depth radius", self.gas_depth_radius),
            ("gain", self.gain),
        ] {
            r.check(name)?;
            if r.min <= 0.0 {
                return Err(geometry(format!("{name} must be positive")));
            }
        }
        for (name, r) in [("body row axis", self.body_axes[0]), ("body column axis", self.body_axes[1])] {
            if r.max >= 1.0 {
                return Err(geometry(format!("{name} fraction {} leaves no room inside the image", r.max)));
            }
        }
        if self.vat_blobs[0] == 0 || self.vat_blobs[0] > self.vat_blobs[1] {
            return Err(geometry(format!("VAT blob count range {:?} must be nonempty and >= 1", self.vat_blobs)));
        }
        if self.gas_pockets[0] > self.gas_pockets[1] {
            return Err(geometry(format!("gas pocket count range {:?} is empty", self.gas_pockets)));
        }
        if !(0.0..0.5).contains(&self.slice_taper) {
            return Err(geometry(format!("slice taper {} outside [0, 0.5)", self.slice_taper)));
        }
        if !(self.spine_radius > 0.0 && self.spine_offset >= 0.0) {
            return Err(geometry("spine radius must be positive and offset non-negative"));
        }
        for (name, v) in [
            ("signal noise", self.signal_noise),
            ("fat-fraction noise", self.ff_noise),
            ("background noise", self.background_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(geometry(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Ellipsoid in canonical coordinates (a VAT depot or a gas pocket):
/// center `(z, u, v)` and semi-axes, z in slices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Blob {
    fn contains(&self, z: f64, u: f64, v: f64) -> bool {
        let dz = (z - self.center[0]) / self.radii[0];
        let du = (u - self.center[1]) / self.radii[1];
        let dv = (v - self.center[2]) / self.radii[2];
        dz * dz + du * du + dv * dv <= 1.0
    }
}

/// Region a voxel center falls in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tissue {
    Background,
    Sat,
    Muscle,
    Spine,
    Organ,
    /// Intestinal gas: inside the body but without signal.
    Gas,
    Vat,
}

impl Tissue {
    pub fn label(self) -> Label {
        match self {
            Tissue::Vat => Label::Vat,
            Tissue::Sat => Label::Sat,
            _ => Label::Background,
        }
    }

    pub fn is_adipose(self) -> bool {
        matches!(self, Tissue::Vat | Tissue::Sat)
    }

    /// Mean (water, fat) signal before gain and falloff.
    fn signal(self) -> (f64, f64) {
        match self {
            Tissue::Background | Tissue::Gas => (0.0, 0.0),
            Tissue::Sat | Tissue::Vat => (80.0, 900.0),
            Tissue::Muscle => (700.0, 60.0),
            Tissue::Organ => (550.0, 90.0),
            Tissue::Spine => (350.0, 120.0),
        }
    }
}

fn in_ellipse(u: f64, v: f64, axes: [f64; 2]) -> bool {
    let a = u / axes[0];
    let b = v / axes[1];
    a * a + b * b <= 1.0
}

/// One concrete phantom shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomGeometry {
    pub dims: Dims,
    pub spacing: Spacing,
    /// Body center `(row, column)` in voxel coordinates.
    pub center: [f64; 2],
    pub scale: f64,
    pub taper: f64,
    /// Body semi-axes `(rows, columns)`.
    pub body: [f64; 2],
    pub sat_thickness: f64,
    pub wall_thickness: f64,
    /// Spine disk center `(u, v)`.
    pub spine_center: [f64; 2],
    pub spine_radius: f64,
    pub blobs: Vec<Blob>,
    /// Gas pockets; VAT takes precedence where they overlap.
    pub gas: Vec<Blob>,
    pub gain: f64,
}

/// Visit-to-visit jitter of a patient's geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitJitter {
    /// Relative in-plane scale change bound.
    pub scale: f64,
    /// In-plane translation bound in voxels.
    pub translation: f64,
    /// Relative blob radius change bound.
    pub blob_radius: f64,
}

impl Default for VisitJitter {
    fn default() -> Self {
        VisitJitter { scale: 0.02, translation: 2.0, blob_radius: 0.01 }
    }
}

impl PhantomGeometry {
    pub fn sample(params: &PhantomParams, rng: &mut impl Rng) -> Result<Self> {
        params.validate()?;
        let d = params.dims;
        let half = [d.height as f64 / 2.0, d.width as f64 / 2.0];
        let body = [params.body_axes[0].sample(rng) * half[0], params.body_axes[1].sample(rng) * half[1]];
        let min_half = half[0].min(half[1]);
        let sat_thickness = params.sat_thickness.sample(rng) * min_half;
        let wall_thickness = params.wall_thickness.sample(rng) * min_half;
        let gain = params.gain.sample(rng);
        let mut g = PhantomGeometry {
            dims: d,
            spacing: params.spacing,
            center: half,
            scale: 1.0,
            taper: params.slice_taper,
            body,
            sat_thickness,
            wall_thickness,
            spine_center: [0.0, 0.0],
            spine_radius: 0.0,
            blobs: Vec::new(),
            gas: Vec::new(),
            gain,
        };
        let cavity = g.cavity();
        if cavity[0] <= 0.0 || cavity[1] <= 0.0 {
            return Err(geometry("SAT ring and muscle wall leave no abdominal cavity"));
        }
        let cav_min = cavity[0].min(cavity[1]);
        g.spine_radius = params.spine_radius * cav_min;
        g.spine_center = [params.spine_offset * cavity[0], 0.0];

        let n_blobs = rng.random_range(params.vat_blobs[0]..=params.vat_blobs[1]);
        for i in 0..n_blobs {
            let r = params.vat_radius.sample(rng) * cav_min;
            let rz = params.vat_depth_radius.sample(rng);
            let blob = g.place(r, rz, rng).map_err(|e| geometry(format!("VAT blob {i}: {e}")))?;
            g.blobs.push(blob);
        }
        let n_gas = rng.random_range(params.gas_pockets[0]..=params.gas_pockets[1]);
        for i in 0..n_gas {
            let r = params.gas_radius.sample(rng) * cav_min;
            let rz = params.gas_depth_radius.sample(rng);
            let pocket = g.place(r, rz, rng).map_err(|e| geometry(format!("gas pocket {i}: {e}")))?;
            g.gas.push(pocket);
        }
        g.validate()?;
        Ok(g)
    }

    /// Rejection-samples an ellipsoid of in-plane radius `r` inside the
    /// cavity and clear of the spine.
    fn place(&self, r: f64, rz: f64, rng: &mut impl Rng) -> std::result::Result<Blob, String> {
        let cavity = self.cavity();
        let fit = [cavity[0] - r, cavity[1] - r];
        if fit[0] <= 0.0 || fit[1] <= 0.0 {
            return Err(format!("radius {r:.2} does not fit the cavity"));
        }
        for _ in 0..BLOB_ATTEMPTS {
            let u = rng.random_range(-fit[0]..=fit[0]);
            let v = rng.random_range(-fit[1]..=fit[1]);
            let du = u - self.spine_center[0];
            let dv = v - self.spine_center[1];
            if in_ellipse(u, v, fit) && (du * du + dv * dv).sqrt() >= self.spine_radius + r + 0.5 {
                let z = rng.random_range(0.0..self.dims.depth as f64);
                return Ok(Blob { center: [z, u, v], radii: [rz, r, r] });
            }
        }
        Err("no room clear of the spine".into())
    }

    /// Semi-axes of the inner SAT boundary.
    pub fn sat_inner(&self) -> [f64; 2] {
        [self.body[0] - self.sat_thickness, self.body[1] - self.sat_thickness]
    }

    /// Semi-axes of the abdominal cavity (inside the muscle wall).
    pub fn cavity(&self) -> [f64; 2] {
        let t = self.sat_thickness + self.wall_thickness;
        [self.body[0] - t, self.body[1] - t]
    }

    /// Position of slice `z` in `[-1, 1]`, 0 at the middle.
    pub fn slice_position(&self, z: usize) -> f64 {
        let d = self.dims.depth;
        if d <= 1 {
            return 0.0;
        }
        (2.0 * z as f64 - (d - 1) as f64) / (d - 1) as f64
    }

    /// In-plane shrink factor of slice `z`, 1 at the middle slice.
    pub fn slice_scale(&self, z: usize) -> f64 {
        1.0 - self.taper * self.slice_position(z).abs()
    }

    /// Canonical `(u, v)` of the center of voxel `(z, y, x)`.
    pub fn canonical(&self, z: usize, y: usize, x: usize) -> (f64, f64) {
        let s = self.scale * self.slice_scale(z);
        ((y as f64 + 0.5 - self.center[0]) / s, (x as f64 + 0.5 - self.center[1]) / s)
    }

    pub fn tissue(&self, z: usize, y: usize, x: usize) -> Tissue {
        let (u, v) = self.canonical(z, y, x);
        if !in_ellipse(u, v, self.body) {
            return Tissue::Background;
        }
        if !in_ellipse(u, v, self.sat_inner()) {
            return Tissue::Sat;
        }
        let du = u - self.spine_center[0];
        let dv = v - self.spine_center[1];
        if du * du + dv * dv <= self.spine_radius * self.spine_radius {
            return Tissue::Spine;
        }
        if !in_ellipse(u, v, self.cavity()) {
            return Tissue::Muscle;
        }
        let zc = z as f64 + 0.5;
        if self.blobs.iter().any(|b| b.contains(zc, u, v)) {
            Tissue::Vat
        } else if self.gas.iter().any(|b| b.contains(zc, u, v)) {
            Tissue::Gas
        } else {
            Tissue::Organ
        }
    }

    /// Checks the constraints that keep depots non-degenerate and disjoint.
    pub fn validate(&self) -> Result<()> {
        let min_scale = self.scale * (1.0 - self.taper);
        if !(self.scale > 0.0 && (0.0..0.5).contains(&self.taper)) {
            return Err(geometry("scale must be positive and taper in [0, 0.5)"));
        }
        if self.sat_thickness * min_scale < 1.0 {
            return Err(geometry(format!(
                "SAT ring thickness {:.2} voxels is below one voxel, ring may not close",
                self.sat_thickness * min_scale
            )));
        }
        if self.wall_thickness * min_scale < 1.0 {
            return Err(geometry(format!(
                "muscle wall thickness {:.2} voxels is below one voxel, VAT could touch SAT",
                self.wall_thickness * min_scale
            )));
        }
        let extents = [self.dims.height as f64, self.dims.width as f64];
        for (k, axis) in ["row", "column"].into_iter().enumerate() {
            let reach = self.body[k] * self.scale;
            if self.center[k] - reach < 1.0 || self.center[k] + reach > extents[k] - 1.0 {
                return Err(geometry(format!("body ellipse leaves the image along the {axis} axis")));
            }
        }
        let cavity = self.cavity();
        if cavity[0] <= 0.0 || cavity[1] <= 0.0 {
            return Err(geometry("SAT ring and muscle wall leave no abdominal cavity"));
        }
        let inner = self.sat_inner();
        let sc = self.spine_center;
        if self.spine_radius <= 0.0 || sc[0].abs() + self.spine_radius >= inner[0] || sc[1].abs() + self.spine_radius >= inner[1]
        {
            return Err(geometry("spine disk must lie strictly inside the muscle wall"));
        }
        if self.blobs.is_empty() {
            return Err(geometry("at least one VAT blob is required"));
        }
        for (what, set) in [("VAT blob", &self.blobs), ("gas pocket", &self.gas)] {
            for (i, b) in set.iter().enumerate() {
                if b.radii.iter().any(|&r| !(r > 0.0)) {
                    return Err(geometry(format!("{what} {i} has a non-positive radius")));
                }
                if !in_ellipse(b.center[1], b.center[2], cavity) {
                    return Err(geometry(format!("{what} {i} is centered outside the cavity")));
                }
            }
        }
        Ok(())
    }

    /// The same anatomy seen on another visit.
    pub fn perturb(&self, jitter: VisitJitter, rng: &mut impl Rng) -> Result<Self> {
        let mut g = self.clone();
        let sym = |rng: &mut dyn rand::RngCore, b: f64| if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 };
        g.scale *= 1.0 + sym(rng, jitter.scale);
        g.center[0] += sym(rng, jitter.translation);
        g.center[1] += sym(rng, jitter.translation);
        for blob in g.blobs.iter_mut().chain(&mut g.gas) {
            for r in &mut blob.radii {
                *r *= 1.0 + sym(rng, jitter.blob_radius);
            }
        }
        g.validate()?;
        Ok(g)
    }
}

/// A rendered phantom: raw `(water, fat, fat_fraction)` volume, labels, body.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    pub labels: LabelMask,
    pub body: BodyMask,
    pub geometry: PhantomGeometry,
}

/// Signals are piecewise constant per tissue plus Gaussian noise. The fat
/// fraction is clamped to `[0.5, 1]` in adipose tissue and below 0.5 in
/// the other tissues. Gas pockets always get background-style noise:
/// folded Gaussian signals and a uniform fat fraction.
pub fn render_phantom<R: Rng>(geometry: &PhantomGeometry, params: &PhantomParams, rng: &mut R) -> Result<Phantom> {
    params.validate()?;
    geometry.validate()?;
    let d = geometry.dims;
    let n = d.voxels();
    let signal = Normal::new(0.0, params.signal_noise).map_err(geometry_err)?;
    let ff_noise = Normal::new(0.0, params.ff_noise).map_err(geometry_err)?;
    let bg = Normal::new(0.0, params.background_noise).map_err(geometry_err)?;
    let mut data = vec![0.0f32; 3 * n];
    let mut labels = vec![0u8; n];
    let mut body = vec![false; n];
    let lean_max = f32::from_bits(0.5f32.to_bits() - 1) as f64;
    for z in 0..d.depth {
        // signal falls off by up to 10% towards the outer slices
        let level = geometry.gain * (1.0 - 0.1 * geometry.slice_position(z).abs());
        for y in 0..d.height {
            for x in 0..d.width {
                let i = (z * d.height + y) * d.width + x;
                let tissue = geometry.tissue(z, y, x);
                let noise = |rng: &mut R| {
                    let w = bg.sample(rng).abs();
                    let f = bg.sample(rng).abs();
                    (w, f, rng.random_range(0.0..1.0))
                };
                let (w, f, ff) = if tissue == Tissue::Background {
                    if params.include_background_noise {
                        noise(rng)
                    } else {
                        (0.0, 0.0, 0.0)
                    }
                } else if tissue == Tissue::Gas {
                    body[i] = true;
                    noise(rng)
                } else {
                    body[i] = true;
                    labels[i] = tissue.label() as u8;
                    let (mw, mf) = tissue.signal();
                    let w = (mw * level + signal.sample(rng)).max(0.0);
                    let f = (mf * level + signal.sample(rng)).max(0.0);
                    let ff = fat_fraction(w as f32, f as f32) as f64 + ff_noise.sample(rng);
                    let ff = if tissue.is_adipose() { ff.clamp(0.5, 1.0) } else { ff.clamp(0.0, lean_max) };
                    (w, f, ff)
                };
                data[i] = w as f32;
                data[n + i] = f as f32;
                data[2 * n + i] = ff as f32;
            }
        }
    }
    let volume = Volume::new(d, geometry.spacing, 3, data)?;
    let labels = LabelMask::new(d, geometry.spacing, labels)?;
    for class in Label::FOREGROUND {
        if labels.count(class) == 0 {
            return Err(geometry_err(format!("phantom has no {} voxels", class.name())));
        }
    }
    Ok(Phantom { volume, labels, body: BodyMask::new(d, body)?, geometry: geometry.clone() })
}

fn geometry_err(e: impl ToString) -> IoError {
    geometry(e.to_string())
}

/// Seeded RNG on an independent stream.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Samples a geometry from `params.seed` and renders it.
pub fn generate_phantom(params: &PhantomParams) -> Result<Phantom> {
    let geometry = PhantomGeometry::sample(params, &mut stream_rng(params.seed, 0))?;
    render_phantom(&geometry, params, &mut stream_rng(params.seed, 1))
}
