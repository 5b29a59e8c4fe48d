//! Hermetic domain pairs with a controllable appearance shift.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Domain, Range};
use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// 32x32 glyphs; the target is rotated, inverted and overlaid with a ramp.
    ShapesImages,
    /// Class clusters in the plane; the target is an affine image plus noise.
    Gaussian2d,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SynthKind,
    pub num_classes: usize,
    pub source_count: usize,
    pub target_count: usize,
    /// Image rotation of the target, degrees.
    #[serde(default)]
    pub rotation_deg: f64,
    #[serde(default)]
    pub invert: bool,
    /// Peak of the horizontal intensity ramp added to target images.
    #[serde(default)]
    pub gradient_amplitude: f64,
    /// Linear part of the target map for planar data.
    #[serde(default = "identity2")]
    pub affine: [[f64; 2]; 2],
    #[serde(default)]
    pub offset: [f64; 2],
    /// Additive Gaussian noise on every sample value.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn identity2() -> [[f64; 2]; 2] {
    [[1.0, 0.0], [0.0, 1.0]]
}

impl SyntheticSpec {
    /// Glyph pair with no shift at all.
    pub fn shapes_plain(
        num_classes: usize,
        source_count: usize,
        target_count: usize,
        seed: u64,
    ) -> Self {
        Self {
            kind: SynthKind::ShapesImages,
            num_classes,
            source_count,
            target_count,
            rotation_deg: 0.0,
            invert: false,
            gradient_amplitude: 0.0,
            affine: identity2(),
            offset: [0.0, 0.0],
            noise: 0.05,
            seed,
        }
    }

    /// Glyph pair with inversion, a background ramp and a 30 degree rotation.
    pub fn shapes(num_classes: usize, source_count: usize, target_count: usize, seed: u64) -> Self {
        Self {
            rotation_deg: 30.0,
            invert: true,
            gradient_amplitude: 0.5,
            ..Self::shapes_plain(num_classes, source_count, target_count, seed)
        }
    }

    /// Planar clusters; the target is rotated by `rotation_deg`.
    pub fn gaussian(
        num_classes: usize,
        source_count: usize,
        target_count: usize,
        rotation_deg: f64,
        seed: u64,
    ) -> Self {
        let (s, c) = rotation_deg.to_radians().sin_cos();
        Self {
            kind: SynthKind::Gaussian2d,
            num_classes,
            source_count,
            target_count,
            rotation_deg: 0.0,
            invert: false,
            gradient_amplitude: 0.0,
            affine: [[c, -s], [s, c]],
            offset: [0.0, 0.0],
            noise: 0.02,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let path = |f: &str| format!("dataset.synthetic.{f}");
        if self.num_classes < 2 {
            return Err(Error::config(
                path("num_classes"),
                "need at least 2 classes",
            ));
        }
        if self.kind == SynthKind::ShapesImages && self.num_classes > GLYPHS.len() {
            return Err(Error::config(
                path("num_classes"),
                format!(
                    "{} classes exceed the {}-glyph catalogue",
                    self.num_classes,
                    GLYPHS.len()
                ),
            ));
        }
        if self.source_count == 0 || self.target_count == 0 {
            return Err(Error::config(
                path("source_count"),
                "sample counts must be positive",
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config(path("noise"), "must be a finite value >= 0"));
        }
        for (name, v) in [
            ("rotation_deg", self.rotation_deg),
            ("gradient_amplitude", self.gradient_amplitude),
        ] {
            if !v.is_finite() {
                return Err(Error::config(path(name), "must be finite"));
            }
        }
        Ok(())
    }
}

const GLYPHS: [&str; 10] = [
    "bar", "column", "cross", "box", "diagonal", "dot", "ring", "saltire", "corner", "triangle",
];

pub fn glyph_names() -> &'static [&'static str] {
    &GLYPHS
}

/// Per-sample placement of a glyph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlyphPose {
    /// Offset of the glyph centre in pixels.
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
    /// Stroke half-width in glyph units.
    pub stroke: f64,
}

impl GlyphPose {
    pub const CENTRED: GlyphPose = GlyphPose {
        dx: 0.0,
        dy: 0.0,
        scale: 1.0,
        stroke: 0.16,
    };

    fn sample(rng: &mut impl Rng) -> Self {
        Self {
            dx: rng.random_range(-3.0..3.0),
            dy: rng.random_range(-3.0..3.0),
            scale: rng.random_range(0.85..1.15),
            stroke: rng.random_range(0.12..0.2),
        }
    }
}

fn segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (px, py) = (p.0 - a.0, p.1 - a.1);
    let (bx, by) = (b.0 - a.0, b.1 - a.1);
    let t = ((px * bx + py * by) / (bx * bx + by * by)).clamp(0.0, 1.0);
    (px - t * bx).hypot(py - t * by)
}

/// Distance from `p` (glyph units, y down) to the glyph's centre line.
fn glyph_distance(class: usize, p: (f64, f64)) -> f64 {
    let (u, v) = p;
    let r = u.hypot(v);
    match class {
        0 => segment(p, (-0.8, 0.0), (0.8, 0.0)),
        1 => segment(p, (0.0, -0.8), (0.0, 0.8)),
        2 => segment(p, (-0.8, 0.0), (0.8, 0.0)).min(segment(p, (0.0, -0.8), (0.0, 0.8))),
        3 => (u.abs().max(v.abs()) - 0.7).abs(),
        4 => segment(p, (-0.7, 0.7), (0.7, -0.7)),
        5 => (r - 0.35).max(0.0),
        6 => (r - 0.65).abs(),
        7 => segment(p, (-0.7, 0.7), (0.7, -0.7)).min(segment(p, (-0.7, -0.7), (0.7, 0.7))),
        8 => segment(p, (-0.6, -0.75), (-0.6, 0.7)).min(segment(p, (-0.6, 0.7), (0.7, 0.7))),
        _ => {
            let (a, b, c) = ((0.0, -0.75), (-0.75, 0.65), (0.75, 0.65));
            segment(p, a, b).min(segment(p, b, c)).min(segment(p, c, a))
        }
    }
}

/// Renders one glyph at 32x32 in `[-1, 1]`: background -1, stroke +1, with a
/// one-pixel antialiased edge.
pub fn render_glyph(class: usize, pose: &GlyphPose) -> Vec<f32> {
    let half = IMAGE_SIZE as f64 / 2.0;
    let unit = 12.0 * pose.scale;
    let mut out = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
    for i in 0..IMAGE_SIZE {
        for j in 0..IMAGE_SIZE {
            let u = (j as f64 + 0.5 - half - pose.dx) / unit;
            let v = (i as f64 + 0.5 - half - pose.dy) / unit;
            let d = glyph_distance(class, (u, v));
            let coverage = ((pose.stroke - d) * unit + 0.5).clamp(0.0, 1.0);
            out.push((2.0 * coverage - 1.0) as f32);
        }
    }
    out
}

/// Target-domain appearance: rotation about the centre (background fill),
/// then intensity inversion, then a horizontal ramp, clamped to `[-1, 1]`.
pub fn shift_image(
    img: &[f32],
    rotation_deg: f64,
    invert: bool,
    gradient_amplitude: f64,
) -> Vec<f32> {
    let n = IMAGE_SIZE;
    let rotated: Vec<f32> = if rotation_deg == 0.0 {
        img.to_vec()
    } else {
        let (s, c) = rotation_deg.to_radians().sin_cos();
        let centre = (n as f64 - 1.0) / 2.0;
        let at = |y: isize, x: isize| -> f64 {
            if (0..n as isize).contains(&y) && (0..n as isize).contains(&x) {
                img[y as usize * n + x as usize] as f64
            } else {
                -1.0
            }
        };
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let (y, x) = (i as f64 - centre, j as f64 - centre);
                // inverse map: sample the source at the point rotated back
                let sx = c * x + s * y + centre;
                let sy = -s * x + c * y + centre;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                    + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
                out.push(v as f32);
            }
        }
        out
    };
    rotated
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let v = if invert { -v } else { v };
            if gradient_amplitude == 0.0 {
                return v;
            }
            let ramp = gradient_amplitude * ((k % n) as f64 / (n - 1) as f64 * 2.0 - 1.0);
            (v as f64 + ramp).clamp(-1.0, 1.0) as f32
        })
        .collect()
}

/// Balanced labels in shuffled order.
fn labels(count: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut l: Vec<usize> = (0..count).map(|i| i % k).collect();
    l.shuffle(rng);
    l
}

fn add_noise(v: &mut [f32], sigma: f64, rng: &mut impl Rng) {
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    for x in v {
        *x = (*x as f64 + normal.sample(rng)).clamp(-1.0, 1.0) as f32;
    }
}

fn shapes_domain(spec: &SyntheticSpec, domain: Domain) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (count, stream) = match domain {
        Domain::Source => (spec.source_count, 0),
        Domain::Target => (spec.target_count, 1),
    };
    rng.set_stream(stream);
    let labels = labels(count, spec.num_classes, &mut rng);
    let mut values = Vec::with_capacity(count * IMAGE_SIZE * IMAGE_SIZE);
    for &class in &labels {
        let mut img = render_glyph(class, &GlyphPose::sample(&mut rng));
        if domain == Domain::Target {
            img = shift_image(
                &img,
                spec.rotation_deg,
                spec.invert,
                spec.gradient_amplitude,
            );
        }
        add_noise(&mut img, spec.noise, &mut rng);
        values.extend(img);
    }
    Dataset::new(
        vec![1, IMAGE_SIZE, IMAGE_SIZE],
        values,
        Some(labels),
        spec.num_classes,
        domain,
        Range::Signed,
    )
}

/// Cluster radius and per-class spread of the planar pair.
const RADIUS: f64 = 0.6;
const SPREAD: f64 = 0.1;

fn gaussian_domain(spec: &SyntheticSpec, domain: Domain) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (count, stream) = match domain {
        Domain::Source => (spec.source_count, 0),
        Domain::Target => (spec.target_count, 1),
    };
    rng.set_stream(stream);
    let labels = labels(count, spec.num_classes, &mut rng);
    let spread = Normal::new(0.0, SPREAD).expect("constant");
    let mut values = Vec::with_capacity(2 * count);
    for &class in &labels {
        let angle = std::f64::consts::TAU * class as f64 / spec.num_classes as f64;
        let mut p = [
            RADIUS * angle.cos() + spread.sample(&mut rng),
            RADIUS * angle.sin() + spread.sample(&mut rng),
        ];
        if domain == Domain::Target {
            let a = spec.affine;
            p = [
                a[0][0] * p[0] + a[0][1] * p[1] + spec.offset[0],
                a[1][0] * p[0] + a[1][1] * p[1] + spec.offset[1],
            ];
        }
        let mut q = [p[0] as f32, p[1] as f32];
        add_noise(&mut q, spec.noise, &mut rng);
        values.extend(q.map(|v| v.clamp(-1.0, 1.0)));
    }
    Dataset::new(
        vec![2],
        values,
        Some(labels),
        spec.num_classes,
        domain,
        Range::Signed,
    )
}

/// Source and target datasets. Both carry labels; training code only ever
/// sees the target through [`Dataset::unlabeled`].
pub fn synth_domain_pair(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    match spec.kind {
        SynthKind::ShapesImages => Ok((
            shapes_domain(spec, Domain::Source)?,
            shapes_domain(spec, Domain::Target)?,
        )),
        SynthKind::Gaussian2d => Ok((
            gaussian_domain(spec, Domain::Source)?,
            gaussian_domain(spec, Domain::Target)?,
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inversion_negates() {
        let img = render_glyph(3, &GlyphPose::CENTRED);
        let shifted = shift_image(&img, 0.0, true, 0.0);
        assert!(img.iter().zip(&shifted).all(|(a, b)| *b == -*a));
    }

    #[test]
    fn glyphs_are_distinct_and_in_range() {
        let imgs: Vec<Vec<f32>> = (0..GLYPHS.len())
            .map(|c| render_glyph(c, &GlyphPose::CENTRED))
            .collect();
        for (i, a) in imgs.iter().enumerate() {
            assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
            assert!(a.iter().any(|&v| v > 0.5), "glyph {i} has no stroke");
            for b in &imgs[i + 1..] {
                assert!(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f32>() > 20.0);
            }
        }
    }

    #[test]
    fn deterministic_and_balanced() {
        let spec = SyntheticSpec::shapes(4, 40, 40, 9);
        let (s1, t1) = synth_domain_pair(&spec).unwrap();
        let (s2, t2) = synth_domain_pair(&spec).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(t1, t2);
        for k in 0..4 {
            let count = |d: &Dataset| d.labels().unwrap().iter().filter(|&&l| l == k).count();
            assert_eq!(count(&s1), 10);
            assert_eq!(count(&t1), 10);
        }
    }

    #[test]
    fn unshifted_domains_match_in_distribution() {
        let spec = SyntheticSpec::shapes_plain(3, 300, 300, 4);
        let (s, t) = synth_domain_pair(&spec).unwrap();
        let mean = |d: &Dataset| {
            d.values().iter().map(|&v| v as f64).sum::<f64>() / d.values().len() as f64
        };
        assert!((mean(&s) - mean(&t)).abs() < 0.02);
    }

    #[test]
    fn too_many_classes() {
        assert!(synth_domain_pair(&SyntheticSpec::shapes(11, 20, 20, 0)).is_err());
    }
}
