//! Point-scatterer scene generator.
//!
//! Targets are small constellations of Gaussian scatterers (cross, T, L,
//! diagonal cross, H, ring or line shaped) over a flat clutter floor with isolated
//! clutter scatterers. The high-resolution rendering applies unit-mean
//! gamma speckle per pixel (exponential for a single look). A degraded rendering blurs,
//! downsamples by the resolution factor, applies speckle on the coarse grid
//! (its native resolution cell) and bilinearly upsamples back to the
//! reference size.

use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{gaussian_smooth, resize_roi, Annotation, BBox, Domain, Image, SceneImage};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstellationKind {
    Cross,
    T,
    L,
    Diagonal,
    H,
    Ring,
    Line,
}

impl ConstellationKind {
    /// Template offsets in spacing units. The first `core` points are always kept.
    fn template(self) -> (&'static [(f64, f64)], usize) {
        match self {
            ConstellationKind::Cross => (
                &[
                    (0., 0.),
                    (-1., 0.),
                    (1., 0.),
                    (0., -1.),
                    (0., 1.),
                    (-2., 0.),
                    (2., 0.),
                    (0., -2.),
                    (0., 2.),
                ],
                5,
            ),
            ConstellationKind::T => (
                &[
                    (-1., -2.),
                    (0., -2.),
                    (1., -2.),
                    (0., -1.),
                    (0., 0.),
                    (-2., -2.),
                    (2., -2.),
                    (0., 1.),
                    (0., 2.),
                ],
                5,
            ),
            ConstellationKind::L => (
                &[
                    (-2., -1.),
                    (-2., 0.),
                    (-2., 1.),
                    (-2., 2.),
                    (-1., 2.),
                    (0., 2.),
                    (-2., -2.),
                    (1., 2.),
                    (2., 2.),
                ],
                6,
            ),
            ConstellationKind::Diagonal => (
                &[
                    (0., 0.),
                    (-1., -1.),
                    (1., -1.),
                    (-1., 1.),
                    (1., 1.),
                    (-2., -2.),
                    (2., -2.),
                    (-2., 2.),
                    (2., 2.),
                ],
                5,
            ),
            ConstellationKind::H => (
                &[
                    (-2., -2.),
                    (-2., 0.),
                    (-2., 2.),
                    (2., -2.),
                    (2., 0.),
                    (2., 2.),
                    (0., 0.),
                    (-1., 0.),
                    (1., 0.),
                ],
                7,
            ),
            ConstellationKind::Ring => (
                &[
                    (-2., -2.),
                    (2., -2.),
                    (-2., 2.),
                    (2., 2.),
                    (0., -2.),
                    (0., 2.),
                    (-2., 0.),
                    (2., 0.),
                ],
                4,
            ),
            ConstellationKind::Line => (
                &[
                    (0., -1.),
                    (0., 0.),
                    (0., 1.),
                    (0., 2.),
                    (0., -2.),
                    (0., 3.),
                    (0., -3.),
                ],
                4,
            ),
        }
    }
}

fn default_families() -> Vec<ConstellationKind> {
    vec![
        ConstellationKind::Cross,
        ConstellationKind::T,
        ConstellationKind::L,
    ]
}

/// Scene generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub size: usize,
    pub targets_per_scene: usize,
    /// Degradation factor relative to the high-resolution reference (1 = none).
    pub resolution_factor: f64,
    pub families: Vec<ConstellationKind>,
    /// Scatterer spacing range in pixels.
    pub spacing: [f64; 2],
    pub position_jitter: f64,
    pub scatterer_sigma: f64,
    /// Number of looks of the speckle model (1 = fully developed single-look).
    pub looks: f64,
    pub target_amplitude: [f64; 2],
    pub background: f64,
    pub clutter_points: usize,
    pub clutter_amplitude: [f64; 2],
    pub box_padding: f64,
    /// Anti-alias blur per unit of resolution factor.
    pub blur_per_factor: f64,
    pub placement_retries: usize,
    pub min_gap: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            size: 128,
            targets_per_scene: 3,
            resolution_factor: 3.0,
            families: default_families(),
            spacing: [3.5, 4.5],
            position_jitter: 0.4,
            scatterer_sigma: 1.0,
            looks: 1.0,
            target_amplitude: [6.0, 10.0],
            background: 1.0,
            clutter_points: 6,
            clutter_amplitude: [4.0, 10.0],
            box_padding: 3.0,
            blur_per_factor: 0.5,
            placement_retries: 50,
            min_gap: 2.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.resolution_factor >= 1.0) {
            return Err(Error::invalid(format!(
                "resolution_factor must be >= 1, got {}",
                self.resolution_factor
            )));
        }
        if self.size < 16 {
            return Err(Error::invalid("scene size must be at least 16"));
        }
        if !(self.looks > 0.0) {
            return Err(Error::invalid("looks must be positive"));
        }
        if self.families.is_empty() {
            return Err(Error::invalid("at least one constellation family required"));
        }
        if self.spacing[0] <= 0.0 || self.spacing[1] < self.spacing[0] {
            return Err(Error::invalid("bad spacing range"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub kind: ConstellationKind,
    /// Scatterers as `(x, y, amplitude)`.
    pub scatterers: Vec<(f64, f64, f64)>,
    pub bbox: BBox,
}

/// The resolution-independent content of a scene.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Layout {
    pub targets: Vec<Target>,
    pub clutter: Vec<(f64, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: SceneImage,
    pub annotation: Annotation,
    pub layout: Layout,
    pub warnings: Vec<String>,
}

fn uniform(rng: &mut Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

/// Scatterers of one constellation plus the footprint of its full template,
/// both relative to the template origin.
fn sample_constellation(
    cfg: &GenConfig,
    kind: ConstellationKind,
    rng: &mut Rng,
) -> (Vec<(f64, f64, f64)>, BBox) {
    let (template, core) = kind.template();
    let spacing = uniform(rng, cfg.spacing);
    let rotation = rng.random_range(0..4u8);
    let rotate = move |(u, v): (f64, f64)| match rotation {
        0 => (u, v),
        1 => (-v, u),
        2 => (-u, -v),
        _ => (v, -u),
    };
    let footprint: Vec<(f64, f64, f64)> = template
        .iter()
        .map(|&t| {
            let (u, v) = rotate(t);
            (u * spacing, v * spacing, 0.0)
        })
        .collect();
    let extent = bounding_box(&footprint, cfg.position_jitter);
    let optional = template.len() - core;
    let max_drop = match kind {
        ConstellationKind::Line => 3,
        _ => 2,
    }
    .min(optional);
    let drop = rng.random_range(0..=max_drop);
    let kept: Vec<(f64, f64)> = if kind == ConstellationKind::Line {
        // keep a contiguous run: drop from the tail of the template order
        template[..template.len() - drop].to_vec()
    } else {
        let mut optional_idx: Vec<usize> = (core..template.len()).collect();
        for _ in 0..drop {
            let i = rng.random_range(0..optional_idx.len());
            optional_idx.remove(i);
        }
        template[..core]
            .iter()
            .copied()
            .chain(optional_idx.iter().map(|&i| template[i]))
            .collect()
    };
    let points = kept
        .into_iter()
        .map(|t| {
            let (u, v) = rotate(t);
            let jx = rng.random_range(-1.0..=1.0) * cfg.position_jitter;
            let jy = rng.random_range(-1.0..=1.0) * cfg.position_jitter;
            let amp = uniform(rng, cfg.target_amplitude);
            (u * spacing + jx, v * spacing + jy, amp)
        })
        .collect();
    (points, extent)
}

fn bounding_box(points: &[(f64, f64, f64)], pad: f64) -> BBox {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &(x, y, _) in points {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    BBox::new(x0 - pad, y0 - pad, x1 - x0 + 2.0 * pad, y1 - y0 + 2.0 * pad)
}

fn separated(a: &BBox, b: &BBox, gap: f64) -> bool {
    a.x + a.w + gap <= b.x
        || b.x + b.w + gap <= a.x
        || a.y + a.h + gap <= b.y
        || b.y + b.h + gap <= a.y
}

/// Draws target constellations and clutter scatterers.
pub fn sample_layout(cfg: &GenConfig, rng: &mut Rng) -> (Layout, Vec<String>) {
    let size = cfg.size as f64;
    let mut layout = Layout::default();
    let mut warnings = Vec::new();
    for t in 0..cfg.targets_per_scene {
        let kind = cfg.families[rng.random_range(0..cfg.families.len())];
        let (local, extent) = sample_constellation(cfg, kind, rng);
        let p = cfg.box_padding;
        let local_box = BBox::new(
            extent.x - p,
            extent.y - p,
            extent.w + 2.0 * p,
            extent.h + 2.0 * p,
        );
        let mut placed = false;
        for _ in 0..cfg.placement_retries.max(1) {
            let lo_x = -local_box.x + 1.0;
            let hi_x = size - (local_box.x + local_box.w) - 1.0;
            let lo_y = -local_box.y + 1.0;
            let hi_y = size - (local_box.y + local_box.h) - 1.0;
            if hi_x <= lo_x || hi_y <= lo_y {
                break;
            }
            let cx = rng.random_range(lo_x..hi_x);
            let cy = rng.random_range(lo_y..hi_y);
            let bbox = BBox::new(local_box.x + cx, local_box.y + cy, local_box.w, local_box.h);
            if layout
                .targets
                .iter()
                .all(|o| separated(&o.bbox, &bbox, cfg.min_gap))
            {
                let scatterers = local.iter().map(|&(x, y, a)| (x + cx, y + cy, a)).collect();
                layout.targets.push(Target {
                    kind,
                    scatterers,
                    bbox,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            warnings.push(format!(
                "target {t} could not be placed after {} retries",
                cfg.placement_retries
            ));
        }
    }
    for _ in 0..cfg.clutter_points {
        for _ in 0..cfg.placement_retries.max(1) {
            let x = rng.random_range(2.0..size - 2.0);
            let y = rng.random_range(2.0..size - 2.0);
            let probe = BBox::centered(x, y, 1.0, 1.0);
            if layout
                .targets
                .iter()
                .all(|t| separated(&t.bbox, &probe, cfg.min_gap + 1.0))
            {
                let a = uniform(rng, cfg.clutter_amplitude);
                layout.clutter.push((x, y, a));
                break;
            }
        }
    }
    (layout, warnings)
}

fn render_clean(layout: &Layout, cfg: &GenConfig, width: usize, height: usize) -> Image {
    let mut img = Image::filled(width, height, cfg.background);
    let s2 = 2.0 * cfg.scatterer_sigma * cfg.scatterer_sigma;
    let reach = (4.0 * cfg.scatterer_sigma).ceil() as isize;
    let points = layout
        .targets
        .iter()
        .flat_map(|t| t.scatterers.iter())
        .chain(layout.clutter.iter());
    for &(px, py, amp) in points {
        let cx = px.round() as isize;
        let cy = py.round() as isize;
        for y in (cy - reach).max(0)..=(cy + reach).min(height as isize - 1) {
            for x in (cx - reach).max(0)..=(cx + reach).min(width as isize - 1) {
                // pixel centers sit at integer + 0.5 in scene coordinates
                let dx = x as f64 + 0.5 - px;
                let dy = y as f64 + 0.5 - py;
                let v = img.get(x as usize, y as usize) + amp * (-(dx * dx + dy * dy) / s2).exp();
                img.set(x as usize, y as usize, v);
            }
        }
    }
    img
}

/// Multiplicative unit-mean Gamma(L, 1/L) speckle for `L` looks.
fn speckle(img: &mut Image, looks: f64, rng: &mut Rng) {
    let dist = Gamma::new(looks, 1.0 / looks).expect("looks validated positive");
    for v in img.data.iter_mut() {
        *v *= dist.sample(rng);
    }
}

/// Renders a layout at the given resolution factor, drawing speckle from `rng`.
pub fn render(layout: &Layout, cfg: &GenConfig, factor: f64, rng: &mut Rng) -> Result<Image> {
    let clean = render_clean(layout, cfg, cfg.size, cfg.size);
    if factor <= 1.0 + 1e-12 {
        let mut img = clean;
        speckle(&mut img, cfg.looks, rng);
        return Ok(img);
    }
    let blurred = gaussian_smooth(&clean, cfg.blur_per_factor * factor)?;
    let n = (cfg.size as f64 / factor).ceil() as usize;
    let mut coarse = Image::from_fn(n, n, |i, j| {
        blurred.sample_bilinear(
            (i as f64 + 0.5) * factor - 0.5,
            (j as f64 + 0.5) * factor - 0.5,
        )
    });
    speckle(&mut coarse, cfg.looks, rng);
    Ok(Image::from_fn(cfg.size, cfg.size, |x, y| {
        coarse.sample_bilinear(
            (x as f64 + 0.5) / factor - 0.5,
            (y as f64 + 0.5) / factor - 0.5,
        )
    }))
}

/// Generates one scene: layout first, then speckle, all from `rng`.
pub fn gen_scene(cfg: &GenConfig, domain: Domain, rng: &mut Rng) -> Result<Scene> {
    cfg.validate()?;
    let (layout, warnings) = sample_layout(cfg, rng);
    for w in &warnings {
        log::warn!("{w}");
    }
    let image = render(&layout, cfg, cfg.resolution_factor, rng)?;
    let annotation = Annotation {
        boxes: layout.targets.iter().map(|t| t.bbox).collect(),
    };
    Ok(Scene {
        image: SceneImage {
            image,
            domain,
            resolution_factor: cfg.resolution_factor,
        },
        annotation,
        layout,
        warnings,
    })
}

/// Scene `index` rendered for one domain. The layout comes from a stream shared
/// by both domains; speckle comes from a per-domain stream.
pub fn gen_scene_at(
    cfg: &GenConfig,
    domain: Domain,
    factor: f64,
    seed: u64,
    index: u64,
) -> Result<Scene> {
    let base = rng::streams::SCENE_BASE + index * 4;
    let mut c = cfg.clone();
    c.resolution_factor = factor;
    c.validate()?;
    let mut layout_rng = rng::stream(seed, base);
    let (layout, warnings) = sample_layout(&c, &mut layout_rng);
    let offset = match domain {
        Domain::Source => 1,
        Domain::Target => 2,
    };
    let mut srng = rng::stream(seed, base + offset);
    let image = render(&layout, &c, factor, &mut srng)?;
    let annotation = Annotation {
        boxes: layout.targets.iter().map(|t| t.bbox).collect(),
    };
    Ok(Scene {
        image: SceneImage {
            image,
            domain,
            resolution_factor: factor,
        },
        annotation,
        layout,
        warnings,
    })
}

/// Source and target renderings of the same scene layout.
pub fn gen_scene_pair(
    cfg: &GenConfig,
    source_factor: f64,
    target_factor: f64,
    seed: u64,
    index: u64,
) -> Result<(Scene, Scene)> {
    Ok((
        gen_scene_at(cfg, Domain::Source, source_factor, seed, index)?,
        gen_scene_at(cfg, Domain::Target, target_factor, seed, index)?,
    ))
}

/// Renders a single constellation centered in a `box_size` crop and resamples it
/// onto a `canonical` patch. `speckled` applies per-pixel speckle.
pub fn render_constellation_patch(
    kind: ConstellationKind,
    cfg: &GenConfig,
    box_size: usize,
    canonical: usize,
    speckled: bool,
    rng: &mut Rng,
) -> Result<Image> {
    let (mut local, b) = sample_constellation(cfg, kind, rng);
    let (ox, oy) = (
        box_size as f64 / 2.0 - (b.x + b.w / 2.0),
        box_size as f64 / 2.0 - (b.y + b.h / 2.0),
    );
    for p in local.iter_mut() {
        p.0 += ox;
        p.1 += oy;
    }
    let layout = Layout {
        targets: vec![Target {
            kind,
            scatterers: local,
            bbox: BBox::new(0., 0., box_size as f64, box_size as f64),
        }],
        clutter: vec![],
    };
    let mut img = render_clean(&layout, cfg, box_size, box_size);
    if speckled {
        speckle(&mut img, cfg.looks, rng);
    }
    resize_roi(
        &img,
        &BBox::new(0., 0., box_size as f64, box_size as f64),
        canonical,
    )
}
