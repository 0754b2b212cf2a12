//! Procedural shape classes and deterministic instance rendering.

use std::f32::consts::PI;

use camseg_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::seed::mix;

pub const NUM_CLASSES: usize = 20;

/// Inclusive bounds on the foreground share of every rendered mask.
pub const MIN_FOREGROUND: f64 = 0.05;
pub const MAX_FOREGROUND: f64 = 0.60;

/// One procedural silhouette per class id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeFamily {
    Circle,
    Square,
    Triangle,
    Ring,
    Plus,
    Diamond,
    Ellipse,
    Star,
    Hexagon,
    Crescent,
    Frame,
    Saltire,
    Dome,
    Tee,
    Ell,
    Aitch,
    Arrow,
    Bar,
    Hourglass,
    TwinDots,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; NUM_CLASSES] = [
        ShapeFamily::Circle,
        ShapeFamily::Square,
        ShapeFamily::Triangle,
        ShapeFamily::Ring,
        ShapeFamily::Plus,
        ShapeFamily::Diamond,
        ShapeFamily::Ellipse,
        ShapeFamily::Star,
        ShapeFamily::Hexagon,
        ShapeFamily::Crescent,
        ShapeFamily::Frame,
        ShapeFamily::Saltire,
        ShapeFamily::Dome,
        ShapeFamily::Tee,
        ShapeFamily::Ell,
        ShapeFamily::Aitch,
        ShapeFamily::Arrow,
        ShapeFamily::Bar,
        ShapeFamily::Hourglass,
        ShapeFamily::TwinDots,
    ];

    pub fn of_class(class_id: usize) -> Result<Self> {
        Self::ALL.get(class_id).copied().ok_or_else(|| Error::Range {
            what: "class id",
            value: class_id,
            allowed: format!("0..{NUM_CLASSES}"),
        })
    }

    /// Membership test in shape-local coordinates; every family fits inside
    /// the unit disk.
    pub fn contains(self, u: f32, v: f32) -> bool {
        let (au, av) = (u.abs(), v.abs());
        let r2 = u * u + v * v;
        match self {
            ShapeFamily::Circle => r2 <= 0.95 * 0.95,
            ShapeFamily::Square => au <= 0.7 && av <= 0.7,
            ShapeFamily::Triangle => v <= 0.5 && v >= -1.0 + 3f32.sqrt() * au,
            ShapeFamily::Ring => (0.55 * 0.55..=1.0).contains(&r2),
            ShapeFamily::Plus => (au <= 0.28 && av <= 0.95) || (av <= 0.28 && au <= 0.95),
            ShapeFamily::Diamond => au + av <= 1.0,
            ShapeFamily::Ellipse => u * u + (v / 0.55).powi(2) <= 1.0,
            ShapeFamily::Star => {
                let theta = v.atan2(u) + PI / 2.0;
                let sector = 2.0 * PI / 5.0;
                let a = theta.rem_euclid(sector);
                let tip = 1.0 - (a - sector / 2.0).abs() / (sector / 2.0);
                r2.sqrt() <= 0.42 + 0.58 * tip * tip
            }
            ShapeFamily::Hexagon => av <= 0.83 && au + av / 3f32.sqrt() <= 0.96,
            ShapeFamily::Crescent => r2 <= 1.0 && (u - 0.45).powi(2) + v * v > 0.75 * 0.75,
            ShapeFamily::Frame => au.max(av) <= 0.85 && au.max(av) > 0.5,
            ShapeFamily::Saltire => {
                let (p, q) = ((u + v) / 2f32.sqrt(), (u - v) / 2f32.sqrt());
                r2 <= 1.0 && (p.abs() <= 0.24 || q.abs() <= 0.24)
            }
            ShapeFamily::Dome => u * u + (v - 0.45).powi(2) <= 1.0 && v <= 0.45,
            ShapeFamily::Tee => (au <= 0.9 && (-0.9..=-0.45).contains(&v)) || (au <= 0.25 && av <= 0.9),
            ShapeFamily::Ell => ((-0.8..=-0.35).contains(&u) && av <= 0.9) || (au <= 0.8 && (0.45..=0.9).contains(&v)),
            ShapeFamily::Aitch => ((0.45..=0.85).contains(&au) && av <= 0.9) || (au <= 0.85 && av <= 0.2),
            ShapeFamily::Arrow => {
                ((-0.9..=0.1).contains(&u) && av <= 0.22) || ((0.1..=0.95).contains(&u) && av <= (0.95 - u) * 0.85)
            }
            ShapeFamily::Bar => au <= 0.95 && av <= 0.3,
            ShapeFamily::Hourglass => av <= 0.9 && au <= av * 0.9 + 0.08,
            ShapeFamily::TwinDots => (au - 0.5).powi(2) + v * v <= 0.42 * 0.42,
        }
    }
}

/// A rendered RGB image in [0, 1] with its exact foreground mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub class_id: usize,
    pub seed: u64,
    pub size: usize,
    /// Channel-major 3×size×size.
    pub pixels: Vec<f32>,
    pub mask: Mask,
}

impl Instance {
    /// 1×3×H×W tensor.
    pub fn image_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 3, self.size, self.size], self.pixels.clone()).expect("consistent size")
    }

    /// 1×1×H×W tensor of 0/1.
    pub fn mask_tensor(&self) -> Tensor {
        self.mask.to_tensor()
    }
}

/// Stack same-sized instances into N×3×H×W images and N×1×H×W masks.
pub fn stack(instances: &[&Instance]) -> (Tensor, Tensor) {
    let size = instances.first().map_or(0, |i| i.size);
    let n = instances.len();
    let mut pixels = Vec::with_capacity(n * 3 * size * size);
    let mut masks = Vec::with_capacity(n * size * size);
    for inst in instances {
        assert_eq!(inst.size, size, "instances must share one size");
        pixels.extend_from_slice(&inst.pixels);
        masks.extend(inst.mask.bits().iter().map(|&b| b as u8 as f32));
    }
    (
        Tensor::new(vec![n, 3, size, size], pixels).expect("consistent size"),
        Tensor::new(vec![n, 1, size, size], masks).expect("consistent size"),
    )
}

#[derive(Clone, Copy, Debug)]
struct Placement {
    cx: f32,
    cy: f32,
    radius: f32,
    cos: f32,
    sin: f32,
}

impl Placement {
    fn local(&self, x: f32, y: f32) -> (f32, f32) {
        let (dx, dy) = ((x - self.cx) / self.radius, (y - self.cy) / self.radius);
        (self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy)
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Render instance `seed` of class `class_id` at `size`×`size`.
///
/// The background is low-amplitude noise plus a few thin strokes and small
/// specks; none of them use a class silhouette. The object's colour has every
/// RGB channel strictly positive, so masking zeroes exactly the background.
pub fn render_instance(class_id: usize, seed: u64, size: usize) -> Result<Instance> {
    let family = ShapeFamily::of_class(class_id)?;
    if size == 0 || size % 8 != 0 {
        return Err(Error::Validation(format!("image size {size} must be a positive multiple of 8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[0x5EED_CA75, class_id as u64, seed]));
    let s = size as f32;
    let plane = size * size;

    let mut pixels = vec![0.0f32; 3 * plane];
    for p in pixels.iter_mut() {
        *p = rng.random_range(0.0..0.3);
    }
    draw_clutter(&mut pixels, size, &mut rng);

    // Re-draw the placement until the coverage lands in the allowed band.
    let mut bits = vec![false; plane];
    let mut placement = None;
    for _ in 0..64 {
        let radius = s * rng.random_range(0.17..0.32);
        let angle = rng.random_range(-0.3f32..0.3);
        let pl = Placement {
            cx: rng.random_range(radius..s - radius),
            cy: rng.random_range(radius..s - radius),
            radius,
            cos: angle.cos(),
            sin: angle.sin(),
        };
        let mut count = 0usize;
        for y in 0..size {
            for x in 0..size {
                let (u, v) = pl.local(x as f32 + 0.5, y as f32 + 0.5);
                let inside = family.contains(u, v);
                bits[y * size + x] = inside;
                count += inside as usize;
            }
        }
        let frac = count as f64 / plane as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            placement = Some(pl);
            break;
        }
    }
    let pl = placement.ok_or_else(|| {
        Error::Validation(format!("class {class_id} seed {seed}: no placement met the coverage bounds"))
    })?;

    let base = hsv_to_rgb(
        rng.random_range(0.0..1.0),
        rng.random_range(0.4..0.85),
        rng.random_range(0.7..1.0),
    );
    let shade_dir = rng.random_range(0.0..2.0 * PI);
    for y in 0..size {
        for x in 0..size {
            let idx = y * size + x;
            if !bits[idx] {
                continue;
            }
            let (u, v) = pl.local(x as f32 + 0.5, y as f32 + 0.5);
            let shade = 0.88 + 0.12 * (u * shade_dir.cos() + v * shade_dir.sin()).clamp(-1.0, 1.0);
            for c in 0..3 {
                pixels[c * plane + idx] = base[c] * shade;
            }
        }
    }
    Ok(Instance {
        class_id,
        seed,
        size,
        pixels,
        mask: Mask::from_bits(size, size, bits).expect("consistent size"),
    })
}

fn draw_clutter(pixels: &mut [f32], size: usize, rng: &mut ChaCha8Rng) {
    let plane = size * size;
    let s = size as f32;
    let mut paint = |x: i64, y: i64, rgb: [f32; 3]| {
        if x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size {
            let idx = y as usize * size + x as usize;
            for c in 0..3 {
                pixels[c * plane + idx] = rgb[c];
            }
        }
    };
    let strokes = rng.random_range(1..=3);
    for _ in 0..strokes {
        let rgb = hsv_to_rgb(rng.random_range(0.0..1.0), rng.random_range(0.3..0.9), rng.random_range(0.5..1.0));
        let (x0, y0) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let len = rng.random_range(0.2..0.6) * s;
        let dir = rng.random_range(0.0..2.0 * PI);
        let steps = (len * 2.0) as usize;
        for i in 0..=steps {
            let t = i as f32 / 2.0;
            paint((x0 + t * dir.cos()) as i64, (y0 + t * dir.sin()) as i64, rgb);
        }
    }
    let specks = rng.random_range(2..=5);
    for _ in 0..specks {
        let rgb = hsv_to_rgb(rng.random_range(0.0..1.0), rng.random_range(0.3..0.9), rng.random_range(0.5..1.0));
        let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let r = rng.random_range(1.0f32..3.0);
        let ri = r.ceil() as i64;
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                if ((dx * dx + dy * dy) as f32) <= r * r {
                    paint(cx as i64 + dx, cy as i64 + dy, rgb);
                }
            }
        }
    }
}
