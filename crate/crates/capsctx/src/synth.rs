//! Synthetic correlated multi-label generator: grayscale glyph scenes with
//! controlled class co-occurrence and coupled rotations, so the CRF and
//! correlation paths have structure to exploit. Generation is a pure
//! function of (spec, index).

use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::data::MANIFEST_HEADER;
use crate::error::{CapsError, Result};
use crate::tensor::{Tensor, DTYPE_F32};
use crate::util::standard_normal;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    /// Number of classes; paired as (2g, 2g+1).
    pub classes: usize,
    /// Square canvas edge length in pixels.
    pub canvas: usize,
    /// Probability that class 2g+1 co-occurs with class 2g.
    pub co_occurrence: f64,
    /// Correlation of the paired glyph's rotation value with its base glyph.
    pub rotation_coupling: f64,
    /// Peak amplitude of additive per-pixel background noise. Partner glyphs
    /// render down to this brightness, so recognizing them reliably needs the
    /// co-occurrence context, not just pixels.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 8,
            canvas: 36,
            co_occurrence: 0.8,
            rotation_coupling: 0.9,
            noise: 0.15,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Flat `key = value` text with `#` comments, matching the model config
    /// format; unknown keys rejected.
    pub fn from_str_cfg(text: &str) -> Result<SynthSpec> {
        let mut spec = SynthSpec::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let bad = |m: String| CapsError::Config(format!("line {}: {m}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad("expected `key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "classes" => {
                    spec.classes = value
                        .parse()
                        .map_err(|_| bad(format!("classes: expected integer, got `{value}`")))?
                }
                "canvas" => {
                    spec.canvas = value
                        .parse()
                        .map_err(|_| bad(format!("canvas: expected integer, got `{value}`")))?
                }
                "co_occurrence" => {
                    spec.co_occurrence = value
                        .parse()
                        .map_err(|_| bad(format!("co_occurrence: expected real, got `{value}`")))?
                }
                "rotation_coupling" => {
                    spec.rotation_coupling = value.parse().map_err(|_| {
                        bad(format!("rotation_coupling: expected real, got `{value}`"))
                    })?
                }
                "noise" => {
                    spec.noise = value
                        .parse()
                        .map_err(|_| bad(format!("noise: expected real, got `{value}`")))?
                }
                "seed" => {
                    spec.seed = value
                        .parse()
                        .map_err(|_| bad(format!("seed: expected integer, got `{value}`")))?
                }
                _ => return Err(bad(format!("unknown key `{key}`"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<SynthSpec> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CapsError::Io(format!("{}: {e}", path.display())))?;
        Self::from_str_cfg(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes % 2 != 0 {
            return Err(CapsError::Config("classes must be positive and even".into()));
        }
        if self.canvas < 2 * MAX_GLYPH_RADIUS {
            return Err(CapsError::Config(format!(
                "canvas {} too small for max glyph radius {MAX_GLYPH_RADIUS}",
                self.canvas
            )));
        }
        if !(0.0..=1.0).contains(&self.co_occurrence) {
            return Err(CapsError::Config("co_occurrence must lie in [0, 1]".into()));
        }
        if !(-1.0..=1.0).contains(&self.rotation_coupling) {
            return Err(CapsError::Config("rotation_coupling must lie in [-1, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(CapsError::Config("noise must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Largest glyph half-extent in pixels (base radius times max scale).
pub const MAX_GLYPH_RADIUS: usize = 8;
const BASE_RADIUS: f64 = 6.0;

#[derive(Debug, Clone)]
pub struct Glyph {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    /// Unbounded rotation value; the rendered angle is a bounded map of it.
    pub rotation_value: f64,
    pub scale: f64,
    pub brightness: f64,
}

impl Glyph {
    pub fn angle(&self) -> f64 {
        // Keep rotations within +-0.6 rad so rotated glyphs stay class-
        // distinguishable.
        0.6 * (self.rotation_value / 1.5).tanh()
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub glyphs: Vec<Glyph>,
    pub labels: Vec<u8>,
    /// Seed for the background-noise field, drawn with the scene so rendering
    /// stays a pure function of (spec, index).
    pub noise_seed: u64,
}

/// Pure scene sampler: 1-2 base classes from the even classes, each paired
/// partner present with probability `co_occurrence`, partner rotation values
/// correlated with the base by `rotation_coupling`.
pub fn sample_scene(spec: &SynthSpec, index: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index.wrapping_add(1));
    let pairs = spec.classes / 2;
    let n_base = if pairs >= 2 && rng.gen_bool(0.5) { 2 } else { 1 };
    let mut bases: Vec<usize> = (0..pairs).collect();
    // Partial Fisher-Yates draw of n_base distinct pairs.
    for i in 0..n_base {
        let j = rng.gen_range(i..pairs);
        bases.swap(i, j);
    }
    let bases = &bases[..n_base];
    let mut glyphs = Vec::new();
    let mut labels = vec![0u8; spec.classes];
    let margin = MAX_GLYPH_RADIUS as f64;
    let lo = margin;
    let hi = spec.canvas as f64 - margin;
    for &g in bases {
        let base_class = 2 * g;
        let base_rot = standard_normal(&mut rng);
        let with_partner = rng.gen_bool(spec.co_occurrence);
        let mut place =
            |class: usize, rotation_value: f64, bright: (f64, f64), rng: &mut ChaCha8Rng| {
                glyphs.push(Glyph {
                    class,
                    cx: rng.gen_range(lo..hi),
                    cy: rng.gen_range(lo..hi),
                    rotation_value,
                    scale: rng.gen_range(0.75..1.25),
                    brightness: rng.gen_range(bright.0..bright.1),
                });
            };
        place(base_class, base_rot, (0.75, 1.0), &mut rng);
        labels[base_class] = 1;
        // Draw the partner rotation unconditionally to keep the RNG stream
        // aligned whether or not the partner renders.
        let c = spec.rotation_coupling;
        let partner_rot = c * base_rot + (1.0 - c * c).sqrt() * standard_normal(&mut rng);
        if with_partner {
            // Partners can be as faint as the noise floor: pixel evidence
            // alone is then unreliable and the co-occurrence prior pays off.
            place(base_class + 1, partner_rot, (spec.noise.max(0.1), 0.85), &mut rng);
            labels[base_class + 1] = 1;
        }
    }
    Ok(Scene { glyphs, labels, noise_seed: rng.gen() })
}

/// Glyph membership in local coordinates (u, v) in [-1, 1]; eight shapes,
/// one per class.
fn glyph_value(class: usize, u: f64, v: f64) -> f64 {
    if u.abs() > 1.0 || v.abs() > 1.0 {
        return 0.0;
    }
    let r = (u * u + v * v).sqrt();
    let hit = match class {
        0 => v.abs() < 0.22,                                    // bar
        1 => (0.5..0.85).contains(&r),                           // ring
        2 => u.abs() < 0.2 || v.abs() < 0.2,                     // cross
        3 => (u < -0.45 && u > -0.85) || (v > 0.45 && v < 0.85), // corner
        4 => (v > 0.45 && v < 0.85) || u.abs() < 0.2,            // tee
        5 => ((u.abs() + v.abs()) - 0.75).abs() < 0.18,          // diamond
        6 => r < 0.45,                                           // dot
        7 => (u.abs() - v.abs()).abs() < 0.25,                   // saltire
        _ => false,
    };
    if hit {
        1.0
    } else {
        0.0
    }
}

/// Rasterize a scene onto a canvas x canvas x 1 tensor in [0, 1].
pub fn render(spec: &SynthSpec, scene: &Scene) -> Tensor {
    let n = spec.canvas;
    let mut img = Tensor::zeros(vec![n, n, 1]);
    for g in &scene.glyphs {
        let radius = BASE_RADIUS * g.scale;
        let (sin, cos) = g.angle().sin_cos();
        let y0 = ((g.cy - radius - 1.0).floor().max(0.0)) as usize;
        let y1 = ((g.cy + radius + 1.0).ceil().min(n as f64 - 1.0)) as usize;
        let x0 = ((g.cx - radius - 1.0).floor().max(0.0)) as usize;
        let x1 = ((g.cx + radius + 1.0).ceil().min(n as f64 - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                // 2x2 supersampling.
                let mut acc = 0.0;
                for sy in 0..2 {
                    for sx in 0..2 {
                        let py = y as f64 + 0.25 + 0.5 * sy as f64 - g.cy;
                        let px = x as f64 + 0.25 + 0.5 * sx as f64 - g.cx;
                        let u = (cos * px + sin * py) / radius;
                        let v = (-sin * px + cos * py) / radius;
                        acc += glyph_value(g.class, u, v);
                    }
                }
                let val = g.brightness * acc / 4.0;
                let cur = img.at(&[y, x, 0]);
                if val > cur {
                    img.set(&[y, x, 0], val);
                }
            }
        }
    }
    if spec.noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.noise_seed);
        for v in img.data_mut() {
            *v = (*v + rng.gen::<f64>() * spec.noise).min(1.0);
        }
    }
    img
}

/// Generate `n` images plus a manifest under `out_dir`. Returns the manifest
/// path. Byte-identical for identical (spec, n).
pub fn generate(spec: &SynthSpec, n: usize, out_dir: &Path) -> Result<PathBuf> {
    if n == 0 {
        return Err(CapsError::Config("n must be >= 1".into()));
    }
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| CapsError::Io(format!("{}: {e}", out_dir.display())))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for i in 0..n {
        let scene = sample_scene(spec, i as u64)?;
        let img = render(spec, &scene);
        let name = format!("img_{i:06}.ctns");
        img.save_ctns(&out_dir.join(&name), DTYPE_F32)?;
        let classes: Vec<String> = scene
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != 0)
            .map(|(c, _)| c.to_string())
            .collect();
        manifest.push_str(&format!("{name},{}\n", classes.join(";")));
    }
    let mpath = out_dir.join("manifest.csv");
    std::fs::write(&mpath, manifest).map_err(|e| CapsError::Io(format!("{}: {e}", mpath.display())))?;
    Ok(mpath)
}
