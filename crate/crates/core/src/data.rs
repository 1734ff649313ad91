//! Synthetic multi-domain face images, a directory loader and the balanced
//! batch sampler.
//!
//! Every synthetic sample draws from its own ChaCha8 stream: the domain seed
//! selects the key and `type_index · 2³² + sample_index` selects the stream,
//! so a sample does not depend on how many others are generated.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::text::ImageType;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `C × H × W`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: u8,
    pub kind: ImageType,
    pub domain: String,
    pub id: String,
}

impl Sample {
    pub fn new(image: Tensor, kind: ImageType, domain: &str, id: &str) -> Result<Self> {
        if image.shape().len() != 3 {
            return Err(Error::shape(format!(
                "sample images are C × H × W, got {:?}",
                image.shape()
            )));
        }
        Ok(Sample {
            image,
            label: kind.label(),
            kind,
            domain: domain.to_string(),
            id: id.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDomainSpec {
    pub domain: String,
    pub brightness: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
    /// Rotation about the gray axis, radians.
    pub hue: f64,
    /// Box blur radius in pixels.
    pub blur_radius: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
}

impl SyntheticDomainSpec {
    pub fn new(domain: &str, seed: u64) -> Self {
        SyntheticDomainSpec {
            domain: domain.to_string(),
            brightness: 0.0,
            contrast: 1.0,
            noise_sigma: 0.0,
            hue: 0.0,
            blur_radius: 0,
            seed,
            height: 32,
            width: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.domain.is_empty() {
            return Err(Error::invalid("domain id is empty"));
        }
        if !(self.contrast > 0.0) {
            return Err(Error::invalid(format!(
                "contrast gain {} must be positive",
                self.contrast
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid(format!(
                "noise sigma {} must be non-negative",
                self.noise_sigma
            )));
        }
        if !self.brightness.is_finite() || !self.hue.is_finite() {
            return Err(Error::invalid("style parameters must be finite"));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::invalid("synthetic images need at least 8 × 8 pixels"));
        }
        Ok(())
    }
}

/// A domain spec with per-type sample counts.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainPlan {
    pub spec: SyntheticDomainSpec,
    pub real: usize,
    pub print: usize,
    pub replay: usize,
}

impl DomainPlan {
    pub fn generate(&self) -> Result<Vec<Sample>> {
        generate_counts(&self.spec, [self.real, self.print, self.replay])
    }
}

/// Four styled domains with three spoof images for every live one.
pub fn default_domains() -> Vec<DomainPlan> {
    let plan = |domain: &str, seed, brightness, contrast, noise_sigma, hue, blur_radius, real| {
        DomainPlan {
            spec: SyntheticDomainSpec {
                brightness,
                contrast,
                noise_sigma,
                hue,
                blur_radius,
                ..SyntheticDomainSpec::new(domain, seed)
            },
            real,
            print: real * 3 / 2,
            replay: real * 3 / 2,
        }
    };
    vec![
        plan("SynO", 101, 0.0, 1.0, 0.02, 0.0, 0, 16),
        plan("SynC", 202, 0.08, 0.8, 0.04, 0.6, 0, 12),
        plan("SynI", 303, -0.08, 1.15, 0.01, -0.5, 0, 14),
        plan("SynM", 404, 0.04, 0.9, 0.03, 0.3, 0, 10),
    ]
}

/// `per_class_count` images of each of real, print and replay.
pub fn generate_domain(spec: &SyntheticDomainSpec, per_class_count: usize) -> Result<Vec<Sample>> {
    if per_class_count == 0 {
        return Err(Error::invalid("per-class count must be at least 1"));
    }
    generate_counts(spec, [per_class_count; 3])
}

pub fn generate_counts(spec: &SyntheticDomainSpec, counts: [usize; 3]) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (ti, kind) in ImageType::ALL.into_iter().enumerate() {
        for i in 0..counts[ti] {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(((ti as u64) << 32) | i as u64);
            let img = synthesize(spec, kind, &mut rng);
            let id = format!("{}-{}-{:04}", spec.domain, kind, i);
            out.push(Sample::new(img, kind, &spec.domain, &id)?);
        }
    }
    Ok(out)
}

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Canvas {
            h,
            w,
            px: vec![0.0; 3 * h * w],
        }
    }

    fn at(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.px[(c * self.h + y) * self.w + x]
    }

    fn map(&mut self, mut f: impl FnMut(usize, f64, f64, f64) -> f64) {
        let (h, w) = (self.h, self.w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let u = (x as f64 + 0.5) / w as f64;
                    let v = (y as f64 + 0.5) / h as f64;
                    let p = self.at(c, y, x);
                    *p = f(c, u, v, *p);
                }
            }
        }
    }

    fn box_blur(&mut self, r: usize) {
        if r == 0 {
            return;
        }
        let (h, w) = (self.h, self.w);
        let src = self.px.clone();
        let r = r as isize;
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let (mut s, mut n) = (0.0, 0.0);
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (yy, xx) = (y as isize + dy, x as isize + dx);
                            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                s += src[(c * h + yy as usize) * w + xx as usize];
                                n += 1.0;
                            }
                        }
                    }
                    self.px[(c * h + y) * w + x] = s / n;
                }
            }
        }
    }

    fn into_tensor(self) -> Tensor {
        let px = self.px.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Tensor::new(&[3, self.h, self.w], px).expect("finite pixels")
    }
}

fn gauss2(du: f64, dv: f64, s: f64) -> f64 {
    (-(du * du + dv * dv) / (2.0 * s * s)).exp()
}

fn face(spec: &SyntheticDomainSpec, rng: &mut ChaCha8Rng) -> Canvas {
    let mut cv = Canvas::new(spec.height, spec.width);
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.7));
    let grad = rng.random_range(-0.15..0.15);
    let (cx, cy) = (rng.random_range(0.42..0.58), rng.random_range(0.44..0.56));
    let (rx, ry) = (rng.random_range(0.22..0.3), rng.random_range(0.3..0.38));
    let r = rng.random_range(0.55..0.85);
    let skin = [r, r * rng.random_range(0.7..0.85), r * rng.random_range(0.55..0.75)];
    let light = rng.random_range(-0.3..0.3);
    let eye_dx = rng.random_range(0.08..0.12);
    let eye_y = cy - rng.random_range(0.05..0.09);
    let mouth_y = cy + rng.random_range(0.1..0.15);
    cv.map(|c, u, v, _| {
        let e = ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2);
        let mask = 1.0 / (1.0 + ((e - 1.0) * 8.0).exp());
        let shade = 1.0 + light * (u - cx) - 0.25 * e.min(1.0);
        let mut f = skin[c] * shade;
        f -= 0.45 * (gauss2(u - cx + eye_dx, v - eye_y, 0.03) + gauss2(u - cx - eye_dx, v - eye_y, 0.03));
        f -= 0.3 * gauss2((u - cx) * 0.35, v - mouth_y, 0.02);
        let back = bg[c] + grad * (v - 0.5);
        mask * f + (1.0 - mask) * back
    });
    cv
}

fn synthesize(spec: &SyntheticDomainSpec, kind: ImageType, rng: &mut ChaCha8Rng) -> Tensor {
    let mut cv = face(spec, rng);
    match kind {
        ImageType::Real => {}
        ImageType::Print => {
            cv.box_blur(1);
            let period = rng.random_range(3.5..5.0);
            let amp = rng.random_range(0.3..0.4);
            let fade = rng.random_range(0.75..0.9);
            let (w, h) = (spec.width as f64, spec.height as f64);
            cv.map(|_, u, v, p| {
                let (x, y) = (u * w, v * h);
                let dots = 0.5 + 0.5 * (std::f64::consts::TAU * x / period).cos()
                    * (std::f64::consts::TAU * y / period).cos();
                let faded = 0.5 + fade * (p - 0.5);
                faded * (1.0 - amp * dots)
            });
        }
        ImageType::Replay => {
            let period = rng.random_range(4.0..7.0);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.15..0.22);
            let spec_amp = rng.random_range(0.2..0.35);
            let spec_w = rng.random_range(0.06..0.12);
            let band_theta = rng.random_range(0.0..std::f64::consts::PI);
            let band_off = rng.random_range(-0.2..0.2);
            let (w, h) = (spec.width as f64, spec.height as f64);
            cv.map(|c, u, v, p| {
                let (x, y) = (u * w, v * h);
                let t = (x * theta.cos() + y * theta.sin()) / period;
                let moire = (std::f64::consts::TAU * t + phase + c as f64 * 0.8).sin();
                let d = (u - 0.5) * band_theta.cos() + (v - 0.5) * band_theta.sin() - band_off;
                let band = (-(d * d) / (2.0 * spec_w * spec_w)).exp();
                p + amp * moire + spec_amp * band
            });
        }
    }
    style(&mut cv, spec, rng);
    cv.into_tensor()
}

/// Domain appearance: hue rotation, contrast and brightness, blur, noise.
fn style(cv: &mut Canvas, spec: &SyntheticDomainSpec, rng: &mut ChaCha8Rng) {
    let m = hue_matrix(spec.hue);
    let n = cv.h * cv.w;
    for i in 0..n {
        let rgb = [cv.px[i], cv.px[n + i], cv.px[2 * n + i]];
        for c in 0..3 {
            let rotated: f64 = (0..3).map(|k| m[c][k] * rgb[k]).sum();
            cv.px[c * n + i] = (rotated - 0.5) * spec.contrast + 0.5 + spec.brightness;
        }
    }
    cv.box_blur(spec.blur_radius);
    if spec.noise_sigma > 0.0 {
        for p in cv.px.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *p += spec.noise_sigma * z;
        }
    }
}

/// Rotation by `theta` about the `(1, 1, 1)` axis.
fn hue_matrix(theta: f64) -> [[f64; 3]; 3] {
    let (c, s) = (theta.cos(), theta.sin());
    let k = 1.0 / 3.0;
    let r = (1.0f64 / 3.0).sqrt();
    let a = c + (1.0 - c) * k;
    let b = k * (1.0 - c) - r * s;
    let d = k * (1.0 - c) + r * s;
    [[a, b, d], [d, a, b], [b, d, a]]
}

/// Read `<root>/<domain>/<type>/<image>` into samples resized to
/// `height × width`.
pub fn load_directory(root: impl AsRef<Path>, height: usize, width: usize) -> Result<Vec<Sample>> {
    let root = root.as_ref();
    let mut out = Vec::new();
    for domain_dir in sorted_dirs(root)? {
        let domain = file_name(&domain_dir);
        for type_dir in sorted_dirs(&domain_dir)? {
            let type_name = file_name(&type_dir);
            let kind: ImageType = type_name.parse().map_err(|_| {
                Error::invalid(format!(
                    "{}: unknown image type directory {type_name:?}",
                    type_dir.display()
                ))
            })?;
            let mut files: Vec<_> = fs::read_dir(&type_dir)
                .map_err(|e| Error::io(&type_dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            for f in files {
                let img = image::open(&f).map_err(|e| Error::Image {
                    path: f.clone(),
                    message: e.to_string(),
                })?;
                let rgb = image::imageops::resize(
                    &img.to_rgb8(),
                    width as u32,
                    height as u32,
                    image::imageops::FilterType::Triangle,
                );
                let mut px = vec![0.0; 3 * height * width];
                for (x, y, p) in rgb.enumerate_pixels() {
                    for c in 0..3 {
                        px[(c * height + y as usize) * width + x as usize] = p[c] as f64 / 255.0;
                    }
                }
                let id = format!("{domain}/{type_name}/{}", file_name(&f));
                let image = Tensor::new(&[3, height, width], px)?;
                out.push(Sample::new(image, kind, &domain, &id)?);
            }
        }
    }
    if out.is_empty() {
        log::warn!("no images found under {}", root.display());
    }
    Ok(out)
}

fn sorted_dirs(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    Ok(v)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Write samples as 8-bit PNGs in the layout [`load_directory`] reads.
pub fn export_png(samples: &[Sample], root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    for s in samples {
        let dir = root.join(&s.domain).join(s.kind.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let shape = s.image.shape();
        let (h, w) = (shape[1], shape[2]);
        let px = s.image.values();
        let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb(std::array::from_fn(|c| {
                let v = px[(c * h + y as usize) * w + x as usize];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            }))
        });
        let name = s.id.rsplit('/').next().unwrap_or(&s.id);
        let path = dir.join(format!("{name}.png"));
        buf.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
    }
    Ok(())
}

/// Index batches with `batch_size / 2` live and `batch_size / 2` attack
/// samples each. Attack slots alternate between the available attack types.
/// A class that runs out is reshuffled and drawn again, so the smaller class
/// repeats within an epoch. The epoch has `ceil(len / batch_size)` batches.
pub fn balanced_batches<R: Rng>(
    samples: &[Sample],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || !batch_size.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "batch size {batch_size} must be even and positive"
        )));
    }
    let of = |k: ImageType| -> Vec<usize> {
        samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind == k)
            .map(|(i, _)| i)
            .collect()
    };
    let real = of(ImageType::Real);
    let spoof_pools: Vec<Vec<usize>> = [ImageType::Print, ImageType::Replay]
        .into_iter()
        .map(of)
        .filter(|p| !p.is_empty())
        .collect();
    if real.is_empty() || spoof_pools.is_empty() {
        return Err(Error::invalid(
            "balanced batches need at least one live and one attack sample",
        ));
    }
    let n_batches = samples.len().div_ceil(batch_size);
    let half = batch_size / 2;
    let mut real_deck = Refill::new(real);
    let mut spoof_decks: Vec<Refill> = spoof_pools.into_iter().map(Refill::new).collect();
    let kinds = spoof_decks.len();
    let mut turn = 0;
    let mut out = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..half {
            batch.push(real_deck.draw(rng));
        }
        for _ in 0..half {
            batch.push(spoof_decks[turn % kinds].draw(rng));
            turn += 1;
        }
        out.push(batch);
    }
    Ok(out)
}

struct Refill {
    items: Vec<usize>,
    order: Vec<usize>,
}

impl Refill {
    fn new(items: Vec<usize>) -> Self {
        Refill {
            items,
            order: Vec::new(),
        }
    }

    fn draw<R: Rng>(&mut self, rng: &mut R) -> usize {
        if self.order.is_empty() {
            self.order = self.items.clone();
            self.order.shuffle(rng);
        }
        self.order.pop().expect("refilled")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_generation() {
        let spec = SyntheticDomainSpec::new("d", 7);
        let a = generate_domain(&spec, 3).unwrap();
        let b = generate_domain(&spec, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn counts_and_labels() {
        let s = generate_domain(&SyntheticDomainSpec::new("d", 1), 10).unwrap();
        assert_eq!(s.len(), 30);
        assert_eq!(s.iter().filter(|x| x.label == 1).count(), 10);
        for x in &s {
            assert_eq!(x.label == 1, x.kind == ImageType::Real);
            assert_eq!(x.image.shape(), &[3, 32, 32]);
        }
        assert!(generate_domain(&SyntheticDomainSpec::new("d", 1), 0).is_err());
    }

    #[test]
    fn samples_do_not_depend_on_count() {
        let spec = SyntheticDomainSpec::new("d", 5);
        let small = generate_domain(&spec, 2).unwrap();
        let large = generate_domain(&spec, 4).unwrap();
        assert_eq!(small[0], large[0]);
        assert_eq!(small[2].image, large[4].image);
    }

    #[test]
    fn brightness_shifts_means() {
        let base = SyntheticDomainSpec::new("a", 3);
        let bright = SyntheticDomainSpec {
            brightness: 0.05,
            ..base.clone()
        };
        let mean = |s: &[Sample]| {
            s.iter().map(|x| x.image.values().iter().sum::<f64>()).sum::<f64>()
                / s.iter().map(|x| x.image.numel()).sum::<usize>() as f64
        };
        let a = mean(&generate_domain(&base, 5).unwrap());
        let b = mean(&generate_domain(&bright, 5).unwrap());
        assert!((b - a - 0.05).abs() < 0.01, "{a} {b}");
    }

    #[test]
    fn invalid_specs() {
        let mut s = SyntheticDomainSpec::new("a", 1);
        s.contrast = 0.0;
        assert!(generate_domain(&s, 1).is_err());
        let mut s = SyntheticDomainSpec::new("a", 1);
        s.noise_sigma = -1.0;
        assert!(generate_domain(&s, 1).is_err());
    }

    #[test]
    fn hue_rotation_keeps_gray() {
        let m = hue_matrix(1.1);
        for row in m {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    fn fake(real: usize, print: usize, replay: usize) -> Vec<Sample> {
        let img = Tensor::zeros(&[3, 8, 8]);
        let mut v = Vec::new();
        for (k, n) in [(ImageType::Real, real), (ImageType::Print, print), (ImageType::Replay, replay)] {
            for i in 0..n {
                v.push(Sample::new(img.clone(), k, "d", &format!("{k}{i}")).unwrap());
            }
        }
        v
    }

    #[test]
    fn balanced_counts() {
        let s = fake(100, 50, 50);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = balanced_batches(&s, 8, &mut rng).unwrap();
        assert_eq!(b.len(), 25);
        for batch in &b {
            let real = batch.iter().filter(|&&i| s[i].label == 1).count();
            assert_eq!(real, 4);
            let print = batch.iter().filter(|&&i| s[i].kind == ImageType::Print).count();
            assert_eq!(print, 2);
        }
    }

    #[test]
    fn minority_is_resampled() {
        let s = fake(10, 50, 50);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = balanced_batches(&s, 8, &mut rng).unwrap();
        assert_eq!(b.len(), 14);
        for batch in &b {
            assert_eq!(batch.iter().filter(|&&i| s[i].label == 1).count(), 4);
        }
    }

    #[test]
    fn balanced_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(balanced_batches(&fake(4, 4, 4), 7, &mut rng).is_err());
        assert!(balanced_batches(&fake(0, 4, 4), 4, &mut rng).is_err());
        assert!(balanced_batches(&fake(4, 0, 0), 4, &mut rng).is_err());
    }

    #[test]
    fn single_attack_type_fills_spoof_half() {
        let s = fake(4, 0, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for batch in balanced_batches(&s, 4, &mut rng).unwrap() {
            assert_eq!(batch.iter().filter(|&&i| s[i].kind == ImageType::Replay).count(), 2);
        }
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_domain(&SyntheticDomainSpec::new("domA", 2), 2).unwrap();
        export_png(&samples, dir.path()).unwrap();
        let loaded = load_directory(dir.path(), 32, 32).unwrap();
        assert_eq!(loaded.len(), 6);
        for s in &loaded {
            assert_eq!(s.domain, "domA");
            let orig = samples.iter().find(|o| s.id.contains(&o.id)).unwrap();
            assert_eq!(orig.kind, s.kind);
            assert!(orig.image.max_abs_diff(&s.image) <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn directory_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_directory(dir.path(), 32, 32).unwrap().is_empty());
        fs::create_dir_all(dir.path().join("domA/mask")).unwrap();
        assert!(load_directory(dir.path(), 32, 32).is_err());
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("domA/real")).unwrap();
        fs::write(dir.path().join("domA/real/x.png"), b"not an image").unwrap();
        assert!(matches!(
            load_directory(dir.path(), 32, 32),
            Err(Error::Image { .. })
        ));
    }
}
