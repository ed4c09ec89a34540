//! Synthetic multi-site dataset generator plus on-disk ingestion.
//!
//! Every sample is a smooth random blob mask (1-3 wobbled ellipses) over a
//! textured background. Mask geometry and base texture depend only on
//! `(seed, sample index)`; a site then imprints its acquisition character
//! on the image alone: gamma contrast, a global intensity bias, a
//! low-frequency multiplicative-free additive field, Gaussian blur and
//! Gaussian noise, clamped to `[0, 1]`. Two sites with the same seed thus
//! share identical masks while their images differ — the shift is purely
//! photometric, the way scanner and protocol differences are.

use crate::error::{Error, Result};
use crate::rng::{child_seed_indexed, rng_from};
use crate::tensor::LabelMap;
use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

/// Acquisition character of one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub site_id: String,
    pub intensity_bias: f64,
    pub contrast_gamma: f64,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    pub field_inhomogeneity_amp: f64,
}

/// The six default sites. S3 is deliberately the most extreme (largest
/// gamma warp, bias and field amplitude); the others grade the shift.
pub fn default_sites() -> Vec<SiteSpec> {
    let mk = |id: &str, bias, gamma, noise, blur, amp| SiteSpec {
        site_id: id.to_string(),
        intensity_bias: bias,
        contrast_gamma: gamma,
        noise_sigma: noise,
        blur_sigma: blur,
        field_inhomogeneity_amp: amp,
    };
    vec![
        mk("S1", 0.00, 1.00, 0.020, 0.0, 0.05),
        mk("S2", 0.04, 0.75, 0.030, 0.6, 0.10),
        mk("S3", -0.12, 2.00, 0.060, 1.2, 0.30),
        mk("S4", 0.02, 1.30, 0.010, 0.8, 0.08),
        mk("S5", 0.01, 0.90, 0.045, 0.3, 0.12),
        mk("S6", 0.00, 1.60, 0.025, 0.9, 0.18),
    ]
}

/// Default spec for a site id, if it is one of the six.
pub fn site_spec(site_id: &str) -> Result<SiteSpec> {
    default_sites()
        .into_iter()
        .find(|s| s.site_id == site_id)
        .ok_or_else(|| Error::Lookup(format!("unknown site `{site_id}`; defaults are S1..S6")))
}

/// Images in `[0, 1]` with binary masks, all from one site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteDataset {
    pub images: Array4<f64>,
    pub masks: Array3<u32>,
    pub site_id: String,
    pub seed: u64,
}

impl SiteDataset {
    pub fn len(&self) -> usize {
        self.images.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label_map(&self) -> LabelMap {
        LabelMap::new(self.masks.clone(), 2).expect("binary masks")
    }
}

struct SampleBase {
    mask: Array2<f64>,
    texture: Array2<f64>,
    field: Array2<f64>,
    noise: Array2<f64>,
}

/// Geometry, texture, bias-field pattern and noise grid for one sample.
/// Consumes the per-sample stream in a fixed order and never reads the site
/// spec, so masks are site-invariant by construction.
fn sample_base(h: usize, w: usize, sample_seed: u64) -> Result<SampleBase> {
    let mut rng = rng_from(sample_seed);
    let min_dim = h.min(w) as f64;

    // blob geometry, rejection-sampled into the foreground-fraction band
    let mut mask = Array2::<f64>::zeros((h, w));
    let mut accepted = false;
    for _attempt in 0..100 {
        mask.fill(0.0);
        let n_ellipses = rng.gen_range(1..=3);
        for _ in 0..n_ellipses {
            let cy = rng.gen_range(0.30..0.70) * h as f64;
            let cx = rng.gen_range(0.30..0.70) * w as f64;
            let ay = rng.gen_range(0.12..0.30) * min_dim;
            let ax = rng.gen_range(0.12..0.30) * min_dim;
            let rot = rng.gen_range(0.0..PI);
            let wobble: Vec<(f64, f64)> = (2..=4)
                .map(|k| (rng.gen_range(0.0..0.15) / k as f64, rng.gen_range(0.0..(2.0 * PI))))
                .collect();
            let (sin_r, cos_r) = rot.sin_cos();
            for y in 0..h {
                for x in 0..w {
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    let u = cos_r * dx + sin_r * dy;
                    let v = -sin_r * dx + cos_r * dy;
                    let r2 = (u / ax).powi(2) + (v / ay).powi(2);
                    let theta = v.atan2(u);
                    let boundary: f64 = 1.0
                        + wobble
                            .iter()
                            .enumerate()
                            .map(|(i, &(a, p))| a * ((i as f64 + 2.0) * theta + p).cos())
                            .sum::<f64>();
                    if r2 <= boundary * boundary {
                        mask[[y, x]] = 1.0;
                    }
                }
            }
        }
        let frac = mask.sum() / (h * w) as f64;
        if (0.05..=0.5).contains(&frac) {
            accepted = true;
            break;
        }
    }
    if !accepted {
        return Err(Error::Data(
            "generate_site: foreground fraction outside [0.05, 0.5] after 100 resamples".into(),
        ));
    }

    // base texture: two intensity plateaus with a smooth modulation
    let fg_level = rng.gen_range(0.60..0.80);
    let bg_level = rng.gen_range(0.20..0.38);
    let t_amp = rng.gen_range(0.02..0.06);
    let (tfy, tfx) = (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0));
    let (tpy, tpx) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
    let mut texture = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let t = t_amp
                * (2.0 * PI * (tfy * y as f64 / h as f64 + tpy)).sin()
                * (2.0 * PI * (tfx * x as f64 / w as f64 + tpx)).sin();
            let level = if mask[[y, x]] > 0.5 { fg_level } else { bg_level };
            texture[[y, x]] = (level + t).clamp(0.02, 0.98);
        }
    }

    // low-frequency inhomogeneity pattern in [-1, 1]; amplitude is applied
    // later by the site transform
    let (ffy, ffx) = (rng.gen_range(0.4..1.2), rng.gen_range(0.4..1.2));
    let (fpy, fpx) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
    let mut field = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            field[[y, x]] = (2.0 * PI * (ffy * y as f64 / h as f64 + fpy)).sin()
                * (2.0 * PI * (ffx * x as f64 / w as f64 + fpx)).sin();
        }
    }

    // unit-variance noise grid, scaled by the site's sigma later
    let mut noise = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            // Box-Muller from two uniforms
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            noise[[y, x]] = (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos();
        }
    }

    Ok(SampleBase {
        mask,
        texture,
        field,
        noise,
    })
}

fn gaussian_blur(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (2.5 * sigma).ceil().max(1.0) as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let v = (-(i * i) as f64 / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }
    let (h, w) = img.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let sx = clamp(x as isize + k as isize - radius, w);
                acc += kv * img[[y, sx]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let sy = clamp(y as isize + k as isize - radius, h);
                acc += kv * tmp[[sy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Apply the site's acquisition transform to one base sample:
/// gamma, additive bias + field, blur, noise, clamp.
fn site_transform(base: &SampleBase, spec: &SiteSpec) -> Array2<f64> {
    let (h, w) = base.texture.dim();
    let mut img = if (spec.contrast_gamma - 1.0).abs() < 1e-12 {
        base.texture.clone()
    } else {
        base.texture.mapv(|v| v.powf(spec.contrast_gamma))
    };
    for y in 0..h {
        for x in 0..w {
            img[[y, x]] += spec.intensity_bias
                + spec.field_inhomogeneity_amp * base.field[[y, x]];
        }
    }
    if spec.blur_sigma > 0.0 {
        img = gaussian_blur(&img, spec.blur_sigma);
    }
    for y in 0..h {
        for x in 0..w {
            img[[y, x]] = (img[[y, x]] + spec.noise_sigma * base.noise[[y, x]]).clamp(0.0, 1.0);
        }
    }
    img
}

/// Generate `n` samples of `hw` pixels for one site. Mask geometry depends
/// only on `(seed, index)`, never on the site parameters.
pub fn generate_site(spec: &SiteSpec, n: usize, hw: (usize, usize), seed: u64) -> Result<SiteDataset> {
    let (h, w) = hw;
    if n == 0 {
        return Err(Error::Data("generate_site: n must be >= 1".into()));
    }
    if h < 32 || w < 32 {
        return Err(Error::Data(format!(
            "generate_site: image size ({h}, {w}) below the 32-pixel minimum"
        )));
    }
    let mut images = Array4::<f64>::zeros((n, 1, h, w));
    let mut masks = Array3::<u32>::zeros((n, h, w));
    for i in 0..n {
        let base = sample_base(h, w, child_seed_indexed(seed, &["sample"], i as u64))?;
        let img = site_transform(&base, spec);
        for y in 0..h {
            for x in 0..w {
                images[[i, 0, y, x]] = img[[y, x]];
                masks[[i, y, x]] = (base.mask[[y, x]] > 0.5) as u32;
            }
        }
    }
    Ok(SiteDataset {
        images,
        masks,
        site_id: spec.site_id.clone(),
        seed,
    })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: String,
    site_id: String,
    seed: u64,
    pairs: Vec<ManifestPair>,
}

#[derive(Serialize, Deserialize)]
struct ManifestPair {
    image: String,
    mask: String,
}

/// Write a dataset as `manifest.json` + 16-bit grayscale image PNGs +
/// 8-bit mask PNGs.
pub fn save_dataset(ds: &SiteDataset, dir: &Path) -> Result<()> {
    let (n, _, h, w) = ds.images.dim();
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let image_rel = format!("images/{i:04}.png");
        let mask_rel = format!("masks/{i:04}.png");
        let mut img_buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
        let mut mask_buf = image::ImageBuffer::<image::Luma<u8>, Vec<u8>>::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let v = (ds.images[[i, 0, y, x]].clamp(0.0, 1.0) * 65535.0).round() as u16;
                img_buf.put_pixel(x as u32, y as u32, image::Luma([v]));
                let m = if ds.masks[[i, y, x]] != 0 { 255u8 } else { 0 };
                mask_buf.put_pixel(x as u32, y as u32, image::Luma([m]));
            }
        }
        img_buf
            .save(dir.join(&image_rel))
            .map_err(Error::Image)?;
        mask_buf
            .save(dir.join(&mask_rel))
            .map_err(Error::Image)?;
        pairs.push(ManifestPair {
            image: image_rel,
            mask: mask_rel,
        });
    }
    let manifest = Manifest {
        version: "v1".to_string(),
        site_id: ds.site_id.clone(),
        seed: ds.seed,
        pairs,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

fn load_gray(path: &Path, pair_name: &str) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| {
        Error::Data(format!("pair `{pair_name}`: cannot read {}: {e}", path.display()))
    })?;
    match img {
        image::DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            let mut out = Array2::<f64>::zeros((h as usize, w as usize));
            for (x, y, p) in buf.enumerate_pixels() {
                out[[y as usize, x as usize]] = p.0[0] as f64 / 255.0;
            }
            Ok(out)
        }
        image::DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            let mut out = Array2::<f64>::zeros((h as usize, w as usize));
            for (x, y, p) in buf.enumerate_pixels() {
                out[[y as usize, x as usize]] = p.0[0] as f64 / 65535.0;
            }
            Ok(out)
        }
        other => Err(Error::Data(format!(
            "pair `{pair_name}`: {} is not grayscale (found {:?})",
            path.display(),
            other.color()
        ))),
    }
}

/// Load a dataset directory written by [`save_dataset`] (or assembled by
/// hand to the same layout). Images are rescaled to `[0, 1]`, masks are
/// binarized at `> 0`, and every pair is shape-validated.
pub fn load_dataset(dir: &Path) -> Result<SiteDataset> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
        Error::Data(format!("cannot read {}: {e}", manifest_path.display()))
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    if manifest.version != "v1" {
        return Err(Error::Data(format!(
            "{}: unsupported manifest version `{}`",
            manifest_path.display(),
            manifest.version
        )));
    }
    if manifest.pairs.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let mut images: Option<Array4<f64>> = None;
    let mut masks: Option<Array3<u32>> = None;
    for (i, pair) in manifest.pairs.iter().enumerate() {
        let name = format!("{} / {}", pair.image, pair.mask);
        let img = load_gray(&dir.join(&pair.image), &name)?;
        let msk = load_gray(&dir.join(&pair.mask), &name)?;
        if img.dim() != msk.dim() {
            return Err(Error::Data(format!(
                "pair `{name}`: image {:?} vs mask {:?}",
                img.dim(),
                msk.dim()
            )));
        }
        let (h, w) = img.dim();
        if images.is_none() {
            images = Some(Array4::zeros((manifest.pairs.len(), 1, h, w)));
            masks = Some(Array3::zeros((manifest.pairs.len(), h, w)));
        }
        let im = images.as_mut().unwrap();
        if im.dim().2 != h || im.dim().3 != w {
            return Err(Error::Data(format!(
                "pair `{name}`: size {:?} differs from the first pair ({}, {})",
                img.dim(),
                im.dim().2,
                im.dim().3
            )));
        }
        let mk = masks.as_mut().unwrap();
        for y in 0..h {
            for x in 0..w {
                im[[i, 0, y, x]] = img[[y, x]];
                mk[[i, y, x]] = (msk[[y, x]] > 0.0) as u32;
            }
        }
    }
    Ok(SiteDataset {
        images: images.unwrap(),
        masks: masks.unwrap(),
        site_id: manifest.site_id,
        seed: manifest.seed,
    })
}

/// Split sites into disjoint teacher-train / student-train / eval groups.
///
/// The target site is evaluation-only. Of the remaining sites (input order
/// preserved), the first `floor(teacher_fraction * count)` — clamped so
/// both groups are nonempty — train the teacher; the rest train the
/// student. Teacher and student never share a site.
pub fn leave_one_site_out(
    all_sites: Vec<SiteDataset>,
    target: &str,
    teacher_fraction: f64,
) -> Result<(Vec<SiteDataset>, Vec<SiteDataset>, SiteDataset)> {
    if all_sites.len() < 3 {
        return Err(Error::Data(format!(
            "leave_one_site_out: need >= 3 sites, got {}",
            all_sites.len()
        )));
    }
    if !(teacher_fraction > 0.0 && teacher_fraction < 1.0) {
        return Err(Error::InvalidConfig(
            "data.teacher_fraction: must lie in (0, 1)".into(),
        ));
    }
    if !all_sites.iter().any(|s| s.site_id == target) {
        return Err(Error::Data(format!(
            "leave_one_site_out: target `{target}` not among the sites"
        )));
    }
    let mut eval = None;
    let mut rest = Vec::new();
    for s in all_sites {
        if s.site_id == target && eval.is_none() {
            eval = Some(s);
        } else {
            rest.push(s);
        }
    }
    let eval = eval.expect("target presence checked");
    let k = rest.len();
    let teacher_count = ((teacher_fraction * k as f64).floor() as usize).clamp(1, k - 1);
    let student = rest.split_off(teacher_count);
    Ok((rest, student, eval))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = &default_sites()[0];
        let a = generate_site(spec, 4, (32, 32), 9).unwrap();
        let b = generate_site(spec, 4, (32, 32), 9).unwrap();
        assert_eq!(a, b);
        let c = generate_site(spec, 4, (32, 32), 10).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn masks_are_site_invariant_but_images_differ() {
        let sites = default_sites();
        let a = generate_site(&sites[0], 4, (32, 32), 5).unwrap();
        let b = generate_site(&sites[2], 4, (32, 32), 5).unwrap();
        assert_eq!(a.masks, b.masks);
        assert_ne!(a.images, b.images);
    }

    #[test]
    fn identity_transform_returns_base_texture_exactly() {
        let ident = SiteSpec {
            site_id: "ID".to_string(),
            intensity_bias: 0.0,
            contrast_gamma: 1.0,
            noise_sigma: 0.0,
            blur_sigma: 0.0,
            field_inhomogeneity_amp: 0.0,
        };
        let ds = generate_site(&ident, 2, (32, 32), 13).unwrap();
        for i in 0..2 {
            let base = sample_base(32, 32, child_seed_indexed(13, &["sample"], i as u64)).unwrap();
            for y in 0..32 {
                for x in 0..32 {
                    assert_eq!(ds.images[[i, 0, y, x]], base.texture[[y, x]]);
                }
            }
        }
    }

    #[test]
    fn foreground_fraction_in_band() {
        let spec = &default_sites()[0];
        let ds = generate_site(spec, 16, (32, 32), 77).unwrap();
        for i in 0..16 {
            let frac = ds
                .masks
                .index_axis(ndarray::Axis(0), i)
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>()
                / (32.0 * 32.0);
            assert!((0.05..=0.5).contains(&frac), "sample {i} fraction {frac}");
        }
    }

    #[test]
    fn default_sites_pairwise_distinct_in_two_params() {
        let sites = default_sites();
        for i in 0..sites.len() {
            for j in (i + 1)..sites.len() {
                let (a, b) = (&sites[i], &sites[j]);
                let diffs = [
                    a.intensity_bias != b.intensity_bias,
                    a.contrast_gamma != b.contrast_gamma,
                    a.noise_sigma != b.noise_sigma,
                    a.blur_sigma != b.blur_sigma,
                    a.field_inhomogeneity_amp != b.field_inhomogeneity_amp,
                ]
                .iter()
                .filter(|&&d| d)
                .count();
                assert!(diffs >= 2, "{} vs {}", a.site_id, b.site_id);
            }
        }
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let spec = &default_sites()[1];
        let ds = generate_site(spec, 3, (32, 32), 21).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.site_id, ds.site_id);
        assert_eq!(back.masks, ds.masks);
        let max_err = ds
            .images
            .iter()
            .zip(back.images.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 1.0 / 65535.0, "max err {max_err}");
    }

    #[test]
    fn missing_mask_names_the_pair() {
        let dir = tempfile::tempdir().unwrap();
        let spec = &default_sites()[0];
        let ds = generate_site(spec, 2, (32, 32), 3).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("masks/0001.png")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("masks/0001.png"), "{err}");
    }

    #[test]
    fn empty_pair_list_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("manifest.json"),
            r#"{"version":"v1","site_id":"S1","seed":0,"pairs":[]}"#,
        )
        .unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("empty dataset"), "{err}");
    }

    #[test]
    fn loso_partition_is_disjoint_and_exhaustive() {
        let sites = default_sites();
        let all: Vec<SiteDataset> = sites
            .iter()
            .map(|s| generate_site(s, 2, (32, 32), 1).unwrap())
            .collect();
        let (teacher, student, eval) = leave_one_site_out(all, "S4", 0.6).unwrap();
        assert_eq!(teacher.len(), 3);
        assert_eq!(student.len(), 2);
        assert_eq!(eval.site_id, "S4");
        let mut ids: Vec<String> = teacher
            .iter()
            .chain(student.iter())
            .map(|s| s.site_id.clone())
            .collect();
        ids.push(eval.site_id.clone());
        ids.sort();
        assert_eq!(ids, vec!["S1", "S2", "S3", "S4", "S5", "S6"]);
        // teacher and student share nothing
        for t in &teacher {
            assert!(student.iter().all(|s| s.site_id != t.site_id));
            assert_ne!(t.site_id, eval.site_id);
        }
    }

    #[test]
    fn loso_three_sites_and_errors() {
        let sites = default_sites();
        let make = |n: usize| -> Vec<SiteDataset> {
            sites
                .iter()
                .take(n)
                .map(|s| generate_site(s, 2, (32, 32), 1).unwrap())
                .collect()
        };
        let (teacher, student, eval) = leave_one_site_out(make(3), "S2", 0.6).unwrap();
        assert_eq!(teacher.len(), 1);
        assert_eq!(student.len(), 1);
        assert_eq!(eval.site_id, "S2");

        assert!(leave_one_site_out(make(2), "S1", 0.6).is_err());
        assert!(leave_one_site_out(make(3), "S9", 0.6).is_err());
    }
}
