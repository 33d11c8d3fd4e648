//! Synthetic phantom bench: labeled subjects derived from one template.
//!
//! A deterministic nested-ellipsoid template is deformed per subject by a
//! bounded smooth random field, standing in for real atlases after
//! registration: every subject shares the template's topology but carries
//! its own residual misalignment, which is exactly the error structure
//! label fusion has to absorb. Two intensity modalities are synthesized
//! with opposite label-contrast ramps so multimodal inputs actually carry
//! complementary information.

use crate::elastic::{random_field, warp_labels, ElasticParams};
use crate::error::{Error, Result};
use crate::volcore::{write_labelmap, write_volume, LabelMap, Volume};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fs;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct PhantomConfig {
    pub dims: (usize, usize, usize),
    pub label_count: usize,
    pub n_subjects: usize,
    /// Scale of each subject's residual deformation, in voxels.
    pub misalign_sigma: f64,
    /// Per modality, per label: (mean, std) of the synthesized intensity.
    pub contrast: [Vec<(f32, f32)>; 2],
    /// I.i.d. intensity noise on top of the per-label spread.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PhantomConfig {
    /// Default contrast: modality one ramps up with the label index,
    /// modality two ramps down, background is dark in both.
    pub fn preset(
        dims: (usize, usize, usize),
        label_count: usize,
        n_subjects: usize,
        misalign_sigma: f64,
        noise_sigma: f64,
        seed: u64,
    ) -> Self {
        let ramp = |l: usize| l as f32 / (label_count - 1).max(1) as f32;
        let t1 = (0..label_count)
            .map(|l| if l == 0 { (0.0, 0.0) } else { (1.6 * ramp(l), 0.0) })
            .collect();
        let t2 = (0..label_count)
            .map(|l| {
                if l == 0 {
                    (0.0, 0.0)
                } else {
                    (1.6 * ramp(label_count - l), 0.0)
                }
            })
            .collect();
        PhantomConfig {
            dims,
            label_count,
            n_subjects,
            misalign_sigma,
            contrast: [t1, t2],
            noise_sigma,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.label_count < 2 {
            return Err(Error::Config("phantom needs at least 2 labels".into()));
        }
        if self.n_subjects < 2 {
            return Err(Error::Config("phantom needs at least 2 subjects".into()));
        }
        for side in [self.dims.0, self.dims.1, self.dims.2] {
            if side < 8 {
                return Err(Error::Config(format!(
                    "dims {:?} too small for a structured phantom",
                    self.dims
                )));
            }
        }
        if !(self.misalign_sigma >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("sigmas must be non-negative".into()));
        }
        for m in &self.contrast {
            if m.len() != self.label_count {
                return Err(Error::Config(format!(
                    "contrast has {} entries for {} labels",
                    m.len(),
                    self.label_count
                )));
            }
        }
        Ok(())
    }
}

/// The residual-misalignment field: bounded at twice the sigma, smoothed so
/// typical displacements land near the sigma itself.
fn misalign_params(sigma: f64) -> ElasticParams {
    ElasticParams {
        control_points: 4,
        max_displacement: 2.0 * sigma,
        smooth_sigma: 2.0,
    }
}

/// Deterministic parcellation: an ellipsoid at 40% of each axis, with an
/// inner core (label 1) and the outer shell split into equal angular
/// sectors (labels 2..L-1). With two labels the whole ellipsoid is label 1.
pub fn make_template(cfg: &PhantomConfig) -> Result<LabelMap> {
    cfg.validate()?;
    let (nx, ny, nz) = cfg.dims;
    let l = cfg.label_count;
    let (cx, cy, cz) = (
        (nx - 1) as f64 / 2.0,
        (ny - 1) as f64 / 2.0,
        (nz - 1) as f64 / 2.0,
    );
    let (rx, ry, rz) = (0.4 * nx as f64, 0.4 * ny as f64, 0.4 * nz as f64);
    let sectors = l.saturating_sub(2);
    let mut labels = vec![0u32; nx * ny * nz];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (dx, dy, dz) = (
                    (x as f64 - cx) / rx,
                    (y as f64 - cy) / ry,
                    (z as f64 - cz) / rz,
                );
                let rho = (dx * dx + dy * dy + dz * dz).sqrt();
                if rho > 1.0 {
                    continue;
                }
                let lab = if sectors == 0 || rho < 0.5 {
                    1
                } else {
                    let theta = dy.atan2(dx); // [-pi, pi]
                    let frac = (theta + std::f64::consts::PI) / std::f64::consts::TAU;
                    2 + ((frac * sectors as f64) as usize).min(sectors - 1)
                };
                labels[(z * ny + y) * nx + x] = lab as u32;
            }
        }
    }
    let template = LabelMap::new(cfg.dims, l, labels)?;
    let mut counts = vec![0usize; l];
    for &v in template.labels() {
        counts[v as usize] += 1;
    }
    let fg: usize = counts[1..].iter().sum();
    if counts[1..].iter().any(|&c| c * 100 < fg.max(1)) || fg == 0 {
        return Err(Error::Config(format!(
            "dims {:?} too small to give each of {l} labels at least 1% of the foreground",
            cfg.dims
        )));
    }
    Ok(template)
}

/// One subject: the template under a fresh residual deformation, plus two
/// synthesized modalities. Per-label spread and global noise fold into one
/// normal draw per voxel per modality.
pub fn make_subject(
    template: &LabelMap,
    cfg: &PhantomConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Volume, Volume, LabelMap)> {
    cfg.validate()?;
    let field = random_field(cfg.dims, &misalign_params(cfg.misalign_sigma), rng)?;
    let labels = warp_labels(template, &field)?;
    let n = labels.labels().len();
    let mut vols = Vec::with_capacity(2);
    for m in 0..2 {
        let mut data = vec![0.0f32; n];
        for (d, &lab) in data.iter_mut().zip(labels.labels()) {
            let (mean, std) = cfg.contrast[m][lab as usize];
            let eff = ((std as f64).powi(2) + cfg.noise_sigma.powi(2)).sqrt();
            let g: f64 = StandardNormal.sample(rng);
            *d = (mean as f64 + eff * g) as f32;
        }
        vols.push(Volume::new(1, cfg.dims, [1.0, 1.0, 1.0], data)?);
    }
    let t2 = vols.pop().expect("two modalities");
    let t1 = vols.pop().expect("two modalities");
    Ok((t1, t2, labels))
}

pub struct Subject {
    pub id: String,
    pub t1: Volume,
    pub t2: Volume,
    pub labels: LabelMap,
}

/// All subjects, each from its own RNG stream of the config seed, so
/// generation order (or parallelism) cannot change any subject's content.
pub fn generate_subjects(cfg: &PhantomConfig) -> Result<Vec<Subject>> {
    cfg.validate()?;
    let template = make_template(cfg)?;
    (0..cfg.n_subjects)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64 + 1);
            let (t1, t2, labels) = make_subject(&template, cfg, &mut rng)?;
            Ok(Subject {
                id: format!("s{i:02}"),
                t1,
                t2,
                labels,
            })
        })
        .collect()
}

/// Writes the dataset layout the trainer loads:
/// `subjects/<id>/{t1,t2,labels}.dlfv` plus a `manifest.txt` with one
/// subject id per line.
pub fn make_dataset(cfg: &PhantomConfig, out: impl AsRef<Path>) -> Result<()> {
    let out = out.as_ref();
    let subjects = generate_subjects(cfg)?;
    let mut manifest = String::new();
    for s in &subjects {
        let dir = out.join("subjects").join(&s.id);
        fs::create_dir_all(&dir)?;
        write_volume(&s.t1, dir.join("t1.dlfv"))?;
        write_volume(&s.t2, dir.join("t2.dlfv"))?;
        write_labelmap(&s.labels, dir.join("labels.dlfv"))?;
        manifest.push_str(&s.id);
        manifest.push('\n');
    }
    fs::write(out.join("manifest.txt"), manifest)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classicfusion::majority_vote;
    use crate::volcore::{read_labelmap, read_volume};

    fn cfg(
        dims: (usize, usize, usize),
        l: usize,
        n: usize,
        misalign: f64,
        noise: f64,
    ) -> PhantomConfig {
        PhantomConfig::preset(dims, l, n, misalign, noise, 77)
    }

    #[test]
    fn two_label_template_is_a_single_ellipsoid() {
        let c = cfg((16, 16, 12), 2, 2, 0.0, 0.0);
        let t = make_template(&c).unwrap();
        let ones = t.labels().iter().filter(|&&v| v == 1).count();
        assert!(ones > 0);
        assert!(t.labels().iter().all(|&v| v <= 1));
        // center voxel is inside, corner outside
        assert_eq!(t.at(8, 8, 6), 1);
        assert_eq!(t.at(0, 0, 0), 0);
    }

    #[test]
    fn template_has_every_label_with_real_mass() {
        let c = cfg((24, 20, 16), 5, 2, 0.0, 0.0);
        let t = make_template(&c).unwrap();
        let mut counts = vec![0usize; 5];
        for &v in t.labels() {
            counts[v as usize] += 1;
        }
        let fg: usize = counts[1..].iter().sum();
        for (l, &cnt) in counts.iter().enumerate() {
            assert!(cnt > 0, "label {l} missing");
        }
        for &cnt in &counts[1..] {
            assert!(cnt * 100 >= fg);
        }
        // deterministic: a second call is identical
        assert_eq!(make_template(&c).unwrap().labels(), t.labels());
    }

    #[test]
    fn tiny_dims_are_rejected() {
        assert!(make_template(&cfg((6, 6, 6), 3, 2, 0.0, 0.0)).is_err());
    }

    #[test]
    fn zero_misalignment_and_noise_reproduce_the_template_exactly() {
        let c = cfg((16, 14, 12), 4, 2, 0.0, 0.0);
        let t = make_template(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (t1, _, labels) = make_subject(&t, &c, &mut rng).unwrap();
        assert_eq!(labels.labels(), t.labels());
        for (v, &lab) in t1.data().iter().zip(labels.labels()) {
            assert_eq!(*v, c.contrast[0][lab as usize].0);
        }
    }

    #[test]
    fn label_means_track_the_configured_contrast() {
        let c = cfg((20, 20, 16), 3, 2, 1.0, 0.15);
        let t = make_template(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (t1, t2, labels) = make_subject(&t, &c, &mut rng).unwrap();
        for (m, vol) in [(0usize, &t1), (1, &t2)] {
            for lab in 0..3u32 {
                let vals: Vec<f32> = vol
                    .data()
                    .iter()
                    .zip(labels.labels())
                    .filter(|(_, &l)| l == lab)
                    .map(|(&v, _)| v)
                    .collect();
                let n = vals.len() as f64;
                assert!(n > 30.0, "label {lab} too rare to test");
                let mean: f64 = vals.iter().map(|&v| v as f64).sum::<f64>() / n;
                let want = c.contrast[m][lab as usize].0 as f64;
                let bound = 3.0 * c.noise_sigma / n.sqrt();
                assert!(
                    (mean - want).abs() <= bound,
                    "modality {m} label {lab}: {mean} vs {want} (3σ {bound})"
                );
            }
        }
    }

    #[test]
    fn subjects_on_different_streams_differ() {
        let c = cfg((16, 16, 12), 3, 3, 1.5, 0.1);
        let subs = generate_subjects(&c).unwrap();
        assert_ne!(subs[0].labels.labels(), subs[1].labels.labels());
        // and regeneration is bit-identical
        let again = generate_subjects(&c).unwrap();
        assert_eq!(subs[1].labels.labels(), again[1].labels.labels());
        assert_eq!(subs[1].t1.data(), again[1].t1.data());
    }

    #[test]
    fn dataset_directory_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg((12, 12, 10), 3, 3, 1.0, 0.1);
        make_dataset(&c, dir.path()).unwrap();
        let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        let ids: Vec<&str> = manifest.lines().collect();
        assert_eq!(ids, ["s00", "s01", "s02"]);
        let subs = generate_subjects(&c).unwrap();
        for s in &subs {
            let base = dir.path().join("subjects").join(&s.id);
            let t1 = read_volume(base.join("t1.dlfv")).unwrap();
            assert_eq!(t1.data(), s.t1.data());
            let labels = read_labelmap(base.join("labels.dlfv")).unwrap();
            assert_eq!(labels.labels(), s.labels.labels());
        }
    }

    #[test]
    fn majority_vote_accuracy_decays_with_misalignment() {
        let accuracy = |sigma: f64| -> f64 {
            let c = cfg((20, 20, 16), 3, 5, sigma, 0.0);
            let subs = generate_subjects(&c).unwrap();
            let refs: Vec<&LabelMap> = subs[1..].iter().map(|s| &s.labels).collect();
            let mv = majority_vote(&refs).unwrap();
            let agree = mv
                .labels()
                .iter()
                .zip(subs[0].labels.labels())
                .filter(|(a, b)| a == b)
                .count();
            agree as f64 / mv.labels().len() as f64
        };
        let a0 = accuracy(0.0);
        let a2 = accuracy(1.5);
        let a4 = accuracy(4.0);
        assert_eq!(a0, 1.0);
        assert!(a2 < a0, "{a2} !< {a0}");
        assert!(a4 < a2, "{a4} !< {a2}");
        assert!(a4 > 0.5, "phantom degraded too far to be useful: {a4}");
    }
}
