use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LneError, Result};
use crate::seed::SeedStream;

use super::{Cohort, Group, Image, Subject, Visit};

/// Parameters of the synthetic longitudinal cohort.
///
/// Each subject has a scalar brain state `b(age) = b0 + speed · g(u)` with
/// `u = (age − age_min) / (age_max − age_min)` and `g(u) = u + u²`, rendered
/// by [`render_image`]. Subjects are normal agers (speed ≈ `normal_speed`,
/// labelled NC) or, with probability `fast_fraction`, fast agers (speed ≈
/// `fast_speed`, labelled AD).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_subjects: usize,
    pub min_visits: usize,
    pub max_visits: usize,
    /// Probability of each additional visit beyond `min_visits`.
    pub extra_visit_prob: f64,
    pub age_min: f64,
    pub age_max: f64,
    /// Mean gap between consecutive visits (years); gaps are uniform on ±50%.
    pub mean_interval: f64,
    pub image_size: usize,
    pub fast_fraction: f64,
    pub normal_speed: f64,
    pub fast_speed: f64,
    /// Relative spread of individual speeds around the group speed.
    pub speed_sd: f64,
    /// Spread of the subject-specific baseline state `b0`.
    pub baseline_sd: f64,
    /// Relative spread of subject head size; offsets scale with it.
    pub anatomy_sd: f64,
    pub noise_level: f64,
    /// Attach NC/AD labels; `false` mimics an unlabelled healthy-aging cohort.
    pub label_groups: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_subjects: 200,
            min_visits: 2,
            max_visits: 4,
            extra_visit_prob: 0.25,
            age_min: 20.0,
            age_max: 90.0,
            mean_interval: 3.8,
            image_size: 32,
            fast_fraction: 0.3,
            normal_speed: 1.0,
            fast_speed: 2.0,
            speed_sd: 0.1,
            baseline_sd: 0.15,
            anatomy_sd: 0.08,
            noise_level: 0.1,
            label_groups: true,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LneError::Config(m));
        if self.image_size < 16 || !self.image_size.is_multiple_of(16) {
            return bad(format!(
                "image_size {} must be a positive multiple of 16 (four 2x poolings)",
                self.image_size
            ));
        }
        if self.min_visits < 2 || self.max_visits < self.min_visits {
            return bad(format!(
                "visit range {}..={} must start at 2 or more",
                self.min_visits, self.max_visits
            ));
        }
        if !(0.0..1.0).contains(&self.extra_visit_prob) || !(0.0..=1.0).contains(&self.fast_fraction) {
            return bad("probabilities must lie in [0, 1)".into());
        }
        if !(self.age_max > self.age_min) || !(self.mean_interval > 0.0) {
            return bad("age range and mean interval must be positive".into());
        }
        if !(self.normal_speed > 0.0 && self.fast_speed > 0.0) || self.speed_sd < 0.0 || self.speed_sd >= 1.0 {
            return bad("speed multipliers must be positive and speed_sd in [0, 1)".into());
        }
        if self.baseline_sd < 0.0 || self.anatomy_sd < 0.0 || self.noise_level < 0.0 {
            return bad("spreads and noise must be nonnegative".into());
        }
        Ok(())
    }

    fn progression(&self, age: f64) -> f64 {
        let u = (age - self.age_min) / (self.age_max - self.age_min);
        u + u * u
    }
}

/// Subject-specific anatomy that does not change with age.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anatomy {
    /// Head-size multiplier.
    pub scale: f64,
    /// Centre offset in pixels (x, y).
    pub offset: (f64, f64),
    /// Vertical/horizontal axis ratio.
    pub aspect: f64,
}

impl Default for Anatomy {
    fn default() -> Self {
        Anatomy {
            scale: 1.0,
            offset: (0.0, 0.0),
            aspect: 1.0,
        }
    }
}

/// Pixel coverage of a disk edge at signed distance `r − radius`, ramped over one pixel.
fn coverage(radius: f64, r: f64) -> f64 {
    (radius - r + 0.5).clamp(0.0, 1.0)
}

/// Noise-free rendering before z-scoring: a ring of intensity 1 whose
/// thickness shrinks with `brain_state`, enclosing a core whose intensity
/// dims with `brain_state`, on a zero background.
pub fn render_raw(brain_state: f64, anatomy: &Anatomy, size: usize) -> Vec<f64> {
    let s = size as f64;
    let outer = 0.40 * s * anatomy.scale;
    let thickness = 0.18 * s * anatomy.scale * (-0.35 * brain_state).exp();
    let inner = (outer - thickness).max(0.0);
    let core = 0.55 * (-0.3 * brain_state).exp();
    let (cx, cy) = ((s - 1.0) / 2.0 + anatomy.offset.0, (s - 1.0) / 2.0 + anatomy.offset.1);
    let mut img = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - cx;
            let dy = (y as f64 - cy) / anatomy.aspect;
            let r = (dx * dx + dy * dy).sqrt();
            let in_outer = coverage(outer, r);
            let in_inner = coverage(inner, r);
            img.push((in_outer - in_inner) + core * in_inner);
        }
    }
    img
}

/// Render a visit image: [`render_raw`] plus Gaussian noise of standard
/// deviation `noise_level`, z-scored over the image.
pub fn render_image(brain_state: f64, anatomy: &Anatomy, size: usize, noise_level: f64, seed: u64) -> Image {
    let mut img = render_raw(brain_state, anatomy, size);
    if noise_level > 0.0 {
        let mut rng = SeedStream::new(seed).rng();
        let normal = Normal::new(0.0, noise_level).expect("valid noise level");
        img.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    let n = img.len() as f64;
    let mean = img.iter().sum::<f64>() / n;
    let sd = (img.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    Image::new(size, size, img.iter().map(|v| ((v - mean) / sd) as f32).collect())
}

/// Generate a cohort; deterministic in `config.seed`.
pub fn generate_cohort(config: &GeneratorConfig) -> Result<Cohort> {
    config.validate()?;
    let root = SeedStream::new(config.seed).derive("cohort");
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut subjects = BTreeMap::new();
    for sid in 0..config.n_subjects {
        let stream = root.index(sid as u64);
        let mut rng = stream.derive("subject").rng();
        let id = format!("s{sid:04}");

        let mut n_visits = config.min_visits;
        while n_visits < config.max_visits && rng.random_bool(config.extra_visit_prob) {
            n_visits += 1;
        }
        let mut gaps: Vec<f64> = (1..n_visits)
            .map(|_| config.mean_interval * rng.random_range(0.5..1.5))
            .collect();
        let range = config.age_max - config.age_min;
        let span: f64 = gaps.iter().sum();
        if span > range {
            gaps.iter_mut().for_each(|g| *g *= 0.99 * range / span);
        }
        let span: f64 = gaps.iter().sum();
        let start = config.age_min + rng.random::<f64>() * (range - span);
        let mut ages = vec![start];
        for g in &gaps {
            ages.push(ages.last().unwrap() + g);
        }

        let fast = rng.random_bool(config.fast_fraction);
        let base_speed = if fast { config.fast_speed } else { config.normal_speed };
        let speed = base_speed * (1.0 + config.speed_sd * std_normal.sample(&mut rng)).max(0.05);
        let b0 = config.baseline_sd * std_normal.sample(&mut rng);
        let anatomy = Anatomy {
            scale: (1.0 + config.anatomy_sd * std_normal.sample(&mut rng)).clamp(0.7, 1.2),
            offset: (
                2.0 * config.anatomy_sd / 0.08 * rng.random_range(-0.5..0.5),
                2.0 * config.anatomy_sd / 0.08 * rng.random_range(-0.5..0.5),
            ),
            aspect: (1.0 + config.anatomy_sd * std_normal.sample(&mut rng)).clamp(0.8, 1.2),
        };
        let group = config.label_groups.then_some(if fast { Group::Ad } else { Group::Nc });

        let visits = ages
            .iter()
            .enumerate()
            .map(|(v, &age)| {
                let state = b0 + speed * config.progression(age);
                let noise_seed = stream.derive("noise").index(v as u64).seed();
                Visit {
                    subject_id: id.clone(),
                    age,
                    image: render_image(state, &anatomy, config.image_size, config.noise_level, noise_seed),
                    group,
                    brain_state: state,
                }
            })
            .collect();
        subjects.insert(
            id.clone(),
            Subject {
                id,
                group,
                speed,
                visits,
            },
        );
    }
    Ok(Cohort {
        height: config.image_size,
        width: config.image_size,
        subjects,
        generator: Some(config.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            n_subjects: 12,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn empty_config_gives_empty_cohort() {
        let c = generate_cohort(&GeneratorConfig {
            n_subjects: 0,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(c.n_subjects(), 0);
    }

    #[test]
    fn same_seed_same_cohort() {
        assert_eq!(generate_cohort(&small(3)).unwrap(), generate_cohort(&small(3)).unwrap());
    }

    #[test]
    fn different_seed_different_images() {
        let a = generate_cohort(&small(3)).unwrap();
        let b = generate_cohort(&small(4)).unwrap();
        let checksum = |c: &Cohort| c.visits().flat_map(|v| v.image.data.iter()).map(|v| v.to_bits() as u64).sum::<u64>();
        assert_ne!(checksum(&a), checksum(&b));
    }

    #[test]
    fn image_size_must_be_divisible_by_16() {
        let cfg = GeneratorConfig {
            image_size: 24,
            ..Default::default()
        };
        assert!(matches!(generate_cohort(&cfg), Err(LneError::Config(_))));
    }

    #[test]
    fn visits_are_ordered_and_in_range() {
        let c = generate_cohort(&small(11)).unwrap();
        for s in c.subjects.values() {
            assert!((2..=4).contains(&s.visits.len()));
            assert!(s.visits.windows(2).all(|w| w[1].age > w[0].age));
            assert!(s.visits.iter().all(|v| (20.0..=90.0).contains(&v.age)));
        }
    }

    #[test]
    fn noise_free_equal_states_render_identically() {
        let a = render_image(0.7, &Anatomy::default(), 32, 0.0, 1);
        let b = render_image(0.7, &Anatomy::default(), 32, 0.0, 99);
        assert_eq!(a, b);
    }

    #[test]
    fn ring_thins_as_state_grows() {
        let count = |s: f64| render_raw(s, &Anatomy::default(), 32).iter().filter(|&&v| v > 0.75).count();
        let (c0, c1, c2) = (count(0.0), count(0.5), count(1.0));
        assert!(c0 > c1 && c1 > c2, "{c0} {c1} {c2}");
    }

    #[test]
    fn rendered_images_are_z_scored() {
        for (state, noise) in [(0.0, 0.0), (1.3, 0.1), (3.0, 0.5)] {
            let (m, sd) = render_image(state, &Anatomy::default(), 32, noise, 5).moments();
            assert!(m.abs() < 1e-6, "mean {m}");
            assert!((sd - 1.0).abs() < 1e-6, "sd {sd}");
        }
    }

    #[test]
    fn noise_free_images_change_monotonically_along_each_subject() {
        let cfg = GeneratorConfig {
            noise_level: 0.0,
            ..small(2)
        };
        let c = generate_cohort(&cfg).unwrap();
        for s in c.subjects.values() {
            let states: Vec<f64> = s.visits.iter().map(|v| v.brain_state).collect();
            assert!(states.windows(2).all(|w| w[1] > w[0]));
        }
    }
}
