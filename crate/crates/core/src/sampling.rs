//! Euler integration of the learned velocity field with three-way
//! classifier-free guidance.

use crate::error::{Error, Result};
use crate::model::{ConditionBundle, UnicModel};
use crate::numerics::rng::{derive_seed_str, rng};
use crate::numerics::Tensor;
use crate::synthdata::Family;
use crate::training::gaussian_image;

pub const DEFAULT_STEPS: usize = 28;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceSpec {
    /// Image-instruction scale.
    pub s_c: f64,
    /// Text scale.
    pub s_t: f64,
    pub steps: usize,
    pub seed: u64,
}

impl GuidanceSpec {
    pub fn new(s_c: f64, s_t: f64, steps: usize, seed: u64) -> Result<Self> {
        let g = GuidanceSpec { s_c, s_t, steps, seed };
        g.validate()?;
        Ok(g)
    }

    /// Default scales per task family.
    pub fn for_family(family: Family, seed: u64) -> Self {
        let (s_c, s_t) = match family {
            Family::Pixel => (1.3, 3.0),
            Family::Subject => (1.2, 7.5),
            Family::Style => (3.0, 6.0),
        };
        GuidanceSpec {
            s_c,
            s_t,
            steps: DEFAULT_STEPS,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || !self.s_c.is_finite() || !self.s_t.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid guidance {self:?}")));
        }
        Ok(())
    }
}

/// `e_null + s_c·(e_ic − e_null) + s_t·(e_full − e_ic)`, evaluated as
/// `(1−s_c)·e_null + (s_c−s_t)·e_ic + s_t·e_full` so unit scales reproduce
/// an input exactly.
pub fn cfg_combine(
    e_null: &Tensor<f32>,
    e_ic: &Tensor<f32>,
    e_full: &Tensor<f32>,
    spec: &GuidanceSpec,
) -> Result<Tensor<f32>> {
    for t in [e_ic, e_full] {
        if t.shape() != e_null.shape() {
            return Err(Error::shape(
                "cfg_combine",
                format!("{:?}", e_null.shape()),
                format!("{:?}", t.shape()),
            ));
        }
    }
    let (a, b, c) = ((1.0 - spec.s_c) as f32, (spec.s_c - spec.s_t) as f32, spec.s_t as f32);
    let data = e_null
        .data()
        .iter()
        .zip(e_ic.data())
        .zip(e_full.data())
        .map(|((&n, &ic), &f)| a * n + b * ic + c * f)
        .collect();
    Tensor::new(e_null.shape().to_vec(), data)
}

/// The three guidance predictions at one point of the trajectory.
pub struct Predictions {
    pub null: Tensor<f32>,
    pub ic: Tensor<f32>,
    pub full: Tensor<f32>,
}

/// Integrates from `z1` at `t = 1` down to `t = 0` on a uniform grid and
/// clamps the result to `[−1, 1]`.
pub fn euler_integrate(
    z1: Tensor<f32>,
    spec: &GuidanceSpec,
    mut field: impl FnMut(&Tensor<f32>, f64) -> Result<Predictions>,
) -> Result<Tensor<f32>> {
    spec.validate()?;
    let mut z = z1;
    let dt = 1.0 / spec.steps as f64;
    for k in 0..spec.steps {
        let t = 1.0 - k as f64 * dt;
        let p = field(&z, t)?;
        let v = cfg_combine(&p.null, &p.ic, &p.full, spec)?;
        for (zi, &vi) in z.data_mut().iter_mut().zip(v.data()) {
            *zi -= (dt as f32) * vi;
        }
        if !z.is_finite() {
            return Err(Error::NonFinite { op: "euler_sample" });
        }
    }
    for zi in z.data_mut() {
        *zi = zi.clamp(-1.0, 1.0);
    }
    Ok(z)
}

/// Initial noise for a seed.
pub fn initial_noise(model: &UnicModel, seed: u64) -> Tensor<f32> {
    gaussian_image(
        &mut rng(derive_seed_str(seed, "sample-noise")),
        &model.config.image_shape(),
    )
}

/// Guided sample in `[−1, 1]`, `C×H×W`. The null pass drops all three
/// conditions and the image-instruction pass drops only the text. With
/// `cache_adapter` the adapter runs once per conditioning instead of once
/// per step.
pub fn euler_sample(model: &UnicModel, bundle: &ConditionBundle, spec: &GuidanceSpec) -> Result<Tensor<f32>> {
    let full = bundle.clone().with_drops(false, false);
    let ic = bundle.clone().with_drops(true, false);
    let null = bundle.clone().with_drops(true, true);
    let caches = if model.arch.cache_adapter {
        Some((
            model.adapter_cache(model.store(), 1.0, &full)?,
            model.adapter_cache(model.store(), 1.0, &null)?,
        ))
    } else {
        None
    };
    euler_integrate(initial_noise(model, spec.seed), spec, |z, t| {
        let eval = |b: &ConditionBundle, c| match c {
            Some(c) => model.forward_velocity_cached(z, t, b, c),
            None => model.forward_velocity(z, t, b),
        };
        let (cf, cn) = match &caches {
            Some((f, n)) => (Some(f), Some(n)),
            None => (None, None),
        };
        let (e_null, (e_ic, e_full)) =
            rayon::join(|| eval(&null, cn), || rayon::join(|| eval(&ic, cf), || eval(&full, cf)));
        Ok(Predictions {
            null: e_null?,
            ic: e_ic?,
            full: e_full?,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchOptions, ModelConfig};

    fn t(v: &[f64]) -> Tensor<f32> {
        Tensor::from_f64(&[v.len()], v).unwrap()
    }

    #[test]
    fn cfg_identities() {
        let (n, ic, f) = (t(&[0.3, -1.0]), t(&[0.7, 2.0]), t(&[-0.2, 5.5]));
        let one = GuidanceSpec::new(1.0, 1.0, 1, 0).unwrap();
        assert_eq!(cfg_combine(&n, &ic, &f, &one).unwrap(), f);
        let no_text = GuidanceSpec::new(1.0, 0.0, 1, 0).unwrap();
        assert_eq!(cfg_combine(&n, &ic, &f, &no_text).unwrap(), ic);
        let pixel = GuidanceSpec::for_family(Family::Pixel, 0);
        let v = cfg_combine(&t(&[0.0]), &t(&[1.0]), &t(&[2.0]), &pixel).unwrap();
        assert!((v.data()[0] as f64 - 4.3).abs() < 1e-6);
        assert!(cfg_combine(&n, &t(&[1.0]), &f, &one).is_err());
    }

    #[test]
    fn family_defaults() {
        let s = GuidanceSpec::for_family(Family::Subject, 0);
        assert_eq!((s.s_c, s.s_t, s.steps), (1.2, 7.5, 28));
        let s = GuidanceSpec::for_family(Family::Style, 0);
        assert_eq!((s.s_c, s.s_t), (3.0, 6.0));
        assert!(GuidanceSpec::new(1.0, 1.0, 0, 0).is_err());
    }

    #[test]
    fn constant_field_is_integrated_exactly() {
        let c = t(&[0.25, -0.5, 0.125]);
        let z1 = t(&[0.5, 0.0, -0.25]);
        for steps in [1, 4, 28] {
            let spec = GuidanceSpec::new(1.0, 1.0, steps, 0).unwrap();
            let out = euler_integrate(z1.clone(), &spec, |_, _| {
                Ok(Predictions {
                    null: t(&[9.0, 9.0, 9.0]),
                    ic: t(&[-3.0, 1.0, 2.0]),
                    full: c.clone(),
                })
            })
            .unwrap();
            for ((o, z), v) in out.data().iter().zip(z1.data()).zip(c.data()) {
                assert!((o - (z - v)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_step_and_clamp() {
        let spec = GuidanceSpec::new(1.0, 1.0, 1, 0).unwrap();
        let mut seen = Vec::new();
        let out = euler_integrate(t(&[0.5, 0.0]), &spec, |z, time| {
            seen.push(time);
            Ok(Predictions {
                null: z.clone(),
                ic: z.clone(),
                full: t(&[-2.0, 0.25]),
            })
        })
        .unwrap();
        assert_eq!(seen, vec![1.0]);
        assert_eq!(out.data(), &[1.0, -0.25]);
    }

    #[test]
    fn sampling_is_deterministic_and_read_only() {
        let cfg = ModelConfig {
            depth: 1,
            dim: 8,
            heads: 2,
            patch: 4,
            image_size: 8,
            channels: 3,
            vocab_size: 10,
            max_text_len: 32,
            init_std: 0.2,
        };
        for cache in [false, true] {
            let arch = ArchOptions {
                cache_adapter: cache,
                ..Default::default()
            };
            let m = UnicModel::new(cfg.clone(), arch, 1).unwrap();
            let before = m.store().checksum();
            let b = ConditionBundle::new(vec![3, 4], vec![5], Tensor::zeros(&[3, 8, 8]));
            let spec = GuidanceSpec::new(1.3, 3.0, 3, 9).unwrap();
            let a = euler_sample(&m, &b, &spec).unwrap();
            let c = euler_sample(&m, &b, &spec).unwrap();
            assert_eq!(a, c);
            assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            assert_eq!(m.store().checksum(), before);
        }
    }
}
