//! Synthetic 1-D set corpus: each set holds i.i.d. samples from one of four
//! families, with the set's true mean drawn from U[−1,1] and true variance
//! from U[0.5,2].

use rand::Rng;

use super::{Corpus, LabelKind, SetLabel, SetRecord};
use crate::error::{Error, Result};
use crate::par::try_indexed_map;
use crate::rng::{domains, standard_normal, stream_rng};
use crate::tensor::Tensor;

pub const DEFAULT_SYNTHETIC_SETS: usize = 10_000;
pub const DEFAULT_SAMPLES_PER_SET: usize = 200;

/// The four set families. Each is parameterized so its true mean is `m` and
/// true variance is `v`:
/// exponential — rate 1/√v, shifted by m−√v;
/// gaussian — N(m, v);
/// uniform — centered at m with width √(12v);
/// laplacian — location m, scale √(v/2).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Exponential = 0,
    Gaussian = 1,
    Uniform = 2,
    Laplacian = 3,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::Exponential,
        Family::Gaussian,
        Family::Uniform,
        Family::Laplacian,
    ];

    pub fn from_class_id(id: u32) -> Option<Family> {
        Family::ALL.get(id as usize).copied()
    }

    pub fn class_id(self) -> u32 {
        self as u32
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Exponential => "exponential",
            Family::Gaussian => "gaussian",
            Family::Uniform => "uniform",
            Family::Laplacian => "laplacian",
        }
    }

    /// One draw with true mean `m` and true variance `v`.
    pub fn sample(self, m: f64, v: f64, rng: &mut impl Rng) -> f64 {
        match self {
            Family::Exponential => {
                let scale = v.sqrt(); // mean of Exp(1/√v)
                let u: f64 = 1.0 - rng.gen::<f64>();
                m - scale + scale * (-u.ln())
            }
            Family::Gaussian => m + v.sqrt() * standard_normal(rng),
            Family::Uniform => {
                let width = (12.0 * v).sqrt();
                m - width / 2.0 + width * rng.gen::<f64>()
            }
            Family::Laplacian => {
                let scale = (v / 2.0).sqrt();
                let u: f64 = rng.gen::<f64>() - 0.5;
                let t = (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE);
                // inverse CDF: m − b·sgn(u)·ln(1 − 2|u|)
                m + scale * t.ln().copysign(u)
            }
        }
    }

    /// Analytic (mean, variance) of the parameterization — the moment
    /// contract every family must satisfy exactly.
    pub fn analytic_moments(self, m: f64, v: f64) -> (f64, f64) {
        match self {
            // shifted exponential: mean = (m − √v) + √v, var = (√v)²
            Family::Exponential => {
                let s = v.sqrt();
                ((m - s) + s, s * s)
            }
            Family::Gaussian => (m, v),
            // U[a, a+w]: mean a + w/2, var w²/12
            Family::Uniform => {
                let w = (12.0 * v).sqrt();
                let a = m - w / 2.0;
                (a + w / 2.0, w * w / 12.0)
            }
            // Laplace(μ, b): mean μ, var 2b²
            Family::Laplacian => {
                let b = (v / 2.0).sqrt();
                (m, 2.0 * b * b)
            }
        }
    }
}

/// Generates `n_sets` sets of `samples_per_set` scalar samples. Each set's
/// RNG stream is derived from `(seed, set index)`, so parallel and serial
/// generation agree bit for bit. Per-set draw order: family, mean,
/// variance, then the samples.
pub fn gen_synthetic_1d(n_sets: usize, samples_per_set: usize, seed: u64) -> Result<Corpus> {
    if n_sets == 0 || samples_per_set == 0 {
        return Err(Error::InvalidArgument(format!(
            "need positive set and sample counts, got {n_sets} x {samples_per_set}"
        )));
    }
    let sets = try_indexed_map(n_sets, |i| {
        let mut rng = stream_rng(seed, domains::SYNTHETIC_DATA, i as u64);
        let family = Family::ALL[rng.gen_range(0..4)];
        let m: f64 = rng.gen_range(-1.0..1.0);
        let v: f64 = rng.gen_range(0.5..2.0);
        let values: Vec<f64> = (0..samples_per_set)
            .map(|_| family.sample(m, v, &mut rng))
            .collect();
        Ok(SetRecord {
            id: i as u32,
            values: Tensor::new(vec![samples_per_set, 1], values)?,
            label: Some(SetLabel {
                class_id: family.class_id(),
                mean: m,
                variance: v,
            }),
        })
    })?;
    Ok(Corpus {
        sample_size: samples_per_set,
        n_features: 1,
        label_kind: LabelKind::SyntheticFamily,
        sets,
    })
}
