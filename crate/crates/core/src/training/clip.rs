//! Global L2-norm gradient clipping.

use tch::{Kind, Tensor};

use crate::error::{Error, Result};

/// Scale factor applied to every gradient: `max_norm / norm` above the threshold, else 1.
pub fn clip_scale(norm: f64, max_norm: f64) -> f64 {
    if norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

/// A named set of gradients that are clipped together with all other groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientGroup {
    pub name: String,
    pub values: Vec<f64>,
}

pub fn global_norm(groups: &[GradientGroup]) -> f64 {
    groups.iter().flat_map(|g| g.values.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales all groups in place when their joint L2 norm exceeds `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(groups: &mut [GradientGroup], max_norm: f64) -> Result<f64> {
    for g in groups.iter() {
        if g.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(g.name.clone()));
        }
    }
    let norm = global_norm(groups);
    let scale = clip_scale(norm, max_norm);
    if scale < 1.0 {
        for v in groups.iter_mut().flat_map(|g| g.values.iter_mut()) {
            *v *= scale;
        }
    }
    Ok(norm)
}

/// Tensor version used by the trainer: `groups` pairs a group name with its
/// parameters; parameters without a gradient are ignored.
pub fn clip_tensor_gradients(groups: &[(&str, Vec<Tensor>)], max_norm: f64) -> Result<f64> {
    let mut total_sq = 0.0;
    for (name, params) in groups {
        let mut group_sq = 0.0;
        for p in params {
            let g = p.grad();
            if g.defined() {
                group_sq += g.to_kind(Kind::Double).square().sum(Kind::Double).double_value(&[]);
            }
        }
        if !group_sq.is_finite() {
            return Err(Error::NonFiniteGradient((*name).to_string()));
        }
        total_sq += group_sq;
    }
    let norm = total_sq.sqrt();
    let scale = clip_scale(norm, max_norm);
    if scale < 1.0 {
        tch::no_grad(|| {
            for p in groups.iter().flat_map(|(_, ps)| ps.iter()) {
                let mut g = p.grad();
                if g.defined() {
                    let _ = g.g_mul_scalar_(scale);
                }
            }
        });
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(name: &str, values: &[f64]) -> GradientGroup {
        GradientGroup { name: name.into(), values: values.to_vec() }
    }

    #[test]
    fn below_threshold_unchanged() {
        let mut g = vec![group("head", &[1.2, 1.6])];
        let before = g.clone();
        assert_eq!(clip_gradients(&mut g, 5.0).unwrap(), 2.0);
        assert_eq!(g, before);
    }

    #[test]
    fn norm_ten_halves() {
        let mut g = vec![group("head", &[6.0]), group("backbone", &[8.0])];
        assert_eq!(clip_gradients(&mut g, 5.0).unwrap(), 10.0);
        assert_eq!(g[0].values, vec![3.0]);
        assert_eq!(g[1].values, vec![4.0]);
        assert!((global_norm(&g) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_names_group() {
        let mut g = vec![group("head", &[1.0]), group("backbone", &[f64::NAN])];
        match clip_gradients(&mut g, 5.0) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "backbone"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tensor_gradients_clipped() {
        let p = Tensor::zeros([2], (Kind::Float, tch::Device::Cpu)).set_requires_grad(true);
        let target = Tensor::from_slice(&[30.0f32, 40.0]);
        (&p * &target).sum(Kind::Float).backward();
        let norm = clip_tensor_gradients(&[("head", vec![p.shallow_clone()])], 5.0).unwrap();
        assert!((norm - 50.0).abs() < 1e-4);
        let g = Vec::<f32>::try_from(p.grad()).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-5 && (g[1] - 4.0).abs() < 1e-5);
    }
}
