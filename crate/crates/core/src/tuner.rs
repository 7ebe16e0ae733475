//! Linear embedding-tuning layer `E' = W E + b` between the text encoder and the LDM.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::Array;
use crate::clap_lite::{ClapModel, Vocabulary};
use crate::embedding::Embedding;
use crate::error::{config_err, input_err, FlabError, Result};
use crate::nn::tensor_to_array;
use crate::synth::LabelTable;

pub const DEFAULT_NOISE_STD: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct TuningLayer {
    w: Var,
    b: Var,
    pub trainable: bool,
}

/// `W = I`, `b ~ N(0, noise_std^2)` drawn from `seed`.
pub fn init_tuning(dim: usize, noise_std: f64, seed: u64) -> Result<TuningLayer> {
    init_tuning_dtype(dim, noise_std, seed, DType::F32)
}

pub fn init_tuning_dtype(dim: usize, noise_std: f64, seed: u64, dtype: DType) -> Result<TuningLayer> {
    if !(noise_std >= 0.0) {
        return config_err(format!("tuner noise_std must be >= 0, got {noise_std}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b: Vec<f64> = if noise_std == 0.0 {
        vec![0.0; dim]
    } else {
        let normal = Normal::new(0.0, noise_std).map_err(|e| FlabError::Config(e.to_string()))?;
        (0..dim).map(|_| normal.sample(&mut rng)).collect()
    };
    let w = Tensor::eye(dim, dtype, &Device::Cpu)?;
    let b = Tensor::from_vec(b, dim, &Device::Cpu)?.to_dtype(dtype)?;
    Ok(TuningLayer {
        w: Var::from_tensor(&w)?,
        b: Var::from_tensor(&b)?,
        trainable: true,
    })
}

impl TuningLayer {
    pub fn dim(&self) -> usize {
        self.b.dims()[0]
    }

    pub fn weight(&self) -> &Var {
        &self.w
    }

    pub fn bias(&self) -> &Var {
        &self.b
    }

    pub fn from_matrix(w: Vec<f32>, b: Vec<f32>) -> Result<Self> {
        let d = b.len();
        if w.len() != d * d {
            return input_err(format!("tuner weight has {} entries, expected {d}x{d}", w.len()));
        }
        Ok(Self {
            w: Var::from_tensor(&Tensor::from_vec(w, (d, d), &Device::Cpu)?)?,
            b: Var::from_tensor(&Tensor::from_vec(b, d, &Device::Cpu)?)?,
            trainable: true,
        })
    }

    /// Named parameters for an optimizer; empty when frozen.
    pub fn named_vars(&self) -> Vec<(String, &Var)> {
        if self.trainable {
            vec![("tuner.W".into(), &self.w), ("tuner.b".into(), &self.b)]
        } else {
            Vec::new()
        }
    }

    /// Row-wise `E W^T + b` over a `(B, D)` batch, differentiable.
    pub fn apply_tensor(&self, e: &Tensor) -> Result<Tensor> {
        let w = self.w.as_tensor().to_dtype(e.dtype())?;
        let b = self.b.as_tensor().to_dtype(e.dtype())?;
        Ok(e.matmul(&w.t()?)?.broadcast_add(&b)?)
    }

    /// `W E + b`, not re-normalized.
    pub fn apply(&self, e: &Embedding) -> Result<Embedding> {
        let d = self.dim();
        if e.dim() != d {
            return input_err(format!("tuner expects dimension {d}, embedding has {}", e.dim()));
        }
        let w = self.w.as_tensor().to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let b = self.b.as_tensor().to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let x = e.to_f64();
        let out = w
            .iter()
            .zip(&b)
            .map(|(row, bi)| (row.iter().zip(&x).map(|(a, v)| a * v).sum::<f64>() + bi) as f32)
            .collect();
        Ok(Embedding::raw(out))
    }

    pub fn to_arrays(&self) -> Result<BTreeMap<String, Array>> {
        let mut m = BTreeMap::new();
        m.insert("W".to_string(), tensor_to_array(self.w.as_tensor())?);
        m.insert("b".to_string(), tensor_to_array(self.b.as_tensor())?);
        Ok(m)
    }

    pub fn from_arrays(arrays: &BTreeMap<String, Array>) -> Result<Self> {
        let get = |k: &str| {
            arrays
                .get(k)
                .ok_or_else(|| FlabError::Input(format!("checkpoint lacks tuner.{k}")))
        };
        Self::from_matrix(get("W")?.data.clone(), get("b")?.data.clone())
    }
}

/// Normalized `apply(encode_text(label_to_text(label)))`, the per-class selection target.
pub fn tuned_target(
    label: &str,
    labels: &LabelTable,
    vocab: &Vocabulary,
    encoder: &ClapModel,
    layer: &TuningLayer,
) -> Result<Embedding> {
    let text = labels.label_to_text(label)?;
    let prompt = vocab.tokenize(text)?;
    let e = encoder.encode_text(&prompt)?;
    Ok(Embedding::unit(layer.apply(&e)?.values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sq_norm_of_apply(w: &[f64], b: &[f64], e: &[f64]) -> f64 {
        let d = b.len();
        (0..d)
            .map(|i| {
                let y: f64 = (0..d).map(|j| w[i * d + j] * e[j]).sum::<f64>() + b[i];
                y * y
            })
            .sum()
    }

    #[test]
    fn zero_noise_is_identity() {
        let t = init_tuning(5, 0.0, 3).unwrap();
        let e = Embedding::raw(vec![0.3, -1.0, 2.5, 0.0, 7.0]);
        assert_eq!(t.apply(&e).unwrap(), e);
    }

    #[test]
    fn seeded_bias() {
        let a = init_tuning(8, 0.01, 11).unwrap();
        let b = init_tuning(8, 0.01, 11).unwrap();
        let c = init_tuning(8, 0.01, 12).unwrap();
        let v = |t: &TuningLayer| t.bias().as_tensor().to_vec1::<f32>().unwrap();
        assert_eq!(v(&a), v(&b));
        assert_ne!(v(&a), v(&c));
        assert!(init_tuning(4, -1.0, 0).is_err());
    }

    #[test]
    fn linearity_and_dim_check() {
        let t = TuningLayer::from_matrix(vec![2.0, 0.0, 0.0, 2.0], vec![0.0, 0.0]).unwrap();
        let out = t.apply(&Embedding::raw(vec![1.5, -0.25])).unwrap();
        assert_eq!(out.values, vec![3.0, -0.5]);
        assert!(t.apply(&Embedding::raw(vec![1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn weight_gradient_matches_central_differences() {
        let d = 4;
        let t = init_tuning_dtype(d, 0.3, 5, DType::F64).unwrap();
        let e = [0.4, -1.2, 0.7, 2.0];
        let et = Tensor::from_vec(e.to_vec(), (1, d), &Device::Cpu).unwrap();
        let loss = t.apply_tensor(&et).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let gw = grads
            .get(t.weight().as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let w = t.weight().as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = t.bias().as_tensor().to_vec1::<f64>().unwrap();
        let h = 1e-6;
        for k in 0..d * d {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[k] += h;
            wm[k] -= h;
            let fd = (sq_norm_of_apply(&wp, &b, &e) - sq_norm_of_apply(&wm, &b, &e)) / (2.0 * h);
            assert!((fd - gw[k]).abs() < 1e-5, "W[{k}]: {fd} vs {}", gw[k]);
        }
    }

    #[test]
    fn round_trip_arrays() {
        let t = init_tuning(6, 0.01, 2).unwrap();
        let back = TuningLayer::from_arrays(&t.to_arrays().unwrap()).unwrap();
        let e = Embedding::raw(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.apply(&e).unwrap(), back.apply(&e).unwrap());
    }

    proptest! {
        #[test]
        fn additive_at_init(seed in 0u64..1000, xs in prop::collection::vec(-5f32..5.0, 6), ys in prop::collection::vec(-5f32..5.0, 6)) {
            let t = init_tuning(6, 0.5, seed).unwrap();
            let b = t.bias().as_tensor().to_vec1::<f32>().unwrap();
            for x in [xs, ys] {
                let out = t.apply(&Embedding::raw(x.clone())).unwrap();
                for i in 0..6 {
                    // W = I exactly, so the offset is b up to one f32 rounding of x + b.
                    let expected = (x[i] as f64 + b[i] as f64) as f32;
                    prop_assert_eq!(out.values[i], expected);
                }
            }
        }
    }
}
