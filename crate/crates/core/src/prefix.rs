use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{Linear, ParamGroup, ParamStore};

/// Position-wise two-layer MLP mapping refined prompt/mask tokens into the
/// language model's input space. One parameter set serves both the
/// nine-slot single-mask prefix and the one-slot multi-mask prefix.
#[derive(Debug, Clone)]
pub struct PrefixAdapter {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl PrefixAdapter {
    pub fn new(store: &mut ParamStore, d_k: usize, d_h: usize) -> Result<Self> {
        Ok(PrefixAdapter {
            fc1: Linear::new(store, "prefix.fc1", d_k, d_h, ParamGroup::Prefix)?,
            fc2: Linear::new(store, "prefix.fc2", d_h, d_h, ParamGroup::Prefix)?,
        })
    }

    /// `[prompt', mask']` (or just `mask'`) -> prefix `(B, l_f, d_h)`.
    pub fn adapt(&self, prompt: Option<&Tensor>, mask: &Tensor) -> Result<Tensor> {
        let x = match prompt {
            Some(p) => Tensor::cat(&[p, mask], 1)?,
            None => mask.clone(),
        };
        self.fc2.forward(&self.fc1.forward(&x)?.gelu()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn single_mask_prefix_shape() {
        let mut store = ParamStore::new(DType::F32, 0);
        let a = PrefixAdapter::new(&mut store, 32, 64).unwrap();
        let p = Tensor::zeros((2, 8, 32), DType::F32, &Device::Cpu).unwrap();
        let m = Tensor::zeros((2, 1, 32), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(a.adapt(Some(&p), &m).unwrap().dims(), &[2, 9, 64]);
        assert_eq!(a.adapt(None, &m).unwrap().dims(), &[2, 1, 64]);
    }

    #[test]
    fn zero_weights_give_zero_prefix() {
        let mut store = ParamStore::new(DType::F64, 0);
        let a = PrefixAdapter::new(&mut store, 4, 6).unwrap();
        for name in ["prefix.fc1.weight", "prefix.fc2.weight"] {
            let w = store.get(name).unwrap().var.zeros_like().unwrap();
            store.assign(name, &w).unwrap();
        }
        let m = Tensor::randn(0f64, 1.0, (1, 3, 4), &Device::Cpu).unwrap();
        let out = a.adapt(None, &m).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn position_wise() {
        let mut store = ParamStore::new(DType::F64, 2);
        let a = PrefixAdapter::new(&mut store, 4, 6).unwrap();
        let p = Tensor::randn(0f64, 1.0, (1, 8, 4), &Device::Cpu).unwrap();
        let m = Tensor::randn(0f64, 1.0, (1, 1, 4), &Device::Cpu).unwrap();
        let all = a.adapt(Some(&p), &m).unwrap();
        let x = Tensor::cat(&[&p, &m], 1).unwrap();
        for i in 0..9 {
            let one = a.adapt(None, &x.narrow(1, i, 1).unwrap()).unwrap();
            assert_eq!(
                one.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
                all.narrow(1, i, 1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
            );
        }
    }
}
