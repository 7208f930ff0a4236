use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::{decode_params, encode_params, ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningRates {
    pub backbone: f64,
    pub other: f64,
}

impl LearningRates {
    pub fn for_group(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::BackboneAndColorizer => self.backbone,
            ParamGroup::Other => self.other,
        }
    }
}

/// First and second moments per parameter, plus the number of steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// Serializes into the checkpoint record format: `m/<name>`, `v/<name>`
    /// and a one-element `step` record.
    pub fn encode(&self) -> Vec<u8> {
        let mut store = ParamStore::new();
        for (k, t) in &self.m {
            store.insert(format!("m/{k}"), t.clone());
        }
        for (k, t) in &self.v {
            store.insert(format!("v/{k}"), t.clone());
        }
        store.insert("step".into(), Tensor::scalar(T::lit(self.step as f64)));
        encode_params(&store)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let store: ParamStore<T> = decode_params(bytes)?;
        let mut state = Self {
            m: IndexMap::new(),
            v: IndexMap::new(),
            step: 0,
        };
        for (k, t) in store {
            if let Some(name) = k.strip_prefix("m/") {
                state.m.insert(name.to_owned(), t);
            } else if let Some(name) = k.strip_prefix("v/") {
                state.v.insert(name.to_owned(), t);
            } else if k == "step" {
                let s = t.item().map(|v| v.to_f64_lossy()).unwrap_or(-1.0);
                if !(s >= 0.0 && s.fract() == 0.0) {
                    return Err(Error::format("optimizer state", format!("bad step {s}")));
                }
                state.step = s as u64;
            } else {
                return Err(Error::format("optimizer state", format!("unexpected record {k:?}")));
            }
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Checks that the moments cover exactly `params` with matching shapes.
    pub fn check_matches(&self, params: &ParamStore<T>) -> Result<()> {
        for (which, moments) in [("m", &self.m), ("v", &self.v)] {
            if moments.len() != params.len() {
                return Err(Error::Incompatible(format!(
                    "optimizer {which} has {} tensors, model has {}",
                    moments.len(),
                    params.len()
                )));
            }
            for (k, p) in params {
                match moments.get(k) {
                    Some(t) if t.shape() == p.shape() => {}
                    Some(t) => {
                        return Err(Error::Incompatible(format!(
                            "optimizer {which}/{k}: expected {:?}, found {:?}",
                            p.shape(),
                            t.shape()
                        )))
                    }
                    None => return Err(Error::Incompatible(format!("optimizer {which}/{k} missing"))),
                }
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update with a per-group learning rate:
/// `m ← β1 m + (1-β1) g`, `v ← β2 v + (1-β2) g²`,
/// `p ← p − lr · m̂ / (√v̂ + ε)` with `m̂ = m / (1-β1ᵗ)`, `v̂ = v / (1-β2ᵗ)`.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &IndexMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    rates: LearningRates,
    hyper: AdamHyper,
) -> Result<()> {
    for (k, p) in params.iter() {
        let g = grads
            .get(k)
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient for {k}")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("{k}: parameter {:?}, gradient {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.check_matches(params)?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (T::lit(hyper.beta1), T::lit(hyper.beta2), T::lit(hyper.eps));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for (k, p) in params.iter_mut() {
        let lr = T::lit(rates.for_group(ParamGroup::of(k)));
        let g = grads[k.as_str()].data();
        let m = state.m[k.as_str()].data_mut();
        let v = state.v[k.as_str()].data_mut();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
