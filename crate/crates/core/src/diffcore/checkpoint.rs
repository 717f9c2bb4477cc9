//! JSON checkpoint: `{ name: { group, shape, data } }` with decimal float64
//! values that round-trip exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{Group, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Serialize, Deserialize)]
struct Entry {
    group: Group,
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn checkpoint_to_string<S: Scalar>(params: &ParamSet<S>) -> Result<String> {
    let mut doc = BTreeMap::new();
    for (name, p) in params.iter() {
        if !p.value.all_finite() {
            return Err(Error::Data(format!("parameter `{name}` is not finite")));
        }
        doc.insert(
            name.to_string(),
            Entry {
                group: p.group,
                shape: p.value.shape().to_vec(),
                data: p.value.data().iter().map(|v| v.as_f64()).collect(),
            },
        );
    }
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn checkpoint_from_str<S: Scalar>(s: &str) -> Result<ParamSet<S>> {
    let doc: BTreeMap<String, Entry> = serde_json::from_str(s)?;
    let mut params = ParamSet::new();
    for (name, e) in doc {
        let t = Tensor::from_f64(e.shape, &e.data)
            .map_err(|err| Error::Data(format!("checkpoint entry `{name}`: {err}")))?;
        params.insert(name, e.group, t)?;
    }
    Ok(params)
}

pub fn save_checkpoint<S: Scalar>(params: &ParamSet<S>, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_string(params)?)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<ParamSet<S>> {
    checkpoint_from_str(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(vals in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 1..40)) {
            let mut p = ParamSet::<f64>::new();
            p.insert("w", Group::Phi, Tensor::new(vec![vals.len()], vals.clone()).unwrap()).unwrap();
            p.insert("b", Group::Theta, Tensor::new(vec![1], vec![vals[0]]).unwrap()).unwrap();
            let back: ParamSet<f64> = checkpoint_from_str(&checkpoint_to_string(&p).unwrap()).unwrap();
            let bits = |ps: &ParamSet<f64>| ps.iter().flat_map(|(_, q)| q.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&p));
            prop_assert_eq!(back, p);
        }
    }

    #[test]
    fn rejects_bad_shape() {
        let s = r#"{"w": {"group": "phi", "shape": [2, 2], "data": [1.0, 2.0]}}"#;
        assert!(checkpoint_from_str::<f64>(s).is_err());
    }
}
