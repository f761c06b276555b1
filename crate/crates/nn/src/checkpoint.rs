use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::error::{NnError, Result};
use crate::params::ParamSet;

/// Self-describing snapshot: named parameter sets, optimizer states, step
/// and scalar metrics. JSON floats round-trip exactly.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: u64,
    pub params: BTreeMap<String, ParamSet>,
    pub optimizers: BTreeMap<String, Adam>,
    pub metrics: BTreeMap<String, f64>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn param_set(&self, name: &str) -> Result<&ParamSet> {
        self.params
            .get(name)
            .ok_or_else(|| NnError::Checkpoint(format!("missing parameter set {name:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adam::AdamConfig;
    use crate::tensor::Tensor;

    #[test]
    fn json_round_trip_is_exact() {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::row(vec![0.1, 1.0 / 3.0, -2.5e-7, 1e-300, 5e300]));
        let mut opt = Adam::new(&ps, AdamConfig::default());
        opt.step(&mut ps, &[Tensor::row(vec![0.7, -1.1, 3.3, 1e-9, 2.0])]).unwrap();
        let mut ck = Checkpoint {
            step: 17,
            ..Default::default()
        };
        ck.params.insert("policy".into(), ps);
        ck.optimizers.insert("policy".into(), opt);
        ck.metrics.insert("collision".into(), 0.0123456789);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert!(back.param_set("missing").is_err());
    }
}
