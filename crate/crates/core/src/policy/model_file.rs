use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{Icnn, IcnnJson, LayerJson, Mlp};
use super::{
    BcPolicy, LyapunovCandidate, PolicyKind, StablePolicy, TrainLog, TrainedModel, TrainedPolicy,
};
use crate::data::GoalFrame;
use crate::error::{Error, Result};

/// On-disk layout of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub kind: PolicyKind,
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    pub frame: GoalFrame,
    pub v_max: f64,
    pub layers: Vec<LayerJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub icnn: Option<IcnnJson>,
    pub train_log: TrainLog,
}

impl From<&TrainedModel> for ModelFile {
    fn from(m: &TrainedModel) -> Self {
        let (alpha, epsilon, layers, icnn) = match &m.policy {
            TrainedPolicy::Stable(p) => (
                Some(p.alpha),
                Some(p.lyapunov.epsilon),
                p.nominal.to_json(),
                Some(p.lyapunov.icnn.to_json()),
            ),
            TrainedPolicy::Bc(p) => (None, None, p.net.to_json(), None),
        };
        ModelFile {
            kind: m.policy.kind(),
            d: m.policy.dim(),
            alpha,
            epsilon,
            frame: m.policy.frame().clone(),
            v_max: m.v_max,
            layers,
            icnn,
            train_log: m.log.clone(),
        }
    }
}

impl ModelFile {
    pub fn into_model(self) -> Result<TrainedModel> {
        let d = self.d;
        if self.frame.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: self.frame.dim(),
            });
        }
        let frame = GoalFrame::new(self.frame.goal, self.frame.scale)?;
        if !(self.v_max >= 0.0) {
            return Err(Error::Model(format!("v_max must be nonnegative, got {}", self.v_max)));
        }
        let net = Mlp::from_json(&self.layers, d)?;
        let policy = match self.kind {
            PolicyKind::Bc => TrainedPolicy::Bc(BcPolicy { net, frame }),
            PolicyKind::Stable => {
                let icnn = self
                    .icnn
                    .as_ref()
                    .ok_or_else(|| Error::Model("stable model without icnn".into()))?;
                let positive = |v: Option<f64>, what: &str| match v {
                    Some(x) if x > 0.0 => Ok(x),
                    _ => Err(Error::Model(format!("stable model needs positive {what}"))),
                };
                TrainedPolicy::Stable(StablePolicy {
                    nominal: net,
                    lyapunov: LyapunovCandidate {
                        icnn: Icnn::from_json(icnn, d)?,
                        epsilon: positive(self.epsilon, "epsilon")?,
                    },
                    alpha: positive(self.alpha, "alpha")?,
                    frame,
                })
            }
        };
        Ok(TrainedModel {
            policy,
            v_max: self.v_max,
            log: self.train_log,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }
}

pub fn save_model(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ModelFile::from(model).to_json()).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ModelFile = serde_json::from_str(&text).map_err(Error::from_json)?;
    file.into_model()
}
