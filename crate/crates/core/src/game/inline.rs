//! Parametric one-dimensional games and the named registry built from them.
//!
//! All registry games are instances of [`InlineCoefficients`]:
//!
//! ```text
//! b(x, μ, a)  = clip(drift_x·x, drift_x_clip) + drift_a·a + drift_const + drift_mean·clip(mean μ, mean_clip)
//! σ(x)        = vol_base + vol_tanh·tanh(x)
//! f1(x, μ)    = reward_const − reward_x·min((x − target − target_mean·clip(mean μ, mean_clip))², reward_cap²)
//!               + reward_kernel·∫ exp(−(x−y)²/(2h²)) μ(dy)
//! f2(μ, q)    = −action_var_penalty·Var(q)
//! f3(x, a)    = −action_cost·a²/2
//! ```

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{invalid, MfgError, Result};
use crate::game::{
    ActionKind, ActionSet, Coefficients, DeclaredBounds, GameSpec, InitialLaw, StationaryParams,
};
use crate::law::{ActionLaw, MarginalLaw, PathView};

pub const REGISTRY: [&str; 4] = [
    "constant-reward",
    "gaussian-repulsion",
    "clipped-ou-invariant",
    "discrete-oracle",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InlineCoefficients {
    pub drift_x: f64,
    pub drift_x_clip: Option<f64>,
    pub drift_a: f64,
    pub drift_const: f64,
    pub drift_mean: f64,
    pub mean_clip: Option<f64>,
    pub vol_base: f64,
    pub vol_tanh: f64,
    pub reward_const: f64,
    pub reward_x: f64,
    pub target: f64,
    pub target_mean: f64,
    pub reward_cap: Option<f64>,
    pub reward_kernel: f64,
    pub kernel_bandwidth: f64,
    pub action_var_penalty: f64,
    pub action_cost: f64,
}

impl Default for InlineCoefficients {
    fn default() -> Self {
        Self {
            drift_x: 0.0,
            drift_x_clip: None,
            drift_a: 0.0,
            drift_const: 0.0,
            drift_mean: 0.0,
            mean_clip: None,
            vol_base: 1.0,
            vol_tanh: 0.0,
            reward_const: 0.0,
            reward_x: 0.0,
            target: 0.0,
            target_mean: 0.0,
            reward_cap: None,
            reward_kernel: 0.0,
            kernel_bandwidth: 0.5,
            action_var_penalty: 0.0,
            action_cost: 0.0,
        }
    }
}

fn clip(v: f64, bound: Option<f64>) -> f64 {
    match bound {
        Some(c) => v.clamp(-c, c),
        None => v,
    }
}

impl InlineCoefficients {
    fn validate(&self) -> Result<()> {
        let vals = [
            self.drift_x,
            self.drift_a,
            self.drift_const,
            self.drift_mean,
            self.vol_base,
            self.vol_tanh,
            self.reward_const,
            self.reward_x,
            self.target,
            self.target_mean,
            self.reward_kernel,
            self.action_var_penalty,
            self.action_cost,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(invalid("coefficient parameters must be finite"));
        }
        if self.vol_base.abs() <= self.vol_tanh.abs() {
            return Err(invalid("vol_base must dominate vol_tanh so that σ never vanishes"));
        }
        if !(self.kernel_bandwidth > 0.0) {
            return Err(invalid("kernel_bandwidth must be positive"));
        }
        for c in [self.drift_x_clip, self.mean_clip, self.reward_cap].into_iter().flatten() {
            if !(c >= 0.0) {
                return Err(invalid("clip bounds must be nonnegative"));
            }
        }
        Ok(())
    }

    fn law_mean(&self, law: &MarginalLaw<'_>) -> f64 {
        clip(law.mean()[0], self.mean_clip)
    }

    /// Action-free part of the drift.
    pub fn base_drift(&self, x: f64, law: &MarginalLaw<'_>) -> f64 {
        let mut b = clip(self.drift_x * x, self.drift_x_clip) + self.drift_const;
        if self.drift_mean != 0.0 {
            b += self.drift_mean * self.law_mean(law);
        }
        b
    }

    pub fn sigma(&self, x: f64) -> f64 {
        if self.vol_tanh == 0.0 {
            self.vol_base
        } else {
            self.vol_base + self.vol_tanh * x.tanh()
        }
    }

    pub fn state_reward(&self, x: f64, law: &MarginalLaw<'_>) -> f64 {
        let mut f = self.reward_const;
        if self.reward_x != 0.0 {
            let mut center = self.target;
            if self.target_mean != 0.0 {
                center += self.target_mean * self.law_mean(law);
            }
            let mut sq = (x - center) * (x - center);
            if let Some(cap) = self.reward_cap {
                sq = sq.min(cap * cap);
            }
            f -= self.reward_x * sq;
        }
        if self.reward_kernel != 0.0 {
            f += self.reward_kernel * law.kernel_sum(self.kernel_bandwidth, &[x]);
        }
        f
    }
}

impl Coefficients for InlineCoefficients {
    fn dim(&self) -> usize {
        1
    }

    fn drift(&self, _t: f64, path: &PathView<'_>, law: &MarginalLaw<'_>, a: &[f64], out: &mut [f64]) {
        out[0] = self.base_drift(path.current()[0], law) + self.drift_a * a[0];
    }

    fn volatility(&self, _t: f64, path: &PathView<'_>, out: &mut [f64]) {
        out[0] = self.sigma(path.current()[0]);
    }

    fn reward_state(&self, _t: f64, path: &PathView<'_>, law: &MarginalLaw<'_>) -> f64 {
        self.state_reward(path.current()[0], law)
    }

    fn reward_interaction(&self, _t: f64, _law: &MarginalLaw<'_>, q: &ActionLaw) -> f64 {
        if self.action_var_penalty == 0.0 {
            0.0
        } else {
            -self.action_var_penalty * q.variance()
        }
    }

    fn reward_action(&self, _t: f64, _path: &PathView<'_>, a: &[f64]) -> f64 {
        -0.5 * self.action_cost * a[0] * a[0]
    }

    fn is_time_homogeneous(&self) -> bool {
        true
    }

    fn drift_depends_on_law(&self) -> bool {
        self.drift_mean != 0.0
    }

    fn reward_depends_on_law(&self) -> bool {
        self.reward_kernel != 0.0 || (self.reward_x != 0.0 && self.target_mean != 0.0) || self.action_var_penalty != 0.0
    }

    fn action_terms(
        &self,
        t: f64,
        path: &PathView<'_>,
        law: &MarginalLaw<'_>,
        actions: &ActionSet,
        beta: &mut [f64],
        f3: &mut [f64],
    ) -> Result<()> {
        let x = path.current()[0];
        let s = self.sigma(x);
        if s.abs() < 1e-13 {
            return Err(MfgError::SingularVolatility { t, pivot: s });
        }
        let b0 = self.base_drift(x, law);
        let inv = 1.0 / s;
        for ((a, b), f) in actions.grid().iter().zip(beta.iter_mut()).zip(f3.iter_mut()) {
            *b = (b0 + self.drift_a * a) * inv;
            *f = -0.5 * self.action_cost * a * a;
        }
        Ok(())
    }
}

/// Serialisable description of a one-dimensional game.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameDescription {
    pub name: String,
    #[serde(default)]
    pub coefficients: InlineCoefficients,
    pub discount: f64,
    pub actions: ActionKind,
    pub initial: InitialLaw,
    pub bounds: DeclaredBounds,
    #[serde(default)]
    pub stationary: Option<StationaryParams>,
}

impl GameDescription {
    /// A game with the given coefficients and neutral defaults elsewhere
    /// (λ = 0.5, υ = δ₀, generous bounds).
    pub fn custom(coefficients: InlineCoefficients, actions: ActionKind) -> Self {
        Self {
            name: "custom".into(),
            coefficients,
            discount: 0.5,
            actions,
            initial: InitialLaw::Dirac { point: vec![0.0] },
            bounds: DeclaredBounds {
                drift: 1.0,
                reward: 1.0,
                lipschitz: 1.0,
                concavity: None,
                monotonicity_slack: 0.0,
                action: 1.0,
            },
            stationary: None,
        }
    }

    pub fn build(&self) -> Result<GameSpec> {
        self.coefficients.validate()?;
        let actions = ActionSet::new(self.actions.clone())?;
        if actions.dim() != 1 {
            return Err(MfgError::Shape("inline games use one-dimensional actions".into()));
        }
        let spec = GameSpec {
            name: self.name.clone(),
            coefficients: Arc::new(self.coefficients.clone()),
            discount: self.discount,
            actions,
            initial: self.initial.clone(),
            bounds: self.bounds.clone(),
            stationary: self.stationary.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Resolves a JSON game entry: a registry name, an object with a
    /// `preset` key whose remaining fields override the preset, or a full
    /// inline description.
    pub fn from_json(value: &Value) -> Result<Self> {
        let merged = match value {
            Value::String(name) => serde_json::to_value(preset(name)?)?,
            Value::Object(map) => match map.get("preset") {
                Some(Value::String(name)) => {
                    let mut base = serde_json::to_value(preset(name)?)?;
                    let mut rest = map.clone();
                    rest.remove("preset");
                    merge(&mut base, Value::Object(rest));
                    base
                }
                Some(_) => {
                    return Err(MfgError::Config {
                        path: "game.preset".into(),
                        message: "expected a registry name".into(),
                    })
                }
                None => value.clone(),
            },
            _ => {
                return Err(MfgError::Config {
                    path: "game".into(),
                    message: "expected a registry name or an object".into(),
                })
            }
        };
        let mut track = serde_path_to_error::Track::new();
        let de = serde_path_to_error::Deserializer::new(&merged, &mut track);
        GameDescription::deserialize(de).map_err(|e| MfgError::Config {
            path: format!("game.{}", track.path()),
            message: e.to_string(),
        })
    }
}

// Recursive object merge; objects carrying a different `kind` tag are replaced.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            let kind_changed = matches!((b.get("kind"), o.get("kind")), (Some(x), Some(y)) if x != y);
            if kind_changed {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Registry preset by name.
pub fn preset(name: &str) -> Result<GameDescription> {
    let unit_box = ActionKind::interval(-1.0, 1.0, 41);
    let desc = match name {
        "constant-reward" => GameDescription {
            name: name.into(),
            coefficients: InlineCoefficients {
                reward_const: 1.0,
                ..Default::default()
            },
            discount: 0.5,
            actions: unit_box,
            initial: InitialLaw::Dirac { point: vec![0.0] },
            bounds: DeclaredBounds {
                drift: 1.0,
                reward: 1.0,
                lipschitz: 1.0,
                concavity: None,
                monotonicity_slack: 0.0,
                action: 1.0,
            },
            stationary: None,
        },
        "gaussian-repulsion" => GameDescription {
            name: name.into(),
            coefficients: InlineCoefficients {
                drift_a: 1.0,
                reward_x: 0.075,
                reward_cap: Some(2.0),
                reward_kernel: -0.4,
                kernel_bandwidth: 0.5,
                action_cost: 0.6,
                ..Default::default()
            },
            discount: 0.5,
            actions: unit_box,
            initial: InitialLaw::Normal {
                mean: vec![0.0],
                std: vec![0.5],
            },
            bounds: DeclaredBounds {
                drift: 1.0,
                reward: 1.0,
                lipschitz: 1.0,
                concavity: Some(0.6),
                monotonicity_slack: 0.0,
                action: 1.0,
            },
            stationary: None,
        },
        "clipped-ou-invariant" => GameDescription {
            name: name.into(),
            coefficients: InlineCoefficients {
                drift_x: -1.0,
                drift_x_clip: Some(3.0),
                drift_a: 0.2,
                drift_mean: -0.1,
                mean_clip: Some(1.0),
                reward_kernel: -0.5,
                kernel_bandwidth: 0.5,
                action_cost: 0.6,
                ..Default::default()
            },
            discount: 0.5,
            actions: unit_box,
            initial: InitialLaw::Dirac { point: vec![0.0] },
            bounds: DeclaredBounds {
                drift: 3.3,
                reward: 1.0,
                lipschitz: 0.2,
                concavity: Some(0.6),
                monotonicity_slack: 0.0,
                action: 1.0,
            },
            stationary: Some(StationaryParams {
                inner_radius: 2.0,
                outer_radius: 3.0,
                margin: 2.5,
                local_bound: 3.3,
            }),
        },
        "discrete-oracle" => GameDescription {
            name: name.into(),
            coefficients: InlineCoefficients {
                drift_a: 1.0,
                reward_x: 4.0,
                target: 0.6,
                target_mean: -0.2,
                reward_cap: Some(1.8),
                action_var_penalty: 0.1,
                action_cost: 1.0,
                ..Default::default()
            },
            discount: 0.5,
            actions: ActionKind::atoms_1d(&[-1.0, 0.0, 1.0]),
            initial: InitialLaw::Dirac { point: vec![0.0] },
            bounds: DeclaredBounds {
                drift: 1.0,
                reward: 15.0,
                lipschitz: 1.0,
                concavity: None,
                monotonicity_slack: 0.0,
                action: 1.0,
            },
            stationary: None,
        },
        other => return Err(MfgError::UnknownGame(other.into())),
    };
    Ok(desc)
}

/// Builds a registry game.
pub fn registry(name: &str) -> Result<GameSpec> {
    preset(name)?.build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn every_registry_game_builds() {
        for name in REGISTRY {
            let spec = registry(name).unwrap();
            assert_eq!(spec.name, name);
            assert!(spec.coefficients.is_time_homogeneous());
        }
        assert!(matches!(registry("nope"), Err(MfgError::UnknownGame(_))));
    }

    #[test]
    fn preset_overrides_merge() {
        let d = GameDescription::from_json(&json!({
            "preset": "gaussian-repulsion",
            "discount": 0.4,
            "coefficients": {"reward_kernel": -0.3}
        }))
        .unwrap();
        assert_eq!(d.discount, 0.4);
        assert_eq!(d.coefficients.reward_kernel, -0.3);
        assert_eq!(d.coefficients.action_cost, 0.6);
    }

    #[test]
    fn action_kind_override_replaces() {
        let d = GameDescription::from_json(&json!({
            "preset": "constant-reward",
            "actions": {"kind": "atoms", "atoms": [[0.0], [1.0]]}
        }))
        .unwrap();
        assert_eq!(d.actions, ActionKind::atoms_1d(&[0.0, 1.0]));
    }

    #[test]
    fn config_errors_name_the_field() {
        let err = GameDescription::from_json(&json!({
            "preset": "constant-reward",
            "coefficients": {"drift_q": 1.0}
        }))
        .unwrap_err();
        match err {
            MfgError::Config { path, .. } => assert!(path.starts_with("game.coefficients"), "{path}"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn clipped_drift() {
        let c = preset("clipped-ou-invariant").unwrap().coefficients;
        let law = MarginalLaw::dirac(&[0.0]);
        assert_eq!(c.base_drift(5.0, &law), -3.0);
        assert_eq!(c.base_drift(-1.5, &law), 1.5);
        let shifted = MarginalLaw::dirac(&[4.0]);
        assert!((c.base_drift(0.0, &shifted) + 0.1).abs() < 1e-15);
    }
}
