//! Run configuration. Functions over the support are either explicit vectors
//! or registry names (`id`, `sq`, `tanh`, `const`, `const:<c>`).

use std::sync::Arc;

use mvm_core::applications::{ex91_cost, ex92_cost};
use mvm_core::hjb::SimplexGrid;
use mvm_core::measure::{AtomicMeasure, ControlVector, ScalarField, Support};
use mvm_core::sde::CostFunctional;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldSpec {
    Values(Vec<f64>),
    Name(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Ex91,
    Ex92,
    Constant,
    /// `values[node][control]` on the solve grid.
    Table,
}

impl CostKind {
    pub fn name(self) -> &'static str {
        match self {
            CostKind::Ex91 => "ex91",
            CostKind::Ex92 => "ex92",
            CostKind::Constant => "constant",
            CostKind::Table => "table",
        }
    }
}

/// `{kind, parameters}`: ex91 takes `phi`, `rho_bar`, `alpha`; constant takes
/// `value`; table takes `values`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub kind: CostKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<FieldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_bar: Option<FieldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<Vec<f64>>>,
}

impl CostSpec {
    #[cfg(test)]
    pub fn of(kind: CostKind) -> Self {
        Self {
            kind,
            phi: None,
            rho_bar: None,
            alpha: None,
            value: None,
            values: None,
        }
    }

    fn check_params(&self) -> Result<(), CliError> {
        let present = [
            ("phi", self.phi.is_some()),
            ("rho_bar", self.rho_bar.is_some()),
            ("alpha", self.alpha.is_some()),
            ("value", self.value.is_some()),
            ("values", self.values.is_some()),
        ];
        let wanted: &[&str] = match self.kind {
            CostKind::Ex91 => &["phi", "rho_bar", "alpha"],
            CostKind::Ex92 => &[],
            CostKind::Constant => &["value"],
            CostKind::Table => &["values"],
        };
        for (name, set) in present {
            let field = format!("cost.{name}");
            match (wanted.contains(&name), set) {
                (true, false) => return Err(bad(&field, format!("missing for kind {}", self.kind.name()))),
                (false, true) => return Err(bad(&field, format!("not a parameter of kind {}", self.kind.name()))),
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GameConfig {
    Builtin(String),
    Tensor {
        params: Vec<f64>,
        /// `tensor[i][u][v]`.
        tensor: Vec<Vec<Vec<f64>>>,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controls: Option<Vec<FieldSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<usize>,
    /// Scalar function of the real line: Root objective or Asian payoff.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payoff: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    /// Time steps of the Asian and game solvers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub game: Option<GameConfig>,
}

fn bad(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("field `{field}`: {msg}"))
}

fn model(field: &str) -> impl Fn(mvm_core::MvmError) -> CliError + '_ {
    move |e| bad(field, e)
}

pub fn parse(text: &str) -> Result<RunConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            CliError::Config(inner.to_string())
        } else {
            CliError::Config(format!("field `{path}`: {inner}"))
        }
    })
}

pub fn scalar_field(name: &str, field: &str) -> Result<ScalarField, CliError> {
    match name {
        "id" => Ok(ScalarField::identity()),
        "sq" => Ok(ScalarField::square()),
        "tanh" => Ok(ScalarField::tanh()),
        "const" => Ok(ScalarField::constant(1.0)),
        other => match other.strip_prefix("const:").map(str::parse::<f64>) {
            Some(Ok(c)) if c.is_finite() => Ok(ScalarField::constant(c)),
            _ => Err(bad(
                field,
                format!("unknown function `{other}` (expected id, sq, tanh, const or const:<c>)"),
            )),
        },
    }
}

/// Expands a field spec to its values on the support.
pub fn field_values(spec: &FieldSpec, support: &Support, field: &str) -> Result<Vec<f64>, CliError> {
    match spec {
        FieldSpec::Values(v) if v.len() != support.len() => Err(bad(
            field,
            format!("expected {} values, got {}", support.len(), v.len()),
        )),
        FieldSpec::Values(v) if v.iter().any(|x| !x.is_finite()) => Err(bad(field, "values must be finite")),
        FieldSpec::Values(v) => Ok(v.clone()),
        FieldSpec::Name(name) => support.evaluate(&scalar_field(name, field)?).map_err(model(field)),
    }
}

impl RunConfig {
    pub fn label(&self, default: &str) -> String {
        self.problem.clone().unwrap_or_else(|| default.to_string())
    }

    pub fn support(&self) -> Result<Arc<Support>, CliError> {
        let pts = self.support.as_ref().ok_or_else(|| bad("support", "missing"))?;
        Support::line(pts).map_err(model("support"))
    }

    pub fn initial(&self, support: &Arc<Support>) -> Result<AtomicMeasure, CliError> {
        let w = self.weights.as_ref().ok_or_else(|| bad("weights", "missing"))?;
        AtomicMeasure::new(support.clone(), w.clone()).map_err(model("weights"))
    }

    pub fn initial_opt(&self, support: &Arc<Support>) -> Result<Option<AtomicMeasure>, CliError> {
        self.weights.as_ref().map(|_| self.initial(support)).transpose()
    }

    pub fn controls(&self, support: &Support) -> Result<Vec<ControlVector>, CliError> {
        let specs = self.controls.as_ref().ok_or_else(|| bad("controls", "missing"))?;
        if specs.is_empty() {
            return Err(bad("controls", "need at least one control"));
        }
        specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let name = format!("controls[{i}]");
                let v = field_values(s, support, &name)?;
                ControlVector::new(support, v).map_err(|e| bad(&name, e))
            })
            .collect()
    }

    pub fn beta(&self) -> Result<f64, CliError> {
        let b = self.beta.unwrap_or(1.0);
        if !(b >= 0.0 && b.is_finite()) {
            return Err(bad("beta", format!("must be finite and nonnegative, got {b}")));
        }
        Ok(b)
    }

    pub fn positive(&self, value: Option<f64>, field: &str, default: f64) -> Result<f64, CliError> {
        let v = value.unwrap_or(default);
        if !(v > 0.0 && v.is_finite()) {
            return Err(bad(field, format!("must be positive, got {v}")));
        }
        Ok(v)
    }

    pub fn count(&self, value: Option<usize>, field: &str, default: usize) -> Result<usize, CliError> {
        match value.unwrap_or(default) {
            0 => Err(bad(field, "must be positive")),
            v => Ok(v),
        }
    }

    pub fn mesh(&self, default: u32) -> Result<u32, CliError> {
        match self.mesh.unwrap_or(default) {
            0 => Err(bad("mesh", "must be positive")),
            m => Ok(m),
        }
    }

    pub fn payoff(&self, default: &str) -> Result<(String, ScalarField), CliError> {
        let name = self.payoff.clone().unwrap_or_else(|| default.to_string());
        let f = scalar_field(&name, "payoff")?;
        Ok((name, f))
    }

    /// Cost functional; `grid` and `controls` are needed by table costs.
    pub fn cost(
        &self,
        support: &Support,
        grid: Option<&SimplexGrid>,
        controls: &[ControlVector],
    ) -> Result<CostFunctional, CliError> {
        let beta = self.beta()?;
        let spec = self.cost.as_ref().ok_or_else(|| bad("cost", "missing"))?;
        spec.check_params()?;
        match spec.kind {
            CostKind::Ex91 => {
                let (phi, rho_bar, alpha) = (
                    spec.phi.as_ref().expect("checked"),
                    spec.rho_bar.as_ref().expect("checked"),
                    spec.alpha.expect("checked"),
                );
                let phi_v = field_values(phi, support, "cost.phi")?;
                let rho = ControlVector::new(support, field_values(rho_bar, support, "cost.rho_bar")?)
                    .map_err(model("cost.rho_bar"))?;
                if !alpha.is_finite() {
                    return Err(bad("cost.alpha", "must be finite"));
                }
                if beta == 0.0 {
                    return Err(bad("beta", "ex91 cost needs beta > 0"));
                }
                ex91_cost(support, &tabulated(support, phi_v), &rho, alpha, beta).map_err(model("cost"))
            }
            CostKind::Ex92 => ex92_cost(beta).map_err(model("cost")),
            CostKind::Constant => {
                CostFunctional::constant(spec.value.expect("checked"), beta).map_err(model("cost.value"))
            }
            CostKind::Table => {
                let values = spec.values.as_ref().expect("checked");
                let grid = grid.ok_or_else(|| bad("cost", "table costs are only defined on the solve grid"))?;
                if values.len() != grid.len() {
                    return Err(bad(
                        "cost.values",
                        format!("expected {} rows (one per node), got {}", grid.len(), values.len()),
                    ));
                }
                if let Some(i) = values.iter().position(|r| r.len() != controls.len()) {
                    return Err(bad(
                        &format!("cost.values[{i}]"),
                        format!("expected {} entries", controls.len()),
                    ));
                }
                let grid = grid.clone();
                let table = values.clone();
                let controls: Vec<Vec<f64>> = controls.iter().map(|c| c.values().to_vec()).collect();
                CostFunctional::new("table", beta, move |mu, rho| {
                    let j = grid.nearest_node(mu.weights());
                    match controls.iter().position(|c| c.as_slice() == rho.values()) {
                        Some(c) => table[j][c],
                        None => f64::INFINITY,
                    }
                })
                .map_err(model("cost"))
            }
        }
    }
}

/// Scalar field equal to `values[i]` at atom `i`.
fn tabulated(support: &Support, values: Vec<f64>) -> ScalarField {
    let coords = support.first_coords();
    ScalarField::new("table", 0.0, move |x| match coords.iter().position(|c| *c == x[0]) {
        Some(i) => values[i],
        None => f64::NAN,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_expands_on_the_support() {
        let s = Support::line(&[-1.0, 0.0, 2.0]).unwrap();
        let v = field_values(&FieldSpec::Name("sq".into()), &s, "x").unwrap();
        assert_eq!(v, vec![1.0, 0.0, 4.0]);
        let c = field_values(&FieldSpec::Name("const:2.5".into()), &s, "x").unwrap();
        assert_eq!(c, vec![2.5; 3]);
        assert!(field_values(&FieldSpec::Name("cube".into()), &s, "x").is_err());
    }

    #[test]
    fn wrong_length_names_the_field() {
        let s = Support::line(&[-1.0, 1.0]).unwrap();
        let err = field_values(&FieldSpec::Values(vec![1.0]), &s, "controls[0]").unwrap_err();
        assert!(err.to_string().contains("controls[0]"), "{err}");
    }

    #[test]
    fn type_errors_carry_the_path() {
        let err = parse(r#"{"support": [0, 1], "cost": {"kind": "ex91", "phi": "id", "rho_bar": "id", "alpha": "x"}}"#)
            .unwrap_err();
        assert!(err.to_string().contains("cost.alpha"), "{err}");
        let err = parse(r#"{"mesh": -3}"#).unwrap_err();
        assert!(err.to_string().contains("mesh"), "{err}");
        let err = parse(r#"{"meshh": 3}"#).unwrap_err();
        assert!(err.to_string().contains("meshh"), "{err}");
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = RunConfig {
            support: Some(vec![-1.0, 0.0, 1.0]),
            controls: Some(vec![
                FieldSpec::Name("id".into()),
                FieldSpec::Values(vec![0.1, 0.2, 0.3]),
            ]),
            cost: Some(CostSpec {
                values: Some(vec![vec![1.0, 2.0]]),
                ..CostSpec::of(CostKind::Table)
            }),
            game: Some(GameConfig::Builtin("convex".into())),
            ..Default::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(parse(&text).unwrap(), cfg);
    }
}
