//! Experiment configuration (TOML, one section per concern).

use serde::{Deserialize, Serialize};
use srflab::gff::{check_sigma, Mollifier, MollifierScheme};
use srflab::lattice::TorusGeometry;
use srflab::srf::{
    ImplicitCoefficient, Insertion, ObservableSpec, Renormalization, SrfConfig, Stepper,
};
use srflab::Error;
use std::sync::Arc;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub geometry: GeometrySection,
    pub physics: PhysicsSection,
    pub scheme: SchemeSection,
    pub run: RunSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometrySection {
    /// Grid points per side.
    pub n: usize,
    /// Modular parameter `[re, im]`.
    pub tau: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsSection {
    pub sigma: f64,
    pub lambda: f64,
    pub insertions: Vec<Insertion>,
    /// Curvature term `chi` of the total-mass SDE.
    pub chi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepperKind {
    Imex,
    AreaForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RenormKind {
    PowerLaw,
    Wick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemeSection {
    pub dt: f64,
    /// Steps between coefficient refreshes (IMEX); 0 freezes them.
    pub refresh_every: u64,
    pub mollifier: MollifierScheme,
    pub eps: f64,
    pub renormalization: RenormKind,
    pub alpha: f64,
    pub beta: f64,
    pub stepper: StepperKind,
    /// Fixed implicit coefficient; unset means the spatial maximum.
    pub cbar: Option<f64>,
    pub cfl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialKind {
    /// Free-field sample rescaled to the requested total mass.
    Gff,
    /// `log`-constant plus a single cosine mode.
    Smooth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub replicas: usize,
    pub horizon: f64,
    pub seed: u64,
    pub record_interval: f64,
    /// Initial total mass.
    pub a0: f64,
    pub initial: InitialKind,
    /// Amplitude of the mode in smooth initial data.
    pub amplitude: f64,
    pub observables: Vec<ObservableSpec>,
    /// Noise levels for `expand`.
    pub sigmas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for GeometrySection {
    fn default() -> Self {
        Self {
            n: 32,
            tau: [0.0, 1.0],
        }
    }
}

impl Default for PhysicsSection {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            lambda: 0.5,
            insertions: Vec::new(),
            chi: 0.0,
        }
    }
}

impl Default for SchemeSection {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            refresh_every: 1,
            mollifier: MollifierScheme::Heat,
            eps: 1.0 / 8.0,
            renormalization: RenormKind::PowerLaw,
            alpha: 0.0,
            beta: 0.0,
            stepper: StepperKind::Imex,
            cbar: None,
            cfl: 1.0,
        }
    }
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            replicas: 100,
            horizon: 0.1,
            seed: 0,
            record_interval: 0.01,
            a0: 1.0,
            initial: InitialKind::Gff,
            amplitude: 0.3,
            observables: vec![
                ObservableSpec::Mode {
                    a: 1,
                    b: 0,
                    phase: 0.0,
                    offset: 1.0,
                    amplitude: 0.5,
                },
                ObservableSpec::Bump {
                    center: (0.5, 0.5),
                    radius: 0.3,
                    height: 1.0,
                },
            ],
            sigmas: vec![0.05, 0.1, 0.2],
        }
    }
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn geometry(&self) -> Result<Arc<TorusGeometry>, ConfigError> {
        let [re, im] = self.geometry.tau;
        Ok(TorusGeometry::new(
            self.geometry.n,
            srflab::lattice::Complex64::new(re, im),
        )?)
    }

    pub fn mollifier(&self, g: &TorusGeometry) -> Mollifier {
        match self.scheme.mollifier {
            MollifierScheme::Heat => Mollifier::heat(self.scheme.eps),
            MollifierScheme::Circle => Mollifier::circle(self.scheme.eps),
            MollifierScheme::Lattice => Mollifier::lattice(g),
        }
    }

    pub fn srf_config(&self, g: &TorusGeometry) -> SrfConfig {
        let renormalization = match self.scheme.renormalization {
            RenormKind::PowerLaw => Renormalization::PowerLaw {
                alpha: self.scheme.alpha,
                beta: self.scheme.beta,
            },
            RenormKind::Wick => Renormalization::Wick,
        };
        let stepper = match self.scheme.stepper {
            StepperKind::Imex => Stepper::Imex {
                implicit: match self.scheme.cbar {
                    Some(value) => ImplicitCoefficient::Fixed { value },
                    None => ImplicitCoefficient::SpatialMax,
                },
                refresh_every: (self.scheme.refresh_every > 0).then_some(self.scheme.refresh_every),
            },
            StepperKind::AreaForm => Stepper::AreaForm {
                cfl: self.scheme.cfl,
            },
        };
        SrfConfig {
            sigma: self.physics.sigma,
            lambda: self.physics.lambda,
            dt: self.scheme.dt,
            mollifier: self.mollifier(g),
            renormalization,
            stepper,
            insertions: self.physics.insertions.clone(),
            horizon: self.run.horizon,
            record_interval: self.run.record_interval,
            a_min: None,
            guard: 50.0,
            observables: self.run.observables.clone(),
        }
    }

    /// Checks shared by every subcommand; subcommands re-validate the
    /// module-level objects they build.
    pub fn validate(&self) -> Result<(), ConfigError> {
        check_sigma(self.physics.sigma)?;
        let g = self.geometry()?;
        self.mollifier(&g).validate(&g)?;
        if self.run.replicas == 0 {
            return Err(ConfigError::Invalid {
                parameter: "replicas".into(),
                bound: "replicas >= 1".into(),
            });
        }
        if !(self.run.horizon > 0.0) {
            return Err(ConfigError::Invalid {
                parameter: "horizon".into(),
                bound: "T > 0".into(),
            });
        }
        if !(self.run.a0 > 0.0) {
            return Err(ConfigError::Invalid {
                parameter: "a0".into(),
                bound: "A0 > 0".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum ConfigError {
    Syntax(String),
    Invalid { parameter: String, bound: String },
}

impl From<Error> for ConfigError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParameter { name, bound } => ConfigError::Invalid {
                parameter: name.to_string(),
                bound,
            },
            Error::Unresolvable { eps, min } => ConfigError::Invalid {
                parameter: "eps".into(),
                bound: format!("eps >= {min} (got {eps})"),
            },
            other => ConfigError::Invalid {
                parameter: "config".into(),
                bound: other.to_string(),
            },
        }
    }
}

impl ConfigError {
    /// Machine-readable form printed on stderr.
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            ConfigError::Syntax(msg) => serde_json::json!({
                "error": "invalid-config",
                "parameter": null,
                "bound": null,
                "message": msg,
            }),
            ConfigError::Invalid { parameter, bound } => serde_json::json!({
                "error": "invalid-config",
                "parameter": parameter,
                "bound": bound,
                "message": format!("invalid {parameter}: {bound}"),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = ExperimentConfig::parse("[physics]\nsigma = 0.7\n").unwrap();
        assert_eq!(cfg.physics.sigma, 0.7);
        assert_eq!(cfg.geometry.n, 32);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            ExperimentConfig::parse("[physics]\nsigmaa = 0.7\n"),
            Err(ConfigError::Syntax(_))
        ));
    }

    #[test]
    fn sigma_bound_is_named() {
        let cfg = ExperimentConfig::parse("[physics]\nsigma = 4.0\n").unwrap();
        match cfg.validate() {
            Err(ConfigError::Invalid { parameter, bound }) => {
                assert_eq!(parameter, "sigma");
                assert_eq!(bound, "sigma >= 2*sqrt(pi)");
            }
            other => panic!("{other:?}"),
        }
    }
}
