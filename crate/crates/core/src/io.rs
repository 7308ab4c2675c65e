//! TOML model files.
//!
//! A model file either lists everything explicitly:
//!
//! ```toml
//! states = 2
//! grid = [0.0, 0.5]          # scalars, [[..], ..] vectors, or {start, stop, points}
//! lyapunov = [0.0, 1.0]
//!
//! [[point]]                  # one table per grid point, in grid order
//! kernel = [[0.9, 0.1], [0.2, 0.8]]
//! f = [1.0, 2.0]
//! ```
//!
//! or names a generator from [`crate::models`]:
//!
//! ```toml
//! [generator]
//! name = "two_state"
//! grid = { start = 0.0, stop = 1.0, points = 11 }
//! p = { c0 = 0.1, c1 = 0.05 }
//! q = { c0 = 0.2 }
//! ```
//!
//! Optional keys for explicit models: `labels`, per-point `lyapunov` (with a
//! top-level `sandwich = { a, b, c, d }`) and `individual_drift = [gamma, K]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::certify::Sandwich;
use crate::error::{Error, Result};
use crate::models::{Generated, GeneratorSpec, GridSpec};
use crate::statespace::{Kernel, Lyapunov, Observable, ParametricFamily, StateSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub states: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lyapunov: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sandwich: Option<Sandwich>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub individual_drift: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub point: Vec<PointEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointEntry {
    pub kernel: Vec<Vec<f64>>,
    pub f: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lyapunov: Option<Vec<f64>>,
}

fn located(prefix: &str, e: Error) -> Error {
    match e {
        Error::InvalidModel { location, message } => Error::InvalidModel {
            location: format!("{prefix}, {location}"),
            message,
        },
        other => other,
    }
}

impl ModelFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model files serialize")
    }

    /// Explicit model file for a family and its Lyapunov function.
    pub fn from_family(family: &ParametricFamily, v: &Lyapunov) -> Self {
        Self {
            states: Some(family.n_states()),
            labels: family.space().labels().map(|l| l.to_vec()),
            grid: Some(GridSpec::Points(family.thetas().to_vec())),
            lyapunov: Some(v.values().to_vec()),
            sandwich: None,
            individual_drift: None,
            point: family
                .kernels()
                .iter()
                .zip(family.observables())
                .map(|(k, f)| PointEntry {
                    kernel: k.rows().map(|r| r.to_vec()).collect(),
                    f: f.values().to_vec(),
                    lyapunov: None,
                })
                .collect(),
            generator: None,
        }
    }

    /// Same as [`Self::from_family`], carrying the per-parameter data of a fixture.
    pub fn from_generated(g: &Generated) -> Self {
        let mut m = Self::from_family(&g.family, &g.v);
        if let Some(vf) = &g.v_family {
            for (p, vt) in m.point.iter_mut().zip(vf) {
                p.lyapunov = Some(vt.values().to_vec());
            }
        }
        m.sandwich = g.sandwich;
        m.individual_drift = g.individual_drift.map(|(a, b)| [a, b]);
        m
    }

    /// Validates every invariant and builds the model. The first violation is
    /// reported with its grid point, row and entry.
    pub fn build(&self) -> Result<Generated> {
        if let Some(g) = &self.generator {
            let explicit =
                self.states.is_some() || self.grid.is_some() || self.lyapunov.is_some() || !self.point.is_empty();
            if explicit {
                return Err(Error::model(
                    "generator",
                    "a generator model takes no explicit states, grid, lyapunov or point entries",
                ));
            }
            return g.generate();
        }
        let n = self.states.ok_or_else(|| Error::model("states", "missing"))?;
        let space = match &self.labels {
            Some(l) => {
                if l.len() != n {
                    return Err(Error::model("labels", format!("{} labels for {n} states", l.len())));
                }
                StateSpace::with_labels(l.clone())?
            }
            None => StateSpace::new(n)?,
        };
        let thetas = self
            .grid
            .as_ref()
            .ok_or_else(|| Error::model("grid", "missing"))?
            .thetas()?;
        if self.point.len() != thetas.len() {
            return Err(Error::model(
                "point",
                format!("{} point entries for {} grid points", self.point.len(), thetas.len()),
            ));
        }
        let v = Lyapunov::new(
            self.lyapunov
                .clone()
                .ok_or_else(|| Error::model("lyapunov", "missing"))?,
        )
        .map_err(|e| located("lyapunov", e))?;
        if v.len() != n {
            return Err(Error::model("lyapunov", format!("{} entries for {n} states", v.len())));
        }
        let mut kernels = Vec::with_capacity(thetas.len());
        let mut fs = Vec::with_capacity(thetas.len());
        let mut vs = Vec::new();
        for (t, p) in self.point.iter().enumerate() {
            let at = format!("grid point {t}");
            if p.kernel.len() != n {
                return Err(Error::model(
                    format!("{at}, kernel"),
                    format!("{} rows for {n} states", p.kernel.len()),
                ));
            }
            if let Some(i) = p.kernel.iter().position(|r| r.len() != n) {
                return Err(Error::model(
                    format!("{at}, row {i}"),
                    format!("{} entries for {n} states", p.kernel[i].len()),
                ));
            }
            kernels.push(Kernel::from_rows(p.kernel.clone()).map_err(|e| located(&at, e))?);
            if p.f.len() != n {
                return Err(Error::model(
                    format!("{at}, f"),
                    format!("{} entries for {n} states", p.f.len()),
                ));
            }
            fs.push(Observable::new(p.f.clone()).map_err(|e| located(&at, e))?);
            if let Some(lv) = &p.lyapunov {
                let l = Lyapunov::new(lv.clone()).map_err(|e| located(&at, e))?;
                if l.len() != n {
                    return Err(Error::model(
                        format!("{at}, lyapunov"),
                        format!("{} entries for {n} states", l.len()),
                    ));
                }
                vs.push(l);
            }
        }
        let v_family = match vs.len() {
            0 => None,
            m if m == thetas.len() => Some(vs),
            _ => {
                return Err(Error::model(
                    "point",
                    "per-point lyapunov must be given for all grid points or none",
                ))
            }
        };
        if v_family.is_some() != self.sandwich.is_some() {
            return Err(Error::model("sandwich", "per-point lyapunov and sandwich go together"));
        }
        let family = ParametricFamily::new(space, thetas, kernels, fs)?;
        Ok(Generated {
            family,
            v,
            v_family,
            sandwich: self.sandwich,
            individual_drift: self.individual_drift.map(|[a, b]| (a, b)),
            linear_self_test: None,
            notes: Vec::new(),
        })
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<Generated> {
    ModelFile::parse(&read_text(path)?, path)?.build()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_shrinking_walk;

    const TWO: &str = r#"
states = 2
grid = [0.0, 0.5]
lyapunov = [0.0, 1.0]

[[point]]
kernel = [[0.9, 0.1], [0.2, 0.8]]
f = [1.0, 2.0]

[[point]]
kernel = [[0.85, 0.15], [0.2, 0.8]]
f = [1.0, 2.0]
"#;

    fn parse(s: &str) -> Result<Generated> {
        ModelFile::parse(s, Path::new("test.toml"))?.build()
    }

    #[test]
    fn explicit_model_loads() {
        let g = parse(TWO).unwrap();
        assert_eq!(g.family.grid_len(), 2);
        assert_eq!(g.family.kernel(1).get(0, 1), 0.15);
    }

    #[test]
    fn bad_row_named() {
        let bad = TWO.replace("[[0.85, 0.15], [0.2, 0.8]]", "[[0.85, 0.15], [0.2, 0.79]]");
        let msg = parse(&bad).unwrap_err().to_string();
        assert!(msg.contains("grid point 1") && msg.contains("row 1"), "{msg}");
        let neg = TWO.replace("[[0.85, 0.15]", "[[1.15, -0.15]");
        let msg = parse(&neg).unwrap_err().to_string();
        assert!(msg.contains("row 0, entry 1"), "{msg}");
    }

    #[test]
    fn generator_model_loads() {
        let g = parse(
            r#"
[generator]
name = "two_state"
grid = { start = 0.0, stop = 1.0, points = 3 }
p = { c0 = 0.1, c1 = 0.05 }
q = { c0 = 0.2 }
"#,
        )
        .unwrap();
        assert_eq!(g.family.grid_len(), 3);
        assert!((g.family.kernel(2).get(0, 1) - 0.15).abs() < 1e-15);
    }

    #[test]
    fn round_trip_with_per_point_lyapunov() {
        let g = build_shrinking_walk(12, &[vec![0.0], vec![1.0]], 0.7, 0.8, 4.0).unwrap();
        let text = ModelFile::from_generated(&g).to_toml();
        let back = parse(&text).unwrap();
        assert_eq!(back.family, g.family);
        assert_eq!(back.v_family, g.v_family);
        assert_eq!(back.sandwich, g.sandwich);
        assert_eq!(back.individual_drift, g.individual_drift);
    }

    #[test]
    fn syntax_error_is_parse_error() {
        assert!(matches!(parse("states = ["), Err(Error::Parse { .. })));
    }
}
