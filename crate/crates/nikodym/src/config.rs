//! Plain-text key=value experiment configuration with bracketed sections.
//!
//! Global keys come first, then `[metric]`, `[flow]`, `[maximal]`, `[sweep]`
//! and `[output]` sections. Unknown sections or keys are rejected with the
//! offending line number. The resolved config serializes to a canonical
//! sorted listing that artifact writers embed and hash.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::maximal::{Region, SearchSpec};
use crate::metric::{CometricModel, Geometry, Parity, PerturbationProfile};
use crate::scaling::SweepSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub threads: usize,

    // [metric]
    pub dim: usize,
    pub variant: String,
    pub base: String,
    pub curvature: f64,
    pub epsilon: f64,
    pub parity: String,
    pub delta0: f64,
    pub coeff_seed: u64,
    pub coeff_magnitude: f64,

    // [flow]
    pub step: f64,
    pub beta: f64,
    pub s_max: f64,

    // [maximal]
    pub delta: f64,
    pub grid_n: usize,
    pub region_center: Vec<f64>,
    pub region_halfwidth: f64,
    pub region_n: Vec<usize>,
    pub coarse_net: usize,
    pub n_axial: usize,
    pub n_transversal: usize,

    // [sweep]
    pub deltas: Vec<f64>,
    pub p: f64,
    pub q: f64,
    pub sweep_grid_n: usize,
    pub grid_cap: usize,

    // [output]
    pub directory: String,
    pub format: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            dim: 3,
            variant: "perturbed".into(),
            base: "flat".into(),
            curvature: 0.0,
            epsilon: 0.05,
            parity: "odd".into(),
            delta0: 0.5,
            coeff_seed: 0,
            coeff_magnitude: 0.3,
            step: 1e-3,
            beta: 0.4,
            s_max: 0.4,
            delta: 0.05,
            grid_n: 64,
            region_center: vec![0.05, 0.0, 0.0],
            region_halfwidth: 0.05,
            region_n: Vec::new(),
            coarse_net: 0,
            n_axial: 64,
            n_transversal: 16,
            deltas: vec![0.0625, 0.03125, 0.015625, 0.0078125],
            p: 2.5,
            q: 0.0,
            sweep_grid_n: 0,
            grid_cap: 256,
            directory: "out".into(),
            format: "csv".into(),
        }
    }
}

impl ExperimentConfig {
    /// Reduced-resolution five-dimensional configuration: narrower chart so
    /// the slab stays resolved at an affordable grid.
    pub fn default_5d() -> Self {
        Self {
            dim: 5,
            delta0: 0.25,
            grid_n: 32,
            sweep_grid_n: 32,
            deltas: vec![0.125, 0.0625, 0.03125],
            p: 3.5,
            region_center: vec![0.05, 0.0, 0.0, 0.0, 0.0],
            coeff_magnitude: 0.3,
            coeff_seed: 3,
            ..Self::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut region_center_set = false;
        let mut coeff_seed_set = false;
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = lineno + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or(Error::ConfigParse {
                    line: lineno,
                    message: "unterminated section header".into(),
                })?;
                match name {
                    "metric" | "flow" | "maximal" | "sweep" | "output" => {
                        section = name.to_string();
                    }
                    other => {
                        return Err(Error::ConfigParse {
                            line: lineno,
                            message: format!("unknown section [{other}]"),
                        })
                    }
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::ConfigParse {
                line: lineno,
                message: "expected key = value".into(),
            })?;
            let key = key.trim();
            let value = value.trim();
            let err = |message: String| Error::ConfigParse { line: lineno, message };
            let parse_f64 = |v: &str| {
                v.parse::<f64>()
                    .map_err(|_| err(format!("invalid number '{v}'")))
            };
            let parse_usize = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| err(format!("invalid integer '{v}'")))
            };
            let parse_f64_list = |v: &str| -> Result<Vec<f64>> {
                v.split(',')
                    .map(|t| {
                        t.trim()
                            .parse::<f64>()
                            .map_err(|_| err(format!("invalid number '{t}'")))
                    })
                    .collect()
            };
            let parse_usize_list = |v: &str| -> Result<Vec<usize>> {
                v.split(',')
                    .map(|t| {
                        t.trim()
                            .parse::<usize>()
                            .map_err(|_| err(format!("invalid integer '{t}'")))
                    })
                    .collect()
            };
            match (section.as_str(), key) {
                ("", "seed") => cfg.seed = value.parse().map_err(|_| err("invalid seed".into()))?,
                ("", "threads") => cfg.threads = parse_usize(value)?,
                ("metric", "dim") => cfg.dim = parse_usize(value)?,
                ("metric", "variant") => cfg.variant = value.to_string(),
                ("metric", "base") => cfg.base = value.to_string(),
                ("metric", "curvature") => cfg.curvature = parse_f64(value)?,
                ("metric", "epsilon") => cfg.epsilon = parse_f64(value)?,
                ("metric", "parity") => cfg.parity = value.to_string(),
                ("metric", "delta0") => cfg.delta0 = parse_f64(value)?,
                ("metric", "coeff_seed") => {
                    cfg.coeff_seed = value.parse().map_err(|_| err("invalid seed".into()))?;
                    coeff_seed_set = true;
                }
                ("metric", "coeff_magnitude") => cfg.coeff_magnitude = parse_f64(value)?,
                ("flow", "step") => cfg.step = parse_f64(value)?,
                ("flow", "beta") => cfg.beta = parse_f64(value)?,
                ("flow", "s_max") => cfg.s_max = parse_f64(value)?,
                ("maximal", "delta") => cfg.delta = parse_f64(value)?,
                ("maximal", "grid_n") => cfg.grid_n = parse_usize(value)?,
                ("maximal", "region_center") => {
                    cfg.region_center = parse_f64_list(value)?;
                    region_center_set = true;
                }
                ("maximal", "region_halfwidth") => cfg.region_halfwidth = parse_f64(value)?,
                ("maximal", "region_n") => cfg.region_n = parse_usize_list(value)?,
                ("maximal", "coarse_net") => cfg.coarse_net = parse_usize(value)?,
                ("maximal", "n_axial") => cfg.n_axial = parse_usize(value)?,
                ("maximal", "n_transversal") => cfg.n_transversal = parse_usize(value)?,
                ("sweep", "deltas") => cfg.deltas = parse_f64_list(value)?,
                ("sweep", "p") => cfg.p = parse_f64(value)?,
                ("sweep", "q") => cfg.q = parse_f64(value)?,
                ("sweep", "grid_n") => cfg.sweep_grid_n = parse_usize(value)?,
                ("sweep", "grid_cap") => cfg.grid_cap = parse_usize(value)?,
                ("output", "directory") => cfg.directory = value.to_string(),
                ("output", "format") => cfg.format = value.to_string(),
                (sec, key) => {
                    return Err(err(if sec.is_empty() {
                        format!("unknown global key '{key}'")
                    } else {
                        format!("unknown key '{key}' in section [{sec}]")
                    }))
                }
            }
        }
        if !region_center_set && cfg.dim != cfg.region_center.len() {
            let mut c = vec![0.0; cfg.dim];
            c[0] = 0.05;
            cfg.region_center = c;
        }
        // One master seed: the synthetic-coefficient seed follows it unless
        // pinned explicitly.
        if !coeff_seed_set {
            cfg.coeff_seed = cfg.seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let geom = Geometry::new(self.dim).map_err(|e| Error::Usage(e.to_string()))?;
        let want = geom.parity();
        let stated = match self.parity.as_str() {
            "odd" => Parity::Odd,
            "even" => Parity::Even,
            other => return Err(Error::Usage(format!("unknown parity '{other}'"))),
        };
        if stated != want {
            return Err(Error::Usage(format!(
                "parity '{}' is inconsistent with dim {}",
                self.parity, self.dim
            )));
        }
        if self.region_center.len() != self.dim {
            return Err(Error::Usage("region_center dimension mismatch".into()));
        }
        if !matches!(self.variant.as_str(), "flat" | "constant-curvature" | "taylor" | "perturbed")
        {
            return Err(Error::Usage(format!("unknown variant '{}'", self.variant)));
        }
        if !matches!(self.base.as_str(), "flat" | "constant-curvature" | "taylor") {
            return Err(Error::Usage(format!("unknown base '{}'", self.base)));
        }
        if !matches!(self.format.as_str(), "csv") {
            return Err(Error::Usage(format!("unknown output format '{}'", self.format)));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Build the configured cometric model.
    pub fn build_model(&self) -> Result<CometricModel> {
        let base = |kind: &str| -> Result<CometricModel> {
            match kind {
                "flat" => CometricModel::flat(self.dim, self.delta0),
                "constant-curvature" => {
                    CometricModel::constant_curvature(self.dim, self.curvature, self.delta0)
                }
                "taylor" => CometricModel::synthetic_taylor(
                    self.dim,
                    self.delta0,
                    self.coeff_seed,
                    self.coeff_magnitude,
                ),
                other => Err(Error::Usage(format!("unknown model kind '{other}'"))),
            }
        };
        match self.variant.as_str() {
            "perturbed" => {
                let geom = Geometry::new(self.dim)?;
                crate::metric::build_perturbed(
                    base(&self.base)?,
                    PerturbationProfile::new(self.epsilon)?,
                    geom.parity(),
                )
            }
            kind => base(kind),
        }
    }

    /// Region grid resolution per axis: explicit when configured, otherwise
    /// three cells per tangential axis and the center plane in each normal
    /// axis (the concentration slice carries the evaluation).
    pub fn resolved_region_n(&self) -> Result<Vec<usize>> {
        let geom = Geometry::new(self.dim)?;
        if !self.region_n.is_empty() {
            if self.region_n.len() == 1 {
                return Ok(vec![self.region_n[0]; self.dim]);
            }
            if self.region_n.len() != self.dim {
                return Err(Error::Usage("region_n must have one entry or dim entries".into()));
            }
            return Ok(self.region_n.clone());
        }
        let mut n = vec![3usize; self.dim];
        for k in geom.normal_slots() {
            n[k] = 1;
        }
        Ok(n)
    }

    pub fn build_region(&self) -> Result<Region> {
        Region::new(
            self.region_center.clone(),
            self.region_halfwidth,
            self.resolved_region_n()?,
        )
    }

    pub fn build_search(&self) -> SearchSpec {
        SearchSpec { coarse: self.coarse_net, ..Default::default() }
    }

    pub fn build_sweep(&self) -> Result<SweepSpec> {
        Ok(SweepSpec {
            deltas: self.deltas.clone(),
            p: self.p,
            q: self.q,
            grid_n: self.sweep_grid_n,
            grid_cap: self.grid_cap,
            region: self.build_region()?,
            beta: self.beta,
            n_axial: self.n_axial,
            n_transversal: self.n_transversal,
            search: self.build_search(),
        })
    }

    /// Canonical sorted `section.key = value` listing. Stable across runs;
    /// embedded into every artifact and hashed.
    pub fn canonical(&self) -> String {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        let fv = |v: f64| format!("{v}");
        map.insert("seed".into(), self.seed.to_string());
        map.insert("threads".into(), self.threads.to_string());
        map.insert("metric.dim".into(), self.dim.to_string());
        map.insert("metric.variant".into(), self.variant.clone());
        map.insert("metric.base".into(), self.base.clone());
        map.insert("metric.curvature".into(), fv(self.curvature));
        map.insert("metric.epsilon".into(), fv(self.epsilon));
        map.insert("metric.parity".into(), self.parity.clone());
        map.insert("metric.delta0".into(), fv(self.delta0));
        map.insert("metric.coeff_seed".into(), self.coeff_seed.to_string());
        map.insert("metric.coeff_magnitude".into(), fv(self.coeff_magnitude));
        map.insert("flow.step".into(), fv(self.step));
        map.insert("flow.beta".into(), fv(self.beta));
        map.insert("flow.s_max".into(), fv(self.s_max));
        map.insert("maximal.delta".into(), fv(self.delta));
        map.insert("maximal.grid_n".into(), self.grid_n.to_string());
        map.insert(
            "maximal.region_center".into(),
            self.region_center
                .iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert("maximal.region_halfwidth".into(), fv(self.region_halfwidth));
        map.insert(
            "maximal.region_n".into(),
            self.resolved_region_n()
                .unwrap_or_default()
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert("maximal.coarse_net".into(), self.coarse_net.to_string());
        map.insert("maximal.n_axial".into(), self.n_axial.to_string());
        map.insert("maximal.n_transversal".into(), self.n_transversal.to_string());
        map.insert(
            "sweep.deltas".into(),
            self.deltas.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(","),
        );
        map.insert("sweep.p".into(), fv(self.p));
        map.insert("sweep.q".into(), fv(self.q));
        map.insert("sweep.grid_n".into(), self.sweep_grid_n.to_string());
        map.insert("sweep.grid_cap".into(), self.grid_cap.to_string());
        map.insert("output.directory".into(), self.directory.clone());
        map.insert("output.format".into(), self.format.clone());
        map.into_iter()
            .map(|(k, v)| format!("{k} = {v}"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}
