use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptive::{Mode, RefinePolicy};
use crate::grf::PriorParams;
use crate::pde::ProblemId;

use super::ExperimentError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruthKind {
    /// Prior draw with more modes than are inverted.
    Idd,
    /// Coefficients uniform on `[−w, w]`.
    Ood,
    /// The problem's fixed analytic truth (source field or location).
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthConfig {
    pub kind: TruthKind,
    /// KL modes used to generate the truth.
    pub n_modes: usize,
    pub ood_half_width: f64,
    /// Source location for the heat-loc problem.
    pub location: [f64; 2],
}

impl Default for TruthConfig {
    fn default() -> Self {
        Self {
            kind: TruthKind::Idd,
            n_modes: 64,
            ood_half_width: 20.0,
            location: [0.2, 0.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UkiSection {
    /// Defaults to 1 for δ ≤ 0.01 and 0.5 otherwise.
    pub alpha: Option<f64>,
    /// Iterations of the full-order and direct-surrogate runs.
    pub t_fem: usize,
    /// `C₀ = c0_std² I`.
    pub c0_std: f64,
    /// Fixed initial mean; the prior mean when absent.
    pub init: Option<Vec<f64>>,
    /// When positive and no `init` is given, the initial mean is drawn
    /// from `N(0, init_std² I)`.
    pub init_std: f64,
}

impl Default for UkiSection {
    fn default() -> Self {
        Self {
            alpha: None,
            t_fem: 20,
            c0_std: 1.0,
            init: None,
            init_std: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub epsilon: f64,
    pub i_max: usize,
    pub t: usize,
    /// Defaults to 50 for δ ≤ 0.01 and 20 otherwise.
    pub q: Option<usize>,
    pub k: usize,
    pub lambda: f64,
    pub m_diag: usize,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            i_max: 10,
            t: 10,
            q: None,
            k: 2000,
            lambda: 1.0,
            m_diag: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub width: usize,
    pub depth: usize,
    pub p: usize,
    /// Encoder lattice side.
    pub encoder: usize,
    pub n_prior: usize,
    pub offline_iters: usize,
    pub online_iters: usize,
    pub lr_offline: f64,
    pub lr_online: f64,
    pub batch_size: Option<usize>,
    /// Training box for the location problem.
    pub loc_box: [f64; 2],
}

impl Default for NetSection {
    fn default() -> Self {
        Self {
            width: 64,
            depth: 3,
            p: 40,
            encoder: 8,
            n_prior: 200,
            offline_iters: 20_000,
            online_iters: 2000,
            lr_offline: 1e-3,
            lr_online: 5e-4,
            batch_size: None,
            loc_box: [0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemId,
    pub scale: Scale,
    pub mode: Mode,
    pub grid: usize,
    pub n_modes: usize,
    pub delta: f64,
    pub seed: u64,
    pub prior: PriorParams,
    pub truth: TruthConfig,
    pub uki: UkiSection,
    pub policy: PolicySection,
    pub net: NetSection,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk(ProblemId::Darcy)
    }
}

impl RunConfig {
    pub fn desk(problem: ProblemId) -> Self {
        let mut cfg = Self {
            problem,
            scale: Scale::Desk,
            mode: Mode::DeeponetAdaptive,
            grid: 24,
            n_modes: 32,
            delta: 0.01,
            seed: 0,
            prior: PriorParams::default(),
            truth: TruthConfig::default(),
            uki: UkiSection::default(),
            policy: PolicySection::default(),
            net: NetSection::default(),
            output_dir: PathBuf::from("runs/latest"),
        };
        cfg.apply_problem_defaults();
        cfg
    }

    pub fn paper(problem: ProblemId) -> Self {
        let mut cfg = Self::desk(problem);
        cfg.scale = Scale::Paper;
        cfg.grid = 70;
        cfg.n_modes = 128;
        cfg.truth.n_modes = 256;
        cfg.policy.m_diag = 100;
        cfg.net = NetSection {
            width: 100,
            depth: 5,
            p: 100,
            encoder: 16,
            n_prior: 1000,
            offline_iters: 100_000,
            ..NetSection::default()
        };
        cfg.apply_problem_defaults();
        cfg
    }

    pub fn preset(name: &str, problem: ProblemId) -> Result<Self, ExperimentError> {
        match name {
            "desk" => Ok(Self::desk(problem)),
            "paper" => Ok(Self::paper(problem)),
            other => Err(ExperimentError::Config(format!("unknown preset {other:?}"))),
        }
    }

    fn apply_problem_defaults(&mut self) {
        match self.problem {
            ProblemId::HeatLoc => {
                self.truth.kind = TruthKind::Fixed;
                self.uki.init = Some(vec![0.6, 0.6]);
                self.uki.c0_std = 0.05;
                if self.scale == Scale::Desk {
                    self.grid = 21;
                    self.net.width = 32;
                    self.net.p = 20;
                    self.net.n_prior = 200;
                    self.net.offline_iters = 10_000;
                    self.net.online_iters = 500;
                } else {
                    self.net.n_prior = 500;
                }
            }
            ProblemId::HeatField => self.truth.kind = TruthKind::Fixed,
            ProblemId::ReactionDiffusion => self.truth.kind = TruthKind::Ood,
            ProblemId::Darcy => {}
        }
    }

    pub fn alpha(&self) -> f64 {
        self.uki.alpha.unwrap_or(if self.delta <= 0.01 { 1.0 } else { 0.5 })
    }

    pub fn q(&self) -> usize {
        self.policy.q.unwrap_or(if self.delta <= 0.01 { 50 } else { 20 })
    }

    pub fn n_params(&self) -> usize {
        match self.problem {
            ProblemId::HeatLoc => 2,
            _ => self.n_modes,
        }
    }

    pub fn refine_policy(&self) -> RefinePolicy {
        RefinePolicy {
            epsilon: self.policy.epsilon,
            i_max: self.policy.i_max,
            t: self.policy.t,
            q: self.q(),
            k: self.policy.k,
            lambda: self.policy.lambda,
            m_diag: self.policy.m_diag,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.to_string()));
        if self.grid < 3 {
            return bad("grid needs at least 3 nodes per side");
        }
        if self.problem != ProblemId::HeatLoc && self.n_modes == 0 {
            return bad("n_modes must be positive");
        }
        if !(self.delta >= 0.0) {
            return bad("delta must be non-negative");
        }
        let a = self.alpha();
        if !(a > 0.0 && a <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if self.uki.t_fem == 0 || !(self.uki.c0_std > 0.0) {
            return bad("t_fem and c0_std must be positive");
        }
        if let Some(init) = &self.uki.init {
            if init.len() != self.n_params() {
                return bad("uki.init length differs from the parameter dimension");
            }
        }
        if self.truth.kind == TruthKind::Idd && self.problem != ProblemId::HeatLoc && self.truth.n_modes < self.n_modes {
            return bad("truth.n_modes must be at least n_modes");
        }
        if self.net.n_prior == 0 || self.net.p == 0 || self.net.width == 0 {
            return bad("network sizes and n_prior must be positive");
        }
        self.refine_policy().validate().map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        // a `preset` key selects the base the file is applied on top of
        let value: toml::Table = text.parse().map_err(|e: toml::de::Error| ExperimentError::Config(e.to_string()))?;
        let problem = match value.get("problem").and_then(|v| v.as_str()) {
            Some(p) => p.parse::<ProblemId>().map_err(ExperimentError::Config)?,
            None => ProblemId::Darcy,
        };
        let preset = value.get("preset").and_then(|v| v.as_str()).unwrap_or("desk").to_string();
        let mut base = toml::Table::try_from(Self::preset(&preset, problem)?).map_err(|e| ExperimentError::Config(e.to_string()))?;
        let mut overlay = value;
        overlay.remove("preset");
        merge(&mut base, overlay);
        toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| ExperimentError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key.path=value`, where the value is parsed as TOML and
    /// falls back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ExperimentError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| ExperimentError::Config(format!("override {assignment:?} is not key=value")))?;
        let parsed: toml::Value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut table = toml::Table::try_from(&*self).map_err(|e| ExperimentError::Config(e.to_string()))?;
        let parts: Vec<&str> = key.trim().split('.').collect();
        let mut cur = &mut table;
        for p in &parts[..parts.len() - 1] {
            cur = cur
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| ExperimentError::Config(format!("{key}: {p} is not a section")))?;
        }
        cur.insert(parts[parts.len() - 1].to_string(), parsed);
        *self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ExperimentError::Config(format!("{key}: {e}")))?;
        Ok(())
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
