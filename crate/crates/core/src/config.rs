//! Project configuration: a line-oriented text format with `[section]`
//! headers and `key = value` pairs; expressions are quoted strings in the
//! expression grammar. The same structure round-trips through
//! [`emit_config`] and [`parse_config`].

use std::collections::BTreeMap;

use thiserror::Error;

use crate::expr::{parse as parse_expr, Expr};
use crate::symmat::ExprMatrix;

#[derive(Debug, Error)]
#[error("{path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

fn err(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    pub coord_names: Vec<String>,
    pub vel_names: Vec<String>,
    pub input_names: Vec<String>,
    pub metric: ExprMatrix,
    pub potential: Expr,
    pub input_matrix: ExprMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromotionConfig {
    /// `(input name, coordinate name)` pairs.
    pub pairs: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatConfig {
    pub outputs: Vec<Expr>,
    /// User-supplied configuration parameterization in jet variables.
    pub coord_map: Vec<Expr>,
    /// Flat-output values of the reference equilibrium used in analysis.
    pub equilibrium_output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub newton_tolerance: f64,
    pub dt: f64,
    pub boundary_order: usize,
    pub max_order: usize,
    pub ball_radius: f64,
    pub ball_samples: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            newton_tolerance: 1e-10,
            dt: 1e-3,
            boundary_order: 5,
            max_order: 6,
            ball_radius: 1e-2,
            ball_samples: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub equilibria: BTreeMap<String, Vec<f64>>,
    pub start: String,
    pub end: String,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectConfig {
    pub system: SystemConfig,
    pub promotion: PromotionConfig,
    pub flat: FlatConfig,
    pub solver: SolverConfig,
    pub scenario: ScenarioConfig,
}

impl ProjectConfig {
    pub fn p(&self) -> usize {
        self.system.coord_names.len()
    }

    pub fn m(&self) -> usize {
        self.system.input_names.len()
    }

    /// Promotion pairs resolved to `(input index, coordinate index)`.
    pub fn promotion_indices(&self) -> Result<Vec<(usize, usize)>, ConfigError> {
        self.promotion
            .pairs
            .iter()
            .enumerate()
            .map(|(n, (input, coord))| {
                let i = self
                    .system
                    .input_names
                    .iter()
                    .position(|x| x == input)
                    .ok_or_else(|| {
                        err(
                            format!("promotion.promote_{}", n + 1),
                            format!("unknown input `{input}`"),
                        )
                    })?;
                let c = self
                    .system
                    .coord_names
                    .iter()
                    .position(|x| x == coord)
                    .ok_or_else(|| {
                        err(
                            format!("promotion.promote_{}", n + 1),
                            format!("unknown coordinate `{coord}`"),
                        )
                    })?;
                Ok((i, c))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = self.p();
        let m = self.m();
        if p == 0 {
            return Err(err("system.q", "no configuration variables"));
        }
        if self.system.vel_names.len() != p {
            return Err(err("system.v", format!("expected {p} velocity names")));
        }
        if m == 0 {
            return Err(err("system.u", "no inputs"));
        }
        if self.system.metric.len() != p
            || self.system.metric.iter().any(|row| row.len() != p)
        {
            return Err(err("system.metric", format!("expected a {p}x{p} matrix")));
        }
        if self.system.input_matrix.len() != p
            || self.system.input_matrix.iter().any(|row| row.len() != m)
        {
            return Err(err("system.G", format!("expected a {p}x{m} matrix")));
        }
        let coord_ok = |e: &Expr, path: String| -> Result<(), ConfigError> {
            for v in e.free_vars() {
                if !self.system.coord_names.contains(&v) {
                    return Err(err(path.clone(), format!("unknown variable `{v}`")));
                }
            }
            Ok(())
        };
        for (i, row) in self.system.metric.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                coord_ok(e, format!("system.metric_{}_{}", i + 1, j + 1))?;
            }
        }
        for (i, row) in self.system.input_matrix.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                coord_ok(e, format!("system.G_{}_{}", i + 1, j + 1))?;
            }
        }
        coord_ok(&self.system.potential, "system.potential".into())?;
        self.promotion_indices()?;
        if self.flat.outputs.len() != m {
            return Err(err("flat.y", format!("expected {m} flat output components")));
        }
        for (j, e) in self.flat.outputs.iter().enumerate() {
            coord_ok(e, format!("flat.y_{}", j + 1))?;
        }
        if self.flat.coord_map.len() != p {
            return Err(err("flat.Fq", format!("expected {p} parameterization rows")));
        }
        for (i, e) in self.flat.coord_map.iter().enumerate() {
            for v in e.free_vars() {
                match crate::jets::parse_jet_var(&v) {
                    Some((j, _)) if j >= 1 && j <= m => {}
                    _ => {
                        return Err(err(
                            format!("flat.Fq_{}", i + 1),
                            format!("`{v}` is not a jet variable of {m} outputs"),
                        ))
                    }
                }
            }
        }
        if self.flat.equilibrium_output.len() != m {
            return Err(err("flat.ys", format!("expected {m} values")));
        }
        for (name, values) in &self.scenario.equilibria {
            if values.len() != m {
                return Err(err(
                    format!("scenario.eq_{name}"),
                    format!("expected {m} flat-output values"),
                ));
            }
        }
        for (key, name) in [("start", &self.scenario.start), ("end", &self.scenario.end)] {
            if !self.scenario.equilibria.contains_key(name) {
                return Err(err(
                    format!("scenario.{key}"),
                    format!("unknown equilibrium `{name}`"),
                ));
            }
        }
        if !(self.scenario.duration > 0.0) {
            return Err(err("scenario.T", "duration must be positive"));
        }
        if !(self.solver.dt > 0.0) {
            return Err(err("solver.dt", "step must be positive"));
        }
        if self.solver.boundary_order == 0 {
            return Err(err("solver.boundary_order", "must be at least 1"));
        }
        Ok(())
    }
}

pub fn parse_config(text: &str) -> Result<ProjectConfig, ConfigError> {
    let mut sections: BTreeMap<String, Vec<(String, String, usize)>> = BTreeMap::new();
    let mut current = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            current = name.trim().to_string();
            sections.entry(current.clone()).or_default();
            continue;
        }
        if current.is_empty() {
            return Err(err(
                format!("line {}", lineno + 1),
                "key outside of any [section]",
            ));
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            err(format!("line {}", lineno + 1), "expected `key = value`")
        })?;
        sections.get_mut(&current).unwrap().push((
            key.trim().to_string(),
            value.trim().to_string(),
            lineno + 1,
        ));
    }

    let get_section = |name: &str| -> Result<&Vec<(String, String, usize)>, ConfigError> {
        sections
            .get(name)
            .ok_or_else(|| err(name, "missing section"))
    };

    let system = parse_system(get_section("system")?)?;
    let p = system.coord_names.len();
    let m = system.input_names.len();
    let promotion = parse_promotion(sections.get("promotion"))?;
    let flat = parse_flat(get_section("flat")?, p, m)?;
    let solver = parse_solver(sections.get("solver"))?;
    let scenario = parse_scenario(get_section("scenario")?)?;
    let config = ProjectConfig {
        system,
        promotion,
        flat,
        solver,
        scenario,
    };
    config.validate()?;
    Ok(config)
}

fn lookup<'a>(entries: &'a [(String, String, usize)], key: &str) -> Option<&'a str> {
    entries
        .iter()
        .find(|(k, _, _)| k == key)
        .map(|(_, v, _)| v.as_str())
}

fn require<'a>(
    entries: &'a [(String, String, usize)],
    section: &str,
    key: &str,
) -> Result<&'a str, ConfigError> {
    lookup(entries, key).ok_or_else(|| err(format!("{section}.{key}"), "missing key"))
}

fn parse_names(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn parse_floats(value: &str, path: &str) -> Result<Vec<f64>, ConfigError> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| err(path, format!("invalid number `{}`", s.trim())))
        })
        .collect()
}

fn parse_quoted_expr(value: &str, path: &str) -> Result<Expr, ConfigError> {
    let inner = value
        .strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .ok_or_else(|| err(path, "expression must be quoted"))?;
    parse_expr(inner).map_err(|e| err(path, e.to_string()))
}

fn parse_matrix(
    entries: &[(String, String, usize)],
    section: &str,
    prefix: &str,
    rows: usize,
    cols: usize,
) -> Result<ExprMatrix, ConfigError> {
    let mut matrix: ExprMatrix = vec![vec![Expr::zero(); cols]; rows];
    for (key, value, _) in entries {
        if let Some(rest) = key.strip_prefix(prefix) {
            let path = format!("{section}.{key}");
            let parts: Vec<&str> = rest.split('_').collect();
            if parts.len() != 2 {
                return Err(err(path, "expected indices like `_1_2`"));
            }
            let i: usize = parts[0]
                .parse()
                .map_err(|_| err(path.clone(), "bad row index"))?;
            let j: usize = parts[1]
                .parse()
                .map_err(|_| err(path.clone(), "bad column index"))?;
            if i == 0 || i > rows || j == 0 || j > cols {
                return Err(err(path, format!("index out of range for {rows}x{cols}")));
            }
            matrix[i - 1][j - 1] = parse_quoted_expr(value, &path)?;
        }
    }
    Ok(matrix)
}

fn parse_system(entries: &[(String, String, usize)]) -> Result<SystemConfig, ConfigError> {
    let coord_names = parse_names(require(entries, "system", "q")?);
    let vel_names = parse_names(require(entries, "system", "v")?);
    let input_names = parse_names(require(entries, "system", "u")?);
    let p = coord_names.len();
    let m = input_names.len();
    if let Some(value) = lookup(entries, "p") {
        if value.parse::<usize>().ok() != Some(p) {
            return Err(err("system.p", format!("inconsistent with {} names in q", p)));
        }
    }
    if let Some(value) = lookup(entries, "m") {
        if value.parse::<usize>().ok() != Some(m) {
            return Err(err("system.m", format!("inconsistent with {} names in u", m)));
        }
    }
    let metric = parse_matrix(entries, "system", "metric_", p, p)?;
    let input_matrix = parse_matrix(entries, "system", "G_", p, m)?;
    let potential = parse_quoted_expr(require(entries, "system", "potential")?, "system.potential")?;
    Ok(SystemConfig {
        coord_names,
        vel_names,
        input_names,
        metric,
        potential,
        input_matrix,
    })
}

fn parse_promotion(
    entries: Option<&Vec<(String, String, usize)>>,
) -> Result<PromotionConfig, ConfigError> {
    let mut pairs = Vec::new();
    if let Some(entries) = entries {
        let mut n = 1;
        while let Some(value) = lookup(entries, &format!("promote_{n}")) {
            let path = format!("promotion.promote_{n}");
            let names = parse_names(value);
            if names.len() != 2 {
                return Err(err(path, "expected `input, coordinate`"));
            }
            pairs.push((names[0].clone(), names[1].clone()));
            n += 1;
        }
        if let Some(value) = lookup(entries, "k") {
            if value.parse::<usize>().ok() != Some(pairs.len()) {
                return Err(err(
                    "promotion.k",
                    format!("inconsistent with {} promote_* pairs", pairs.len()),
                ));
            }
        }
    }
    Ok(PromotionConfig { pairs })
}

fn parse_flat(
    entries: &[(String, String, usize)],
    p: usize,
    m: usize,
) -> Result<FlatConfig, ConfigError> {
    let mut outputs = Vec::with_capacity(m);
    for j in 1..=m {
        let key = format!("y_{j}");
        outputs.push(parse_quoted_expr(
            require(entries, "flat", &key)?,
            &format!("flat.{key}"),
        )?);
    }
    let mut coord_map = Vec::with_capacity(p);
    for i in 1..=p {
        let key = format!("Fq_{i}");
        coord_map.push(parse_quoted_expr(
            require(entries, "flat", &key)?,
            &format!("flat.{key}"),
        )?);
    }
    let equilibrium_output = parse_floats(require(entries, "flat", "ys")?, "flat.ys")?;
    Ok(FlatConfig {
        outputs,
        coord_map,
        equilibrium_output,
    })
}

fn parse_solver(
    entries: Option<&Vec<(String, String, usize)>>,
) -> Result<SolverConfig, ConfigError> {
    let mut solver = SolverConfig::default();
    if let Some(entries) = entries {
        for (key, value, lineno) in entries {
            let path = format!("solver.{key}");
            let bad = || err(path.clone(), format!("invalid value at line {lineno}"));
            match key.as_str() {
                "newton_tol" => {
                    solver.newton_tolerance = value.parse().map_err(|_| bad())?
                }
                "dt" => solver.dt = value.parse().map_err(|_| bad())?,
                "boundary_order" => {
                    solver.boundary_order = value.parse().map_err(|_| bad())?
                }
                "max_order" => solver.max_order = value.parse().map_err(|_| bad())?,
                "ball_radius" => solver.ball_radius = value.parse().map_err(|_| bad())?,
                "ball_samples" => solver.ball_samples = value.parse().map_err(|_| bad())?,
                "seed" => solver.seed = value.parse().map_err(|_| bad())?,
                _ => return Err(err(path, "unknown solver key")),
            }
        }
    }
    Ok(solver)
}

fn parse_scenario(entries: &[(String, String, usize)]) -> Result<ScenarioConfig, ConfigError> {
    let mut equilibria = BTreeMap::new();
    for (key, value, _) in entries {
        if let Some(name) = key.strip_prefix("eq_") {
            equilibria.insert(
                name.to_string(),
                parse_floats(value, &format!("scenario.{key}"))?,
            );
        }
    }
    let start = require(entries, "scenario", "start")?.to_string();
    let end = require(entries, "scenario", "end")?.to_string();
    let duration: f64 = require(entries, "scenario", "T")?
        .parse()
        .map_err(|_| err("scenario.T", "invalid number"))?;
    Ok(ScenarioConfig {
        equilibria,
        start,
        end,
        duration,
    })
}

/// Emit the effective configuration; `parse_config` on the result yields an
/// equivalent configuration.
pub fn emit_config(config: &ProjectConfig) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let s = &config.system;
    writeln!(out, "[system]").unwrap();
    writeln!(out, "p = {}", config.p()).unwrap();
    writeln!(out, "m = {}", config.m()).unwrap();
    writeln!(out, "q = {}", s.coord_names.join(", ")).unwrap();
    writeln!(out, "v = {}", s.vel_names.join(", ")).unwrap();
    writeln!(out, "u = {}", s.input_names.join(", ")).unwrap();
    for (i, row) in s.metric.iter().enumerate() {
        for (j, e) in row.iter().enumerate() {
            if !e.is_zero() {
                writeln!(out, "metric_{}_{} = \"{}\"", i + 1, j + 1, e).unwrap();
            }
        }
    }
    writeln!(out, "potential = \"{}\"", s.potential).unwrap();
    for (i, row) in s.input_matrix.iter().enumerate() {
        for (j, e) in row.iter().enumerate() {
            if !e.is_zero() {
                writeln!(out, "G_{}_{} = \"{}\"", i + 1, j + 1, e).unwrap();
            }
        }
    }
    writeln!(out).unwrap();
    writeln!(out, "[promotion]").unwrap();
    writeln!(out, "k = {}", config.promotion.pairs.len()).unwrap();
    for (n, (input, coord)) in config.promotion.pairs.iter().enumerate() {
        writeln!(out, "promote_{} = {}, {}", n + 1, input, coord).unwrap();
    }
    writeln!(out).unwrap();
    writeln!(out, "[flat]").unwrap();
    for (j, e) in config.flat.outputs.iter().enumerate() {
        writeln!(out, "y_{} = \"{}\"", j + 1, e).unwrap();
    }
    for (i, e) in config.flat.coord_map.iter().enumerate() {
        writeln!(out, "Fq_{} = \"{}\"", i + 1, e).unwrap();
    }
    writeln!(out, "ys = {}", join_floats(&config.flat.equilibrium_output)).unwrap();
    writeln!(out).unwrap();
    let sol = &config.solver;
    writeln!(out, "[solver]").unwrap();
    writeln!(out, "newton_tol = {}", sol.newton_tolerance).unwrap();
    writeln!(out, "dt = {}", sol.dt).unwrap();
    writeln!(out, "boundary_order = {}", sol.boundary_order).unwrap();
    writeln!(out, "max_order = {}", sol.max_order).unwrap();
    writeln!(out, "ball_radius = {}", sol.ball_radius).unwrap();
    writeln!(out, "ball_samples = {}", sol.ball_samples).unwrap();
    writeln!(out, "seed = {}", sol.seed).unwrap();
    writeln!(out).unwrap();
    let sc = &config.scenario;
    writeln!(out, "[scenario]").unwrap();
    for (name, values) in &sc.equilibria {
        writeln!(out, "eq_{} = {}", name, join_floats(values)).unwrap();
    }
    writeln!(out, "start = {}", sc.start).unwrap();
    writeln!(out, "end = {}", sc.end).unwrap();
    writeln!(out, "T = {}", sc.duration).unwrap();
    out
}

fn join_floats(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{toy_project_config, ManipulatorScenario};

    #[test]
    fn manipulator_config_round_trips() {
        let config = ManipulatorScenario::new(Default::default()).project_config();
        config.validate().unwrap();
        let text = emit_config(&config);
        let reparsed = parse_config(&text).unwrap();
        assert_eq!(reparsed, config);
        // And a second emit is textually identical.
        assert_eq!(emit_config(&reparsed), text);
    }

    #[test]
    fn toy_config_round_trips() {
        let config = toy_project_config();
        let text = emit_config(&config);
        assert_eq!(parse_config(&text).unwrap(), config);
    }

    #[test]
    fn errors_carry_field_paths() {
        let config = ManipulatorScenario::new(Default::default()).project_config();
        let mut text = emit_config(&config);
        text = text.replace("ys = 0, 0, 0.4", "ys = 0, 0");
        let e = parse_config(&text).unwrap_err();
        assert_eq!(e.path, "flat.ys");

        let mut broken = ManipulatorScenario::new(Default::default()).project_config();
        broken.scenario.start = "nowhere".into();
        let e = broken.validate().unwrap_err();
        assert_eq!(e.path, "scenario.start");
    }

    #[test]
    fn unparsable_expression_is_reported_at_its_key() {
        let config = ManipulatorScenario::new(Default::default()).project_config();
        let text = emit_config(&config).replace(
            "potential = \"",
            "potential = \"1 + * ",
        );
        let e = parse_config(&text).unwrap_err();
        assert_eq!(e.path, "system.potential");
    }
}
