use std::io::Write;
use std::path::PathBuf;

use super::config::{format_value, ExperimentConfig, SweepParameter};
use super::run::{RunArtifact, Runner};
use crate::error::{Error, Result};
use crate::forecast::{self, SkillSeries};
use crate::io::{self, Header};

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    /// One artifact per value, in input order.
    pub runs: Vec<RunArtifact>,
    pub combined: Option<PathBuf>,
}

impl SweepOutcome {
    /// `(framework@parameter=value, series)` for every point and framework.
    pub fn columns(&self) -> Vec<(String, &SkillSeries)> {
        self.runs
            .iter()
            .zip(&self.values)
            .flat_map(|(run, &v)| {
                run.skill.iter().map(move |(fw, s)| {
                    (format!("{}@{}={}", fw.label(), self.parameter.key(), format_value(self.parameter, v)), s)
                })
            })
            .collect()
    }

    pub fn write_combined<W: Write>(&self, w: W, base: &ExperimentConfig) -> Result<()> {
        let mut h = Header::new("skill");
        h.set(io::CONFIG_HASH_KEY, base.hash())
            .set("name", &base.name)
            .set("seed", base.seed)
            .set("sweep", self.parameter.key());
        for (run, &v) in self.runs.iter().zip(&self.values) {
            h.set(
                &format!("config-hash[{}={}]", self.parameter.key(), format_value(self.parameter, v)),
                &run.config_hash,
            );
        }
        forecast::write_skill_csv(w, &h, &self.columns())
    }
}

impl Runner {
    /// One run per value. All points share the nature run and the per-stage
    /// seeds of the master seed, so they differ only in the swept parameter.
    pub fn sweep(&self, base: &ExperimentConfig, parameter: SweepParameter, values: &[f64]) -> Result<SweepOutcome> {
        if values.is_empty() {
            return Err(Error::invalid("sweep needs at least one value"));
        }
        let configs = values
            .iter()
            .map(|&v| parameter.apply(base, v))
            .collect::<Result<Vec<_>>>()?;
        for c in &configs {
            c.validate()?;
        }
        self.nature(base)?;
        let out_root = self.opts.out_dir.clone();
        let runs = self.opts.exec.try_map_range(configs.len(), |i| {
            let dir = out_root
                .as_ref()
                .map(|d| d.join(format!("{}={}", parameter.key(), format_value(parameter, values[i]))));
            self.run_in(&configs[i], dir.as_deref())
        })?;
        let mut outcome = SweepOutcome {
            parameter,
            values: values.to_vec(),
            runs,
            combined: None,
        };
        if let Some(d) = &out_root {
            std::fs::create_dir_all(d)?;
            let path = d.join("sweep-skill.csv");
            let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
            outcome.write_combined(&mut w, base)?;
            w.flush()?;
            outcome.combined = Some(path);
        }
        Ok(outcome)
    }
}

/// Runs `cfg` as a sweep if it carries a sweep section, otherwise once.
pub fn run_preset(runner: &Runner, cfg: &ExperimentConfig) -> Result<Vec<RunArtifact>> {
    match &cfg.sweep {
        Some(s) => Ok(runner.sweep(cfg, s.parameter, &s.values)?.runs),
        None => Ok(vec![runner.run(cfg)?]),
    }
}

/// mRMSE at a fixed lead: one row per run label, one column per framework.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTable {
    pub lead: usize,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl EvalTable {
    pub fn get(&self, row: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|(r, _)| r == row).map(|(_, v)| v[c])
    }

    pub fn column(&self, column: &str) -> Option<Vec<f64>> {
        let c = self.columns.iter().position(|x| x == column)?;
        Some(self.rows.iter().map(|(_, v)| v[c]).collect())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# lead: {}", self.lead)?;
        writeln!(w, "run,{}", self.columns.join(","))?;
        for (label, vals) in &self.rows {
            let cells: Vec<String> = vals.iter().map(|v| io::fmt_f64(*v)).collect();
            writeln!(w, "{label},{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Tabulates labelled skill columns named `framework` or
/// `framework@run-label`. Missing combinations are NaN.
pub fn evaluate_columns(columns: &[(String, &SkillSeries)], lead: usize) -> Result<EvalTable> {
    if columns.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    if lead == 0 {
        return Err(Error::invalid("leads are recorded from 1"));
    }
    let mut frameworks: Vec<String> = Vec::new();
    let mut rows: Vec<(String, Vec<(String, f64)>)> = Vec::new();
    for (name, s) in columns {
        let max = s.leads.last().copied().unwrap_or(0);
        let value = s.at_lead(lead).ok_or_else(|| {
            if lead > max {
                Error::invalid(format!("lead {lead} exceeds the {max}-step horizon of `{name}`"))
            } else {
                Error::invalid(format!("lead {lead} is not on the sampling grid of `{name}`"))
            }
        })?;
        let (fw, run) = name.split_once('@').unwrap_or((name.as_str(), ""));
        if !frameworks.iter().any(|f| f == fw) {
            frameworks.push(fw.to_string());
        }
        match rows.iter_mut().find(|(r, _)| r == run) {
            Some((_, cells)) => cells.push((fw.to_string(), value)),
            None => rows.push((run.to_string(), vec![(fw.to_string(), value)])),
        }
    }
    let rows = rows
        .into_iter()
        .map(|(run, cells)| {
            let vals = frameworks
                .iter()
                .map(|f| cells.iter().find(|(c, _)| c == f).map_or(f64::NAN, |(_, v)| *v))
                .collect();
            (run, vals)
        })
        .collect();
    Ok(EvalTable {
        lead,
        columns: frameworks,
        rows,
    })
}

/// [`evaluate_columns`] over run artifacts, rows labelled by run name.
pub fn evaluate(runs: &[RunArtifact], lead: usize) -> Result<EvalTable> {
    let columns: Vec<(String, &SkillSeries)> = runs
        .iter()
        .flat_map(|r| {
            r.skill
                .iter()
                .map(move |(fw, s)| (format!("{}@{}", fw.label(), r.name()), s))
        })
        .collect();
    evaluate_columns(&columns, lead)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(h: usize, scale: f64) -> SkillSeries {
        SkillSeries {
            leads: (1..=h).collect(),
            mrmse: (1..=h).map(|t| t as f64 * scale).collect(),
            n_sets: 1,
            dim: 8,
        }
    }

    #[test]
    fn table_layout() {
        let a = series(100, 0.1);
        let b = series(100, 0.2);
        let c = series(100, 0.3);
        let cols = vec![
            ("LETKF-Ext@F=6".to_string(), &a),
            ("RC-Anl@F=6".to_string(), &b),
            ("LETKF-Ext@F=8".to_string(), &c),
        ];
        let t = evaluate_columns(&cols, 80).unwrap();
        assert_eq!(t.columns, vec!["LETKF-Ext", "RC-Anl"]);
        assert_eq!(t.rows.len(), 2);
        assert!((t.get("F=6", "RC-Anl").unwrap() - 16.0).abs() < 1e-12);
        assert!(t.get("F=8", "RC-Anl").unwrap().is_nan());
        let render = |t: &EvalTable| {
            let mut b = Vec::new();
            t.write_csv(&mut b).unwrap();
            b
        };
        assert_eq!(render(&evaluate_columns(&cols, 80).unwrap()), render(&t));
    }

    #[test]
    fn lead_bounds() {
        let a = series(100, 0.1);
        let cols = vec![("RC-Obs".to_string(), &a)];
        assert!(evaluate_columns(&cols, 0).is_err());
        assert!(evaluate_columns(&cols, 101).is_err());
        assert!(evaluate_columns(&cols, 100).is_ok());
        assert!(evaluate_columns(&[], 1).is_err());
    }
}
