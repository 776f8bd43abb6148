//! Grid sweeps over guidance settings, producing one evaluation row per
//! configuration.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, TabularWorld};
use crate::metrics::{EvalReport, CSV_COLUMNS, REPORT_KS};

use super::{
    decode_corpus, decode_params, load_lm, load_prompt_file, load_scorer, load_vocab, CliError, DecodePlan,
    EvalContext, GuidanceKind, ImageSource, DEFAULT_GAMMAS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Cfg,
    Lm,
}

fn default_alphas() -> Vec<f64> {
    vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 12.0, 15.0]
}

fn default_beta_fractions() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}

/// Sweep configuration. Relative paths resolve against the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub corpus: PathBuf,
    pub scorer: String,
    /// World used for canonical image embeddings.
    pub world: Option<PathBuf>,
    pub vocab: Option<String>,
    pub lm_scorer: Option<String>,
    pub prompt: Option<PathBuf>,
    pub embedder: String,
    pub images: Option<ImageSource>,
    pub ks: Vec<usize>,
    pub gammas: Vec<f64>,
    pub alphas: Vec<f64>,
    /// Each α is paired with `β = f·α` for every fraction `f`.
    pub beta_fractions: Vec<f64>,
    /// Additional `(α, β)` pairs, e.g. with negative β.
    pub extra_pairs: Vec<(f64, f64)>,
    /// Defaults to CFG, plus LM when an LM scorer is configured.
    pub modes: Option<Vec<Mode>>,
    pub max_length: usize,
    pub beam_width: Option<usize>,
    pub threads: Option<usize>,
    pub phrases: Option<PathBuf>,
    pub truth: Option<PathBuf>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::new(),
            scorer: String::new(),
            world: None,
            vocab: None,
            lm_scorer: None,
            prompt: None,
            embedder: "synthetic".into(),
            images: None,
            ks: REPORT_KS.to_vec(),
            gammas: DEFAULT_GAMMAS.to_vec(),
            alphas: default_alphas(),
            beta_fractions: default_beta_fractions(),
            extra_pairs: Vec::new(),
            modes: None,
            max_length: 32,
            beam_width: None,
            threads: None,
            phrases: None,
            truth: None,
        }
    }
}

/// One grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub mode: Mode,
    pub gamma: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

impl GridPoint {
    pub fn label(&self) -> String {
        match self.mode {
            Mode::Cfg => format!("cfg({})", self.gamma.unwrap_or(1.0)),
            Mode::Lm => format!("lm({},{})", self.alpha.unwrap_or(0.0), self.beta.unwrap_or(0.0)),
        }
    }
}

impl SweepConfig {
    pub fn modes(&self) -> Vec<Mode> {
        self.modes.clone().unwrap_or_else(|| {
            let mut m = vec![Mode::Cfg];
            if self.lm_scorer.is_some() {
                m.push(Mode::Lm);
            }
            m
        })
    }

    /// Grid points in output order: CFG scales, then each α with its β
    /// values, then the extra pairs.
    pub fn grid(&self) -> Vec<GridPoint> {
        let mut points = Vec::new();
        let modes = self.modes();
        if modes.contains(&Mode::Cfg) {
            points.extend(self.gammas.iter().map(|&g| GridPoint {
                mode: Mode::Cfg,
                gamma: Some(g),
                alpha: None,
                beta: None,
            }));
        }
        if modes.contains(&Mode::Lm) {
            for &a in &self.alphas {
                for &f in &self.beta_fractions {
                    points.push(GridPoint { mode: Mode::Lm, gamma: None, alpha: Some(a), beta: Some(f * a) });
                }
            }
            points.extend(self.extra_pairs.iter().map(|&(a, b)| GridPoint {
                mode: Mode::Lm,
                gamma: None,
                alpha: Some(a),
                beta: Some(b),
            }));
        }
        points
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.corpus.as_os_str().is_empty() || self.scorer.is_empty() {
            return Err(CliError::Usage("sweep needs a corpus and a scorer".into()));
        }
        let modes = self.modes();
        if modes.contains(&Mode::Cfg) && self.gammas.is_empty() {
            return Err(CliError::Usage("a CFG sweep needs at least one gamma".into()));
        }
        if modes.contains(&Mode::Lm) && self.lm_scorer.is_none() {
            return Err(CliError::Usage("an LM sweep needs lm_scorer".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: GridPoint,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
}

#[derive(Serialize)]
struct Curve<'a> {
    mode: Mode,
    /// Fixed α for LM curves.
    alpha: Option<f64>,
    points: Vec<&'a SweepRow>,
}

impl SweepOutput {
    pub fn row(&self, mode: Mode, gamma: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.point.mode == mode && r.point.gamma == Some(gamma))
    }

    /// Long format: `mode, gamma, alpha, beta` followed by the report columns.
    pub fn to_csv(&self) -> Result<String, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["mode", "gamma", "alpha", "beta"];
        header.extend(CSV_COLUMNS);
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let mode = match r.point.mode {
                Mode::Cfg => "cfg",
                Mode::Lm => "lm",
            };
            let mut rec = vec![mode.to_string(), opt(r.point.gamma), opt(r.point.alpha), opt(r.point.beta)];
            rec.extend(r.report.csv_record());
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Curves for plotting: the CFG curve over γ, and one LM curve per α.
    pub fn curves_json(&self) -> String {
        let mut curves: Vec<Curve<'_>> = Vec::new();
        for r in &self.rows {
            let alpha = match r.point.mode {
                Mode::Cfg => None,
                Mode::Lm => r.point.alpha,
            };
            match curves.iter_mut().find(|c| c.mode == r.point.mode && c.alpha == alpha) {
                Some(c) => c.points.push(r),
                None => curves.push(Curve { mode: r.point.mode, alpha, points: vec![r] }),
            }
        }
        serde_json::to_string_pretty(&serde_json::json!({ "curves": curves })).expect("curves serialize")
    }
}

/// Decodes and evaluates every grid point. Points run in parallel; rows
/// come back in grid order.
pub fn run_sweep(config: &SweepConfig) -> Result<SweepOutput, CliError> {
    config.validate()?;
    let corpus = corpus::load_corpus(&config.corpus)?;
    let world = config.world.as_deref().map(TabularWorld::load).transpose()?;
    let vocab = config.vocab.as_deref().map(load_vocab).transpose()?;
    let scorer = load_scorer(&config.scorer, vocab, config.threads.unwrap_or(1))?;
    let lm = match (&config.lm_scorer, config.modes().contains(&Mode::Lm)) {
        (Some(spec), true) => Some(load_lm(spec, Some(scorer.vocab().clone()), config.threads.unwrap_or(1))?),
        _ => None,
    };
    let prompts = config.prompt.as_deref().map(load_prompt_file).transpose()?;
    let ctx = EvalContext::new(
        &corpus,
        world.as_ref(),
        config.images,
        &config.embedder,
        config.ks.clone(),
        config.phrases.as_deref(),
        config.truth.as_deref(),
    )?;
    let params = decode_params(config.max_length, config.beam_width, 1);

    let run_point = |p: &GridPoint| -> Result<SweepRow, CliError> {
        let plan = DecodePlan {
            scorer: scorer.as_ref(),
            lm: lm.as_deref(),
            guidance: match p.mode {
                Mode::Cfg => GuidanceKind::Cfg,
                Mode::Lm => GuidanceKind::Lm,
            },
            gamma: p.gamma.unwrap_or(1.0),
            alpha: p.alpha.unwrap_or(1.0),
            beta: p.beta.unwrap_or(1.0),
            prompts: prompts.as_ref(),
            params,
            threads: None,
        };
        let lines = decode_corpus(&corpus, &plan)?;
        let candidates: Vec<String> = lines.iter().map(|l| l.text().to_owned()).collect();
        Ok(SweepRow { point: *p, report: ctx.evaluate(&p.label(), &candidates)? })
    };

    let grid = config.grid();
    let rows: Result<Vec<SweepRow>, CliError> = match config.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| CliError::Usage(e.to_string()))?
            .install(|| grid.par_iter().map(run_point).collect()),
        None => grid.par_iter().map(run_point).collect(),
    };
    Ok(SweepOutput { rows: rows? })
}

/// Loads a sweep configuration file.
pub fn load_config(path: &Path) -> Result<SweepConfig, CliError> {
    Ok(serde_json::from_str(&super::read_text(path)?)?)
}
