//! Pre-training ablation: fine-tune from scratch, after text-only, image-only
//! and joint pre-training, then evaluate each on the unseen test domain.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::Modality;
use crate::retrieval_eval::{evaluate, EvalReport};
use crate::synthdata::DatasetManifest;
use crate::trainer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Base,
    WithText,
    WithImage,
    WithBoth,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Base, Method::WithText, Method::WithImage, Method::WithBoth];

    pub fn label(self) -> &'static str {
        match self {
            Method::Base => "Base.",
            Method::WithText => "w/ Text",
            Method::WithImage => "w/ Image",
            Method::WithBoth => "w/ Text&Image",
        }
    }

    fn slug(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::WithText => "text",
            Method::WithImage => "image",
            Method::WithBoth => "both",
        }
    }

    /// Pre-training modalities; empty means no pre-training.
    pub fn modalities(self) -> &'static [Modality] {
        match self {
            Method::Base => &[],
            Method::WithText => &[Modality::Text],
            Method::WithImage => &[Modality::Image],
            Method::WithBoth => &[Modality::Image, Modality::Text],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
}

impl Scores {
    fn of(r: &EvalReport) -> Self {
        Self {
            rank1: r.rank1,
            rank5: r.rank5,
            rank10: r.rank10,
            map: r.metrics.map,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    #[serde(flatten)]
    pub scores: Scores,
    pub checkpoint_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: Method,
    pub label: String,
    /// Per-metric medians over seeds.
    pub median: Scores,
    pub runs: Vec<SeedRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub config: RunConfig,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationReport {
    pub fn row(&self, method: Method) -> &AblationRow {
        self.rows.iter().find(|r| r.method == method).expect("every method has a row")
    }

    /// Median-mAP ordering: pre-training with either modality is no worse than
    /// none, and joint pre-training is within `tol` of the better single one.
    pub fn trend_holds(&self, tol: f64) -> bool {
        let m = |k| self.row(k).median.map;
        m(Method::Base) <= m(Method::WithText)
            && m(Method::Base) <= m(Method::WithImage)
            && m(Method::WithBoth) >= m(Method::WithText).max(m(Method::WithImage)) - tol
    }

    /// Aligned text table of the medians, in percent.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<14} {:>8} {:>8} {:>8} {:>8}\n",
            "Method", "Rank-1", "Rank-5", "Rank-10", "mAP"
        );
        for r in &self.rows {
            s += &format!(
                "{:<14} {:>8.1} {:>8.1} {:>8.1} {:>8.1}\n",
                r.label,
                100.0 * r.median.rank1,
                100.0 * r.median.rank5,
                100.0 * r.median.rank10,
                100.0 * r.median.map
            );
        }
        s
    }
}

/// Runs every method for seeds `cfg.train.seed .. cfg.train.seed + seeds`.
/// Checkpoints, logs and per-run reports go under `out/seed_<s>/`; the summary
/// goes to `out/ablation.json` and `out/ablation.txt`.
pub fn run_ablation(root: &Path, cfg: &RunConfig, seeds: usize, out: &Path) -> Result<AblationReport> {
    if seeds == 0 {
        return Err(Error::Config("at least one seed is required".into()));
    }
    cfg.validate()?;
    let manifest = DatasetManifest::load(root)?;
    let seed_list: Vec<u64> = (0..seeds as u64).map(|i| cfg.train.seed + i).collect();
    let mut runs: Vec<Vec<SeedRun>> = vec![Vec::new(); Method::ALL.len()];
    for &seed in &seed_list {
        let mut run_cfg = cfg.clone();
        run_cfg.train.seed = seed;
        let dir = out.join(format!("seed_{seed}"));
        for (mi, method) in Method::ALL.into_iter().enumerate() {
            let slug = method.slug();
            let init = if method.modalities().is_empty() {
                None
            } else {
                Some(trainer::pretrain(
                    root,
                    &run_cfg,
                    method.modalities(),
                    &dir.join(format!("{slug}_pretrain.ckpt")),
                    Some(&dir.join(format!("{slug}_pretrain.jsonl"))),
                )?)
            };
            let ft = trainer::finetune(
                root,
                &run_cfg,
                init.as_ref(),
                &dir.join(format!("{slug}_finetune.ckpt")),
                Some(&dir.join(format!("{slug}_finetune.jsonl"))),
            )?;
            let report = evaluate(root, &manifest, &ft, &run_cfg)?;
            write_json(&dir.join(format!("{slug}_eval.json")), &report)?;
            runs[mi].push(SeedRun {
                seed,
                scores: Scores::of(&report),
                checkpoint_id: report.checkpoint_id.clone(),
            });
        }
    }
    let rows = Method::ALL
        .into_iter()
        .zip(runs)
        .map(|(method, runs)| {
            let med = |f: fn(&Scores) -> f64| median(&runs.iter().map(|r| f(&r.scores)).collect::<Vec<_>>());
            AblationRow {
                method,
                label: method.label().to_string(),
                median: Scores {
                    rank1: med(|s| s.rank1),
                    rank5: med(|s| s.rank5),
                    rank10: med(|s| s.rank10),
                    map: med(|s| s.map),
                },
                runs,
            }
        })
        .collect();
    let report = AblationReport {
        seeds: seed_list,
        rows,
        config: cfg.clone(),
    };
    write_json(&out.join("ablation.json"), &report)?;
    let txt = out.join("ablation.txt");
    fs::write(&txt, report.table()).map_err(|e| Error::io(&txt, e))?;
    Ok(report)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
