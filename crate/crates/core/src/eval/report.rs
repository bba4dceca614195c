//! Report files written by [`emit_report`]:
//!
//! | file | rows |
//! |---|---|
//! | `report.json` | the [`Report`] itself |
//! | `summary.json` | [`ReportSummary`] |
//! | `ppl.csv` | `report,setting,experts,language,perplexity`, one per table cell |
//! | `ppl_by_k.csv` | `setting,k,language,perplexity` for top-1 settings, plus `average` rows |
//! | `improvement_vs_data.csv` | `language,train_tokens,baseline,improvement` |
//! | `forgetting.csv` | `expert,language,delta,forgot,home` |
//! | `forgetting_vs_frequency.csv` | `expert,language,seed_tokens,delta,home` |
//! | `icl.csv` | `model,task,shots,run,accuracy` |
//!
//! Files are rewritten byte-identically for identical reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::forgetting::{ForgettingMatrix, ForgettingSummary};
use super::icl::IclRecord;
use super::ppl::{PplReport, Setting};
use super::stats::spearman;
use crate::corpus::LanguageTag;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Tables for one or more expert counts.
    pub ppl: Vec<PplReport>,
    #[serde(default)]
    pub forgetting: Option<ForgettingMatrix>,
    /// Tokens per language available to the experts' training round.
    #[serde(default)]
    pub train_tokens: BTreeMap<LanguageTag, u64>,
    /// Tokens per language in the seed's pretraining data.
    #[serde(default)]
    pub seed_tokens: BTreeMap<LanguageTag, u64>,
    /// Setting whose improvements are plotted against data quantity.
    pub improvement_setting: Setting,
    #[serde(default)]
    pub icl: Vec<IclRecord>,
}

impl Default for Report {
    fn default() -> Self {
        Self {
            ppl: Vec::new(),
            forgetting: None,
            train_tokens: BTreeMap::new(),
            seed_tokens: BTreeMap::new(),
            improvement_setting: Setting::Typology,
            icl: Vec::new(),
        }
    }
}

/// One point of an improvement-versus-data series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementPoint {
    pub language: LanguageTag,
    pub train_tokens: u64,
    pub baseline: Setting,
    /// `ppl(baseline) - ppl(setting)`; positive is better.
    pub improvement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub averages: Vec<BTreeMap<Setting, f64>>,
    pub forgetting: Option<ForgettingSummary>,
    /// Spearman correlation of improvement with training tokens, per baseline.
    pub improvement_rho: BTreeMap<Setting, Option<f64>>,
    /// Spearman correlation of forgetting deltas with seed token counts.
    pub forgetting_rho: Option<f64>,
}

impl Report {
    /// Improvements of `improvement_setting` over `baseline` in the first
    /// table holding both, for languages with known token counts.
    pub fn improvements(&self, baseline: Setting) -> Vec<ImprovementPoint> {
        let Some(table) = self.ppl.iter().find(|t| {
            t.averages.contains_key(&baseline) && t.averages.contains_key(&self.improvement_setting)
        }) else {
            return Vec::new();
        };
        table
            .languages()
            .into_iter()
            .filter_map(|l| {
                let b = table.get(&l, baseline)?;
                let s = table.get(&l, self.improvement_setting)?;
                let tokens = *self.train_tokens.get(&l)?;
                Some(ImprovementPoint {
                    language: l,
                    train_tokens: tokens,
                    baseline,
                    improvement: b - s,
                })
            })
            .collect()
    }

    /// `(expert, language, seed tokens, delta, home)` for every forgetting
    /// cell whose language has a known seed token count.
    fn forgetting_points(&self) -> Vec<(&str, &LanguageTag, u64, f64, bool)> {
        let Some(m) = &self.forgetting else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for (e, id) in m.experts.iter().enumerate() {
            for (l, lang) in m.languages.iter().enumerate() {
                if let Some(&tokens) = self.seed_tokens.get(lang) {
                    out.push((id.as_str(), lang, tokens, m.delta[e][l], m.is_home(e, l)));
                }
            }
        }
        out
    }

    pub fn summary(&self) -> ReportSummary {
        let rho = |x: Vec<f64>, y: Vec<f64>| spearman(&x, &y).ok().filter(|r| r.is_finite());
        let improvement_rho = [Setting::Seed, Setting::Dense]
            .into_iter()
            .filter(|&b| b != self.improvement_setting)
            .map(|b| {
                let pts = self.improvements(b);
                (
                    b,
                    rho(
                        pts.iter().map(|p| p.train_tokens as f64).collect(),
                        pts.iter().map(|p| p.improvement).collect(),
                    ),
                )
            })
            .collect();
        let fp = self.forgetting_points();
        ReportSummary {
            averages: self.ppl.iter().map(|t| t.averages.clone()).collect(),
            forgetting: self.forgetting.as_ref().map(ForgettingMatrix::summary),
            improvement_rho,
            forgetting_rho: rho(
                fp.iter().map(|p| p.2 as f64).collect(),
                fp.iter().map(|p| p.3).collect(),
            ),
        }
    }
}

fn write_csv(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(header).map_err(|e| csv_io(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidArgument(format!("{}: {other:?}", path.display())),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write every report file into `dir` and return their paths.
pub fn emit_report(report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = |name: &str| dir.join(name);
    let mut written = Vec::new();

    write_json(&path("report.json"), report)?;
    written.push(path("report.json"));
    write_json(&path("summary.json"), &report.summary())?;
    written.push(path("summary.json"));

    let ppl_rows = report.ppl.iter().enumerate().flat_map(|(i, t)| {
        t.cells.iter().map(move |c| {
            vec![
                i.to_string(),
                c.setting.to_string(),
                t.experts
                    .get(&c.setting)
                    .map(|k| k.to_string())
                    .unwrap_or_default(),
                c.language.to_string(),
                c.perplexity.to_string(),
            ]
        })
    });
    write_csv(
        &path("ppl.csv"),
        &["report", "setting", "experts", "language", "perplexity"],
        ppl_rows,
    )?;
    written.push(path("ppl.csv"));

    let mut by_k = Vec::new();
    for t in &report.ppl {
        for setting in [Setting::TfidfTop1, Setting::Typology] {
            let (Some(k), Some(avg)) = (t.experts.get(&setting), t.averages.get(&setting)) else {
                continue;
            };
            for c in t.cells.iter().filter(|c| c.setting == setting) {
                by_k.push(vec![
                    setting.to_string(),
                    k.to_string(),
                    c.language.to_string(),
                    c.perplexity.to_string(),
                ]);
            }
            by_k.push(vec![
                setting.to_string(),
                k.to_string(),
                "average".into(),
                avg.to_string(),
            ]);
        }
    }
    write_csv(
        &path("ppl_by_k.csv"),
        &["setting", "k", "language", "perplexity"],
        by_k,
    )?;
    written.push(path("ppl_by_k.csv"));

    let improvement = [Setting::Seed, Setting::Dense]
        .into_iter()
        .filter(|&b| b != report.improvement_setting)
        .flat_map(|b| report.improvements(b))
        .map(|p| {
            vec![
                p.language.to_string(),
                p.train_tokens.to_string(),
                p.baseline.to_string(),
                p.improvement.to_string(),
            ]
        });
    write_csv(
        &path("improvement_vs_data.csv"),
        &["language", "train_tokens", "baseline", "improvement"],
        improvement,
    )?;
    written.push(path("improvement_vs_data.csv"));

    let mut forgetting_rows = Vec::new();
    if let Some(m) = &report.forgetting {
        for (e, id) in m.experts.iter().enumerate() {
            for (l, lang) in m.languages.iter().enumerate() {
                forgetting_rows.push(vec![
                    id.clone(),
                    lang.to_string(),
                    m.delta[e][l].to_string(),
                    m.forgot[e][l].to_string(),
                    m.is_home(e, l).to_string(),
                ]);
            }
        }
    }
    write_csv(
        &path("forgetting.csv"),
        &["expert", "language", "delta", "forgot", "home"],
        forgetting_rows,
    )?;
    written.push(path("forgetting.csv"));

    let frequency = report
        .forgetting_points()
        .into_iter()
        .map(|(e, l, tokens, delta, home)| {
            vec![
                e.to_string(),
                l.to_string(),
                tokens.to_string(),
                delta.to_string(),
                home.to_string(),
            ]
        });
    write_csv(
        &path("forgetting_vs_frequency.csv"),
        &["expert", "language", "seed_tokens", "delta", "home"],
        frequency,
    )?;
    written.push(path("forgetting_vs_frequency.csv"));

    let icl = report.icl.iter().flat_map(|rec| {
        let r = &rec.result;
        r.run_accuracies.iter().enumerate().map(move |(run, a)| {
            vec![
                rec.model.clone(),
                r.task.clone(),
                r.shots.to_string(),
                run.to_string(),
                a.to_string(),
            ]
        })
    });
    write_csv(
        &path("icl.csv"),
        &["model", "task", "shots", "run", "accuracy"],
        icl,
    )?;
    written.push(path("icl.csv"));
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ppl::PplCell;

    fn sample() -> Report {
        let l = |s: &str| LanguageTag::from(s);
        let mut cells = Vec::new();
        for (lang, seed, dense, typ) in [
            ("a", 10.0, 8.0, 7.0),
            ("b", 12.0, 9.0, 8.5),
            ("c", 9.0, 7.0, 6.0),
        ] {
            for (setting, p) in [
                (Setting::Seed, seed),
                (Setting::Dense, dense),
                (Setting::Typology, typ),
            ] {
                cells.push(PplCell {
                    language: l(lang),
                    setting,
                    perplexity: p,
                });
            }
        }
        let table = PplReport::from_cells(
            cells,
            [
                (Setting::Seed, 1),
                (Setting::Dense, 1),
                (Setting::Typology, 2),
            ]
            .into(),
            None,
        );
        let forgetting = ForgettingMatrix::from_perplexities(
            vec!["e0".into(), "e1".into()],
            vec![l("a"), l("b"), l("c")],
            vec![vec![l("a"), l("b")], vec![l("c")]],
            vec![10.0, 12.0, 9.0],
            &[vec![7.0, 8.5, 30.0], vec![40.0, 50.0, 6.0]],
        )
        .unwrap();
        Report {
            ppl: vec![table],
            forgetting: Some(forgetting),
            train_tokens: [(l("a"), 100), (l("b"), 300), (l("c"), 200)].into(),
            seed_tokens: [(l("a"), 1000), (l("b"), 3000), (l("c"), 2000)].into(),
            ..Report::default()
        }
    }

    fn rows(path: &Path) -> usize {
        csv::Reader::from_path(path).unwrap().records().count()
    }

    #[test]
    fn csv_rows_match_cells_and_reemission_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample();
        let files = emit_report(&r, dir.path()).unwrap();
        assert_eq!(rows(&dir.path().join("ppl.csv")), r.ppl[0].cells.len());
        assert_eq!(rows(&dir.path().join("forgetting.csv")), 6);
        assert_eq!(rows(&dir.path().join("ppl_by_k.csv")), 4);
        assert_eq!(rows(&dir.path().join("improvement_vs_data.csv")), 6);
        let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(f).unwrap()).collect();
        emit_report(&r, dir.path()).unwrap();
        let second: Vec<Vec<u8>> = files.iter().map(|f| fs::read(f).unwrap()).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn json_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample();
        emit_report(&r, dir.path()).unwrap();
        let back: Report =
            serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn summary_correlations() {
        let s = sample().summary();
        // improvements over dense: a 1.0, b 0.5, c 1.0 against tokens 100, 300, 200
        let expected = spearman(&[100.0, 300.0, 200.0], &[1.0, 0.5, 1.0]).unwrap();
        assert_eq!(s.improvement_rho[&Setting::Dense], Some(expected));
        assert_eq!(s.forgetting.unwrap().forgot, 3);
        assert!(s.forgetting_rho.is_some());
    }
}
