use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::RunConfig;
use super::workdir::{file_sha256, tree_sha256, Workdir, CHECKPOINTS, REPORTS};
use crate::allocation::{
    allocate, build_language_tree, cut_tree, fit_tfidf_clusters, Allocation, ClusterKind,
    ClusterModel, TfidfClusterConfig,
};
use crate::btm::{
    branch, branch_dense, branch_from, hmr_branch, merge, plan_budget, pretrain_seed, select_donor,
    train_round, BudgetPlan, ExpertManifest, ExpertScope, ExpertSet, HmrCluster, RoundConfig,
    SeedCheckpoint,
};
use crate::corpus::{load_language_features, CorpusStore, IngestConfig, LanguageTag};
use crate::error::{Error, Result};
use crate::eval::{
    emit_report, forgetting, icl_evaluate, ppl_table, EnsembleScorer, ForgettingMatrix, IclRecord,
    IclTask, PplReport, PplSources, Report, SequenceScorer, Setting,
};
use crate::inference::{FixedRouter, Router, RoutingConfig, RoutingWeights, TfidfRouter};
use crate::lm::{checkpoint, LmParams};
use crate::seeding::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleMode {
    /// The single expert covering each language.
    Top1,
    /// TF-IDF routed mixture of all experts.
    Ensemble,
}

/// Routing overrides of `eval-ensemble`; unset fields come from the config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleArgs {
    pub mode: EnsembleMode,
    pub temperature: Option<f64>,
    pub top_m: Option<usize>,
    pub stride: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Command {
    Ingest,
    Cluster,
    Plan,
    BranchTrain,
    Merge,
    EvalPpl,
    EvalEnsemble(EnsembleArgs),
    EvalForgetting,
    EvalIcl,
    AdaptHmr,
    Report,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Cluster => "cluster",
            Command::Plan => "plan",
            Command::BranchTrain => "branch-train",
            Command::Merge => "merge",
            Command::EvalPpl => "eval-ppl",
            Command::EvalEnsemble(_) => "eval-ensemble",
            Command::EvalForgetting => "eval-forgetting",
            Command::EvalIcl => "eval-icl",
            Command::AdaptHmr => "adapt-hmr",
            Command::Report => "report",
        }
    }
}

/// What a command did.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    /// Inputs and artifacts are unchanged since the last run; nothing was done.
    UpToDate,
    Ran {
        artifacts: Vec<PathBuf>,
        summary: String,
    },
}

/// Outputs of `eval-ppl`: the first-round table and, after adaptation, the
/// table over the adaptation targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplOutput {
    pub main: PplReport,
    #[serde(default)]
    pub adaptation: Option<PplReport>,
}

/// Budget of the first round, written by `plan`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOutput {
    pub experts: BudgetPlan,
    pub dense: Option<BudgetPlan>,
    pub batch_tokens: usize,
    pub steps_per_expert: u64,
}

mod files {
    pub const CORPUS: &str = "manifests/corpus.json";
    pub const MODEL: &str = "clusters/model.json";
    pub const TREE: &str = "clusters/tree.json";
    pub const ALLOCATION: &str = "clusters/allocation.json";
    pub const PLAN: &str = "manifests/plan.json";
    pub const SEED_CKPT: &str = "checkpoints/seed.ckpt";
    pub const SEED: &str = "manifests/seed.json";
    pub const EXPERTS: &str = "manifests/experts";
    pub const DENSE: &str = "manifests/dense.json";
    pub const SET: &str = "manifests/expert-set.json";
    pub const DENSE_SET: &str = "manifests/dense-set.json";
    pub const HMR_SET: &str = "manifests/expert-set-hmr.json";
    pub const LAPT_SET: &str = "manifests/dense-lapt-set.json";
    pub const PPL: &str = "reports/ppl.json";
    pub const FORGETTING: &str = "reports/forgetting.json";
    pub const ICL: &str = "reports/icl.json";
    pub const FIGURES: &str = "reports/figures";
}

/// Run one pipeline command in `workdir`. Prerequisites must have run with
/// the current config; a command whose inputs are unchanged is skipped
/// unless `force` is set.
pub fn run(command: &Command, cfg: &RunConfig, workdir: &Path, force: bool) -> Result<Outcome> {
    cfg.check_paths()?;
    fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
    let root = workdir.canonicalize().map_err(|e| Error::io(workdir, e))?;
    let wd = Workdir::create(&root)?;
    let _lock = wd.lock()?;
    let p = Pipeline { cfg, wd: &wd };
    p.check_prerequisites(command)?;
    let key = p.step_key(command);
    let fingerprint = p.fingerprint(command)?;
    write_text(&wd.path("config.json"), &cfg.to_json())?;
    if !force && wd.is_up_to_date(&key, &fingerprint)? {
        info!("{key}: up to date");
        return Ok(Outcome::UpToDate);
    }
    p.remove_previous(&key)?;
    let (artifacts, summary) = p.execute(command)?;
    wd.record(&key, fingerprint, &artifacts)?;
    Ok(Outcome::Ran { artifacts, summary })
}

struct Pipeline<'a> {
    cfg: &'a RunConfig,
    wd: &'a Workdir,
}

impl Pipeline<'_> {
    fn step_key(&self, command: &Command) -> String {
        match command {
            Command::EvalEnsemble(args) => format!("eval-ensemble:{}", self.ensemble_tag(args)),
            other => other.name().to_string(),
        }
    }

    fn prerequisites(&self, command: &Command) -> Vec<Command> {
        use Command::*;
        match command {
            Ingest => vec![],
            Cluster => vec![Ingest],
            Plan => vec![Cluster],
            BranchTrain => vec![Cluster, Plan],
            Merge => vec![BranchTrain],
            AdaptHmr | EvalEnsemble(_) | EvalForgetting | EvalIcl => vec![Merge],
            EvalPpl => {
                let mut v = vec![Merge];
                if self.cfg.hmr.is_some() {
                    v.push(AdaptHmr);
                }
                v
            }
            Report => vec![EvalPpl],
        }
    }

    /// Every prerequisite, transitively, must have run with the current
    /// config. The error names the most upstream step that needs running.
    fn check_prerequisites(&self, command: &Command) -> Result<()> {
        let manifest = self.wd.manifest()?;
        for p in self.prerequisites(command) {
            let key = self.step_key(&p);
            if !manifest.steps.contains_key(&key) {
                return Err(Error::MissingPrerequisite {
                    command: command.name().into(),
                    prerequisite: key,
                });
            }
            let upstream = self.check_prerequisites(&p).map_err(|e| match e {
                Error::MissingPrerequisite { prerequisite, .. } => Error::MissingPrerequisite {
                    command: command.name().into(),
                    prerequisite,
                },
                Error::StalePrerequisite { prerequisite, .. } => Error::StalePrerequisite {
                    command: command.name().into(),
                    prerequisite,
                },
                other => other,
            });
            upstream?;
            if !self.wd.is_up_to_date(&key, &self.fingerprint(&p)?)? {
                return Err(Error::StalePrerequisite {
                    command: command.name().into(),
                    prerequisite: key,
                });
            }
        }
        Ok(())
    }

    /// Digest of a command's own inputs and its prerequisites' fingerprints.
    fn fingerprint(&self, command: &Command) -> Result<String> {
        let mut upstream = BTreeMap::new();
        for p in self.prerequisites(command) {
            upstream.insert(self.step_key(&p), self.fingerprint(&p)?);
        }
        let doc = json!({
            "command": self.step_key(command),
            "inputs": self.own_inputs(command)?,
            "upstream": upstream,
        });
        Ok(sha256_hex(doc.to_string().as_bytes()))
    }

    fn own_inputs(&self, command: &Command) -> Result<Value> {
        let c = self.cfg;
        let mut training = serde_json::to_value(c.training)?;
        if let Some(map) = training.as_object_mut() {
            // Worker count and logging do not change results.
            map.remove("workers");
            map.remove("log_every");
        }
        let features = match &c.paths.features {
            Some(p) => Some(file_sha256(p)?),
            None => None,
        };
        Ok(match command {
            Command::Ingest => json!({
                "corpus": tree_sha256(&c.paths.corpus)?,
                "valid_fraction": c.corpus.valid_fraction,
                "split_seed": c.corpus.split_seed,
                "allow_empty_text": c.corpus.allow_empty_text,
            }),
            Command::Cluster => json!({
                "clustering": c.clustering,
                "languages": c.corpus.languages,
                "features": if c.clustering.kind == ClusterKind::Typology { features } else { None },
            }),
            Command::Plan => json!({
                "total_tokens": c.budget.total_tokens,
                "dense_baseline": c.budget.dense_baseline,
                "batch": [c.training.batch_size, c.training.seq_len],
            }),
            Command::BranchTrain => json!({
                "lm": c.lm,
                "budget": c.budget,
                "training": training,
                "seed": match &c.paths.seed { Some(p) => Some(file_sha256(p)?), None => None },
            }),
            Command::Merge | Command::EvalForgetting => json!({}),
            Command::AdaptHmr => {
                json!({ "hmr": c.hmr, "training": training, "features": features })
            }
            Command::EvalPpl => json!({ "settings": c.eval.settings, "routing": c.routing }),
            Command::EvalEnsemble(args) => {
                json!({ "args": args, "routing": self.ensemble_routing(args) })
            }
            Command::EvalIcl => {
                let tasks = c
                    .eval
                    .icl_tasks
                    .iter()
                    .map(|p| file_sha256(p))
                    .collect::<Result<Vec<_>>>()?;
                json!({
                    "tasks": tasks,
                    "shots": c.eval.icl_shots,
                    "runs": c.eval.icl_runs,
                    "seed": c.eval.icl_seed,
                    "icl": c.eval.icl,
                    "routing": c.routing,
                })
            }
            Command::Report => {
                let mut optional = BTreeMap::new();
                for p in [Command::EvalForgetting, Command::EvalIcl] {
                    if let Some(fp) = self.current_optional(&p)? {
                        optional.insert(p.name(), fp);
                    }
                }
                json!({ "optional": optional })
            }
        })
    }

    /// Fingerprint of an optional input step when it ran with the current config.
    fn current_optional(&self, command: &Command) -> Result<Option<String>> {
        let key = self.step_key(command);
        if !self.wd.manifest()?.steps.contains_key(&key) {
            return Ok(None);
        }
        if self.check_prerequisites(command).is_err() {
            return Ok(None);
        }
        let fp = self.fingerprint(command)?;
        Ok(self.wd.is_up_to_date(&key, &fp)?.then_some(fp))
    }

    /// Delete what the previous run of this step wrote, so regenerated
    /// checkpoints keep their ids.
    fn remove_previous(&self, key: &str) -> Result<()> {
        let Some(rec) = self.wd.manifest()?.steps.get(key).cloned() else {
            return Ok(());
        };
        for a in rec.artifacts {
            let p = self.wd.path(&a.path);
            if p.is_file() {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        Ok(())
    }

    fn execute(&self, command: &Command) -> Result<(Vec<PathBuf>, String)> {
        match command {
            Command::Ingest => self.ingest(),
            Command::Cluster => self.cluster(),
            Command::Plan => self.plan(),
            Command::BranchTrain => self.branch_train(),
            Command::Merge => self.merge(),
            Command::AdaptHmr => self.adapt_hmr(),
            Command::EvalPpl => self.eval_ppl(),
            Command::EvalEnsemble(args) => self.eval_ensemble(args),
            Command::EvalForgetting => self.eval_forgetting(),
            Command::EvalIcl => self.eval_icl(),
            Command::Report => self.report(),
        }
    }

    fn path(&self, relative: &str) -> PathBuf {
        self.wd.path(relative)
    }

    fn store(&self) -> Result<CorpusStore> {
        read_json(&self.path(files::CORPUS))
    }

    /// Languages of the first round.
    fn round_languages(&self, store: &CorpusStore) -> BTreeSet<LanguageTag> {
        match &self.cfg.corpus.languages {
            Some(langs) => langs.clone(),
            None => store.languages().into_iter().collect(),
        }
    }

    fn round_store(&self, store: &CorpusStore) -> CorpusStore {
        let langs = self.round_languages(store);
        store.filter_languages(|l| langs.contains(l))
    }

    fn round_config(&self, plan: BudgetPlan) -> RoundConfig {
        let t = &self.cfg.training;
        RoundConfig {
            plan,
            seq_len: t.seq_len,
            batch_size: t.batch_size,
            optimizer: t.optimizer,
            global_seed: t.global_seed,
            workers: t.workers,
            out_dir: self.path(CHECKPOINTS),
            log_every: t.log_every,
        }
    }

    fn ingest(&self) -> Result<(Vec<PathBuf>, String)> {
        let c = &self.cfg.corpus;
        let store = CorpusStore::ingest(
            &self.cfg.paths.corpus,
            &IngestConfig {
                allow_empty_text: c.allow_empty_text,
            },
        )?
        .make_split(c.valid_fraction, c.split_seed)?;
        if let Some(langs) = &c.languages {
            let present: BTreeSet<LanguageTag> = store.languages().into_iter().collect();
            if let Some(missing) = langs.iter().find(|l| !present.contains(l)) {
                return Err(Error::Config {
                    path: "corpus.languages".into(),
                    message: format!("language `{missing}` has no documents in the corpus"),
                });
            }
        }
        let path = self.path(files::CORPUS);
        write_json(&path, &store)?;
        let mut summary = format!(
            "{} documents in {} languages\n",
            store.len(),
            store.counts().len()
        );
        for (lang, n) in store.counts() {
            let _ = writeln!(
                summary,
                "  {lang}: {} documents ({} train, {} valid), {} bytes",
                n.documents, n.train_documents, n.valid_documents, n.tokens
            );
        }
        Ok((vec![path], summary))
    }

    fn cluster(&self) -> Result<(Vec<PathBuf>, String)> {
        let store = self.round_store(&self.store()?);
        let cc = self.cfg.clustering;
        let mut artifacts = Vec::new();
        let model = match cc.kind {
            ClusterKind::Typology => {
                let path = self
                    .cfg
                    .paths
                    .features
                    .as_ref()
                    .ok_or_else(|| Error::Config {
                        path: "paths.features".into(),
                        message: "typology clustering needs a feature fixture".into(),
                    })?;
                let all = load_language_features(path)?;
                let mut features = BTreeMap::new();
                for lang in store.languages() {
                    let v = all
                        .get(&lang)
                        .ok_or_else(|| Error::MissingFeature(lang.to_string()))?;
                    features.insert(lang, v.clone());
                }
                let tree = build_language_tree(&features)?;
                let tree_path = self.path(files::TREE);
                write_json(&tree_path, &tree)?;
                artifacts.push(tree_path);
                cut_tree(&tree, cc.k)?
            }
            ClusterKind::Tfidf => fit_tfidf_clusters(
                &store,
                &TfidfClusterConfig {
                    max_features: cc.max_features,
                    ..TfidfClusterConfig::new(cc.k, cc.seed)
                },
            )?,
        };
        let model_path = self.path(files::MODEL);
        model.save(&model_path)?;
        let allocation = allocate(&store, &model)?;
        let alloc_path = self.path(files::ALLOCATION);
        write_json(&alloc_path, &allocation)?;
        artifacts.extend([model_path, alloc_path]);
        let mut summary = format!("cluster model {} ({} experts)\n", model.id, model.k);
        for (lang, share) in &model.data_share {
            let cells: Vec<String> = share.iter().map(|s| format!("{s:.2}")).collect();
            let _ = writeln!(summary, "  {lang}: [{}]", cells.join(", "));
        }
        Ok((artifacts, summary))
    }

    fn plan(&self) -> Result<(Vec<PathBuf>, String)> {
        let model = ClusterModel::load(&self.path(files::MODEL))?;
        let experts = plan_budget(self.cfg.budget.total_tokens, model.k)?;
        let batch_tokens = self.cfg.training.batch_size * self.cfg.training.seq_len;
        let out = PlanOutput {
            experts,
            dense: if self.cfg.budget.dense_baseline {
                Some(plan_budget(self.cfg.budget.total_tokens, 1)?)
            } else {
                None
            },
            batch_tokens,
            steps_per_expert: experts.steps_per_expert(batch_tokens),
        };
        if out.steps_per_expert == 0 {
            return Err(Error::Config {
                path: "budget.total_tokens".into(),
                message: format!(
                    "{} tokens per expert is less than one batch of {batch_tokens}",
                    experts.per_expert_tokens
                ),
            });
        }
        let path = self.path(files::PLAN);
        write_json(&path, &out)?;
        let summary = format!(
            "{} experts x {} tokens ({} steps each), shortfall {}\n",
            experts.k, experts.per_expert_tokens, out.steps_per_expert, experts.shortfall
        );
        Ok((vec![path], summary))
    }

    fn branch_train(&self) -> Result<(Vec<PathBuf>, String)> {
        let store = self.round_store(&self.store()?);
        let model = ClusterModel::load(&self.path(files::MODEL))?;
        let allocation: Allocation = read_json(&self.path(files::ALLOCATION))?;
        let plan: PlanOutput = read_json(&self.path(files::PLAN))?;
        let mut artifacts = Vec::new();
        let mut summary = String::new();

        let seed = match &self.cfg.paths.seed {
            Some(p) => SeedCheckpoint::open("seed", p)?,
            None => {
                let path = self.path(files::SEED_CKPT);
                let cfg = self.round_config(plan_budget(self.cfg.budget.seed_tokens, 1)?);
                let (_, report) = pretrain_seed(&store, &self.cfg.lm, &cfg, &path)?;
                let _ = writeln!(
                    summary,
                    "seed: {} steps, final loss {:.3}",
                    report.steps,
                    report.loss_trace.last().map_or(f64::NAN, |l| l.loss)
                );
                artifacts.push(path.clone());
                SeedCheckpoint::open("seed", &path)?
            }
        };
        let seed_path = self.path(files::SEED);
        write_json(&seed_path, &seed)?;
        artifacts.push(seed_path);

        let ckpts = self.path(CHECKPOINTS);
        let branched = branch(&seed, model.k, &model, &ckpts)?;
        let trained = train_round(
            &store,
            Some(&allocation),
            &branched,
            &self.round_config(plan.experts),
        )?;
        for e in &trained {
            artifacts
                .extend(self.save_expert(e, &format!("{}/{}.json", files::EXPERTS, e.expert_id))?);
            let _ = writeln!(summary, "{}", expert_line(e));
        }
        if let Some(dense_plan) = plan.dense {
            let dense = branch_dense(&seed, self.round_languages(&store), &ckpts)?;
            let dense =
                train_round(&store, None, &[dense], &self.round_config(dense_plan))?.remove(0);
            artifacts.extend(self.save_expert(&dense, files::DENSE)?);
            let _ = writeln!(summary, "{}", expert_line(&dense));
        }
        Ok((artifacts, summary))
    }

    /// Write a manifest; returns it with the expert's checkpoint files.
    fn save_expert(&self, e: &ExpertManifest, manifest: &str) -> Result<Vec<PathBuf>> {
        let path = self.path(manifest);
        write_json(&path, e)?;
        let mut out = vec![path, e.checkpoint.clone()];
        if e.initial_checkpoint != e.checkpoint {
            out.push(e.initial_checkpoint.clone());
        }
        Ok(out)
    }

    fn merge(&self) -> Result<(Vec<PathBuf>, String)> {
        let seed: SeedCheckpoint = read_json(&self.path(files::SEED))?;
        let record = self
            .wd
            .manifest()?
            .steps
            .get("branch-train")
            .cloned()
            .ok_or_else(|| Error::MissingPrerequisite {
                command: "merge".into(),
                prerequisite: "branch-train".into(),
            })?;
        let prefix = format!("{}/", files::EXPERTS);
        let mut experts: Vec<ExpertManifest> = Vec::new();
        for a in record
            .artifacts
            .iter()
            .filter(|a| a.path.starts_with(&prefix))
        {
            experts.push(read_json(&self.path(&a.path))?);
        }
        experts.sort_by_key(|e| e.cluster_index);
        let set = merge(&seed, experts)?;
        let set_path = self.path(files::SET);
        set.save(&set_path)?;
        let mut artifacts = vec![set_path];
        let mut summary = format!("{} experts of {}\n", set.len(), set.cluster_model_id);
        let dense_path = self.path(files::DENSE);
        if dense_path.exists() {
            let dense = merge(&seed, vec![read_json(&dense_path)?])?;
            let p = self.path(files::DENSE_SET);
            dense.save(&p)?;
            artifacts.push(p);
            summary.push_str("dense baseline merged\n");
        }
        Ok((artifacts, summary))
    }

    fn adapt_hmr(&self) -> Result<(Vec<PathBuf>, String)> {
        let hmr = self.cfg.hmr.as_ref().ok_or_else(|| Error::Config {
            path: "hmr".into(),
            message: "no adaptation targets configured".into(),
        })?;
        if hmr.targets.is_empty() {
            return Err(Error::Config {
                path: "hmr.targets".into(),
                message: "must not be empty".into(),
            });
        }
        let store = self.store()?;
        let present: BTreeSet<LanguageTag> = store.languages().into_iter().collect();
        let seen: Vec<LanguageTag> = self.round_languages(&store).into_iter().collect();
        let features = match &self.cfg.paths.features {
            Some(p) => Some(load_language_features(p)?),
            None => None,
        };
        let mut clusters = Vec::new();
        for (i, t) in hmr.targets.iter().enumerate() {
            let first = t.languages.iter().next().ok_or_else(|| Error::Config {
                path: format!("hmr.targets[{i}].languages"),
                message: "must not be empty".into(),
            })?;
            if let Some(l) = t.languages.iter().find(|l| !present.contains(l)) {
                return Err(Error::Config {
                    path: format!("hmr.targets[{i}].languages"),
                    message: format!("language `{l}` has no documents in the corpus"),
                });
            }
            if let Some(l) = t.languages.iter().find(|l| seen.contains(l)) {
                warn!("adaptation target `{l}` was already trained on in the first round");
            }
            let donor = match (&t.donor, &features) {
                (Some(d), _) => d.clone(),
                (None, Some(f)) => select_donor(first, &seen, f)?,
                (None, None) => {
                    return Err(Error::Config {
                        path: format!("hmr.targets[{i}].donor"),
                        message: "needed when paths.features is not set".into(),
                    })
                }
            };
            clusters.push(HmrCluster {
                targets: t.languages.clone(),
                donor,
            });
        }

        let set = ExpertSet::load(&self.path(files::SET))?;
        let ckpts = self.path(CHECKPOINTS);
        let branched = hmr_branch(&set, &clusters, &ckpts)?;
        let trained = train_round(
            &store,
            None,
            &branched,
            &self.round_config(plan_budget(hmr.total_tokens, clusters.len())?),
        )?;
        let mut artifacts = Vec::new();
        let mut summary = String::new();
        for (c, e) in clusters.iter().zip(&trained) {
            artifacts.push(e.checkpoint.clone());
            artifacts.push(e.initial_checkpoint.clone());
            let targets: Vec<&str> = c.targets.iter().map(LanguageTag::as_str).collect();
            let _ = writeln!(
                summary,
                "{} (donor {}) {}",
                targets.join("+"),
                c.donor,
                expert_line(e)
            );
        }
        let mut extended = set.clone();
        extended.extend(trained)?;
        let before = set.hashes();
        let after = extended.hashes();
        if before.iter().any(|(id, h)| after.get(id) != Some(h)) {
            return Err(Error::InvalidArgument(
                "adaptation modified an existing expert".into(),
            ));
        }
        let set_path = self.path(files::HMR_SET);
        extended.save(&set_path)?;
        artifacts.push(set_path);

        let dense_set_path = self.path(files::DENSE_SET);
        if hmr.dense_baseline && dense_set_path.exists() {
            let dense_set = ExpertSet::load(&dense_set_path)?;
            let parent = &dense_set.experts[0];
            let mut languages: BTreeSet<LanguageTag> = BTreeSet::new();
            for c in &clusters {
                languages.extend(c.targets.iter().cloned());
                languages.insert(c.donor.clone());
            }
            let lapt = branch_from(
                parent,
                &format!("dense-lapt-r{}", parent.round + 1),
                "dense-lapt",
                ExpertScope::Languages { languages },
                &ckpts,
            )?;
            let lapt = train_round(
                &store,
                None,
                &[lapt],
                &self.round_config(plan_budget(hmr.total_tokens, 1)?),
            )?
            .remove(0);
            artifacts.push(lapt.checkpoint.clone());
            artifacts.push(lapt.initial_checkpoint.clone());
            let _ = writeln!(summary, "dense baseline continued: {}", expert_line(&lapt));
            let parent_ref = SeedCheckpoint {
                id: parent.expert_id.clone(),
                checkpoint: parent.checkpoint.clone(),
                hash: parent.checkpoint_hash.clone(),
                round: parent.round,
            };
            let lapt_set = merge(&parent_ref, vec![lapt])?;
            let p = self.path(files::LAPT_SET);
            lapt_set.save(&p)?;
            artifacts.push(p);
        }
        Ok((artifacts, summary))
    }

    fn valid<'s>(
        &self,
        store: &'s CorpusStore,
        langs: &BTreeSet<LanguageTag>,
    ) -> Result<BTreeMap<LanguageTag, Vec<&'s str>>> {
        let by_lang = store.valid_by_language();
        langs
            .iter()
            .map(|l| {
                let docs: Vec<&str> = by_lang
                    .get(l)
                    .map(|d| d.iter().map(|d| d.text.as_str()).collect())
                    .unwrap_or_default();
                if docs.is_empty() {
                    return Err(Error::EmptySelection(format!(
                        "no validation documents for `{l}`"
                    )));
                }
                Ok((l.clone(), docs))
            })
            .collect()
    }

    fn load_optional_set(&self, relative: &str) -> Result<Option<ExpertSet>> {
        let p = self.path(relative);
        if p.exists() {
            Ok(Some(ExpertSet::load(&p)?))
        } else {
            Ok(None)
        }
    }

    fn eval_ppl(&self) -> Result<(Vec<PathBuf>, String)> {
        let store = self.store()?;
        let set = ExpertSet::load(&self.path(files::SET))?;
        let model = ClusterModel::load(&self.path(files::MODEL))?;
        let dense = self.load_optional_set(files::DENSE_SET)?;
        let hmr = if self.cfg.hmr.is_some() {
            self.load_optional_set(files::HMR_SET)?
        } else {
            None
        };
        let lapt = self.load_optional_set(files::LAPT_SET)?;
        let kind = self.cfg.clustering.kind;

        let mut sources = PplSources {
            seed: Some(&set.seed.checkpoint),
            dense: dense.as_ref(),
            routing: self.cfg.routing,
            ..Default::default()
        };
        match kind {
            ClusterKind::Typology => sources.typology = Some(&set),
            ClusterKind::Tfidf => sources.tfidf = Some((&set, &model)),
        }
        let requested = &self.cfg.eval.settings;
        let available = |s: Setting| match s {
            Setting::Seed => true,
            Setting::Dense => dense.is_some(),
            Setting::Typology => kind == ClusterKind::Typology,
            Setting::TfidfTop1 | Setting::TfidfEnsemble => kind == ClusterKind::Tfidf,
            Setting::Hmr => false,
        };
        let main_settings: Vec<Setting> = if requested.is_empty() {
            Setting::ALL.into_iter().filter(|&s| available(s)).collect()
        } else {
            if let Some(s) = requested
                .iter()
                .find(|&&s| s != Setting::Hmr && !available(s))
            {
                return Err(Error::Config {
                    path: "eval.settings".into(),
                    message: format!("setting `{s}` is not available for this run"),
                });
            }
            requested
                .iter()
                .copied()
                .filter(|&s| s != Setting::Hmr)
                .collect()
        };
        let valid = self.valid(&store, &self.round_languages(&store))?;
        let main = ppl_table(&sources, &valid, &main_settings)?;
        let mut summary = render_table("first round", &main);

        let adaptation = match (&hmr, &self.cfg.hmr) {
            (Some(hmr_set), Some(hc))
                if requested.is_empty() || requested.contains(&Setting::Hmr) =>
            {
                let targets: BTreeSet<LanguageTag> = hc
                    .targets
                    .iter()
                    .flat_map(|t| t.languages.iter().cloned())
                    .collect();
                let valid = self.valid(&store, &targets)?;
                let sources = PplSources {
                    seed: Some(&set.seed.checkpoint),
                    dense: lapt.as_ref(),
                    hmr: Some(hmr_set),
                    routing: self.cfg.routing,
                    ..Default::default()
                };
                let mut settings = vec![Setting::Seed];
                if lapt.is_some() {
                    settings.push(Setting::Dense);
                }
                settings.push(Setting::Hmr);
                let table = ppl_table(&sources, &valid, &settings)?;
                summary.push_str(&render_table(
                    "adaptation (dense = dense model continued on targets and donors)",
                    &table,
                ));
                Some(table)
            }
            _ => None,
        };
        let path = self.path(files::PPL);
        write_json(&path, &PplOutput { main, adaptation })?;
        Ok((vec![path], summary))
    }

    fn ensemble_routing(&self, args: &EnsembleArgs) -> RoutingConfig {
        let base = self.cfg.routing;
        RoutingConfig {
            temperature: args.temperature.unwrap_or(base.temperature),
            top_m: args.top_m.or(base.top_m),
            context_stride: args.stride.unwrap_or(base.context_stride),
        }
    }

    fn ensemble_tag(&self, args: &EnsembleArgs) -> String {
        match args.mode {
            EnsembleMode::Top1 => "top1".into(),
            EnsembleMode::Ensemble => {
                let r = self.ensemble_routing(args);
                let m = r.top_m.map_or("all".to_string(), |m| m.to_string());
                format!("ensemble-t{}-m{m}-s{}", r.temperature, r.context_stride)
            }
        }
    }

    fn eval_ensemble(&self, args: &EnsembleArgs) -> Result<(Vec<PathBuf>, String)> {
        let store = self.store()?;
        let set = ExpertSet::load(&self.path(files::SET))?;
        let model = ClusterModel::load(&self.path(files::MODEL))?;
        let routing = self.ensemble_routing(args);
        let kind = self.cfg.clustering.kind;
        let mut sources = PplSources {
            routing,
            ..Default::default()
        };
        let setting = match (args.mode, kind) {
            (EnsembleMode::Top1, ClusterKind::Typology) => {
                sources.typology = Some(&set);
                Setting::Typology
            }
            (EnsembleMode::Top1, ClusterKind::Tfidf) => {
                sources.tfidf = Some((&set, &model));
                Setting::TfidfTop1
            }
            (EnsembleMode::Ensemble, ClusterKind::Tfidf) => {
                sources.tfidf = Some((&set, &model));
                Setting::TfidfEnsemble
            }
            (EnsembleMode::Ensemble, ClusterKind::Typology) => {
                return Err(Error::InvalidArgument(
                    "ensemble routing needs TF-IDF centroids; this run clusters by typology".into(),
                ))
            }
        };
        let valid = self.valid(&store, &self.round_languages(&store))?;
        let table = ppl_table(&sources, &valid, &[setting])?;
        let path = self.path(&format!("{REPORTS}/{}.json", self.ensemble_tag(args)));
        write_json(&path, &table)?;
        Ok((vec![path], render_table(&self.ensemble_tag(args), &table)))
    }

    fn eval_forgetting(&self) -> Result<(Vec<PathBuf>, String)> {
        let store = self.store()?;
        let set = ExpertSet::load(&self.path(files::SET))?;
        let valid = self.valid(&store, &self.round_languages(&store))?;
        let matrix = forgetting(&set, &set.seed.checkpoint, &valid)?;
        let path = self.path(files::FORGETTING);
        write_json(&path, &matrix)?;
        Ok((vec![path], render_forgetting(&matrix)))
    }

    fn eval_icl(&self) -> Result<(Vec<PathBuf>, String)> {
        let e = &self.cfg.eval;
        if e.icl_tasks.is_empty() {
            return Err(Error::Config {
                path: "eval.icl_tasks".into(),
                message: "no tasks configured".into(),
            });
        }
        let tasks = e
            .icl_tasks
            .iter()
            .map(|p| read_json::<IclTask>(p))
            .collect::<Result<Vec<_>>>()?;
        let set = ExpertSet::load(&self.path(files::SET))?;
        let model = ClusterModel::load(&self.path(files::MODEL))?;
        let dense = self.load_optional_set(files::DENSE_SET)?;
        let load = |p: &Path| checkpoint::load::<f32>(p);
        let seed = load(&set.seed.checkpoint)?;
        let dense = dense.map(|d| load(&d.experts[0].checkpoint)).transpose()?;
        let members = set.experts_of(&set.cluster_model_id);
        let experts = members
            .iter()
            .map(|m| load(&m.checkpoint))
            .collect::<Result<Vec<LmParams<f32>>>>()?;
        let expert_refs: Vec<&LmParams<f32>> = experts.iter().collect();
        let tfidf_router = match self.cfg.clustering.kind {
            ClusterKind::Tfidf => Some(TfidfRouter::new(&model, self.cfg.routing)?),
            ClusterKind::Typology => None,
        };
        let uniform = FixedRouter(RoutingWeights::uniform(experts.len()));

        let mut records = Vec::new();
        let mut summary = String::new();
        for task in &tasks {
            let covering = task
                .language
                .as_ref()
                .and_then(|l| members.iter().position(|m| matches!(&m.scope, ExpertScope::Languages { languages } if languages.contains(l))));
            let router: &dyn Router = match &tfidf_router {
                Some(r) => r,
                None => &uniform,
            };
            let ensemble = EnsembleScorer {
                experts: expert_refs.clone(),
                router,
                stride: self.cfg.routing.context_stride,
            };
            let mut scorers: Vec<(String, &dyn SequenceScorer)> = vec![("seed".into(), &seed)];
            if let Some(d) = &dense {
                scorers.push(("dense".into(), d));
            }
            match (self.cfg.clustering.kind, covering) {
                (ClusterKind::Typology, Some(i)) => scorers.push(("experts".into(), &experts[i])),
                _ => scorers.push(("experts".into(), &ensemble)),
            }
            for &shots in &e.icl_shots {
                for (name, scorer) in &scorers {
                    let result =
                        icl_evaluate(*scorer, task, shots, e.icl_runs, e.icl_seed, &e.icl)?;
                    let _ = writeln!(
                        summary,
                        "{:<12} {:<8} {shots}-shot accuracy {:.3}",
                        task.name, name, result.accuracy
                    );
                    records.push(IclRecord {
                        model: name.clone(),
                        result,
                    });
                }
            }
        }
        let path = self.path(files::ICL);
        write_json(&path, &records)?;
        Ok((vec![path], summary))
    }

    fn report(&self) -> Result<(Vec<PathBuf>, String)> {
        let ppl: PplOutput = read_json(&self.path(files::PPL))?;
        let forgetting: Option<ForgettingMatrix> =
            if self.current_optional(&Command::EvalForgetting)?.is_some() {
                Some(read_json(&self.path(files::FORGETTING))?)
            } else {
                None
            };
        let icl: Vec<IclRecord> = if self.current_optional(&Command::EvalIcl)?.is_some() {
            read_json(&self.path(files::ICL))?
        } else {
            Vec::new()
        };
        let store = self.round_store(&self.store()?);
        let mut train_tokens: BTreeMap<LanguageTag, u64> = BTreeMap::new();
        for d in store.train_documents() {
            *train_tokens.entry(d.lang.clone()).or_default() += d.text.len() as u64;
        }
        // A seed given from outside has unknown pretraining data.
        let seed_tokens = if self.cfg.paths.seed.is_none() {
            train_tokens.clone()
        } else {
            BTreeMap::new()
        };
        let improvement_setting = match self.cfg.clustering.kind {
            ClusterKind::Typology => Setting::Typology,
            ClusterKind::Tfidf => Setting::TfidfTop1,
        };
        let mut tables = vec![ppl.main];
        tables.extend(ppl.adaptation);
        let report = Report {
            ppl: tables,
            forgetting,
            train_tokens,
            seed_tokens,
            improvement_setting,
            icl,
        };
        let dir = self.path(files::FIGURES);
        let artifacts = emit_report(&report, &dir)?;
        let summary = format!("{} report files in {}\n", artifacts.len(), dir.display());
        Ok((artifacts, summary))
    }
}

fn expert_line(e: &ExpertManifest) -> String {
    let loss = e
        .report
        .as_ref()
        .and_then(|r| r.loss_trace.last())
        .map_or(String::from("n/a"), |l| format!("{:.3}", l.loss));
    format!(
        "{}: {} tokens, final loss {loss}",
        e.expert_id, e.tokens_trained
    )
}

/// Plain-text table: one row per language, one column per setting.
pub fn render_table(title: &str, report: &PplReport) -> String {
    let settings = report.settings();
    let mut out = format!("{title}\n{:<10}", "language");
    for s in &settings {
        let _ = write!(out, "{:>16}", s.as_str());
    }
    out.push('\n');
    for lang in report.languages() {
        let _ = write!(out, "{:<10}", lang.as_str());
        for &s in &settings {
            match report.get(&lang, s) {
                Some(p) => {
                    let _ = write!(out, "{p:>16.3}");
                }
                None => {
                    let _ = write!(out, "{:>16}", "-");
                }
            }
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<10}", "average");
    for s in &settings {
        let _ = write!(out, "{:>16.3}", report.averages[s]);
    }
    out.push('\n');
    out
}

fn render_forgetting(m: &ForgettingMatrix) -> String {
    let s = m.summary();
    let mut out = format!(
        "{} of {} off-home cells forgot ({:.1}%)\n",
        s.forgot,
        s.cells,
        100.0 * s.fraction_forgot
    );
    for (e, id) in m.experts.iter().enumerate() {
        let cells: Vec<String> = m.delta[e].iter().map(|d| format!("{d:+.2}")).collect();
        let _ = writeln!(out, "  {id}: [{}]", cells.join(", "));
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
