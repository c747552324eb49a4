//! Pipeline stages over a run directory. Each stage reuses its artifact when
//! present and produced under the current lineage, computes it when missing,
//! and refuses artifacts from a different lineage.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ced_core::ced::{rank, select, Ranking, ScoreMatrix};
use ced_core::cluster::{assign_equal, cluster_demo, retrain_one, seed_clusters, ClusterAssignment, ClusterError};
use ced_core::eval::{
    answer_options, demo_row, oracle, score_row, selection_row, task_metric, BootstrapSpec, DemoRow,
    EvalReport, OracleMode, PairTable, Policy, PolicyRow, Prediction, Selection,
};
use ced_core::gradcheck::{run_gradcheck, GradcheckReport};
use ced_core::{adapt, assemble_prompt, sample_pool, train_base, BaseModel, Example, Pool, Split, TargetModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Lineage, PipelineConfig, ScorerConfig};
use crate::error::{Error, Result};
use crate::ingest;
use crate::parallel::Workers;
use crate::report::render_text;
use crate::scorer::{score_matrix_via, BridgeProcess, TargetSpec};
use crate::store::{self, Header};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    TrainBase,
    TrainTargets,
    Cluster,
    Score,
    Select,
    Gradcheck,
    Evaluate,
    Report,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::TrainBase => "train-base",
            Stage::TrainTargets => "train-targets",
            Stage::Cluster => "cluster",
            Stage::Score => "score",
            Stage::Select => "select",
            Stage::Gradcheck => "gradcheck",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

/// What a stage did, printed by the CLI.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageOutcome {
    pub stage: &'static str,
    pub artifact: PathBuf,
    pub reused: bool,
}

/// Selection made by the CED policy for one test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub test_id: String,
    pub demo_id: String,
    pub policy: Policy,
    /// Column of the score matrix that won: a candidate id or a cluster seed id.
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub test_id: String,
    pub demo_id: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct NeighborRecord {
    test_id: String,
    candidate_id: String,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    lineage: Lineage,
    workers: Workers,
    force: bool,
    log: Vec<StageOutcome>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, force: bool) -> Result<Self> {
        cfg.validate()?;
        let lineage = cfg.lineage()?;
        let workers = Workers::new(cfg.parallelism)?;
        Ok(Pipeline {
            cfg,
            lineage,
            workers,
            force,
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn lineage(&self) -> &Lineage {
        &self.lineage
    }

    /// Outcomes of every stage touched so far, in order.
    pub fn log(&self) -> &[StageOutcome] {
        &self.log
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.cfg.paths.output_dir.join(name)
    }

    /// Runs `stage`, recomputing it when forced; prerequisites are reused.
    pub fn run_stage(&mut self, stage: Stage) -> Result<()> {
        let force = self.force;
        match stage {
            Stage::Ingest => self.ingest(force).map(drop),
            Stage::TrainBase => self.base(force).map(drop),
            Stage::TrainTargets => self.targets(force).map(drop),
            Stage::Cluster => self.clusters(force).map(drop),
            Stage::Score => self.scores(force).map(drop),
            Stage::Select => self.selections(force).map(drop),
            Stage::Gradcheck => self.gradcheck(force).map(drop),
            Stage::Evaluate => self.evaluate(force).map(drop),
            Stage::Report => self.report(force).map(drop),
        }
    }

    /// Every stage in dependency order.
    pub fn run_all(&mut self) -> Result<()> {
        let force = self.force;
        self.ingest(force)?;
        self.base(force)?;
        if self.cfg.clusters == 0 {
            self.targets(force)?;
        } else {
            self.clusters(force)?;
        }
        self.scores(force)?;
        self.selections(force)?;
        self.gradcheck(force)?;
        self.evaluate(force)?;
        self.report(force)?;
        Ok(())
    }

    fn cached<T>(
        &mut self,
        stage: Stage,
        artifact: PathBuf,
        force: bool,
        load: impl FnOnce(&Self, &Path) -> Result<T>,
        compute: impl FnOnce(&mut Self) -> Result<T>,
        save: impl FnOnce(&Self, &Path, &T) -> Result<()>,
    ) -> Result<T> {
        let reused = !force && artifact.exists();
        let value = if reused {
            load(self, &artifact)?
        } else {
            let v = compute(self)?;
            save(self, &artifact, &v)?;
            v
        };
        if !self.log.iter().any(|o| o.stage == stage.as_str()) {
            self.log.push(StageOutcome {
                stage: stage.as_str(),
                artifact,
                reused,
            });
        }
        Ok(value)
    }

    // ------------------------------------------------------------ stages

    pub fn ingest(&mut self, force: bool) -> Result<Pool> {
        self.cached(
            Stage::Ingest,
            self.path("pool.jsonl"),
            force,
            |p, path| ingest::read_pool(path, &p.lineage),
            |p| {
                let inputs: Vec<&Path> = [Some(&p.cfg.paths.pool), p.cfg.paths.dev.as_ref(), p.cfg.paths.tests.as_ref()]
                    .into_iter()
                    .flatten()
                    .map(PathBuf::as_path)
                    .collect();
                let pool = ingest::ingest(&inputs)?;
                match p.cfg.sample_per_dataset {
                    Some(n) => Ok(sample_pool(&pool, n, p.cfg.seeds.sample)?),
                    None => Ok(pool),
                }
            },
            |p, path, pool| ingest::write_pool(path, Some(&p.lineage), pool),
        )
    }

    pub fn base(&mut self, force: bool) -> Result<BaseModel> {
        let pool = self.ingest(false)?;
        self.cached(
            Stage::TrainBase,
            self.path("base.json"),
            force,
            |p, path| store::read_base(path, &p.lineage),
            |p| Ok(train_base(&pool, p.cfg.lm.settings())?),
            |p, path, base| store::write_base(path, &p.lineage, base),
        )
    }

    pub fn targets(&mut self, force: bool) -> Result<Vec<TargetModel>> {
        if self.cfg.clusters > 0 {
            return Err(Error::Config(format!(
                "train-targets trains one model per candidate, but the config sets clusters = {}; run the cluster subcommand instead",
                self.cfg.clusters
            )));
        }
        let pool = self.ingest(false)?;
        let base = self.base(false)?;
        self.cached(
            Stage::TrainTargets,
            self.path("targets"),
            force,
            |p, dir| store::read_targets(dir, &p.lineage),
            |p| {
                let cands: Vec<&Example> = pool.candidates().collect();
                let adapt_cfg = p.cfg.lm.adapt();
                p.workers.map(&cands, |ex| Ok(adapt(&base, &[*ex], &adapt_cfg)?))
            },
            |p, dir, models| store::write_targets(dir, &p.lineage, models),
        )
    }

    pub fn clusters(&mut self, force: bool) -> Result<ClusterAssignment> {
        let k = self.cfg.clusters;
        if k == 0 {
            return Err(Error::Config(
                "cluster needs clusters > 0 in the config; use train-targets for per-candidate models".into(),
            ));
        }
        let pool = self.ingest(false)?;
        let base = self.base(false)?;
        let models_dir = self.path("cluster_targets");
        let md = models_dir.clone();
        self.cached(
            Stage::Cluster,
            self.path("clusters.jsonl"),
            force,
            |p, path| {
                let a = store::read_clusters(path, &md, &p.lineage)?;
                a.validate(&pool)?;
                Ok(a)
            },
            |p| p.compute_clusters(&pool, &base, k),
            move |p, path, a| store::write_clusters(path, &models_dir, &p.lineage, a),
        )
    }

    fn compute_clusters(&self, pool: &Pool, base: &BaseModel, k: usize) -> Result<ClusterAssignment> {
        let adapt_cfg = self.cfg.lm.adapt();
        let seeds = seed_clusters(pool, k, self.cfg.seeds.cluster)?;
        let seed_models = self.workers.map(&seeds, |id| {
            let ex = pool.get(id).ok_or_else(|| ClusterError::UnknownExample(id.clone()))?;
            let mut m = adapt(base, &[ex], &adapt_cfg)?;
            m.name = id.clone();
            Ok(m)
        })?;
        let cands: Vec<&Example> = pool.candidates().collect();
        let affinity = self.score_in_process(base, &seed_models, &cands)?;
        let assignment = assign_equal(&affinity, k)?;
        let indices: Vec<usize> = (0..k).collect();
        let models = self
            .workers
            .map(&indices, |&i| Ok(retrain_one(pool, base, &assignment, i, &adapt_cfg)?))?;
        let assignment = ClusterAssignment { models, ..assignment };
        assignment.validate(pool)?;
        Ok(assignment)
    }

    fn score_in_process(&self, base: &BaseModel, models: &[TargetModel], tests: &[&Example]) -> Result<ScoreMatrix> {
        let rows = self
            .workers
            .map(tests, |t| Ok(ced_core::ced::score_row(base, models, t)?))?;
        Ok(ScoreMatrix::new(
            tests.iter().map(|t| t.id.clone()).collect(),
            models.iter().map(|m| m.name.clone()).collect(),
            rows,
        )?)
    }

    /// Models forming the columns of the selection matrix.
    fn selection_models(&mut self) -> Result<Vec<TargetModel>> {
        if self.cfg.clusters == 0 {
            self.targets(false)
        } else {
            Ok(self.clusters(false)?.models)
        }
    }

    pub fn scores(&mut self, force: bool) -> Result<ScoreMatrix> {
        let pool = self.ingest(false)?;
        let base = self.base(false)?;
        let models = self.selection_models()?;
        self.cached(
            Stage::Score,
            self.path("scores.csv"),
            force,
            |p, path| store::read_scores(path, &p.lineage),
            |p| {
                let tests: Vec<&Example> = pool.split(Split::Test).collect();
                if tests.is_empty() {
                    return Err(Error::Config("the pool has no test examples".into()));
                }
                match &p.cfg.scorer {
                    ScorerConfig::Builtin => p.score_in_process(&base, &models, &tests),
                    ScorerConfig::Bridge { command } => {
                        let mut bridge = BridgeProcess::spawn(command)?;
                        let m = bridge_matrix(&mut bridge, &pool, &models, &tests)?;
                        bridge.close()?;
                        Ok(m)
                    }
                }
            },
            |p, path, m| store::write_scores(path, &p.lineage, m),
        )
    }

    pub fn selections(&mut self, force: bool) -> Result<Vec<SelectionRecord>> {
        let pool = self.ingest(false)?;
        let matrix = self.scores(false)?;
        let assignment = if self.cfg.clusters > 0 {
            Some(self.clusters(false)?)
        } else {
            None
        };
        let out = self.cached(
            Stage::Select,
            self.path("selections.jsonl"),
            force,
            |p, path| store::read_jsonl(path, store::SELECTIONS_FORMAT, &p.lineage),
            |p| {
                let mut rng = ChaCha8Rng::seed_from_u64(p.cfg.seeds.policy);
                let mut out = Vec::with_capacity(matrix.test_ids().len());
                for tid in matrix.test_ids() {
                    let model = select(&matrix, tid)?.to_string();
                    let rec = match &assignment {
                        None => SelectionRecord {
                            test_id: tid.clone(),
                            demo_id: model.clone(),
                            policy: Policy::Ced,
                            model,
                            cluster_index: None,
                        },
                        Some(a) => {
                            let idx = a
                                .seed_ids
                                .iter()
                                .position(|s| *s == model)
                                .ok_or_else(|| Error::Config(format!("score column {model:?} is not a cluster seed")))?;
                            let demo = cluster_demo(&pool, a, idx, p.cfg.cluster_demo, &mut rng)?;
                            SelectionRecord {
                                test_id: tid.clone(),
                                demo_id: demo.id.clone(),
                                policy: Policy::ClusterCed,
                                model,
                                cluster_index: Some(idx),
                            }
                        }
                    };
                    out.push(rec);
                }
                Ok(out)
            },
            |p, path, sel| {
                let header = Header::new(store::SELECTIONS_FORMAT, &p.lineage);
                store::write_jsonl(path, Some(&header), sel)?;
                let rankings = matrix
                    .test_ids()
                    .iter()
                    .map(|t| rank(&matrix, t))
                    .collect::<Result<Vec<Ranking>, _>>()?;
                let header = Header::new(store::RANKINGS_FORMAT, &p.lineage);
                store::write_jsonl(&p.path("rankings.jsonl"), Some(&header), &rankings)?;
                let prompts = sel
                    .iter()
                    .map(|s| {
                        let test = lookup(&pool, &s.test_id, path)?;
                        let demo = lookup(&pool, &s.demo_id, path)?;
                        Ok(PromptRecord {
                            test_id: s.test_id.clone(),
                            demo_id: s.demo_id.clone(),
                            prompt: assemble_prompt(Some(demo), test, &p.cfg.prompt)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let header = Header::new(store::PROMPTS_FORMAT, &p.lineage);
                store::write_jsonl(&p.path("prompts.jsonl"), Some(&header), &prompts)
            },
        )?;
        Ok(out)
    }

    pub fn gradcheck(&mut self, force: bool) -> Result<GradcheckReport> {
        self.cached(
            Stage::Gradcheck,
            self.path("gradcheck.json"),
            force,
            |p, path| store::read_json(path, store::GRADCHECK_FORMAT, &p.lineage),
            |p| Ok(run_gradcheck(&p.cfg.gradcheck_config())?),
            |p, path, r| store::write_json(path, Header::new(store::GRADCHECK_FORMAT, &p.lineage), r),
        )
    }

    pub fn evaluate(&mut self, force: bool) -> Result<EvalReport> {
        let pool = self.ingest(false)?;
        let base = self.base(false)?;
        let selections = self.selections(false)?;
        let demo_models = if self.cfg.clusters == 0 {
            self.targets(false)?
        } else {
            let cands: Vec<&Example> = pool.candidates().collect();
            let adapt_cfg = self.cfg.lm.adapt();
            self.workers.map(&cands, |ex| Ok(adapt(&base, &[*ex], &adapt_cfg)?))?
        };
        self.cached(
            Stage::Evaluate,
            self.path("report.json"),
            force,
            |p, path| store::read_json(path, store::REPORT_FORMAT, &p.lineage),
            |p| p.compute_report(&pool, &base, &demo_models, &selections),
            |p, path, r| store::write_json(path, Header::new(store::REPORT_FORMAT, &p.lineage), r),
        )
    }

    fn compute_report(
        &self,
        pool: &Pool,
        base: &BaseModel,
        models: &[TargetModel],
        ced: &[SelectionRecord],
    ) -> Result<EvalReport> {
        let tests: Vec<&Example> = pool.split(Split::Test).collect();
        let rows: Vec<DemoRow> = self.workers.map(&tests, |t| {
            let opts = answer_options(pool, t);
            Ok(demo_row(base, models, t, opts.as_deref())?)
        })?;
        let test_ids: Vec<String> = tests.iter().map(|t| t.id.clone()).collect();
        let cand_ids: Vec<String> = models.iter().map(|m| m.name.clone()).collect();
        let loss = PairTable::new(test_ids.clone(), cand_ids.clone(), rows.iter().map(|r| r.losses.clone()).collect())?;
        let metric = PairTable::new(test_ids.clone(), cand_ids.clone(), rows.iter().map(|r| r.metrics.clone()).collect())?;
        self.write_sorted_losses(&loss, &metric)?;

        let boot = BootstrapSpec {
            resamples: self.cfg.bootstrap_resamples,
            seed: self.cfg.seeds.bootstrap,
        };
        let mut out: Vec<PolicyRow> = Vec::new();

        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seeds.policy ^ 0x5eed_0001);
        let random: Vec<Selection> = test_ids
            .iter()
            .map(|t| Selection {
                test_id: t.clone(),
                demo_id: cand_ids[rng.random_range(0..cand_ids.len())].clone(),
            })
            .collect();
        out.push(selection_row(Policy::Random.as_str(), &random, &metric, pool, boot)?);

        if let Some(path) = &self.cfg.paths.neighbors {
            let nn = read_neighbors(path, &test_ids)?;
            out.push(selection_row(Policy::NearestNeighborFile.as_str(), &nn, &metric, pool, boot)?);
        }

        let by_test: BTreeMap<&str, &SelectionRecord> = ced.iter().map(|s| (s.test_id.as_str(), s)).collect();
        let ced_sel = test_ids
            .iter()
            .map(|t| {
                let s = by_test
                    .get(t.as_str())
                    .ok_or_else(|| Error::Eval(ced_core::eval::EvalError::MissingSelection(t.clone())))?;
                Ok(Selection {
                    test_id: t.clone(),
                    demo_id: s.demo_id.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ced_policy = if self.cfg.clusters == 0 { Policy::Ced } else { Policy::ClusterCed };
        out.push(selection_row(ced_policy.as_str(), &ced_sel, &metric, pool, boot)?);

        let loss_oracle = oracle(&loss, OracleMode::Loss)?;
        out.push(selection_row(Policy::OracleLoss.as_str(), &loss_oracle.selections, &metric, pool, boot)?);
        let metric_oracle = oracle(&metric, OracleMode::Metric)?;
        out.push(selection_row(Policy::OracleMetric.as_str(), &metric_oracle.selections, &metric, pool, boot)?);

        if let Some(path) = &self.cfg.paths.predictions {
            for (policy, per_test) in read_predictions(path, pool)? {
                out.push(score_row(&format!("external:{}", policy.as_str()), &per_test, pool, boot)?);
            }
        }

        let datasets: BTreeSet<String> = tests.iter().map(|t| t.dataset.clone()).collect();
        Ok(EvalReport {
            datasets: datasets.into_iter().collect(),
            candidates: cand_ids.len(),
            tests: test_ids.len(),
            bootstrap_resamples: self.cfg.bootstrap_resamples,
            rows: out,
        })
    }

    /// Per test, every demonstration's label-aware loss in ascending order.
    fn write_sorted_losses(&self, loss: &PairTable, metric: &PairTable) -> Result<()> {
        let mut rows = Vec::new();
        for (t, tid) in loss.test_ids.iter().enumerate() {
            for (r, c) in loss.ranking(t, false).into_iter().enumerate() {
                rows.push(vec![
                    tid.clone(),
                    r.to_string(),
                    loss.candidate_ids[c].clone(),
                    loss.row(t)[c].to_string(),
                    metric.row(t)[c].to_string(),
                ]);
            }
        }
        store::write_csv(
            &self.path("sorted_losses.csv"),
            Header::new(store::LOSSES_FORMAT, &self.lineage),
            &["test_id", "rank", "candidate_id", "loss", "metric"],
            &rows,
        )
    }

    pub fn report(&mut self, force: bool) -> Result<String> {
        let report = self.evaluate(false)?;
        let grad_path = self.path("gradcheck.json");
        let grad = if grad_path.exists() {
            Some(store::read_json::<GradcheckReport>(&grad_path, store::GRADCHECK_FORMAT, &self.lineage)?)
        } else {
            None
        };
        self.cached(
            Stage::Report,
            self.path("report.txt"),
            force,
            |_, path| fs::read_to_string(path).map_err(Error::io(path)),
            |p| Ok(render_text(&Header::new(store::REPORT_FORMAT, &p.lineage), &report, grad.as_ref())),
            |_, path, text| store::write_text(path, text),
        )
    }
}

fn lookup<'p>(pool: &'p Pool, id: &str, artifact: &Path) -> Result<&'p Example> {
    pool.get(id)
        .ok_or_else(|| Error::artifact(artifact, format!("unknown example id {id:?}")))
}

/// Scores the same model groups as the in-process matrix through a scorer
/// bridge: base texts are candidate full texts, each column adapts on the
/// full texts of its model's source examples.
pub fn bridge_matrix(
    scorer: &mut impl crate::scorer::Scorer,
    pool: &Pool,
    models: &[TargetModel],
    tests: &[&Example],
) -> Result<ScoreMatrix> {
    let base_texts: Vec<String> = pool.candidates().map(Example::full_text).collect();
    let dev_texts: Vec<String> = pool.split(Split::Dev).map(Example::full_text).collect();
    let specs = models
        .iter()
        .map(|m| {
            let texts = m
                .source_ids
                .iter()
                .map(|id| {
                    pool.get(id)
                        .map(Example::full_text)
                        .ok_or_else(|| Error::Config(format!("model source {id:?} is not in the pool")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TargetSpec {
                name: m.name.clone(),
                texts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    score_matrix_via(scorer, &base_texts, &dev_texts, &specs, tests)
}

fn read_neighbors(path: &Path, test_ids: &[String]) -> Result<Vec<Selection>> {
    let rows = read_plain_jsonl::<NeighborRecord>(path)?;
    let map: BTreeMap<String, String> = rows.into_iter().map(|r| (r.test_id, r.candidate_id)).collect();
    test_ids
        .iter()
        .map(|t| {
            map.get(t)
                .map(|c| Selection {
                    test_id: t.clone(),
                    demo_id: c.clone(),
                })
                .ok_or_else(|| Error::Eval(ced_core::eval::EvalError::MissingSelection(t.clone())))
        })
        .collect()
}

/// Per-policy metric values of externally supplied predictions, in test order.
fn read_predictions(path: &Path, pool: &Pool) -> Result<BTreeMap<Policy, Vec<(String, f64)>>> {
    let rows = read_plain_jsonl::<Prediction>(path)?;
    let mut seen = BTreeSet::new();
    let mut out: BTreeMap<Policy, Vec<(String, f64)>> = BTreeMap::new();
    for (line, p) in rows.into_iter().enumerate() {
        if !seen.insert((p.test_id.clone(), p.policy)) {
            return Err(Error::artifact(
                path,
                format!("line {}: second prediction for test {:?} under {}", line + 1, p.test_id, p.policy.as_str()),
            ));
        }
        let test = pool
            .get(&p.test_id)
            .filter(|t| t.split == Split::Test)
            .ok_or_else(|| Error::artifact(path, format!("unknown test id {:?}", p.test_id)))?;
        out.entry(p.policy)
            .or_default()
            .push((test.id.clone(), task_metric(test.task, &p.answer, &test.answer)));
    }
    Ok(out)
}

fn read_plain_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
