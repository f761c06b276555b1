//! The pipeline stages. Each reads finalized upstream stages whose keys it
//! recomputes from the config, and writes one new stage.

use std::collections::BTreeMap;
use std::sync::Arc;

use hardcase::buckets::{render_stats_table, BucketStore, DecileThresholds, NUM_BUCKETS};
use hardcase::corpus::{corpus_hash, generate_corpus, read_jsonl, sha256_hex, write_jsonl, SeedPlan};
use hardcase::difficulty::{build_label_set, label_outcomes, score_corpus, train_difficulty, DifficultyModel, OutcomeRecord, ScoreRecord};
use hardcase::embedding::{rasterize_views, train_embedding, EmbeddingModel, SegmentViews};
use hardcase::eval::{aggregate, assign_buckets, evaluate_segments, make_test_sets, quantile, render_report, AgentPolicy, EvalReport, SeedResult, VariantReport};
use hardcase::seeding::{stream_rng, Stream};
use hardcase::trainer::{agent_from_checkpoint, select_checkpoint, train, RunOptions, StepLog};
use hardcase::curricula::WindowRecord;
use hardcase::world::RunSegment;
use hardcase_nn::Checkpoint;
use serde::{Deserialize, Serialize};

use crate::artifacts::{stage_key, Artifact, Inputs, Workspace};
use crate::config::{ExperimentConfig, Variant};
use crate::error::{CliError, Result};

pub const SPLITS: [&str; 3] = ["train", "validation", "test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub seed_plan: SeedPlan,
    pub disjoint: bool,
    pub counts: BTreeMap<String, usize>,
    pub corpus_hashes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSummary {
    pub records: usize,
    pub positives: usize,
    pub positive_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSetSummary {
    pub examples: usize,
    pub positives: usize,
    pub negatives_available: usize,
    pub neg_ratio: f64,
}

/// Indices into the test corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSets {
    pub tail_threshold: f64,
    pub unbiased: Vec<usize>,
    pub unbiased_buckets: Vec<usize>,
    pub long_tail: Vec<usize>,
}

/// Indices into the validation corpus, grouped by training bucket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationSet {
    pub indices: Vec<usize>,
    pub buckets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub step: u64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub selected_step: u64,
    pub checkpoints: Vec<CheckpointSummary>,
    pub windows: Vec<WindowRecord>,
    pub steps: Vec<StepLog>,
}

pub struct TrainingInputs {
    pub segments: Vec<Arc<RunSegment>>,
    pub scores: Vec<f64>,
    pub thresholds: DecileThresholds,
    /// The selected validation segments, in corpus order.
    pub validation: Vec<RunSegment>,
}

impl TrainingInputs {
    /// A fresh in-memory store; its buckets must match the bucketize stage.
    pub fn store(&self, p: &Pipeline) -> Result<BucketStore> {
        let store = BucketStore::from_scores(&self.segments, &self.scores, p.cfg.buckets.shard_size, p.keys.scores.clone())?;
        if store.thresholds() != &self.thresholds {
            return Err(CliError::Stale("bucket thresholds differ from the bucketize stage".into()));
        }
        Ok(store)
    }
}

/// Expected key of every stage for one config.
#[derive(Clone, Debug, PartialEq)]
pub struct Keys {
    pub data: String,
    pub labels: String,
    pub embedding: String,
    pub difficulty: String,
    pub scores: String,
    pub buckets: String,
    pub agents: BTreeMap<String, String>,
    pub eval: BTreeMap<String, String>,
    pub report: String,
}

fn inputs(pairs: &[(&str, &str)]) -> Inputs {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

pub fn agents_stage(name: &str) -> String {
    format!("agents/{name}")
}

pub fn eval_stage(name: &str) -> String {
    format!("eval/{name}")
}

impl Keys {
    pub fn of(cfg: &ExperimentConfig) -> Result<Self> {
        let data = stage_key("data", &serde_json::json!({ "seed": cfg.seed, "corpus": cfg.corpus, "knobs": cfg.knobs }), &Inputs::new())?;
        let labels = stage_key("labels", &cfg.profiles, &inputs(&[("data", &data)]))?;
        let embedding = stage_key("embedding", &cfg.embedding, &inputs(&[("data", &data)]))?;
        let difficulty = stage_key(
            "difficulty",
            &serde_json::json!({ "seed": cfg.seed, "difficulty": cfg.difficulty }),
            &inputs(&[("data", &data), ("labels", &labels), ("embedding", &embedding)]),
        )?;
        let scores = stage_key("scores", &(), &inputs(&[("data", &data), ("embedding", &embedding), ("difficulty", &difficulty)]))?;
        let buckets = stage_key(
            "buckets",
            &serde_json::json!({ "seed": cfg.seed, "buckets": cfg.buckets, "eval": cfg.eval }),
            &inputs(&[("data", &data), ("scores", &scores)]),
        )?;
        let mut agents = BTreeMap::new();
        let mut eval = BTreeMap::new();
        for v in &cfg.sweep.variants {
            let params = serde_json::json!({ "seeds": cfg.agent_seeds(), "strategy": v.strategy, "training": cfg.training });
            let a = stage_key(&agents_stage(&v.name), &params, &inputs(&[("data", &data), ("scores", &scores), ("buckets", &buckets)]))?;
            let e = stage_key(&eval_stage(&v.name), &cfg.eval, &inputs(&[("data", &data), ("buckets", &buckets), ("agents", &a)]))?;
            agents.insert(v.name.clone(), a);
            eval.insert(v.name.clone(), e);
        }
        let order: Vec<&str> = cfg.sweep.variants.iter().map(|v| v.name.as_str()).collect();
        let report = stage_key("report", &order, &eval)?;
        Ok(Self { data, labels, embedding, difficulty, scores, buckets, agents, eval, report })
    }
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub ws: Workspace,
    pub workers: usize,
    pub keys: Keys,
}

fn log(stage: &str, msg: impl AsRef<str>) {
    eprintln!("[{stage}] {}", msg.as_ref());
}

fn read_corpus(data: &Artifact, split: &str) -> Result<Vec<RunSegment>> {
    Ok(read_jsonl(&data.file(&format!("{split}.jsonl"))?)?)
}

fn ids<'a>(segs: impl IntoIterator<Item = &'a RunSegment>) -> Vec<String> {
    segs.into_iter().map(|s| s.id.clone()).collect()
}

fn read_scores(scores: &Artifact, split: &str, ids: &[String]) -> Result<Vec<f64>> {
    let recs: Vec<ScoreRecord> = read_jsonl(&scores.file(&format!("{split}.jsonl"))?)?;
    if recs.len() != ids.len() || recs.iter().zip(ids).any(|(r, id)| &r.id != id) {
        return Err(CliError::Stale(format!("{split} scores do not line up with the {split} corpus")));
    }
    Ok(recs.into_iter().map(|r| r.score).collect())
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, ws: Workspace, workers: usize) -> Result<Self> {
        cfg.validate()?;
        let keys = Keys::of(&cfg)?;
        Ok(Self { cfg, ws, workers: workers.max(1), keys })
    }

    pub fn seed_plan(&self) -> Result<SeedPlan> {
        let base = self.cfg.seed.checked_mul(1 << 32).ok_or_else(|| CliError::Config(format!("seed {} is too large", self.cfg.seed)))?;
        let c = &self.cfg.corpus;
        let plan = SeedPlan::new(base, c.train, c.validation, c.test);
        if !plan.disjoint() || plan.test.end > base + (1 << 32) {
            return Err(CliError::Config("corpus seed ranges overlap; reduce the corpus sizes".into()));
        }
        Ok(plan)
    }

    /// Variants of the sweep, or the named subset.
    pub fn variants(&self, names: &[String]) -> Result<Vec<Variant>> {
        if names.is_empty() {
            return Ok(self.cfg.sweep.variants.clone());
        }
        names
            .iter()
            .map(|n| self.cfg.variant(n).cloned().ok_or_else(|| CliError::Config(format!("no variant named {n:?} in the sweep"))))
            .collect()
    }

    pub fn gen_data(&self) -> Result<()> {
        let plan = self.seed_plan()?;
        let p = self.ws.begin("data")?;
        let mut counts = BTreeMap::new();
        let mut hashes = BTreeMap::new();
        for (split, range) in SPLITS.iter().zip([&plan.train, &plan.validation, &plan.test]) {
            log("data", format!("generating {} {split} segments", range.end - range.start));
            let segs = generate_corpus(range.clone(), &self.cfg.knobs, self.workers)?;
            write_jsonl(&p.path(&format!("{split}.jsonl")), &segs)?;
            counts.insert(split.to_string(), segs.len());
            hashes.insert(split.to_string(), corpus_hash(&segs)?);
        }
        p.write_json("manifest.json", &DataManifest { disjoint: plan.disjoint(), seed_plan: plan, counts, corpus_hashes: hashes })?;
        p.finish(&self.keys.data, Inputs::new())?;
        Ok(())
    }

    pub fn label(&self) -> Result<()> {
        let data = self.ws.load("data", &self.keys.data)?;
        let train = read_corpus(&data, "train")?;
        let p = self.ws.begin("labels")?;
        let profiles: Vec<_> = self.cfg.profiles.iter().map(|n| (n.name.clone(), n.profile)).collect();
        log("labels", format!("{} profiles x {} segments", profiles.len(), train.len()));
        let outs = label_outcomes(&train, &profiles, self.workers)?;
        write_jsonl(&p.path("outcomes.jsonl"), &outs)?;
        let mut summary = BTreeMap::new();
        for (name, _) in &profiles {
            let mine: Vec<&OutcomeRecord> = outs.iter().filter(|o| &o.profile == name).collect();
            let positives = mine.iter().filter(|o| o.label()).count();
            let records = mine.len();
            summary.insert(name.clone(), ProfileSummary { records, positives, positive_rate: positives as f64 / records.max(1) as f64 });
        }
        p.write_json("summary.json", &summary)?;
        p.finish(&self.keys.labels, inputs(&[("data", &self.keys.data)]))?;
        Ok(())
    }

    fn views(&self, segs: &[RunSegment]) -> Vec<SegmentViews> {
        hardcase::corpus::par_map(self.workers, segs, rasterize_views)
    }

    pub fn train_embedding(&self) -> Result<()> {
        let data = self.ws.load("data", &self.keys.data)?;
        let views = self.views(&read_corpus(&data, "train")?);
        let p = self.ws.begin("embedding")?;
        log("embedding", format!("training on {} segments", views.len()));
        let (model, report) = train_embedding(&views, &self.cfg.embedding)?;
        if let Some(w) = &report.warning {
            log("embedding", format!("warning: {w}"));
        }
        p.write_json("model.json", &model)?;
        p.write_json("report.json", &report)?;
        p.finish(&self.keys.embedding, inputs(&[("data", &self.keys.data)]))?;
        Ok(())
    }

    pub fn embedding_model(&self) -> Result<EmbeddingModel> {
        self.ws.load("embedding", &self.keys.embedding)?.read_json("model.json")
    }

    pub fn difficulty_model(&self) -> Result<DifficultyModel> {
        self.ws.load("difficulty", &self.keys.difficulty)?.read_json("model.json")
    }

    pub fn train_difficulty(&self) -> Result<()> {
        let data = self.ws.load("data", &self.keys.data)?;
        let labels = self.ws.load("labels", &self.keys.labels)?;
        let enc = self.embedding_model()?;
        let outs: Vec<OutcomeRecord> = read_jsonl(&labels.file("outcomes.jsonl")?)?;
        let emb = enc.embed_corpus(&self.views(&read_corpus(&data, "train")?), self.workers)?;
        let p = self.ws.begin("difficulty")?;
        let ls = build_label_set(&outs, self.cfg.difficulty.neg_ratio, &mut stream_rng(Stream::Labels, &[self.cfg.seed]))?;
        log("difficulty", format!("{} examples, {} positive", ls.examples.len(), ls.positives));
        let (model, report) = train_difficulty(&ls, &emb, &self.cfg.difficulty)?;
        log("difficulty", format!("held-out AUC {:.3}", report.holdout_auc));
        p.write_json("model.json", &model)?;
        p.write_json("report.json", &report)?;
        p.write_json(
            "label_set.json",
            &LabelSetSummary { examples: ls.examples.len(), positives: ls.positives, negatives_available: ls.negatives_available, neg_ratio: ls.neg_ratio },
        )?;
        let ins = inputs(&[("data", &self.keys.data), ("labels", &self.keys.labels), ("embedding", &self.keys.embedding)]);
        p.finish(&self.keys.difficulty, ins)?;
        Ok(())
    }

    pub fn score(&self) -> Result<()> {
        let data = self.ws.load("data", &self.keys.data)?;
        let enc = self.embedding_model()?;
        let model = self.difficulty_model()?;
        let p = self.ws.begin("scores")?;
        for split in SPLITS {
            let segs = read_corpus(&data, split)?;
            log("scores", format!("{split}: {} segments", segs.len()));
            let emb = enc.embed_corpus(&self.views(&segs), self.workers)?;
            let (recs, summary) = score_corpus(&model, &ids(&segs), &emb)?;
            write_jsonl(&p.path(&format!("{split}.jsonl")), &recs)?;
            p.write_json(&format!("summary_{split}.json"), &summary)?;
        }
        let ins = inputs(&[("data", &self.keys.data), ("embedding", &self.keys.embedding), ("difficulty", &self.keys.difficulty)]);
        p.finish(&self.keys.scores, ins)?;
        Ok(())
    }

    pub fn bucketize(&self) -> Result<()> {
        let data = self.ws.load("data", &self.keys.data)?;
        let scores = self.ws.load("scores", &self.keys.scores)?;
        let train: Vec<Arc<RunSegment>> = read_corpus(&data, "train")?.into_iter().map(Arc::new).collect();
        let train_scores = read_scores(&scores, "train", &ids(train.iter().map(|s| &**s)))?;
        let p = self.ws.begin("buckets")?;
        let store = BucketStore::from_scores(&train, &train_scores, self.cfg.buckets.shard_size, self.keys.scores.clone())?;
        store.write(&p.path("store"))?;
        std::fs::write(p.path("stats.txt"), render_stats_table(&store.stats()))?;
        let thresholds = store.thresholds().clone();
        p.write_json("thresholds.json", &thresholds)?;
        drop(store);
        drop(train);

        let test_scores = read_scores(&scores, "test", &ids(&read_corpus(&data, "test")?))?;
        let tail_threshold = quantile(&train_scores, self.cfg.eval.tail_quantile);
        let (unbiased, long_tail) = make_test_sets(&test_scores, self.cfg.eval.unbiased, tail_threshold, &mut stream_rng(Stream::Split, &[self.cfg.seed]))?;
        let picked: Vec<f64> = unbiased.iter().map(|&i| test_scores[i]).collect();
        let sets = TestSets { tail_threshold, unbiased_buckets: assign_buckets(&picked, &thresholds), unbiased, long_tail };
        log("buckets", format!("unbiased test {}, long tail {}", sets.unbiased.len(), sets.long_tail.len()));
        p.write_json("test_sets.json", &sets)?;

        let val_scores = read_scores(&scores, "validation", &ids(&read_corpus(&data, "validation")?))?;
        p.write_json("validation.json", &pick_validation(&val_scores, &thresholds, self.cfg.eval.validation_per_bucket)?)?;
        p.finish(&self.keys.buckets, inputs(&[("data", &self.keys.data), ("scores", &self.keys.scores)]))?;
        Ok(())
    }

    /// Scored training corpus and validation set from finalized stages.
    pub fn training_inputs(&self) -> Result<TrainingInputs> {
        let data = self.ws.load("data", &self.keys.data)?;
        let scores = self.ws.load("scores", &self.keys.scores)?;
        let buckets = self.ws.load("buckets", &self.keys.buckets)?;
        let thresholds: DecileThresholds = buckets.read_json("thresholds.json")?;
        let vset: ValidationSet = buckets.read_json("validation.json")?;
        let train = read_corpus(&data, "train")?;
        let train_scores = read_scores(&scores, "train", &ids(&train))?;
        let mut vcorpus = read_corpus(&data, "validation")?;
        let mut keep = vec![false; vcorpus.len()];
        vset.indices.iter().for_each(|&i| keep[i] = true);
        let mut it = keep.iter();
        vcorpus.retain(|_| *it.next().expect("same length"));
        Ok(TrainingInputs { segments: train.into_iter().map(Arc::new).collect(), scores: train_scores, thresholds, validation: vcorpus })
    }

    pub fn train_agents(&self, variants: &[Variant]) -> Result<()> {
        let inp = self.training_inputs()?;
        let validation: Vec<&RunSegment> = inp.validation.iter().collect();
        for v in variants {
            let stage = agents_stage(&v.name);
            let key = &self.keys.agents[&v.name];
            let p = self.ws.begin(&stage)?;
            for seed in self.cfg.agent_seeds() {
                let mut store = inp.store(self)?;
                log(&stage, format!("seed {seed}: {} steps", self.cfg.training.steps));
                let opts = RunOptions { workers: self.workers, record_losses: false };
                let out = train(&mut store, &validation, &v.strategy, &self.cfg.training, seed, opts)?;
                let ck = select_checkpoint(&out.checkpoints)?;
                ck.save(&p.path(&format!("seed_{seed}.checkpoint.json")))?;
                let tl = TrainLog {
                    seed,
                    selected_step: ck.step,
                    checkpoints: out.checkpoints.iter().map(|c| CheckpointSummary { step: c.step, metrics: c.metrics.clone() }).collect(),
                    windows: out.windows,
                    steps: out.steps,
                };
                p.write_json(&format!("seed_{seed}.log.json"), &tl)?;
            }
            let ins = inputs(&[("data", &self.keys.data), ("scores", &self.keys.scores), ("buckets", &self.keys.buckets)]);
            p.finish(key, ins)?;
        }
        Ok(())
    }

    pub fn eval(&self, variants: &[Variant]) -> Result<()> {
        let data = self.ws.load("data", &self.keys.data)?;
        let buckets = self.ws.load("buckets", &self.keys.buckets)?;
        let sets: TestSets = buckets.read_json("test_sets.json")?;
        let test = read_corpus(&data, "test")?;
        let unbiased: Vec<&RunSegment> = sets.unbiased.iter().map(|&i| &test[i]).collect();
        let tail: Vec<&RunSegment> = sets.long_tail.iter().map(|&i| &test[i]).collect();
        let rollouts = self.cfg.eval.rollouts;
        for v in variants {
            let stage = eval_stage(&v.name);
            let agents = self.ws.load(&agents_stage(&v.name), &self.keys.agents[&v.name])?;
            let p = self.ws.begin(&stage)?;
            let mut results = Vec::new();
            for seed in self.cfg.agent_seeds() {
                log(&stage, format!("seed {seed}: {} + {} segments x {rollouts} rollouts", unbiased.len(), tail.len()));
                let ck = Checkpoint::load(&agents.file(&format!("seed_{seed}.checkpoint.json"))?)?;
                let agent = agent_from_checkpoint(&self.cfg.training.agent, &ck)?;
                let policy = AgentPolicy { agent: &agent, greedy: false };
                results.push(SeedResult {
                    seed,
                    unbiased: evaluate_segments(&policy, &unbiased, rollouts, seed, self.workers)?,
                    long_tail: Some(evaluate_segments(&policy, &tail, rollouts, seed, self.workers)?),
                });
            }
            p.write_json("report.json", &aggregate(&v.name, &results, &sets.unbiased_buckets)?)?;
            let ins = inputs(&[("data", &self.keys.data), ("buckets", &self.keys.buckets), ("agents", &self.keys.agents[&v.name])]);
            p.finish(&self.keys.eval[&v.name], ins)?;
        }
        Ok(())
    }

    pub fn report(&self) -> Result<()> {
        let buckets = self.ws.load("buckets", &self.keys.buckets)?;
        let sets: TestSets = buckets.read_json("test_sets.json")?;
        let mut variants = Vec::new();
        for v in &self.cfg.sweep.variants {
            let art = self.ws.load(&eval_stage(&v.name), &self.keys.eval[&v.name])?;
            if art.record.inputs.get("buckets") != Some(&self.keys.buckets) {
                return Err(CliError::Stale(format!("{} was evaluated on different test buckets", v.name)));
            }
            variants.push(art.read_json::<VariantReport>("report.json")?);
        }
        let p = self.ws.begin("report")?;
        let c = &self.cfg;
        let mut meta = BTreeMap::new();
        let mut put = |k: &str, v: String| meta.insert(k.to_string(), v);
        put("config_hash", sha256_hex(&serde_json::to_vec(c)?));
        put("seed", c.seed.to_string());
        put("agent_seeds", format!("{:?}", c.agent_seeds()));
        put("train_segments", c.corpus.train.to_string());
        put("validation_segments", format!("{} per bucket", c.eval.validation_per_bucket));
        put("unbiased_test_segments", sets.unbiased.len().to_string());
        put("long_tail_test_segments", sets.long_tail.len().to_string());
        put("rollouts_per_segment", c.eval.rollouts.to_string());
        put("train_steps", c.training.steps.to_string());
        put("batch", c.training.batch.to_string());
        let report = EvalReport { variants, meta };
        render_report(&report, p.dir())?;
        let ins: Inputs = self.keys.eval.iter().map(|(k, v)| (eval_stage(k), v.clone())).collect();
        p.finish(&self.keys.report, ins)?;
        Ok(())
    }

    pub fn run_all(&self) -> Result<()> {
        self.gen_data()?;
        self.label()?;
        self.train_embedding()?;
        self.train_difficulty()?;
        self.score()?;
        self.bucketize()?;
        let all = self.variants(&[])?;
        self.train_agents(&all)?;
        self.eval(&all)?;
        self.report()
    }
}

/// The first `per_bucket` validation segments of every training bucket.
pub fn pick_validation(scores: &[f64], thresholds: &DecileThresholds, per_bucket: usize) -> Result<ValidationSet> {
    let mut taken = [0usize; NUM_BUCKETS];
    let mut set = ValidationSet { indices: Vec::new(), buckets: Vec::new() };
    for (i, &s) in scores.iter().enumerate() {
        let b = thresholds.bucket_of(s);
        if taken[b] < per_bucket {
            taken[b] += 1;
            set.indices.push(i);
            set.buckets.push(b);
        }
    }
    if let Some(k) = taken.iter().position(|&t| t < per_bucket) {
        return Err(CliError::Config(format!("validation corpus fills only {} of {per_bucket} segments in bucket {k}", taken[k])));
    }
    Ok(set)
}
