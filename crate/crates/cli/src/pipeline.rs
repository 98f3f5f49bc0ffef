//! Stage graph, fingerprint chaining, caching, and the work each stage
//! does.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use ebr_core::checkpoint::Checkpoint;
use ebr_core::corpus::{filter_by_frequency, leave_last_out_split, parse_event_log, parse_movielens, Dataset, PositiveFilter, Split};
use ebr_core::embedding::EmbeddingMatrix;
use ebr_core::eval::{evaluate_overall, evaluate_within_cluster, measure_throughput, select_alpha, Divided, EvalSplit, MethodMetrics, MetricsReport, Scorer};
use ebr_core::intent::{predict_intent, train_intent, IntentHead};
use ebr_core::item2vec::train_item2vec;
use ebr_core::itemset::ItemSet;
use ebr_core::mf::{mf_user_vector, train_mf, MfParams};
use ebr_core::partition::{kmeans_with_trace, ClusterAssignment};
use ebr_core::retrieval::{build_index, retrieve_merged, topk_global, write_candidates, CandidateLine, PartitionedIndex, UserVectors};
use ebr_core::seqrec::{train, NegativeKind, PromptInput, PromptKind, TrainedModel, Trainer, TrainingMode};
use serde_json::json;

use crate::artifacts::{file_digest, fingerprint, write_atomic, ArtifactDir, Manifest};
use crate::config::{DatasetKind, PipelineConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Prepare,
    Item2vec,
    Cluster,
    Train,
    Intent,
    Retrieve,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [Stage::Prepare, Stage::Item2vec, Stage::Cluster, Stage::Train, Stage::Intent, Stage::Retrieve, Stage::Eval, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Item2vec => "item2vec",
            Stage::Cluster => "cluster",
            Stage::Train => "train",
            Stage::Intent => "intent",
            Stage::Retrieve => "retrieve",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MethodKind {
    Mf,
    Seq(TrainingMode),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Method {
    pub name: String,
    pub kind: MethodKind,
}

impl Method {
    fn file(&self) -> String {
        format!("{}.ckpt", self.name.replace('+', "-"))
    }

    /// Trained against within-cluster negatives only, hence served through
    /// the quota-merged pipeline.
    fn divided(&self) -> bool {
        matches!(self.kind, MethodKind::Seq(m) if m.negatives == NegativeKind::WithinCluster)
    }

    fn needs_clusters(&self) -> bool {
        matches!(self.kind, MethodKind::Seq(m) if m.needs_clusters())
    }
}

fn prompt_name(p: PromptKind) -> &'static str {
    match p {
        PromptKind::None => "none",
        PromptKind::Prefix => "prefix",
        PromptKind::Hadamard => "hadamard",
    }
}

/// Every configured method in report order.
pub fn methods(cfg: &PipelineConfig) -> Vec<Method> {
    let m = &cfg.methods;
    let mut out = Vec::new();
    if m.mf {
        out.push(Method { name: "mf".into(), kind: MethodKind::Mf });
    }
    if m.global {
        out.push(Method { name: "global".into(), kind: MethodKind::Seq(TrainingMode::GLOBAL) });
    }
    for &r in &m.mixed_ratios {
        out.push(Method { name: format!("mixed-{r}"), kind: MethodKind::Seq(TrainingMode::mixed(r)) });
    }
    if m.within {
        out.push(Method { name: "within".into(), kind: MethodKind::Seq(TrainingMode::WITHIN_CLUSTER) });
    }
    for &p in &m.prompts {
        out.push(Method { name: format!("within+{}", prompt_name(p)), kind: MethodKind::Seq(TrainingMode::prompted(p)) });
    }
    out
}

enum Model {
    Mf(MfParams),
    Seq(TrainedModel),
}

impl Model {
    fn scorer(&self) -> Scorer<'_> {
        match self {
            Model::Mf(p) => Scorer::Mf(p),
            Model::Seq(m) => Scorer::Seq(m),
        }
    }

    fn item_embeddings(&self) -> EmbeddingMatrix {
        match self {
            Model::Mf(p) => p.item_embeddings(),
            Model::Seq(m) => m.item_embeddings(),
        }
    }
}

fn stamp(mut c: Checkpoint, fp: &str) -> Checkpoint {
    if let Some(obj) = c.config.as_object_mut() {
        obj.insert("fingerprint".into(), json!(fp));
    }
    c
}

pub struct Pipeline {
    cfg: PipelineConfig,
    art: ArtifactDir,
    strict: bool,
    dataset_digest: Option<String>,
    split: Option<Split>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, strict: bool) -> Result<Self> {
        let art = ArtifactDir::open(&cfg.artifact_dir)?;
        Ok(Self { cfg, art, strict, dataset_digest: None, split: None })
    }

    pub fn artifacts(&self) -> &ArtifactDir {
        &self.art
    }

    fn methods(&self) -> Vec<Method> {
        methods(&self.cfg)
    }

    fn inputs(&self, stage: Stage) -> Vec<Stage> {
        let methods = self.methods();
        match stage {
            Stage::Prepare => vec![],
            Stage::Item2vec => vec![Stage::Prepare],
            Stage::Cluster => vec![Stage::Item2vec],
            Stage::Train if methods.iter().any(Method::needs_clusters) => vec![Stage::Prepare, Stage::Cluster],
            Stage::Train => vec![Stage::Prepare],
            Stage::Intent => vec![Stage::Prepare, Stage::Cluster, Stage::Train],
            Stage::Retrieve => vec![Stage::Prepare, Stage::Cluster, Stage::Train, Stage::Intent],
            Stage::Eval if methods.iter().any(Method::divided) => vec![Stage::Prepare, Stage::Cluster, Stage::Train, Stage::Intent],
            Stage::Eval => vec![Stage::Prepare, Stage::Cluster, Stage::Train],
            Stage::Report => vec![Stage::Eval],
        }
    }

    fn dataset_digest(&mut self) -> Result<String> {
        if self.dataset_digest.is_none() {
            self.dataset_digest = Some(file_digest(&self.cfg.dataset.path)?);
        }
        Ok(self.dataset_digest.clone().unwrap())
    }

    fn section(&mut self, stage: Stage) -> Result<serde_json::Value> {
        let c = &self.cfg;
        Ok(match stage {
            Stage::Prepare => {
                let d = &c.dataset;
                let section = json!({
                    "kind": d.kind,
                    "min_item_freq": d.min_item_freq,
                    "min_user_freq": d.min_user_freq,
                    "schema": d.schema,
                    "filter": d.filter,
                });
                json!({ "dataset": section, "digest": self.dataset_digest()? })
            }
            Stage::Item2vec => json!(c.item2vec),
            Stage::Cluster => json!(c.kmeans),
            Stage::Train => json!(null),
            Stage::Intent => json!({ "intent": c.intent, "backbone": c.methods.intent_backbone }),
            Stage::Retrieve => json!({ "retrieval": c.retrieval, "eval": c.eval }),
            Stage::Eval => json!({
                "eval": c.eval,
                "alpha": c.retrieval.alpha,
                "alpha_grid": c.retrieval.alpha_grid,
                "schedule": c.retrieval.schedule,
                "methods": c.methods,
                "encoder": c.encoder,
                "seed": c.seed,
            }),
            Stage::Report => json!(null),
        })
    }

    /// Per-model fingerprints of the train stage.
    fn model_fingerprints(&self, inputs: &BTreeMap<String, String>) -> BTreeMap<String, String> {
        self.methods()
            .into_iter()
            .map(|m| {
                let (mode, config) = match m.kind {
                    MethodKind::Mf => (json!("mf"), json!(self.cfg.mf)),
                    MethodKind::Seq(mode) => (json!(mode), json!(self.cfg.encoder)),
                };
                let cluster = if m.needs_clusters() { inputs.get("cluster").cloned() } else { None };
                let fp = fingerprint(&json!({ "model": m.name, "mode": mode, "config": config, "prepare": inputs.get("prepare"), "cluster": cluster }));
                (m.name, fp)
            })
            .collect()
    }

    fn stage_fingerprint(&mut self, stage: Stage, inputs: &BTreeMap<String, String>) -> Result<String> {
        if stage == Stage::Train {
            return Ok(fingerprint(&json!({ "stage": "train", "models": self.model_fingerprints(inputs) })));
        }
        let section = self.section(stage)?;
        Ok(fingerprint(&json!({ "stage": stage.name(), "section": section, "inputs": inputs })))
    }

    /// Fingerprint the stage would have if every stage were rebuilt from
    /// the current config.
    fn expected_fingerprint(&mut self, stage: Stage) -> Result<String> {
        let mut inputs = BTreeMap::new();
        for s in self.inputs(stage) {
            let fp = self.expected_fingerprint(s)?;
            inputs.insert(s.name().to_string(), fp);
        }
        self.stage_fingerprint(stage, &inputs)
    }

    pub fn run_all(&mut self) -> Result<()> {
        for s in Stage::ALL {
            self.run(s)?;
        }
        Ok(())
    }

    pub fn run(&mut self, stage: Stage) -> Result<()> {
        let started = Instant::now();
        let mut inputs = BTreeMap::new();
        for s in self.inputs(stage) {
            let m = self.art.complete_manifest(s.name())?.ok_or_else(|| {
                anyhow!("stage `{}` needs the output of stage `{}`, which has not been run; run `ebr {}` (or `ebr all`) first", stage.name(), s.name(), s.name())
            })?;
            if self.strict {
                let expected = self.expected_fingerprint(s)?;
                if expected != m.fingerprint {
                    bail!("stage `{}` artifacts are stale for the current config; rerun `ebr {}` or drop --strict", s.name(), s.name());
                }
            }
            inputs.insert(s.name().to_string(), m.fingerprint);
        }
        let fp = self.stage_fingerprint(stage, &inputs)?;
        let previous = self.art.complete_manifest(stage.name())?;
        if let Some(m) = &previous {
            if m.fingerprint == fp {
                log::info!("{}: up to date (cache hit)", stage.name());
                return Ok(());
            }
            if self.strict {
                bail!("stage `{}` artifacts are stale for the current config; rerun without --strict to rebuild", stage.name());
            }
        }
        log::info!("{}: running", stage.name());
        self.art.clear_manifest(stage.name())?;
        std::fs::create_dir_all(self.art.stage_dir(stage.name()))?;
        let (files, parts) = match stage {
            Stage::Prepare => (self.prepare()?, BTreeMap::new()),
            Stage::Item2vec => (self.item2vec()?, BTreeMap::new()),
            Stage::Cluster => (self.cluster()?, BTreeMap::new()),
            Stage::Train => self.train(&inputs, previous.as_ref())?,
            Stage::Intent => (self.intent()?, BTreeMap::new()),
            Stage::Retrieve => (self.retrieve()?, BTreeMap::new()),
            Stage::Eval => (self.eval(&fp)?, BTreeMap::new()),
            Stage::Report => (self.report()?, BTreeMap::new()),
        };
        let seconds = started.elapsed().as_secs_f64();
        self.art.write_manifest(&Manifest {
            stage: stage.name().into(),
            fingerprint: fp,
            inputs,
            files,
            parts,
            seconds,
            version: env!("CARGO_PKG_VERSION").into(),
        })?;
        log::info!("{}: done in {seconds:.1}s", stage.name());
        Ok(())
    }

    fn write_json(&self, stage: Stage, file: &str, value: &serde_json::Value) -> Result<()> {
        write_atomic(&self.art.path(stage.name(), file), serde_json::to_string_pretty(value)?.as_bytes())
    }

    fn split(&mut self) -> Result<&Split> {
        if self.split.is_none() {
            let d = Dataset::load(&self.art.path("prepare", "dataset.bin")).context("loading the prepared dataset")?;
            self.split = Some(leave_last_out_split(&d)?);
        }
        Ok(self.split.as_ref().unwrap())
    }

    fn clusters(&self) -> Result<ClusterAssignment> {
        Ok(ClusterAssignment::load(&self.art.path("cluster", "clusters.csv")).context("loading cluster assignment")?)
    }

    fn load_model(&self, m: &Method) -> Result<Model> {
        let c = Checkpoint::load(&self.art.path("train", &m.file())).with_context(|| format!("loading model {}", m.name))?;
        Ok(match m.kind {
            MethodKind::Mf => Model::Mf(MfParams::from_checkpoint(&c)?),
            MethodKind::Seq(_) => Model::Seq(TrainedModel::from_checkpoint(&c)?),
        })
    }

    fn backbone_method(&self) -> Result<Method> {
        let name = &self.cfg.methods.intent_backbone;
        self.methods()
            .into_iter()
            .find(|m| &m.name == name && matches!(m.kind, MethodKind::Seq(_)))
            .ok_or_else(|| anyhow!("intent backbone {name:?} is not a configured sequential method"))
    }

    fn load_backbone(&self) -> Result<TrainedModel> {
        match self.load_model(&self.backbone_method()?)? {
            Model::Seq(m) => Ok(m),
            Model::Mf(_) => unreachable!(),
        }
    }

    fn load_intent(&self) -> Result<IntentHead> {
        let c = Checkpoint::load(&self.art.path("intent", "head.ckpt")).context("loading intent head")?;
        Ok(IntentHead::from_checkpoint(&c)?.0)
    }

    fn prepare(&mut self) -> Result<Vec<String>> {
        let d = &self.cfg.dataset;
        let raw = match d.kind {
            DatasetKind::Movielens => parse_movielens(&d.path),
            DatasetKind::EventLog => {
                let filter = PositiveFilter::parse(d.filter.as_deref().unwrap_or(""))?;
                parse_event_log(&d.path, d.schema.as_ref().unwrap(), &filter)
            }
        }
        .with_context(|| format!("reading dataset {}", d.path.display()))?;
        let data = if d.min_item_freq > 0 || d.min_user_freq > 0 { filter_by_frequency(&raw, d.min_item_freq, d.min_user_freq)? } else { raw };
        data.save(&self.art.path("prepare", "dataset.bin"))?;
        let split = leave_last_out_split(&data)?;
        log::info!("prepare: {} users, {} items, {} interactions", data.num_users(), data.num_items(), data.num_interactions());
        let summary = json!({
            "users": data.num_users(),
            "items": data.num_items(),
            "interactions": data.num_interactions(),
            "eligible_users": split.eligible_users.len(),
        });
        self.split = Some(split);
        self.write_json(Stage::Prepare, "summary.json", &summary)?;
        Ok(vec!["dataset.bin".into(), "summary.json".into()])
    }

    fn item2vec(&mut self) -> Result<Vec<String>> {
        let cfg = self.cfg.item2vec.clone();
        let emb = train_item2vec(&self.split()?.train, &cfg)?;
        emb.save(&self.art.path("item2vec", "embeddings.bin"))?;
        Ok(vec!["embeddings.bin".into()])
    }

    fn cluster(&mut self) -> Result<Vec<String>> {
        let emb = EmbeddingMatrix::load(&self.art.path("item2vec", "embeddings.bin"))?;
        let out = kmeans_with_trace(&emb, &self.cfg.kmeans)?;
        out.assignment.save(&self.art.path("cluster", "clusters.csv"))?;
        let sizes: Vec<usize> = (0..out.assignment.k()).map(|k| out.assignment.members(k).len()).collect();
        let summary = json!({ "k": out.assignment.k(), "sizes": sizes, "objective": out.objective_trace.last(), "iterations": out.iterations });
        self.write_json(Stage::Cluster, "summary.json", &summary)?;
        Ok(vec!["clusters.csv".into(), "summary.json".into()])
    }

    fn train(&mut self, inputs: &BTreeMap<String, String>, previous: Option<&Manifest>) -> Result<(Vec<String>, BTreeMap<String, String>)> {
        let fps = self.model_fingerprints(inputs);
        // an interrupted run leaves no manifest; models stamped with a matching fingerprint are reused too
        let old_parts = previous.map(|p| p.parts.clone()).unwrap_or_default();
        let ca = if inputs.contains_key("cluster") { Some(self.clusters()?) } else { None };
        let (encoder, mf_cfg) = (self.cfg.encoder.clone(), self.cfg.mf.clone());
        let mut files = Vec::new();
        let mut summary = serde_json::Map::new();
        for m in self.methods() {
            let fp = &fps[&m.name];
            let path = self.art.path("train", &m.file());
            let stamped = || -> Option<String> { Checkpoint::load(&path).ok()?.config.get("fingerprint")?.as_str().map(String::from) };
            if path.is_file() && (old_parts.get(&m.name) == Some(fp) || stamped().as_ref() == Some(fp)) {
                log::info!("train: {} up to date", m.name);
            } else {
                let started = Instant::now();
                let split = self.split()?;
                let ckpt = match m.kind {
                    MethodKind::Mf => train_mf(split, &mf_cfg)?.to_checkpoint(),
                    MethodKind::Seq(mode) => {
                        let model = train(split, ca.as_ref(), &encoder, mode).with_context(|| format!("training {}", m.name))?;
                        if model.report.never_improved {
                            log::warn!("train: {} never beat its initial validation recall", m.name);
                        }
                        model.to_checkpoint()?
                    }
                };
                stamp(ckpt, fp).save(&path)?;
                log::info!("train: {} in {:.1}s", m.name, started.elapsed().as_secs_f64());
            }
            let report = Checkpoint::load(&path)?.config.get("report").cloned().unwrap_or(json!(null));
            summary.insert(m.name.clone(), report);
            files.push(m.file());
        }
        self.write_json(Stage::Train, "summary.json", &serde_json::Value::Object(summary))?;
        files.push("summary.json".into());
        Ok((files, fps))
    }

    fn intent(&mut self) -> Result<Vec<String>> {
        let backbone = self.load_backbone()?;
        let ca = self.clusters()?;
        let cfg = self.cfg.intent.clone();
        let head = train_intent(self.split()?, &ca, &backbone, &cfg)?;
        let name = self.cfg.methods.intent_backbone.clone();
        let fp = self.art.manifest("train")?.map(|m| m.fingerprint).unwrap_or_default();
        stamp(head.to_checkpoint(&name), &fp).save(&self.art.path("intent", "head.ckpt"))?;
        Ok(vec!["head.ckpt".into()])
    }

    fn retrieval_method(&self) -> Result<Method> {
        let all = self.methods();
        let found = match &self.cfg.retrieval.method {
            Some(name) => all.iter().find(|m| &m.name == name).cloned(),
            None => all.iter().rev().find(|m| m.divided()).or(all.last()).cloned(),
        };
        found.ok_or_else(|| anyhow!("retrieval method {:?} is not configured", self.cfg.retrieval.method))
    }

    /// Fixed alpha, or the grid value with the best validation recall.
    fn alpha_for(&mut self, model: &Model, idx: &PartitionedIndex, head: &IntentHead, backbone: &TrainedModel) -> Result<f64> {
        if let Some(a) = self.cfg.retrieval.alpha {
            return Ok(a);
        }
        let (grid, m, schedule) = (self.cfg.retrieval.alpha_grid.clone(), self.cfg.eval.selection_m, self.cfg.retrieval.schedule);
        let (alpha, recall) = select_alpha(model.scorer(), idx, head, backbone, self.split()?, &grid, m, schedule)?;
        log::info!("selected alpha {alpha} (validation R@{m} {recall:.4})");
        Ok(alpha)
    }

    fn retrieve(&mut self) -> Result<Vec<String>> {
        let method = self.retrieval_method()?;
        let model = self.load_model(&method)?;
        let ca = self.clusters()?;
        let idx = build_index(&model.item_embeddings(), &ca)?;
        let divided = if method.divided() {
            let head = self.load_intent()?;
            let backbone = self.load_backbone()?;
            let alpha = self.alpha_for(&model, &idx, &head, &backbone)?;
            Some((head, backbone, alpha))
        } else {
            None
        };
        let (m, schedule) = (self.cfg.retrieval.m, self.cfg.retrieval.schedule);
        let split = self.split()?;
        let n = split.num_items();
        let mut lines = Vec::new();
        for u in 0..split.num_users() {
            // serve from everything known about the user
            let mut history = split.test_history(u);
            history.extend(split.test_target[u]);
            let exclude = ItemSet::from_items(n, history.iter().copied());
            let (items, quotas) = match (&model, &divided) {
                (Model::Seq(seq), Some((head, backbone, alpha))) => {
                    let p_u = predict_intent(head, backbone, &history)?;
                    let vectors: Vec<Vec<f32>> = if seq.has_prompts() {
                        (0..idx.k()).map(|k| seq.encode_user(&history, Some(k))).collect::<Result<_, _>>()?
                    } else {
                        vec![seq.encode_with(&history, PromptInput::None)?]
                    };
                    let users = if seq.has_prompts() { UserVectors::PerCluster(&vectors) } else { UserVectors::Shared(&vectors[0]) };
                    let r = retrieve_merged(&idx, users, &p_u, *alpha, m, &exclude, schedule)?;
                    (r.merged, r.plan.quotas)
                }
                (Model::Seq(seq), None) => (topk_global(&idx, &seq.encode_with(&history, PromptInput::None)?, m, &exclude)?, vec![]),
                (Model::Mf(p), _) => (topk_global(&idx, &mf_user_vector(p, u)?, m, &exclude)?, vec![]),
            };
            lines.push(CandidateLine {
                user: split.train.external_user(u),
                items: items.iter().map(|x| split.train.external_item(x.0 as usize)).collect(),
                scores: items.iter().map(|x| x.1).collect(),
                quotas,
            });
        }
        let path = self.art.path("retrieve", "candidates.jsonl");
        write_candidates(BufWriter::new(File::create(&path)?), &lines)?;
        let alpha = divided.as_ref().map(|d| d.2);
        self.write_json(Stage::Retrieve, "summary.json", &json!({ "method": method.name, "alpha": alpha, "m": m, "users": lines.len() }))?;
        Ok(vec!["candidates.jsonl".into(), "summary.json".into()])
    }

    fn eval(&mut self, fp: &str) -> Result<Vec<String>> {
        let ca = self.clusters()?;
        let methods = self.methods();
        let intent = if methods.iter().any(Method::divided) { Some((self.load_intent()?, self.load_backbone()?)) } else { None };
        let e = self.cfg.eval.clone();
        let (schedule, encoder) = (self.cfg.retrieval.schedule, self.cfg.encoder.clone());
        let mut rows = Vec::new();
        let mut mixed_valid: Vec<(usize, f64)> = Vec::new();
        for m in &methods {
            let started = Instant::now();
            let model = self.load_model(m)?;
            let idx = build_index(&model.item_embeddings(), &ca)?;
            let mut row = MethodMetrics { name: m.name.clone(), overall: None, within: None, throughput: None, alpha: None, ratio: None, selected: false };
            if m.divided() {
                let (head, backbone) = intent.as_ref().unwrap();
                let alpha = self.alpha_for(&model, &idx, head, backbone)?;
                let dv = Divided { intent: head, backbone, alpha, schedule };
                row.overall = Some(evaluate_overall(model.scorer(), &idx, Some(&dv), self.split()?, &e.ms, e.split)?);
                row.alpha = Some(alpha);
            } else {
                row.overall = Some(evaluate_overall(model.scorer(), &idx, None, self.split()?, &e.ms, e.split)?);
            }
            if let MethodKind::Seq(mode) = m.kind {
                if !e.within_ms.is_empty() {
                    row.within = Some(evaluate_within_cluster(model.scorer(), &idx, &ca, self.split()?, &e.within_ms, e.split)?);
                }
                if let NegativeKind::Mixed { ratio } = mode.negatives {
                    row.ratio = Some(ratio);
                    let valid = evaluate_overall(model.scorer(), &idx, None, self.split()?, &[e.selection_m], EvalSplit::Valid)?.recall[&e.selection_m];
                    mixed_valid.push((rows.len(), valid));
                }
                if e.throughput_window_secs > 0.0 {
                    let split = self.split()?;
                    let mut trainer = Trainer::new(split, Some(&ca), &encoder, mode)?;
                    row.throughput = Some(measure_throughput(&mut trainer, Duration::from_secs_f64(e.throughput_window_secs), e.throughput_windows)?);
                }
            }
            log::info!("eval: {} in {:.1}s", m.name, started.elapsed().as_secs_f64());
            rows.push(row);
        }
        // ties go to the earlier ratio
        let mut best: Option<(usize, f64)> = None;
        for &(row, valid) in &mixed_valid {
            if best.is_none_or(|b| valid > b.1) {
                best = Some((row, valid));
            }
        }
        if let Some((row, valid)) = best {
            log::info!("eval: selected {} (validation R@{} {valid:.4})", rows[row].name, e.selection_m);
            rows[row].selected = true;
        }
        let report = MetricsReport { split: e.split, methods: rows, fingerprint: fp.to_string(), seed: self.cfg.seed };
        self.write_json(Stage::Eval, "metrics.json", &serde_json::to_value(&report)?)?;
        write_atomic(&self.art.path("eval", "table.txt"), report.render_table().as_bytes())?;
        Ok(vec!["metrics.json".into(), "table.txt".into()])
    }

    fn report(&mut self) -> Result<Vec<String>> {
        let text = std::fs::read_to_string(self.art.path("eval", "metrics.json"))?;
        let report: MetricsReport = serde_json::from_str(&text)?;
        let split = match report.split {
            EvalSplit::Valid => "validation",
            EvalSplit::Test => "test",
        };
        let mut out = format!("split: {split}\nseed: {}\nfingerprint: {}\n\n", report.seed, report.fingerprint);
        out += &report.render_table();
        write_atomic(&self.art.path("report", "report.txt"), out.as_bytes())?;
        Ok(vec!["report.txt".into()])
    }
}
