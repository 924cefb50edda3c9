//! Run directories, stage orchestration and the artifact manifest.
//!
//! A run lives in `<out>/<run-id>/` with `data/`, `ckpt/`, `metrics/`,
//! `reports/`, the resolved `config.toml` and `manifest.json`. Every stage
//! reads its inputs back from disk, so a stage run on its own and the same
//! stage run inside `run-all` see identical bytes.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{write_atomic, Checkpoint, ModelKind, Stage, FORMAT_VERSION};
use crate::config::{ExperimentConfig, RmInit, RmStageConfig, SCHEMA_VERSION};
use crate::env::{gen_dataset, gen_eval_tasks, gen_pretrain_corpus, read_folds_jsonl, split_folds, write_folds_jsonl, DatasetFolds, TaskInstance};
use crate::error::{Error, Result};
use crate::eval::{
    agreement, best_of_n, compare_batch, reward_histogram, reward_region_trace, round_robin, shuffle_stability,
    temperature_sweep, write_elo_csv, write_region_trace_csv, write_reports_csv, elo, EvalReport, Evaluator, Pair,
    PairType, SweepConfig,
};
use crate::improve::{improve_chain, read_chains_jsonl, write_chains_jsonl, GenerationCounter, ImprovementChain};
use crate::model::SeqModel;
use crate::reward::{RewardKind, RewardModel};
use crate::seed::derive_seed;
use crate::train::{
    pretrain_lm, read_metrics_csv, rl_policy, run_curriculum, sft_pit, sft_policy, train_rm, write_metrics_csv,
    CurriculumArtifacts, CurriculumPlan, MetricsRow, RewardSource,
};
use crate::vocab::{TokenSeq, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    FirstRlOnly,
    SecondRlOnly,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::FirstRlOnly => "first-rl-only",
            Ablation::SecondRlOnly => "second-rl-only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageName {
    GenData,
    Pretrain,
    SftPolicy,
    SftPit,
    RmPolicy,
    RmGap,
    RlPolicy,
    RlPit,
    Improve,
    Eval,
}

impl StageName {
    pub const ALL: [StageName; 10] = [
        StageName::GenData,
        StageName::Pretrain,
        StageName::SftPolicy,
        StageName::SftPit,
        StageName::RmPolicy,
        StageName::RmGap,
        StageName::RlPolicy,
        StageName::RlPit,
        StageName::Improve,
        StageName::Eval,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::GenData => "gen-data",
            StageName::Pretrain => "pretrain",
            StageName::SftPolicy => "sft-policy",
            StageName::SftPit => "sft-pit",
            StageName::RmPolicy => "rm-policy",
            StageName::RmGap => "rm-gap",
            StageName::RlPolicy => "rl-policy",
            StageName::RlPit => "rl-pit",
            StageName::Improve => "improve",
            StageName::Eval => "eval",
        }
    }

    pub fn deps(self) -> &'static [StageName] {
        use StageName::*;
        match self {
            GenData => &[],
            Pretrain => &[GenData],
            SftPolicy | SftPit => &[GenData, Pretrain],
            RmPolicy => &[GenData, SftPolicy],
            RmGap => &[GenData, SftPit],
            RlPolicy => &[GenData, SftPolicy, RmPolicy],
            RlPit => &[GenData, SftPit, RlPolicy, RmGap],
            Improve => &[GenData, RlPolicy, RlPit],
            Eval => &[GenData, RmPolicy, RmGap, RlPolicy, RlPit, Improve],
        }
    }
}

impl std::fmt::Display for StageName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parts of the evaluation suite, runnable one at a time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalPart {
    Compare,
    Elo,
    Agreement,
    RewardHist,
    RegionTrace,
    Sweep,
}

impl EvalPart {
    pub const ALL: [EvalPart; 6] = [
        EvalPart::Compare,
        EvalPart::Elo,
        EvalPart::Agreement,
        EvalPart::RewardHist,
        EvalPart::RegionTrace,
        EvalPart::Sweep,
    ];

    fn outputs(self) -> &'static [&'static str] {
        match self {
            EvalPart::Compare => &["reports/compare.csv"],
            EvalPart::Elo => &["reports/elo.csv", "reports/elo_reward_gap.csv", "reports/elo_shuffles.json"],
            EvalPart::Agreement => &["reports/agreement.csv"],
            EvalPart::RewardHist => &["reports/reward_hist.csv", "reports/reward_hist_summary.json"],
            EvalPart::RegionTrace => &["reports/region_trace.csv"],
            EvalPart::Sweep => &["reports/temperature_sweep.csv"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Done,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub checkpoint_format: u8,
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub ablation: Option<Ablation>,
    /// Improver RL rounds in plan order.
    pub pit_plan: Vec<u8>,
    pub stages: BTreeMap<StageName, StageStatus>,
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Re-hashes every listed file under `dir`; returns the mismatching paths.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for f in &self.files {
            match std::fs::read(dir.join(&f.path)) {
                Ok(b) if hex::encode(Sha256::digest(&b)) == f.sha256 => {}
                _ => bad.push(f.path.clone()),
            }
        }
        Ok(bad)
    }
}

pub const MANIFEST: &str = "manifest.json";

/// Identifies a run by its resolved configuration and ablation.
pub fn run_id(cfg: &ExperimentConfig, ablation: Option<Ablation>) -> Result<String> {
    let mut h = Sha256::new();
    h.update(cfg.to_toml()?.as_bytes());
    h.update(ablation.map(Ablation::as_str).unwrap_or("none").as_bytes());
    Ok(hex::encode(h.finalize())[..16].to_string())
}

pub fn pit_plan(cfg: &ExperimentConfig, ablation: Option<Ablation>) -> CurriculumPlan {
    match ablation {
        None if cfg.curriculum.round2 => CurriculumPlan::with_round2(&cfg.rl_pit),
        None => CurriculumPlan::standard(&cfg.rl_pit),
        Some(Ablation::FirstRlOnly) => CurriculumPlan::first_rl_only(&cfg.rl_pit),
        Some(Ablation::SecondRlOnly) => CurriculumPlan::second_rl_only(&cfg.rl_pit),
    }
}

#[derive(Debug)]
pub struct Run {
    pub dir: PathBuf,
    pub cfg: ExperimentConfig,
    pub ablation: Option<Ablation>,
    pub id: String,
    stages: BTreeMap<StageName, StageStatus>,
}

impl Run {
    /// Opens (creating if needed) the run directory under `out`.
    pub fn open(cfg: ExperimentConfig, out: &Path, ablation: Option<Ablation>) -> Result<Self> {
        cfg.validate()?;
        let id = run_id(&cfg, ablation)?;
        let dir = out.join(&id);
        for sub in ["data", "ckpt", "metrics", "reports"] {
            let d = dir.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let stages = match Manifest::load(&dir.join(MANIFEST)) {
            Ok(m) => m.stages,
            Err(_) => BTreeMap::new(),
        };
        write_atomic(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
        Ok(Run {
            dir,
            cfg,
            ablation,
            id,
            stages,
        })
    }

    /// A run with the same configuration and a different ablation that
    /// starts from copies of this run's shared upstream artifacts.
    pub fn fork(&self, out: &Path, ablation: Option<Ablation>) -> Result<Run> {
        let mut other = Run::open(self.cfg.clone(), out, ablation)?;
        for stage in [
            StageName::GenData,
            StageName::Pretrain,
            StageName::SftPolicy,
            StageName::SftPit,
            StageName::RmPolicy,
            StageName::RmGap,
            StageName::RlPolicy,
        ] {
            if !self.is_done(stage) {
                continue;
            }
            for f in self.outputs(stage) {
                let (from, to) = (self.dir.join(&f), other.dir.join(&f));
                let bytes = std::fs::read(&from).map_err(|e| Error::io(&from, e))?;
                write_atomic(&to, &bytes)?;
            }
            if let Some(s) = self.stages.get(&stage) {
                other.stages.insert(stage, *s);
            }
        }
        Ok(other)
    }

    pub fn plan(&self) -> CurriculumPlan {
        pit_plan(&self.cfg, self.ablation)
    }

    fn seed(&self, label: &str) -> u64 {
        derive_seed(self.cfg.seed, label)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn rounds(&self) -> Vec<u8> {
        self.plan().round_ids()
    }

    fn final_round(&self) -> u8 {
        *self.rounds().last().expect("validated plans have rounds")
    }

    /// Files a stage writes, relative to the run directory.
    pub fn outputs(&self, stage: StageName) -> Vec<String> {
        let pair = |n: &str| vec![format!("ckpt/{n}.ckpt"), format!("metrics/{n}.csv")];
        match stage {
            StageName::GenData => vec!["data/dataset.jsonl".into(), "data/vocab.json".into(), "data/eval_tasks.jsonl".into()],
            StageName::Pretrain if !self.cfg.pretrain.enabled => vec![],
            StageName::Pretrain => pair("pretrain"),
            StageName::SftPolicy => pair("sft_policy"),
            StageName::SftPit => pair("sft_pit"),
            StageName::RmPolicy => pair("rm_policy"),
            StageName::RmGap => pair("rm_gap"),
            StageName::RlPolicy => pair("rl_policy"),
            StageName::RlPit => self.rounds().iter().flat_map(|r| pair(&format!("rl_pit_r{r}"))).collect(),
            StageName::Improve => vec!["data/chains.jsonl".into()],
            StageName::Eval => EvalPart::ALL
                .iter()
                .flat_map(|p| p.outputs().iter().map(|s| s.to_string()))
                .chain(["reports/summary.json".to_string()])
                .collect(),
        }
    }

    pub fn is_done(&self, stage: StageName) -> bool {
        self.outputs(stage).iter().all(|f| self.path(f).is_file())
    }

    /// Runs `stage`. With `with_deps`, missing upstream stages run first;
    /// otherwise a missing input is a dependency error.
    pub fn run_stage(&mut self, stage: StageName, with_deps: bool) -> Result<()> {
        for &d in stage.deps() {
            if self.is_done(d) {
                continue;
            }
            if with_deps {
                self.run_stage(d, true)?;
            } else {
                return Err(Error::Dependency(format!(
                    "stage {stage} needs {d}; run it first or drop --stage-only"
                )));
            }
        }
        log::info!("stage {stage}");
        let res = self.execute(stage);
        let status = match (&res, stage) {
            (Ok(()), StageName::Pretrain) if !self.cfg.pretrain.enabled => StageStatus::Skipped,
            (Ok(()), _) => StageStatus::Done,
            (Err(_), _) => StageStatus::Failed,
        };
        self.stages.insert(stage, status);
        if res.is_err() {
            self.write_manifest()?;
        }
        res
    }

    pub fn run_eval_part(&mut self, part: EvalPart, with_deps: bool) -> Result<()> {
        for &d in StageName::Eval.deps() {
            if !self.is_done(d) {
                if with_deps {
                    self.run_stage(d, true)?;
                } else {
                    return Err(Error::Dependency(format!("eval needs {d}")));
                }
            }
        }
        let ctx = EvalInputs::load(self)?;
        ctx.run(self, part)
    }

    pub fn run_all(&mut self) -> Result<Manifest> {
        for stage in StageName::ALL {
            self.run_stage(stage, false)?;
        }
        self.write_manifest()
    }

    /// Lists every file under the run directory with its hash.
    pub fn write_manifest(&self) -> Result<Manifest> {
        let mut files = Vec::new();
        for sub in ["config.toml", "data", "ckpt", "metrics", "reports"] {
            collect_files(&self.dir, &self.dir.join(sub), &mut files)?;
        }
        files.sort_by(|a, b| a.path.cmp(&b.path));
        let m = Manifest {
            schema_version: SCHEMA_VERSION,
            checkpoint_format: FORMAT_VERSION,
            run_id: self.id.clone(),
            config_hash: self.cfg.hash()?,
            seed: self.cfg.seed,
            ablation: self.ablation,
            pit_plan: self.rounds(),
            stages: self.stages.clone(),
            files,
        };
        let mut bytes = serde_json::to_vec_pretty(&m)?;
        bytes.push(b'\n');
        write_atomic(&self.path(MANIFEST), &bytes)?;
        Ok(m)
    }

    fn execute(&mut self, stage: StageName) -> Result<()> {
        match stage {
            StageName::GenData => self.gen_data(),
            StageName::Pretrain => self.pretrain(),
            StageName::SftPolicy => self.sft(ModelKind::Policy),
            StageName::SftPit => self.sft(ModelKind::Pit),
            StageName::RmPolicy => self.rm(RewardKind::Policy),
            StageName::RmGap => self.rm(RewardKind::Gap),
            StageName::RlPolicy => self.rl_policy(),
            StageName::RlPit => self.rl_pit(),
            StageName::Improve => self.improve(),
            StageName::Eval => {
                let ctx = EvalInputs::load(self)?;
                for part in EvalPart::ALL {
                    ctx.run(self, part)?;
                }
                ctx.summary(self)
            }
        }
    }

    // ---- loading -------------------------------------------------------

    pub fn vocab(&self) -> Result<Vocab> {
        self.cfg.env.vocab()
    }

    pub fn load_folds(&self) -> Result<DatasetFolds> {
        let vocab = self.vocab()?;
        let p = self.require("data/dataset.jsonl")?;
        let f = std::fs::File::open(&p).map_err(|e| Error::io(&p, e))?;
        read_folds_jsonl(std::io::BufReader::new(f), &vocab)
    }

    pub fn load_eval_tasks(&self) -> Result<Vec<TaskInstance>> {
        let vocab = self.vocab()?;
        let p = self.require("data/eval_tasks.jsonl")?;
        let f = std::fs::File::open(&p).map_err(|e| Error::io(&p, e))?;
        let mut out = Vec::new();
        for line in std::io::BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(&p, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let t: TaskInstance = serde_json::from_str(&line)?;
            out.push(TaskInstance::from_prompt(t.id, t.prompt, &vocab)?);
        }
        Ok(out)
    }

    fn require(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if !p.is_file() {
            return Err(Error::Dependency(format!("{} is missing", p.display())));
        }
        Ok(p)
    }

    /// Loads a checkpoint and checks it against the run's vocabulary.
    pub fn load_ckpt(&self, name: &str) -> Result<Checkpoint> {
        let ck = Checkpoint::load(&self.require(&format!("ckpt/{name}.ckpt"))?)?;
        ck.expect_vocab(&self.vocab()?.hash())?;
        Ok(ck)
    }

    pub fn load_generator(&self, name: &str) -> Result<SeqModel> {
        self.load_ckpt(name)?.to_seq_model()
    }

    pub fn load_reward(&self, name: &str) -> Result<RewardModel> {
        self.load_ckpt(name)?.to_reward_model()
    }

    pub fn load_metrics(&self, name: &str) -> Result<Vec<MetricsRow>> {
        let p = self.require(&format!("metrics/{name}.csv"))?;
        let f = std::fs::File::open(&p).map_err(|e| Error::io(&p, e))?;
        read_metrics_csv(f)
    }

    pub fn load_chains(&self) -> Result<Vec<ImprovementChain>> {
        let p = self.require("data/chains.jsonl")?;
        let f = std::fs::File::open(&p).map_err(|e| Error::io(&p, e))?;
        read_chains_jsonl(std::io::BufReader::new(f))
    }

    /// Final improver checkpoint of the plan.
    pub fn final_pit_name(&self) -> String {
        format!("rl_pit_r{}", self.final_round())
    }

    // ---- stages --------------------------------------------------------

    fn gen_data(&self) -> Result<()> {
        let env = &self.cfg.env;
        let vocab = self.vocab()?;
        let data = gen_dataset(env, self.seed("gen-data/dataset"))?;
        let folds = split_folds(data, env.validation_size, self.seed("gen-data/split"))?;
        let mut buf = Vec::new();
        write_folds_jsonl(&folds, &mut buf)?;
        write_atomic(&self.path("data/dataset.jsonl"), &buf)?;
        write_atomic(&self.path("data/vocab.json"), &serde_json::to_vec_pretty(&vocab.manifest())?)?;
        let tasks = gen_eval_tasks(env, self.seed("gen-data/eval"), env.eval_prompts)?;
        let mut buf = Vec::new();
        for t in &tasks {
            serde_json::to_writer(&mut buf, t)?;
            buf.push(b'\n');
        }
        write_atomic(&self.path("data/eval_tasks.jsonl"), &buf)
    }

    fn save(&self, name: &str, ck: &Checkpoint, metrics: &[MetricsRow]) -> Result<()> {
        ck.save(&self.path(&format!("ckpt/{name}.ckpt")))?;
        let mut buf = Vec::new();
        write_metrics_csv(metrics, &mut buf)?;
        write_atomic(&self.path(&format!("metrics/{name}.csv")), &buf)
    }

    fn pretrain(&self) -> Result<()> {
        if !self.cfg.pretrain.enabled {
            return Ok(());
        }
        let p = &self.cfg.pretrain;
        let corpus = gen_pretrain_corpus(&self.cfg.env, self.seed("pretrain/corpus"), p.corpus_size)?;
        let init = SeqModel::new(self.cfg.model.clone(), self.vocab()?.hash(), self.seed("pretrain/init"))?;
        let train = crate::train::TrainConfig {
            seed: self.seed("pretrain"),
            ..p.train.clone()
        };
        let out = pretrain_lm(init, &corpus, &train)?;
        let ck = Checkpoint::from_seq_model(&out.model, ModelKind::Policy, Stage::Pretrain, vec![Stage::Init]);
        self.save("pretrain", &ck, &out.metrics)
    }

    /// Starting generator for both SFT stages, with its lineage.
    fn sft_init(&self, label: &str) -> Result<(SeqModel, Vec<Stage>)> {
        if self.cfg.pretrain.enabled {
            let ck = self.load_ckpt("pretrain")?;
            Ok((ck.to_seq_model()?, ck.lineage()))
        } else {
            let m = SeqModel::new(self.cfg.model.clone(), self.vocab()?.hash(), self.seed(&format!("{label}/init")))?;
            Ok((m, vec![Stage::Init]))
        }
    }

    fn sft(&self, kind: ModelKind) -> Result<()> {
        let folds = self.load_folds()?;
        let (name, stage, cfg) = match kind {
            ModelKind::Policy => ("sft_policy", Stage::SftPolicy, &self.cfg.sft_policy),
            _ => ("sft_pit", Stage::SftPit, &self.cfg.sft_pit),
        };
        let (init, ancestry) = self.sft_init(name)?;
        let train = crate::train::TrainConfig {
            seed: self.seed(name),
            ..cfg.clone()
        };
        let out = match kind {
            ModelKind::Policy => sft_policy(init, &folds.sft, &train)?,
            _ => sft_pit(init, &folds.sft, &train)?,
        };
        self.save(name, &Checkpoint::from_seq_model(&out.model, kind, stage, ancestry), &out.metrics)
    }

    fn rm(&self, kind: RewardKind) -> Result<()> {
        let folds = self.load_folds()?;
        let (name, stage, backbone, cfg): (_, _, _, &RmStageConfig) = match kind {
            RewardKind::Policy => ("rm_policy", Stage::RmPolicy, "sft_policy", &self.cfg.rm_policy),
            RewardKind::Gap => ("rm_gap", Stage::RmGap, "sft_pit", &self.cfg.rm_gap),
        };
        let (model, ancestry) = match cfg.init {
            RmInit::Sft => {
                let ck = self.load_ckpt(backbone)?;
                (RewardModel::from_backbone(kind, &ck.to_seq_model()?), ck.lineage())
            }
            RmInit::Random => (
                RewardModel::new(kind, self.cfg.model.clone(), self.vocab()?.hash(), self.seed(&format!("{name}/init")))?,
                vec![Stage::Init],
            ),
        };
        let train = crate::train::TrainConfig {
            seed: self.seed(name),
            ..cfg.train.clone()
        };
        let out = train_rm(model, &folds.rm, &folds.validation, &train, cfg.objective)?;
        self.save(name, &Checkpoint::from_reward_model(&out.model, stage, ancestry), &out.metrics)
    }

    fn rl_policy(&self) -> Result<()> {
        let folds = self.load_folds()?;
        let sft = self.load_ckpt("sft_policy")?;
        let rm = self.load_reward("rm_policy")?;
        let cfg = crate::train::RlConfig {
            seed: self.seed("rl-policy"),
            ..self.cfg.rl_policy.clone()
        };
        let out = rl_policy(&sft.to_seq_model()?, RewardSource::Model(&rm), &folds.rl, &folds.validation, &cfg)?;
        let ck = Checkpoint::from_seq_model(&out.model, ModelKind::Policy, Stage::RlPolicy, sft.lineage());
        self.save("rl_policy", &ck, &out.metrics)
    }

    fn rl_pit(&self) -> Result<()> {
        let folds = self.load_folds()?;
        let sft = self.load_ckpt("sft_pit")?;
        let policy = self.load_generator("rl_policy")?;
        let rm = self.load_reward("rm_gap")?;
        let mut plan = self.plan();
        for r in &mut plan.rounds {
            r.rl.seed = self.seed(&format!("rl-pit/r{}", r.round));
        }
        let pit_sft = sft.to_seq_model()?;
        let art = CurriculumArtifacts {
            pit_sft: &pit_sft,
            policy_rl: &policy,
            reward_gap: RewardSource::Model(&rm),
            fold: &folds.rl,
            validation: &folds.validation,
            pit_ancestry: &sft.meta.ancestry,
        };
        for r in run_curriculum(&plan, &art)? {
            self.save(&format!("rl_pit_r{}", r.round), &r.checkpoint(), &r.outcome.metrics)?;
        }
        Ok(())
    }

    fn improve(&self) -> Result<()> {
        let tasks = self.load_eval_tasks()?;
        let policy = self.load_generator("rl_policy")?;
        let pit = self.load_generator(&self.final_pit_name())?;
        let cfg = crate::improve::ImproveConfig {
            seed: self.seed("improve"),
            ..self.cfg.improve.clone()
        };
        let mut counter = GenerationCounter::default();
        let chains = tasks
            .iter()
            .map(|t| improve_chain(&pit, &policy, t, None, &cfg, &mut counter))
            .collect::<Result<Vec<_>>>()?;
        log::info!("improve: {} improver and {} policy passes", counter.improver, counter.policy);
        let mut buf = Vec::new();
        write_chains_jsonl(&chains, &mut buf)?;
        write_atomic(&self.path("data/chains.jsonl"), &buf)
    }
}

fn collect_files(root: &Path, p: &Path, out: &mut Vec<FileEntry>) -> Result<()> {
    if p.is_file() {
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        let rel = p.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
        out.push(FileEntry {
            path: rel,
            sha256: hex::encode(Sha256::digest(&bytes)),
            bytes: bytes.len() as u64,
        });
    } else if p.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(p, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for e in entries {
            collect_files(root, &e, out)?;
        }
    }
    Ok(())
}

/// Method labels of the ELO round robin.
pub fn elo_methods(iterations: usize, best_of: usize) -> Vec<String> {
    let mut m = vec!["original".to_string()];
    m.extend((1..=iterations).map(|k| format!("pit-iter-{k}")));
    m.push(format!("best-of-{best_of}"));
    m
}

/// Everything the evaluation suite reads, loaded once.
pub struct EvalInputs {
    pub folds: DatasetFolds,
    pub tasks: Vec<TaskInstance>,
    pub chains: Vec<ImprovementChain>,
    pub policy: SeqModel,
    pub pit: SeqModel,
    pub rm_policy: RewardModel,
    pub rm_gap: RewardModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub run_id: String,
    pub pit_plan: Vec<u8>,
    pub delta_oracle: f64,
    pub delta_reward_gap: f64,
    pub delta_by_iteration: Vec<(usize, f64, f64)>,
    pub elo_ranks: Vec<(String, usize)>,
    pub elo_bottom_stable: Option<String>,
    pub agreement: BTreeMap<String, f64>,
    pub improver_passes: usize,
}

impl EvalInputs {
    pub fn load(run: &Run) -> Result<Self> {
        let chains = run.load_chains()?;
        let tasks = run.load_eval_tasks()?;
        if chains.len() != tasks.len() || chains.iter().zip(&tasks).any(|(c, t)| c.id != t.id) {
            return Err(Error::Dependency("chains do not match the evaluation prompts".into()));
        }
        Ok(EvalInputs {
            folds: run.load_folds()?,
            tasks,
            chains,
            policy: run.load_generator("rl_policy")?,
            pit: run.load_generator(&run.final_pit_name())?,
            rm_policy: run.load_reward("rm_policy")?,
            rm_gap: run.load_reward("rm_gap")?,
        })
    }

    fn response_at(chain: &ImprovementChain, k: usize) -> &TokenSeq {
        chain.at(k).unwrap_or_else(|| &chain.entries.last().expect("non-empty chain").response)
    }

    fn best_of_responses(&self, run: &Run, limit: usize) -> Result<Vec<TokenSeq>> {
        let n = run.cfg.eval.best_of_n;
        self.tasks
            .iter()
            .take(limit)
            .map(|t| {
                let seed = derive_seed(run.cfg.seed, &format!("eval/best-of/{}", t.id));
                Ok(best_of_n(
                    &self.policy,
                    &self.rm_policy,
                    t.instruction(),
                    n,
                    run.cfg.improve.reference_temperature,
                    run.cfg.improve.max_len,
                    seed,
                )?
                .tokens)
            })
            .collect()
    }

    /// Δ of every improver iteration (and best-of-n) against the original.
    pub fn compare(&self, run: &Run) -> Result<Vec<EvalReport>> {
        let band = run.cfg.eval.tie_band;
        let evaluators = [
            Evaluator::Oracle {
                lambda: run.cfg.env.lambda,
            },
            Evaluator::reward_gap(&self.rm_gap)?,
            Evaluator::reward_policy(&self.rm_policy)?,
            Evaluator::gap_by_subtraction(&self.rm_policy)?,
        ];
        let temp = run.cfg.improve.temperature;
        let mut out = Vec::new();
        for k in 1..=run.cfg.improve.iterations {
            let pairs: Vec<Pair<'_>> = self
                .tasks
                .iter()
                .zip(&self.chains)
                .map(|(t, c)| Pair {
                    task: t,
                    a: Self::response_at(c, k),
                    b: Self::response_at(c, 0),
                })
                .collect();
            for ev in &evaluators {
                out.push(compare_batch(ev, &pairs, band)?.labeled(&format!("pit-iter-{k}"), "original").at_temperature(temp));
            }
        }
        let bon = self.best_of_responses(run, self.tasks.len())?;
        let pairs: Vec<Pair<'_>> = self
            .tasks
            .iter()
            .zip(&self.chains)
            .zip(&bon)
            .map(|((t, c), y)| Pair {
                task: t,
                a: y,
                b: Self::response_at(c, 0),
            })
            .collect();
        for ev in &evaluators {
            out.push(compare_batch(ev, &pairs, band)?.labeled(&format!("best-of-{}", run.cfg.eval.best_of_n), "original"));
        }
        Ok(out)
    }

    fn run(&self, run: &Run, part: EvalPart) -> Result<()> {
        let band = run.cfg.eval.tie_band;
        match part {
            EvalPart::Compare => {
                let mut buf = Vec::new();
                write_reports_csv(&self.compare(run)?, &mut buf)?;
                write_atomic(&run.path("reports/compare.csv"), &buf)
            }
            EvalPart::Elo => {
                let k = run.cfg.improve.iterations;
                let n = run.cfg.eval.elo_prompts.min(self.tasks.len());
                let labels = elo_methods(k, run.cfg.eval.best_of_n);
                let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
                let bon = self.best_of_responses(run, n)?;
                for (ev, file) in [
                    (
                        Evaluator::Oracle {
                            lambda: run.cfg.env.lambda,
                        },
                        "reports/elo.csv",
                    ),
                    (Evaluator::reward_gap(&self.rm_gap)?, "reports/elo_reward_gap.csv"),
                ] {
                    let mut records = Vec::new();
                    for ((t, c), y) in self.tasks.iter().zip(&self.chains).zip(&bon) {
                        let mut methods: Vec<(&str, &[u32])> =
                            (0..=k).map(|i| (refs[i], Self::response_at(c, i).as_slice())).collect();
                        methods.push((refs[k + 1], y.as_slice()));
                        records.extend(round_robin(&ev, t, &methods, band)?);
                    }
                    let table = elo(&refs, &records, &run.cfg.eval.elo)?;
                    let mut buf = Vec::new();
                    write_elo_csv(&table, &mut buf)?;
                    write_atomic(&run.path(file), &buf)?;
                    if file == "reports/elo.csv" {
                        let s = shuffle_stability(
                            &refs,
                            &records,
                            run.cfg.eval.shuffles,
                            derive_seed(run.cfg.seed, "eval/shuffles"),
                            &run.cfg.eval.elo,
                        )?;
                        write_atomic(&run.path("reports/elo_shuffles.json"), &serde_json::to_vec_pretty(&s)?)?;
                    }
                }
                Ok(())
            }
            EvalPart::Agreement => {
                let val = &self.folds.validation;
                let rows = [
                    ("oracle", agreement(&Evaluator::Oracle { lambda: run.cfg.env.lambda }, val, band)?),
                    ("reward_policy", agreement(&Evaluator::reward_policy(&self.rm_policy)?, val, band)?),
                    ("reward_gap", agreement(&Evaluator::reward_gap(&self.rm_gap)?, val, band)?),
                    ("gap_by_subtraction", agreement(&Evaluator::gap_by_subtraction(&self.rm_policy)?, val, band)?),
                ];
                let mut wtr = csv::Writer::from_writer(Vec::new());
                wtr.write_record(["evaluator", "accuracy"])?;
                for (e, a) in rows {
                    wtr.write_record([e.to_string(), format!("{a:.6}")])?;
                }
                let buf = wtr.into_inner().map_err(|e| Error::io("<agreement>", e.into_error()))?;
                write_atomic(&run.path("reports/agreement.csv"), &buf)
            }
            EvalPart::RewardHist => {
                let h = reward_histogram(
                    &self.rm_gap,
                    &self.folds.validation,
                    &self.policy,
                    run.cfg.improve.reference_temperature,
                    run.cfg.improve.max_len,
                    derive_seed(run.cfg.seed, "eval/histogram"),
                )?;
                let mut buf = Vec::new();
                h.write_csv(&mut buf)?;
                write_atomic(&run.path("reports/reward_hist.csv"), &buf)?;
                let stats: BTreeMap<&str, _> = PairType::ALL.iter().map(|&t| (t.as_str(), h.stats(t))).collect();
                write_atomic(&run.path("reports/reward_hist_summary.json"), &serde_json::to_vec_pretty(&stats)?)
            }
            EvalPart::RegionTrace => {
                let trace = region_trace(run)?;
                let mut buf = Vec::new();
                write_region_trace_csv(&trace, &mut buf)?;
                write_atomic(&run.path("reports/region_trace.csv"), &buf)
            }
            EvalPart::Sweep => {
                let evaluators = [
                    Evaluator::Oracle {
                        lambda: run.cfg.env.lambda,
                    },
                    Evaluator::reward_gap(&self.rm_gap)?,
                ];
                let cfg = SweepConfig {
                    reference_temperature: run.cfg.improve.reference_temperature,
                    max_len: run.cfg.improve.max_len,
                    seed: derive_seed(run.cfg.seed, "eval/sweep"),
                    band,
                };
                let reports = temperature_sweep(&self.pit, &self.policy, &self.tasks, &run.cfg.eval.temperatures, &evaluators, &cfg)?;
                let mut buf = Vec::new();
                write_reports_csv(&reports, &mut buf)?;
                write_atomic(&run.path("reports/temperature_sweep.csv"), &buf)
            }
        }
    }

    fn summary(&self, run: &Run) -> Result<()> {
        let read = |rel: &str| -> Result<Vec<u8>> {
            let p = run.path(rel);
            std::fs::read(&p).map_err(|e| Error::io(&p, e))
        };
        let compare: Vec<Vec<String>> = csv::Reader::from_reader(read("reports/compare.csv")?.as_slice())
            .records()
            .map(|r| r.map(|r| r.iter().map(String::from).collect()))
            .collect::<std::result::Result<_, _>>()?;
        let delta = |method: &str, evaluator: &str| -> f64 {
            compare
                .iter()
                .find(|r| r[0] == method && r[6] == evaluator)
                .and_then(|r| r[5].parse().ok())
                .unwrap_or(f64::NAN)
        };
        let k = run.cfg.improve.iterations;
        let elo_rows: Vec<(String, usize)> = csv::Reader::from_reader(read("reports/elo.csv")?.as_slice())
            .records()
            .map(|r| r.map(|r| (r[0].to_string(), r[2].parse().unwrap_or(0))))
            .collect::<std::result::Result<_, _>>()?;
        let shuffles: crate::eval::ShuffleSummary = serde_json::from_slice(&read("reports/elo_shuffles.json")?)?;
        let agreement: BTreeMap<String, f64> = csv::Reader::from_reader(read("reports/agreement.csv")?.as_slice())
            .records()
            .map(|r| r.map(|r| (r[0].to_string(), r[1].parse().unwrap_or(f64::NAN))))
            .collect::<std::result::Result<_, _>>()?;
        let s = EvalSummary {
            run_id: run.id.clone(),
            pit_plan: run.rounds(),
            delta_oracle: delta("pit-iter-1", "oracle"),
            delta_reward_gap: delta("pit-iter-1", "reward_gap"),
            delta_by_iteration: (1..=k)
                .map(|i| {
                    let m = format!("pit-iter-{i}");
                    (i, delta(&m, "oracle"), delta(&m, "reward_gap"))
                })
                .collect(),
            elo_ranks: elo_rows,
            elo_bottom_stable: shuffles.stable_bottom,
            agreement,
            improver_passes: self.chains.iter().map(|c| c.entries.len() - 1).sum(),
        };
        write_atomic(&run.path("reports/summary.json"), &serde_json::to_vec_pretty(&s)?)
    }
}

/// Region labels over the plan's improver rounds, steps offset so the trace
/// reads as one run.
pub fn region_trace(run: &Run) -> Result<Vec<crate::eval::RegionPoint>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for r in run.plan().rounds {
        let rows = run.load_metrics(&format!("rl_pit_r{}", r.round))?;
        for mut p in reward_region_trace(&rows, run.cfg.eval.tie_band)? {
            p.step += offset;
            out.push(p);
        }
        offset += r.rl.steps;
    }
    Ok(out)
}
