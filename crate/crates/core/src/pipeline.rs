//! Stage orchestration and persistence.
//!
//! Stage DAG: generate → debias → {fill, resample}; evaluate is independent.
//! Every stage writes its artifacts atomically into the work directory and
//! refuses to overwrite existing files unless forced. Reports are
//! deterministic; wall-clock timings go to a separate sidecar file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::chat::{ChatBackend, PromptSet, PROMPT_VERSION};
use crate::config::{ComparatorBackend, PipelineConfig, ScorerBackend};
use crate::debias::{
    eliminate, BiasLexicon, EliminationConfig, LexiconScreen, MockReviewer, RemoteReviewer,
    Reviewer,
};
use crate::error::{PipelineError, ProviderError};
use crate::fill::{fill, FillConfig, GateOutcome};
use crate::fsutil::write_atomic;
use crate::generator::{Generator, MockGenerator, RemoteGenerator};
use crate::metrics::{
    evaluate, load_transcript_file, Comparator, LexiconScorer, RemoteComparator, RemoteScorer,
    ScoreDifferenceComparator, SentenceScorer,
};
use crate::persona::{load_set, DimensionKey, PersonaSet, Stage};
use crate::resample::{load_distribution, resample_set, DistributionSpec};

pub const REPORT_SCHEMA: &str = "upcs-report/1";
pub const INITIAL_FILE: &str = "initial.jsonl";
pub const INCOMPLETE_FILE: &str = "incomplete_debiased.jsonl";
pub const DEBIASED_FILE: &str = "debiased.jsonl";
pub const UNBIASED_FILE: &str = "unbiased.jsonl";
pub const PIPELINE_REPORT_FILE: &str = "pipeline.report.json";
pub const TIMINGS_FILE: &str = "pipeline.timings.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Generate,
    Debias,
    Fill,
    Resample,
    Evaluate,
}

impl StageName {
    pub const ALL: [StageName; 5] = [
        StageName::Generate,
        StageName::Debias,
        StageName::Fill,
        StageName::Resample,
        StageName::Evaluate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Generate => "generate",
            StageName::Debias => "debias",
            StageName::Fill => "fill",
            StageName::Resample => "resample",
            StageName::Evaluate => "evaluate",
        }
    }

    pub fn parse(s: &str) -> Option<StageName> {
        StageName::ALL.into_iter().find(|n| n.as_str() == s)
    }

    /// Persona-set file this stage reads, if any.
    pub fn input(self) -> Option<&'static str> {
        match self {
            StageName::Generate | StageName::Evaluate => None,
            StageName::Debias => Some(INITIAL_FILE),
            StageName::Fill | StageName::Resample => Some(INCOMPLETE_FILE),
        }
    }

    /// Persona-set file this stage writes, if any.
    pub fn output(self) -> Option<&'static str> {
        match self {
            StageName::Generate => Some(INITIAL_FILE),
            StageName::Debias => Some(INCOMPLETE_FILE),
            StageName::Fill => Some(DEBIASED_FILE),
            StageName::Resample => Some(UNBIASED_FILE),
            StageName::Evaluate => None,
        }
    }

    pub fn report_file(self) -> String {
        format!("{}.report.json", self.as_str())
    }

    pub fn artifacts(self) -> Vec<String> {
        self.output()
            .map(str::to_string)
            .into_iter()
            .chain(std::iter::once(self.report_file()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerateReport {
    pub generator: String,
    pub prompt_version: &'static str,
    pub seed: u64,
    pub prompts: usize,
    pub personas: usize,
    pub dimension_counts: BTreeMap<DimensionKey, usize>,
    pub complete_personas: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FillCounts {
    pub complete: usize,
    pub filled: usize,
    pub dimensions_filled: usize,
    pub gate_failed: usize,
    pub no_donor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FillReport {
    pub embedder: String,
    pub theta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub counts: FillCounts,
    pub records: Vec<crate::fill::FillRecord>,
}

/// Outcome of one stage: the artifacts it wrote and its report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageOutcome {
    pub stage: StageName,
    pub artifacts: Vec<String>,
    pub report: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub schema: &'static str,
    pub seed: u64,
    pub config: PipelineConfig,
    pub outputs: Vec<String>,
    pub stages: Vec<StageOutcome>,
}

pub struct Pipeline {
    config: PipelineConfig,
    force: bool,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    /// Fails with every config violation before any work is done.
    pub fn new(config: PipelineConfig, force: bool) -> Result<Self, PipelineError> {
        let violations = config.violations();
        if !violations.is_empty() {
            return Err(PipelineError::Config(violations));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.concurrency)
            .build()
            .map_err(|e| PipelineError::Validation(format!("thread pool: {e}")))?;
        Ok(Pipeline {
            config,
            force,
            pool,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn work_dir(&self) -> PathBuf {
        self.config.work_dir()
    }

    fn path(&self, file: &str) -> PathBuf {
        self.work_dir().join(file)
    }

    fn check_overwrite(&self, stage: StageName) -> Result<(), PipelineError> {
        if self.force {
            return Ok(());
        }
        for file in stage.artifacts() {
            let p = self.path(&file);
            if p.exists() {
                return Err(PipelineError::WouldOverwrite(p));
            }
        }
        Ok(())
    }

    fn require(&self, stage: StageName, path: PathBuf) -> Result<PathBuf, PipelineError> {
        if path.is_file() {
            Ok(path)
        } else {
            Err(PipelineError::Dependency {
                stage: stage.as_str(),
                missing: path,
            })
        }
    }

    fn load_input(&self, stage: StageName) -> Result<PersonaSet, PipelineError> {
        let file = stage.input().expect("stage has an input set");
        Ok(load_set(&self.require(stage, self.path(file))?)?)
    }

    fn write(&self, file: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let p = self.path(file);
        write_atomic(&p, bytes)
            .map_err(|e| PipelineError::io(format!("writing {}", p.display()), e))
    }

    fn finish(
        &self,
        stage: StageName,
        set: Option<&PersonaSet>,
        report: Value,
    ) -> Result<StageOutcome, PipelineError> {
        if let (Some(set), Some(file)) = (set, stage.output()) {
            self.write(file, set.to_jsonl().as_bytes())?;
        }
        self.write(&stage.report_file(), to_json(&report).as_bytes())?;
        Ok(StageOutcome {
            stage,
            artifacts: stage.artifacts(),
            report,
        })
    }

    fn prompts(&self) -> Result<PromptSet, PipelineError> {
        match &self.config.paths.prompts_dir {
            None => Ok(PromptSet::bundled()),
            Some(d) => {
                let dir = self.config.resolve(d);
                PromptSet::from_dir(&dir)
                    .map_err(|e| PipelineError::io(format!("reading prompts {}", dir.display()), e))
            }
        }
    }

    fn lexicon(&self) -> Result<BiasLexicon, PipelineError> {
        match &self.config.paths.lexicon {
            None => Ok(BiasLexicon::bundled()),
            Some(p) => Ok(BiasLexicon::load(&self.config.resolve(p))?),
        }
    }

    fn distribution(&self) -> Result<DistributionSpec, PipelineError> {
        match &self.config.paths.distribution {
            None => Ok(DistributionSpec::bundled()),
            Some(p) => Ok(load_distribution(&self.config.resolve(p))?),
        }
    }

    fn generator(&self) -> Result<Box<dyn Generator>, PipelineError> {
        let g = &self.config.generator;
        Ok(match g.backend {
            ChatBackend::Mock => Box::new(MockGenerator::new(g.seed.unwrap_or(self.config.seed))),
            ChatBackend::Remote => Box::new(RemoteGenerator::new(
                Arc::new(g.client(self.config.concurrency)?),
                self.prompts()?,
                g.max_retries,
            )),
        })
    }

    fn reviewer(&self) -> Result<Box<dyn Reviewer>, PipelineError> {
        let r = &self.config.reviewer;
        Ok(match r.backend {
            ChatBackend::Mock => Box::new(MockReviewer::default()),
            ChatBackend::Remote => Box::new(RemoteReviewer::new(
                Arc::new(r.client(self.config.concurrency)?),
                self.prompts()?,
                r.max_retries,
            )),
        })
    }

    fn scorer(&self) -> Result<Arc<dyn SentenceScorer>, PipelineError> {
        let s = &self.config.scorer;
        Ok(match s.backend {
            ScorerBackend::Lexicon => Arc::new(LexiconScorer::new(LexiconScreen::new(
                self.lexicon()?,
                self.config.bm25,
                self.config.thresholds.screen,
            ))),
            ScorerBackend::Remote => Arc::new(RemoteScorer::from_endpoint(
                &s.endpoint,
                &s.model,
                s.timeout_secs,
                self.config.concurrency,
            )?),
        })
    }

    fn comparator(
        &self,
        scorer: Arc<dyn SentenceScorer>,
    ) -> Result<Box<dyn Comparator>, PipelineError> {
        let c = &self.config.comparator;
        Ok(match c.backend {
            ComparatorBackend::ScoreDifference => {
                Box::new(ScoreDifferenceComparator::new(scorer, c.margin))
            }
            ComparatorBackend::Remote => Box::new(RemoteComparator::new(
                Arc::new(c.chat().client(self.config.concurrency)?),
                self.prompts()?,
                c.max_retries,
            )),
        })
    }

    pub fn run_stage(&self, stage: StageName) -> Result<StageOutcome, PipelineError> {
        self.check_overwrite(stage)?;
        tracing::info!(stage = stage.as_str(), "running stage");
        self.pool.install(|| match stage {
            StageName::Generate => self.generate(),
            StageName::Debias => self.debias(),
            StageName::Fill => self.fill(),
            StageName::Resample => self.resample(),
            StageName::Evaluate => self.evaluate(),
        })
    }

    fn generate(&self) -> Result<StageOutcome, PipelineError> {
        let stage = StageName::Generate;
        let seeds_path =
            self.config
                .resolve(self.config.paths.seed_prompts.as_deref().ok_or_else(|| {
                    PipelineError::Validation("paths.seed_prompts is required".into())
                })?);
        let seeds_path = self.require(stage, seeds_path)?;
        let text = std::fs::read_to_string(&seeds_path)
            .map_err(|e| PipelineError::io(format!("reading {}", seeds_path.display()), e))?;
        let prompts: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect();
        if prompts.is_empty() {
            return Err(PipelineError::Validation(format!(
                "{} contains no seed prompts",
                seeds_path.display()
            )));
        }
        let generator = self.generator()?;
        let personas = prompts
            .par_iter()
            .enumerate()
            .map(|(i, prompt)| {
                let desc = generator.generate_description(prompt)?;
                generator.build_initial_persona(&format!("p{:04}", i + 1), &desc)
            })
            .collect::<Result<Vec<_>, ProviderError>>()?;
        let set = PersonaSet::new(Stage::Initial, personas)?;
        let mut dimension_counts: BTreeMap<DimensionKey, usize> =
            DimensionKey::ALL.iter().map(|&k| (k, 0)).collect();
        for p in set.personas() {
            for k in p.dimensions().keys() {
                *dimension_counts.entry(*k).or_default() += 1;
            }
        }
        let report = GenerateReport {
            generator: generator.name().to_string(),
            prompt_version: PROMPT_VERSION,
            seed: self.config.generator.seed.unwrap_or(self.config.seed),
            prompts: prompts.len(),
            personas: set.len(),
            dimension_counts,
            complete_personas: set.personas().iter().filter(|p| p.is_complete()).count(),
        };
        self.finish(stage, Some(&set), to_value(&report))
    }

    fn debias(&self) -> Result<StageOutcome, PipelineError> {
        let input = self.load_input(StageName::Debias)?;
        let reviewer = self.reviewer()?;
        let config = EliminationConfig {
            screen_threshold: self.config.thresholds.screen,
            bm25: self.config.bm25,
        };
        let (set, report) = eliminate(&input, reviewer.as_ref(), &self.lexicon()?, &config)?;
        self.finish(StageName::Debias, Some(&set), to_value(&report))
    }

    fn fill(&self) -> Result<StageOutcome, PipelineError> {
        let input = self.load_input(StageName::Fill)?;
        let provider = self.config.embedder.build()?;
        let config = FillConfig {
            weights: self.config.similarity,
            theta: self.config.thresholds.fill_theta,
            bm25: self.config.bm25,
        };
        let (set, records) = fill(&input, provider.as_ref(), &config)?;
        let mut counts = FillCounts {
            complete: input.len() - records.len(),
            ..FillCounts::default()
        };
        for r in &records {
            match r.gate {
                GateOutcome::Pass => {
                    counts.filled += 1;
                    counts.dimensions_filled += r.filled.len();
                }
                GateOutcome::Fail => counts.gate_failed += 1,
                GateOutcome::NoDonor => counts.no_donor += 1,
            }
        }
        let report = FillReport {
            embedder: format!(
                "{:?}/{}",
                self.config.embedder.backend,
                provider.dimension()
            )
            .to_lowercase(),
            theta: config.theta,
            alpha: config.weights.alpha,
            beta: config.weights.beta,
            counts,
            records,
        };
        self.finish(StageName::Fill, Some(&set), to_value(&report))
    }

    fn resample(&self) -> Result<StageOutcome, PipelineError> {
        let input = self.load_input(StageName::Resample)?;
        let (set, report) = resample_set(&input, &self.distribution()?, self.config.seed)?;
        self.finish(StageName::Resample, Some(&set), to_value(&report))
    }

    fn evaluate(&self) -> Result<StageOutcome, PipelineError> {
        let stage = StageName::Evaluate;
        let path = self.config.paths.transcripts.as_deref().ok_or_else(|| {
            PipelineError::Validation("paths.transcripts is required for evaluate".into())
        })?;
        let path = self.require(stage, self.config.resolve(path))?;
        let lines = load_transcript_file(&path)?;
        let scorer = self.scorer()?;
        let comparator = self.comparator(scorer.clone())?;
        let report = evaluate(&lines, scorer.as_ref(), comparator.as_ref())?;
        self.finish(stage, None, to_value(&report))
    }

    /// Runs generate, debias, fill and resample, then writes the merged
    /// report. Earlier stage outputs stay on disk when a later stage fails.
    pub fn run_all(&self) -> Result<PipelineReport, PipelineError> {
        const DAG: [StageName; 4] = [
            StageName::Generate,
            StageName::Debias,
            StageName::Fill,
            StageName::Resample,
        ];
        if !self.force {
            for s in DAG {
                self.check_overwrite(s)?;
            }
            let p = self.path(PIPELINE_REPORT_FILE);
            if p.exists() {
                return Err(PipelineError::WouldOverwrite(p));
            }
        }
        let mut stages = Vec::new();
        let mut timings = BTreeMap::new();
        for s in DAG {
            let start = Instant::now();
            stages.push(self.run_stage(s)?);
            timings.insert(s.as_str(), start.elapsed().as_secs_f64() * 1000.0);
        }
        let report = PipelineReport {
            schema: REPORT_SCHEMA,
            seed: self.config.seed,
            config: self.config.clone(),
            outputs: vec![DEBIASED_FILE.to_string(), UNBIASED_FILE.to_string()],
            stages,
        };
        self.write(PIPELINE_REPORT_FILE, to_json(&report).as_bytes())?;
        let timings = serde_json::json!({ "stage_ms": timings });
        self.write(TIMINGS_FILE, to_json(&timings).as_bytes())?;
        Ok(report)
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report serializes")
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

/// Stage files present in `dir`, for status output.
pub fn existing_artifacts(dir: &Path) -> Vec<String> {
    StageName::ALL
        .iter()
        .flat_map(|s| s.artifacts())
        .filter(|f| dir.join(f).exists())
        .collect()
}
