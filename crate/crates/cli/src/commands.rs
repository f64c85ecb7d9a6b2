use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use prefkit_core::analytics::{self, GroupBy};
use prefkit_core::corpus::{self, load_dataset, split_dataset, Dataset, GenerationRecord};
use prefkit_core::embed::{load_embeddings, EmbeddingKind, EmbeddingStore, FeatureIndex};
use prefkit_core::metrics::{
    self, distribution_summary, ensemble_agreement, eval_prompts, evaluate, evaluation_keys,
    labels_by_annotator, load_scores, normalize_scores, spearman, win_rate, AnnotatorLabel, HeadScorer,
    ScoreTable, WinRatePrompt,
};
use prefkit_core::reward::RewardHead;
use prefkit_core::select::{build_knn_graph, chunked_select, select_diverse};
use prefkit_core::train::{grid_search, train_features, PairFeatures, TrainConfig};
use prefkit_core::par;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::args::*;
use crate::{labels_from_rankings, rerank, ModelRanking};

pub fn run(cli: Cli) -> Result<()> {
    let Cli {
        command,
        seed,
        workers,
        out,
    } = cli;
    if workers == Some(0) {
        bail!("--workers must be at least 1");
    }
    let ctx = Ctx { seed, out };
    if let Command::Serve(args) = command {
        return serve(args);
    }
    par::with_workers(workers, move || match command {
        Command::SelectPrompts(a) => select_prompts(&ctx, a),
        Command::ExtractPairs(a) => extract_pairs(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Agreement(a) => agreement(&ctx, a),
        Command::Winrate(a) => winrate(&ctx, a),
        Command::Interpolate(a) => interpolate(&ctx, a),
        Command::RankModels(a) => rank_models(&ctx, a),
        Command::Analyze(a) => analyze(&ctx, a),
        Command::Rerank(a) => rerank_cmd(&ctx, a),
        Command::Serve(_) => unreachable!("handled above"),
    })
}

struct Ctx {
    seed: u64,
    out: Option<PathBuf>,
}

impl Ctx {
    fn emit(&self, text: &str) -> Result<()> {
        match &self.out {
            Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }

    fn emit_json(&self, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.emit(&text)
    }
}

fn load_data(dir: &Path) -> Result<Dataset> {
    load_dataset(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn load_store(path: &Path) -> Result<EmbeddingStore> {
    load_embeddings(path).with_context(|| format!("loading embeddings from {}", path.display()))
}

fn select_prompts(ctx: &Ctx, a: SelectArgs) -> Result<()> {
    let store = load_store(&a.embeddings)?.of_kind(EmbeddingKind::Text);
    let ids = match a.set_size {
        Some(size) => chunked_select(&store, size, a.per_set, a.k, a.decay)?,
        None => select_diverse(&build_knn_graph(&store, a.k)?, a.count.min(store.len()), a.decay)?,
    };
    ctx.emit(&ids.iter().map(|id| format!("{id}\n")).collect::<String>())
}

fn extract_pairs(ctx: &Ctx, a: DataArgs) -> Result<()> {
    let d = load_data(&a.data)?;
    let mut text = String::new();
    for p in d.pairs() {
        text.push_str(&serde_json::to_string(p)?);
        text.push('\n');
    }
    ctx.emit(&text)
}

/// Holds out a seeded share of ranked prompts.
fn validation_prompts(d: &Dataset, fraction: f64, seed: u64) -> Result<BTreeSet<String>> {
    if !(0.0..1.0).contains(&fraction) {
        bail!("--val-fraction must be in [0, 1)");
    }
    let mut ranked: Vec<String> = d
        .rankings
        .iter()
        .map(|r| r.prompt_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    ranked.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = (ranked.len() as f64 * fraction).round() as usize;
    Ok(ranked.into_iter().take(n).collect())
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let d = load_data(&a.data)?;
    let store = load_store(&a.embeddings)?;
    let (train_d, val_d) = split_dataset(&d, &validation_prompts(&d, a.val_fraction, ctx.seed)?)?;
    let index = FeatureIndex::with_generations(&store, &d.generations);
    let train_f = PairFeatures::resolve(train_d.pairs(), &index)?;
    let val_f = PairFeatures::resolve(val_d.pairs(), &index)?;
    let mut configs = Vec::new();
    for &lr in &a.lr {
        for &batch_size in &a.batch {
            configs.push(TrainConfig {
                base_learning_rate: lr,
                batch_size,
                epochs: a.epochs,
                seed: ctx.seed,
                frozen_fraction: a.frozen_fraction,
                hidden_dims: a.hidden.clone(),
                schedule_steps: None,
            });
        }
    }
    let grid = if configs.len() > 1 {
        grid_search(&configs, &train_f, &val_f)?
    } else {
        Vec::new()
    };
    let best = grid.first().map_or_else(|| configs[0].clone(), |g| g.config.clone());
    let outcome = train_features(&best, &train_f, &val_f)?;
    outcome
        .head
        .save(&a.model)
        .with_context(|| format!("writing {}", a.model.display()))?;
    if let Some(path) = &a.report {
        outcome.history.save_report(path)?;
    }
    ctx.emit_json(&json!({
        "train_pairs": train_f.len(),
        "val_pairs": val_f.len(),
        "config": best,
        "best_epoch": outcome.history.best_epoch,
        "val_accuracy": outcome.history.best_val_accuracy(),
        "grid": grid.iter().map(|g| json!({
            "lr": g.config.base_learning_rate,
            "batch": g.config.batch_size,
            "val_accuracy": g.val_accuracy,
            "best_epoch": g.best_epoch,
        })).collect::<Vec<_>>(),
    }))
}

/// Scorers available to a command: a trained head and any score tables.
struct Scorers {
    head: Option<(RewardHead, EmbeddingStore)>,
    tables: BTreeMap<String, ScoreTable>,
}

impl Scorers {
    fn load(a: &ScorerArgs) -> Result<Self> {
        let head = match (&a.model, &a.embeddings) {
            (Some(m), Some(e)) => Some((
                RewardHead::load(m).with_context(|| format!("loading {}", m.display()))?,
                load_store(e)?,
            )),
            _ => None,
        };
        let tables = match &a.scores {
            Some(p) => load_scores(p).with_context(|| format!("loading {}", p.display()))?,
            None => BTreeMap::new(),
        };
        Ok(Self { head, tables })
    }

    fn names(&self) -> Vec<String> {
        self.head
            .iter()
            .map(|_| "model".to_string())
            .chain(self.tables.keys().cloned())
            .collect()
    }

    /// Scores for `keys` under `name`. `model` is the head, `random` draws
    /// uniform scores from the seed.
    fn table(&self, name: &str, keys: &[(String, String)], gens: &[GenerationRecord], seed: u64) -> Result<ScoreTable> {
        match name {
            "model" => {
                let Some((head, store)) = &self.head else {
                    bail!("scorer `model` needs --model and --embeddings");
                };
                let scorer = HeadScorer::new("model", head, FeatureIndex::with_generations(store, gens));
                Ok(ScoreTable::capture(&scorer, keys)?)
            }
            "random" if !self.tables.contains_key("random") => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut t = ScoreTable::new("random");
                for (p, i) in keys {
                    t.insert(p.as_str(), i.as_str(), rng.random::<f64>());
                }
                Ok(t)
            }
            other => self.tables.get(other).cloned().with_context(|| {
                format!("unknown scorer `{other}`; available: {}", self.names().join(", "))
            }),
        }
    }
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let d = load_data(&a.data)?;
    let scorers = Scorers::load(&a.scorers)?;
    let names = scorers.names();
    if names.is_empty() {
        bail!("nothing to evaluate: pass --model/--embeddings or --scores");
    }
    let prompts = eval_prompts(&d);
    let keys = evaluation_keys(&prompts);
    let mut reports = Vec::new();
    for name in names {
        let table = scorers.table(&name, &keys, &d.generations, ctx.seed)?;
        reports.push(evaluate(&table, &prompts)?);
    }
    ctx.emit_json(&reports)
}

fn agreement(ctx: &Ctx, a: AgreementArgs) -> Result<()> {
    let labels: Vec<AnnotatorLabel> = match (&a.labels, &a.data) {
        (Some(path), _) => corpus::read_jsonl(path)?,
        (None, Some(dir)) => labels_from_rankings(&load_data(dir)?.rankings),
        (None, None) => bail!("pass --data or --labels"),
    };
    let by = labels_by_annotator(&labels);
    let names: Vec<&String> = by.keys().collect();
    let matrix: Vec<Vec<Option<f64>>> = names
        .iter()
        .map(|x| {
            names
                .iter()
                .map(|y| metrics::agreement(&by[*x], &by[*y]).ok().map(|g| g.rate))
                .collect()
        })
        .collect();
    let ensemble: BTreeMap<&String, Option<f64>> = names
        .iter()
        .map(|n| (*n, ensemble_agreement(&by, n).ok().map(|g| g.rate)))
        .collect();
    ctx.emit_json(&json!({
        "annotators": names,
        "matrix": matrix,
        "ensemble": ensemble,
    }))
}

fn winrate(ctx: &Ctx, a: WinrateArgs) -> Result<()> {
    let d = load_data(&a.data)?;
    let scorers = Scorers::load(&a.scorers)?;
    let prompts: Vec<WinRatePrompt> = d.rankings.iter().map(WinRatePrompt::from_ranking).collect();
    let keys: Vec<(String, String)> = prompts
        .iter()
        .flat_map(|p| p.candidates.iter().map(|c| (p.prompt_id.clone(), c.clone())))
        .collect();
    let ta = scorers.table(&a.a, &keys, &d.generations, ctx.seed)?;
    let tb = scorers.table(&a.b, &keys, &d.generations, ctx.seed.wrapping_add(1))?;
    let w = win_rate(&ta, &tb, &prompts, a.top_n)?;
    ctx.emit_json(&json!({
        "a": a.a,
        "b": a.b,
        "top_n": a.top_n,
        "prompts": prompts.len(),
        "rate": w.rate,
        "wins": w.wins,
        "losses": w.losses,
        "ties": w.ties,
    }))
}

fn interpolate(ctx: &Ctx, a: InterpolateArgs) -> Result<()> {
    let d = load_data(&a.data)?;
    let scorers = Scorers::load(&a.scorers)?;
    let prompts = eval_prompts(&d);
    let keys = evaluation_keys(&prompts);
    let ta = scorers.table(&a.a, &keys, &d.generations, ctx.seed)?;
    let tb = scorers.table(&a.b, &keys, &d.generations, ctx.seed.wrapping_add(1))?;
    let mut rows = Vec::new();
    for &lambda in &a.lambda {
        let mixed = metrics::interpolate(&ta, &tb, lambda, &keys)?;
        rows.push(json!({ "lambda": lambda, "report": evaluate(&mixed, &prompts)? }));
    }
    ctx.emit_json(&rows)
}

fn rank_models(ctx: &Ctx, a: RankModelsArgs) -> Result<()> {
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let input: ModelRanking = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.input.display()))?;
    let models: Vec<&String> = input.human.keys().collect();
    let human: Vec<f64> = models.iter().map(|m| input.human[*m]).collect();
    let mut rho = BTreeMap::new();
    for (name, ranks) in &input.metrics {
        let aligned = models
            .iter()
            .map(|m| ranks.get(*m).copied().with_context(|| format!("metric `{name}` lacks model `{m}`")))
            .collect::<Result<Vec<f64>>>()?;
        rho.insert(name, spearman(&human, &aligned)?);
    }
    let mut distributions = BTreeMap::new();
    for (scorer, per_model) in &input.scores {
        let all: Vec<f64> = per_model.values().flatten().copied().collect();
        let normalized = normalize_scores(&all).with_context(|| format!("normalizing `{scorer}`"))?;
        let mut rest = normalized.as_slice();
        let mut summaries = BTreeMap::new();
        for (model, values) in per_model {
            let (mine, tail) = rest.split_at(values.len());
            rest = tail;
            summaries.insert(model, distribution_summary(mine)?);
        }
        distributions.insert(scorer, summaries);
    }
    ctx.emit_json(&json!({ "spearman": rho, "distributions": distributions }))
}

fn analyze(ctx: &Ctx, a: DataArgs) -> Result<()> {
    let d = load_data(&a.data)?;
    let tables = [
        ("categories.tsv", analytics::category_tsv(&analytics::category_summary(&d))),
        (
            "problems_by_category.tsv",
            analytics::problem_tsv(&analytics::problem_frequency(&d, GroupBy::Category)),
        ),
        (
            "problems_by_bucket.tsv",
            analytics::problem_tsv(&analytics::problem_frequency(&d, GroupBy::ProportionBucket)),
        ),
        ("buckets.tsv", analytics::bucket_tsv(&analytics::bucket_summary(&d))),
    ];
    match &ctx.out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            for (name, body) in &tables {
                let path = dir.join(name);
                fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(())
        }
        None => {
            for (name, body) in &tables {
                print!("# {name}\n{body}\n");
            }
            Ok(())
        }
    }
}

fn rerank_cmd(ctx: &Ctx, a: RerankArgs) -> Result<()> {
    let scorers = Scorers::load(&a.scorers)?;
    let data = a.data.as_deref().map(load_data).transpose()?;
    let gens = data.as_ref().map_or(&[][..], |d| d.generations.as_slice());
    let candidates = if a.candidates.is_empty() {
        let mut ids: Vec<String> = gens
            .iter()
            .filter(|g| g.prompt_id == a.prompt)
            .map(|g| g.id.clone())
            .collect();
        ids.sort();
        if ids.is_empty() {
            bail!("no candidates: pass --candidates or a --data with generations of `{}`", a.prompt);
        }
        ids
    } else {
        a.candidates.clone()
    };
    let keys: Vec<(String, String)> = candidates.iter().map(|c| (a.prompt.clone(), c.clone())).collect();
    let table = scorers.table(&a.scorer, &keys, gens, ctx.seed)?;
    let top = rerank(&table, &a.prompt, &candidates, a.top_n)?;
    ctx.emit(&top.iter().map(|id| format!("{id}\n")).collect::<String>())
}

fn serve(a: ServeArgs) -> Result<()> {
    let mut config = prefkit_service::ServiceConfig::new(&a.data);
    config.qualification_threshold = a.qualification_threshold;
    config.skip_cap = a.skip_cap;
    config.image_url_prefix = a.image_url_prefix;
    let service = Arc::new(prefkit_service::Service::open(config)?);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.serve_addr)
            .await
            .with_context(|| format!("binding {}", a.serve_addr))?;
        eprintln!("listening on {}", listener.local_addr()?);
        prefkit_service::serve_with_shutdown(listener, service, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}
