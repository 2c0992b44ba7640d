use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use usekit::data::{generate_dataset, read_dataset, write_dataset, BehaviorSequence, BehaviorVocab, Dataset, TfIdf};
use usekit::eval::{
    bench_strategies, bench_to_csv, build_retrieval_task, future_behavior_task, run_retrieval, simulate_dynamic,
    Embedder, ModelEmbedder, RandomEmbedder, TfEmbedder, TfIdfEmbedder,
};
use usekit::model::{load_params, save_params, Parameters};
use usekit::state_store::{
    read_state, update_pool, update_recent_only, update_recompute_all, update_stateful, RecomputeBudget, StateStore,
    UpdateStrategy, UserState,
};
use usekit::trainer::{train, write_metrics_csv};

use crate::config::{ConfigError, RunConfig};
use crate::{Command, EvalArgs, EvalCommand};

pub fn run(command: Command, cfg: &RunConfig) -> Result<()> {
    match command {
        Command::GenData { out, .. } => gen_data(&out, cfg),
        Command::Train {
            data,
            out,
            metrics,
            checkpoints,
            ..
        } => train_cmd(&data, &out, metrics, checkpoints.as_deref(), cfg),
        Command::Embed { model, data, out } => embed_cmd(&model, &data, out.as_deref(), cfg),
        Command::UpdateState {
            model,
            store,
            data,
            vocab,
            strategy,
            out,
        } => update_state(&model, &store, &data, vocab, &strategy, out.as_deref(), cfg),
        Command::Eval(EvalCommand::Retrieval(args)) => eval_retrieval(&args, cfg),
        Command::Eval(EvalCommand::Fbp(args)) => eval_fbp(&args, cfg),
        Command::Simulate { model, data, out } => simulate(&model, &data, out.as_deref(), cfg),
        Command::Bench { model, data, out, .. } => bench(&model, &data, out.as_deref(), cfg),
        Command::SweepW { data, out, .. } => sweep_w(&data, out.as_deref(), cfg),
        Command::InspectState { state, store, user } => inspect_state(state, store, user, cfg),
    }
}

/// Writes to `out`, or stdout when absent.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_corpus(path: &Path, vocab: Option<&Path>) -> Result<(BehaviorVocab, Dataset)> {
    let vocab_path = vocab.map_or_else(|| with_suffix(path, ".vocab"), Path::to_path_buf);
    let vocab =
        BehaviorVocab::read(&vocab_path).with_context(|| format!("reading vocabulary {}", vocab_path.display()))?;
    let ds = read_dataset(path, &vocab).with_context(|| format!("reading corpus {}", path.display()))?;
    Ok((vocab, ds))
}

fn load_model(path: &Path, vocab: &BehaviorVocab) -> Result<Parameters<f32>> {
    let params = load_params(path).with_context(|| format!("loading model {}", path.display()))?;
    if params.config().vocab_size != vocab.len() {
        bail!(
            "model {} expects {} behavior ids, the corpus vocabulary has {}",
            path.display(),
            params.config().vocab_size,
            vocab.len()
        );
    }
    Ok(params)
}

fn gen_data(out: &Path, cfg: &RunConfig) -> Result<()> {
    let ds = generate_dataset(&cfg.persona, cfg.users, cfg.length, cfg.seed)?;
    let vocab = BehaviorVocab::desk(cfg.persona.num_behaviors);
    vocab.write(&with_suffix(out, ".vocab"))?;
    write_dataset(out, &ds, Some(&cfg.provenance()))?;
    log::info!(
        "wrote {} users of {} behaviors to {}",
        ds.len(),
        cfg.length,
        out.display()
    );
    Ok(())
}

fn train_cmd(
    data: &Path,
    out: &Path,
    metrics: Option<PathBuf>,
    checkpoints: Option<&Path>,
    cfg: &RunConfig,
) -> Result<()> {
    let (vocab, ds) = load_corpus(data, None)?;
    let model = cfg.model_for(vocab.len());
    if let Some(dir) = checkpoints {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let outcome = train(&ds, &model, &cfg.train_config(), checkpoints)?;
    save_params(&outcome.params, out)?;
    let prov = cfg.provenance();
    let metrics = metrics.unwrap_or_else(|| with_suffix(out, ".metrics.csv"));
    emit(Some(&metrics), &write_metrics_csv(&outcome.metrics, Some(&prov)))?;
    emit(
        Some(&with_suffix(out, ".config")),
        &format!("# {prov}\n{}", cfg.to_text()),
    )?;
    if let Some(last) = outcome.epochs.last() {
        log::info!(
            "trained {} steps; final train loss {:.4}, validation loss {}",
            outcome.total_steps,
            last.train_loss,
            last.val_loss.map_or("n/a".into(), |v| format!("{v:.4}"))
        );
    }
    Ok(())
}

fn embedding_row(out: &mut String, user_id: u64, extra: Option<u64>, e: &[f64]) {
    let _ = write!(out, "{user_id}");
    if let Some(x) = extra {
        let _ = write!(out, ",{x}");
    }
    for v in e {
        let _ = write!(out, ",{v}");
    }
    out.push('\n');
}

fn embedding_header(out: &mut String, prov: &str, extra: Option<&str>, dim: usize) {
    let _ = writeln!(out, "# {prov}");
    out.push_str("user_id");
    if let Some(x) = extra {
        let _ = write!(out, ",{x}");
    }
    for j in 0..dim {
        let _ = write!(out, ",e{j}");
    }
    out.push('\n');
}

fn embed_cmd(model: &Path, data: &Path, out: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    let (vocab, ds) = load_corpus(data, None)?;
    let params = load_model(model, &vocab)?;
    let seqs: Vec<&[u32]> = ds.users.iter().map(|u| u.ids.as_slice()).collect();
    let vectors = usekit::eval::embed_all(&ModelEmbedder::new(&params), &seqs, cfg.workers)?;
    let mut text = String::new();
    embedding_header(&mut text, &cfg.provenance(), None, params.config().hidden_size);
    for (u, e) in ds.users.iter().zip(&vectors) {
        embedding_row(&mut text, u.user_id, None, e);
    }
    emit(out, &text)
}

fn update_state(
    model: &Path,
    store: &Path,
    data: &Path,
    vocab: Option<PathBuf>,
    strategy: &str,
    out: Option<&Path>,
    cfg: &RunConfig,
) -> Result<()> {
    let strategy: UpdateStrategy = strategy
        .parse()
        .map_err(|_| ConfigError::new("strategy", format!("unknown strategy `{strategy}`")))?;
    let (vocab, ds) = load_corpus(data, vocab.as_deref())?;
    let params = load_model(model, &vocab)?;
    let mut store = StateStore::open(store)?;
    let budget = RecomputeBudget {
        chunkwise_fallback: true,
        ..RecomputeBudget::default()
    };
    let mut text = String::new();
    embedding_header(
        &mut text,
        &cfg.provenance(),
        Some("behaviors_seen"),
        params.config().hidden_size,
    );
    let mut updated: Vec<UserState> = Vec::new();
    for u in &ds.users {
        let (seen, e) = match strategy {
            UpdateStrategy::Stateful | UpdateStrategy::PoolEmbeddings => {
                let state = store.load_or_init(u.user_id, &params)?;
                let (next, e) = if strategy == UpdateStrategy::Stateful {
                    update_stateful(&state, &u.ids, &params)?
                } else {
                    update_pool(&state, &u.ids, &params, cfg.pool_weighting)?
                };
                let seen = next.behaviors_seen;
                updated.push(next);
                (seen, e)
            }
            UpdateStrategy::RecentOnly => (u.ids.len() as u64, update_recent_only(&u.ids, &params)?),
            UpdateStrategy::RecomputeAll => {
                store.archive(u.user_id, &u.ids)?;
                let history = store.history(u.user_id)?;
                (history.len() as u64, update_recompute_all(&history, &params, &budget)?)
            }
        };
        embedding_row(&mut text, u.user_id, Some(seen), &e);
    }
    store.save_many(&updated)?;
    log::info!("{strategy}: updated {} users in {}", ds.len(), store.root().display());
    emit(out, &text)
}

fn embedders<'a>(
    args: &EvalArgs,
    params: Option<&'a Parameters<f32>>,
    vocab: &BehaviorVocab,
    ds: &Dataset,
    cfg: &RunConfig,
) -> Result<Vec<Box<dyn Embedder + 'a>>> {
    let names = args.embedders.as_deref().unwrap_or(if params.is_some() {
        "use,tf,tfidf,random"
    } else {
        "tf,tfidf,random"
    });
    names
        .split(',')
        .map(|n| -> Result<Box<dyn Embedder + 'a>> {
            Ok(match n.trim() {
                "use" => {
                    Box::new(ModelEmbedder::new(params.ok_or_else(|| {
                        ConfigError::new("model", "the `use` embedder needs --model")
                    })?))
                }
                "tf" => Box::new(TfEmbedder {
                    vocab_size: vocab.len(),
                }),
                "tfidf" => Box::new(TfIdfEmbedder {
                    model: TfIdf::fit(ds.users.iter().map(|u| u.ids.as_slice()), vocab.len()),
                }),
                "random" => Box::new(RandomEmbedder {
                    dim: cfg.model.hidden_size,
                    seed: cfg.seed,
                }),
                other => return Err(ConfigError::new("embedders", format!("unknown embedder `{other}`")).into()),
            })
        })
        .collect()
}

fn eval_inputs(args: &EvalArgs) -> Result<(BehaviorVocab, Dataset, Option<Parameters<f32>>)> {
    let (vocab, ds) = load_corpus(&args.data, None)?;
    let params = args.model.as_deref().map(|m| load_model(m, &vocab)).transpose()?;
    Ok((vocab, ds, params))
}

fn eval_retrieval(args: &EvalArgs, cfg: &RunConfig) -> Result<()> {
    let (vocab, ds, params) = eval_inputs(args)?;
    let embedders = embedders(args, params.as_ref(), &vocab, &ds, cfg)?;
    let instances = build_retrieval_task(&ds.users, vocab.len(), &cfg.retrieval_config())?;
    let mut text = format!("# {}\nembedder,mrr,instances,fallback_instances\n", cfg.provenance());
    for e in &embedders {
        let r = run_retrieval(&instances, e.as_ref(), cfg.workers)?;
        let _ = writeln!(
            text,
            "{},{:.6},{},{}",
            r.embedder,
            r.mrr,
            instances.len(),
            r.fallback_instances
        );
    }
    emit(args.out.as_deref(), &text)
}

fn eval_fbp(args: &EvalArgs, cfg: &RunConfig) -> Result<()> {
    let (vocab, ds, params) = eval_inputs(args)?;
    let embedders = embedders(args, params.as_ref(), &vocab, &ds, cfg)?;
    let task = cfg.fbp_config(vocab.behaviors_of_interest());
    let mut text = format!("# {}\nembedder,auc,behaviors_scored,n_test\n", cfg.provenance());
    for e in &embedders {
        let r = future_behavior_task(&ds.users, e.as_ref(), &task, cfg.workers)?;
        let _ = writeln!(text, "{},{:.6},{},{}", r.embedder, r.auc, r.behaviors_scored, r.n_test);
    }
    emit(args.out.as_deref(), &text)
}

fn simulate(model: &Path, data: &Path, out: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    let (vocab, ds) = load_corpus(data, None)?;
    let params = load_model(model, &vocab)?;
    let report = simulate_dynamic(&ds.users, &params, &cfg.simulation_config())?;
    eprint!("{}", report.table());
    emit(out, &report.to_csv(Some(&cfg.provenance())))
}

fn bench(model: &Path, data: &Path, out: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    let (vocab, ds) = load_corpus(data, None)?;
    let params = load_model(model, &vocab)?;
    let rows = bench_strategies(&ds.users, &params, &cfg.schedule, &cfg.strategies, &cfg.bench)?;
    emit(out, &bench_to_csv(&rows, Some(&cfg.provenance())))
}

fn sweep_w(data: &Path, out: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    let (vocab, ds) = load_corpus(data, None)?;
    let (eval_users, train_users): (Vec<BehaviorSequence>, Vec<BehaviorSequence>) = ds
        .users
        .iter()
        .cloned()
        .enumerate()
        .fold((Vec::new(), Vec::new()), |(mut e, mut t), (i, u)| {
            if i % 5 == 0 {
                e.push(u)
            } else {
                t.push(u)
            }
            (e, t)
        });
    let train_ds = Dataset {
        vocab_fingerprint: ds.vocab_fingerprint.clone(),
        users: train_users,
    };
    let mut text = format!("# {}\nw,input_len,mrr\n", cfg.provenance());
    for &w in &cfg.sweep_w {
        let mut run = cfg.clone();
        run.set("future_window", &w.to_string())?;
        // the future window must fit inside a training window
        run.train.seq_len = run.train.seq_len.max(2 * w);
        let outcome = train(&train_ds, &run.model_for(vocab.len()), &run.train_config(), None)?;
        for &len in &cfg.sweep_lengths {
            let rcfg = usekit::eval::RetrievalConfig {
                window_len: len,
                ..cfg.retrieval_config()
            };
            let instances = build_retrieval_task(&eval_users, vocab.len(), &rcfg)?;
            let r = run_retrieval(&instances, &ModelEmbedder::new(&outcome.params), cfg.workers)?;
            let _ = writeln!(text, "{w},{len},{:.6}", r.mrr);
            log::info!("W={w} input_len={len}: mrr {:.4}", r.mrr);
        }
    }
    emit(out, &text)
}

fn inspect_state(state: Option<PathBuf>, store: Option<PathBuf>, user: Option<u64>, cfg: &RunConfig) -> Result<()> {
    let s = match (state, store, user) {
        (Some(path), _, _) => read_state(&path)?,
        (None, Some(root), Some(uid)) => {
            let store = StateStore::open(&root)?;
            let entry = store
                .entries()
                .find(|e| e.user_id == uid)
                .with_context(|| format!("user {uid} has no state in {}", root.display()))?;
            read_state(&store.root().join(&entry.record))?
        }
        _ => return Err(ConfigError::new("state", "give --state FILE or --store DIR --user ID").into()),
    };
    let (layers, heads) = (
        s.model.layers.len(),
        s.model.layers.first().map_or(0, |l| l.heads.len()),
    );
    let norm = s.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut text = format!("# {}\n", cfg.provenance());
    let _ = writeln!(text, "user_id: {}", s.user_id);
    let _ = writeln!(text, "version: {}", s.version);
    let _ = writeln!(text, "fingerprint: {}", s.fingerprint.to_hex());
    let _ = writeln!(text, "behaviors_seen: {}", s.behaviors_seen);
    let _ = writeln!(text, "periods_seen: {}", s.periods_seen);
    let _ = writeln!(text, "embedding_dim: {}", s.embedding.len());
    let _ = writeln!(text, "embedding_norm: {norm}");
    let _ = writeln!(text, "layers: {layers}");
    let _ = writeln!(text, "heads: {heads}");
    let _ = writeln!(text, "pooled_periods: {}", s.period_embeddings.len());
    emit(None, &text)
}
