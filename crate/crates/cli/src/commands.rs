use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::{json, Value};
use subformer::config::{ConfigError, RunConfig};
use subformer::corpus::{load_corpus, write_corpus, AtomVocab, Corpus, CorpusError, TaskType};
use subformer::diagnostics::{
    attention_export, gcn_energy_profile, graph_dot, hop_histogram, mp_jacobian, probe_input, subformer_jacobian,
    token_energy_profile, SquashMap,
};
use subformer::graph::{peripheral_node, Graph};
use subformer::junction_tree::{decompose as jt_decompose, DecompositionError};
use subformer::model::{identity_weights, ModelError, Prepared, SubFormer};
use subformer::smiles::{parse_smiles, SmilesError};
use subformer::spectral::Matrix;
use subformer::training::{default_metric, evaluate, log_csv, train_corpus, Metric, TrainError};
use subformer::wl::jt_wl_distinguish;
use thiserror::Error;

use crate::{ModelSource, MoleculeArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Smiles(#[from] SmilesError),
    #[error(transparent)]
    Decomposition(#[from] DecompositionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Config(_) => "config",
            CliError::Corpus(_) => "corpus",
            CliError::Smiles(_) => "smiles",
            CliError::Decomposition(_) => "decomposition",
            CliError::Model(_) => "model",
            CliError::Train(_) => "train",
        }
    }
}

/// Writes the error as one JSON object on stderr.
pub fn report(e: &CliError) {
    eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Io { path: path.display().to_string(), message: e.to_string() })
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Io { path: path.display().to_string(), message: e.to_string() })
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string(v).expect("json serializes"));
}

fn graph_json(g: &Graph) -> Value {
    json!({
        "nodes": g.node_labels(),
        "edges": g.edges().iter().map(|e| (e.u, e.v, e.label)).collect::<Vec<_>>(),
    })
}

/// `(id, graph, targets)` of the selected molecule.
fn molecule(args: &MoleculeArgs, tasks: usize) -> Result<(String, Graph, Vec<Option<f64>>), CliError> {
    match (&args.smiles, &args.data) {
        (Some(s), _) => Ok((s.clone(), parse_smiles(s)?, vec![None; tasks])),
        (None, Some(path)) => {
            let corpus = load_corpus(path)?;
            let rec = match &args.id {
                Some(id) => corpus.records.iter().find(|r| &r.id == id),
                None => corpus.records.first(),
            }
            .ok_or_else(|| CliError::Usage(format!("record {:?} not found in {}", args.id, path.display())))?;
            let mut targets = rec.targets.clone();
            targets.resize(tasks, None);
            Ok((rec.id.clone(), rec.graph.clone(), targets))
        }
        (None, None) => Err(CliError::Usage("give --smiles or --data".into())),
    }
}

fn load_model(source: &ModelSource, g: &Graph) -> Result<SubFormer, CliError> {
    match (&source.checkpoint, &source.config) {
        (Some(ck), _) => Ok(SubFormer::load(ck)?),
        (None, Some(cfg)) => {
            // untrained weights; the atom vocabulary is the molecule's own
            let run = RunConfig::from_value(RunConfig::load(cfg)?)?;
            let vocab = AtomVocab::from_graphs([g]);
            Ok(SubFormer::new(run.model, 1, TaskType::Regression, vocab, run.train.seed)?)
        }
        (None, None) => Err(CliError::Usage("give --checkpoint or --config".into())),
    }
}

/// Loads the model and prepares the selected molecule for it.
fn model_and_item(source: &ModelSource, mol: &MoleculeArgs) -> Result<(SubFormer, Graph, Prepared), CliError> {
    let (id, g, mut targets) = molecule(mol, 0)?;
    let model = load_model(source, &g)?;
    targets.resize(model.tasks(), None);
    let item = model.prepare(&id, &g, &targets)?;
    Ok((model, g, item))
}

pub fn parse(smiles: Option<String>, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), CliError> {
    match (smiles, data) {
        (Some(s), _) => {
            print_json(&graph_json(&parse_smiles(&s)?));
            Ok(())
        }
        (None, Some(path)) => {
            let corpus = load_corpus(&path)?;
            if let Some(out) = out {
                write(&out, &write_corpus(&corpus))?;
            }
            print_json(&json!({
                "records": corpus.records.len(),
                "tasks": corpus.header.tasks,
                "task_type": corpus.header.task_type,
                "atom_vocab": corpus.vocab.labels(),
                "skipped": corpus.skipped,
            }));
            Ok(())
        }
        (None, None) => Err(CliError::Usage("give --smiles or --data".into())),
    }
}

pub fn decompose(mol: &MoleculeArgs, all: bool, json_out: Option<PathBuf>, dot: Option<PathBuf>) -> Result<(), CliError> {
    if all {
        let path = mol.data.as_ref().expect("clap requires --data");
        let corpus = load_corpus(path)?;
        let mut lines = String::new();
        for r in &corpus.records {
            let v = match jt_decompose(&r.graph) {
                Ok(d) => json!({ "id": r.id, "decomposition": d.to_json() }),
                Err(e) => json!({ "id": r.id, "error": e.to_string() }),
            };
            lines.push_str(&serde_json::to_string(&v).expect("json serializes"));
            lines.push('\n');
        }
        match json_out {
            Some(p) => write(&p, &lines)?,
            None => print!("{lines}"),
        }
        return Ok(());
    }
    let (_, g, _) = molecule(mol, 0)?;
    let d = jt_decompose(&g)?;
    let text = serde_json::to_string(&d.to_json()).expect("json serializes");
    match json_out {
        Some(p) => write(&p, &(text + "\n"))?,
        None => println!("{text}"),
    }
    if let Some(p) = dot {
        write(&p, &d.to_dot(None))?;
    }
    Ok(())
}

pub fn train(config: &Path, data: &Path, out: &Path, overrides: &[String]) -> Result<(), CliError> {
    let run_cfg = RunConfig::load_with_overrides(config, overrides)?;
    let corpus = load_corpus(data)?;
    create_dir(out)?;
    let run = train_corpus(&corpus, &run_cfg.model, &run_cfg.train, |rows| {
        for r in rows {
            log::info!("epoch {} {} loss {:.5} metric {:.5} lr {:.2e}", r.epoch, r.split, r.loss, r.metric, r.lr);
        }
    })?;
    run.model.save(out.join("checkpoint.json"))?;
    write(&out.join("log.csv"), &log_csv(&run.outcome.log))?;
    write(&out.join("config.json"), &(run_cfg.to_json_pretty() + "\n"))?;
    let ids = |idx: &[usize]| idx.iter().map(|&i| run.prepared[i].id.clone()).collect::<Vec<_>>();
    let splits = json!({ "train": ids(&run.splits.train), "valid": ids(&run.splits.valid), "test": ids(&run.splits.test) });
    write(&out.join("splits.json"), &(serde_json::to_string_pretty(&splits).expect("json serializes") + "\n"))?;

    let metric = default_metric(corpus.header.task_type);
    let mut summary = json!({
        "best_epoch": run.outcome.best_epoch,
        "best_loss": run.outcome.best_loss,
        "records": run.prepared.len(),
        "skipped": run.skipped,
        "metric": metric.name(),
    });
    for (name, idx) in [("train", &run.splits.train), ("valid", &run.splits.valid), ("test", &run.splits.test)] {
        let items: Vec<&Prepared> = idx.iter().map(|&i| &run.prepared[i]).collect();
        if !items.is_empty() {
            summary[name] = json!(evaluate(&run.model, &items, metric, run_cfg.train.batch_size).ok().map(|r| r.score));
        }
    }
    print_json(&summary);
    Ok(())
}

pub fn eval(checkpoint: &Path, data: &Path, metric: Option<String>, batch_size: usize) -> Result<(), CliError> {
    let model = SubFormer::load(checkpoint)?;
    let corpus: Corpus = load_corpus(data)?;
    if corpus.header.tasks != model.tasks() || corpus.header.task_type != model.task_type() {
        return Err(CliError::Usage(format!(
            "corpus has {} {:?} tasks, checkpoint expects {} {:?}",
            corpus.header.tasks,
            corpus.header.task_type,
            model.tasks(),
            model.task_type()
        )));
    }
    let metric = match metric {
        Some(m) => Metric::parse(&m).ok_or_else(|| CliError::Usage(format!("unknown metric `{m}`")))?,
        None => default_metric(model.task_type()),
    };
    let mut prepared = Vec::new();
    let mut skipped = corpus.skipped.iter().map(|s| json!({"id": s.id, "reason": s.reason})).collect::<Vec<_>>();
    for r in &corpus.records {
        match model.prepare(&r.id, &r.graph, &r.targets) {
            Ok(p) => prepared.push(p),
            Err(e) => skipped.push(json!({"id": r.id, "reason": e.to_string()})),
        }
    }
    let items: Vec<&Prepared> = prepared.iter().collect();
    let report = evaluate(&model, &items, metric, batch_size)?;
    print_json(&json!({
        "metric": metric.name(),
        "score": report.score,
        "per_task": report.per_task,
        "excluded_tasks": report.excluded,
        "records": items.len(),
        "skipped": skipped,
    }));
    Ok(())
}

pub struct DiagnoseFlags {
    pub energy: bool,
    pub gcn_layers: Option<usize>,
    pub jacobian: bool,
    pub reference: Option<usize>,
    pub threshold: f64,
    pub mp_only: Option<usize>,
}

fn squash_csv(map: &SquashMap) -> String {
    let mut s = String::from("node,norm,squashed\n");
    for (i, (n, q)) in map.norms.iter().zip(&map.squashed).enumerate() {
        s.push_str(&format!("{i},{n},{q}\n"));
    }
    s
}

pub fn diagnose(source: &ModelSource, mol: &MoleculeArgs, flags: DiagnoseFlags, out: Option<PathBuf>) -> Result<(), CliError> {
    if !flags.energy && !flags.jacobian {
        return Err(CliError::Usage("choose at least one of --energy, --jacobian".into()));
    }
    let (model, g, item) = model_and_item(source, mol)?;
    let id = item.id.clone();
    if let Some(dir) = &out {
        create_dir(dir)?;
    }
    let mut summary = json!({ "id": id });
    if flags.energy {
        let profile = token_energy_profile(&model, &item)?;
        summary["token_energy"] = json!(profile.values);
        if let Some(dir) = &out {
            write(&dir.join("token_energy.csv"), &profile.to_csv())?;
        }
        if let Some(layers) = flags.gcn_layers {
            let d = model.config().mp_hidden;
            let x0 = probe_input(&model, &item)?;
            let x = Matrix { rows: item.num_atoms, cols: d, data: x0[..item.num_atoms * d].to_vec() };
            let gcn = gcn_energy_profile(&g, &x, &identity_weights(d, layers));
            summary["gcn_energy"] = json!(gcn.values);
            if let Some(dir) = &out {
                write(&dir.join("gcn_energy.csv"), &gcn.to_csv())?;
            }
        }
    }
    if flags.jacobian {
        let reference = match flags.reference {
            Some(r) => r,
            None => peripheral_node(&g).map_err(|e| CliError::Usage(e.to_string()))?,
        };
        let blocks = match flags.mp_only {
            Some(k) => mp_jacobian(&model, &item, reference, k)?,
            None => subformer_jacobian(&model, &item, reference)?,
        };
        let map = SquashMap::from_blocks(reference, &blocks, flags.threshold);
        if let Some(dir) = &out {
            write(&dir.join("jacobian.csv"), &squash_csv(&map))?;
        }
        summary["jacobian"] = json!(map);
    }
    print_json(&summary);
    Ok(())
}

pub fn attention(source: &ModelSource, mol: &MoleculeArgs, out: &Path) -> Result<(), CliError> {
    let (model, g, item) = model_and_item(source, mol)?;
    let id = item.id.clone();
    let export = attention_export(&model, &item)?;
    create_dir(out)?;
    write(&out.join("attention.json"), &(serde_json::to_string_pretty(&export).expect("json serializes") + "\n"))?;
    write(&out.join("tree.dot"), &item.decomposition.to_dot(Some(&export.cls_to_clusters)))?;
    write(&out.join("molecule.dot"), &graph_dot(&g, Some(&export.cls_to_atoms)))?;
    print_json(&json!({
        "id": id,
        "cls_to_clusters": export.cls_to_clusters,
        "cls_to_atoms": export.cls_to_atoms,
        "files": ["attention.json", "tree.dot", "molecule.dot"],
    }));
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum PairMolecule {
    Smiles(String),
    Graph { nodes: Vec<u32>, #[serde(default)] edges: Vec<(usize, usize, u32)> },
}

impl PairMolecule {
    fn graph(&self) -> Result<Graph, CliError> {
        match self {
            PairMolecule::Smiles(s) => Ok(parse_smiles(s)?),
            PairMolecule::Graph { nodes, edges } => {
                Graph::new(nodes.clone(), edges.clone()).map_err(|e| CliError::Usage(e.to_string()))
            }
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Pair {
    id: Option<String>,
    a: PairMolecule,
    b: PairMolecule,
}

pub fn wl_test(pairs: &Path, edge_labels: bool) -> Result<(), CliError> {
    let text = fs::read_to_string(pairs).map_err(|e| CliError::Io { path: pairs.display().to_string(), message: e.to_string() })?;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let pair: Pair = serde_json::from_str(line)
            .map_err(|e| CliError::Usage(format!("{} line {}: {e}", pairs.display(), i + 1)))?;
        let id = pair.id.unwrap_or_else(|| format!("line{}", i + 1));
        let r = jt_wl_distinguish(&pair.a.graph()?, &pair.b.graph()?, edge_labels)?;
        print_json(&json!({ "pair_id": id, "wl": r.wl, "jt_wl": r.jt_wl, "rounds": r.rounds }));
    }
    Ok(())
}

pub fn hops(data: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let corpus = load_corpus(data)?;
    let h = hop_histogram(corpus.records.iter().map(|r| &r.graph));
    match out {
        Some(p) => {
            write(&p, &h.to_csv())?;
            print_json(&json!({ "graphs": h.graphs, "skipped": h.skipped, "max_hops": h.counts.len().saturating_sub(1) }));
        }
        None => print!("{}", h.to_csv()),
    }
    Ok(())
}
