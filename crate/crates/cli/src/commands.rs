use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgvae_core::checks::{gradient_suite, GRAD_TOLERANCE};
use rgvae_core::distmult::{self, train_distmult, DistMult, DistMultConfig, DistMultTrainConfig, LossKind};
use rgvae_core::experiments::{
    export_param_histograms, generate_triples, interpolate_between, interpolate_dims, validate_generated,
    write_interpolation_tsv, write_param_tsv, write_traversal_tsv, write_triples_tsv, RelationFilter,
};
use rgvae_core::kg::{Split, Triple, TripleStore, TypeCatalog, TypeMatch};
use rgvae_core::linkpred::{evaluate, subset_sample, write_ranks_tsv, EvalOptions, TripleScorer};
use rgvae_core::model::{train_rgvae, EncoderKind, EpochStats, Rgvae, RgvaeConfig, TrainConfig};
use rgvae_core::tensor::{Checkpoint, OptimizerConfig};

use crate::args::{
    Cli, Command, EvalArgs, GenerateArgs, GradcheckArgs, InterpMode, InterpolateArgs, LossArg, ModelKind,
    OptimizerArgs, ParamsArgs, SplitArg, TrainArgs, TypeMatchArg,
};
use crate::Failure;

type Pairs = Vec<(String, String)>;

const MODEL_KEY: &str = "model";
const DATASET_KEY: &str = "dataset_dir";
const FINAL_KEY: &str = "final_mode";

fn usage(e: impl ToString) -> Failure {
    Failure::Usage(e.to_string())
}

fn pair(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::EvalLp(a) => eval_lp(a),
        Command::Generate(a) => generate(a),
        Command::Interpolate(a) => interpolate(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Params(a) => params(a),
    }
}

/// Buffers a whole report and writes it in one go.
fn emit(path: Option<&Path>, body: &[u8]) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, body)?,
        None => io::stdout().lock().write_all(body)?,
    }
    Ok(())
}

fn comment_header(pairs: &[(String, String)], w: &mut impl Write) -> io::Result<()> {
    for (k, v) in pairs {
        writeln!(w, "# {k}={v}")?;
    }
    Ok(())
}

fn optimizer(kind: ModelKind, a: &OptimizerArgs) -> Result<OptimizerConfig, Failure> {
    let mut o = if kind.is_graph_vae() {
        OptimizerConfig::default()
    } else {
        distmult::default_optimizer()
    };
    if let Some(v) = a.lr {
        o.learning_rate = v;
    }
    if let Some(v) = a.adam_beta1 {
        o.beta1 = v;
    }
    if let Some(v) = a.adam_beta2 {
        o.beta2 = v;
    }
    if let Some(v) = a.adam_eps {
        o.epsilon = v;
    }
    if let Some(v) = a.lookahead_k {
        o.lookahead_k = v;
    }
    if let Some(v) = a.lookahead_alpha {
        o.lookahead_alpha = v;
    }
    if let Some(v) = a.grad_centralization {
        o.gradient_centralization = v;
    }
    o.validate().map_err(usage)?;
    Ok(o)
}

fn optimizer_pairs(o: &OptimizerConfig) -> Pairs {
    vec![
        pair("lr", o.learning_rate),
        pair("adam_beta1", o.beta1),
        pair("adam_beta2", o.beta2),
        pair("adam_eps", o.epsilon),
        pair("lookahead_k", o.lookahead_k),
        pair("lookahead_alpha", o.lookahead_alpha),
        pair("grad_centralization", o.gradient_centralization),
    ]
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let opt = optimizer(a.model, &a.optimizer)?;
    let batch_size = a
        .batch_size
        .unwrap_or(if a.model.is_graph_vae() { 64 } else { 512 });
    if batch_size == 0 {
        return Err(usage("batch size must be positive"));
    }
    let store = TripleStore::load_dir(&a.dataset_dir, a.final_mode).map_err(at(&a.dataset_dir))?;
    let triples = store.training_split();

    let mut run: Pairs = vec![
        pair("command", "train"),
        pair(MODEL_KEY, a.model),
        pair(DATASET_KEY, a.dataset_dir.display()),
        pair(FINAL_KEY, a.final_mode),
        pair("epochs", a.epochs),
        pair("batch_size", batch_size),
        pair("seed", a.seed),
    ];
    run.extend(optimizer_pairs(&opt));

    enum Built {
        Graph(Rgvae, TrainConfig),
        Dm(DistMult, DistMultTrainConfig),
    }
    let (built, model_pairs) = if a.model.is_graph_vae() {
        let config = RgvaeConfig {
            n: a.n,
            d_z: a.d_z,
            d_h: a.d_h,
            dropout: a.dropout,
            beta: a.beta,
            delta: a.delta,
            perminv: a.perminv,
            encoder: if a.model == ModelKind::Crgvae {
                EncoderKind::Gcn
            } else {
                EncoderKind::Mlp
            },
            clipgrad: a.clipgrad,
            match_iterations: a.match_iterations,
            ..RgvaeConfig::new(store.num_entities(), store.num_relations())
        };
        config.validate().map_err(usage)?;
        if !(a.max_grad_norm > 0.0) {
            return Err(usage("max grad norm must be positive"));
        }
        run.push(pair("max_grad_norm", a.max_grad_norm));
        let pairs = config.to_pairs();
        let tc = TrainConfig {
            epochs: a.epochs,
            batch_size,
            seed: a.seed,
            optimizer: opt,
            max_grad_norm: a.max_grad_norm,
        };
        (Built::Graph(Rgvae::new(config, a.seed)?, tc), pairs)
    } else {
        let config = DistMultConfig {
            d_emb: a.d_emb,
            variational: a.model == ModelKind::Vdistmult,
            loss: match a.loss {
                LossArg::Bce => LossKind::Bce,
                LossArg::Elbo => LossKind::Elbo,
            },
            beta: a.beta,
            ..DistMultConfig::new(store.num_entities(), store.num_relations())
        };
        config.validate().map_err(usage)?;
        run.push(pair("negatives", a.negatives));
        let pairs = config.to_pairs();
        let tc = DistMultTrainConfig {
            epochs: a.epochs,
            batch_size,
            negatives: a.negatives,
            seed: a.seed,
            optimizer: opt,
        };
        (Built::Dm(DistMult::new(config, a.seed)?, tc), pairs)
    };

    let mut log: Box<dyn Write> = match &a.log {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    };
    comment_header(&run, &mut log)?;
    comment_header(&model_pairs, &mut log)?;
    writeln!(log, "epoch\telbo\trecon\tkl\tperm_rate")?;
    let mut io_error = None;
    let mut on_epoch = |s: &EpochStats| {
        let line = writeln!(
            log,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            s.epoch, s.elbo, s.recon, s.kl, s.perm_rate
        )
        .and_then(|_| log.flush());
        if let Err(e) = line {
            io_error.get_or_insert(e);
        }
    };
    let checkpoint = match built {
        Built::Graph(mut m, tc) => {
            train_rgvae(&mut m, &triples, &tc, &mut on_epoch)?;
            m.to_checkpoint(&run)
        }
        Built::Dm(mut m, tc) => {
            train_distmult(&mut m, &triples, &tc, &mut on_epoch)?;
            m.to_checkpoint(&run)
        }
    };
    if let Some(e) = io_error {
        return Err(e.into());
    }
    checkpoint.save(&a.out).map_err(at(&a.out))?;
    log::info!("checkpoint written to {}", a.out.display());
    Ok(())
}

enum Loaded {
    Graph(Rgvae),
    Dm(DistMult),
}

impl Loaded {
    fn scorer(&self) -> &dyn TripleScorer {
        match self {
            Loaded::Graph(m) => m,
            Loaded::Dm(m) => m,
        }
    }

    fn sizes(&self) -> (usize, usize) {
        match self {
            Loaded::Graph(m) => (m.config().num_entities, m.config().num_relations),
            Loaded::Dm(m) => (m.config().num_entities, m.config().num_relations),
        }
    }

    fn into_graph_vae(self, command: &str) -> Result<Rgvae, Failure> {
        match self {
            Loaded::Graph(m) => Ok(m),
            Loaded::Dm(_) => Err(usage(format!("{command} needs a graph VAE checkpoint"))),
        }
    }
}

/// The checkpoint, its model and the dataset it was trained on.
struct Session {
    checkpoint: Checkpoint,
    model: Loaded,
    store: TripleStore,
    dataset_dir: PathBuf,
}

fn at(path: &Path) -> impl Fn(rgvae_core::Error) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

fn open(checkpoint: &Path, dataset_dir: Option<&Path>) -> Result<Session, Failure> {
    let ck = Checkpoint::load(checkpoint).map_err(at(checkpoint))?;
    let kind = ck
        .config_value(MODEL_KEY)
        .ok_or_else(|| Failure::Data("checkpoint does not name its model".into()))?;
    let model = match kind {
        "rgvae" | "crgvae" => Loaded::Graph(Rgvae::from_checkpoint(&ck)?),
        "distmult" | "vdistmult" => Loaded::Dm(DistMult::from_checkpoint(&ck)?),
        other => return Err(Failure::Data(format!("unknown model {other:?} in checkpoint"))),
    };
    let dataset_dir = match dataset_dir {
        Some(d) => d.to_path_buf(),
        None => ck
            .config_value(DATASET_KEY)
            .map(PathBuf::from)
            .ok_or_else(|| usage("--dataset-dir is required for this checkpoint"))?,
    };
    let final_mode = ck.config_value(FINAL_KEY) == Some("true");
    let store = TripleStore::load_dir(&dataset_dir, final_mode).map_err(at(&dataset_dir))?;
    let sizes = (store.num_entities(), store.num_relations());
    if model.sizes() != sizes {
        return Err(Failure::Data(format!(
            "checkpoint expects {:?} entities/relations, dataset has {:?}",
            model.sizes(),
            sizes
        )));
    }
    Ok(Session {
        checkpoint: ck,
        model,
        store,
        dataset_dir,
    })
}

fn eval_lp(a: EvalArgs) -> Result<(), Failure> {
    if !(a.fraction > 0.0 && a.fraction <= 1.0) {
        return Err(usage(format!("fraction {} not in (0, 1]", a.fraction)));
    }
    if a.chunk == 0 {
        return Err(usage("chunk must be positive"));
    }
    let s = open(&a.checkpoint, a.dataset_dir.as_deref())?;
    let split = s.store.split(match a.split {
        SplitArg::Valid => Split::Valid,
        SplitArg::Test => Split::Test,
    });
    let subset = subset_sample(split, a.fraction, a.seed)?;
    let options = EvalOptions {
        filtered: !a.raw,
        chunk: a.chunk,
    };
    let (report, ranks) = evaluate(&subset, s.model.scorer(), &s.store, options)?;

    let mut header: Pairs = vec![
        pair("command", "eval-lp"),
        pair("checkpoint", a.checkpoint.display()),
        pair(DATASET_KEY, s.dataset_dir.display()),
        pair("split", format!("{:?}", a.split).to_lowercase()),
        pair("fraction", a.fraction),
        pair("seed", a.seed),
    ];
    header.extend(
        s.checkpoint
            .config
            .iter()
            .map(|(k, v)| (format!("model.{k}"), v.clone())),
    );
    let mut body = Vec::new();
    report.write_text(&header, &mut body)?;
    emit(a.report.as_deref(), &body)?;
    if let Some(p) = &a.ranks {
        let mut body = Vec::new();
        write_ranks_tsv(&ranks, &mut body)?;
        emit(Some(p), &body)?;
    }
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<(), Failure> {
    if !(a.variance > 0.0) {
        return Err(usage(format!("variance {} must be positive", a.variance)));
    }
    if a.count == 0 || a.batch == 0 {
        return Err(usage("count and batch must be positive"));
    }
    let s = open(&a.checkpoint, a.dataset_dir.as_deref())?;
    let catalog = TypeCatalog::load(&a.types, &s.store).map_err(at(&a.types))?;
    let model = s.model.into_graph_vae("generate")?;
    let mode = match a.type_match {
        TypeMatchArg::Base => TypeMatch::BaseType,
        TypeMatchArg::Substring => TypeMatch::Substring,
    };
    let filter = RelationFilter::substring(a.key.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let g = generate_triples(
        &model,
        &s.store,
        a.count,
        a.variance.sqrt(),
        &filter,
        a.batch,
        &mut rng,
    )?;
    let report = validate_generated(&g.raw, &catalog, &s.store, &filter, &a.key, mode);

    let mut header: Pairs = vec![
        pair("command", "generate"),
        pair("checkpoint", a.checkpoint.display()),
        pair(DATASET_KEY, s.dataset_dir.display()),
        pair("types", a.types.display()),
        pair("count", a.count),
        pair("variance", a.variance),
        pair("key", &a.key),
        pair("type_match", format!("{:?}", a.type_match).to_lowercase()),
        pair("batch", a.batch),
        pair("seed", a.seed),
    ];
    header.extend(
        s.checkpoint
            .config
            .iter()
            .map(|(k, v)| (format!("model.{k}"), v.clone())),
    );
    let mut body = Vec::new();
    report.write_text(&header, &mut body)?;
    writeln!(body, "graphs_decoded={}", g.graphs_decoded)?;
    writeln!(body, "capped={}", g.capped)?;
    emit(a.report.as_deref(), &body)?;
    if let Some(p) = &a.triples {
        let mut body = Vec::new();
        write_triples_tsv(&s.store, &g.kept, &mut body)?;
        emit(Some(p), &body)?;
    }
    Ok(())
}

fn pick(
    split: &[Triple],
    given: Option<usize>,
    avoid: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<usize, Failure> {
    if let Some(i) = given {
        return match i < split.len() {
            true => Ok(i),
            false => Err(usage(format!("triple index {i} beyond split of {}", split.len()))),
        };
    }
    let mut i = rng.random_range(0..split.len());
    if split.len() > 1 {
        while Some(i) == avoid {
            i = rng.random_range(0..split.len());
        }
    }
    Ok(i)
}

fn interpolate(a: InterpolateArgs) -> Result<(), Failure> {
    if a.steps < 2 {
        return Err(usage("steps must be at least 2"));
    }
    let s = open(&a.checkpoint, a.dataset_dir.as_deref())?;
    let model = s.model.into_graph_vae("interpolate")?;
    let split = s.store.evaluation_split();
    if split.is_empty() {
        return Err(Failure::Data("evaluation split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let from = pick(split, a.from, None, &mut rng)?;

    let mut header: Pairs = vec![
        pair("command", "interpolate"),
        pair("checkpoint", a.checkpoint.display()),
        pair(DATASET_KEY, s.dataset_dir.display()),
        pair("mode", format!("{:?}", a.mode).to_lowercase()),
        pair("steps", a.steps),
        pair("seed", a.seed),
        pair("from", from),
    ];
    let mut body = Vec::new();
    match a.mode {
        InterpMode::Between => {
            let to = pick(split, a.to, Some(from), &mut rng)?;
            header.push(pair("to", to));
            let path = interpolate_between(&model, &split[from], &split[to], a.steps)?;
            comment_header(&header, &mut body)?;
            write_interpolation_tsv(&s.store, &path, &mut body)?;
        }
        InterpMode::Dims => {
            let rows = interpolate_dims(&model, &split[from], a.steps)?;
            comment_header(&header, &mut body)?;
            write_traversal_tsv(&s.store, &rows, &mut body)?;
        }
    }
    emit(a.out.as_deref(), &body)
}

fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let cases = gradient_suite(a.seed)?;
    let mut body = Vec::new();
    writeln!(body, "command=gradcheck")?;
    writeln!(body, "seed={}", a.seed)?;
    writeln!(body, "tolerance={GRAD_TOLERANCE:e}")?;
    for c in &cases {
        writeln!(body, "{}={:.3e}", c.name, c.max_rel_error)?;
    }
    let failed: Vec<&str> = cases
        .iter()
        .filter(|c| !c.passed())
        .map(|c| c.name.as_str())
        .collect();
    writeln!(body, "passed={}", failed.is_empty())?;
    emit(a.report.as_deref(), &body)?;
    match failed.is_empty() {
        true => Ok(()),
        false => Err(Failure::Check(format!(
            "gradient errors above tolerance: {}",
            failed.join(", ")
        ))),
    }
}

fn params(a: ParamsArgs) -> Result<(), Failure> {
    let ck = Checkpoint::load(&a.checkpoint).map_err(at(&a.checkpoint))?;
    let records = export_param_histograms(&ck);
    let mut body = Vec::new();
    comment_header(
        &[
            pair("command", "params"),
            pair("checkpoint", a.checkpoint.display()),
        ],
        &mut body,
    )?;
    comment_header(&ck.config, &mut body)?;
    write_param_tsv(&records, &mut body)?;
    emit(a.out.as_deref(), &body)
}
