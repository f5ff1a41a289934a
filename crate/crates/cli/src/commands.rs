use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::Deserialize;
use serde_json::json;
use tvmerge_core::container::VerifySummary;
use tvmerge_core::diagnostics::format_sig9;
use tvmerge_core::scoring::{parse_gold, parse_predictions, GoldMap};
use tvmerge_core::{
    aggregate, cosine_per_tensor, diff_report, emit_report, export_task_vector, merge_linear, score,
    summarize, verify_checkpoint, CheckpointHandle, DType, Error, ExecOptions, MergeRecipe, OpenOptions,
    OutputDType, ReportFormat, ScoreReport, ShardPolicy, SkipPatterns, TaskVector,
};

use crate::manifest::RunManifest;
use crate::{Cli, Command, CosineArgs, DiffArgs, Failure, MergeArgs, ScoreArgs, TaskvecArgs};

type Result<T, E = Failure> = std::result::Result<T, E>;

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Merge(a) => merge(cli, a),
        Command::Taskvec(a) => taskvec(cli, a),
        Command::Diff(a) => diff(cli, a),
        Command::Cosine(a) => cosine(cli, a),
        Command::Inspect(a) => inspect(cli, &a.path),
        Command::Verify(a) => verify(cli, &a.path),
        Command::Score(a) => score_cmd(cli, a),
    }
}

fn exec(cli: &Cli) -> Result<ExecOptions> {
    let mut e = ExecOptions::default().with_threads(cli.threads);
    if let Some(c) = cli.chunk_bytes {
        if c == 0 {
            return Err(Failure::usage("--chunk-bytes must be positive"));
        }
        e = e.with_chunk_bytes(c);
    }
    Ok(e)
}

fn open(cli: &Cli, path: &Path) -> Result<CheckpointHandle> {
    Ok(CheckpointHandle::open_with(path, OpenOptions { lenient: cli.lenient })?)
}

fn say(cli: &Cli, text: impl AsRef<str>) {
    if !cli.quiet {
        println!("{}", text.as_ref());
    }
}

fn parse_dtype(s: &str) -> Result<DType> {
    s.to_ascii_uppercase()
        .parse()
        .map_err(|_| Failure::usage(format!("unknown dtype {s:?} (expected F32, F16 or BF16)")))
}

/// Declarative merge input. Relative paths resolve against the recipe's directory.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecipeFile {
    base: Option<PathBuf>,
    instruct: Option<PathBuf>,
    domain: Option<PathBuf>,
    out: Option<PathBuf>,
    lambda_domain: Option<f32>,
    lambda_instruct: Option<f32>,
    output_dtype: Option<String>,
    skip: Option<Vec<String>>,
    chunk_bytes: Option<usize>,
    max_shard_bytes: Option<u64>,
}

impl RecipeFile {
    fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading recipe {}", path.display()))?;
        let mut r: RecipeFile =
            toml::from_str(&text).map_err(|e| Failure::usage(format!("recipe {}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        for p in [&mut r.base, &mut r.instruct, &mut r.domain, &mut r.out].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(r)
    }
}

/// Effective merge options after applying flag-over-recipe precedence.
struct ResolvedMerge {
    base: PathBuf,
    instruct: PathBuf,
    domain: PathBuf,
    out: PathBuf,
    lambda_domain: f32,
    lambda_instruct: f32,
    output_dtype: OutputDType,
    skip: Vec<String>,
    chunk_bytes: usize,
    max_shard_bytes: u64,
}

fn resolve_merge(cli: &Cli, a: &MergeArgs) -> Result<ResolvedMerge> {
    let file = match &a.recipe {
        Some(p) => RecipeFile::load(p)?,
        None => RecipeFile::default(),
    };
    let need = |flag: &Option<PathBuf>, rec: Option<PathBuf>, name: &str| {
        flag.clone()
            .or(rec)
            .ok_or_else(|| Failure::usage(format!("missing --{name} (or `{name}` in the recipe)")))
    };
    let output_dtype = match a.output_dtype.clone().or(file.output_dtype) {
        None => OutputDType::InheritFromDomain,
        Some(s) if s.eq_ignore_ascii_case("inherit") => OutputDType::InheritFromDomain,
        Some(s) => OutputDType::Explicit(parse_dtype(&s)?),
    };
    let skip = if a.skip.is_empty() {
        file.skip.unwrap_or_default()
    } else {
        a.skip.clone()
    };
    Ok(ResolvedMerge {
        base: need(&a.base, file.base, "base")?,
        instruct: need(&a.instruct, file.instruct, "instruct")?,
        domain: need(&a.domain, file.domain, "domain")?,
        out: need(&a.out, file.out, "out")?,
        lambda_domain: a.lambda_domain.or(file.lambda_domain).unwrap_or(1.0),
        lambda_instruct: a.lambda_instruct.or(file.lambda_instruct).unwrap_or(1.0),
        output_dtype,
        skip,
        chunk_bytes: cli.chunk_bytes.or(file.chunk_bytes).unwrap_or(ExecOptions::default().chunk_bytes),
        max_shard_bytes: a
            .max_shard_bytes
            .or(file.max_shard_bytes)
            .unwrap_or(ShardPolicy::default().max_shard_bytes),
    })
}

fn merge(cli: &Cli, a: &MergeArgs) -> Result<()> {
    let started = Instant::now();
    let r = resolve_merge(cli, a)?;
    if !r.lambda_domain.is_finite() || !r.lambda_instruct.is_finite() {
        return Err(Failure::usage("lambdas must be finite"));
    }
    if r.chunk_bytes == 0 {
        return Err(Failure::usage("chunk_bytes must be positive"));
    }
    let skip = SkipPatterns::new(&r.skip)?;
    let config = json!({
        "base": r.base, "instruct": r.instruct, "domain": r.domain, "out": r.out,
        "lambda_domain": r.lambda_domain, "lambda_instruct": r.lambda_instruct,
        "output_dtype": match r.output_dtype {
            OutputDType::InheritFromDomain => "inherit".to_string(),
            OutputDType::Explicit(d) => d.to_string(),
        },
        "skip": r.skip, "chunk_bytes": r.chunk_bytes, "max_shard_bytes": r.max_shard_bytes,
        "lenient": cli.lenient,
    });

    let mut recipe = MergeRecipe::new(open(cli, &r.base)?, open(cli, &r.instruct)?, open(cli, &r.domain)?);
    recipe.lambda_domain = r.lambda_domain;
    recipe.lambda_instruct = r.lambda_instruct;
    recipe.output_dtype = r.output_dtype;
    recipe.skip = skip;
    recipe.chunk_bytes = r.chunk_bytes;
    recipe.shard_policy = ShardPolicy::with_max_shard_bytes(r.max_shard_bytes);
    // Fail on misalignment before touching the output directory.
    recipe.check_alignment()?;

    let mut manifest = RunManifest::new("merge", config);
    manifest.input_checkpoint("base", &recipe.base)?;
    manifest.input_checkpoint("instruct", &recipe.instruct)?;
    manifest.input_checkpoint("domain", &recipe.domain)?;

    let outcome = merge_linear(&recipe, &r.out, cli.threads)?;
    manifest.output_checkpoint(&outcome.handle)?;
    let mpath = manifest.write(&r.out, started.elapsed())?;

    let skipped = outcome.tensors.iter().filter(|t| t.skipped).count();
    let non_finite: u64 = outcome.tensors.iter().map(|t| t.non_finite_inputs).sum();
    if cli.json {
        say(
            cli,
            json!({
                "out": r.out, "manifest": mpath, "tensors": outcome.tensors.len(),
                "skipped": skipped, "shards": outcome.handle.shard_paths().len(),
                "non_finite_inputs": non_finite,
            })
            .to_string(),
        );
    } else {
        say(
            cli,
            format!(
                "merged {} tensors ({} copied from domain) into {} [{} shard(s)], manifest {}",
                outcome.tensors.len(),
                skipped,
                r.out.display(),
                outcome.handle.shard_paths().len(),
                mpath.display()
            ),
        );
    }
    Ok(())
}

fn taskvec(cli: &Cli, a: &TaskvecArgs) -> Result<()> {
    let started = Instant::now();
    let exec = exec(cli)?;
    let dtype = parse_dtype(&a.dtype)?;
    let policy = ShardPolicy::with_max_shard_bytes(a.max_shard_bytes.unwrap_or(ShardPolicy::default().max_shard_bytes));
    let target = open(cli, &a.target)?;
    let base = open(cli, &a.base)?;
    let tv = TaskVector::new(&target, &base)?;
    let mut manifest = RunManifest::new(
        "taskvec",
        json!({"target": a.target, "base": a.base, "out": a.out, "dtype": dtype.as_str(),
               "chunk_bytes": exec.chunk_bytes, "max_shard_bytes": policy.max_shard_bytes}),
    );
    manifest.input_checkpoint("target", &target)?;
    manifest.input_checkpoint("base", &base)?;
    let handle = export_task_vector(&tv, &a.out, dtype, &exec, &policy)?;
    manifest.output_checkpoint(&handle)?;
    manifest.write(&a.out, started.elapsed())?;
    say(cli, format!("wrote task vector of {} tensors to {}", handle.len(), a.out.display()));
    Ok(())
}

fn diff(cli: &Cli, a: &DiffArgs) -> Result<()> {
    let started = Instant::now();
    let exec = exec(cli)?;
    let ha = open(cli, &a.a)?;
    let hb = open(cli, &a.b)?;
    let report = diff_report(&ha, &hb, &exec)?;
    let doc = serde_json::to_string_pretty(&json!({ "tensors": report })).context("serializing diff")? + "\n";
    if let Some(out) = &a.out {
        std::fs::write(out, &doc).with_context(|| format!("writing {}", out.display()))?;
        let mut manifest = RunManifest::new("diff", json!({"a": a.a, "b": a.b, "out": out, "chunk_bytes": exec.chunk_bytes}));
        manifest.input_checkpoint("a", &ha)?;
        manifest.input_checkpoint("b", &hb)?;
        manifest.output_file(out)?;
        manifest.write(out, started.elapsed())?;
    }
    if cli.json {
        say(cli, doc.trim_end());
    } else if !cli.quiet {
        let differing = report.iter().filter(|d| d.differing > 0).count();
        println!("{differing} of {} tensors differ", report.len());
        for d in report.iter().filter(|d| d.differing > 0) {
            println!(
                "  {}: {} of {} elements, max |Δ| {}, ‖Δ‖₂ {}",
                d.name,
                d.differing,
                d.elements,
                format_sig9(f64::from(d.max_abs_diff)),
                format_sig9(f64::from(d.l2_norm))
            );
        }
    }
    Ok(())
}

fn cosine(cli: &Cli, a: &CosineArgs) -> Result<()> {
    let started = Instant::now();
    let exec = exec(cli)?;
    let format: ReportFormat = a.format.parse().map_err(|e: Error| Failure::usage(e.to_string()))?;
    let base = open(cli, &a.base)?;
    let ha = open(cli, &a.a)?;
    let hb = open(cli, &a.b)?;
    let va = TaskVector::new(&ha, &base)?;
    let vb = TaskVector::new(&hb, &base)?;
    let entries = cosine_per_tensor(&va, &vb, &exec)?;
    let report = summarize(&entries)?;
    emit_report(&report, format, &a.out)?;

    let mut manifest = RunManifest::new(
        "cosine",
        json!({"base": a.base, "a": a.a, "b": a.b, "out": a.out, "format": a.format, "chunk_bytes": exec.chunk_bytes}),
    );
    manifest.input_checkpoint("base", &base)?;
    manifest.input_checkpoint("a", &ha)?;
    manifest.input_checkpoint("b", &hb)?;
    manifest.output_file(&a.out)?;
    manifest.write(&a.out, started.elapsed())?;

    let g = &report.global;
    if cli.json {
        say(
            cli,
            json!({"out": a.out, "tensors": entries.len(), "undefined": report.undefined_count,
                   "mean": g.mean, "std": g.std, "min": g.min, "max": g.max})
            .to_string(),
        );
    } else {
        say(
            cli,
            format!(
                "{} tensors ({} undefined): mean {} std {} min {} max {} -> {}",
                entries.len(),
                report.undefined_count,
                format_sig9(g.mean),
                format_sig9(g.std),
                format_sig9(g.min),
                format_sig9(g.max),
                a.out.display()
            ),
        );
    }
    Ok(())
}

fn inspect(cli: &Cli, path: &Path) -> Result<()> {
    let h = open(cli, path)?;
    let wm = h.weight_map();
    if cli.json {
        let tensors: Vec<_> = h
            .names()
            .map(|n| {
                let m = h.meta(n).expect("listed tensor");
                json!({"name": n, "dtype": m.dtype.as_str(), "shape": m.shape,
                       "parameters": m.element_count(), "shard": wm[n]})
            })
            .collect();
        let census: BTreeMap<_, _> = h.dtype_census().into_iter().map(|(d, c)| (d.as_str(), c)).collect();
        let shards: Vec<_> = h
            .shard_headers()
            .map(|(f, hd)| json!({"file": f, "tensors": hd.tensors.len(), "data_bytes": hd.data_len}))
            .collect();
        let doc = json!({
            "root": h.root(), "tensors": tensors, "tensor_count": h.len(),
            "total_parameters": h.total_parameter_count(), "total_bytes": h.total_bytes(),
            "dtype_census": census, "shards": shards, "warnings": h.warnings(),
        });
        println!("{}", serde_json::to_string_pretty(&doc).context("serializing")?);
        return Ok(());
    }
    println!("{}", h.root().display());
    println!("{} tensors, {} parameters, {} bytes", h.len(), h.total_parameter_count(), h.total_bytes());
    let census: Vec<String> = h.dtype_census().iter().map(|(d, c)| format!("{d}={c}")).collect();
    if !census.is_empty() {
        println!("dtypes: {}", census.join(" "));
    }
    for (f, hd) in h.shard_headers() {
        println!("shard {f}: {} tensors, {} data bytes", hd.tensors.len(), hd.data_len);
    }
    let width = h.names().map(str::len).max().unwrap_or(0);
    for n in h.names() {
        let m = h.meta(n)?;
        println!("  {n:<width$}  {:<4}  {:?}  {}", m.dtype.as_str(), m.shape, wm[n]);
    }
    Ok(())
}

fn check_name(e: &Error) -> &'static str {
    match e {
        Error::Io { .. } => "io",
        Error::NoCheckpoint(_) => "checkpoint-exists",
        Error::Truncated { .. } => "header-length",
        Error::MalformedHeader(_) => "header-schema",
        Error::UnknownDType(_) => "dtype",
        Error::OverlappingRanges { .. } => "range-overlap",
        Error::OutOfBounds { .. } => "range-bounds",
        Error::DanglingIndexEntry { .. } => "index-entry",
        Error::DuplicateTensor { .. } => "duplicate-tensor",
        Error::UnusedTensor { .. } => "unindexed-tensor",
        Error::TotalSizeMismatch { .. } => "index-total-size",
        _ => "other",
    }
}

fn verify(cli: &Cli, path: &Path) -> Result<()> {
    match verify_checkpoint(path) {
        Ok(VerifySummary {
            shards,
            tensors,
            parameters,
            bytes,
        }) => {
            if cli.json {
                say(cli, json!({"valid": true, "shards": shards, "tensors": tensors,
                                "parameters": parameters, "bytes": bytes}).to_string());
            } else {
                say(cli, format!("ok: {shards} shard(s), {tensors} tensors, {parameters} parameters"));
            }
            Ok(())
        }
        Err(e) => Err(Failure {
            code: crate::EXIT_FAILURE,
            message: format!("verification failed at check `{}`: {e}", check_name(&e)),
        }),
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "task".into())
}

fn with_file(path: &Path, e: Error) -> Failure {
    let mut f = Failure::from(e);
    f.message = format!("{}: {}", path.display(), f.message);
    f
}

fn score_cmd(cli: &Cli, a: &ScoreArgs) -> Result<()> {
    let started = Instant::now();
    let weights: Option<BTreeMap<String, f64>> = match &a.weights {
        None => None,
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(serde_json::from_str(&text).map_err(|e| {
                Failure::usage(format!("{}: weights must be a JSON object of numbers: {e}", p.display()))
            })?)
        }
    };
    let gold: Option<GoldMap> = match &a.gold {
        None => None,
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            // Gold records without "task" pair with prediction files of the same stem.
            let mut all = GoldMap::new();
            for pred in &a.preds {
                all.extend(parse_gold(&text, &file_stem(pred)).map_err(|e| with_file(p, e))?);
            }
            Some(all)
        }
    };

    let mut tasks = Vec::new();
    for p in &a.preds {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        for t in parse_predictions(&text, &file_stem(p), gold.as_ref()).map_err(|e| with_file(p, e))? {
            if tasks.iter().any(|x: &tvmerge_core::TaskPredictions| x.task_name == t.task_name) {
                return Err(Failure {
                    code: crate::EXIT_FAILURE,
                    message: format!("task {:?} appears in more than one prediction file", t.task_name),
                });
            }
            tasks.push(t);
        }
    }
    tasks.sort_by(|x, y| x.task_name.cmp(&y.task_name));
    let scores = tasks.iter().map(score).collect::<tvmerge_core::Result<Vec<_>>>()?;
    let overall = aggregate(&scores, weights.as_ref())?;
    let report = ScoreReport { tasks: scores, overall };
    let doc = serde_json::to_string_pretty(&report).context("serializing scores")? + "\n";

    if let Some(out) = &a.out {
        std::fs::write(out, &doc).with_context(|| format!("writing {}", out.display()))?;
        let mut manifest = RunManifest::new("score", json!({"preds": a.preds, "gold": a.gold, "weights": weights, "out": out}));
        for p in &a.preds {
            manifest.input_file("preds", p)?;
        }
        if let Some(g) = &a.gold {
            manifest.input_file("gold", g)?;
        }
        manifest.output_file(out)?;
        manifest.write(out, started.elapsed())?;
    }
    if cli.json || a.out.is_none() {
        say(cli, doc.trim_end());
    } else {
        for t in &report.tasks {
            let value = match t.stderr {
                Some(se) => format!("{:.4}±{:.4}", t.value, se),
                None => format!("{:.4}", t.value),
            };
            say(cli, format!("{:<24} {:?}  {value}  (n={})", t.task_name, t.metric, t.n));
        }
        say(cli, format!("overall {:.4} ({:?})", report.overall.value, report.overall.aggregation));
    }
    Ok(())
}
