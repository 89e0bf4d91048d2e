use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use serde::Serialize;

use refinelm::backend::{
    open_cache, Backend, HttpBackend, HttpConfig, PromptMode, PromptStyle, SyntheticBackend,
    SyntheticSpec,
};
use refinelm::chart;
use refinelm::eval::{self, AccuracyTable, DEFAULT_CUTOFFS};
use refinelm::lexicon::{
    count_templates, enumerate_templates, split, Selection, Split, SplitConfig,
};
use refinelm::metrics::{self, template_prompts, BiasReport, ProbeSetup};
use refinelm::trainer::{self, DirSink, TrainConfig};
use refinelm::{Category, Lexicon, RefineParams, TemplateInstance};

use crate::error::CliError;
use crate::settings::Settings;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn load_lexicon(s: &Settings) -> Result<Lexicon, CliError> {
    let path = Settings::require(&s.lexicon, "lexicon")?;
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let category = match &s.category {
        Some(c) => c.parse::<Category>().map_err(CliError::Config)?,
        None => Lexicon::declared_category(&text).ok_or_else(|| {
            CliError::Config("--category is required (lexicon declares none)".into())
        })?,
    };
    Lexicon::parse(&text, category)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn prompt_style(s: &Settings) -> Result<PromptStyle, CliError> {
    let mode = match &s.style {
        Some(m) => m.parse::<PromptMode>().map_err(CliError::Config)?,
        None => PromptMode::Masked,
    };
    let style = match mode {
        PromptMode::Masked => PromptStyle::masked(s.mask_token.as_deref().unwrap_or("[MASK]")),
        PromptMode::InfillFewshot => PromptStyle::infill(),
    };
    style.validate()?;
    Ok(style)
}

fn probe_setup(s: &Settings) -> Result<ProbeSetup, CliError> {
    let style = prompt_style(s)?;
    let k = s.k.unwrap_or_else(|| style.mode.default_k());
    if k < 2 {
        return Err(CliError::Config(format!("--k {k} must be >= 2")));
    }
    Ok(ProbeSetup { style, k })
}

fn split_config(s: &Settings) -> Result<SplitConfig, CliError> {
    let mut cfg = match &s.split {
        Some(p) => SplitConfig::load(p).map_err(|e| CliError::Config(e.to_string()))?,
        None => SplitConfig::default(),
    };
    if s.split.is_none() {
        if let Some(seed) = s.seed {
            cfg.seed = seed;
        }
    }
    Ok(cfg)
}

fn split_views(s: &Settings, lex: &Lexicon) -> Result<Split, CliError> {
    Ok(split(lex, &split_config(s)?)?)
}

fn open_backend(
    s: &Settings,
    lex: Option<&Lexicon>,
    setup: &ProbeSetup,
) -> Result<Box<dyn Backend>, CliError> {
    let spec = Settings::require(&s.backend, "backend")?;
    if let Some(path) = spec.strip_prefix("cache:") {
        let cache = open_cache(path)?;
        let h = cache.header();
        if h.style != setup.style.mode.as_str() {
            return Err(CliError::Config(format!(
                "cache was dumped with style {:?}, run uses {:?}",
                h.style,
                setup.style.mode.as_str()
            )));
        }
        if setup.k > h.k {
            return Err(CliError::Config(format!(
                "--k {} exceeds the cache's k={}",
                setup.k, h.k
            )));
        }
        return Ok(Box::new(cache));
    }
    if let Some(arg) = spec.strip_prefix("synthetic:") {
        let spec = SyntheticSpec::from_arg(arg)?;
        let lex = lex.ok_or_else(|| {
            CliError::Config("the synthetic backend needs --lexicon".into())
        })?;
        return Ok(Box::new(SyntheticBackend::new(
            lex,
            spec,
            setup.style.clone(),
            s.seed.unwrap_or(0),
        )?));
    }
    let url = if spec.starts_with("http://") || spec.starts_with("https://") {
        spec.as_str()
    } else if let Some(u) = spec.strip_prefix("http:") {
        u
    } else {
        return Err(CliError::Config(format!(
            "--backend {spec:?}: expected cache:<path>, synthetic:<spec> or http:<url>"
        )));
    };
    let mut cfg = HttpConfig::default();
    if let Some(ms) = s.http_timeout_ms {
        cfg.timeout = Duration::from_millis(ms);
    }
    Ok(Box::new(HttpBackend::open(url, cfg)?))
}

fn load_refine(s: &Settings, k: usize) -> Result<Option<RefineParams>, CliError> {
    let Some(path) = &s.refine else {
        return Ok(None);
    };
    let p = RefineParams::load(path)?;
    if p.k() != k {
        return Err(CliError::Config(format!(
            "checkpoint has k={} but the run uses k={k}",
            p.k()
        )));
    }
    Ok(Some(p))
}

#[derive(Serialize)]
struct TemplateLine<'a> {
    id: String,
    split: &'a str,
    #[serde(flatten)]
    template: &'a TemplateInstance,
}

#[derive(Serialize)]
struct PromptLine<'a> {
    prompt_id: String,
    prompt: &'a str,
    template: &'a str,
    row: usize,
    subjects: [&'a str; 2],
}

fn write_manifest(
    out: &Path,
    sides: &[(&str, &[TemplateInstance])],
    setup: &ProbeSetup,
) -> Result<(), CliError> {
    let tpath = out.join("templates.jsonl");
    let ppath = out.join("prompts.jsonl");
    let mut tw = BufWriter::new(File::create(&tpath).map_err(|e| io_err(&tpath, e))?);
    let mut pw = BufWriter::new(File::create(&ppath).map_err(|e| io_err(&ppath, e))?);
    let ser = |e: serde_json::Error| CliError::Data(e.to_string());
    for (name, templates) in sides {
        for t in *templates {
            let id = t.id().to_string();
            serde_json::to_writer(&mut tw, &TemplateLine { id: id.clone(), split: name, template: t })
                .map_err(ser)?;
            tw.write_all(b"\n").map_err(|e| io_err(&tpath, e))?;
            for (row, prompt) in template_prompts(t, setup)?.iter().enumerate() {
                let line = PromptLine {
                    prompt_id: refinelm::backend::prompt_id(prompt),
                    prompt,
                    template: &id,
                    row,
                    subjects: [&t.x1.name, &t.x2.name],
                };
                serde_json::to_writer(&mut pw, &line).map_err(ser)?;
                pw.write_all(b"\n").map_err(|e| io_err(&ppath, e))?;
            }
        }
    }
    tw.flush().map_err(|e| io_err(&tpath, e))?;
    pw.flush().map_err(|e| io_err(&ppath, e))
}

/// The split actually drawn, with every member named.
fn assignment(lex: &Lexicon, sp: &Split, seed: u64) -> SplitConfig {
    let names = |l: &Lexicon| l.subjects().iter().map(|s| s.name.clone()).collect();
    SplitConfig {
        category: Some(lex.category()),
        seed,
        train_subjects: Selection::Names(names(&sp.train)),
        test_subjects: Selection::Names(names(&sp.test)),
        train_contexts: Selection::Names(sp.train.contexts().to_vec()),
        test_contexts: Selection::Names(sp.test.contexts().to_vec()),
    }
}

pub fn gen(s: &Settings, counts_only: bool) -> Result<(), CliError> {
    let lex = load_lexicon(s)?;
    let setup = probe_setup(s)?;
    let cfg = split_config(s)?;
    let sp = split(&lex, &cfg)?;
    let (n_train, n_test) = (count_templates(&sp.train), count_templates(&sp.test));
    println!("train templates: {n_train}");
    println!("train variants: {}", 4 * n_train);
    println!("test templates: {n_test}");
    println!("test variants: {}", 4 * n_test);
    if counts_only {
        return Ok(());
    }
    let out = s.out_dir()?;
    s.echo(out)?;
    write_file(
        &out.join("split.txt"),
        &assignment(&lex, &sp, cfg.seed).to_file_string(),
    )?;
    let train = enumerate_templates(&sp.train)?;
    let test = enumerate_templates(&sp.test)?;
    write_manifest(out, &[("train", &train), ("test", &test)], &setup)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn side_templates(s: &Settings, lex: &Lexicon) -> Result<Vec<TemplateInstance>, CliError> {
    match s.side.as_deref().unwrap_or("all") {
        "all" => Ok(enumerate_templates(lex)?),
        "train" => Ok(enumerate_templates(&split_views(s, lex)?.train)?),
        "test" => Ok(enumerate_templates(&split_views(s, lex)?.test)?),
        other => Err(CliError::Config(format!(
            "--side {other:?}: expected all, train or test"
        ))),
    }
}

pub fn measure(s: &Settings) -> Result<(), CliError> {
    let lex = load_lexicon(s)?;
    let setup = probe_setup(s)?;
    let out = s.out_dir()?;
    s.echo(out)?;
    let templates = side_templates(s, &lex)?;
    let backend = open_backend(s, Some(&lex), &setup)?;
    let refine = load_refine(s, setup.k)?;
    let mut report = metrics::measure(
        &templates,
        backend.as_ref(),
        &setup,
        refine.as_ref(),
        &lex.groups(),
    )?;
    let prov = &mut report.provenance;
    prov.insert("backend".into(), backend.describe());
    prov.insert("category".into(), lex.category().to_string());
    prov.insert("k".into(), setup.k.to_string());
    prov.insert("style".into(), setup.style.mode.as_str().into());
    prov.insert("side".into(), s.side.clone().unwrap_or_else(|| "all".into()));
    if let Some(r) = &s.refine {
        prov.insert("refine".into(), r.display().to_string());
    }
    write_file(&out.join("report.json"), &report.to_json())?;
    write_file(&out.join("report.csv"), &report.to_csv())?;
    println!(
        "mu: {:.6}  positional: {:.6}  attributive: {:.6}  evaluated: {}  skipped: {}",
        report.mu, report.avg_positional, report.avg_attributive, report.evaluated, report.skipped
    );
    Ok(())
}

pub fn train(s: &Settings) -> Result<(), CliError> {
    let lex = load_lexicon(s)?;
    let setup = probe_setup(s)?;
    let out = s.out_dir()?;
    s.echo(out)?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        k: setup.k,
        h: s.hidden.unwrap_or(2 * setup.k),
        lr: s.lr.unwrap_or(defaults.lr),
        batch_size: s.batch.unwrap_or(defaults.batch_size),
        steps: s.steps.unwrap_or(defaults.steps),
        seed: s.seed.unwrap_or(defaults.seed),
        clip_norm: s.clip.unwrap_or(defaults.clip_norm),
        eval_every: s.eval_every.unwrap_or(defaults.eval_every),
        checkpoint_every: s.checkpoint_every.unwrap_or(defaults.checkpoint_every),
    };
    cfg.validate()?;
    let sp = split_views(s, &lex)?;
    let backend = open_backend(s, Some(&lex), &setup)?;
    let plan = trainer::build_batches(&enumerate_templates(&sp.train)?, backend.as_ref(), &setup, &cfg)?;
    let heldout = metrics::resolve_all(&enumerate_templates(&sp.test)?, backend.as_ref(), &setup)?;
    println!(
        "train templates: {} eligible, {} skipped; held-out: {}",
        plan.pool.eligible,
        plan.pool.skipped,
        heldout.len()
    );
    let mut sink = DirSink::create(out)?;
    let outcome = trainer::train(&plan.pool, &heldout, &lex.groups(), &cfg, &mut sink)?;
    if let (Some(a), Some(b)) = (outcome.initial_eval(), outcome.final_eval()) {
        println!("initial held-out mu: {:.6}", a.mu);
        println!("final held-out mu: {:.6}", b.mu);
    }
    if let Some(p) = &sink.last_checkpoint {
        println!("checkpoint: {}", p.display());
    }
    Ok(())
}

pub fn eval(s: &Settings) -> Result<(), CliError> {
    if s.mcq.is_none() && s.specified.is_none() {
        return Err(CliError::Config("eval needs --mcq and/or --specified".into()));
    }
    let setup = probe_setup(s)?;
    let out = s.out_dir()?;
    s.echo(out)?;
    let refine = load_refine(s, setup.k)?;
    let lex = match &s.lexicon {
        Some(_) => Some(load_lexicon(s)?),
        None => None,
    };
    let backend = open_backend(s, lex.as_ref(), &setup)?;
    let mut table = AccuracyTable::default();
    let variants: Vec<(&str, Option<&RefineParams>)> = match &refine {
        Some(p) => vec![("base", None), ("refined", Some(p))],
        None => vec![("base", None)],
    };
    if let Some(path) = &s.specified {
        let qs = eval::load_specified(path)?;
        for (name, r) in &variants {
            let row = eval::eval_specified(&qs, backend.as_ref(), &setup, *r, &DEFAULT_CUTOFFS, &format!("specified/{name}"))?;
            table.rows.push(row);
        }
    }
    if let Some(path) = &s.mcq {
        let items = eval::load_mcq(path)?;
        for (name, r) in &variants {
            let row = eval::eval_mcq(&items, backend.as_ref(), &setup, *r, &DEFAULT_CUTOFFS, &format!("mcq/{name}"))?;
            table.rows.push(row);
        }
    }
    write_file(&out.join("eval.json"), &table.to_json())?;
    let csv = table.to_csv();
    write_file(&out.join("eval.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn report(s: &Settings) -> Result<(), CliError> {
    let before_path = Settings::require(&s.before, "before")?;
    let out = s.out_dir()?;
    s.echo(out)?;
    let before = BiasReport::load(before_path)?;
    let after = s.after.as_ref().map(BiasReport::load).transpose()?;
    let svg = match &after {
        Some(a) => chart::paired_chart(("base", "refined"), &before, a)?,
        None => chart::report_chart("per-group bias", &before)?,
    };
    write_file(&out.join("bias.svg"), &svg)?;
    write_file(&out.join("bias.csv"), &chart::chart_csv(&before, after.as_ref()))?;
    println!("wrote {}", out.join("bias.svg").display());
    Ok(())
}
