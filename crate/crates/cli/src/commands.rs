use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use embdiff::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use embdiff::config::KeyValues;
use embdiff::decoding::{mbr_select, parallel_decode, quality_dynamics, DecodeCandidate, DecodeOptions};
use embdiff::degeneration::{compute_dgs, search_factor, MonteCarlo, SearchMethod, SearchSettings, TableConfig};
use embdiff::denoiser::{gradcheck, gradcheck_case, train_with, LossMode, LossSettings, MetricsRow, Pair, TrainConfig};
use embdiff::embeddings::EmbeddingTable;
use embdiff::schedules::{build_schedule, NoiseSchedule, ScheduleKind};
use serde::Serialize;

use crate::{csv_out, recipes};
use crate::{AniArgs, Command, DgsArgs, EmbCommand, GenerateArgs, GradcheckArgs, ScheduleArgs, ScheduleCommand};
use crate::{RecipeArgs, SearchArgs, TableArgs, TrainArgs};

pub fn dispatch(cmd: &Command) -> anyhow::Result<i32> {
    match cmd {
        Command::Schedule(ScheduleCommand::Dump(a)) => schedule_dump(a),
        Command::Dgs(a) => dgs(a),
        Command::SearchF(a) => search_f(a),
        Command::Emb(EmbCommand::Ani(a)) => ani(a),
        Command::Train(a) => train_cmd(a),
        Command::Generate(a) => generate(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Recipe(a) => recipe(a),
    }
}

fn schedule_of(a: &ScheduleArgs) -> anyhow::Result<NoiseSchedule> {
    let kind: ScheduleKind = a.kind.parse()?;
    Ok(build_schedule(kind, a.steps)?.rescale(a.factor, a.vp)?)
}

#[derive(Serialize)]
struct ScheduleRow {
    t: usize,
    alpha_bar: f64,
    beta_bar: f64,
    snr: f64,
}

fn schedule_dump(a: &ScheduleArgs) -> anyhow::Result<i32> {
    let s = schedule_of(a)?;
    let rows: Vec<ScheduleRow> = (0..=s.steps())
        .map(|t| ScheduleRow {
            t,
            alpha_bar: s.alpha_bar(t),
            beta_bar: s.beta_bar(t),
            snr: s.snr(t).unwrap_or(f64::INFINITY),
        })
        .collect();
    csv_out::print(&csv_out::to_string(&rows)?)?;
    Ok(0)
}

fn monte_carlo(t: &TableArgs) -> anyhow::Result<MonteCarlo> {
    Ok(MonteCarlo { samples: t.samples, max_rows: t.max_rows, seed: t.seed, classifier: t.classifier.parse()? })
}

fn table_of(t: &TableArgs) -> anyhow::Result<EmbeddingTable> {
    Ok(TableConfig { vocab: t.vocab, dim: t.dim, sigma_e: t.sigma_e, seed: t.seed }.build()?)
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    csv_out::print(&text)
}

fn dgs(a: &DgsArgs) -> anyhow::Result<i32> {
    let schedule = schedule_of(&a.schedule)?;
    let table = table_of(&a.table)?;
    let report = compute_dgs(&schedule, &table, a.table.grid, &monte_carlo(&a.table)?)?;
    print_json(&report)?;
    Ok(0)
}

fn search_f(a: &SearchArgs) -> anyhow::Result<i32> {
    let base = build_schedule(a.kind.parse()?, a.steps)?;
    let table = table_of(&a.table)?;
    let settings = SearchSettings {
        dgs_max: a.dgs_max,
        delta_f: a.delta_f,
        vp: a.vp,
        grid_size: a.table.grid,
        cap: a.cap,
        method: if a.direct { SearchMethod::Direct } else { SearchMethod::Auto },
    };
    let result = search_factor(&base, &table, &settings, &monte_carlo(&a.table)?)?;
    print_json(&result)?;
    Ok(0)
}

fn ani(a: &AniArgs) -> anyhow::Result<i32> {
    let value = match &a.checkpoint {
        Some(path) => load(path)?.model.params.embedding.anisotropy()?,
        None => EmbeddingTable::init_gaussian(a.vocab, a.dim, a.sigma_e, a.seed)?.anisotropy()?,
    };
    println!("{value}");
    Ok(0)
}

fn load(path: &Path) -> anyhow::Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn parse_sets(sets: &[String]) -> anyhow::Result<KeyValues> {
    let mut kv = KeyValues::default();
    for s in sets {
        let Some((k, v)) = s.split_once('=') else { bail!("override `{s}` is not key=value") };
        kv.push(k.trim(), v.trim())?;
    }
    Ok(kv)
}

pub(crate) fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(MetricsRow::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}

fn train_cmd(a: &TrainArgs) -> anyhow::Result<i32> {
    let kv = KeyValues::load(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut cfg = TrainConfig::default();
    cfg.apply(&kv)?;
    cfg.apply(&parse_sets(&a.set)?)?;
    cfg.validate()?;
    let streaming = a.metrics.is_none();
    if streaming {
        println!("{}", MetricsRow::CSV_HEADER);
    }
    let out = train_with(&cfg, |row| {
        if streaming {
            println!("{}", row.csv());
        }
    })?;
    if let Some(path) = &a.metrics {
        std::fs::write(path, metrics_csv(&out.metrics)).with_context(|| format!("writing {}", path.display()))?;
    }
    let path = a.out.clone().unwrap_or_else(|| a.config.with_file_name("model.ckpt"));
    let ck = Checkpoint { config: cfg.clone(), model: out.model, step: out.steps_done, lineage: vec![cfg.seed] };
    save_checkpoint(&path, &ck).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("saved {}", path.display());
    Ok(0)
}

fn read_sequences(path: Option<&PathBuf>, vocab: usize) -> anyhow::Result<Vec<Vec<usize>>> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => std::io::read_to_string(std::io::stdin())?,
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let seq = line
                .split_whitespace()
                .map(|t| t.parse::<usize>().with_context(|| format!("line {}: `{t}` is not a token id", i + 1)))
                .collect::<anyhow::Result<Vec<_>>>()?;
            if let Some(&bad) = seq.iter().find(|&&t| t >= vocab) {
                bail!("line {}: token {bad} is outside the vocabulary of size {vocab}", i + 1);
            }
            Ok(seq)
        })
        .collect()
}

fn detokenize(tokens: &[usize]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

#[derive(Serialize)]
struct GenerateReport<'a> {
    options: DecodeOptions,
    seed: u64,
    items: Vec<ItemReport<'a>>,
}

#[derive(Serialize)]
struct ItemReport<'a> {
    source: &'a [usize],
    selected: usize,
    candidates: Vec<DecodeCandidate>,
}

fn generate(a: &GenerateArgs) -> anyhow::Result<i32> {
    let ck = load(&a.checkpoint)?;
    let model = &ck.model;
    let vocab = model.shape().vocab;
    let sources = read_sequences(a.input.as_ref(), vocab)?;
    let opts =
        DecodeOptions { k: a.k, early_stop: a.early_stop, b1: a.b1, b2: a.b2, sampling_factor: a.sampling_factor };
    let mut items = Vec::with_capacity(sources.len());
    for (i, src) in sources.iter().enumerate() {
        let mut candidates = parallel_decode(model, src, &opts, a.seed.wrapping_add(i as u64))?;
        let selected = mbr_select(&mut candidates)?;
        println!("{}", detokenize(&candidates[selected].tokens));
        items.push(ItemReport { source: src, selected, candidates });
    }
    if let Some(path) = &a.report {
        csv_out::write_json(path, &GenerateReport { options: opts, seed: a.seed, items })?;
    }
    if let Some(path) = &a.dump_dynamics {
        let Some(refs) = &a.references else { bail!("--dump-dynamics needs --references") };
        let targets = read_sequences(Some(refs), vocab)?;
        if targets.len() != sources.len() {
            bail!("{} references for {} inputs", targets.len(), sources.len());
        }
        let pairs: Vec<Pair> =
            sources.into_iter().zip(targets).map(|(source, target)| Pair { source, target }).collect();
        csv_out::write(path, &quality_dynamics(model, &pairs, a.k, a.seed)?)?;
    }
    Ok(0)
}

#[derive(Serialize)]
struct GradcheckRow {
    loss_mode: String,
    self_conditioning: bool,
    tensor: String,
    max_rel_error: f64,
    checked: usize,
    pass: bool,
}

fn gradcheck_rows(h: f64, tolerance: f64, seed: u64) -> anyhow::Result<Vec<GradcheckRow>> {
    let mut rows = Vec::new();
    for sc in [false, true] {
        let (params, schedule, batch) = gradcheck_case(sc, seed)?;
        for mode in LossMode::ALL {
            let settings = LossSettings { mode, ..LossSettings::default() };
            for r in gradcheck(&params, &schedule, &batch, &settings, h, 0)? {
                rows.push(GradcheckRow {
                    loss_mode: mode.to_string(),
                    self_conditioning: sc,
                    pass: r.max_rel_error <= tolerance,
                    tensor: r.tensor,
                    max_rel_error: r.max_rel_error,
                    checked: r.checked,
                });
            }
        }
    }
    Ok(rows)
}

fn gradcheck_cmd(a: &GradcheckArgs) -> anyhow::Result<i32> {
    let rows = gradcheck_rows(a.h, a.tolerance, a.seed)?;
    csv_out::print(&csv_out::to_string(&rows)?)?;
    let failed = rows.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        eprintln!("error: {failed} of {} tensor checks exceed {}", rows.len(), a.tolerance);
        return Ok(1);
    }
    Ok(0)
}

fn recipe(a: &RecipeArgs) -> anyhow::Result<i32> {
    let overrides = parse_sets(&a.set)?;
    let out_dir = a.out_dir.clone().unwrap_or_else(|| PathBuf::from(format!("runs/{}-{}", a.name, a.seed)));
    let report = recipes::run_recipe(a.name, a.seed, &overrides, &out_dir)?;
    for c in &report.checks {
        println!("{}", c.line());
    }
    println!("{} {}: {}", a.name, if report.pass { "PASS" } else { "FAIL" }, out_dir.join("manifest.json").display());
    Ok(if report.pass { 0 } else { 1 })
}
