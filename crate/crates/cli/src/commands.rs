use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use kbridge_core::backends::cache::cache_key;
use kbridge_core::completion::{complete_sample, extract_knowledge, rank_set, ChatContext, Sample};
use kbridge_core::simeval::{macro_f1, mean_ap, similarity_score, simulate_missing, LabelTable, MissingMask};
use kbridge_core::store::{
    fmt_float, load_manifest, render_eval_report, replay_run, EvalRow, Manifest, RunRecord, RunWriter,
};
use kbridge_core::Modality;
use serde_json::json;
use tracing::info;

use crate::config::{PipelineArgs, PipelineConfig};
use crate::CliError;

fn manifest(path: &Path) -> Result<Manifest, CliError> {
    load_manifest(path).with_context(|| format!("loading manifest {}", path.display())).map_err(Into::into)
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn simulate(manifest_path: &Path, out: &Path, cfg: &PipelineConfig) -> Result<(), CliError> {
    let m = manifest(manifest_path)?;
    if let Some(s) = m.samples.iter().find(|s| s.available().len() != 2) {
        return Err(anyhow!("sample {} lacks a modality; simulation needs complete pairs", s.sample_id).into());
    }
    let mask = simulate_missing(&m.sample_ids(), cfg.eta, cfg.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    write_file(out, mask.to_json().as_bytes())?;
    println!("{} of {} samples masked -> {}", mask.entries.len(), m.samples.len(), out.display());
    Ok(())
}

/// Samples to complete, in manifest order, with the modality to generate.
fn targets(m: &Manifest, mask: Option<&MissingMask>) -> anyhow::Result<Vec<(Sample, Modality)>> {
    match mask {
        Some(mask) => {
            for (id, modality) in &mask.entries {
                let s = m.get(id).ok_or_else(|| anyhow!("mask names unknown sample {id}"))?;
                if s.payload(*modality).is_none() || s.payload(modality.other()).is_none() {
                    bail!("mask drops {modality} from {id}, which does not have both modalities");
                }
            }
            Ok(m.samples
                .iter()
                .filter_map(|s| mask.missing(&s.sample_id).map(|mm| (s.clone(), mm)))
                .collect())
        }
        None => Ok(m.samples
            .iter()
            .filter_map(|s| match (s.image.is_some(), s.text.is_some()) {
                (true, false) => Some((s.clone(), Modality::Text)),
                (false, true) => Some((s.clone(), Modality::Image)),
                _ => None,
            })
            .collect()),
    }
}

pub fn complete(
    manifest_path: &Path,
    mask_path: Option<&Path>,
    out_dir: &Path,
    run_id: Option<String>,
    cfg: &PipelineConfig,
) -> Result<(), CliError> {
    let m = manifest(manifest_path)?;
    let mask = mask_path
        .map(|p| MissingMask::load(p).with_context(|| format!("loading mask {}", p.display())))
        .transpose()?;
    let jobs = targets(&m, mask.as_ref())?;
    let templates = cfg.templates()?;
    let backends = cfg.backends(Some(&out_dir.join("cache")))?;
    let mut generation = cfg.generation();
    generation.few_shot = m.few_shot.clone();
    let ranking = cfg.ranking();

    let snapshot = json!({
        "pipeline": cfg,
        "dataset_id": m.dataset_id,
        "manifest": manifest_path.display().to_string(),
        "mask": mask,
    });
    let run_id = run_id.unwrap_or_else(|| {
        let key = cache_key("run", &m.dataset_id, snapshot.to_string().as_bytes());
        format!("run-{}", &key[..12])
    });
    let mut writer = RunWriter::create(out_dir, &run_id, &snapshot).map_err(|e| anyhow!(e))?;

    let interrupted = Arc::new(AtomicBool::new(false));
    {
        let flag = interrupted.clone();
        // A second handler cannot be installed in the same process; that
        // only happens in tests, where it is harmless.
        let _ = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst));
    }

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    let workers = cfg.workers.min(jobs.len().max(1));
    let mut failures: Vec<(String, String)> = Vec::new();
    std::thread::scope(|scope| -> Result<(), CliError> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (jobs, next, interrupted) = (&jobs, &next, &interrupted);
            let (templates, generation, backends) = (&templates, &generation, &backends);
            scope.spawn(move || loop {
                if interrupted.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((sample, missing)) = jobs.get(i) else { break };
                let mut sample = sample.clone();
                if let Some(d) = cfg.domain_tag {
                    sample.domain_tag = d;
                }
                let start = Instant::now();
                let result = complete_sample(&sample, *missing, templates, generation, ranking, backends);
                if tx.send((i, result, start.elapsed().as_millis() as u64)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // Results are appended in manifest order so reruns write identical files.
        let mut pending = BTreeMap::new();
        let mut written = 0usize;
        for (i, result, ms) in rx {
            pending.insert(i, (result, ms));
            while let Some((result, ms)) = pending.remove(&written) {
                let (sample, missing) = &jobs[written];
                match result {
                    Ok(outcome) => writer.record_sample(&outcome, ranking, ms),
                    Err((e, transcript)) => {
                        failures.push((sample.sample_id.clone(), e.to_string()));
                        writer.record_failure(&sample.sample_id, *missing, &e.to_string(), &transcript, ms)
                    }
                }
                .map_err(|e| anyhow!(e))?;
                info!(sample = %sample.sample_id, "recorded");
                written += 1;
            }
        }
        Ok(())
    })?;

    let dir = writer.finish().map_err(|e| anyhow!(e))?;
    let done = writer.statuses().len();
    let completed = done - failures.len();
    println!("{}", dir.display());
    println!("completed {completed} of {} samples", jobs.len());
    if interrupted.load(Ordering::SeqCst) {
        return Err(anyhow!("interrupted after {done} of {} samples; run record flushed", jobs.len()).into());
    }
    if !failures.is_empty() {
        eprintln!("| sample | error |\n|---|---|");
        for (id, e) in &failures {
            eprintln!("| {id} | {} |", e.replace('\n', " "));
        }
        let fraction = failures.len() as f64 / jobs.len() as f64;
        if fraction >= cfg.failure_threshold {
            return Err(anyhow!(
                "{} of {} samples failed (threshold {})",
                failures.len(),
                jobs.len(),
                cfg.failure_threshold
            )
            .into());
        }
    }
    Ok(())
}

pub fn extract(
    manifest_path: &Path,
    sample_id: &str,
    drop: Option<Modality>,
    out: Option<&Path>,
    cfg: &PipelineConfig,
) -> Result<(), CliError> {
    let m = manifest(manifest_path)?;
    let mut sample = m
        .get(sample_id)
        .cloned()
        .ok_or_else(|| anyhow!("no sample {sample_id} in manifest"))?;
    if let Some(d) = cfg.domain_tag {
        sample.domain_tag = d;
    }
    if let Some(d) = drop {
        sample = sample.without(d);
    }
    let templates = cfg.templates()?;
    let chat = cfg.chat_backend(cfg.cache_dir.as_deref())?;
    let mut generation = cfg.generation();
    generation.few_shot = m.few_shot.clone();
    let ctx = ChatContext {
        chat: chat.as_ref(),
        templates: &templates,
        config: &generation,
    };
    let ex = extract_knowledge(&sample, &ctx).map_err(|e| anyhow!("sample {sample_id}: {e}"))?;
    let text = serde_json::to_string_pretty(&ex).map_err(|e| anyhow!(e))? + "\n";
    match out {
        Some(p) => write_file(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn stored_config(record: &RunRecord, args: &PipelineArgs) -> Result<PipelineConfig, CliError> {
    let base: PipelineConfig = serde_json::from_value(record.config["pipeline"].clone())
        .map_err(|e| anyhow!("run config: {e}"))?;
    args.resolve_over(base)
}

fn load_run(dir: &Path) -> Result<RunRecord, CliError> {
    RunRecord::load(dir)
        .with_context(|| format!("loading run {}", dir.display()))
        .map_err(Into::into)
}

pub fn rank(run: &Path, sample: Option<&str>, args: &PipelineArgs) -> Result<(), CliError> {
    let record = load_run(run)?;
    let cfg = stored_config(&record, args)?;
    let embed = cfg.embed_backend(run.parent().map(|p| p.join("cache")).as_deref())?;
    let ranking = cfg.ranking();
    println!("sample,stored_best,best,total");
    for set in record.sets.iter().filter(|s| sample.is_none_or(|id| id == s.sample_id)) {
        let (available, cset) = record.candidate_set(set).map_err(|e| anyhow!(e))?;
        let r = rank_set(&available, &set.available_graph, &cset, ranking, embed.as_ref())
            .map_err(|e| anyhow!("sample {}: {e}", set.sample_id))?;
        let best = cset.candidates[r.best_index].meta.index;
        println!(
            "{},{},{best},{}",
            set.sample_id,
            set.chosen_index,
            fmt_float(r.scores[r.best_index].total())
        );
    }
    Ok(())
}

pub fn replay(run: &Path, args: &PipelineArgs) -> Result<(), CliError> {
    let record = load_run(run)?;
    let cfg = stored_config(&record, args)?;
    let embed = cfg.embed_backend(run.parent().map(|p| p.join("cache")).as_deref())?;
    let report = replay_run(&record, embed.as_ref()).map_err(|e| anyhow!(e))?;
    println!(
        "replayed {} samples, {} scores, {} mismatches",
        report.samples,
        report.scores_checked,
        report.mismatches.len()
    );
    for m in &report.mismatches {
        eprintln!(
            "{} candidate {}: stored {} recomputed {}",
            m.sample_id, m.candidate_index, m.stored, m.recomputed
        );
    }
    if !report.is_exact() {
        return Err(anyhow!("replay differs from the stored run").into());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    pred: &Path,
    gold: &Path,
    threshold: f64,
    run: Option<&Path>,
    manifest_path: Option<&Path>,
    append: Option<&Path>,
    args: &PipelineArgs,
) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::Usage(format!("threshold {threshold} is outside [0, 1]")));
    }
    let p = LabelTable::load(pred).map_err(|e| anyhow!("{}: {e}", pred.display()))?;
    let g = LabelTable::load(gold).map_err(|e| anyhow!("{}: {e}", gold.display()))?;
    let f1 = macro_f1(&p, &g, threshold).map_err(|e| anyhow!(e))?;
    let map = mean_ap(&p, &g).map_err(|e| anyhow!(e))?;

    let (cfg, ss) = match run {
        Some(dir) => {
            let m = manifest(manifest_path.ok_or_else(|| CliError::Usage("--run needs --manifest".into()))?)?;
            let record = load_run(dir)?;
            let cfg = stored_config(&record, args)?;
            let mut pairs = Vec::new();
            for set in &record.sets {
                let truth = m
                    .get(&set.sample_id)
                    .and_then(|s| s.payload(set.missing))
                    .ok_or_else(|| anyhow!("manifest has no {} for {}", set.missing, set.sample_id))?;
                let (_, cset) = record.candidate_set(set).map_err(|e| anyhow!(e))?;
                let chosen = cset
                    .candidates
                    .into_iter()
                    .find(|c| c.meta.index == set.chosen_index)
                    .ok_or_else(|| anyhow!("chosen candidate missing for {}", set.sample_id))?;
                pairs.push((truth, chosen.payload));
            }
            let embed = cfg.embed_backend(dir.parent().map(|p| p.join("cache")).as_deref())?;
            let ss = similarity_score(&pairs, embed.as_ref()).map_err(|e| anyhow!(e))?;
            // The mask the run completed decides which eta and seed the row belongs to.
            let mut cfg = cfg;
            if let Ok(mask) = serde_json::from_value::<MissingMask>(record.config["mask"].clone()) {
                cfg.eta = mask.eta;
                cfg.seed = mask.seed;
            }
            (cfg, Some(ss))
        }
        None => (args.resolve()?, None),
    };
    let row = EvalRow {
        eta: cfg.eta,
        seed: cfg.seed,
        f1: Some(f1),
        map: Some(map),
        ss,
    };
    let line = serde_json::to_string(&row).map_err(|e| anyhow!(e))?;
    println!("{line}");
    if let Some(path) = append {
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        writeln!(f, "{line}").map_err(|e| anyhow!(e))?;
    }
    Ok(())
}

pub fn report(results: &Path, out: &Path, title: &str) -> Result<(), CliError> {
    let text = fs::read_to_string(results).with_context(|| format!("reading {}", results.display()))?;
    let rows = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| anyhow!("{} line {}: {e}", results.display(), i + 1)))
        .collect::<anyhow::Result<Vec<EvalRow>>>()?;
    write_file(out, render_eval_report(title, &rows).as_bytes())?;
    println!("{}", out.display());
    Ok(())
}
