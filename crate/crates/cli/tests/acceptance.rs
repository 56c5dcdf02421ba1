//! Acceptance checks, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines always reach stdout.

use std::collections::{BTreeSet, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::Instant;

use kbridge_core::backends::mock::{hash_embedding, FixedEmbedding, MockEmbedding, MockImageGenerator, ScriptedChat, SyntheticChat};
use kbridge_core::backends::{Backends, ModelTag};
use kbridge_core::completion::{
    complete_sample, extract_knowledge, ChatContext, CompletionError, GenerationConfig, RankingConfig, Sample, Stage,
};
use kbridge_core::kgraph::{build_graph, compare_graphs, KnowledgeGraph, Triplet};
use kbridge_core::prompting::{parse_structured_extraction, parse_triplets, TemplateSet};
use kbridge_core::ranking::{rank_candidates, select_best, ScoreMode, Scored, Weights};
use kbridge_core::simeval::{macro_f1, mean_ap, simulate_missing, LabelTable, MissingMask};
use kbridge_core::store::load_manifest;
use kbridge_core::{DomainTag, Modality, Payload};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type NamedCheck = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn first_argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..xs.len() {
        if xs[i] > xs[best] {
            best = i;
        }
    }
    best
}

fn raw_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

// Graph similarity

type Edge = (String, String);

fn brute_graph_similarity(e1: &[Edge], e2: &[Edge]) -> f64 {
    let nodes: Vec<&String> = e1.iter().chain(e2).flat_map(|(h, t)| [h, t]).collect::<BTreeSet<_>>().into_iter().collect();
    let s1: HashSet<(&String, &String)> = e1.iter().filter(|(h, t)| h != t).map(|(h, t)| (h, t)).collect();
    let s2: HashSet<(&String, &String)> = e2.iter().filter(|(h, t)| h != t).map(|(h, t)| (h, t)).collect();
    let (mut total, mut rows) = (0.0, 0usize);
    for &i in &nodes {
        let a: Vec<f64> = nodes.iter().map(|&j| f64::from(u8::from(s1.contains(&(i, j))))).collect();
        let b: Vec<f64> = nodes.iter().map(|&j| f64::from(u8::from(s2.contains(&(i, j))))).collect();
        let (na, nb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
        if na == 0.0 && nb == 0.0 {
            continue;
        }
        rows += 1;
        if na > 0.0 && nb > 0.0 {
            total += raw_cos(&a, &b);
        }
    }
    if rows == 0 {
        0.0
    } else {
        100.0 * total / rows as f64
    }
}

fn graph_of(edges: &[Edge]) -> KnowledgeGraph {
    let ts: Vec<Triplet> = edges.iter().map(|(h, t)| Triplet::new(h, "r", t).unwrap()).collect();
    build_graph(&ts, None).unwrap()
}

fn random_edges(rng: &mut ChaCha8Rng, pool: &[&str]) -> Vec<Edge> {
    let n = rng.random_range(1..=pool.len().min(8));
    (0..rng.random_range(0..=12))
        .map(|_| (pool[rng.random_range(0..n)].to_string(), pool[rng.random_range(0..n)].to_string()))
        .collect()
}

fn graph_similarity_oracle() -> Check {
    const A: [&str; 8] = ["dog", "ball", "man", "park", "tree", "kite", "car", "cat"];
    const B: [&str; 8] = ["lung", "heart", "rib", "spine", "trachea", "lobe", "nodule", "effusion"];
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let (mut identity, mut disjoint) = (0, 0);
    for case in 0..200 {
        let e1 = random_edges(&mut rng, &A);
        let e2 = random_edges(&mut rng, &A);
        let (g1, g2) = (graph_of(&e1), graph_of(&e2));
        let got = compare_graphs(&g1, &g2);
        let diff = (got - brute_graph_similarity(&e1, &e2)).abs();
        worst = worst.max(diff);
        ensure(diff < 1e-9, || format!("pair {case} off by {diff}"))?;
        if e1.iter().any(|(h, t)| h != t) {
            ensure(compare_graphs(&g1, &g1) == 100.0, || format!("identity pair {case} not exactly 100"))?;
            identity += 1;
            let e3 = random_edges(&mut rng, &B);
            let g3 = graph_of(&e3);
            if e3.iter().any(|(h, t)| h != t) {
                ensure(compare_graphs(&g1, &g3) == 0.0, || format!("disjoint pair {case} not exactly 0"))?;
                disjoint += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 1.0, || format!("took {secs:.2}s"))?;
    Ok(format!("200 pairs, max diff {worst:.1e}, {identity} identity, {disjoint} disjoint, {secs:.3}s"))
}

// Ranking

fn ranking_oracle() -> Check {
    const NODES: [&str; 6] = ["dog", "ball", "man", "park", "kite", "tree"];
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let vec16 = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..16).map(|_| rng.random_range(-1.0..1.0)).collect() };
    for id in 0..100 {
        let anchor = Payload::Text(format!("anchor {id}"));
        let av = [vec16(&mut rng), vec16(&mut rng)];
        let ag = graph_of(&random_edges(&mut rng, &NODES));
        let mut backend = FixedEmbedding::new()
            .with(ModelTag::Clip, &anchor, av[0].clone())
            .with(ModelTag::Blip, &anchor, av[1].clone());
        let mut cands = Vec::new();
        for i in 0..5 {
            let p = Payload::Text(format!("candidate {id}/{i}"));
            let v = [vec16(&mut rng), vec16(&mut rng)];
            backend = backend.with(ModelTag::Clip, &p, v[0].clone()).with(ModelTag::Blip, &p, v[1].clone());
            cands.push((p, graph_of(&random_edges(&mut rng, &NODES)), v));
        }
        let w = Weights::new(rng.random_range(0.1..2.0), rng.random_range(0.1..2.0), rng.random_range(0.1..2.0));
        let want: Vec<f64> = cands
            .iter()
            .map(|(_, g, v)| {
                w.graph * compare_graphs(&ag, g) / 100.0 + w.clip * raw_cos(&av[0], &v[0]) + w.blip * raw_cos(&av[1], &v[1])
            })
            .collect();
        let scored: Vec<Scored> = cands.iter().map(|(p, g, _)| Scored::new(p, Some(g))).collect();
        for c in [1.0, 0.5, 3.0] {
            let r = rank_candidates(Scored::new(&anchor, Some(&ag)), &scored, w.scaled(c), ScoreMode::Normalized, &backend)
                .map_err(|e| e.to_string())?;
            ensure(r.best_index == first_argmax(&want), || format!("set {id} scale {c}: {} vs {}", r.best_index, first_argmax(&want)))?;
        }
    }
    ensure(select_best(&[2.0, 2.0]) == Some(0), || "tie did not pick index 0".into())?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 5.0, || format!("took {secs:.2}s"))?;
    Ok(format!("100 sets agree at scales 1, 0.5, 3; tie picks 0; {secs:.3}s"))
}

// Metrics

const N: usize = 50;
const L: usize = 10;

fn ref_f1(pred: &[[f64; L]], gold: &[[bool; L]]) -> f64 {
    let mut f1s = Vec::new();
    for l in 0..L {
        let tp = (0..N).filter(|&i| pred[i][l] >= 0.5 && gold[i][l]).count() as f64;
        let np = (0..N).filter(|&i| pred[i][l] >= 0.5).count() as f64;
        let na = (0..N).filter(|&i| gold[i][l]).count() as f64;
        if np == 0.0 && na == 0.0 {
            continue;
        }
        // F1 = 2tp / (predicted + actual)
        f1s.push(2.0 * tp / (np + na));
    }
    if f1s.is_empty() {
        100.0
    } else {
        100.0 * f1s.iter().sum::<f64>() / f1s.len() as f64
    }
}

fn ref_map(pred: &[[f64; L]], gold: &[[bool; L]]) -> Option<f64> {
    let mut aps = Vec::new();
    for l in 0..L {
        let mut order: Vec<usize> = (0..N).collect();
        order.sort_by(|&a, &b| pred[b][l].partial_cmp(&pred[a][l]).unwrap().then(a.cmp(&b)));
        let total = order.iter().filter(|&&i| gold[i][l]).count();
        if total == 0 {
            continue;
        }
        let (mut hits, mut sum) = (0, 0.0);
        for (rank, &i) in order.iter().enumerate() {
            if gold[i][l] {
                hits += 1;
                sum += hits as f64 / (rank + 1) as f64;
            }
        }
        aps.push(sum / total as f64);
    }
    (!aps.is_empty()).then(|| 100.0 * aps.iter().sum::<f64>() / aps.len() as f64)
}

fn tables(pred: &[[f64; L]], gold: &[[bool; L]]) -> (LabelTable, LabelTable) {
    let names: Vec<String> = (0..L).map(|l| format!("l{l}")).collect();
    let rows = |f: &dyn Fn(usize) -> Vec<f64>| (0..N).map(|i| (format!("s{i}"), f(i))).collect::<Vec<_>>();
    let p = LabelTable::new(names.clone(), rows(&|i| pred[i].to_vec())).unwrap();
    let g = LabelTable::new(names, rows(&|i| gold[i].iter().map(|&b| f64::from(u8::from(b))).collect())).unwrap();
    (p, g)
}

fn metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31337);
    let mut worst = 0.0f64;
    let mut floors = Vec::new();
    for case in 0..100 {
        let density = rng.random_range(0.05..0.6);
        let gold: Vec<[bool; L]> = (0..N).map(|_| std::array::from_fn(|_| rng.random_bool(density))).collect();
        let coarse = rng.random_bool(0.5);
        let pred: Vec<[f64; L]> = (0..N)
            .map(|_| {
                std::array::from_fn(|_| {
                    let x: f64 = rng.random();
                    if coarse { (x * 4.0).round() / 4.0 } else { x }
                })
            })
            .collect();
        let (p, g) = tables(&pred, &gold);
        let d = (macro_f1(&p, &g, 0.5).map_err(|e| e.to_string())? - ref_f1(&pred, &gold)).abs();
        worst = worst.max(d);
        ensure(d < 1e-9, || format!("case {case} F1 off by {d}"))?;
        if let Some(want) = ref_map(&pred, &gold) {
            let d = (mean_ap(&p, &g).map_err(|e| e.to_string())? - want).abs();
            worst = worst.max(d);
            ensure(d < 1e-9, || format!("case {case} mAP off by {d}"))?;
        }
        if case < 20 && gold.iter().any(|r| r.contains(&true)) {
            let perfect: Vec<[f64; L]> = gold.iter().map(|r| r.map(|b| if b { 0.9 } else { 0.1 })).collect();
            let (pp, gg) = tables(&perfect, &gold);
            ensure(macro_f1(&pp, &gg, 0.5) == Ok(100.0) && mean_ap(&pp, &gg) == Ok(100.0), || format!("case {case} perfect != 100"))?;
            let wrong: Vec<[f64; L]> = gold.iter().map(|r| r.map(|b| if b { 0.1 } else { 0.9 })).collect();
            let (pw, gw) = tables(&wrong, &gold);
            ensure(macro_f1(&pw, &gw, 0.5) == Ok(0.0), || format!("case {case} all-wrong F1 != 0"))?;
            let got = mean_ap(&pw, &gw).map_err(|e| e.to_string())?;
            ensure((got - ref_map(&wrong, &gold).unwrap()).abs() < 1e-9, || format!("case {case} all-wrong mAP"))?;
            floors.push(got);
        }
    }
    let lo = floors.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(format!(
        "100 tables, max diff {worst:.1e}; perfect = 100; all-wrong F1 = 0, all-wrong mAP at its nonzero floor (min {lo:.2}), exact 0 is unattainable"
    ))
}

// Simulation

fn simulation_suite() -> Check {
    let ids: Vec<String> = (0..100).map(|i| format!("s{i:03}")).collect();
    for (eta, k) in [(0.3, 30), (0.5, 50), (0.7, 70)] {
        let m = simulate_missing(&ids, eta, 7).map_err(|e| e.to_string())?;
        ensure(m.entries.len() == k, || format!("eta {eta}: {} entries", m.entries.len()))?;
        let path = workspace().join(format!("crates/core/tests/golden/mask_n100_eta{eta}_seed7.json"));
        let frozen = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        ensure(m.to_json() == frozen, || format!("{} differs", path.display()))?;
        ensure(MissingMask::from_json(&frozen).ok().as_ref() == Some(&m), || "golden file does not load back".into())?;
    }
    let (mut image, mut total) = (0, 0);
    for seed in 0..1000 {
        let m = simulate_missing(&ids, 0.5, seed).map_err(|e| e.to_string())?;
        image += m.entries.values().filter(|&&v| v == Modality::Image).count();
        total += m.entries.len();
    }
    let frac = image as f64 / total as f64;
    ensure((0.45..=0.55).contains(&frac), || format!("image fraction {frac}"))?;
    Ok(format!("counts 30/50/70, 3 golden masks match, image fraction {frac:.4}"))
}

// End to end

fn kbridge(args: &[&str]) -> Result<std::process::Output, String> {
    Command::new(env!("CARGO_BIN_EXE_kbridge"))
        .args(args)
        .env_remove("KB_CONFIG")
        .env("KB_CHAT_URL", "mock")
        .env("KB_EMBED_URL", "mock")
        .env("KB_IMAGE_URL", "mock")
        .output()
        .map_err(|e| e.to_string())
}

fn run_ok(args: &[&str]) -> Result<(), String> {
    let out = kbridge(args)?;
    ensure(out.status.success(), || format!("kbridge {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
}

fn dir_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let e = e.map_err(|e| e.to_string())?;
        out.push((e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).map_err(|e| e.to_string())?));
    }
    out.sort();
    Ok(out)
}

fn end_to_end() -> Check {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = workspace().join("fixtures/coco8/manifest.json");
    let manifest = manifest.to_str().unwrap();
    let mask = tmp.path().join("mask.json");
    run_ok(&["simulate", "--manifest", manifest, "--out", mask.to_str().unwrap(), "--eta", "0.5", "--seed", "7"])?;
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out_dir = tmp.path().join(name);
        run_ok(&[
            "complete", "--manifest", manifest, "--mask", mask.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap(),
            "--run-id", "e2e", "--seed", "7", "--cache", "false",
        ])?;
        runs.push(out_dir.join("e2e"));
    }
    let scores: Vec<Vec<u8>> = runs.iter().map(|r| std::fs::read(r.join("scores.csv")).unwrap_or_default()).collect();
    ensure(!scores[0].is_empty() && scores[0] == scores[1], || "scores.csv differs between runs".into())?;
    let chosen0 = dir_bytes(&runs[0].join("chosen"))?;
    ensure(chosen0.len() == 4, || format!("{} chosen completions, expected 4", chosen0.len()))?;
    ensure(chosen0 == dir_bytes(&runs[1].join("chosen"))?, || "chosen completions differ".into())?;
    for r in &runs {
        run_ok(&["replay", "--run", r.to_str().unwrap()])?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 30.0, || format!("took {secs:.1}s"))?;
    Ok(format!("2 runs, identical scores.csv and 4 chosen files, replay exact, {secs:.2}s"))
}

// Parsers

fn parser_robustness() -> Check {
    let dir = workspace().join("crates/core/tests/fixtures");
    let read = |n: &str| std::fs::read_to_string(dir.join(n)).map_err(|e| format!("{n}: {e}"));
    let general = parse_structured_extraction(&read("general.json")?, DomainTag::General).map_err(|e| e.to_string())?;
    for n in ["general_fenced.txt", "general_prose.txt"] {
        ensure(parse_structured_extraction(&read(n)?, DomainTag::General).ok().as_ref() == Some(&general), || format!("{n} differs"))?;
    }
    let triplets = parse_triplets(&read("triplets.json")?).map_err(|e| e.to_string())?;
    for n in ["triplets_fenced.txt", "triplets_prose.txt"] {
        ensure(parse_triplets(&read(n)?).ok().as_ref() == Some(&triplets), || format!("{n} differs"))?;
    }
    let medical = parse_structured_extraction(&read("medical_report.md")?, DomainTag::Medical).map_err(|e| e.to_string())?;
    ensure(!medical.diagnoses.is_empty(), || "medical report without diagnoses".into())?;

    let chat = ScriptedChat::new()
        .on_contains("integrate the previous result", vec![read("malformed_truncated.txt")?])
        .on_contains("could not be parsed", vec![read("malformed_schema.txt")?, read("malformed_prose.txt")?])
        .with_fallback(SyntheticChat::new());
    let cfg = GenerationConfig::default();
    let templates = TemplateSet::builtin();
    let ctx = ChatContext {
        chat: &chat,
        templates: &templates,
        config: &cfg,
    };
    let sample = Sample {
        sample_id: "s".into(),
        image: None,
        text: Some("A child flies a red kite above a green field".into()),
        labels: None,
        domain_tag: DomainTag::General,
    };
    let err = extract_knowledge(&sample, &ctx).err();
    ensure(matches!(err, Some(CompletionError::ExtractionFailed { stage: Stage::Integrate, .. })), || format!("got {err:?}"))?;
    let attempts = chat
        .requests()
        .iter()
        .filter(|r| r.messages.iter().any(|m| m.text_content().contains("integrate the previous result")))
        .count();
    ensure(attempts == cfg.repair_attempts + 1, || format!("{attempts} attempts"))?;
    Ok(format!("5 wrapped variants match, medical report parses, malformed answers fail after {attempts} attempts"))
}

// Ablation

fn ablation() -> Check {
    let m = load_manifest(&workspace().join("fixtures/coco8/manifest.json")).map_err(|e| e.to_string())?;
    let backends = Backends {
        chat: Arc::new(SyntheticChat::new()),
        embed: Arc::new(MockEmbedding),
        image: Arc::new(MockImageGenerator::default()),
    };
    let cfg = GenerationConfig::default();
    let templates = TemplateSet::builtin();
    let empty = KnowledgeGraph::default();
    let (mut sets, mut disagree) = (0, 0);
    for sample in &m.samples {
        for missing in [Modality::Image, Modality::Text] {
            let mut picks = Vec::new();
            for weights in [Weights::GRAPH_ONLY, Weights::SEMANTIC_ONLY] {
                let ranking = RankingConfig {
                    weights,
                    mode: ScoreMode::Normalized,
                };
                let out = complete_sample(sample, missing, &templates, &cfg, ranking, &backends)
                    .map_err(|(e, _)| format!("{}: {e}", sample.sample_id))?;
                let anchor = |tag| hash_embedding(&out.available, tag).values;
                let oracle: Vec<f64> = out
                    .candidates
                    .candidates
                    .iter()
                    .map(|c| {
                        if weights == Weights::GRAPH_ONLY {
                            compare_graphs(&out.extraction.graph, c.meta.graph.as_ref().unwrap_or(&empty))
                        } else {
                            raw_cos(&anchor(ModelTag::Clip), &hash_embedding(&c.payload, ModelTag::Clip).values)
                                + raw_cos(&anchor(ModelTag::Blip), &hash_embedding(&c.payload, ModelTag::Blip).values)
                        }
                    })
                    .collect();
                ensure(out.ranking.best_index == first_argmax(&oracle), || {
                    format!("{} missing {missing:?} weights {weights}: {} vs oracle {}", sample.sample_id, out.ranking.best_index, first_argmax(&oracle))
                })?;
                picks.push(out.ranking.best_index);
            }
            sets += 1;
            if picks[0] != picks[1] {
                disagree += 1;
            }
        }
    }
    Ok(format!("{sets} fixture sets match both oracles; the two variants pick differently on {disagree}"))
}

fn main() -> ExitCode {
    let checks: [NamedCheck; 7] = [
        ("graph similarity oracle", graph_similarity_oracle),
        ("quality score ranking oracle", ranking_oracle),
        ("F1 / mAP oracle", metric_oracle),
        ("missing-modality simulation", simulation_suite),
        ("end-to-end determinism", end_to_end),
        ("parser robustness", parser_robustness),
        ("ablation weights", ablation),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
