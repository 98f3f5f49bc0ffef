//! Acceptance suite. `cargo test -p ebr-cli --test acceptance -- --nocapture`
//! prints one line per criterion. The MovieLens-1M criteria need
//! `EBR_ML1M=<ratings.dat>` and `-- --ignored`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ebr_core::corpus::{leave_last_out_split, Dataset, Split};
use ebr_core::embedding::EmbeddingMatrix;
use ebr_core::itemset::ItemSet;
use ebr_core::linalg::dot_f32;
use ebr_core::partition::{assign_from_labels, kmeans, kmeans_with_trace, ClusterAssignment, KMeansConfig};
use ebr_core::retrieval::{build_index, compute_quotas, retrieve_merged, topk_global, topk_in_cluster, Schedule, UserVectors};
use ebr_core::seqrec::{gradient_errors, EncoderConfig, EncoderParams, GradientProbe, PromptInput, PromptKind, TrainReport, TrainedModel, Trainer, TrainingMode};
use ebr_core::synth::{generate, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Check = Result<String, String>;

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> EmbeddingMatrix {
    EmbeddingMatrix::new(rows, dim, (0..rows * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn random_assignment(rng: &mut ChaCha8Rng, n: usize, k: usize) -> ClusterAssignment {
    let labels: Vec<Option<usize>> = (0..n).map(|i| Some(if i < k { i } else { rng.random_range(0..k) })).collect();
    assign_from_labels(&labels).unwrap()
}

fn random_exclude(rng: &mut ChaCha8Rng, n: usize, frac: f64) -> ItemSet {
    ItemSet::from_items(n, (0..n as u32).filter(|_| rng.random_bool(frac)))
}

fn brute_force(emb: &EmbeddingMatrix, items: &[u32], e_u: &[f32], k: usize, exclude: &ItemSet) -> Vec<(u32, f32)> {
    let mut scored: Vec<(u32, f32)> = items
        .iter()
        .filter(|&&i| !exclude.contains(i))
        .map(|&i| (i, dot_f32(e_u, emb.row(i as usize))))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

fn quota_invariants() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..2000 {
        let k = rng.random_range(1..10);
        let p: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let caps: Vec<usize> = (0..k).map(|_| rng.random_range(0..80)).collect();
        let m = rng.random_range(0..300);
        let alpha = [0.0, 0.5, 1.0, 3.0, 1e6][case % 5];
        let q = compute_quotas(&p, alpha, m, &caps).map_err(|e| e.to_string())?.quotas;
        let total: usize = caps.iter().sum();
        if q.iter().sum::<usize>() != m.min(total) || q.iter().zip(&caps).any(|(a, c)| a > c) {
            return Err(format!("p {p:?} alpha {alpha} m {m} caps {caps:?} -> {q:?}"));
        }
    }
    let even = compute_quotas(&[0.7, 0.2, 0.1], 0.0, 9, &[100; 3]).unwrap().quotas;
    if even != [3, 3, 3] {
        return Err(format!("alpha 0 split {even:?}"));
    }
    for _ in 0..200 {
        let k = rng.random_range(2..8);
        let p: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let m = rng.random_range(0..200);
        let flat = compute_quotas(&p, 0.0, m, &vec![1000; k]).unwrap().quotas;
        if flat.iter().max().unwrap() - flat.iter().min().unwrap() > 1 {
            return Err(format!("alpha 0 uneven {flat:?}"));
        }
        let top = (0..k).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        let peaked = compute_quotas(&p, 1e6, m, &vec![1000; k]).unwrap().quotas;
        if peaked[top] != m {
            return Err(format!("large alpha {p:?} -> {peaked:?}"));
        }
    }
    Ok("2000 random plans conserve min(M, capacity); alpha 0 gives 3/3/3; alpha 1e6 concentrates".into())
}

fn hadamard_identity() -> Check {
    let config = EncoderConfig { max_len: 20, dim: 16, blocks: 2, heads: 2, ..Default::default() };
    let mut model = TrainedModel {
        params: EncoderParams::init(&config, 80, PromptKind::Hadamard, 5),
        config,
        mode: TrainingMode::prompted(PromptKind::Hadamard),
        report: TrainReport::default(),
    };
    model.params.prompt_table.as_mut().unwrap().iter_mut().for_each(|v| *v = 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let len = rng.random_range(1..40);
        let history: Vec<u32> = (0..len).map(|_| rng.random_range(0..80)).collect();
        let plain = model.encode_with(&history, PromptInput::None).unwrap();
        for k in 0..5 {
            let prompted = model.encode_user(&history, Some(k)).unwrap();
            if plain.iter().zip(&prompted).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Err(format!("history of {len} items differs under task {k}"));
            }
        }
    }
    Ok("50 histories x 5 tasks bitwise equal".into())
}

fn single_cluster_equals_global() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..40 {
        let n = rng.random_range(1..3000);
        let emb = random_matrix(&mut rng, n, 12);
        let idx = build_index(&emb, &ClusterAssignment::single(n).unwrap()).unwrap();
        let e_u: Vec<f32> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let exclude = random_exclude(&mut rng, n, 0.2);
        let m = rng.random_range(0..200);
        let alpha = rng.random_range(0.0..8.0);
        let merged = retrieve_merged(&idx, UserVectors::Shared(&e_u), &[1.0], alpha, m, &exclude, Schedule::Parallel).unwrap().merged;
        let global = topk_global(&idx, &e_u, m, &exclude).unwrap();
        let bits = |r: &[(u32, f32)]| r.iter().map(|x| (x.0, x.1.to_bits())).collect::<Vec<_>>();
        if bits(&merged) != bits(&global) {
            return Err(format!("n {n} m {m} alpha {alpha}"));
        }
    }
    Ok("40 random corpora, merged == global".into())
}

fn topk_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 10_000;
    for trial in 0..6 {
        let emb = if trial % 2 == 0 {
            random_matrix(&mut rng, n, 16)
        } else {
            // coarse grid, many ties
            EmbeddingMatrix::new(n, 4, (0..n * 4).map(|_| rng.random_range(-2i8..=2) as f32).collect()).unwrap()
        };
        let ca = random_assignment(&mut rng, n, 1 + trial * 3);
        let idx = build_index(&emb, &ca).unwrap();
        let e_u: Vec<f32> = (0..emb.dim()).map(|_| rng.random_range(-2i8..=2) as f32).collect();
        let exclude = random_exclude(&mut rng, n, 0.1);
        for k in [0, 1, 7, 100, 2000] {
            for c in 0..ca.k() {
                if topk_in_cluster(&idx, c, &e_u, k, &exclude).unwrap() != brute_force(&emb, ca.members(c), &e_u, k, &exclude) {
                    return Err(format!("trial {trial} cluster {c} k {k}"));
                }
            }
            let all: Vec<u32> = (0..n as u32).collect();
            let global = topk_global(&idx, &e_u, k, &exclude).unwrap();
            if global != brute_force(&emb, &all, &e_u, k, &exclude) {
                return Err(format!("trial {trial} global k {k}"));
            }
            for &(i, s) in &global {
                let exact: f64 = emb.row(i as usize).iter().zip(&e_u).map(|(a, b)| *a as f64 * *b as f64).sum();
                if (s as f64 - exact).abs() > 1e-5 * exact.abs().max(1.0) {
                    return Err(format!("trial {trial} item {i}: score {s} vs {exact}"));
                }
            }
        }
    }
    Ok("10^4 items, 6 corpora, per-cluster and global".into())
}

fn gradients() -> Check {
    let cfg = EncoderConfig { max_len: 6, dim: 4, blocks: 2, heads: 2, dropout: 0.0, ..Default::default() };
    let mut worst = Vec::new();
    for prompt in [PromptKind::None, PromptKind::Prefix, PromptKind::Hadamard] {
        let mode = if prompt == PromptKind::None { TrainingMode::GLOBAL } else { TrainingMode::prompted(prompt) };
        let mut max = 0.0f64;
        for seed in 0..3 {
            let probe = GradientProbe::random(&cfg, prompt, 9, 3, 3, 100 + seed);
            for (name, e) in gradient_errors(&cfg, mode, &probe) {
                if e > 1e-3 {
                    return Err(format!("{prompt:?} {name}: {e:.2e}"));
                }
                max = max.max(e);
            }
        }
        worst.push(format!("{prompt:?} {max:.1e}"));
    }
    Ok(format!("max relative error {}", worst.join(", ")))
}

fn kmeans_properties() -> (Check, Check) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut monotone = Ok("30 runs, objective non-increasing".to_string());
    let mut cover = Ok("30 runs, every item in exactly one non-empty cluster".to_string());
    for run in 0..30 {
        let n = rng.random_range(5..2000);
        let k = rng.random_range(1..20).min(n);
        let emb = random_matrix(&mut rng, n, 8);
        let cfg = KMeansConfig { k, seed: run, ..Default::default() };
        let out = kmeans_with_trace(&emb, &cfg).unwrap();
        if out.objective_trace.windows(2).any(|w| w[1] > w[0] + 1e-9 * w[0].abs().max(1.0)) {
            monotone = Err(format!("run {run}: trace {:?}", out.objective_trace));
        }
        let ca = &out.assignment;
        let mut count = vec![0usize; n];
        for c in 0..ca.k() {
            for &i in ca.members(c) {
                count[i as usize] += 1;
                if ca.cluster(i) != c {
                    cover = Err(format!("run {run}: item {i} listed under {c}, assigned {}", ca.cluster(i)));
                }
            }
            if ca.members(c).is_empty() {
                cover = Err(format!("run {run}: cluster {c} empty"));
            }
        }
        if count.iter().any(|&c| c != 1) || ca != &kmeans(&emb, &cfg).unwrap() {
            cover = Err(format!("run {run}: not a deterministic disjoint cover"));
        }
    }
    (monotone, cover)
}

fn schedule_independence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..60 {
        let n = rng.random_range(1..4000);
        let k = rng.random_range(1..12).min(n);
        let emb = random_matrix(&mut rng, n, 10);
        let ca = random_assignment(&mut rng, n, k);
        let idx = build_index(&emb, &ca).unwrap();
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let p: Vec<f64> = raw.iter().map(|v| v / raw.iter().sum::<f64>()).collect();
        let per: Vec<Vec<f32>> = (0..k).map(|_| (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let exclude = random_exclude(&mut rng, n, 0.15);
        let m = rng.random_range(0..300);
        let alpha = rng.random_range(0.0..5.0);
        let users = if case % 2 == 0 { UserVectors::Shared(&per[0]) } else { UserVectors::PerCluster(&per) };
        let users2 = if case % 2 == 0 { UserVectors::Shared(&per[0]) } else { UserVectors::PerCluster(&per) };
        let a = retrieve_merged(&idx, users, &p, alpha, m, &exclude, Schedule::Serial).unwrap();
        let b = retrieve_merged(&idx, users2, &p, alpha, m, &exclude, Schedule::Parallel).unwrap();
        let bits = |r: &[(u32, f32)]| r.iter().map(|x| (x.0, x.1.to_bits())).collect::<Vec<_>>();
        if bits(&a.merged) != bits(&b.merged) || a.plan != b.plan {
            return Err(format!("case {case}: serial and parallel differ"));
        }
    }
    Ok(format!("60 cases bitwise equal, available parallelism {}", cores()))
}

fn cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn criterion_property_suite() -> (bool, Vec<String>) {
    let started = Instant::now();
    let (monotone, cover) = kmeans_properties();
    let checks: Vec<(&str, Check)> = vec![
        ("quota conservation and alpha limits", quota_invariants()),
        ("unit hadamard prompt identity", hadamard_identity()),
        ("single-cluster retrieval equals global", single_cluster_equals_global()),
        ("top-k equals brute force", topk_oracle()),
        ("gradient check <= 1e-3", gradients()),
        ("k-means objective monotone", monotone),
        ("partition disjoint cover", cover),
        ("merged retrieval schedule independence", schedule_independence()),
    ];
    let elapsed = started.elapsed();
    let mut ok = elapsed < Duration::from_secs(300);
    let mut lines = Vec::new();
    for (name, c) in checks {
        ok &= c.is_ok();
        match c {
            Ok(s) => lines.push(format!("    {name}: PASS ({s})")),
            Err(s) => lines.push(format!("    {name}: FAIL ({s})")),
        }
    }
    lines.insert(0, format!("criterion 1 property suite: {} ({:.1}s, limit 300s)", verdict(ok), elapsed.as_secs_f64()));
    (ok, lines)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Every history fills the training window, so both modes see identical
/// batch shapes.
fn full_window_split() -> (Split, ClusterAssignment) {
    let corpus = generate(&SynthConfig { users: 200, items: 3000, genres: 10, min_len: 220, max_len: 220, seed: 3, ..Default::default() }).unwrap();
    let d = Dataset::from_interactions(&corpus.interactions).unwrap();
    let labels: Vec<Option<usize>> = (0..d.num_items()).map(|i| Some(corpus.genre_of(d.external_item(i)))).collect();
    (leave_last_out_split(&d).unwrap(), assign_from_labels(&labels).unwrap())
}

/// Samples per wall-clock second for one optimizer step.
fn timed_step(t: &mut Trainer) -> f64 {
    let started = Instant::now();
    let samples = t.step().unwrap().samples;
    samples as f64 / started.elapsed().as_secs_f64()
}

fn criterion_throughput() -> (bool, Vec<String>) {
    let (split, ca) = full_window_split();
    // the reference run's encoder shape
    let cfg = EncoderConfig { max_len: 200, dim: 50, blocks: 2, heads: 1, dropout: 0.2, batch_size: 128, ..Default::default() };
    let mut global = Trainer::new(&split, Some(&ca), &cfg, TrainingMode::GLOBAL).unwrap();
    let mut hadamard = Trainer::new(&split, Some(&ca), &cfg, TrainingMode::prompted(PromptKind::Hadamard)).unwrap();
    for _ in 0..2 {
        global.step().unwrap();
        hadamard.step().unwrap();
    }
    // interleave single steps, alternating which mode goes first, so machine
    // drift hits both modes alike; the median pair ratio shrugs off preemptions
    let (mut g, mut h, mut ratios) = (Vec::new(), Vec::new(), Vec::new());
    for round in 0..40 {
        let (a, b) = if round % 2 == 0 {
            let a = timed_step(&mut global);
            (a, timed_step(&mut hadamard))
        } else {
            let b = timed_step(&mut hadamard);
            (timed_step(&mut global), b)
        };
        g.push(a);
        h.push(b);
        ratios.push(b / a);
    }
    let (gm, hm, ratio) = (median(g), median(h), median(ratios));
    let ok = ratio >= 0.95;
    (ok, vec![format!("criterion 5 throughput parity: {} (median ratio over 40 interleaved step pairs {ratio:.3}, need >= 0.95; hadamard {hm:.1}, global {gm:.1} samples/s)", verdict(ok))])
}

fn ebr_all(config: &Path, overrides: &[String]) -> Result<Value, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ebr"));
    cmd.arg("all").arg("--config").arg(config);
    for o in overrides {
        cmd.args(["--stage-override", o]);
    }
    let out = cmd.env("RUST_LOG", "warn").output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    let artifacts = overrides.iter().find_map(|o| o.strip_prefix("artifact_dir=")).expect("artifact_dir override");
    let text = std::fs::read_to_string(Path::new(artifacts).join("eval/metrics.json")).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

/// Recall tables by method name: (overall, within-cluster, selected).
struct Table(BTreeMap<String, (BTreeMap<usize, f64>, BTreeMap<usize, f64>, bool)>);

impl Table {
    fn new(metrics: &Value) -> Self {
        let recall = |v: &Value| -> BTreeMap<usize, f64> {
            v["recall"].as_object().map_or_else(BTreeMap::new, |o| o.iter().map(|(k, r)| (k.parse().unwrap(), r.as_f64().unwrap())).collect())
        };
        Self(
            metrics["methods"]
                .as_array()
                .unwrap()
                .iter()
                .map(|r| (r["name"].as_str().unwrap().to_string(), (recall(&r["overall"]), recall(&r["within"]), r["selected"] == true)))
                .collect(),
        )
    }

    fn overall(&self, name: &str, m: usize) -> f64 {
        self.0[name].0[&m]
    }

    fn within(&self, name: &str, m: usize) -> f64 {
        self.0[name].1[&m]
    }

    fn selected_mixed(&self) -> String {
        self.0.iter().find(|(n, v)| n.starts_with("mixed-") && v.2).map(|(n, _)| n.clone()).expect("a selected mixed model")
    }

    fn mixed(&self) -> Vec<(f64, String)> {
        let mut v: Vec<(f64, String)> = self.0.keys().filter_map(|n| Some((n.strip_prefix("mixed-")?.parse().ok()?, n.clone()))).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    }
}

/// (ordering ok, lines) for the method ordering at each cutoff.
fn ordering(t: &Table, ms: &[usize]) -> (bool, Vec<String>) {
    let mixed = t.selected_mixed();
    let chain = ["mf", "global", mixed.as_str(), "within+hadamard"];
    let mut ok = true;
    let mut lines = Vec::new();
    for &m in ms {
        let vals: Vec<f64> = chain.iter().map(|n| t.overall(n, m)).collect();
        let holds = vals.windows(2).all(|w| w[0] < w[1]);
        ok &= holds;
        let shown: Vec<String> = chain.iter().zip(&vals).map(|(n, v)| format!("{n} {v:.4}")).collect();
        lines.push(format!("R@{m} {} [{}]", if holds { "ordered" } else { "NOT ordered" }, shown.join(" < ")));
    }
    (ok, lines)
}

fn tradeoff(t: &Table, within_m: usize, overall_m: usize) -> (bool, bool, String) {
    let sweep = t.mixed();
    let within: Vec<f64> = sweep.iter().map(|(_, n)| t.within(n, within_m)).collect();
    let overall: Vec<f64> = sweep.iter().map(|(_, n)| t.overall(n, overall_m)).collect();
    let non_decreasing = within.windows(2).all(|w| w[1] >= w[0]);
    let peak = overall[..overall.len() - 1].iter().copied().fold(t.overall("global", overall_m), f64::max);
    let degrades = *overall.last().unwrap() < peak;
    let pts: Vec<String> = sweep.iter().zip(within.iter().zip(&overall)).map(|((r, _), (w, o))| format!("{r}: {w:.3}/{o:.3}")).collect();
    (non_decreasing, degrades, format!("rho: within R@{within_m} / overall R@{overall_m} = {}", pts.join(", ")))
}

fn synthetic_proxies(lines: &mut Vec<String>) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("synthetic.dat");
    let corpus = generate(&SynthConfig { users: 800, items: 500, genres: 8, seed: 21, ..Default::default() }).unwrap();
    corpus.write_movielens(std::io::BufWriter::new(std::fs::File::create(&data).unwrap())).unwrap();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/synthetic.toml");
    let overrides = vec![format!("dataset.path={}", data.display()), format!("artifact_dir={}", dir.path().join("art").display())];
    let started = Instant::now();
    let t = match ebr_all(&config, &overrides) {
        Ok(m) => Table::new(&m),
        Err(e) => {
            lines.push(format!("  synthetic proxy: pipeline failed: {e}"));
            return;
        }
    };
    let (ord, detail) = ordering(&t, &[10, 20]);
    lines.push(format!("  proxy for 2 (synthetic corpus, informational, {:.0}s): ordering {}", started.elapsed().as_secs_f64(), if ord { "holds" } else { "does not hold" }));
    lines.extend(detail.into_iter().map(|l| format!("      {l}")));
    let (g, w, h) = (t.within("global", 5), t.within("within", 5), t.within("within+hadamard", 5));
    lines.push(format!("  proxy for 3 (informational): within-cluster R@5 global {g:.4}, within {w:.4} ({:+.1}%), hadamard {h:.4}", 100.0 * (w / g - 1.0)));
    let (nd, deg, pts) = tradeoff(&t, 5, 20);
    lines.push(format!("  proxy for 4 (informational): within recall non-decreasing {nd}, overall degrades at high rho {deg}"));
    lines.push(format!("      {pts}"));
}

#[test]
fn acceptance_criteria() {
    let (ok1, mut lines) = criterion_property_suite();
    let (ok5, l5) = criterion_throughput();
    lines.extend(l5);
    let ml1m = std::env::var_os("EBR_ML1M").is_some();
    for c in ["2 MovieLens-1M reproduction", "3 MovieLens-1M within-cluster suite", "4 MovieLens-1M trade-off"] {
        let how = if ml1m { "run `ml1m_reproduction` with -- --ignored" } else { "set EBR_ML1M=<ratings.dat> and run -- --ignored" };
        lines.push(format!("criterion {c}: NOT RUN ({how})"));
    }
    synthetic_proxies(&mut lines);
    lines.push("criterion 6 KuaiRand-scale run: NOT RUN (optional)".into());
    lines.push("criterion 7 live A/B results: NOT REPRODUCIBLE (no offline criterion)".into());
    println!("{}", lines.join("\n"));
    assert!(ok1 && ok5, "acceptance failures:\n{}", lines.join("\n"));
}

/// Full MovieLens-1M run; hours on a desktop CPU. Artifacts are cached under
/// `EBR_ML1M_ARTIFACTS` (default `target/ml1m-artifacts`) so reruns only
/// redo stale stages. Extra `key=value` overrides may be passed in
/// `EBR_ML1M_OVERRIDES`, separated by `;`.
#[test]
#[ignore]
fn ml1m_reproduction() {
    let ratings = PathBuf::from(std::env::var_os("EBR_ML1M").expect("EBR_ML1M must point at ml-1m/ratings.dat"));
    let artifacts = std::env::var_os("EBR_ML1M_ARTIFACTS")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/ml1m-artifacts"));
    let mut overrides = vec![format!("dataset.path={}", ratings.display()), format!("artifact_dir={}", artifacts.display())];
    if let Ok(extra) = std::env::var("EBR_ML1M_OVERRIDES") {
        overrides.extend(extra.split(';').filter(|s| !s.trim().is_empty()).map(str::to_string));
    }
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/ml1m.toml");
    let t = Table::new(&ebr_all(&config, &overrides).unwrap());

    let mut lines = Vec::new();
    let (ord, detail) = ordering(&t, &[20, 50]);
    let g20 = t.overall("global", 20);
    let ours20 = t.overall("within+hadamard", 20);
    let near = (g20 - 0.183).abs() <= 0.03;
    let lift = ours20 / g20 - 1.0;
    let ok2 = ord && near && lift >= 0.15;
    lines.push(format!(
        "criterion 2 MovieLens-1M reproduction: {} (global R@20 {g20:.4}, need 0.183 +/- 0.03; lift {:+.1}%, need >= +15%)",
        verdict(ok2),
        100.0 * lift
    ));
    lines.extend(detail.into_iter().map(|l| format!("    {l}")));

    let (g5, w5, h5) = (t.within("global", 5), t.within("within", 5), t.within("within+hadamard", 5));
    let ok3 = w5 >= 1.08 * g5 && h5 >= w5;
    lines.push(format!(
        "criterion 3 MovieLens-1M within-cluster suite: {} (R@5 global {g5:.4}, within {w5:.4} ({:+.1}%, need >= +8%), hadamard {h5:.4}, need >= within)",
        verdict(ok3),
        100.0 * (w5 / g5 - 1.0)
    ));

    let (nd, deg, pts) = tradeoff(&t, 5, 20);
    let ok4 = nd && deg;
    lines.push(format!("criterion 4 MovieLens-1M trade-off: {} (within non-decreasing {nd}, overall degrades at high rho {deg})", verdict(ok4)));
    lines.push(format!("    {pts}"));
    println!("{}", lines.join("\n"));
    assert!(ok2 && ok3 && ok4, "{}", lines.join("\n"));
}
