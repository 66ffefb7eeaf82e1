//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Trains the desk model once and shares it across criteria.

use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use spreadsim_cli::config::{BenignPolicy, ExperimentConfig, OrderSpec};
use spreadsim_cli::manifest::Manifest;
use spreadsim_cli::pipeline::{
    cmd_attack, cmd_rag_eval, cmd_simulate, cmd_train, load_transcripts, Arm, AttackSummary, Lab, RunShape,
    SimulateSummary, Simulator, TRANSCRIPTS,
};
use spreadsim_core::chatroom::Role;
use spreadsim_core::corpus::grammar::{chat_prompt, evidence_reply, short_reply};
use spreadsim_core::corpus::{generate_world, load_edit_dataset, DatasetSchema};
use spreadsim_core::editor::{compute_key, rank_one_factors, SecondMoment, ValueObjective};
use spreadsim_core::linalg::numerical_rank;
use spreadsim_core::metrics::{
    accuracy, locality_accuracy, matches, rephrase_accuracy, spread_curve, Against, AnswerRecord, ProbeKind,
};
use spreadsim_core::persuade::{dpo_loss, AdapterSet, PreferencePair};
use spreadsim_core::ragstore::{RagIndex, Slice};
use spreadsim_core::tinylm::{loss_and_grads, ModelConfig, ModelParams};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(id: usize, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let o = f();
    let took = started.elapsed();
    let in_time = took <= limit;
    let pass = o.pass && in_time;
    println!(
        "{} criterion {id:>2} {name}: {} [{:.1}s of {}s]",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        took.as_secs_f64(),
        limit.as_secs()
    );
    pass
}

fn mins(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn gradients() -> Outcome {
    const H: f64 = 1e-5;
    let world = generate_world(3, 6, 2, 2).unwrap();
    let vocab = world.vocab();
    let cfg = ModelConfig {
        n_layers: 3,
        d_model: 8,
        d_ffn: 16,
        n_heads: 2,
        vocab_size: vocab.len(),
        context_length: 32,
        ln_eps: 1e-5,
    };
    let params = ModelParams::init(cfg, vocab, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let prompts = world.all_prompts();

    // LM loss, every tensor
    let batch: Vec<Vec<usize>> = [format!("{} {} .", prompts[0].0, prompts[0].1), prompts[3].0.clone()]
        .iter()
        .map(|t| params.vocab.encode(t).unwrap())
        .collect();
    let (_, grads) = loss_and_grads(&params, &batch).unwrap();
    let mut lm: f64 = 0.0;
    for (name, g) in grads.named() {
        for _ in 0..4 {
            let (i, j) = (rng.gen_range(0..g.nrows()), rng.gen_range(0..g.ncols()));
            let f = |h: f64| {
                let mut p = params.clone();
                p.weights.get_mut(&name).unwrap()[(i, j)] += h;
                loss_and_grads(&p, &batch).unwrap().0
            };
            lm = lm.max(rel_err(g[(i, j)], (f(H) - f(-H)) / (2.0 * H)));
        }
    }

    // value objective, every coordinate of z
    let edit = world.sample_edits(1, 2, 5).unwrap().remove(0);
    let key = compute_key(&params, 1, &edit.prompt, edit.subject(), &[String::new()]).unwrap();
    let obj = ValueObjective::new(&params, 1, &edit, &key, 0.5).unwrap();
    let z: DVector<f64> = obj.z0() + DVector::from_fn(obj.z0().len(), |_, _| rng.gen_range(-0.5..0.5));
    let (_, _, _, gz) = obj.eval(&z);
    let mut value: f64 = 0.0;
    for i in 0..z.len() {
        let f = |h: f64| {
            let mut zz = z.clone();
            zz[i] += h;
            obj.eval(&zz).0
        };
        value = value.max(rel_err(gz[i], (f(H) - f(-H)) / (2.0 * H)));
    }

    // DPO through the adapters
    let pair = PreferencePair {
        x: chat_prompt(&[], &prompts[1].0, usize::MAX).0,
        y_w: evidence_reply(&prompts[1].1),
        y_l: short_reply(&prompts[1].1),
    };
    let mut adapters = AdapterSet::init(&params, &AdapterSet::attention_tensors(&params), 2, 1.0, 3).unwrap();
    for a in &mut adapters.adapters {
        a.b = DMatrix::from_fn(a.b.nrows(), a.b.ncols(), |_, _| rng.gen_range(-0.3..0.3));
    }
    let (_, dg) = dpo_loss(&params, &adapters, &params, &pair, 0.1).unwrap();
    let mut dpo: f64 = 0.0;
    for (ai, (da, db)) in dg.iter().enumerate() {
        for (which, g) in [(0, da), (1, db)] {
            let (i, j) = (rng.gen_range(0..g.nrows()), rng.gen_range(0..g.ncols()));
            let f = |h: f64| {
                let mut ad = adapters.clone();
                let m = if which == 0 { &mut ad.adapters[ai].a } else { &mut ad.adapters[ai].b };
                m[(i, j)] += h;
                dpo_loss(&params, &ad, &params, &pair, 0.1).unwrap().0
            };
            dpo = dpo.max(rel_err(g[(i, j)], (f(H) - f(-H)) / (2.0 * H)));
        }
    }
    let worst = lm.max(value).max(dpo);
    outcome(
        worst <= 1e-4,
        format!("max relative error lm {lm:.1e}, value {value:.1e}, dpo {dpo:.1e} (bound 1e-4)"),
    )
}

fn rank_one() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let normal = |rng: &mut ChaCha8Rng, r: usize, c: usize| DMatrix::<f64>::from_fn(r, c, |_, _| rng.sample(StandardNormal));
    let (mut fit, mut rank_ok, mut orth): (f64, usize, f64) = (0.0, 0, 0.0);
    let n = 120;
    for _ in 0..n {
        let (d, f) = (rng.gen_range(2..24), rng.gen_range(2..48));
        let w = normal(&mut rng, d, f);
        let keys = normal(&mut rng, f, 2 * f);
        let c = SecondMoment {
            matrix: &keys * keys.transpose() / (2 * f) as f64 + DMatrix::identity(f, f) * 1e-3,
            samples: 2 * f,
            ridge: 1e-3,
        };
        let k = normal(&mut rng, f, 1).column(0).into_owned();
        let v = normal(&mut rng, d, 1).column(0).into_owned();
        let r1 = rank_one_factors(&w, &k, &v, &c).unwrap();
        let mut w2 = w.clone();
        w2.ger(1.0, &r1.left, &r1.right, 1.0);
        fit = fit.max((&w2 * &k - &v).norm());
        rank_ok += (numerical_rank(&(&w2 - &w), 1e-10) == 1) as usize;
        let r = normal(&mut rng, f, 1).column(0).into_owned();
        let q = &c.matrix * (&r - &k * (r.dot(&k) / k.dot(&k)));
        orth = orth.max((&w2 * &q - &w * &q).norm() / (1.0 + (&w * &q).norm()));
    }
    outcome(
        fit <= 1e-8 && rank_ok == n && orth <= 1e-12,
        format!("{n} instances: max |W'k-v| {fit:.1e}, rank one {rank_ok}/{n}, orthogonal-key change {orth:.1e}"),
    )
}

fn brute_force<'a>(slices: &'a [Slice], q: &[f64], k: usize) -> Vec<(&'a Slice, f64)> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut all: Vec<(&Slice, f64)> = slices
        .iter()
        .map(|s| {
            let dot: f64 = s.embedding.iter().zip(q).map(|(a, b)| a * b).sum();
            (s, dot / (norm(&s.embedding) * norm(q)))
        })
        .collect();
    // tie order first, then a stable sort on score
    all.sort_by(|a, b| (&a.0.scenario, &a.0.agent, a.0.turn).cmp(&(&b.0.scenario, &b.0.agent, b.0.turn)));
    all.sort_by(|a, b| b.1.total_cmp(&a.1));
    all.truncate(k);
    all
}

fn retrieval_oracle(index: &RagIndex, queries: &[String]) -> (usize, usize, usize, usize) {
    let (mut agree, mut total) = (0, 0);
    for q in queries {
        let qe = index.embedder.embed(q).unwrap();
        for k in [1, 3, 5, 10] {
            let got = index.query_topk(q, k).unwrap();
            let want = brute_force(&index.slices, &qe, k);
            total += 1;
            let same = got.len() == want.len()
                && got.iter().zip(&want).all(|((a, sa), (b, sb))| {
                    (sa - sb).abs() < 1e-12 && (&a.scenario, &a.agent, a.turn) == (&b.scenario, &b.agent, b.turn)
                });
            agree += same as usize;
        }
    }
    let mut self_hits = 0;
    let step = (index.len() / 300).max(1);
    let probed: Vec<&Slice> = index.slices.iter().step_by(step).collect();
    for s in &probed {
        let top = index.query_topk(&s.text, 1).unwrap();
        self_hits += (top[0].0.text == s.text && (top[0].1 - 1.0).abs() < 1e-12) as usize;
    }
    (agree, total, self_hits, probed.len())
}

fn metric_oracle() -> Outcome {
    let words = ["rugby", "Rugby", "golf", "new", "york", "New York", "tea", "because", "."];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut phrase = |max: usize| {
        let n = rng.gen_range(0..=max);
        (0..n).map(|_| *words.choose(&mut rng).unwrap()).collect::<Vec<_>>().join(" ")
    };
    let kinds = [ProbeKind::Main, ProbeKind::Rephrase, ProbeKind::Locality];
    let records: Vec<AnswerRecord> = (0..3000)
        .map(|i| AnswerRecord {
            scenario: format!("s{}", i % 13),
            agent: format!("a{}", i % 4),
            role: Role::Benign,
            turn: 2,
            predicted: phrase(4),
            o_old: phrase(2),
            o_new: phrase(2),
            kind: kinds[i % 3],
        })
        .collect();
    let hit = |p: &str, t: &str| {
        let norm = |s: &str| s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
        let t = norm(t);
        !t.is_empty() && format!(" {} ", norm(p)).contains(&format!(" {t} "))
    };
    let loop_rate = |rs: &[AnswerRecord], target: &dyn Fn(&AnswerRecord) -> String| {
        let mut h = 0;
        for r in rs {
            if hit(&r.predicted, &target(r)) {
                h += 1;
            }
        }
        h as f64 / rs.len() as f64
    };
    let of = |k: ProbeKind| records.iter().filter(|r| r.kind == k).cloned().collect::<Vec<_>>();
    let (main, reph, loc) = (of(ProbeKind::Main), of(ProbeKind::Rephrase), of(ProbeKind::Locality));
    let checks = [
        accuracy(&main, Against::Old).unwrap() == loop_rate(&main, &|r| r.o_old.clone()),
        accuracy(&main, Against::New).unwrap() == loop_rate(&main, &|r| r.o_new.clone()),
        rephrase_accuracy(&reph).unwrap() == loop_rate(&reph, &|r| r.o_new.clone()),
        locality_accuracy(&loc).unwrap() == loop_rate(&loc, &|r| r.o_old.clone()),
        records.iter().all(|r| matches(&r.predicted, &r.o_new) == hit(&r.predicted, &r.o_new)),
    ];
    let ok = checks.iter().filter(|c| **c).count();
    outcome(ok == checks.len(), format!("{} records, {ok}/{} rate checks exactly equal", records.len(), checks.len()))
}

fn determinism(root: &Path) -> Outcome {
    let run = |dir: &Path, workers: usize| -> Result<Manifest, String> {
        let mut cfg = ExperimentConfig::default();
        cfg.model.steps = 150;
        cfg.model.target_accuracy = None;
        cfg.attack.n_edits = Some(4);
        cfg.attack.capability_edits = Some(2);
        cfg.attack.persuade.steps = 20;
        cfg.community.n_scenarios = 8;
        cfg.community.grid_scenarios = 2;
        cfg.community.agent_grid = vec![2, 3];
        cfg.workers = workers;
        cfg.output = dir.to_path_buf();
        cmd_train(&cfg).map_err(|e| e.to_string())?;
        cmd_attack(&cfg).map_err(|e| e.to_string())?;
        cmd_simulate(&cfg).map_err(|e| e.to_string())?;
        cmd_rag_eval(&cfg).map_err(|e| e.to_string())?;
        Manifest::load_or_default(dir).map_err(|e| e.to_string())
    };
    let a = run(&root.join("a"), 1);
    let b = run(&root.join("b"), 2);
    match (a, b) {
        (Ok(a), Ok(b)) => {
            let files: usize = a.stages.values().map(|s| s.files.len()).sum();
            let same = a.stages == b.stages && files > 0;
            outcome(same, format!("{} stages, {files} hashed files identical across reruns (1 vs 2 workers): {same}", a.stages.len()))
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, format!("run failed: {e}")),
    }
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut cfg = ExperimentConfig::default();
    cfg.community.n_scenarios = 200;
    cfg.community.grid_scenarios = 40;
    cfg.attack.n_edits = Some(50);
    cfg.output = tmp.path().join("run");
    let mut all = Vec::new();

    all.push(report(1, "gradient correctness", mins(1), gradients));
    all.push(report(2, "rank-one algebra", Duration::from_secs(10), rank_one));

    let mut attack: Option<AttackSummary> = None;
    // the budget covers pretraining the shared model as well
    all.push(report(3, "edit efficacy", mins(15), || match cmd_train(&cfg).and_then(|_| cmd_attack(&cfg)) {
        Ok(a) => {
            let (e, r, l) = (a.efficacy.unwrap_or(0.0), a.rephrase.unwrap_or(0.0), a.locality_drift.unwrap_or(1.0));
            let o = outcome(
                a.n_edits >= 50 && e >= 0.9 && r >= 0.6 && l <= 0.1,
                format!("{} edits: efficacy {e:.3} (>= 0.9), rephrase {r:.3} (>= 0.6), locality change {l:.3} (<= 0.1)", a.n_edits),
            );
            attack = Some(a);
            o
        }
        Err(e) => outcome(false, format!("train/attack failed: {e}")),
    }));

    all.push(report(4, "side-effect bound", mins(5), || match &attack {
        Some(a) => {
            let c = &a.capability;
            let d = [c.drift_stage1, c.drift_stage2, c.drift_stage12];
            outcome(
                d.iter().all(|x| matches!(x, Some(v) if *v <= 0.005)),
                format!(
                    "probe of {} facts, base recall {:.3}; drift stage I {:?}, II {:?}, I+II {:?} (<= 0.005)",
                    c.probe_size, c.base_recall, d[0], d[1], d[2]
                ),
            )
        }
        None => outcome(false, "no attack summary"),
    }));

    all.push(report(5, "DPO effectiveness", mins(10), || match attack.as_ref().and_then(|a| a.stage1.as_ref()) {
        Some(s) => outcome(
            s.pairs >= 200 && s.margin > 0.0 && s.loss < 2f64.ln() && s.reference_unchanged,
            format!(
                "{} pairs: margin {:.3} (> 0), loss {:.4} (< ln 2), reference unchanged {}",
                s.pairs, s.margin, s.loss, s.reference_unchanged
            ),
        ),
        None => outcome(false, "no stage I summary"),
    }));

    let mut sim: Option<SimulateSummary> = None;
    all.push(report(6, "spread trend", mins(30), || {
        let mut bcfg = cfg.clone();
        bcfg.community.benign_policy = BenignPolicy::Belief;
        let belief = Lab::load(&bcfg).and_then(|lab| {
            let edits = load_edit_dataset(&cfg.output.join("edits.json"), DatasetSchema::Counterfact)?;
            let s = Simulator::new(&lab, None, &edits)?;
            let shape = RunShape {
                n_agents: 5,
                order: OrderSpec::First,
                n_scenarios: 200,
                full_probes: false,
            };
            let (res, failed) = s.run(shape, Arm::Attack);
            let good = res
                .iter()
                .filter(|r| {
                    let c = spread_curve(&r.transcript).unwrap();
                    let p: Vec<f64> = c.iter().map(|x| x.accept_prob.unwrap()).collect();
                    p.windows(2).all(|w| w[1] >= w[0]) && p[2] > p[0]
                })
                .count();
            Ok((good, res.len() + failed.len()))
        });
        let lm = cmd_simulate(&cfg);
        match (belief, lm) {
            (Ok((good, n)), Ok(s)) => {
                let atk = s.attack.benign.acc_new.unwrap_or(0.0);
                let ctl = s.control.as_ref().and_then(|c| c.benign.acc_new).unwrap_or(1.0);
                let o = outcome(
                    n == 200 && good as f64 >= 0.95 * n as f64 && atk - ctl >= 0.10,
                    format!(
                        "belief community monotone with turn 3 > turn 1 in {good}/{n} (>= 95%); LM benign acc_new attack {atk:.3} vs control {ctl:.3} (gap >= 0.10)"
                    ),
                );
                sim = Some(s);
                o
            }
            (Err(e), _) | (_, Err(e)) => outcome(false, format!("simulation failed: {e}")),
        }
    }));

    all.push(report(7, "ablation directionality", mins(30), || match &sim {
        Some(s) => {
            let at = |n: usize| s.agent_grid.iter().find(|c| c.n_agents == n).and_then(|c| c.benign_acc_new);
            let (a2, a10) = (at(2), at(10));
            let orders: Vec<String> = s
                .order_grid
                .iter()
                .map(|c| format!("{}={:.3}", c.label, c.benign_acc_new.unwrap_or(f64::NAN)))
                .collect();
            let mut labels: Vec<&str> = s.order_grid.iter().map(|c| c.label.as_str()).collect();
            labels.dedup();
            outcome(
                matches!((a2, a10), (Some(x), Some(y)) if x >= y) && labels.len() == 3,
                format!("acc_new n=2 {a2:?} >= n=10 {a10:?}; order cells {}", orders.join(", ")),
            )
        }
        None => outcome(false, "no simulation summary"),
    }));

    all.push(report(8, "retrieval and RAG persistence", mins(10), || match cmd_rag_eval(&cfg) {
        Ok(r) => {
            let index = RagIndex::load_jsonl(&cfg.output.join("rag_index.jsonl"), None).unwrap();
            let transcripts = load_transcripts(&cfg.output.join(TRANSCRIPTS)).unwrap();
            let mut queries: Vec<String> = transcripts.iter().map(|t| t.topic.prompt.clone()).collect();
            queries.sort();
            queries.dedup();
            queries.push("favourite unrelated words".into());
            let (agree, total, self_hits, probed) = retrieval_oracle(&index, &queries);
            let at = |k: usize| r.rows.iter().find(|x| x.k == k).map(|x| x.acc_new);
            let (k0, k5) = (at(0), at(5));
            outcome(
                agree == total && self_hits == probed && matches!((k0, k5), (Some(a), Some(b)) if b > a),
                format!(
                    "top-k = exhaustive scan {agree}/{total}; self-retrieval rank 1 {self_hits}/{probed}; withheld {} scenarios acc_new k=0 {k0:?} -> k=5 {k5:?}",
                    r.eval_scenarios.len()
                ),
            )
        }
        Err(e) => outcome(false, format!("rag-eval failed: {e}")),
    }));

    all.push(report(9, "metric oracle equivalence", Duration::from_secs(10), metric_oracle));
    all.push(report(10, "determinism", mins(30), || determinism(&tmp.path().join("det"))));

    let passed = all.iter().filter(|p| **p).count();
    println!("{passed}/{} criteria passed", all.len());
    if passed != all.len() {
        std::process::exit(1);
    }
}
