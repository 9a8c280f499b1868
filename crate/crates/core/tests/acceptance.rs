//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Run with `cargo test -p fairlora-core --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use fairlora_core::config::RunConfig;
use fairlora_core::data;
use fairlora_core::fid::{self, EmbeddingSet};
use fairlora_core::lora::ParamCountSpec;
use fairlora_core::metrics;
use fairlora_core::model::LayerWeight;
use fairlora_core::train::{self, FineTuner, Method, Objective, SweepSpec};
use fairlora_core::{count_trainable, EvalBundle, Matrix, MlpClassifier, Mode, ParamId, SeededRng, TrainConfig};

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

fn within(limit: Duration, elapsed: Duration) -> bool {
    elapsed <= limit
}

fn c1_parameter_counts() -> Outcome {
    let start = Instant::now();
    let rows = [(8, 40, 325_672usize), (16, 100, 666_724)];
    let mut ok = true;
    let mut parts = Vec::new();
    for (rank, classes, want) in rows {
        let got = count_trainable(&ParamCountSpec::vit_b16_two_projections(rank, classes)).unwrap();
        ok &= got == want;
        parts.push(format!("r={rank}: {got} (want {want})"));
    }
    let t = start.elapsed();
    outcome(ok && within(Duration::from_secs(1), t), format!("{}; {t:.2?}", parts.join(", ")))
}

fn analytic(inst: &GradInstance) -> BTreeMap<ParamId, Vec<f64>> {
    let tuner = FineTuner::new(inst.model.clone(), Objective::Fair { lambda: inst.lambda }, 0.1, 0.0);
    let (g, _) = tuner.gradient(&inst.features, &inst.labels, &inst.groups, &inst.batch).unwrap();
    g.grads.into_iter().map(|(k, m)| (k, m.as_slice().to_vec())).collect()
}

fn worst_fd_error(inst: &GradInstance) -> f64 {
    let a = analytic(inst);
    let n = finite_difference(inst);
    a.iter()
        .flat_map(|(id, ga)| ga.iter().zip(&n[id]).map(|(x, y)| rel_err(*x, *y, REL_FLOOR)))
        .fold(0.0, f64::max)
}

fn c2_gradient_check() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(2);
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    let mut lora_tensors = true;
    for k in 0..30 {
        let mode = if k % 2 == 0 { Mode::Fft } else { Mode::Lora };
        let inst = random_instance(&mut rng, mode, [0.1, 1.0, 10.0][k % 3]);
        if mode == Mode::Lora {
            let ids = inst.model.trainable_ids();
            lora_tensors &= [ParamId::LoraA(0), ParamId::LoraB(0), ParamId::LoraA(1), ParamId::LoraB(1)]
                .iter()
                .all(|id| ids.contains(id));
        }
        worst = worst.max(worst_fd_error(&inst));
        instances += 1;
    }
    let t = start.elapsed();
    outcome(
        worst < 1e-6 && lora_tensors && within(Duration::from_secs(30), t),
        format!("{instances} instances (FFT and LoRA, λ ∈ {{0.1, 1, 10}}), worst relative error {worst:.2e}; {t:.2?}"),
    )
}

fn c3_mean_cancellation() -> Outcome {
    let mut rng = SeededRng::new(3);
    let mut worst_fd: f64 = 0.0;
    let mut worst_term: f64 = 0.0;
    for k in 0..20 {
        let mode = if k % 2 == 0 { Mode::Lora } else { Mode::Fft };
        let inst = random_instance(&mut rng, mode, [0.1, 1.0, 10.0][k % 3]);
        // the finite difference differentiates J with the group mean recomputed
        worst_fd = worst_fd.max(worst_fd_error(&inst));
        // explicit mean-derivative term Σ_g 2(L_g − mean)·∇mean
        let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in &inst.batch {
            members.entry(inst.groups[i]).or_default().push(i);
        }
        let groups: Vec<_> = members
            .values()
            .map(|idx| inst.model.backward_subset(&inst.features, &inst.labels, idx).unwrap())
            .collect();
        let mean = groups.iter().map(|g| g.loss).sum::<f64>() / groups.len() as f64;
        for id in inst.model.trainable_ids() {
            let len = groups[0].grads[&id].as_slice().len();
            for e in 0..len {
                let grad_mean = groups.iter().map(|g| g.grads[&id].as_slice()[e]).sum::<f64>() / groups.len() as f64;
                let term: f64 = groups.iter().map(|g| 2.0 * (g.loss - mean) * grad_mean).sum();
                worst_term = worst_term.max(term.abs() / grad_mean.abs().max(1e-300).max(1.0));
            }
        }
    }
    outcome(
        worst_fd < 1e-6 && worst_term < 1e-12,
        format!("worst relative error vs full-J finite differences {worst_fd:.2e}; dropped term ≤ {worst_term:.1e}"),
    )
}

fn bits(m: &MlpClassifier) -> Vec<u64> {
    m.trainable_ids()
        .into_iter()
        .flat_map(|id| m.param(id).unwrap().as_slice().to_vec())
        .map(f64::to_bits)
        .collect()
}

fn imbalanced_config() -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/imbalanced.cfg");
    RunConfig::load(path).expect("configs/imbalanced.cfg")
}

fn imbalanced_task(config: &RunConfig) -> (fairlora_core::Dataset, MlpClassifier) {
    let data = data::synth_generate(&config.synthetic_spec().unwrap().unwrap()).unwrap();
    let pre = data::synth_generate(&config.pretrain_spec().unwrap().unwrap()).unwrap();
    let base = train::pretrain(&config.pretrain_config(), &pre).unwrap();
    (data, base)
}

fn c4_zero_lambda() -> Outcome {
    let config = imbalanced_config();
    let (data, base) = imbalanced_task(&config);
    let x = data.feature_matrix();
    let y = data.labels();
    let g = data.ids(config.train.group_key).unwrap();
    let mut all_equal = true;
    let mut checked = Vec::new();
    for mode in [Mode::Fft, Mode::Lora] {
        let tc = TrainConfig { mode, ..config.train.clone() };
        let model = train::prepare_model(&tc, &base, data.num_classes()).unwrap();
        let mut plain = FineTuner::new(model.clone(), Objective::Plain, tc.learning_rate, tc.momentum);
        let mut fair = FineTuner::new(model, Objective::Fair { lambda: 0.0 }, tc.learning_rate, tc.momentum);
        let mut rng = SeededRng::new(tc.seed);
        let batches = data::stratified_batches(&g, tc.batch_size, true, &mut rng).unwrap();
        for batch in batches.iter().take(20) {
            plain.step(&x, &y, &g, batch).unwrap();
            fair.step(&x, &y, &g, batch).unwrap();
            all_equal &= bits(plain.model()) == bits(fair.model());
        }
        checked.push(format!("{mode:?}: {} steps", batches.len().min(20)));
    }
    outcome(all_equal, format!("parameters bitwise equal after every step ({})", checked.join(", ")))
}

fn c5_metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(5);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (p, l, s, c) = random_bundle(&mut rng);
        let o = oracle_metrics(&p, &l, &s, c);
        let b = EvalBundle::new(p, l).unwrap().with_num_classes(c).unwrap().with_sensitive(s).unwrap();
        let scores = metrics::per_group_f1_recall(&b, metrics::Grouping::ByClass).unwrap();
        let r = metrics::summary(&b).unwrap();
        let fmin = o.f1.iter().cloned().fold(f64::INFINITY, f64::min);
        let fmax = o.f1.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut ok = metrics::accuracy(&b) == o.accuracy
            && scores.f1.values().copied().eq(o.f1.iter().copied())
            && scores.recall.values().copied().eq(o.recall.iter().copied())
            && r.f1_min == fmin
            && r.delta_f1 == fmax - fmin
            && r.recall_min == o.recall.iter().cloned().fold(f64::INFINITY, f64::min);
        let groups = b.sensitive_groups();
        for cls in 0..c {
            let mut ova_all = Some(0.0f64);
            for &g in &groups {
                let want = o.tpr_in[&(cls, g)].zip(o.tpr_out[&(cls, g)]).map(|(a, b)| (a - b).abs());
                ok &= metrics::eod_one_vs_all(&b, cls, g).ok() == want;
                ova_all = ova_all.zip(want).map(|(m, w)| m.max(w));
                for &h in &groups {
                    let want = o.tpr_in[&(cls, g)].zip(o.tpr_in[&(cls, h)]).map(|(a, b)| (a - b).abs());
                    ok &= metrics::eod_pair(&b, cls, g, h).ok() == want;
                }
            }
            ok &= metrics::eod_max(&b, cls).ok() == ova_all;
        }
        if !ok {
            mismatches += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        mismatches == 0 && within(Duration::from_secs(10), t),
        format!("1000 bundles, {mismatches} mismatches; {t:.2?}"),
    )
}

fn c6_eod_structure() -> Outcome {
    let mut rng = SeededRng::new(6);
    let (mut bundles, mut two_group) = (0, 0);
    let mut ok = true;
    while bundles < 1000 {
        let (p, l, s, c) = random_bundle(&mut rng);
        let b = EvalBundle::new(p, l).unwrap().with_num_classes(c).unwrap().with_sensitive(s).unwrap();
        let groups = b.sensitive_groups();
        for cls in 0..c {
            let ova: Option<Vec<f64>> = groups.iter().map(|&g| metrics::eod_one_vs_all(&b, cls, g).ok()).collect();
            if let Some(v) = ova {
                ok &= metrics::eod_max(&b, cls).ok() == Some(v.iter().cloned().fold(0.0, f64::max));
            }
            if groups.len() == 2 {
                ok &= metrics::eod_one_vs_all(&b, cls, groups[0]).ok()
                    == metrics::eod_pair(&b, cls, groups[0], groups[1]).ok();
            }
        }
        let r = metrics::summary(&b).unwrap();
        ok &= r.eod_max == r.eod_one_vs_all.values().cloned().reduce(f64::max);
        two_group += usize::from(groups.len() == 2);
        bundles += 1;
    }
    outcome(ok, format!("{bundles} bundles ({two_group} with two groups)"))
}

fn c7_directional_effect() -> Outcome {
    let start = Instant::now();
    let config = imbalanced_config();
    let (data, base) = imbalanced_task(&config);
    let seeds: Vec<u64> = (0..5).collect();
    let spec = SweepSpec {
        methods: vec![Method::Lora, Method::FairLora],
        lambdas: vec![0.1, 1.0, 10.0],
        ranks: vec![4],
        seeds: seeds.clone(),
    };
    let result = train::sweep(&spec, &TrainConfig { rank: Some(4), ..config.train.clone() }, &base, &data).unwrap();
    let mut lora: Vec<(f64, f64)> = Vec::new();
    let mut fair: BTreeMap<u64, (f64, Vec<(f64, f64)>)> = BTreeMap::new();
    let mut diverged = Vec::new();
    for (cell, runs) in &result.cells {
        let ok: Vec<(f64, f64)> = runs
            .iter()
            .filter_map(|(_, r)| r.as_ref().ok())
            .map(|r| (r.metrics.accuracy, r.metrics.loss_variance_across_groups.unwrap()))
            .collect();
        if ok.len() < runs.len() {
            diverged.push(format!("λ={} ({} of 5 diverged)", cell.lambda, runs.len() - ok.len()));
        }
        if cell.method == Method::Lora {
            lora = ok;
        } else if ok.len() == seeds.len() {
            let mean = ok.iter().map(|r| r.0).sum::<f64>() / ok.len() as f64;
            fair.insert(cell.lambda.to_bits(), (mean, ok));
        }
    }
    let t = start.elapsed();
    let Some((&best_bits, (fair_acc, fair_runs))) = fair
        .iter()
        .max_by(|a, b| a.1 .0.partial_cmp(&b.1 .0).unwrap().then(b.0.cmp(a.0)))
    else {
        return outcome(false, format!("no FairLoRA λ completed all seeds; {}", diverged.join(", ")));
    };
    if lora.len() != seeds.len() {
        return outcome(false, "LoRA runs diverged");
    }
    let wins = fair_runs.iter().zip(&lora).filter(|(f, l)| f.1 < l.1).count();
    let lora_acc = lora.iter().map(|r| r.0).sum::<f64>() / lora.len() as f64;
    let gap = 100.0 * (lora_acc - fair_acc).abs();
    let vars = |v: &[(f64, f64)]| v.iter().map(|r| format!("{:.4}", r.1)).collect::<Vec<_>>().join("/");
    outcome(
        wins >= 4 && gap <= 2.0 && within(Duration::from_secs(120), t),
        format!(
            "best λ = {}: variance lower in {wins}/5 seeds (FairLoRA {} vs LoRA {}), accuracy {:.2}% vs {:.2}% (gap {gap:.2} pp){}; {t:.2?}",
            f64::from_bits(best_bits),
            vars(fair_runs),
            vars(&lora),
            100.0 * fair_acc,
            100.0 * lora_acc,
            if diverged.is_empty() { String::new() } else { format!("; excluded {}", diverged.join(", ")) }
        ),
    )
}

fn c8_freezing_and_zero_start() -> Outcome {
    let config = imbalanced_config();
    let (data, base) = imbalanced_task(&config);
    let x = data.feature_matrix();
    let base_preds = base.predict(&x).unwrap();
    let mut ok = true;
    for (fair, lambda) in [(false, 0.0), (true, 0.1)] {
        let tc = TrainConfig { mode: Mode::Lora, fair, lambda, ..config.train.clone() };
        let start = train::prepare_model(&tc, &base, data.num_classes()).unwrap();
        ok &= start.predict(&x).unwrap() == base_preds;
        let run = train::finetune(&tc, &base, &data).unwrap();
        for l in run.best_model.hidden_layers() {
            let (LayerWeight::LowRank(ad), LayerWeight::Dense(orig)) =
                (&run.best_model.layers()[l].weight, &base.layers()[l].weight)
            else {
                ok = false;
                continue;
            };
            ok &= ad.base().as_slice().iter().zip(orig.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
            ok &= run.best_model.layers()[l].bias == base.layers()[l].bias;
        }
    }
    outcome(ok, "LoRA and FairLoRA: hidden bases bitwise unchanged, step-0 predictions equal the pretrained model's")
}

fn c9_fid() -> Outcome {
    let mut rng = SeededRng::new(9);
    let set = |m: Matrix| EmbeddingSet::new(m, "x").unwrap();
    let shift = |m: &Matrix, s: f64, v: &[f64]| {
        let mut o = m.scale(s);
        for i in 0..o.rows() {
            for (x, d) in o.row_mut(i).iter_mut().zip(v) {
                *x += d;
            }
        }
        o
    };
    let x = gaussian(&mut rng, 300, 6, 1.0);
    let y = shift(&gaussian(&mut rng, 250, 6, 1.0), 1.7, &[0.5; 6]);
    let self_d = fid::fid(&set(x.clone()), &set(x.clone())).unwrap().distance;
    let ab = fid::fid(&set(x.clone()), &set(y.clone())).unwrap().distance;
    let ba = fid::fid(&set(y.clone()), &set(x.clone())).unwrap().distance;
    let sym = (ab - ba).abs() / ab.max(ba);
    let v = [1.0, -0.5, 2.0, 0.0, 0.25, -1.5];
    let shifted = fid::fid(&set(x.clone()), &set(shift(&x, 1.0, &v))).unwrap().distance;
    let norm2: f64 = v.iter().map(|a| a * a).sum();
    let (m1, s1, m2, s2) = (0.0, 1.0, 4.0, 3.0);
    let u1 = shift(&gaussian(&mut rng, 10_000, 1, 1.0), s1, &[m1]);
    let u2 = shift(&gaussian(&mut rng, 10_000, 1, 1.0), s2, &[m2]);
    let closed: f64 = (m1 - m2) * (m1 - m2) + (s1 - s2) * (s1 - s2);
    let uni = fid::fid(&set(u1), &set(u2)).unwrap().distance;
    let uni_err = (uni - closed).abs() / closed;
    outcome(
        self_d <= 1e-8 && sym <= 1e-6 && (shifted - norm2).abs() <= 1e-8 && uni_err <= 0.02,
        format!(
            "fid(X,X) = {self_d:.1e}, asymmetry {sym:.1e}, mean-shift error {:.1e}, univariate {uni:.4} vs {closed} ({:.2}%)",
            (shifted - norm2).abs(),
            100.0 * uni_err
        ),
    )
}

fn c10_determinism() -> Outcome {
    let mut config = imbalanced_config();
    config.sweep = SweepSpec {
        methods: Method::ALL.to_vec(),
        lambdas: vec![0.1, 1.0],
        ranks: vec![2, 4],
        seeds: vec![0, 1],
    };
    config.train.epochs = 5;
    let (data, base) = imbalanced_task(&config);
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let result = train::sweep(&config.sweep, &config.train, &base, &data).unwrap();
        result.write(dir.path()).unwrap();
        let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
        outputs.push((read("metrics.csv"), read("table.md")));
    }
    let same = outputs[0] == outputs[1];
    outcome(
        same,
        format!(
            "two sweep executions: metrics.csv {} bytes, table.md {} bytes, {}",
            outputs[0].0.len(),
            outputs[0].1.len(),
            if same { "byte-identical" } else { "different" }
        ),
    )
}

fn c11_coverage() -> Outcome {
    let mut rng = SeededRng::new(11);
    let mut failures = 0;
    let mut batches = 0usize;
    for _ in 0..100 {
        let (ids, batch) = coverage_config(&mut rng);
        batches += 5 * (ids.len() / batch);
        if !verify_coverage(&ids, batch, 5, &mut rng) {
            failures += 1;
        }
    }
    outcome(
        failures == 0,
        format!("100 configurations × 5 epochs ({batches} full batches checked), {failures} failing"),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("parameter-count reproduction", c1_parameter_counts),
        ("fair gradient vs finite differences", c2_gradient_check),
        ("mean-cancellation soundness", c3_mean_cancellation),
        ("λ = 0 reduction", c4_zero_lambda),
        ("metric oracle equivalence", c5_metric_oracle),
        ("EOD structure", c6_eod_structure),
        ("directional fairness effect", c7_directional_effect),
        ("LoRA freezing and zero-start", c8_freezing_and_zero_start),
        ("FID properties", c9_fid),
        ("end-to-end determinism", c10_determinism),
        ("stratified-batch coverage", c11_coverage),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        failed += usize::from(!o.pass);
        println!("criterion {:>2} {}: {name}: {}", i + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
