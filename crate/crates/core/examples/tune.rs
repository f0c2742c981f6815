//! Scratch harness for calibrating the learning experiments.

use rdmn_core::forward::PreparedInstance;
use rdmn_core::graph::{split_dataset, DatasetInstance, Query};
use rdmn_core::model::{ModelConfig, ModelParams};
use rdmn_core::synth::{generate, TaskFamily, TaskSpec};
use rdmn_core::train::{evaluate, train, TrainConfig};
use std::time::Instant;

fn prepare(data: &[DatasetInstance], relations: usize) -> Vec<PreparedInstance> {
    data.iter().map(|i| PreparedInstance::new(i, relations)).collect()
}

fn multitask_run(d: usize, hops: usize, instances: usize, epochs: usize, lr: f64, seed: u64) {
    let t0 = Instant::now();
    let spec = TaskSpec {
        family: TaskFamily::SingleGraphMultitask,
        nodes_min: 4,
        nodes_max: 8,
        alphabet: 3,
        relations: 1,
        positive_rate: 0.5,
        instances,
        seed,
        side_info: false,
    };
    let (schema, data) = generate(&spec).unwrap();
    println!("gen: {:?} ({} instances)", t0.elapsed(), data.len());
    let (train_d, valid_d, test_d) = split_dataset(data, (0.8, 0.1, 0.1), seed).unwrap();
    let cfg = ModelConfig {
        d_q: d,
        d_m: d,
        d_x: schema.d_x,
        hops,
        heads: 1,
        relations: schema.relations,
        n_tasks: schema.tasks,
        query_dim: 0,
        n_classes: 2,
        dropout: 0.1,
        attn_dim: d,
        decoder_hidden: d,
    };
    let tcfg = TrainConfig {
        learning_rate: lr,
        batch_size: 16,
        max_epochs: epochs,
        patience: 4,
        seed,
        ..TrainConfig::default()
    };
    let tr = prepare(&train_d, cfg.relations);
    let va = prepare(&valid_d, cfg.relations);
    let te = prepare(&test_d, cfg.relations);
    let params = ModelParams::init(&cfg, seed).unwrap();
    let t1 = Instant::now();
    let out = train(params, &cfg, &tcfg, &tr, &va).unwrap();
    println!(
        "train: {:?} ({} epochs, best {})",
        t1.elapsed(),
        out.history.len(),
        out.best_epoch
    );
    for row in &out.history {
        println!(
            "  epoch {} train {:.4} valid {:.4} auc {:?}",
            row.epoch, row.train_loss, row.valid_loss, row.valid_auc
        );
    }
    // per-task AUC on the test split
    for task in 0..schema.tasks {
        let subset: Vec<PreparedInstance> = te
            .iter()
            .filter(|i| matches!(i.query, Query::Task(k) if k == task))
            .cloned()
            .collect();
        let rep = evaluate(&out.params, &cfg, &subset).unwrap();
        println!(
            "task {task}: n={} auc={:?} micro={:.3} macro={:.3}",
            rep.instances, rep.auc, rep.micro_f1, rep.macro_f1
        );
    }
    println!("total: {:?}", t0.elapsed());
}

#[allow(clippy::too_many_arguments)]
fn pair_run(d: usize, hops: usize, heads: usize, instances: usize, epochs: usize, lr: f64, seed: u64, alphabet: usize, nodes: (usize, usize), attn: usize, with_baseline: bool) -> (f64, f64, f64) {
    let t0 = Instant::now();
    let spec = TaskSpec {
        family: TaskFamily::GraphPairInteraction,
        nodes_min: nodes.0,
        nodes_max: nodes.1,
        alphabet,
        relations: 1,
        positive_rate: 0.5,
        instances,
        seed,
        side_info: false,
    };
    let (schema, data) = generate(&spec).unwrap();
    let (train_d, valid_d, test_d) = split_dataset(data, (0.8, 0.1, 0.1), seed).unwrap();
    let cfg = ModelConfig {
        d_q: d,
        d_m: d,
        d_x: schema.d_x,
        hops,
        heads,
        relations: schema.relations,
        n_tasks: 1,
        query_dim: 0,
        n_classes: 2,
        dropout: 0.1,
        attn_dim: attn,
        decoder_hidden: d,
    };
    let tcfg = TrainConfig {
        learning_rate: lr,
        batch_size: 16,
        max_epochs: epochs,
        patience: 4,
        seed,
        ..TrainConfig::default()
    };
    let tr = prepare(&train_d, cfg.relations);
    let va = prepare(&valid_d, cfg.relations);
    let te = prepare(&test_d, cfg.relations);
    let params = ModelParams::init(&cfg, seed).unwrap();
    let out = train(params, &cfg, &tcfg, &tr, &va).unwrap();
    let rep = evaluate(&out.params, &cfg, &te).unwrap();

    let baseline_auc = if with_baseline {
        let mut cfg0 = cfg.clone();
        cfg0.hops = 0;
        let params0 = ModelParams::init(&cfg0, seed).unwrap();
        let out0 = train(params0, &cfg0, &tcfg, &tr, &va).unwrap();
        evaluate(&out0.params, &cfg0, &te).unwrap().auc.unwrap()
    } else {
        f64::NAN
    };

    let f1 = rep.per_class[1].f1;
    println!(
        "pair d={d} T={hops} K={heads} A={alphabet} attn={attn} seed={seed}: model auc={:.4} f1={:.4} | baseline auc={:.4} | epochs {} | {:?}",
        rep.auc.unwrap(),
        f1,
        baseline_auc,
        out.history.len(),
        t0.elapsed()
    );
    (rep.auc.unwrap(), baseline_auc, f1)
}

fn heads_run(
    seeds: &[u64],
    d: usize,
    instances: usize,
    epochs: usize,
    alphabet: usize,
    nodes: (usize, usize),
    lr: f64,
    hops: usize,
    attn: usize,
) {
    let t0 = Instant::now();
    let mut means = Vec::new();
    for &k in &[1usize, 4, 8] {
        let mut f1s = Vec::new();
        for &seed in seeds {
            let (_, _, f1) = pair_run(d, hops, k, instances, epochs, lr, seed, alphabet, nodes, attn, false);
            f1s.push(f1);
        }
        let mean = f1s.iter().sum::<f64>() / f1s.len() as f64;
        println!("K={k}: mean f1 {mean:.4} ({f1s:?})");
        means.push(mean);
    }
    println!(
        "gap 1->4 = {:.4}, gap 4->8 = {:.4}",
        means[1] - means[0],
        means[2] - means[1]
    );
    println!("heads total: {:?}", t0.elapsed());
}

fn joint_vs_separate(seeds: &[u64], d: usize, instances: usize, epochs: usize) {
    let t0 = Instant::now();
    let mut joint_scores = Vec::new();
    let mut separate_scores = Vec::new();
    for &seed in seeds {
        let spec = TaskSpec {
            family: TaskFamily::SingleGraphMultitask,
            nodes_min: 4,
            nodes_max: 8,
            alphabet: 3,
            relations: 1,
            positive_rate: 0.5,
            instances,
            seed,
            side_info: false,
        };
        let (schema, data) = generate(&spec).unwrap();
        let (train_d, valid_d, test_d) = split_dataset(data, (0.7, 0.15, 0.15), seed).unwrap();
        let cfg = ModelConfig {
            d_q: d,
            d_m: d,
            d_x: schema.d_x,
            hops: 3,
            heads: 1,
            relations: 1,
            n_tasks: schema.tasks,
            query_dim: 0,
            n_classes: 2,
            dropout: 0.1,
            attn_dim: d,
            decoder_hidden: d,
        };
        let tcfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: epochs,
            patience: 4,
            seed,
            ..TrainConfig::default()
        };
        let tr = prepare(&train_d, 1);
        let va = prepare(&valid_d, 1);
        let te = prepare(&test_d, 1);
        let by_task = |set: &[PreparedInstance], task: usize| -> Vec<PreparedInstance> {
            set.iter()
                .filter(|i| matches!(i.query, Query::Task(k) if k == task))
                .cloned()
                .collect()
        };

        // joint: one model over all tasks
        let params = ModelParams::init(&cfg, seed).unwrap();
        let joint = train(params, &cfg, &tcfg, &tr, &va).unwrap();
        let mut joint_f1 = 0.0;
        for task in 0..schema.tasks {
            let rep = evaluate(&joint.params, &cfg, &by_task(&te, task)).unwrap();
            joint_f1 += rep.macro_f1;
        }
        joint_f1 /= schema.tasks as f64;

        // separate: one model per task on that task's subset
        let mut sep_f1 = 0.0;
        for task in 0..schema.tasks {
            let params = ModelParams::init(&cfg, seed + 1000 * (task as u64 + 1)).unwrap();
            let out = train(params, &cfg, &tcfg, &by_task(&tr, task), &by_task(&va, task)).unwrap();
            let rep = evaluate(&out.params, &cfg, &by_task(&te, task)).unwrap();
            sep_f1 += rep.macro_f1;
        }
        sep_f1 /= schema.tasks as f64;

        println!("seed {seed}: joint {joint_f1:.4} separate {sep_f1:.4}");
        joint_scores.push(joint_f1);
        separate_scores.push(sep_f1);
    }
    let jm = joint_scores.iter().sum::<f64>() / joint_scores.len() as f64;
    let sm = separate_scores.iter().sum::<f64>() / separate_scores.len() as f64;
    println!("joint mean {jm:.4} separate mean {sm:.4} margin {:.4}", jm - sm);
    println!("joint total: {:?}", t0.elapsed());
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    match args.get(1).map(|s| s.as_str()) {
        Some("multitask") => {
            let d: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(64);
            let n: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(6000);
            let e: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(20);
            multitask_run(d, 4, n, e, 1e-3, 7);
        }
        Some("pair") => {
            let d: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(32);
            let n: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4000);
            let e: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(15);
            let a: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(4);
            pair_run(d, 3, 1, n, e, 1e-3, 7, a, (5, 9), d, true);
        }
        Some("heads") => {
            let d: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(16);
            let n: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1500);
            let e: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(8);
            let a: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(5);
            let nmin: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(5);
            let nmax: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(9);
            let lr: f64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
            let hops: usize = args.get(9).and_then(|s| s.parse().ok()).unwrap_or(3);
            let attn: usize = args.get(10).and_then(|s| s.parse().ok()).unwrap_or(d);
            heads_run(&[1, 2, 3, 4, 5], d, n, e, a, (nmin, nmax), lr, hops, attn);
        }
        Some("joint") => {
            let d: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(24);
            let n: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1200);
            let e: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(10);
            joint_vs_separate(&[1, 2, 3, 4, 5], d, n, e);
        }
        other => {
            eprintln!("unknown mode {other:?}");
        }
    }
}
