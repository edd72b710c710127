// SPDX-License-Identifier: MIT OR Apache-2.0

use apl_core::bench::{pruning_comparison, BenchConfig, BenchMethod, CSV_VERSION};
use apl_core::toy::{evaluate, Lab, LabConfig, TaskTemplate, TrainConfig};
use apl_core::TensorMap;

fn small() -> BenchConfig {
    let d = LabConfig::default();
    let lab = LabConfig {
        hidden_dims: vec![16, 16],
        template: TaskTemplate {
            test_size: 200,
            ..d.template.clone()
        },
        pretrain: TrainConfig {
            epochs: 5,
            step_size: 0.2,
            frozen_layers: vec![],
        },
        finetune: TrainConfig {
            epochs: 30,
            ..d.finetune.clone()
        },
        ..d
    };
    BenchConfig {
        lab,
        ratios: vec![0.5, 0.9],
        seeds: 3,
        ..BenchConfig::default()
    }
}

#[test]
fn rows_and_csv_layout() {
    let cfg = small();
    let r = pruning_comparison(&cfg).unwrap();
    assert_eq!(r.rows.len(), 2 * 2 * 3 * 3);
    assert_eq!(r.reference.len(), 2);
    assert_eq!(r.importance.len(), 2);
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("version,task,method,ratio,seed,accuracy"));
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[0], CSV_VERSION.to_string());
    assert_eq!(text.lines().count(), 1 + r.rows.len());
    for m in BenchMethod::ALL {
        assert!(r.mean_accuracy(m, 0.9).is_some());
    }
    // magnitude pruning is seed independent
    let mags: Vec<f64> = r
        .rows
        .iter()
        .filter(|x| x.method == BenchMethod::Magnitude && x.ratio == 0.9 && x.task == r.reference[0].0)
        .map(|x| x.accuracy)
        .collect();
    assert!(mags.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(pruning_comparison(&cfg).unwrap().rows, r.rows);
}

#[test]
fn magnitude_rows_match_an_independent_prune() {
    let cfg = small();
    let r = pruning_comparison(&cfg).unwrap();
    let lab = Lab::build(&cfg.lab, cfg.tasks, cfg.lab_seed).unwrap();
    let (base, fine) = lab.checkpoints();
    for (k, task) in lab.tasks.iter().enumerate() {
        for &ratio in &cfg.ratios {
            // global ranking over every parameter of the net
            let mut net: TensorMap<f64> = base.cast();
            let mut d: Vec<(f64, String, usize)> = Vec::new();
            for (n, f) in fine[k].iter() {
                let b = base.get(n).unwrap().data();
                for (i, &v) in f.data().iter().enumerate() {
                    d.push((v as f64 - b[i] as f64, n.to_string(), i));
                }
            }
            let drop = (ratio * d.len() as f64).floor() as usize;
            d.sort_by(|a, b| a.0.abs().total_cmp(&b.0.abs()));
            for (v, n, i) in &d[drop..] {
                net.get_mut(n).unwrap().data_mut()[*i] += v;
            }
            let acc = evaluate(&net, &lab.spec, &task.test).unwrap().accuracy;
            let row = r
                .rows
                .iter()
                .find(|x| x.method == BenchMethod::Magnitude && x.ratio == ratio && x.task == task.id)
                .unwrap();
            assert_eq!(row.accuracy, acc, "{} at {ratio}", task.id);
        }
    }
}
