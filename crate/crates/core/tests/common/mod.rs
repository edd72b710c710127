// SPDX-License-Identifier: MIT OR Apache-2.0
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use apl_core::checkpoint::save_checkpoint;
use apl_core::toy::Lab;

/// Writes the lab's base, fine-tunes and few-shot batches into `dir` and
/// returns the path of a recipe with the given header lines.
pub fn write_lab_recipe(dir: &Path, lab: &Lab, header: &str) -> PathBuf {
    let (base, fine) = lab.checkpoints();
    save_checkpoint(&base, &dir.join("base.safetensors")).unwrap();
    let mut recipe = format!("base = \"base.safetensors\"\n{header}\n");
    for (k, task) in lab.tasks.iter().enumerate() {
        save_checkpoint(&fine[k], &dir.join(format!("{}.safetensors", task.id))).unwrap();
        task.few_shot.save(&dir.join(format!("{}.batch.json", task.id))).unwrap();
        recipe += &format!(
            "\n[[tasks]]\nid = \"{0}\"\nfine = \"{0}.safetensors\"\nbatch = \"{0}.batch.json\"\n",
            task.id
        );
    }
    let path = dir.join("recipe.toml");
    std::fs::write(&path, recipe).unwrap();
    path
}

/// Ranks with ties sharing their mean rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    cov / (va * vb).sqrt()
}

/// tanh by its Maclaurin series; accurate to well below 1e-15 for |x| <= 0.1.
pub fn tanh_series(x: f64) -> f64 {
    let x2 = x * x;
    x * (1.0 - x2 / 3.0 + 2.0 * x2 * x2 / 15.0 - 17.0 * x2.powi(3) / 315.0 + 62.0 * x2.powi(4) / 2835.0)
}
