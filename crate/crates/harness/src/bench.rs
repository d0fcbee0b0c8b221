//! Wall-clock timing of attacks per kind and step count.

use std::time::Instant;

use betaat::attacks::{run_attack_batch, AttackConfig, AttackError, AttackKind};
use betaat::data::Dataset;
use betaat::models::Model;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub attack: String,
    pub steps: usize,
    pub seconds: f64,
    pub per_sample_ms: f64,
}

/// Times each `(kind, steps)` pair over the whole dataset, keeping the
/// fastest of `repeats` runs.
pub fn bench_attacks(
    model: &Model,
    data: &Dataset,
    base: &AttackConfig,
    kinds: &[AttackKind],
    steps: &[usize],
    repeats: usize,
) -> Result<Vec<BenchRow>, AttackError> {
    let keys: Vec<u64> = (0..data.len() as u64).collect();
    let mut rows = Vec::new();
    for &kind in kinds {
        for &t in steps {
            let cfg = AttackConfig { steps: t, ..base.clone() };
            let mut best = f64::INFINITY;
            for _ in 0..repeats.max(1) {
                let started = Instant::now();
                let out = run_attack_batch(kind, model, data.features(), data.labels(), &keys, &cfg, 0)?;
                std::hint::black_box(out);
                best = best.min(started.elapsed().as_secs_f64());
            }
            rows.push(BenchRow {
                attack: kind.name().to_string(),
                steps: t,
                seconds: best,
                per_sample_ms: 1e3 * best / data.len() as f64,
            });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("attack,steps,seconds,per_sample_ms\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.6},{:.6}\n", r.attack, r.steps, r.seconds, r.per_sample_ms));
    }
    out
}
