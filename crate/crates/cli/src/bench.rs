//! Grid timing and factor export.

use std::io::Write;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use dak_core::grid::Domain;
use dak_core::{inverse_chol_factor, sorted_dyadic, InducedBasis, LaplaceKernel};

pub const MAX_BENCH_LEVEL: u32 = 20;

/// Parses `A..B` (inclusive) or a single level, each within 1..=20.
pub fn parse_levels(s: &str) -> Result<(u32, u32)> {
    let (lo, hi) = match s.split_once("..") {
        Some((a, b)) => (a.trim(), b.trim().trim_start_matches('=')),
        None => (s.trim(), s.trim()),
    };
    let lo: u32 = lo.parse().with_context(|| format!("bad level {lo:?}"))?;
    let hi: u32 = hi.parse().with_context(|| format!("bad level {hi:?}"))?;
    if lo == 0 || hi > MAX_BENCH_LEVEL || lo > hi {
        bail!("level range must lie within 1..{MAX_BENCH_LEVEL}, got {lo}..{hi}");
    }
    Ok((lo, hi))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub level: u32,
    pub m: usize,
    /// Median over the repetitions.
    pub factor_seconds: f64,
    /// Mean time per feature value.
    pub activation_us: f64,
}

const ACTIVATION_POINTS: usize = 256;

pub fn bench_grid(lo: u32, hi: u32, reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let kernel = LaplaceKernel::default();
    let domain = Domain::unit();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..ACTIVATION_POINTS).map(|_| rng.gen_range(0.0..1.0)).collect();
    let reps = reps.max(1);
    let mut rows = Vec::new();
    for level in lo..=hi {
        let grid = sorted_dyadic(level, domain)?;
        let mut times: Vec<f64> = (0..reps)
            .map(|_| {
                let t = Instant::now();
                let f = inverse_chol_factor(&kernel, &grid).expect("valid grid");
                std::hint::black_box(&f);
                t.elapsed().as_secs_f64()
            })
            .collect();
        times.sort_by(f64::total_cmp);

        let basis = InducedBasis::new(kernel.clone(), level, domain)?;
        let m = basis.size();
        let (mut out, mut scratch) = (vec![0.0; m], vec![0.0; m]);
        let t = Instant::now();
        for &x in &xs {
            basis.activation_into(x, &mut out, &mut scratch);
            std::hint::black_box(&out);
        }
        let activation_us = t.elapsed().as_secs_f64() * 1e6 / xs.len() as f64;
        rows.push(BenchRow {
            level,
            m,
            factor_seconds: times[times.len() / 2],
            activation_us,
        });
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["L", "M", "factor_seconds", "activation_us"])?;
    for r in rows {
        w.write_record([r.level.to_string(), r.m.to_string(), format!("{:e}", r.factor_seconds), format!("{:e}", r.activation_us)])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the sparse factor for one grid as `row,col,value` triplets.
pub fn dump_factor<W: Write>(level: u32, lengthscale: f64, domain: Domain, out: W) -> Result<()> {
    let kernel = LaplaceKernel::new(lengthscale)?;
    let grid = sorted_dyadic(level, domain)?;
    let factor = inverse_chol_factor(&kernel, &grid)?;
    factor.write_csv(out)?;
    Ok(())
}
