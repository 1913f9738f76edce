use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{count_params, estimate_flops, DlgMoeConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub t_frames: usize,
    pub encoder_frames: usize,
    pub total_params: usize,
    pub per_expert_params: usize,
    pub rows: Vec<SizeRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub k: usize,
    pub activated_params: usize,
    pub flops: u64,
}

pub fn report(cfg: &DlgMoeConfig, t_frames: usize) -> Result<SizeReport> {
    cfg.validate()?;
    let p = count_params(cfg);
    let rows = p
        .activated
        .iter()
        .map(|&(k, activated_params)| SizeRow {
            k,
            activated_params,
            flops: estimate_flops(cfg, t_frames, k),
        })
        .collect();
    Ok(SizeReport {
        t_frames,
        encoder_frames: cfg.encoder_frames(t_frames),
        total_params: p.total,
        per_expert_params: p.per_expert,
        rows,
    })
}

fn millions(n: f64) -> String {
    format!("{:.2}M", n / 1e6)
}

impl SizeReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "total params {} ({}), per expert {}; {} input frames -> {} encoder frames",
            self.total_params,
            millions(self.total_params as f64),
            self.per_expert_params,
            self.t_frames,
            self.encoder_frames
        );
        let _ = writeln!(
            s,
            "{:>3}  {:>14}  {:>9}  {:>16}  {:>8}",
            "k", "activated", "(M)", "flops", "(G)"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>3}  {:>14}  {:>9}  {:>16}  {:>7.2}G",
                r.k,
                r.activated_params,
                millions(r.activated_params as f64),
                r.flops,
                r.flops as f64 / 1e9
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passes_accounting_through() {
        let cfg = DlgMoeConfig::default();
        let r = report(&cfg, 40).unwrap();
        let p = count_params(&cfg);
        assert_eq!(r.total_params, p.total);
        for row in &r.rows {
            assert_eq!(Some(row.activated_params), p.activated_at(row.k));
            assert_eq!(row.flops, estimate_flops(&cfg, 40, row.k));
        }
        assert_eq!(r.table().lines().count(), 2 + r.rows.len());
    }
}
