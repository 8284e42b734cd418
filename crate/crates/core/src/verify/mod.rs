//! Independent oracles and check harnesses.
//!
//! Checks are grouped into suites. Each check produces a [`CheckReport`];
//! a suite runs its checks in parallel and returns them sorted by name so
//! the output is identical from run to run.

pub mod checks;
pub mod golden;
pub mod grad;
pub mod oracle;
mod report;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

pub use checks::{grad_check, pipeline_grad_check, sgst_boundary};
pub use golden::{golden_compare, GOLDEN_TOL};
pub use oracle::{oracle_attention, oracle_cst_as_attention, oracle_mhsa};
pub use report::{render_text, write_summary, CheckReport, Tolerance, SUMMARY_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Suite {
    Oracles,
    Gradients,
    Properties,
    Golden,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 5] = ["oracles", "gradients", "properties", "golden", "all"];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Oracles => "oracles",
            Suite::Gradients => "gradients",
            Suite::Properties => "properties",
            Suite::Golden => "golden",
            Suite::All => "all",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown suite '{0}' (expected one of: oracles, gradients, properties, golden, all)")]
pub struct UnknownSuite(pub String);

impl FromStr for Suite {
    type Err = UnknownSuite;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracles" => Ok(Suite::Oracles),
            "gradients" => Ok(Suite::Gradients),
            "properties" => Ok(Suite::Properties),
            "golden" => Ok(Suite::Golden),
            "all" => Ok(Suite::All),
            other => Err(UnknownSuite(other.to_string())),
        }
    }
}

/// Seeds per configuration in the gradient suite.
pub const GRADIENT_SEEDS: u64 = 20;

type Job = Box<dyn Fn() -> Vec<CheckReport> + Send + Sync>;

fn jobs(suite: Suite, seed: u64) -> Vec<Job> {
    let mut out: Vec<Job> = Vec::new();
    let all = suite == Suite::All;
    if all || suite == Suite::Oracles {
        out.push(Box::new(move || vec![checks::mhsa_oracle(seed, 50)]));
        out.push(Box::new(move || vec![checks::branch_oracle(seed, 50)]));
        out.push(Box::new(move || vec![checks::vanilla_oracle(seed, 50)]));
        out.push(Box::new(move || vec![checks::attention_limits(seed)]));
        out.push(Box::new(move || vec![checks::cst_oracle(seed, 30)]));
        out.push(Box::new(move || vec![checks::sgst_reduces_to_vanilla(seed, 10)]));
    }
    if all || suite == Suite::Gradients {
        let seeds: Vec<u64> = (seed..seed + GRADIENT_SEEDS).collect();
        for (name, kind, cfg) in checks::gradient_configs() {
            let seeds = seeds.clone();
            out.push(Box::new(move || vec![checks::grad_check_named(name, kind, &cfg, &seeds)]));
        }
        out.push(Box::new(move || {
            let (_, _, cfg) = checks::gradient_configs().swap_remove(2);
            vec![checks::sgst_boundary(&cfg, seed)]
        }));
        out.push(Box::new(move || {
            vec![checks::pipeline_grad_check(&checks::pipeline_grad_config(), &seeds)]
        }));
    }
    if all || suite == Suite::Properties {
        out.push(Box::new(move || vec![checks::gather_scatter_bijection(seed, 1000)]));
        out.push(Box::new(move || vec![checks::stage_order_independence(seed, 100)]));
        out.push(Box::new(move || vec![checks::cst_shared_delta(seed, 100)]));
        out.push(Box::new(move || vec![checks::vanilla_equivariance(seed, 100)]));
        out.push(Box::new(move || vec![checks::flop_counts(seed, 5)]));
    }
    if all || suite == Suite::Golden {
        out.push(Box::new(|| golden::bundled_reports(GOLDEN_TOL)));
    }
    out
}

/// Runs a suite; reports come back sorted by check name.
pub fn run_suite(suite: Suite, seed: u64) -> Vec<CheckReport> {
    let mut reports: Vec<CheckReport> = jobs(suite, seed).par_iter().flat_map(|j| j()).collect();
    reports.sort_by(|a, b| a.name.cmp(&b.name));
    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        for n in Suite::NAMES {
            assert_eq!(n.parse::<Suite>().unwrap().as_str(), n);
        }
        assert!("gradient".parse::<Suite>().is_err());
    }

    #[test]
    fn golden_suite_is_sorted_and_passes() {
        let r = run_suite(Suite::Golden, 0);
        assert_eq!(r.len(), golden::BUNDLED.len());
        assert!(r.windows(2).all(|w| w[0].name <= w[1].name));
        assert!(r.iter().all(|r| r.pass));
    }
}
