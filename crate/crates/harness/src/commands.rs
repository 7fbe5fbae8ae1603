//! The five CLI commands. Each writes into `out/<config-hash>/<seed>/`.
//!
//! Randomness is split from the run seed by role: the generator for a role
//! is `ChaCha8Rng::seed_from_u64(seed ^ ROLE)`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use dde_core::control::{evaluate_policy, greedy_policy, train_ddac_tabular, write_metrics_csv, DdacConfig};
use dde_core::distortion::{
    default_max_iter, iterate_fixed_point, projected_bellman_step, BellmanSource, MissingData, DEFAULT_TOL,
};
use dde_core::ensemble::{save_checkpoint, PessimismShape};
use dde_core::mdp::{generate_offline_dataset, DatasetHeader, FiniteMdp, OfflineDataset, Policy};
use dde_core::quantile::{cvar_lower, wasserstein_rows, QuantileTable, TableShape};
use dde_core::theory::TheoremReport;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::checks;
use crate::config::Config;

pub type AnyError = Box<dyn std::error::Error + Send + Sync>;

pub const ROLE_DATA: u64 = 0x0da7_a000_0000_0001;
pub const ROLE_TRAIN: u64 = 0x7a41_0000_0000_0002;
pub const ROLE_EVAL: u64 = 0xe7a1_0000_0000_0003;
pub const ROLE_THEORY: u64 = 0x7e0a_0000_0000_0004;

pub fn role_rng(seed: u64, role: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ role)
}

pub fn run_dir(out: &Path, cfg: &Config, seed: u64) -> PathBuf {
    out.join(cfg.hash_hex()).join(seed.to_string())
}

pub fn write_reports(path: &Path, reports: &[TheoremReport]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", TheoremReport::CSV_HEADER)?;
    for r in reports {
        writeln!(w, "{}", r.csv_row())?;
    }
    w.flush()
}

/// The configured dataset file, or a fresh i.i.d./trajectory sample.
pub fn dataset_for(cfg: &Config, mdp: &FiniteMdp, seed: u64) -> Result<OfflineDataset, AnyError> {
    if let Some(path) = &cfg.data.dataset_path {
        let f = File::open(path).map_err(|e| format!("missing dataset {}: {e}", path.display()))?;
        let (data, header) = OfflineDataset::read_from(BufReader::new(f), mdp.n_states, mdp.n_actions)?;
        if header.mdp_hash != mdp.hash_hex() {
            return Err(format!("dataset {} was generated from a different model", path.display()).into());
        }
        return Ok(data);
    }
    let behavior = cfg.behavior_policy(mdp)?;
    let scheme = cfg.sampling_scheme(&behavior);
    Ok(generate_offline_dataset(mdp, &behavior, cfg.data.n_tuples, &scheme, &mut role_rng(seed, ROLE_DATA))?)
}

pub fn gen_data(cfg: &Config, seed: u64, dir: &Path) -> Result<PathBuf, AnyError> {
    fs::create_dir_all(dir)?;
    let mdp = cfg.build_mdp()?;
    let data = dataset_for(cfg, &mdp, seed)?;
    let path = dir.join("dataset.txt");
    let header = DatasetHeader { seed, mdp_hash: mdp.hash_hex() };
    let mut w = BufWriter::new(File::create(&path)?);
    data.write_to(&mut w, &header)?;
    w.flush()?;
    Ok(path)
}

pub fn train(cfg: &Config, seed: u64, dir: &Path) -> Result<(), AnyError> {
    fs::create_dir_all(dir)?;
    let mdp = cfg.build_mdp()?;
    let data = dataset_for(cfg, &mdp, seed)?;
    let dcfg = cfg.ddac(mdp.gamma)?;
    let mut rng = role_rng(seed, ROLE_TRAIN);
    let run = train_ddac_tabular(&data, &dcfg, Some(&mdp), &mut rng)?;
    write_metrics_csv(BufWriter::new(File::create(dir.join("metrics.csv"))?), &run.metrics)?;
    save_checkpoint(&run.ensemble, &rng, &dir.join("checkpoints"))?;
    let greedy = greedy_policy(&run.ensemble, dcfg.score, 0.0)?;
    let mut w = BufWriter::new(File::create(dir.join("policy.csv"))?);
    writeln!(w, "s,a,prob")?;
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            writeln!(w, "{s},{a},{}", greedy.prob(s, a))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Distributional evaluation of the behavior policy from the model and from
/// the dataset, plus Monte Carlo rollouts of the same policy.
pub fn evaluate(cfg: &Config, seed: u64, dir: &Path) -> Result<Vec<TheoremReport>, AnyError> {
    fs::create_dir_all(dir)?;
    let mdp = cfg.build_mdp()?;
    let data = dataset_for(cfg, &mdp, seed)?;
    let behavior = cfg.behavior_policy(&mdp)?;
    let shape = TableShape::new(mdp.n_states, mdp.n_actions, cfg.algo.atoms);
    let budget = default_max_iter(DEFAULT_TOL, mdp.gamma);
    let eta0 = QuantileTable::zeros(shape);
    let model = BellmanSource::Model(&mdp);
    let (eta_model, rep_model) =
        iterate_fixed_point(|e| projected_bellman_step(&model, &behavior, e), &eta0, DEFAULT_TOL, budget)?;
    let empirical = BellmanSource::Dataset {
        data: &data,
        gamma: mdp.gamma,
        missing: MissingData::worst_case(mdp.r_max(), mdp.gamma),
    };
    let (eta_data, rep_data) =
        iterate_fixed_point(|e| projected_bellman_step(&empirical, &behavior, e), &eta0, DEFAULT_TOL, budget)?;
    eta_model.write_to(BufWriter::new(File::create(dir.join("eta_model.csv"))?))?;
    eta_data.write_to(BufWriter::new(File::create(dir.join("eta_data.csv"))?))?;

    let mut w = BufWriter::new(File::create(dir.join("evaluation.csv"))?);
    writeln!(w, "s,a,count,q_model,q_data,cvar10_model,cvar10_data,w1")?;
    let mut worst = 0.0f64;
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let d = wasserstein_rows(eta_model.row(s, a), eta_data.row(s, a), 1.0)?;
            worst = worst.max(d);
            writeln!(
                w,
                "{s},{a},{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}",
                data.count(s, a),
                eta_model.row_mean(s, a),
                eta_data.row_mean(s, a),
                cvar_lower(eta_model.row(s, a), 0.1),
                cvar_lower(eta_data.row(s, a), 0.1),
                d
            )?;
        }
    }
    w.flush()?;
    let ev = evaluate_policy(
        &mdp,
        &behavior,
        cfg.algo.eval_episodes,
        cfg.algo.eval_horizon,
        &mut role_rng(seed, ROLE_EVAL),
    )?;
    let reports = vec![
        TheoremReport {
            name: "model_vs_data_w1".into(),
            statistic: worst,
            bound_or_target: 0.0,
            tolerance: f64::NAN,
            replicates: data.len(),
            passed: rep_model.converged && rep_data.converged,
            details: vec![
                ("iterations_model".into(), rep_model.iterations.to_string()),
                ("iterations_data".into(), rep_data.iterations.to_string()),
            ],
        },
        TheoremReport {
            name: "behavior_rollouts".into(),
            statistic: ev.mean,
            bound_or_target: ev.cvar10,
            tolerance: f64::NAN,
            replicates: ev.samples.len(),
            passed: ev.cvar10 <= ev.mean,
            details: vec![],
        },
    ];
    write_reports(&dir.join("reports.csv"), &reports)?;
    Ok(reports)
}

/// All theorem and equivalence checks, in a fixed order.
pub fn verify_theory(cfg: &Config, seed: u64) -> Result<Vec<TheoremReport>, AnyError> {
    let t = &cfg.theory;
    let mut rng = role_rng(seed, ROLE_THEORY);
    let mut out = vec![checks::contraction_check(t.contraction_pairs, &mut rng)?];
    out.push(checks::sandwich_suite(t.sandwich_instances, t.sandwich_atoms, t.sandwich_tol, &mut rng)?.0);
    out.extend(checks::clt_suite(t, &mut rng)?);
    out.push(checks::concentration_check(t, &mut rng)?);
    out.push(checks::oracle_check(t.oracle_mdps, t.oracle_rollouts, &mut rng)?);
    out.push(checks::regression_check(t.regression_steps, &mut rng).map_err(|e| e.to_string())?);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmResult {
    pub mean: f64,
    pub cvar10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub distorted: ArmResult,
    pub uniform: ArmResult,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareSummary {
    pub per_seed: Vec<SeedResult>,
    /// Seeds where the distorted arm's mean return is at least the uniform one.
    pub wins_or_ties: usize,
    pub strict_wins: usize,
    pub mean_of_means_distorted: f64,
    pub mean_of_means_uniform: f64,
    pub mean_of_cvar_distorted: f64,
    pub mean_of_cvar_uniform: f64,
    /// Two-sided sign test on the nonzero paired mean differences.
    pub sign_test_p: f64,
}

/// Two-sided sign test: `P(min(W, n - W) <= k)` under `Bin(n, 1/2)`, doubled.
pub fn sign_test_p(diffs: &[f64]) -> f64 {
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nonzero.len() as u64;
    if n == 0 {
        return 1.0;
    }
    let wins = nonzero.iter().filter(|d| **d > 0.0).count() as u64;
    let k = wins.min(n - wins);
    let bin = Binomial::new(0.5, n).expect("valid binomial");
    (2.0 * bin.cdf(k)).min(1.0)
}

fn run_arm(mdp: &FiniteMdp, data: &OfflineDataset, dcfg: &DdacConfig, seed: u64) -> Result<ArmResult, AnyError> {
    let run = train_ddac_tabular(data, dcfg, None, &mut role_rng(seed, ROLE_TRAIN))?;
    let greedy: Policy = greedy_policy(&run.ensemble, dcfg.score, 0.0)?;
    let ev = evaluate_policy(mdp, &greedy, dcfg.eval_episodes, dcfg.eval_horizon, &mut role_rng(seed, ROLE_EVAL))?;
    Ok(ArmResult { mean: ev.mean, cvar10: ev.cvar10 })
}

/// Distorted against uniform pessimism with the same `beta`, dataset, initial
/// ensemble and training stream for each of `cfg.compare.seeds` seeds
/// `seed, seed + 1, ...`. Seeds run on a pool of `jobs` threads.
pub fn compare(cfg: &Config, seed: u64, jobs: usize) -> Result<CompareSummary, AnyError> {
    let mdp = cfg.build_mdp()?;
    let mut base = cfg.ddac(mdp.gamma)?;
    base.eval_every = 0;
    let distorted = DdacConfig { shape: PessimismShape::Distorted, ..base.clone() };
    let uniform = DdacConfig { shape: PessimismShape::Uniform, ..base };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let seeds: Vec<u64> = (0..cfg.compare.seeds as u64).map(|i| seed.wrapping_add(i)).collect();
    let per_seed: Vec<SeedResult> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&s| -> Result<SeedResult, String> {
                let data = dataset_for(cfg, &mdp, s).map_err(|e| e.to_string())?;
                Ok(SeedResult {
                    seed: s,
                    distorted: run_arm(&mdp, &data, &distorted, s).map_err(|e| e.to_string())?,
                    uniform: run_arm(&mdp, &data, &uniform, s).map_err(|e| e.to_string())?,
                })
            })
            .collect::<Result<_, _>>()
    })?;
    let k = per_seed.len().max(1) as f64;
    let diffs: Vec<f64> = per_seed.iter().map(|r| r.distorted.mean - r.uniform.mean).collect();
    Ok(CompareSummary {
        wins_or_ties: diffs.iter().filter(|d| **d >= 0.0).count(),
        strict_wins: diffs.iter().filter(|d| **d > 0.0).count(),
        mean_of_means_distorted: per_seed.iter().map(|r| r.distorted.mean).sum::<f64>() / k,
        mean_of_means_uniform: per_seed.iter().map(|r| r.uniform.mean).sum::<f64>() / k,
        mean_of_cvar_distorted: per_seed.iter().map(|r| r.distorted.cvar10).sum::<f64>() / k,
        mean_of_cvar_uniform: per_seed.iter().map(|r| r.uniform.cvar10).sum::<f64>() / k,
        sign_test_p: sign_test_p(&diffs),
        per_seed,
    })
}

pub fn write_compare(dir: &Path, summary: &CompareSummary) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join("compare.csv"))?);
    writeln!(w, "seed,distorted_mean,distorted_cvar10,uniform_mean,uniform_cvar10,diff_mean,diff_cvar10")?;
    for r in &summary.per_seed {
        writeln!(
            w,
            "{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}",
            r.seed,
            r.distorted.mean,
            r.distorted.cvar10,
            r.uniform.mean,
            r.uniform.cvar10,
            r.distorted.mean - r.uniform.mean,
            r.distorted.cvar10 - r.uniform.cvar10
        )?;
    }
    w.flush()?;
    let mut w = BufWriter::new(File::create(dir.join("compare_summary.csv"))?);
    writeln!(w, "seeds,wins_or_ties,strict_wins,mean_distorted,mean_uniform,cvar_distorted,cvar_uniform,sign_test_p")?;
    writeln!(
        w,
        "{},{},{},{:.10e},{:.10e},{:.10e},{:.10e},{:.6}",
        summary.per_seed.len(),
        summary.wins_or_ties,
        summary.strict_wins,
        summary.mean_of_means_distorted,
        summary.mean_of_means_uniform,
        summary.mean_of_cvar_distorted,
        summary.mean_of_cvar_uniform,
        summary.sign_test_p
    )?;
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_values() {
        // 9 of 10 positive: 2 * (1 + 10) / 1024
        let mut d = vec![1.0; 9];
        d.push(-1.0);
        let oracle = 2.0 * (1.0 + 10.0) / 1024.0;
        assert!((sign_test_p(&d) - oracle).abs() < 1e-12);
        assert_eq!(sign_test_p(&[0.0, 0.0]), 1.0);
        assert_eq!(sign_test_p(&[1.0, -1.0]), 1.0);
    }

    fn small() -> Config {
        let mut c = Config::default();
        c.apply_overrides(&[
            "steps=30",
            "members=3",
            "atoms=4",
            "n_tuples=200",
            "eval_episodes=50",
            "eval_horizon=20",
            "eval_every=10",
            "seeds=3",
        ])
        .unwrap();
        c
    }

    #[test]
    fn compare_without_pessimism_gives_identical_arms() {
        let mut c = small();
        c.set("beta", "0").unwrap();
        let s = compare(&c, 11, 1).unwrap();
        for r in &s.per_seed {
            assert_eq!(r.distorted, r.uniform);
        }
        assert_eq!(s.sign_test_p, 1.0);
    }

    #[test]
    fn repeated_runs_are_byte_identical() {
        let c = small();
        let tmp = tempfile::tempdir().unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        train(&c, 5, &a).unwrap();
        train(&c, 5, &b).unwrap();
        for f in ["metrics.csv", "policy.csv", "checkpoints/manifest.txt", "checkpoints/online_0.csv"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        }
        let s1 = compare(&c, 3, 1).unwrap();
        let s2 = compare(&c, 3, 2).unwrap();
        write_compare(&a, &s1).unwrap();
        write_compare(&b, &s2).unwrap();
        assert_eq!(fs::read(a.join("compare.csv")).unwrap(), fs::read(b.join("compare.csv")).unwrap());
    }

    #[test]
    fn generated_dataset_round_trips_through_the_config() {
        let mut c = small();
        let tmp = tempfile::tempdir().unwrap();
        let path = gen_data(&c, 9, tmp.path()).unwrap();
        let mdp = c.build_mdp().unwrap();
        let fresh = dataset_for(&c, &mdp, 9).unwrap();
        c.data.dataset_path = Some(path);
        let loaded = dataset_for(&c, &mdp, 0).unwrap();
        assert_eq!(fresh, loaded);
        c.data.dataset_path = Some(tmp.path().join("missing.txt"));
        assert!(dataset_for(&c, &mdp, 0).is_err());
    }

    #[test]
    fn evaluate_writes_tables() {
        let mut c = small();
        c.set("kind", "random").unwrap();
        c.set("behavior_skew", "0").unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let reps = evaluate(&c, 1, tmp.path()).unwrap();
        assert!(reps.iter().all(|r| r.passed));
        for f in ["eta_model.csv", "eta_data.csv", "evaluation.csv", "reports.csv"] {
            assert!(tmp.path().join(f).exists(), "{f}");
        }
    }
}
