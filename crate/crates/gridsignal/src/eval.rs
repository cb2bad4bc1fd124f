//! Evaluation and reporting: per-group rollouts with horizon averaging,
//! J-statistics over the eight training scenarios, relative-change tables,
//! worst-case comparison, and plot-data emission.

use crate::control::Controller;
use crate::demand::ODMatrix;
use crate::grid::Network;
use crate::obs::{team_reward, ObsParams, RewardWeights};
use crate::sim::{derive_seed, SimParams, SimState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

/// Number of groups entering the J-statistics (the held-out group 8 is
/// reported but excluded).
pub const J_GROUPS: usize = 8;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("j_stats expects exactly {expected} per-group values, got {found}")]
    WrongArity { expected: usize, found: usize },
    #[error("relative change is undefined for a zero baseline")]
    ZeroBaseline,
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("missing group {group} in {path}")]
    MissingGroup { group: usize, path: String },
    #[error(transparent)]
    Sim(#[from] crate::sim::SimError),
}

/// Evaluation sizes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalParams {
    pub rollouts: usize,
    /// Recorded horizon, seconds.
    pub horizon: u64,
    /// Seconds simulated under the same demand before recording starts.
    pub warmup: u64,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            rollouts: 10,
            horizon: 3600,
            warmup: 300,
        }
    }
}

/// Simulation-side knobs needed to run an evaluation.
#[derive(Debug, Clone)]
pub struct EvalContext {
    pub sim_params: SimParams,
    pub obs_params: ObsParams,
    pub reward_weights: RewardWeights,
}

impl Default for EvalContext {
    fn default() -> Self {
        EvalContext {
            sim_params: SimParams::default(),
            obs_params: ObsParams::default(),
            reward_weights: RewardWeights::default(),
        }
    }
}

/// Horizon-and-rollout-averaged metrics for one (controller, group) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: usize,
    pub controller: String,
    pub rollouts: usize,
    pub mean_queue: f64,
    pub mean_speed: f64,
    /// Per-second means across rollouts, `horizon` entries.
    pub queue_series: Vec<f64>,
    pub speed_series: Vec<f64>,
    /// Per-second standard deviation across rollouts.
    pub queue_std: Vec<f64>,
    pub speed_std: Vec<f64>,
    /// Per-rollout cumulative team reward.
    pub episode_returns: Vec<f64>,
    /// Vehicles dropped at the backlog cap, summed over rollouts.
    pub dropped: u64,
}

struct EvalRollout {
    queue: Vec<f64>,
    speed: Vec<f64>,
    episode_return: f64,
    dropped: u64,
}

fn eval_rollout(
    network: &Arc<Network>,
    ctx: &EvalContext,
    controller: &dyn Controller,
    od: &ODMatrix,
    horizon: u64,
    warmup: u64,
    rollout_seed: u64,
) -> Result<EvalRollout, EvalError> {
    let mut state = SimState::new(network.clone(), ctx.sim_params.clone(), rollout_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rollout_seed, 7));
    for _ in 0..warmup {
        let actions = controller.actions(&state, &mut rng);
        state.step(&actions, od)?;
    }
    let mut rollout = EvalRollout {
        queue: Vec::with_capacity(horizon as usize),
        speed: Vec::with_capacity(horizon as usize),
        episode_return: 0.0,
        dropped: 0,
    };
    for _ in 0..horizon {
        let actions = controller.actions(&state, &mut rng);
        state.step(&actions, od)?;
        rollout.queue.push(state.queue_count() as f64);
        rollout.speed.push(state.mean_speed());
        rollout.episode_return += team_reward(&state, &ctx.reward_weights, &ctx.obs_params);
    }
    rollout.dropped = state.dropped_total;
    Ok(rollout)
}

/// Run `rollouts` seeded rollouts with fixed demand and a frozen controller;
/// only the vehicle-generation and action-sampling randomness varies across
/// rollouts. Warm-up seconds run under the same demand and are excluded
/// from the averages.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_group(
    network: &Arc<Network>,
    ctx: &EvalContext,
    controller: &dyn Controller,
    group: usize,
    od: &ODMatrix,
    params: &EvalParams,
    seed: u64,
) -> Result<GroupMetrics, EvalError> {
    let results: Result<Vec<EvalRollout>, EvalError> = (0..params.rollouts)
        .into_par_iter()
        .map(|r| {
            eval_rollout(
                network,
                ctx,
                controller,
                od,
                params.horizon,
                params.warmup,
                derive_seed(seed, r as u64),
            )
        })
        .collect();
    let results = results?;
    let horizon = params.horizon as usize;
    let n = results.len() as f64;
    let mut queue_series = vec![0.0; horizon];
    let mut speed_series = vec![0.0; horizon];
    for rollout in &results {
        for t in 0..horizon {
            queue_series[t] += rollout.queue[t] / n;
            speed_series[t] += rollout.speed[t] / n;
        }
    }
    let mut queue_std = vec![0.0; horizon];
    let mut speed_std = vec![0.0; horizon];
    for rollout in &results {
        for t in 0..horizon {
            queue_std[t] += (rollout.queue[t] - queue_series[t]).powi(2) / n;
            speed_std[t] += (rollout.speed[t] - speed_series[t]).powi(2) / n;
        }
    }
    for t in 0..horizon {
        queue_std[t] = queue_std[t].sqrt();
        speed_std[t] = speed_std[t].sqrt();
    }
    let mean_queue = queue_series.iter().sum::<f64>() / horizon as f64;
    let mean_speed = speed_series.iter().sum::<f64>() / horizon as f64;
    Ok(GroupMetrics {
        group,
        controller: controller.label(),
        rollouts: params.rollouts,
        mean_queue,
        mean_speed,
        queue_series,
        speed_series,
        queue_std,
        speed_std,
        episode_returns: results.iter().map(|r| r.episode_return).collect(),
        dropped: results.iter().map(|r| r.dropped).sum(),
    })
}

/// Mean, minimum, and argmin (ties to the lowest index) of the eight
/// per-group returns.
pub fn j_stats(per_group_returns: &[f64]) -> Result<(f64, f64, usize), EvalError> {
    if per_group_returns.len() != J_GROUPS {
        return Err(EvalError::WrongArity {
            expected: J_GROUPS,
            found: per_group_returns.len(),
        });
    }
    let avg = per_group_returns.iter().sum::<f64>() / J_GROUPS as f64;
    let mut worst = per_group_returns[0];
    let mut argmin = 0usize;
    for (k, &v) in per_group_returns.iter().enumerate() {
        if v < worst {
            worst = v;
            argmin = k;
        }
    }
    Ok((avg, worst, argmin))
}

/// Percentage change of `robust` relative to `baseline`.
pub fn relative_change(baseline: f64, robust: f64) -> Result<f64, EvalError> {
    if baseline == 0.0 {
        return Err(EvalError::ZeroBaseline);
    }
    Ok(100.0 * (robust - baseline) / baseline)
}

/// One table row: horizon-averaged queue and speed for both controllers.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: usize,
    pub baseline_queue: f64,
    pub robust_queue: f64,
    pub baseline_speed: f64,
    pub robust_speed: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct JStats {
    pub j_avg: f64,
    pub j_worst: f64,
    pub worst_group: usize,
}

/// Cross-controller comparison of each controller's own worst group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorstCaseSummary {
    pub baseline_worst_queue_group: usize,
    pub baseline_worst_queue: f64,
    pub robust_worst_queue_group: usize,
    pub robust_worst_queue: f64,
    /// Relative change between the two worst queue values, percent.
    pub queue_change_pct: f64,
    pub baseline_worst_speed_group: usize,
    pub baseline_worst_speed: f64,
    pub robust_worst_speed_group: usize,
    pub robust_worst_speed: f64,
    pub speed_change_pct: f64,
}

/// The assembled report: per-group rows and changes, J-statistics over
/// groups 0-7 (negated mean queue as the return proxy), and the worst-case
/// comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub rows: Vec<GroupRow>,
    pub queue_change_pct: Vec<f64>,
    pub speed_change_pct: Vec<f64>,
    pub baseline_j: JStats,
    pub robust_j: JStats,
    pub worst_case: WorstCaseSummary,
}

/// Identify each controller's worst group per metric independently over
/// groups 0-7, then report the relative change between those worst values.
pub fn worst_case_comparison(rows: &[GroupRow]) -> Result<WorstCaseSummary, EvalError> {
    let in_j = |r: &&GroupRow| r.group < J_GROUPS;
    let pick = |f: &dyn Fn(&GroupRow) -> f64, minimize: bool| -> (usize, f64) {
        let mut best_group = 0usize;
        let mut best = f64::NAN;
        for row in rows.iter().filter(in_j) {
            let v = f(row);
            if best.is_nan() || (minimize && v < best) || (!minimize && v > best) {
                best = v;
                best_group = row.group;
            }
        }
        (best_group, best)
    };
    // Worst queue is the largest mean queue; worst speed is the smallest.
    let (bqg, bq) = pick(&|r| r.baseline_queue, false);
    let (rqg, rq) = pick(&|r| r.robust_queue, false);
    let (bsg, bs) = pick(&|r| r.baseline_speed, true);
    let (rsg, rs) = pick(&|r| r.robust_speed, true);
    Ok(WorstCaseSummary {
        baseline_worst_queue_group: bqg,
        baseline_worst_queue: bq,
        robust_worst_queue_group: rqg,
        robust_worst_queue: rq,
        queue_change_pct: relative_change(bq, rq)?,
        baseline_worst_speed_group: bsg,
        baseline_worst_speed: bs,
        robust_worst_speed_group: rsg,
        robust_worst_speed: rs,
        speed_change_pct: relative_change(bs, rs)?,
    })
}

/// Build the full report from per-group rows (groups 0-7 required, 8
/// optional).
pub fn build_report(rows: &[GroupRow]) -> Result<RobustnessReport, EvalError> {
    let j_rows: Vec<&GroupRow> = rows.iter().filter(|r| r.group < J_GROUPS).collect();
    if j_rows.len() != J_GROUPS {
        return Err(EvalError::WrongArity {
            expected: J_GROUPS,
            found: j_rows.len(),
        });
    }
    let baseline_returns: Vec<f64> = j_rows.iter().map(|r| -r.baseline_queue).collect();
    let robust_returns: Vec<f64> = j_rows.iter().map(|r| -r.robust_queue).collect();
    let (avg_b, worst_b, arg_b) = j_stats(&baseline_returns)?;
    let (avg_r, worst_r, arg_r) = j_stats(&robust_returns)?;
    let mut queue_change_pct = Vec::with_capacity(rows.len());
    let mut speed_change_pct = Vec::with_capacity(rows.len());
    for row in rows {
        queue_change_pct.push(relative_change(row.baseline_queue, row.robust_queue)?);
        speed_change_pct.push(relative_change(row.baseline_speed, row.robust_speed)?);
    }
    Ok(RobustnessReport {
        rows: rows.to_vec(),
        queue_change_pct,
        speed_change_pct,
        baseline_j: JStats {
            j_avg: avg_b,
            j_worst: worst_b,
            worst_group: j_rows[arg_b].group,
        },
        robust_j: JStats {
            j_avg: avg_r,
            j_worst: worst_r,
            worst_group: j_rows[arg_r].group,
        },
        worst_case: worst_case_comparison(rows)?,
    })
}

/// Rows from a pair of completed evaluations.
pub fn rows_from_metrics(
    baseline: &[GroupMetrics],
    robust: &[GroupMetrics],
) -> Result<Vec<GroupRow>, EvalError> {
    let mut rows = Vec::new();
    for b in baseline {
        let r = robust
            .iter()
            .find(|r| r.group == b.group)
            .ok_or(EvalError::MissingGroup {
                group: b.group,
                path: "robust evaluation".into(),
            })?;
        rows.push(GroupRow {
            group: b.group,
            baseline_queue: b.mean_queue,
            robust_queue: r.mean_queue,
            baseline_speed: b.mean_speed,
            robust_speed: r.mean_speed,
        });
    }
    rows.sort_by_key(|r| r.group);
    Ok(rows)
}

const GROUPS_HEADER: &str = "group,baseline_queue,robust_queue,baseline_speed,robust_speed";

/// Write the per-group metrics table (same shape the fixtures loader reads).
pub fn write_groups_csv(rows: &[GroupRow], path: &Path) -> Result<(), EvalError> {
    let mut out = String::from(GROUPS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            r.group, r.baseline_queue, r.robust_queue, r.baseline_speed, r.robust_speed
        ));
    }
    std::fs::write(path, out).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Write the relative-change table.
pub fn write_changes_csv(report: &RobustnessReport, path: &Path) -> Result<(), EvalError> {
    let mut out = String::from("group,queue_change_pct,speed_change_pct\n");
    for (row, (q, s)) in report
        .rows
        .iter()
        .zip(report.queue_change_pct.iter().zip(report.speed_change_pct.iter()))
    {
        out.push_str(&format!("{},{:.3},{:.3}\n", row.group, q, s));
    }
    std::fs::write(path, out).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Load a per-group metrics table (fixtures mode and report rebuilding).
pub fn load_groups_csv(path: &Path) -> Result<Vec<GroupRow>, EvalError> {
    let content = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let parse_err = |message: String| EvalError::Parse {
        path: path.display().to_string(),
        message,
    };
    let mut lines = content.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| parse_err("empty file".into()))?;
    if header.trim() != GROUPS_HEADER {
        return Err(parse_err(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(parse_err(format!("expected 5 fields, got {}", fields.len())));
        }
        let num = |s: &str| -> Result<f64, EvalError> {
            s.parse().map_err(|e| parse_err(format!("{e}: {s:?}")))
        };
        rows.push(GroupRow {
            group: fields[0]
                .parse()
                .map_err(|e| parse_err(format!("{e}: {:?}", fields[0])))?,
            baseline_queue: num(fields[1])?,
            robust_queue: num(fields[2])?,
            baseline_speed: num(fields[3])?,
            robust_speed: num(fields[4])?,
        });
    }
    Ok(rows)
}

/// Per-second plot data for one controller and metric: per-group mean and
/// standard deviation across rollouts.
pub fn write_plot_csv(metrics: &[GroupMetrics], metric: &str, path: &Path) -> Result<(), EvalError> {
    let mut sorted: Vec<&GroupMetrics> = metrics.iter().collect();
    sorted.sort_by_key(|m| m.group);
    let mut header = String::from("t");
    for m in &sorted {
        header.push_str(&format!(",g{}_mean,g{}_std", m.group, m.group));
    }
    let horizon = sorted.first().map(|m| m.queue_series.len()).unwrap_or(0);
    let mut out = header;
    out.push('\n');
    for t in 0..horizon {
        out.push_str(&t.to_string());
        for m in &sorted {
            let (mean, std) = match metric {
                "speed" => (m.speed_series[t], m.speed_std[t]),
                _ => (m.queue_series[t], m.queue_std[t]),
            };
            out.push_str(&format!(",{:.6},{:.6}", mean, std));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Persist one evaluation cell: the full metrics JSON plus a per-second
/// metrics JSONL stream with a trailing summary object.
pub fn write_group_metrics(metrics: &GroupMetrics, dir: &Path) -> Result<(), EvalError> {
    let io_err = |path: &Path| {
        let p = path.display().to_string();
        move |source| EvalError::Io {
            path: p.clone(),
            source,
        }
    };
    let json_path = dir.join(format!("group{}_{}.json", metrics.group, metrics.controller));
    let body = serde_json::to_vec_pretty(metrics).expect("metrics serialize");
    std::fs::write(&json_path, body).map_err(io_err(&json_path))?;

    let jsonl_path = dir.join(format!(
        "group{}_{}.metrics.jsonl",
        metrics.group, metrics.controller
    ));
    let mut out = String::new();
    for (t, (q, s)) in metrics
        .queue_series
        .iter()
        .zip(metrics.speed_series.iter())
        .enumerate()
    {
        out.push_str(&format!(
            "{{\"t\":{},\"queue\":{:.6},\"speed\":{:.6}}}\n",
            t + 1,
            q,
            s
        ));
    }
    out.push_str(&format!(
        "{{\"summary\":{{\"group\":{},\"controller\":\"{}\",\"rollouts\":{},\"mean_queue\":{:.6},\"mean_speed\":{:.6},\"dropped\":{}}}}}\n",
        metrics.group, metrics.controller, metrics.rollouts, metrics.mean_queue, metrics.mean_speed, metrics.dropped
    ));
    std::fs::write(&jsonl_path, out).map_err(io_err(&jsonl_path))
}

/// Load every `group*_<label>.json` metrics file in a directory.
pub fn load_metrics_dir(dir: &Path) -> Result<Vec<GroupMetrics>, EvalError> {
    let io_err = |path: &Path| {
        let p = path.display().to_string();
        move |source| EvalError::Io {
            path: p.clone(),
            source,
        }
    };
    let mut metrics = Vec::new();
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err(dir))?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let name = entry.file_name().to_string_lossy().to_string();
        if name.starts_with("group") && name.ends_with(".json") {
            let content = std::fs::read_to_string(entry.path()).map_err(io_err(&entry.path()))?;
            let parsed: GroupMetrics =
                serde_json::from_str(&content).map_err(|e| EvalError::Parse {
                    path: entry.path().display().to_string(),
                    message: e.to_string(),
                })?;
            metrics.push(parsed);
        }
    }
    metrics.sort_by_key(|m| m.group);
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{FixedCycleController, RandomController};
    use crate::demand::{make_even_demand, ODMatrix};
    use crate::grid::{build_grid, GridSpec};
    use approx::assert_relative_eq;

    /// Horizon-and-rollout-averaged metrics published for the two
    /// controllers, used as arithmetic fixtures.
    pub fn reference_rows() -> Vec<GroupRow> {
        let cells: [(f64, f64, f64, f64); 9] = [
            (72.287, 40.137, 6.882, 8.411),
            (70.318, 39.959, 6.925, 8.404),
            (76.829, 35.250, 6.297, 8.571),
            (76.062, 38.528, 5.429, 8.358),
            (67.008, 40.250, 6.105, 8.347),
            (64.620, 51.302, 5.647, 6.524),
            (60.094, 39.914, 4.714, 8.330),
            (105.153, 32.932, 4.910, 8.685),
            (65.711, 38.372, 6.795, 8.353),
        ];
        cells
            .iter()
            .enumerate()
            .map(|(group, &(bq, rq, bs, rs))| GroupRow {
                group,
                baseline_queue: bq,
                robust_queue: rq,
                baseline_speed: bs,
                robust_speed: rs,
            })
            .collect()
    }

    fn network() -> Arc<Network> {
        Arc::new(build_grid(&GridSpec::default()).unwrap())
    }

    #[test]
    fn empty_demand_evaluation_conventions() {
        let net = network();
        let ctx = EvalContext::default();
        let params = EvalParams {
            rollouts: 1,
            horizon: 10,
            warmup: 0,
        };
        let m = evaluate_group(
            &net,
            &ctx,
            &RandomController,
            0,
            &ODMatrix::zeros("none"),
            &params,
            9,
        )
        .unwrap();
        assert_eq!(m.mean_queue, 0.0);
        assert_relative_eq!(m.mean_speed, 13.9);
        assert_eq!(m.queue_series.len(), 10);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let net = network();
        let ctx = EvalContext::default();
        let params = EvalParams {
            rollouts: 3,
            horizon: 60,
            warmup: 30,
        };
        let od = make_even_demand();
        let run = || {
            let m = evaluate_group(&net, &ctx, &RandomController, 2, &od, &params, 5).unwrap();
            serde_json::to_string(&m).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn horizon_mean_matches_emitted_series() {
        let net = network();
        let ctx = EvalContext::default();
        let params = EvalParams {
            rollouts: 4,
            horizon: 120,
            warmup: 0,
        };
        let od = make_even_demand();
        let controller = FixedCycleController::all_phases_10s();
        let m = evaluate_group(&net, &ctx, &controller, 1, &od, &params, 3).unwrap();
        let recomputed = m.queue_series.iter().sum::<f64>() / m.queue_series.len() as f64;
        assert!((m.mean_queue - recomputed).abs() < 1e-9);
        let recomputed_speed = m.speed_series.iter().sum::<f64>() / m.speed_series.len() as f64;
        assert!((m.mean_speed - recomputed_speed).abs() < 1e-9);
    }

    #[test]
    fn j_stats_examples() {
        let (avg, worst, arg) = j_stats(&[3.0; 8]).unwrap();
        assert_eq!((avg, worst, arg), (3.0, 3.0, 0));
        let (avg, worst, arg) = j_stats(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 0.0]).unwrap();
        assert_relative_eq!(avg, 3.5);
        assert_eq!(worst, 0.0);
        assert_eq!(arg, 7);
        assert!(matches!(
            j_stats(&[1.0; 7]),
            Err(EvalError::WrongArity { found: 7, .. })
        ));
    }

    #[test]
    fn j_stats_on_reference_baseline_queues_flags_group_7() {
        let rows = reference_rows();
        let negated: Vec<f64> = rows[..8].iter().map(|r| -r.baseline_queue).collect();
        let (_, worst, arg) = j_stats(&negated).unwrap();
        assert_eq!(arg, 7);
        assert_relative_eq!(worst, -105.153);
    }

    #[test]
    fn j_stats_argmin_invariant_under_constant_shift() {
        let values = [3.0, -1.0, 2.5, 0.0, 7.0, -0.5, 4.0, 1.0];
        let (_, _, arg) = j_stats(&values).unwrap();
        let shifted: Vec<f64> = values.iter().map(|v| v + 123.456).collect();
        let (_, _, arg2) = j_stats(&shifted).unwrap();
        assert_eq!(arg, arg2);
    }

    #[test]
    fn relative_change_examples() {
        assert_relative_eq!(
            relative_change(72.287, 40.137).unwrap(),
            -44.475,
            epsilon = 1e-3
        );
        assert_relative_eq!(
            relative_change(105.153, 32.932).unwrap(),
            -68.682,
            epsilon = 1e-3
        );
        assert_eq!(relative_change(5.0, 5.0).unwrap(), 0.0);
        assert!(matches!(
            relative_change(0.0, 1.0),
            Err(EvalError::ZeroBaseline)
        ));
    }

    #[test]
    fn relative_change_antisymmetry_identity() {
        // Algebraic consistency of the two directions:
        // relative_change(a, b) = -relative_change(b, a) * b / a.
        let mut x = 0x9e3779b97f4a7c15u64;
        for _ in 0..200 {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            let a = 1.0 + (x % 1000) as f64 / 10.0;
            let b = 1.0 + ((x >> 32) % 1000) as f64 / 10.0;
            let lhs = relative_change(a, b).unwrap();
            let rhs = -relative_change(b, a).unwrap() * b / a;
            assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
        }
    }

    #[test]
    fn worst_case_comparison_matches_reference_arithmetic() {
        let summary = worst_case_comparison(&reference_rows()).unwrap();
        assert_eq!(summary.baseline_worst_queue_group, 7);
        assert_relative_eq!(summary.baseline_worst_queue, 105.153);
        assert_eq!(summary.robust_worst_queue_group, 5);
        assert_relative_eq!(summary.robust_worst_queue, 51.302);
        assert_relative_eq!(summary.queue_change_pct, -51.2, epsilon = 0.05);
        assert_eq!(summary.baseline_worst_speed_group, 6);
        assert_eq!(summary.robust_worst_speed_group, 5);
        assert_relative_eq!(summary.speed_change_pct, 38.4, epsilon = 0.05);
    }

    #[test]
    fn identical_reports_have_zero_worst_case_change() {
        let rows: Vec<GroupRow> = reference_rows()
            .into_iter()
            .map(|mut r| {
                r.robust_queue = r.baseline_queue;
                r.robust_speed = r.baseline_speed;
                r
            })
            .collect();
        let summary = worst_case_comparison(&rows).unwrap();
        assert_eq!(summary.queue_change_pct, 0.0);
        assert_eq!(summary.speed_change_pct, 0.0);
    }

    #[test]
    fn report_reproduces_reference_change_table() {
        // Oracle: direct arithmetic on the published cells.
        let rows = reference_rows();
        let report = build_report(&rows).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let expect_q = 100.0 * (row.robust_queue - row.baseline_queue) / row.baseline_queue;
            let expect_s = 100.0 * (row.robust_speed - row.baseline_speed) / row.baseline_speed;
            assert_relative_eq!(report.queue_change_pct[i], expect_q, max_relative = 1e-12);
            assert_relative_eq!(report.speed_change_pct[i], expect_s, max_relative = 1e-12);
        }
        assert_eq!(report.baseline_j.worst_group, 7);
        assert!(report.baseline_j.j_worst <= report.baseline_j.j_avg);
        assert!(report.robust_j.j_worst <= report.robust_j.j_avg);
    }

    #[test]
    fn groups_csv_round_trip_and_byte_identical() {
        let rows = reference_rows();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("groups.csv");
        write_groups_csv(&rows, &path).unwrap();
        let loaded = load_groups_csv(&path).unwrap();
        assert_eq!(loaded.len(), 9);
        assert_relative_eq!(loaded[7].baseline_queue, 105.153);
        let first = std::fs::read(&path).unwrap();
        write_groups_csv(&loaded, &path).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn changes_csv_is_deterministic() {
        let report = build_report(&reference_rows()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        write_changes_csv(&report, &a).unwrap();
        write_changes_csv(&report, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let content = std::fs::read_to_string(&a).unwrap();
        assert!(content.contains("-44.475"));
        assert!(content.contains("-68.682"));
    }

    #[test]
    fn metrics_json_round_trip_through_directory() {
        let net = network();
        let ctx = EvalContext::default();
        let params = EvalParams {
            rollouts: 2,
            horizon: 30,
            warmup: 0,
        };
        let od = make_even_demand();
        let m = evaluate_group(&net, &ctx, &RandomController, 3, &od, &params, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_group_metrics(&m, dir.path()).unwrap();
        let loaded = load_metrics_dir(dir.path()).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].group, 3);
        assert_relative_eq!(loaded[0].mean_queue, m.mean_queue);
        let jsonl = std::fs::read_to_string(dir.path().join("group3_random.metrics.jsonl")).unwrap();
        assert_eq!(jsonl.lines().count(), 31); // 30 seconds + summary
    }

    #[test]
    fn plot_csv_emits_per_group_columns() {
        let net = network();
        let ctx = EvalContext::default();
        let params = EvalParams {
            rollouts: 2,
            horizon: 20,
            warmup: 0,
        };
        let od = make_even_demand();
        let m0 = evaluate_group(&net, &ctx, &RandomController, 0, &od, &params, 1).unwrap();
        let m1 = evaluate_group(&net, &ctx, &RandomController, 1, &od, &params, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plot.csv");
        write_plot_csv(&[m0, m1], "queue", &path).unwrap();
        let content = std::fs::read_to_string(&path).unwrap();
        let header = content.lines().next().unwrap();
        assert_eq!(header, "t,g0_mean,g0_std,g1_mean,g1_std");
        assert_eq!(content.lines().count(), 21);
    }
}
