//! Terminal rewards: binary answer accuracy and an assignment-based point
//! reward for counting tasks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point;
use crate::rollout::{Termination, Trajectory};
use crate::taskgen::{QuestionKind, VisualTask};

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("cost matrix contains a non-finite entry at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },
    #[error("reward kind {kind:?} cannot score a {task:?} task")]
    KindTaskMismatch { kind: RewardKind, task: QuestionKind },
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Accuracy,
    AccuracyPlusPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub kind: RewardKind,
    /// Weight of the point term, in `[0, 1]`.
    pub point_weight: f64,
    /// Match radius in original pixels; `None` means the task's glyph side.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub match_radius: Option<f64>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            kind: RewardKind::Accuracy,
            point_weight: 0.5,
            match_radius: None,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(0.0..=1.0).contains(&self.point_weight) {
            return Err(RewardError::InvalidConfig(format!(
                "point_weight {} outside [0, 1]",
                self.point_weight
            )));
        }
        if let Some(r) = self.match_radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(RewardError::InvalidConfig(format!("match_radius {r} must be positive")));
            }
        }
        Ok(())
    }
}

/// 1 when the trajectory answered and the answer (choice or count) is right.
pub fn accuracy_reward(traj: &Trajectory, task: &VisualTask) -> f64 {
    if traj.terminated_by != Termination::Answer {
        return 0.0;
    }
    let truth = match task.question_kind {
        QuestionKind::NeedleChoice => task.answer_index,
        QuestionKind::Count => task.gt_count.unwrap_or(task.answer_index),
    };
    f64::from(u8::from(traj.final_answer == Some(truth)))
}

/// Minimum-cost injective matching of `min(n, m)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, column)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Hungarian algorithm (shortest augmenting paths with potentials, O(n^3))
/// on the rectangular `cost` matrix, padded to square internally.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment, RewardError> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    for (i, row) in cost.iter().enumerate() {
        if row.len() != m {
            return Err(RewardError::NonFiniteCost { row: i, col: row.len() });
        }
        if let Some(j) = row.iter().position(|c| !c.is_finite()) {
            return Err(RewardError::NonFiniteCost { row: i, col: j });
        }
    }
    if n == 0 || m == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    let k = n.max(m);
    // padded cells cost zero: every real row/column still gets its best
    // partner among the real ones, and pads only absorb the surplus
    let at = |i: usize, j: usize| if i < n && j < m { cost[i][j] } else { 0.0 };

    // 1-indexed potentials u (rows), v (cols); p[j] = row matched to col j
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; k + 1];
    let mut p = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for i in 1..=k {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=k {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=k)
        .filter(|&j| p[j] >= 1 && p[j] - 1 < n && j - 1 < m)
        .map(|j| (p[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
    Ok(Assignment { pairs, total_cost })
}

/// Fraction of points matched within `match_radius` under the optimal
/// distance assignment, normalized by the larger set.
pub fn point_reward(pred: &[Point], gt: &[Point], match_radius: f64) -> f64 {
    let denom = pred.len().max(gt.len()).max(1) as f64;
    if pred.is_empty() || gt.is_empty() {
        return 0.0;
    }
    let cost: Vec<Vec<f64>> = pred.iter().map(|p| gt.iter().map(|g| p.distance(g)).collect()).collect();
    let assignment = hungarian(&cost).expect("distances are finite");
    let matched = assignment
        .pairs
        .iter()
        .filter(|&&(i, j)| cost[i][j] <= match_radius)
        .count();
    matched as f64 / denom
}

/// Scalar reward fed to the group baseline.
pub fn combined_reward(traj: &Trajectory, task: &VisualTask, cfg: &RewardConfig) -> Result<f64, RewardError> {
    let acc = accuracy_reward(traj, task);
    match cfg.kind {
        RewardKind::Accuracy => Ok(acc),
        RewardKind::AccuracyPlusPoint => {
            let (QuestionKind::Count, Some(gt)) = (task.question_kind, task.gt_points.as_ref()) else {
                return Err(RewardError::KindTaskMismatch {
                    kind: cfg.kind,
                    task: task.question_kind,
                });
            };
            let radius = cfg.match_radius.unwrap_or(task.glyph_side as f64);
            let pred = traj.points.as_deref().unwrap_or(&[]);
            let lambda = cfg.point_weight;
            Ok((1.0 - lambda) * acc + lambda * point_reward(pred, gt, radius))
        }
    }
}
