//! Label-skewed splitting of a training set across simulated clients.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::DatasetHandle;
use crate::error::{io_err, FedSynError, Result};

const MAX_ATTEMPTS: usize = 10;

/// Per-client example indices into a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub alpha: f64,
    pub num_clients: usize,
    pub seed: u64,
    pub assignments: Vec<Vec<usize>>,
}

impl PartitionPlan {
    /// `n_k` for every client.
    pub fn client_sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.assignments.iter().map(Vec::len).sum()
    }

    /// Checks that the plan covers `0..n` exactly once.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.assignments.len() != self.num_clients {
            return Err(FedSynError::PlanMismatch(format!(
                "{} assignment lists for {} clients",
                self.assignments.len(),
                self.num_clients
            )));
        }
        let mut seen = vec![false; n];
        for (k, a) in self.assignments.iter().enumerate() {
            for &i in a {
                if i >= n {
                    return Err(FedSynError::PlanMismatch(format!("client {k} holds index {i} but n = {n}")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(FedSynError::PlanMismatch(format!("index {i} assigned twice")));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(FedSynError::PlanMismatch(format!("index {i} is not assigned")));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).expect("plan serializes");
        std::fs::write(path, json).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text)
            .map_err(|e| FedSynError::Format { what: format!("partition plan {}", path.display()), reason: e.to_string() })
    }
}

/// Splits each class among `m` clients in proportions drawn from `Dir(alpha)`.
///
/// Shares are rounded with the largest-remainder rule so class totals are
/// preserved. A draw that leaves some client with no examples is retried
/// with a derived seed, up to ten attempts in total.
pub fn dirichlet_partition(data: &DatasetHandle, alpha: f64, m: usize, seed: u64) -> Result<PartitionPlan> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(FedSynError::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    if m == 0 {
        return Err(FedSynError::InvalidArgument("number of clients must be at least 1".into()));
    }
    if m > data.len() {
        return Err(FedSynError::InvalidArgument(format!("{m} clients but only {} examples", data.len())));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes()];
    for (i, &l) in data.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| FedSynError::InvalidArgument(e.to_string()))?;

    for attempt in 0..MAX_ATTEMPTS as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); m];
        for class in &by_class {
            let props = draw_dirichlet(&gamma, m, &mut rng);
            let counts = largest_remainder(&props, class.len());
            let mut idx = class.clone();
            idx.shuffle(&mut rng);
            let mut start = 0;
            for (k, &c) in counts.iter().enumerate() {
                assignments[k].extend_from_slice(&idx[start..start + c]);
                start += c;
            }
        }
        if assignments.iter().all(|a| !a.is_empty()) {
            for a in &mut assignments {
                a.sort_unstable();
            }
            return Ok(PartitionPlan { alpha, num_clients: m, seed, assignments });
        }
        log::debug!("partition attempt {attempt} left a client empty, retrying");
    }
    Err(FedSynError::EmptyClient { attempts: MAX_ATTEMPTS })
}

/// One `Dir(alpha)` sample via normalised Gamma variates.
fn draw_dirichlet(gamma: &Gamma<f64>, m: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
        let s: f64 = g.iter().sum();
        // Tiny alphas can underflow every component to zero.
        if s > 0.0 && s.is_finite() {
            return g.into_iter().map(|v| v / s).collect();
        }
    }
}

/// Integer counts summing to `total`, closest to `props * total`.
pub(crate) fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// `m x num_classes` matrix of label counts per client.
pub fn partition_summary(plan: &PartitionPlan, data: &DatasetHandle) -> Result<Vec<Vec<usize>>> {
    let labels = data.labels();
    plan.assignments
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let mut row = vec![0; data.num_classes()];
            for &i in a {
                let l = labels.get(i).ok_or_else(|| {
                    FedSynError::PlanMismatch(format!("client {k} holds index {i} but dataset has {}", labels.len()))
                })?;
                row[*l] += 1;
            }
            Ok(row)
        })
        .collect()
}
