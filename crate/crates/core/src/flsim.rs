//! Synchronous federated rounds with an interception point.
//!
//! Every round the server broadcasts the global parameters, each client
//! computes the mean cross-entropy gradient on one local batch, applies its
//! defense and transmits the result. The server averages the transmitted
//! updates by local data size and takes one SGD step. Only the transmitted
//! updates are recorded, so an adversary reading a [`RoundRecord`] never sees
//! an undefended gradient.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_tensor, write_tensor};
use crate::defenses::DefenseConfig;
use crate::error::{Error, Result};
use crate::nn::{batch_loss_and_grad, Example, ModelSpec, ParamSet};
use crate::optim::sgd_step;
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// Per-parameter gradients, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientUpdate {
    pub entries: Vec<(String, Tensor)>,
    pub batch_size: usize,
}

impl GradientUpdate {
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_values(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn norm(&self) -> f64 {
        self.tensors().map(|t| t.norm().powi(2)).sum::<f64>().sqrt()
    }

    pub fn flatten(&self) -> Vec<f32> {
        self.tensors()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    /// Same names and shapes as `other`.
    pub fn check_compatible(&self, other: &GradientUpdate) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::invalid(format!(
                "updates have {} and {} entries",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((a, x), (b, y)) in self.entries.iter().zip(&other.entries) {
            if a != b || x.dims() != y.dims() {
                return Err(Error::shape("update", x.dims(), y.dims()));
            }
        }
        Ok(())
    }

    /// Same names and shapes as the parameters of `spec`.
    pub fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        let layout = spec.param_layout()?;
        if layout.len() != self.entries.len() {
            return Err(Error::invalid(format!(
                "update has {} entries, {} expects {}",
                self.entries.len(),
                spec.arch,
                layout.len()
            )));
        }
        for (shape, (name, t)) in layout.iter().zip(&self.entries) {
            if &shape.name != name || shape.dims != t.dims() {
                return Err(Error::shape("update", &shape.dims, t.dims()));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, c: f32) -> GradientUpdate {
        GradientUpdate {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.map(|v| v * c)))
                .collect(),
            batch_size: self.batch_size,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, t) in &self.entries {
            write_tensor(&dir.join(format!("{name}.mpft")), t)?;
        }
        let index = UpdateIndex {
            params: self.entries.iter().map(|(n, _)| n.clone()).collect(),
            batch_size: self.batch_size,
        };
        let path = dir.join("index.json");
        std::fs::write(&path, serde_json::to_string_pretty(&index)?)
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<GradientUpdate> {
        let path = dir.join("index.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: UpdateIndex = serde_json::from_str(&text)?;
        let entries = index
            .params
            .into_iter()
            .map(|n| Ok((n.clone(), read_tensor(&dir.join(format!("{n}.mpft")))?)))
            .collect::<Result<_>>()?;
        Ok(GradientUpdate {
            entries,
            batch_size: index.batch_size,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct UpdateIndex {
    params: Vec<String>,
    batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub local_data: Vec<Example>,
    pub defense: DefenseConfig,
}

impl ClientState {
    pub fn new(client_id: usize, local_data: Vec<Example>, defense: DefenseConfig) -> Result<Self> {
        if local_data.is_empty() {
            return Err(Error::invalid(format!(
                "client {client_id} has no local data"
            )));
        }
        defense.validate()?;
        Ok(ClientState {
            client_id,
            local_data,
            defense,
        })
    }
}

/// Everything that crossed the simulated wire in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub shared_updates: BTreeMap<usize, GradientUpdate>,
    pub global_params_before: ParamSet,
    pub global_params_after: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct RoundIndex {
    round: usize,
    clients: Vec<usize>,
}

impl RoundRecord {
    /// Layout: `round.json`, `before/`, `after/`, `client-<id>/`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.global_params_before.save(&dir.join("before"))?;
        self.global_params_after.save(&dir.join("after"))?;
        for (id, u) in &self.shared_updates {
            u.save(&dir.join(format!("client-{id}")))?;
        }
        let index = RoundIndex {
            round: self.round,
            clients: self.shared_updates.keys().copied().collect(),
        };
        let path = dir.join("round.json");
        std::fs::write(&path, serde_json::to_string_pretty(&index)?)
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<RoundRecord> {
        let path = dir.join("round.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: RoundIndex = serde_json::from_str(&text)?;
        let shared_updates = index
            .clients
            .iter()
            .map(|&id| Ok((id, GradientUpdate::load(&dir.join(format!("client-{id}")))?)))
            .collect::<Result<_>>()?;
        Ok(RoundRecord {
            round: index.round,
            shared_updates,
            global_params_before: ParamSet::load(&dir.join("before"))?,
            global_params_after: ParamSet::load(&dir.join("after"))?,
        })
    }
}

/// Seed of the defense noise a client draws in a round.
pub fn defense_seed(seed: u64, client_id: usize, round: usize) -> u64 {
    derive_seed(&[seed, client_id as u64, round as u64])
}

/// The update a client transmits: mean cross-entropy gradient over `batch`,
/// then its defense seeded by `defense_seed`.
pub fn client_update(
    client: &ClientState,
    params: &ParamSet,
    spec: &ModelSpec,
    batch: &[usize],
    defense_seed: u64,
) -> Result<GradientUpdate> {
    if batch.is_empty() {
        return Err(Error::invalid(format!(
            "client {}: empty batch",
            client.client_id
        )));
    }
    let n = client.local_data.len();
    let mut pairs = Vec::with_capacity(batch.len());
    for &i in batch {
        let ex = client.local_data.get(i).ok_or_else(|| {
            Error::invalid(format!(
                "client {}: batch index {i} out of range for {n} examples",
                client.client_id
            ))
        })?;
        pairs.push((&ex.image, &ex.target));
    }
    let (_, raw) = batch_loss_and_grad(params, spec, &pairs)?;
    client.defense.apply(&raw, defense_seed)
}

/// Weighted mean per parameter with weights normalized to sum to one.
pub fn fedavg_aggregate(updates: &[(GradientUpdate, f64)]) -> Result<GradientUpdate> {
    let (first, _) = updates
        .first()
        .ok_or_else(|| Error::invalid("nothing to aggregate"))?;
    let mut total = 0.0;
    for (u, w) in updates {
        if !(*w > 0.0) || !w.is_finite() {
            return Err(Error::invalid(format!(
                "aggregation weights must be positive, got {w}"
            )));
        }
        first.check_compatible(u)?;
        total += w;
    }
    let entries = first
        .entries
        .iter()
        .enumerate()
        .map(|(k, (name, t))| {
            let mut acc = vec![0f64; t.len()];
            for (u, w) in updates {
                let w = w / total;
                for (a, &v) in acc.iter_mut().zip(u.entries[k].1.data()) {
                    *a += w * v as f64;
                }
            }
            (
                name.clone(),
                Tensor::from_parts(
                    t.dims().to_vec(),
                    acc.into_iter().map(|v| v as f32).collect(),
                ),
            )
        })
        .collect();
    Ok(GradientUpdate {
        entries,
        batch_size: updates.iter().map(|(u, _)| u.batch_size).sum(),
    })
}

/// Default batch of one: example `round mod n`.
pub fn default_batch(client: &ClientState, round: usize) -> Vec<usize> {
    vec![round % client.local_data.len()]
}

/// One round with `batches[i]` used by `clients[i]`.
pub fn run_round_with_batches(
    clients: &[ClientState],
    params: &ParamSet,
    spec: &ModelSpec,
    lr: f32,
    round: usize,
    seed: u64,
    batches: &[Vec<usize>],
) -> Result<(ParamSet, RoundRecord)> {
    if clients.is_empty() {
        return Err(Error::invalid("a round needs at least one client"));
    }
    if batches.len() != clients.len() {
        return Err(Error::invalid(format!(
            "{} batches for {} clients",
            batches.len(),
            clients.len()
        )));
    }
    let mut shared = BTreeMap::new();
    let mut weighted = Vec::with_capacity(clients.len());
    for (client, batch) in clients.iter().zip(batches) {
        let u = client_update(
            client,
            params,
            spec,
            batch,
            defense_seed(seed, client.client_id, round),
        )?;
        if shared.insert(client.client_id, u.clone()).is_some() {
            return Err(Error::invalid(format!(
                "duplicate client id {}",
                client.client_id
            )));
        }
        weighted.push((u, client.local_data.len() as f64));
    }
    let avg = fedavg_aggregate(&weighted)?;
    let next = sgd_step(params, &avg, lr)?;
    let record = RoundRecord {
        round,
        shared_updates: shared,
        global_params_before: params.clone(),
        global_params_after: next.clone(),
    };
    Ok((next, record))
}

pub fn run_round(
    clients: &[ClientState],
    params: &ParamSet,
    spec: &ModelSpec,
    lr: f32,
    round: usize,
    seed: u64,
) -> Result<(ParamSet, RoundRecord)> {
    let batches: Vec<Vec<usize>> = clients.iter().map(|c| default_batch(c, round)).collect();
    run_round_with_batches(clients, params, spec, lr, round, seed, &batches)
}

/// The update `client_id` transmitted in `record`.
pub fn intercept(record: &RoundRecord, client_id: usize) -> Result<GradientUpdate> {
    record
        .shared_updates
        .get(&client_id)
        .cloned()
        .ok_or_else(|| {
            Error::invalid(format!(
                "client {client_id} did not participate in round {}",
                record.round
            ))
        })
}
