//! Federated training loop.
//!
//! Every random draw comes from a ChaCha stream derived from the master
//! seed and a `(purpose, round, index)` triple, so the per-client work can
//! run on any number of threads and still produce identical bits.

mod model;

use std::io::Write;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

pub use model::{Model, Prox};

use crate::aggregation::{AggregationError, AggregationInput, AggregationResult, Diagnostics, LossProbe, Rule};
use crate::attacks::{most_skewed_client, Attack, AttackContext, AttackError};
use crate::config::{ConfigError, SimConfig};
use crate::datagen::{ClientData, DatagenError, GaussianMixture, LabeledDataset};
use crate::linalg::{column_mean, Matrix, Vector};
use crate::metrics::{accuracy_and_recall, max_recall_drop, principal_variance_fractions, MetricsError};

#[derive(Debug, Error)]
pub enum FedsimError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("local update of {client} diverged")]
    Diverged { client: String },
    #[error("cannot read dataset {path}: {source}")]
    Dataset { path: String, source: DatagenError },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error("aggregation failed in round {round}: {source}")]
    Aggregation { round: usize, source: AggregationError },
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl FedsimError {
    /// Whether the failure comes from the numbers rather than the setup.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            FedsimError::NonFinite(_) | FedsimError::Diverged { .. } | FedsimError::Aggregation { .. }
        )
    }
}

/// Step-wise exponential learning-rate decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub eta: f64,
    pub rounds: usize,
    pub decay_start: usize,
    /// 0 disables decay.
    pub decay_interval: usize,
    pub decay_rate: f64,
}

impl Schedule {
    /// `η₀·α^k` with `k = 0` before `decay_start` and
    /// `⌊(t − decay_start)/interval⌋ + 1` from then on.
    pub fn eta_at(&self, round: usize) -> f64 {
        if self.decay_interval == 0 || round < self.decay_start {
            return self.eta;
        }
        let decays = (round - self.decay_start) / self.decay_interval + 1;
        self.eta * self.decay_rate.powi(decays as i32)
    }
}

/// What a client uploads.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LocalVariant {
    /// The loss gradient at the global parameters.
    FedSgd,
    /// `−(w_local − w_G)` after `epochs` full-batch steps.
    FedAvg { epochs: usize },
    /// As FedAvg with the proximal term `(μ/2)‖w − w_G‖²`. The proximal
    /// part of each step is taken implicitly, so any `μ` is stable and the
    /// upload shrinks to zero as `μ` grows.
    FedProx { epochs: usize, mu: f64 },
}

impl LocalVariant {
    /// Server step size: `η` for raw gradients, 1 for parameter deltas
    /// (the local steps already applied `η`).
    pub fn server_step(&self, eta: f64) -> f64 {
        match self {
            LocalVariant::FedSgd => eta,
            _ => 1.0,
        }
    }
}

/// A client's upload under `variant`.
pub fn local_update(
    model: &Model,
    params: &[f64],
    data: &LabeledDataset,
    eta: f64,
    variant: LocalVariant,
) -> Result<Vector, FedsimError> {
    let (epochs, mu) = match variant {
        LocalVariant::FedSgd => return Ok(model.loss_and_gradient(params, data, None)?.1),
        LocalVariant::FedAvg { epochs } => (epochs, None),
        LocalVariant::FedProx { epochs, mu } => (epochs, Some(mu)),
    };
    let anchor = Vector::from_column_slice(params);
    let mut w = anchor.clone();
    for _ in 0..epochs {
        let (_, g) = model.loss_and_gradient(w.as_slice(), data, None)?;
        w.axpy(-eta, &g, 1.0);
        if let Some(mu) = mu {
            // argmin_v ‖v − w‖²/(2η) + (μ/2)‖v − anchor‖²
            let k = eta * mu;
            w = (w + &anchor * k) / (1.0 + k);
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(FedsimError::NonFinite("local parameters".into()));
        }
    }
    Ok(anchor - w)
}

/// Purposes of the derived random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    TrainData,
    TestData,
    ServerData,
    OracleData,
    Init,
    Participation { round: usize },
    ClientNoise { round: usize, client: usize },
    ServerNoise { round: usize, class: usize },
    Attack { round: usize },
    Aggregator { round: usize },
}

impl Stream {
    fn id(self) -> u64 {
        let pack = |tag: u64, round: usize, index: usize| (tag << 56) | ((round as u64 & 0x0FFF_FFFF) << 28) | (index as u64 & 0x0FFF_FFFF);
        match self {
            Stream::TrainData => pack(1, 0, 0),
            Stream::TestData => pack(2, 0, 0),
            Stream::ServerData => pack(3, 0, 0),
            Stream::OracleData => pack(4, 0, 0),
            Stream::Init => pack(5, 0, 0),
            Stream::Participation { round } => pack(6, round, 0),
            Stream::ClientNoise { round, client } => pack(7, round, client),
            Stream::ServerNoise { round, class } => pack(8, round, class),
            Stream::Attack { round } => pack(9, round, 0),
            Stream::Aggregator { round } => pack(10, round, 0),
        }
    }

    /// A generator for this stream under `master`. Stream 0 is left to the
    /// partitioner, which seeds from the master seed directly.
    pub fn rng(self, master: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(master);
        rng.set_stream(self.id());
        rng
    }

    /// A `u64` seed drawn from this stream.
    pub fn seed(self, master: u64) -> u64 {
        use rand::RngCore;
        self.rng(master).next_u64()
    }
}

/// Any aggregation rule the simulator can call once per round.
pub trait Aggregator: Sync {
    fn name(&self) -> String;

    fn needs_loss_probe(&self) -> bool {
        false
    }

    /// `round_seed` feeds randomised rules such as bucketing.
    fn aggregate_round(
        &self,
        input: &AggregationInput<'_>,
        probe: Option<&LossProbe<'_>>,
        round_seed: u64,
    ) -> Result<AggregationResult, AggregationError>;
}

impl Aggregator for Rule {
    fn name(&self) -> String {
        self.to_string()
    }

    fn needs_loss_probe(&self) -> bool {
        Rule::needs_loss_probe(self)
    }

    fn aggregate_round(
        &self,
        input: &AggregationInput<'_>,
        probe: Option<&LossProbe<'_>>,
        round_seed: u64,
    ) -> Result<AggregationResult, AggregationError> {
        self.with_seed(round_seed).aggregate(input, probe)
    }
}

/// Expected class gradients at `params`, estimated from `per_class` fresh
/// samples of each class.
pub fn expected_class_gradients<R: rand::Rng + ?Sized>(
    model: &Model,
    params: &[f64],
    task: &GaussianMixture,
    per_class: usize,
    rng: &mut R,
) -> Result<Matrix, FedsimError> {
    let sets: Vec<LabeledDataset> = (0..task.classes()).map(|z| task.sample_class(z, per_class, rng)).collect();
    class_gradients(model, params, &sets, 1.0, LocalVariant::FedSgd)
}

/// Uploads of `variant` on each class set, one column per class.
pub fn class_gradients(
    model: &Model,
    params: &[f64],
    sets: &[LabeledDataset],
    eta: f64,
    variant: LocalVariant,
) -> Result<Matrix, FedsimError> {
    let cols: Vec<Vector> =
        sets.par_iter().map(|s| local_update(model, params, s, eta, variant)).collect::<Result<_, _>>()?;
    Ok(Matrix::from_columns(&cols))
}

/// Parameters between rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub params: Vector,
    pub round: usize,
}

/// Everything measured in one round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub eta: f64,
    /// Honest clients that took part.
    pub participants: Vec<usize>,
    pub aggregate: Vector,
    /// Mean of the honest uploads.
    pub honest_mean: Vector,
    /// Oracle expectation of the honest mean upload.
    pub expected_mean: Vector,
    pub diagnostics: Diagnostics,
    pub accepted_count: usize,
    /// Byzantine columns among the accepted.
    pub byzantine_accepted: usize,
    /// Training loss after the update.
    pub train_loss: f64,
    /// Test accuracy after the update.
    pub test_acc: f64,
    pub recall: Vec<Option<f64>>,
    /// `‖aggregate − expected_mean‖²`.
    pub grad_err: f64,
    /// Squared norm of the pooled training gradient before the update.
    pub grad_norm_sq: f64,
}

/// Clients, server data and the oracle sets for one experiment.
#[derive(Clone, Debug)]
pub struct Federation {
    pub model: Model,
    pub clients: Vec<ClientData>,
    /// Union of the honest clients' data.
    pub train: LabeledDataset,
    /// Server-held data, one set per class.
    pub server: Vec<LabeledDataset>,
    pub test: LabeledDataset,
    /// Per-class sets standing in for the class distributions.
    pub oracle: Vec<LabeledDataset>,
    pub byzantine: usize,
    pub f: usize,
    pub local: LocalVariant,
    pub schedule: Schedule,
    pub noise_std: f64,
    pub batch_size: usize,
    pub participation: f64,
    pub master_seed: u64,
    pub mimic_target: Option<usize>,
}

fn read_dataset(path: &std::path::Path, classes: usize) -> Result<LabeledDataset, FedsimError> {
    let file = std::fs::File::open(path).map_err(|e| FedsimError::Dataset { path: path.display().to_string(), source: e.into() })?;
    LabeledDataset::read_csv(std::io::BufReader::new(file), Some(classes))
        .map_err(|source| FedsimError::Dataset { path: path.display().to_string(), source })
}

fn split_by_class(data: &LabeledDataset) -> Vec<LabeledDataset> {
    data.class_indices().iter().map(|idx| data.subset(idx)).collect()
}

impl Federation {
    pub fn from_config(cfg: &SimConfig) -> Result<Self, FedsimError> {
        cfg.validate()?;
        let t = &cfg.task;
        let master = cfg.seeds.master;
        let c = t.classes;
        let (pool, server, test, oracle) = match (&t.dataset, &t.test_dataset) {
            (Some(train_path), Some(test_path)) => {
                let full = read_dataset(train_path, c)?;
                let test = read_dataset(test_path, c)?;
                if full.dim() != t.dim || test.dim() != t.dim {
                    return Err(FedsimError::DimensionMismatch { expected: t.dim, found: full.dim() });
                }
                // The first `server_per_class` rows of each class are held
                // out for the server; the full file serves as the oracle.
                let mut server_rows = Vec::new();
                let mut client_rows = Vec::new();
                for idx in full.class_indices() {
                    let k = t.server_per_class.min(idx.len());
                    server_rows.push(idx[..k].to_vec());
                    client_rows.extend_from_slice(&idx[k..]);
                }
                client_rows.sort_unstable();
                let server = server_rows.iter().map(|r| full.subset(r)).collect();
                (full.subset(&client_rows), server, test, split_by_class(&full))
            }
            _ => {
                let task = GaussianMixture::new(c, t.dim, t.separation)?;
                let pool = task.sample(t.per_class, &mut Stream::TrainData.rng(master));
                let test = task.sample(t.test_per_class, &mut Stream::TestData.rng(master));
                let mut srng = Stream::ServerData.rng(master);
                let server = (0..c).map(|z| task.sample_class(z, t.server_per_class, &mut srng)).collect();
                let mut orng = Stream::OracleData.rng(master);
                let oracle = (0..c).map(|z| task.sample_class(z, t.oracle_per_class, &mut orng)).collect();
                (pool, server, test, oracle)
            }
        };
        let clients = cfg.partition_spec().apply(&pool)?;
        let mut train_rows: Vec<usize> = clients.iter().flat_map(|cd| cd.indices.iter().copied()).collect();
        train_rows.sort_unstable();
        Ok(Self {
            model: cfg.model(),
            train: pool.subset(&train_rows),
            clients,
            server,
            test,
            oracle,
            byzantine: cfg.attack.byzantine,
            f: cfg.aggregator.f,
            local: cfg.local_variant(),
            schedule: cfg.schedule(),
            noise_std: cfg.model.noise_std,
            batch_size: cfg.model.batch_size,
            participation: cfg.model.participation,
            master_seed: master,
            mimic_target: cfg.attack.mimic_target,
        })
    }

    pub fn classes(&self) -> usize {
        self.model.classes()
    }

    pub fn init_state(&self) -> SimState {
        SimState { params: self.model.init(&mut Stream::Init.rng(self.master_seed)), round: 0 }
    }

    /// Honest clients taking part in `round`, ascending.
    pub fn participants(&self, round: usize) -> Vec<usize> {
        let h = self.clients.len();
        if self.participation >= 1.0 {
            return (0..h).collect();
        }
        let m = ((self.participation * h as f64).round() as usize).clamp(1, h);
        let mut rng = Stream::Participation { round }.rng(self.master_seed);
        let mut picked = sample_indices(&mut rng, h, m).into_vec();
        picked.sort_unstable();
        picked
    }

    fn upload(&self, params: &[f64], data: &LabeledDataset, eta: f64, mut rng: ChaCha8Rng) -> Result<Vector, FedsimError> {
        let batch;
        let data = if self.batch_size > 0 && self.batch_size < data.len() {
            let mut idx = sample_indices(&mut rng, data.len(), self.batch_size).into_vec();
            idx.sort_unstable();
            batch = data.subset(&idx);
            &batch
        } else {
            data
        };
        let mut g = local_update(&self.model, params, data, eta, self.local)?;
        if self.noise_std > 0.0 {
            let normal = Normal::new(0.0, self.noise_std).expect("validated noise level");
            for x in g.iter_mut() {
                *x += normal.sample(&mut rng);
            }
        }
        Ok(g)
    }

    /// Honest uploads of `participants` in `round`, one column each.
    pub fn honest_gradients(&self, params: &[f64], round: usize, participants: &[usize]) -> Result<Matrix, FedsimError> {
        let eta = self.schedule.eta_at(round);
        let cols: Vec<Vector> = participants
            .par_iter()
            .map(|&i| {
                let rng = Stream::ClientNoise { round, client: i }.rng(self.master_seed);
                self.upload(params, &self.clients[i].data, eta, rng).map_err(|e| match e {
                    FedsimError::NonFinite(_) => FedsimError::Diverged { client: format!("client {i}") },
                    other => other,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Matrix::from_columns(&cols))
    }

    /// Uploads of the server's single-class virtual clients.
    pub fn server_gradients(&self, params: &[f64], round: usize) -> Result<Matrix, FedsimError> {
        let eta = self.schedule.eta_at(round);
        let cols: Vec<Vector> = (0..self.classes())
            .into_par_iter()
            .map(|z| {
                let rng = Stream::ServerNoise { round, class: z }.rng(self.master_seed);
                self.upload(params, &self.server[z], eta, rng).map_err(|e| match e {
                    FedsimError::NonFinite(_) => FedsimError::Diverged { client: format!("server class {z}") },
                    other => other,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Matrix::from_columns(&cols))
    }

    /// Oracle class uploads (noise-free, full batch).
    pub fn oracle_gradients(&self, params: &[f64], round: usize) -> Result<Matrix, FedsimError> {
        class_gradients(&self.model, params, &self.oracle, self.schedule.eta_at(round), self.local)
    }

    /// Oracle expectation of each participant's upload: its label mix of
    /// the oracle class uploads.
    pub fn expected_client_gradients(&self, oracle: &Matrix, participants: &[usize]) -> Matrix {
        let mix = Matrix::from_fn(self.classes(), participants.len(), |z, j| {
            self.clients[participants[j]].distribution.0[z]
        });
        oracle * mix
    }

    /// Advances `state` by one round.
    pub fn run_round(
        &self,
        state: &mut SimState,
        aggregator: &dyn Aggregator,
        attack: Option<&Attack>,
    ) -> Result<RoundRecord, FedsimError> {
        let round = state.round;
        let eta = self.schedule.eta_at(round);
        let params = state.params.as_slice();
        let participants = self.participants(round);
        let honest = self.honest_gradients(params, round, &participants)?;
        let server = self.server_gradients(params, round)?;
        let oracle = self.oracle_gradients(params, round)?;
        let expected_mean = column_mean(&self.expected_client_gradients(&oracle, &participants));
        let honest_mean = column_mean(&honest);
        let m = participants.len();

        let gradients = match attack {
            Some(attack) if self.byzantine > 0 => {
                let dists: Vec<&[f64]> = participants.iter().map(|&i| self.clients[i].distribution.as_slice()).collect();
                let target = self
                    .mimic_target
                    .and_then(|t| participants.iter().position(|&p| p == t))
                    .unwrap_or_else(|| most_skewed_client(&dists));
                let ctx = AttackContext { total_clients: m + self.byzantine, byzantine: self.byzantine, mimic_target: target };
                let byz = attack.generate(&honest, &ctx, &mut Stream::Attack { round }.rng(self.master_seed))?;
                let mut all = Matrix::zeros(honest.nrows(), m + self.byzantine);
                all.columns_mut(0, m).copy_from(&honest);
                all.columns_mut(m, self.byzantine).copy_from(&byz);
                all
            }
            _ => honest.clone(),
        };

        let step = self.local.server_step(eta);
        let server_pool = concat(&self.server);
        let loss_fn = |w: &[f64]| self.model.loss(w, &server_pool).unwrap_or(f64::INFINITY);
        let probe = LossProbe { params, step, loss: &loss_fn };
        let input = AggregationInput::new(&gradients, Some(&server), self.f, self.classes());
        let round_seed = Stream::Aggregator { round }.seed(self.master_seed);
        let result = aggregator
            .aggregate_round(&input, aggregator.needs_loss_probe().then_some(&probe), round_seed)
            .map_err(|source| FedsimError::Aggregation { round, source })?;
        if result.aggregate.iter().any(|x| !x.is_finite()) {
            return Err(FedsimError::NonFinite(format!("aggregate of round {round}")));
        }

        let (_, full_grad) = self.model.loss_and_gradient(params, &self.train, None)?;
        let next = &state.params - &result.aggregate * step;
        if next.iter().any(|x| !x.is_finite()) {
            return Err(FedsimError::NonFinite(format!("parameters after round {round}")));
        }
        let train_loss = self.model.loss(next.as_slice(), &self.train)?;
        let (test_acc, recall) = accuracy_and_recall(&self.model, next.as_slice(), &self.test)?;
        let grad_err = (&result.aggregate - &expected_mean).norm_squared();
        let record = RoundRecord {
            round,
            eta,
            accepted_count: result.accepted_count(),
            byzantine_accepted: result.accepted[m..].iter().filter(|&&a| a).count(),
            participants,
            aggregate: result.aggregate,
            honest_mean,
            expected_mean,
            diagnostics: result.diagnostics,
            train_loss,
            test_acc,
            recall,
            grad_err,
            grad_norm_sq: full_grad.norm_squared(),
        };
        state.params = next;
        state.round += 1;
        Ok(record)
    }

    /// Runs every scheduled round from the initial state.
    pub fn run(&self, aggregator: &dyn Aggregator, attack: Option<&Attack>) -> Result<Vec<RoundRecord>, FedsimError> {
        let mut state = self.init_state();
        (0..self.schedule.rounds).map(|_| self.run_round(&mut state, aggregator, attack)).collect()
    }
}

fn concat(sets: &[LabeledDataset]) -> LabeledDataset {
    let dim = sets.first().map_or(0, LabeledDataset::dim);
    let rows: usize = sets.iter().map(LabeledDataset::len).sum();
    let mut features = Matrix::zeros(rows, dim);
    let mut labels = Vec::with_capacity(rows);
    let mut at = 0;
    for s in sets {
        features.rows_mut(at, s.len()).copy_from(&s.features);
        labels.extend_from_slice(&s.labels);
        at += s.len();
    }
    LabeledDataset { features, labels, classes: sets.first().map_or(0, |s| s.classes) }
}

/// End-of-run figures.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub agr: String,
    pub attack: String,
    pub seed: u64,
    pub rounds: usize,
    pub honest: usize,
    pub byzantine: usize,
    pub f: usize,
    pub final_acc: f64,
    pub final_train_loss: f64,
    pub min_test_acc: f64,
    pub mean_grad_err: f64,
    pub mean_grad_norm_sq: f64,
    /// Mean subspace fits per round, for subspace rules.
    pub mean_trsvd_calls: Option<f64>,
    /// Largest per-class recall drop against the reference run.
    pub mrd: Option<f64>,
    pub final_recall: Vec<Option<f64>>,
    /// Variance share of each principal component of the first round's
    /// honest uploads.
    pub pca_fractions: Vec<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

impl Summary {
    /// `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut lines = vec![
            format!("agr={}", self.agr),
            format!("attack={}", self.attack),
            format!("seed={}", self.seed),
            format!("rounds={}", self.rounds),
            format!("honest={}", self.honest),
            format!("byzantine={}", self.byzantine),
            format!("f={}", self.f),
            format!("final_acc={}", self.final_acc),
            format!("final_train_loss={}", self.final_train_loss),
            format!("min_test_acc={}", self.min_test_acc),
            format!("mean_grad_err={}", self.mean_grad_err),
            format!("mean_grad_norm_sq={}", self.mean_grad_norm_sq),
            format!("mean_trsvd_calls={}", fmt_opt(self.mean_trsvd_calls)),
            format!("mrd={}", fmt_opt(self.mrd)),
        ];
        for (z, r) in self.final_recall.iter().enumerate() {
            lines.push(format!("recall_{z}={}", fmt_opt(*r)));
        }
        let k = self.final_recall.len().saturating_sub(1);
        let top: f64 = self.pca_fractions.iter().take(k).sum();
        lines.push(format!("pca_top_fraction={top}"));
        lines.join("\n") + "\n"
    }
}

/// Rows, summary and the reference recalls of one experiment.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub records: Vec<RoundRecord>,
    pub summary: Summary,
}

/// Runs the configured experiment and, unless disabled, the attack-free
/// reference run needed for the recall drop.
pub fn run_experiment(cfg: &SimConfig) -> Result<ExperimentOutput, FedsimError> {
    let fed = Federation::from_config(cfg)?;
    let rule = cfg.rule()?;
    let attack = cfg.attack()?;
    let records = fed.run(&rule, attack.as_ref())?;
    let last = records.last().expect("at least one round");
    let reference_recall = match cfg.mrd_reference() {
        Some(reference) if reference == rule && attack.is_none() => Some(last.recall.clone()),
        Some(reference) => Some(fed.run(&reference, None)?.last().expect("at least one round").recall.clone()),
        None => None,
    };
    let mrd = match &reference_recall {
        Some(r) => Some(max_recall_drop(&last.recall, r)?),
        None => None,
    };
    let n = records.len() as f64;
    let calls: Vec<usize> = records.iter().filter_map(|r| r.diagnostics.trsvd_calls).collect();
    let first_honest = fed.honest_gradients(fed.init_state().params.as_slice(), 0, &fed.participants(0))?;
    let summary = Summary {
        agr: rule.to_string(),
        attack: cfg.attack_name().to_string(),
        seed: cfg.seeds.master,
        rounds: records.len(),
        honest: fed.clients.len(),
        byzantine: if attack.is_some() { fed.byzantine } else { 0 },
        f: fed.f,
        final_acc: last.test_acc,
        final_train_loss: last.train_loss,
        min_test_acc: records.iter().map(|r| r.test_acc).fold(f64::INFINITY, f64::min),
        mean_grad_err: records.iter().map(|r| r.grad_err).sum::<f64>() / n,
        mean_grad_norm_sq: records.iter().map(|r| r.grad_norm_sq).sum::<f64>() / n,
        mean_trsvd_calls: (!calls.is_empty()).then(|| calls.iter().sum::<usize>() as f64 / calls.len() as f64),
        mrd,
        final_recall: last.recall.clone(),
        pca_fractions: principal_variance_fractions(&first_honest)?,
    };
    Ok(ExperimentOutput { records, summary })
}

/// Header of the per-round CSV.
pub const ROUNDS_CSV_HEADER: [&str; 10] =
    ["round", "agr", "attack", "seed", "eta", "train_loss", "test_acc", "grad_err", "trsvd_calls", "accepted_count"];

/// Writes one CSV row per round.
pub fn write_rounds_csv<W: Write>(
    out: W,
    records: &[RoundRecord],
    agr: &str,
    attack: &str,
    seed: u64,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ROUNDS_CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.round.to_string(),
            agr.to_string(),
            attack.to_string(),
            seed.to_string(),
            r.eta.to_string(),
            r.train_loss.to_string(),
            r.test_acc.to_string(),
            r.grad_err.to_string(),
            r.diagnostics.trsvd_calls.unwrap_or(0).to_string(),
            r.accepted_count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `component,fraction` rows.
pub fn write_pca_csv<W: Write>(out: W, fractions: &[f64]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["component", "fraction"])?;
    for (k, f) in fractions.iter().enumerate() {
        w.write_record([(k + 1).to_string(), f.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Honest-only reference aggregator: averages the first `honest` columns.
#[derive(Clone, Copy, Debug)]
pub struct HonestOracle {
    pub honest: usize,
}

impl Aggregator for HonestOracle {
    fn name(&self) -> String {
        "honest-oracle".into()
    }

    fn aggregate_round(
        &self,
        input: &AggregationInput<'_>,
        _probe: Option<&LossProbe<'_>>,
        _round_seed: u64,
    ) -> Result<AggregationResult, AggregationError> {
        let n = input.n();
        let h = self.honest.min(n);
        let honest = input.gradients.columns(0, h).into_owned();
        let mut accepted = vec![false; n];
        accepted[..h].fill(true);
        Ok(AggregationResult { aggregate: column_mean(&honest), accepted, diagnostics: Diagnostics::default() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SimConfig {
        let mut cfg = SimConfig::default();
        cfg.task.classes = 4;
        cfg.task.dim = 6;
        cfg.task.per_class = 30;
        cfg.task.test_per_class = 30;
        cfg.task.oracle_per_class = 200;
        cfg.task.server_per_class = 5;
        cfg.partition.honest = 8;
        cfg.aggregator.f = 2;
        cfg.attack.byzantine = 2;
        cfg.schedule.rounds = 5;
        cfg
    }

    #[test]
    fn schedule_decay_steps() {
        let s = Schedule { eta: 1.0, rounds: 10, decay_start: 3, decay_interval: 2, decay_rate: 0.5 };
        let etas: Vec<f64> = (0..7).map(|t| s.eta_at(t)).collect();
        assert_eq!(etas, vec![1.0, 1.0, 1.0, 0.5, 0.5, 0.25, 0.25]);
        let flat = Schedule { decay_interval: 0, ..s };
        assert_eq!(flat.eta_at(100), 1.0);
    }

    #[test]
    fn one_epoch_fedavg_is_scaled_gradient() {
        let cfg = small_config();
        let fed = Federation::from_config(&cfg).unwrap();
        let w = Vector::from_fn(fed.model.param_count(), |i, _| (i as f64 * 0.37).sin() * 0.1);
        let data = &fed.clients[0].data;
        let g = local_update(&fed.model, w.as_slice(), data, 0.3, LocalVariant::FedSgd).unwrap();
        let d = local_update(&fed.model, w.as_slice(), data, 0.3, LocalVariant::FedAvg { epochs: 1 }).unwrap();
        assert!((d - g * 0.3).amax() < 1e-15);
    }

    #[test]
    fn strong_prox_pins_the_update() {
        let cfg = small_config();
        let fed = Federation::from_config(&cfg).unwrap();
        let w = fed.init_state().params;
        let data = &fed.clients[0].data;
        let eta = 0.5;
        let p = local_update(&fed.model, w.as_slice(), data, eta, LocalVariant::FedProx { epochs: 5, mu: 1e6 }).unwrap();
        let g = local_update(&fed.model, w.as_slice(), data, eta, LocalVariant::FedSgd).unwrap();
        assert!(p.norm() < 1e-5 * g.norm());
        let free = local_update(&fed.model, w.as_slice(), data, eta, LocalVariant::FedProx { epochs: 5, mu: 0.0 }).unwrap();
        let avg = local_update(&fed.model, w.as_slice(), data, eta, LocalVariant::FedAvg { epochs: 5 }).unwrap();
        assert!((free - avg).amax() < 1e-15);
    }

    #[test]
    fn fedavg_matches_hand_iteration() {
        let cfg = small_config();
        let fed = Federation::from_config(&cfg).unwrap();
        let data = &fed.clients[1].data;
        let w0 = fed.init_state().params;
        let mut w = w0.clone();
        for _ in 0..5 {
            let (_, g) = fed.model.loss_and_gradient(w.as_slice(), data, None).unwrap();
            w -= g * 0.2;
        }
        let d = local_update(&fed.model, w0.as_slice(), data, 0.2, LocalVariant::FedAvg { epochs: 5 }).unwrap();
        assert!((d - (&w0 - &w)).amax() < 1e-15);
    }

    #[test]
    fn rounds_are_thread_independent() {
        let mut cfg = small_config();
        cfg.attack.kind = "lie".into();
        cfg.model.noise_std = 0.01;
        let fed = Federation::from_config(&cfg).unwrap();
        let rule = cfg.rule().unwrap();
        let attack = cfg.attack().unwrap();
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| fed.run(&rule, attack.as_ref()).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn zero_step_keeps_parameters() {
        let mut cfg = small_config();
        cfg.schedule.eta = 1e-300;
        let fed = Federation::from_config(&cfg).unwrap();
        let mut state = fed.init_state();
        let before = state.params.clone();
        fed.run_round(&mut state, &Rule::Average, None).unwrap();
        assert!((state.params - before).amax() < 1e-290);
    }

    #[test]
    fn average_without_attack_is_centralised_descent() {
        let cfg = small_config();
        let fed = Federation::from_config(&cfg).unwrap();
        let mut state = fed.init_state();
        let mut w = state.params.clone();
        let h = fed.clients.len() as f64;
        for _ in 0..3 {
            fed.run_round(&mut state, &Rule::Average, None).unwrap();
            let mut g = Vector::zeros(w.len());
            for c in &fed.clients {
                g += fed.model.loss_and_gradient(w.as_slice(), &c.data, None).unwrap().1 / h;
            }
            w -= g * cfg.schedule.eta;
            assert!((&state.params - &w).amax() < 1e-12);
        }
    }

    #[test]
    fn honest_oracle_ignores_byzantines() {
        let mut cfg = small_config();
        cfg.attack.kind = "ipm".into();
        let fed = Federation::from_config(&cfg).unwrap();
        let oracle = HonestOracle { honest: fed.clients.len() };
        let with = fed.run(&oracle, cfg.attack().unwrap().as_ref()).unwrap();
        let without = fed.run(&Rule::Average, None).unwrap();
        for (a, b) in with.iter().zip(&without) {
            assert_eq!(a.aggregate, b.aggregate);
            assert_eq!(a.train_loss, b.train_loss);
        }
    }

    #[test]
    fn honest_data_is_independent_of_the_attack() {
        let mut a = small_config();
        a.attack.kind = "gauss".into();
        let b = small_config();
        let fa = Federation::from_config(&a).unwrap();
        let fb = Federation::from_config(&b).unwrap();
        assert_eq!(fa.clients, fb.clients);
        assert_eq!(fa.server, fb.server);
    }

    #[test]
    fn experiment_is_deterministic_and_writes_rows() {
        let mut cfg = small_config();
        cfg.attack.kind = "minmax".into();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        write_rounds_csv(&mut ca, &a.records, &a.summary.agr, &a.summary.attack, 0).unwrap();
        write_rounds_csv(&mut cb, &b.records, &b.summary.agr, &b.summary.attack, 0).unwrap();
        assert_eq!(ca, cb);
        let text = String::from_utf8(ca).unwrap();
        assert_eq!(text.lines().next().unwrap(), ROUNDS_CSV_HEADER.join(","));
        assert_eq!(text.lines().count(), cfg.schedule.rounds + 1);
        assert!(a.summary.mrd.is_some());
        assert_eq!(a.summary.to_key_values(), b.summary.to_key_values());
    }

    #[test]
    fn partial_participation_and_minibatches() {
        let mut cfg = small_config();
        cfg.partition.honest = 16;
        cfg.model.participation = 0.5;
        cfg.model.batch_size = 5;
        cfg.model.local = crate::config::LocalKind::Fedavg;
        cfg.model.epochs = 2;
        cfg.attack.kind = "mimic".into();
        let fed = Federation::from_config(&cfg).unwrap();
        let recs = fed.run(&cfg.rule().unwrap(), cfg.attack().unwrap().as_ref()).unwrap();
        for r in &recs {
            assert_eq!(r.participants.len(), 8);
        }
        assert_ne!(recs[0].participants, recs[1].participants);
    }

    #[test]
    fn oracle_matches_class_mixture_for_one_class_clients() {
        let cfg = small_config();
        let fed = Federation::from_config(&cfg).unwrap();
        let params = fed.init_state().params;
        let oracle = fed.oracle_gradients(params.as_slice(), 0).unwrap();
        let all: Vec<usize> = (0..fed.clients.len()).collect();
        let expected = fed.expected_client_gradients(&oracle, &all);
        for (j, c) in fed.clients.iter().enumerate() {
            if let Some(z) = c.distribution.0.iter().position(|&p| p == 1.0) {
                assert_eq!(expected.column(j), oracle.column(z));
            }
        }
    }
}
