//! Federated averaging and the local-only baseline.
//!
//! A session runs over one [`Channel`] per client:
//!
//! 1. client → server: `INIT` hello with its id; server → client: `INIT` session spec.
//! 2. Each round the server broadcasts `GLOBAL_WEIGHTS(t, w_t)`. A client first scores
//!    `w_t` on its validation set, then trains `local_epochs` from `w_t` and answers
//!    `CLIENT_UPDATE(t, w_t^j, n_j, val_loss(w_t))`.
//! 3. The server averages the updates into `w_{t+1}` weighted by `n_j`.
//! 4. Once the mean validation loss of the aggregated models has not improved for
//!    `patience` rounds, the server sends `STOP` with the best aggregated model.
//!
//! The validation loss of the model aggregated in round `t` therefore reaches the
//! server with the replies of round `t + 1`; the value is the same as if it were
//! sent in a separate exchange.

use std::fmt;
use std::net::SocketAddr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Partition;
use crate::error::{Error, Result};
use crate::nn::{self, Batch, ModelParams, OptimizerState};
use crate::transport::{
    inproc_pair, ByteCounters, Channel, InitDocument, RoundMessage, SessionSpec, TcpChannel,
    TcpServer, DEFAULT_ROUND_TIMEOUT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    /// Local-only training.
    A,
    /// Global federated model.
    B,
    /// Global model finetuned per client.
    C,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Strategy::A => "A",
            Strategy::B => "B",
            Strategy::C => "C",
        };
        f.write_str(s)
    }
}

/// One client's normalized partitions. Targets are in physical units.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub train: Batch,
    pub validation: Batch,
    pub test: Batch,
}

/// A turbine taking part in training. Its data never leave this struct.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: u32,
    pub data: ClientData,
    pub model: ModelParams,
    pub optimizer: OptimizerState,
    pub local_epochs: usize,
    pub seed: u64,
    rng: ChaCha8Rng,
}

impl ClientState {
    pub fn new(
        id: u32,
        data: ClientData,
        model: ModelParams,
        spec: &SessionSpec,
        seed: u64,
    ) -> Result<Self> {
        if data.validation.is_empty() {
            return Err(Error::Data(format!(
                "client {id} has an empty validation set"
            )));
        }
        let optimizer = OptimizerState::new(
            model.architecture(),
            spec.learning_rate,
            spec.momentum,
            spec.batch_size,
        )?;
        let mut client = Self {
            id,
            data,
            model,
            optimizer,
            local_epochs: spec.local_epochs,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        client.configure(spec)?;
        Ok(client)
    }

    /// Applies a session spec: fresh optimizer, model reset if the architecture changes.
    pub fn configure(&mut self, spec: &SessionSpec) -> Result<()> {
        spec.architecture.validate()?;
        if spec.architecture.input_dim != self.data.validation.inputs().cols() {
            return Err(Error::Shape(format!(
                "client {} has {} input features, session expects {}",
                self.id,
                self.data.validation.inputs().cols(),
                spec.architecture.input_dim
            )));
        }
        if self.model.architecture() != &spec.architecture {
            self.model = ModelParams::zeros(&spec.architecture);
        }
        self.optimizer = OptimizerState::new(
            &spec.architecture,
            spec.learning_rate,
            spec.momentum,
            spec.batch_size,
        )?;
        self.local_epochs = spec.local_epochs;
        Ok(())
    }

    pub fn n_train(&self) -> u64 {
        self.data.train.len() as u64
    }

    pub fn partition(&self, part: Partition) -> Result<&Batch> {
        match part {
            Partition::Train => Ok(&self.data.train),
            Partition::Validation => Ok(&self.data.validation),
            Partition::Test => Ok(&self.data.test),
            Partition::Unused => Err(Error::Data("no unused partition on a client".into())),
        }
    }

    /// Restarts the shuffling stream from the client seed.
    pub fn reset_rng(&mut self) {
        self.rng = ChaCha8Rng::seed_from_u64(self.seed);
    }
}

/// Result of a client's local training round.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub client_id: u32,
    pub params: ModelParams,
    pub n_train: u64,
    pub val_loss: f64,
}

fn local_train(client: &mut ClientState, global: &ModelParams, epochs: usize) -> Result<()> {
    if client.data.train.is_empty() {
        return Err(Error::Data(format!(
            "client {} has no training data",
            client.id
        )));
    }
    client.model = global.clone();
    nn::train_epochs(
        &mut client.model,
        &mut client.optimizer,
        &client.data.train,
        epochs,
        &mut client.rng,
    )
}

/// Trains `epochs` from `global` on the client's data. Velocity and shuffling
/// stream carry over between rounds.
pub fn local_update(
    client: &mut ClientState,
    global: &ModelParams,
    epochs: usize,
) -> Result<LocalUpdate> {
    local_train(client, global, epochs)?;
    Ok(LocalUpdate {
        client_id: client.id,
        params: client.model.clone(),
        n_train: client.n_train(),
        val_loss: nn::evaluate_mse(&client.model, &client.data.validation)?,
    })
}

/// `Σ_j (n_j / n) w_j`, summed in ascending client-id order.
pub fn aggregate_weighted(updates: &[LocalUpdate]) -> Result<ModelParams> {
    let mut sorted: Vec<&LocalUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let first = sorted
        .first()
        .ok_or_else(|| Error::protocol("updates", "nothing to aggregate"))?;
    if sorted.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::protocol("updates", "duplicate client id"));
    }
    if let Some(u) = sorted.iter().find(|u| u.n_train == 0) {
        return Err(Error::protocol(
            "n_train",
            format!("client {} reported zero samples", u.client_id),
        ));
    }
    if let Some(u) = sorted
        .iter()
        .find(|u| u.params.architecture() != first.params.architecture())
    {
        return Err(Error::protocol(
            "weights",
            format!("client {} sent a differently shaped model", u.client_id),
        ));
    }
    let total: u64 = sorted.iter().map(|u| u.n_train).sum();
    let total = total as f64;

    let coeff = |u: &LocalUpdate| u.n_train as f64 / total;
    let mut acc = first.params.clone();
    let c0 = coeff(first);
    for l in acc.layers_mut() {
        l.weights
            .iter_mut()
            .chain(l.biases.iter_mut())
            .for_each(|v| *v *= c0);
    }
    for u in &sorted[1..] {
        let c = coeff(u);
        for (a, l) in acc.layers_mut().iter_mut().zip(u.params.layers()) {
            let dst = a.weights.iter_mut().chain(a.biases.iter_mut());
            for (d, s) in dst.zip(l.weights.iter().chain(&l.biases)) {
                *d += c * s;
            }
        }
    }
    Ok(acc)
}

/// Server side of FedAvg with restore-best early stopping.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub global: ModelParams,
    /// Number of completed aggregations; `global` is `w_round`.
    pub round: u32,
    pub patience: usize,
    pub best_score: f64,
    pub best_round: Option<u32>,
    best_params: ModelParams,
    pub rounds_since_improvement: usize,
    /// Mean client validation loss of `w_1, w_2, ...`.
    pub history: Vec<f64>,
}

impl ServerState {
    pub fn new(initial: ModelParams, patience: usize) -> Result<Self> {
        if patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        Ok(Self {
            best_params: initial.clone(),
            global: initial,
            round: 0,
            patience,
            best_score: f64::INFINITY,
            best_round: None,
            rounds_since_improvement: 0,
            history: Vec::new(),
        })
    }

    /// Best-scoring aggregated model, or the initial model before any score arrived.
    pub fn best_params(&self) -> &ModelParams {
        &self.best_params
    }

    pub fn should_stop(&self) -> bool {
        self.rounds_since_improvement >= self.patience
    }

    fn record(&mut self, round: u32, score: f64, params: &ModelParams) {
        self.history.push(score);
        if score < self.best_score {
            self.best_score = score;
            self.best_round = Some(round);
            self.best_params = params.clone();
            self.rounds_since_improvement = 0;
        } else {
            self.rounds_since_improvement += 1;
        }
    }
}

/// A registered client connection.
pub struct ClientLink<C> {
    pub client_id: u32,
    pub channel: C,
}

fn aborted(round: u32, client: u32, e: impl fmt::Display) -> Error {
    Error::RoundAborted {
        round,
        client,
        reason: e.to_string(),
    }
}

/// Receives each client's hello, orders the links by client id and sends the session spec.
pub fn open_session<C: Channel>(
    channels: Vec<C>,
    spec: &SessionSpec,
) -> Result<Vec<ClientLink<C>>> {
    let mut links = Vec::with_capacity(channels.len());
    for (i, mut channel) in channels.into_iter().enumerate() {
        match channel.recv() {
            Ok(RoundMessage::Init {
                document: InitDocument::Hello { client_id },
                ..
            }) => links.push(ClientLink { client_id, channel }),
            Ok(other) => {
                return Err(Error::protocol(
                    "kind",
                    format!(
                        "connection {i}: expected INIT hello, got {:?}",
                        other.kind()
                    ),
                ))
            }
            Err(e) => return Err(aborted(0, i as u32, e)),
        }
    }
    links.sort_by_key(|l| l.client_id);
    if links.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::protocol(
            "init",
            "two connections claim the same client id",
        ));
    }
    let init = RoundMessage::Init {
        round: 0,
        document: InitDocument::Session(spec.clone()),
    };
    for l in &mut links {
        l.channel
            .send(&init)
            .map_err(|e| aborted(0, l.client_id, e))?;
    }
    Ok(links)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    /// Validation loss of the broadcast model, per client id.
    pub val_losses: Vec<(u32, f64)>,
    /// Unweighted mean of `val_losses`; `None` for the initial model.
    pub score: Option<f64>,
}

/// One synchronous round: broadcast `w_t`, gather updates, aggregate into `w_{t+1}`.
/// The returned losses score `w_t` (the previous round's aggregate).
pub fn fedavg_round<C: Channel>(
    server: &mut ServerState,
    links: &mut [ClientLink<C>],
) -> Result<RoundOutcome> {
    if links.is_empty() {
        return Err(Error::Config("a round needs at least one client".into()));
    }
    let round = server.round;
    let broadcast = RoundMessage::GlobalWeights {
        round,
        weights: server.global.flatten(),
    };
    for l in links.iter_mut() {
        l.channel
            .send(&broadcast)
            .map_err(|e| aborted(round, l.client_id, e))?;
    }

    let arch = server.global.architecture().clone();
    let mut updates = Vec::with_capacity(links.len());
    let mut val_losses = Vec::with_capacity(links.len());
    for l in links.iter_mut() {
        let id = l.client_id;
        match l.channel.recv().map_err(|e| aborted(round, id, e))? {
            RoundMessage::ClientUpdate {
                round: r,
                weights,
                n_train,
                val_loss,
            } if r == round => {
                val_losses.push((id, val_loss));
                if n_train > 0 {
                    let params = ModelParams::unflatten(&arch, &weights)
                        .map_err(|e| aborted(round, id, e))?;
                    updates.push(LocalUpdate {
                        client_id: id,
                        params,
                        n_train,
                        val_loss,
                    });
                }
            }
            other => {
                return Err(aborted(
                    round,
                    id,
                    format!(
                        "expected CLIENT_UPDATE for round {round}, got {:?} for round {}",
                        other.kind(),
                        other.round()
                    ),
                ))
            }
        }
    }

    let score = (round > 0)
        .then(|| val_losses.iter().map(|(_, v)| v).sum::<f64>() / val_losses.len() as f64);
    if let Some(s) = score {
        let current = server.global.clone();
        server.record(round, s, &current);
    }
    if !updates.is_empty() {
        server.global = aggregate_weighted(&updates)?;
    }
    server.round += 1;
    Ok(RoundOutcome { val_losses, score })
}

/// What a finished FedAvg session produced.
#[derive(Debug, Clone)]
pub struct FedAvgOutcome {
    pub global: ModelParams,
    pub rounds: u32,
    pub best_round: Option<u32>,
    pub history: Vec<f64>,
    pub traffic: Vec<(u32, ByteCounters)>,
}

/// Runs rounds until patience is exhausted or `max_rounds` aggregations happened,
/// then sends `STOP` with the best model to every client.
pub fn serve_fedavg<C: Channel>(
    server: &mut ServerState,
    links: &mut [ClientLink<C>],
    max_rounds: u32,
) -> Result<FedAvgOutcome> {
    loop {
        fedavg_round(server, links)?;
        log::debug!("round {} score {:?}", server.round, server.history.last());
        if server.should_stop() || server.round > max_rounds {
            break;
        }
    }
    let stop = RoundMessage::Stop {
        round: server.round,
        weights: server.best_params().flatten(),
    };
    for l in links.iter_mut() {
        l.channel
            .send(&stop)
            .map_err(|e| aborted(server.round, l.client_id, e))?;
    }
    Ok(FedAvgOutcome {
        global: server.best_params().clone(),
        rounds: server.round,
        best_round: server.best_round,
        history: server.history.clone(),
        traffic: links
            .iter()
            .map(|l| (l.client_id, l.channel.counters()))
            .collect(),
    })
}

/// Client side of a session. Returns the final global model from `STOP`.
pub fn run_client<C: Channel>(channel: &mut C, client: &mut ClientState) -> Result<ModelParams> {
    channel.send(&RoundMessage::Init {
        round: 0,
        document: InitDocument::Hello {
            client_id: client.id,
        },
    })?;
    match channel.recv()? {
        RoundMessage::Init {
            document: InitDocument::Session(spec),
            ..
        } => client.configure(&spec)?,
        other => {
            return Err(Error::protocol(
                "kind",
                format!("expected INIT session, got {:?}", other.kind()),
            ))
        }
    }
    let arch = client.model.architecture().clone();
    loop {
        match channel.recv()? {
            RoundMessage::GlobalWeights { round, weights } => {
                let global = ModelParams::unflatten(&arch, &weights)?;
                let val_loss = nn::evaluate_mse(&global, &client.data.validation)?;
                let epochs = client.local_epochs;
                let (weights, n_train) = match local_train(client, &global, epochs) {
                    Ok(()) => (client.model.flatten(), client.n_train()),
                    // Nothing to train on: report zero samples so the server skips us.
                    Err(Error::Data(_)) if client.data.train.is_empty() => (weights, 0),
                    Err(e) => return Err(e),
                };
                channel.send(&RoundMessage::ClientUpdate {
                    round,
                    weights,
                    n_train,
                    val_loss,
                })?;
            }
            RoundMessage::Stop { weights, .. } => {
                client.model = ModelParams::unflatten(&arch, &weights)?;
                return Ok(client.model.clone());
            }
            other => {
                return Err(Error::protocol(
                    "kind",
                    format!("unexpected {:?} during session", other.kind()),
                ))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    InProc,
    /// Server listens here; clients connect over TCP. Port 0 picks a free port.
    Tcp(SocketAddr),
}

#[derive(Debug, Clone)]
pub struct FedAvgOptions {
    pub max_rounds: u32,
    pub timeout: Duration,
    pub transport: TransportKind,
}

impl Default for FedAvgOptions {
    fn default() -> Self {
        Self {
            max_rounds: 500,
            timeout: DEFAULT_ROUND_TIMEOUT,
            transport: TransportKind::InProc,
        }
    }
}

/// Per-run summary for one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub strategy: Strategy,
    /// Test RMSE in target units, per client id.
    pub client_rmse: Vec<(u32, f64)>,
    pub seconds: f64,
    /// Rounds (B) or epochs (A, C) executed.
    pub iterations: usize,
    pub best_iteration: Option<usize>,
    pub history: Vec<f64>,
    pub traffic: Vec<(u32, ByteCounters)>,
}

/// Spawns one thread per client and runs a full FedAvg session over the chosen transport.
/// Clients keep the final global model in `client.model`.
pub fn run_fedavg(
    server: &mut ServerState,
    clients: &mut [ClientState],
    spec: &SessionSpec,
    options: &FedAvgOptions,
) -> Result<(ModelParams, TrainReport)> {
    if spec.architecture != *server.global.architecture() {
        return Err(Error::Config(
            "session architecture differs from the server model".into(),
        ));
    }
    let started = Instant::now();
    let outcome = match &options.transport {
        TransportKind::InProc => {
            let (server_ends, client_ends): (Vec<_>, Vec<_>) = (0..clients.len())
                .map(|_| inproc_pair(options.timeout))
                .unzip();
            drive_session(server, clients, spec, options, server_ends, client_ends)?
        }
        TransportKind::Tcp(addr) => {
            let listener = TcpServer::bind(addr, options.timeout)?;
            let local = listener.local_addr()?;
            let timeout = options.timeout;
            std::thread::scope(|scope| {
                let handles: Vec<_> = clients
                    .iter_mut()
                    .map(|client| {
                        scope.spawn(move || {
                            let mut ch = TcpChannel::connect(local, timeout)?;
                            run_client(&mut ch, client)
                        })
                    })
                    .collect();
                let served = listener
                    .accept(handles.len())
                    .and_then(|chans| open_session(chans, spec))
                    .and_then(|mut links| {
                        let out = serve_fedavg(server, &mut links, options.max_rounds);
                        drop(links);
                        out
                    });
                join_clients(handles, served)
            })?
        }
    };
    let seconds = started.elapsed().as_secs_f64();
    let client_rmse = clients
        .iter()
        .map(|c| Ok((c.id, evaluate(&outcome.global, c, Partition::Test)?)))
        .collect::<Result<_>>()?;
    let report = TrainReport {
        strategy: Strategy::B,
        client_rmse,
        seconds,
        iterations: outcome.rounds as usize,
        best_iteration: outcome.best_round.map(|r| r as usize),
        history: outcome.history,
        traffic: outcome.traffic,
    };
    Ok((outcome.global, report))
}

fn drive_session<S: Channel, K: Channel>(
    server: &mut ServerState,
    clients: &mut [ClientState],
    spec: &SessionSpec,
    options: &FedAvgOptions,
    server_ends: Vec<S>,
    client_ends: Vec<K>,
) -> Result<FedAvgOutcome> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = clients
            .iter_mut()
            .zip(client_ends)
            .map(|(client, mut end)| scope.spawn(move || run_client(&mut end, client)))
            .collect();
        let served = open_session(server_ends, spec).and_then(|mut links| {
            let out = serve_fedavg(server, &mut links, options.max_rounds);
            drop(links);
            out
        });
        join_clients(handles, served)
    })
}

/// Waits for client threads; a server-side error takes precedence over the
/// follow-on disconnect errors it causes on the clients.
fn join_clients(
    handles: Vec<std::thread::ScopedJoinHandle<'_, Result<ModelParams>>>,
    served: Result<FedAvgOutcome>,
) -> Result<FedAvgOutcome> {
    let mut client_err = None;
    for h in handles {
        match h.join() {
            Ok(Ok(_)) => {}
            Ok(Err(e)) => {
                client_err.get_or_insert(e);
            }
            Err(_) => {
                client_err.get_or_insert(Error::Data("client thread panicked".into()));
            }
        }
    }
    let outcome = served?;
    match client_err {
        Some(e) => Err(e),
        None => Ok(outcome),
    }
}

/// RMSE of `model` on one client partition, in target units.
pub fn evaluate(model: &ModelParams, client: &ClientState, part: Partition) -> Result<f64> {
    let batch = client.partition(part)?;
    if batch.is_empty() {
        return Err(Error::Data(format!(
            "client {} has an empty {part:?} partition",
            client.id
        )));
    }
    let preds = nn::forward(model, batch.inputs())?;
    nn::rmse(&preds, batch.targets())
}

/// Measured minus predicted, in record order.
pub fn residuals(model: &ModelParams, client: &ClientState, part: Partition) -> Result<Vec<f64>> {
    let batch = client.partition(part)?;
    if batch.is_empty() {
        return Err(Error::Data(format!(
            "client {} has an empty {part:?} partition",
            client.id
        )));
    }
    let preds = nn::forward(model, batch.inputs())?;
    Ok(batch
        .targets()
        .iter()
        .zip(preds)
        .map(|(t, p)| t - p)
        .collect())
}

/// Strategy A: local training with epoch-level early stopping on validation MSE,
/// starting from `client.model`. Returns the best-epoch weights.
pub fn run_local_only(
    client: &mut ClientState,
    patience: usize,
    max_epochs: Option<usize>,
) -> Result<(ModelParams, TrainReport)> {
    if patience == 0 {
        return Err(Error::Config("patience must be >= 1".into()));
    }
    if client.data.train.is_empty() {
        return Err(Error::Data(format!(
            "client {} has no training data",
            client.id
        )));
    }
    let started = Instant::now();
    let mut best = client.model.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = None;
    let mut stale = 0;
    let mut history = Vec::new();
    let mut epoch = 0;
    while max_epochs.is_none_or(|m| epoch < m) {
        nn::train_epoch(
            &mut client.model,
            &mut client.optimizer,
            &client.data.train,
            &mut client.rng,
            0,
        )?;
        epoch += 1;
        let loss = nn::evaluate_mse(&client.model, &client.data.validation)?;
        history.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best = client.model.clone();
            best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= patience {
                break;
            }
        }
    }
    let seconds = started.elapsed().as_secs_f64();
    client.model = best.clone();
    let report = TrainReport {
        strategy: Strategy::A,
        client_rmse: vec![(client.id, evaluate(&best, client, Partition::Test)?)],
        seconds,
        iterations: epoch,
        best_iteration: best_epoch,
        history,
        traffic: Vec::new(),
    };
    Ok((best, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_weights, Architecture, Matrix};
    use crate::transport::InProcChannel;

    fn spec(arch: &Architecture) -> SessionSpec {
        SessionSpec {
            architecture: arch.clone(),
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 4,
            local_epochs: 3,
        }
    }

    fn batch(xs: &[f64], f: impl Fn(f64) -> f64) -> Batch {
        Batch::new(
            Matrix::new(xs.len(), 1, xs.to_vec()).unwrap(),
            xs.iter().map(|&x| f(x)).collect(),
        )
        .unwrap()
    }

    fn client(id: u32, offset: f64, seed: u64) -> ClientState {
        let arch = Architecture::power_curve();
        let xs: Vec<f64> = (0..40).map(|i| i as f64 / 40.0).collect();
        let f = move |x: f64| 2.0 * x * x + offset;
        let data = ClientData {
            train: batch(&xs, f),
            validation: batch(&[0.11, 0.52, 0.93], f),
            test: batch(&[0.2, 0.7], f),
        };
        ClientState::new(id, data, init_weights(&arch, 1), &spec(&arch), seed).unwrap()
    }

    fn update(id: u32, w: &[f64], n: u64) -> LocalUpdate {
        let arch = Architecture::new(1, vec![], crate::nn::Activation::Linear).unwrap();
        LocalUpdate {
            client_id: id,
            params: ModelParams::unflatten(&arch, w).unwrap(),
            n_train: n,
            val_loss: 0.0,
        }
    }

    #[test]
    fn weighted_mean_by_hand() {
        let agg =
            aggregate_weighted(&[update(0, &[0.0, 2.0], 1), update(1, &[4.0, 6.0], 3)]).unwrap();
        assert_eq!(agg.flatten(), vec![3.0, 5.0]);
    }

    #[test]
    fn aggregation_identities() {
        let single = update(4, &[0.1, -7.3], 17);
        assert_eq!(
            aggregate_weighted(std::slice::from_ref(&single)).unwrap(),
            single.params
        );
        let same = [
            update(0, &[0.3, 0.7], 5),
            update(1, &[0.3, 0.7], 9),
            update(2, &[0.3, 0.7], 1),
        ];
        let agg = aggregate_weighted(&same).unwrap().flatten();
        for (a, b) in agg.iter().zip([0.3, 0.7]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn aggregation_ignores_input_order() {
        let a = [
            update(2, &[1.5, -0.2], 7),
            update(0, &[0.1, 0.9], 3),
            update(1, &[-3.0, 2.2], 11),
        ];
        let b = [a[1].clone(), a[2].clone(), a[0].clone()];
        let fa = aggregate_weighted(&a).unwrap().flatten();
        let fb = aggregate_weighted(&b).unwrap().flatten();
        assert_eq!(
            fa.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            fb.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn aggregation_rejects_bad_updates() {
        assert!(aggregate_weighted(&[]).is_err());
        assert!(aggregate_weighted(&[update(0, &[1.0, 1.0], 0)]).is_err());
        assert!(
            aggregate_weighted(&[update(0, &[1.0, 1.0], 1), update(0, &[1.0, 1.0], 1)]).is_err()
        );
        let mut other = update(1, &[1.0, 1.0], 1);
        other.params = init_weights(&Architecture::power_curve(), 0);
        let err = aggregate_weighted(&[update(0, &[1.0, 1.0], 1), other]).unwrap_err();
        assert!(matches!(
            err,
            Error::Protocol {
                field: "weights",
                ..
            }
        ));
    }

    #[test]
    fn zero_epoch_update_returns_global() {
        let mut c = client(0, 0.0, 3);
        let g = init_weights(&Architecture::power_curve(), 77);
        let u = local_update(&mut c, &g, 0).unwrap();
        assert_eq!(u.params, g);
        assert_eq!(u.n_train, 40);
    }

    #[test]
    fn local_update_is_deterministic() {
        let g = init_weights(&Architecture::power_curve(), 77);
        let a = local_update(&mut client(0, 0.0, 3), &g, 3).unwrap();
        let b = local_update(&mut client(0, 0.0, 3), &g, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.val_loss.is_finite());
    }

    #[test]
    fn evaluate_and_residuals_agree() {
        let c = client(0, 0.5, 3);
        let m = init_weights(&Architecture::power_curve(), 5);
        let before = m.clone();
        let rmse = evaluate(&m, &c, Partition::Test).unwrap();
        let res = residuals(&m, &c, Partition::Test).unwrap();
        let rms = (res.iter().map(|r| r * r).sum::<f64>() / res.len() as f64).sqrt();
        assert!((rms - rmse).abs() < 1e-12);
        assert_eq!(m, before);
        assert!(evaluate(&m, &c, Partition::Unused).is_err());
    }

    #[test]
    fn one_client_round_yields_its_local_weights() {
        let arch = Architecture::power_curve();
        let g = init_weights(&arch, 1);
        let mut reference = client(0, 0.0, 9);
        let expected = local_update(&mut reference, &g, 3).unwrap().params;

        let mut server = ServerState::new(g, 5).unwrap();
        let mut clients = [client(0, 0.0, 9)];
        let opts = FedAvgOptions {
            max_rounds: 1,
            ..Default::default()
        };
        // Drive exactly one round by hand.
        let (s_end, c_end) = inproc_pair(opts.timeout);
        std::thread::scope(|scope| {
            let c = &mut clients[0];
            let h = scope.spawn(move || {
                let mut ch = c_end;
                run_client(&mut ch, c)
            });
            let mut links = open_session(vec![s_end], &spec(&arch)).unwrap();
            fedavg_round(&mut server, &mut links).unwrap();
            assert_eq!(server.global, expected);
            serve_fedavg(&mut server, &mut links, 0).unwrap();
            drop(links);
            h.join().unwrap().unwrap();
        });
    }

    #[test]
    fn fedavg_is_deterministic_and_restores_best() {
        let arch = Architecture::power_curve();
        let run = || {
            let mut server = ServerState::new(init_weights(&arch, 2), 2).unwrap();
            let mut clients = vec![client(0, 0.0, 1), client(1, 0.2, 2), client(2, 0.1, 3)];
            let opts = FedAvgOptions {
                max_rounds: 30,
                ..Default::default()
            };
            let (g, report) = run_fedavg(&mut server, &mut clients, &spec(&arch), &opts).unwrap();
            (g, report, server)
        };
        let (g1, r1, s1) = run();
        let (g2, r2, _) = run();
        assert_eq!(g1, g2);
        assert_eq!(r1.client_rmse, r2.client_rmse);
        let min = s1.history.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(s1.best_score, min);
        assert_eq!(&g1, s1.best_params());
        assert_eq!(r1.traffic.len(), 3);
    }

    /// A client that replies with a scripted validation loss and echoes the weights.
    fn scripted_client(mut ch: InProcChannel, id: u32, losses: Vec<f64>) -> Result<()> {
        ch.send(&RoundMessage::Init {
            round: 0,
            document: InitDocument::Hello { client_id: id },
        })?;
        ch.recv()?;
        let mut losses = losses.into_iter();
        loop {
            match ch.recv()? {
                RoundMessage::GlobalWeights { round, weights } => {
                    let mut w = weights;
                    w[0] += 1.0;
                    ch.send(&RoundMessage::ClientUpdate {
                        round,
                        weights: w,
                        n_train: 1,
                        val_loss: losses.next().unwrap_or(f64::INFINITY),
                    })?;
                }
                RoundMessage::Stop { .. } => return Ok(()),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn patience_one_stops_after_worse_round_and_returns_round_one() {
        let arch = Architecture::new(1, vec![], crate::nn::Activation::Linear).unwrap();
        let init = ModelParams::zeros(&arch);
        let mut server = ServerState::new(init, 1).unwrap();
        let (s_end, c_end) = inproc_pair(Duration::from_secs(5));
        let out = std::thread::scope(|scope| {
            // Loss of w_0 (ignored), w_1 = 1.0, w_2 = 2.0 (worse).
            let h = scope.spawn(move || scripted_client(c_end, 0, vec![9.0, 1.0, 2.0]));
            let mut links = open_session(vec![s_end], &spec(&arch)).unwrap();
            let out = serve_fedavg(&mut server, &mut links, 100).unwrap();
            drop(links);
            h.join().unwrap().unwrap();
            out
        });
        assert_eq!(out.best_round, Some(1));
        assert_eq!(out.history, vec![1.0, 2.0]);
        assert_eq!(out.global.flatten()[0], 1.0);
    }

    #[test]
    fn crashed_client_aborts_the_round() {
        let arch = Architecture::power_curve();
        let mut server = ServerState::new(init_weights(&arch, 0), 5).unwrap();
        let (s0, c0) = inproc_pair(Duration::from_secs(5));
        let (s1, c1) = inproc_pair(Duration::from_secs(5));
        let err = std::thread::scope(|scope| {
            let mut healthy = client(0, 0.0, 1);
            scope.spawn(move || {
                let mut ch = c0;
                let _ = run_client(&mut ch, &mut healthy);
            });
            scope.spawn(move || {
                let mut ch = c1;
                ch.send(&RoundMessage::Init {
                    round: 0,
                    document: InitDocument::Hello { client_id: 7 },
                })
                .unwrap();
                ch.recv().unwrap();
                ch.recv().unwrap();
                // dies before replying
            });
            let mut links = open_session(vec![s0, s1], &spec(&arch)).unwrap();
            serve_fedavg(&mut server, &mut links, 10).unwrap_err()
        });
        assert!(
            matches!(
                err,
                Error::RoundAborted {
                    client: 7,
                    round: 0,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn local_only_restores_best_epoch() {
        let mut c = client(0, 0.0, 4);
        let (best, report) = run_local_only(&mut c, 3, Some(40)).unwrap();
        let min = report.history.iter().cloned().fold(f64::INFINITY, f64::min);
        let best_val = nn::evaluate_mse(&best, &c.data.validation).unwrap();
        assert_eq!(best_val, min);
        assert_eq!(report.history[report.best_iteration.unwrap() - 1], min);
        assert!(report.iterations <= 40);
    }

    #[test]
    fn local_only_is_deterministic() {
        let (a, ra) = run_local_only(&mut client(0, 0.0, 4), 3, Some(20)).unwrap();
        let (b, rb) = run_local_only(&mut client(0, 0.0, 4), 3, Some(20)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.iterations, rb.iterations);
    }
}
