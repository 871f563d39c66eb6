//! One communication round of FedAvg: sample clients, run local mini-batch
//! SGD on each, aggregate by dataset-size weights. Clients inside a round
//! are independent; the reduction runs in ascending client-id order so the
//! result is bit-identical however the work is scheduled.

use rand::Rng;

use crate::data::{ImageSet, LabelSet};
use crate::error::{Error, Result};
use crate::nn::{self, NetworkSpec, ParameterVector};
use crate::partition::FederatedPartition;
use crate::rng::TrialStreams;

/// Protocol constants of one federation experiment.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FederationConfig {
    /// N: total clients.
    pub n_clients: usize,
    /// M: clients sampled per round.
    pub clients_per_round: usize,
    /// E: local epochs per round (before any decay policy).
    pub local_epochs: f64,
    /// B: local mini-batch size.
    pub batch_size: usize,
    /// eta: SGD learning rate, constant across rounds.
    pub learning_rate: f64,
    /// Communication-round cap.
    pub max_rounds: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            n_clients: 100,
            clients_per_round: 10,
            local_epochs: 5.0,
            batch_size: 10,
            learning_rate: 0.01,
            max_rounds: 500,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients < 1 {
            return Err(Error::Config("federation.n_clients must be >= 1".into()));
        }
        if self.clients_per_round < 1 || self.clients_per_round > self.n_clients {
            return Err(Error::Config(format!(
                "federation.clients_per_round must be in 1..={}, got {}",
                self.n_clients, self.clients_per_round
            )));
        }
        if self.local_epochs.is_nan() || self.local_epochs <= 0.0 {
            return Err(Error::Config("federation.local_epochs must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("federation.batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("federation.learning_rate must be positive".into()));
        }
        if self.max_rounds < 1 {
            return Err(Error::Config("federation.max_rounds must be >= 1".into()));
        }
        Ok(())
    }
}

/// What one client sends back: locally trained parameters and the size of
/// the dataset that produced them.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ParameterVector,
    pub sample_count: usize,
    pub steps_taken: usize,
    /// Mean mini-batch loss observed across the local steps.
    pub mean_loss: f64,
}

/// The plan for one round: which clients train, and for how many epochs.
#[derive(Debug, Clone)]
pub struct RoundPlan {
    /// 1-indexed communication round.
    pub round: usize,
    /// Selected client ids, ascending.
    pub selected: Vec<usize>,
    /// E_t, possibly fractional under epoch decay.
    pub epochs: f64,
}

/// Draws `m` distinct client ids from 0..n uniformly without replacement;
/// returns them sorted ascending.
pub fn sample_clients(rng: &mut impl Rng, n: usize, m: usize) -> Result<Vec<usize>> {
    if m < 1 || m > n {
        return Err(Error::Config(format!(
            "cannot sample {m} clients from a population of {n}"
        )));
    }
    // partial Fisher-Yates: after i swaps, ids[..i] is a uniform draw
    let mut ids: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = rng.random_range(i..n);
        ids.swap(i, j);
    }
    let mut selected = ids[..m].to_vec();
    selected.sort_unstable();
    Ok(selected)
}

/// Read-only view of one client's shard of the training data.
#[derive(Clone, Copy)]
pub struct ClientView<'a> {
    pub images: &'a ImageSet,
    pub labels: &'a LabelSet,
    pub indices: &'a [u32],
}

impl<'a> ClientView<'a> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Runs floor(E_t * ceil(|D_i|/B)) mini-batch SGD steps from a copy of
/// `global`. The sample order reshuffles at the start of every epoch pass
/// using the client's own stream; a fractional final pass simply stops
/// early. The broadcast model is never mutated.
pub fn local_train(
    global: &ParameterVector,
    client_id: usize,
    view: ClientView<'_>,
    epochs: f64,
    spec: &NetworkSpec,
    cfg: &FederationConfig,
    rng: &mut impl Rng,
) -> Result<ClientUpdate> {
    if view.is_empty() {
        return Err(Error::Config(format!("client {client_id} has no samples")));
    }
    let n = view.len();
    let b = cfg.batch_size.min(n);
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let steps = (epochs * batches_per_epoch as f64).floor() as usize;

    let mut params = global.clone();
    let mut order: Vec<u32> = view.indices.to_vec();
    let mut scratch = nn::Scratch::new(spec, b);
    let mut grad = vec![0.0; params.len()];
    let mut batch_labels = vec![0u8; b];
    let mut loss_sum = 0.0;

    for step in 0..steps {
        let pos = step % batches_per_epoch;
        if pos == 0 {
            shuffle(&mut order, rng);
        }
        let start = pos * cfg.batch_size;
        let end = (start + cfg.batch_size).min(n);
        let bsz = end - start;
        for (row, &sample) in order[start..end].iter().enumerate() {
            scratch
                .input_row(row)
                .copy_from_slice(view.images.image(sample as usize));
            batch_labels[row] = view.labels.label(sample as usize);
        }
        let loss = nn::loss_grad_into(
            params.as_slice(),
            spec,
            &batch_labels[..bsz],
            &mut scratch,
            &mut grad,
        )?;
        // the backward pass only fills grad up to the batch it saw; the
        // buffer is rewritten in full every step
        nn::sgd_step_inplace(&mut params, &grad, cfg.learning_rate);
        loss_sum += loss;
    }

    let mean_loss = if steps > 0 { loss_sum / steps as f64 } else { 0.0 };
    Ok(ClientUpdate {
        client_id,
        params,
        sample_count: n,
        steps_taken: steps,
        mean_loss,
    })
}

fn shuffle(items: &mut [u32], rng: &mut impl Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

fn weights_of(updates: &[&ClientUpdate]) -> Vec<f64> {
    let total: usize = updates.iter().map(|u| u.sample_count).sum();
    let total = total as f64;
    updates
        .iter()
        .map(|u| u.sample_count as f64 / total)
        .collect()
}

/// Dataset-size weighted mean of the client parameters, summed in
/// ascending client-id order. Weights are |D_i| / sum over participants.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<ParameterVector> {
    let ordered = ordered_refs(updates)?;
    let weights = weights_of(&ordered);
    let len = ordered[0].params.len();
    let mut acc = ParameterVector::zeros(len);
    for (u, &w) in ordered.iter().zip(&weights) {
        acc.axpy(w, &u.params)?;
    }
    Ok(acc)
}

/// The same aggregation written as a pseudo-gradient step: w - sum of
/// weighted client deltas. Algebraically identical to [`aggregate`];
/// kept as the second route for the equivalence checks.
pub fn aggregate_delta(base: &ParameterVector, updates: &[ClientUpdate]) -> Result<ParameterVector> {
    let ordered = ordered_refs(updates)?;
    let weights = weights_of(&ordered);
    let len = base.len();
    let mut step = ParameterVector::zeros(len);
    for (u, &w) in ordered.iter().zip(&weights) {
        if u.params.len() != len {
            return Err(Error::Shape(format!(
                "client {} params length {} does not match base {}",
                u.client_id,
                u.params.len(),
                len
            )));
        }
        // delta_i = base - params_i, accumulated with weight w
        for (s, (&b, &p)) in step
            .as_mut_slice()
            .iter_mut()
            .zip(base.as_slice().iter().zip(u.params.as_slice()))
        {
            *s += w * (b - p);
        }
    }
    let mut out = base.clone();
    out.axpy(-1.0, &step)?;
    Ok(out)
}

fn ordered_refs(updates: &[ClientUpdate]) -> Result<Vec<&ClientUpdate>> {
    if updates.is_empty() {
        return Err(Error::Config("aggregate requires at least one update".into()));
    }
    let len = updates[0].params.len();
    for u in updates {
        if u.params.len() != len {
            return Err(Error::Shape(format!(
                "client {} params length {} does not match {}",
                u.client_id,
                u.params.len(),
                len
            )));
        }
        if u.sample_count == 0 {
            return Err(Error::Config(format!(
                "client {} reports zero samples",
                u.client_id
            )));
        }
    }
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    Ok(ordered)
}

/// Per-client bookkeeping from one round.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ClientRoundStat {
    pub client_id: usize,
    pub steps: usize,
    pub samples: usize,
    pub mean_loss: f64,
}

/// Result of one full communication round.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub model: ParameterVector,
    pub client_stats: Vec<ClientRoundStat>,
    /// Sample-count weighted mean of the per-client training losses.
    pub mean_train_loss: f64,
}

#[allow(clippy::too_many_arguments)]
fn client_update(
    global: &ParameterVector,
    plan: &RoundPlan,
    partition: &FederatedPartition,
    images: &ImageSet,
    labels: &LabelSet,
    spec: &NetworkSpec,
    cfg: &FederationConfig,
    streams: &TrialStreams,
    client_id: usize,
) -> Result<ClientUpdate> {
    let view = ClientView {
        images,
        labels,
        indices: partition.client(client_id),
    };
    let mut rng = streams.client_rng(plan.round, client_id);
    local_train(global, client_id, view, plan.epochs, spec, cfg, &mut rng)
}

fn finish_round(updates: Vec<ClientUpdate>) -> Result<RoundOutcome> {
    let model = aggregate(&updates)?;
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    let total: usize = ordered.iter().map(|u| u.sample_count).sum();
    let mean_train_loss = ordered
        .iter()
        .map(|u| u.mean_loss * (u.sample_count as f64 / total as f64))
        .sum();
    let client_stats = ordered
        .iter()
        .map(|u| ClientRoundStat {
            client_id: u.client_id,
            steps: u.steps_taken,
            samples: u.sample_count,
            mean_loss: u.mean_loss,
        })
        .collect();
    Ok(RoundOutcome {
        model,
        client_stats,
        mean_train_loss,
    })
}

fn check_plan(plan: &RoundPlan, partition: &FederatedPartition) -> Result<()> {
    for &c in &plan.selected {
        if c >= partition.n_clients() {
            return Err(Error::Config(format!(
                "round plan selects client {c}, partition has {}",
                partition.n_clients()
            )));
        }
    }
    Ok(())
}

/// Executes one round: local training for every selected client, then the
/// weighted aggregate. With the `parallel` feature clients run on rayon;
/// the result is bit-identical to [`run_round_sequential`].
#[allow(clippy::too_many_arguments)]
pub fn run_round(
    global: &ParameterVector,
    plan: &RoundPlan,
    partition: &FederatedPartition,
    images: &ImageSet,
    labels: &LabelSet,
    spec: &NetworkSpec,
    cfg: &FederationConfig,
    streams: &TrialStreams,
) -> Result<RoundOutcome> {
    check_plan(plan, partition)?;
    #[cfg(feature = "parallel")]
    let updates: Result<Vec<ClientUpdate>> = {
        use rayon::prelude::*;
        plan.selected
            .par_iter()
            .map(|&c| client_update(global, plan, partition, images, labels, spec, cfg, streams, c))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let updates: Result<Vec<ClientUpdate>> = plan
        .selected
        .iter()
        .map(|&c| client_update(global, plan, partition, images, labels, spec, cfg, streams, c))
        .collect();
    finish_round(updates?)
}

/// Always-available sequential execution of one round.
#[allow(clippy::too_many_arguments)]
pub fn run_round_sequential(
    global: &ParameterVector,
    plan: &RoundPlan,
    partition: &FederatedPartition,
    images: &ImageSet,
    labels: &LabelSet,
    spec: &NetworkSpec,
    cfg: &FederationConfig,
    streams: &TrialStreams,
) -> Result<RoundOutcome> {
    check_plan(plan, partition)?;
    let updates: Result<Vec<ClientUpdate>> = plan
        .selected
        .iter()
        .map(|&c| client_update(global, plan, partition, images, labels, spec, cfg, streams, c))
        .collect();
    finish_round(updates?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, Gradient, MiniBatch};
    use crate::partition::iid_partition;
    use crate::rng;

    fn update(id: usize, count: usize, params: &[f64]) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            params: ParameterVector::from_values(params.to_vec()),
            sample_count: count,
            steps_taken: 1,
            mean_loss: 0.0,
        }
    }

    /// Tiny deterministic dataset: 30 samples, 4 pixels, 3 classes.
    fn toy_data() -> (ImageSet, LabelSet, NetworkSpec) {
        let n = 30;
        let dim = 4;
        let mut pixels = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = (i % 3) as u8;
            for p in 0..dim {
                let v = ((i * 7 + p * 13) % 29) as f64 / 29.0;
                pixels.push(if p == class as usize { 1.0 } else { v * 0.3 });
            }
            labels.push(class);
        }
        let bytes: Vec<u8> = pixels.iter().map(|&v| (v * 255.0) as u8).collect();
        let images = crate::synth::image_set_from_bytes(n, 2, 2, &bytes).unwrap();
        let labels = LabelSet::from_labels(labels).unwrap();
        let spec = NetworkSpec::new(vec![4, 6, 3]).unwrap();
        (images, labels, spec)
    }

    #[test]
    fn sampling_is_exhaustive_when_m_equals_n() {
        let mut rng = rng::stream(1, &[0]);
        for _ in 0..5 {
            let s = sample_clients(&mut rng, 10, 10).unwrap();
            assert_eq!(s, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn sampling_is_deterministic_and_sorted() {
        let mut a = rng::stream(42, &[7]);
        let mut b = rng::stream(42, &[7]);
        let sa = sample_clients(&mut a, 100, 10).unwrap();
        let sb = sample_clients(&mut b, 100, 10).unwrap();
        assert_eq!(sa, sb);
        assert!(sa.windows(2).all(|w| w[0] < w[1]));
        assert!(sa.iter().all(|&c| c < 100));
    }

    #[test]
    fn sampling_m_above_n_is_a_config_error() {
        let mut rng = rng::stream(1, &[1]);
        assert!(matches!(
            sample_clients(&mut rng, 5, 6),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn sampling_frequencies_are_uniform() {
        // Monte-Carlo oracle: 50k draws of 10 from 100, every client should
        // be picked with frequency 0.10 +- 0.01
        let mut rng = rng::stream(2024, &[0]);
        let mut counts = vec![0usize; 100];
        let draws = 50_000;
        for _ in 0..draws {
            for c in sample_clients(&mut rng, 100, 10).unwrap() {
                counts[c] += 1;
            }
        }
        for (c, &k) in counts.iter().enumerate() {
            let f = k as f64 / draws as f64;
            assert!((f - 0.10).abs() < 0.01, "client {c} frequency {f}");
        }
    }

    #[test]
    fn aggregate_weighted_mean_cases() {
        // single update passes through exactly
        let single = vec![update(3, 50, &[0.25, -1.5])];
        assert_eq!(aggregate(&single).unwrap().as_slice(), &[0.25, -1.5]);

        // equal sizes average symmetrically
        let pair = vec![update(0, 10, &[1.0, 3.0]), update(1, 10, &[3.0, 5.0])];
        assert_eq!(aggregate(&pair).unwrap().as_slice(), &[2.0, 4.0]);

        // sizes 100 and 300 with params [1] and [5] -> [4]
        let skewed = vec![update(0, 100, &[1.0]), update(1, 300, &[5.0])];
        assert_eq!(aggregate(&skewed).unwrap().as_slice(), &[4.0]);
    }

    #[test]
    fn aggregate_rejects_empty_and_mismatched() {
        assert!(matches!(aggregate(&[]), Err(Error::Config(_))));
        let bad = vec![update(0, 1, &[1.0]), update(1, 1, &[1.0, 2.0])];
        assert!(matches!(aggregate(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn aggregate_orders_by_client_id() {
        let a = vec![
            update(2, 100, &[1.0]),
            update(0, 200, &[2.0]),
            update(1, 300, &[3.0]),
        ];
        let mut b = a.clone();
        b.reverse();
        // same multiset of updates -> bit-identical result
        assert_eq!(
            aggregate(&a).unwrap().as_slice(),
            aggregate(&b).unwrap().as_slice()
        );
    }

    #[test]
    fn aggregate_idempotent_on_identical_params() {
        let params = [0.7, -2.3, 11.0];
        let copies: Vec<ClientUpdate> =
            (0..5).map(|i| update(i, 60 + i * 3, &params)).collect();
        let out = aggregate(&copies).unwrap();
        for (o, p) in out.as_slice().iter().zip(&params) {
            assert!((o - p).abs() <= 1e-15 * p.abs());
        }
    }

    #[test]
    fn delta_form_matches_weighted_mean_on_dyadic_inputs() {
        // dyadic rationals make every operation exact, so the two
        // algebraic routes must agree bit for bit
        let base = ParameterVector::from_values(vec![2.0, -4.0, 0.5]);
        let updates = vec![
            update(0, 100, &[1.0, 8.0, 0.25]),
            update(1, 300, &[5.0, -2.0, 0.75]),
        ];
        let eq3 = aggregate(&updates).unwrap();
        let eq4 = aggregate_delta(&base, &updates).unwrap();
        assert_eq!(eq3.as_slice(), eq4.as_slice());
        assert_eq!(eq3.as_slice(), &[4.0, 0.5, 0.625]);
    }

    #[test]
    fn delta_form_agrees_tightly_on_random_inputs() {
        let spec = NetworkSpec::new(vec![5, 4, 2]).unwrap();
        let base = init_params(&spec, 1);
        let updates: Vec<ClientUpdate> = (0..3)
            .map(|i| ClientUpdate {
                client_id: i,
                params: init_params(&spec, 10 + i as u64),
                sample_count: 100 * (i + 1),
                steps_taken: 1,
                mean_loss: 0.0,
            })
            .collect();
        let eq3 = aggregate(&updates).unwrap();
        let eq4 = aggregate_delta(&base, &updates).unwrap();
        for (&a, &b) in eq3.as_slice().iter().zip(eq4.as_slice()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0));
        }
    }

    #[test]
    fn local_train_step_counts() {
        let (images, labels, spec) = toy_data();
        let part = iid_partition(30, 1, 0).unwrap();
        let global = init_params(&spec, 5);
        let cfg = FederationConfig {
            n_clients: 1,
            clients_per_round: 1,
            batch_size: 10,
            ..FederationConfig::default()
        };
        let view = ClientView {
            images: &images,
            labels: &labels,
            indices: part.client(0),
        };
        // 30 samples, B=10 -> 3 batches per epoch
        for (epochs, expect) in [(1.0, 3), (2.5, 7), (5.0, 15), (0.5, 1)] {
            let mut rng = rng::stream(9, &[0]);
            let u = local_train(&global, 0, view, epochs, &spec, &cfg, &mut rng).unwrap();
            assert_eq!(u.steps_taken, expect, "epochs={epochs}");
            assert_eq!(u.sample_count, 30);
        }
    }

    #[test]
    fn local_train_fractional_epoch_rule_at_mnist_shape() {
        // E_t=2.5, |D_i|=600, B=10 -> floor(2.5 * 60) = 150 steps
        let n = 600;
        let bytes = vec![128u8; n * 4];
        let images = crate::synth::image_set_from_bytes(n, 2, 2, &bytes).unwrap();
        let labels = LabelSet::from_labels(vec![1; n]).unwrap();
        let spec = NetworkSpec::new(vec![4, 3, 3]).unwrap();
        let part = iid_partition(n, 1, 0).unwrap();
        let cfg = FederationConfig {
            n_clients: 1,
            clients_per_round: 1,
            batch_size: 10,
            ..FederationConfig::default()
        };
        let global = init_params(&spec, 1);
        let mut rng = rng::stream(1, &[2]);
        let view = ClientView {
            images: &images,
            labels: &labels,
            indices: part.client(0),
        };
        let u = local_train(&global, 0, view, 2.5, &spec, &cfg, &mut rng).unwrap();
        assert_eq!(u.steps_taken, 150);
    }

    #[test]
    fn local_train_does_not_mutate_the_broadcast_model() {
        let (images, labels, spec) = toy_data();
        let part = iid_partition(30, 2, 1).unwrap();
        let global = init_params(&spec, 77);
        let snapshot = global.clone();
        let cfg = FederationConfig {
            n_clients: 2,
            clients_per_round: 2,
            batch_size: 4,
            ..FederationConfig::default()
        };
        let view = ClientView {
            images: &images,
            labels: &labels,
            indices: part.client(0),
        };
        let mut rng = rng::stream(3, &[0]);
        let u = local_train(&global, 0, view, 2.0, &spec, &cfg, &mut rng).unwrap();
        assert_eq!(global.as_slice(), snapshot.as_slice());
        assert_ne!(u.params.as_slice(), global.as_slice());
        assert!(u.params.is_finite());
    }

    #[test]
    fn one_full_batch_step_matches_hand_composition() {
        // client runs exactly one full-batch step; compose loss_and_grad +
        // sgd_step by hand and compare the aggregate of two such clients
        let (images, labels, spec) = toy_data();
        let part = iid_partition(30, 2, 4).unwrap();
        let global = init_params(&spec, 123);
        let cfg = FederationConfig {
            n_clients: 2,
            clients_per_round: 2,
            batch_size: 15, // each client holds 15 samples -> 1 batch/epoch
            learning_rate: 0.05,
            ..FederationConfig::default()
        };
        let streams = TrialStreams::new(rng::trial_seed(500, 0));
        let plan = RoundPlan {
            round: 1,
            selected: vec![0, 1],
            epochs: 1.0,
        };
        let outcome = run_round(
            &global, &plan, &part, &images, &labels, &spec, &cfg, &streams,
        )
        .unwrap();

        // hand-compose: for each client, gather its (shuffled) full batch,
        // one gradient step, then the equal-size weighted mean
        let dim = images.dim();
        let mut locals = Vec::new();
        for c in 0..2 {
            let mut order: Vec<u32> = part.client(c).to_vec();
            let mut rng = streams.client_rng(1, c);
            shuffle(&mut order, &mut rng);
            let mut px = Vec::new();
            let mut ls = Vec::new();
            for &i in &order {
                px.extend_from_slice(images.image(i as usize));
                ls.push(labels.label(i as usize));
            }
            let batch = MiniBatch::new(px, ls, dim).unwrap();
            let (_, grad) = nn::loss_and_grad(&global, &spec, &batch).unwrap();
            locals.push(nn::sgd_step(&global, &grad, 0.05).unwrap());
        }
        let mut expect = ParameterVector::zeros(global.len());
        expect.axpy(0.5, &locals[0]).unwrap();
        expect.axpy(0.5, &locals[1]).unwrap();

        assert_eq!(outcome.model.as_slice(), expect.as_slice());
    }

    #[test]
    fn zero_learning_rate_leaves_the_model_in_place() {
        let (images, labels, spec) = toy_data();
        let part = iid_partition(30, 3, 2).unwrap();
        let global = init_params(&spec, 9);
        let mut cfg = FederationConfig {
            n_clients: 3,
            clients_per_round: 3,
            batch_size: 5,
            ..FederationConfig::default()
        };
        cfg.learning_rate = 0.0; // bypass validate(): exercising the math
        let streams = TrialStreams::new(rng::trial_seed(7, 0));
        let plan = RoundPlan {
            round: 1,
            selected: vec![0, 1, 2],
            epochs: 2.0,
        };
        let out = run_round(
            &global, &plan, &part, &images, &labels, &spec, &cfg, &streams,
        )
        .unwrap();
        for (&a, &b) in out.model.as_slice().iter().zip(global.as_slice()) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
        for s in &out.client_stats {
            assert_eq!(s.steps, 4); // 10 samples each, 2 epochs x 2 batches of 5
        }
    }

    #[test]
    fn single_client_round_returns_that_clients_params() {
        let (images, labels, spec) = toy_data();
        let part = iid_partition(30, 2, 8).unwrap();
        let global = init_params(&spec, 2);
        let cfg = FederationConfig {
            n_clients: 2,
            clients_per_round: 1,
            batch_size: 5,
            ..FederationConfig::default()
        };
        let streams = TrialStreams::new(rng::trial_seed(11, 0));
        let plan = RoundPlan {
            round: 3,
            selected: vec![1],
            epochs: 1.0,
        };
        let out = run_round(
            &global, &plan, &part, &images, &labels, &spec, &cfg, &streams,
        )
        .unwrap();
        let view = ClientView {
            images: &images,
            labels: &labels,
            indices: part.client(1),
        };
        let mut rng = streams.client_rng(3, 1);
        let direct = local_train(&global, 1, view, 1.0, &spec, &cfg, &mut rng).unwrap();
        assert_eq!(out.model.as_slice(), direct.params.as_slice());
    }

    #[test]
    fn parallel_and_sequential_rounds_are_bit_identical() {
        let (images, labels, spec) = toy_data();
        let part = iid_partition(30, 5, 3).unwrap();
        let global = init_params(&spec, 40);
        let cfg = FederationConfig {
            n_clients: 5,
            clients_per_round: 4,
            batch_size: 3,
            ..FederationConfig::default()
        };
        let streams = TrialStreams::new(rng::trial_seed(99, 1));
        let plan = RoundPlan {
            round: 2,
            selected: vec![0, 2, 3, 4],
            epochs: 1.5,
        };
        let par = run_round(
            &global, &plan, &part, &images, &labels, &spec, &cfg, &streams,
        )
        .unwrap();
        let seq = run_round_sequential(
            &global, &plan, &part, &images, &labels, &spec, &cfg, &streams,
        )
        .unwrap();
        assert_eq!(par.model.as_slice(), seq.model.as_slice());
        assert_eq!(par.mean_train_loss.to_bits(), seq.mean_train_loss.to_bits());
    }

    #[test]
    fn eq4_gradient_step_view_of_a_round() {
        // aggregate == base - weighted deltas, on a real round's updates
        let (images, labels, spec) = toy_data();
        let part = iid_partition(30, 3, 6).unwrap();
        let global = init_params(&spec, 55);
        let cfg = FederationConfig {
            n_clients: 3,
            clients_per_round: 3,
            batch_size: 5,
            ..FederationConfig::default()
        };
        let streams = TrialStreams::new(rng::trial_seed(4, 2));
        let updates: Vec<ClientUpdate> = (0..3)
            .map(|c| {
                let view = ClientView {
                    images: &images,
                    labels: &labels,
                    indices: part.client(c),
                };
                let mut rng = streams.client_rng(1, c);
                local_train(&global, c, view, 1.0, &spec, &cfg, &mut rng).unwrap()
            })
            .collect();
        let eq3 = aggregate(&updates).unwrap();
        let eq4 = aggregate_delta(&global, &updates).unwrap();
        for (&a, &b) in eq3.as_slice().iter().zip(eq4.as_slice()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0));
        }
    }

    #[test]
    fn empty_client_dataset_is_a_config_error() {
        let (images, labels, spec) = toy_data();
        let global = init_params(&spec, 1);
        let cfg = FederationConfig::default();
        let view = ClientView {
            images: &images,
            labels: &labels,
            indices: &[],
        };
        let mut rng = rng::stream(0, &[0]);
        assert!(matches!(
            local_train(&global, 0, view, 1.0, &spec, &cfg, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(FederationConfig::default().validate().is_ok());
        let mut bad = FederationConfig::default();
        bad.clients_per_round = 101;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad2 = FederationConfig::default();
        bad2.learning_rate = 0.0;
        assert!(matches!(bad2.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn gradient_type_roundtrip() {
        let g = Gradient::zeros(4);
        assert_eq!(g.len(), 4);
        assert!(!g.is_empty());
    }
}
