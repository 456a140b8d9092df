"""Structure learner: edge beliefs, masked functional models, three-phase loop.

The learner maintains structural logits `gamma` (sigmoid gives per-edge
belief) and a stack of per-variable masked MLPs `theta`.  Training alternates:

* Phase 1 fits theta by SGD on observational batches under graph
  configurations sampled from the current beliefs (input dropout).
* Phase 2 applies an intervention inside the black box, optionally predicts
  its unknown target, and scores sampled configurations on interventional
  batches using the frozen end-of-phase-1 snapshot of theta.
* Phase 3 converts those scores into a score-function gradient estimate for
  gamma, adds acyclicity and sparsity regularizers, and takes an Adam step.

The loop stops early once every free edge belief has saturated outside the
configured band around 0 and 1.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, asdict
from typing import Callable, Optional

import numpy as np

from . import graphs, nnet
from .scm import (GroundTruthScm, InterventionError, ancestral_sample,
                  apply_soft_intervention, retract_intervention)

# Logit magnitude used for clamped (known) edges: sigma is exactly 1e-6 away
# from its forced value, and clamped entries are excluded from every update.
CLAMP_GAMMA = float(np.log((1.0 - 1e-6) / 1e-6))

ESTIMATORS = ("likelihood_softmax", "nll_weighted")
PREDICT_MODES = ("predicted", "leaked", "random", "none")

PHASE1_CHUNK = 32  # observational batches drawn per black-box call


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


# ---------------------------------------------------------------------------
# beliefs
# ---------------------------------------------------------------------------

@dataclass
class EdgeBeliefs:
    """Structural logits gamma plus an optional clamp matrix.

    clamp[i, j] is +1 / -1 for a known present / absent edge (j -> i), 0 for
    a free entry.  The diagonal always behaves as belief zero.
    """

    gamma: np.ndarray
    clamp: np.ndarray

    @property
    def m(self) -> int:
        return self.gamma.shape[0]

    def edge_probs(self) -> np.ndarray:
        p = sigmoid(self.gamma)
        np.fill_diagonal(p, 0.0)
        return p

    def free_mask(self) -> np.ndarray:
        return graphs.off_diagonal_mask(self.m) & (self.clamp == 0)

    def saturated(self, band: tuple[float, float]) -> bool:
        lo, hi = band
        p = self.edge_probs()[self.free_mask()]
        return bool(np.all((p <= lo) | (p >= hi)))

    def copy(self) -> "EdgeBeliefs":
        return EdgeBeliefs(self.gamma.copy(), self.clamp.copy())


def init_beliefs(m: int, clamp: Optional[np.ndarray] = None) -> EdgeBeliefs:
    """Beliefs with every free off-diagonal entry at sigma = 0.5 (logit 0)."""
    gamma = np.zeros((m, m))
    if clamp is None:
        clamp = np.zeros((m, m), dtype=np.int8)
    else:
        clamp = np.asarray(clamp, dtype=np.int8).copy()
        if clamp.shape != (m, m):
            raise ValueError("clamp matrix shape mismatch")
        np.fill_diagonal(clamp, 0)
        gamma[clamp == 1] = CLAMP_GAMMA
        gamma[clamp == -1] = -CLAMP_GAMMA
    return EdgeBeliefs(gamma, clamp)


def sample_configuration(beliefs: EdgeBeliefs, rng: np.random.Generator) -> np.ndarray:
    """One Bernoulli draw per free entry; clamped entries are deterministic."""
    p = beliefs.edge_probs()
    config = rng.random(p.shape) < p
    config[beliefs.clamp == 1] = True
    config[beliefs.clamp == -1] = False
    np.fill_diagonal(config, False)
    return config


def _sample_configurations(beliefs: EdgeBeliefs, count: int,
                           rng: np.random.Generator) -> np.ndarray:
    p = beliefs.edge_probs()
    configs = rng.random((count,) + p.shape) < p
    configs[:, beliefs.clamp == 1] = True
    configs[:, beliefs.clamp == -1] = False
    idx = np.arange(beliefs.m)
    configs[:, idx, idx] = False
    return configs


def threshold_graph(beliefs: EdgeBeliefs, tau: float = 0.5) -> np.ndarray:
    """Edge iff sigma(gamma) strictly exceeds tau (a tie is a non-edge)."""
    return beliefs.edge_probs() > tau


# ---------------------------------------------------------------------------
# functional model
# ---------------------------------------------------------------------------

class FunctionalModel:
    """Per-variable conditional models plus optimizer state and slow snapshot."""

    def __init__(self, stack: nnet.MlpStack, lr: float, beta1: float):
        self.stack = stack
        self.opt = nnet.AdamState(lr=lr, beta1=beta1)
        self.grad_buffer = np.zeros_like(stack.flat)
        self.slow: nnet.MlpStack = stack.copy()
        self.phase1_trace: list[float] = []

    @property
    def m(self) -> int:
        return self.stack.m


def init_functional_model(m: int, n_categories, rng: np.random.Generator,
                          lr: float = 5e-2, beta1: float = 0.9) -> FunctionalModel:
    n_categories = np.broadcast_to(np.asarray(n_categories, dtype=int), (m,))
    stack = nnet.MlpStack(m, n_categories).init_random(rng, gain=1.0)
    return FunctionalModel(stack, lr=lr, beta1=beta1)


@dataclass
class SampleCounters:
    interventions: int = 0
    samples_observational: int = 0
    samples_interventional: int = 0
    configurations: int = 0

    @property
    def samples(self) -> int:
        return self.samples_observational + self.samples_interventional

    def as_dict(self) -> dict:
        return {"interventions": self.interventions,
                "samples": self.samples,
                "samples_observational": self.samples_observational,
                "samples_interventional": self.samples_interventional,
                "configurations": self.configurations}


# ---------------------------------------------------------------------------
# Phase 1
# ---------------------------------------------------------------------------

def phase1_fit(model: FunctionalModel, beliefs: EdgeBeliefs,
               blackbox: GroundTruthScm, steps: int, batch_size: int,
               rng: np.random.Generator,
               sample_rng: Optional[np.random.Generator] = None,
               dropout: bool = True,
               counters: Optional[SampleCounters] = None) -> FunctionalModel:
    """Fit theta on observational batches under sampled configurations.

    Each step draws a fresh batch and one configuration, then Adam-minimizes
    the summed per-variable NLL.  With `dropout` off the configuration is the
    complete graph (all parents visible), which is the ablation baseline.
    Refreshes the slow snapshot on exit.
    """
    if blackbox.intervention is not None:
        raise InterventionError("phase 1 requires an unintervened black box")
    sample_rng = rng if sample_rng is None else sample_rng
    stack = model.stack
    all_ones = ~np.eye(stack.m, dtype=bool)
    trace = []
    done = 0
    while done < steps:
        chunk = min(PHASE1_CHUNK, steps - done)
        values_chunk = ancestral_sample(blackbox, batch_size * chunk, sample_rng)
        xoh_chunk = nnet.one_hot_batch(values_chunk, stack.n_categories, stack.n_max)
        for s in range(chunk):
            sl = slice(s * batch_size, (s + 1) * batch_size)
            config = sample_configuration(beliefs, rng) if dropout else all_ones
            per_var = stack.loss_and_grad(xoh_chunk[sl], values_chunk[sl],
                                          config, model.grad_buffer)
            nnet.adam_step(model.opt, {"theta": stack.flat},
                           {"theta": model.grad_buffer})
            trace.append(float(per_var.sum()))
        done += chunk
        if counters is not None:
            counters.samples_observational += batch_size * chunk
            counters.configurations += chunk
    model.phase1_trace = trace
    model.slow = stack.copy()
    return model


def measure_per_variable_nll(model: FunctionalModel, beliefs: EdgeBeliefs,
                             blackbox: GroundTruthScm, n_batches: int,
                             n_configs: int, batch_size: int,
                             rng: np.random.Generator,
                             sample_rng: Optional[np.random.Generator] = None,
                             counters: Optional[SampleCounters] = None,
                             interventional: bool = True) -> np.ndarray:
    """Sum of batch-mean per-variable NLL over n_batches x n_configs draws.

    Evaluated under the slow snapshot; no parameters change.
    """
    sample_rng = rng if sample_rng is None else sample_rng
    slow = model.slow
    configs = _sample_configurations(beliefs, n_configs, rng)
    values = ancestral_sample(blackbox, n_batches * batch_size, sample_rng)
    xoh = nnet.one_hot_batch(values, slow.n_categories, slow.n_max)
    total = slow.per_variable_nll(xoh, values, configs).sum(axis=0) * n_batches
    if counters is not None:
        if interventional:
            counters.samples_interventional += n_batches * batch_size
        else:
            counters.samples_observational += n_batches * batch_size
        counters.configurations += n_batches * n_configs
    return total


# ---------------------------------------------------------------------------
# Phase 2
# ---------------------------------------------------------------------------

def predict_intervention_target(model: FunctionalModel, beliefs: EdgeBeliefs,
                                blackbox: GroundTruthScm, n_batches: int,
                                n_configs: int, batch_size: int,
                                rng: np.random.Generator,
                                sample_rng: Optional[np.random.Generator] = None,
                                baseline: Optional[np.ndarray] = None,
                                leaked: Optional[int] = None,
                                counters: Optional[SampleCounters] = None) -> int:
    """Guess which variable the active intervention hit.

    The variable whose accumulated interventional NLL under the slow snapshot
    is worst (optionally relative to an observational baseline) is returned;
    ties break toward the lowest index.  A leaked target short-circuits all
    computation.
    """
    if leaked is not None:
        return leaked
    if blackbox.intervention is None:
        raise InterventionError("prediction requires an active intervention")
    total = measure_per_variable_nll(model, beliefs, blackbox, n_batches,
                                     n_configs, batch_size, rng, sample_rng,
                                     counters=counters)
    if baseline is not None:
        total = total - baseline
    return int(np.argmax(total))


@dataclass
class ScoreRecord:
    """One configuration's per-variable score on one interventional batch."""

    config: np.ndarray
    per_variable_nll: np.ndarray
    excluded: Optional[int]


def aggregate_records(records: list[ScoreRecord], n_configs: int) -> list[ScoreRecord]:
    """Collapse batch-major records onto their shared configurations.

    Summing each configuration's batch NLLs yields one record per
    configuration whose score is the negative log-likelihood of the whole
    scoring window, which is what the posterior weighting should compare.
    """
    if len(records) % n_configs:
        raise ValueError("record count is not a multiple of n_configs")
    n_batches = len(records) // n_configs
    out: list[ScoreRecord] = []
    for c in range(n_configs):
        group = [records[b * n_configs + c] for b in range(n_batches)]
        total = np.sum([r.per_variable_nll for r in group], axis=0)
        out.append(ScoreRecord(group[0].config, total, group[0].excluded))
    return out


def phase2_score(model: FunctionalModel, beliefs: EdgeBeliefs,
                 blackbox: GroundTruthScm, target: Optional[int],
                 n_batches: int, n_configs: int, batch_size: int,
                 rng: np.random.Generator,
                 sample_rng: Optional[np.random.Generator] = None,
                 counters: Optional[SampleCounters] = None) -> list[ScoreRecord]:
    """Score n_batches x n_configs configurations on interventional data.

    Uses the slow snapshot only; functional parameters do not change.  One
    shared set of n_configs configurations is scored against every batch;
    records come out batch-major, so records [b*n_configs + c] for all b
    share configuration c.  The recorded per-variable NLL is the batch total
    (negative log-likelihood of the whole batch), so softmax weighting in
    the gamma estimator acts as a posterior over configurations.  The
    (believed) intervened variable is flagged excluded on every record.
    """
    sample_rng = rng if sample_rng is None else sample_rng
    slow = model.slow
    configs = _sample_configurations(beliefs, n_configs, rng)
    values = ancestral_sample(blackbox, n_batches * batch_size, sample_rng)
    xoh = nnet.one_hot_batch(values, slow.n_categories, slow.n_max)
    nll = slow.per_variable_nll(xoh, values, configs, per_sample=True)
    batch_nll = nll.reshape(n_configs, slow.m, n_batches, batch_size).sum(axis=-1)
    records: list[ScoreRecord] = []
    for b in range(n_batches):
        for c in range(n_configs):
            records.append(ScoreRecord(configs[c], batch_nll[c, :, b], target))
    if counters is not None:
        counters.samples_interventional += n_batches * batch_size
        counters.configurations += n_batches * n_configs
    return records


# ---------------------------------------------------------------------------
# Phase 3
# ---------------------------------------------------------------------------

def gamma_gradient(records: list[ScoreRecord], beliefs: EdgeBeliefs,
                   target: Optional[int], mode: str = "likelihood_softmax") -> np.ndarray:
    """Score-function gradient estimate for gamma from scored configurations.

    ``likelihood_softmax`` weights configuration k for variable i by
    softmax_k(-NLL_k[i]), so configurations that explain the interventional
    data best dominate.  ``nll_weighted`` is the literal NLL-proportional
    weighting, kept for ablation.  The (predicted) intervened variable's row
    and all clamped entries are zeroed.
    """
    if len(records) < 2:
        raise ValueError("need at least 2 score records")
    if mode not in ESTIMATORS:
        raise ValueError(f"unknown estimator mode {mode!r}")
    nll = np.stack([r.per_variable_nll for r in records])          # (K, M)
    configs = np.stack([r.config for r in records]).astype(float)  # (K, M, M)
    sigma = beliefs.edge_probs()
    delta = sigma[None, :, :] - configs
    if mode == "likelihood_softmax":
        weights = nnet.softmax(-nll, axis=0)
    else:
        denom = nll.sum(axis=0)
        safe = np.where(denom == 0.0, 1.0, denom)
        weights = np.where(denom == 0.0, 1.0 / len(records), nll / safe)
    g = np.einsum("km,kmj->mj", weights, delta)
    if target is not None:
        g[target, :] = 0.0
    g[beliefs.clamp != 0] = 0.0
    np.fill_diagonal(g, 0.0)
    return g


def dag_penalty(beliefs: EdgeBeliefs) -> tuple[float, np.ndarray]:
    """Length-2 cycle penalty: sum over ordered pairs of cosh(sigma_ij * sigma_ji)."""
    sigma = beliefs.edge_probs()
    product = sigma * sigma.T
    off = graphs.off_diagonal_mask(beliefs.m)
    value = float(np.cosh(product[off]).sum())
    grad = 2.0 * np.sinh(product) * sigma.T * sigma * (1.0 - sigma)
    grad[~off] = 0.0
    grad[beliefs.clamp != 0] = 0.0
    return value, grad


def sparsity_penalty(beliefs: EdgeBeliefs) -> tuple[float, np.ndarray]:
    """L1 pressure on edge beliefs: sum of off-diagonal sigma(gamma)."""
    sigma = beliefs.edge_probs()
    off = graphs.off_diagonal_mask(beliefs.m)
    value = float(sigma[off].sum())
    grad = sigma * (1.0 - sigma)
    grad[~off] = 0.0
    grad[beliefs.clamp != 0] = 0.0
    return value, grad


def phase3_update(beliefs: EdgeBeliefs, g: np.ndarray, lambda_sparse: float,
                  lambda_dag: float, opt: nnet.AdamState) -> EdgeBeliefs:
    """Adam descent step on gamma with sparsity and acyclicity regularizers."""
    total = g.copy()
    if lambda_sparse:
        total += lambda_sparse * sparsity_penalty(beliefs)[1]
    if lambda_dag:
        total += lambda_dag * dag_penalty(beliefs)[1]
    total[beliefs.clamp != 0] = 0.0
    np.fill_diagonal(total, 0.0)
    nnet.adam_step(opt, {"gamma": beliefs.gamma}, {"gamma": total})
    beliefs.gamma[beliefs.clamp == 1] = CLAMP_GAMMA
    beliefs.gamma[beliefs.clamp == -1] = -CLAMP_GAMMA
    np.fill_diagonal(beliefs.gamma, 0.0)
    return beliefs


# ---------------------------------------------------------------------------
# configuration and full loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """All knobs of the training loop; defaults mirror the full-scale setup."""

    iterations: int = 500              # outer iterations (I)
    functional_steps: int = 10000      # phase-1 steps per iteration (F)
    interventions_per_iteration: int = 100  # intervention windows (Q)
    predict_batches: int = 100         # batches per target prediction (N_P)
    predict_configs: int = 10          # configurations per prediction batch (C_P)
    score_batches: int = 10            # batches per scoring pass (N_S)
    score_configs: int = 25            # configurations per scoring batch (C_S)
    batch_size: int = 256              # samples per batch (B)
    lambda_sparse: float = 0.1
    lambda_dag: float = 0.5
    functional_lr: float = 5e-2
    functional_beta1: float = 0.9
    structural_lr: float = 5e-3
    structural_beta1: float = 0.1
    estimator: str = "likelihood_softmax"
    predict: str = "predicted"
    prediction_baseline: bool = False  # subtract observational NLL before argmax
    dropout: bool = True
    early_stop: bool = True
    saturation_lo: float = 0.05
    saturation_hi: float = 0.95
    seed: int = 1

    def validate(self) -> "TrainConfig":
        counts = (self.iterations, self.functional_steps,
                  self.interventions_per_iteration, self.predict_batches,
                  self.predict_configs, self.score_batches, self.score_configs,
                  self.batch_size)
        if any(c < 1 for c in counts):
            raise ValueError("all loop counts and the batch size must be >= 1")
        if self.lambda_sparse < 0 or self.lambda_dag < 0:
            raise ValueError("regularizer strengths must be >= 0")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        if self.predict not in PREDICT_MODES:
            raise ValueError(f"predict must be one of {PREDICT_MODES}")
        return self

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunReport:
    """Everything a finished run reports: config echo, trace, and result."""

    config: dict
    seed: int
    metric_rows: list[dict]
    final_gamma: np.ndarray
    final_adjacency: np.ndarray
    iterations_run: int
    wall_clock: float
    counters: dict
    prediction_windows: int = 0
    prediction_hits: int = 0

    def to_json_dict(self) -> dict:
        final_probs = sigmoid(self.final_gamma)
        np.fill_diagonal(final_probs, 0.0)
        return {
            "config": self.config,
            "seed": self.seed,
            "iterations_run": self.iterations_run,
            "wall_clock_seconds": self.wall_clock,
            "sample_budget_actuals": self.counters,
            "prediction_windows": self.prediction_windows,
            "prediction_hits": self.prediction_hits,
            "metric_rows": self.metric_rows,
            "final_gamma": [[round(float(v), 10) for v in row]
                            for row in self.final_gamma],
            "final_edge_probs": [[round(float(v), 10) for v in row]
                                 for row in final_probs],
            "final_edges": graphs.edges(self.final_adjacency),
        }


METRIC_COLUMNS = ("iter", "edge_ce", "auroc", "shd_rev1", "shd_hamming",
                  "predicted_target", "true_target")

WINDOW_WIRING = "mean"  # calibration switch: batch | window | mean


def _window_gradient(records: list[ScoreRecord], beliefs: EdgeBeliefs,
                     used: Optional[int], config: TrainConfig) -> np.ndarray:
    cs = config.score_configs
    if WINDOW_WIRING in ("batch", "mean"):
        g_batch = np.mean([
            gamma_gradient(records[b * cs:(b + 1) * cs], beliefs, used,
                           mode=config.estimator)
            for b in range(config.score_batches)
        ], axis=0)
        if WINDOW_WIRING == "batch":
            return g_batch
    g_window = gamma_gradient(aggregate_records(records, cs), beliefs, used,
                              mode=config.estimator)
    if WINDOW_WIRING == "window":
        return g_window
    return 0.5 * (g_batch + g_window)


def train(blackbox: GroundTruthScm, config: TrainConfig,
          truth: Optional[np.ndarray] = None,
          clamp: Optional[np.ndarray] = None,
          metrics_sink: Optional[Callable[[dict], None]] = None) -> RunReport:
    """Run the full three-phase loop against a black-box SCM.

    `truth` is used only to compute per-iteration recovery metrics and the
    final structural Hamming distances; the learner itself never reads it.
    """
    config.validate()
    t_start = time.perf_counter()
    m = blackbox.m
    seq = np.random.SeedSequence(config.seed)
    init_rng, train_rng, black_rng = (np.random.default_rng(s) for s in seq.spawn(3))

    beliefs = init_beliefs(m, clamp=clamp)
    model = init_functional_model(m, blackbox.n_categories, init_rng,
                                  lr=config.functional_lr,
                                  beta1=config.functional_beta1)
    gamma_opt = nnet.AdamState(lr=config.structural_lr, beta1=config.structural_beta1)
    counters = SampleCounters()
    rows: list[dict] = []
    band = (config.saturation_lo, config.saturation_hi)
    predict_windows = 0
    predict_hits = 0
    last_pred: Optional[int] = None
    last_true: Optional[int] = None
    iterations_run = 0

    for iteration in range(config.iterations):
        phase1_fit(model, beliefs, blackbox, config.functional_steps,
                   config.batch_size, train_rng, sample_rng=black_rng,
                   dropout=config.dropout, counters=counters)
        baseline = None
        if config.predict == "predicted" and config.prediction_baseline:
            baseline = measure_per_variable_nll(
                model, beliefs, blackbox, config.predict_batches,
                config.predict_configs, config.batch_size, train_rng,
                sample_rng=black_rng, counters=counters, interventional=False)

        for _ in range(config.interventions_per_iteration):
            true_target = apply_soft_intervention(blackbox, None, black_rng)
            counters.interventions += 1
            if config.predict == "predicted":
                used: Optional[int] = predict_intervention_target(
                    model, beliefs, blackbox, config.predict_batches,
                    config.predict_configs, config.batch_size, train_rng,
                    sample_rng=black_rng, baseline=baseline, counters=counters)
                predict_windows += 1
                predict_hits += int(used == true_target)
            elif config.predict == "leaked":
                used = true_target
            elif config.predict == "random":
                used = int(train_rng.integers(0, m))
            else:
                used = None
            records = phase2_score(model, beliefs, blackbox, used,
                                   config.score_batches, config.score_configs,
                                   config.batch_size, train_rng,
                                   sample_rng=black_rng, counters=counters)
            g = _window_gradient(records, beliefs, used, config)
            phase3_update(beliefs, g, config.lambda_sparse, config.lambda_dag,
                          gamma_opt)
            retract_intervention(blackbox)
            last_pred, last_true = used, true_target

        iterations_run = iteration + 1
        row: dict = {"iter": iteration,
                     "predicted_target": -1 if last_pred is None else last_pred,
                     "true_target": -1 if last_true is None else last_true}
        if truth is not None:
            probs = beliefs.edge_probs()
            row["edge_ce"] = graphs.edge_cross_entropy(probs, truth)
            row["auroc"] = graphs.auroc(probs, truth)
            pred_graph = threshold_graph(beliefs)
            row["shd_rev1"] = graphs.shd(pred_graph, truth, "reversal_is_one")
            row["shd_hamming"] = graphs.shd(pred_graph, truth, "directed_hamming")
        rows.append(row)
        if metrics_sink is not None:
            metrics_sink(row)
        if config.early_stop and beliefs.saturated(band):
            break

    return RunReport(
        config=config.as_dict(),
        seed=config.seed,
        metric_rows=rows,
        final_gamma=beliefs.gamma.copy(),
        final_adjacency=threshold_graph(beliefs),
        iterations_run=iterations_run,
        wall_clock=time.perf_counter() - t_start,
        counters=counters.as_dict(),
        prediction_windows=predict_windows,
        prediction_hits=predict_hits,
    )


def measure_prediction_accuracy(model: FunctionalModel, beliefs: EdgeBeliefs,
                                blackbox: GroundTruthScm, trials: int,
                                config: TrainConfig,
                                rng: np.random.Generator,
                                black_rng: np.random.Generator) -> float:
    """Fraction of intervention windows whose target the heuristic identifies."""
    hits = 0
    for _ in range(trials):
        true_target = apply_soft_intervention(blackbox, None, black_rng)
        guess = predict_intervention_target(
            model, beliefs, blackbox, config.predict_batches,
            config.predict_configs, config.batch_size, rng,
            sample_rng=black_rng)
        retract_intervention(blackbox)
        hits += int(guess == true_target)
    return hits / trials
