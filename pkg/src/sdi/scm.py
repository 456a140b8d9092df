"""Ground-truth black-box SCM: ancestral sampling, soft interventions, oracles.

The black box owns a DAG plus one conditional mechanism per variable (a
masked MLP or a conditional probability table).  Soft interventions replace
exactly one variable's mechanism and are fully retracted before the next one;
the learner only ever sees sampled category values (and, optionally, a leaked
intervention target index).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import nnet
from .graphs import check_adjacency, topo_order

GT_WEIGHT_GAIN = 2.5
GT_BIAS_RANGE = (-1.1, 1.1)
DEFAULT_SAMPLE_CAP = 1024


class InterventionError(RuntimeError):
    """Intervention applied while one is active, or retracted with none."""


@dataclass
class MlpMechanism:
    """Conditional model as a masked one-hidden-layer MLP over all variables."""

    params: nnet.MlpParams

    def probs_for(self, values: np.ndarray, mask_row: np.ndarray,
                  n_categories: np.ndarray, n_max: int,
                  temperature: float) -> np.ndarray:
        xoh = nnet.one_hot_batch(values, n_categories, n_max)
        logits = nnet.forward_batch(self.params, xoh, mask_row) / temperature
        return nnet.softmax(logits)

    def copy(self) -> "MlpMechanism":
        return MlpMechanism(self.params.copy())

    def equal(self, other) -> bool:
        return isinstance(other, MlpMechanism) and self.params.allclose(other.params)


@dataclass
class CptMechanism:
    """Conditional table with one axis per parent (in `parents` order) plus
    a final axis over the variable's own categories."""

    parents: tuple[int, ...]
    table: np.ndarray

    def __post_init__(self):
        sums = self.table.sum(axis=-1)
        if not np.allclose(sums, 1.0, atol=1e-6):
            raise ValueError("CPT rows must sum to 1 within 1e-6")
        self._tempered_cache: tuple[float, np.ndarray] | None = None

    def tempered(self, temperature: float) -> np.ndarray:
        if temperature == 1.0:
            return self.table
        if self._tempered_cache is None or self._tempered_cache[0] != temperature:
            powered = np.power(self.table, 1.0 / temperature)
            powered /= powered.sum(axis=-1, keepdims=True)
            self._tempered_cache = (temperature, powered)
        return self._tempered_cache[1]

    def probs_for(self, values: np.ndarray, temperature: float) -> np.ndarray:
        t = self.tempered(temperature)
        idx = tuple(values[:, p] for p in self.parents)
        return t[idx] if idx else np.broadcast_to(t, (values.shape[0],) + t.shape)

    def copy(self) -> "CptMechanism":
        return CptMechanism(self.parents, self.table.copy())

    def equal(self, other) -> bool:
        return (isinstance(other, CptMechanism) and self.parents == other.parents
                and np.array_equal(self.table, other.table))


Mechanism = Union[MlpMechanism, CptMechanism]


@dataclass
class InterventionState:
    target: int
    saved_mechanism: Mechanism
    replacement: Mechanism
    pool: Optional[np.ndarray] = None  # fresh interventional samples drawn so far


class GroundTruthScm:
    """Black-box generative model: adjacency + per-variable mechanisms.

    At most one soft intervention is active at a time.  `sample_cap` bounds
    the number of fresh samples generated per intervention window; further
    requests are resampled with replacement from the window's pool.
    """

    def __init__(self, adjacency: np.ndarray, mechanisms: list[Mechanism],
                 n_categories: np.ndarray, temperature: float = 1.0,
                 sample_cap: int = DEFAULT_SAMPLE_CAP,
                 variable_names: Optional[list[str]] = None):
        self.adjacency = check_adjacency(adjacency)
        self.m = self.adjacency.shape[0]
        self.order = topo_order(self.adjacency)  # raises on cyclic input
        self.mechanisms = mechanisms
        self.n_categories = np.asarray(n_categories, dtype=int)
        self.n_max = int(self.n_categories.max())
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.temperature = float(temperature)
        self.sample_cap = int(sample_cap)
        self.intervention: Optional[InterventionState] = None
        self.variable_names = variable_names or [f"x{i}" for i in range(self.m)]

    def mechanism_in_use(self, i: int) -> Mechanism:
        return self.mechanisms[i]

    def state_signature(self) -> bytes:
        """Byte string capturing all mechanism parameters (for exactness tests)."""
        chunks = []
        for mech in self.mechanisms:
            if isinstance(mech, MlpMechanism):
                for arr in mech.params.tree().values():
                    chunks.append(arr.tobytes())
            else:
                chunks.append(np.asarray(mech.parents).tobytes())
                chunks.append(mech.table.tobytes())
        return b"".join(chunks)


def _random_mlp_mechanism(m: int, n_max: int, n_out: int,
                          rng: np.random.Generator) -> MlpMechanism:
    hidden = nnet.hidden_size(m, n_max)
    lo, hi = GT_BIAS_RANGE
    params = nnet.MlpParams(
        w0=nnet.orthogonal_init(hidden, m * n_max, GT_WEIGHT_GAIN, rng),
        b0=nnet.uniform_init(hidden, lo, hi, rng),
        w1=nnet.orthogonal_init(n_out, hidden, GT_WEIGHT_GAIN, rng),
        b1=nnet.uniform_init(n_out, lo, hi, rng),
    )
    return MlpMechanism(params)


def _random_cpt_mechanism(parents: tuple[int, ...], parent_cards: tuple[int, ...],
                          n_out: int, rng: np.random.Generator) -> CptMechanism:
    n_rows = int(np.prod(parent_cards)) if parent_cards else 1
    rows = rng.dirichlet(np.ones(n_out), size=n_rows)
    table = rows.reshape(parent_cards + (n_out,))
    return CptMechanism(parents, table)


def scm_random_mlp(adjacency: np.ndarray, n_categories, rng: np.random.Generator,
                   temperature: float = 1.0,
                   sample_cap: int = DEFAULT_SAMPLE_CAP) -> GroundTruthScm:
    """Black box with randomly initialized MLP mechanisms on a given DAG.

    Weights use orthogonal init with gain 2.5 and biases are uniform in
    (-1.1, 1.1), which yields non-trivial but learnable conditionals.
    """
    adjacency = check_adjacency(adjacency)
    m = adjacency.shape[0]
    n_categories = np.broadcast_to(np.asarray(n_categories, dtype=int), (m,)).copy()
    n_max = int(n_categories.max())
    mechanisms: list[Mechanism] = [
        _random_mlp_mechanism(m, n_max, int(n_categories[i]), rng) for i in range(m)
    ]
    return GroundTruthScm(adjacency, mechanisms, n_categories,
                          temperature=temperature, sample_cap=sample_cap)


def scm_random_cpt(adjacency: np.ndarray, n_categories, rng: np.random.Generator,
                   temperature: float = 1.0,
                   sample_cap: int = DEFAULT_SAMPLE_CAP) -> GroundTruthScm:
    """Black box with uniform-simplex random conditional tables on a given DAG."""
    adjacency = check_adjacency(adjacency)
    m = adjacency.shape[0]
    n_categories = np.broadcast_to(np.asarray(n_categories, dtype=int), (m,)).copy()
    mechanisms: list[Mechanism] = []
    for i in range(m):
        parents = tuple(int(p) for p in np.flatnonzero(adjacency[i]))
        cards = tuple(int(n_categories[p]) for p in parents)
        mechanisms.append(_random_cpt_mechanism(parents, cards,
                                                int(n_categories[i]), rng))
    return GroundTruthScm(adjacency, mechanisms, n_categories,
                          temperature=temperature, sample_cap=sample_cap)


def scm_from_cpts(adjacency: np.ndarray, tables: list[np.ndarray], n_categories,
                  temperature: float = 1.0,
                  sample_cap: int = DEFAULT_SAMPLE_CAP,
                  variable_names=None) -> GroundTruthScm:
    """Build a CPT-backed black box; table i is indexed by i's parents ascending."""
    adjacency = check_adjacency(adjacency)
    m = adjacency.shape[0]
    n_categories = np.broadcast_to(np.asarray(n_categories, dtype=int), (m,)).copy()
    mechanisms: list[Mechanism] = []
    for i in range(m):
        parents = tuple(int(p) for p in np.flatnonzero(adjacency[i]))
        mechanisms.append(CptMechanism(parents, np.asarray(tables[i], dtype=float)))
    return GroundTruthScm(adjacency, mechanisms, n_categories,
                          temperature=temperature, sample_cap=sample_cap,
                          variable_names=variable_names)


def _draw_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(probs.shape[0])
    cum = np.cumsum(probs, axis=1)
    vals = (cum < u[:, None]).sum(axis=1)
    return np.minimum(vals, probs.shape[1] - 1)


def _sample_fresh(scm: GroundTruthScm, batch_size: int,
                  rng: np.random.Generator) -> np.ndarray:
    values = np.zeros((batch_size, scm.m), dtype=np.int64)
    onehot = np.zeros((batch_size, scm.m, scm.n_max))
    flat = onehot.reshape(batch_size, scm.m * scm.n_max)
    rows = np.arange(batch_size)
    for i in scm.order:
        mech = scm.mechanisms[i]
        if isinstance(mech, MlpMechanism):
            logits = nnet.forward_batch(mech.params, flat, scm.adjacency[i])
            probs = nnet.softmax(logits / scm.temperature)
        else:
            probs = mech.probs_for(values, scm.temperature)
        drawn = _draw_categorical(probs, rng)
        values[:, i] = drawn
        onehot[rows, i, drawn] = 1.0
    return values


def ancestral_sample(scm: GroundTruthScm, batch_size: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Sample a (batch_size, M) matrix of category indices in topological order.

    While an intervention is active, fresh generation stops at the per-window
    sample cap; further requests are served by resampling the window's pool
    with replacement.
    """
    state = scm.intervention
    if state is None:
        return _sample_fresh(scm, batch_size, rng)
    pooled = 0 if state.pool is None else state.pool.shape[0]
    n_fresh = min(batch_size, max(scm.sample_cap - pooled, 0))
    parts = []
    if n_fresh > 0:
        fresh = _sample_fresh(scm, n_fresh, rng)
        state.pool = fresh if state.pool is None else np.vstack([state.pool, fresh])
        parts.append(fresh)
    n_reuse = batch_size - n_fresh
    if n_reuse > 0:
        idx = rng.integers(0, state.pool.shape[0], size=n_reuse)
        parts.append(state.pool[idx])
    return parts[0] if len(parts) == 1 else np.vstack(parts)


def apply_soft_intervention(scm: GroundTruthScm, target: Optional[int],
                            rng: np.random.Generator) -> int:
    """Replace one variable's mechanism with a fresh random one.

    Draws the target uniformly when not given.  The pristine mechanism is
    saved so retraction restores it bit-exactly.  Returns the target index,
    which callers may or may not leak to the learner.
    """
    if scm.intervention is not None:
        raise InterventionError("an intervention is already active")
    if target is None:
        target = int(rng.integers(0, scm.m))
    if not 0 <= target < scm.m:
        raise ValueError(f"intervention target {target} out of range")
    saved = scm.mechanisms[target]
    if isinstance(saved, MlpMechanism):
        replacement: Mechanism = _random_mlp_mechanism(
            scm.m, scm.n_max, int(scm.n_categories[target]), rng)
    else:
        cards = tuple(int(scm.n_categories[p]) for p in saved.parents)
        replacement = _random_cpt_mechanism(saved.parents, cards,
                                            int(scm.n_categories[target]), rng)
    scm.mechanisms[target] = replacement
    scm.intervention = InterventionState(target, saved, replacement)
    return target


def retract_intervention(scm: GroundTruthScm) -> None:
    if scm.intervention is None:
        raise InterventionError("no intervention to retract")
    scm.mechanisms[scm.intervention.target] = scm.intervention.saved_mechanism
    scm.intervention = None


def mechanism_conditional(scm: GroundTruthScm, i: int) -> tuple[tuple[int, ...], np.ndarray]:
    """Materialize variable i's sampling distribution as a table.

    Returns (parents, table); the table has one axis per parent (ascending
    index order) and a trailing axis over i's categories, with the black
    box's temperature already applied.
    """
    mech = scm.mechanisms[i]
    parents = tuple(int(p) for p in np.flatnonzero(scm.adjacency[i]))
    cards = tuple(int(scm.n_categories[p]) for p in parents)
    if isinstance(mech, CptMechanism):
        table = mech.tempered(scm.temperature)
        if mech.parents != parents:
            # reorder table axes to ascending parent index order
            perm = [mech.parents.index(p) for p in parents]
            table = np.transpose(table, perm + [len(parents)])
        return parents, table
    n_rows = int(np.prod(cards)) if cards else 1
    values = np.zeros((n_rows, scm.m), dtype=np.int64)
    if cards:
        combos = np.indices(cards).reshape(len(cards), -1).T
        values[:, list(parents)] = combos
    probs = mech.probs_for(values, scm.adjacency[i], scm.n_categories,
                           scm.n_max, scm.temperature)
    return parents, probs.reshape(cards + (int(scm.n_categories[i]),))


def edge_strengths(scm: GroundTruthScm) -> np.ndarray:
    """Dependence strength of each true edge as a total-variation distance.

    Entry (i, j) for parent j of variable i is the largest TV distance
    between i's conditional rows across values of j, holding the other
    parents fixed; non-edges are zero.  A strength near zero means the edge
    is statistically almost invisible.
    """
    strengths = np.zeros((scm.m, scm.m))
    for i in range(scm.m):
        parents, table = mechanism_conditional(scm, i)
        if not parents:
            continue
        rows = table.reshape(-1, table.shape[-1])
        cards = table.shape[:-1]
        combos = np.indices(cards).reshape(len(parents), -1)
        for axis, j in enumerate(parents):
            best = 0.0
            for va in range(cards[axis]):
                for vb in range(va + 1, cards[axis]):
                    sel_a = combos[axis] == va
                    sel_b = combos[axis] == vb
                    tv = 0.5 * np.abs(rows[sel_a] - rows[sel_b]).sum(axis=-1)
                    best = max(best, float(tv.max()))
            strengths[i, j] = best
    return strengths


def exact_joint(scm: GroundTruthScm) -> np.ndarray:
    """Exact joint distribution by enumeration; axis i holds variable i.

    Requires the full outcome space to be at most 1e6 cells.
    """
    cards = tuple(int(c) for c in scm.n_categories)
    if np.prod(cards) > 1_000_000:
        raise ValueError("joint enumeration limited to 1e6 outcomes")
    joint = np.ones(cards)
    for i in range(scm.m):
        parents, table = mechanism_conditional(scm, i)
        axes = list(parents) + [i]
        order = np.argsort(axes)
        aligned = np.transpose(table, order)
        shape = [cards[j] if j in axes else 1 for j in range(scm.m)]
        joint = joint * aligned.reshape(shape)
    return joint


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_scm(scm: GroundTruthScm, path, seed_provenance: Optional[str] = None) -> None:
    """Write the black box to an .npz checkpoint (documented key layout)."""
    arrays: dict[str, np.ndarray] = {
        "adjacency": scm.adjacency,
        "n_categories": scm.n_categories,
        "temperature": np.array(scm.temperature),
        "sample_cap": np.array(scm.sample_cap),
    }
    kinds = []
    for i, mech in enumerate(scm.mechanisms):
        if isinstance(mech, MlpMechanism):
            kinds.append("mlp")
            for key, arr in mech.params.tree().items():
                arrays[f"mech{i}_{key}"] = arr
        else:
            kinds.append("cpt")
            arrays[f"mech{i}_parents"] = np.asarray(mech.parents, dtype=np.int64)
            arrays[f"mech{i}_table"] = mech.table
    meta = {"kinds": kinds, "variable_names": scm.variable_names,
            "seed_provenance": seed_provenance}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_scm(path) -> GroundTruthScm:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        mechanisms: list[Mechanism] = []
        for i, kind in enumerate(meta["kinds"]):
            if kind == "mlp":
                params = nnet.MlpParams(data[f"mech{i}_w0"], data[f"mech{i}_b0"],
                                        data[f"mech{i}_w1"], data[f"mech{i}_b1"])
                mechanisms.append(MlpMechanism(params))
            else:
                mechanisms.append(CptMechanism(
                    tuple(int(p) for p in data[f"mech{i}_parents"]),
                    data[f"mech{i}_table"]))
        return GroundTruthScm(
            data["adjacency"], mechanisms, data["n_categories"],
            temperature=float(data["temperature"]),
            sample_cap=int(data["sample_cap"]),
            variable_names=meta["variable_names"])
