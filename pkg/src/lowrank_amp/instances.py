"""Planted instances for the XKX^T and UV^T models, plus error metrics."""
import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .channels import make_channel
from .errors import ParameterError
from .priors import make_prior
from .streams import stream


@dataclass(frozen=True)
class PlantedInstance:
    """Observed matrix ``Y``, its score matrix ``S`` and (optionally) the truth.

    ``model`` is ``"xkx"`` (``W = X K X^T / sqrt(n)``, symmetric ``Y``) or
    ``"uv"`` (``W = U V^T / sqrt(n)``, ``Y`` is n x m). For ``uv`` the
    ground truth lives in ``U`` and ``V``; ``X`` is unused.
    """

    model: str
    Y: np.ndarray
    S: np.ndarray
    delta: float
    seed: int
    channel: object
    prior: object
    K: np.ndarray = None
    X: np.ndarray = None
    U: np.ndarray = None
    V: np.ndarray = None
    prior_v: object = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.Y.shape[0]

    @property
    def m(self):
        return self.Y.shape[1]

    @property
    def r(self):
        return self.prior.rank

    @property
    def has_truth(self):
        return self.X is not None if self.model == "xkx" else self.U is not None

    def blind(self):
        """Copy without ground-truth factors."""
        return replace(self, X=None, U=None, V=None)

    def config(self):
        cfg = {
            "model": self.model,
            "n": self.n,
            "seed": self.seed,
            "channel": self.channel.to_dict(),
            "prior": self.prior.to_dict(),
            "delta": self.delta,
        }
        if self.model == "xkx":
            cfg["K"] = self.K.tolist()
        else:
            cfg["m"] = self.m
            cfg["prior_v"] = self.prior_v.to_dict()
        cfg.update(self.meta)
        return cfg


def _symmetric_sample(channel, W, rng):
    # draw every entry, keep i <= j and mirror
    Y = channel.sample(W, rng)
    upper = np.triu(Y)
    return upper + np.triu(upper, 1).T


def generate_xkx(prior, channel, K, n, seed):
    """Sample X ~ prior, W = X K X^T / sqrt(n), and Y entry-wise (i <= j, mirrored)."""
    if n < 2:
        raise ParameterError("n must be >= 2", field="n")
    K = np.atleast_2d(np.asarray(K, dtype=float))
    if K.shape != (prior.rank, prior.rank):
        raise ParameterError(f"K must be {prior.rank}x{prior.rank}", field="K")
    if not np.allclose(K, K.T):
        raise ParameterError("K must be symmetric", field="K")
    X = prior.sample(stream(seed, "prior"), n)
    W = (X @ K @ X.T) / np.sqrt(n)
    Y = _symmetric_sample(channel, W, stream(seed, "channel"))
    del W
    S = channel.score_matrix(Y)
    return PlantedInstance("xkx", Y, S, channel.inverse_fisher(), int(seed), channel, prior, K=K, X=X)


def generate_uv(prior_u, prior_v, channel, n, alpha, seed):
    """Sample U (n x r), V (m x r) with m = round(alpha n), W = U V^T / sqrt(n)."""
    if n < 2:
        raise ParameterError("n must be >= 2", field="n")
    if not alpha > 0:
        raise ParameterError("alpha must be > 0", field="alpha")
    m = int(round(alpha * n))
    if m < 1:
        raise ParameterError("m = round(alpha n) must be >= 1", field="alpha")
    if prior_u.rank != prior_v.rank:
        raise ParameterError("u and v priors must share the rank", field="prior_v.rank")
    U = prior_u.sample(stream(seed, "prior"), n)
    V = prior_v.sample(stream(seed, "prior_v"), m)
    W = (U @ V.T) / np.sqrt(n)
    Y = channel.sample(W, stream(seed, "channel"))
    S = channel.score_matrix(Y)
    return PlantedInstance(
        "uv", Y, S, channel.inverse_fisher(), int(seed), channel, prior_u,
        U=U, V=V, prior_v=prior_v, meta={"alpha": float(alpha)},
    )


def mse(estimate, truth):
    """(1/n) sum_i ||x_i - a_i||^2."""
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape:
        raise ParameterError(f"shape mismatch {estimate.shape} vs {truth.shape}")
    return float(np.sum((truth - estimate) ** 2) / truth.shape[0])


def aligned_mse(estimate, truth, signs=False):
    """MSE minimised over column permutations (and sign flips if ``signs``).

    Symmetric priors make the planted factors identifiable only up to these
    relabelings, so this is the error AMP should be judged by.
    """
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    C = estimate.T @ truth
    gain = np.abs(C) if signs else C
    rows, cols = linear_sum_assignment(gain, maximize=True)
    perm = np.empty_like(cols)
    perm[cols] = rows
    flip = np.sign(C[perm, np.arange(C.shape[1])]) if signs else np.ones(C.shape[1])
    flip[flip == 0] = 1
    return mse(estimate[:, perm] * flip, truth)


def community_overlap(estimate, truth):
    """Fraction of correctly labelled nodes, maximised over group relabelings.

    Rows are hard-assigned to their argmax. The maximum over permutations of
    the confusion-matrix trace is an assignment problem, solved exactly.
    """
    estimate = np.asarray(estimate)
    truth = np.asarray(truth)
    r = truth.shape[1]
    confusion = np.zeros((r, r))
    np.add.at(confusion, (np.argmax(estimate, axis=1), np.argmax(truth, axis=1)), 1)
    rows, cols = linear_sum_assignment(confusion, maximize=True)
    return float(confusion[rows, cols].sum() / truth.shape[0])


def save_instance(instance, path, blind=False):
    inst = instance.blind() if blind else instance
    arrays = {"Y": inst.Y, "S": inst.S}
    for name in ("K", "X", "U", "V"):
        value = getattr(inst, name)
        if value is not None:
            arrays[name] = value
    config = inst.config()
    config["blind"] = bool(blind)
    np.savez(path, config=np.array(json.dumps(config, sort_keys=True)), **arrays)


def load_instance(path):
    with np.load(path, allow_pickle=False) as data:
        config = json.loads(str(data["config"]))
        arrays = {k: data[k] for k in data.files if k != "config"}
    channel = make_channel(config["channel"])
    prior = make_prior(config["prior"])
    meta = {k: config[k] for k in ("alpha",) if k in config}
    if config["model"] == "xkx":
        return PlantedInstance(
            "xkx", arrays["Y"], arrays["S"], float(config["delta"]), int(config["seed"]),
            channel, prior, K=arrays.get("K"), X=arrays.get("X"), meta=meta,
        )
    return PlantedInstance(
        "uv", arrays["Y"], arrays["S"], float(config["delta"]), int(config["seed"]),
        channel, prior, U=arrays.get("U"), V=arrays.get("V"),
        prior_v=make_prior(config["prior_v"]), meta=meta,
    )


def export_triples(matrix, path, header=None):
    """Write ``row,col,value`` triples for every entry of ``matrix``."""
    matrix = np.asarray(matrix)
    rows, cols = np.indices(matrix.shape)
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        writer = csv.writer(fh)
        writer.writerow(["row", "col", "value"])
        for i, j, v in zip(rows.ravel(), cols.ravel(), matrix.ravel()):
            writer.writerow([int(i), int(j), repr(float(v))])


def load_triples(path, shape=None):
    """Dense matrix from a ``row,col,value`` CSV (generic matrix loader)."""
    with open(path, newline="") as fh:
        rows = [line for line in csv.reader(fh) if line and not line[0].startswith("#")]
    data = np.array([[float(c) for c in line] for line in rows[1:]]).reshape(-1, 3)
    i = data[:, 0].astype(int)
    j = data[:, 1].astype(int)
    if shape is None:
        shape = (i.max() + 1, j.max() + 1)
    out = np.zeros(shape)
    out[i, j] = data[:, 2]
    return out
