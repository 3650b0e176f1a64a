"""Element-wise output channels P_out(y | w).

Every channel is reduced to two things the estimators consume: the score
``d log P_out(y|w) / dw`` at ``w = 0`` and the inverse Fisher information
``delta`` at ``w = 0``. Sampling draws ``y`` given the clean entry ``w``.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError


class Channel:
    """Base class; subclasses are frozen dataclasses."""

    kind = None

    def log_density(self, y, w):
        """g(y, w) = log P_out(y | w)."""
        raise NotImplementedError

    def score(self, y):
        """d g / dw at w = 0, element-wise."""
        raise NotImplementedError

    def score_curvature(self, y):
        """d^2 g / dw^2 at w = 0, element-wise."""
        raise NotImplementedError

    def inverse_fisher(self):
        raise NotImplementedError

    def sample(self, w, rng):
        raise NotImplementedError

    @property
    def delta(self):
        return self.inverse_fisher()

    def score_matrix(self, Y):
        """Apply :meth:`score` entry-wise; symmetry of ``Y`` is preserved."""
        return self.score(np.asarray(Y, dtype=float))

    def to_dict(self):
        raise NotImplementedError


@dataclass(frozen=True)
class GaussianChannel(Channel):
    """Additive Gaussian noise of variance ``variance``."""

    variance: float
    kind = "gaussian"

    def __post_init__(self):
        if not (np.isfinite(self.variance) and self.variance > 0):
            raise ParameterError("gaussian variance must be > 0", field="channel.variance")

    def log_density(self, y, w):
        y = np.asarray(y, dtype=float)
        return -((y - w) ** 2) / (2 * self.variance) - 0.5 * np.log(2 * np.pi * self.variance)

    def score(self, y):
        return np.asarray(y, dtype=float) / self.variance

    def score_curvature(self, y):
        return np.full(np.shape(y), -1.0 / self.variance)

    def inverse_fisher(self):
        return float(self.variance)

    def sample(self, w, rng):
        w = np.asarray(w, dtype=float)
        return w + np.sqrt(self.variance) * rng.standard_normal(w.shape)

    def to_dict(self):
        return {"kind": self.kind, "variance": self.variance}


@dataclass(frozen=True)
class SBMChannel(Channel):
    """Dense stochastic block model edge channel.

    ``P(y=1 | w) = p_out + mu * w``; with community rows and ``K = I`` this
    gives ``p_in = p_out + mu / sqrt(n)``.
    """

    p_out: float
    mu: float
    kind = "sbm"

    def __post_init__(self):
        if not (0.0 < self.p_out < 1.0):
            raise ParameterError("sbm p_out must lie strictly inside (0, 1)", field="channel.p_out")
        if not (np.isfinite(self.mu) and self.mu > 0):
            raise ParameterError("sbm mu must be > 0", field="channel.mu")

    @classmethod
    def from_delta(cls, p_out, delta):
        """Channel with base rate ``p_out`` whose inverse Fisher information is ``delta``."""
        if not delta > 0:
            raise ParameterError("delta must be > 0", field="channel.delta")
        if not (0.0 < p_out < 1.0):
            raise ParameterError("sbm p_out must lie strictly inside (0, 1)", field="channel.p_out")
        return cls(p_out=p_out, mu=float(np.sqrt(p_out * (1 - p_out) / delta)))

    def edge_probability(self, w):
        p = self.p_out + self.mu * np.asarray(w, dtype=float)
        if np.any(p < 0) or np.any(p > 1):
            raise ParameterError(
                f"edge probability p_out + mu*w leaves [0, 1] (range {p.min():.4g}..{p.max():.4g})",
                field="channel.mu",
            )
        return p

    def log_density(self, y, w):
        p = self.edge_probability(w)
        y = np.asarray(y)
        with np.errstate(divide="ignore"):
            return np.where(y == 1, np.log(p), np.log1p(-p))

    def score(self, y):
        y = np.asarray(y)
        return np.where(y == 1, self.mu / self.p_out, -self.mu / (1 - self.p_out)).astype(float)

    def score_curvature(self, y):
        y = np.asarray(y)
        return np.where(y == 1, -(self.mu / self.p_out) ** 2, -(self.mu / (1 - self.p_out)) ** 2)

    def inverse_fisher(self):
        return self.p_out * (1 - self.p_out) / self.mu**2

    def sample(self, w, rng):
        p = self.edge_probability(w)
        return (rng.random(p.shape) < p).astype(float)

    def to_dict(self):
        return {"kind": self.kind, "p_out": self.p_out, "mu": self.mu}


@dataclass(frozen=True)
class ExponentialChannel(Channel):
    """Additive two-sided exponential (Laplace) noise of scale ``scale``.

    g is not differentiable at y = w; the score uses the a.e. derivative
    sign(y)/scale, with 0 at the kink.
    """

    scale: float
    kind = "exponential"

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ParameterError("exponential scale must be > 0", field="channel.scale")

    def log_density(self, y, w):
        y = np.asarray(y, dtype=float)
        return -np.abs(y - w) / self.scale - np.log(2 * self.scale)

    def score(self, y):
        return np.sign(np.asarray(y, dtype=float)) / self.scale

    def score_curvature(self, y):
        # distributional (a delta at y = w); zero almost everywhere
        return np.zeros(np.shape(y))

    def inverse_fisher(self):
        return float(self.scale**2)

    def sample(self, w, rng):
        w = np.asarray(w, dtype=float)
        return w + rng.laplace(0.0, self.scale, size=w.shape)

    def to_dict(self):
        return {"kind": self.kind, "scale": self.scale}


def make_channel(spec):
    """Build a channel from a config mapping (``kind`` plus parameters).

    Every channel accepts a target ``delta`` in place of its own parameter:
    SBM as an alternative to ``mu``, Gaussian as ``variance``, exponential
    through ``scale = sqrt(delta)``.
    """
    spec = dict(spec)
    kind = spec.pop("kind", None)
    try:
        if kind == "gaussian":
            variance = spec.pop("variance", spec.pop("delta", None))
            if variance is None:
                raise ParameterError("gaussian channel needs 'variance'", field="channel.variance")
            return GaussianChannel(float(variance))
        if kind == "sbm":
            p_out = spec.pop("p_out", None)
            if p_out is None:
                raise ParameterError("sbm channel needs 'p_out'", field="channel.p_out")
            if "delta" in spec:
                return SBMChannel.from_delta(float(p_out), float(spec["delta"]))
            if "mu" not in spec:
                raise ParameterError("sbm channel needs 'mu' or 'delta'", field="channel.mu")
            return SBMChannel(float(p_out), float(spec["mu"]))
        if kind == "exponential":
            scale = spec.pop("scale", spec.pop("lambda", None))
            if scale is None and "delta" in spec:
                # delta = scale^2
                scale = np.sqrt(float(spec["delta"]))
            if scale is None:
                raise ParameterError("exponential channel needs 'scale'", field="channel.scale")
            return ExponentialChannel(float(scale))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ParameterError):
            raise
        raise ParameterError(f"bad channel parameter: {exc}", field="channel") from exc
    raise ParameterError(f"unknown channel kind {kind!r}", field="channel.kind")
