"""Density estimators over graph embeddings: isotropic Gaussian KDE and radial normalizing flows."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .errors import ContractError, FitError, TrainingError

LOG_2PI = math.log(2.0 * math.pi)


# --------------------------------------------------------------------------- KDE


@dataclass(frozen=True, eq=False)
class KDEModel:
    points: np.ndarray
    bandwidth: float

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if pts.shape[0] < 1 or not np.all(np.isfinite(pts)):
            raise ContractError("KDE needs at least one finite support point")
        if not (self.bandwidth > 0 and math.isfinite(self.bandwidth)):
            raise ContractError(f"bandwidth must be positive and finite, got {self.bandwidth}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "bandwidth", float(self.bandwidth))

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]


def scott_bandwidth(points: np.ndarray) -> float:
    """n^(-1/(d+4)) times the mean per-dimension sample standard deviation."""
    n, d = points.shape
    if n < 2:
        raise FitError("rule-based bandwidth needs at least 2 points")
    sigma = float(np.mean(np.std(points, axis=0, ddof=1)))
    if sigma == 0.0:
        raise FitError("all dimensions have zero variance; pass an explicit bandwidth")
    return n ** (-1.0 / (d + 4)) * sigma


def kde_fit(points, rule: str | float = "scott") -> KDEModel:
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[0] < 1:
        raise FitError("KDE needs at least one point")
    if isinstance(rule, str):
        if rule != "scott":
            raise ContractError(f"unknown bandwidth rule {rule!r}")
        h = scott_bandwidth(pts)
    else:
        h = float(rule)
        if not h > 0:
            raise FitError(f"explicit bandwidth must be > 0, got {h}")
    return KDEModel(pts, h)


def gaussian_log_kernels(m: KDEModel, queries: np.ndarray) -> np.ndarray:
    """log N(q; x_i, h^2 I) for every query row and support point, shape (queries, n)."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q.shape[1] != m.dim:
        raise ContractError(f"query dimension {q.shape[1]} != KDE dimension {m.dim}")
    sq = cdist(q, m.points, metric="sqeuclidean")
    h2 = m.bandwidth ** 2
    return -0.5 * sq / h2 - 0.5 * m.dim * (LOG_2PI + math.log(h2))


def kde_logpdf_many(m: KDEModel, queries: np.ndarray) -> np.ndarray:
    return logsumexp(gaussian_log_kernels(m, queries), axis=1) - math.log(m.size)


def kde_logpdf(m: KDEModel, z: np.ndarray) -> float:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ContractError("kde_logpdf expects a single embedding vector")
    return float(kde_logpdf_many(m, z[None, :])[0])


# --------------------------------------------------------------------------- radial flow


def _softplus(x):
    return np.logaddexp(0.0, x)


@dataclass(eq=False)
class RadialFlow:
    """Stack of radial layers mapping data towards a standard normal base.

    Layer ``l`` sends ``x`` to ``x + beta_l * (x - c_l) / (alpha_l + |x - c_l|)`` with
    ``alpha_l = softplus(alpha_raw_l) > 0`` and ``beta_l = -alpha_l + softplus(beta_raw_l)``,
    which keeps every layer invertible.

    An optional input map ``u = (z @ projection - shift) / scale`` is applied first;
    densities are over the projected coordinates ``z @ projection``, so only the
    diagonal rescale enters the Jacobian.
    """

    centers: np.ndarray
    alpha_raw: np.ndarray
    beta_raw: np.ndarray
    projection: np.ndarray | None = None
    shift: np.ndarray | None = None
    scale: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.ndim != 2:
            self.centers = self.centers.reshape(len(self.alpha_raw), -1)
        self.alpha_raw = np.asarray(self.alpha_raw, dtype=np.float64)
        self.beta_raw = np.asarray(self.beta_raw, dtype=np.float64)
        d = self.dim
        if self.shift is None:
            self.shift = np.zeros(d)
        if self.scale is None:
            self.scale = np.ones(d)
        self.shift = np.asarray(self.shift, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        if np.any(self.scale <= 0):
            raise ContractError("input scale must be positive")
        if self.projection is not None:
            self.projection = np.asarray(self.projection, dtype=np.float64)
            if self.projection.shape[1] != d:
                raise ContractError("projection output width must equal flow dimension")

    @classmethod
    def identity(cls, dim: int, num_layers: int = 0, centers: np.ndarray | None = None) -> RadialFlow:
        c = np.zeros((num_layers, dim)) if centers is None else centers
        return cls(c, np.zeros(num_layers), np.zeros(num_layers))

    @property
    def num_layers(self) -> int:
        return int(self.alpha_raw.shape[0])

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def input_dim(self) -> int:
        return self.projection.shape[0] if self.projection is not None else self.dim

    def alphas(self) -> np.ndarray:
        return _softplus(self.alpha_raw)

    def betas(self) -> np.ndarray:
        return -self.alphas() + _softplus(self.beta_raw)

    def to_dict(self) -> dict:
        def enc(a):
            return None if a is None else {"shape": list(a.shape), "data": a.ravel().tolist()}

        return {
            "kind": "radial-flow",
            "dim": self.dim,
            "centers": enc(self.centers),
            "alpha_raw": enc(self.alpha_raw),
            "beta_raw": enc(self.beta_raw),
            "projection": enc(self.projection),
            "shift": enc(self.shift),
            "scale": enc(self.scale),
            "meta": self.meta,
            "history": self.history,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> RadialFlow:
        def dec(rec):
            return None if rec is None else np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])

        return cls(dec(doc["centers"]), dec(doc["alpha_raw"]), dec(doc["beta_raw"]), dec(doc["projection"]),
                   dec(doc["shift"]), dec(doc["scale"]), dict(doc.get("meta", {})), list(doc.get("history", [])))


def _input_map(f: RadialFlow, z: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != f.input_dim:
        raise ContractError(f"embedding dimension {z.shape[1]} != flow input dimension {f.input_dim}")
    if f.projection is not None:
        z = z @ f.projection
    return (z - f.shift) / f.scale


def radial_forward(f: RadialFlow, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Push mapped points through all layers; returns (base points, summed log|det J|)."""
    x = np.array(x, dtype=np.float64, ndmin=2)
    d = x.shape[1]
    logdet = np.zeros(x.shape[0])
    for c, a, b in zip(f.centers, f.alphas(), f.betas()):
        diff = x - c
        r = np.linalg.norm(diff, axis=1)
        h = 1.0 / (a + r)
        lin = 1.0 + b * h
        rad = 1.0 + b * a * h * h
        if np.any(lin <= 0) or np.any(rad <= 0):
            raise ContractError("radial layer is not invertible at this parameter state")
        logdet += (d - 1) * np.log(lin) + np.log(rad)
        x = x + (b * h)[:, None] * diff
    return x, logdet


def radial_inverse(f: RadialFlow, y: np.ndarray) -> np.ndarray:
    """Closed-form inverse of ``radial_forward`` (in mapped coordinates)."""
    y = np.array(y, dtype=np.float64, ndmin=2)
    for c, a, b in reversed(list(zip(f.centers, f.alphas(), f.betas()))):
        diff = y - c
        ry = np.linalg.norm(diff, axis=1)
        # r_y = r (1 + b / (a + r))  <=>  r^2 + (a + b - r_y) r - a r_y = 0
        q = a + b - ry
        r = 0.5 * (-q + np.sqrt(q * q + 4.0 * a * ry))
        y = c + diff / (1.0 + b / (a + r))[:, None]
    return y


def flow_logpdf_many(f: RadialFlow, z: np.ndarray) -> np.ndarray:
    u0 = _input_map(f, z)
    u, logdet = radial_forward(f, u0)
    d = u.shape[1]
    return -0.5 * d * LOG_2PI - 0.5 * np.sum(u * u, axis=1) + logdet - np.sum(np.log(f.scale))


def flow_logpdf(f: RadialFlow, z: np.ndarray) -> float:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ContractError("flow_logpdf expects a single embedding vector")
    return float(flow_logpdf_many(f, z[None, :])[0])


class RadialFlowModule(torch.nn.Module):
    """Differentiable twin of ``RadialFlow`` (radial layers only, no input map)."""

    def __init__(self, centers: np.ndarray, alpha_raw: np.ndarray, beta_raw: np.ndarray):
        super().__init__()
        self.centers = torch.nn.Parameter(torch.as_tensor(np.array(centers), dtype=torch.float64))
        self.alpha_raw = torch.nn.Parameter(torch.as_tensor(np.array(alpha_raw), dtype=torch.float64))
        self.beta_raw = torch.nn.Parameter(torch.as_tensor(np.array(beta_raw), dtype=torch.float64))

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        d = x.shape[1]
        logdet = torch.zeros(x.shape[0], dtype=x.dtype)
        alphas = torch.nn.functional.softplus(self.alpha_raw)
        betas = -alphas + torch.nn.functional.softplus(self.beta_raw)
        for c, a, b in zip(self.centers, alphas, betas):
            diff = x - c
            r = torch.linalg.vector_norm(diff, dim=1)
            h = 1.0 / (a + r)
            logdet = logdet + (d - 1) * torch.log1p(b * h) + torch.log1p(b * a * h * h)
            x = x + (b * h)[:, None] * diff
        return -0.5 * d * LOG_2PI - 0.5 * (x * x).sum(dim=1) + logdet

    def arrays(self):
        return tuple(t.detach().numpy().copy() for t in (self.centers, self.alpha_raw, self.beta_raw))


def init_radial_layers(dim: int, num_layers: int, rng: np.random.Generator, points: np.ndarray | None = None):
    """Identity initialisation: alpha_raw = beta_raw = 0 gives beta = 0; centres at data points."""
    if points is not None and len(points):
        centers = points[rng.integers(0, len(points), size=num_layers)]
    else:
        centers = rng.standard_normal((num_layers, dim))
    return np.array(centers, dtype=np.float64).reshape(num_layers, dim), np.zeros(num_layers), np.zeros(num_layers)


@dataclass(frozen=True)
class FlowConfig:
    num_layers: int = 8
    steps: int = 500
    learning_rate: float = 1e-2
    batch_size: int | None = None
    seed: int = 0
    standardize: bool = False


def flow_fit(points, cfg: FlowConfig = FlowConfig(), init: tuple | None = None) -> RadialFlow:
    """Maximum-likelihood fit of a radial flow with Adam; returns the best parameters seen.

    ``init`` optionally gives starting (centers, alpha_raw, beta_raw); otherwise layers start at identity.
    """
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n, d = x.shape
    if n < 2:
        raise FitError("flow_fit needs at least 2 points")
    shift, scale = np.zeros(d), np.ones(d)
    if cfg.standardize:
        shift = x.mean(axis=0)
        scale = x.std(axis=0)
        scale[scale == 0] = 1.0
    u = (x - shift) / scale
    log_scale = float(np.sum(np.log(scale)))
    rng = np.random.default_rng([cfg.seed, 0xF10])
    if init is None:
        init = init_radial_layers(d, cfg.num_layers, rng, u)
    module = RadialFlowModule(*init)
    data = torch.from_numpy(u)
    opt = torch.optim.Adam(module.parameters(), lr=cfg.learning_rate)

    def mean_ll():
        with torch.no_grad():
            return float(module.log_prob(data).mean()) - log_scale

    best_ll, best = mean_ll(), module.arrays()
    history = [best_ll]
    for step in range(cfg.steps):
        if cfg.batch_size:
            idx = torch.from_numpy(rng.choice(n, size=min(cfg.batch_size, n), replace=False))
            batch = data[idx]
        else:
            batch = data
        loss = -module.log_prob(batch).mean()
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite flow loss at step {step}", {"step": step, "history": history})
        opt.zero_grad()
        loss.backward()
        opt.step()
        ll = mean_ll()
        history.append(ll)
        if ll > best_ll:
            best_ll, best = ll, module.arrays()
    return RadialFlow(*best, shift=shift, scale=scale, meta={"dim": d, "mean_log_likelihood": best_ll}, history=history)
