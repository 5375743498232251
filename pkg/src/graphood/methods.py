"""The five uncertainty estimators: single, MC dropout, deep ensemble, NUQ, NatPostNet."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from scipy.spatial.distance import cdist
from scipy.special import entr, logsumexp

from .data import Graph
from .density import (
    KDEModel,
    RadialFlow,
    FlowConfig,
    RadialFlowModule,
    flow_fit,
    flow_logpdf_many,
    init_radial_layers,
    kde_fit,
    kde_logpdf_many,
)
from .encoder import (
    DTYPE,
    EncoderConfig,
    EncoderParams,
    GCNModule,
    classify_graphs,
    encode_graphs,
    init_params,
    train_loop,
)
from .errors import ContractError, FitError

METHODS = ("single", "mc", "de", "nuq", "natpn")
# uncertainty types each method reports
UNCERTAINTY_TYPES = {
    "single": ("total",),
    "mc": ("data", "know", "total"),
    "de": ("data", "know", "total"),
    "nuq": ("data", "know"),
    "natpn": ("data", "know"),
}
JENSEN_TOL = 1e-9
# log of the smallest positive double; kernel weights below this underflow
LOG_UNDERFLOW = math.log(np.finfo(np.float64).tiny)


@dataclass(frozen=True)
class UncertaintyRecord:
    method: str
    u_data: float | None = None
    u_know: float | None = None
    u_total: float | None = None
    fallback: bool = False

    def get(self, kind: str) -> float | None:
        return {"data": self.u_data, "know": self.u_know, "total": self.u_total}[kind]


def check_categorical(p, tol: float = 1e-9) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim < 1 or np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise ContractError("not a valid categorical distribution")
    return p


def entropy_rows(p: np.ndarray) -> np.ndarray:
    """Entropy in nats along the last axis, with 0 ln 0 = 0."""
    return entr(np.asarray(p, dtype=np.float64)).sum(axis=-1)


def entropy(c) -> float:
    return float(entropy_rows(check_categorical(c)))


# --------------------------------------------------------------------------- entropy-based


def single_uncertainty(p: EncoderParams, g: Graph) -> tuple[np.ndarray, UncertaintyRecord]:
    probs = classify_graphs(p, [g])[0]
    return probs, UncertaintyRecord("single", u_total=entropy(probs))


@dataclass(frozen=True)
class Ensemble:
    """``deep-ensemble``: independently trained members; ``mc-dropout``: one base model."""

    members: tuple[EncoderParams, ...]
    kind: str = "deep-ensemble"

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if self.kind not in ("deep-ensemble", "mc-dropout"):
            raise ContractError(f"unknown ensemble kind {self.kind!r}")
        if self.kind == "deep-ensemble" and len(self.members) < 2:
            raise ContractError("a deep ensemble needs at least 2 members")
        if self.kind == "mc-dropout" and len(self.members) != 1:
            raise ContractError("MC dropout uses exactly one base model")
        shapes = {tuple(a.shape for a in m.arrays()) for m in self.members}
        if len(shapes) != 1:
            raise ContractError("ensemble members have different parameter shapes")


def ensemble_predict_many(e: Ensemble, graphs: Sequence[Graph], mc_samples: int = 20, seed: int = 0) -> np.ndarray:
    """Member predictive distributions, shape (members or samples, graphs, classes)."""
    for m in e.members:
        if not m.history:
            raise ContractError("ensemble member has not been trained")
    if e.kind == "deep-ensemble":
        return np.stack([classify_graphs(m, graphs) for m in e.members])
    if mc_samples < 2:
        raise ContractError("MC dropout needs mc_samples >= 2")
    gen = torch.Generator().manual_seed(seed)
    base = e.members[0]
    return np.stack([classify_graphs(base, graphs, dropout_active=True, rng=gen) for _ in range(mc_samples)])


def ensemble_predict(e: Ensemble, g: Graph, mc_samples: int = 20, seed: int = 0) -> list[np.ndarray]:
    return list(ensemble_predict_many(e, [g], mc_samples, seed)[:, 0, :])


def decompose_many(member_probs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(u_data, u_know, u_total) for stacked member predictions of shape (n, graphs, K)."""
    probs = np.asarray(member_probs, dtype=np.float64)
    if probs.shape[0] < 1:
        raise ContractError("decomposition needs at least one member")
    u_data = entropy_rows(probs).mean(axis=0)
    u_total = entropy_rows(probs.mean(axis=0))
    u_know = u_total - u_data
    u_know = np.where((u_know < 0) & (u_know >= -JENSEN_TOL), 0.0, u_know)
    return u_data, u_know, u_total


def decompose_uncertainty(members: Sequence, method: str = "ensemble") -> UncertaintyRecord:
    if len(members) == 0:
        raise ContractError("decomposition needs at least one member")
    probs = np.stack([check_categorical(m) for m in members])[:, None, :]
    u_data, u_know, u_total = (float(v[0]) for v in decompose_many(probs))
    return UncertaintyRecord(method, u_data=u_data, u_know=u_know, u_total=u_total)


# --------------------------------------------------------------------------- NUQ


@dataclass(frozen=True, eq=False)
class NUQModel:
    support: np.ndarray
    labels: np.ndarray
    num_classes: int
    kde: KDEModel
    bandwidth: float  # Nadaraya-Watson kernel width


def nuq_fit(embeddings, labels, bandwidth: str | float = "scott", num_classes: int | None = None,
            regression_bandwidth: float | None = None) -> NUQModel:
    """Store labelled support embeddings; by default one kernel width serves regression and density."""
    z = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    y = np.asarray(labels, dtype=int).ravel()
    if z.shape[0] == 0 or np.asarray(embeddings).size == 0:
        raise FitError("NUQ needs at least one support embedding")
    if z.shape[0] != y.shape[0]:
        raise FitError(f"{z.shape[0]} embeddings but {y.shape[0]} labels")
    k = int(y.max()) + 1 if num_classes is None else int(num_classes)
    if y.min() < 0 or y.max() >= k:
        raise FitError(f"labels outside [0, {k})")
    empty = np.flatnonzero(np.bincount(y, minlength=k) == 0)
    if empty.size:
        raise FitError(f"classes without support: {empty.tolist()}")
    kde = kde_fit(z, bandwidth)
    h = kde.bandwidth if regression_bandwidth is None else float(regression_bandwidth)
    if not h > 0:
        raise FitError("regression bandwidth must be positive")
    return NUQModel(z, y, k, kde, h)


def _log_eta(m: NUQModel, log_w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """log eta_k and log(1 - eta_k) from log kernel weights of shape (queries, n)."""
    per_class = np.stack(
        [logsumexp(log_w[:, m.labels == k], axis=1) for k in range(m.num_classes)], axis=1
    )
    total = logsumexp(per_class, axis=1, keepdims=True)
    log_eta = per_class - total
    log_rest = np.empty_like(per_class)
    for k in range(m.num_classes):
        others = np.delete(per_class, k, axis=1)
        log_rest[:, k] = logsumexp(others, axis=1) if others.shape[1] else -np.inf
    return log_eta, log_rest - total


@dataclass(frozen=True)
class NUQScores:
    eta: np.ndarray  # (queries, K)
    u_data: np.ndarray
    u_know: np.ndarray  # log(max_k sigma_k^2 / p(z))
    log_density: np.ndarray
    fallback: np.ndarray


def nuq_scores_many(m: NUQModel, queries: np.ndarray) -> NUQScores:
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q.shape[1] != m.support.shape[1]:
        raise ContractError(f"query dimension {q.shape[1]} != support dimension {m.support.shape[1]}")
    # log of the raw kernel weights exp(-|z - x_i|^2 / 2h^2)
    log_w = -0.5 * cdist(q, m.support, metric="sqeuclidean") / m.bandwidth ** 2
    fallback = log_w.max(axis=1) < LOG_UNDERFLOW
    log_eta, log_rest = _log_eta(m, log_w)
    if np.any(fallback):
        nearest = m.support[np.argmax(log_w[fallback], axis=1)]
        near_w = -0.5 * cdist(nearest, m.support, metric="sqeuclidean") / m.bandwidth ** 2
        log_eta[fallback], log_rest[fallback] = _log_eta(m, near_w)
    log_density = kde_logpdf_many(m.kde, q)
    log_sigma2 = np.max(log_eta + log_rest, axis=1)
    eta = np.exp(log_eta)
    return NUQScores(eta, eta.min(axis=1), log_sigma2 - log_density, log_density, fallback)


def nuq_eta(m: NUQModel, z) -> np.ndarray:
    return nuq_scores_many(m, np.asarray(z, dtype=np.float64)[None, :]).eta[0]


def nuq_scores(m: NUQModel, z) -> UncertaintyRecord:
    """u_data = min_k eta_k; u_know = log(max_k eta_k (1 - eta_k) / p(z)), a ranking score."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ContractError("nuq_scores expects a single embedding vector")
    s = nuq_scores_many(m, z[None, :])
    return UncertaintyRecord("nuq", u_data=float(s.u_data[0]), u_know=float(s.u_know[0]), fallback=bool(s.fallback[0]))


# --------------------------------------------------------------------------- NatPostNet


@dataclass(frozen=True)
class NatPNConfig:
    latent_dim: int = 16
    flow_layers: int = 8
    prior_beta: float = 1.0
    entropy_weight: float = 1e-4
    # None: training-set size times (4 pi)^(latent_dim / 2)
    budget: float | None = None
    # clamp on log evidence during training only
    max_log_evidence: float = 50.0
    # flow-only maximum-likelihood steps on the final training latents (0 disables)
    finetune_steps: int = 300
    finetune_learning_rate: float = 1e-2


@dataclass(frozen=True)
class DirichletPrediction:
    alpha: np.ndarray
    log_density: float

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        if a.ndim != 1 or not np.all(a > 0) or not np.all(np.isfinite(a)):
            raise ContractError("Dirichlet concentrations must be finite and positive")
        object.__setattr__(self, "alpha", a)

    @property
    def mean(self) -> np.ndarray:
        return self.alpha / self.alpha.sum()


def dirichlet_from_evidence(chi, evidence: float, prior_beta: float) -> np.ndarray:
    """alpha_c = prior_beta + evidence * chi_c."""
    if prior_beta <= 0:
        raise ContractError("prior_beta must be positive")
    if evidence < 0 or not math.isfinite(evidence):
        raise ContractError(f"evidence must be finite and non-negative, got {evidence}")
    return prior_beta + evidence * np.asarray(chi, dtype=np.float64)


def _natpn_budget(natpn: NatPNConfig, n_train: int, latent_dim: int) -> float:
    if natpn.budget is not None:
        return float(natpn.budget)
    return math.exp(math.log(n_train) + 0.5 * latent_dim * math.log(4.0 * math.pi))


class _NatPNNet(torch.nn.Module):
    def __init__(self, encoder: GCNModule, hidden: int, latent: int, flow: RadialFlowModule, rng: np.random.Generator):
        super().__init__()
        self.encoder = encoder
        if hidden > latent:
            bound = 1.0 / math.sqrt(hidden)
            w = rng.uniform(-bound, bound, size=(hidden, latent))
            self.projection = torch.nn.Parameter(torch.from_numpy(w))
        else:
            self.projection = None
        self.norm = torch.nn.BatchNorm1d(latent, affine=False, dtype=DTYPE)
        self.flow = flow

    def forward(self, batch, generator=None):
        z = self.encoder.embed(batch, generator)
        chi = torch.softmax(self.encoder.head(z), dim=1)
        u = z @ self.projection if self.projection is not None else z
        if self.training and batch.num_graphs < 2:
            self.norm.eval()
            u = self.norm(u)
            self.norm.train()
        else:
            u = self.norm(u)
        return chi, self.flow.log_prob(u)


def _bayesian_loss(chi, log_q, y, log_budget, prior_beta, entropy_weight, cap):
    log_n = torch.clamp(log_q + log_budget, max=cap)
    alpha = prior_beta + torch.exp(log_n)[:, None] * chi
    alpha0 = alpha.sum(dim=1)
    expected_ll = torch.digamma(alpha.gather(1, y[:, None]).squeeze(1)) - torch.digamma(alpha0)
    loss = -expected_ll
    if entropy_weight:
        loss = loss - entropy_weight * torch.distributions.Dirichlet(alpha).entropy()
    return loss, alpha


def train_natpn(train: Sequence[Graph], val: Sequence[Graph], cfg: EncoderConfig,
                natpn: NatPNConfig = NatPNConfig()) -> tuple[EncoderParams, RadialFlow]:
    """Jointly train encoder, class head and latent radial flow with the Bayesian loss.

    Loss per graph: -E_{Dir(alpha)}[log mu_y] - entropy_weight * H[Dir(alpha)], where
    alpha = prior_beta + budget * q(z) * softmax(head(z)).
    """
    if not train:
        raise ContractError("training set is empty")
    input_dim = train[0].num_features
    encoder = GCNModule.from_params(init_params(cfg, input_dim))
    latent = min(natpn.latent_dim, cfg.hidden_dim)
    rng = np.random.default_rng([cfg.seed, 0xD1A])
    flow = RadialFlowModule(*init_radial_layers(latent, natpn.flow_layers, rng))
    net = _NatPNNet(encoder, cfg.hidden_dim, latent, flow, rng)
    budget = _natpn_budget(natpn, len(train), latent)
    log_budget = math.log(budget)

    def batch_loss(batch, gen):
        chi, log_q = net(batch, gen)
        loss, _ = _bayesian_loss(chi, log_q, batch.y, log_budget, natpn.prior_beta, natpn.entropy_weight,
                                 natpn.max_log_evidence)
        return loss.mean()

    def evaluate(batches):
        total, correct, n = 0.0, 0, 0
        for b in batches:
            chi, log_q = net(b)
            loss, alpha = _bayesian_loss(chi, log_q, b.y, log_budget, natpn.prior_beta, natpn.entropy_weight,
                                         natpn.max_log_evidence)
            total += float(loss.sum())
            correct += int((alpha.argmax(dim=1) == b.y).sum())
            n += b.num_graphs
        return total / n, correct / n

    history = train_loop(cfg, list(net.parameters()), train, val, batch_loss, evaluate, [net])
    params = encoder.to_params(input_dim, history)
    centers, a_raw, b_raw = flow.arrays()
    mean = net.norm.running_mean.detach().numpy().copy()
    scale = np.sqrt(net.norm.running_var.detach().numpy() + net.norm.eps)
    projection = None if net.projection is None else net.projection.detach().numpy().copy()
    if natpn.finetune_steps > 0 and cfg.max_epochs > 0 and len(train) >= 2:
        z = encode_graphs(params, train)
        u = ((z @ projection if projection is not None else z) - mean) / scale
        fit = flow_fit(u, FlowConfig(natpn.flow_layers, natpn.finetune_steps, natpn.finetune_learning_rate,
                                     seed=cfg.seed), init=(centers, a_raw, b_raw))
        centers, a_raw, b_raw = fit.centers, fit.alpha_raw, fit.beta_raw
    # evidence must not change when the density moves from normalised latent to projected coordinates
    flow_budget = math.exp(log_budget + float(np.sum(np.log(scale))))
    meta = {"budget": flow_budget, "prior_beta": natpn.prior_beta, "latent_dim": latent}
    return params, RadialFlow(centers, a_raw, b_raw, projection, mean, scale, meta)


def natpn_posterior_many(p: EncoderParams, f: RadialFlow, graphs: Sequence[Graph],
                         prior_beta: float | None = None, budget: float | None = None) -> list[DirichletPrediction]:
    prior_beta = f.meta.get("prior_beta", 1.0) if prior_beta is None else prior_beta
    budget = f.meta.get("budget", 1.0) if budget is None else budget
    if budget <= 0:
        raise ContractError("budget must be positive")
    z = encode_graphs(p, graphs)
    chi = classify_graphs(p, graphs)
    log_density = flow_logpdf_many(f, z)
    if not np.all(np.isfinite(log_density)):
        raise ContractError("non-finite flow log-density")
    with np.errstate(over="ignore"):
        evidence = budget * np.exp(log_density)
    return [DirichletPrediction(dirichlet_from_evidence(c, float(n), prior_beta), float(ld))
            for c, n, ld in zip(chi, evidence, log_density)]


def natpn_posterior(p: EncoderParams, f: RadialFlow, g: Graph, prior_beta: float | None = None,
                    budget: float | None = None) -> DirichletPrediction:
    """alpha = prior_beta + budget * exp(log q(z)) * softmax(head(z))."""
    return natpn_posterior_many(p, f, [g], prior_beta, budget)[0]


def natpn_uncertainty(d: DirichletPrediction) -> tuple[np.ndarray, UncertaintyRecord]:
    mean = d.mean
    return mean, UncertaintyRecord("natpn", u_data=float(entropy_rows(mean)), u_know=-float(d.log_density))
