"""State encoder and the contrastive alignment losses that train it.

The encoder maps a state to an ``n_z``-dimensional latent. The transition
code of a slice ``(s, s')`` is ``phi(s') - phi(s)``. The default alignment
loss is an InfoNCE objective that treats the skill ``z`` as context and the
transition code as the prediction; the other kinds (``mse``, ``vmf``,
``lsd``, ``cic``) swap in the alignment terms of related skill-discovery
methods for ablations.

Losses are averaged over the batch. Each loss function back-propagates into
the encoder (and the CIC skill projector) unless ``backward=False``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ShapeError
from .nn import Adam, Mlp, mlp_init

log = logging.getLogger(__name__)

LOSS_KINDS = ("cim", "mse", "vmf", "lsd", "cic")


class Encoder:
    def __init__(self, net: Mlp):
        self.net = net

    @property
    def state_dim(self) -> int:
        return self.net.in_dim

    @property
    def n_z(self) -> int:
        return self.net.out_dim

    def copy(self) -> "Encoder":
        return Encoder(self.net.copy())


def make_encoder(state_dim: int, n_z: int, hidden=(64,), seed: int = 0) -> Encoder:
    return Encoder(mlp_init([state_dim, *hidden, n_z], seed))


def identity_encoder(dim: int) -> Encoder:
    """Linear identity map; used where rewards should live in raw state space."""
    return Encoder(Mlp.from_arrays([(np.eye(dim), np.zeros(dim))]))


def encode(enc: Encoder, s) -> np.ndarray:
    return enc.net.forward(s)[0]


def phi_diff(enc: Encoder, s, s_next) -> np.ndarray:
    return encode(enc, s_next) - encode(enc, s)


@dataclass
class AlignmentBatch:
    """Transition slices ``(s, s_next)`` with the skill active when they were taken.

    ``skill_index`` is set for categorical skills only; pairs sharing the
    anchor's index are then left out of its negative set.
    """

    s: np.ndarray
    s_next: np.ndarray
    z: np.ndarray
    skill_index: np.ndarray | None = None

    def __post_init__(self):
        self.s = np.atleast_2d(np.asarray(self.s, dtype=np.float64))
        self.s_next = np.atleast_2d(np.asarray(self.s_next, dtype=np.float64))
        self.z = np.atleast_2d(np.asarray(self.z, dtype=np.float64))
        n = len(self.s)
        if n == 0:
            raise ContractError("alignment batch is empty")
        if self.s_next.shape != self.s.shape or len(self.z) != n:
            raise ShapeError("s, s_next and z must have one row per pair and matching state widths")
        if self.skill_index is not None:
            self.skill_index = np.asarray(self.skill_index, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.s)

    def subset(self, idx) -> "AlignmentBatch":
        return AlignmentBatch(self.s[idx], self.s_next[idx], self.z[idx],
                              None if self.skill_index is None else self.skill_index[idx])


# ------------------------------------------------------------------ helpers

def _contrast_mask(batch: AlignmentBatch) -> np.ndarray:
    """mask[i, j]: pair j enters anchor i's log-partition (itself or a negative)."""
    n = len(batch)
    if batch.skill_index is None:
        return np.ones((n, n), dtype=bool)
    mask = batch.skill_index[:, None] != batch.skill_index[None, :]
    mask[np.diag_indices(n)] = True
    return mask


def _info_nce(logits: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean of ``-logits[i,i] + logsumexp_{mask[i]} logits[i,:]`` and its gradient."""
    n = logits.shape[0]
    masked = np.where(mask, logits, -np.inf)
    top = masked.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(masked - top), 0.0)
    tot = e.sum(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(tot[:, 0])
    per = lse - np.diag(logits)
    grad = e / tot
    grad[np.diag_indices(n)] -= 1.0
    return float(per.mean()), grad / n


def _unit_rows(u: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(u, axis=1)
    if np.any(norm == 0.0) or not np.all(np.isfinite(norm)):
        raise NumericError(f"zero-norm or non-finite {what} passed to cosine similarity")
    return u / norm[:, None], norm


def _unit_backward(g: np.ndarray, unit: np.ndarray, norm: np.ndarray) -> np.ndarray:
    return (g - np.sum(g * unit, axis=1, keepdims=True) * unit) / norm[:, None]


def _encode_pair(enc: Encoder, batch: AlignmentBatch):
    if batch.s.shape[1] != enc.state_dim:
        raise ShapeError(f"encoder expects states of width {enc.state_dim}, got {batch.s.shape[1]}")
    if batch.z.shape[1] != enc.n_z:
        raise ShapeError(f"encoder emits {enc.n_z} dims, skills have {batch.z.shape[1]}")
    n = len(batch)
    out, cache = enc.net.forward(np.concatenate([batch.s, batch.s_next]))
    return out[:n], out[n:], cache


def _backprop_pair(enc: Encoder, cache, g_s: np.ndarray, g_next: np.ndarray) -> None:
    enc.net.backward(cache, np.concatenate([g_s, g_next]))


# ------------------------------------------------------------------ losses

def loss_cim(enc: Encoder, batch: AlignmentBatch, backward: bool = True) -> float:
    f_s, f_next, cache = _encode_pair(enc, batch)
    d = f_next - f_s
    logits = batch.z @ d.T  # logits[i, j] = d_j . z_i
    loss, g = _info_nce(logits, _contrast_mask(batch))
    if backward:
        g_d = g.T @ batch.z
        _backprop_pair(enc, cache, -g_d, g_d)
    return loss


def _loss_mse(enc, batch, backward):
    f_s, f_next, cache = _encode_pair(enc, batch)
    r = f_next - batch.z
    loss = float(np.mean(np.sum(r * r, axis=1)))
    if backward:
        _backprop_pair(enc, cache, np.zeros_like(f_s), 2.0 * r / len(batch))
    return loss


def _loss_vmf(enc, batch, backward):
    f_s, f_next, cache = _encode_pair(enc, batch)
    u, un = _unit_rows(f_next, "encoder output")
    w, _ = _unit_rows(batch.z, "skill")
    cos = np.sum(u * w, axis=1)
    loss = float(-cos.mean())
    if backward:
        g = _unit_backward(-w / len(batch), u, un)
        _backprop_pair(enc, cache, np.zeros_like(f_s), g)
    return loss


def _loss_lsd(enc, batch, backward, weight):
    f_s, f_next, cache = _encode_pair(enc, batch)
    d = f_next - f_s
    dn = np.linalg.norm(d, axis=1)
    dist = np.linalg.norm(batch.s_next - batch.s, axis=1)
    per = -np.sum(d * batch.z, axis=1) + weight * (dn - dist)
    loss = float(per.mean())
    if backward:
        safe = np.where(dn > 0.0, dn, 1.0)
        g_norm = np.where((dn > 0.0)[:, None], d / safe[:, None], 0.0)
        g_d = (-batch.z + weight * g_norm) / len(batch)
        _backprop_pair(enc, cache, -g_d, g_d)
    return loss


def _loss_cic(enc, batch, backward, projector: Mlp):
    f_s, f_next, cache = _encode_pair(enc, batch)
    tau = np.concatenate([f_s, f_next], axis=1)
    if projector.out_dim != tau.shape[1]:
        raise ShapeError(f"skill projector must emit {tau.shape[1]} dims, emits {projector.out_dim}")
    pz, pcache = projector.forward(batch.z)
    t_unit, t_norm = _unit_rows(tau, "transition embedding")
    p_unit, p_norm = _unit_rows(pz, "projected skill")
    logits = p_unit @ t_unit.T  # logits[i, j] = S_c(tau_j, phi_z(z_i))
    loss, g = _info_nce(logits, _contrast_mask(batch))
    if backward:
        g_tau = _unit_backward(g.T @ p_unit, t_unit, t_norm)
        g_pz = _unit_backward(g @ t_unit, p_unit, p_norm)
        k = f_s.shape[1]
        _backprop_pair(enc, cache, g_tau[:, :k], g_tau[:, k:])
        projector.backward(pcache, g_pz)
    return loss


def make_skill_projector(n_z: int, hidden: int = 64, seed: int = 0) -> Mlp:
    """The CIC skill projection net: ``n_z -> hidden -> 2 n_z``."""
    return mlp_init([n_z, hidden, 2 * n_z], seed)


def loss_variant(kind: str, enc: Encoder, batch: AlignmentBatch, aux: dict | None = None,
                 backward: bool = True) -> float:
    """Alignment loss by name.

    ``aux`` carries ``lsd_weight`` (float, default 10) for ``lsd`` and
    ``projector`` (an :class:`Mlp`) for ``cic``.
    """
    aux = aux or {}
    if kind == "cim":
        return loss_cim(enc, batch, backward)
    if kind == "mse":
        return _loss_mse(enc, batch, backward)
    if kind == "vmf":
        return _loss_vmf(enc, batch, backward)
    if kind == "lsd":
        return _loss_lsd(enc, batch, backward, float(aux.get("lsd_weight", 10.0)))
    if kind == "cic":
        if "projector" not in aux:
            raise ConfigError("cic loss needs aux['projector']")
        return _loss_cic(enc, batch, backward, aux["projector"])
    raise ConfigError(f"unknown alignment loss {kind!r}; expected one of {LOSS_KINDS}")


def mi_lower_bound(loss_mean: float, batch_size: int) -> float:
    """Per-sample InfoNCE bound ``log N - mean loss`` on I(phi(s); z)."""
    return float(np.log(batch_size) - loss_mean)


class EncoderTrainer:
    """Owns the encoder optimizer and runs the per-iteration alignment steps."""

    def __init__(self, enc: Encoder, kind: str = "cim", lr: float = 3e-4, seed: int = 0,
                 lsd_weight: float = 10.0, cic_hidden: int = 64):
        if kind not in LOSS_KINDS:
            raise ConfigError(f"unknown alignment loss {kind!r}; expected one of {LOSS_KINDS}")
        self.enc = enc
        self.kind = kind
        self.aux: dict = {"lsd_weight": lsd_weight}
        params = enc.net.parameters()
        if kind == "cic":
            self.aux["projector"] = make_skill_projector(enc.n_z, cic_hidden, seed + 1)
            params = params + self.aux["projector"].parameters()
        self.opt = Adam(params, lr=lr)
        self.rng = np.random.default_rng(seed)
        self.skipped = 0

    def update(self, buffer: AlignmentBatch, n_steps: int, batch_size: int) -> float:
        return encoder_update(self, buffer, n_steps, batch_size)


def encoder_update(trainer: EncoderTrainer, buffer: AlignmentBatch, n_steps: int,
                   batch_size: int) -> float:
    """``n_steps`` Adam steps on random minibatches of ``buffer``; returns the mean loss."""
    if n_steps <= 0:
        return 0.0
    if len(buffer) < batch_size:
        trainer.skipped += 1
        log.warning("encoder update skipped: buffer holds %d slices, need %d", len(buffer), batch_size)
        return 0.0
    total = 0.0
    for _ in range(n_steps):
        idx = trainer.rng.choice(len(buffer), size=batch_size, replace=False)
        trainer.opt.zero_grad()
        total += loss_variant(trainer.kind, trainer.enc, buffer.subset(idx), trainer.aux)
        trainer.opt.step()
    return total / n_steps
