"""Attribute-regularized variational sequence autoencoder and training loop.

The objective is reconstruction cross-entropy plus a beta-weighted KLD to
the standard normal prior, optionally plus a gamma-weighted attribute
regularizer tying one latent dimension to a musical attribute.  Three
regularizers are available: z-score MAE ("nm"), the tanh/sign monotonic
pairwise loss ("pl") and power-transform MAE ("pt").

Architecture: single-layer bidirectional GRU encoder to (mu, log-variance),
and a single-level autoregressive GRU decoder with the latent vector
concatenated to every step input, trained with scheduled teacher forcing.
Each recurrent unroll is a single tape node with a hand-derived
backward-through-time rule; input-side matmuls are batched across steps so
one training step costs a handful of large dgemms instead of thousands of
small ones.  The loss heads are composed from the generic primitives.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd_nn as ag
from .attributes import AttributeKind
from .autograd_nn import Tensor
from .gaussianize import PowerTransformParams, apply_transform
from .melody_core import NUM_STEPS, VOCAB_SIZE, Corpus

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid training configuration, rejected before any step runs."""


@dataclass(frozen=True)
class AttributeStats:
    """Training-split mean and standard deviation of the raw attribute."""

    mean: float
    std: float

    def __post_init__(self) -> None:
        if not self.std > 0.0:
            raise ConfigError(f"attribute std must be positive, got {self.std}")

    @classmethod
    def from_sample(cls, values: np.ndarray) -> "AttributeStats":
        values = np.asarray(values, dtype=np.float64)
        return cls(float(values.mean()), float(values.std()))


@dataclass(frozen=True)
class RegularizerKind:
    """Which attribute regularizer to train with, and its weight."""

    kind: str  # "nm" | "pl" | "pt"
    gamma: float
    delta: float = 10.0  # pairwise spread for "pl"
    transform: PowerTransformParams | None = None  # fitted params for "pt"

    def __post_init__(self) -> None:
        if self.kind not in ("nm", "pl", "pt"):
            raise ConfigError(f"unknown regularizer kind {self.kind!r}")
        if self.gamma < 0.0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.kind == "pl" and self.delta <= 0.0:
            raise ConfigError(f"delta must be positive, got {self.delta}")
        if self.kind == "pt" and self.transform is None:
            raise ConfigError("pt regularizer needs fitted transform parameters")


@dataclass(frozen=True)
class TrainConfig:
    """Full experiment description; defaults are the desk-scale recipe."""

    regularizer: RegularizerKind
    attribute: AttributeKind = AttributeKind.CONTOUR
    iterations: int = 3000
    batch_size: int = 64
    latent_dim: int = 16
    reg_index: int = 0
    beta_max: float = 1e-3
    beta_rate: float | None = None  # None: reach 0.99*beta_max at 10% of training
    lr_start: float = 1e-3
    lr_floor: float = 1e-5
    lr_decay: float = 0.9999
    tf_k: float = 500.0
    hidden_size: int = 64
    embed_size: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        positives = {
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "latent_dim": self.latent_dim,
            "lr_start": self.lr_start,
            "lr_floor": self.lr_floor,
            "hidden_size": self.hidden_size,
            "embed_size": self.embed_size,
        }
        for name, value in positives.items():
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if not 0 <= self.reg_index < self.latent_dim:
            raise ConfigError(
                f"regularized index {self.reg_index} outside latent dimension {self.latent_dim}"
            )
        if self.beta_max < 0.0:
            raise ConfigError(f"beta_max must be >= 0, got {self.beta_max}")
        if self.beta_rate is not None and not 0.0 < self.beta_rate < 1.0:
            raise ConfigError(f"beta_rate must lie in (0, 1), got {self.beta_rate}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.tf_k <= 1.0:
            raise ConfigError(f"teacher-forcing constant must exceed 1, got {self.tf_k}")


@dataclass
class LatentBatch:
    """Posterior parameters from the stochastic encoder (graph nodes)."""

    means: Tensor
    log_variances: Tensor


# ---------------------------------------------------------------------------
# schedules


def beta_schedule(step: int, cfg: TrainConfig) -> float:
    """KLD weight annealed from 0 toward beta_max: beta_max * (1 - r^t).

    The default rate reaches 0.99 * beta_max a tenth of the way through
    training; at desk-scale iteration counts the prior needs its full weight
    early or weakly-used latent dimensions drift away from unit variance.
    """
    rate = cfg.beta_rate
    if rate is None:
        rate = 0.01 ** (1.0 / (0.1 * cfg.iterations))
    return cfg.beta_max * (1.0 - rate**step)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Exponential decay from lr_start, floored at lr_floor."""
    return max(cfg.lr_floor, cfg.lr_start * cfg.lr_decay**step)


_EXP_GUARD = 700.0


def tf_schedule(step: int, k: float) -> float:
    """Teacher-forcing probability on an inverse-sigmoid decay, k/(k + e^(t/k))."""
    exponent = step / k
    if exponent > _EXP_GUARD:
        return 0.0
    return k / (k + math.exp(exponent))


# ---------------------------------------------------------------------------
# losses


def recon_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean token-level cross-entropy over batch and steps."""
    batch, steps, vocab = logits.value.shape
    flat = ag.reshape(logits, (batch * steps, vocab))
    losses = ag.softmax_cross_entropy(flat, targets.reshape(-1))
    return ag.mean(losses)


def kld_loss(lat: LatentBatch) -> Tensor:
    """Mean KLD of diagonal-Gaussian posteriors against the N(0, I) prior."""
    mu, lv = lat.means, lat.log_variances
    term = ag.add_const(lv, 1.0)
    term = ag.sub(term, ag.mul(mu, mu))
    term = ag.sub(term, ag.exp(lv))
    return ag.scale(ag.mean(ag.tsum(term, axis=1)), -0.5)


def ar_loss_nm(z_col: Tensor, a: np.ndarray, stats: AttributeStats) -> Tensor:
    """MAE between the regularized latent and the z-scored attribute."""
    target = (np.asarray(a, dtype=np.float64) - stats.mean) / stats.std
    return ag.mean(ag.absolute(ag.sub(z_col, ag.constant(target))))


def ar_loss_pl(z_col: Tensor, a: np.ndarray, delta: float) -> Tensor:
    """Monotonic pairwise loss: MAE(tanh(delta * Dz), sign(Da)) over all pairs."""
    a = np.asarray(a, dtype=np.float64)
    sign_matrix = np.sign(a[:, None] - a[None, :])
    dz = ag.pairwise_diff(z_col)
    return ag.mean(ag.absolute(ag.sub(ag.tanh(ag.scale(dz, delta)), ag.constant(sign_matrix))))


def ar_loss_pt(z_col: Tensor, a: np.ndarray, params: PowerTransformParams) -> Tensor:
    """MAE between the regularized latent and the Gaussianized attribute."""
    target = np.asarray(apply_transform(params, a), dtype=np.float64)
    return ag.mean(ag.absolute(ag.sub(z_col, ag.constant(target))))


def total_loss(recon: Tensor, kld: Tensor, ar: Tensor | None, beta: float, gamma: float) -> Tensor:
    """recon + beta*kld + gamma*ar; zero weights contribute no graph nodes."""
    if beta < 0.0 or gamma < 0.0:
        raise ConfigError("loss weights must be >= 0")
    out = recon
    if beta != 0.0:
        out = ag.add(out, ag.scale(kld, beta))
    if gamma != 0.0:
        if ar is None:
            raise ConfigError("gamma > 0 requires an attribute-regularization loss")
        out = ag.add(out, ag.scale(ar, gamma))
    return out


# ---------------------------------------------------------------------------
# fused recurrent cells (single tape nodes with hand-derived BPTT)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # the intermediate exp may overflow to inf on the negative tail, in which
    # case the result is an exact 0.0; only the warning needs suppressing
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _sample_rows(logits: np.ndarray, rng: np.random.Generator, temperature: float) -> np.ndarray:
    """One categorical draw per row of a logit matrix."""
    shifted = (logits - logits.max(axis=1, keepdims=True)) / temperature
    probs = np.exp(shifted)
    cdf = np.cumsum(probs, axis=1)
    draws = rng.random((logits.shape[0], 1)) * cdf[:, -1:]
    return (cdf < draws).sum(axis=1)


class _GruTrace:
    """Per-step forward activations needed by backward-through-time."""

    __slots__ = ("h_prev", "gates", "cand", "reset_h")

    def __init__(self, steps: int):
        self.h_prev: list[np.ndarray] = [None] * steps  # type: ignore[list-item]
        self.gates: list[np.ndarray] = [None] * steps  # type: ignore[list-item]
        self.cand: list[np.ndarray] = [None] * steps  # type: ignore[list-item]
        self.reset_h: list[np.ndarray] = [None] * steps  # type: ignore[list-item]


def _gru_forward_step(
    trace: _GruTrace,
    t: int,
    h: np.ndarray,
    gate_x: np.ndarray,
    cand_x: np.ndarray,
    wg_h: np.ndarray,
    wc_h: np.ndarray,
    hid: int,
) -> np.ndarray:
    """One GRU step given the precomputed input-side contributions."""
    gates = _sigmoid(gate_x + h @ wg_h)
    update = gates[:, :hid]
    reset = gates[:, hid:]
    reset_h = reset * h
    cand = np.tanh(cand_x + reset_h @ wc_h)
    trace.h_prev[t] = h
    trace.gates[t] = gates
    trace.cand[t] = cand
    trace.reset_h[t] = reset_h
    return h + update * (cand - h)


def _gru_backward_step(
    trace: _GruTrace,
    t: int,
    dh: np.ndarray,
    wg_h: np.ndarray,
    wc_h: np.ndarray,
    d_pre_gates: np.ndarray,
    d_pre_cand: np.ndarray,
) -> np.ndarray:
    """Invert one step, filling the preallocated pre-activation gradient slabs."""
    hid = dh.shape[1]
    h_prev, gates, cand = trace.h_prev[t], trace.gates[t], trace.cand[t]
    update = gates[:, :hid]
    reset = gates[:, hid:]
    d_cand = dh * update
    dh_prev = dh - dh * update
    np.multiply(d_cand, 1.0 - cand * cand, out=d_pre_cand)
    d_reset_h = d_pre_cand @ wc_h.T
    dh_prev += d_reset_h * reset
    np.multiply(dh * (cand - h_prev), update * (1.0 - update), out=d_pre_gates[:, :hid])
    np.multiply(d_reset_h * h_prev, reset * (1.0 - reset), out=d_pre_gates[:, hid:])
    dh_prev += d_pre_gates @ wg_h.T
    return dh_prev


# ---------------------------------------------------------------------------
# model


@dataclass
class DecodeResult:
    logits: Tensor  # shape (B, 64, 130)
    tokens: np.ndarray  # argmax tokens, shape (B, 64)


_ENC_PARAM_ORDER = ("wg_x", "wg_h", "bg", "wc_x", "wc_h", "bc")
_DEC_PARAM_ORDER = (
    "dec_init_w",
    "dec_init_b",
    "dec_wg_e",
    "dec_wg_z",
    "dec_wg_h",
    "dec_bg",
    "dec_wc_e",
    "dec_wc_z",
    "dec_wc_h",
    "dec_bc",
    "dec_out_w",
    "dec_out_b",
)


class VibModel:
    """Bidirectional GRU encoder, latent bottleneck, autoregressive GRU decoder."""

    def __init__(
        self,
        latent_dim: int = 16,
        reg_index: int = 0,
        hidden_size: int = 64,
        embed_size: int = 16,
        vocab_size: int = VOCAB_SIZE,
        seed: int = 0,
    ):
        if not 0 <= reg_index < latent_dim:
            raise ConfigError(f"reg_index {reg_index} outside latent dim {latent_dim}")
        self.latent_dim = latent_dim
        self.reg_index = reg_index
        self.hidden_size = hidden_size
        self.embed_size = embed_size
        self.vocab_size = vocab_size
        rng = np.random.default_rng((seed, 0))
        self.params: dict[str, ag.Tensor] = {}
        e, h, d = embed_size, hidden_size, latent_dim
        self._add("embed", rng.normal(0.0, 0.5, (vocab_size, e)))
        for prefix in ("enc_f", "enc_b"):
            self._add(f"{prefix}_wg_x", self._glorot(rng, e, 2 * h))
            self._add(f"{prefix}_wg_h", self._glorot(rng, h, 2 * h))
            self._add(f"{prefix}_bg", np.zeros(2 * h))
            self._add(f"{prefix}_wc_x", self._glorot(rng, e, h))
            self._add(f"{prefix}_wc_h", self._glorot(rng, h, h))
            self._add(f"{prefix}_bc", np.zeros(h))
        # both latent heads start at zero so the posterior opens exactly at
        # the prior; spread then grows only where reconstruction earns it
        self._add("enc_mu_w", np.zeros((2 * h, d)))
        self._add("enc_mu_b", np.zeros(d))
        self._add("enc_lv_w", np.zeros((2 * h, d)))
        self._add("enc_lv_b", np.zeros(d))
        self._add("dec_init_w", self._glorot(rng, d, h))
        self._add("dec_init_b", np.zeros(h))
        self._add("dec_wg_e", self._glorot(rng, e, 2 * h))
        self._add("dec_wg_z", self._glorot(rng, d, 2 * h))
        self._add("dec_wg_h", self._glorot(rng, h, 2 * h))
        self._add("dec_bg", np.zeros(2 * h))
        self._add("dec_wc_e", self._glorot(rng, e, h))
        self._add("dec_wc_z", self._glorot(rng, d, h))
        self._add("dec_wc_h", self._glorot(rng, h, h))
        self._add("dec_bc", np.zeros(h))
        self._add("dec_out_w", self._glorot(rng, h, vocab_size))
        self._add("dec_out_b", np.zeros(vocab_size))

    @staticmethod
    def _glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, (fan_in, fan_out))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = ag.parameter(value, name)

    # -- encoder -----------------------------------------------------------

    def _encode_direction(self, prefix: str, tokens: np.ndarray, reverse: bool) -> Tensor:
        """Full 64-step GRU pass in one tape node (inputs batched across steps)."""
        p = self.params
        parents = (p["embed"],) + tuple(p[f"{prefix}_{n}"] for n in _ENC_PARAM_ORDER)
        embed, wg_x, wg_h, bg, wc_x, wc_h, bc = (t.value for t in parents)
        batch, steps = tokens.shape
        hid = self.hidden_size
        order = range(steps - 1, -1, -1) if reverse else range(steps)
        ids = tokens[:, list(order)]  # (B, T) in visit order
        flat_ids = ids.T.reshape(-1)  # step-major
        x_flat = embed[flat_ids]  # (T*B, E)
        gate_x = (x_flat @ wg_x + bg).reshape(steps, batch, 2 * hid)
        cand_x = (x_flat @ wc_x + bc).reshape(steps, batch, hid)

        trace = _GruTrace(steps)
        h = np.zeros((batch, hid))
        for t in range(steps):
            h = _gru_forward_step(trace, t, h, gate_x[t], cand_x[t], wg_h, wc_h, hid)

        def vjp(g: np.ndarray) -> tuple[np.ndarray, ...]:
            dh = g
            d_pre_gates = np.empty((steps, batch, 2 * hid))
            d_pre_cand = np.empty((steps, batch, hid))
            for t in range(steps - 1, -1, -1):
                dh = _gru_backward_step(
                    trace, t, dh, wg_h, wc_h, d_pre_gates[t], d_pre_cand[t]
                )
            pg_flat = d_pre_gates.reshape(-1, 2 * hid)
            pc_flat = d_pre_cand.reshape(-1, hid)
            h_prev_flat = np.concatenate(trace.h_prev, axis=0)
            reset_h_flat = np.concatenate(trace.reset_h, axis=0)
            dx_flat = pg_flat @ wg_x.T + pc_flat @ wc_x.T
            d_embed = np.zeros(embed.shape)
            np.add.at(d_embed, flat_ids, dx_flat)
            return (
                d_embed,
                x_flat.T @ pg_flat,  # wg_x
                h_prev_flat.T @ pg_flat,  # wg_h
                pg_flat.sum(axis=0),  # bg
                x_flat.T @ pc_flat,  # wc_x
                reset_h_flat.T @ pc_flat,  # wc_h
                pc_flat.sum(axis=0),  # bc
            )

        return Tensor(h, parents, vjp)

    def encode(self, tokens: np.ndarray) -> LatentBatch:
        """Bidirectional pass; final states map linearly to mu and log-variance."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] != NUM_STEPS:
            raise ValueError(f"expected token batch (B, {NUM_STEPS}), got {tokens.shape}")
        p = self.params
        forward = self._encode_direction("enc_f", tokens, reverse=False)
        backward_state = self._encode_direction("enc_b", tokens, reverse=True)
        final = ag.concat([forward, backward_state], axis=1)
        mu = ag.affine(final, p["enc_mu_w"], p["enc_mu_b"])
        logvar = ag.affine(final, p["enc_lv_w"], p["enc_lv_b"])
        return LatentBatch(mu, logvar)

    @staticmethod
    def reparameterize(lat: LatentBatch, noise: np.ndarray) -> Tensor:
        """z = mu + exp(log-variance / 2) * noise."""
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != lat.means.value.shape:
            raise ValueError(
                f"noise shape {noise.shape} does not match means {lat.means.value.shape}"
            )
        return ag.add(
            lat.means, ag.mul(ag.exp(ag.scale(lat.log_variances, 0.5)), ag.constant(noise))
        )

    # -- decoder -----------------------------------------------------------

    def decode(
        self,
        z: Tensor,
        targets: np.ndarray | None,
        tf_prob: float,
        rng: np.random.Generator,
        sample: bool = False,
        temperature: float = 1.0,
    ) -> DecodeResult:
        """Autoregressive decoding conditioned on z at every step.

        Each step consumes the previous ground-truth token with probability
        ``tf_prob`` (per sample) and the previous self-generated token
        otherwise; with no targets the decoder free-runs (requires
        tf_prob == 0).  Generated tokens are the per-step argmax, or draws
        from the output softmax when ``sample`` is set (generation only).
        The whole unroll is one tape node with logits of shape (B, 64, vocab).
        """
        if not 0.0 <= tf_prob <= 1.0:
            raise ValueError(f"tf_prob must lie in [0, 1], got {tf_prob}")
        if targets is None and tf_prob > 0.0:
            raise ValueError("teacher forcing requires targets")
        p = self.params
        parents = (p["embed"],) + tuple(p[n] for n in _DEC_PARAM_ORDER) + (z,)
        (
            embed,
            init_w,
            init_b,
            wg_e,
            wg_z,
            wg_h,
            bg,
            wc_e,
            wc_z,
            wc_h,
            bc,
            out_w,
            out_b,
        ) = (t.value for t in parents[:-1])
        z_val = z.value
        batch = z_val.shape[0]
        hid, e = self.hidden_size, self.embed_size
        steps = NUM_STEPS

        pre_init = z_val @ init_w + init_b
        h = np.tanh(pre_init)
        h0 = h
        gate_z = z_val @ wg_z + bg  # z contributes identically at every step
        cand_z = z_val @ wc_z + bc

        trace = _GruTrace(steps)
        logits = np.empty((batch, steps, self.vocab_size))
        hidden_states: list[np.ndarray] = []
        input_ids = np.empty((steps, batch), dtype=np.int64)
        out_tokens = np.empty((batch, steps), dtype=np.int64)
        use_zero_input = np.zeros((steps, 1, 1))
        generated: np.ndarray | None = None
        for t in range(steps):
            if t == 0:
                ids = np.zeros(batch, dtype=np.int64)  # embeddings masked to zero below
                x_emb = np.zeros((batch, e))
                use_zero_input[t] = 1.0
            else:
                if targets is not None:
                    teacher = rng.random(batch) < tf_prob
                    ids = np.where(teacher, targets[:, t - 1], generated)
                else:
                    ids = generated
                x_emb = embed[ids]
            input_ids[t] = ids
            gate_x = gate_z + x_emb @ wg_e
            cand_x = cand_z + x_emb @ wc_e
            h = _gru_forward_step(trace, t, h, gate_x, cand_x, wg_h, wc_h, hid)
            hidden_states.append(h)
            step_logits = h @ out_w + out_b
            logits[:, t, :] = step_logits
            if sample:
                generated = _sample_rows(step_logits, rng, temperature)
            else:
                generated = np.argmax(step_logits, axis=1)
            out_tokens[:, t] = generated

        def vjp(g: np.ndarray) -> tuple[np.ndarray, ...]:
            h_flat = np.concatenate(hidden_states, axis=0)  # step-major (T*B, H)
            g_steps = np.ascontiguousarray(np.swapaxes(g, 0, 1))  # (T, B, V)
            d_out_w = h_flat.T @ g_steps.reshape(-1, self.vocab_size)
            d_out_b = g_steps.reshape(-1, self.vocab_size).sum(axis=0)
            d_pre_gates = np.empty((steps, batch, 2 * hid))
            d_pre_cand = np.empty((steps, batch, hid))
            dh = np.zeros((batch, hid))
            for t in range(steps - 1, -1, -1):
                dh += g_steps[t] @ out_w.T
                dh = _gru_backward_step(
                    trace, t, dh, wg_h, wc_h, d_pre_gates[t], d_pre_cand[t]
                )
            pg_flat = d_pre_gates.reshape(-1, 2 * hid)
            pc_flat = d_pre_cand.reshape(-1, hid)
            h_prev_flat = np.concatenate(trace.h_prev, axis=0)
            reset_h_flat = np.concatenate(trace.reset_h, axis=0)
            # step-0 input is the zero vector, not an embedding row
            x_mask = 1.0 - use_zero_input
            x_flat = (embed[input_ids.reshape(-1)].reshape(steps, batch, e) * x_mask).reshape(-1, e)
            dx_emb = (pg_flat @ wg_e.T + pc_flat @ wc_e.T).reshape(steps, batch, e) * x_mask
            d_embed = np.zeros(embed.shape)
            np.add.at(d_embed, input_ids[1:].reshape(-1), dx_emb[1:].reshape(-1, e))
            # initial state through tanh
            d_h0 = dh * (1.0 - h0 * h0)
            dz = (
                pg_flat.reshape(steps, batch, -1).sum(axis=0) @ wg_z.T
                + pc_flat.reshape(steps, batch, -1).sum(axis=0) @ wc_z.T
                + d_h0 @ init_w.T
            )
            return (
                d_embed,
                z_val.T @ d_h0,  # dec_init_w
                d_h0.sum(axis=0),  # dec_init_b
                x_flat.T @ pg_flat,  # dec_wg_e
                z_val.T @ pg_flat.reshape(steps, batch, -1).sum(axis=0),  # dec_wg_z
                h_prev_flat.T @ pg_flat,  # dec_wg_h
                pg_flat.sum(axis=0),  # dec_bg
                x_flat.T @ pc_flat,  # dec_wc_e
                z_val.T @ pc_flat.reshape(steps, batch, -1).sum(axis=0),  # dec_wc_z
                reset_h_flat.T @ pc_flat,  # dec_wc_h
                pc_flat.sum(axis=0),  # dec_bc
                d_out_w,
                d_out_b,
                dz,
            )

        return DecodeResult(Tensor(logits, parents, vjp), out_tokens)

    def latent_column(self, z: Tensor) -> Tensor:
        batch = z.value.shape[0]
        return ag.reshape(ag.slice_axis(z, 1, self.reg_index, self.reg_index + 1), (batch,))

    def metadata(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "reg_index": self.reg_index,
            "hidden_size": self.hidden_size,
            "embed_size": self.embed_size,
            "vocab_size": self.vocab_size,
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], meta: dict) -> "VibModel":
        model = cls(
            latent_dim=meta["latent_dim"],
            reg_index=meta["reg_index"],
            hidden_size=meta["hidden_size"],
            embed_size=meta["embed_size"],
            vocab_size=meta["vocab_size"],
        )
        for name, p in model.params.items():
            if name not in arrays:
                raise ValueError(f"checkpoint missing array {name}")
            if arrays[name].shape != p.value.shape:
                raise ValueError(f"checkpoint array {name} has wrong shape")
            p.value = arrays[name].astype(np.float64)
        return model


def save_model(base: str | Path, model: VibModel, extra_metadata: dict | None = None) -> None:
    metadata = {"model": model.metadata()}
    if extra_metadata:
        metadata.update(extra_metadata)
    ag.save_checkpoint(base, model.params, metadata)


def load_model(base: str | Path) -> tuple[VibModel, dict]:
    arrays, metadata = ag.load_checkpoint(base)
    return VibModel.from_arrays(arrays, metadata["model"]), metadata


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: VibModel
    log_rows: list[dict]
    adam: ag.AdamState
    attribute_stats: AttributeStats
    excluded: int  # train melodies dropped for undefined attributes


LOG_FIELDS = ("step", "recon", "kld", "ar", "beta", "lr", "tf_prob", "total")


def _ar_loss(cfg: TrainConfig, z_col: Tensor, a: np.ndarray, stats: AttributeStats) -> Tensor:
    reg = cfg.regularizer
    if reg.kind == "nm":
        return ar_loss_nm(z_col, a, stats)
    if reg.kind == "pl":
        return ar_loss_pl(z_col, a, reg.delta)
    assert reg.transform is not None
    return ar_loss_pt(z_col, a, reg.transform)


def train(cfg: TrainConfig, corpus: Corpus, attr_table) -> TrainResult:
    """Run the full training loop; deterministic given cfg.seed.

    The attribute regularizer always acts on the sampled z (after
    reparameterization).  The AR loss value is computed and logged even when
    gamma is zero, but in that case contributes nothing to the total or to
    any gradient.
    """
    if len(attr_table) != len(corpus):
        raise ConfigError(
            f"attribute table rows ({len(attr_table)}) do not cover corpus ({len(corpus)})"
        )
    train_indices = corpus.indices("train")
    if not train_indices:
        raise ConfigError("corpus has no training split")
    attr_all = attr_table.column(cfg.attribute)
    usable = [i for i in train_indices if np.isfinite(attr_all[i])]
    excluded = len(train_indices) - len(usable)
    if len(usable) < 2:
        raise ConfigError("fewer than 2 training melodies with defined attributes")
    if cfg.batch_size > len(usable):
        raise ConfigError(
            f"batch size {cfg.batch_size} exceeds usable training melodies {len(usable)}"
        )

    tokens = corpus.to_array(usable)
    attrs = attr_all[usable]
    stats = AttributeStats.from_sample(attrs)

    model = VibModel(
        latent_dim=cfg.latent_dim,
        reg_index=cfg.reg_index,
        hidden_size=cfg.hidden_size,
        embed_size=cfg.embed_size,
        seed=cfg.seed,
    )
    adam = ag.AdamState()
    rng = np.random.default_rng((cfg.seed, 1))
    gamma = cfg.regularizer.gamma
    rows: list[dict] = []

    for step in range(cfg.iterations):
        beta = beta_schedule(step, cfg)
        lr = lr_schedule(step, cfg)
        tf_prob = tf_schedule(step, cfg.tf_k)

        batch_idx = rng.integers(0, len(usable), size=cfg.batch_size)
        x = tokens[batch_idx]
        a = attrs[batch_idx]

        lat = model.encode(x)
        noise = rng.standard_normal((cfg.batch_size, cfg.latent_dim))
        z = model.reparameterize(lat, noise)
        decoded = model.decode(z, x, tf_prob, rng)

        recon = recon_loss(decoded.logits, x)
        kld = kld_loss(lat)
        ar = _ar_loss(cfg, model.latent_column(z), a, stats)
        total = total_loss(recon, kld, ar, beta, gamma)

        ag.backward(total, model.params.values())
        grads = ag.collect_grads(model.params)
        grads, _norm = ag.clip_global_norm(grads, 1.0)
        adam.lr = lr
        ag.adam_step(model.params, grads, adam)

        rows.append(
            {
                "step": step,
                "recon": recon.item(),
                "kld": kld.item(),
                "ar": ar.item(),
                "beta": beta,
                "lr": lr,
                "tf_prob": tf_prob,
                "total": total.item(),
            }
        )
        if step % 200 == 0:
            log.debug(
                "step %d recon=%.4f kld=%.4f ar=%.4f", step, rows[-1]["recon"],
                rows[-1]["kld"], rows[-1]["ar"],
            )

    return TrainResult(model, rows, adam, stats, excluded)


def encode_corpus(
    model: VibModel, tokens: np.ndarray, batch_size: int = 256
) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means and log-variances for many melodies, as plain arrays."""
    mus, lvs = [], []
    for start in range(0, tokens.shape[0], batch_size):
        lat = model.encode(tokens[start : start + batch_size])
        mus.append(lat.means.value)
        lvs.append(lat.log_variances.value)
    return np.concatenate(mus, axis=0), np.concatenate(lvs, axis=0)


def generate_tokens(
    model: VibModel,
    z: np.ndarray,
    batch_size: int = 256,
    sample: bool = False,
    temperature: float = 1.0,
    seed: int = 0,
) -> np.ndarray:
    """Free-running decoding of latent vectors into token rows.

    Greedy argmax by default; with ``sample`` each step draws from the
    output softmax (deterministic in ``seed``).
    """
    rng = np.random.default_rng((seed, 3))
    outputs = []
    for start in range(0, z.shape[0], batch_size):
        chunk = ag.constant(z[start : start + batch_size])
        outputs.append(
            model.decode(chunk, None, 0.0, rng, sample=sample, temperature=temperature).tokens
        )
    return np.concatenate(outputs, axis=0)
