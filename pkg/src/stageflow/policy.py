"""Policy core: prefix construction, cue-conditioned FiLM modulation,
block-structured attention, and the flow-matching action head.

Layout of one forward pass: vision rows and instruction tokens embed into a
prefix; the cue embedding drives a bottleneck MLP whose output splits into
per-channel scale/shift applied token-wise to the prefix (masked positions
zeroed after modulation); proprioception embeds into a single state token;
noisy action rows plus one sinusoidal timestep token form the suffix. The
attention mask is block-structured: prefix attends only to valid prefix,
suffix attends to valid prefix and causally to itself.

Actions are normalized: dx, dy in [-1, 1] units of v_max, grip in [-1, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    backward,
    concat,
    constant,
    matmul,
    param,
    rms_norm,
    silu,
    softmax,
    tape,
    texp,
    tmean,
    tsum,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .errors import ConfigurationError, ContractError, DimensionError, FingerprintMismatch
from .observer import POOLED_DIM
from .rng import Rng

PAD_ID = 0
UNK_ID = 1

# Fault-injection hook for the verification harness: when set, the additive
# FiLM term enters with a flipped sign, which the formula check must catch.
FAULT_NEGATE_BETA = False


def build_vocab(instructions) -> list[str]:
    words = sorted({w for text in instructions for w in text.split()})
    return ["<pad>", "<unk>", *words]


def tokenize(instruction: str, vocab: list[str], budget: int) -> tuple[np.ndarray, bool]:
    """Word ids padded to `budget`; returns (ids, truncated flag)."""
    index = {w: i for i, w in enumerate(vocab)}
    words = instruction.split()
    truncated = len(words) > budget
    ids = [index.get(w, UNK_ID) for w in words[:budget]]
    ids += [PAD_ID] * (budget - len(ids))
    return np.array(ids, dtype=np.int64), truncated


@dataclass
class PrefixBatch:
    tokens: Tensor  # (B, S, D)
    mask: np.ndarray  # (B, S), 1 = valid
    truncated: int = 0  # count of truncated instructions in the batch


@dataclass
class Context:
    """Fusion output: modulated prefix plus the proprioceptive state token."""

    prefix: Tensor  # (B, S, D)
    mask: np.ndarray  # (B, S)
    state_token: Tensor  # (B, 1, D)


def xavier_uniform(rng: Rng, shape: tuple[int, int], scale: float = 1.0) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[1]
    limit = math.sqrt(6.0 / (fan_in + fan_out)) * scale
    flat = np.array([rng.uniform() for _ in range(fan_in * fan_out)])
    return ((flat * 2.0 - 1.0) * limit).reshape(shape)


def init_film_head(rng: Rng, d_cue: int, hidden: int, d_model: int) -> dict[str, np.ndarray]:
    """Bottleneck MLP init: fan-based uniform hidden layer, final projection
    scaled by 0.01, zero biases — near-identity modulation at start."""
    return {
        "w1": xavier_uniform(rng, (d_cue, hidden)),
        "b1": np.zeros(hidden),
        "w2": xavier_uniform(rng, (hidden, 2 * d_model), scale=0.01),
        "b2": np.zeros(2 * d_model),
    }


def film_params(z: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> tuple[Tensor, Tensor]:
    """[gamma, beta] = h(z) through the two-layer bottleneck."""
    hidden = silu(matmul(z, w1) + b1)
    out = matmul(hidden, w2) + b2
    d_model = out.shape[-1] // 2
    return out[:, :d_model], out[:, d_model:]


def ts_film(
    prefix: PrefixBatch,
    z: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    alpha_raw: Tensor,
) -> PrefixBatch:
    """Token-wise modulation: (P + alpha * (gamma ⊙ P + beta)) ⊙ M.

    gamma/beta broadcast across tokens; the validity mask applies after
    modulation, so masked rows come out exactly zero whatever they held.
    alpha = exp(alpha_raw) keeps the modulation factor positive.
    """
    p = prefix.tokens
    if z.shape[-1] != w1.shape[0]:
        raise ConfigurationError(f"cue width {z.shape[-1]} != film input {w1.shape[0]}")
    if w2.shape[-1] != 2 * p.shape[-1]:
        raise ConfigurationError("film head output must be twice the token width")
    gamma, beta = film_params(z, w1, b1, w2, b2)
    b_sz = p.shape[0]
    d_model = p.shape[-1]
    gamma3 = gamma.reshape((b_sz, 1, d_model))
    beta3 = beta.reshape((b_sz, 1, d_model))
    alpha = texp(alpha_raw)
    modulation = gamma3 * p + (-beta3 if FAULT_NEGATE_BETA else beta3)
    out = (p + alpha * modulation) * constant(prefix.mask[:, :, None])
    return PrefixBatch(tokens=out, mask=prefix.mask, truncated=prefix.truncated)


def block_attention(
    x: Tensor,
    prefix_len: int,
    prefix_valid: np.ndarray,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    heads: int,
) -> Tensor:
    """Scaled dot-product attention under the block-structured mask.

    Prefix queries see only valid prefix keys (computed on the prefix block
    alone, so suffix contents cannot perturb prefix outputs even at the bit
    level); suffix queries see valid prefix keys plus suffix keys at
    positions <= their own. Invalid prefix keys are attendable by no one.
    """
    b_sz, total_len, d_model = x.shape
    suffix_len = total_len - prefix_len
    if suffix_len < 2:
        raise ContractError(f"sequence length {total_len} too short for prefix {prefix_len}")
    if prefix_valid.shape != (b_sz, prefix_len):
        raise ContractError("prefix validity mask shape mismatch")
    if d_model % heads:
        raise ConfigurationError(f"d_model {d_model} not divisible by heads {heads}")
    dh = d_model // heads
    scale = 1.0 / math.sqrt(dh)

    def split_heads(t: Tensor) -> Tensor:
        return t.reshape((b_sz, total_len, heads, dh)).transpose((0, 2, 1, 3))

    q = split_heads(matmul(x, wq))
    k = split_heads(matmul(x, wk))
    v = split_heads(matmul(x, wv))

    key_bias = np.where(prefix_valid > 0, 0.0, -np.inf)[:, None, None, :]  # (B,1,1,S)

    qp = q[:, :, :prefix_len]
    kp = k[:, :, :prefix_len]
    vp = v[:, :, :prefix_len]
    logits_p = matmul(qp, kp.transpose((0, 1, 3, 2))) * scale + constant(key_bias)
    out_p = matmul(softmax(logits_p), vp)

    qs = q[:, :, prefix_len:]
    suffix_bias = np.zeros((b_sz, 1, suffix_len, total_len))
    suffix_bias[:, :, :, :prefix_len] = key_bias
    causal = np.triu(np.full((suffix_len, suffix_len), -np.inf), k=1)
    suffix_bias[:, :, :, prefix_len:] = causal[None, None]
    logits_s = matmul(qs, k.transpose((0, 1, 3, 2))) * scale + constant(suffix_bias)
    out_s = matmul(softmax(logits_s), v)

    merged = concat([out_p, out_s], axis=2).transpose((0, 2, 1, 3)).reshape((b_sz, total_len, d_model))
    return matmul(merged, wo)


def tau_embedding(tau: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of the flow time, dim/2 octave frequencies."""
    tau = np.asarray(tau, dtype=np.float64).reshape(-1, 1)
    freqs = 2.0 ** np.arange(dim // 2)
    angles = tau * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def fm_targets(actions: np.ndarray, noise: np.ndarray, tau) -> tuple[np.ndarray, np.ndarray]:
    """Straight-line interpolant v_tau = (1-tau) A + tau eps and its time
    derivative u = eps - A (independent of tau)."""
    if noise.shape != actions.shape:
        raise DimensionError(f"noise shape {noise.shape} != actions shape {actions.shape}")
    tau_arr = np.asarray(tau, dtype=np.float64)
    if np.any(tau_arr < 0.0) or np.any(tau_arr > 1.0):
        raise ContractError("tau must lie in [0, 1]")
    v_tau = (1.0 - tau_arr) * actions + tau_arr * noise
    u_tau = noise - actions
    return v_tau, u_tau


def fm_loss(v_pred: Tensor, u_target: np.ndarray) -> Tensor:
    """Squared L2 regression onto the target velocity: sum over chunk
    elements, mean over the batch."""
    if tuple(v_pred.shape) != tuple(u_target.shape):
        raise DimensionError(f"prediction {v_pred.shape} vs target {u_target.shape}")
    diff = v_pred - constant(u_target)
    per_sample = tsum(diff * diff, axis=(1, 2))
    return tmean(per_sample)


def euler_integrate(field, noise: np.ndarray, n_steps: int) -> np.ndarray:
    """Integrate x' = -v(x, tau) from tau=1 down to 0 with step 1/N,
    evaluating the field at tau = 1, 1-Δ, ..., Δ."""
    if n_steps < 1:
        raise ContractError("sampler needs at least one step")
    x = noise.copy()
    delta = 1.0 / n_steps
    for k in range(n_steps):
        tau = 1.0 - k * delta
        x = x - delta * field(x, tau)
    return x


def declare_done(displacements, grip: float, window: int, eps_motion: float) -> int:
    """d_t = 1 iff the mean executed displacement over the last `window`
    steps is strictly below eps_motion and the gripper is open/idle."""
    recent = list(displacements)[-window:]
    if len(recent) < window:
        return 0
    if grip > 0.0:
        return 0
    return 1 if float(np.mean(recent)) < eps_motion else 0


class Policy:
    """Parameter container plus the wiring between the ops above."""

    def __init__(self, config: RunConfig, vocab: list[str], rng: Rng | None = None,
                 weights: dict[str, np.ndarray] | None = None, observer_mode: str = "off"):
        self.config = config
        self.vocab = list(vocab)
        self.observer_mode = observer_mode
        self.d_model = config["policy.d_model"]
        self.depth = config["policy.depth"]
        self.heads = config["policy.heads"]
        self.chunk_len = config["policy.chunk_len"]
        self.action_dim = config["policy.action_dim"]
        self.d_cue = config["policy.d_cue"]
        self.film_hidden = config["policy.film_hidden"]
        self.tau_dim = config["policy.tau_dim"]
        self.instr_budget = config["policy.instr_budget"]
        self.exo_grid = config["world.exo_grid"]
        self.ego_grid = config["world.ego_grid"]
        self.v_max = config["world.v_max"]
        if weights is not None:
            self.params = {name: param(arr, name=name) for name, arr in weights.items()}
        else:
            if rng is None:
                raise ConfigurationError("fresh policy needs an init rng")
            self.params = self._init_params(rng)

    def _init_params(self, rng: Rng) -> dict[str, Tensor]:
        d = self.d_model
        exo_feat = self.exo_grid * 4 + 1
        ego_feat = self.ego_grid * 5 + 1
        film = init_film_head(rng.spawn("film"), self.d_cue, self.film_hidden, d)
        weights: dict[str, np.ndarray] = {
            "emb.exo.w": xavier_uniform(rng.spawn("exo"), (exo_feat, d)),
            "emb.exo.b": np.zeros(d),
            "emb.ego.w": xavier_uniform(rng.spawn("ego"), (ego_feat, d)),
            "emb.ego.b": np.zeros(d),
            "emb.instr": xavier_uniform(rng.spawn("instr"), (len(self.vocab), d)),
            "emb.state.w": xavier_uniform(rng.spawn("state"), (4, d)),
            "emb.state.b": np.zeros(d),
            "emb.act.w": xavier_uniform(rng.spawn("act"), (self.action_dim, d)),
            "emb.act.b": np.zeros(d),
            "emb.tau.w": xavier_uniform(rng.spawn("tau"), (self.tau_dim, d)),
            "emb.tau.b": np.zeros(d),
            "cue.proj": xavier_uniform(rng.spawn("proj"), (POOLED_DIM, self.d_cue)),
            "film.w1": film["w1"],
            "film.b1": film["b1"],
            "film.w2": film["w2"],
            "film.b2": film["b2"],
            "film.alpha_raw": np.zeros(()),
        }
        for i in range(self.depth):
            layer_rng = rng.spawn("layer", i)
            weights[f"layer{i}.norm"] = np.ones(d)
            weights[f"layer{i}.wq"] = xavier_uniform(layer_rng.spawn("q"), (d, d))
            weights[f"layer{i}.wk"] = xavier_uniform(layer_rng.spawn("k"), (d, d))
            weights[f"layer{i}.wv"] = xavier_uniform(layer_rng.spawn("v"), (d, d))
            weights[f"layer{i}.wo"] = xavier_uniform(layer_rng.spawn("o"), (d, d))
        weights["emb.act.pos"] = xavier_uniform(rng.spawn("act-pos"), (self.chunk_len, d))
        weights["final.norm"] = np.ones(d)
        weights["readout.w"] = xavier_uniform(rng.spawn("readout"), (d, self.action_dim))
        weights["readout.b"] = np.zeros(self.action_dim)
        return {name: param(arr, name=name) for name, arr in weights.items()}

    @property
    def prefix_len(self) -> int:
        return self.exo_grid + self.ego_grid + self.instr_budget

    def vision_rows(self, exo: np.ndarray, ego: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Row tokens: per-row channel features plus a normalized row index."""
        b_sz, g = exo.shape[0], exo.shape[1]
        k = ego.shape[1]
        exo_rows = exo.reshape(b_sz, g, g * 4)
        exo_idx = np.broadcast_to((np.arange(g) / max(g - 1, 1))[None, :, None], (b_sz, g, 1))
        ego_rows = ego.reshape(b_sz, k, k * 5)
        ego_idx = np.broadcast_to((np.arange(k) / max(k - 1, 1))[None, :, None], (b_sz, k, 1))
        return (
            np.concatenate([exo_rows, exo_idx], axis=2),
            np.concatenate([ego_rows, ego_idx], axis=2),
        )

    def build_prefix(self, exo: np.ndarray, ego: np.ndarray, instr_ids: np.ndarray) -> PrefixBatch:
        """exo rows ∥ ego rows ∥ instruction tokens, linearly embedded."""
        p = self.params
        exo_feats, ego_feats = self.vision_rows(exo, ego)
        exo_tok = matmul(constant(exo_feats), p["emb.exo.w"]) + p["emb.exo.b"]
        ego_tok = matmul(constant(ego_feats), p["emb.ego.w"]) + p["emb.ego.b"]
        b_sz = exo.shape[0]
        onehot = np.zeros((b_sz, self.instr_budget, len(self.vocab)))
        rows = np.arange(b_sz)[:, None]
        cols = np.arange(self.instr_budget)[None, :]
        onehot[rows, cols, instr_ids] = 1.0
        instr_tok = matmul(constant(onehot), p["emb.instr"])
        tokens = concat([exo_tok, ego_tok, instr_tok], axis=1)
        mask = np.concatenate(
            [
                np.ones((b_sz, self.exo_grid + self.ego_grid)),
                (instr_ids != PAD_ID).astype(np.float64),
            ],
            axis=1,
        )
        return PrefixBatch(tokens=tokens, mask=mask)

    def cue_tensor(self, pooled: np.ndarray) -> Tensor:
        """z = Proj(pooled features); Proj is the learned bias-free map."""
        return matmul(constant(pooled), self.params["cue.proj"])

    def modulate(self, prefix: PrefixBatch, pooled: np.ndarray | None) -> PrefixBatch:
        """Cue injection; with no cue (observer off) only the mask applies."""
        if pooled is None:
            masked = prefix.tokens * constant(prefix.mask[:, :, None])
            return PrefixBatch(tokens=masked, mask=prefix.mask, truncated=prefix.truncated)
        p = self.params
        return ts_film(
            prefix,
            self.cue_tensor(pooled),
            p["film.w1"],
            p["film.b1"],
            p["film.w2"],
            p["film.b2"],
            p["film.alpha_raw"],
        )

    def fuse(self, prefix: PrefixBatch, proprio: np.ndarray) -> Context:
        """Attach the linearly embedded state token; prefix passes through."""
        p = self.params
        state = matmul(constant(proprio[:, None, :]), p["emb.state.w"]) + p["emb.state.b"]
        return Context(prefix=prefix.tokens, mask=prefix.mask, state_token=state)

    def predict_velocity(self, ctx: Context, noisy_chunk: np.ndarray, tau: np.ndarray) -> Tensor:
        """v_theta(v_tau, tau | context) for a batch of noisy chunks."""
        p = self.params
        b_sz = noisy_chunk.shape[0]
        act_tok = matmul(constant(noisy_chunk), p["emb.act.w"]) + p["emb.act.b"] + p["emb.act.pos"]
        tau_feats = tau_embedding(tau, self.tau_dim)[:, None, :]
        tau_tok = matmul(constant(tau_feats), p["emb.tau.w"]) + p["emb.tau.b"]
        x = concat([ctx.prefix, ctx.state_token, tau_tok, act_tok], axis=1)
        s = self.prefix_len
        for i in range(self.depth):
            normed = rms_norm(x, p[f"layer{i}.norm"])
            x = x + block_attention(
                normed, s, ctx.mask,
                p[f"layer{i}.wq"], p[f"layer{i}.wk"], p[f"layer{i}.wv"], p[f"layer{i}.wo"],
                self.heads,
            )
        action_out = rms_norm(x[:, s + 2:, :], p["final.norm"])
        return matmul(action_out, p["readout.w"]) + p["readout.b"]

    def sample_chunk(self, ctx: Context | None, rng: Rng, n_steps: int | None = None,
                     field=None) -> np.ndarray:
        """Draw eps ~ N(0, I) and Euler-integrate the velocity field from
        tau=1 to 0; the result is clamped to the normalized action box."""
        steps = n_steps if n_steps is not None else self.config["policy.sample_steps"]
        eps = rng.normals((self.chunk_len, self.action_dim))
        if field is None:
            if ctx is None:
                raise ContractError("sampling from the learned field needs a context")
            def field(x, tau):
                return self.predict_velocity(ctx, x[None], np.array([tau])).data[0]
        x = euler_integrate(field, eps, steps)
        return np.clip(x, -1.0, 1.0)

    # ------------------------------------------------------------------
    # persistence
    # ------------------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "kind": "policy-checkpoint",
            "arch_fingerprint": self.config.arch_fingerprint(),
            "config_fingerprint": self.config.fingerprint(),
            "config": self.config.as_dict(),
            "vocab": self.vocab,
            "observer_mode": self.observer_mode,
        }

    def save(self, path, ema: dict[str, np.ndarray] | None = None) -> None:
        tensors = {name: t.data for name, t in self.params.items()}
        if ema is not None:
            tensors.update({f"ema::{name}": arr for name, arr in ema.items()})
        save_checkpoint(path, tensors, self.manifest())

    @classmethod
    def load(cls, path, config: RunConfig, use_ema: bool = True) -> "Policy":
        tensors, manifest = load_checkpoint(path)
        if manifest.get("arch_fingerprint") != config.arch_fingerprint():
            raise FingerprintMismatch(
                f"checkpoint arch fingerprint {manifest.get('arch_fingerprint')} "
                f"does not match config {config.arch_fingerprint()}"
            )
        raw = {n: a for n, a in tensors.items() if not n.startswith("ema::")}
        ema = {n[5:]: a for n, a in tensors.items() if n.startswith("ema::")}
        weights = ema if (use_ema and ema) else raw
        return cls(config, manifest["vocab"], weights=weights,
                   observer_mode=manifest.get("observer_mode", "off"))
