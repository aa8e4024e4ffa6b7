"""Flow-matching training loop: clip -> AdamW step -> EMA each iteration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .autodiff import backward, tape, zero_grads
from .config import RunConfig
from .errors import ConfigurationError
from .expert import DemoRecord
from .optim import OptimizerState, adamw_step, clip_global_norm, cosine_lr, init_optimizer
from .policy import Policy, build_vocab, fm_targets, fm_loss, tokenize
from .rng import stream


@dataclass
class DemoDataset:
    """Flattened chunk-boundary samples from a demo set."""

    exo: np.ndarray
    ego: np.ndarray
    proprio: np.ndarray
    cue: np.ndarray
    chunk: np.ndarray
    instr: np.ndarray  # (N, budget) token ids
    vocab: list[str]

    def __len__(self) -> int:
        return self.exo.shape[0]


def dataset_from_demos(demos: list[DemoRecord], budget: int) -> DemoDataset:
    if not demos:
        raise ConfigurationError("empty demo set")
    vocab = build_vocab(sorted({d.instruction for d in demos}))
    instr_rows = []
    for d in demos:
        ids, _ = tokenize(d.instruction, vocab, budget)
        instr_rows.append(np.broadcast_to(ids, (d.exo.shape[0], budget)))
    return DemoDataset(
        exo=np.concatenate([d.exo for d in demos]),
        ego=np.concatenate([d.ego for d in demos]),
        proprio=np.concatenate([d.proprio for d in demos]),
        cue=np.concatenate([d.cue for d in demos]),
        chunk=np.concatenate([d.chunk for d in demos]),
        instr=np.concatenate(instr_rows),
        vocab=vocab,
    )


def train_policy(
    config: RunConfig,
    demos: list[DemoRecord],
    seed: int,
    observer_mode: str | None = None,
    steps: int | None = None,
    checkpoint_path=None,
) -> tuple[Policy, OptimizerState, list[tuple[int, float, float]]]:
    """Train a fresh policy on the demo set.

    Returns (policy, optimizer state incl. EMA shadow, loss curve rows of
    (step, lr, loss)). Bitwise deterministic in (config, seed, demos).
    """
    mode = observer_mode if observer_mode is not None else config["train.observer"]
    if mode not in ("off", "oracle", "vlm"):
        raise ConfigurationError(f"unknown observer mode {mode!r}")
    total = steps if steps is not None else config["train.steps"]
    batch = config["train.batch_size"]
    n = config["policy.chunk_len"]
    a_dim = config["policy.action_dim"]

    data = dataset_from_demos(demos, config["policy.instr_budget"])
    policy = Policy(config, data.vocab, rng=stream(seed, "policy-init"), observer_mode=mode)
    opt = init_optimizer(
        policy.params,
        beta1=config["train.beta1"],
        beta2=config["train.beta2"],
        eps=config["train.adam_eps"],
        weight_decay=config["train.weight_decay"],
        ema_decay=config["train.ema"],
        clip_threshold=config["train.clip"],
    )
    rng_batch = stream(seed, "batch")
    rng_noise = stream(seed, "noise")
    rng_tau = stream(seed, "tau")
    names = list(policy.params)
    curve: list[tuple[int, float, float]] = []
    every = config["train.checkpoint_every"]

    with threadpool_limits(limits=1, user_api="blas"):
        for it in range(total):
            lr = cosine_lr(it + 1, config["train.warmup"], config["train.peak_lr"],
                           config["train.final_lr"], max(total, config["train.warmup"] + 1))
            idx = np.array([rng_batch.randint(len(data)) for _ in range(batch)])
            noise = rng_noise.normals((batch, n, a_dim))
            taus = rng_tau.uniforms(batch)
            chunk_b = data.chunk[idx]
            v_tau, u_tau = fm_targets(chunk_b, noise, taus[:, None, None])
            with tape():
                prefix = policy.build_prefix(data.exo[idx], data.ego[idx], data.instr[idx])
                pooled = data.cue[idx] if mode != "off" else None
                ctx = policy.fuse(policy.modulate(prefix, pooled), data.proprio[idx])
                v_pred = policy.predict_velocity(ctx, v_tau, taus)
                loss = fm_loss(v_pred, u_tau)
            backward(loss)
            grads = [
                policy.params[name].grad if policy.params[name].grad is not None
                else np.zeros_like(policy.params[name].data)
                for name in names
            ]
            clipped = clip_global_norm(grads, opt.clip_threshold)
            adamw_step(policy.params, dict(zip(names, clipped)), opt, lr)
            zero_grads(policy.params.values())
            curve.append((it, lr, loss.item()))
            if checkpoint_path is not None and every > 0 and (it + 1) % every == 0 and it + 1 < total:
                policy.save(checkpoint_path, ema=opt.ema)
    if checkpoint_path is not None:
        policy.save(checkpoint_path, ema=opt.ema)
    return policy, opt, curve


def loss_curve_csv(curve: list[tuple[int, float, float]]) -> str:
    lines = ["step,lr,loss"]
    lines += [f"{it},{lr!r},{loss!r}" for it, lr, loss in curve]
    return "\n".join(lines) + "\n"
