"""Invariant verification harness.

Every check returns (ok, detail). `run_all` prints one line per check and
is wired to the `verify` CLI subcommand; the test suite reuses the same
check functions. Oracles here are written independently of the code paths
they check: naive loop matmul, central finite differences, a second
implementation of the modulation formula, closed-form EMA/clip algebra, and
a standalone decision-process model of the drop trigger.
"""

from __future__ import annotations

import math
import time
from dataclasses import replace

import numpy as np

from . import autodiff as ad
from . import policy as policy_mod
from .autodiff import Tensor, backward, constant, param, tape, zero_grads
from .bench import classify_outcome
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .errors import ContractError, FingerprintMismatch
from .optim import OptimizerState, adamw_step, clip_global_norm, global_norm, init_optimizer
from .policy import (
    Policy,
    euler_integrate,
    fm_loss,
    fm_targets,
    init_film_head,
    ts_film,
    PrefixBatch,
)
from .rng import Rng, stream
from .world import Action, reset, step, state_summary
from .tasks import load_suite

TINY_OVERRIDES = {
    "policy.d_model": 8,
    "policy.heads": 2,
    "policy.depth": 2,
    "policy.chunk_len": 4,
    "policy.d_cue": 4,
    "policy.film_hidden": 5,
    "policy.tau_dim": 4,
    "policy.instr_budget": 1,
    "world.exo_grid": 3,
    "world.ego_grid": 2,
}


def tiny_config() -> RunConfig:
    """D=8, S=6 (3 exo rows + 2 ego rows + 1 instruction token), n=4."""
    return RunConfig(TINY_OVERRIDES)


def tiny_policy(seed: int = 0) -> Policy:
    return Policy(tiny_config(), ["<pad>", "<unk>", "go"], rng=stream(seed, "tiny"))


def grad_matches_fd(loss_fn, params: dict[str, Tensor], rtol: float = 1e-5,
                    atol: float = 1e-8, h: float = 1e-5) -> tuple[bool, str]:
    """Compare reverse-mode gradients with central finite differences."""
    with tape():
        loss = loss_fn()
    backward(loss)
    worst = 0.0
    worst_name = ""
    for name, p in params.items():
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        it = np.nditer(p.data, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = p.data[i]
            p.data[i] = orig + h
            lp = loss_fn().item()
            p.data[i] = orig - h
            lm = loss_fn().item()
            p.data[i] = orig
            fd = (lp - lm) / (2 * h)
            g = grad[i]
            err = abs(g - fd)
            if err > atol:
                rel = err / max(abs(g), abs(fd), 1e-12)
                if rel > worst:
                    worst, worst_name = rel, f"{name}{list(i)}"
                if rel > rtol:
                    zero_grads(params.values())
                    return False, f"{name}{list(i)}: ad={g:.3e} fd={fd:.3e} rel={rel:.2e}"
    zero_grads(params.values())
    return True, f"worst rel err {worst:.2e} ({worst_name or 'all within atol'})"


# ---------------------------------------------------------------------------
# numerics checks
# ---------------------------------------------------------------------------


def check_grad_primitives() -> tuple[bool, str]:
    """Finite-difference check for every differentiable primitive."""
    rng = np.random.default_rng(7)

    def rnd(*shape):
        return np.ascontiguousarray(rng.uniform(-2.0, 2.0, size=shape))

    cases = []
    x = param(rnd(3, 4), "x")
    y = param(rnd(3, 4), "y")
    cases.append(("add", {"x": x, "y": y}, lambda: ((x + y) * (x + y)).sum()))
    cases.append(("sub", {"x": x, "y": y}, lambda: ((x - y) * x).sum()))
    cases.append(("mul", {"x": x, "y": y}, lambda: (x * y).sum()))
    d = param(rnd(3, 4) + 3.0, "d")
    cases.append(("div", {"x": x, "d": d}, lambda: (x / d).sum()))
    cases.append(("neg", {"x": x}, lambda: (-x * x).sum()))
    p = param(rnd(3, 3) + 3.0, "p")
    cases.append(("pow", {"p": p}, lambda: (p ** 1.7).sum()))
    cases.append(("exp", {"x": x}, lambda: ad.texp(x * 0.3).sum()))
    cases.append(("sqrt", {"p": p}, lambda: ad.tsqrt(p).sum()))
    cases.append(("sigmoid", {"x": x}, lambda: ad.sigmoid(x).sum()))
    cases.append(("silu", {"x": x}, lambda: ad.silu(x).sum()))
    a2 = param(rnd(3, 4), "a2")
    b2 = param(rnd(4, 2), "b2")
    cases.append(("matmul2d", {"a2": a2, "b2": b2}, lambda: (ad.matmul(a2, b2) ** 2.0).sum()))
    a4 = param(rnd(2, 2, 3, 4), "a4")
    b4 = param(rnd(2, 2, 4, 3), "b4")
    cases.append(("matmul4d", {"a4": a4, "b4": b4}, lambda: (ad.matmul(a4, b4) ** 2.0).sum()))
    a3 = param(rnd(2, 3, 4), "a3")
    w2d = param(rnd(4, 5), "w2d")
    cases.append(("matmul3d2d", {"a3": a3, "w2d": w2d}, lambda: (ad.matmul(a3, w2d) ** 2.0).sum()))
    cases.append(("sum_axis", {"x": x}, lambda: (x.sum(axis=1) ** 2.0).sum()))
    cases.append(("mean_axes", {"a4": a4}, lambda: (a4.mean(axis=(1, 3)) ** 2.0).sum()))
    cases.append(("reshape", {"x": x}, lambda: (x.reshape((4, 3)) ** 2.0).sum()))
    cases.append(("transpose", {"a4": a4}, lambda: (a4.transpose((0, 2, 1, 3)) ** 2.0).sum()))
    cases.append(("getitem", {"x": x}, lambda: (x[:, 1:3] ** 2.0).sum()))
    cases.append(("concat", {"x": x, "y": y}, lambda: (ad.concat([x, y], axis=1) ** 2.0).sum()))
    cases.append(("softmax", {"x": x}, lambda: ((ad.softmax(x) * y).sum())))
    scale = param(np.ones(4), "scale")
    cases.append(("rms_norm", {"x": x, "scale": scale},
                  lambda: ((ad.rms_norm(x, scale) * y).sum())))
    # broadcast paths
    bias = param(rnd(4), "bias")
    cases.append(("broadcast_add", {"x": x, "bias": bias}, lambda: ((x + bias) ** 2.0).sum()))
    s = param(rnd(), "s")
    cases.append(("scalar_mul", {"x": x, "s": s}, lambda: ((s * x) ** 2.0).sum()))

    for name, params, fn in cases:
        ok, detail = grad_matches_fd(fn, params)
        if not ok:
            return False, f"{name}: {detail}"
    return True, f"{len(cases)} primitives match finite differences"


def check_matmul_oracle() -> tuple[bool, str]:
    """Dense product against a naive triple loop with fixed summation order."""
    rng = np.random.default_rng(3)
    a = rng.uniform(-2, 2, size=(3, 4))
    b = rng.uniform(-2, 2, size=(4, 2))
    naive = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            acc = 0.0
            for kk in range(4):
                acc += a[i, kk] * b[kk, j]
            naive[i, j] = acc
    got = ad.matmul(constant(a), constant(b)).data
    rel = np.max(np.abs(got - naive) / np.maximum(np.abs(naive), 1e-12))
    return rel <= 1e-12, f"max rel dev from naive oracle {rel:.2e}"


def check_grad_pipeline() -> tuple[bool, str]:
    """Full pipeline ts_film -> fuse -> block_attention -> predict_velocity
    -> fm_loss on the D=8, S=6, n=4 instance, against finite differences."""
    pol = tiny_policy()
    cfg = pol.config
    rng = np.random.default_rng(11)
    batch = 2
    exo = rng.uniform(0, 1, size=(batch, 3, 3, 4))
    ego = rng.uniform(0, 1, size=(batch, 2, 2, 5))
    instr = np.array([[2], [2]])
    proprio = rng.uniform(0, 1, size=(batch, 4))
    pooled = rng.uniform(-1, 1, size=(batch, 14))
    chunk = rng.normal(size=(batch, 4, 3))
    noise = rng.normal(size=(batch, 4, 3))
    taus = rng.uniform(0, 1, size=batch)
    v_tau, u_tau = fm_targets(chunk, noise, taus[:, None, None])

    def loss_fn():
        prefix = pol.build_prefix(exo, ego, instr)
        ctx = pol.fuse(pol.modulate(prefix, pooled), proprio)
        return fm_loss(pol.predict_velocity(ctx, v_tau, taus), u_tau)

    return grad_matches_fd(loss_fn, pol.params)


def check_clip_norm() -> tuple[bool, str]:
    rng = np.random.default_rng(5)
    grads = [rng.normal(size=(4, 3)), rng.normal(size=7)]
    norm = global_norm(grads)
    clipped = clip_global_norm(grads, 1.0)
    post = global_norm(clipped)
    if abs(post - min(norm, 1.0)) > 1e-12:
        return False, f"post-clip norm {post} != min(g, 1.0)"
    again = clip_global_norm(clipped, 1.0)
    drift = max(np.max(np.abs(a - b)) for a, b in zip(clipped, again))
    if drift > 1e-15:
        return False, f"clip not idempotent, drift {drift:.2e}"
    small = [g * 0.1 for g in grads]
    if not all(np.array_equal(a, b) for a, b in zip(small, clip_global_norm(small, 10.0))):
        return False, "in-threshold gradients were modified"
    return True, "norm law and idempotency hold"


def check_ema_closed_form() -> tuple[bool, str]:
    """EMA shadow equals the geometric blend of the parameter history."""
    rng = np.random.default_rng(9)
    w = param(rng.normal(size=(3,)), "w")
    params = {"w": w}
    state = init_optimizer(params, ema_decay=0.9, weight_decay=0.0)
    history = [w.data.copy()]
    for t in range(12):
        g = {"w": rng.normal(size=(3,))}
        adamw_step(params, g, state, lr=0.05)
        history.append(w.data.copy())
    d = 0.9
    expected = history[0].copy()
    for p_t in history[1:]:
        expected = d * expected + (1 - d) * p_t
    err = np.max(np.abs(state.ema["w"] - expected))
    return err <= 1e-12, f"max dev from closed-form blend {err:.2e}"


# ---------------------------------------------------------------------------
# modulation / attention checks
# ---------------------------------------------------------------------------


def _random_prefix(rng: np.ndarray, batch: int, s: int, d: int) -> PrefixBatch:
    tokens = constant(rng.normal(size=(batch, s, d)))
    mask = (rng.uniform(size=(batch, s)) > 0.3).astype(np.float64)
    mask[:, 0] = 1.0  # at least one valid token per row
    return PrefixBatch(tokens=tokens, mask=mask)


def _film_args(pol: Policy):
    p = pol.params
    return p["film.w1"], p["film.b1"], p["film.w2"], p["film.b2"], p["film.alpha_raw"]


def check_film_identity() -> tuple[bool, str]:
    """Zero final layer must reproduce P ⊙ M bitwise."""
    pol = tiny_policy()
    pol.params["film.w2"].data[:] = 0.0
    pol.params["film.b2"].data[:] = 0.0
    rng = np.random.default_rng(13)
    prefix = _random_prefix(rng, 3, pol.prefix_len, pol.d_model)
    z = constant(rng.normal(size=(3, pol.d_cue)))
    out = ts_film(prefix, z, *_film_args(pol)).tokens.data
    expected = prefix.tokens.data * prefix.mask[:, :, None]
    ok = np.array_equal(out, expected)
    return ok, "P~ == P*M bitwise" if ok else "zero-film output deviates from P*M"


def film_oracle(p: np.ndarray, mask: np.ndarray, z: np.ndarray, w1, b1, w2, b2,
                alpha_raw: float) -> np.ndarray:
    """Independent evaluation of the modulation equation, plain numpy."""
    hidden_pre = z @ w1 + b1
    hidden = hidden_pre / (1.0 + np.exp(-hidden_pre))
    gb = hidden @ w2 + b2
    d = p.shape[-1]
    gamma, beta = gb[:, :d], gb[:, d:]
    alpha = math.exp(alpha_raw)
    out = (p + alpha * (gamma[:, None, :] * p + beta[:, None, :])) * mask[:, :, None]
    return out


def check_film_formula() -> tuple[bool, str]:
    """ts_film against the independent second implementation (1e-12)."""
    pol = tiny_policy(seed=3)
    rng = np.random.default_rng(17)
    prefix = _random_prefix(rng, 4, pol.prefix_len, pol.d_model)
    z_np = rng.normal(size=(4, pol.d_cue))
    out = ts_film(prefix, constant(z_np), *_film_args(pol)).tokens.data
    p = pol.params
    expected = film_oracle(prefix.tokens.data, prefix.mask, z_np,
                           p["film.w1"].data, p["film.b1"].data,
                           p["film.w2"].data, p["film.b2"].data,
                           float(p["film.alpha_raw"].data))
    err = np.max(np.abs(out - expected))
    return err <= 1e-12, f"max dev from independent formula {err:.2e}"


def check_film_init_scale(samples: int = 1000) -> tuple[bool, str]:
    """gamma/beta magnitudes and relative modulation at init, over fresh
    heads with unit-scale cue inputs and prefixes."""
    cfg = RunConfig()
    d_cue = cfg["policy.d_cue"]
    hidden = cfg["policy.film_hidden"]
    d_model = cfg["policy.d_model"]
    rng = Rng(2024)
    probe = np.random.default_rng(31)
    max_inf = 0.0
    max_rel = 0.0
    for i in range(samples):
        head = init_film_head(rng.spawn("head", i), d_cue, hidden, d_model)
        if np.any(head["b2"] != 0.0) or np.any(head["b1"] != 0.0):
            return False, "biases not zero-initialized"
        z = probe.normal(size=(1, d_cue))
        hidden_pre = z @ head["w1"] + head["b1"]
        act = hidden_pre / (1.0 + np.exp(-hidden_pre))
        gb = act @ head["w2"] + head["b2"]
        gamma, beta = gb[:, :d_model], gb[:, d_model:]
        max_inf = max(max_inf, np.max(np.abs(gamma)), np.max(np.abs(beta)))
        p = probe.normal(size=(1, 6, d_model))
        mask = np.ones((1, 6))
        out = film_oracle(p, mask, z, head["w1"], head["b1"], head["w2"], head["b2"], 0.0)
        base = p * mask[:, :, None]
        rel = np.linalg.norm(out - base) / np.linalg.norm(base)
        max_rel = max(max_rel, rel)
    ok = max_inf <= 0.05 and max_rel <= 0.05
    return ok, f"max |gamma/beta| {max_inf:.4f}, max relative modulation {max_rel:.4f}"


def check_mask_absorption() -> tuple[bool, str]:
    """ts_film output must not depend on masked positions' contents."""
    pol = tiny_policy(seed=5)
    rng = np.random.default_rng(19)
    prefix = _random_prefix(rng, 3, pol.prefix_len, pol.d_model)
    z = constant(rng.normal(size=(3, pol.d_cue)))
    out1 = ts_film(prefix, z, *_film_args(pol)).tokens.data
    scrambled = prefix.tokens.data.copy()
    holes = prefix.mask == 0.0
    scrambled[holes] = rng.normal(size=scrambled[holes].shape) * 100.0
    prefix2 = PrefixBatch(tokens=constant(scrambled), mask=prefix.mask)
    out2 = ts_film(prefix2, z, *_film_args(pol)).tokens.data
    ok = np.array_equal(out1, out2)
    return ok, "masked contents absorbed" if ok else "masked positions leak into output"


def check_prefix_isolation(probes: int = 200) -> tuple[bool, str]:
    """Suffix perturbations must leave prefix outputs bitwise unchanged."""
    pol = tiny_policy(seed=7)
    rng = np.random.default_rng(23)
    s = pol.prefix_len
    batch = 2
    exo = rng.uniform(0, 1, size=(batch, 3, 3, 4))
    ego = rng.uniform(0, 1, size=(batch, 2, 2, 5))
    instr = np.array([[2], [2]])
    prefix = pol.build_prefix(exo, ego, instr)
    ctx = pol.fuse(pol.modulate(prefix, rng.normal(size=(batch, 14))), rng.normal(size=(batch, 4)))

    def stack_outputs(chunk, tau):
        p = pol.params
        from .autodiff import concat, matmul
        from .policy import block_attention, tau_embedding
        act_tok = matmul(constant(chunk), p["emb.act.w"]) + p["emb.act.b"]
        tau_tok = matmul(constant(tau_embedding(tau, pol.tau_dim)[:, None, :]),
                         p["emb.tau.w"]) + p["emb.tau.b"]
        x = concat([ctx.prefix, ctx.state_token, tau_tok, act_tok], axis=1)
        for i in range(pol.depth):
            normed = ad.rms_norm(x, p[f"layer{i}.norm"])
            x = x + block_attention(normed, s, ctx.mask,
                                    p[f"layer{i}.wq"], p[f"layer{i}.wk"],
                                    p[f"layer{i}.wv"], p[f"layer{i}.wo"], pol.heads)
        return x.data

    base_chunk = rng.normal(size=(batch, pol.chunk_len, 3))
    base_tau = rng.uniform(0, 1, size=batch)
    base = stack_outputs(base_chunk, base_tau)
    for _ in range(probes):
        perturbed = base_chunk + rng.normal(size=base_chunk.shape) * rng.uniform(0.1, 10)
        out = stack_outputs(perturbed, rng.uniform(0, 1, size=batch))
        if not np.array_equal(out[:, :s, :], base[:, :s, :]):
            return False, "a suffix perturbation reached prefix outputs"
    return True, f"{probes} suffix perturbations left prefix outputs bitwise unchanged"


def check_suffix_causality() -> tuple[bool, str]:
    """Perturbing a future suffix token must not change earlier suffix
    outputs (exact equality)."""
    pol = tiny_policy(seed=9)
    rng = np.random.default_rng(29)
    s = pol.prefix_len
    exo = rng.uniform(0, 1, size=(1, 3, 3, 4))
    ego = rng.uniform(0, 1, size=(1, 2, 2, 5))
    instr = np.array([[2]])
    prefix = pol.build_prefix(exo, ego, instr)
    ctx = pol.fuse(pol.modulate(prefix, None), rng.normal(size=(1, 4)))
    chunk = rng.normal(size=(1, pol.chunk_len, 3))
    tau = np.array([0.5])
    base = pol.predict_velocity(ctx, chunk, tau).data
    for t in range(1, pol.chunk_len):
        perturbed = chunk.copy()
        perturbed[0, t:] += rng.normal(size=perturbed[0, t:].shape) * 5.0
        out = pol.predict_velocity(ctx, perturbed, tau).data
        if not np.array_equal(out[0, :t], base[0, :t]):
            return False, f"future action token {t} leaked into earlier outputs"
    return True, "future-token perturbations respect causality"


# ---------------------------------------------------------------------------
# flow matching checks
# ---------------------------------------------------------------------------


def check_fm_algebra(trials: int = 10_000) -> tuple[bool, str]:
    """A = v - tau*u and eps = v + (1-tau)*u on random triples."""
    rng = np.random.default_rng(37)
    worst = 0.0
    for _ in range(trials):
        a = rng.normal(size=(4, 3))
        eps = rng.normal(size=(4, 3))
        tau = float(rng.uniform())
        v, u = fm_targets(a, eps, tau)
        worst = max(
            worst,
            float(np.max(np.abs(a - (v - tau * u)))),
            float(np.max(np.abs(eps - (v + (1 - tau) * u)))),
        )
    return worst <= 1e-12, f"max algebra residual {worst:.2e} over {trials} triples"


def check_sampler_oracle() -> tuple[bool, str]:
    """Euler sampling of the analytic conditional field (x - A)/tau must
    land on A within 1e-9 for N in {1, 4, 10, 50}."""
    rng = np.random.default_rng(41)
    worst = 0.0
    for n_steps in (1, 4, 10, 50):
        for _ in range(100):
            a = rng.normal(size=(8, 3))
            eps = rng.normal(size=(8, 3))
            out = euler_integrate(lambda x, tau: (x - a) / tau, eps, n_steps)
            worst = max(worst, float(np.max(np.abs(out - a))))
    return worst <= 1e-9, f"max |sampled - A| {worst:.2e}"


# ---------------------------------------------------------------------------
# world checks
# ---------------------------------------------------------------------------


def check_world_determinism() -> tuple[bool, str]:
    """Identical (spec, seed, actions) must give bitwise-identical traces."""
    cfg = RunConfig()
    tasks = load_suite(cfg)
    rng = np.random.default_rng(43)
    for spec in tasks:
        seed = int(rng.integers(1 << 30))
        actions = [
            Action(float(rng.uniform(-0.1, 0.1)), float(rng.uniform(-0.1, 0.1)),
                   float(rng.uniform(-1, 1)))
            for _ in range(60)
        ]
        traces = []
        for _ in range(2):
            state = reset(spec, seed, start_jitter=0.3)
            rows = [state_summary(state)]
            events = []
            for action in actions:
                state, evs = step(state, action)
                rows.append(state_summary(state))
                events.append(evs)
            traces.append((rows, events))
        if traces[0] != traces[1]:
            return False, f"trace divergence on {spec.name}"
    return True, "replays bitwise identical on all suite tasks"


def drop_step_oracle(pattern: list[bool], t_hold: int) -> int | None:
    """Independent decision-process model: the step index (0-based) at which
    the drop fires for a grip-close pattern executed on top of the target."""
    holding = False
    count = 0
    fired = None
    for i, closing in enumerate(pattern):
        if closing:
            if not holding and fired is None:
                holding = True  # re-grasp succeeds while the object is in place
            if holding:
                count += 1
            else:
                count = 0
        else:
            holding = False
            count = 0
        if fired is None and holding and count >= t_hold:
            fired = i
            holding = False
            count = 0
    return fired


def check_drop_trigger() -> tuple[bool, str]:
    """Exhaustive enumeration of grip scripts of length 2*T_hold: the drop
    fires exactly once, exactly at the T_hold-th consecutive closed holding
    step, and never without the drop family."""
    cfg = RunConfig()
    spec = next(t for t in load_suite(cfg) if t.name == "drop-near")
    t_hold = spec.physics.t_hold
    length = 2 * t_hold
    target_pos = spec.objects[0].pos
    start = replace(spec, gripper_start=target_pos)
    checked = 0
    for bits in range(1 << length):
        pattern = [(bits >> i) & 1 == 1 for i in range(length)]
        state = reset(start, seed=0)
        fired_at = None
        fired_count = 0
        for i, closing in enumerate(pattern):
            state, events = step(state, Action(0.0, 0.0, 1.0 if closing else -1.0))
            if "dropped" in events:
                fired_count += 1
                if fired_at is None:
                    fired_at = i
        expected = drop_step_oracle(pattern, t_hold)
        if fired_at != expected or fired_count != (0 if expected is None else 1):
            return False, (f"pattern {bits:0{length}b}: fired at {fired_at} x{fired_count}, "
                           f"oracle says {expected}")
        checked += 1
    # same scripts under family none must never fire
    clean = replace(start, family="none", extension=0)
    state = reset(clean, seed=0)
    for _ in range(length):
        state, events = step(state, Action(0.0, 0.0, 1.0))
        if "dropped" in events:
            return False, "drop fired outside the drop family"
    return True, f"all {checked} grip scripts match the trigger oracle"


def check_outcome_table() -> tuple[bool, str]:
    rows = [
        ((True, True, False), "true_completion"),
        ((True, False, False), "false_completion"),
        ((False, False, True), "timeout_incomplete"),
    ]
    for args, expected in rows:
        if classify_outcome(*args) != expected:
            return False, f"classify{args} != {expected}"
    try:
        classify_outcome(False, False, False)
        return False, "live episode did not raise"
    except ContractError:
        pass
    return True, "decision table matches, live episode raises"


def check_checkpoint_roundtrip(tmp_dir: str = "/tmp") -> tuple[bool, str]:
    import os
    import tempfile

    pol = tiny_policy(seed=11)
    with tempfile.TemporaryDirectory(dir=tmp_dir) as d:
        path = os.path.join(d, "ckpt.rvpk")
        ema = {n: t.data * 0.5 for n, t in pol.params.items()}
        pol.save(path, ema=ema)
        loaded = Policy.load(path, pol.config, use_ema=False)
        for name, t in pol.params.items():
            if not np.array_equal(loaded.params[name].data, t.data):
                return False, f"raw weights differ after round trip: {name}"
        loaded_ema = Policy.load(path, pol.config, use_ema=True)
        for name in pol.params:
            if not np.array_equal(loaded_ema.params[name].data, ema[name]):
                return False, f"ema weights differ after round trip: {name}"
        other = RunConfig(dict(TINY_OVERRIDES, **{"policy.d_model": 16}))
        try:
            Policy.load(path, other)
            return False, "fingerprint mismatch was not refused"
        except FingerprintMismatch:
            pass
        raw, manifest = load_checkpoint(path)
        save_checkpoint(path + ".2", raw, manifest)
        raw2, manifest2 = load_checkpoint(path + ".2")
        if manifest != manifest2 or any(not np.array_equal(raw[k], raw2[k]) for k in raw):
            return False, "container re-save not bit-exact"
    return True, "bit-exact round trip; mismatched fingerprint refused"


ALL_CHECKS = (
    ("grad-primitives", check_grad_primitives),
    ("grad-pipeline", check_grad_pipeline),
    ("matmul-oracle", check_matmul_oracle),
    ("clip-norm", check_clip_norm),
    ("ema-closed-form", check_ema_closed_form),
    ("film-identity", check_film_identity),
    ("film-formula", check_film_formula),
    ("film-init-scale", check_film_init_scale),
    ("mask-absorption", check_mask_absorption),
    ("prefix-isolation", check_prefix_isolation),
    ("suffix-causality", check_suffix_causality),
    ("fm-algebra", check_fm_algebra),
    ("sampler-oracle", check_sampler_oracle),
    ("world-determinism", check_world_determinism),
    ("drop-trigger", check_drop_trigger),
    ("outcome-table", check_outcome_table),
    ("checkpoint-roundtrip", check_checkpoint_roundtrip),
)


def run_all(inject_fault: str | None = None, out=print) -> bool:
    """Run every check, print a table, return overall pass/fail."""
    if inject_fault is not None:
        if inject_fault != "film-sign":
            raise ValueError(f"unknown fault {inject_fault!r}")
        policy_mod.FAULT_NEGATE_BETA = True
    try:
        all_ok = True
        for name, fn in ALL_CHECKS:
            t0 = time.time()
            try:
                ok, detail = fn()
            except Exception as exc:  # a crashed check is a failed check
                ok, detail = False, f"raised {type(exc).__name__}: {exc}"
            all_ok &= ok
            out(f"{'PASS' if ok else 'FAIL'}  {name:<22} {time.time()-t0:6.2f}s  {detail}")
        return all_ok
    finally:
        policy_mod.FAULT_NEGATE_BETA = False
