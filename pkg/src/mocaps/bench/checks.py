"""Verification harnesses: inversion round trip, mode equivalence, finite differences."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from mocaps import autodiff as ad
from mocaps.autodiff import relative_error
from mocaps.capsnn import squash
from mocaps.model import NetworkConfig, init_params, loss_and_grads, param_count
from mocaps.reversible import ChainState, momentum_step, momentum_step_inverse
from mocaps.tensor import RngState, normal_init, resolve_dtype


@dataclass
class InvertReport:
    gamma: float
    dtype: str
    tolerance: float
    errors: dict = field(default_factory=dict)  # blocks -> (x_err, v_err)

    @property
    def worst(self) -> float:
        return max((max(e) for e in self.errors.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance

    def lines(self):
        for n, (ex, ev) in sorted(self.errors.items()):
            flag = "ok" if max(ex, ev) <= self.tolerance else "FAIL"
            yield f"gamma={self.gamma:<5} blocks={n:<3} x_err={ex:.3e} v_err={ev:.3e} [{flag}]"


def random_capsules(shape, rng: RngState, dtype) -> np.ndarray:
    return squash(normal_init(shape, 0.0, 1.0, rng, dtype))


def invert_check(gamma: float = 0.9, depths=range(1, 9), trials: int = 20, dtype="f64",
                 capsules: int = 32, capsule_dim: int = 16, batch: int = 2, init_std: float = 0.1,
                 routing_iterations: int = 3, tolerance: float = 1e-6, seed: int = 0) -> InvertReport:
    """Max relative error of ``(x, v)`` recovered layer by layer from the terminal state.

    The forward pass (zero initial velocity) is the oracle; every
    intermediate state is compared.  Errors are scaled by the largest
    magnitude of the corresponding forward trajectory.  Each trial draws
    one chain of the deepest length; a depth-``n`` chain is its first
    ``2n`` layers, inverted from the state after layer ``2n``.
    """
    if gamma <= 0:
        raise ValueError("inversion needs gamma > 0")
    dt = resolve_dtype(dtype)
    depths = sorted(depths)
    rng = RngState(seed).split("invert")
    report = InvertReport(gamma, dt.name, tolerance)
    worst = {n: [0.0, 0.0] for n in depths}
    n_layers = 2 * max(depths, default=0)
    for _ in range(trials):
        x0 = random_capsules((batch, capsules, capsule_dim), rng, dt)
        Ws = [normal_init((capsules, capsules, capsule_dim, capsule_dim), 0.0, init_std, rng, dt)
              for _ in range(n_layers)]
        states = [ChainState(x0, np.zeros_like(x0))]
        for W in Ws:
            states.append(momentum_step(states[-1], W, gamma, routing_iterations))
        for n in depths:
            span = states[:2 * n + 1]
            x_scale = max(max(np.abs(s.x).max() for s in span), 1e-300)
            v_scale = max(max(np.abs(s.v).max() for s in span), 1e-300)
            cur = span[-1]
            for k in range(2 * n - 1, -1, -1):
                cur = momentum_step_inverse(cur, Ws[k], gamma, routing_iterations)
                worst[n][0] = max(worst[n][0], float(np.abs(cur.x - states[k].x).max() / x_scale))
                worst[n][1] = max(worst[n][1], float(np.abs(cur.v - states[k].v).max() / v_scale))
    report.errors = {n: tuple(e) for n, e in worst.items()}
    return report


@dataclass
class EquivalenceReport:
    tolerance: float
    errors: dict = field(default_factory=dict)  # blocks -> {param: rel_err}
    finite: bool = True

    @property
    def worst(self) -> float:
        return max((max(e.values()) for e in self.errors.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return self.finite and self.worst <= self.tolerance

    def lines(self):
        for n, errs in sorted(self.errors.items()):
            name = max(errs, key=errs.get)
            flag = "ok" if errs[name] <= self.tolerance else "FAIL"
            yield f"blocks={n:<3} max_rel_err={errs[name]:.3e} (worst param {name}) [{flag}]"


def tiny_config(**overrides) -> NetworkConfig:
    """A complete network small enough for exhaustive finite differences (< 2k parameters)."""
    base = dict(dataset="synthetic", image_size=8, classes=3, stem_channels=3, stem_kernel=3,
                primary_kernel=3, primary_stride=2, primary_groups=2, primary_dim=4,
                capsules=4, capsule_dim=4, recon_hidden=(6, 4), n_blocks=1, dtype="f64",
                init_std=0.5, lambda_recon=5e-4)
    base.update(overrides)
    return NetworkConfig(**base)


def _tiny_batch(cfg: NetworkConfig, batch: int, rng: RngState, zero: bool = False):
    shape = (batch, cfg.image_channels, cfg.image_size, cfg.image_size)
    x = np.zeros(shape, dtype=cfg.np_dtype) if zero else normal_init(shape, 0.0, 1.0, rng, cfg.np_dtype)
    labels = rng.integers(cfg.classes, batch)
    target = rng.uniform(batch * cfg.pixels).reshape(batch, -1).astype(cfg.np_dtype)
    return x, labels, target


def equivalence_check(base: NetworkConfig | None = None, depths=range(1, 5), trials: int = 10,
                      batch: int = 2, tolerance: float = 1e-6, zero_input: bool = False,
                      seed: int = 0) -> EquivalenceReport:
    """Reversible-mode vs stored-mode parameter gradients for the whole network."""
    base = base or tiny_config(capsules=8, capsule_dim=8)
    rng = RngState(seed).split("equivalence")
    report = EquivalenceReport(tolerance)
    for n in depths:
        cfg = replace(base, n_blocks=n, variant="mocapsnet")
        errs = {}
        for _ in range(trials):
            params = init_params(cfg, rng.split(f"params-{n}-{_}"))
            x, y, t = _tiny_batch(cfg, batch, rng, zero=zero_input)
            _, g_rev = loss_and_grads(x, y, cfg, params, "reversible", target=t)
            _, g_sto = loss_and_grads(x, y, cfg, params, "stored", target=t)
            for k in g_sto:
                report.finite &= bool(np.isfinite(g_rev[k]).all() and np.isfinite(g_sto[k]).all())
                errs[k] = max(errs.get(k, 0.0), relative_error(g_rev[k], g_sto[k]))
        report.errors[n] = errs
    return report


def model_grad_check(cfg: NetworkConfig | None = None, mode: str = "stored", batch: int = 2,
                     step: float = 1e-6, tolerance: float = 1e-4, seed: int = 0) -> ad.GradCheckReport:
    """Tape gradients of the full loss vs central differences over every parameter."""
    cfg = cfg or tiny_config()
    rng = RngState(seed).split("gradcheck")
    params = init_params(cfg, rng.split("params"))
    x, y, t = _tiny_batch(cfg, batch, rng)
    _, grads = loss_and_grads(x, y, cfg, params, mode, target=t)

    def loss(**p):
        b, _ = loss_and_grads(x, y, cfg, p, "stored", target=t)
        return b.total

    report = ad.GradCheckReport(tolerance=tolerance)
    report.param_count = param_count(params)
    for name in params:
        fd = ad.finite_difference(loss, params, name, step)
        report.max_rel_error[name] = relative_error(grads[name], fd)
    return report

