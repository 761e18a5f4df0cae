"""Momentum residual capsule chains with recomputing backward.

A chain is a sequence of capsule layers ``f_k`` at constant width, stepped
with a velocity term::

    v' = gamma * v + (1 - gamma) * f(x)
    x' = x + v'

which inverts exactly (in real arithmetic) for ``gamma > 0``::

    x = x' - v'
    v = (v' - (1 - gamma) * f(x)) / gamma

In reversible mode the forward pass keeps only the terminal ``(x, v)``.
The backward pass walks the layers last to first, reconstructs each input
with the inverse, and re-runs that single layer on a short-lived tape to get
its vector-Jacobian products.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mocaps import autodiff as ad
from mocaps.autodiff import Tape, Var, value
from mocaps.bench.ledger import current_ledger
from mocaps.capsnn import capsule_layer

MODES = ("reversible", "stored")


class NotInvertibleError(ValueError):
    pass


class MissingStateError(RuntimeError):
    pass


@dataclass
class ChainState:
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if np.shape(value(self.x)) != np.shape(value(self.v)):
            raise ValueError(f"x and v shapes differ: {np.shape(value(self.x))} vs {np.shape(value(self.v))}")


@dataclass(frozen=True)
class MomentumConfig:
    gamma: float = 0.9
    n_blocks: int = 1
    layers_per_block: int = 2
    routing_iterations: int = 3

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be non-negative")

    @property
    def n_layers(self) -> int:
        return self.n_blocks * self.layers_per_block


def momentum_step(state: ChainState, W, gamma: float, iterations: int = 3) -> ChainState:
    """One layer of the momentum forward rule, ``f`` being a routed capsule layer."""
    f = capsule_layer(state.x, W, iterations)
    if np.shape(value(f)) != np.shape(value(state.x)):
        raise ValueError(f"layer output {np.shape(value(f))} differs from its input {np.shape(value(state.x))}")
    v = ad.add(ad.scale(state.v, gamma), ad.scale(f, 1.0 - gamma))
    return ChainState(ad.add(state.x, v), v)


def momentum_step_inverse(state: ChainState, W, gamma: float, iterations: int = 3) -> ChainState:
    """Recover the step's input: ``x`` first, since ``v`` needs ``f(x)``."""
    if gamma <= 0:
        raise NotInvertibleError("the momentum step is not invertible for gamma = 0")
    x_next, v_next = value(state.x), value(state.v)
    x = x_next - v_next
    f = value(capsule_layer(x, W, iterations))
    dt = x.dtype.type
    v = dt(1.0 / gamma) * (v_next - dt(1.0 - gamma) * f)
    return ChainState(x, v)


class ReversibleChain:
    """Capsule layers stepped with momentum; ``2 * n_blocks`` weight tensors.

    In reversible mode :meth:`forward` keeps only the terminal ``(x, v)``
    snapshot, registered with the activation ledger under ``"chain"``;
    :meth:`backward` consumes it.  An instance supports one forward/backward
    pair at a time.
    """

    def __init__(self, weights, config: MomentumConfig, ledger=None):
        self.weights = list(weights)
        self.config = config
        self.ledger = ledger if ledger is not None else current_ledger()
        self.saved_terminal: ChainState | None = None
        if len(self.weights) != config.n_layers:
            raise ValueError(f"expected {config.n_layers} layer weights, got {len(self.weights)}")

    @property
    def gamma(self) -> float:
        return self.config.gamma

    def _run(self, x0):
        v = np.zeros_like(value(x0))
        state = ChainState(x0, v)
        for W in self.weights:
            state = momentum_step(state, W, self.gamma, self.config.routing_iterations)
        return state

    def forward(self, x0, mode: str = "reversible"):
        """Run the chain from ``x0`` with zero initial velocity.

        ``stored`` records every layer on the active tape (if any);
        ``reversible`` evaluates untaped and snapshots ``(x_N, v_N)``.
        """
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if mode == "stored":
            return self._run(x0).x
        if self.gamma <= 0 and self.weights:
            raise NotInvertibleError("reversible mode needs gamma > 0")
        self.discard()
        with ad.no_tape():
            terminal = self._run(value(x0))
        self.saved_terminal = terminal
        if self.weights:
            self.ledger.acquire(terminal.x, "chain")
            self.ledger.acquire(terminal.v, "chain")
        return terminal.x

    def discard(self) -> None:
        if self.saved_terminal is not None and self.weights:
            self.ledger.release(self.saved_terminal.x)
            self.ledger.release(self.saved_terminal.v)
        self.saved_terminal = None

    def backward(self, grad_x):
        """Gradients w.r.t. ``x0`` and every layer weight, from ``dL/dx_N``.

        ``dL/dv_N`` starts at zero because the terminal velocity feeds
        nothing downstream.
        """
        if self.saved_terminal is None:
            raise MissingStateError("no saved terminal state; run forward(mode='reversible') first")
        if self.weights and self.gamma <= 0:
            raise NotInvertibleError("reversible backward needs gamma > 0")
        gamma = self.gamma
        x, v = self.saved_terminal.x, self.saved_terminal.v
        dt = x.dtype.type
        gx = np.asarray(grad_x, dtype=x.dtype)
        gv = np.zeros_like(gx)
        grads = [None] * len(self.weights)
        for k in range(len(self.weights) - 1, -1, -1):
            x_prev = x - v
            tape = Tape(ledger=self.ledger, site="transient")
            with tape:
                xin = tape.leaf(x_prev)
                win = tape.leaf(self.weights[k], name="W")
                f = capsule_layer(xin, win, self.config.routing_iterations)
            fv = f.value
            v_prev = dt(1.0 / gamma) * (v - dt(1.0 - gamma) * fv)
            g_vel = gv + gx
            (gx_f,), gw = tape.backward(f, dt(1.0 - gamma) * g_vel)
            grads[k] = gw["W"]
            gx = gx + gx_f
            gv = dt(gamma) * g_vel
            x, v = x_prev, v_prev
        self.discard()
        return gx, grads

    def record(self, x0, weight_vars=None):
        """Reversible forward as a single node on the active tape.

        ``weight_vars`` are the tape variables standing for the layer weights;
        their gradients come from :meth:`backward`.
        """
        xN = self.forward(x0, mode="reversible")
        inputs = (x0, *(weight_vars or ()))

        def vjp(g):
            gx0, gws = self.backward(g)
            return (gx0, *gws) if weight_vars else (gx0,)

        out = ad.emit_custom("reversible_chain", xN, inputs, vjp)
        if not isinstance(out, Var):
            # nothing recorded, so nobody will consume the snapshot
            self.discard()
        return out


def chain_forward(x0, layers, config: MomentumConfig, mode: str = "reversible"):
    """Returns ``(x_N, chain)``; the chain holds the snapshot in reversible mode."""
    chain = ReversibleChain(layers, config)
    return chain.forward(x0, mode=mode), chain


def chain_backward(upstream_grad, chain: ReversibleChain):
    """Returns ``(grad_x0, {"chain.k": grad})``."""
    gx0, grads = chain.backward(upstream_grad)
    return gx0, {f"chain.{k}": g for k, g in enumerate(grads)}


def classic_residual_block(x, W1, W2, iterations: int = 3):
    """Residual capsule block with both shortcuts taken from the block input.

    ``x1 = x + f1(x)``, ``x2 = x + f2(x1)``; additions follow the squash.
    Not invertible, so it is only differentiated through a stored tape.
    """
    x1 = ad.add(x, capsule_layer(x, W1, iterations))
    return ad.add(x, capsule_layer(x1, W2, iterations))


def classic_step(x, W, iterations: int = 3):
    """Plain residual update ``x + f(x)``."""
    return ad.add(x, capsule_layer(x, W, iterations))
