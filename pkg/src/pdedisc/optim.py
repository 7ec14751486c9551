"""Gradient-based optimizers operating on tape parameter slots."""

from __future__ import annotations

import numpy as np

from .autodiff import Tape


class Adam:
    """Adam with per-group learning rates; updates tape leaves in place."""

    def __init__(self, tape: Tape, groups, betas=(0.9, 0.999), eps=1e-8):
        """`groups` is a list of (slot_list, learning_rate) pairs."""
        self.tape = tape
        self.groups = [(list(slots), float(lr)) for slots, lr in groups]
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {s: np.zeros_like(tape.value(s))
                  for slots, _ in self.groups for s in slots}
        self.v = {s: np.zeros_like(tape.value(s))
                  for slots, _ in self.groups for s in slots}

    def step(self, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for slots, lr in self.groups:
            for s in slots:
                g = grads[s]
                self.m[s] = self.b1 * self.m[s] + (1.0 - self.b1) * g
                self.v[s] = self.b2 * self.v[s] + (1.0 - self.b2) * (g * g)
                update = (self.m[s] / bc1) / (np.sqrt(self.v[s] / bc2) + self.eps)
                self.tape.set_value(s, self.tape.value(s) - lr * update)


class Sgd:
    """Plain gradient steps; scale-aware, so near-zero gradients leave the
    parameter near its initialization (used for the correction intensities)."""

    def __init__(self, tape: Tape, groups):
        self.tape = tape
        self.groups = [(list(slots), float(lr)) for slots, lr in groups]

    def step(self, grads: dict) -> None:
        for slots, lr in self.groups:
            for s in slots:
                self.tape.set_value(s, self.tape.value(s) - lr * grads[s])


class LineSearchGD:
    """Full-batch steepest descent with a backtracking Armijo line search.

    Stands in for quasi-Newton convergence phases: deterministic, requires
    only a loss re-evaluation callback.
    """

    def __init__(self, tape: Tape, slots, lr0=1.0, shrink=0.5, c_armijo=1e-4,
                 max_backtracks=25):
        self.tape = tape
        self.slots = list(slots)
        self.lr0 = lr0
        self.shrink = shrink
        self.c = c_armijo
        self.max_backtracks = max_backtracks

    def step(self, grads: dict, loss_before: float, eval_loss) -> float:
        """Try decreasing step sizes until Armijo holds; returns the new loss."""
        saved = {s: self.tape.value(s).copy() for s in self.slots}
        gnorm2 = sum(float(np.sum(grads[s] ** 2)) for s in self.slots)
        lr = self.lr0
        for _ in range(self.max_backtracks):
            for s in self.slots:
                self.tape.set_value(s, saved[s] - lr * grads[s])
            loss = float(eval_loss())
            if loss <= loss_before - self.c * lr * gnorm2:
                return loss
            lr *= self.shrink
        for s in self.slots:  # no acceptable step; restore
            self.tape.set_value(s, saved[s])
        return loss_before
