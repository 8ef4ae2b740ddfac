"""Embedded Dormand-Prince 5(4) stepping with a standard step-size controller."""
import numpy as np


class DormandPrince45:
    """Dormand-Prince 5(4) pair, seven stages with first-same-as-last.

    The 5th order solution is propagated and the difference to the embedded
    4th order solution is the local error estimate. The stepping loop lives
    with the caller so that projection, events and recording stay there.
    """

    def __init__(self, rtol=1e-8, atol=1e-14, safety=0.9, min_factor=0.2, max_factor=5.0):
        self.rtol = rtol
        self.atol = atol
        self.safety = safety
        self.min_factor = min_factor
        self.max_factor = max_factor

        #number of stages and order of the propagated solution
        self.s = 7
        self.order = 5

        #intermediate evaluation times
        self.eval_stages = [0.0, 1/5, 3/10, 4/5, 8/9, 1.0, 1.0]

        #butcher table, last row is the propagated solution
        self.BT = {
            0: [       1/5],
            1: [      3/40,         9/40],
            2: [     44/45,       -56/15,       32/9],
            3: [19372/6561,  -25360/2187, 64448/6561,  -212/729],
            4: [ 9017/3168,      -355/33, 46732/5247,    49/176, -5103/18656],
            5: [    35/384,            0,   500/1113,   125/192,  -2187/6784, 11/84],
            }

        #coefficients for local truncation error estimate
        self.TR = [71/57600, 0, -71/16695, 71/1920, -17253/339200, 22/525, -1/40]

    def step(self, fun, t, y, h, k0=None):
        """One step of size h; returns (y_new, error, k_last) where k_last = fun(t + h, y_new)"""
        ks = [fun(t, y) if k0 is None else k0]
        for i, row in self.BT.items():
            increment = sum(a * k for a, k in zip(row, ks) if a != 0)
            ks.append(fun(t + self.eval_stages[i + 1] * h, y + h * increment))
        y_new = y + h * sum(b * k for b, k in zip(self.BT[5], ks) if b != 0)
        error = h * sum(e * k for e, k in zip(self.TR, ks) if e != 0)
        return y_new, error, ks[-1]

    def error_norm(self, error, y, y_new):
        """Max-norm error relative to rtol * scale of the state"""
        scale = self.atol + self.rtol * max(float(np.max(np.abs(y))), float(np.max(np.abs(y_new))))
        return float(np.max(np.abs(error))) / scale

    def factor(self, err):
        """Step-size multiplier after a step with normalized error err"""
        if err == 0.0:
            return self.max_factor
        return min(self.max_factor, max(self.min_factor, self.safety * err ** (-1.0 / self.order)))

    def initial_step(self, fun, t, y, k0=None):
        """First step from the ratio of state and derivative scales"""
        k0 = fun(t, y) if k0 is None else k0
        d0 = float(np.max(np.abs(y)))
        d1 = float(np.max(np.abs(k0)))
        if d0 < 1e-12 or d1 < 1e-12:
            return 1e-6
        return 0.01 * d0 / d1
