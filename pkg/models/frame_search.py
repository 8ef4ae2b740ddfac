"""Batched minimization of curvature functionals over frames.

Two searches share one descent loop:

* ``FrameSearch`` works on orthonormal 4-frames (e1, e2, e3, e4) of R^n and
  optional weights lambda, mu in [0, 1]; the functional is
  R(z, w, z_bar, w_bar) with z = e1 + i mu e2, w = e3 + i lambda e4, which
  expands to R1313 + l^2 R1414 + m^2 R2323 + l^2 m^2 R2424 - 2 l m R1234.
* ``ComplexPairSearch`` works on Hermitian-orthonormal pairs (z, w) in C^n.

States are real arrays of shape (restarts, dim). Each iteration projects the
Euclidean gradient onto the tangent space, takes a Barzilai-Borwein step with
Armijo backtracking and retracts by Gram-Schmidt. A scan over coordinate
frames seeds the restarts and acts as a floor for the reported minimum.
"""
import logging
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np
from scipy.optimize import minimize

from utils.errors import PreconditionError

logger = logging.getLogger(__name__)

DEFAULT_RESTARTS = 64
DEFAULT_MAX_ITER = 400
DEFAULT_GTOL = 1e-10
ARMIJO = 1e-4
MAX_BACKTRACK = 40
COORDINATE_SEEDS = 8

WEIGHT_MODES = ("isotropic", "pic1", "pic2")


@dataclass
class SearchResult:
    kind: str
    value: float
    vectors: list
    lam: float = None
    mu: float = None
    converged: bool = True
    gradient_norm: float = 0.0
    evaluations: int = 0
    source: str = "descent"
    extra: dict = field(default_factory=dict)


def pair_terms(full, Z, W):
    """R(z, w, z_bar, w_bar) and the contractions gz_k, gw_l for a batch of pairs"""
    U = np.einsum("ijkl,bi,bj->bkl", full, Z, W)
    gz = np.einsum("bkl,bl->bk", U, W.conj())
    gw = np.einsum("bkl,bk->bl", U, Z.conj())
    value = np.einsum("bk,bk->b", gz, Z.conj()).real
    return value, gz, gw


def _orthonormalize_frames(E):
    Q, R = np.linalg.qr(E)
    signs = np.sign(np.diagonal(R, axis1=1, axis2=2))
    signs[signs == 0] = 1.0
    return Q * signs[:, None, :]


class ComplexPairSearch:
    kind = "complex-2-frame"

    def __init__(self, tensor):
        self.n = tensor.dim
        self.full = tensor.full()
        self.scale = max(1.0, tensor.scale())

    def unpack(self, X):
        n = self.n
        Z = X[:, :n] + 1j * X[:, n:2 * n]
        W = X[:, 2 * n:3 * n] + 1j * X[:, 3 * n:]
        return Z, W

    def pack(self, Z, W):
        return np.concatenate([Z.real, Z.imag, W.real, W.imag], axis=1)

    def retract(self, X):
        Z, W = self.unpack(X)
        Z = Z / np.linalg.norm(Z, axis=1, keepdims=True)
        W = W - Z * np.sum(Z.conj() * W, axis=1, keepdims=True)
        W = W / np.linalg.norm(W, axis=1, keepdims=True)
        return self.pack(Z, W)

    def value_grad(self, X):
        Z, W = self.unpack(X)
        value, gz, gw = pair_terms(self.full, Z, W)
        return value, self.pack(2.0 * gz, 2.0 * gw)

    def project(self, X, G):
        Z, W = self.unpack(X)
        Gz, Gw = self.unpack(G)
        frame = np.stack([Z, W], axis=2)
        grad = np.stack([Gz, Gw], axis=2)
        inner = np.einsum("bia,bic->bac", frame.conj(), grad)
        herm = 0.5 * (inner + np.conj(np.swapaxes(inner, 1, 2)))
        tangent = grad - frame @ herm
        return self.pack(tangent[:, :, 0], tangent[:, :, 1])

    def random_starts(self, rng, count):
        return self.retract(rng.standard_normal((count, 4 * self.n)))

    def coordinate_scan(self):
        """Values of all real coordinate planes and isotropic coordinate pairs"""
        n, full = self.n, self.full
        I, J = np.triu_indices(n, k=1)
        plane_values = full[I, J, I, J]
        # isotropic pairs z = (e_i + i e_j)/sqrt2, w = (e_k + s i e_l)/sqrt2 on disjoint index pairs
        quads = np.array([(i, j, k, l) for i, j in zip(I, J) for k, l in zip(I, J)
                          if len({i, j, k, l}) == 4], dtype=int).reshape(-1, 4)
        if len(quads):
            i, j, k, l = quads.T
            base = full[i, k, i, k] + full[i, l, i, l] + full[j, k, j, k] + full[j, l, j, l]
            mixed = full[i, j, k, l]
            iso_values = np.concatenate([0.25 * (base - 2.0 * mixed), 0.25 * (base + 2.0 * mixed)])
            iso_quads = np.concatenate([quads, quads])
            iso_signs = np.concatenate([np.ones(len(quads)), -np.ones(len(quads))])
        else:
            iso_values = np.zeros(0)
            iso_quads = np.zeros((0, 4), dtype=int)
            iso_signs = np.zeros(0)
        values = np.concatenate([plane_values, iso_values])
        return values, (I, J, iso_quads, iso_signs)

    def candidate_state(self, tables, index):
        I, J, quads, signs = tables
        n = self.n
        Z = np.zeros(n, dtype=complex)
        W = np.zeros(n, dtype=complex)
        if index < len(I):
            Z[I[index]] = 1.0
            W[J[index]] = 1.0
        else:
            i, j, k, l = quads[index - len(I)]
            s = signs[index - len(I)]
            Z[i], Z[j] = 1.0 / np.sqrt(2.0), 1j / np.sqrt(2.0)
            W[k], W[l] = 1.0 / np.sqrt(2.0), s * 1j / np.sqrt(2.0)
        return self.pack(Z[None, :], W[None, :])[0]

    def witness(self, x):
        Z, W = self.unpack(x[None, :])
        return [Z[0], W[0]], None, None

    def state_from_witness(self, vectors, lam=None, mu=None):
        Z, W = (np.asarray(v, dtype=complex) for v in vectors)
        return self.retract(self.pack(Z[None, :], W[None, :]))[0]


class FrameSearch:
    kind = "real-4-frame"

    def __init__(self, tensor, mode="isotropic"):
        if mode not in WEIGHT_MODES:
            raise PreconditionError(f"unknown weight mode {mode!r}")
        self.n = tensor.dim
        self.full = tensor.full()
        self.scale = max(1.0, tensor.scale())
        self.mode = mode
        self.free_lambda = mode in ("pic1", "pic2")
        self.free_mu = mode == "pic2"

    def split(self, X):
        E = X[:, :4 * self.n].reshape(-1, self.n, 4)
        return E, X[:, 4 * self.n], X[:, 4 * self.n + 1]

    def join(self, E, lam, mu):
        return np.concatenate([E.reshape(len(E), -1), lam[:, None], mu[:, None]], axis=1)

    def retract(self, X):
        E, lam, mu = self.split(X)
        E = _orthonormalize_frames(E)
        lam = np.clip(lam, 0.0, 1.0) if self.free_lambda else np.ones_like(lam)
        mu = np.clip(mu, 0.0, 1.0) if self.free_mu else np.ones_like(mu)
        return self.join(E, lam, mu)

    def value_grad(self, X):
        E, lam, mu = self.split(X)
        e1, e2, e3, e4 = (E[:, :, a] for a in range(4))
        Z = e1 + 1j * mu[:, None] * e2
        W = e3 + 1j * lam[:, None] * e4
        value, gz, gw = pair_terms(self.full, Z, W)
        grad_E = np.stack([
            2.0 * gz.real,
            2.0 * mu[:, None] * gz.imag,
            2.0 * gw.real,
            2.0 * lam[:, None] * gw.imag,
        ], axis=2)
        grad_mu = 2.0 * np.sum(gz.imag * e2, axis=1) if self.free_mu else np.zeros_like(mu)
        grad_lam = 2.0 * np.sum(gw.imag * e4, axis=1) if self.free_lambda else np.zeros_like(lam)
        return value, self.join(grad_E, grad_lam, grad_mu)

    def project(self, X, G):
        E, lam, mu = self.split(X)
        G_E, g_lam, g_mu = self.split(G)
        inner = np.einsum("bia,bic->bac", E, G_E)
        tangent = G_E - E @ (0.5 * (inner + np.swapaxes(inner, 1, 2)))
        # Box constraints: drop components that would leave [0, 1]
        g_lam = np.where(((lam <= 0.0) & (g_lam > 0.0)) | ((lam >= 1.0) & (g_lam < 0.0)), 0.0, g_lam)
        g_mu = np.where(((mu <= 0.0) & (g_mu > 0.0)) | ((mu >= 1.0) & (g_mu < 0.0)), 0.0, g_mu)
        return self.join(tangent, g_lam, g_mu)

    def random_starts(self, rng, count):
        E = rng.standard_normal((count, self.n, 4))
        lam = rng.uniform(0.0, 1.0, count)
        mu = rng.uniform(0.0, 1.0, count)
        return self.retract(self.join(E, lam, mu))

    def _corners(self):
        lams = (0.0, 1.0) if self.free_lambda else (1.0,)
        mus = (0.0, 1.0) if self.free_mu else (1.0,)
        return [(lam, mu) for lam in lams for mu in mus]

    def coordinate_scan(self):
        """Values on all ordered coordinate 4-frames (with both orientations of e4) at weight corners"""
        full = self.full
        tuples = np.array(list(permutations(range(self.n), 4)), dtype=int)
        i, j, k, l = tuples.T
        values, entries = [], []
        for lam, mu in self._corners():
            base = full[i, k, i, k] + lam ** 2 * full[i, l, i, l] + mu ** 2 * full[j, k, j, k] \
                + lam ** 2 * mu ** 2 * full[j, l, j, l]
            mixed = 2.0 * lam * mu * full[i, j, k, l]
            for sign in (1.0, -1.0):
                values.append(base - sign * mixed)
                entries.append((lam, mu, sign))
        values = np.concatenate(values)
        return values, (tuples, entries)

    def candidate_state(self, tables, index):
        tuples, entries = tables
        block, row = divmod(index, len(tuples))
        lam, mu, sign = entries[block]
        E = np.zeros((1, self.n, 4))
        for a, axis in enumerate(tuples[row]):
            E[0, axis, a] = 1.0
        E[0, :, 3] *= sign
        return self.join(E, np.array([lam]), np.array([mu]))[0]

    def witness(self, x):
        E, lam, mu = self.split(x[None, :])
        return [E[0, :, a].copy() for a in range(4)], float(lam[0]), float(mu[0])

    def state_from_witness(self, vectors, lam=None, mu=None):
        E = np.stack([np.asarray(v, dtype=float) for v in vectors], axis=1)[None, :, :]
        lam = np.array([1.0 if lam is None else lam])
        mu = np.array([1.0 if mu is None else mu])
        return self.retract(self.join(E, lam, mu))[0]


def descend(search, X, max_iter=DEFAULT_MAX_ITER, gtol=DEFAULT_GTOL):
    """Projected Barzilai-Borwein descent for a batch of starting states"""
    tol = gtol * search.scale
    X = search.retract(X)
    f, G = search.value_grad(X)
    D = search.project(X, G)
    evaluations = len(X)
    step = np.full(len(X), 1.0 / search.scale)
    frozen = np.zeros(len(X), dtype=bool)
    for iteration in range(max_iter):
        gnorm2 = np.sum(D * D, axis=1)
        active = (gnorm2 > tol * tol) & ~frozen
        if not active.any():
            break
        trial = step.copy()
        done = ~active
        X_new, f_new, G_new = X.copy(), f.copy(), G.copy()
        for _ in range(MAX_BACKTRACK):
            candidate = search.retract(X - trial[:, None] * D)
            f_c, G_c = search.value_grad(candidate)
            evaluations += int(np.count_nonzero(~done))
            ok = ~done & (f_c <= f - ARMIJO * trial * gnorm2)
            X_new[ok], f_new[ok], G_new[ok] = candidate[ok], f_c[ok], G_c[ok]
            done |= ok
            if done.all():
                break
            trial = np.where(done, trial, 0.5 * trial)
        # A failed line search means round-off has been reached
        frozen |= active & ~done
        D_new = search.project(X_new, G_new)
        s = X_new - X
        y = D_new - D
        sy = np.sum(s * y, axis=1)
        ss = np.sum(s * s, axis=1)
        bb = np.where(sy > 0.0, ss / np.where(sy > 0.0, sy, 1.0), 2.0 * trial)
        step = np.clip(bb, 1e-8 / search.scale, 1e4 / search.scale)
        X, f, G, D = X_new, f_new, G_new, D_new
    gnorm = np.sqrt(np.sum(D * D, axis=1))
    logger.debug(f"{search.kind} descent stopped after {iteration + 1} iterations, best {f.min():.6e}")
    return X, f, gnorm, evaluations


def _gram_quotient(search, x):
    Z, W = search.unpack(x[None, :])
    value, gz, gw = pair_terms(search.full, Z, W)
    z, w = Z[0], W[0]
    zz = np.vdot(z, z).real
    ww = np.vdot(w, w).real
    h = np.vdot(z, w)
    gram = zz * ww - abs(h) ** 2
    grad_gram_z = 2.0 * z * ww - 2.0 * np.conj(h) * w
    grad_gram_w = 2.0 * w * zz - 2.0 * h * z
    quotient = value[0] / gram
    grad_z = (2.0 * gz[0] - quotient * grad_gram_z) / gram
    grad_w = (2.0 * gw[0] - quotient * grad_gram_w) / gram
    return quotient, search.pack(grad_z[None, :], grad_w[None, :])[0]


def polish_pair(search, x, gtol=DEFAULT_GTOL):
    """BFGS on the Gram-normalized quotient; returns the retracted state and its value"""
    result = minimize(lambda v: _gram_quotient(search, v), x, jac=True, method="BFGS",
                      options={"gtol": gtol * search.scale, "maxiter": 200})
    polished = search.retract(result.x[None, :])
    value, _ = search.value_grad(polished)
    return polished[0], float(value[0]), int(result.nfev)


def run_search(search, rng, restarts=DEFAULT_RESTARTS, max_iter=DEFAULT_MAX_ITER,
               gtol=DEFAULT_GTOL, warm_starts=None, polish=True):
    """Multi-start minimization with coordinate seeding; returns a SearchResult"""
    scan_values, tables = search.coordinate_scan()
    order = np.argsort(scan_values, kind="stable")
    seeds = [search.candidate_state(tables, int(index)) for index in order[:COORDINATE_SEEDS]]
    starts = list(seeds)
    for witness in warm_starts or []:
        starts.append(search.state_from_witness(witness.vectors, witness.lam, witness.mu))
    count = max(restarts - len(starts), 1)
    X0 = np.vstack([np.array(starts), search.random_starts(rng, count)])
    X, f, gnorm, evaluations = descend(search, X0, max_iter=max_iter, gtol=gtol)
    evaluations += len(scan_values)

    best = int(np.argmin(f))
    best_x, best_value = X[best], float(f[best])
    converged = bool(gnorm[best] <= gtol * search.scale * 10.0)
    source = "descent"
    if polish and isinstance(search, ComplexPairSearch):
        polished, value, nfev = polish_pair(search, best_x, gtol=gtol)
        evaluations += nfev
        if value < best_value:
            best_x, best_value, source = polished, value, "polish"
            converged = True

    floor_index = int(order[0])
    if scan_values[floor_index] < best_value:
        best_x = search.candidate_state(tables, floor_index)
        best_value = float(search.value_grad(best_x[None, :])[0][0])
        source = "coordinate"
        converged = True
    if not converged:
        logger.warning(f"{search.kind} search did not converge: best value {best_value:.6e}, "
                       f"projected gradient {gnorm[best]:.3e}")
    vectors, lam, mu = search.witness(best_x)
    return SearchResult(kind=search.kind, value=best_value, vectors=vectors, lam=lam, mu=mu,
                        converged=converged, gradient_norm=float(gnorm[best]),
                        evaluations=int(evaluations), source=source)
