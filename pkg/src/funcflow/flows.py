"""Constrained normalizing-flow layers acting on the leading spectral band.

Every layer perturbs only the first M coefficients in the prior eigenbasis,
so the pushforward measure stays equivalent to the prior and its density has
a closed-form finite-rank log-determinant. Constraints that guarantee
invertibility are built into the parameterization via q(x) = ln(1+e^x) - 1,
never checked at runtime.

Layers expose forward, manual backward (vector-Jacobian products including
the log-determinant path), and exact inversion.
"""

from __future__ import annotations

import json

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import brentq
from scipy.special import expit

from .errors import (
    InvalidArgumentError,
    InvalidConfigurationError,
    NumericalFailureError,
)
from .mesh_prior import MeshField, PriorMeasure, cm_inner, lift, project


def q_map(x):
    """Monotone map onto (-1, inf): ln(1 + e^x) - 1."""
    return np.logaddexp(0.0, x) - 1.0


def q_prime(x):
    return expit(x)


def _solve_scalar(kappa: float, rhs: float) -> float:
    """Root of s + kappa*tanh(s) = rhs; monotone since kappa > -1."""
    lo = rhs - abs(kappa) - 1.0
    hi = rhs + abs(kappa) + 1.0
    f = lambda s: s + kappa * np.tanh(s) - rhs
    try:
        return brentq(f, lo, hi, xtol=1e-14, rtol=8.9e-16, maxiter=200)
    except (ValueError, RuntimeError) as exc:  # pragma: no cover
        raise NumericalFailureError(f"scalar inversion failed: {exc}") from exc


class FlowLayer:
    """Base interface: invertible map on the leading-M coefficient vector."""

    kind = "base"

    def __init__(self, M: int):
        if M < 1:
            raise InvalidConfigurationError("M must be >= 1")
        self.M = M

    @property
    def n_params(self) -> int:
        raise NotImplementedError

    def get_flat(self) -> np.ndarray:
        raise NotImplementedError

    def set_flat(self, vec: np.ndarray) -> None:
        raise NotImplementedError

    def forward(self, c: np.ndarray):
        """Return (c_out, logdet1, cache) for one coefficient vector."""
        raise NotImplementedError

    def backward(self, cache, g_out: np.ndarray, logdet_mult: float):
        """Gradients of g_out . c_out + logdet_mult * logdet1.

        Returns (g_in, param_grad) with param_grad in get_flat layout.
        """
        raise NotImplementedError

    def invert(self, c_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class HouseholderLayer(FlowLayer):
    """f(c) = c - 0.5 * v (v.c + b) with v the normalized direction.

    The restricted determinant is the constant 0.5.
    """

    kind = "householder"

    def __init__(self, M: int, raw_v: np.ndarray, b: float):
        super().__init__(M)
        self.raw_v = np.asarray(raw_v, dtype=float).copy()
        self.b = float(b)
        if self.raw_v.shape != (M,):
            raise InvalidArgumentError("raw_v must have length M")
        if not np.linalg.norm(self.raw_v) > 0:
            raise InvalidArgumentError("raw_v must be nonzero")

    @property
    def n_params(self) -> int:
        return self.M + 1

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.raw_v, [self.b]])

    def set_flat(self, vec: np.ndarray) -> None:
        self.raw_v = np.array(vec[: self.M], dtype=float)
        self.b = float(vec[self.M])

    def _vc(self):
        nrm = np.linalg.norm(self.raw_v)
        if not nrm > 1e-300:
            raise NumericalFailureError("householder direction collapsed to zero")
        return self.raw_v / nrm, nrm

    def forward(self, c):
        vc, nrm = self._vc()
        s = float(vc @ c + self.b)
        c_out = c - 0.5 * s * vc
        return c_out, float(np.log(0.5)), (c, vc, nrm, s)

    def backward(self, cache, g_out, logdet_mult):
        c, vc, nrm, s = cache
        g_in = g_out - 0.5 * (vc @ g_out) * vc
        gv = -0.5 * (s * g_out + (g_out @ vc) * c)
        grad_raw = (gv - (vc @ gv) * vc) / nrm
        grad_b = -0.5 * (g_out @ vc)
        return g_in, np.concatenate([grad_raw, [grad_b]])

    def invert(self, c_out):
        vc, _ = self._vc()
        y = c_out + 0.5 * self.b * vc
        return y + (vc @ y) * vc


class ProjectedLayer(FlowLayer):
    """Affine map f(c) = c + R(c + b), R upper triangular, diag in (-1, inf)."""

    kind = "projected"

    def __init__(self, M: int, raw_R: np.ndarray, b: np.ndarray):
        super().__init__(M)
        raw_R = np.asarray(raw_R, dtype=float)
        b = np.asarray(b, dtype=float)
        if raw_R.shape != (M, M) or b.shape != (M,):
            raise InvalidArgumentError("raw_R must be MxM and b length M")
        self.raw_R = np.triu(raw_R)
        self.b = b.copy()
        self._iu = np.triu_indices(M)

    @property
    def n_params(self) -> int:
        return self.M * (self.M + 1) // 2 + self.M

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.raw_R[self._iu], self.b])

    def set_flat(self, vec: np.ndarray) -> None:
        n_tri = self.M * (self.M + 1) // 2
        self.raw_R = np.zeros((self.M, self.M))
        self.raw_R[self._iu] = vec[:n_tri]
        self.b = np.array(vec[n_tri:], dtype=float)

    def _R(self):
        R = np.triu(self.raw_R, 1)
        np.fill_diagonal(R, q_map(np.diag(self.raw_R)))
        return R

    def forward(self, c):
        R = self._R()
        c_out = c + R @ (c + self.b)
        logdet = float(np.sum(np.log1p(np.diag(R))))
        return c_out, logdet, (c, R)

    def backward(self, cache, g_out, logdet_mult):
        c, R = cache
        g_in = g_out + R.T @ g_out
        grad_R = np.outer(g_out, c + self.b)
        diag_extra = logdet_mult / (1.0 + np.diag(R))
        grad_R[np.diag_indices(self.M)] += diag_extra
        # chain through the softplus diagonal reparameterization
        grad_R[np.diag_indices(self.M)] *= q_prime(np.diag(self.raw_R))
        grad_b = R.T @ g_out
        return g_in, np.concatenate([grad_R[self._iu], grad_b])

    def invert(self, c_out):
        R = self._R()
        A = np.eye(self.M) + R
        return solve_triangular(A, c_out - R @ self.b, lower=False)


class PlanarLayer(FlowLayer):
    """f(c) = c + u_n * tanh(w.c + b) with <u_n, w> = q(<raw_u, raw_w>) > -1.

    The reparameterization u_n = raw_u + (q(t) - t) raw_w / ||raw_w||^2,
    t = <raw_u, raw_w>, w = raw_w, enforces invertibility for any raw values.
    """

    kind = "planar"

    def __init__(self, M: int, raw_u: np.ndarray, raw_w: np.ndarray, b: float):
        super().__init__(M)
        self.raw_u = np.asarray(raw_u, dtype=float).copy()
        self.raw_w = np.asarray(raw_w, dtype=float).copy()
        self.b = float(b)
        if self.raw_u.shape != (M,) or self.raw_w.shape != (M,):
            raise InvalidArgumentError("raw_u and raw_w must have length M")
        if not np.linalg.norm(self.raw_w) > 0:
            raise InvalidArgumentError("raw_w must be nonzero")

    @property
    def n_params(self) -> int:
        return 2 * self.M + 1

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.raw_u, self.raw_w, [self.b]])

    def set_flat(self, vec: np.ndarray) -> None:
        self.raw_u = np.array(vec[: self.M], dtype=float)
        self.raw_w = np.array(vec[self.M : 2 * self.M], dtype=float)
        self.b = float(vec[2 * self.M])

    def _reparam(self):
        w = self.raw_w
        nw2 = float(w @ w)
        if not nw2 > 1e-300:
            raise NumericalFailureError("planar direction collapsed to zero")
        t = float(self.raw_u @ w)
        u_n = self.raw_u + (q_map(t) - t) * w / nw2
        return u_n, w, t, nw2

    def forward(self, c):
        u_n, w, t, nw2 = self._reparam()
        s = float(w @ c + self.b)
        h = np.tanh(s)
        c_out = c + h * u_n
        hp = 1.0 - h * h
        qt = q_map(t)
        D = 1.0 + hp * qt
        logdet = float(np.log(D))
        return c_out, logdet, (c, u_n, w, t, nw2, s, h, hp, qt, D)

    def backward(self, cache, g_out, logdet_mult):
        c, u_n, w, t, nw2, s, h, hp, qt, D = cache
        hpp = -2.0 * h * hp
        # scalar sensitivities through s (activation) and t (constraint)
        A_s = (g_out @ u_n) * hp + logdet_mult * hpp * qt / D
        A_t = logdet_mult * hp * q_prime(t) / D
        g_in = g_out + A_s * w
        G_u = h * g_out
        qp1 = q_prime(t) - 1.0
        gw_dot = float(G_u @ w)
        grad_ru = G_u + (qp1 * gw_dot / nw2) * w + A_t * w
        grad_rw = (
            (qt - t) / nw2 * G_u
            + (gw_dot / nw2) * qp1 * self.raw_u
            - 2.0 * gw_dot * (qt - t) / nw2**2 * w
            + A_s * c
            + A_t * self.raw_u
        )
        grad_b = A_s
        return g_in, np.concatenate([grad_ru, grad_rw, [grad_b]])

    def invert(self, c_out):
        u_n, w, t, nw2 = self._reparam()
        # scalar equation s + q(t) tanh(s) = w.c_out + b
        s = _solve_scalar(q_map(t), float(w @ c_out + self.b))
        return c_out - np.tanh(s) * u_n


class SylvesterLayer(FlowLayer):
    """f(c) = c + R_A tanh(R_B c + b) with both factors upper triangular.

    R_B has unit diagonal so the restricted determinant reduces to the
    diagonal product prod(1 + h'_i (R_A)_ii), each factor positive because
    (R_A)_ii = q(raw) > -1.
    """

    kind = "sylvester"

    def __init__(self, M: int, raw_RA: np.ndarray, raw_RB: np.ndarray, b: np.ndarray):
        super().__init__(M)
        raw_RA = np.asarray(raw_RA, dtype=float)
        raw_RB = np.asarray(raw_RB, dtype=float)
        b = np.asarray(b, dtype=float)
        if raw_RA.shape != (M, M) or raw_RB.shape != (M, M) or b.shape != (M,):
            raise InvalidArgumentError("raw_RA, raw_RB must be MxM and b length M")
        self.raw_RA = np.triu(raw_RA)
        self.raw_RB = np.triu(raw_RB, 1)
        self.b = b.copy()
        self._iu = np.triu_indices(M)
        self._ius = np.triu_indices(M, 1)

    @property
    def n_params(self) -> int:
        M = self.M
        return M * (M + 1) // 2 + M * (M - 1) // 2 + M

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.raw_RA[self._iu], self.raw_RB[self._ius], self.b])

    def set_flat(self, vec: np.ndarray) -> None:
        M = self.M
        n_a = M * (M + 1) // 2
        n_b = M * (M - 1) // 2
        self.raw_RA = np.zeros((M, M))
        self.raw_RA[self._iu] = vec[:n_a]
        self.raw_RB = np.zeros((M, M))
        self.raw_RB[self._ius] = vec[n_a : n_a + n_b]
        self.b = np.array(vec[n_a + n_b :], dtype=float)

    def _matrices(self):
        RA = np.triu(self.raw_RA, 1)
        np.fill_diagonal(RA, q_map(np.diag(self.raw_RA)))
        RB = self.raw_RB + np.eye(self.M)
        return RA, RB

    def forward(self, c):
        RA, RB = self._matrices()
        z = RB @ c + self.b
        h = np.tanh(z)
        c_out = c + RA @ h
        hp = 1.0 - h * h
        diag = 1.0 + hp * np.diag(RA)
        logdet = float(np.sum(np.log(diag)))
        return c_out, logdet, (c, RA, RB, z, h, hp, diag)

    def logdet_dense(self, c):
        """Dense log-determinant of the full restricted Jacobian (check path)."""
        RA, RB = self._matrices()
        z = RB @ c + self.b
        hp = 1.0 - np.tanh(z) ** 2
        J = np.eye(self.M) + RA @ (hp[:, None] * RB)
        sign, val = np.linalg.slogdet(J)
        if sign <= 0:
            raise NumericalFailureError("restricted Jacobian lost positivity")
        return float(val)

    def backward(self, cache, g_out, logdet_mult):
        c, RA, RB, z, h, hp, diag = cache
        hpp = -2.0 * h * hp
        g_h = RA.T @ g_out
        g_z = g_h * hp + logdet_mult * hpp * np.diag(RA) / diag
        g_in = g_out + RB.T @ g_z
        grad_RA = np.outer(g_out, h)
        grad_RA[np.diag_indices(self.M)] += logdet_mult * hp / diag
        grad_RA[np.diag_indices(self.M)] *= q_prime(np.diag(self.raw_RA))
        grad_RB = np.outer(g_z, c)
        grad_b = g_z
        return g_in, np.concatenate(
            [grad_RA[self._iu], grad_RB[self._ius], grad_b]
        )

    def invert(self, c_out):
        RA, RB = self._matrices()
        W = RB @ RA  # upper triangular with diag (R_A)_ii
        y = RB @ c_out + self.b
        M = self.M
        z = np.zeros(M)
        h = np.zeros(M)
        for i in range(M - 1, -1, -1):
            rhs = y[i] - W[i, i + 1 :] @ h[i + 1 :]
            z[i] = _solve_scalar(W[i, i], rhs)
            h[i] = np.tanh(z[i])
        return c_out - RA @ h


_LAYER_KINDS = {
    "householder": HouseholderLayer,
    "projected": ProjectedLayer,
    "planar": PlanarLayer,
    "sylvester": SylvesterLayer,
}


def make_layer(kind: str, M: int, rng: np.random.Generator) -> FlowLayer:
    """Near-identity random initialization; raw entries ~ N(0, 0.01^2)."""
    scale = 0.01
    if kind == "householder":
        return HouseholderLayer(M, scale * rng.standard_normal(M), 0.0)
    if kind == "projected":
        raw = np.triu(scale * rng.standard_normal((M, M)), 1)
        return ProjectedLayer(M, raw, np.zeros(M))
    if kind == "planar":
        return PlanarLayer(
            M, scale * rng.standard_normal(M), scale * rng.standard_normal(M), 0.0
        )
    if kind == "sylvester":
        raw_a = np.triu(scale * rng.standard_normal((M, M)), 1)
        raw_b = np.triu(scale * rng.standard_normal((M, M)), 1)
        return SylvesterLayer(M, raw_a, raw_b, np.zeros(M))
    raise InvalidConfigurationError(f"unknown layer kind '{kind}'")


class FlowStack:
    """Ordered composition of flow layers sharing one spectral band.

    The stack maps a field u to u + lift(c_N - c_0) where c_0 holds the
    first M coefficients of u and c_N is the composed coefficient map.
    """

    def __init__(self, layers: list, prior: PriorMeasure):
        if not layers:
            raise InvalidConfigurationError("stack needs at least one layer")
        M = layers[0].M
        if any(l.M != M for l in layers):
            raise InvalidConfigurationError("all layers must share M")
        if M > prior.n_eigen:
            raise InvalidConfigurationError("M exceeds prior eigenpair count")
        self.layers = list(layers)
        self.M = M
        self.prior = prior

    @property
    def n_params(self) -> int:
        return sum(l.n_params for l in self.layers)

    def get_params(self) -> np.ndarray:
        return np.concatenate([l.get_flat() for l in self.layers])

    def set_params(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_params,):
            raise InvalidArgumentError("parameter vector length mismatch")
        pos = 0
        for layer in self.layers:
            layer.set_flat(vec[pos : pos + layer.n_params])
            pos += layer.n_params

    def forward_coeffs(self, c0: np.ndarray):
        """Compose all layers; returns (c_N, sum_logdet, trace)."""
        c = np.asarray(c0, dtype=float)
        trace = []
        total = 0.0
        for layer in self.layers:
            c, logdet, cache = layer.forward(c)
            trace.append((logdet, cache))
            total += logdet
        return c, total, trace

    def backward_coeffs(self, trace, g_out: np.ndarray, logdet_mult: float):
        """Reverse sweep; returns (g_in, param_grad flat)."""
        if len(trace) != len(self.layers):
            raise InvalidArgumentError("trace does not match stack depth")
        grads = [None] * len(self.layers)
        g = np.asarray(g_out, dtype=float)
        for i in range(len(self.layers) - 1, -1, -1):
            g, grads[i] = self.layers[i].backward(trace[i][1], g, logdet_mult)
        return g, np.concatenate(grads)

    def forward_field(self, u: MeshField):
        """Returns (f(u), sum_logdet, (c0, cN, trace))."""
        c0 = project(u, self.prior, self.M)
        cN, total, trace = self.forward_coeffs(c0)
        out = MeshField(u.mesh, u.values + lift(cN - c0, self.prior).values)
        return out, total, (c0, cN, trace)

    def rn_log_density_at_forward(self, c0, cN, sum_logdet) -> float:
        """ln of the pushforward density against the prior, evaluated at f(u).

        Equals -sum_logdet + 0.5 <delta, delta>_H + <u, delta>_H with
        delta = f(u) - u supported on the leading-M span. This is the
        finite-rank change-of-variables identity: the two Cameron-Martin
        terms are 0.5(<f(u), f(u)>_H - <u, u>_H) expanded around u.
        """
        delta = cN - c0
        return (
            -sum_logdet
            + 0.5 * cm_inner(delta, delta, self.prior)
            + cm_inner(c0, delta, self.prior)
        )

    def flow_vjp(self, u: MeshField, trace_bundle, cotangent_field: MeshField):
        """Pull a field cotangent on f(u) back to (param_grad, input cotangent)."""
        c0, cN, trace = trace_bundle
        g_out = project(cotangent_field, self.prior, self.M)
        g_in, param_grad = self.backward_coeffs(trace, g_out, 0.0)
        input_cot = MeshField(
            u.mesh,
            cotangent_field.values + lift(g_in - g_out, self.prior).values,
        )
        return param_grad, input_cot

    def invert(self, y: MeshField) -> MeshField:
        """Preimage u with f(u) = y; tail coefficients pass through unchanged."""
        c_y = project(y, self.prior, self.M)
        c = c_y
        for layer in reversed(self.layers):
            c = layer.invert(c)
        return MeshField(y.mesh, y.values + lift(c - c_y, self.prior).values)


def kl_loss_and_grad(stack: FlowStack, prior, problem, obs, samples):
    """Monte-Carlo KL objective (up to the evidence constant) and its gradient.

    Per sample: Phi(f(u)) - sum_logdet + 0.5<d,d>_H + <u, d>_H, d = f(u)-u.
    The gradient flows through the likelihood adjoint and every layer's
    reparameterization.
    """
    from .forward_models import phi_and_grad  # deferred to avoid import cycle

    lam = prior.lams[: stack.M]
    n = len(samples)
    total_loss = 0.0
    total_grad = np.zeros(stack.n_params)
    for u in samples:
        out, sum_logdet, (c0, cN, trace) = stack.forward_field(u)
        delta = cN - c0
        phi_val, phi_grad = phi_and_grad(problem, obs, out)
        loss_i = (
            phi_val
            - sum_logdet
            + 0.5 * cm_inner(delta, delta, prior)
            + cm_inner(c0, delta, prior)
        )
        g_phi = project(phi_grad, prior, stack.M)
        # d/dcN of the Cameron-Martin terms: lam^-1 (delta + c0) = lam^-1 cN
        g_out = g_phi + cN / lam
        _, param_grad = stack.backward_coeffs(trace, g_out, -1.0)
        total_loss += loss_i
        total_grad += param_grad
    return total_loss / n, total_grad / n


def save_stack(stack: FlowStack, path: str) -> None:
    """Write `<path>.json` (architecture) and `<path>.bin` (flat parameters)."""
    header = {
        "kinds": [l.kind for l in stack.layers],
        "M": stack.M,
        "alpha": stack.prior.alpha,
    }
    with open(path + ".json", "w") as fh:
        json.dump(header, fh)
        fh.write("\n")
    stack.get_params().astype("<f8").tofile(path + ".bin")


def load_stack(path: str, prior: PriorMeasure) -> FlowStack:
    """Rebuild a stack on any prior sharing the checkpoint's alpha."""
    with open(path + ".json") as fh:
        header = json.load(fh)
    if abs(header["alpha"] - prior.alpha) > 1e-12:
        raise InvalidConfigurationError(
            "checkpoint prior alpha does not match the supplied prior"
        )
    M = header["M"]
    rng = np.random.default_rng(0)
    layers = [make_layer(kind, M, rng) for kind in header["kinds"]]
    stack = FlowStack(layers, prior)
    params = np.fromfile(path + ".bin", dtype="<f8")
    stack.set_params(params)
    return stack


def make_stack(kind: str, n_layers: int, M: int, prior: PriorMeasure, seed) -> FlowStack:
    """Stack of n_layers identical-kind layers with seeded initialization."""
    rng = np.random.default_rng(seed)
    return FlowStack([make_layer(kind, M, rng) for _ in range(n_layers)], prior)
