"""Problem definition: coefficient maps, cost maps, constraint sets.

Every map is vectorised over a leading particle axis.  Argument slots use the
names below; a trailing ``m`` marks the mean-field (primed) argument, so
``xm`` is the slot fed with ``E[x(t)]``.

    forward maps  b, sigma1, sigma2, h   (t, x, u, xm, um)
    driver / cost f, l                   (t, x, y, z1, z2, u, xm, ym, z1m, z2m, um)
    terminal      phi, Phi               (x, xm)
    initial cost  gamma                  (y)

Value shapes are ``(N, n)`` for b/sigma1/sigma2, ``(N, m)`` for f/phi and
``(N,)`` for the scalar maps h/l/Phi/gamma.  A derivative map returns a dict
``slot -> array`` whose shape is the value shape followed by the slot
dimension; slots left out of the dict are taken to be identically zero.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

FWD_SLOTS = ("x", "u", "xm", "um")
FULL_SLOTS = ("x", "y", "z1", "z2", "u", "xm", "ym", "z1m", "z2m", "um")
TERM_SLOTS = ("x", "xm")
INIT_SLOTS = ("y",)

MAP_SLOTS = {
    "b": FWD_SLOTS,
    "sigma1": FWD_SLOTS,
    "sigma2": FWD_SLOTS,
    "h": FWD_SLOTS,
    "f": FULL_SLOTS,
    "l": FULL_SLOTS,
    "phi": TERM_SLOTS,
    "Phi": TERM_SLOTS,
    "gamma": INIT_SLOTS,
}
TIMED_MAPS = ("b", "sigma1", "sigma2", "h", "f", "l")


class ModelError(ValueError):
    """Raised when a model fails registration or validation."""


@dataclass(frozen=True)
class Dimensions:
    n: int
    m: int = 1
    k: int = 1

    def __post_init__(self):
        for name in ("n", "m", "k"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ModelError(f"dimension {name} must be a positive integer, got {v!r}")

    @property
    def k_u(self):
        return self.k

    def slot_dim(self, slot: str) -> int:
        base = slot[:-1] if slot.endswith("m") and slot != "m" else slot
        return {"x": self.n, "u": self.k, "y": self.m, "z1": self.m, "z2": self.m}[base]

    def out_shape(self, name: str) -> tuple:
        return {
            "b": (self.n,), "sigma1": (self.n,), "sigma2": (self.n,),
            "f": (self.m,), "phi": (self.m,),
            "h": (), "l": (), "Phi": (), "gamma": (),
        }[name]


# ---------------------------------------------------------------------------
# constraint sets


class ControlConstraintSet:
    """Closed convex set U of control values with a Euclidean projection."""

    dim: int

    def contains(self, u, tol=1e-12):
        raise NotImplementedError

    def project(self, w):
        raise NotImplementedError

    def project_jacobian(self, w):
        """Jacobian of the projection at ``w``, shape ``(N, k, k)``."""
        raise NotImplementedError

    def sample(self, n, rng):
        raise NotImplementedError

    def linear_minimizer(self, g):
        """Point of U minimising ``<g, u>`` for each row of ``g``."""
        raise NotImplementedError

    def extreme_points(self):
        return np.empty((0, self.dim))

    @property
    def diameter(self) -> float:
        raise NotImplementedError


class Box(ControlConstraintSet):
    def __init__(self, lower, upper):
        self.lower = np.atleast_1d(np.asarray(lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if self.lower.shape != self.upper.shape:
            raise ModelError("box bounds must have the same shape")
        if np.any(self.lower > self.upper):
            raise ModelError("box lower bound exceeds upper bound")
        self.dim = self.lower.size

    def __repr__(self):
        return f"Box(lower={self.lower.tolist()}, upper={self.upper.tolist()})"

    def contains(self, u, tol=1e-12):
        u = np.asarray(u, dtype=float)
        return np.all((u >= self.lower - tol) & (u <= self.upper + tol), axis=-1)

    def project(self, w):
        return np.clip(w, self.lower, self.upper)

    def project_jacobian(self, w):
        w = np.atleast_2d(w)
        inside = (w > self.lower) & (w < self.upper)
        jac = np.zeros(w.shape + (self.dim,))
        idx = np.arange(self.dim)
        jac[:, idx, idx] = inside
        return jac

    def sample(self, n, rng):
        return self.lower + (self.upper - self.lower) * rng.random((n, self.dim))

    def linear_minimizer(self, g):
        g = np.atleast_2d(g)
        return np.where(g > 0, self.lower, self.upper)

    def extreme_points(self):
        return np.array(list(itertools.product(*zip(self.lower, self.upper))), dtype=float)

    @property
    def diameter(self):
        return float(np.linalg.norm(self.upper - self.lower))

    def to_dict(self):
        return {"type": "box", "lower": self.lower.tolist(), "upper": self.upper.tolist()}


class Ball(ControlConstraintSet):
    def __init__(self, radius, center=None, dim=None):
        if radius < 0:
            raise ModelError("ball radius must be non-negative")
        self.radius = float(radius)
        if center is None:
            center = np.zeros(dim or 1)
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        self.dim = self.center.size

    def __repr__(self):
        return f"Ball(radius={self.radius}, center={self.center.tolist()})"

    def contains(self, u, tol=1e-12):
        d = np.linalg.norm(np.asarray(u, dtype=float) - self.center, axis=-1)
        return d <= self.radius + tol

    def project(self, w):
        d = w - self.center
        norm = np.linalg.norm(d, axis=-1, keepdims=True)
        scale = np.where(norm > self.radius, self.radius / np.maximum(norm, 1e-300), 1.0)
        return self.center + d * scale

    def project_jacobian(self, w):
        w = np.atleast_2d(w)
        d = w - self.center
        norm = np.linalg.norm(d, axis=-1)
        eye = np.eye(self.dim)
        jac = np.broadcast_to(eye, w.shape + (self.dim,)).copy()
        out = norm > self.radius
        if np.any(out):
            dn = d[out] / norm[out, None]
            s = (self.radius / norm[out])[:, None, None]
            jac[out] = s * (eye - dn[:, :, None] * dn[:, None, :])
        return jac

    def sample(self, n, rng):
        g = rng.standard_normal((n, self.dim))
        g /= np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300)
        r = self.radius * rng.random(n) ** (1.0 / self.dim)
        return self.center + g * r[:, None]

    def linear_minimizer(self, g):
        g = np.atleast_2d(g)
        norm = np.linalg.norm(g, axis=-1, keepdims=True)
        direction = np.where(norm > 0, g / np.maximum(norm, 1e-300), 0.0)
        return self.center - self.radius * direction

    @property
    def diameter(self):
        return 2.0 * self.radius

    def to_dict(self):
        return {"type": "ball", "radius": self.radius, "center": self.center.tolist()}


def constraint_from_dict(spec: Mapping, k: int) -> ControlConstraintSet:
    kind = spec.get("type", "box")
    if kind == "box":
        lower = np.broadcast_to(np.asarray(spec.get("lower", -np.inf), float), (k,))
        upper = np.broadcast_to(np.asarray(spec.get("upper", np.inf), float), (k,))
        return Box(lower, upper)
    if kind == "ball":
        center = spec.get("center")
        return Ball(spec["radius"], center=center, dim=k)
    raise ModelError(f"unknown constraint type {kind!r}")


def project_control(U: ControlConstraintSet, w):
    """Euclidean projection of ``w`` onto ``U``."""
    w = np.asarray(w, dtype=float)
    if not np.all(np.isfinite(w)):
        raise ValueError("project_control: non-finite input")
    single = w.ndim == 1
    out = U.project(np.atleast_2d(w))
    return out[0] if single else out


# ---------------------------------------------------------------------------
# coefficient set


def _zero_value(dims, name, npart):
    return np.zeros((npart,) + dims.out_shape(name))


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """All coefficient and cost maps of the control problem plus their derivatives.

    ``maps`` holds value callables keyed by map name and ``derivs`` the
    matching derivative callables.  A missing map is identically zero (and so
    are its derivatives).  The model is probed on construction: every
    supplied map must return arrays of the declared shape.
    """

    dims: Dimensions
    x0: np.ndarray
    maps: Mapping[str, Callable] = field(default_factory=dict)
    derivs: Mapping[str, Callable] = field(default_factory=dict)
    name: str = "custom"
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "maps", dict(self.maps))
        object.__setattr__(self, "derivs", dict(self.derivs))
        if x0.shape != (self.dims.n,):
            raise ModelError(f"x0 has shape {x0.shape}, expected ({self.dims.n},)")
        unknown = (set(self.maps) | set(self.derivs)) - set(MAP_SLOTS)
        if unknown:
            raise ModelError(f"unknown map names {sorted(unknown)}")
        for name in self.maps:
            if name not in self.derivs:
                raise ModelError(f"map {name!r} registered without its derivative map")
        rng = np.random.default_rng(12345)
        self._probe(rng, 3)

    # -- evaluation ---------------------------------------------------------

    def has(self, name):
        return name in self.maps

    def value(self, name, *args):
        fn = self.maps.get(name)
        if fn is None:
            return _zero_value(self.dims, name, _npart(name, args))
        return fn(*args)

    def deriv(self, name, *args):
        """Dict of derivatives for every slot of ``name`` (zeros filled in)."""
        npart = _npart(name, args)
        out_shape = self.dims.out_shape(name)
        fn = self.derivs.get(name)
        got = fn(*args) if fn is not None else {}
        unknown = set(got) - set(MAP_SLOTS[name])
        if unknown:
            raise ModelError(f"derivative of {name!r} returned unknown slots {sorted(unknown)}")
        res = {}
        for slot in MAP_SLOTS[name]:
            shape = (npart,) + out_shape + (self.dims.slot_dim(slot),)
            if slot in got:
                try:
                    res[slot] = np.broadcast_to(got[slot], shape)
                except ValueError:
                    raise ModelError(
                        f"derivative of {name!r} in slot {slot!r} has shape "
                        f"{np.shape(got[slot])}, expected {shape}") from None
            else:
                res[slot] = np.zeros(shape)
        return res

    # convenience wrappers with the mathematical names
    def b(self, t, x, u, xm, um):
        return self.value("b", t, x, u, xm, um)

    def sigma1(self, t, x, u, xm, um):
        return self.value("sigma1", t, x, u, xm, um)

    def sigma2(self, t, x, u, xm, um):
        return self.value("sigma2", t, x, u, xm, um)

    def h(self, t, x, u, xm, um):
        return self.value("h", t, x, u, xm, um)

    def f(self, t, *args):
        return self.value("f", t, *args)

    def l(self, t, *args):  # noqa: E743
        return self.value("l", t, *args)

    def phi(self, x, xm):
        return self.value("phi", x, xm)

    def Phi(self, x, xm):
        return self.value("Phi", x, xm)

    def gamma(self, y):
        return self.value("gamma", y)

    # -- structure queries ----------------------------------------------------

    def observation_is_state_free(self, probes=20, seed=0):
        """True when ``h`` does not depend on (x, u, xm, um) at probe points."""
        if not self.has("h"):
            return True
        rng = np.random.default_rng(seed)
        args = _probe_args(self.dims, "h", rng, probes, 1.0)
        d = self.deriv("h", *args)
        return all(np.max(np.abs(v)) == 0.0 for v in d.values())

    def _probe(self, rng, probes):
        for name in MAP_SLOTS:
            if name not in self.maps:
                continue
            args = _probe_args(self.dims, name, rng, probes, 1.0)
            val = np.asarray(self.maps[name](*args))
            expected = (probes,) + self.dims.out_shape(name)
            if val.shape != expected:
                raise ModelError(
                    f"map {name!r} returned shape {val.shape}, expected {expected}")
            if not np.all(np.isfinite(val)):
                raise ModelError(f"map {name!r} returned non-finite values at probe points")
            self.deriv(name, *args)


def _npart(name, args):
    first = args[1] if name in TIMED_MAPS else args[0]
    return np.shape(first)[0]


def _probe_args(dims, name, rng, probes, T):
    slots = MAP_SLOTS[name]
    args = []
    if name in TIMED_MAPS:
        args.append(float(rng.uniform(0.0, T)))
    for slot in slots:
        args.append(rng.standard_normal((probes, dims.slot_dim(slot))))
    return args


# ---------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    derivative_errors: dict  # (map, slot) -> max relative discrepancy
    flagged: list  # (map, slot, error) above threshold
    bound_violations: list  # (map, description, value)
    derivative_maxima: dict  # (map, slot) -> max |derivative|
    threshold: float

    @property
    def ok(self):
        return not self.flagged and not self.bound_violations

    @property
    def max_error(self):
        return max(self.derivative_errors.values(), default=0.0)

    def summary(self):
        lines = [f"max derivative discrepancy {self.max_error:.3e} (threshold {self.threshold:g})"]
        for name, slot, err in self.flagged:
            lines.append(f"  FLAG {name}_{slot}: {err:.3e}")
        for name, what, val in self.bound_violations:
            lines.append(f"  BOUND {name}: {what} = {val:.3e}")
        return "\n".join(lines)


def validate_assumptions(model: CoefficientSet, probes=100, seed=0, threshold=1e-4,
                         bound=1e3, rel_step=1e-5, T=1.0) -> ValidationReport:
    """Check supplied derivatives against central differences at random probes.

    Also spot-checks the standing growth conditions: bounded derivatives of the
    forward maps, bounded derivatives of ``f`` and ``phi``, and linear growth of
    the cost derivatives, each against the constant ``bound``.
    """
    rng = np.random.default_rng(seed)
    dims = model.dims
    errors, maxima, flagged, violations = {}, {}, [], []
    for name in MAP_SLOTS:
        slots = MAP_SLOTS[name]
        args = _probe_args(dims, name, rng, probes, T)
        offset = 1 if name in TIMED_MAPS else 0
        value = np.asarray(model.value(name, *args))
        expected = (probes,) + dims.out_shape(name)
        if value.shape != expected:
            raise ModelError(f"map {name!r}: output shape {value.shape}, expected {expected}")
        if not np.all(np.isfinite(value)):
            raise ModelError(f"map {name!r}: non-finite output at probe points")
        supplied = model.deriv(name, *args)
        for si, slot in enumerate(slots):
            d = supplied[slot]
            if d.shape != expected + (dims.slot_dim(slot),):
                raise ModelError(f"derivative {name}_{slot}: shape {d.shape} mismatch")
            if not np.all(np.isfinite(d)):
                raise ModelError(f"derivative {name}_{slot}: non-finite output")
            fd = np.empty_like(d, dtype=float)
            base = args[offset + si]
            for j in range(base.shape[1]):
                step = rel_step * np.maximum(1.0, np.abs(base[:, j]))
                plus, minus = base.copy(), base.copy()
                plus[:, j] += step
                minus[:, j] -= step
                a_p = list(args)
                a_m = list(args)
                a_p[offset + si] = plus
                a_m[offset + si] = minus
                diff = np.asarray(model.value(name, *a_p)) - np.asarray(model.value(name, *a_m))
                fd[..., j] = diff / (2.0 * step.reshape((-1,) + (1,) * (diff.ndim - 1)))
            err = float(np.max(np.abs(d - fd)) / max(1.0, float(np.max(np.abs(fd)))))
            errors[(name, slot)] = err
            maxima[(name, slot)] = float(np.max(np.abs(d))) if d.size else 0.0
            if err > threshold:
                flagged.append((name, slot, err))
        # growth checks
        argnorm = sum(np.linalg.norm(a, axis=1) for a in args[offset:])
        vnorm = np.abs(value) if value.ndim == 1 else np.linalg.norm(value, axis=1)
        dmax = max((maxima[(name, s)] for s in slots), default=0.0)
        if name in ("b", "sigma1", "sigma2", "h", "f", "phi"):
            if dmax > bound:
                violations.append((name, "max |derivative|", dmax))
            growth = float(np.max(vnorm / (1.0 + argnorm)))
            if growth > bound:
                violations.append((name, "|value| / (1 + |args|)", growth))
        else:
            dn = sum(np.abs(supplied[s]).reshape(probes, -1).sum(axis=1) for s in slots)
            g1 = float(np.max(dn / (1.0 + argnorm)))
            g2 = float(np.max(vnorm / (1.0 + argnorm ** 2)))
            if g1 > bound:
                violations.append((name, "|derivative| / (1 + |args|)", g1))
            if g2 > bound:
                violations.append((name, "|value| / (1 + |args|^2)", g2))
    return ValidationReport(errors, flagged, violations, maxima, threshold)


# ---------------------------------------------------------------------------
# affine / quadratic building blocks


def _stack(dims, slots, args):
    return np.concatenate([np.asarray(a, dtype=float).reshape(len(a), -1) for a in args], axis=1)


def _offsets(dims, slots):
    offs, pos = {}, 0
    for s in slots:
        d = dims.slot_dim(s)
        offs[s] = slice(pos, pos + d)
        pos += d
    return offs, pos


class AffineMap:
    """``value = sum_slot M_slot @ v_slot + const`` with output dimension ``out``."""

    def __init__(self, dims, slots, out, coefs=None, const=None, timed=True):
        self.dims, self.slots, self.out, self.timed = dims, slots, out, timed
        self.offs, self.D = _offsets(dims, slots)
        out_dim = 1 if out == () else out[0]
        self.M = np.zeros((out_dim, self.D))
        for slot, mat in (coefs or {}).items():
            if slot not in slots:
                raise ModelError(f"slot {slot!r} not valid here; choose from {slots}")
            d = dims.slot_dim(slot)
            self.M[:, self.offs[slot]] = np.broadcast_to(np.asarray(mat, float).reshape(-1, d) if np.ndim(mat) else mat, (out_dim, d))
        self.c = np.zeros(out_dim) if const is None else np.broadcast_to(np.asarray(const, float), (out_dim,)).copy()

    def _v(self, args):
        return _stack(self.dims, self.slots, args[1:] if self.timed else args)

    def __call__(self, *args):
        v = self._v(args)
        val = v @ self.M.T + self.c
        return val[:, 0] if self.out == () else val

    def d(self, *args):
        npart = np.shape(args[1] if self.timed else args[0])[0]
        res = {}
        for s in self.slots:
            blk = self.M[:, self.offs[s]]
            if not np.any(blk):
                continue
            if self.out == ():
                res[s] = np.broadcast_to(blk[0], (npart, blk.shape[1]))
            else:
                res[s] = np.broadcast_to(blk, (npart,) + blk.shape)
        return res


class QuadraticForm:
    """Scalar map ``0.5 v'Sv + q'v + c`` over the stacked slot vector ``v``.

    ``quad`` maps ``(a, b)`` to a matrix block: a diagonal pair contributes
    ``0.5 v_a' M v_a``, an off-diagonal pair the full cross term ``v_a' M v_b``.
    """

    def __init__(self, dims, slots, quad=None, linear=None, const=0.0, timed=True):
        self.dims, self.slots, self.timed = dims, slots, timed
        self.offs, self.D = _offsets(dims, slots)
        S = np.zeros((self.D, self.D))
        for (a, b), mat in (quad or {}).items():
            da, db = dims.slot_dim(a), dims.slot_dim(b)
            M = np.broadcast_to(np.asarray(mat, float), (da, db)) if np.ndim(mat) < 2 else np.asarray(mat, float)
            if a == b:
                S[self.offs[a], self.offs[a]] += 0.5 * (M + M.T)
            else:
                S[self.offs[a], self.offs[b]] += M
                S[self.offs[b], self.offs[a]] += M.T
        self.S = S
        self.q = np.zeros(self.D)
        for a, vec in (linear or {}).items():
            self.q[self.offs[a]] = np.broadcast_to(np.asarray(vec, float), (dims.slot_dim(a),))
        self.c = float(const)

    def _v(self, args):
        return _stack(self.dims, self.slots, args[1:] if self.timed else args)

    def __call__(self, *args):
        v = self._v(args)
        return 0.5 * np.einsum("nd,de,ne->n", v, self.S, v) + v @ self.q + self.c

    def d(self, *args):
        v = self._v(args)
        g = v @ self.S.T + self.q
        return {s: g[:, self.offs[s]] for s in self.slots}


def lq_model(dims: Dimensions, x0, *, b=None, sigma1=None, sigma2=None, h=None, f=None,
             phi=None, l=None, Phi=None, gamma=None, name="lq", params=None) -> CoefficientSet:
    """Build a model whose dynamics are affine and whose costs are quadratic.

    Affine maps take a dict ``{slot: matrix, "const": vector}``; quadratic maps
    take ``{"quad": {(a, b): M}, "linear": {a: q}, "const": c}``.

    >>> dims = Dimensions(1)
    >>> mdl = lq_model(dims, [1.0], b={"x": 0.5, "u": 1.0}, sigma1={"const": 0.3},
    ...                l={"quad": {("x", "x"): 1.0, ("u", "u"): 1.0}})
    >>> float(mdl.l(0.0, *[np.ones((1, 1))] * 10)[0])
    1.0
    """
    maps, derivs = {}, {}

    def affine(key, spec, timed=True):
        if spec is None:
            return
        spec = dict(spec)
        const = spec.pop("const", None)
        amap = AffineMap(dims, MAP_SLOTS[key], dims.out_shape(key), spec, const, timed=timed)
        maps[key], derivs[key] = amap, amap.d

    def quadratic(key, spec, timed=True):
        if spec is None:
            return
        qf = QuadraticForm(dims, MAP_SLOTS[key], spec.get("quad"), spec.get("linear"),
                           spec.get("const", 0.0), timed=timed)
        maps[key], derivs[key] = qf, qf.d

    affine("b", b)
    affine("sigma1", sigma1)
    affine("sigma2", sigma2)
    affine("h", h)
    affine("f", f)
    affine("phi", phi, timed=False)
    quadratic("l", l)
    quadratic("Phi", Phi, timed=False)
    quadratic("gamma", gamma, timed=False)
    return CoefficientSet(dims, x0, maps, derivs, name=name, params=dict(params or {}))


# ---------------------------------------------------------------------------
# built-in families

LQ_DEFAULTS = dict(a=0.5, c=1.0, sigma=0.5, q=1.0, r=1.0, g=1.0, x0=1.0)


def scalar_lq(**params) -> CoefficientSet:
    """Scalar LQ problem with unobserved state noise (h = 0, sigma2 = 0).

    dx = (a x + c u) dt + sigma dW,  l = (q x^2 + r u^2)/2,  Phi = g x^2 / 2.
    """
    p = {**LQ_DEFAULTS, **params}
    unknown = set(p) - set(LQ_DEFAULTS)
    if unknown:
        raise ModelError(f"unknown lq parameters {sorted(unknown)}")
    return lq_model(
        Dimensions(1, 1, 1), [p["x0"]],
        b={"x": p["a"], "u": p["c"]},
        sigma1={"const": p["sigma"]},
        l={"quad": {("x", "x"): p["q"], ("u", "u"): p["r"]}},
        Phi={"quad": {("x", "x"): p["g"]}},
        name="lq", params=p,
    )


MFLQ_DEFAULTS = dict(
    a=-0.5, abar=0.3, c=1.0, cbar=0.2, s1=0.3, s2=0.4,
    fy=-0.5, fx=0.3, fym=0.2, fz2=0.1, fu=0.1,
    phix=1.0, phixm=0.5,
    q=1.0, qbar=0.5, r=1.0, rbar=0.1, wy=0.2,
    g=1.0, gbar=0.2, gy=0.5, x0=1.0,
)


def mean_field_lq(**params) -> CoefficientSet:
    """Scalar mean-field LQ problem with a linear backward component.

    The state drift depends on E[x] and E[u], the observation channel drives
    the state (sigma2 != 0) with h = 0, and y enters the running cost and the
    initial cost so the backward adjoint k is active.
    """
    p = {**MFLQ_DEFAULTS, **params}
    unknown = set(p) - set(MFLQ_DEFAULTS)
    if unknown:
        raise ModelError(f"unknown mean_field_lq parameters {sorted(unknown)}")
    return lq_model(
        Dimensions(1, 1, 1), [p["x0"]],
        b={"x": p["a"], "xm": p["abar"], "u": p["c"], "um": p["cbar"]},
        sigma1={"const": p["s1"]},
        sigma2={"const": p["s2"]},
        f={"y": p["fy"], "x": p["fx"], "ym": p["fym"], "z2": p["fz2"], "u": p["fu"]},
        phi={"x": p["phix"], "xm": p["phixm"]},
        l={"quad": {("x", "x"): p["q"] + p["qbar"], ("xm", "xm"): p["qbar"],
                    ("x", "xm"): -p["qbar"], ("u", "u"): p["r"], ("um", "um"): p["rbar"],
                    ("y", "y"): p["wy"]}},
        Phi={"quad": {("x", "x"): p["g"], ("xm", "xm"): p["gbar"]}},
        gamma={"quad": {("y", "y"): p["gy"]}},
        name="mean_field_lq", params=p,
    )


NONCONVEX_DEFAULTS = dict(
    kappa=1.0, nu=0.5, s1=0.4, s2=0.3, hx=1.0, hu=0.5,
    fy=-0.5, fx=0.2, wave=0.3, g=1.0, gy=0.5, x0=0.5,
)


def nonconvex_scalar(**params) -> CoefficientSet:
    """Smooth scalar model with a non-convex running cost and a bounded,
    state- and control-dependent observation drift.

        b = -kappa x + u + nu sin x,     sigma1 = s1,  sigma2 = s2
        h = hx tanh x + hu tanh u
        f = fy y + fx x,                 phi = x
        l = (x^2 + u^2)/2 + wave cos 2x, Phi = g x^2 / 2,  gamma = gy y^2 / 2
    """
    p = {**NONCONVEX_DEFAULTS, **params}
    unknown = set(p) - set(NONCONVEX_DEFAULTS)
    if unknown:
        raise ModelError(f"unknown nonconvex parameters {sorted(unknown)}")
    dims = Dimensions(1, 1, 1)

    def b(t, x, u, xm, um):
        return -p["kappa"] * x + u + p["nu"] * np.sin(x)

    def db(t, x, u, xm, um):
        return {"x": (-p["kappa"] + p["nu"] * np.cos(x))[:, :, None],
                "u": np.ones((len(x), 1, 1))}

    def h(t, x, u, xm, um):
        return p["hx"] * np.tanh(x[:, 0]) + p["hu"] * np.tanh(u[:, 0])

    def dh(t, x, u, xm, um):
        return {"x": p["hx"] / np.cosh(x) ** 2, "u": p["hu"] / np.cosh(u) ** 2}

    def l(t, x, y, z1, z2, u, xm, ym, z1m, z2m, um):
        return 0.5 * (x[:, 0] ** 2 + u[:, 0] ** 2) + p["wave"] * np.cos(2.0 * x[:, 0])

    def dl(t, x, y, z1, z2, u, xm, ym, z1m, z2m, um):
        return {"x": x - 2.0 * p["wave"] * np.sin(2.0 * x), "u": u.copy()}

    base = lq_model(
        dims, [p["x0"]],
        sigma1={"const": p["s1"]},
        sigma2={"const": p["s2"]},
        f={"y": p["fy"], "x": p["fx"]},
        phi={"x": 1.0},
        Phi={"quad": {("x", "x"): p["g"]}},
        gamma={"quad": {("y", "y"): p["gy"]}},
    )
    maps = dict(base.maps, b=b, h=h, l=l)
    derivs = dict(base.derivs, b=db, h=dh, l=dl)
    return CoefficientSet(dims, [p["x0"]], maps, derivs, name="nonconvex", params=p)


BUILTIN_MODELS = {
    "lq": scalar_lq,
    "mean_field_lq": mean_field_lq,
    "nonconvex": nonconvex_scalar,
}


def build_model(name: str, params: Mapping | None = None) -> CoefficientSet:
    try:
        factory = BUILTIN_MODELS[name]
    except KeyError:
        raise ModelError(f"unknown model {name!r}; choose from {sorted(BUILTIN_MODELS)}") from None
    return factory(**dict(params or {}))


def planted_concave(**params) -> CoefficientSet:
    """The scalar LQ problem with an extra ``-u^2`` in the running cost.

    Not convex in the control; used to exercise the sufficient-condition check.
    """
    base = scalar_lq(**params)
    p = base.params
    mdl = lq_model(
        Dimensions(1, 1, 1), [p["x0"]],
        b={"x": p["a"], "u": p["c"]},
        sigma1={"const": p["sigma"]},
        l={"quad": {("x", "x"): p["q"], ("u", "u"): p["r"] - 2.0}},
        Phi={"quad": {("x", "x"): p["g"]}},
        name="planted_concave", params=p,
    )
    return mdl


BUILTIN_MODELS["planted_concave"] = planted_concave


def with_cost_shift(model: CoefficientSet, c: float) -> CoefficientSet:
    """Copy of ``model`` with the constant ``c`` added to the running cost."""
    base_l = model.maps.get("l")
    base_dl = model.derivs.get("l")

    def l(*args):
        v = base_l(*args) if base_l is not None else 0.0
        return v + c + np.zeros(np.shape(args[1])[0])

    def dl(*args):
        return base_dl(*args) if base_dl is not None else {}

    maps = dict(model.maps, l=l)
    derivs = dict(model.derivs, l=dl)
    return CoefficientSet(model.dims, model.x0, maps, derivs, name=f"{model.name}+{c:g}",
                          params=model.params)


def with_derivative(model: CoefficientSet, name: str, deriv: Callable) -> CoefficientSet:
    """Copy of ``model`` with the derivative map of ``name`` replaced."""
    derivs = dict(model.derivs)
    derivs[name] = deriv
    return CoefficientSet(model.dims, model.x0, model.maps, derivs, name=model.name,
                          params=model.params)
