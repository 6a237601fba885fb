"""Solver-backed network layer: two forward passes and two backward passes.

The forward passes threshold real input logits to Boolean bits, consult the
solver under the compiled constraint formula, and emit the output bits in a
±1 encoding (all zeros signals an inconsistent input in `smt` mode). The
backward passes reconstruct a corrected output from the incoming gradient
and ask the solver which input bits are to blame, turning that into a
per-input gradient without differentiating through the solver.

Solver outcomes are pure functions of the Boolean keys (input bits, and for
backward the corrected output bits), so a `SolveCache` can memoize them;
gradients are always re-assembled from the real-valued inputs.
"""

from __future__ import annotations

import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .formula import CnfInstance, to_dimacs
from .maxsat import HardUnsatError, SoftUnit, max_weight
from .nn import sigmoid, softmax
from .sat import minimize_core, solve


@dataclass(frozen=True)
class LayerSpec:
    """A compiled constraint formula with p input and q output ports."""

    cnf: CnfInstance

    def __post_init__(self):
        if self.cnf.p < 1 or self.cnf.q < 1:
            raise ValueError(f"layer needs input and output ports, "
                             f"got p={self.cnf.p}, q={self.cnf.q}")

    @property
    def p(self) -> int:
        return self.cnf.p

    @property
    def q(self) -> int:
        return self.cnf.q


@dataclass(frozen=True)
class ForwardRecord:
    """One forward evaluation: real inputs, their bits, and the ±1 output."""

    z: tuple  # real logits, length p
    z_b: tuple  # bools, z_b[i] = (z[i] > 0)
    y: tuple  # floats in {-1.0, +1.0} (all 0.0 when smt mode found unsat)


class SolveCache:
    """Boolean-keyed memo for solver outcomes.

    forward: (mode, z_b) -> y bits (or None for unsat)
    backward: (mode, z_b, yhat_b) -> (tag, index tuple)

    Plain dicts; concurrent writers may race benignly since every value is
    a deterministic function of its key.
    """

    def __init__(self):
        self.forward = {}
        self.backward = {}

    def stats(self) -> dict:
        return {"forward_entries": len(self.forward),
                "backward_entries": len(self.backward)}


class LayerCounters:
    """Thread-safe tallies for solver traffic."""

    def __init__(self):
        self._lock = threading.Lock()
        self.solver_calls = 0
        self.cache_hits = 0
        self.fallbacks = 0

    def bump(self, name: str, k: int = 1) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + k)

    def snapshot(self) -> dict:
        with self._lock:
            return {"solver_calls": self.solver_calls,
                    "cache_hits": self.cache_hits,
                    "fallbacks": self.fallbacks}


class TraceWriter:
    """Dumps each solver consultation as DIMACS + assumptions + outcome."""

    def __init__(self, directory):
        self.directory = str(directory)
        os.makedirs(self.directory, exist_ok=True)
        self._lock = threading.Lock()
        self._n = 0

    def dump(self, cnf: CnfInstance, assumptions, outcome: str) -> None:
        with self._lock:
            self._n += 1
            path = os.path.join(self.directory, f"call-{self._n:06d}.cnf")
        lits = " ".join(str(-(l.var.id + 1) if l.negated else l.var.id + 1)
                        for l in assumptions)
        with open(path, "w") as fh:
            fh.write(f"c assumptions {lits}\n")
            fh.write(f"c outcome {outcome}\n")
            fh.write(to_dimacs(cnf))


def loss_grad(logit, target_bit):
    """d/dlogit of logits-form binary cross-entropy: sigma(logit) - target."""
    return sigmoid(np.asarray(logit, dtype=np.float64)) - np.asarray(
        target_bit, dtype=np.float64)


def _sign(v) -> np.ndarray:
    # positives map to +1, everything else (zero included) to -1
    return np.where(np.asarray(v, dtype=np.float64) > 0, 1.0, -1.0)


def corrected_output(y, grad_y) -> np.ndarray:
    """The output the loss asked for: sign(y) - 2*sign(grad_y), in {-3,-1,1,3}."""
    y = np.asarray(y, dtype=np.float64)
    g = np.asarray(grad_y, dtype=np.float64)
    if y.shape != g.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {g.shape}")
    return _sign(y) - 2.0 * _sign(g)


def _bits(v) -> tuple:
    return tuple(bool(b) for b in np.asarray(v, dtype=np.float64) > 0)


def _input_assumptions(spec: LayerSpec, z_b) -> list:
    return [l if b else ~l for l, b in zip(spec.cnf.z_ports, z_b)]


def _output_bits(spec: LayerSpec, model) -> tuple:
    return tuple(model[l.var.id] != l.negated for l in spec.cnf.y_ports)


def _with_output_fixed(spec: LayerSpec, y_bits) -> CnfInstance:
    """The layer formula with unit clauses pinning the output ports."""
    units = tuple((l if b else ~l,)
                  for l, b in zip(spec.cnf.y_ports, y_bits))
    c = spec.cnf
    return CnfInstance(c.num_vars, c.clauses + units, c.z_ports, c.y_ports)


def _encode_pm1(bits) -> tuple:
    return tuple(1.0 if b else -1.0 for b in bits)


# ---------------------------------------------------------------------------
# forward

def forward_smt(spec: LayerSpec, z, *, cache=None, counters=None,
                trace=None) -> ForwardRecord:
    """Decision-procedure forward pass: any model of the formula under the
    input bits, or the all-zero vector when there is none."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (spec.p,):
        raise ValueError(f"expected {spec.p} inputs, got shape {z.shape}")
    z_b = _bits(z)
    key = ("smt", z_b)
    hit = cache is not None and key in cache.forward
    if hit:
        y_b = cache.forward[key]
        if counters:
            counters.bump("cache_hits")
    else:
        assumptions = _input_assumptions(spec, z_b)
        out = solve(spec.cnf, assumptions)
        if counters:
            counters.bump("solver_calls")
        if trace:
            trace.dump(spec.cnf, assumptions, "sat" if out.sat else "unsat")
        y_b = _output_bits(spec, out.model) if out.sat else None
        if cache is not None:
            cache.forward[key] = y_b
    y = (0.0,) * spec.q if y_b is None else _encode_pm1(y_b)
    return ForwardRecord(tuple(float(v) for v in z), z_b, y)


def forward_max(spec: LayerSpec, z, *, cache=None, counters=None,
                trace=None) -> ForwardRecord:
    """Optimizing forward pass: keep the heaviest consistent set of input
    bits (weights = softmax of |z|) and read the output off that model.

    Always yields a formula-consistent output; raises HardUnsatError when
    the formula itself has no models.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (spec.p,):
        raise ValueError(f"expected {spec.p} inputs, got shape {z.shape}")
    z_b = _bits(z)
    key = ("max", z_b)
    hit = cache is not None and key in cache.forward
    if hit:
        y_b = cache.forward[key]
        if counters:
            counters.bump("cache_hits")
    else:
        weights = softmax(np.abs(z))
        soft = [SoftUnit(l if b else ~l, float(w))
                for l, b, w in zip(spec.cnf.z_ports, z_b, weights)]
        res = max_weight(spec.cnf, soft)
        if counters:
            counters.bump("solver_calls")
        if trace:
            trace.dump(spec.cnf, [s.lit for s in soft],
                       f"sat chosen={','.join(map(str, res.chosen))}")
        y_b = _output_bits(spec, res.model)
        if cache is not None:
            cache.forward[key] = y_b
    return ForwardRecord(tuple(float(v) for v in z), z_b, _encode_pm1(y_b))


# ---------------------------------------------------------------------------
# backward

def _init_grad(z: np.ndarray, z_b) -> np.ndarray:
    return loss_grad(z, np.asarray(z_b, dtype=np.float64))


def backward_core(spec: LayerSpec, record: ForwardRecord, grad_y, *,
                  cache=None, counters=None, trace=None) -> np.ndarray:
    """Unsat-core backward pass.

    Blames an irredundant core of input bits for the output being wrong and
    sends each of them the flipped-target gradient; all other inputs get
    zero. When the corrected output already matches (or the solver can offer
    no core), the gradient of each input toward its own current bit is
    returned unchanged — a no-signal fallback.
    """
    z = np.asarray(record.z, dtype=np.float64)
    init = _init_grad(z, record.z_b)
    yhat = corrected_output(record.y, grad_y)
    if np.array_equal(_sign(record.y), _sign(yhat)):
        return init
    yhat_b = _bits(yhat)
    key = ("core", record.z_b, yhat_b)
    hit = cache is not None and key in cache.backward
    if hit:
        tag, idx = cache.backward[key]
        if counters:
            counters.bump("cache_hits")
    else:
        pinned = _with_output_fixed(spec, yhat_b)
        assumptions = _input_assumptions(spec, record.z_b)
        out = solve(pinned, assumptions)
        if counters:
            counters.bump("solver_calls")
        if out.sat:
            tag, idx = "sat", ()  # input is consistent with yhat: no core
        elif not out.core:
            tag, idx = "unreachable-output", ()  # formula forbids yhat
        else:
            core = minimize_core(pinned, out.core)
            if counters:
                counters.bump("solver_calls")
            pos = {l: i for i, l in enumerate(assumptions)}
            tag, idx = "core", tuple(sorted(pos[l] for l in core))
        if trace:
            trace.dump(pinned, assumptions, f"{tag} I={','.join(map(str, idx))}")
        if cache is not None:
            cache.backward[key] = (tag, idx)
    if tag != "core":
        if counters:
            counters.bump("fallbacks")
        return init
    g = np.zeros(spec.p, dtype=np.float64)
    idx = list(idx)
    flipped = 1.0 - np.asarray(record.z_b, dtype=np.float64)
    g[idx] = loss_grad(z[idx], flipped[idx])
    return g


def backward_max(spec: LayerSpec, record: ForwardRecord, grad_y, *,
                 cache=None, counters=None, trace=None) -> np.ndarray:
    """Optimizing backward pass.

    Keeps the heaviest set of input bits consistent with the corrected
    output; those inputs keep their own-bit gradient, every discarded input
    gets the flipped-target gradient. Falls back to the initialization when
    no grounding can produce the corrected output.
    """
    z = np.asarray(record.z, dtype=np.float64)
    init = _init_grad(z, record.z_b)
    yhat = corrected_output(record.y, grad_y)
    if np.array_equal(_sign(record.y), _sign(yhat)):
        return init
    yhat_b = _bits(yhat)
    key = ("max", record.z_b, yhat_b)
    hit = cache is not None and key in cache.backward
    if hit:
        tag, idx = cache.backward[key]
        if counters:
            counters.bump("cache_hits")
    else:
        pinned = _with_output_fixed(spec, yhat_b)
        weights = softmax(np.abs(z))
        soft = [SoftUnit(l if b else ~l, float(w))
                for l, b, w in zip(spec.cnf.z_ports, record.z_b, weights)]
        try:
            res = max_weight(pinned, soft)
            tag, idx = "chosen", res.chosen
        except HardUnsatError:
            tag, idx = "unreachable-output", ()
        if counters:
            counters.bump("solver_calls")
        if trace:
            trace.dump(pinned, [s.lit for s in soft],
                       f"{tag} I={','.join(map(str, idx))}")
        if cache is not None:
            cache.backward[key] = (tag, idx)
    if tag != "chosen":
        if counters:
            counters.bump("fallbacks")
        return init
    g = init.copy()
    outside = np.ones(spec.p, dtype=bool)
    outside[list(idx)] = False
    flipped = 1.0 - np.asarray(record.z_b, dtype=np.float64)
    g[outside] = loss_grad(z[outside], flipped[outside])
    return g


# ---------------------------------------------------------------------------
# batch plumbing

_FORWARD = {"smt": forward_smt, "max": forward_max}
_BACKWARD = {"core": backward_core, "max": backward_max}


def forward_batch(spec: LayerSpec, Z, mode: str, *, cache=None, counters=None,
                  trace=None, workers: int = 1) -> list:
    """Row-wise forward over a batch; results in input order."""
    fn = _FORWARD[mode]
    rows = [np.asarray(r, dtype=np.float64) for r in Z]
    if workers <= 1:
        return [fn(spec, r, cache=cache, counters=counters, trace=trace)
                for r in rows]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(
            lambda r: fn(spec, r, cache=cache, counters=counters, trace=trace),
            rows))


def backward_batch(spec: LayerSpec, records, Gy, mode: str, *, cache=None,
                   counters=None, trace=None, workers: int = 1) -> np.ndarray:
    """Row-wise backward over a batch; stacked [batch, p] gradient."""
    fn = _BACKWARD[mode]
    pairs = list(zip(records, np.asarray(Gy, dtype=np.float64)))
    if workers <= 1:
        out = [fn(spec, r, g, cache=cache, counters=counters, trace=trace)
               for r, g in pairs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            out = list(ex.map(
                lambda rg: fn(spec, rg[0], rg[1], cache=cache,
                              counters=counters, trace=trace), pairs))
    return np.stack(out)


def outputs(records) -> np.ndarray:
    """Stacked ±1 outputs of a batch of forward records."""
    return np.array([r.y for r in records], dtype=np.float64)
