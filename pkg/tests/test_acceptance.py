"""Acceptance gate: eleven shipping criteria, one test and one printed
PASS/FAIL line each (replayed in the terminal summary by conftest).

The desk-scale learning runs (criteria 7-9, 11) take most of the suite's
wall clock; criterion 7's solver-layer and baseline runs are shared with
criteria 10 and 11 through a session fixture.
"""

import dataclasses
import time

import numpy as np
import pytest

from satlayer.cli import RunConfig, run_conventional, run_training
from satlayer.formula import (
    BitVec,
    CnfInstance,
    Context,
    Lit,
    Var,
    atom,
    bv_add,
    bv_eq,
    bv_mul_const,
    bv_value,
    conj,
    iff,
    neg,
    tseitin,
)
from satlayer.layer import (
    LayerSpec,
    backward_core,
    backward_max,
    corrected_output,
    forward_max,
    forward_smt,
    loss_grad,
)
from satlayer.maxsat import SoftUnit, brute_force_oracle, max_weight
from satlayer.nn import (
    Tensor,
    add,
    bce_with_logits,
    concat,
    conv2d,
    flatten,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    tsum,
)
from satlayer.sat import solve, solve_by_enumeration
from satlayer.tasks import bits_value, value_bits


def _lit_bv(vs):
    return BitVec(tuple(Lit(v) for v in vs))


def _assumptions_for(vs, bits):
    return [Lit(v, not b) for v, b in zip(vs, bits)]


def _model_dict(model):
    return {Var(i): bool(v) for i, v in enumerate(model)}


def _bits_of(value, width):
    return [bool((value >> (width - 1 - i)) & 1) for i in range(width)]


# ---------------------------------------------------------------------------
# criterion 1: solver correctness against enumeration

def _random_cnf(rng, n_max=20):
    n = int(rng.integers(2, n_max + 1))
    vs = Context().vars(n)
    clauses = []
    for _ in range(int(rng.integers(max(2, n // 2), 4 * n + 1))):
        width = min(int(rng.integers(1, 4)), n)
        picks = rng.choice(n, size=width, replace=False)
        clauses.append(tuple(Lit(vs[int(v)], bool(rng.integers(2)))
                             for v in picks))
    return CnfInstance(n, tuple(clauses))


def _random_sat_cnf(rng, n_max=8):
    while True:
        cnf = _random_cnf(rng, n_max)
        if solve(cnf).sat:
            return cnf


def test_criterion_01_solver_matches_enumeration(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    verdicts = {True: 0, False: 0}
    bad = None
    for trial in range(500):
        cnf = _random_cnf(rng)
        got = solve(cnf)
        want = solve_by_enumeration(cnf)
        verdicts[got.sat] += 1
        if got.sat != want.sat:
            bad = f"verdict mismatch on CNF trial {trial}"
            break
        if got.sat and not all(any(got.model[l.var.id] != l.negated
                                   for l in cl) for cl in cnf.clauses):
            bad = f"bogus model on CNF trial {trial}"
            break
    worst = 0.0
    if bad is None:
        for trial in range(500):
            cnf = _random_sat_cnf(rng)
            soft = [SoftUnit(Lit(Var(int(v)), bool(rng.integers(2))),
                             float(rng.uniform(0.05, 2.0)))
                    for v in rng.integers(cnf.num_vars,
                                          size=int(rng.integers(1, 13)))]
            gap = abs(max_weight(cnf, soft).weight
                      - brute_force_oracle(cnf, soft).weight)
            worst = max(worst, gap)
            if gap > 1e-9:
                bad = f"MaxSAT weight off by {gap:.3e} on trial {trial}"
                break
    took = time.perf_counter() - t0
    ok = bad is None and took < 120 and min(verdicts.values()) >= 20
    criterion(1, ok, bad or f"500 CNFs ({verdicts[True]} sat / "
              f"{verdicts[False]} unsat) + 500 MaxSAT "
              f"(worst weight gap {worst:.1e} <= 1e-9) in {took:.1f}s < 120s")


# ---------------------------------------------------------------------------
# criterion 2: bit-blasting semantics, exhaustive at small widths

def _forced_value(bv, side, ctx, port_vars, bits):
    """Value of `bv` once the port variables are pinned to `bits`."""
    if not side:  # constant-folded: bits are port literals or booleans
        return bv_value(bv, dict(zip(port_vars, bits)))
    cnf = tseitin(conj(*side), ctx, z_ports=port_vars)
    res = solve(cnf, _assumptions_for(port_vars, bits))
    return bv_value(bv, _model_dict(res.model)) if res.sat else None


def test_criterion_02_bitvector_semantics(criterion):
    t0 = time.perf_counter()
    bad = None
    for width in (1, 2, 3, 4):
        size = 1 << width
        # addition wraps at the operand width
        ctx = Context()
        avs, bvs = ctx.vars(width), ctx.vars(width)
        total, side = bv_add(_lit_bv(avs), _lit_bv(bvs), ctx)
        for a in range(size):
            for b in range(size):
                got = _forced_value(total, side, ctx, avs + bvs,
                                    _bits_of(a, width) + _bits_of(b, width))
                if got != (a + b) % size:
                    bad = f"add: {a}+{b} at width {width} gave {got}"
                    break
            if bad:
                break
        if bad:
            break
        # constant multiplication, constants past the width included
        for c in range(16):
            ctx = Context()
            avs = ctx.vars(width)
            out, side = bv_mul_const(_lit_bv(avs), c, ctx, width=width)
            for a in range(size):
                got = _forced_value(out, side, ctx, avs, _bits_of(a, width))
                if got != (a * c) % size:
                    bad = f"mul-const: {a}*{c} at width {width} gave {got}"
                    break
            if bad:
                break
        if bad:
            break
        # equality holds exactly on the diagonal
        ctx = Context()
        avs, bvs = ctx.vars(width), ctx.vars(width)
        cnf = tseitin(bv_eq(_lit_bv(avs), _lit_bv(bvs)), ctx,
                      z_ports=avs + bvs)
        for a in range(size):
            for b in range(size):
                bits = _bits_of(a, width) + _bits_of(b, width)
                if solve(cnf, _assumptions_for(avs + bvs, bits)).sat != (a == b):
                    bad = f"eq: {a}=={b} at width {width} decided wrong"
                    break
            if bad:
                break
        if bad:
            break
    took = time.perf_counter() - t0
    ok = bad is None and took < 10
    criterion(2, ok, bad or f"add/mul-const/eq exhaustive at widths 1-4 "
              f"in {took:.1f}s < 10s")


# ---------------------------------------------------------------------------
# criterion 3: gradient checks on every autodiff op

_EPS = 1e-4
_TOL = 1e-4


def _gradcheck(build, arrays, rng):
    probe = build(*[Tensor(a) for a in arrays])
    proj = rng.normal(size=probe.data.shape)

    def run():
        tensors = [Tensor(a) for a in arrays]
        return tensors, tsum(mul(build(*tensors), Tensor(proj)))

    tensors, loss = run()
    loss.backward()
    analytic = [t.grad.copy() for t in tensors]
    for k, a in enumerate(arrays):
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + _EPS
            hi = float(run()[1].data)
            a[idx] = orig - _EPS
            lo = float(run()[1].data)
            a[idx] = orig
            num = (hi - lo) / (2 * _EPS)
            if abs(analytic[k][idx] - num) > _TOL * max(1.0, abs(num)):
                return f"input {k} at {idx}: {analytic[k][idx]} vs {num}"
    return None


def test_criterion_03_gradcheck_every_op(criterion):
    t0 = time.perf_counter()
    bad = None
    for seed in range(20):
        rng = np.random.default_rng(seed)
        away = rng.uniform(0.1, 1.0, size=(3, 4)) * np.where(
            rng.random((3, 4)) > 0.5, 1.0, -1.0)
        targets = rng.integers(0, 2, size=(4, 3)).astype(np.float64)
        cases = [
            ("add", add, [rng.normal(size=(3, 4)), rng.normal(size=(4,))]),
            ("mul", mul, [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
            ("matmul", matmul,
             [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
            ("relu", relu, [away]),
            ("reshape", lambda t: reshape(t, (3, 4)),
             [rng.normal(size=(2, 6))]),
            ("flatten", flatten, [rng.normal(size=(2, 3, 2))]),
            ("concat", lambda a, b: concat([a, b], axis=1),
             [rng.normal(size=(2, 3)), rng.normal(size=(2, 2))]),
            ("mean", mean, [rng.normal(size=(3, 4))]),
            ("sum", tsum, [rng.normal(size=(3, 4))]),
            ("conv2d", lambda x, w, b: conv2d(x, w, b),
             [rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)),
              rng.normal(size=(3,))]),
            ("conv2d-stride", lambda x, w: conv2d(x, w, stride=2),
             [rng.normal(size=(1, 2, 7, 7)), rng.normal(size=(2, 2, 3, 3))]),
            ("bce", lambda x: bce_with_logits(x, targets),
             [rng.normal(size=(4, 3))]),
        ]
        for name, build, arrays in cases:
            detail = _gradcheck(build, arrays, rng)
            if detail:
                bad = f"{name} (seed {seed}): {detail}"
                break
        if bad:
            break
    took = time.perf_counter() - t0
    ok = bad is None and took < 60
    criterion(3, ok, bad or f"12 ops x 20 seeds within {_TOL} relative "
              f"in {took:.1f}s < 60s")


# ---------------------------------------------------------------------------
# criterion 4: corrected-output theorem, exact on all corners

def test_criterion_04_corrected_output_corners(criterion):
    bad = None
    total = 0
    for q in range(1, 9):
        corners = np.array([[(m >> i) & 1 for i in range(q)]
                            for m in range(1 << q)], dtype=np.float64)
        targets = np.repeat(corners, 1 << q, axis=0)
        ys = np.where(np.tile(corners, (1 << q, 1)) > 0, 1.0, -1.0)
        grad = sigmoid(ys) - targets  # logits-form cross-entropy gradient
        yhat = corrected_output(ys, grad)
        total += ys.shape[0]
        if not np.array_equal(np.where(yhat > 0, 1.0, -1.0),
                              np.where(targets > 0, 1.0, -1.0)):
            bad = f"sign mismatch at q={q}"
            break
        if not set(np.unique(yhat)) <= {-3.0, -1.0, 1.0, 3.0}:
            bad = f"corrected output left the four-value range at q={q}"
            break
    criterion(4, bad is None,
              bad or f"sign(corrected) == target on {total} corner pairs, "
              f"exact")


# ---------------------------------------------------------------------------
# criterion 5: gradient equality through a unique-grounding formula

def _not_gate_spec(width):
    ctx = Context()
    zs, ys = ctx.vars(width), ctx.vars(width)
    f = conj(*[iff(atom(y), neg(atom(z))) for z, y in zip(zs, ys)])
    return LayerSpec(tseitin(f, ctx, z_ports=zs, y_ports=ys))


def test_criterion_05_backward_max_equality(criterion):
    spec = _not_gate_spec(6)
    rng = np.random.default_rng(105)
    worst = 0.0
    for _ in range(1000):
        z = rng.normal(size=6) * 3.0
        target = rng.integers(0, 2, size=6).astype(np.float64)
        rec = forward_max(spec, z)
        grad_y = sigmoid(np.asarray(rec.y)) - target
        got = backward_max(spec, rec, grad_y)
        direct = loss_grad(z, 1.0 - target)  # inverter: wanted input is 1-t
        worst = max(worst, float(np.abs(got - direct).max()))
    criterion(5, worst <= 1e-12,
              f"1000 draws, max |layer grad - direct grad| = {worst:.2e} "
              f"<= 1e-12")


# ---------------------------------------------------------------------------
# criterion 6: blame sets are irredundant under drop-one re-checks

def test_criterion_06_core_irredundancy(criterion, mnist_spec):
    t0 = time.perf_counter()
    rng = np.random.default_rng(106)
    checked = 0
    bad = None
    for trial in range(200):
        a, b = int(rng.integers(10)), int(rng.integers(10))
        true_bits = value_bits(a, 5) + value_bits(b, 5)
        corrupt = list(true_bits)
        for i in rng.choice(10, size=int(rng.integers(1, 4)), replace=False):
            corrupt[i] = not corrupt[i]
        if bits_value(corrupt[:5]) + bits_value(corrupt[5:]) == a + b:
            continue  # corruption happened to preserve the sum
        z = np.where(np.array(corrupt), 2.0, -2.0)
        rec = forward_smt(mnist_spec, z)
        target = np.asarray(value_bits(a + b, 5), dtype=np.float64)
        grad_y = np.where(target > 0, -1.0, 1.0)  # ask for the true sum
        g = backward_core(mnist_spec, rec, grad_y)
        if np.array_equal(g, loss_grad(z, np.asarray(rec.z_b, float))):
            continue  # keep-everything early exit or fallback, no blame set
        core = [i for i in range(10) if g[i] != 0.0]
        cnf = mnist_spec.cnf
        pins = tuple((l if t > 0 else ~l,)
                     for l, t in zip(cnf.y_ports, target))
        pinned = CnfInstance(cnf.num_vars, cnf.clauses + pins,
                             cnf.z_ports, cnf.y_ports)
        lits = [l if bit else ~l for l, bit in zip(cnf.z_ports, rec.z_b)]
        core_lits = [lits[i] for i in core]
        if solve(pinned, core_lits).sat:
            bad = f"blamed set is not a core on trial {trial}"
            break
        weak = next((k for k in range(len(core_lits))
                     if not solve(pinned,
                                  core_lits[:k] + core_lits[k + 1:]).sat),
                    None)
        if weak is not None:
            bad = f"core on trial {trial} keeps a redundant literal (#{weak})"
            break
        checked += 1
    took = time.perf_counter() - t0
    ok = bad is None and checked >= 150 and took < 60
    criterion(6, ok, bad or f"{checked} corrupted-input blame sets pass "
              f"full-unsat + drop-one-sat re-checks in {took:.1f}s < 60s")


# ---------------------------------------------------------------------------
# criteria 7, 10, 11 share one trained model

def _crit7_config(out_dir) -> RunConfig:
    return RunConfig(
        task="mnist-add", p_percent=10, forward="smt", backward="core",
        eval_forward="max", pretrain_epochs=2, train_epochs=20,
        batch_size=32, learning_rate=0.3, optimizer="sgd", seed=0,
        arch="dense", cache=True, workers=0, n_train=10000, n_test=2000,
        output_dir=str(out_dir)).validate()


@pytest.fixture(scope="session")
def crit7_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("crit7")
    cfg = _crit7_config(base / "solver")
    t0 = time.perf_counter()
    solver = run_training(cfg)
    solver_s = time.perf_counter() - t0
    t0 = time.perf_counter()
    conv = run_conventional(
        dataclasses.replace(cfg, output_dir=str(base / "conv")))
    conv_s = time.perf_counter() - t0
    return {"config": cfg, "solver": solver, "conv": conv,
            "solver_seconds": solver_s, "conv_seconds": conv_s}


def test_criterion_07_mnist_generalization_gap(criterion, crit7_runs):
    acc = crit7_runs["solver"].final_test_accuracy
    conv = crit7_runs["conv"].final_test_accuracy
    gap = (acc - conv) * 100
    took = crit7_runs["solver_seconds"] + crit7_runs["conv_seconds"]
    ok = acc >= 0.85 and conv <= 0.40 and gap >= 45 and took <= 1800
    criterion(7, ok, f"solver={acc:.4f} (>=0.85), baseline={conv:.4f} "
              f"(<=0.40), gap={gap:.1f} (>=45), {took:.0f}s <= 1800s")


def test_criterion_08_visual_algebra_gap(criterion, tmp_path_factory):
    base = tmp_path_factory.mktemp("crit8")
    cfg = RunConfig(
        task="visual-algebra", forward="max", backward="core",
        eval_forward="max", pretrain_epochs=2, train_epochs=12,
        batch_size=32, learning_rate=0.3, optimizer="sgd", seed=0,
        arch="dense", cache=True, workers=0, n_train=10000, n_test=2000,
        output_dir=str(base / "solver")).validate()
    t0 = time.perf_counter()
    acc = run_training(cfg).final_test_accuracy
    conv = run_conventional(dataclasses.replace(
        cfg, output_dir=str(base / "conv"))).final_test_accuracy
    took = time.perf_counter() - t0
    gap = (acc - conv) * 100
    ok = acc >= 0.80 and conv <= 0.45 and gap >= 35 and took <= 2400
    criterion(8, ok, f"solver={acc:.4f} (>=0.80), baseline={conv:.4f} "
              f"(<=0.45), gap={gap:.1f} (>=35), {took:.0f}s <= 2400s")


def test_criterion_09_liars_puzzle_gap(criterion, tmp_path_factory):
    base = tmp_path_factory.mktemp("crit9")
    cfg = RunConfig(
        task="liars-puzzle", forward="smt", backward="max",
        eval_forward="max", pretrain_epochs=0, train_epochs=12,
        batch_size=32, learning_rate=1.0, optimizer="sgd", seed=0,
        cache=True, workers=0, n_train=720, n_test=3000,
        output_dir=str(base / "solver")).validate()
    t0 = time.perf_counter()
    acc = run_training(cfg).final_test_accuracy
    conv = run_conventional(dataclasses.replace(
        cfg, optimizer="adam", learning_rate=2e-3,
        output_dir=str(base / "conv"))).final_test_accuracy
    took = time.perf_counter() - t0
    gap = (acc - conv) * 100
    ok = gap >= 15 and took <= 900
    criterion(9, ok, f"solver={acc:.4f}, baseline={conv:.4f}, "
              f"gap={gap:.1f} (>=15), {took:.0f}s <= 900s")


def test_criterion_10_grounding_interpretability(criterion, crit7_runs):
    slots = crit7_runs["solver"].representation["per_slot"]
    ok = len(slots) == 2 and all(s >= 0.90 for s in slots)
    criterion(10, ok, "per-digit grounding accuracy "
              + ", ".join(f"{s:.4f}" for s in slots) + " (each >= 0.90)")


def test_criterion_11_cache_transparency(criterion, crit7_runs,
                                         tmp_path_factory):
    cfg = dataclasses.replace(
        crit7_runs["config"], cache=False,
        output_dir=str(tmp_path_factory.mktemp("crit11") / "no-cache"))
    t0 = time.perf_counter()
    uncached = run_training(cfg)
    took = time.perf_counter() - t0
    cached = crit7_runs["solver"]
    identical = (uncached.final_predictions == cached.final_predictions
                 and uncached.final_test_accuracy
                 == cached.final_test_accuracy)
    ratio = took / max(crit7_runs["solver_seconds"], 1e-9)
    criterion(11, identical,
              f"cache off: accuracy {uncached.final_test_accuracy:.4f} and "
              f"all {len(cached.final_predictions)} prediction strings "
              f"bitwise identical; {ratio:.2f}x slower (not asserted)")
