"""Experiment runner: training, evaluation, one-shot solving, self-tests,
and DIMACS export.

Runs are configured by a JSON file plus flag overrides (flags win), and
write four artifacts into the output directory: `report.json` (validating
against the checked-in schema), `epochs.csv`, `checkpoint.bin`, and, when
tracing is on, a `trace/` directory with one DIMACS dump per solver call.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 selftest failure.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import sys
import time

import click
import numpy as np

from . import tasks
from .formula import CnfInstance, from_dimacs, to_dimacs
from .layer import (LayerCounters, LayerSpec, SolveCache, TraceWriter,
                    backward_batch, forward_batch, outputs)
from .nn import (SGD, Adam, WarmupCosine, bce_with_logits, load_checkpoint,
                 save_checkpoint, sigmoid)
from .sat import minimize_core, solve

TIMING_FIELDS = ("epoch_seconds", "solver_seconds")

TASK_DEFAULTS = {
    "mnist-add": dict(batch_size=128, learning_rate=1.0,
                      pretrain_epochs=3, train_epochs=5),
    "visual-algebra": dict(batch_size=64, learning_rate=1.0,
                           pretrain_epochs=3, train_epochs=5),
    "liars-puzzle": dict(batch_size=32, learning_rate=1e-3, optimizer="adam",
                         pretrain_epochs=15, train_epochs=5),
}


# ---------------------------------------------------------------------------
# configuration

@dataclasses.dataclass
class RunConfig:
    task: str = "mnist-add"
    p_percent: int = 100
    forward: str = "smt"  # training-time forward pass {smt, max}
    backward: str = "core"  # {core, max}
    eval_forward: str = "max"  # readout used for reported accuracy
    pretrain_epochs: int = 3
    train_epochs: int = 5
    batch_size: int = 128
    learning_rate: float = 1.0
    lr_floor: float = 0.0  # cosine-decay floor, as a fraction of the rate
    optimizer: str = "sgd"  # {sgd, adam}
    seed: int = 0
    data_dir: str | None = None
    output_dir: str = "runs/out"
    arch: str = "dense"  # {dense, conv}
    cache: bool = True
    workers: int = 0  # <=1 runs solver calls serially
    n_train: int = 10000
    n_test: int = 2000
    trace: bool = False

    def validate(self) -> "RunConfig":
        if self.task not in tasks.TASKS:
            raise ValueError(f"unknown task {self.task!r}; "
                             f"have {sorted(tasks.TASKS)}")
        if self.forward not in ("smt", "max"):
            raise ValueError(f"forward must be smt or max, got {self.forward!r}")
        if self.eval_forward not in ("smt", "max"):
            raise ValueError(f"eval_forward must be smt or max, "
                             f"got {self.eval_forward!r}")
        if self.backward not in ("core", "max"):
            raise ValueError(f"backward must be core or max, got {self.backward!r}")
        if self.arch not in ("dense", "conv"):
            raise ValueError(f"arch must be dense or conv, got {self.arch!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be sgd or adam, "
                             f"got {self.optimizer!r}")
        for name in ("pretrain_epochs", "train_epochs", "workers"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("batch_size", "n_train", "n_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.lr_floor <= 1.0:
            raise ValueError("lr_floor must be in [0, 1]")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()


def load_config(path=None, overrides=None) -> RunConfig:
    """Config file plus flag overrides; flags win, task defaults fill gaps."""
    file_vals: dict = {}
    if path:
        with open(path) as fh:
            file_vals = json.load(fh)
        if not isinstance(file_vals, dict):
            raise ValueError(f"{path}: config must be a JSON object")
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    task = overrides.get("task", file_vals.get("task", RunConfig.task))
    merged = dict(TASK_DEFAULTS.get(task, {}))
    merged.update(file_vals)
    merged.update(overrides)
    return RunConfig.from_dict(merged)


# ---------------------------------------------------------------------------
# reports

@dataclasses.dataclass
class RunReport:
    task: str
    config: dict
    epochs: list  # row dicts, one per epoch per phase
    final_test_accuracy: float
    representation: dict | None
    totals: dict
    final_predictions: list  # one "0101…" string per test instance
    aborted: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def report_without_timing(report: dict) -> dict:
    """Deep copy with wall-clock fields removed, for run-to-run comparison."""
    out = json.loads(json.dumps(report))
    for row in out.get("epochs", []):
        for f in TIMING_FIELDS:
            row.pop(f, None)
    out.get("totals", {}).pop("wall_seconds", None)
    return out


EPOCH_COLUMNS = ("phase", "epoch", "train_loss", "test_accuracy",
                 "epoch_seconds", "solver_seconds", "solver_calls",
                 "cache_hits", "fallbacks", "cache_hit_rate")


def _write_artifacts(out_dir: str, report: RunReport) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "epochs.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EPOCH_COLUMNS)
        w.writeheader()
        for row in report.epochs:
            w.writerow({k: row.get(k) for k in EPOCH_COLUMNS})


def report_schema_path() -> str:
    return os.path.join(os.path.dirname(__file__), "report_schema.json")


# ---------------------------------------------------------------------------
# shared evaluation plumbing

_PHI_CACHE: dict = {}


def task_phi(name: str) -> LayerSpec:
    if name not in _PHI_CACHE:
        _PHI_CACHE[name] = tasks.TASKS[name].phi_builder()
    return _PHI_CACHE[name]


def _np_bce(logits: np.ndarray, targets: np.ndarray) -> float:
    x = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    return float(per.mean())


def _make_optimizer(config: RunConfig, params, epochs: int,
                    steps_per_epoch: int):
    """SGD runs warmup+cosine over the phase; Adam runs at a fixed rate."""
    if config.optimizer == "adam":
        return Adam(params, config.learning_rate)
    sched = WarmupCosine(config.learning_rate, steps_per_epoch,
                         steps_per_epoch * epochs, floor=config.lr_floor)
    return SGD(params, config.learning_rate, schedule=sched)


def predict_bits(encode, spec: LayerSpec, xs: np.ndarray, forward: str, *,
                 cache=None, counters=None, trace=None, workers: int = 0,
                 batch_size: int = 512) -> np.ndarray:
    """(N, q) Boolean predictions from a solver readout of encoded inputs."""
    chunks = []
    for lo in range(0, len(xs), batch_size):
        z = encode(xs[lo:lo + batch_size])
        recs = forward_batch(spec, z, forward, cache=cache, counters=counters,
                             trace=trace, workers=max(workers, 1))
        chunks.append(outputs(recs) > 0)
    return np.concatenate(chunks) if chunks else np.zeros((0, spec.q), bool)


def head_bits(encode, head, xs: np.ndarray, batch_size: int = 512) -> np.ndarray:
    chunks = []
    for lo in range(0, len(xs), batch_size):
        z = tasks.Tensor(encode(xs[lo:lo + batch_size]))
        chunks.append(head(z).data > 0)
    return np.concatenate(chunks)


def _accuracy(pred_bits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of instances with every output bit correct."""
    return float((pred_bits == labels.astype(bool)).all(axis=1).mean())


def representation_accuracy(encode, dataset, slot_bits: int,
                            batch_size: int = 512) -> dict:
    """Grounding-bit agreement of the encoder, per bit and per slot."""
    bits = []
    for lo in range(0, len(dataset.xs), batch_size):
        bits.append(encode(dataset.xs[lo:lo + batch_size]) > 0)
    pred = np.concatenate(bits)
    truth = dataset.grounding.astype(bool)
    n_slots = truth.shape[1] // slot_bits
    per_slot = []
    for s in range(n_slots):
        cols = slice(s * slot_bits, (s + 1) * slot_bits)
        per_slot.append(float((pred[:, cols] == truth[:, cols])
                              .all(axis=1).mean()))
    return {"per_bit": float((pred == truth).mean()),
            "per_slot": per_slot,
            "slot_bits": slot_bits}


def _bit_strings(pred_bits: np.ndarray) -> list:
    return ["".join("1" if b else "0" for b in row) for row in pred_bits]


# ---------------------------------------------------------------------------
# training

def run_training(config: RunConfig, log=None) -> RunReport:
    """Pre-train with a dense head, then train through the solver layer."""
    config.validate()
    say = log or (lambda s: None)
    t_start = time.perf_counter()
    out_dir = config.output_dir
    os.makedirs(out_dir, exist_ok=True)
    spec = task_phi(config.task)
    train, test = tasks.build_dataset(
        config.task, config.n_train, config.seed, p_percent=config.p_percent,
        data_dir=config.data_dir,
        cache_dir=os.path.join(out_dir, "data-cache"), n_test=config.n_test)
    rng = np.random.default_rng(config.seed)
    enc = tasks.build_encoder(config.task, config.arch, rng)
    head = tasks.DenseHead(spec.p, spec.q, rng)
    counters = LayerCounters()
    cache = SolveCache() if config.cache else None
    trace = TraceWriter(os.path.join(out_dir, "trace")) if config.trace else None
    ck_path = os.path.join(out_dir, "checkpoint.bin")

    encode = lambda xs: enc(xs).data
    labels_f = train.labels.astype(np.float32)
    n = len(train)
    steps_per_epoch = max(1, math.ceil(n / config.batch_size))
    rows: list = []
    seen = {"solver_calls": 0, "cache_hits": 0, "fallbacks": 0}

    def save_ck() -> None:
        params = {**enc.named(), **head.named()}
        save_checkpoint(ck_path, {k: t.data for k, t in params.items()})

    def finish_row(phase, epoch, loss, acc, t0, solver_seconds):
        snap = counters.snapshot()
        delta = {k: snap[k] - seen[k] for k in snap}
        seen.update(snap)
        asked = delta["solver_calls"] + delta["cache_hits"]
        row = {"phase": phase, "epoch": epoch, "train_loss": loss,
               "test_accuracy": acc,
               "epoch_seconds": time.perf_counter() - t0,
               "solver_seconds": solver_seconds,
               "solver_calls": delta["solver_calls"],
               "cache_hits": delta["cache_hits"],
               "fallbacks": delta["fallbacks"],
               "cache_hit_rate": (delta["cache_hits"] / asked) if asked else 0.0}
        rows.append(row)
        say(f"[{phase} {epoch}] loss={loss:.4f} test_acc={acc:.4f} "
            f"({row['epoch_seconds']:.1f}s, solver {solver_seconds:.1f}s, "
            f"{delta['solver_calls']} calls)")
        return row

    def abort_report(err) -> RunReport:
        report = RunReport(
            task=config.task, config=config.to_dict(), epochs=rows,
            final_test_accuracy=rows[-1]["test_accuracy"] if rows else 0.0,
            representation=None, totals=_totals(), final_predictions=[],
            aborted=True)
        _write_artifacts(out_dir, report)
        say(f"aborted: {err}")
        return report

    def _totals() -> dict:
        snap = counters.snapshot()
        asked = snap["solver_calls"] + snap["cache_hits"]
        return {**snap,
                "cache_hit_rate": (snap["cache_hits"] / asked) if asked else 0.0,
                "cache_entries": cache.stats() if cache else None,
                "wall_seconds": time.perf_counter() - t_start}

    # phase 1: supervised pre-training through a dense head
    if config.pretrain_epochs > 0:
        params = list(enc.named().values()) + list(head.named().values())
        opt = _make_optimizer(config, params, config.pretrain_epochs,
                              steps_per_epoch)
        for epoch in range(1, config.pretrain_epochs + 1):
            t0 = time.perf_counter()
            losses = []
            idx = rng.permutation(n)
            try:
                for lo in range(0, n, config.batch_size):
                    batch = idx[lo:lo + config.batch_size]
                    z = enc(train.xs[batch])
                    loss = bce_with_logits(head(z), labels_f[batch])
                    loss.backward()
                    opt.step()
                    losses.append(float(loss.data))
            except RuntimeError as err:
                abort_report(err)
                raise
            acc = _accuracy(head_bits(encode, head, test.xs), test.labels)
            finish_row("pretrain", epoch, float(np.mean(losses)), acc, t0, 0.0)
            save_ck()

    # phase 2: training through the solver layer
    if config.train_epochs > 0:
        params = list(enc.named().values())
        opt = _make_optimizer(config, params, config.train_epochs,
                              steps_per_epoch)
        for epoch in range(1, config.train_epochs + 1):
            t0 = time.perf_counter()
            solver_s = 0.0
            losses = []
            idx = rng.permutation(n)
            try:
                for lo in range(0, n, config.batch_size):
                    batch = idx[lo:lo + config.batch_size]
                    z = enc(train.xs[batch])
                    t1 = time.perf_counter()
                    recs = forward_batch(spec, z.data, config.forward,
                                         cache=cache, counters=counters,
                                         trace=trace,
                                         workers=max(config.workers, 1))
                    y = outputs(recs)
                    grad_y = sigmoid(y) - labels_f[batch]
                    gz = backward_batch(spec, recs, grad_y, config.backward,
                                        cache=cache, counters=counters,
                                        trace=trace,
                                        workers=max(config.workers, 1))
                    solver_s += time.perf_counter() - t1
                    z.backward((gz / len(batch)).astype(z.data.dtype))
                    opt.step()
                    losses.append(_np_bce(y, labels_f[batch]))
            except RuntimeError as err:
                abort_report(err)
                raise
            t1 = time.perf_counter()
            # evaluations never use the solve cache: reported predictions
            # stay a pure function of the weights, so cache on/off runs of
            # the same config agree bit for bit
            pred = predict_bits(encode, spec, test.xs, config.eval_forward,
                                cache=None, counters=counters, trace=trace,
                                workers=config.workers)
            solver_s += time.perf_counter() - t1
            acc = _accuracy(pred, test.labels)
            finish_row("train", epoch, float(np.mean(losses)), acc, t0, solver_s)
            save_ck()

    if config.pretrain_epochs == 0 and config.train_epochs == 0:
        save_ck()
    final_pred = predict_bits(encode, spec, test.xs, config.eval_forward,
                              cache=None, counters=counters, trace=trace,
                              workers=config.workers)
    report = RunReport(
        task=config.task, config=config.to_dict(), epochs=rows,
        final_test_accuracy=_accuracy(final_pred, test.labels),
        representation=representation_accuracy(
            encode, test, tasks.TASKS[config.task].slot_bits),
        totals=_totals(),
        final_predictions=_bit_strings(final_pred))
    _write_artifacts(out_dir, report)
    say(f"final test accuracy {report.final_test_accuracy:.4f}")
    return report


def run_conventional(config: RunConfig, log=None) -> RunReport:
    """Baseline: the same encoder and dense head trained end to end."""
    config.validate()
    say = log or (lambda s: None)
    t_start = time.perf_counter()
    out_dir = config.output_dir
    os.makedirs(out_dir, exist_ok=True)
    spec = task_phi(config.task)
    train, test = tasks.build_dataset(
        config.task, config.n_train, config.seed, p_percent=config.p_percent,
        data_dir=config.data_dir,
        cache_dir=os.path.join(out_dir, "data-cache"), n_test=config.n_test)
    rng = np.random.default_rng(config.seed)
    enc = tasks.build_encoder(config.task, config.arch, rng)
    head = tasks.DenseHead(spec.p, spec.q, rng)
    encode = lambda xs: enc(xs).data
    labels_f = train.labels.astype(np.float32)
    n = len(train)
    epochs_total = config.pretrain_epochs + config.train_epochs
    steps_per_epoch = max(1, math.ceil(n / config.batch_size))
    params = list(enc.named().values()) + list(head.named().values())
    opt = _make_optimizer(config, params, max(epochs_total, 1), steps_per_epoch)
    rows: list = []
    ck_path = os.path.join(out_dir, "checkpoint.bin")
    for epoch in range(1, epochs_total + 1):
        t0 = time.perf_counter()
        losses = []
        idx = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            batch = idx[lo:lo + config.batch_size]
            z = enc(train.xs[batch])
            loss = bce_with_logits(head(z), labels_f[batch])
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        acc = _accuracy(head_bits(encode, head, test.xs), test.labels)
        rows.append({"phase": "conventional", "epoch": epoch,
                     "train_loss": float(np.mean(losses)),
                     "test_accuracy": acc,
                     "epoch_seconds": time.perf_counter() - t0,
                     "solver_seconds": 0.0, "solver_calls": 0,
                     "cache_hits": 0, "fallbacks": 0, "cache_hit_rate": 0.0})
        say(f"[conventional {epoch}] loss={rows[-1]['train_loss']:.4f} "
            f"test_acc={acc:.4f} ({rows[-1]['epoch_seconds']:.1f}s)")
        save_checkpoint(ck_path, {k: t.data for t_map in (enc.named(),
                                                          head.named())
                                  for k, t in t_map.items()})
    pred = head_bits(encode, head, test.xs)
    report = RunReport(
        task=config.task, config=config.to_dict(), epochs=rows,
        final_test_accuracy=_accuracy(pred, test.labels),
        representation=representation_accuracy(
            encode, test, tasks.TASKS[config.task].slot_bits),
        totals={"solver_calls": 0, "cache_hits": 0, "fallbacks": 0,
                "cache_hit_rate": 0.0, "cache_entries": None,
                "wall_seconds": time.perf_counter() - t_start},
        final_predictions=_bit_strings(pred))
    _write_artifacts(out_dir, report)
    say(f"final test accuracy {report.final_test_accuracy:.4f}")
    return report


# ---------------------------------------------------------------------------
# evaluation

def run_eval(checkpoint: str, task: str, forward: str, *, arch: str = "dense",
             data_dir=None, n_test: int = 2000, seed: int = 0,
             workers: int = 0, output_dir=None, log=None) -> RunReport:
    """Accuracy of a stored encoder under the requested solver readout."""
    say = log or (lambda s: None)
    if task not in tasks.TASKS:
        raise ValueError(f"unknown task {task!r}")
    if forward not in ("smt", "max"):
        raise ValueError(f"forward must be smt or max, got {forward!r}")
    t_start = time.perf_counter()
    stored = load_checkpoint(checkpoint)
    rng = np.random.default_rng(seed)
    enc = tasks.build_encoder(task, arch, rng)
    for name, tensor in enc.named().items():
        if name not in stored:
            raise ValueError(f"checkpoint does not match architecture: "
                             f"missing {name}")
        if stored[name].shape != tensor.data.shape:
            raise ValueError(
                f"checkpoint does not match architecture: {name} has shape "
                f"{stored[name].shape}, expected {tensor.data.shape}")
        tensor.data = stored[name].astype(tensor.data.dtype)
    spec = task_phi(task)
    _, test = tasks.build_dataset(task, 1, seed, data_dir=data_dir,
                                  n_test=n_test)
    counters = LayerCounters()
    encode = lambda xs: enc(xs).data
    # evaluation is uncached so the result is a pure function of the weights
    pred = predict_bits(encode, spec, test.xs, forward, cache=None,
                        counters=counters, workers=workers)
    snap = counters.snapshot()
    asked = snap["solver_calls"] + snap["cache_hits"]
    report = RunReport(
        task=task,
        config={"checkpoint": checkpoint, "task": task, "forward": forward,
                "arch": arch, "n_test": n_test, "seed": seed},
        epochs=[],
        final_test_accuracy=_accuracy(pred, test.labels),
        representation=representation_accuracy(
            encode, test, tasks.TASKS[task].slot_bits),
        totals={**snap,
                "cache_hit_rate": (snap["cache_hits"] / asked) if asked else 0.0,
                "cache_entries": None,
                "wall_seconds": time.perf_counter() - t_start},
        final_predictions=_bit_strings(pred))
    if output_dir:
        _write_artifacts(output_dir, report)
    say(f"test accuracy {report.final_test_accuracy:.4f} ({forward} readout)")
    return report


# ---------------------------------------------------------------------------
# one-shot solving

def _parse_bits(text: str, want: int, what: str) -> list:
    bits = [c for c in text if not c.isspace()]
    if any(c not in "01" for c in bits) or len(bits) != want:
        raise click.UsageError(
            f"{what} must be {want} characters of 0/1, got {text!r}")
    return [c == "1" for c in bits]


def solve_once(spec: LayerSpec, z_bits, mode: str, yhat_bits=None) -> dict:
    """One solver consultation; the plumbing behind `satlayer solve`."""
    z = np.where(np.array(z_bits, dtype=bool), 4.0, -4.0)
    if mode in ("smt", "max"):
        recs = forward_batch(spec, [z], mode)
        y = recs[0].y
        return {"mode": mode, "sat": any(v != 0.0 for v in y),
                "y_bits": "".join("1" if v > 0 else "0" for v in y)}
    if mode != "core":
        raise click.UsageError(f"mode must be smt, max, or core, got {mode!r}")
    if yhat_bits is None:
        raise click.UsageError("core mode needs --yhat")
    pinned = CnfInstance(
        spec.cnf.num_vars,
        spec.cnf.clauses + tuple((l,) if b else (~l,)
                                 for l, b in zip(spec.cnf.y_ports, yhat_bits)),
        spec.cnf.z_ports, spec.cnf.y_ports)
    assumptions = [l if b else ~l
                   for l, b in zip(spec.cnf.z_ports, z_bits)]
    res = solve(pinned, assumptions)
    if res.sat:
        return {"mode": "core", "sat": True, "core_indices": []}
    core = minimize_core(pinned, res.core)
    pos = {l: i for i, l in enumerate(assumptions)}
    return {"mode": "core", "sat": False,
            "core_indices": sorted(pos[l] for l in core)}


# ---------------------------------------------------------------------------
# self-test suites

class SelftestFailure(Exception):
    pass


def _suite_sat_oracle() -> str | None:
    from .formula import Context, Lit
    from .sat import solve_by_enumeration
    rng = np.random.default_rng(20)
    for trial in range(60):
        ctx = Context()
        nv = int(rng.integers(3, 10))
        vs = ctx.vars(nv)
        clauses = []
        for _ in range(int(rng.integers(2, 4 * nv))):
            width = int(rng.integers(1, 4))
            picks = rng.choice(nv, size=width, replace=False)
            clauses.append(tuple(Lit(vs[v], bool(rng.integers(2)))
                                 for v in picks))
        cnf = CnfInstance(nv, tuple(clauses))
        if solve(cnf).sat != solve_by_enumeration(cnf).sat:
            return f"verdict mismatch on trial {trial}"
    return None


def _suite_maxsat_oracle() -> str | None:
    from .formula import Context, Lit
    from .maxsat import SoftUnit, brute_force_oracle, max_weight
    rng = np.random.default_rng(21)
    for trial in range(40):
        ctx = Context()
        nv = int(rng.integers(3, 8))
        vs = ctx.vars(nv)
        clauses = [tuple(Lit(vs[v], bool(rng.integers(2)))
                         for v in rng.choice(nv, size=min(3, nv), replace=False))
                   for _ in range(int(rng.integers(1, 2 * nv)))]
        cnf = CnfInstance(nv, tuple(clauses))
        if not solve(cnf).sat:
            continue
        soft = [SoftUnit(Lit(vs[int(rng.integers(nv))], bool(rng.integers(2))),
                         float(rng.integers(1, 10)))
                for _ in range(int(rng.integers(1, 7)))]
        got = max_weight(cnf, soft)
        want = brute_force_oracle(cnf, soft)
        if abs(got.weight - want.weight) > 1e-9:
            return f"weight mismatch on trial {trial}"
    return None


def _suite_gradcheck() -> str | None:
    from .nn import Dense, Tensor, relu, tsum
    rng = np.random.default_rng(22)
    x = rng.normal(size=(4, 6))
    d = Dense(6, 3, rng, dtype=np.float64)
    def f():
        t = Tensor(x)
        return tsum(relu(d(t)))
    out = f()
    out.backward()
    got = d.w.grad.copy()
    eps = 1e-6
    for i in range(d.w.data.size):
        flat = d.w.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f().data)
        flat[i] = orig - eps
        lo = float(f().data)
        flat[i] = orig
        num = (hi - lo) / (2 * eps)
        if abs(num - got.reshape(-1)[i]) > 1e-4 * max(1.0, abs(num)):
            return f"dense weight grad off at {i}"
    return None


def _suite_corrected_output() -> str | None:
    from . import layer
    rng = np.random.default_rng(23)
    for y_val in (1.0, -1.0):
        for g_sign in (1.0, -1.0):
            got = layer.corrected_output(np.array([y_val]),
                                         np.array([g_sign * 0.3]))
            want = y_val - 2 * g_sign
            if got[0] != want:
                return f"corner (y={y_val}, g={g_sign}) -> {got[0]}"
    for _ in range(50):
        q = int(rng.integers(1, 9))
        target = rng.integers(0, 2, size=q).astype(np.float64)
        y = np.where(rng.random(q) > 0.5, 1.0, -1.0)
        grad = np.array([layer.loss_grad(v, t) for v, t in zip(y, target)])
        yhat = layer.corrected_output(y, grad)
        if not np.array_equal(np.sign(yhat), np.where(target > 0, 1.0, -1.0)):
            return "corner sign mismatch"
    return None


def _suite_layer_equality() -> str | None:
    from .formula import Context, atom, conj, iff, neg, tseitin
    from .layer import backward_max, forward_max, loss_grad
    ctx = Context()
    zs = ctx.vars(6)
    ys = ctx.vars(6)
    f = conj(*(iff(atom(y), neg(atom(z))) for z, y in zip(zs, ys)))
    spec = LayerSpec(tseitin(f, ctx, z_ports=zs, y_ports=ys))
    rng = np.random.default_rng(24)
    for trial in range(100):
        z = rng.normal(size=6) * 3
        target = (rng.random(6) > 0.5).astype(np.float64)
        rec = forward_max(spec, z)
        gy = sigmoid(np.array(rec.y)) - target
        gz = backward_max(spec, rec, gy)
        direct = np.array([loss_grad(zi, 1.0 - ti)
                           for zi, ti in zip(z, target)])
        if np.abs(gz - direct).max() > 1e-12:
            return f"gradient mismatch on trial {trial}"
    return None


SELFTEST_SUITES = {
    "sat-oracle": _suite_sat_oracle,
    "maxsat-oracle": _suite_maxsat_oracle,
    "gradcheck": _suite_gradcheck,
    "corrected-output": _suite_corrected_output,
    "layer-equality": _suite_layer_equality,
}


def run_selftests(pattern: str = "", log=None) -> dict:
    say = log or (lambda s: None)
    results = {}
    for name, fn in SELFTEST_SUITES.items():
        if pattern and pattern not in name:
            continue
        t0 = time.perf_counter()
        detail = fn()
        took = time.perf_counter() - t0
        results[name] = detail
        if detail is None:
            say(f"PASS {name} ({took:.1f}s)")
        else:
            say(f"FAIL {name}: {detail} ({took:.1f}s)")
    return results


# ---------------------------------------------------------------------------
# command-line surface

@click.group(name="satlayer")
def cli() -> None:
    """Constraint-solver layers: training, evaluation, and diagnostics."""


def _config_options(fn):
    opts = [
        click.option("--config", "config_path", type=click.Path(exists=True),
                     default=None, help="JSON config file."),
        click.option("--task", type=str, default=None),
        click.option("--p-percent", "p_percent", type=int, default=None),
        click.option("--forward", type=str, default=None),
        click.option("--backward", type=str, default=None),
        click.option("--eval-forward", "eval_forward", type=str, default=None),
        click.option("--pretrain-epochs", "pretrain_epochs", type=int,
                     default=None),
        click.option("--train-epochs", "train_epochs", type=int, default=None),
        click.option("--batch-size", "batch_size", type=int, default=None),
        click.option("--learning-rate", "learning_rate", type=float,
                     default=None),
        click.option("--lr-floor", "lr_floor", type=float, default=None),
        click.option("--optimizer", type=str, default=None),
        click.option("--seed", type=int, default=None),
        click.option("--data-dir", "data_dir", type=str, default=None,
                     help="IDX digit files (or set SATLAYER_DATA)."),
        click.option("--output-dir", "output_dir", type=str, default=None),
        click.option("--arch", type=str, default=None),
        click.option("--cache/--no-cache", "cache", default=None),
        click.option("--workers", type=int, default=None),
        click.option("--n-train", "n_train", type=int, default=None),
        click.option("--n-test", "n_test", type=int, default=None),
        click.option("--trace/--no-trace", "trace", default=None),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


@cli.command()
@_config_options
@click.option("--conventional", is_flag=True,
              help="Train the dense-head baseline instead of the solver layer.")
def train(config_path, conventional, **overrides):
    """Train a model and write report.json / epochs.csv / checkpoint.bin."""
    try:
        config = load_config(config_path, overrides)
    except ValueError as err:
        raise click.UsageError(str(err))
    runner = run_conventional if conventional else run_training
    runner(config, log=click.echo)


@cli.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--task", required=True, type=str)
@click.option("--forward", default="max", type=str)
@click.option("--arch", default="dense", type=str)
@click.option("--data-dir", "data_dir", default=None, type=str)
@click.option("--n-test", "n_test", default=2000, type=int)
@click.option("--seed", default=0, type=int)
@click.option("--workers", default=0, type=int)
@click.option("--output-dir", "output_dir", default=None, type=str)
def eval_cmd(**kw):
    """Evaluate a checkpoint with a solver readout."""
    try:
        run_eval(log=click.echo, **kw)
    except ValueError as err:
        raise click.UsageError(str(err))


@cli.command("solve")
@click.option("--task", default=None, type=str,
              help="Builtin task formula to solve over.")
@click.option("--phi", default=None, type=click.Path(exists=True),
              help="DIMACS file with zport/yport comments.")
@click.option("--z", "z_text", required=True, type=str,
              help="Input bits, e.g. '00100 00111'.")
@click.option("--mode", default="smt", type=str,
              help="smt, max, or core.")
@click.option("--yhat", default=None, type=str,
              help="Target output bits (core mode).")
def solve_cmd(task, phi, z_text, mode, yhat):
    """Solve a formula once for given input bits."""
    if (task is None) == (phi is None):
        raise click.UsageError("pass exactly one of --task / --phi")
    if task is not None:
        if task not in tasks.TASKS:
            raise click.UsageError(f"unknown task {task!r}")
        spec = task_phi(task)
    else:
        with open(phi) as fh:
            spec = LayerSpec(from_dimacs(fh.read()))
    z_bits = _parse_bits(z_text, spec.p, "--z")
    yhat_bits = _parse_bits(yhat, spec.q, "--yhat") if yhat else None
    out = solve_once(spec, z_bits, mode, yhat_bits)
    if mode in ("smt", "max"):
        verdict = "SAT" if out["sat"] else "UNSAT"
        click.echo(f"{verdict}, y = {out['y_bits']}")
    elif out["sat"]:
        click.echo("SAT under assumptions; no core")
    else:
        click.echo("UNSAT, core indices: "
                   + " ".join(map(str, out["core_indices"])))


@cli.command("selftest")
@click.option("--filter", "pattern", default="", type=str,
              help="Only run suites whose name contains this substring.")
def selftest_cmd(pattern):
    """Run embedded oracle-equivalence and invariant suites."""
    results = run_selftests(pattern, log=click.echo)
    if not results:
        raise click.UsageError(f"no self-test suite matches {pattern!r}")
    failures = {k: v for k, v in results.items() if v is not None}
    if failures:
        raise SelftestFailure(f"{len(failures)} suite(s) failed")
    click.echo(f"all {len(results)} suite(s) passed")


@cli.command("export-dimacs")
@click.option("--task", required=True, type=str)
@click.option("-o", "--output", default=None, type=click.Path())
def export_dimacs(task, output):
    """Write a task's compiled formula as DIMACS with port comments."""
    if task not in tasks.TASKS:
        raise click.UsageError(f"unknown task {task!r}")
    text = to_dimacs(task_phi(task).cnf)
    if output:
        with open(output, "w") as fh:
            fh.write(text)
        click.echo(f"wrote {output}")
    else:
        click.echo(text, nl=False)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.UsageError as err:
        click.echo(f"usage error: {err.format_message()}", err=True)
        return 1
    except click.ClickException as err:
        err.show()
        return 1
    except click.exceptions.Abort:
        return 1
    except SelftestFailure as err:
        click.echo(str(err), err=True)
        return 3
    except Exception as err:  # noqa: BLE001 - CLI boundary
        click.echo(f"error: {err}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
