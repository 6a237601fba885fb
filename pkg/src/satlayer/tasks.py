"""Decomposable-problem harnesses: digit addition, visual algebra, and a
three-agent accusation puzzle.

Each task contributes a constraint formula over Boolean ports, a dataset
builder whose labels are the unique formula solution for the true grounding
bits, a grounding oracle (defined on the generative provenance, since the
"true" bits of a raw image are exactly what the encoder is supposed to
learn), and encoder architectures.

Digit images come from the standard IDX files when a data directory is
given (flag or SATLAYER_DATA env var); otherwise a bundled 8x8 digit corpus
is upsampled to 28x28 so everything runs self-contained at desk scale.
"""

from __future__ import annotations

import gzip
import hashlib
import itertools
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .formula import (BitVec, Context, Lit, atom, bv_add, bv_eq, bv_le_const,
                      bv_mul, bv_mul_const, bv_nonzero, bv_zero_extend, conj,
                      exactly_k, implies, neg, tseitin, xor)
from .layer import LayerSpec
from .nn import Dense, Conv2d, Tensor, concat, flatten, relu

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


# ---------------------------------------------------------------------------
# IDX ingestion

def load_idx(path):
    """Parse an IDX file (unsigned bytes): images scale to [0,1] float32,
    1-d label files come back as int64."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if str(path).endswith(".gz"):
        blob = gzip.decompress(blob)
    if len(blob) < 4:
        raise ValueError(f"{path}: truncated header at byte 0")
    magic = struct.unpack_from(">I", blob, 0)[0]
    if blob[0] != 0 or blob[1] != 0 or blob[2] != 0x08:
        raise ValueError(f"{path}: bad magic 0x{magic:08x} at byte 0 "
                         f"(want unsigned-byte IDX)")
    ndim = blob[3]
    head = 4 + 4 * ndim
    if len(blob) < head:
        raise ValueError(f"{path}: truncated dimension table at byte 4")
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 0
    if len(blob) != head + count:
        raise ValueError(f"{path}: payload is {len(blob) - head} bytes at "
                         f"byte offset {head}, expected {count}")
    arr = np.frombuffer(blob, dtype=np.uint8, count=count, offset=head)
    arr = arr.reshape(dims)
    if magic == LABELS_MAGIC or ndim == 1:
        return arr.astype(np.int64)
    return arr.astype(np.float32) / 255.0


def dump_idx(path, arr) -> None:
    """Write a uint8 array in IDX format (inverse of load_idx for bytes)."""
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", 0x0800 | arr.ndim))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


# ---------------------------------------------------------------------------
# digit corpus

@dataclass(frozen=True)
class DigitCorpus:
    train_images: np.ndarray  # (N, 28, 28) float32 in [0, 1]
    train_labels: np.ndarray  # (N,) int
    test_images: np.ndarray
    test_labels: np.ndarray
    source: str


_IDX_NAMES = {
    "train_images": ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
    "train_labels": ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
    "test_images": ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
    "test_labels": ("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"),
}


def _find_idx(data_dir: str, names) -> str | None:
    for name in names:
        for suffix in ("", ".gz"):
            p = os.path.join(data_dir, name + suffix)
            if os.path.exists(p):
                return p
    return None


_corpus_cache: dict = {}


def load_digit_corpus(data_dir=None) -> DigitCorpus:
    """Real 28x28 digit files when available, else the upsampled fallback."""
    data_dir = data_dir or os.environ.get("SATLAYER_DATA")
    key = data_dir or ""
    if key in _corpus_cache:
        return _corpus_cache[key]
    corpus = None
    if data_dir:
        paths = {k: _find_idx(data_dir, v) for k, v in _IDX_NAMES.items()}
        if all(paths.values()):
            corpus = DigitCorpus(
                train_images=load_idx(paths["train_images"]),
                train_labels=load_idx(paths["train_labels"]),
                test_images=load_idx(paths["test_images"]),
                test_labels=load_idx(paths["test_labels"]),
                source="mnist-idx")
    if corpus is None:
        corpus = _fallback_corpus()
    _corpus_cache[key] = corpus
    return corpus


def _fallback_corpus() -> DigitCorpus:
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits
    raw = load_digits()
    imgs = raw.images.astype(np.float32) / 16.0  # (1797, 8, 8)
    big = zoom(imgs, (1, 3.5, 3.5), order=1).clip(0, 1).astype(np.float32)
    labels = raw.target.astype(np.int64)
    rng = np.random.default_rng(1797)
    order = rng.permutation(len(big))
    cut = int(len(big) * 0.8)
    tr, te = order[:cut], order[cut:]
    return DigitCorpus(big[tr], labels[tr], big[te], labels[te],
                       source="upsampled-8x8")


class _DigitSampler:
    """Deterministic digit-image picker, sampling with replacement."""

    def __init__(self, images, labels, rng: np.random.Generator):
        self.images = images
        self.rng = rng
        self.pools = {d: np.flatnonzero(labels == d) for d in range(10)}
        self.draws = {d: 0 for d in range(10)}
        for d, pool in self.pools.items():
            if len(pool) == 0:
                raise ValueError(f"corpus has no images of digit {d}")

    def take(self, d: int) -> np.ndarray:
        pool = self.pools[d]
        self.draws[d] += 1
        return self.images[pool[self.rng.integers(len(pool))]]

    def replacement_used(self) -> bool:
        return any(self.draws[d] > len(self.pools[d]) for d in range(10))


# ---------------------------------------------------------------------------
# bit helpers

def value_bits(v: int, width: int) -> tuple:
    """Unsigned binary encoding, most-significant bit first."""
    if not 0 <= v < (1 << width):
        raise ValueError(f"{v} does not fit in {width} bits")
    return tuple(bool((v >> (width - 1 - i)) & 1) for i in range(width))


def bits_value(bits) -> int:
    out = 0
    for b in bits:
        out = out << 1 | int(b)
    return out


# ---------------------------------------------------------------------------
# constraint formulas

def mnist_add_spec() -> LayerSpec:
    """Two 5-bit operands on the input ports, their sum on the output ports.

    The sum is taken over the naturals (computed at width 6 and equated to
    the zero-extended output), not modulo 32. This matters for learning:
    under wrap-around addition, offsetting both operand encodings by 16
    cancels on same-digit training pairs, so a model can satisfy every
    training instance with encodings that are wrong on mixed pairs. The
    carry-out constraint makes such encodings unsatisfiable instead of
    silently consistent.
    """
    ctx = Context()
    a_vars = ctx.vars(5)
    b_vars = ctx.vars(5)
    y_vars = ctx.vars(5)
    A = BitVec(tuple(Lit(v) for v in a_vars))
    B = BitVec(tuple(Lit(v) for v in b_vars))
    Y = BitVec(tuple(Lit(v) for v in y_vars))
    S, side = bv_add(bv_zero_extend(A, 6), bv_zero_extend(B, 6), ctx)
    f = conj(*side, bv_eq(S, bv_zero_extend(Y, 6)))
    cnf = tseitin(f, ctx, z_ports=a_vars + b_vars, y_ports=y_vars)
    return LayerSpec(cnf)


def visual_algebra_spec() -> LayerSpec:
    """Ports a,b,c1,c2 (4 bits each); output x with a*x + b = 10*c1 + c2.

    Arithmetic runs at an internal width of 7, wide enough that no
    reachable value of either side can wrap (max 9*9 + 9 = 90 < 128), so
    the constraint is exact natural-number equality rather than a modular
    shadow of it.

    Each displayed symbol is a decimal digit and the equation has a and x
    positive, so the ports carry domain constraints: a, b, x in 1..9 and
    c1, c2 in 0..9. Without them the formula has a trivial model family —
    ground every digit image as 0 and any x satisfies 0*x + 0 = 0 — which
    is an absorbing state for training: once reached, every corrected
    output stays satisfiable and no unsat core ever pushes back.
    """
    ctx = Context()
    a_vars = ctx.vars(4)
    b_vars = ctx.vars(4)
    c1_vars = ctx.vars(4)
    c2_vars = ctx.vars(4)
    y_vars = ctx.vars(4)
    bv = lambda vs: BitVec(tuple(Lit(v) for v in vs))
    A, B, C1, C2, X = bv(a_vars), bv(b_vars), bv(c1_vars), bv(c2_vars), bv(y_vars)
    ax, s1 = bv_mul(A, X, ctx, 7)
    lhs, s2 = bv_add(ax, bv_zero_extend(B, 7), ctx)
    tens, s3 = bv_mul_const(C1, 10, ctx, width=7)
    rhs, s4 = bv_add(tens, bv_zero_extend(C2, 7), ctx)
    domain = [bv_le_const(v, 9) for v in (A, B, C1, C2, X)]
    domain += [bv_nonzero(v) for v in (A, B, X)]
    f = conj(*s1, *s2, *s3, *s4, bv_eq(lhs, rhs), *domain)
    cnf = tseitin(f, ctx, z_ports=a_vars + b_vars + c1_vars + c2_vars,
                  y_ports=y_vars)
    return LayerSpec(cnf)


AGENTS = ("Alice", "Bob", "Charlie")


def liars_puzzle_spec() -> LayerSpec:
    """Three sentences about three agents, exactly one of whom is guilty.

    Input ports, 7 per sentence: one-hot speaker (3), one-hot subject (3),
    and an accusation bit. Output: one-hot guilty agent. Every sentence is
    spoken by a different agent, and each sentence is truthful exactly when
    its speaker is innocent — for speaker a1 addressing a2 this is the odd
    parity of (not guilty(a1), accuses, guilty(a2)).
    """
    ctx = Context()
    spk = [ctx.vars(3) for _ in range(3)]  # spk[s][a]
    sub = [ctx.vars(3) for _ in range(3)]
    acc = ctx.vars(3)
    z_vars = [v for s in range(3) for v in (*spk[s], *sub[s], acc[s])]
    guilty = ctx.vars(3)
    parts = [exactly_k([Lit(g) for g in guilty], 1)]
    for s in range(3):
        parts.append(exactly_k([Lit(v) for v in spk[s]], 1))
        parts.append(exactly_k([Lit(v) for v in sub[s]], 1))
    for a in range(3):
        parts.append(exactly_k([Lit(spk[s][a]) for s in range(3)], 1))
    for s in range(3):
        for a1 in range(3):
            for a2 in range(3):
                honest = xor(xor(neg(atom(guilty[a1])), atom(acc[s])),
                             atom(guilty[a2]))
                parts.append(implies(conj(atom(spk[s][a1]), atom(sub[s][a2])),
                                     honest))
    cnf = tseitin(conj(*parts), ctx, z_ports=z_vars, y_ports=guilty)
    return LayerSpec(cnf)


# ---------------------------------------------------------------------------
# puzzle configurations and sentence rendering

@dataclass(frozen=True)
class PuzzleConfig:
    speakers: tuple  # speakers[s] = agent index speaking sentence s (a permutation)
    subjects: tuple  # subjects[s] = agent index sentence s is about
    accuses: tuple  # accuses[s] = 1 if sentence s asserts guilt
    guilty: int  # the unique consistent culprit


def _consistent_guilty(speakers, subjects, accuses) -> list:
    out = []
    for g in range(3):
        ok = all(((speakers[s] != g) ^ bool(accuses[s]) ^ (subjects[s] == g))
                 for s in range(3))
        if ok:
            out.append(g)
    return out


def enumerate_puzzle_configs() -> list:
    """All speaker/subject/accusation layouts with a unique consistent culprit."""
    out = []
    for speakers in itertools.permutations(range(3)):
        subject_choices = [[a for a in range(3) if a != speakers[s]]
                           for s in range(3)]
        for subjects in itertools.product(*subject_choices):
            for accuses in itertools.product((0, 1), repeat=3):
                sols = _consistent_guilty(speakers, subjects, accuses)
                if len(sols) == 1:
                    out.append(PuzzleConfig(speakers, subjects, accuses, sols[0]))
    return out


SPEAKER_FORMS = ("{} says", "{} says that", "{} said", "{} said that", "{} :")
UTTERANCE_FORMS = (
    ("{} did it", "{} did not do it"),
    ("{} is guilty", "{} is innocent"),
    ("{} is definitely guilty", "{} is definitely innocent"),
    ("{} definitely did it", "{} definitely did not do it"),
    ("{} is the criminal", "{} is a good person"),
)


def render_sentence(cfg: PuzzleConfig, s: int, spk_form: int, utt_form: int) -> str:
    head = SPEAKER_FORMS[spk_form].format(AGENTS[cfg.speakers[s]])
    body = UTTERANCE_FORMS[utt_form][0 if cfg.accuses[s] else 1]
    return f"{head} {body.format(AGENTS[cfg.subjects[s]])}"


def puzzle_vocab() -> list:
    """Every token that can appear after the speaker-name slot."""
    toks = set(AGENTS)
    for form in SPEAKER_FORMS:
        toks.update(form.format("").split())
    for pair in UTTERANCE_FORMS:
        for form in pair:
            toks.update(form.format("").split())
    return sorted(toks)


def featurize_sentence(sentence: str, vocab_index: dict) -> np.ndarray:
    """Speaker-name one-hot (first token) plus bag-of-words over the rest.

    A flat bag over the whole sentence would leave speaker and subject
    indistinguishable whenever both names occur; splitting the speaker slot
    off keeps the grounding learnable.
    """
    toks = sentence.split()
    out = np.zeros(3 + len(vocab_index), dtype=np.float32)
    out[AGENTS.index(toks[0])] = 1.0
    for t in toks[1:]:
        out[3 + vocab_index[t]] += 1.0
    return out


# ---------------------------------------------------------------------------
# datasets

@dataclass
class Dataset:
    task: str
    xs: np.ndarray  # model inputs, first axis = instance
    labels: np.ndarray  # (n, q) bool
    grounding: np.ndarray  # (n, p) bool, from the grounding oracle
    provenance: list  # per-instance generative record
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.xs)


@dataclass(frozen=True)
class GroundingSample:
    """Instance features paired with their true grounding bits."""
    xs: np.ndarray
    bits: np.ndarray


def grounding_sample(dataset: Dataset) -> GroundingSample:
    return GroundingSample(dataset.xs, dataset.grounding)


def mnist_add_grounding(prov) -> tuple:
    a, b = prov
    return value_bits(a, 5) + value_bits(b, 5)


def visual_algebra_grounding(prov) -> tuple:
    a, x, b = prov
    c = a * x + b
    return (value_bits(a, 4) + value_bits(b, 4)
            + value_bits(c // 10, 4) + value_bits(c % 10, 4))


def liars_puzzle_grounding(prov) -> tuple:
    cfg = prov[0] if isinstance(prov, tuple) and isinstance(prov[0], PuzzleConfig) else prov
    bits = []
    for s in range(3):
        bits += [cfg.speakers[s] == a for a in range(3)]
        bits += [cfg.subjects[s] == a for a in range(3)]
        bits.append(bool(cfg.accuses[s]))
    return tuple(bits)


def mnist_pair_universe(p_percent: int, seed: int) -> list:
    """The digit-pair types available to training at a coverage percentage."""
    if p_percent not in (10, 25, 50, 75, 100):
        raise ValueError(f"unsupported pair coverage {p_percent}")
    same = [(d, d) for d in range(10)]
    if p_percent == 10:
        return same
    want = p_percent
    rest = [(i, j) for i in range(10) for j in range(10) if i != j]
    rng = np.random.default_rng(seed ^ 0x5EED)
    rng.shuffle(rest)
    return same + rest[:want - 10]


def build_mnist_add(p_percent: int, n: int, seed: int, corpus=None,
                    n_test: int = 2000):
    """Train/test pair for digit-pair addition at the given pair coverage."""
    corpus = corpus or load_digit_corpus()
    rng = np.random.default_rng(seed)
    universe = mnist_pair_universe(p_percent, seed)
    all_pairs = [(i, j) for i in range(10) for j in range(10)]

    def build(count, pairs, images, labels, split):
        sampler = _DigitSampler(images, labels, rng)
        xs = np.empty((count, 2, 28, 28), dtype=np.float32)
        ys = np.empty((count, 5), dtype=bool)
        gs = np.empty((count, 10), dtype=bool)
        prov = []
        for i in range(count):
            a, b = pairs[rng.integers(len(pairs))]
            xs[i, 0] = sampler.take(a)
            xs[i, 1] = sampler.take(b)
            ys[i] = value_bits(a + b, 5)
            gs[i] = mnist_add_grounding((a, b))
            prov.append((int(a), int(b)))
        meta = {"split": split, "p_percent": p_percent, "seed": seed,
                "source": corpus.source,
                "with_replacement": sampler.replacement_used()}
        return Dataset("mnist-add", xs, ys, gs, prov, meta)

    train = build(n, universe, corpus.train_images, corpus.train_labels, "train")
    test = build(n_test, all_pairs, corpus.test_images, corpus.test_labels, "test")
    return train, test


def build_visual_algebra(n: int, seed: int, corpus=None, n_test: int = 2000):
    """a*x + b = c over digit images of (a, b, c1, c2); the label is x.

    Training draws a = b and odd x; test draws everything uniformly, so the
    model must generalize across both coefficient pairs and parities.
    """
    corpus = corpus or load_digit_corpus()
    rng = np.random.default_rng(seed)

    def build(count, biased, images, labels, split):
        sampler = _DigitSampler(images, labels, rng)
        xs = np.empty((count, 4, 28, 28), dtype=np.float32)
        ys = np.empty((count, 4), dtype=bool)
        gs = np.empty((count, 16), dtype=bool)
        prov = []
        for i in range(count):
            if biased:
                a = int(rng.integers(1, 10))
                b = a
                x = int(rng.choice([1, 3, 5, 7, 9]))
            else:
                a = int(rng.integers(1, 10))
                b = int(rng.integers(1, 10))
                x = int(rng.integers(1, 10))
            c = a * x + b
            for slot, d in enumerate((a, b, c // 10, c % 10)):
                xs[i, slot] = sampler.take(d)
            ys[i] = value_bits(x, 4)
            gs[i] = visual_algebra_grounding((a, x, b))
            prov.append((a, x, b))
        meta = {"split": split, "seed": seed, "source": corpus.source,
                "with_replacement": sampler.replacement_used()}
        return Dataset("visual-algebra", xs, ys, gs, prov, meta)

    train = build(n, True, corpus.train_images, corpus.train_labels, "train")
    test = build(n_test, False, corpus.test_images, corpus.test_labels, "test")
    return train, test


def build_liars_puzzle(seed: int, n: int = 3000, n_test: int = 3000):
    """Sentence-classification puzzle with train/test split by configuration.

    The consistent configurations are shuffled once and cut in half, so no
    speaker/subject/accusation layout seen in training ever appears in test.
    Training is further starved: each training configuration keeps a single
    fixed template rendering, while test instances draw renderings freely,
    so memorizing the training inputs cannot transfer.
    """
    configs = enumerate_puzzle_configs()
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(configs))
    half = len(configs) // 2
    train_cfgs = [configs[i] for i in order[:half]]
    test_cfgs = [configs[i] for i in order[half:]]
    train_forms = {cfg: tuple((int(rng.integers(5)), int(rng.integers(5)))
                              for _ in range(3))
                   for cfg in train_cfgs}
    vocab = puzzle_vocab()
    vindex = {t: i for i, t in enumerate(vocab)}
    width = 3 + len(vocab)

    def build(count, cfgs, split):
        xs = np.empty((count, 3, width), dtype=np.float32)
        ys = np.empty((count, 3), dtype=bool)
        gs = np.empty((count, 21), dtype=bool)
        prov = []
        for i in range(count):
            cfg = cfgs[rng.integers(len(cfgs))]
            if split == "train":
                forms = train_forms[cfg]
            else:
                forms = tuple((int(rng.integers(5)), int(rng.integers(5)))
                              for _ in range(3))
            for s, (sf, uf) in enumerate(forms):
                xs[i, s] = featurize_sentence(render_sentence(cfg, s, sf, uf),
                                              vindex)
            ys[i] = [cfg.guilty == a for a in range(3)]
            gs[i] = liars_puzzle_grounding(cfg)
            prov.append((cfg, forms))
        meta = {"split": split, "seed": seed, "vocab": vocab,
                "n_configs": len(cfgs)}
        return Dataset("liars-puzzle", xs, ys, gs, prov, meta)

    train = build(n, train_cfgs, "train")
    test = build(n_test, test_cfgs, "test")
    train.meta["train_configs"] = [tuple(map(tuple, (c.speakers, c.subjects,
                                                     c.accuses)))
                                   for c in train_cfgs]
    test.meta["train_configs"] = train.meta["train_configs"]
    return train, test


# ---------------------------------------------------------------------------
# encoders

class DigitModel:
    """One digit encoder shared across every image slot of an instance."""

    def __init__(self, slots: int, bits: int, variant: str,
                 rng: np.random.Generator):
        self.slots = slots
        self.bits = bits
        self.variant = variant
        if variant == "dense":
            self.layers = {"fc1": Dense(784, 256, rng),
                           "fc2": Dense(256, bits, rng)}
        elif variant == "conv":
            self.layers = {"conv1": Conv2d(1, 64, rng, stride=2),
                           "conv2": Conv2d(64, 64, rng),
                           "conv3": Conv2d(64, 128, rng),
                           "conv4": Conv2d(128, 128, rng),
                           "fc": Dense(128 * 7 * 7, bits, rng)}
        else:
            raise ValueError(f"unknown encoder variant {variant!r}")

    def _encode_one(self, x: np.ndarray) -> Tensor:
        if self.variant == "dense":
            t = Tensor(x.reshape(len(x), 784))
            return self.layers["fc2"](relu(self.layers["fc1"](t)))
        t = Tensor(x[:, None])  # (B, 1, 28, 28)
        for name in ("conv1", "conv2", "conv3", "conv4"):
            t = relu(self.layers[name](t))
        return self.layers["fc"](flatten(t))

    def __call__(self, x: np.ndarray) -> Tensor:
        return concat([self._encode_one(x[:, s]) for s in range(self.slots)],
                      axis=1)

    def named(self) -> dict:
        return {f"enc.{k}.{p}": t for k, l in self.layers.items()
                for p, t in (("w", l.w), ("b", l.b))}


class BowModel:
    """Shared per-sentence classifier over bag-of-words features."""

    def __init__(self, width: int, rng: np.random.Generator, bits: int = 7):
        self.layers = {"fc1": Dense(width, 128, rng),
                       "fc2": Dense(128, bits, rng)}

    def __call__(self, x: np.ndarray) -> Tensor:
        outs = []
        for s in range(x.shape[1]):
            t = Tensor(x[:, s])
            outs.append(self.layers["fc2"](relu(self.layers["fc1"](t))))
        return concat(outs, axis=1)

    def named(self) -> dict:
        return {f"enc.{k}.{p}": t for k, l in self.layers.items()
                for p, t in (("w", l.w), ("b", l.b))}


class DenseHead:
    """One-hidden-layer readout used for pre-training and the baseline."""

    def __init__(self, p: int, q: int, rng: np.random.Generator,
                 hidden: int = 512):
        self.layers = {"fc1": Dense(p, hidden, rng), "fc2": Dense(hidden, q, rng)}

    def __call__(self, z: Tensor) -> Tensor:
        return self.layers["fc2"](relu(self.layers["fc1"](z)))

    def named(self) -> dict:
        return {f"head.{k}.{p}": t for k, l in self.layers.items()
                for p, t in (("w", l.w), ("b", l.b))}


# ---------------------------------------------------------------------------
# task registry

@dataclass(frozen=True)
class TaskSpec:
    name: str
    phi_builder: object  # () -> LayerSpec
    grounding_oracle: object  # provenance -> tuple[bool, ...]
    encoder: str  # architecture descriptor
    split_policy: str
    slot_bits: int  # grounding bits per perceptual slot


TASKS = {
    "mnist-add": TaskSpec(
        name="mnist-add",
        phi_builder=mnist_add_spec,
        grounding_oracle=mnist_add_grounding,
        encoder="digit x2 -> 5 bits each",
        split_policy="train pairs restricted by coverage; test all pairs",
        slot_bits=5),
    "visual-algebra": TaskSpec(
        name="visual-algebra",
        phi_builder=visual_algebra_spec,
        grounding_oracle=visual_algebra_grounding,
        encoder="digit x4 -> 4 bits each",
        split_policy="train a=b and odd x; test uniform",
        slot_bits=4),
    "liars-puzzle": TaskSpec(
        name="liars-puzzle",
        phi_builder=liars_puzzle_spec,
        grounding_oracle=liars_puzzle_grounding,
        encoder="bag-of-words x3 sentences -> 7 bits each",
        split_policy="disjoint configuration halves",
        slot_bits=7),
}


def build_encoder(task: str, variant: str, rng: np.random.Generator):
    if task == "mnist-add":
        return DigitModel(2, 5, variant, rng)
    if task == "visual-algebra":
        return DigitModel(4, 4, variant, rng)
    if task == "liars-puzzle":
        return BowModel(3 + len(puzzle_vocab()), rng)
    raise ValueError(f"unknown task {task!r}")


def build_dataset(task: str, n: int, seed: int, *, p_percent: int = 100,
                  data_dir=None, cache_dir=None, n_test: int = 2000):
    """Dataset pair for a task, optionally cached as an .npz by content key."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; have {sorted(TASKS)}")
    if task == "liars-puzzle":
        maker = lambda: build_liars_puzzle(seed, n=n, n_test=n_test)
        key_bits = f"{task}|n={n}|ntest={n_test}|seed={seed}|v1"
    else:
        corpus = load_digit_corpus(data_dir)
        if task == "mnist-add":
            maker = lambda: build_mnist_add(p_percent, n, seed, corpus, n_test)
            key_bits = (f"{task}|p={p_percent}|n={n}|ntest={n_test}"
                        f"|seed={seed}|src={corpus.source}|v1")
        else:
            maker = lambda: build_visual_algebra(n, seed, corpus, n_test)
            key_bits = (f"{task}|n={n}|ntest={n_test}|seed={seed}"
                        f"|src={corpus.source}|v1")
    if not cache_dir:
        return maker()
    digest = hashlib.sha1(key_bits.encode()).hexdigest()[:12]
    path = os.path.join(cache_dir, f"{task}-{digest}.npz")
    if os.path.exists(path):
        return _load_cached(path)
    train, test = maker()
    os.makedirs(cache_dir, exist_ok=True)
    _save_cached(path, train, test)
    return train, test


def _plain(obj):
    if isinstance(obj, PuzzleConfig):
        return {"speakers": list(obj.speakers), "subjects": list(obj.subjects),
                "accuses": list(obj.accuses), "guilty": obj.guilty}
    if isinstance(obj, (list, tuple)):
        return [_plain(o) for o in obj]
    return obj


def _revive(obj):
    if isinstance(obj, dict) and "speakers" in obj:
        return PuzzleConfig(tuple(obj["speakers"]), tuple(obj["subjects"]),
                            tuple(obj["accuses"]), obj["guilty"])
    if isinstance(obj, list):
        return tuple(_revive(o) for o in obj)
    return obj


def _save_cached(path, train: Dataset, test: Dataset) -> None:
    payload = {}
    sidecar = {"task": train.task}
    for tag, ds in (("train", train), ("test", test)):
        payload[f"{tag}_xs"] = ds.xs
        payload[f"{tag}_labels"] = ds.labels
        payload[f"{tag}_grounding"] = ds.grounding
        sidecar[f"{tag}_provenance"] = _plain(ds.provenance)
        sidecar[f"{tag}_meta"] = {k: _plain(v) for k, v in ds.meta.items()}
    np.savez_compressed(path, **payload)
    with open(path + ".json", "w") as fh:
        json.dump(sidecar, fh)


def _load_cached(path):
    blob = np.load(path)
    with open(path + ".json") as fh:
        sidecar = json.load(fh)
    out = []
    for tag in ("train", "test"):
        prov = [_revive(p) for p in sidecar[f"{tag}_provenance"]]
        out.append(Dataset(sidecar["task"], blob[f"{tag}_xs"],
                           blob[f"{tag}_labels"], blob[f"{tag}_grounding"],
                           prov, sidecar[f"{tag}_meta"]))
    return tuple(out)
