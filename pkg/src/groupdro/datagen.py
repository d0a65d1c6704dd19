"""Synthetic grouped data with a spurious attribute, plus CSV I/O.

Each example has a label ``y`` and a binary attribute ``a`` that agrees with
the label's aligned value with probability ``p_align``. Its group is
``K * a + y``. Features are three Gaussian blocks: a core block whose mean
depends on ``y``, a spurious block whose mean depends on ``a``, and pure
noise.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from groupdro.core import GroupedDataset
from groupdro.errors import ConfigError, InvalidArgument, ParseError, SchemaError

MAX_RESAMPLES = 1000


@dataclass(frozen=True)
class SyntheticSpec:
    d_core: int
    mu_core: float
    sigma: float
    n_total: int
    p_align: float
    seed: int
    d_spu: int = 1
    mu_spu: float = 1.0
    d_noise: int = 0
    K: int = 2
    mu_core_by_group: tuple | None = None

    REQUIRED = ("d_core", "mu_core", "sigma", "n_total", "p_align", "seed")

    def __post_init__(self):
        if not 0.0 < self.p_align < 1.0:
            raise InvalidArgument(f"p_align must lie in the open interval (0, 1), got {self.p_align}")
        if self.d_core < 1 or self.d_spu < 0 or self.d_noise < 0:
            raise InvalidArgument("need d_core >= 1 and nonnegative d_spu, d_noise")
        if not self.sigma > 0:
            raise InvalidArgument("sigma must be positive")
        if self.K < 2:
            raise InvalidArgument("K must be >= 2")
        if self.K > 2 and self.d_core < self.K:
            raise InvalidArgument("multi-class core block needs d_core >= K")
        if self.n_total < 1:
            raise InvalidArgument("n_total must be positive")
        if self.mu_core_by_group is not None:
            object.__setattr__(self, "mu_core_by_group", tuple(float(v) for v in self.mu_core_by_group))
            if len(self.mu_core_by_group) != self.m:
                raise InvalidArgument(f"mu_core_by_group needs {self.m} entries")

    @property
    def m(self) -> int:
        return 2 * self.K

    @property
    def d(self) -> int:
        return self.d_core + self.d_spu + self.d_noise

    def to_dict(self) -> dict:
        out = asdict(self)
        if out["mu_core_by_group"] is None:
            del out["mu_core_by_group"]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        for name in cls.REQUIRED:
            if name not in data:
                raise ConfigError(f"dataset spec is missing required field {name!r}")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown dataset spec field(s): {sorted(unknown)}")
        return cls(**data)


def aligned_attribute(y, K: int):
    """Attribute value that co-occurs with label ``y`` in the majority groups."""
    return (np.asarray(y) == K - 1).astype(np.int64)


def core_means(spec: SyntheticSpec) -> np.ndarray:
    """Unit-magnitude core direction per class, shape ``(K, d_core)``."""
    if spec.K == 2:
        return np.stack([-np.ones(spec.d_core), np.ones(spec.d_core)])
    j = np.arange(spec.d_core)
    return np.stack([np.where(j % spec.K == y, 1.0, -1.0) for y in range(spec.K)])


def _draw_labels(spec, rng):
    for _ in range(MAX_RESAMPLES):
        y = rng.integers(spec.K, size=spec.n_total)
        flip = rng.random(spec.n_total) >= spec.p_align
        a = np.where(flip, 1 - aligned_attribute(y, spec.K), aligned_attribute(y, spec.K))
        g = spec.K * a + y
        if np.bincount(g, minlength=spec.m).min() > 0:
            return y, a, g
    raise InvalidArgument(f"could not populate all {spec.m} groups with n_total={spec.n_total}")


def generate(spec: SyntheticSpec, stream: int = 0) -> GroupedDataset:
    """Draw a dataset; ``stream`` selects an independent sample for the same seed."""
    if spec.n_total < spec.m:
        raise InvalidArgument(f"n_total={spec.n_total} is smaller than m={spec.m}")
    rng = np.random.default_rng([spec.seed, stream])
    y, a, g = _draw_labels(spec, rng)
    n = spec.n_total
    if spec.mu_core_by_group is None:
        mag = np.full(n, spec.mu_core)
    else:
        mag = np.asarray(spec.mu_core_by_group)[g]
    core = core_means(spec)[y] * mag[:, None] + spec.sigma * rng.standard_normal((n, spec.d_core))
    spu_sign = (2.0 * a - 1.0)[:, None]
    spu = spu_sign * spec.mu_spu + spec.sigma * rng.standard_normal((n, spec.d_spu))
    noise = spec.sigma * rng.standard_normal((n, spec.d_noise))
    X = np.hstack([core, spu, noise])
    return GroupedDataset(X, y, g, m=spec.m, K=spec.K)


def generate_splits(spec: SyntheticSpec, n_val: int, n_test: int, balanced_eval: bool = True):
    """Train set from ``spec``; val/test either group-balanced (``p_align=0.5``) or skewed like train."""
    p_eval = 0.5 if balanced_eval else spec.p_align
    train = generate(spec, stream=0)
    val = generate(replace(spec, n_total=n_val, p_align=p_eval), stream=1)
    test = generate(replace(spec, n_total=n_test, p_align=p_eval), stream=2)
    return train, val, test


def attribute_and_label(g, K: int = 2):
    """Invert ``g = K * a + y``."""
    g = np.asarray(g)
    return g // K, g % K


def write_csv(dataset: GroupedDataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["g", "y"] + [f"x{j}" for j in range(dataset.d)])
        for i in range(dataset.n):
            row = [int(dataset.g[i]), int(dataset.y[i])]
            row += [format(float(v), ".17g") for v in dataset.X[i]]
            writer.writerow(row)


def read_csv(path, m: int | None = None, K: int | None = None) -> GroupedDataset:
    """Parse ``g,y,x0,...`` rows. Declared ``m``/``K`` bound the ids."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty file: missing header") from None
        if len(header) < 3 or header[:2] != ["g", "y"]:
            raise SchemaError(f"header must start with g,y,x0; got {header[:3]}")
        d = len(header) - 2
        if header[2:] != [f"x{j}" for j in range(d)]:
            raise SchemaError("feature columns must be named x0..x{d-1} in order")
        gs, ys, rows = [], [], []
        for row in reader:
            line = reader.line_num
            if len(row) != d + 2:
                raise SchemaError(f"line {line}: expected {d + 2} columns, found {len(row)}")
            try:
                gv, yv = int(row[0]), int(row[1])
                xs = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise ParseError(line, str(exc)) from None
            if gv < 0 or yv < 0:
                raise ParseError(line, "g and y must be nonnegative")
            if m is not None and gv >= m:
                raise SchemaError(f"line {line}: group {gv} >= declared m={m}")
            if K is not None and yv >= K:
                raise SchemaError(f"line {line}: label {yv} >= declared K={K}")
            gs.append(gv)
            ys.append(yv)
            rows.append(xs)
    if not rows:
        raise InvalidArgument(f"{path}: no examples")
    return GroupedDataset(np.array(rows), ys, gs, m=m, K=K)
