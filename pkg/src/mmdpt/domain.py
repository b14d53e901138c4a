"""Problem data: instances, delivery distributions, frame schedules and traces."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PMF_TOL = 1e-12

# Probability of delivering (1, 2, 3, 4) packets, users 1/21/41/61/81 x APs 1..4.
ANCHOR_USERS = (1, 21, 41, 61, 81)
ANCHOR_TAILS = np.array(
    [
        [[0.09, 0.07, 0.03, 0.01], [0.095, 0.075, 0.025, 0.005],
         [0.08, 0.06, 0.04, 0.02], [0.085, 0.065, 0.045, 0.025]],
        [[0.08, 0.07, 0.06, 0.05], [0.085, 0.075, 0.065, 0.055],
         [0.07, 0.06, 0.05, 0.04], [0.075, 0.065, 0.055, 0.045]],
        [[0.07, 0.06, 0.05, 0.04], [0.075, 0.065, 0.055, 0.045],
         [0.06, 0.05, 0.04, 0.03], [0.065, 0.055, 0.045, 0.035]],
        [[0.06, 0.05, 0.04, 0.03], [0.065, 0.055, 0.045, 0.035],
         [0.05, 0.04, 0.03, 0.02], [0.055, 0.045, 0.035, 0.025]],
        [[0.05, 0.04, 0.03, 0.02], [0.055, 0.045, 0.035, 0.025],
         [0.04, 0.03, 0.02, 0.01], [0.045, 0.035, 0.025, 0.015]],
    ]
)


class InstanceError(ValueError):
    """Raised when instance data violates a structural invariant."""


def _with_zero_mass(tail: np.ndarray) -> np.ndarray:
    """Prepend P(D=0) = 1 - sum(tail) along the last axis."""
    zero = 1.0 - tail.sum(axis=-1, keepdims=True)
    return np.concatenate([zero, tail], axis=-1)


def anchor_pmfs() -> dict[int, np.ndarray]:
    """Anchor user -> (N=4, d_max+1) pmf grid for the synthetic frame-1 channel."""
    return {u: _with_zero_mass(ANCHOR_TAILS[i]) for i, u in enumerate(ANCHOR_USERS)}


def check_pmf(pmf, what: str = "pmf") -> np.ndarray:
    pmf = np.asarray(pmf, dtype=float)
    if pmf.ndim < 1 or pmf.shape[-1] < 1:
        raise InstanceError(f"{what}: empty distribution")
    if not np.all(np.isfinite(pmf)) or np.any(pmf < 0):
        raise InstanceError(f"{what}: entries must be finite and nonnegative")
    err = np.abs(pmf.sum(axis=-1) - 1.0)
    if np.any(err > PMF_TOL):
        raise InstanceError(f"{what}: not on the simplex (max |sum - 1| = {err.max():.3g})")
    return pmf


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class FrameSchedule:
    """Per-frame delivery distributions, ``pmfs[f, m, n, d]``."""

    pmfs: np.ndarray
    slots_per_frame: int = 10_000

    def __post_init__(self):
        object.__setattr__(self, "pmfs", _frozen(self.pmfs))
        if self.pmfs.ndim != 4:
            raise InstanceError("frame grid must have shape (frames, M, N, d_max+1)")
        if self.pmfs.shape[0] < 1:
            raise InstanceError("schedule needs at least one frame")
        if self.slots_per_frame < 1:
            raise InstanceError("slots_per_frame must be >= 1")
        check_pmf(self.pmfs, "frame schedule")

    @property
    def n_frames(self) -> int:
        return self.pmfs.shape[0]

    def frame_at(self, t: int) -> int:
        """Frame index for 1-based slot ``t``, clamped to the last frame."""
        return min((t - 1) // self.slots_per_frame, self.n_frames - 1)

    def single(self, frame: int = 0) -> "FrameSchedule":
        return FrameSchedule(self.pmfs[frame : frame + 1], self.slots_per_frame)


@dataclass(frozen=True)
class InstanceConfig:
    M: int
    N: int
    B: int
    S_max: int
    d_max: int
    p: np.ndarray
    frames: FrameSchedule
    mandatory: bool = True

    def __post_init__(self):
        object.__setattr__(self, "p", _frozen(self.p))

    def pmfs(self, frame: int = 0) -> np.ndarray:
        return self.frames.pmfs[frame]

    def with_frame(self, frame: int) -> "InstanceConfig":
        return InstanceConfig(self.M, self.N, self.B, self.S_max, self.d_max, self.p,
                              self.frames.single(frame), self.mandatory)


def validate_instance(cfg: InstanceConfig) -> InstanceConfig:
    """Return ``cfg`` unchanged if every structural invariant holds."""
    if cfg.M < 1 or cfg.N < 1:
        raise InstanceError("M and N must be >= 1")
    if not 1 <= cfg.B <= cfg.M:
        raise InstanceError(f"budget B={cfg.B} must lie in [1, M={cfg.M}]")
    if cfg.S_max < 1 or cfg.d_max < 1:
        raise InstanceError("S_max and d_max must be >= 1")
    if cfg.p.shape != (cfg.M,):
        raise InstanceError(f"arrival vector has shape {cfg.p.shape}, expected ({cfg.M},)")
    if np.any(cfg.p < 0) or np.any(cfg.p > 1) or not np.all(np.isfinite(cfg.p)):
        raise InstanceError("arrival probabilities must lie in [0, 1]")
    shape = cfg.frames.pmfs.shape
    if shape[1:] != (cfg.M, cfg.N, cfg.d_max + 1):
        raise InstanceError(
            f"frame grid shape {shape[1:]} does not match (M, N, d_max+1) = "
            f"{(cfg.M, cfg.N, cfg.d_max + 1)}"
        )
    check_pmf(cfg.frames.pmfs)
    if cfg.mandatory and cfg.p.sum() > cfg.N * cfg.B + 1e-12:
        raise InstanceError(
            f"mandatory routing infeasible: sum(p) = {cfg.p.sum():.6g} > N*B = {cfg.N * cfg.B}"
        )
    return cfg


def pmf_from_throughput_samples(samples, Q: float, d_max: int) -> np.ndarray:
    """Empirical delivery pmf: a sample C lands in bin d when d*Q <= C < (d+1)*Q.

    Samples at or above ``d_max * Q`` all count towards ``d_max``.
    """
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size == 0:
        raise InstanceError("no throughput samples")
    if not Q > 0:
        raise InstanceError("packet size Q must be positive")
    if d_max < 1:
        raise InstanceError("d_max must be >= 1")
    d = np.clip(np.floor(samples / Q), 0, d_max).astype(np.int64)
    return np.bincount(d, minlength=d_max + 1) / samples.size


def interpolate_user_distributions(anchors: dict[int, np.ndarray], M: int) -> np.ndarray:
    """Expand anchor users (1-indexed) into an (M, N, d_max+1) grid.

    Entries for d >= 1 are interpolated linearly between consecutive anchors.
    Past the last anchor the final segment's per-user step is continued and
    clipped at zero. P(D=0) is always the residual mass.
    """
    users = sorted(anchors)
    if not users or users[0] != 1:
        raise InstanceError("anchors must start at user 1")
    if any(b <= a for a, b in zip(users, users[1:])):
        raise InstanceError("anchor indices must be strictly increasing")
    tails = np.stack([check_pmf(anchors[u])[..., 1:] for u in users])
    xs = np.asarray(users, dtype=float)
    out = np.empty((M,) + tails.shape[1:])
    for i, u in enumerate(range(1, M + 1)):
        if u in anchors:
            out[i] = tails[users.index(u)]
            continue
        if u < xs[-1]:
            j = np.searchsorted(xs, u) - 1
            w = (u - xs[j]) / (xs[j + 1] - xs[j])
            out[i] = (1 - w) * tails[j] + w * tails[j + 1]
        elif len(users) == 1:
            out[i] = tails[-1]
        else:
            step = (tails[-1] - tails[-2]) / (xs[-1] - xs[-2])
            out[i] = np.maximum(tails[-1] + (u - xs[-1]) * step, 0.0)
    if np.any(out.sum(axis=-1) > 1 + PMF_TOL):
        raise InstanceError("interpolated delivery mass for d >= 1 exceeds 1")
    grid = _with_zero_mass(out)
    for u in users:
        if u <= M:
            grid[u - 1] = anchors[u]
    return grid


def sample_arrival_probabilities(M: int, mean: float, rng: np.random.Generator) -> np.ndarray:
    """Heterogeneous arrival probabilities with arithmetic mean exactly ``mean``.

    Raw values are Poisson(1000) counts scaled by 1/2000, then rescaled.
    """
    if not 0 < mean < 1:
        raise InstanceError("mean arrival probability must lie in (0, 1)")
    raw = rng.poisson(1000, size=M).astype(float) + 1.0
    p = raw * (mean / raw.mean())
    # rescaling keeps everything well inside (0, 1] for Poisson(1000) draws
    if np.any(p > 1):
        raise InstanceError("rescaled arrival probability exceeds 1")
    return p


def synthetic_users(M: int, total: int = 100) -> np.ndarray:
    """1-indexed user ids of the 100-user synthetic population kept in an M-user reduction."""
    if M > total:
        raise InstanceError(f"synthetic population has only {total} users")
    return np.unique(np.round(np.linspace(1, total, M)).astype(int))


def synthetic_frames(M: int, N: int, n_frames: int, rng: np.random.Generator,
                     slots_per_frame: int = 10_000, total_users: int = 100,
                     jitter: float = 0.3) -> FrameSchedule:
    """Frame 0 interpolates the anchor-user channel table; later frames rescale each pair's
    delivery tail by a random factor in [1 - jitter, 1 + jitter]."""
    if N > ANCHOR_TAILS.shape[1]:
        raise InstanceError("synthetic channel is defined for at most 4 APs")
    full = interpolate_user_distributions(anchor_pmfs(), total_users)
    base = full[synthetic_users(M, total_users) - 1][:, :N]
    if base.shape[0] != M:
        raise InstanceError("could not pick M distinct synthetic users")
    frames = [base]
    for _ in range(1, n_frames):
        scale = rng.uniform(1 - jitter, 1 + jitter, size=(M, N, 1))
        tail = np.minimum(base[..., 1:] * scale, 1.0)
        tail *= np.minimum(1.0, 1.0 / tail.sum(axis=-1, keepdims=True))
        frames.append(_with_zero_mass(tail))
    return FrameSchedule(np.stack(frames), slots_per_frame)


def synthetic_instance(M: int = 100, N: int = 4, B: int = 20, S_max: int = 15,
                       seed: int = 0, n_frames: int = 1, arrival_mean: float = 0.5,
                       slots_per_frame: int = 10_000) -> InstanceConfig:
    rng = np.random.default_rng(seed)
    p = sample_arrival_probabilities(M, arrival_mean, rng)
    frames = synthetic_frames(M, N, n_frames, rng, slots_per_frame)
    return validate_instance(InstanceConfig(M, N, B, S_max, ANCHOR_TAILS.shape[2], p, frames))


# -- trace files --------------------------------------------------------------

def write_trace(schedule: FrameSchedule, path) -> None:
    F, M, N, D = schedule.pmfs.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "user", "ap"] + [f"p{d}" for d in range(D)])
        for f in range(F):
            for m in range(M):
                for n in range(N):
                    w.writerow([f, m + 1, n + 1] + [repr(float(x)) for x in schedule.pmfs[f, m, n]])


def load_trace(path, slots_per_frame: int = 10_000) -> FrameSchedule:
    """Read ``frame,user,ap,p0,...`` rows (frame 0-indexed, user/AP 1-indexed)."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InstanceError(f"{path}: empty trace file") from None
        header = [h.strip() for h in header]
        if header[:3] != ["frame", "user", "ap"] or len(header) < 5:
            raise InstanceError(f"{path}: bad header {header!r}")
        D = len(header) - 3
        rows = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != D + 3:
                raise InstanceError(f"{path}:{lineno}: expected {D + 3} fields, got {len(row)}")
            try:
                f, m, n = (int(c) for c in row[:3])
                vals = [float(c) for c in row[3:]]
            except ValueError as exc:
                raise InstanceError(f"{path}:{lineno}: {exc}") from None
            if f < 0 or m < 1 or n < 1:
                raise InstanceError(f"{path}:{lineno}: indices out of range")
            if (f, m, n) in rows:
                raise InstanceError(f"{path}:{lineno}: duplicate row for {(f, m, n)}")
            rows[(f, m, n)] = vals
    if not rows:
        raise InstanceError(f"{path}: no data rows")
    F = max(k[0] for k in rows) + 1
    M = max(k[1] for k in rows)
    N = max(k[2] for k in rows)
    if len(rows) != F * M * N:
        raise InstanceError(f"{path}: ragged trace ({len(rows)} rows for {F}x{M}x{N} grid)")
    pmfs = np.empty((F, M, N, D))
    for (f, m, n), vals in rows.items():
        pmfs[f, m - 1, n - 1] = vals
    return FrameSchedule(pmfs, slots_per_frame)


# -- instance config files ------------------------------------------------------

@dataclass
class RunConfig:
    """Parsed instance config file (YAML / JSON key-value text)."""

    M: int = 100
    N: int = 4
    B: int = 20
    S_max: int = 15
    d_max: int = 4
    arrival_mean: float = 0.5
    p: list | None = None
    trace: str | None = None
    synthetic: bool = True
    seed: int = 0
    n_frames: int = 1
    slots_per_frame: int = 10_000
    extra: dict = field(default_factory=dict)

    def instance(self, mandatory: bool = True) -> InstanceConfig:
        rng = np.random.default_rng(self.seed)
        if self.p is not None:
            p = np.asarray(self.p, dtype=float)
        else:
            p = sample_arrival_probabilities(self.M, self.arrival_mean, rng)
        if self.trace and not self.synthetic:
            frames = load_trace(self.trace, self.slots_per_frame)
        else:
            frames = synthetic_frames(self.M, self.N, self.n_frames, rng, self.slots_per_frame)
        return validate_instance(
            InstanceConfig(self.M, self.N, self.B, self.S_max, self.d_max, p, frames, mandatory)
        )


def load_config(path) -> RunConfig:
    import yaml

    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise InstanceError(f"{path}: config must be a key-value mapping")
    known = {f for f in RunConfig.__dataclass_fields__ if f != "extra"}
    kwargs = {k: v for k, v in data.items() if k in known}
    extra = {k: v for k, v in data.items() if k not in known}
    if "trace" in kwargs and "synthetic" not in kwargs:
        kwargs["synthetic"] = False
    if kwargs.get("trace") and not Path(kwargs["trace"]).is_absolute():
        kwargs["trace"] = str(Path(path).parent / kwargs["trace"])
    return RunConfig(**kwargs, extra=extra)
