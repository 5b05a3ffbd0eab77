"""Test systems, LTI simulation, output quantizers and dataset files.

The data model is the strictly causal FIR readout

    z_t = sum_{i=1}^{m} g_i u_{t-i} + e_t,      e_t ~ N(0, sigma2),
    y_t = Q[z_t],

with u_s = 0 for s < 0 and Q a static quantizer mapping each interval
(q_{k-1}, q_k] to a level s_k.
"""

import io
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import toeplitz
from scipy.signal import lfilter

__all__ = [
    "Dataset",
    "LtiSystem",
    "Quantizer",
    "binary_quantizer",
    "calibrate_noise",
    "ceil_quantizer",
    "impulse_response",
    "load_dataset",
    "quantize",
    "regression_matrix",
    "sample_random_system",
    "save_dataset",
    "simulate",
]

_DATASET_HEADER = "qsysid-dataset v1"


@dataclass(frozen=True)
class LtiSystem:
    """Discrete-time system given by zeros, poles and a scalar gain.

    The transfer function from u to z is q^{-1} * gain * B(q^{-1}) / A(q^{-1})
    with B, A the monic polynomials built from the zeros and poles; the
    leading q^{-1} makes the readout strictly causal (no direct feedthrough).
    """

    zeros: np.ndarray
    poles: np.ndarray
    gain: float

    @property
    def num(self) -> np.ndarray:
        return self.gain * np.real(np.poly(self.zeros))

    @property
    def den(self) -> np.ndarray:
        return np.real(np.poly(self.poles))


def sample_random_system(
    rng: np.random.Generator,
    n_zero_pairs: int = 10,
    n_pole_pairs: int = 10,
    zero_mag_max: float = 0.99,
    pole_mag_max: float = 0.92,
    l2gain_range: tuple[float, float] = (2.0, 4.0),
    m: int = 50,
) -> LtiSystem:
    """Draw a random stable system with conjugate zero and pole pairs.

    Magnitudes are uniform on [0, mag_max], phases uniform on [0, pi); each
    draw contributes a conjugate pair so the polynomials stay real.  The gain
    is set so the l2 norm of the first m impulse-response samples equals a
    uniform draw from l2gain_range.
    """

    def conjugate_pairs(n: int, mag_max: float) -> np.ndarray:
        if n == 0:
            return np.empty(0, dtype=complex)
        mags = rng.uniform(0.0, mag_max, size=n)
        phases = rng.uniform(0.0, np.pi, size=n)
        roots = mags * np.exp(1j * phases)
        return np.concatenate([roots, np.conj(roots)])

    zeros = conjugate_pairs(n_zero_pairs, zero_mag_max)
    poles = conjugate_pairs(n_pole_pairs, pole_mag_max)
    base = LtiSystem(zeros=zeros, poles=poles, gain=1.0)
    g_unit = impulse_response(base, m)
    target = rng.uniform(*l2gain_range)
    norm = float(np.linalg.norm(g_unit))
    return LtiSystem(zeros=zeros, poles=poles, gain=target / norm)


def impulse_response(sys: LtiSystem, m: int) -> np.ndarray:
    """First m impulse-response samples g_1, ..., g_m."""
    if m < 1:
        raise ValueError(f"m must be positive, got {m}")
    mags = np.abs(sys.poles)
    if mags.size and np.max(mags) >= 1.0:
        raise ValueError(f"system is unstable: max pole magnitude {np.max(mags)}")
    pulse = np.zeros(m)
    pulse[0] = 1.0
    return lfilter(sys.num, sys.den, pulse)


def simulate(
    g: np.ndarray, u: np.ndarray, sigma2: float, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Noisy linear response z = U g + e for the strictly causal readout."""
    g = np.asarray(g, dtype=float)
    u = np.asarray(u, dtype=float)
    if sigma2 < 0.0:
        raise ValueError(f"sigma2 must be nonnegative, got {sigma2}")
    n = u.size
    z = np.convolve(g, u)[:n]
    if sigma2 > 0.0:
        if rng is None:
            raise ValueError("rng is required when sigma2 > 0")
        z = z + rng.normal(0.0, np.sqrt(sigma2), size=n)
    return z


def regression_matrix(u: np.ndarray, N: int, m: int) -> np.ndarray:
    """N x m Toeplitz matrix with U[t, i] = u_{t-i} (1-based), zeros for t <= i."""
    u = np.asarray(u, dtype=float)
    if len(u) < N:
        raise ValueError(f"need at least N={N} input samples, got {len(u)}")
    first_row = np.zeros(m)
    first_row[0] = u[0]
    return toeplitz(u[:N], first_row)


def calibrate_noise(g: np.ndarray, u: np.ndarray, snr: float = 10.0) -> float:
    """Noise variance var(U g) / snr, using the population variance of U g."""
    if snr <= 0.0:
        raise ValueError(f"snr must be positive, got {snr}")
    z = simulate(g, u, 0.0)
    var = float(np.var(z))
    if var == 0.0:
        raise ValueError("noiseless output is constant; snr is undefined")
    return var / snr


@dataclass(frozen=True)
class Quantizer:
    """Static quantizer with thresholds q_0 < ... < q_Q and levels s_1..s_Q.

    ``closed`` fixes which side of each cell is closed: "right" means
    (q_{k-1}, q_k], "left" means [q_{k-1}, q_k).  The outermost thresholds
    must be -inf and +inf so the cells cover the real line.
    """

    thresholds: np.ndarray
    levels: np.ndarray
    closed: str = "right"
    kind: str = "custom"

    def __post_init__(self):
        thr = np.asarray(self.thresholds, dtype=float)
        lev = np.asarray(self.levels, dtype=float)
        object.__setattr__(self, "thresholds", thr)
        object.__setattr__(self, "levels", lev)
        if thr.ndim != 1 or lev.ndim != 1 or thr.size != lev.size + 1:
            raise ValueError("need Q+1 thresholds for Q levels")
        if lev.size < 1:
            raise ValueError("quantizer needs at least one level")
        if not np.all(np.diff(thr) > 0):
            raise ValueError("thresholds must be strictly increasing")
        if not (np.isneginf(thr[0]) and np.isposinf(thr[-1])):
            raise ValueError("outer thresholds must be -inf and +inf")
        if np.unique(lev).size != lev.size:
            raise ValueError("levels must be distinct")
        if self.closed not in ("right", "left"):
            raise ValueError(f"closed must be 'right' or 'left', got {self.closed!r}")

    def level_index(self, y_value: float) -> int:
        hit = np.nonzero(self.levels == y_value)[0]
        if hit.size == 0:
            raise ValueError(f"{y_value} is not a level of this quantizer")
        return int(hit[0])

    def interval(self, y_value: float) -> tuple[float, float]:
        """Cell (lower, upper) that the given level value encodes."""
        k = self.level_index(y_value)
        return float(self.thresholds[k]), float(self.thresholds[k + 1])

    def intervals_for(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized cell bounds for a sequence of observed levels."""
        y = np.asarray(y, dtype=float)
        order = np.argsort(self.levels)
        sorted_levels = self.levels[order]
        pos = np.minimum(np.searchsorted(sorted_levels, y), sorted_levels.size - 1)
        ok = sorted_levels[pos] == y
        if not ok.all():
            raise ValueError(
                f"values {np.unique(y[~ok])} are not levels of this quantizer"
            )
        idx = order[pos]
        return self.thresholds[idx], self.thresholds[idx + 1]


def quantize(q: Quantizer, z: np.ndarray) -> np.ndarray:
    """Map each z to its level; the cell convention follows q.closed."""
    z = np.asarray(z, dtype=float)
    inner = q.thresholds[1:-1]
    side = "left" if q.closed == "right" else "right"
    idx = np.searchsorted(inner, z, side=side)
    return q.levels[idx]


def binary_quantizer(threshold: float) -> Quantizer:
    """Two-level quantizer: -1 for z < threshold, +1 for z >= threshold."""
    if threshold == 0.0:
        warnings.warn(
            "a zero threshold leaves the response scale unidentifiable",
            stacklevel=2,
        )
    return Quantizer(
        thresholds=np.array([-np.inf, threshold, np.inf]),
        levels=np.array([-1.0, 1.0]),
        closed="left",
        kind="binary",
    )


def ceil_quantizer(range_min: int, range_max: int) -> Quantizer:
    """Integer-rounding quantizer covering levels range_min..range_max.

    Interior cells are (k-1, k] -> k; the two end cells are unbounded so the
    quantizer is total on the real line.
    """
    if range_max < range_min:
        raise ValueError("range_max must be >= range_min")
    thresholds = np.concatenate(
        [[-np.inf], np.arange(range_min, range_max, dtype=float), [np.inf]]
    )
    levels = np.arange(range_min, range_max + 1, dtype=float)
    return Quantizer(thresholds=thresholds, levels=levels, closed="right", kind="ceil")


@dataclass(frozen=True)
class Dataset:
    """One identification experiment: input, quantized output and ground truth.

    quantizer None means the output was observed without quantization (y is
    z itself).  z_latent, sigma2_true, g_true and seed are optional; they are
    present for simulated data and absent for field data.  Arrays are frozen
    so estimators cannot mutate a shared dataset.
    """

    u: np.ndarray
    y: np.ndarray
    quantizer: Quantizer | None
    sigma2_true: float | None = None
    z_latent: np.ndarray | None = None
    g_true: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        y = np.asarray(self.y, dtype=float)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "y", y)
        if u.shape != y.shape or u.ndim != 1:
            raise ValueError("u and y must be 1-d arrays of equal length")
        if self.quantizer is not None and not np.isin(y, self.quantizer.levels).all():
            raise ValueError("every y_t must be a level of the quantizer")
        if self.z_latent is not None:
            z = np.asarray(self.z_latent, dtype=float)
            object.__setattr__(self, "z_latent", z)
            if z.shape != y.shape:
                raise ValueError("z_latent must match y in length")
            if self.quantizer is not None and not np.array_equal(
                quantize(self.quantizer, z), y
            ):
                raise ValueError("y must equal the quantized z_latent")
        if self.g_true is not None:
            object.__setattr__(self, "g_true", np.asarray(self.g_true, dtype=float))
        for arr in (self.u, self.y, self.z_latent, self.g_true):
            if arr is not None:
                arr.flags.writeable = False

    @property
    def n(self) -> int:
        return self.u.size


def _fmt(x: float) -> str:
    return repr(float(x))


def _fmt_vec(v: np.ndarray) -> str:
    return " ".join(_fmt(x) for x in v)


def save_dataset(ds: Dataset, path) -> None:
    """Write a dataset as a self-describing text file (see load_dataset)."""
    buf = io.StringIO()
    buf.write(f"# {_DATASET_HEADER}\n")
    buf.write(f"n: {ds.n}\n")
    buf.write(f"seed: {'none' if ds.seed is None else ds.seed}\n")
    buf.write(
        f"sigma2_true: {'none' if ds.sigma2_true is None else _fmt(ds.sigma2_true)}\n"
    )
    if ds.quantizer is None:
        buf.write("quantizer_kind: none\n")
    else:
        buf.write(f"quantizer_kind: {ds.quantizer.kind}\n")
        buf.write(f"quantizer_closed: {ds.quantizer.closed}\n")
        buf.write(f"quantizer_thresholds: {_fmt_vec(ds.quantizer.thresholds)}\n")
        buf.write(f"quantizer_levels: {_fmt_vec(ds.quantizer.levels)}\n")
    if ds.g_true is not None:
        buf.write(f"g_true: {_fmt_vec(ds.g_true)}\n")
    cols = ["u", "y"] + (["z"] if ds.z_latent is not None else [])
    buf.write(f"columns: {' '.join(cols)}\n")
    stack = [ds.u, ds.y] + ([ds.z_latent] if ds.z_latent is not None else [])
    for row in zip(*stack):
        buf.write(" ".join(_fmt(x) for x in row) + "\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def load_dataset(path) -> Dataset:
    """Read a dataset file written by save_dataset.

    The format is a flat key/value header followed by a whitespace-separated
    numeric block whose columns are named by the ``columns`` key.
    """
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != f"# {_DATASET_HEADER}":
        raise ValueError(f"{path} is not a {_DATASET_HEADER} file")
    header: dict[str, str] = {}
    body_start = None
    for i, line in enumerate(lines[1:], start=1):
        if ":" not in line:
            raise ValueError(f"malformed header line: {line!r}")
        key, _, value = line.partition(":")
        header[key.strip()] = value.strip()
        if key.strip() == "columns":
            body_start = i + 1
            break
    if body_start is None:
        raise ValueError("header is missing the 'columns' key")

    def opt_float(key: str) -> float | None:
        return None if header[key] == "none" else float(header[key])

    cols = header["columns"].split()
    rows = [list(map(float, line.split())) for line in lines[body_start:] if line.strip()]
    data = np.asarray(rows, dtype=float).reshape(len(rows), len(cols))
    n = int(header["n"])
    if data.shape[0] != n:
        raise ValueError(f"expected {n} rows, found {data.shape[0]}")
    by_name = {name: data[:, j] for j, name in enumerate(cols)}
    if header["quantizer_kind"] == "none":
        quantizer = None
    else:
        quantizer = Quantizer(
            thresholds=np.array(
                [float(x) for x in header["quantizer_thresholds"].split()]
            ),
            levels=np.array([float(x) for x in header["quantizer_levels"].split()]),
            closed=header["quantizer_closed"],
            kind=header["quantizer_kind"],
        )
    g_true = None
    if "g_true" in header:
        g_true = np.array([float(x) for x in header["g_true"].split()])
    seed = None if header["seed"] == "none" else int(header["seed"])
    return Dataset(
        u=by_name["u"],
        y=by_name["y"],
        quantizer=quantizer,
        sigma2_true=opt_float("sigma2_true"),
        z_latent=by_name.get("z"),
        g_true=g_true,
        seed=seed,
    )
