"""Degradation operators and their pseudoinverse appliers.

Each operator is a linear map from a clean H x W plane to an observation,
paired with a pseudoinverse applier that pulls observations back to the
clean domain:

  identity    -> pinv is the identity
  blur        -> circular convolution; pinv is the frequency-domain Wiener
                 applier conj(H) / (|H|^2 + gamma)
  downsample  -> s x s block mean; pinv replicates each low-res pixel into
                 its block (the exact Moore-Penrose inverse of block mean)
  composite   -> children applied left to right; pinvs applied in reverse

Every operator also exposes its transpose and the transpose of its pinv
applier, which the conjugate-gradient projection and the training gradients
need. Dense materialization and an SVD-based ground-truth pseudoinverse are
provided as test oracles, capped at small pixel counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .image import as_plane

MATERIALIZE_CAP = 4096


class ConvergenceError(RuntimeError):
    """A numerical routine failed to converge within its iteration cap."""


class OpSpecError(ValueError):
    """Operator spec string failed to parse; carries the bad position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


def gaussian_kernel(size: int = 5, sigma: float = 1.0) -> np.ndarray:
    """Odd-sized 2-D Gaussian stencil renormalized to sum 1."""
    if size % 2 == 0 or size < 1:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    if sigma <= 0:
        raise ValueError(f"kernel sigma must be positive, got {sigma}")
    half = size // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-coords ** 2 / (2.0 * sigma ** 2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def embed_kernel(kernel: np.ndarray, dims: tuple[int, int]) -> np.ndarray:
    """Center-anchored circular embedding of a stencil into a dims-sized array.

    The center tap lands at index (0, 0) and the rest wraps; taps that alias
    onto the same cell (kernel larger than the image) accumulate.
    """
    h, w = dims
    k = kernel.shape[0]
    c = k // 2
    out = np.zeros((h, w))
    rows = (np.arange(k) - c) % h
    cols = (np.arange(k) - c) % w
    np.add.at(out, (rows[:, None].repeat(k, axis=1), cols[None, :].repeat(k, axis=0)), kernel)
    return out


def block_mean(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape
    return img.reshape(h // scale, scale, w // scale, scale).mean(axis=(1, 3))


def block_sum(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape
    return img.reshape(h // scale, scale, w // scale, scale).sum(axis=(1, 3))


def replicate(img: np.ndarray, scale: int) -> np.ndarray:
    return np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)


class LinearDegradation:
    """Base class: a forward operator with a paired pseudoinverse applier."""

    kind = "abstract"
    in_dims: tuple[int, int]
    out_dims: tuple[int, int]

    def apply(self, img: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def apply_pinv(self, obs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def apply_transpose(self, obs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def apply_pinv_transpose(self, img: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def row_norm_sq(self) -> float:
        """Scalar estimate of diag(A A^T); used only to precondition CG."""
        raise NotImplementedError

    def _check(self, img: np.ndarray, dims: tuple[int, int], what: str) -> np.ndarray:
        img = as_plane(img, check_finite=False)
        if img.shape != dims:
            raise ValueError(f"{self.kind} {what} expects {dims}, got {img.shape}")
        return img


class Identity(LinearDegradation):
    kind = "identity"

    def __init__(self, dims: tuple[int, int]):
        self.in_dims = tuple(dims)
        self.out_dims = tuple(dims)

    def apply(self, img):
        return self._check(img, self.in_dims, "input").copy()

    def apply_pinv(self, obs):
        return self._check(obs, self.out_dims, "observation").copy()

    apply_transpose = apply_pinv
    apply_pinv_transpose = apply

    def row_norm_sq(self):
        return 1.0


class Blur(LinearDegradation):
    """Circular 2-D convolution with an odd stencil of unit DC gain."""

    kind = "blur"

    def __init__(self, dims: tuple[int, int], kernel: np.ndarray,
                 wiener_gamma: float = 1e-3):
        kernel = np.asarray(kernel, dtype=np.float64)
        if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] % 2 == 0:
            raise ValueError(f"blur kernel must be square with odd side, got {kernel.shape}")
        if abs(kernel.sum() - 1.0) > 1e-8:
            raise ValueError(f"blur kernel must sum to 1, got {kernel.sum():.6g}")
        if wiener_gamma < 0:
            raise ValueError("wiener_gamma must be non-negative")
        self.in_dims = tuple(dims)
        self.out_dims = tuple(dims)
        self.kernel = kernel
        self.wiener_gamma = float(wiener_gamma)
        impulse = embed_kernel(kernel, self.in_dims)
        self._impulse_energy = float(np.sum(impulse ** 2))
        self._freq = np.fft.fft2(impulse)
        denom = np.abs(self._freq) ** 2 + self.wiener_gamma
        self._wiener = np.conj(self._freq) / denom

    def apply_stencil(self, img: np.ndarray, sign: int = 1) -> np.ndarray:
        """Direct tap-by-tap circular path; sign=-1 applies the transpose.

        Independent of the FFT route; kept as the dual-route oracle for it.
        """
        img = self._check(img, self.in_dims, "input")
        k = self.kernel.shape[0]
        c = k // 2
        out = np.zeros_like(img)
        for a in range(k):
            for b in range(k):
                out += self.kernel[a, b] * np.roll(img, (sign * (a - c), sign * (b - c)),
                                                   axis=(0, 1))
        return out

    def apply(self, img):
        img = self._check(img, self.in_dims, "input")
        return np.real(np.fft.ifft2(np.fft.fft2(img) * self._freq))

    def apply_transpose(self, obs):
        obs = self._check(obs, self.out_dims, "observation")
        return np.real(np.fft.ifft2(np.fft.fft2(obs) * np.conj(self._freq)))

    def apply_pinv(self, obs):
        obs = self._check(obs, self.out_dims, "observation")
        return np.real(np.fft.ifft2(np.fft.fft2(obs) * self._wiener))

    def apply_pinv_transpose(self, img):
        img = self._check(img, self.in_dims, "input")
        return np.real(np.fft.ifft2(np.fft.fft2(img) * np.conj(self._wiener)))

    def min_frequency_gain(self) -> float:
        return float(np.min(np.abs(self._freq)))

    def row_norm_sq(self):
        return self._impulse_energy


class Downsample(LinearDegradation):
    """s x s block mean; the exact pseudoinverse is patch replication."""

    kind = "downsample"

    def __init__(self, dims: tuple[int, int], scale: int):
        scale = int(scale)
        if scale < 1:
            raise ValueError(f"downsample scale must be >= 1, got {scale}")
        h, w = dims
        if h % scale or w % scale:
            raise ValueError(f"scale {scale} must divide dims {dims} exactly")
        self.in_dims = (h, w)
        self.out_dims = (h // scale, w // scale)
        self.scale = scale

    def apply(self, img):
        return block_mean(self._check(img, self.in_dims, "input"), self.scale)

    def apply_pinv(self, obs):
        return replicate(self._check(obs, self.out_dims, "observation"), self.scale)

    def apply_transpose(self, obs):
        obs = self._check(obs, self.out_dims, "observation")
        return replicate(obs, self.scale) / float(self.scale ** 2)

    def apply_pinv_transpose(self, img):
        return block_sum(self._check(img, self.in_dims, "input"), self.scale)

    def row_norm_sq(self):
        return 1.0 / self.scale ** 2


class Composite(LinearDegradation):
    """Ordered chain of operators, applied left to right."""

    kind = "composite"

    def __init__(self, children: list[LinearDegradation]):
        if not children:
            raise ValueError("composite needs at least one child")
        for left, right in zip(children, children[1:]):
            if left.out_dims != right.in_dims:
                raise ValueError(
                    f"composite children dimension mismatch: {left.kind} outputs "
                    f"{left.out_dims} but {right.kind} expects {right.in_dims}")
        self.children = list(children)
        self.in_dims = children[0].in_dims
        self.out_dims = children[-1].out_dims

    def apply(self, img):
        out = self._check(img, self.in_dims, "input")
        for child in self.children:
            out = child.apply(out)
        return out

    def apply_pinv(self, obs):
        out = self._check(obs, self.out_dims, "observation")
        for child in reversed(self.children):
            out = child.apply_pinv(out)
        return out

    def apply_transpose(self, obs):
        out = self._check(obs, self.out_dims, "observation")
        for child in reversed(self.children):
            out = child.apply_transpose(out)
        return out

    def apply_pinv_transpose(self, img):
        out = self._check(img, self.in_dims, "input")
        for child in self.children:
            out = child.apply_pinv_transpose(out)
        return out

    def row_norm_sq(self):
        # Product of per-child scales; only a preconditioning estimate.
        value = 1.0
        for child in self.children:
            value *= child.row_norm_sq()
        return value


def _pixels(dims) -> int:
    return dims[0] * dims[1]


def materialize(op: LinearDegradation) -> np.ndarray:
    """Dense matrix of the forward map, probed column by column.

    Test oracle only; refuses inputs past the pixel-count cap.
    """
    if _pixels(op.in_dims) > MATERIALIZE_CAP or _pixels(op.out_dims) > MATERIALIZE_CAP:
        raise ValueError(f"materialize capped at {MATERIALIZE_CAP} pixels per side")
    n_in = _pixels(op.in_dims)
    n_out = _pixels(op.out_dims)
    mat = np.zeros((n_out, n_in))
    probe = np.zeros(op.in_dims)
    flat = probe.ravel()
    for j in range(n_in):
        flat[j] = 1.0
        mat[:, j] = op.apply(probe).ravel()
        flat[j] = 0.0
    return mat


def materialize_pinv(op: LinearDegradation) -> np.ndarray:
    """Dense matrix of the pseudoinverse applier (same probing, same cap)."""
    if _pixels(op.in_dims) > MATERIALIZE_CAP or _pixels(op.out_dims) > MATERIALIZE_CAP:
        raise ValueError(f"materialize capped at {MATERIALIZE_CAP} pixels per side")
    n_in = _pixels(op.in_dims)
    n_out = _pixels(op.out_dims)
    mat = np.zeros((n_in, n_out))
    probe = np.zeros(op.out_dims)
    flat = probe.ravel()
    for j in range(n_out):
        flat[j] = 1.0
        mat[:, j] = op.apply_pinv(probe).ravel()
        flat[j] = 0.0
    return mat


def svd_pinv(mat: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Ground-truth Moore-Penrose pseudoinverse via SVD.

    Singular values below tol * sigma_max are treated as zero.
    """
    mat = np.asarray(mat, dtype=np.float64)
    if mat.shape[0] > MATERIALIZE_CAP or mat.shape[1] > MATERIALIZE_CAP:
        raise ValueError(f"svd_pinv capped at {MATERIALIZE_CAP} per dimension")
    try:
        u, s, vt = np.linalg.svd(mat, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(f"SVD failed to converge: {exc}") from exc
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((mat.shape[1], mat.shape[0]))
    inv = np.where(s > tol * s[0], 1.0 / np.where(s > 0, s, 1.0), 0.0)
    return (vt.T * inv) @ u.T


@dataclass
class ConditionReport:
    """Max-abs deviations from the four Moore-Penrose conditions.

    (1) A P A = A   (2) P A P = P   (3) (A P)^T = A P   (4) (P A)^T = P A
    """

    deviations: tuple[float, float, float, float]
    tol: float

    def passed(self, condition: int) -> bool:
        return self.deviations[condition - 1] <= self.tol

    @property
    def all_passed(self) -> bool:
        return all(dev <= self.tol for dev in self.deviations)

    def lines(self) -> list[str]:
        names = ("A P A = A", "P A P = P", "(A P)^T = A P", "(P A)^T = P A")
        out = []
        for idx, (name, dev) in enumerate(zip(names, self.deviations), start=1):
            status = "pass" if dev <= self.tol else "FAIL"
            out.append(f"condition ({idx})  {name:<14} max dev {dev:12.4e}  {status}")
        return out


def mp_condition_report(a_mat: np.ndarray, p_mat: np.ndarray, tol: float) -> ConditionReport:
    ap = a_mat @ p_mat
    pa = p_mat @ a_mat
    devs = (
        float(np.max(np.abs(ap @ a_mat - a_mat))),
        float(np.max(np.abs(pa @ p_mat - p_mat))),
        float(np.max(np.abs(ap - ap.T))),
        float(np.max(np.abs(pa - pa.T))),
    )
    return ConditionReport(devs, tol)


def verify_operator(op: LinearDegradation, tol: float = 1e-8) -> ConditionReport:
    """Evaluate the four Moore-Penrose conditions on the dense (A, pinv) pair."""
    return mp_condition_report(materialize(op), materialize_pinv(op), tol)


# ---------------------------------------------------------------------------
# Operator spec strings: "id", "blur:sigma=1.0,gamma=1e-3", "down:s=2" and
# "+"-joined composites (applied left to right).
# ---------------------------------------------------------------------------

_BLUR_KEYS = {"sigma", "gamma", "size"}


def _parse_terms(spec: str) -> list[tuple[str, dict[str, float], int]]:
    terms = []
    offset = 0
    for chunk in spec.split("+"):
        if not chunk.strip():
            raise OpSpecError("empty operator term", offset)
        name, _, argstr = chunk.partition(":")
        name = name.strip()
        params: dict[str, float] = {}
        if argstr:
            arg_offset = offset + chunk.index(":") + 1
            for pair in argstr.split(","):
                key, eq, value = pair.partition("=")
                if not eq:
                    raise OpSpecError(f"expected key=value, got {pair!r}", arg_offset)
                try:
                    params[key.strip()] = float(value)
                except ValueError:
                    raise OpSpecError(f"bad numeric value {value!r}", arg_offset) from None
                arg_offset += len(pair) + 1
        terms.append((name, params, offset))
        offset += len(chunk) + 1
    return terms


def _build_term(name: str, params: dict[str, float], position: int,
                dims: tuple[int, int]) -> LinearDegradation:
    if name == "id":
        if params:
            raise OpSpecError("id takes no parameters", position)
        return Identity(dims)
    if name == "blur":
        unknown = set(params) - _BLUR_KEYS
        if unknown:
            raise OpSpecError(f"unknown blur parameter {sorted(unknown)[0]!r}", position)
        sigma = params.get("sigma", 1.0)
        gamma = params.get("gamma", 1e-3)
        size = int(params.get("size", 5))
        return Blur(dims, gaussian_kernel(size, sigma), wiener_gamma=gamma)
    if name == "down":
        unknown = set(params) - {"s"}
        if unknown:
            raise OpSpecError(f"unknown down parameter {sorted(unknown)[0]!r}", position)
        return Downsample(dims, int(params.get("s", 2)))
    raise OpSpecError(f"unknown operator {name!r}", position)


def parse_opspec(spec: str, in_dims: tuple[int, int]) -> LinearDegradation:
    """Build the operator described by `spec` acting on in_dims images."""
    terms = _parse_terms(spec)
    children = []
    dims = tuple(in_dims)
    for name, params, position in terms:
        try:
            child = _build_term(name, params, position, dims)
        except ValueError as exc:
            if isinstance(exc, OpSpecError):
                raise
            raise OpSpecError(str(exc), position) from None
        children.append(child)
        dims = child.out_dims
    return children[0] if len(children) == 1 else Composite(children)


def source_dims_for_spec(spec: str, out_dims: tuple[int, int]) -> tuple[int, int]:
    """Clean-image dims implied by an observation of out_dims under `spec`."""
    factor = 1
    for name, params, _ in _parse_terms(spec):
        if name == "down":
            factor *= int(params.get("s", 2))
    return (out_dims[0] * factor, out_dims[1] * factor)
