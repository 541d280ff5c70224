"""Qubit linear algebra: Pauli basis, density/Bloch maps, superoperators, metrics.

Basis convention used throughout the package: ``|g> = (1, 0)``, ``|e> = (0, 1)``,
``sigma_3 = |g><g| - |e><e| = diag(1, -1)`` and the lowering operator
``sigma_- = |g><e|``.

Vector-valued helpers accept Bloch vectors of shape ``(..., 3)`` and operate
row-wise. They are written with explicit element-wise arithmetic (no BLAS
reductions) so a row's result does not depend on how many rows are batched
together.
"""

import numpy as np

HERMITIAN_TOL = 1e-12
TRACE_TOL = 1e-12
EIG_TOL = 1e-12
BALL_TOL = 1e-9

IDENTITY = np.eye(2, dtype=complex)
SIGMA_1 = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_2 = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_3 = np.array([[1, 0], [0, -1]], dtype=complex)
SIGMA_MINUS = np.array([[0, 1], [0, 0]], dtype=complex)
SIGMA_PLUS = SIGMA_MINUS.conj().T.copy()
GROUND = np.array([[1, 0], [0, 0]], dtype=complex)
EXCITED = np.array([[0, 0], [0, 1]], dtype=complex)

_PAULIS = (SIGMA_1, SIGMA_2, SIGMA_3)


def pauli(k):
    """Return the Pauli matrix ``sigma_k`` for ``k`` in {1, 2, 3}."""
    if k not in (1, 2, 3):
        raise ValueError(f"Pauli index must be 1, 2 or 3, got {k!r}")
    return _PAULIS[k - 1].copy()


def dagger(a):
    return np.conj(np.swapaxes(a, -1, -2))


def commutator(a, b):
    return a @ b - b @ a


def trace_inner(a, b):
    """Return ``Tr(A B)`` as a complex number."""
    a = np.asarray(a)
    b = np.asarray(b)
    return complex(np.einsum("ij,ji->", a, b))


def is_hermitian(a, tol=HERMITIAN_TOL):
    return bool(np.max(np.abs(a - dagger(a))) <= tol)


def check_density(rho, name="rho"):
    """Validate a 2x2 density matrix and return it as a complex array.

    Raises
    ------
    ValueError
        If ``rho`` is not Hermitian, not unit-trace or has an eigenvalue
        below ``-EIG_TOL``.
    """
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (2, 2):
        raise ValueError(f"{name} must be 2x2, got shape {rho.shape}")
    if not np.all(np.isfinite(rho)):
        raise ValueError(f"{name} has non-finite entries")
    if not is_hermitian(rho):
        raise ValueError(f"{name} is not Hermitian")
    tr = np.trace(rho)
    if abs(tr - 1.0) > TRACE_TOL:
        raise ValueError(f"{name} has trace {tr.real:.15g}, expected 1")
    if np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))[0] < -EIG_TOL:
        raise ValueError(f"{name} is not positive semidefinite")
    return rho


def to_coherence(rho):
    """Map a density matrix to its coherence (Bloch) vector ``x_k = Tr(rho sigma_k)``."""
    rho = np.asarray(rho, dtype=complex)
    if not is_hermitian(rho):
        raise ValueError("density matrix is not Hermitian")
    x = np.array([trace_inner(rho, s) for s in _PAULIS])
    if np.max(np.abs(x.imag)) > HERMITIAN_TOL:
        raise ValueError("coherence vector has imaginary residue")
    return x.real.copy()


def from_coherence(x):
    """Build ``rho = (I + sum_k x_k sigma_k) / 2`` from a Bloch vector.

    Accepts ``(..., 3)`` input and returns ``(..., 2, 2)``. Vectors outside the
    unit ball (beyond ``BALL_TOL``) are rejected; project them first.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 3:
        raise ValueError(f"Bloch vector must have trailing size 3, got {x.shape}")
    if np.any(bloch_norm(x) > 1.0 + BALL_TOL):
        raise ValueError("Bloch vector lies outside the unit ball")
    rho = np.empty(x.shape[:-1] + (2, 2), dtype=complex)
    rho[..., 0, 0] = 0.5 * (1.0 + x[..., 2])
    rho[..., 1, 1] = 0.5 * (1.0 - x[..., 2])
    rho[..., 0, 1] = 0.5 * (x[..., 0] - 1j * x[..., 1])
    rho[..., 1, 0] = 0.5 * (x[..., 0] + 1j * x[..., 1])
    return rho


def dissipator(c, rho):
    """Lindblad dissipator ``c rho c^+ - (c^+ c rho + rho c^+ c) / 2``."""
    c = np.asarray(c, dtype=complex)
    rho = np.asarray(rho, dtype=complex)
    cd = dagger(c)
    cdc = cd @ c
    return c @ rho @ cd - 0.5 * (cdc @ rho + rho @ cdc)


def meas_superop(c, rho):
    """Measurement backaction ``c rho + rho c^+ - <c + c^+> rho``."""
    c = np.asarray(c, dtype=complex)
    rho = np.asarray(rho, dtype=complex)
    cd = dagger(c)
    expect = np.trace((c + cd) @ rho)
    return c @ rho + rho @ cd - expect * rho


def bloch_norm(x):
    x = np.asarray(x, dtype=float)
    return np.sqrt(x[..., 0] * x[..., 0] + x[..., 1] * x[..., 1] + x[..., 2] * x[..., 2])


def bloch_project(x):
    """Radially project onto the closed unit ball: ``x / max(1, |x|)``.

    Works row-wise on ``(..., 3)`` arrays.
    """
    x = np.asarray(x, dtype=float)
    if np.any(np.isnan(x)):
        raise ValueError("cannot project a NaN vector")
    n = bloch_norm(x)
    scale = np.where(n > 1.0, n, 1.0)
    return x / scale[..., None]


def bloch_dot(x, y):
    return x[..., 0] * y[..., 0] + x[..., 1] * y[..., 1] + x[..., 2] * y[..., 2]


def fidelity_bloch(x, y):
    """Qubit fidelity between the states with Bloch vectors ``x`` and ``y``.

    Uses ``F = Tr(rho sigma) + 2 sqrt(det rho det sigma)`` written in Bloch
    coordinates: ``(1 + x.y + sqrt((1 - |x|^2)(1 - |y|^2))) / 2``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    mix = np.clip(1.0 - bloch_dot(x, x), 0.0, None) * np.clip(1.0 - bloch_dot(y, y), 0.0, None)
    f = 0.5 * (1.0 + bloch_dot(x, y) + np.sqrt(mix))
    return np.clip(f, 0.0, 1.0)


def fidelity(rho, sigma):
    """Uhlmann fidelity ``(Tr sqrt(sqrt(rho) sigma sqrt(rho)))^2`` of two qubit states."""
    rho = check_density(rho, "rho")
    sigma = check_density(sigma, "sigma")
    overlap = trace_inner(rho, sigma).real
    dets = max(np.linalg.det(rho).real, 0.0) * max(np.linalg.det(sigma).real, 0.0)
    return float(np.clip(overlap + 2.0 * np.sqrt(dets), 0.0, 1.0))


def purity(rho):
    rho = np.asarray(rho, dtype=complex)
    return float(trace_inner(rho, rho).real)


def random_density(rng, pure=False):
    """Draw a random qubit state (uniform in the ball, or on the sphere if ``pure``)."""
    v = rng.normal(size=3)
    v /= np.linalg.norm(v)
    r = 1.0 if pure else rng.uniform() ** (1.0 / 3.0)
    return from_coherence(r * v)


def random_unitary(rng):
    """Haar-random element of U(2) via QR of a complex Gaussian matrix."""
    z = (rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))) / np.sqrt(2.0)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))
