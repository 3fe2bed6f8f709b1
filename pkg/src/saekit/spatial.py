"""Spatial building blocks: adjacency graphs, scaled ICAR structure, the
BYM2 decomposition, and the Matern covariance function.

The ICAR structure matrix Q has vertex degrees on the diagonal and -1 for
each neighbour pair.  Q is singular (row sums are zero); all variance
computations use the generalized inverse restricted to the sum-to-zero
subspace, which for a connected graph coincides with the Moore-Penrose
pseudo-inverse.  The scaled structure is calibrated so that the geometric
mean of the marginal variances under the sum-to-zero constraint is one,
which makes the spatial-proportion parameter of the BYM2 decomposition
interpretable as a genuine variance share.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, kve


class DisconnectedGraphError(ValueError):
    """Adjacency graph has more than one connected component."""


@dataclass(frozen=True)
class MaternParams:
    """Matern covariance hyperparameters.

    sigma is the marginal SD, rho the range (distance at which correlation
    drops to roughly 0.1), nu the smoothness (held fixed during fitting).
    """

    sigma: float
    rho: float
    nu: float = 1.5

    def __post_init__(self):
        if self.sigma <= 0 or self.rho <= 0 or self.nu <= 0:
            raise ValueError("Matern parameters must be positive")


@dataclass
class SpatialStructure:
    """Area adjacency graph with its ICAR structure matrix and scaling.

    Attributes
    ----------
    nodes : list of area ids, fixed ordering used by all matrices
    edges : list of (i, j) index pairs, i < j, deduplicated
    Q : unscaled ICAR structure (degree minus adjacency)
    Q_scaled : scaling_factor * Q
    scaling_factor : geometric mean of the constrained marginal variances
        of the unscaled structure
    """

    nodes: list
    edges: list
    Q: np.ndarray
    Q_scaled: np.ndarray
    scaling_factor: float
    _eigvecs: np.ndarray = field(repr=False, default=None)
    _gamma_eigvals: np.ndarray = field(repr=False, default=None)

    @property
    def n_areas(self):
        return len(self.nodes)

    def index(self, area_id):
        try:
            return self.nodes.index(area_id)
        except ValueError:
            raise KeyError(f"unknown area {area_id!r}") from None

    @property
    def generalized_inverse(self):
        """Generalized inverse of Q_scaled on the sum-to-zero subspace.

        Its diagonal holds the constrained marginal variances, with
        geometric mean one by construction.
        """
        v, g = self._eigvecs, self._gamma_eigvals
        return (v * g) @ v.T

    @property
    def gamma_eigen(self):
        """Eigenpairs (vectors, values) of the generalized inverse."""
        return self._eigvecs, self._gamma_eigvals

    def draw_standard_icar(self, rng):
        """One draw of the scaled ICAR effect: N(0, generalized inverse).

        The draw sums to zero and has unit geometric-mean marginal
        variance.
        """
        z = rng.standard_normal(self.n_areas)
        return self._eigvecs @ (np.sqrt(self._gamma_eigvals) * z)


def _connected_components(n, edges):
    comp = list(range(n))
    adj = [[] for _ in range(n)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = [False] * n
    components = []
    for start in range(n):
        if seen[start]:
            continue
        stack, members = [start], []
        seen[start] = True
        while stack:
            u = stack.pop()
            members.append(u)
            for w in adj[u]:
                if not seen[w]:
                    seen[w] = True
                    stack.append(w)
        components.append(sorted(members))
    return components


def build_adjacency(edge_list):
    """Assemble a SpatialStructure from an iterable of (area_a, area_b).

    Node order is first-appearance order.  Duplicate and reversed edges
    are deduplicated; self-loops are rejected.  Raises
    DisconnectedGraphError (naming the components) when the graph is not
    connected.
    """
    nodes = []
    seen = {}
    raw = []
    for a, b in edge_list:
        if a == b:
            raise ValueError(f"self-loop on {a!r}")
        for x in (a, b):
            if x not in seen:
                seen[x] = len(nodes)
                nodes.append(x)
        raw.append((seen[a], seen[b]))
    n = len(nodes)
    if n == 0:
        raise ValueError("empty edge list")
    edges = sorted({(min(i, j), max(i, j)) for i, j in raw})
    components = _connected_components(n, edges)
    if len(components) > 1:
        names = [[nodes[i] for i in comp] for comp in components]
        raise DisconnectedGraphError(
            f"graph has {len(components)} components: {names}")

    Q = np.zeros((n, n))
    for i, j in edges:
        Q[i, i] += 1.0
        Q[j, j] += 1.0
        Q[i, j] -= 1.0
        Q[j, i] -= 1.0

    Q_scaled, factor, vecs, gamma_vals = _scale_icar_full(Q)
    return SpatialStructure(nodes=nodes, edges=edges, Q=Q,
                            Q_scaled=Q_scaled, scaling_factor=factor,
                            _eigvecs=vecs, _gamma_eigvals=gamma_vals)


def _scale_icar_full(Q):
    n = Q.shape[0]
    try:
        lam, vecs = np.linalg.eigh(Q)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"eigendecomposition of Q failed: {exc}")
    # Connected graph: exactly one zero eigenvalue (the constant vector).
    tol = n * np.max(lam) * np.finfo(float).eps * 10
    null = lam <= tol
    if null.sum() != 1:
        raise ValueError(
            f"expected exactly one zero eigenvalue, found {null.sum()} "
            "(graph disconnected or degenerate)")
    inv = np.where(null, 0.0, 1.0 / np.where(null, 1.0, lam))
    marg_var = np.einsum("ij,j,ij->i", vecs, inv, vecs)
    factor = float(np.exp(np.mean(np.log(marg_var))))
    Q_scaled = factor * Q
    gamma_vals = inv / factor  # eigenvalues of the scaled gen. inverse
    return Q_scaled, factor, vecs, gamma_vals


def scale_icar(Q):
    """Scale an ICAR structure matrix.

    Returns (Q_scaled, scaling_factor) where the generalized inverse of
    Q_scaled has geometric-mean marginal variance one under the
    sum-to-zero constraint.
    """
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ValueError("Q must be square")
    if not np.allclose(Q, Q.T):
        raise ValueError("Q must be symmetric")
    if not np.allclose(Q.sum(axis=1), 0.0, atol=1e-8):
        raise ValueError("Q rows must sum to zero")
    Q_scaled, factor, _, _ = _scale_icar_full(Q)
    return Q_scaled, factor


def bym2_combine(e, S, sigma_b, phi):
    """BYM2 composite effect b = sigma_b * (sqrt(1-phi)*e + sqrt(phi)*S).

    e is iid standard normal, S a standardized ICAR draw; the composite
    has overall SD sigma_b with spatial proportion phi.
    """
    if not 0.0 <= phi <= 1.0:
        raise ValueError("phi must lie in [0, 1]")
    if sigma_b < 0:
        raise ValueError("sigma_b must be nonnegative")
    e = np.asarray(e, dtype=float)
    S = np.asarray(S, dtype=float)
    if e.shape != S.shape:
        raise ValueError("e and S must have the same length")
    return sigma_b * (np.sqrt(1.0 - phi) * e + np.sqrt(phi) * S)


def icar_logdensity(S, Q_scaled):
    """ICAR log density up to a constant: -1/2 S'Q_scaled S after centering.

    The rank-deficient normalizing constant is fixed for a given graph and
    dropped; the value is invariant to adding a constant to S.
    """
    S = np.asarray(S, dtype=float)
    Sc = S - S.mean()
    return -0.5 * float(Sc @ (np.asarray(Q_scaled) @ Sc))


def matern_cov(d, params: MaternParams):
    """Matern covariance at distance d.

    Parameterized by the range rho at which correlation is ~0.1, i.e. the
    Bessel argument is sqrt(8 nu) d / rho.  Continuous at d = 0 with value
    sigma**2.  Accepts scalars or arrays.
    """
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    nu, sigma, rho = params.nu, params.sigma, params.rho
    x = np.sqrt(8.0 * nu) * d / rho
    with np.errstate(divide="ignore", invalid="ignore"):
        # kve is the exponentially scaled Bessel K: avoids overflow at
        # small x and underflow at large x.
        logpart = nu * np.log(x) - x + np.log(kve(nu, x))
        val = sigma ** 2 * np.exp((1.0 - nu) * np.log(2.0) - gammaln(nu)
                                  + logpart)
    out = np.where(x > 0, val, sigma ** 2)
    if out.ndim == 0:
        return float(out)
    return out


def matern_covariance_matrix(points, params: MaternParams, nugget_var=0.0):
    """Dense Matern covariance over rows of `points` (+ nugget on diagonal)."""
    pts = np.asarray(points, dtype=float)
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=-1))
    K = matern_cov(dist, params)
    if nugget_var:
        K = K + nugget_var * np.eye(len(pts))
    return K


def matern_cross_covariance(points_a, points_b, params: MaternParams):
    """Matern covariance between two point sets."""
    a = np.asarray(points_a, dtype=float)
    b = np.asarray(points_b, dtype=float)
    diff = a[:, None, :] - b[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=-1))
    return matern_cov(dist, params)


# ---------------------------------------------------------------------------
# Graph constructors used by simulations and tests.

def path_edges(n, prefix="a"):
    ids = [f"{prefix}{i:02d}" for i in range(n)]
    return [(ids[i], ids[i + 1]) for i in range(n - 1)]


def cycle_edges(n, prefix="a"):
    ids = [f"{prefix}{i:02d}" for i in range(n)]
    return [(ids[i], ids[(i + 1) % n]) for i in range(n)]


def grid_edges(rows, cols, prefix="a"):
    def name(r, c):
        return f"{prefix}{r * cols + c:02d}"

    edges = []
    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                edges.append((name(r, c), name(r, c + 1)))
            if r + 1 < rows:
                edges.append((name(r, c), name(r + 1, c)))
    return edges


def random_planar_edges(n, seed, prefix="a"):
    """Edges of the Delaunay triangulation of n random points (planar,
    connected); a stand-in for realistic district adjacency graphs."""
    from scipy.spatial import Delaunay

    rng = np.random.default_rng(seed)
    pts = rng.random((n, 2))
    tri = Delaunay(pts)
    ids = [f"{prefix}{i:02d}" for i in range(n)]
    edges = set()
    for simplex in tri.simplices:
        for i in range(3):
            a, b = simplex[i], simplex[(i + 1) % 3]
            edges.add((min(a, b), max(a, b)))
    return [(ids[i], ids[j]) for i, j in sorted(edges)]


def read_edge_file(path):
    """Read a whitespace-separated edge list; '#' starts a comment."""
    edges = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(
                    f"{path}:{lineno}: expected 'area_a area_b', got {line!r}")
            edges.append((parts[0], parts[1]))
    return edges


def write_edge_file(path, edges):
    with open(path, "w", encoding="utf-8") as fh:
        for a, b in edges:
            fh.write(f"{a} {b}\n")
