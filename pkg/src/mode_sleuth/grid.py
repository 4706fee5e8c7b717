"""Linearised AC-grid dynamics driven by filtered power-imbalance noise.

State of the swing subsystem: frequency deviations ``df`` at every node and
phase differences ``dDelta`` along the edges of a spanning tree oriented
away from a root node (``Delta_e = phi_child - phi_parent``). Power
imbalances ``dp`` follow ``dp' = -J dp + noise(K)`` and drive the swing
subsystem one way:

    M_l df_l' = dp_l - gamma_l df_l - sum_l' T_ll' (phi_l - phi_l')
    Delta_e'  = df_child - df_parent

so ``x' = A x + C dp`` with ``C = [diag(1/M); 0]``. The response of ``x`` to
an impulse in ``dp`` is ``h_xp(t) = exp(A t) E - E exp(-J t)`` where
``A E + E J = C``.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import matfun
from .errors import InvalidGraph, InvalidInput, InvalidTree, NoEquilibrium
from .model import FOU, LtiSystem, kernel_eval

GRID_FORMAT = "grid-model/1"


# ---------------------------------------------------------------------------
# Spanning trees
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TreeCoordinates:
    """Spanning tree rooted at ``root`` with edges oriented away from it.

    ``incidence`` (edges x nodes) has +1 at the child and -1 at the parent,
    so ``Delta = incidence @ phi``. ``paths`` (nodes x edges) recovers phases
    relative to the root: ``phi - phi_root = paths @ Delta``.
    """

    k: int
    root: int
    parents: tuple[int, ...]  # parent of each node, -1 at the root
    edges: tuple[tuple[int, int], ...]  # (parent, child)

    def __post_init__(self):
        k = self.k
        if len(self.parents) != k or self.parents[self.root] != -1:
            raise InvalidTree("parent list must have one entry per node and -1 at the root")
        if sum(1 for p in self.parents if p == -1) != 1:
            raise InvalidTree("exactly one root expected")
        for l in range(k):
            seen = set()
            n = l
            while n != self.root:
                if n in seen or not 0 <= self.parents[n] < k:
                    raise InvalidTree(f"node {l} does not reach the root")
                seen.add(n)
                n = self.parents[n]

    @classmethod
    def from_parents(cls, parents: Sequence[int]) -> "TreeCoordinates":
        parents = tuple(int(p) for p in parents)
        roots = [i for i, p in enumerate(parents) if p == -1]
        if len(roots) != 1:
            raise InvalidTree("exactly one root expected")
        tree = cls(len(parents), roots[0], parents, ())
        order = tree.bfs_order()
        edges = tuple((parents[c], c) for c in order if c != roots[0])
        return cls(len(parents), roots[0], parents, edges)

    def bfs_order(self) -> list[int]:
        children: dict[int, list[int]] = {i: [] for i in range(self.k)}
        for c, p in enumerate(self.parents):
            if p >= 0:
                children[p].append(c)
        order, q = [], deque([self.root])
        while q:
            n = q.popleft()
            order.append(n)
            q.extend(sorted(children[n]))
        return order

    @property
    def incidence(self) -> np.ndarray:
        Inc = np.zeros((self.k - 1, self.k))
        for e, (p, c) in enumerate(self.edges):
            Inc[e, c] = 1.0
            Inc[e, p] = -1.0
        return Inc

    @property
    def paths(self) -> np.ndarray:
        R = np.zeros((self.k, self.k - 1))
        edge_of = {c: e for e, (_, c) in enumerate(self.edges)}
        for l in range(self.k):
            n = l
            while n != self.root:
                R[l, edge_of[n]] = 1.0
                n = self.parents[n]
        return R

    def phase_difference(self, a: int, b: int) -> np.ndarray:
        """Coefficients ``w`` with ``phi_a - phi_b = w @ Delta``."""
        R = self.paths
        return R[a] - R[b]


def spanning_tree_coordinates(graph, root: int = 0) -> TreeCoordinates:
    """Breadth-first spanning tree of ``graph`` (edge list or adjacency matrix)."""
    if isinstance(graph, np.ndarray) or (len(graph) and not isinstance(graph[0], (tuple, list))):
        Adj = np.asarray(graph)
        k = Adj.shape[0]
        nbrs = {i: [j for j in range(k) if j != i and (Adj[i, j] != 0 or Adj[j, i] != 0)] for i in range(k)}
    else:
        edges = [(int(a), int(b)) for a, b in graph]
        k = max(max(e) for e in edges) + 1 if edges else 1
        k = max(k, root + 1)
        nbrs = {i: [] for i in range(k)}
        for a, b in edges:
            nbrs[a].append(b)
            nbrs[b].append(a)
    if not 0 <= root < k:
        raise InvalidGraph("root not in graph")
    parents = [-2] * k
    parents[root] = -1
    q = deque([root])
    while q:
        n = q.popleft()
        for m in sorted(set(nbrs[n])):
            if parents[m] == -2:
                parents[m] = n
                q.append(m)
    if any(p == -2 for p in parents):
        raise InvalidGraph("graph is not connected")
    return TreeCoordinates.from_parents(parents)


# ---------------------------------------------------------------------------
# Equilibria of the AC power-flow equations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AcNetwork:
    """Susceptance ``B``, conductance ``G`` (symmetric, zero diagonal),
    voltage magnitudes ``V`` and frequency-loss coefficients ``Gamma``."""

    B: np.ndarray
    G: np.ndarray | None = None
    V: np.ndarray | None = None
    Gamma: np.ndarray | None = None

    def __post_init__(self):
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        k = B.shape[0]
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "G", np.zeros((k, k)) if self.G is None else np.asarray(self.G, dtype=float))
        object.__setattr__(self, "V", np.ones(k) if self.V is None else np.asarray(self.V, dtype=float))
        object.__setattr__(self, "Gamma", np.zeros(k) if self.Gamma is None else np.asarray(self.Gamma, dtype=float))

    @property
    def k(self) -> int:
        return self.B.shape[0]


def _offdiag(X: np.ndarray) -> np.ndarray:
    return X - np.diag(np.diag(X))


def equilibrium_power(F: float, phases, net: AcNetwork) -> np.ndarray:
    """``p_l = Gamma_l F^2 + sum_{l'} V_l V_l' (B sin(phi_l - phi_l') + G cos(phi_l - phi_l'))``."""
    phi = np.asarray(phases, dtype=float)
    d = phi[:, None] - phi[None, :]
    VV = np.outer(net.V, net.V)
    return net.Gamma * F**2 + np.sum(VV * (_offdiag(net.B) * np.sin(d) + _offdiag(net.G) * np.cos(d)), axis=1)


def coupling_matrix(phases, net: AcNetwork) -> np.ndarray:
    """Linearised coupling ``T_ll' = V_l V_l' (B cos(phi_l - phi_l') - G sin(phi_l - phi_l'))``."""
    phi = np.asarray(phases, dtype=float)
    d = phi[:, None] - phi[None, :]
    VV = np.outer(net.V, net.V)
    return _offdiag(VV * (net.B * np.cos(d) - net.G * np.sin(d)))


@dataclass(frozen=True)
class Equilibrium:
    phases: np.ndarray  # root phase fixed at 0
    delta: np.ndarray  # along tree edges, child minus parent
    residual: float
    iterations: int


def solve_equilibrium(p, F: float, net: AcNetwork, tree: TreeCoordinates | None = None,
                      tol: float = 1e-10, max_iter: int = 50) -> Equilibrium:
    """Newton's method from zero phase differences for the phases that
    produce the injections ``p``.

    The root phase is fixed at zero and the non-root balance equations are
    solved; the root equation must then hold as well (total injections
    consistent with losses) and all tree phase differences must stay below
    pi/2 in magnitude.
    """
    p = np.asarray(p, dtype=float)
    k = net.k
    if p.shape != (k,):
        raise InvalidInput("need one injection per node")
    tree = tree or spanning_tree_coordinates(net.B, 0)
    root = tree.root
    free = [l for l in range(k) if l != root]
    phi = np.zeros(k)
    VV = np.outer(net.V, net.V)
    Bo, Go = _offdiag(net.B), _offdiag(net.G)
    res = equilibrium_power(F, phi, net) - p
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(res[free]), initial=0.0) < tol:
            break
        d = phi[:, None] - phi[None, :]
        W = VV * (Bo * np.cos(d) - Go * np.sin(d))  # d p_l / d phi_l' = -W_ll' (l != l')
        Jac = -W
        Jac[np.diag_indices(k)] = W.sum(axis=1)
        Jf = Jac[np.ix_(free, free)]
        try:
            step = np.linalg.solve(Jf, -res[free])
        except np.linalg.LinAlgError:
            raise NoEquilibrium("singular power-flow Jacobian") from None
        phi[free] += step
        res = equilibrium_power(F, phi, net) - p
        if not np.all(np.isfinite(res)):
            raise NoEquilibrium("Newton iteration diverged")
    else:
        raise NoEquilibrium(f"Newton did not converge in {max_iter} iterations")
    full = float(np.max(np.abs(res)))
    if full > 1e-8 * max(1.0, float(np.max(np.abs(p), initial=0.0))):
        raise NoEquilibrium(f"injections inconsistent with network losses (root residual {full:.3g})")
    delta = tree.incidence @ phi
    if np.any(np.abs(delta) >= np.pi / 2):
        raise NoEquilibrium("solution leaves the small-angle stable region")
    return Equilibrium(phi, delta, full, it)


# ---------------------------------------------------------------------------
# Linearisation and the joint system
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridParams:
    """Inertias ``M``, dampings ``gamma``, couplings ``T`` (symmetric, zero
    diagonal), imbalance relaxation ``J`` and noise rate ``K``, spanning tree."""

    M: np.ndarray
    gamma: np.ndarray
    T: np.ndarray
    J: np.ndarray
    K: np.ndarray
    tree: TreeCoordinates
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        M = np.atleast_1d(np.asarray(self.M, dtype=float))
        k = M.size
        gamma = np.broadcast_to(np.asarray(self.gamma, dtype=float), (k,)).copy()
        T = np.asarray(self.T, dtype=float).reshape(k, k)
        J = np.asarray(self.J, dtype=float)
        J = np.diag(np.broadcast_to(J, (k,))) if J.ndim < 2 else J.reshape(k, k)
        K = np.asarray(self.K, dtype=float)
        K = np.diag(np.broadcast_to(K, (k,))) if K.ndim < 2 else K.reshape(k, k)
        if np.any(M <= 0) or np.any(gamma <= 0):
            raise InvalidInput("inertias and dampings must be positive")
        if not np.allclose(T, T.T) or np.any(np.diag(T) != 0):
            raise InvalidInput("T must be symmetric with zero diagonal")
        if self.tree.k != k:
            raise InvalidTree("tree does not span the nodes")
        if not matfun.is_stable(-J)[0]:
            raise InvalidInput("-J must be stable")
        for name, v in (("M", M), ("gamma", gamma), ("T", T), ("J", J), ("K", K)):
            object.__setattr__(self, name, v)
        if self.names is not None:
            object.__setattr__(self, "names", tuple(str(n) for n in self.names))

    @property
    def k(self) -> int:
        return self.M.size

    def node_names(self) -> tuple[str, ...]:
        return self.names or tuple(str(i + 1) for i in range(self.k))

    # config I/O ------------------------------------------------------------

    def to_dict(self) -> dict:
        names = self.node_names()
        edges = []
        for a in range(self.k):
            for b in range(a + 1, self.k):
                if self.T[a, b] != 0:
                    edges.append({"from": names[a], "to": names[b], "T": float(self.T[a, b])})
        return {
            "format": GRID_FORMAT,
            "nodes": [{"name": n, "M": float(m), "gamma": float(g)} for n, m, g in zip(names, self.M, self.gamma)],
            "edges": edges,
            "J": self.J.tolist(),
            "K": self.K.tolist(),
            "root": names[self.tree.root],
            "parents": [names[p] if p >= 0 else None for p in self.tree.parents],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "GridParams":
        """Parse a ``grid-model/1`` document.

        Edges carry either ``T`` directly or ``B`` (and optionally ``G``); in
        the latter case the couplings are linearised at the equilibrium for
        node injections ``p`` (default 0) at nominal frequency ``F``
        (default 0, i.e. no frequency losses), with node voltages ``V``
        (default 1) and loss coefficients ``Gamma`` (default 0).
        """
        if d.get("format") != GRID_FORMAT:
            raise InvalidInput(f"expected format {GRID_FORMAT!r}, got {d.get('format')!r}")
        nodes = d["nodes"]
        names = [str(n["name"]) for n in nodes]
        index = {n: i for i, n in enumerate(names)}
        k = len(nodes)
        try:
            Mv = np.array([float(n["M"]) for n in nodes])
            gv = np.array([float(n["gamma"]) for n in nodes])
        except KeyError as exc:
            raise InvalidInput(f"node missing field {exc}") from None
        T = np.zeros((k, k))
        Bm = np.zeros((k, k))
        Gm = np.zeros((k, k))
        network = False
        for e in d.get("edges", []):
            a, b = index[str(e["from"])], index[str(e["to"])]
            if "T" in e:
                T[a, b] = T[b, a] = float(e["T"])
            else:
                network = True
                Bm[a, b] = Bm[b, a] = float(e["B"])
                Gm[a, b] = Gm[b, a] = float(e.get("G", 0.0))
        root = index[str(d.get("root", names[0]))]
        adjacency = (T != 0) | (Bm != 0)
        if d.get("parents"):
            parents = [-1 if p is None else index[str(p)] for p in d["parents"]]
            tree = TreeCoordinates.from_parents(parents)
        else:
            tree = spanning_tree_coordinates(adjacency.astype(float), root)
        if network:
            net = AcNetwork(Bm, Gm, np.array([float(n.get("V", 1.0)) for n in nodes]),
                            np.array([float(n.get("Gamma", 0.0)) for n in nodes]))
            p = np.array([float(n.get("p", 0.0)) for n in nodes])
            eq = solve_equilibrium(p, float(d.get("F", 0.0)), net, tree)
            T = T + coupling_matrix(eq.phases, net)
        return cls(Mv, gv, T, np.asarray(d["J"], dtype=float), np.asarray(d["K"], dtype=float), tree, tuple(names))

    @classmethod
    def from_json(cls, text: str) -> "GridParams":
        return cls.from_dict(json.loads(text))


def laplacian(T: np.ndarray) -> np.ndarray:
    return np.diag(T.sum(axis=1)) - T


def linearize(params: GridParams) -> tuple[np.ndarray, np.ndarray]:
    """Swing matrix ``A`` over ``(df, dDelta)`` and input map ``C``."""
    k = params.k
    tree = params.tree
    Minv = np.diag(1.0 / params.M)
    top = np.hstack([-Minv @ np.diag(params.gamma), -Minv @ laplacian(params.T) @ tree.paths])
    bottom = np.hstack([tree.incidence, np.zeros((k - 1, k - 1))])
    A = np.vstack([top, bottom])
    C = np.vstack([Minv, np.zeros((k - 1, k))])
    return A, C


@dataclass(frozen=True)
class JointGridSystem:
    """Skew-product system over ``(dp, x)`` with drift ``[[-J, 0], [C, A]]``."""

    A: np.ndarray
    C: np.ndarray
    J: np.ndarray
    K: np.ndarray
    E: np.ndarray
    params: GridParams | None = None

    @property
    def k(self) -> int:
        return self.J.shape[0]

    @property
    def nx(self) -> int:
        return self.A.shape[0]

    @property
    def system(self) -> LtiSystem:
        k, nx = self.k, self.nx
        Aj = np.block([[-self.J, np.zeros((k, nx))], [self.C, self.A]])
        Kj = np.zeros((k + nx, k + nx))
        Kj[:k, :k] = self.K
        return LtiSystem(Aj, Kj)

    @property
    def x_slice(self) -> slice:
        return slice(self.k, self.k + self.nx)

    def h_xp(self, t: float) -> np.ndarray:
        """Response of ``x`` at time ``t`` to a unit impulse in ``dp`` at 0."""
        return matfun.expm(self.A, t) @ self.E - self.E @ matfun.expm(-self.J, t)

    def covariance_blocks(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(Sigma_pp, Sigma_xp, Sigma_xx)`` by the skew-product route:
        a Lyapunov solve for ``dp``, a Sylvester solve for the cross block
        and a Lyapunov solve for ``x`` forced by the cross terms."""
        Spp = matfun.solve_lyapunov(-self.J, self.K)
        Sxp = matfun.solve_sylvester(self.A, -self.J.T, -self.C @ Spp)
        forcing = self.C @ Sxp.T
        Sxx = matfun.solve_lyapunov(self.A, matfun.symmetrize(forcing + forcing.T), check_psd=False)
        return Spp, Sxp, Sxx

    def skew_covariance(self, tau: float) -> np.ndarray:
        """``C^x(tau) = Sigma_xp h_xp(tau)^T + Sigma_xx exp(A^T tau)``; transpose for negative lags."""
        _, Sxp, Sxx = self.covariance_blocks()
        if tau < 0:
            return self.skew_covariance(-tau).T
        return Sxp @ self.h_xp(tau).T + Sxx @ matfun.expm(self.A, tau).T


def assemble_joint(A, C, J, K, params: GridParams | None = None) -> JointGridSystem:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    J = np.atleast_2d(np.asarray(J, dtype=float))
    K = np.atleast_2d(np.asarray(K, dtype=float))
    E = matfun.solve_sylvester(A, J, C)
    return JointGridSystem(A, C, J, K, E, params)


def build_grid(params: GridParams) -> JointGridSystem:
    A, C = linearize(params)
    return assemble_joint(A, C, params.J, params.K, params)


# ---------------------------------------------------------------------------
# Observables at a PMU subset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PmuObservation:
    nodes: tuple[int, ...]
    tree: TreeCoordinates  # over the PMU subset, indices into `nodes`
    channels: tuple[str, ...]
    Z: np.ndarray  # channels x joint state


def shrunk_tree(tree: TreeCoordinates, pmus: Sequence[int]) -> tuple[int, TreeCoordinates]:
    """Tree on the PMU nodes: each PMU's parent is its nearest PMU ancestor;
    PMUs without one hang off the PMU closest to the root."""
    pmus = list(dict.fromkeys(int(p) for p in pmus))
    if not pmus:
        raise InvalidInput("need at least one PMU")
    depth = {}
    for l in range(tree.k):
        n, dd = l, 0
        while n != tree.root:
            n = tree.parents[n]
            dd += 1
        depth[l] = dd
    root_pmu = min(pmus, key=lambda p: (depth[p], pmus.index(p)))
    pos = {p: i for i, p in enumerate(pmus)}
    parents = []
    for p in pmus:
        if p == root_pmu:
            parents.append(-1)
            continue
        n = tree.parents[p]
        while n != -1 and n not in pos:
            n = tree.parents[n]
        parents.append(pos[n] if n != -1 else pos[root_pmu])
    return root_pmu, TreeCoordinates.from_parents(parents)


def pmu_observation(jgs: JointGridSystem, pmus: Sequence[int] | None = None) -> PmuObservation:
    """Frequency at each PMU plus phase differences along the shrunk tree
    (``M = 2k - 1`` channels), as rows over the joint state ``(dp, x)``."""
    params = jgs.params
    if params is None:
        raise InvalidInput("joint system was assembled without grid parameters")
    k = params.k
    pmus = list(range(k)) if pmus is None else [int(p) for p in pmus]
    if any(not 0 <= p < k for p in pmus):
        raise InvalidInput("PMU index out of range")
    _, sub = shrunk_tree(params.tree, pmus)
    names = params.node_names()
    nodes = tuple(dict.fromkeys(pmus))
    n_joint = k + jgs.nx
    rows, chans = [], []
    for p in nodes:
        z = np.zeros(n_joint)
        z[k + p] = 1.0
        rows.append(z)
        chans.append(f"f_{names[p]}")
    R = params.tree.paths
    for parent, child in sub.edges:
        a, b = nodes[child], nodes[parent]
        z = np.zeros(n_joint)
        z[k + k:] = R[a] - R[b]
        rows.append(z)
        chans.append(f"dphi_{names[a]}_{names[b]}")
    return PmuObservation(nodes, sub, tuple(chans), np.array(rows))


def aggregate_fou(M: float, gamma: float, J: float, sigma: float) -> FOU:
    """Single-node aggregate: the frequency is a filtered OU process."""
    return FOU(M, gamma, J, sigma)


def fou_kernel_check(jgs: JointGridSystem, sigma: float, tau: float) -> tuple[float, float]:
    """For ``k = 1``: (skew-product frequency covariance, FOU closed form)."""
    if jgs.k != 1:
        raise InvalidInput("aggregate reduction applies to a single node")
    Mval = 1.0 / jgs.C[0, 0]
    gamma = -jgs.A[0, 0] * Mval
    return float(jgs.skew_covariance(tau)[0, 0]), kernel_eval(FOU(Mval, gamma, float(jgs.J[0, 0]), sigma), tau)
