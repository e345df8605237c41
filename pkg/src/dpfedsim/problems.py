"""Synthetic federated objectives with known constants and optima.

Two client families are supported:

* quadratic: f_i(x) = 0.5 x'A_i x - b_i'x + c_i with A_i symmetric positive
  definite; c_i is fixed so the client's own minimum value is zero.
* ridge logistic regression: f_i(x) = mean_j log(1 + exp(z_j'x)) - y_j z_j'x
  + (ridge/2)||x||^2, which is ridge-strongly convex.

A Federation bundles N clients with the global strong convexity and
smoothness constants and, when available in closed form, the shared
minimizer x* of the average objective together with the per-client
gradients at x* (which sum to zero).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import streams
from . import _backend

_SYM_RTOL = 1e-12
_EIG_FLOOR = 0.0


@dataclass
class QuadraticObjective:
    """One client's quadratic loss, parametrized by (A_i, b_i)."""

    a_mat: np.ndarray
    b_vec: np.ndarray
    kind: str = field(default="quadratic", init=False)

    def __post_init__(self):
        self.a_mat = np.ascontiguousarray(np.asarray(self.a_mat, dtype=np.float64))
        self.b_vec = np.ascontiguousarray(np.asarray(self.b_vec, dtype=np.float64))
        if self.a_mat.ndim != 2 or self.a_mat.shape[0] != self.a_mat.shape[1]:
            raise ValueError(f"matrix must be square, got shape {self.a_mat.shape}")
        if self.b_vec.shape != (self.a_mat.shape[0],):
            raise ValueError(
                f"vector shape {self.b_vec.shape} incompatible with matrix "
                f"{self.a_mat.shape}"
            )
        scale = np.abs(self.a_mat).max()
        if scale == 0.0 or not np.isfinite(scale):
            raise ValueError("matrix must be finite and nonzero")
        if np.abs(self.a_mat - self.a_mat.T).max() > _SYM_RTOL * scale:
            raise ValueError("matrix is not symmetric within 1e-12 relative")
        eigs = np.linalg.eigvalsh(self.a_mat)
        if eigs[0] <= _EIG_FLOOR:
            raise ValueError(f"matrix is not positive definite (min eig {eigs[0]})")
        self._eigs = (float(eigs[0]), float(eigs[-1]))
        self._optimum = np.linalg.solve(self.a_mat, self.b_vec)
        residual = np.linalg.norm(self.a_mat @ self._optimum - self.b_vec)
        if residual > 1e-9 * max(1.0, float(np.linalg.norm(self.b_vec))):
            raise ValueError(f"client optimum solve residual {residual} too large")
        # Offset chosen so f_i at the client optimum is exactly zero.
        self._loss_offset = 0.5 * float(np.dot(self._optimum, self.b_vec))

    @property
    def dim(self) -> int:
        return self.a_mat.shape[0]

    @property
    def optimum(self) -> np.ndarray:
        return self._optimum

    @property
    def loss_offset(self) -> float:
        return self._loss_offset

    @property
    def n_samples(self) -> int:
        # Analytic objective: treated as a single "sample" for batching.
        return 1


@dataclass
class LogisticObjective:
    """One client's ridge-regularized logistic loss on (features, labels)."""

    features: np.ndarray
    labels: np.ndarray
    ridge: float

    kind: str = field(default="logistic", init=False)

    def __post_init__(self):
        self.features = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        self.labels = np.ascontiguousarray(np.asarray(self.labels, dtype=np.float64))
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D array (samples x dim)")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must have one entry per feature row")
        if not np.isin(self.labels, (0.0, 1.0)).all():
            raise ValueError("labels must take values in {0, 1}")
        if not self.ridge > 0.0:
            raise ValueError("ridge coefficient must be positive")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]


ClientObjective = Union[QuadraticObjective, LogisticObjective]


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def gradient(client: ClientObjective, x: np.ndarray) -> np.ndarray:
    """Exact gradient of the client loss at x."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (client.dim,):
        raise ValueError(f"point has shape {x.shape}, expected ({client.dim},)")
    if client.kind == "quadratic":
        return _backend.impl.quad_gradient(client.a_mat, client.b_vec, x)
    z = client.features @ x
    n = client.n_samples
    return client.features.T @ (_sigmoid(z) - client.labels) / n + client.ridge * x


def loss(client: ClientObjective, x: np.ndarray) -> float:
    """Client loss value at x (quadratic losses are zero at the client optimum)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (client.dim,):
        raise ValueError(f"point has shape {x.shape}, expected ({client.dim},)")
    if client.kind == "quadratic":
        return _backend.impl.quad_value(
            client.a_mat, client.b_vec, client.loss_offset, x
        )
    z = client.features @ x
    data = float(np.mean(np.logaddexp(0.0, z) - client.labels * z))
    return data + 0.5 * client.ridge * float(np.dot(x, x))


def minibatch_gradient(
    client: ClientObjective,
    x: np.ndarray,
    batch: Union[Sequence[int], int],
    rng: Optional[streams.StreamKey] = None,
) -> np.ndarray:
    """Gradient estimate from a sample subset.

    `batch` is either an explicit index collection or a batch size, in
    which case indices are sampled without replacement from `rng`.
    Quadratic clients are analytic and always return the exact gradient.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (client.dim,):
        raise ValueError(f"point has shape {x.shape}, expected ({client.dim},)")
    if client.kind == "quadratic":
        return gradient(client, x)
    n = client.n_samples
    if isinstance(batch, (int, np.integer)):
        if batch < 1:
            raise ValueError("batch size must be >= 1")
        if rng is None:
            raise ValueError("sampling a batch by size requires an rng stream")
        idx = sample_without_replacement(n, min(int(batch), n), rng)
    else:
        idx = np.asarray(batch, dtype=np.int64)
        if idx.size == 0:
            raise ValueError("batch must be nonempty")
        if idx.min() < 0 or idx.max() >= n:
            raise ValueError("batch indices out of range")
    z = client.features[idx] @ x
    g = client.features[idx].T @ (_sigmoid(z) - client.labels[idx]) / idx.size
    return g + client.ridge * x


def sample_without_replacement(n: int, size: int, rng: streams.StreamKey) -> np.ndarray:
    """Deterministic partial Fisher-Yates draw of `size` indices from range(n)."""
    u = streams.uniforms(rng, size)
    idx = np.arange(n, dtype=np.int64)
    for j in range(size):
        k = j + int(u[j] * (n - j))
        idx[j], idx[k] = idx[k], idx[j]
    return idx[:size]


def constants(client: ClientObjective) -> Tuple[float, float]:
    """(strong convexity, smoothness) constants of the client loss."""
    if client.kind == "quadratic":
        return client._eigs
    gram = client.features.T @ client.features
    lam_max = float(np.linalg.eigvalsh(gram)[-1])
    return client.ridge, lam_max / (4.0 * client.n_samples) + client.ridge


@dataclass
class Federation:
    """N clients plus the global (mu, L) profile and, if known, (x*, h*)."""

    clients: List[ClientObjective]
    dim: int
    mu: float
    ell: float
    optimum: Optional[np.ndarray] = None
    star_controls: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.clients) < 1:
            raise ValueError("federation needs at least one client")
        if any(c.dim != self.dim for c in self.clients):
            raise ValueError("clients disagree on dimension")
        if not 0.0 < self.mu <= self.ell:
            raise ValueError(f"need 0 < mu <= ell, got mu={self.mu}, ell={self.ell}")
        if self.optimum is not None:
            self.optimum = np.asarray(self.optimum, dtype=np.float64)
            g = self.average_gradient(self.optimum)
            if np.linalg.norm(g) > 1e-8:
                raise ValueError(
                    f"claimed optimum has average gradient norm {np.linalg.norm(g)}"
                )
            if self.star_controls is not None:
                self.star_controls = np.asarray(self.star_controls, dtype=np.float64)
                if self.star_controls.shape != (len(self.clients), self.dim):
                    raise ValueError("star controls must be one vector per client")
                if np.linalg.norm(self.star_controls.sum(axis=0)) > 1e-8:
                    raise ValueError("star controls must sum to zero")

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    @property
    def condition_number(self) -> float:
        return self.ell / self.mu

    @property
    def all_quadratic(self) -> bool:
        return all(c.kind == "quadratic" for c in self.clients)

    def average_gradient(self, x: np.ndarray) -> np.ndarray:
        acc = gradient(self.clients[0], x).copy()
        for c in self.clients[1:]:
            acc += gradient(c, x)
        return acc / self.n_clients

    def average_loss(self, x: np.ndarray) -> float:
        return sum(loss(c, x) for c in self.clients) / self.n_clients

    @classmethod
    def from_clients(
        cls, clients: Sequence[ClientObjective], solve_optimum: bool = True
    ) -> "Federation":
        clients = list(clients)
        mus, ells = zip(*(constants(c) for c in clients))
        fed = cls(
            clients=clients,
            dim=clients[0].dim,
            mu=min(mus),
            ell=max(ells),
        )
        if solve_optimum and fed.all_quadratic:
            x_star, h_star = closed_form_optimum(fed)
            fed.optimum = x_star
            fed.star_controls = h_star
        return fed


def closed_form_optimum(fed: Federation) -> Tuple[np.ndarray, np.ndarray]:
    """Minimizer of the average objective and per-client gradients there.

    Only quadratic federations admit a closed form: x* solves
    (sum_i A_i) x = sum_i b_i and h*_i = A_i x* - b_i.
    """
    if not fed.all_quadratic:
        raise NotImplementedError(
            "closed-form optimum exists only for all-quadratic federations; "
            "use numeric_optimum instead"
        )
    a_sum = np.zeros((fed.dim, fed.dim))
    b_sum = np.zeros(fed.dim)
    for c in fed.clients:
        a_sum += c.a_mat
        b_sum += c.b_vec
    try:
        x_star = np.linalg.solve(a_sum, b_sum)
    except np.linalg.LinAlgError as exc:  # cannot happen for SPD summands
        raise RuntimeError(f"singular aggregate matrix: {exc}") from exc
    h_star = np.stack([c.a_mat @ x_star - c.b_vec for c in fed.clients])
    residual = np.linalg.norm(h_star.sum(axis=0))
    if residual > 1e-8:
        raise RuntimeError(f"star controls sum to {residual}, expected ~0")
    return x_star, h_star


def numeric_optimum(
    fed: Federation,
    tol: float = 1e-10,
    max_rounds: int = 100_000,
) -> Tuple[np.ndarray, np.ndarray]:
    """Minimizer found by a long noiseless drift-corrected run.

    Runs the communicate-every-round, noiseless, unclipped variant of the
    control-variate scheme (step 1/L) from the origin until the average
    gradient norm falls below `tol`.
    """
    n, d = fed.n_clients, fed.dim
    eta = 1.0 / fed.ell
    x = np.zeros(d)
    h = np.zeros((n, d))
    for _ in range(max_rounds):
        grads = np.stack([gradient(c, x) for c in fed.clients])
        if np.linalg.norm(grads.mean(axis=0)) <= tol:
            break
        x_hat = x - eta * (grads - h)
        x_new = x_hat.mean(axis=0) - eta * h.mean(axis=0)
        h = h + (1.0 / eta) * (x_new - x_hat)
        x = x_new
    else:
        raise RuntimeError(
            f"no convergence to tol={tol} within {max_rounds} rounds"
        )
    h_star = np.stack([gradient(c, x) for c in fed.clients])
    return x, h_star


@dataclass(frozen=True)
class HeterogeneitySpec:
    """Recipe for a synthetic federation.

    zeta sets the radius at which client optima are placed around a shared
    center; condition_number fixes kappa = L/mu exactly per client.
    """

    zeta: float
    condition_number: float
    clients: int
    dimension: int
    kind: str = "quadratic"
    samples_per_client: int = 32

    def __post_init__(self):
        if self.zeta < 0:
            raise ValueError("zeta must be nonnegative")
        if self.condition_number < 1:
            raise ValueError("condition number must be >= 1")
        if self.clients < 1 or self.dimension < 1:
            raise ValueError("need at least one client and one dimension")
        if self.kind not in ("quadratic", "logistic"):
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if self.kind == "logistic":
            if self.samples_per_client < 1:
                raise ValueError("logistic clients need at least one sample")
            if self.condition_number <= 1:
                raise ValueError("logistic generation requires kappa > 1")
        if self.kind == "quadratic" and self.dimension == 1 and self.condition_number != 1:
            raise ValueError("dimension 1 forces condition number 1")


def _random_orthogonal(key: streams.StreamKey, d: int) -> np.ndarray:
    gauss = streams.normals(key, d * d).reshape(d, d)
    q, r = np.linalg.qr(gauss)
    # Fix the sign convention so Q is a deterministic function of the draw.
    return q * np.sign(np.diag(r))


def _spectrum(key: streams.StreamKey, d: int, kappa: float) -> np.ndarray:
    """Log-uniform eigenvalues on [1, kappa] with both endpoints pinned."""
    if d == 1:
        return np.ones(1)
    interior = np.exp(streams.uniforms(key, d - 2) * math.log(kappa)) if d > 2 else np.empty(0)
    return np.sort(np.concatenate([[1.0, kappa], interior]))


def generate_federation(spec: HeterogeneitySpec, seed: int) -> Federation:
    """Deterministically build a federation matching `spec`.

    The shared center is drawn at unit scale; client optima (quadratic) or
    teacher weights (logistic) sit at exact radius `spec.zeta` around it.
    """
    n, d = spec.clients, spec.dimension
    center_key = streams.stream_key(seed, streams.DOMAIN_GENERATE, 0, 0)
    center = streams.normals(center_key, d) / math.sqrt(d)
    targets = np.empty((n, d))
    for i in range(n):
        if spec.zeta == 0.0:
            targets[i] = center
        else:
            dir_key = streams.stream_key(seed, streams.DOMAIN_GENERATE, i + 1, 0)
            direction = streams.normals(dir_key, d)
            targets[i] = center + spec.zeta * direction / np.linalg.norm(direction)

    if spec.kind == "quadratic":
        clients: List[ClientObjective] = []
        for i in range(n):
            q_key = streams.stream_key(seed, streams.DOMAIN_GENERATE, i + 1, 1)
            s_key = streams.stream_key(seed, streams.DOMAIN_GENERATE, i + 1, 2)
            q = _random_orthogonal(q_key, d)
            lams = _spectrum(s_key, d, spec.condition_number)
            a_mat = (q * lams) @ q.T
            a_mat = 0.5 * (a_mat + a_mat.T)  # kill last-ulp asymmetry
            clients.append(QuadraticObjective(a_mat=a_mat, b_vec=a_mat @ targets[i]))
        return Federation.from_clients(clients)

    m = spec.samples_per_client
    raw_clients = []
    for i in range(n):
        z_key = streams.stream_key(seed, streams.DOMAIN_GENERATE, i + 1, 3)
        y_key = streams.stream_key(seed, streams.DOMAIN_GENERATE, i + 1, 4)
        feats = streams.normals(z_key, m * d).reshape(m, d) / math.sqrt(d)
        probs = _sigmoid(feats @ targets[i])
        labels = (streams.uniforms(y_key, m) < probs).astype(np.float64)
        raw_clients.append((feats, labels))
    # One shared ridge set from the worst client so the federation-level
    # condition number L/mu equals the requested kappa exactly.
    data_smoothness = max(
        float(np.linalg.eigvalsh(f.T @ f)[-1]) / (4.0 * m) for f, _ in raw_clients
    )
    ridge = data_smoothness / (spec.condition_number - 1.0)
    clients = [
        LogisticObjective(features=f, labels=y, ridge=ridge) for f, y in raw_clients
    ]
    return Federation.from_clients(clients)


# ---------------------------------------------------------------------------
# Plain-text serialization (round-trips float64 bitwise via 17 significant
# digits).
# ---------------------------------------------------------------------------

_FMT = "%.17g"


def _fmt_vector(v: np.ndarray) -> str:
    return " ".join(_FMT % x for x in v)


def save_federation(fed: Federation, path: str) -> None:
    """Write a federation as structured text (see load_federation)."""
    lines = ["dpfedsim-federation 1"]
    kind = fed.clients[0].kind
    if any(c.kind != kind for c in fed.clients):
        raise ValueError("serialization requires a single objective kind")
    lines.append(f"kind {kind}")
    lines.append(f"d {fed.dim}")
    lines.append(f"N {fed.n_clients}")
    for i, c in enumerate(fed.clients):
        lines.append(f"client {i}")
        if kind == "quadratic":
            for row in c.a_mat:
                lines.append("A " + _fmt_vector(row))
            lines.append("b " + _fmt_vector(c.b_vec))
        else:
            lines.append(f"n {c.n_samples}")
            lines.append("lambda " + (_FMT % c.ridge))
            for row in c.features:
                lines.append("Z " + _fmt_vector(row))
            lines.append("y " + " ".join("%d" % int(v) for v in c.labels))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_federation(path: str) -> Federation:
    """Parse a federation file produced by save_federation."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("dpfedsim-federation"):
        raise ValueError(f"{path}: not a federation file")
    header = {}
    idx = 1
    while idx < len(lines) and not lines[idx].startswith("client"):
        key, _, value = lines[idx].partition(" ")
        header[key] = value
        idx += 1
    try:
        kind = header["kind"]
        d = int(header["d"])
        n = int(header["N"])
    except KeyError as exc:
        raise ValueError(f"{path}: missing header field {exc}") from exc
    clients: List[ClientObjective] = []
    for _ in range(n):
        if idx >= len(lines) or not lines[idx].startswith("client"):
            raise ValueError(f"{path}: expected client block at line {idx + 1}")
        idx += 1
        if kind == "quadratic":
            rows = []
            for _ in range(d):
                tag, _, rest = lines[idx].partition(" ")
                if tag != "A":
                    raise ValueError(f"{path}: expected matrix row, got {tag!r}")
                rows.append([float(v) for v in rest.split()])
                idx += 1
            tag, _, rest = lines[idx].partition(" ")
            if tag != "b":
                raise ValueError(f"{path}: expected vector row, got {tag!r}")
            b = [float(v) for v in rest.split()]
            idx += 1
            clients.append(QuadraticObjective(a_mat=np.array(rows), b_vec=np.array(b)))
        else:
            fields = {}
            for key in ("n", "lambda"):
                tag, _, rest = lines[idx].partition(" ")
                if tag != key:
                    raise ValueError(f"{path}: expected {key!r}, got {tag!r}")
                fields[key] = rest
                idx += 1
            m = int(fields["n"])
            feats = []
            for _ in range(m):
                tag, _, rest = lines[idx].partition(" ")
                if tag != "Z":
                    raise ValueError(f"{path}: expected feature row, got {tag!r}")
                feats.append([float(v) for v in rest.split()])
                idx += 1
            tag, _, rest = lines[idx].partition(" ")
            if tag != "y":
                raise ValueError(f"{path}: expected labels, got {tag!r}")
            labels = [float(v) for v in rest.split()]
            idx += 1
            clients.append(
                LogisticObjective(
                    features=np.array(feats),
                    labels=np.array(labels),
                    ridge=float(fields["lambda"]),
                )
            )
    return Federation.from_clients(clients)
