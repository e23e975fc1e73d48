"""Learned residual-force basis and its meta-training loop.

The residual force per unit mass is modeled as phi(x, x_r) a, where the
basis phi is a bias-free ReLU network shared across wind conditions and
a is a per-condition linear coefficient vector:

    phi(x, x_r) = W4 g(W3 g(W2 g(W1 z))),  z = standardize([x; x_r])

with g = ReLU, three hidden layers of width 64, and output reshaped to
(3, k).  Spectral normalization caps every layer at gamma^(1/4) so the
input -> phi map is gamma-Lipschitz in raw units; the standardization
is folded into the first layer's norm so the budget survives scaling.

Training alternates an exact per-condition least-squares fit of the
coefficients with minibatch SGD (momentum) on the shared weights, then
re-projects the spectral budget, once per epoch.  The artifact stores
the weights, normalization stats, per-condition coefficients, their
mean (used to seed the online estimator), and the terminal covariance
of a forgetting recursive least-squares pass over the training set.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .artifacts import config_hash, load_arrays, save_arrays
from .errors import DivergenceError, DomainError

SCHEMA = "basis-model"
SCHEMA_VERSION = 1


@dataclass
class BasisConfig:
    k: int = 3
    hidden: tuple = (64, 64, 64)
    gamma: float = 10.0
    state_dim: int = 9

    @property
    def input_dim(self) -> int:
        return 2 * self.state_dim

    @property
    def output_dim(self) -> int:
        return 3 * self.k


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 256
    learning_rate: float = 1.0e-3
    lr_decay: float = 1.0      # per-epoch multiplier; < 1 anneals the step
    #                            size so momentum SGD settles instead of
    #                            limit-cycling around the minimum
    momentum: float = 0.9
    ridge: float = 1.0e-6
    ridge_train: float = 0.1   # per-sample coefficient penalty during the
    #                            alternating refits; the factorization is
    #                            scale-degenerate, and shrinking the heads
    #                            pushes magnitude into the basis, whose
    #                            output scale sets the adaptation speed
    val_condition: int | None = None
    seed: int = 0
    power_iters: int = 30
    grad_clip: float = 5.0     # global-norm clip; exact refits can make
    step_project_iters: int = 8  # early gradients huge, and each SGD step
    #                              re-projects onto the spectral budget


@dataclass
class LinearCoeffs:
    """Per-condition linear head over the shared basis."""

    a: np.ndarray

    def __post_init__(self) -> None:
        self.a = np.asarray(self.a, dtype=float)
        if not np.all(np.isfinite(self.a)):
            raise DomainError("coefficients must be finite")


def relu(z):
    return np.maximum(z, 0.0)


def power_iteration(W: np.ndarray, iters: int = 30, tol: float = 1.0e-13) -> float:
    """Largest singular value via power iteration on W^T W.

    Runs at least `iters` sweeps, then continues until the Rayleigh
    quotient stabilizes so the estimate is safe to normalize against.
    """
    W = np.asarray(W, dtype=float)
    v = np.full(W.shape[1], 1.0 / np.sqrt(W.shape[1]))
    sigma = 0.0
    for i in range(max(iters, 1) + 470):
        u = W @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        v = W.T @ (u / nu)
        sigma_new = np.linalg.norm(v)
        v = v / sigma_new
        if i + 1 >= iters and abs(sigma_new - sigma) <= tol * max(sigma_new, 1.0):
            return float(sigma_new)
        sigma = sigma_new
    return float(sigma)


class MlpBasis:
    """Bias-free ReLU basis with spectral budget gamma."""

    def __init__(self, weights, mean, scale, gamma, k):
        self.weights = [np.asarray(W, dtype=float) for W in weights]
        self.mean = np.asarray(mean, dtype=float)
        self.scale = np.asarray(scale, dtype=float)
        self.gamma = float(gamma)
        self.k = int(k)
        out_dim, self.state_dim = self.weights[-1].shape[0], self.mean.shape[0] // 2
        if out_dim != 3 * self.k:
            raise DomainError("output dimension must equal 3k")

    @classmethod
    def initialize(cls, cfg: BasisConfig, rng: np.random.Generator) -> "MlpBasis":
        dims = [cfg.input_dim, *cfg.hidden, cfg.output_dim]
        weights = []
        for n_in, n_out in zip(dims[:-1], dims[1:]):
            # He-uniform by fan-in.
            limit = np.sqrt(6.0 / n_in)
            weights.append(rng.uniform(-limit, limit, size=(n_out, n_in)))
        model = cls(weights, np.zeros(cfg.input_dim), np.ones(cfg.input_dim), cfg.gamma, cfg.k)
        model.normalize_spectral()
        return model

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def set_normalization(self, mean, scale) -> None:
        scale = np.asarray(scale, dtype=float)
        if np.any(scale <= 0.0):
            raise DomainError("normalization scale must be positive")
        self.mean = np.asarray(mean, dtype=float).copy()
        self.scale = scale.copy()

    def _standardize(self, Z):
        return (Z - self.mean) / self.scale

    def forward_batch(self, Z: np.ndarray) -> np.ndarray:
        """Raw inputs (n, 2 * state_dim) -> outputs (n, 3k)."""
        H = self._standardize(np.asarray(Z, dtype=float))
        for W in self.weights[:-1]:
            H = relu(H @ W.T)
        return H @ self.weights[-1].T

    def phi(self, x: np.ndarray, x_r: np.ndarray) -> np.ndarray:
        """Basis matrix (3, k) at a single state/reference pair."""
        z = np.concatenate([x, x_r])
        if z.shape != self.mean.shape:
            raise DomainError("input dimension mismatch")
        h = (z - self.mean) / self.scale
        for W in self.weights[:-1]:
            h = relu(W @ h)
        return (self.weights[-1] @ h).reshape(3, self.k)

    def phi_batch(self, X: np.ndarray, XR: np.ndarray) -> np.ndarray:
        out = self.forward_batch(np.hstack([X, XR]))
        return out.reshape(-1, 3, self.k)

    def value_and_state_jacobian(self, x: np.ndarray, x_r: np.ndarray):
        """(phi (3,k), d phi / d x (3, k, state_dim)) at one input."""
        z = np.concatenate([x, x_r])
        h = (z - self.mean) / self.scale
        acts = []
        for W in self.weights[:-1]:
            h = W @ h
            mask = h > 0.0
            h = h * mask
            acts.append((W, mask))
        out = self.weights[-1] @ h
        J = self.weights[-1]
        for W, mask in reversed(acts):
            J = (J * mask) @ W
        J = J / self.scale
        J_x = J[:, : self.state_dim]
        return out.reshape(3, self.k), J_x.reshape(3, self.k, self.state_dim)

    def residual(self, x, x_r, a) -> np.ndarray:
        """Estimated residual acceleration phi(x, x_r) a."""
        return self.phi(x, x_r) @ np.asarray(a, dtype=float)

    def effective_layer(self, idx: int) -> np.ndarray:
        """Layer matrix as seen from raw inputs (scaling folded into layer 0)."""
        W = self.weights[idx]
        return W / self.scale if idx == 0 else W

    def spectral_norms(self, iters: int = 30) -> np.ndarray:
        return np.array([power_iteration(self.effective_layer(i), iters)
                         for i in range(self.n_layers)])

    def layer_budget(self) -> float:
        return self.gamma ** (1.0 / self.n_layers)

    def normalize_spectral(self, iters: int = 30) -> np.ndarray:
        """Project every layer onto its share of the Lipschitz budget."""
        budget = self.layer_budget()
        norms = np.empty(self.n_layers)
        for i in range(self.n_layers):
            sigma = power_iteration(self.effective_layer(i), iters)
            if sigma > budget:
                self.weights[i] = self.weights[i] * (budget / (sigma * (1.0 + 1e-12)))
                sigma = budget
            norms[i] = sigma
        return norms

    def lipschitz_budget(self) -> float:
        return float(np.prod(self.spectral_norms()))

    def save(self, path, extra_meta=None, arrays=None) -> None:
        meta = {
            "gamma": self.gamma,
            "k": self.k,
            "hidden": [W.shape[0] for W in self.weights[:-1]],
            "state_dim": self.state_dim,
        }
        if extra_meta:
            meta.update(extra_meta)
        payload = {f"W{i}": W for i, W in enumerate(self.weights)}
        payload["mean"] = self.mean
        payload["scale"] = self.scale
        if arrays:
            payload.update(arrays)
        save_arrays(path, SCHEMA, SCHEMA_VERSION, meta, payload)

    @classmethod
    def load(cls, path):
        meta, arr = load_arrays(path, SCHEMA, SCHEMA_VERSION)
        n_layers = len(meta["hidden"]) + 1
        weights = [arr[f"W{i}"] for i in range(n_layers)]
        model = cls(weights, arr["mean"], arr["scale"], meta["gamma"], meta["k"])
        extras = {k: v for k, v in arr.items()
                  if not (k.startswith("W") and k[1:].isdigit()) and k not in ("mean", "scale")}
        return model, meta, extras


def forward(model: MlpBasis, x: np.ndarray, x_r: np.ndarray) -> np.ndarray:
    """Basis matrix (3, k) at (x, x_r); velocity-row embedding is the caller's job."""
    return model.phi(x, x_r)


def spectral_normalize(model: MlpBasis, iters: int = 30) -> MlpBasis:
    """Project the model onto its Lipschitz budget in place and return it."""
    model.normalize_spectral(iters)
    return model


def _solve_coeffs(Phi: np.ndarray, y: np.ndarray, ridge: float) -> np.ndarray:
    """Ridge-damped normal equations for stacked (n, 3, k) basis blocks."""
    k = Phi.shape[2]
    A = Phi.reshape(-1, k)
    b = y.reshape(-1)
    G = A.T @ A
    sv = np.linalg.svd(A, compute_uv=False) if A.shape[0] >= k else np.zeros(k)
    if sv.size < k or sv[-1] < 1.0e-8 * max(1.0, sv[0] if sv.size else 0.0):
        warnings.warn("stacked basis is rank deficient; returning damped solution",
                      RuntimeWarning, stacklevel=3)
    return np.linalg.solve(G + ridge * np.eye(k), A.T @ b)


def fit_coeffs(model: MlpBasis, dataset, ridge: float = 1.0e-6) -> LinearCoeffs:
    """Exact least-squares coefficients for one condition's dataset."""
    if len(dataset.x) < model.k:
        raise DomainError("need at least k samples to fit coefficients")
    Phi = model.phi_batch(dataset.x, dataset.x_r)
    return LinearCoeffs(_solve_coeffs(Phi, np.asarray(dataset.y, dtype=float), ridge))


@dataclass
class TrainReport:
    train_loss: np.ndarray
    val_loss: np.ndarray
    a_init: np.ndarray
    P_meta: np.ndarray
    spectral: np.ndarray
    meta: dict = field(default_factory=dict)


def _loss_and_grads(model: MlpBasis, Z, Y, a):
    """Mean squared residual and weight gradients for one condition batch.

    Z is raw (n, 2d) input, Y the (n, 3) residuals, a the fixed (k,)
    coefficients.  Backprop treats the output as n stacked (3, k) blocks
    contracted with a.
    """
    n = Z.shape[0]
    H = model._standardize(Z)
    acts = [H]
    masks = []
    for W in model.weights[:-1]:
        H = H @ W.T
        mask = H > 0.0
        H = H * mask
        acts.append(H)
        masks.append(mask)
    out = H @ model.weights[-1].T
    Phi = out.reshape(n, 3, model.k)
    R = Phi @ a - Y
    loss = float(np.sum(R * R) / n)
    # d loss / d out = 2/n * r a^T per sample.
    G_out = (2.0 / n) * np.einsum("ni,j->nij", R, a).reshape(n, -1)
    grads = [None] * model.n_layers
    delta = G_out
    for i in range(model.n_layers - 1, -1, -1):
        grads[i] = delta.T @ acts[i]
        if i > 0:
            delta = (delta @ model.weights[i]) * masks[i - 1]
    return loss, grads


def _condition_loss(model, Z, Y, a):
    Phi = model.forward_batch(Z).reshape(len(Z), 3, model.k)
    R = Phi @ a - Y
    return float(np.sum(R * R) / len(Z))


def _terminal_covariance(model, Z_list, dt, sigma, q, r, p0):
    """Covariance of a forgetting recursive least-squares pass over all data."""
    k = model.k
    P = p0 * np.eye(k)
    decay = np.exp(-2.0 * sigma * dt)
    for Z in Z_list:
        Phi = model.forward_batch(Z).reshape(len(Z), 3, k)
        for ph in Phi:
            P = decay * P + q * dt * np.eye(k)
            S = ph @ P @ ph.T + (r / dt) * np.eye(3)
            G = P @ ph.T @ np.linalg.inv(S)
            P = (np.eye(k) - G @ ph) @ P
            P = 0.5 * (P + P.T)
    return P


def train_meta(
    datasets: list,
    basis_cfg: BasisConfig | None = None,
    train_cfg: TrainConfig | None = None,
    cov_params: dict | None = None,
    dataset_hash: str = "",
):
    """Alternating minimization over the shared basis and per-condition heads.

    Returns (model, coeffs, report): the basis, one LinearCoeffs per
    condition (the held-out condition fitted post hoc), and the training
    report with loss history, a_init, and terminal covariance.
    """
    basis_cfg = basis_cfg or BasisConfig()
    train_cfg = train_cfg or TrainConfig()
    rng = np.random.default_rng(train_cfg.seed)
    Z_list = [np.hstack([d.x, d.x_r]) for d in datasets]
    Y_list = [np.asarray(d.y, dtype=float) for d in datasets]
    n_cond = len(Z_list)
    val_idx = train_cfg.val_condition
    train_ids = [i for i in range(n_cond) if i != val_idx]
    if not train_ids:
        raise DomainError("no training conditions left")

    model = MlpBasis.initialize(basis_cfg, rng)
    Z_all = np.vstack([Z_list[i] for i in train_ids])
    scale = Z_all.std(axis=0)
    scale[scale < 1.0e-6] = 1.0
    model.set_normalization(Z_all.mean(axis=0), scale)
    model.normalize_spectral(train_cfg.power_iters)

    velocity = [np.zeros_like(W) for W in model.weights]
    coeffs = np.zeros((n_cond, basis_cfg.k))
    train_hist, val_hist = [], []
    lr = train_cfg.learning_rate

    for epoch in range(train_cfg.epochs):
        # Shrunk coefficient refit for the training conditions.
        for i in train_ids:
            Phi = model.phi_batch(datasets[i].x, datasets[i].x_r)
            coeffs[i] = _solve_coeffs(Phi, Y_list[i],
                                      train_cfg.ridge_train * len(Phi))
        # Minibatch SGD with momentum on the shared weights.
        order = [(i, s) for i in train_ids
                 for s in range(0, len(Z_list[i]), train_cfg.batch_size)]
        perm = rng.permutation(len(order))
        for pi in perm:
            i, s = order[pi]
            sl = slice(s, s + train_cfg.batch_size)
            _, grads = _loss_and_grads(model, Z_list[i][sl], Y_list[i][sl], coeffs[i])
            if train_cfg.grad_clip > 0.0:
                gn = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
                if gn > train_cfg.grad_clip:
                    grads = [g * (train_cfg.grad_clip / gn) for g in grads]
            for j in range(model.n_layers):
                velocity[j] = train_cfg.momentum * velocity[j] - lr * grads[j]
                model.weights[j] = model.weights[j] + velocity[j]
            model.normalize_spectral(train_cfg.step_project_iters)
        model.normalize_spectral(train_cfg.power_iters)
        lr *= train_cfg.lr_decay

        losses = [_condition_loss(model, Z_list[i], Y_list[i], coeffs[i]) for i in train_ids]
        epoch_loss = float(np.mean(losses))
        if not np.isfinite(epoch_loss):
            raise DivergenceError(f"training loss diverged at epoch {epoch}")
        train_hist.append(epoch_loss)
        if val_idx is not None:
            Phi = model.phi_batch(datasets[val_idx].x, datasets[val_idx].x_r)
            coeffs[val_idx] = _solve_coeffs(Phi, Y_list[val_idx],
                                            train_cfg.ridge_train * len(Phi))
            val_hist.append(_condition_loss(model, Z_list[val_idx], Y_list[val_idx],
                                            coeffs[val_idx]))

    # Final coefficients for every condition, validation included.
    for i in range(n_cond):
        Phi = model.phi_batch(datasets[i].x, datasets[i].x_r)
        coeffs[i] = _solve_coeffs(Phi, Y_list[i], train_cfg.ridge)

    cov = dict(dt=0.02, sigma=0.1, q=0.01, r=0.05, p0=1.0)
    if cov_params:
        cov.update(cov_params)
    P_meta = _terminal_covariance(model, [Z_list[i] for i in train_ids], **cov)
    report = TrainReport(
        train_loss=np.array(train_hist),
        val_loss=np.array(val_hist),
        a_init=coeffs[train_ids].mean(axis=0),
        P_meta=P_meta,
        spectral=model.spectral_norms(train_cfg.power_iters),
        meta={
            "epochs": train_cfg.epochs,
            "val_condition": val_idx,
            "dataset_hash": dataset_hash,
            "config_hash": config_hash({
                "gamma": basis_cfg.gamma, "k": basis_cfg.k,
                "hidden": list(basis_cfg.hidden), "epochs": train_cfg.epochs,
                "lr": train_cfg.learning_rate, "seed": train_cfg.seed,
            }),
        },
    )
    return model, [LinearCoeffs(c) for c in coeffs], report


def save_model(path, model: MlpBasis, coeffs, report: TrainReport) -> None:
    model.save(
        path,
        extra_meta=report.meta,
        arrays={
            "coeffs": np.array([c.a for c in coeffs]),
            "a_init": report.a_init,
            "P_meta": report.P_meta,
            "train_loss": report.train_loss,
            "val_loss": report.val_loss,
            "spectral": report.spectral,
        },
    )


def load_model(path):
    """(model, meta, extras) with extras holding coeffs/a_init/P_meta arrays."""
    return MlpBasis.load(path)
