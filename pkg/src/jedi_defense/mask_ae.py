"""Sparse autoencoder that completes kernel maps into patch-shaped masks.

One sigmoid hidden layer (100 units by default) on a fixed ``G x G`` grid.
The objective is

    (1/N) * sum_n 0.5 * ||out_n - target_n||^2  +  beta * sum_j KL(rho || rho_hat_j)

with ``rho_hat_j`` the batch-mean activation of hidden unit ``j``. Training
is full-batch gradient descent; a step that would raise the loss is
rejected and the learning rate halved, so the loss history is non-increasing.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from jedi_defense.errors import ModelError, TrainingError
from jedi_defense.kernels import KernelMap, kernels_to_mask

FORMAT_VERSION = "jedi-sae/1"
DEFAULT_GRID = 64
DEFAULT_HIDDEN = 100
SPARSITY_PROPORTION = 0.15
SPARSITY_REGULARIZATION = 4.0
DEFAULT_EPOCHS = 500
DEFAULT_LEARNING_RATE = 0.5
# step-size growth after an accepted step; a rejected step halves it
LR_GROWTH = 1.05
RHO_CLAMP = 1e-6
DROPOUT = 0.3
SPURIOUS = 0.02
PARAM_NAMES = ("W1", "b1", "W2", "b2")


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split form avoids overflow in exp for large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class SparseAEModel:
    grid: int
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    sparsity_proportion: float = SPARSITY_PROPORTION
    sparsity_regularization: float = SPARSITY_REGULARIZATION
    epochs_trained: int = 0
    history: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        d, h = self.input_dim, self.hidden_dim
        if self.W1.shape != (h, d) or self.W2.shape != (d, h) or self.b1.shape != (h,) or self.b2.shape != (d,):
            raise ModelError(
                f"inconsistent shapes W1{self.W1.shape} b1{self.b1.shape} W2{self.W2.shape} b2{self.b2.shape}"
            )

    @property
    def input_dim(self) -> int:
        return self.grid * self.grid

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def replace_params(self, params: dict[str, np.ndarray]) -> "SparseAEModel":
        return SparseAEModel(
            grid=self.grid,
            sparsity_proportion=self.sparsity_proportion,
            sparsity_regularization=self.sparsity_regularization,
            epochs_trained=self.epochs_trained,
            history=list(self.history),
            **params,
        )

    def is_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params().values())

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Hidden activations and reconstructions for rows of ``x`` (N x G*G)."""
        hidden = sigmoid(x @ self.W1.T + self.b1)
        return hidden, sigmoid(hidden @ self.W2.T + self.b2)

    def to_json(self) -> dict:
        return {
            "format": FORMAT_VERSION,
            "grid": self.grid,
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "sparsity_proportion": self.sparsity_proportion,
            "sparsity_regularization": self.sparsity_regularization,
            "activation": "sigmoid",
            "epochs_trained": self.epochs_trained,
            "history": [float(v) for v in self.history],
            "W1": self.W1.ravel().tolist(),
            "b1": self.b1.tolist(),
            "W2": self.W2.ravel().tolist(),
            "b2": self.b2.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "SparseAEModel":
        if data.get("format") != FORMAT_VERSION:
            raise ModelError(f"unsupported model format {data.get('format')!r}")
        d, h = int(data["input_dim"]), int(data["hidden_dim"])
        grid = int(data["grid"])
        if grid * grid != d:
            raise ModelError("grid and input_dim disagree")
        return cls(
            grid=grid,
            W1=np.asarray(data["W1"], dtype=np.float64).reshape(h, d),
            b1=np.asarray(data["b1"], dtype=np.float64),
            W2=np.asarray(data["W2"], dtype=np.float64).reshape(d, h),
            b2=np.asarray(data["b2"], dtype=np.float64),
            sparsity_proportion=float(data["sparsity_proportion"]),
            sparsity_regularization=float(data["sparsity_regularization"]),
            epochs_trained=int(data.get("epochs_trained", 0)),
            history=[float(v) for v in data.get("history", [])],
        )

    def save(self, path) -> None:
        with open(os.fspath(path), "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "SparseAEModel":
        with open(os.fspath(path)) as fh:
            try:
                data = json.load(fh)
            except ValueError as exc:
                raise ModelError(f"{path}: not a model file ({exc})") from exc
        return cls.from_json(data)


@dataclass
class MaskTrainingSet:
    targets: np.ndarray  # (n, G, G) bool
    inputs: np.ndarray  # (n, G, G) bool
    seed: int

    def __len__(self) -> int:
        return self.targets.shape[0]

    @property
    def grid(self) -> int:
        return self.targets.shape[1]

    def matrices(self) -> tuple[np.ndarray, np.ndarray]:
        n = len(self)
        return (
            self.inputs.reshape(n, -1).astype(np.float64),
            self.targets.reshape(n, -1).astype(np.float64),
        )


def _random_shape(grid: int, rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    cells = grid * grid
    lo, hi = max(1, math.ceil(0.01 * cells)), math.floor(0.25 * cells)
    while True:
        area = rng.uniform(0.01, 0.25) * cells
        aspect = math.exp(rng.uniform(-0.5, 0.5))
        sh = min(grid, max(1, int(round(math.sqrt(area / aspect)))))
        sw = min(grid, max(1, int(round(math.sqrt(area * aspect)))))
        y0 = int(rng.integers(0, grid - sh + 1))
        x0 = int(rng.integers(0, grid - sw + 1))
        if rng.random() < 0.5:
            shape = (yy >= y0) & (yy < y0 + sh) & (xx >= x0) & (xx < x0 + sw)
        else:
            cy, cx = y0 + (sh - 1) / 2.0, x0 + (sw - 1) / 2.0
            shape = ((yy - cy) / (sh / 2.0)) ** 2 + ((xx - cx) / (sw / 2.0)) ** 2 <= 1.0
        if lo <= shape.sum() <= hi:
            return shape


def corrupt(targets: np.ndarray, rng: np.random.Generator, dropout: float = DROPOUT, spurious: float = SPURIOUS) -> np.ndarray:
    keep = rng.random(targets.shape) >= dropout
    noise = rng.random(targets.shape) < spurious
    return (targets & keep) | noise


def generate_training_masks(count: int, grid: int = DEFAULT_GRID, seed: int = 0) -> MaskTrainingSet:
    """Random filled rectangles/ellipses (1%-25% of the grid) and their corrupted copies."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:grid, 0:grid]
    targets = np.stack([_random_shape(grid, rng, yy, xx) for _ in range(count)])
    return MaskTrainingSet(targets=targets, inputs=corrupt(targets, rng), seed=seed)


def init_model(
    grid: int,
    hidden: int = DEFAULT_HIDDEN,
    seed: int = 0,
    sparsity_proportion: float = SPARSITY_PROPORTION,
    sparsity_regularization: float = SPARSITY_REGULARIZATION,
) -> SparseAEModel:
    rng = np.random.default_rng(seed)
    d = grid * grid
    limit = math.sqrt(6.0 / (d + hidden))
    return SparseAEModel(
        grid=grid,
        W1=rng.uniform(-limit, limit, (hidden, d)),
        b1=np.zeros(hidden),
        W2=rng.uniform(-limit, limit, (d, hidden)),
        b2=np.zeros(d),
        sparsity_proportion=sparsity_proportion,
        sparsity_regularization=sparsity_regularization,
    )


def kl_sparsity(rho: float, rho_hat: np.ndarray) -> np.ndarray:
    """Per-unit KL(rho || rho_hat) with ``rho_hat`` clamped away from 0 and 1."""
    r = np.clip(rho_hat, RHO_CLAMP, 1.0 - RHO_CLAMP)
    return rho * np.log(rho / r) + (1.0 - rho) * np.log((1.0 - rho) / (1.0 - r))


def loss_and_grads(model: SparseAEModel, x: np.ndarray, y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    n = x.shape[0]
    rho, beta = model.sparsity_proportion, model.sparsity_regularization
    hidden, out = model.forward(x)
    rho_hat = hidden.mean(axis=0)
    err = out - y
    loss = 0.5 * float(np.sum(err * err)) / n + beta * float(np.sum(kl_sparsity(rho, rho_hat)))

    delta_out = err * out * (1.0 - out) / n
    r = np.clip(rho_hat, RHO_CLAMP, 1.0 - RHO_CLAMP)
    inside = (rho_hat > RHO_CLAMP) & (rho_hat < 1.0 - RHO_CLAMP)
    dkl = np.where(inside, beta * (-rho / r + (1.0 - rho) / (1.0 - r)), 0.0) / n
    delta_hidden = (delta_out @ model.W2 + dkl) * hidden * (1.0 - hidden)
    grads = {
        "W1": delta_hidden.T @ x,
        "b1": delta_hidden.sum(axis=0),
        "W2": delta_out.T @ hidden,
        "b2": delta_out.sum(axis=0),
    }
    return loss, grads


def train_sae(
    data: MaskTrainingSet,
    epochs: int = DEFAULT_EPOCHS,
    learning_rate: float = DEFAULT_LEARNING_RATE,
    seed: int = 0,
    hidden: int = DEFAULT_HIDDEN,
    sparsity_proportion: float = SPARSITY_PROPORTION,
    sparsity_regularization: float = SPARSITY_REGULARIZATION,
    progress=None,
    lr_growth: float = LR_GROWTH,
) -> SparseAEModel:
    """Full-batch descent from a seeded Glorot-uniform start.

    A step that would raise the loss is rejected and the step size halved;
    an accepted step grows it by ``lr_growth``. ``model.history`` holds the loss at the initial point and after each
    accepted step. ``progress(epoch, loss, lr)``, if given, is called every epoch.
    """
    if len(data) == 0:
        raise ValueError("training set is empty")
    model = init_model(data.grid, hidden, seed, sparsity_proportion, sparsity_regularization)
    x, y = data.matrices()
    loss, grads = loss_and_grads(model, x, y)
    if not math.isfinite(loss):
        raise TrainingError("initial loss is not finite", epoch=0)
    history = [loss]
    lr = learning_rate
    params = model.params()
    for epoch in range(1, epochs + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            candidate = model.replace_params({k: params[k] - lr * grads[k] for k in PARAM_NAMES})
            cand_loss, cand_grads = loss_and_grads(candidate, x, y)
        if not math.isfinite(cand_loss):
            raise TrainingError(f"loss became non-finite at epoch {epoch}", epoch=epoch)
        if cand_loss <= loss:
            model, params, loss, grads = candidate, candidate.params(), cand_loss, cand_grads
            history.append(loss)
            lr *= lr_growth
        else:
            lr *= 0.5
        if progress is not None:
            progress(epoch, loss, lr)
    model.epochs_trained = epochs
    model.history = history
    return model


def resample_nearest(grid: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resampling by pixel-centre mapping."""
    src_h, src_w = grid.shape
    h, w = shape
    rows = np.minimum(((np.arange(h) + 0.5) * src_h / h).astype(int), src_h - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * src_w / w).astype(int), src_w - 1)
    return grid[np.ix_(rows, cols)]


def refine_grid(model: SparseAEModel, grid: np.ndarray) -> np.ndarray:
    """Complete a binary ``G x G`` (or batch ``N x G x G``) grid; output cells are ``activation > 0.5``."""
    if not model.is_finite():
        raise ModelError("model has non-finite weights")
    g = np.asarray(grid)
    batch = g.reshape(-1, model.input_dim).astype(np.float64)
    _, out = model.forward(batch)
    return (out > 0.5).reshape(g.shape)


def refine_mask(model: SparseAEModel, kernels: KernelMap) -> np.ndarray:
    """Run the AE on a kernel map and project the completed grid to an image mask."""
    if kernels.grid.size == 0:
        raise ValueError("empty kernel map")
    small = resample_nearest(kernels.grid, (model.grid, model.grid))
    refined = refine_grid(model, small)
    back = resample_nearest(refined, kernels.grid.shape)
    return kernels_to_mask(kernels.with_grid(back))
