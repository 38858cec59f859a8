"""Cross-section deformation regression.

Builds rotation-invariant training samples from paired simulations (local
frames around each cross section, shape-matched 2x2 targets), augments
them by the four frame sign flips that preserve handedness, and trains a
small fully connected network mapping windowed local deformation
gradients to local cross-section transforms.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Frame, Polyline, RankError, principal_normal_near, propagate_frames

HIDDEN = 256
FLIP_SIGNS = (
    (1.0, 1.0, 1.0),
    (1.0, -1.0, -1.0),
    (-1.0, 1.0, -1.0),
    (-1.0, -1.0, 1.0),
)


class TrainDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class CrossSectionSampleRecord:
    """One training pair: windowed local strain against the local transform."""

    window: np.ndarray  # (W, 3, 3) local deformation gradients
    target: np.ndarray  # (2, 2) local cross-section transform
    scene_id: int = 0
    station_z: float = 0.0

    def inputs(self) -> np.ndarray:
        return self.window.reshape(-1)


@dataclass
class RegressorModel:
    """Fully connected regressor; weights[i] maps activations forward."""

    weights: list  # [(W, b), ...] with W of shape (fan_in, fan_out)
    activation: str = "relu"

    @property
    def dims(self) -> tuple:
        return tuple([self.weights[0][0].shape[0]] + [w.shape[1] for w, _ in self.weights])

    @staticmethod
    def create(n_inputs: int, rng) -> "RegressorModel":
        dims = (n_inputs, HIDDEN, HIDDEN, HIDDEN, 4)
        weights = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            W = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out))
            weights.append((W, np.zeros(fan_out)))
        return RegressorModel(weights)

    def copy(self) -> "RegressorModel":
        return RegressorModel([(W.copy(), b.copy()) for W, b in self.weights], self.activation)


@dataclass
class TrainConfig:
    lambda_reg: float = 1.0
    H: np.ndarray = None  # (2, n_fibers) mean fiber-center locations
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 64
    split: float = 0.85
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.split < 1.0):
            raise ValueError("split fraction must lie in (0, 1)")
        if self.lambda_reg < 0.0:
            raise ValueError("lambda_reg must be non-negative")
        if self.H is not None:
            self.H = np.asarray(self.H, dtype=float)
            if self.H.ndim != 2 or self.H.shape[0] != 2:
                raise ValueError("H must be a 2 x n_fibers matrix")

    def metric(self) -> np.ndarray:
        """Symmetric 2x2 weighting combining both loss terms."""
        M = np.eye(2)
        if self.H is not None and self.lambda_reg > 0.0:
            M = M + self.lambda_reg * (self.H @ self.H.T)
        return M


# --- shape matching ------------------------------------------------------------

def match_cross_section(p_yarn, p_fiber) -> np.ndarray:
    """Least-squares 2x2 map sending centered yarn points to fiber points."""
    Q = np.asarray(p_yarn, dtype=float)
    P = np.asarray(p_fiber, dtype=float)
    if Q.shape != P.shape or Q.shape[0] < 2 or Q.shape[1] != 2:
        raise ValueError("need matching 2D clouds with at least 2 points")
    Qc = Q - Q.mean(axis=0)
    Pc = P - P.mean(axis=0)
    A = Qc.T @ Qc
    evals = np.linalg.eigvalsh(A)
    if evals[0] <= 1e-12 * max(evals[-1], 1e-300):
        raise RankError("cross-section points are (nearly) collinear")
    return np.linalg.solve(A, Qc.T @ Pc).T


# --- localization ---------------------------------------------------------------

def window_indices(center: int, half: int, n_edges: int) -> np.ndarray:
    idx = np.arange(center - half, center + half + 1)
    return np.clip(idx, 0, n_edges - 1)


def local_frames(centerline: Polyline, center: int, W: int):
    """Window frames around an edge: central principal-normal frame,
    propagated by minimal rotations to the neighbors."""
    if W % 2 != 1 or W < 1:
        raise ValueError("window size must be odd and positive")
    tans = centerline.tangents()
    n_edges = centerline.n_edges
    idx = window_indices(center, W // 2, n_edges)
    t0 = tans[center]
    seed = min(max(center, 1), max(centerline.n_vertices - 2, 1))
    n0 = principal_normal_near(centerline, seed, tangent=t0)
    central = Frame(t0, n0, np.cross(t0, n0))
    frames, _ = propagate_frames(tans[idx], int(np.nonzero(idx == center)[0][0]), central)
    return frames, idx, central


def localize_inputs(centerline: Polyline, frames_alpha, F_edges, center: int, W: int):
    """Local window inputs and the 2D change-of-frame at the center.

    Returns (window (W,3,3), S (2,2)) where S re-expresses cross-section
    coordinates from the simulation frame into the local frame.
    """
    frames, idx, central = local_frames(centerline, center, W)
    F_edges = np.asarray(F_edges, dtype=float)
    window = np.stack([fr.matrix().T @ F_edges[e] for fr, e in zip(frames, idx)])
    fa = frames_alpha[center]
    S = np.array(
        [
            [np.dot(central.n, fa.n), np.dot(central.n, fa.b)],
            [np.dot(central.b, fa.n), np.dot(central.b, fa.b)],
        ]
    )
    return window, S


def localize_window(
    centerline: Polyline,
    frames_alpha,
    F_edges,
    T_edges,
    center: int,
    W: int,
    scene_id: int = 0,
) -> CrossSectionSampleRecord:
    """Build one training record at an edge-centered cross section."""
    window, S = localize_inputs(centerline, frames_alpha, F_edges, center, W)
    T = np.asarray(T_edges, dtype=float)[center]
    t_local = S @ T @ S.T
    arc = centerline.arc_lengths()
    z = 0.5 * (arc[center] + arc[center + 1])
    return CrossSectionSampleRecord(window, t_local, scene_id, z)


def augment(record: CrossSectionSampleRecord) -> list:
    """The four handedness-preserving frame sign flips of a record.

    Flipping (t, n, b) signs k-wise scales the local gradient rows and
    conjugates the target by the corresponding 2D sign matrix; the first
    output is the record itself.
    """
    out = []
    for st, sn, sb in FLIP_SIGNS:
        scale = np.array([st, sn, sb])[None, :, None]
        window = record.window * scale
        S2 = np.diag([sn, sb])
        target = S2 @ record.target @ S2
        out.append(
            CrossSectionSampleRecord(window, target, record.scene_id, record.station_z)
        )
    return out


# --- network -------------------------------------------------------------------

def _forward_cached(model: RegressorModel, X: np.ndarray):
    acts = [X]
    z = X
    for i, (W, b) in enumerate(model.weights):
        z = z @ W + b
        if i < len(model.weights) - 1:
            z = np.maximum(z, 0.0)
        acts.append(z)
    return acts


def forward(model: RegressorModel, inputs) -> np.ndarray:
    """Evaluate the network on one window; returns the 2x2 local transform."""
    x = np.asarray(inputs, dtype=float).reshape(-1)
    if x.shape[0] != model.dims[0]:
        raise ValueError(f"expected {model.dims[0]} inputs, got {x.shape[0]}")
    y = _forward_cached(model, x[None, :])[-1][0]
    return y.reshape(2, 2)


def forward_batch(model: RegressorModel, X: np.ndarray) -> np.ndarray:
    return _forward_cached(model, X)[-1]


def loss(model: RegressorModel, X: np.ndarray, Y: np.ndarray, cfg: TrainConfig) -> float:
    """Mean squared transform error plus the fiber-location penalty."""
    pred = forward_batch(model, X)
    return _loss_from_pred(pred, Y, cfg.metric())


def _loss_from_pred(pred: np.ndarray, Y: np.ndarray, M: np.ndarray) -> float:
    delta = (pred - Y).reshape(-1, 2, 2)
    weighted = np.einsum("nij,jk,nik->n", delta, M, delta)
    return float(weighted.mean())


def parameter_loss(model: RegressorModel, X: np.ndarray, Y: np.ndarray) -> float:
    """Plain mean squared transform error (no location penalty)."""
    pred = forward_batch(model, X)
    return float(((pred - Y) ** 2).sum(axis=1).mean())


def loss_gradients(model: RegressorModel, X: np.ndarray, Y: np.ndarray, cfg: TrainConfig):
    """Backpropagated gradients of the training loss; returns (loss, grads)."""
    M = cfg.metric()
    acts = _forward_cached(model, X)
    pred = acts[-1]
    n = X.shape[0]
    delta = (pred - Y).reshape(-1, 2, 2)
    value = _loss_from_pred(pred, Y, M)
    dy = (2.0 / n) * np.einsum("nij,jk->nik", delta, M).reshape(-1, 4)
    grads = []
    grad = dy
    for i in reversed(range(len(model.weights))):
        W, _ = model.weights[i]
        a_in = acts[i]
        gW = a_in.T @ grad
        gb = grad.sum(axis=0)
        grads.append((gW, gb))
        if i > 0:
            grad = (grad @ W.T) * (acts[i] > 0.0)
    grads.reverse()
    return value, grads


@dataclass
class TrainMetrics:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = np.inf


def split_dataset(n: int, split: float, rng) -> tuple:
    """Seeded shuffle split; returns (train_idx, val_idx)."""
    order = rng.permutation(n)
    n_train = int(round(n * split))
    return order[:n_train], order[n_train:]


def train(X: np.ndarray, Y: np.ndarray, cfg: TrainConfig):
    """Adam-optimized fit; returns (best-validation model, metrics)."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float).reshape(X.shape[0], 4)
    if X.shape[0] == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    model = RegressorModel.create(X.shape[1], rng)
    tr, va = split_dataset(X.shape[0], cfg.split, rng)
    Xt, Yt = X[tr], Y[tr]
    Xv, Yv = X[va], Y[va]
    m_state = [(np.zeros_like(W), np.zeros_like(b)) for W, b in model.weights]
    v_state = [(np.zeros_like(W), np.zeros_like(b)) for W, b in model.weights]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    t = 0
    metrics = TrainMetrics()
    best = model.copy()
    for epoch in range(cfg.epochs):
        order = rng.permutation(Xt.shape[0])
        epoch_losses = []
        for start in range(0, Xt.shape[0], cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            value, grads = loss_gradients(model, Xt[sel], Yt[sel], cfg)
            epoch_losses.append(value)
            t += 1
            new_weights = []
            for i, ((W, b), (gW, gb)) in enumerate(zip(model.weights, grads)):
                mW, mb = m_state[i]
                vW, vb = v_state[i]
                mW = beta1 * mW + (1 - beta1) * gW
                mb = beta1 * mb + (1 - beta1) * gb
                vW = beta2 * vW + (1 - beta2) * gW**2
                vb = beta2 * vb + (1 - beta2) * gb**2
                m_state[i] = (mW, mb)
                v_state[i] = (vW, vb)
                corr1 = 1 - beta1**t
                corr2 = 1 - beta2**t
                W = W - cfg.learning_rate * (mW / corr1) / (np.sqrt(vW / corr2) + eps)
                b = b - cfg.learning_rate * (mb / corr1) / (np.sqrt(vb / corr2) + eps)
                new_weights.append((W, b))
            model.weights = new_weights
        tl = float(np.mean(epoch_losses))
        vl = loss(model, Xv, Yv, cfg) if Xv.shape[0] else tl
        if not (np.isfinite(tl) and np.isfinite(vl)):
            raise TrainDivergedError(epoch)
        metrics.train_loss.append(tl)
        metrics.val_loss.append(vl)
        if vl < metrics.best_val:
            metrics.best_val = vl
            metrics.best_epoch = epoch
            best = model.copy()
    return best, metrics


def predict_T(
    model: RegressorModel, centerline: Polyline, frames_alpha, F_edges, station: int, W: int
) -> np.ndarray:
    """Cross-section transform at an edge, mapped back to the simulation frame."""
    window, S = localize_inputs(centerline, frames_alpha, F_edges, station, W)
    t_local = forward(model, window.reshape(-1))
    return S.T @ t_local @ S


# --- dataset and model files ------------------------------------------------------

@dataclass
class Dataset:
    X: np.ndarray  # (N, 9W)
    Y: np.ndarray  # (N, 4)
    meta_cols: np.ndarray  # (N, 2) scene id, station z
    window: int
    n_fibers: int
    H: np.ndarray
    raw_count: int
    seed: int = 0
    meta: dict = field(default_factory=dict)


def dataset_from_records(records, window: int, n_fibers: int, H, raw_count: int, seed=0, meta=None):
    X = np.array([r.inputs() for r in records])
    Y = np.array([r.target.reshape(-1) for r in records])
    mc = np.array([[r.scene_id, r.station_z] for r in records])
    return Dataset(X, Y, mc, window, n_fibers, np.asarray(H, dtype=float), raw_count, seed, meta or {})


def write_dataset(path, ds: Dataset) -> None:
    with open(path, "wb") as fh:
        head = ["DATASET 1"]
        for key in sorted(ds.meta):
            head.append(f"META {key} {ds.meta[key]}")
        head.append(f"SEED {ds.seed}")
        head.append(f"WINDOW {ds.window}")
        head.append(f"FIBERS {ds.n_fibers}")
        head.append(f"RAW {ds.raw_count}")
        head.append(f"RECORDS {ds.X.shape[0]}")
        head.append("H " + " ".join(f"{x:.17g}" for x in ds.H.reshape(-1)))
        head.append("DATA")
        fh.write(("\n".join(head) + "\n").encode())
        block = np.hstack([ds.X, ds.Y, ds.meta_cols]).astype("<f8")
        fh.write(block.tobytes())


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.index(b"DATA\n") + len(b"DATA\n")
    lines = raw[:end].decode().splitlines()
    meta = {}
    fields = {}
    for ln in lines:
        if ln.startswith("META "):
            _, key, val = ln.split(" ", 2)
            meta[key] = val
        elif " " in ln:
            key, val = ln.split(" ", 1)
            fields[key] = val
    window = int(fields["WINDOW"])
    n_fibers = int(fields["FIBERS"])
    n_records = int(fields["RECORDS"])
    H = np.array([float(x) for x in fields["H"].split()]).reshape(2, n_fibers)
    width = 9 * window + 4 + 2
    block = np.frombuffer(raw[end:], dtype="<f8").reshape(n_records, width)
    return Dataset(
        X=block[:, : 9 * window].copy(),
        Y=block[:, 9 * window : 9 * window + 4].copy(),
        meta_cols=block[:, 9 * window + 4 :].copy(),
        window=window,
        n_fibers=n_fibers,
        H=H,
        raw_count=int(fields["RAW"]),
        seed=int(fields.get("SEED", 0)),
        meta=meta,
    )


def write_model(path, model: RegressorModel, window: int, meta: dict = None) -> None:
    with open(path, "wb") as fh:
        head = ["MODEL 1"]
        for key in sorted(meta or {}):
            head.append(f"META {key} {meta[key]}")
        head.append("DIMS " + " ".join(str(d) for d in model.dims))
        head.append(f"ACTIVATION {model.activation}")
        head.append(f"WINDOW {window}")
        head.append("BINARY")
        fh.write(("\n".join(head) + "\n").encode())
        for W, b in model.weights:
            fh.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def read_model(path):
    """Returns (model, window, meta)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.index(b"BINARY\n") + len(b"BINARY\n")
    meta = {}
    dims = None
    window = None
    activation = "relu"
    for ln in raw[:end].decode().splitlines():
        if ln.startswith("META "):
            _, key, val = ln.split(" ", 2)
            meta[key] = val
        elif ln.startswith("DIMS "):
            dims = [int(x) for x in ln.split()[1:]]
        elif ln.startswith("ACTIVATION "):
            activation = ln.split()[1]
        elif ln.startswith("WINDOW "):
            window = int(ln.split()[1])
    buf = np.frombuffer(raw[end:], dtype="<f8")
    weights = []
    off = 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        W = buf[off : off + fan_in * fan_out].reshape(fan_in, fan_out).copy()
        off += fan_in * fan_out
        b = buf[off : off + fan_out].copy()
        off += fan_out
        weights.append((W, b))
    return RegressorModel(weights, activation), window, meta
