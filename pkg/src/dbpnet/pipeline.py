"""Synthetic data generation, patch pairing, training, checkpointing,
arbitrary-scale inference, and evaluation.

Everything downstream of a (config, seed) pair is bit-reproducible: the
master seed derives per-purpose child seeds, batches are drawn without
replacement from one generator, and gradient/metric reductions run in
fixed index order.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, fields
from functools import reduce

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, ParseError, TrainingDivergedError
from .geometry import (
    Plane,
    Sphere,
    Torus,
    farthest_point_sample,
    knn,
    normalize_patch,
    denormalize_patch,
    random_subsample,
)
from .losses import total_loss
from .metrics import MetricsReport, chamfer_distance, hausdorff, p2f_mean, uniformity
from .network import ModelParams, dbpnet_forward, init_model_params


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    n_points: int = 64
    up_ratio: int = 4
    channels: int = 32
    k_edge: int = 8
    uniform_weight: float = 0.2
    uniform_k: int = 5
    learning_rate: float = 1e-3
    steps: int = 2000
    batch_size: int = 4
    seed: int = 0
    surfaces: tuple = ("sphere", "torus")
    patches: int = 200
    dense_points: int = 4096
    eval_every: int = 100
    checkpoint_path: str = "model.ckpt"
    log_path: str = "train_log.csv"
    use_feature_bp: bool = True
    use_coordinate_bp: bool = True
    bp_iterations: int = 1

    def validate(self):
        if self.n_points < self.k_edge:
            raise ConfigError(
                f"n_points={self.n_points} must be >= k_edge={self.k_edge}"
            )
        if self.up_ratio < 2:
            raise ConfigError(f"up_ratio={self.up_ratio} must be >= 2")
        for name in ("channels", "k_edge", "steps", "batch_size", "patches",
                     "dense_points", "eval_every", "uniform_k"):
            if getattr(self, name) < (0 if name == "steps" else 1):
                raise ConfigError(f"{name}={getattr(self, name)} must be positive")
        if not self.surfaces:
            raise ConfigError("at least one surface kind is required")
        if self.bp_iterations < 1:
            raise ConfigError("bp_iterations must be at least 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        return self


def _parse_value(kind, raw, key):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is tuple:
            return tuple(part.strip() for part in raw.split(",") if part.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {key}: cannot parse {raw!r}") from exc


def load_config(path):
    """Read a flat `key = value` config file; `#` starts a comment.

    Unknown keys are an error so typos never pass silently.
    """
    defaults = TrainConfig()
    types = {f.name: type(getattr(defaults, f.name)) for f in fields(TrainConfig)}
    config = TrainConfig()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ParseError(f"{path}:{lineno}: expected key = value")
            key, _, value = text.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in types:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            setattr(config, key, _parse_value(types[key], value, key))
    return config.validate()


# ---------------------------------------------------------------------------
# Synthetic surfaces and patch pairs
# ---------------------------------------------------------------------------

_DEFAULT_SURFACES = {
    "sphere": lambda: Sphere(1.0),
    "torus": lambda: Torus(1.0, 0.3),
    "plane": lambda: Plane(1.0),
}


def sample_surface(surface, n, rng):
    """n area-uniform samples on an analytic surface."""
    if isinstance(surface, Sphere):
        raw = rng.normal(size=(n, 3))
        local = raw / np.linalg.norm(raw, axis=1, keepdims=True) * surface.radius
        return local + surface.center
    if isinstance(surface, Torus):
        big, small = surface.major_radius, surface.minor_radius
        u = rng.uniform(0.0, 2.0 * np.pi, size=n)
        v = np.empty(n)
        filled = 0
        while filled < n:  # rejection keeps the area measure uniform
            cand = rng.uniform(0.0, 2.0 * np.pi, size=n - filled)
            accept = rng.uniform(size=n - filled) < (big + small * np.cos(cand)) / (
                big + small
            )
            taken = cand[accept]
            v[filled:filled + len(taken)] = taken
            filled += len(taken)
        ring = big + small * np.cos(v)
        local = np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], axis=1)
        if surface.rotation is not None:
            local = local @ surface.rotation.T
        return local + surface.center
    if isinstance(surface, Plane):
        local = np.zeros((n, 3))
        local[:, :2] = rng.uniform(-surface.half_extent, surface.half_extent, size=(n, 2))
        if surface.rotation is not None:
            local = local @ surface.rotation.T
        return local + surface.center
    raise ContractError(f"cannot sample surface of type {type(surface).__name__}")


def gen_surface_cloud(kind, n, seed):
    """Area-uniform synthetic cloud of one of the built-in surface kinds."""
    if kind not in _DEFAULT_SURFACES:
        raise ConfigError(f"unknown surface kind {kind!r}")
    if n < 64:
        raise ContractError(f"gen_surface_cloud: n={n} must be >= 64")
    surface = _DEFAULT_SURFACES[kind]()
    return sample_surface(surface, n, np.random.default_rng(seed)), surface


@dataclass
class Patch:
    """One normalized training pair: sparse input, dense target, and the
    frame that maps both back to world coordinates."""

    input: np.ndarray
    target: np.ndarray
    centroid: np.ndarray
    scale: float
    surface: object = None


def make_patch_pairs(dense, surface, n_points, up_ratio, count, seed):
    """Cut `count` local (input, target) patch pairs out of a dense cloud.

    Seeds come from farthest point sampling; each target is the seed's
    2*up_ratio*n_points nearest points thinned back down by FPS (an even
    target), and each input is a seeded random subsample of its target
    (a non-uniform input). Both are normalized in the input's frame, so
    every input patch is a row subset of its target.
    """
    dense = np.asarray(dense, dtype=np.float64)
    target_size = up_ratio * n_points
    if len(dense) < 4 * target_size:
        raise ContractError(
            f"make_patch_pairs: dense cloud of {len(dense)} points is below "
            f"the 4*up_ratio*n_points = {4 * target_size} minimum"
        )
    rng = np.random.default_rng(seed)
    seeds = farthest_point_sample(dense, count, start=0)
    pairs = []
    for s in seeds:
        local = dense[knn(dense[s][None, :], dense, 2 * target_size)[0]]
        target = local[farthest_point_sample(local, target_size, start=0)]
        picked = random_subsample(target, n_points, int(rng.integers(2**62)))
        normalized, centroid, scale = normalize_patch(picked)
        pairs.append(
            Patch(
                input=normalized,
                target=(target - centroid) / scale,
                centroid=centroid,
                scale=scale,
                surface=surface,
            )
        )
    return pairs


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adaptive-moment optimizer with bias correction."""

    def __init__(self, tensors, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = list(tensors)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]

    def step(self):
        self.step_count += 1
        correct1 = 1.0 - self.beta1**self.step_count
        correct2 = 1.0 - self.beta2**self.step_count
        for t, m, v in zip(self.tensors, self.m, self.v):
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            t.data -= self.lr * (m / correct1) / (np.sqrt(v / correct2) + self.eps)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = "DBPNET-CKPT v1"


@dataclass
class Checkpoint:
    params: ModelParams
    step: int
    rng_state: dict


def save_checkpoint(ckpt, path):
    """Versioned text headers with little-endian float64 payloads; the same
    state always serializes to the same bytes."""
    state = ckpt.rng_state
    inner = state["state"]
    buf = io.BytesIO()

    def line(text):
        buf.write((text + "\n").encode("ascii"))

    line(_CKPT_MAGIC)
    line(f"step {ckpt.step}")
    line(
        f"rng {inner['state']} {inner['inc']} "
        f"{state['has_uint32']} {state['uinteger']}"
    )
    p = ckpt.params
    line(f"hparam n_points {p.n_points}")
    line(f"hparam up_ratio {p.up_ratio}")
    line(f"hparam channels {p.channels}")
    line(f"hparam k_edge {p.k_edge}")
    line(f"hparam use_feature_bp {int(p.use_feature_bp)}")
    line(f"hparam use_coordinate_bp {int(p.use_coordinate_bp)}")
    line(f"hparam bp_iterations {p.bp_iterations}")
    for name, tensor in p.named_tensors():
        dims = " ".join(str(d) for d in tensor.shape)
        line(f"tensor {name} {tensor.ndim} {dims}".rstrip())
        buf.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    line("end")
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    stream = io.BytesIO(data)

    def line():
        raw = stream.readline()
        if not raw:
            raise ParseError(f"{path}: truncated checkpoint")
        return raw.decode("ascii").rstrip("\n")

    if line() != _CKPT_MAGIC:
        raise ParseError(f"{path}: not a dbpnet checkpoint")
    step = int(line().split()[1])
    rng_parts = line().split()[1:]
    rng_state = {
        "bit_generator": "PCG64",
        "state": {"state": int(rng_parts[0]), "inc": int(rng_parts[1])},
        "has_uint32": int(rng_parts[2]),
        "uinteger": int(rng_parts[3]),
    }
    hparams = {}
    position = stream.tell()
    text = line()
    while text.startswith("hparam "):
        _, key, value = text.split()
        hparams[key] = int(value)
        position = stream.tell()
        text = line()
    stream.seek(position)

    params = init_model_params(
        n_points=hparams["n_points"],
        up_ratio=hparams["up_ratio"],
        channels=hparams["channels"],
        k_edge=hparams["k_edge"],
        seed=0,
        use_feature_bp=bool(hparams["use_feature_bp"]),
        use_coordinate_bp=bool(hparams["use_coordinate_bp"]),
        bp_iterations=hparams.get("bp_iterations", 1),
    )
    expected = dict(params.named_tensors())
    seen = set()
    while True:
        text = line()
        if text == "end":
            break
        parts = text.split()
        if parts[0] != "tensor":
            raise ParseError(f"{path}: unexpected checkpoint line {text!r}")
        name = parts[1]
        ndim = int(parts[2])
        shape = tuple(int(d) for d in parts[3:3 + ndim])
        if name not in expected:
            raise ParseError(f"{path}: unknown tensor {name!r}")
        tensor = expected[name]
        if tensor.shape != shape:
            raise ParseError(
                f"{path}: tensor {name} has shape {shape}, expected {tensor.shape}"
            )
        count = int(np.prod(shape)) if shape else 1
        payload = stream.read(count * 8)
        if len(payload) != count * 8:
            raise ParseError(f"{path}: truncated payload for {name}")
        tensor.data = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise ParseError(f"{path}: checkpoint is missing tensors {sorted(missing)}")
    return Checkpoint(params=params, step=step, rng_state=rng_state)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list  # (step, train loss, validation CD) rows


def build_dataset(config, seed):
    """All patch pairs for a config, deterministic in `seed`."""
    rng = np.random.default_rng(seed)
    kinds = config.surfaces
    base = config.patches // len(kinds)
    counts = [base + (1 if i < config.patches % len(kinds) else 0)
              for i in range(len(kinds))]
    pairs = []
    for kind, count in zip(kinds, counts):
        cloud_seed = int(rng.integers(2**62))
        patch_seed = int(rng.integers(2**62))
        if count == 0:
            continue
        points, surface = gen_surface_cloud(kind, config.dense_points, cloud_seed)
        pairs.extend(
            make_patch_pairs(
                points, surface, config.n_points, config.up_ratio, count, patch_seed
            )
        )
    return pairs


def validation_cd(params, pairs):
    """Mean Chamfer distance over held-out pairs, in the normalized frame."""
    values = []
    with ad.no_grad():
        for pair in pairs:
            pred = dbpnet_forward(pair.input, params).data
            values.append(chamfer_distance(pred, pair.target))
    return float(np.mean(values))


def _batch_loss(params, batch, config):
    losses = [
        total_loss(
            dbpnet_forward(pair.input, params),
            Tensor(pair.target),
            uniform_weight=config.uniform_weight,
            uniform_k=config.uniform_k,
        )
        for pair in batch
    ]
    return ad.scale(reduce(ad.add, losses), 1.0 / len(losses))


def prepare_data(config):
    """Patch pairs for a config, already split 80/20 into (train, val).

    The validation pairs are selected by a seed-derived permutation and
    never enter a training batch.
    """
    config.validate()
    root = np.random.default_rng(config.seed)
    data_seed = int(root.integers(2**62))
    split_seed = int(root.integers(2**62))
    pairs = build_dataset(config, data_seed)
    order = np.random.default_rng(split_seed).permutation(len(pairs))
    n_val = max(1, int(round(0.2 * len(pairs))))
    val_pairs = [pairs[i] for i in order[:n_val]]
    train_pairs = [pairs[i] for i in order[n_val:]]
    if not train_pairs:
        raise ConfigError("no training patches left after the validation split")
    return train_pairs, val_pairs


def train(config):
    """Minimize the combined loss over patch batches for a fixed step budget.

    Returns the final checkpoint and the (step, loss, val_cd) log; both are
    also written to the config's paths when set. Raises
    TrainingDivergedError naming the step if the loss goes non-finite.
    """
    config.validate()
    root = np.random.default_rng(config.seed)
    root.integers(2**62)  # data seed, consumed by prepare_data the same way
    root.integers(2**62)  # split seed
    batch_seed = int(root.integers(2**62))

    train_pairs, val_pairs = prepare_data(config)

    params = init_model_params(
        n_points=config.n_points,
        up_ratio=config.up_ratio,
        channels=config.channels,
        k_edge=config.k_edge,
        seed=config.seed,
        use_feature_bp=config.use_feature_bp,
        use_coordinate_bp=config.use_coordinate_bp,
        bp_iterations=config.bp_iterations,
    )
    tensors = params.tensors()
    optimizer = Adam(tensors, lr=config.learning_rate)
    batch_rng = np.random.default_rng(batch_seed)
    batch_size = min(config.batch_size, len(train_pairs))

    probe = train_pairs[:batch_size]
    log = [(0, _probe_loss(params, probe, config), validation_cd(params, val_pairs))]

    for step in range(1, config.steps + 1):
        picks = batch_rng.choice(len(train_pairs), size=batch_size, replace=False)
        batch = [train_pairs[i] for i in picks]
        ad.zero_grads(tensors)
        loss = _batch_loss(params, batch, config)
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise TrainingDivergedError(f"loss became non-finite at step {step}")
        ad.backward(loss, leaves=tensors)
        optimizer.step()
        if step % config.eval_every == 0 or step == config.steps:
            log.append((step, loss_value, validation_cd(params, val_pairs)))

    checkpoint = Checkpoint(
        params=params, step=config.steps, rng_state=batch_rng.bit_generator.state
    )
    if config.checkpoint_path:
        save_checkpoint(checkpoint, config.checkpoint_path)
    if config.log_path:
        write_loss_log(log, config.log_path)
    return TrainResult(checkpoint=checkpoint, log=log)


def _probe_loss(params, pairs, config):
    with ad.no_grad():
        return _batch_loss(params, pairs, config).item()


def write_loss_log(log, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step,loss,val_cd\n")
        for step, loss, val_cd in log:
            fh.write(f"{step},{loss:.17g},{val_cd:.17g}\n")


# ---------------------------------------------------------------------------
# Inference and evaluation
# ---------------------------------------------------------------------------

def upsample_cloud(points, target_factor, checkpoint):
    """Upsample a full cloud by any factor up to the trained ratio.

    The cloud is split into overlapping n_points patches (FPS seeds plus
    kNN gather, then extra patches until every point is covered), each is
    normalized, run through the network, and de-normalized; the merged
    result is thinned by FPS to exactly ceil(target_factor * n) points.
    """
    pts = np.asarray(points, dtype=np.float64)
    params = checkpoint.params
    n = len(pts)
    if target_factor <= 0:
        raise ContractError(f"target_factor={target_factor} must be positive")
    if target_factor > params.up_ratio:
        raise ContractError(
            f"target_factor={target_factor} exceeds the trained ratio "
            f"{params.up_ratio}; retrain with a larger up_ratio"
        )
    if n < params.n_points:
        raise ContractError(
            f"cloud has {n} points, below the patch size {params.n_points}"
        )

    patch_indices = list(split_into_patches(pts, params.n_points))
    merged = []
    with ad.no_grad():
        for idx in patch_indices:
            normalized, centroid, scale = normalize_patch(pts[idx])
            dense = dbpnet_forward(normalized, params).data
            merged.append(denormalize_patch(dense, centroid, scale))
    merged = np.vstack(merged)
    wanted = math.ceil(target_factor * n)
    return merged[farthest_point_sample(merged, wanted, start=0)]


def split_into_patches(points, n_patch, overlap=2.0):
    """Overlapping patch index sets covering every input point.

    Seed count is overlap * n / n_patch (FPS seeds); any point left
    uncovered gets its own patch, so coverage is guaranteed.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    n_seeds = min(n, max(1, math.ceil(overlap * n / n_patch)))
    seeds = farthest_point_sample(pts, n_seeds, start=0)
    patches = [knn(pts[s][None, :], pts, n_patch)[0] for s in seeds]
    covered = np.zeros(n, dtype=bool)
    for idx in patches:
        covered[idx] = True
    while not covered.all():
        orphan = int(np.flatnonzero(~covered)[0])
        idx = knn(pts[orphan][None, :], pts, n_patch)[0]
        patches.append(idx)
        covered[idx] = True
    return patches


def evaluate(pred, target, surface):
    """All four metrics in the frame that normalizes the target cloud."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if len(pred) < 1 or len(target) < 1:
        raise ContractError("evaluate requires nonempty clouds")
    target_n, centroid, scale = normalize_patch(target)
    pred_n = (pred - centroid) / scale
    return MetricsReport(
        cd=chamfer_distance(pred_n, target_n),
        hd=hausdorff(pred_n, target_n),
        p2f_mean=p2f_mean(pred, surface) / scale,
        uniformity=uniformity(pred_n),
    )
