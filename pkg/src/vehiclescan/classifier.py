"""Three-branch vehicle/non-vehicle classifier.

Each anchor is described by three normalized patches: an axis-aligned 64x64
context window, a direction-aligned sub-window covering twice the anchor, and
the anchor footprint itself, both resampled to 32x16.  Branch bodies are
small conv stacks ending in adaptive max pooling; their features concatenate
into a fully connected head with a sigmoid output.  Training runs in two
stages: every branch is pretrained with a temporary head, then the assembled
model is retrained jointly on the same samples.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import netcore as nn
from .candidates import Anchor
from .geometry import OrientedBox
from .raster import ImageStats, Raster, extract_patch

WINDOW_SIZE = 64
PATCH_H = 32
PATCH_W = 16
SUBWINDOW_SCALE = 2.0

BRANCHES = ("window", "subwindow", "anchor")

_FEATURES = {"window": 64 * 4 * 4, "subwindow": 64 * 4 * 2, "anchor": 64 * 4 * 2}


@dataclass(frozen=True)
class BranchInput:
    window: np.ndarray  # (4, 64, 64)
    subwindow: np.ndarray  # (4, 32, 16)
    anchor_patch: np.ndarray  # (4, 32, 16)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch: int = 200
    shuffle: bool = True
    augment: bool = True
    schedule: nn.WarmupSchedule = field(default_factory=nn.WarmupSchedule)
    window_schedule: nn.WarmupSchedule = field(
        default_factory=lambda: nn.WarmupSchedule(start_rate=1e-5, max_rate=1e-4)
    )
    freeze_bodies_stage2: bool = False


@dataclass
class LossLog:
    stage1: dict
    stage2: list


def _window_body(rng, dtype):
    return [
        nn.Conv2d(4, 16, 3, pad=1, rng=rng, dtype=dtype),
        nn.ReLU(),
        nn.MaxPool(2),
        nn.Conv2d(16, 32, 3, pad=1, rng=rng, dtype=dtype),
        nn.ReLU(),
        nn.MaxPool(2),
        nn.Conv2d(32, 64, 3, pad=1, rng=rng, dtype=dtype),
        nn.ReLU(),
        nn.RoiPool(4, 4),
        nn.Flatten(),
    ]


def _patch_body(rng, dtype):
    return [
        nn.Conv2d(4, 16, 3, pad=1, rng=rng, dtype=dtype),
        nn.ReLU(),
        nn.Conv2d(16, 32, 3, pad=1, rng=rng, dtype=dtype),
        nn.ReLU(),
        nn.MaxPool(2),
        nn.Conv2d(32, 64, 3, pad=1, rng=rng, dtype=dtype),
        nn.ReLU(),
        nn.RoiPool(4, 2),
        nn.Flatten(),
    ]


def _head(in_features, rng, dtype):
    return [
        nn.FC(in_features, 256, rng=rng, dtype=dtype),
        nn.ReLU(),
        nn.FC(256, 64, rng=rng, dtype=dtype),
        nn.ReLU(),
        nn.FC(64, 1, rng=rng, dtype=dtype),
        nn.Sigmoid(),
    ]


def _temp_head(in_features, rng, dtype):
    return [
        nn.FC(in_features, 128, rng=rng, dtype=dtype),
        nn.ReLU(),
        nn.FC(128, 32, rng=rng, dtype=dtype),
        nn.ReLU(),
        nn.FC(32, 1, rng=rng, dtype=dtype),
        nn.Sigmoid(),
    ]


class MultiBranchModel:
    def __init__(self, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.bodies = {
            "window": _window_body(rng, dtype),
            "subwindow": _patch_body(rng, dtype),
            "anchor": _patch_body(rng, dtype),
        }
        self.head = _head(sum(_FEATURES.values()), rng, dtype)
        self._splits = np.cumsum([_FEATURES[b] for b in BRANCHES])[:-1]

    def forward_batch(self, xw, xs, xa):
        feats = [
            nn.run_forward(self.bodies["window"], xw),
            nn.run_forward(self.bodies["subwindow"], xs),
            nn.run_forward(self.bodies["anchor"], xa),
        ]
        fused = np.concatenate(feats, axis=1)
        return nn.run_forward(self.head, fused)[:, 0]

    def backward_batch(self, gout, train_bodies: bool = True):
        gfused = nn.run_backward(self.head, gout[:, None])
        if not train_bodies:
            return
        parts = np.split(gfused, self._splits, axis=1)
        for name, g in zip(BRANCHES, parts):
            nn.run_backward(self.bodies[name], g)

    def _param_layers(self, include_bodies=True, include_head=True):
        groups = []
        if include_bodies:
            groups += [(name, self.bodies[name]) for name in BRANCHES]
        if include_head:
            groups.append(("head", self.head))
        for prefix, layers in groups:
            for i, layer in enumerate(layers):
                for pname in layer.params():
                    yield f"{prefix}.{i}.{pname}", layer, pname

    def named_params(self, include_bodies=True, include_head=True) -> dict:
        return {
            name: layer.params()[pname]
            for name, layer, pname in self._param_layers(include_bodies, include_head)
        }

    def named_grads(self, include_bodies=True, include_head=True) -> dict:
        return {
            name: layer.grads()[pname]
            for name, layer, pname in self._param_layers(include_bodies, include_head)
        }

    def save(self, path) -> None:
        nn.save_checkpoint(path, self.named_params())

    @classmethod
    def load(cls, path) -> "MultiBranchModel":
        model = cls(seed=0)
        stored = nn.load_checkpoint(path)
        own = model.named_params()
        if set(stored) != set(own):
            raise ValueError("checkpoint does not match the model architecture")
        for name, arr in stored.items():
            if own[name].shape != arr.shape:
                raise ValueError(f"checkpoint shape mismatch for {name}")
            own[name][...] = arr
        return model


def assemble_inputs(anchor, raster: Raster, stats: ImageStats) -> BranchInput:
    """Extract the three normalized patches for one anchor (or bare box)."""
    box = anchor.box if isinstance(anchor, Anchor) else anchor
    window_box = OrientedBox(box.cx, box.cy, float(WINDOW_SIZE), float(WINDOW_SIZE), 0.0)
    sub_box = OrientedBox(
        box.cx, box.cy, SUBWINDOW_SCALE * box.w, SUBWINDOW_SCALE * box.h, box.theta_deg
    )
    return BranchInput(
        window=extract_patch(raster, window_box, WINDOW_SIZE, WINDOW_SIZE, stats),
        subwindow=extract_patch(raster, sub_box, PATCH_H, PATCH_W, stats),
        anchor_patch=extract_patch(raster, box, PATCH_H, PATCH_W, stats),
    )


def _stack(samples):
    """Batch the three patch sets channels-last for the network."""
    def to_nhwc(key):
        return np.ascontiguousarray(
            np.stack([getattr(s, key) for s in samples]).transpose(0, 2, 3, 1)
        )

    return to_nhwc("window"), to_nhwc("subwindow"), to_nhwc("anchor_patch")


def _flip_batch(arrays, flips):
    out = []
    for a in arrays:
        a = a.copy()
        for i, (fh, fv) in enumerate(flips):
            if fh:
                a[i] = a[i, :, ::-1, :]
            if fv:
                a[i] = a[i, ::-1, :, :]
        out.append(a)
    return out


def _train_epochs(forward, backward, collect_params, collect_grads, data, labels,
                  cfg: TrainConfig, schedule, n_v, n_n, rng, stage_name):
    n = len(labels)
    adam = nn.Adam(collect_params())
    losses = []
    for epoch in range(cfg.epochs):
        rate = nn.warmup_lr(epoch, schedule)
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        flips = (rng.random((n, 2)) < 0.5) if cfg.augment else np.zeros((n, 2), dtype=bool)
        total = 0.0
        for start in range(0, n, cfg.batch):
            idx = order[start : start + cfg.batch]
            batch = [a[idx] for a in data]
            if cfg.augment:
                batch = _flip_batch(batch, flips[idx])
            y = labels[idx]
            try:
                p = forward(batch)
                loss, gp = nn.weighted_bce(p, y, n_v, n_n)
                if not np.isfinite(loss):
                    raise nn.NonFiniteError("non-finite loss")
                backward(gp.astype(batch[0].dtype))
                adam.step(collect_grads(), rate)
            except nn.NonFiniteError as exc:
                raise nn.NonFiniteError(f"{stage_name}: {exc} at epoch {epoch}") from exc
            total += loss * len(idx)
        losses.append(total / n)
    return losses


def train(model: MultiBranchModel, samples, cfg: TrainConfig, seed: int = 0) -> LossLog:
    """Two-stage training: per-branch pretraining, then joint fine-tuning."""
    labels = np.array([int(lbl) for _, lbl in samples], dtype=np.int64)
    n_v = int((labels == 1).sum())
    n_n = int((labels == 0).sum())
    if n_v == 0 or n_n == 0:
        raise ValueError("training set must contain both classes")
    xw, xs, xa = _stack([bi for bi, _ in samples])
    data_by_branch = {"window": xw, "subwindow": xs, "anchor": xa}

    rng = np.random.default_rng(seed)
    stage1: dict = {}
    for name in BRANCHES:
        body = model.bodies[name]
        temp = _temp_head(_FEATURES[name], rng, model.dtype)
        stack = body + temp
        schedule = cfg.window_schedule if name == "window" else cfg.schedule

        def fwd(batch, stack=stack):
            return nn.run_forward(stack, batch[0])[:, 0]

        def bwd(gp, stack=stack):
            nn.run_backward(stack, gp[:, None])

        def params(stack=stack):
            return {
                f"{i}.{p}": layer.params()[p]
                for i, layer in enumerate(stack)
                for p in layer.params()
            }

        def grads(stack=stack):
            return {
                f"{i}.{p}": layer.grads()[p]
                for i, layer in enumerate(stack)
                for p in layer.grads()
            }

        stage1[name] = _train_epochs(
            fwd, bwd, params, grads, [data_by_branch[name]], labels, cfg, schedule,
            n_v, n_n, rng, f"stage1/{name}",
        )

    train_bodies = not cfg.freeze_bodies_stage2

    def fwd2(batch):
        return model.forward_batch(*batch)

    def bwd2(gp):
        model.backward_batch(gp, train_bodies=train_bodies)

    def params2():
        return model.named_params(include_bodies=train_bodies)

    def grads2():
        return model.named_grads(include_bodies=train_bodies)

    stage2 = _train_epochs(
        fwd2, bwd2, params2, grads2, [xw, xs, xa], labels, cfg, cfg.schedule,
        n_v, n_n, rng, "stage2",
    )
    return LossLog(stage1=stage1, stage2=stage2)


def predict(model: MultiBranchModel, bi: BranchInput) -> float:
    """Vehicle probability for one input; the decision threshold is 0.5."""
    return float(predict_batch(model, [bi], batch=1)[0])


def is_vehicle(prob: float, threshold: float = 0.5) -> bool:
    return prob > threshold


def predict_batch(model: MultiBranchModel, inputs, batch: int = 256) -> np.ndarray:
    probs = np.empty(len(inputs), dtype=np.float64)
    for start in range(0, len(inputs), batch):
        chunk = inputs[start : start + batch]
        xw, xs, xa = _stack(chunk)
        probs[start : start + len(chunk)] = model.forward_batch(xw, xs, xa)
    return probs


def score_anchors(model, raster, stats, anchors, batch: int = 256) -> np.ndarray:
    """Probabilities for a list of anchors on one raster."""
    probs = np.empty(len(anchors), dtype=np.float64)
    for start in range(0, len(anchors), batch):
        chunk = anchors[start : start + batch]
        inputs = [assemble_inputs(a, raster, stats) for a in chunk]
        probs[start : start + len(chunk)] = predict_batch(model, inputs, batch=batch)
    return probs


def label_candidates(candidates, truth_boxes) -> list:
    """1 if the candidate rectangle center falls inside any reference box."""
    labels = []
    for cand in candidates:
        c = cand.min_rect
        labels.append(int(any(t.contains_point(c.cx, c.cy) for t in truth_boxes)))
    return labels


def make_labeled_samples(raster, road_mask, truth_boxes, params, stats=None,
                         cand_result=None, twin_negatives=True):
    """Build (BranchInput, label) pairs from one scene's candidates.

    With ``twin_negatives`` every elongated vehicle candidate also
    contributes its rectangle turned 90 degrees in place as a negative:
    the anchor fan contains that crossed twin at score time, and the model
    has to learn that a sideways box on a vehicle is not a vehicle box.
    """
    from .candidates import extract_candidates

    if cand_result is None:
        cand_result = extract_candidates(raster, road_mask, params)
    if stats is None:
        stats = ImageStats.from_raster(raster)
    labels = label_candidates(cand_result.candidates, truth_boxes)
    samples = []
    for cand, lbl in zip(cand_result.candidates, labels):
        rect = cand.min_rect
        samples.append((assemble_inputs(rect, raster, stats), lbl))
        if twin_negatives and lbl == 1 and rect.aspect >= 1.5:
            twin = OrientedBox(rect.cx, rect.cy, rect.h, rect.w, rect.theta_deg)
            samples.append((assemble_inputs(twin, raster, stats), 0))
    return samples


# --- sample dataset files --------------------------------------------------

_REC_MAGIC = b"VSSM"
_REC_VERSION = 1


def save_samples(dirpath, samples, stats: ImageStats) -> None:
    """Write samples as a binary record file plus a JSON manifest."""
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    labels = [int(lbl) for _, lbl in samples]
    manifest = {
        "version": _REC_VERSION,
        "count": len(samples),
        "n_v": sum(labels),
        "n_n": len(labels) - sum(labels),
        "stats": {"means": list(map(float, stats.means)), "stds": list(map(float, stats.stds))},
        "shapes": {
            "window": [4, WINDOW_SIZE, WINDOW_SIZE],
            "subwindow": [4, PATCH_H, PATCH_W],
            "anchor_patch": [4, PATCH_H, PATCH_W],
        },
    }
    with open(d / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
    with open(d / "records.bin", "wb") as fh:
        fh.write(_REC_MAGIC)
        fh.write(struct.pack("<I", _REC_VERSION))
        for bi, lbl in samples:
            fh.write(struct.pack("<B", int(lbl)))
            for arr in (bi.window, bi.subwindow, bi.anchor_patch):
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_samples(dirpath):
    """Read a sample directory; returns (samples, stats)."""
    d = Path(dirpath)
    with open(d / "manifest.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != _REC_VERSION:
        raise ValueError("unsupported sample set version")
    shapes = {k: tuple(v) for k, v in manifest["shapes"].items()}
    sizes = {k: int(np.prod(v)) for k, v in shapes.items()}
    samples = []
    with open(d / "records.bin", "rb") as fh:
        if fh.read(4) != _REC_MAGIC:
            raise ValueError("not a sample record file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _REC_VERSION:
            raise ValueError("unsupported sample record version")
        for _ in range(manifest["count"]):
            (lbl,) = struct.unpack("<B", fh.read(1))
            arrs = {}
            for key in ("window", "subwindow", "anchor_patch"):
                raw = fh.read(4 * sizes[key])
                arrs[key] = np.frombuffer(raw, dtype="<f4").reshape(shapes[key]).copy()
            samples.append((BranchInput(**arrs), int(lbl)))
    stats = ImageStats(
        means=np.array(manifest["stats"]["means"], dtype=np.float64),
        stds=np.array(manifest["stats"]["stds"], dtype=np.float64),
    )
    return samples, stats
