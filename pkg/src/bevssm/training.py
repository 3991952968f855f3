"""Training and evaluation loops for the fusion + detection-head stack.

The model is recurrent over a sequence: every frame is fused with the
previous frame's fused output (aligned into the current ego frame), and the
fusion result both feeds the detection head and becomes the next frame's
history after detaching.  The first frame of a sequence has no history and
is fused with itself under an identity transform.

Optimization is Adam with decoupled weight decay.  Loss rows are collected
per optimizer step so runs can be compared byte for byte; evaluation skips
the first frame of every sequence since the no-history prediction is not
comparable across fusion modes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .bevseq import BevGrid, EgoPose
from .errors import ConfigError, NumericError
from .fusion import FusionConfig, build_fusion
from .head import DetectionHead, DetectionSet, HeadConfig, detection_loss
from .layers import Module
from .metrics import MetricsReport, evaluate

LOSS_HEADER = ("epoch", "step", "loss", "cls", "center", "size", "yaw",
               "vel", "matches")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 1
    seed: int = 0
    aux_loss: bool = True        # supervise every decoder layer, not just the last
    warmup_frames: int = 0       # leading frames that fill history but skip the loss

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be >= 0, got {self.weight_decay}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must be in [0, 1), got "
                              f"({self.beta1}, {self.beta2})")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.warmup_frames < 0:
            raise ConfigError(
                f"warmup frames must be >= 0, got {self.warmup_frames}")


class AdamW:
    """Adam with decoupled weight decay; state kept in float64."""

    def __init__(self, params, cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.m = [np.zeros(p.shape, np.float64) for p in self.params]
        self.v = [np.zeros(p.shape, np.float64) for p in self.params]
        self.t = 0

    def step(self, grads):
        if len(grads) != len(self.params):
            raise ConfigError(f"got {len(grads)} gradients for "
                              f"{len(self.params)} parameters")
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = np.asarray(g, np.float64)
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            if c.weight_decay:
                update = update + c.weight_decay * p.data
            p.data[...] = p.data - c.lr * update


class DetectorModel(Module):
    """Fusion stage plus detection head, built from the two configs."""

    def __init__(self, fusion_cfg: FusionConfig, head_cfg: HeadConfig,
                 seed: int = 0):
        if head_cfg.channels != fusion_cfg.channels:
            raise ConfigError(
                f"head expects {head_cfg.channels} channels but fusion "
                f"produces {fusion_cfg.channels}")
        rng = np.random.default_rng(seed)
        self.fusion = build_fusion(fusion_cfg, rng)
        self.head = DetectionHead(head_cfg, rng)
        self.fusion_cfg = fusion_cfg
        self.head_cfg = head_cfg

    def __call__(self, cur: BevGrid, hist: BevGrid, delta: EgoPose,
                 train: bool = False, seed: int = 0):
        fused = self.fusion(cur, hist, delta, train=train, seed=seed)
        return fused, self.head(fused)


def _detach(grid: BevGrid) -> BevGrid:
    return BevGrid(np.array(grid.array, dtype=np.float32), grid.resolution)


def frame_loss(preds, gt_boxes, head_cfg: HeadConfig, aux: bool = True):
    """Mean of the per-layer detection losses (last layer only if aux=False)."""
    chosen = preds if aux else preds[-1:]
    total = None
    for pr in chosen:
        loss, bd = detection_loss(pr, gt_boxes, head_cfg)
        total = loss if total is None else total + loss
    return total * (1.0 / len(chosen)), bd


def fit(model: DetectorModel, sequences, tcfg: TrainConfig):
    """Train in place over the sequences; returns per-step loss rows.

    Rows follow LOSS_HEADER; the breakdown columns describe the last decoder
    layer.  A non-finite loss aborts with the epoch and step in the message.
    """
    params = model.params()
    opt = AdamW(params, tcfg)
    head_cfg = model.head_cfg
    rows = []
    step = 0
    for epoch in range(tcfg.epochs):
        for seq in sequences:
            hist = None
            hist_pose = None
            for k, sample in enumerate(seq):
                cur = sample.features
                if hist is None:
                    hist_grid, delta = cur, EgoPose()
                else:
                    hist_grid, delta = hist, sample.pose.relative_to(hist_pose)
                step += 1
                drop_seed = (tcfg.seed * 1000003 + step) % (2 ** 31 - 1)
                if k < tcfg.warmup_frames:
                    # history only: the first frame has hist == cur, so its
                    # velocity labels carry no evidence and would teach the
                    # model to ignore motion features
                    fused = model.fusion(cur, hist_grid, delta, train=True,
                                         seed=drop_seed)
                    hist = _detach(fused)
                    hist_pose = sample.pose
                    continue
                try:
                    with Tape() as tape:
                        fused, preds = model(cur, hist_grid, delta, train=True,
                                             seed=drop_seed)
                        loss, bd = frame_loss(preds, sample.gt.boxes, head_cfg,
                                              tcfg.aux_loss)
                        if not np.isfinite(loss.data):
                            raise NumericError(f"loss is {float(loss.data)}")
                        grads = tape.gradients(loss, params)
                except NumericError as exc:
                    raise NumericError(
                        f"training diverged at epoch {epoch} step {step}: "
                        f"{exc}") from exc
                opt.step(grads)
                rows.append((epoch, step, float(loss.data), bd["cls"],
                             bd["center"], bd["size"], bd["yaw"], bd["vel"],
                             bd["matches"]))
                hist = _detach(fused)
                hist_pose = sample.pose
    return rows


def predict(model: DetectorModel, sequences, skip_first: bool = True):
    """Run the recurrent model in eval mode over sequences.

    Returns (predictions, ground truth) as DetectionSet lists with frame ids
    unique across the whole dataset.  The first frame of each sequence still
    updates the history but is skipped in the outputs when skip_first is set.
    """
    pred_sets, gt_sets = [], []
    frame_id = 0
    for seq in sequences:
        hist = None
        hist_pose = None
        for k, sample in enumerate(seq):
            cur = sample.features
            if hist is None:
                hist_grid, delta = cur, EgoPose()
            else:
                hist_grid, delta = hist, sample.pose.relative_to(hist_pose)
            fused, preds = model(cur, hist_grid, delta, train=False)
            hist = _detach(fused)
            hist_pose = sample.pose
            if skip_first and k == 0:
                continue
            pred_sets.append(DetectionSet(frame_id, preds[-1].to_boxes()))
            gt_sets.append(DetectionSet(frame_id, sample.gt.boxes))
            frame_id += 1
    return pred_sets, gt_sets


def evaluate_model(model: DetectorModel, sequences,
                   skip_first: bool = True) -> MetricsReport:
    start = time.perf_counter()
    preds, gts = predict(model, sequences, skip_first=skip_first)
    report = evaluate(preds, gts, model.head_cfg.num_classes)
    report.runtime_s = time.perf_counter() - start
    return report


# ---------------------------------------------------------------------------
# checkpoint state


def state_dict(model: Module) -> dict:
    """Parameters plus running-statistic buffers, flat name -> array."""
    state = {f"w:{name}": p.data for name, p in model.named_params()}
    state.update({f"b:{name}": buf for name, buf in model.named_buffers()})
    return state


def _resolve(model, path: str):
    obj = model
    parts = path.split(".")
    for part in parts[:-1]:
        obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
    return obj, parts[-1]


def load_state(model: Module, state: dict) -> None:
    """Restore a state_dict in place; shapes and names must match exactly."""
    expected = state_dict(model)
    missing = sorted(set(expected) - set(state))
    surplus = sorted(set(state) - set(expected))
    if missing or surplus:
        raise ConfigError(f"checkpoint mismatch: missing {missing[:3]}, "
                          f"unexpected {surplus[:3]}")
    for name, p in model.named_params():
        arr = state[f"w:{name}"]
        if tuple(arr.shape) != p.shape:
            raise ConfigError(f"parameter {name} has shape {p.shape}, "
                              f"checkpoint has {tuple(arr.shape)}")
        p.data[...] = arr
    for name, buf in model.named_buffers():
        arr = np.asarray(state[f"b:{name}"], dtype=buf.dtype)
        if arr.shape != buf.shape:
            raise ConfigError(f"buffer {name} has shape {buf.shape}, "
                              f"checkpoint has {arr.shape}")
        owner, attr = _resolve(model, name)
        setattr(owner, attr, arr.copy())
