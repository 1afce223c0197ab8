"""Adam training on synthetic poses, evaluation and resumable checkpoints."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import checkpoint, codec, synth
from .config import RunConfig, TrainConfig, model_from_dict, train_from_dict
from .net import STNet, build_model
from .tensor import Tensor, as_dtype, mse_loss, no_grad

PCK_THRESHOLDS = (0.05, 0.1, 0.2)


class TrainingDiverged(RuntimeError):
    pass


class Adam:
    def __init__(self, params: Dict[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update.astype(p.data.dtype, copy=False))

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {"optim.t": np.array([self.t], dtype=np.int64)}
        for k in self.params:
            out[f"optim.m.{k}"] = self.m[k]
            out[f"optim.v.{k}"] = self.v[k]
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.t = int(state["optim.t"][0])
        for k, p in self.params.items():
            for name, buf in (("m", self.m), ("v", self.v)):
                arr = state[f"optim.{name}.{k}"]
                if arr.shape != p.shape:
                    raise ValueError(f"optimizer state {name}.{k} has shape {arr.shape}, "
                                     f"parameter has {p.shape}")
                buf[k] = np.array(arr, dtype=p.data.dtype, copy=True)


@dataclass
class Dataset:
    images: np.ndarray   # normalised network input (N, 3, H, W)
    joints: np.ndarray   # (N, K, 2) pixels
    visible: np.ndarray  # (N, K)
    targets: np.ndarray  # (N, K, H/4, W/4)
    weights: np.ndarray  # (N, K)

    def __len__(self):
        return len(self.images)

    @property
    def image_size(self):
        return self.images.shape[2:]


def make_dataset(n: int, image_size, seed: int, sigma: float = codec.SIGMA, dtype=np.float32,
                 num_joints: int = synth.NUM_JOINTS) -> Dataset:
    if num_joints != synth.NUM_JOINTS:
        raise ValueError(f"synthetic data has {synth.NUM_JOINTS} joints, model predicts {num_joints}")
    samples = synth.synth_dataset(n, tuple(image_size), seed)
    images, joints, visible = synth.stack(samples)
    h, w = image_size
    targets, weights = codec.batch_targets(joints, visible, (h // 4, w // 4), sigma, dtype=dtype)
    return Dataset(synth.normalize(images).astype(dtype), joints, visible, targets, weights)


def batch_indices(n: int, batch: int, seed: int, step: int) -> np.ndarray:
    """Deterministic function of (seed, step): resuming cannot change the batch order."""
    rng = np.random.default_rng([int(seed), int(step), 7])
    if batch >= n:
        return rng.permutation(n)
    return np.sort(rng.choice(n, size=batch, replace=False))


def predict(model: STNet, images: np.ndarray, batch: int = 16) -> np.ndarray:
    """Heatmaps in eval mode, batched."""
    was = model.training
    model.eval()
    outs = []
    try:
        with no_grad():
            for i in range(0, len(images), batch):
                outs.append(model(Tensor(images[i:i + batch])).data)
    finally:
        model.train(was)
    return np.concatenate(outs)


def evaluate(model: STNet, data: Dataset, thresholds: Sequence[float] = PCK_THRESHOLDS,
             batch: int = 16) -> Dict[str, object]:
    if len(data) == 0:
        raise ValueError("no samples to evaluate")
    heat = predict(model, data.images, batch)
    coords, _, _ = codec.decode_array(heat, stride=4)
    h, w = data.image_size
    norm = codec.image_diagonal(h, w)
    out: Dict[str, object] = {"samples": int(len(data)), "norm_size": norm}
    for t in thresholds:
        hits, total = codec.pck_counts(coords, data.joints, data.visible, t * norm)
        out[f"pck@{t:g}"] = None if total == 0 else hits / total
    return out


@dataclass
class Trainer:
    model: STNet
    cfg: TrainConfig
    data: Dataset
    step: int = 0
    history: List[dict] = field(default_factory=list)

    def __post_init__(self):
        self.params = dict(self.model.named_parameters())
        c = self.cfg
        self.optim = Adam(self.params, c.lr, c.beta1, c.beta2, c.eps)

    def loss_on(self, idx: np.ndarray) -> Tensor:
        x = Tensor(self.data.images[idx])
        pred = self.model(x)
        w = self.data.weights[idx][:, :, None, None]
        return mse_loss(pred, self.data.targets[idx], w)

    def train_step(self, dump_dir: Optional[str] = None) -> float:
        idx = batch_indices(len(self.data), self.cfg.batch_size, self.cfg.seed, self.step)
        self.model.train()
        self.model.zero_grad()
        try:
            loss = self.loss_on(idx)
            loss.backward()
        except FloatingPointError as e:
            path = self._dump(idx, dump_dir)
            raise TrainingDiverged(f"step {self.step}: {e}; batch dumped to {path}") from None
        value = float(loss.data)
        if not np.isfinite(value):
            path = self._dump(idx, dump_dir)
            raise TrainingDiverged(f"step {self.step}: loss is {value}; batch dumped to {path}")
        self.optim.step()
        self.step += 1
        return value

    def _dump(self, idx, dump_dir) -> str:
        path = os.path.join(dump_dir or ".", f"diverged_step{self.step}.npz")
        np.savez(path, indices=idx, images=self.data.images[idx], targets=self.data.targets[idx])
        return path

    def run(self, iterations: Optional[int] = None, log=None, dump_dir: Optional[str] = None
            ) -> List[dict]:
        end = self.cfg.iterations if iterations is None else self.step + iterations
        while self.step < end:
            loss = self.train_step(dump_dir)
            entry = {"step": self.step, "loss": loss}
            if self.step % self.cfg.log_every == 0 or self.step == end:
                entry["pck@0.1"] = evaluate(self.model, self.data, (0.1,))["pck@0.1"]
                if log is not None:
                    log(entry)
            self.history.append(entry)
        return self.history

    # --- persistence -------------------------------------------------------
    def state(self) -> Dict[str, np.ndarray]:
        out = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        out.update(self.optim.state_dict())
        return out

    def save(self, path: str, run_cfg: Optional[RunConfig] = None) -> None:
        meta = {"step": self.step, "train": dataclasses.asdict(self.cfg),
                "model": self.model.cfg.to_dict(),
                "dtype": "f64" if self.model.head.weight.dtype == np.float64 else "f32",
                "history": self.history[-1:] if self.history else []}
        checkpoint.save(path, self.state(), meta)


def load_model(path: str, expect=None) -> tuple:
    """Rebuild a model from a checkpoint; returns ``(model, tensors, meta)``."""
    tensors, meta = checkpoint.load(path)
    mcfg = model_from_dict(meta["model"])
    if expect is not None and mcfg != expect:
        raise ValueError("checkpoint model configuration does not match the requested config")
    dtype = as_dtype(meta.get("dtype", "f32"))
    model = build_model(mcfg, seed=None, dtype=dtype)
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state)
    return model, tensors, meta


def resume(path: str, data: Optional[Dataset] = None) -> Trainer:
    model, tensors, meta = load_model(path)
    tcfg = train_from_dict(meta["train"])
    if data is None:
        data = make_dataset(tcfg.num_samples, model.cfg.input_size, tcfg.data_seed, tcfg.sigma,
                            model.head.weight.dtype, model.cfg.num_joints)
    tr = Trainer(model, tcfg, data, step=int(meta["step"]))
    tr.optim.load_state_dict(tensors)
    return tr


def new_trainer(run: RunConfig, data: Optional[Dataset] = None) -> Trainer:
    dtype = as_dtype(run.dtype)
    model = build_model(run.model, seed=run.train.seed, dtype=dtype)
    t = run.train
    if data is None:
        data = make_dataset(t.num_samples, run.model.input_size, t.data_seed, t.sigma, dtype,
                            run.model.num_joints)
    return Trainer(model, t, data)
