"""Alternating adversarial optimization with moving-average generator weights
and a bit-exact single-file checkpoint container.

Determinism contract: every stochastic draw (batch indices, noise, mix coins)
comes from one torch.Generator owned by the trainer, whose state is saved in
checkpoints, so a fixed seed reproduces loss logs bit for bit and a resumed run
continues exactly where the saved one left off.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .data import one_hot_labels
from .losses import (LossParts, LossWeights, NonFiniteLossError, adaptive_perceptual_loss,
                     class_weights, d_adversarial_loss, depth_l1_loss, g_adversarial_loss,
                     labelmix_consistency_loss, labelmix_mask, total_losses)

MAGIC = b"SCMISCKPT\x00"
FORMAT_VERSION = 1
_ADAM_FIELDS = ("step", "exp_avg", "exp_avg_sq")


class CheckpointError(RuntimeError):
    """Unreadable checkpoint container."""


class CheckpointVersionError(CheckpointError):
    """Container was written by an incompatible format version."""


class CheckpointShapeError(CheckpointError):
    """Stored arrays do not fit the live modules."""


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write a single-file container: magic, version, JSON manifest, raw
    little-endian payload. Saving the result of load_arrays reproduces the file
    byte for byte."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        if not arr.flags.c_contiguous:  # 0-d arrays are contiguous; keep their shape
            arr = np.ascontiguousarray(arr)
        blob = arr.tobytes()
        entries.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"version": FORMAT_VERSION, "meta": meta, "arrays": entries},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for blob in blobs:
            f.write(blob)


def load_arrays(path):
    """Read a container written by save_arrays; returns (arrays, meta)."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"corrupt checkpoint {path}: bad magic")
    off = len(MAGIC)
    if len(data) < off + 12:
        raise CheckpointError(f"corrupt checkpoint {path}: truncated header")
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, "
                                     f"this build reads {FORMAT_VERSION}")
    (mlen,) = struct.unpack_from("<Q", data, off)
    off += 8
    try:
        manifest = json.loads(data[off:off + mlen])
        entries = manifest["arrays"]
        meta = manifest["meta"]
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: bad manifest ({exc})") from exc
    payload = data[off + mlen:]
    arrays = {}
    for e in entries:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"corrupt checkpoint {path}: truncated payload at '{e['name']}'")
        arr = np.frombuffer(payload[e["offset"]:end], dtype=np.dtype(e["dtype"]))
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return arrays, meta


def serialized_size(module: torch.nn.Module, path) -> int:
    """Write a module's state_dict through the container and return the file size."""
    arrays = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    save_arrays(path, arrays, {})
    return Path(path).stat().st_size


def ema_update(ema: dict[str, torch.Tensor], params, decay: float) -> dict[str, torch.Tensor]:
    """ema <- decay * ema + (1 - decay) * params, elementwise, in place."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError("decay must be in [0, 1]")
    params = dict(params)
    for name, shadow in ema.items():
        p = params[name]
        if p.shape != shadow.shape:
            raise ValueError(f"shape mismatch for '{name}': {tuple(shadow.shape)} vs {tuple(p.shape)}")
        shadow.mul_(decay).add_(p.detach(), alpha=1.0 - decay)
    return ema


@dataclass
class TrainConfig:
    lr_g: float = 1e-4
    lr_d: float = 2e-4
    adam_betas: tuple[float, float] = (0.0, 0.999)
    ema_decay: float = 0.9999
    batch_size: int = 8
    max_steps: int = 50_000
    seed: int = 0
    ckpt_every: int = 1000
    log_every: int = 1

    def __post_init__(self) -> None:
        self.adam_betas = tuple(self.adam_betas)
        if self.lr_g < 0 or self.lr_d < 0:
            raise ValueError("learning rates must be non-negative")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must be in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not (0.0 <= self.adam_betas[0] < 1.0 and 0.0 <= self.adam_betas[1] < 1.0):
            raise ValueError("adam betas must be in [0, 1)")


@dataclass
class StepStats:
    step: int
    d_adv: float
    d_lm: float
    d_total: float
    g_adv: float
    g_ap: float
    g_depth: float
    g_total: float

    def as_dict(self) -> dict:
        return asdict(self)


class Trainer:
    """Owns the models, their optimizers, the EMA shadow, and the step RNG.

    Each step updates the discriminator first, then the generator, with fresh
    noise per phase; the EMA shadow moves after the generator step.
    """

    def __init__(self, generator, discriminator, cfg: TrainConfig,
                 weights: LossWeights | None = None, ap_updates_disc: bool = False,
                 global_alpha: torch.Tensor | None = None, disc_input: str = "rgb"):
        if disc_input not in ("rgb", "rgbd"):
            raise ValueError(f"disc_input must be 'rgb' or 'rgbd', got '{disc_input}'")
        self.g = generator
        self.d = discriminator
        self.cfg = cfg
        self.weights = weights or LossWeights()
        self.ap_updates_disc = ap_updates_disc
        self.global_alpha = global_alpha
        self.disc_input = disc_input
        self.opt_g = torch.optim.Adam(self.g.parameters(), lr=cfg.lr_g, betas=cfg.adam_betas)
        self.opt_d = torch.optim.Adam(self.d.parameters(), lr=cfg.lr_d, betas=cfg.adam_betas)
        self.ema = {k: v.detach().clone() for k, v in self.g.named_parameters()}
        self.rng = torch.Generator().manual_seed(cfg.seed)
        self.step = 0

    # ------------------------------------------------------------------ steps

    def _noise_like(self, labels: torch.Tensor) -> torch.Tensor:
        b, h, w = labels.shape
        return torch.randn(b, self.g.cfg.noise_channels, h, w, generator=self.rng)

    def _disc_input(self, rgb: torch.Tensor, depth: torch.Tensor) -> torch.Tensor:
        if self.disc_input == "rgbd":
            return torch.cat([rgb, depth], dim=1)
        return rgb

    def _check(self, name: str, value: torch.Tensor) -> None:
        if not torch.isfinite(value).all():
            raise NonFiniteLossError(name)

    def train_step(self, batch: dict[str, torch.Tensor]) -> StepStats:
        """One discriminator update followed by one generator update."""
        try:
            return self._train_step(batch)
        except NonFiniteLossError as exc:
            raise NonFiniteLossError(f"{exc.component} at step {self.step + 1}") from exc

    def _train_step(self, batch: dict[str, torch.Tensor]) -> StepStats:
        labels = batch["label"]
        rgb = batch["rgb"]
        depth = batch["depth"]
        valid = batch["valid"]
        onehot = one_hot_labels(labels, self.g.cfg.num_classes)
        alpha = self.global_alpha if self.global_alpha is not None \
            else class_weights(labels, self.g.cfg.num_classes)

        # discriminator phase
        self.opt_d.zero_grad(set_to_none=True)
        with torch.no_grad():
            fake_rgb, fake_depth = self.g(onehot, self._noise_like(labels))
        real_in = self._disc_input(rgb, depth)
        fake_in = self._disc_input(fake_rgb, fake_depth)
        real_out = self.d(real_in)
        fake_out = self.d(fake_in)
        d_adv = d_adversarial_loss(real_out.logits, labels, fake_out.logits, alpha)
        masks = torch.stack([labelmix_mask(labels[b], self.rng).mask
                             for b in range(labels.shape[0])])
        d_lm = labelmix_consistency_loss(lambda im: self.d(im).logits, real_in, fake_in, masks,
                                         logits_x=real_out.logits, logits_xhat=fake_out.logits)
        self._check("d_adv", d_adv)
        self._check("d_lm", d_lm)
        d_loss = self.weights.w_adv * d_adv + self.weights.w_lm * d_lm
        if self.ap_updates_disc:
            # swapped roles: fake taps become the detached constants
            d_loss = d_loss + self.weights.w_ap * adaptive_perceptual_loss(fake_out.taps,
                                                                           real_out.taps)
        self._check("d_total", d_loss)
        d_loss.backward()
        self.opt_d.step()

        # generator phase
        self.opt_g.zero_grad(set_to_none=True)
        fake_rgb, fake_depth = self.g(onehot, self._noise_like(labels))
        gen_out = self.d(self._disc_input(fake_rgb, fake_depth))
        with torch.no_grad():
            real_taps = [t.detach() for t in self.d(real_in).taps]
        g_adv = g_adversarial_loss(gen_out.logits, labels, alpha)
        g_ap = adaptive_perceptual_loss(real_taps, gen_out.taps)
        g_depth = depth_l1_loss(fake_depth, depth, valid)
        for name, value in (("g_adv", g_adv), ("g_ap", g_ap), ("g_depth", g_depth)):
            self._check(name, value)
        g_loss = (self.weights.w_adv * g_adv + self.weights.w_ap * g_ap
                  + self.weights.w_depth * g_depth)
        self._check("g_total", g_loss)
        g_loss.backward()
        self.opt_g.step()
        ema_update(self.ema, self.g.named_parameters(), self.cfg.ema_decay)
        self.step += 1

        with torch.no_grad():
            l_g, l_d = total_losses(
                LossParts(g_adv=g_adv, g_ap=g_ap, g_depth=g_depth, d_adv=d_adv, d_lm=d_lm),
                self.weights)
        return StepStats(step=self.step,
                         d_adv=d_adv.item(), d_lm=d_lm.item(), d_total=l_d.item(),
                         g_adv=g_adv.item(), g_ap=g_ap.item(), g_depth=g_depth.item(),
                         g_total=l_g.item())

    def sample_batch(self, dataset) -> dict[str, torch.Tensor]:
        idx = torch.randint(len(dataset), (self.cfg.batch_size,), generator=self.rng)
        items = [dataset[int(i)] for i in idx]
        return {k: torch.stack([item[k] for item in items]) for k in items[0]}

    def fit(self, dataset, steps: int | None = None, log_path=None, csv_path=None,
            ckpt_dir=None, config: dict | None = None) -> list[StepStats]:
        """Run until self.step reaches `steps` (default cfg.max_steps)."""
        target = self.cfg.max_steps if steps is None else steps
        history: list[StepStats] = []
        log_f = open(log_path, "a") if log_path else None
        csv_f = csv_w = None
        if csv_path:
            fresh = not Path(csv_path).exists()
            csv_f = open(csv_path, "a", newline="")
            csv_w = csv.DictWriter(csv_f, fieldnames=[f.name for f in
                                                      StepStats.__dataclass_fields__.values()])
            if fresh:
                csv_w.writeheader()
        try:
            while self.step < target:
                stats = self.train_step(self.sample_batch(dataset))
                history.append(stats)
                if self.step % self.cfg.log_every == 0:
                    if log_f:
                        log_f.write(json.dumps(stats.as_dict(), sort_keys=True) + "\n")
                    if csv_w:
                        csv_w.writerow(stats.as_dict())
                if ckpt_dir and self.cfg.ckpt_every and self.step % self.cfg.ckpt_every == 0:
                    self.save_checkpoint(Path(ckpt_dir) / f"step_{self.step:08d}.ckpt", config)
        finally:
            if log_f:
                log_f.close()
            if csv_f:
                csv_f.close()
        return history

    # ------------------------------------------------------------- ema access

    def ema_generator(self):
        """A copy of the generator carrying the moving-average parameters."""
        import copy
        g = copy.deepcopy(self.g)
        with torch.no_grad():
            for name, p in g.named_parameters():
                p.copy_(self.ema[name])
        g.eval()
        return g

    # ------------------------------------------------------------ checkpoints

    def _module_arrays(self) -> dict[str, np.ndarray]:
        arrays: dict[str, np.ndarray] = {}
        for prefix, module in (("gen", self.g), ("disc", self.d)):
            for k, v in module.state_dict().items():
                arrays[f"{prefix}/{k}"] = v.detach().cpu().numpy()
        for k, v in self.ema.items():
            arrays[f"ema/{k}"] = v.cpu().numpy()
        return arrays

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = self._module_arrays()
        for prefix, opt, module in (("optg", self.opt_g, self.g), ("optd", self.opt_d, self.d)):
            names = [n for n, _ in module.named_parameters()]
            state = opt.state_dict()["state"]
            for i, pname in enumerate(names):
                if i in state:
                    for field in _ADAM_FIELDS:
                        value = state[i][field]
                        if torch.is_tensor(value):
                            value = value.detach().cpu().numpy()
                        arrays[f"{prefix}/{pname}/{field}"] = np.asarray(value)
        arrays["rng/state"] = self.rng.get_state().numpy()
        return arrays

    def save_checkpoint(self, path, config: dict | None = None) -> None:
        meta = {"step": self.step, "config": config or {}}
        save_arrays(path, self.state_arrays(), meta)

    def restore(self, arrays: dict[str, np.ndarray], meta: dict) -> None:
        expected: dict[str, tuple[int, ...]] = {}
        for prefix, module in (("gen", self.g), ("disc", self.d)):
            for k, v in module.state_dict().items():
                expected[f"{prefix}/{k}"] = tuple(v.shape)
        for k, v in self.ema.items():
            expected[f"ema/{k}"] = tuple(v.shape)
        for name in sorted(expected):
            if name not in arrays:
                raise CheckpointShapeError(f"checkpoint is missing array '{name}'")
            if tuple(arrays[name].shape) != expected[name]:
                raise CheckpointShapeError(
                    f"shape mismatch for '{name}': checkpoint has {tuple(arrays[name].shape)}, "
                    f"model needs {expected[name]}")

        for prefix, module in (("gen", self.g), ("disc", self.d)):
            state = {k[len(prefix) + 1:]: torch.from_numpy(arrays[k].copy())
                     for k in arrays if k.startswith(prefix + "/")}
            module.load_state_dict(state)
        for k in self.ema:
            self.ema[k] = torch.from_numpy(arrays[f"ema/{k}"].copy())
        for prefix, opt, module in (("optg", self.opt_g, self.g), ("optd", self.opt_d, self.d)):
            names = [n for n, _ in module.named_parameters()]
            state = {}
            for i, pname in enumerate(names):
                fields = {}
                for field in _ADAM_FIELDS:
                    key = f"{prefix}/{pname}/{field}"
                    if key in arrays:
                        fields[field] = torch.from_numpy(arrays[key].copy())
                if fields:
                    state[i] = fields
            sd = opt.state_dict()
            sd["state"] = state
            opt.load_state_dict(sd)
        if "rng/state" in arrays:
            self.rng.set_state(torch.from_numpy(arrays["rng/state"].copy()))
        self.step = int(meta.get("step", 0))

    def load_checkpoint(self, path) -> dict:
        arrays, meta = load_arrays(path)
        self.restore(arrays, meta)
        return meta
