"""Three-subproblem training loop over the degradation / reconstruction cycle,
ablation modes, the binary checkpoint format, and the tab-separated log."""

from __future__ import annotations

import io
import json
import os
import struct
import time
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from . import classical, dataio, losses
from . import tensor as T
from .losses import LossBreakdown, LossWeights
from .models import DegradationNet, Discriminator, FeatureExtractor, ReconstructionNet
from .nn import INIT_SCHEME
from .optim import Adam, LrSchedule
from .tensor import Tensor, no_grad

ABLATIONS = ("full", "no_dm", "no_d", "no_cycle")

CKPT_MAGIC = b"DNSRCKPT"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    scale: int = 4
    batch_size: int = 16
    hr_patch: int = 240
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: LrSchedule = field(default_factory=LrSchedule)
    ablation: str = "full"
    seed: int = 0
    hr_dir: str = ""
    lr_dir: str = ""
    checkpoint_every: int = 10_000
    iterations: int = 1_000_000
    # architecture knobs (full-scale values by default)
    g_width: int = 32
    g_blocks: int = 8
    r_width: Optional[int] = None
    r_blocks: int = 16
    r_residual_scale: Optional[float] = None
    p_width_scale: float = 1.0
    p_input_size: int = 224
    # optimizer
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {self.scale}")
        if self.hr_patch % self.scale:
            raise ValueError(
                f"hr_patch {self.hr_patch} must be divisible by scale {self.scale}"
            )
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")

    @property
    def lr_patch(self) -> int:
        return self.hr_patch // self.scale


def desk_profile(**overrides) -> TrainConfig:
    """Small configuration, structurally identical to the full-scale one, that
    trains in minutes on a CPU: 48px patches, batch 4, 4 reconstruction blocks
    at width 64, a narrow 112px feature extractor, 2000 iterations."""
    base = dict(
        hr_patch=48,
        batch_size=4,
        r_width=64,
        r_blocks=4,
        r_residual_scale=0.1,
        p_width_scale=0.125,
        p_input_size=112,
        iterations=2000,
        checkpoint_every=2000,
        schedule=LrSchedule(base_lr=1e-4, halve_every=200_000, total_steps=2000),
    )
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class Nets:
    g: Optional[DegradationNet]
    r: ReconstructionNet
    d: Optional[Discriminator]
    p: Optional[FeatureExtractor]


def build_nets(cfg: TrainConfig) -> Nets:
    uses_g = cfg.ablation != "no_dm"
    uses_d = cfg.ablation not in ("no_dm", "no_d")
    g = (
        DegradationNet(cfg.scale, width=cfg.g_width, blocks=cfg.g_blocks, seed=cfg.seed)
        if uses_g
        else None
    )
    r = ReconstructionNet(
        cfg.scale,
        width=cfg.r_width,
        blocks=cfg.r_blocks,
        residual_scale=cfg.r_residual_scale,
        seed=cfg.seed + 1,
    )
    d = Discriminator(cfg.lr_patch, seed=cfg.seed + 2) if uses_d else None
    p = (
        FeatureExtractor(seed=cfg.seed + 3, width_scale=cfg.p_width_scale, input_size=cfg.p_input_size)
        if uses_g
        else None
    )
    return Nets(g=g, r=r, d=d, p=p)


@dataclass
class TrainLogRow:
    iteration: int
    lr: float
    breakdown: LossBreakdown
    wall_ms: float = 0.0

    def line(self) -> str:
        parts = [str(self.iteration), f"{self.lr:.10g}"]
        for name in losses.ALL_FIELDS:
            v = getattr(self.breakdown, name)
            if v is not None:
                parts.append(f"{name}={v:.8g}")
        return "\t".join(parts)


def _downscale_batch_bicubic(x: Tensor, scale: int) -> Tensor:
    imgs = x.data.transpose(0, 2, 3, 1)
    lr = np.stack([classical.bicubic_resize(im, scale, "down") for im in imgs])
    return Tensor(lr.transpose(0, 3, 1, 2).astype(np.float32))


class Trainer:
    """Owns networks, optimizers, data samplers, and the iteration counter."""

    def __init__(self, cfg: TrainConfig, nets: Optional[Nets] = None):
        self.cfg = cfg
        self.nets = nets if nets is not None else build_nets(cfg)
        self.iteration = 0
        self.rows: List[TrainLogRow] = []
        adam_kw = dict(
            beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps, weight_decay=cfg.weight_decay
        )
        self.opt_g = Adam(self.nets.g.parameters(), **adam_kw) if self.nets.g else None
        self.opt_r = Adam(self.nets.r.parameters(), **adam_kw)
        self.opt_d = Adam(self.nets.d.parameters(), **adam_kw) if self.nets.d else None
        self._hr_sampler: Optional[dataio.EndlessPatchSampler] = None
        self._lr_sampler: Optional[dataio.EndlessPatchSampler] = None

    # -- data -------------------------------------------------------------

    def attach_data(self):
        cfg = self.cfg
        hr_manifest = dataio.DatasetManifest.from_dir("hr", cfg.hr_dir)
        self._hr_sampler = dataio.EndlessPatchSampler(
            hr_manifest, cfg.batch_size, cfg.hr_patch, seed=cfg.seed + 101
        )
        if cfg.ablation != "no_dm":
            lr_manifest = dataio.DatasetManifest.from_dir("real_lr", cfg.lr_dir)
            self._lr_sampler = dataio.EndlessPatchSampler(
                lr_manifest, cfg.batch_size, cfg.lr_patch, seed=cfg.seed + 202
            )

    # -- the three subproblems -------------------------------------------

    def compute_cycle(self, z: Tensor):
        """Run the cycle circuit z -> R -> G once and keep its gradients.

        The cycle term appears in both the degradation objective (coefficient
        1) and the joint reconstruction update (R weighted by eta), so one
        forward/backward pass serves both; returns (loss value, G grads,
        R grads)."""
        nets = self.nets
        ztilde = nets.r(z)
        zhat = nets.g(ztilde)
        l_cyc = losses.l1_loss(zhat, z)
        self.opt_g.zero_grad()
        self.opt_r.zero_grad()
        T.backward(l_cyc)
        g_grads = {k: p.grad for k, p in self.opt_g.params.items()}
        r_grads = {k: p.grad for k, p in self.opt_r.params.items()}
        return float(l_cyc.data), g_grads, r_grads

    def _apply_cycle_update(self, g_grads, r_grads, lr: float):
        """Joint update from saved cycle gradients: G at weight 1, R at eta."""
        for k, p in self.opt_g.params.items():
            p.grad = g_grads[k]
        self.opt_g.step(lr)
        eta = self.cfg.weights.eta
        for k, p in self.opt_r.params.items():
            p.grad = r_grads[k] if eta == 1.0 else eta * r_grads[k]
        self.opt_r.step(lr)

    def step_degradation(
        self, x: Tensor, z: Tensor, lr: float, cycle=None
    ) -> LossBreakdown:
        """Update D on real/fake LR batches, then G on its composite objective.

        `cycle` is an optional (value, G grads, R grads) triple from
        compute_cycle; when absent and the ablation keeps the cycle term, it
        is computed here."""
        cfg, nets = self.cfg, self.nets
        if nets.g is None:
            raise ValueError("degradation step is undefined under ablation no_dm")
        if x.shape[0] == 0 or z.shape[0] == 0:
            raise ValueError("empty batch")
        out = LossBreakdown()

        if cycle is None and cfg.ablation != "no_cycle":
            cycle = self.compute_cycle(z)

        yhat = nets.g(x)
        self._last_yhat = yhat.detach()

        if nets.d is not None:
            d_loss = losses.discriminator_loss(nets.d, z, self._last_yhat)
            self.opt_d.zero_grad()
            T.backward(d_loss)
            self.opt_d.step(lr)
            self._last_d_loss = float(d_loss.data)

        objective = None
        if nets.d is not None:
            l_adv = losses.adversarial_loss(nets.d, yhat)
            out.l_adv = float(l_adv.data)
            objective = cfg.weights.alpha * l_adv
        l_per = losses.perceptual_loss(nets.p, yhat, x)
        out.l_per = float(l_per.data)
        objective = cfg.weights.beta * l_per if objective is None else objective + cfg.weights.beta * l_per
        self.opt_g.zero_grad()
        T.backward(objective)
        if cycle is not None:
            value, g_grads, _ = cycle
            out.l_cyc = value
            for k, p in self.opt_g.params.items():
                p.grad = g_grads[k] if p.grad is None else p.grad + g_grads[k]
        self.opt_g.step(lr)
        return out

    def step_reconstruction(self, x: Tensor, lr: float, yhat: Optional[Tensor] = None) -> LossBreakdown:
        """Update R on L1 + gamma * TV against the ground-truth HR batch."""
        cfg, nets = self.cfg, self.nets
        if x.shape[2] % cfg.scale or x.shape[3] % cfg.scale:
            raise ValueError(
                f"HR batch spatial size {x.shape[2]}x{x.shape[3]} not divisible by scale {cfg.scale}"
            )
        if yhat is None:
            if nets.g is None:
                yhat = _downscale_batch_bicubic(x, cfg.scale)
            else:
                with no_grad():
                    yhat = nets.g(x)
        xhat = nets.r(yhat.detach())
        l_1 = losses.l1_loss(xhat, x)
        l_tv = losses.tv_loss(xhat)
        objective = l_1 + cfg.weights.gamma * l_tv
        self.opt_r.zero_grad()
        T.backward(objective)
        self.opt_r.step(lr)
        out = LossBreakdown()
        out.l_1 = float(l_1.data)
        out.l_tv = float(l_tv.data)
        return out

    def step_cycle(self, z: Tensor, lr: float, cycle=None) -> LossBreakdown:
        """Joint update: the cycle loss reaches G with weight 1 and R with eta.

        Reuses a (value, G grads, R grads) triple from compute_cycle when
        given; otherwise runs the cycle circuit itself."""
        cfg = self.cfg
        if cfg.ablation in ("no_cycle", "no_dm"):
            raise ValueError(f"cycle step is disabled under ablation {cfg.ablation}")
        if cycle is None:
            cycle = self.compute_cycle(z)
        value, g_grads, r_grads = cycle
        self._apply_cycle_update(g_grads, r_grads, lr)
        out = LossBreakdown()
        out.l_cyc = value
        return out

    # -- one full iteration ----------------------------------------------

    def run_iteration(self) -> TrainLogRow:
        cfg = self.cfg
        if self._hr_sampler is None:
            self.attach_data()
        t0 = time.perf_counter()
        lr = cfg.schedule.lr_at(self.iteration)
        x = self._hr_sampler.next_batch()
        z = self._lr_sampler.next_batch() if self._lr_sampler else None

        bd = LossBreakdown()
        self._last_yhat = None
        cycle = None
        if cfg.ablation not in ("no_dm", "no_cycle"):
            cycle = self.compute_cycle(z)
        if cfg.ablation != "no_dm":
            part = self.step_degradation(x, z, lr, cycle=cycle)
            bd.l_adv, bd.l_per, bd.l_cyc = part.l_adv, part.l_per, part.l_cyc
        part = self.step_reconstruction(x, lr, yhat=self._last_yhat)
        bd.l_1, bd.l_tv = part.l_1, part.l_tv
        if cycle is not None:
            part = self.step_cycle(z, lr, cycle=cycle)
            bd.l_cyc = part.l_cyc
        bd.compose(cfg.weights)

        self.iteration += 1
        row = TrainLogRow(self.iteration, lr, bd, (time.perf_counter() - t0) * 1e3)
        self.rows.append(row)
        return row

    def run(self, log_path: Optional[str] = None, checkpoint_path: Optional[str] = None):
        cfg = self.cfg
        self.attach_data()
        log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
        try:
            while self.iteration < cfg.iterations:
                row = self.run_iteration()
                if log_fh:
                    log_fh.write(row.line() + "\n")
                if checkpoint_path and (
                    self.iteration % cfg.checkpoint_every == 0 or self.iteration == cfg.iterations
                ):
                    save_checkpoint(checkpoint_path, self.to_checkpoint())
        finally:
            if log_fh:
                log_fh.close()
        return self.to_checkpoint()

    # -- persistence ------------------------------------------------------

    def to_checkpoint(self, config_echo: Optional[str] = None) -> "Checkpoint":
        return make_checkpoint(
            self.cfg,
            self.nets,
            self.iteration,
            opts={"G": self.opt_g, "R": self.opt_r, "D": self.opt_d},
            config_echo=config_echo,
        )


def train(cfg: TrainConfig, log_path: Optional[str] = None, checkpoint_path: Optional[str] = None):
    """Run the full iterative procedure; returns the final checkpoint."""
    trainer = Trainer(cfg)
    return trainer.run(log_path=log_path, checkpoint_path=checkpoint_path)


# -- checkpoint format ----------------------------------------------------


@dataclass
class Checkpoint:
    descriptor: dict
    tensors: "OrderedDict[str, np.ndarray]"

    @property
    def iteration(self) -> int:
        return int(self.descriptor["iteration"])

    @property
    def scale(self) -> int:
        return int(self.descriptor["nets"]["R"]["scale"])


def config_echo_text(cfg: TrainConfig) -> str:
    """Canonical key=value dump of a TrainConfig (provenance echo)."""
    w, s = cfg.weights, cfg.schedule
    pairs = [
        ("scale", cfg.scale),
        ("batch_size", cfg.batch_size),
        ("hr_patch", cfg.hr_patch),
        ("alpha", w.alpha),
        ("beta", w.beta),
        ("eta", w.eta),
        ("gamma", w.gamma),
        ("base_lr", s.base_lr),
        ("halve_every", s.halve_every),
        ("total_steps", s.total_steps),
        ("ablation", cfg.ablation),
        ("seed", cfg.seed),
        ("hr_dir", cfg.hr_dir),
        ("lr_dir", cfg.lr_dir),
        ("checkpoint_every", cfg.checkpoint_every),
        ("iterations", cfg.iterations),
        ("g_width", cfg.g_width),
        ("g_blocks", cfg.g_blocks),
        ("r_width", cfg.r_width),
        ("r_blocks", cfg.r_blocks),
        ("r_residual_scale", cfg.r_residual_scale),
        ("p_width_scale", cfg.p_width_scale),
        ("p_input_size", cfg.p_input_size),
        ("beta1", cfg.beta1),
        ("beta2", cfg.beta2),
        ("adam_eps", cfg.adam_eps),
        ("weight_decay", cfg.weight_decay),
    ]
    return "\n".join(f"{k}={v}" for k, v in pairs) + "\n"


def make_checkpoint(
    cfg: TrainConfig,
    nets: Nets,
    iteration: int,
    opts: Optional[Dict[str, Optional[Adam]]] = None,
    config_echo: Optional[str] = None,
) -> Checkpoint:
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    arch = {}
    for name, net in (("G", nets.g), ("R", nets.r), ("D", nets.d), ("P", nets.p)):
        if net is None:
            arch[name] = None
            continue
        arch[name] = net.arch()
        for pname, p in net.parameters().items():
            tensors[f"{name}/{pname}"] = p.data
    optim_state = {}
    if opts:
        for name, opt in opts.items():
            if opt is None:
                continue
            optim_state[name] = opt.state()
            for pname in opt.params:
                tensors[f"optim/{name}/m/{pname}"] = opt.m[pname]
                tensors[f"optim/{name}/v/{pname}"] = opt.v[pname]
    descriptor = {
        "nets": arch,
        "iteration": iteration,
        "optim": optim_state,
        "init_scheme": INIT_SCHEME,
        "ablation": cfg.ablation,
        "config": config_echo if config_echo is not None else config_echo_text(cfg),
        "num_tensors": len(tensors),
    }
    return Checkpoint(descriptor, tensors)


def save_checkpoint(path: str, ckpt: Checkpoint):
    buf = io.BytesIO()
    desc = dict(ckpt.descriptor)
    desc["num_tensors"] = len(ckpt.tensors)
    desc_bytes = json.dumps(desc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(desc_bytes)))
    buf.write(desc_bytes)
    for name, arr in ckpt.tensors.items():
        name_bytes = name.encode("utf-8")
        buf.write(struct.pack("<I", len(name_bytes)))
        buf.write(name_bytes)
        buf.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = buf.getvalue()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CKPT_MAGIC) + 8 or blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    off = len(CKPT_MAGIC)
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != CKPT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version} (expected {CKPT_VERSION})"
        )
    payload = blob[off:-4]
    (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted payload)")

    view = memoryview(payload)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"{path}: truncated checkpoint payload")
        b = bytes(view[pos : pos + n])
        pos += n
        return b

    (desc_len,) = struct.unpack("<I", take(4))
    descriptor = json.loads(take(desc_len).decode("utf-8"))
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(int(descriptor["num_tensors"])):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(count * 4), dtype="<f4").reshape(shape)
        tensors[name] = data.copy()
    if pos != len(view):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return Checkpoint(descriptor, tensors)


def nets_from_checkpoint(ckpt: Checkpoint) -> Nets:
    """Rebuild networks from a checkpoint's architecture descriptors and load
    every parameter, validating shapes."""
    arch = ckpt.descriptor["nets"]
    nets = Nets(g=None, r=None, d=None, p=None)

    def params_for(prefix):
        return {
            k[len(prefix) + 1 :]: v for k, v in ckpt.tensors.items() if k.startswith(prefix + "/")
        }

    if arch.get("G"):
        a = arch["G"]
        nets.g = DegradationNet(a["scale"], width=a["width"], blocks=a["blocks"])
        nets.g.load_parameters(params_for("G"))
    a = arch["R"]
    nets.r = ReconstructionNet(
        a["scale"], width=a["width"], blocks=a["blocks"], residual_scale=a["residual_scale"]
    )
    nets.r.load_parameters(params_for("R"))
    if arch.get("D"):
        a = arch["D"]
        nets.d = Discriminator(a["input_size"])
        nets.d.load_parameters(params_for("D"))
    if arch.get("P"):
        a = arch["P"]
        nets.p = FeatureExtractor(width_scale=a["width_scale"], input_size=a["input_size"])
        nets.p.load_parameters(params_for("P"))
        for t in nets.p.parameters().values():
            t.requires_grad = False
    return nets
