"""Adapter training on top of frozen encoder stubs.

Only adapter and MPR parameters are trainable; the vision and text stubs
are constants in the graph, so they receive zero gradient by construction.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Mapping, Sequence

import numpy as np

from .backbone import CAPTIONS_PER_IMAGE, BackboneStub, Corpus, encode, init_stub, load_features, save_features
from .g2a import AdapterParams, count_params, init_adapter
from .mpr import MprParams, aggregate, init_mpr, mpr_forward
from .numerics import Tensor, grad, l2_normalize, no_grad
from .objectives import BatchFeatures, LossConfig, s_max_matrix, similarity_matrix, total_loss
from .retrieval import KS, RetrievalReport, compute_report

__all__ = [
    "FULL_SCALE_DEFAULTS",
    "TrainConfig",
    "TrainingError",
    "AdamState",
    "adamw_step",
    "Model",
    "build_model",
    "Checkpoint",
    "linear_lr",
    "train",
    "train_objective",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "model_from_checkpoint",
    "GRIDS",
    "ablate",
]

log = logging.getLogger(__name__)

# Values used for full-scale training on real features.
FULL_SCALE_DEFAULTS = dict(lr=4e-5, weight_decay=0.04, batch_size=64, epochs=35, temperature=0.07)


class TrainingError(RuntimeError):
    """Empty split, non-finite loss, or other failure during training."""


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters, ablation switches and model sizes.

    Defaults are desk-scale (synthetic corpus, one CPU core); see
    ``FULL_SCALE_DEFAULTS`` for the full-scale schedule.
    """

    lr: float = 1e-3
    weight_decay: float = 0.04
    batch_size: int = 16
    epochs: int = 30
    temperature: float = 0.07
    seed: int = 0
    # ablation switches
    attn_on: bool = True
    gate_on: bool = True
    mpr_on: bool = True
    cls_pooling: bool = True
    use_mpc: bool = True
    use_mpt: bool = True
    # loss
    lambda_mpc: float = 0.5
    lambda_mpt: float = 0.5
    margin: float = 0.2
    kappa: float = 10.0
    # optimizer
    beta1: float = 0.9
    beta2: float = 0.98
    eps_opt: float = 1e-8
    # model sizes
    embed_dim: int = 32
    bottleneck: int = 8
    adapter_heads: int = 2
    d_ff: int | None = None
    mpr_hidden: int | None = None
    mpr_dropout: float = 0.0
    stub_layers: int = 2
    stub_heads: int = 4
    # add the max-over-perspectives score to the global score at evaluation
    # time whenever a multi-perspective loss is active
    fuse_perspectives: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be at least 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def uses_perspectives(self) -> bool:
        return self.use_mpc or self.use_mpt

    def loss_config(self) -> LossConfig:
        return LossConfig(
            tau_inv=1.0 / self.temperature,
            margin=self.margin,
            lambda_mpc=self.lambda_mpc if self.use_mpc else 0.0,
            lambda_mpt=self.lambda_mpt if self.use_mpt else 0.0,
            kappa=self.kappa,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**values)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr_t: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.98),
    eps_opt: float = 1e-8,
) -> AdamState:
    """One in-place AdamW update with bias correction and decoupled decay."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - lr_t * weight_decay
        p.data -= lr_t * (m / c1) / (np.sqrt(v / c2) + eps_opt)
    return state


def linear_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Linear decay from ``base_lr`` at step 0 towards 0 at ``total_steps``."""
    return base_lr * (1.0 - step / total_steps)


# -------------------------------------------------------------------- model


@dataclass
class Model:
    vision: BackboneStub
    text: BackboneStub
    vision_adapters: list[AdapterParams]
    text_adapters: list[AdapterParams]
    mpr: MprParams

    def trainable(self, cfg: TrainConfig) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for branch, adapters in (("vision", self.vision_adapters), ("text", self.text_adapters)):
            for i, a in enumerate(adapters):
                for name, t in a.tensors(cfg.attn_on, cfg.gate_on).items():
                    out[f"adapter.{branch}.L{i}.{name}"] = t
        if cfg.mpr_on and cfg.uses_perspectives:
            out.update({f"mpr.{k}": t for k, t in self.mpr.tensors().items()})
        return out

    def all_params(self) -> dict[str, Tensor]:
        """Every adapter and MPR tensor, used or not."""
        out: dict[str, Tensor] = {}
        for branch, adapters in (("vision", self.vision_adapters), ("text", self.text_adapters)):
            for i, a in enumerate(adapters):
                for name, t in a.tensors(True, True).items():
                    out[f"adapter.{branch}.L{i}.{name}"] = t
        out.update({f"mpr.{k}": t for k, t in self.mpr.tensors().items()})
        return out

    def frozen(self) -> dict[str, Tensor]:
        out = {f"stub.vision.{k}": t for k, t in self.vision.tensors().items()}
        out.update({f"stub.text.{k}": t for k, t in self.text.tensors().items()})
        return out


def build_model(cfg: TrainConfig, token_width: int, K: int) -> Model:
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    pooling = "cls" if cfg.cls_pooling else "mean"
    common = dict(width=token_width, embed_dim=cfg.embed_dim, n_layers=cfg.stub_layers, heads=cfg.stub_heads)
    # both towers start from the same frozen weights, so image and caption
    # grids of one class already land near each other, as with an aligned
    # pretrained encoder pair
    stub_seed = int(seeds[0].generate_state(1)[0])
    vision = init_stub(stub_seed, pooling=pooling, **common)
    text = init_stub(stub_seed, pooling=pooling, **common)
    rng = np.random.default_rng(seeds[2])
    adapter = lambda: init_adapter(  # noqa: E731
        token_width, cfg.bottleneck, cfg.adapter_heads, cfg.d_ff, rng
    )
    vision_adapters = [adapter() for _ in range(cfg.stub_layers)]
    text_adapters = [adapter() for _ in range(cfg.stub_layers)]
    mpr = init_mpr(
        K, cfg.embed_dim, cfg.mpr_hidden, np.random.default_rng(seeds[3]), dropout_rate=cfg.mpr_dropout
    )
    return Model(vision, text, vision_adapters, text_adapters, mpr)


def _encode_images(model: Model, cfg: TrainConfig, grids) -> Tensor:
    return encode(model.vision, grids, model.vision_adapters, cfg.attn_on, cfg.gate_on)


def _encode_text(model: Model, cfg: TrainConfig, grids) -> Tensor:
    return encode(model.text, grids, model.text_adapters, cfg.attn_on, cfg.gate_on)


def _perspectives(
    model: Model, cfg: TrainConfig, subs: np.ndarray, training: bool, rng: np.random.Generator | None
) -> Tensor:
    """Perspective features (B x K x D), unit-normalized."""
    B, K, N, W = subs.shape
    G_l = _encode_images(model, cfg, subs.reshape(B * K, N, W)).reshape(B, K, cfg.embed_dim)
    if cfg.mpr_on:
        return mpr_forward(aggregate(G_l), model.mpr, training=training, rng=rng)
    return l2_normalize(G_l)


# --------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, np.ndarray]  # final trainable state (adapters + MPR)
    best_params: dict[str, np.ndarray]
    best_epoch: int
    frozen: dict[str, np.ndarray]
    token_width: int
    K: int
    history: dict[str, list[float]]
    lr_schedule: list[float]

    def final_val_report(self) -> RetrievalReport:
        h = self.history
        return RetrievalReport.from_recalls(
            {k: h[f"val_txt_R@{k}"][-1] for k in KS}, {k: h[f"val_img_R@{k}"][-1] for k in KS}
        )


HISTORY_COLUMNS = (
    ["epoch", "loss_total", "loss_base", "loss_mpc", "loss_mpt", "train_loss"]
    + [f"val_txt_R@{k}" for k in KS]
    + [f"val_img_R@{k}" for k in KS]
    + ["val_mR"]
)


def _text_vector(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _vector_text(v: np.ndarray) -> str:
    return bytes(v.astype(np.uint8).tolist()).decode("utf-8")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Store a checkpoint in an MPSF container (float64 entries, lossless)."""
    bank: dict[str, np.ndarray] = {}
    bank.update(ckpt.params)
    bank.update({f"best.{k}": v for k, v in ckpt.best_params.items()})
    bank.update(ckpt.frozen)
    bank["history"] = np.array([[ckpt.history[c][i] for c in HISTORY_COLUMNS] for i in range(len(ckpt.history["epoch"]))]).reshape(-1, len(HISTORY_COLUMNS))
    bank["lr_schedule"] = np.array(ckpt.lr_schedule, dtype=np.float64)
    meta = {"config": asdict(ckpt.config), "token_width": ckpt.token_width, "K": ckpt.K, "best_epoch": ckpt.best_epoch}
    bank["meta.json"] = _text_vector(json.dumps(meta, sort_keys=True))
    save_features(path, bank, double=True)


def load_checkpoint(path) -> Checkpoint:
    bank = load_features(path)
    meta = json.loads(_vector_text(bank.pop("meta.json")))
    hist = bank.pop("history")
    schedule = bank.pop("lr_schedule")
    best = {k[len("best.") :]: v for k, v in bank.items() if k.startswith("best.")}
    frozen = {k: v for k, v in bank.items() if k.startswith("stub.")}
    params = {k: v for k, v in bank.items() if not k.startswith(("best.", "stub."))}
    history = {c: hist[:, j].tolist() for j, c in enumerate(HISTORY_COLUMNS)}
    return Checkpoint(
        config=TrainConfig.from_mapping(meta["config"]),
        params=params,
        best_params=best,
        best_epoch=int(meta["best_epoch"]),
        frozen=frozen,
        token_width=int(meta["token_width"]),
        K=int(meta["K"]),
        history=history,
        lr_schedule=schedule.tolist(),
    )


def model_from_checkpoint(ckpt: Checkpoint, best: bool = False) -> Model:
    model = build_model(ckpt.config, ckpt.token_width, ckpt.K)
    params = ckpt.best_params if best else ckpt.params
    targets = {**model.all_params(), **model.frozen()}
    for name, value in {**params, **ckpt.frozen}.items():
        targets[name].data = np.array(value, dtype=np.float64).reshape(targets[name].shape)
    return model


# ----------------------------------------------------------------- training


def evaluate(model: Model, corpus: Corpus, split: str, cfg: TrainConfig) -> RetrievalReport:
    """Retrieval report for one split, captions in image-major order."""
    idx = corpus.indices(split)
    if idx.size == 0:
        raise TrainingError(f"split {split!r} is empty")
    with no_grad():
        G_v = l2_normalize(_encode_images(model, cfg, corpus.images[idx]))
        caps = corpus.captions[idx]
        n, c, N, W = caps.shape
        G_t = l2_normalize(_encode_text(model, cfg, caps.reshape(n * c, N, W)))
        S = similarity_matrix(G_v, G_t).data
        if cfg.uses_perspectives and cfg.fuse_perspectives:
            G_m = _perspectives(model, cfg, corpus.sub_perspectives[idx], False, None)
            S = S + s_max_matrix(G_m, G_t).data
    return compute_report(S, CAPTIONS_PER_IMAGE)


def train_objective(model: Model, corpus: Corpus, cfg: TrainConfig) -> float:
    """Total loss over the whole train split at the current parameters.

    Batches follow the stored image order, every caption of every image is
    used once and dropout is off, so two evaluations differ only through
    the parameters. The per-epoch running mean in ``loss_total`` mixes
    parameters from the start and end of the epoch and a random caption
    draw; this is the quantity to watch for descent.
    """
    idx = corpus.indices("train")
    loss_cfg = cfg.loss_config()
    total, count = 0.0, 0
    with no_grad():
        for c in range(CAPTIONS_PER_IMAGE):
            for start in range(0, idx.size, cfg.batch_size):
                batch = idx[start : start + cfg.batch_size]
                G_v = l2_normalize(_encode_images(model, cfg, corpus.images[batch]))
                G_t = l2_normalize(_encode_text(model, cfg, corpus.captions[batch, c]))
                if cfg.uses_perspectives:
                    G_m = _perspectives(model, cfg, corpus.sub_perspectives[batch], False, None)
                else:
                    G_m = G_v.reshape(len(batch), 1, cfg.embed_dim)
                total += total_loss(BatchFeatures(G_v, G_t, G_m), loss_cfg).total.item()
                count += 1
    return total / count


def train(corpus: Corpus, cfg: TrainConfig) -> Checkpoint:
    """Train adapters (and MPR) on the train split; validate after every epoch.

    Each step encodes a batch of images, one randomly chosen caption per
    image and the images' sub-perspectives, evaluates the configured loss
    stack, backpropagates and applies AdamW to the trainable tensors only.
    The learning rate decays linearly per step. Data order, caption choice
    and dropout are all driven by ``cfg.seed``.

    Raises:
        TrainingError: on an empty train/val split or a non-finite loss.
    """
    train_idx = corpus.indices("train")
    if train_idx.size == 0 or corpus.indices("val").size == 0:
        raise TrainingError("corpus needs non-empty train and val splits")

    model = build_model(cfg, corpus.token_width, corpus.K)
    params = model.trainable(cfg)
    leaves = list(params.values())
    loss_cfg = cfg.loss_config()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(5)[4])
    state = AdamState()

    steps_per_epoch = math.ceil(train_idx.size / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    history: dict[str, list[float]] = {c: [] for c in HISTORY_COLUMNS}
    schedule: list[float] = []
    best_mr, best_epoch, best_params = -1.0, 0, {}
    step = 0

    for epoch in range(cfg.epochs):
        order = rng.permutation(train_idx)
        caption_pick = rng.integers(0, CAPTIONS_PER_IMAGE, size=corpus.n_images)
        sums = np.zeros(4)
        for start in range(0, order.size, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            G_v = l2_normalize(_encode_images(model, cfg, corpus.images[batch]))
            G_t = l2_normalize(_encode_text(model, cfg, corpus.captions[batch, caption_pick[batch]]))
            if cfg.uses_perspectives:
                G_m = _perspectives(model, cfg, corpus.sub_perspectives[batch], True, rng)
            else:
                # the perspective terms carry zero weight; skip encoding them
                G_m = G_v.reshape(len(batch), 1, cfg.embed_dim)
            parts = total_loss(BatchFeatures(G_v, G_t, G_m), loss_cfg)
            values = parts.as_floats()
            if not all(math.isfinite(v) for v in values.values()):
                raise TrainingError(f"non-finite loss {values} at step {step} (epoch {epoch})")
            if not cfg.uses_perspectives:
                values["mpc"] = values["mpt"] = 0.0
            sums += [values["total"], values["base"], values["mpc"], values["mpt"]]

            grads = grad(parts.total, leaves)
            lr_t = linear_lr(cfg.lr, step, total_steps)
            schedule.append(lr_t)
            adamw_step(leaves, grads, state, lr_t, cfg.weight_decay, (cfg.beta1, cfg.beta2), cfg.eps_opt)
            step += 1

        report = evaluate(model, corpus, "val", cfg)
        means = sums / steps_per_epoch
        probe = train_objective(model, corpus, cfg)
        if not math.isfinite(probe):
            raise TrainingError(f"non-finite train objective after epoch {epoch}")
        row = [float(epoch), *means.tolist(), probe, *report.values()]
        for col, v in zip(HISTORY_COLUMNS, row):
            history[col].append(float(v))
        log.info("epoch %d loss %.4f train objective %.4f val mR %.2f", epoch, means[0], probe, report.mr)
        if report.mr > best_mr:
            best_mr, best_epoch = report.mr, epoch
            best_params = {k: t.data.copy() for k, t in model.all_params().items()}

    return Checkpoint(
        config=cfg,
        params={k: t.data.copy() for k, t in model.all_params().items()},
        best_params=best_params,
        best_epoch=best_epoch,
        frozen={k: t.data.copy() for k, t in model.frozen().items()},
        token_width=corpus.token_width,
        K=corpus.K,
        history=history,
        lr_schedule=schedule,
    )


# ----------------------------------------------------------------- ablation

GRIDS: dict[str, list[dict[str, bool]]] = {
    "attn_gate": [
        {"attn_on": False, "gate_on": False},
        {"attn_on": True, "gate_on": False},
        {"attn_on": False, "gate_on": True},
        {"attn_on": True, "gate_on": True},
    ],
    "cls": [{"cls_pooling": False}, {"cls_pooling": True}],
    "mpr": [{"mpr_on": False}, {"mpr_on": True}],
    "losses": [
        {"use_mpc": False, "use_mpt": False},
        {"use_mpc": True, "use_mpt": False},
        {"use_mpc": False, "use_mpt": True},
        {"use_mpc": True, "use_mpt": True},
    ],
}

_LABELS = {
    "attn_on": "Attn",
    "gate_on": "Gate",
    "cls_pooling": "[CLS]",
    "mpr_on": "MPR",
    "use_mpc": "L_MPC",
    "use_mpt": "L_MPT",
}


def _run_row(args) -> tuple[dict[str, object], RetrievalReport]:
    corpus, cfg, overrides, split = args
    ckpt = train(corpus, cfg)
    model = model_from_checkpoint(ckpt)
    labels: dict[str, object] = {}
    if "use_mpc" in overrides or "use_mpt" in overrides:
        labels["L_Base"] = True
    labels.update({_LABELS.get(k, k): v for k, v in overrides.items()})
    if "attn_on" in overrides or "gate_on" in overrides:
        labels["Params"] = count_params(model.vision_adapters[0], cfg.attn_on, cfg.gate_on)
    return labels, evaluate(model, corpus, split, cfg)


def ablate(
    corpus: Corpus,
    base_cfg: TrainConfig,
    grid: Sequence[Mapping[str, object]],
    split: str = "test",
    jobs: int = 1,
) -> list[tuple[dict[str, object], RetrievalReport]]:
    """Train one model per grid row (same seed and data order) and report ``split``.

    ``Params`` in Attn/Gate grids is the learnable-scalar count of a single
    adapter.
    """
    if not grid:
        raise ValueError("ablation grid is empty")
    tasks = [(corpus, replace(base_cfg, **dict(row)), dict(row), split) for row in grid]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_row, tasks))
    return [_run_row(t) for t in tasks]
