"""Optimization loop, checkpointing, and model selection.

Training composes domain-even batches, applies image-space augmentation,
and runs Adam over the total objective. After every epoch the test split
is scored, a checkpoint is written, and the checkpoint with the best
selection AUC (held-out domain by default) is retained as the winner.
Single-threaded runs with a fixed seed are byte-identical end to end.
"""

from __future__ import annotations

import ctypes
import json
import os
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, backward
from .backbone import BackboneConfig
from .metrics import EvalRecord, auc, evaluate
from .model import AblationFlags, Model, ModelConfig
from .synthdata import BatchComposer, DatasetManifest, augment_image
from .tensorio import tensor_from_bytes, tensor_to_bytes

EVAL_CHUNK = 24


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 12
    base_lr: float = 2e-5
    lr_decay: float = 0.9
    lr_decay_every: int = 5
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    lam: float = 0.5
    tile_n: int = 4
    ensemble_weights: tuple = (1.0, 1.0, 1.0)
    tau: float = 0.5
    noise_sigma: float = 0.01
    use_cve: bool = True
    use_mixstyle_stages: bool = True
    use_global_encoder: bool = True
    use_micl: bool = True
    seed: int = 0
    selection: str = "unseen"          # or "seen-holdout"
    input_size: int = 128
    stage_channels: tuple = (16, 32, 64, 128)

    def __post_init__(self):
        if self.base_lr <= 0 or self.lr_decay <= 0:
            raise ValueError("rates must be positive")
        if self.selection not in ("unseen", "seen-holdout"):
            raise ValueError(f"unknown selection mode {self.selection!r}")

    def flags(self) -> AblationFlags:
        return AblationFlags(use_cve=self.use_cve,
                             use_mixstyle_stages=self.use_mixstyle_stages,
                             use_global_encoder=self.use_global_encoder,
                             use_micl=self.use_micl)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            backbone=BackboneConfig(stage_channels=tuple(self.stage_channels),
                                    input_size=self.input_size),
            flags=self.flags(), tile_n=self.tile_n, tau=self.tau,
            lam=self.lam, noise_sigma=self.noise_sigma,
            ensemble_weights=tuple(self.ensemble_weights))


def train_config_from_dict(data: dict) -> TrainConfig:
    known = set(TrainConfig.__dataclass_fields__)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    clean = dict(data)
    for key in ("adam_betas", "ensemble_weights", "stage_channels"):
        if key in clean:
            clean[key] = tuple(clean[key])
    return TrainConfig(**clean)


def load_train_config(path) -> TrainConfig:
    with open(path) as fh:
        return train_config_from_dict(json.load(fh))


def lr_at_epoch(base_lr: float, epoch: int, decay: float = 0.9, every: int = 5) -> float:
    """Step decay: base * decay^(epoch // every)."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return base_lr * decay ** (epoch // every)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def create(cls, params: dict):
        return cls(m={k: np.zeros_like(t.data) for k, t in params.items()},
                   v={k: np.zeros_like(t.data) for k, t in params.items()})


def adam_step(params: dict, state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """Standard bias-corrected Adam, in place."""
    b1, b2 = betas
    state.step += 1
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for name, tensor in params.items():
        g = tensor.grad
        if g is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        m_hat = m / correction1
        v_hat = v / correction2
        tensor.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(tensor.data.dtype)


# ---------------------------------------------------------------------------
# checkpoint format (MDGC)


CKPT_MAGIC = b"MDGC"
CKPT_VERSION = 0x01


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    epoch: int
    step: int
    params: dict                 # name -> ndarray
    adam_m: dict
    adam_v: dict
    metrics: dict = field(default_factory=dict)

    def train_config(self) -> TrainConfig:
        return train_config_from_dict(self.config)


def _blob_entries(ckpt: Checkpoint):
    for name in ckpt.params:
        yield f"param/{name}", ckpt.params[name]
    for name in ckpt.adam_m:
        yield f"adam.m/{name}", ckpt.adam_m[name]
    for name in ckpt.adam_v:
        yield f"adam.v/{name}", ckpt.adam_v[name]


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps({
        "format_version": CKPT_VERSION,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "config": ckpt.config,
        "metrics": ckpt.metrics,
        "param_names": list(ckpt.params),
    }, sort_keys=True).encode("utf-8")
    parts = [struct.pack("<I", len(header)), header]
    entries = list(_blob_entries(ckpt))
    parts.append(struct.pack("<I", len(entries)))
    for name, arr in entries:
        nb = name.encode("utf-8")
        blob = tensor_to_bytes(arr)
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<Q", len(blob)))
        parts.append(blob)
    payload = b"".join(parts)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    return CKPT_MAGIC + bytes([CKPT_VERSION]) + struct.pack("<I", crc) + payload


def checkpoint_from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < 9 or blob[:4] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if blob[4] != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {blob[4]}")
    crc_stored = struct.unpack("<I", blob[5:9])[0]
    payload = blob[9:]
    if (zlib.crc32(payload) & 0xFFFFFFFF) != crc_stored:
        raise CheckpointError("checksum mismatch: checkpoint corrupted")
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(payload):
            raise CheckpointError("truncated checkpoint payload")
        out = payload[off:off + n]
        off += n
        return out

    header_len = struct.unpack("<I", take(4))[0]
    header = json.loads(take(header_len).decode("utf-8"))
    n_entries = struct.unpack("<I", take(4))[0]
    tables = {"param": {}, "adam.m": {}, "adam.v": {}}
    for _ in range(n_entries):
        name_len = struct.unpack("<I", take(4))[0]
        name = take(name_len).decode("utf-8")
        blob_len = struct.unpack("<Q", take(8))[0]
        arr = tensor_from_bytes(take(blob_len))
        kind, _, pname = name.partition("/")
        if kind not in tables:
            raise CheckpointError(f"unknown entry kind {kind!r}")
        tables[kind][pname] = arr
    return Checkpoint(config=header["config"], epoch=header["epoch"],
                      step=header["step"], params=tables["param"],
                      adam_m=tables["adam.m"], adam_v=tables["adam.v"],
                      metrics=header["metrics"])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


def snapshot_model(model: Model, config: TrainConfig, state: AdamState,
                   epoch: int, metrics: dict) -> Checkpoint:
    return Checkpoint(
        config=_config_to_jsonable(config), epoch=epoch, step=state.step,
        params={k: t.data.copy() for k, t in model.params.items()},
        adam_m={k: v.copy() for k, v in state.m.items()},
        adam_v={k: v.copy() for k, v in state.v.items()},
        metrics=metrics)


def _config_to_jsonable(config: TrainConfig) -> dict:
    data = asdict(config)
    for key in ("adam_betas", "ensemble_weights", "stage_channels"):
        data[key] = list(data[key])
    return data


def restore_model(ckpt: Checkpoint) -> Model:
    """Rebuild the model a checkpoint was saved from, loading its weights."""
    config = ckpt.train_config()
    model = Model(config.model_config(), seed=config.seed, dtype=np.float32)
    load_params_into(model, ckpt)
    return model


def load_params_into(model: Model, ckpt: Checkpoint) -> None:
    missing = sorted(set(model.params) - set(ckpt.params))
    extra = sorted(set(ckpt.params) - set(model.params))
    if missing or extra:
        raise CheckpointError(
            f"parameter table mismatch; missing: {missing or '[]'}, extra: {extra or '[]'}")
    for name, tensor in model.params.items():
        arr = ckpt.params[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise CheckpointError(f"shape mismatch for {name}: "
                                  f"{arr.shape} vs {tensor.shape}")
        tensor.data[...] = arr.astype(tensor.data.dtype)


# ---------------------------------------------------------------------------
# evaluation helpers shared by the trainer and the CLI


def _load_split_images(manifest: DatasetManifest, rows):
    images = {}
    for row in rows:
        images[row.sample_id] = manifest.load_pair(row)
    return images


def score_rows(model: Model, manifest: DatasetManifest, rows,
               cache: dict | None = None) -> list:
    """Breast-level scores for manifest rows, fixed chunking, eval mode."""
    records = []
    for start in range(0, len(rows), EVAL_CHUNK):
        chunk = rows[start:start + EVAL_CHUNK]
        ccs, mlos = [], []
        for row in chunk:
            if cache is not None and row.sample_id in cache:
                cc, mlo = cache[row.sample_id]
            else:
                cc, mlo = manifest.load_pair(row)
                if cache is not None:
                    cache[row.sample_id] = (cc, mlo)
            ccs.append(cc)
            mlos.append(mlo)
        scores = model.predict(np.stack(ccs), np.stack(mlos))
        for row, s in zip(chunk, scores):
            records.append(EvalRecord(row.sample_id, row.domain_id,
                                      float(s), row.label))
    return records


def evaluate_test_split(model: Model, manifest: DatasetManifest,
                      cache: dict | None = None):
    rows = manifest.select(split="test")
    records = score_rows(model, manifest, rows, cache)
    report = evaluate(records, domains=sorted({r.domain_id for r in records}))
    return records, report


def selection_auc(records, manifest: DatasetManifest, mode: str) -> float:
    if mode == "unseen":
        wanted = set(manifest.unseen_domains)
    else:
        wanted = set(manifest.seen_domains)
    subset = [r for r in records if r.domain_id in wanted]
    return auc(subset)


def seen_unseen_aucs(records, manifest: DatasetManifest):
    seen = [r for r in records if r.domain_id in set(manifest.seen_domains)]
    unseen = [r for r in records if r.domain_id in set(manifest.unseen_domains)]
    return (auc(seen) if seen else None, auc(unseen) if unseen else None)


# ---------------------------------------------------------------------------
# training loop


def tune_allocator() -> None:
    """Raise glibc's mmap threshold so big temporaries get recycled."""
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 512 * 1024 * 1024)   # M_MMAP_THRESHOLD
        libc.mallopt(-1, 128 * 1024 * 1024)   # M_TRIM_THRESHOLD
    except OSError:
        pass


@dataclass
class TrainResult:
    best_path: str
    last_path: str
    history: list
    best_epoch: int
    best_selection_auc: float
    diverged: bool = False


def train(config: TrainConfig, manifest: DatasetManifest, out_dir,
          stop_when=None, log=None) -> TrainResult:
    """Full training run; returns the best-selection checkpoint paths."""
    if not manifest.seen_domains:
        raise ValueError("manifest has no seen domains")
    if config.selection == "unseen" and not manifest.unseen_domains:
        raise ValueError("unseen-domain selection needs unseen domains in the manifest")
    os.makedirs(out_dir, exist_ok=True)
    tune_allocator()

    probe_cc, _ = manifest.load_pair(manifest.rows[0])
    if probe_cc.shape[-1] != config.input_size:
        raise ValueError(
            f"config input_size={config.input_size} but dataset images are "
            f"{probe_cc.shape[-1]}x{probe_cc.shape[-2]}; adjust the config")

    model = Model(config.model_config(), seed=config.seed, dtype=np.float32)
    state = AdamState.create(model.params)
    seeds = np.random.SeedSequence((config.seed, 0xBA7C)).spawn(3)
    rng_batches = np.random.default_rng(seeds[0])
    rng_augment = np.random.default_rng(seeds[1])
    rng_model = np.random.default_rng(seeds[2])

    composer = BatchComposer(manifest, config.batch_size,
                             manifest.seen_domains, rng_batches)
    train_cache = _load_split_images(manifest, manifest.select(split="train",
                                                               domains=manifest.seen_domains))
    eval_cache = {}

    best_path = os.path.join(out_dir, "best.mdgc")
    last_path = os.path.join(out_dir, "last.mdgc")
    history = []
    best_sel, best_epoch = -np.inf, -1
    diverged = False

    def emit(msg):
        if log:
            log(msg)

    if config.epochs == 0:
        records, report = evaluate_test_split(model, manifest, eval_cache)
        sel = selection_auc(records, manifest, config.selection)
        ckpt = snapshot_model(model, config, state, epoch=-1, metrics={
            "report": report, "selection_auc": sel, "selection": config.selection})
        save_checkpoint(ckpt, best_path)
        save_checkpoint(ckpt, last_path)
        return TrainResult(best_path, last_path, [], -1, sel)

    for epoch in range(config.epochs):
        epoch_start = time.time()
        lr = lr_at_epoch(config.base_lr, epoch, config.lr_decay, config.lr_decay_every)
        composer.start_epoch()
        losses = []
        try:
            for _ in range(composer.steps_per_epoch):
                rows = composer.next_batch()
                ccs, mlos, labels = [], [], []
                for row in rows:
                    cc, mlo = train_cache[row.sample_id]
                    ccs.append(augment_image(cc, rng_augment))
                    mlos.append(augment_image(mlo, rng_augment))
                    labels.append(row.label)
                cc_batch = np.stack(ccs).astype(np.float32)
                mlo_batch = np.stack(mlos).astype(np.float32)
                model.zero_grads()
                with Tape() as tape:
                    out = model.loss(cc_batch, mlo_batch, np.array(labels),
                                     training=True, rng=rng_model)
                backward(tape, out.total)
                adam_step(model.params, state, lr,
                          betas=config.adam_betas, eps=config.adam_eps)
                losses.append(float(out.total.data))
        except NonFiniteError as exc:
            emit(f"epoch {epoch}: aborted on non-finite values ({exc}); "
                 "keeping last good checkpoint")
            diverged = True
            break

        records, report = evaluate_test_split(model, manifest, eval_cache)
        sel = selection_auc(records, manifest, config.selection)
        seen_auc, unseen_auc = seen_unseen_aucs(records, manifest)
        entry = {
            "epoch": epoch,
            "lr": lr,
            "mean_loss": float(np.mean(losses)) if losses else None,
            "selection_auc": sel,
            "seen_test_auc": seen_auc,
            "unseen_test_auc": unseen_auc,
            "seconds": round(time.time() - epoch_start, 3),
        }
        history.append(entry)
        emit(f"epoch {epoch}: loss={entry['mean_loss']:.4f} "
             f"seen={seen_auc if seen_auc is None else round(seen_auc, 4)} "
             f"unseen={unseen_auc if unseen_auc is None else round(unseen_auc, 4)} "
             f"lr={lr:.2e} ({entry['seconds']}s)")

        ckpt = snapshot_model(model, config, state, epoch, metrics={
            "report": report, "selection_auc": sel,
            "selection": config.selection, "epoch": epoch})
        save_checkpoint(ckpt, last_path)
        if sel > best_sel:
            best_sel, best_epoch = sel, epoch
            save_checkpoint(ckpt, best_path)
        if stop_when is not None and stop_when(entry):
            emit(f"epoch {epoch}: stop condition met")
            break

    if not os.path.exists(best_path):
        records, report = evaluate_test_split(model, manifest, eval_cache)
        sel = selection_auc(records, manifest, config.selection)
        ckpt = snapshot_model(model, config, state, epoch=-1, metrics={
            "report": report, "selection_auc": sel, "selection": config.selection})
        save_checkpoint(ckpt, best_path)
        save_checkpoint(ckpt, last_path)
        best_sel, best_epoch = sel, -1

    with open(os.path.join(out_dir, "history.json"), "w") as fh:
        json.dump(history, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return TrainResult(best_path, last_path, history, best_epoch,
                       float(best_sel), diverged)
