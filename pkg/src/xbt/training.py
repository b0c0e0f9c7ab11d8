"""Training pipelines: text-only pretraining of the projection, cross-modal
fine-tuning under the LN-only policy, the direct-contrastive baselines, and
the continual (multi-generation) chain. Also owns the checkpoint format.

Checkpoint format ("XBTC"): little-endian
    magic 4s | version u32 | header_len u64 | header JSON | array payload
where the header describes stage, config echo, model metadata, and the
dtype/shape/offset of every serialized array.
"""

import hashlib
import json
import os
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .adapters import LoraAdapter, lora_apply, lora_backward, lora_init
from .data import FormatError, PairedDataset, batch_iter
from .layers import (
    LayerNormParams,
    LinearParams,
    ProjectionParams,
    phi_forward,
    phi_init,
)
from .losses import NoiseSpec, direct_loss, pretrain_loss, xbt_loss
from .optim import POLICIES, AdamW, clip_gradients, freezing_policy

CKPT_MAGIC = b"XBTC"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sIQ")

# batch sizes reported for the full-scale (multi-GPU) setting; the config
# defaults below are scaled down for single-machine runs
PAPER_BATCH_PRETRAIN = 8192
PAPER_BATCH_XBT = 1024

# seed-derivation tags
_TAG_PHI_INIT = 1
_TAG_LORA_IMAGE = 2
_TAG_LORA_TEXT = 3
_TAG_BATCH = 4
_TAG_NOISE = 5
_TAG_DROPOUT = 6


class NonFiniteLossError(Exception):
    """Raised when a training step produces a NaN or infinite loss."""


@dataclass
class LoraConfig:
    alpha: float = 16.0
    rank: int = 16
    dropout: float = 0.1


@dataclass
class SoftPromptConfig:
    """Prompt-tuning settings of the full-scale recipe. Recorded in configs
    for completeness; prompt tuning needs token-level encoder access, so no
    code path consumes them."""

    count: int = 10
    lr: float = 1e-2


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    log_scale_pre: float = 2.6592
    log_scale_x: float = 2.6592
    log_scale_n: float = 2.6592
    sigma: float = 0.1
    batch_pretrain: int = 1024
    batch_xbt: int = 256
    epochs: int = 1
    seed: int = 0
    policy: str = "xbt"
    lora: LoraConfig = field(default_factory=LoraConfig)
    clip_grad: float | None = None
    soft_prompt: SoftPromptConfig = field(default_factory=SoftPromptConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_pretrain < 1 or self.batch_xbt < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")


@dataclass
class TrainLog:
    stage: str
    losses: list[float]
    wall_clock: float
    param_checksums: dict[str, str]
    # final optimizer, kept so callers can serialize its state into
    # checkpoints; never part of the log's JSON rendering
    optimizer: AdamW | None = None


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, dtype=np.uint64)[0])


def _checksums(params: dict[str, np.ndarray]) -> dict[str, str]:
    return {k: hashlib.sha256(np.ascontiguousarray(v).tobytes()).hexdigest()
            for k, v in sorted(params.items())}


def _check_finite(loss: float, stage: str) -> None:
    if not np.isfinite(loss):
        raise NonFiniteLossError(f"{stage}: non-finite loss {loss}")


def _phi_params(phi: ProjectionParams) -> dict[str, np.ndarray]:
    return {"phi." + k: v for k, v in phi.flat().items()}


def _adapter_params(adapters) -> dict[str, np.ndarray]:
    img, txt = adapters
    return {
        "adapter_image.a": img.a, "adapter_image.b": img.b,
        "adapter_text.a": txt.a, "adapter_text.b": txt.b,
    }


def init_adapters(cfg: TrainConfig, dim: int) -> tuple[LoraAdapter, LoraAdapter]:
    """One adapter per modality, seeded from the run seed."""
    img = lora_init(dim, cfg.lora.rank, cfg.lora.alpha,
                    seed=_derive_seed(cfg.seed, _TAG_LORA_IMAGE), dropout_p=cfg.lora.dropout)
    txt = lora_init(dim, cfg.lora.rank, cfg.lora.alpha,
                    seed=_derive_seed(cfg.seed, _TAG_LORA_TEXT), dropout_p=cfg.lora.dropout)
    return img, txt


def run_text_pretrain(cfg: TrainConfig, w_new: np.ndarray, w_old: np.ndarray):
    """Stage one: train every projection parameter to align new-model text
    embeddings with old-model text embeddings. Encoders (here: the fixed
    embedding matrices) are never updated."""
    if w_new.shape[0] != w_old.shape[0]:
        raise ValueError(f"row-count mismatch: {w_new.shape[0]} vs {w_old.shape[0]}")
    t0 = time.perf_counter()
    phi = phi_init(w_new.shape[1], w_old.shape[1], seed=_derive_seed(cfg.seed, _TAG_PHI_INIT))
    params = _phi_params(phi)
    opt = AdamW.simple(params, cfg.lr, cfg.weight_decay)
    losses: list[float] = []
    n = w_new.shape[0]
    for epoch in range(cfg.epochs):
        batch_seed = _derive_seed(cfg.seed, _TAG_BATCH, 0, epoch)
        for step, idx in enumerate(batch_iter(n, cfg.batch_pretrain, seed=batch_seed)):
            noise = NoiseSpec(cfg.sigma, _derive_seed(cfg.seed, _TAG_NOISE, epoch, step))
            loss, grads = pretrain_loss(
                phi, w_new[idx], w_old[idx], noise, cfg.log_scale_pre)
            _check_finite(loss, "pretrain")
            grads = {"phi." + k: g for k, g in grads.items()}
            if cfg.clip_grad is not None:
                clip_gradients(grads, cfg.clip_grad)
            opt.step(grads)
            losses.append(loss)
    log = TrainLog("pretrain", losses, time.perf_counter() - t0, _checksums(params),
                   optimizer=opt)
    return phi, log


def run_xbt(cfg: TrainConfig, phi_pre: ProjectionParams, pairs: PairedDataset,
            adapters: tuple[LoraAdapter, LoraAdapter] | None = None):
    """Stage two: fine-tune on new-generation image-text pairs only. Just the
    projection's layer-norm parameters and the adapters move; everything
    learned in pretraining stays frozen."""
    if cfg.policy != "xbt":
        raise ValueError("run_xbt requires policy 'xbt'; baselines go through run_direct")
    if pairs.image_emb.shape[1] != phi_pre.d_new or pairs.text_emb.shape[1] != phi_pre.d_new:
        raise ValueError("pair embedding dim does not match the projection input dim")
    t0 = time.perf_counter()
    phi = phi_pre.copy()
    if adapters is None:
        adapters = init_adapters(cfg, phi.d_new)
    else:
        adapters = (adapters[0].copy(), adapters[1].copy())
    ad_img, ad_txt = adapters
    params = {**_phi_params(phi), **_adapter_params(adapters)}
    trainable = freezing_policy("xbt", params)
    opt = AdamW.simple(params, cfg.lr, cfg.weight_decay, trainable)
    drop_rng = np.random.default_rng(_derive_seed(cfg.seed, _TAG_DROPOUT))
    losses: list[float] = []
    n = pairs.n_captions
    for epoch in range(cfg.epochs):
        batch_seed = _derive_seed(cfg.seed, _TAG_BATCH, 1, epoch)
        for idx in batch_iter(n, cfg.batch_xbt, seed=batch_seed):
            v = pairs.image_emb[pairs.pair_of[idx]]
            w = pairs.text_emb[idx]
            ev, cache_v = lora_apply(ad_img, v, training=True, rng=drop_rng)
            ew, cache_w = lora_apply(ad_txt, w, training=True, rng=drop_rng)
            res = xbt_loss(phi, ev, ew, cfg.log_scale_x)
            _check_finite(res.loss, "xbt")
            da_i, db_i, _ = lora_backward(res.d_image, cache_v)
            da_t, db_t, _ = lora_backward(res.d_text, cache_w)
            grads = {"phi." + k: g for k, g in res.phi_grads.items()}
            grads.update({"adapter_image.a": da_i, "adapter_image.b": db_i,
                          "adapter_text.a": da_t, "adapter_text.b": db_t})
            if cfg.clip_grad is not None:
                clip_gradients(grads, cfg.clip_grad)
            opt.step(grads)
            losses.append(res.loss)
    log = TrainLog("xbt", losses, time.perf_counter() - t0, _checksums(params), optimizer=opt)
    return phi, adapters, log


def run_direct(cfg: TrainConfig, pairs_new: PairedDataset, pairs_old: PairedDataset,
               policy: str):
    """Direct-backward baseline: a fresh (never pretrained) projection is
    trained against frozen old embeddings of the opposite modality, under
    the requested freezing policy."""
    if policy not in ("full_tune", "lora_only", "base"):
        raise ValueError(f"run_direct policies are full_tune/lora_only/base, got {policy!r}")
    if pairs_new.n_captions != pairs_old.n_captions or pairs_new.n_images != pairs_old.n_images:
        raise ValueError("old/new pair datasets must be aligned")
    if not np.array_equal(pairs_new.pair_of, pairs_old.pair_of):
        raise ValueError("old/new pairings must be identical")
    t0 = time.perf_counter()
    phi = phi_init(pairs_new.image_emb.shape[1], pairs_old.image_emb.shape[1],
                   seed=_derive_seed(cfg.seed, _TAG_PHI_INIT))
    adapters = init_adapters(cfg, phi.d_new)
    ad_img, ad_txt = adapters
    params = {**_phi_params(phi), **_adapter_params(adapters)}
    trainable = freezing_policy(policy, params)
    opt = AdamW.simple(params, cfg.lr, cfg.weight_decay, trainable)
    drop_rng = np.random.default_rng(_derive_seed(cfg.seed, _TAG_DROPOUT))
    losses: list[float] = []
    n = pairs_new.n_captions
    for epoch in range(cfg.epochs):
        batch_seed = _derive_seed(cfg.seed, _TAG_BATCH, 2, epoch)
        for idx in batch_iter(n, cfg.batch_xbt, seed=batch_seed):
            img_idx = pairs_new.pair_of[idx]
            ev, cache_v = lora_apply(ad_img, pairs_new.image_emb[img_idx], True, drop_rng)
            ew, cache_w = lora_apply(ad_txt, pairs_new.text_emb[idx], True, drop_rng)
            res = direct_loss(phi, ev, ew, pairs_old.image_emb[img_idx],
                              pairs_old.text_emb[idx], cfg.log_scale_n)
            _check_finite(res.loss, "direct")
            da_i, db_i, _ = lora_backward(res.d_image, cache_v)
            da_t, db_t, _ = lora_backward(res.d_text, cache_w)
            grads = {"phi." + k: g for k, g in res.phi_grads.items()}
            grads.update({"adapter_image.a": da_i, "adapter_image.b": db_i,
                          "adapter_text.a": da_t, "adapter_text.b": db_t})
            if cfg.clip_grad is not None:
                clip_gradients(grads, cfg.clip_grad)
            opt.step(grads)
            losses.append(res.loss)
    log = TrainLog(f"direct:{policy}", losses, time.perf_counter() - t0, _checksums(params),
                   optimizer=opt)
    return phi, adapters, log


def project_embeddings(phi: ProjectionParams, adapter: LoraAdapter | None,
                       emb: np.ndarray) -> np.ndarray:
    """Inference-mode composition: adapter (if any) then projection."""
    if adapter is not None:
        emb, _ = lora_apply(adapter, emb, training=False)
    out, _ = phi_forward(phi, emb, normalize_output=True)
    return out


@dataclass
class ContinualStage:
    """Data for one link of the continual chain: the incoming generation's
    text corpus and train pairs, plus the previous generation's raw text
    embeddings of the same corpus. Id arrays let the chain enforce that
    stages use disjoint halves of the shared pools."""

    name: str
    pretrain_new: np.ndarray
    pretrain_prev: np.ndarray
    pairs_new: PairedDataset
    text_ids: np.ndarray
    pair_ids: np.ndarray


@dataclass
class StageResult:
    name: str
    phi: ProjectionParams
    adapters: tuple[LoraAdapter, LoraAdapter]
    pretrain_log: TrainLog
    xbt_log: TrainLog


def run_continual(cfg: TrainConfig, stages: list[ContinualStage],
                  checkpoint_dir: str | None = None) -> list[StageResult]:
    """Chain the two-stage pipeline across model generations: stage k aligns
    generation k+1 to the composed (adapter + projection) output of stage
    k-1, so the oldest gallery is never re-embedded."""
    if not stages:
        raise ValueError("at least one stage required")
    for i in range(len(stages)):
        for j in range(i + 1, len(stages)):
            if np.intersect1d(stages[i].text_ids, stages[j].text_ids).size:
                raise ValueError(
                    f"stages {stages[i].name!r} and {stages[j].name!r} share pretrain texts")
            if np.intersect1d(stages[i].pair_ids, stages[j].pair_ids).size:
                raise ValueError(
                    f"stages {stages[i].name!r} and {stages[j].name!r} share train pairs")
    results: list[StageResult] = []
    for k, st in enumerate(stages):
        if k == 0:
            targets = st.pretrain_prev
        else:
            prev = results[k - 1]
            targets = project_embeddings(prev.phi, prev.adapters[1], st.pretrain_prev)
        phi, pre_log = run_text_pretrain(cfg, st.pretrain_new, targets)
        phi, adapters, xbt_log = run_xbt(cfg, phi, st.pairs_new)
        results.append(StageResult(st.name, phi, adapters, pre_log, xbt_log))
        if checkpoint_dir is not None:
            save_checkpoint(
                os.path.join(checkpoint_dir, f"stage_{k + 1}_{st.name}.ckpt"),
                stage=f"continual:{k + 1}:{st.name}", cfg=cfg, phi=phi, adapters=adapters)
    return results


@dataclass
class Checkpoint:
    stage: str
    config: dict
    phi: ProjectionParams
    adapters: tuple[LoraAdapter, LoraAdapter] | None
    opt_state: dict | None


def _atomic_write(path: str, payload: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def save_checkpoint(path: str, stage: str, cfg: TrainConfig, phi: ProjectionParams,
                    adapters=None, optimizer: AdamW | None = None) -> None:
    arrays: dict[str, np.ndarray] = dict(_phi_params(phi))
    meta_adapters = None
    if adapters is not None:
        arrays.update(_adapter_params(adapters))
        meta_adapters = {
            side: {"alpha": ad.alpha, "rank": ad.rank,
                   "dropout_p": ad.dropout_p, "seed": ad.seed}
            for side, ad in (("image", adapters[0]), ("text", adapters[1]))
        }
    meta_opt = None
    if optimizer is not None:
        state = optimizer.state_dict()
        meta_opt = {"step": state["step"]}
        for k, a in state["m"].items():
            arrays["opt.m." + k] = a
        for k, a in state["v"].items():
            arrays["opt.v." + k] = a

    index = []
    offset = 0
    payload = bytearray()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        raw = a.tobytes()
        index.append({"name": name, "dtype": str(a.dtype), "shape": list(a.shape),
                      "offset": offset, "nbytes": len(raw)})
        payload.extend(raw)
        offset += len(raw)
    header = json.dumps({
        "stage": stage,
        "config": asdict(cfg),
        "phi": {"d_new": phi.d_new, "d_old": phi.d_old, "hidden": phi.hidden,
                "ln_eps": phi.ln1.eps},
        "adapters": meta_adapters,
        "optimizer": meta_opt,
        "arrays": index,
    }, sort_keys=True).encode()
    _atomic_write(path, _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(header))
                  + header + bytes(payload))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _CKPT_HEAD.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, header_len = _CKPT_HEAD.unpack_from(blob, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0, expected {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[_CKPT_HEAD.size:_CKPT_HEAD.size + header_len])
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: corrupt checkpoint header: {e}") from e
    base = _CKPT_HEAD.size + header_len
    arrays = {}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(blob):
            raise FormatError(
                f"{path}: array {entry['name']} expects bytes up to {end}, file has {len(blob)}")
        arrays[entry["name"]] = np.frombuffer(
            blob[start:end], dtype=entry["dtype"]).reshape(entry["shape"]).copy()

    ln_eps = header["phi"]["ln_eps"]
    phi = ProjectionParams(
        lin1=LinearParams(arrays["phi.lin1.weight"], arrays["phi.lin1.bias"]),
        ln1=LayerNormParams(arrays["phi.ln1.gamma"], arrays["phi.ln1.beta"], ln_eps),
        lin2=LinearParams(arrays["phi.lin2.weight"], arrays["phi.lin2.bias"]),
        ln2=LayerNormParams(arrays["phi.ln2.gamma"], arrays["phi.ln2.beta"], ln_eps),
        lin3=LinearParams(arrays["phi.lin3.weight"], arrays["phi.lin3.bias"]),
    )
    adapters = None
    if header["adapters"] is not None:
        built = {}
        for side in ("image", "text"):
            meta = header["adapters"][side]
            built[side] = LoraAdapter(
                a=arrays[f"adapter_{side}.a"], b=arrays[f"adapter_{side}.b"],
                alpha=meta["alpha"], rank=meta["rank"],
                dropout_p=meta["dropout_p"], seed=meta["seed"])
        adapters = (built["image"], built["text"])
    opt_state = None
    if header["optimizer"] is not None:
        opt_state = {
            "step": header["optimizer"]["step"],
            "m": {k[len("opt.m."):]: a for k, a in arrays.items() if k.startswith("opt.m.")},
            "v": {k[len("opt.v."):]: a for k, a in arrays.items() if k.startswith("opt.v.")},
        }
    return Checkpoint(stage=header["stage"], config=header["config"], phi=phi,
                      adapters=adapters, opt_state=opt_state)
