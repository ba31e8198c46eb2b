"""Stage-(a) contrastive pretraining loop."""

from __future__ import annotations

import json
import logging
import math
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
import torch

from ..config import STRATEGIES, config_hash
from ..data.manifest import DatasetManifest
from ..pairing import ViewRecord, bundle, materialize
from ..styles.parametric import style_table
from ..styles.pool import StylePool
from .augment import AugmentConfig, augment, resize
from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import ContrastiveModel, EncoderConfig
from .losses import nt_xent

log = logging.getLogger(__name__)


class PretrainError(RuntimeError):
    pass


@contextmanager
def deterministic_mode():
    """Single-threaded, deterministic-kernel torch for bitwise-repeatable runs."""
    threads = torch.get_num_threads()
    was = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(was)
        torch.set_num_threads(threads)


def ssl_records(manifest: DatasetManifest, max_images: int | None = None,
                seed: int = 0) -> list[tuple[ViewRecord, Any]]:
    """Self-supervision records of seen domains, keeping CC/MLO pairs together."""
    entries = manifest.select(split="self-supervision")
    bad = [e for e in entries if e.domain in set(manifest.unseen_domains)]
    if bad:
        raise PretrainError(
            f"{len(bad)} unseen-domain images found in the self-supervision split (e.g. {bad[0].image})")
    if max_images is not None and max_images < len(entries):
        breasts = sorted({(e.domain, e.patient_id, e.laterality) for e in entries})
        order = np.random.default_rng([seed, 31]).permutation(len(breasts))
        chosen = {breasts[i] for i in order[: max(1, max_images // 2)]}
        entries = [e for e in entries if (e.domain, e.patient_id, e.laterality) in chosen]
    return [(ViewRecord(e.patient_id, e.laterality, e.view, i, e.domain), e) for i, e in enumerate(entries)]


def load_images_downsampled(manifest: DatasetManifest, entries, factor: int = 2) -> np.ndarray:
    """Stack the entries' images at ``1/factor`` resolution."""
    out = []
    for e in entries:
        img = manifest.load(e).image
        h, w = img.shape
        out.append(resize(img, (h // factor, w // factor)))
    return np.stack(out).astype(np.float32)


def pretrain_fingerprint(cfg: Mapping[str, Any], strategy: str, n_images: int,
                         init: str | None) -> str:
    return config_hash({"data": cfg["data"]["seen_counts"], "styles": cfg["styles"]["table"],
                        "pairing": {**cfg["pairing"], "strategy": strategy},
                        "learning": cfg["learning"], "seed": cfg["seed"], "n": n_images,
                        "init": init})


def _cosine(step: int, total: int, base: float) -> float:
    return 0.5 * base * (1 + math.cos(math.pi * min(step, total) / max(total, 1)))


def pretrain(manifest: DatasetManifest, strategy: str, cfg: Mapping[str, Any], *,
             init_state: Mapping[str, torch.Tensor] | None = None, init_tag: str | None = None,
             out_path: str | Path | None = None, resume: bool = False,
             images: np.ndarray | None = None,
             on_step: Callable[[int, float], None] | None = None) -> dict[str, Any]:
    """Train encoder + projection head with the given pairing strategy.

    ``cfg`` is a full run config (``pairing``, ``learning``, ``styles``,
    ``seed``). Returns the checkpoint payload; when ``out_path`` is given it
    is saved after every epoch, together with a JSON-lines loss curve.
    """
    if strategy not in STRATEGIES:
        raise PretrainError(f"unknown strategy {strategy!r}; valid: {', '.join(STRATEGIES)}")
    lcfg = cfg["learning"]
    seed = int(cfg["seed"])
    pairs = ssl_records(manifest, lcfg.get("max_images"), seed)
    if not pairs:
        raise PretrainError("no self-supervision images in the manifest")
    records = [r for r, _ in pairs]
    if images is None:
        images = load_images_downsampled(manifest, [e for _, e in pairs], factor=2)
    scale = images.shape[-1] / float(cfg["data"]["image_size"])

    torch.manual_seed(seed)
    rng = np.random.default_rng([seed, 1001])
    enc_cfg = EncoderConfig.from_learning(lcfg)
    model = ContrastiveModel(enc_cfg)
    if init_state is not None:
        model.encoder.load_state_dict(init_state)
    pool = StylePool(tuple(manifest.seen_domains), style_table(cfg["styles"]["table"]),
                     pixel_scale=scale)
    aug_cfg = AugmentConfig.from_learning(lcfg)
    n = int(cfg["pairing"]["batch_size"])
    epochs = int(lcfg["epochs"])
    steps_per_epoch = max(1, len(records) // n)
    total = epochs * steps_per_epoch
    opt = torch.optim.SGD(model.parameters(), lr=float(lcfg["lr"]), momentum=float(lcfg["momentum"]),
                          weight_decay=float(lcfg["weight_decay"]))
    tau = float(lcfg["tau"])
    w = float(lcfg["msvcl_weight"])
    alternate = lcfg["msvcl_mode"] == "alternate"
    fingerprint = pretrain_fingerprint(cfg, strategy, len(records), init_tag)

    curve: list[dict[str, float]] = []
    start_epoch = 0
    out_path = Path(out_path) if out_path is not None else None
    if resume and out_path is not None and out_path.exists():
        blob = load_checkpoint(out_path, "pretrain")
        if blob["fingerprint"] == fingerprint:
            model.load_state_dict(blob["model"])
            opt.load_state_dict(blob["optimizer"])
            rng.bit_generator.state = blob["np_rng"]
            torch.set_rng_state(blob["torch_rng"])
            curve = list(blob["curve"])
            start_epoch = int(blob["epoch"])
            log.info("resuming %s pretraining at epoch %d", strategy, start_epoch)

    load = lambda rec: images[rec.ref]  # noqa: E731
    aug = lambda img, r: augment(img, r, aug_cfg)  # noqa: E731
    same_draw = bool(cfg["pairing"]["same_draw"])
    step = start_epoch * steps_per_epoch
    t0 = time.time()
    model.train()
    for epoch in range(start_epoch, epochs):
        for _ in range(steps_per_epoch):
            for g in opt.param_groups:
                g["lr"] = _cosine(step, total, float(lcfg["lr"]))
            batches = bundle(strategy, records, n, rng, pool, same_draw)
            if alternate and len(batches) == 2:
                batches = [batches[step % 2]]
                weights = [1.0]
            elif len(batches) == 2:
                weights = [w, 1.0 - w]
            else:
                weights = [1.0]
            loss = 0.0
            for b, wt in zip(batches, weights):
                x = torch.from_numpy(materialize(b, load, pool, aug, rng))[:, None]
                z = model(x)
                loss = loss + wt * nt_xent(z, b.positive_map, b.negative_mask, tau)
            opt.zero_grad()
            loss.backward()
            opt.step()
            value = float(loss.detach())
            curve.append({"step": step, "epoch": epoch, "loss": value})
            if on_step is not None:
                on_step(step, value)
            step += 1
        log.info("pretrain %s epoch %d/%d loss %.4f (%.0fs)", strategy, epoch + 1, epochs,
                 np.mean([c["loss"] for c in curve if c["epoch"] == epoch]), time.time() - t0)
        payload = {
            "strategy": strategy, "encoder_cfg": enc_cfg.to_dict(), "fingerprint": fingerprint,
            "encoder": model.encoder.state_dict(), "model": model.state_dict(),
            "optimizer": opt.state_dict(), "np_rng": rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(), "curve": curve, "epoch": epoch + 1,
            "n_images": len(records), "init": init_tag,
        }
        if out_path is not None:
            save_checkpoint(out_path, "pretrain", payload, fingerprint)
            write_curve(curve, out_path.with_suffix(".curve.jsonl"))
    if start_epoch >= epochs:
        payload = dict(blob)
        payload.pop("header", None)
    return payload


def write_curve(curve: list[dict], path: str | Path) -> None:
    with open(path, "w") as fh:
        for row in curve:
            fh.write(json.dumps(row) + "\n")
