"""Multitask training loop.

Per step: encode the triplet batch, build every composed-query variant the
enabled losses need, evaluate the weighted total, and update only the
designated trainable parameters (vision LayerNorms, converter, prompt rows,
decoder) with per-group learning rates. Checkpoints are atomic and carry a
droppable decoder section.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml

from .adapter import EncoderAdapter, TokenSequence
from .composer import QueryComposer
from .data import DatasetManifest, ImageStore, PhraseSet, load_phrase_set
from .decoder import ReconDecoder
from .errors import ConfigError, ManifestError
from .losses import BatchBundle, LossToggles, LossWeights, Margins, loss_total

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1
INFERENCE_SECTIONS = ("backbone", "converter", "prompt")


@dataclass
class TrainConfig:
    backbone: str = "mini"
    backbone_weights: str | None = None
    epochs: int = 100
    batch_size: int = 128
    seed: int = 0
    lr_prompt: float = 1e-5        # prompt rows + vision LayerNorms
    lr_decoder: float = 1e-4
    lr_converter: float = 1e-3
    weight_decay: float = 0.09
    grad_clip: float = 1.0
    margins: Margins = field(default_factory=Margins)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    ablation: str = "full"
    negatives: str = "sampled"     # "sampled": one random negative per anchor;
                                   # "in_batch": every other in-batch photo
    n_pseudo_tokens: int = 1
    converter_hidden: int | None = None  # None: 2x embed dim
    decoder_channels: int = 48
    val_every: int = 10            # epochs between validations (0 = off)
    checkpoint_every_steps: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.negatives not in ("sampled", "in_batch"):
            raise ConfigError(f"unknown negative mode {self.negatives!r}")
        if self.negatives == "in_batch" and self.batch_size < 2:
            raise ConfigError("in-batch negatives need batch_size >= 2")
        for lr in (self.lr_prompt, self.lr_decoder, self.lr_converter):
            if lr <= 0:
                raise ConfigError("learning rates must be positive")

    def toggles(self) -> LossToggles:
        return LossToggles.from_ablation(self.ablation)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        if "margins" in raw and isinstance(raw["margins"], dict):
            raw["margins"] = Margins(**raw["margins"])
        if "loss_weights" in raw and isinstance(raw["loss_weights"], dict):
            raw["loss_weights"] = LossWeights(**raw["loss_weights"])
        return cls(**raw)

    @classmethod
    def from_yaml(cls, path: str | Path, overrides: list[str] | None = None) -> "TrainConfig":
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        for item in overrides or []:
            key, _, value = item.partition("=")
            if not _:
                raise ConfigError(f"override {item!r} is not key=value")
            _apply_override(raw, key.strip(), yaml.safe_load(value))
        return cls.from_dict(raw)


def _apply_override(raw: dict, dotted: str, value):
    parts = dotted.split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def step_seed(seed: int, epoch: int, step: int) -> int:
    """Functional per-step seed so batch selection is resumable."""
    h = hashlib.blake2b(f"{seed}:{epoch}:{step}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def checkpoint_fingerprint(backbone_sd: dict, converter_sd: dict,
                           prompt: torch.Tensor) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(backbone_sd.items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().to(torch.float32).numpy().tobytes())
    for name, tensor in sorted(converter_sd.items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().to(torch.float32).numpy().tobytes())
    h.update(prompt.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]


class Trainer:
    def __init__(self, config: TrainConfig):
        self.config = config
        self.adapter = EncoderAdapter.from_id(config.backbone, config.backbone_weights)
        self.composer = QueryComposer(
            self.adapter, n_tokens=config.n_pseudo_tokens,
            hidden=config.converter_hidden, init_seed=config.seed,
        )
        self.decoder = ReconDecoder(
            self.adapter.config.embed_dim, self.adapter.config.image_resolution,
            base_channels=config.decoder_channels, init_seed=config.seed,
        )
        self.toggles = config.toggles()
        self.neutral = load_phrase_set("neutral_text")
        self.fixed_prompts = load_phrase_set("handcrafted_prompt")
        self.optimizer = self._build_optimizer()
        self.epoch = 0
        self.step_in_epoch = 0
        self.global_step = 0
        self.best_val = -1.0
        self._metrics_fh = None

    def _build_optimizer(self) -> torch.optim.AdamW:
        prompt_group = list(self.adapter.trainable_parameters().values())
        prompt_group.append(self.composer.prompt)
        groups = [
            {"params": prompt_group, "lr": self.config.lr_prompt},
            {"params": list(self.decoder.parameters()), "lr": self.config.lr_decoder},
            {"params": list(self.composer.converter.parameters()),
             "lr": self.config.lr_converter},
        ]
        return torch.optim.AdamW(groups, weight_decay=self.config.weight_decay)

    # ---- bundle construction ----

    def build_bundle(self, sketches: torch.Tensor, positives: torch.Tensor,
                     negatives: torch.Tensor | None, pos_pixels: torch.Tensor | None,
                     rng: np.random.Generator,
                     photo_ids: list[str] | None = None) -> BatchBundle:
        t = self.toggles
        need_diff = t.comp or t.reg or t.rec
        sketch_g, _ = self.adapter.encode_images(sketches)
        pos_g, pos_patches = self.adapter.encode_images(positives)

        pseudo = self.composer.converter(sketch_g)         # (B, n, width)
        prompt = self.composer.prompt
        b = sketches.shape[0]

        plain_seqs = [torch.cat([prompt, pseudo[i]]) for i in range(b)]
        queries_plain = self.adapter.encode_sequences(
            [TokenSequence(s) for s in plain_seqs]
        )

        bundle = BatchBundle(queries_plain=queries_plain, photo_pos=pos_g)
        if self.config.negatives == "in_batch":
            if b < 2:
                raise ConfigError("in-batch negatives need at least 2 anchors")
            if photo_ids is None:
                photo_ids = [str(i) for i in range(b)]
            others = torch.tensor([[j for j in range(b) if j != i] for i in range(b)])
            bundle.photo_neg = pos_g[others]                       # (B, B-1, d)
            bundle.neg_mask = torch.tensor(
                [[photo_ids[j] != photo_ids[i] for j in range(b) if j != i]
                 for i in range(b)]
            )
            if t.rt:
                bundle.patches_pos = pos_patches
                bundle.patches_neg = pos_patches[others]           # (B, B-1, T, d)
        else:
            neg_g, neg_patches = self.adapter.encode_images(negatives)
            bundle.photo_neg = neg_g
            if t.rt:
                bundle.patches_pos = pos_patches
                bundle.patches_neg = neg_patches
        if need_diff:
            delta = self.composer.converter((pos_g - sketch_g).abs())
            diff_seqs = [torch.cat([prompt, pseudo[i], delta[i]]) for i in range(b)]
            bundle.queries_diff = self.adapter.encode_sequences(
                [TokenSequence(s) for s in diff_seqs]
            )
        if t.reg:
            neutral_seqs = []
            for i in range(b):
                phrase = self.neutral.sample(rng)
                emb = self.adapter.embed_words(phrase).embeddings
                neutral_seqs.append(torch.cat([prompt, pseudo[i], emb]))
            bundle.queries_neutral = self.adapter.encode_sequences(
                [TokenSequence(s) for s in neutral_seqs]
            )
        if t.tt:
            fixed_seqs = []
            for i in range(b):
                phrase = self.fixed_prompts.sample(rng)
                emb = self.adapter.embed_words(phrase).embeddings
                fixed_seqs.append(torch.cat([emb, pseudo[i]]))
            bundle.queries_fixed = self.adapter.encode_sequences(
                [TokenSequence(s) for s in fixed_seqs]
            )
        if t.rec:
            if pos_pixels is None:
                raise ConfigError("reconstruction loss enabled but no target pixels given")
            bundle.photos_pos_pixels = pos_pixels
        return bundle

    # ---- stepping ----

    def train_step(self, sketches, positives, negatives, pos_pixels,
                   rng: np.random.Generator,
                   photo_ids: list[str] | None = None) -> dict[str, float]:
        self.adapter.train_mode()
        self.decoder.train()
        bundle = self.build_bundle(sketches, positives, negatives, pos_pixels, rng,
                                   photo_ids=photo_ids)
        total, breakdown = loss_total(
            bundle, self.config.loss_weights, self.config.margins,
            self.toggles, decoder=self.decoder,
        )
        if not torch.isfinite(total):
            raise RuntimeError(
                f"non-finite loss at step {self.global_step}; breakdown: {breakdown}"
            )
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        if self.config.grad_clip > 0:
            params = [p for g in self.optimizer.param_groups for p in g["params"]]
            torch.nn.utils.clip_grad_norm_(params, self.config.grad_clip)
        self.optimizer.step()
        breakdown["total"] = float(total.detach())
        return breakdown

    # ---- validation ----

    def validate(self, manifest: DatasetManifest, store: ImageStore,
                 split: str) -> float:
        """Sketch-only Acc@1 against the split's photos."""
        pairs = manifest.split_pairs(split)
        if not pairs:
            return float("nan")
        was_training = self.adapter.training
        self.adapter.eval_mode()
        photo_ids: dict[str, int] = {}
        feats = []
        for p in pairs:
            if p.photo_path not in photo_ids:
                photo_ids[p.photo_path] = len(photo_ids)
                g, _ = self.adapter.encode_images(store.load(p.photo_path)[None])
                feats.append(F.normalize(g[0], dim=0))
        gallery = torch.stack(feats)
        hits = 0
        for p in pairs:
            q = self.composer.build_inference_query(store.load(p.sketch_path))
            best = int(torch.argmax(gallery @ q))
            hits += int(best == photo_ids[p.photo_path])
        if was_training:
            self.adapter.train_mode()
        return hits / len(pairs)

    # ---- fit loop ----

    def fit(self, manifest: DatasetManifest) -> Path:
        cfg = self.config
        out_dir = Path(cfg.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        store = ImageStore(manifest.root, self.adapter.preprocess)
        train_pairs = manifest.split_pairs("train")
        if not train_pairs:
            raise ManifestError("cannot fit: train split is empty")
        n = len(train_pairs)
        steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
        val_split = "test" if manifest.split_pairs("test") else "train"
        self._metrics_fh = open(out_dir / "metrics.jsonl", "a", encoding="utf-8")
        try:
            while self.epoch < cfg.epochs:
                for step in range(self.step_in_epoch, steps_per_epoch):
                    seed = step_seed(cfg.seed, self.epoch, step)
                    rng = np.random.default_rng(seed)
                    batch, photo_ids = self._epoch_batch(train_pairs, store, step, rng)
                    breakdown = self.train_step(*batch, rng, photo_ids=photo_ids)
                    self.global_step += 1
                    self.step_in_epoch = step + 1
                    self._log_metrics({"step": self.global_step, "epoch": self.epoch,
                                       "losses": breakdown})
                    if (cfg.checkpoint_every_steps
                            and self.global_step % cfg.checkpoint_every_steps == 0):
                        self.save_checkpoint(out_dir / "last.pt")
                self.epoch += 1
                self.step_in_epoch = 0
                if cfg.val_every and (self.epoch % cfg.val_every == 0
                                      or self.epoch == cfg.epochs):
                    acc1 = self.validate(manifest, store, val_split)
                    self._log_metrics({"step": self.global_step, "epoch": self.epoch,
                                       "val_acc1": acc1, "val_split": val_split})
                    log.info("epoch %d val acc@1=%.3f", self.epoch, acc1)
                    if acc1 >= self.best_val:
                        self.best_val = acc1
                        self.save_checkpoint(out_dir / "best.pt")
            path = out_dir / "last.pt"
            self.save_checkpoint(path)
            if not (out_dir / "best.pt").exists():
                self.save_checkpoint(out_dir / "best.pt")
            return path
        finally:
            self._metrics_fh.close()
            self._metrics_fh = None

    def _epoch_batch(self, train_pairs, store: ImageStore, step: int,
                     rng: np.random.Generator):
        """Partition the epoch permutation into batches. In sampled mode a
        random non-matching negative photo is drawn per anchor; in in-batch
        mode the other anchors' positives serve as negatives."""
        cfg = self.config
        n = len(train_pairs)
        perm_rng = np.random.default_rng(step_seed(cfg.seed, self.epoch, -1))
        perm = perm_rng.permutation(n)
        lo = step * cfg.batch_size
        hi = min(n, lo + cfg.batch_size)
        anchors = [int(a) for a in perm[lo:hi]]
        if not anchors:
            anchors = [int(a) for a in perm[:cfg.batch_size]]
        if cfg.negatives == "in_batch" and len(anchors) == 1:
            extra = [int(a) for a in perm if int(a) not in anchors]
            anchors.append(extra[0] if extra else anchors[0])
        sketches, positives, negatives, pixels = [], [], [], []
        photo_ids = []
        res = self.adapter.config.image_resolution
        for a in anchors:
            pair = train_pairs[a]
            sketches.append(store.load(pair.sketch_path))
            positives.append(store.load(pair.photo_path))
            photo_ids.append(pair.photo_path)
            if cfg.negatives == "sampled":
                candidates = [j for j in range(n)
                              if train_pairs[j].photo_path != pair.photo_path]
                neg = train_pairs[int(rng.choice(candidates))]
                negatives.append(store.load(neg.photo_path))
            if self.toggles.rec:
                pixels.append(store.load_raw01(pair.photo_path, res))
        pos_pixels = torch.stack(pixels) if pixels else None
        neg_tensor = torch.stack(negatives) if negatives else None
        batch = (torch.stack(sketches), torch.stack(positives), neg_tensor, pos_pixels)
        return batch, photo_ids

    def _log_metrics(self, record: dict):
        if self._metrics_fh is not None:
            self._metrics_fh.write(json.dumps(record) + "\n")
            self._metrics_fh.flush()

    # ---- checkpointing ----

    def save_checkpoint(self, path: str | Path):
        path = Path(path)
        backbone_sd = self.adapter.backbone.state_dict()
        converter_sd = self.composer.converter.state_dict()
        payload = {
            "schema": CHECKPOINT_SCHEMA,
            "config": self.config.to_dict(),
            "backbone": backbone_sd,
            "converter": converter_sd,
            "prompt": self.composer.prompt.detach().clone(),
            "decoder": self.decoder.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "epoch": self.epoch,
            "step_in_epoch": self.step_in_epoch,
            "global_step": self.global_step,
            "best_val": self.best_val,
            "torch_rng": torch.get_rng_state(),
            "fingerprint": checkpoint_fingerprint(
                backbone_sd, converter_sd, self.composer.prompt),
        }
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(payload, tmp)
        os.replace(tmp, path)

    @classmethod
    def resume(cls, path: str | Path) -> "Trainer":
        payload = torch.load(path, map_location="cpu", weights_only=False)
        if payload.get("schema") != CHECKPOINT_SCHEMA:
            raise ConfigError(f"unsupported checkpoint schema {payload.get('schema')!r}")
        trainer = cls(TrainConfig.from_dict(payload["config"]))
        trainer.adapter.backbone.load_state_dict(payload["backbone"])
        trainer.composer.load_state({"converter": payload["converter"],
                                     "prompt": payload["prompt"]})
        trainer.decoder.load_state_dict(payload["decoder"])
        trainer.optimizer.load_state_dict(payload["optimizer"])
        trainer.epoch = payload["epoch"]
        trainer.step_in_epoch = payload["step_in_epoch"]
        trainer.global_step = payload["global_step"]
        trainer.best_val = payload["best_val"]
        torch.set_rng_state(payload["torch_rng"])
        return trainer


def load_checkpoint(path: str | Path, drop_decoder: bool = True) -> dict:
    """Load a checkpoint for inference; the decoder section is droppable."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("schema") != CHECKPOINT_SCHEMA:
        raise ConfigError(f"unsupported checkpoint schema {payload.get('schema')!r}")
    for section in INFERENCE_SECTIONS:
        if section not in payload:
            raise ConfigError(f"checkpoint missing required section {section!r}")
    if drop_decoder:
        payload.pop("decoder", None)
        payload.pop("optimizer", None)
    return payload


def load_inference_model(path: str | Path) -> tuple[EncoderAdapter, QueryComposer, dict]:
    """Rebuild the frozen inference pipeline from a checkpoint."""
    payload = load_checkpoint(path, drop_decoder=True)
    cfg = TrainConfig.from_dict(payload["config"])
    adapter = EncoderAdapter.from_id(cfg.backbone)
    adapter.backbone.load_state_dict(payload["backbone"])
    composer = QueryComposer(adapter, n_tokens=cfg.n_pseudo_tokens,
                             hidden=cfg.converter_hidden, init_seed=cfg.seed)
    composer.load_state({"converter": payload["converter"], "prompt": payload["prompt"]})
    adapter.eval_mode()
    meta = {"fingerprint": payload["fingerprint"], "config": payload["config"]}
    return adapter, composer, meta
