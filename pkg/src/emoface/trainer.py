"""Staged end-to-end training and the evaluation harness.

Training honors the residual design in three stages, all driven by the
same vertex + mouth loss through the linear face model:

  A. the audio-to-params regressor (optionally without the style vector
     or with either loss term ablated);
  B. the emotion predictor, regressed onto the video-oracle logits;
  C. the augment network, fed the frozen raw params plus smoothed and
     rescaled oracle priors, optimized against ground truth.

The learning rate starts at 1e-4 and is multiplied by a fixed factor every
ten epochs so it lands on 1e-5 at the end of any epoch budget, never going
below it. A strict single-threaded mode makes runs bit-reproducible.
"""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import blobs
from .audio import StyleEncoder
from .audio2flame import Audio2FlameNet, init_weights, predict_params
from .dataset import Corpus, Sample, samples_for, split_corpus
from .emotion import (
    EmotionAugmentNet,
    EmotionPredictorNet,
    EmotionSchedule,
    augment,
    blend_condition,
    predict_priors,
    rescale_logits,
    smooth_priors,
)
from .errors import ConfigurationError
from .face_model import FaceModel, evaluate_sequence
from .losses import (
    LossConfig,
    SignatureClassifier,
    emotion_confusion,
    lip_error,
    pool_lip_errors,
)
from .nets import save_net
from .pipeline import Bundle, save_bundle


@dataclass
class TrainConfig:
    epochs: int = 30
    predictor_epochs: int | None = None  # defaults to epochs
    augment_epochs: int | None = None  # defaults to 4 * epochs
    batch_size: int = 16
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    lr_step_epochs: int = 10
    # The published schedule suits the conv regressor; the recurrent and
    # residual stages need faster rates at desk scale (same decay shape).
    predictor_lr_scale: float = 10.0
    augment_lr_scale: float = 30.0
    # The d-weighted mouth term swamps Adam's second moments and starves the
    # emotion directions; the raw params it protects are frozen in stage C
    # anyway, so it is off there by default.
    augment_mouth_weight: float = 0.0
    seed: int = 1000
    loss: LossConfig = field(default_factory=LossConfig)
    smoothing_radius: int = 2
    split_ratios: tuple = (0.8, 0.1, 0.1)
    no_vertex_loss: bool = False  # w/o L_vx ablation
    no_mouth_loss: bool = False  # w/o L_lm ablation
    no_style: bool = False  # w/o style vector ablation
    no_emotion_module: bool = False  # raw pipeline only
    deterministic: bool = True
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.lr_end > self.lr_start:
            raise ConfigurationError("lr_end must not exceed lr_start")
        if self.no_vertex_loss and self.no_mouth_loss:
            raise ConfigurationError("cannot ablate both loss terms at once")

    @property
    def flags(self) -> dict:
        return {
            "no_vertex_loss": self.no_vertex_loss,
            "no_mouth_loss": self.no_mouth_loss,
            "no_style": self.no_style,
            "no_emotion_module": self.no_emotion_module,
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d


def lr_at(config: TrainConfig, epoch: int, n_epochs: int) -> float:
    """Piecewise-constant decay hitting lr_end at the end of the budget."""
    steps_total = max(1, math.ceil(n_epochs / config.lr_step_epochs))
    factor = (config.lr_end / config.lr_start) ** (1.0 / steps_total)
    lr = config.lr_start * factor ** (epoch // config.lr_step_epochs)
    return max(lr, config.lr_end)


# ---------------------------------------------------------------------------
# Fast loss: the mesh is linear, so losses reduce to small matrix products
# ---------------------------------------------------------------------------


class FastMeshLoss:
    """Vertex + mouth loss computed without materializing full meshes.

    Algebraically identical to evaluating the mesh: the masked vertex L1
    uses `basis @ (pred - gt)`, and the mouth descriptors only need the
    four extremity vertices' linear maps.
    """

    def __init__(self, model: FaceModel, config: LossConfig):
        self.config = config
        basis = np.concatenate([model.expression_basis, model.pose_basis], axis=2)
        masked = basis[model.vertex_mask].reshape(-1, model.n_params)
        self.masked_basis = torch.from_numpy(np.ascontiguousarray(masked))

        def pair(a, b):
            return (
                torch.from_numpy(model.template_vertices[a] - model.template_vertices[b]),
                torch.from_numpy(model.shape_basis[a] - model.shape_basis[b]),
                torch.from_numpy(np.ascontiguousarray(basis[a] - basis[b])),
            )

        ext = model.mouth_extremities
        self.h_maps = pair(ext.left, ext.right)
        self.v_maps = pair(ext.top, ext.bottom)

    def _descriptor(self, maps, params, betas):
        tpl, shp, mat = maps
        base = tpl.unsqueeze(0).unsqueeze(0) + (betas @ shp.T).unsqueeze(1)
        vec = base + params @ mat.T
        return vec.pow(2).sum(-1).sqrt()

    def per_clip(self, pred, gt, betas, valid):
        """(B,) vertex and mouth losses; `valid` is a (B, T) float mask."""
        counts = valid.sum(dim=1)
        delta = (pred - gt) @ self.masked_basis.T
        lvx = (delta.abs().mean(dim=2) * valid).sum(dim=1) / counts
        h_p = self._descriptor(self.h_maps, pred, betas)
        h_g = self._descriptor(self.h_maps, gt, betas)
        v_p = self._descriptor(self.v_maps, pred, betas)
        v_g = self._descriptor(self.v_maps, gt, betas)
        frame = self.config.d1 * (h_p - h_g).abs() + self.config.d2 * (v_p - v_g).abs()
        llm = (frame * valid).sum(dim=1) / counts
        return lvx, llm


def _pad_batch(samples: list[Sample], no_style: bool):
    b = len(samples)
    t_max = max(s.n_frames for s in samples)
    c = samples[0].content.shape[1]
    p = samples[0].params.shape[1]
    content = np.zeros((b, t_max, c))
    gt = np.zeros((b, t_max, p))
    logits = np.zeros((b, t_max, samples[0].logits.shape[1]))
    style = np.zeros((b, samples[0].style.shape[0]))
    betas = np.stack([s.beta for s in samples])
    lengths = np.array([s.n_frames for s in samples], dtype=np.int64)
    for i, s in enumerate(samples):
        content[i, : s.n_frames] = s.content
        gt[i, : s.n_frames] = s.params
        logits[i, : s.n_frames] = s.logits
        if not no_style:
            style[i] = s.style
    valid = (np.arange(t_max)[None, :] < lengths[:, None]).astype(np.float64)
    as_t = torch.from_numpy
    return (
        as_t(content),
        as_t(style),
        as_t(gt),
        as_t(logits),
        as_t(betas),
        as_t(lengths),
        as_t(valid),
    )


def _batches(ids: list[str], batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(ids))
    for start in range(0, len(ids), batch_size):
        yield [ids[i] for i in order[start : start + batch_size]]


def _raw_params_for(net: Audio2FlameNet, sample: Sample, no_style: bool) -> np.ndarray:
    style = np.zeros_like(sample.style) if no_style else sample.style
    return predict_params(net, sample.content, style)


def _val_lip_error(net, samples, model, no_style):
    reports = []
    for s in samples:
        pred = evaluate_sequence(model, s.beta, _raw_params_for(net, s, no_style))
        gt = evaluate_sequence(model, s.beta, s.params)
        reports.append(lip_error(pred, gt, model))
    return pool_lip_errors(reports)


class _JsonlLog:
    def __init__(self, path: Path):
        self.path = path
        self.path.write_text("")

    def add(self, **entry):
        with open(self.path, "a") as f:
            f.write(blobs.canonical_json(entry) + "\n")


def _stage_loop(
    *,
    name: str,
    net: torch.nn.Module,
    epochs: int,
    config: TrainConfig,
    corpus: Corpus,
    train_ids: list[str],
    batch_loss,
    val_metrics,
    log: _JsonlLog,
    ckpt_dir: Path,
    lr_scale: float = 1.0,
):
    """Shared optimization loop: Adam, lr schedule, divergence guard."""
    opt = torch.optim.Adam(net.parameters(), lr=config.lr_start, betas=(0.9, 0.999))
    best_val = math.inf
    best_state = copy.deepcopy(net.state_dict())
    last_good = copy.deepcopy(net.state_dict())
    first_loss = None
    final_loss = None
    steps = 0
    for epoch in range(epochs):
        lr = lr_at(config, epoch, epochs) * lr_scale
        for group in opt.param_groups:
            group["lr"] = lr
        rng = np.random.default_rng([config.seed, epochs, epoch, len(name)])
        epoch_losses = []
        diverged = False
        for batch_ids in _batches(train_ids, config.batch_size, rng):
            samples = samples_for(corpus, batch_ids)
            opt.zero_grad()
            loss = batch_loss(samples)
            if not torch.isfinite(loss):
                net.load_state_dict(last_good)
                log.add(stage=name, epoch=epoch, event="divergence_abort")
                diverged = True
                break
            loss.backward()
            opt.step()
            steps += 1
            epoch_losses.append(float(loss.detach()))
        if diverged:
            break
        train_loss = float(np.mean(epoch_losses))
        if first_loss is None:
            first_loss = train_loss
        final_loss = train_loss
        last_good = copy.deepcopy(net.state_dict())
        metrics = val_metrics(net)
        log.add(stage=name, epoch=epoch, lr=lr, train_loss=train_loss, **metrics)
        score = metrics.get("val_score", train_loss)
        if score < best_val:
            best_val = score
            best_state = copy.deepcopy(net.state_dict())
            save_net(net, ckpt_dir / f"{name}_best.blob", {"stage": name, "epoch": epoch})
        if (epoch + 1) % config.checkpoint_every == 0 or epoch == epochs - 1:
            save_net(
                net,
                ckpt_dir / f"{name}_epoch{epoch:03d}.blob",
                {"stage": name, "epoch": epoch, "steps": steps},
            )
    net.load_state_dict(best_state)
    return {"best_val": best_val, "first_loss": first_loss, "final_loss": final_loss}


def train(config: TrainConfig, corpus: Corpus, out_dir, splits: dict | None = None) -> dict:
    """Run all stages; writes checkpoints, a JSONL log, and a bundle."""
    t_start = time.monotonic()
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    if config.deterministic:
        torch.manual_seed(config.seed)
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)

    splits = splits or split_corpus(corpus, config.split_ratios, seed=config.seed)
    train_ids = splits["train"]
    val_samples = samples_for(corpus, splits.get("val", []))
    model = corpus.model
    fast_loss = FastMeshLoss(model, config.loss)
    w1 = 0.0 if config.no_vertex_loss else config.loss.w1
    w2 = 0.0 if config.no_mouth_loss else config.loss.w2

    a2f = init_weights(config.seed)
    style_encoder = StyleEncoder(seed=config.seed)
    predictor = EmotionPredictorNet(seed=config.seed + 1)
    predictor.set_rescale_stats(*corpus.logit_stats)
    augment_net = EmotionAugmentNet(seed=config.seed + 2)

    log = _JsonlLog(out / "train_log.jsonl")

    # --- Stage A: audio-to-params regressor -------------------------------
    def a2f_batch_loss(samples):
        content, style, gt, _, betas, lengths, valid = _pad_batch(samples, config.no_style)
        pred = a2f.forward_padded(content, style, lengths)
        lvx, llm = fast_loss.per_clip(pred, gt, betas, valid)
        return (w1 * lvx + w2 * llm).mean()

    def a2f_val(net):
        if not val_samples:
            return {}
        mean_mm, max_mm = _val_lip_error(net, val_samples, model, config.no_style)
        return {"val_lip_mean_mm": mean_mm, "val_lip_max_mm": max_mm, "val_score": mean_mm}

    stage_a = _stage_loop(
        name="audio2flame",
        net=a2f,
        epochs=config.epochs,
        config=config,
        corpus=corpus,
        train_ids=train_ids,
        batch_loss=a2f_batch_loss,
        val_metrics=a2f_val,
        log=log,
        ckpt_dir=ckpt_dir,
    )

    stages = {"audio2flame": stage_a}
    if not config.no_emotion_module:
        # --- Stage B: emotion predictor -----------------------------------
        def predictor_batch_loss(samples):
            content, _, _, logits, _, lengths, valid = _pad_batch(samples, True)
            pred = predictor.forward_padded(content, lengths)
            sq = (pred - logits).pow(2).mean(dim=2)
            return ((sq * valid).sum(dim=1) / valid.sum(dim=1)).mean()

        def predictor_val(net):
            if not val_samples:
                return {}
            with torch.no_grad():
                mses = []
                for s in val_samples:
                    pred = net(torch.from_numpy(s.content))
                    mses.append(float((pred - torch.from_numpy(s.logits)).pow(2).mean()))
            return {"val_priors_mse": float(np.mean(mses)), "val_score": float(np.mean(mses))}

        stages["predictor"] = _stage_loop(
            name="predictor",
            net=predictor,
            epochs=config.predictor_epochs or config.epochs,
            config=config,
            corpus=corpus,
            train_ids=train_ids,
            batch_loss=predictor_batch_loss,
            val_metrics=predictor_val,
            log=log,
            ckpt_dir=ckpt_dir,
            lr_scale=config.predictor_lr_scale,
        )

        # --- Stage C: augment network --------------------------------------
        low, high = corpus.logit_stats
        raw_cache: dict[str, np.ndarray] = {}
        prior_cache: dict[str, np.ndarray] = {}

        def augment_inputs(sample: Sample):
            if sample.clip_id not in raw_cache:
                raw_cache[sample.clip_id] = _raw_params_for(a2f, sample, config.no_style)
                prior_cache[sample.clip_id] = rescale_logits(
                    smooth_priors(sample.logits, config.smoothing_radius), low, high
                )
            return raw_cache[sample.clip_id], prior_cache[sample.clip_id]

        w2_aug = config.augment_mouth_weight

        def augment_batch_loss(samples):
            content, _, gt, _, betas, lengths, valid = _pad_batch(samples, config.no_style)
            b, t_max = valid.shape
            raw = torch.zeros((b, t_max, augment_net.param_dim), dtype=torch.float64)
            priors = torch.zeros((b, t_max, 7), dtype=torch.float64)
            for i, s in enumerate(samples):
                r, p = augment_inputs(s)
                raw[i, : s.n_frames] = torch.from_numpy(r)
                priors[i, : s.n_frames] = torch.from_numpy(p)
            enhanced = augment_net.forward_padded(raw, priors, lengths)
            lvx, llm = fast_loss.per_clip(enhanced, gt, betas, valid)
            return (config.loss.w1 * lvx + w2_aug * llm).mean()

        def augment_val(net):
            if not val_samples:
                return {}
            with torch.no_grad():
                losses = []
                for s in val_samples:
                    raw, priors = augment_inputs(s)
                    enhanced = net(torch.from_numpy(raw), torch.from_numpy(priors))
                    lvx, llm = fast_loss.per_clip(
                        enhanced.unsqueeze(0),
                        torch.from_numpy(s.params).unsqueeze(0),
                        torch.from_numpy(s.beta).unsqueeze(0),
                        torch.ones((1, s.n_frames), dtype=torch.float64),
                    )
                    losses.append(float(config.loss.w1 * lvx + w2_aug * llm))
            return {"val_aug_loss": float(np.mean(losses)), "val_score": float(np.mean(losses))}

        stages["augment"] = _stage_loop(
            name="augment",
            net=augment_net,
            epochs=config.augment_epochs or 4 * config.epochs,
            config=config,
            corpus=corpus,
            train_ids=train_ids,
            batch_loss=augment_batch_loss,
            val_metrics=augment_val,
            log=log,
            ckpt_dir=ckpt_dir,
            lr_scale=config.augment_lr_scale,
        )

    bundle_dir = out / "bundle"
    save_bundle(
        bundle_dir,
        face_model=model,
        audio2flame=a2f,
        style_encoder=style_encoder,
        emotion_predictor=predictor,
        emotion_augment=augment_net,
        signatures=corpus.signatures,
        meta={
            "seed": config.seed,
            "flags": config.flags,
            "smoothing_radius": config.smoothing_radius,
            "train_config": config.to_dict(),
            "config_hash": blobs.sha256_bytes(
                blobs.canonical_json(config.to_dict()).encode()
            ),
            "corpus_model_hash": corpus.manifest["model_hash"],
            "splits": splits,
        },
    )
    result = {
        "bundle": str(bundle_dir),
        "log": str(log.path),
        "stages": stages,
        "wall_seconds": time.monotonic() - t_start,
    }
    (out / "train_result.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    return result


def build_untrained_bundle(corpus: Corpus, out_dir, seed: int = 1000, flags: dict | None = None):
    """RandInit baseline: seeded networks with no training steps."""
    predictor = EmotionPredictorNet(seed=seed + 1)
    predictor.set_rescale_stats(*corpus.logit_stats)
    save_bundle(
        Path(out_dir),
        face_model=corpus.model,
        audio2flame=init_weights(seed),
        style_encoder=StyleEncoder(seed=seed),
        emotion_predictor=predictor,
        emotion_augment=EmotionAugmentNet(seed=seed + 2),
        signatures=corpus.signatures,
        meta={
            "seed": seed,
            "flags": flags or {},
            "smoothing_radius": 2,
            "corpus_model_hash": corpus.manifest["model_hash"],
            "rand_init": True,
        },
    )
    return Path(out_dir)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate(
    bundle: Bundle | str,
    corpus: Corpus,
    split_ids: list[str] | None = None,
    seed: int = 0,
) -> dict:
    """Metrics report for a checkpoint on a corpus split.

    Lip error is measured on the raw regressor outputs (the emotion stage
    is excluded from lip-sync scoring); the confusion matrix classifies
    the enhanced outputs driven by each clip's own label at intensity 1.
    """
    if not isinstance(bundle, Bundle):
        bundle = Bundle.load(bundle)
    corpus_model_hash = corpus.manifest["model_hash"]
    if bundle.manifest["files"]["face_model"] != corpus_model_hash:
        raise ConfigurationError(
            "checkpoint is incompatible with this corpus: face model hashes differ"
        )
    samples = corpus.samples if split_ids is None else samples_for(corpus, split_ids)
    if not samples:
        raise ConfigurationError("no samples selected for evaluation")
    model = bundle.face_model
    no_style = bool(bundle.flags.get("no_style"))

    reports = []
    per_clip = []
    raws = {}
    for s in samples:
        raw = _raw_params_for(bundle.audio2flame, s, no_style)
        raws[s.clip_id] = raw
        rep = lip_error(
            evaluate_sequence(model, s.beta, raw),
            evaluate_sequence(model, s.beta, s.params),
            model,
        )
        reports.append(rep)
        per_clip.append({"clip": s.clip_id, **rep.to_dict()})
    mean_mm, max_mm = pool_lip_errors(reports)

    report = {
        "checkpoint": bundle.checkpoint_hash,
        "flags": bundle.flags,
        "n_clips": len(samples),
        "lip_error": {"mean_mm": mean_mm, "max_mm": max_mm, "per_clip": per_clip},
        "priors_mse": None,
        "confusion": None,
    }
    if not bundle.flags.get("no_emotion_module"):
        mses = []
        labeled = []
        low, high = corpus.logit_stats
        window_fps = corpus.config.fps
        for s in samples:
            with torch.no_grad():
                pred_logits = bundle.emotion_predictor(torch.from_numpy(s.content)).numpy()
            mses.append(float(((pred_logits - s.logits) ** 2).mean()))
            priors = predict_priors(s.content, bundle.emotion_predictor)
            smoothed = smooth_priors(priors.logits, bundle.smoothing_radius)
            schedule = EmotionSchedule(keyframes=[(0.0, s.label, 1.0)])
            blended = blend_condition(smoothed, schedule, window_fps)
            enhanced = augment(raws[s.clip_id], blended, bundle.emotion_augment)
            labeled.append((enhanced, s.label))
        classifier = SignatureClassifier(bundle.signatures, corpus.labels)
        confusion = emotion_confusion(labeled, classifier, seed=seed)
        report["priors_mse"] = float(np.mean(mses))
        report["confusion"] = confusion.to_dict()
    return report
