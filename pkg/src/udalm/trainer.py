"""Training loops: supervised rounds, the adaptation schedule, inference.

Determinism contract: with a fixed config seed every random draw is derived
functionally from (seed, round, epoch, position), model/head initialization
from fixed offsets of the seed, and the model itself is dropout-free. A run
resumed from the last completed round therefore reproduces an uninterrupted
run bit for bit. The optimizer and the learning-rate schedule restart at
each round; model parameters carry over unless reinit_each_round is set.
"""

from __future__ import annotations

import glob
import os
from dataclasses import dataclass, replace

import numpy as np
import torch

from .adaptation import (CurriculumState, DomainClassifier, curriculum_ratio,
                         dynamic_thresholds, fixed_threshold_masks,
                         generate_pseudo_labels, no_selection_masks, total_loss,
                         write_pseudo_labels)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import (ImageSample, _balance, augment, oversample_source,
                   resize_with_labels, to_original_coords)
from .errors import ConfigError
from .model import build_model, decode_predictions
from .objectives import TargetBatch, encode_targets

SOURCE_DOMAIN, TARGET_DOMAIN = 0, 1


@dataclass
class TrainEntry:
    sample: ImageSample          # resized to model input size
    labels: np.ndarray | None    # (L, 2) input-res px; None = unlabeled
    base_mask: np.ndarray        # (L,) float; per-landmark reliability
    domain: int                  # 0 source, 1 target


@dataclass
class AdaptationResult:
    model: object
    domain_head: object | None
    checkpoint_paths: list
    pseudo_label_paths: list
    history: list


def _model_seed(seed):
    return seed * 8 + 1


def _head_seed(seed):
    return seed * 8 + 2


def _collate(batch, positions, cfg: ExperimentConfig, round_index, epoch):
    """Augment and encode one batch into loss-ready tensors."""
    w, h = cfg.model.input_size
    stride = cfg.model.stride
    W, H = cfg.model.map_size
    L = cfg.model.num_landmarks

    images, coords, scores, offsets, supports, masks, domains = [], [], [], [], [], [], []
    for entry, pos in zip(batch, positions):
        rng = np.random.default_rng([cfg.seed, round_index, epoch, 1_000_000 + pos])
        s = entry.sample
        if entry.labels is not None:
            s = replace(s, landmarks=entry.labels, landmark_valid=None)
        else:
            s = replace(s, landmarks=None, landmark_valid=None)
        aug = augment(s, cfg.augment, rng)
        images.append(aug.pixels)
        domains.append(entry.domain)

        eff_mask = np.zeros(L, dtype=np.float64)
        if aug.landmarks is not None and entry.base_mask.any():
            eff_mask = entry.base_mask * aug.landmark_valid
        if eff_mask.any():
            st, ot = encode_targets(aug.landmarks, H, W, stride, cfg.heatmap_sigma,
                                    valid=eff_mask > 0)
            coords.append(aug.landmarks / np.array([w, h]))
            scores.append(st.values)
            offsets.append(ot.values)
            supports.append(st.support)
        else:
            coords.append(np.zeros((L, 2)))
            scores.append(np.zeros((L, H, W)))
            offsets.append(np.zeros((L, 2, H, W)))
            supports.append(np.zeros((L, H, W), dtype=bool))
        masks.append(eff_mask)

    images_t = torch.from_numpy(np.stack(images)[:, None].astype(np.float32))
    targets = TargetBatch(
        coord_norm=torch.from_numpy(np.stack(coords).astype(np.float32)),
        score=torch.from_numpy(np.stack(scores).astype(np.float32)),
        offset=torch.from_numpy(np.stack(offsets).astype(np.float32)),
        support=torch.from_numpy(np.stack(supports)),
        mask=torch.from_numpy(np.stack(masks).astype(np.float32)),
    )
    domains_t = torch.tensor(domains, dtype=torch.float32)
    return images_t, targets, domains_t


def _epoch_lr(cfg, epoch):
    drops = sum(epoch >= d for d in cfg.optimizer.decay_epochs)
    return cfg.optimizer.lr * (cfg.optimizer.decay_factor ** drops)


def train_round(model, domain_head, src_entries, tgt_entries,
                cfg: ExperimentConfig, round_index: int, use_dal: bool,
                epochs: int | None = None, oversample_to: int | None = None,
                progress=None):
    """One optimization round over the source pool (plus target, if given).

    Source entries are oversampled each epoch to the target count so that
    the two domains are balanced in every epoch. When no target entries
    join the batches (DAL-free round 0), `oversample_to` keeps the epoch's
    source step count equal to what the mixed rounds use, so every round
    runs the same per-round schedule to comparable convergence.
    """
    model.train()
    params = list(model.parameters())
    if use_dal:
        domain_head.train()
        params += list(domain_head.parameters())
    opt = torch.optim.Adam(params, lr=cfg.optimizer.lr)
    n_epochs = cfg.optimizer.epochs_per_round if epochs is None else epochs
    batch_size = cfg.optimizer.batch_size

    stats = {}
    for epoch in range(n_epochs):
        lr = _epoch_lr(cfg, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        rng = np.random.default_rng([cfg.seed, round_index, epoch, 11])

        if tgt_entries:
            if len(tgt_entries) >= len(src_entries):
                src_idx = oversample_source(list(range(len(src_entries))),
                                            len(tgt_entries), rng)
                pool = [src_entries[i] for i in src_idx] + list(tgt_entries)
            else:
                tgt_idx = _balance(list(range(len(tgt_entries))), len(src_entries), rng)
                pool = list(src_entries) + [tgt_entries[i] for i in tgt_idx]
        elif oversample_to is not None and oversample_to > len(src_entries):
            src_idx = oversample_source(list(range(len(src_entries))),
                                        oversample_to, rng)
            pool = [src_entries[i] for i in src_idx]
        else:
            pool = list(src_entries)
        order = rng.permutation(len(pool))
        pool = [pool[i] for i in order]

        sums, count = {}, 0
        for start in range(0, len(pool), batch_size):
            batch = pool[start:start + batch_size]
            images, targets, domains = _collate(
                batch, range(start, start + len(batch)), cfg, round_index, epoch)
            output = model(images)
            if use_dal:
                probs = domain_head(output.features, reverse=True)
                loss, parts = total_loss(output, targets, cfg.weights, probs, domains)
            else:
                loss, parts = total_loss(output, targets, cfg.weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums["total"] = sums.get("total", 0.0) + float(loss.detach())
            for key, value in parts.items():
                sums[key] = sums.get(key, 0.0) + float(value)
            count += 1
        stats = {key: value / max(count, 1) for key, value in sums.items()}
        if progress is not None and (epoch + 1) % max(1, n_epochs // 4) == 0:
            parts_str = " ".join(f"{k}={v:.4f}" for k, v in stats.items())
            progress(f"round {round_index} epoch {epoch + 1}/{n_epochs} lr={lr:.2e} {parts_str}")
    return opt, stats


def make_entries(samples, domain, num_landmarks, labeled=True):
    entries = []
    ones = np.ones(num_landmarks, dtype=np.float64)
    zeros = np.zeros(num_landmarks, dtype=np.float64)
    for s in samples:
        if labeled and s.landmarks is not None:
            entries.append(TrainEntry(s, s.landmarks, ones.copy(), domain))
        else:
            entries.append(TrainEntry(s, None, zeros.copy(), domain))
    return entries


def train_supervised(samples, cfg: ExperimentConfig, epochs=None, progress=None):
    """Plain supervised training on one labeled set; returns the model."""
    cfg.validate()
    if not samples:
        raise ConfigError("training set is empty")
    resized = [resize_with_labels(s, cfg.model.input_size) for s in samples]
    _check_landmark_count(resized, cfg.model.num_landmarks)
    torch.manual_seed(_model_seed(cfg.seed))
    model = build_model(cfg.model)
    entries = make_entries(resized, SOURCE_DOMAIN, cfg.model.num_landmarks)
    train_round(model, None, entries, [], cfg, 0, use_dal=False,
                epochs=epochs, progress=progress)
    return model


def _check_landmark_count(samples, L):
    for s in samples:
        if s.landmarks is not None and s.landmarks.shape[0] != L:
            raise ConfigError(
                f"sample '{s.id}' has {s.landmarks.shape[0]} landmarks, "
                f"config says {L}"
            )


def _select_pseudo_labels(records, cfg, round_index) -> CurriculumState:
    mode = cfg.curriculum.selection
    if mode == "none":
        return no_selection_masks(records, round_index)
    r = curriculum_ratio(round_index, cfg.curriculum.delta)
    if mode == "dynamic":
        return dynamic_thresholds(records, r, round_index, cfg.curriculum.delta)
    level = "landmark" if mode == "fixed-landmark" else "image"
    return fixed_threshold_masks(records, cfg.curriculum.fixed_threshold,
                                 level, round_index)


def _round_ckpt(out_dir, t):
    return os.path.join(out_dir, "checkpoints", f"round_{t:03d}.ckpt")


def find_last_round(out_dir):
    paths = sorted(glob.glob(os.path.join(out_dir, "checkpoints", "round_*.ckpt")))
    if not paths:
        return None, None
    last = paths[-1]
    t = int(os.path.basename(last)[len("round_"):-len(".ckpt")])
    return t, last


def run_adaptation(source, target, cfg: ExperimentConfig, out_dir: str,
                   stop_after_round: int | None = None,
                   init_model_state=None, progress=None) -> AdaptationResult:
    """Round-based adaptation: source round 0, then self-training rounds.

    Round 0 trains on source labels, with the domain loss on mixed batches
    when DAL is enabled for round 0. Each round t >= 1 regenerates target
    pseudo-labels from the current model, selects them at ratio
    r = delta * t, and trains on the union. A checkpoint is written per
    round and a pseudo-label file per self-training round; an interrupted
    run resumes after the last completed round.
    """
    cfg.validate()
    if not source:
        raise ConfigError("source set is empty")
    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)

    size = cfg.model.input_size
    L = cfg.model.num_landmarks
    src_rs = [resize_with_labels(s, size) for s in source]
    tgt_rs = sorted((resize_with_labels(s, size) for s in target), key=lambda s: s.id)
    _check_landmark_count(src_rs, L)

    total_rounds = cfg.curriculum.total_rounds if tgt_rs else 0
    last_round = total_rounds if stop_after_round is None else min(stop_after_round, total_rounds)
    dal_active = bool(cfg.curriculum.dal and cfg.weights.lambda_domain > 0 and tgt_rs)

    src_entries = make_entries(src_rs, SOURCE_DOMAIN, L)

    resumed_round, last_path = find_last_round(out_dir)
    domain_head = None
    if resumed_round is not None:
        model, domain_head, ckpt_cfg, _, _ = load_checkpoint(last_path)
        from .config import config_to_dict
        if config_to_dict(ckpt_cfg) != config_to_dict(cfg):
            raise ConfigError(
                f"config does not match the run being resumed at {last_path}")
        start_round = resumed_round + 1
        if dal_active and domain_head is None:
            torch.manual_seed(_head_seed(cfg.seed))
            domain_head = DomainClassifier(cfg.model.embed_dim)
        if progress:
            progress(f"resuming after round {resumed_round}")
    else:
        torch.manual_seed(_model_seed(cfg.seed))
        model = build_model(cfg.model)
        if dal_active:
            torch.manual_seed(_head_seed(cfg.seed))
            domain_head = DomainClassifier(cfg.model.embed_dim)
        start_round = 0
        if init_model_state is not None:
            # warm start: the provided weights stand in for round 0
            model.load_state_dict(init_model_state)
            save_checkpoint(_round_ckpt(out_dir, 0), model, cfg, 0,
                            domain_head if dal_active else None)
            start_round = 1

    checkpoints = sorted(glob.glob(os.path.join(out_dir, "checkpoints", "round_*.ckpt")))
    pseudo_files = sorted(glob.glob(os.path.join(out_dir, "pseudo_labels", "round_*.json")))
    history = []

    for t in range(start_round, last_round + 1):
        if t == 0:
            use_dal = dal_active and cfg.curriculum.dal_round0
            tgt_entries = (make_entries(tgt_rs, TARGET_DOMAIN, L, labeled=False)
                           if use_dal else [])
            if progress:
                progress(f"round 0: source training"
                         + (" with domain adversarial loss" if use_dal else ""))
            opt, stats = train_round(model, domain_head, src_entries, tgt_entries,
                                     cfg, 0, use_dal, progress=progress)
        else:
            records = generate_pseudo_labels(model, tgt_rs,
                                             cfg.optimizer.batch_size, t)
            state = _select_pseudo_labels(records, cfg, t)
            pl_path = os.path.join(out_dir, "pseudo_labels", f"round_{t:03d}.json")
            write_pseudo_labels(pl_path, records, state)
            pseudo_files.append(pl_path)
            if progress:
                counts = np.stack([rec.mask for rec in records]).sum(axis=0)
                progress(f"round {t}: r={state.ratio:.2f} selected per landmark "
                         f"{counts.tolist()}")

            rec_by_id = {rec.image_id: rec for rec in records}
            tgt_entries = [
                TrainEntry(s, rec_by_id[s.id].coords,
                           rec_by_id[s.id].mask.astype(np.float64), TARGET_DOMAIN)
                for s in tgt_rs
            ]
            if cfg.curriculum.reinit_each_round:
                torch.manual_seed(_model_seed(cfg.seed))
                model = build_model(cfg.model)
            opt, stats = train_round(model, domain_head, src_entries, tgt_entries,
                                     cfg, t, dal_active, progress=progress)
        ckpt_path = _round_ckpt(out_dir, t)
        save_checkpoint(ckpt_path, model, cfg, t,
                        domain_head if dal_active else None, opt)
        checkpoints.append(ckpt_path)
        history.append({"round": t, **stats})

    return AdaptationResult(model=model, domain_head=domain_head,
                            checkpoint_paths=sorted(set(checkpoints)),
                            pseudo_label_paths=sorted(set(pseudo_files)),
                            history=history)


def predict_dataset(model, samples, batch_size=16):
    """Inference on arbitrary-resolution samples.

    Returns per-sample (L, 2) coordinate arrays mapped back to each
    sample's original resolution, plus (L,) confidences.
    """
    cfg = model.config
    was_training = model.training
    model.eval()
    coords_out, conf_out = [], []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            resized = [resize_with_labels(s, cfg.input_size) for s in chunk]
            images = torch.from_numpy(
                np.stack([s.pixels for s in resized])[:, None].astype(np.float32))
            preds = decode_predictions(model(images), cfg.stride, cfg.input_size)
            for rs, pred in zip(resized, preds):
                coords_out.append(to_original_coords(pred.coords, rs))
                conf_out.append(pred.confidences)
    if was_training:
        model.train()
    return coords_out, conf_out
